use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeometry, NormStats};
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    ChannelMul { x: Var, scale: Var },
    ChannelAffine { x: Var, scale: Var, shift: Var },
    GroupNorm { x: Var, gamma: Var, beta: Var, stats: NormStats },
    AvgPool { x: Var, k: usize },
    Conv2d { x: Var, weight: Var, bias: Var, geo: ConvGeometry },
    Pointwise { x: Var, weight: Var, bias: Var },
    Linear { x: Var, weight: Var, bias: Var },
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    SpatialMean(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    KlDiv { log_q: Var, log_p: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, smoothing: f32 },
    Relation { x: Var, norms: Vec<f32> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    flops: u64,
}

/// Define-by-run recording of kernel applications.
///
/// Nodes are appended in execution order, so reverse index order is a valid
/// reverse topological order. A tape supports one backward pass; call
/// [`Tape::reset_grads`] to run another.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    grad_enabled: bool,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            backward_done: false,
        }
    }

    /// A tape on which nothing requires a gradient.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sum of the floating-point operation estimates of every recorded kernel.
    pub fn flops(&self) -> u64 {
        self.nodes.iter().map(|n| n.flops).sum()
    }

    /// Number of recorded kernel applications, excluding leaves.
    pub fn kernel_count(&self) -> usize {
        self.nodes.iter().filter(|n| !matches!(n.op, Op::Leaf)).count()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad && self.grad_enabled, Op::Leaf, 0)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.check(v).map(|_| self.nodes[v.index].requires_grad).unwrap_or(false)
    }

    /// Gradient of the last backward pass with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        if v.tape != self.id {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like `v`; zeros when nothing flowed.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let value = self.value(v);
        match self.grad(v) {
            Some(g) => Tensor::new(value.shape().to_vec(), g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(value.shape()),
        }
    }

    /// Clears gradients so another backward pass may run.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op, flops: u64) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            flops,
        });
        Var { tape: self.id, index }
    }

    fn record(&mut self, op_name: &'static str, value: Tensor, inputs: &[Var], op: Op, flops: u64) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op_name));
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|&v| self.nodes[v.index].requires_grad);
        Ok(self.push(value, requires_grad, op, flops))
    }

    fn checked(&self, vars: &[Var]) -> Result<()> {
        vars.iter().try_for_each(|&v| self.check(v))
    }

    // -- elementwise ------------------------------------------------------

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Var> {
        self.checked(&[a, b])?;
        let (ta, tb) = (self.value(a), self.value(b));
        kernels::ensure_same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let flops = out.numel() as u64;
        self.record(name, out, &[a, b], op, flops)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Result<Var> {
        self.check(x)?;
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let flops = out.numel() as u64;
        self.record("scale", out, &[x], Op::Scale(x, factor), flops)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| kernels::gelu(v)).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let flops = 8 * out.numel() as u64;
        self.record("gelu", out, &[x], Op::Gelu(x), flops)
    }

    // -- per-channel broadcasts --------------------------------------------

    /// `y[n, c, ..] = x[n, c, ..] * scale[c]`.
    pub fn channel_mul(&mut self, x: Var, scale: Var) -> Result<Var> {
        self.checked(&[x, scale])?;
        let (tx, ts) = (self.value(x), self.value(scale));
        let (_, c, inner) = kernels::channel_view(tx.shape(), "channel_mul")?;
        if ts.numel() != c {
            return Err(Error::shape("channel_mul", format!("scale length {} vs {c} channels", ts.numel())));
        }
        let mut data = tx.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v *= ts.data()[(i / inner) % c];
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let flops = out.numel() as u64;
        self.record("channel_mul", out, &[x, scale], Op::ChannelMul { x, scale }, flops)
    }

    /// `y[n, c, ..] = x[n, c, ..] * scale[c] + shift[c]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        self.checked(&[x, scale, shift])?;
        let (tx, ts, tb) = (self.value(x), self.value(scale), self.value(shift));
        let (_, c, inner) = kernels::channel_view(tx.shape(), "channel_affine")?;
        if ts.numel() != c || tb.numel() != c {
            return Err(Error::shape(
                "channel_affine",
                format!("scale/shift lengths {}/{} vs {c} channels", ts.numel(), tb.numel()),
            ));
        }
        let mut data = tx.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            let ch = (i / inner) % c;
            *v = *v * ts.data()[ch] + tb.data()[ch];
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let flops = 2 * out.numel() as u64;
        self.record("channel_affine", out, &[x, scale, shift], Op::ChannelAffine { x, scale, shift }, flops)
    }

    // -- normalization and spatial ops -------------------------------------

    /// Group normalization with one group: per-sample statistics over `C·H·W`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        self.checked(&[x, gamma, beta])?;
        let (out, stats) = kernels::group_norm_1(self.value(x), self.value(gamma).data(), self.value(beta).data(), eps)?;
        let flops = 7 * out.numel() as u64;
        self.record("group_norm", out, &[x, gamma, beta], Op::GroupNorm { x, gamma, beta, stats }, flops)
    }

    pub fn avg_pool_same(&mut self, x: Var, k: usize) -> Result<Var> {
        self.check(x)?;
        let out = kernels::avg_pool_same(self.value(x), k)?;
        let flops = (2 * k * k + 2) as u64 * out.numel() as u64;
        self.record("avg_pool_same", out, &[x], Op::AvgPool { x, k }, flops)
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, geo: ConvGeometry) -> Result<Var> {
        self.checked(&[x, weight, bias])?;
        let out = kernels::conv2d(self.value(x), self.value(weight), self.value(bias).data(), geo)?;
        let flops = (2 * self.value(weight).numel() / self.value(weight).shape()[0] + 1) as u64 * out.numel() as u64;
        self.record("conv2d", out, &[x, weight, bias], Op::Conv2d { x, weight, bias, geo }, flops)
    }

    pub fn pointwise(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        self.checked(&[x, weight, bias])?;
        let out = kernels::pointwise(self.value(x), self.value(weight), self.value(bias).data())?;
        let flops = (2 * self.value(weight).shape()[1] + 1) as u64 * out.numel() as u64;
        self.record("pointwise", out, &[x, weight, bias], Op::Pointwise { x, weight, bias }, flops)
    }

    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        self.checked(&[x, weight, bias])?;
        let out = kernels::linear(self.value(x), self.value(weight), self.value(bias).data())?;
        let flops = (2 * self.value(weight).shape()[1] + 1) as u64 * out.numel() as u64;
        self.record("linear", out, &[x, weight, bias], Op::Linear { x, weight, bias }, flops)
    }

    /// `(N, C, H, W) -> (N, C)` mean over spatial positions.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let tx = self.value(x);
        let (n, c, h, w) = tx.dims4()?;
        let pix = (h * w) as f32;
        let data = tx
            .data()
            .chunks((h * w).max(1))
            .map(|plane| plane.iter().sum::<f32>() / pix)
            .collect();
        let out = Tensor::new(vec![n, c], data)?;
        let flops = tx.numel() as u64;
        self.record("spatial_mean", out, &[x], Op::SpatialMean(x), flops)
    }

    /// `(N, C, H, W) -> (N, HW, HW)` Gram matrices of unit-normalized tokens.
    pub fn relation_matrix(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let (out, norms) = kernels::relation_matrix(self.value(x))?;
        let (_, c, h, w) = self.value(x).dims4()?;
        let flops = (2 * c as u64 + 1) * out.numel() as u64 + 3 * (c * h * w) as u64;
        self.record("relation_matrix", out, &[x], Op::Relation { x, norms }, flops)
    }

    // -- distributions ------------------------------------------------------

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = kernels::softmax_rows(self.value(x))?;
        let flops = 4 * out.numel() as u64;
        self.record("softmax", out, &[x], Op::Softmax(x), flops)
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = kernels::log_softmax_rows(self.value(x))?;
        let flops = 4 * out.numel() as u64;
        self.record("log_softmax", out, &[x], Op::LogSoftmax(x), flops)
    }

    // -- reductions to a scalar -------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let tx = self.value(x);
        let total = tx.data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        let flops = tx.numel() as u64;
        self.record("sum", Tensor::scalar(total), &[x], Op::Sum(x), flops)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let tx = self.value(x);
        if tx.numel() == 0 {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let total = tx.data().iter().map(|&v| v as f64).sum::<f64>() / tx.numel() as f64;
        let flops = tx.numel() as u64;
        self.record("mean", Tensor::scalar(total as f32), &[x], Op::Mean(x), flops)
    }

    /// Mean of squared differences over every element.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.checked(&[a, b])?;
        let (ta, tb) = (self.value(a), self.value(b));
        kernels::ensure_same_shape("mse", ta, tb)?;
        if ta.numel() == 0 {
            return Err(Error::invalid("mse of empty tensors"));
        }
        let total = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| {
                let d = (x - y) as f64;
                d * d
            })
            .sum::<f64>()
            / ta.numel() as f64;
        let flops = 3 * ta.numel() as u64;
        self.record("mse", Tensor::scalar(total as f32), &[a, b], Op::Mse(a, b), flops)
    }

    /// `KL(p || q)` averaged over rows, both given as log-probabilities of
    /// shape `(N, K)`. Identical inputs give exactly zero.
    pub fn kl_div(&mut self, log_q: Var, log_p: Var) -> Result<Var> {
        self.checked(&[log_q, log_p])?;
        let (tq, tp) = (self.value(log_q), self.value(log_p));
        kernels::ensure_same_shape("kl_div", tq, tp)?;
        let (n, _) = tq.dims2()?;
        let total = tp
            .data()
            .iter()
            .zip(tq.data())
            .map(|(&lp, &lq)| {
                let p = (lp as f64).exp();
                if p > 0.0 {
                    p * (lp as f64 - lq as f64)
                } else {
                    0.0
                }
            })
            .sum::<f64>()
            / n.max(1) as f64;
        let flops = 4 * tq.numel() as u64;
        self.record("kl_div", Tensor::scalar(total as f32), &[log_q, log_p], Op::KlDiv { log_q, log_p }, flops)
    }

    /// Mean cross-entropy of `(N, K)` logits against class indices, with the
    /// target distribution `(1 - smoothing)·onehot + smoothing / K`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: f32) -> Result<Var> {
        self.check(logits)?;
        let tl = self.value(logits);
        let (n, k) = tl.dims2()?;
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", format!("{} targets for batch {n}", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::invalid(format!("target {bad} out of range for {k} classes")));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::invalid(format!("label smoothing {smoothing} outside [0, 1)")));
        }
        let logp = kernels::log_softmax_rows(tl)?;
        let mut total = 0.0f64;
        for (row, &t) in logp.data().chunks(k).zip(targets) {
            let nll = -row[t] as f64;
            let uniform = -row.iter().map(|&v| v as f64).sum::<f64>() / k as f64;
            total += (1.0 - smoothing as f64) * nll + smoothing as f64 * uniform;
        }
        let out = Tensor::scalar((total / n as f64) as f32);
        let flops = 6 * tl.numel() as u64;
        self.record(
            "cross_entropy",
            out,
            &[logits],
            Op::CrossEntropy { logits, targets: targets.to_vec(), smoothing },
            flops,
        )
    }

    // -- reverse pass ---------------------------------------------------------

    /// Populates gradients of the scalar `loss` with respect to every recorded
    /// value that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = self.nodes[loss.index].value.shape().to_vec();
        if self.nodes[loss.index].value.numel() != 1 {
            return Err(Error::NotScalar(shape));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.index].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.index] = Some(vec![1.0]);
        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                for (v, dv) in self.local_grads(&node.op, &node.value, &g) {
                    if self.nodes[v.index].requires_grad {
                        accumulate(&mut grads[v.index], dv);
                    }
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.index].value
    }

    /// Vector-Jacobian products of one node with respect to its inputs.
    fn local_grads(&self, op: &Op, out: &Tensor, g: &[f32]) -> Vec<(Var, Vec<f32>)> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let da = g.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                let db = g.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(x, f) => vec![(*x, g.iter().map(|v| v * f).collect())],
            Op::ChannelMul { x, scale } => {
                let (tx, ts) = (self.val(*x), self.val(*scale));
                let (_, c, inner) = kernels::channel_view(tx.shape(), "channel_mul").expect("validated");
                let mut dx = g.to_vec();
                let mut ds = vec![0.0f64; c];
                for (i, d) in dx.iter_mut().enumerate() {
                    let ch = (i / inner) % c;
                    ds[ch] += (*d * tx.data()[i]) as f64;
                    *d *= ts.data()[ch];
                }
                vec![(*x, dx), (*scale, ds.into_iter().map(|v| v as f32).collect())]
            }
            Op::ChannelAffine { x, scale, shift } => {
                let (tx, ts) = (self.val(*x), self.val(*scale));
                let (_, c, inner) = kernels::channel_view(tx.shape(), "channel_affine").expect("validated");
                let mut dx = g.to_vec();
                let mut ds = vec![0.0f64; c];
                let mut db = vec![0.0f64; c];
                for (i, d) in dx.iter_mut().enumerate() {
                    let ch = (i / inner) % c;
                    ds[ch] += (*d * tx.data()[i]) as f64;
                    db[ch] += *d as f64;
                    *d *= ts.data()[ch];
                }
                vec![
                    (*x, dx),
                    (*scale, ds.into_iter().map(|v| v as f32).collect()),
                    (*shift, db.into_iter().map(|v| v as f32).collect()),
                ]
            }
            Op::GroupNorm { x, gamma, beta, stats } => {
                let (dx, dg, db) = kernels::group_norm_1_backward(self.val(*x), self.val(*gamma).data(), stats, g);
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::AvgPool { x, k } => vec![(*x, kernels::avg_pool_same_backward(out.shape(), *k, g))],
            Op::Conv2d { x, weight, bias, geo } => {
                let (dx, dw, db) = kernels::conv2d_backward(self.val(*x), self.val(*weight), *geo, out.shape(), g);
                vec![(*x, dx), (*weight, dw), (*bias, db)]
            }
            Op::Pointwise { x, weight, bias } => {
                let (dx, dw, db) = kernels::pointwise_backward(self.val(*x), self.val(*weight), g);
                vec![(*x, dx), (*weight, dw), (*bias, db)]
            }
            Op::Linear { x, weight, bias } => {
                let (dx, dw, db) = kernels::linear_backward(self.val(*x), self.val(*weight), g);
                vec![(*x, dx), (*weight, dw), (*bias, db)]
            }
            Op::Gelu(x) => {
                let dx = g
                    .iter()
                    .zip(self.val(*x).data())
                    .map(|(d, &v)| d * kernels::gelu_grad(v))
                    .collect();
                vec![(*x, dx)]
            }
            Op::Softmax(x) => {
                let k = out.shape()[1];
                let mut dx = vec![0.0f32; g.len()];
                for ((d, gr), y) in dx.chunks_mut(k).zip(g.chunks(k)).zip(out.data().chunks(k)) {
                    let dot: f32 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        d[j] = y[j] * (gr[j] - dot);
                    }
                }
                vec![(*x, dx)]
            }
            Op::LogSoftmax(x) => {
                let k = out.shape()[1];
                let mut dx = vec![0.0f32; g.len()];
                for ((d, gr), y) in dx.chunks_mut(k).zip(g.chunks(k)).zip(out.data().chunks(k)) {
                    let total: f32 = gr.iter().sum();
                    for j in 0..k {
                        d[j] = gr[j] - y[j].exp() * total;
                    }
                }
                vec![(*x, dx)]
            }
            Op::SpatialMean(x) => {
                let (_, _, h, w) = self.val(*x).dims4().expect("validated");
                let pix = h * w;
                let dx = g.iter().flat_map(|&d| std::iter::repeat(d / pix as f32).take(pix)).collect();
                vec![(*x, dx)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.val(*x).numel()])],
            Op::Mean(x) => {
                let n = self.val(*x).numel();
                vec![(*x, vec![g[0] / n as f32; n])]
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let f = 2.0 * g[0] / ta.numel() as f32;
                let da: Vec<f32> = ta.data().iter().zip(tb.data()).map(|(x, y)| f * (x - y)).collect();
                let db = da.iter().map(|v| -v).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::KlDiv { log_q, log_p } => {
                let (tq, tp) = (self.val(*log_q), self.val(*log_p));
                let n = tq.shape()[0].max(1) as f32;
                let f = g[0] / n;
                let dq = tp.data().iter().map(|&lp| -f * lp.exp()).collect();
                let dp = tp
                    .data()
                    .iter()
                    .zip(tq.data())
                    .map(|(&lp, &lq)| f * lp.exp() * (lp - lq + 1.0))
                    .collect();
                vec![(*log_q, dq), (*log_p, dp)]
            }
            Op::CrossEntropy { logits, targets, smoothing } => {
                let tl = self.val(*logits);
                let (n, k) = tl.dims2().expect("validated");
                let probs = kernels::softmax_rows(tl).expect("validated");
                let f = g[0] / n as f32;
                let mut dx = probs.into_data();
                for (row, &t) in dx.chunks_mut(k).zip(targets) {
                    for (j, v) in row.iter_mut().enumerate() {
                        let target = smoothing / k as f32 + if j == t { 1.0 - smoothing } else { 0.0 };
                        *v = f * (*v - target);
                    }
                }
                vec![(*logits, dx)]
            }
            Op::Relation { x, norms } => {
                vec![(*x, kernels::relation_matrix_backward(self.val(*x), norms, g))]
            }
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f32>>, g: Vec<f32>) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_all_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 3.0, 0.0, 9.0]).unwrap());
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn mse_at_stationary_point_has_zero_grad() {
        let mut tape = Tape::new();
        let data = Tensor::new(vec![1, 2, 2, 2], (0..8).map(|i| i as f32 * 0.3).collect()).unwrap();
        let x = tape.param(data.clone());
        let y = tape.constant(data);
        let loss = tape.mse(x, y).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn second_backward_requires_reset() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::BackwardTwice)));
        tape.reset_grads();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn foreign_and_non_scalar_losses_are_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let xa = a.param(Tensor::from_vec(vec![1.0]));
        let xb = b.param(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(a.backward(xb), Err(Error::ForeignVar)));
        assert!(matches!(a.add(xa, xb), Err(Error::ForeignVar)));
        assert!(matches!(b.backward(xb), Err(Error::NotScalar(_))));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![f32::MAX]));
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite("scale"))));
    }

    #[test]
    fn no_grad_tape_records_values_only() {
        let mut tape = Tape::no_grad();
        let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
        let y = tape.scale(x, 2.0).unwrap();
        assert!(!tape.requires_grad(y));
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).is_none());
    }
}
