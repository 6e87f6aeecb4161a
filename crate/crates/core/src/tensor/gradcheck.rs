//! Central finite-difference check of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Per input: `max |analytic - numeric| / max(|analytic|∞, |numeric|∞)`.
    pub rel_err: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.rel_err.iter().cloned().fold(0.0, f64::max)
    }
}

/// Compares the tape gradient of `Σ w ⊙ f(inputs)`, `w` drawn from `seed`,
/// against central differences with step `h` on every input element.
///
/// The error of each input is normalized by the largest gradient magnitude
/// of that input, which keeps float32 rounding in tiny components from
/// dominating.
pub fn gradcheck<F>(inputs: &[Tensor], h: f32, seed: u64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::new(shape.clone(), (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let wv = tape.constant(w.clone());
    let weighted = tape.mul(out, wv)?;
    let loss = tape.sum(weighted)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f32>> = vars.iter().map(|&v| tape.grad_tensor(v).into_data()).collect();

    let project = |xs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::no_grad();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        let y = t.value(o);
        if y.shape() != shape.as_slice() {
            return Err(Error::invalid("function output shape changed under perturbation"));
        }
        Ok(y.data().iter().zip(w.data()).map(|(&a, &b)| a as f64 * b as f64).sum())
    };

    let mut rel_err = Vec::with_capacity(inputs.len());
    for (k, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0f64; input.numel()];
        let mut xs = inputs.to_vec();
        for (i, slot) in numeric.iter_mut().enumerate() {
            let x0 = input.data()[i];
            let (up, down) = (x0 + h, x0 - h);
            xs[k].data_mut()[i] = up;
            let fp = project(&xs)?;
            xs[k].data_mut()[i] = down;
            let fm = project(&xs)?;
            xs[k].data_mut()[i] = x0;
            *slot = (fp - fm) / (up as f64 - down as f64);
        }
        let a = &analytic[k];
        let scale = a.iter().map(|v| v.abs() as f64).chain(numeric.iter().map(|v| v.abs())).fold(0.0, f64::max);
        let worst = a.iter().zip(&numeric).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max);
        rel_err.push(if scale > 0.0 { worst / scale } else { worst });
    }
    Ok(GradCheckReport { rel_err })
}
