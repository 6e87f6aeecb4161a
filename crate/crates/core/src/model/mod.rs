//! MetaFormer backbone: four stages of patch embedding plus residual blocks,
//! each block being `x + ls1 ⊙ mixer(norm1(x))` followed by
//! `x + ls2 ⊙ mlp(norm2(x))`, then a norm / global-mean / linear head.

mod mixer;
mod params;
mod spec;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use mixer::{builtin_mixers, AffineMixer, IdentityMixer, MixerFactory, MixerRegistry, PoolingMixer, TokenMixer};
pub use params::{BlockParams, ModelParams, NormParams, StageParams, TokenSubBlock};
pub use spec::{BlockSlot, MixerSpec, ModelSpec, PatchSpec, StageSpec};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

const HEAD_INIT_STD: f32 = 0.02;

/// Which block parts execute. Used for cumulative latency attribution; a
/// disabled norm passes its input through, a disabled mixer passes the norm
/// output through and a disabled MLP does the same for the second branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Components {
    pub blocks: bool,
    pub norm: bool,
    pub mixer: bool,
    pub mlp: bool,
}

impl Components {
    pub const ALL: Components = Components { blocks: true, norm: true, mixer: true, mlp: true };
    pub const EMBED_ONLY: Components = Components { blocks: false, norm: false, mixer: false, mlp: false };
    pub const WITH_NORM: Components = Components { blocks: true, norm: true, mixer: false, mlp: false };
    pub const WITH_MIXER: Components = Components { blocks: true, norm: true, mixer: true, mlp: false };
}

impl Default for Components {
    fn default() -> Self {
        Self::ALL
    }
}

/// Block indices (global numbering) whose activations are recorded.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CaptureSet {
    blocks: BTreeSet<usize>,
}

impl CaptureSet {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn new(blocks: impl IntoIterator<Item = usize>, spec: &ModelSpec) -> Result<Self> {
        let blocks: BTreeSet<usize> = blocks.into_iter().collect();
        let total = spec.total_blocks();
        if let Some(&bad) = blocks.iter().find(|&&b| b >= total) {
            return Err(Error::InvalidArgument(format!("capture index {bad} out of range for {total} blocks")));
        }
        Ok(Self { blocks })
    }

    pub fn all(spec: &ModelSpec) -> Self {
        Self {
            blocks: (0..spec.total_blocks()).collect(),
        }
    }

    pub fn contains(&self, block: usize) -> bool {
        self.blocks.contains(&block)
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.blocks.iter().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

/// Activations of one block. `normed` is the first norm's output and is
/// absent in deploy form, where the norm and mixer are a single op and
/// `mixer_out` holds the fused branch.
#[derive(Debug, Clone, Copy)]
pub struct BlockCapture {
    pub input: Var,
    pub normed: Option<Var>,
    pub mixer_out: Var,
    pub output: Var,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Output of each stage, the last one being the pre-head feature map.
    pub stage_outputs: Vec<Var>,
    pub captures: BTreeMap<usize, BlockCapture>,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    pub capture: CaptureSet,
    pub components: Components,
    /// Seed for stochastic depth. `None` runs every block deterministically.
    pub drop_path_seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockMode {
    Train,
    Deploy,
}

/// Materialized activations of a block.
#[derive(Debug, Clone, PartialEq)]
pub struct CapturedBlock {
    pub input: Tensor,
    pub normed: Option<Tensor>,
    pub mixer_out: Tensor,
    pub output: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub logits: Tensor,
    pub stage_outputs: Vec<Tensor>,
    pub blocks: BTreeMap<usize, CapturedBlock>,
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    mixer: Arc<dyn TokenMixer>,
    pub params: ModelParams<Tensor>,
}

fn trunc_normal(rng: &mut ChaCha8Rng, std: f32, n: usize) -> Vec<f32> {
    let dist = Normal::new(0.0f32, std).expect("positive std");
    (0..n)
        .map(|_| loop {
            let v = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, bound: f32, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
}

fn tensor(shape: &[usize], data: Vec<f32>) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

fn norm_init(dim: usize) -> NormParams<Tensor> {
    NormParams {
        gamma: Tensor::ones(&[dim]),
        beta: Tensor::zeros(&[dim]),
    }
}

impl Model {
    /// Builds a model with the built-in mixer registry.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        Self::build_with(spec, seed, builtin_mixers())
    }

    /// Deterministic initialization from `seed`. Mixers draw no randomness,
    /// so models differing only in mixer share every other weight.
    pub fn build_with(spec: &ModelSpec, seed: u64, registry: &MixerRegistry) -> Result<Self> {
        spec.validate()?;
        let mixer = registry.build(&spec.mixer)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::with_capacity(spec.stages.len());
        let mut in_ch = spec.in_channels;
        for st in &spec.stages {
            let k = st.downsample.patch;
            let fan_in = in_ch * k * k;
            let bound = 1.0 / (fan_in as f32).sqrt();
            let embed_weight = tensor(&[st.dim, in_ch, k, k], uniform(&mut rng, bound, st.dim * fan_in));
            let embed_bias = tensor(&[st.dim], uniform(&mut rng, bound, st.dim));
            let hidden = st.hidden_dim();
            let blocks = (0..st.depth)
                .map(|_| {
                    let mixer_params = mixer.param_names().iter().copied().zip(mixer.init_params(st.dim)).collect();
                    BlockParams {
                        token: TokenSubBlock::Train {
                            norm1: norm_init(st.dim),
                            mixer: mixer_params,
                        },
                        norm2: norm_init(st.dim),
                        fc1_weight: tensor(&[hidden, st.dim], trunc_normal(&mut rng, HEAD_INIT_STD, hidden * st.dim)),
                        fc1_bias: Tensor::zeros(&[hidden]),
                        fc2_weight: tensor(&[st.dim, hidden], trunc_normal(&mut rng, HEAD_INIT_STD, hidden * st.dim)),
                        fc2_bias: Tensor::zeros(&[st.dim]),
                        layer_scale_1: Tensor::full(&[st.dim], spec.layer_scale_init),
                        layer_scale_2: Tensor::full(&[st.dim], spec.layer_scale_init),
                    }
                })
                .collect();
            stages.push(StageParams {
                embed_weight,
                embed_bias,
                blocks,
            });
            in_ch = st.dim;
        }
        let params = ModelParams {
            stages,
            head_norm: norm_init(in_ch),
            head_weight: tensor(
                &[spec.num_classes, in_ch],
                trunc_normal(&mut rng, HEAD_INIT_STD, spec.num_classes * in_ch),
            ),
            head_bias: Tensor::zeros(&[spec.num_classes]),
        };
        Ok(Self {
            spec: spec.clone(),
            mixer,
            params,
        })
    }

    /// Assembles a model from existing parameters after checking that their
    /// structure and shapes fit `spec`.
    pub fn from_params(spec: &ModelSpec, params: ModelParams<Tensor>) -> Result<Self> {
        let mut template = Self::build(spec, 0)?;
        let deployed = params.blocks().next().is_some_and(|b| b.is_deployed());
        if params.blocks().any(|b| b.is_deployed() != deployed) {
            return Err(Error::ModelState("mixed train and deploy blocks".into()));
        }
        if deployed {
            template = crate::reparam::switch_to_deploy(&template)?;
        }
        let expected: Vec<(String, Vec<usize>)> =
            template.params.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        let got: Vec<(String, Vec<usize>)> = params.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        if expected != got {
            let diff = expected
                .iter()
                .zip(&got)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("expected {} {:?}, got {} {:?}", a.0, a.1, b.0, b.1))
                .unwrap_or_else(|| format!("expected {} tensors, got {}", expected.len(), got.len()));
            return Err(Error::ModelState(format!("parameters do not fit the spec: {diff}")));
        }
        template.params = params;
        Ok(template)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn mixer(&self) -> &Arc<dyn TokenMixer> {
        &self.mixer
    }

    pub fn is_deployed(&self) -> bool {
        self.params.blocks().any(|b| b.is_deployed())
    }

    pub fn mode(&self) -> BlockMode {
        if self.is_deployed() {
            BlockMode::Deploy
        } else {
            BlockMode::Train
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.leaves().iter().map(|t| t.numel()).sum()
    }

    /// Weight-decay mask: matrices and kernels decay, vectors do not.
    pub fn decay_mask(&self) -> Vec<bool> {
        self.params.leaves().iter().map(|t| t.rank() >= 2).collect()
    }

    /// Records every parameter on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelParams<Var> {
        self.params.map(|_, t| tape.leaf(t.clone(), trainable))
    }

    /// Copies values back from a bound tree, e.g. after an optimizer step on
    /// detached tensors. Shapes are assumed unchanged.
    pub fn set_params(&mut self, params: ModelParams<Tensor>) -> Result<()> {
        let model = Self::from_params(&self.spec, params)?;
        self.params = model.params;
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.spec.in_channels {
            return Err(Error::shape("forward", format!("{c} input channels, model expects {}", self.spec.in_channels)));
        }
        let total: usize = self.spec.stages.iter().map(|s| s.downsample.stride).product();
        if h == 0 || w == 0 || h % total != 0 || w % total != 0 {
            return Err(Error::shape(
                "forward",
                format!("resolution {h}x{w} not divisible by cumulative stride {total}"),
            ));
        }
        Ok(())
    }

    /// Full forward on `tape` using bound parameters.
    pub fn forward_on(&self, tape: &mut Tape, p: &ModelParams<Var>, x: Var, opts: &ForwardOptions) -> Result<ForwardOutput> {
        self.check_input(tape.value(x))?;
        let mut drop_rng = opts.drop_path_seed.map(ChaCha8Rng::seed_from_u64);
        let rates = self.spec.drop_path_rates();
        let slots = self.spec.block_slots();
        let mut h = x;
        let mut stage_outputs = Vec::with_capacity(self.spec.stages.len());
        let mut captures = BTreeMap::new();
        let mut global = 0;
        for (si, (st, sp)) in self.spec.stages.iter().zip(&p.stages).enumerate() {
            h = tape.conv2d(h, sp.embed_weight, sp.embed_bias, st.downsample.geometry())?;
            for bp in &sp.blocks {
                debug_assert_eq!(slots[global].stage, si);
                if opts.components.blocks {
                    let rate = drop_rng.as_mut().map_or(0.0, |_| rates[global]);
                    let keep = match drop_rng.as_mut() {
                        Some(rng) if rate > 0.0 => Some(self.drop_mask(rng, tape.shape(h)[0], rate)),
                        _ => None,
                    };
                    let (out, cap) = self.block_forward_with(tape, h, bp, self.mode(), opts.components, keep)?;
                    if opts.capture.contains(global) {
                        captures.insert(global, cap);
                    }
                    h = out;
                }
                global += 1;
            }
            stage_outputs.push(h);
        }
        let normed = tape.group_norm(h, p.head_norm.gamma, p.head_norm.beta, self.spec.norm_eps)?;
        let pooled = tape.spatial_mean(normed)?;
        let logits = tape.linear(pooled, p.head_weight, p.head_bias)?;
        Ok(ForwardOutput {
            logits,
            stage_outputs,
            captures,
        })
    }

    fn drop_mask(&self, rng: &mut ChaCha8Rng, n: usize, rate: f32) -> Vec<f32> {
        let keep = 1.0 - rate;
        (0..n).map(|_| if rng.gen::<f32>() < keep { 1.0 / keep } else { 0.0 }).collect()
    }

    /// One block in the requested mode. Deploy mode needs fused parameters
    /// and train mode unfused ones.
    pub fn block_forward(&self, tape: &mut Tape, x: Var, block: &BlockParams<Var>, mode: BlockMode) -> Result<(Var, BlockCapture)> {
        self.block_forward_with(tape, x, block, mode, Components::ALL, None)
    }

    fn block_forward_with(
        &self,
        tape: &mut Tape,
        x: Var,
        block: &BlockParams<Var>,
        mode: BlockMode,
        comp: Components,
        keep: Option<Vec<f32>>,
    ) -> Result<(Var, BlockCapture)> {
        let dim = tape.value(block.layer_scale_1).numel();
        let c = tape.shape(x).get(1).copied().unwrap_or(0);
        if c != dim {
            return Err(Error::shape("block_forward", format!("input has {c} channels, block dim {dim}")));
        }
        let eps = self.spec.norm_eps;
        let (normed, mixer_out) = match (&block.token, mode) {
            (TokenSubBlock::Train { norm1, mixer }, BlockMode::Train) => {
                let normed = if comp.norm { tape.group_norm(x, norm1.gamma, norm1.beta, eps)? } else { x };
                let vars: Vec<Var> = mixer.iter().map(|(_, v)| *v).collect();
                let out = if comp.mixer { self.mixer.forward(tape, normed, &vars)? } else { normed };
                (Some(normed), out)
            }
            (TokenSubBlock::Deploy { norm_reparam }, BlockMode::Deploy) => {
                let out = if comp.norm {
                    tape.group_norm(x, norm_reparam.gamma, norm_reparam.beta, eps)?
                } else {
                    x
                };
                (None, out)
            }
            (TokenSubBlock::Train { .. }, BlockMode::Deploy) => {
                return Err(Error::ModelState("deploy mode requested on an unfused block".into()));
            }
            (TokenSubBlock::Deploy { .. }, BlockMode::Train) => {
                return Err(Error::ModelState("train mode requested on a fused block".into()));
            }
        };
        let branch = tape.channel_mul(mixer_out, block.layer_scale_1)?;
        let branch = self.apply_drop(tape, branch, keep.as_deref())?;
        let mid = tape.add(x, branch)?;

        let n2 = if comp.norm { tape.group_norm(mid, block.norm2.gamma, block.norm2.beta, eps)? } else { mid };
        let mlp = if comp.mlp {
            let h = tape.pointwise(n2, block.fc1_weight, block.fc1_bias)?;
            let h = tape.gelu(h)?;
            tape.pointwise(h, block.fc2_weight, block.fc2_bias)?
        } else {
            n2
        };
        let branch = tape.channel_mul(mlp, block.layer_scale_2)?;
        let branch = self.apply_drop(tape, branch, keep.as_deref())?;
        let output = tape.add(mid, branch)?;
        Ok((
            output,
            BlockCapture {
                input: x,
                normed,
                mixer_out,
                output,
            },
        ))
    }

    fn apply_drop(&self, tape: &mut Tape, branch: Var, keep: Option<&[f32]>) -> Result<Var> {
        let Some(keep) = keep else { return Ok(branch) };
        let shape = tape.shape(branch).to_vec();
        let per = shape[1..].iter().product::<usize>();
        let data = keep.iter().flat_map(|&k| std::iter::repeat(k).take(per)).collect();
        let mask = tape.constant(Tensor::new(shape, data)?);
        tape.mul(branch, mask)
    }

    /// Inference forward that materializes logits, stage outputs and the
    /// requested block activations.
    pub fn evaluate(&self, x: &Tensor, capture: &CaptureSet) -> Result<Evaluation> {
        self.evaluate_with(x, capture, Components::ALL)
    }

    pub fn evaluate_with(&self, x: &Tensor, capture: &CaptureSet, components: Components) -> Result<Evaluation> {
        let mut tape = Tape::no_grad();
        let p = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let opts = ForwardOptions {
            capture: capture.clone(),
            components,
            drop_path_seed: None,
        };
        let out = self.forward_on(&mut tape, &p, xv, &opts)?;
        let blocks = out
            .captures
            .iter()
            .map(|(&i, c)| {
                (
                    i,
                    CapturedBlock {
                        input: tape.value(c.input).clone(),
                        normed: c.normed.map(|v| tape.value(v).clone()),
                        mixer_out: tape.value(c.mixer_out).clone(),
                        output: tape.value(c.output).clone(),
                    },
                )
            })
            .collect();
        Ok(Evaluation {
            logits: tape.value(out.logits).clone(),
            stage_outputs: out.stage_outputs.iter().map(|&v| tape.value(v).clone()).collect(),
            blocks,
        })
    }

    /// Logits only.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.evaluate(x, &CaptureSet::none())?.logits)
    }

    /// Logits in chunks of `batch` samples, to bound tape memory.
    pub fn infer_batched(&self, x: &Tensor, batch: usize) -> Result<Tensor> {
        let n = x.dims4()?.0;
        let batch = batch.max(1);
        let mut parts = Vec::with_capacity(n.div_ceil(batch));
        let mut start = 0;
        while start < n {
            let len = batch.min(n - start);
            parts.push(self.infer(&x.slice_batch(start, len)?)?);
            start += len;
        }
        Tensor::concat_batch(&parts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(mixer: MixerSpec) -> ModelSpec {
        let mut spec = ModelSpec::nano(mixer);
        spec.input_resolution = 32;
        for s in &mut spec.stages {
            s.dim = 8;
        }
        spec
    }

    fn probe(n: usize, res: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 3 * res * res).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![n, 3, res, res], data).unwrap()
    }

    #[test]
    fn same_seed_same_weights() {
        let spec = tiny(MixerSpec::pooling(3));
        let a = Model::build(&spec, 3).unwrap();
        let b = Model::build(&spec, 3).unwrap();
        let c = Model::build(&spec, 4).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn affine_at_init_matches_identity() {
        let a = Model::build(&tiny(MixerSpec::affine()), 9).unwrap();
        let i = Model::build(&tiny(MixerSpec::identity()), 9).unwrap();
        let x = probe(2, 32, 1);
        assert_eq!(a.infer(&x).unwrap(), i.infer(&x).unwrap());
    }

    #[test]
    fn param_count_gap_is_two_dim_per_block() {
        let spec = ModelSpec::nano(MixerSpec::affine());
        let a = Model::build(&spec, 0).unwrap();
        let i = Model::build(&ModelSpec::nano(MixerSpec::identity()), 0).unwrap();
        let extra: usize = spec.block_slots().iter().map(|s| 2 * s.dim).sum();
        assert_eq!(a.param_count(), i.param_count() + extra);
    }

    #[test]
    fn capture_is_passive_and_batch_is_separable() {
        let model = Model::build(&tiny(MixerSpec::pooling(3)), 2).unwrap();
        let x = probe(2, 32, 5);
        let all = model.evaluate(&x, &CaptureSet::all(model.spec())).unwrap();
        assert_eq!(all.blocks.len(), 6);
        assert_eq!(all.logits, model.infer(&x).unwrap());
        assert_eq!(all.logits.shape(), &[2, 10]);
        let a = model.infer(&x.slice_batch(0, 1).unwrap()).unwrap();
        let b = model.infer(&x.slice_batch(1, 1).unwrap()).unwrap();
        let joined = Tensor::concat_batch(&[a, b]).unwrap();
        assert!(joined.max_abs_diff(&all.logits).unwrap() <= 1e-6);
    }

    #[test]
    fn pooling_mixer_is_zero_on_constant_input() {
        let model = Model::build(&tiny(MixerSpec::pooling(3)), 2).unwrap();
        let x = Tensor::full(&[1, 3, 32, 32], 0.4);
        let ev = model.evaluate(&x, &CaptureSet::all(model.spec())).unwrap();
        for b in ev.blocks.values() {
            assert!(b.mixer_out.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn block_mode_is_checked() {
        let model = Model::build(&tiny(MixerSpec::affine()), 0).unwrap();
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, false);
        let x = tape.constant(probe(1, 8, 0).reshape(&[1, 3, 8, 8]).unwrap());
        let x = tape.conv2d(x, p.stages[0].embed_weight, p.stages[0].embed_bias, model.spec().stages[0].downsample.geometry()).unwrap();
        let block = &p.stages[0].blocks[0];
        assert!(model.block_forward(&mut tape, x, block, BlockMode::Deploy).is_err());
        assert!(model.block_forward(&mut tape, x, block, BlockMode::Train).is_ok());
    }

    #[test]
    fn identity_first_sub_block_is_a_no_op() {
        let mut model = Model::build(&tiny(MixerSpec::identity()), 0).unwrap();
        model.params.stages[0].blocks[0].layer_scale_1 = Tensor::full(&[8], 3.0);
        let ev = model.evaluate(&probe(1, 32, 3), &CaptureSet::all(model.spec())).unwrap();
        let b = &ev.blocks[&0];
        assert!(b.mixer_out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_resolution() {
        let model = Model::build(&tiny(MixerSpec::identity()), 0).unwrap();
        assert!(model.infer(&probe(1, 30, 0)).is_err());
        assert!(model.infer(&Tensor::zeros(&[1, 1, 32, 32])).is_err());
    }

    #[test]
    fn from_params_checks_structure() {
        let spec = tiny(MixerSpec::affine());
        let model = Model::build(&spec, 1).unwrap();
        assert!(Model::from_params(&spec, model.params.clone()).is_ok());
        let mut bad = model.params.clone();
        bad.head_bias = Tensor::zeros(&[3]);
        assert!(Model::from_params(&spec, bad).is_err());
        assert!(Model::from_params(&tiny(MixerSpec::identity()), model.params).is_err());
    }
}
