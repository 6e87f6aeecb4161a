//! Folding the affine mixer into the norm that feeds it.
//!
//! With `m = γ ⊙ x̂ + β` the training branch is `s ⊙ m + t - m`, which is
//! again a per-channel affine map of `x̂`: `γ(s-1) ⊙ x̂ + β(s-1) + t`. The
//! deploy-form block therefore needs only a norm with those coefficients.
//! Layer scale stays outside the fusion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CaptureSet, Model, NormParams, TokenSubBlock};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct FusedNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

/// `γ' = γ(s-1)`, `β' = β(s-1) + t`.
pub fn fuse_affine(gamma: &[f32], beta: &[f32], s: &[f32], t: &[f32]) -> Result<FusedNorm> {
    let c = gamma.len();
    if beta.len() != c || s.len() != c || t.len() != c {
        return Err(Error::shape(
            "fuse_affine",
            format!("gamma {c}, beta {}, s {}, t {}", beta.len(), s.len(), t.len()),
        ));
    }
    let gamma_p = gamma.iter().zip(s).map(|(&g, &s)| g * (s - 1.0)).collect();
    let beta_p = beta.iter().zip(s).zip(t).map(|((&b, &s), &t)| b * (s - 1.0) + t).collect();
    Ok(FusedNorm {
        gamma: gamma_p,
        beta: beta_p,
    })
}

/// Replaces every `(norm1, mixer)` pair with a single fused norm. All other
/// tensors are copied unchanged.
pub fn switch_to_deploy(model: &Model) -> Result<Model> {
    if model.is_deployed() {
        return Err(Error::ModelState("model is already in deploy form".into()));
    }
    let mixer = model.mixer().clone();
    let mut out = model.clone();
    for block in out.params.stages.iter_mut().flat_map(|s| s.blocks.iter_mut()) {
        let TokenSubBlock::Train { norm1, mixer: mp } = &block.token else {
            unreachable!("checked above");
        };
        let values: Vec<Tensor> = mp.iter().map(|(_, t)| t.clone()).collect();
        let (gamma, beta) = mixer
            .fold_into_norm(norm1.gamma.data(), norm1.beta.data(), &values)
            .ok_or_else(|| Error::ModelState(format!("the {} mixer cannot be folded into a norm", mixer.kind())))??;
        let dim = gamma.len();
        block.token = TokenSubBlock::Deploy {
            norm_reparam: NormParams {
                gamma: Tensor::new(vec![dim], gamma)?,
                beta: Tensor::new(vec![dim], beta)?,
            },
        };
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub samples: usize,
    pub max_abs_diff: f32,
    pub mean_abs_diff: f64,
    pub tolerance: f32,
    pub pass: bool,
}

/// Random probe images in `[-1, 1)`.
pub fn random_probes(spec: &crate::model::ModelSpec, n: usize, seed: u64) -> Tensor {
    let r = spec.input_resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * spec.in_channels * r * r).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    Tensor::new(vec![n, spec.in_channels, r, r], data).expect("probe shape")
}

/// Compares logits, stage outputs and every block's input, branch output
/// and output between a train-form model and its deploy form on `probes`
/// random inputs, one at a time.
pub fn verify_equivalence(train: &Model, deploy: &Model, probes: usize, tol: f32, seed: u64) -> Result<EquivalenceReport> {
    if train.spec() != deploy.spec() {
        return Err(Error::InvalidArgument("train and deploy models have different specs".into()));
    }
    if train.is_deployed() || !deploy.is_deployed() {
        return Err(Error::InvalidArgument("expected one train-form and one deploy-form model".into()));
    }
    if train.spec().drop_path_rate != 0.0 {
        log::debug!("drop path is ignored during equivalence checks");
    }
    if probes == 0 {
        return Err(Error::InvalidArgument("at least one probe is required".into()));
    }
    let capture = CaptureSet::all(train.spec());
    let inputs = random_probes(train.spec(), probes, seed);
    let mut max = 0.0f32;
    let mut sum = 0.0f64;
    let mut count = 0usize;
    let mut accumulate = |a: &Tensor, b: &Tensor| -> Result<()> {
        if a.shape() != b.shape() {
            return Err(Error::shape("verify_equivalence", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        for (x, y) in a.data().iter().zip(b.data()) {
            let d = (x - y).abs();
            max = max.max(d);
            sum += d as f64;
        }
        count += a.numel();
        Ok(())
    };
    for i in 0..probes {
        let x = inputs.slice_batch(i, 1)?;
        let a = train.evaluate(&x, &capture)?;
        let b = deploy.evaluate(&x, &capture)?;
        accumulate(&a.logits, &b.logits)?;
        for (sa, sb) in a.stage_outputs.iter().zip(&b.stage_outputs) {
            accumulate(sa, sb)?;
        }
        for (ba, bb) in a.blocks.values().zip(b.blocks.values()) {
            accumulate(&ba.input, &bb.input)?;
            accumulate(&ba.mixer_out, &bb.mixer_out)?;
            accumulate(&ba.output, &bb.output)?;
        }
    }
    Ok(EquivalenceReport {
        samples: probes,
        max_abs_diff: max,
        mean_abs_diff: if count > 0 { sum / count as f64 } else { 0.0 },
        tolerance: tol,
        pass: max <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MixerSpec, ModelSpec};

    #[test]
    fn fuse_table_values() {
        let f = fuse_affine(&[1.0], &[0.0], &[1.0], &[0.0]).unwrap();
        assert_eq!((f.gamma[0], f.beta[0]), (0.0, 0.0));
        let f = fuse_affine(&[2.0], &[0.5], &[3.0], &[0.1]).unwrap();
        assert_eq!(f.gamma, vec![4.0]);
        assert_eq!(f.beta, vec![0.5f32 * 2.0 + 0.1]);
        assert!((f.beta[0] - 1.1).abs() < 1e-7);
        let f = fuse_affine(&[1.0], &[0.0], &[0.0], &[0.0]).unwrap();
        assert_eq!((f.gamma[0], f.beta[0]), (-1.0, 0.0));
        assert!(fuse_affine(&[1.0, 1.0], &[0.0], &[1.0], &[0.0]).is_err());
    }

    #[test]
    fn deploy_removes_mixer_params_and_rejects_refuse() {
        let spec = ModelSpec::nano(MixerSpec::affine());
        let model = Model::build(&spec, 0).unwrap();
        let deploy = switch_to_deploy(&model).unwrap();
        let extra: usize = spec.block_slots().iter().map(|s| 2 * s.dim).sum();
        assert_eq!(deploy.param_count() + extra, model.param_count());
        assert!(switch_to_deploy(&deploy).is_err());
        for b in deploy.params.blocks() {
            let TokenSubBlock::Deploy { norm_reparam } = &b.token else { panic!() };
            assert!(norm_reparam.gamma.data().iter().all(|&g| g == 0.0));
        }
        assert_eq!(deploy.params.head_weight, model.params.head_weight);
        assert_eq!(deploy.params.stages[2].blocks[1].fc2_weight, model.params.stages[2].blocks[1].fc2_weight);
    }

    #[test]
    fn non_affine_models_cannot_deploy() {
        let model = Model::build(&ModelSpec::nano(MixerSpec::pooling(3)), 0).unwrap();
        assert!(switch_to_deploy(&model).is_err());
        let model = Model::build(&ModelSpec::nano(MixerSpec::identity()), 0).unwrap();
        assert!(switch_to_deploy(&model).is_err());
    }
}
