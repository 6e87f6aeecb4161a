//! Interchangeable token mixers.
//!
//! Each mixer maps the output of a block's first norm to the residual branch
//! of that sub-block. Mixers follow the subtract-the-input convention, so a
//! mixer that "does nothing" returns zeros and leaves the block input
//! untouched.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, OnceLock};

use super::spec::MixerSpec;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub trait TokenMixer: Send + Sync + fmt::Debug {
    /// Registry name.
    fn kind(&self) -> &'static str;

    fn spec(&self) -> MixerSpec;

    /// Names of the learnable per-block parameters, in storage order.
    fn param_names(&self) -> &'static [&'static str] {
        &[]
    }

    /// Initial parameter values for a block of width `dim`. Must not draw
    /// randomness so that mixers never shift the initialization stream.
    fn init_params(&self, _dim: usize) -> Vec<Tensor> {
        Vec::new()
    }

    fn forward(&self, tape: &mut Tape, normed: Var, params: &[Var]) -> Result<Var>;

    /// Folds the mixer into the norm that feeds it, returning the fused
    /// `(gamma', beta')`. `None` when the mixer mixes across locations or is
    /// otherwise not expressible as a norm.
    fn fold_into_norm(&self, _gamma: &[f32], _beta: &[f32], _params: &[Tensor]) -> Option<Result<(Vec<f32>, Vec<f32>)>> {
        None
    }
}

/// `avg_pool(m) - m` over a `k×k` window.
#[derive(Debug, Clone, Copy)]
pub struct PoolingMixer {
    pub pool_size: usize,
}

impl PoolingMixer {
    pub fn new(pool_size: usize) -> Result<Self> {
        if pool_size == 0 || pool_size % 2 == 0 {
            return Err(Error::InvalidSpec(format!("pool size must be odd, got {pool_size}")));
        }
        Ok(Self { pool_size })
    }
}

impl TokenMixer for PoolingMixer {
    fn kind(&self) -> &'static str {
        "pooling"
    }

    fn spec(&self) -> MixerSpec {
        MixerSpec::pooling(self.pool_size)
    }

    fn forward(&self, tape: &mut Tape, normed: Var, _params: &[Var]) -> Result<Var> {
        let pooled = tape.avg_pool_same(normed, self.pool_size)?;
        tape.sub(pooled, normed)
    }
}

/// Per-channel `s ⊙ m + t - m`. The subtraction is kept separate from the
/// scale so the mixer starts as an exact zero at `s = 1, t = 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct AffineMixer;

impl TokenMixer for AffineMixer {
    fn kind(&self) -> &'static str {
        "affine"
    }

    fn spec(&self) -> MixerSpec {
        MixerSpec::affine()
    }

    fn param_names(&self) -> &'static [&'static str] {
        &["s", "t"]
    }

    fn init_params(&self, dim: usize) -> Vec<Tensor> {
        vec![Tensor::ones(&[dim]), Tensor::zeros(&[dim])]
    }

    fn forward(&self, tape: &mut Tape, normed: Var, params: &[Var]) -> Result<Var> {
        let [s, t] = params else {
            return Err(Error::ModelState(format!("affine mixer expects 2 parameters, got {}", params.len())));
        };
        let scaled = tape.channel_affine(normed, *s, *t)?;
        tape.sub(scaled, normed)
    }

    fn fold_into_norm(&self, gamma: &[f32], beta: &[f32], params: &[Tensor]) -> Option<Result<(Vec<f32>, Vec<f32>)>> {
        let [s, t] = params else {
            return Some(Err(Error::ModelState("affine mixer expects 2 parameters".into())));
        };
        Some(crate::reparam::fuse_affine(gamma, beta, s.data(), t.data()).map(|f| (f.gamma, f.beta)))
    }
}

/// Contributes nothing; the first sub-block reduces to the identity.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityMixer;

impl TokenMixer for IdentityMixer {
    fn kind(&self) -> &'static str {
        "identity"
    }

    fn spec(&self) -> MixerSpec {
        MixerSpec::identity()
    }

    fn forward(&self, tape: &mut Tape, normed: Var, _params: &[Var]) -> Result<Var> {
        let shape = tape.shape(normed).to_vec();
        Ok(tape.constant(Tensor::zeros(&shape)))
    }
}

pub type MixerFactory = fn(&MixerSpec) -> Result<Arc<dyn TokenMixer>>;

/// Name-to-constructor table for token mixers.
#[derive(Clone, Default)]
pub struct MixerRegistry {
    factories: BTreeMap<String, MixerFactory>,
}

impl fmt::Debug for MixerRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MixerRegistry").field("kinds", &self.kinds()).finish()
    }
}

impl MixerRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn with_builtins() -> Self {
        let mut reg = Self::empty();
        reg.register("pooling", |spec| {
            let k = spec.pool_size.unwrap_or(3);
            Ok(Arc::new(PoolingMixer::new(k)?))
        });
        reg.register("affine", |_| Ok(Arc::new(AffineMixer)));
        reg.register("identity", |_| Ok(Arc::new(IdentityMixer)));
        reg
    }

    /// Adds or replaces the constructor for `kind`.
    pub fn register(&mut self, kind: &str, factory: MixerFactory) {
        self.factories.insert(kind.to_string(), factory);
    }

    pub fn kinds(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn build(&self, spec: &MixerSpec) -> Result<Arc<dyn TokenMixer>> {
        let factory = self.factories.get(&spec.kind).ok_or_else(|| Error::UnknownStrategy {
            kind: "token mixer",
            name: spec.kind.clone(),
            known: self.kinds().join(", "),
        })?;
        factory(spec)
    }
}

/// Process-wide registry holding the built-in mixers.
pub fn builtin_mixers() -> &'static MixerRegistry {
    static REGISTRY: OnceLock<MixerRegistry> = OnceLock::new();
    REGISTRY.get_or_init(MixerRegistry::with_builtins)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(mixer: &dyn TokenMixer, x: Tensor, params: Vec<Tensor>) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let pv: Vec<Var> = params.into_iter().map(|p| tape.constant(p)).collect();
        let out = mixer.forward(&mut tape, xv, &pv).unwrap();
        tape.value(out).clone()
    }

    fn row(values: &[f32]) -> Tensor {
        Tensor::new(vec![1, 1, 1, values.len()], values.to_vec()).unwrap()
    }

    #[test]
    fn affine_identity_init_is_exactly_zero() {
        let x = Tensor::new(vec![1, 2, 2, 2], (0..8).map(|i| i as f32 * 0.37 - 1.0).collect()).unwrap();
        let out = run(&AffineMixer, x, AffineMixer.init_params(2));
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn affine_scalar_case() {
        let out = run(&AffineMixer, row(&[3.0]), vec![Tensor::from_vec(vec![2.0]), Tensor::from_vec(vec![0.5])]);
        assert_eq!(out.data(), &[3.5]);
    }

    #[test]
    fn affine_zero_scale_negates() {
        let out = run(&AffineMixer, row(&[1.5, -2.0]), vec![Tensor::from_vec(vec![0.0]), Tensor::from_vec(vec![0.0])]);
        assert_eq!(out.data(), &[-1.5, 2.0]);
    }

    #[test]
    fn affine_rejects_length_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(row(&[1.0]));
        let s = tape.constant(Tensor::from_vec(vec![1.0, 1.0]));
        let t = tape.constant(Tensor::from_vec(vec![0.0, 0.0]));
        assert!(AffineMixer.forward(&mut tape, x, &[s, t]).is_err());
    }

    #[test]
    fn pooling_row_case() {
        let out = run(&PoolingMixer::new(3).unwrap(), row(&[1.0, 2.0, 3.0]), vec![]);
        assert_eq!(out.data(), &[0.5, 0.0, -0.5]);
    }

    #[test]
    fn pooling_vanishes_on_constant_and_unit_window() {
        let x = Tensor::full(&[2, 3, 4, 4], -0.3);
        let out = run(&PoolingMixer::new(3).unwrap(), x, vec![]);
        assert!(out.data().iter().all(|&v| v == 0.0));
        let r = row(&[1.0, 5.0, -2.0]);
        let out = run(&PoolingMixer::new(1).unwrap(), r, vec![]);
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(PoolingMixer::new(4).is_err());
    }

    #[test]
    fn registry_resolves_and_rejects() {
        let reg = builtin_mixers();
        assert_eq!(reg.kinds(), vec!["affine", "identity", "pooling"]);
        assert_eq!(reg.build(&MixerSpec::pooling(5)).unwrap().spec(), MixerSpec::pooling(5));
        let bogus = MixerSpec { kind: "attention".into(), pool_size: None };
        assert!(matches!(reg.build(&bogus), Err(Error::UnknownStrategy { .. })));
        assert!(reg.build(&MixerSpec::pooling(2)).is_err());
    }

    #[test]
    fn registry_accepts_custom_mixers() {
        #[derive(Debug)]
        struct Negate;
        impl TokenMixer for Negate {
            fn kind(&self) -> &'static str {
                "negate"
            }
            fn spec(&self) -> MixerSpec {
                MixerSpec { kind: "negate".into(), pool_size: None }
            }
            fn forward(&self, tape: &mut Tape, normed: Var, _: &[Var]) -> Result<Var> {
                tape.scale(normed, -1.0)
            }
        }
        let mut reg = MixerRegistry::with_builtins();
        reg.register("negate", |_| Ok(Arc::new(Negate)));
        let m = reg.build(&MixerSpec { kind: "negate".into(), pool_size: None }).unwrap();
        assert_eq!(run(m.as_ref(), row(&[2.0]), vec![]).data(), &[-2.0]);
    }
}
