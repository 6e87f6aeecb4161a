//! Effective receptive fields, activation histograms and affine coefficient
//! dumps.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CaptureSet, Model, TokenSubBlock};
use crate::tensor::{Tape, Tensor, Var};

/// Anything that maps an NCHW input to an NCHW feature map on a tape.
pub trait FeatureExtractor {
    fn features(&self, tape: &mut Tape, x: Var) -> Result<Var>;
}

impl FeatureExtractor for Model {
    /// The last stage output, i.e. the pre-head feature map.
    fn features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let p = self.bind(tape, false);
        let out = self.forward_on(tape, &p, x, &Default::default())?;
        Ok(*out.stage_outputs.last().expect("four stages"))
    }
}

/// Returns its input unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn features(&self, _tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(x)
    }
}

/// A single stride-1 `k×k` average pool.
#[derive(Debug, Clone, Copy)]
pub struct AvgPoolExtractor(pub usize);

impl FeatureExtractor for AvgPoolExtractor {
    fn features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.avg_pool_same(x, self.0)
    }
}

/// Nonnegative `H×W` map normalized to a maximum of 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ErfMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl ErfMap {
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// Number of cells strictly above `threshold`.
    pub fn count_above(&self, threshold: f32) -> usize {
        self.values.iter().filter(|&&v| v > threshold).count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.values.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.6e}")).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Input-gradient magnitude of the channel-summed centre cell of the
/// feature map, summed over channels and images, processed `chunk` images at
/// a time.
pub fn erf_map(model: &dyn FeatureExtractor, images: &Tensor, chunk: usize) -> Result<ErfMap> {
    let (n, c, h, w) = images.dims4()?;
    if n == 0 {
        return Err(Error::invalid("erf_map needs at least one image"));
    }
    let mut acc = vec![0f64; h * w];
    let chunk = chunk.max(1);
    let mut start = 0;
    while start < n {
        let len = chunk.min(n - start);
        let mut tape = Tape::new();
        let x = tape.leaf(images.slice_batch(start, len)?, true);
        let y = model.features(&mut tape, x)?;
        let (b, fc, fh, fw) = tape.value(y).dims4()?;
        let mut mask = Tensor::zeros(&[b, fc, fh, fw]);
        let centre = (fh / 2) * fw + fw / 2;
        for plane in mask.data_mut().chunks_mut(fh * fw) {
            plane[centre] = 1.0;
        }
        let m = tape.constant(mask);
        let picked = tape.mul(y, m)?;
        let total = tape.sum(picked)?;
        tape.backward(total)?;
        let g = tape.grad(x).ok_or_else(|| Error::invalid("input received no gradient"))?;
        for sample in g.chunks(c * h * w) {
            for plane in sample.chunks(h * w) {
                for (a, v) in acc.iter_mut().zip(plane) {
                    *a += v.abs() as f64;
                }
            }
        }
        start += len;
    }
    let max = acc.iter().cloned().fold(0.0, f64::max);
    let values = acc.iter().map(|&v| if max > 0.0 { (v / max) as f32 } else { 0.0 }).collect();
    Ok(ErfMap { height: h, width: w, values })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` increasing edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

pub const DEFAULT_BINS: usize = 101;

impl Histogram {
    /// Equal-width bins over `[lo, hi]`; values outside land in the end bins.
    pub fn with_range(values: &[f32], lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::invalid("histogram needs at least one bin"));
        }
        if values.is_empty() {
            return Err(Error::invalid("histogram of an empty probe set"));
        }
        if !(lo.is_finite() && hi.is_finite()) || hi < lo {
            return Err(Error::invalid(format!("bad histogram range [{lo}, {hi}]")));
        }
        let hi = if hi > lo { hi } else { lo + 1.0 };
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0u64; bins];
        for &v in values {
            let i = ((v as f64 - lo) / width).floor();
            let i = if i.is_nan() { 0 } else { (i.max(0.0) as usize).min(bins - 1) };
            counts[i] += 1;
        }
        Ok(Self { edges, counts })
    }

    /// Bins spanning the observed minimum and maximum.
    pub fn observed(values: &[f32], bins: usize) -> Result<Self> {
        let (lo, hi) = value_range(values).ok_or_else(|| Error::invalid("histogram of an empty probe set"))?;
        Self::with_range(values, lo, hi, bins)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn occupied_bins(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_left,bin_right,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            s.push_str(&format!("{:.6e},{:.6e},{c}\n", self.edges[i], self.edges[i + 1]));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn value_range(values: &[f32]) -> Option<(f64, f64)> {
    let mut it = values.iter().filter(|v| v.is_finite());
    let first = *it.next()? as f64;
    Some(it.fold((first, first), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64))))
}

/// 1-Wasserstein distance between two histograms sharing bin edges, each
/// normalized to unit mass.
pub fn wasserstein1(a: &Histogram, b: &Histogram) -> Result<f64> {
    if a.edges != b.edges {
        return Err(Error::invalid("histograms must share bin edges"));
    }
    let (ta, tb) = (a.total() as f64, b.total() as f64);
    if ta == 0.0 || tb == 0.0 {
        return Err(Error::invalid("empty histogram"));
    }
    let mut ca = 0.0;
    let mut cb = 0.0;
    let mut d = 0.0;
    for i in 0..a.counts.len() {
        ca += a.counts[i] as f64 / ta;
        cb += b.counts[i] as f64 / tb;
        d += (ca - cb).abs() * (a.edges[i + 1] - a.edges[i]);
    }
    Ok(d)
}

/// Output of stage `stage` (0-based) over every image, `chunk` at a time.
pub fn stage_activations(model: &Model, images: &Tensor, stage: usize, chunk: usize) -> Result<Tensor> {
    let n = images.dims4()?.0;
    if n == 0 {
        return Err(Error::invalid("empty probe set"));
    }
    let stages = model.spec().stages.len();
    if stage >= stages {
        return Err(Error::invalid(format!("stage {stage} out of range 0..{stages}")));
    }
    let chunk = chunk.max(1);
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let len = chunk.min(n - start);
        let mut eval = model.evaluate(&images.slice_batch(start, len)?, &CaptureSet::none())?;
        parts.push(eval.stage_outputs.swap_remove(stage));
        start += len;
    }
    Tensor::concat_batch(&parts)
}

pub fn feature_histogram(model: &Model, images: &Tensor, stage: usize, bins: usize) -> Result<Histogram> {
    let act = stage_activations(model, images, stage, 32)?;
    Histogram::observed(act.data(), bins)
}

/// Per-stage 1-Wasserstein distance between the activations of two models
/// over shared bin edges spanning both.
pub fn stage_distances(a: &Model, b: &Model, images: &Tensor, bins: usize) -> Result<Vec<f64>> {
    let stages = a.spec().stages.len().min(b.spec().stages.len());
    (0..stages)
        .map(|s| {
            let xa = stage_activations(a, images, s, 32)?;
            let xb = stage_activations(b, images, s, 32)?;
            let (la, ha) = value_range(xa.data()).ok_or_else(|| Error::invalid("no finite activations"))?;
            let (lb, hb) = value_range(xb.data()).ok_or_else(|| Error::invalid("no finite activations"))?;
            let (lo, hi) = (la.min(lb), ha.max(hb));
            wasserstein1(&Histogram::with_range(xa.data(), lo, hi, bins)?, &Histogram::with_range(xb.data(), lo, hi, bins)?)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineRow {
    pub stage: usize,
    pub block: usize,
    pub channel: usize,
    pub s: f32,
    pub t: f32,
}

/// Learned `(s, t)` of every affine mixer, one row per channel.
pub fn dump_affine_coefficients(model: &Model) -> Result<Vec<AffineRow>> {
    if model.is_deployed() {
        return Err(Error::ModelState("affine coefficients were absorbed by fusion".into()));
    }
    if model.spec().mixer.kind != "affine" {
        return Err(Error::ModelState(format!("mixer is `{}`, not affine", model.spec().mixer.kind)));
    }
    let mut rows = Vec::new();
    for (si, stage) in model.params.stages.iter().enumerate() {
        for (bi, block) in stage.blocks.iter().enumerate() {
            let TokenSubBlock::Train { mixer, .. } = &block.token else {
                return Err(Error::ModelState(format!("block {si}.{bi} is in deploy form")));
            };
            let get = |name: &str| {
                mixer
                    .iter()
                    .find(|(n, _)| *n == name)
                    .map(|(_, t)| t.data().to_vec())
                    .ok_or_else(|| Error::ModelState(format!("block {si}.{bi} has no `{name}`")))
            };
            let (s, t) = (get("s")?, get("t")?);
            for (channel, (&s, &t)) in s.iter().zip(&t).enumerate() {
                rows.push(AffineRow { stage: si, block: bi, channel, s, t });
            }
        }
    }
    Ok(rows)
}

pub fn write_affine_csv(path: &Path, rows: &[AffineRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "stage,block,channel,s,t")?;
    for r in rows {
        writeln!(f, "{},{},{},{},{}", r.stage, r.block, r.channel, r.s, r.t)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MixerSpec, ModelSpec};

    fn probe(n: usize, h: usize, seed: u64) -> Tensor {
        let mut spec = ModelSpec::nano(MixerSpec::affine());
        spec.input_resolution = h;
        crate::reparam::random_probes(&spec, n, seed)
    }

    #[test]
    fn identity_erf_is_a_delta() {
        let m = erf_map(&IdentityExtractor, &probe(2, 9, 0), 8).unwrap();
        assert_eq!(m.at(4, 4), 1.0);
        assert_eq!(m.count_above(0.0), 1);
    }

    #[test]
    fn pool_erf_is_a_uniform_patch() {
        let m = erf_map(&AvgPoolExtractor(3), &probe(1, 9, 0), 8).unwrap();
        for y in 0..9 {
            for x in 0..9 {
                let inside = (3..=5).contains(&y) && (3..=5).contains(&x);
                assert!((m.at(y, x) - if inside { 1.0 } else { 0.0 }).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn histogram_conserves_count() {
        let v: Vec<f32> = (0..1000).map(|i| (i as f32 * 0.37).sin()).collect();
        let h = Histogram::observed(&v, DEFAULT_BINS).unwrap();
        assert_eq!(h.total(), 1000);
        assert_eq!(h.edges.len(), 102);
        assert_eq!(Histogram::observed(&[0.0; 16], 11).unwrap().occupied_bins(), 1);
        assert!(Histogram::observed(&[], 11).is_err());
    }

    #[test]
    fn wasserstein_of_shifted_mass() {
        let a = Histogram::with_range(&[0.05], 0.0, 1.0, 10).unwrap();
        let b = Histogram::with_range(&[0.35], 0.0, 1.0, 10).unwrap();
        assert!((wasserstein1(&a, &b).unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(wasserstein1(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn affine_dump_rows() {
        let spec = ModelSpec::nano(MixerSpec::affine());
        let model = Model::build(&spec, 0).unwrap();
        let rows = dump_affine_coefficients(&model).unwrap();
        let expected: usize = spec.stages.iter().map(|s| s.depth * s.dim).sum();
        assert_eq!(rows.len(), expected);
        assert!(rows.iter().all(|r| r.s == 1.0 && r.t == 0.0));
        let deployed = crate::reparam::switch_to_deploy(&model).unwrap();
        assert!(dump_affine_coefficients(&deployed).is_err());
        let pool = Model::build(&ModelSpec::nano(MixerSpec::pooling(3)), 0).unwrap();
        assert!(dump_affine_coefficients(&pool).is_err());
    }
}
