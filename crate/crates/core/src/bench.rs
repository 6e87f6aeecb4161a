//! Inference timing: mean over timed runs, median over repeats.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CaptureSet, Components, Model};
use crate::reparam::random_probes;
use crate::tensor::{Tape, Tensor};

pub const THREADS_ENV: &str = "RIFORMER_THREADS";

fn default_warmup() -> usize {
    10
}
fn default_timed() -> usize {
    30
}
fn default_repeats() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchProtocol {
    pub batch_size: usize,
    pub resolution: usize,
    #[serde(default = "default_warmup")]
    pub warmup_runs: usize,
    #[serde(default = "default_timed")]
    pub timed_runs: usize,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
}

impl Default for BenchProtocol {
    fn default() -> Self {
        Self {
            batch_size: 32,
            resolution: 64,
            warmup_runs: default_warmup(),
            timed_runs: default_timed(),
            repeats: default_repeats(),
        }
    }
}

impl BenchProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.timed_runs == 0 {
            return Err(Error::InvalidArgument("timed_runs must be >= 1".into()));
        }
        if self.repeats % 2 == 0 {
            return Err(Error::InvalidArgument(format!("repeats must be odd, got {}", self.repeats)));
        }
        if self.batch_size == 0 || self.resolution == 0 {
            return Err(Error::InvalidArgument("batch_size and resolution must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model: String,
    pub batch_size: usize,
    /// Mean milliseconds per batch, one entry per repeat.
    pub repeat_ms: Vec<f64>,
    pub median_ms: f64,
    /// Mean over every timed run of every repeat.
    pub mean_ms: f64,
    pub images_per_s: f64,
    pub thread_count: usize,
    pub environment: String,
    /// Raw per-run milliseconds, `repeats × timed_runs`.
    pub raw_ms: Vec<Vec<f64>>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

pub fn thread_count() -> usize {
    rayon::current_num_threads()
}

pub fn environment_notes() -> String {
    format!("{}-{} threads={}", std::env::consts::OS, std::env::consts::ARCH, thread_count())
}

/// Sizes the global kernel thread pool. Must run before any parallel work.
pub fn configure_threads(threads: Option<usize>) -> Result<()> {
    let Some(n) = threads else { return Ok(()) };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}

/// Reads the thread cap from the environment, if set.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| Error::InvalidArgument(format!("{THREADS_ENV}={v} is not a positive integer"))),
        Err(_) => Ok(None),
    }
}

impl BenchReport {
    /// Reduces raw timings: mean per repeat, then the median repeat.
    pub fn from_timings(model: &str, batch_size: usize, raw_ms: Vec<Vec<f64>>, thread_count: usize, environment: String) -> Result<Self> {
        if raw_ms.is_empty() || raw_ms.iter().any(|r| r.is_empty()) {
            return Err(Error::InvalidArgument("no timed runs".into()));
        }
        let repeat_ms: Vec<f64> = raw_ms.iter().map(|r| mean(r)).collect();
        let median_ms = median(&repeat_ms);
        let all: Vec<f64> = raw_ms.iter().flatten().copied().collect();
        Ok(Self {
            model: model.to_string(),
            batch_size,
            mean_ms: mean(&all),
            images_per_s: batch_size as f64 / (median_ms / 1000.0),
            repeat_ms,
            median_ms,
            thread_count,
            environment,
            raw_ms,
        })
    }

    pub fn csv_row(&self, component: &str) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.3},{}",
            self.model, component, self.mean_ms, self.median_ms, self.images_per_s, self.thread_count
        )
    }
}

pub const CSV_HEADER: &str = "model,component,mean_ms,median_ms,images_per_s,thread_count";

/// Times `run` per the protocol and returns `repeats × timed_runs` ms.
pub fn collect_timings(protocol: &BenchProtocol, mut run: impl FnMut() -> Result<()>) -> Result<Vec<Vec<f64>>> {
    protocol.validate()?;
    for _ in 0..protocol.warmup_runs {
        run()?;
    }
    let mut raw = Vec::with_capacity(protocol.repeats);
    for _ in 0..protocol.repeats {
        let mut times = Vec::with_capacity(protocol.timed_runs);
        for _ in 0..protocol.timed_runs {
            let start = Instant::now();
            run()?;
            times.push(start.elapsed().as_secs_f64() * 1000.0);
        }
        raw.push(times);
    }
    Ok(raw)
}

fn probe_batch(model: &Model, protocol: &BenchProtocol) -> Tensor {
    let mut spec = model.spec().clone();
    spec.input_resolution = protocol.resolution;
    random_probes(&spec, protocol.batch_size, 0)
}

fn timed(model: &Model, id: &str, protocol: &BenchProtocol, components: Components) -> Result<BenchReport> {
    let x = probe_batch(model, protocol);
    let none = CaptureSet::none();
    let raw = collect_timings(protocol, || model.evaluate_with(&x, &none, components).map(|_| ()))?;
    BenchReport::from_timings(id, protocol.batch_size, raw, thread_count(), environment_notes())
}

/// Inference throughput of `model` in whatever form it is in.
pub fn throughput(model: &Model, id: &str, protocol: &BenchProtocol) -> Result<BenchReport> {
    timed(model, id, protocol, Components::ALL)
}

/// Throughput of several models measured side by side: every timed round
/// runs each model once, in an order rotated per round, so slow drift in
/// machine load hits all models alike. Returns one report per model.
pub fn compare_throughput(models: &[(&str, &Model)], protocol: &BenchProtocol) -> Result<Vec<BenchReport>> {
    protocol.validate()?;
    let inputs: Vec<Tensor> = models.iter().map(|(_, m)| probe_batch(m, protocol)).collect();
    let none = CaptureSet::none();
    let run = |i: usize| models[i].1.evaluate_with(&inputs[i], &none, Components::ALL).map(|_| ());
    for _ in 0..protocol.warmup_runs {
        for i in 0..models.len() {
            run(i)?;
        }
    }
    let k = models.len();
    let mut raw = vec![vec![Vec::with_capacity(protocol.timed_runs); protocol.repeats]; k];
    let mut round = 0;
    for rep in 0..protocol.repeats {
        for _ in 0..protocol.timed_runs {
            for j in 0..k {
                let i = (j + round) % k;
                let start = Instant::now();
                run(i)?;
                raw[i][rep].push(start.elapsed().as_secs_f64() * 1000.0);
            }
            round += 1;
        }
    }
    models
        .iter()
        .zip(raw)
        .map(|((id, _), r)| BenchReport::from_timings(id, protocol.batch_size, r, thread_count(), environment_notes()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownRow {
    pub component: String,
    pub cumulative: BenchReport,
    /// Median-repeat latency added by this component.
    pub delta_ms: f64,
    /// Standard deviation of the delta estimated from the repeat means.
    pub delta_std_ms: f64,
    /// Set when the delta came out negative, i.e. below timing noise.
    pub negative: bool,
}

fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Latency of cumulative models: embeddings only, then with norms, then
/// with mixers, then with MLPs. Each delta is the added component's cost.
pub fn latency_breakdown(model: &Model, id: &str, protocol: &BenchProtocol) -> Result<Vec<BreakdownRow>> {
    let stages = [
        ("embed", Components::EMBED_ONLY),
        ("norm", Components::WITH_NORM),
        ("mixer", Components::WITH_MIXER),
        ("mlp", Components::ALL),
    ];
    let mut rows: Vec<BreakdownRow> = Vec::with_capacity(stages.len());
    for (name, comp) in stages {
        let report = timed(model, id, protocol, comp)?;
        let (delta, var) = match rows.last() {
            None => (report.median_ms, std_dev(&report.repeat_ms).powi(2)),
            Some(prev) => (
                report.median_ms - prev.cumulative.median_ms,
                std_dev(&report.repeat_ms).powi(2) + std_dev(&prev.cumulative.repeat_ms).powi(2),
            ),
        };
        if delta < 0.0 {
            log::warn!("{id}: negative {name} delta {delta:.4} ms (std {:.4}), reported as measured", var.sqrt());
        }
        rows.push(BreakdownRow {
            component: name.to_string(),
            cumulative: report,
            delta_ms: delta,
            delta_std_ms: var.sqrt(),
            negative: delta < 0.0,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCount {
    pub flops: u64,
    pub kernels: usize,
}

/// Floating-point operations and kernel launches of one inference forward.
pub fn op_count(model: &Model, batch: usize) -> Result<OpCount> {
    let x = random_probes(model.spec(), batch.max(1), 0);
    let mut tape = Tape::no_grad();
    let p = model.bind(&mut tape, false);
    let xv = tape.constant(x);
    model.forward_on(&mut tape, &p, xv, &Default::default())?;
    Ok(OpCount {
        flops: tape.flops(),
        kernels: tape.kernel_count(),
    })
}

pub fn write_csv(path: &Path, rows: &[(String, &BenchReport)]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{CSV_HEADER}")?;
    for (component, r) in rows {
        writeln!(f, "{}", r.csv_row(component))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_means_arithmetic() {
        let raw = vec![vec![10.0], vec![12.0], vec![11.0]];
        let r = BenchReport::from_timings("m", 32, raw.clone(), 1, String::new()).unwrap();
        assert_eq!(r.median_ms, 11.0);
        assert!((r.images_per_s - 2909.0909).abs() < 1e-3);
        let again = BenchReport::from_timings("m", 32, r.raw_ms.clone(), 1, String::new()).unwrap();
        assert_eq!(again, r);
        assert!(BenchReport::from_timings("m", 32, vec![], 1, String::new()).is_err());
    }

    #[test]
    fn protocol_validation() {
        assert!(BenchProtocol::default().validate().is_ok());
        assert!(BenchProtocol { timed_runs: 0, ..Default::default() }.validate().is_err());
        assert!(BenchProtocol { repeats: 2, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn timings_have_protocol_shape() {
        let p = BenchProtocol { warmup_runs: 2, timed_runs: 4, repeats: 3, ..Default::default() };
        let mut calls = 0;
        let raw = collect_timings(&p, || {
            calls += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(calls, 14);
        assert_eq!(raw.len(), 3);
        assert!(raw.iter().all(|r| r.len() == 4));
    }

    #[test]
    fn side_by_side_reports_every_model() {
        use crate::model::{MixerSpec, ModelSpec};
        let mut spec = ModelSpec::nano(MixerSpec::identity());
        spec.input_resolution = 32;
        let m = Model::build(&spec, 0).unwrap();
        let p = BenchProtocol { batch_size: 1, resolution: 32, warmup_runs: 1, timed_runs: 2, repeats: 1 };
        let r = compare_throughput(&[("a", &m), ("b", &m)], &p).unwrap();
        assert_eq!(r.iter().map(|r| r.model.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        assert!(r.iter().all(|r| r.raw_ms.len() == 1 && r.raw_ms[0].len() == 2));
    }
}
