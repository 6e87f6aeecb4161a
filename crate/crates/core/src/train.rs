//! Training loops for the supervised and distillation recipes.
//!
//! A recipe turns one batch's student forward (plus cached teacher
//! activations) into a scalar loss. Recipes are looked up by name in a
//! [`RecipeRegistry`]; the loop around them (shuffling, AdamW with warmup and
//! cosine decay, evaluation, logging) is shared.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::imitation::{self, ActiveTerms, ImitationConfig, LossReport, TeacherLayer};
use crate::model::{CaptureSet, ForwardOptions, ForwardOutput, Model};
use crate::tensor::{scaled_lr, AdamW, AdamWConfig, Tape, Tensor, Var};

fn default_base_lr() -> f32 {
    1e-3
}
fn default_weight_decay() -> f32 {
    0.05
}
fn default_label_smoothing() -> f32 {
    0.1
}
fn default_eval_batch() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate is `base_lr · batch_size / 1024`.
    #[serde(default = "default_base_lr")]
    pub base_lr: f32,
    #[serde(default)]
    pub min_lr: f32,
    #[serde(default)]
    pub warmup_epochs: usize,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_label_smoothing")]
    pub label_smoothing: f32,
    pub recipe: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imitation: Option<ImitationConfig>,
    #[serde(default)]
    pub init_from_teacher: bool,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
}

impl TrainConfig {
    pub fn peak_lr(&self) -> f32 {
        scaled_lr(self.base_lr, self.batch_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.base_lr > 0.0) || !(self.min_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("base_lr must be > 0, min_lr and weight_decay >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing outside [0, 1)".into()));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config("warmup_epochs exceed epochs".into()));
        }
        let recipe = builtin_recipes().get(&self.recipe)?;
        if recipe.needs_imitation() && self.imitation.is_none() {
            return Err(Error::Config(format!("recipe {} requires an imitation block", self.recipe)));
        }
        Ok(())
    }

    /// Imitation settings with the phase schedule stretched to `epochs`
    /// when the two disagree.
    pub fn imitation_for_run(&self) -> ImitationConfig {
        let mut im = self.imitation.clone().unwrap_or_else(ImitationConfig::soft_only);
        if im.total_epochs != self.epochs {
            let scale = |v: usize| ((v as f64) * self.epochs as f64 / im.total_epochs.max(1) as f64).round() as usize;
            let feat = scale(im.feat_epochs).min(self.epochs);
            let rel = scale(im.rel_epochs).min(self.epochs - feat);
            log::info!(
                "imitation schedule {}/{}/{} rescaled to {feat}/{rel}/{}",
                im.feat_epochs,
                im.rel_epochs,
                im.total_epochs,
                self.epochs
            );
            im.feat_epochs = feat;
            im.rel_epochs = rel;
            im.total_epochs = self.epochs;
        }
        im
    }
}

/// Learning rate at optimizer step `step` (0-based): linear warmup to the
/// peak, then cosine decay to `min_lr` at the final step.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, peak: f32, min_lr: f32) -> f32 {
    if step < warmup_steps {
        return peak * (step + 1) as f32 / warmup_steps as f32;
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1);
    let progress = (step - warmup_steps) as f32 / span as f32;
    min_lr + 0.5 * (peak - min_lr) * (1.0 + (std::f32::consts::PI * progress).cos())
}

/// Teacher activations for a batch, recorded as constants on the student's
/// tape.
#[derive(Debug, Clone)]
pub struct TeacherBatch {
    pub logits: Var,
    pub layers: Vec<TeacherLayer>,
}

pub struct StepInputs<'a> {
    pub epoch: usize,
    pub labels: &'a [usize],
    pub student: &'a ForwardOutput,
    pub teacher: Option<&'a TeacherBatch>,
    /// Block indices captured for this step, in the order of
    /// `teacher.layers`.
    pub layers: &'a [usize],
    pub config: &'a TrainConfig,
    pub imitation: &'a ImitationConfig,
}

pub trait Recipe: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    fn needs_teacher(&self) -> bool {
        false
    }

    fn needs_imitation(&self) -> bool {
        false
    }

    /// Blocks whose activations the loss reads in `epoch`.
    fn layers(&self, _im: &ImitationConfig, _all: &[usize], _epoch: usize) -> Result<Vec<usize>> {
        Ok(Vec::new())
    }

    fn loss(&self, tape: &mut Tape, inputs: &StepInputs<'_>) -> Result<(Var, LossReport)>;
}

fn argmax_rows(t: &Tensor) -> Result<Vec<usize>> {
    let (_, k) = t.dims2()?;
    Ok(t.data().chunks(k).map(argmax).collect())
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn teacher_of<'a>(inputs: &'a StepInputs<'_>) -> Result<&'a TeacherBatch> {
    inputs.teacher.ok_or_else(|| Error::Training("this recipe needs a teacher".into()))
}

fn inactive() -> ActiveTerms {
    ActiveTerms {
        soft: false,
        in_prime: false,
        out: false,
        rel: false,
    }
}

/// Distillation term on logits: soft KL, or cross-entropy against the
/// teacher's argmax when `hard`, plus optional ground-truth cross-entropy.
fn kd_term(tape: &mut Tape, inputs: &StepInputs<'_>, hard: bool) -> Result<Var> {
    let teacher = teacher_of(inputs)?;
    let logits = inputs.student.logits;
    let kd = if hard {
        let targets = argmax_rows(tape.value(teacher.logits))?;
        tape.cross_entropy(logits, &targets, 0.0)?
    } else {
        imitation::loss_soft(tape, logits, teacher.logits, inputs.imitation.tau)?
    };
    if inputs.imitation.use_gt_label {
        let ce = tape.cross_entropy(logits, inputs.labels, inputs.config.label_smoothing)?;
        let sum = tape.add(kd, ce)?;
        tape.scale(sum, 0.5)
    } else {
        Ok(kd)
    }
}

/// Label-smoothed cross-entropy against ground truth.
#[derive(Debug, Default)]
pub struct CrossEntropyRecipe;

impl Recipe for CrossEntropyRecipe {
    fn name(&self) -> &'static str {
        "ce"
    }

    fn loss(&self, tape: &mut Tape, inputs: &StepInputs<'_>) -> Result<(Var, LossReport)> {
        let loss = tape.cross_entropy(inputs.student.logits, inputs.labels, inputs.config.label_smoothing)?;
        let total = tape.value(loss).data()[0];
        Ok((
            loss,
            LossReport {
                total,
                active: Some(inactive()),
                ..Default::default()
            },
        ))
    }
}

/// Cross-entropy against the teacher's predicted class.
#[derive(Debug, Default)]
pub struct HardKdRecipe;

impl Recipe for HardKdRecipe {
    fn name(&self) -> &'static str {
        "hard_kd"
    }

    fn needs_teacher(&self) -> bool {
        true
    }

    fn loss(&self, tape: &mut Tape, inputs: &StepInputs<'_>) -> Result<(Var, LossReport)> {
        let loss = kd_term(tape, inputs, true)?;
        let v = tape.value(loss).data()[0];
        Ok((
            loss,
            LossReport {
                soft: v,
                total: v,
                active: Some(ActiveTerms { soft: true, ..inactive() }),
                ..Default::default()
            },
        ))
    }
}

/// Temperature-softened KL to the teacher, no labels by default.
#[derive(Debug, Default)]
pub struct SoftKdRecipe;

impl Recipe for SoftKdRecipe {
    fn name(&self) -> &'static str {
        "soft_kd"
    }

    fn needs_teacher(&self) -> bool {
        true
    }

    fn loss(&self, tape: &mut Tape, inputs: &StepInputs<'_>) -> Result<(Var, LossReport)> {
        let loss = kd_term(tape, inputs, inputs.imitation.use_hard)?;
        let v = tape.value(loss).data()[0];
        Ok((
            loss,
            LossReport {
                soft: v,
                total: v,
                active: Some(ActiveTerms { soft: true, ..inactive() }),
                ..Default::default()
            },
        ))
    }
}

/// Soft distillation plus block-wise module imitation.
#[derive(Debug, Default)]
pub struct ModuleImitationRecipe;

impl Recipe for ModuleImitationRecipe {
    fn name(&self) -> &'static str {
        "soft_kd_mi"
    }

    fn needs_teacher(&self) -> bool {
        true
    }

    fn needs_imitation(&self) -> bool {
        true
    }

    fn layers(&self, im: &ImitationConfig, all: &[usize], epoch: usize) -> Result<Vec<usize>> {
        let a = im.active(epoch)?;
        Ok(if a.in_prime || a.out || a.rel { all.to_vec() } else { Vec::new() })
    }

    fn loss(&self, tape: &mut Tape, inputs: &StepInputs<'_>) -> Result<(Var, LossReport)> {
        let teacher = teacher_of(inputs)?;
        let soft = kd_term(tape, inputs, inputs.imitation.use_hard)?;
        let student: Vec<_> = inputs
            .layers
            .iter()
            .map(|i| {
                inputs
                    .student
                    .captures
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::Training(format!("block {i} was not captured")))
            })
            .collect::<Result<_>>()?;
        imitation::total_loss(
            tape,
            soft,
            &student,
            &teacher.layers,
            inputs.epoch,
            inputs.imitation,
            inputs.labels.len(),
        )
    }
}

pub type RecipeFactory = fn() -> Arc<dyn Recipe>;

#[derive(Clone, Default)]
pub struct RecipeRegistry {
    factories: BTreeMap<String, RecipeFactory>,
}

impl fmt::Debug for RecipeRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RecipeRegistry").field("names", &self.names()).finish()
    }
}

impl RecipeRegistry {
    pub fn with_builtins() -> Self {
        let mut r = Self::default();
        r.register("ce", || Arc::new(CrossEntropyRecipe));
        r.register("hard_kd", || Arc::new(HardKdRecipe));
        r.register("soft_kd", || Arc::new(SoftKdRecipe));
        r.register("soft_kd_mi", || Arc::new(ModuleImitationRecipe));
        r
    }

    pub fn register(&mut self, name: &str, factory: RecipeFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Recipe>> {
        self.factories.get(name).map(|f| f()).ok_or_else(|| Error::UnknownStrategy {
            kind: "recipe",
            name: name.to_string(),
            known: self.names().join(", "),
        })
    }
}

pub fn builtin_recipes() -> &'static RecipeRegistry {
    static REGISTRY: OnceLock<RecipeRegistry> = OnceLock::new();
    REGISTRY.get_or_init(RecipeRegistry::with_builtins)
}

/// Per-sample rows of a batched tensor, for gathering arbitrary batches.
#[derive(Debug, Clone)]
struct SampleStore {
    tail: Vec<usize>,
    data: Vec<f32>,
}

impl SampleStore {
    fn new(tail: &[usize]) -> Self {
        Self {
            tail: tail.to_vec(),
            data: Vec::new(),
        }
    }

    fn push(&mut self, t: &Tensor) {
        self.data.extend_from_slice(t.data());
    }

    fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let per: usize = self.tail.iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.tail);
        Tensor::new(shape, data)
    }
}

/// Frozen-teacher outputs on every training sample. Without augmentation
/// they never change, so they are computed once.
#[derive(Debug, Clone)]
pub struct TeacherCache {
    layers: Vec<usize>,
    logits: SampleStore,
    outputs: Vec<SampleStore>,
    mixers: Vec<SampleStore>,
}

impl TeacherCache {
    pub fn build(teacher: &Model, data: &Dataset, layers: &[usize], chunk: usize) -> Result<Self> {
        let capture = CaptureSet::new(layers.iter().copied(), teacher.spec())?;
        let mut cache: Option<TeacherCache> = None;
        let n = data.len();
        let chunk = chunk.max(1);
        let mut start = 0;
        while start < n {
            let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
            let ev = teacher.evaluate(&data.images(&idx)?, &capture)?;
            let c = cache.get_or_insert_with(|| TeacherCache {
                layers: layers.to_vec(),
                logits: SampleStore::new(&ev.logits.shape()[1..]),
                outputs: layers.iter().map(|l| SampleStore::new(&ev.blocks[l].output.shape()[1..])).collect(),
                mixers: layers.iter().map(|l| SampleStore::new(&ev.blocks[l].mixer_out.shape()[1..])).collect(),
            });
            c.logits.push(&ev.logits);
            for (j, l) in layers.iter().enumerate() {
                c.outputs[j].push(&ev.blocks[l].output);
                c.mixers[j].push(&ev.blocks[l].mixer_out);
            }
            start += idx.len();
        }
        cache.ok_or_else(|| Error::Dataset("empty training set".into()))
    }

    pub fn logits(&self, indices: &[usize]) -> Result<Tensor> {
        self.logits.gather(indices)
    }

    /// Records the requested samples and layers as constants on `tape`.
    pub fn bind(&self, tape: &mut Tape, indices: &[usize], layers: &[usize]) -> Result<TeacherBatch> {
        let logits = tape.constant(self.logits.gather(indices)?);
        let mut out = Vec::with_capacity(layers.len());
        for l in layers {
            let j = self
                .layers
                .iter()
                .position(|x| x == l)
                .ok_or_else(|| Error::Training(format!("teacher block {l} not cached")))?;
            out.push(TeacherLayer {
                output: tape.constant(self.outputs[j].gather(indices)?),
                mixer_out: tape.constant(self.mixers[j].gather(indices)?),
            });
        }
        Ok(TeacherBatch { logits, layers: out })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f32,
    pub loss_total: f32,
    pub loss_soft: Option<f32>,
    pub loss_in_prime: Option<f32>,
    pub loss_out: Option<f32>,
    pub loss_rel: Option<f32>,
    pub val_top1: Option<f32>,
}

pub const LOG_HEADER: &str = "epoch,lr,loss_total,loss_soft,loss_in_prime,loss_out,loss_rel,val_top1";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f32>| v.map(|x| format!("{x}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.loss_total,
            opt(self.loss_soft),
            opt(self.loss_in_prime),
            opt(self.loss_out),
            opt(self.loss_rel),
            opt(self.val_top1)
        )
    }
}

pub fn write_log_csv(path: &Path, rows: &[EpochLog]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{LOG_HEADER}")?;
    for r in rows {
        writeln!(f, "{}", r.csv_row())?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    /// Validation accuracy before the first update.
    pub initial_val_top1: Option<f32>,
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f32> {
    let preds = argmax_rows(logits)?;
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::InvalidArgument(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f32 / labels.len() as f32)
}

/// Top-1 accuracy of `model` on `data`.
pub fn evaluate(model: &Model, data: &Dataset, batch: usize) -> Result<f32> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    let logits = model.infer_batched(&data.all_images()?, batch)?;
    accuracy(&logits, data.labels())
}

/// Per-callback hook after each epoch; returning `false` stops training.
pub type EpochHook<'a> = dyn FnMut(&EpochLog, &Model) -> bool + 'a;

pub struct Trainer<'a> {
    pub config: &'a TrainConfig,
    pub registry: &'a RecipeRegistry,
    pub on_epoch: Option<Box<EpochHook<'a>>>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &'a TrainConfig) -> Self {
        Self {
            config,
            registry: builtin_recipes(),
            on_epoch: None,
        }
    }

    pub fn run(&mut self, student: Model, teacher: Option<&Model>, train: &Dataset, val: Option<&Dataset>) -> Result<TrainOutcome> {
        let cfg = self.config;
        cfg.validate()?;
        let recipe = self.registry.get(&cfg.recipe)?;
        if train.is_empty() {
            return Err(Error::Dataset("empty training set".into()));
        }
        if train.num_classes != student.spec().num_classes {
            return Err(Error::Training(format!(
                "dataset has {} classes, model {}",
                train.num_classes,
                student.spec().num_classes
            )));
        }
        if student.is_deployed() {
            return Err(Error::ModelState("cannot train a deploy-form model".into()));
        }
        let teacher = match (recipe.needs_teacher() || cfg.init_from_teacher, teacher) {
            (true, None) => return Err(Error::Training(format!("recipe {} needs a teacher checkpoint", cfg.recipe))),
            (_, Some(t)) => {
                if !t.spec().is_isomorphic(student.spec()) && recipe.needs_imitation() {
                    return Err(Error::Training("teacher and student specs are not isomorphic".into()));
                }
                if t.spec().num_classes != student.spec().num_classes {
                    return Err(Error::Training("teacher and student class counts differ".into()));
                }
                Some(t)
            }
            (false, None) => None,
        };
        let im = cfg.imitation_for_run();
        im.validate(student.spec())?;
        let all_layers = if recipe.needs_imitation() { im.resolve_layers(student.spec())? } else { Vec::new() };

        let mut model = match (cfg.init_from_teacher, teacher) {
            (true, Some(t)) => imitation::load_from_teacher(&student, t)?,
            _ => student,
        };
        let cache = match teacher {
            Some(t) if recipe.needs_teacher() => Some(TeacherCache::build(t, train, &all_layers, cfg.eval_batch)?),
            _ => None,
        };
        let initial_val_top1 = val.map(|v| evaluate(&model, v, cfg.eval_batch)).transpose()?;

        let n = train.len();
        let steps_per_epoch = n.div_ceil(cfg.batch_size);
        let total_steps = steps_per_epoch * cfg.epochs;
        let warmup_steps = steps_per_epoch * cfg.warmup_epochs;
        let peak = cfg.peak_lr();
        let decay = model.decay_mask();
        let shapes: Vec<Vec<usize>> = model.params.leaves().iter().map(|t| t.shape().to_vec()).collect();
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: peak,
                weight_decay: cfg.weight_decay,
                ..AdamWConfig::default()
            },
            shapes.iter().map(Vec::as_slice),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..n).collect();
        let mut log = Vec::with_capacity(cfg.epochs);
        let mut step = 0usize;
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let layers = recipe.layers(&im, &all_layers, epoch)?;
            let capture = CaptureSet::new(layers.iter().copied(), model.spec())?;
            let epoch_lr = lr_at(step, total_steps, warmup_steps, peak, cfg.min_lr);
            let mut sums = [0.0f64; 5];
            let mut active = inactive();
            for batch in order.chunks(cfg.batch_size) {
                opt.config.lr = lr_at(step, total_steps, warmup_steps, peak, cfg.min_lr);
                let (images, labels) = train.batch(batch)?;
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape, true);
                let x = tape.constant(images);
                let opts = ForwardOptions {
                    capture: capture.clone(),
                    drop_path_seed: (model.spec().drop_path_rate > 0.0).then(|| cfg.seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
                    ..Default::default()
                };
                let diag = |e: Error| Error::Training(format!("epoch {epoch}, step {step}: {e}"));
                let out = model.forward_on(&mut tape, &bound, x, &opts).map_err(diag)?;
                let teacher_batch = cache.as_ref().map(|c| c.bind(&mut tape, batch, &layers)).transpose()?;
                let inputs = StepInputs {
                    epoch,
                    labels: &labels,
                    student: &out,
                    teacher: teacher_batch.as_ref(),
                    layers: &layers,
                    config: cfg,
                    imitation: &im,
                };
                let (loss, report) = recipe.loss(&mut tape, &inputs).map_err(diag)?;
                if !report.total.is_finite() {
                    return Err(Error::Training(format!("epoch {epoch}, step {step}: non-finite loss {report:?}")));
                }
                tape.backward(loss).map_err(diag)?;
                let leaves = bound.leaves();
                let grads: Vec<Option<&[f32]>> = leaves.iter().map(|&&v| tape.grad(v)).collect();
                opt.step(&mut model.params.leaves_mut(), &grads, &decay)?;
                if let Some(a) = report.active {
                    active = a;
                }
                for (s, v) in sums.iter_mut().zip([report.total, report.soft, report.in_prime, report.out, report.rel]) {
                    *s += v as f64 * batch.len() as f64;
                }
                step += 1;
            }
            let mean = |i: usize| (sums[i] / n as f64) as f32;
            let val_top1 = val.map(|v| evaluate(&model, v, cfg.eval_batch)).transpose()?;
            let row = EpochLog {
                epoch,
                lr: epoch_lr,
                loss_total: mean(0),
                loss_soft: active.soft.then(|| mean(1)),
                loss_in_prime: active.in_prime.then(|| mean(2)),
                loss_out: active.out.then(|| mean(3)),
                loss_rel: active.rel.then(|| mean(4)),
                val_top1,
            };
            log::info!("{}", row.csv_row());
            let keep_going = self.on_epoch.as_mut().map_or(true, |hook| hook(&row, &model));
            log.push(row);
            if !keep_going {
                break;
            }
        }
        Ok(TrainOutcome {
            model,
            log,
            initial_val_top1,
        })
    }
}

/// Runs `cfg` with the built-in recipes.
pub fn train(student: Model, teacher: Option<&Model>, train: &Dataset, val: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(cfg).run(student, teacher, train, val)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lower_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
        let logits = Tensor::new(vec![3, 2], vec![0.0; 6]).unwrap();
        assert_eq!(accuracy(&logits, &[0, 1, 0]).unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn lr_schedule_shape() {
        assert_eq!(lr_at(0, 10, 2, 1.0, 0.0), 0.5);
        assert_eq!(lr_at(1, 10, 2, 1.0, 0.0), 1.0);
        assert_eq!(lr_at(2, 10, 2, 1.0, 0.0), 1.0);
        assert!(lr_at(9, 10, 2, 1.0, 0.0) < 0.05);
        assert!((lr_at(6, 10, 2, 1.0, 0.0) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn registry_lists_recipes() {
        assert_eq!(builtin_recipes().names(), vec!["ce", "hard_kd", "soft_kd", "soft_kd_mi"]);
        assert!(matches!(builtin_recipes().get("mixup"), Err(Error::UnknownStrategy { .. })));
    }

    #[test]
    fn schedule_rescales_with_epochs() {
        let cfg = TrainConfig {
            epochs: 12,
            batch_size: 8,
            base_lr: 1e-3,
            min_lr: 0.0,
            warmup_epochs: 0,
            weight_decay: 0.05,
            seed: 0,
            label_smoothing: 0.1,
            recipe: "soft_kd_mi".into(),
            imitation: Some(ImitationConfig::default()),
            init_from_teacher: false,
            eval_batch: 64,
        };
        let im = cfg.imitation_for_run();
        assert_eq!((im.feat_epochs, im.rel_epochs, im.total_epochs), (8, 2, 12));
        let mut bad = cfg.clone();
        bad.imitation = None;
        assert!(bad.validate().is_err());
    }
}
