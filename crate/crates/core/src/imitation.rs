//! Module imitation: block-wise distillation of an affine student from a
//! pooling teacher.
//!
//! Per selected block `m` the student is pulled toward the teacher through
//! the block output (`in'`), the mixer output (`out`) and the token relation
//! matrices of the block output (`rel`). Logits are matched with a
//! temperature-softened KL term throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BlockCapture, Model, ModelSpec, TokenSubBlock};
use crate::tensor::{Tape, Tensor, Var};

fn default_lambda1() -> f32 {
    1e-4
}
fn default_lambda2() -> f32 {
    1e-3
}
fn default_lambda3() -> f32 {
    1.0
}
fn default_tau() -> f32 {
    1.0
}
fn default_layer_count() -> usize {
    4
}
fn default_feat() -> usize {
    40
}
fn default_rel() -> usize {
    10
}
fn default_total() -> usize {
    60
}

/// Loss weights are stored as `λ · batch_size` and divided by the batch size
/// when applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImitationConfig {
    #[serde(default = "default_lambda1")]
    pub lambda1: f32,
    #[serde(default = "default_lambda2")]
    pub lambda2: f32,
    #[serde(default = "default_lambda3")]
    pub lambda3: f32,
    #[serde(default = "default_tau")]
    pub tau: f32,
    /// Explicit block indices. When absent, `layer_count` blocks are chosen
    /// with [`select_layers`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<usize>>,
    #[serde(default = "default_layer_count")]
    pub layer_count: usize,
    #[serde(default = "default_feat")]
    pub feat_epochs: usize,
    #[serde(default = "default_rel")]
    pub rel_epochs: usize,
    #[serde(default = "default_total")]
    pub total_epochs: usize,
    /// Distill from the teacher's argmax label instead of its distribution.
    #[serde(default)]
    pub use_hard: bool,
    /// Add label-smoothed cross-entropy against the ground truth.
    #[serde(default)]
    pub use_gt_label: bool,
}

impl Default for ImitationConfig {
    fn default() -> Self {
        Self {
            lambda1: default_lambda1(),
            lambda2: default_lambda2(),
            lambda3: default_lambda3(),
            tau: default_tau(),
            layers: None,
            layer_count: default_layer_count(),
            feat_epochs: default_feat(),
            rel_epochs: default_rel(),
            total_epochs: default_total(),
            use_hard: false,
            use_gt_label: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Feat,
    Rel,
    SoftOnly,
}

/// Terms contributing to the total in a given epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveTerms {
    pub soft: bool,
    pub in_prime: bool,
    pub out: bool,
    pub rel: bool,
}

impl ImitationConfig {
    /// Soft distillation only, with the same schedule fields.
    pub fn soft_only() -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            ..Self::default()
        }
    }

    pub fn any_lambda(&self) -> bool {
        self.lambda1 > 0.0 || self.lambda2 > 0.0 || self.lambda3 > 0.0
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.feat_epochs + self.rel_epochs > self.total_epochs {
            return Err(Error::Config(format!(
                "feat_epochs {} + rel_epochs {} exceed total_epochs {}",
                self.feat_epochs, self.rel_epochs, self.total_epochs
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be > 0".into()));
        }
        if [self.lambda1, self.lambda2, self.lambda3].iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config("lambdas must be >= 0".into()));
        }
        let layers = self.resolve_layers(spec)?;
        if self.any_lambda() && layers.is_empty() {
            return Err(Error::Config("imitation needs at least one layer when a lambda is > 0".into()));
        }
        Ok(())
    }

    pub fn resolve_layers(&self, spec: &ModelSpec) -> Result<Vec<usize>> {
        match &self.layers {
            Some(explicit) => {
                let total = spec.total_blocks();
                if let Some(bad) = explicit.iter().find(|&&b| b >= total) {
                    return Err(Error::Config(format!("layer {bad} out of range for {total} blocks")));
                }
                let mut v = explicit.clone();
                v.sort_unstable();
                v.dedup();
                Ok(v)
            }
            None if !self.any_lambda() => Ok(Vec::new()),
            None => select_layers(spec, self.layer_count),
        }
    }

    pub fn phase(&self, epoch: usize) -> Result<Phase> {
        if epoch >= self.total_epochs {
            return Err(Error::InvalidArgument(format!("epoch {epoch} outside schedule of {} epochs", self.total_epochs)));
        }
        Ok(if epoch < self.feat_epochs {
            Phase::Feat
        } else if epoch < self.feat_epochs + self.rel_epochs {
            Phase::Rel
        } else {
            Phase::SoftOnly
        })
    }

    /// Terms that contribute in `epoch`. A term with a zero weight is never
    /// active.
    pub fn active(&self, epoch: usize) -> Result<ActiveTerms> {
        let phase = self.phase(epoch)?;
        Ok(ActiveTerms {
            soft: true,
            in_prime: phase == Phase::Feat && self.lambda1 > 0.0,
            out: phase == Phase::Feat && self.lambda2 > 0.0,
            rel: phase == Phase::Rel && self.lambda3 > 0.0,
        })
    }

    /// Effective weights `(λ1, λ2, λ3)` for a batch of `batch` samples.
    pub fn effective_lambdas(&self, batch: usize) -> (f32, f32, f32) {
        let b = batch.max(1) as f32;
        (self.lambda1 / b, self.lambda2 / b, self.lambda3 / b)
    }
}

/// Loss values of one step. Per-layer terms are summed over the selected
/// layers and reported unweighted; `total` applies the weights and gating.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub soft: f32,
    pub in_prime: f32,
    pub out: f32,
    pub rel: f32,
    pub total: f32,
    pub active: Option<ActiveTerms>,
}

/// Mean squared difference between the first-norm outputs.
pub fn loss_in(tape: &mut Tape, student_ln: Var, teacher_ln: Var) -> Result<Var> {
    tape.mse(student_ln, teacher_ln)
}

/// Mean squared difference between block outputs.
pub fn loss_in_prime(tape: &mut Tape, student_out: Var, teacher_out: Var) -> Result<Var> {
    tape.mse(student_out, teacher_out)
}

/// Mean squared difference between mixer outputs.
pub fn loss_out(tape: &mut Tape, student_mixer: Var, teacher_mixer: Var) -> Result<Var> {
    tape.mse(student_mixer, teacher_mixer)
}

/// Squared Frobenius distance of the relation matrices over `N·(HW)²`.
pub fn loss_rel(tape: &mut Tape, student_out: Var, teacher_out: Var) -> Result<Var> {
    if tape.shape(student_out) != tape.shape(teacher_out) {
        return Err(Error::shape(
            "loss_rel",
            format!("{:?} vs {:?}", tape.shape(student_out), tape.shape(teacher_out)),
        ));
    }
    let rs = tape.relation_matrix(student_out)?;
    let rt = tape.relation_matrix(teacher_out)?;
    tape.mse(rs, rt)
}

/// `τ² · KL(softmax(t/τ) ‖ softmax(s/τ))`, averaged over the batch.
pub fn loss_soft(tape: &mut Tape, student_logits: Var, teacher_logits: Var, tau: f32) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be > 0, got {tau}")));
    }
    if tape.shape(student_logits) != tape.shape(teacher_logits) {
        return Err(Error::shape(
            "loss_soft",
            format!("{:?} vs {:?}", tape.shape(student_logits), tape.shape(teacher_logits)),
        ));
    }
    let (s, t) = if tau == 1.0 {
        (student_logits, teacher_logits)
    } else {
        (tape.scale(student_logits, 1.0 / tau)?, tape.scale(teacher_logits, 1.0 / tau)?)
    };
    let log_q = tape.log_softmax(s)?;
    let log_p = tape.log_softmax(t)?;
    let kl = tape.kl_div(log_q, log_p)?;
    if tau == 1.0 {
        Ok(kl)
    } else {
        tape.scale(kl, tau * tau)
    }
}

/// Relation matrices `(N, HW, HW)` of a `(N, C, H, W)` tensor.
pub fn relation_matrix(t: &Tensor) -> Result<Tensor> {
    crate::tensor::kernels::relation_matrix(t).map(|(r, _)| r)
}

/// Evaluates a two-argument loss on plain tensors.
pub fn eval_pair(a: &Tensor, b: &Tensor, f: impl FnOnce(&mut Tape, Var, Var) -> Result<Var>) -> Result<f32> {
    let mut tape = Tape::no_grad();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = f(&mut tape, va, vb)?;
    Ok(tape.value(out).data()[0])
}

/// Teacher activations for one selected block, held as tape constants.
#[derive(Debug, Clone, Copy)]
pub struct TeacherLayer {
    pub output: Var,
    pub mixer_out: Var,
}

/// Combines soft and imitation terms for `epoch`, computing only active
/// per-layer terms.
pub fn total_loss(
    tape: &mut Tape,
    soft: Var,
    student: &[BlockCapture],
    teacher: &[TeacherLayer],
    epoch: usize,
    cfg: &ImitationConfig,
    batch: usize,
) -> Result<(Var, LossReport)> {
    if student.len() != teacher.len() {
        return Err(Error::InvalidArgument(format!(
            "{} student layers vs {} teacher layers",
            student.len(),
            teacher.len()
        )));
    }
    let active = cfg.active(epoch)?;
    let (l1, l2, l3) = cfg.effective_lambdas(batch);
    let mut report = LossReport {
        soft: tape.value(soft).data()[0],
        active: Some(active),
        ..LossReport::default()
    };
    let mut total = soft;
    for (s, t) in student.iter().zip(teacher) {
        if active.in_prime {
            let v = loss_in_prime(tape, s.output, t.output)?;
            report.in_prime += tape.value(v).data()[0];
            let w = tape.scale(v, l1)?;
            total = tape.add(total, w)?;
        }
        if active.out {
            let v = loss_out(tape, s.mixer_out, t.mixer_out)?;
            report.out += tape.value(v).data()[0];
            let w = tape.scale(v, l2)?;
            total = tape.add(total, w)?;
        }
        if active.rel {
            let v = loss_rel(tape, s.output, t.output)?;
            report.rel += tape.value(v).data()[0];
            let w = tape.scale(v, l3)?;
            total = tape.add(total, w)?;
        }
    }
    report.total = tape.value(total).data()[0];
    Ok((total, report))
}

/// Pure combination of already-summed term values, mirroring [`total_loss`].
pub fn combine(soft: f32, in_prime: f32, out: f32, rel: f32, epoch: usize, cfg: &ImitationConfig, batch: usize) -> Result<LossReport> {
    let active = cfg.active(epoch)?;
    let (l1, l2, l3) = cfg.effective_lambdas(batch);
    let mut total = soft;
    if active.in_prime {
        total += l1 * in_prime;
    }
    if active.out {
        total += l2 * out;
    }
    if active.rel {
        total += l3 * rel;
    }
    Ok(LossReport {
        soft,
        in_prime,
        out,
        rel,
        total,
        active: Some(active),
    })
}

/// `count` block indices: the last block of every stage when `count` equals
/// the stage count, otherwise evenly spaced over the global block order with
/// ties going to the later block.
pub fn select_layers(spec: &ModelSpec, count: usize) -> Result<Vec<usize>> {
    let total = spec.total_blocks();
    if count == 0 || count > total {
        return Err(Error::InvalidArgument(format!("layer count {count} outside 1..={total}")));
    }
    if count == spec.stages.len() {
        let mut end = 0;
        return Ok(spec
            .stages
            .iter()
            .map(|s| {
                end += s.depth;
                end - 1
            })
            .collect());
    }
    Ok((1..=count).map(|i| (i * total).div_ceil(count) - 1).collect())
}

/// Copies every non-mixer tensor of `teacher` into `student`. Mixer
/// parameters of the student keep their current values.
pub fn load_from_teacher(student: &Model, teacher: &Model) -> Result<Model> {
    if !student.spec().is_isomorphic(teacher.spec()) {
        return Err(Error::InvalidArgument("student and teacher specs are not isomorphic".into()));
    }
    if student.is_deployed() || teacher.is_deployed() {
        return Err(Error::ModelState("teacher loading needs train-form models".into()));
    }
    let mut out = student.clone();
    for (so, st) in out.params.stages.iter_mut().zip(&teacher.params.stages) {
        so.embed_weight = st.embed_weight.clone();
        so.embed_bias = st.embed_bias.clone();
        for (bo, bt) in so.blocks.iter_mut().zip(&st.blocks) {
            if let (TokenSubBlock::Train { norm1: n_out, .. }, TokenSubBlock::Train { norm1: n_t, .. }) = (&mut bo.token, &bt.token) {
                *n_out = n_t.clone();
            }
            bo.norm2 = bt.norm2.clone();
            bo.fc1_weight = bt.fc1_weight.clone();
            bo.fc1_bias = bt.fc1_bias.clone();
            bo.fc2_weight = bt.fc2_weight.clone();
            bo.fc2_bias = bt.fc2_bias.clone();
            bo.layer_scale_1 = bt.layer_scale_1.clone();
            bo.layer_scale_2 = bt.layer_scale_2.clone();
        }
    }
    out.params.head_norm = teacher.params.head_norm.clone();
    out.params.head_weight = teacher.params.head_weight.clone();
    out.params.head_bias = teacher.params.head_bias.clone();
    Ok(out)
}
