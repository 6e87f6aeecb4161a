use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Moment buffers, one pair per parameter, plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl OptimState {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let sizes: Vec<usize> = shapes.into_iter().map(|s| s.iter().product()).collect();
        Self {
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: OptimState,
}

impl AdamW {
    pub fn new<'a>(config: AdamWConfig, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        Self {
            config,
            state: OptimState::new(shapes),
        }
    }

    /// One update. `grads[i] == None` means no gradient reached parameter `i`
    /// and is treated as zero. `decay[i]` selects whether weight decay applies.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&[f32]>], decay: &[bool]) -> Result<()> {
        if params.len() != self.state.len() || grads.len() != params.len() || decay.len() != params.len() {
            return Err(Error::shape(
                "adamw_step",
                format!(
                    "{} params, {} grads, {} decay flags, {} moment buffers",
                    params.len(),
                    grads.len(),
                    decay.len(),
                    self.state.len()
                ),
            ));
        }
        for (i, p) in params.iter().enumerate() {
            if p.numel() != self.state.first[i].len() {
                return Err(Error::shape("adamw_step", format!("parameter {i} changed size")));
            }
            if let Some(g) = grads[i] {
                if g.len() != p.numel() {
                    return Err(Error::shape("adamw_step", format!("gradient {i} length {} vs {}", g.len(), p.numel())));
                }
            }
        }
        self.state.step += 1;
        let AdamWConfig { lr, beta1, beta2, eps, weight_decay } = self.config;
        let t = self.state.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let m = &mut self.state.first[i];
            let v = &mut self.state.second[i];
            let wd = if decay[i] { weight_decay } else { 0.0 };
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let g = grads[i].map_or(0.0, |g| g[j]);
                *w -= lr * wd * *w;
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Peak learning rate from the linear batch-size scaling rule:
/// `base_lr · batch_size / 1024`.
pub fn scaled_lr(base_lr: f32, batch_size: usize) -> f32 {
    base_lr * batch_size as f32 / 1024.0
}
