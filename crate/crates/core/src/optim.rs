//! AdamW with decoupled weight decay, global-norm gradient clipping and a
//! per-epoch exponential learning-rate decay.

use crate::error::{Result, SentinelError};
use crate::tensor::{ParamTensor, Tensor};

/// Hyperparameters for [`AdamWState`]. With `weight_decay = 0` the update
/// reduces to plain Adam.
#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter AdamW state.
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub step_count: u64,
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWState {
    pub fn new(shape: &[usize], cfg: &AdamWConfig) -> Self {
        AdamWState {
            step_count: 0,
            first_moment: Tensor::zeros(shape.to_vec()),
            second_moment: Tensor::zeros(shape.to_vec()),
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }
}

/// One AdamW update with decoupled weight decay:
/// `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`, bias-corrected `m̂, v̂`,
/// `value ← value − lr·(m̂/(√v̂+ε) + wd·value)`.
pub fn adamw_step(param: &mut ParamTensor, st: &mut AdamWState, label: &str) -> Result<()> {
    if !param.grad.all_finite() {
        return Err(SentinelError::Numeric {
            context: format!("adamw_step({label})"),
            detail: "non-finite gradient".into(),
        });
    }
    st.step_count += 1;
    let t = st.step_count as i32;
    let bc1 = 1.0 - st.beta1.powi(t);
    let bc2 = 1.0 - st.beta2.powi(t);
    let g = param.grad.data();
    let m = st.first_moment.data_mut();
    let v = st.second_moment.data_mut();
    let val = param.value.data_mut();
    for i in 0..val.len() {
        m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * g[i];
        v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        val[i] -= st.lr * (m_hat / (v_hat.sqrt() + st.eps) + st.weight_decay * val[i]);
    }
    Ok(())
}

/// Clip the global ℓ₂ norm of all gradients to `max_norm`.
///
/// Returns the applied scale factor (`1.0` when no clipping happened).
pub fn clip_grad_norm(params: &mut [&mut ParamTensor], max_norm: f64) -> f64 {
    let sq_sum: f64 = params
        .iter()
        .map(|p| p.grad.data().iter().map(|g| g * g).sum::<f64>())
        .sum();
    let norm = sq_sum.sqrt();
    if norm <= max_norm {
        return 1.0;
    }
    let scale = max_norm / (norm + 1e-8);
    for p in params.iter_mut() {
        p.grad.scale(scale);
    }
    scale
}

/// AdamW states for an ordered list of parameters (one model).
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub states: Vec<AdamWState>,
}

impl Optimizer {
    pub fn new(cfg: &AdamWConfig, shapes: &[Vec<usize>]) -> Self {
        Optimizer {
            states: shapes.iter().map(|s| AdamWState::new(s, cfg)).collect(),
        }
    }

    /// Step every parameter against its paired state.
    pub fn step(&mut self, params: &mut [&mut ParamTensor], labels: &[String]) -> Result<()> {
        debug_assert_eq!(params.len(), self.states.len());
        for ((p, st), label) in params.iter_mut().zip(&mut self.states).zip(labels) {
            adamw_step(p, st, label)?;
        }
        Ok(())
    }

    /// Per-epoch learning-rate scheduler step (exponential decay).
    pub fn decay_lr(&mut self, factor: f64) {
        for st in &mut self.states {
            st.lr *= factor;
        }
    }
}
