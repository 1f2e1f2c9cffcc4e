use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// AdamW moments plus the cosine-annealed learning-rate schedule state.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub step: u64,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub total_steps: u64,
    /// First and second moment per parameter name.
    pub moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new(base_lr: f64, weight_decay: f64, total_steps: u64) -> Self {
        Self {
            step: 0,
            base_lr,
            weight_decay,
            total_steps,
            moments: BTreeMap::new(),
        }
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.base_lr, self.step, self.total_steps)
    }
}

/// Cosine annealing: `lr0 · ½(1 + cos(π t/T))`, clamped to 0 past `T`.
pub fn cosine_lr(base_lr: f64, step: u64, total_steps: u64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return 0.0;
    }
    let t = step as f64 / total_steps as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// One decoupled-weight-decay Adam update over named parameter vectors.
/// Missing gradients leave the parameter untouched; the step counter and
/// schedule still advance once per call.
pub fn adamw_step(
    state: &mut OptimizerState,
    params: &mut BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    grads: &BTreeMap<String, Vec<f64>>,
) -> Result<()> {
    let lr = state.current_lr();
    let t = state.step + 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for (name, (shape, theta)) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        if g.len() != theta.len() {
            return Err(Error::LengthMismatch {
                what: "gradient vs parameter".into(),
                left: g.len(),
                right: theta.len(),
            });
        }
        if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {} (shape {:?}) contains {}",
                name, shape, bad
            )));
        }
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; theta.len()], vec![0.0; theta.len()]));
        for i in 0..theta.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            theta[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + state.weight_decay * theta[i]);
        }
    }
    state.step = t;
    Ok(())
}

/// Scales all gradients in place so their joint Euclidean norm does not
/// exceed `max_norm`. Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let total: f64 = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let s = max_norm / total;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    total
}
