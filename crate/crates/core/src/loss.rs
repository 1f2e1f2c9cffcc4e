//! Training losses: sine distance of the unoriented normal, a z-alignment
//! constraint on the canonicalization rotation, weight regression against an
//! analytic point-reliability target, dual-logit sign cross-entropy, and a
//! contrastive logit separation term.
//!
//! Ground-truth normals enter as constants; gradients flow only through
//! network outputs.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LossConfig {
    /// Weights of the five parts.
    pub lambda: [f64; 5],
    /// Use the clean twin's normal as ground truth instead of the stale
    /// per-point annotation.
    pub use_cnd_gt: bool,
    pub use_l2: bool,
    pub use_l5: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: [0.1, 0.5, 1.0, 0.1, 0.1],
            use_cnd_gt: true,
            use_l2: true,
            use_l5: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.iter().any(|&l| l < 0.0) {
            return Err(Error::InvalidArgument(
                "loss weights must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

fn require_unit(name: &'static str, v: &Vector3<f64>) -> Result<()> {
    if (v.norm() - 1.0).abs() > 1e-3 {
        return Err(Error::InvalidArgument(format!(
            "{} must be unit length, norm is {}",
            name,
            v.norm()
        )));
    }
    Ok(())
}

fn vec3_tensor(v: &Vector3<f64>) -> Tensor {
    Tensor::from_vec(vec![3], vec![v.x, v.y, v.z]).expect("3-vector")
}

/// Sine of the angle between the ground-truth and predicted normal:
/// `‖n_gt × n̂‖`. Sign-blind; orientation is learned by the sign losses.
pub fn l1_sine(n_gt: &Vector3<f64>, n_hat: &Tensor) -> Result<Tensor> {
    require_unit("ground-truth normal", n_gt)?;
    if n_hat.shape() != [3] {
        return Err(Error::ShapeMismatch {
            op: "sine loss",
            lhs: n_hat.shape(),
            rhs: vec![3],
        });
    }
    let nv = n_hat.to_vec();
    let norm = (nv[0] * nv[0] + nv[1] * nv[1] + nv[2] * nv[2]).sqrt();
    if (norm - 1.0).abs() > 1e-3 {
        return Err(Error::InvalidArgument(format!(
            "predicted normal must be unit length, norm is {}",
            norm
        )));
    }
    vec3_tensor(n_gt).cross3(n_hat)?.l2norm(None)
}

/// Alignment of the rotated ground-truth normal with the z axis:
/// `‖(R n_gt) × z‖`, pushing the canonicalization to stand the surface up.
pub fn l2_z(n_gt: &Vector3<f64>, r_qstn: &Tensor) -> Result<Tensor> {
    if r_qstn.shape() != [3, 3] {
        return Err(Error::ShapeMismatch {
            op: "z alignment loss",
            lhs: r_qstn.shape(),
            rhs: vec![3, 3],
        });
    }
    let rotated = vec3_tensor(n_gt)
        .reshape(vec![1, 3])?
        .matmul2(&r_qstn.transpose2()?)?
        .reshape(vec![3])?;
    let z = Tensor::from_vec(vec![3], vec![0.0, 0.0, 1.0])?;
    rotated.cross3(&z)?.l2norm(None)
}

/// Analytic per-point reliability target: `w_i = exp(-(p_i·n)²/δ²)` with
/// `δ = max(0.05², 0.3·Σ(p_i·n)²/M)`. Returns the target values.
pub fn weight_targets(local_pts: &[Vector3<f64>], n_gt: &Vector3<f64>) -> Result<Vec<f64>> {
    if local_pts.is_empty() {
        return Err(Error::EmptyInput("weight targets of empty patch"));
    }
    require_unit("ground-truth normal", n_gt)?;
    let d2: Vec<f64> = local_pts.iter().map(|p| p.dot(n_gt).powi(2)).collect();
    let mean_d2 = d2.iter().sum::<f64>() / d2.len() as f64;
    let delta = (0.05f64 * 0.05).max(0.3 * mean_d2);
    Ok(d2.iter().map(|&d| (-d / (delta * delta)).exp()).collect())
}

/// Mean squared difference between predicted weights and the analytic
/// targets.
pub fn l3_weights(
    local_pts: &[Vector3<f64>],
    n_gt: &Vector3<f64>,
    w_hat: &Tensor,
) -> Result<Tensor> {
    let targets = weight_targets(local_pts, n_gt)?;
    if w_hat.numel() != targets.len() {
        return Err(Error::LengthMismatch {
            what: "predicted weights vs patch points".into(),
            left: w_hat.numel(),
            right: targets.len(),
        });
    }
    let t = Tensor::from_vec(vec![targets.len()], targets)?;
    w_hat.sub(&t)?.square().mean_all()
}

fn bce(logit: &Tensor, target_one: bool) -> Result<Tensor> {
    let p = logit.sigmoid().clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    let term = if target_one {
        p.ln()
    } else {
        p.neg().add_scalar(1.0).ln()
    };
    Ok(term.neg().sum_all())
}

/// Binary cross entropy of both sign logits. The positive head's target is
/// 1 when the initialized sign agrees with the ground truth; the negative
/// head scores the flipped hypothesis. Pass `s_minus = None` to train
/// without the flipped sample.
pub fn l4_sign_bce(
    s_plus: &Tensor,
    s_minus: Option<&Tensor>,
    sgn_init: f64,
    sgn_gt: f64,
) -> Result<Tensor> {
    if !(sgn_init == 1.0 || sgn_init == -1.0) || !(sgn_gt == 1.0 || sgn_gt == -1.0) {
        return Err(Error::InvalidArgument(format!(
            "signs must be +/-1, got init {} gt {}",
            sgn_init, sgn_gt
        )));
    }
    let consistent = sgn_init * sgn_gt == 1.0;
    let mut loss = bce(s_plus, consistent)?;
    if let Some(s_minus) = s_minus {
        loss = loss.add(&bce(s_minus, !consistent)?)?;
    }
    Ok(loss)
}

/// Pushes the two sign probabilities apart: `exp(-(σ(s+) - σ(s-))²)`.
pub fn l5_contrastive(s_plus: &Tensor, s_minus: &Tensor) -> Result<Tensor> {
    Ok(s_plus
        .sigmoid()
        .sum_all()
        .sub(&s_minus.sigmoid().sum_all())?
        .square()
        .neg()
        .exp())
}

/// The five parts of one training item's loss. Absent optional parts are
/// excluded from the composite regardless of config.
pub struct LossParts {
    pub l1: Tensor,
    pub l2: Option<Tensor>,
    pub l3: Tensor,
    pub l4: Tensor,
    pub l5: Option<Tensor>,
}

impl LossParts {
    pub fn values(&self) -> Result<[f64; 5]> {
        Ok([
            self.l1.item()?,
            self.l2.as_ref().map(|t| t.item()).transpose()?.unwrap_or(0.0),
            self.l3.item()?,
            self.l4.item()?,
            self.l5.as_ref().map(|t| t.item()).transpose()?.unwrap_or(0.0),
        ])
    }
}

/// Weighted composite honoring the config toggles. Non-finite parts are
/// rejected by name.
pub fn total(parts: &LossParts, config: &LossConfig) -> Result<Tensor> {
    config.validate()?;
    let mut terms: Vec<(usize, &Tensor)> = vec![(0, &parts.l1), (2, &parts.l3), (3, &parts.l4)];
    if config.use_l2 {
        if let Some(l2) = &parts.l2 {
            terms.push((1, l2));
        }
    }
    if config.use_l5 {
        if let Some(l5) = &parts.l5 {
            terms.push((4, l5));
        }
    }
    let names = ["l1", "l2", "l3", "l4", "l5"];
    let mut acc: Option<Tensor> = None;
    for (i, t) in terms {
        let v = t.item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss part {} is {}", names[i], v)));
        }
        let scaled = t.scale(config.lambda[i]);
        acc = Some(match acc {
            None => scaled,
            Some(a) => a.add(&scaled)?,
        });
    }
    acc.ok_or(Error::EmptyInput("no loss parts enabled"))
}
