//! Phase 3: bilinear OD decoding and the magnitude-balanced loss.
//!
//! The final embedding of each mode splits into origin and destination
//! halves; the predicted OD matrix is `(W_m U^O)(U^D)^T`, a bilinear form
//! with one learnable square matrix per mode. Per-mode losses are mean
//! squared error over matrix entries, combined across modes with weights
//! `eta_m / mu_m`, where `mu_m` is the mean entry of the mode's current
//! ground-truth matrix. The division keeps modes with small magnitudes
//! from being drowned out.

use ndarray::Array2;

use crate::autodiff::Tensor;
use crate::error::{FtnError, Result};
use crate::intra::split_od;

/// `M_hat = (W_m . U^O)(U^D)^T`; the parameter matrix left-multiplies the
/// stacked origin embeddings.
pub fn predict_od(u: &Tensor, w_m: &Tensor) -> Result<Tensor> {
    let (n, d) = u.shape();
    if d % 2 != 0 {
        return Err(FtnError::Config(format!(
            "embedding width {d} must be even for the origin/destination split"
        )));
    }
    if w_m.shape() != (n, n) {
        return Err(FtnError::Dimension {
            op: "predict_od",
            lhs: vec![n, n],
            rhs: vec![w_m.shape().0, w_m.shape().1],
        });
    }
    let (u_o, u_d) = split_od(u)?;
    w_m.matmul(&u_o)?.matmul(&u_d.transpose())
}

/// Mean squared error over all matrix entries, as a graph scalar.
pub fn mode_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(FtnError::Dimension {
            op: "mode_loss",
            lhs: vec![pred.shape().0, pred.shape().1],
            rhs: vec![target.shape().0, target.shape().1],
        });
    }
    let diff = pred.sub(target)?;
    let n = (pred.shape().0 * pred.shape().1) as f64;
    Ok(diff.hadamard(&diff)?.sum_all().scale(1.0 / n))
}

/// What to do when a mode's ground-truth matrix is all zero, making the
/// balancing factor `mu_m` undefined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ZeroMeanPolicy {
    /// Drop that mode's term from the loss and log a warning.
    SkipWithWarning,
    /// Fail the training step.
    Error,
}

#[derive(Debug, Clone)]
pub struct LossConfig {
    /// Per-mode weight, positive.
    pub eta: Vec<f64>,
    pub on_zero_mean: ZeroMeanPolicy,
}

impl LossConfig {
    pub fn uniform(modes: usize) -> LossConfig {
        LossConfig {
            eta: vec![1.0; modes],
            on_zero_mean: ZeroMeanPolicy::SkipWithWarning,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(bad) = self.eta.iter().find(|e| **e <= 0.0) {
            return Err(FtnError::Config(format!("eta must be positive, got {bad}")));
        }
        Ok(())
    }
}

/// Mean entry of the ground-truth matrix, the balancing factor `mu_m`.
pub fn balance_factor(target: &Array2<f64>) -> f64 {
    target.sum() / target.len() as f64
}

/// `L = sum_m (eta_m / mu_m) * L_m` over the modes whose targets have a
/// positive mean.
pub fn balanced_multimodal_loss(
    per_mode_losses: &[Tensor],
    ground_truths: &[&Array2<f64>],
    config: &LossConfig,
) -> Result<Tensor> {
    if per_mode_losses.len() != ground_truths.len() || per_mode_losses.len() != config.eta.len() {
        return Err(FtnError::Contract(format!(
            "{} losses, {} targets, {} eta weights",
            per_mode_losses.len(),
            ground_truths.len(),
            config.eta.len()
        )));
    }
    config.validate()?;
    let mut total: Option<Tensor> = None;
    for ((loss, target), eta) in per_mode_losses.iter().zip(ground_truths).zip(&config.eta) {
        let mu = balance_factor(target);
        if mu <= 0.0 {
            match config.on_zero_mean {
                ZeroMeanPolicy::SkipWithWarning => {
                    log::warn!("all-zero ground truth; skipping mode term in balanced loss");
                    continue;
                }
                ZeroMeanPolicy::Error => {
                    return Err(FtnError::Data(
                        "all-zero ground truth makes the balance factor undefined".into(),
                    ));
                }
            }
        }
        let term = loss.scale(eta / mu);
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    Ok(total.unwrap_or_else(|| Tensor::scalar(0.0)))
}
