//! Training objectives.
//!
//! The frame loss is squared error plus a weighted absolute term. Both are
//! reduced by per-element means (not sums) so the published weights keep
//! their meaning regardless of crop resolution or batch size. The KL term
//! sums over latent dimensions and averages over the batch.

use ndarray::{ArrayViewD, Axis};
use serde::{Deserialize, Serialize};

use crate::model::LatentDistribution;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    /// Weight of the absolute-error term inside the frame loss.
    pub lambda_l1: f64,
    /// Weight of the summed KL terms inside the total loss.
    pub lambda_kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_l1: 1.0,
            lambda_kl: 0.1,
        }
    }
}

/// mean((f - f_hat)^2) + lambda_l1 * mean(|f - f_hat|)
pub fn frame_loss(f: &ArrayViewD<f64>, f_hat: &ArrayViewD<f64>, lambda_l1: f64) -> Result<f64> {
    if f.shape() != f_hat.shape() {
        return Err(Error::Shape(format!(
            "frame loss: {:?} vs {:?}",
            f.shape(),
            f_hat.shape()
        )));
    }
    let n = f.len() as f64;
    let mut sq = 0.0;
    let mut ab = 0.0;
    for (&a, &b) in f.iter().zip(f_hat.iter()) {
        let d = a - b;
        sq += d * d;
        ab += d.abs();
    }
    Ok(sq / n + lambda_l1 * ab / n)
}

/// Mean of the frame losses of the two backward predictions (one fed with
/// predicted futures, one with real futures) against the shared target.
pub fn backward_loss(
    f_hat_pred: &ArrayViewD<f64>,
    f_hat_real: &ArrayViewD<f64>,
    f_gt: &ArrayViewD<f64>,
    lambda_l1: f64,
) -> Result<f64> {
    let l1 = frame_loss(f_gt, f_hat_pred, lambda_l1)?;
    let l2 = frame_loss(f_gt, f_hat_real, lambda_l1)?;
    Ok(0.5 * (l1 + l2))
}

/// KL(N(mu, sigma^2) || N(0, 1)) = -1/2 (log sigma^2 - mu^2 - sigma^2 + 1),
/// summed over latent dimensions, averaged over the batch.
pub fn kl_loss(dist: &LatentDistribution) -> Result<f64> {
    if dist.mean.shape() != dist.logvar.shape() {
        return Err(Error::Shape(format!(
            "kl loss: mean {:?} vs logvar {:?}",
            dist.mean.shape(),
            dist.logvar.shape()
        )));
    }
    if !dist.mean.iter().all(|v| v.is_finite()) || !dist.logvar.iter().all(|v| v.is_finite()) {
        return Err(Error::Shape("kl loss: non-finite inputs".into()));
    }
    let batch = dist.mean.len_of(Axis(0)) as f64;
    let total: f64 = dist
        .mean
        .iter()
        .zip(dist.logvar.iter())
        .map(|(&m, &lv)| -0.5 * (lv - m * m - lv.exp() + 1.0))
        .sum();
    Ok(total / batch)
}

/// Total objective for one training step: the seven forward frame losses,
/// the backward loss, and the weighted sum of the per-CVAE KL losses.
pub fn total_loss(
    forward_frame_losses: &[f64],
    backward: f64,
    kl_losses: &[f64],
    weights: &LossWeights,
) -> f64 {
    forward_frame_losses.iter().sum::<f64>()
        + backward
        + weights.lambda_kl * kl_losses.iter().sum::<f64>()
}
