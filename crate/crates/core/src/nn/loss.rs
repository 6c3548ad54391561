use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{dim_mismatch, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

/// `z = mu + exp(log_var / 2) · eps`, elementwise.
pub fn reparameterize(mu: &[f64], log_var: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    if mu.len() != log_var.len() || mu.len() != eps.len() {
        return Err(dim_mismatch(mu.len(), log_var.len().max(eps.len())));
    }
    Ok(mu
        .iter()
        .zip(log_var)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

/// Batch-mean reconstruction error plus `alpha` times the batch-mean KL
/// divergence to the unit Gaussian. Empty `mu`/`log_var` give a plain
/// autoencoder loss.
pub fn vae_loss(x: &Tensor, x_hat: &Tensor, mu: &[f64], log_var: &[f64], alpha: f64) -> Result<LossParts> {
    if x.shape() != x_hat.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", x.shape(), x_hat.shape())));
    }
    if mu.len() != log_var.len() {
        return Err(dim_mismatch(mu.len(), log_var.len()));
    }
    let n = x.batch() as f64;
    let recon = 0.5 * x.data().iter().zip(x_hat.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    let kl = 0.5
        * mu.iter()
            .zip(log_var)
            .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
            .sum::<f64>()
        / n;
    let total = recon + alpha * kl;
    if !(total.is_finite() && recon.is_finite() && kl.is_finite()) {
        return Err(Error::NonFiniteLoss { epoch: 0 });
    }
    Ok(LossParts { total, recon, kl })
}
