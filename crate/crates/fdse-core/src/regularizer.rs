//! Consistency regularizer: pulls a client's running statistics of each
//! decomposed block's output toward the global model's statistics, weighted
//! by a depth softmax. The running statistic is a detached history term plus
//! the differentiable current-batch term, so gradients flow only through the
//! (1-momentum)-weighted batch statistics.

use crate::error::{FdseError, Result};
use crate::model::DfeBatchStats;
use crate::tape::{Tape, ValueId};
use crate::tensor::{Real, Tensor};

/// Per-layer statistics pair for the value-level (non-differentiable) loss.
#[derive(Debug, Clone)]
pub struct LayerStatSnapshot {
    pub layer: usize,
    pub local_mean: Vec<f64>,
    pub local_var: Vec<f64>,
    pub global_mean: Vec<f64>,
    pub global_var: Vec<f64>,
}

impl LayerStatSnapshot {
    /// (1/d)*||mean - global_mean||^2 + ((||var||_1 - ||global_var||_1)/d)^2
    pub fn loss(&self) -> Result<f64> {
        let d = self.local_mean.len();
        if d == 0 {
            return Err(FdseError::EmptyLayer);
        }
        if self.local_var.len() != d || self.global_mean.len() != d || self.global_var.len() != d {
            return Err(FdseError::Dimension(format!(
                "layer {}: stat vectors disagree on channel count",
                self.layer
            )));
        }
        let df = d as f64;
        let sq: f64 = self
            .local_mean
            .iter()
            .zip(&self.global_mean)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let l1_local: f64 = self.local_var.iter().map(|v| v.abs()).sum();
        let l1_global: f64 = self.global_var.iter().map(|v| v.abs()).sum();
        let var_term = (l1_local - l1_global) / df;
        Ok(sq / df + var_term * var_term)
    }
}

/// Depth weights w_l = exp(beta*l) / sum_j exp(beta*j) for l = 1..=count.
pub fn depth_weights(count: usize, beta: f64) -> Vec<f64> {
    assert!(count >= 1, "depth_weights needs at least one layer");
    let mx = beta * count as f64;
    let exps: Vec<f64> = (1..=count).map(|l| (beta * l as f64 - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Differentiable per-layer consistency loss. Builds the running-stat update
/// mean_hat = momentum*prev + (1-momentum)*batch on the tape (history
/// detached) and compares against the global statistics.
pub fn layer_con_loss_on_tape<F: Real>(
    tape: &mut Tape<F>,
    stats: &DfeBatchStats,
    global_mean: &[F],
    global_var: &[F],
    momentum: F,
) -> Result<ValueId> {
    let d = stats.channels;
    if d == 0 {
        return Err(FdseError::EmptyLayer);
    }
    if global_mean.len() != d || global_var.len() != d {
        return Err(FdseError::Dimension(format!(
            "block {}: global stats have {} channels, expected {}",
            stats.block,
            global_mean.len(),
            d
        )));
    }
    let one_m = F::one() - momentum;
    let inv_d = F::one() / F::from_f64(d as f64);

    let prev_mean = tape.constant(Tensor::new(
        vec![d],
        stats.prev_mean.iter().map(|&v| F::from_f64(v)).collect(),
    )?);
    let prev_var = tape.constant(Tensor::new(
        vec![d],
        stats.prev_var.iter().map(|&v| F::from_f64(v)).collect(),
    )?);
    let hist_mean = tape.scale(prev_mean, momentum)?;
    let batch_mean = tape.scale(stats.mean, one_m)?;
    let mean_hat = tape.add(hist_mean, batch_mean)?;
    let hist_var = tape.scale(prev_var, momentum)?;
    let batch_var = tape.scale(stats.var, one_m)?;
    let var_hat = tape.add(hist_var, batch_var)?;

    let g_mean = tape.constant(Tensor::new(vec![d], global_mean.to_vec())?);
    let diff = tape.sub(mean_hat, g_mean)?;
    let sq = tape.mul(diff, diff)?;
    let sq_sum = tape.sum(sq)?;
    let mean_term = tape.scale(sq_sum, inv_d)?;

    let var_abs = tape.abs(var_hat)?;
    let l1_local = tape.sum(var_abs)?;
    let l1_global: F = global_var.iter().map(|v| v.abs()).sum();
    let g_l1 = tape.constant(Tensor::scalar(l1_global));
    let var_diff = tape.sub(l1_local, g_l1)?;
    let var_scaled = tape.scale(var_diff, inv_d)?;
    let var_term = tape.mul(var_scaled, var_scaled)?;

    tape.add(mean_term, var_term)
}

/// Depth-weighted sum over all blocks. Returns the total plus each layer's
/// unweighted loss node for logging.
pub fn total_con_loss_on_tape<F: Real>(
    tape: &mut Tape<F>,
    stats: &[DfeBatchStats],
    globals: &[(Vec<F>, Vec<F>)],
    momentum: F,
    beta: f64,
) -> Result<(ValueId, Vec<ValueId>)> {
    if stats.is_empty() {
        return Err(FdseError::Config("consistency loss needs at least one layer".into()));
    }
    if stats.len() != globals.len() {
        return Err(FdseError::Config(format!(
            "{} layer snapshots but {} global stat pairs",
            stats.len(),
            globals.len()
        )));
    }
    let weights = depth_weights(stats.len(), beta);
    let mut per_layer = Vec::with_capacity(stats.len());
    let mut total: Option<ValueId> = None;
    for (s, ((gm, gv), &w)) in stats.iter().zip(globals.iter().zip(&weights)) {
        let l = layer_con_loss_on_tape(tape, s, gm, gv, momentum)?;
        per_layer.push(l);
        let weighted = tape.scale(l, F::from_f64(w))?;
        total = Some(match total {
            None => weighted,
            Some(t) => tape.add(t, weighted)?,
        });
    }
    Ok((total.unwrap(), per_layer))
}
