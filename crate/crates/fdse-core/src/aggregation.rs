//! Server-side combination rules.
//!
//! Shared parameters: per-tensor min-norm consensus. Client updates are
//! normalized to unit directions, a Frank-Wolfe solver finds the convex
//! combination with minimal L2 norm, and the result is rescaled by the mean
//! update norm. The optimum guarantees a non-negative dot product with every
//! client's update.
//!
//! Personalized parameters: similarity-aware attention over the clients'
//! flattened tensors with temperature tau.
//!
//! All internal arithmetic runs in f64 regardless of the model dtype.

use crate::error::{FdseError, Result};
use crate::tensor::{Real, Tensor};
use serde::Serialize;

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub gap_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { max_iters: 500, gap_tol: 1e-7 }
    }
}

#[derive(Debug, Clone)]
pub struct SimplexWeights {
    pub u: Vec<f64>,
    pub iterations: usize,
    pub gap: f64,
    pub converged: bool,
    /// ||sum_k u_k d_k||^2 at the solution.
    pub objective: f64,
}

/// Minimize ||sum_k u_k d_k||^2 over the probability simplex by pairwise
/// Frank-Wolfe from the uniform start. Ties pick the lowest index.
pub fn min_norm_weights(directions: &[Vec<f64>], cfg: &SolverConfig) -> Result<SimplexWeights> {
    let n = directions.len();
    if n == 0 {
        return Err(FdseError::NoClients);
    }
    let dim = directions[0].len();
    for (k, d) in directions.iter().enumerate() {
        if d.len() != dim {
            return Err(FdseError::Dimension(format!(
                "direction {} has length {}, expected {}",
                k,
                d.len(),
                dim
            )));
        }
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-4 {
            return Err(FdseError::Dimension(format!(
                "direction {} has norm {}, expected unit",
                k, norm
            )));
        }
    }
    if n == 1 {
        return Ok(SimplexWeights { u: vec![1.0], iterations: 0, gap: 0.0, converged: true, objective: 1.0 });
    }

    // Gram matrix d_i . d_j.
    let mut m = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i..n {
            let dot: f64 = directions[i].iter().zip(&directions[j]).map(|(a, b)| a * b).sum();
            m[i * n + j] = dot;
            m[j * n + i] = dot;
        }
    }

    let mut u = vec![1.0 / n as f64; n];
    // g = M u, half the gradient of u^T M u.
    let mut g = vec![0.0f64; n];
    for i in 0..n {
        g[i] = (0..n).map(|j| m[i * n + j] * u[j]).sum();
    }

    let mut gap;
    let mut iterations = 0;
    for it in 0..cfg.max_iters {
        iterations = it;
        let obj: f64 = u.iter().zip(&g).map(|(a, b)| a * b).sum();
        // Toward vertex: smallest gradient entry.
        let mut s = 0;
        for k in 1..n {
            if g[k] < g[s] {
                s = k;
            }
        }
        gap = 2.0 * (obj - g[s]);
        if gap <= cfg.gap_tol {
            return Ok(finish(u, iterations, gap, true, &m));
        }
        // Away vertex: largest gradient entry with mass.
        let mut a = usize::MAX;
        for k in 0..n {
            if u[k] > 0.0 && (a == usize::MAX || g[k] > g[a]) {
                a = k;
            }
        }
        let denom = m[s * n + s] - 2.0 * m[s * n + a] + m[a * n + a];
        let step_max = u[a];
        let step = if denom > 1e-18 {
            ((g[a] - g[s]) / denom).clamp(0.0, step_max)
        } else if g[a] > g[s] {
            step_max
        } else {
            0.0
        };
        if step == 0.0 {
            // No progress possible along the pairwise direction.
            return Ok(finish(u, iterations, gap, gap <= cfg.gap_tol, &m));
        }
        u[s] += step;
        u[a] -= step;
        if u[a] < 1e-15 {
            u[a] = 0.0;
        }
        for k in 0..n {
            g[k] += step * (m[k * n + s] - m[k * n + a]);
        }
    }
    // Iteration cap reached: report the gap of the returned iterate, not of
    // the one before the last step.
    let obj: f64 = u.iter().zip(&g).map(|(a, b)| a * b).sum();
    let g_min = g.iter().cloned().fold(f64::INFINITY, f64::min);
    gap = 2.0 * (obj - g_min);
    Ok(finish(u, iterations, gap, gap <= cfg.gap_tol, &m))
}

fn finish(mut u: Vec<f64>, iterations: usize, gap: f64, converged: bool, m: &[f64]) -> SimplexWeights {
    let n = u.len();
    for v in &mut u {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let s: f64 = u.iter().sum();
    if s > 0.0 {
        for v in &mut u {
            *v /= s;
        }
    }
    let mut objective = 0.0;
    for i in 0..n {
        for j in 0..n {
            objective += u[i] * u[j] * m[i * n + j];
        }
    }
    SimplexWeights { u, iterations, gap, converged, objective }
}

/// Closed-form two-direction solution, used as a test oracle:
/// u1 = ((d2-d1).d2) / ||d1-d2||^2 clamped to [0,1].
pub fn two_vector_weights(d1: &[f64], d2: &[f64]) -> (f64, f64) {
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in d1.iter().zip(d2) {
        num += (b - a) * b;
        den += (a - b) * (a - b);
    }
    if den <= 0.0 {
        return (0.5, 0.5);
    }
    let u1 = (num / den).clamp(0.0, 1.0);
    (u1, 1.0 - u1)
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerReportRow {
    pub layer: String,
    /// Simplex weights over all clients (zero for excluded ones).
    pub weights: Vec<f64>,
    /// ||sum u_k d_k||^2 at the solution.
    pub min_norm_value: f64,
    /// Normalized dot products between the aggregated update and each
    /// client's update. Excluded entries, and every entry when the consensus
    /// update itself cancels to numerical zero, are reported as 0.
    pub normalized_dots: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// All client updates were below the exclusion threshold.
    pub all_zero: bool,
    /// Clients excluded for a near-zero update norm.
    pub excluded: Vec<usize>,
}

pub const UPDATE_NORM_FLOOR: f64 = 1e-12;

/// Consensus-aggregate one named tensor's updates across clients:
/// mean-of-norms times the min-norm convex combination of unit directions.
/// Clients with a near-zero update are excluded from directions and the mean
/// norm. Bitwise-identical updates short-circuit to that exact update.
pub fn aggregate_shared_layer<F: Real>(
    name: &str,
    updates: &[Tensor<F>],
    cfg: &SolverConfig,
) -> Result<(Tensor<F>, LayerReportRow)> {
    let n = updates.len();
    if n == 0 {
        return Err(FdseError::NoClients);
    }
    let shape = updates[0].shape().to_vec();
    for (k, t) in updates.iter().enumerate() {
        if t.shape() != shape {
            return Err(FdseError::Alignment(format!(
                "layer '{}': client {} update shape {:?} `!=` {:?}",
                name,
                k,
                t.shape(),
                shape
            )));
        }
    }
    let flat: Vec<Vec<f64>> = updates.iter().map(|t| t.data().iter().map(|v| v.into_f64()).collect()).collect();
    let norms: Vec<f64> = flat.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let included: Vec<usize> = (0..n).filter(|&k| norms[k] >= UPDATE_NORM_FLOOR).collect();
    let excluded: Vec<usize> = (0..n).filter(|&k| norms[k] < UPDATE_NORM_FLOOR).collect();

    if included.is_empty() {
        let row = LayerReportRow {
            layer: name.to_string(),
            weights: vec![0.0; n],
            min_norm_value: 0.0,
            normalized_dots: vec![0.0; n],
            iterations: 0,
            converged: true,
            all_zero: true,
            excluded,
        };
        return Ok((Tensor::zeros(shape), row));
    }

    let first = included[0];
    let identical = included.iter().all(|&k| updates[k].data() == updates[first].data());
    let (delta_f64, weights, solved) = if identical {
        let mut w = vec![0.0; n];
        for &k in &included {
            w[k] = 1.0 / included.len() as f64;
        }
        (flat[first].clone(), w, SimplexWeights { u: vec![], iterations: 0, gap: 0.0, converged: true, objective: 1.0 })
    } else {
        let directions: Vec<Vec<f64>> =
            included.iter().map(|&k| flat[k].iter().map(|v| v / norms[k]).collect()).collect();
        let solved = min_norm_weights(&directions, cfg)?;
        let dbar: f64 = included.iter().map(|&k| norms[k]).sum::<f64>() / included.len() as f64;
        let dim = flat[first].len();
        let mut combo = vec![0.0f64; dim];
        for (i, d) in directions.iter().enumerate() {
            let w = solved.u[i];
            for (c, &v) in combo.iter_mut().zip(d) {
                *c += w * v;
            }
        }
        for c in &mut combo {
            *c *= dbar;
        }
        let mut w = vec![0.0; n];
        for (i, &k) in included.iter().enumerate() {
            w[k] = solved.u[i];
        }
        (combo, w, solved)
    };

    let delta_norm = delta_f64.iter().map(|v| v * v).sum::<f64>().sqrt();
    // A consensus update a factor 1e6 below the mean client norm has fully
    // cancelled; its direction is solver noise, so the dots stay 0 like the
    // excluded entries.
    let dbar_all: f64 = included.iter().map(|&k| norms[k]).sum::<f64>() / included.len() as f64;
    let degenerate = delta_norm <= (1e-6 * dbar_all).max(UPDATE_NORM_FLOOR);
    let mut dots = vec![0.0; n];
    for &k in &included {
        if !degenerate {
            let dot: f64 = delta_f64.iter().zip(&flat[k]).map(|(a, b)| a * b).sum();
            dots[k] = dot / (delta_norm * norms[k]);
        }
    }
    let data: Vec<F> = delta_f64.iter().map(|&v| F::from_f64(v)).collect();
    let row = LayerReportRow {
        layer: name.to_string(),
        weights,
        min_norm_value: solved.objective,
        normalized_dots: dots,
        iterations: solved.iterations,
        converged: solved.converged,
        all_zero: false,
        excluded,
    };
    Ok((Tensor::new(shape, data)?, row))
}

#[derive(Debug, Clone, Serialize)]
pub struct AttentionReportRow {
    pub layer: String,
    pub tau: f64,
    /// Row-stochastic attention matrix.
    pub matrix: Vec<Vec<f64>>,
    /// Clients whose parameter vector was zero (similarity row replaced by
    /// a pure self-match).
    pub zero_rows: Vec<usize>,
}

/// Similarity-aware aggregation of personalized tensors. Q = K = row-unit-
/// normalized inputs, A = softmax(QK^T / tau) row-wise, output rows are
/// A V computed as V_i + sum_j A_ij (V_j - V_i) so identical inputs pass
/// through bit-exactly.
pub fn attention_aggregate<F: Real>(
    name: &str,
    params: &[Tensor<F>],
    tau: f64,
) -> Result<(Vec<Tensor<F>>, AttentionReportRow)> {
    let n = params.len();
    if n == 0 {
        return Err(FdseError::NoClients);
    }
    if tau <= 0.0 {
        return Err(FdseError::Config(format!("attention temperature {} must be > 0", tau)));
    }
    let shape = params[0].shape().to_vec();
    for (k, t) in params.iter().enumerate() {
        if t.shape() != shape {
            return Err(FdseError::Alignment(format!(
                "layer '{}': client {} params shape {:?} != {:?}",
                name,
                k,
                t.shape(),
                shape
            )));
        }
    }
    let v: Vec<Vec<f64>> = params.iter().map(|t| t.data().iter().map(|x| x.into_f64()).collect()).collect();
    let norms: Vec<f64> = v.iter().map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let zero_rows: Vec<usize> = (0..n).filter(|&k| norms[k] == 0.0).collect();
    let q: Vec<Vec<f64>> = (0..n)
        .map(|k| {
            if norms[k] == 0.0 {
                vec![0.0; v[k].len()]
            } else {
                v[k].iter().map(|x| x / norms[k]).collect()
            }
        })
        .collect();

    let mut matrix = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        let mut logits = vec![0.0f64; n];
        for (j, lj) in logits.iter_mut().enumerate() {
            let sim: f64 = if norms[i] == 0.0 {
                // Zero vector: no similarity signal; keep a unit
                // self-similarity so the row stays anchored on itself.
                if i == j {
                    1.0
                } else {
                    0.0
                }
            } else {
                q[i].iter().zip(&q[j]).map(|(a, b)| a * b).sum()
            };
            *lj = sim / tau;
        }
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (j, e) in exps.into_iter().enumerate() {
            matrix[i][j] = e / z;
        }
    }

    let mut outputs = Vec::with_capacity(n);
    for i in 0..n {
        let mut out = v[i].clone();
        for j in 0..n {
            if j == i {
                continue;
            }
            let a = matrix[i][j];
            for (o, (vj, vi)) in out.iter_mut().zip(v[j].iter().zip(&v[i])) {
                *o += a * (vj - vi);
            }
        }
        outputs.push(Tensor::new(shape.clone(), out.iter().map(|&x| F::from_f64(x)).collect())?);
    }
    let report = AttentionReportRow { layer: name.to_string(), tau, matrix, zero_rows };
    Ok((outputs, report))
}

/// Unweighted mean, computed as x_0 + sum_j w_j (x_j - x_0) in f64 so that
/// identical inputs average to themselves exactly.
pub fn mean_tensors<F: Real>(tensors: &[&Tensor<F>]) -> Result<Tensor<F>> {
    let w = vec![1.0 / tensors.len().max(1) as f64; tensors.len()];
    weighted_mean_tensors(tensors, &w)
}

/// Weighted mean with the same centering trick; weights must sum to 1.
pub fn weighted_mean_tensors<F: Real>(tensors: &[&Tensor<F>], weights: &[f64]) -> Result<Tensor<F>> {
    if tensors.is_empty() {
        return Err(FdseError::NoClients);
    }
    if tensors.len() != weights.len() {
        return Err(FdseError::Dimension(format!(
            "{} tensors but {} weights",
            tensors.len(),
            weights.len()
        )));
    }
    let shape = tensors[0].shape().to_vec();
    for t in tensors.iter() {
        if t.shape() != shape {
            return Err(FdseError::Alignment(format!(
                "mean over mismatched shapes {:?} and {:?}",
                t.shape(),
                shape
            )));
        }
    }
    let base: Vec<f64> = tensors[0].data().iter().map(|v| v.into_f64()).collect();
    let mut acc = base.clone();
    for (t, &w) in tensors.iter().zip(weights).skip(1) {
        for (a, (&x, &b)) in acc.iter_mut().zip(t.data().iter().zip(&base)) {
            *a += w * (x.into_f64() - b);
        }
    }
    // x_0 + sum_{j>=1} w_j (x_j - x_0) equals sum_j w_j x_j only when the
    // weights sum to one, so enforce that.
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(FdseError::Config(format!("weights sum to {}, expected 1", total)));
    }
    Ok(Tensor::new(shape, acc.iter().map(|&v| F::from_f64(v)).collect())?)
}

#[derive(Debug, Clone, Serialize)]
pub struct AggregationReport {
    pub round: usize,
    pub shared: Vec<LayerReportRow>,
    pub personalized: Vec<AttentionReportRow>,
}
