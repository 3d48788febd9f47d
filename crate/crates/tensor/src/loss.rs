//! Probability-space losses: negative log-likelihood and KL divergence.
//!
//! Both operate on distributions laid out as `[.., V]` (rows over the last
//! axis) and reduce with per-row weights, so callers can express plain means,
//! per-sequence means, and padding masks with one primitive.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Lower clamp applied to probabilities inside every logarithm.
pub const LOG_EPS: f64 = 1e-12;

fn rows_of(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    let v = *t.shape().last().ok_or(TensorError::Rank {
        op,
        expected: 1,
        shape: Vec::new(),
    })?;
    Ok((t.numel() / v.max(1), v))
}

impl Tensor {
    /// Mean over rows of `-ln p[target]`.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Tensor> {
        let (rows, _) = rows_of("cross_entropy", self)?;
        let w = vec![1.0 / rows.max(1) as f64; rows];
        self.weighted_nll(targets, &w)
    }

    /// `sum_r w_r * -ln max(p[r, target_r], eps)`. Rows with zero weight are
    /// skipped entirely, which is how padding is excluded.
    pub fn weighted_nll(&self, targets: &[usize], weights: &[f64]) -> Result<Tensor> {
        let (rows, v) = rows_of("cross_entropy", self)?;
        if targets.len() != rows || weights.len() != rows {
            return Err(TensorError::Dimension {
                op: "cross_entropy",
                lhs: self.shape().to_vec(),
                rhs: vec![targets.len(), weights.len()],
            });
        }
        for (&t, &w) in targets.iter().zip(weights) {
            if w != 0.0 && t >= v {
                return Err(TensorError::Vocab { id: t, vocab: v });
            }
        }
        let p = self.data();
        let mut loss = 0.0;
        for r in 0..rows {
            if weights[r] != 0.0 {
                loss -= weights[r] * p[r * v + targets[r]].max(LOG_EPS).ln();
            }
        }
        let targets: Arc<Vec<usize>> = Arc::new(targets.to_vec());
        let weights: Arc<Vec<f64>> = Arc::new(weights.to_vec());
        Ok(Tensor::from_op(
            vec![loss],
            Vec::new(),
            vec![self.clone()],
            Box::new(move |g, _, parents| {
                let p = parents[0].data();
                let mut gp = vec![0.0; p.len()];
                for r in 0..rows {
                    if weights[r] == 0.0 {
                        continue;
                    }
                    let i = r * v + targets[r];
                    if p[i] > LOG_EPS {
                        gp[i] = -g[0] * weights[r] / p[i];
                    }
                }
                vec![Some(gp)]
            }),
        ))
    }

    /// `KL(self || q)` summed over the last axis, averaged over rows.
    pub fn kl_div(&self, q: &Tensor) -> Result<Tensor> {
        let (rows, _) = rows_of("kl_div", self)?;
        let w = vec![1.0 / rows.max(1) as f64; rows];
        self.weighted_kl_div(q, &w)
    }

    /// `sum_r w_r * sum_c p log(p / max(q, eps))`, with `0 log 0 = 0`.
    pub fn weighted_kl_div(&self, q: &Tensor, weights: &[f64]) -> Result<Tensor> {
        if self.shape() != q.shape() {
            return Err(TensorError::Dimension {
                op: "kl_div",
                lhs: self.shape().to_vec(),
                rhs: q.shape().to_vec(),
            });
        }
        let (rows, v) = rows_of("kl_div", self)?;
        if weights.len() != rows {
            return Err(TensorError::Dimension {
                op: "kl_div",
                lhs: self.shape().to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let (p, qd) = (self.data(), q.data());
        let mut loss = 0.0;
        for r in 0..rows {
            if weights[r] == 0.0 {
                continue;
            }
            let mut s = 0.0;
            for c in r * v..(r + 1) * v {
                if p[c] > 0.0 {
                    s += p[c] * (p[c].max(LOG_EPS).ln() - qd[c].max(LOG_EPS).ln());
                }
            }
            loss += weights[r] * s;
        }
        let weights: Arc<Vec<f64>> = Arc::new(weights.to_vec());
        Ok(Tensor::from_op(
            vec![loss],
            Vec::new(),
            vec![self.clone(), q.clone()],
            Box::new(move |g, _, parents| {
                let (p, qd) = (parents[0].data(), parents[1].data());
                let gp = parents[0].requires_grad().then(|| {
                    let mut gp = vec![0.0; p.len()];
                    for r in 0..rows {
                        let w = weights[r];
                        if w == 0.0 {
                            continue;
                        }
                        for c in r * v..(r + 1) * v {
                            let lp = if p[c] > LOG_EPS { p[c].ln() + 1.0 } else { p[c].max(LOG_EPS).ln() };
                            gp[c] = g[0] * w * (lp - qd[c].max(LOG_EPS).ln());
                        }
                    }
                    gp
                });
                let gq = parents[1].requires_grad().then(|| {
                    let mut gq = vec![0.0; qd.len()];
                    for r in 0..rows {
                        let w = weights[r];
                        if w == 0.0 {
                            continue;
                        }
                        for c in r * v..(r + 1) * v {
                            if qd[c] > LOG_EPS {
                                gq[c] = -g[0] * w * p[c] / qd[c];
                            }
                        }
                    }
                    gq
                });
                vec![gp, gq]
            }),
        ))
    }
}
