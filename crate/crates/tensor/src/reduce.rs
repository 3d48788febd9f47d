use crate::error::{Result, TensorError};
use crate::shape::split_at_axis;
use crate::tensor::Tensor;

impl Tensor {
    pub fn sum_all(&self) -> Tensor {
        let n = self.numel();
        Tensor::from_op(
            vec![self.data().iter().sum()],
            Vec::new(),
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Normalized exponentials along `axis` (max-shifted).
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(TensorError::Axis {
                op: "softmax",
                axis,
                rank: self.rank(),
            });
        }
        let (outer, extent, inner) = split_at_axis(self.shape(), axis);
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * extent + k) * inner + i;
                let max = (0..extent).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..extent {
                    let e = (x[at(k)] - max).exp();
                    y[at(k)] = e;
                    z += e;
                }
                for k in 0..extent {
                    y[at(k)] /= z;
                }
            }
        }
        Ok(Tensor::from_op(
            y,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * extent + k) * inner + i;
                        let dot: f64 = (0..extent).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..extent {
                            gx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` (both `[d]`).
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.shape().last().ok_or(TensorError::Rank {
            op: "layer_norm",
            expected: 1,
            shape: Vec::new(),
        })?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(TensorError::Dimension {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let rows = self.numel() / d.max(1);
        let x = self.data();
        let (gm, bt) = (gamma.data(), beta.data());
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut y = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                y[r * d + j] = h * gm[j] + bt[j];
            }
        }
        Ok(Tensor::from_op(
            y,
            self.shape().to_vec(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, _, parents| {
                let gm = parents[1].data();
                let gx = parents[0].requires_grad().then(|| {
                    let mut gx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let (gr, hr) = (&g[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                        let dh: Vec<f64> = (0..d).map(|j| gr[j] * gm[j]).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] = inv_std[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    gx
                });
                let ggamma = parents[1].requires_grad().then(|| {
                    let mut acc = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            acc[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    acc
                });
                let gbeta = parents[2].requires_grad().then(|| {
                    let mut acc = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            acc[j] += g[r * d + j];
                        }
                    }
                    acc
                });
                vec![gx, ggamma, gbeta]
            }),
        ))
    }
}
