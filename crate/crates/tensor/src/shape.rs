//! Shape manipulation: reshape, permute, concat, narrow, gather.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::tensor::{numel, Tensor};

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(TensorError::Axis { op, axis, rank });
    }
    Ok(())
}

/// (outer, extent, inner) decomposition of a shape around `axis`.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Source offset for every destination element when permuting `shape` by `axes`.
fn permute_index(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let perm_strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let n = numel(shape);
    let rank = shape.len();
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        idx.push(offset);
        for d in (0..rank).rev() {
            counter[d] += 1;
            offset += perm_strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            offset -= perm_strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(TensorError::Dimension {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            self.data().to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        ))
    }

    /// General axis permutation; `axes[i]` names the source axis of output axis `i`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank {
            return Err(TensorError::Rank {
                op: "permute",
                expected: axes.len(),
                shape: self.shape().to_vec(),
            });
        }
        for &a in axes {
            check_axis("permute", a, rank)?;
            if std::mem::replace(&mut seen[a], true) {
                return Err(TensorError::Invalid(format!("permute: repeated axis {a}")));
            }
        }
        let idx = Arc::new(permute_index(self.shape(), axes));
        let src = self.data();
        let data: Vec<f64> = idx.iter().map(|&i| src[i]).collect();
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let n = self.numel();
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; n];
                for (gi, &j) in g.iter().zip(idx.iter()) {
                    gx[j] = *gi;
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(TensorError::Rank {
                op: "transpose",
                expected: 2,
                shape: self.shape().to_vec(),
            });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    /// Contiguous sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        check_axis("narrow", axis, self.rank())?;
        let (outer, extent, inner) = split_at_axis(self.shape(), axis);
        if start + len > extent {
            return Err(TensorError::Index {
                op: "narrow",
                index: start + len,
                extent,
            });
        }
        let src = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let n = self.numel();
        Ok(Tensor::from_op(
            data,
            shape,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; n];
                for o in 0..outer {
                    let base = o * extent * inner + start * inner;
                    gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Selects (with repetition allowed) slices along `axis`.
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Tensor> {
        check_axis("index_select", axis, self.rank())?;
        let (outer, extent, inner) = split_at_axis(self.shape(), axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= extent) {
            return Err(TensorError::Index {
                op: "index_select",
                index: bad,
                extent,
            });
        }
        let src = self.data();
        let k = indices.len();
        let mut data = Vec::with_capacity(outer * k * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * extent + i) * inner;
                data.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = k;
        let indices: Arc<Vec<usize>> = Arc::new(indices.to_vec());
        let n = self.numel();
        Ok(Tensor::from_op(
            data,
            shape,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; n];
                for o in 0..outer {
                    for (j, &i) in indices.iter().enumerate() {
                        let dst = (o * extent + i) * inner;
                        let src = (o * k + j) * inner;
                        for c in 0..inner {
                            gx[dst + c] += g[src + c];
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Rows of a `[vocab, dim]` table for each id.
    pub fn embedding(&self, ids: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(TensorError::Rank {
                op: "embedding",
                expected: 2,
                shape: self.shape().to_vec(),
            });
        }
        let vocab = self.shape()[0];
        if let Some(&id) = ids.iter().find(|&&i| i >= vocab) {
            return Err(TensorError::Vocab { id, vocab });
        }
        self.index_select(0, ids)
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of empty list".into()))?;
        let rank = first.rank();
        check_axis("concat", axis, rank)?;
        for p in parts {
            let ok = p.rank() == rank
                && p.shape().iter().zip(first.shape()).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(TensorError::Dimension {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let (outer, _, inner) = split_at_axis(first.shape(), axis);
        let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &e) in parts.iter().zip(&extents) {
                data.extend_from_slice(&p.data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op(
            data,
            shape,
            parts.to_vec(),
            Box::new(move |g, _, parents| {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(parents.len());
                for (p, &e) in parents.iter().zip(&extents) {
                    if !p.requires_grad() {
                        grads.push(None);
                        offset += e;
                        continue;
                    }
                    let mut gp = Vec::with_capacity(outer * e * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gp.extend_from_slice(&g[base..base + e * inner]);
                    }
                    grads.push(Some(gp));
                    offset += e;
                }
                grads
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_round_trip() {
        let x = Tensor::new((0..24).map(|v| v as f64).collect(), &[2, 3, 4]).unwrap();
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        // y[i][j][k] = x[j][k][i]
        assert_eq!(y.data()[6 + 3 + 2], x.data()[12 + 2 * 4 + 1]);
        let back = y.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn concat_and_narrow_are_inverse() {
        let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::new(vec![5.0, 6.0], &[2, 1]).unwrap();
        let c = Tensor::concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        assert_eq!(c.narrow(1, 0, 2).unwrap().data(), a.data());
        assert_eq!(c.narrow(1, 2, 1).unwrap().data(), b.data());
    }

    #[test]
    fn axis_errors() {
        let a = Tensor::zeros(&[2, 2]);
        assert!(matches!(a.narrow(2, 0, 1), Err(TensorError::Axis { .. })));
        assert!(matches!(Tensor::concat(std::slice::from_ref(&a), 3), Err(TensorError::Axis { .. })));
        assert!(matches!(a.softmax(5), Err(TensorError::Axis { .. })));
    }

    #[test]
    fn embedding_rejects_out_of_vocab() {
        let table = Tensor::zeros(&[4, 3]);
        assert_eq!(
            table.embedding(&[1, 4]).unwrap_err(),
            TensorError::Vocab { id: 4, vocab: 4 }
        );
    }

    #[test]
    fn index_select_accumulates_repeats() {
        let t = Tensor::param(vec![1.0, 2.0, 3.0], &[3, 1]).unwrap();
        let y = t.index_select(0, &[2, 2, 0]).unwrap();
        assert_eq!(y.data(), &[3.0, 3.0, 1.0]);
        y.sum_all().backward().unwrap();
        assert_eq!(t.grad().unwrap(), vec![1.0, 0.0, 2.0]);
    }
}
