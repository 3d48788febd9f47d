use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Row/column strides of a stored `rows x cols` row-major matrix, optionally
/// read transposed.
#[derive(Clone, Copy)]
struct View {
    rs: isize,
    cs: isize,
}

impl View {
    fn plain(cols: usize) -> View {
        View { rs: cols as isize, cs: 1 }
    }
    fn transposed(cols: usize) -> View {
        View { rs: 1, cs: cols as isize }
    }
}

/// `c (m x n) = a (m x k) * b (k x n) + beta * c`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], av: View, b: &[f64], bv: View, c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the slices cover every element addressed by the given extents and strides;
    // callers pass buffers of exactly m*k, k*n and m*n elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            av.rs,
            av.cs,
            b.as_ptr(),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Batched product over `g` independent matrices, `b` optionally transposed.
fn batched(a: &Tensor, b: &Tensor, op: &'static str, trans_b: bool) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 3 || sb.len() != 3 {
        return Err(TensorError::Rank {
            op,
            expected: 3,
            shape: if sa.len() != 3 { sa.to_vec() } else { sb.to_vec() },
        });
    }
    let (g, m, k) = (sa[0], sa[1], sa[2]);
    let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
    if sb[0] != g || kb != k {
        return Err(TensorError::Dimension {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    let bview = |cols: usize| if trans_b { View::transposed(cols) } else { View::plain(cols) };
    // stored column count of b
    let b_cols = sb[2];
    let mut out = vec![0.0; g * m * n];
    for i in 0..g {
        gemm(
            m,
            k,
            n,
            &a.data()[i * m * k..(i + 1) * m * k],
            View::plain(k),
            &b.data()[i * k * n..(i + 1) * k * n],
            bview(b_cols),
            &mut out[i * m * n..(i + 1) * m * n],
            0.0,
        );
    }
    Ok(Tensor::from_op(
        out,
        vec![g, m, n],
        vec![a.clone(), b.clone()],
        Box::new(move |gout, _out, parents| {
            let (ad, bd) = (parents[0].data(), parents[1].data());
            let ga = parents[0].requires_grad().then(|| {
                // dA = dC * B^T   (m x n)(n x k)
                let mut ga = vec![0.0; g * m * k];
                for i in 0..g {
                    let bslice = &bd[i * k * n..(i + 1) * k * n];
                    // B^T as an (n x k) view of the stored matrix
                    let v = if trans_b { View::plain(b_cols) } else { View::transposed(b_cols) };
                    gemm(
                        m,
                        n,
                        k,
                        &gout[i * m * n..(i + 1) * m * n],
                        View::plain(n),
                        bslice,
                        v,
                        &mut ga[i * m * k..(i + 1) * m * k],
                        0.0,
                    );
                }
                ga
            });
            let gb = parents[1].requires_grad().then(|| {
                // dB = A^T * dC  (k x n), stored transposed when trans_b
                let mut gb = vec![0.0; g * k * n];
                for i in 0..g {
                    let aslice = &ad[i * m * k..(i + 1) * m * k];
                    let gslice = &gout[i * m * n..(i + 1) * m * n];
                    let dst = &mut gb[i * k * n..(i + 1) * k * n];
                    if trans_b {
                        // stored b is (n x k): dB^T = dC^T * A
                        gemm(n, m, k, gslice, View::transposed(n), aslice, View::plain(k), dst, 0.0);
                    } else {
                        gemm(k, m, n, aslice, View::transposed(k), gslice, View::plain(n), dst, 0.0);
                    }
                }
                gb
            });
            vec![ga, gb]
        }),
    ))
}

impl Tensor {
    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, n) = (sa[0], sb[1]);
        let a3 = self.reshape(&[1, sa[0], sa[1]])?;
        let b3 = other.reshape(&[1, sb[0], sb[1]])?;
        batched(&a3, &b3, "matmul", false)?.reshape(&[m, n])
    }

    /// `[g, m, k] x [g, k, n] -> [g, m, n]`.
    pub fn bmm(&self, other: &Tensor) -> Result<Tensor> {
        batched(self, other, "bmm", false)
    }

    /// `[g, m, k] x [g, n, k]^T -> [g, m, n]`.
    pub fn bmm_nt(&self, other: &Tensor) -> Result<Tensor> {
        batched(self, other, "bmm_nt", true)
    }

    /// Affine map over the last axis: `x [.., in] * w [in, out] + b [out]`.
    pub fn linear(&self, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        let shape = self.shape();
        let Some(&last) = shape.last() else {
            return Err(TensorError::Rank {
                op: "linear",
                expected: 1,
                shape: shape.to_vec(),
            });
        };
        if w.rank() != 2 || w.shape()[0] != last {
            return Err(TensorError::Dimension {
                op: "linear",
                lhs: shape.to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let rows = self.numel() / last.max(1);
        let y = self.reshape(&[rows, last])?.matmul(w)?;
        let y = match b {
            Some(b) => y.add(b)?,
            None => y,
        };
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().unwrap() = w.shape()[1];
        y.reshape(&out_shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_times_column() {
        let i = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let v = Tensor::new(vec![3.0, 4.0], &[2, 1]).unwrap();
        let y = i.matmul(&v).unwrap();
        assert_eq!(y.shape(), &[2, 1]);
        assert_eq!(y.data(), &[3.0, 4.0]);
    }

    #[test]
    fn shape_algebra() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 4]);
        assert_eq!(a.matmul(&b).unwrap().shape(), &[2, 4]);
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 4]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 4]"), "{msg}");
    }

    #[test]
    fn bmm_nt_matches_explicit_transpose() {
        let a = Tensor::new((0..12).map(|v| v as f64).collect(), &[2, 2, 3]).unwrap();
        let b = Tensor::new((0..18).map(|v| (v as f64) * 0.5 - 2.0).collect(), &[2, 3, 3]).unwrap();
        let direct = a.bmm_nt(&b).unwrap();
        let via = a.bmm(&b.permute(&[0, 2, 1]).unwrap()).unwrap();
        assert_eq!(direct.data(), via.data());
    }
}
