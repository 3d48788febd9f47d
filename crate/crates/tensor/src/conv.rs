use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }
    fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Unfolds one `[c_in, h, w]` image into `[c_in*k*k, h_out*w_out]`.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let n = self.col_cols();
        for c in 0..self.c_in {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    for oy in 0..self.h_out {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for ox in 0..self.w_out {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            let v = if iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w {
                                x[(c * self.h + iy as usize) * self.w + ix as usize]
                            } else {
                                0.0
                            };
                            cols[row * n + oy * self.w_out + ox] = v;
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], gx: &mut [f64]) {
        let n = self.col_cols();
        for c in 0..self.c_in {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    for oy in 0..self.h_out {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.w_out {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix as usize >= self.w {
                                continue;
                            }
                            gx[(c * self.h + iy as usize) * self.w + ix as usize] += cols[row * n + oy * self.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// 2-D convolution of `[B, C_in, H, W]` (or unbatched `[C_in, H, W]`) with a
    /// square kernel `[C_out, C_in, k, k]` and bias `[C_out]`.
    pub fn conv2d(&self, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let unbatched = self.rank() == 3;
        let x = if unbatched {
            let s = self.shape();
            self.reshape(&[1, s[0], s[1], s[2]])?
        } else {
            self.clone()
        };
        if x.rank() != 4 {
            return Err(TensorError::Rank {
                op: "conv2d",
                expected: 4,
                shape: self.shape().to_vec(),
            });
        }
        let (bsz, c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let ws = w.shape();
        if ws.len() != 4 || ws[1] != c_in || ws[2] != ws[3] || b.shape() != [ws[0]] {
            return Err(TensorError::Dimension {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (c_out, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k || h < stride || wd < stride {
            return Err(TensorError::InputTooSmall { op: "conv2d", h, w: wd });
        }
        let geo = Geometry {
            c_in,
            h,
            w: wd,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (wd + 2 * pad - k) / stride + 1,
        };
        let (rows, ncols) = (geo.col_rows(), geo.col_cols());

        // cols for all images: [B, rows, ncols], kept for the weight gradient
        let mut cols = vec![0.0; bsz * rows * ncols];
        for i in 0..bsz {
            geo.im2col(
                &x.data()[i * c_in * h * wd..(i + 1) * c_in * h * wd],
                &mut cols[i * rows * ncols..(i + 1) * rows * ncols],
            );
        }
        let cols_t = Tensor::new(cols, &[bsz, rows, ncols])?;
        let w2 = w.reshape(&[1, c_out, rows])?;
        // broadcast kernel across the batch by stacking
        let wb = if bsz == 1 {
            w2
        } else {
            w2.index_select(0, &vec![0; bsz])?
        };
        let y = wb.bmm(&cols_t)?; // [B, c_out, ncols]
        let y = y.add(&b.reshape(&[c_out, 1])?)?;
        let y = y.reshape(&[bsz, c_out, geo.h_out, geo.w_out])?;

        // input gradient: route through an explicit col2im node
        let y = if x.requires_grad() {
            col2im_link(&y, &x, &wb, geo)
        } else {
            y
        };
        if unbatched {
            y.reshape(&[c_out, geo.h_out, geo.w_out])
        } else {
            Ok(y)
        }
    }

    /// Kernel 3, stride 2, padding 1: output `ceil(H/2) x ceil(W/2)`.
    pub fn conv2d_stride2(&self, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let s = self.shape();
        if s.len() >= 2 {
            let (h, wd) = (s[s.len() - 2], s[s.len() - 1]);
            if h < 2 || wd < 2 {
                return Err(TensorError::InputTooSmall { op: "conv2d_stride2", h, w: wd });
            }
        }
        if w.rank() == 4 && (w.shape()[2] != 3 || w.shape()[3] != 3) {
            return Err(TensorError::Dimension {
                op: "conv2d_stride2",
                lhs: s.to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        self.conv2d(w, b, 2, 1)
    }
}

/// The product node above sees the unfolded columns as a constant, so the
/// image gradient is supplied by this identity-valued node: it passes `y`
/// through unchanged and maps `dy` back onto `x` via `W^T` and col2im.
fn col2im_link(y: &Tensor, x: &Tensor, wb: &Tensor, geo: Geometry) -> Tensor {
    let bsz = x.shape()[0];
    let c_out = wb.shape()[1];
    let (rows, ncols) = (geo.col_rows(), geo.col_cols());
    Tensor::from_op(
        y.data().to_vec(),
        y.shape().to_vec(),
        vec![y.clone(), x.clone(), wb.clone()],
        Box::new(move |g, _, parents| {
            let wd = parents[2].data();
            let img = geo.c_in * geo.h * geo.w;
            let mut gx = vec![0.0; bsz * img];
            let mut gcols = vec![0.0; rows * ncols];
            for i in 0..bsz {
                let wi = &wd[i * c_out * rows..(i + 1) * c_out * rows];
                let gi = &g[i * c_out * ncols..(i + 1) * c_out * ncols];
                // gcols = W^T (rows x c_out) * g (c_out x ncols)
                gcols.iter_mut().for_each(|v| *v = 0.0);
                for o in 0..c_out {
                    for r in 0..rows {
                        let wv = wi[o * rows + r];
                        if wv == 0.0 {
                            continue;
                        }
                        let dst = &mut gcols[r * ncols..(r + 1) * ncols];
                        let src = &gi[o * ncols..(o + 1) * ncols];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
                geo.col2im(&gcols, &mut gx[i * img..(i + 1) * img]);
            }
            vec![Some(g.to_vec()), Some(gx), None]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_kernel_center_sums_nine() {
        let x = Tensor::full(&[1, 4, 4], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = x.conv2d_stride2(&w, &b).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        // output (1,1) covers input rows/cols 1..=3, fully inside
        assert_eq!(y.data()[3], 9.0);
        // corner (0,0) covers rows/cols -1..=1: 4 valid cells
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn zero_input_broadcasts_bias() {
        let x = Tensor::zeros(&[2, 5, 6]);
        let w = Tensor::full(&[3, 2, 3, 3], 0.7);
        let b = Tensor::new(vec![1.0, -2.0, 0.5], &[3]).unwrap();
        let y = x.conv2d_stride2(&w, &b).unwrap();
        assert_eq!(y.shape(), &[3, 3, 3]);
        for (c, chunk) in y.data().chunks(9).enumerate() {
            assert!(chunk.iter().all(|&v| v == b.data()[c]));
        }
    }

    #[test]
    fn rejects_tiny_input() {
        let x = Tensor::zeros(&[1, 1, 5]);
        let w = Tensor::zeros(&[1, 1, 3, 3]);
        let b = Tensor::zeros(&[1]);
        assert!(matches!(x.conv2d_stride2(&w, &b), Err(TensorError::InputTooSmall { .. })));
    }

    #[test]
    fn two_blocks_quarter_resolution() {
        let x = Tensor::zeros(&[3, 32, 100]);
        let w1 = Tensor::zeros(&[8, 3, 3, 3]);
        let w2 = Tensor::zeros(&[16, 8, 3, 3]);
        let y = x
            .conv2d_stride2(&w1, &Tensor::zeros(&[8]))
            .unwrap()
            .conv2d_stride2(&w2, &Tensor::zeros(&[16]))
            .unwrap();
        assert_eq!(y.shape(), &[16, 8, 25]);
    }
}
