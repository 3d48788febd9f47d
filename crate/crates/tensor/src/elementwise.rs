//! Broadcasting binary arithmetic and pointwise activations.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::Dimension {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// For every output element, the offset of the contributing input element.
fn broadcast_index(input: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let pad = rank - input.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..input.len()).rev() {
        strides[i + pad] = if input[i] == 1 { 0 } else { s };
        s *= input[i];
    }
    let n = numel(out);
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        idx.push(offset);
        for d in (0..rank).rev() {
            counter[d] += 1;
            offset += strides[d];
            if counter[d] < out[d] {
                break;
            }
            offset -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

enum Layout {
    Same,
    Indexed(Arc<Vec<usize>>),
}

impl Layout {
    fn of(input: &[usize], out: &[usize]) -> Layout {
        if input == out {
            Layout::Same
        } else {
            Layout::Indexed(Arc::new(broadcast_index(input, out)))
        }
    }

    fn at(&self, i: usize) -> usize {
        match self {
            Layout::Same => i,
            Layout::Indexed(idx) => idx[i],
        }
    }

    /// Sums an output-shaped gradient back onto the input shape.
    fn reduce(&self, g: &[f64], input_len: usize) -> Vec<f64> {
        match self {
            Layout::Same => g.to_vec(),
            Layout::Indexed(idx) => {
                let mut out = vec![0.0; input_len];
                for (gi, &j) in g.iter().zip(idx.iter()) {
                    out[j] += gi;
                }
                out
            }
        }
    }
}

fn binary(op: BinOp, name: &'static str, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let out_shape = broadcast_shape(name, a.shape(), b.shape())?;
    let la = Layout::of(a.shape(), &out_shape);
    let lb = Layout::of(b.shape(), &out_shape);
    let n = numel(&out_shape);
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<f64> = match (&la, &lb, op) {
        (Layout::Same, Layout::Same, BinOp::Add) => ad.iter().zip(bd).map(|(x, y)| x + y).collect(),
        (Layout::Same, Layout::Same, BinOp::Mul) => ad.iter().zip(bd).map(|(x, y)| x * y).collect(),
        _ => (0..n)
            .map(|i| {
                let (x, y) = (ad[la.at(i)], bd[lb.at(i)]);
                match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                }
            })
            .collect(),
    };
    let (na, nb) = (a.numel(), b.numel());
    Ok(Tensor::from_op(
        data,
        out_shape,
        vec![a.clone(), b.clone()],
        Box::new(move |g, _out, parents| {
            let ga = parents[0].requires_grad().then(|| match op {
                BinOp::Add | BinOp::Sub => la.reduce(g, na),
                BinOp::Mul => {
                    let bd = parents[1].data();
                    let prod: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * bd[lb.at(i)]).collect();
                    la.reduce(&prod, na)
                }
            });
            let gb = parents[1].requires_grad().then(|| match op {
                BinOp::Add => lb.reduce(g, nb),
                BinOp::Sub => {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    lb.reduce(&neg, nb)
                }
                BinOp::Mul => {
                    let ad = parents[0].data();
                    let prod: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * ad[la.at(i)]).collect();
                    lb.reduce(&prod, nb)
                }
            });
            vec![ga, gb]
        }),
    ))
}

/// Pointwise op given the forward map and the derivative expressed in terms of
/// (input, output).
fn unary(
    x: &Tensor,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_op(
        data,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |g, out, parents| {
            let xd = parents[0].data();
            let gx = g
                .iter()
                .zip(xd.iter().zip(out))
                .map(|(gi, (&xi, &yi))| gi * df(xi, yi))
                .collect();
            vec![Some(gx)]
        }),
    )
}

pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary(BinOp::Add, "add", self, other)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary(BinOp::Sub, "sub", self, other)
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary(BinOp::Mul, "mul", self, other)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        unary(self, |v| v * k, move |_, _| k)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, k: f64) -> Tensor {
        unary(self, |v| v + k, |_, _| 1.0)
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(self, sigmoid_scalar, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Tensor {
        unary(self, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn relu(&self) -> Tensor {
        unary(self, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn exp(&self) -> Tensor {
        unary(self, f64::exp, |_, y| y)
    }

    /// Natural log of `max(x, eps)`; the gradient is zero where the clamp is active.
    pub fn ln_clamped(&self, eps: f64) -> Tensor {
        unary(
            self,
            move |v| v.max(eps).ln(),
            move |x, _| if x > eps { 1.0 / x } else { 0.0 },
        )
    }

    pub fn square(&self) -> Tensor {
        unary(self, |v| v * v, |x, _| 2.0 * x)
    }
}
