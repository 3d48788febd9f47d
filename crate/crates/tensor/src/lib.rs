//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! Every operation returns a new immutable [`Tensor`]. When any input
//! requires a gradient (and recording is enabled, see [`no_grad`]) the result
//! keeps links to its inputs together with a closure mapping the output
//! gradient back onto them. [`Tensor::backward`] walks that graph once in
//! reverse topological order and accumulates into the trainable leaves.
//!
//! ```
//! use vlamd_tensor::Tensor;
//!
//! let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
//! let y = x.mul(&x).unwrap().sum_all();
//! y.backward().unwrap();
//! assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
//! ```

mod conv;
mod elementwise;
mod error;
pub mod gradcheck;
mod linalg;
mod loss;
mod reduce;
mod shape;
mod tensor;

pub use error::{Result, TensorError};
pub use loss::LOG_EPS;
pub use tensor::{is_grad_enabled, no_grad, numel, Tensor};
