//! Minimal dense tensor library with reverse-mode automatic differentiation.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`). Models train and
//! run in `f32`; the `f64` instantiation backs gradient checks.
//!
//! ```
//! use ispeech_neural::{Tape64, Tensor64};
//!
//! let tape = Tape64::new();
//! let x = tape.param(Tensor64::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
//! let loss = x.mul(x).unwrap().sum();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
mod kernels;
mod optim;
mod param;
mod scalar;
mod tensor;

pub use checkpoint::{Checkpoint, ConfigDigest};
pub use error::{NeuralError, Result};
pub use graph::{shape_numel, Tape, Var};
pub use optim::{adam_update, Adam, AdamConfig};
pub use param::{ParamId, ParamStore, Parameter};
pub use scalar::{DType, MatRef, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
