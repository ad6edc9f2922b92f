//! Reverse-mode automatic differentiation over dense `[N, C, D, H, W]` tensors.
//!
//! A [`Tape`] records each primitive as it runs. [`Tape::backward`] then walks
//! the record in reverse and accumulates gradients into every value that
//! requires them; gradients from fan-out are summed.
//!
//! ```
//! use colearn_autograd::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::new([2], vec![-1.0, 2.0]).unwrap());
//! let y = tape.relu(x).unwrap();
//! let loss = tape.sum(y).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().unwrap().data(), &[0.0, 1.0]);
//! ```

mod element;
mod error;
pub mod gradcheck;
pub mod kernels;
pub mod reference;
mod tape;
mod tensor;

pub use element::Element;
pub use error::{AutogradError, Result};
pub use kernels::{ConvGeometry, PoolSpec};
pub use tape::{BatchNormConfig, Tape, Var};
pub use tensor::Tensor;
