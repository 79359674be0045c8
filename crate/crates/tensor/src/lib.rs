//! Reverse-mode automatic differentiation over dense, row-major CPU tensors.
//!
//! Values live in a [`Tensor`]; differentiable computation is recorded on a
//! [`Tape`] through [`Var`] handles. A tape is single-threaded. Independent
//! tapes can be driven from independent threads.
//!
//! ```
//! use stylefield_tensor::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]), true);
//! let loss = x.square().sum();
//! tape.backward(loss).unwrap();
//! assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod element;
pub mod fpenv;
mod error;
pub mod gradcheck;
mod ops;
pub mod optim;
mod tape;
mod tensor;

pub use element::Element;
pub use error::{Result, TensorError};
pub use optim::{Adam, AdamState};
pub use tape::{Function, Tape, Var};
pub use tensor::Tensor;
