//! Minimal dense-tensor backend with reverse-mode automatic differentiation.
//!
//! Values are row-major `f64` buffers. A [`Tape`] records every operation of a
//! forward pass as a node; [`Tape::backward`] replays the nodes in reverse and
//! accumulates gradients for everything that (transitively) requires them.
//!
//! ```
//! use mathmoe_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let a = tape.leaf(Tensor::from_rows(&[&[1.0, 2.0]]), true);
//! let b = tape.constant(Tensor::from_rows(&[&[3.0], &[4.0]]));
//! let c = tape.matmul(a, b).unwrap();
//! assert_eq!(tape.value(c).data(), &[11.0]);
//! tape.backward(c).unwrap();
//! assert_eq!(tape.grad(a).unwrap().data(), &[3.0, 4.0]);
//! ```

mod error;
mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use error::TensorError;
pub use gradcheck::{central_difference, grad_check, relative_error, GradCheckReport, FD_STEP};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, TensorError>;
