//! Tape-based reverse-mode differentiation over complex 2D tensors.
//!
//! Every value is a [`ComplexTensor`](crate::tensor::ComplexTensor);
//! real quantities (intensities, distances, translations) are tensors with
//! a zero imaginary plane. Gradients follow the convention
//!
//! ```text
//! grad f(x) = ∂f/∂a + j ∂f/∂b,    x = a + jb
//! ```
//!
//! which is twice the conjugate Wirtinger derivative and is the steepest
//! ascent direction of a real loss, so `x ← x − α·grad` is plain gradient
//! descent on the stacked real and imaginary parts.
//!
//! ```
//! use ptychograd::autodiff::Tape;
//! use ptychograd::tensor::ComplexTensor;
//! use rustfft::num_complex::Complex64;
//!
//! let tape = Tape::new();
//! let x = tape.variable(ComplexTensor::scalar(Complex64::new(3.0, 4.0)));
//! let loss = x.modulus_squared().sum();
//! loss.backward().unwrap();
//! assert_eq!(loss.value().item().re, 25.0);
//! assert_eq!(x.grad().unwrap().item(), Complex64::new(6.0, 8.0));
//! ```

pub mod fft;
mod gradcheck;
mod tape;

pub use gradcheck::{finite_difference_check, finite_difference_check_with, GradCheck, Part};
pub use tape::{CustomOp, Tape, Var};
