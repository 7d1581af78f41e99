//! Sharp multiple-instance learning.
//!
//! Bag-level fusion rules (average, maximum, noisy-OR and the sharp logit-sum
//! rule with optional attention weights), closed-form and numerical analysis
//! of where their instance gradients vanish, a same-length temporal
//! convolution encoder, a synthetic partially-attacked bag generator and a
//! small trainer built on an in-crate reverse-mode autodiff engine.
//!
//! Runnable tours of each capability live in `examples/`.

pub mod aggregate;
pub mod bagsim;
pub mod cli;
pub mod diffcore;
pub mod gradlab;
pub mod numfmt;
pub mod rng;
pub mod stencode;
pub mod train;
