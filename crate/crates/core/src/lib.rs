//! Escape rates, critical heights and the combinatorics of the shift locus
//! for one-variable complex polynomials.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod boettcher;
pub mod census;
pub mod escape;
pub mod heights_space;
pub mod poly;
pub mod precision;
pub mod selftest;
pub mod tree;

pub use escape::{EscapeBudget, EscapeValue, HeightsVector};
pub use poly::MarkedPolynomial;
