//! Desk-scale laboratory for studying why retrieval-augmented language models
//! outperform vanilla ones.
//!
//! The crate provides the four pillars the experiments rest on:
//!
//! * [`graph`] — a minimal reverse-mode automatic differentiation engine over
//!   dense `f64` arrays, with exactly the operations the transformer and the
//!   projection solver need.
//! * [`model`] — a decoder-only transformer exposing the explicit
//!   `output head ∘ final-MLP stage ∘ prefix encoder` factorization, with a
//!   switch that removes the last MLP sublayer.
//! * [`datastore`] — an exact nearest-neighbour datastore over prefix
//!   encodings, plus retrieval-distribution construction and interpolation.
//! * [`projection`] — gradient descent with Armijo backtracking that projects
//!   a target distribution onto the output space of the head (convex) or of
//!   the head composed with the final MLP stage (non-convex).
//!
//! On top of those sit [`macondo`] (synthetic parent/child corpora),
//! [`textgen`] (a bundled deterministic English-like corpus), and [`harness`]
//! (training loops, evaluation metrics, and the packaged experiments).
//!
//! The crate is `no_std`-compatible (with `alloc`); the default `std` feature
//! enables rayon-backed parallel kernels. All floating-point kernels are
//! bitwise deterministic for a fixed build regardless of thread count.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod datastore;
pub mod dist;
pub mod error;
pub mod experiments;
pub mod graph;
pub mod harness;
pub mod macondo;
pub mod math;
pub mod model;
pub mod projection;
pub mod rng;
pub mod tensor;
pub mod textgen;
pub mod tokenizer;

pub(crate) mod parallel;

pub use dist::Distribution;
pub use error::CoreError;
pub use tensor::Tensor;
