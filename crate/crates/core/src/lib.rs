//! Kronecker-factored compression of GPT-style transformers.
//!
//! Dense weights are replaced by `A ⊗ B` factors fitted with the
//! nearest-Kronecker rearrangement and a rank-1 SVD, factored layers are
//! evaluated without ever forming the product, and the compressed student is
//! trained against the dense teacher with embedding, attention and
//! hidden-state distillation terms.
//!
//! ```
//! use knz::kronecker::{kron, nearest_kron, FactorShapes};
//! use knz::{Matrix, Rng};
//!
//! let mut rng = Rng::new(7);
//! let a = Matrix::randn(3, 2, 1.0, &mut rng);
//! let b = Matrix::randn(2, 2, 1.0, &mut rng);
//! let w = kron(&a, &b);
//! let (pair, report) = nearest_kron(&w, FactorShapes::new(3, 2, 2, 2), &mut rng).unwrap();
//! assert!(report.relative_residual < 1e-9);
//! assert!(pair.materialize().max_abs_diff(&w) < 1e-9);
//! ```

// `!(x > 0.0)` rejects NaN on purpose; the suggested replacements for `%`
// and `map_or` need a newer toolchain than `rust-version`.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::manual_is_multiple_of,
    clippy::unnecessary_map_or
)]

pub mod autodiff;
pub mod bench;
pub mod distill;
pub mod error;
pub mod io;
pub mod kronecker;
pub mod layers;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Matrix, Rng};
