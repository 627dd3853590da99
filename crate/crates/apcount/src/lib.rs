//! Toolkit for counting almost-prime solutions of systems of integral forms.
//!
//! The library is organized around one pipeline: exact counting of lattice
//! points on `F(x) = v` inside boxes (`counter`), local solution densities
//! over Z_p (`padic`), GPY-style sieve weights and their main-term constants
//! (`sieve`), and the exponential-sum side of the same story (`circle`).
//! `arith` and `forms` supply the shared arithmetic and algebra.

// Index loops mirror the math across matrices and parallel arrays here, and
// `!(x > 0.0)` guards deliberately reject NaN along with the out-of-range
// values; neither should be "fixed".
#![allow(clippy::needless_range_loop)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::type_complexity)]

pub mod accum;
pub mod arith;
pub mod budget;
pub mod circle;
pub mod counter;
pub mod error;
pub mod forms;
pub mod padic;
pub(crate) mod quad;
pub mod sieve;
pub mod verification;

pub use budget::Budget;
pub use error::{Error, Result};
