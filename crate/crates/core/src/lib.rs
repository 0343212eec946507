//! Exact incidence geometry and additive combinatorics over prime fields.
//!
//! The crate counts lines spanned by Cartesian products A × A ⊂ F_p², point-line
//! incidences in P²(F_p), and the additive-combinatorial quantities (sumsets,
//! energies, ratio sets) that control them. The [`pipeline`] module replays the
//! refinement argument behind the lines-spanned and incidence bounds on concrete
//! sets and records every intermediate quantity; [`harness`] runs scans over
//! instance families and persists the results.

pub mod addcomb;
pub mod bsg;
pub mod error;
pub mod field;
pub mod geometry;
pub mod harness;
pub mod incidence;
pub mod pipeline;

pub use error::{Error, Result};
pub use field::{FieldElement, PrimeField};
