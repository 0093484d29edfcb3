//! Dual-system population estimation from two partially overlapping
//! sources with incompletely classified records.
//!
//! Two record systems (A and B) each observe part of a population and
//! classify units by their own categorical variable. Records may be missing
//! classifications, and units outside both systems are never seen. This
//! crate completes the full contingency table over
//! `(in A, in B, category A, category B)` under a log-linear model, two
//! ways:
//!
//! * [`em::run_em`]: the reference expectation-maximization iteration over
//!   the full table. Each sweep fits the model ([`regression::pr`]),
//!   evaluates its means ([`regression::ue`]), and redistributes observed
//!   counts over their candidate cells ([`em::dist`]).
//! * [`fast::run_fast`]: an equivalent method that solves three small
//!   fixed points (matched block, row totals, column totals) and assembles
//!   the full table in closed form, then fits the model once. Orders of
//!   magnitude faster because the per-iteration regression disappears.
//!
//! Estimates agree whenever the structural and positive witness
//! assumptions hold; [`validate`] checks them with explicit witnesses.
//! [`simulate`] generates seeded synthetic instances, [`io`] defines the
//! text formats, and [`diagnostics`] measures how close a table is to
//! being a genuine estimate.

pub mod cd;
pub mod diagnostics;
pub mod em;
pub mod error;
pub mod fast;
pub mod io;
pub mod regression;
pub mod simulate;
pub mod table;
pub mod validate;

pub use cd::{build_standard_cd, CdMap};
pub use error::{Error, Result};
pub use table::{DataIndex, Dims, FullIndex, FullTable, ObservedData};
