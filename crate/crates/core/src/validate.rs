//! Assumption checks on correspondence maps and observed data.
//!
//! The estimators assume the correspondence map is structurally sound
//! (quadrant preservation, no mass into the unobservable quadrant, and
//! missing categories ranging over full rows or columns) and, for the fast
//! method, that the data carries enough fully observed mass to pin every
//! cell and marginal down (witness conditions). Validators return reports
//! rather than failing fast so callers can surface every violated
//! assumption at once, each with its first violating witness.

use crate::cd::CdMap;
use crate::error::Error;
use crate::table::{full_indices, DataIndex, FullIndex, FullTable, ObservedData};

/// Quadrant preservation failure: a key's target lies in a different
/// quadrant than the key itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuadrantViolation {
    pub key: DataIndex,
    pub target: FullIndex,
}

/// A target in the `(0,0)` quadrant, which no observed record can reach.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnobservableViolation {
    pub key: DataIndex,
    pub target: FullIndex,
}

/// Range closure failure: a single-source key reaches one cell of a row
/// (or column) but not the whole row (or column).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RangeViolation {
    pub key: DataIndex,
    pub present: FullIndex,
    pub missing: FullIndex,
}

/// Structural soundness of a correspondence map. `None` means the check
/// passed; otherwise the first violating witness in deterministic order.
///
/// The saturated-with-missingness model itself is a modeling choice and has
/// no runtime check; see [`StructuralReport::MODEL_NOTE`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StructuralReport {
    pub quadrant_preservation: Option<QuadrantViolation>,
    pub unobservable_quadrant: Option<UnobservableViolation>,
    pub range_closure: Option<RangeViolation>,
}

impl StructuralReport {
    /// Displayed alongside the checkable assumptions in reports.
    pub const MODEL_NOTE: &'static str =
        "model form: saturated log-linear with missingness terms (modeling choice, \
         always satisfied by this implementation)";

    #[must_use]
    pub fn all_pass(&self) -> bool {
        self.quadrant_preservation.is_none()
            && self.unobservable_quadrant.is_none()
            && self.range_closure.is_none()
    }

    /// First failed check as an error, for callers that require soundness.
    #[must_use]
    pub fn first_error(&self) -> Option<Error> {
        if let Some(v) = &self.quadrant_preservation {
            return Some(Error::StructuralViolation {
                name: "quadrant preservation",
                witness: format!("key {} maps to {}", v.key, v.target),
            });
        }
        if let Some(v) = &self.unobservable_quadrant {
            return Some(Error::StructuralViolation {
                name: "unobservable quadrant",
                witness: format!("key {} maps to {}", v.key, v.target),
            });
        }
        if let Some(v) = &self.range_closure {
            return Some(Error::StructuralViolation {
                name: "range closure",
                witness: format!(
                    "key {} reaches {} but not {}",
                    v.key, v.present, v.missing
                ),
            });
        }
        None
    }
}

/// Checks the structural assumptions of a correspondence map.
///
/// Witnesses are deterministic: entries are scanned in key order, targets in
/// sorted order, and the first violation per check is kept.
#[must_use]
pub fn validate_structural(cd: &CdMap) -> StructuralReport {
    let dims = cd.dims();
    let mut report = StructuralReport::default();

    for entry in cd.entries() {
        let key = *entry.key();
        for target in entry.targets() {
            if report.quadrant_preservation.is_none()
                && (target.i, target.j) != (key.i, key.j)
            {
                report.quadrant_preservation = Some(QuadrantViolation {
                    key,
                    target: *target,
                });
            }
            if report.unobservable_quadrant.is_none() && (target.i, target.j) == (0, 0) {
                report.unobservable_quadrant = Some(UnobservableViolation {
                    key,
                    target: *target,
                });
            }
        }

        if report.range_closure.is_none() {
            report.range_closure = range_violation(cd, entry.key(), entry.targets(), dims);
        }
    }

    report
}

/// Single-source keys must reach whole rows (source A only) or whole columns
/// (source B only) of their quadrant: reaching `(1,0,k,l)` requires reaching
/// `(1,0,k,c)` for every column `c`, and symmetrically for `(0,1)` keys.
fn range_violation(
    cd: &CdMap,
    key: &DataIndex,
    targets: &[FullIndex],
    dims: crate::table::Dims,
) -> Option<RangeViolation> {
    let entry = cd.get(key).expect("entry exists");
    match (key.i, key.j) {
        (1, 0) => {
            for t in targets.iter().filter(|t| (t.i, t.j) == (1, 0)) {
                for c in 1..=dims.n_b() {
                    let required = FullIndex {
                        i: 1,
                        j: 0,
                        k: t.k,
                        l: c,
                    };
                    if !entry.contains_target(&required) {
                        return Some(RangeViolation {
                            key: *key,
                            present: *t,
                            missing: required,
                        });
                    }
                }
            }
        }
        (0, 1) => {
            for t in targets.iter().filter(|t| (t.i, t.j) == (0, 1)) {
                for c in 1..=dims.n_a() {
                    let required = FullIndex {
                        i: 0,
                        j: 1,
                        k: c,
                        l: t.l,
                    };
                    if !entry.contains_target(&required) {
                        return Some(RangeViolation {
                            key: *key,
                            present: *t,
                            missing: required,
                        });
                    }
                }
            }
        }
        _ => {}
    }
    None
}

/// Witness conditions required by the fast method. `None` means the check
/// passed; otherwise the first cell, row, or column lacking a witness.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PositiveReport {
    /// First `(1,1)` cell with no singleton-target key of positive count.
    pub matched_cell: Option<FullIndex>,
    /// First row `k` with no `(1,0)` key of positive count whose row
    /// candidates are exactly `{k}`.
    pub row: Option<usize>,
    /// First column `l` with no `(0,1)` key of positive count whose column
    /// candidates are exactly `{l}`.
    pub col: Option<usize>,
}

impl PositiveReport {
    #[must_use]
    pub fn all_pass(&self) -> bool {
        self.matched_cell.is_none() && self.row.is_none() && self.col.is_none()
    }
}

/// Checks the positive-witness conditions of data under a correspondence map.
///
/// A witness pins a quantity down exactly: a key with positive count whose
/// candidate set is a singleton forces that cell (or marginal) to stay
/// positive through every redistribution.
#[must_use]
pub fn validate_positive(cd: &CdMap, data: &ObservedData) -> PositiveReport {
    let dims = cd.dims();
    let (n_a, n_b) = (dims.n_a(), dims.n_b());
    let mut cell_ok = vec![false; n_a * n_b];
    let mut row_ok = vec![false; n_a];
    let mut col_ok = vec![false; n_b];

    for entry in cd.entries() {
        let key = entry.key();
        if data.count(key) <= 0.0 {
            continue;
        }
        if entry.targets().len() == 1 {
            let t = entry.targets()[0];
            if (t.i, t.j) == (1, 1) {
                cell_ok[(t.k - 1) * n_b + (t.l - 1)] = true;
            }
        }
        match (key.i, key.j) {
            (1, 0) => {
                let ks = cd.b0_candidates(key).expect("(1,0) key");
                if let [only] = ks[..] {
                    row_ok[only - 1] = true;
                }
            }
            (0, 1) => {
                let ls = cd.a0_candidates(key).expect("(0,1) key");
                if let [only] = ls[..] {
                    col_ok[only - 1] = true;
                }
            }
            _ => {}
        }
    }

    PositiveReport {
        matched_cell: cell_ok.iter().position(|ok| !ok).map(|pos| FullIndex {
            i: 1,
            j: 1,
            k: pos / n_b + 1,
            l: pos % n_b + 1,
        }),
        row: row_ok.iter().position(|ok| !ok).map(|pos| pos + 1),
        col: col_ok.iter().position(|ok| !ok).map(|pos| pos + 1),
    }
}

/// One-step redistribution feasibility: every key with positive count can
/// place its mass somewhere, i.e. has at least one target where `table` is
/// positive. Redistribution from a table satisfying this never divides by
/// zero, and its output satisfies it again.
#[must_use]
pub fn check_op1(data: &ObservedData, cd: &CdMap, table: &FullTable) -> bool {
    for (key, count) in data.iter() {
        if count <= 0.0 {
            continue;
        }
        let Some(entry) = cd.get(key) else {
            return false;
        };
        if !entry
            .targets_lin()
            .iter()
            .any(|&t| table.values()[t] > 0.0)
        {
            return false;
        }
    }
    true
}

/// True when a table is strictly positive on every cell covered by the map.
/// Useful as a stronger, coverage-aware variant of [`check_op1`].
#[must_use]
pub fn covered_cells_positive(cd: &CdMap, table: &FullTable) -> bool {
    full_indices(cd.dims())
        .filter(|v| cd.covers(v))
        .all(|v| table.get(&v) > 0.0)
}
