//! Index types, observed data, and the full contingency table.
//!
//! Every unit in the merged population is classified by presence in source A
//! (`i`), presence in source B (`j`), a category `k` from A's variable
//! (`1..=n_a`), and a category `l` from B's variable (`1..=n_b`). The full
//! table lives on all `4 * n_a * n_b` cells. Observed records may carry
//! negative missing codes in `k` or `l` and never come from the `(0,0)`
//! quadrant, which is unobservable by construction.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

/// Category counts of the two source variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    n_a: usize,
    n_b: usize,
}

impl Dims {
    /// Both sides need at least one category.
    pub fn new(n_a: usize, n_b: usize) -> Result<Self> {
        if n_a == 0 || n_b == 0 {
            return Err(Error::InvalidInput(format!(
                "dims must be at least 1x1, got {n_a}x{n_b}"
            )));
        }
        Ok(Self { n_a, n_b })
    }

    #[must_use]
    pub fn n_a(&self) -> usize {
        self.n_a
    }

    #[must_use]
    pub fn n_b(&self) -> usize {
        self.n_b
    }

    /// Number of cells in the full table: four quadrants of `n_a * n_b`.
    #[must_use]
    pub fn cells(&self) -> usize {
        4 * self.n_a * self.n_b
    }

    /// Number of cells in one quadrant.
    #[must_use]
    pub fn block_cells(&self) -> usize {
        self.n_a * self.n_b
    }

    /// Dimension of the saturated-with-missingness model parameter vector.
    #[must_use]
    pub fn n_params(&self) -> usize {
        self.n_a * self.n_b + self.n_a + self.n_b
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.n_a, self.n_b)
    }
}

/// Quadrant slot in the fixed enumeration order `(1,1), (1,0), (0,1), (0,0)`.
pub(crate) fn quadrant_slot(i: u8, j: u8) -> usize {
    match (i, j) {
        (1, 1) => 0,
        (1, 0) => 1,
        (0, 1) => 2,
        (0, 0) => 3,
        _ => unreachable!("membership flags are validated at construction"),
    }
}

/// The quadrants in enumeration order.
pub(crate) const QUADRANTS: [(u8, u8); 4] = [(1, 1), (1, 0), (0, 1), (0, 0)];

/// A cell of the full table: membership flags plus in-range categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FullIndex {
    pub i: u8,
    pub j: u8,
    pub k: usize,
    pub l: usize,
}

impl FullIndex {
    /// Flags must be 0/1 and categories start at 1. Range checks against a
    /// concrete table happen in [`FullIndex::in_bounds`].
    pub fn new(i: u8, j: u8, k: usize, l: usize) -> Result<Self> {
        if i > 1 || j > 1 {
            return Err(Error::InvalidInput(format!(
                "membership flags must be 0 or 1, got ({i},{j})"
            )));
        }
        if k == 0 || l == 0 {
            return Err(Error::InvalidInput(format!(
                "full-table categories start at 1, got ({i},{j},{k},{l})"
            )));
        }
        Ok(Self { i, j, k, l })
    }

    #[must_use]
    pub fn in_bounds(&self, dims: Dims) -> bool {
        self.k <= dims.n_a() && self.l <= dims.n_b()
    }

    /// Position in the fixed enumeration order: quadrants `(1,1), (1,0),
    /// (0,1), (0,0)`, each quadrant row-major in `(k, l)`.
    #[must_use]
    pub fn linear(&self, dims: Dims) -> usize {
        debug_assert!(self.in_bounds(dims));
        let block = dims.block_cells();
        quadrant_slot(self.i, self.j) * block + (self.k - 1) * dims.n_b() + (self.l - 1)
    }
}

impl fmt::Display for FullIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.i, self.j, self.k, self.l)
    }
}

/// Iterate all cells of the full table in the fixed enumeration order.
pub fn full_indices(dims: Dims) -> impl Iterator<Item = FullIndex> {
    QUADRANTS.into_iter().flat_map(move |(i, j)| {
        (1..=dims.n_a()).flat_map(move |k| {
            (1..=dims.n_b()).map(move |l| FullIndex { i, j, k, l })
        })
    })
}

/// A key of the observed data: categories may be negative missing codes.
///
/// Invariants: flags are 0/1 and not both 0; categories are nonzero; a source
/// the unit is absent from cannot report a category, so `i == 0` forces
/// `k < 0` and `j == 0` forces `l < 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DataIndex {
    pub i: u8,
    pub j: u8,
    pub k: i64,
    pub l: i64,
}

impl DataIndex {
    pub fn new(i: u8, j: u8, k: i64, l: i64) -> Result<Self> {
        if i > 1 || j > 1 {
            return Err(Error::InvalidInput(format!(
                "membership flags must be 0 or 1, got ({i},{j})"
            )));
        }
        if i == 0 && j == 0 {
            return Err(Error::InvalidInput(format!(
                "quadrant (0,0) is unobservable; data key ({i},{j},{k},{l}) is invalid"
            )));
        }
        if k == 0 || l == 0 {
            return Err(Error::InvalidInput(format!(
                "categories are 1-based and missing codes negative; \
                 got ({i},{j},{k},{l})"
            )));
        }
        if i == 0 && k > 0 {
            return Err(Error::InvalidInput(format!(
                "unit absent from source A cannot report an A category: ({i},{j},{k},{l})"
            )));
        }
        if j == 0 && l > 0 {
            return Err(Error::InvalidInput(format!(
                "unit absent from source B cannot report a B category: ({i},{j},{k},{l})"
            )));
        }
        Ok(Self { i, j, k, l })
    }

    /// Categories that are present must fit the table dimensions.
    #[must_use]
    pub fn in_bounds(&self, dims: Dims) -> bool {
        (self.k < 0 || self.k as usize <= dims.n_a())
            && (self.l < 0 || self.l as usize <= dims.n_b())
    }

    #[must_use]
    pub fn k_missing(&self) -> bool {
        self.k < 0
    }

    #[must_use]
    pub fn l_missing(&self) -> bool {
        self.l < 0
    }

    /// True when both categories are observed directly (nothing to impute).
    #[must_use]
    pub fn fully_observed(&self) -> bool {
        self.k > 0 && self.l > 0
    }
}

impl fmt::Display for DataIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.i, self.j, self.k, self.l)
    }
}

/// Observed counts keyed by [`DataIndex`], with fixed dimensions.
///
/// Counts are finite and nonnegative; fractional values are accepted so that
/// weighted or calibrated inputs can flow through unchanged. Iteration order
/// is the key order of the underlying sorted map, which makes every
/// downstream computation deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedData {
    dims: Dims,
    counts: BTreeMap<DataIndex, f64>,
}

impl ObservedData {
    /// Validates bounds and counts; rejects duplicate keys.
    pub fn new(dims: Dims, entries: impl IntoIterator<Item = (DataIndex, f64)>) -> Result<Self> {
        let mut counts = BTreeMap::new();
        for (key, count) in entries {
            if !key.in_bounds(dims) {
                return Err(Error::InvalidInput(format!(
                    "data key {key} is out of bounds for dims {dims}"
                )));
            }
            if !count.is_finite() || count < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "count for key {key} must be finite and nonnegative, got {count}"
                )));
            }
            if counts.insert(key, count).is_some() {
                return Err(Error::InvalidInput(format!("duplicate data key {key}")));
            }
        }
        Ok(Self { dims, counts })
    }

    #[must_use]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// Count for a key, zero when the key is absent.
    #[must_use]
    pub fn count(&self, key: &DataIndex) -> f64 {
        self.counts.get(key).copied().unwrap_or(0.0)
    }

    #[must_use]
    pub fn contains(&self, key: &DataIndex) -> bool {
        self.counts.contains_key(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&DataIndex, f64)> {
        self.counts.iter().map(|(k, &v)| (k, v))
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Total observed count over all keys.
    #[must_use]
    pub fn total(&self) -> f64 {
        self.counts.values().sum()
    }

    /// Total observed count within one quadrant.
    #[must_use]
    pub fn quadrant_total(&self, i: u8, j: u8) -> f64 {
        self.counts
            .iter()
            .filter(|(key, _)| key.i == i && key.j == j)
            .map(|(_, &v)| v)
            .sum()
    }
}

/// Dense table over all cells, stored in the fixed enumeration order.
///
/// Values are finite and nonnegative; this invariant is established at
/// construction and preserved by every redistribution step.
#[derive(Debug, Clone, PartialEq)]
pub struct FullTable {
    dims: Dims,
    values: Vec<f64>,
}

impl FullTable {
    /// Constant table. `value` must be finite and nonnegative.
    #[must_use]
    pub fn filled(dims: Dims, value: f64) -> Self {
        assert!(
            value.is_finite() && value >= 0.0,
            "table values must be finite and nonnegative"
        );
        Self {
            dims,
            values: vec![value; dims.cells()],
        }
    }

    /// Wraps a dense vector laid out in enumeration order.
    pub fn from_values(dims: Dims, values: Vec<f64>) -> Result<Self> {
        if values.len() != dims.cells() {
            return Err(Error::InvalidInput(format!(
                "table for dims {dims} needs {} values, got {}",
                dims.cells(),
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            let idx = full_indices(dims).nth(pos).expect("position is in range");
            return Err(Error::InvalidInput(format!(
                "table value at {idx} must be finite and nonnegative, got {}",
                values[pos]
            )));
        }
        Ok(Self { dims, values })
    }

    #[must_use]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[must_use]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Value at a full index. Panics if the index is out of bounds.
    #[must_use]
    pub fn get(&self, idx: &FullIndex) -> f64 {
        assert!(idx.in_bounds(self.dims), "index {idx} out of bounds");
        self.values[idx.linear(self.dims)]
    }

    /// Convenience accessor by raw coordinates. Panics on invalid coordinates.
    #[must_use]
    pub fn cell(&self, i: u8, j: u8, k: usize, l: usize) -> f64 {
        let idx = FullIndex::new(i, j, k, l).expect("valid coordinates");
        self.get(&idx)
    }

    pub fn set(&mut self, idx: &FullIndex, value: f64) {
        assert!(idx.in_bounds(self.dims), "index {idx} out of bounds");
        assert!(
            value.is_finite() && value >= 0.0,
            "table values must be finite and nonnegative"
        );
        self.values[idx.linear(self.dims)] = value;
    }

    /// Sum over all cells.
    #[must_use]
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Sum over one quadrant.
    #[must_use]
    pub fn quadrant_total(&self, i: u8, j: u8) -> f64 {
        let block = self.dims.block_cells();
        let start = quadrant_slot(i, j) * block;
        self.values[start..start + block].iter().sum()
    }

    /// The `(1,1)` quadrant as a row-major `n_a x n_b` slice.
    #[must_use]
    pub fn match_block(&self) -> &[f64] {
        &self.values[..self.dims.block_cells()]
    }

    /// Row totals of the `(1,0)` quadrant: `sum_l y[1,0,k,l]` for each `k`.
    #[must_use]
    pub fn row_totals(&self) -> Vec<f64> {
        let (n_a, n_b) = (self.dims.n_a(), self.dims.n_b());
        let start = self.dims.block_cells();
        (0..n_a)
            .map(|r| self.values[start + r * n_b..start + (r + 1) * n_b].iter().sum())
            .collect()
    }

    /// Column totals of the `(0,1)` quadrant: `sum_k y[0,1,k,l]` for each `l`.
    #[must_use]
    pub fn col_totals(&self) -> Vec<f64> {
        let (n_a, n_b) = (self.dims.n_a(), self.dims.n_b());
        let start = 2 * self.dims.block_cells();
        (0..n_b)
            .map(|c| (0..n_a).map(|r| self.values[start + r * n_b + c]).sum())
            .collect()
    }
}

/// Convergence metric used by every iterative routine in this crate:
/// `max_v |new_v - old_v| / (1 + |old_v|)`.
///
/// The `1 +` keeps the metric meaningful near zero without blowing up.
/// Panics if the slices differ in length.
#[must_use]
pub fn max_rel_change(new: &[f64], old: &[f64]) -> f64 {
    assert_eq!(new.len(), old.len(), "length mismatch in max_rel_change");
    new.iter()
        .zip(old)
        .map(|(n, o)| (n - o).abs() / (1.0 + o.abs()))
        .fold(0.0, f64::max)
}
