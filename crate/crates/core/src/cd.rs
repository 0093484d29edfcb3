//! Correspondence map between observed data keys and full-table cells.
//!
//! Each observed key resolves to the set of full-table cells its count could
//! have come from. A key with both categories observed resolves to a single
//! cell; a missing code widens the set over the corresponding category range.
//! The map drives every redistribution step and is the object the structural
//! assumptions in [`crate::validate`] are stated about.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::table::{DataIndex, Dims, FullIndex, ObservedData};

/// One key of the map with its sorted, deduplicated target cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CdEntry {
    key: DataIndex,
    targets: Vec<FullIndex>,
    /// Targets linearized against the map's dims, same order as `targets`.
    targets_lin: Vec<usize>,
}

impl CdEntry {
    #[must_use]
    pub fn key(&self) -> &DataIndex {
        &self.key
    }

    #[must_use]
    pub fn targets(&self) -> &[FullIndex] {
        &self.targets
    }

    pub(crate) fn targets_lin(&self) -> &[usize] {
        &self.targets_lin
    }

    /// Binary search over the sorted target list.
    #[must_use]
    pub fn contains_target(&self, v: &FullIndex) -> bool {
        self.targets.binary_search(v).is_ok()
    }
}

/// Correspondence map with precomputed coverage mask.
///
/// Entries are sorted by key. A full-table cell is "covered" when it appears
/// in the target set of at least one key; covered cells are owned by the
/// redistribution step, uncovered cells pass through it untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct CdMap {
    dims: Dims,
    entries: Vec<CdEntry>,
    covered: Vec<bool>,
}

impl CdMap {
    /// Builds a map from raw `(key, targets)` pairs.
    ///
    /// Rejects duplicate keys, empty target sets, and out-of-bounds indices.
    /// Targets are sorted and deduplicated per key. Structural soundness
    /// beyond that (quadrant preservation and friends) is deliberately not
    /// enforced here; run the validators to check it.
    pub fn from_entries(
        dims: Dims,
        entries: impl IntoIterator<Item = (DataIndex, Vec<FullIndex>)>,
    ) -> Result<Self> {
        let mut by_key: BTreeMap<DataIndex, Vec<FullIndex>> = BTreeMap::new();
        for (key, targets) in entries {
            if !key.in_bounds(dims) {
                return Err(Error::InvalidInput(format!(
                    "correspondence key {key} is out of bounds for dims {dims}"
                )));
            }
            if targets.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "correspondence key {key} has an empty target set"
                )));
            }
            for t in &targets {
                if !t.in_bounds(dims) {
                    return Err(Error::InvalidInput(format!(
                        "correspondence target {t} for key {key} is out of bounds \
                         for dims {dims}"
                    )));
                }
            }
            if by_key.insert(key, targets).is_some() {
                return Err(Error::InvalidInput(format!(
                    "duplicate correspondence key {key}"
                )));
            }
        }

        let mut covered = vec![false; dims.cells()];
        let entries = by_key
            .into_iter()
            .map(|(key, mut targets)| {
                targets.sort_unstable();
                targets.dedup();
                let targets_lin: Vec<usize> =
                    targets.iter().map(|t| t.linear(dims)).collect();
                for &t in &targets_lin {
                    covered[t] = true;
                }
                CdEntry {
                    key,
                    targets,
                    targets_lin,
                }
            })
            .collect();

        Ok(Self {
            dims,
            entries,
            covered,
        })
    }

    #[must_use]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// Entries in sorted key order.
    #[must_use]
    pub fn entries(&self) -> &[CdEntry] {
        &self.entries
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry for a key, if present.
    #[must_use]
    pub fn get(&self, key: &DataIndex) -> Option<&CdEntry> {
        self.entries
            .binary_search_by(|e| e.key.cmp(key))
            .ok()
            .map(|pos| &self.entries[pos])
    }

    #[must_use]
    pub fn contains_key(&self, key: &DataIndex) -> bool {
        self.get(key).is_some()
    }

    /// Whether a full-table cell appears in any key's target set.
    #[must_use]
    pub fn covers(&self, v: &FullIndex) -> bool {
        v.in_bounds(self.dims) && self.covered[v.linear(self.dims)]
    }

    /// Coverage mask over all cells in enumeration order.
    #[must_use]
    pub fn covered_mask(&self) -> &[bool] {
        &self.covered
    }

    /// Pre-image of a full cell restricted to positive counts: the data keys
    /// whose target set contains `v` and whose observed count is positive.
    /// These are exactly the keys that contribute mass to `v` during
    /// redistribution.
    #[must_use]
    pub fn pre_image(&self, data: &ObservedData, v: &FullIndex) -> Vec<DataIndex> {
        self.entries
            .iter()
            .filter(|e| e.contains_target(v) && data.count(&e.key) > 0.0)
            .map(|e| e.key)
            .collect()
    }

    /// Row candidates of a `(1,0)` key: the `k` with `(1,0,k,1)` among its
    /// targets. Under the within-row range assumption the first column is
    /// representative of the whole row, so this is the set of row totals the
    /// key's count can be split over.
    pub fn b0_candidates(&self, key: &DataIndex) -> Result<Vec<usize>> {
        if (key.i, key.j) != (1, 0) {
            return Err(Error::InvalidInput(format!(
                "row candidates are defined for (1,0) keys, got {key}"
            )));
        }
        let entry = self.get(key).ok_or_else(|| Error::MissingCorrespondence {
            key: key.to_string(),
        })?;
        Ok(entry
            .targets
            .iter()
            .filter(|t| (t.i, t.j, t.l) == (1, 0, 1))
            .map(|t| t.k)
            .collect())
    }

    /// Column candidates of a `(0,1)` key: the `l` with `(0,1,1,l)` among its
    /// targets. Mirror of [`CdMap::b0_candidates`].
    pub fn a0_candidates(&self, key: &DataIndex) -> Result<Vec<usize>> {
        if (key.i, key.j) != (0, 1) {
            return Err(Error::InvalidInput(format!(
                "column candidates are defined for (0,1) keys, got {key}"
            )));
        }
        let entry = self.get(key).ok_or_else(|| Error::MissingCorrespondence {
            key: key.to_string(),
        })?;
        Ok(entry
            .targets
            .iter()
            .filter(|t| (t.i, t.j, t.k) == (0, 1, 1))
            .map(|t| t.l)
            .collect())
    }
}

/// Builds the standard correspondence for data whose only missing code is -1:
/// each key maps to every cell in its own quadrant obtained by ranging a -1
/// over the full category set, holding observed categories fixed.
///
/// Any other negative code is rejected; such data needs an explicit map.
pub fn build_standard_cd(data: &ObservedData) -> Result<CdMap> {
    let dims = data.dims();
    let mut entries = Vec::with_capacity(data.len());
    for (key, _) in data.iter() {
        if key.k < -1 || key.l < -1 {
            return Err(Error::NonStandardMissingCode {
                key: key.to_string(),
            });
        }
        let ks: Vec<usize> = if key.k > 0 {
            vec![key.k as usize]
        } else {
            (1..=dims.n_a()).collect()
        };
        let ls: Vec<usize> = if key.l > 0 {
            vec![key.l as usize]
        } else {
            (1..=dims.n_b()).collect()
        };
        let mut targets = Vec::with_capacity(ks.len() * ls.len());
        for &k in &ks {
            for &l in &ls {
                targets.push(FullIndex {
                    i: key.i,
                    j: key.j,
                    k,
                    l,
                });
            }
        }
        entries.push((*key, targets));
    }
    CdMap::from_entries(dims, entries)
}
