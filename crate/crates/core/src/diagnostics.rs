//! Post-hoc checks on estimated tables.

use crate::cd::CdMap;
use crate::em::dist;
use crate::error::Result;
use crate::regression::{pr, ue, SolverOptions};
use crate::table::{max_rel_change, FullTable, ObservedData};

/// How far a table is from being a fixed point of the two maps that define
/// an estimate: redistribution of the observed counts, and the fitted-mean
/// map of its own regression. Both are relative changes (see
/// [`max_rel_change`]); a converged estimate drives both toward zero.
#[derive(Debug, Clone, Copy)]
pub struct FixpointResiduals {
    /// `max_rel_change(dist(data, cd, table), table)`.
    pub redistribution: f64,
    /// `max_rel_change(ue(pr(table)), table)`.
    pub model_fit: f64,
}

impl FixpointResiduals {
    #[must_use]
    pub fn max(&self) -> f64 {
        self.redistribution.max(self.model_fit)
    }
}

/// Computes both residuals for a candidate estimate.
pub fn fixpoint_residuals(
    data: &ObservedData,
    cd: &CdMap,
    table: &FullTable,
    solver: &SolverOptions,
) -> Result<FixpointResiduals> {
    let redistributed = dist(data, cd, table)?;
    let redistribution = max_rel_change(redistributed.values(), table.values());
    let params = pr(table, solver)?;
    let fitted = ue(&params)?;
    let model_fit = max_rel_change(fitted.values(), table.values());
    Ok(FixpointResiduals {
        redistribution,
        model_fit,
    })
}
