//! Reference estimator: expectation-maximization over the full table.
//!
//! One sweep fits the log-linear model to the current table, evaluates the
//! fitted means, and redistributes every observed count over its candidate
//! cells proportionally to those means. Iterating sweeps to a fixed point
//! yields the maximum-likelihood completion of the observed data.

use std::time::{Duration, Instant};

use crate::cd::CdMap;
use crate::error::{Error, Result};
use crate::regression::{loglik, newton, ue, Design, ParamVector, SolverOptions};
use crate::table::{max_rel_change, FullTable, ObservedData};

/// Proportional redistribution of observed counts over candidate cells.
///
/// Cells covered by the map are rebuilt from scratch: each key's count is
/// split over its targets proportionally to the current table values there.
/// Cells no key can reach pass through unchanged. A key whose count is
/// positive while all its targets are zero has nowhere to place its mass
/// and raises [`Error::ZeroCandidateMass`]; see [`crate::validate::check_op1`]
/// for the precondition that rules this out.
pub fn dist(data: &ObservedData, cd: &CdMap, table: &FullTable) -> Result<FullTable> {
    if data.dims() != cd.dims() || table.dims() != cd.dims() {
        return Err(Error::InvalidInput(format!(
            "dims mismatch: data {}, correspondence {}, table {}",
            data.dims(),
            cd.dims(),
            table.dims()
        )));
    }
    for (key, _) in data.iter() {
        if !cd.contains_key(key) {
            return Err(Error::MissingCorrespondence {
                key: key.to_string(),
            });
        }
    }

    let values = table.values();
    let mut out: Vec<f64> = cd
        .covered_mask()
        .iter()
        .zip(values)
        .map(|(&covered, &v)| if covered { 0.0 } else { v })
        .collect();

    for entry in cd.entries() {
        let count = data.count(entry.key());
        if count <= 0.0 {
            continue;
        }
        let denom: f64 = entry.targets_lin().iter().map(|&t| values[t]).sum();
        if denom <= 0.0 {
            return Err(Error::ZeroCandidateMass {
                key: entry.key().to_string(),
                count,
            });
        }
        let ratio = count / denom;
        for &t in entry.targets_lin() {
            out[t] += ratio * values[t];
        }
    }

    FullTable::from_values(table.dims(), out)
}

/// One estimation sweep: fit, evaluate means, redistribute.
pub fn em_step(
    data: &ObservedData,
    cd: &CdMap,
    table: &FullTable,
    solver: &SolverOptions,
) -> Result<FullTable> {
    let params = crate::regression::pr(table, solver)?;
    let means = ue(&params)?;
    dist(data, cd, &means)
}

/// Starting table for the iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EmInit {
    /// Every cell starts at one.
    #[default]
    AllOnes,
    /// Each observed count is split evenly over its candidate cells;
    /// uncovered cells start at one.
    ProportionalSpread,
}

/// Options for [`run_em`].
#[derive(Debug, Clone)]
pub struct EmOptions {
    /// Convergence threshold on the relative change between consecutive
    /// tables (see [`max_rel_change`]).
    pub tol: f64,
    /// Sweep budget.
    pub max_iterations: usize,
    pub init: EmInit,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iterations: 500,
            init: EmInit::AllOnes,
        }
    }
}

/// Per-sweep trace record.
#[derive(Debug, Clone, Copy)]
pub struct EmRecord {
    /// 1-based sweep index.
    pub iteration: usize,
    /// Log likelihood of the sweep's input table under the parameters
    /// fitted to it. Non-decreasing across sweeps up to numerical slack.
    pub loglik: f64,
    /// Relative change from the input table to the sweep's output.
    pub max_change: f64,
    pub elapsed: Duration,
}

/// Full iteration trace.
#[derive(Debug, Clone, Default)]
pub struct EmTrace {
    pub records: Vec<EmRecord>,
    /// Whether the change threshold was met within the budget. A finished
    /// but unconverged run is returned with this flag false rather than as
    /// an error.
    pub converged: bool,
}

impl EmTrace {
    #[must_use]
    pub fn iterations(&self) -> usize {
        self.records.len()
    }
}

/// Estimation result: the completed table, the parameters from the final
/// fit (the table is exactly their redistribution), and the trace.
#[derive(Debug, Clone)]
pub struct EmOutcome {
    pub table: FullTable,
    pub params: ParamVector,
    pub trace: EmTrace,
}

/// Runs sweeps until the table stops moving or the budget runs out.
///
/// The exact-fit probe is disabled for the inner fits: intermediate tables
/// are never inside the model family, so the probe would only add a wasted
/// factorization per sweep.
pub fn run_em(
    data: &ObservedData,
    cd: &CdMap,
    opts: &EmOptions,
    solver: &SolverOptions,
) -> Result<EmOutcome> {
    if data.dims() != cd.dims() {
        return Err(Error::InvalidInput(format!(
            "dims mismatch: data {}, correspondence {}",
            data.dims(),
            cd.dims()
        )));
    }
    if !opts.tol.is_finite() || opts.tol < 0.0 {
        return Err(Error::InvalidInput(format!(
            "tol must be finite and nonnegative, got {}",
            opts.tol
        )));
    }
    if opts.max_iterations == 0 {
        return Err(Error::InvalidInput(
            "max_iterations must be at least 1".into(),
        ));
    }

    let dims = data.dims();
    let design = Design::new(dims)?;
    let inner = SolverOptions {
        exact_fit_probe: false,
        ..solver.clone()
    };

    let mut table = init_table(data, cd, opts.init);
    let mut trace = EmTrace::default();
    let mut params: Option<ParamVector> = None;

    for iteration in 1..=opts.max_iterations {
        let start = Instant::now();
        let (fitted, _) = newton(&design, &table, &inner)?;
        let ll = loglik(&table, &fitted);
        let means = ue(&fitted)?;
        let next = dist(data, cd, &means)?;
        let change = max_rel_change(next.values(), table.values());
        trace.records.push(EmRecord {
            iteration,
            loglik: ll,
            max_change: change,
            elapsed: start.elapsed(),
        });
        table = next;
        params = Some(fitted);
        if change < opts.tol {
            trace.converged = true;
            break;
        }
    }

    Ok(EmOutcome {
        table,
        params: params.expect("at least one sweep ran"),
        trace,
    })
}

fn init_table(data: &ObservedData, cd: &CdMap, init: EmInit) -> FullTable {
    let dims = data.dims();
    match init {
        EmInit::AllOnes => FullTable::filled(dims, 1.0),
        EmInit::ProportionalSpread => {
            let mut values: Vec<f64> = cd
                .covered_mask()
                .iter()
                .map(|&covered| if covered { 0.0 } else { 1.0 })
                .collect();
            for entry in cd.entries() {
                let count = data.count(entry.key());
                if count <= 0.0 {
                    continue;
                }
                let share = count / entry.targets_lin().len() as f64;
                for &t in entry.targets_lin() {
                    values[t] += share;
                }
            }
            FullTable::from_values(dims, values).expect("spread values are nonnegative")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cd::build_standard_cd;
    use crate::table::{DataIndex, Dims, FullIndex};

    fn dims(a: usize, b: usize) -> Dims {
        Dims::new(a, b).unwrap()
    }

    fn key(i: u8, j: u8, k: i64, l: i64) -> DataIndex {
        DataIndex::new(i, j, k, l).unwrap()
    }

    fn cell(i: u8, j: u8, k: usize, l: usize) -> FullIndex {
        FullIndex::new(i, j, k, l).unwrap()
    }

    #[test]
    fn dist_splits_proportionally() {
        let d = dims(2, 2);
        let data = ObservedData::new(
            d,
            vec![(key(1, 1, 1, 1), 5.0), (key(1, 1, -1, 1), 3.0)],
        )
        .unwrap();
        let cd = build_standard_cd(&data).unwrap();
        let out = dist(&data, &cd, &FullTable::filled(d, 1.0)).unwrap();
        // singleton keeps its 5 and receives half of the ambiguous 3
        assert!((out.get(&cell(1, 1, 1, 1)) - 6.5).abs() < 1e-12);
        assert!((out.get(&cell(1, 1, 2, 1)) - 1.5).abs() < 1e-12);
        // uncovered cells pass through
        assert_eq!(out.get(&cell(1, 1, 1, 2)), 1.0);
        assert_eq!(out.get(&cell(0, 0, 2, 2)), 1.0);
        // covered mass equals observed mass
        assert!((out.quadrant_total(1, 1) - 8.0 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn dist_zeroes_covered_cells_without_mass() {
        let d = dims(1, 1);
        let data = ObservedData::new(d, vec![(key(1, 1, 1, 1), 0.0)]).unwrap();
        let cd = build_standard_cd(&data).unwrap();
        let out = dist(&data, &cd, &FullTable::filled(d, 2.0)).unwrap();
        // the covered cell is rebuilt from a zero count
        assert_eq!(out.get(&cell(1, 1, 1, 1)), 0.0);
        // the other quadrants are untouched
        assert_eq!(out.get(&cell(1, 0, 1, 1)), 2.0);
        assert_eq!(out.get(&cell(0, 0, 1, 1)), 2.0);
    }

    #[test]
    fn dist_respects_current_proportions() {
        let d = dims(2, 1);
        let data = ObservedData::new(d, vec![(key(1, 1, -1, 1), 9.0)]).unwrap();
        let cd = build_standard_cd(&data).unwrap();
        let mut table = FullTable::filled(d, 1.0);
        table.set(&cell(1, 1, 1, 1), 2.0);
        table.set(&cell(1, 1, 2, 1), 1.0);
        let out = dist(&data, &cd, &table).unwrap();
        assert!((out.get(&cell(1, 1, 1, 1)) - 6.0).abs() < 1e-12);
        assert!((out.get(&cell(1, 1, 2, 1)) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn dist_errors_when_mass_has_nowhere_to_go() {
        let d = dims(2, 1);
        let data = ObservedData::new(d, vec![(key(1, 1, -1, 1), 4.0)]).unwrap();
        let cd = build_standard_cd(&data).unwrap();
        let mut table = FullTable::filled(d, 1.0);
        table.set(&cell(1, 1, 1, 1), 0.0);
        table.set(&cell(1, 1, 2, 1), 0.0);
        match dist(&data, &cd, &table) {
            Err(Error::ZeroCandidateMass { key, count }) => {
                assert_eq!(key, "(1,1,-1,1)");
                assert_eq!(count, 4.0);
            }
            other => panic!("expected zero candidate mass, got {other:?}"),
        }
    }

    #[test]
    fn dist_requires_correspondence_entries() {
        let d = dims(2, 2);
        let small = ObservedData::new(d, vec![(key(1, 1, 1, 1), 1.0)]).unwrap();
        let cd = build_standard_cd(&small).unwrap();
        let bigger = ObservedData::new(
            d,
            vec![(key(1, 1, 1, 1), 1.0), (key(0, 1, -1, 2), 2.0)],
        )
        .unwrap();
        assert!(matches!(
            dist(&bigger, &cd, &FullTable::filled(d, 1.0)),
            Err(Error::MissingCorrespondence { .. })
        ));
    }

    fn small_instance() -> (ObservedData, CdMap) {
        let d = dims(2, 2);
        let data = ObservedData::new(
            d,
            vec![
                (key(1, 1, 1, 1), 50.0),
                (key(1, 1, 1, 2), 12.0),
                (key(1, 1, 2, 1), 9.0),
                (key(1, 1, 2, 2), 41.0),
                (key(1, 1, 1, -1), 6.0),
                (key(1, 1, -1, 2), 4.0),
                (key(1, 1, -1, -1), 3.0),
                (key(1, 0, 1, -1), 11.0),
                (key(1, 0, 2, -1), 14.0),
                (key(1, 0, -1, -1), 2.0),
                (key(0, 1, -1, 1), 17.0),
                (key(0, 1, -1, 2), 21.0),
                (key(0, 1, -1, -1), 3.0),
            ],
        )
        .unwrap();
        let cd = build_standard_cd(&data).unwrap();
        (data, cd)
    }

    #[test]
    fn run_em_converges_on_a_small_instance() {
        let (data, cd) = small_instance();
        let outcome = run_em(
            &data,
            &cd,
            &EmOptions::default(),
            &SolverOptions::default(),
        )
        .unwrap();
        assert!(outcome.trace.converged);
        assert!(outcome.trace.iterations() >= 2);

        // observed mass is conserved inside the covered region
        let observed_total = data.total();
        let covered_total: f64 = cd
            .covered_mask()
            .iter()
            .zip(outcome.table.values())
            .filter(|(&c, _)| c)
            .map(|(_, &v)| v)
            .sum();
        assert!((covered_total - observed_total).abs() < 1e-6 * observed_total);

        // the output is a fixed point of one more sweep
        let again = em_step(&data, &cd, &outcome.table, &SolverOptions::default()).unwrap();
        assert!(max_rel_change(again.values(), outcome.table.values()) < 1e-6);

        // the returned params generate the returned table
        let means = ue(&outcome.params).unwrap();
        let regenerated = dist(&data, &cd, &means).unwrap();
        assert_eq!(regenerated.values(), outcome.table.values());
    }

    #[test]
    fn trace_loglik_is_nondecreasing() {
        let (data, cd) = small_instance();
        for init in [EmInit::AllOnes, EmInit::ProportionalSpread] {
            let outcome = run_em(
                &data,
                &cd,
                &EmOptions {
                    init,
                    ..EmOptions::default()
                },
                &SolverOptions::default(),
            )
            .unwrap();
            let lls: Vec<f64> = outcome.trace.records.iter().map(|r| r.loglik).collect();
            for pair in lls.windows(2) {
                let slack = 1e-8 * (1.0 + pair[0].abs());
                assert!(
                    pair[1] >= pair[0] - slack,
                    "log likelihood decreased: {} -> {}",
                    pair[0],
                    pair[1]
                );
            }
        }
    }

    #[test]
    fn both_inits_reach_the_same_fixed_point() {
        let (data, cd) = small_instance();
        let solver = SolverOptions::default();
        let ones = run_em(&data, &cd, &EmOptions::default(), &solver).unwrap();
        let spread = run_em(
            &data,
            &cd,
            &EmOptions {
                init: EmInit::ProportionalSpread,
                ..EmOptions::default()
            },
            &solver,
        )
        .unwrap();
        assert!(max_rel_change(spread.table.values(), ones.table.values()) < 1e-6);
    }

    #[test]
    fn option_validation() {
        let (data, cd) = small_instance();
        let solver = SolverOptions::default();
        assert!(run_em(
            &data,
            &cd,
            &EmOptions {
                tol: f64::NAN,
                ..EmOptions::default()
            },
            &solver
        )
        .is_err());
        assert!(run_em(
            &data,
            &cd,
            &EmOptions {
                max_iterations: 0,
                ..EmOptions::default()
            },
            &solver
        )
        .is_err());
    }
}
