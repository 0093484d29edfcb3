//! Fast estimator: three small fixed points and a closed-form assembly.
//!
//! Instead of iterating sweeps over the full table, this method solves three
//! independent redistribution fixed points on much smaller state: the
//! matched block (both sources, `n_a * n_b` cells), the row totals of the
//! A-only quadrant (`n_a` values), and the column totals of the B-only
//! quadrant (`n_b` values). The full table is then assembled in closed form:
//! within the A-only quadrant each row spreads its total proportionally to
//! the matched block's row, columns mirror this for the B-only quadrant, and
//! the unobserved quadrant follows from the cross-ratio identity
//! `y00 = y10 * y01 / y11` that every table in the model family satisfies.
//!
//! The assembled table is an exact fit of the model, so the single
//! regression at the end terminates through the exact-fit probe. Soundness
//! requires the structural assumptions plus positive witnesses; see
//! [`crate::validate`].

use crate::cd::CdMap;
use crate::error::{Error, Result};
use crate::regression::{newton, Design, ParamVector, SolveStats, SolverOptions};
use crate::table::{max_rel_change, DataIndex, Dims, FullTable, ObservedData};
use crate::validate::{validate_positive, validate_structural};

/// Options for the fixed-point iterations.
#[derive(Debug, Clone)]
pub struct FixpointOptions {
    /// Convergence threshold on the relative change between consecutive
    /// iterates (see [`max_rel_change`]).
    pub tol: f64,
    /// Iteration budget per fixed point.
    pub max_iterations: usize,
    /// When positive, every correspondence key's count is raised to at
    /// least this value before iterating. This restores the positive
    /// witness conditions on data with sparse zeros at the cost of a small,
    /// explicitly reported perturbation.
    pub delta_clamp: f64,
}

impl Default for FixpointOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iterations: 10_000,
            delta_clamp: 0.0,
        }
    }
}

impl FixpointOptions {
    fn validate(&self) -> Result<()> {
        if !self.tol.is_finite() || self.tol < 0.0 {
            return Err(Error::InvalidInput(format!(
                "tol must be finite and nonnegative, got {}",
                self.tol
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidInput(
                "max_iterations must be at least 1".into(),
            ));
        }
        if !self.delta_clamp.is_finite() || self.delta_clamp < 0.0 {
            return Err(Error::InvalidInput(format!(
                "delta_clamp must be finite and nonnegative, got {}",
                self.delta_clamp
            )));
        }
        Ok(())
    }
}

/// Outcome of one fixed-point iteration.
#[derive(Debug, Clone, Copy)]
pub struct FixpointTrace {
    pub iterations: usize,
    pub converged: bool,
    pub final_change: f64,
}

/// A redistribution step restricted to a small state vector: positions
/// covered by some key are rebuilt from the keys' counts, the rest pass
/// through.
struct SubProblem {
    len: usize,
    covered: Vec<bool>,
    /// `(count, candidate positions, key text for errors)`, positive counts only.
    terms: Vec<(f64, Vec<usize>, String)>,
}

impl SubProblem {
    fn apply(&self, cur: &[f64]) -> Result<Vec<f64>> {
        assert_eq!(cur.len(), self.len, "state length mismatch");
        let mut out: Vec<f64> = self
            .covered
            .iter()
            .zip(cur)
            .map(|(&c, &v)| if c { 0.0 } else { v })
            .collect();
        for (count, cands, key) in &self.terms {
            let denom: f64 = cands.iter().map(|&p| cur[p]).sum();
            if denom <= 0.0 {
                return Err(Error::ZeroCandidateMass {
                    key: key.clone(),
                    count: *count,
                });
            }
            let ratio = count / denom;
            for &p in cands {
                out[p] += ratio * cur[p];
            }
        }
        Ok(out)
    }
}

/// Redistribution over the matched block, as a sub-problem on `n_a * n_b`
/// row-major values. Keys outside the `(1,1)` quadrant are ignored; a
/// `(1,1)` key with a target elsewhere violates quadrant preservation.
fn match_problem(data: &ObservedData, cd: &CdMap) -> Result<SubProblem> {
    let dims = cd.dims();
    let n_b = dims.n_b();
    let len = dims.block_cells();
    let mut covered = vec![false; len];
    let mut terms = Vec::new();
    for entry in cd.entries() {
        let key = entry.key();
        if (key.i, key.j) != (1, 1) {
            continue;
        }
        let mut cands = Vec::with_capacity(entry.targets().len());
        for t in entry.targets() {
            if (t.i, t.j) != (1, 1) {
                return Err(Error::StructuralViolation {
                    name: "quadrant preservation",
                    witness: format!("key {key} maps to {t}"),
                });
            }
            cands.push((t.k - 1) * n_b + (t.l - 1));
        }
        for &p in &cands {
            covered[p] = true;
        }
        let count = data.count(key);
        if count > 0.0 {
            terms.push((count, cands, key.to_string()));
        }
    }
    Ok(SubProblem {
        len,
        covered,
        terms,
    })
}

/// Redistribution over the A-only row totals, as a sub-problem on `n_a`
/// values indexed by `k - 1`.
fn row_problem(data: &ObservedData, cd: &CdMap) -> Result<SubProblem> {
    let dims = cd.dims();
    let len = dims.n_a();
    let mut covered = vec![false; len];
    let mut terms = Vec::new();
    for entry in cd.entries() {
        let key = entry.key();
        if (key.i, key.j) != (1, 0) {
            continue;
        }
        let cands: Vec<usize> = cd
            .b0_candidates(key)
            .expect("(1,0) key")
            .into_iter()
            .map(|k| k - 1)
            .collect();
        for &p in &cands {
            covered[p] = true;
        }
        let count = data.count(key);
        if count > 0.0 {
            terms.push((count, cands, key.to_string()));
        }
    }
    Ok(SubProblem {
        len,
        covered,
        terms,
    })
}

/// Redistribution over the B-only column totals, as a sub-problem on `n_b`
/// values indexed by `l - 1`.
fn col_problem(data: &ObservedData, cd: &CdMap) -> Result<SubProblem> {
    let dims = cd.dims();
    let len = dims.n_b();
    let mut covered = vec![false; len];
    let mut terms = Vec::new();
    for entry in cd.entries() {
        let key = entry.key();
        if (key.i, key.j) != (0, 1) {
            continue;
        }
        let cands: Vec<usize> = cd
            .a0_candidates(key)
            .expect("(0,1) key")
            .into_iter()
            .map(|l| l - 1)
            .collect();
        for &p in &cands {
            covered[p] = true;
        }
        let count = data.count(key);
        if count > 0.0 {
            terms.push((count, cands, key.to_string()));
        }
    }
    Ok(SubProblem {
        len,
        covered,
        terms,
    })
}

/// One redistribution step over the matched block (`n_a * n_b` row-major
/// values). Equals the full redistribution restricted to the `(1,1)`
/// quadrant when the structural assumptions hold.
pub fn dist_match(data: &ObservedData, cd: &CdMap, block: &[f64]) -> Result<Vec<f64>> {
    check_lengths(cd.dims().block_cells(), block.len(), "matched block")?;
    match_problem(data, cd)?.apply(block)
}

/// One redistribution step over the A-only row totals (`n_a` values).
pub fn dist_b0(data: &ObservedData, cd: &CdMap, rows: &[f64]) -> Result<Vec<f64>> {
    check_lengths(cd.dims().n_a(), rows.len(), "row totals")?;
    row_problem(data, cd)?.apply(rows)
}

/// One redistribution step over the B-only column totals (`n_b` values).
pub fn dist_a0(data: &ObservedData, cd: &CdMap, cols: &[f64]) -> Result<Vec<f64>> {
    check_lengths(cd.dims().n_b(), cols.len(), "column totals")?;
    col_problem(data, cd)?.apply(cols)
}

fn check_lengths(expect: usize, got: usize, what: &str) -> Result<()> {
    if expect != got {
        return Err(Error::InvalidInput(format!(
            "{what} must have length {expect}, got {got}"
        )));
    }
    Ok(())
}

/// Iterates `step` from `init` until the relative change drops below
/// `opts.tol` or the budget runs out. A step that leaves the state
/// unchanged converges after a single application.
pub fn iterate_fixpoint(
    mut step: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    init: Vec<f64>,
    opts: &FixpointOptions,
) -> Result<(Vec<f64>, FixpointTrace)> {
    opts.validate()?;
    let mut cur = init;
    let mut change = f64::INFINITY;
    for iteration in 1..=opts.max_iterations {
        let next = step(&cur)?;
        change = max_rel_change(&next, &cur);
        cur = next;
        if change < opts.tol {
            return Ok((
                cur,
                FixpointTrace {
                    iterations: iteration,
                    converged: true,
                    final_change: change,
                },
            ));
        }
    }
    Ok((
        cur,
        FixpointTrace {
            iterations: opts.max_iterations,
            converged: false,
            final_change: change,
        },
    ))
}

/// Assembles the full table from the three solved pieces.
///
/// Requires every matched-block cell, row total, and column total to be
/// strictly positive; a zero anywhere makes the within-row or within-column
/// shares (or the cross-ratio for the unobserved quadrant) ill-defined.
pub fn reconstruct(
    dims: Dims,
    block: &[f64],
    rows: &[f64],
    cols: &[f64],
) -> Result<FullTable> {
    check_lengths(dims.block_cells(), block.len(), "matched block")?;
    check_lengths(dims.n_a(), rows.len(), "row totals")?;
    check_lengths(dims.n_b(), cols.len(), "column totals")?;
    let (n_a, n_b) = (dims.n_a(), dims.n_b());

    if let Some(pos) = block.iter().position(|v| *v <= 0.0) {
        return Err(Error::ZeroInReconstruction {
            what: "matched-block cell",
            position: format!("(1,1,{},{})", pos / n_b + 1, pos % n_b + 1),
        });
    }
    if let Some(pos) = rows.iter().position(|v| *v <= 0.0) {
        return Err(Error::ZeroInReconstruction {
            what: "row total",
            position: format!("k={}", pos + 1),
        });
    }
    if let Some(pos) = cols.iter().position(|v| *v <= 0.0) {
        return Err(Error::ZeroInReconstruction {
            what: "column total",
            position: format!("l={}", pos + 1),
        });
    }

    let row_sums: Vec<f64> = (0..n_a)
        .map(|r| block[r * n_b..(r + 1) * n_b].iter().sum())
        .collect();
    let col_sums: Vec<f64> = (0..n_b)
        .map(|c| (0..n_a).map(|r| block[r * n_b + c]).sum())
        .collect();

    let cells = dims.cells();
    let mut values = vec![0.0; cells];
    let blockc = dims.block_cells();
    for r in 0..n_a {
        for c in 0..n_b {
            let pos = r * n_b + c;
            let y11 = block[pos];
            let y10 = rows[r] * y11 / row_sums[r];
            let y01 = cols[c] * y11 / col_sums[c];
            values[pos] = y11;
            values[blockc + pos] = y10;
            values[2 * blockc + pos] = y01;
            values[3 * blockc + pos] = y10 * y01 / y11;
        }
    }
    FullTable::from_values(dims, values)
}

/// Fast estimation outcome.
#[derive(Debug, Clone)]
pub struct FastOutcome {
    pub table: FullTable,
    /// Parameters of the single regression on the assembled table.
    pub params: ParamVector,
    pub match_trace: FixpointTrace,
    pub row_trace: FixpointTrace,
    pub col_trace: FixpointTrace,
    pub solve_stats: SolveStats,
    /// Whether a delta clamp was applied to the counts.
    pub clamped: bool,
    /// Non-fatal observations: missing witnesses, unconverged fixed points,
    /// clamp summaries.
    pub warnings: Vec<String>,
}

/// Runs the fast method end to end.
///
/// Validates the structural assumptions (hard error on violation), checks
/// the positive witness conditions (warning, or clamp when requested),
/// solves the three fixed points, assembles the table, and fits the model
/// once.
pub fn run_fast(
    data: &ObservedData,
    cd: &CdMap,
    opts: &FixpointOptions,
    solver: &SolverOptions,
) -> Result<FastOutcome> {
    opts.validate()?;
    if data.dims() != cd.dims() {
        return Err(Error::InvalidInput(format!(
            "dims mismatch: data {}, correspondence {}",
            data.dims(),
            cd.dims()
        )));
    }
    for (key, _) in data.iter() {
        if !cd.contains_key(key) {
            return Err(Error::MissingCorrespondence {
                key: key.to_string(),
            });
        }
    }
    if let Some(err) = validate_structural(cd).first_error() {
        return Err(err);
    }

    let mut warnings = Vec::new();
    let positive = validate_positive(cd, data);
    if !positive.all_pass() && opts.delta_clamp == 0.0 {
        let mut missing = Vec::new();
        if let Some(c) = positive.matched_cell {
            missing.push(format!("matched cell {c}"));
        }
        if let Some(k) = positive.row {
            missing.push(format!("row k={k}"));
        }
        if let Some(l) = positive.col {
            missing.push(format!("column l={l}"));
        }
        warnings.push(format!(
            "positive witness conditions fail (first gaps: {}); \
             the reconstruction may hit zeros, consider a positive delta clamp",
            missing.join(", ")
        ));
    }

    let clamped_data;
    let data_eff = if opts.delta_clamp > 0.0 {
        let (clamped, raised) = clamp_counts(data, cd, opts.delta_clamp)?;
        if raised > 0 {
            warnings.push(format!(
                "delta clamp {} raised {raised} counts",
                opts.delta_clamp
            ));
        }
        clamped_data = clamped;
        &clamped_data
    } else {
        data
    };

    let dims = cd.dims();
    let mp = match_problem(data_eff, cd)?;
    let rp = row_problem(data_eff, cd)?;
    let cp = col_problem(data_eff, cd)?;

    let (block, match_trace) =
        iterate_fixpoint(|cur| mp.apply(cur), init_block(data_eff, cd), opts)?;
    let (rows, row_trace) = iterate_fixpoint(
        |cur| rp.apply(cur),
        init_margin(data_eff.quadrant_total(1, 0), dims.n_a()),
        opts,
    )?;
    let (cols, col_trace) = iterate_fixpoint(
        |cur| cp.apply(cur),
        init_margin(data_eff.quadrant_total(0, 1), dims.n_b()),
        opts,
    )?;
    for (name, trace) in [
        ("matched block", &match_trace),
        ("row totals", &row_trace),
        ("column totals", &col_trace),
    ] {
        if !trace.converged {
            warnings.push(format!(
                "{name} fixed point unconverged after {} iterations \
                 (final change {})",
                trace.iterations, trace.final_change
            ));
        }
    }

    let table = reconstruct(dims, &block, &rows, &cols)?;
    let design = Design::new(dims)?;
    let (params, solve_stats) = newton(&design, &table, solver)?;

    Ok(FastOutcome {
        table,
        params,
        match_trace,
        row_trace,
        col_trace,
        solve_stats,
        clamped: opts.delta_clamp > 0.0,
        warnings,
    })
}

/// Matched-block start: each `(1,1)` count split evenly over its targets.
fn init_block(data: &ObservedData, cd: &CdMap) -> Vec<f64> {
    let dims = cd.dims();
    let n_b = dims.n_b();
    let mut block = vec![0.0; dims.block_cells()];
    for entry in cd.entries() {
        let key = entry.key();
        if (key.i, key.j) != (1, 1) {
            continue;
        }
        let count = data.count(key);
        if count <= 0.0 {
            continue;
        }
        let share = count / entry.targets().len() as f64;
        for t in entry.targets() {
            if (t.i, t.j) == (1, 1) {
                block[(t.k - 1) * n_b + (t.l - 1)] += share;
            }
        }
    }
    block
}

/// Marginal start: the quadrant total spread evenly, or all ones when the
/// quadrant is empty so that pure passthrough still iterates.
fn init_margin(total: f64, len: usize) -> Vec<f64> {
    if total > 0.0 {
        vec![total / len as f64; len]
    } else {
        vec![1.0; len]
    }
}

/// Raises every correspondence key's count to at least `delta`. Returns the
/// clamped data and how many counts were raised.
fn clamp_counts(data: &ObservedData, cd: &CdMap, delta: f64) -> Result<(ObservedData, usize)> {
    let mut raised = 0usize;
    let mut entries: Vec<(DataIndex, f64)> = Vec::with_capacity(cd.len());
    for entry in cd.entries() {
        let count = data.count(entry.key());
        if count < delta {
            raised += 1;
            entries.push((*entry.key(), delta));
        } else {
            entries.push((*entry.key(), count));
        }
    }
    // data keys without correspondence entries were rejected earlier, so the
    // clamped data has exactly the correspondence key set
    Ok((ObservedData::new(data.dims(), entries)?, raised))
}
