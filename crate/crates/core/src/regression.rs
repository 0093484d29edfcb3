//! Saturated-with-missingness log-linear model and its Poisson regression.
//!
//! The mean of every full-table cell is `exp` of a linear predictor built
//! from dummy-coded effects: an intercept, source membership indicators,
//! category main effects with the first category as baseline, and exactly
//! the cross-source interactions (membership x other-source category, and
//! category x category). With `p = n_a*n_b + n_a + n_b` free parameters the
//! model is rich enough to reproduce any strictly positive table that
//! factorizes over quadrants, yet remains identifiable from observed data.
//!
//! Fitting maximizes the Poisson log likelihood
//! `sum_v (y_v * eta_v - exp(eta_v))` by Newton iteration with step halving.
//! When the response is strictly positive the solver first probes for an
//! exact fit: if `log y` lies in the column span of the design, the
//! least-squares solution is already the unique stationary point and Newton
//! exits at iteration zero.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::table::{full_indices, Dims, FullIndex, FullTable};

/// Largest linear predictor whose `exp` is still finite in `f64`.
pub const ETA_MAX: f64 = 709.0;

/// Max-abs residual of `log y - V lambda` below which a least-squares
/// solution counts as an exact fit.
const EXACT_FIT_TOL: f64 = 1e-10;

/// Parameter magnitude beyond which the likelihood is treated as unbounded.
/// Any table a finite optimum exists for fits comfortably inside this bound;
/// iterates only drift past it when the optimum sits at infinity.
const PARAM_BOUND: f64 = 250.0;

/// Ridge factors tried when the curvature matrix fails to factorize,
/// as multiples of its largest diagonal entry.
const RIDGE_STEPS: [f64; 4] = [0.0, 1e-12, 1e-8, 1e-4];

/// Column offsets of the parameter vector for fixed dims.
///
/// Order: intercept; in-A; in-B; A-category effects `k = 2..=n_a`;
/// B-category effects `l = 2..=n_b`; in-A x B-category `l = 2..=n_b`;
/// in-B x A-category `k = 2..=n_a`; category x category `(k, l)` both
/// from 2, row-major.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    n_a: usize,
    n_b: usize,
}

impl Layout {
    pub(crate) fn new(dims: Dims) -> Self {
        Self {
            n_a: dims.n_a(),
            n_b: dims.n_b(),
        }
    }

    pub(crate) fn intercept(&self) -> usize {
        0
    }

    pub(crate) fn in_a(&self) -> usize {
        1
    }

    pub(crate) fn in_b(&self) -> usize {
        2
    }

    /// `k` in `2..=n_a`.
    pub(crate) fn cat_a(&self, k: usize) -> usize {
        debug_assert!((2..=self.n_a).contains(&k));
        3 + (k - 2)
    }

    /// `l` in `2..=n_b`.
    pub(crate) fn cat_b(&self, l: usize) -> usize {
        debug_assert!((2..=self.n_b).contains(&l));
        3 + (self.n_a - 1) + (l - 2)
    }

    /// `l` in `2..=n_b`.
    pub(crate) fn in_a_cat_b(&self, l: usize) -> usize {
        debug_assert!((2..=self.n_b).contains(&l));
        3 + (self.n_a - 1) + (self.n_b - 1) + (l - 2)
    }

    /// `k` in `2..=n_a`.
    pub(crate) fn in_b_cat_a(&self, k: usize) -> usize {
        debug_assert!((2..=self.n_a).contains(&k));
        3 + (self.n_a - 1) + 2 * (self.n_b - 1) + (k - 2)
    }

    /// `k` in `2..=n_a`, `l` in `2..=n_b`.
    pub(crate) fn cat_ab(&self, k: usize, l: usize) -> usize {
        debug_assert!((2..=self.n_a).contains(&k) && (2..=self.n_b).contains(&l));
        3 + 2 * (self.n_a - 1) + 2 * (self.n_b - 1) + (k - 2) * (self.n_b - 1) + (l - 2)
    }

    pub(crate) fn n_params(&self) -> usize {
        self.n_a * self.n_b + self.n_a + self.n_b
    }
}

/// Columns active (indicator value 1) for one cell. Never more than eight:
/// intercept, two memberships, two category effects, two mixed
/// interactions, one category pair.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ActiveCols {
    cols: [usize; 8],
    len: u8,
}

impl ActiveCols {
    pub(crate) fn as_slice(&self) -> &[usize] {
        &self.cols[..self.len as usize]
    }
}

pub(crate) fn active_columns(idx: &FullIndex, layout: &Layout) -> ActiveCols {
    let mut cols = [0usize; 8];
    let mut len = 0usize;
    let mut push = |c: usize| {
        cols[len] = c;
        len += 1;
    };
    push(layout.intercept());
    if idx.i == 1 {
        push(layout.in_a());
    }
    if idx.j == 1 {
        push(layout.in_b());
    }
    if idx.k >= 2 {
        push(layout.cat_a(idx.k));
    }
    if idx.l >= 2 {
        push(layout.cat_b(idx.l));
    }
    if idx.i == 1 && idx.l >= 2 {
        push(layout.in_a_cat_b(idx.l));
    }
    if idx.j == 1 && idx.k >= 2 {
        push(layout.in_b_cat_a(idx.k));
    }
    if idx.k >= 2 && idx.l >= 2 {
        push(layout.cat_ab(idx.k, idx.l));
    }
    ActiveCols {
        cols,
        len: len as u8,
    }
}

/// The design row of one cell as a dense 0/1 vector of length `n_params`.
#[must_use]
pub fn vm_row(idx: &FullIndex, dims: Dims) -> Vec<f64> {
    assert!(idx.in_bounds(dims), "index {idx} out of bounds for {dims}");
    let layout = Layout::new(dims);
    let mut row = vec![0.0; layout.n_params()];
    for &c in active_columns(idx, &layout).as_slice() {
        row[c] = 1.0;
    }
    row
}

/// Model parameters laid out per [`Layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    dims: Dims,
    values: Vec<f64>,
}

impl ParamVector {
    #[must_use]
    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            values: vec![0.0; dims.n_params()],
        }
    }

    /// Values must be finite and match the parameter count for `dims`.
    pub fn from_values(dims: Dims, values: Vec<f64>) -> Result<Self> {
        if values.len() != dims.n_params() {
            return Err(Error::InvalidInput(format!(
                "parameter vector for dims {dims} needs {} values, got {}",
                dims.n_params(),
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "parameter {pos} is not finite: {}",
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

    #[must_use]
    pub fn intercept(&self) -> f64 {
        self.values[Layout::new(self.dims).intercept()]
    }

    #[must_use]
    pub fn in_a(&self) -> f64 {
        self.values[Layout::new(self.dims).in_a()]
    }

    #[must_use]
    pub fn in_b(&self) -> f64 {
        self.values[Layout::new(self.dims).in_b()]
    }

    /// Effect of A category `k`, zero for the baseline `k = 1`.
    #[must_use]
    pub fn cat_a(&self, k: usize) -> f64 {
        if k == 1 {
            0.0
        } else {
            self.values[Layout::new(self.dims).cat_a(k)]
        }
    }

    /// Effect of B category `l`, zero for the baseline `l = 1`.
    #[must_use]
    pub fn cat_b(&self, l: usize) -> f64 {
        if l == 1 {
            0.0
        } else {
            self.values[Layout::new(self.dims).cat_b(l)]
        }
    }

    #[must_use]
    pub fn in_a_cat_b(&self, l: usize) -> f64 {
        if l == 1 {
            0.0
        } else {
            self.values[Layout::new(self.dims).in_a_cat_b(l)]
        }
    }

    #[must_use]
    pub fn in_b_cat_a(&self, k: usize) -> f64 {
        if k == 1 {
            0.0
        } else {
            self.values[Layout::new(self.dims).in_b_cat_a(k)]
        }
    }

    #[must_use]
    pub fn cat_ab(&self, k: usize, l: usize) -> f64 {
        if k == 1 || l == 1 {
            0.0
        } else {
            self.values[Layout::new(self.dims).cat_ab(k, l)]
        }
    }

    /// Linear predictor of one cell: the sum of active parameters.
    #[must_use]
    pub fn eta(&self, idx: &FullIndex) -> f64 {
        assert!(idx.in_bounds(self.dims), "index {idx} out of bounds");
        let layout = Layout::new(self.dims);
        active_columns(idx, &layout)
            .as_slice()
            .iter()
            .map(|&c| self.values[c])
            .sum()
    }

    /// Largest absolute parameter value.
    #[must_use]
    pub fn magnitude(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Design matrix of the model for fixed dims, with its active-column lists
/// and a Cholesky factor of the Gram matrix `V^T V`.
///
/// Construction certifies full column rank: the Gram matrix of a
/// rank-deficient design is not positive definite and its Cholesky
/// factorization fails.
#[derive(Debug, Clone)]
pub struct Design {
    dims: Dims,
    layout: Layout,
    active: Vec<ActiveCols>,
    gram_chol: Cholesky<f64, Dyn>,
}

impl Design {
    pub fn new(dims: Dims) -> Result<Self> {
        let layout = Layout::new(dims);
        let p = layout.n_params();
        let active: Vec<ActiveCols> = full_indices(dims)
            .map(|idx| active_columns(&idx, &layout))
            .collect();

        let mut gram = DMatrix::<f64>::zeros(p, p);
        for cols in &active {
            for &a in cols.as_slice() {
                for &b in cols.as_slice() {
                    gram[(a, b)] += 1.0;
                }
            }
        }
        let gram_chol = Cholesky::new(gram).ok_or(Error::RankDeficient {
            n_a: dims.n_a(),
            n_b: dims.n_b(),
        })?;

        Ok(Self {
            dims,
            layout,
            active,
            gram_chol,
        })
    }

    #[must_use]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[must_use]
    pub fn n_params(&self) -> usize {
        self.layout.n_params()
    }

    pub(crate) fn active(&self) -> &[ActiveCols] {
        &self.active
    }

    /// Materializes the full 0/1 matrix, one row per cell in enumeration
    /// order. Intended for inspection and tests; the solver itself works
    /// from the active-column lists.
    #[must_use]
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let p = self.n_params();
        let mut m = DMatrix::zeros(self.dims.cells(), p);
        for (r, cols) in self.active.iter().enumerate() {
            for &c in cols.as_slice() {
                m[(r, c)] = 1.0;
            }
        }
        m
    }

    /// `V lambda`: linear predictor per cell.
    fn predictors(&self, lambda: &DVector<f64>) -> Vec<f64> {
        self.active
            .iter()
            .map(|cols| cols.as_slice().iter().map(|&c| lambda[c]).sum())
            .collect()
    }

    /// `V^T c` for a per-cell vector `c`.
    fn project(&self, c: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_params());
        for (cols, &v) in self.active.iter().zip(c) {
            for &a in cols.as_slice() {
                out[a] += v;
            }
        }
        out
    }
}

/// Mean map: cell means `exp(eta_v)` for the given parameters.
///
/// Errors with the first offending cell when a predictor exceeds
/// [`ETA_MAX`], beyond which `exp` overflows.
pub fn ue(params: &ParamVector) -> Result<FullTable> {
    let dims = params.dims();
    let layout = Layout::new(dims);
    let mut values = Vec::with_capacity(dims.cells());
    for idx in full_indices(dims) {
        let eta: f64 = active_columns(&idx, &layout)
            .as_slice()
            .iter()
            .map(|&c| params.values[c])
            .sum();
        if eta > ETA_MAX {
            return Err(Error::MeanOverflow {
                cell: idx.to_string(),
                eta,
            });
        }
        values.push(eta.exp());
    }
    FullTable::from_values(dims, values)
}

/// Poisson log likelihood `sum_v (y_v eta_v - exp(eta_v))` up to the
/// data-only constant. Returns `-inf` when a mean overflows, so callers can
/// use it directly in line searches. Panics on dims mismatch.
#[must_use]
pub fn loglik(table: &FullTable, params: &ParamVector) -> f64 {
    assert_eq!(table.dims(), params.dims(), "dims mismatch in loglik");
    let layout = Layout::new(params.dims());
    let mut ll = 0.0;
    for (idx, &y) in full_indices(table.dims()).zip(table.values()) {
        let eta: f64 = active_columns(&idx, &layout)
            .as_slice()
            .iter()
            .map(|&c| params.values[c])
            .sum();
        ll += y * eta - eta.exp();
    }
    if ll.is_nan() {
        f64::NEG_INFINITY
    } else {
        ll
    }
}

/// Gradient of [`loglik`] in `params`: `V^T (y - mu)`. Panics on dims
/// mismatch.
#[must_use]
pub fn loglik_grad(table: &FullTable, params: &ParamVector) -> Vec<f64> {
    assert_eq!(table.dims(), params.dims(), "dims mismatch in loglik_grad");
    let layout = Layout::new(params.dims());
    let mut g = vec![0.0; layout.n_params()];
    for (idx, &y) in full_indices(table.dims()).zip(table.values()) {
        let cols = active_columns(&idx, &layout);
        let eta: f64 = cols.as_slice().iter().map(|&c| params.values[c]).sum();
        let resid = y - eta.exp();
        for &c in cols.as_slice() {
            g[c] += resid;
        }
    }
    g
}

/// Hessian of [`loglik`] in `params`: `-V^T diag(mu) V`, negative definite
/// for any finite parameters because the design has full column rank.
#[must_use]
pub fn loglik_hessian(params: &ParamVector) -> DMatrix<f64> {
    let layout = Layout::new(params.dims());
    let p = layout.n_params();
    let mut h = DMatrix::zeros(p, p);
    for idx in full_indices(params.dims()) {
        let cols = active_columns(&idx, &layout);
        let mu = cols
            .as_slice()
            .iter()
            .map(|&c| params.values[c])
            .sum::<f64>()
            .exp();
        for &a in cols.as_slice() {
            for &b in cols.as_slice() {
                h[(a, b)] -= mu;
            }
        }
    }
    h
}

/// Options for the Newton solver.
#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// Gradient tolerance, relative to the response scale: the solver stops
    /// when `max|g| <= grad_tol * max(1, sum y)`.
    pub grad_tol: f64,
    /// Newton iteration budget.
    pub max_iterations: usize,
    /// Step halvings allowed per iteration before the solver gives up.
    pub max_step_halvings: usize,
    /// Probe strictly positive responses for an exact fit before iterating.
    /// When `log y` lies in the design span the least-squares solution is
    /// the unique optimum and Newton exits immediately.
    pub exact_fit_probe: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-10,
            max_iterations: 100,
            max_step_halvings: 30,
            exact_fit_probe: true,
        }
    }
}

impl SolverOptions {
    fn validate(&self) -> Result<()> {
        if !self.grad_tol.is_finite() || self.grad_tol < 0.0 {
            return Err(Error::InvalidInput(format!(
                "grad_tol must be finite and nonnegative, got {}",
                self.grad_tol
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidInput(
                "max_iterations must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Solver outcome details.
#[derive(Debug, Clone, Copy)]
pub struct SolveStats {
    /// Newton iterations performed (0 when the exact-fit probe succeeded).
    pub iterations: usize,
    /// Final gradient max-norm relative to the response scale.
    pub grad_norm: f64,
    /// Whether the exact-fit probe supplied the solution.
    pub exact_fit: bool,
}

/// Fits the model to a table by maximum likelihood.
///
/// The response must be finite, nonnegative (guaranteed by [`FullTable`]),
/// and not identically zero. See [`newton`] for the iteration details.
pub fn pr(table: &FullTable, opts: &SolverOptions) -> Result<ParamVector> {
    let design = Design::new(table.dims())?;
    newton(&design, table, opts).map(|(params, _)| params)
}

/// Newton iteration with step halving on the Poisson log likelihood.
///
/// Starts from the exact-fit probe when it applies, otherwise from
/// `intercept = log(mean of positive responses + 1e-12)` and zeros. Each
/// step solves the curvature system by Cholesky (with ridge escalation on
/// failure) and halves the step until the likelihood does not decrease.
/// Iterates whose magnitude passes a fixed bound abort with a separation
/// error: the likelihood has no finite maximizer for that response pattern.
pub fn newton(
    design: &Design,
    table: &FullTable,
    opts: &SolverOptions,
) -> Result<(ParamVector, SolveStats)> {
    assert_eq!(design.dims(), table.dims(), "dims mismatch in newton");
    opts.validate()?;
    let y = table.values();
    let total: f64 = y.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidInput(
            "regression response is identically zero".into(),
        ));
    }
    let p = design.n_params();
    let tol_abs = opts.grad_tol * total.max(1.0);

    let mut exact_fit = false;
    let mut lambda = match exact_fit_start(design, y, opts) {
        Some(start) => {
            exact_fit = true;
            start
        }
        None => {
            let mut start = DVector::zeros(p);
            let positive: Vec<f64> = y.iter().copied().filter(|v| *v > 0.0).collect();
            let mean = positive.iter().sum::<f64>() / positive.len() as f64;
            start[0] = (mean + 1e-12).ln();
            start
        }
    };

    let (mut ll, mut ll_scale) = loglik_at(design, y, &lambda);
    let mut grad_norm = f64::INFINITY;

    for iter in 0..=opts.max_iterations {
        let magnitude = lambda.amax();
        if magnitude > PARAM_BOUND {
            return Err(Error::Separation { magnitude });
        }

        let (g, fisher) = grad_and_curvature(design, y, &lambda);
        grad_norm = g.amax();
        if grad_norm <= tol_abs {
            let params = ParamVector::from_values(design.dims(), lambda.data.into())
                .expect("solver iterates are finite");
            return Ok((
                params,
                SolveStats {
                    iterations: iter,
                    grad_norm: grad_norm / total.max(1.0),
                    exact_fit,
                },
            ));
        }
        if iter == opts.max_iterations {
            break;
        }

        let delta = solve_curvature(fisher, &g, iter)?;

        // Near the optimum the true likelihood gain drops below the
        // evaluation's rounding noise; noise-level dips must not reject the
        // step or the iteration freezes just above the gradient tolerance.
        // The noise bound follows the summand scale, which dominates the
        // value itself when the terms nearly cancel.
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..=opts.max_step_halvings {
            let cand = &lambda + &delta * step;
            let (cand_ll, cand_scale) = loglik_at(design, y, &cand);
            let noise = 8.0 * f64::EPSILON * (1.0 + ll_scale.max(cand_scale));
            if cand_ll >= ll - noise {
                lambda = cand;
                ll = cand_ll;
                ll_scale = cand_scale;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return Err(Error::NonConvergence {
                iterations: iter,
                grad_norm: grad_norm / total.max(1.0),
            });
        }
    }

    Err(Error::NonConvergence {
        iterations: opts.max_iterations,
        grad_norm: grad_norm / total.max(1.0),
    })
}

/// Least-squares probe: when all responses are positive and `log y` lies in
/// the design span (max-abs residual below [`EXACT_FIT_TOL`]), return the
/// least-squares coefficients after one iterative refinement pass.
fn exact_fit_start(design: &Design, y: &[f64], opts: &SolverOptions) -> Option<DVector<f64>> {
    if !opts.exact_fit_probe || y.iter().any(|v| *v <= 0.0) {
        return None;
    }
    let logy: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mut sol = design.gram_chol.solve(&design.project(&logy));

    // One refinement pass against the normal equations tightens the residual
    // to machine level when the system is consistent.
    let resid: Vec<f64> = design
        .predictors(&sol)
        .iter()
        .zip(&logy)
        .map(|(pred, target)| target - pred)
        .collect();
    sol += design.gram_chol.solve(&design.project(&resid));

    let max_resid = design
        .predictors(&sol)
        .iter()
        .zip(&logy)
        .map(|(pred, target)| (target - pred).abs())
        .fold(0.0, f64::max);
    (max_resid <= EXACT_FIT_TOL).then_some(sol)
}

/// Log likelihood at `lambda` plus the magnitude of the terms summed to
/// produce it. Near-cancelling terms can leave the value orders of magnitude
/// smaller than the summands, so rounding noise scales with the second
/// number, not the first.
fn loglik_at(design: &Design, y: &[f64], lambda: &DVector<f64>) -> (f64, f64) {
    let mut ll = 0.0;
    let mut scale = 0.0;
    for (cols, &yv) in design.active().iter().zip(y) {
        let eta: f64 = cols.as_slice().iter().map(|&c| lambda[c]).sum();
        let mu = eta.exp();
        ll += yv * eta - mu;
        scale += (yv * eta).abs() + mu;
    }
    if ll.is_nan() {
        (f64::NEG_INFINITY, scale)
    } else {
        (ll, scale)
    }
}

/// Gradient `V^T (y - mu)` and curvature `V^T diag(mu) V` in one pass.
fn grad_and_curvature(
    design: &Design,
    y: &[f64],
    lambda: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let p = design.n_params();
    let mut g = DVector::zeros(p);
    let mut fisher = DMatrix::zeros(p, p);
    for (cols, &yv) in design.active().iter().zip(y) {
        let slice = cols.as_slice();
        let eta: f64 = slice.iter().map(|&c| lambda[c]).sum();
        let mu = eta.exp();
        let resid = yv - mu;
        for &a in slice {
            g[a] += resid;
            for &b in slice {
                fisher[(a, b)] += mu;
            }
        }
    }
    (g, fisher)
}

/// Cholesky solve of `fisher * delta = g` with escalating ridge on failure.
fn solve_curvature(
    fisher: DMatrix<f64>,
    g: &DVector<f64>,
    iteration: usize,
) -> Result<DVector<f64>> {
    let max_diag = (0..fisher.nrows())
        .map(|d| fisher[(d, d)])
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    for ridge in RIDGE_STEPS {
        let mut m = fisher.clone();
        for d in 0..m.nrows() {
            m[(d, d)] += ridge * max_diag;
        }
        if let Some(chol) = Cholesky::new(m) {
            return Ok(chol.solve(g));
        }
    }
    Err(Error::HessianFactorization { iteration })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::Dims;

    fn dims(a: usize, b: usize) -> Dims {
        Dims::new(a, b).unwrap()
    }

    fn cell(i: u8, j: u8, k: usize, l: usize) -> FullIndex {
        FullIndex::new(i, j, k, l).unwrap()
    }

    #[test]
    fn layout_covers_all_parameters_exactly_once() {
        for (a, b) in [(1, 1), (1, 3), (2, 2), (3, 2), (4, 5)] {
            let layout = Layout::new(dims(a, b));
            let p = layout.n_params();
            let mut seen = vec![false; p];
            let mut mark = |c: usize| {
                assert!(!seen[c], "offset {c} assigned twice");
                seen[c] = true;
            };
            mark(layout.intercept());
            mark(layout.in_a());
            mark(layout.in_b());
            for k in 2..=a {
                mark(layout.cat_a(k));
                mark(layout.in_b_cat_a(k));
            }
            for l in 2..=b {
                mark(layout.cat_b(l));
                mark(layout.in_a_cat_b(l));
            }
            for k in 2..=a {
                for l in 2..=b {
                    mark(layout.cat_ab(k, l));
                }
            }
            assert!(seen.iter().all(|s| *s), "offsets must cover 0..{p}");
        }
    }

    #[test]
    fn design_rows_match_the_indicator_rule() {
        let d = dims(2, 2);
        let layout = Layout::new(d);
        // richest cell: all eight indicators fire
        let row = vm_row(&cell(1, 1, 2, 2), d);
        assert_eq!(row.iter().sum::<f64>(), 8.0);
        for c in [
            layout.intercept(),
            layout.in_a(),
            layout.in_b(),
            layout.cat_a(2),
            layout.cat_b(2),
            layout.in_a_cat_b(2),
            layout.in_b_cat_a(2),
            layout.cat_ab(2, 2),
        ] {
            assert_eq!(row[c], 1.0);
        }
        // poorest cell: intercept only
        let row = vm_row(&cell(0, 0, 1, 1), d);
        assert_eq!(row.iter().sum::<f64>(), 1.0);
        assert_eq!(row[layout.intercept()], 1.0);
        // mixed: membership interactions need the membership flag
        let row = vm_row(&cell(1, 0, 1, 2), d);
        assert_eq!(row.iter().sum::<f64>(), 4.0);
        assert_eq!(row[layout.in_a()], 1.0);
        assert_eq!(row[layout.cat_b(2)], 1.0);
        assert_eq!(row[layout.in_a_cat_b(2)], 1.0);
        assert_eq!(row[layout.in_b()], 0.0);
        // (0,0) rows never touch membership interactions
        let row = vm_row(&cell(0, 0, 2, 2), d);
        assert_eq!(row[layout.in_a_cat_b(2)], 0.0);
        assert_eq!(row[layout.in_b_cat_a(2)], 0.0);
        assert_eq!(row[layout.cat_ab(2, 2)], 1.0);
    }

    #[test]
    fn design_has_full_rank_for_small_grid() {
        for (a, b) in [(1, 1), (1, 4), (3, 1), (2, 2), (4, 3), (6, 6)] {
            let design = Design::new(dims(a, b)).unwrap();
            assert_eq!(design.n_params(), a * b + a + b);
            let m = design.to_matrix();
            assert_eq!(m.nrows(), 4 * a * b);
            // cross-check a couple of rows against vm_row
            for (pos, idx) in full_indices(dims(a, b)).enumerate() {
                let row: Vec<f64> = m.row(pos).iter().copied().collect();
                assert_eq!(row, vm_row(&idx, dims(a, b)));
            }
        }
    }

    #[test]
    fn zero_params_give_unit_means() {
        let params = ParamVector::zeros(dims(2, 3));
        let t = ue(&params).unwrap();
        assert!(t.values().iter().all(|&v| v == 1.0));
        assert_eq!(loglik(&t, &params), -(t.dims().cells() as f64));
    }

    #[test]
    fn ue_reports_overflow_cell() {
        let d = dims(2, 2);
        let mut vals = vec![0.0; d.n_params()];
        vals[0] = 710.0;
        let params = ParamVector::from_values(d, vals).unwrap();
        let err = ue(&params).unwrap_err();
        match err {
            Error::MeanOverflow { cell, eta } => {
                assert_eq!(cell, "(1,1,1,1)");
                assert_eq!(eta, 710.0);
            }
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn eta_matches_named_accessors() {
        let d = dims(3, 2);
        let values: Vec<f64> = (0..d.n_params()).map(|i| 0.01 * i as f64 - 0.05).collect();
        let params = ParamVector::from_values(d, values).unwrap();
        let idx = cell(1, 1, 3, 2);
        let by_parts = params.intercept()
            + params.in_a()
            + params.in_b()
            + params.cat_a(3)
            + params.cat_b(2)
            + params.in_a_cat_b(2)
            + params.in_b_cat_a(3)
            + params.cat_ab(3, 2);
        assert!((params.eta(&idx) - by_parts).abs() < 1e-15);
        // baseline categories contribute nothing
        let idx = cell(0, 1, 1, 2);
        assert!(
            (params.eta(&idx) - (params.intercept() + params.in_b() + params.cat_b(2))).abs()
                < 1e-15
        );
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let d = dims(2, 3);
        let values: Vec<f64> = (0..d.n_params())
            .map(|i| 0.07 * ((i * 2654435761) % 11) as f64 / 11.0 - 0.03)
            .collect();
        let params = ParamVector::from_values(d, values.clone()).unwrap();
        let mut table_vals = vec![0.0; d.cells()];
        for (pos, v) in table_vals.iter_mut().enumerate() {
            *v = 0.5 + (pos % 7) as f64;
        }
        let table = FullTable::from_values(d, table_vals).unwrap();

        let g = loglik_grad(&table, &params);
        let h = 1e-6;
        for c in 0..d.n_params() {
            let mut up = values.clone();
            up[c] += h;
            let mut down = values.clone();
            down[c] -= h;
            let fd = (loglik(&table, &ParamVector::from_values(d, up).unwrap())
                - loglik(&table, &ParamVector::from_values(d, down).unwrap()))
                / (2.0 * h);
            assert!(
                (g[c] - fd).abs() < 1e-4 * (1.0 + fd.abs()),
                "component {c}: analytic {} vs fd {fd}",
                g[c]
            );
        }
    }

    #[test]
    fn hessian_is_negative_definite() {
        let d = dims(2, 2);
        let values: Vec<f64> = (0..d.n_params()).map(|i| 0.02 * i as f64).collect();
        let params = ParamVector::from_values(d, values).unwrap();
        let h = loglik_hessian(&params);
        let eig = nalgebra::SymmetricEigen::new(h);
        let max_eig = eig.eigenvalues.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        assert!(max_eig < 0.0, "largest eigenvalue {max_eig} must be negative");
    }

    #[test]
    fn exact_model_tables_are_recovered_immediately() {
        let d = dims(3, 2);
        let values: Vec<f64> = (0..d.n_params())
            .map(|i| 0.4 * (((i * 37) % 13) as f64 / 13.0 - 0.5) + 2.0 * (i == 0) as u8 as f64)
            .collect();
        let truth = ParamVector::from_values(d, values).unwrap();
        let table = ue(&truth).unwrap();

        let design = Design::new(d).unwrap();
        let (fitted, stats) = newton(&design, &table, &SolverOptions::default()).unwrap();
        assert!(stats.exact_fit);
        assert_eq!(stats.iterations, 0);
        for (a, b) in fitted.values().iter().zip(truth.values()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn newton_path_agrees_without_the_probe() {
        let d = dims(2, 2);
        let values: Vec<f64> = (0..d.n_params())
            .map(|i| 0.3 * (((i * 53) % 7) as f64 / 7.0 - 0.5) + 1.5 * (i == 0) as u8 as f64)
            .collect();
        let truth = ParamVector::from_values(d, values).unwrap();
        let table = ue(&truth).unwrap();

        let opts = SolverOptions {
            exact_fit_probe: false,
            ..SolverOptions::default()
        };
        let design = Design::new(d).unwrap();
        let (fitted, stats) = newton(&design, &table, &opts).unwrap();
        assert!(!stats.exact_fit);
        assert!(stats.iterations > 0);
        for (a, b) in fitted.values().iter().zip(truth.values()) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn fit_handles_zero_cells_with_finite_optimum() {
        // One zero cell does not align with any recession direction here,
        // so the optimum stays finite.
        let d = dims(1, 1);
        let table = FullTable::from_values(d, vec![0.0, 1.0, 1.0, 1.0]).unwrap();
        let params = pr(&table, &SolverOptions::default()).unwrap();
        let fitted = ue(&params).unwrap();
        // closed form worked out by hand: mu = (1/3, 2/3, 2/3, 4/3)
        let expect = [1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 4.0 / 3.0];
        for (got, want) in fitted.values().iter().zip(expect) {
            assert!((got - want).abs() < 1e-8, "{got} vs {want}");
        }
    }

    #[test]
    fn identically_zero_response_is_rejected() {
        let d = dims(2, 2);
        let table = FullTable::filled(d, 0.0);
        assert!(matches!(
            pr(&table, &SolverOptions::default()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn separated_pattern_errors_instead_of_diverging() {
        // Whole source-A-only quadrant forced to zero: the likelihood
        // increases as in_a -> -inf, so no finite optimum exists. A zero
        // gradient tolerance keeps the solver from stopping early.
        let d = dims(1, 1);
        let table = FullTable::from_values(d, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let opts = SolverOptions {
            grad_tol: 0.0,
            max_iterations: 5000,
            ..SolverOptions::default()
        };
        match pr(&table, &opts) {
            Err(Error::Separation { magnitude }) => assert!(magnitude > 200.0),
            other => panic!("expected separation, got {other:?}"),
        }
    }

    #[test]
    fn iteration_budget_is_enforced() {
        let d = dims(2, 2);
        let mut vals = vec![1.0; d.cells()];
        vals[5] = 30.0;
        let table = FullTable::from_values(d, vals).unwrap();
        let opts = SolverOptions {
            grad_tol: 0.0,
            max_iterations: 2,
            exact_fit_probe: false,
            ..SolverOptions::default()
        };
        match pr(&table, &opts) {
            Err(Error::NonConvergence { iterations, .. }) => assert_eq!(iterations, 2),
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }
}
