//! Synthetic instance generation for testing and benchmarks.
//!
//! A simulated instance is built in three stages: draw model parameters
//! with the intercept shifted so the expected population hits a target,
//! draw a true table of Poisson counts from the implied means, then push
//! each true count through independent missingness: every unit loses its
//! A category with one rate and its B category with another, and the
//! unobservable quadrant is dropped entirely. All randomness is seeded, so
//! an instance is a pure function of its spec.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Poisson, Uniform};

use crate::cd::build_standard_cd;
use crate::error::{Error, Result};
use crate::regression::{ue, ParamVector};
use crate::table::{full_indices, DataIndex, Dims, FullTable, ObservedData};
use crate::validate::validate_positive;

/// Name of the generator, recorded in run metadata.
pub const GENERATOR: &str = "chacha8";

/// Attempts before instance generation gives up on the witness conditions.
const MAX_ATTEMPTS: usize = 16;

/// Means below this draw an exact zero instead of a degenerate Poisson.
const MIN_POISSON_MEAN: f64 = 1e-12;

/// Simulation spec; an instance is fully determined by it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimSpec {
    pub dims: Dims,
    pub seed: u64,
    /// Parameters are drawn uniformly from `[lambda_min, lambda_max)`.
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Probability that a unit's A category is unrecorded.
    pub missing_rate_a: f64,
    /// Probability that a unit's B category is unrecorded.
    pub missing_rate_b: f64,
    /// True cells are raised to at least `ceil(min_cell)` before
    /// missingness; a value of 1 or more guards the witness conditions.
    pub min_cell: f64,
    /// The intercept is shifted so the expected total population equals this.
    pub population_target: f64,
}

impl SimSpec {
    /// Defaults: seed 0, effects in `[-0.5, 0.5)`, 10% missingness on both
    /// sides, no cell floor, expected population `1e5`.
    #[must_use]
    pub fn new(dims: Dims) -> Self {
        Self {
            dims,
            seed: 0,
            lambda_min: -0.5,
            lambda_max: 0.5,
            missing_rate_a: 0.1,
            missing_rate_b: 0.1,
            min_cell: 0.0,
            population_target: 1e5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda_min.is_finite()
            || !self.lambda_max.is_finite()
            || self.lambda_min > self.lambda_max
        {
            return Err(Error::InvalidInput(format!(
                "lambda range must be finite with lambda_min <= lambda_max, \
                 got [{}, {}]",
                self.lambda_min, self.lambda_max
            )));
        }
        for (name, rate) in [
            ("missing_rate_a", self.missing_rate_a),
            ("missing_rate_b", self.missing_rate_b),
        ] {
            if !rate.is_finite() || !(0.0..=1.0).contains(&rate) {
                return Err(Error::InvalidInput(format!(
                    "{name} must be in [0, 1], got {rate}"
                )));
            }
        }
        if !self.min_cell.is_finite() || self.min_cell < 0.0 {
            return Err(Error::InvalidInput(format!(
                "min_cell must be finite and nonnegative, got {}",
                self.min_cell
            )));
        }
        if !self.population_target.is_finite() || self.population_target <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "population_target must be positive, got {}",
                self.population_target
            )));
        }
        Ok(())
    }
}

/// Draws model parameters from the spec, one uniform draw per parameter in
/// layout order, then shifts the intercept so `sum_v exp(eta_v)` equals the
/// population target exactly.
pub fn gen_params(spec: &SimSpec) -> Result<ParamVector> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let p = spec.dims.n_params();
    let mut values = Vec::with_capacity(p);
    if spec.lambda_min == spec.lambda_max {
        values.resize(p, spec.lambda_min);
    } else {
        let dist = Uniform::new(spec.lambda_min, spec.lambda_max)
            .map_err(|e| Error::InvalidInput(format!("bad lambda range: {e}")))?;
        for _ in 0..p {
            values.push(dist.sample(&mut rng));
        }
    }

    let params = ParamVector::from_values(spec.dims, values.clone())?;
    let mass = ue(&params)?.total();
    values[0] += (spec.population_target / mass).ln();
    ParamVector::from_values(spec.dims, values)
}

/// Draws a true table: each cell an independent Poisson count at the
/// parameterized mean. Counts are integral values stored as `f64`.
pub fn gen_truth(params: &ParamVector, seed: u64) -> Result<FullTable> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = ue(params)?;
    let mut values = Vec::with_capacity(means.values().len());
    for &mean in means.values() {
        if mean < MIN_POISSON_MEAN {
            values.push(0.0);
            continue;
        }
        let draw: f64 = Poisson::new(mean)
            .map_err(|e| Error::InvalidInput(format!("bad poisson mean {mean}: {e}")))?
            .sample(&mut rng);
        values.push(draw);
    }
    FullTable::from_values(params.dims(), values)
}

/// Pushes a true table through independent missingness and drops the
/// unobservable quadrant. Uses the spec's rates and `seed + 2`.
///
/// Within the matched quadrant each cell is split four ways (A kept or
/// lost, B kept or lost); single-source quadrants only ever lose their own
/// category. Only keys with positive counts are emitted. The total
/// observed count equals the true count outside the `(0,0)` quadrant.
pub fn apply_missingness(truth: &FullTable, spec: &SimSpec) -> Result<ObservedData> {
    spec.validate()?;
    apply_missingness_seeded(
        truth,
        spec.missing_rate_a,
        spec.missing_rate_b,
        spec.seed.wrapping_add(2),
    )
}

fn apply_missingness_seeded(
    truth: &FullTable,
    rate_a: f64,
    rate_b: f64,
    seed: u64,
) -> Result<ObservedData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = truth.dims();
    let mut counts: std::collections::BTreeMap<DataIndex, f64> =
        std::collections::BTreeMap::new();
    let mut add = |key: DataIndex, amount: u64| {
        if amount > 0 {
            *counts.entry(key).or_insert(0.0) += amount as f64;
        }
    };

    let binom = |n: u64, p: f64, rng: &mut ChaCha8Rng| -> Result<u64> {
        if n == 0 || p <= 0.0 {
            return Ok(0);
        }
        if p >= 1.0 {
            return Ok(n);
        }
        Ok(Binomial::new(n, p)
            .map_err(|e| Error::InvalidInput(format!("bad binomial: {e}")))?
            .sample(rng))
    };

    for idx in full_indices(dims) {
        let m = truth.get(&idx).round() as u64;
        if m == 0 {
            continue;
        }
        let (k, l) = (idx.k as i64, idx.l as i64);
        match (idx.i, idx.j) {
            (1, 1) => {
                let lose_a = binom(m, rate_a, &mut rng)?;
                let keep_a = m - lose_a;
                let keep_a_lose_b = binom(keep_a, rate_b, &mut rng)?;
                let lose_a_lose_b = binom(lose_a, rate_b, &mut rng)?;
                add(DataIndex::new(1, 1, k, l)?, keep_a - keep_a_lose_b);
                add(DataIndex::new(1, 1, k, -1)?, keep_a_lose_b);
                add(DataIndex::new(1, 1, -1, l)?, lose_a - lose_a_lose_b);
                add(DataIndex::new(1, 1, -1, -1)?, lose_a_lose_b);
            }
            (1, 0) => {
                // B category is never observed here; only A can be lost
                let lose_a = binom(m, rate_a, &mut rng)?;
                add(DataIndex::new(1, 0, k, -1)?, m - lose_a);
                add(DataIndex::new(1, 0, -1, -1)?, lose_a);
            }
            (0, 1) => {
                let lose_b = binom(m, rate_b, &mut rng)?;
                add(DataIndex::new(0, 1, -1, l)?, m - lose_b);
                add(DataIndex::new(0, 1, -1, -1)?, lose_b);
            }
            _ => {} // (0,0) is unobservable
        }
    }

    ObservedData::new(dims, counts)
}

/// A generated instance with everything needed to score an estimator.
#[derive(Debug, Clone)]
pub struct SimInstance {
    pub spec: SimSpec,
    pub params: ParamVector,
    pub truth: FullTable,
    pub observed: ObservedData,
    /// Draw attempts needed to satisfy the witness conditions.
    pub attempts: usize,
}

/// Generates a full instance: parameters from `seed`, truth from
/// `seed + 1`, missingness from `seed + 2`. When the observed data fails
/// the positive witness conditions under the standard correspondence, the
/// truth and missingness draws are retried with shifted sub-seeds, up to a
/// small bound.
pub fn gen_instance(spec: &SimSpec) -> Result<SimInstance> {
    spec.validate()?;
    let params = gen_params(spec)?;
    let floor = spec.min_cell.ceil();

    for attempt in 0..MAX_ATTEMPTS {
        let shift = 1000 * attempt as u64;
        let mut truth = gen_truth(&params, spec.seed.wrapping_add(1).wrapping_add(shift))?;
        if floor > 0.0 {
            for v in truth.values_mut() {
                if *v < floor {
                    *v = floor;
                }
            }
        }
        let observed = apply_missingness_seeded(
            &truth,
            spec.missing_rate_a,
            spec.missing_rate_b,
            spec.seed.wrapping_add(2).wrapping_add(shift),
        )?;
        if observed.is_empty() {
            continue;
        }
        let cd = build_standard_cd(&observed)?;
        if validate_positive(&cd, &observed).all_pass() {
            return Ok(SimInstance {
                spec: *spec,
                params,
                truth,
                observed,
                attempts: attempt + 1,
            });
        }
    }
    Err(Error::InvalidInput(format!(
        "no draw satisfied the positive witness conditions after \
         {MAX_ATTEMPTS} attempts; raise min_cell or lower the missing rates"
    )))
}
