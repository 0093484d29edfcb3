//! Structural properties of the redistribution maps, the regression, and
//! the simulator, exercised over many seeded random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dse_core::cd::{build_standard_cd, CdMap};
use dse_core::em::{dist, run_em, EmOptions};
use dse_core::fast::{dist_a0, dist_b0, dist_match, iterate_fixpoint, run_fast, FixpointOptions};
use dse_core::regression::{newton, pr, ue, Design, ParamVector, SolverOptions};
use dse_core::simulate::{gen_instance, SimSpec};
use dse_core::table::{full_indices, max_rel_change, DataIndex, Dims, FullIndex, FullTable, ObservedData};
use dse_core::validate::{check_op1, validate_structural};

fn dims(a: usize, b: usize) -> Dims {
    Dims::new(a, b).unwrap()
}

fn key(i: u8, j: u8, k: i64, l: i64) -> DataIndex {
    DataIndex::new(i, j, k, l).unwrap()
}

/// Random observed data over all standard missing-code patterns. Every
/// single-source row and column witness is present with positive count so
/// the marginal fixed points behave well.
fn random_data(rng: &mut ChaCha8Rng, d: Dims) -> ObservedData {
    let mut entries = Vec::new();
    let push = |entries: &mut Vec<(DataIndex, f64)>, k: DataIndex, c: f64| {
        if c > 0.0 {
            entries.push((k, c));
        }
    };
    for k in 1..=d.n_a() as i64 {
        for l in 1..=d.n_b() as i64 {
            if rng.random_bool(0.8) {
                push(&mut entries, key(1, 1, k, l), rng.random_range(1.0..60.0));
            }
        }
        if rng.random_bool(0.6) {
            push(&mut entries, key(1, 1, k, -1), rng.random_range(0.0..20.0));
        }
    }
    for l in 1..=d.n_b() as i64 {
        if rng.random_bool(0.6) {
            push(&mut entries, key(1, 1, -1, l), rng.random_range(0.0..20.0));
        }
    }
    if rng.random_bool(0.7) {
        push(&mut entries, key(1, 1, -1, -1), rng.random_range(0.0..10.0));
    }
    for k in 1..=d.n_a() as i64 {
        push(&mut entries, key(1, 0, k, -1), rng.random_range(1.0..40.0));
    }
    push(&mut entries, key(1, 0, -1, -1), rng.random_range(0.0..25.0));
    for l in 1..=d.n_b() as i64 {
        push(&mut entries, key(0, 1, -1, l), rng.random_range(1.0..40.0));
    }
    push(&mut entries, key(0, 1, -1, -1), rng.random_range(0.0..25.0));
    ObservedData::new(d, entries).unwrap()
}

fn random_table(rng: &mut ChaCha8Rng, d: Dims) -> FullTable {
    let values: Vec<f64> = (0..d.cells())
        .map(|_| rng.random_range(0.05..8.0))
        .collect();
    FullTable::from_values(d, values).unwrap()
}

/// Marginalizing after a full redistribution equals redistributing the
/// marginals: row totals commute with the row-total map, column totals with
/// the column-total map, and the matched block with the block map.
#[test]
fn redistribution_commutes_with_marginalization() {
    let mut checked = 0;
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = dims(rng.random_range(1..=4), rng.random_range(1..=4));
        let data = random_data(&mut rng, d);
        let cd = build_standard_cd(&data).unwrap();
        let table = random_table(&mut rng, d);

        let full = dist(&data, &cd, &table).unwrap();

        let rows_of_dist = full.row_totals();
        let dist_of_rows = dist_b0(&data, &cd, &table.row_totals()).unwrap();
        assert!(
            max_rel_change(&rows_of_dist, &dist_of_rows) < 1e-12,
            "seed {seed}: row totals do not commute"
        );

        let cols_of_dist = full.col_totals();
        let dist_of_cols = dist_a0(&data, &cd, &table.col_totals()).unwrap();
        assert!(
            max_rel_change(&cols_of_dist, &dist_of_cols) < 1e-12,
            "seed {seed}: column totals do not commute"
        );

        let block_of_dist = full.match_block().to_vec();
        let dist_of_block = dist_match(&data, &cd, table.match_block()).unwrap();
        assert!(
            max_rel_change(&block_of_dist, &dist_of_block) < 1e-12,
            "seed {seed}: matched block does not commute"
        );
        checked += 1;
    }
    assert_eq!(checked, 200);
}

/// When the row totals are a fixed point of the row-total map, a full
/// redistribution leaves every cell of the A-only quadrant unchanged,
/// whatever the within-row split.
#[test]
fn marginal_fixed_points_freeze_cells() {
    let mut checked = 0;
    for seed in 0..120u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let d = dims(rng.random_range(1..=4), rng.random_range(1..=4));
        let data = random_data(&mut rng, d);
        let cd = build_standard_cd(&data).unwrap();

        let tight = FixpointOptions {
            tol: 1e-14,
            max_iterations: 100_000,
            delta_clamp: 0.0,
        };
        let start = vec![1.0; d.n_a()];
        let (rows, trace) =
            iterate_fixpoint(|cur| dist_b0(&data, &cd, cur), start, &tight).unwrap();
        assert!(trace.converged, "seed {seed}: rows fixed point unconverged");

        // arbitrary positive within-row split consistent with those totals
        let mut table = random_table(&mut rng, d);
        for k in 1..=d.n_a() {
            let weights: Vec<f64> =
                (0..d.n_b()).map(|_| rng.random_range(0.2..3.0)).collect();
            let wsum: f64 = weights.iter().sum();
            for l in 1..=d.n_b() {
                table.set(
                    &FullIndex::new(1, 0, k, l).unwrap(),
                    rows[k - 1] * weights[l - 1] / wsum,
                );
            }
        }

        let out = dist(&data, &cd, &table).unwrap();
        for idx in full_indices(d).filter(|v| (v.i, v.j) == (1, 0)) {
            let before = table.get(&idx);
            let after = out.get(&idx);
            assert!(
                (after - before).abs() / (1.0 + before.abs()) < 1e-12,
                "seed {seed}: cell {idx} moved {before} -> {after}"
            );
        }
        checked += 1;
    }
    assert_eq!(checked, 120);
}

/// Same freezing property for the B-only quadrant via column totals.
#[test]
fn column_fixed_points_freeze_cells() {
    for seed in 0..60u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let d = dims(rng.random_range(1..=4), rng.random_range(1..=4));
        let data = random_data(&mut rng, d);
        let cd = build_standard_cd(&data).unwrap();

        let tight = FixpointOptions {
            tol: 1e-14,
            max_iterations: 100_000,
            delta_clamp: 0.0,
        };
        let (cols, trace) = iterate_fixpoint(
            |cur| dist_a0(&data, &cd, cur),
            vec![1.0; d.n_b()],
            &tight,
        )
        .unwrap();
        assert!(trace.converged, "seed {seed}");

        let mut table = random_table(&mut rng, d);
        for l in 1..=d.n_b() {
            let weights: Vec<f64> =
                (0..d.n_a()).map(|_| rng.random_range(0.2..3.0)).collect();
            let wsum: f64 = weights.iter().sum();
            for k in 1..=d.n_a() {
                table.set(
                    &FullIndex::new(0, 1, k, l).unwrap(),
                    cols[l - 1] * weights[k - 1] / wsum,
                );
            }
        }

        let out = dist(&data, &cd, &table).unwrap();
        for idx in full_indices(d).filter(|v| (v.i, v.j) == (0, 1)) {
            assert!(
                (out.get(&idx) - table.get(&idx)).abs() / (1.0 + table.get(&idx)) < 1e-12,
                "seed {seed}: cell {idx} moved"
            );
        }
    }
}

/// Tables inside the model family are recovered exactly: fitting the means
/// of known parameters returns those parameters.
#[test]
fn model_tables_recover_their_parameters() {
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let (n_a, n_b) = match seed {
            47 => (20, 20),
            48 => (1, 17),
            49 => (19, 2),
            s if s % 5 == 4 => (
                rng.random_range(7..=12),
                rng.random_range(7..=12),
            ),
            _ => (rng.random_range(1..=6), rng.random_range(1..=6)),
        };
        let d = dims(n_a, n_b);
        let values: Vec<f64> = (0..d.n_params())
            .map(|_| rng.random_range(-5.0..5.0))
            .collect();
        let truth = ParamVector::from_values(d, values).unwrap();
        let table = ue(&truth).unwrap();

        let fitted = pr(&table, &SolverOptions::default()).unwrap();
        let err = fitted
            .values()
            .iter()
            .zip(truth.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-8, "seed {seed} ({n_a}x{n_b}): recovery error {err}");
    }
}

/// The iterative path (probe disabled) agrees with the probe path.
#[test]
fn newton_path_recovers_parameters_too() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
        let d = dims(rng.random_range(1..=4), rng.random_range(1..=4));
        let values: Vec<f64> = (0..d.n_params())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let truth = ParamVector::from_values(d, values).unwrap();
        let table = ue(&truth).unwrap();

        let opts = SolverOptions {
            exact_fit_probe: false,
            ..SolverOptions::default()
        };
        let fitted = pr(&table, &opts).unwrap();
        let err = fitted
            .values()
            .iter()
            .zip(truth.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "seed {seed}: iterative recovery error {err}");
    }
}

/// Independent rank oracle: Gaussian elimination with partial pivoting.
fn elimination_rank(m: &nalgebra::DMatrix<f64>) -> usize {
    let rows = m.nrows();
    let cols = m.ncols();
    let mut a: Vec<Vec<f64>> = (0..rows)
        .map(|r| (0..cols).map(|c| m[(r, c)]).collect())
        .collect();
    let mut rank = 0;
    for col in 0..cols {
        let pivot = (rank..rows)
            .max_by(|&x, &y| a[x][col].abs().partial_cmp(&a[y][col].abs()).unwrap());
        let Some(p) = pivot else { break };
        if a[p][col].abs() <= 1e-9 {
            continue;
        }
        a.swap(rank, p);
        for r in rank + 1..rows {
            let (head, tail) = a.split_at_mut(r);
            let (pivot_row, row) = (&head[rank], &mut tail[0]);
            let f = row[col] / pivot_row[col];
            if f != 0.0 {
                for (x, &pv) in row[col..].iter_mut().zip(&pivot_row[col..]) {
                    *x -= f * pv;
                }
            }
        }
        rank += 1;
        if rank == rows {
            break;
        }
    }
    rank
}

/// The design is full column rank for every grid size the estimators
/// accept in practice, certified two ways.
#[test]
fn design_rank_matches_elimination_oracle() {
    // construction succeeds (Gram Cholesky certificate) on the whole grid
    for n_a in 1..=20 {
        for n_b in 1..=20 {
            let design = Design::new(dims(n_a, n_b)).unwrap();
            assert_eq!(design.n_params(), n_a * n_b + n_a + n_b);
        }
    }
    // independent elimination oracle on a cross-section
    for (n_a, n_b) in [
        (1, 1),
        (1, 7),
        (6, 1),
        (2, 2),
        (3, 5),
        (8, 8),
        (12, 5),
        (17, 13),
        (20, 20),
    ] {
        let design = Design::new(dims(n_a, n_b)).unwrap();
        let rank = elimination_rank(&design.to_matrix());
        assert_eq!(
            rank,
            design.n_params(),
            "{n_a}x{n_b}: elimination rank disagrees"
        );
    }
}

/// Random correspondence maps: arbitrary nonempty target sets, no
/// structural soundness implied.
fn random_cd(rng: &mut ChaCha8Rng, d: Dims, data: &ObservedData) -> CdMap {
    let cells: Vec<FullIndex> = full_indices(d).collect();
    let entries: Vec<(DataIndex, Vec<FullIndex>)> = data
        .iter()
        .map(|(k, _)| {
            let n_targets = rng.random_range(1..=4.min(cells.len()));
            let targets: Vec<FullIndex> = (0..n_targets)
                .map(|_| cells[rng.random_range(0..cells.len())])
                .collect();
            (*k, targets)
        })
        .collect();
    CdMap::from_entries(d, entries).unwrap()
}

/// Redistribution preserves feasibility: if every positive count has a
/// positive candidate, the step succeeds and its output has the same
/// property. Holds for arbitrary correspondence maps, sound or not.
#[test]
fn redistribution_preserves_feasibility() {
    let mut checked = 0;
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let d = dims(rng.random_range(1..=4), rng.random_range(1..=4));
        let data = random_data(&mut rng, d);
        let cd = random_cd(&mut rng, d, &data);

        // build a table with plenty of zeros but one live candidate per
        // positive key
        let mut table = FullTable::filled(d, 0.0);
        for idx in full_indices(d) {
            if rng.random_bool(0.35) {
                table.set(&idx, rng.random_range(0.1..4.0));
            }
        }
        for (k, count) in data.iter() {
            if count <= 0.0 {
                continue;
            }
            let entry = cd.get(k).unwrap();
            let targets = entry.targets();
            let pick = targets[rng.random_range(0..targets.len())];
            if table.get(&pick) == 0.0 {
                table.set(&pick, rng.random_range(0.1..4.0));
            }
        }
        assert!(check_op1(&data, &cd, &table));

        let out = dist(&data, &cd, &table).unwrap();
        assert!(
            check_op1(&data, &cd, &out),
            "seed {seed}: feasibility lost after redistribution"
        );
        // and total mass over covered cells equals the observed total
        let covered_mass: f64 = cd
            .covered_mask()
            .iter()
            .zip(out.values())
            .filter(|(&c, _)| c)
            .map(|(_, &v)| v)
            .sum();
        assert!(
            (covered_mass - data.total()).abs() <= 1e-9 * (1.0 + data.total()),
            "seed {seed}: covered mass {covered_mass} vs observed {}",
            data.total()
        );
        checked += 1;
    }
    assert_eq!(checked, 200);
}

/// The two estimators agree cellwise on simulated instances that satisfy
/// the assumptions.
#[test]
fn estimators_agree_on_simulated_instances() {
    for seed in 0..8u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(6000 + seed);
        let spec = SimSpec {
            seed: 100 + seed,
            min_cell: 1.0,
            population_target: 3e4,
            missing_rate_a: rng.random_range(0.05..0.3),
            missing_rate_b: rng.random_range(0.05..0.3),
            ..SimSpec::new(dims(
                rng.random_range(2..=4),
                rng.random_range(2..=4),
            ))
        };
        let instance = gen_instance(&spec).unwrap();
        let cd = build_standard_cd(&instance.observed).unwrap();
        assert!(validate_structural(&cd).all_pass());

        let solver = SolverOptions::default();
        let em = run_em(&instance.observed, &cd, &EmOptions::default(), &solver).unwrap();
        assert!(em.trace.converged, "seed {seed}: EM unconverged");
        let fast = run_fast(
            &instance.observed,
            &cd,
            &FixpointOptions::default(),
            &solver,
        )
        .unwrap();

        let diff = max_rel_change(fast.table.values(), em.table.values());
        assert!(diff < 1e-6, "seed {seed}: methods disagree by {diff}");

        // within-row and within-column shares match between the matched
        // block and the single-source quadrants
        let t = &fast.table;
        for k in 1..=spec.dims.n_a() {
            let ratios: Vec<f64> = (1..=spec.dims.n_b())
                .map(|l| {
                    t.get(&FullIndex::new(1, 0, k, l).unwrap())
                        / t.get(&FullIndex::new(1, 1, k, l).unwrap())
                })
                .collect();
            for r in &ratios {
                assert!(
                    (r - ratios[0]).abs() <= 1e-8 * (1.0 + ratios[0].abs()),
                    "seed {seed}: row {k} shares not proportional"
                );
            }
        }
    }
}

/// EM trace log likelihood is non-decreasing on simulated instances.
#[test]
fn em_loglik_is_monotone_on_simulated_instances() {
    for seed in 0..10u64 {
        let spec = SimSpec {
            seed: 300 + seed,
            min_cell: 1.0,
            population_target: 1e4,
            missing_rate_a: 0.2,
            missing_rate_b: 0.15,
            ..SimSpec::new(dims(2 + (seed as usize % 3), 2 + (seed as usize % 2)))
        };
        let instance = gen_instance(&spec).unwrap();
        let cd = build_standard_cd(&instance.observed).unwrap();
        let outcome = run_em(
            &instance.observed,
            &cd,
            &EmOptions::default(),
            &SolverOptions::default(),
        )
        .unwrap();
        let lls: Vec<f64> = outcome.trace.records.iter().map(|r| r.loglik).collect();
        for (pos, pair) in lls.windows(2).enumerate() {
            let slack = 1e-8 * (1.0 + pair[0].abs());
            assert!(
                pair[1] >= pair[0] - slack,
                "seed {seed}: loglik decreased at sweep {}: {} -> {}",
                pos + 1,
                pair[0],
                pair[1]
            );
        }
    }
}

/// Simulated truth mass is conserved through missingness for many seeds.
#[test]
fn missingness_conserves_mass_across_seeds() {
    use dse_core::simulate::{apply_missingness, gen_params, gen_truth};
    for seed in 0..50u64 {
        let spec = SimSpec {
            seed,
            population_target: 5e3,
            ..SimSpec::new(dims(3, 3))
        };
        let params = gen_params(&spec).unwrap();
        let truth = gen_truth(&params, spec.seed.wrapping_add(1)).unwrap();
        let observed = apply_missingness(&truth, &spec).unwrap();
        let observable = truth.total() - truth.quadrant_total(0, 0);
        assert!(
            (observed.total() - observable).abs() < 1e-9,
            "seed {seed}: mass not conserved"
        );
    }
}

/// Exact-fit tables pass through `newton` with zero iterations, and the
/// solver reports it.
#[test]
fn probe_short_circuits_on_model_tables() {
    let d = dims(4, 3);
    let design = Design::new(d).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7000);
    let values: Vec<f64> = (0..d.n_params())
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    let truth = ParamVector::from_values(d, values).unwrap();
    let table = ue(&truth).unwrap();
    let (_, stats) = newton(&design, &table, &SolverOptions::default()).unwrap();
    assert!(stats.exact_fit);
    assert_eq!(stats.iterations, 0);

    // perturbing one cell breaks the exact fit and the probe declines
    let mut bent = table.values().to_vec();
    bent[0] *= 1.5;
    let bent = FullTable::from_values(d, bent).unwrap();
    let (_, stats) = newton(&design, &bent, &SolverOptions::default()).unwrap();
    assert!(!stats.exact_fit);
    assert!(stats.iterations > 0);
}
