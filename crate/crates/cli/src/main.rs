//! Command-line front end for the dual-system table estimators.
//!
//! Exit codes: 0 success, 1 assumption/validation failure, 2 numerical
//! failure, 3 parse or I/O failure.

use std::fmt::Display;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dse_core::cd::{build_standard_cd, CdMap};
use dse_core::diagnostics::fixpoint_residuals;
use dse_core::em::{run_em, EmInit, EmOptions, EmOutcome};
use dse_core::fast::{run_fast, FastOutcome, FixpointOptions};
use dse_core::io::{format_observed, format_table, parse_cd, parse_observed, parse_sim_spec};
use dse_core::regression::{loglik, SolverOptions};
use dse_core::simulate::gen_instance;
use dse_core::table::{max_rel_change, Dims, FullTable, ObservedData};
use dse_core::validate::{validate_positive, validate_structural, StructuralReport};
use dse_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dse",
    version,
    about = "Estimate full dual-system contingency tables from partially classified counts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a data file against the structural and positivity assumptions
    Validate(ValidateArgs),
    /// Estimate the full table from observed counts
    Estimate(EstimateArgs),
    /// Run both estimators and report agreement and timing
    Compare(CompareArgs),
    /// Generate a synthetic instance from a simulation spec
    Simulate(SimulateArgs),
    /// Benchmark both estimators over a grid of problem sizes
    Bench(BenchArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Em,
    Fast,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    AllOnes,
    ProportionalSpread,
}

impl From<InitArg> for EmInit {
    fn from(v: InitArg) -> Self {
        match v {
            InitArg::AllOnes => EmInit::AllOnes,
            InitArg::ProportionalSpread => EmInit::ProportionalSpread,
        }
    }
}

fn parse_dims_arg(text: &str) -> std::result::Result<Dims, String> {
    let (a, b) = text
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected AxB, got {text:?}"))?;
    let n_a: usize = a.trim().parse().map_err(|_| format!("bad row count {a:?}"))?;
    let n_b: usize = b.trim().parse().map_err(|_| format!("bad column count {b:?}"))?;
    Dims::new(n_a, n_b).map_err(|e| e.to_string())
}

#[derive(Args)]
struct InputArgs {
    /// Observed counts file (`i,j,k,l,count` CSV)
    data: PathBuf,
    /// Correspondence file; defaults to the standard missing-code expansion
    #[arg(long)]
    cd_file: Option<PathBuf>,
    /// Grid size override "AxB" when the data alone underdetermines it
    #[arg(long, value_parser = parse_dims_arg)]
    dims: Option<Dims>,
}

impl InputArgs {
    fn load(&self) -> Result<(ObservedData, CdMap)> {
        let text = fs::read_to_string(&self.data)?;
        let mut data = parse_observed(&text)?;
        if let Some(dims) = self.dims {
            let entries: Vec<_> = data.iter().map(|(k, c)| (*k, c)).collect();
            data = ObservedData::new(dims, entries)?;
        }
        let cd = match &self.cd_file {
            Some(path) => {
                let text = fs::read_to_string(path)?;
                parse_cd(&text, data.dims())?
            }
            None => build_standard_cd(&data)?,
        };
        Ok((data, cd))
    }
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    input: InputArgs,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Estimation method
    #[arg(long, value_enum, default_value_t = Method::Fast)]
    method: Method,
    /// Outer-loop convergence tolerance (method default when omitted)
    #[arg(long)]
    tol: Option<f64>,
    /// Outer-loop iteration budget (method default when omitted)
    #[arg(long)]
    max_iters: Option<usize>,
    /// Starting table for the reference method
    #[arg(long, value_enum, default_value_t = InitArg::AllOnes)]
    init: InitArg,
    /// Raise every observed count to at least this value (fast method)
    #[arg(long, default_value_t = 0.0)]
    delta_clamp: f64,
    /// Write the estimated table here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Overrides both methods' outer tolerances
    #[arg(long)]
    tol: Option<f64>,
    /// Overrides both methods' outer iteration budgets
    #[arg(long)]
    max_iters: Option<usize>,
    /// Starting table for the reference method
    #[arg(long, value_enum, default_value_t = InitArg::AllOnes)]
    init: InitArg,
    /// Raise every observed count to at least this value (fast method)
    #[arg(long, default_value_t = 0.0)]
    delta_clamp: f64,
    /// Write both tables to <prefix>.em.csv and <prefix>.fast.csv
    #[arg(long)]
    out_prefix: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulation spec file (`key=value` lines)
    spec: PathBuf,
    /// Write <prefix>.data.csv (observed) and <prefix>.truth.csv (full table)
    #[arg(long)]
    out_prefix: Option<PathBuf>,
    /// Override the spec's seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated grid sizes
    #[arg(long, default_value = "4x4,8x8,16x16")]
    grid: String,
    /// Target population per instance
    #[arg(long, default_value_t = 1e6)]
    pop: f64,
    /// Simulation seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Floor for simulated truth cells
    #[arg(long, default_value_t = 1.0)]
    min_cell: f64,
}

/// Buffered `key=value` block printed after the human-readable report.
#[derive(Default)]
struct Machine(Vec<(String, String)>);

impl Machine {
    fn push(&mut self, key: impl Into<String>, value: impl Display) {
        self.0.push((key.into(), value.to_string()));
    }

    fn print(&self) {
        println!("[machine]");
        for (k, v) in &self.0 {
            println!("{k}={v}");
        }
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Parse { .. } | Error::Io(_) | Error::InvalidInput(_) => 3,
        Error::StructuralViolation { .. }
        | Error::MissingCorrespondence { .. }
        | Error::NonStandardMissingCode { .. } => 1,
        Error::ZeroCandidateMass { .. }
        | Error::MeanOverflow { .. }
        | Error::RankDeficient { .. }
        | Error::NonConvergence { .. }
        | Error::Separation { .. }
        | Error::HessianFactorization { .. }
        | Error::ZeroInReconstruction { .. } => 2,
    }
}

fn main() {
    // The Rust runtime ignores SIGPIPE, which turns `dse ... | head` into a
    // panic on EPIPE; dying on the signal is the expected Unix behavior.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 3,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let outcome = match cli.command {
        Command::Validate(args) => cmd_validate(&args),
        Command::Estimate(args) => cmd_estimate(&args),
        Command::Compare(args) => cmd_compare(&args),
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Bench(args) => cmd_bench(&args),
    };
    match outcome {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(exit_code(&err));
        }
    }
}

fn describe_input(data: &ObservedData, input: &InputArgs, machine: &mut Machine) {
    println!("data: {}", input.data.display());
    println!(
        "dims: {}  keys: {}  observed total: {}",
        data.dims(),
        data.len(),
        data.total()
    );
    machine.push("n_a", data.dims().n_a());
    machine.push("n_b", data.dims().n_b());
    machine.push("keys", data.len());
    machine.push("observed_total", data.total());
}

fn check_line(label: &str, failure: Option<String>, machine: &mut Machine, key: &str) -> bool {
    match failure {
        None => {
            println!("  {label}: pass");
            machine.push(key, "pass");
            true
        }
        Some(witness) => {
            println!("  {label}: FAIL ({witness})");
            machine.push(key, "fail");
            false
        }
    }
}

fn cmd_validate(args: &ValidateArgs) -> Result<i32> {
    let (data, cd) = args.input.load()?;
    let mut machine = Machine::default();
    println!("validate");
    describe_input(&data, &args.input, &mut machine);
    match &args.input.cd_file {
        Some(path) => println!("correspondence: {}", path.display()),
        None => println!("correspondence: standard missing-code expansion"),
    }

    let structural = validate_structural(&cd);
    let positive = validate_positive(&cd, &data);

    println!("structural checks:");
    let mut ok = true;
    ok &= check_line(
        "quadrant preservation",
        structural
            .quadrant_preservation
            .as_ref()
            .map(|v| format!("key {} maps into {}", v.key, v.target)),
        &mut machine,
        "quadrant_preservation",
    );
    ok &= check_line(
        "unobservable quadrant",
        structural
            .unobservable_quadrant
            .as_ref()
            .map(|v| format!("key {} maps into unobservable cell {}", v.key, v.target)),
        &mut machine,
        "unobservable_quadrant",
    );
    ok &= check_line(
        "range closure",
        structural.range_closure.as_ref().map(|v| {
            format!(
                "key {} covers {} but not {}",
                v.key, v.present, v.missing
            )
        }),
        &mut machine,
        "range_closure",
    );

    println!("positivity checks:");
    ok &= check_line(
        "matched block witness",
        positive
            .matched_cell
            .map(|c| format!("no positive fully classified count for cell {c}")),
        &mut machine,
        "matched_witness",
    );
    ok &= check_line(
        "row witnesses",
        positive
            .row
            .map(|k| format!("no positive single-category count for row {k}")),
        &mut machine,
        "row_witnesses",
    );
    ok &= check_line(
        "column witnesses",
        positive
            .col
            .map(|l| format!("no positive single-category count for column {l}")),
        &mut machine,
        "col_witnesses",
    );

    println!("note: {}", StructuralReport::MODEL_NOTE);
    machine.push("ok", ok);
    machine.print();
    Ok(if ok { 0 } else { 1 })
}

fn em_options(tol: Option<f64>, max_iters: Option<usize>, init: InitArg) -> EmOptions {
    let mut opts = EmOptions {
        init: init.into(),
        ..EmOptions::default()
    };
    if let Some(tol) = tol {
        opts.tol = tol;
    }
    if let Some(iters) = max_iters {
        opts.max_iterations = iters;
    }
    opts
}

fn fast_options(tol: Option<f64>, max_iters: Option<usize>, delta_clamp: f64) -> FixpointOptions {
    let mut opts = FixpointOptions {
        delta_clamp,
        ..FixpointOptions::default()
    };
    if let Some(tol) = tol {
        opts.tol = tol;
    }
    if let Some(iters) = max_iters {
        opts.max_iterations = iters;
    }
    opts
}

fn report_em(outcome: &EmOutcome, elapsed_ms: f64, machine: &mut Machine) {
    let trace = &outcome.trace;
    println!(
        "converged: {}  sweeps: {}  elapsed: {elapsed_ms:.3} ms",
        trace.converged,
        trace.iterations()
    );
    machine.push("converged", trace.converged);
    machine.push("iterations", trace.iterations());
    machine.push("elapsed_ms", elapsed_ms);
}

fn report_fast(outcome: &FastOutcome, elapsed_ms: f64, machine: &mut Machine) {
    let converged = outcome.match_trace.converged
        && outcome.row_trace.converged
        && outcome.col_trace.converged;
    println!(
        "converged: {converged}  fixed-point iterations: block {} / rows {} / columns {}",
        outcome.match_trace.iterations,
        outcome.row_trace.iterations,
        outcome.col_trace.iterations
    );
    println!(
        "model fit: {} ({} Newton iterations)  elapsed: {elapsed_ms:.3} ms",
        if outcome.solve_stats.exact_fit {
            "exact"
        } else {
            "iterative"
        },
        outcome.solve_stats.iterations
    );
    for w in &outcome.warnings {
        println!("warning: {w}");
    }
    machine.push("converged", converged);
    machine.push("match_iterations", outcome.match_trace.iterations);
    machine.push("row_iterations", outcome.row_trace.iterations);
    machine.push("col_iterations", outcome.col_trace.iterations);
    machine.push("newton_iterations", outcome.solve_stats.iterations);
    machine.push("exact_fit", outcome.solve_stats.exact_fit);
    machine.push("clamped", outcome.clamped);
    machine.push("warning_count", outcome.warnings.len());
    machine.push("elapsed_ms", elapsed_ms);
}

fn report_table(
    table: &FullTable,
    ll: f64,
    data: &ObservedData,
    cd: &CdMap,
    machine: &mut Machine,
) -> Result<()> {
    let population = table.total();
    let unobserved = table.quadrant_total(0, 0);
    println!("loglik: {ll:.6}");
    println!("population: {population:.1}");
    println!("unobserved (0,0): {unobserved:.1}");
    let residuals = fixpoint_residuals(data, cd, table, &SolverOptions::default())?;
    println!(
        "residuals: redistribution {:.3e}, model fit {:.3e}",
        residuals.redistribution, residuals.model_fit
    );
    machine.push("loglik", ll);
    machine.push("population", population);
    machine.push("unobserved", unobserved);
    machine.push("residual_redistribution", residuals.redistribution);
    machine.push("residual_model_fit", residuals.model_fit);
    Ok(())
}

fn write_table(path: &PathBuf, table: &FullTable) -> Result<()> {
    fs::write(path, format_table(table))?;
    println!("wrote: {}", path.display());
    Ok(())
}

fn cmd_estimate(args: &EstimateArgs) -> Result<i32> {
    let (data, cd) = args.input.load()?;
    let mut machine = Machine::default();
    let solver = SolverOptions::default();
    match args.method {
        Method::Em => println!("estimate (em)"),
        Method::Fast => println!("estimate (fast)"),
    }
    describe_input(&data, &args.input, &mut machine);
    machine.push(
        "method",
        match args.method {
            Method::Em => "em",
            Method::Fast => "fast",
        },
    );

    let table = match args.method {
        Method::Em => {
            let opts = em_options(args.tol, args.max_iters, args.init);
            let start = Instant::now();
            let outcome = run_em(&data, &cd, &opts, &solver)?;
            let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
            report_em(&outcome, elapsed_ms, &mut machine);
            report_table(
                &outcome.table,
                loglik(&outcome.table, &outcome.params),
                &data,
                &cd,
                &mut machine,
            )?;
            outcome.table
        }
        Method::Fast => {
            let opts = fast_options(args.tol, args.max_iters, args.delta_clamp);
            let start = Instant::now();
            let outcome = run_fast(&data, &cd, &opts, &solver)?;
            let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
            report_fast(&outcome, elapsed_ms, &mut machine);
            report_table(
                &outcome.table,
                loglik(&outcome.table, &outcome.params),
                &data,
                &cd,
                &mut machine,
            )?;
            outcome.table
        }
    };

    if let Some(path) = &args.out {
        write_table(path, &table)?;
    }
    machine.print();
    Ok(0)
}

fn cmd_compare(args: &CompareArgs) -> Result<i32> {
    let (data, cd) = args.input.load()?;
    let mut machine = Machine::default();
    let solver = SolverOptions::default();
    println!("compare");
    describe_input(&data, &args.input, &mut machine);

    let em_opts = em_options(args.tol, args.max_iters, args.init);
    let start = Instant::now();
    let em = run_em(&data, &cd, &em_opts, &solver)?;
    let em_ms = start.elapsed().as_secs_f64() * 1e3;

    let fast_opts = fast_options(args.tol, args.max_iters, args.delta_clamp);
    let start = Instant::now();
    let fast = run_fast(&data, &cd, &fast_opts, &solver)?;
    let fast_ms = start.elapsed().as_secs_f64() * 1e3;

    let diff = max_rel_change(fast.table.values(), em.table.values());
    let speedup = em_ms / fast_ms.max(f64::MIN_POSITIVE);
    println!(
        "em:   converged {} in {} sweeps, {em_ms:.3} ms",
        em.trace.converged,
        em.trace.iterations()
    );
    let fast_converged =
        fast.match_trace.converged && fast.row_trace.converged && fast.col_trace.converged;
    println!(
        "fast: converged {} in {}/{}/{} fixed-point iterations, {fast_ms:.3} ms",
        fast_converged,
        fast.match_trace.iterations,
        fast.row_trace.iterations,
        fast.col_trace.iterations
    );
    for w in &fast.warnings {
        println!("warning: {w}");
    }
    println!("max relative difference: {diff:.3e}");
    println!("speedup: {speedup:.1}x");
    println!(
        "population: em {:.1}, fast {:.1}",
        em.table.total(),
        fast.table.total()
    );

    machine.push("em_converged", em.trace.converged);
    machine.push("em_iterations", em.trace.iterations());
    machine.push("em_elapsed_ms", em_ms);
    machine.push("fast_converged", fast_converged);
    machine.push("fast_match_iterations", fast.match_trace.iterations);
    machine.push("fast_row_iterations", fast.row_trace.iterations);
    machine.push("fast_col_iterations", fast.col_trace.iterations);
    machine.push("fast_elapsed_ms", fast_ms);
    machine.push("max_rel_diff", diff);
    machine.push("speedup", speedup);
    machine.push("em_population", em.table.total());
    machine.push("fast_population", fast.table.total());

    if let Some(prefix) = &args.out_prefix {
        let mut em_path = prefix.as_os_str().to_owned();
        em_path.push(".em.csv");
        write_table(&PathBuf::from(em_path), &em.table)?;
        let mut fast_path = prefix.as_os_str().to_owned();
        fast_path.push(".fast.csv");
        write_table(&PathBuf::from(fast_path), &fast.table)?;
    }
    machine.print();
    Ok(0)
}

fn cmd_simulate(args: &SimulateArgs) -> Result<i32> {
    let text = fs::read_to_string(&args.spec)?;
    let mut spec = parse_sim_spec(&text)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let instance = gen_instance(&spec)?;
    let mut machine = Machine::default();
    println!("simulate");
    println!("spec: {}", args.spec.display());
    println!("dims: {}  seed: {}", spec.dims, spec.seed);
    println!("attempts: {}", instance.attempts);
    println!(
        "truth total: {:.1}  unobservable (0,0): {:.1}",
        instance.truth.total(),
        instance.truth.quadrant_total(0, 0)
    );
    println!(
        "observed: {} keys, total {:.1}",
        instance.observed.len(),
        instance.observed.total()
    );
    machine.push("n_a", spec.dims.n_a());
    machine.push("n_b", spec.dims.n_b());
    machine.push("seed", spec.seed);
    machine.push("attempts", instance.attempts);
    machine.push("truth_total", instance.truth.total());
    machine.push("unobservable", instance.truth.quadrant_total(0, 0));
    machine.push("observed_total", instance.observed.total());
    machine.push("observed_keys", instance.observed.len());

    if let Some(prefix) = &args.out_prefix {
        let mut data_path = prefix.as_os_str().to_owned();
        data_path.push(".data.csv");
        let data_path = PathBuf::from(data_path);
        fs::write(&data_path, format_observed(&instance.observed))?;
        println!("wrote: {}", data_path.display());
        let mut truth_path = prefix.as_os_str().to_owned();
        truth_path.push(".truth.csv");
        let truth_path = PathBuf::from(truth_path);
        fs::write(&truth_path, format_table(&instance.truth))?;
        println!("wrote: {}", truth_path.display());
    }
    machine.print();
    Ok(0)
}

fn cmd_bench(args: &BenchArgs) -> Result<i32> {
    let mut grids = Vec::new();
    for part in args.grid.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        grids.push(parse_dims_arg(part).map_err(Error::InvalidInput)?);
    }
    if grids.is_empty() {
        return Err(Error::InvalidInput("empty --grid".into()));
    }

    let mut machine = Machine::default();
    println!("bench (population target {})", args.pop);
    println!(
        "{:<8} {:>9} {:>12} {:>16} {:>12} {:>9} {:>14}",
        "dims", "em_iters", "em_ms", "fast_iters", "fast_ms", "speedup", "max_rel_diff"
    );
    let solver = SolverOptions::default();
    for dims in grids {
        let spec = dse_core::simulate::SimSpec {
            seed: args.seed,
            min_cell: args.min_cell,
            population_target: args.pop,
            ..dse_core::simulate::SimSpec::new(dims)
        };
        let row = (|| -> Result<String> {
            let instance = gen_instance(&spec)?;
            let cd = build_standard_cd(&instance.observed)?;
            let start = Instant::now();
            let em = run_em(&instance.observed, &cd, &EmOptions::default(), &solver)?;
            let em_ms = start.elapsed().as_secs_f64() * 1e3;
            let start = Instant::now();
            let fast = run_fast(&instance.observed, &cd, &FixpointOptions::default(), &solver)?;
            let fast_ms = start.elapsed().as_secs_f64() * 1e3;
            let diff = max_rel_change(fast.table.values(), em.table.values());
            let speedup = em_ms / fast_ms.max(f64::MIN_POSITIVE);
            let key = format!("bench.{dims}");
            machine.push(format!("{key}.em_iterations"), em.trace.iterations());
            machine.push(format!("{key}.em_elapsed_ms"), em_ms);
            machine.push(
                format!("{key}.fast_iterations"),
                fast.match_trace
                    .iterations
                    .max(fast.row_trace.iterations)
                    .max(fast.col_trace.iterations),
            );
            machine.push(format!("{key}.fast_elapsed_ms"), fast_ms);
            machine.push(format!("{key}.speedup"), speedup);
            machine.push(format!("{key}.max_rel_diff"), diff);
            Ok(format!(
                "{:<8} {:>9} {:>12.3} {:>16} {:>12.3} {:>8.1}x {:>14.3e}",
                dims.to_string(),
                em.trace.iterations(),
                em_ms,
                format!(
                    "{}/{}/{}",
                    fast.match_trace.iterations,
                    fast.row_trace.iterations,
                    fast.col_trace.iterations
                ),
                fast_ms,
                speedup,
                diff
            ))
        })();
        match row {
            Ok(line) => println!("{line}"),
            Err(err) => {
                println!("{:<8} error: {err}", dims.to_string());
                machine.push(format!("bench.{dims}.error"), err);
            }
        }
    }
    machine.print();
    Ok(0)
}
