//! Experiment driver behind the `zrplab` binary.
//!
//! Subcommands: `verify | sweep | constants | simulate | probe | report |
//! run`. Exit codes: 0 on success, 1 when a hard invariant fails, 2 on
//! configuration errors. Hard invariants are exact identities (balance,
//! normalization, decompositions); fitted constants are soft findings and
//! never fail a run.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::ascent::AscentBudget;
use crate::config::{ConfigError, ExperimentConfig, ProbeKind};
use crate::constants::{
    decay_certificate, instance_constants, recursion_probe, sweep, SweepRow,
};
use crate::functionals::{
    self, covariance_probe, dirichlet_sqrt, dissipation, dissipation_via_generator,
    entropy_decomposition_residual, entropy_derivative_residual, exp_moment_probe, phi_observable,
    psi_observable, random_positive_functions, CoarseGrainScheme, ConditionalStructure,
};
use crate::kmc::{integrated_autocorrelation, simulate as kmc_simulate, InitialState, TrajectoryParams};
use crate::measures::{
    build_potential, potential_equivalence_report, solve_fugacity_auto, variance_ratio_interval,
};
use crate::onedim::{bd_dissipation_constant, one_vertex_constant, BirthDeathChain, OneDimError};
use crate::rates::RateFunction;
use crate::report::{
    consolidate_manifests, write_atomic, write_probe_csv, write_sweep_csv, FunctionalReport,
    Manifest, ProbeOutcome,
};
use crate::statespace::{build_generator, change_of_variable_residual, Flavor, StateSpace};

pub const EXIT_OK: i32 = 0;
pub const EXIT_HARD_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "zrplab", version, about = "Zero-range dynamics laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Base seed for every stochastic component.
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,

    /// Worker threads (0 = all available).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    /// Output directory for CSV artifacts and manifests.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the exact-identity checks on one instance.
    Verify {
        #[arg(long, default_value = "linear")]
        rate: String,
        #[arg(long = "L", default_value_t = 3)]
        ell: usize,
        #[arg(long = "N", default_value_t = 2)]
        particles: usize,
        #[arg(long, default_value = "complete")]
        flavor: String,
    },
    /// Estimate gap / s / gamma bounds over an (L, N) grid.
    Sweep {
        #[arg(long, default_value = "staircase:2")]
        rate: String,
        #[arg(long, default_value_t = 2)]
        lmin: usize,
        #[arg(long, default_value_t = 8)]
        lmax: usize,
        #[arg(long, default_value_t = 1)]
        nmin: usize,
        #[arg(long, default_value_t = 12)]
        nmax: usize,
        /// Probe to run over the grid.
        #[arg(long, default_value = "constants")]
        probe: String,
        #[arg(long, default_value_t = 20_000)]
        max_states: usize,
        #[arg(long, default_value_t = 8)]
        restarts: usize,
        #[arg(long, default_value_t = 400)]
        iters: usize,
    },
    /// Bounds for a single instance, printed and written as a one-row CSV.
    Constants {
        #[arg(long, default_value = "staircase:2")]
        rate: String,
        #[arg(long = "L")]
        ell: usize,
        #[arg(long = "N")]
        particles: usize,
        #[arg(long, default_value_t = 8)]
        restarts: usize,
        #[arg(long, default_value_t = 400)]
        iters: usize,
        /// Also export the generator as `i j rate` triplets plus the
        /// stationary vector CSV, for cross-checking with external tools.
        #[arg(long)]
        export: bool,
        #[arg(long, default_value = "complete")]
        flavor: String,
    },
    /// Kinetic Monte Carlo trajectory with summary CSV.
    Simulate {
        #[arg(long, default_value = "constant")]
        rate: String,
        #[arg(long = "L")]
        ell: usize,
        #[arg(long = "N")]
        particles: usize,
        #[arg(short = 'T', long, default_value_t = 1e4)]
        horizon: f64,
        #[arg(long, default_value = "complete")]
        flavor: String,
        #[arg(long, default_value_t = 0.5)]
        sample_dt: f64,
        #[arg(long, default_value_t = 0)]
        replica: u64,
        /// Also write a binary event trace to this file.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run one named probe over a small grid.
    Probe {
        #[arg(long)]
        probe: String,
        #[arg(long, default_value = "staircase:2")]
        rate: String,
        #[arg(long = "L", value_delimiter = ',', default_values_t = vec![4usize, 6])]
        ells: Vec<usize>,
        #[arg(long = "N", value_delimiter = ',', default_values_t = vec![4usize, 6])]
        particle_counts: Vec<usize>,
        #[arg(long, default_value_t = 8)]
        restarts: usize,
        #[arg(long, default_value_t = 400)]
        iters: usize,
    },
    /// Consolidate run manifests into a markdown comparison.
    Report {
        /// Manifest paths.
        inputs: Vec<PathBuf>,
    },
    /// Execute a full experiment config file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Rate(#[from] crate::rates::RateError),
    #[error(transparent)]
    Space(#[from] crate::statespace::SpaceError),
    #[error(transparent)]
    Measure(#[from] crate::measures::MeasureError),
    #[error(transparent)]
    Functional(#[from] crate::functionals::FunctionalError),
    #[error(transparent)]
    Constants(#[from] crate::constants::ConstantsError),
    #[error(transparent)]
    OneDim(#[from] OneDimError),
    #[error(transparent)]
    Kmc(#[from] crate::kmc::KmcError),
    #[error(transparent)]
    Report(#[from] crate::report::ReportError),
    #[error("unknown flavor `{0}` (expected complete or local)")]
    UnknownFlavor(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn parse_flavor(s: &str) -> Result<Flavor, CliError> {
    match s {
        "complete" => Ok(Flavor::Complete),
        "local" => Ok(Flavor::Local),
        other => Err(CliError::UnknownFlavor(other.to_string())),
    }
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with(cli: Cli) -> i32 {
    if cli.threads > 0 {
        // Ignore failure: the global pool may already be initialized.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    let outcome = dispatch(cli);
    match outcome {
        Ok(code) => code,
        Err(CliError::Config(e)) => {
            eprintln!("config error: {e}");
            EXIT_CONFIG
        }
        Err(CliError::UnknownFlavor(e)) => {
            eprintln!("config error: unknown flavor {e}");
            EXIT_CONFIG
        }
        Err(CliError::Rate(e)) => {
            eprintln!("config error: {e}");
            EXIT_CONFIG
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_HARD_FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Verify { rate, ell, particles, flavor } => {
            let c = RateFunction::from_spec(&rate, particles.max(8) * 2)?;
            let flavor = parse_flavor(&flavor)?;
            let ok = run_verify(&c, ell, particles, flavor, cli.seed)?;
            Ok(if ok { EXIT_OK } else { EXIT_HARD_FAILURE })
        }
        Command::Sweep { rate, lmin, lmax, nmin, nmax, probe, max_states, restarts, iters } => {
            let mut config = ExperimentConfig {
                rate_spec: rate,
                ells: (lmin..=lmax).collect(),
                particle_counts: (nmin..=nmax).collect(),
                probes: vec![ProbeKind::parse(&probe)?],
                seed: cli.seed,
                max_states,
                out_dir: cli.out,
                ..Default::default()
            };
            config.budgets.restarts = restarts;
            config.budgets.iters = iters;
            run_experiment(&config)
        }
        Command::Constants { rate, ell, particles, restarts, iters, export, flavor } => {
            let c = RateFunction::from_spec(&rate, particles.max(8) * 2)?;
            let budget = AscentBudget { restarts, max_iters: iters, seed: cli.seed };
            let rows = sweep(&c, &[ell], &[particles], usize::MAX, &budget)?;
            for r in &rows {
                println!(
                    "L={} N={} gap={} s=[{}, {}] gamma=[{}, {}]",
                    r.ell, r.particles, r.gap, r.s_lo, r.s_up, r.gamma_lo, r.gamma_up
                );
            }
            let mut buf = Vec::new();
            write_sweep_csv(&rows, &mut buf)?;
            write_atomic(&cli.out.join("constants.csv"), &buf)?;
            if export {
                let flavor = parse_flavor(&flavor)?;
                let space = StateSpace::enumerate(ell, particles)?;
                let gen = build_generator(&space, &c, flavor)?;
                let mut triplets = Vec::new();
                gen.write_coordinate_list(&mut triplets)?;
                write_atomic(&cli.out.join("generator.txt"), &triplets)?;
                let mut stationary = Vec::new();
                gen.write_stationary_csv(&mut stationary)?;
                write_atomic(&cli.out.join("stationary.csv"), &stationary)?;
            }
            Ok(EXIT_OK)
        }
        Command::Simulate { rate, ell, particles, horizon, flavor, sample_dt, replica, trace } => {
            let c = RateFunction::from_spec(&rate, particles.max(8) * 2)?;
            let flavor = parse_flavor(&flavor)?;
            run_simulate(
                &c,
                ell,
                particles,
                flavor,
                horizon,
                sample_dt,
                cli.seed,
                replica,
                &cli.out,
                trace.as_deref(),
            )?;
            Ok(EXIT_OK)
        }
        Command::Probe { probe, rate, ells, particle_counts, restarts, iters } => {
            let mut config = ExperimentConfig {
                rate_spec: rate,
                ells,
                particle_counts,
                probes: vec![ProbeKind::parse(&probe)?],
                seed: cli.seed,
                out_dir: cli.out,
                ..Default::default()
            };
            config.budgets.restarts = restarts;
            config.budgets.iters = iters;
            run_experiment(&config)
        }
        Command::Report { inputs } => {
            if inputs.is_empty() {
                eprintln!("usage error: report needs at least one manifest path");
                return Ok(EXIT_CONFIG);
            }
            let markdown = consolidate_manifests(&inputs)?;
            print!("{markdown}");
            Ok(EXIT_OK)
        }
        Command::Run { config } => {
            let mut parsed = ExperimentConfig::load(&config)?;
            if cli.out != PathBuf::from("out") {
                parsed.out_dir = cli.out;
            }
            run_experiment(&parsed)
        }
    }
}

// ---------------------------------------------------------------------------
// verify

struct CheckList {
    all_pass: bool,
    results: Vec<(String, bool, f64)>,
}

impl CheckList {
    fn new() -> Self {
        Self { all_pass: true, results: Vec::new() }
    }

    fn record(&mut self, name: &str, pass: bool, residual: f64) {
        println!("{} {name} (residual {residual:.3e})", if pass { "PASS" } else { "FAIL" });
        self.all_pass &= pass;
        self.results.push((name.to_string(), pass, residual));
    }
}

/// Exact-identity suite on one instance; prints one line per check.
pub fn run_verify(
    c: &RateFunction,
    ell: usize,
    particles: usize,
    flavor: Flavor,
    seed: u64,
) -> Result<bool, CliError> {
    let space = StateSpace::enumerate(ell, particles)?;
    let gen = build_generator(&space, c, flavor)?;
    let mut checks = CheckList::new();

    let r = gen.row_sum_residual();
    checks.record("row-sums", r < 1e-12, r);
    let r = gen.stationarity_residual();
    checks.record("stationarity", r < 1e-12, r);
    let total: f64 = gen.stationary().iter().sum();
    checks.record("normalization", (total - 1.0).abs() < 1e-12, (total - 1.0).abs());

    let batch = random_positive_functions(&gen, 24, seed);
    let r = change_of_variable_residual(&gen, c, &batch);
    checks.record("change-of-variable", r < 1e-10, r);

    // Dissipation down both algebraic routes.
    let mut worst = 0.0f64;
    for f in batch.iter().take(8) {
        let a = dissipation(&gen, f)?;
        let b = dissipation_via_generator(&gen, f)?;
        worst = worst.max((a - b).abs() / a.abs().max(1.0));
    }
    checks.record("dissipation-routes", worst < 1e-10, worst);

    // E(f, log f) >= 4 E(sqrt f, sqrt f) with zero violations.
    let mut margin = f64::INFINITY;
    for f in &batch {
        let lhs = dissipation(&gen, f)?;
        let rhs = 4.0 * dirichlet_sqrt(&gen, f)?;
        margin = margin.min((lhs - rhs) / (1.0 + lhs));
    }
    checks.record("dissipation-bound", margin >= -1e-10, margin.min(0.0).abs());

    // d/dt Ent(f_t) = -E(f_t, log f_t) at h = 1e-5. Differencing entropies
    // across a 1e-5 step leaves ~1e-11 of float headroom per unit of
    // dynamic range, so the batch is clamped to a 1e4 range; the identity
    // holds for any positive f.
    let mut worst = 0.0f64;
    for f in batch.iter().take(6) {
        let sup = f.iter().cloned().fold(0.0f64, f64::max);
        let clamped: Vec<f64> = f.iter().map(|&v| v.max(1e-4 * sup)).collect();
        worst = worst.max(entropy_derivative_residual(&gen, &clamped, 1e-5)?);
    }
    checks.record("entropy-derivative", worst < 1e-6, worst);

    if flavor == Flavor::Complete {
        let cond = ConditionalStructure::new(&gen, c)?;
        let mut worst = 0.0f64;
        for f in batch.iter().take(8) {
            worst = worst.max(entropy_decomposition_residual(&cond, f)?);
        }
        checks.record("entropy-decomposition", worst < 1e-9, worst);

        let tv = cond.conditional_identification_tv();
        checks.record("conditional-measure", tv < 1e-12, tv);

        let mut worst = 0.0f64;
        for f in batch.iter().take(6) {
            for x in 0..ell {
                for n in 1..=particles {
                    let inc = functionals::slice_increment(&cond, f, x, n);
                    worst = worst.max(inc.transfer_residual / (1.0 + inc.upper.abs()));
                }
            }
        }
        checks.record("conditional-transfer", worst < 1e-10, worst);

        // Block covariance split, smallest nontrivial block size.
        let k = (2..=ell).find(|k| ell % k == 0).unwrap_or(1);
        let scheme = CoarseGrainScheme::new(ell, k)?;
        let profile = solve_fugacity_auto(c, particles as f64 / ell as f64)?;
        let mut worst = 0.0f64;
        for f in batch.iter().take(8) {
            let split =
                functionals::covariance_decomposition(&gen, c, &scheme, &profile, f)?;
            worst = worst.max(split.residual.abs() / split.covariance.abs().max(1.0));
        }
        checks.record("covariance-split", worst < 1e-10, worst);
    }

    Ok(checks.all_pass)
}

// ---------------------------------------------------------------------------
// simulate

#[allow(clippy::too_many_arguments)]
pub fn run_simulate(
    c: &RateFunction,
    ell: usize,
    particles: usize,
    flavor: Flavor,
    horizon: f64,
    sample_dt: f64,
    seed: u64,
    replica: u64,
    out_dir: &std::path::Path,
    trace: Option<&std::path::Path>,
) -> Result<PathBuf, CliError> {
    let params = TrajectoryParams {
        ell,
        particles,
        flavor,
        t_max: horizon,
        seed,
        replica,
        sample_interval: sample_dt,
        init: InitialState::Stationary,
    };
    if let Some(trace_path) = trace {
        // Event-level trace wanted: drive the simulator directly.
        let mut sim =
            crate::kmc::Simulator::new(c, ell, particles, flavor, seed, replica, params.init)?;
        let mut events = Vec::new();
        while sim.next_event_time() <= horizon {
            match sim.step() {
                Some(e) => events.push(e),
                None => break,
            }
        }
        let mut buf = Vec::new();
        crate::kmc::write_binary_trace(&events, &mut buf)?;
        write_atomic(trace_path, &buf)?;
    }
    let summary = kmc_simulate(c, &params)?;
    let est = integrated_autocorrelation(&summary.rate_sums, sample_dt);
    let mut buf = Vec::new();
    crate::kmc::write_summary_csv(&summary, &mut buf)?;
    let path = out_dir.join(format!(
        "trajectory_{}_L{}_N{}_{}_seed{}_r{}.csv",
        c.name().replace(':', "-"),
        ell,
        particles,
        flavor.as_str(),
        seed,
        replica
    ));
    write_atomic(&path, &buf)?;
    println!(
        "events={} samples={} final_occupied={}",
        summary.events,
        summary.times.len(),
        summary.final_state.iter().filter(|&&v| v > 0).count()
    );
    if let Ok(est) = est {
        println!("tau_int(rate_sum)={} +- {} (window {})", est.tau, est.tau_err, est.window);
    }
    Ok(path)
}

// ---------------------------------------------------------------------------
// experiment runner

pub fn run_experiment(config: &ExperimentConfig) -> Result<i32, CliError> {
    config.validate()?;
    let c = RateFunction::from_spec(
        &config.rate_spec,
        config.particle_counts.iter().cloned().max().unwrap_or(8).max(8) * 2,
    )?;
    let mut manifest = Manifest::new(config.hash(), config.seed);
    for probe in &config.probes {
        let outcome = match probe {
            ProbeKind::Certify => probe_certify(config, &c)?,
            ProbeKind::Constants => probe_constants(config, &c)?,
            ProbeKind::Recursion => probe_recursion(config, &c)?,
            ProbeKind::Covariance => probe_covariance(config, &c)?,
            ProbeKind::ExpMoment => probe_expmoment(config, &c)?,
            ProbeKind::Potential => probe_potential(config, &c)?,
            ProbeKind::Onedim => probe_onedim(config, &c)?,
            ProbeKind::Kmc => probe_kmc(config, &c)?,
        };
        manifest.probes.insert(probe.name().to_string(), outcome);
    }
    manifest.save(&config.out_dir.join("manifest.json"))?;
    if manifest.all_hard_invariants_pass() {
        Ok(EXIT_OK)
    } else {
        eprintln!("hard invariant failure; see manifest.json");
        Ok(EXIT_HARD_FAILURE)
    }
}

fn budget_of(config: &ExperimentConfig) -> AscentBudget {
    AscentBudget {
        restarts: config.budgets.restarts,
        max_iters: config.budgets.iters,
        seed: config.seed,
    }
}

fn probe_certify(config: &ExperimentConfig, c: &RateFunction) -> Result<ProbeOutcome, CliError> {
    let mut rows = Vec::new();
    let mut outcome = ProbeOutcome::default();
    let cert = c.certify();
    let mut report = |param: &str, value: f64| {
        rows.push(
            FunctionalReport::new("certify", 0, 0, c.name(), config.seed)
                .with_param(param)
                .with_value(value)
                .with_fitted(value),
        );
    };
    let mut pass = true;
    if let Some((delta, n0)) = cert.h1 {
        report("delta", delta);
        report("n0", n0 as f64);
        let reg = c.regularize(n0)?;
        let min_inc = reg.min_increment();
        report("regularized_min_increment", min_inc);
        // A certified rate regularizes to a uniformly increasing one.
        pass &= min_inc > 0.0;
        let (lo, hi) = crate::rates::equivalence_ratio_onesite(c, n0, 2 * c.n_max().min(120))?;
        report("equivalence_lo", lo);
        report("equivalence_hi", hi);
        pass &= lo > 0.0 && hi.is_finite();
        outcome.findings.insert("delta".into(), delta);
        outcome.findings.insert("n0".into(), n0 as f64);
        outcome.findings.insert("equivalence_ratio".into(), hi / lo);
    } else {
        report("h1_absent", 1.0);
    }
    if let Some(lip) = cert.h2 {
        report("lip", lip);
        outcome.findings.insert("lip".into(), lip);
    }
    outcome.pass = Some(pass);
    let mut buf = Vec::new();
    write_probe_csv(&rows, &mut buf)?;
    write_atomic(&config.out_dir.join("certify.csv"), &buf)?;
    outcome.artifacts.push("certify.csv".into());
    Ok(outcome)
}

fn probe_constants(config: &ExperimentConfig, c: &RateFunction) -> Result<ProbeOutcome, CliError> {
    let budget = budget_of(config);
    let rows: Vec<SweepRow> = sweep(
        c,
        &config.ells,
        &config.particle_counts,
        config.max_states,
        &budget,
    )?;
    let mut outcome = ProbeOutcome::default();
    let mut pass = !rows.is_empty();
    let mut gamma_lo_min = f64::INFINITY;
    let mut gamma_lo_max = f64::NEG_INFINITY;
    for r in &rows {
        pass &= r.gamma_lo <= r.gamma_up + 1e-8;
        pass &= r.s_lo <= r.s_up + 1e-9;
        pass &= r.gap > 0.0;
        gamma_lo_min = gamma_lo_min.min(r.gamma_lo);
        gamma_lo_max = gamma_lo_max.max(r.gamma_lo);
    }
    outcome.pass = Some(pass);
    outcome.findings.insert("instances".into(), rows.len() as f64);
    outcome.findings.insert("gamma_lo_min".into(), gamma_lo_min);
    outcome.findings.insert("gamma_lo_max".into(), gamma_lo_max);
    let spread = gamma_lo_max / gamma_lo_min;
    outcome.findings.insert("gamma_lo_spread".into(), spread);
    outcome
        .findings
        .insert("gamma_lo_spread_within_threshold".into(), f64::from(spread <= config.soft_spread));
    let mut buf = Vec::new();
    write_sweep_csv(&rows, &mut buf)?;
    write_atomic(&config.out_dir.join("sweep.csv"), &buf)?;
    outcome.artifacts.push("sweep.csv".into());
    Ok(outcome)
}

fn probe_recursion(config: &ExperimentConfig, c: &RateFunction) -> Result<ProbeOutcome, CliError> {
    let budget = budget_of(config);
    let mut rows = Vec::new();
    let mut outcome = ProbeOutcome::default();
    let mut pass = true;
    for &ell in &config.ells {
        if ell < 3 {
            continue;
        }
        for &n in &config.particle_counts {
            if StateSpace::enumerate_with_cap(ell, n, config.max_states.min(5000)).is_err() {
                continue;
            }
            let report = recursion_probe(c, ell, n, 60, &budget)?;
            pass &= report.decomposition_residual_max < 1e-9;
            pass &= report.conditional_tv < 1e-12;

            // Fitted increment-to-terms constant on the same instance.
            let space = StateSpace::enumerate(ell, n)?;
            let gen = build_generator(&space, c, Flavor::Complete)?;
            let cond = ConditionalStructure::new(&gen, c)?;
            let batch = random_positive_functions(&gen, 40, config.seed ^ 0xab);
            let increment_ratio = functionals::increment_ratio_constant(&cond, &batch);

            let mut push = |param: &str, value: f64| {
                rows.push(
                    FunctionalReport::new("recursion", ell, n, c.name(), config.seed)
                        .with_param(param)
                        .with_value(value)
                        .with_fitted(value),
                );
            };
            push("decomposition_residual", report.decomposition_residual_max);
            push("conditional_tv", report.conditional_tv);
            push("gamma_reduced", report.gamma_reduced);
            push("recursion_slack_min", report.recursion_slack_min);
            push("increment_ratio_constant", increment_ratio);
            for (eps, cc) in &report.pareto {
                rows.push(
                    FunctionalReport::new("recursion", ell, n, c.name(), config.seed)
                        .with_param(format!("pareto_eps_{eps}"))
                        .with_value(*cc)
                        .with_fitted(*cc),
                );
            }
        }
    }
    outcome.pass = Some(pass);
    let mut buf = Vec::new();
    write_probe_csv(&rows, &mut buf)?;
    write_atomic(&config.out_dir.join("recursion.csv"), &buf)?;
    outcome.artifacts.push("recursion.csv".into());
    Ok(outcome)
}

fn probe_covariance(config: &ExperimentConfig, c: &RateFunction) -> Result<ProbeOutcome, CliError> {
    let mut rows = Vec::new();
    let mut outcome = ProbeOutcome::default();
    let mut per_eps: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
    for &ell in &config.ells {
        for &n in &config.particle_counts {
            let space = match StateSpace::enumerate_with_cap(ell, n, config.max_states) {
                Ok(s) => s,
                Err(_) => continue,
            };
            let gen = build_generator(&space, c, Flavor::Complete)?;
            let batch =
                functionals::covariance_test_functions(&gen, c, 1000, config.seed);
            for eps in [0.5, 0.1] {
                let value = covariance_probe(&gen, c, &batch, eps)?;
                rows.push(
                    FunctionalReport::new("covariance", ell, n, c.name(), config.seed)
                        .with_param(format!("C_eps_{eps}"))
                        .with_value(value)
                        .with_fitted(value),
                );
                per_eps.entry(format!("C_eps_{eps}")).or_default().push(value);
            }
        }
    }
    for (key, values) in per_eps {
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = values.iter().cloned().filter(|v| *v > 0.0).fold(f64::INFINITY, f64::min);
        outcome.findings.insert(format!("{key}_max"), hi);
        if lo.is_finite() {
            outcome.findings.insert(format!("{key}_spread"), hi / lo);
            outcome.findings.insert(
                format!("{key}_spread_within_threshold"),
                f64::from(hi / lo <= config.soft_spread),
            );
        }
    }
    outcome.pass = None;
    let mut buf = Vec::new();
    write_probe_csv(&rows, &mut buf)?;
    write_atomic(&config.out_dir.join("covariance.csv"), &buf)?;
    outcome.artifacts.push("covariance.csv".into());
    Ok(outcome)
}

fn probe_expmoment(config: &ExperimentConfig, c: &RateFunction) -> Result<ProbeOutcome, CliError> {
    let mut rows = Vec::new();
    let mut outcome = ProbeOutcome::default();
    let t_grid: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
    let mut phi_constants = Vec::new();
    let mut psi_constants = Vec::new();
    for &ell in &config.ells {
        // Density one: N = L instances.
        let n = ell;
        if !config.particle_counts.contains(&n) {
            continue;
        }
        let space = match StateSpace::enumerate_with_cap(ell, n, config.max_states) {
            Ok(s) => s,
            Err(_) => continue,
        };
        let gen = build_generator(&space, c, Flavor::Complete)?;
        let rho = 1.0;
        let profile = solve_fugacity_auto(c, rho)?;
        let phi = phi_observable(&gen, c, &profile);
        let mut fitted = 0.0f64;
        for p in exp_moment_probe(gen.stationary(), &phi, &t_grid) {
            rows.push(
                FunctionalReport::new("expmoment", ell, n, c.name(), config.seed)
                    .with_param(format!("phi_t_{}", p.t))
                    .with_value(p.value)
                    .with_fitted(p.value / (n as f64 * rho.sqrt() * p.t)),
            );
            fitted = fitted.max(p.value / (n as f64 * rho.sqrt() * p.t));
        }
        phi_constants.push(fitted);

        let k = (2..=ell).find(|k| ell % k == 0).unwrap_or(1);
        let scheme = CoarseGrainScheme::new(ell, k)?;
        let psi = psi_observable(&gen, c, &scheme, &profile)?;
        let t_cap = 1.0 / (k as f64 * rho.sqrt());
        let psi_grid: Vec<f64> = (1..=10).map(|i| i as f64 * t_cap / 10.0).collect();
        let mut fitted = 0.0f64;
        for p in exp_moment_probe(gen.stationary(), &psi, &psi_grid) {
            rows.push(
                FunctionalReport::new("expmoment", ell, n, c.name(), config.seed)
                    .with_param(format!("psi_K{k}_t_{}", p.t))
                    .with_value(p.value)
                    .with_fitted(p.value / (n as f64 / (k as f64).sqrt() * p.t)),
            );
            fitted = fitted.max(p.value / (n as f64 / (k as f64).sqrt() * p.t));
        }
        psi_constants.push(fitted);
    }
    let spread = |values: &[f64]| {
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        hi / lo
    };
    if !phi_constants.is_empty() {
        let phi_spread = spread(&phi_constants);
        let psi_spread = spread(&psi_constants);
        outcome.findings.insert("phi_constant_spread".into(), phi_spread);
        outcome.findings.insert("psi_constant_spread".into(), psi_spread);
        outcome.findings.insert(
            "spreads_within_threshold".into(),
            f64::from(phi_spread <= config.soft_spread && psi_spread <= config.soft_spread),
        );
    }
    outcome.pass = None;
    let mut buf = Vec::new();
    write_probe_csv(&rows, &mut buf)?;
    write_atomic(&config.out_dir.join("expmoment.csv"), &buf)?;
    outcome.artifacts.push("expmoment.csv".into());
    Ok(outcome)
}

fn probe_potential(config: &ExperimentConfig, c: &RateFunction) -> Result<ProbeOutcome, CliError> {
    let mut rows = Vec::new();
    let mut outcome = ProbeOutcome::default();
    let mut pass = true;
    let rho_grid = [0.25, 0.5, 1.0, 2.0, 4.0];
    let (vr_lo, vr_hi) = variance_ratio_interval(c, &rho_grid)?;
    outcome.findings.insert("variance_ratio_lo".into(), vr_lo);
    outcome.findings.insert("variance_ratio_hi".into(), vr_hi);

    // Density-indexed table: variance ratios and the rescaled mode
    // probabilities of the site-sum distribution.
    let mut density_rows: Vec<(usize, f64, String, f64)> = Vec::new();
    for &rho in &rho_grid {
        let profile = solve_fugacity_auto(c, rho)?;
        density_rows.push((1, rho, "sigma2_over_rho".into(), profile.sigma2 / rho));
    }
    let clt_grid: Vec<(usize, f64)> =
        [20usize, 60, 120].iter().flat_map(|&l| [(l, 0.5), (l, 1.0), (l, 2.0)]).collect();
    for p in crate::measures::local_clt_probe(c, &clt_grid)? {
        density_rows.push((p.ell, p.rho, "clt_r".into(), p.r));
        density_rows.push((p.ell, p.rho, "sigma2_over_rho".into(), p.variance_ratio));
    }
    let mut buf = Vec::new();
    crate::report::write_density_csv(&density_rows, &mut buf)?;
    write_atomic(&config.out_dir.join("density.csv"), &buf)?;
    outcome.artifacts.push("density.csv".into());
    let mut count_rows: Vec<(usize, usize, String, f64)> = Vec::new();
    for &ell in &config.ells {
        if ell < 2 {
            continue;
        }
        for &n in &config.particle_counts {
            // The boundary split needs a nonempty interior and a density
            // regime where the smooth part is convex.
            if (n as f64) < 0.5 * ell as f64 {
                continue;
            }
            let width = crate::measures::default_boundary_width(c, ell, n)?;
            if n < width + 2 {
                continue;
            }
            match build_potential(c, ell, n, 2.0, None) {
                Ok(pot) => {
                    let min_dd = pot.min_interior_second_difference();
                    pass &= min_dd >= 0.0;
                    count_rows.push((ell, n, "boundary_width".into(), pot.m as f64));
                    count_rows.push((ell, n, "tail_constant".into(), pot.k_tail));
                    count_rows.push((ell, n, "min_second_difference".into(), min_dd));
                    let report = potential_equivalence_report(c, ell, n, &pot);
                    let mut push = |param: &str, value: f64| {
                        rows.push(
                            FunctionalReport::new("potential", ell, n, c.name(), config.seed)
                                .with_param(param)
                                .with_value(value)
                                .with_fitted(value),
                        );
                    };
                    push("min_second_difference", min_dd);
                    push("k_tail", pot.k_tail);
                    push("m", pot.m as f64);
                    push("equivalence_lo", report.equivalence.0);
                    push("equivalence_hi", report.equivalence.1);
                    push("boundary_lo", report.boundary_ratio.0);
                    push("boundary_hi", report.boundary_ratio.1);
                }
                Err(e) => {
                    pass = false;
                    rows.push(
                        FunctionalReport::new("potential", ell, n, c.name(), config.seed)
                            .with_param(format!("failure:{e}"))
                            .with_value(f64::NAN),
                    );
                }
            }
        }
    }
    outcome.pass = Some(pass);
    let mut buf = Vec::new();
    write_probe_csv(&rows, &mut buf)?;
    write_atomic(&config.out_dir.join("potential.csv"), &buf)?;
    outcome.artifacts.push("potential.csv".into());
    let mut buf = Vec::new();
    crate::report::write_count_csv(&count_rows, &mut buf)?;
    write_atomic(&config.out_dir.join("potential_grid.csv"), &buf)?;
    outcome.artifacts.push("potential_grid.csv".into());
    Ok(outcome)
}

fn probe_onedim(config: &ExperimentConfig, c: &RateFunction) -> Result<ProbeOutcome, CliError> {
    let budget = budget_of(config);
    let mut rows = Vec::new();
    let mut outcome = ProbeOutcome::default();
    let mut pass = true;
    let mut values = Vec::new();
    for &ell in &config.ells {
        if ell < 2 {
            continue;
        }
        for &n in &config.particle_counts {
            let est = one_vertex_constant(c, ell, n, &budget)?;
            values.push(est.value);
            rows.push(
                FunctionalReport::new("onedim", ell, n, c.name(), config.seed)
                    .with_param("one_vertex_constant")
                    .with_value(est.value)
                    .with_fitted(est.value),
            );
        }
    }
    // The certified-rate chain bound: estimate stays under 1/delta
    // (bd_dissipation_constant errors out on violation).
    if let Some((_, n0)) = c.certify().h1 {
        let reg = c.regularize(n0)?;
        let n_max = config.particle_counts.iter().cloned().max().unwrap_or(8).max(8);
        let mu = crate::measures::single_site(&reg, n_max);
        let death: Vec<f64> = (0..=n_max).map(|k| reg.value(k)).collect();
        let chain = BirthDeathChain::from_measure(&mu, death)?;
        match bd_dissipation_constant(&chain, &budget) {
            Ok(report) => {
                if let Some(up) = report.upper {
                    outcome.findings.insert("regularized_chain_upper".into(), up);
                    outcome
                        .findings
                        .insert("regularized_chain_lower".into(), report.estimate.value);
                }
            }
            Err(OneDimError::BoundViolation { lower, upper }) => {
                pass = false;
                outcome.findings.insert("bound_violation_lower".into(), lower);
                outcome.findings.insert("bound_violation_upper".into(), upper);
            }
            Err(e) => return Err(e.into()),
        }
    }
    if !values.is_empty() {
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        outcome.findings.insert("one_vertex_max".into(), hi);
        outcome.findings.insert("one_vertex_min".into(), lo);
        outcome.findings.insert("one_vertex_spread".into(), hi / lo);
    }
    outcome.pass = Some(pass);
    let mut buf = Vec::new();
    write_probe_csv(&rows, &mut buf)?;
    write_atomic(&config.out_dir.join("onedim.csv"), &buf)?;
    outcome.artifacts.push("onedim.csv".into());
    Ok(outcome)
}

fn probe_kmc(config: &ExperimentConfig, c: &RateFunction) -> Result<ProbeOutcome, CliError> {
    let mut rows = Vec::new();
    let mut outcome = ProbeOutcome::default();
    for &ell in &config.ells {
        for &n in &config.particle_counts {
            for replica in 0..config.kmc.replicas as u64 {
                let params = TrajectoryParams {
                    ell,
                    particles: n,
                    flavor: Flavor::Complete,
                    t_max: config.kmc.t_max,
                    seed: config.seed,
                    replica,
                    sample_interval: config.kmc.sample_interval,
                    init: InitialState::Stationary,
                };
                let summary = kmc_simulate(c, &params)?;
                let series = if c.name() == "linear" {
                    // sum_x c(eta_x) is conserved for linear rates; track a
                    // single site instead.
                    &summary.site0
                } else {
                    &summary.rate_sums
                };
                let est = integrated_autocorrelation(series, config.kmc.sample_interval)?;
                let mut push = |param: &str, value: f64| {
                    rows.push(
                        FunctionalReport::new("kmc", ell, n, c.name(), config.seed)
                            .with_param(format!("{param}_r{replica}"))
                            .with_value(value)
                            .with_fitted(value),
                    );
                };
                push("tau_int", est.tau);
                push("tau_err", est.tau_err);
                push("events", summary.events as f64);
                push("insufficient", if est.insufficient { 1.0 } else { 0.0 });
            }
        }
    }
    outcome.pass = None;
    let mut buf = Vec::new();
    write_probe_csv(&rows, &mut buf)?;
    write_atomic(&config.out_dir.join("kmc.csv"), &buf)?;
    outcome.artifacts.push("kmc.csv".into());
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// decay helper shared with the acceptance suite

/// Runs the decay certificate on one instance with the structural upper
/// bound; returns the worst normalized ratio.
pub fn instance_decay_check(
    c: &RateFunction,
    ell: usize,
    particles: usize,
    trajectories: usize,
    budget: &AscentBudget,
) -> Result<f64, CliError> {
    let space = StateSpace::enumerate(ell, particles)?;
    let gen = build_generator(&space, c, Flavor::Complete)?;
    let k = instance_constants(&gen, budget)?;
    let starts = random_positive_functions(&gen, trajectories, budget.seed ^ 0xdeca);
    let t_grid: Vec<f64> = (1..=20).map(|i| i as f64 * 0.15 * k.gamma_upper).collect();
    Ok(decay_certificate(&gen, k.gamma_upper, &starts, &t_grid)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verify_smallest_instance_passes() {
        let c = RateFunction::linear(8);
        assert!(run_verify(&c, 3, 2, Flavor::Complete, 1).unwrap());
        assert!(run_verify(&c, 3, 2, Flavor::Local, 1).unwrap());
    }

    #[test]
    fn experiment_runner_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let config = ExperimentConfig {
            rate_spec: "staircase:2".into(),
            ells: vec![3, 4],
            particle_counts: vec![2, 3],
            probes: vec![ProbeKind::Certify, ProbeKind::Constants],
            seed: 5,
            out_dir: dir.path().to_path_buf(),
            max_states: 5000,
            budgets: crate::config::Budgets { restarts: 2, iters: 80 },
            ..Default::default()
        };
        let code = run_experiment(&config).unwrap();
        assert_eq!(code, EXIT_OK);
        assert!(dir.path().join("manifest.json").exists());
        assert!(dir.path().join("sweep.csv").exists());
        assert!(dir.path().join("certify.csv").exists());
        let manifest = Manifest::load(&dir.path().join("manifest.json")).unwrap();
        assert!(manifest.all_hard_invariants_pass());
    }
}
