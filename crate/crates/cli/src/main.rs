use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use vmf_pmle::degeneracy::{anchored_base_mixture, divergence_sequence, most_isolated_observation, verify_ball_count_bounds, EpsilonMode};
use vmf_pmle::em::{fit, EmConfig, Init, KappaUpdate};
use vmf_pmle::io::{self, FitMetadata};
use vmf_pmle::model::{check_penalty_conditions, sample_mixture, sample_uniform_sphere};
use vmf_pmle::sim::run_experiment;
use vmf_pmle::special::log_sphere_area;
use vmf_pmle::sphere::{max_density_estimate, DEFAULT_DENSITY_GRID};
use vmf_pmle::{Error, PenaltyConfig, PenaltySpec, UnitVector, VmfComponent, VmfMixture};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_FIT: u8 = 4;

#[derive(Parser)]
#[command(name = "vmf-pmle", version, about = "Penalized EM for von Mises-Fisher mixtures")]
struct Cli {
    /// Random seed for every stochastic step.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file (a directory for `simulate`); stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a p-component mixture to a dataset.
    Fit(FitArgs),
    /// Draw a dataset from a model.
    Sample(SampleArgs),
    /// Run a simulation study described by a spec file.
    Simulate(SimulateArgs),
    /// Log-likelihood along a degenerate sequence of mixtures.
    Degeneracy(DegeneracyArgs),
    /// Check the penalty growth conditions on a grid of sample sizes.
    CheckPenalty(CheckPenaltyArgs),
    /// Monte Carlo check of the ball-count bounds for a model.
    VerifyLemmas(VerifyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum KappaArg {
    Approx,
    Exact,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Random,
    Kmeans,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Fixed,
    Small,
}

#[derive(Args)]
struct FitArgs {
    /// Dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Number of components.
    #[arg(long)]
    p: usize,
    /// Penalty: `zeta=<z>` (psi_n = z/n), `psi=<value>` or `circular`.
    #[arg(long, default_value = "zeta=1")]
    psi: String,
    #[arg(long, value_enum, default_value = "approx")]
    kappa_update: KappaArg,
    #[arg(long, value_enum, default_value = "random")]
    init: InitArg,
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Project rows that are not unit length back onto the sphere.
    #[arg(long)]
    renormalize: bool,
}

#[derive(Args)]
struct SampleArgs {
    /// Model file; otherwise a single component from --d, --kappa and --mu.
    #[arg(long, conflicts_with_all = ["d", "kappa", "mu"])]
    model: Option<PathBuf>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    kappa: Option<f64>,
    /// Mean direction as comma-separated coordinates (default: first axis).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    mu: Option<Vec<f64>>,
    #[arg(long)]
    n: usize,
    /// Also write component labels, one per line.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Experiment spec (TOML).
    #[arg(long)]
    spec: PathBuf,
}

#[derive(Args)]
struct DegeneracyArgs {
    /// Dataset file; otherwise a uniform sample of size --n in dimension --d.
    #[arg(long, conflicts_with_all = ["d", "n"])]
    data: Option<PathBuf>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 10_000)]
    q_max: u64,
    /// Penalty for the penalized column (none by default).
    #[arg(long)]
    psi: Option<String>,
}

#[derive(Args)]
struct CheckPenaltyArgs {
    #[arg(long, default_value = "zeta=1")]
    psi: String,
    #[arg(long)]
    d: usize,
    #[arg(long, value_delimiter = ',', default_value = "1000,10000,100000,1000000")]
    n_grid: Vec<u64>,
    /// Density maximum M; defaults to the uniform density, or to the
    /// maximum of --model when given.
    #[arg(long, conflicts_with = "model")]
    max_density: Option<f64>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Dataset used to resolve a `circular` penalty.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "100000")]
    n: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, value_enum, default_value = "fixed")]
    mode: ModeArg,
}

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(Error::Io(e))
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(Failure::Usage(msg.into()))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_) | Error::Domain(_) => EXIT_USAGE,
        Error::FitFailure { .. } | Error::DegenerateComponent { .. } => EXIT_FIT,
        _ => EXIT_DATA,
    }
}

fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn run_fit(cli: &Cli, a: &FitArgs) -> CliResult<()> {
    let data = io::read_dataset(&a.data, a.renormalize)?;
    if a.p == 0 {
        return usage("--p must be at least 1");
    }
    if a.p > data.points.len() {
        return usage(format!("--p {} exceeds the number of observations ({})", a.p, data.points.len()));
    }
    let mut cfg = EmConfig::new(a.p);
    cfg.penalty = io::parse_penalty(&a.psi)?;
    cfg.kappa_update = match a.kappa_update {
        KappaArg::Approx => KappaUpdate::Approx,
        KappaArg::Exact => KappaUpdate::Exact,
    };
    cfg.init = match a.init {
        InitArg::Random => Init::RandomRestarts,
        InitArg::Kmeans => Init::KMeansSeeded,
    };
    cfg.restarts = a.restarts;
    cfg.max_iters = a.max_iters;
    cfg.tol = a.tol;
    cfg.seed = cli.seed.unwrap_or(0);
    let report = fit(&data.points, &cfg)?;
    let meta = FitMetadata {
        pll: report.final_pll(),
        iterations: report.iterations,
        converged: report.converged,
        seed: cfg.seed,
        psi_n: report.penalty.psi_n,
        renormalized: data.renormalized,
    };
    emit(cli.out.as_deref(), &io::format_model(&report.mixture, Some(&meta))?)?;
    let summary = format!(
        "pll={:.10} iterations={} converged={}",
        meta.pll, meta.iterations, meta.converged
    );
    if cli.out.is_some() {
        println!("{summary}");
    } else {
        eprintln!("{summary}");
    }
    Ok(())
}

fn run_sample(cli: &Cli, a: &SampleArgs) -> CliResult<()> {
    if a.n == 0 {
        return usage("--n must be at least 1");
    }
    let mix = match &a.model {
        Some(path) => io::read_model(path)?.0,
        None => {
            let (Some(d), Some(kappa)) = (a.d, a.kappa) else {
                return usage("give --model, or --d and --kappa");
            };
            let mu = match &a.mu {
                Some(v) if v.len() != d => return usage(format!("--mu has {} coordinates, expected {d}", v.len())),
                Some(v) => UnitVector::new(v.clone())?,
                None => UnitVector::basis(d, 0)?,
            };
            VmfMixture::single(VmfComponent::new(mu, kappa)?)
        }
    };
    let (points, labels) = sample_mixture(&mix, a.n, cli.seed.unwrap_or(0))?;
    emit(cli.out.as_deref(), &io::format_dataset(&points)?)?;
    if let Some(path) = &a.labels {
        fs::write(path, io::format_labels(&labels))?;
    }
    Ok(())
}

fn run_simulate(cli: &Cli, a: &SimulateArgs) -> CliResult<()> {
    let mut specs = io::read_experiment_specs(&a.spec)?;
    if let Some(seed) = cli.seed {
        for s in &mut specs {
            s.seed = seed;
            s.em.seed = seed;
        }
    }
    let tables = specs.iter().map(run_experiment).collect::<vmf_pmle::Result<Vec<_>>>()?;
    let text = io::format_table_text(&tables);
    match &cli.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            for t in &tables {
                fs::write(dir.join(format!("d{}_n{}.csv", t.d, t.n)), io::format_table_csv(std::slice::from_ref(t)))?;
            }
            fs::write(dir.join("table.csv"), io::format_table_csv(&tables))?;
            fs::write(dir.join("table.txt"), &text)?;
        }
        None => print!("{text}"),
    }
    for t in &tables {
        if t.failures > 0 || t.not_converged > 0 {
            eprintln!(
                "d={} n={}: {} failed fits excluded, {} fits hit the iteration limit",
                t.d, t.n, t.failures, t.not_converged
            );
        }
    }
    Ok(())
}

fn run_degeneracy(cli: &Cli, a: &DegeneracyArgs) -> CliResult<()> {
    let points = match &a.data {
        Some(path) => io::read_dataset(path, false)?.points,
        None => {
            let (d, n) = (a.d.unwrap_or(2), a.n.unwrap_or(50));
            if d < 2 || n < 2 {
                return usage("synthetic data needs --d >= 2 and --n >= 2");
            }
            sample_uniform_sphere(d, n, cli.seed.unwrap_or(0))?
        }
    };
    if a.q_max == 0 {
        return usage("--q-max must be at least 1");
    }
    let penalty = match &a.psi {
        Some(s) => io::parse_penalty(s)?.resolve(&points)?,
        None => PenaltyConfig::none(),
    };
    let m = most_isolated_observation(&points)?;
    let base = anchored_base_mixture(&points, m)?;
    let trace = divergence_sequence(&points, &base, (0, m), a.q_max, &penalty)?;
    emit(cli.out.as_deref(), &io::format_trace_csv(&trace))
}

fn run_check_penalty(cli: &Cli, a: &CheckPenaltyArgs) -> CliResult<()> {
    let cfg = match io::parse_penalty(&a.psi)? {
        PenaltySpec::Zeta(z) => PenaltyConfig::zeta(z, 1)?,
        PenaltySpec::Fixed(psi) => PenaltyConfig::fixed(psi)?,
        PenaltySpec::CircularVariance => match &a.data {
            Some(path) => PenaltyConfig::circular_variance(&io::read_dataset(path, false)?.points)?,
            None => return usage("a circular penalty needs --data"),
        },
    };
    let max_density = match (&a.model, a.max_density) {
        (Some(path), _) => {
            let mix = io::read_model(path)?.0;
            if mix.dim() != a.d {
                return usage(format!("model has d = {}, but --d is {}", mix.dim(), a.d));
            }
            max_density_estimate(&mix, DEFAULT_DENSITY_GRID)?
        }
        (None, Some(m)) => m,
        (None, None) => (-log_sphere_area(a.d)?).exp(),
    };
    let report = check_penalty_conditions(&cfg, a.d, &a.n_grid, max_density)?;
    emit(cli.out.as_deref(), &io::format_penalty_report(&report))
}

fn run_verify(cli: &Cli, a: &VerifyArgs) -> CliResult<()> {
    let mix = io::read_model(&a.model)?.0;
    let mode = match a.mode {
        ModeArg::Fixed => EpsilonMode::FixedRegime,
        ModeArg::Small => EpsilonMode::SmallRegime,
    };
    let report = verify_ball_count_bounds(&mix, &a.n, mode, a.trials, cli.seed.unwrap_or(0))?;
    let mut text = io::format_ball_report_csv(&report);
    text.push_str(&format!(
        "# M={:.6e} trials={} result={}\n",
        report.max_density,
        report.trials,
        if report.pass { "pass" } else { "fail" }
    ));
    emit(cli.out.as_deref(), &text)
}

fn run(cli: &Cli) -> CliResult<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return usage("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    match &cli.command {
        Command::Fit(a) => run_fit(cli, a),
        Command::Sample(a) => run_sample(cli, a),
        Command::Simulate(a) => run_simulate(cli, a),
        Command::Degeneracy(a) => run_degeneracy(cli, a),
        Command::CheckPenalty(a) => run_check_penalty(cli, a),
        Command::VerifyLemmas(a) => run_verify(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
