use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use factorseg::bench::{run_bench, BenchConfig, GridBounds, Method};
use factorseg::em::{em_fit, EmOptions};
use factorseg::io::{
    ingest_csv, read_json, write_csv_rows, write_json, write_series_csv, FitDocument, TruthDocument,
};
use factorseg::metrics::score;
use factorseg::selection::{select, SelectOptions, SelectionGrid};
use factorseg::simgen::{default_kbar, simulate_replicate, NoiseKind, SimConfig};
use factorseg::{Error, Exec, NoiseMode};

#[derive(Parser)]
#[command(name = "factorseg", version, about = "Joint breakpoint detection in correlated series")]
struct Cli {
    /// Worker threads (default: all cores; 1 runs sequentially).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a panel and its ground truth.
    Simulate(SimulateArgs),
    /// Fit a model with fixed K and Q.
    Fit(FitArgs),
    /// Choose K and Q over a grid and fit the chosen model.
    Select(SelectArgs),
    /// Score a fitted model against a simulated truth.
    Evaluate(EvaluateArgs),
    /// Monte-Carlo benchmark over simulated replicates.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseModeArg {
    Homoscedastic,
    Heteroscedastic,
}

impl From<NoiseModeArg> for NoiseMode {
    fn from(a: NoiseModeArg) -> Self {
        match a {
            NoiseModeArg::Homoscedastic => NoiseMode::Homoscedastic,
            NoiseModeArg::Heteroscedastic => NoiseMode::Heteroscedastic,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseKindArg {
    Gaussian,
    Student,
    Wishart,
}

#[derive(Args)]
struct EmArgs {
    #[arg(long, value_enum, default_value = "homoscedastic")]
    noise_mode: NoiseModeArg,
    /// Relative change of -2 log L below which EM stops.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    #[arg(long, default_value_t = 1)]
    min_seg_len: usize,
}

impl EmArgs {
    fn options(&self, exec: Exec) -> anyhow::Result<EmOptions> {
        let opts = EmOptions {
            max_iter: self.max_iter,
            rel_tol: self.tol,
            noise_mode: self.noise_mode.into(),
            min_seg_len: self.min_seg_len,
            exec,
        };
        opts.validate()?;
        Ok(opts)
    }
}

#[derive(Args)]
struct SimArgs {
    #[arg(long, default_value_t = 10)]
    m: usize,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0.2)]
    sigma: f64,
    #[arg(long, default_value_t = 0.8)]
    rho: f64,
    #[arg(long, default_value_t = 0.2)]
    alpha: f64,
    /// Mean breakpoints per series (default: 3 for n <= 50, else 5).
    #[arg(long)]
    kbar: Option<f64>,
    #[arg(long, value_enum, default_value = "gaussian")]
    noise_kind: NoiseKindArg,
    /// Degrees of freedom for Student or Wishart noise.
    #[arg(long)]
    df: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SimArgs {
    fn config(&self) -> anyhow::Result<SimConfig> {
        let noise = match (self.noise_kind, self.df) {
            (NoiseKindArg::Gaussian, None) => NoiseKind::Gaussian,
            (NoiseKindArg::Gaussian, Some(_)) => bail!(usage("--df is only used with student or wishart noise")),
            (NoiseKindArg::Student, Some(df)) => NoiseKind::Student { df },
            (NoiseKindArg::Wishart, Some(df)) => NoiseKind::Wishart { df },
            (_, None) => bail!(usage("--df is required for student and wishart noise")),
        };
        let mut cfg = SimConfig::new(self.m, self.n, self.sigma, self.rho)
            .with_noise(noise)
            .with_seed(self.seed);
        cfg.alpha = self.alpha;
        cfg.kbar = self.kbar.unwrap_or_else(|| default_kbar(self.n));
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    sim: SimArgs,
    /// Replicate index (RNG stream) to draw.
    #[arg(long, default_value_t = 0)]
    replicate: u64,
    /// Output CSV of the panel.
    #[arg(long)]
    output: PathBuf,
    /// Output JSON of the ground truth.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    input: PathBuf,
    /// Total number of segments over all series.
    #[arg(long)]
    k: usize,
    /// Number of factors.
    #[arg(long)]
    q: usize,
    #[command(flatten)]
    em: EmArgs,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    input: PathBuf,
    /// Smallest K in the grid (default M).
    #[arg(long)]
    kmin: Option<usize>,
    /// Largest K in the grid (default M + N/25).
    #[arg(long)]
    kmax: Option<usize>,
    /// Largest Q in the grid (default M - 1).
    #[arg(long)]
    qmax: Option<usize>,
    #[command(flatten)]
    em: EmArgs,
    #[arg(long)]
    output: PathBuf,
    /// Optional CSV of every grid cell.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Fit JSON written by `fit` or `select`.
    #[arg(long)]
    input: PathBuf,
    /// Truth JSON written by `simulate`.
    #[arg(long)]
    truth: PathBuf,
    /// Breakpoint matching tolerance in time points.
    #[arg(long, default_value_t = 0)]
    window: usize,
    /// Output CSV (default: stdout).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    sim: SimArgs,
    #[arg(long, default_value_t = 25)]
    replicates: usize,
    #[arg(long)]
    kmin: Option<usize>,
    #[arg(long)]
    kmax: Option<usize>,
    #[arg(long)]
    qmax: Option<usize>,
    /// Comma-separated subset of qhat_khat, q0_khat, qstar_khat, qhat_kstar.
    #[arg(long, value_delimiter = ',', default_value = "qhat_khat,q0_khat,qstar_khat,qhat_kstar")]
    methods: Vec<String>,
    #[arg(long, default_value_t = 0)]
    window: usize,
    #[command(flatten)]
    em: EmArgs,
    /// Per-replicate CSV.
    #[arg(long)]
    output: PathBuf,
    /// Summary CSV (means and quartiles).
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: &str) -> Usage {
    Usage(msg.to_string())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Numerical(_) | Error::AllCellsFailed) => 3,
        Some(Error::InvalidParameter(_) | Error::InfeasibleSegments(_)) => 1,
        _ => 2,
    }
}

fn exec_mode(threads: Option<usize>) -> anyhow::Result<Exec> {
    match threads {
        Some(0) => bail!(usage("--threads must be at least 1")),
        Some(1) => Ok(Exec::Sequential),
        #[cfg(feature = "parallel")]
        Some(t) => {
            rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build_global()
                .context("configuring the thread pool")?;
            Ok(Exec::Parallel)
        }
        #[cfg(not(feature = "parallel"))]
        Some(_) => Ok(Exec::Sequential),
        None if cfg!(feature = "parallel") => Ok(Exec::Parallel),
        None => Ok(Exec::Sequential),
    }
}

#[derive(Serialize)]
struct CellRow {
    k: usize,
    q: usize,
    loglik: Option<f64>,
    bic: Option<f64>,
    mbic: Option<f64>,
    iterations: Option<usize>,
    converged: Option<bool>,
    error: Option<String>,
}

#[derive(Serialize)]
struct ScoreRow {
    k_true: usize,
    k_hat: usize,
    q_hat: usize,
    true_breakpoints: usize,
    detected: usize,
    matched: usize,
    fpr: f64,
    tpr: f64,
    rmse_sigma: f64,
    rmse_mean: f64,
}

fn create(path: &Path) -> anyhow::Result<File> {
    File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())).into())
}

fn run_simulate(a: &SimulateArgs) -> anyhow::Result<()> {
    let cfg = a.sim.config()?;
    let (y, truth) = simulate_replicate(&cfg, a.replicate)?;
    write_series_csv(&a.output, y.values())?;
    if let Some(path) = &a.truth {
        write_json(path, &TruthDocument::new(&cfg, a.replicate, &truth))?;
    }
    log::info!("simulated n={} M={} K*={}", y.n(), y.m(), truth.segmentation.total_segments());
    Ok(())
}

fn run_fit(a: &FitArgs, exec: Exec) -> anyhow::Result<()> {
    let y = ingest_csv(&a.input)?;
    let opts = a.em.options(exec)?;
    let fit = em_fit(&y, a.k, a.q, &opts)?;
    write_json(&a.output, &FitDocument::from_fit(&y, &fit)?)?;
    Ok(())
}

fn run_select(a: &SelectArgs, exec: Exec) -> anyhow::Result<()> {
    let y = ingest_csv(&a.input)?;
    let (n, m) = (y.n(), y.m());
    let mut grid = SelectionGrid::default_for(n, m);
    if a.kmin.is_some() || a.kmax.is_some() || a.qmax.is_some() {
        let k_max = a.kmax.unwrap_or(*grid.k_values.last().unwrap_or(&m));
        let q_max = a.qmax.unwrap_or(m - 1);
        grid = SelectionGrid::with_bounds(n, m, k_max, q_max);
        let k_min = a.kmin.unwrap_or(m);
        grid.k_values.retain(|&k| k >= k_min);
    }
    grid.validate(n, m).map_err(|e| usage(&e.to_string()))?;
    let opts = SelectOptions {
        em: a.em.options(Exec::Sequential)?,
        warm_start: true,
        keep_fits: false,
        exec,
    };
    let table = select(&y, &grid, &opts)?;
    log::info!("selected K={} Q={}", table.k_hat(), table.q_hat());
    write_json(&a.output, &FitDocument::from_fit(&y, &table.fit)?)?;
    if let Some(path) = &a.table {
        let rows: Vec<CellRow> = table
            .cells
            .iter()
            .map(|c| match &c.outcome {
                Ok(s) => CellRow {
                    k: c.k,
                    q: c.q,
                    loglik: Some(s.loglik),
                    bic: Some(s.bic),
                    mbic: Some(s.mbic),
                    iterations: Some(s.iterations),
                    converged: Some(s.converged),
                    error: None,
                },
                Err(e) => CellRow {
                    k: c.k,
                    q: c.q,
                    loglik: None,
                    bic: None,
                    mbic: None,
                    iterations: None,
                    converged: None,
                    error: Some(e.clone()),
                },
            })
            .collect();
        write_csv_rows(create(path)?, &rows)?;
    }
    Ok(())
}

fn run_evaluate(a: &EvaluateArgs) -> anyhow::Result<()> {
    let fit = read_json::<FitDocument>(&a.input)?.to_fit()?;
    let truth = read_json::<TruthDocument>(&a.truth)?.to_truth()?;
    let s = score(&fit.segmentation, &fit.sigma(), &fit.mean_matrix(), &truth, a.window)?;
    let row = ScoreRow {
        k_true: truth.segmentation.total_segments(),
        k_hat: fit.k(),
        q_hat: fit.q(),
        true_breakpoints: s.counts.true_bps,
        detected: s.counts.detected,
        matched: s.counts.matched,
        fpr: s.fpr,
        tpr: s.tpr,
        rmse_sigma: s.rmse_sigma,
        rmse_mean: s.rmse_mean,
    };
    match &a.output {
        Some(path) => write_csv_rows(create(path)?, &[row])?,
        None => write_csv_rows(std::io::stdout().lock(), &[row])?,
    }
    Ok(())
}

fn run_bench_cmd(a: &BenchArgs, exec: Exec) -> anyhow::Result<()> {
    let mut methods = Vec::new();
    for name in &a.methods {
        match Method::parse(name.trim()) {
            Some(m) if !methods.contains(&m) => methods.push(m),
            Some(_) => {}
            None => bail!(usage(&format!("unknown method '{name}'"))),
        }
    }
    let cfg = BenchConfig {
        sim: a.sim.config()?,
        replicates: a.replicates,
        grid: GridBounds {
            k_min: a.kmin,
            k_max: a.kmax,
            q_max: a.qmax,
        },
        em: a.em.options(Exec::Sequential)?,
        window: a.window,
        methods,
        exec,
    };
    cfg.validate().map_err(|e| usage(&e.to_string()))?;
    let out = run_bench(&cfg)?;
    write_csv_rows(create(&a.output)?, &out.rows)?;
    if let Some(path) = &a.summary {
        write_csv_rows(create(path)?, &out.summary(&cfg.methods))?;
    }
    if !out.failures.is_empty() {
        log::warn!("{} replicate/method runs failed", out.failures.len());
    }
    let mut err = std::io::stderr().lock();
    for s in out.summary(&cfg.methods).iter().filter(|s| s.metric != "rmse_mean") {
        writeln!(err, "{:<11} {:<20} mean {:>9.4}  (n={}, failed={})", s.method, s.metric, s.mean, s.count, s.failures)?;
    }
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let exec = exec_mode(cli.threads)?;
    match &cli.command {
        Command::Simulate(a) => run_simulate(a),
        Command::Fit(a) => run_fit(a, exec),
        Command::Select(a) => run_select(a, exec),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Bench(a) => run_bench_cmd(a, exec),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
