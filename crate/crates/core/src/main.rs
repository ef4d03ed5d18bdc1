use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hspde::config::{Output, RunConfig};
use hspde::drivers::Driver;
use hspde::error::{Error, Result};
use hspde::kernels::{fbm_regularization_error, Kernel};
use hspde::oracle::{boundary_moments_mc, error_budget, moments_formula, scheme_moments, ErrorBudget};
use hspde::rng::{DRIFT, LEVY, SUBORDINATOR};
use hspde::scheme::{solve, solve_ensemble, GridSpec, Model, Realization, Retention, SolveOptions};
use hspde::validation::{benchmark, run_suite, Status};
use hspde::volatility::VolatilityModel;

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(name = "hspde", version, about = "Simulate Volterra processes as boundaries of a hyperbolic SPDE")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the configured model and write CSV outputs
    Simulate(RunArgs),
    /// Time the scheme against per-cell re-integration
    Benchmark(RunArgs),
    /// Run the invariant and oracle suites
    Validate(RunArgs),
    /// Simulate the regularized fBm approximation
    Fbm(FbmArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides run.seed
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides run.out_dir
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides run.paths
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct FbmArgs {
    #[arg(long)]
    hurst: f64,
    #[arg(long)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.001)]
    dt: f64,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    quiet: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Cfl { .. } => 3,
        Error::Config { .. } | Error::InvalidArgument(_) => 2,
        _ => 1,
    }
}

fn load(args: &RunArgs) -> Result<(RunConfig, String)> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| Error::Config { line: 0, message: format!("cannot read {}: {e}", args.config.display()) })?;
    let mut cfg = RunConfig::parse(&text)?;
    if let Some(seed) = args.seed {
        cfg.run.seed = seed;
    }
    if let Some(paths) = args.paths {
        if paths == 0 {
            return Err(Error::Config { line: 0, message: "--paths must be at least 1".into() });
        }
        cfg.run.paths = paths;
    }
    if let Some(out) = &args.out {
        cfg.run.out_dir = out.clone();
    }
    Ok((cfg, text))
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_boundary(dir: &Path, grid: &GridSpec, values: &[f64]) -> Result<()> {
    let mut w = create(dir, "boundary.csv")?;
    writeln!(w, "t,value")?;
    for (n, v) in values.iter().enumerate() {
        writeln!(w, "{:.16e},{v:.16e}", grid.time(n))?;
    }
    w.flush()?;
    Ok(())
}

struct Manifest {
    lines: Vec<String>,
}

impl Manifest {
    fn new(command: &str) -> Self {
        Manifest { lines: vec![format!("version: {VERSION}"), format!("command: {command}")] }
    }

    fn push(&mut self, key: &str, value: impl std::fmt::Display) {
        self.lines.push(format!("{key}: {value}"));
    }

    fn grid(&mut self, g: &GridSpec) {
        self.push("grid.t0", format!("{:.16e}", g.t0));
        self.push("grid.dt", format!("{:.16e}", g.dt));
        self.push("grid.steps", g.steps);
        self.push("grid.dx", format!("{:.16e}", g.dx));
        self.push("grid.nodes", g.nodes);
        self.push("grid.lambda", format!("{:.16e}", g.lambda()));
    }

    fn streams(&mut self, paths: usize) {
        let range = if paths == 1 { "0".to_string() } else { format!("0..{}", paths - 1) };
        self.push("streams", format!("{LEVY}[{range}], {SUBORDINATOR}[{range}], {DRIFT}[{range}]"));
        self.push("rng", "chacha8, stream = splitmix64(fnv1a(label) ^ splitmix64(index))");
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let mut w = create(dir, "manifest.txt")?;
        for l in &self.lines {
            writeln!(w, "{l}")?;
        }
        w.flush()?;
        Ok(())
    }
}

fn simulate(args: &RunArgs) -> Result<()> {
    let (cfg, text) = load(args)?;
    let (model, grid, run) = (&cfg.model, &cfg.grid, &cfg.run);
    let dir = &run.out_dir;
    fs::create_dir_all(dir)?;
    let wants = |o: Output| run.outputs.contains(&o);

    let retention = if wants(Output::Field) { Retention::Rectangle } else { Retention::Boundary };
    let options = SolveOptions { retention, truncation_tol: run.truncation_tol };
    let realization = Realization::sample(model, grid, run.seed, 0)?;
    let field = hspde::scheme::solve_with(model, grid, &realization, options)?;
    let boundary = field.boundary();
    let mut written = Vec::new();

    if wants(Output::Boundary) {
        write_boundary(dir, grid, &boundary)?;
        written.push("boundary.csv");
    }
    if wants(Output::Field) {
        let mut w = create(dir, "field.csv")?;
        field.write_csv(&mut w)?;
        w.flush()?;
        written.push("field.csv");
    }
    if wants(Output::Increments) {
        let mut w = create(dir, "increments.csv")?;
        realization.increments.write_csv(&mut w)?;
        w.flush()?;
        written.push("increments.csv");
    }
    if wants(Output::Paths) {
        let mut w = create(dir, "paths.csv")?;
        realization.paths.write_csv(&mut w)?;
        w.flush()?;
        written.push("paths.csv");
    }
    if run.paths > 1 {
        let fields = solve_ensemble(model, grid, run.seed, run.paths, SolveOptions { retention: Retention::Boundary, ..options })?;
        let mut w = create(dir, "ensemble.csv")?;
        writeln!(w, "t,mean,second_moment,mean_std_error")?;
        let count = fields.len() as f64;
        for n in 0..=grid.steps {
            let (mut s, mut s2) = (0.0, 0.0);
            for f in &fields {
                let v = f.boundary()[n];
                s += v;
                s2 += v * v;
            }
            let mean = s / count;
            let var = (s2 - count * mean * mean).max(0.0) / (count - 1.0);
            writeln!(w, "{:.16e},{mean:.16e},{:.16e},{:.16e}", grid.time(n), s2 / count, (var / count).sqrt())?;
        }
        w.flush()?;
        written.push("ensemble.csv");
    }
    if wants(Output::Moments) {
        let mut w = create(dir, "moments.txt")?;
        match moments_formula(model, grid.t0, grid.t_end()) {
            Ok(m) => {
                writeln!(w, "# closed form at t_N")?;
                write!(w, "{}", m.to_text())?;
            }
            Err(e) => writeln!(w, "# closed form unavailable: {e}")?,
        }
        if let Ok(m) = scheme_moments(model, grid) {
            writeln!(w, "# scheme boundary at t_N")?;
            write!(w, "{}", m.to_text())?;
        }
        if run.paths > 1 {
            let mc = boundary_moments_mc(model, grid, run.seed, run.paths)?;
            writeln!(w, "# Monte Carlo at t_N")?;
            writeln!(w, "paths: {}", mc.paths)?;
            writeln!(w, "mean: {:.16e}\nmean_std_error: {:.16e}", mc.mean, mc.mean_se)?;
            writeln!(w, "second_moment: {:.16e}\nsecond_moment_std_error: {:.16e}", mc.second_moment, mc.second_moment_se)?;
        }
        w.flush()?;
        written.push("moments.txt");
    }
    if wants(Output::Budget) {
        let budgets = (1..=grid.steps).map(|n| error_budget(model, grid, n)).collect::<Result<Vec<_>>>()?;
        let mut w = create(dir, "budget.csv")?;
        writeln!(w, "{}", ErrorBudget::csv_header())?;
        for b in &budgets {
            writeln!(w, "{}", b.csv_row())?;
        }
        w.flush()?;
        let mut w = create(dir, "budget.txt")?;
        write!(w, "{}", budgets.last().expect("at least one step").to_text())?;
        w.flush()?;
        written.extend(["budget.csv", "budget.txt"]);
    }

    let mut m = Manifest::new("simulate");
    m.push("config_sha256", &cfg.hash);
    m.push("seed", run.seed);
    m.push("paths", run.paths);
    m.streams(run.paths);
    m.grid(grid);
    m.push("boundary_mode", format!("{:?}", model.boundary));
    m.push("files", written.join(", "));
    for warning in &field.warnings {
        m.push("warning", warning);
        if !args.quiet {
            eprintln!("warning: {warning}");
        }
    }
    m.push("config", "");
    m.lines.extend(text.lines().map(|l| format!("  {l}")));
    m.write(dir)?;
    if !args.quiet {
        println!("wrote {} to {}", written.join(", "), dir.display());
    }
    Ok(())
}

fn bench(args: &RunArgs) -> Result<ExitCode> {
    let (cfg, _) = load(args)?;
    let report = benchmark(&cfg.model, &cfg.grid, cfg.run.seed, cfg.run.bench_runs)?;
    print!("{}", report.to_text());
    if report.identical.is_none() && !args.quiet {
        eprintln!("notice: dt != dx, equality of the two methods is not expected and was not asserted");
    }
    Ok(if report.identical == Some(false) { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn validate(args: &RunArgs) -> Result<ExitCode> {
    let (cfg, _) = load(args)?;
    let quiet = args.quiet;
    let checks = run_suite(&cfg, |name| {
        if !quiet {
            eprintln!("running {name}");
        }
    });
    for c in &checks {
        println!("{}", c.line());
    }
    let failed = checks.iter().filter(|c| c.status == Status::Fail).count();
    println!("{} passed, {failed} failed, {} skipped", checks.iter().filter(|c| c.status == Status::Pass).count(),
        checks.iter().filter(|c| c.status == Status::Skip).count());
    Ok(if failed > 0 { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn fbm(args: &FbmArgs) -> Result<()> {
    let kernel = Kernel::regularized_fbm(args.hurst, args.epsilon)?;
    let reg = fbm_regularization_error(args.hurst, args.epsilon)?;
    let grid = GridSpec::new(0.0, args.dt, args.steps, args.dt, 0)?;
    let model = Model::new(kernel, VolatilityModel::Constant(1.0), Driver::brownian(1.0)?);
    let field = solve(&model, &grid, args.seed, 0, SolveOptions { retention: Retention::Boundary, ..Default::default() })?;
    fs::create_dir_all(&args.out)?;
    write_boundary(&args.out, &grid, &field.boundary())?;

    let mut m = Manifest::new("fbm");
    m.push("hurst", format!("{:.16e}", args.hurst));
    m.push("epsilon", format!("{:.16e}", args.epsilon));
    m.push("regularization_bound", format!("{:.16e}", reg.bound));
    m.push("regularization_l2_sq", format!("{:.16e}", reg.exact));
    m.push("seed", args.seed);
    m.streams(1);
    m.grid(&grid);
    m.push("files", "boundary.csv");
    m.write(&args.out)?;
    if !args.quiet {
        println!("wrote boundary.csv to {}; regularization bound {:.6e}", args.out.display(), reg.bound);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(a) => simulate(a).map(|_| ExitCode::SUCCESS),
        Command::Benchmark(a) => bench(a),
        Command::Validate(a) => validate(a),
        Command::Fbm(a) => fbm(a).map(|_| ExitCode::SUCCESS),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
