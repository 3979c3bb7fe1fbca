use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use geochord::experiment::{check_report, compare_report, run_experiment, ExperimentKind, Tolerance};
use geochord::{Experiment, MetricsReport, SimConfig};

/// Directory that receives reports and artifacts when set.
const OUT_DIR_VAR: &str = "GEOCHORD_OUT_DIR";

/// Exit status when a `--check` or `compare` tolerance fails.
const TOLERANCE_FAILURE: u8 = 2;

#[derive(Parser)]
#[command(name = "sim", version, about = "Run geochord overlay experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and print its report.
    Run(RunArgs),
    /// Compare two JSON reports of the same grid.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Allowed absolute difference on top of the stderr band.
        #[arg(long, default_value_t = 1e-9)]
        absolute: f64,
        /// Width of the stderr band.
        #[arg(long, default_value_t = 2.0)]
        sigmas: f64,
    },
    /// List experiment names.
    List,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long, value_parser = parse_kind)]
    experiment: ExperimentKind,
    /// TOML file; unspecified keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `nodes` and clears any sweep.
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    neighborhood: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long, value_enum, default_value = "csv")]
    out: Format,
    /// Record per-hop traces of sample lookups.
    #[arg(long)]
    trace: bool,
    /// Evaluate the experiment's tolerances and fail with status 2 on a miss.
    #[arg(long)]
    check: bool,
}

fn parse_kind(s: &str) -> Result<ExperimentKind, String> {
    s.parse().map_err(|e: geochord::experiment::ExperimentError| e.to_string())
}

fn load_config(args: &RunArgs) -> Result<SimConfig> {
    let mut cfg = match &args.config {
        Some(p) => SimConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => SimConfig::default(),
    };
    if let Some(n) = args.nodes {
        cfg.nodes = n;
        cfg.sweep.clear();
    }
    if let Some(k) = args.k {
        cfg.k = k;
    }
    if args.height.is_some() {
        cfg.height = args.height;
    }
    if let Some(m) = args.neighborhood {
        cfg.neighborhood = m;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(r) = args.repetitions {
        cfg.repetitions = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn encode(report: &MetricsReport, format: Format) -> String {
    match format {
        Format::Csv => report.to_csv(),
        Format::Json => report.to_json() + "\n",
    }
}

fn write_outputs(dir: &Path, report: &MetricsReport, cfg: &SimConfig) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let stem = &report.experiment;
    std::fs::write(dir.join(format!("{stem}.csv")), report.to_csv())?;
    std::fs::write(dir.join(format!("{stem}.json")), report.to_json() + "\n")?;
    std::fs::write(dir.join(format!("{stem}.config.toml")), cfg.to_toml())?;
    for (name, body) in &report.artifacts {
        std::fs::write(dir.join(name), body)?;
    }
    Ok(())
}

fn run(args: RunArgs) -> Result<ExitCode> {
    let cfg = load_config(&args)?;
    let mut exp = Experiment::new(args.experiment, cfg.clone());
    exp.trace = args.trace;
    let report = run_experiment(&exp)?;
    print!("{}", encode(&report, args.out));
    match std::env::var_os(OUT_DIR_VAR) {
        Some(dir) => write_outputs(Path::new(&dir), &report, &cfg)?,
        None if !report.artifacts.is_empty() => {
            eprintln!("{} artifacts not saved; set {OUT_DIR_VAR} to keep them", report.artifacts.len())
        }
        None => {}
    }
    if args.check {
        let checks = check_report(&report, &cfg);
        for c in &checks {
            eprintln!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        if checks.iter().any(|c| !c.pass) {
            return Ok(ExitCode::from(TOLERANCE_FAILURE));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn compare(a: &Path, b: &Path, tol: Tolerance) -> Result<ExitCode> {
    let read = |p: &Path| -> Result<MetricsReport> {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        Ok(MetricsReport::from_json(&text)?)
    };
    let cmp = compare_report(&read(a)?, &read(b)?, tol)?;
    println!("point,statistic,a,b,delta,tolerance,pass");
    for d in &cmp.deltas {
        let point: Vec<String> = d.point.iter().map(|(k, v)| format!("{k}={v}")).collect();
        println!(
            "{},{},{:?},{:?},{:?},{:?},{}",
            point.join(";"),
            d.statistic,
            d.a,
            d.b,
            d.delta,
            d.tolerance,
            d.pass
        );
    }
    Ok(if cmp.all_pass() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(TOLERANCE_FAILURE)
    })
}

fn main() -> ExitCode {
    // Usage errors exit 1 so that status 2 always means a tolerance miss.
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Compare { a, b, absolute, sigmas } => compare(&a, &b, Tolerance { absolute, sigmas }),
        Command::List => {
            for name in ExperimentKind::names() {
                println!("{name}");
            }
            Ok(ExitCode::SUCCESS)
        }
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::FAILURE
    })
}
