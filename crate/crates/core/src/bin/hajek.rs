use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use hajek::datasets;
use hajek::experiment::PotentialTable;
use hajek::io::{
    cluster_report, digest_experiment, digest_individual, individual_report, read_cluster_csv,
    read_individual_csv, read_potential_csv, DfChoice, EstimateOptions,
};
use hajek::randomize::DEFAULT_ENUMERATION_CAP;
use hajek::simulate::{enumerate_estimates, osnap_impute_constant_total, run_config, RunConfig, COMPARISON_ESTIMATORS, OSNAP_SITE_EFFECT};
use hajek::variance::Policy;
use hajek::{Error, Result};

/// Design-based effect estimation for stratified and cluster-randomized experiments.
#[derive(Parser)]
#[command(name = "hajek", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Point estimates, variance, score and Wald intervals for one experiment.
    Estimate(EstimateArgs),
    /// Run simulation scenarios from a configuration file or preset.
    Simulate(SimulateArgs),
    /// Exact randomization distribution of the estimators over all assignments.
    Enumerate(EnumerateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Auto,
    Small,
    Large,
}

impl From<PolicyArg> for Policy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Auto => Policy::Auto,
            PolicyArg::Small => Policy::ForceSmall,
            PolicyArg::Large => Policy::ForceLarge,
        }
    }
}

#[derive(Args)]
struct Source {
    /// CSV file to read.
    #[arg(long, conflicts_with = "dataset", required_unless_present = "dataset")]
    input: Option<PathBuf>,
    /// Bundled dataset name instead of a file.
    #[arg(long)]
    dataset: Option<String>,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    source: Source,
    /// Input holds individual records with covariates.
    #[arg(long)]
    individual: bool,
    /// Covariate columns (default: every extra column).
    #[arg(long, value_delimiter = ',', requires = "individual")]
    covariates: Option<Vec<String>>,
    #[arg(long, value_enum, default_value = "auto")]
    policy: PolicyArg,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Wald degrees of freedom: auto, z, or a positive integer.
    #[arg(long, default_value = "auto")]
    df: DfChoice,
    /// JSON report (the default).
    #[arg(long, conflicts_with = "csv")]
    json: bool,
    /// Flat CSV report.
    #[arg(long)]
    csv: bool,
    /// Recorded in the report provenance.
    #[arg(long)]
    seed: Option<u64>,
    /// Write to a file instead of standard output.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// TOML run configuration.
    #[arg(long, required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Preset name, used when no configuration file is given.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Output directory for summary.json and metrics.csv.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured Monte Carlo replicate count.
    #[arg(long)]
    n_mc: Option<usize>,
}

#[derive(Args)]
struct EnumerateArgs {
    #[command(flatten)]
    source: Source,
    /// Input is a potential-outcome table (stratum, cluster, weight, y0, y1)
    /// randomized with half of each stratum treated.
    #[arg(long, conflicts_with = "delta_total")]
    potential: bool,
    /// Site-total effect used to impute potential outcomes from observed data.
    #[arg(long, default_value_t = OSNAP_SITE_EFFECT)]
    delta_total: f64,
    /// Largest number of assignments to enumerate.
    #[arg(long, default_value_t = DEFAULT_ENUMERATION_CAP)]
    cap: u128,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

fn emit(output: Option<&Path>, text: &str) -> Result<()> {
    match output {
        Some(p) => fs::write(p, text).map_err(|e| Error::Io(format!("{}: {e}", p.display()))),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
            Ok(())
        }
    }
}

fn estimate(args: EstimateArgs) -> Result<()> {
    let opts = EstimateOptions {
        policy: args.policy.into(),
        level: args.level,
        df: args.df,
        seed: args.seed,
    };
    let report = if args.individual {
        let path = args.source.input.as_ref().ok_or_else(|| {
            Error::ConfigError("bundled datasets are cluster-level; --individual needs --input".into())
        })?;
        let (data, names) = read_individual_csv(path, args.covariates.as_deref())?;
        let digest = digest_individual(&data, &names);
        individual_report(&data, &names, &opts, digest)?
    } else {
        let data = match (&args.source.input, &args.source.dataset) {
            (Some(p), _) => read_cluster_csv(p)?,
            (None, Some(name)) => datasets::load(name)?,
            (None, None) => unreachable!("clap requires a source"),
        };
        let digest = digest_experiment(&data);
        cluster_report(&data, &opts, digest)?
    };
    let text = if args.csv { report.to_csv() } else { report.to_json() };
    emit(args.output.as_deref(), &text)
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let mut config = match (&args.config, &args.preset) {
        (Some(p), _) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?;
            RunConfig::from_toml(&text)?
        }
        (None, Some(name)) => RunConfig::from_toml(&format!("preset = {name:?}"))?,
        (None, None) => unreachable!("clap requires a configuration"),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(n) = args.n_mc {
        config.n_mc = n;
    }
    let run = run_config(&config)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::Io(format!("{}: {e}", args.out.display())))?;
    emit(Some(&args.out.join("summary.json")), &run.to_json())?;
    emit(Some(&args.out.join("metrics.csv")), &run.to_csv())
}

fn enumerate(args: EnumerateArgs) -> Result<()> {
    let table: PotentialTable = match (&args.source.input, &args.source.dataset, args.potential) {
        (Some(p), _, true) => read_potential_csv(p)?,
        (None, Some(_), true) => {
            return Err(Error::ConfigError("--potential needs --input".into()));
        }
        (Some(p), _, false) => osnap_impute_constant_total(&read_cluster_csv(p)?, args.delta_total)?,
        (None, Some(name), false) => osnap_impute_constant_total(&datasets::load(name)?, args.delta_total)?,
        (None, None, _) => unreachable!("clap requires a source"),
    };
    let layouts = table.balanced_layouts()?;
    let (rows, summary) = enumerate_estimates(&table, &layouts, args.cap)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    let num = |v: f64| serde_json::to_string(&v).unwrap_or_else(|_| format!("{v}"));
    let mut header = vec!["assignment".to_string()];
    header.extend(COMPARISON_ESTIMATORS.iter().map(|s| s.to_string()));
    let csv_err = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for (z, est) in &rows {
        let mut rec = vec![z.bits()];
        rec.extend(est.iter().map(|&v| num(v)));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let footer: [(&str, fn(&hajek::simulate::EstimatorMetrics) -> f64); 5] = [
        ("mean", |m| m.mean),
        ("truth", |m| m.mean - m.bias),
        ("bias", |m| m.bias),
        ("sd", |m| m.sd),
        ("rmse", |m| m.rmse),
    ];
    for (label, get) in footer {
        let mut rec = vec![label.to_string()];
        rec.extend(summary.estimators.iter().map(|m| num(get(m))));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    emit(args.output.as_deref(), &String::from_utf8(bytes).expect("csv is utf-8"))
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("HAJEK_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::ConfigError(format!("HAJEK_THREADS={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::ConfigError(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Estimate(a) => estimate(a),
        Command::Simulate(a) => simulate(a),
        Command::Enumerate(a) => enumerate(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
