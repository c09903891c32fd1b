//! Command-line driver shared by the `unfoldfed` binary and the tests.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_config, ExperimentConfig, Mode};
use crate::error::{Error, Result};
use crate::experiment::{partition_summary, prepare, run_mode, write_artifacts};
use crate::report::{self, ChartKind};
use crate::unfolding::gradcheck;

pub const EXIT_OK: u8 = 0;
pub const EXIT_VERIFICATION: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_IO: u8 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "unfoldfed",
    version,
    about = "Federated learning with learned aggregation weights"
)]
pub struct Cli {
    /// Worker threads for client updates. Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the client shards and print their statistics.
    Partition(CommonArgs),
    /// Train in the selected mode and write history, weights, charts and manifest.
    Run(CommonArgs),
    /// Compare the analytic meta-gradient with finite differences.
    Gradcheck(GradcheckArgs),
    /// Re-render charts from a history CSV.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON experiment config. Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Output directory, overriding the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Use this value for every seed stream.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub instances: Option<usize>,
    /// Negates the analytic gradient; the check must then fail.
    #[arg(long, hide = true)]
    pub flip_sign: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// A history CSV written by `run`.
    #[arg(long)]
    pub input: PathBuf,
    /// Directory for the charts; defaults to the CSV's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Exit status for a library error.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } => EXIT_CONFIG,
        Error::Io { .. } | Error::Idx { .. } | Error::Json(_) => EXIT_IO,
        _ => EXIT_VERIFICATION,
    }
}

fn load_config(args: &CommonArgs) -> Result<ExperimentConfig> {
    let mut config = match &args.config {
        Some(path) => parse_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(mode) = args.mode {
        config.mode = mode;
    }
    if let Some(seed) = args.seed {
        config.override_seed(seed);
    }
    if let Some(out) = &args.out {
        config.out_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

/// Runs a parsed command line, honouring `--threads`.
pub fn execute(cli: &Cli) -> Result<u8> {
    match cli.threads {
        Some(0) => Err(Error::config("threads", "must be >= 1")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::config("threads", e.to_string()))?
            .install(|| dispatch(&cli.command)),
        None => dispatch(&cli.command),
    }
}

fn dispatch(command: &Command) -> Result<u8> {
    match command {
        Command::Partition(args) => cmd_partition(args),
        Command::Run(args) => cmd_run(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn cmd_partition(args: &CommonArgs) -> Result<u8> {
    let config = load_config(args)?;
    let federation = prepare(&config)?;
    let summary = partition_summary(&federation)?;
    let text = serde_json::to_string_pretty(&summary)?;
    println!("{text}");
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("partition.json");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(EXIT_OK)
}

fn cmd_run(args: &CommonArgs) -> Result<u8> {
    let start = Instant::now();
    let config = load_config(args)?;
    let federation = prepare(&config)?;
    let outcome = run_mode(&config, &federation)?;
    write_artifacts(&config, &outcome, &config.out_dir)?;
    for (phase, secs) in &outcome.history.timings {
        println!("{phase}: {secs:.2}s");
    }
    println!("mode: {}", outcome.mode);
    println!("final test accuracy: {:.4}", outcome.final_accuracy());
    println!("wall-clock: {:.2}s", start.elapsed().as_secs_f64());
    println!("artifacts: {}", config.out_dir.display());
    Ok(EXIT_OK)
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<u8> {
    let mut config = load_config(&args.common)?;
    if let Some(eps) = args.epsilon {
        config.gradcheck.epsilon = eps;
    }
    if let Some(n) = args.instances {
        config.gradcheck.instances = n;
    }
    config.validate()?;
    let g = config.gradcheck;
    let report = gradcheck::run(g.instances, g.epsilon, g.seed, args.flip_sign)?;
    println!(
        "gradcheck: {} instances, epsilon {:e}, max relative error {:.3e} (tolerance {:e})",
        g.instances, g.epsilon, report.max_relative_error, g.tolerance
    );
    if report.passes(g.tolerance) {
        println!("PASS");
        Ok(EXIT_OK)
    } else {
        println!("FAIL");
        Ok(EXIT_VERIFICATION)
    }
}

fn cmd_report(args: &ReportArgs) -> Result<u8> {
    let history = report::read_csv(&args.input)?;
    let dir = match &args.out {
        Some(d) => d.clone(),
        None => args.input.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for kind in ChartKind::ALL {
        report::render_svg(&history, kind, dir.join(format!("{}.svg", kind.file_stem())))?;
    }
    println!("rows: {}", history.rows().len());
    if let Some(acc) = history.final_accuracy() {
        println!("final test accuracy: {acc:.4}");
    }
    Ok(EXIT_OK)
}
