//! `gfn`: dataset validation and splitting, toy training, retrieval
//! evaluation and filtering analysis.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical
//! or training failure.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::Value;

use config::{load_config, GridRun, Preset, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<gfn_core::Error> for CliError {
    fn from(e: gfn_core::Error) -> Self {
        use gfn_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Contract(_) => CliError::Usage(msg),
            E::Degenerate(_) | E::Diverged { .. } => CliError::Numeric(msg),
            E::Data(_) | E::Corrupt(_) | E::SplitInfeasible(_) | E::Io { .. } | E::Json { .. } => CliError::Data(msg),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "gfn", version, about = "Gallery-filtered person search toolchain")]
struct Cli {
    /// TOML run configuration; list-valued leaves expand into a grid of runs.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default `gfn-out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for per-query work.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load a dataset and list duplicate boxes and repeated person ids.
    Validate {
        dataset: PathBuf,
    },
    /// Split a dataset into identity-disjoint train and val partitions.
    Split {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Target fraction of scenes in val.
        #[arg(long)]
        target: Option<f64>,
        /// Ignore the most frequent identities when linking scenes.
        #[arg(long)]
        ignore_top_k: Option<usize>,
    },
    /// Run retrieval with every filter flag setting and write metric reports.
    Eval {
        /// Comma-separated gallery sizes for the size sweep.
        #[arg(long, value_delimiter = ',')]
        gallery_sizes: Option<Vec<usize>>,
    },
    /// Train the filter on a synthetic world and report before and after.
    TrainToy,
    /// Score histograms, npv at recall targets and the computation saved.
    FilterAnalysis {
        #[arg(long, value_enum)]
        preset: Option<Preset>,
    },
}

fn configs(cli: &Cli) -> Result<Vec<GridRun>, CliError> {
    let mut runs = match &cli.config {
        Some(path) => load_config(path)?,
        None => vec![GridRun {
            config: RunConfig::default(),
            assignments: Vec::new(),
        }],
    };
    for run in &mut runs {
        let c = &mut run.config;
        c.seed = cli.seed.or(c.seed);
        c.threads = cli.threads.or(c.threads);
        if cli.out.is_some() {
            c.out = cli.out.clone();
        }
        match &cli.command {
            Command::Split {
                dataset,
                target,
                ignore_top_k,
            } => {
                if dataset.is_some() {
                    c.data.dataset = dataset.clone();
                }
                c.split.target_fraction = target.unwrap_or(c.split.target_fraction);
                c.split.ignore_top_k = ignore_top_k.unwrap_or(c.split.ignore_top_k);
            }
            Command::Eval {
                gallery_sizes: Some(sizes),
            } => c.eval.gallery_sizes = sizes.clone(),
            _ => {}
        }
    }
    Ok(runs)
}

fn set_threads(threads: Option<usize>) -> Result<(), CliError> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run_one(command: &Command, cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    match command {
        Command::Validate { .. } => unreachable!("validate takes no config"),
        Command::Split { .. } => commands::split(cfg, out),
        Command::Eval { .. } => commands::eval(cfg, out),
        Command::TrainToy => commands::train_toy(cfg, out),
        Command::FilterAnalysis { preset } => commands::filter_analysis(cfg, out, *preset),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Command::Validate { dataset } = &cli.command {
        set_threads(cli.threads)?;
        return commands::validate(dataset, cli.out.as_deref());
    }
    let runs = configs(&cli)?;
    set_threads(runs[0].config.threads)?;
    let root = runs[0].config.out.clone().unwrap_or_else(|| PathBuf::from("gfn-out"));
    if runs.len() == 1 {
        return run_one(&cli.command, &runs[0].config, &root);
    }
    let mut index = Vec::new();
    for (i, run) in runs.iter().enumerate() {
        let name = format!("run_{i:03}");
        let assignments: serde_json::Map<String, Value> = run
            .assignments
            .iter()
            .map(|(k, v)| (k.clone(), serde_json::to_value(v).expect("toml value converts")))
            .collect();
        log::info!("{name}: {}", Value::Object(assignments.clone()));
        println!("== {name}");
        run_one(&cli.command, &run.config, &root.join(&name))?;
        index.push(serde_json::json!({"run": name, "assignments": assignments}));
    }
    let mut text = serde_json::to_string_pretty(&index).expect("grid index serialises");
    text.push('\n');
    std::fs::write(root.join("grid.json"), text).map_err(|e| CliError::Data(format!("{}: {e}", root.display())))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
