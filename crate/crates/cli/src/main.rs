use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use repairbench_core::pipeline::{Pipeline, RunConfig, Stage, StageStatus};
use repairbench_core::{Error, ErrorKind};

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DEPENDENCY: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

/// Failure-type discovery, scoring and repair over a cached run directory.
///
/// Exit codes: 0 success, 1 other errors, 2 configuration errors, 3 missing or stale
/// upstream stages, 4 numeric failures.
#[derive(Debug, Parser)]
#[command(name = "repairbench", version)]
struct Cli {
    /// gen-data, train, partition, subtype, score-types, repair, report, `all` or `status`.
    stage: Option<String>,

    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Run directory; defaults to <run root>/<config file stem>.
    #[arg(long)]
    run_dir: Option<PathBuf>,

    /// Root for default run directories.
    #[arg(long, env = "REPAIRBENCH_RUN_ROOT", default_value = "runs")]
    run_root: PathBuf,

    /// Overrides the configured global seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Delete the stage's recorded outputs first and recompute them.
    #[arg(long)]
    force: bool,

    /// Print the stages in pipeline order and exit.
    #[arg(long)]
    list_stages: bool,

    /// Describe what a stage reads and writes and exit.
    #[arg(long, value_name = "STAGE")]
    explain: Option<String>,
}

enum Failure {
    Usage(String),
    Pipeline(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Pipeline(e)
    }
}

fn parse_stage(name: &str) -> Result<Stage, Failure> {
    Stage::parse(name).ok_or_else(|| {
        let names: Vec<&str> = Stage::ALL.iter().map(|s| s.as_str()).collect();
        Failure::Usage(format!(
            "unknown stage `{name}` (expected one of {}, all, status)",
            names.join(", ")
        ))
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    if cli.list_stages {
        for s in Stage::ALL {
            let after = s
                .requires()
                .map(|r| format!(" (after {r})"))
                .unwrap_or_default();
            println!("{s}{after}");
        }
        return Ok(());
    }
    if let Some(name) = &cli.explain {
        let stage = parse_stage(name)?;
        println!("{stage}: {}", stage.explain());
        return Ok(());
    }
    let Some(stage_arg) = cli.stage.as_deref() else {
        return Err(Failure::Usage("no stage given; see --list-stages".into()));
    };
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let run_dir = cli.run_dir.clone().unwrap_or_else(|| {
        let name = cli
            .config
            .as_ref()
            .and_then(|p| p.file_stem())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "default".into());
        cli.run_root.join(format!("{name}-seed{}", config.seed))
    });
    let pipeline = Pipeline::new(config, &run_dir)?;
    let stages: Vec<Stage> = match stage_arg {
        "status" => {
            for (s, status) in pipeline.status()? {
                let text = match status {
                    StageStatus::Missing => "missing",
                    StageStatus::Complete => "complete",
                    StageStatus::Stale => "stale (recorded under a different configuration)",
                };
                println!("{s}: {text}");
            }
            return Ok(());
        }
        "all" => Stage::ALL.to_vec(),
        name => vec![parse_stage(name)?],
    };
    for stage in stages {
        if cli.force {
            pipeline.clear_stage(stage)?;
        }
        let r = pipeline.run_stage(stage)?;
        println!("{stage}: {}", if r.cached { "cached" } else { "done" });
    }
    println!("run directory: {}", run_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Pipeline(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => EXIT_CONFIG,
                ErrorKind::Dependency => EXIT_DEPENDENCY,
                ErrorKind::Numeric => EXIT_NUMERIC,
                ErrorKind::Data | ErrorKind::Io => EXIT_OTHER,
            })
        }
    }
}
