use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hbaudit_core::config::{config_hash, BackendChoice, LoadedConfig, StudyConfig};
use hbaudit_core::report::{Overrides, Pipeline, Stage};

/// Homogeneity-bias audit of generated stories.
#[derive(Parser)]
#[command(name = "hbaudit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate stories for every planned request.
    Generate(Common),
    /// Embed the corpus.
    Embed(Common),
    /// Build the standardized pairwise-similarity table.
    Observe(Common),
    /// Fit the per-setting and pooled mixed models.
    Fit(Common),
    /// Write tables and figure data.
    Report(Common),
    /// Run every stage in order.
    All(Common),
}

#[derive(Args)]
struct Common {
    /// Study config (TOML). Defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides generation.seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Overrides generation.backend.
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Live,
    Sim,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (stages, common): (&[Stage], Common) = match cli.command {
        Command::Generate(c) => (&[Stage::Generate], c),
        Command::Embed(c) => (&[Stage::Embed], c),
        Command::Observe(c) => (&[Stage::Observe], c),
        Command::Fit(c) => (&[Stage::Fit], c),
        Command::Report(c) => (&[Stage::Report], c),
        Command::All(c) => (&Stage::ALL, c),
    };

    let loaded = match &common.config {
        Some(path) => StudyConfig::load(path),
        None => Ok(LoadedConfig { config: StudyConfig::default(), hash: config_hash(b"") }),
    };
    let loaded = match loaded {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let overrides = Overrides {
        seed: common.seed,
        backend: common.backend.map(|b| match b {
            BackendArg::Live => BackendChoice::Live,
            BackendArg::Sim => BackendChoice::Sim,
        }),
    };
    let pipeline = Pipeline::new(loaded, &common.out, &overrides);
    match pipeline.run(stages) {
        Ok(manifest) => {
            for stage in stages {
                if let Some(r) = manifest.stages.get(stage) {
                    let counts: Vec<String> = r.counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
                    println!("{stage}: {}", counts.join(" "));
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
