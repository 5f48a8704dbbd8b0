use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use eppnet::fusion::EnsembleWeights;
use eppnet::pipeline::{
    cmd_report, cmd_run, cmd_synth, configure_threads, parse_stage, PipelineConfig, StageOutcome, SynthMode,
    SynthOptions,
};

#[derive(Parser)]
#[command(name = "eppnet", version, about = "Skeleton + human-parsing action recognition pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset, manifest and matching config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 16)]
        samples_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// motion | complementary
        #[arg(long, default_value = "motion")]
        mode: String,
    },
    /// Run one pipeline stage, or `all`.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// prepare | derive | parsemap | train | eval | fuse | report | all
        #[arg(long, default_value = "all")]
        stage: String,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Rebuild the report from evaluation scores in a workspace.
    Report {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(clap::Args)]
struct Overrides {
    #[arg(long)]
    workspace: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated subset of J,B,JM,BM,P.
    #[arg(long, value_delimiter = ',')]
    modalities: Option<Vec<String>>,
    /// e.g. J:2,B:2,JM:1,BM:1,P:2
    #[arg(long)]
    weights: Option<String>,
}

fn load_config(path: &PathBuf, o: &Overrides) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(w) = &o.workspace {
        cfg.workspace = std::path::absolute(w).with_context(|| format!("workspace {}", w.display()))?;
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(m) = &o.modalities {
        cfg.modalities = m.clone();
    }
    if let Some(w) = &o.weights {
        cfg.weights = w.parse::<EnsembleWeights>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Synth { out, classes, samples_per_class, seed, mode } => {
            let mode: SynthMode = mode.parse()?;
            let s = cmd_synth(&out, &SynthOptions { classes, samples_per_class, seed, mode })?;
            println!(
                "wrote {} samples ({} train / {} test, {} parsing frames); config {}",
                s.samples,
                s.train,
                s.test,
                s.parsing_frames,
                s.config.display()
            );
        }
        Command::Run { config, stage, overrides } => {
            let cfg = load_config(&config, &overrides)?;
            for (stage, outcome) in cmd_run(&cfg, parse_stage(&stage)?)? {
                let note = match outcome {
                    StageOutcome::Ran => "done",
                    StageOutcome::UpToDate => "up to date",
                };
                eprintln!("{stage}: {note}");
            }
        }
        Command::Report { config, overrides } => {
            let cfg = load_config(&config, &overrides)?;
            print!("{}", cmd_report(&cfg.workspace, cfg.classes, &cfg.modalities, &cfg.weights)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<eppnet::Error>().map_or(2, |e| e.exit_code());
            ExitCode::from(code as u8)
        }
    }
}
