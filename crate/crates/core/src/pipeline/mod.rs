//! Configuration, manifests, synthetic data and stage orchestration.

mod config;
mod data;
mod manifest;
mod run;
mod synth;

pub use config::{CnnSettings, GcnSettings, ParsingSettings, PipelineConfig, TrainSettings, MODALITIES};
pub use data::{map_to_input, ParsingDataset};
pub use manifest::{bundled_split, Manifest, ManifestEntry, Parity, Split, SplitRule};
pub use run::{
    cmd_report, cmd_run, configure_threads, parse_stage, run_stage, write_report, Stage, StageOutcome, Workspace,
};
pub use synth::{cmd_synth, desk_config, SynthMode, SynthOptions, SynthSummary};
