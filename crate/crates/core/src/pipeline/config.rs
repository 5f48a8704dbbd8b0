use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::branches::{CnnConfig, GcnConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::fusion::EnsembleWeights;
use crate::parsemap::{PhotometricJitter, TileLayout, LIP_CLASSES};
use crate::tensor::OptimizerConfig;

pub const MODALITIES: [&str; 5] = ["J", "B", "JM", "BM", "P"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub target_accuracy: Option<f64>,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self { epochs: 65, batch_size: 64, target_accuracy: None, optimizer: OptimizerConfig::default() }
    }
}

impl TrainSettings {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig { epochs: self.epochs, batch_size: self.batch_size, seed, target_accuracy: self.target_accuracy }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GcnSettings {
    pub blocks: usize,
    /// Empty means 16 channels for the first half of the blocks, 32 after.
    pub channels: Vec<usize>,
    pub temporal_kernel: Option<usize>,
    pub train: TrainSettings,
}

impl Default for GcnSettings {
    fn default() -> Self {
        Self { blocks: 10, channels: Vec::new(), temporal_kernel: Some(9), train: TrainSettings::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnSettings {
    pub channels: Vec<usize>,
    pub train: TrainSettings,
}

impl Default for CnnSettings {
    fn default() -> Self {
        Self { channels: vec![8, 16, 32, 32], train: TrainSettings::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParsingSettings {
    /// Frames per feature map.
    pub frames: usize,
    /// Category count of the label maps.
    pub classes: usize,
    pub layout: TileLayout,
    /// Square side the feature map is downscaled to before the CNN.
    pub input_size: Option<u32>,
    pub jitter: PhotometricJitter,
}

impl Default for ParsingSettings {
    fn default() -> Self {
        Self {
            frames: 9,
            classes: LIP_CLASSES,
            layout: TileLayout::default(),
            input_size: Some(96),
            jitter: PhotometricJitter::default(),
        }
    }
}

/// Effective pipeline configuration. Relative paths resolve against the
/// directory of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub manifest: PathBuf,
    #[serde(default = "default_workspace")]
    pub workspace: PathBuf,
    pub classes: usize,
    #[serde(default = "default_joints")]
    pub joint_count: usize,
    /// Fixed temporal length of pose tensors.
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default = "default_bodies")]
    pub max_bodies: usize,
    /// Bone list; the bundled 25-joint topology when absent.
    #[serde(default)]
    pub topology: Option<PathBuf>,
    /// Benchmark split rule overriding the manifest's split column.
    #[serde(default)]
    pub split_file: Option<PathBuf>,
    #[serde(default = "default_modalities")]
    pub modalities: Vec<String>,
    #[serde(default)]
    pub parsing: ParsingSettings,
    #[serde(default)]
    pub gcn: GcnSettings,
    #[serde(default)]
    pub cnn: CnnSettings,
    #[serde(default = "EnsembleWeights::five_way")]
    pub weights: EnsembleWeights,
    #[serde(default)]
    pub seed: u64,
}

fn default_workspace() -> PathBuf {
    PathBuf::from("workspace")
}

fn default_joints() -> usize {
    25
}

fn default_frames() -> usize {
    64
}

fn default_bodies() -> usize {
    2
}

fn default_modalities() -> Vec<String> {
    MODALITIES.iter().map(|m| m.to_string()).collect()
}

fn absolutize(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        absolutize(base, &mut cfg.manifest);
        absolutize(base, &mut cfg.workspace);
        if let Some(p) = cfg.topology.as_mut() {
            absolutize(base, p);
        }
        if let Some(p) = cfg.split_file.as_mut() {
            absolutize(base, p);
        }
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let abs = std::path::absolute(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, abs.parent().unwrap_or(Path::new("/")))
    }

    /// Fills defaults that depend on other fields.
    fn resolve(&mut self) {
        if self.gcn.channels.is_empty() {
            self.gcn.channels = GcnConfig::with_blocks(self.gcn.blocks, self.classes).channels;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes < 2 {
            return bad("classes must be >= 2".into());
        }
        if self.joint_count == 0 || self.frames == 0 || self.max_bodies == 0 {
            return bad("joint_count, frames and max_bodies must be positive".into());
        }
        if self.modalities.is_empty() {
            return bad("no modalities selected".into());
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if !MODALITIES.contains(&m.as_str()) {
                return bad(format!("unknown modality {m:?}"));
            }
            if self.modalities[..i].contains(m) {
                return bad(format!("modality {m} listed twice"));
            }
            if self.weights.get(m).is_none() {
                return bad(format!("no ensemble weight for modality {m}"));
            }
        }
        let p = &self.parsing;
        let l = &p.layout;
        if p.frames == 0 || l.tile_height == 0 || l.tile_width == 0 || l.rows == 0 || l.cols == 0 {
            return bad("parsing extents must be positive".into());
        }
        if p.frames > l.rows * l.cols {
            return bad(format!("{} parsing frames do not fit a {}x{} grid", p.frames, l.rows, l.cols));
        }
        if !(1..=256).contains(&p.classes) {
            return bad("parsing.classes must be in 1..=256".into());
        }
        if p.input_size == Some(0) {
            return bad("parsing.input_size must be positive".into());
        }
        for j in [p.jitter.brightness, p.jitter.contrast, p.jitter.saturation] {
            if !(0.0..1.0).contains(&j) {
                return bad("photometric jitter must be in [0, 1)".into());
            }
        }
        self.gcn_config().validate()?;
        self.cnn_config().validate()?;
        for t in [&self.gcn.train, &self.cnn.train] {
            if t.batch_size == 0 {
                return bad("batch_size must be >= 1".into());
            }
            if t.target_accuracy.is_some_and(|a| !(0.0..=1.0).contains(&a)) {
                return bad("target_accuracy must be in [0, 1]".into());
            }
            t.optimizer.validate()?;
        }
        Ok(())
    }

    pub fn gcn_config(&self) -> GcnConfig {
        GcnConfig {
            blocks: self.gcn.blocks,
            channels: self.gcn.channels.clone(),
            temporal_kernel: self.gcn.temporal_kernel,
            classes: self.classes,
            in_channels: 3,
        }
    }

    pub fn cnn_config(&self) -> CnnConfig {
        CnnConfig { channels: self.cnn.channels.clone(), classes: self.classes, in_channels: 3 }
    }

    pub fn has(&self, modality: &str) -> bool {
        self.modalities.iter().any(|m| m == modality)
    }

    pub fn skeleton_modalities(&self) -> Vec<&str> {
        self.modalities.iter().map(String::as_str).filter(|m| *m != "P").collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}
