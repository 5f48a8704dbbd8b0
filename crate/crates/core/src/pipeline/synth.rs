//! Synthetic skeleton + parsing data with known class structure.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::{CnnSettings, GcnSettings, ParsingSettings, PipelineConfig, TrainSettings};
use super::manifest::{Manifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::fusion::EnsembleWeights;
use crate::modalities::BoneTopology;
use crate::parsemap::{encode_label_map, BBox, LabelMap, PhotometricJitter, TileLayout, LIP_CLASSES};
use crate::rng::Rng;
use crate::skeleton::{serialize_skeleton, BodyFrame, Joint3D, SkeletonSequence, NTU_JOINTS};
use crate::tensor::OptimizerConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthMode {
    /// Class-specific joint trajectories and parsing layouts.
    Motion,
    /// Four classes `bit0 + 2 * bit1`: skeletons carry only bit 0, parsing maps only bit 1.
    Complementary,
}

impl FromStr for SynthMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "motion" => Ok(SynthMode::Motion),
            "complementary" => Ok(SynthMode::Complementary),
            _ => Err(Error::Config(format!("unknown synth mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    pub classes: usize,
    pub samples_per_class: usize,
    pub seed: u64,
    pub mode: SynthMode,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthSummary {
    pub samples: usize,
    pub train: usize,
    pub test: usize,
    pub parsing_frames: usize,
    pub manifest: PathBuf,
    pub config: PathBuf,
}

const TAG_TEMPLATE: u64 = 1;
const TAG_SKELETON: u64 = 2;
const TAG_PARSING: u64 = 3;

/// Canvas of the synthetic label maps.
const MAP_W: u32 = 48;
const MAP_H: u32 = 64;

/// Rest pose of the 25-joint skeleton, metres.
const REST_POSE: [[f32; 3]; NTU_JOINTS] = [
    [0.0, 0.0, 0.0],
    [0.0, 0.3, 0.0],
    [0.0, 0.65, 0.0],
    [0.0, 0.8, 0.0],
    [-0.2, 0.5, 0.0],
    [-0.25, 0.25, 0.0],
    [-0.27, 0.05, 0.0],
    [-0.28, -0.02, 0.0],
    [0.2, 0.5, 0.0],
    [0.25, 0.25, 0.0],
    [0.27, 0.05, 0.0],
    [0.28, -0.02, 0.0],
    [-0.1, -0.05, 0.0],
    [-0.12, -0.45, 0.0],
    [-0.12, -0.85, 0.0],
    [-0.12, -0.9, -0.1],
    [0.1, -0.05, 0.0],
    [0.12, -0.45, 0.0],
    [0.12, -0.85, 0.0],
    [0.12, -0.9, -0.1],
    [0.0, 0.55, 0.0],
    [-0.29, -0.1, 0.0],
    [-0.25, -0.05, 0.0],
    [0.29, -0.1, 0.0],
    [0.25, -0.05, 0.0],
];

/// Limb chains, proximal to distal.
const LIMBS: [&[usize]; 4] = [&[4, 5, 6, 7, 21, 22], &[8, 9, 10, 11, 23, 24], &[12, 13, 14, 15], &[16, 17, 18, 19]];

struct MotionTemplate {
    limb: usize,
    cycles: f64,
    direction: [f64; 3],
    /// Constant displacement of the limb (posture).
    posture: [f64; 3],
}

fn unit(rng: &mut Rng) -> [f64; 3] {
    let v = [rng.normal(), rng.normal(), rng.normal()];
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-9);
    v.map(|x| x / n)
}

impl MotionTemplate {
    fn new(seed: u64, key: u64) -> Self {
        let mut rng = Rng::derive(seed, &[TAG_TEMPLATE, key]);
        let direction = unit(&mut rng);
        let posture = unit(&mut rng).map(|x| 0.2 * x);
        Self { limb: (key % 4) as usize, cycles: 1.0 + ((key / 4) % 3) as f64, direction, posture }
    }
}

fn joint(p: [f64; 3]) -> Joint3D {
    let (x, y, z) = (p[0] as f32, p[1] as f32, p[2] as f32);
    Joint3D {
        depth_x: 256.0 + 200.0 * x,
        depth_y: 212.0 - 200.0 * y,
        color_x: 960.0 + 600.0 * x,
        color_y: 540.0 - 600.0 * y,
        orientation: [1.0, 0.0, 0.0, 0.0],
        tracking_state: 2,
        ..Joint3D::at(x, y, z)
    }
}

fn body(id: u64, joints: Vec<Joint3D>) -> BodyFrame {
    BodyFrame { body_id: id, meta: [0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0], joints }
}

fn synth_skeleton(template: &MotionTemplate, rng: &mut Rng, sample_id: &str) -> SkeletonSequence {
    let n = 28 + rng.below(9) as usize;
    let amp = 0.3 * rng.uniform(0.8, 1.2);
    let phase = rng.uniform(-0.3, 0.3);
    let origin = [rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), 3.0 + rng.uniform(-0.5, 0.5)];
    let bystander = rng.below(4) == 0;
    let chain = LIMBS[template.limb];
    let mut frames = Vec::with_capacity(n);
    for t in 0..n {
        let s = (TAU * template.cycles * t as f64 / n as f64 + phase).sin();
        let joints = (0..NTU_JOINTS)
            .map(|j| {
                let weight = chain.iter().position(|&c| c == j).map_or(0.0, |k| (k + 1) as f64 / chain.len() as f64);
                let p: [f64; 3] = std::array::from_fn(|c| {
                    origin[c]
                        + REST_POSE[j][c] as f64
                        + weight * (template.posture[c] + amp * s * template.direction[c])
                        + 0.01 * rng.normal()
                });
                joint(p)
            })
            .collect();
        let mut bodies = vec![body(1, joints)];
        if bystander {
            let still = (0..NTU_JOINTS)
                .map(|j| {
                    joint(std::array::from_fn(|c| {
                        origin[c] + REST_POSE[j][c] as f64 + [1.2, 0.0, 0.8][c] + 0.002 * rng.normal()
                    }))
                })
                .collect();
            bodies.push(body(2, still));
        }
        frames.push(bodies);
    }
    SkeletonSequence { sample_id: sample_id.to_string(), frames, joint_count: NTU_JOINTS }
}

struct Canvas {
    labels: Vec<u8>,
}

impl Canvas {
    fn new() -> Self {
        Self { labels: vec![0; (MAP_W * MAP_H) as usize] }
    }

    fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, label: u8) {
        for y in y0.max(0)..y1.min(MAP_H as i64) {
            for x in x0.max(0)..x1.min(MAP_W as i64) {
                self.labels[(y * MAP_W as i64 + x) as usize] = label;
            }
        }
    }

    fn ellipse(&mut self, cx: i64, cy: i64, rx: i64, ry: i64, label: u8) {
        for y in (cy - ry).max(0)..(cy + ry + 1).min(MAP_H as i64) {
            for x in (cx - rx).max(0)..(cx + rx + 1).min(MAP_W as i64) {
                let (dx, dy) = ((x - cx) as f64 / rx as f64, (y - cy) as f64 / ry as f64);
                if dx * dx + dy * dy <= 1.0 {
                    self.labels[(y * MAP_W as i64 + x) as usize] = label;
                }
            }
        }
    }
}

/// Person silhouette whose clothing, accessory and arm swing depend on `key`.
fn synth_parsing(key: u64, rng: &mut Rng) -> (Vec<LabelMap>, Vec<Option<BBox>>) {
    let n = 28 + rng.below(9) as usize;
    let (dx, dy) = (rng.below(7) as i64 - 3, rng.below(5) as i64 - 2);
    let phase = rng.uniform(0.0, TAU);
    let clothes = [5u8, 6, 7, 10][(key % 4) as usize];
    let swing_amp = 2.0 + 2.0 * (key % 3) as f64;
    let cycles = 1.0 + (key % 2) as f64;
    let mut maps = Vec::with_capacity(n);
    let mut boxes = Vec::with_capacity(n);
    for t in 0..n {
        let swing = (swing_amp * (TAU * cycles * t as f64 / n as f64 + phase).sin()).round() as i64;
        let mut c = Canvas::new();
        c.ellipse(24 + dx, 9 + dy, 5, 6, 13);
        c.rect(19 + dx, 3 + dy, 30 + dx, 6 + dy, 2);
        c.rect(16 + dx, 16 + dy, 32 + dx, 36 + dy, clothes);
        c.rect(17 + dx, 36 + dy, 31 + dx, 46 + dy, 9);
        c.rect(17 + dx, 46 + dy, 23 + dx, 56 + dy, 16);
        c.rect(25 + dx, 46 + dy, 31 + dx, 56 + dy, 17);
        c.rect(16 + dx, 56 + dy, 23 + dx, 60 + dy, 18);
        c.rect(25 + dx, 56 + dy, 32 + dx, 60 + dy, 19);
        c.rect(10 + dx, 17 + dy + swing, 16 + dx, 33 + dy + swing, 14);
        c.rect(32 + dx, 17 + dy - swing, 38 + dx, 33 + dy - swing, 15);
        match key % 4 {
            0 => c.rect(18 + dx, dy, 30 + dx, 4 + dy, 1),
            1 => c.rect(19 + dx, 14 + dy, 29 + dx, 18 + dy, 11),
            2 => {
                c.rect(10 + dx, 31 + dy + swing, 16 + dx, 35 + dy + swing, 3);
                c.rect(32 + dx, 31 + dy - swing, 38 + dx, 35 + dy - swing, 3);
            }
            _ => c.rect(20 + dx, 7 + dy, 28 + dx, 10 + dy, 4),
        }
        // parser noise
        for _ in 0..6 {
            let i = rng.below((MAP_W * MAP_H) as u64) as usize;
            c.labels[i] = rng.below(LIP_CLASSES as u64) as u8;
        }
        maps.push(LabelMap::new(MAP_W, MAP_H, LIP_CLASSES, c.labels).expect("labels in range"));
        let missing = rng.below(10) == 0;
        boxes.push((!missing).then(|| BBox {
            x_min: (8 + dx).max(0),
            y_min: dy.max(0),
            x_max: (40 + dx).min(MAP_W as i64),
            y_max: (61 + dy).min(MAP_H as i64),
        }));
    }
    (maps, boxes)
}

fn bbox_text(boxes: &[Option<BBox>]) -> String {
    boxes
        .iter()
        .enumerate()
        .map(|(i, b)| match b {
            Some(b) => format!("{i} {} {} {} {}\n", b.x_min, b.y_min, b.x_max, b.y_max),
            None => format!("{i} -\n"),
        })
        .collect()
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Small-scale configuration matched to the generated data.
pub fn desk_config(classes: usize, mode: SynthMode, seed: u64) -> PipelineConfig {
    let train = |epochs, lr| TrainSettings {
        epochs,
        batch_size: 8,
        target_accuracy: None,
        optimizer: OptimizerConfig { learning_rate: lr, schedule: vec![], ..OptimizerConfig::default() },
    };
    let modalities: &[&str] = match mode {
        SynthMode::Motion => &["J", "B", "JM", "BM", "P"],
        SynthMode::Complementary => &["J", "P"],
    };
    PipelineConfig {
        manifest: "manifest.json".into(),
        workspace: "workspace".into(),
        classes,
        joint_count: NTU_JOINTS,
        frames: 32,
        max_bodies: 1,
        topology: None,
        split_file: None,
        modalities: modalities.iter().map(|m| m.to_string()).collect(),
        parsing: ParsingSettings {
            frames: 9,
            classes: LIP_CLASSES,
            layout: TileLayout { tile_height: 32, tile_width: 32, rows: 3, cols: 3 },
            input_size: None,
            jitter: PhotometricJitter::default(),
        },
        gcn: GcnSettings { blocks: 3, channels: vec![16, 32, 32], temporal_kernel: Some(9), train: train(40, 0.01) },
        cnn: CnnSettings { channels: vec![8, 16, 32, 32], train: train(40, 0.01) },
        weights: EnsembleWeights::five_way(),
        seed,
    }
}

pub fn cmd_synth(out_dir: &Path, opts: &SynthOptions) -> Result<SynthSummary> {
    if opts.classes < 2 || opts.classes > 999 {
        return Err(Error::Config("synth needs 2..=999 classes".into()));
    }
    if opts.samples_per_class == 0 || opts.samples_per_class > 999 {
        return Err(Error::Config("samples_per_class must be in 1..=999".into()));
    }
    if opts.mode == SynthMode::Complementary && opts.classes != 4 {
        return Err(Error::Config("complementary mode has exactly 4 classes".into()));
    }
    debug_assert_eq!(BoneTopology::ntu25().vertices(), NTU_JOINTS);
    for sub in ["skeletons", "parsing", "bboxes"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let seed = opts.seed;
    let templates: Vec<MotionTemplate> = (0..opts.classes as u64).map(|k| MotionTemplate::new(seed, k)).collect();
    let test_per_class = opts.samples_per_class / 5;
    let mut entries = Vec::new();
    let mut parsing_frames = 0;
    for class in 0..opts.classes {
        for idx in 0..opts.samples_per_class {
            let sample_id = format!("S001C001P{:03}R001A{:03}", idx + 1, class + 1);
            let (skel_key, parse_key) = match opts.mode {
                SynthMode::Motion => (class as u64, class as u64),
                SynthMode::Complementary => ((class & 1) as u64, (class >> 1) as u64),
            };
            let mut srng = Rng::derive(seed, &[TAG_SKELETON, skel_key, idx as u64]);
            let seq = synth_skeleton(&templates[skel_key as usize], &mut srng, &sample_id);
            write(&out_dir.join(format!("skeletons/{sample_id}.skeleton")), serialize_skeleton(&seq).as_bytes())?;

            let mut prng = Rng::derive(seed, &[TAG_PARSING, parse_key, idx as u64]);
            let (maps, boxes) = synth_parsing(parse_key, &mut prng);
            for (k, m) in maps.iter().enumerate() {
                write(&out_dir.join(format!("parsing/{sample_id}_f{k}.pgm")), &encode_label_map(m)?)?;
            }
            parsing_frames += maps.len();
            write(&out_dir.join(format!("bboxes/{sample_id}.txt")), bbox_text(&boxes).as_bytes())?;

            let split = if idx >= opts.samples_per_class - test_per_class { Split::Test } else { Split::Train };
            entries.push(ManifestEntry {
                skeleton_path: format!("skeletons/{sample_id}.skeleton").into(),
                parsing_dir: Some("parsing".into()),
                bbox_path: Some(format!("bboxes/{sample_id}.txt").into()),
                sample_id,
                label: class,
                split,
            });
        }
    }
    let test = entries.iter().filter(|e| e.split == Split::Test).count();
    let manifest = out_dir.join("manifest.json");
    Manifest { entries }.save(&manifest)?;
    let config = out_dir.join("config.json");
    write(&config, desk_config(opts.classes, opts.mode, seed).to_json().as_bytes())?;
    let samples = opts.classes * opts.samples_per_class;
    Ok(SynthSummary { samples, train: samples - test, test, parsing_frames, manifest, config })
}
