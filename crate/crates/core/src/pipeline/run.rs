//! Stage orchestration with content-hash completion markers.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::config::{PipelineConfig, MODALITIES};
use super::data::{map_to_input, ParsingDataset};
use super::manifest::{Manifest, Split, SplitRule};
use crate::branches::{
    build_adjacency, evaluate_branch, load_checkpoint, save_checkpoint, train_branch, CnnModel, GcnModel, ScoreMatrix,
    TensorDataset,
};
use crate::error::{Error, Result};
use crate::fusion::{
    compute_metrics, confusion_csv, confusion_pgm, decide, format_report, late_fuse, standard_rows, EnsembleWeights,
    ReportRow,
};
use crate::modalities::{derive_all, BoneTopology, ModalityKind};
use crate::parsemap::{
    build_feature_map, decode_ppm, encode_ppm, load_parsing_frames, make_palette, parse_bbox_file, FrameSelection,
};
use crate::rng::Rng;
use crate::skeleton::{load_skeleton_file, normalize_sequence, select_primary_bodies, to_pose_tensor};
use crate::tensor::{read_checkpoint, write_checkpoint, CheckpointEntry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Prepare,
    Derive,
    Parsemap,
    Train,
    Eval,
    Fuse,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] =
        [Stage::Prepare, Stage::Derive, Stage::Parsemap, Stage::Train, Stage::Eval, Stage::Fuse, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::Derive => "derive",
            Stage::Parsemap => "parsemap",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Fuse => "fuse",
            Stage::Report => "report",
        }
    }

    fn deps(self) -> &'static [Stage] {
        match self {
            Stage::Prepare => &[],
            Stage::Derive | Stage::Parsemap => &[Stage::Prepare],
            Stage::Train => &[Stage::Prepare, Stage::Derive],
            Stage::Eval => &[Stage::Train, Stage::Derive, Stage::Parsemap],
            Stage::Fuse | Stage::Report => &[Stage::Eval],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A single stage, or `None` for `all`.
pub fn parse_stage(s: &str) -> Result<Option<Stage>> {
    if s == "all" {
        return Ok(None);
    }
    Stage::from_str(s).map(Some)
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    /// Marker hashes matched; nothing was recomputed.
    UpToDate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Marker {
    stage: String,
    config: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

/// Directory layout: `<root>/<stage>/...`, `<root>/stages/<stage>.done`, `<root>/report.txt`.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.name())
    }

    pub fn marker(&self, stage: Stage) -> PathBuf {
        self.root.join("stages").join(format!("{}.done", stage.name()))
    }

    pub fn manifest(&self) -> PathBuf {
        self.stage_dir(Stage::Prepare).join("manifest.json")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.txt")
    }

    pub fn scores(&self, modality: &str) -> PathBuf {
        self.stage_dir(Stage::Eval).join(format!("{modality}_scores.csv"))
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).to_string_lossy().into_owned()
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_file(p: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(p, bytes).map_err(|e| Error::io(p, e))
}

/// Caps the global worker pool from `EPPNET_THREADS` (0 or unset = one worker).
pub fn configure_threads() -> Result<usize> {
    let n = match std::env::var("EPPNET_THREADS") {
        Ok(v) => {
            v.trim().parse::<usize>().map_err(|_| Error::Config(format!("EPPNET_THREADS={v:?} is not a count")))?
        }
        Err(_) => 0,
    };
    let workers = n.max(1);
    // a second initialisation in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
    Ok(workers)
}

fn parsing_frame_paths(dir: &Path, sample_id: &str) -> Vec<PathBuf> {
    (0..).map(|k| dir.join(format!("{sample_id}_f{k}.pgm"))).take_while(|p| p.is_file()).collect()
}

fn raw_skeleton_inputs(m: &Manifest) -> Vec<PathBuf> {
    m.entries.iter().map(|e| e.skeleton_path.clone()).collect()
}

fn raw_parsing_inputs(m: &Manifest) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in &m.entries {
        if let Some(d) = &e.parsing_dir {
            out.extend(parsing_frame_paths(d, &e.sample_id));
        }
        out.extend(e.bbox_path.clone());
    }
    out
}

struct Ctx<'a> {
    cfg: &'a PipelineConfig,
    ws: Workspace,
}

impl<'a> Ctx<'a> {
    fn prepared(&self) -> Result<Manifest> {
        let text = std::fs::read_to_string(self.ws.manifest()).map_err(|e| Error::io(self.ws.manifest(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse { what: "prepared manifest", detail: e.to_string() })
    }

    fn topology(&self) -> Result<BoneTopology> {
        match &self.cfg.topology {
            Some(p) => BoneTopology::load(p),
            None => Ok(BoneTopology::ntu25()),
        }
    }

    fn stage_config(&self, stage: Stage) -> serde_json::Value {
        let c = self.cfg;
        match stage {
            Stage::Prepare => json!({"manifest": c.manifest, "split_file": c.split_file, "classes": c.classes,
                "modalities": c.modalities}),
            Stage::Derive => json!({"joint_count": c.joint_count, "frames": c.frames, "max_bodies": c.max_bodies,
                "topology": c.topology, "modalities": c.modalities}),
            Stage::Parsemap => json!({"parsing": c.parsing, "modalities": c.modalities}),
            Stage::Train | Stage::Eval => json!({"classes": c.classes, "modalities": c.modalities, "gcn": c.gcn,
                "cnn": c.cnn, "parsing": c.parsing, "seed": c.seed, "topology": c.topology}),
            Stage::Fuse | Stage::Report => json!({"classes": c.classes, "modalities": c.modalities,
                "weights": c.weights}),
        }
    }

    fn raw_inputs(&self, stage: Stage) -> Result<Vec<PathBuf>> {
        let mut files = Vec::new();
        match stage {
            Stage::Prepare => {
                files.push(self.cfg.manifest.clone());
                files.extend(self.cfg.split_file.clone());
                let m = Manifest::load(&self.cfg.manifest)?;
                files.extend(raw_skeleton_inputs(&m));
                if self.cfg.has("P") {
                    files.extend(raw_parsing_inputs(&m));
                }
            }
            Stage::Derive => {
                files.extend(self.cfg.topology.clone());
                files.extend(raw_skeleton_inputs(&self.prepared()?));
            }
            Stage::Parsemap | Stage::Train if self.cfg.has("P") => {
                files.extend(raw_parsing_inputs(&self.prepared()?));
            }
            _ => {}
        }
        Ok(files)
    }

    fn fingerprint(&self, stage: Stage) -> Result<(String, BTreeMap<String, String>)> {
        let config = hex::encode(Sha256::digest(self.stage_config(stage).to_string().as_bytes()));
        let mut inputs = BTreeMap::new();
        for dep in stage.deps() {
            let m = self.ws.marker(*dep);
            inputs.insert(self.ws.rel(&m), sha256_file(&m)?);
        }
        for f in self.raw_inputs(stage)? {
            inputs.insert(f.to_string_lossy().into_owned(), sha256_file(&f)?);
        }
        Ok((config, inputs))
    }

    fn up_to_date(&self, stage: Stage, config: &str, inputs: &BTreeMap<String, String>) -> bool {
        let Ok(text) = std::fs::read_to_string(self.ws.marker(stage)) else {
            return false;
        };
        let Ok(marker) = serde_json::from_str::<Marker>(&text) else {
            return false;
        };
        marker.config == config
            && &marker.inputs == inputs
            && marker.outputs.iter().all(|(rel, h)| sha256_file(&self.ws.root.join(rel)).is_ok_and(|cur| &cur == h))
    }

    fn execute(&self, stage: Stage) -> Result<Vec<PathBuf>> {
        let dir = self.ws.stage_dir(stage);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        mkdir(&dir)?;
        match stage {
            Stage::Prepare => self.prepare(),
            Stage::Derive => self.derive(),
            Stage::Parsemap => self.parsemap(),
            Stage::Train => self.train(),
            Stage::Eval => self.eval(),
            Stage::Fuse => self.fuse(),
            Stage::Report => {
                let (_, files) = write_report(&self.ws, self.cfg.classes, &self.cfg.modalities, &self.cfg.weights)?;
                Ok(files)
            }
        }
    }

    fn prepare(&self) -> Result<Vec<PathBuf>> {
        let mut m = Manifest::load(&self.cfg.manifest)?;
        if let Some(rule) = &self.cfg.split_file {
            SplitRule::load(rule)?.apply(&mut m)?;
        }
        m.validate(self.cfg.classes, self.cfg.has("P"))?;
        for split in [Split::Train, Split::Test] {
            if m.indices(split).is_empty() {
                return Err(Error::Config(format!("manifest has no {split:?} samples")));
            }
        }
        m.save(&self.ws.manifest())?;
        Ok(vec![self.ws.manifest()])
    }

    fn derive(&self) -> Result<Vec<PathBuf>> {
        let kinds: Vec<ModalityKind> =
            self.cfg.skeleton_modalities().iter().map(|m| m.parse()).collect::<Result<_>>()?;
        if kinds.is_empty() {
            return Ok(Vec::new());
        }
        let m = self.prepared()?;
        let topo = self.topology()?;
        let c = self.cfg;
        let derived = m
            .entries
            .par_iter()
            .map(|e| {
                let seq = load_skeleton_file(&e.skeleton_path, Some(c.joint_count))?;
                let seq = normalize_sequence(&select_primary_bodies(&seq, c.max_bodies))?;
                derive_all(&to_pose_tensor(&seq, c.frames, c.max_bodies), &topo)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut outputs = Vec::new();
        for kind in kinds {
            let entries: Vec<CheckpointEntry> = m
                .entries
                .iter()
                .zip(&derived)
                .map(|(e, d)| CheckpointEntry { name: e.sample_id.clone(), tensor: d.get(kind).data.clone() })
                .collect();
            let path = self.ws.stage_dir(Stage::Derive).join(format!("{kind}.ckpt"));
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            write_checkpoint(BufWriter::new(file), &entries).map_err(|e| Error::io(&path, e))?;
            outputs.push(path);
        }
        Ok(outputs)
    }

    fn parsing_dataset(&self, m: &Manifest, indices: &[usize]) -> Result<ParsingDataset> {
        let p = &self.cfg.parsing;
        let loaded = indices
            .par_iter()
            .map(|&i| {
                let e = &m.entries[i];
                let dir =
                    e.parsing_dir.as_ref().ok_or_else(|| Error::Config(format!("{}: no parsing_dir", e.sample_id)))?;
                let maps = load_parsing_frames(dir, &e.sample_id, p.classes)?;
                let boxes = match &e.bbox_path {
                    Some(b) => {
                        let text = std::fs::read_to_string(b).map_err(|err| Error::io(b, err))?;
                        parse_bbox_file(&text, maps.len())?
                    }
                    None => vec![None; maps.len()],
                };
                Ok((maps, boxes))
            })
            .collect::<Result<Vec<_>>>()?;
        let (maps, boxes) = loaded.into_iter().unzip();
        Ok(ParsingDataset {
            ids: indices.iter().map(|&i| m.entries[i].sample_id.clone()).collect(),
            labels: indices.iter().map(|&i| m.entries[i].label).collect(),
            maps,
            boxes,
            palette: make_palette(p.classes),
            layout: p.layout,
            frames: p.frames,
            jitter: p.jitter,
            input_size: p.input_size,
        })
    }

    fn parsemap(&self) -> Result<Vec<PathBuf>> {
        if !self.cfg.has("P") {
            return Ok(Vec::new());
        }
        let m = self.prepared()?;
        let all: Vec<usize> = (0..m.entries.len()).collect();
        let data = self.parsing_dataset(&m, &all)?;
        let sel = FrameSelection::test(data.frames);
        let dir = self.ws.stage_dir(Stage::Parsemap);
        all.par_iter()
            .map(|&i| {
                let fm = build_feature_map(&data.maps[i], &data.boxes[i], &sel, &data.palette, &data.layout)?;
                let path = dir.join(format!("{}.ppm", data.ids[i]));
                write_file(&path, &encode_ppm(&fm.image)?)?;
                Ok(path)
            })
            .collect()
    }

    fn skeleton_dataset(&self, modality: &str, m: &Manifest, split: Split) -> Result<TensorDataset> {
        let path = self.ws.stage_dir(Stage::Derive).join(format!("{modality}.ckpt"));
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let tensors = read_checkpoint(BufReader::new(file))?;
        if tensors.len() != m.entries.len() {
            return Err(Error::Checkpoint(format!(
                "{} holds {} samples, manifest {}",
                path.display(),
                tensors.len(),
                m.entries.len()
            )));
        }
        let mut d = TensorDataset::default();
        for (e, t) in m.entries.iter().zip(tensors) {
            if e.split == split {
                d.ids.push(e.sample_id.clone());
                d.labels.push(e.label);
                d.inputs.push(t.tensor);
            }
        }
        Ok(d)
    }

    fn gcn(&self, modality: &str) -> Result<GcnModel> {
        let topo = self.topology()?;
        let adj = build_adjacency(&topo.edges(), topo.vertices())?;
        GcnModel::new(self.cfg.gcn_config(), adj, self.seed(modality, 0))
    }

    /// Independent seed per modality and purpose.
    fn seed(&self, modality: &str, purpose: u64) -> u64 {
        let idx = MODALITIES.iter().position(|m| *m == modality).unwrap_or(0) as u64;
        Rng::derive(self.cfg.seed, &[idx, purpose]).next_u64()
    }

    fn train(&self) -> Result<Vec<PathBuf>> {
        let m = self.prepared()?;
        let dir = self.ws.stage_dir(Stage::Train);
        let mut outputs = Vec::new();
        for modality in &self.cfg.modalities {
            let (params, history) = if modality == "P" {
                let data = self.parsing_dataset(&m, &m.indices(Split::Train))?;
                let mut model = CnnModel::new(self.cfg.cnn_config(), self.seed(modality, 0))?;
                let tc = self.cfg.cnn.train.train_config(self.seed(modality, 1));
                let h = train_branch(&mut model, &data, &tc, &self.cfg.cnn.train.optimizer)?;
                (model.params, h)
            } else {
                let data = self.skeleton_dataset(modality, &m, Split::Train)?;
                let mut model = self.gcn(modality)?;
                let tc = self.cfg.gcn.train.train_config(self.seed(modality, 1));
                let h = train_branch(&mut model, &data, &tc, &self.cfg.gcn.train.optimizer)?;
                (model.params, h)
            };
            let ckpt = dir.join(format!("{modality}.ckpt"));
            save_checkpoint(&params, &ckpt)?;
            let hist = dir.join(format!("{modality}_history.json"));
            write_file(&hist, (serde_json::to_string_pretty(&history).expect("history serializes") + "\n").as_bytes())?;
            outputs.extend([ckpt, hist]);
        }
        Ok(outputs)
    }

    fn eval(&self) -> Result<Vec<PathBuf>> {
        let m = self.prepared()?;
        let train_dir = self.ws.stage_dir(Stage::Train);
        let mut outputs = Vec::new();
        for modality in &self.cfg.modalities {
            let ckpt = train_dir.join(format!("{modality}.ckpt"));
            let scores = if modality == "P" {
                let mut model = CnnModel::new(self.cfg.cnn_config(), 0)?;
                load_checkpoint(&mut model.params, &ckpt)?;
                let mut data = TensorDataset::default();
                for i in m.indices(Split::Test) {
                    let e = &m.entries[i];
                    let path = self.ws.stage_dir(Stage::Parsemap).join(format!("{}.ppm", e.sample_id));
                    let bytes = std::fs::read(&path).map_err(|err| Error::io(&path, err))?;
                    data.ids.push(e.sample_id.clone());
                    data.labels.push(e.label);
                    data.inputs.push(map_to_input(&decode_ppm(&bytes)?, self.cfg.parsing.input_size));
                }
                evaluate_branch(&model, &data, modality, self.cfg.cnn.train.batch_size)?
            } else {
                let mut model = self.gcn(modality)?;
                load_checkpoint(&mut model.params, &ckpt)?;
                let data = self.skeleton_dataset(modality, &m, Split::Test)?;
                evaluate_branch(&model, &data, modality, self.cfg.gcn.train.batch_size)?
            };
            let path = self.ws.scores(modality);
            scores.write(&path)?;
            outputs.push(path);
        }
        Ok(outputs)
    }

    fn fuse(&self) -> Result<Vec<PathBuf>> {
        let avail: Vec<&str> = self.cfg.modalities.iter().map(String::as_str).collect();
        let scores = load_scores(&self.ws, &avail)?;
        let mut outputs = Vec::new();
        for row in standard_rows(&avail).into_iter().filter(|r| r.len() > 1) {
            let (fused, _) = fuse_row(&scores, &row, &self.cfg.weights)?;
            let path = self.ws.stage_dir(Stage::Fuse).join(format!("{}_scores.csv", fused.modality));
            fused.write(&path)?;
            outputs.push(path);
        }
        Ok(outputs)
    }
}

fn load_scores(ws: &Workspace, modalities: &[&str]) -> Result<BTreeMap<String, ScoreMatrix>> {
    let mut out = BTreeMap::new();
    for m in modalities {
        let path = ws.scores(m);
        if !path.is_file() {
            return Err(Error::MissingScores(m.to_string()));
        }
        out.insert(m.to_string(), ScoreMatrix::read(&path, m)?);
    }
    Ok(out)
}

fn fuse_row(
    scores: &BTreeMap<String, ScoreMatrix>,
    row: &[String],
    weights: &EnsembleWeights,
) -> Result<(ScoreMatrix, EnsembleWeights)> {
    let names: Vec<&str> = row.iter().map(String::as_str).collect();
    let w = weights.restrict(&names)?;
    let mats: Vec<&ScoreMatrix> = names
        .iter()
        .map(|n| scores.get(*n).ok_or_else(|| Error::MissingScores(n.to_string())))
        .collect::<Result<_>>()?;
    Ok((late_fuse(&mats, &w)?, w))
}

/// Writes `report.txt` plus a confusion CSV and PGM per row; returns the report text and written files.
pub fn write_report(
    ws: &Workspace,
    classes: usize,
    modalities: &[String],
    weights: &EnsembleWeights,
) -> Result<(String, Vec<PathBuf>)> {
    let avail: Vec<&str> = modalities.iter().map(String::as_str).collect();
    let scores = load_scores(ws, &avail)?;
    let dir = ws.stage_dir(Stage::Report);
    mkdir(&dir)?;
    let mut rows = Vec::new();
    let mut files = Vec::new();
    let mut samples = 0;
    for row in standard_rows(&avail) {
        let (fused, w) = fuse_row(&scores, &row, weights)?;
        let metrics = compute_metrics(&decide(&fused), &fused.labels, classes)?;
        samples = fused.len();
        let label = w.label();
        let csv = dir.join(format!("{label}_confusion.csv"));
        write_file(&csv, confusion_csv(&metrics).as_bytes())?;
        let pgm = dir.join(format!("{label}_confusion.pgm"));
        write_file(&pgm, &confusion_pgm(&metrics)?)?;
        files.extend([csv, pgm]);
        rows.push(ReportRow { weights: w, metrics });
    }
    let metrics_path = dir.join("metrics.json");
    let summary: BTreeMap<String, &crate::fusion::Metrics> =
        rows.iter().map(|r| (r.weights.label(), &r.metrics)).collect();
    write_file(&metrics_path, (serde_json::to_string_pretty(&summary).expect("metrics serialize") + "\n").as_bytes())?;
    files.push(metrics_path);
    let text = format_report(&rows, samples);
    write_file(&ws.report(), text.as_bytes())?;
    files.push(ws.report());
    Ok((text, files))
}

/// Runs one stage unless its marker proves the outputs current.
pub fn run_stage(cfg: &PipelineConfig, stage: Stage) -> Result<StageOutcome> {
    let ctx = Ctx { cfg, ws: Workspace::new(&cfg.workspace) };
    for dep in stage.deps() {
        if !ctx.ws.marker(*dep).is_file() {
            return Err(Error::StageDependencyMissing { stage: stage.name().into(), missing: dep.name().into() });
        }
    }
    let (config, inputs) = ctx.fingerprint(stage)?;
    if ctx.up_to_date(stage, &config, &inputs) {
        return Ok(StageOutcome::UpToDate);
    }
    let marker_path = ctx.ws.marker(stage);
    if marker_path.exists() {
        std::fs::remove_file(&marker_path).map_err(|e| Error::io(&marker_path, e))?;
    }
    let produced = ctx.execute(stage)?;
    let mut outputs = BTreeMap::new();
    for p in &produced {
        outputs.insert(ctx.ws.rel(p), sha256_file(p)?);
    }
    let marker = Marker { stage: stage.name().into(), config, inputs, outputs };
    mkdir(marker_path.parent().expect("marker has a parent"))?;
    write_file(&marker_path, (serde_json::to_string_pretty(&marker).expect("marker serializes") + "\n").as_bytes())?;
    Ok(StageOutcome::Ran)
}

/// Echoes the effective config into the workspace and runs `stage` (or every stage).
pub fn cmd_run(cfg: &PipelineConfig, stage: Option<Stage>) -> Result<Vec<(Stage, StageOutcome)>> {
    mkdir(&cfg.workspace)?;
    write_file(&cfg.workspace.join("config.json"), cfg.to_json().as_bytes())?;
    let stages: Vec<Stage> = match stage {
        Some(s) => vec![s],
        None => Stage::ALL.to_vec(),
    };
    stages.into_iter().map(|s| Ok((s, run_stage(cfg, s)?))).collect()
}

/// Report from whatever evaluation scores exist in `workspace`.
pub fn cmd_report(
    workspace: &Path,
    classes: usize,
    modalities: &[String],
    weights: &EnsembleWeights,
) -> Result<String> {
    Ok(write_report(&Workspace::new(workspace), classes, modalities, weights)?.0)
}
