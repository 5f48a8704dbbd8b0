use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::SampleId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub skeleton_path: PathBuf,
    #[serde(default)]
    pub parsing_dir: Option<PathBuf>,
    #[serde(default)]
    pub bbox_path: Option<PathBuf>,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Reads a manifest; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("invalid manifest {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for e in &mut m.entries {
            for p in [Some(&mut e.skeleton_path), e.parsing_dir.as_mut(), e.bbox_path.as_mut()].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Unique ids, labels below `classes`, referenced paths present.
    pub fn validate(&self, classes: usize, need_parsing: bool) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Config("manifest has no entries".into()));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.sample_id.as_str()) {
                return Err(Error::Config(format!("duplicate sample id {}", e.sample_id)));
            }
            if e.label >= classes {
                return Err(Error::Config(format!("{}: label {} >= {classes} classes", e.sample_id, e.label)));
            }
            if !e.skeleton_path.is_file() {
                return Err(Error::Config(format!("{}: missing {}", e.sample_id, e.skeleton_path.display())));
            }
            if need_parsing {
                match &e.parsing_dir {
                    Some(d) if d.is_dir() => {}
                    _ => return Err(Error::Config(format!("{}: parsing_dir missing", e.sample_id))),
                }
            }
            if let Some(b) = &e.bbox_path {
                if !b.is_file() {
                    return Err(Error::Config(format!("{}: missing {}", e.sample_id, b.display())));
                }
            }
        }
        Ok(())
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| self.entries[i].split == split).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parity {
    Even,
    Odd,
}

/// Benchmark protocol: training membership by performer, camera or setup parity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitRule {
    CrossSubject { train: Vec<u32> },
    CrossView { train: Vec<u32> },
    CrossSetup { train_parity: Parity },
}

impl SplitRule {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid split file {}: {e}", path.display())))
    }

    pub fn split_of(&self, id: &SampleId) -> Split {
        let train = match self {
            SplitRule::CrossSubject { train } => train.contains(&id.performer),
            SplitRule::CrossView { train } => train.contains(&id.camera),
            SplitRule::CrossSetup { train_parity } => (id.setup % 2 == 0) == (*train_parity == Parity::Even),
        };
        if train {
            Split::Train
        } else {
            Split::Test
        }
    }

    pub fn apply(&self, manifest: &mut Manifest) -> Result<()> {
        for e in &mut manifest.entries {
            e.split = self.split_of(&e.sample_id.parse()?);
        }
        Ok(())
    }
}

/// Path of a split file shipped in the crate's `data/splits` directory.
pub fn bundled_split(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/splits").join(format!("{name}.json"))
}
