//! Joint, bone, joint-motion and bone-motion views of a pose tensor.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::PoseTensor;
use crate::tensor::Tensor;

/// Zero-based child/parent list for the 25-joint Kinect v2 skeleton, rooted at the spine base.
pub const NTU25_BONES: &str = include_str!("../data/ntu25_bones.txt");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModalityKind {
    J,
    B,
    JM,
    BM,
}

impl ModalityKind {
    pub const ALL: [ModalityKind; 4] = [ModalityKind::J, ModalityKind::B, ModalityKind::JM, ModalityKind::BM];

    pub fn as_str(self) -> &'static str {
        match self {
            ModalityKind::J => "J",
            ModalityKind::B => "B",
            ModalityKind::JM => "JM",
            ModalityKind::BM => "BM",
        }
    }
}

impl fmt::Display for ModalityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModalityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "J" => Ok(ModalityKind::J),
            "B" => Ok(ModalityKind::B),
            "JM" => Ok(ModalityKind::JM),
            "BM" => Ok(ModalityKind::BM),
            _ => Err(Error::Config(format!("unknown skeleton modality {s:?}"))),
        }
    }
}

/// `pairs[i] = (i, parent(i))`; roots pair a vertex with itself.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoneTopology {
    pairs: Vec<(usize, usize)>,
}

impl BoneTopology {
    pub fn new(pairs: Vec<(usize, usize)>) -> Result<Self> {
        let v = pairs.len();
        for (i, &(child, parent)) in pairs.iter().enumerate() {
            if child != i {
                return Err(Error::InvalidTopology(format!("pair {i} names child {child}")));
            }
            if parent >= v {
                return Err(Error::InvalidTopology(format!("parent {parent} of {child} out of range")));
            }
        }
        // every chain of parents must reach a root within V steps
        for start in 0..v {
            let mut cur = start;
            let mut steps = 0;
            while pairs[cur].1 != cur {
                cur = pairs[cur].1;
                steps += 1;
                if steps > v {
                    return Err(Error::InvalidTopology(format!("cycle through vertex {start}")));
                }
            }
        }
        Ok(Self { pairs })
    }

    pub fn ntu25() -> Self {
        Self::parse(NTU25_BONES).expect("bundled topology is valid")
    }

    /// One `child parent` pair per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let nums: Vec<usize> =
                line.split_whitespace().map(|t| t.parse()).collect::<std::result::Result<_, _>>().map_err(|_| {
                    Error::Parse { what: "bone topology", detail: format!("line {}: {line:?}", lineno + 1) }
                })?;
            match nums[..] {
                [c, p] => pairs.push((c, p)),
                _ => {
                    return Err(Error::Parse {
                        what: "bone topology",
                        detail: format!("line {}: expected two integers", lineno + 1),
                    })
                }
            }
        }
        Self::new(pairs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn vertices(&self) -> usize {
        self.pairs.len()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn parent(&self, v: usize) -> usize {
        self.pairs[v].1
    }

    /// Undirected skeleton edges (roots excluded).
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.pairs.iter().copied().filter(|(c, p)| c != p).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalityTensor {
    pub kind: ModalityKind,
    /// `[3, T, V, M]`
    pub data: Tensor<f32>,
}

fn dims(t: &Tensor<f32>) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

/// `out[:, t, i, m] = x[:, t, i, m] - x[:, t, parent(i), m]`
pub fn bone_vectors(x: &Tensor<f32>, topo: &BoneTopology) -> Result<Tensor<f32>> {
    let (c, t, v, m) = dims(x);
    if topo.vertices() != v {
        return Err(Error::TopologyShapeMismatch { topology: topo.vertices(), vertices: v });
    }
    let mut out = Tensor::zeros(x.shape());
    let src = x.data();
    let dst = out.data_mut();
    for ci in 0..c {
        for ti in 0..t {
            let row = (ci * t + ti) * v;
            for (i, &(_, p)) in topo.pairs().iter().enumerate() {
                for mi in 0..m {
                    dst[(row + i) * m + mi] = src[(row + i) * m + mi] - src[(row + p) * m + mi];
                }
            }
        }
    }
    Ok(out)
}

/// `out[:, t] = x[:, t + 1] - x[:, t]`, last frame zero.
pub fn frame_differences(x: &Tensor<f32>) -> Tensor<f32> {
    let (c, t, v, m) = dims(x);
    let plane = v * m;
    let mut out = Tensor::zeros(x.shape());
    let src = x.data();
    let dst = out.data_mut();
    for ci in 0..c {
        for ti in 0..t.saturating_sub(1) {
            let cur = (ci * t + ti) * plane;
            let next = cur + plane;
            for k in 0..plane {
                dst[cur + k] = src[next + k] - src[cur + k];
            }
        }
    }
    out
}

pub fn derive_bone(pose: &PoseTensor, topo: &BoneTopology) -> Result<ModalityTensor> {
    Ok(ModalityTensor { kind: ModalityKind::B, data: bone_vectors(&pose.data, topo)? })
}

/// Motion of a joint tensor is `JM`, of a bone tensor `BM`.
pub fn derive_motion(x: &ModalityTensor) -> Result<ModalityTensor> {
    let kind = match x.kind {
        ModalityKind::J => ModalityKind::JM,
        ModalityKind::B => ModalityKind::BM,
        other => {
            return Err(Error::Config(format!("motion of {other} is not a modality")));
        }
    };
    Ok(ModalityTensor { kind, data: frame_differences(&x.data) })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Modalities {
    pub joint: ModalityTensor,
    pub bone: ModalityTensor,
    pub joint_motion: ModalityTensor,
    pub bone_motion: ModalityTensor,
}

impl Modalities {
    pub fn get(&self, kind: ModalityKind) -> &ModalityTensor {
        match kind {
            ModalityKind::J => &self.joint,
            ModalityKind::B => &self.bone,
            ModalityKind::JM => &self.joint_motion,
            ModalityKind::BM => &self.bone_motion,
        }
    }
}

pub fn derive_all(pose: &PoseTensor, topo: &BoneTopology) -> Result<Modalities> {
    let joint = ModalityTensor { kind: ModalityKind::J, data: pose.data.clone() };
    let bone = derive_bone(pose, topo)?;
    let joint_motion = derive_motion(&joint)?;
    let bone_motion = derive_motion(&bone)?;
    Ok(Modalities { joint, bone, joint_motion, bone_motion })
}
