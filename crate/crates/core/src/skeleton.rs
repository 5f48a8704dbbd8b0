//! `.skeleton` text files: parsing, serialization, body selection,
//! normalization and conversion to fixed-shape pose tensors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::parsemap::center_indices;
use crate::tensor::Tensor;

/// Joints per body in NTU RGB+D recordings.
pub const NTU_JOINTS: usize = 25;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Joint3D {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub depth_x: f32,
    pub depth_y: f32,
    pub color_x: f32,
    pub color_y: f32,
    /// `(w, x, y, z)`
    pub orientation: [f32; 4],
    pub tracking_state: i32,
}

impl Joint3D {
    pub fn at(x: f32, y: f32, z: f32) -> Self {
        Self { x, y, z, ..Default::default() }
    }

    fn position(&self) -> [f32; 3] {
        [self.x, self.y, self.z]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BodyFrame {
    pub body_id: u64,
    /// cliped_edges, handL_conf, handL_state, handR_conf, handR_state,
    /// is_restricted, lean_x, lean_y, tracking_state
    pub meta: [f32; 9],
    pub joints: Vec<Joint3D>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    pub sample_id: String,
    pub frames: Vec<Vec<BodyFrame>>,
    pub joint_count: usize,
}

impl SkeletonSequence {
    pub fn body_count(&self) -> usize {
        self.frames.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// `[3, T, V, M]` joint coordinates; absent bodies and padded frames are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseTensor {
    pub data: Tensor<f32>,
}

impl PoseTensor {
    pub fn new(data: Tensor<f32>) -> Result<Self> {
        if data.rank() != 4 || data.shape()[0] != 3 {
            return Err(Error::shape("pose tensor", format!("{:?}", data.shape())));
        }
        Ok(Self { data })
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn vertices(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn bodies(&self) -> usize {
        self.data.shape()[3]
    }
}

/// NTU naming convention `SsssCcccPpppRrrrAaaa`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleId {
    pub setup: u32,
    pub camera: u32,
    pub performer: u32,
    pub replication: u32,
    pub action: u32,
}

impl SampleId {
    /// Zero-based action class.
    pub fn action_class(&self) -> Option<usize> {
        (self.action as usize).checked_sub(1)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::InvalidSampleId(path.display().to_string()))?;
        stem.parse()
    }
}

impl FromStr for SampleId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidSampleId(s.to_string());
        let b = s.as_bytes();
        if b.len() != 20 {
            return Err(bad());
        }
        let mut fields = [0u32; 5];
        for (i, tag) in [b'S', b'C', b'P', b'R', b'A'].iter().enumerate() {
            let chunk = &s[i * 4..i * 4 + 4];
            if chunk.as_bytes()[0] != *tag {
                return Err(bad());
            }
            let digits = &chunk[1..];
            if !digits.bytes().all(|c| c.is_ascii_digit()) {
                return Err(bad());
            }
            fields[i] = digits.parse().map_err(|_| bad())?;
        }
        let [setup, camera, performer, replication, action] = fields;
        Ok(Self { setup, camera, performer, replication, action })
    }
}

impl std::fmt::Display for SampleId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "S{:03}C{:03}P{:03}R{:03}A{:03}",
            self.setup, self.camera, self.performer, self.replication, self.action
        )
    }
}

struct Tokens<'a> {
    iter: std::iter::Filter<std::slice::Split<'a, u8, fn(&u8) -> bool>, fn(&&[u8]) -> bool>,
    position: usize,
}

impl<'a> Tokens<'a> {
    fn new(text: &'a [u8]) -> Self {
        let split: fn(&u8) -> bool = |c| c.is_ascii_whitespace();
        let nonempty: fn(&&[u8]) -> bool = |t| !t.is_empty();
        Self { iter: text.split(split).filter(nonempty), position: 0 }
    }

    fn next_token(&mut self, expected: &'static str) -> Result<&'a [u8]> {
        let t = self.iter.next().ok_or(Error::TruncatedFile { expected, position: self.position })?;
        self.position += 1;
        Ok(t)
    }

    fn parse<T: FromStr>(&mut self, expected: &'static str) -> Result<T> {
        let t = self.next_token(expected)?;
        std::str::from_utf8(t).ok().and_then(|s| s.parse().ok()).ok_or_else(|| Error::MalformedNumber {
            token: String::from_utf8_lossy(t).into_owned(),
            position: self.position - 1,
        })
    }

    fn float(&mut self, expected: &'static str) -> Result<f32> {
        let v: f32 = self.parse(expected)?;
        if !v.is_finite() {
            return Err(Error::NonFiniteValue { token: v.to_string(), position: self.position - 1 });
        }
        Ok(v)
    }
}

/// Parses a `.skeleton` byte stream. The first body's joint count fixes the
/// sequence's joint count unless one is given.
pub fn parse_skeleton(text: &[u8], expected_joints: Option<usize>) -> Result<SkeletonSequence> {
    let mut tok = Tokens::new(text);
    let frame_count: usize = tok.parse("frame count")?;
    let mut joint_count = expected_joints;
    let mut frames = Vec::with_capacity(frame_count.min(1 << 12));
    for _ in 0..frame_count {
        let body_count: usize = tok.parse("body count")?;
        let mut bodies = Vec::with_capacity(body_count.min(16));
        for _ in 0..body_count {
            let body_id: u64 = tok.parse("body id")?;
            let mut meta = [0f32; 9];
            for m in &mut meta {
                *m = tok.float("body metadata")?;
            }
            let n: usize = tok.parse("joint count")?;
            match joint_count {
                Some(expected) if expected != n => return Err(Error::JointCountMismatch { expected, found: n }),
                _ => joint_count = Some(n),
            }
            let mut joints = Vec::with_capacity(n.min(1 << 10));
            for _ in 0..n {
                let mut vals = [0f32; 11];
                for v in &mut vals {
                    *v = tok.float("joint value")?;
                }
                let tracking_state: i32 = tok.parse("joint tracking state")?;
                joints.push(Joint3D {
                    x: vals[0],
                    y: vals[1],
                    z: vals[2],
                    depth_x: vals[3],
                    depth_y: vals[4],
                    color_x: vals[5],
                    color_y: vals[6],
                    orientation: [vals[7], vals[8], vals[9], vals[10]],
                    tracking_state,
                });
            }
            bodies.push(BodyFrame { body_id, meta, joints });
        }
        frames.push(bodies);
    }
    Ok(SkeletonSequence { sample_id: String::new(), frames, joint_count: joint_count.unwrap_or(0) })
}

pub fn load_skeleton_file(path: &Path, expected_joints: Option<usize>) -> Result<SkeletonSequence> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut seq = parse_skeleton(&bytes, expected_joints)?;
    seq.sample_id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
    Ok(seq)
}

/// Writes the canonical text form; floats use the shortest round-tripping representation.
pub fn serialize_skeleton(seq: &SkeletonSequence) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{}", seq.frames.len());
    for bodies in &seq.frames {
        let _ = writeln!(out, "{}", bodies.len());
        for b in bodies {
            let _ = write!(out, "{}", b.body_id);
            for m in b.meta {
                let _ = write!(out, " {m}");
            }
            let _ = writeln!(out, "\n{}", b.joints.len());
            for j in &b.joints {
                let [ow, ox, oy, oz] = j.orientation;
                let _ = writeln!(
                    out,
                    "{} {} {} {} {} {} {} {} {} {} {} {}",
                    j.x, j.y, j.z, j.depth_x, j.depth_y, j.color_x, j.color_y, ow, ox, oy, oz, j.tracking_state
                );
            }
        }
    }
    out
}

/// Sum over consecutive frames of squared joint displacement, per body id.
pub fn motion_energy(seq: &SkeletonSequence) -> BTreeMap<u64, f64> {
    let mut energy = BTreeMap::new();
    for (t, bodies) in seq.frames.iter().enumerate() {
        for body in bodies {
            let e = energy.entry(body.body_id).or_insert(0.0);
            let Some(prev) = t.checked_sub(1).and_then(|p| seq.frames[p].iter().find(|b| b.body_id == body.body_id))
            else {
                continue;
            };
            for (a, b) in body.joints.iter().zip(&prev.joints) {
                for (pa, pb) in a.position().iter().zip(b.position()) {
                    let d = (*pa as f64) - (pb as f64);
                    *e += d * d;
                }
            }
        }
    }
    energy
}

/// Keeps the `max_bodies` most active bodies (ties to smaller id), ordered by
/// descending energy within every frame.
pub fn select_primary_bodies(seq: &SkeletonSequence, max_bodies: usize) -> SkeletonSequence {
    assert!(max_bodies >= 1, "max_bodies must be at least 1");
    let mut ranked: Vec<(u64, f64)> = motion_energy(seq).into_iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(max_bodies);
    let rank_of = |id: u64| ranked.iter().position(|(r, _)| *r == id);

    let frames = seq
        .frames
        .iter()
        .map(|bodies| {
            let mut kept: Vec<(usize, &BodyFrame)> =
                bodies.iter().filter_map(|b| rank_of(b.body_id).map(|r| (r, b))).collect();
            kept.sort_by_key(|(r, _)| *r);
            kept.into_iter().map(|(_, b)| b.clone()).collect()
        })
        .collect();
    SkeletonSequence { sample_id: seq.sample_id.clone(), frames, joint_count: seq.joint_count }
}

/// Translates every joint so the first body's joint 0 in the first populated frame sits at the origin.
pub fn normalize_sequence(seq: &SkeletonSequence) -> Result<SkeletonSequence> {
    let anchor = seq
        .frames
        .iter()
        .find_map(|bodies| bodies.first())
        .and_then(|b| b.joints.first())
        .ok_or(Error::EmptySequence)?
        .position();
    let mut out = seq.clone();
    for body in out.frames.iter_mut().flatten() {
        for j in &mut body.joints {
            j.x -= anchor[0];
            j.y -= anchor[1];
            j.z -= anchor[2];
        }
    }
    Ok(out)
}

/// Resamples to `frames` time steps (center rule when longer, zero tail when
/// shorter) and keeps the first `bodies` bodies of every frame.
pub fn to_pose_tensor(seq: &SkeletonSequence, frames: usize, bodies: usize) -> PoseTensor {
    assert!(frames >= 1 && bodies >= 1, "pose tensor extents must be positive");
    let v = seq.joint_count;
    let n = seq.frames.len();
    let source: Vec<usize> = if n > frames { center_indices(n, frames) } else { (0..n).collect() };
    let mut data = Tensor::zeros(&[3, frames, v, bodies]);
    for (t, &src) in source.iter().enumerate() {
        for (m, body) in seq.frames[src].iter().take(bodies).enumerate() {
            for (i, j) in body.joints.iter().enumerate().take(v) {
                for (c, val) in j.position().into_iter().enumerate() {
                    data.set(&[c, t, i, m], val);
                }
            }
        }
    }
    PoseTensor { data }
}
