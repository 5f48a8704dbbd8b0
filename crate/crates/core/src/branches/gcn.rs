use serde::{Deserialize, Serialize};

use super::{he_normal, AdjacencySpec, Branch};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ParamId, ParamSet, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GcnConfig {
    pub blocks: usize,
    /// Output channels of each block (`blocks` entries).
    pub channels: Vec<usize>,
    /// Odd temporal kernel; `None` leaves each block purely spatial.
    pub temporal_kernel: Option<usize>,
    pub classes: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
}

fn default_in_channels() -> usize {
    3
}

impl GcnConfig {
    /// `blocks` blocks, the first half at 16 channels and the rest at 32.
    pub fn with_blocks(blocks: usize, classes: usize) -> Self {
        let channels = (0..blocks).map(|i| if i < blocks / 2 { 16 } else { 32 }).collect();
        Self { blocks, channels, temporal_kernel: Some(9), classes, in_channels: 3 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("gcn.blocks must be >= 1".into()));
        }
        if self.channels.len() != self.blocks || self.channels.contains(&0) {
            return Err(Error::Config(format!(
                "gcn.channels needs {} positive entries, got {:?}",
                self.blocks, self.channels
            )));
        }
        if matches!(self.temporal_kernel, Some(k) if k % 2 == 0) {
            return Err(Error::Config("gcn.temporal_kernel must be odd".into()));
        }
        if self.classes < 2 || self.in_channels == 0 {
            return Err(Error::Config("gcn needs >= 2 classes and >= 1 input channel".into()));
        }
        Ok(())
    }
}

impl Default for GcnConfig {
    fn default() -> Self {
        Self::with_blocks(10, 60)
    }
}

#[derive(Clone, Debug)]
struct TemporalIds {
    w: ParamId,
    b: ParamId,
    residual: Option<ParamId>,
}

#[derive(Clone, Debug)]
struct BlockIds {
    w: ParamId,
    b: ParamId,
    temporal: Option<TemporalIds>,
}

/// Spatial step `relu((Â + offset) H W + b)`, then (optionally) a temporal
/// convolution with residual: `relu(tconv(H') + b_t + res(H))`. Features are
/// averaged over frames and joints, max-pooled over bodies and classified.
#[derive(Clone, Debug)]
pub struct GcnModel {
    pub cfg: GcnConfig,
    pub adjacency: AdjacencySpec,
    pub params: ParamSet<f32>,
    offset: ParamId,
    blocks: Vec<BlockIds>,
    fc_w: ParamId,
    fc_b: ParamId,
}

/// `[N, C, T, V, M]` → `[N·M, T, V, C]`.
pub fn channels_last<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c, t, v, m) = match *x.shape() {
        [n, c, t, v, m] => (n, c, t, v, m),
        _ => return Err(Error::shape("gcn input", format!("expected [N,C,T,V,M], got {:?}", x.shape()))),
    };
    let src = x.data();
    let mut out = vec![S::ZERO; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            for ti in 0..t {
                for vi in 0..v {
                    for mi in 0..m {
                        let s = (((ni * c + ci) * t + ti) * v + vi) * m + mi;
                        let d = (((ni * m + mi) * t + ti) * v + vi) * c + ci;
                        out[d] = src[s];
                    }
                }
            }
        }
    }
    Tensor::new(vec![n * m, t, v, c], out)
}

impl GcnModel {
    pub fn new(cfg: GcnConfig, adjacency: AdjacencySpec, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let v = adjacency.vertices;
        let mut rng = Rng::derive(seed, &[0x6763_6e]);
        let mut params = ParamSet::new();
        let offset = params.add("gcn.offset", Tensor::zeros(&[v, v]))?;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        let mut cin = cfg.in_channels;
        for (i, &co) in cfg.channels.iter().enumerate() {
            let w = params.add(format!("gcn.b{i}.w"), he_normal(&[cin, co], cin, &mut rng))?;
            let b = params.add(format!("gcn.b{i}.b"), Tensor::zeros(&[co]))?;
            let temporal = match cfg.temporal_kernel {
                None => None,
                Some(k) => {
                    let tw = params.add(format!("gcn.b{i}.tw"), he_normal(&[k, co, co], k * co, &mut rng))?;
                    let tb = params.add(format!("gcn.b{i}.tb"), Tensor::zeros(&[co]))?;
                    let residual = if cin != co {
                        Some(params.add(format!("gcn.b{i}.res"), he_normal(&[cin, co], cin, &mut rng))?)
                    } else {
                        None
                    };
                    Some(TemporalIds { w: tw, b: tb, residual })
                }
            };
            blocks.push(BlockIds { w, b, temporal });
            cin = co;
        }
        let fc_w = params.add("gcn.fc.w", he_normal(&[cin, cfg.classes], cin, &mut rng).map(|x| x * 0.5))?;
        let fc_b = params.add("gcn.fc.b", Tensor::zeros(&[cfg.classes]))?;
        Ok(Self { cfg, adjacency, params, offset, blocks, fc_w, fc_b })
    }
}

impl Branch for GcnModel {
    fn classes(&self) -> usize {
        self.cfg.classes
    }

    fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.params
    }

    fn forward<S: Scalar>(&self, tape: &mut Tape<S>, params: &ParamSet<S>, batch: &Tensor<S>) -> Result<Var> {
        let s = batch.shape();
        if s.len() != 5 || s[1] != self.cfg.in_channels || s[3] != self.adjacency.vertices {
            return Err(Error::shape(
                "gcn_forward",
                format!("input {s:?} for {} channels, {} vertices", self.cfg.in_channels, self.adjacency.vertices),
            ));
        }
        let (n, t, v, m) = (s[0], s[2], s[3], s[4]);
        let b = n * m;
        let mut h = tape.input(channels_last(batch)?);
        let adj = tape.input(self.adjacency.normalized.cast());
        let offset = tape.param(params, self.offset);
        let a = tape.add(adj, offset)?;
        let mut cin = self.cfg.in_channels;
        for (blk, &co) in self.blocks.iter().zip(&self.cfg.channels) {
            let mixed = tape.graph_mix(a, h)?;
            let flat = tape.reshape(mixed, &[b * t * v, cin])?;
            let w = tape.param(params, blk.w);
            let z = tape.matmul(flat, w)?;
            let bias = tape.param(params, blk.b);
            let z = tape.add_bias(z, bias)?;
            let z = tape.relu(z);
            let spatial = tape.reshape(z, &[b, t, v, co])?;
            h = match &blk.temporal {
                None => spatial,
                Some(tids) => {
                    let tw = tape.param(params, tids.w);
                    let y = tape.temporal_conv(spatial, tw)?;
                    let tb = tape.param(params, tids.b);
                    let y = tape.add_bias(y, tb)?;
                    let res = match tids.residual {
                        None => h,
                        Some(r) => {
                            let flat = tape.reshape(h, &[b * t * v, cin])?;
                            let rw = tape.param(params, r);
                            let p = tape.matmul(flat, rw)?;
                            tape.reshape(p, &[b, t, v, co])?
                        }
                    };
                    let y = tape.add(y, res)?;
                    tape.relu(y)
                }
            };
            cin = co;
        }
        let pooled = tape.reshape(h, &[b, t * v, cin])?;
        let pooled = tape.mean_axis1(pooled)?;
        let bodies = tape.reshape(pooled, &[n, m, cin])?;
        let feat = tape.max_axis1(bodies)?;
        let w = tape.param(params, self.fc_w);
        let logits = tape.matmul(feat, w)?;
        let bias = tape.param(params, self.fc_b);
        tape.add_bias(logits, bias)
    }
}
