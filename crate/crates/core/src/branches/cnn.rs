use serde::{Deserialize, Serialize};

use super::{he_normal, Branch};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ParamId, ParamSet, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnConfig {
    /// Output channels of each conv-ReLU-pool stage.
    pub channels: Vec<usize>,
    pub classes: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
}

fn default_in_channels() -> usize {
    3
}

impl CnnConfig {
    pub fn new(classes: usize) -> Self {
        Self { channels: vec![8, 16, 32, 32], classes, in_channels: 3 }
    }

    pub fn blocks(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("cnn.channels needs >= 1 positive entry".into()));
        }
        if self.classes < 2 || self.in_channels == 0 {
            return Err(Error::Config("cnn needs >= 2 classes and >= 1 input channel".into()));
        }
        Ok(())
    }
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self::new(60)
    }
}

/// `blocks x (conv3x3 -> bias -> relu -> maxpool2)`, global average pool, linear.
#[derive(Clone, Debug)]
pub struct CnnModel {
    pub cfg: CnnConfig,
    pub params: ParamSet<f32>,
    convs: Vec<(ParamId, ParamId)>,
    fc_w: ParamId,
    fc_b: ParamId,
}

impl CnnModel {
    pub fn new(cfg: CnnConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::derive(seed, &[0x636e_6e]);
        let mut params = ParamSet::new();
        let mut convs = Vec::new();
        let mut cin = cfg.in_channels;
        for (i, &co) in cfg.channels.iter().enumerate() {
            let w = params.add(format!("cnn.c{i}.w"), he_normal(&[co, cin, 3, 3], cin * 9, &mut rng))?;
            let b = params.add(format!("cnn.c{i}.b"), Tensor::zeros(&[co]))?;
            convs.push((w, b));
            cin = co;
        }
        let fc_w = params.add("cnn.fc.w", he_normal(&[cin, cfg.classes], cin, &mut rng))?;
        let fc_b = params.add("cnn.fc.b", Tensor::zeros(&[cfg.classes]))?;
        Ok(Self { cfg, params, convs, fc_w, fc_b })
    }
}

impl Branch for CnnModel {
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
        let min = 1usize << self.convs.len();
        match *batch.shape() {
            [_, c, h, w] if c == self.cfg.in_channels && h >= min && w >= min => {}
            ref s => {
                return Err(Error::shape(
                    "cnn_forward",
                    format!("input {s:?}; need [N,{},H,W] with H,W >= {min}", self.cfg.in_channels),
                ))
            }
        }
        let mut h = tape.input(batch.clone());
        for &(w, b) in &self.convs {
            let kw = tape.param(params, w);
            let y = tape.conv2d(h, kw, 1, 1)?;
            let kb = tape.param(params, b);
            let y = tape.add_channel_bias(y, kb)?;
            let y = tape.relu(y);
            h = tape.max_pool2(y)?;
        }
        let feat = tape.global_avg_pool(h)?;
        let w = tape.param(params, self.fc_w);
        let logits = tape.matmul(feat, w)?;
        let bias = tape.param(params, self.fc_b);
        tape.add_bias(logits, bias)
    }
}
