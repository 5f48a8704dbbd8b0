//! The two classification branches: a graph network over pose tensors and a
//! small convolutional network over parsing feature maps.

mod adjacency;
mod cnn;
mod gcn;
mod scores;
mod train;

pub use adjacency::{build_adjacency, AdjacencySpec};
pub use cnn::{CnnConfig, CnnModel};
pub use gcn::{channels_last, GcnConfig, GcnModel};
pub use scores::{argmax_rows, ScoreMatrix};
pub use train::{
    evaluate_branch, fit, load_checkpoint, param_grad_check, save_checkpoint, train_branch, EpochStats, TensorDataset,
    TrainConfig,
};

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{ParamSet, Scalar, Tape, Tensor, Var};

/// A classifier whose forward pass can be replayed at any precision.
pub trait Branch {
    fn classes(&self) -> usize;
    fn params(&self) -> &ParamSet<f32>;
    fn params_mut(&mut self) -> &mut ParamSet<f32>;
    /// Logits `[batch, K]` for a stacked batch; `params` may be a cast of `self.params()`.
    fn forward<S: Scalar>(&self, tape: &mut Tape<S>, params: &ParamSet<S>, batch: &Tensor<S>) -> Result<Var>;
}

/// Which view of a sample to produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    /// Training view; may be randomized from `(seed, epoch)`.
    Train {
        epoch: usize,
        seed: u64,
    },
    Eval,
}

pub trait Dataset: Sync {
    fn len(&self) -> usize;
    fn sample_id(&self, i: usize) -> &str;
    fn label(&self, i: usize) -> usize;
    fn input(&self, i: usize, view: View) -> Result<Tensor<f32>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// He-normal initialisation.
pub(crate) fn he_normal(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<f32> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| (rng.normal() * std) as f32)
}
