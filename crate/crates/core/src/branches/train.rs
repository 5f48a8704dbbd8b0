use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{argmax_rows, Branch, Dataset, ScoreMatrix, View};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{
    grad_check, read_checkpoint, sgd_step, write_checkpoint, CheckpointEntry, GradCheckReport, OptimizerConfig,
    ParamSet, Tape, Tensor, Var,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop after the first epoch whose train accuracy reaches this value.
    #[serde(default)]
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 65, batch_size: 64, seed: 0, target_accuracy: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
}

/// Minibatch SGD driver. `step` records the loss for one batch of sample
/// indices on the tape and returns it with the number of correct predictions.
pub fn fit<F>(
    params: &mut ParamSet<f32>,
    samples: usize,
    cfg: &TrainConfig,
    opt: &OptimizerConfig,
    mut step: F,
) -> Result<Vec<EpochStats>>
where
    F: FnMut(&mut Tape<f32>, &ParamSet<f32>, &[usize], usize) -> Result<(Var, usize)>,
{
    if samples == 0 {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    opt.validate()?;
    params.zero_grad();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..samples).collect();
    for epoch in 0..cfg.epochs {
        Rng::derive(cfg.seed, &[epoch as u64]).shuffle(&mut order);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let (loss, hits) = step(&mut tape, params, batch, epoch)?;
            let value = tape.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            let grads = tape.backward(loss)?;
            tape.accumulate_param_grads(&grads, params);
            sgd_step(params, opt, epoch);
            loss_sum += value * batch.len() as f64;
            correct += hits;
        }
        let stats =
            EpochStats { epoch, mean_loss: loss_sum / samples as f64, accuracy: correct as f64 / samples as f64 };
        history.push(stats);
        if cfg.target_accuracy.is_some_and(|t| stats.accuracy >= t) {
            break;
        }
    }
    Ok(history)
}

fn gather<D: Dataset>(data: &D, indices: &[usize], view: View) -> Result<Tensor<f32>> {
    let items = indices.par_iter().map(|&i| data.input(i, view)).collect::<Result<Vec<_>>>()?;
    Tensor::stack(&items)
}

/// Cross-entropy training of a branch; returns per-epoch history.
pub fn train_branch<B: Branch, D: Dataset>(
    model: &mut B,
    data: &D,
    cfg: &TrainConfig,
    opt: &OptimizerConfig,
) -> Result<Vec<EpochStats>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let k = model.classes();
    if let Some(bad) = (0..data.len()).map(|i| data.label(i)).find(|&l| l >= k) {
        return Err(Error::LabelOutOfRange { label: bad, classes: k });
    }
    let mut params = model.params().clone();
    let history = fit(&mut params, data.len(), cfg, opt, |tape, params, batch, epoch| {
        let x = gather(data, batch, View::Train { epoch, seed: cfg.seed })?;
        let labels: Vec<usize> = batch.iter().map(|&i| data.label(i)).collect();
        let logits = model.forward(tape, params, &x)?;
        let hits = argmax_rows(tape.value(logits)).iter().zip(&labels).filter(|(p, l)| p == l).count();
        Ok((tape.softmax_cross_entropy(logits, &labels)?, hits))
    })?;
    *model.params_mut() = params;
    Ok(history)
}

/// Deterministic forward pass over the whole dataset in its own order.
pub fn evaluate_branch<B: Branch, D: Dataset>(
    model: &B,
    data: &D,
    modality: &str,
    batch_size: usize,
) -> Result<ScoreMatrix> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut rows = Vec::with_capacity(data.len() * model.classes());
    for chunk in indices.chunks(batch_size.max(1)) {
        let x = gather(data, chunk, View::Eval)?;
        let mut tape = Tape::new();
        let logits = model.forward(&mut tape, model.params(), &x)?;
        rows.extend_from_slice(tape.value(logits).data());
    }
    let ids = indices.iter().map(|&i| data.sample_id(i).to_string()).collect();
    let labels = indices.iter().map(|&i| data.label(i)).collect();
    ScoreMatrix::new(modality, ids, labels, Tensor::new(vec![data.len(), model.classes()], rows)?)
}

/// Finite-difference check of d(cross-entropy)/d(params) for a whole branch,
/// evaluated in `f64`. `coords` index the concatenation of all parameters.
pub fn param_grad_check<B: Branch>(
    model: &B,
    batch: &Tensor<f64>,
    labels: &[usize],
    eps: f64,
    coords: Option<&[usize]>,
) -> Result<GradCheckReport> {
    let mut base = model.params().cast::<f64>();
    base.zero_grad();
    let flat: Vec<f64> = base.iter().flat_map(|p| p.value.data().iter().copied()).collect();
    let x = Tensor::new(vec![flat.len()], flat)?;
    grad_check(
        |x: &Tensor<f64>| {
            let mut params = base.clone();
            let mut offset = 0;
            for p in params.iter_mut() {
                let n = p.value.len();
                p.value.data_mut().copy_from_slice(&x.data()[offset..offset + n]);
                offset += n;
            }
            let mut tape = Tape::<f64>::new();
            let logits = model.forward(&mut tape, &params, batch)?;
            let loss = tape.softmax_cross_entropy(logits, labels)?;
            let grads = tape.backward(loss)?;
            tape.accumulate_param_grads(&grads, &mut params);
            let g: Vec<f64> = params.iter().flat_map(|p| p.grad.data().iter().copied()).collect();
            Ok((tape.value(loss).data()[0], Tensor::new(vec![g.len()], g)?))
        },
        &x,
        eps,
        coords,
    )
}

pub fn save_checkpoint(params: &ParamSet<f32>, path: &Path) -> Result<()> {
    let entries: Vec<CheckpointEntry> =
        params.iter().map(|p| CheckpointEntry { name: p.name.clone(), tensor: p.value.clone() }).collect();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(BufWriter::new(file), &entries).map_err(|e| Error::io(path, e))
}

/// Loads values into an existing parameter set; names and shapes must match exactly.
pub fn load_checkpoint(params: &mut ParamSet<f32>, path: &Path) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let entries = read_checkpoint(BufReader::new(file))?;
    if entries.len() != params.len() {
        return Err(Error::Checkpoint(format!("{} tensors, model has {}", entries.len(), params.len())));
    }
    for (p, e) in params.iter_mut().zip(entries) {
        if p.name != e.name || p.value.shape() != e.tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "expected {} {:?}, found {} {:?}",
                p.name,
                p.value.shape(),
                e.name,
                e.tensor.shape()
            )));
        }
        p.value = e.tensor;
    }
    Ok(())
}

/// In-memory samples whose training and evaluation views coincide.
#[derive(Clone, Debug, Default)]
pub struct TensorDataset {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub inputs: Vec<Tensor<f32>>,
}

impl Dataset for TensorDataset {
    fn len(&self) -> usize {
        self.inputs.len()
    }

    fn sample_id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    fn input(&self, i: usize, _view: View) -> Result<Tensor<f32>> {
        Ok(self.inputs[i].clone())
    }
}
