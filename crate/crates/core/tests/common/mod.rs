//! Helpers shared by several integration-test targets.
#![allow(dead_code)]

use eppnet::branches::{build_adjacency, param_grad_check, Branch, CnnConfig, CnnModel, GcnConfig, GcnModel};
use eppnet::modalities::BoneTopology;
use eppnet::rng::Rng;
use eppnet::skeleton::{BodyFrame, Joint3D, PoseTensor, SkeletonSequence};
use eppnet::tensor::{grad_check, ParamSet, Tape, Tensor, Var};
use eppnet::Result;

pub const GRAD_CASES: u64 = 10;
pub const GRAD_EPS: f64 = 1e-3;

pub fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
}

/// Checks the gradient of `sum(probe * build(inputs))` against every input in turn.
pub fn check_op(inputs: Vec<Tensor<f64>>, seed: u64, build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> f64 {
    let mut rng = Rng::new(seed ^ 0xABCD);
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        Tensor::from_fn(tape.value(out).shape(), |_| rng.uniform(-1.0, 1.0))
    };
    let mut worst: f64 = 0.0;
    for i in 0..inputs.len() {
        let f = |x: &Tensor<f64>| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| tape.input(if j == i { x.clone() } else { t.clone() }))
                .collect();
            let out = build(&mut tape, &vars)?;
            let loss = tape.weighted_sum(out, probe.clone())?;
            let grads = tape.backward(loss)?;
            let g = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
            Ok((tape.value(loss).data()[0], g))
        };
        let report = grad_check(f, &inputs[i], GRAD_EPS, None).unwrap();
        worst = worst.max(report.max_rel_error);
    }
    worst
}

fn record(worst: &mut Vec<(&'static str, f64)>, name: &'static str, e: f64) {
    match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(slot) => slot.1 = slot.1.max(e),
        None => worst.push((name, e)),
    }
}

/// Worst relative error per differentiable op over `cases` seeded random cases.
pub fn op_grad_suite(cases: u64) -> Vec<(&'static str, f64)> {
    let mut worst = Vec::new();
    let w = &mut worst;
    for seed in 0..cases {
        let mut rng = Rng::new(seed);
        let r = &mut rng;
        record(w, "matmul", check_op(vec![random(&[3, 4], r), random(&[4, 2], r)], seed, |t, v| t.matmul(v[0], v[1])));
        record(w, "add", check_op(vec![random(&[2, 3], r), random(&[2, 3], r)], seed, |t, v| t.add(v[0], v[1])));
        record(w, "add_bias", check_op(vec![random(&[4, 3], r), random(&[3], r)], seed, |t, v| t.add_bias(v[0], v[1])));
        record(
            w,
            "add_channel_bias",
            check_op(vec![random(&[2, 3, 2, 2], r), random(&[3], r)], seed, |t, v| t.add_channel_bias(v[0], v[1])),
        );
        record(w, "relu", check_op(vec![random(&[20], r)], seed, |t, v| Ok(t.relu(v[0]))));
        record(w, "reshape", check_op(vec![random(&[2, 6], r)], seed, |t, v| t.reshape(v[0], &[3, 4])));
        record(
            w,
            "conv2d",
            check_op(vec![random(&[2, 2, 5, 5], r), random(&[3, 2, 3, 3], r)], seed, |t, v| t.conv2d(v[0], v[1], 1, 1)),
        );
        record(
            w,
            "conv2d_strided",
            check_op(vec![random(&[1, 2, 6, 5], r), random(&[2, 2, 3, 3], r)], seed, |t, v| t.conv2d(v[0], v[1], 2, 0)),
        );
        record(w, "max_pool2", check_op(vec![random(&[2, 2, 4, 6], r)], seed, |t, v| t.max_pool2(v[0])));
        record(w, "global_avg_pool", check_op(vec![random(&[2, 3, 3, 2], r)], seed, |t, v| t.global_avg_pool(v[0])));
        record(
            w,
            "graph_mix",
            check_op(vec![random(&[4, 4], r), random(&[2, 3, 4, 2], r)], seed, |t, v| t.graph_mix(v[0], v[1])),
        );
        record(
            w,
            "temporal_conv",
            check_op(vec![random(&[2, 5, 3, 2], r), random(&[3, 2, 4], r)], seed, |t, v| t.temporal_conv(v[0], v[1])),
        );
        record(w, "mean_axis1", check_op(vec![random(&[2, 5, 3], r)], seed, |t, v| t.mean_axis1(v[0])));
        record(w, "max_axis1", check_op(vec![random(&[3, 4, 2], r)], seed, |t, v| t.max_axis1(v[0])));
        let labels: Vec<usize> = (0..3).map(|_| r.below(4) as usize).collect();
        record(
            w,
            "softmax_cross_entropy",
            check_op(vec![random(&[3, 4], r)], seed, move |t, v| t.softmax_cross_entropy(v[0], &labels)),
        );
    }
    worst
}

/// Small GCN over the 25-joint graph with the learned offset and biases
/// randomised, so every gradient path carries signal.
pub fn small_gcn(seed: u64, classes: usize) -> GcnModel {
    let topo = BoneTopology::ntu25();
    let adj = build_adjacency(&topo.edges(), topo.vertices()).unwrap();
    let cfg = GcnConfig { blocks: 2, channels: vec![3, 4], temporal_kernel: Some(3), classes, in_channels: 3 };
    let mut model = GcnModel::new(cfg, adj, seed).unwrap();
    let mut rng = Rng::derive(seed, &[7]);
    for p in model.params.iter_mut() {
        if p.name == "gcn.offset" || p.name.ends_with(".b") || p.name.ends_with(".tb") {
            p.value = Tensor::from_fn(p.value.shape(), |_| rng.uniform(-0.1, 0.1) as f32);
        }
    }
    model
}

/// Two-block CNN (same layer sequence as the full branch) for 4x4 inputs.
pub fn small_cnn(seed: u64, classes: usize) -> CnnModel {
    let cfg = CnnConfig { channels: vec![3, 4], classes, in_channels: 3 };
    let mut model = CnnModel::new(cfg, seed).unwrap();
    let mut rng = Rng::derive(seed, &[8]);
    for p in model.params.iter_mut().filter(|p| p.name.ends_with(".b")) {
        p.value = Tensor::from_fn(p.value.shape(), |_| rng.uniform(-0.1, 0.1) as f32);
    }
    model
}

#[derive(Clone, Copy, Debug, Default)]
pub struct BranchGradReport {
    /// Worst relative error at `GRAD_EPS` over coordinates whose window holds no kink.
    pub smooth_error: f64,
    pub smooth: usize,
    /// Coordinates whose `±GRAD_EPS` window straddles a ReLU/max switch.
    pub kinked: usize,
    /// Worst relative error over the kinked coordinates, re-checked at `FINE_EPS`.
    pub kinked_error: f64,
}

pub const FINE_EPS: f64 = 1e-6;

fn logits_at<B: Branch>(model: &B, base: &ParamSet<f64>, flat: &[f64], batch: &Tensor<f64>) -> Vec<f64> {
    let mut params = base.clone();
    let mut off = 0;
    for p in params.iter_mut() {
        let n = p.value.len();
        p.value.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &params, batch).unwrap();
    tape.value(out).data().to_vec()
}

/// Full-branch parameter gradient check that separates out non-differentiable
/// windows. Inside one activation pattern the logits are a polynomial of
/// degree `degree(name)` in any single parameter, so a non-vanishing
/// `(degree+1)`-th finite difference over `[θ-eps, θ+eps]` proves a kink.
pub fn branch_grad_report<B: Branch>(
    model: &B,
    batch: &Tensor<f64>,
    labels: &[usize],
    degree: impl Fn(&str) -> usize,
) -> BranchGradReport {
    let base = model.params().cast::<f64>();
    let flat: Vec<f64> = base.iter().flat_map(|p| p.value.data().iter().copied()).collect();
    let degrees: Vec<usize> =
        base.iter().flat_map(|p| std::iter::repeat(degree(&p.name)).take(p.value.len())).collect();
    let h = GRAD_EPS / 2.0;
    let (mut smooth, mut kinked) = (Vec::new(), Vec::new());
    for j in 0..flat.len() {
        let samples: Vec<Vec<f64>> = (-2..=2)
            .map(|k| {
                let mut x = flat.clone();
                x[j] += k as f64 * h;
                logits_at(model, &base, &x, batch)
            })
            .collect();
        let scale = 1.0 + samples.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut diffs = samples;
        for _ in 0..=degrees[j] {
            diffs = diffs.windows(2).map(|w| w[1].iter().zip(&w[0]).map(|(a, b)| a - b).collect()).collect();
        }
        let residual = diffs.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        if residual <= 1e-9 * scale {
            smooth.push(j);
        } else {
            kinked.push(j);
        }
    }
    let check = |coords: &[usize], eps| {
        if coords.is_empty() {
            return 0.0;
        }
        param_grad_check(model, batch, labels, eps, Some(coords)).unwrap().max_rel_error
    };
    BranchGradReport {
        smooth_error: check(&smooth, GRAD_EPS),
        smooth: smooth.len(),
        kinked: kinked.len(),
        kinked_error: check(&kinked, FINE_EPS),
    }
}

/// Per-seed reports for the GCN and CNN branches on 2-sample batches.
pub fn branch_grad_case(seed: u64) -> [(&'static str, BranchGradReport); 2] {
    let mut rng = Rng::new(1000 + seed);
    let labels: Vec<usize> = (0..2).map(|_| rng.below(3) as usize).collect();
    let gcn = small_gcn(seed, 3);
    let x = random(&[2, 3, 4, 25, 2], &mut rng);
    let blocks = gcn.cfg.blocks;
    let g = branch_grad_report(&gcn, &x, &labels, |n| if n == "gcn.offset" { blocks } else { 1 });
    let cnn = small_cnn(seed, 3);
    let x = random(&[2, 3, 4, 4], &mut rng);
    let c = branch_grad_report(&cnn, &x, &labels, |_| 1);
    [("gcn branch", g), ("cnn branch", c)]
}

/// Worst-case merge of `branch_grad_case` over `cases` seeds.
pub fn branch_grad_suite(cases: u64) -> Vec<(&'static str, BranchGradReport)> {
    let mut out: Vec<(&'static str, BranchGradReport)> = Vec::new();
    for seed in 0..cases {
        for (name, r) in branch_grad_case(seed) {
            match out.iter_mut().find(|(n, _)| *n == name) {
                None => out.push((name, r)),
                Some((_, acc)) => {
                    acc.smooth_error = acc.smooth_error.max(r.smooth_error);
                    acc.kinked_error = acc.kinked_error.max(r.kinked_error);
                    acc.smooth += r.smooth;
                    acc.kinked += r.kinked;
                }
            }
        }
    }
    out
}

/// Values on a dyadic grid (multiples of 1/64 in [-8, 8]) so that sums and
/// differences of a few entries are exact in f32.
pub fn dyadic(rng: &mut Rng) -> f32 {
    (rng.below(1025) as i64 - 512) as f32 / 64.0
}

pub fn random_pose(rng: &mut Rng, t: usize, v: usize, m: usize) -> PoseTensor {
    PoseTensor::new(Tensor::from_fn(&[3, t, v, m], |_| dyadic(rng))).unwrap()
}

pub fn body(id: u64, joints: &[[f32; 3]]) -> BodyFrame {
    BodyFrame { body_id: id, meta: [0.0; 9], joints: joints.iter().map(|&[x, y, z]| Joint3D::at(x, y, z)).collect() }
}

pub fn sequence(frames: Vec<Vec<BodyFrame>>) -> SkeletonSequence {
    let joint_count = frames.iter().flatten().map(|b| b.joints.len()).next().unwrap_or(0);
    SkeletonSequence { sample_id: String::new(), frames, joint_count }
}

/// Runs a branch forward in f32 and returns the logits.
pub fn logits<B: Branch>(model: &B, x: &Tensor<f32>) -> Tensor<f32> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, model.params(), x).unwrap();
    tape.value(out).clone()
}

pub fn logits_f64<B: Branch>(model: &B, x: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let params = model.params().cast::<f64>();
    let out = model.forward(&mut tape, &params, x).unwrap();
    tape.value(out).clone()
}

/// Synthetic dataset under `dir` with a config shrunk for quick end-to-end runs;
/// returns the config path.
pub fn tiny_pipeline(
    dir: &std::path::Path,
    mode: eppnet::pipeline::SynthMode,
    samples_per_class: usize,
) -> std::path::PathBuf {
    use eppnet::pipeline::{cmd_synth, PipelineConfig, SynthOptions};
    let s = cmd_synth(dir, &SynthOptions { classes: 4, samples_per_class, seed: 7, mode }).unwrap();
    let mut cfg = PipelineConfig::load(&s.config).unwrap();
    cfg.frames = 8;
    cfg.gcn.blocks = 1;
    cfg.gcn.channels = vec![4];
    cfg.gcn.temporal_kernel = Some(3);
    cfg.cnn.channels = vec![4];
    cfg.gcn.train.epochs = 2;
    cfg.cnn.train.epochs = 2;
    cfg.manifest = "manifest.json".into();
    cfg.workspace = "workspace".into();
    std::fs::write(&s.config, cfg.to_json()).unwrap();
    s.config
}

/// The same network on a graph whose vertex `v` is renamed `perm[v]`.
pub fn permuted_model(model: &GcnModel, perm: &[usize], topo: &BoneTopology) -> GcnModel {
    let edges: Vec<(usize, usize)> = topo.edges().iter().map(|&(a, b)| (perm[a], perm[b])).collect();
    let mut out = GcnModel::new(model.cfg.clone(), build_adjacency(&edges, 25).unwrap(), 0).unwrap();
    out.params = model.params.clone();
    let id = out.params.id("gcn.offset").unwrap();
    let old = model.params.get(id).value.clone();
    let slot = &mut out.params.get_mut(id).value;
    for i in 0..25 {
        for j in 0..25 {
            slot.set(&[perm[i], perm[j]], old.get(&[i, j]));
        }
    }
    out
}

/// Moves vertex `v` of a `[N, C, T, V, M]` tensor to `perm[v]`.
pub fn permute_vertices(x: &Tensor<f32>, perm: &[usize]) -> Tensor<f32> {
    let mut px = Tensor::zeros(x.shape());
    for idx in 0..x.len() {
        let (mut r, mut coords) = (idx, [0usize; 5]);
        for a in (0..5).rev() {
            coords[a] = r % x.shape()[a];
            r /= x.shape()[a];
        }
        coords[3] = perm[coords[3]];
        px.set(&coords, x.data()[idx]);
    }
    px
}
