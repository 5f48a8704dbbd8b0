use super::kernels::{gemm_acc, gemm_nt_acc, gemm_tn_acc, to_scalar};
use super::{ParamId, ParamSet, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<S: Scalar> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    /// bias broadcast over the last axis
    AddBias(Var, Var),
    /// bias broadcast over the channel axis of `[N,C,H,W]` or `[C,H,W]`
    AddChannelBias(Var, Var),
    Relu(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        k: Var,
        stride: usize,
        pad: usize,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    GraphMix {
        adj: Var,
        x: Var,
    },
    TemporalConv {
        x: Var,
        w: Var,
    },
    MeanAxis1(Var),
    MaxAxis1 {
        x: Var,
        argmax: Vec<usize>,
    },
    SoftmaxCe {
        logits: Var,
        grad: Tensor<S>,
    },
    WeightedSum {
        x: Var,
        weights: Tensor<S>,
    },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
}

/// Records a forward computation for reverse-mode differentiation.
pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn conv_out(extent: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = extent + 2 * pad;
    if k == 0 || stride == 0 || padded < k {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

/// Splits a rank-3 or rank-4 image shape into `(batch, C, H, W, batched)`.
fn image_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize, bool)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w, true)),
        [c, h, w] => Ok((1, c, h, w, false)),
        _ => Err(Error::shape(op, format!("expected [N,C,H,W] or [C,H,W], got {shape:?}"))),
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, params: &ParamSet<S>, id: ParamId) -> Var {
        self.push(params.get(id).value.clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = match (av.shape(), bv.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            (sa, sb) => return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}"))),
        };
        let mut acc = vec![0.0; m * n];
        gemm_acc(av.data(), bv.data(), &mut acc, m, k, n);
        let out = Tensor::new(vec![m, n], to_scalar(&acc))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", format!("{:?} + {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let c = *xv.shape().last().unwrap_or(&0);
        if bv.shape() != [c] || c == 0 {
            return Err(Error::shape("add_bias", format!("{:?} + {:?}", xv.shape(), bv.shape())));
        }
        let data = xv.data().iter().enumerate().map(|(i, &v)| v + bv.data()[i % c]).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddBias(x, b)))
    }

    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let (_, c, h, w, _) = image_dims(xv.shape(), "add_channel_bias")?;
        if bv.shape() != [c] {
            return Err(Error::shape("add_channel_bias", format!("bias {:?} for {c} channels", bv.shape())));
        }
        let plane = h * w;
        let data = xv.data().iter().enumerate().map(|(i, &v)| v + bv.data()[(i / plane) % c]).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddChannelBias(x, b)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > S::ZERO { v } else { S::ZERO });
        self.push(out, Op::Relu(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Cross-correlation of `[N,C_in,H,W]` (or `[C_in,H,W]`) with `[C_out,C_in,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(k));
        let (n, ci, h, w, batched) = image_dims(xv.shape(), "conv2d")?;
        let (co, kh, kw) = match *kv.shape() {
            [co, kci, kh, kw] if kci == ci => (co, kh, kw),
            _ => return Err(Error::shape("conv2d", format!("kernel {:?} for {ci} input channels", kv.shape()))),
        };
        let (ho, wo) = match (conv_out(h, kh, stride, pad), conv_out(w, kw, stride, pad)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} stride {stride} pad {pad} on {h}x{w}"))),
        };
        let ck = ci * kh * kw;
        let geo = ConvGeometry { ci, h, w, kh, kw, ho, wo, stride, pad };
        let mut out = Vec::with_capacity(n * co * ho * wo);
        let mut cols = vec![S::ZERO; ck * ho * wo];
        for s in 0..n {
            let xs = &xv.data()[s * ci * h * w..(s + 1) * ci * h * w];
            geo.im2col(xs, &mut cols);
            let mut acc = vec![0.0; co * ho * wo];
            gemm_acc(kv.data(), &cols, &mut acc, co, ck, ho * wo);
            out.extend(acc.iter().map(|&v| S::from_f64(v)));
        }
        let shape = if batched { vec![n, co, ho, wo] } else { vec![co, ho, wo] };
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Conv2d { x, k, stride, pad }))
    }

    /// 2x2 max pooling with stride 2 over the last two axes (odd trailing rows dropped).
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w, batched) = image_dims(xv.shape(), "max_pool2")?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(Error::shape("max_pool2", format!("{h}x{w} too small")));
        }
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for r in 0..ho {
                for q in 0..wo {
                    let mut best = base + 2 * r * w + 2 * q;
                    for (dr, dq) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * r + dr) * w + 2 * q + dq;
                        if xv.data()[idx] > xv.data()[best] {
                            best = idx;
                        }
                    }
                    out.push(xv.data()[best]);
                    argmax.push(best);
                }
            }
        }
        let shape = if batched { vec![n, c, ho, wo] } else { vec![c, ho, wo] };
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::MaxPool2 { x, argmax }))
    }

    /// Mean over the spatial axes: `[N,C,H,W] -> [N,C]`, `[C,H,W] -> [C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w, batched) = image_dims(xv.shape(), "global_avg_pool")?;
        let plane = h * w;
        let out: Vec<S> = xv
            .data()
            .chunks(plane)
            .map(|p| S::from_f64(p.iter().map(|v| v.to_f64()).sum::<f64>() / plane as f64))
            .collect();
        let shape = if batched { vec![n, c] } else { vec![c] };
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::GlobalAvgPool(x)))
    }

    /// Vertex mixing `out[.., v, c] = sum_u adj[v, u] * x[.., u, c]` for `x` of shape `[.., V, C]`.
    pub fn graph_mix(&mut self, adj: Var, x: Var) -> Result<Var> {
        let (av, xv) = (self.value(adj), self.value(x));
        let r = xv.rank();
        if r < 2 {
            return Err(Error::shape("graph_mix", format!("features {:?}", xv.shape())));
        }
        let (v, c) = (xv.shape()[r - 2], xv.shape()[r - 1]);
        if av.shape() != [v, v] {
            return Err(Error::shape("graph_mix", format!("adjacency {:?} for {v} vertices", av.shape())));
        }
        let slab = v * c;
        let mut out = Vec::with_capacity(xv.len());
        let mut acc = vec![0.0; slab];
        for xs in xv.data().chunks(slab) {
            acc.iter_mut().for_each(|a| *a = 0.0);
            gemm_acc(av.data(), xs, &mut acc, v, v, c);
            out.extend(acc.iter().map(|&a| S::from_f64(a)));
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(out, Op::GraphMix { adj, x }))
    }

    /// Same-padded convolution along `T` of `[B,T,V,C]` with kernel `[K,C,C_out]`, `K` odd.
    pub fn temporal_conv(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (b, t, v, c) = match *xv.shape() {
            [b, t, v, c] => (b, t, v, c),
            _ => return Err(Error::shape("temporal_conv", format!("input {:?}", xv.shape()))),
        };
        let (k, co) = match *wv.shape() {
            [k, wc, co] if wc == c && k % 2 == 1 => (k, co),
            _ => return Err(Error::shape("temporal_conv", format!("kernel {:?} for {c} channels", wv.shape()))),
        };
        let pad = k / 2;
        let mut out = Vec::with_capacity(b * t * v * co);
        let mut acc = vec![0.0; v * co];
        for bi in 0..b {
            for ti in 0..t {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for kk in 0..k {
                    let Some(src) = (ti + kk).checked_sub(pad).filter(|&s| s < t) else {
                        continue;
                    };
                    let xs = &xv.data()[(bi * t + src) * v * c..(bi * t + src + 1) * v * c];
                    let ws = &wv.data()[kk * c * co..(kk + 1) * c * co];
                    gemm_acc(xs, ws, &mut acc, v, c, co);
                }
                out.extend(acc.iter().map(|&a| S::from_f64(a)));
            }
        }
        let out = Tensor::new(vec![b, t, v, co], out)?;
        Ok(self.push(out, Op::TemporalConv { x, w }))
    }

    /// `[A,R,C] -> [A,C]` mean over the middle axis.
    pub fn mean_axis1(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (a, r, c) = match *xv.shape() {
            [a, r, c] if r > 0 => (a, r, c),
            _ => return Err(Error::shape("mean_axis1", format!("{:?}", xv.shape()))),
        };
        let mut out = Vec::with_capacity(a * c);
        for ai in 0..a {
            for ci in 0..c {
                let s: f64 = (0..r).map(|ri| xv.data()[(ai * r + ri) * c + ci].to_f64()).sum();
                out.push(S::from_f64(s / r as f64));
            }
        }
        let out = Tensor::new(vec![a, c], out)?;
        Ok(self.push(out, Op::MeanAxis1(x)))
    }

    /// `[A,R,C] -> [A,C]` max over the middle axis; ties go to the lowest index.
    pub fn max_axis1(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (a, r, c) = match *xv.shape() {
            [a, r, c] if r > 0 => (a, r, c),
            _ => return Err(Error::shape("max_axis1", format!("{:?}", xv.shape()))),
        };
        let mut out = Vec::with_capacity(a * c);
        let mut argmax = Vec::with_capacity(a * c);
        for ai in 0..a {
            for ci in 0..c {
                let mut best = ai * r * c + ci;
                for ri in 1..r {
                    let idx = (ai * r + ri) * c + ci;
                    if xv.data()[idx] > xv.data()[best] {
                        best = idx;
                    }
                }
                out.push(xv.data()[best]);
                argmax.push(best);
            }
        }
        let out = Tensor::new(vec![a, c], out)?;
        Ok(self.push(out, Op::MaxAxis1 { x, argmax }))
    }

    /// Mean cross-entropy of `[batch, K]` logits against integer labels; returns a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, grad) = softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(Tensor::scalar(S::from_f64(loss)), Op::SoftmaxCe { logits, grad }))
    }

    /// `sum_i weights[i] * x[i]`, a scalar probe used for checking gradients of non-scalar ops.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<S>) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != weights.len() {
            return Err(Error::shape("weighted_sum", format!("{} vs {}", xv.len(), weights.len())));
        }
        let s: f64 = xv.data().iter().zip(weights.data()).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
        Ok(self.push(Tensor::scalar(S::from_f64(s)), Op::WeightedSum { x, weights }))
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", format!("loss shape {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), S::ONE));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Input | Op::Param(_)) {
                continue;
            }
            // interior gradients are released once propagated
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Input | Op::Param(_) => unreachable!(),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    let mut da = vec![0.0; m * k];
                    gemm_nt_acc(g.data(), bv.data(), &mut da, m, n, k);
                    let mut db = vec![0.0; k * n];
                    gemm_tn_acc(av.data(), g.data(), &mut db, k, m, n);
                    accumulate(&mut grads, *a, Tensor::new(vec![m, k], to_scalar(&da))?);
                    accumulate(&mut grads, *b, Tensor::new(vec![k, n], to_scalar(&db))?);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddBias(x, b) => {
                    let c = self.value(*b).len();
                    let mut db = vec![0.0; c];
                    for (i, v) in g.data().iter().enumerate() {
                        db[i % c] += v.to_f64();
                    }
                    accumulate(&mut grads, *b, Tensor::new(vec![c], to_scalar(&db))?);
                    accumulate(&mut grads, *x, g);
                }
                Op::AddChannelBias(x, b) => {
                    let (_, c, h, w, _) = image_dims(self.value(*x).shape(), "add_channel_bias")?;
                    let mut db = vec![0.0; c];
                    for (i, v) in g.data().iter().enumerate() {
                        db[(i / (h * w)) % c] += v.to_f64();
                    }
                    accumulate(&mut grads, *b, Tensor::new(vec![c], to_scalar(&db))?);
                    accumulate(&mut grads, *x, g);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let data = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&gv, &v)| if v > S::ZERO { gv } else { S::ZERO })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, g.reshape(&shape)?);
                }
                Op::Conv2d { x, k, stride, pad } => {
                    let (xv, kv) = (self.value(*x), self.value(*k));
                    let (n, ci, h, w, _) = image_dims(xv.shape(), "conv2d")?;
                    let (co, kh, kw) = (kv.shape()[0], kv.shape()[2], kv.shape()[3]);
                    let ho = conv_out(h, kh, *stride, *pad).unwrap_or(0);
                    let wo = conv_out(w, kw, *stride, *pad).unwrap_or(0);
                    let geo = ConvGeometry { ci, h, w, kh, kw, ho, wo, stride: *stride, pad: *pad };
                    let ck = ci * kh * kw;
                    let mut dk = vec![0.0; co * ck];
                    let mut dx = vec![0.0; xv.len()];
                    let mut cols = vec![S::ZERO; ck * ho * wo];
                    let mut dcols = vec![0.0; ck * ho * wo];
                    for s in 0..n {
                        let xs = &xv.data()[s * ci * h * w..(s + 1) * ci * h * w];
                        let gs = &g.data()[s * co * ho * wo..(s + 1) * co * ho * wo];
                        geo.im2col(xs, &mut cols);
                        gemm_nt_acc(gs, &cols, &mut dk, co, ho * wo, ck);
                        dcols.iter_mut().for_each(|d| *d = 0.0);
                        gemm_tn_acc(kv.data(), gs, &mut dcols, ck, co, ho * wo);
                        geo.col2im(&dcols, &mut dx[s * ci * h * w..(s + 1) * ci * h * w]);
                    }
                    accumulate(&mut grads, *k, Tensor::new(kv.shape().to_vec(), to_scalar(&dk))?);
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), to_scalar(&dx))?);
                }
                Op::MaxPool2 { x, argmax } | Op::MaxAxis1 { x, argmax } => {
                    let xv = self.value(*x);
                    let mut dx = vec![S::ZERO; xv.len()];
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        dx[src] = dx[src] + gv;
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                Op::GlobalAvgPool(x) => {
                    let xv = self.value(*x);
                    let (_, _, h, w, _) = image_dims(xv.shape(), "global_avg_pool")?;
                    let plane = h * w;
                    let scale = 1.0 / plane as f64;
                    let data = (0..xv.len()).map(|i| S::from_f64(g.data()[i / plane].to_f64() * scale)).collect();
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
                }
                Op::GraphMix { adj, x } => {
                    let (av, xv) = (self.value(*adj), self.value(*x));
                    let r = xv.rank();
                    let (v, c) = (xv.shape()[r - 2], xv.shape()[r - 1]);
                    let slab = v * c;
                    let mut da = vec![0.0; v * v];
                    let mut dx = vec![0.0; xv.len()];
                    for (s, (xs, gs)) in xv.data().chunks(slab).zip(g.data().chunks(slab)).enumerate() {
                        gemm_nt_acc(gs, xs, &mut da, v, c, v);
                        gemm_tn_acc(av.data(), gs, &mut dx[s * slab..(s + 1) * slab], v, v, c);
                    }
                    accumulate(&mut grads, *adj, Tensor::new(vec![v, v], to_scalar(&da))?);
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), to_scalar(&dx))?);
                }
                Op::TemporalConv { x, w } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (b, t, v, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                    let (k, co) = (wv.shape()[0], wv.shape()[2]);
                    let pad = k / 2;
                    let mut dx = vec![0.0; xv.len()];
                    let mut dw = vec![0.0; wv.len()];
                    for bi in 0..b {
                        for ti in 0..t {
                            let gs = &g.data()[(bi * t + ti) * v * co..(bi * t + ti + 1) * v * co];
                            for kk in 0..k {
                                let Some(src) = (ti + kk).checked_sub(pad).filter(|&s| s < t) else {
                                    continue;
                                };
                                let xr = (bi * t + src) * v * c..(bi * t + src + 1) * v * c;
                                let ws = &wv.data()[kk * c * co..(kk + 1) * c * co];
                                gemm_nt_acc(gs, ws, &mut dx[xr.clone()], v, co, c);
                                gemm_tn_acc(&xv.data()[xr], gs, &mut dw[kk * c * co..(kk + 1) * c * co], c, v, co);
                            }
                        }
                    }
                    accumulate(&mut grads, *w, Tensor::new(wv.shape().to_vec(), to_scalar(&dw))?);
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), to_scalar(&dx))?);
                }
                Op::MeanAxis1(x) => {
                    let xv = self.value(*x);
                    let (a, r, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                    let scale = 1.0 / r as f64;
                    let mut dx = Vec::with_capacity(xv.len());
                    for ai in 0..a {
                        for _ in 0..r {
                            dx.extend((0..c).map(|ci| S::from_f64(g.data()[ai * c + ci].to_f64() * scale)));
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                Op::SoftmaxCe { logits, grad } => {
                    let gv = g.data()[0];
                    accumulate(&mut grads, *logits, grad.map(|v| v * gv));
                }
                Op::WeightedSum { x, weights } => {
                    let gv = g.data()[0];
                    let shape = self.value(*x).shape().to_vec();
                    let data = weights.data().iter().map(|&w| w * gv).collect();
                    accumulate(&mut grads, *x, Tensor::new(shape, data)?);
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Adds the gradient of every parameter leaf into its `Parameter::grad`.
    pub fn accumulate_param_grads(&self, grads: &Gradients<S>, params: &mut ParamSet<S>) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                params.get_mut(*id).grad.add_assign(g);
            }
        }
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }
}

struct ConvGeometry {
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    /// Source pixel for a column entry, `None` inside the zero padding.
    #[inline]
    fn source(&self, ki: usize, kj: usize, oh: usize, ow: usize) -> Option<(usize, usize)> {
        let r = (oh * self.stride + ki).checked_sub(self.pad)?;
        let c = (ow * self.stride + kj).checked_sub(self.pad)?;
        (r < self.h && c < self.w).then_some((r, c))
    }

    fn im2col<S: Scalar>(&self, x: &[S], cols: &mut [S]) {
        let hw = self.ho * self.wo;
        for ci in 0..self.ci {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    for oh in 0..self.ho {
                        for ow in 0..self.wo {
                            cols[row * hw + oh * self.wo + ow] = match self.source(ki, kj, oh, ow) {
                                Some((r, c)) => x[(ci * self.h + r) * self.w + c],
                                None => S::ZERO,
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let hw = self.ho * self.wo;
        for ci in 0..self.ci {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    for oh in 0..self.ho {
                        for ow in 0..self.wo {
                            if let Some((r, c)) = self.source(ki, kj, oh, ow) {
                                dx[(ci * self.h + r) * self.w + c] += cols[row * hw + oh * self.wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Mean softmax cross-entropy with max subtraction. Returns the loss and
/// its gradient `(softmax - onehot) / batch` with respect to the logits.
pub fn softmax_cross_entropy<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<(f64, Tensor<S>)> {
    let (b, k) = match *logits.shape() {
        [b, k] if b == labels.len() && k > 0 => (b, k),
        _ => {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {:?} with {} labels", logits.shape(), labels.len()),
            ))
        }
    };
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label: bad, classes: k });
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(b * k);
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.to_f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() - (row[label].to_f64() - max);
        for (j, e) in exps.iter().enumerate() {
            let onehot = if j == label { 1.0 } else { 0.0 };
            grad.push(S::from_f64((e / z - onehot) / b as f64));
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("softmax_cross_entropy"));
    }
    Ok((loss / b as f64, Tensor::new(vec![b, k], grad)?))
}
