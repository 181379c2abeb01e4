//! Reverse-mode autodiff over the forward primitives.
//!
//! A [`Tape`] is an append-only arena of nodes; each op validates and runs
//! the pure forward kernel from [`crate::ops`], then records what the
//! adjoint needs. [`Tape::backward`] sweeps the nodes once in reverse
//! creation order (creation order is already topological), accumulating into
//! every `requires_grad` tensor's grad slot. Single-threaded by design;
//! parallelism, if any, lives across independent tapes.

use crate::error::{Error, Result};
use crate::ops::{self, BnState, ConvSpec, NormState};
use crate::tensor::Tensor;

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Node {
    tensor: Tensor,
    op: Op,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose2 { a: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    AddRowBias { a: Var, bias: Var },
    AddChanBias { a: Var, bias: Var },
    SoftmaxRows { a: Var },
    LayerNorm { a: Var, gamma: Var, beta: Var, state: NormState },
    Gelu { a: Var },
    Conv2d { input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec },
    AdaptiveAvgPool { a: Var },
    PixelShuffle { a: Var, r: usize },
    PixelUnshuffle { a: Var, r: usize },
    HwcToChw { a: Var },
    ChwToHwc { a: Var },
    Reshape { a: Var },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    SliceCols { a: Var, start: usize },
    SliceRows { a: Var, start: usize },
    SumAll { a: Var },
    MeanAll { a: Var },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, state: BnState },
    BatchNormInfer { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    EmbeddingGather { table: Var, ids: Vec<usize> },
    CrossEntropyRows { logits: Var, targets: Vec<usize>, probs: Tensor },
}

/// Per-channel batch statistics from a training-mode batchnorm, for the
/// caller's running-average update.
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    pub var_biased: Vec<f64>,
    pub count: usize,
}

pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad()
    }

    pub fn grad_tensor(&self, v: Var) -> Tensor {
        self.nodes[v.0].tensor.grad_tensor()
    }

    /// Pushes a leaf tensor. Only leaves with `requires_grad` accumulate
    /// gradients as roots of the parameter set.
    pub fn leaf(&mut self, mut tensor: Tensor, requires_grad: bool) -> Var {
        tensor.set_requires_grad(requires_grad);
        self.push(tensor, Op::Leaf)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor, false)
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> Var {
        self.nodes.push(Node { tensor, op });
        Var(self.nodes.len() - 1)
    }

    fn push_derived(&mut self, mut tensor: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].tensor.requires_grad());
        tensor.set_requires_grad(rg);
        self.push(tensor, op)
    }

    // ---- recorded ops ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push_derived(out, Op::MatMul { a, b }, &[a, b]))
    }

    pub fn transpose2(&mut self, a: Var) -> Result<Var> {
        let out = ops::transpose2(self.value(a))?;
        Ok(self.push_derived(out, Op::Transpose2 { a }, &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.push_derived(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::sub(self.value(a), self.value(b))?;
        Ok(self.push_derived(out, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push_derived(out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = ops::scale(self.value(a), c);
        self.push_derived(out, Op::Scale { a, c }, &[a])
    }

    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let out = ops::add_row_bias(self.value(a), self.value(bias))?;
        Ok(self.push_derived(out, Op::AddRowBias { a, bias }, &[a, bias]))
    }

    pub fn add_chan_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let out = ops::add_chan_bias(self.value(a), self.value(bias))?;
        Ok(self.push_derived(out, Op::AddChanBias { a, bias }, &[a, bias]))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = ops::softmax_rows(self.value(a))?;
        Ok(self.push_derived(out, Op::SoftmaxRows { a }, &[a]))
    }

    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, state) =
            ops::layer_norm_with_state(self.value(a), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push_derived(out, Op::LayerNorm { a, gamma, beta, state }, &[a, gamma, beta]))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = ops::gelu(self.value(a));
        self.push_derived(out, Op::Gelu { a }, &[a])
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    ) -> Result<Var> {
        let out = ops::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &spec,
        )?;
        let mut inputs = vec![input, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        Ok(self.push_derived(out, Op::Conv2d { input, weight, bias, spec }, &inputs))
    }

    pub fn adaptive_avg_pool2d(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = ops::adaptive_avg_pool2d(self.value(a), out_h, out_w)?;
        Ok(self.push_derived(out, Op::AdaptiveAvgPool { a }, &[a]))
    }

    pub fn pixel_shuffle_s2d(&mut self, a: Var, r: usize) -> Result<Var> {
        let out = ops::pixel_shuffle_s2d(self.value(a), r)?;
        Ok(self.push_derived(out, Op::PixelShuffle { a, r }, &[a]))
    }

    pub fn pixel_unshuffle_d2s(&mut self, a: Var, r: usize) -> Result<Var> {
        let out = ops::pixel_unshuffle_d2s(self.value(a), r)?;
        Ok(self.push_derived(out, Op::PixelUnshuffle { a, r }, &[a]))
    }

    pub fn hwc_to_chw(&mut self, a: Var) -> Result<Var> {
        let out = ops::hwc_to_chw(self.value(a))?;
        Ok(self.push_derived(out, Op::HwcToChw { a }, &[a]))
    }

    pub fn chw_to_hwc(&mut self, a: Var) -> Result<Var> {
        let out = ops::chw_to_hwc(self.value(a))?;
        Ok(self.push_derived(out, Op::ChwToHwc { a }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).reshaped(shape)?;
        Ok(self.push_derived(out, Op::Reshape { a }, &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|v| self.value(*v)).collect();
        let out = ops::concat_rows(&tensors)?;
        Ok(self.push_derived(out, Op::ConcatRows { parts: parts.to_vec() }, parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|v| self.value(*v)).collect();
        let out = ops::concat_cols(&tensors)?;
        Ok(self.push_derived(out, Op::ConcatCols { parts: parts.to_vec() }, parts))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = ops::slice_cols(self.value(a), start, len)?;
        Ok(self.push_derived(out, Op::SliceCols { a, start }, &[a]))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = ops::slice_rows(self.value(a), start, len)?;
        Ok(self.push_derived(out, Op::SliceRows { a, start }, &[a]))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(ops::sum_all(self.value(a)));
        self.push_derived(out, Op::SumAll { a }, &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(ops::mean_all(self.value(a)));
        self.push_derived(out, Op::MeanAll { a }, &[a])
    }

    /// Batchnorm with batch statistics (training mode). Statistics are part
    /// of the differentiated graph; the returned [`BnBatchStats`] feed the
    /// caller's running averages.
    pub fn batchnorm2d_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BnBatchStats)> {
        let (out, state) = ops::batchnorm2d_train_with_state(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            eps,
        )?;
        let shape = self.value(x).shape();
        let stats = BnBatchStats {
            mean: state.mean.clone(),
            var_biased: state.var.clone(),
            count: shape[1] * shape[2],
        };
        let v = self.push_derived(out, Op::BatchNormTrain { x, gamma, beta, state }, &[x, gamma, beta]);
        Ok((v, stats))
    }

    /// Batchnorm with fixed running statistics (inference mode); the stats
    /// are treated as constants by the adjoint.
    pub fn batchnorm2d_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> Result<Var> {
        let out = ops::batchnorm2d_infer(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
        )?;
        let xv = self.value(x);
        let [c, h, w] = [xv.shape()[0], xv.shape()[1], xv.shape()[2]];
        let m = h * w;
        let mut inv_std = vec![0.0; c];
        let mut xhat = vec![0.0; c * m];
        for ch in 0..c {
            let istd = 1.0 / (running_var.data()[ch] + eps).sqrt();
            inv_std[ch] = istd;
            let mu = running_mean.data()[ch];
            for k in 0..m {
                xhat[ch * m + k] = (xv.data()[ch * m + k] - mu) * istd;
            }
        }
        Ok(self.push_derived(out, Op::BatchNormInfer { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]))
    }

    pub fn embedding_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = ops::embedding_gather(self.value(table), ids)?;
        Ok(self.push_derived(out, Op::EmbeddingGather { table, ids: ids.to_vec() }, &[table]))
    }

    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::cross_entropy_rows_with_probs(self.value(logits), targets)?;
        let out = Tensor::scalar(loss);
        Ok(self.push_derived(
            out,
            Op::CrossEntropyRows { logits, targets: targets.to_vec(), probs },
            &[logits],
        ))
    }

    // ---- backward -----------------------------------------------------

    /// Populates grad slots of every `requires_grad` tensor by a single
    /// reverse traversal from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].tensor.is_scalar() {
            return Err(Error::Contract {
                detail: format!(
                    "backward needs a scalar loss, got shape {:?}",
                    self.nodes[loss.0].tensor.shape()
                ),
            });
        }
        for node in &mut self.nodes {
            if node.tensor.requires_grad() {
                node.tensor.zero_grad();
            }
        }
        if self.nodes[loss.0].tensor.requires_grad() {
            if let Some(g) = self.nodes[loss.0].tensor.grad_mut() {
                g[0] = 1.0;
            }
        }
        for i in (0..self.nodes.len()).rev() {
            self.step_backward(i);
        }
        Ok(())
    }

    fn step_backward(&mut self, i: usize) {
        let (parents, rest) = self.nodes.split_at_mut(i);
        let node = &rest[0];
        if !node.tensor.requires_grad() {
            return;
        }
        let Some(gout) = node.tensor.grad() else { return };
        let gout = gout.to_vec();
        let out_val = node.tensor.data();
        let out_shape = node.tensor.shape().to_vec();

        // Contributions are computed with shared reads first, then
        // accumulated one parent at a time (a Var may repeat as input).
        let mut acc: Vec<(Var, Vec<f64>)> = Vec::new();

        match &node.op {
            Op::Leaf => return,
            Op::MatMul { a, b } => {
                let av = &parents[a.0].tensor;
                let bv = &parents[b.0].tensor;
                let g = Tensor::from_op(out_shape.clone(), gout.clone());
                if av.requires_grad() {
                    let bt = ops::transpose2(bv).expect("recorded shapes");
                    let da = ops::matmul(&g, &bt).expect("recorded shapes");
                    acc.push((*a, da.data().to_vec()));
                }
                if bv.requires_grad() {
                    let at = ops::transpose2(av).expect("recorded shapes");
                    let db = ops::matmul(&at, &g).expect("recorded shapes");
                    acc.push((*b, db.data().to_vec()));
                }
            }
            Op::Transpose2 { a } => {
                let g = Tensor::from_op(out_shape.clone(), gout.clone());
                let da = ops::transpose2(&g).expect("recorded shapes");
                acc.push((*a, da.data().to_vec()));
            }
            Op::Add { a, b } => {
                acc.push((*a, gout.clone()));
                acc.push((*b, gout.clone()));
            }
            Op::Sub { a, b } => {
                acc.push((*a, gout.clone()));
                acc.push((*b, gout.iter().map(|v| -v).collect()));
            }
            Op::Mul { a, b } => {
                let av = parents[a.0].tensor.data().to_vec();
                let bv = parents[b.0].tensor.data().to_vec();
                acc.push((*a, gout.iter().zip(&bv).map(|(g, v)| g * v).collect()));
                acc.push((*b, gout.iter().zip(&av).map(|(g, v)| g * v).collect()));
            }
            Op::Scale { a, c } => {
                acc.push((*a, gout.iter().map(|g| g * c).collect()));
            }
            Op::AddRowBias { a, bias } => {
                let (n, d) = (out_shape[0], out_shape[1]);
                acc.push((*a, gout.clone()));
                let mut db = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        db[j] += gout[i * d + j];
                    }
                }
                acc.push((*bias, db));
            }
            Op::AddChanBias { a, bias } => {
                let (c, hw) = (out_shape[0], out_shape[1] * out_shape[2]);
                acc.push((*a, gout.clone()));
                let mut db = vec![0.0; c];
                for ch in 0..c {
                    db[ch] = gout[ch * hw..(ch + 1) * hw].iter().sum();
                }
                acc.push((*bias, db));
            }
            Op::SoftmaxRows { a } => {
                let (n, d) = (out_shape[0], out_shape[1]);
                let mut da = vec![0.0; n * d];
                for i in 0..n {
                    let y = &out_val[i * d..(i + 1) * d];
                    let g = &gout[i * d..(i + 1) * d];
                    let dot: f64 = y.iter().zip(g).map(|(yj, gj)| yj * gj).sum();
                    for j in 0..d {
                        da[i * d + j] = y[j] * (g[j] - dot);
                    }
                }
                acc.push((*a, da));
            }
            Op::LayerNorm { a, gamma, beta, state } => {
                let (n, d) = (out_shape[0], out_shape[1]);
                let gv = parents[gamma.0].tensor.data().to_vec();
                let mut da = vec![0.0; n * d];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for i in 0..n {
                    let g = &gout[i * d..(i + 1) * d];
                    let xh = &state.xhat[i * d..(i + 1) * d];
                    let istd = state.inv_std[i];
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..d {
                        let dxh = g[j] * gv[j];
                        s1 += dxh;
                        s2 += dxh * xh[j];
                        dgamma[j] += g[j] * xh[j];
                        dbeta[j] += g[j];
                    }
                    s1 /= d as f64;
                    s2 /= d as f64;
                    for j in 0..d {
                        let dxh = g[j] * gv[j];
                        da[i * d + j] = istd * (dxh - s1 - xh[j] * s2);
                    }
                }
                acc.push((*a, da));
                acc.push((*gamma, dgamma));
                acc.push((*beta, dbeta));
            }
            Op::Gelu { a } => {
                let xv = parents[a.0].tensor.data();
                let da = gout
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| g * ops::gelu_prime(x))
                    .collect();
                acc.push((*a, da));
            }
            Op::Conv2d { input, weight, bias, spec } => {
                let xv = &parents[input.0].tensor;
                let wv = &parents[weight.0].tensor;
                let (dx, dw, db) = conv2d_backward(xv, wv, &gout, &out_shape, spec);
                if xv.requires_grad() {
                    acc.push((*input, dx));
                }
                if wv.requires_grad() {
                    acc.push((*weight, dw));
                }
                if let Some(b) = bias {
                    acc.push((*b, db));
                }
            }
            Op::AdaptiveAvgPool { a } => {
                let inp = &parents[a.0].tensor;
                let [c, h, w] = [inp.shape()[0], inp.shape()[1], inp.shape()[2]];
                let (oh, ow) = (out_shape[1], out_shape[2]);
                let mut da = vec![0.0; c * h * w];
                for ch in 0..c {
                    for i in 0..oh {
                        let (y0, y1) = ops::pool_bin(i, h, oh);
                        for j in 0..ow {
                            let (x0, x1) = ops::pool_bin(j, w, ow);
                            let share = gout[(ch * oh + i) * ow + j]
                                / ((y1 - y0) * (x1 - x0)) as f64;
                            for y in y0..y1 {
                                for x in x0..x1 {
                                    da[(ch * h + y) * w + x] += share;
                                }
                            }
                        }
                    }
                }
                acc.push((*a, da));
            }
            Op::PixelShuffle { a, r } => {
                let g = Tensor::from_op(out_shape.clone(), gout.clone());
                let da = ops::pixel_unshuffle_d2s(&g, *r).expect("recorded shapes");
                acc.push((*a, da.data().to_vec()));
            }
            Op::PixelUnshuffle { a, r } => {
                let g = Tensor::from_op(out_shape.clone(), gout.clone());
                let da = ops::pixel_shuffle_s2d(&g, *r).expect("recorded shapes");
                acc.push((*a, da.data().to_vec()));
            }
            Op::HwcToChw { a } => {
                let g = Tensor::from_op(out_shape.clone(), gout.clone());
                let da = ops::chw_to_hwc(&g).expect("recorded shapes");
                acc.push((*a, da.data().to_vec()));
            }
            Op::ChwToHwc { a } => {
                let g = Tensor::from_op(out_shape.clone(), gout.clone());
                let da = ops::hwc_to_chw(&g).expect("recorded shapes");
                acc.push((*a, da.data().to_vec()));
            }
            Op::Reshape { a } => {
                acc.push((*a, gout.clone()));
            }
            Op::ConcatRows { parts } => {
                let d = out_shape[1];
                let mut row = 0;
                for p in parts {
                    let rows = parents[p.0].tensor.shape()[0];
                    acc.push((*p, gout[row * d..(row + rows) * d].to_vec()));
                    row += rows;
                }
            }
            Op::ConcatCols { parts } => {
                let (n, total) = (out_shape[0], out_shape[1]);
                let mut off = 0;
                for p in parts {
                    let c = parents[p.0].tensor.shape()[1];
                    let mut dp = vec![0.0; n * c];
                    for i in 0..n {
                        dp[i * c..(i + 1) * c]
                            .copy_from_slice(&gout[i * total + off..i * total + off + c]);
                    }
                    acc.push((*p, dp));
                    off += c;
                }
            }
            Op::SliceCols { a, start } => {
                let inp = &parents[a.0].tensor;
                let (n, d) = (inp.shape()[0], inp.shape()[1]);
                let len = out_shape[1];
                let mut da = vec![0.0; n * d];
                for i in 0..n {
                    da[i * d + start..i * d + start + len]
                        .copy_from_slice(&gout[i * len..(i + 1) * len]);
                }
                acc.push((*a, da));
            }
            Op::SliceRows { a, start } => {
                let inp = &parents[a.0].tensor;
                let (n, d) = (inp.shape()[0], inp.shape()[1]);
                let len = out_shape[0];
                let mut da = vec![0.0; n * d];
                da[start * d..(start + len) * d].copy_from_slice(&gout);
                acc.push((*a, da));
            }
            Op::SumAll { a } => {
                let n = parents[a.0].tensor.numel();
                acc.push((*a, vec![gout[0]; n]));
            }
            Op::MeanAll { a } => {
                let n = parents[a.0].tensor.numel();
                acc.push((*a, vec![gout[0] / n as f64; n]));
            }
            Op::BatchNormTrain { x, gamma, beta, state } => {
                let (c, m) = (out_shape[0], out_shape[1] * out_shape[2]);
                let gv = parents[gamma.0].tensor.data().to_vec();
                let mut dx = vec![0.0; c * m];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    let g = &gout[ch * m..(ch + 1) * m];
                    let xh = &state.xhat[ch * m..(ch + 1) * m];
                    let istd = state.inv_std[ch];
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for k in 0..m {
                        let dxh = g[k] * gv[ch];
                        s1 += dxh;
                        s2 += dxh * xh[k];
                        dgamma[ch] += g[k] * xh[k];
                        dbeta[ch] += g[k];
                    }
                    s1 /= m as f64;
                    s2 /= m as f64;
                    for k in 0..m {
                        let dxh = g[k] * gv[ch];
                        dx[ch * m + k] = istd * (dxh - s1 - xh[k] * s2);
                    }
                }
                acc.push((*x, dx));
                acc.push((*gamma, dgamma));
                acc.push((*beta, dbeta));
            }
            Op::BatchNormInfer { x, gamma, beta, xhat, inv_std } => {
                let (c, m) = (out_shape[0], out_shape[1] * out_shape[2]);
                let gv = parents[gamma.0].tensor.data().to_vec();
                let mut dx = vec![0.0; c * m];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    for k in 0..m {
                        let g = gout[ch * m + k];
                        dx[ch * m + k] = g * gv[ch] * inv_std[ch];
                        dgamma[ch] += g * xhat[ch * m + k];
                        dbeta[ch] += g;
                    }
                }
                acc.push((*x, dx));
                acc.push((*gamma, dgamma));
                acc.push((*beta, dbeta));
            }
            Op::EmbeddingGather { table, ids } => {
                let tv = &parents[table.0].tensor;
                let d = tv.shape()[1];
                let mut dt = vec![0.0; tv.numel()];
                for (t, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += gout[t * d + j];
                    }
                }
                acc.push((*table, dt));
            }
            Op::CrossEntropyRows { logits, targets, probs } => {
                let (t, v) = (probs.shape()[0], probs.shape()[1]);
                let scale = gout[0] / t as f64;
                let mut dl = probs.data().to_vec();
                for (i, &target) in targets.iter().enumerate() {
                    dl[i * v + target] -= 1.0;
                }
                for g in &mut dl {
                    *g *= scale;
                }
                acc.push((*logits, dl));
            }
        }

        for (var, delta) in acc {
            let parent = &mut parents[var.0].tensor;
            if parent.requires_grad() {
                parent.accumulate_grad(&delta);
            }
        }
    }
}

/// Direct adjoint of the grouped/dilated convolution, mirroring the forward
/// loop structure.
fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    gout: &[f64],
    out_shape: &[usize],
    spec: &ConvSpec,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [cin, h, w] = [input.shape()[0], input.shape()[1], input.shape()[2]];
    let (cout, cin_g, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let cout_g = cout / spec.groups;
    let xd = input.data();
    let wd = weight.data();
    let mut dx = vec![0.0; cin * h * w];
    let mut dw = vec![0.0; weight.numel()];
    let mut db = vec![0.0; cout];
    for g in 0..spec.groups {
        for oc_l in 0..cout_g {
            let oc = g * cout_g + oc_l;
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = gout[(oc * oh + oy) * ow + ox];
                    db[oc] += go;
                    for ic_l in 0..cin_g {
                        let ic = g * cin_g + ic_l;
                        for ky in 0..kh {
                            let iy = (oy * spec.stride + ky * spec.dilation) as isize
                                - spec.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * spec.stride + kx * spec.dilation) as isize
                                    - spec.padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xi = (ic * h + iy as usize) * w + ix as usize;
                                let wi = ((oc * cin_g + ic_l) * kh + ky) * kw + kx;
                                dx[xi] += go * wd[wi];
                                dw[wi] += go * xd[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap(), true);
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(vec![4]), true);
        let c = tape.constant(Tensor::scalar(3.0));
        let loss = tape.sum_all(c);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0; 4]);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(vec![2, 2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract { .. })));
    }

    #[test]
    fn repeated_input_accumulates_product_rule() {
        // d/dx sum(x*x) = 2x
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn cross_entropy_gradient_is_probs_minus_onehot() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(vec![1, 4]), true);
        let loss = tape.cross_entropy_rows(logits, &[2]).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(logits).unwrap();
        assert!((g[0] - 0.25).abs() < 1e-12);
        assert!((g[2] + 0.75).abs() < 1e-12);
    }
}
