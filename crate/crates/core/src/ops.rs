//! Forward tensor primitives.
//!
//! Pure functions over [`Tensor`]; the autodiff tape records applications of
//! these and replays their adjoints. Layout conventions: matrices are
//! `[rows, cols]`, images/feature maps are `[C, H, W]`, token grids are
//! `[h, w, d]` (row-major, so a grid reshapes to `[h*w, d]` for free).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// matrix ops
// ---------------------------------------------------------------------------

fn expect_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim(op, format!("expected 2-d tensor, got {s:?}"))),
    }
}

/// `c[i,j] = Σ_t a[i,t]·b[t,j]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = expect_2d("matmul", a)?;
    let (k2, p) = expect_2d("matmul", b)?;
    if k != k2 {
        return Err(Error::dim(
            "matmul",
            format!("inner dims differ: {:?} · {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![0.0; m * p];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * p..(i + 1) * p];
        for (t, &av) in arow.iter().enumerate() {
            let brow = &bd[t * p..(t + 1) * p];
            for j in 0..p {
                orow[j] += av * brow[j];
            }
        }
    }
    Ok(Tensor::from_op(vec![m, p], out))
}

pub fn transpose2(a: &Tensor) -> Result<Tensor> {
    let (m, k) = expect_2d("transpose", a)?;
    let ad = a.data();
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        for j in 0..k {
            out[j * m + i] = ad[i * k + j];
        }
    }
    Ok(Tensor::from_op(vec![k, m], out))
}

fn zip_same_shape(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("shape mismatch: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Ok(Tensor::from_op(a.shape().to_vec(), data))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same_shape("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same_shape("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same_shape("mul", a, b, |x, y| x * y)
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    let data = a.data().iter().map(|&x| x * c).collect();
    Tensor::from_op(a.shape().to_vec(), data)
}

/// Adds `bias[d]` to every row of `a[N×d]` — the one permitted broadcast.
pub fn add_row_bias(a: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, d) = expect_2d("add_row_bias", a)?;
    if bias.shape() != [d] {
        return Err(Error::dim(
            "add_row_bias",
            format!("bias {:?} does not match row width {d}", bias.shape()),
        ));
    }
    let mut out = a.data().to_vec();
    let bd = bias.data();
    for i in 0..n {
        for j in 0..d {
            out[i * d + j] += bd[j];
        }
    }
    Ok(Tensor::from_op(vec![n, d], out))
}

/// Adds `bias[C]` to every spatial position of `x[C×H×W]`.
pub fn add_chan_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [c, h, w] = chw_dims("add_chan_bias", x)?;
    if bias.shape() != [c] {
        return Err(Error::dim(
            "add_chan_bias",
            format!("bias {:?} does not match channels {c}", bias.shape()),
        ));
    }
    let mut out = x.data().to_vec();
    let bd = bias.data();
    let hw = h * w;
    for ch in 0..c {
        for v in &mut out[ch * hw..(ch + 1) * hw] {
            *v += bd[ch];
        }
    }
    Ok(Tensor::from_op(vec![c, h, w], out))
}

// ---------------------------------------------------------------------------
// normalizations and activations
// ---------------------------------------------------------------------------

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    let (m, k) = expect_2d("softmax_rows", a)?;
    if a.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("softmax_rows", "non-finite input"));
    }
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let row = &a.data()[i * k..(i + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[i * k..(i + 1) * k];
        let mut sum = 0.0;
        for (o, &x) in orow.iter_mut().zip(row) {
            *o = (x - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    Ok(Tensor::from_op(vec![m, k], out))
}

/// Saved state from a layer-norm forward pass, consumed by the adjoint.
pub(crate) struct NormState {
    /// Normalized pre-affine values, same layout as the input.
    pub xhat: Vec<f64>,
    /// One reciprocal standard deviation per normalization group.
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm_with_state(
    a: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, NormState)> {
    let (n, d) = expect_2d("layer_norm", a)?;
    if d < 2 {
        return Err(Error::dim(
            "layer_norm",
            format!("normalized width must be >= 2, got {d}"),
        ));
    }
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::dim(
            "layer_norm",
            format!(
                "gamma {:?} / beta {:?} do not match width {d}",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    let mut out = vec![0.0; n * d];
    let mut xhat = vec![0.0; n * d];
    let mut inv_std = vec![0.0; n];
    let (gd, bd) = (gamma.data(), beta.data());
    for i in 0..n {
        let row = &a.data()[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
        let denom = var + eps;
        if denom <= 0.0 {
            return Err(Error::numeric(
                "layer_norm",
                format!("zero variance row {i} with eps={eps}"),
            ));
        }
        let istd = 1.0 / denom.sqrt();
        inv_std[i] = istd;
        for j in 0..d {
            let xh = (row[j] - mean) * istd;
            xhat[i * d + j] = xh;
            out[i * d + j] = gd[j] * xh + bd[j];
        }
    }
    Ok((Tensor::from_op(vec![n, d], out), NormState { xhat, inv_std }))
}

/// Per-row layer normalization with affine parameters.
pub fn layer_norm(a: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_with_state(a, gamma, beta, eps).map(|(t, _)| t)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// GeLU, tanh form.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn gelu(a: &Tensor) -> Tensor {
    let data = a.data().iter().map(|&x| gelu_scalar(x)).collect();
    Tensor::from_op(a.shape().to_vec(), data)
}

// ---------------------------------------------------------------------------
// convolution and pooling (CHW layout)
// ---------------------------------------------------------------------------

fn chw_dims(op: &'static str, t: &Tensor) -> Result<[usize; 3]> {
    match t.shape() {
        [c, h, w] => Ok([*c, *h, *w]),
        s => Err(Error::dim(op, format!("expected 3-d C×H×W tensor, got {s:?}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn unit() -> Self {
        ConvSpec {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

pub fn conv2d_out_dim(in_dim: usize, kernel: usize, spec: &ConvSpec) -> Result<usize> {
    let eff = spec.dilation * (kernel - 1) + 1;
    let padded = in_dim + 2 * spec.padding;
    if padded < eff {
        return Err(Error::dim(
            "conv2d",
            format!("kernel (effective {eff}) exceeds padded input {padded}"),
        ));
    }
    Ok((padded - eff) / spec.stride + 1)
}

/// Direct 2-D convolution over `input[Cin×H×W]` with
/// `weight[Cout×(Cin/groups)×kh×kw]`.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
) -> Result<Tensor> {
    let [cin, h, w] = chw_dims("conv2d", input)?;
    let (cout, cin_g, kh, kw) = match weight.shape() {
        [a, b, c, d] => (*a, *b, *c, *d),
        s => {
            return Err(Error::dim(
                "conv2d",
                format!("expected 4-d weight, got {s:?}"),
            ))
        }
    };
    if spec.groups == 0 || cin % spec.groups != 0 || cout % spec.groups != 0 {
        return Err(Error::config(format!(
            "conv2d groups {} must divide Cin {cin} and Cout {cout}",
            spec.groups
        )));
    }
    if cin_g != cin / spec.groups {
        return Err(Error::dim(
            "conv2d",
            format!(
                "weight {:?} expects {} input channels per group, input has {}",
                weight.shape(),
                cin_g,
                cin / spec.groups
            ),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::dim(
                "conv2d",
                format!("bias {:?} does not match Cout {cout}", b.shape()),
            ));
        }
    }
    let oh = conv2d_out_dim(h, kh, spec)?;
    let ow = conv2d_out_dim(w, kw, spec)?;
    let cout_g = cout / spec.groups;
    let xd = input.data();
    let wd = weight.data();
    let mut out = vec![0.0; cout * oh * ow];
    for g in 0..spec.groups {
        for oc_l in 0..cout_g {
            let oc = g * cout_g + oc_l;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
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
                                let xv = xd[(ic * h + iy as usize) * w + ix as usize];
                                let wv = wd[((oc * cin_g + ic_l) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    if let Some(b) = bias {
                        acc += b.data()[oc];
                    }
                    out[(oc * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Ok(Tensor::from_op(vec![cout, oh, ow], out))
}

/// Bin `(i, j)` of the output averages input rows
/// `[floor(i·H/out_h), ceil((i+1)·H/out_h))` and the analogous columns.
pub fn pool_bin(i: usize, in_dim: usize, out_dim: usize) -> (usize, usize) {
    let start = i * in_dim / out_dim;
    let end = ((i + 1) * in_dim).div_ceil(out_dim);
    (start, end)
}

pub fn adaptive_avg_pool2d(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [c, h, w] = chw_dims("adaptive_avg_pool2d", input)?;
    if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
        return Err(Error::config(format!(
            "pool output {out_h}×{out_w} invalid for input {h}×{w}"
        )));
    }
    let xd = input.data();
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        for i in 0..out_h {
            let (y0, y1) = pool_bin(i, h, out_h);
            for j in 0..out_w {
                let (x0, x1) = pool_bin(j, w, out_w);
                let mut acc = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += xd[(ch * h + y) * w + x];
                    }
                }
                out[(ch * out_h + i) * out_w + j] = acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    Ok(Tensor::from_op(vec![c, out_h, out_w], out))
}

// ---------------------------------------------------------------------------
// pixel shuffle (token grids, HWC layout)
// ---------------------------------------------------------------------------

fn hwc_dims(op: &'static str, t: &Tensor) -> Result<[usize; 3]> {
    match t.shape() {
        [h, w, d] => Ok([*h, *w, *d]),
        s => Err(Error::dim(op, format!("expected 3-d h×w×d grid, got {s:?}"))),
    }
}

/// Space-to-depth: each r×r spatial block is concatenated into channels in
/// row-major block order, shrinking the grid to `(h/r)×(w/r)×(d·r²)`.
pub fn pixel_shuffle_s2d(grid: &Tensor, r: usize) -> Result<Tensor> {
    let [h, w, d] = hwc_dims("pixel_shuffle_s2d", grid)?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::dim(
            "pixel_shuffle_s2d",
            format!("grid {h}×{w} not divisible by rate {r}"),
        ));
    }
    let (oh, ow, od) = (h / r, w / r, d * r * r);
    let xd = grid.data();
    let mut out = vec![0.0; oh * ow * od];
    for i in 0..oh {
        for j in 0..ow {
            for dy in 0..r {
                for dx in 0..r {
                    let cell = dy * r + dx;
                    let src = ((i * r + dy) * w + (j * r + dx)) * d;
                    let dst = (i * ow + j) * od + cell * d;
                    out[dst..dst + d].copy_from_slice(&xd[src..src + d]);
                }
            }
        }
    }
    Ok(Tensor::from_op(vec![oh, ow, od], out))
}

/// Exact inverse of [`pixel_shuffle_s2d`].
pub fn pixel_unshuffle_d2s(grid: &Tensor, r: usize) -> Result<Tensor> {
    let [h, w, dd] = hwc_dims("pixel_unshuffle_d2s", grid)?;
    if r == 0 || dd % (r * r) != 0 {
        return Err(Error::dim(
            "pixel_unshuffle_d2s",
            format!("channel dim {dd} not divisible by r²={}", r * r),
        ));
    }
    let d = dd / (r * r);
    let (oh, ow) = (h * r, w * r);
    let xd = grid.data();
    let mut out = vec![0.0; oh * ow * d];
    for i in 0..h {
        for j in 0..w {
            for dy in 0..r {
                for dx in 0..r {
                    let cell = dy * r + dx;
                    let src = (i * w + j) * dd + cell * d;
                    let dst = ((i * r + dy) * ow + (j * r + dx)) * d;
                    out[dst..dst + d].copy_from_slice(&xd[src..src + d]);
                }
            }
        }
    }
    Ok(Tensor::from_op(vec![oh, ow, d], out))
}

pub fn hwc_to_chw(t: &Tensor) -> Result<Tensor> {
    let [h, w, c] = hwc_dims("hwc_to_chw", t)?;
    let xd = t.data();
    let mut out = vec![0.0; c * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[(ch * h + y) * w + x] = xd[(y * w + x) * c + ch];
            }
        }
    }
    Ok(Tensor::from_op(vec![c, h, w], out))
}

pub fn chw_to_hwc(t: &Tensor) -> Result<Tensor> {
    let [c, h, w] = chw_dims("chw_to_hwc", t)?;
    let xd = t.data();
    let mut out = vec![0.0; h * w * c];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(y * w + x) * c + ch] = xd[(ch * h + y) * w + x];
            }
        }
    }
    Ok(Tensor::from_op(vec![h, w, c], out))
}

// ---------------------------------------------------------------------------
// slicing / concatenation
// ---------------------------------------------------------------------------

pub fn slice_cols(a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (n, d) = expect_2d("slice_cols", a)?;
    if start + len > d || len == 0 {
        return Err(Error::dim(
            "slice_cols",
            format!("cols [{start}, {}) out of range for width {d}", start + len),
        ));
    }
    let mut out = vec![0.0; n * len];
    for i in 0..n {
        out[i * len..(i + 1) * len]
            .copy_from_slice(&a.data()[i * d + start..i * d + start + len]);
    }
    Ok(Tensor::from_op(vec![n, len], out))
}

pub fn slice_rows(a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (n, d) = expect_2d("slice_rows", a)?;
    if start + len > n || len == 0 {
        return Err(Error::dim(
            "slice_rows",
            format!("rows [{start}, {}) out of range for height {n}", start + len),
        ));
    }
    let out = a.data()[start * d..(start + len) * d].to_vec();
    Ok(Tensor::from_op(vec![len, d], out))
}

pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::dim("concat_rows", "no tensors to concatenate"));
    }
    let (_, d) = expect_2d("concat_rows", parts[0])?;
    let mut total = 0;
    for p in parts {
        let (r, pd) = expect_2d("concat_rows", p)?;
        if pd != d {
            return Err(Error::dim(
                "concat_rows",
                format!("width mismatch: {pd} vs {d}"),
            ));
        }
        total += r;
    }
    let mut out = Vec::with_capacity(total * d);
    for p in parts {
        out.extend_from_slice(p.data());
    }
    Ok(Tensor::from_op(vec![total, d], out))
}

pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::dim("concat_cols", "no tensors to concatenate"));
    }
    let (n, _) = expect_2d("concat_cols", parts[0])?;
    let mut total = 0;
    for p in parts {
        let (pn, c) = expect_2d("concat_cols", p)?;
        if pn != n {
            return Err(Error::dim(
                "concat_cols",
                format!("height mismatch: {pn} vs {n}"),
            ));
        }
        total += c;
    }
    let mut out = vec![0.0; n * total];
    for i in 0..n {
        let mut off = 0;
        for p in parts {
            let c = p.shape()[1];
            out[i * total + off..i * total + off + c]
                .copy_from_slice(&p.data()[i * c..(i + 1) * c]);
            off += c;
        }
    }
    Ok(Tensor::from_op(vec![n, total], out))
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

pub fn sum_all(a: &Tensor) -> f64 {
    a.data().iter().sum()
}

pub fn mean_all(a: &Tensor) -> f64 {
    sum_all(a) / a.numel() as f64
}

// ---------------------------------------------------------------------------
// batch normalization (CHW, statistics over H×W)
// ---------------------------------------------------------------------------

pub(crate) struct BnState {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// Per-channel batch mean and biased variance, for running-stat updates.
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub(crate) fn batchnorm2d_train_with_state(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, BnState)> {
    let [c, h, w] = chw_dims("batchnorm2d", x)?;
    check_chan_params("batchnorm2d", c, gamma, beta)?;
    let m = h * w;
    let xd = x.data();
    let mut out = vec![0.0; c * m];
    let mut xhat = vec![0.0; c * m];
    let mut inv_std = vec![0.0; c];
    let mut means = vec![0.0; c];
    let mut vars = vec![0.0; c];
    for ch in 0..c {
        let sl = &xd[ch * m..(ch + 1) * m];
        let mean = sl.iter().sum::<f64>() / m as f64;
        let var = sl.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        let istd = 1.0 / (var + eps).sqrt();
        means[ch] = mean;
        vars[ch] = var;
        inv_std[ch] = istd;
        for (k, &v) in sl.iter().enumerate() {
            let xh = (v - mean) * istd;
            xhat[ch * m + k] = xh;
            out[ch * m + k] = gamma.data()[ch] * xh + beta.data()[ch];
        }
    }
    Ok((
        Tensor::from_op(vec![c, h, w], out),
        BnState {
            xhat,
            inv_std,
            mean: means,
            var: vars,
        },
    ))
}

pub fn batchnorm2d_infer(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let [c, h, w] = chw_dims("batchnorm2d", x)?;
    check_chan_params("batchnorm2d", c, gamma, beta)?;
    check_chan_params("batchnorm2d", c, running_mean, running_var)?;
    let m = h * w;
    let xd = x.data();
    let mut out = vec![0.0; c * m];
    for ch in 0..c {
        let istd = 1.0 / (running_var.data()[ch] + eps).sqrt();
        let (g, b, mu) = (gamma.data()[ch], beta.data()[ch], running_mean.data()[ch]);
        for k in 0..m {
            out[ch * m + k] = g * (xd[ch * m + k] - mu) * istd + b;
        }
    }
    Ok(Tensor::from_op(vec![c, h, w], out))
}

fn check_chan_params(op: &'static str, c: usize, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != [c] || b.shape() != [c] {
        return Err(Error::dim(
            op,
            format!(
                "per-channel params {:?}/{:?} do not match {c} channels",
                a.shape(),
                b.shape()
            ),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// embedding and cross entropy
// ---------------------------------------------------------------------------

pub fn embedding_gather(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (v, d) = expect_2d("embedding_gather", table)?;
    if ids.is_empty() {
        return Err(Error::dim("embedding_gather", "empty id list"));
    }
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= v {
            return Err(Error::Index {
                detail: format!("embedding id {id} out of range for vocab {v}"),
            });
        }
        out.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
    }
    Ok(Tensor::from_op(vec![ids.len(), d], out))
}

/// Mean negative log-likelihood of the targets under row-wise softmax:
/// `-(1/T)·Σ_t log softmax(logits_t)[target_t]`.
///
/// Also returns the row-softmax probabilities (the adjoint needs them).
pub(crate) fn cross_entropy_rows_with_probs(
    logits: &Tensor,
    targets: &[usize],
) -> Result<(f64, Tensor)> {
    let (t, v) = expect_2d("cross_entropy_rows", logits)?;
    if targets.len() != t {
        return Err(Error::dim(
            "cross_entropy_rows",
            format!("{} targets for {t} rows", targets.len()),
        ));
    }
    if let Some(bad) = targets.iter().find(|&&id| id >= v) {
        return Err(Error::Index {
            detail: format!("target {bad} out of range for vocab {v}"),
        });
    }
    let probs = softmax_rows(logits)?;
    let mut nll = 0.0;
    for (i, &target) in targets.iter().enumerate() {
        let row = &logits.data()[i * v..(i + 1) * v];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let logsum = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
        nll -= row[target] - logsum;
    }
    Ok((nll / t as f64, probs))
}

pub fn cross_entropy_rows(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    cross_entropy_rows_with_probs(logits, targets).map(|(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let eye = t2(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(matmul(&a, &eye).unwrap().data(), a.data());
    }

    #[test]
    fn matmul_row_times_col() {
        let a = t2(1, 2, &[1.0, 2.0]);
        let b = t2(2, 1, &[3.0, 4.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "got: {msg}");
    }

    #[test]
    fn softmax_symmetry_and_forced_values() {
        let a = t2(1, 2, &[0.0, 0.0]);
        assert_eq!(softmax_rows(&a).unwrap().data(), &[0.5, 0.5]);

        let a = t2(1, 2, &[1.0_f64.ln(), 3.0_f64.ln()]);
        let y = softmax_rows(&a).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15);
        assert!((y.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_large_inputs_do_not_overflow() {
        let a = t2(1, 2, &[1000.0, 1000.0]);
        let y = softmax_rows(&a).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let a = t2(3, 4, &[0.3, -2.0, 5.0, 1.1, 0.0, 0.0, 0.0, 0.0, -9.0, 3.0, 2.5, 0.7]);
        let y = softmax_rows(&a).unwrap();
        for i in 0..3 {
            let s: f64 = y.data()[i * 4..(i + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
            assert!(y.data()[i * 4..(i + 1) * 4].iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn layer_norm_cases() {
        // Zero-variance row maps to zeros (eps absorbs the zero variance).
        let a = t2(1, 4, &[1.0, 1.0, 1.0, 1.0]);
        let g = Tensor::ones(vec![4]);
        let b = Tensor::zeros(vec![4]);
        let y = layer_norm(&a, &g, &b, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        // Already-normalized row is a fixed point at eps = 0.
        let a = t2(1, 2, &[1.0, -1.0]);
        let g = Tensor::ones(vec![2]);
        let b = Tensor::zeros(vec![2]);
        let y = layer_norm(&a, &g, &b, 0.0).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-15);
        assert!((y.data()[1] + 1.0).abs() < 1e-15);

        // Affine follows normalization.
        let g = Tensor::full(vec![2], 2.0);
        let b = Tensor::ones(vec![2]);
        let y = layer_norm(&a, &g, &b, 0.0).unwrap();
        assert!((y.data()[0] - 3.0).abs() < 1e-15);
        assert!((y.data()[1] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_rejects_narrow_rows_and_zero_denominator() {
        let a = t2(1, 1, &[3.0]);
        let g = Tensor::ones(vec![1]);
        let b = Tensor::zeros(vec![1]);
        assert!(matches!(layer_norm(&a, &g, &b, 1e-5), Err(Error::Dim { .. })));

        let a = t2(1, 2, &[5.0, 5.0]);
        let g = Tensor::ones(vec![2]);
        let b = Tensor::zeros(vec![2]);
        assert!(matches!(layer_norm(&a, &g, &b, 0.0), Err(Error::Numeric { .. })));
    }

    #[test]
    fn layer_norm_statistics() {
        let a = t2(2, 8, &[0.3, -1.2, 4.0, 0.9, -2.2, 0.1, 1.7, 3.3,
                           9.0, -3.0, 0.5, 2.0, 1.0, -1.0, 0.0, 4.0]);
        let g = Tensor::ones(vec![8]);
        let b = Tensor::zeros(vec![8]);
        let y = layer_norm(&a, &g, &b, 1e-14).unwrap();
        for i in 0..2 {
            let row = &y.data()[i * 8..(i + 1) * 8];
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() <= 1e-10);
            assert!((var - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn conv2d_identity_kernel_depthwise() {
        // Depthwise 1×1 unit kernels reproduce the input per channel.
        let x = Tensor::new(vec![2, 3, 3], (0..18).map(|v| v as f64).collect()).unwrap();
        let w = Tensor::ones(vec![2, 1, 1, 1]);
        let spec = ConvSpec { groups: 2, ..ConvSpec::unit() };
        let y = conv2d(&x, &w, None, &spec).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_dilated_delta_taps() {
        // Delta at the center of a 5×5 image, 3×3 ones kernel with dilation 2
        // and padding 2: taps land on rows/cols {0, 2, 4}.
        let mut img = vec![0.0; 25];
        img[2 * 5 + 2] = 1.0;
        let x = Tensor::new(vec![1, 5, 5], img).unwrap();
        let w = Tensor::ones(vec![1, 1, 3, 3]);
        let spec = ConvSpec { padding: 2, dilation: 2, ..ConvSpec::unit() };
        let y = conv2d(&x, &w, None, &spec).unwrap();
        assert_eq!(y.shape(), &[1, 5, 5]);
        for yy in 0..5 {
            for xx in 0..5 {
                let expect = if yy % 2 == 0 && xx % 2 == 0 { 1.0 } else { 0.0 };
                assert_eq!(y.data()[yy * 5 + xx], expect, "at ({yy},{xx})");
            }
        }
    }

    #[test]
    fn conv2d_groups_do_not_mix_channels() {
        let mut data = vec![0.0; 2 * 3 * 3];
        data[..9].copy_from_slice(&[1.0; 9]);
        let x = Tensor::new(vec![2, 3, 3], data).unwrap();
        let w = Tensor::ones(vec![2, 1, 3, 3]);
        let bias = Tensor::new(vec![2], vec![0.0, 7.0]).unwrap();
        let spec = ConvSpec { padding: 1, groups: 2, ..ConvSpec::unit() };
        let y = conv2d(&x, &w, Some(&bias), &spec).unwrap();
        // Channel 1 saw only zeros: output is bias alone.
        assert!(y.data()[9..].iter().all(|&v| v == 7.0));
    }

    #[test]
    fn conv2d_divisibility_violation() {
        let x = Tensor::zeros(vec![3, 4, 4]);
        let w = Tensor::zeros(vec![2, 1, 1, 1]);
        let spec = ConvSpec { groups: 2, ..ConvSpec::unit() };
        assert!(matches!(conv2d(&x, &w, None, &spec), Err(Error::Config { .. })));
    }

    #[test]
    fn adaptive_pool_forced_values() {
        let x = Tensor::new(vec![1, 4, 4], (1..=16).map(|v| v as f64).collect()).unwrap();
        let y = adaptive_avg_pool2d(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[3.5, 5.5, 11.5, 13.5]);

        let ones = Tensor::ones(vec![1, 4, 4]);
        let y = adaptive_avg_pool2d(&ones, 2, 2).unwrap();
        assert_eq!(y.data(), &[1.0; 4]);

        // Identity when output dims equal input dims.
        let y = adaptive_avg_pool2d(&x, 4, 4).unwrap();
        assert_eq!(y.data(), x.data());

        assert!(adaptive_avg_pool2d(&x, 5, 2).is_err());
    }

    #[test]
    fn pixel_shuffle_basic_block() {
        let x = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle_s2d(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);

        // r = 1 is the identity.
        let y = pixel_shuffle_s2d(&x, 1).unwrap();
        assert_eq!(y.data(), x.data());

        assert!(pixel_shuffle_s2d(&Tensor::zeros(vec![3, 2, 1]), 2).is_err());
    }

    #[test]
    fn conv_output_dim_formula() {
        // H' = floor((H + 2p − dil·(k−1) − 1)/s) + 1
        let spec = ConvSpec { stride: 2, padding: 0, dilation: 1, groups: 1 };
        assert_eq!(conv2d_out_dim(14, 2, &spec).unwrap(), 7);
        let spec = ConvSpec { stride: 1, padding: 2, dilation: 2, groups: 1 };
        assert_eq!(conv2d_out_dim(5, 3, &spec).unwrap(), 5);
    }

    #[test]
    fn cross_entropy_uniform_rows() {
        let logits = Tensor::zeros(vec![3, 8]);
        let loss = cross_entropy_rows(&logits, &[0, 5, 7]).unwrap();
        assert!((loss - 8.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn permutes_round_trip() {
        let x = Tensor::new(vec![2, 3, 4], (0..24).map(|v| v as f64).collect()).unwrap();
        let y = chw_to_hwc(&hwc_to_chw(&x).unwrap()).unwrap();
        assert_eq!(y.data(), x.data());
    }
}
