//! Pooled-query attention adaptor.
//!
//! Maps an `h×w×d` visual token grid into the language embedding space in
//! four stages: layer norm, a joint QKV projection (channel expansion 3×),
//! multi-head pooled-query attention with a grouped dilated convolution
//! residual on V, and a downsampling projection head that quarters the token
//! count. The attention pools queries to `n = pooled_h·pooled_w` tokens, so
//! its cost is linear in the token count N instead of quadratic.
//!
//! Two baselines live here as well: a two-layer MLP adaptor and a vanilla
//! softmax cross-attention adaptor, used for cost and behavior comparisons.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::PatchTokens;
use crate::ops::ConvSpec;
use crate::rng::SplitMix64;
use crate::tape::{BnBatchStats, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NtaConfig {
    pub dim_d: usize,
    pub pooled_h: usize,
    pub pooled_w: usize,
    pub heads: usize,
    pub gdc_kernel: usize,
    pub gdc_dilation: usize,
    pub dim_lang: usize,
    pub eps: f64,
    /// Apply softmax in the first attention stage as well as the second.
    pub softmax_stage1: bool,
}

impl Default for NtaConfig {
    fn default() -> Self {
        NtaConfig {
            dim_d: 64,
            pooled_h: 12,
            pooled_w: 12,
            heads: 4,
            gdc_kernel: 3,
            gdc_dilation: 2,
            dim_lang: 96,
            eps: 1e-5,
            softmax_stage1: true,
        }
    }
}

impl NtaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim_d == 0 || self.dim_lang == 0 {
            return Err(Error::config("dims must be positive"));
        }
        if self.heads == 0 || self.dim_d % self.heads != 0 {
            return Err(Error::config(format!(
                "dim_d {} not divisible by heads {}",
                self.dim_d, self.heads
            )));
        }
        if self.pooled_h == 0 || self.pooled_w == 0 {
            return Err(Error::config("pooled query dims must be positive"));
        }
        if self.gdc_kernel == 0 || self.gdc_dilation * (self.gdc_kernel - 1) % 2 != 0 {
            return Err(Error::config(format!(
                "gdc kernel {} with dilation {} cannot preserve spatial dims",
                self.gdc_kernel, self.gdc_dilation
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim_d / self.heads
    }

    pub fn pooled_count(&self) -> usize {
        self.pooled_h * self.pooled_w
    }

    /// Padding that keeps the GDC spatially size-preserving.
    pub fn gdc_padding(&self) -> usize {
        self.gdc_dilation * (self.gdc_kernel - 1) / 2
    }
}

fn fan_in_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut SplitMix64) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

/// All learnable weights of the adaptor plus the batchnorm running
/// statistics (which are state, not parameters).
#[derive(Debug, Clone, PartialEq)]
pub struct NtaParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub qkv_weight: Tensor,
    pub qkv_bias: Tensor,
    pub gdc_weight: Tensor,
    pub gdc_bias: Tensor,
    pub gdc_bn_gamma: Tensor,
    pub gdc_bn_beta: Tensor,
    pub gdc_bn_mean: Tensor,
    pub gdc_bn_var: Tensor,
    pub convd_weight: Tensor,
    pub convd_bias: Tensor,
    pub convr_weight: Tensor,
    pub convr_bias: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

impl NtaParams {
    pub fn seeded(cfg: &NtaConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim_d;
        let dl = cfg.dim_lang;
        let k = cfg.gdc_kernel;
        let mut rng = SplitMix64::new(seed ^ 0x6e74_6170_6172_616d);
        Ok(NtaParams {
            ln1_gamma: Tensor::ones(vec![d]),
            ln1_beta: Tensor::zeros(vec![d]),
            qkv_weight: fan_in_uniform(vec![d, 3 * d], d, &mut rng),
            qkv_bias: Tensor::zeros(vec![3 * d]),
            gdc_weight: fan_in_uniform(vec![d, 1, k, k], k * k, &mut rng),
            gdc_bias: Tensor::zeros(vec![d]),
            gdc_bn_gamma: Tensor::ones(vec![d]),
            gdc_bn_beta: Tensor::zeros(vec![d]),
            gdc_bn_mean: Tensor::zeros(vec![d]),
            gdc_bn_var: Tensor::ones(vec![d]),
            convd_weight: fan_in_uniform(vec![dl, d, 2, 2], 4 * d, &mut rng),
            convd_bias: Tensor::zeros(vec![dl]),
            convr_weight: fan_in_uniform(vec![dl, d, 1, 1], d, &mut rng),
            convr_bias: Tensor::zeros(vec![dl]),
            ln2_gamma: Tensor::ones(vec![dl]),
            ln2_beta: Tensor::zeros(vec![dl]),
        })
    }

    /// Zeroes the attention and GDC branches so the pooled-attention block
    /// reduces to the identity on the normalized input.
    pub fn zero_attention_branch(&mut self) {
        for t in [
            &mut self.qkv_weight,
            &mut self.qkv_bias,
            &mut self.gdc_weight,
            &mut self.gdc_bias,
            &mut self.gdc_bn_gamma,
            &mut self.gdc_bn_beta,
        ] {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("ln1_gamma", &self.ln1_gamma),
            ("ln1_beta", &self.ln1_beta),
            ("qkv_weight", &self.qkv_weight),
            ("qkv_bias", &self.qkv_bias),
            ("gdc_weight", &self.gdc_weight),
            ("gdc_bias", &self.gdc_bias),
            ("gdc_bn_gamma", &self.gdc_bn_gamma),
            ("gdc_bn_beta", &self.gdc_bn_beta),
            ("gdc_bn_mean", &self.gdc_bn_mean),
            ("gdc_bn_var", &self.gdc_bn_var),
            ("convd_weight", &self.convd_weight),
            ("convd_bias", &self.convd_bias),
            ("convr_weight", &self.convr_weight),
            ("convr_bias", &self.convr_bias),
            ("ln2_gamma", &self.ln2_gamma),
            ("ln2_beta", &self.ln2_beta),
        ]
    }

    /// Parameter tensors, excluding running statistics.
    pub fn learnable(&self) -> Vec<(&'static str, &Tensor)> {
        self.named()
            .into_iter()
            .filter(|(name, _)| !Self::is_running_stat(name))
            .collect()
    }

    pub fn is_running_stat(name: &str) -> bool {
        name == "gdc_bn_mean" || name == "gdc_bn_var"
    }

    pub fn to_bundle(&self) -> Vec<(String, Tensor)> {
        self.named()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    pub fn from_bundle(entries: &[(String, Tensor)], cfg: &NtaConfig) -> Result<Self> {
        let mut params = NtaParams::seeded(cfg, 0)?;
        let mut remaining: Vec<&str> = params.named().iter().map(|(n, _)| *n).collect();
        for (name, tensor) in entries {
            let slot = params.slot_mut(name).ok_or_else(|| Error::Parse {
                detail: format!("unknown tensor {name:?} in params bundle"),
            })?;
            if slot.shape() != tensor.shape() {
                return Err(Error::dim(
                    "params_bundle",
                    format!(
                        "{name}: expected {:?}, file has {:?}",
                        slot.shape(),
                        tensor.shape()
                    ),
                ));
            }
            *slot = tensor.clone();
            remaining.retain(|n| n != name);
        }
        if !remaining.is_empty() {
            return Err(Error::Parse {
                detail: format!("params bundle is missing tensors: {remaining:?}"),
            });
        }
        Ok(params)
    }

    pub(crate) fn slot_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        Some(match name {
            "ln1_gamma" => &mut self.ln1_gamma,
            "ln1_beta" => &mut self.ln1_beta,
            "qkv_weight" => &mut self.qkv_weight,
            "qkv_bias" => &mut self.qkv_bias,
            "gdc_weight" => &mut self.gdc_weight,
            "gdc_bias" => &mut self.gdc_bias,
            "gdc_bn_gamma" => &mut self.gdc_bn_gamma,
            "gdc_bn_beta" => &mut self.gdc_bn_beta,
            "gdc_bn_mean" => &mut self.gdc_bn_mean,
            "gdc_bn_var" => &mut self.gdc_bn_var,
            "convd_weight" => &mut self.convd_weight,
            "convd_bias" => &mut self.convd_bias,
            "convr_weight" => &mut self.convr_weight,
            "convr_bias" => &mut self.convr_bias,
            "ln2_gamma" => &mut self.ln2_gamma,
            "ln2_beta" => &mut self.ln2_beta,
            _ => return None,
        })
    }
}

/// Batchnorm statistics source for the GDC branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics, differentiated through (training).
    Train,
    /// Fixed running statistics (deterministic inference).
    Infer,
}

/// Tape handles for every learnable tensor, plus the frozen running stats.
pub struct NtaVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub qkv_weight: Var,
    pub qkv_bias: Var,
    pub gdc_weight: Var,
    pub gdc_bias: Var,
    pub gdc_bn_gamma: Var,
    pub gdc_bn_beta: Var,
    pub gdc_bn_mean: Tensor,
    pub gdc_bn_var: Tensor,
    pub convd_weight: Var,
    pub convd_bias: Var,
    pub convr_weight: Var,
    pub convr_bias: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
}

impl NtaParams {
    pub fn leaves(&self, tape: &mut Tape, trainable: bool) -> NtaVars {
        let mut leaf = |t: &Tensor| tape.leaf(t.clone(), trainable);
        NtaVars {
            ln1_gamma: leaf(&self.ln1_gamma),
            ln1_beta: leaf(&self.ln1_beta),
            qkv_weight: leaf(&self.qkv_weight),
            qkv_bias: leaf(&self.qkv_bias),
            gdc_weight: leaf(&self.gdc_weight),
            gdc_bias: leaf(&self.gdc_bias),
            gdc_bn_gamma: leaf(&self.gdc_bn_gamma),
            gdc_bn_beta: leaf(&self.gdc_bn_beta),
            gdc_bn_mean: self.gdc_bn_mean.clone(),
            gdc_bn_var: self.gdc_bn_var.clone(),
            convd_weight: leaf(&self.convd_weight),
            convd_bias: leaf(&self.convd_bias),
            convr_weight: leaf(&self.convr_weight),
            convr_bias: leaf(&self.convr_bias),
            ln2_gamma: leaf(&self.ln2_gamma),
            ln2_beta: leaf(&self.ln2_beta),
        }
    }
}

/// Layer norm followed by the joint QKV projection. Returns `(Q, K, V, f_v)`
/// where `f_v` is the normalized input carried to the residual add.
pub fn nta_norm_project(
    tape: &mut Tape,
    tokens: Var,
    vars: &NtaVars,
    cfg: &NtaConfig,
) -> Result<(Var, Var, Var, Var)> {
    let d = cfg.dim_d;
    let shape = tape.value(tokens).shape().to_vec();
    let flat = match shape.as_slice() {
        [_, w] if *w == d => tokens,
        [h, w, dd] if *dd == d => tape.reshape(tokens, vec![h * w, d])?,
        s => {
            return Err(Error::dim(
                "nta_norm_project",
                format!("expected tokens of width {d}, got {s:?}"),
            ))
        }
    };
    let f_v = tape.layer_norm(flat, vars.ln1_gamma, vars.ln1_beta, cfg.eps)?;
    let qkv = tape.matmul(f_v, vars.qkv_weight)?;
    let qkv = tape.add_row_bias(qkv, vars.qkv_bias)?;
    let q = tape.slice_cols(qkv, 0, d)?;
    let k = tape.slice_cols(qkv, d, d)?;
    let v = tape.slice_cols(qkv, 2 * d, d)?;
    Ok((q, k, v, f_v))
}

/// Multi-head pooled-query attention with the GDC residual on V.
///
/// Per head (width `d_h = d/heads`): the query grid is adaptively pooled to
/// `n = pooled_h·pooled_w` rows, `S = q·Kᵀ` aggregates context into
/// `A = softmax(S/√d_h)·V`, and `softmax(Q·qᵀ/√d_h)·A` broadcasts it back to
/// all N tokens. Heads are concatenated and `GDC(V)` (depthwise dilated conv,
/// batchnorm, GeLU) is added.
///
/// Accepts `n ≤ N`; with pooled dims equal to the grid dims the pooling is
/// the identity and the result is the plain two-stage dense composition.
pub fn pooled_query_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    grid_h: usize,
    grid_w: usize,
    cfg: &NtaConfig,
    vars: &NtaVars,
    mode: BnMode,
) -> Result<(Var, Option<BnBatchStats>)> {
    let d = cfg.dim_d;
    let n_tokens = grid_h * grid_w;
    let n_pooled = cfg.pooled_count();
    if tape.value(q).shape() != [n_tokens, d] {
        return Err(Error::dim(
            "pooled_query_attention",
            format!(
                "Q {:?} does not match grid {grid_h}×{grid_w}×{d}",
                tape.value(q).shape()
            ),
        ));
    }
    if n_pooled > n_tokens {
        return Err(Error::config(format!(
            "pooled query count {n_pooled} exceeds token count {n_tokens}"
        )));
    }
    if cfg.pooled_h > grid_h || cfg.pooled_w > grid_w {
        return Err(Error::config(format!(
            "pooled dims {}×{} exceed grid {grid_h}×{grid_w}",
            cfg.pooled_h, cfg.pooled_w
        )));
    }

    // Pool the query grid spatially once; per-head slices of the pooled
    // tensor equal pooling the per-head slices.
    let q_grid = tape.reshape(q, vec![grid_h, grid_w, d])?;
    let q_chw = tape.hwc_to_chw(q_grid)?;
    let pooled = tape.adaptive_avg_pool2d(q_chw, cfg.pooled_h, cfg.pooled_w)?;
    let pooled = tape.chw_to_hwc(pooled)?;
    let q_small = tape.reshape(pooled, vec![n_pooled, d])?;

    let dh = cfg.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut head_outputs = Vec::with_capacity(cfg.heads);
    for head in 0..cfg.heads {
        let qh = tape.slice_cols(q, head * dh, dh)?;
        let kh = tape.slice_cols(k, head * dh, dh)?;
        let vh = tape.slice_cols(v, head * dh, dh)?;
        let qsh = tape.slice_cols(q_small, head * dh, dh)?;

        let kt = tape.transpose2(kh)?;
        let scores = tape.matmul(qsh, kt)?;
        let scores = tape.scale(scores, inv_sqrt);
        let weights = if cfg.softmax_stage1 {
            tape.softmax_rows(scores)?
        } else {
            scores
        };
        let aggregated = tape.matmul(weights, vh)?;

        let qst = tape.transpose2(qsh)?;
        let back = tape.matmul(qh, qst)?;
        let back = tape.scale(back, inv_sqrt);
        let back = tape.softmax_rows(back)?;
        head_outputs.push(tape.matmul(back, aggregated)?);
    }
    let attn = tape.concat_cols(&head_outputs)?;

    let (gdc_out, stats) = gdc_branch(tape, v, grid_h, grid_w, cfg, vars, mode)?;
    let out = tape.add(attn, gdc_out)?;
    Ok((out, stats))
}

/// Depthwise dilated conv + batchnorm + GeLU on V, reshaped through the grid.
fn gdc_branch(
    tape: &mut Tape,
    v: Var,
    grid_h: usize,
    grid_w: usize,
    cfg: &NtaConfig,
    vars: &NtaVars,
    mode: BnMode,
) -> Result<(Var, Option<BnBatchStats>)> {
    let d = cfg.dim_d;
    let v_grid = tape.reshape(v, vec![grid_h, grid_w, d])?;
    let v_chw = tape.hwc_to_chw(v_grid)?;
    let spec = ConvSpec {
        stride: 1,
        padding: cfg.gdc_padding(),
        dilation: cfg.gdc_dilation,
        groups: d,
    };
    let conv = tape.conv2d(v_chw, vars.gdc_weight, Some(vars.gdc_bias), spec)?;
    let (normed, stats) = match mode {
        BnMode::Train => {
            let (out, stats) =
                tape.batchnorm2d_train(conv, vars.gdc_bn_gamma, vars.gdc_bn_beta, cfg.eps)?;
            (out, Some(stats))
        }
        BnMode::Infer => (
            tape.batchnorm2d_infer(
                conv,
                vars.gdc_bn_gamma,
                vars.gdc_bn_beta,
                &vars.gdc_bn_mean,
                &vars.gdc_bn_var,
                cfg.eps,
            )?,
            None,
        ),
    };
    let activated = tape.gelu(normed);
    let back = tape.chw_to_hwc(activated)?;
    let flat = tape.reshape(back, vec![grid_h * grid_w, d])?;
    Ok((flat, stats))
}

/// Intermediate handles from a full adaptor forward pass.
pub struct NtaTrace {
    /// Normalized input tokens `f_v`.
    pub normed: Var,
    /// Residual sum `f̃_v` = attention output + `f_v`.
    pub residual: Var,
    /// Final projected tokens, `(N/4) × d_lang`.
    pub output: Var,
    pub bn_stats: Option<BnBatchStats>,
}

/// Full adaptor: norm + QKV, pooled-query attention with GDC, residual add,
/// then the projection head `layer_norm(Conv_d(f̃)) + Conv_r(AvgPool2×2(f̃))`
/// which quarters the token count.
pub fn nta_forward(
    tape: &mut Tape,
    tokens: Var,
    vars: &NtaVars,
    cfg: &NtaConfig,
    mode: BnMode,
) -> Result<NtaTrace> {
    let d = cfg.dim_d;
    let (grid_h, grid_w) = match tape.value(tokens).shape() {
        [h, w, dd] if *dd == d => (*h, *w),
        s => {
            return Err(Error::dim(
                "nta_forward",
                format!("expected h×w×{d} token grid, got {s:?}"),
            ))
        }
    };
    if grid_h % 2 != 0 || grid_w % 2 != 0 {
        return Err(Error::dim(
            "nta_forward",
            format!("grid {grid_h}×{grid_w} must have even dims for the downsampling head"),
        ));
    }
    if cfg.pooled_count() >= grid_h * grid_w {
        return Err(Error::config(format!(
            "pooled query count {} must be below token count {}",
            cfg.pooled_count(),
            grid_h * grid_w
        )));
    }

    let (q, k, v, f_v) = nta_norm_project(tape, tokens, vars, cfg)?;
    let (attn, bn_stats) =
        pooled_query_attention(tape, q, k, v, grid_h, grid_w, cfg, vars, mode)?;
    let residual = tape.add(attn, f_v)?;

    let grid = tape.reshape(residual, vec![grid_h, grid_w, d])?;
    let chw = tape.hwc_to_chw(grid)?;

    let down_spec = ConvSpec { stride: 2, ..ConvSpec::unit() };
    let down = tape.conv2d(chw, vars.convd_weight, Some(vars.convd_bias), down_spec)?;
    let down = tape.chw_to_hwc(down)?;
    let n_out = (grid_h / 2) * (grid_w / 2);
    let down = tape.reshape(down, vec![n_out, cfg.dim_lang])?;
    let down = tape.layer_norm(down, vars.ln2_gamma, vars.ln2_beta, cfg.eps)?;

    let pooled = tape.adaptive_avg_pool2d(chw, grid_h / 2, grid_w / 2)?;
    let res = tape.conv2d(pooled, vars.convr_weight, Some(vars.convr_bias), ConvSpec::unit())?;
    let res = tape.chw_to_hwc(res)?;
    let res = tape.reshape(res, vec![n_out, cfg.dim_lang])?;

    let output = tape.add(down, res)?;
    Ok(NtaTrace {
        normed: f_v,
        residual,
        output,
        bn_stats,
    })
}

/// Inference-mode forward on a private tape, without gradients.
pub fn nta_forward_infer(
    tokens: &PatchTokens,
    params: &NtaParams,
    cfg: &NtaConfig,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let input = tape.constant(tokens.values.clone());
    let vars = params.leaves(&mut tape, false);
    let trace = nta_forward(&mut tape, input, &vars, cfg, BnMode::Infer)?;
    Ok(tape.value(trace.output).clone())
}

// ---------------------------------------------------------------------------
// baseline adaptors
// ---------------------------------------------------------------------------

/// Two-layer MLP adaptor, `d → hidden → d_lang` with GeLU between.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl MlpParams {
    pub fn seeded(dim_d: usize, dim_lang: usize, seed: u64) -> Self {
        let hidden = 4 * dim_d;
        let mut rng = SplitMix64::new(seed ^ 0x6d6c_7061_6461_7074);
        MlpParams {
            w1: fan_in_uniform(vec![dim_d, hidden], dim_d, &mut rng),
            b1: Tensor::zeros(vec![hidden]),
            w2: fan_in_uniform(vec![hidden, dim_lang], hidden, &mut rng),
            b2: Tensor::zeros(vec![dim_lang]),
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)]
    }
}

pub fn baseline_mlp_adaptor(tape: &mut Tape, tokens: Var, params: &MlpParams) -> Result<Var> {
    let w1 = tape.constant(params.w1.clone());
    let b1 = tape.constant(params.b1.clone());
    let w2 = tape.constant(params.w2.clone());
    let b2 = tape.constant(params.b2.clone());
    let hidden = tape.matmul(tokens, w1)?;
    let hidden = tape.add_row_bias(hidden, b1)?;
    let hidden = tape.gelu(hidden);
    let out = tape.matmul(hidden, w2)?;
    tape.add_row_bias(out, b2)
}

/// Vanilla cross-attention adaptor: the same layer norm, QKV projection and
/// projection head as the pooled adaptor, but with dense softmax attention
/// over all N tokens plus the standard output projection, and no GDC.
#[derive(Debug, Clone)]
pub struct VanillaParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub qkv_weight: Tensor,
    pub qkv_bias: Tensor,
    pub wo_weight: Tensor,
    pub wo_bias: Tensor,
    pub convd_weight: Tensor,
    pub convd_bias: Tensor,
    pub convr_weight: Tensor,
    pub convr_bias: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

impl VanillaParams {
    pub fn seeded(cfg: &NtaConfig, seed: u64) -> Self {
        let d = cfg.dim_d;
        let dl = cfg.dim_lang;
        let mut rng = SplitMix64::new(seed ^ 0x7661_6e69_6c6c_6161);
        VanillaParams {
            ln1_gamma: Tensor::ones(vec![d]),
            ln1_beta: Tensor::zeros(vec![d]),
            qkv_weight: fan_in_uniform(vec![d, 3 * d], d, &mut rng),
            qkv_bias: Tensor::zeros(vec![3 * d]),
            wo_weight: fan_in_uniform(vec![d, d], d, &mut rng),
            wo_bias: Tensor::zeros(vec![d]),
            convd_weight: fan_in_uniform(vec![dl, d, 2, 2], 4 * d, &mut rng),
            convd_bias: Tensor::zeros(vec![dl]),
            convr_weight: fan_in_uniform(vec![dl, d, 1, 1], d, &mut rng),
            convr_bias: Tensor::zeros(vec![dl]),
            ln2_gamma: Tensor::ones(vec![dl]),
            ln2_beta: Tensor::zeros(vec![dl]),
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("ln1_gamma", &self.ln1_gamma),
            ("ln1_beta", &self.ln1_beta),
            ("qkv_weight", &self.qkv_weight),
            ("qkv_bias", &self.qkv_bias),
            ("wo_weight", &self.wo_weight),
            ("wo_bias", &self.wo_bias),
            ("convd_weight", &self.convd_weight),
            ("convd_bias", &self.convd_bias),
            ("convr_weight", &self.convr_weight),
            ("convr_bias", &self.convr_bias),
            ("ln2_gamma", &self.ln2_gamma),
            ("ln2_beta", &self.ln2_beta),
        ]
    }
}

/// Dense multi-head attention over all N tokens: `softmax(Q·Kᵀ/√d_h)·V`
/// per head, concatenated, then the output projection.
pub fn baseline_vanilla_xattn(
    tape: &mut Tape,
    tokens: Var,
    params: &VanillaParams,
    cfg: &NtaConfig,
) -> Result<Var> {
    let d = cfg.dim_d;
    let flat = match tape.value(tokens).shape() {
        [_, w] if *w == d => tokens,
        [h, w, dd] if *dd == d => {
            let (h, w) = (*h, *w);
            tape.reshape(tokens, vec![h * w, d])?
        }
        s => {
            return Err(Error::dim(
                "baseline_vanilla_xattn",
                format!("expected tokens of width {d}, got {s:?}"),
            ))
        }
    };
    let ln_g = tape.constant(params.ln1_gamma.clone());
    let ln_b = tape.constant(params.ln1_beta.clone());
    let f_v = tape.layer_norm(flat, ln_g, ln_b, cfg.eps)?;
    let wqkv = tape.constant(params.qkv_weight.clone());
    let bqkv = tape.constant(params.qkv_bias.clone());
    let qkv = tape.matmul(f_v, wqkv)?;
    let qkv = tape.add_row_bias(qkv, bqkv)?;
    let q = tape.slice_cols(qkv, 0, d)?;
    let k = tape.slice_cols(qkv, d, d)?;
    let v = tape.slice_cols(qkv, 2 * d, d)?;

    let dh = cfg.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for head in 0..cfg.heads {
        let qh = tape.slice_cols(q, head * dh, dh)?;
        let kh = tape.slice_cols(k, head * dh, dh)?;
        let vh = tape.slice_cols(v, head * dh, dh)?;
        let kt = tape.transpose2(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, inv_sqrt);
        let weights = tape.softmax_rows(scores)?;
        heads.push(tape.matmul(weights, vh)?);
    }
    let cat = tape.concat_cols(&heads)?;
    let wo = tape.constant(params.wo_weight.clone());
    let bo = tape.constant(params.wo_bias.clone());
    let out = tape.matmul(cat, wo)?;
    tape.add_row_bias(out, bo)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_tokens(h: usize, w: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = SplitMix64::new(seed);
        Tensor::rand_uniform(vec![h, w, d], -1.0, 1.0, &mut rng)
    }

    #[test]
    fn forward_shape_contract() {
        let cfg = NtaConfig::default(); // d = 64, d_lang = 96, pooled 12×12
        let params = NtaParams::seeded(&cfg, 3).unwrap();
        let tokens = PatchTokens::new(grid_tokens(14, 14, 64, 5)).unwrap();
        let out = nta_forward_infer(&tokens, &params, &cfg).unwrap();
        assert_eq!(out.shape(), &[49, 96]);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = NtaConfig { dim_d: 16, pooled_h: 2, pooled_w: 2, heads: 2, dim_lang: 8, ..NtaConfig::default() };
        let params = NtaParams::seeded(&cfg, 11).unwrap();
        let tokens = PatchTokens::new(grid_tokens(4, 4, 16, 9)).unwrap();
        let a = nta_forward_infer(&tokens, &params, &cfg).unwrap();
        let b = nta_forward_infer(&tokens, &params, &cfg).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn zeroed_branches_make_residual_the_identity() {
        let cfg = NtaConfig { dim_d: 8, pooled_h: 2, pooled_w: 2, heads: 2, dim_lang: 4, ..NtaConfig::default() };
        let mut params = NtaParams::seeded(&cfg, 2).unwrap();
        params.zero_attention_branch();
        let mut tape = Tape::new();
        let input = tape.constant(grid_tokens(4, 4, 8, 1));
        let vars = params.leaves(&mut tape, false);
        let trace = nta_forward(&mut tape, input, &vars, &cfg, BnMode::Infer).unwrap();
        let f_v = tape.value(trace.normed).data();
        let f_tilde = tape.value(trace.residual).data();
        assert_eq!(f_v, f_tilde);
    }

    #[test]
    fn odd_grid_is_rejected() {
        let cfg = NtaConfig { dim_d: 8, pooled_h: 2, pooled_w: 2, heads: 2, dim_lang: 4, ..NtaConfig::default() };
        let params = NtaParams::seeded(&cfg, 2).unwrap();
        let tokens = PatchTokens::new(grid_tokens(3, 4, 8, 1)).unwrap();
        let err = nta_forward_infer(&tokens, &params, &cfg).unwrap_err();
        assert!(matches!(err, Error::Dim { .. }));
    }

    #[test]
    fn pooled_count_must_stay_below_tokens_in_full_forward() {
        let cfg = NtaConfig { dim_d: 8, pooled_h: 4, pooled_w: 4, heads: 2, dim_lang: 4, ..NtaConfig::default() };
        let params = NtaParams::seeded(&cfg, 2).unwrap();
        let tokens = PatchTokens::new(grid_tokens(4, 4, 8, 1)).unwrap();
        let err = nta_forward_infer(&tokens, &params, &cfg).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn norm_project_shapes_and_identity_projection() {
        let cfg = NtaConfig { dim_d: 8, pooled_h: 2, pooled_w: 2, heads: 2, dim_lang: 4, ..NtaConfig::default() };
        let mut params = NtaParams::seeded(&cfg, 2).unwrap();
        // qkv weight = [I; I; I] stacked, zero bias: Q = K = V = f_v.
        let d = cfg.dim_d;
        let mut w = vec![0.0; d * 3 * d];
        for i in 0..d {
            for block in 0..3 {
                w[i * 3 * d + block * d + i] = 1.0;
            }
        }
        params.qkv_weight = Tensor::new(vec![d, 3 * d], w).unwrap();
        params.qkv_bias = Tensor::zeros(vec![3 * d]);

        let mut tape = Tape::new();
        let input = tape.constant(grid_tokens(8, 8, d, 4));
        let vars = params.leaves(&mut tape, false);
        let (q, k, v, f_v) = nta_norm_project(&mut tape, input, &vars, &cfg).unwrap();
        assert_eq!(tape.value(q).shape(), &[64, d]);
        assert_eq!(tape.value(q).data(), tape.value(f_v).data());
        assert_eq!(tape.value(k).data(), tape.value(f_v).data());
        assert_eq!(tape.value(v).data(), tape.value(f_v).data());
    }

    #[test]
    fn zero_variance_rows_depend_only_on_beta_and_bias() {
        let cfg = NtaConfig { dim_d: 8, pooled_h: 2, pooled_w: 2, heads: 2, dim_lang: 4, ..NtaConfig::default() };
        let params = NtaParams::seeded(&cfg, 2).unwrap();
        let run = |fill: f64| {
            let mut tape = Tape::new();
            let input = tape.constant(Tensor::full(vec![4, 4, 8], fill));
            let vars = params.leaves(&mut tape, false);
            let (q, k, v, _) = nta_norm_project(&mut tape, input, &vars, &cfg).unwrap();
            (
                tape.value(q).data().to_vec(),
                tape.value(k).data().to_vec(),
                tape.value(v).data().to_vec(),
            )
        };
        // Two different constant inputs normalize to the same β rows.
        assert_eq!(run(5.0), run(-3.0));
    }

    #[test]
    fn identity_pooling_matches_dense_two_stage_oracle() {
        // Pooled dims equal to the grid: the pooling is the identity and the
        // GDC is zeroed, so the output must equal the direct composition
        // softmax(Q·Qᵀ/√d)·softmax(Q·Kᵀ/√d)·V computed with plain loops.
        let cfg = NtaConfig {
            dim_d: 6,
            pooled_h: 3,
            pooled_w: 3,
            heads: 1,
            dim_lang: 4,
            ..NtaConfig::default()
        };
        let mut params = NtaParams::seeded(&cfg, 8).unwrap();
        params.zero_attention_branch();

        let mut rng = SplitMix64::new(21);
        let q_in = Tensor::rand_uniform(vec![9, 6], -1.0, 1.0, &mut rng);
        let k_in = Tensor::rand_uniform(vec![9, 6], -1.0, 1.0, &mut rng);
        let v_in = Tensor::rand_uniform(vec![9, 6], -1.0, 1.0, &mut rng);

        let mut tape = Tape::new();
        let q = tape.constant(q_in.clone());
        let k = tape.constant(k_in.clone());
        let v = tape.constant(v_in.clone());
        let vars = params.leaves(&mut tape, false);
        let (out, _) =
            pooled_query_attention(&mut tape, q, k, v, 3, 3, &cfg, &vars, BnMode::Infer).unwrap();
        let got = tape.value(out).data().to_vec();

        // Independent dense oracle with naive loops.
        let naive_mm = |a: &[f64], b: &[f64], m: usize, kk: usize, p: usize| {
            let mut c = vec![0.0; m * p];
            for i in 0..m {
                for j in 0..p {
                    let mut s = 0.0;
                    for t in 0..kk {
                        s += a[i * kk + t] * b[t * p + j];
                    }
                    c[i * p + j] = s;
                }
            }
            c
        };
        let naive_softmax = |a: &mut [f64], rows: usize, cols: usize| {
            for i in 0..rows {
                let row = &mut a[i * cols..(i + 1) * cols];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
        };
        let scale = 1.0 / 6.0_f64.sqrt();
        let kt: Vec<f64> = {
            let mut t = vec![0.0; 9 * 6];
            for i in 0..9 {
                for j in 0..6 {
                    t[j * 9 + i] = k_in.data()[i * 6 + j];
                }
            }
            t
        };
        let mut s1 = naive_mm(q_in.data(), &kt, 9, 6, 9);
        for v in &mut s1 {
            *v *= scale;
        }
        naive_softmax(&mut s1, 9, 9);
        let a = naive_mm(&s1, v_in.data(), 9, 9, 6);
        let qt: Vec<f64> = {
            let mut t = vec![0.0; 9 * 6];
            for i in 0..9 {
                for j in 0..6 {
                    t[j * 9 + i] = q_in.data()[i * 6 + j];
                }
            }
            t
        };
        let mut s2 = naive_mm(q_in.data(), &qt, 9, 6, 9);
        for v in &mut s2 {
            *v *= scale;
        }
        naive_softmax(&mut s2, 9, 9);
        let expect = naive_mm(&s2, &a, 9, 9, 6);

        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12, "got {g}, expected {e}");
        }
    }

    #[test]
    fn identical_keys_collapse_to_value_mean() {
        // With all K rows identical every attention row is uniform, so the
        // pre-GDC output equals the column mean of V for every token.
        let cfg = NtaConfig {
            dim_d: 8,
            pooled_h: 2,
            pooled_w: 2,
            heads: 2,
            dim_lang: 4,
            ..NtaConfig::default()
        };
        let mut params = NtaParams::seeded(&cfg, 8).unwrap();
        params.zero_attention_branch();
        let mut rng = SplitMix64::new(3);
        let q_in = Tensor::rand_uniform(vec![16, 8], -1.0, 1.0, &mut rng);
        let k_row: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let k_in = Tensor::new(vec![16, 8], k_row.repeat(16)).unwrap();
        let v_in = Tensor::rand_uniform(vec![16, 8], -1.0, 1.0, &mut rng);

        let mut tape = Tape::new();
        let q = tape.constant(q_in);
        let k = tape.constant(k_in);
        let v = tape.constant(v_in.clone());
        let vars = params.leaves(&mut tape, false);
        let (out, _) =
            pooled_query_attention(&mut tape, q, k, v, 4, 4, &cfg, &vars, BnMode::Infer).unwrap();
        let got = tape.value(out);

        let mut colmean = vec![0.0; 8];
        for i in 0..16 {
            for j in 0..8 {
                colmean[j] += v_in.data()[i * 8 + j] / 16.0;
            }
        }
        for i in 0..16 {
            for j in 0..8 {
                assert!((got.at2(i, j) - colmean[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mlp_adaptor_shapes_and_zero_weights() {
        let mut params = MlpParams::seeded(64, 96, 5);
        let mut tape = Tape::new();
        let tokens = tape.constant(grid_tokens(14, 14, 64, 2).reshaped(vec![196, 64]).unwrap());
        let out = baseline_mlp_adaptor(&mut tape, tokens, &params).unwrap();
        assert_eq!(tape.value(out).shape(), &[196, 96]);

        for t in [&mut params.w1, &mut params.w2] {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        params.b2 = Tensor::full(vec![96], 0.25);
        let mut tape = Tape::new();
        let tokens = tape.constant(grid_tokens(2, 2, 64, 2).reshaped(vec![4, 64]).unwrap());
        let out = baseline_mlp_adaptor(&mut tape, tokens, &params).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn vanilla_xattn_shape_and_identical_key_symmetry() {
        let cfg = NtaConfig { dim_d: 8, heads: 2, dim_lang: 4, ..NtaConfig::default() };
        let mut params = VanillaParams::seeded(&cfg, 5);
        // Identity output projection isolates the attention core.
        let mut wo = vec![0.0; 64];
        for i in 0..8 {
            wo[i * 8 + i] = 1.0;
        }
        params.wo_weight = Tensor::new(vec![8, 8], wo).unwrap();
        params.wo_bias = Tensor::zeros(vec![8]);
        // Zero-variance... rather: make layer norm a pass-through for the
        // symmetry argument by feeding already token-shaped input and only
        // checking that all output rows are equal.
        let mut rng = SplitMix64::new(6);
        let tokens = Tensor::rand_uniform(vec![64, 8], -1.0, 1.0, &mut rng);
        // Force K identical across rows: zero the K block of the projection
        // and set its bias to a constant row.
        let d = 8;
        let mut w = params.qkv_weight.data().to_vec();
        for i in 0..d {
            for j in d..2 * d {
                w[i * 3 * d + j] = 0.0;
            }
        }
        params.qkv_weight = Tensor::new(vec![d, 3 * d], w).unwrap();
        let mut b = params.qkv_bias.data().to_vec();
        for (j, item) in b.iter_mut().enumerate().take(2 * d).skip(d) {
            *item = 0.1 * (j - d) as f64;
        }
        params.qkv_bias = Tensor::new(vec![3 * d], b).unwrap();

        let mut tape = Tape::new();
        let input = tape.constant(tokens);
        let out = baseline_vanilla_xattn(&mut tape, input, &params, &cfg).unwrap();
        let val = tape.value(out);
        assert_eq!(val.shape(), &[64, 8]);
        for i in 1..64 {
            for j in 0..8 {
                assert!(
                    (val.at2(i, j) - val.at2(0, j)).abs() < 1e-12,
                    "row {i} differs at col {j}"
                );
            }
        }
    }
}
