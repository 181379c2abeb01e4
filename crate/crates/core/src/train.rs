//! Progressive two-stage training of the full pipeline.
//!
//! Stage 1 trains only the adaptor against a frozen encoder and LM; stage 2
//! additionally unfreezes the LM and the encoder's final block (the backbone
//! projection never trains). Freezing is enforced by construction — frozen
//! tensors are pushed as constants — and verified bit-exactly through
//! per-group parameter checksums.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;
use crate::lm::{build_multimodal_sequence, multimodal_loss, LmParams, ToyLmConfig};
use crate::nta::{nta_forward, BnMode, NtaConfig, NtaParams};
use crate::rng::SplitMix64;
use crate::synth::SynthDataset;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Momentum for the GDC batchnorm running statistics.
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct PipelineParams {
    /// Frozen stub-encoder projection (the "backbone").
    pub backbone_weight: Tensor,
    pub backbone_bias: Tensor,
    /// The encoder's final block, unfrozen in stage 2: token-wise residual
    /// `x + gelu(x·W + b)`.
    pub final_weight: Tensor,
    pub final_bias: Tensor,
    pub nta: NtaParams,
    pub lm: LmParams,
}

impl PipelineParams {
    pub fn seeded(
        frontend: &FrontendConfig,
        nta_cfg: &NtaConfig,
        lm_cfg: &ToyLmConfig,
        seed: u64,
    ) -> Result<Self> {
        let encoder = crate::frontend::StubEncoder::seeded(frontend, seed);
        let d0 = frontend.token_dim;
        let mut rng = SplitMix64::new(seed ^ 0x656e_6366_696e_616c);
        let bound = 1.0 / (d0 as f64).sqrt();
        Ok(PipelineParams {
            backbone_weight: encoder.weight,
            backbone_bias: encoder.bias,
            final_weight: Tensor::rand_uniform(vec![d0, d0], -bound, bound, &mut rng),
            final_bias: Tensor::zeros(vec![d0]),
            nta: NtaParams::seeded(nta_cfg, seed)?,
            lm: LmParams::seeded(lm_cfg, seed)?,
        })
    }

    /// Canonical (group, name, tensor) walk over all parameters.
    pub fn named(&self) -> Vec<(&'static str, String, &Tensor)> {
        let mut out: Vec<(&'static str, String, &Tensor)> = vec![
            ("encoder", "backbone_weight".into(), &self.backbone_weight),
            ("encoder", "backbone_bias".into(), &self.backbone_bias),
            ("encoder", "final_weight".into(), &self.final_weight),
            ("encoder", "final_bias".into(), &self.final_bias),
        ];
        for (name, t) in self.nta.named() {
            out.push(("nta", name.to_string(), t));
        }
        for (name, t) in self.lm.named() {
            out.push(("lm", name, t));
        }
        out
    }

    /// SHA-256 over the little-endian bytes of each group's tensors in
    /// canonical order.
    pub fn group_checksums(&self) -> BTreeMap<String, String> {
        let mut hashers: BTreeMap<&str, Sha256> = BTreeMap::new();
        for (group, _, tensor) in self.named() {
            let h = hashers.entry(group).or_default();
            for v in tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        hashers
            .into_iter()
            .map(|(g, h)| (g.to_string(), format!("{:x}", h.finalize())))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    AdaptorOnly,
    Full,
}

impl Stage {
    fn frozen_groups(&self) -> BTreeSet<String> {
        match self {
            Stage::AdaptorOnly => ["encoder", "lm"].iter().map(|s| s.to_string()).collect(),
            // The backbone half of the encoder stays frozen.
            Stage::Full => BTreeSet::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainSchedule {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            stage1_steps: 150,
            stage2_steps: 350,
            batch_size: 4,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: usize,
}

/// Adam with decoupled weight decay; norm affine parameters and biases are
/// excluded from decay.
#[derive(Debug, Default)]
pub struct AdamW {
    state: HashMap<String, Moments>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamW {
    fn update(&mut self, key: &str, tensor: &mut Tensor, grad: &[f64], lr: f64, wd: f64) {
        let n = tensor.numel();
        let slot = self.state.entry(key.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
            steps: 0,
        });
        slot.steps += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(slot.steps as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(slot.steps as i32);
        let decay = if key.ends_with("bias") || key.contains("gamma") || key.contains("beta") {
            0.0
        } else {
            wd
        };
        let data = tensor.data_mut();
        for i in 0..n {
            let g = grad[i];
            slot.m[i] = ADAM_BETA1 * slot.m[i] + (1.0 - ADAM_BETA1) * g;
            slot.v[i] = ADAM_BETA2 * slot.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let mhat = slot.m[i] / bc1;
            let vhat = slot.v[i] / bc2;
            data[i] -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + decay * data[i]);
        }
    }
}

/// Mutable training state across steps.
pub struct TrainState {
    pub stage: Stage,
    pub step: usize,
    pub frozen_groups: BTreeSet<String>,
    pub optimizer: AdamW,
    pub rng: SplitMix64,
}

/// Cosine decay to zero with linear warmup over `warmup_ratio` of the run.
pub fn lr_at(step: usize, total: usize, base: f64, warmup_ratio: f64) -> f64 {
    let warmup = ((total as f64 * warmup_ratio).ceil() as usize).max(1);
    if step < warmup {
        base * (step + 1) as f64 / warmup as f64
    } else {
        let progress = (step - warmup) as f64 / (total - warmup).max(1) as f64;
        base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    /// `[step, loss]` pairs over the whole run.
    pub stage_losses: Vec<(usize, f64)>,
    /// Per-group parameter checksums before/after each stage.
    pub checksums: BTreeMap<String, BTreeMap<String, String>>,
    /// Final teacher-forced supervised-token accuracy over the dataset.
    pub accuracy: f64,
}

struct StepOutcome {
    loss: f64,
}

/// One optimization step over a seeded batch. Frozen tensors enter the tape
/// as constants, so their bytes cannot move.
fn train_step(
    params: &mut PipelineParams,
    dataset: &SynthDataset,
    state: &mut TrainState,
    schedule: &TrainSchedule,
    nta_cfg: &NtaConfig,
    lm_cfg: &ToyLmConfig,
    lr: f64,
) -> Result<StepOutcome> {
    let train_enc = state.stage == Stage::Full;
    let train_lm = state.stage == Stage::Full;

    let mut tape = Tape::new();
    let final_w = tape.leaf(params.final_weight.clone(), train_enc);
    let final_b = tape.leaf(params.final_bias.clone(), train_enc);
    let nta_vars = params.nta.leaves(&mut tape, true);
    let lm_vars = params.lm.leaves(&mut tape, train_lm);

    let mut batch_losses: Vec<Var> = Vec::with_capacity(schedule.batch_size);
    let mut bn_updates = Vec::new();
    for _ in 0..schedule.batch_size {
        let sample = &dataset.samples[state.rng.below(dataset.samples.len())];
        let (gh, gw, d0) = (
            sample.tokens.grid_h,
            sample.tokens.grid_w,
            sample.tokens.dim_d,
        );
        let raw = tape.constant(sample.tokens.values.clone());
        let flat = tape.reshape(raw, vec![gh * gw, d0])?;
        let hidden = tape.matmul(flat, final_w)?;
        let hidden = tape.add_row_bias(hidden, final_b)?;
        let hidden = tape.gelu(hidden);
        let refined = tape.add(flat, hidden)?;
        let grid = tape.reshape(refined, vec![gh, gw, d0])?;
        let shuffled = tape.pixel_shuffle_s2d(grid, 2)?;

        let trace = nta_forward(&mut tape, shuffled, &nta_vars, nta_cfg, BnMode::Train)?;
        if let Some(stats) = trace.bn_stats {
            bn_updates.push(stats);
        }
        let vis = trace.output;
        let seq = build_multimodal_sequence(&mut tape, vis, &sample.text_ids, &lm_vars, lm_cfg)?;
        let (_, loss) = multimodal_loss(&mut tape, &seq, &lm_vars, lm_cfg)?;
        batch_losses.push(loss);
    }
    let mut total = batch_losses[0];
    for &l in &batch_losses[1..] {
        total = tape.add(total, l)?;
    }
    let total = tape.scale(total, 1.0 / batch_losses.len() as f64);

    let loss_value = tape.value(total).item()?;
    if !loss_value.is_finite() {
        return Err(Error::Divergence { step: state.step });
    }
    tape.backward(total)?;

    // Apply updates to whatever was trainable this step.
    let wd = schedule.weight_decay;
    if train_enc {
        let g = tape.grad_tensor(final_w);
        state
            .optimizer
            .update("encoder/final_weight", &mut params.final_weight, g.data(), lr, wd);
        let g = tape.grad_tensor(final_b);
        state
            .optimizer
            .update("encoder/final_bias", &mut params.final_bias, g.data(), lr, wd);
    }
    let nta_pairs: Vec<(&str, Var)> = vec![
        ("ln1_gamma", nta_vars.ln1_gamma),
        ("ln1_beta", nta_vars.ln1_beta),
        ("qkv_weight", nta_vars.qkv_weight),
        ("qkv_bias", nta_vars.qkv_bias),
        ("gdc_weight", nta_vars.gdc_weight),
        ("gdc_bias", nta_vars.gdc_bias),
        ("gdc_bn_gamma", nta_vars.gdc_bn_gamma),
        ("gdc_bn_beta", nta_vars.gdc_bn_beta),
        ("convd_weight", nta_vars.convd_weight),
        ("convd_bias", nta_vars.convd_bias),
        ("convr_weight", nta_vars.convr_weight),
        ("convr_bias", nta_vars.convr_bias),
        ("ln2_gamma", nta_vars.ln2_gamma),
        ("ln2_beta", nta_vars.ln2_beta),
    ];
    for (name, var) in nta_pairs {
        let g = tape.grad_tensor(var);
        let slot = params.nta.slot_mut(name).expect("known learnable name");
        state
            .optimizer
            .update(&format!("nta/{name}"), slot, g.data(), lr, wd);
    }
    if train_lm {
        let grads: Vec<(String, Tensor)> = params
            .lm
            .named()
            .iter()
            .map(|(name, _)| name.clone())
            .zip(lm_grads(&tape, &lm_vars))
            .collect();
        apply_lm_grads(&mut params.lm, grads, &mut state.optimizer, lr, wd);
    }

    // Refresh GDC running statistics from this step's batch statistics.
    for stats in bn_updates {
        let unbias = stats.count as f64 / (stats.count as f64 - 1.0).max(1.0);
        let mean = params.nta.gdc_bn_mean.data_mut();
        for (m, &b) in mean.iter_mut().zip(&stats.mean) {
            *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * b;
        }
        let var = params.nta.gdc_bn_var.data_mut();
        for (v, &b) in var.iter_mut().zip(&stats.var_biased) {
            *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * b * unbias;
        }
    }

    Ok(StepOutcome { loss: loss_value })
}

fn lm_grads(tape: &Tape, vars: &crate::lm::LmVars) -> Vec<Tensor> {
    vars.all_vars().iter().map(|&v| tape.grad_tensor(v)).collect()
}

fn apply_lm_grads(
    lm: &mut LmParams,
    grads: Vec<(String, Tensor)>,
    opt: &mut AdamW,
    lr: f64,
    wd: f64,
) {
    for ((name, grad), slot) in grads.into_iter().zip(lm.named_mut()) {
        debug_assert_eq!(name, slot.0);
        opt.update(&format!("lm/{name}"), slot.1, grad.data(), lr, wd);
    }
}

/// Teacher-forced supervised-token accuracy over the whole dataset,
/// batchnorm in inference mode.
pub fn dataset_accuracy(
    params: &PipelineParams,
    dataset: &SynthDataset,
    nta_cfg: &NtaConfig,
    lm_cfg: &ToyLmConfig,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for sample in &dataset.samples {
        let mut tape = Tape::new();
        let final_w = tape.constant(params.final_weight.clone());
        let final_b = tape.constant(params.final_bias.clone());
        let nta_vars = params.nta.leaves(&mut tape, false);
        let lm_vars = params.lm.leaves(&mut tape, false);
        let (gh, gw, d0) = (
            sample.tokens.grid_h,
            sample.tokens.grid_w,
            sample.tokens.dim_d,
        );
        let raw = tape.constant(sample.tokens.values.clone());
        let flat = tape.reshape(raw, vec![gh * gw, d0])?;
        let hidden = tape.matmul(flat, final_w)?;
        let hidden = tape.add_row_bias(hidden, final_b)?;
        let hidden = tape.gelu(hidden);
        let refined = tape.add(flat, hidden)?;
        let grid = tape.reshape(refined, vec![gh, gw, d0])?;
        let shuffled = tape.pixel_shuffle_s2d(grid, 2)?;
        let trace = nta_forward(&mut tape, shuffled, &nta_vars, nta_cfg, BnMode::Infer)?;
        let seq = build_multimodal_sequence(&mut tape, trace.output, &sample.text_ids, &lm_vars, lm_cfg)?;
        let (span, _) = multimodal_loss(&mut tape, &seq, &lm_vars, lm_cfg)?;
        let span_t = tape.value(span);
        let acc = crate::lm::supervised_accuracy(span_t, &sample.text_ids);
        correct += (acc * sample.text_ids.len() as f64).round() as usize;
        total += sample.text_ids.len();
    }
    Ok(correct as f64 / total as f64)
}

/// Runs the progressive schedule: `stage1_steps` of adaptor-only training,
/// then `stage2_steps` with the LM and the encoder final block unfrozen.
/// Either stage may be empty; the learning rate follows one cosine schedule
/// over the combined budget.
pub fn train_two_stage(
    params: &mut PipelineParams,
    dataset: &SynthDataset,
    schedule: &TrainSchedule,
    nta_cfg: &NtaConfig,
    lm_cfg: &ToyLmConfig,
    seed: u64,
) -> Result<TrainReport> {
    if dataset.samples.is_empty() {
        return Err(Error::Contract {
            detail: "empty dataset".to_string(),
        });
    }
    if schedule.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let total = schedule.stage1_steps + schedule.stage2_steps;
    let mut state = TrainState {
        stage: Stage::AdaptorOnly,
        step: 0,
        frozen_groups: Stage::AdaptorOnly.frozen_groups(),
        optimizer: AdamW::default(),
        rng: SplitMix64::new(seed ^ 0x7472_6169_6e72_756e),
    };
    let mut report = TrainReport {
        stage_losses: Vec::with_capacity(total),
        checksums: BTreeMap::new(),
        accuracy: 0.0,
    };
    report
        .checksums
        .insert("stage1_before".into(), params.group_checksums());

    for step in 0..total {
        state.step = step;
        if step == schedule.stage1_steps {
            report
                .checksums
                .insert("stage2_before".into(), params.group_checksums());
            state.stage = Stage::Full;
            state.frozen_groups = Stage::Full.frozen_groups();
        }
        let lr = lr_at(step, total, lm_cfg.base_lr, lm_cfg.warmup_ratio);
        let outcome = train_step(params, dataset, &mut state, schedule, nta_cfg, lm_cfg, lr)?;
        report.stage_losses.push((step, outcome.loss));
    }
    report
        .checksums
        .insert("final".into(), params.group_checksums());
    report.accuracy = dataset_accuracy(params, dataset, nta_cfg, lm_cfg)?;
    Ok(report)
}

/// Means over consecutive non-overlapping windows, for smoothed loss checks.
pub fn window_means(losses: &[(usize, f64)], window: usize) -> Vec<f64> {
    losses
        .chunks(window)
        .filter(|c| c.len() == window)
        .map(|c| c.iter().map(|(_, l)| l).sum::<f64>() / c.len() as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::synth_dataset;

    pub(crate) fn toy_frontend() -> FrontendConfig {
        FrontendConfig {
            threshold_px: 128,
            vit_region_w: 128,
            vit_region_h: 128,
            patch_size: 16,
            shuffle_rate_r: 2,
            n_max: 12,
            token_dim: 8,
        }
    }

    pub(crate) fn toy_nta() -> NtaConfig {
        NtaConfig {
            dim_d: 32,
            pooled_h: 2,
            pooled_w: 2,
            heads: 4,
            dim_lang: 32,
            ..NtaConfig::default()
        }
    }

    pub(crate) fn toy_lm() -> ToyLmConfig {
        ToyLmConfig {
            vocab_size: crate::synth::synth_vocab().len(),
            d_model: 32,
            layers: 2,
            heads: 2,
            max_seq_len: 32,
            ..ToyLmConfig::default()
        }
    }

    #[test]
    fn stage1_freezes_encoder_and_lm_bit_exactly() {
        let frontend = toy_frontend();
        let dataset = synth_dataset(6, &frontend, 3).unwrap();
        let (nta_cfg, lm_cfg) = (toy_nta(), toy_lm());
        let mut params = PipelineParams::seeded(&frontend, &nta_cfg, &lm_cfg, 3).unwrap();
        let schedule = TrainSchedule {
            stage1_steps: 5,
            stage2_steps: 0,
            batch_size: 2,
            weight_decay: 0.01,
        };
        let report =
            train_two_stage(&mut params, &dataset, &schedule, &nta_cfg, &lm_cfg, 3).unwrap();
        let before = &report.checksums["stage1_before"];
        let after = &report.checksums["final"];
        assert_eq!(before["encoder"], after["encoder"]);
        assert_eq!(before["lm"], after["lm"]);
        assert_ne!(before["nta"], after["nta"]);
    }

    #[test]
    fn stage2_moves_lm_and_final_block_but_not_backbone() {
        let frontend = toy_frontend();
        let dataset = synth_dataset(6, &frontend, 4).unwrap();
        let (nta_cfg, lm_cfg) = (toy_nta(), toy_lm());
        let mut params = PipelineParams::seeded(&frontend, &nta_cfg, &lm_cfg, 4).unwrap();
        let backbone_before = params.backbone_weight.clone();
        let final_before = params.final_weight.clone();
        let schedule = TrainSchedule {
            stage1_steps: 0,
            stage2_steps: 5,
            batch_size: 2,
            weight_decay: 0.01,
        };
        let report =
            train_two_stage(&mut params, &dataset, &schedule, &nta_cfg, &lm_cfg, 4).unwrap();
        assert_eq!(params.backbone_weight.data(), backbone_before.data());
        assert_ne!(params.final_weight.data(), final_before.data());
        let before = &report.checksums["stage1_before"];
        let after = &report.checksums["final"];
        assert_ne!(before["lm"], after["lm"]);
    }

    #[test]
    fn losses_are_finite_and_recorded_per_step() {
        let frontend = toy_frontend();
        let dataset = synth_dataset(4, &frontend, 5).unwrap();
        let (nta_cfg, lm_cfg) = (toy_nta(), toy_lm());
        let mut params = PipelineParams::seeded(&frontend, &nta_cfg, &lm_cfg, 5).unwrap();
        let schedule = TrainSchedule {
            stage1_steps: 3,
            stage2_steps: 3,
            batch_size: 2,
            weight_decay: 0.01,
        };
        let report =
            train_two_stage(&mut params, &dataset, &schedule, &nta_cfg, &lm_cfg, 5).unwrap();
        assert_eq!(report.stage_losses.len(), 6);
        assert!(report.stage_losses.iter().all(|(_, l)| l.is_finite()));
    }

    #[test]
    fn lr_schedule_warms_up_then_decays() {
        let base = 1e-3;
        assert!(lr_at(0, 100, base, 0.03) < base);
        let peak = lr_at(3, 100, base, 0.03);
        assert!((peak - base).abs() < 1e-12);
        assert!(lr_at(99, 100, base, 0.03) < 1e-4);
    }
}
