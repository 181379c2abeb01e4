// Scratch harness for picking the training schedule (not part of the suite).

use v2l_core::frontend::FrontendConfig;
use v2l_core::lm::ToyLmConfig;
use v2l_core::nta::NtaConfig;
use v2l_core::synth::{synth_dataset, synth_vocab};
use v2l_core::train::{train_two_stage, window_means, PipelineParams, TrainSchedule};

fn main() {
    let frontend = FrontendConfig {
        threshold_px: 128,
        vit_region_w: 128,
        vit_region_h: 128,
        patch_size: 16,
        shuffle_rate_r: 2,
        n_max: 12,
        token_dim: 8,
    };
    let nta_cfg = NtaConfig {
        dim_d: 32,
        pooled_h: 2,
        pooled_w: 2,
        heads: 4,
        dim_lang: 32,
        ..NtaConfig::default()
    };
    let args: Vec<String> = std::env::args().collect();
    let base_lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(4e-4);
    let s1: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(150);
    let total: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(500);
    let seed: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1);
    let batch: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(4);
    let lm_cfg = ToyLmConfig {
        vocab_size: synth_vocab().len(),
        d_model: 32,
        layers: 2,
        heads: 2,
        max_seq_len: 32,
        base_lr,
        ..ToyLmConfig::default()
    };
    let dataset = synth_dataset(32, &frontend, seed).unwrap();

    let t0 = std::time::Instant::now();
    let mut p_two = PipelineParams::seeded(&frontend, &nta_cfg, &lm_cfg, seed).unwrap();
    let sched_two = TrainSchedule {
        stage1_steps: s1,
        stage2_steps: total - s1,
        batch_size: batch,
        weight_decay: 0.01,
    };
    let rep_two = train_two_stage(&mut p_two, &dataset, &sched_two, &nta_cfg, &lm_cfg, seed).unwrap();
    let two_time = t0.elapsed().as_secs_f64();

    let mut p_one = PipelineParams::seeded(&frontend, &nta_cfg, &lm_cfg, seed).unwrap();
    let sched_one = TrainSchedule {
        stage1_steps: 0,
        stage2_steps: total,
        batch_size: batch,
        weight_decay: 0.01,
    };
    let rep_one = train_two_stage(&mut p_one, &dataset, &sched_one, &nta_cfg, &lm_cfg, seed).unwrap();

    let final_window = |r: &v2l_core::train::TrainReport| {
        let n = r.stage_losses.len();
        r.stage_losses[n - 20..].iter().map(|(_, l)| l).sum::<f64>() / 20.0
    };
    let wm = window_means(&rep_two.stage_losses, 50);
    let monotone = wm.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    println!(
        "lr={base_lr} s1={s1} total={total} seed={seed} batch={batch} | two: acc={:.4} fin={:.4} | one: acc={:.4} fin={:.4} | two<=one: {} | monotone50: {} | {:.1}s",
        rep_two.accuracy,
        final_window(&rep_two),
        rep_one.accuracy,
        final_window(&rep_one),
        final_window(&rep_two) <= final_window(&rep_one),
        monotone,
        two_time,
    );
}
