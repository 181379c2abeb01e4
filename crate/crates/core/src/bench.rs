//! Parameter and FLOP accounting plus empirical wall-time scaling.
//!
//! Counting conventions (the absolute numbers are convention-dependent, so
//! they are fixed here and the comparisons are ordering- and slope-based):
//! - one multiply-accumulate = 2 FLOPs, so matmul(m,k,p) = 2·m·k·p
//! - conv2d = 2·Cout·H'·W'·(Cin/groups)·kh·kw
//! - softmax, layer/batch norm and GeLU = 5 FLOPs per element
//! - pooling = 1 FLOP per pooled input element + 1 per output element
//! - elementwise add / scale / bias = 1 FLOP per element

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::nta::NtaConfig;
use crate::ops;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// cost reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostItem {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub module: String,
    pub items: Vec<CostItem>,
}

impl CostReport {
    pub fn params(&self) -> u64 {
        self.items.iter().map(|i| i.params).sum()
    }

    pub fn flops(&self) -> u64 {
        self.items.iter().map(|i| i.flops).sum()
    }
}

/// Exact parameter count over named tensors.
pub fn count_params_named<'a, S: AsRef<str>>(
    named: impl IntoIterator<Item = (S, &'a Tensor)>,
) -> u64 {
    named.into_iter().map(|(_, t)| t.numel() as u64).sum()
}

pub fn linear_params(d_in: usize, d_out: usize, bias: bool) -> u64 {
    (d_in * d_out + if bias { d_out } else { 0 }) as u64
}

fn mm(m: usize, k: usize, p: usize) -> u64 {
    2 * (m * k * p) as u64
}

fn act(elems: usize) -> u64 {
    5 * elems as u64
}

fn elem(elems: usize) -> u64 {
    elems as u64
}

fn pool_flops(in_elems: usize, out_elems: usize) -> u64 {
    (in_elems + out_elems) as u64
}

// ---------------------------------------------------------------------------
// attention-core cost models (the scaling claim)
// ---------------------------------------------------------------------------

/// Pooled-query attention core at heads = 1: four matmuls worth `8·N·n·d`
/// plus the pooling, scaling and softmax terms — every term linear in N.
pub fn pooled_core_flops(n_tokens: usize, n_pooled: usize, d: usize) -> u64 {
    let (n, np) = (n_tokens, n_pooled);
    let matmuls = mm(np, d, n) + mm(np, n, d) + mm(n, d, np) + mm(n, np, d);
    let scales = elem(np * n) + elem(n * np);
    let softmaxes = act(np * n) + act(n * np);
    let pooling = pool_flops(n * d, np * d);
    matmuls + scales + softmaxes + pooling
}

/// Vanilla attention core: two N×N matmuls worth `4·N²·d` plus scaling and
/// softmax — quadratic in N.
pub fn vanilla_core_flops(n_tokens: usize, d: usize) -> u64 {
    let n = n_tokens;
    mm(n, d, n) + mm(n, n, d) + elem(n * n) + act(n * n)
}

// ---------------------------------------------------------------------------
// full adaptor cost models
// ---------------------------------------------------------------------------

/// Items shared by the pooled and vanilla adaptors' projection head:
/// `layer_norm(Conv_d(·)) + Conv_r(AvgPool2×2(·))`, token count quartered.
fn head_items(cfg: &NtaConfig, n_tokens: usize) -> Vec<CostItem> {
    let (d, dl) = (cfg.dim_d, cfg.dim_lang);
    let n_out = n_tokens / 4;
    vec![
        CostItem {
            name: "convd".into(),
            params: (dl * d * 4 + dl) as u64,
            flops: 2 * (dl * n_out * d * 4) as u64 + elem(n_out * dl),
        },
        CostItem {
            name: "ln2".into(),
            params: 2 * dl as u64,
            flops: act(n_out * dl),
        },
        CostItem {
            name: "convr".into(),
            params: (dl * d + dl) as u64,
            flops: pool_flops(n_tokens * d, n_out * d)
                + 2 * (dl * n_out * d) as u64
                + elem(n_out * dl),
        },
        CostItem {
            name: "head_add".into(),
            params: 0,
            flops: elem(n_out * dl),
        },
    ]
}

fn front_items(cfg: &NtaConfig, n_tokens: usize) -> Vec<CostItem> {
    let d = cfg.dim_d;
    vec![
        CostItem {
            name: "ln1".into(),
            params: 2 * d as u64,
            flops: act(n_tokens * d),
        },
        CostItem {
            name: "qkv".into(),
            params: linear_params(d, 3 * d, true),
            flops: mm(n_tokens, d, 3 * d) + elem(n_tokens * 3 * d),
        },
    ]
}

/// Full pooled-query adaptor.
pub fn nta_cost(cfg: &NtaConfig, n_tokens: usize) -> CostReport {
    let d = cfg.dim_d;
    let k = cfg.gdc_kernel;
    let mut items = front_items(cfg, n_tokens);
    items.push(CostItem {
        name: "pqa_core".into(),
        params: 0,
        flops: pooled_core_flops(n_tokens, cfg.pooled_count(), d),
    });
    items.push(CostItem {
        name: "gdc".into(),
        // Depthwise conv + bias, batchnorm affine (running stats excluded).
        params: (d * k * k + d + 2 * d) as u64,
        flops: 2 * (d * n_tokens * k * k) as u64
            + elem(n_tokens * d)
            + act(n_tokens * d)
            + act(n_tokens * d),
    });
    items.push(CostItem {
        name: "residual_add".into(),
        params: 0,
        flops: elem(n_tokens * d),
    });
    items.extend(head_items(cfg, n_tokens));
    CostReport {
        module: "nta".into(),
        items,
    }
}

/// Vanilla cross-attention adaptor: identical front and head, dense
/// attention core plus the standard output projection, no GDC.
pub fn vanilla_cost(cfg: &NtaConfig, n_tokens: usize) -> CostReport {
    let d = cfg.dim_d;
    let mut items = front_items(cfg, n_tokens);
    items.push(CostItem {
        name: "attn_core".into(),
        params: 0,
        flops: vanilla_core_flops(n_tokens, d),
    });
    items.push(CostItem {
        name: "wo".into(),
        params: linear_params(d, d, true),
        flops: mm(n_tokens, d, d) + elem(n_tokens * d),
    });
    items.push(CostItem {
        name: "residual_add".into(),
        params: 0,
        flops: elem(n_tokens * d),
    });
    items.extend(head_items(cfg, n_tokens));
    CostReport {
        module: "vanilla_xattn".into(),
        items,
    }
}

/// Two-layer MLP adaptor with hidden width 4·d.
pub fn mlp_cost(dim_d: usize, dim_lang: usize, n_tokens: usize) -> CostReport {
    let hidden = 4 * dim_d;
    CostReport {
        module: "mlp".into(),
        items: vec![
            CostItem {
                name: "fc1".into(),
                params: linear_params(dim_d, hidden, true),
                flops: mm(n_tokens, dim_d, hidden) + elem(n_tokens * hidden),
            },
            CostItem {
                name: "gelu".into(),
                params: 0,
                flops: act(n_tokens * hidden),
            },
            CostItem {
                name: "fc2".into(),
                params: linear_params(hidden, dim_lang, true),
                flops: mm(n_tokens, hidden, dim_lang) + elem(n_tokens * dim_lang),
            },
        ],
    }
}

// ---------------------------------------------------------------------------
// empirical scaling bench
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AdaptorKind {
    PooledCore,
    VanillaCore,
}

impl AdaptorKind {
    pub fn name(&self) -> &'static str {
        match self {
            AdaptorKind::PooledCore => "pqa_core",
            AdaptorKind::VanillaCore => "vanilla_core",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    /// Pooled query count (n), a 2-D grid internally.
    pub pooled: usize,
    pub dim: usize,
    pub trials: usize,
    pub warmups: usize,
    /// Trials shorter than this auto-increase inner repetitions.
    pub min_trial_ns: u128,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            pooled: 144,
            dim: 64,
            trials: 5,
            warmups: 2,
            min_trial_ns: 2_000_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BenchEntry {
    pub module: String,
    pub n_tokens: usize,
    pub params: u64,
    pub analytic_flops: u64,
    pub wall_ns_median: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeEntry {
    pub module: String,
    /// Least-squares log₂ slope over the top three N points.
    pub analytic_slope: f64,
    pub wall_slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct BenchReport {
    pub entries: Vec<BenchEntry>,
    pub slopes: Vec<SlopeEntry>,
}

/// Least-squares slope of y against x on log₂ axes.
pub fn log2_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (lx, ly) = (x.log2(), y.log2());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

/// Grid dims for N tokens: the divisor pair nearest to square that can hold
/// a 12×12 pooled grid.
fn grid_dims(n_tokens: usize, pooled_side: usize) -> Result<(usize, usize)> {
    let mut best: Option<(usize, usize)> = None;
    let mut h = (n_tokens as f64).sqrt() as usize;
    while h >= 1 {
        if n_tokens % h == 0 {
            let w = n_tokens / h;
            if h >= pooled_side && w >= pooled_side {
                best = Some((h, w));
                break;
            }
        }
        h -= 1;
    }
    best.ok_or_else(|| {
        Error::config(format!(
            "no grid factorization of {n_tokens} holds a {pooled_side}×{pooled_side} pooled grid"
        ))
    })
}

fn pooled_sides(pooled: usize) -> (usize, usize) {
    let mut h = (pooled as f64).sqrt() as usize;
    while pooled % h != 0 {
        h -= 1;
    }
    (h, pooled / h)
}

/// One forward pass of the pooled attention core (heads = 1, pure ops).
fn run_pooled_core(q: &Tensor, k: &Tensor, v: &Tensor, grid: (usize, usize), pooled: (usize, usize)) -> Result<Tensor> {
    let d = q.shape()[1];
    let scale = 1.0 / (d as f64).sqrt();
    let q_grid = q.reshaped(vec![grid.0, grid.1, d])?;
    let q_chw = ops::hwc_to_chw(&q_grid)?;
    let small = ops::adaptive_avg_pool2d(&q_chw, pooled.0, pooled.1)?;
    let small = ops::chw_to_hwc(&small)?.reshaped(vec![pooled.0 * pooled.1, d])?;

    let kt = ops::transpose2(k)?;
    let scores = ops::scale(&ops::matmul(&small, &kt)?, scale);
    let weights = ops::softmax_rows(&scores)?;
    let aggregated = ops::matmul(&weights, v)?;

    let st = ops::transpose2(&small)?;
    let back = ops::scale(&ops::matmul(q, &st)?, scale);
    let back = ops::softmax_rows(&back)?;
    ops::matmul(&back, &aggregated)
}

/// One forward pass of the dense attention core.
fn run_vanilla_core(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let d = q.shape()[1];
    let scale = 1.0 / (d as f64).sqrt();
    let kt = ops::transpose2(k)?;
    let scores = ops::scale(&ops::matmul(q, &kt)?, scale);
    let weights = ops::softmax_rows(&scores)?;
    ops::matmul(&weights, v)
}

/// Times one adaptor core at one size, auto-increasing inner repetitions
/// until a trial is long enough for the timer.
fn time_core(
    kind: AdaptorKind,
    n_tokens: usize,
    cfg: &BenchConfig,
) -> Result<u64> {
    let mut rng = SplitMix64::new(cfg.seed ^ n_tokens as u64);
    let d = cfg.dim;
    let q = Tensor::rand_uniform(vec![n_tokens, d], -1.0, 1.0, &mut rng);
    let k = Tensor::rand_uniform(vec![n_tokens, d], -1.0, 1.0, &mut rng);
    let v = Tensor::rand_uniform(vec![n_tokens, d], -1.0, 1.0, &mut rng);
    let pooled = pooled_sides(cfg.pooled);
    let grid = grid_dims(n_tokens, pooled.0.max(pooled.1))?;

    let run = |reps: usize| -> Result<u128> {
        let start = Instant::now();
        for _ in 0..reps {
            let out = match kind {
                AdaptorKind::PooledCore => run_pooled_core(&q, &k, &v, grid, pooled)?,
                AdaptorKind::VanillaCore => run_vanilla_core(&q, &k, &v)?,
            };
            std::hint::black_box(out.data()[0]);
        }
        Ok(start.elapsed().as_nanos())
    };

    let probe = run(1)?;
    let reps = if probe < cfg.min_trial_ns {
        (cfg.min_trial_ns / probe.max(1) + 1) as usize
    } else {
        1
    };
    for _ in 0..cfg.warmups {
        run(reps)?;
    }
    let mut samples = Vec::with_capacity(cfg.trials);
    for _ in 0..cfg.trials.max(1) {
        samples.push(run(reps)? / reps as u128);
    }
    samples.sort_unstable();
    Ok(samples[samples.len() / 2] as u64)
}

/// Benchmarks each adaptor core sequentially over `n_list`, recording
/// analytic FLOPs, median wall time, and log-log slopes over the top three
/// sizes.
pub fn run_scaling_bench(
    kinds: &[AdaptorKind],
    n_list: &[usize],
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    if n_list.len() < 2 {
        return Err(Error::config("scaling bench needs at least two sizes"));
    }
    let mut sizes = n_list.to_vec();
    sizes.sort_unstable();
    sizes.dedup();
    let mut report = BenchReport::default();
    for &kind in kinds {
        let mut points = Vec::with_capacity(sizes.len());
        for &n in &sizes {
            let flops = match kind {
                AdaptorKind::PooledCore => pooled_core_flops(n, cfg.pooled, cfg.dim),
                AdaptorKind::VanillaCore => vanilla_core_flops(n, cfg.dim),
            };
            let wall = time_core(kind, n, cfg)?;
            report.entries.push(BenchEntry {
                module: kind.name().into(),
                n_tokens: n,
                params: 0,
                analytic_flops: flops,
                wall_ns_median: wall,
            });
            points.push((n as f64, flops as f64, wall as f64));
        }
        let top = &points[points.len().saturating_sub(3)..];
        report.slopes.push(SlopeEntry {
            module: kind.name().into(),
            analytic_slope: log2_slope(
                &top.iter().map(|&(n, f, _)| (n, f)).collect::<Vec<_>>(),
            ),
            wall_slope: log2_slope(&top.iter().map(|&(n, _, w)| (n, w)).collect::<Vec<_>>()),
        });
    }
    Ok(report)
}

/// CSV with the fixed header `module,N,params,flops,wall_ns_median`.
pub fn emit_csv(report: &BenchReport) -> String {
    let mut out = String::from("module,N,params,flops,wall_ns_median\n");
    for e in &report.entries {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.module, e.n_tokens, e.params, e.analytic_flops, e.wall_ns_median
        ));
    }
    out
}

pub fn emit_json(report: &BenchReport) -> Result<String> {
    serde_json::to_string_pretty(report).map_err(|e| Error::Io {
        detail: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nta::NtaParams;

    #[test]
    fn linear_param_examples() {
        assert_eq!(linear_params(4, 3, true), 15);
        // Pixel shuffle has no parameters; nothing to count.
    }

    #[test]
    fn nta_params_match_hand_sum() {
        let cfg = NtaConfig::default(); // d=64, d_lang=96, heads=4, 3×3 GDC
        let report = nta_cost(&cfg, 1024);
        let hand: u64 = (64 * 192 + 192)      // qkv
            + (64 * 9 + 64 + 2 * 64)          // GDC conv + bias + bn affine
            + (2 * 2 * 64 * 96 + 96)          // convd
            + (64 * 96 + 96)                  // convr
            + (2 * 64 + 2 * 96);              // norms
        assert_eq!(report.params(), hand);
        assert_eq!(hand, 44480);

        // The analytic count equals the real parameter struct's count.
        let params = NtaParams::seeded(&cfg, 0).unwrap();
        assert_eq!(count_params_named(params.learnable()), report.params());
    }

    #[test]
    fn vanilla_params_match_hand_sum_and_exceed_nta() {
        let cfg = NtaConfig::default();
        let vanilla = vanilla_cost(&cfg, 1024);
        let hand: u64 = (64 * 192 + 192)      // qkv
            + (64 * 64 + 64)                  // wo
            + (2 * 2 * 64 * 96 + 96)          // convd
            + (64 * 96 + 96)                  // convr
            + (2 * 64 + 2 * 96);              // norms
        assert_eq!(vanilla.params(), hand);
        assert!(nta_cost(&cfg, 1024).params() < vanilla.params());
    }

    #[test]
    fn core_flop_formulas() {
        // matmul convention: (m,k)·(k,p) → 2mkp.
        assert_eq!(mm(3, 4, 5), 120);
        // Pooled core: 8·N·n·d plus documented linear terms.
        let (n, np, d) = (1024, 144, 64);
        let flops = pooled_core_flops(n, np, d);
        assert_eq!(
            flops,
            (8 * n * np * d + 12 * np * n + (n + np) * d) as u64
        );
        // Vanilla core: 4·N²·d plus scale + softmax.
        let flops = vanilla_core_flops(n, d);
        assert_eq!(flops, (4 * n * n * d + 6 * n * n) as u64);
    }

    #[test]
    fn totals_are_sums_of_breakdown() {
        let cfg = NtaConfig::default();
        let report = nta_cost(&cfg, 4096);
        assert_eq!(report.flops(), report.items.iter().map(|i| i.flops).sum::<u64>());
        // Reproducible.
        assert_eq!(report, nta_cost(&cfg, 4096));
    }

    #[test]
    fn analytic_slopes_are_linear_and_quadratic() {
        let ns = [1024.0, 2048.0, 4096.0];
        let pooled: Vec<(f64, f64)> = ns
            .iter()
            .map(|&n| (n, pooled_core_flops(n as usize, 144, 64) as f64))
            .collect();
        let vanilla: Vec<(f64, f64)> = ns
            .iter()
            .map(|&n| (n, vanilla_core_flops(n as usize, 64) as f64))
            .collect();
        let ps = log2_slope(&pooled);
        let vs = log2_slope(&vanilla);
        assert!((ps - 1.0).abs() <= 0.05, "pooled slope {ps}");
        assert!((vs - 2.0).abs() <= 0.05, "vanilla slope {vs}");
    }

    #[test]
    fn flops_ordering_holds_beyond_twice_pooled() {
        let cfg = NtaConfig::default();
        for n in [288, 512, 1024, 4096] {
            assert!(
                nta_cost(&cfg, n).flops() < vanilla_cost(&cfg, n).flops(),
                "ordering fails at N = {n}"
            );
        }
    }

    #[test]
    fn csv_shape_and_determinism() {
        let empty = BenchReport::default();
        assert_eq!(emit_csv(&empty), "module,N,params,flops,wall_ns_median\n");

        let report = BenchReport {
            entries: vec![BenchEntry {
                module: "pqa_core".into(),
                n_tokens: 256,
                params: 0,
                analytic_flops: 123,
                wall_ns_median: 456,
            }],
            slopes: vec![],
        };
        let a = emit_csv(&report);
        assert_eq!(a, emit_csv(&report));
        assert!(a.ends_with("pqa_core,256,0,123,456\n"));
        // JSON round-trips to an equal in-memory report (entries only; the
        // report type is serialize-only so compare the emitted strings).
        assert_eq!(emit_json(&report).unwrap(), emit_json(&report).unwrap());
    }

    #[test]
    fn grid_dims_prefer_square() {
        assert_eq!(grid_dims(256, 12).unwrap(), (16, 16));
        assert_eq!(grid_dims(512, 12).unwrap(), (16, 32));
        assert_eq!(grid_dims(2048, 12).unwrap(), (32, 64));
        assert!(grid_dims(26, 12).is_err());
    }

    #[test]
    fn bench_runs_small_sizes() {
        let cfg = BenchConfig {
            pooled: 4,
            dim: 8,
            trials: 3,
            warmups: 1,
            min_trial_ns: 10_000,
            seed: 1,
        };
        let report = run_scaling_bench(
            &[AdaptorKind::PooledCore, AdaptorKind::VanillaCore],
            &[16, 32, 64],
            &cfg,
        )
        .unwrap();
        assert_eq!(report.entries.len(), 6);
        assert!(report.entries.iter().all(|e| e.wall_ns_median > 0));
        assert_eq!(report.slopes.len(), 2);
    }
}
