//! Gradient verification: recorded adjoints vs. the central-difference
//! oracle, over seeded random configurations.
//!
//! The objective for non-scalar outputs is a fixed random weighted sum of
//! the output, so no adjoint can hide behind a symmetric reduction.

use crate::error::Result;
use crate::fd::{finite_diff_grad, max_rel_err, FD_EPS};
use crate::nta::{nta_forward, BnMode, NtaConfig, NtaParams};
use crate::ops::ConvSpec;
use crate::rng::SplitMix64;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
}

type BuildFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Checks one configuration: every differentiable input of `build` gets its
/// tape gradient compared against central differences.
fn check_config(inputs: &[Tensor], build: &BuildFn) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars)?;
    let out_shape = tape.value(out).shape().to_vec();
    let mut wrng = SplitMix64::new(0x6c6f_7373 ^ out_shape.iter().sum::<usize>() as u64);
    let weights = Tensor::rand_uniform(out_shape, -1.0, 1.0, &mut wrng);

    let wv = tape.constant(weights.clone());
    let prod = tape.mul(out, wv)?;
    let loss = tape.sum_all(prod);
    tape.backward(loss)?;

    let mut worst = 0.0_f64;
    for (i, x) in inputs.iter().enumerate() {
        let autodiff = tape.grad_tensor(vars[i]);
        let fd = finite_diff_grad(
            |probe| {
                let mut t = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, orig)| {
                        t.constant(if j == i { probe.clone() } else { orig.clone() })
                    })
                    .collect();
                let o = build(&mut t, &vs)?;
                let wv = t.constant(weights.clone());
                let prod = t.mul(o, wv)?;
                let l = t.sum_all(prod);
                t.value(l).item()
            },
            x,
            FD_EPS,
        )?;
        worst = worst.max(max_rel_err(&autodiff, &fd));
    }
    Ok(worst)
}

fn rand_t(rng: &mut SplitMix64, shape: Vec<usize>) -> Tensor {
    Tensor::rand_uniform(shape, -1.5, 1.5, rng)
}

fn dim(rng: &mut SplitMix64, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// Gradchecks every differentiable primitive on `configs` seeded random
/// configurations each (dims ≤ 8), returning the per-primitive worst
/// relative error.
pub fn check_primitives(seed: u64, configs: usize) -> Result<Vec<GradCheckEntry>> {
    let mut entries = Vec::new();
    let mut root = SplitMix64::new(seed);

    let mut run = |name: &str,
                   root: &mut SplitMix64,
                   gen: &mut dyn FnMut(&mut SplitMix64) -> (Vec<Tensor>, BuildFn)|
     -> Result<()> {
        let mut rng = root.split();
        let mut worst = 0.0_f64;
        for _ in 0..configs {
            let (inputs, build) = gen(&mut rng);
            worst = worst.max(check_config(&inputs, &build)?);
        }
        entries.push(GradCheckEntry {
            name: name.to_string(),
            max_rel_err: worst,
        });
        Ok(())
    };

    run("matmul", &mut root, &mut |rng| {
        let (m, k, p) = (dim(rng, 1, 8), dim(rng, 1, 8), dim(rng, 1, 8));
        let inputs = vec![rand_t(rng, vec![m, k]), rand_t(rng, vec![k, p])];
        (inputs, Box::new(|t, v| t.matmul(v[0], v[1])))
    })?;

    run("transpose2", &mut root, &mut |rng| {
        let (m, k) = (dim(rng, 1, 8), dim(rng, 1, 8));
        (vec![rand_t(rng, vec![m, k])], Box::new(|t, v| t.transpose2(v[0])))
    })?;

    run("add", &mut root, &mut |rng| {
        let shape = vec![dim(rng, 1, 8), dim(rng, 1, 8)];
        let inputs = vec![rand_t(rng, shape.clone()), rand_t(rng, shape)];
        (inputs, Box::new(|t, v| t.add(v[0], v[1])))
    })?;

    run("sub", &mut root, &mut |rng| {
        let shape = vec![dim(rng, 1, 8), dim(rng, 1, 8)];
        let inputs = vec![rand_t(rng, shape.clone()), rand_t(rng, shape)];
        (inputs, Box::new(|t, v| t.sub(v[0], v[1])))
    })?;

    run("mul", &mut root, &mut |rng| {
        let shape = vec![dim(rng, 1, 8), dim(rng, 1, 8)];
        let inputs = vec![rand_t(rng, shape.clone()), rand_t(rng, shape)];
        (inputs, Box::new(|t, v| t.mul(v[0], v[1])))
    })?;

    run("scale", &mut root, &mut |rng| {
        let shape = vec![dim(rng, 1, 8), dim(rng, 1, 8)];
        let c = rng.uniform(-2.0, 2.0);
        (
            vec![rand_t(rng, shape)],
            Box::new(move |t, v| Ok(t.scale(v[0], c))),
        )
    })?;

    run("add_row_bias", &mut root, &mut |rng| {
        let (n, d) = (dim(rng, 1, 8), dim(rng, 1, 8));
        let inputs = vec![rand_t(rng, vec![n, d]), rand_t(rng, vec![d])];
        (inputs, Box::new(|t, v| t.add_row_bias(v[0], v[1])))
    })?;

    run("add_chan_bias", &mut root, &mut |rng| {
        let (c, h, w) = (dim(rng, 1, 4), dim(rng, 1, 5), dim(rng, 1, 5));
        let inputs = vec![rand_t(rng, vec![c, h, w]), rand_t(rng, vec![c])];
        (inputs, Box::new(|t, v| t.add_chan_bias(v[0], v[1])))
    })?;

    run("softmax_rows", &mut root, &mut |rng| {
        let shape = vec![dim(rng, 1, 8), dim(rng, 1, 8)];
        (vec![rand_t(rng, shape)], Box::new(|t, v| t.softmax_rows(v[0])))
    })?;

    run("layer_norm", &mut root, &mut |rng| {
        let (n, d) = (dim(rng, 1, 8), dim(rng, 2, 8));
        let inputs = vec![
            rand_t(rng, vec![n, d]),
            rand_t(rng, vec![d]),
            rand_t(rng, vec![d]),
        ];
        (inputs, Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)))
    })?;

    run("gelu", &mut root, &mut |rng| {
        let shape = vec![dim(rng, 1, 8), dim(rng, 1, 8)];
        (vec![rand_t(rng, shape)], Box::new(|t, v| Ok(t.gelu(v[0]))))
    })?;

    run("conv2d", &mut root, &mut |rng| {
        // Redraw until the geometry admits at least one output position.
        loop {
            let groups = dim(rng, 1, 2);
            let cin = groups * dim(rng, 1, 2);
            let cout = groups * dim(rng, 1, 2);
            let k = dim(rng, 1, 3);
            let spec = ConvSpec {
                stride: dim(rng, 1, 2),
                padding: dim(rng, 0, 2),
                dilation: dim(rng, 1, 2),
                groups,
            };
            let h = dim(rng, 1, 6);
            let w = dim(rng, 1, 6);
            if crate::ops::conv2d_out_dim(h, k, &spec).is_err()
                || crate::ops::conv2d_out_dim(w, k, &spec).is_err()
            {
                continue;
            }
            let inputs = vec![
                rand_t(rng, vec![cin, h, w]),
                rand_t(rng, vec![cout, cin / groups, k, k]),
                rand_t(rng, vec![cout]),
            ];
            return (
                inputs,
                Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), spec)),
            );
        }
    })?;

    run("conv2d_depthwise_dilated", &mut root, &mut |rng| {
        let c = dim(rng, 1, 4);
        let spec = ConvSpec {
            stride: 1,
            padding: 2,
            dilation: 2,
            groups: c,
        };
        let (h, w) = (dim(rng, 5, 8), dim(rng, 5, 8));
        let inputs = vec![
            rand_t(rng, vec![c, h, w]),
            rand_t(rng, vec![c, 1, 3, 3]),
            rand_t(rng, vec![c]),
        ];
        (
            inputs,
            Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), spec)),
        )
    })?;

    run("adaptive_avg_pool2d", &mut root, &mut |rng| {
        let (c, h, w) = (dim(rng, 1, 3), dim(rng, 2, 8), dim(rng, 2, 8));
        let (oh, ow) = (dim(rng, 1, h), dim(rng, 1, w));
        (
            vec![rand_t(rng, vec![c, h, w])],
            Box::new(move |t, v| t.adaptive_avg_pool2d(v[0], oh, ow)),
        )
    })?;

    run("pixel_shuffle_s2d", &mut root, &mut |rng| {
        let r = dim(rng, 1, 2);
        let (h, w, d) = (r * dim(rng, 1, 3), r * dim(rng, 1, 3), dim(rng, 1, 4));
        (
            vec![rand_t(rng, vec![h, w, d])],
            Box::new(move |t, v| t.pixel_shuffle_s2d(v[0], r)),
        )
    })?;

    run("pixel_unshuffle_d2s", &mut root, &mut |rng| {
        let r = dim(rng, 1, 2);
        let (h, w, d) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 4));
        (
            vec![rand_t(rng, vec![h, w, d * r * r])],
            Box::new(move |t, v| t.pixel_unshuffle_d2s(v[0], r)),
        )
    })?;

    run("hwc_chw_permutes", &mut root, &mut |rng| {
        let shape = vec![dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4)];
        (
            vec![rand_t(rng, shape)],
            Box::new(|t, v| {
                let c = t.hwc_to_chw(v[0])?;
                t.chw_to_hwc(c)
            }),
        )
    })?;

    run("reshape", &mut root, &mut |rng| {
        let (a, b) = (dim(rng, 1, 6), dim(rng, 1, 6));
        (
            vec![rand_t(rng, vec![a, b])],
            Box::new(move |t, v| t.reshape(v[0], vec![b, a])),
        )
    })?;

    run("concat_rows", &mut root, &mut |rng| {
        let d = dim(rng, 1, 6);
        let (r1, r2) = (dim(rng, 1, 4), dim(rng, 1, 4));
        let inputs = vec![rand_t(rng, vec![r1, d]), rand_t(rng, vec![r2, d])];
        (inputs, Box::new(|t, v| t.concat_rows(v)))
    })?;

    run("concat_cols", &mut root, &mut |rng| {
        let n = dim(rng, 1, 6);
        let (c1, c2) = (dim(rng, 1, 4), dim(rng, 1, 4));
        let inputs = vec![rand_t(rng, vec![n, c1]), rand_t(rng, vec![n, c2])];
        (inputs, Box::new(|t, v| t.concat_cols(v)))
    })?;

    run("slice_cols", &mut root, &mut |rng| {
        let (n, d) = (dim(rng, 1, 6), dim(rng, 2, 8));
        let start = rng.below(d - 1);
        let len = dim(rng, 1, d - start);
        (
            vec![rand_t(rng, vec![n, d])],
            Box::new(move |t, v| t.slice_cols(v[0], start, len)),
        )
    })?;

    run("slice_rows", &mut root, &mut |rng| {
        let (n, d) = (dim(rng, 2, 8), dim(rng, 1, 6));
        let start = rng.below(n - 1);
        let len = dim(rng, 1, n - start);
        (
            vec![rand_t(rng, vec![n, d])],
            Box::new(move |t, v| t.slice_rows(v[0], start, len)),
        )
    })?;

    run("sum_all", &mut root, &mut |rng| {
        let shape = vec![dim(rng, 1, 8), dim(rng, 1, 8)];
        (vec![rand_t(rng, shape)], Box::new(|t, v| Ok(t.sum_all(v[0]))))
    })?;

    run("mean_all", &mut root, &mut |rng| {
        let shape = vec![dim(rng, 1, 8), dim(rng, 1, 8)];
        (vec![rand_t(rng, shape)], Box::new(|t, v| Ok(t.mean_all(v[0]))))
    })?;

    run("batchnorm2d_train", &mut root, &mut |rng| {
        let (c, h, w) = (dim(rng, 1, 4), dim(rng, 2, 6), dim(rng, 2, 6));
        let inputs = vec![
            rand_t(rng, vec![c, h, w]),
            rand_t(rng, vec![c]),
            rand_t(rng, vec![c]),
        ];
        (
            inputs,
            Box::new(|t, v| t.batchnorm2d_train(v[0], v[1], v[2], 1e-5).map(|(out, _)| out)),
        )
    })?;

    run("batchnorm2d_infer", &mut root, &mut |rng| {
        let (c, h, w) = (dim(rng, 1, 4), dim(rng, 2, 6), dim(rng, 2, 6));
        let mean = rand_t(rng, vec![c]);
        let var = Tensor::rand_uniform(vec![c], 0.5, 2.0, rng);
        let inputs = vec![
            rand_t(rng, vec![c, h, w]),
            rand_t(rng, vec![c]),
            rand_t(rng, vec![c]),
        ];
        (
            inputs,
            Box::new(move |t, v| t.batchnorm2d_infer(v[0], v[1], v[2], &mean, &var, 1e-5)),
        )
    })?;

    run("embedding_gather", &mut root, &mut |rng| {
        let (v_sz, d, t_len) = (dim(rng, 2, 8), dim(rng, 1, 6), dim(rng, 1, 8));
        let ids: Vec<usize> = (0..t_len).map(|_| rng.below(v_sz)).collect();
        (
            vec![rand_t(rng, vec![v_sz, d])],
            Box::new(move |t, v| t.embedding_gather(v[0], &ids)),
        )
    })?;

    run("cross_entropy_rows", &mut root, &mut |rng| {
        let (t_len, v_sz) = (dim(rng, 1, 8), dim(rng, 2, 8));
        let targets: Vec<usize> = (0..t_len).map(|_| rng.below(v_sz)).collect();
        (
            vec![rand_t(rng, vec![t_len, v_sz])],
            Box::new(move |t, v| t.cross_entropy_rows(v[0], &targets)),
        )
    })?;

    // Composite from the tensor-core contract: loss = Σ softmax_rows(x·W).
    run("softmax_of_matmul", &mut root, &mut |rng| {
        let (m, k, p) = (dim(rng, 1, 8), dim(rng, 1, 8), dim(rng, 2, 8));
        let inputs = vec![rand_t(rng, vec![m, k]), rand_t(rng, vec![k, p])];
        (
            inputs,
            Box::new(|t, v| {
                let y = t.matmul(v[0], v[1])?;
                t.softmax_rows(y)
            }),
        )
    })?;

    Ok(entries)
}

/// Small random adaptor configurations (dims ≤ 16) for full-model checks.
fn small_nta_config(rng: &mut SplitMix64) -> (NtaConfig, usize, usize) {
    let heads = [1, 2][rng.below(2)];
    let dh = [2, 4][rng.below(2)];
    let d = heads * dh;
    let grid_h = [4, 6][rng.below(2)];
    let grid_w = 4;
    let cfg = NtaConfig {
        dim_d: d,
        pooled_h: 2,
        pooled_w: dim(rng, 1, 2),
        heads,
        gdc_kernel: 3,
        gdc_dilation: dim(rng, 1, 2),
        dim_lang: [4, 8][rng.below(2)],
        eps: 1e-5,
        softmax_stage1: true,
    };
    (cfg, grid_h, grid_w)
}

/// Gradchecks full adaptor forward passes: every learnable parameter group
/// and the input tokens, against central differences, over `configs` seeded
/// configurations alternating batchnorm modes.
pub fn check_nta(seed: u64, configs: usize) -> Result<Vec<GradCheckEntry>> {
    let mut root = SplitMix64::new(seed ^ 0x6774_6e61_6f63_6866);
    let group_names: Vec<&'static str> = NtaParams::seeded(&NtaConfig::default(), 0)?
        .learnable()
        .iter()
        .map(|(n, _)| *n)
        .collect();
    let mut worst: Vec<f64> = vec![0.0; group_names.len() + 1];

    for round in 0..configs {
        let mut rng = root.split();
        let (cfg, grid_h, grid_w) = small_nta_config(&mut rng);
        let mode = if round % 2 == 0 { BnMode::Train } else { BnMode::Infer };
        let params = NtaParams::seeded(&cfg, rng.next_u64())?;
        let tokens = Tensor::rand_uniform(vec![grid_h, grid_w, cfg.dim_d], -1.0, 1.0, &mut rng);

        // Forward with gradients.
        let mut tape = Tape::new();
        let input = tape.leaf(tokens.clone(), true);
        let vars = params.leaves(&mut tape, true);
        let trace = nta_forward(&mut tape, input, &vars, &cfg, mode)?;
        let out_shape = tape.value(trace.output).shape().to_vec();
        let mut wrng = SplitMix64::new(0x7765_6967 ^ round as u64);
        let weights = Tensor::rand_uniform(out_shape, -1.0, 1.0, &mut wrng);
        let wv = tape.constant(weights.clone());
        let prod = tape.mul(trace.output, wv)?;
        let loss = tape.sum_all(prod);
        tape.backward(loss)?;

        let group_vars: Vec<Var> = vec![
            vars.ln1_gamma,
            vars.ln1_beta,
            vars.qkv_weight,
            vars.qkv_bias,
            vars.gdc_weight,
            vars.gdc_bias,
            vars.gdc_bn_gamma,
            vars.gdc_bn_beta,
            vars.convd_weight,
            vars.convd_bias,
            vars.convr_weight,
            vars.convr_bias,
            vars.ln2_gamma,
            vars.ln2_beta,
        ];
        debug_assert_eq!(group_vars.len(), group_names.len());

        // Finite differences, one parameter group at a time.
        for (gi, name) in group_names.iter().enumerate() {
            let autodiff = tape.grad_tensor(group_vars[gi]);
            let base = params
                .learnable()
                .into_iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .unwrap();
            let fd = finite_diff_grad(
                |probe| {
                    let mut p = params.clone();
                    *p.slot_mut(name).expect("known learnable name") = probe.clone();
                    eval_nta_loss(&p, &tokens, &cfg, mode, &weights)
                },
                &base,
                FD_EPS,
            )?;
            worst[gi] = worst[gi].max(max_rel_err(&autodiff, &fd));
        }

        // And the input tokens.
        let autodiff = tape.grad_tensor(input);
        let fd = finite_diff_grad(
            |probe| eval_nta_loss(&params, probe, &cfg, mode, &weights),
            &tokens,
            FD_EPS,
        )?;
        let last = worst.len() - 1;
        worst[last] = worst[last].max(max_rel_err(&autodiff, &fd));
    }

    let mut entries: Vec<GradCheckEntry> = group_names
        .iter()
        .zip(&worst)
        .map(|(n, &e)| GradCheckEntry {
            name: (*n).to_string(),
            max_rel_err: e,
        })
        .collect();
    entries.push(GradCheckEntry {
        name: "tokens".to_string(),
        max_rel_err: worst[worst.len() - 1],
    });
    Ok(entries)
}

fn eval_nta_loss(
    params: &NtaParams,
    tokens: &Tensor,
    cfg: &NtaConfig,
    mode: BnMode,
    weights: &Tensor,
) -> Result<f64> {
    let mut tape = Tape::new();
    let input = tape.constant(tokens.clone());
    let vars = params.leaves(&mut tape, false);
    let trace = nta_forward(&mut tape, input, &vars, cfg, mode)?;
    let wv = tape.constant(weights.clone());
    let prod = tape.mul(trace.output, wv)?;
    let loss = tape.sum_all(prod);
    tape.value(loss).item()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_match_finite_differences() {
        for entry in check_primitives(0x5eed, 4).unwrap() {
            assert!(
                entry.max_rel_err <= 1e-4,
                "{} has rel err {}",
                entry.name,
                entry.max_rel_err
            );
        }
    }

    #[test]
    fn nta_forward_matches_finite_differences() {
        for entry in check_nta(7, 2).unwrap() {
            assert!(
                entry.max_rel_err <= 1e-4,
                "{} has rel err {}",
                entry.name,
                entry.max_rel_err
            );
        }
    }
}
