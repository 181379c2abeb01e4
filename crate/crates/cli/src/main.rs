//! Single executable multiplexing the pipeline subcommands.
//!
//! Exit codes: 0 on success, 1 on contract/runtime errors, 2 on usage
//! errors (clap's default). Diagnostics go to stderr; results go to stdout
//! or to files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use v2l_core::bench::{emit_csv, emit_json, run_scaling_bench, AdaptorKind, BenchConfig};
use v2l_core::config::RunConfig;
use v2l_core::frontend::encode_image;
use v2l_core::gradcheck::{check_nta, check_primitives};
use v2l_core::io::{ntat, ppm};
use v2l_core::metrics::{
    bleu_n, cider, corpus_stats, cwr, load_corpus_jsonl, rouge, tgc, Corpus, DocFreq,
    RougeVariant,
};
use v2l_core::nta::{nta_forward_infer, NtaParams};
use v2l_core::synth::synth_dataset;
use v2l_core::train::{train_two_stage, PipelineParams, TrainSchedule};

#[derive(Parser)]
#[command(name = "v2l", version, about = "Desk-scale vision-to-language pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Adaptive slicing, patch encoding and token compression.
    #[command(subcommand)]
    Frontend(FrontendCmd),
    /// Pooled-query adaptor: forward, gradient check, scaling bench.
    #[command(subcommand)]
    Nta(NtaCmd),
    /// Training runs.
    #[command(subcommand)]
    Train(TrainCmd),
    /// Corpus and caption metrics.
    #[command(subcommand)]
    Metrics(MetricsCmd),
}

#[derive(Args)]
struct ConfigOpt {
    /// JSON run config; defaults to the reference pipeline.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigOpt {
    fn load(&self, default: RunConfig) -> anyhow::Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => default,
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum FrontendCmd {
    /// Slice an image and emit per-slice compressed token tensors.
    Slice {
        /// Input image (binary PPM, P6, maxval 255).
        #[arg(long)]
        image: PathBuf,
        #[command(flatten)]
        config: ConfigOpt,
        /// Directory for the slice_###.ntat outputs.
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum NtaCmd {
    /// Run the adaptor on a compressed token grid.
    Forward {
        /// Token grid in NTAT format (h×w×d).
        #[arg(long)]
        tokens: PathBuf,
        /// NTAB parameter bundle; seeded from the config when omitted.
        #[arg(long)]
        params: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigOpt,
        /// Output tensor path.
        #[arg(long, default_value = "nta_out.ntat")]
        out: PathBuf,
        /// Write the seeded parameters to this NTAB bundle.
        #[arg(long)]
        save_params: Option<PathBuf>,
    },
    /// Compare recorded gradients against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random configurations per check.
        #[arg(long, default_value_t = 20)]
        configs: usize,
    },
    /// Analytic FLOPs and wall-time scaling of the attention cores.
    Bench {
        /// Comma-separated token counts.
        #[arg(long, default_value = "256,512,1024,2048,4096")]
        n_list: String,
        #[arg(long, default_value = "bench.csv")]
        out: PathBuf,
        /// Emit JSON instead of CSV.
        #[arg(long)]
        json: bool,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum TrainCmd {
    /// Two-stage training on the procedural shape-caption task.
    Toy {
        /// JSON run config; defaults to the built-in toy configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum MetricsCmd {
    /// Corpus complexity and statistics from a JSON-lines file.
    Corpus {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Caption quality of predictions against references, as CSV rows.
    Captions {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Frontend(FrontendCmd::Slice { image, config, out_dir }) => {
            let config = config.load(RunConfig::reference())?;
            cmd_slice(&image, &config, &out_dir)
        }
        Command::Nta(NtaCmd::Forward { tokens, params, config, out, save_params }) => {
            let config = config.load(RunConfig::reference())?;
            cmd_forward(&tokens, params.as_deref(), &config, &out, save_params.as_deref())
        }
        Command::Nta(NtaCmd::Gradcheck { seed, configs }) => cmd_gradcheck(seed, configs),
        Command::Nta(NtaCmd::Bench { n_list, out, json, trials, seed }) => {
            cmd_bench(&n_list, &out, json, trials, seed)
        }
        Command::Train(TrainCmd::Toy { config, seed, out }) => {
            let opt = ConfigOpt { config, seed };
            let config = opt.load(RunConfig::toy())?;
            cmd_train_toy(&config, &out)
        }
        Command::Metrics(MetricsCmd::Corpus { input }) => cmd_metrics_corpus(&input),
        Command::Metrics(MetricsCmd::Captions { pred, reference }) => {
            cmd_metrics_captions(&pred, &reference)
        }
    }
}

fn cmd_slice(image: &Path, config: &RunConfig, out_dir: &Path) -> anyhow::Result<()> {
    let img = ppm::read_ppm(image).with_context(|| format!("reading {}", image.display()))?;
    let (grid, tokens) = encode_image(&img, &config.frontend, config.seed)?;
    std::fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    for (i, t) in tokens.iter().enumerate() {
        let path = out_dir.join(format!("slice_{i:03}.ntat"));
        ntat::write_tensor(&path, &t.values)?;
        files.push(path.display().to_string());
    }
    let first = &tokens[0];
    let summary = serde_json::json!({
        "rows_m": grid.rows_m,
        "cols_n": grid.cols_n,
        "slice_count": grid.slice_count(),
        "tokens_per_slice": first.token_count(),
        "grid_h": first.grid_h,
        "grid_w": first.grid_w,
        "dim_d": first.dim_d,
        "files": files,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_forward(
    tokens_path: &Path,
    params_path: Option<&Path>,
    config: &RunConfig,
    out: &Path,
    save_params: Option<&Path>,
) -> anyhow::Result<()> {
    let values = ntat::read_tensor(tokens_path)
        .with_context(|| format!("reading {}", tokens_path.display()))?;
    let tokens = v2l_core::frontend::PatchTokens::new(values)?;
    let params = match params_path {
        Some(path) => {
            let entries = ntat::read_bundle(path)?;
            NtaParams::from_bundle(&entries, &config.nta)?
        }
        None => NtaParams::seeded(&config.nta, config.seed)?,
    };
    if let Some(path) = save_params {
        ntat::write_bundle(path, &params.to_bundle())?;
    }
    let output = nta_forward_infer(&tokens, &params, &config.nta)?;
    ntat::write_tensor(out, &output)?;
    let summary = serde_json::json!({
        "input_tokens": tokens.token_count(),
        "output_tokens": output.shape()[0],
        "dim_lang": output.shape()[1],
        "out": out.display().to_string(),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_gradcheck(seed: u64, configs: usize) -> anyhow::Result<()> {
    let tolerance = 1e-4;
    let mut worst = 0.0_f64;
    println!("primitive gradients ({configs} configs each):");
    for entry in check_primitives(seed, configs)? {
        println!("  {:<28} {:.3e}", entry.name, entry.max_rel_err);
        worst = worst.max(entry.max_rel_err);
    }
    println!("adaptor parameter groups ({configs} configs):");
    for entry in check_nta(seed, configs)? {
        println!("  {:<28} {:.3e}", entry.name, entry.max_rel_err);
        worst = worst.max(entry.max_rel_err);
    }
    if worst <= tolerance {
        println!("gradcheck ok: max rel err {worst:.3e} <= {tolerance:.0e}");
        Ok(())
    } else {
        Err(anyhow!("gradcheck FAILED: max rel err {worst:.3e} > {tolerance:.0e}"))
    }
}

fn cmd_bench(n_list: &str, out: &Path, json: bool, trials: usize, seed: u64) -> anyhow::Result<()> {
    let sizes: Vec<usize> = n_list
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|e| anyhow!("bad N {s:?}: {e}")))
        .collect::<anyhow::Result<_>>()?;
    let cfg = BenchConfig {
        trials,
        seed,
        ..BenchConfig::default()
    };
    let report = run_scaling_bench(
        &[AdaptorKind::PooledCore, AdaptorKind::VanillaCore],
        &sizes,
        &cfg,
    )?;
    let payload = if json { emit_json(&report)? } else { emit_csv(&report) };
    std::fs::write(out, payload)?;
    for slope in &report.slopes {
        println!(
            "{:<14} analytic_slope={:.3} wall_slope={:.3}",
            slope.module, slope.analytic_slope, slope.wall_slope
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_train_toy(config: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let dataset = synth_dataset(config.train.pairs, &config.frontend, config.seed)?;
    if dataset.vocab.len() != config.lm.vocab_size {
        return Err(anyhow!(
            "config vocab_size {} does not match the synthetic vocabulary ({})",
            config.lm.vocab_size,
            dataset.vocab.len()
        ));
    }
    let mut params = PipelineParams::seeded(&config.frontend, &config.nta, &config.lm, config.seed)?;
    let schedule = TrainSchedule {
        stage1_steps: config.train.stage1_steps,
        stage2_steps: config.train.stage2_steps,
        batch_size: config.train.batch_size,
        weight_decay: config.train.weight_decay,
    };
    let report = train_two_stage(
        &mut params,
        &dataset,
        &schedule,
        &config.nta,
        &config.lm,
        config.seed,
    )?;
    std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
    println!(
        "trained {} steps, final accuracy {:.4}, report {}",
        report.stage_losses.len(),
        report.accuracy,
        out.display()
    );
    Ok(())
}

fn cmd_metrics_corpus(input: &Path) -> anyhow::Result<()> {
    let samples = load_corpus_jsonl(input)
        .with_context(|| format!("reading {}", input.display()))?;
    let corpus = Corpus::from_samples(&samples);
    if corpus.is_empty() {
        return Err(anyhow!("empty corpus in {}", input.display()));
    }
    let stats = corpus_stats(&corpus);
    let summary = serde_json::json!({
        "captions": corpus.len(),
        "tgc": tgc(&corpus)?,
        "cwr": cwr(&corpus)?,
        "length_histogram": stats.length_histogram,
        "env_cooccurrence": stats.env_cooccurrence,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_metrics_captions(pred: &Path, reference: &Path) -> anyhow::Result<()> {
    let preds = load_corpus_jsonl(pred)?;
    let refs = load_corpus_jsonl(reference)?;
    let mut ref_map: BTreeMap<&str, Vec<Vec<String>>> = BTreeMap::new();
    for sample in &refs {
        ref_map
            .entry(sample.image_id.as_str())
            .or_default()
            .push(v2l_core::metrics::tokenize(&sample.caption));
    }
    let mut cands = Vec::new();
    let mut ref_sets = Vec::new();
    for sample in &preds {
        let references = ref_map.get(sample.image_id.as_str()).ok_or_else(|| {
            anyhow!("no reference for image_id {:?}", sample.image_id)
        })?;
        cands.push(v2l_core::metrics::tokenize(&sample.caption));
        ref_sets.push(references.clone());
    }
    if cands.is_empty() {
        return Err(anyhow!("no predictions in {}", pred.display()));
    }

    let mean = |f: &dyn Fn(&[String], &[Vec<String>]) -> anyhow::Result<f64>| -> anyhow::Result<f64> {
        let mut total = 0.0;
        for (c, r) in cands.iter().zip(&ref_sets) {
            total += f(c, r)?;
        }
        Ok(total / cands.len() as f64)
    };

    let mut rows: Vec<(String, f64)> = Vec::new();
    for n in 1..=3usize {
        let v = mean(&|c, r| Ok(bleu_n(c, r, n)?.score))?;
        rows.push((format!("bleu-{n}"), v));
    }
    for (label, variant) in [
        ("rouge-1", RougeVariant::Rouge1),
        ("rouge-2", RougeVariant::Rouge2),
        ("rouge-l", RougeVariant::RougeL),
    ] {
        // Multiple references: best F1 per image.
        let v = mean(&|c, r| {
            let mut best = 0.0_f64;
            for reference in r {
                best = best.max(rouge(c, reference, variant)?.f1);
            }
            Ok(best)
        })?;
        rows.push((label.to_string(), v));
    }
    let df = DocFreq::from_references(&ref_sets);
    rows.push(("cider".to_string(), cider(&cands, &ref_sets, &df)?));

    println!("metric,value");
    for (name, value) in rows {
        println!("{name},{value:.6}");
    }
    Ok(())
}
