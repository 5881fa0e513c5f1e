//! Command-line front end: dataset synthesis, training, evaluation,
//! inference, benchmarks, and a gradient audit. Every failure prints one
//! machine-parsable JSON line to stderr and exits nonzero.

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use vimcan::bench::{bench_csv, bench_memory, bench_throughput, BenchRow, BenchVariant};
use vimcan::checkpoint::{load_checkpoint, save_checkpoint};
use vimcan::dataset::{load_dataset, save_dataset, Sequence};
use vimcan::metrics::{csv_header, csv_row, MetricReport};
use vimcan::model::{finite_difference_audit, init_model, ModelConfig, VimcanModel};
use vimcan::params::Ctx;
use vimcan::skeleton::JOINT_COUNT;
use vimcan::ssm::T_MAX;
use vimcan::tensor::Tensor;
use vimcan::train::{evaluate, evaluate_per_sequence, train, TrainConfig};

#[derive(Parser)]
#[command(name = "vimcan", version, about = "Pose estimation from 2D keypoints and IMU streams")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic paired dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON file with "model" and/or "train" sections; defaults apply.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint against a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Report file; .json for the aggregate, .csv for per-sequence rows.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run a checkpoint over a dataset and dump predictions as JSON lines.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Peak-memory or throughput measurements.
    Bench {
        #[arg(long, value_enum, default_value_t = BenchMode::Memory)]
        mode: BenchMode,
        #[arg(long, value_delimiter = ',', default_value = "64,128,256,512")]
        lengths: Vec<usize>,
        #[arg(long, value_enum, default_value_t = VariantArg::Both)]
        variant: VariantArg,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        runs: usize,
        /// Model config for fps mode; tiny demo config when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare reverse-mode gradients against central differences.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = Scale::Tiny)]
        scale: Scale,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BenchMode {
    Memory,
    Fps,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    Ssm,
    Attention,
    Both,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Scale {
    Tiny,
    Small,
}

/// On-disk config: both sections optional, absent fields fall back to the
/// defaults, so `{}` is a valid config file.
#[derive(Default, Serialize, Deserialize)]
struct AppConfig {
    #[serde(default)]
    model: Option<ModelConfig>,
    #[serde(default)]
    train: Option<TrainConfig>,
}

struct Failure {
    kind: &'static str,
    message: String,
}

impl Failure {
    fn new(kind: &'static str, e: impl std::fmt::Display) -> Failure {
        Failure { kind, message: e.to_string() }
    }
}

macro_rules! ctx_err {
    ($kind:expr) => {
        |e| Failure::new($kind, e)
    };
}

fn read_config(path: &Option<PathBuf>) -> Result<(ModelConfig, TrainConfig), Failure> {
    match path {
        None => Ok((ModelConfig::default(), TrainConfig::default())),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(ctx_err!("io"))?;
            let app: AppConfig = serde_json::from_str(&text).map_err(ctx_err!("config"))?;
            Ok((app.model.unwrap_or_default(), app.train.unwrap_or_default()))
        }
    }
}

fn load_model(path: &Path) -> Result<VimcanModel, Failure> {
    load_checkpoint(path).map_err(ctx_err!("checkpoint"))
}

fn load_data(path: &Path) -> Result<Vec<Sequence>, Failure> {
    load_dataset(path).map_err(ctx_err!("dataset"))
}

#[derive(Serialize)]
struct EvalReport<'a> {
    aggregate: &'a MetricReport,
    per_sequence: Vec<SequenceReport<'a>>,
}

#[derive(Serialize)]
struct SequenceReport<'a> {
    id: &'a str,
    #[serde(flatten)]
    report: &'a MetricReport,
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Synth { out, count, len, seed, noise } => {
            if count == 0 {
                return Err(Failure::new("usage", "count must be positive"));
            }
            let mut seqs = Vec::with_capacity(count);
            for i in 0..count {
                seqs.push(
                    vimcan::synth::synth_sequence(seed + i as u64, len, noise)
                        .map_err(ctx_err!("synth"))?,
                );
            }
            save_dataset(&out, &seqs).map_err(ctx_err!("dataset"))?;
            println!(
                "{}",
                serde_json::json!({"saved": out, "count": count, "frames_each": len})
            );
            Ok(())
        }
        Cmd::Train { data, config, out, seed } => {
            let (model_cfg, mut train_cfg) = read_config(&config)?;
            if let Some(s) = seed {
                train_cfg.seed = s;
            }
            let data = load_data(&data)?;
            let mut model =
                init_model(&model_cfg, train_cfg.seed).map_err(ctx_err!("model"))?;
            let log = train(&mut model, &data, &train_cfg).map_err(ctx_err!("train"))?;
            for (e, (mean, lr)) in log.epoch_mean.iter().zip(&log.lr).enumerate() {
                println!("{}", serde_json::json!({"epoch": e, "mean_loss": mean, "lr": lr}));
            }
            save_checkpoint(&model, &out).map_err(ctx_err!("checkpoint"))?;
            println!(
                "{}",
                serde_json::json!({
                    "saved": out,
                    "params": model.count_params(),
                    "final_loss": log.epoch_mean.last(),
                })
            );
            Ok(())
        }
        Cmd::Eval { data, ckpt, report } => {
            let model = load_model(&ckpt)?;
            let data = load_data(&data)?;
            let aggregate = evaluate(&model, &data).map_err(ctx_err!("eval"))?;
            println!("{}", serde_json::to_string(&aggregate).map_err(ctx_err!("encode"))?);
            if let Some(path) = report {
                let per = evaluate_per_sequence(&model, &data).map_err(ctx_err!("eval"))?;
                let text = if path.extension().is_some_and(|e| e == "csv") {
                    let mut s = csv_header();
                    s.push('\n');
                    for (id, r) in &per {
                        s.push_str(&csv_row(id, r));
                        s.push('\n');
                    }
                    s
                } else {
                    let doc = EvalReport {
                        aggregate: &aggregate,
                        per_sequence: per
                            .iter()
                            .map(|(id, r)| SequenceReport { id, report: r })
                            .collect(),
                    };
                    serde_json::to_string_pretty(&doc).map_err(ctx_err!("encode"))?
                };
                std::fs::write(&path, text).map_err(ctx_err!("io"))?;
            }
            Ok(())
        }
        Cmd::Infer { data, ckpt, out } => {
            let model = load_model(&ckpt)?;
            let data = load_data(&data)?;
            #[derive(Serialize)]
            struct Pred {
                id: String,
                #[serde(rename = "T")]
                frames: usize,
                pred3d: Vec<Vec<[f64; 3]>>,
            }
            let mut preds = Vec::with_capacity(data.len());
            for s in &data {
                let kps = Tensor::from_vec(
                    &[s.frames, JOINT_COUNT, 2],
                    s.keypoints.clone(),
                )
                .map_err(ctx_err!("dataset"))?;
                let imu =
                    Tensor::from_vec(&[s.frames, vimcan::skeleton::IMU_COUNT, 4], s.imu.clone())
                        .map_err(ctx_err!("dataset"))?;
                let mut ctx = Ctx::frozen(&model.arena);
                let y = model.forward(&mut ctx, &kps, &imu).map_err(ctx_err!("model"))?;
                let d = y.data();
                let frames = (0..s.frames)
                    .map(|t| {
                        (0..JOINT_COUNT)
                            .map(|j| {
                                let o = (t * JOINT_COUNT + j) * 3;
                                [d[o], d[o + 1], d[o + 2]]
                            })
                            .collect()
                    })
                    .collect();
                preds.push(Pred { id: s.id.clone(), frames: s.frames, pred3d: frames });
            }
            let mut text = String::new();
            for p in &preds {
                text.push_str(&serde_json::to_string(p).map_err(ctx_err!("encode"))?);
                text.push('\n');
            }
            std::fs::write(&out, text).map_err(ctx_err!("io"))?;
            println!("{}", serde_json::json!({"saved": out, "sequences": preds.len()}));
            Ok(())
        }
        Cmd::Bench { mode, lengths, variant, csv, runs, config } => {
            if lengths.is_empty() {
                return Err(Failure::new("usage", "need at least one length"));
            }
            let rows: Vec<BenchRow> = match mode {
                BenchMode::Memory => {
                    let variants = match variant {
                        VariantArg::Ssm => vec![BenchVariant::Ssm],
                        VariantArg::Attention => vec![BenchVariant::AttentionTemporal],
                        VariantArg::Both => {
                            vec![BenchVariant::Ssm, BenchVariant::AttentionTemporal]
                        }
                    };
                    bench_memory(&lengths, &variants, runs).map_err(ctx_err!("bench"))?
                }
                BenchMode::Fps => {
                    if let Some(&bad) = lengths.iter().find(|&&t| t > T_MAX || t < 2) {
                        return Err(Failure::new(
                            "usage",
                            format!("fps mode length {bad} outside [2, {T_MAX}]"),
                        ));
                    }
                    let model_cfg = match &config {
                        Some(_) => read_config(&config)?.0,
                        None => ModelConfig::tiny(),
                    };
                    let model = init_model(&model_cfg, 0).map_err(ctx_err!("model"))?;
                    let mut rows = Vec::new();
                    for &t in &lengths {
                        let fps =
                            bench_throughput(&model, t, runs.max(3)).map_err(ctx_err!("bench"))?;
                        rows.push(BenchRow {
                            variant: "model".into(),
                            t,
                            peak_bytes: 0,
                            wall_ms: 1e3 * t as f64 / fps,
                            fps,
                            oom: false,
                        });
                    }
                    rows
                }
            };
            let text = bench_csv(&rows);
            match csv {
                Some(path) => {
                    std::fs::write(&path, &text).map_err(ctx_err!("io"))?;
                    println!("{}", serde_json::json!({"saved": path, "rows": rows.len()}));
                }
                None => print!("{text}"),
            }
            Ok(())
        }
        Cmd::Gradcheck { scale, tol } => {
            let (cfg, t) = match scale {
                Scale::Tiny => (ModelConfig::tiny(), 5),
                Scale::Small => (
                    ModelConfig {
                        d_e: 16,
                        d_g: 32,
                        global_blocks: 2,
                        heads: 4,
                        state: 8,
                        ..ModelConfig::tiny()
                    },
                    9,
                ),
            };
            let audit = finite_difference_audit(&cfg, t, 2e-5).map_err(ctx_err!("gradcheck"))?;
            println!(
                "{}",
                serde_json::json!({
                    "max_rel_err": audit.fd.max_rel_err,
                    "coords_checked": audit.fd.coords_checked,
                    "production_gap": audit.production_gap,
                    "tol": tol,
                })
            );
            if audit.fd.max_rel_err > tol {
                return Err(Failure::new(
                    "gradcheck",
                    format!("max relative error {} exceeds {tol}", audit.fd.max_rel_err),
                ));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!(
                "{}",
                serde_json::json!({"error": f.kind, "message": f.message})
            );
            ExitCode::FAILURE
        }
    }
}
