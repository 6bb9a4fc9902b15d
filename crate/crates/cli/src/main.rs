//! `streamforge` — pipeline front end.
//!
//! Subcommands cover the four training stages plus generation, evaluation,
//! gradient verification, and the runtime bench. Exit codes: 0 success,
//! 2 config error, 3 precondition error, 4 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use streamforge_core::checkpoint::RawCheckpoint;
use streamforge_core::config::RunConfig;
use streamforge_core::diffcore::{
    micro_model_check, op_battery, three_layer_check, three_layer_check_f32, Precision,
};
use streamforge_core::model::RoleTag;
use streamforge_core::pipeline;
use streamforge_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "streamforge",
    about = "Desk-scale streaming video generation: flow-matching teacher, \
             few-step distillation, ODE-trajectory init, reward fine-tuning."
)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: runs/<command>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Element precision override.
    #[arg(long, global = true, value_parser = ["f32", "f64"])]
    precision: Option<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the bidirectional flow-matching teacher.
    TrainTeacher,
    /// Distill the teacher into a few-step generator.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Harvest teacher trajectories and initialize the causal student.
    OdeInit {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        generator: PathBuf,
    },
    /// Reward-guided fine-tuning with chunk-wise self-rollout.
    RewardFinetune {
        #[arg(long)]
        student: PathBuf,
    },
    /// Render prompts (JSON lines) into PPM frame sequences.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
    },
    /// Score a checkpoint (internal eval set) or exported frame sequences.
    Evaluate {
        #[arg(long, conflicts_with = "frames")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        frames: Option<PathBuf>,
    },
    /// Verify backward gradients against finite differences.
    GradCheck,
    /// Measure streaming throughput and first-chunk latency.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let code = match err {
                Error::Config(_) => 2,
                Error::Precondition(_) => 3,
                Error::Numerical(_) | Error::NonFinite { .. } => 4,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(precision) = &cli.precision {
        cfg.precision = precision.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli, default_name: &str) -> PathBuf {
    cli.out
        .clone()
        .unwrap_or_else(|| Path::new("runs").join(default_name))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let precision = cfg.precision()?;
    match &cli.cmd {
        Cmd::TrainTeacher => {
            let out = out_dir(&cli, "teacher");
            let path = pipeline::with_precision(
                precision,
                || pipeline::train_teacher::<f32>(&cfg, &out),
                || pipeline::train_teacher::<f64>(&cfg, &out),
            )?;
            println!("teacher checkpoint: {}", path.display());
        }
        Cmd::Distill { teacher } => {
            let out = out_dir(&cli, "distill");
            let path = pipeline::with_precision(
                precision,
                || pipeline::run_distill::<f32>(&cfg, teacher, &out),
                || pipeline::run_distill::<f64>(&cfg, teacher, &out),
            )?;
            println!("generator checkpoint: {}", path.display());
        }
        Cmd::OdeInit { teacher, generator } => {
            let out = out_dir(&cli, "ode-init");
            let path = pipeline::with_precision(
                precision,
                || pipeline::run_ode_init::<f32>(&cfg, teacher, generator, &out),
                || pipeline::run_ode_init::<f64>(&cfg, teacher, generator, &out),
            )?;
            println!("student checkpoint: {}", path.display());
        }
        Cmd::RewardFinetune { student } => {
            let out = out_dir(&cli, "reward");
            let path = pipeline::with_precision(
                precision,
                || pipeline::run_reward_finetune::<f32>(&cfg, student, &out),
                || pipeline::run_reward_finetune::<f64>(&cfg, student, &out),
            )?;
            println!("final checkpoint: {}", path.display());
        }
        Cmd::Generate { ckpt, prompts } => {
            let out = out_dir(&cli, "generate");
            let skipped = pipeline::with_precision(
                precision,
                || pipeline::generate::<f32>(&cfg, ckpt, prompts, &out),
                || pipeline::generate::<f64>(&cfg, ckpt, prompts, &out),
            )?;
            for s in &skipped {
                eprintln!("skipped prompt: {s}");
            }
            println!("frames written to {}", out.display());
        }
        Cmd::Evaluate { ckpt, frames } => {
            let out = out_dir(&cli, "evaluate");
            let report = match (ckpt, frames) {
                (Some(ckpt), None) => pipeline::with_precision(
                    precision,
                    || pipeline::evaluate_checkpoint::<f32>(&cfg, ckpt, &out),
                    || pipeline::evaluate_checkpoint::<f64>(&cfg, ckpt, &out),
                )?,
                (None, Some(frames)) => pipeline::with_precision(
                    precision,
                    || pipeline::evaluate_frames::<f32>(&cfg, frames, &out),
                    || pipeline::evaluate_frames::<f64>(&cfg, frames, &out),
                )?,
                _ => {
                    return Err(Error::Config(
                        "evaluate needs exactly one of --ckpt or --frames".into(),
                    ))
                }
            };
            println!(
                "total {:.4}  quality {:.4}  semantic {:.4}  ({} clips)",
                report.total_score, report.quality_score, report.semantic_score, report.clip_count
            );
            println!("report written to {}", out.join("report.json").display());
        }
        Cmd::GradCheck => {
            let mut worst: f64 = 0.0;
            for (name, report) in op_battery::<f64>(cfg.seed, 1e-5)? {
                println!("op {:<14} max rel err {:.3e}", name, report.max_rel_err);
                worst = worst.max(report.max_rel_err);
            }
            let micro = micro_model_check::<f64>(cfg.seed, 1e-5)?;
            println!("micro model     max rel err {:.3e}", micro.max_rel_err);
            worst = worst.max(micro.max_rel_err);
            let three64 = three_layer_check::<f64>(6, 1e-5)?;
            println!("3-layer f64     max rel err {:.3e}", three64.max_rel_err);
            let three32 = three_layer_check_f32(6)?;
            println!("3-layer f32     max rel err {:.3e}", three32.max_rel_err);
            if worst >= 1e-5 || three64.max_rel_err >= 1e-5 || three32.max_rel_err >= 1e-3 {
                return Err(Error::Numerical(format!(
                    "gradient check exceeded tolerance (worst {:.3e})",
                    worst
                )));
            }
            println!("all gradient checks passed");
        }
        Cmd::Bench { ckpt } => {
            let out = out_dir(&cli, "bench");
            let report = match precision {
                Precision::F32 => bench::<f32>(&cfg, ckpt)?,
                Precision::F64 => bench::<f64>(&cfg, ckpt)?,
            };
            std::fs::create_dir_all(&out)?;
            std::fs::write(
                out.join("bench.json"),
                serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?,
            )?;
            println!(
                "throughput {:.2} fps  first-chunk latency {:.4} s  cached {:.3}s vs uncached {:.3}s  spread {:.1}%{}",
                report.throughput_fps,
                report.first_chunk_latency_s,
                report.full_clip_seconds,
                report.uncached_seconds,
                report.relative_spread * 100.0,
                if report.reliable { "" } else { "  (unreliable: timer resolution)" }
            );
        }
    }
    Ok(())
}

fn bench<S: streamforge_core::diffcore::Scalar>(
    cfg: &RunConfig,
    ckpt: &Path,
) -> Result<streamforge_core::evalkit::RuntimeReport> {
    use streamforge_core::checkpoint::without_prefixes;
    use streamforge_core::model::{AttentionMode, DitModel};
    let raw = RawCheckpoint::read(ckpt)?;
    if !matches!(raw.manifest.role, RoleTag::Student | RoleTag::Final) {
        return Err(Error::Precondition(format!(
            "bench needs a streaming checkpoint (student or final), got '{}'",
            raw.manifest.role
        )));
    }
    let meta = raw
        .manifest
        .meta
        .get("model_config")
        .ok_or_else(|| Error::Format("checkpoint missing model_config".into()))?;
    let mut mcfg: streamforge_core::model::ModelConfig =
        serde_json::from_str(meta).map_err(|e| Error::Format(e.to_string()))?;
    mcfg.mode = AttentionMode::Causal;
    let model = DitModel::new(mcfg)?;
    let bundle: streamforge_core::model::ParamStore<S> = raw.to_store()?;
    let params = without_prefixes(&bundle, &["ema/", "fake/"], raw.manifest.role);
    pipeline::bench_runtime(cfg, &model, &params)
}
