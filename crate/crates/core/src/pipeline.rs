//! Stage orchestration: teacher training, distillation, ODE-trajectory
//! initialization, reward fine-tuning, generation, and evaluation.
//!
//! Each stage validates its input checkpoint's role tag, echoes the
//! resolved config into the output directory before any compute, writes a
//! JSON-lines log (one object per step), and saves a deterministic
//! checkpoint: rerunning a stage with the same config and seed reproduces
//! the checkpoint bit for bit.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::arinit::{harvest_trajectories, ode_init_train, OdeTrajectorySet};
use crate::checkpoint::{extract_prefixed, merge_prefixed, without_prefixes, RawCheckpoint};
use crate::config::RunConfig;
use crate::diffcore::{Precision, Scalar, Tape, Tensor};
use crate::distill::{
    dmd_generator_step, ema_update, fake_score_step, DistillState, DmdBatchItem, FewStepGenerator,
    VelocityScore,
};
use crate::evalkit::{evaluate_clips, measure_runtime, MetricsReport, RuntimeReport};
use crate::flowmatch::{fm_loss, FmSample};
use crate::model::{AttentionMode, DitModel, ParamStore, RoleTag};
use crate::optim::AdamW;
use crate::reward::{
    mean_reward_on_set, reward_finetune, DistillSupport, RewardModel, RewardStrategy,
};
use crate::rollout::{few_step_generate, generate_clip_causal, ode_clip_teacher};
use crate::synthvid::{export_clip, import_clip, render_clip, sample_prompt, PromptSpec, VideoClip};
use crate::{derive_seed, Error, Result};

/// Append-only JSON-lines log, one object per line.
pub struct JsonlLog {
    file: std::io::BufWriter<std::fs::File>,
}

impl JsonlLog {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(JsonlLog {
            file: std::io::BufWriter::new(std::fs::File::create(path)?),
        })
    }

    pub fn log<T: Serialize>(&mut self, record: &T) {
        if let Ok(line) = serde_json::to_string(record) {
            let _ = writeln!(self.file, "{}", line);
        }
    }

    pub fn finish(mut self) {
        let _ = self.file.flush();
    }
}

/// Reject unwritable output directories before any compute happens.
fn prepare_out_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)
        .map_err(|e| Error::Config(format!("output dir {}: {}", out.display(), e)))?;
    let probe = out.join(".write-probe");
    std::fs::write(&probe, b"ok")
        .map_err(|e| Error::Config(format!("output dir {} not writable: {}", out.display(), e)))?;
    let _ = std::fs::remove_file(probe);
    Ok(())
}

fn load_model_from(ck: &RawCheckpoint, mode: AttentionMode) -> Result<DitModel> {
    let raw = ck
        .manifest
        .meta
        .get("model_config")
        .ok_or_else(|| Error::Format("checkpoint missing model_config".into()))?;
    let mut cfg: crate::model::ModelConfig =
        serde_json::from_str(raw).map_err(|e| Error::Format(e.to_string()))?;
    cfg.mode = mode;
    DitModel::new(cfg)
}

fn model_meta(model: &DitModel, cfg: &RunConfig) -> BTreeMap<String, String> {
    let mut meta = BTreeMap::new();
    meta.insert(
        "model_config".to_string(),
        serde_json::to_string(&model.cfg).expect("config serializes"),
    );
    meta.insert("master_seed".to_string(), cfg.seed.to_string());
    meta
}

// ── Teacher training ─────────────────────────────────────────────────

#[derive(Serialize)]
struct TeacherStepLog {
    step: usize,
    fm_loss: f64,
    wallclock: f64,
}

/// Flow-matching training of the bidirectional teacher on a pre-rendered
/// prompt pool. Writes `teacher.sfck` and `teacher_log.jsonl`.
pub fn train_teacher<S: Scalar>(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    prepare_out_dir(out)?;
    cfg.echo_into(out)?;
    let model = DitModel::new(cfg.model_config(AttentionMode::Bidirectional)?)?;
    let mut params =
        model.init_params::<S>(RoleTag::Teacher, derive_seed(cfg.seed, "teacher-init", 0));
    let mut opt = AdamW::new(cfg.adamw(cfg.teacher_lr));

    // Fixed clip pool standing in for the corpus.
    let pool: Vec<VideoClip<S>> = (0..cfg.dataset_clips)
        .map(|i| {
            let spec = sample_prompt(derive_seed(cfg.seed, "dataset/prompt", i as u64));
            render_clip(
                &spec,
                cfg.frames,
                cfg.height,
                cfg.width,
                derive_seed(cfg.seed, "dataset/clip", i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "teacher-train", 0));
    let mut log = JsonlLog::create(&out.join("teacher_log.jsonl"))?;
    let started = Instant::now();
    for step in 0..cfg.teacher_steps {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, &params)?;
        let batch: Vec<FmSample<S>> = (0..cfg.teacher_batch)
            .map(|_| {
                let clip = &pool[rng.gen_range(0..pool.len())];
                FmSample {
                    x0: Tensor::randn(&model.cfg.clip_shape(), &mut rng),
                    x1: clip.frames.clone(),
                    spec: clip.prompt,
                }
            })
            .collect();
        let loss = fm_loss(
            &mut tape,
            &|tape: &mut Tape<S>, x_t, t, spec: &PromptSpec| {
                model.forward_bidirectional(tape, &bound, x_t, t, spec)
            },
            &batch,
            &mut rng,
        )?;
        let value = tape.value(loss).scalar_value().to_f64();
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite flow-matching loss at step {step}"
            )));
        }
        let grads = tape.backward(loss)?.into_param_map();
        opt.step(&mut params, &grads)?;
        log.log(&TeacherStepLog {
            step,
            fm_loss: value,
            wallclock: started.elapsed().as_secs_f64(),
        });
    }
    log.finish();

    let ck = RawCheckpoint::from_store(
        &params,
        "train-teacher",
        cfg.teacher_steps as u64,
        false,
        model_meta(&model, cfg),
    )?;
    let path = out.join("teacher.sfck");
    ck.write(&path)?;
    Ok(path)
}

// ── Distillation ─────────────────────────────────────────────────────

#[derive(Serialize)]
struct DistillStepLog {
    step: usize,
    surrogate: f64,
    fake_loss: f64,
    skipped: bool,
    wallclock: f64,
}

/// DMD distillation of the teacher into a few-step generator. Writes
/// `generator.sfck` (with `ema/` and `fake/` sections) and
/// `distill_log.jsonl`.
pub fn run_distill<S: Scalar>(cfg: &RunConfig, teacher_ckpt: &Path, out: &Path) -> Result<PathBuf> {
    prepare_out_dir(out)?;
    cfg.echo_into(out)?;
    let teacher_raw = RawCheckpoint::read(teacher_ckpt)?;
    teacher_raw.expect_role(RoleTag::Teacher)?;
    let model = load_model_from(&teacher_raw, AttentionMode::Bidirectional)?;
    let teacher: ParamStore<S> = teacher_raw.to_store()?;

    let mut state = DistillState::from_teacher(
        &teacher,
        AdamW::new(cfg.adamw(cfg.distill_gen_lr)),
        AdamW::new(cfg.adamw(cfg.distill_fake_lr)),
    );
    let grid = cfg.time_grid()?;
    let schedule = cfg.schedule();
    let generator = FewStepGenerator {
        model: &model,
        grid: grid.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "distill", 0));
    let mut log = JsonlLog::create(&out.join("distill_log.jsonl"))?;
    let started = Instant::now();

    for step in 0..cfg.distill_gen_steps {
        let batch: Vec<DmdBatchItem<S>> = (0..cfg.distill_batch)
            .map(|i| DmdBatchItem {
                z: Tensor::randn(&model.cfg.clip_shape(), &mut rng),
                spec: sample_prompt(derive_seed(
                    cfg.seed,
                    "distill/prompt",
                    (step * cfg.distill_batch + i) as u64,
                )),
            })
            .collect();
        let report = {
            let real = VelocityScore {
                model: &model,
                params: &teacher,
                schedule: &schedule,
            };
            let fake = VelocityScore {
                model: &model,
                params: &state.fake,
                schedule: &schedule,
            };
            dmd_generator_step(
                &generator,
                &mut state.generator,
                &mut state.gen_opt,
                &real,
                &fake,
                &schedule,
                &batch,
                &mut rng,
            )?
        };
        ema_update(&mut state.ema, &state.generator, cfg.ema_decay)?;

        let mut fake_loss = f64::NAN;
        for _ in 0..cfg.distill_fake_ratio {
            fake_loss = fake_score_step(
                &generator,
                &state.generator,
                &model,
                &mut state.fake,
                &mut state.fake_opt,
                &schedule,
                &batch,
                &mut rng,
            )?;
        }
        state.step += 1;
        log.log(&DistillStepLog {
            step,
            surrogate: report.surrogate,
            fake_loss,
            skipped: report.skipped,
            wallclock: started.elapsed().as_secs_f64(),
        });
    }
    log.finish();

    let mut bundle = state.generator.clone();
    merge_prefixed(&mut bundle, "ema/", &state.ema)?;
    merge_prefixed(&mut bundle, "fake/", &state.fake)?;
    let mut meta = model_meta(&model, cfg);
    meta.insert("distill_step".to_string(), state.step.to_string());
    let ck = RawCheckpoint::from_store(&bundle, "distill", state.step, false, meta)?;
    let path = out.join("generator.sfck");
    ck.write(&path)?;
    Ok(path)
}

// ── ODE-trajectory initialization ────────────────────────────────────

#[derive(Serialize)]
struct OdeStepLog {
    step: usize,
    ode_loss: f64,
    wallclock: f64,
}

#[derive(Serialize)]
pub struct OdeInitSummary {
    pub initial_epoch_loss: f64,
    pub final_epoch_loss: f64,
    pub harvest_cache_hit: bool,
}

/// Harvest teacher trajectories (or reuse a persisted set with a matching
/// cache key) and initialize the causal student from the distilled
/// generator by trajectory regression. Writes `student.sfck`,
/// `trajectories.sfck`, `ode_log.jsonl`, and `ode_summary.json`.
pub fn run_ode_init<S: Scalar>(
    cfg: &RunConfig,
    teacher_ckpt: &Path,
    generator_ckpt: &Path,
    out: &Path,
) -> Result<PathBuf> {
    prepare_out_dir(out)?;
    cfg.echo_into(out)?;
    let teacher_raw = RawCheckpoint::read(teacher_ckpt)?;
    teacher_raw.expect_role(RoleTag::Teacher)?;
    let generator_raw = RawCheckpoint::read(generator_ckpt)?;
    generator_raw.expect_role(RoleTag::Generator)?;

    let teacher_model = load_model_from(&teacher_raw, AttentionMode::Bidirectional)?;
    let teacher: ParamStore<S> = teacher_raw.to_store()?;
    let student_model = load_model_from(&generator_raw, AttentionMode::Causal)?;
    let generator_bundle: ParamStore<S> = generator_raw.to_store()?;
    let mut student =
        without_prefixes(&generator_bundle, &["ema/", "fake/"], RoleTag::Student);

    let grid = cfg.time_grid()?;
    let harvest_seed = derive_seed(cfg.seed, "harvest", 0);
    let wanted_key = OdeTrajectorySet::<S>::cache_key(
        harvest_seed,
        cfg.harvest_count,
        &grid,
        cfg.teacher_sample_steps,
    );
    let traj_path = out.join("trajectories.sfck");
    let (set, cache_hit) = match RawCheckpoint::read(&traj_path)
        .ok()
        .and_then(|ck| OdeTrajectorySet::<S>::from_checkpoint(&ck).ok())
        .filter(|s| s.key() == wanted_key)
    {
        Some(set) => (set, true),
        None => {
            let set = harvest_trajectories(
                &teacher_model,
                &teacher,
                cfg.harvest_count,
                &grid,
                cfg.teacher_sample_steps,
                harvest_seed,
            )?;
            set.to_checkpoint()?.write(&traj_path)?;
            (set, false)
        }
    };

    let mut ema = student.with_role(RoleTag::EmaShadow);
    let mut opt = AdamW::new(cfg.adamw(cfg.ode_lr));
    let mut log = JsonlLog::create(&out.join("ode_log.jsonl"))?;
    let started = Instant::now();
    let curve = ode_init_train(
        &student_model,
        &mut student,
        &mut ema,
        &set,
        cfg.ode_epochs,
        cfg.ode_batch,
        cfg.time_mode()?,
        &mut opt,
        cfg.ema_decay,
        cfg.seed,
        |step, loss| {
            log.log(&OdeStepLog {
                step,
                ode_loss: loss,
                wallclock: started.elapsed().as_secs_f64(),
            });
        },
    )?;
    log.finish();

    let summary = OdeInitSummary {
        initial_epoch_loss: *curve.epoch_means.first().unwrap(),
        final_epoch_loss: *curve.epoch_means.last().unwrap(),
        harvest_cache_hit: cache_hit,
    };
    std::fs::write(
        out.join("ode_summary.json"),
        serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?,
    )?;

    let mut bundle = student.clone();
    merge_prefixed(&mut bundle, "ema/", &ema)?;
    let ck = RawCheckpoint::from_store(
        &bundle,
        "ode-init",
        curve.step_losses.len() as u64,
        false,
        model_meta(&student_model, cfg),
    )?;
    let path = out.join("student.sfck");
    ck.write(&path)?;
    Ok(path)
}

// ── Reward fine-tuning ───────────────────────────────────────────────

#[derive(Serialize)]
pub struct RewardSummary {
    pub reward_before: f64,
    pub reward_after: f64,
    pub strategy: String,
    pub combined: bool,
}

/// Reward-guided fine-tuning of the ODE-initialized student. Writes
/// `final.sfck`, `reward_log.jsonl`, and `reward_summary.json`.
pub fn run_reward_finetune<S: Scalar>(
    cfg: &RunConfig,
    student_ckpt: &Path,
    out: &Path,
) -> Result<PathBuf> {
    prepare_out_dir(out)?;
    cfg.echo_into(out)?;
    let student_raw = RawCheckpoint::read(student_ckpt)?;
    student_raw.expect_role(RoleTag::Student)?;
    let model = load_model_from(&student_raw, AttentionMode::Causal)?;
    let bundle: ParamStore<S> = student_raw.to_store()?;
    let mut params = without_prefixes(&bundle, &["ema/", "fake/"], RoleTag::Final);
    let mut ema = params.with_role(RoleTag::EmaShadow);

    let reward = RewardModel::<S>::new_default();
    let reward_cfg = cfg.reward_config()?;
    let grid = cfg.time_grid()?;
    let mut opt = AdamW::new(cfg.adamw(cfg.reward_lr));

    // The combined ablation needs the teacher as the real score; a frozen
    // teacher model instance stays alive for the whole stage.
    let teacher_bundle: Option<(DitModel, ParamStore<S>)> = if cfg.reward_combine_distill {
        if cfg.reward_teacher_ckpt.is_empty() {
            return Err(Error::Config(
                "reward_combine_distill requires reward_teacher_ckpt".into(),
            ));
        }
        let raw = RawCheckpoint::read(Path::new(&cfg.reward_teacher_ckpt))?;
        raw.expect_role(RoleTag::Teacher)?;
        let tm = load_model_from(&raw, AttentionMode::Bidirectional)?;
        let tp: ParamStore<S> = raw.to_store()?;
        Some((tm, tp))
    } else {
        None
    };
    let mut support = teacher_bundle.as_ref().map(|(tm, tp)| DistillSupport {
        teacher_model: tm,
        teacher_params: tp,
        fake_params: tp.with_role(RoleTag::FakeScore),
        fake_opt: AdamW::new(cfg.adamw(cfg.distill_fake_lr)),
        schedule: cfg.schedule(),
        fake_updates_per_step: cfg.distill_fake_ratio,
    });

    let before = mean_reward_on_set(
        &model,
        &params,
        &reward,
        &grid,
        RewardStrategy::LastFrame,
        cfg.eval_seed,
        cfg.eval_clips,
    )?;

    let mut log = JsonlLog::create(&out.join("reward_log.jsonl"))?;
    reward_finetune(
        &model,
        &mut params,
        &mut ema,
        &reward,
        &reward_cfg,
        &grid,
        cfg.reward_steps,
        &mut opt,
        cfg.ema_decay,
        derive_seed(cfg.seed, "reward-stage", 0),
        support.as_mut(),
        |step_log| log.log(step_log),
    )?;
    log.finish();

    let after = mean_reward_on_set(
        &model,
        &params,
        &reward,
        &grid,
        RewardStrategy::LastFrame,
        cfg.eval_seed,
        cfg.eval_clips,
    )?;
    let summary = RewardSummary {
        reward_before: before,
        reward_after: after,
        strategy: cfg.reward_strategy.clone(),
        combined: cfg.reward_combine_distill,
    };
    std::fs::write(
        out.join("reward_summary.json"),
        serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?,
    )?;

    let mut out_bundle = params.clone();
    merge_prefixed(&mut out_bundle, "ema/", &ema)?;
    let ck = RawCheckpoint::from_store(
        &out_bundle,
        "reward-finetune",
        cfg.reward_steps as u64,
        false,
        model_meta(&model, cfg),
    )?;
    let path = out.join("final.sfck");
    ck.write(&path)?;
    Ok(path)
}

// ── Generation and evaluation ────────────────────────────────────────

/// One prompt entry of a prompts file (JSON lines). The seed defaults to
/// the entry index when absent.
#[derive(Debug, Clone, serde::Deserialize)]
pub struct PromptEntry {
    #[serde(flatten)]
    pub spec: PromptSpec,
    #[serde(default)]
    pub seed: Option<u64>,
}

/// Sample a clip from a checkpoint with the sampler its role implies:
/// dense ODE for the teacher, few-step for the distilled generator,
/// chunk-wise causal streaming for student and final models.
pub fn sample_for_role<S: Scalar>(
    role: RoleTag,
    model: &DitModel,
    params: &ParamStore<S>,
    cfg: &RunConfig,
    spec: &PromptSpec,
    seed: u64,
) -> Result<Tensor<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Tensor::<S>::randn(&model.cfg.clip_shape(), &mut rng);
    match role {
        RoleTag::Teacher => ode_clip_teacher(model, params, spec, cfg.teacher_sample_steps, &z),
        RoleTag::Generator => few_step_generate(model, params, &z, &cfg.time_grid()?, spec),
        RoleTag::Student | RoleTag::Final => {
            generate_clip_causal(model, params, spec, &cfg.time_grid()?, &z)
        }
        other => Err(Error::Precondition(format!(
            "checkpoint role '{other}' is not generatable"
        ))),
    }
}

fn load_generatable<S: Scalar>(ckpt: &Path) -> Result<(RoleTag, DitModel, ParamStore<S>)> {
    let raw = RawCheckpoint::read(ckpt)?;
    let role = raw.manifest.role;
    let mode = match role {
        RoleTag::Teacher | RoleTag::Generator => AttentionMode::Bidirectional,
        RoleTag::Student | RoleTag::Final => AttentionMode::Causal,
        other => {
            return Err(Error::Precondition(format!(
                "checkpoint role '{other}' is not generatable"
            )))
        }
    };
    let model = load_model_from(&raw, mode)?;
    let bundle: ParamStore<S> = raw.to_store()?;
    let params = without_prefixes(&bundle, &["ema/", "fake/"], role);
    Ok((role, model, params))
}

/// Render prompts from a JSON-lines file into numbered PPM sequences with
/// sidecars. Malformed entries are skipped and reported; the run continues.
pub fn generate<S: Scalar>(
    cfg: &RunConfig,
    ckpt: &Path,
    prompts_file: &Path,
    out: &Path,
) -> Result<Vec<String>> {
    prepare_out_dir(out)?;
    let (role, model, params) = load_generatable::<S>(ckpt)?;
    let text = std::fs::read_to_string(prompts_file)?;
    let mut skipped = Vec::new();
    let mut index = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: PromptEntry = match serde_json::from_str(line) {
            Ok(e) => e,
            Err(err) => {
                skipped.push(format!("line {}: {}", lineno + 1, err));
                continue;
            }
        };
        if let Err(err) = entry.spec.validate() {
            skipped.push(format!("line {}: {}", lineno + 1, err));
            continue;
        }
        let seed = entry.seed.unwrap_or(index as u64);
        let frames = sample_for_role(role, &model, &params, cfg, &entry.spec, seed)?;
        let clip = VideoClip {
            frames,
            prompt: entry.spec,
            seed,
        };
        export_clip(&out.join(format!("clip_{:04}", index)), &clip)?;
        index += 1;
    }
    Ok(skipped)
}

/// Evaluate a checkpoint: generate the internal eval set, score it, and
/// (for streaming-capable roles) measure runtime. Writes `report.json`
/// and `report.csv`.
pub fn evaluate_checkpoint<S: Scalar>(
    cfg: &RunConfig,
    ckpt: &Path,
    out: &Path,
) -> Result<MetricsReport> {
    prepare_out_dir(out)?;
    let (role, model, params) = load_generatable::<S>(ckpt)?;
    let clips: Vec<VideoClip<S>> = (0..cfg.eval_clips)
        .map(|i| {
            let spec = sample_prompt(derive_seed(cfg.eval_seed, "eval/prompt", i as u64));
            let seed = derive_seed(cfg.eval_seed, "eval/noise", i as u64);
            let frames = sample_for_role(role, &model, &params, cfg, &spec, seed)?;
            Ok(VideoClip {
                frames,
                prompt: spec,
                seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = evaluate_clips(&clips, cfg.eval_seed)?;
    if matches!(role, RoleTag::Student | RoleTag::Final) {
        let runtime = bench_runtime::<S>(cfg, &model, &params)?;
        report.throughput_fps = Some(runtime.throughput_fps);
        report.first_chunk_latency_s = Some(runtime.first_chunk_latency_s);
        report.runtime_reliable = Some(runtime.reliable);
    }
    write_report(&report, out)?;
    Ok(report)
}

/// Evaluate already-exported frame sequences (directories of `clip_*`).
pub fn evaluate_frames<S: Scalar>(cfg: &RunConfig, frames_dir: &Path, out: &Path) -> Result<MetricsReport> {
    prepare_out_dir(out)?;
    let mut clips: Vec<VideoClip<S>> = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(frames_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("clip_")))
        .collect();
    entries.sort();
    for dir in entries {
        clips.push(import_clip(&dir)?);
    }
    if clips.is_empty() {
        return Err(Error::Precondition(format!(
            "no clip_* directories under {}",
            frames_dir.display()
        )));
    }
    let report = evaluate_clips(&clips, cfg.eval_seed)?;
    write_report(&report, out)?;
    Ok(report)
}

fn write_report(report: &MetricsReport, out: &Path) -> Result<()> {
    std::fs::write(out.join("report.json"), report.to_json())?;
    std::fs::write(out.join("report.csv"), report.to_csv())?;
    Ok(())
}

/// Runtime harness over the config's bench prompt set.
pub fn bench_runtime<S: Scalar>(
    cfg: &RunConfig,
    model: &DitModel,
    params: &ParamStore<S>,
) -> Result<RuntimeReport> {
    let prompts: Vec<(PromptSpec, u64)> = (0..cfg.bench_prompts)
        .map(|i| {
            (
                sample_prompt(derive_seed(cfg.eval_seed, "bench/prompt", i as u64)),
                derive_seed(cfg.eval_seed, "bench/noise", i as u64),
            )
        })
        .collect();
    measure_runtime(
        model,
        params,
        &prompts,
        &cfg.time_grid()?,
        cfg.bench_warmup,
        cfg.bench_runs,
    )
}

/// Extract the EMA shadow from a stage checkpoint, when present.
pub fn ema_of<S: Scalar>(ckpt: &Path) -> Result<ParamStore<S>> {
    let raw = RawCheckpoint::read(ckpt)?;
    let bundle: ParamStore<S> = raw.to_store()?;
    let ema = extract_prefixed(&bundle, "ema/", RoleTag::EmaShadow);
    if ema.is_empty() {
        return Err(Error::Precondition("checkpoint has no EMA section".into()));
    }
    Ok(ema)
}

/// Dispatch a precision-generic stage body.
pub fn with_precision<T>(
    precision: Precision,
    f32_body: impl FnOnce() -> Result<T>,
    f64_body: impl FnOnce() -> Result<T>,
) -> Result<T> {
    match precision {
        Precision::F32 => f32_body(),
        Precision::F64 => f64_body(),
    }
}
