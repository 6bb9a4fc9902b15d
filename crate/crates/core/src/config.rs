//! Run configuration: a flat, documented TOML key set with defaults.
//!
//! Unknown keys are hard errors — a typo in an ablation config must fail
//! loudly, not silently fall back to a default. The fully resolved config
//! is echoed verbatim into the output directory so any run can be replayed
//! from its artifacts alone.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arinit::TimeAssignMode;
use crate::diffcore::Precision;
use crate::flowmatch::{NoiseSchedule, TimeGrid};
use crate::model::{AttentionMode, ModelConfig};
use crate::optim::AdamWConfig;
use crate::reward::{RewardConfig, RewardStrategy};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every stage derives its own streams from it.
    pub seed: u64,
    /// Element precision: "f32" or "f64".
    pub precision: String,

    // ── Dataset geometry ────────────────────────────────────────────
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub chunk: usize,
    /// Clips in the pre-rendered teacher training pool.
    pub dataset_clips: usize,

    // ── Model ───────────────────────────────────────────────────────
    pub patch: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub time_enc_dim: usize,

    // ── Optimizer ───────────────────────────────────────────────────
    /// Reference learning rate is 2e-6 for a billion-parameter model; the
    /// desk-scale nets need larger steps, so stages carry their own rates.
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,

    // ── Forward process and time grids ──────────────────────────────
    pub schedule_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Solver steps for teacher sampling and trajectory harvesting.
    pub teacher_sample_steps: usize,
    /// Few-step generator grid (strictly increasing, within [0, 1]).
    pub student_grid: Vec<f64>,

    // ── Stage budgets ───────────────────────────────────────────────
    pub teacher_steps: usize,
    pub teacher_batch: usize,
    pub teacher_lr: f64,
    pub distill_gen_steps: usize,
    pub distill_batch: usize,
    /// Fake-score updates per generator update.
    pub distill_fake_ratio: usize,
    pub distill_gen_lr: f64,
    pub distill_fake_lr: f64,
    pub harvest_count: usize,
    pub ode_epochs: usize,
    pub ode_batch: usize,
    pub ode_lr: f64,
    /// "iid" or "graded" per-frame time assignment.
    pub ode_time_mode: String,
    pub reward_steps: usize,
    pub reward_lr: f64,
    /// "last_frame" or "random_frame".
    pub reward_strategy: String,
    pub reward_combine_distill: bool,
    pub reward_norm_window: usize,
    pub reward_truncation_depth: usize,
    /// Teacher checkpoint path, required when combining reward with
    /// distillation (the teacher serves as the real score).
    pub reward_teacher_ckpt: String,

    // ── Evaluation and runtime harness ──────────────────────────────
    pub eval_clips: usize,
    pub eval_seed: u64,
    pub bench_prompts: usize,
    pub bench_warmup: usize,
    pub bench_runs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            precision: "f32".into(),
            frames: 16,
            height: 32,
            width: 32,
            chunk: 4,
            dataset_clips: 64,
            patch: 8,
            embed_dim: 64,
            heads: 4,
            layers: 2,
            time_enc_dim: 32,
            adam_beta1: 0.0,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            ema_decay: 0.99,
            schedule_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            teacher_sample_steps: 32,
            student_grid: vec![0.0, 0.25, 0.5, 0.75],
            teacher_steps: 600,
            teacher_batch: 8,
            teacher_lr: 1e-3,
            distill_gen_steps: 150,
            distill_batch: 2,
            distill_fake_ratio: 2,
            distill_gen_lr: 1e-4,
            distill_fake_lr: 2e-4,
            harvest_count: 256,
            ode_epochs: 6,
            ode_batch: 4,
            ode_lr: 4e-4,
            ode_time_mode: "iid".into(),
            reward_steps: 300,
            reward_lr: 1e-4,
            reward_strategy: "last_frame".into(),
            reward_combine_distill: false,
            reward_norm_window: 64,
            reward_truncation_depth: 1,
            reward_teacher_ckpt: String::new(),
            eval_clips: 16,
            eval_seed: 9000,
            bench_prompts: 4,
            bench_warmup: 1,
            bench_runs: 5,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Write the fully resolved config into the output directory.
    pub fn echo_into(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        std::fs::write(out_dir.join("config.toml"), self.to_toml())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config(AttentionMode::Causal)?;
        self.time_grid()?;
        NoiseSchedule::linear(self.schedule_steps, self.beta_start, self.beta_end)
            .map_err(|e| Error::Config(e.to_string()))?;
        self.precision()?;
        self.reward_strategy()?;
        self.time_mode()?;
        if self.teacher_batch == 0 || self.distill_batch == 0 || self.ode_batch == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if self.dataset_clips == 0 || self.harvest_count == 0 {
            return Err(Error::Config("dataset_clips and harvest_count must be >= 1".into()));
        }
        if self.reward_norm_window == 0 || self.reward_truncation_depth == 0 {
            return Err(Error::Config(
                "reward window and truncation depth must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn precision(&self) -> Result<Precision> {
        match self.precision.as_str() {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!(
                "precision must be f32 or f64, got {other}"
            ))),
        }
    }

    pub fn model_config(&self, mode: AttentionMode) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            frames: self.frames,
            height: self.height,
            width: self.width,
            channels: 3,
            patch: self.patch,
            embed_dim: self.embed_dim,
            heads: self.heads,
            layers: self.layers,
            chunk: self.chunk,
            cond_dim: crate::synthvid::COND_DIM,
            time_enc_dim: self.time_enc_dim,
            mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.student_grid.clone()).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule::linear(self.schedule_steps, self.beta_start, self.beta_end)
            .expect("validated schedule")
    }

    pub fn adamw(&self, lr: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn reward_strategy(&self) -> Result<RewardStrategy> {
        match self.reward_strategy.as_str() {
            "last_frame" => Ok(RewardStrategy::LastFrame),
            "random_frame" => Ok(RewardStrategy::RandomFrame),
            other => Err(Error::Config(format!(
                "reward_strategy must be last_frame or random_frame, got {other}"
            ))),
        }
    }

    pub fn time_mode(&self) -> Result<TimeAssignMode> {
        match self.ode_time_mode.as_str() {
            "iid" => Ok(TimeAssignMode::Iid),
            "graded" => Ok(TimeAssignMode::Graded),
            other => Err(Error::Config(format!(
                "ode_time_mode must be iid or graded, got {other}"
            ))),
        }
    }

    pub fn reward_config(&self) -> Result<RewardConfig> {
        Ok(RewardConfig {
            strategy: self.reward_strategy()?,
            combine_with_distill: self.reward_combine_distill,
            norm_window: self.reward_norm_window,
            truncation_depth: self.reward_truncation_depth,
        })
    }

    /// A cut-down configuration for quick end-to-end runs and tests.
    pub fn smoke() -> Self {
        RunConfig {
            dataset_clips: 24,
            teacher_steps: 120,
            teacher_batch: 4,
            distill_gen_steps: 30,
            harvest_count: 24,
            ode_epochs: 3,
            reward_steps: 40,
            eval_clips: 8,
            bench_prompts: 2,
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn unknown_keys_are_hard_errors() {
        let err = RunConfig::from_toml("unknown_knob = 3\n").unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("unknown_knob"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn bad_values_rejected() {
        assert!(RunConfig::from_toml("precision = \"f16\"\n").is_err());
        assert!(RunConfig::from_toml("chunk = 3\n").is_err());
        assert!(RunConfig::from_toml("student_grid = [0.5, 0.25]\n").is_err());
        assert!(RunConfig::from_toml("reward_strategy = \"middle\"\n").is_err());
    }

    #[test]
    fn echo_reproduces_config() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.teacher_steps = 7;
        cfg.echo_into(dir.path()).unwrap();
        let loaded = RunConfig::from_file(&dir.path().join("config.toml")).unwrap();
        assert_eq!(loaded.teacher_steps, 7);
        assert_eq!(loaded.to_toml(), cfg.to_toml());
    }
}
