//! Differentiable reward scoring and reward-guided fine-tuning.
//!
//! The frozen reward scores a single frame: prompt-color agreement under a
//! soft brightness mask, plus spatial gradient energy, minus a smooth
//! out-of-gamut penalty (an 8th-power barrier that grows strictly with
//! pixel magnitude). The fine-tuning loop self-rolls out clips chunk by
//! chunk through the student's own KV cache and backpropagates the negated
//! reward through the supervised frame's generating chunk; earlier context
//! stays constant beyond the configured truncation depth.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Scalar, Tape, Tensor, Var};
use crate::distill::{ema_update, fake_score_step, DmdBatchItem, ScoreFn, TapeGenerator, VelocityScore};
use crate::flowmatch::{ddpm_forward, NoiseSchedule, TimeGrid};
use crate::model::{DitModel, ParamStore, RoleTag};
use crate::optim::AdamW;
use crate::rollout::{generate_clip_causal, rollout_traced};
use crate::synthvid::{sample_prompt, ColorName, PromptSpec};
use crate::{derive_seed, Error, Result};

/// Softmax temperature for the brightness pooling mask.
const POOL_BETA: f64 = 24.0;

/// Frozen per-frame reward model. Component weights follow the reference
/// configuration: w_color 1.0, w_sharp 0.5, w_sat 0.25.
pub struct RewardModel<S: Scalar> {
    params: ParamStore<S>,
}

impl<S: Scalar> RewardModel<S> {
    pub fn new_default() -> Self {
        let mut params = ParamStore::new(RoleTag::Reward);
        params
            .insert("w_color", Tensor::from_f64_slice(&[1], &[1.0]).unwrap())
            .unwrap();
        params
            .insert("w_sharp", Tensor::from_f64_slice(&[1], &[0.5]).unwrap())
            .unwrap();
        params
            .insert("w_sat", Tensor::from_f64_slice(&[1], &[0.25]).unwrap())
            .unwrap();
        let mut targets = Vec::with_capacity(12);
        for color in ColorName::ALL {
            targets.extend_from_slice(&color.rgb());
        }
        params
            .insert(
                "color_targets",
                Tensor::from_f64_slice(&[4, 3], &targets).unwrap(),
            )
            .unwrap();
        RewardModel { params }
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    /// FNV hash of the frozen parameters; fine-tuning must not change it.
    pub fn content_hash(&self) -> u64 {
        self.params.content_hash()
    }

    fn weight(&self, name: &str) -> f64 {
        self.params.get(name).unwrap().data()[0].to_f64()
    }

    /// Record the reward of one `[H, W, C]` frame on the tape. The score is
    /// differentiable in the frame everywhere; reward parameters enter as
    /// constants.
    pub fn score_frame_on_tape(
        &self,
        tape: &mut Tape<S>,
        frame: Var,
        prompt: &PromptSpec,
    ) -> Result<Var> {
        let sh = tape.value(frame).shape().to_vec();
        if sh.len() != 3 || sh[2] != 3 {
            return Err(Error::invalid(
                "score_frame",
                format!("expected [H,W,3], got {:?}", sh),
            ));
        }
        let (h, w) = (sh[0], sh[1]);
        let hw = h * w;
        let flat = tape.reshape(frame, &[hw, 3])?;

        // Color term: softmax-pooled mean color under a brightness mask,
        // squared distance to the prompt color, mapped to 1 − d²/4.
        let third = tape.leaf(Tensor::filled(&[3, 1], S::from_f64(1.0 / 3.0)));
        let luma = tape.matmul(flat, third)?;
        let luma_row = tape.reshape(luma, &[1, hw])?;
        let heated = tape.scalar_mul(luma_row, POOL_BETA)?;
        let mask = tape.softmax(heated)?;
        let pooled = tape.matmul(mask, flat)?;
        let targets = tape.leaf(self.params.get("color_targets").unwrap().clone());
        let target = tape.embed(targets, Arc::new(vec![prompt.color.index()]))?;
        let dist = tape.mse(pooled, target)?; // ‖·‖²/3
        let neg = tape.scalar_mul(dist, -0.75)?; // −‖·‖²/4
        let one = tape.leaf(Tensor::scalar(S::ONE));
        let color_term = tape.add(one, neg)?;

        // Sharpness: mean squared forward differences along both axes.
        let lo_y = tape.slice(frame, 0, 0, h - 1)?;
        let hi_y = tape.slice(frame, 0, 1, h - 1)?;
        let dy = tape.sub(hi_y, lo_y)?;
        let dy2 = tape.mul(dy, dy)?;
        let e_y = tape.mean(dy2)?;
        let lo_x = tape.slice(frame, 1, 0, w - 1)?;
        let hi_x = tape.slice(frame, 1, 1, w - 1)?;
        let dx = tape.sub(hi_x, lo_x)?;
        let dx2 = tape.mul(dx, dx)?;
        let e_x = tape.mean(dx2)?;
        let sharp = tape.add(e_y, e_x)?;

        // Gamut barrier: mean(x⁸) is tiny inside [−1, 1] and grows strictly
        // with any scaling of the pixels.
        let x2 = tape.mul(frame, frame)?;
        let x4 = tape.mul(x2, x2)?;
        let x8 = tape.mul(x4, x4)?;
        let sat = tape.mean(x8)?;

        let c = tape.scalar_mul(color_term, self.weight("w_color"))?;
        let s = tape.scalar_mul(sharp, self.weight("w_sharp"))?;
        let p = tape.scalar_mul(sat, -self.weight("w_sat"))?;
        let cs = tape.add(c, s)?;
        tape.add(cs, p)
    }

    /// Plain scalar reward of a frame.
    pub fn score_frame(&self, frame: &Tensor<S>, prompt: &PromptSpec) -> Result<f64> {
        let mut tape = Tape::new();
        let f = tape.leaf(frame.clone());
        let s = self.score_frame_on_tape(&mut tape, f, prompt)?;
        Ok(tape.value(s).scalar_value().to_f64())
    }

    /// The three raw components (color, sharpness, gamut penalty), for
    /// diagnostics and tests.
    pub fn score_components(&self, frame: &Tensor<S>, prompt: &PromptSpec) -> Result<(f64, f64, f64)> {
        let total = self.score_frame(frame, prompt)?;
        // Recompute with weights isolated by linearity.
        let base = RewardModel::<S>::with_weights(1.0, 0.0, 0.0);
        let color = base.score_frame(frame, prompt)?;
        let sharp_only = RewardModel::<S>::with_weights(0.0, 1.0, 0.0);
        let sharp = sharp_only.score_frame(frame, prompt)?;
        let sat_only = RewardModel::<S>::with_weights(0.0, 0.0, 1.0);
        let sat = -sat_only.score_frame(frame, prompt)?;
        debug_assert!(
            (total - (self.weight("w_color") * color + self.weight("w_sharp") * sharp
                - self.weight("w_sat") * sat))
                .abs()
                < 1e-6
        );
        Ok((color, sharp, sat))
    }

    fn with_weights(c: f64, s: f64, p: f64) -> Self {
        let mut m = Self::new_default();
        m.params
            .set("w_color", Tensor::from_f64_slice(&[1], &[c]).unwrap())
            .unwrap();
        m.params
            .set("w_sharp", Tensor::from_f64_slice(&[1], &[s]).unwrap())
            .unwrap();
        m.params
            .set("w_sat", Tensor::from_f64_slice(&[1], &[p]).unwrap())
            .unwrap();
        m
    }
}

/// Which frame of the rollout the reward supervises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardStrategy {
    LastFrame,
    RandomFrame,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RewardConfig {
    pub strategy: RewardStrategy,
    pub combine_with_distill: bool,
    /// Window of the running loss normalizers; must be ≥ 1.
    pub norm_window: usize,
    /// How many trailing chunks of the rollout stay on the tape.
    pub truncation_depth: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            strategy: RewardStrategy::LastFrame,
            combine_with_distill: false,
            norm_window: 64,
            truncation_depth: 1,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.norm_window < 1 {
            return Err(Error::Config("normalization window must be >= 1".into()));
        }
        if self.truncation_depth < 1 {
            return Err(Error::Config("truncation depth must be >= 1".into()));
        }
        Ok(())
    }
}

/// Pick the supervised frame. Random draws are taken from the given rng so
/// runs can record and replay them.
pub fn supervised_frame_index(
    frames: usize,
    strategy: RewardStrategy,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    if frames == 0 {
        return Err(Error::Precondition("empty video".into()));
    }
    Ok(match strategy {
        RewardStrategy::LastFrame => frames - 1,
        RewardStrategy::RandomFrame => rng.gen_range(0..frames),
    })
}

/// Negated reward of the supervised frame of an on-tape clip.
/// Returns the loss node and the frame index it supervised.
pub fn reward_loss_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    model: &RewardModel<S>,
    clip: Var,
    prompt: &PromptSpec,
    strategy: RewardStrategy,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, usize)> {
    let sh = tape.value(clip).shape().to_vec();
    if sh.len() != 4 || sh[0] == 0 {
        return Err(Error::Precondition(format!(
            "reward_loss expects a non-empty [T,H,W,C] clip, got {:?}",
            sh
        )));
    }
    let idx = supervised_frame_index(sh[0], strategy, rng)?;
    let frame_rows = tape.slice(clip, 0, idx, 1)?;
    let frame = tape.reshape(frame_rows, &[sh[1], sh[2], sh[3]])?;
    let score = model.score_frame_on_tape(tape, frame, prompt)?;
    let loss = tape.scalar_mul(score, -1.0)?;
    Ok((loss, idx))
}

/// Plain-value reward loss of a stored clip.
pub fn reward_loss<S: Scalar>(
    model: &RewardModel<S>,
    clip: &Tensor<S>,
    prompt: &PromptSpec,
    strategy: RewardStrategy,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let c = tape.leaf(clip.clone());
    let (loss, idx) = reward_loss_on_tape(&mut tape, model, c, prompt, strategy, rng)?;
    Ok((tape.value(loss).scalar_value().to_f64(), idx))
}

/// Running mean of absolute values over a window, epsilon-guarded.
#[derive(Debug, Clone)]
pub struct RunningNormalizer {
    window: usize,
    values: VecDeque<f64>,
}

impl RunningNormalizer {
    pub fn new(window: usize) -> Self {
        RunningNormalizer {
            window: window.max(1),
            values: VecDeque::new(),
        }
    }

    /// Record a value and return the current normalizer mean.
    pub fn push(&mut self, value: f64) -> f64 {
        if self.values.len() == self.window {
            self.values.pop_front();
        }
        self.values.push_back(value.abs());
        self.mean()
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return 1e-8;
        }
        (self.values.iter().sum::<f64>() / self.values.len() as f64).max(1e-8)
    }
}

/// Two-stream loss combination: each term divided by the running mean of
/// its absolute value, then summed with unit weights.
#[derive(Debug, Clone)]
pub struct LossCombiner {
    pub reward_norm: RunningNormalizer,
    pub distill_norm: RunningNormalizer,
}

impl LossCombiner {
    pub fn new(window: usize) -> Self {
        LossCombiner {
            reward_norm: RunningNormalizer::new(window),
            distill_norm: RunningNormalizer::new(window),
        }
    }

    /// Update both windows and return the combined normalized value.
    pub fn combine(&mut self, reward_term: f64, distill_term: f64) -> f64 {
        let (rs, ds) = self.scales(reward_term, distill_term);
        reward_term * rs + distill_term * ds
    }

    /// Update both windows and return the multiplicative scales.
    pub fn scales(&mut self, reward_term: f64, distill_term: f64) -> (f64, f64) {
        let rm = self.reward_norm.push(reward_term);
        let dm = self.distill_norm.push(distill_term);
        (1.0 / rm, 1.0 / dm)
    }
}

/// One logged fine-tuning step.
#[derive(Debug, Clone, Serialize)]
pub struct RewardStepLog {
    pub step: usize,
    pub reward: f64,
    pub loss: f64,
    pub frame_index: usize,
    pub chunk_index: usize,
    pub combined: Option<f64>,
    pub skipped: bool,
}

/// Everything the combined reward+distillation mode needs on top of the
/// pure-reward loop: the frozen teacher as the real score, a trainable fake
/// score net, and the shared schedule.
pub struct DistillSupport<'a, S: Scalar> {
    pub teacher_model: &'a DitModel,
    pub teacher_params: &'a ParamStore<S>,
    pub fake_params: ParamStore<S>,
    pub fake_opt: AdamW,
    pub schedule: NoiseSchedule,
    /// Fake-score updates per main step.
    pub fake_updates_per_step: usize,
}

/// Sample-only generator for fake-score training during the reward stage:
/// rolls the causal student out off-tape and exposes the clip as a leaf.
struct RolloutSampler<'a> {
    model: &'a DitModel,
    grid: &'a TimeGrid,
}

impl<S: Scalar> TapeGenerator<S> for RolloutSampler<'_> {
    fn generate_batch(
        &self,
        tape: &mut Tape<S>,
        params: &ParamStore<S>,
        batch: &[DmdBatchItem<S>],
    ) -> Result<Vec<Var>> {
        batch
            .iter()
            .map(|item| {
                let clip = generate_clip_causal(self.model, params, &item.spec, self.grid, &item.z)?;
                Ok(tape.leaf(clip))
            })
            .collect()
    }

    fn sample_shape(&self) -> Vec<usize> {
        self.model.cfg.clip_shape().to_vec()
    }
}

/// Reward-guided fine-tuning with chunk-wise self-rollout.
///
/// Each step draws a prompt and noise, rolls the student out through its
/// own KV cache, scores the supervised frame, and backpropagates through
/// that frame's generating chunk (and, in combined mode, a distillation
/// surrogate on the same rollout). The logged loss equals the negated
/// reward at every step; a violation is a numerical failure.
#[allow(clippy::too_many_arguments)]
pub fn reward_finetune<S: Scalar>(
    model: &DitModel,
    params: &mut ParamStore<S>,
    ema: &mut ParamStore<S>,
    reward: &RewardModel<S>,
    cfg: &RewardConfig,
    grid: &TimeGrid,
    steps: usize,
    opt: &mut AdamW,
    ema_decay: f64,
    seed: u64,
    mut distill: Option<&mut DistillSupport<'_, S>>,
    mut on_step: impl FnMut(&RewardStepLog),
) -> Result<Vec<RewardStepLog>> {
    cfg.validate()?;
    let hash_before = reward.content_hash();
    let mut combiner = LossCombiner::new(cfg.norm_window);
    let mut logs = Vec::with_capacity(steps);
    let frames = model.cfg.frames;
    let chunk = model.cfg.chunk;

    for step in 0..steps {
        let spec = sample_prompt(derive_seed(seed, "reward/prompt", step as u64));
        let mut z_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "reward/noise", step as u64));
        let z = Tensor::<S>::randn(&model.cfg.clip_shape(), &mut z_rng);
        let mut frame_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, "reward/frame", step as u64));
        let frame_index = supervised_frame_index(frames, cfg.strategy, &mut frame_rng)?;
        let chunk_index = frame_index / chunk;

        let mut traced =
            rollout_traced(model, params, &spec, grid, &z, chunk_index, cfg.truncation_depth)?;
        let tape = &mut traced.tape;

        // Reward on the supervised frame of the traced chunk.
        let local = frame_index - chunk_index * chunk;
        let frame_rows = tape.slice(traced.chunk_var, 0, local, 1)?;
        let frame = tape.reshape(
            frame_rows,
            &[model.cfg.height, model.cfg.width, model.cfg.channels],
        )?;
        let score = reward.score_frame_on_tape(tape, frame, &spec)?;
        let reward_value = tape.value(score).scalar_value().to_f64();
        if !reward_value.is_finite() {
            let log = RewardStepLog {
                step,
                reward: reward_value,
                loss: f64::NAN,
                frame_index,
                chunk_index,
                combined: None,
                skipped: true,
            };
            on_step(&log);
            logs.push(log);
            continue;
        }
        let reward_term = tape.scalar_mul(score, -1.0)?;
        let loss_value = tape.value(reward_term).scalar_value().to_f64();
        if (loss_value + reward_value).abs() > 1e-9 {
            return Err(Error::Numerical(
                "loss is not the negated reward".into(),
            ));
        }

        let (total, combined_value) = match distill.as_deref_mut() {
            Some(support) if cfg.combine_with_distill => {
                // Distillation surrogate on the same rollout, gradient
                // flowing through the traced chunk only.
                let hwc = model.cfg.height * model.cfg.width * model.cfg.channels;
                let lo = chunk_index * chunk;
                let full_clip = {
                    let mut pieces = Vec::new();
                    if lo > 0 {
                        let prefix = Tensor::from_vec(
                            &[lo, model.cfg.height, model.cfg.width, model.cfg.channels],
                            traced.clip.data()[..lo * hwc].to_vec(),
                        )?;
                        pieces.push(tape.leaf(prefix));
                    }
                    pieces.push(traced.chunk_var);
                    if lo + chunk < frames {
                        let suffix = Tensor::from_vec(
                            &[
                                frames - lo - chunk,
                                model.cfg.height,
                                model.cfg.width,
                                model.cfg.channels,
                            ],
                            traced.clip.data()[(lo + chunk) * hwc..].to_vec(),
                        )?;
                        pieces.push(tape.leaf(suffix));
                    }
                    if pieces.len() == 1 {
                        pieces[0]
                    } else {
                        tape.concat(&pieces, 0)?
                    }
                };
                let mut t_rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(seed, "reward/dmd", step as u64));
                let t_index = t_rng.gen_range(1..=support.schedule.steps());
                let noise = Tensor::<S>::randn(&model.cfg.clip_shape(), &mut t_rng);
                let x_t =
                    ddpm_forward(&tape.detach(full_clip), t_index, &noise, &support.schedule)?;
                let real = VelocityScore {
                    model: support.teacher_model,
                    params: support.teacher_params,
                    schedule: &support.schedule,
                };
                let fake = VelocityScore {
                    model: support.teacher_model,
                    params: &support.fake_params,
                    schedule: &support.schedule,
                };
                let s_fake = fake.score(&x_t, t_index, &spec)?;
                let s_real = real.score(&x_t, t_index, &spec)?;
                let g = s_fake.zip(&s_real, |f, r| f - r)?;
                if !g.all_finite() {
                    let log = RewardStepLog {
                        step,
                        reward: reward_value,
                        loss: loss_value,
                        frame_index,
                        chunk_index,
                        combined: None,
                        skipped: true,
                    };
                    on_step(&log);
                    logs.push(log);
                    continue;
                }
                let g_leaf = tape.leaf(g);
                let weighted = tape.mul(full_clip, g_leaf)?;
                let dmd_term = tape.sum(weighted)?;
                let dmd_value = tape.value(dmd_term).scalar_value().to_f64();
                let (rs, ds) = combiner.scales(loss_value, dmd_value);
                let r_scaled = tape.scalar_mul(reward_term, rs)?;
                let d_scaled = tape.scalar_mul(dmd_term, ds)?;
                let total = tape.add(r_scaled, d_scaled)?;
                (total, Some(loss_value * rs + dmd_value * ds))
            }
            _ => (reward_term, None),
        };

        let grads = tape.backward(total)?.into_param_map();
        opt.step(params, &grads)?;
        ema_update(ema, params, ema_decay)?;

        // Fake-score maintenance in combined mode.
        if let Some(support) = distill.as_deref_mut() {
            if cfg.combine_with_distill {
                let sampler = RolloutSampler { model, grid };
                let mut f_rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(seed, "reward/fake", step as u64));
                for _ in 0..support.fake_updates_per_step {
                    let batch: Vec<DmdBatchItem<S>> = (0..1)
                        .map(|_| DmdBatchItem {
                            z: Tensor::randn(&model.cfg.clip_shape(), &mut f_rng),
                            spec,
                        })
                        .collect();
                    fake_score_step(
                        &sampler,
                        params,
                        support.teacher_model,
                        &mut support.fake_params,
                        &mut support.fake_opt,
                        &support.schedule,
                        &batch,
                        &mut f_rng,
                    )?;
                }
            }
        }

        let log = RewardStepLog {
            step,
            reward: reward_value,
            loss: loss_value,
            frame_index,
            chunk_index,
            combined: combined_value,
            skipped: false,
        };
        on_step(&log);
        logs.push(log);
    }

    if reward.content_hash() != hash_before {
        return Err(Error::Numerical(
            "reward model parameters changed during fine-tuning".into(),
        ));
    }
    Ok(logs)
}

/// Mean reward of the supervised frame over a fixed evaluation set of
/// (prompt, noise) pairs; used to compare before/after fine-tuning.
pub fn mean_reward_on_set<S: Scalar>(
    model: &DitModel,
    params: &ParamStore<S>,
    reward: &RewardModel<S>,
    grid: &TimeGrid,
    strategy: RewardStrategy,
    eval_seed: u64,
    count: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..count {
        let spec = sample_prompt(derive_seed(eval_seed, "reward-eval/prompt", i as u64));
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(eval_seed, "reward-eval/noise", i as u64));
        let z = Tensor::<S>::randn(&model.cfg.clip_shape(), &mut rng);
        let clip = generate_clip_causal(model, params, &spec, grid, &z)?;
        let mut frame_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(eval_seed, "reward-eval/frame", i as u64));
        let (loss, _) = reward_loss(reward, &clip, &spec, strategy, &mut frame_rng)?;
        total += -loss;
    }
    Ok(total / count as f64)
}
