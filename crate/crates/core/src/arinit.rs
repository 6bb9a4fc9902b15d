//! Teacher ODE-trajectory harvesting and causal-student initialization.
//!
//! The student regresses onto teacher solver states: each frame enters at
//! its own grid time with per-frame timestep conditioning, earlier chunks
//! are teacher-forced as clean context re-encoded at data time, and the
//! target is always the stored clean frames.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::RawCheckpoint;
use crate::diffcore::{Scalar, Tape, Tensor, Var};
use crate::distill::ema_update;
use crate::flowmatch::{ode_sample, TimeGrid};
use crate::model::{BoundParams, CacheVars, DitModel, ParamStore, RoleTag};
use crate::optim::AdamW;
use crate::rollout::velocity_field;
use crate::synthvid::{sample_prompt, PromptSpec};
use crate::threads;
use crate::{derive_seed, Error, Result};

/// One harvested trajectory: solver states at every retention grid time
/// plus the terminal clean clip.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord<S: Scalar> {
    pub spec: PromptSpec,
    pub seed: u64,
    /// `states[g]` is the full clip at retention time g; the last entry is
    /// the τ = 1 endpoint and always equals the clean frames.
    pub states: Vec<Tensor<S>>,
}

impl<S: Scalar> TrajectoryRecord<S> {
    pub fn clean(&self) -> &Tensor<S> {
        self.states.last().expect("records always hold the endpoint")
    }
}

/// A harvested set with its provenance, replayable by cache key.
#[derive(Debug, Clone)]
pub struct OdeTrajectorySet<S: Scalar> {
    pub grid: TimeGrid,
    pub integration_steps: usize,
    pub seed: u64,
    pub records: Vec<TrajectoryRecord<S>>,
}

#[derive(Serialize, Deserialize)]
struct RecordMeta {
    spec: PromptSpec,
    seed: u64,
}

impl<S: Scalar> OdeTrajectorySet<S> {
    /// Identity of a harvest: seed, count, retention grid, solver steps.
    pub fn cache_key(seed: u64, count: usize, grid: &TimeGrid, integration_steps: usize) -> String {
        let times: Vec<String> = grid.times().iter().map(|t| format!("{:.6}", t)).collect();
        format!(
            "seed={};count={};grid={};steps={}",
            seed,
            count,
            times.join(","),
            integration_steps
        )
    }

    pub fn key(&self) -> String {
        Self::cache_key(self.seed, self.records.len(), &self.grid, self.integration_steps)
    }

    /// Persist through the checkpoint container with the trajectory flag.
    pub fn to_checkpoint(&self) -> Result<RawCheckpoint> {
        let mut store = ParamStore::<S>::new(RoleTag::Teacher);
        for (i, rec) in self.records.iter().enumerate() {
            let per_state = rec.states[0].numel();
            let mut data = Vec::with_capacity(per_state * rec.states.len());
            for s in &rec.states {
                data.extend_from_slice(s.data());
            }
            let mut shape = vec![rec.states.len()];
            shape.extend_from_slice(rec.states[0].shape());
            store.insert(format!("traj/{:05}", i), Tensor::from_vec(&shape, data)?)?;
        }
        let mut meta = BTreeMap::new();
        let records: Vec<RecordMeta> = self
            .records
            .iter()
            .map(|r| RecordMeta {
                spec: r.spec,
                seed: r.seed,
            })
            .collect();
        meta.insert(
            "records".to_string(),
            serde_json::to_string(&records).map_err(|e| Error::Format(e.to_string()))?,
        );
        meta.insert(
            "grid".to_string(),
            serde_json::to_string(self.grid.times()).map_err(|e| Error::Format(e.to_string()))?,
        );
        meta.insert(
            "integration_steps".to_string(),
            self.integration_steps.to_string(),
        );
        meta.insert("harvest_seed".to_string(), self.seed.to_string());
        meta.insert("cache_key".to_string(), self.key());
        RawCheckpoint::from_store(&store, "harvest", self.records.len() as u64, true, meta)
    }

    pub fn from_checkpoint(ck: &RawCheckpoint) -> Result<Self> {
        if !ck.manifest.trajectory {
            return Err(Error::Precondition(
                "checkpoint does not carry the trajectory flag".into(),
            ));
        }
        let store: ParamStore<S> = ck.to_store()?;
        let metas: Vec<RecordMeta> = serde_json::from_str(
            ck.manifest
                .meta
                .get("records")
                .ok_or_else(|| Error::Format("trajectory checkpoint missing records".into()))?,
        )
        .map_err(|e| Error::Format(e.to_string()))?;
        let times: Vec<f64> = serde_json::from_str(
            ck.manifest
                .meta
                .get("grid")
                .ok_or_else(|| Error::Format("trajectory checkpoint missing grid".into()))?,
        )
        .map_err(|e| Error::Format(e.to_string()))?;
        let grid = TimeGrid::new(times)?;
        let integration_steps = ck
            .manifest
            .meta
            .get("integration_steps")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("missing integration_steps".into()))?;
        let seed = ck
            .manifest
            .meta
            .get("harvest_seed")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("missing harvest_seed".into()))?;
        let mut records = Vec::with_capacity(metas.len());
        for (i, meta) in metas.iter().enumerate() {
            let stacked = store
                .get(&format!("traj/{:05}", i))
                .ok_or_else(|| Error::Format(format!("missing trajectory tensor {i}")))?;
            let n_states = stacked.shape()[0];
            let state_shape = stacked.shape()[1..].to_vec();
            let per: usize = state_shape.iter().product();
            let states = (0..n_states)
                .map(|g| {
                    Tensor::from_vec(&state_shape, stacked.data()[g * per..(g + 1) * per].to_vec())
                })
                .collect::<Result<Vec<_>>>()?;
            records.push(TrajectoryRecord {
                spec: meta.spec,
                seed: meta.seed,
                states,
            });
        }
        Ok(OdeTrajectorySet {
            grid,
            integration_steps,
            seed,
            records,
        })
    }
}

/// Sample teacher trajectories: integrate the probability-flow ODE on a
/// fine uniform grid and retain the states at the student's grid times plus
/// the terminal clean clip. Deterministic given the seed; records harvest
/// in parallel with per-record derived seeds.
pub fn harvest_trajectories<S: Scalar>(
    teacher: &DitModel,
    teacher_params: &ParamStore<S>,
    count: usize,
    grid: &TimeGrid,
    integration_steps: usize,
    seed: u64,
) -> Result<OdeTrajectorySet<S>> {
    if count == 0 {
        return Err(Error::Precondition("harvest count must be >= 1".into()));
    }
    // Every retention time must land exactly on the fine grid.
    let mut retain_idx = Vec::with_capacity(grid.len());
    for &tau in grid.times() {
        let k = tau * integration_steps as f64;
        if (k - k.round()).abs() > 1e-9 {
            return Err(Error::Precondition(format!(
                "retention time {} not on the {}-step solver grid",
                tau, integration_steps
            )));
        }
        retain_idx.push(k.round() as usize);
    }
    let fine = TimeGrid::uniform(integration_steps)?;
    let clip_shape = teacher.cfg.clip_shape();

    let harvest_one = |i: usize| -> Result<TrajectoryRecord<S>> {
        let prompt_seed = derive_seed(seed, "harvest/prompt", i as u64);
        let noise_seed = derive_seed(seed, "harvest/noise", i as u64);
        let spec = sample_prompt(prompt_seed);
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let z = Tensor::<S>::randn(&clip_shape, &mut rng);
        let field = velocity_field(teacher, teacher_params, spec);
        let (terminal, traj) = ode_sample(&field, &z, &fine, true)?;
        let traj = traj.expect("trajectory requested");
        let mut states: Vec<Tensor<S>> =
            retain_idx.iter().map(|&k| traj[k].clone()).collect();
        states.push(terminal);
        Ok(TrajectoryRecord {
            spec,
            seed: noise_seed,
            states,
        })
    };

    let records: Vec<Result<TrajectoryRecord<S>>> = threads::pool().install(|| {
        use rayon::prelude::*;
        (0..count).into_par_iter().map(harvest_one).collect()
    });
    let records = records.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(OdeTrajectorySet {
        grid: grid.clone(),
        integration_steps,
        seed,
        records,
    })
}

/// How per-frame grid times are drawn during initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeAssignMode {
    /// Independent uniform draw over the grid for every frame.
    Iid,
    /// Draws sorted so later frames are noisier (smaller τ), a
    /// diffusion-forcing style pattern behind a config switch.
    Graded,
}

/// Draw one grid index per frame. Indices address `grid.times()`; the value
/// `grid.len()` stands for the clean endpoint τ = 1.
pub fn sample_time_assignment(
    frames: usize,
    grid_len: usize,
    mode: TimeAssignMode,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..frames).map(|_| rng.gen_range(0..grid_len)).collect();
    if mode == TimeAssignMode::Graded {
        idx.sort_unstable_by(|a, b| b.cmp(a));
    }
    idx
}

fn frame_rows<S: Scalar>(clip: &Tensor<S>, frame: usize, count: usize) -> Tensor<S> {
    let sh = clip.shape();
    let per: usize = sh[1..].iter().product();
    let mut shape = sh.to_vec();
    shape[0] = count;
    Tensor::from_vec(
        &shape,
        clip.data()[frame * per..(frame + count) * per].to_vec(),
    )
    .expect("frame rows")
}

/// Regression loss of one record on the tape: every chunk consumes its
/// frames at the assigned grid times against teacher-forced clean context,
/// predicts the clean endpoint per frame, and is scored against the stored
/// clean frames. `t_assign[i]` may equal `grid.len()` for a clean input.
pub fn ode_init_loss<S: Scalar>(
    model: &DitModel,
    tape: &mut Tape<S>,
    bound: &BoundParams,
    record: &TrajectoryRecord<S>,
    t_assign: &[usize],
    grid: &TimeGrid,
) -> Result<Var> {
    let cfg = &model.cfg;
    if t_assign.len() != cfg.frames {
        return Err(Error::Precondition(format!(
            "time assignment covers {} frames, model has {}",
            t_assign.len(),
            cfg.frames
        )));
    }
    if record.states.len() != grid.len() + 1 {
        return Err(Error::Precondition(format!(
            "record holds {} states, grid wants {}",
            record.states.len(),
            grid.len() + 1
        )));
    }
    let tau_of = |g: usize| -> f64 {
        if g == grid.len() {
            1.0
        } else {
            grid.times()[g]
        }
    };
    let chunk = cfg.chunk;
    let hwc = cfg.height * cfg.width * cfg.channels;
    let mut ctx = CacheVars::empty(cfg.layers);
    let mut total: Option<Var> = None;
    for k in 0..cfg.chunks() {
        let lo = k * chunk;
        // Assemble the chunk input: frame i at its own trajectory state.
        let mut data = Vec::with_capacity(chunk * hwc);
        let mut times = Vec::with_capacity(chunk);
        for i in lo..lo + chunk {
            let g = t_assign[i];
            if g > grid.len() {
                return Err(Error::Precondition(format!(
                    "grid index {} out of range 0..={}",
                    g,
                    grid.len()
                )));
            }
            data.extend_from_slice(frame_rows(&record.states[g], i, 1).data());
            times.push(tau_of(g));
        }
        let noisy = tape.leaf(Tensor::from_vec(
            &[chunk, cfg.height, cfg.width, cfg.channels],
            data,
        )?);
        let (v, _) = model.forward_chunk(tape, bound, noisy, &times, &record.spec, &ctx)?;

        // Clean-endpoint extraction per frame: x + (1−τ)·v.
        let coeffs = Tensor::from_f64_slice(
            &[chunk, 1],
            &times.iter().map(|t| 1.0 - t).collect::<Vec<_>>(),
        )?;
        let coeff_leaf = tape.leaf(coeffs);
        let ones_row = tape.leaf(Tensor::filled(&[1, hwc], S::ONE));
        let coeff_full = tape.matmul(coeff_leaf, ones_row)?;
        let v_flat = tape.reshape(v, &[chunk, hwc])?;
        let scaled = tape.mul(coeff_full, v_flat)?;
        let noisy_flat = tape.reshape(noisy, &[chunk, hwc])?;
        let pred = tape.add(noisy_flat, scaled)?;

        let clean_chunk = frame_rows(record.clean(), lo, chunk);
        let clean_flat = clean_chunk.reshaped(&[chunk, hwc])?;
        let target = tape.leaf(clean_flat);
        let l = tape.mse(pred, target)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });

        // Teacher-forced context: the clean chunk re-encoded at data time.
        if k + 1 < cfg.chunks() {
            let clean_leaf = tape.leaf(clean_chunk);
            let (_, kv) =
                model.forward_chunk(tape, bound, clean_leaf, &vec![1.0; chunk], &record.spec, &ctx)?;
            ctx.push_chunk(kv, chunk);
        }
    }
    tape.scalar_mul(total.unwrap(), 1.0 / cfg.chunks() as f64)
}

/// Per-epoch mean losses from an initialization run.
pub struct OdeInitCurve {
    pub step_losses: Vec<f64>,
    pub epoch_means: Vec<f64>,
}

/// Batched regression over the trajectory set with freshly sampled
/// per-frame times each visit. Updates φ in place and maintains the EMA
/// shadow every step.
#[allow(clippy::too_many_arguments)]
pub fn ode_init_train<S: Scalar>(
    model: &DitModel,
    params: &mut ParamStore<S>,
    ema: &mut ParamStore<S>,
    set: &OdeTrajectorySet<S>,
    epochs: usize,
    batch_size: usize,
    mode: TimeAssignMode,
    opt: &mut AdamW,
    ema_decay: f64,
    seed: u64,
    mut on_step: impl FnMut(usize, f64),
) -> Result<OdeInitCurve> {
    if set.records.is_empty() {
        return Err(Error::Precondition("trajectory set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "ode-init", 0));
    let mut curve = OdeInitCurve {
        step_losses: Vec::new(),
        epoch_means: Vec::new(),
    };
    let mut step = 0usize;
    for _epoch in 0..epochs {
        let mut order: Vec<usize> = (0..set.records.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut epoch_n = 0usize;
        for batch in order.chunks(batch_size.max(1)) {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, params)?;
            let mut total: Option<Var> = None;
            for &ri in batch {
                let record = &set.records[ri];
                let t_assign =
                    sample_time_assignment(model.cfg.frames, set.grid.len(), mode, &mut rng);
                let l = ode_init_loss(model, &mut tape, &bound, record, &t_assign, &set.grid)?;
                total = Some(match total {
                    Some(acc) => tape.add(acc, l)?,
                    None => l,
                });
            }
            let loss = tape.scalar_mul(total.unwrap(), 1.0 / batch.len() as f64)?;
            let value = tape.value(loss).scalar_value().to_f64();
            if !value.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite initialization loss at step {step}"
                )));
            }
            let grads = tape.backward(loss)?.into_param_map();
            opt.step(params, &grads)?;
            ema_update(ema, params, ema_decay)?;
            curve.step_losses.push(value);
            on_step(step, value);
            epoch_sum += value;
            epoch_n += 1;
            step += 1;
        }
        curve.epoch_means.push(epoch_sum / epoch_n as f64);
    }
    Ok(curve)
}
