//! Few-step sampling and chunk-wise streaming generation.
//!
//! The few-step rule at each grid time τ: predict the clean endpoint
//! x̂₁ = x + (1−τ)·v(x, τ), then re-interpolate deterministically against
//! the original noise for the next grid time. The final output is the last
//! clean prediction. Chunk-wise generation applies this per chunk, with
//! finalized chunks re-encoded at data time (τ = 1) into the KV cache.

use crate::diffcore::{Scalar, Tape, Tensor, Var};
use crate::flowmatch::{SampleVelocity, TimeGrid};
use crate::model::{BoundParams, DitModel, KvCache, ParamStore};
use crate::synthvid::PromptSpec;
use crate::{Error, Result};

/// On-tape few-step sampler. `forward` records one velocity evaluation at
/// (state, τ); the returned node is the final clean prediction.
pub fn few_step_clean<S: Scalar>(
    tape: &mut Tape<S>,
    mut forward: impl FnMut(&mut Tape<S>, Var, f64) -> Result<Var>,
    z: &Tensor<S>,
    grid: &TimeGrid,
) -> Result<Var> {
    let z_leaf = tape.leaf(z.clone());
    let mut x = z_leaf;
    let mut clean = None;
    for (k, &tau) in grid.times().iter().enumerate() {
        let v = forward(tape, x, tau)?;
        let stretched = tape.scalar_mul(v, 1.0 - tau)?;
        let c = tape.add(x, stretched)?;
        clean = Some(c);
        if k + 1 < grid.len() {
            let tau_next = grid.times()[k + 1];
            let from_noise = tape.scalar_mul(z_leaf, 1.0 - tau_next)?;
            let from_clean = tape.scalar_mul(c, tau_next)?;
            x = tape.add(from_noise, from_clean)?;
        }
    }
    clean.ok_or_else(|| Error::Precondition("empty time grid".into()))
}

/// Few-step generation through the bidirectional model, recorded on a tape
/// (distillation backpropagates through all grid steps).
pub fn few_step_on_tape<S: Scalar>(
    model: &DitModel,
    tape: &mut Tape<S>,
    bound: &BoundParams,
    z: &Tensor<S>,
    grid: &TimeGrid,
    spec: &PromptSpec,
) -> Result<Var> {
    few_step_clean(
        tape,
        |tape, x, tau| model.forward_bidirectional(tape, bound, x, tau, spec),
        z,
        grid,
    )
}

/// Plain-tensor few-step generation (no gradients).
pub fn few_step_generate<S: Scalar>(
    model: &DitModel,
    params: &ParamStore<S>,
    z: &Tensor<S>,
    grid: &TimeGrid,
    spec: &PromptSpec,
) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, params)?;
    let out = few_step_on_tape(model, &mut tape, &bound, z, grid, spec)?;
    Ok(tape.detach(out))
}

/// Read-only velocity field backed by a bidirectional model, for the ODE
/// sampler. Each evaluation runs on a throwaway tape.
pub fn velocity_field<'a, S: Scalar>(
    model: &'a DitModel,
    params: &'a ParamStore<S>,
    spec: PromptSpec,
) -> impl SampleVelocity<S> + 'a {
    move |x: &Tensor<S>, tau: f64| {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, params)?;
        let xv = tape.leaf(x.clone());
        let v = model.forward_bidirectional(&mut tape, &bound, xv, tau.min(1.0), &spec)?;
        Ok(tape.detach(v))
    }
}

/// Dense-solver teacher sampling: Euler over a uniform grid from noise to
/// data time.
pub fn ode_clip_teacher<S: Scalar>(
    model: &DitModel,
    params: &ParamStore<S>,
    spec: &PromptSpec,
    steps: usize,
    z: &Tensor<S>,
) -> Result<Tensor<S>> {
    let grid = TimeGrid::uniform(steps)?;
    let field = velocity_field(model, params, *spec);
    let (out, _) = crate::flowmatch::ode_sample(&field, z, &grid, false)?;
    Ok(out)
}

fn chunk_rows<S: Scalar>(clip: &Tensor<S>, cfg_chunk: usize, hwc: usize, k: usize) -> Tensor<S> {
    let n = cfg_chunk * hwc;
    Tensor::from_vec(
        &[cfg_chunk, clip.shape()[1], clip.shape()[2], clip.shape()[3]],
        clip.data()[k * n..(k + 1) * n].to_vec(),
    )
    .expect("chunk rows")
}

/// Denoise one chunk on a fresh tape against a plain cache, then re-encode
/// the finalized chunk at data time and append it. Returns the clean chunk.
fn denoise_and_append<S: Scalar>(
    model: &DitModel,
    params: &ParamStore<S>,
    spec: &PromptSpec,
    grid: &TimeGrid,
    z_chunk: &Tensor<S>,
    cache: &mut KvCache<S>,
) -> Result<Tensor<S>> {
    let chunk = model.cfg.chunk;
    let clean = {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, params)?;
        let ctx = model.leafify_cache(&mut tape, cache);
        let out = few_step_clean(
            &mut tape,
            |tape, x, tau| {
                model
                    .forward_chunk(tape, &bound, x, &vec![tau; chunk], spec, &ctx)
                    .map(|(v, _)| v)
            },
            z_chunk,
            grid,
        )?;
        tape.detach(out)
    };
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, params)?;
    let x = tape.leaf(clean.clone());
    model.forward_causal(&mut tape, &bound, x, &vec![1.0; chunk], spec, cache)?;
    Ok(clean)
}

/// Streaming chunk-wise generation with the KV cache. Deterministic given
/// (params, z, grid, spec).
pub fn generate_clip_causal<S: Scalar>(
    model: &DitModel,
    params: &ParamStore<S>,
    spec: &PromptSpec,
    grid: &TimeGrid,
    z: &Tensor<S>,
) -> Result<Tensor<S>> {
    let cfg = &model.cfg;
    expect_clip_shape(cfg.clip_shape(), z)?;
    let hwc = cfg.height * cfg.width * cfg.channels;
    let mut cache = KvCache::new(cfg);
    let mut data = Vec::with_capacity(z.numel());
    for k in 0..cfg.chunks() {
        let z_k = chunk_rows(z, cfg.chunk, hwc, k);
        let clean = denoise_and_append(model, params, spec, grid, &z_k, &mut cache)?;
        data.extend_from_slice(clean.data());
    }
    Tensor::from_vec(&cfg.clip_shape(), data)
}

/// Generate the first chunk only; the latency probe for the runtime harness.
pub fn generate_first_chunk<S: Scalar>(
    model: &DitModel,
    params: &ParamStore<S>,
    spec: &PromptSpec,
    grid: &TimeGrid,
    z: &Tensor<S>,
) -> Result<Tensor<S>> {
    let cfg = &model.cfg;
    expect_clip_shape(cfg.clip_shape(), z)?;
    let hwc = cfg.height * cfg.width * cfg.channels;
    let z_0 = chunk_rows(z, cfg.chunk, hwc, 0);
    let mut cache = KvCache::new(cfg);
    denoise_and_append(model, params, spec, grid, &z_0, &mut cache)
}

/// Cache-free baseline: every denoising step of chunk k re-runs the full
/// prefix (finalized clean frames at data time) through a block-causal pass.
/// Mathematically identical to the cached route, strictly more compute.
pub fn generate_clip_uncached<S: Scalar>(
    model: &DitModel,
    params: &ParamStore<S>,
    spec: &PromptSpec,
    grid: &TimeGrid,
    z: &Tensor<S>,
) -> Result<Tensor<S>> {
    let cfg = &model.cfg;
    expect_clip_shape(cfg.clip_shape(), z)?;
    let hwc = cfg.height * cfg.width * cfg.channels;
    let chunk = cfg.chunk;
    let mut prefix: Vec<S> = Vec::with_capacity(z.numel());
    for k in 0..cfg.chunks() {
        let z_k = chunk_rows(z, chunk, hwc, k);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, params)?;
        let n_frames = (k + 1) * chunk;
        let prefix_times = vec![1.0; k * chunk];
        let out = few_step_clean(
            &mut tape,
            |tape, x_chunk, tau| {
                // Rebuild [prefix ++ current chunk] and run it end to end.
                let joint = if k == 0 {
                    x_chunk
                } else {
                    let p = tape.leaf(
                        Tensor::from_vec(
                            &[k * chunk, cfg.height, cfg.width, cfg.channels],
                            prefix.clone(),
                        )
                        .expect("prefix rows"),
                    );
                    tape.concat(&[p, x_chunk], 0)?
                };
                let mut times = prefix_times.clone();
                times.extend(std::iter::repeat(tau).take(chunk));
                let full = model.forward_block_causal(tape, &bound, joint, &times, spec)?;
                // Keep only the current chunk's prediction rows.
                tape.slice(full, 0, k * chunk, chunk)
            },
            &z_k,
            grid,
        )?;
        let _ = n_frames;
        prefix.extend_from_slice(tape.value(out).data());
    }
    Tensor::from_vec(&cfg.clip_shape(), prefix)
}

/// A chunk-wise rollout whose final `depth` chunks up to and including
/// `supervised_chunk` stay on a live tape for backpropagation; everything
/// earlier enters as constant cached context.
pub struct TracedRollout<S: Scalar> {
    pub tape: Tape<S>,
    /// Clean output of the supervised chunk, on the tape.
    pub chunk_var: Var,
    pub chunk_index: usize,
    /// The complete generated clip (detached values).
    pub clip: Tensor<S>,
}

pub fn rollout_traced<S: Scalar>(
    model: &DitModel,
    params: &ParamStore<S>,
    spec: &PromptSpec,
    grid: &TimeGrid,
    z: &Tensor<S>,
    supervised_chunk: usize,
    depth: usize,
) -> Result<TracedRollout<S>> {
    let cfg = &model.cfg;
    expect_clip_shape(cfg.clip_shape(), z)?;
    let chunks = cfg.chunks();
    if supervised_chunk >= chunks {
        return Err(Error::Precondition(format!(
            "supervised chunk {} out of range 0..{}",
            supervised_chunk, chunks
        )));
    }
    let depth = depth.max(1);
    let window_start = supervised_chunk.saturating_sub(depth - 1);
    let hwc = cfg.height * cfg.width * cfg.channels;
    let chunk = cfg.chunk;

    let mut cache = KvCache::new(cfg);
    let mut clip_data: Vec<S> = Vec::with_capacity(z.numel());

    // Constant prefix, off the tape.
    for k in 0..window_start {
        let z_k = chunk_rows(z, chunk, hwc, k);
        let clean = denoise_and_append(model, params, spec, grid, &z_k, &mut cache)?;
        clip_data.extend_from_slice(clean.data());
    }

    // Traced window: one tape, parameters bound once, context grows on-tape.
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, params)?;
    let mut ctx = model.leafify_cache(&mut tape, &cache);
    let mut chunk_var = None;
    for k in window_start..=supervised_chunk {
        let z_k = chunk_rows(z, chunk, hwc, k);
        let clean = few_step_clean(
            &mut tape,
            |tape, x, tau| {
                model
                    .forward_chunk(tape, &bound, x, &vec![tau; chunk], spec, &ctx)
                    .map(|(v, _)| v)
            },
            &z_k,
            grid,
        )?;
        clip_data.extend_from_slice(tape.value(clean).data());
        if k == supervised_chunk {
            chunk_var = Some(clean);
        }
        if k + 1 < chunks {
            // Re-encode the finalized chunk at data time; within the traced
            // window this stays on the tape so gradients can reach it.
            let (_, kv) =
                model.forward_chunk(&mut tape, &bound, clean, &vec![1.0; chunk], spec, &ctx)?;
            let detached = kv.iter().map(|&(kk, vv)| (tape.detach(kk), tape.detach(vv)));
            cache.append_chunk(detached.collect())?;
            ctx.push_chunk(kv, chunk);
        }
    }

    // Remaining chunks, off the tape, against the full plain cache.
    for k in supervised_chunk + 1..chunks {
        let z_k = chunk_rows(z, chunk, hwc, k);
        let clean = denoise_and_append(model, params, spec, grid, &z_k, &mut cache)?;
        clip_data.extend_from_slice(clean.data());
    }

    Ok(TracedRollout {
        tape,
        chunk_var: chunk_var.expect("window includes supervised chunk"),
        chunk_index: supervised_chunk,
        clip: Tensor::from_vec(&cfg.clip_shape(), clip_data)?,
    })
}

fn expect_clip_shape<S: Scalar>(shape: [usize; 4], z: &Tensor<S>) -> Result<()> {
    if z.shape() != shape {
        return Err(Error::ShapeMismatch {
            op: "rollout",
            lhs: shape.to_vec(),
            rhs: z.shape().to_vec(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowmatch::ode_sample;
    use crate::model::{AttentionMode, ModelConfig, RoleTag};
    use crate::synthvid::sample_prompt;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_causal() -> DitModel {
        DitModel::new(ModelConfig {
            frames: 4,
            height: 8,
            width: 8,
            channels: 3,
            patch: 4,
            embed_dim: 16,
            heads: 2,
            layers: 2,
            chunk: 2,
            cond_dim: crate::synthvid::COND_DIM,
            time_enc_dim: 8,
            mode: AttentionMode::Causal,
        })
        .unwrap()
    }

    fn rough_store(model: &DitModel, seed: u64) -> ParamStore<f64> {
        let mut store = model.init_params::<f64>(RoleTag::Student, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
        let names: Vec<String> = store.iter().map(|(n, _)| n.clone()).collect();
        for name in names {
            let sh = store.get(&name).unwrap().shape().to_vec();
            let fan = if sh.len() == 2 { sh[0] } else { 4 };
            store
                .set(
                    &name,
                    Tensor::randn(&sh, &mut rng).scale(0.5 / (fan as f64).sqrt()),
                )
                .unwrap();
        }
        store
    }

    #[test]
    fn one_step_grid_single_prediction() {
        let grid = TimeGrid::new(vec![0.0]).unwrap();
        let z = Tensor::<f64>::from_f64_slice(&[2], &[0.5, -0.5]).unwrap();
        let c = [1.0, 2.0];
        let mut tape = Tape::new();
        let out = few_step_clean(
            &mut tape,
            |tape, _x, _tau| Ok(tape.leaf(Tensor::from_f64_slice(&[2], &c).unwrap())),
            &z,
            &grid,
        )
        .unwrap();
        assert_eq!(tape.value(out).data(), &[1.5, 1.5]);
    }

    #[test]
    fn oracle_field_four_step_matches_dense_euler() {
        // Conditional-OT field toward a fixed endpoint: v(x, τ) = (c−x)/(1−τ).
        // Both the few-step sampler and a dense Euler pass land exactly on c.
        let c = Tensor::<f64>::from_f64_slice(&[4], &[0.3, -0.8, 1.2, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::<f64>::randn(&[4], &mut rng);

        let field = |x: &Tensor<f64>, tau: f64| {
            let s = 1.0 / (1.0 - tau);
            x.zip(&c, |xi, ci| (ci - xi) * s)
        };
        let (dense, _) = ode_sample(&field, &z, &TimeGrid::uniform(32).unwrap(), false).unwrap();

        let mut tape = Tape::new();
        let few = few_step_clean(
            &mut tape,
            |tape, x, tau| {
                let xv = tape.detach(x);
                let v = field(&xv, tau)?;
                Ok(tape.leaf(v))
            },
            &z,
            &TimeGrid::four_step(),
        )
        .unwrap();
        let few = tape.detach(few);
        assert!(few.max_abs_diff(&dense) < 1e-6);
        assert!(few.max_abs_diff(&c) < 1e-9);
    }

    #[test]
    fn causal_generation_deterministic() {
        let model = tiny_causal();
        let store = rough_store(&model, 3);
        let spec = sample_prompt(9);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = Tensor::<f64>::randn(&[4, 8, 8, 3], &mut rng);
        let grid = TimeGrid::four_step();
        let a = generate_clip_causal(&model, &store, &spec, &grid, &z).unwrap();
        let b = generate_clip_causal(&model, &store, &spec, &grid, &z).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn uncached_baseline_matches_cached_route() {
        let model = tiny_causal();
        let store = rough_store(&model, 5);
        let spec = sample_prompt(10);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = Tensor::<f64>::randn(&[4, 8, 8, 3], &mut rng);
        let grid = TimeGrid::four_step();
        let cached = generate_clip_causal(&model, &store, &spec, &grid, &z).unwrap();
        let uncached = generate_clip_uncached(&model, &store, &spec, &grid, &z).unwrap();
        let diff = cached.max_abs_diff(&uncached);
        assert!(diff < 1e-9, "route divergence {}", diff);
    }

    #[test]
    fn traced_rollout_clip_matches_plain_rollout() {
        let model = tiny_causal();
        let store = rough_store(&model, 7);
        let spec = sample_prompt(11);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = Tensor::<f64>::randn(&[4, 8, 8, 3], &mut rng);
        let grid = TimeGrid::four_step();
        let plain = generate_clip_causal(&model, &store, &spec, &grid, &z).unwrap();
        for supervised in 0..2 {
            let traced = rollout_traced(&model, &store, &spec, &grid, &z, supervised, 1).unwrap();
            assert!(plain.max_abs_diff(&traced.clip) < 1e-9);
            // The supervised chunk's on-tape value agrees with the clip.
            let hwc = 8 * 8 * 3;
            let rows = traced.tape.value(traced.chunk_var).data();
            assert_eq!(
                rows,
                &plain.data()[supervised * 2 * hwc..(supervised + 1) * 2 * hwc]
            );
        }
    }

    #[test]
    fn traced_tape_size_independent_of_prefix_length() {
        // Truncation isolation: with depth 1, the tape records only the
        // supervised chunk's generation, so its node count must not grow
        // with the number of earlier chunks.
        let model = tiny_causal();
        let store = rough_store(&model, 9);
        let spec = sample_prompt(12);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let z = Tensor::<f64>::randn(&[4, 8, 8, 3], &mut rng);
        let grid = TimeGrid::four_step();
        let t1 = rollout_traced(&model, &store, &spec, &grid, &z, 0, 1).unwrap();
        let t2 = rollout_traced(&model, &store, &spec, &grid, &z, 1, 1).unwrap();
        // Chunk 1's tape additionally holds the leafified context (2 leaves
        // per layer) but no extra computation nodes.
        let leaf_allowance = 2 * model.cfg.layers + 2;
        assert!(
            t2.tape.len() <= t1.tape.len() + leaf_allowance,
            "tape grew with prefix: {} vs {}",
            t2.tape.len(),
            t1.tape.len()
        );
    }

    #[test]
    fn traced_rollout_gradients_reach_parameters() {
        let model = tiny_causal();
        let store = rough_store(&model, 11);
        let spec = sample_prompt(13);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let z = Tensor::<f64>::randn(&[4, 8, 8, 3], &mut rng);
        let grid = TimeGrid::four_step();
        let mut traced = rollout_traced(&model, &store, &spec, &grid, &z, 1, 1).unwrap();
        let loss = {
            let tape = &mut traced.tape;
            tape.mean(traced.chunk_var).unwrap()
        };
        let grads = traced.tape.backward(loss).unwrap().into_param_map();
        let total: f64 = grads.values().map(|g| g.l2_norm()).sum();
        assert!(total > 0.0, "no gradient reached the parameters");
    }
}
