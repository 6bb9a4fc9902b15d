//! DiT-style velocity network over spatial patches of video frames.
//!
//! One architecture serves both roles: the teacher runs full spatiotemporal
//! attention with a scalar timestep, the student runs chunk-level
//! block-causal attention with per-frame timesteps and an optional KV cache.
//! Timestep and prompt conditioning enter through adaptive layer-norm
//! modulation, zero-initialized so an untrained model is the zero field.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AttentionMode, KvCache, ModelConfig, ParamStore, RoleTag};
use crate::diffcore::{Scalar, Tape, Tensor, Var};
use crate::synthvid::{cond_table_specs, encode_prompt, CondTables, PromptSpec};
use crate::{Error, Result};

/// Sinusoidal features for per-frame flow times, shape `[times.len(), dim]`.
pub fn sinusoid_time_features<S: Scalar>(times: &[f64], dim: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(times.len() * dim);
    let half = dim / 2;
    for &t in times {
        for j in 0..half {
            let freq = (10_000.0_f64).powf(-(j as f64) / half as f64);
            let a = 1000.0 * t * freq;
            data.push(S::from_f64(a.sin()));
            data.push(S::from_f64(a.cos()));
        }
    }
    Tensor::from_vec(&[times.len(), dim], data).expect("time features")
}

/// Parameters of one model instance bound onto a tape.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid("bound_params", format!("missing parameter {name}")))
    }
}

/// Context keys/values living on the tape, ordered oldest chunk first.
/// Pieces may be leaves (frozen context from a [`KvCache`]) or derived nodes
/// (teacher-forced or traced context that gradients must reach).
pub struct CacheVars {
    layers: Vec<Vec<(Var, Var)>>,
    frames: usize,
}

impl CacheVars {
    pub fn empty(layers: usize) -> Self {
        CacheVars {
            layers: vec![Vec::new(); layers],
            frames: 0,
        }
    }

    /// Context frame count represented by the pieces.
    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Append one chunk's per-layer K/V nodes.
    pub fn push_chunk(&mut self, per_layer: Vec<(Var, Var)>, chunk_frames: usize) {
        debug_assert_eq!(per_layer.len(), self.layers.len());
        for (slot, kv) in self.layers.iter_mut().zip(per_layer) {
            slot.push(kv);
        }
        self.frames += chunk_frames;
    }

    fn pieces(&self, layer: usize) -> &[(Var, Var)] {
        &self.layers[layer]
    }
}

/// The transformer. Stateless; parameters live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct DitModel {
    pub cfg: ModelConfig,
}

impl DitModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(DitModel { cfg })
    }

    /// Canonical parameter enumeration: name, shape, and init family.
    fn param_layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let d = self.cfg.embed_dim;
        let pd = self.cfg.patch_dim();
        let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
        out.push(("patch/w".into(), vec![pd, d], Init::Normal(0.02)));
        out.push(("patch/b".into(), vec![d], Init::Zero));
        out.push((
            "pos/spatial".into(),
            vec![self.cfg.tokens_per_frame(), d],
            Init::Normal(0.01),
        ));
        out.push((
            "pos/temporal".into(),
            vec![self.cfg.frames, d],
            Init::Normal(0.01),
        ));
        for (name, shape) in cond_table_specs() {
            out.push((name.into(), shape.to_vec(), Init::Normal(0.02)));
        }
        let cond_in = self.cfg.cond_dim + self.cfg.time_enc_dim;
        out.push(("cond/mlp0_w".into(), vec![cond_in, d], Init::Normal(0.02)));
        out.push(("cond/mlp0_b".into(), vec![d], Init::Zero));
        out.push(("cond/mlp1_w".into(), vec![d, d], Init::Normal(0.02)));
        out.push(("cond/mlp1_b".into(), vec![d], Init::Zero));
        for l in 0..self.cfg.layers {
            let p = |s: &str| format!("blk{}/{}", l, s);
            for w in ["attn_q", "attn_k", "attn_v", "attn_o"] {
                out.push((p(&format!("{w}_w")), vec![d, d], Init::Normal(0.02)));
                out.push((p(&format!("{w}_b")), vec![d], Init::Zero));
            }
            // adaLN modulation starts at zero so each block begins as identity.
            out.push((p("mod_w"), vec![d, 6 * d], Init::Zero));
            out.push((p("mod_b"), vec![6 * d], Init::Zero));
            out.push((p("mlp0_w"), vec![d, 4 * d], Init::Normal(0.02)));
            out.push((p("mlp0_b"), vec![4 * d], Init::Zero));
            out.push((p("mlp1_w"), vec![4 * d, d], Init::Normal(0.02)));
            out.push((p("mlp1_b"), vec![d], Init::Zero));
        }
        out.push(("out/mod_w".into(), vec![d, 2 * d], Init::Zero));
        out.push(("out/mod_b".into(), vec![2 * d], Init::Zero));
        out.push(("out/head_w".into(), vec![d, pd], Init::Zero));
        out.push(("out/head_b".into(), vec![pd], Init::Zero));
        out
    }

    /// Deterministic parameter init for a fresh model.
    pub fn init_params<S: Scalar>(&self, role: RoleTag, seed: u64) -> ParamStore<S> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(role);
        for (name, shape, init) in self.param_layout() {
            let t = match init {
                Init::Zero => Tensor::zeros(&shape),
                Init::Normal(std) => Tensor::<S>::randn(&shape, &mut rng).scale(S::from_f64(std)),
            };
            store.insert(name, t).expect("unique layout names");
        }
        store
    }

    /// Bind every parameter onto the tape, in sorted-name order.
    pub fn bind<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>) -> Result<BoundParams> {
        let mut vars = BTreeMap::new();
        for (name, tensor) in store.iter() {
            vars.insert(name.clone(), tape.param(name.clone(), tensor.clone()));
        }
        for (name, shape, _) in self.param_layout() {
            match vars.get(&name) {
                None => {
                    return Err(Error::Precondition(format!(
                        "parameter store is missing {name}"
                    )))
                }
                Some(v) => {
                    if tape.value(*v).shape() != shape.as_slice() {
                        return Err(Error::ShapeMismatch {
                            op: "bind",
                            lhs: shape,
                            rhs: tape.value(*v).shape().to_vec(),
                        });
                    }
                }
            }
        }
        Ok(BoundParams { vars })
    }

    // ── Public forwards ──────────────────────────────────────────────

    /// Teacher pass: full attention over the whole clip at one flow time.
    pub fn forward_bidirectional<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundParams,
        x_t: Var,
        t: f64,
        spec: &PromptSpec,
    ) -> Result<Var> {
        if self.cfg.mode != AttentionMode::Bidirectional {
            return Err(Error::Precondition(
                "forward_bidirectional requires bidirectional mode".into(),
            ));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Precondition(format!("time {} outside [0, 1]", t)));
        }
        let times = vec![t; self.cfg.frames];
        let (out, _) = self.forward_frames(tape, bound, x_t, &times, 0, spec, Masking::None, None)?;
        Ok(out)
    }

    /// Student pass over a full clip with per-frame times and the
    /// chunk-level block-causal mask; the uncached route.
    pub fn forward_block_causal<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundParams,
        x: Var,
        times: &[f64],
        spec: &PromptSpec,
    ) -> Result<Var> {
        if self.cfg.mode != AttentionMode::Causal {
            return Err(Error::Precondition(
                "forward_block_causal requires causal mode".into(),
            ));
        }
        let (out, _) =
            self.forward_frames(tape, bound, x, times, 0, spec, Masking::BlockCausal, None)?;
        Ok(out)
    }

    /// Cached student pass over one chunk: attends to all cached chunks plus
    /// itself, then appends this chunk's keys/values and advances the cursor.
    pub fn forward_causal<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundParams,
        chunk_x: Var,
        times: &[f64],
        spec: &PromptSpec,
        cache: &mut KvCache<S>,
    ) -> Result<Var> {
        if !cache.matches(&self.cfg) {
            return Err(Error::Precondition(
                "KV cache does not match the model configuration".into(),
            ));
        }
        let ctx = self.leafify_cache(tape, cache);
        let (out, kv) = self.forward_chunk(tape, bound, chunk_x, times, spec, &ctx)?;
        let detached = kv
            .iter()
            .map(|&(k, v)| (tape.detach(k), tape.detach(v)))
            .collect();
        cache.append_chunk(detached)?;
        Ok(out)
    }

    /// Bring a plain cache onto the tape as constant leaves.
    pub fn leafify_cache<S: Scalar>(&self, tape: &mut Tape<S>, cache: &KvCache<S>) -> CacheVars {
        let mut ctx = CacheVars::empty(self.cfg.layers);
        if cache.cursor_tokens() == 0 {
            return ctx;
        }
        let mut per_layer = Vec::with_capacity(self.cfg.layers);
        for l in 0..self.cfg.layers {
            let (k, v) = cache.layer(l);
            let kl = tape.leaf(k.clone());
            let vl = tape.leaf(v.clone());
            per_layer.push((kl, vl));
        }
        ctx.push_chunk(per_layer, cache.cursor_frames());
        ctx
    }

    /// Student pass over one chunk against tape-level context; generation
    /// uses this for intermediate denoising steps, training stages use it
    /// when gradients must flow into the context encodings. Returns the
    /// chunk's K/V nodes for the caller to extend the context with.
    pub fn forward_chunk<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundParams,
        chunk_x: Var,
        times: &[f64],
        spec: &PromptSpec,
        ctx: &CacheVars,
    ) -> Result<(Var, Vec<(Var, Var)>)> {
        if self.cfg.mode != AttentionMode::Causal {
            return Err(Error::Precondition("forward_chunk requires causal mode".into()));
        }
        if ctx.frames() + self.cfg.chunk > self.cfg.frames {
            return Err(Error::Precondition(format!(
                "context already holds {} of {} frames",
                ctx.frames(),
                self.cfg.frames
            )));
        }
        if times.len() != self.cfg.chunk {
            return Err(Error::Precondition(format!(
                "need {} per-frame times for a chunk, got {}",
                self.cfg.chunk,
                times.len()
            )));
        }
        self.forward_frames(
            tape,
            bound,
            chunk_x,
            times,
            ctx.frames(),
            spec,
            Masking::None,
            Some(ctx),
        )
    }

    // ── Shared implementation ────────────────────────────────────────

    #[allow(clippy::too_many_arguments)]
    fn forward_frames<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundParams,
        x: Var,
        times: &[f64],
        frame_offset: usize,
        spec: &PromptSpec,
        masking: Masking,
        ctx: Option<&CacheVars>,
    ) -> Result<(Var, Vec<(Var, Var)>)> {
        let cfg = &self.cfg;
        let n_frames = times.len();
        let expect = [n_frames, cfg.height, cfg.width, cfg.channels];
        if tape.value(x).shape() != expect {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: expect.to_vec(),
                rhs: tape.value(x).shape().to_vec(),
            });
        }
        if let Some(&bad) = times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Precondition(format!("time {} outside [0, 1]", bad)));
        }
        if frame_offset + n_frames > cfg.frames {
            return Err(Error::Precondition("pass exceeds configured frame count".into()));
        }
        let tpf = cfg.tokens_per_frame();
        let n_tok = n_frames * tpf;
        let d = cfg.embed_dim;

        // Tokens: gather patches, project, add factored position embeddings.
        let patches = self.patchify(tape, x, n_frames)?;
        let mut tok = linear(tape, patches, bound, "patch/w", "patch/b")?;
        let spatial_idx: Arc<Vec<usize>> = Arc::new((0..n_tok).map(|i| i % tpf).collect());
        let temporal_idx: Arc<Vec<usize>> =
            Arc::new((0..n_tok).map(|i| frame_offset + i / tpf).collect());
        let pos_s = tape.embed(bound.var("pos/spatial")?, spatial_idx)?;
        let pos_t = tape.embed(bound.var("pos/temporal")?, temporal_idx)?;
        tok = tape.add(tok, pos_s)?;
        tok = tape.add(tok, pos_t)?;

        // Per-frame conditioning rows [n_frames, d].
        let cond = self.cond_frames(tape, bound, spec, times)?;
        let tok_frame: Arc<Vec<usize>> = Arc::new((0..n_tok).map(|i| i / tpf).collect());

        // Optional additive attention mask.
        let mask = match masking {
            Masking::None => None,
            Masking::BlockCausal => Some(tape.leaf(self.block_causal_mask(n_frames)?)),
        };

        let mut kv_out = Vec::with_capacity(cfg.layers);
        let mut h = tok;
        for l in 0..cfg.layers {
            let p = |s: &str| format!("blk{}/{}", l, s);
            // Expand per-frame modulation to per-token rows.
            let mod_rows = linear(tape, cond, bound, &p("mod_w"), &p("mod_b"))?;
            let mod_tok = tape.embed(mod_rows, tok_frame.clone())?;
            let m = |tape: &mut Tape<S>, i: usize| tape.slice(mod_tok, 1, i * d, d);
            let (sh1, sc1, g1) = (m(tape, 0)?, m(tape, 1)?, m(tape, 2)?);
            let (sh2, sc2, g2) = (m(tape, 3)?, m(tape, 4)?, m(tape, 5)?);

            // Attention with modulated pre-norm.
            let normed = tape.layer_norm(h)?;
            let a_in = modulate(tape, normed, sc1, sh1)?;
            let q = linear(tape, a_in, bound, &p("attn_q_w"), &p("attn_q_b"))?;
            let k = linear(tape, a_in, bound, &p("attn_k_w"), &p("attn_k_b"))?;
            let v = linear(tape, a_in, bound, &p("attn_v_w"), &p("attn_v_b"))?;
            kv_out.push((k, v));

            let (k_all, v_all) = match ctx {
                Some(c) if !c.pieces(l).is_empty() => {
                    let mut ks: Vec<Var> = c.pieces(l).iter().map(|&(k, _)| k).collect();
                    let mut vs: Vec<Var> = c.pieces(l).iter().map(|&(_, v)| v).collect();
                    ks.push(k);
                    vs.push(v);
                    (tape.concat(&ks, 0)?, tape.concat(&vs, 0)?)
                }
                _ => (k, v),
            };

            let dh = cfg.head_dim();
            let scale = 1.0 / (dh as f64).sqrt();
            let mut heads = Vec::with_capacity(cfg.heads);
            for hd in 0..cfg.heads {
                let qh = tape.slice(q, 1, hd * dh, dh)?;
                let kh = tape.slice(k_all, 1, hd * dh, dh)?;
                let vh = tape.slice(v_all, 1, hd * dh, dh)?;
                let kt = tape.transpose(kh)?;
                let mut scores = tape.matmul(qh, kt)?;
                scores = tape.scalar_mul(scores, scale)?;
                if let Some(mask) = mask {
                    scores = tape.add(scores, mask)?;
                }
                let probs = tape.softmax(scores)?;
                heads.push(tape.matmul(probs, vh)?);
            }
            let merged = tape.concat(&heads, 1)?;
            let attn = linear(tape, merged, bound, &p("attn_o_w"), &p("attn_o_b"))?;
            let gated = tape.mul(g1, attn)?;
            h = tape.add(h, gated)?;

            // MLP with modulated pre-norm.
            let normed2 = tape.layer_norm(h)?;
            let m_in = modulate(tape, normed2, sc2, sh2)?;
            let mid = linear(tape, m_in, bound, &p("mlp0_w"), &p("mlp0_b"))?;
            let mid = tape.gelu(mid)?;
            let mlp = linear(tape, mid, bound, &p("mlp1_w"), &p("mlp1_b"))?;
            let gated2 = tape.mul(g2, mlp)?;
            h = tape.add(h, gated2)?;
        }

        // Output head with its own modulation.
        let out_mod = linear(tape, cond, bound, "out/mod_w", "out/mod_b")?;
        let out_tok = tape.embed(out_mod, tok_frame)?;
        let sh = tape.slice(out_tok, 1, 0, d)?;
        let sc = tape.slice(out_tok, 1, d, d)?;
        let normed = tape.layer_norm(h)?;
        let hmod = modulate(tape, normed, sc, sh)?;
        let y = linear(tape, hmod, bound, "out/head_w", "out/head_b")?;
        let out = self.unpatchify(tape, y, n_frames)?;
        Ok((out, kv_out))
    }

    /// Per-frame conditioning rows: prompt encoding broadcast over frames,
    /// concatenated with sinusoidal time features, through a 2-layer MLP.
    fn cond_frames<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundParams,
        spec: &PromptSpec,
        times: &[f64],
    ) -> Result<Var> {
        let tables = CondTables {
            shape: bound.var("cond/shape_emb")?,
            color: bound.var("cond/color_emb")?,
            motion: bound.var("cond/motion_emb")?,
        };
        let prompt = encode_prompt(tape, &tables, spec)?;
        let rows: Arc<Vec<usize>> = Arc::new(vec![0; times.len()]);
        let prompt_rows = tape.embed(prompt, rows)?;
        let time_feats = tape.leaf(sinusoid_time_features(times, self.cfg.time_enc_dim));
        let joint = tape.concat(&[prompt_rows, time_feats], 1)?;
        let hidden = linear(tape, joint, bound, "cond/mlp0_w", "cond/mlp0_b")?;
        let hidden = tape.gelu(hidden)?;
        linear(tape, hidden, bound, "cond/mlp1_w", "cond/mlp1_b")
    }

    /// Additive mask: token i may attend token j iff chunk(j) ≤ chunk(i).
    fn block_causal_mask<S: Scalar>(&self, n_frames: usize) -> Result<Tensor<S>> {
        let tpf = self.cfg.tokens_per_frame();
        let n = n_frames * tpf;
        let chunk_tokens = self.cfg.chunk * tpf;
        let mut data = vec![S::ZERO; n * n];
        let blocked = S::from_f64(-1e9);
        for i in 0..n {
            let ci = i / chunk_tokens;
            for j in 0..n {
                if j / chunk_tokens > ci {
                    data[i * n + j] = blocked;
                }
            }
        }
        Tensor::from_vec(&[n, n], data)
    }

    /// `[n_frames, H, W, C]` → `[n_frames·tpf, patch_dim]` as a pure gather;
    /// the scatter-add backward of the gather is its exact adjoint.
    fn patchify<S: Scalar>(&self, tape: &mut Tape<S>, x: Var, n_frames: usize) -> Result<Var> {
        let cfg = &self.cfg;
        let numel = tape.value(x).numel();
        let flat = tape.reshape(x, &[numel, 1])?;
        let idx = Arc::new(patch_gather_indices(cfg, n_frames));
        let gathered = tape.embed(flat, idx)?;
        tape.reshape(gathered, &[n_frames * cfg.tokens_per_frame(), cfg.patch_dim()])
    }

    /// Inverse of [`Self::patchify`].
    fn unpatchify<S: Scalar>(&self, tape: &mut Tape<S>, tokens: Var, n_frames: usize) -> Result<Var> {
        let cfg = &self.cfg;
        let numel = tape.value(tokens).numel();
        let flat = tape.reshape(tokens, &[numel, 1])?;
        let forward = patch_gather_indices(cfg, n_frames);
        let mut inverse = vec![0usize; forward.len()];
        for (dst, &src) in forward.iter().enumerate() {
            inverse[src] = dst;
        }
        let gathered = tape.embed(flat, Arc::new(inverse))?;
        tape.reshape(
            gathered,
            &[n_frames, cfg.height, cfg.width, cfg.channels],
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Masking {
    None,
    BlockCausal,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Zero,
    Normal(f64),
}

/// Flat index of each token element in the `[T, H, W, C]` clip, token-major.
fn patch_gather_indices(cfg: &ModelConfig, n_frames: usize) -> Vec<usize> {
    let (h, w, c, p) = (cfg.height, cfg.width, cfg.channels, cfg.patch);
    let grid_w = w / p;
    let mut idx = Vec::with_capacity(n_frames * cfg.tokens_per_frame() * cfg.patch_dim());
    for f in 0..n_frames {
        for gy in 0..(h / p) {
            for gx in 0..grid_w {
                for dy in 0..p {
                    for dx in 0..p {
                        for ch in 0..c {
                            let y = gy * p + dy;
                            let x = gx * p + dx;
                            idx.push(((f * h + y) * w + x) * c + ch);
                        }
                    }
                }
            }
        }
    }
    idx
}

fn linear<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    bound: &BoundParams,
    w: &str,
    b: &str,
) -> Result<Var> {
    let wv = bound.var(w)?;
    let bv = bound.var(b)?;
    let y = tape.matmul(x, wv)?;
    tape.add(y, bv)
}

/// x·(1 + scale) + shift, all `[n, d]`.
fn modulate<S: Scalar>(tape: &mut Tape<S>, x: Var, scale: Var, shift: Var) -> Result<Var> {
    let one = tape.leaf(Tensor::scalar(S::ONE));
    let sp1 = tape.add(scale, one)?;
    let scaled = tape.mul(x, sp1)?;
    tape.add(scaled, shift)
}
