//! Spatiotemporal DiT velocity model with bidirectional and chunk-causal
//! attention, plus the parameter store and KV cache it operates on.

mod dit;

pub use dit::{sinusoid_time_features, BoundParams, CacheVars, DitModel};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Scalar, Tensor};
use crate::{Error, Result};

/// Attention wiring: full spatiotemporal attention for the teacher,
/// chunk-level block-causal attention (full within a chunk) for the student.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Bidirectional,
    Causal,
}

/// Architecture hyperparameters shared by teacher and student; only the
/// mask and timestep plumbing differ between the two modes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Frame count L of a full clip.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Spatial patch side; height and width must divide by it.
    pub patch: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// Frames per autoregressive chunk; must divide `frames`.
    pub chunk: usize,
    /// Prompt-conditioning width; must equal [`crate::synthvid::COND_DIM`].
    pub cond_dim: usize,
    /// Sinusoidal timestep feature width.
    pub time_enc_dim: usize,
    pub mode: AttentionMode,
}

impl ModelConfig {
    /// Desk-scale default: 16 frames of 32×32×3, patch 8, 2 layers, 4 heads,
    /// 4-frame chunks.
    pub fn desk_default(mode: AttentionMode) -> Self {
        ModelConfig {
            frames: 16,
            height: 32,
            width: 32,
            channels: 3,
            patch: 8,
            embed_dim: 64,
            heads: 4,
            layers: 2,
            chunk: 4,
            cond_dim: crate::synthvid::COND_DIM,
            time_enc_dim: 32,
            mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.chunk == 0 || self.frames % self.chunk != 0 {
            return Err(Error::Config(format!(
                "frames {} not divisible by chunk {}",
                self.frames, self.chunk
            )));
        }
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::Config(format!(
                "frame {}x{} not divisible by patch {}",
                self.height, self.width, self.patch
            )));
        }
        if self.cond_dim != crate::synthvid::COND_DIM {
            return Err(Error::Config(format!(
                "cond_dim {} must equal the prompt encoding width {}",
                self.cond_dim,
                crate::synthvid::COND_DIM
            )));
        }
        if self.time_enc_dim == 0 || self.time_enc_dim % 2 != 0 {
            return Err(Error::Config("time_enc_dim must be even and positive".into()));
        }
        if self.layers == 0 || self.embed_dim == 0 || self.frames == 0 {
            return Err(Error::Config("layers, embed_dim, frames must be positive".into()));
        }
        Ok(())
    }

    pub fn tokens_per_frame(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn seq_len(&self) -> usize {
        self.frames * self.tokens_per_frame()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn chunks(&self) -> usize {
        self.frames / self.chunk
    }

    pub fn clip_shape(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }
}

/// Which network a parameter set belongs to, carried through checkpoints so
/// pipeline stages can enforce their input contracts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoleTag {
    /// Flow-matching teacher (bidirectional).
    #[serde(rename = "teacher")]
    Teacher,
    /// Few-step distilled generator θ.
    #[serde(rename = "generator")]
    Generator,
    /// Causal student φ after ODE-trajectory initialization.
    #[serde(rename = "student")]
    Student,
    /// Reward-tuned final model.
    #[serde(rename = "final")]
    Final,
    /// Trainable fake-score network used by distillation.
    #[serde(rename = "fake-score")]
    FakeScore,
    /// Frozen reward-model parameters.
    #[serde(rename = "reward")]
    Reward,
    /// EMA shadow of a training run.
    #[serde(rename = "ema-shadow")]
    EmaShadow,
}

impl std::fmt::Display for RoleTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            RoleTag::Teacher => "teacher",
            RoleTag::Generator => "generator",
            RoleTag::Student => "student",
            RoleTag::Final => "final",
            RoleTag::FakeScore => "fake-score",
            RoleTag::Reward => "reward",
            RoleTag::EmaShadow => "ema-shadow",
        };
        write!(f, "{}", s)
    }
}

/// Named parameter arrays with a role tag. Names are unique and shapes are
/// fixed after insertion; iteration is in sorted-name order.
#[derive(Debug, Clone)]
pub struct ParamStore<S: Scalar> {
    role: RoleTag,
    tensors: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new(role: RoleTag) -> Self {
        ParamStore {
            role,
            tensors: BTreeMap::new(),
        }
    }

    pub fn role(&self) -> RoleTag {
        self.role
    }

    pub fn with_role(&self, role: RoleTag) -> Self {
        ParamStore {
            role,
            tensors: self.tensors.clone(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::invalid("param_store", format!("duplicate name {name}")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors.get(name)
    }

    /// Shape-checked mutation handle; inserting new names goes through
    /// [`ParamStore::insert`].
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.tensors.get_mut(name)
    }

    pub fn set(&mut self, name: &str, tensor: Tensor<S>) -> Result<()> {
        let existing = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::invalid("param_store", format!("unknown name {name}")))?;
        if existing.shape() != tensor.shape() {
            return Err(Error::ShapeMismatch {
                op: "param_store.set",
                lhs: existing.shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        *existing = tensor;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    /// FNV-1a over names, shapes, and raw element bytes; order-stable.
    pub fn content_hash(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325_u64;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        };
        for (name, t) in &self.tensors {
            eat(name.as_bytes());
            for &d in t.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            let mut buf = Vec::with_capacity(t.numel() * S::BYTE_WIDTH);
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            eat(&buf);
        }
        h
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            role: self.role,
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// Per-layer cached attention keys/values for previously emitted chunks.
///
/// Entries are post-projection K/V rows `[cached_tokens, embed_dim]` with
/// heads packed along columns. The cursor counts cached frames and is always
/// a whole number of chunks.
#[derive(Debug, Clone)]
pub struct KvCache<S: Scalar> {
    layers: Vec<(Tensor<S>, Tensor<S>)>,
    frames: usize,
    cfg: ModelConfig,
}

impl<S: Scalar> KvCache<S> {
    pub fn new(cfg: &ModelConfig) -> Self {
        let dim = cfg.embed_dim;
        KvCache {
            layers: (0..cfg.layers)
                .map(|_| (Tensor::zeros(&[0, dim]), Tensor::zeros(&[0, dim])))
                .collect(),
            frames: 0,
            cfg: *cfg,
        }
    }

    /// Cached frame count (the cursor).
    pub fn cursor_frames(&self) -> usize {
        self.frames
    }

    pub fn cursor_tokens(&self) -> usize {
        self.frames * self.cfg.tokens_per_frame()
    }

    pub fn cursor_chunks(&self) -> usize {
        self.frames / self.cfg.chunk
    }

    pub fn layer(&self, i: usize) -> (&Tensor<S>, &Tensor<S>) {
        (&self.layers[i].0, &self.layers[i].1)
    }

    pub fn matches(&self, cfg: &ModelConfig) -> bool {
        self.cfg.layers == cfg.layers
            && self.cfg.embed_dim == cfg.embed_dim
            && self.cfg.chunk == cfg.chunk
            && self.cfg.tokens_per_frame() == cfg.tokens_per_frame()
    }

    /// Append one chunk's K/V rows for every layer and advance the cursor.
    pub fn append_chunk(&mut self, per_layer: Vec<(Tensor<S>, Tensor<S>)>) -> Result<()> {
        if per_layer.len() != self.layers.len() {
            return Err(Error::invalid(
                "kv_cache",
                format!(
                    "appending {} layers into a {}-layer cache",
                    per_layer.len(),
                    self.layers.len()
                ),
            ));
        }
        let chunk_tokens = self.cfg.chunk * self.cfg.tokens_per_frame();
        for (k, v) in &per_layer {
            if k.shape() != [chunk_tokens, self.cfg.embed_dim]
                || v.shape() != [chunk_tokens, self.cfg.embed_dim]
            {
                return Err(Error::ShapeMismatch {
                    op: "kv_cache.append",
                    lhs: vec![chunk_tokens, self.cfg.embed_dim],
                    rhs: k.shape().to_vec(),
                });
            }
        }
        for (slot, (k, v)) in self.layers.iter_mut().zip(per_layer) {
            slot.0 = append_rows(&slot.0, &k);
            slot.1 = append_rows(&slot.1, &v);
        }
        self.frames += self.cfg.chunk;
        Ok(())
    }

    /// Drop cached chunks beyond `frames`; used to roll back provisional
    /// appends during multi-step chunk denoising.
    pub fn truncate_frames(&mut self, frames: usize) {
        assert!(frames <= self.frames && frames % self.cfg.chunk == 0);
        let keep_tokens = frames * self.cfg.tokens_per_frame();
        for (k, v) in &mut self.layers {
            *k = take_rows(k, keep_tokens);
            *v = take_rows(v, keep_tokens);
        }
        self.frames = frames;
    }
}

fn append_rows<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let cols = b.shape()[1];
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(&[a.shape()[0] + b.shape()[0], cols], data).expect("append_rows")
}

fn take_rows<S: Scalar>(a: &Tensor<S>, rows: usize) -> Tensor<S> {
    let cols = a.shape()[1];
    Tensor::from_vec(&[rows, cols], a.data()[..rows * cols].to_vec()).expect("take_rows")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::desk_default(AttentionMode::Bidirectional);
        cfg.validate().unwrap();
        cfg.heads = 5;
        assert!(cfg.validate().is_err());
        cfg = ModelConfig::desk_default(AttentionMode::Causal);
        cfg.chunk = 3;
        assert!(cfg.validate().is_err());
        cfg = ModelConfig::desk_default(AttentionMode::Causal);
        cfg.patch = 7;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn param_store_rejects_duplicates_and_shape_changes() {
        let mut s = ParamStore::<f32>::new(RoleTag::Teacher);
        s.insert("a", Tensor::zeros(&[2, 2])).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[2, 2])).is_err());
        assert!(s.set("a", Tensor::zeros(&[3])).is_err());
        s.set("a", Tensor::filled(&[2, 2], 1.0)).unwrap();
        assert_eq!(s.get("a").unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn content_hash_tracks_values() {
        let mut s = ParamStore::<f64>::new(RoleTag::Reward);
        s.insert("w", Tensor::filled(&[3], 0.5)).unwrap();
        let h0 = s.content_hash();
        assert_eq!(h0, s.content_hash());
        s.get_mut("w").unwrap().data_mut()[0] = 0.75;
        assert_ne!(h0, s.content_hash());
    }

    #[test]
    fn kv_cache_cursor_and_truncate() {
        let cfg = ModelConfig::desk_default(AttentionMode::Causal);
        let mut cache = KvCache::<f32>::new(&cfg);
        assert_eq!(cache.cursor_frames(), 0);
        let tokens = cfg.chunk * cfg.tokens_per_frame();
        let mk = || {
            (0..cfg.layers)
                .map(|_| {
                    (
                        Tensor::filled(&[tokens, cfg.embed_dim], 1.0),
                        Tensor::filled(&[tokens, cfg.embed_dim], 2.0),
                    )
                })
                .collect::<Vec<_>>()
        };
        cache.append_chunk(mk()).unwrap();
        cache.append_chunk(mk()).unwrap();
        assert_eq!(cache.cursor_frames(), 2 * cfg.chunk);
        assert_eq!(cache.layer(0).0.shape(), &[2 * tokens, cfg.embed_dim]);
        cache.truncate_frames(cfg.chunk);
        assert_eq!(cache.cursor_frames(), cfg.chunk);
        assert_eq!(cache.layer(0).0.shape(), &[tokens, cfg.embed_dim]);
    }
}
