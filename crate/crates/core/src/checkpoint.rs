//! "SFCK" checkpoint container.
//!
//! Layout: 4-byte magic `SFCK`, u32 LE format version, u64 LE manifest
//! length, JSON manifest, then raw little-endian element data in manifest
//! order. A loaded checkpoint keeps its original manifest bytes so
//! load → save is byte-identical.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Precision, Scalar, Tensor};
use crate::model::{ParamStore, RoleTag};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SFCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// JSON manifest. Field order is fixed by this struct, and `meta` is a
/// sorted map, so serialization is deterministic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub role: RoleTag,
    pub stage: String,
    pub step: u64,
    pub precision: Precision,
    /// Set when the payload is an ODE trajectory set rather than weights.
    pub trajectory: bool,
    pub tensors: Vec<TensorEntry>,
    /// Free-form string metadata (model config, cache keys, …).
    pub meta: BTreeMap<String, String>,
}

/// A checkpoint as stored on disk: parsed manifest plus raw payload.
#[derive(Debug, Clone)]
pub struct RawCheckpoint {
    pub manifest: Manifest,
    manifest_bytes: Vec<u8>,
    payload: Vec<u8>,
}

impl RawCheckpoint {
    /// Build from a parameter store. Payload order is the store's sorted
    /// name order.
    pub fn from_store<S: Scalar>(
        store: &ParamStore<S>,
        stage: &str,
        step: u64,
        trajectory: bool,
        meta: BTreeMap<String, String>,
    ) -> Result<Self> {
        let mut tensors = Vec::with_capacity(store.len());
        let mut payload = Vec::new();
        for (name, t) in store.iter() {
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            });
            for &v in t.data() {
                v.write_le(&mut payload);
            }
        }
        let manifest = Manifest {
            role: store.role(),
            stage: stage.to_string(),
            step,
            precision: S::PRECISION,
            trajectory,
            tensors,
            meta,
        };
        let manifest_bytes =
            serde_json::to_vec(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        Ok(RawCheckpoint {
            manifest,
            manifest_bytes,
            payload,
        })
    }

    /// Reconstruct a parameter store. The checkpoint's precision must match
    /// `S`; cross-precision loads are rejected rather than silently rounded.
    pub fn to_store<S: Scalar>(&self) -> Result<ParamStore<S>> {
        if self.manifest.precision != S::PRECISION {
            return Err(Error::Precondition(format!(
                "checkpoint precision {} does not match requested {}",
                self.manifest.precision,
                S::PRECISION
            )));
        }
        let mut store = ParamStore::new(self.manifest.role);
        let width = S::BYTE_WIDTH;
        let mut offset = 0;
        for entry in &self.manifest.tensors {
            let numel: usize = entry.shape.iter().product();
            let bytes = numel * width;
            if offset + bytes > self.payload.len() {
                return Err(Error::Format(format!(
                    "payload too short for tensor {}",
                    entry.name
                )));
            }
            let data: Vec<S> = self.payload[offset..offset + bytes]
                .chunks_exact(width)
                .map(S::read_le)
                .collect();
            offset += bytes;
            store.insert(&entry.name, Tensor::from_vec(&entry.shape, data)?)?;
        }
        if offset != self.payload.len() {
            return Err(Error::Format(format!(
                "payload has {} trailing bytes",
                self.payload.len() - offset
            )));
        }
        Ok(store)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.manifest_bytes.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.manifest_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.manifest_bytes);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[0..4] != MAGIC {
            return Err(Error::Format("missing SFCK magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + mlen {
            return Err(Error::Format("truncated manifest".into()));
        }
        let manifest_bytes = bytes[16..16 + mlen].to_vec();
        let manifest: Manifest =
            serde_json::from_slice(&manifest_bytes).map_err(|e| Error::Format(e.to_string()))?;
        let declared: usize = manifest
            .tensors
            .iter()
            .map(|t| {
                t.shape.iter().product::<usize>()
                    * match manifest.precision {
                        Precision::F32 => 4,
                        Precision::F64 => 8,
                    }
            })
            .sum();
        let payload = bytes[16 + mlen..].to_vec();
        if payload.len() != declared {
            return Err(Error::Format(format!(
                "payload length {} does not match manifest-declared {}",
                payload.len(),
                declared
            )));
        }
        Ok(RawCheckpoint {
            manifest,
            manifest_bytes,
            payload,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Enforce a stage-input contract, naming both tags on mismatch.
    pub fn expect_role(&self, wanted: RoleTag) -> Result<()> {
        if self.manifest.role != wanted {
            return Err(Error::Precondition(format!(
                "checkpoint role is '{}', this stage requires '{}'",
                self.manifest.role, wanted
            )));
        }
        Ok(())
    }
}

/// Copy every tensor of `src` into `dst` under `prefix`.
pub fn merge_prefixed<S: Scalar>(
    dst: &mut ParamStore<S>,
    prefix: &str,
    src: &ParamStore<S>,
) -> Result<()> {
    for (name, t) in src.iter() {
        dst.insert(format!("{prefix}{name}"), t.clone())?;
    }
    Ok(())
}

/// Extract the tensors under `prefix` into their own store, stripping the
/// prefix. Returns an empty store when nothing matches.
pub fn extract_prefixed<S: Scalar>(
    src: &ParamStore<S>,
    prefix: &str,
    role: RoleTag,
) -> ParamStore<S> {
    let mut out = ParamStore::new(role);
    for (name, t) in src.iter() {
        if let Some(stripped) = name.strip_prefix(prefix) {
            out.insert(stripped, t.clone()).expect("unique names");
        }
    }
    out
}

/// The tensors NOT under any of the given prefixes.
pub fn without_prefixes<S: Scalar>(
    src: &ParamStore<S>,
    prefixes: &[&str],
    role: RoleTag,
) -> ParamStore<S> {
    let mut out = ParamStore::new(role);
    for (name, t) in src.iter() {
        if !prefixes.iter().any(|p| name.starts_with(p)) {
            out.insert(name.clone(), t.clone()).expect("unique names");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_store(seed: u64) -> ParamStore<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new(RoleTag::Teacher);
        s.insert("b/bias", Tensor::randn(&[5], &mut rng)).unwrap();
        s.insert("a/weight", Tensor::randn(&[3, 4], &mut rng)).unwrap();
        s
    }

    #[test]
    fn store_round_trip_preserves_values_and_role() {
        let store = sample_store(1);
        let ck = RawCheckpoint::from_store(&store, "train-teacher", 42, false, BTreeMap::new())
            .unwrap();
        let back: ParamStore<f32> = ck.to_store().unwrap();
        assert_eq!(back.role(), RoleTag::Teacher);
        assert_eq!(back.get("a/weight").unwrap().data(), store.get("a/weight").unwrap().data());
        assert_eq!(back.get("b/bias").unwrap().data(), store.get("b/bias").unwrap().data());
        assert_eq!(ck.manifest.step, 42);
    }

    #[test]
    fn bytes_round_trip_is_byte_identical() {
        let store = sample_store(2);
        let ck =
            RawCheckpoint::from_store(&store, "distill", 7, false, BTreeMap::new()).unwrap();
        let bytes = ck.to_bytes();
        let reread = RawCheckpoint::from_bytes(&bytes).unwrap();
        assert_eq!(reread.to_bytes(), bytes);
        // And a second save of the re-read checkpoint too.
        assert_eq!(RawCheckpoint::from_bytes(&reread.to_bytes()).unwrap().to_bytes(), bytes);
    }

    #[test]
    fn precision_mismatch_rejected() {
        let store = sample_store(3);
        let ck = RawCheckpoint::from_store(&store, "x", 0, false, BTreeMap::new()).unwrap();
        assert!(ck.to_store::<f64>().is_err());
        assert!(ck.to_store::<f32>().is_ok());
    }

    #[test]
    fn corrupt_payload_rejected() {
        let store = sample_store(4);
        let ck = RawCheckpoint::from_store(&store, "x", 0, false, BTreeMap::new()).unwrap();
        let mut bytes = ck.to_bytes();
        bytes.truncate(bytes.len() - 3);
        assert!(RawCheckpoint::from_bytes(&bytes).is_err());
        assert!(RawCheckpoint::from_bytes(b"nope").is_err());
    }

    #[test]
    fn role_contract_names_both_tags() {
        let store = sample_store(5);
        let ck = RawCheckpoint::from_store(&store, "x", 0, false, BTreeMap::new()).unwrap();
        let err = ck.expect_role(RoleTag::Student).unwrap_err().to_string();
        assert!(err.contains("teacher") && err.contains("student"), "{err}");
    }

    #[test]
    fn prefix_split_and_merge() {
        let mut main = sample_store(6);
        let shadow = sample_store(7).with_role(RoleTag::EmaShadow);
        merge_prefixed(&mut main, "ema/", &shadow).unwrap();
        assert_eq!(main.len(), 4);
        let back = extract_prefixed(&main, "ema/", RoleTag::EmaShadow);
        assert_eq!(back.len(), 2);
        assert_eq!(
            back.get("a/weight").unwrap().data(),
            shadow.get("a/weight").unwrap().data()
        );
        let rest = without_prefixes(&main, &["ema/"], RoleTag::Teacher);
        assert_eq!(rest.len(), 2);
    }
}
