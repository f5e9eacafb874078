//! Named parameter sets, the AdamW optimizer, and the on-disk checkpoint
//! format.
//!
//! Checkpoint layout (little-endian throughout): the magic string
//! `AMAD01\n`, then per entry in lexicographic path order:
//! path length (u32), UTF-8 path bytes, rank (u32), extents (u64 each),
//! float64 payload, frozen flag (1 byte).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numeric::tensor::Tensor;

const MAGIC: &[u8] = b"AMAD01\n";

struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

pub struct ParamEntry {
    pub tensor: Tensor,
    pub frozen: bool,
}

/// Map from parameter path to tensor, plus optimizer moment state.
#[derive(Default)]
pub struct ParamSet {
    entries: BTreeMap<String, ParamEntry>,
    adam: BTreeMap<String, AdamSlot>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable tensor under `path`. Paths must be unique.
    pub fn insert(&mut self, path: &str, tensor: Tensor) -> Result<()> {
        if self.entries.contains_key(path) {
            return Err(Error::state(format!("duplicate parameter path `{path}`")));
        }
        tensor.set_requires_grad(true);
        self.entries.insert(path.to_string(), ParamEntry { tensor, frozen: false });
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.entries.get(path).map(|e| &e.tensor)
    }

    pub fn tensor(&self, path: &str) -> Result<Tensor> {
        self.entries
            .get(path)
            .map(|e| e.tensor.clone())
            .ok_or_else(|| Error::state(format!("missing parameter `{path}`")))
    }

    pub fn is_frozen(&self, path: &str) -> Option<bool> {
        self.entries.get(path).map(|e| e.frozen)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    /// Freezes (or thaws) every entry whose path starts with `prefix`.
    /// Frozen entries stop tracking gradients and are skipped by the
    /// optimizer.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for (path, entry) in self.entries.iter_mut() {
            if path.starts_with(prefix) {
                entry.frozen = frozen;
                entry.tensor.set_requires_grad(!frozen);
            }
        }
    }

    pub fn freeze_all(&mut self) {
        self.set_frozen_prefix("", true);
    }

    /// Detaches gradient tracking everywhere without marking entries frozen;
    /// used for pure inference.
    pub fn set_inference(&mut self) {
        for entry in self.entries.values() {
            entry.tensor.set_requires_grad(false);
        }
    }

    pub fn zero_grads(&self) {
        for entry in self.entries.values() {
            entry.tensor.zero_grad();
        }
    }

    /// One decoupled-weight-decay Adam step over every non-frozen entry.
    ///
    /// Update rule per parameter p with gradient g:
    ///   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2,
    ///   p <- p - lr (m_hat / (sqrt(v_hat) + 1e-8) + weight_decay * p).
    pub fn adamw_step(&mut self, lr: f64, betas: (f64, f64), weight_decay: f64) -> Result<()> {
        const EPS: f64 = 1e-8;
        let (b1, b2) = betas;
        for (path, entry) in self.entries.iter() {
            if entry.frozen {
                continue;
            }
            let grad = entry.tensor.grad().ok_or_else(|| {
                Error::state(format!("adamw_step: non-frozen parameter `{path}` has no gradient"))
            })?;
            let slot = self.adam.entry(path.clone()).or_insert_with(|| AdamSlot {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
                step: 0,
            });
            slot.step += 1;
            let bc1 = 1.0 - b1.powi(slot.step as i32);
            let bc2 = 1.0 - b2.powi(slot.step as i32);
            entry.tensor.update_data(|data| {
                for i in 0..data.len() {
                    let g = grad[i];
                    slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g;
                    slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g * g;
                    let m_hat = slot.m[i] / bc1;
                    let v_hat = slot.v[i] / bc2;
                    data[i] -= lr * (m_hat / (v_hat.sqrt() + EPS) + weight_decay * data[i]);
                }
            });
        }
        Ok(())
    }

    /// SHA-256 over the serialized bytes of entries selected by `filter`.
    pub fn fingerprint(&self, filter: impl Fn(&str) -> bool) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for (path, entry) in &self.entries {
            if !filter(path) {
                continue;
            }
            hasher.update(path.as_bytes());
            for v in entry.tensor.data().iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().into()
    }

    // ── Checkpoint I/O ──────────────────────────────────────────────────

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for (path, entry) in &self.entries {
            out.extend_from_slice(&(path.len() as u32).to_le_bytes());
            out.extend_from_slice(path.as_bytes());
            let shape = entry.tensor.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &e in shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in entry.tensor.data().iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.push(entry.frozen as u8);
        }
        out
    }

    /// Loads a checkpoint. All entries come back gradient-detached; call
    /// `set_frozen_prefix(prefix, false)` to re-enable training on a subset.
    pub fn load(path: &Path) -> Result<ParamSet> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|msg| Error::corrupt(path, msg))
    }

    fn from_bytes(bytes: &[u8]) -> std::result::Result<ParamSet, String> {
        let mut cur = 0usize;
        let take = |cur: &mut usize, n: usize| -> std::result::Result<&[u8], String> {
            if *cur + n > bytes.len() {
                return Err(format!("truncated checkpoint at offset {cur}"));
            }
            let s = &bytes[*cur..*cur + n];
            *cur += n;
            Ok(s)
        };
        if take(&mut cur, MAGIC.len())? != MAGIC {
            return Err("bad checkpoint magic".to_string());
        }
        let mut set = ParamSet::new();
        while cur < bytes.len() {
            let plen = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
            let path = std::str::from_utf8(take(&mut cur, plen)?)
                .map_err(|_| "non-UTF8 parameter path".to_string())?
                .to_string();
            let rank = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let payload = take(&mut cur, numel * 8)?;
            let data: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let frozen = take(&mut cur, 1)?[0] != 0;
            if set.entries.contains_key(&path) {
                return Err(format!("duplicate parameter path `{path}`"));
            }
            let tensor = Tensor::from_vec(data, &shape)
                .map_err(|e| format!("entry `{path}`: {e}"))?;
            set.entries.insert(path, ParamEntry { tensor, frozen });
        }
        Ok(set)
    }
}

/// SHA-256 of an arbitrary file, hex-encoded. Used by sampling manifests to
/// pin the adapter checkpoint they ran with.
pub fn file_sha256(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    std::io::copy(&mut f, &mut hasher).map_err(|e| Error::io(path, e))?;
    Ok(hex_string(&hasher.finalize()))
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
