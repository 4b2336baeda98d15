//! Named parameter store with AdamW updates and a binary checkpoint format.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Array, NnError};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    /// Truncated normal, std 0.02, resampling beyond two standard deviations.
    TruncNormal,
    /// Plain normal, std 0.02 (embedding tables).
    Normal,
}

struct ParamEntry {
    name: String,
    value: Array,
    m: Array,
    v: Array,
}

/// Named parameter tensors with per-parameter Adam moments. Iteration order
/// is registration order and is deterministic for a fixed model build.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, usize>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, rows: usize, cols: usize, init: Init, rng: &mut ChaCha8Rng) {
        assert!(!self.index.contains_key(name), "duplicate parameter `{name}`");
        let mut value = Array::zeros(rows, cols);
        match init {
            Init::Zeros => {}
            Init::TruncNormal => {
                for v in value.data.iter_mut() {
                    *v = 0.02 * trunc_normal(rng);
                }
            }
            Init::Normal => {
                for v in value.data.iter_mut() {
                    *v = 0.02 * normal(rng);
                }
            }
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            m: Array::zeros(rows, cols),
            v: Array::zeros(rows, cols),
            value,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.index.get(name).map(|&i| &self.entries[i].value)
    }

    pub fn set(&mut self, name: &str, value: Array) -> Result<(), NnError> {
        let &i = self.index.get(name).ok_or_else(|| NnError::UnknownParam(name.to_string()))?;
        let entry = &mut self.entries[i];
        if entry.value.shape() != value.shape() {
            return Err(NnError::ShapeMismatch { op: "set", lhs: entry.value.shape(), rhs: value.shape() });
        }
        entry.value = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.data.len()).sum()
    }

    /// Decoupled weight-decay Adam update. Parameters without a gradient are
    /// left untouched; non-finite gradients fail fast.
    pub fn adamw_step(&mut self, grads: &BTreeMap<String, Array>, lr: f64, weight_decay: f64) -> Result<(), NnError> {
        for g in grads.values() {
            if !g.is_finite() {
                return Err(NnError::NonFinite("gradient"));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - ADAM_BETA1.powf(t);
        let bc2 = 1.0 - ADAM_BETA2.powf(t);
        for entry in self.entries.iter_mut() {
            let Some(g) = grads.get(&entry.name) else { continue };
            if g.shape() != entry.value.shape() {
                return Err(NnError::ShapeMismatch { op: "adamw", lhs: entry.value.shape(), rhs: g.shape() });
            }
            for i in 0..entry.value.data.len() {
                let gi = g.data[i];
                entry.m.data[i] = ADAM_BETA1 * entry.m.data[i] + (1.0 - ADAM_BETA1) * gi;
                entry.v.data[i] = ADAM_BETA2 * entry.v.data[i] + (1.0 - ADAM_BETA2) * gi * gi;
                let mhat = entry.m.data[i] / bc1;
                let vhat = entry.v.data[i] / bc2;
                let w = entry.value.data[i];
                entry.value.data[i] = w - lr * (mhat / (vhat.sqrt() + ADAM_EPS) + weight_decay * w);
            }
        }
        Ok(())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn trunc_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let z = normal(rng);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

/// Standard-normal sample, shared by noise injection call sites.
pub fn randn(rng: &mut ChaCha8Rng) -> f64 {
    normal(rng)
}

// --- Checkpoint format -------------------------------------------------------
//
// magic `CLCK`, version u32 LE, then repeated records:
//   name_len u32 LE, name bytes, dtype u8 (0 = f64), rank u32 LE,
//   dims (rank x u32 LE), payload (little-endian f64)

const MAGIC: &[u8; 4] = b"CLCK";
const VERSION: u32 = 1;

pub fn checkpoint_bytes(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for entry in &store.entries {
        out.extend_from_slice(&(entry.name.len() as u32).to_le_bytes());
        out.extend_from_slice(entry.name.as_bytes());
        out.push(0u8);
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(entry.value.rows as u32).to_le_bytes());
        out.extend_from_slice(&(entry.value.cols as u32).to_le_bytes());
        for v in &entry.value.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<(), NnError> {
    let bytes = checkpoint_bytes(store);
    let mut f = std::fs::File::create(path).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    f.write_all(&bytes).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    Ok(())
}

/// Load checkpoint values into an already-built store. Every record must
/// match an existing parameter in name and shape.
pub fn load_checkpoint(store: &mut ParamStore, path: &Path) -> Result<(), NnError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| NnError::Checkpoint(e.to_string()))?;
    let mut at = 0usize;
    let take = |bytes: &[u8], at: &mut usize, n: usize| -> Result<Vec<u8>, NnError> {
        if *at + n > bytes.len() {
            return Err(NnError::Checkpoint("truncated file".into()));
        }
        let out = bytes[*at..*at + n].to_vec();
        *at += n;
        Ok(out)
    };
    let u32_at = |bytes: &[u8], at: &mut usize| -> Result<u32, NnError> {
        let b = take(bytes, at, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };
    if take(&bytes, &mut at, 4)? != MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let version = u32_at(&bytes, &mut at)?;
    if version != VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    while at < bytes.len() {
        let name_len = u32_at(&bytes, &mut at)? as usize;
        let name = String::from_utf8(take(&bytes, &mut at, name_len)?)
            .map_err(|_| NnError::Checkpoint("bad parameter name".into()))?;
        let dtype = take(&bytes, &mut at, 1)?[0];
        if dtype != 0 {
            return Err(NnError::Checkpoint(format!("unsupported dtype {dtype}")));
        }
        let rank = u32_at(&bytes, &mut at)?;
        if rank != 2 {
            return Err(NnError::Checkpoint(format!("unsupported rank {rank}")));
        }
        let rows = u32_at(&bytes, &mut at)? as usize;
        let cols = u32_at(&bytes, &mut at)? as usize;
        let payload = take(&bytes, &mut at, rows * cols * 8)?;
        let mut data = Vec::with_capacity(rows * cols);
        for chunk in payload.chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        store.set(&name, Array::from_vec(rows, cols, data))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.register("w", 2, 2, Init::TruncNormal, &mut rng);
        let before = store.get("w").unwrap().clone();
        let grads: BTreeMap<String, Array> = [("w".to_string(), Array::zeros(2, 2))].into();
        store.adamw_step(&grads, 1e-3, 0.0).unwrap();
        assert_eq!(*store.get("w").unwrap(), before);
    }

    #[test]
    fn one_step_descends_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.register("w", 1, 1, Init::Zeros, &mut rng);
        store.set("w", Array::scalar(1.0)).unwrap();
        // f(w) = w^2, grad = 2w
        let grads: BTreeMap<String, Array> = [("w".to_string(), Array::scalar(2.0))].into();
        store.adamw_step(&grads, 0.1, 0.0).unwrap();
        let w = store.get("w").unwrap().data[0];
        assert!(w * w < 1.0, "f did not decrease: w = {w}");
    }

    #[test]
    fn matches_hand_computed_three_step_trace() {
        // scalar AdamW recurrence with g = 1 every step, lr = 0.1, decay = 0.01,
        // w0 = 0.5. With constant unit gradients mhat = vhat = 1 exactly,
        // so each step is w <- w - lr*(1/(1 + eps) + decay*w).
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.register("w", 1, 1, Init::Zeros, &mut rng);
        store.set("w", Array::scalar(0.5)).unwrap();
        let grads: BTreeMap<String, Array> = [("w".to_string(), Array::scalar(1.0))].into();
        let (lr, decay) = (0.1, 0.01);
        let mut expect = 0.5f64;
        for _ in 0..3 {
            store.adamw_step(&grads, lr, decay).unwrap();
            expect -= lr * (1.0 / (1.0 + ADAM_EPS) + decay * expect);
            let w = store.get("w").unwrap().data[0];
            assert!((w - expect).abs() < 1e-15, "trace diverged: {w} vs {expect}");
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.register("w", 1, 1, Init::Zeros, &mut rng);
        let grads: BTreeMap<String, Array> = [("w".to_string(), Array::scalar(f64::INFINITY))].into();
        assert!(matches!(store.adamw_step(&grads, 0.1, 0.0), Err(NnError::NonFinite(_))));
    }

    #[test]
    fn fixed_seed_reproduces_initialization() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let mut store = ParamStore::new();
            store.register("a", 4, 4, Init::TruncNormal, &mut rng);
            store.register("b", 1, 8, Init::Normal, &mut rng);
            store
        };
        let (s1, s2) = (build(), build());
        assert_eq!(s1.get("a"), s2.get("a"));
        assert_eq!(s1.get("b"), s2.get("b"));
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.register("layer.w", 3, 5, Init::TruncNormal, &mut rng);
        store.register("layer.b", 1, 5, Init::Normal, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.clck");
        save_checkpoint(&store, &path).unwrap();

        let mut rng2 = ChaCha8Rng::seed_from_u64(999);
        let mut other = ParamStore::new();
        other.register("layer.w", 3, 5, Init::TruncNormal, &mut rng2);
        other.register("layer.b", 1, 5, Init::Normal, &mut rng2);
        load_checkpoint(&mut other, &path).unwrap();
        assert_eq!(store.get("layer.w"), other.get("layer.w"));
        assert_eq!(store.get("layer.b"), other.get("layer.b"));

        // bytes are reproducible
        assert_eq!(checkpoint_bytes(&store), checkpoint_bytes(&other));
    }
}
