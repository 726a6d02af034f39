//! Named parameter storage, the RAdam optimizer, and bit-exact checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tape::{Id, Tape};

const MAGIC: &[u8; 8] = b"ICLBCKP1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("duplicate parameter name: {0}")]
    DuplicateName(String),
    #[error("unknown parameter name: {0}")]
    UnknownName(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

struct Entry {
    name: String,
    value: Array2<f64>,
    grad: Array2<f64>,
    m: Array2<f64>,
    v: Array2<f64>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    dtype: String,
    step_count: u64,
    skipped_nonfinite: u64,
    entries: Vec<ManifestEntry>,
    extra: BTreeMap<String, String>,
}

/// Flat store of named parameter arrays with gradient and optimizer slots.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
    step_count: u64,
    /// Entries skipped because of non-finite gradients, since construction.
    pub skipped_nonfinite: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Array2<f64>) -> Result<usize, ParamError> {
        if self.index.contains_key(name) {
            return Err(ParamError::DuplicateName(name.to_string()));
        }
        let idx = self.entries.len();
        self.entries.push(Entry {
            name: name.to_string(),
            grad: Array2::zeros(value.dim()),
            m: Array2::zeros(value.dim()),
            v: Array2::zeros(value.dim()),
            value,
        });
        self.index.insert(name.to_string(), idx);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn idx(&self, name: &str) -> Result<usize, ParamError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| ParamError::UnknownName(name.to_string()))
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.entries[idx].name
    }

    pub fn value(&self, idx: usize) -> &Array2<f64> {
        &self.entries[idx].value
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Array2<f64> {
        &mut self.entries[idx].value
    }

    pub fn grad(&self, idx: usize) -> &Array2<f64> {
        &self.entries[idx].grad
    }

    pub fn accumulate_grad(&mut self, idx: usize, g: &Array2<f64>) {
        self.entries[idx].grad += g;
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    /// Global L2 norm over all gradients.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.grad.iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Scale all gradients so the global norm is at most `max_norm`.
    pub fn clip_grads(&mut self, max_norm: f64) {
        let norm = self.grad_norm();
        if norm.is_finite() && norm > max_norm {
            let s = max_norm / norm;
            for e in &mut self.entries {
                e.grad *= s;
            }
        }
    }

    /// One rectified-Adam step on all entries.
    ///
    /// Entries whose gradient contains a non-finite value are skipped and
    /// counted in `skipped_nonfinite`. Moments still decay for skipped
    /// entries' peers; the skipped entry is left untouched entirely.
    pub fn radam_step(&mut self, lr: f64) {
        const BETA1: f64 = 0.9;
        const BETA2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.step_count += 1;
        let t = self.step_count as f64;
        let rho_inf = 2.0 / (1.0 - BETA2) - 1.0;
        let beta2_t = BETA2.powf(t);
        let rho_t = rho_inf - 2.0 * t * beta2_t / (1.0 - beta2_t);
        let bias1 = 1.0 - BETA1.powf(t);
        let bias2 = 1.0 - beta2_t;
        let rect = if rho_t > 4.0 {
            Some(
                (((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
                    / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                    .sqrt(),
            )
        } else {
            None
        };
        for e in &mut self.entries {
            if e.grad.iter().any(|g| !g.is_finite()) {
                self.skipped_nonfinite += 1;
                continue;
            }
            ndarray::Zip::from(&mut e.m).and(&e.grad).for_each(|m, &g| {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
            });
            ndarray::Zip::from(&mut e.v).and(&e.grad).for_each(|v, &g| {
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            });
            match rect {
                Some(r) => {
                    ndarray::Zip::from(&mut e.value)
                        .and(&e.m)
                        .and(&e.v)
                        .for_each(|p, &m, &v| {
                            let m_hat = m / bias1;
                            let v_hat = (v / bias2).sqrt();
                            *p -= lr * r * m_hat / (v_hat + EPS);
                        });
                }
                None => {
                    // Rectification inactive: plain bias-corrected momentum.
                    ndarray::Zip::from(&mut e.value).and(&e.m).for_each(|p, &m| {
                        *p -= lr * m / bias1;
                    });
                }
            }
        }
    }

    /// Snapshot of an entry set (name, value) matching a name prefix.
    pub fn snapshot_prefix(&self, prefix: &str) -> Vec<(String, Array2<f64>)> {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect()
    }

    /// Overwrite entry values from a snapshot produced by `snapshot_prefix`.
    pub fn restore_snapshot(&mut self, snap: &[(String, Array2<f64>)]) -> Result<(), ParamError> {
        for (name, value) in snap {
            let idx = self.idx(name)?;
            self.entries[idx].value.assign(value);
        }
        Ok(())
    }

    /// Write a checkpoint: manifest header followed by raw little-endian
    /// arrays (value, m, v per entry) in manifest order. Round-trips
    /// bit-exactly.
    pub fn save(&self, path: &Path, extra: &BTreeMap<String, String>) -> Result<(), ParamError> {
        let manifest = Manifest {
            version: FORMAT_VERSION,
            dtype: "f64le".to_string(),
            step_count: self.step_count,
            skipped_nonfinite: self.skipped_nonfinite,
            entries: self
                .entries
                .iter()
                .map(|e| ManifestEntry {
                    name: e.name.clone(),
                    rows: e.value.nrows(),
                    cols: e.value.ncols(),
                })
                .collect(),
            extra: extra.clone(),
        };
        let header = serde_json::to_vec(&manifest).expect("manifest json");
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for e in &self.entries {
            for arr in [&e.value, &e.m, &e.v] {
                for &x in arr.iter() {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, String>), ParamError> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ParamError::Format("bad magic".to_string()));
        }
        let mut lenb = [0u8; 8];
        r.read_exact(&mut lenb)?;
        let len = u64::from_le_bytes(lenb) as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let manifest: Manifest = serde_json::from_slice(&header)
            .map_err(|e| ParamError::Format(format!("manifest: {e}")))?;
        if manifest.version != FORMAT_VERSION {
            return Err(ParamError::Format(format!(
                "unsupported version {}",
                manifest.version
            )));
        }
        let mut store = ParamStore::new();
        store.step_count = manifest.step_count;
        store.skipped_nonfinite = manifest.skipped_nonfinite;
        for me in &manifest.entries {
            let n = me.rows * me.cols;
            let mut slots = Vec::with_capacity(3);
            for _ in 0..3 {
                let mut buf = vec![0u8; n * 8];
                r.read_exact(&mut buf)?;
                let data: Vec<f64> = buf
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                slots.push(
                    Array2::from_shape_vec((me.rows, me.cols), data)
                        .map_err(|e| ParamError::Format(format!("shape: {e}")))?,
                );
            }
            let v = slots.pop().unwrap();
            let m = slots.pop().unwrap();
            let value = slots.pop().unwrap();
            let idx = store.add(&me.name, value)?;
            store.entries[idx].m = m;
            store.entries[idx].v = v;
        }
        Ok((store, manifest.extra))
    }
}

/// A tape bound to a parameter store: parameter nodes are created on first
/// use and their gradients flow back into the store after `backward`.
pub struct Graph<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: HashMap<usize, Id>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: HashMap::new(),
        }
    }

    /// Node for parameter `idx`; reused if already on this tape.
    pub fn param(&mut self, idx: usize) -> Id {
        if let Some(&id) = self.bound.get(&idx) {
            return id;
        }
        let id = self.tape.leaf(self.store.value(idx).clone());
        self.bound.insert(idx, id);
        id
    }

    /// Run backward from `loss` and accumulate parameter gradients into
    /// `store` (which must be the store this graph was built against).
    pub fn backward_into(mut self, loss: Id, store: &mut ParamStore) {
        self.tape.backward(loss);
        let mut pairs: Vec<(usize, Id)> = self.bound.drain().collect();
        pairs.sort_unstable();
        for (idx, id) in pairs {
            let g = self.tape.grad(id).clone();
            store.accumulate_grad(idx, &g);
        }
    }

    /// Run backward from `loss` and return `(param index, gradient)` pairs.
    /// Lets the caller mutate the originating store after the graph's
    /// borrow ends.
    pub fn take_grads(mut self, loss: Id) -> Vec<(usize, Array2<f64>)> {
        self.tape.backward(loss);
        let mut pairs: Vec<(usize, Id)> = self.bound.drain().collect();
        pairs.sort_unstable();
        pairs
            .into_iter()
            .map(|(idx, id)| (idx, self.tape.grad(id).clone()))
            .collect()
    }
}
