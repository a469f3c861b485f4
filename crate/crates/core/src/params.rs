//! Named parameter storage, Adam updates, and checkpoint I/O.
//!
//! Checkpoints are a single binary file: a magic header, then one record
//! per tensor (name, shape, little-endian f64 data) in store order. The
//! README documents the name manifest.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::error::LmsError;
use crate::tensor::{NodeId, Tape};

/// Handle to a tensor slot in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Insertion-ordered collection of named trainable tensors.
#[derive(Default, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Array2<f64>) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Glorot-uniform matrix.
    pub fn add_xavier(&mut self, name: &str, rows: usize, cols: usize, rng: &mut ChaCha12Rng) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let value = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound));
        self.add(name, value)
    }

    /// Gaussian matrix with row-wise unit normalization.
    pub fn add_unit_rows(&mut self, name: &str, rows: usize, cols: usize, rng: &mut ChaCha12Rng) -> ParamId {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut value: Array2<f64> = Array2::from_shape_fn((rows, cols), |_| normal.sample(rng));
        for mut row in value.rows_mut() {
            let norm = row.mapv(|x| x * x).sum().sqrt().max(1e-12);
            row.mapv_inplace(|x| x / norm);
        }
        self.add(name, value)
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::zeros((rows, cols)))
    }

    pub fn add_ones(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::ones((rows, cols)))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    /// Binds every parameter as a trainable tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let nodes = self
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| tape.param(i, v.clone()))
            .collect();
        Binding { nodes }
    }

    /// Replaces all values from another store with identical layout.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<(), LmsError> {
        if other.names != self.names {
            return Err(LmsError::Checkpoint(
                "parameter manifest mismatch".to_string(),
            ));
        }
        self.values = other.values.clone();
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), LmsError> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(b"LMSCKPT1")?;
        file.write_all(&(self.values.len() as u64).to_le_bytes())?;
        for (name, value) in self.names.iter().zip(&self.values) {
            let bytes = name.as_bytes();
            file.write_all(&(bytes.len() as u64).to_le_bytes())?;
            file.write_all(bytes)?;
            file.write_all(&(value.nrows() as u64).to_le_bytes())?;
            file.write_all(&(value.ncols() as u64).to_le_bytes())?;
            for &x in value.iter() {
                file.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LmsError> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        file.read_exact(&mut magic)?;
        if &magic != b"LMSCKPT1" {
            return Err(LmsError::Checkpoint(format!(
                "bad magic in {}",
                path.display()
            )));
        }
        let count = read_u64(&mut file)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u64(&mut file)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            file.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| LmsError::Checkpoint("non-utf8 tensor name".to_string()))?;
            let rows = read_u64(&mut file)? as usize;
            let cols = read_u64(&mut file)? as usize;
            let mut data = vec![0.0f64; rows * cols];
            let mut buf = [0u8; 8];
            for slot in data.iter_mut() {
                file.read_exact(&mut buf)?;
                *slot = f64::from_le_bytes(buf);
            }
            let value = Array2::from_shape_vec((rows, cols), data)
                .map_err(|e| LmsError::Checkpoint(e.to_string()))?;
            store.add(&name, value);
        }
        Ok(store)
    }

    /// `(name, rows, cols)` for every tensor, in store order.
    pub fn manifest(&self) -> Vec<(String, usize, usize)> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| (n.clone(), v.nrows(), v.ncols()))
            .collect()
    }
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, LmsError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Parameter-to-node mapping for one tape.
pub struct Binding {
    nodes: Vec<NodeId>,
}

impl Binding {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }
}

/// Adam with optional global-norm gradient clipping.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    clip_norm: Option<f64>,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, clip_norm: Option<f64>) -> Self {
        let m = store.values.iter().map(|v| Array2::zeros(v.dim())).collect();
        let v = store.values.iter().map(|v| Array2::zeros(v.dim())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm,
            step: 0,
            m,
            v,
        }
    }

    /// Applies one update from per-parameter gradients (missing entries are
    /// treated as zero and skipped).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Array2<f64>>]) {
        self.step += 1;
        let scale = match self.clip_norm {
            Some(max) => {
                let total: f64 = grads
                    .iter()
                    .flatten()
                    .map(|g| g.mapv(|x| x * x).sum())
                    .sum::<f64>()
                    .sqrt();
                if total > max {
                    max / total
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            let g = g * scale;
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(&g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(&g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let value = &mut store.values[i];
            for ((p, m), v) in value.iter_mut().zip(m.iter()).zip(v.iter()) {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Collects gradients for every bound parameter of a swept tape.
pub fn param_gradients(
    store: &ParamStore,
    tape: &Tape,
    grads: &crate::tensor::Gradients,
) -> Vec<Option<Array2<f64>>> {
    let mut out: Vec<Option<Array2<f64>>> = vec![None; store.len()];
    for &(idx, node) in tape.param_nodes() {
        if let Some(g) = grads.get(node) {
            match &mut out[idx] {
                Some(acc) => *acc += g,
                slot @ None => *slot = Some(g.clone()),
            }
        }
    }
    out
}
