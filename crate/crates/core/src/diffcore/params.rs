//! Named trainable arrays, the Adam optimizer and the `GDPN` checkpoint format.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use super::array::DenseArray;
use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 4] = b"GDPN";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: DenseArray,
    pub grad: DenseArray,
    m: DenseArray,
    v: DenseArray,
    step: u64,
}

impl ParamEntry {
    fn new(name: String, value: DenseArray) -> Self {
        let zeros = DenseArray::zeros(value.shape());
        Self {
            name,
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Ordered collection of parameters. Iteration order is insertion order,
/// which is also the checkpoint order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: DenseArray) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Argument(format!("duplicate parameter `{name}`")));
        }
        let idx = self.entries.len();
        self.index.insert(name.clone(), idx);
        self.entries.push(ParamEntry::new(name, value));
        Ok(idx)
    }

    /// Xavier-uniform `fan_in x fan_out` matrix.
    pub fn insert_xavier<R: Rng>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<usize> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let values = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        self.insert(name, DenseArray::matrix(fan_in, fan_out, values)?)
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<usize> {
        self.insert(name, DenseArray::zeros(shape))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, idx: usize) -> &ParamEntry {
        &self.entries[idx]
    }

    pub fn entry_mut(&mut self, idx: usize) -> &mut ParamEntry {
        &mut self.entries[idx]
    }

    pub fn value(&self, name: &str) -> Result<&DenseArray> {
        self.index_of(name)
            .map(|i| &self.entries[i].value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut DenseArray> {
        match self.index_of(name) {
            Some(i) => Ok(&mut self.entries[i].value),
            None => Err(Error::UnknownParam(name.to_string())),
        }
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    /// Adds `scale * grads` into the stored gradients.
    pub fn accumulate(&mut self, grads: &ParamGrads, scale: f64) {
        for (entry, g) in self.entries.iter_mut().zip(&grads.0) {
            if let Some(g) = g {
                for (a, b) in entry.grad.values_mut().iter_mut().zip(g.values()) {
                    *a += scale * b;
                }
            }
        }
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::config(
                "checkpoint",
                format!(
                    "expected {} parameter arrays, found {}",
                    self.entries.len(),
                    other.entries.len()
                ),
            ));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::config(
                    "checkpoint",
                    format!(
                        "parameter `{}` {:?} does not match `{}` {:?}",
                        a.name,
                        a.value.shape(),
                        b.name,
                        b.value.shape()
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name)?;
            out.write_all(&(e.value.rank() as u32).to_le_bytes())?;
            for &dim in e.value.shape() {
                out.write_all(&(dim as u64).to_le_bytes())?;
            }
            for v in e.value.values() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(input: R) -> Result<Self> {
        let mut r = crate::data::gdeb::ByteReader::new(input);
        let magic = r.bytes(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(r.error("bad checkpoint magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.error(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut values = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                values.push(r.f64()?);
            }
            let value = DenseArray::new(shape, values)?;
            store
                .insert(name, value)
                .map_err(|e| r.error(e.to_string()))?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_checkpoint(std::io::BufReader::new(file))
    }
}

/// Per-parameter gradients aligned with a [`ParamStore`]'s entry order.
/// `None` marks parameters that did not take part in the computation.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads(pub Vec<Option<DenseArray>>);

impl ParamGrads {
    pub fn get(&self, idx: usize) -> Option<&DenseArray> {
        self.0.get(idx).and_then(|g| g.as_ref())
    }

    /// Gradient entry for a flat coordinate, zero when untouched.
    pub fn coord(&self, idx: usize, flat: usize) -> f64 {
        self.get(idx).map(|g| g.values()[flat]).unwrap_or(0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update over every entry, then zeroes the gradients.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) {
    for e in &mut store.entries {
        e.step += 1;
        let t = e.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let values = e.value.values_mut();
        let grads = e.grad.values();
        let m = e.m.values_mut();
        let v = e.v.values_mut();
        for i in 0..values.len() {
            let g = grads[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            values[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        e.grad.fill(0.0);
    }
}
