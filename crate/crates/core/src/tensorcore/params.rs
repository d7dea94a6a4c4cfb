use std::collections::HashMap;
use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::real::Real;
use super::tensor::Tensor;
use super::TensorError;

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

fn fresh_uid() -> u64 {
    NEXT_UID.fetch_add(1, Ordering::Relaxed)
}

pub type ParamId = usize;

/// Named learnable tensors in insertion order.
#[derive(Debug)]
pub struct ParamStore<T> {
    uid: u64,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> Clone for ParamStore<T> {
    /// A clone is a distinct store: graphs bind it independently of the original.
    fn clone(&self) -> Self {
        Self { uid: fresh_uid(), names: self.names.clone(), tensors: self.tensors.clone(), index: self.index.clone() }
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { uid: fresh_uid(), names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        if let Some(&id) = self.index.get(name) {
            self.tensors[id] = value;
            return id;
        }
        let id = self.tensors.len();
        self.names.push(name.to_string());
        self.tensors.push(value);
        self.index.insert(name.to_string(), id);
        id
    }

    /// Uniform Glorot initialization for a `fan_in x fan_out` weight.
    pub fn insert_glorot<R: Rng>(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> ParamId {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| T::of(rng.gen_range(-a..a))).collect();
        self.insert(name, Tensor::new(&[fan_in, fan_out], data).expect("glorot shape"))
    }

    pub fn insert_const(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.insert(name, Tensor::full(shape, T::of(value)))
    }

    /// Normal-ish small init, used for learned tokens and queries.
    pub fn insert_small<R: Rng>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) -> ParamId {
        let a = std * 3f64.sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.gen_range(-a..a))).collect();
        self.insert(name, Tensor::new(shape, data).expect("small init shape"))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| &self.tensors[id])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (i, n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Copies every tensor whose name starts with `prefix` from `other`, keeping names.
    pub fn copy_prefix_from(&mut self, other: &ParamStore<T>, prefix: &str) -> usize {
        let mut n = 0;
        for (_, name, t) in other.iter() {
            if name.starts_with(prefix) {
                self.insert(name, t.clone());
                n += 1;
            }
        }
        n
    }

    /// Subset of the store restricted to names with `prefix`.
    pub fn filter_prefix(&self, prefixes: &[&str]) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (_, name, t) in self.iter() {
            if prefixes.iter().any(|p| name.starts_with(p)) {
                out.insert(name, t.clone());
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (_, name, t) in self.iter() {
            out.insert(name, t.cast());
        }
        out
    }

    pub fn max_abs_diff(&self, other: &ParamStore<T>) -> f64 {
        self.iter().map(|(_, name, t)| other.get(name).map_or(f64::INFINITY, |o| t.max_abs_diff(o))).fold(0.0, f64::max)
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GradStore<T> {
    grads: Vec<Tensor<T>>,
}

impl<T: Real> GradStore<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self { grads: store.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect() }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor<T>) {
        self.grads[id].add_assign(g);
    }

    /// Adds the gradients a graph computed for parameters of `store`.
    pub fn accumulate_graph(
        &mut self,
        graph: &super::graph::Graph<T>,
        grads: &super::graph::Gradients<T>,
        store: &ParamStore<T>,
    ) {
        for (id, v) in graph.bound_params(store) {
            if let Some(g) = grads.get(v) {
                self.grads[id].add_assign(g);
            }
        }
    }

    pub fn merge(&mut self, other: &GradStore<T>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn is_all_zero(&self) -> bool {
        self.grads.iter().all(|t| t.data().iter().all(|v| *v == T::zero()))
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }
}

const MAGIC: &[u8; 8] = b"JGPARAMS";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes `store` as: magic, version, record count, then per record the name,
/// rank, dims and little-endian `f32` values. All integers are little-endian `u32`.
pub fn write_checkpoint<T: Real, W: Write>(store: &ParamStore<T>, mut w: W) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, name, t) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, TensorError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<T: Real, R: Read>(mut r: R) -> Result<ParamStore<T>, TensorError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    if &magic != MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        let name = String::from_utf8(name).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        let data = raw.chunks_exact(4).map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)).collect();
        store.insert(&name, Tensor::new(&shape, data)?);
    }
    Ok(store)
}
