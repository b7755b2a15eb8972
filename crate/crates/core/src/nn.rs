//! Parameter storage, layer builders, the Adam optimizer, and checkpoints.
//!
//! Models hold a [`ParamStore`] plus lightweight layer descriptors. Each
//! forward pass binds the parameters into a fresh [`Graph`] as leaves, so the
//! same descriptors serve training (leaves marked trainable) and inference.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    trainable: Vec<bool>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor, trainable: bool) -> usize {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name '{name}'"
        );
        let id = self.tensors.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.trainable.push(trainable);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.tensors[i])
    }

    pub fn tensor(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn is_trainable(&self, id: usize) -> bool {
        self.trainable[id]
    }

    pub fn num_trainable_values(&self) -> usize {
        self.tensors
            .iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|(t, _)| t.numel())
            .sum()
    }

    /// Set trainability for every parameter whose name starts with `prefix`.
    pub fn set_trainable_by_prefix(&mut self, prefix: &str, trainable: bool) {
        for (name, flag) in self.names.iter().zip(self.trainable.iter_mut()) {
            if name.starts_with(prefix) {
                *flag = trainable;
            }
        }
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.names
            .iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Insert all parameters into `graph` as leaves. With `training` false the
    /// leaves never receive gradients, regardless of trainability.
    pub fn bind<'a>(&'a self, graph: &mut Graph, training: bool) -> Binding<'a> {
        let ids = self
            .tensors
            .iter()
            .zip(&self.trainable)
            .map(|(t, &tr)| graph.leaf(t.clone(), training && tr))
            .collect();
        Binding { store: self, ids }
    }

    /// Snapshot of parameter values, detached from trainability flags.
    pub fn snapshot_values(&self) -> Vec<Tensor> {
        self.tensors.clone()
    }

    /// Restore values from a snapshot taken on the same store layout.
    pub fn restore_values(&mut self, snapshot: &[Tensor]) {
        assert_eq!(snapshot.len(), self.tensors.len(), "snapshot layout mismatch");
        self.tensors.clone_from_slice(snapshot);
    }

    /// Deterministic fingerprint of all parameter values.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            hasher.update(name.as_bytes());
            for v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_string(&hasher.finalize()[..16])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, bool)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .zip(&self.trainable)
            .map(|((n, t), &tr)| (n.as_str(), t, tr))
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    use std::fmt::Write as _;
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Parameter leaves bound into one graph.
pub struct Binding<'a> {
    store: &'a ParamStore,
    ids: Vec<NodeId>,
}

impl Binding<'_> {
    pub fn node(&self, name: &str) -> NodeId {
        let idx = self
            .store
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"));
        self.ids[*idx]
    }

    pub fn node_by_id(&self, id: usize) -> NodeId {
        self.ids[id]
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

// ---- initialization ----

/// He-style uniform init for a conv kernel (Co,Ci,Kh,Kw).
pub fn init_conv<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

/// Xavier-style uniform init for a dense weight (K,M).
pub fn init_linear<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

// ---- layer descriptors ----

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    Zero,
    Reflect,
}

#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub pad_mode: PadMode,
}

impl Conv2dLayer {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, k: usize) -> Self {
        Conv2dLayer {
            name: name.to_string(),
            in_ch,
            out_ch,
            k,
            stride: 1,
            pad: k / 2,
            pad_mode: PadMode::Zero,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn pad(mut self, p: usize) -> Self {
        self.pad = p;
        self
    }

    pub fn reflect(mut self) -> Self {
        self.pad_mode = PadMode::Reflect;
        self
    }

    pub fn register<R: Rng>(&self, store: &mut ParamStore, rng: &mut R, trainable: bool) {
        let w = init_conv(&[self.out_ch, self.in_ch, self.k, self.k], rng);
        store.add(&format!("{}.w", self.name), w, trainable);
        store.add(&format!("{}.b", self.name), Tensor::zeros(&[self.out_ch]), trainable);
    }

    pub fn apply(&self, g: &mut Graph, bind: &Binding, x: NodeId) -> NodeId {
        let w = bind.node(&format!("{}.w", self.name));
        let b = bind.node(&format!("{}.b", self.name));
        match self.pad_mode {
            PadMode::Zero => g.conv2d(x, w, Some(b), self.stride, self.pad),
            PadMode::Reflect => {
                let padded = if self.pad > 0 { g.reflect_pad(x, self.pad) } else { x };
                g.conv2d(padded, w, Some(b), self.stride, 0)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    pub fn new(name: &str, in_dim: usize, out_dim: usize) -> Self {
        LinearLayer { name: name.to_string(), in_dim, out_dim }
    }

    pub fn register<R: Rng>(&self, store: &mut ParamStore, rng: &mut R, trainable: bool) {
        let w = init_linear(&[self.in_dim, self.out_dim], rng);
        store.add(&format!("{}.w", self.name), w, trainable);
        store.add(&format!("{}.b", self.name), Tensor::zeros(&[self.out_dim]), trainable);
    }

    pub fn apply(&self, g: &mut Graph, bind: &Binding, x: NodeId) -> NodeId {
        let w = bind.node(&format!("{}.w", self.name));
        let b = bind.node(&format!("{}.b", self.name));
        g.linear(x, w, Some(b))
    }
}

// ---- optimizer ----

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let m = store.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
        let v = store.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m, v, t: 0 }
    }

    /// One update over every trainable parameter that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore, binding_ids: &[NodeId], grads: &mut Gradients) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..store.tensors.len() {
            if !store.trainable[i] {
                continue;
            }
            let Some(grad) = grads.take(binding_ids[i]) else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = &mut store.tensors[i];
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

// ---- checkpoints ----

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    meta: BTreeMap<String, serde_json::Value>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

/// Single-file parameter archive: an 8-byte little-endian header length, a
/// JSON header (metadata plus tensor directory), then raw little-endian f64
/// data in directory order.
pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    meta: &BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    let header = CheckpointHeader {
        version: 1,
        meta: meta.clone(),
        tensors: store
            .iter()
            .map(|(n, t, tr)| TensorEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
                trainable: tr,
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serialization");
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(&mut f);
    out.write_all(&(header_bytes.len() as u64).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    out.write_all(&header_bytes).map_err(|e| Error::io(path, e))?;
    for (_, t, _) in store.iter() {
        for v in t.data() {
            out.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub meta: BTreeMap<String, serde_json::Value>,
    pub store: ParamStore,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::Validation(format!("checkpoint {} is truncated", path.display())));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + hlen {
        return Err(Error::Validation(format!("checkpoint {} is truncated", path.display())));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..8 + hlen])
        .map_err(|e| Error::Validation(format!("bad checkpoint header in {}: {e}", path.display())))?;
    let mut offset = 8 + hlen;
    let mut store = ParamStore::new();
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let end = offset + n * 8;
        if end > bytes.len() {
            return Err(Error::Validation(format!(
                "checkpoint {} truncated in tensor '{}'",
                path.display(),
                entry.name
            )));
        }
        let data: Vec<f64> = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.add(&entry.name, Tensor::from_vec(&entry.shape, data), entry.trainable);
        offset = end;
    }
    Ok(LoadedCheckpoint { meta: header.meta, store })
}

/// Copy values from a loaded checkpoint into an existing store, matching by
/// name and checking shapes.
pub fn load_values_into(store: &mut ParamStore, loaded: &ParamStore) -> Result<()> {
    for (name, tensor, _) in loaded.iter() {
        let target = store
            .get_mut(name)
            .ok_or_else(|| Error::Validation(format!("checkpoint has unknown parameter '{name}'")))?;
        if target.shape() != tensor.shape() {
            return Err(Error::Shape(format!(
                "parameter '{name}': checkpoint shape {:?} vs model shape {:?}",
                tensor.shape(),
                target.shape()
            )));
        }
        *target = tensor.clone();
    }
    Ok(())
}
