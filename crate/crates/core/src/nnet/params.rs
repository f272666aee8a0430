//! Named parameter tensors with gradient slots and Adam moments.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

/// Handle to a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimizer group. Each group gets its own learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    Network,
    Code,
    Bone,
    Scalar,
    Camera,
    PixelEmbedding,
    Uncertainty,
    /// Non-learnable state that travels with checkpoints.
    Buffer,
}

impl Group {
    pub const ALL: [Group; 8] = [
        Group::Network,
        Group::Code,
        Group::Bone,
        Group::Scalar,
        Group::Camera,
        Group::PixelEmbedding,
        Group::Uncertainty,
        Group::Buffer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::Network => "network",
            Group::Code => "code",
            Group::Bone => "bone",
            Group::Scalar => "scalar",
            Group::Camera => "camera",
            Group::PixelEmbedding => "pixel_embedding",
            Group::Uncertainty => "uncertainty",
            Group::Buffer => "buffer",
        }
    }

    pub fn from_name(name: &str) -> Option<Group> {
        Group::ALL.iter().copied().find(|g| g.name() == name)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: Group,
    pub frozen: bool,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Hyper-parameters of one Adam update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Every learnable quantity of the model, plus checkpointed state buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
    index: BTreeMap<String, ParamId>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Names are unique.
    pub fn add(
        &mut self,
        name: &str,
        shape: &[usize],
        group: Group,
        data: Vec<f64>,
    ) -> Result<ParamId> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor {name}: shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        if self.index.contains_key(name) {
            return Err(Error::ShapeMismatch(format!(
                "duplicate tensor name {name}"
            )));
        }
        let id = ParamId(self.tensors.len());
        self.tensors.push(Tensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            group,
            frozen: false,
            grad: vec![0.0; len],
            m: vec![0.0; len],
            v: vec![0.0; len],
            data,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize], group: Group) -> Result<ParamId> {
        let len = shape.iter().product();
        self.add(name, shape, group, vec![0.0; len])
    }

    pub(crate) fn push_tensor(&mut self, tensor: Tensor) -> Result<ParamId> {
        if self.index.contains_key(&tensor.name) {
            return Err(Error::Checkpoint(format!(
                "duplicate tensor {}",
                tensor.name
            )));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(tensor.name.clone(), id);
        self.tensors.push(tensor);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensors(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), t))
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.tensors[id.0].data
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.tensors[id.0].data
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.tensors[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.tensors[id.0].grad
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.tensors[id.0].frozen = frozen;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.tensors[id.0].frozen
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds an accumulated gradient set into the gradient buffers.
    pub fn accumulate(&mut self, grads: &Grads) {
        for (i, slot) in grads.dense.iter().enumerate() {
            if let Some(g) = slot {
                for (dst, src) in self.tensors[i].grad.iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
        for (id, offset, values) in &grads.sparse {
            let dst = &mut self.tensors[id.0].grad[*offset..*offset + values.len()];
            for (d, s) in dst.iter_mut().zip(values) {
                *d += s;
            }
        }
    }

    /// One Adam update over every unfrozen, learnable tensor.
    pub fn adam_step(&mut self, lr: f64, beta1: f64, beta2: f64, eps: f64) {
        let hp = Adam {
            lr,
            beta1,
            beta2,
            eps,
        };
        self.adam_step_with(&hp, |_| 1.0);
    }

    /// Adam with a per-tensor learning-rate multiplier. A multiplier of zero
    /// leaves the tensor and its moments untouched.
    pub fn adam_step_with(&mut self, hp: &Adam, lr_scale: impl Fn(&Tensor) -> f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - hp.beta1.powi(t);
        let bc2 = 1.0 - hp.beta2.powi(t);
        for tensor in &mut self.tensors {
            if tensor.frozen || tensor.group == Group::Buffer {
                continue;
            }
            let scale = lr_scale(tensor);
            if scale == 0.0 {
                continue;
            }
            let lr = hp.lr * scale;
            let Tensor {
                data, grad, m, v, ..
            } = tensor;
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
                v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + hp.eps);
            }
        }
    }

    /// Order-sensitive checksum over the data of the selected tensors.
    pub fn checksum(&self, mut include: impl FnMut(&Tensor) -> bool) -> u64 {
        // FNV-1a over the raw bit patterns.
        let mut h: u64 = 0xcbf29ce484222325;
        for t in &self.tensors {
            if !include(t) {
                continue;
            }
            for b in t.name.bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            for x in &t.data {
                for b in x.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

/// Gradient accumulator detached from the store, so that independent batches
/// can be reduced in a fixed order.
///
/// Dense slots are allocated on first touch; `sparse` holds row updates for
/// very large tensors (per-pixel embeddings).
#[derive(Clone, Debug, Default)]
pub struct Grads {
    dense: Vec<Option<Vec<f64>>>,
    sparse: Vec<(ParamId, usize, Vec<f64>)>,
}

impl Grads {
    pub fn new(store: &ParamStore) -> Self {
        Grads {
            dense: vec![None; store.len()],
            sparse: Vec::new(),
        }
    }

    /// Mutable gradient slot for `id`, zero-initialised on first use.
    pub fn slot(&mut self, id: ParamId, len: usize) -> &mut [f64] {
        if id.0 >= self.dense.len() {
            self.dense.resize(id.0 + 1, None);
        }
        self.dense[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.dense.get(id.0).and_then(|s| s.as_deref())
    }

    pub fn add_sparse(&mut self, id: ParamId, offset: usize, values: &[f64]) {
        self.sparse.push((id, offset, values.to_vec()));
    }

    pub fn sparse_entries(&self) -> &[(ParamId, usize, Vec<f64>)] {
        &self.sparse
    }

    /// Appends `other` after `self`; addition order is preserved.
    pub fn merge(&mut self, other: Grads) {
        if other.dense.len() > self.dense.len() {
            self.dense.resize(other.dense.len(), None);
        }
        for (i, slot) in other.dense.into_iter().enumerate() {
            if let Some(g) = slot {
                match &mut self.dense[i] {
                    Some(dst) => dst.iter_mut().zip(&g).for_each(|(d, s)| *d += s),
                    none => *none = Some(g),
                }
            }
        }
        self.sparse.extend(other.sparse);
    }

    pub fn is_empty(&self) -> bool {
        self.dense.iter().all(Option::is_none) && self.sparse.is_empty()
    }
}
