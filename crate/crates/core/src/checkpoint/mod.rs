//! Named-tensor checkpoints and the task-vector algebra every merge is built on.
//!
//! A [`Checkpoint`] is an ordered map from tensor name to a flat `f32` buffer
//! plus its shape. Iteration order is lexicographic by name, so every
//! reduction over a checkpoint visits tensors in the same order.
//!
//! Layered models name their tensors `layer.<l>.<param>` (1-based `l`); see
//! [`layer_index`]. Tensors without that prefix count as the final layer.

mod buffer;
mod format;

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub use buffer::{BufferEntryInfo, CheckpointBuffer};
pub use format::{
    load_checkpoint, save_checkpoint, write_checkpoint, CheckpointReader, TensorEntry,
    FORMAT_VERSION, MAGIC,
};

/// A dense `f32` tensor stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        validate_shape("<tensor>", &shape, data.len())?;
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&x| f64::from(x) * f64::from(x))
            .sum::<f64>()
            .sqrt()
    }
}

fn validate_shape(name: &str, shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::InvalidTensor {
            name: name.to_string(),
            reason: "shape must have at least one dimension".into(),
        });
    }
    if shape.contains(&0) {
        return Err(Error::InvalidTensor {
            name: name.to_string(),
            reason: format!("shape {shape:?} has a zero dimension"),
        });
    }
    let expected = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::InvalidTensor {
            name: name.to_string(),
            reason: format!("shape {shape:?} overflows"),
        })?;
    if expected != len {
        return Err(Error::InvalidTensor {
            name: name.to_string(),
            reason: format!("shape {shape:?} needs {expected} elements, got {len}"),
        });
    }
    Ok(())
}

/// Ordered map from tensor name to tensor, plus free-form string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Tensor>,
    meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts (or replaces) a tensor after validating its name and shape.
    pub fn insert(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f32>,
    ) -> Result<()> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::InvalidTensor {
                name,
                reason: "tensor names must be non-empty".into(),
            });
        }
        validate_shape(&name, &shape, data.len())?;
        self.tensors.insert(name, Tensor { shape, data });
        Ok(())
    }

    pub fn insert_tensor(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let Tensor { shape, data } = tensor;
        self.insert(name, shape, data)
    }

    /// Builder-style [`Checkpoint::insert`].
    pub fn with(
        mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f32>,
    ) -> Result<Self> {
        self.insert(name, shape, data)?;
        Ok(self)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    /// Mutable view of a tensor's elements; the shape cannot change.
    pub fn data_mut(&mut self, name: &str) -> Option<&mut [f32]> {
        self.tensors.get_mut(name).map(|t| t.data.as_mut_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut [f32])> {
        self.tensors
            .iter_mut()
            .map(|(k, v)| (k.as_str(), v.data.as_mut_slice()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.meta.insert(key.into(), value.into());
    }

    pub fn clear_meta(&mut self) {
        self.meta.clear();
    }

    /// Same structure, every element zero, no metadata.
    pub fn zeros_like(&self) -> Self {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, t)| {
                (
                    k.clone(),
                    Tensor {
                        shape: t.shape.clone(),
                        data: vec![0.0; t.data.len()],
                    },
                )
            })
            .collect();
        Self {
            tensors,
            meta: BTreeMap::new(),
        }
    }

    /// Checks that `other` has exactly the same names and per-name shapes.
    pub fn check_compatible(&self, other: &Checkpoint) -> Result<()> {
        for name in self.tensors.keys() {
            if !other.tensors.contains_key(name) {
                return Err(Error::KeyMismatch(name.clone()));
            }
        }
        for (name, t) in &other.tensors {
            match self.tensors.get(name) {
                None => return Err(Error::KeyMismatch(name.clone())),
                Some(mine) if mine.shape != t.shape => {
                    return Err(Error::ShapeMismatch {
                        name: name.clone(),
                        left: mine.shape.clone(),
                        right: t.shape.clone(),
                    })
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Element-wise combination of two structurally identical checkpoints.
    /// The result carries no metadata.
    pub fn zip_with(&self, other: &Checkpoint, f: impl Fn(f32, f32) -> f32) -> Result<Checkpoint> {
        self.check_compatible(other)?;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, a)| {
                let b = &other.tensors[name];
                let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
                (
                    name.clone(),
                    Tensor {
                        shape: a.shape.clone(),
                        data,
                    },
                )
            })
            .collect();
        Ok(Checkpoint {
            tensors,
            meta: BTreeMap::new(),
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Checkpoint {
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                (
                    name.clone(),
                    Tensor {
                        shape: t.shape.clone(),
                        data: t.data.iter().map(|&x| f(x)).collect(),
                    },
                )
            })
            .collect();
        Checkpoint {
            tensors,
            meta: BTreeMap::new(),
        }
    }

    pub fn add(&self, other: &Checkpoint) -> Result<Checkpoint> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Checkpoint) -> Result<Checkpoint> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f32) -> Checkpoint {
        self.map(|x| x * c)
    }

    /// Inner product over all tensors, accumulated in `f64`.
    pub fn dot(&self, other: &Checkpoint) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self
            .tensors
            .iter()
            .map(|(name, a)| {
                a.data
                    .iter()
                    .zip(&other.tensors[name].data)
                    .map(|(&x, &y)| f64::from(x) * f64::from(y))
                    .sum::<f64>()
            })
            .sum())
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors
            .values()
            .map(|t| {
                t.data
                    .iter()
                    .map(|&x| f64::from(x) * f64::from(x))
                    .sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Equality on raw bit patterns (distinguishes `-0.0` from `0.0`), metadata included.
    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        self.meta == other.meta
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| {
                    ka == kb
                        && a.shape == b.shape
                        && a.data.len() == b.data.len()
                        && a.data
                            .iter()
                            .zip(&b.data)
                            .all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }

    /// Largest absolute element-wise difference; `None` if structures differ.
    pub fn max_abs_diff(&self, other: &Checkpoint) -> Option<f64> {
        self.check_compatible(other).ok()?;
        Some(
            self.tensors
                .iter()
                .flat_map(|(name, a)| {
                    a.data
                        .iter()
                        .zip(&other.tensors[name].data)
                        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).abs())
                })
                .fold(0.0, f64::max),
        )
    }

    /// CRC32 over names, shapes and element bits, rendered as hex.
    pub fn fingerprint(&self) -> String {
        let mut h = crc32fast::Hasher::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            h.update(&[0]);
            for &d in &t.shape {
                h.update(&(d as u64).to_le_bytes());
            }
            for &x in &t.data {
                h.update(&x.to_le_bytes());
            }
        }
        format!("{:08x}", h.finalize())
    }

    /// Number of layers `L` implied by the `layer.<l>.` naming convention (at least 1).
    pub fn layer_count(&self) -> usize {
        self.names().filter_map(layer_index).max().unwrap_or(1)
    }
}

/// Parses the 1-based layer index from a `layer.<l>.<param>` tensor name.
pub fn layer_index(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("layer.")?;
    let (idx, param) = rest.split_once('.')?;
    if param.is_empty() {
        return None;
    }
    idx.parse::<usize>().ok().filter(|&l| l >= 1)
}

/// Element-wise difference `expert - base`, keyed like the base it was taken against.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    deltas: Checkpoint,
    base_id: String,
}

impl TaskVector {
    pub fn between(expert: &Checkpoint, base: &Checkpoint) -> Result<Self> {
        let deltas = expert.sub(base)?;
        Ok(Self {
            deltas,
            base_id: base.fingerprint(),
        })
    }

    /// Wraps raw deltas; `base_id` is caller-supplied.
    pub fn from_deltas(deltas: Checkpoint, base_id: impl Into<String>) -> Self {
        let mut deltas = deltas;
        deltas.clear_meta();
        Self {
            deltas,
            base_id: base_id.into(),
        }
    }

    pub fn deltas(&self) -> &Checkpoint {
        &self.deltas
    }

    pub fn deltas_mut(&mut self) -> &mut Checkpoint {
        &mut self.deltas
    }

    pub fn into_deltas(self) -> Checkpoint {
        self.deltas
    }

    pub fn base_id(&self) -> &str {
        &self.base_id
    }

    pub fn scale(&self, c: f32) -> TaskVector {
        TaskVector {
            deltas: self.deltas.scale(c),
            base_id: self.base_id.clone(),
        }
    }

    /// `base + deltas`, computed in `f64` and rounded once.
    pub fn apply(&self, base: &Checkpoint) -> Result<Checkpoint> {
        base.zip_with(&self.deltas, |b, d| (f64::from(b) + f64::from(d)) as f32)
    }

    pub fn l2_norm(&self) -> f64 {
        self.deltas.l2_norm()
    }
}
