//! A small rectifier MLP stored as `layer.<l>.weight` / `layer.<l>.bias`
//! tensors. Parameters are held in `f64` while training and evaluating.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::TaskDataset;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

/// Layer widths of a toy classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub class_count: usize,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, class_count: usize) -> Self {
        Self {
            input_dim,
            hidden,
            class_count,
        }
    }

    /// `(fan_in, fan_out)` per layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden);
        widths.push(self.class_count);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.class_count < 2 || self.hidden.contains(&0) {
            return Err(Error::InvalidDimensions(format!(
                "input_dim={}, hidden={:?}, class_count={}",
                self.input_dim, self.hidden, self.class_count
            )));
        }
        Ok(())
    }

    /// He-normal weights, zero biases; deterministic per seed.
    pub fn init(&self, seed: u64) -> Result<Checkpoint> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = Checkpoint::new();
        for (k, (fan_in, fan_out)) in self.layer_dims().into_iter().enumerate() {
            let std = (2.0 / fan_in as f64).sqrt();
            let w: Vec<f32> = (0..fan_in * fan_out)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (z * std) as f32
                })
                .collect();
            c.insert(format!("layer.{}.weight", k + 1), vec![fan_out, fan_in], w)?;
            c.insert(
                format!("layer.{}.bias", k + 1),
                vec![fan_out],
                vec![0.0; fan_out],
            )?;
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Dense {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Row-major `[fan_out, fan_in]`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    fn zeros_like(&self) -> Self {
        Self {
            fan_in: self.fan_in,
            fan_out: self.fan_out,
            w: vec![0.0; self.w.len()],
            b: vec![0.0; self.b.len()],
        }
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.fan_out {
            let row = &self.w[o * self.fan_in..(o + 1) * self.fan_in];
            let z = row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.b[o];
            out.push(z);
        }
    }
}

/// Working form of a toy model.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub(crate) layers: Vec<Dense>,
}

impl Mlp {
    /// Reads `layer.1..L` weight/bias pairs and checks that widths chain.
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let count = c.layer_count();
        let mut layers = Vec::with_capacity(count);
        for l in 1..=count {
            let wname = format!("layer.{l}.weight");
            let bname = format!("layer.{l}.bias");
            let (w, b) = match (c.get(&wname), c.get(&bname)) {
                (Some(w), Some(b)) => (w, b),
                _ => {
                    return Err(Error::StructureMismatch(format!(
                        "missing {wname} or {bname}"
                    )))
                }
            };
            let [fan_out, fan_in] = w.shape() else {
                return Err(Error::StructureMismatch(format!(
                    "{wname} must be 2-D, got {:?}",
                    w.shape()
                )));
            };
            if b.shape() != [*fan_out] {
                return Err(Error::StructureMismatch(format!(
                    "{bname} shape {:?} vs {fan_out}",
                    b.shape()
                )));
            }
            if let Some(prev) = layers.last().map(|d: &Dense| d.fan_out) {
                if prev != *fan_in {
                    return Err(Error::StructureMismatch(format!(
                        "{wname} expects {fan_in} inputs, previous layer emits {prev}"
                    )));
                }
            }
            layers.push(Dense {
                fan_in: *fan_in,
                fan_out: *fan_out,
                w: w.data().iter().map(|&x| f64::from(x)).collect(),
                b: b.data().iter().map(|&x| f64::from(x)).collect(),
            });
        }
        if c.len() != 2 * count {
            return Err(Error::StructureMismatch(format!(
                "expected exactly {} tensors for a {count}-layer model, found {}",
                2 * count,
                c.len()
            )));
        }
        Ok(Self { layers })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        for (k, d) in self.layers.iter().enumerate() {
            c.insert(
                format!("layer.{}.weight", k + 1),
                vec![d.fan_out, d.fan_in],
                d.w.iter().map(|&x| x as f32).collect(),
            )
            .expect("dense shapes are consistent");
            c.insert(
                format!("layer.{}.bias", k + 1),
                vec![d.fan_out],
                d.b.iter().map(|&x| x as f32).collect(),
            )
            .expect("dense shapes are consistent");
        }
        c
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn class_count(&self) -> usize {
        self.layers.last().unwrap().fan_out
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Dense::zeros_like).collect(),
        }
    }

    pub fn check_dataset(&self, data: &TaskDataset) -> Result<()> {
        if data.input_dim() != self.input_dim() || data.class_count() != self.class_count() {
            return Err(Error::StructureMismatch(format!(
                "model maps {} -> {}, dataset is {} -> {}",
                self.input_dim(),
                self.class_count(),
                data.input_dim(),
                data.class_count()
            )));
        }
        Ok(())
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            layer.forward(&cur, &mut next);
            if k != last {
                next.iter_mut().for_each(|z| *z = z.max(0.0));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    /// Argmax of the logits; ties go to the lowest class index.
    pub fn predict(&self, x: &[f64]) -> usize {
        let z = self.logits(x);
        let mut best = 0;
        for (i, &v) in z.iter().enumerate().skip(1) {
            if v > z[best] {
                best = i;
            }
        }
        best
    }

    /// Fraction of correctly classified samples.
    pub fn accuracy(&self, data: &TaskDataset) -> Result<f64> {
        self.check_dataset(data)?;
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let correct = (0..data.len())
            .filter(|&i| self.predict(data.input(i)) == data.label(i))
            .count();
        Ok(correct as f64 / data.len() as f64)
    }

    /// Mean softmax cross-entropy over the whole dataset.
    pub fn mean_loss(&self, data: &TaskDataset) -> Result<f64> {
        self.check_dataset(data)?;
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let total: f64 = (0..data.len())
            .map(|i| cross_entropy(&self.logits(data.input(i)), data.label(i)).0)
            .sum();
        Ok(total / data.len() as f64)
    }

    /// Mean cross-entropy over the samples at `batch` and its gradient, laid
    /// out like the model itself.
    pub fn loss_and_grad(&self, data: &TaskDataset, batch: &[usize]) -> (f64, Mlp) {
        let mut grad = self.zeros_like();
        let inv_b = 1.0 / batch.len() as f64;
        let depth = self.layers.len();
        let mut acts: Vec<Vec<f64>> = vec![Vec::new(); depth + 1];
        let mut loss = 0.0;
        let mut delta = Vec::new();
        let mut prev_delta = Vec::new();
        for &i in batch {
            acts[0].clear();
            acts[0].extend_from_slice(data.input(i));
            for k in 0..depth {
                let (lo, hi) = acts.split_at_mut(k + 1);
                self.layers[k].forward(&lo[k], &mut hi[0]);
                if k + 1 != depth {
                    hi[0].iter_mut().for_each(|z| *z = z.max(0.0));
                }
            }
            let (l, probs) = cross_entropy(&acts[depth], data.label(i));
            loss += l;
            delta.clear();
            delta.extend(probs.iter().enumerate().map(|(c, &p)| {
                let target = if c == data.label(i) { 1.0 } else { 0.0 };
                (p - target) * inv_b
            }));
            for k in (0..depth).rev() {
                let layer = &self.layers[k];
                let g = &mut grad.layers[k];
                let input = &acts[k];
                let rows = g.w.chunks_exact_mut(layer.fan_in);
                for ((&d, gb), row) in delta.iter().zip(g.b.iter_mut()).zip(rows) {
                    if d == 0.0 {
                        continue;
                    }
                    *gb += d;
                    for (gw, &x) in row.iter_mut().zip(input) {
                        *gw += d * x;
                    }
                }
                if k > 0 {
                    prev_delta.clear();
                    prev_delta.resize(layer.fan_in, 0.0);
                    for (&d, row) in delta.iter().zip(layer.w.chunks_exact(layer.fan_in)) {
                        for (pd, &w) in prev_delta.iter_mut().zip(row) {
                            *pd += d * w;
                        }
                    }
                    // rectifier derivative: post-activation > 0
                    for (pd, &a) in prev_delta.iter_mut().zip(input) {
                        if a <= 0.0 {
                            *pd = 0.0;
                        }
                    }
                    std::mem::swap(&mut delta, &mut prev_delta);
                }
            }
        }
        (loss * inv_b, grad)
    }

    /// All parameters, layer by layer: weights row-major, then biases.
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|d| d.w.iter().chain(&d.b))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|d| d.w.iter_mut().chain(d.b.iter_mut()))
    }
}

/// `(-log softmax(z)[label], softmax(z))`, computed stably.
pub(crate) fn cross_entropy(z: &[f64], label: usize) -> (f64, Vec<f64>) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    let loss = -(z[label] - m - s.ln());
    (loss, exps.into_iter().map(|e| e / s).collect())
}

/// Accuracy of a checkpoint on a dataset.
pub fn evaluate(model: &Checkpoint, data: &TaskDataset) -> Result<f64> {
    Mlp::from_checkpoint(model)?.accuracy(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_shapes_and_names() {
        let spec = MlpSpec::new(16, vec![32, 32], 8);
        let c = spec.init(1).unwrap();
        assert_eq!(c.len(), 6);
        assert_eq!(c.get("layer.1.weight").unwrap().shape(), &[32, 16]);
        assert_eq!(c.get("layer.3.weight").unwrap().shape(), &[8, 32]);
        assert_eq!(c.get("layer.3.bias").unwrap().shape(), &[8]);
        assert_eq!(c.layer_count(), 3);
        assert!(spec.init(1).unwrap().bit_eq(&c));
        assert!(!spec.init(2).unwrap().bit_eq(&c));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let c = MlpSpec::new(4, vec![3], 2).init(0).unwrap();
        let m = Mlp::from_checkpoint(&c).unwrap();
        assert!(m.to_checkpoint().bit_eq(&c));
    }

    #[test]
    fn rejects_broken_structure() {
        let mut c = MlpSpec::new(4, vec![3], 2).init(0).unwrap();
        c.insert("layer.2.weight", vec![2, 4], vec![0.0; 8])
            .unwrap();
        assert!(matches!(
            Mlp::from_checkpoint(&c),
            Err(Error::StructureMismatch(_))
        ));
        let mut c = MlpSpec::new(4, vec![3], 2).init(0).unwrap();
        c.insert("extra", vec![1], vec![0.0]).unwrap();
        assert!(Mlp::from_checkpoint(&c).is_err());
    }

    #[test]
    fn cross_entropy_is_stable() {
        let (l, p) = cross_entropy(&[1000.0, 0.0], 0);
        assert!(l.abs() < 1e-12);
        assert!((p[0] - 1.0).abs() < 1e-12);
        let (l, _) = cross_entropy(&[0.0, 0.0], 1);
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        let c = MlpSpec::new(2, vec![2], 3).init(0).unwrap();
        let zero = c.zeros_like();
        let m = Mlp::from_checkpoint(&zero).unwrap();
        assert_eq!(m.predict(&[1.0, -1.0]), 0);
    }
}
