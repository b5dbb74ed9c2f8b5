//! Desk-scale continual-learning substrate.
//!
//! Every task is a Gaussian-mixture classification problem whose class
//! centers are a rotated copy of one shared prototype set. Adaptation tasks
//! use large rotation angles, holdout tasks small ones, and the base model is
//! pretrained on lightly rotated prototypes, so the base starts out good on
//! the holdout tasks and weak on the adaptation tasks.

mod mlp;
mod train;

use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

pub use mlp::{evaluate, Mlp, MlpSpec};
pub use train::{train, train_mix, TrainConfig, TrainingMix};

/// Samples of one classification task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    task_id: usize,
    input_dim: usize,
    class_count: usize,
    inputs: Vec<f64>,
    labels: Vec<usize>,
}

impl TaskDataset {
    pub fn new(
        task_id: usize,
        input_dim: usize,
        class_count: usize,
        inputs: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if input_dim == 0 || class_count == 0 {
            return Err(Error::InvalidDimensions(
                "input_dim and class_count must be positive".into(),
            ));
        }
        if inputs.len() != labels.len() * input_dim {
            return Err(Error::InvalidDimensions(format!(
                "{} inputs for {} labels of dimension {input_dim}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::InvalidDimensions(format!(
                "label {bad} >= class_count {class_count}"
            )));
        }
        Ok(Self {
            task_id,
            input_dim,
            class_count,
            inputs,
            labels,
        })
    }

    pub(crate) fn empty_like(other: &TaskDataset) -> Self {
        Self {
            task_id: other.task_id,
            input_dim: other.input_dim,
            class_count: other.class_count,
            inputs: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub(crate) fn clear(&mut self) {
        self.inputs.clear();
        self.labels.clear();
    }

    pub(crate) fn push_from(&mut self, src: &TaskDataset, i: usize) {
        self.inputs.extend_from_slice(src.input(i));
        self.labels.push(src.label(i));
    }

    /// All samples of `parts`, in order.
    pub fn concat(task_id: usize, parts: &[&TaskDataset]) -> Result<Self> {
        let first = parts.first().ok_or(Error::EmptyDataset)?;
        let mut out = Self::empty_like(first);
        out.task_id = task_id;
        for p in parts {
            if p.input_dim != first.input_dim || p.class_count != first.class_count {
                return Err(Error::InvalidDimensions(
                    "cannot concatenate datasets of different shape".into(),
                ));
            }
            out.inputs.extend_from_slice(&p.inputs);
            out.labels.extend_from_slice(&p.labels);
        }
        Ok(out)
    }

    pub fn task_id(&self) -> usize {
        self.task_id
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Writes `x0,..,x{d-1},label` rows with a header line.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        let header: Vec<String> = (0..self.input_dim).map(|j| format!("x{j}")).collect();
        writeln!(w, "{},label", header.join(","))?;
        for i in 0..self.len() {
            let row: Vec<String> = self.input(i).iter().map(|x| format!("{x:.6}")).collect();
            writeln!(w, "{},{}", row.join(","), self.label(i))?;
        }
        Ok(())
    }
}

/// Knobs of the synthetic stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchParams {
    pub input_dim: usize,
    pub class_count: usize,
    pub tasks: usize,
    pub holdout: usize,
    pub samples_per_task: usize,
    pub stream_seed: u64,
    /// Norm of every prototype center.
    pub radius: f64,
    /// Per-coordinate standard deviation around a center.
    pub noise: f64,
    /// Rotation angle range (radians) of adaptation tasks.
    pub adapt_angle: [f64; 2],
    /// Rotation angle range (radians) of holdout tasks; must not overlap `adapt_angle`.
    pub holdout_angle: [f64; 2],
    /// Samples in the base-model pretraining set.
    pub pretrain_samples: usize,
    /// Largest rotation (radians) applied to pretraining samples.
    pub pretrain_angle: f64,
}

impl Default for BenchParams {
    fn default() -> Self {
        Self {
            input_dim: 16,
            class_count: 8,
            tasks: 20,
            holdout: 5,
            samples_per_task: 256,
            stream_seed: 0,
            radius: 3.0,
            noise: 0.5,
            adapt_angle: [0.8, 1.4],
            holdout_angle: [0.2, 0.5],
            pretrain_samples: 2048,
            pretrain_angle: 0.5,
        }
    }
}

impl BenchParams {
    pub fn validate(&self) -> Result<()> {
        let counts_ok = self.input_dim >= 2
            && self.class_count >= 2
            && self.tasks >= 1
            && self.samples_per_task >= 1
            && self.pretrain_samples >= 1;
        if !counts_ok {
            return Err(Error::InvalidDimensions(format!(
                "input_dim={}, class_count={}, tasks={}, samples_per_task={}, pretrain_samples={}",
                self.input_dim,
                self.class_count,
                self.tasks,
                self.samples_per_task,
                self.pretrain_samples
            )));
        }
        let [a0, a1] = self.adapt_angle;
        let [h0, h1] = self.holdout_angle;
        if a0 > a1 || h0 > h1 || a0 < 0.0 || h0 < 0.0 {
            return Err(Error::InvalidDimensions(
                "angle ranges must be ordered and non-negative".into(),
            ));
        }
        if !(h1 < a0 || a1 < h0) {
            return Err(Error::InvalidDimensions(format!(
                "holdout angles {:?} overlap adaptation angles {:?}",
                self.holdout_angle, self.adapt_angle
            )));
        }
        if self.radius.is_nan() || self.radius <= 0.0 || self.noise.is_nan() || self.noise < 0.0 {
            return Err(Error::InvalidDimensions(
                "radius must be positive and noise non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// A generated stream: adaptation tasks, holdout tasks, and base pretraining data.
#[derive(Debug, Clone)]
pub struct ToyBench {
    pub params: BenchParams,
    pub adaptation_tasks: Vec<TaskDataset>,
    pub holdout_tasks: Vec<TaskDataset>,
    pub pretraining: TaskDataset,
    /// Rotation angle of every adaptation task, then every holdout task.
    pub angles: Vec<f64>,
}

const ROLE_PROTOTYPES: u64 = 0;
const ROLE_ADAPT: u64 = 1;
const ROLE_HOLDOUT: u64 = 2;
const ROLE_PRETRAIN: u64 = 3;

fn role_rng(seed: u64, role: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((role << 32) | index);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `d` orthonormal vectors from Gram-Schmidt on a Gaussian matrix.
fn random_orthonormal(d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(d);
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        for u in &q {
            let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= proj * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            q.push(v);
        }
    }
    q
}

/// Rotation by `angle` in every plane of a random orthonormal pairing of
/// axes, so each vector is turned by exactly `angle` (odd `d` keeps one axis).
fn random_rotation(d: usize, angle: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let q = random_orthonormal(d, rng);
    let (c, s) = (angle.cos(), angle.sin());
    // R = I + Σ_planes [(c-1)(u uᵀ + v vᵀ) + s(v uᵀ - u vᵀ)]
    let mut r = vec![0.0; d * d];
    for i in 0..d {
        r[i * d + i] = 1.0;
    }
    for pair in q.chunks_exact(2) {
        let (u, v) = (&pair[0], &pair[1]);
        for i in 0..d {
            for j in 0..d {
                r[i * d + j] +=
                    (c - 1.0) * (u[i] * u[j] + v[i] * v[j]) + s * (v[i] * u[j] - u[i] * v[j]);
            }
        }
    }
    r
}

fn sample_task(
    task_id: usize,
    centers: &[Vec<f64>],
    n: usize,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TaskDataset> {
    let k = centers.len();
    let d = centers[0].len();
    let mut inputs = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % k;
        inputs.extend(centers[label].iter().map(|&c| c + noise * gaussian(rng)));
        labels.push(label);
    }
    TaskDataset::new(task_id, d, k, inputs, labels)
}

/// Position of item `index` in a randomly shifted golden-ratio sequence on
/// [0, 1): evenly covered by every prefix of the stream.
fn spread(seed: u64, role: u64, index: usize) -> f64 {
    const GOLDEN: f64 = 0.618_033_988_749_894_9;
    let offset = role_rng(seed, role, u32::MAX as u64).random::<f64>();
    (offset + index as f64 * GOLDEN).fract()
}

/// Samples around the prototypes, each turned by its own angle in
/// `[0, pretrain_angle]` within a random plane through the prototype.
fn sample_pretraining(
    prototypes: &[Vec<f64>],
    params: &BenchParams,
    rng: &mut ChaCha8Rng,
) -> Result<TaskDataset> {
    let k = prototypes.len();
    let d = params.input_dim;
    let mut inputs = Vec::with_capacity(params.pretrain_samples * d);
    let mut labels = Vec::with_capacity(params.pretrain_samples);
    for i in 0..params.pretrain_samples {
        let label = i % k;
        let p = &prototypes[label];
        let angle = params.pretrain_angle * rng.random::<f64>();
        // unit direction orthogonal to p, scaled to |p|
        let mut u: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        let pp: f64 = p.iter().map(|x| x * x).sum();
        let proj = u.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() / pp;
        u.iter_mut().zip(p).for_each(|(a, b)| *a -= proj * b);
        let scale = pp.sqrt() / u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let (c, s) = (angle.cos(), angle.sin());
        inputs.extend(
            p.iter()
                .zip(&u)
                .map(|(&a, &b)| c * a + s * scale * b + params.noise * gaussian(rng)),
        );
        labels.push(label);
    }
    TaskDataset::new(0, d, k, inputs, labels)
}

fn rotate(r: &[f64], p: &[f64]) -> Vec<f64> {
    let d = p.len();
    (0..d)
        .map(|i| (0..d).map(|j| r[i * d + j] * p[j]).sum())
        .collect()
}

/// Builds the stream described by `params`; deterministic per `stream_seed`.
/// Task `k` depends only on the seed and `k`, so longer streams extend shorter ones.
pub fn generate_stream(params: &BenchParams) -> Result<ToyBench> {
    params.validate()?;
    let d = params.input_dim;
    let seed = params.stream_seed;

    let mut rng = role_rng(seed, ROLE_PROTOTYPES, 0);
    // Mutually orthogonal while class_count <= input_dim, so every pair of
    // classes is equally far apart; extra classes get random directions.
    let mut directions = random_orthonormal(d, &mut rng);
    while directions.len() < params.class_count {
        let v: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        directions.push(v.into_iter().map(|x| x / n).collect());
    }
    let prototypes: Vec<Vec<f64>> = directions
        .into_iter()
        .take(params.class_count)
        .map(|v| v.into_iter().map(|x| x * params.radius).collect())
        .collect();

    let mut angles = Vec::with_capacity(params.tasks + params.holdout);
    let mut make =
        |role: u64, index: usize, range: [f64; 2], task_id: usize| -> Result<TaskDataset> {
            let angle = range[0] + (range[1] - range[0]) * spread(seed, role, index);
            let mut rng = role_rng(seed, role, index as u64);
            angles.push(angle);
            let r = random_rotation(d, angle, &mut rng);
            let centers: Vec<Vec<f64>> = prototypes.iter().map(|p| rotate(&r, p)).collect();
            sample_task(
                task_id,
                &centers,
                params.samples_per_task,
                params.noise,
                &mut rng,
            )
        };
    let adaptation_tasks = (0..params.tasks)
        .map(|k| make(ROLE_ADAPT, k, params.adapt_angle, k + 1))
        .collect::<Result<Vec<_>>>()?;
    let holdout_tasks = (0..params.holdout)
        .map(|k| make(ROLE_HOLDOUT, k, params.holdout_angle, params.tasks + k + 1))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = role_rng(seed, ROLE_PRETRAIN, 0);
    let pretraining = sample_pretraining(&prototypes, params, &mut rng)?;

    Ok(ToyBench {
        params: params.clone(),
        adaptation_tasks,
        holdout_tasks,
        pretraining,
        angles,
    })
}

impl ToyBench {
    pub fn task(&self, t: usize) -> Option<&TaskDataset> {
        t.checked_sub(1).and_then(|k| self.adaptation_tasks.get(k))
    }

    pub fn task_count(&self) -> usize {
        self.adaptation_tasks.len()
    }

    /// Architecture matching this bench's input and label space.
    pub fn model_spec(&self, hidden: Vec<usize>) -> MlpSpec {
        MlpSpec::new(self.params.input_dim, hidden, self.params.class_count)
    }

    /// The base model θ₀: a fresh network trained on the pretraining set.
    pub fn base_model(&self, spec: &MlpSpec, cfg: &TrainConfig, seed: u64) -> Result<Checkpoint> {
        let init = spec.init(seed)?;
        train(&init, &self.pretraining, cfg, seed ^ 0x5eed_ba5e)
    }
}
