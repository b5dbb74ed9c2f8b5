use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mlp::Mlp;
use super::TaskDataset;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

/// Mini-batch gradient descent settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    /// Fraction of `steps` spent in linear warmup.
    pub warmup_fraction: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 32,
            peak_lr: 0.05,
            warmup_fraction: 0.1,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    /// Learning rate at `step` (0-based): linear warmup to `peak_lr`, then
    /// cosine decay towards zero over the remaining steps.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warmup = (self.warmup_fraction * self.steps as f64).ceil() as usize;
        if step < warmup {
            return self.peak_lr * (step + 1) as f64 / warmup as f64;
        }
        let span = (self.steps - warmup).max(1) as f64;
        let progress = (step - warmup) as f64 / span;
        0.5 * self.peak_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidDimensions(
                "batch_size must be at least 1".into(),
            ));
        }
        if self.peak_lr.is_nan()
            || self.peak_lr <= 0.0
            || !(0.0..=1.0).contains(&self.warmup_fraction)
            || self.clip_norm.is_nan()
            || self.clip_norm <= 0.0
        {
            return Err(Error::InvalidDimensions(format!(
                "peak_lr={}, warmup_fraction={}, clip_norm={}",
                self.peak_lr, self.warmup_fraction, self.clip_norm
            )));
        }
        Ok(())
    }
}

/// Training data for one task: the current task plus optional replay of
/// earlier tasks.
#[derive(Debug, Clone, Copy)]
pub struct TrainingMix<'a> {
    pub current: &'a TaskDataset,
    pub replay: &'a [&'a TaskDataset],
    /// Share of every batch drawn from `replay` (ignored when it is empty).
    pub replay_fraction: f64,
}

impl<'a> TrainingMix<'a> {
    pub fn single(current: &'a TaskDataset) -> Self {
        Self {
            current,
            replay: &[],
            replay_fraction: 0.0,
        }
    }
}

/// Yields batches of `(dataset, sample)` pairs: current-task samples in
/// reshuffled epochs, replay samples uniform over earlier tasks.
struct BatchSampler<'a> {
    mix: TrainingMix<'a>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
    replay_per_batch: usize,
}

impl<'a> BatchSampler<'a> {
    fn new(mix: TrainingMix<'a>, batch_size: usize, seed: u64) -> Self {
        let replay_per_batch = if mix.replay.is_empty() {
            0
        } else {
            ((batch_size as f64 * mix.replay_fraction).round() as usize).min(batch_size)
        };
        Self {
            order: (0..mix.current.len()).collect(),
            cursor: usize::MAX,
            rng: ChaCha8Rng::seed_from_u64(seed),
            mix,
            replay_per_batch,
        }
    }

    fn next_current(&mut self) -> usize {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    fn fill(
        &mut self,
        batch_size: usize,
        current: &mut Vec<usize>,
        replay: &mut Vec<(usize, usize)>,
    ) {
        current.clear();
        replay.clear();
        for _ in 0..batch_size - self.replay_per_batch {
            let i = self.next_current();
            current.push(i);
        }
        for _ in 0..self.replay_per_batch {
            let t = self.rng.random_range(0..self.mix.replay.len());
            let i = self.rng.random_range(0..self.mix.replay[t].len());
            replay.push((t, i));
        }
    }
}

/// Trains `init` on a single task.
pub fn train(
    init: &Checkpoint,
    data: &TaskDataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Checkpoint> {
    train_mix(init, TrainingMix::single(data), cfg, seed)
}

/// Runs `cfg.steps` clipped gradient-descent steps on softmax cross-entropy.
/// Deterministic in `(init, data, cfg, seed)`.
pub fn train_mix(
    init: &Checkpoint,
    mix: TrainingMix<'_>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if cfg.steps == 0 {
        return Ok(init.clone());
    }
    let mut model = Mlp::from_checkpoint(init)?;
    model.check_dataset(mix.current)?;
    if mix.current.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for r in mix.replay {
        model.check_dataset(r)?;
        if r.is_empty() {
            return Err(Error::EmptyDataset);
        }
    }

    let mut sampler = BatchSampler::new(mix, cfg.batch_size, seed);
    let (mut cur, mut rep) = (Vec::new(), Vec::new());
    // Replay samples are copied into a scratch dataset so one gradient call covers the whole batch.
    let mut scratch = TaskDataset::empty_like(mix.current);
    for step in 0..cfg.steps {
        sampler.fill(cfg.batch_size, &mut cur, &mut rep);
        let (loss, mut grad) = if rep.is_empty() {
            model.loss_and_grad(mix.current, &cur)
        } else {
            scratch.clear();
            for &i in &cur {
                scratch.push_from(mix.current, i);
            }
            for &(t, i) in &rep {
                scratch.push_from(mix.replay[t], i);
            }
            let all: Vec<usize> = (0..scratch.len()).collect();
            model.loss_and_grad(&scratch, &all)
        };
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        let norm = grad.params().map(|g| g * g).sum::<f64>().sqrt();
        let clip = if norm > cfg.clip_norm {
            cfg.clip_norm / norm
        } else {
            1.0
        };
        let lr = cfg.lr_at(step) * clip;
        for (p, g) in model.params_mut().zip(grad.params_mut()) {
            *p -= lr * *g;
        }
    }
    if model.params().any(|p| !p.is_finite()) {
        return Err(Error::Divergence {
            step: cfg.steps,
            loss: f64::NAN,
        });
    }
    Ok(model.to_checkpoint())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let cfg = TrainConfig {
            steps: 100,
            peak_lr: 1.0,
            ..TrainConfig::default()
        };
        assert!((cfg.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((cfg.lr_at(9) - 1.0).abs() < 1e-12);
        assert!((cfg.lr_at(10) - 1.0).abs() < 1e-12);
        assert!(cfg.lr_at(99) < 0.01);
        for s in 10..99 {
            assert!(cfg.lr_at(s + 1) <= cfg.lr_at(s));
        }
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
