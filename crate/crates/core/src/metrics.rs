//! Knowledge accumulation, zero-shot retention and their trajectories.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::toybench::{Mlp, TaskDataset, ToyBench};

/// Metrics of the deployed model after task `t` (t = 0 for reference rows).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub t: usize,
    pub a_ka: f64,
    pub a_zs: f64,
    pub geo_mean: f64,
    pub wall_time: f64,
}

impl MetricsRow {
    pub fn new(t: usize, a_ka: f64, a_zs: f64, wall_time: f64) -> Self {
        Self {
            t,
            a_ka,
            a_zs,
            geo_mean: geo_mean(a_ka, a_zs),
            wall_time,
        }
    }

    /// Evaluates `model` on every adaptation and holdout task of `bench`.
    pub fn measure(t: usize, model: &Checkpoint, bench: &ToyBench, wall_time: f64) -> Result<Self> {
        let mlp = Mlp::from_checkpoint(model)?;
        let a_ka = mean_accuracy(&mlp, &bench.adaptation_tasks)?;
        let a_zs = if bench.holdout_tasks.is_empty() {
            return Err(Error::EmptyHoldout);
        } else {
            mean_accuracy(&mlp, &bench.holdout_tasks)?
        };
        Ok(Self::new(t, a_ka, a_zs, wall_time))
    }
}

pub fn geo_mean(a_ka: f64, a_zs: f64) -> f64 {
    (a_ka * a_zs).sqrt()
}

fn mean_accuracy(model: &Mlp, tasks: &[TaskDataset]) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut sum = 0.0;
    for task in tasks {
        sum += model.accuracy(task)?;
    }
    Ok(sum / tasks.len() as f64)
}

/// Mean accuracy over all adaptation tasks, seen or not.
pub fn knowledge_accumulation(model: &Checkpoint, bench: &ToyBench) -> Result<f64> {
    mean_accuracy(&Mlp::from_checkpoint(model)?, &bench.adaptation_tasks)
}

/// Mean accuracy over the holdout tasks.
pub fn zero_shot_retention(model: &Checkpoint, bench: &ToyBench) -> Result<f64> {
    if bench.holdout_tasks.is_empty() {
        return Err(Error::EmptyHoldout);
    }
    mean_accuracy(&Mlp::from_checkpoint(model)?, &bench.holdout_tasks)
}

/// Per-task rows of one pipeline run, in task order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTrajectory {
    pub rows: Vec<MetricsRow>,
}

impl MetricsTrajectory {
    pub const CSV_HEADER: &'static str = "t,A_KA,A_ZS,geo_mean,wall_time";

    pub fn push(&mut self, row: MetricsRow) {
        self.rows.push(row);
    }

    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Fixed six-decimal CSV; `wall_time` is written as zero unless requested
    /// so reruns are byte-identical.
    pub fn write_csv(&self, mut w: impl Write, with_wall_time: bool) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.rows {
            let wall = if with_wall_time { r.wall_time } else { 0.0 };
            writeln!(
                w,
                "{},{:.6},{:.6},{:.6},{:.6}",
                r.t, r.a_ka, r.a_zs, r.geo_mean, wall
            )?;
        }
        Ok(())
    }

    pub fn to_csv(&self, with_wall_time: bool) -> String {
        let mut out = Vec::new();
        self.write_csv(&mut out, with_wall_time)
            .expect("writing to a Vec cannot fail");
        String::from_utf8(out).expect("CSV is ASCII")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toybench::{generate_stream, BenchParams};

    /// A model whose logits are constant: all zero weights, bias favouring `class`.
    fn constant_model(d: usize, k: usize, class: usize) -> Checkpoint {
        let mut bias = vec![0.0f32; k];
        bias[class] = 1.0;
        Checkpoint::new()
            .with("layer.1.weight", vec![k, d], vec![0.0; k * d])
            .unwrap()
            .with("layer.1.bias", vec![k], bias)
            .unwrap()
    }

    fn bench() -> ToyBench {
        generate_stream(&BenchParams {
            tasks: 3,
            holdout: 2,
            samples_per_task: 64,
            pretrain_samples: 8,
            ..BenchParams::default()
        })
        .unwrap()
    }

    #[test]
    fn constant_model_is_at_chance() {
        let b = bench();
        let m = constant_model(16, 8, 3);
        assert!((knowledge_accumulation(&m, &b).unwrap() - 0.125).abs() < 1e-12);
        assert!((zero_shot_retention(&m, &b).unwrap() - 0.125).abs() < 1e-12);
    }

    #[test]
    fn zero_shot_is_mean_of_holdout_accuracies() {
        let b = bench();
        let m = crate::toybench::MlpSpec::new(16, vec![8], 8)
            .init(4)
            .unwrap();
        let per: Vec<f64> = b
            .holdout_tasks
            .iter()
            .map(|t| crate::toybench::evaluate(&m, t).unwrap())
            .collect();
        let want = per.iter().sum::<f64>() / per.len() as f64;
        assert!((zero_shot_retention(&m, &b).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn empty_holdout() {
        let mut b = bench();
        b.holdout_tasks.clear();
        let m = constant_model(16, 8, 0);
        assert!(matches!(
            zero_shot_retention(&m, &b),
            Err(Error::EmptyHoldout)
        ));
    }

    #[test]
    fn csv_format() {
        let mut traj = MetricsTrajectory::default();
        traj.push(MetricsRow::new(1, 0.5, 0.125, 3.25));
        assert_eq!(
            traj.to_csv(false),
            "t,A_KA,A_ZS,geo_mean,wall_time\n1,0.500000,0.125000,0.250000,0.000000\n"
        );
        assert!(traj.to_csv(true).ends_with(",3.250000\n"));
    }
}
