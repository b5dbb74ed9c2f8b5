//! Running one configuration over its seeds and writing `run` outputs.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use chronomerge::metrics::MetricsRow;
use chronomerge::pipeline::{multitask_reference, run_stream_with, PipelineState};
use chronomerge::{generate_stream, Checkpoint, CheckpointBuffer, MetricsTrajectory, ToyBench};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

/// A generated stream and its pretrained base model.
#[derive(Debug)]
pub struct Prepared {
    pub bench: ToyBench,
    pub theta_0: Checkpoint,
}

pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let bench = generate_stream(&cfg.bench_params(seed))?;
    let theta_0 = bench.base_model(&cfg.model_spec(), &cfg.pretrain_config(), seed)?;
    Ok(Prepared { bench, theta_0 })
}

/// Memoizes [`prepare`] across cells that share bench, model and training
/// settings. Safe to share between sweep workers.
#[derive(Debug, Default)]
pub struct PrepCache {
    slots: Mutex<HashMap<String, Arc<OnceLock<Arc<Prepared>>>>>,
}

impl PrepCache {
    pub fn get(&self, cfg: &ExperimentConfig, seed: u64) -> Result<Arc<Prepared>> {
        let key = serde_json::to_string(&(&cfg.bench_params(seed), &cfg.model, &cfg.train, seed))
            .expect("settings serialize");
        let slot = self
            .slots
            .lock()
            .expect("cache lock")
            .entry(key)
            .or_default()
            .clone();
        if let Some(p) = slot.get() {
            return Ok(p.clone());
        }
        let fresh = Arc::new(prepare(cfg, seed)?);
        Ok(slot.get_or_init(|| fresh).clone())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    #[serde(skip)]
    pub trajectory: MetricsTrajectory,
    #[serde(rename = "final")]
    pub final_row: MetricsRow,
    /// θ₀ itself, reported as row t = 0.
    pub zero_shot: MetricsRow,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub multitask: Option<MetricsRow>,
}

/// Runs the configured pipeline on one seed. With `buffer_dir`, experts are
/// stored there instead of in memory.
pub fn run_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    prep: &Prepared,
    buffer_dir: Option<&Path>,
) -> Result<SeedResult> {
    let buffer = match buffer_dir {
        Some(dir) => CheckpointBuffer::create(dir)?,
        None => CheckpointBuffer::in_memory(),
    };
    let mut state = PipelineState::new(prep.theta_0.clone(), buffer);
    let trajectory = run_stream_with(&cfg.pipeline(seed), &prep.bench, &mut state, |_| Ok(()))?;
    let final_row = *trajectory.last().ok_or(chronomerge::Error::EmptyBuffer)?;
    let zero_shot = MetricsRow::measure(0, &prep.theta_0, &prep.bench, 0.0)?;
    Ok(SeedResult {
        seed,
        trajectory,
        final_row,
        zero_shot,
        multitask: None,
    })
}

pub fn multitask_row(cfg: &ExperimentConfig, seed: u64, prep: &Prepared) -> Result<MetricsRow> {
    let model = multitask_reference(&prep.bench, &prep.theta_0, &cfg.train, seed)?;
    Ok(MetricsRow::measure(0, &model, &prep.bench, 0.0)?)
}

/// Sample mean and standard deviation (n - 1; zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Seed-averaged metrics with their spreads.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Aggregate {
    pub a_ka: f64,
    pub a_zs: f64,
    pub geo_mean: f64,
    pub a_ka_std: f64,
    pub a_zs_std: f64,
    pub geo_mean_std: f64,
}

impl Aggregate {
    pub fn of(rows: &[MetricsRow]) -> Self {
        let pick = |f: fn(&MetricsRow) -> f64| mean_std(&rows.iter().map(f).collect::<Vec<_>>());
        let (a_ka, a_ka_std) = pick(|r| r.a_ka);
        let (a_zs, a_zs_std) = pick(|r| r.a_zs);
        let (geo_mean, geo_mean_std) = pick(|r| r.geo_mean);
        Self {
            a_ka,
            a_zs,
            geo_mean,
            a_ka_std,
            a_zs_std,
            geo_mean_std,
        }
    }
}

/// Per-step mean over seeds. Every trajectory must have the same length.
pub fn mean_trajectory(runs: &[&MetricsTrajectory]) -> MetricsTrajectory {
    let mut out = MetricsTrajectory::default();
    let n = runs.len() as f64;
    for k in 0..runs[0].len() {
        let avg = |f: fn(&MetricsRow) -> f64| runs.iter().map(|r| f(&r.rows[k])).sum::<f64>() / n;
        out.push(MetricsRow::new(
            runs[0].rows[k].t,
            avg(|r| r.a_ka),
            avg(|r| r.a_zs),
            avg(|r| r.wall_time),
        ));
    }
    out
}

#[derive(Debug, Serialize)]
pub struct Summary<'a> {
    pub config: &'a ExperimentConfig,
    #[serde(rename = "final")]
    pub final_agg: Aggregate,
    pub zero_shot: Aggregate,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub multitask: Option<Aggregate>,
    pub per_seed: &'a [SeedResult],
}

/// Runs every seed and writes `trajectory.csv` (seed mean), `summary.json`
/// and, for several seeds, `seed_<s>/trajectory.csv` into `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<SeedResult>> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let many = cfg.seeds.len() > 1;
    let mut results = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let prep = prepare(cfg, seed)?;
        let seed_dir = out.join(format!("seed_{seed}"));
        let buffer_dir = cfg.output.keep_buffer.then(|| seed_dir.join("buffer"));
        if buffer_dir.as_ref().is_some_and(|d| d.exists()) {
            let d = buffer_dir.as_ref().unwrap();
            fs::remove_dir_all(d).map_err(|e| CliError::io(d, e))?;
        }
        let mut r = run_seed(cfg, seed, &prep, buffer_dir.as_deref())?;
        if cfg.output.multitask_reference {
            r.multitask = Some(multitask_row(cfg, seed, &prep)?);
        }
        if many {
            write_text(
                &seed_dir.join("trajectory.csv"),
                &r.trajectory.to_csv(cfg.output.wall_time),
            )?;
        }
        results.push(r);
    }
    let trajs: Vec<&MetricsTrajectory> = results.iter().map(|r| &r.trajectory).collect();
    write_text(
        &out.join("trajectory.csv"),
        &mean_trajectory(&trajs).to_csv(cfg.output.wall_time),
    )?;

    let finals: Vec<MetricsRow> = results.iter().map(|r| r.final_row).collect();
    let zs: Vec<MetricsRow> = results.iter().map(|r| r.zero_shot).collect();
    let mt: Option<Vec<MetricsRow>> = results.iter().map(|r| r.multitask).collect();
    let summary = Summary {
        config: cfg,
        final_agg: Aggregate::of(&finals),
        zero_shot: Aggregate::of(&zs),
        multitask: mt.map(|rows| Aggregate::of(&rows)),
        per_seed: &results,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(results)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::Output(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}
