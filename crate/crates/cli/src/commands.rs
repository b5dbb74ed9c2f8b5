//! Subcommand bodies. Each returns what it printed so tests can check it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chronomerge::checkpoint::CheckpointReader;
use chronomerge::metrics::MetricsRow;
use chronomerge::toybench::evaluate;
use chronomerge::{load_checkpoint, merge_fold, save_checkpoint, Checkpoint, MergeContext};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::experiment::{self, write_json};
use crate::sweep::{self, SweepGrid};

pub const OUT_ENV: &str = "CHRONOMERGE_OUT";

/// `explicit`, else `config.output.dir`, else `<$CHRONOMERGE_OUT or .>/<name>`.
pub fn output_dir(explicit: Option<&Path>, cfg: &ExperimentConfig, name: &str) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    if let Some(p) = &cfg.output.dir {
        return p.clone();
    }
    let root = std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."));
    root.join(name)
}

/// Name used for default output directories: the config file's stem.
pub fn run_name(config: Option<&Path>, fallback: &str) -> String {
    config
        .and_then(|p| p.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| fallback.to_string())
}

/// Merges `inputs` (oldest first) with the config's `[merge]` section and
/// writes the result. Task-vector techniques, SLERP and Model Stock need `base`.
pub fn merge(
    cfg: &ExperimentConfig,
    base: Option<&Path>,
    inputs: &[PathBuf],
    out: &Path,
) -> Result<String> {
    if inputs.is_empty() {
        return Err(CliError::config(
            "merge needs at least one input checkpoint",
        ));
    }
    let technique = cfg.merge.technique;
    if technique.needs_base() && base.is_none() {
        return Err(CliError::config(format!(
            "technique `{technique}` requires `base` (pass --base <checkpoint>)"
        )));
    }
    cfg.merge
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let experts: Vec<Checkpoint> = inputs
        .iter()
        .map(load_checkpoint)
        .collect::<Result<_, _>>()?;
    let base = match base {
        Some(p) => load_checkpoint(p)?,
        None => experts[0].clone(),
    };
    let refs: Vec<&Checkpoint> = experts.iter().collect();
    let merged = merge_fold(
        &cfg.merge,
        &base,
        &refs,
        &MergeContext::for_task(refs.len()),
    )?;
    save_checkpoint(&merged, out)?;

    let mut report = String::new();
    writeln!(
        report,
        "merged {} checkpoint(s) with {technique} -> {}",
        inputs.len(),
        out.display()
    )
    .unwrap();
    writeln!(
        report,
        "{:<24} {:>12} {:>14} {:>14}",
        "tensor", "shape", "l2_norm", "delta_norm"
    )
    .unwrap();
    for (name, t) in merged.iter() {
        let delta = base.get(name).map(|b| {
            b.data()
                .iter()
                .zip(t.data())
                .map(|(&x, &y)| (f64::from(y) - f64::from(x)).powi(2))
                .sum::<f64>()
                .sqrt()
        });
        writeln!(
            report,
            "{:<24} {:>12} {:>14.6} {:>14.6}",
            name,
            format!("{:?}", t.shape()),
            t.l2_norm(),
            delta.unwrap_or(f64::NAN)
        )
        .unwrap();
    }
    Ok(report)
}

pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    let results = experiment::run_experiment(cfg, out)?;
    let finals: Vec<MetricsRow> = results.iter().map(|r| r.final_row).collect();
    let a = experiment::Aggregate::of(&finals);
    Ok(format!(
        "{} seed(s), final A_KA {:.4} ± {:.4}, A_ZS {:.4} ± {:.4}, geo_mean {:.4} ± {:.4}\nwrote {}\n",
        finals.len(),
        a.a_ka,
        a.a_ka_std,
        a.a_zs,
        a.a_zs_std,
        a.geo_mean,
        a.geo_mean_std,
        out.display()
    ))
}

pub fn sweep(cfg: &ExperimentConfig, grid: &SweepGrid, out: &Path, jobs: usize) -> Result<String> {
    let results = sweep::run_sweep(cfg, grid, out, jobs)?;
    let failed = results.iter().filter(|r| r.outcome.is_err()).count();
    let mut msg = format!("{} cell(s), {failed} failed\n", results.len());
    if let Some(b) = sweep::best(&results) {
        let params: Vec<String> = b
            .cell
            .params
            .iter()
            .map(|(k, v)| format!("{k}={}", sweep::render(v)))
            .collect();
        let geo = b
            .outcome
            .as_ref()
            .map(|m| m.aggregate.geo_mean)
            .unwrap_or(f64::NAN);
        writeln!(
            msg,
            "best: cell {} {} [{}] geo_mean {geo:.4}",
            b.cell.index,
            b.cell.technique,
            params.join(", ")
        )
        .unwrap();
    }
    writeln!(msg, "wrote {}", out.display()).unwrap();
    Ok(msg)
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub seed: u64,
    #[serde(rename = "A_KA")]
    pub a_ka: f64,
    #[serde(rename = "A_ZS")]
    pub a_zs: f64,
    pub geo_mean: f64,
    pub adaptation: Vec<f64>,
    pub holdout: Vec<f64>,
}

/// Evaluates a checkpoint on the bench generated for `seed`.
pub fn eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    seed: u64,
    json_out: Option<&Path>,
) -> Result<String> {
    let model = load_checkpoint(checkpoint)?;
    let bench = chronomerge::generate_stream(&cfg.bench_params(seed))?;
    let row = MetricsRow::measure(0, &model, &bench, 0.0)?;
    let per = |tasks: &[chronomerge::toybench::TaskDataset]| -> Result<Vec<f64>> {
        Ok(tasks
            .iter()
            .map(|t| evaluate(&model, t))
            .collect::<Result<_, _>>()?)
    };
    let report = EvalReport {
        seed,
        a_ka: row.a_ka,
        a_zs: row.a_zs,
        geo_mean: row.geo_mean,
        adaptation: per(&bench.adaptation_tasks)?,
        holdout: per(&bench.holdout_tasks)?,
    };
    if let Some(p) = json_out {
        write_json(p, &report)?;
    }
    let mut text =
        serde_json::to_string_pretty(&report).map_err(|e| CliError::Output(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

/// Prints the header and verifies the checksum.
pub fn inspect(path: &Path) -> Result<String> {
    let reader = CheckpointReader::open(path)?;
    let full = reader.verify()?;
    let mut s = String::new();
    writeln!(s, "{}", path.display()).unwrap();
    writeln!(
        s,
        "tensors: {}, elements: {}",
        full.len(),
        full.num_elements()
    )
    .unwrap();
    writeln!(s, "fingerprint: {}", full.fingerprint()).unwrap();
    for (name, e) in reader.entries() {
        writeln!(
            s,
            "  {name:<24} {:<6} {:>14} offset {:>8} bytes {:>8}",
            e.dtype,
            format!("{:?}", e.shape),
            e.offset,
            e.nbytes
        )
        .unwrap();
    }
    for (k, v) in reader.meta() {
        writeln!(s, "  meta {k} = {v}").unwrap();
    }
    Ok(s)
}
