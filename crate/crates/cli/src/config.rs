//! Experiment configuration: a TOML file, optional `--set key=value`
//! overrides, and strict deserialization.
//!
//! ```toml
//! seeds = [0, 1, 2]
//!
//! [bench]
//! tasks = 20
//!
//! [pipeline]
//! init = "EMA"
//! deploy = "EMA"
//!
//! [merge]
//! technique = "wa"
//! ema_weight = 0.3
//! ```

use std::path::{Path, PathBuf};

use chronomerge::toybench::{MlpSpec, TrainConfig};
use chronomerge::{BenchParams, DeployProtocol, InitProtocol, MergeConfig, PipelineConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    /// Steps used to pretrain θ₀ on the broad pretraining set.
    pub pretrain_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            pretrain_steps: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub init: InitProtocol,
    pub deploy: DeployProtocol,
    pub replay: bool,
    pub replay_fraction: f64,
}

impl Default for PipelineSection {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            init: p.init,
            deploy: p.deploy,
            replay: p.replay,
            replay_fraction: p.replay_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Write measured wall time instead of zeros (breaks byte-identical reruns).
    pub wall_time: bool,
    /// Train the multitask upper-bound reference in `run`.
    pub multitask_reference: bool,
    /// Keep the expert buffer on disk under each seed's directory.
    pub keep_buffer: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: None,
            wall_time: false,
            multitask_reference: true,
            keep_buffer: false,
        }
    }
}

/// Everything one experiment needs. Each seed `s` in `seeds` generates the
/// stream with `bench.stream_seed + s` and uses `s` for θ₀ and training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub bench: BenchParams,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pipeline: PipelineSection,
    pub merge: MergeConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            bench: BenchParams::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            pipeline: PipelineSection::default(),
            merge: MergeConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads `path` (TOML, or JSON such as an earlier `summary.json`'s
    /// `config`), applies `overrides` and validates. `None` starts from defaults.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => read_table(p)?,
            None => toml::Table::new(),
        };
        for o in overrides {
            let (key, value) = parse_override(o)?;
            set_path(&mut table, &key, value)?;
        }
        let cfg = Self::from_table(table)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config(e.message().to_string()))
    }

    pub fn to_table(&self) -> toml::Table {
        match toml::Value::try_from(self).expect("config serializes to TOML") {
            toml::Value::Table(t) => t,
            _ => unreachable!("a struct serializes to a table"),
        }
    }

    /// A copy with `key = value` applied (same keys as `--set`).
    pub fn with_override(&self, key: &str, value: toml::Value) -> Result<Self> {
        let mut table = self.to_table();
        set_path(&mut table, key, value)?;
        Self::from_table(table)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CliError::config("seeds must list at least one seed"));
        }
        self.bench.validate().map_err(config_err)?;
        self.model_spec().validate().map_err(config_err)?;
        if self.model.pretrain_steps > 0 {
            self.pretrain_config().validate().map_err(config_err)?;
        }
        self.pipeline(self.seeds[0]).validate().map_err(config_err)
    }

    pub fn model_spec(&self) -> MlpSpec {
        MlpSpec::new(
            self.bench.input_dim,
            self.model.hidden.clone(),
            self.bench.class_count,
        )
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.model.pretrain_steps,
            ..self.train.clone()
        }
    }

    pub fn bench_params(&self, seed: u64) -> BenchParams {
        BenchParams {
            stream_seed: self.bench.stream_seed.wrapping_add(seed),
            ..self.bench.clone()
        }
    }

    pub fn pipeline(&self, seed: u64) -> PipelineConfig {
        PipelineConfig {
            init: self.pipeline.init,
            deploy: self.pipeline.deploy,
            merge: self.merge.clone(),
            replay: self.pipeline.replay,
            replay_fraction: self.pipeline.replay_fraction,
            train: self.train.clone(),
            seed,
        }
    }
}

fn config_err(e: chronomerge::Error) -> CliError {
    CliError::Config(e.to_string())
}

fn read_table(path: &Path) -> Result<toml::Table> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    if path.extension().is_some_and(|x| x == "json") {
        let json: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        // Accept a whole summary.json as well as a bare config object.
        let json = json.get("config").cloned().unwrap_or(json);
        return match toml::Value::try_from(json) {
            Ok(toml::Value::Table(t)) => Ok(t),
            Ok(_) => Err(CliError::config(format!(
                "{}: expected an object",
                path.display()
            ))),
            Err(e) => Err(CliError::config(format!("{}: {e}", path.display()))),
        };
    }
    text.parse::<toml::Table>()
        .map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message())))
}

/// Splits `key=value`; the value is read as a TOML literal, falling back to a
/// bare string (`--set merge.technique=ties`).
pub fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override `{s}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(CliError::config(format!("override `{s}` has an empty key")));
    }
    Ok((key.to_string(), parse_value(raw.trim())))
}

pub fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets a dotted `key`, creating intermediate tables. `merge.bread_fraction`
/// is shorthand for equal Breadcrumbs tails `bread_beta = bread_gamma = f / 2`.
pub fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    if key == "merge.bread_fraction" {
        let f = value
            .as_float()
            .or_else(|| value.as_integer().map(|i| i as f64))
            .ok_or_else(|| CliError::config("merge.bread_fraction must be a number"))?;
        set_path(table, "merge.bread_beta", toml::Value::Float(f / 2.0))?;
        return set_path(table, "merge.bread_gamma", toml::Value::Float(f / 2.0));
    }
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields at least one part");
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::config(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use chronomerge::Technique;

    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_apply_with_types() {
        let cfg = ExperimentConfig::load(
            None,
            &[
                "merge.technique=ties".into(),
                "merge.lambda_scale=0.4".into(),
                "pipeline.init=FT".into(),
                "seeds=[3, 4]".into(),
                "bench.tasks=5".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.merge.technique, Technique::Ties);
        assert_eq!(cfg.merge.lambda_scale, 0.4);
        assert_eq!(cfg.pipeline.init, InitProtocol::Ft);
        assert_eq!(cfg.seeds, vec![3, 4]);
        assert_eq!(cfg.bench.tasks, 5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in ["merge.lamda_scale=0.3", "bench.taskz=3", "colour=1"] {
            let err = ExperimentConfig::load(None, &[bad.into()]).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{bad}: {err}");
        }
    }

    #[test]
    fn invalid_combinations_are_config_errors() {
        let err = ExperimentConfig::load(
            None,
            &["pipeline.init=ZS".into(), "pipeline.deploy=FT".into()],
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = ExperimentConfig::load(None, &["seeds=[]".into()]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn breadcrumbs_shorthand() {
        let cfg = ExperimentConfig::default()
            .with_override("merge.bread_fraction", toml::Value::Float(0.3))
            .unwrap();
        assert_eq!(cfg.merge.bread_beta, 0.15);
        assert_eq!(cfg.merge.bread_gamma, 0.15);
    }

    #[test]
    fn per_seed_streams() {
        let mut cfg = ExperimentConfig::default();
        cfg.bench.stream_seed = 10;
        assert_eq!(cfg.bench_params(2).stream_seed, 12);
        assert_eq!(cfg.pipeline(2).seed, 2);
    }
}
