//! The temporal loop: per task, Init → Train → Store → Deploy → Eval.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointBuffer};
use crate::error::{Error, Result};
use crate::merge::{
    self, merge_fold, model_stock, slerp, weight_average, MergeConfig, MergeContext, Technique,
    WeightVector,
};
use crate::metrics::{MetricsRow, MetricsTrajectory};
use crate::toybench::{train_mix, TaskDataset, ToyBench, TrainConfig, TrainingMix};

/// Which weights training on task `t` starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum InitProtocol {
    /// The base model θ₀.
    Zs,
    /// The latest expert.
    Ft,
    /// The running average of experts.
    Ema,
}

/// Which weights are deployed (and evaluated) after task `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DeployProtocol {
    /// The latest expert.
    Ft,
    /// The running average of experts.
    Ema,
    /// A merge of every stored expert around θ₀.
    All,
}

impl InitProtocol {
    pub const ALL: [InitProtocol; 3] = [InitProtocol::Zs, InitProtocol::Ft, InitProtocol::Ema];

    pub fn name(self) -> &'static str {
        match self {
            InitProtocol::Zs => "ZS",
            InitProtocol::Ft => "FT",
            InitProtocol::Ema => "EMA",
        }
    }
}

impl DeployProtocol {
    pub const ALL: [DeployProtocol; 3] =
        [DeployProtocol::Ft, DeployProtocol::Ema, DeployProtocol::All];

    pub fn name(self) -> &'static str {
        match self {
            DeployProtocol::Ft => "FT",
            DeployProtocol::Ema => "EMA",
            DeployProtocol::All => "ALL",
        }
    }
}

impl fmt::Display for InitProtocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for DeployProtocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InitProtocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown init protocol `{s}` (expected ZS, FT or EMA)"
                ))
            })
    }
}

impl FromStr for DeployProtocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown deploy protocol `{s}` (expected FT, EMA or ALL)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub init: InitProtocol,
    pub deploy: DeployProtocol,
    pub merge: MergeConfig,
    pub replay: bool,
    /// Share of each training batch drawn from earlier tasks when `replay` is on.
    pub replay_fraction: f64,
    pub train: TrainConfig,
    /// Root of every per-task training seed.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            init: InitProtocol::Ema,
            deploy: DeployProtocol::Ema,
            merge: MergeConfig::new(Technique::Wa),
            replay: false,
            replay_fraction: 0.5,
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn new(init: InitProtocol, deploy: DeployProtocol, merge: MergeConfig) -> Self {
        Self {
            init,
            deploy,
            merge,
            ..Self::default()
        }
    }

    pub fn uses_ema(&self) -> bool {
        self.init == InitProtocol::Ema || self.deploy == DeployProtocol::Ema
    }

    pub fn validate(&self) -> Result<()> {
        if self.init == InitProtocol::Zs && self.deploy == DeployProtocol::Ft {
            return Err(Error::InvalidConfig(
                "init ZS with deploy FT is incompatible: every expert would be an independent fine-tune of the base".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.replay_fraction) {
            return Err(Error::InvalidConfig(format!(
                "replay_fraction must be in [0, 1], got {}",
                self.replay_fraction
            )));
        }
        self.merge.validate()?;
        self.train.validate()
    }
}

/// Loop state after `t` completed tasks.
#[derive(Debug)]
pub struct PipelineState {
    pub theta_0: Checkpoint,
    pub buffer: CheckpointBuffer,
    /// Running average, present once an EMA protocol has seen an expert.
    pub ema: Option<Checkpoint>,
    pub t: usize,
    pub deployed: Option<Checkpoint>,
}

impl PipelineState {
    pub fn new(theta_0: Checkpoint, buffer: CheckpointBuffer) -> Self {
        Self {
            theta_0,
            buffer,
            ema: None,
            t: 0,
            deployed: None,
        }
    }

    pub fn in_memory(theta_0: Checkpoint) -> Self {
        Self::new(theta_0, CheckpointBuffer::in_memory())
    }
}

/// Starting weights for the next task.
pub fn init_weights(state: &PipelineState, config: &PipelineConfig) -> Result<Checkpoint> {
    Ok(match config.init {
        InitProtocol::Zs => state.theta_0.clone(),
        InitProtocol::Ft if state.buffer.is_empty() => state.theta_0.clone(),
        InitProtocol::Ft => state.buffer.last()?.as_ref().clone(),
        InitProtocol::Ema => state.ema.clone().unwrap_or_else(|| state.theta_0.clone()),
    })
}

/// One step of the running average: folds `expert` into the accumulator
/// (which starts at θ₀) with the configured technique.
///
/// WA mixes `(1 - ema_weight, ema_weight)`. SLERP and Model Stock merge the
/// accumulator and the expert around θ₀, falling back to WA (at
/// `slerp_weight`, or 0.5 for Model Stock) while the accumulator still equals
/// θ₀. Task-vector techniques add the expert's delta from the accumulator.
pub fn update_ema(
    state: &mut PipelineState,
    expert: &Checkpoint,
    config: &PipelineConfig,
) -> Result<()> {
    state
        .theta_0
        .check_compatible(expert)
        .map_err(|e| match e {
            Error::KeyMismatch(_) | Error::ShapeMismatch { .. } => {
                Error::StructureMismatch(format!("new expert: {e}"))
            }
            other => other,
        })?;
    let prev = state.ema.as_ref().unwrap_or(&state.theta_0);
    let cfg = &config.merge;
    let wa = |w: f64| weight_average(&[prev, expert], &WeightVector::pair(w)?);
    let next = match cfg.technique {
        Technique::Wa => wa(cfg.ema_weight)?,
        Technique::Slerp => match slerp(&state.theta_0, prev, expert, cfg.slerp_weight) {
            Err(Error::ZeroTaskVector(_)) => wa(cfg.slerp_weight)?,
            other => other?,
        },
        Technique::ModelStock => match model_stock(&state.theta_0, prev, expert) {
            Err(Error::ZeroTaskVector(_)) => wa(0.5)?,
            other => other?,
        },
        _ => {
            let ctx = MergeContext::for_task(state.t.max(1));
            merge::merge_with(cfg, prev, &[expert], &ctx)?
        }
    };
    state.ema = Some(next);
    Ok(())
}

/// The model deployed after the latest stored expert.
pub fn deploy(state: &PipelineState, config: &PipelineConfig) -> Result<Checkpoint> {
    if state.buffer.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    match config.deploy {
        DeployProtocol::Ft => Ok(state.buffer.last()?.as_ref().clone()),
        DeployProtocol::Ema => state.ema.clone().ok_or(Error::EmptyBuffer),
        DeployProtocol::All => {
            let ctx = MergeContext::for_task(state.buffer.len());
            if state.buffer.dir().is_some() && !config.merge.technique.is_pairwise() {
                return deploy_streaming(state, config);
            }
            let experts = state.buffer.all()?;
            let refs: Vec<&Checkpoint> = experts.iter().map(|e| e.as_ref()).collect();
            merge_fold(&config.merge, &state.theta_0, &refs, &ctx)
        }
    }
}

/// `deploy` with protocol ALL, reading one tensor at a time from the buffer
/// so only one tensor per expert is resident. Equal to the in-memory merge
/// for every technique that acts tensor by tensor (all but SLERP and Model Stock).
pub fn deploy_streaming(state: &PipelineState, config: &PipelineConfig) -> Result<Checkpoint> {
    if state.buffer.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let technique = config.merge.technique;
    if technique.is_pairwise() {
        return Err(Error::InvalidConfig(format!(
            "{technique} merges whole checkpoints and cannot be streamed per tensor"
        )));
    }
    let ctx = MergeContext {
        task: state.buffer.len() as u32,
        layer_count: Some(state.theta_0.layer_count()),
    };
    let mut out = Checkpoint::new();
    for (name, base_tensor) in state.theta_0.iter() {
        let mut base = Checkpoint::new();
        base.insert_tensor(name, base_tensor.clone())?;
        let mut parts = Vec::with_capacity(state.buffer.len());
        for i in 1..=state.buffer.len() {
            let mut c = Checkpoint::new();
            c.insert_tensor(name, state.buffer.read_tensor(i, name)?)?;
            parts.push(c);
        }
        let refs: Vec<&Checkpoint> = parts.iter().collect();
        let merged = merge::merge_with(&config.merge, &base, &refs, &ctx)?;
        let tensor = merged
            .get(name)
            .expect("merge preserves tensor names")
            .clone();
        out.insert_tensor(name, tensor)?;
    }
    Ok(out)
}

/// Training seed of task `t`, decorrelated across tasks and root seeds.
pub fn task_seed(root: u64, t: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = root.wrapping_add((t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// What the loop produced for one task, handed to `run_stream_with` observers.
#[derive(Debug)]
pub struct StepReport<'a> {
    pub t: usize,
    pub init: &'a Checkpoint,
    pub expert: &'a Checkpoint,
    pub deployed: &'a Checkpoint,
    pub row: &'a MetricsRow,
}

/// Runs every adaptation task of `bench` from `theta_0`, keeping experts in memory.
pub fn run_stream(
    config: &PipelineConfig,
    bench: &ToyBench,
    theta_0: &Checkpoint,
) -> Result<MetricsTrajectory> {
    let mut state = PipelineState::in_memory(theta_0.clone());
    run_stream_with(config, bench, &mut state, |_| Ok(()))
}

/// Runs the loop on an existing (usually fresh) state; `observe` sees each task's outcome.
pub fn run_stream_with(
    config: &PipelineConfig,
    bench: &ToyBench,
    state: &mut PipelineState,
    mut observe: impl FnMut(&StepReport<'_>) -> Result<()>,
) -> Result<MetricsTrajectory> {
    config.validate()?;
    let mut trajectory = MetricsTrajectory::default();
    for (k, data) in bench.adaptation_tasks.iter().enumerate() {
        let started = Instant::now();
        let t = state.t + 1;
        let init = init_weights(state, config)?;

        let replay: Vec<&TaskDataset> = if config.replay {
            bench.adaptation_tasks[..k].iter().collect()
        } else {
            Vec::new()
        };
        let mix = TrainingMix {
            current: data,
            replay: &replay,
            replay_fraction: config.replay_fraction,
        };
        let expert = train_mix(&init, mix, &config.train, task_seed(config.seed, t))?;

        state.buffer.append(expert.clone())?;
        state.t = t;
        if config.uses_ema() {
            update_ema(state, &expert, config)?;
        }
        let deployed = deploy(state, config)?;
        let row = MetricsRow::measure(t, &deployed, bench, started.elapsed().as_secs_f64())?;
        observe(&StepReport {
            t,
            init: &init,
            expert: &expert,
            deployed: &deployed,
            row: &row,
        })?;
        state.deployed = Some(deployed);
        trajectory.push(row);
    }
    Ok(trajectory)
}

/// Upper-bound reference: one model trained from `theta_0` on the union of
/// all adaptation tasks for `T` times the per-task budget.
pub fn multitask_reference(
    bench: &ToyBench,
    theta_0: &Checkpoint,
    train: &TrainConfig,
    seed: u64,
) -> Result<Checkpoint> {
    let parts: Vec<&TaskDataset> = bench.adaptation_tasks.iter().collect();
    let union = TaskDataset::concat(0, &parts)?;
    let cfg = TrainConfig {
        steps: train.steps * bench.task_count(),
        ..train.clone()
    };
    train_mix(
        &theta_0.clone(),
        TrainingMix::single(&union),
        &cfg,
        task_seed(seed, 0),
    )
}
