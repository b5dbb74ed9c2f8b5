use serde::{Deserialize, Serialize};

use super::weights::{recency_weights, WeightVector, Weighting};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Technique {
    Wa,
    Slerp,
    Ta,
    Ties,
    DareTies,
    BreadcrumbsTies,
    ModelStock,
    Magmax,
    LinesTies,
}

impl Technique {
    pub const ALL: [Technique; 9] = [
        Technique::Wa,
        Technique::Slerp,
        Technique::Ta,
        Technique::Ties,
        Technique::DareTies,
        Technique::BreadcrumbsTies,
        Technique::ModelStock,
        Technique::Magmax,
        Technique::LinesTies,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Technique::Wa => "wa",
            Technique::Slerp => "slerp",
            Technique::Ta => "ta",
            Technique::Ties => "ties",
            Technique::DareTies => "dare_ties",
            Technique::BreadcrumbsTies => "breadcrumbs_ties",
            Technique::ModelStock => "model_stock",
            Technique::Magmax => "magmax",
            Technique::LinesTies => "lines_ties",
        }
    }

    /// SLERP and Model Stock combine exactly two candidates.
    pub fn is_pairwise(self) -> bool {
        matches!(self, Technique::Slerp | Technique::ModelStock)
    }

    /// Techniques that operate on task vectors scaled by `lambda_scale`.
    pub fn is_task_vector_family(self) -> bool {
        matches!(
            self,
            Technique::Ta
                | Technique::Ties
                | Technique::DareTies
                | Technique::BreadcrumbsTies
                | Technique::Magmax
                | Technique::LinesTies
        )
    }

    /// Whether the merge needs a base checkpoint to form task vectors.
    pub fn needs_base(self) -> bool {
        self != Technique::Wa
    }

    /// Whether the configured weighting scheme is consulted.
    pub fn uses_weights(self) -> bool {
        matches!(
            self,
            Technique::Wa
                | Technique::Ta
                | Technique::Ties
                | Technique::DareTies
                | Technique::BreadcrumbsTies
                | Technique::LinesTies
        )
    }
}

impl std::fmt::Display for Technique {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Technique {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Technique::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown technique `{s}`"))
    }
}

/// Technique plus every hyperparameter any technique may read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeConfig {
    pub technique: Technique,
    /// Task-vector scale λ, in (0, 1].
    pub lambda_scale: f64,
    /// SLERP interpolation weight, in [0, 1].
    pub slerp_weight: f64,
    /// Fraction of each task vector (per tensor) trimmed by magnitude, in [0, 1).
    pub prune_fraction: f64,
    /// DARE drop probability, in [0, 1).
    pub dare_p: f64,
    /// Breadcrumbs bottom-tail fraction, in [0, 0.5).
    pub bread_beta: f64,
    /// Breadcrumbs top-tail fraction, in [0, 0.5).
    pub bread_gamma: f64,
    pub lines_alpha: f64,
    pub lines_beta: f64,
    /// Weight given to the newest expert in EMA updates, in [0, 1].
    pub ema_weight: f64,
    pub weighting: Weighting,
    pub reversed: bool,
    pub rng_seed: u64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            technique: Technique::Wa,
            lambda_scale: 1.0,
            slerp_weight: 0.5,
            prune_fraction: 0.2,
            dare_p: 0.1,
            bread_beta: 0.05,
            bread_gamma: 0.05,
            lines_alpha: 0.5,
            lines_beta: 0.5,
            ema_weight: 0.5,
            weighting: Weighting::Uniform,
            reversed: false,
            rng_seed: 0,
        }
    }
}

fn unit_closed(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("{name} = {v} outside [0, 1]")))
    }
}

fn unit_half_open(name: &str, v: f64) -> Result<()> {
    if (0.0..1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("{name} = {v} outside [0, 1)")))
    }
}

pub(crate) fn check_lambda(lam: f64) -> Result<()> {
    if lam > 0.0 && lam <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "lambda_scale = {lam} outside (0, 1]"
        )))
    }
}

pub(crate) fn check_probability(p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidProbability(p))
    }
}

pub(crate) fn check_thresholds(beta: f64, gamma: f64) -> Result<()> {
    let ok = (0.0..0.5).contains(&beta) && (0.0..0.5).contains(&gamma) && beta + gamma < 1.0;
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidThresholds { beta, gamma })
    }
}

impl MergeConfig {
    pub fn new(technique: Technique) -> Self {
        Self {
            technique,
            ..Self::default()
        }
    }

    /// Validates only the fields the chosen technique reads.
    pub fn validate(&self) -> Result<()> {
        use Technique::*;
        match self.technique {
            Wa => unit_closed("ema_weight", self.ema_weight)?,
            Slerp => unit_closed("slerp_weight", self.slerp_weight)?,
            ModelStock => {}
            Ta | Magmax => check_lambda(self.lambda_scale)?,
            Ties => {
                check_lambda(self.lambda_scale)?;
                unit_half_open("prune_fraction", self.prune_fraction)?;
            }
            DareTies => {
                check_lambda(self.lambda_scale)?;
                unit_half_open("prune_fraction", self.prune_fraction)?;
                check_probability(self.dare_p)?;
            }
            BreadcrumbsTies => {
                check_lambda(self.lambda_scale)?;
                unit_half_open("prune_fraction", self.prune_fraction)?;
                check_thresholds(self.bread_beta, self.bread_gamma)?;
            }
            LinesTies => {
                check_lambda(self.lambda_scale)?;
                unit_half_open("prune_fraction", self.prune_fraction)?;
                if !self.lines_alpha.is_finite() || !self.lines_beta.is_finite() {
                    return Err(Error::InvalidConfig(
                        "lines_alpha/lines_beta must be finite".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Coefficients for `n` candidates under the configured scheme.
    pub fn weights_for(&self, n: usize) -> Result<WeightVector> {
        recency_weights(n, self.weighting, self.reversed)
    }
}
