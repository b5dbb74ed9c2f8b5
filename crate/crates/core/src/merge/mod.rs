//! Checkpoint merging techniques and the coefficient schemes that feed them.

mod config;
mod ops;
mod weights;

pub use config::{MergeConfig, Technique};
pub use ops::{
    breadcrumbs_sparsify, dare_rng, dare_sparsify, dare_sparsify_stream, lines_rescale,
    lines_scale, magmax_merge, model_stock, model_stock_ratio, slerp, slerp_coefficients,
    task_arithmetic, task_vector_angle, ties_merge, weight_average, DareStream,
};
pub use weights::{recency_weights, WeightVector, Weighting};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

/// Where in the temporal loop a merge happens. Only DARE (random streams)
/// and LiNeS (layer count) read it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MergeContext {
    pub task: u32,
    /// Overrides the layer count inferred from the base's tensor names.
    pub layer_count: Option<usize>,
}

impl MergeContext {
    pub fn for_task(task: usize) -> Self {
        Self {
            task: task as u32,
            layer_count: None,
        }
    }
}

/// Merges `candidates` around `base` with the configured technique.
///
/// Pairwise techniques require exactly two candidates; see [`merge_fold`]
/// for the multi-candidate extension.
pub fn merge(
    config: &MergeConfig,
    base: &Checkpoint,
    candidates: &[&Checkpoint],
) -> Result<Checkpoint> {
    merge_with(config, base, candidates, &MergeContext::default())
}

pub fn merge_with(
    config: &MergeConfig,
    base: &Checkpoint,
    candidates: &[&Checkpoint],
    ctx: &MergeContext,
) -> Result<Checkpoint> {
    config.validate()?;
    if candidates.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = candidates.len();
    let lam = config.lambda_scale;
    let seed = config.rng_seed;
    let task = ctx.task;
    match config.technique {
        Technique::Wa => {
            for (i, c) in candidates.iter().enumerate() {
                base.check_compatible(c)
                    .map_err(|e| Error::StructureMismatch(format!("candidate {i}: {e}")))?;
            }
            weight_average(candidates, &config.weights_for(n)?)
        }
        Technique::Slerp => {
            let [a, b] = pair(config.technique, candidates)?;
            slerp(base, a, b, config.slerp_weight)
        }
        Technique::ModelStock => {
            let [a, b] = pair(config.technique, candidates)?;
            model_stock(base, a, b)
        }
        Technique::Ta => task_arithmetic(base, candidates, lam, &config.weights_for(n)?),
        Technique::Ties => ties_merge(
            base,
            candidates,
            lam,
            config.prune_fraction,
            &config.weights_for(n)?,
        ),
        Technique::DareTies => {
            let p = config.dare_p;
            ops::ties_with(
                base,
                candidates,
                lam,
                config.prune_fraction,
                &config.weights_for(n)?,
                |name, i, d| {
                    let stream = DareStream {
                        task,
                        expert: i as u32,
                    };
                    ops::dare_in_place(d, p, &mut dare_rng(seed, stream, name));
                    Ok(())
                },
            )
        }
        Technique::BreadcrumbsTies => {
            let (beta, gamma) = (config.bread_beta, config.bread_gamma);
            ops::ties_with(
                base,
                candidates,
                lam,
                config.prune_fraction,
                &config.weights_for(n)?,
                |_, _, d| {
                    ops::breadcrumbs_in_place(d, beta, gamma);
                    Ok(())
                },
            )
        }
        Technique::Magmax => magmax_merge(base, candidates, lam),
        Technique::LinesTies => {
            let layers = ctx.layer_count.unwrap_or_else(|| base.layer_count());
            let (alpha, beta) = (config.lines_alpha, config.lines_beta);
            ops::ties_with(
                base,
                candidates,
                lam,
                config.prune_fraction,
                &config.weights_for(n)?,
                |name, _, d| {
                    let s = ops::lines_scale_for(name, layers, alpha, beta);
                    d.iter_mut().for_each(|x| *x *= s);
                    Ok(())
                },
            )
        }
    }
}

fn pair<'a>(technique: Technique, candidates: &[&'a Checkpoint]) -> Result<[&'a Checkpoint; 2]> {
    match candidates {
        [a, b] => Ok([a, b]),
        _ => Err(Error::Arity {
            technique: technique.name(),
            got: candidates.len(),
        }),
    }
}

/// Like [`merge_with`], but pairwise techniques accept any number of
/// candidates by folding left to right: the running result is merged with
/// the next candidate. A single candidate is returned unchanged.
pub fn merge_fold(
    config: &MergeConfig,
    base: &Checkpoint,
    candidates: &[&Checkpoint],
    ctx: &MergeContext,
) -> Result<Checkpoint> {
    if !config.technique.is_pairwise() {
        return merge_with(config, base, candidates, ctx);
    }
    config.validate()?;
    let (first, rest) = candidates.split_first().ok_or(Error::EmptyInput)?;
    base.check_compatible(first)
        .map_err(|e| Error::StructureMismatch(format!("candidate 0: {e}")))?;
    let mut acc = (*first).clone();
    acc.clear_meta();
    for next in rest {
        acc = merge_with(config, base, &[&acc, next], ctx)?;
    }
    Ok(acc)
}
