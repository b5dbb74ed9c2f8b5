#![allow(dead_code)]

pub mod oracle;

use chronomerge::{Checkpoint, MergeConfig, Technique};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A base and up to four experts with at most three tensors of at most 16
/// elements each, values in [-2, 2].
pub fn random_case(seed: u64) -> (Checkpoint, Vec<Checkpoint>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = ["layer.1.weight", "layer.2.bias", "head"];
    let tensors = rng.random_range(1..=3);
    let shapes: Vec<Vec<usize>> = (0..tensors)
        .map(|_| {
            if rng.random_bool(0.5) {
                vec![rng.random_range(1..=16)]
            } else {
                vec![rng.random_range(1..=4), rng.random_range(1..=4)]
            }
        })
        .collect();
    let experts = rng.random_range(1..=4);
    let make = |rng: &mut ChaCha8Rng| {
        let mut c = Checkpoint::new();
        for (name, shape) in names.iter().zip(&shapes) {
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-2.0f32..2.0)).collect();
            c.insert(*name, shape.clone(), data).unwrap();
        }
        c
    };
    let base = make(&mut rng);
    let experts = (0..experts).map(|_| make(&mut rng)).collect();
    (base, experts)
}

/// A config for `technique` with hyperparameters drawn from their valid ranges.
pub fn random_config(technique: Technique, seed: u64) -> MergeConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00c0_ffee);
    let mut c = MergeConfig::new(technique);
    c.lambda_scale = rng.random_range(0.1..=1.0);
    c.slerp_weight = rng.random_range(0.0..=1.0);
    c.prune_fraction = rng.random_range(0.0..0.9);
    c.dare_p = rng.random_range(0.0..0.9);
    c.bread_beta = rng.random_range(0.0..0.45);
    c.bread_gamma = rng.random_range(0.0..0.45);
    c.lines_alpha = rng.random_range(0.0..1.0);
    c.lines_beta = rng.random_range(0.0..1.0);
    c.rng_seed = rng.random();
    c
}

/// The oracle's answer for `merge_with(cfg, base, experts, MergeContext::for_task(task))`.
/// Pairwise techniques use the first two experts.
pub fn reference(
    cfg: &MergeConfig,
    base: &Checkpoint,
    experts: &[Checkpoint],
    task: u32,
) -> oracle::Model {
    let b = oracle::model(base);
    let es: Vec<oracle::Model> = experts.iter().map(oracle::model).collect();
    let w = oracle::recency(es.len(), cfg.weighting.name(), cfg.reversed);
    let lam = cfg.lambda_scale;
    let prune = cfg.prune_fraction;
    match cfg.technique {
        Technique::Wa => oracle::wa(&es, &w),
        Technique::Slerp => oracle::slerp(&b, &es[0], &es[1], cfg.slerp_weight),
        Technique::ModelStock => oracle::model_stock(&b, &es[0], &es[1]),
        Technique::Ta => oracle::ta(&b, &es, lam, &w),
        Technique::Ties => oracle::ties(&b, &es, lam, prune, &w),
        Technique::DareTies => {
            oracle::dare_ties(&b, &es, lam, prune, cfg.dare_p, cfg.rng_seed, task, &w)
        }
        Technique::BreadcrumbsTies => {
            oracle::breadcrumbs_ties(&b, &es, lam, prune, cfg.bread_beta, cfg.bread_gamma, &w)
        }
        Technique::Magmax => oracle::magmax(&b, &es, lam),
        Technique::LinesTies => {
            oracle::lines_ties(&b, &es, lam, prune, cfg.lines_alpha, cfg.lines_beta, &w)
        }
    }
}

/// Runs every technique on `cases` random instances and returns the worst
/// element-wise error against the oracle per technique.
pub fn oracle_sweep(cases: u64) -> Vec<(Technique, f64)> {
    use chronomerge::{merge_with, MergeContext, Weighting};
    let schemes = Weighting::ALL;
    Technique::ALL
        .iter()
        .map(|&technique| {
            let mut worst = 0.0f64;
            for case in 0..cases {
                let (base, mut experts) = random_case(case);
                if technique.is_pairwise() {
                    while experts.len() < 2 {
                        experts.push(experts[0].clone());
                    }
                    experts.truncate(2);
                }
                let mut cfg = random_config(technique, case);
                cfg.weighting = schemes[case as usize % schemes.len()];
                cfg.reversed = case % 3 == 0;
                let task = (case % 7) as u32;
                let refs: Vec<&Checkpoint> = experts.iter().collect();
                let got = merge_with(&cfg, &base, &refs, &MergeContext::for_task(task as usize))
                    .unwrap_or_else(|e| panic!("{technique} case {case}: {e}"));
                let want = reference(&cfg, &base, &experts, task);
                worst = worst.max(oracle::max_err(&want, &got));
            }
            (technique, worst)
        })
        .collect()
}
