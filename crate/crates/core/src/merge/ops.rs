//! Merge techniques as pure functions over checkpoints.
//!
//! All arithmetic runs in `f64`: task vectors are formed on the fly from the
//! `f32` checkpoints, combined, added back onto the base, and rounded to
//! `f32` once per element.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{check_lambda, check_probability, check_thresholds};
use super::weights::WeightVector;
use crate::checkpoint::{layer_index, Checkpoint, TaskVector, Tensor};
use crate::error::{Error, Result};

const ZERO_NORM: f64 = 1e-12;
const SLERP_LINEAR_CUTOFF: f64 = 1e-6;

fn structure_check(base: &Checkpoint, others: &[&Checkpoint]) -> Result<()> {
    for (i, c) in others.iter().enumerate() {
        base.check_compatible(c)
            .map_err(|e| Error::StructureMismatch(format!("candidate {i}: {e}")))?;
    }
    Ok(())
}

fn check_weights(weights: &WeightVector, n: usize) -> Result<()> {
    if weights.len() != n {
        return Err(Error::WeightMismatch {
            expected: n,
            got: weights.len(),
        });
    }
    Ok(())
}

fn delta_of(base: &Tensor, expert: &Tensor) -> Vec<f64> {
    base.data()
        .iter()
        .zip(expert.data())
        .map(|(&b, &e)| f64::from(e) - f64::from(b))
        .collect()
}

fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| f64::from(v)).collect()
}

fn to_f32(x: &[f64]) -> Vec<f32> {
    x.iter().map(|&v| v as f32).collect()
}

/// Per-tensor driver shared by the task-vector techniques: builds the deltas
/// of every expert against `base`, hands them to `combine`, and returns
/// `base + lam * combined`.
fn combine_task_vectors<F>(
    base: &Checkpoint,
    experts: &[&Checkpoint],
    lam: f64,
    mut combine: F,
) -> Result<Checkpoint>
where
    F: FnMut(&str, Vec<Vec<f64>>) -> Result<Vec<f64>>,
{
    if experts.is_empty() {
        return Err(Error::EmptyInput);
    }
    structure_check(base, experts)?;
    let mut out = Checkpoint::new();
    for (name, bt) in base.iter() {
        let deltas = experts
            .iter()
            .map(|e| delta_of(bt, e.get(name).expect("structure checked")))
            .collect();
        let merged = combine(name, deltas)?;
        let data = bt
            .data()
            .iter()
            .zip(&merged)
            .map(|(&b, &d)| (f64::from(b) + lam * d) as f32)
            .collect();
        out.insert(name, bt.shape().to_vec(), data)?;
    }
    Ok(out)
}

/// Σ_i w_i θ_i, element-wise.
pub fn weight_average(models: &[&Checkpoint], weights: &WeightVector) -> Result<Checkpoint> {
    let (first, rest) = models.split_first().ok_or(Error::EmptyInput)?;
    check_weights(weights, models.len())?;
    structure_check(first, rest)?;
    let w = weights.as_slice();
    let mut out = Checkpoint::new();
    for (name, t) in first.iter() {
        let mut acc = vec![0.0f64; t.len()];
        for (m, &wi) in models.iter().zip(w) {
            for (a, &x) in acc
                .iter_mut()
                .zip(m.get(name).expect("structure checked").data())
            {
                *a += wi * f64::from(x);
            }
        }
        out.insert(name, t.shape().to_vec(), to_f32(&acc))?;
    }
    Ok(out)
}

/// Interpolation coefficients `(c1, c2)` applied to the two task vectors for
/// angle `omega` and weight `lam`.
///
/// Within `1e-6` rad of 0 or π the spherical form is ill-conditioned and the
/// linear coefficients `(1 - lam, lam)` are returned instead.
pub fn slerp_coefficients(omega: f64, lam: f64) -> (f64, f64) {
    if omega < SLERP_LINEAR_CUTOFF || std::f64::consts::PI - omega < SLERP_LINEAR_CUTOFF {
        return (1.0 - lam, lam);
    }
    let s = omega.sin();
    (((1.0 - lam) * omega).sin() / s, (lam * omega).sin() / s)
}

/// Angle between the two task vectors `a - base`, `b - base`, measured over
/// all tensors at once. Errors if either has norm below 1e-12.
pub fn task_vector_angle(base: &Checkpoint, a: &Checkpoint, b: &Checkpoint) -> Result<f64> {
    structure_check(base, &[a, b])?;
    let (mut dot, mut n1, mut n2) = (0.0, 0.0, 0.0);
    for (name, bt) in base.iter() {
        let d1 = delta_of(bt, a.get(name).unwrap());
        let d2 = delta_of(bt, b.get(name).unwrap());
        for (x, y) in d1.iter().zip(&d2) {
            dot += x * y;
            n1 += x * x;
            n2 += y * y;
        }
    }
    angle_from(dot, n1.sqrt(), n2.sqrt())
}

fn angle_from(dot: f64, n1: f64, n2: f64) -> Result<f64> {
    if n1 < ZERO_NORM {
        return Err(Error::ZeroTaskVector("first"));
    }
    if n2 < ZERO_NORM {
        return Err(Error::ZeroTaskVector("second"));
    }
    Ok((dot / (n1 * n2)).clamp(-1.0, 1.0).acos())
}

/// Spherical interpolation of the task vectors of `a` and `b` around `base`.
pub fn slerp(base: &Checkpoint, a: &Checkpoint, b: &Checkpoint, lam: f64) -> Result<Checkpoint> {
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::InvalidConfig(format!(
            "slerp weight {lam} outside [0, 1]"
        )));
    }
    let omega = task_vector_angle(base, a, b)?;
    let (c1, c2) = slerp_coefficients(omega, lam);
    let mut out = Checkpoint::new();
    for (name, bt) in base.iter() {
        let (at, btn) = (a.get(name).unwrap(), b.get(name).unwrap());
        let data = bt
            .data()
            .iter()
            .zip(at.data().iter().zip(btn.data()))
            .map(|(&base_x, (&ax, &bx))| {
                let base_x = f64::from(base_x);
                let d1 = f64::from(ax) - base_x;
                let d2 = f64::from(bx) - base_x;
                (base_x + c1 * d1 + c2 * d2) as f32
            })
            .collect();
        out.insert(name, bt.shape().to_vec(), data)?;
    }
    Ok(out)
}

/// `base + lam * Σ_i w_i (θ_i - base)`.
pub fn task_arithmetic(
    base: &Checkpoint,
    experts: &[&Checkpoint],
    lam: f64,
    weights: &WeightVector,
) -> Result<Checkpoint> {
    check_lambda(lam)?;
    check_weights(weights, experts.len().max(1))?;
    let w = weights.as_slice();
    combine_task_vectors(base, experts, lam, |_, deltas| Ok(weighted_sum(&deltas, w)))
}

fn weighted_sum(deltas: &[Vec<f64>], w: &[f64]) -> Vec<f64> {
    let mut acc = vec![0.0; deltas[0].len()];
    for (d, &wi) in deltas.iter().zip(w) {
        for (a, &x) in acc.iter_mut().zip(d) {
            *a += wi * x;
        }
    }
    acc
}

/// Zeroes all but the largest-magnitude `n - floor(prune * n)` entries.
/// Equal magnitudes are ranked by position, earlier first.
pub(crate) fn trim_by_magnitude(d: &mut [f64], prune: f64) {
    let n = d.len();
    let drop = (prune * n as f64).floor() as usize;
    if drop == 0 {
        return;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[j].abs().total_cmp(&d[i].abs()).then(i.cmp(&j)));
    for &i in &order[n - drop..] {
        d[i] = 0.0;
    }
}

/// Sign election and disjoint mean over already-trimmed deltas.
///
/// The elected sign is that of `Σ_i δ_i` (the larger of the positive and
/// negative magnitude totals; exact ties go positive). Each element averages
/// only the non-zero entries carrying the elected sign, weighted by `w` and
/// normalized by the weight mass of those entries.
pub(crate) fn elect_and_merge(deltas: &[Vec<f64>], w: &[f64]) -> Vec<f64> {
    let n = deltas[0].len();
    (0..n)
        .map(|j| {
            let total: f64 = deltas.iter().map(|d| d[j]).sum();
            let positive = total >= 0.0;
            let (mut num, mut mass) = (0.0, 0.0);
            for (d, &wi) in deltas.iter().zip(w) {
                let x = d[j];
                if x != 0.0 && (x > 0.0) == positive {
                    num += wi * x;
                    mass += wi;
                }
            }
            if mass > 0.0 {
                num / mass
            } else {
                0.0
            }
        })
        .collect()
}

/// TIES: trim each task vector per tensor, elect signs, average the agreeing entries.
pub fn ties_merge(
    base: &Checkpoint,
    experts: &[&Checkpoint],
    lam: f64,
    prune_fraction: f64,
    weights: &WeightVector,
) -> Result<Checkpoint> {
    ties_with(
        base,
        experts,
        lam,
        prune_fraction,
        weights,
        |_, _, _| Ok(()),
    )
}

/// TIES with a per-(tensor, expert) sparsification hook run before trimming.
pub(crate) fn ties_with<F>(
    base: &Checkpoint,
    experts: &[&Checkpoint],
    lam: f64,
    prune_fraction: f64,
    weights: &WeightVector,
    mut pre: F,
) -> Result<Checkpoint>
where
    F: FnMut(&str, usize, &mut [f64]) -> Result<()>,
{
    check_lambda(lam)?;
    if !(0.0..1.0).contains(&prune_fraction) {
        return Err(Error::InvalidConfig(format!(
            "prune_fraction {prune_fraction} outside [0, 1)"
        )));
    }
    check_weights(weights, experts.len().max(1))?;
    let w = weights.as_slice();
    combine_task_vectors(base, experts, lam, |name, mut deltas| {
        for (i, d) in deltas.iter_mut().enumerate() {
            pre(name, i, d)?;
            trim_by_magnitude(d, prune_fraction);
        }
        Ok(elect_and_merge(&deltas, w))
    })
}

/// Identifies the random stream a DARE mask is drawn from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DareStream {
    pub task: u32,
    pub expert: u32,
}

fn dare_stream_id(stream: DareStream, tensor: &str) -> u64 {
    (u64::from(stream.task & 0xffff) << 48)
        | (u64::from(stream.expert & 0xffff) << 32)
        | u64::from(crc32fast::hash(tensor.as_bytes()))
}

/// Random generator for one (seed, task, expert, tensor) cell.
pub fn dare_rng(seed: u64, stream: DareStream, tensor: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(dare_stream_id(stream, tensor));
    rng
}

pub(crate) fn dare_in_place(d: &mut [f64], p: f64, rng: &mut ChaCha8Rng) {
    let keep_scale = 1.0 / (1.0 - p);
    for x in d.iter_mut() {
        let dropped = rng.random::<f64>() < p;
        *x = if dropped { 0.0 } else { *x * keep_scale };
    }
}

/// DARE: drop each element with probability `p`, rescale survivors by `1/(1-p)`.
pub fn dare_sparsify(delta: &TaskVector, p: f64, rng_seed: u64) -> Result<TaskVector> {
    dare_sparsify_stream(delta, p, rng_seed, DareStream::default())
}

pub fn dare_sparsify_stream(
    delta: &TaskVector,
    p: f64,
    rng_seed: u64,
    stream: DareStream,
) -> Result<TaskVector> {
    check_probability(p)?;
    map_task_vector(delta, |name, d| {
        let mut rng = dare_rng(rng_seed, stream, name);
        dare_in_place(d, p, &mut rng);
    })
}

/// Zeroes the `floor(beta n)` smallest and `floor(gamma n)` largest magnitudes.
pub(crate) fn breadcrumbs_in_place(d: &mut [f64], beta: f64, gamma: f64) {
    let n = d.len();
    let low = (beta * n as f64).floor() as usize;
    let high = (gamma * n as f64).floor() as usize;
    if low + high == 0 {
        return;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].abs().total_cmp(&d[j].abs()).then(i.cmp(&j)));
    for &i in order[..low].iter().chain(&order[n - high..]) {
        d[i] = 0.0;
    }
}

/// Breadcrumbs: remove both magnitude tails of every tensor.
pub fn breadcrumbs_sparsify(delta: &TaskVector, beta: f64, gamma: f64) -> Result<TaskVector> {
    check_thresholds(beta, gamma)?;
    map_task_vector(delta, |_, d| breadcrumbs_in_place(d, beta, gamma))
}

fn map_task_vector(delta: &TaskVector, mut f: impl FnMut(&str, &mut [f64])) -> Result<TaskVector> {
    let mut out = Checkpoint::new();
    for (name, t) in delta.deltas().iter() {
        let mut d = to_f64(t.data());
        f(name, &mut d);
        out.insert(name, t.shape().to_vec(), to_f32(&d))?;
    }
    Ok(TaskVector::from_deltas(out, delta.base_id()))
}

/// Model Stock interpolation ratio `2 cos / (1 + cos)`, with `cos` clamped
/// to [0, 1] so the ratio stays in [0, 1]: task vectors at an obtuse angle
/// fall back to the base instead of extrapolating without bound.
pub fn model_stock_ratio(cos: f64) -> f64 {
    let c = cos.clamp(0.0, 1.0);
    2.0 * c / (1.0 + c)
}

/// Model Stock over two experts: per layer, `r * (a + b)/2 + (1 - r) * base`
/// with `r` from the angle between the layer's two task vectors.
///
/// Layers are grouped by the `layer.<l>.` prefix; unprefixed tensors form the
/// final layer. A layer where either task vector vanishes uses `r = 1`.
pub fn model_stock(base: &Checkpoint, a: &Checkpoint, b: &Checkpoint) -> Result<Checkpoint> {
    structure_check(base, &[a, b])?;
    let last = base.layer_count();
    // per layer: (dot, |d1|^2, |d2|^2)
    let mut stats: BTreeMap<usize, (f64, f64, f64)> = BTreeMap::new();
    let (mut n1_total, mut n2_total) = (0.0, 0.0);
    for (name, bt) in base.iter() {
        let layer = layer_index(name).unwrap_or(last);
        let d1 = delta_of(bt, a.get(name).unwrap());
        let d2 = delta_of(bt, b.get(name).unwrap());
        let s = stats.entry(layer).or_default();
        for (x, y) in d1.iter().zip(&d2) {
            s.0 += x * y;
            s.1 += x * x;
            s.2 += y * y;
        }
        n1_total += d1.iter().map(|x| x * x).sum::<f64>();
        n2_total += d2.iter().map(|x| x * x).sum::<f64>();
    }
    if n1_total.sqrt() < ZERO_NORM {
        return Err(Error::ZeroTaskVector("first"));
    }
    if n2_total.sqrt() < ZERO_NORM {
        return Err(Error::ZeroTaskVector("second"));
    }
    let ratios: BTreeMap<usize, f64> = stats
        .into_iter()
        .map(|(layer, (dot, s1, s2))| {
            let (n1, n2) = (s1.sqrt(), s2.sqrt());
            let r = if n1 < ZERO_NORM || n2 < ZERO_NORM {
                1.0
            } else {
                model_stock_ratio(dot / (n1 * n2))
            };
            (layer, r)
        })
        .collect();

    let mut out = Checkpoint::new();
    for (name, bt) in base.iter() {
        let r = ratios[&layer_index(name).unwrap_or(last)];
        let (at, btn) = (a.get(name).unwrap(), b.get(name).unwrap());
        let data = bt
            .data()
            .iter()
            .zip(at.data().iter().zip(btn.data()))
            .map(|(&base_x, (&ax, &bx))| {
                let mid = 0.5 * (f64::from(ax) + f64::from(bx));
                (r * mid + (1.0 - r) * f64::from(base_x)) as f32
            })
            .collect();
        out.insert(name, bt.shape().to_vec(), data)?;
    }
    Ok(out)
}

/// MagMax: per element keep the task-vector entry of largest magnitude
/// (earliest expert on ties), then `base + lam * δ`.
pub fn magmax_merge(base: &Checkpoint, experts: &[&Checkpoint], lam: f64) -> Result<Checkpoint> {
    check_lambda(lam)?;
    combine_task_vectors(base, experts, lam, |_, deltas| Ok(max_magnitude(&deltas)))
}

fn max_magnitude(deltas: &[Vec<f64>]) -> Vec<f64> {
    (0..deltas[0].len())
        .map(|j| {
            let mut best = deltas[0][j];
            for d in &deltas[1..] {
                if d[j].abs() > best.abs() {
                    best = d[j];
                }
            }
            best
        })
        .collect()
}

/// LiNeS layer scale `alpha + beta (l - 1)/(L - 1)`; just `alpha` when `L = 1`.
pub fn lines_scale(layer: usize, layer_count: usize, alpha: f64, beta: f64) -> f64 {
    if layer_count <= 1 {
        return alpha;
    }
    let l = layer.clamp(1, layer_count);
    alpha + beta * (l - 1) as f64 / (layer_count - 1) as f64
}

/// Layer scale for a tensor name; unparseable names sit in the last layer.
pub(crate) fn lines_scale_for(name: &str, layer_count: usize, alpha: f64, beta: f64) -> f64 {
    let l = layer_index(name).unwrap_or(layer_count);
    lines_scale(l, layer_count, alpha, beta)
}

/// Scales each tensor of `delta` by its layer's LiNeS factor.
pub fn lines_rescale(delta: &TaskVector, layer_count: usize, alpha: f64, beta: f64) -> TaskVector {
    map_task_vector(delta, |name, d| {
        let s = lines_scale_for(name, layer_count.max(1), alpha, beta);
        d.iter_mut().for_each(|x| *x *= s);
    })
    .expect("shapes are preserved")
}
