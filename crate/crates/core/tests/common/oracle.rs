//! Straight-line reference implementations of every merge technique,
//! written from the formulas rather than from the library code. Models are
//! plain `name -> Vec<f64>` maps.

#![allow(dead_code)]

use std::collections::BTreeMap;

use chronomerge::merge::{dare_rng, DareStream};
use chronomerge::Checkpoint;
use rand::Rng;

pub type Model = BTreeMap<String, Vec<f64>>;

pub fn model(c: &Checkpoint) -> Model {
    c.iter()
        .map(|(n, t)| (n.to_string(), t.data().iter().map(|&x| x as f64).collect()))
        .collect()
}

pub fn delta(base: &Model, e: &Model) -> Model {
    base.iter()
        .map(|(n, b)| (n.clone(), b.iter().zip(&e[n]).map(|(x, y)| y - x).collect()))
        .collect()
}

fn add_scaled(base: &Model, d: &Model, s: f64) -> Model {
    base.iter()
        .map(|(n, b)| {
            (
                n.clone(),
                b.iter().zip(&d[n]).map(|(x, y)| x + s * y).collect(),
            )
        })
        .collect()
}

/// Largest absolute element-wise difference between the oracle and a checkpoint.
pub fn max_err(want: &Model, got: &Checkpoint) -> f64 {
    let mut worst = 0.0f64;
    assert_eq!(want.len(), got.len(), "tensor count");
    for (n, w) in want {
        let g = got.get(n).unwrap_or_else(|| panic!("missing {n}")).data();
        assert_eq!(w.len(), g.len());
        for (a, b) in w.iter().zip(g) {
            worst = worst.max((a - *b as f64).abs());
        }
    }
    worst
}

pub fn wa(models: &[Model], w: &[f64]) -> Model {
    let mut out = Model::new();
    for name in models[0].keys() {
        let n = models[0][name].len();
        let mut v = vec![0.0; n];
        for j in 0..n {
            for i in 0..models.len() {
                v[j] += w[i] * models[i][name][j];
            }
        }
        out.insert(name.clone(), v);
    }
    out
}

pub fn ta(base: &Model, experts: &[Model], lam: f64, w: &[f64]) -> Model {
    let deltas: Vec<Model> = experts.iter().map(|e| delta(base, e)).collect();
    let mean = wa(&deltas, w);
    add_scaled(base, &mean, lam)
}

fn flat(m: &Model) -> Vec<f64> {
    m.values().flatten().copied().collect()
}

pub fn slerp(base: &Model, a: &Model, b: &Model, lam: f64) -> Model {
    let (d1, d2) = (delta(base, a), delta(base, b));
    let (v1, v2) = (flat(&d1), flat(&d2));
    let dot: f64 = v1.iter().zip(&v2).map(|(x, y)| x * y).sum();
    let n1 = v1.iter().map(|x| x * x).sum::<f64>().sqrt();
    let n2 = v2.iter().map(|x| x * x).sum::<f64>().sqrt();
    let omega = (dot / (n1 * n2)).clamp(-1.0, 1.0).acos();
    let (c1, c2) = if omega < 1e-6 || std::f64::consts::PI - omega < 1e-6 {
        (1.0 - lam, lam)
    } else {
        (
            ((1.0 - lam) * omega).sin() / omega.sin(),
            (lam * omega).sin() / omega.sin(),
        )
    };
    let mut out = Model::new();
    for (n, b) in base {
        let v = (0..b.len())
            .map(|j| b[j] + c1 * d1[n][j] + c2 * d2[n][j])
            .collect();
        out.insert(n.clone(), v);
    }
    out
}

/// Keep the `n - floor(prune n)` largest magnitudes; earlier index wins ties.
pub fn trim(d: &[f64], prune: f64) -> Vec<f64> {
    let n = d.len();
    let keep = n - (prune * n as f64).floor() as usize;
    let mut out = vec![0.0; n];
    for j in 0..n {
        // rank = number of entries that beat entry j
        let rank = (0..n)
            .filter(|&i| d[i].abs() > d[j].abs() || (d[i].abs() == d[j].abs() && i < j))
            .count();
        if rank < keep {
            out[j] = d[j];
        }
    }
    out
}

pub fn ties_deltas(base: &Model, deltas: &[Model], lam: f64, prune: f64, w: &[f64]) -> Model {
    let mut merged = Model::new();
    for name in base.keys() {
        let trimmed: Vec<Vec<f64>> = deltas.iter().map(|d| trim(&d[name], prune)).collect();
        let n = base[name].len();
        let mut v = vec![0.0; n];
        for j in 0..n {
            let signed_mass: f64 = trimmed
                .iter()
                .map(|t| t[j].abs() * t[j].signum() * (t[j] != 0.0) as u8 as f64)
                .sum();
            let sign = if signed_mass >= 0.0 { 1.0 } else { -1.0 };
            let (mut num, mut den) = (0.0, 0.0);
            for (i, t) in trimmed.iter().enumerate() {
                if t[j] != 0.0 && t[j].signum() == sign {
                    num += w[i] * t[j];
                    den += w[i];
                }
            }
            v[j] = if den > 0.0 { num / den } else { 0.0 };
        }
        merged.insert(name.clone(), v);
    }
    add_scaled(base, &merged, lam)
}

pub fn ties(base: &Model, experts: &[Model], lam: f64, prune: f64, w: &[f64]) -> Model {
    let deltas: Vec<Model> = experts.iter().map(|e| delta(base, e)).collect();
    ties_deltas(base, &deltas, lam, prune, w)
}

/// Bernoulli mask drawn from the library's documented stream for each
/// (seed, task, expert, tensor) cell.
pub fn dare(d: &[f64], p: f64, seed: u64, task: u32, expert: u32, name: &str) -> Vec<f64> {
    let mut rng = dare_rng(seed, DareStream { task, expert }, name);
    d.iter()
        .map(|&x| {
            let u: f64 = rng.random();
            if u < p {
                0.0
            } else {
                x / (1.0 - p)
            }
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn dare_ties(
    base: &Model,
    experts: &[Model],
    lam: f64,
    prune: f64,
    p: f64,
    seed: u64,
    task: u32,
    w: &[f64],
) -> Model {
    let deltas: Vec<Model> = experts
        .iter()
        .enumerate()
        .map(|(i, e)| {
            delta(base, e)
                .into_iter()
                .map(|(n, d)| {
                    let s = dare(&d, p, seed, task, i as u32, &n);
                    (n, s)
                })
                .collect()
        })
        .collect();
    ties_deltas(base, &deltas, lam, prune, w)
}

/// Zero the floor(beta n) smallest and floor(gamma n) largest magnitudes.
pub fn breadcrumbs(d: &[f64], beta: f64, gamma: f64) -> Vec<f64> {
    let n = d.len();
    let low = (beta * n as f64).floor() as usize;
    let high = (gamma * n as f64).floor() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    // ascending magnitude, earlier index first
    idx.sort_by(|&a, &b| d[a].abs().partial_cmp(&d[b].abs()).unwrap().then(a.cmp(&b)));
    let mut out = d.to_vec();
    for (rank, &i) in idx.iter().enumerate() {
        if rank < low || rank >= n - high {
            out[i] = 0.0;
        }
    }
    out
}

pub fn breadcrumbs_ties(
    base: &Model,
    experts: &[Model],
    lam: f64,
    prune: f64,
    beta: f64,
    gamma: f64,
    w: &[f64],
) -> Model {
    let deltas: Vec<Model> = experts
        .iter()
        .map(|e| {
            delta(base, e)
                .into_iter()
                .map(|(n, d)| (n, breadcrumbs(&d, beta, gamma)))
                .collect()
        })
        .collect();
    ties_deltas(base, &deltas, lam, prune, w)
}

fn layer_of(name: &str, last: usize) -> usize {
    let mut parts = name.split('.');
    match (parts.next(), parts.next(), parts.next()) {
        (Some("layer"), Some(l), Some(_)) => l.parse().ok().filter(|&l| l >= 1).unwrap_or(last),
        _ => last,
    }
}

fn layer_count(m: &Model) -> usize {
    m.keys()
        .filter_map(|n| {
            let l = layer_of(n, 0);
            (l > 0).then_some(l)
        })
        .max()
        .unwrap_or(1)
}

pub fn model_stock(base: &Model, a: &Model, b: &Model) -> Model {
    let last = layer_count(base);
    let (d1, d2) = (delta(base, a), delta(base, b));
    let mut r_of = BTreeMap::new();
    for l in base.keys().map(|n| layer_of(n, last)) {
        let names: Vec<&String> = base.keys().filter(|n| layer_of(n, last) == l).collect();
        let v1: Vec<f64> = names.iter().flat_map(|n| d1[*n].clone()).collect();
        let v2: Vec<f64> = names.iter().flat_map(|n| d2[*n].clone()).collect();
        let dot: f64 = v1.iter().zip(&v2).map(|(x, y)| x * y).sum();
        let n1 = v1.iter().map(|x| x * x).sum::<f64>().sqrt();
        let n2 = v2.iter().map(|x| x * x).sum::<f64>().sqrt();
        let r = if n1 < 1e-12 || n2 < 1e-12 {
            1.0
        } else {
            let c = (dot / (n1 * n2)).clamp(0.0, 1.0);
            2.0 * c / (1.0 + c)
        };
        r_of.insert(l, r);
    }
    let mut out = Model::new();
    for (n, bv) in base {
        let r = r_of[&layer_of(n, last)];
        let v = (0..bv.len())
            .map(|j| r * (a[n][j] + b[n][j]) / 2.0 + (1.0 - r) * bv[j])
            .collect();
        out.insert(n.clone(), v);
    }
    out
}

pub fn magmax(base: &Model, experts: &[Model], lam: f64) -> Model {
    let deltas: Vec<Model> = experts.iter().map(|e| delta(base, e)).collect();
    let mut merged = Model::new();
    for (n, bv) in base {
        let v = (0..bv.len())
            .map(|j| {
                let mut best = 0;
                for i in 1..deltas.len() {
                    if deltas[i][n][j].abs() > deltas[best][n][j].abs() {
                        best = i;
                    }
                }
                deltas[best][n][j]
            })
            .collect();
        merged.insert(n.clone(), v);
    }
    add_scaled(base, &merged, lam)
}

pub fn lines_scale(l: usize, big_l: usize, alpha: f64, beta: f64) -> f64 {
    if big_l == 1 {
        alpha
    } else {
        alpha + beta * (l as f64 - 1.0) / (big_l as f64 - 1.0)
    }
}

pub fn lines_ties(
    base: &Model,
    experts: &[Model],
    lam: f64,
    prune: f64,
    alpha: f64,
    beta: f64,
    w: &[f64],
) -> Model {
    let big_l = layer_count(base);
    let deltas: Vec<Model> = experts
        .iter()
        .map(|e| {
            delta(base, e)
                .into_iter()
                .map(|(n, d)| {
                    let s = lines_scale(layer_of(&n, big_l), big_l, alpha, beta);
                    let scaled = d.iter().map(|x| x * s).collect();
                    (n, scaled)
                })
                .collect()
        })
        .collect();
    ties_deltas(base, &deltas, lam, prune, w)
}

/// Recency schemes by name, normalized, optionally reversed.
pub fn recency(n: usize, scheme: &str, reversed: bool) -> Vec<f64> {
    let raw: Vec<f64> = (1..=n)
        .map(|i| {
            let x = i as f64;
            match scheme {
                "uniform" => 1.0,
                "linear" => x,
                "sqrt" => x.sqrt(),
                "quadratic" => x * x,
                "cubic" => x * x * x,
                "fifth" => x.powi(5),
                "tenth" => x.powi(10),
                "exp" => 2f64.powf(x - 1.0),
                "log" => (x + 1.0).ln(),
                other => panic!("unknown scheme {other}"),
            }
        })
        .collect();
    let s: f64 = raw.iter().sum();
    let mut w: Vec<f64> = raw.into_iter().map(|x| x / s).collect();
    if reversed {
        w.reverse();
    }
    w
}
