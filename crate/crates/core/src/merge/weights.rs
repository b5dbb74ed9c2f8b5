use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-candidate merge coefficients: non-negative, summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.is_empty() {
            return Err(Error::InvalidCount(0));
        }
        if let Some(bad) = coefficients.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::InvalidWeights(format!(
                "coefficient {bad} is negative or not finite"
            )));
        }
        let sum: f64 = coefficients.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::InvalidWeights(format!(
                "coefficients sum to {sum}, not 1"
            )));
        }
        Ok(Self(coefficients))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidCount(0));
        }
        Ok(Self(vec![1.0 / n as f64; n]))
    }

    /// Two-way split `[1 - w, w]`.
    pub fn pair(w: f64) -> Result<Self> {
        Self::new(vec![1.0 - w, w])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Coefficient scheme over merge candidates ordered oldest to newest.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default,
)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Uniform,
    Linear,
    Sqrt,
    Quadratic,
    Cubic,
    Fifth,
    Tenth,
    Exp,
    Log,
}

impl Weighting {
    pub const ALL: [Weighting; 9] = [
        Weighting::Uniform,
        Weighting::Linear,
        Weighting::Sqrt,
        Weighting::Quadratic,
        Weighting::Cubic,
        Weighting::Fifth,
        Weighting::Tenth,
        Weighting::Exp,
        Weighting::Log,
    ];

    /// Schemes that favour recent candidates.
    pub const RECENCY: [Weighting; 8] = [
        Weighting::Linear,
        Weighting::Sqrt,
        Weighting::Quadratic,
        Weighting::Cubic,
        Weighting::Fifth,
        Weighting::Tenth,
        Weighting::Exp,
        Weighting::Log,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Weighting::Uniform => "uniform",
            Weighting::Linear => "linear",
            Weighting::Sqrt => "sqrt",
            Weighting::Quadratic => "quadratic",
            Weighting::Cubic => "cubic",
            Weighting::Fifth => "fifth",
            Weighting::Tenth => "tenth",
            Weighting::Exp => "exp",
            Weighting::Log => "log",
        }
    }

    /// Unnormalized value for 1-based candidate position `i`.
    fn raw(self, i: usize) -> f64 {
        let x = i as f64;
        match self {
            Weighting::Uniform => 1.0,
            Weighting::Linear => x,
            Weighting::Sqrt => x.sqrt(),
            Weighting::Quadratic => x * x,
            Weighting::Cubic => x.powi(3),
            Weighting::Fifth => x.powi(5),
            Weighting::Tenth => x.powi(10),
            // base 2, exponent starts at 0
            Weighting::Exp => 2f64.powi(i as i32 - 1),
            Weighting::Log => (x + 1.0).ln(),
        }
    }
}

impl std::fmt::Display for Weighting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Weighting {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Weighting::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| format!("unknown weighting `{s}`"))
    }
}

/// Normalized coefficients for `n` candidates under `scheme`.
///
/// With `reversed`, the list is flipped so the oldest candidate gets the
/// largest weight.
pub fn recency_weights(n: usize, scheme: Weighting, reversed: bool) -> Result<WeightVector> {
    if n < 1 {
        return Err(Error::InvalidCount(n));
    }
    if scheme == Weighting::Uniform {
        return WeightVector::uniform(n);
    }
    let mut values: Vec<f64> = (1..=n).map(|i| scheme.raw(i)).collect();
    let total: f64 = values.iter().sum();
    for v in &mut values {
        *v /= total;
    }
    if reversed {
        values.reverse();
    }
    WeightVector::new(values)
}
