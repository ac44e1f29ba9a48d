//! Dense-vector primitives shared by the loss, encoder and retrieval code.
//!
//! All arithmetic is `f64`. Embeddings are only narrowed to `f32` when they
//! are written to disk.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are treated as zero vectors.
pub const ZERO_NORM: f64 = 1e-12;

/// A finite, non-empty vector in the shared representation space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("embedding has no coordinates"));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    /// True when the vector is unit length to within 1e-9.
    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= 1e-9
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Embedding::new(values)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    // hypot-style scaling keeps huge or tiny coordinates from over/underflowing
    let scale = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    let sum: f64 = v.iter().map(|x| (x / scale) * (x / scale)).sum();
    scale * sum.sqrt()
}

fn checked_norm(v: &[f64]) -> Result<f64> {
    let n = norm(v);
    if n < ZERO_NORM {
        Err(Error::ZeroVector { norm: n })
    } else {
        Ok(n)
    }
}

/// Unit vector in the direction of `v` together with the original norm.
pub fn normalize_with_norm(v: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = checked_norm(v)?;
    Ok((v.iter().map(|x| x / n).collect(), n))
}

pub fn l2_normalize(v: &Embedding) -> Result<Embedding> {
    let (unit, _) = normalize_with_norm(v.as_slice())?;
    Ok(Embedding(unit))
}

pub fn cosine_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "cosine of vectors with dims {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = checked_norm(a)?;
    let nb = checked_norm(b)?;
    Ok(dot(a, b) / na / nb)
}

pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64> {
    cosine_slices(a.as_slice(), b.as_slice())
}

/// `max + ln Σ exp(x - max)`.
pub fn log_sum_exp(xs: &[f64]) -> Result<f64> {
    let m = xs
        .iter()
        .copied()
        .fold(None, |acc: Option<f64>, x| {
            Some(acc.map_or(x, |a| a.max(x)))
        })
        .ok_or(Error::EmptyInput("log_sum_exp of an empty sequence"))?;
    let sum: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    Ok(m + sum.ln())
}

/// `ln(1 + Σ exp(x))`, i.e. log-sum-exp over `xs` with an implicit extra zero.
///
/// When every `x` is non-positive the result goes through `ln_1p`, so a row
/// whose negatives are far below the positive still yields a strictly
/// positive value instead of rounding to zero.
pub fn log1p_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(0.0_f64, f64::max);
    if m == 0.0 {
        xs.iter().map(|x| x.exp()).sum::<f64>().ln_1p()
    } else {
        let sum: f64 = xs.iter().map(|x| (x - m).exp()).sum();
        m + ((-m).exp() + sum).ln()
    }
}

/// Project `grad` (taken w.r.t. the unit vector `unit`) back onto the raw
/// vector whose norm was `norm`: `(I - û ûᵀ) g / ‖x‖`.
pub fn project_through_normalization(grad: &[f64], unit: &[f64], norm: f64) -> Vec<f64> {
    let radial = dot(grad, unit);
    grad.iter()
        .zip(unit)
        .map(|(g, u)| (g - radial * u) / norm)
        .collect()
}
