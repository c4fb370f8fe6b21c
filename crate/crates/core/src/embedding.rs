use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm tolerance for encoder outputs.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Fixed-dimension real vector produced by an encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Wraps raw values, rejecting empty or non-finite input.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Invalid("embedding has zero dimensions".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("embedding has non-finite entries".into()));
        }
        Ok(Embedding(values))
    }

    /// L2-normalizes `values`. Fails on a zero vector.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let mut e = Embedding::new(values)?;
        let n = e.norm();
        if n == 0.0 {
            return Err(Error::Invalid("cannot normalize a zero vector".into()));
        }
        e.0.iter_mut().for_each(|v| *v /= n);
        Ok(e)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_NORM_TOL
    }
}

/// `dot(a, b) / (|a| |b|)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    cosine(a.values(), b.values())
}

/// Slice version of [`cosine_similarity`].
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Invalid("cosine similarity of a zero-norm vector".into()));
    }
    // sqrt(na) * sqrt(nb) commutes, so the result is exactly symmetric
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Entry-wise mean of equal-length vectors. `None` for an empty input.
pub fn mean_vector<'a, I>(vectors: I) -> Option<Vec<f64>>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut iter = vectors.into_iter();
    let first = iter.next()?;
    let mut acc = first.to_vec();
    let mut n = 1usize;
    for v in iter {
        debug_assert_eq!(v.len(), acc.len());
        acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
        n += 1;
    }
    let n = n as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Some(acc)
}
