//! Exhaustive nearest-sample selection.
//!
//! Distances use the expanded form `|a|^2 + |b|^2 - 2 a.b`, clamped at zero.
//! Norms and cross terms share one dot-product routine, so a candidate that
//! is bitwise equal to the target has distance exactly zero.

use crate::error::{Error, Result};
use crate::scalar::{dot, Scalar};

/// The `m` candidate vectors generated for one training example.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidatePool<T> {
    vectors: Vec<Vec<T>>,
}

impl<T: Scalar> CandidatePool<T> {
    pub fn new(vectors: Vec<Vec<T>>) -> Result<Self> {
        let first = vectors
            .first()
            .ok_or_else(|| Error::arg("candidate pool is empty"))?;
        if vectors.iter().any(|v| v.len() != first.len()) {
            return Err(Error::arg("candidate vectors differ in length"));
        }
        Ok(Self { vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    pub fn vectors(&self) -> &[Vec<T>] {
        &self.vectors
    }
}

/// Result of a nearest-sample query. `index` is zero-based.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nearest<T> {
    pub index: usize,
    pub distance: T,
}

/// `|a_i - b_j|^2` for every pair, as rows of `a` by columns of `b`.
pub fn pairwise_sq_dists<T: Scalar>(a: &[Vec<T>], b: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
    let dim = a.first().or(b.first()).map_or(0, Vec::len);
    if a.iter().chain(b).any(|v| v.len() != dim) {
        return Err(Error::arg("pairwise distances need equal-length vectors"));
    }
    let a_norms: Vec<T> = a.iter().map(|v| dot(v, v)).collect();
    let b_norms: Vec<T> = b.iter().map(|v| dot(v, v)).collect();
    let two = T::lit(2.0);
    Ok(a.iter()
        .zip(&a_norms)
        .map(|(u, &nu)| {
            b.iter()
                .zip(&b_norms)
                .map(|(v, &nv)| (nu + nv - two * dot(u, v)).max(T::zero()))
                .collect()
        })
        .collect())
}

/// Index of the smallest value; ties resolve to the lowest index.
pub fn argmin<T: Scalar>(values: &[T]) -> Option<Nearest<T>> {
    let mut best: Option<Nearest<T>> = None;
    for (index, &distance) in values.iter().enumerate() {
        if best.is_none_or(|b| distance < b.distance) {
            best = Some(Nearest { index, distance });
        }
    }
    best
}

/// The candidate closest to `target` in squared Euclidean distance.
pub fn select_nearest<T: Scalar>(target: &[T], pool: &CandidatePool<T>) -> Result<Nearest<T>> {
    if target.len() != pool.dim() {
        return Err(Error::arg(format!(
            "target length {} does not match candidate length {}",
            target.len(),
            pool.dim()
        )));
    }
    let row = pairwise_sq_dists(std::slice::from_ref(&target.to_vec()), &pool.vectors)?
        .pop()
        .expect("one row");
    Ok(argmin(&row).expect("pool is non-empty"))
}
