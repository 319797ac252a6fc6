//! Bijection between HMM parameters and an unconstrained real vector.
//!
//! Layout: every transition row by additive log-ratio against its last entry
//! (`u = log(q_l / q_K)`, `l < K`), then the K means unchanged, then the K log-variances.
//! In the mixture model all rows share one weight vector, so only one row block is stored.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::HmmParams;
use crate::scalar::Scalar;

/// Which likelihood the parameters feed: a Markov chain or i.i.d. mixture allocations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Hmm,
    Mixture,
}

impl ModelKind {
    /// Number of free simplex rows.
    pub fn simplex_rows(self, k: usize) -> usize {
        match self {
            ModelKind::Hmm => k,
            ModelKind::Mixture => 1,
        }
    }

    pub fn dim(self, k: usize) -> usize {
        self.simplex_rows(k) * (k - 1) + 2 * k
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnconstrainedPoint<T> {
    pub vec: Vec<T>,
}

impl<T> From<Vec<T>> for UnconstrainedPoint<T> {
    fn from(vec: Vec<T>) -> Self {
        UnconstrainedPoint { vec }
    }
}

pub fn from_constrained<T: Scalar>(params: &HmmParams<T>, kind: ModelKind) -> Result<UnconstrainedPoint<T>> {
    let k = params.k();
    if params.trans().iter().any(|&q| !(q > T::zero())) {
        return Err(Error::InvalidParams(
            "transition entries must be strictly positive".into(),
        ));
    }
    if kind == ModelKind::Mixture && !rows_equal(params) {
        return Err(Error::InvalidParams(
            "mixture parameters need identical transition rows".into(),
        ));
    }
    let mut vec = Vec::with_capacity(kind.dim(k));
    for r in 0..kind.simplex_rows(k) {
        let row = params.row(r);
        let last = row[k - 1].ln();
        vec.extend(row[..k - 1].iter().map(|q| q.ln() - last));
    }
    vec.extend_from_slice(params.means());
    vec.extend(params.variances().iter().map(|v| v.ln()));
    Ok(UnconstrainedPoint { vec })
}

fn rows_equal<T: Scalar>(params: &HmmParams<T>) -> bool {
    let tol = T::lit(T::SIMPLEX_TOL);
    let first = params.row(0);
    params
        .rows()
        .all(|r| r.iter().zip(first).all(|(a, b)| (*a - *b).abs() <= tol))
}

/// `log(1 + sum(exp(u)))`.
fn log_one_plus_sum_exp<T: Scalar>(u: &[T]) -> T {
    let m = u.iter().copied().fold(T::zero(), T::max);
    let s = (-m).exp() + u.iter().map(|&x| (x - m).exp()).sum::<T>();
    m + s.ln()
}

fn softmax_ref<T: Scalar>(u: &[T], out: &mut Vec<T>) {
    let lz = log_one_plus_sum_exp(u);
    out.extend(u.iter().map(|&x| (x - lz).exp()));
    out.push((-lz).exp());
}

pub fn to_constrained<T: Scalar>(point: &UnconstrainedPoint<T>, kind: ModelKind, k: usize) -> Result<HmmParams<T>> {
    let u = &point.vec;
    if k == 0 || u.len() != kind.dim(k) {
        return Err(Error::InvalidInput(format!(
            "point has length {} but k = {k} needs {}",
            u.len(),
            if k == 0 { 0 } else { kind.dim(k) }
        )));
    }
    let rows = kind.simplex_rows(k);
    let mut trans = Vec::with_capacity(k * k);
    for r in 0..rows {
        softmax_ref(&u[r * (k - 1)..(r + 1) * (k - 1)], &mut trans);
    }
    if kind == ModelKind::Mixture {
        let first = trans.clone();
        for _ in 1..k {
            trans.extend_from_slice(&first);
        }
    }
    let off = rows * (k - 1);
    let means = u[off..off + k].to_vec();
    let variances = u[off + k..].iter().map(|v| v.exp()).collect();
    HmmParams::from_flat(k, trans, means, variances)
}

/// `log |det d(params) / d(point)|`: the softmax block contributes the sum of the log of all K
/// entries of each row, the log-variance block contributes `sum log sigma_k^2`.
pub fn log_jacobian<T: Scalar>(point: &UnconstrainedPoint<T>, kind: ModelKind, k: usize) -> T {
    let u = &point.vec;
    let rows = kind.simplex_rows(k);
    let kk = T::from_usize_lossy(k);
    let mut lj = T::zero();
    for r in 0..rows {
        let block = &u[r * (k - 1)..(r + 1) * (k - 1)];
        lj += block.iter().copied().sum::<T>() - kk * log_one_plus_sum_exp(block);
    }
    let off = rows * (k - 1) + k;
    lj + u[off..off + k].iter().copied().sum::<T>()
}

/// Gradient of [`log_jacobian`] with respect to the point.
pub fn log_jacobian_grad<T: Scalar>(point: &UnconstrainedPoint<T>, kind: ModelKind, k: usize) -> Vec<T> {
    let u = &point.vec;
    let rows = kind.simplex_rows(k);
    let kk = T::from_usize_lossy(k);
    let mut grad = vec![T::zero(); u.len()];
    for r in 0..rows {
        let block = &u[r * (k - 1)..(r + 1) * (k - 1)];
        let lz = log_one_plus_sum_exp(block);
        for (l, &x) in block.iter().enumerate() {
            grad[r * (k - 1) + l] = T::one() - kk * (x - lz).exp();
        }
    }
    let off = rows * (k - 1) + k;
    for g in &mut grad[off..off + k] {
        *g = T::one();
    }
    grad
}
