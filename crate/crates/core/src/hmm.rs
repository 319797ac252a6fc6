//! Gaussian hidden Markov model: parameters, stationary law, likelihood, simulation and
//! forward-filter backward-sample path draws.
//!
//! The hidden chain starts from its stationary distribution, so the forward recursion is
//! initialised with `alpha_1(j) = mu_j(Q) f(y_1 | theta_j)`. Forward variables are
//! renormalised at every step and the log scales accumulated, which keeps the likelihood
//! finite for very long series.
//!
//! State indices are zero-based in memory; file formats use one-based labels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::stats::{rng_from, LN_2PI};

/// Full parameter vector of a K-state Gaussian HMM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamsRepr<T>", into = "ParamsRepr<T>")]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct HmmParams<T> {
    k: usize,
    /// Row-major K x K transition matrix.
    trans: Vec<T>,
    means: Vec<T>,
    variances: Vec<T>,
}

#[derive(Serialize, Deserialize)]
struct ParamsRepr<T> {
    trans: Vec<Vec<T>>,
    means: Vec<T>,
    variances: Vec<T>,
}

impl<T: Scalar> TryFrom<ParamsRepr<T>> for HmmParams<T> {
    type Error = Error;

    fn try_from(r: ParamsRepr<T>) -> Result<Self> {
        HmmParams::new(r.trans, r.means, r.variances)
    }
}

impl<T: Scalar> From<HmmParams<T>> for ParamsRepr<T> {
    fn from(p: HmmParams<T>) -> Self {
        ParamsRepr {
            trans: p.rows().map(|r| r.to_vec()).collect(),
            means: p.means,
            variances: p.variances,
        }
    }
}

impl<T: Scalar> HmmParams<T> {
    pub fn new(trans: Vec<Vec<T>>, means: Vec<T>, variances: Vec<T>) -> Result<Self> {
        let k = means.len();
        if trans.len() != k || trans.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidParams(format!(
                "transition matrix must be {k}x{k}"
            )));
        }
        Self::from_flat(k, trans.concat(), means, variances)
    }

    pub fn from_flat(k: usize, trans: Vec<T>, means: Vec<T>, variances: Vec<T>) -> Result<Self> {
        let p = HmmParams {
            k,
            trans,
            means,
            variances,
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        let k = self.k;
        if k == 0 {
            return Err(Error::InvalidParams("k must be positive".into()));
        }
        if self.trans.len() != k * k || self.means.len() != k || self.variances.len() != k {
            return Err(Error::InvalidParams(format!(
                "dimension mismatch for k = {k}"
            )));
        }
        let tol = T::lit(T::SIMPLEX_TOL);
        for (i, row) in self.rows().enumerate() {
            if row.iter().any(|&q| !(q >= T::zero()) || !q.is_finite()) {
                return Err(Error::InvalidParams(format!("row {i} has a negative entry")));
            }
            let s: T = row.iter().copied().sum();
            if (s - T::one()).abs() > tol {
                return Err(Error::InvalidParams(format!(
                    "row {i} sums to {:?}",
                    s
                )));
            }
        }
        if self.means.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidParams("non-finite mean".into()));
        }
        let min_var = T::lit(T::MIN_VARIANCE);
        if self
            .variances
            .iter()
            .any(|&v| !v.is_finite() || !(v >= min_var))
        {
            return Err(Error::InvalidParams(format!(
                "variances must be finite and at least {:e}",
                T::MIN_VARIANCE
            )));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn trans(&self) -> &[T] {
        &self.trans
    }

    pub fn q(&self, from: usize, to: usize) -> T {
        self.trans[from * self.k + to]
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.trans[i * self.k..(i + 1) * self.k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.trans.chunks(self.k)
    }

    pub fn means(&self) -> &[T] {
        &self.means
    }

    pub fn variances(&self) -> &[T] {
        &self.variances
    }

    /// Relabels states so that new state `i` is old state `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let k = self.k;
        assert_eq!(perm.len(), k);
        let mut trans = vec![T::zero(); k * k];
        for i in 0..k {
            for j in 0..k {
                trans[i * k + j] = self.q(perm[i], perm[j]);
            }
        }
        HmmParams {
            k,
            trans,
            means: perm.iter().map(|&i| self.means[i]).collect(),
            variances: perm.iter().map(|&i| self.variances[i]).collect(),
        }
    }

    /// Same parameters with states ordered by increasing mean.
    pub fn sorted_by_mean(&self) -> Self {
        let mut perm: Vec<usize> = (0..self.k).collect();
        perm.sort_by(|&a, &b| {
            self.means[a]
                .partial_cmp(&self.means[b])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        self.permuted(&perm)
    }

    /// True when every row equals the first one (a finite mixture).
    pub fn has_identical_rows(&self) -> bool {
        let first = self.row(0);
        self.rows().all(|r| r == first)
    }

    pub fn stationary(&self) -> Result<StationaryDist<T>> {
        stationary_flat(self.k, &self.trans)
    }

    pub fn cast<U: Scalar>(&self) -> Result<HmmParams<U>> {
        let c = |v: &[T]| v.iter().map(|x| U::lit(x.as_f64())).collect::<Vec<U>>();
        let mut trans = c(&self.trans);
        for row in trans.chunks_mut(self.k) {
            let s: U = row.iter().copied().sum();
            row.iter_mut().for_each(|q| *q /= s);
        }
        HmmParams::from_flat(self.k, trans, c(&self.means), c(&self.variances))
    }

    pub(crate) fn emission_consts(&self) -> EmissionConsts<T> {
        let half = T::lit(0.5);
        EmissionConsts {
            log_norm: self
                .variances
                .iter()
                .map(|&v| -half * (T::lit(LN_2PI) + v.ln()))
                .collect(),
            inv_two_var: self.variances.iter().map(|&v| half / v).collect(),
        }
    }

    pub fn emission_log_density(&self, state: usize, y: T) -> T {
        let d = y - self.means[state];
        let v = self.variances[state];
        -T::lit(0.5) * (T::lit(LN_2PI) + v.ln() + d * d / v)
    }
}

pub(crate) struct EmissionConsts<T> {
    log_norm: Vec<T>,
    inv_two_var: Vec<T>,
}

impl<T: Scalar> EmissionConsts<T> {
    /// Fills `out` with `log f(y | theta_j)` and returns the maximum.
    #[inline]
    pub(crate) fn fill(&self, means: &[T], y: T, out: &mut [T]) -> T {
        let mut max = T::neg_infinity();
        for j in 0..out.len() {
            let d = y - means[j];
            let v = self.log_norm[j] - d * d * self.inv_two_var[j];
            out[j] = v;
            if v > max {
                max = v;
            }
        }
        max
    }
}

/// Observed series with the generating hidden path when known.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub obs: Vec<T>,
    /// Zero-based hidden states, present for simulated data.
    pub hidden: Option<Vec<usize>>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn new(obs: Vec<T>, hidden: Option<Vec<usize>>) -> Result<Self> {
        if obs.is_empty() {
            return Err(Error::InvalidInput("trajectory must be nonempty".into()));
        }
        if let Some(h) = &hidden {
            if h.len() != obs.len() {
                return Err(Error::InvalidInput(
                    "hidden path length differs from observations".into(),
                ));
            }
        }
        check_obs(&obs)?;
        Ok(Trajectory { obs, hidden })
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }
}

/// Stationary distribution of an ergodic transition matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryDist<T> {
    pub mu: Vec<T>,
}

/// Stationary distribution of a row-stochastic matrix, solving `(Q^T - I) mu = 0` with the
/// last equation replaced by `sum(mu) = 1`.
pub fn stationary<T: Scalar>(trans: &[Vec<T>]) -> Result<StationaryDist<T>> {
    let k = trans.len();
    if k == 0 || trans.iter().any(|r| r.len() != k) {
        return Err(Error::InvalidParams("transition matrix must be square".into()));
    }
    stationary_flat(k, &trans.concat())
}

pub(crate) fn stationary_flat<T: Scalar>(k: usize, trans: &[T]) -> Result<StationaryDist<T>> {
    if k == 1 {
        return Ok(StationaryDist { mu: vec![T::one()] });
    }
    // a[r][c] with augmented rhs column
    let w = k + 1;
    let mut a = vec![T::zero(); k * w];
    for r in 0..k - 1 {
        for c in 0..k {
            a[r * w + c] = trans[c * k + r] - if r == c { T::one() } else { T::zero() };
        }
    }
    for c in 0..k {
        a[(k - 1) * w + c] = T::one();
    }
    a[(k - 1) * w + k] = T::one();

    let pivot_tol = T::epsilon() * T::lit(1e3);
    for col in 0..k {
        let piv = (col..k)
            .max_by(|&x, &y| {
                a[x * w + col]
                    .abs()
                    .partial_cmp(&a[y * w + col].abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .unwrap();
        if a[piv * w + col].abs() <= pivot_tol {
            return Err(Error::NoUniqueStationary);
        }
        if piv != col {
            for c in 0..w {
                a.swap(piv * w + c, col * w + c);
            }
        }
        let p = a[col * w + col];
        for r in 0..k {
            if r != col {
                let f = a[r * w + col] / p;
                if f != T::zero() {
                    for c in col..w {
                        let v = a[col * w + c];
                        a[r * w + c] -= f * v;
                    }
                }
            }
        }
    }
    let mut mu: Vec<T> = (0..k).map(|i| a[i * w + k] / a[i * w + i]).collect();
    let neg_tol = T::lit(1e-9);
    if mu.iter().any(|&m| m < -neg_tol || !m.is_finite()) {
        return Err(Error::NoUniqueStationary);
    }
    for m in mu.iter_mut() {
        if *m < T::zero() {
            *m = T::zero();
        }
    }
    let s: T = mu.iter().copied().sum();
    mu.iter_mut().for_each(|m| *m /= s);
    Ok(StationaryDist { mu })
}

pub(crate) fn check_obs<T: Scalar>(obs: &[T]) -> Result<()> {
    if obs.is_empty() {
        return Err(Error::InvalidInput("observation series is empty".into()));
    }
    if let Some(i) = obs.iter().position(|y| !y.is_finite()) {
        return Err(Error::NonFiniteObservation(i));
    }
    Ok(())
}

/// `log p(y_{1:n} | params)` by the scaled forward recursion.
pub fn log_likelihood<T: Scalar>(params: &HmmParams<T>, obs: &[T]) -> Result<T> {
    check_obs(obs)?;
    let mu = params.stationary()?.mu;
    Ok(log_likelihood_unchecked(params, &mu, obs))
}

pub(crate) fn log_likelihood_unchecked<T: Scalar>(params: &HmmParams<T>, init: &[T], obs: &[T]) -> T {
    let k = params.k;
    let consts = params.emission_consts();
    let means = &params.means;
    let mut logf = vec![T::zero(); k];
    let mut alpha = vec![T::zero(); k];
    let mut pred = init.to_vec();
    let mut total = T::zero();
    for (i, &y) in obs.iter().enumerate() {
        if i > 0 {
            for p in pred.iter_mut() {
                *p = T::zero();
            }
            for (from, &a) in alpha.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let row = &params.trans[from * k..(from + 1) * k];
                for j in 0..k {
                    pred[j] += a * row[j];
                }
            }
        }
        total += scaled_step(&consts, means, y, &pred, &mut logf, &mut alpha);
    }
    total
}

/// One forward step: writes normalised `alpha` and returns the log of the normaliser.
#[inline]
fn scaled_step<T: Scalar>(
    consts: &EmissionConsts<T>,
    means: &[T],
    y: T,
    pred: &[T],
    logf: &mut [T],
    alpha: &mut [T],
) -> T {
    let m = consts.fill(means, y, logf);
    let mut c = T::zero();
    for j in 0..alpha.len() {
        let a = pred[j] * (logf[j] - m).exp();
        alpha[j] = a;
        c += a;
    }
    if c > T::min_positive_value() {
        let inv = T::one() / c;
        alpha.iter_mut().for_each(|a| *a *= inv);
        return c.ln() + m;
    }
    // Predicted mass sits only on states whose emission density underflows.
    let mut lmax = T::neg_infinity();
    for j in 0..alpha.len() {
        logf[j] = pred[j].ln() + logf[j];
        if logf[j] > lmax {
            lmax = logf[j];
        }
    }
    let mut s = T::zero();
    for j in 0..alpha.len() {
        alpha[j] = (logf[j] - lmax).exp();
        s += alpha[j];
    }
    alpha.iter_mut().for_each(|a| *a /= s);
    lmax + s.ln()
}

/// Log of the complete-data density `p(y, x | params)` for a zero-based path.
pub fn joint_log_density<T: Scalar>(params: &HmmParams<T>, path: &[usize], obs: &[T]) -> Result<T> {
    if path.len() != obs.len() {
        return Err(Error::InvalidInput("path and observations differ in length".into()));
    }
    check_obs(obs)?;
    let k = params.k;
    if let Some(&bad) = path.iter().find(|&&x| x >= k) {
        return Err(Error::InvalidInput(format!("state index {bad} out of range for k = {k}")));
    }
    let mu = params.stationary()?.mu;
    // sum over the unobserved X_0
    let init: T = (0..k).map(|s| mu[s] * params.q(s, path[0])).sum();
    let mut lp = init.ln() + params.emission_log_density(path[0], obs[0]);
    for i in 1..obs.len() {
        lp += params.q(path[i - 1], path[i]).ln() + params.emission_log_density(path[i], obs[i]);
    }
    Ok(lp)
}

/// Draws a trajectory of length `n`, deterministic in `seed`.
pub fn simulate<T: Scalar>(params: &HmmParams<T>, n: usize, seed: u64) -> Result<Trajectory<T>> {
    let mut rng = rng_from(seed);
    simulate_with(params, n, &mut rng)
}

pub fn simulate_with<T: Scalar, R: Rng + ?Sized>(
    params: &HmmParams<T>,
    n: usize,
    rng: &mut R,
) -> Result<Trajectory<T>> {
    if n == 0 {
        return Err(Error::InvalidInput("trajectory length must be at least 1".into()));
    }
    let mu = params.stationary()?.mu;
    let mut state = sample_categorical(&mu, rng);
    let mut obs = Vec::with_capacity(n);
    let mut hidden = Vec::with_capacity(n);
    for _ in 0..n {
        state = sample_categorical(params.row(state), rng);
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        let y = params.means[state].as_f64() + params.variances[state].as_f64().sqrt() * z;
        obs.push(T::lit(y));
        hidden.push(state);
    }
    Ok(Trajectory {
        obs,
        hidden: Some(hidden),
    })
}

pub(crate) fn sample_categorical<T: Scalar, R: Rng + ?Sized>(probs: &[T], rng: &mut R) -> usize {
    let total: f64 = probs.iter().map(|p| p.as_f64()).sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p.as_f64();
        if u < acc {
            return i;
        }
    }
    // rounding at the top end
    probs
        .iter()
        .rposition(|p| *p > T::zero())
        .unwrap_or(probs.len() - 1)
}

/// Normalised forward variables for every time step, row-major `n x k`.
pub(crate) fn forward_table<T: Scalar>(params: &HmmParams<T>, init: &[T], obs: &[T]) -> Vec<T> {
    let k = params.k;
    let n = obs.len();
    let consts = params.emission_consts();
    let mut alpha = vec![T::zero(); n * k];
    let mut logf = vec![T::zero(); k];
    let mut pred = init.to_vec();
    for i in 0..n {
        if i > 0 {
            pred.iter_mut().for_each(|p| *p = T::zero());
            let prev = &alpha[(i - 1) * k..i * k];
            for (from, &a) in prev.iter().enumerate() {
                let row = params.row(from);
                for j in 0..k {
                    pred[j] += a * row[j];
                }
            }
        }
        let (_, cur) = alpha.split_at_mut(i * k);
        scaled_step(&consts, &params.means, obs[i], &pred, &mut logf, &mut cur[..k]);
    }
    alpha
}

/// One exact draw of the hidden path from `p(x | y, params)`.
pub fn ffbs_sample_path<T: Scalar, R: Rng + ?Sized>(
    params: &HmmParams<T>,
    obs: &[T],
    rng: &mut R,
) -> Result<Vec<usize>> {
    check_obs(obs)?;
    let mu = params.stationary()?.mu;
    Ok(ffbs_unchecked(params, &mu, obs, rng))
}

pub(crate) fn ffbs_unchecked<T: Scalar, R: Rng + ?Sized>(
    params: &HmmParams<T>,
    init: &[T],
    obs: &[T],
    rng: &mut R,
) -> Vec<usize> {
    let k = params.k;
    let n = obs.len();
    if k == 1 {
        return vec![0; n];
    }
    let alpha = forward_table(params, init, obs);
    let mut path = vec![0usize; n];
    path[n - 1] = sample_categorical(&alpha[(n - 1) * k..n * k], rng);
    let mut w = vec![T::zero(); k];
    for i in (0..n - 1).rev() {
        let next = path[i + 1];
        let a = &alpha[i * k..(i + 1) * k];
        for j in 0..k {
            w[j] = a[j] * params.q(j, next);
        }
        path[i] = sample_categorical(&w, rng);
    }
    path
}

/// Posterior state marginals and expected transition counts.
pub struct Smoothed<T> {
    /// `gamma[i * k + j] = P(x_i = j | y)`.
    pub gamma: Vec<T>,
    /// Expected number of `j -> l` transitions between observed steps.
    pub trans_counts: Vec<T>,
    pub loglik: T,
}

/// Forward-backward smoothing.
pub fn smooth<T: Scalar>(params: &HmmParams<T>, obs: &[T]) -> Result<Smoothed<T>> {
    check_obs(obs)?;
    let mu = params.stationary()?.mu;
    Ok(smooth_unchecked(params, &mu, obs))
}

pub(crate) fn smooth_unchecked<T: Scalar>(params: &HmmParams<T>, init: &[T], obs: &[T]) -> Smoothed<T> {
    let k = params.k;
    let n = obs.len();
    let consts = params.emission_consts();
    // scaled emissions e[i][j] = exp(log f - max_i), and the per-step normaliser
    let mut e = vec![T::zero(); n * k];
    let mut logf = vec![T::zero(); k];
    let mut alpha = vec![T::zero(); n * k];
    let mut c = vec![T::zero(); n];
    let mut loglik = T::zero();
    let mut pred = init.to_vec();
    let tiny = T::min_positive_value();
    for i in 0..n {
        if i > 0 {
            pred.iter_mut().for_each(|p| *p = T::zero());
            for from in 0..k {
                let a = alpha[(i - 1) * k + from];
                let row = params.row(from);
                for j in 0..k {
                    pred[j] += a * row[j];
                }
            }
        }
        let m = consts.fill(&params.means, obs[i], &mut logf);
        let mut s = T::zero();
        for j in 0..k {
            let ej = (logf[j] - m).exp();
            e[i * k + j] = ej;
            let a = pred[j] * ej;
            alpha[i * k + j] = a;
            s += a;
        }
        let s = if s > tiny { s } else { tiny };
        c[i] = s;
        for j in 0..k {
            alpha[i * k + j] /= s;
        }
        loglik += s.ln() + m;
    }

    let mut beta = vec![T::one(); k];
    let mut next_beta = vec![T::zero(); k];
    let mut gamma = vec![T::zero(); n * k];
    let mut trans_counts = vec![T::zero(); k * k];
    gamma[(n - 1) * k..].copy_from_slice(&alpha[(n - 1) * k..]);
    let mut eb = vec![T::zero(); k];
    for i in (0..n - 1).rev() {
        for l in 0..k {
            eb[l] = e[(i + 1) * k + l] * beta[l] / c[i + 1];
        }
        for j in 0..k {
            let row = params.row(j);
            let aj = alpha[i * k + j];
            let mut b = T::zero();
            for l in 0..k {
                let t = row[l] * eb[l];
                b += t;
                trans_counts[j * k + l] += aj * t;
            }
            next_beta[j] = b;
        }
        std::mem::swap(&mut beta, &mut next_beta);
        let mut s = T::zero();
        for j in 0..k {
            let g = alpha[i * k + j] * beta[j];
            gamma[i * k + j] = g;
            s += g;
        }
        for j in 0..k {
            gamma[i * k + j] /= s;
        }
    }
    Smoothed {
        gamma,
        trans_counts,
        loglik,
    }
}
