//! Maximum-likelihood fitting by Baum-Welch EM with random restarts, and BIC selection.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::{check_obs, smooth_unchecked, stationary_flat, HmmParams};
use crate::scalar::Scalar;
use crate::stats::{derive_seed, quantile, rng_from};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 500;
pub const DEFAULT_RESTARTS: usize = 50;
/// Variance floor relative to the sample variance of the data.
pub const VAR_FLOOR_REL: f64 = 1e-8;

#[derive(Debug, Clone, Serialize)]
#[serde(bound(serialize = "T: Scalar + Serialize"))]
pub struct EmResult<T> {
    pub params: HmmParams<T>,
    pub loglik: T,
    /// Number of M-steps performed.
    pub iterations: usize,
    pub converged: bool,
    pub restart_index: usize,
    /// Log-likelihood of the initial point followed by one entry per M-step.
    pub trace: Vec<T>,
}

/// Sample variance with divisor n.
fn population_variance<T: Scalar>(obs: &[T]) -> T {
    let n = T::from_usize_lossy(obs.len());
    let m = obs.iter().copied().sum::<T>() / n;
    obs.iter().map(|&y| (y - m) * (y - m)).sum::<T>() / n
}

/// Baum-Welch EM from `init`, stopping when the log-likelihood improves by less than `tol`
/// or after `max_iter` M-steps.
pub fn baum_welch<T: Scalar>(
    obs: &[T],
    init: HmmParams<T>,
    tol: f64,
    max_iter: usize,
) -> Result<EmResult<T>> {
    check_obs(obs)?;
    if !(tol > 0.0) {
        return Err(Error::InvalidInput("tol must be positive".into()));
    }
    let floor = population_variance(obs) * T::lit(VAR_FLOOR_REL);
    let tol = T::lit(tol);

    let mut params = init;
    let mut mu = params.stationary()?.mu;
    let mut stats = smooth_unchecked(&params, &mu, obs);
    let mut ll = stats.loglik;
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        let next = m_step(obs, &params, &stats, floor)?;
        iterations += 1;
        mu = next.stationary()?.mu;
        stats = smooth_unchecked(&next, &mu, obs);
        params = next;
        let improvement = stats.loglik - ll;
        ll = stats.loglik;
        trace.push(ll);
        if improvement < tol {
            converged = true;
            break;
        }
    }
    Ok(EmResult {
        params,
        loglik: ll,
        iterations,
        converged,
        restart_index: 0,
        trace,
    })
}

fn m_step<T: Scalar>(
    obs: &[T],
    old: &HmmParams<T>,
    stats: &crate::hmm::Smoothed<T>,
    floor: T,
) -> Result<HmmParams<T>> {
    let k = old.k();
    let n = obs.len();
    let g = &stats.gamma;

    let mut means = old.means().to_vec();
    let mut variances = old.variances().to_vec();
    for j in 0..k {
        let w: T = (0..n).map(|i| g[i * k + j]).sum();
        if w <= T::zero() {
            continue;
        }
        let m = (0..n).map(|i| g[i * k + j] * obs[i]).sum::<T>() / w;
        let v = (0..n)
            .map(|i| {
                let d = obs[i] - m;
                g[i * k + j] * d * d
            })
            .sum::<T>()
            / w;
        if !(v >= floor) || v < T::lit(T::MIN_VARIANCE) {
            return Err(Error::VarianceCollapse {
                state: j,
                floor: floor.as_f64(),
            });
        }
        means[j] = m;
        variances[j] = v;
    }

    let trans = if k == 1 {
        vec![T::one()]
    } else {
        update_transitions(old, &stats.trans_counts, &g[..k])
    };
    HmmParams::from_flat(k, trans, means, variances)
}

/// Transition update of a generalized EM step. The expected complete-data log-likelihood
/// carries the stationary initial factor `sum_k gamma_1(k) log mu_k(Q)`, so normalised counts
/// are only a candidate; the step is shortened towards the current matrix until the objective
/// does not decrease.
fn update_transitions<T: Scalar>(old: &HmmParams<T>, counts: &[T], gamma1: &[T]) -> Vec<T> {
    let k = old.k();
    let mut cand = old.trans().to_vec();
    for j in 0..k {
        let row = &counts[j * k..(j + 1) * k];
        let s: T = row.iter().copied().sum();
        if s > T::zero() {
            for l in 0..k {
                cand[j * k + l] = row[l] / s;
            }
        }
    }
    let objective = |q: &[T]| -> T {
        let mut f = T::zero();
        for (c, &p) in counts.iter().zip(q) {
            if *c > T::zero() {
                f += *c * p.ln();
            }
        }
        match stationary_flat(k, q) {
            Ok(st) => {
                for (g, m) in gamma1.iter().zip(&st.mu) {
                    if *g > T::zero() {
                        f += *g * m.ln();
                    }
                }
                f
            }
            Err(_) => T::neg_infinity(),
        }
    };
    let base = objective(old.trans());
    let mut t = T::one();
    for _ in 0..40 {
        let q: Vec<T> = old
            .trans()
            .iter()
            .zip(&cand)
            .map(|(&o, &c)| o + t * (c - o))
            .collect();
        let f = objective(&q);
        if f >= base && !f.is_nan() {
            return renormalize(q, k);
        }
        t *= T::lit(0.5);
    }
    old.trans().to_vec()
}

fn renormalize<T: Scalar>(mut q: Vec<T>, k: usize) -> Vec<T> {
    for row in q.chunks_mut(k) {
        let s: T = row.iter().copied().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    q
}

/// Random starting point: means at K random order statistics of the data, variances
/// `(IQR / 2K)^2`, rows drawn from a flat Dirichlet.
pub fn random_init<T: Scalar, R: Rng + ?Sized>(obs: &[T], k: usize, rng: &mut R) -> Result<HmmParams<T>> {
    check_obs(obs)?;
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    let data: Vec<f64> = obs.iter().map(|y| y.as_f64()).collect();
    let sorted = crate::stats::sorted_copy(&data);
    let n = sorted.len();
    let mut idx: Vec<usize> = if k <= n {
        rand::seq::index::sample(rng, n, k).into_vec()
    } else {
        (0..k).map(|_| rng.random_range(0..n)).collect()
    };
    idx.sort_unstable();
    let means: Vec<T> = idx.iter().map(|&i| T::lit(sorted[i])).collect();

    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let mut v = (iqr / (2.0 * k as f64)).powi(2);
    if !(v > 0.0) {
        v = population_variance(&data).max(1.0);
    }
    let variances = vec![T::lit(v); k];

    let mut trans = Vec::with_capacity(k * k);
    for _ in 0..k {
        let row: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(rand_distr::Exp1)).collect();
        let s: f64 = row.iter().sum();
        trans.extend(row.iter().map(|x| T::lit(x / s)));
    }
    HmmParams::from_flat(k, trans, means, variances)
}

/// Starting point used by restart `index` of [`multistart_fit`].
pub fn restart_init<T: Scalar>(obs: &[T], k: usize, seed: u64, index: usize) -> Result<HmmParams<T>> {
    let mut rng = rng_from(derive_seed(seed, &[index as u64]));
    random_init(obs, k, &mut rng)
}

/// Runs Baum-Welch from `restarts` random starts and keeps the best local maximum; ties go
/// to the lowest restart index.
pub fn multistart_fit<T: Scalar>(obs: &[T], k: usize, restarts: usize, seed: u64) -> Result<EmResult<T>> {
    check_obs(obs)?;
    if restarts == 0 {
        return Err(Error::InvalidInput("restarts must be at least 1".into()));
    }
    let fits: Vec<Option<EmResult<T>>> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let init = restart_init(obs, k, seed, r).ok()?;
            let mut fit = baum_welch(obs, init, DEFAULT_TOL, DEFAULT_MAX_ITER).ok()?;
            fit.restart_index = r;
            Some(fit)
        })
        .collect();
    let failed = fits.iter().filter(|f| f.is_none()).count();
    if failed > 0 {
        log::debug!("k = {k}: {failed} of {restarts} restarts failed");
    }
    fits.into_iter()
        .flatten()
        .fold(None, |best: Option<EmResult<T>>, f| match best {
            Some(b) if b.loglik >= f.loglik => Some(b),
            _ => Some(f),
        })
        .ok_or(Error::AllRestartsFailed(restarts))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BicScore {
    pub k: usize,
    pub bic: f64,
    /// `K (K + d - 1) log n`.
    pub penalty: f64,
    pub best_loglik: f64,
}

pub fn bic_penalty(k: usize, d: usize, n: usize) -> f64 {
    (k * (k + d - 1)) as f64 * (n as f64).ln()
}

pub fn bic_score(k: usize, d: usize, n: usize, loglik: f64) -> BicScore {
    let penalty = bic_penalty(k, d, n);
    BicScore {
        k,
        bic: -2.0 * loglik + penalty,
        penalty,
        best_loglik: loglik,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BicSelection {
    pub k_hat: usize,
    pub scores: Vec<BicScore>,
}

/// Fits every K in `k_min..=k_max` and returns the K of smallest BIC.
pub fn bic_select(
    obs: &[f64],
    k_min: usize,
    k_max: usize,
    d: usize,
    restarts: usize,
    seed: u64,
) -> Result<BicSelection> {
    if k_min == 0 || k_min > k_max {
        return Err(Error::InvalidInput("require 1 <= k_min <= k_max".into()));
    }
    let n = obs.len();
    let scores = (k_min..=k_max)
        .map(|k| {
            let fit = multistart_fit(obs, k, restarts, derive_seed(seed, &[k as u64]))?;
            Ok(bic_score(k, d, n, fit.loglik))
        })
        .collect::<Result<Vec<_>>>()?;
    let k_hat = scores
        .iter()
        .min_by(|a, b| a.bic.total_cmp(&b.bic))
        .map(|s| s.k)
        .expect("nonempty range");
    Ok(BicSelection { k_hat, scores })
}
