//! Choice of the number of states by maximal estimated marginal likelihood, and a probe of how
//! the log marginal-likelihood ratios scale with the sample size.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::{simulate, HmmParams};
use crate::ncest::{estimate_marginal_kind, EstimatorConfig, MarginalEstimate};
use crate::prior::PriorSpec;
use crate::reparam::ModelKind;
use crate::stats::{derive_seed, linear_fit, mean, variance, LinearFit};

/// Result for one candidate K: an estimate or the reason it failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KOutcome {
    pub k: usize,
    pub prior: Option<PriorSpec>,
    pub estimate: Option<MarginalEstimate>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Selected K after the parsimony rule.
    pub k_hat: usize,
    /// K with the largest estimate.
    pub k_argmax: usize,
    /// Candidates whose estimate is within two combined standard errors of the best.
    pub indistinguishable: Vec<usize>,
    pub model: ModelKind,
    pub per_k: Vec<KOutcome>,
}

impl Selection {
    pub fn log_ml(&self, k: usize) -> Option<f64> {
        self.per_k
            .iter()
            .find(|o| o.k == k)
            .and_then(|o| o.estimate.as_ref())
            .map(|e| e.log_ml)
    }
}

/// Applies the decision rule to `(k, log_ml, log_se)` triples: take the largest estimate, then
/// the smallest K whose estimate is within `2 * sqrt(se^2 + se_best^2)` of it.
/// Returns `(k_hat, k_argmax, indistinguishable)`.
pub fn decide(candidates: &[(usize, f64, f64)]) -> Option<(usize, usize, Vec<usize>)> {
    let best = candidates
        .iter()
        .filter(|c| c.1.is_finite())
        .fold(None::<&(usize, f64, f64)>, |acc, c| match acc {
            Some(b) if b.1 > c.1 || (b.1 == c.1 && b.0 < c.0) => Some(b),
            _ => Some(c),
        })?;
    let mut close: Vec<usize> = candidates
        .iter()
        .filter(|c| c.1.is_finite() && c.1 >= best.1 - 2.0 * (c.2 * c.2 + best.2 * best.2).sqrt())
        .map(|c| c.0)
        .collect();
    close.sort_unstable();
    let k_hat = close[0];
    let indistinguishable = if close.len() > 1 { close } else { Vec::new() };
    Some((k_hat, best.0, indistinguishable))
}

/// Runs the estimation pipeline for K = 1..=k_max with a prior rebuilt for every K.
pub fn select_k_with<F>(obs: &[f64], k_max: usize, prior_builder: F, cfg: &EstimatorConfig, kind: ModelKind, seed: u64) -> Result<Selection>
where
    F: Fn(&[f64], usize) -> Result<PriorSpec> + Sync,
{
    if k_max == 0 {
        return Err(Error::InvalidInput("k_max must be at least 1".into()));
    }
    crate::hmm::check_obs(obs)?;
    let per_k: Vec<KOutcome> = (1..=k_max)
        .into_par_iter()
        .map(|k| {
            let prior = match prior_builder(obs, k) {
                Ok(p) => p,
                Err(e) => return KOutcome { k, prior: None, estimate: None, error: Some(e.to_string()) },
            };
            match estimate_marginal_kind(obs, k, &prior, cfg, kind, derive_seed(seed, &[k as u64])) {
                Ok(est) => KOutcome { k, prior: Some(prior), estimate: Some(est), error: None },
                Err(e) => {
                    log::warn!("K = {k}: {e}");
                    KOutcome { k, prior: Some(prior), estimate: None, error: Some(e.to_string()) }
                }
            }
        })
        .collect();
    let cands: Vec<(usize, f64, f64)> = per_k
        .iter()
        .filter_map(|o| o.estimate.as_ref().map(|e| (o.k, e.log_ml, e.estimate.log_se)))
        .collect();
    let (k_hat, k_argmax, indistinguishable) = decide(&cands).ok_or(Error::NoCandidateSucceeded)?;
    Ok(Selection { k_hat, k_argmax, indistinguishable, model: kind, per_k })
}

/// HMM selection with the default data-driven prior.
pub fn select_k(obs: &[f64], k_max: usize, cfg: &EstimatorConfig, seed: u64) -> Result<Selection> {
    select_k_with(obs, k_max, PriorSpec::default_for, cfg, ModelKind::Hmm, seed)
}

/// Selection under the finite-mixture model (no state dependence).
pub fn select_k_mixture(obs: &[f64], k_max: usize, cfg: &EstimatorConfig, seed: u64) -> Result<Selection> {
    select_k_with(obs, k_max, PriorSpec::default_for, cfg, ModelKind::Mixture, seed)
}

/// Mean log ratio `log p_K - log p_{K*}` at one sample size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioPoint {
    pub n: usize,
    pub k: usize,
    pub mean_log_ratio: f64,
    pub se: f64,
    pub reps_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub k: usize,
    /// `"n"` for under-fitted K, `"log_n"` for over-fitted K.
    pub regressor: String,
    pub fit: LinearFit,
    /// Predicted slope for over-fitted K: `-(K - K*) d / 2`.
    pub predicted_slope: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub k_star: usize,
    pub n_grid: Vec<usize>,
    pub reps: usize,
    pub points: Vec<RatioPoint>,
    pub fits: Vec<RateFit>,
    pub failures: usize,
}

/// Simulates `reps` data sets from `params` at every `n` in `n_grid`, estimates `log p_K` for
/// every K in `ks` (which must contain K*) and regresses the mean log ratios against `n`
/// (under-fit) or `log n` (over-fit). Replications where any K fails are dropped.
pub fn consistency_probe(params: &HmmParams<f64>, ks: &[usize], n_grid: &[usize], reps: usize, cfg: &EstimatorConfig, seed: u64) -> Result<ProbeReport> {
    let k_star = params.k();
    if !ks.contains(&k_star) || ks.contains(&0) {
        return Err(Error::InvalidInput("candidate list must contain the true K and no zero".into()));
    }
    if n_grid.windows(2).any(|w| w[0] >= w[1]) || n_grid.is_empty() || reps == 0 {
        return Err(Error::InvalidInput("n_grid must be non-empty and increasing, reps >= 1".into()));
    }
    let mut points = Vec::new();
    let mut failures = 0;
    for &n in n_grid {
        let runs: Vec<Option<Vec<f64>>> = (0..reps)
            .into_par_iter()
            .map(|rep| {
                let s = derive_seed(seed, &[n as u64, rep as u64]);
                let t = simulate(params, n, derive_seed(s, &[0])).ok()?;
                ks.iter()
                    .map(|&k| {
                        let prior = PriorSpec::default_for(&t.obs, k).ok()?;
                        estimate_marginal_kind(&t.obs, k, &prior, cfg, ModelKind::Hmm, derive_seed(s, &[k as u64]))
                            .ok()
                            .map(|e| e.log_ml)
                    })
                    .collect()
            })
            .collect();
        let ok: Vec<Vec<f64>> = runs.into_iter().flatten().collect();
        failures += reps - ok.len();
        let star = ks.iter().position(|&k| k == k_star).expect("checked above");
        for (i, &k) in ks.iter().enumerate() {
            let ratios: Vec<f64> = ok.iter().map(|r| r[i] - r[star]).collect();
            let se = if ratios.len() > 1 { (variance(&ratios) / ratios.len() as f64).sqrt() } else { f64::NAN };
            points.push(RatioPoint {
                n,
                k,
                mean_log_ratio: if ratios.is_empty() { f64::NAN } else { mean(&ratios) },
                se,
                reps_used: ratios.len(),
            });
        }
    }
    let d = 2.0;
    let fits = ks
        .iter()
        .filter(|&&k| k != k_star)
        .map(|&k| {
            let pts: Vec<&RatioPoint> = points.iter().filter(|p| p.k == k).collect();
            let y: Vec<f64> = pts.iter().map(|p| p.mean_log_ratio).collect();
            if k < k_star {
                let x: Vec<f64> = pts.iter().map(|p| p.n as f64).collect();
                RateFit { k, regressor: "n".into(), fit: linear_fit(&x, &y), predicted_slope: None }
            } else {
                let x: Vec<f64> = pts.iter().map(|p| (p.n as f64).ln()).collect();
                RateFit {
                    k,
                    regressor: "log_n".into(),
                    fit: linear_fit(&x, &y),
                    predicted_slope: Some(-((k - k_star) as f64) * d / 2.0),
                }
            }
        })
        .collect();
    Ok(ProbeReport { k_star, n_grid: n_grid.to_vec(), reps, points, fits, failures })
}
