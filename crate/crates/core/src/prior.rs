//! Conjugate-style prior on HMM parameters: independent flat-ish Dirichlet rows, Normal means
//! and scaled-inverse-chi-square variances.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::hmm::{log_likelihood, HmmParams};
use crate::reparam::ModelKind;
use crate::stats::{normal_logpdf, quantile, sorted_copy, variance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    /// Common Dirichlet concentration of every transition row.
    pub dirichlet_alpha: f64,
    /// Prior location of each state mean.
    pub mean_locs: Vec<f64>,
    /// Prior standard deviation of each state mean.
    pub mean_sd: f64,
    /// Degrees of freedom of the scaled-inverse-chi-square variance prior.
    pub var_df: f64,
    /// Scale `s` of the variance prior (the density is parameterised by `s^2`).
    pub var_scale: f64,
}

impl PriorSpec {
    pub const DEFAULT_ALPHA: f64 = 1.0;
    pub const DEFAULT_MEAN_SD: f64 = 100.0;
    pub const DEFAULT_VAR_DF: f64 = 3.0;

    /// Data-dependent defaults: mean locations at K equally spaced quantile levels in
    /// [0.05, 0.95] (the median when K = 1) and `s = IQR / (2K)`.
    pub fn default_for(obs: &[f64], k: usize) -> Result<Self> {
        if obs.is_empty() || k == 0 {
            return Err(Error::InvalidInput("need data and k >= 1 for default prior".into()));
        }
        let sorted = sorted_copy(obs);
        let mean_locs = (0..k)
            .map(|i| {
                let level = if k == 1 {
                    0.5
                } else {
                    0.05 + 0.9 * i as f64 / (k - 1) as f64
                };
                quantile(&sorted, level)
            })
            .collect();
        let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
        let mut var_scale = iqr / (2.0 * k as f64);
        if !(var_scale > 0.0) {
            // degenerate spread: fall back to the standard deviation, then to 1
            var_scale = variance(obs).sqrt() / (2.0 * k as f64);
            if !(var_scale > 0.0) {
                var_scale = 1.0;
            }
        }
        Ok(PriorSpec {
            dirichlet_alpha: Self::DEFAULT_ALPHA,
            mean_locs,
            mean_sd: Self::DEFAULT_MEAN_SD,
            var_df: Self::DEFAULT_VAR_DF,
            var_scale,
        })
    }

    pub fn k(&self) -> usize {
        self.mean_locs.len()
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        let pos = |x: f64| x.is_finite() && x > 0.0;
        if self.mean_locs.len() != k {
            return Err(Error::InvalidInput(format!(
                "prior has {} mean locations, model has {k} states",
                self.mean_locs.len()
            )));
        }
        if !pos(self.dirichlet_alpha) || !pos(self.mean_sd) || !pos(self.var_df) || !pos(self.var_scale) {
            return Err(Error::InvalidInput("prior hyper-parameters must be positive".into()));
        }
        if self.mean_locs.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidInput("prior mean locations must be finite".into()));
        }
        Ok(())
    }

    /// Same prior after mapping data `y -> c * y`.
    pub fn scaled(&self, c: f64) -> Self {
        PriorSpec {
            mean_locs: self.mean_locs.iter().map(|m| m * c).collect(),
            mean_sd: self.mean_sd * c,
            var_scale: self.var_scale * c,
            ..self.clone()
        }
    }
}

/// Log density of a symmetric Dirichlet(alpha) at a probability vector; `-inf` on the boundary.
pub fn log_dirichlet(row: &[f64], alpha: f64) -> f64 {
    let k = row.len() as f64;
    if row.iter().any(|&q| !(q > 0.0)) {
        return f64::NEG_INFINITY;
    }
    let norm = ln_gamma(k * alpha) - k * ln_gamma(alpha);
    if alpha == 1.0 {
        return norm;
    }
    norm + (alpha - 1.0) * row.iter().map(|q| q.ln()).sum::<f64>()
}

/// Log density of Scaled-Inv-chi^2(df, scale^2) at `var`; `-inf` for non-positive `var`.
pub fn log_scaled_inv_chisq(var: f64, df: f64, scale: f64) -> f64 {
    if !(var > 0.0) {
        return f64::NEG_INFINITY;
    }
    let h = df / 2.0;
    h * h.ln() - ln_gamma(h) + df * scale.ln() - (h + 1.0) * var.ln() - df * scale * scale / (2.0 * var)
}

/// Prior terms that do not depend on how states are labelled: transition rows and variances.
pub fn log_prior_label_free(params: &HmmParams<f64>, prior: &PriorSpec, kind: ModelKind) -> f64 {
    let rows: f64 = params
        .rows()
        .take(kind.simplex_rows(params.k()))
        .map(|r| log_dirichlet(r, prior.dirichlet_alpha))
        .sum();
    let vars: f64 = params
        .variances()
        .iter()
        .map(|&v| log_scaled_inv_chisq(v, prior.var_df, prior.var_scale))
        .sum();
    rows + vars
}

/// `log p_0(params)`. Boundary points (zero transition entry) give `-inf`.
pub fn log_prior(params: &HmmParams<f64>, prior: &PriorSpec, kind: ModelKind) -> Result<f64> {
    prior.validate(params.k())?;
    let tau2 = prior.mean_sd * prior.mean_sd;
    let means: f64 = params
        .means()
        .iter()
        .zip(&prior.mean_locs)
        .map(|(&m, &m0)| normal_logpdf(m, m0, tau2))
        .sum();
    Ok(log_prior_label_free(params, prior, kind) + means)
}

/// Prior averaged over all K! relabelings of the states, in log space.
///
/// Only the mean block depends on labels, so this is the label-free part plus
/// `log(perm(A) / K!)` with `A[s][j] = N(mu_j; m0_s, sd^2)`.
pub fn log_prior_symmetrized(params: &HmmParams<f64>, prior: &PriorSpec, kind: ModelKind) -> f64 {
    let k = params.k();
    let tau2 = prior.mean_sd * prior.mean_sd;
    let logs: Vec<f64> = (0..k)
        .flat_map(|s| {
            params
                .means()
                .iter()
                .map(move |&m| normal_logpdf(m, prior.mean_locs[s], tau2))
        })
        .collect();
    log_prior_label_free(params, prior, kind) + log_permanent(k, &logs) - crate::stats::ln_factorial(k)
}

/// Log permanent of a non-negative k x k matrix given entrywise logs, by dynamic programming
/// over subsets of columns (all terms positive, no cancellation).
pub fn log_permanent(k: usize, log_a: &[f64]) -> f64 {
    assert_eq!(log_a.len(), k * k);
    assert!(k <= 20, "permanent limited to k <= 20");
    // scale each row by its max so the DP works with plain products
    let row_max: Vec<f64> = (0..k)
        .map(|r| log_a[r * k..(r + 1) * k].iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    if row_max.iter().any(|m| *m == f64::NEG_INFINITY) {
        return f64::NEG_INFINITY;
    }
    let a: Vec<f64> = (0..k * k).map(|i| (log_a[i] - row_max[i / k]).exp()).collect();
    let mut f = vec![0.0f64; 1 << k];
    f[0] = 1.0;
    for mask in 1usize..(1 << k) {
        let row = mask.count_ones() as usize - 1;
        let mut s = 0.0;
        let mut bits = mask;
        while bits != 0 {
            let j = bits.trailing_zeros() as usize;
            s += f[mask & !(1 << j)] * a[row * k + j];
            bits &= bits - 1;
        }
        f[mask] = s;
    }
    f[(1 << k) - 1].ln() + row_max.iter().sum::<f64>()
}

/// `log p(y | params) + log p_0(params)`.
pub fn log_joint(params: &HmmParams<f64>, obs: &[f64], prior: &PriorSpec, kind: ModelKind) -> Result<f64> {
    let lp = log_prior(params, prior, kind)?;
    let ll = match kind {
        ModelKind::Hmm => log_likelihood(params, obs)?,
        ModelKind::Mixture => mixture_log_likelihood(params, obs)?,
    };
    Ok(ll + lp)
}

/// Finite-mixture likelihood `prod_i sum_k s_k f(y_i | theta_k)` with `s` the first row.
pub fn mixture_log_likelihood(params: &HmmParams<f64>, obs: &[f64]) -> Result<f64> {
    crate::hmm::check_obs(obs)?;
    Ok(mixture_log_likelihood_unchecked(params, obs))
}

pub(crate) fn mixture_log_likelihood_unchecked(params: &HmmParams<f64>, obs: &[f64]) -> f64 {
    let k = params.k();
    let w = params.row(0);
    let consts = params.emission_consts();
    let mut logf = vec![0.0; k];
    let mut total = 0.0;
    for &y in obs {
        let m = consts.fill(params.means(), y, &mut logf);
        let s: f64 = (0..k).map(|j| w[j] * (logf[j] - m).exp()).sum();
        total += s.ln() + m;
    }
    total
}
