//! Locally restricted importance sampling (IS) and reciprocal importance sampling (RIS)
//! estimators of a normalizing constant, and the end-to-end marginal-likelihood pipeline for
//! one candidate number of states.
//!
//! Everything is evaluated in unconstrained coordinates, where the target is the joint density
//! times the Jacobian of the inverse map; the constant is unchanged by the change of variables.
//!
//! Label switching: the posterior is invariant under relabeling only if the prior is. The
//! HMM target therefore uses the prior averaged over relabelings and is restricted to the
//! region where state means are sorted, scaled by `K!`. Its integral is exactly the marginal
//! likelihood under the original prior, and sorted Gibbs draws are exact draws from it.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gibbs::{run_gibbs, GibbsConfig};
use crate::hmm::{log_likelihood_unchecked, stationary_flat, HmmParams};
use crate::impfn::{choose_region_with_support, default_components, fit_importance, ImportanceFn, Tail};
use crate::prior::{log_prior, log_prior_symmetrized, mixture_log_likelihood_unchecked, PriorSpec};
use crate::reparam::{from_constrained, log_jacobian, to_constrained, ModelKind, UnconstrainedPoint};
use crate::stats::{derive_seed, ln_factorial, log_sum_exp, quantile, sorted_copy};

/// An unnormalized log density on R^dim whose normalizing constant is to be estimated.
pub trait LogTarget: Sync {
    fn dim(&self) -> usize;

    /// Log of the unnormalized density; `-inf` outside the support.
    fn log_density(&self, u: &[f64]) -> f64;

    /// Whether `u` lies in the support. Must agree with `log_density > -inf` up to null sets.
    fn in_support(&self, u: &[f64]) -> bool {
        self.log_density(u) > f64::NEG_INFINITY
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Is,
    Ris,
}

impl Method {
    pub fn parse(s: &str) -> Option<Method> {
        match s {
            "is" => Some(Method::Is),
            "ris" => Some(Method::Ris),
            _ => None,
        }
    }

    /// Kernel used when none is configured: heavy tails for IS, Gaussian for RIS.
    pub fn default_tail(self) -> Tail {
        match self {
            Method::Is => Tail::StudentT { df: 3.0 },
            Method::Ris => Tail::Gaussian,
        }
    }
}

/// Joint density of data and HMM (or mixture) parameters in unconstrained coordinates.
#[derive(Debug, Clone)]
pub struct HmmTarget<'a> {
    obs: &'a [f64],
    k: usize,
    prior: PriorSpec,
    kind: ModelKind,
    label_symmetry: bool,
    log_k_factorial: f64,
}

impl<'a> HmmTarget<'a> {
    pub fn new(obs: &'a [f64], k: usize, prior: PriorSpec, kind: ModelKind, label_symmetry: bool) -> Result<Self> {
        crate::hmm::check_obs(obs)?;
        prior.validate(k)?;
        Ok(HmmTarget {
            obs,
            k,
            prior,
            kind,
            label_symmetry,
            log_k_factorial: ln_factorial(k),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    /// Representative of a draw inside the target's support.
    pub fn canonicalize(&self, params: &HmmParams<f64>) -> HmmParams<f64> {
        if self.label_symmetry {
            params.sorted_by_mean()
        } else {
            params.clone()
        }
    }

    pub fn to_point(&self, params: &HmmParams<f64>) -> Result<Vec<f64>> {
        Ok(from_constrained(&self.canonicalize(params), self.kind)?.vec)
    }

    fn sorted(&self, u: &[f64]) -> bool {
        let off = self.kind.simplex_rows(self.k) * (self.k - 1);
        u[off..off + self.k].windows(2).all(|w| w[0] <= w[1])
    }

    /// Log joint density at constrained parameters (no Jacobian, no support restriction).
    pub fn log_joint(&self, params: &HmmParams<f64>) -> f64 {
        let ll = match self.kind {
            ModelKind::Hmm => match stationary_flat(self.k, params.trans()) {
                Ok(st) => log_likelihood_unchecked(params, &st.mu, self.obs),
                Err(_) => return f64::NEG_INFINITY,
            },
            ModelKind::Mixture => mixture_log_likelihood_unchecked(params, self.obs),
        };
        let lp = if self.label_symmetry {
            log_prior_symmetrized(params, &self.prior, self.kind) + self.log_k_factorial
        } else {
            match log_prior(params, &self.prior, self.kind) {
                Ok(v) => v,
                Err(_) => return f64::NEG_INFINITY,
            }
        };
        let v = ll + lp;
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    }
}

impl LogTarget for HmmTarget<'_> {
    fn dim(&self) -> usize {
        self.kind.dim(self.k)
    }

    fn log_density(&self, u: &[f64]) -> f64 {
        if u.len() != self.dim() || (self.label_symmetry && !self.sorted(u)) {
            return f64::NEG_INFINITY;
        }
        let point = UnconstrainedPoint { vec: u.to_vec() };
        let params = match to_constrained(&point, self.kind, self.k) {
            Ok(p) => p,
            Err(_) => return f64::NEG_INFINITY,
        };
        self.log_joint(&params) + log_jacobian(&point, self.kind, self.k)
    }

    fn in_support(&self, u: &[f64]) -> bool {
        u.len() == self.dim() && (!self.label_symmetry || self.sorted(u))
    }
}

/// Output of one estimator run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub method: Method,
    pub tail: Tail,
    /// Log of the estimated normalizing constant.
    pub log_c: f64,
    /// Delta-method standard error of `log_c` (draws treated as independent).
    pub log_se: f64,
    /// Effective sample size of the restricted weights.
    pub ess: f64,
    /// Weighted samples inside the region.
    pub n_inside: usize,
    /// Samples the weights were averaged over.
    pub n_samples: usize,
    /// Variance of the in-region log weights.
    pub log_weight_var: f64,
    /// 5%, 50% and 95% quantiles of the in-region log weights.
    pub log_weight_quantiles: [f64; 3],
    pub region_mass: f64,
    pub region_mass_se: f64,
    /// Mass of the region as used by the estimator: the g-mass inside the support for RIS,
    /// the fraction of target draws inside the region for IS.
    pub region_fraction: f64,
}

fn region_of(g: &ImportanceFn) -> Result<&crate::impfn::Region> {
    g.region
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("importance function has no region; choose one first".into()))
}

fn summarize(method: Method, g: &ImportanceFn, lw: &[f64], total: usize, extra_rel_var: f64, region_fraction: f64) -> Estimate {
    let region = g.region.as_ref().expect("region checked by caller");
    let lse = log_sum_exp(lw);
    let lse2 = log_sum_exp(&lw.iter().map(|x| 2.0 * x).collect::<Vec<_>>());
    let ess = (2.0 * lse - lse2).exp();
    let t = total as f64;
    let rel_w = ((lse2 - t.ln() - 2.0 * (lse - t.ln())).exp() - 1.0).max(0.0) / t;
    let n = lw.len() as f64;
    let m = lw.iter().sum::<f64>() / n;
    let var = if lw.len() > 1 {
        lw.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let sorted = sorted_copy(lw);
    Estimate {
        method,
        tail: g.tail,
        log_c: f64::NAN,
        log_se: (rel_w + extra_rel_var).sqrt(),
        ess,
        n_inside: lw.len(),
        n_samples: total,
        log_weight_var: var,
        log_weight_quantiles: [quantile(&sorted, 0.05), quantile(&sorted, 0.5), quantile(&sorted, 0.95)],
        region_mass: region.mass,
        region_mass_se: region.mass_se,
        region_fraction,
    }
}

fn check_weights(lw: &[(usize, f64)]) -> Result<()> {
    if let Some(&(index, _)) = lw.iter().find(|(_, w)| w.is_nan() || *w == f64::INFINITY) {
        return Err(Error::NonFiniteWeight { index });
    }
    Ok(())
}

/// Reciprocal importance sampling over draws from the normalized target:
/// `1/C ~ (1/(N m)) sum_i g(u_i)/t(u_i) 1_Omega(u_i)`, with `m` the g-mass of the region
/// within the support.
pub fn estimate_ris<T: LogTarget + ?Sized>(draws: &[Vec<f64>], g: &ImportanceFn, target: &T) -> Result<Estimate> {
    let region = region_of(g)?;
    if draws.is_empty() {
        return Err(Error::InvalidInput("no posterior draws".into()));
    }
    let r2 = region.radius_sq;
    let lw: Vec<(usize, f64)> = draws
        .par_iter()
        .enumerate()
        .filter_map(|(i, u)| {
            let e = g.eval(u);
            (e.min_maha_sq <= r2 && target.in_support(u)).then(|| (i, e.log_density - target.log_density(u)))
        })
        .collect();
    if lw.is_empty() {
        return Err(Error::EmptyRegion);
    }
    check_weights(&lw)?;
    if region.support_mass <= 0.0 {
        return Err(Error::EmptyRegion);
    }
    let w: Vec<f64> = lw.into_iter().map(|(_, w)| w).collect();
    let n = draws.len() as f64;
    let rel_mass = (region.support_mass_se / region.support_mass).powi(2);
    let mut est = summarize(Method::Ris, g, &w, draws.len(), rel_mass, region.support_mass);
    est.log_c = -(log_sum_exp(&w) - n.ln() - region.support_mass.ln());
    Ok(est)
}

/// Importance sampling with `m` draws from `g`:
/// `C ~ (1/(m P)) sum_j t(v_j)/g(v_j) 1_Omega(v_j)`, where `P` is the fraction of target
/// draws inside the region.
pub fn estimate_is<T: LogTarget + ?Sized>(draws: &[Vec<f64>], g: &ImportanceFn, target: &T, m: usize, seed: u64) -> Result<Estimate> {
    let region = region_of(g)?;
    if m == 0 || draws.is_empty() {
        return Err(Error::InvalidInput("need posterior draws and m >= 1".into()));
    }
    let r2 = region.radius_sq;
    let inside = draws.par_iter().filter(|u| g.eval(u).min_maha_sq <= r2).count();
    if inside == 0 {
        return Err(Error::EmptyRegion);
    }
    let p_omega = inside as f64 / draws.len() as f64;
    let samples = g.sample(m, seed);
    let lw: Vec<(usize, f64)> = samples
        .par_iter()
        .enumerate()
        .filter_map(|(j, v)| {
            let e = g.eval(v);
            (e.min_maha_sq <= r2).then(|| (j, target.log_density(v) - e.log_density))
        })
        .collect();
    if lw.is_empty() {
        return Err(Error::NoImportanceDrawsInRegion);
    }
    check_weights(&lw)?;
    let w: Vec<f64> = lw.into_iter().map(|(_, w)| w).collect();
    let log_c = log_sum_exp(&w) - (m as f64).ln() - p_omega.ln();
    if !log_c.is_finite() {
        return Err(Error::NonFiniteWeight { index: 0 });
    }
    let rel_p = (1.0 - p_omega) / (draws.len() as f64 * p_omega);
    let mut est = summarize(Method::Is, g, &w, m, rel_p, p_omega);
    // zero-weight draws inside the region count toward n_inside but not the ESS
    est.log_c = log_c;
    Ok(est)
}

/// Settings of the per-K pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub method: Method,
    /// Kernel of the importance function; `None` picks the method's default.
    pub tail: Option<Tail>,
    /// Posterior draws kept after burn-in (N).
    pub n_draws: usize,
    pub n_burn: usize,
    pub thin: usize,
    /// Importance draws for IS (M).
    pub n_is: usize,
    /// Mixture components of the importance function; `None` uses `min(2K, 10)`.
    pub n_components: Option<usize>,
    /// g-draws used to size the region.
    pub region_mc: usize,
    /// Symmetrize the prior over relabelings and restrict to sorted means.
    pub label_symmetry: bool,
    pub stationary_correction: bool,
    pub init_em_iters: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            method: Method::Is,
            tail: None,
            n_draws: 5000,
            n_burn: 1000,
            thin: 1,
            n_is: 10000,
            n_components: None,
            region_mc: 20000,
            label_symmetry: true,
            stationary_correction: true,
            init_em_iters: 20,
        }
    }
}

impl EstimatorConfig {
    pub fn tail(&self) -> Tail {
        self.tail.unwrap_or_else(|| self.method.default_tail())
    }

    pub fn gibbs(&self, kind: ModelKind) -> GibbsConfig {
        GibbsConfig {
            n_iter: self.n_burn + self.n_draws * self.thin,
            n_burn: self.n_burn,
            thin: self.thin,
            init_em_iters: self.init_em_iters,
            stationary_correction: self.stationary_correction,
            model: kind,
        }
    }
}

/// Log marginal likelihood estimate for one K, with pipeline diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalEstimate {
    pub k: usize,
    pub log_ml: f64,
    pub model: ModelKind,
    #[serde(flatten)]
    pub estimate: Estimate,
    pub n_components: usize,
    pub gibbs_acceptance: BTreeMap<String, f64>,
}

/// Estimates the log marginal likelihood in the HMM model.
pub fn estimate_marginal(obs: &[f64], k: usize, prior: &PriorSpec, cfg: &EstimatorConfig, seed: u64) -> Result<MarginalEstimate> {
    estimate_marginal_kind(obs, k, prior, cfg, ModelKind::Hmm, seed)
}

/// Gibbs draws, importance function, region and estimator for one K and model kind.
pub fn estimate_marginal_kind(
    obs: &[f64],
    k: usize,
    prior: &PriorSpec,
    cfg: &EstimatorConfig,
    kind: ModelKind,
    seed: u64,
) -> Result<MarginalEstimate> {
    let target = HmmTarget::new(obs, k, prior.clone(), kind, cfg.label_symmetry).map_err(Error::at("setup"))?;
    let draws = run_gibbs(obs, k, prior, &cfg.gibbs(kind), derive_seed(seed, &[1])).map_err(Error::at("gibbs"))?;
    let points = draws
        .draws
        .iter()
        .map(|d| target.to_point(d))
        .collect::<Result<Vec<_>>>()
        .map_err(Error::at("reparam"))?;
    let tail = cfg.tail();
    let nc = cfg.n_components.unwrap_or_else(|| default_components(k));
    let g = fit_importance(&points, nc, tail, derive_seed(seed, &[2])).map_err(Error::at("impfn"))?;
    let g = choose_region_with_support(&g, cfg.region_mc, derive_seed(seed, &[3]), |u| target.in_support(u))
        .map_err(Error::at("region"))?;
    let est = match cfg.method {
        Method::Ris => estimate_ris(&points, &g, &target),
        Method::Is => estimate_is(&points, &g, &target, cfg.n_is, derive_seed(seed, &[4])),
    }
    .map_err(Error::at("estimate"))?;
    Ok(MarginalEstimate {
        k,
        log_ml: est.log_c,
        model: kind,
        n_components: g.components.len(),
        estimate: est,
        gibbs_acceptance: draws.acceptance_rates,
    })
}
