//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use hmm_order::hmm::HmmParams;
use hmm_order::prior::PriorSpec;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn normal_logpdf(x: f64, m: f64, v: f64) -> f64 {
    -0.5 * (LN_2PI + v.ln() + (x - m) * (x - m) / v)
}

/// Brute-force `p(y)` by summing the joint density over every hidden path.
pub fn brute_force_likelihood(p: &HmmParams<f64>, mu: &[f64], obs: &[f64]) -> f64 {
    let k = p.k();
    let n = obs.len();
    let mut total = 0.0;
    let mut path = vec![0usize; n];
    loop {
        let mut lp = mu[path[0]].ln() + normal_logpdf(obs[0], p.means()[path[0]], p.variances()[path[0]]);
        for t in 1..n {
            lp += p.q(path[t - 1], path[t]).ln() + normal_logpdf(obs[t], p.means()[path[t]], p.variances()[path[t]]);
        }
        total += lp.exp();
        // odometer increment
        let mut i = 0;
        loop {
            if i == n {
                return total;
            }
            path[i] += 1;
            if path[i] < k {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Brute-force smoothing marginals `P(X_t = j | y)`.
pub fn brute_force_marginals(p: &HmmParams<f64>, mu: &[f64], obs: &[f64]) -> Vec<Vec<f64>> {
    let k = p.k();
    let n = obs.len();
    let mut acc = vec![vec![0.0; k]; n];
    let mut total = 0.0;
    let mut path = vec![0usize; n];
    'outer: loop {
        let mut lp = mu[path[0]].ln() + normal_logpdf(obs[0], p.means()[path[0]], p.variances()[path[0]]);
        for t in 1..n {
            lp += p.q(path[t - 1], path[t]).ln() + normal_logpdf(obs[t], p.means()[path[t]], p.variances()[path[t]]);
        }
        let w = lp.exp();
        total += w;
        for t in 0..n {
            acc[t][path[t]] += w;
        }
        let mut i = 0;
        loop {
            if i == n {
                break 'outer;
            }
            path[i] += 1;
            if path[i] < k {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
    acc.into_iter().map(|r| r.into_iter().map(|x| x / total).collect()).collect()
}

/// Log evidence of i.i.d. normal data under independent priors `mu ~ N(m0, tau^2)` and
/// `sigma^2 ~ Scaled-Inv-chi^2(nu, s^2)`: the mean is integrated in closed form, the variance by
/// a fine trapezoid rule in `log sigma^2`.
pub fn normal_model_log_evidence(obs: &[f64], prior: &PriorSpec) -> f64 {
    normal_model_posterior(obs, prior).log_evidence
}

pub struct NormalPosterior {
    pub log_evidence: f64,
    pub mean_mu: f64,
    pub mean_log_var: f64,
}

/// Evidence and posterior moments of the single-state model on the same quadrature grid.
pub fn normal_model_posterior(obs: &[f64], prior: &PriorSpec) -> NormalPosterior {
    let n = obs.len() as f64;
    let ybar = obs.iter().sum::<f64>() / n;
    let ss: f64 = obs.iter().map(|y| (y - ybar).powi(2)).sum();
    let m0 = prior.mean_locs[0];
    let tau2 = prior.mean_sd * prior.mean_sd;
    let nu = prior.var_df;
    let s2 = prior.var_scale * prior.var_scale;
    let ln_gamma = |x: f64| statrs::function::gamma::ln_gamma(x);
    let log_integrand = |v: f64| {
        let var = v.exp();
        let ll = -0.5 * n * (LN_2PI + v) - 0.5 * (1.0 + n * tau2 / var).ln() - ss / (2.0 * var)
            - n * (ybar - m0).powi(2) / (2.0 * (var + n * tau2));
        let h = nu / 2.0;
        let lp = h * h.ln() - ln_gamma(h) + h * s2.ln() - (h + 1.0) * v - nu * s2 / (2.0 * var);
        ll + lp + v
    };
    // conditional posterior mean of mu given the variance
    let cond_mu = |v: f64| {
        let var = v.exp();
        (m0 / tau2 + n * ybar / var) / (1.0 / tau2 + n / var)
    };
    let centre = (ss / n).max(1e-300).ln();
    let (lo, hi, m) = (centre - 40.0, centre + 40.0, 400_000usize);
    let h = (hi - lo) / m as f64;
    let grid: Vec<f64> = (0..=m).map(|i| lo + h * i as f64).collect();
    let vals: Vec<f64> = grid.iter().map(|&v| log_integrand(v)).collect();
    let mx = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut s, mut s_mu, mut s_v) = (0.0, 0.0, 0.0);
    for (i, (&v, &lv)) in grid.iter().zip(&vals).enumerate() {
        let w = if i == 0 || i == m { 0.5 } else { 1.0 } * (lv - mx).exp();
        s += w;
        s_mu += w * cond_mu(v);
        s_v += w * v;
    }
    NormalPosterior { log_evidence: mx + (s * h).ln(), mean_mu: s_mu / s, mean_log_var: s_v / s }
}

/// One draw from the prior with independent labels.
pub fn sample_prior<R: rand::Rng + ?Sized>(prior: &PriorSpec, rng: &mut R) -> HmmParams<f64> {
    use rand_distr::{ChiSquared, Distribution, Gamma, Normal};
    let k = prior.k();
    let gamma = Gamma::new(prior.dirichlet_alpha, 1.0).unwrap();
    let trans = (0..k)
        .map(|_| {
            let w: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect()
        })
        .collect();
    let means = prior.mean_locs.iter().map(|&m| Normal::new(m, prior.mean_sd).unwrap().sample(rng)).collect();
    let chi = ChiSquared::new(prior.var_df).unwrap();
    let s2 = prior.var_scale * prior.var_scale;
    let vars = (0..k).map(|_| prior.var_df * s2 / chi.sample(rng)).collect();
    HmmParams::new(trans, means, vars).unwrap()
}
