//! Data-augmentation Gibbs sampler for the posterior of HMM (or finite-mixture) parameters.
//!
//! One sweep draws the hidden path by forward-filter backward-sample, then the means and
//! variances from their conjugate conditionals, then the transition rows. The stationary
//! initial law makes the row conditional non-conjugate, so rows are proposed from
//! `Dirichlet(alpha + counts)` and accepted with probability
//! `min(1, mu_{x_1}(Q') / mu_{x_1}(Q))`.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::em::baum_welch;
use crate::error::{Error, Result};
use crate::hmm::{check_obs, ffbs_unchecked, sample_categorical, stationary_flat, HmmParams};
use crate::prior::PriorSpec;
use crate::reparam::ModelKind;
use crate::stats::rng_from;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GibbsConfig {
    pub n_iter: usize,
    pub n_burn: usize,
    pub thin: usize,
    /// EM iterations used to place the chain near a mode before sampling.
    pub init_em_iters: usize,
    /// Metropolis correction for the stationary initial-state factor.
    pub stationary_correction: bool,
    pub model: ModelKind,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        GibbsConfig {
            n_iter: 6000,
            n_burn: 1000,
            thin: 1,
            init_em_iters: 20,
            stationary_correction: true,
            model: ModelKind::Hmm,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub draws: Vec<HmmParams<f64>>,
    pub n_burn: usize,
    pub thin: usize,
    /// Acceptance rate per update block (`trans`, `means`, `variances`).
    pub acceptance_rates: BTreeMap<String, f64>,
    pub model: ModelKind,
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn k(&self) -> usize {
        self.draws.first().map_or(0, |d| d.k())
    }

    /// CSV dump with columns `iter, q_11..q_KK, mu_1..mu_K, var_1..var_K`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let k = self.k();
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["iter".to_string()];
        for i in 1..=k {
            for j in 1..=k {
                header.push(format!("q_{i}{j}"));
            }
        }
        header.extend((1..=k).map(|i| format!("mu_{i}")));
        header.extend((1..=k).map(|i| format!("var_{i}")));
        w.write_record(&header)?;
        for (idx, d) in self.draws.iter().enumerate() {
            let iter = self.n_burn + idx * self.thin;
            let mut rec = vec![iter.to_string()];
            rec.extend(d.trans().iter().map(|x| x.to_string()));
            rec.extend(d.means().iter().map(|x| x.to_string()));
            rec.extend(d.variances().iter().map(|x| x.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn initial_params(obs: &[f64], k: usize, prior: &PriorSpec, cfg: &GibbsConfig) -> Result<HmmParams<f64>> {
    let start = HmmParams::from_flat(
        k,
        vec![1.0 / k as f64; k * k],
        prior.mean_locs.clone(),
        vec![prior.var_scale * prior.var_scale; k],
    )?;
    if cfg.init_em_iters == 0 || k == 1 && cfg.model == ModelKind::Mixture {
        return Ok(start);
    }
    match baum_welch(obs, start.clone(), 1e-8, cfg.init_em_iters) {
        Ok(fit) => {
            let p = fit.params;
            let p = if cfg.model == ModelKind::Mixture {
                // collapse to a mixture using the stationary weights
                let s = p.stationary()?.mu;
                HmmParams::from_flat(k, s.repeat(k), p.means().to_vec(), p.variances().to_vec())?
            } else {
                p
            };
            // keep the chain off the simplex boundary
            if p.trans().iter().all(|&q| q > 1e-12) {
                Ok(p)
            } else {
                Ok(start)
            }
        }
        Err(_) => Ok(start),
    }
}

fn draw_dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R, out: &mut [f64]) {
    loop {
        let mut s = 0.0;
        for (o, &a) in out.iter_mut().zip(alpha) {
            *o = Gamma::new(a, 1.0).expect("positive shape").sample(rng);
            s += *o;
        }
        if s > 0.0 && out.iter().all(|&x| x > 0.0) {
            out.iter_mut().for_each(|x| *x /= s);
            return;
        }
    }
}

/// Runs the sampler for `n_iter` sweeps and keeps every `thin`-th draw after `n_burn`.
pub fn run_gibbs(obs: &[f64], k: usize, prior: &PriorSpec, cfg: &GibbsConfig, seed: u64) -> Result<PosteriorDraws> {
    check_obs(obs)?;
    prior.validate(k)?;
    if cfg.n_iter <= cfg.n_burn {
        return Err(Error::InvalidInput("n_iter must exceed n_burn".into()));
    }
    if cfg.thin == 0 {
        return Err(Error::InvalidInput("thin must be at least 1".into()));
    }
    let mut rng = rng_from(seed);
    let n = obs.len();
    let mut params = initial_params(obs, k, prior, cfg)?;
    let mut trans = params.trans().to_vec();
    let mut means = params.means().to_vec();
    let mut vars = params.variances().to_vec();
    let mut mu = stationary_flat(k, &trans)?.mu;

    let tau2 = prior.mean_sd * prior.mean_sd;
    let nu = prior.var_df;
    let nus2 = nu * prior.var_scale * prior.var_scale;

    let keep = (cfg.n_iter - cfg.n_burn) / cfg.thin;
    let mut draws = Vec::with_capacity(keep);
    let mut accepted = 0usize;
    let mut proposed = 0usize;
    let mut path = vec![0usize; n];
    let mut counts = vec![0.0f64; k * k];
    let mut alpha_post = vec![0.0f64; k];
    let mut proposal = vec![0.0f64; k * k];
    let mut n_k = vec![0usize; k];
    let mut sum_k = vec![0.0f64; k];
    let mut logw = vec![0.0f64; k];

    for iter in 0..cfg.n_iter {
        // hidden states
        match cfg.model {
            ModelKind::Hmm => {
                path = ffbs_unchecked(&params, &mu, obs, &mut rng);
            }
            ModelKind::Mixture => {
                let w = &trans[..k];
                for (i, &y) in obs.iter().enumerate() {
                    let mut m = f64::NEG_INFINITY;
                    for j in 0..k {
                        let d = y - means[j];
                        logw[j] = w[j].ln() - 0.5 * vars[j].ln() - 0.5 * d * d / vars[j];
                        m = m.max(logw[j]);
                    }
                    for lw in logw.iter_mut() {
                        *lw = (*lw - m).exp();
                    }
                    path[i] = sample_categorical(&logw, &mut rng);
                }
            }
        }

        // sufficient statistics
        n_k.iter_mut().for_each(|c| *c = 0);
        sum_k.iter_mut().for_each(|s| *s = 0.0);
        for (&x, &y) in path.iter().zip(obs) {
            n_k[x] += 1;
            sum_k[x] += y;
        }

        // means | path, variances
        for j in 0..k {
            let prec = 1.0 / tau2 + n_k[j] as f64 / vars[j];
            let m = (prior.mean_locs[j] / tau2 + sum_k[j] / vars[j]) / prec;
            let z: f64 = rng.sample(StandardNormal);
            means[j] = m + z / prec.sqrt();
        }

        // variances | path, means
        let mut ss = vec![0.0f64; k];
        for (&x, &y) in path.iter().zip(obs) {
            let d = y - means[x];
            ss[x] += d * d;
        }
        for j in 0..k {
            let df = nu + n_k[j] as f64;
            let chi = ChiSquared::new(df).expect("positive df").sample(&mut rng);
            vars[j] = ((nus2 + ss[j]) / chi).max(f64::MIN_POSITIVE * 1e10);
        }

        // transition rows / weights
        if k > 1 {
            match cfg.model {
                ModelKind::Hmm => {
                    counts.iter_mut().for_each(|c| *c = 0.0);
                    for w in path.windows(2) {
                        counts[w[0] * k + w[1]] += 1.0;
                    }
                    for j in 0..k {
                        for l in 0..k {
                            alpha_post[l] = prior.dirichlet_alpha + counts[j * k + l];
                        }
                        draw_dirichlet(&alpha_post, &mut rng, &mut proposal[j * k..(j + 1) * k]);
                    }
                    proposed += 1;
                    if cfg.stationary_correction {
                        if let Ok(st) = stationary_flat(k, &proposal) {
                            let x1 = path[0];
                            let ratio = st.mu[x1] / mu[x1];
                            if rng.random::<f64>() < ratio {
                                trans.copy_from_slice(&proposal);
                                mu = st.mu;
                                accepted += 1;
                            }
                        }
                    } else if let Ok(st) = stationary_flat(k, &proposal) {
                        trans.copy_from_slice(&proposal);
                        mu = st.mu;
                        accepted += 1;
                    }
                }
                ModelKind::Mixture => {
                    for l in 0..k {
                        alpha_post[l] = prior.dirichlet_alpha + n_k[l] as f64;
                    }
                    draw_dirichlet(&alpha_post, &mut rng, &mut proposal[..k]);
                    for j in 0..k {
                        trans[j * k..(j + 1) * k].copy_from_slice(&proposal[..k]);
                    }
                    mu.copy_from_slice(&proposal[..k]);
                    proposed += 1;
                    accepted += 1;
                }
            }
        }

        params = HmmParams::from_flat(k, trans.clone(), means.clone(), vars.clone())?;
        if iter >= cfg.n_burn && (iter - cfg.n_burn) % cfg.thin == cfg.thin - 1 {
            draws.push(params.clone());
        }
    }

    let mut acceptance_rates = BTreeMap::new();
    acceptance_rates.insert(
        "trans".to_string(),
        if proposed == 0 { 1.0 } else { accepted as f64 / proposed as f64 },
    );
    acceptance_rates.insert("means".to_string(), 1.0);
    acceptance_rates.insert("variances".to_string(), 1.0);
    Ok(PosteriorDraws {
        draws,
        n_burn: cfg.n_burn,
        thin: cfg.thin,
        acceptance_rates,
        model: cfg.model,
    })
}
