//! Targets with known normalizing constants and exact samplers, used to check the estimators
//! end to end.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::impfn::{choose_region_with_support, fit_importance, Tail};
use crate::ncest::{estimate_is, estimate_ris, LogTarget, Method};
use crate::stats::{derive_seed, log_sum_exp, quantile, rng_from, sorted_copy, LN_2PI};

/// Spacing of the GaussMix3 centers along the first axis.
pub const GAUSS_MIX_SPACING: f64 = 3.0;
pub const GAUSS_MIX_VAR: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BenchKind {
    /// Equal-weight mixture of three `N(c_i, 0.1 I_d)` with centers `0, 3 e_1, 6 e_1`,
    /// scaled by `exp(10)`.
    GaussMix3 { d: usize },
    /// `N(1, 1) x t_2 x Gamma(shape 6, scale 2)`, scaled by `exp(2)`.
    Mixed3D,
}

impl BenchKind {
    pub fn label(&self) -> String {
        match self {
            BenchKind::GaussMix3 { d } => format!("gaussmix3-d{d}"),
            BenchKind::Mixed3D => "mixed3d".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchTarget {
    pub kind: BenchKind,
    pub log_c_true: f64,
}

pub fn bench_target(kind: BenchKind) -> Result<BenchTarget> {
    match kind {
        BenchKind::GaussMix3 { d } if !(2..=30).contains(&d) => {
            Err(Error::InvalidInput(format!("GaussMix3 dimension must be in 2..=30, got {d}")))
        }
        BenchKind::GaussMix3 { .. } => Ok(BenchTarget { kind, log_c_true: 10.0 }),
        BenchKind::Mixed3D => Ok(BenchTarget { kind, log_c_true: 2.0 }),
    }
}

impl BenchTarget {
    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self.kind {
            BenchKind::GaussMix3 { d } => {
                let c = rng.random_range(0..3) as f64 * GAUSS_MIX_SPACING;
                let nd = Normal::new(0.0, GAUSS_MIX_VAR.sqrt()).expect("valid normal");
                let mut x: Vec<f64> = (0..d).map(|_| nd.sample(rng)).collect();
                x[0] += c;
                x
            }
            BenchKind::Mixed3D => vec![
                Normal::new(1.0, 1.0).expect("valid normal").sample(rng),
                StudentT::new(2.0).expect("valid t").sample(rng),
                Gamma::new(6.0, 2.0).expect("valid gamma").sample(rng),
            ],
        }
    }

    pub fn sample(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng_from(seed);
        (0..n).map(|_| self.sample_with(&mut rng)).collect()
    }
}

impl LogTarget for BenchTarget {
    fn dim(&self) -> usize {
        match self.kind {
            BenchKind::GaussMix3 { d } => d,
            BenchKind::Mixed3D => 3,
        }
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        match self.kind {
            BenchKind::GaussMix3 { d } => {
                let rest: f64 = x[1..].iter().map(|v| v * v).sum();
                let norm = -0.5 * d as f64 * (LN_2PI + GAUSS_MIX_VAR.ln());
                let terms: Vec<f64> = (0..3)
                    .map(|i| {
                        let dx = x[0] - i as f64 * GAUSS_MIX_SPACING;
                        -(3.0f64).ln() + norm - 0.5 * (dx * dx + rest) / GAUSS_MIX_VAR
                    })
                    .collect();
                self.log_c_true + log_sum_exp(&terms)
            }
            BenchKind::Mixed3D => {
                if !(x[2] > 0.0) {
                    return f64::NEG_INFINITY;
                }
                let n = -0.5 * LN_2PI - 0.5 * (x[0] - 1.0).powi(2);
                // the t_2 density is exactly (2 + x^2)^(-3/2)
                let t = -1.5 * (2.0 + x[1] * x[1]).ln();
                let g = -ln_gamma(6.0) - 6.0 * 2f64.ln() + 5.0 * x[2].ln() - x[2] / 2.0;
                self.log_c_true + n + t + g
            }
        }
    }

    fn in_support(&self, x: &[f64]) -> bool {
        match self.kind {
            BenchKind::GaussMix3 { .. } => true,
            BenchKind::Mixed3D => x[2] > 0.0,
        }
    }
}

/// Settings of a benchmark study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub kind: BenchKind,
    pub n_sim: usize,
    pub n_is: usize,
    pub method: Method,
    pub tail: Tail,
    pub reps: usize,
    pub seed: u64,
    pub n_components: usize,
    pub region_mc: usize,
}

impl BenchSpec {
    pub fn new(kind: BenchKind, n_sim: usize, n_is: usize, method: Method, tail: Tail, reps: usize, seed: u64) -> Self {
        BenchSpec { kind, n_sim, n_is, method, tail, reps, seed, n_components: 6, region_mc: 20000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub spec: BenchSpec,
    pub log_c_true: f64,
    /// `log(C_hat / C)` of every successful replication.
    pub log_errors: Vec<f64>,
    /// Empirical 2.5% and 97.5% quantiles of `log_errors`.
    pub ci: [f64; 2],
    pub mean: f64,
    pub failures: usize,
}

impl BenchReport {
    pub fn covers_zero(&self) -> bool {
        self.ci[0] <= 0.0 && 0.0 <= self.ci[1]
    }

    pub fn width(&self) -> f64 {
        self.ci[1] - self.ci[0]
    }
}

/// One replication: exact draws stand in for posterior draws.
pub fn bench_rep(target: &BenchTarget, spec: &BenchSpec, rep: usize) -> Result<f64> {
    let seed = derive_seed(spec.seed, &[rep as u64]);
    let draws = target.sample(spec.n_sim, derive_seed(seed, &[0]));
    let g = fit_importance(&draws, spec.n_components, spec.tail, derive_seed(seed, &[1]))?;
    let g = choose_region_with_support(&g, spec.region_mc, derive_seed(seed, &[2]), |x| target.in_support(x))?;
    let est = match spec.method {
        Method::Ris => estimate_ris(&draws, &g, target)?,
        Method::Is => estimate_is(&draws, &g, target, spec.n_is, derive_seed(seed, &[3]))?,
    };
    Ok(est.log_c - target.log_c_true)
}

pub fn run_bench(spec: &BenchSpec) -> Result<BenchReport> {
    if spec.reps == 0 || spec.n_sim == 0 {
        return Err(Error::InvalidInput("reps and n_sim must be positive".into()));
    }
    let target = bench_target(spec.kind)?;
    let results: Vec<Result<f64>> = (0..spec.reps).into_par_iter().map(|r| bench_rep(&target, spec, r)).collect();
    let failures = results.iter().filter(|r| r.is_err()).count();
    if let Some(Err(e)) = results.iter().find(|r| r.is_err()) {
        log::warn!("{failures} of {} benchmark replications failed, first: {e}", spec.reps);
    }
    let log_errors: Vec<f64> = results.into_iter().filter_map(|r| r.ok()).collect();
    if log_errors.is_empty() {
        return Err(Error::NoCandidateSucceeded);
    }
    let sorted = sorted_copy(&log_errors);
    Ok(BenchReport {
        spec: spec.clone(),
        log_c_true: target.log_c_true,
        ci: [quantile(&sorted, 0.025), quantile(&sorted, 0.975)],
        mean: crate::stats::mean(&log_errors),
        log_errors,
        failures,
    })
}

/// CSV with one row per study: model, dimension, budgets, method, tail, interval.
pub fn write_reports<W: Write>(reports: &[BenchReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["model", "d", "n_sim", "n_is", "method", "tail", "reps", "ci_lo", "ci_hi", "mean", "failures"])?;
    for r in reports {
        let s = &r.spec;
        let (model, d) = match s.kind {
            BenchKind::GaussMix3 { d } => ("1", d),
            BenchKind::Mixed3D => ("2", 3),
        };
        w.write_record([
            model.to_string(),
            d.to_string(),
            s.n_sim.to_string(),
            s.n_is.to_string(),
            format!("{:?}", s.method).to_lowercase(),
            s.tail.label(),
            s.reps.to_string(),
            format!("{:.3}", r.ci[0]),
            format!("{:.3}", r.ci[1]),
            format!("{:.4}", r.mean),
            r.failures.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
