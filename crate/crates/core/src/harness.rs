//! Simulation studies comparing marginal-likelihood selection with BIC on the standard grid of
//! transition structures, noise levels and sample sizes.

use std::io::Write;

use num_traits::{FromPrimitive, Num};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{bic_select, DEFAULT_RESTARTS};
use crate::error::{Error, Result};
use crate::hmm::{simulate, HmmParams};
use crate::ncest::EstimatorConfig;
use crate::select::select_k;
use crate::stats::{derive_seed, rng_from};

/// Transition structures: flat, moderately diagonal, strongly diagonal, anti-diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TransitionKind {
    P1,
    P2,
    P3,
    P4,
}

impl TransitionKind {
    pub fn index(self) -> u64 {
        match self {
            TransitionKind::P1 => 1,
            TransitionKind::P2 => 2,
            TransitionKind::P3 => 3,
            TransitionKind::P4 => 4,
        }
    }
}

fn ratio<T: Num + FromPrimitive>(a: u32, b: u32) -> T {
    T::from_u32(a).expect("small integer") / T::from_u32(b).expect("small integer")
}

/// Builds the K x K matrix of the given kind, with `E` the all-ones matrix:
/// P1 = E/K, P2 = [0.8 - 0.2/(K-1)] I + 0.2/(K-1) E, P3 likewise with 0.95 and 0.05,
/// P4 = 0.9/(K-1) E - [0.9/(K-1) - 0.1] I.
///
/// Generic over the number type so that exact rationals can be used to check row sums.
pub fn build_transition<T: Num + FromPrimitive + Clone>(kind: TransitionKind, k: usize) -> Result<Vec<Vec<T>>> {
    let min_k = if kind == TransitionKind::P1 { 1 } else { 2 };
    if k < min_k {
        return Err(Error::InvalidInput(format!("{kind:?} needs K >= {min_k}, got {k}")));
    }
    let kk = T::from_usize(k).expect("small integer");
    let km1 = T::from_usize(k.saturating_sub(1).max(1)).expect("small integer");
    // (diagonal coefficient of I, coefficient of E)
    let (a, e): (T, T) = match kind {
        TransitionKind::P1 => (T::zero(), T::one() / kk),
        TransitionKind::P2 => {
            let off = ratio::<T>(1, 5) / km1;
            (ratio::<T>(4, 5) - off.clone(), off)
        }
        TransitionKind::P3 => {
            let off = ratio::<T>(1, 20) / km1;
            (ratio::<T>(19, 20) - off.clone(), off)
        }
        TransitionKind::P4 => {
            let off = ratio::<T>(9, 10) / km1;
            (T::zero() - (off.clone() - ratio::<T>(1, 10)), off)
        }
    };
    Ok((0..k)
        .map(|i| {
            (0..k)
                .map(|j| if i == j { a.clone() + e.clone() } else { e.clone() })
                .collect()
        })
        .collect())
}

/// One cell of a simulation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub k_star: usize,
    pub sigma: f64,
    pub n: usize,
    pub q_kind: TransitionKind,
    #[serde(default)]
    pub heter: bool,
    pub reps: usize,
    pub k_max: usize,
    pub master_seed: u64,
}

impl ExperimentSpec {
    fn cell_tag(&self) -> Vec<u64> {
        vec![
            self.k_star as u64,
            self.sigma.to_bits(),
            self.n as u64,
            self.q_kind.index(),
            self.heter as u64,
            self.k_max as u64,
        ]
    }

    pub fn rep_seed(&self, rep: usize) -> u64 {
        let mut path = self.cell_tag();
        path.push(rep as u64);
        derive_seed(self.master_seed, &path)
    }
}

/// True parameters: means `1..=K`, standard deviations `sigma` or, with `heter`,
/// `sigma * (0.5 + 2 U_k)` with `U_k` uniform on (0, 1).
pub fn build_params<R: Rng + ?Sized>(spec: &ExperimentSpec, rng: &mut R) -> Result<HmmParams<f64>> {
    if !(spec.sigma > 0.0) {
        return Err(Error::InvalidInput("sigma must be positive".into()));
    }
    let trans = build_transition::<f64>(spec.q_kind, spec.k_star)?;
    let means = (1..=spec.k_star).map(|m| m as f64).collect();
    let variances = (0..spec.k_star)
        .map(|_| {
            let s = if spec.heter {
                spec.sigma * (0.5 + 2.0 * rng.random::<f64>())
            } else {
                spec.sigma
            };
            s * s
        })
        .collect();
    HmmParams::new(trans, means, variances)
}

/// Settings shared by every cell of a study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarnessConfig {
    pub estimator: EstimatorConfig,
    pub bic_restarts: usize,
    /// Observation dimension used in the BIC penalty.
    pub obs_dim: usize,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            estimator: EstimatorConfig::default(),
            bic_restarts: DEFAULT_RESTARTS,
            obs_dim: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepOutcome {
    pub rep: usize,
    pub ml_k: Option<usize>,
    pub bic_k: Option<usize>,
    pub ml_error: Option<String>,
    pub bic_error: Option<String>,
}

/// Correct-identification percentages of one cell; failed replications count as incorrect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyRow {
    pub spec: ExperimentSpec,
    pub ml_pct: f64,
    pub bic_pct: f64,
    pub reps: usize,
    pub ml_failures: usize,
    pub bic_failures: usize,
    pub outcomes: Vec<RepOutcome>,
}

/// Runs one replication: simulate, select by marginal likelihood and by BIC.
pub fn run_rep(spec: &ExperimentSpec, cfg: &HarnessConfig, rep: usize) -> RepOutcome {
    let seed = spec.rep_seed(rep);
    let data = build_params(spec, &mut rng_from(derive_seed(seed, &[0])))
        .and_then(|p| simulate(&p, spec.n, derive_seed(seed, &[1])));
    let obs = match data {
        Ok(t) => t.obs,
        Err(e) => {
            return RepOutcome { rep, ml_k: None, bic_k: None, ml_error: Some(e.to_string()), bic_error: Some(e.to_string()) };
        }
    };
    let (ml, bic) = rayon::join(
        || select_k(&obs, spec.k_max, &cfg.estimator, derive_seed(seed, &[2])),
        || bic_select(&obs, 1, spec.k_max, cfg.obs_dim, cfg.bic_restarts, derive_seed(seed, &[3])),
    );
    RepOutcome {
        rep,
        ml_k: ml.as_ref().ok().map(|s| s.k_hat),
        bic_k: bic.as_ref().ok().map(|s| s.k_hat),
        ml_error: ml.err().map(|e| e.to_string()),
        bic_error: bic.err().map(|e| e.to_string()),
    }
}

pub fn run_experiment(spec: &ExperimentSpec, cfg: &HarnessConfig) -> Result<FrequencyRow> {
    if spec.reps == 0 {
        return Err(Error::InvalidInput("reps must be at least 1".into()));
    }
    if spec.k_max < 1 || spec.n == 0 {
        return Err(Error::InvalidInput("k_max and n must be positive".into()));
    }
    let outcomes: Vec<RepOutcome> = (0..spec.reps).into_par_iter().map(|r| run_rep(spec, cfg, r)).collect();
    let pct = |f: &dyn Fn(&RepOutcome) -> Option<usize>| {
        100.0 * outcomes.iter().filter(|o| f(o) == Some(spec.k_star)).count() as f64 / spec.reps as f64
    };
    Ok(FrequencyRow {
        spec: spec.clone(),
        ml_pct: pct(&|o| o.ml_k),
        bic_pct: pct(&|o| o.bic_k),
        reps: spec.reps,
        ml_failures: outcomes.iter().filter(|o| o.ml_k.is_none()).count(),
        bic_failures: outcomes.iter().filter(|o| o.bic_k.is_none()).count(),
        outcomes,
    })
}

/// A study: a list of cells with shared settings. Read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub cells: Vec<ExperimentSpec>,
    #[serde(default)]
    pub config: HarnessConfig,
}

pub fn run_grid(grid: &GridSpec) -> Result<Vec<FrequencyRow>> {
    grid.cells.iter().map(|c| run_experiment(c, &grid.config)).collect()
}

/// CSV table with one row per cell and the ML and BIC percentages side by side.
pub fn write_table<W: Write>(rows: &[FrequencyRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["k_star", "sigma", "n", "q_kind", "heter", "reps", "ml_pct", "bic_pct", "ml_failures", "bic_failures"])?;
    for r in rows {
        let s = &r.spec;
        w.write_record([
            s.k_star.to_string(),
            s.sigma.to_string(),
            s.n.to_string(),
            format!("{:?}", s.q_kind),
            s.heter.to_string(),
            r.reps.to_string(),
            format!("{:.1}", r.ml_pct),
            format!("{:.1}", r.bic_pct),
            r.ml_failures.to_string(),
            r.bic_failures.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
