//! Importance functions: an over-fitted full-covariance mixture fitted to posterior draws in
//! unconstrained coordinates, optionally with Student-t kernels, plus the bounded region
//! (a union of per-component Mahalanobis ellipsoids) that the estimators restrict to.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared as ChiSqDist, ContinuousCDF, FisherSnedecor};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::hmm::sample_categorical;
use crate::stats::{log_sum_exp, rng_from, LN_2PI};

/// Kernel family of every mixture component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Tail {
    Gaussian,
    StudentT { df: f64 },
}

impl Tail {
    pub fn parse(s: &str) -> Option<Tail> {
        match s {
            "gauss" | "gaussian" => Some(Tail::Gaussian),
            "t2" => Some(Tail::StudentT { df: 2.0 }),
            "t3" => Some(Tail::StudentT { df: 3.0 }),
            _ => None,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Tail::Gaussian => "gauss".into(),
            Tail::StudentT { df } => format!("t{df}"),
        }
    }

    /// Normalizing constant of the standard kernel in `dim` dimensions (log scale).
    fn log_norm(&self, dim: usize) -> f64 {
        let d = dim as f64;
        match *self {
            Tail::Gaussian => -0.5 * d * LN_2PI,
            Tail::StudentT { df } => {
                ln_gamma(0.5 * (df + d)) - ln_gamma(0.5 * df) - 0.5 * d * (df * std::f64::consts::PI).ln()
            }
        }
    }

    /// Log kernel as a function of the squared Mahalanobis distance, without the normalizer.
    #[inline]
    fn log_kernel(&self, dim: usize, maha_sq: f64) -> f64 {
        match *self {
            Tail::Gaussian => -0.5 * maha_sq,
            Tail::StudentT { df } => -0.5 * (df + dim as f64) * (maha_sq / df).ln_1p(),
        }
    }

    /// Quantile of the squared Mahalanobis distance of one kernel draw.
    pub fn maha_sq_quantile(&self, dim: usize, level: f64) -> f64 {
        let d = dim as f64;
        match *self {
            Tail::Gaussian => ChiSqDist::new(d).expect("positive dim").inverse_cdf(level),
            Tail::StudentT { df } => d * FisherSnedecor::new(d, df).expect("positive dofs").inverse_cdf(level),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ComponentRepr {
    weight: f64,
    center: Vec<f64>,
    scale: Vec<Vec<f64>>,
}

/// One mixture component: weight, center and a symmetric positive-definite scale matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "ComponentRepr", into = "ComponentRepr")]
pub struct Component {
    pub weight: f64,
    pub center: Vec<f64>,
    /// Row-major scale matrix.
    pub scale: Vec<f64>,
    chol: Vec<f64>,
    log_det: f64,
}

impl TryFrom<ComponentRepr> for Component {
    type Error = Error;
    fn try_from(r: ComponentRepr) -> Result<Self> {
        let d = r.center.len();
        if r.scale.len() != d || r.scale.iter().any(|row| row.len() != d) {
            return Err(Error::InvalidParams("scale matrix shape does not match center".into()));
        }
        Component::new(r.weight, r.center, r.scale.concat())
    }
}

impl From<Component> for ComponentRepr {
    fn from(c: Component) -> Self {
        let d = c.center.len();
        ComponentRepr {
            weight: c.weight,
            scale: c.scale.chunks(d).map(|r| r.to_vec()).collect(),
            center: c.center,
        }
    }
}

impl Component {
    /// Factorizes `scale`; a matrix that is not numerically positive definite gets growing
    /// diagonal jitter until it is.
    pub fn new(weight: f64, center: Vec<f64>, mut scale: Vec<f64>) -> Result<Self> {
        let d = center.len();
        if d == 0 || scale.len() != d * d {
            return Err(Error::InvalidParams("scale matrix shape does not match center".into()));
        }
        if !(weight >= 0.0) || center.iter().chain(&scale).any(|x| !x.is_finite()) {
            return Err(Error::InvalidParams("non-finite or negative component parameters".into()));
        }
        let trace: f64 = (0..d).map(|i| scale[i * d + i]).sum();
        let mut jitter = 1e-12 * (trace / d as f64).abs().max(1e-300);
        for _ in 0..60 {
            let m = DMatrix::from_row_slice(d, d, &scale);
            if let Some(ch) = m.cholesky() {
                let l = ch.l();
                let chol: Vec<f64> = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| l[(i, j)]).collect();
                let log_det = 2.0 * (0..d).map(|i| l[(i, i)].ln()).sum::<f64>();
                if log_det.is_finite() {
                    return Ok(Component { weight, center, scale, chol, log_det });
                }
            }
            for i in 0..d {
                scale[i * d + i] += jitter;
            }
            jitter *= 10.0;
        }
        Err(Error::InvalidParams("scale matrix could not be made positive definite".into()))
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Squared Mahalanobis distance by forward substitution with the Cholesky factor.
    #[inline]
    pub fn mahalanobis_sq(&self, x: &[f64], z: &mut [f64]) -> f64 {
        let d = self.center.len();
        let mut acc = 0.0;
        for i in 0..d {
            let row = &self.chol[i * d..i * d + i];
            let mut s = x[i] - self.center[i];
            for (l, zj) in row.iter().zip(z.iter()) {
                s -= l * zj;
            }
            let zi = s / self.chol[i * d + i];
            z[i] = zi;
            acc += zi * zi;
        }
        acc
    }

    /// `center + L * v`.
    fn transform(&self, v: &[f64], scale: f64) -> Vec<f64> {
        let d = self.center.len();
        (0..d)
            .map(|i| {
                let row = &self.chol[i * d..i * d + i + 1];
                self.center[i] + scale * row.iter().zip(v).map(|(l, x)| l * x).sum::<f64>()
            })
            .collect()
    }
}

/// Bounded region: points whose squared Mahalanobis distance to at least one component is at
/// most `radius_sq`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    /// Per-kernel quantile level that produced the radius.
    pub level: f64,
    pub radius_sq: f64,
    /// Monte Carlo estimate of the g-mass of the region.
    pub mass: f64,
    pub mass_se: f64,
    /// g-mass of the region intersected with the target's support.
    pub support_mass: f64,
    pub support_mass_se: f64,
    pub adjustments: usize,
    pub mc_budget: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImportanceFn {
    pub dim: usize,
    pub tail: Tail,
    pub components: Vec<Component>,
    pub region: Option<Region>,
}

/// Log density and region membership at one point.
#[derive(Debug, Clone, Copy)]
pub struct GEval {
    pub log_density: f64,
    pub min_maha_sq: f64,
}

impl ImportanceFn {
    pub fn new(tail: Tail, components: Vec<Component>) -> Result<Self> {
        let dim = components.first().map(|c| c.dim()).ok_or_else(|| {
            Error::InvalidParams("importance function needs at least one component".into())
        })?;
        if components.iter().any(|c| c.dim() != dim) {
            return Err(Error::InvalidParams("components differ in dimension".into()));
        }
        if let Tail::StudentT { df } = tail {
            if !(df > 0.0) {
                return Err(Error::InvalidParams("Student-t degrees of freedom must be positive".into()));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if !(total > 0.0) {
            return Err(Error::InvalidParams("component weights sum to zero".into()));
        }
        let components = components
            .into_iter()
            .map(|mut c| {
                c.weight /= total;
                c
            })
            .collect();
        Ok(ImportanceFn { dim, tail, components, region: None })
    }

    /// Same locations and scales with a different kernel; the region is dropped.
    pub fn with_tail(&self, tail: Tail) -> Self {
        ImportanceFn { tail, region: None, ..self.clone() }
    }

    pub fn eval(&self, x: &[f64]) -> GEval {
        let mut z = vec![0.0; self.dim];
        let norm = self.tail.log_norm(self.dim);
        let mut terms = Vec::with_capacity(self.components.len());
        let mut min_maha_sq = f64::INFINITY;
        for c in &self.components {
            let m = c.mahalanobis_sq(x, &mut z);
            min_maha_sq = min_maha_sq.min(m);
            terms.push(c.weight.ln() + norm - 0.5 * c.log_det + self.tail.log_kernel(self.dim, m));
        }
        GEval { log_density: log_sum_exp(&terms), min_maha_sq }
    }

    /// Log mixture density (untruncated).
    pub fn log_density(&self, x: &[f64]) -> f64 {
        self.eval(x).log_density
    }

    /// Whether `x` lies in the region; `false` when no region has been chosen.
    pub fn in_region(&self, x: &[f64]) -> bool {
        self.region.as_ref().is_some_and(|r| self.eval(x).min_maha_sq <= r.radius_sq)
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let weights: Vec<f64> = self.components.iter().map(|c| c.weight).collect();
        let c = &self.components[sample_categorical(&weights, rng)];
        let v: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        let scale = match self.tail {
            Tail::Gaussian => 1.0,
            Tail::StudentT { df } => {
                let w: f64 = ChiSquared::new(df).expect("positive df").sample(rng) / df;
                1.0 / w.sqrt()
            }
        };
        c.transform(&v, scale)
    }

    pub fn sample(&self, m: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng_from(seed);
        (0..m).map(|_| self.sample_with(&mut rng)).collect()
    }
}

/// Log density of `g` at `point`.
pub fn g_log_density(g: &ImportanceFn, point: &[f64]) -> f64 {
    g.log_density(point)
}

/// `m` ancestral draws from `g`, deterministic in `seed`.
pub fn g_sample(g: &ImportanceFn, m: usize, seed: u64) -> Vec<Vec<f64>> {
    g.sample(m, seed)
}

/// Default number of components for a K-state model.
pub fn default_components(k: usize) -> usize {
    (2 * k).clamp(1, 10)
}

const FIT_MAX_ITER: usize = 100;
const FIT_REL_TOL: f64 = 1e-7;
const SCALE_REG: f64 = 1e-6;

fn kmeans_pp_centers<R: Rng>(points: &[Vec<f64>], inv_sd: &[f64], c: usize, rng: &mut R) -> Vec<usize> {
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).zip(inv_sd).map(|((x, y), s)| ((x - y) * s).powi(2)).sum()
    };
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut best: Vec<f64> = points.iter().map(|p| dist(p, &points[chosen[0]])).collect();
    while chosen.len() < c {
        let total: f64 = best.iter().sum();
        let next = if total > 0.0 {
            sample_categorical(&best, rng)
        } else {
            rng.random_range(0..n)
        };
        chosen.push(next);
        for (b, p) in best.iter_mut().zip(points) {
            *b = b.min(dist(p, &points[next]));
        }
    }
    chosen
}

/// Smallest effective number of draws a component may keep: tiny components fitted to a few
/// isolated draws make the density ratio explode there.
fn min_component_size(n: usize, d: usize) -> f64 {
    (2.0 * (d + 1) as f64).max(0.01 * n as f64).min(n as f64)
}

fn weighted_component(points: &[Vec<f64>], resp: &[f64], c: usize, nc: usize, reg_floor: f64) -> Result<Option<Component>> {
    let d = points[0].len();
    let nk: f64 = (0..points.len()).map(|i| resp[i * nc + c]).sum();
    if nk < min_component_size(points.len(), d) {
        return Ok(None);
    }
    let mut mean = vec![0.0; d];
    for (i, p) in points.iter().enumerate() {
        let r = resp[i * nc + c];
        for (m, x) in mean.iter_mut().zip(p) {
            *m += r * x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= nk);
    let mut cov = vec![0.0; d * d];
    let mut diff = vec![0.0; d];
    for (i, p) in points.iter().enumerate() {
        let r = resp[i * nc + c];
        if r == 0.0 {
            continue;
        }
        for j in 0..d {
            diff[j] = p[j] - mean[j];
        }
        for a in 0..d {
            let ra = r * diff[a];
            for b in 0..=a {
                cov[a * d + b] += ra * diff[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..=a {
            cov[a * d + b] /= nk;
            cov[b * d + a] = cov[a * d + b];
        }
    }
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let reg = (SCALE_REG * trace / d as f64).max(reg_floor);
    for i in 0..d {
        cov[i * d + i] += reg;
    }
    Component::new(nk, mean, cov).map(Some)
}

/// Fits an `n_components` full-covariance Gaussian mixture to `points` by EM with k-means++
/// initialization, then attaches the requested kernel to the fitted locations and scales.
pub fn fit_importance(points: &[Vec<f64>], n_components: usize, tail: Tail, seed: u64) -> Result<ImportanceFn> {
    let n = points.len();
    if n == 0 || n_components == 0 {
        return Err(Error::InvalidInput("need at least one draw and one component".into()));
    }
    let d = points[0].len();
    if d == 0 || points.iter().any(|p| p.len() != d || p.iter().any(|x| !x.is_finite())) {
        return Err(Error::InvalidInput("draws must be finite vectors of equal positive length".into()));
    }
    let mut nc = n_components;
    if n < nc {
        log::warn!("only {n} draws for {nc} components; reducing components to {n}");
        nc = n;
    }
    let mut rng = rng_from(seed);

    // coordinate scales for the clustering distance and a floor for regularization
    let mut sd = vec![0.0; d];
    let mut mean = vec![0.0; d];
    for p in points {
        for j in 0..d {
            mean[j] += p[j] / n as f64;
        }
    }
    for p in points {
        for j in 0..d {
            sd[j] += (p[j] - mean[j]).powi(2) / n as f64;
        }
    }
    let total_var: f64 = sd.iter().sum();
    let reg_floor = 1e-12 * (total_var / d as f64).max(1e-12);
    let inv_sd: Vec<f64> = sd.iter().map(|v| if *v > 0.0 { 1.0 / v.sqrt() } else { 1.0 }).collect();

    let seeds = kmeans_pp_centers(points, &inv_sd, nc, &mut rng);
    let mut resp = vec![0.0; n * nc];
    for (i, p) in points.iter().enumerate() {
        let nearest = seeds
            .iter()
            .enumerate()
            .map(|(c, &s)| {
                let dd: f64 = p.iter().zip(&points[s]).zip(&inv_sd).map(|((x, y), w)| ((x - y) * w).powi(2)).sum();
                (c, dd)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(c, _)| c)
            .unwrap_or(0);
        resp[i * nc + nearest] = 1.0;
    }

    let mut comps: Vec<Component> = Vec::new();
    let mut prev_ll = f64::NEG_INFINITY;
    let mut z = vec![0.0; d];
    let norm = Tail::Gaussian.log_norm(d);
    for _ in 0..FIT_MAX_ITER {
        let ncur = resp.len() / n;
        let mut next = Vec::with_capacity(ncur);
        for c in 0..ncur {
            if let Some(comp) = weighted_component(points, &resp, c, ncur, reg_floor)? {
                next.push(comp);
            }
        }
        if next.is_empty() {
            // every cluster was too small: fall back to a single component
            let all = vec![1.0; n];
            next.extend(weighted_component(points, &all, 0, 1, reg_floor)?);
        }
        let total: f64 = next.iter().map(|c| c.weight).sum();
        next.iter_mut().for_each(|c| c.weight /= total);
        comps = next;

        // E step
        let m = comps.len();
        resp = vec![0.0; n * m];
        let mut ll = 0.0;
        let mut terms = vec![0.0; m];
        for (i, p) in points.iter().enumerate() {
            for (c, comp) in comps.iter().enumerate() {
                let q = comp.mahalanobis_sq(p, &mut z);
                terms[c] = comp.weight.ln() + norm - 0.5 * comp.log_det - 0.5 * q;
            }
            let lse = log_sum_exp(&terms);
            ll += lse;
            for c in 0..m {
                resp[i * m + c] = (terms[c] - lse).exp();
            }
        }
        if (ll - prev_ll).abs() <= FIT_REL_TOL * ll.abs() + 1e-9 {
            break;
        }
        prev_ll = ll;
    }
    ImportanceFn::new(tail, comps)
}

/// Chooses the region with a support predicate equal to "everywhere".
pub fn choose_region(g: &ImportanceFn, mc_budget: usize, seed: u64) -> Result<ImportanceFn> {
    choose_region_with_support(g, mc_budget, seed, |_| true)
}

pub const REGION_START_LEVEL: f64 = 0.95;
pub const REGION_MASS_LO: f64 = 0.55;
pub const REGION_MASS_HI: f64 = 0.98;
pub const REGION_MAX_ADJUSTMENTS: usize = 50;

/// Sets the per-kernel quantile level so that the Monte Carlo g-mass of the region lies in
/// `(0.55, 0.98)`, starting from the 95% level and bisecting on a fixed set of g-draws. The
/// same draws estimate the mass of the region restricted to `support`.
pub fn choose_region_with_support<F>(g: &ImportanceFn, mc_budget: usize, seed: u64, support: F) -> Result<ImportanceFn>
where
    F: Fn(&[f64]) -> bool,
{
    if mc_budget == 0 {
        return Err(Error::InvalidInput("region Monte Carlo budget must be positive".into()));
    }
    let draws = g.sample(mc_budget, seed);
    let evals: Vec<(f64, bool)> = draws.iter().map(|x| (g.eval(x).min_maha_sq, support(x))).collect();
    let b = mc_budget as f64;
    let mass_at = |r2: f64| evals.iter().filter(|(m, _)| *m <= r2).count() as f64 / b;

    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut level = REGION_START_LEVEL;
    let mut mass = f64::NAN;
    for attempt in 0..REGION_MAX_ADJUSTMENTS {
        let r2 = g.tail.maha_sq_quantile(g.dim, level);
        mass = mass_at(r2);
        if mass > REGION_MASS_LO && mass < REGION_MASS_HI {
            let inside = evals.iter().filter(|(m, s)| *m <= r2 && *s).count() as f64 / b;
            let se = |p: f64| (p * (1.0 - p) / b).sqrt();
            let mut out = g.clone();
            out.region = Some(Region {
                level,
                radius_sq: r2,
                mass,
                mass_se: se(mass),
                support_mass: inside,
                support_mass_se: se(inside),
                adjustments: attempt,
                mc_budget,
            });
            return Ok(out);
        }
        if mass >= REGION_MASS_HI {
            hi = level;
        } else {
            lo = level;
        }
        level = 0.5 * (lo + hi);
    }
    Err(Error::RegionBracket { attempts: REGION_MAX_ADJUSTMENTS, last_mass: mass })
}
