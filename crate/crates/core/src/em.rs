//! Penalized EM for vMF mixtures.
//!
//! The objective is `pl_n = l_n - psi_n sum_h kappa_h`. The M-step for
//! `kappa_h` solves `A_d(kappa_h) = (||r_h|| - psi_n) / N_h`, setting
//! `kappa_h = 0` when the numerator is negative.

use rand::seq::index;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{check_data, log_sum_exp, PenaltyConfig, PenaltySpec, VmfComponent, VmfMixture};
use crate::rng::{self, Rng};
use crate::special::{kappa_approx, solve_kappa_exact};
use crate::sphere::{dot, norm, UnitVector};

/// Upper clamp for the mean resultant ratio before inverting `A_d`.
pub const RHO_MAX: f64 = 1.0 - 1e-10;
/// Components with less total responsibility than this are degenerate.
pub const MIN_COMPONENT_MASS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KappaUpdate {
    /// Closed-form approximation `rho (d - rho^2) / (1 - rho^2)`.
    #[default]
    Approx,
    /// Exact inversion of the Bessel ratio.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Init {
    /// `p` distinct data points as means, `kappa = 1`, uniform weights.
    #[default]
    RandomRestarts,
    /// Spherical k-means, then moment-based concentrations.
    KMeansSeeded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub p: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub kappa_update: KappaUpdate,
    pub init: Init,
    pub restarts: usize,
    pub penalty: PenaltySpec,
    pub seed: u64,
}

impl EmConfig {
    /// Defaults: 500 iterations, relative tolerance `1e-8`, approximate
    /// `kappa` updates, 10 random restarts, penalty `-(1/n) kappa`.
    pub fn new(p: usize) -> Self {
        Self {
            p,
            max_iters: 500,
            tol: 1e-8,
            kappa_update: KappaUpdate::Approx,
            init: Init::RandomRestarts,
            restarts: 10,
            penalty: PenaltySpec::Zeta(1.0),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(Error::InvalidConfig("p must be >= 1".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be >= 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidConfig(format!("tol must be positive, got {}", self.tol)));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidConfig("restarts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Row-major `n x p` matrix of posterior component probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    n: usize,
    p: usize,
    values: Vec<f64>,
}

impl Responsibilities {
    pub fn new(n: usize, p: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * p || p == 0 {
            return Err(Error::InvalidConfig(format!(
                "responsibility matrix needs {n} x {p} entries, got {}",
                values.len()
            )));
        }
        Ok(Self { n, p, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.p..(i + 1) * self.p]
    }

    pub fn get(&self, i: usize, h: usize) -> f64 {
        self.values[i * self.p + h]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub mixture: VmfMixture,
    /// Penalized log-likelihood of the initial mixture and after every iteration.
    pub pll_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub responsibilities: Responsibilities,
    pub penalty: PenaltyConfig,
    /// Index of the restart that produced this fit.
    pub restart: usize,
    /// Restarts abandoned because a component lost all its mass.
    pub failed_restarts: usize,
}

impl FitReport {
    pub fn final_pll(&self) -> f64 {
        *self.pll_trace.last().expect("trace is never empty")
    }
}

/// Data as one contiguous `n x d` block.
struct Flat {
    d: usize,
    n: usize,
    x: Vec<f64>,
}

impl Flat {
    fn new(data: &[UnitVector]) -> Self {
        let d = data[0].dim();
        let mut x = Vec::with_capacity(data.len() * d);
        for p in data {
            x.extend_from_slice(p.coords());
        }
        Self { d, n: data.len(), x }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }
}

/// Fills `resp` and returns the log-likelihood of `mix`.
fn e_step_flat(mix: &VmfMixture, data: &Flat, resp: &mut [f64]) -> f64 {
    let p = mix.p();
    let mut ll = 0.0;
    for (i, row) in resp.chunks_exact_mut(p).enumerate() {
        mix.joint_log_terms(data.row(i), row);
        let lse = log_sum_exp(row);
        ll += lse;
        let mut s = 0.0;
        for r in row.iter_mut() {
            *r = (*r - lse).exp();
            s += *r;
        }
        row.iter_mut().for_each(|r| *r /= s);
    }
    ll
}

fn invert_ratio(d: usize, rho: f64, update: KappaUpdate) -> Result<f64> {
    match update {
        KappaUpdate::Approx => kappa_approx(d, rho),
        KappaUpdate::Exact => solve_kappa_exact(d, rho),
    }
}

fn m_step_flat(resp: &[f64], p: usize, data: &Flat, psi_n: f64, update: KappaUpdate) -> Result<VmfMixture> {
    let d = data.d;
    let mut mass = vec![0.0; p];
    let mut r = vec![0.0; p * d];
    for (i, row) in resp.chunks_exact(p).enumerate() {
        let x = data.row(i);
        for h in 0..p {
            let w = row[h];
            mass[h] += w;
            for (acc, xi) in r[h * d..(h + 1) * d].iter_mut().zip(x) {
                *acc += w * xi;
            }
        }
    }
    let total: f64 = mass.iter().sum();
    let mut weights = Vec::with_capacity(p);
    let mut components = Vec::with_capacity(p);
    for h in 0..p {
        if !(mass[h] >= MIN_COMPONENT_MASS) {
            return Err(Error::DegenerateComponent {
                component: h,
                mass: mass[h],
            });
        }
        weights.push(mass[h] / total);
        let rh = &r[h * d..(h + 1) * d];
        let len = norm(rh);
        let mu = if len > 0.0 {
            UnitVector::new(rh.to_vec())?
        } else {
            UnitVector::basis(d, 0)?
        };
        let numerator = len - psi_n;
        let kappa = if numerator > 0.0 {
            invert_ratio(d, (numerator / mass[h]).min(RHO_MAX), update)?
        } else {
            0.0
        };
        components.push(VmfComponent::new(mu, kappa)?);
    }
    VmfMixture::new(weights, components)
}

/// Posterior component probabilities, computed in the log domain.
pub fn e_step(mix: &VmfMixture, data: &[UnitVector]) -> Result<Responsibilities> {
    check_data(data, mix.dim())?;
    let flat = Flat::new(data);
    let mut values = vec![0.0; data.len() * mix.p()];
    e_step_flat(mix, &flat, &mut values);
    Responsibilities::new(data.len(), mix.p(), values)
}

/// Penalized M-step.
pub fn m_step(resp: &Responsibilities, data: &[UnitVector], penalty: &PenaltyConfig, update: KappaUpdate) -> Result<VmfMixture> {
    let first = data.first().ok_or(Error::EmptyData)?;
    check_data(data, first.dim())?;
    if resp.n() != data.len() {
        return Err(Error::DimensionMismatch {
            expected: data.len(),
            found: resp.n(),
        });
    }
    m_step_flat(&resp.values, resp.p(), &Flat::new(data), penalty.psi_n, update)
}

fn check_fit_inputs(data: &[UnitVector], cfg: &EmConfig) -> Result<()> {
    cfg.validate()?;
    let first = data.first().ok_or(Error::EmptyData)?;
    check_data(data, first.dim())?;
    if data.len() < cfg.p {
        return Err(Error::InvalidConfig(format!(
            "need at least p = {} observations, got {}",
            cfg.p,
            data.len()
        )));
    }
    Ok(())
}

/// Starting mixture for one restart.
pub fn initialize(data: &[UnitVector], cfg: &EmConfig, rng: &mut Rng) -> Result<VmfMixture> {
    check_fit_inputs(data, cfg)?;
    let flat = Flat::new(data);
    match cfg.init {
        Init::RandomRestarts => {
            let picks = index::sample(rng, data.len(), cfg.p);
            let components = picks
                .iter()
                .map(|i| VmfComponent::new(data[i].clone(), 1.0))
                .collect::<Result<Vec<_>>>()?;
            VmfMixture::new(vec![1.0 / cfg.p as f64; cfg.p], components)
        }
        Init::KMeansSeeded => spherical_kmeans(&flat, cfg.p, rng),
    }
}

const KMEANS_ITERS: usize = 20;

fn spherical_kmeans(data: &Flat, p: usize, rng: &mut Rng) -> Result<VmfMixture> {
    let d = data.d;
    let mut centers: Vec<f64> = Vec::with_capacity(p * d);
    for i in index::sample(rng, data.n, p).iter() {
        centers.extend_from_slice(data.row(i));
    }
    let mut labels = vec![0usize; data.n];
    let mut sums = vec![0.0; p * d];
    let mut counts = vec![0usize; p];
    for _ in 0..KMEANS_ITERS {
        for (i, label) in labels.iter_mut().enumerate() {
            let x = data.row(i);
            let mut best = (f64::NEG_INFINITY, 0);
            for h in 0..p {
                let s = dot(&centers[h * d..(h + 1) * d], x);
                if s > best.0 {
                    best = (s, h);
                }
            }
            *label = best.1;
        }
        accumulate(data, &labels, &mut sums, &mut counts);
        for h in 0..p {
            let s = &sums[h * d..(h + 1) * d];
            let len = norm(s);
            if counts[h] > 0 && len > 0.0 {
                for j in 0..d {
                    centers[h * d + j] = s[j] / len;
                }
            }
        }
    }
    accumulate(data, &labels, &mut sums, &mut counts);

    let any_empty = counts.contains(&0);
    let mut weights = Vec::with_capacity(p);
    let mut components = Vec::with_capacity(p);
    for h in 0..p {
        let mu = UnitVector::new(centers[h * d..(h + 1) * d].to_vec())?;
        let kappa = if counts[h] > 0 {
            let rho = norm(&sums[h * d..(h + 1) * d]) / counts[h] as f64;
            kappa_approx(d, rho.min(RHO_MAX))?
        } else {
            1.0
        };
        components.push(VmfComponent::new(mu, kappa)?);
        weights.push(if any_empty {
            1.0 / p as f64
        } else {
            counts[h] as f64 / data.n as f64
        });
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    VmfMixture::new(weights, components)
}

fn accumulate(data: &Flat, labels: &[usize], sums: &mut [f64], counts: &mut [usize]) {
    let d = data.d;
    sums.iter_mut().for_each(|s| *s = 0.0);
    counts.iter_mut().for_each(|c| *c = 0);
    for (i, &h) in labels.iter().enumerate() {
        counts[h] += 1;
        for (s, x) in sums[h * d..(h + 1) * d].iter_mut().zip(data.row(i)) {
            *s += x;
        }
    }
}

/// Runs EM from `start` until the relative change in the penalized
/// log-likelihood drops below `tol` or `max_iters` M-steps have run.
pub fn run_em(
    data: &[UnitVector],
    start: VmfMixture,
    penalty: &PenaltyConfig,
    cfg: &EmConfig,
) -> Result<(VmfMixture, Vec<f64>, usize, bool, Responsibilities)> {
    let first = data.first().ok_or(Error::EmptyData)?;
    check_data(data, first.dim())?;
    if start.dim() != first.dim() {
        return Err(Error::DimensionMismatch {
            expected: start.dim(),
            found: first.dim(),
        });
    }
    let flat = Flat::new(data);
    let p = start.p();
    let mut resp = vec![0.0; flat.n * p];
    let mut mix = start;
    let pll = |mix: &VmfMixture, ll: f64| ll - penalty.psi_n * mix.kappas().iter().sum::<f64>();
    let ll = e_step_flat(&mix, &flat, &mut resp);
    let mut trace = vec![pll(&mix, ll)];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        mix = m_step_flat(&resp, p, &flat, penalty.psi_n, cfg.kappa_update)?;
        let ll = e_step_flat(&mix, &flat, &mut resp);
        let value = pll(&mix, ll);
        let prev = *trace.last().expect("nonempty");
        trace.push(value);
        iterations += 1;
        if (value - prev).abs() < cfg.tol * value.abs() {
            converged = true;
            break;
        }
    }
    let resp = Responsibilities::new(flat.n, p, resp)?;
    Ok((mix, trace, iterations, converged, resp))
}

/// Penalized EM with restarts; returns the restart with the highest final
/// penalized log-likelihood (lowest index on ties).
pub fn fit(data: &[UnitVector], cfg: &EmConfig) -> Result<FitReport> {
    check_fit_inputs(data, cfg)?;
    let penalty = cfg.penalty.resolve(data)?;
    let outcomes: Vec<Result<FitReport>> = (0..cfg.restarts)
        .into_par_iter()
        .map(|restart| {
            let mut rng = rng::stream(cfg.seed, restart as u64);
            let start = initialize(data, cfg, &mut rng)?;
            let (mixture, pll_trace, iterations, converged, responsibilities) = run_em(data, start, &penalty, cfg)?;
            Ok(FitReport {
                mixture,
                pll_trace,
                iterations,
                converged,
                responsibilities,
                penalty,
                restart,
                failed_restarts: 0,
            })
        })
        .collect();

    let mut best: Option<FitReport> = None;
    let mut failed = 0;
    let mut last_error = String::new();
    for outcome in outcomes {
        match outcome {
            Ok(report) => {
                let better = match &best {
                    None => true,
                    Some(b) => report.final_pll() > b.final_pll(),
                };
                if better {
                    best = Some(report);
                }
            }
            Err(e @ Error::DegenerateComponent { .. }) => {
                failed += 1;
                last_error = e.to_string();
            }
            Err(e) => return Err(e),
        }
    }
    match best {
        Some(mut report) => {
            report.failed_restarts = failed;
            Ok(report)
        }
        None => Err(Error::FitFailure {
            restarts: cfg.restarts,
            last: last_error,
        }),
    }
}
