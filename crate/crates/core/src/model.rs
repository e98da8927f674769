//! von Mises-Fisher components and mixtures: densities, likelihoods, the
//! linear concentration penalty and exact samplers.

use rand::Rng as _;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::error::{domain, Error, Result};
use crate::rng::{self, Rng};
use crate::special::log_norm_const;
use crate::sphere::{a2_constant, check_same_dim, dot, norm, UnitVector};

/// Tolerance on `sum(weights) - 1`.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// A single vMF distribution. The log normalizing constant is cached.
#[derive(Debug, Clone, PartialEq)]
pub struct VmfComponent {
    mu: UnitVector,
    kappa: f64,
    log_c: f64,
}

impl VmfComponent {
    pub fn new(mu: UnitVector, kappa: f64) -> Result<Self> {
        if !(kappa >= 0.0 && kappa.is_finite()) {
            return Err(domain(format!("kappa must be finite and >= 0, got {kappa}")));
        }
        let log_c = log_norm_const(mu.dim(), kappa)?;
        Ok(Self { mu, kappa, log_c })
    }

    pub fn mu(&self) -> &UnitVector {
        &self.mu
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn dim(&self) -> usize {
        self.mu.dim()
    }

    pub fn log_norm_const(&self) -> f64 {
        self.log_c
    }

    #[inline]
    pub(crate) fn log_density_unchecked(&self, x: &[f64]) -> f64 {
        self.log_c + self.kappa * dot(self.mu.coords(), x)
    }
}

/// Finite mixture `sum_k pi_k f(x; mu_k, kappa_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VmfMixture {
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    components: Vec<VmfComponent>,
}

impl VmfMixture {
    pub fn new(weights: Vec<f64>, components: Vec<VmfComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidMixture("a mixture needs at least one component".into()));
        }
        if weights.len() != components.len() {
            return Err(Error::InvalidMixture(format!(
                "{} weights for {} components",
                weights.len(),
                components.len()
            )));
        }
        let d = components[0].dim();
        if let Some(c) = components.iter().find(|c| c.dim() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: c.dim(),
            });
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidMixture("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidMixture(format!("weights sum to {total}, not 1")));
        }
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self {
            weights,
            log_weights,
            components,
        })
    }

    pub fn single(component: VmfComponent) -> Self {
        Self {
            weights: vec![1.0],
            log_weights: vec![0.0],
            components: vec![component],
        }
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn p(&self) -> usize {
        self.components.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[VmfComponent] {
        &self.components
    }

    pub fn kappas(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.kappa).collect()
    }

    /// `log pi_k + log f_k(x)` for every component; `-inf` for zero weights.
    #[inline]
    pub(crate) fn joint_log_terms(&self, x: &[f64], out: &mut [f64]) {
        for (k, c) in self.components.iter().enumerate() {
            out[k] = if self.weights[k] > 0.0 {
                self.log_weights[k] + c.log_density_unchecked(x)
            } else {
                f64::NEG_INFINITY
            };
        }
    }

    pub(crate) fn log_density_unchecked(&self, x: &[f64]) -> f64 {
        if self.p() == 1 {
            return self.components[0].log_density_unchecked(x);
        }
        let mut max = f64::NEG_INFINITY;
        for (k, c) in self.components.iter().enumerate() {
            if self.weights[k] > 0.0 {
                max = max.max(self.log_weights[k] + c.log_density_unchecked(x));
            }
        }
        let mut s = 0.0;
        for (k, c) in self.components.iter().enumerate() {
            if self.weights[k] > 0.0 {
                s += (self.log_weights[k] + c.log_density_unchecked(x) - max).exp();
            }
        }
        max + s.ln()
    }

    /// Ambient gradient of `log g` at `x`: `sum_k r_k(x) kappa_k mu_k`.
    pub(crate) fn log_density_gradient(&self, x: &[f64], grad: &mut [f64]) {
        let mut terms = vec![0.0; self.p()];
        self.joint_log_terms(x, &mut terms);
        let lse = log_sum_exp(&terms);
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (k, c) in self.components.iter().enumerate() {
            let r = (terms[k] - lse).exp();
            if r > 0.0 {
                for (g, m) in grad.iter_mut().zip(c.mu.coords()) {
                    *g += r * c.kappa * m;
                }
            }
        }
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

pub fn log_density(comp: &VmfComponent, x: &UnitVector) -> Result<f64> {
    check_same_dim(comp.mu(), x)?;
    Ok(comp.log_density_unchecked(x.coords()))
}

pub fn mixture_log_density(mix: &VmfMixture, x: &UnitVector) -> Result<f64> {
    check_same_dim(mix.components[0].mu(), x)?;
    Ok(mix.log_density_unchecked(x.coords()))
}

/// Checks that `data` is nonempty and every point has dimension `d`.
pub(crate) fn check_data(data: &[UnitVector], d: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    if let Some(x) = data.iter().find(|x| x.dim() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: x.dim(),
        });
    }
    Ok(())
}

pub fn log_likelihood(mix: &VmfMixture, data: &[UnitVector]) -> Result<f64> {
    check_data(data, mix.dim())?;
    Ok(data.iter().map(|x| mix.log_density_unchecked(x.coords())).sum())
}

/// Sample mean vector `x_bar`.
pub fn sample_mean(data: &[UnitVector]) -> Result<Vec<f64>> {
    let first = data.first().ok_or(Error::EmptyData)?;
    check_data(data, first.dim())?;
    let mut m = vec![0.0; first.dim()];
    for x in data {
        m.iter_mut().zip(x.coords()).for_each(|(a, b)| *a += b);
    }
    let n = data.len() as f64;
    m.iter_mut().for_each(|a| *a /= n);
    Ok(m)
}

/// Circular variance `S_x = 1 - ||x_bar||`.
pub fn circular_variance(data: &[UnitVector]) -> Result<f64> {
    Ok((1.0 - norm(&sample_mean(data)?)).max(0.0))
}

// ---------------------------------------------------------------------------
// Penalty
// ---------------------------------------------------------------------------

/// How `psi_n` scales with the sample size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PenaltyRule {
    /// `psi` does not depend on `n`.
    Fixed,
    /// `psi_n = zeta / n`.
    FixedZeta(f64),
    /// `psi_n = S_x / n`, with `S_x` frozen from the data it was resolved on.
    CircularVariance { s_x: f64 },
}

/// Resolved penalty `p_n(kappa) = -psi_n sum_l kappa_l`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyConfig {
    pub psi_n: f64,
    pub rule: PenaltyRule,
}

impl PenaltyConfig {
    pub fn none() -> Self {
        Self {
            psi_n: 0.0,
            rule: PenaltyRule::Fixed,
        }
    }

    pub fn fixed(psi_n: f64) -> Result<Self> {
        if !(psi_n >= 0.0 && psi_n.is_finite()) {
            return Err(domain(format!("psi_n must be finite and >= 0, got {psi_n}")));
        }
        Ok(Self {
            psi_n,
            rule: PenaltyRule::Fixed,
        })
    }

    pub fn zeta(zeta: f64, n: usize) -> Result<Self> {
        if !(zeta > 0.0 && zeta.is_finite()) {
            return Err(domain(format!("zeta must be positive, got {zeta}")));
        }
        if n == 0 {
            return Err(Error::EmptyData);
        }
        Ok(Self {
            psi_n: zeta / n as f64,
            rule: PenaltyRule::FixedZeta(zeta),
        })
    }

    pub fn circular_variance(data: &[UnitVector]) -> Result<Self> {
        let s_x = circular_variance(data)?;
        Ok(Self {
            psi_n: s_x / data.len() as f64,
            rule: PenaltyRule::CircularVariance { s_x },
        })
    }

    /// The coefficient this rule gives at sample size `n`.
    pub fn psi_at(&self, n: u64) -> f64 {
        match self.rule {
            PenaltyRule::Fixed => self.psi_n,
            PenaltyRule::FixedZeta(z) => z / n as f64,
            PenaltyRule::CircularVariance { s_x } => s_x / n as f64,
        }
    }
}

/// Unresolved penalty choice; resolved against a dataset before fitting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PenaltySpec {
    Fixed(f64),
    Zeta(f64),
    CircularVariance,
}

impl PenaltySpec {
    pub fn resolve(&self, data: &[UnitVector]) -> Result<PenaltyConfig> {
        match *self {
            PenaltySpec::Fixed(psi) => PenaltyConfig::fixed(psi),
            PenaltySpec::Zeta(z) => PenaltyConfig::zeta(z, data.len()),
            PenaltySpec::CircularVariance => PenaltyConfig::circular_variance(data),
        }
    }
}

pub fn penalty_value(cfg: &PenaltyConfig, kappas: &[f64]) -> f64 {
    -cfg.psi_n * kappas.iter().sum::<f64>()
}

pub fn penalized_log_likelihood(mix: &VmfMixture, data: &[UnitVector], cfg: &PenaltyConfig) -> Result<f64> {
    Ok(log_likelihood(mix, data)? + penalty_value(cfg, &mix.kappas()))
}

/// One row of the C3 check.
#[derive(Debug, Clone, PartialEq)]
pub struct C3Row {
    pub n: u64,
    pub psi_n: f64,
    /// `log kappa*(n)`; `kappa*` itself overflows for small `d` and large `n`.
    pub log_kappa_star: f64,
    /// `-psi_n kappa*(n)`.
    pub penalty: f64,
    /// `-3 (log n)^2 log kappa*(n)`.
    pub bound: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyReport {
    pub c1: bool,
    pub c2: bool,
    pub c3: bool,
    /// Smallest grid `n` from which C3 holds for every larger grid point.
    pub c3_from: Option<u64>,
    pub rows: Vec<C3Row>,
}

/// Numeric check of the penalty conditions on a grid of sample sizes.
///
/// C3 is an asymptotic statement, so it is reported as holding when the
/// inequality holds on a nonempty tail of the grid that includes its
/// largest `n`; `rows` gives the per-`n` outcome.
pub fn check_penalty_conditions(cfg: &PenaltyConfig, d: usize, n_grid: &[u64], max_density: f64) -> Result<PenaltyReport> {
    if n_grid.is_empty() || n_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(domain("n grid must be nonempty and strictly increasing"));
    }
    if n_grid[0] < 2 {
        return Err(domain("n grid values must be >= 2"));
    }
    if !(max_density > 0.0) {
        return Err(domain(format!("M must be positive, got {max_density}")));
    }
    if d < 2 {
        return Err(domain(format!("dimension must be >= 2, got {d}")));
    }
    let a2 = a2_constant(d)?;

    // C2: the penalty is never positive, and p_n(kappa)/n shrinks along the grid.
    let mut c2 = n_grid.iter().all(|&n| cfg.psi_at(n) >= 0.0);
    for kappa in [1.0, 10.0, 100.0] {
        let ratios: Vec<f64> = n_grid.iter().map(|&n| cfg.psi_at(n) * kappa / n as f64).collect();
        c2 &= ratios.windows(2).all(|w| w[1] <= w[0]);
        c2 &= ratios.last().copied().unwrap_or(0.0) <= ratios[0];
    }

    let rows: Vec<C3Row> = n_grid
        .iter()
        .map(|&n| {
            let ln_n = (n as f64).ln();
            let log_kappa_star = (max_density * n as f64 * a2 / ln_n).powf(1.0 / (2.0 * d as f64 - 2.0));
            let psi = cfg.psi_at(n);
            let penalty = if psi > 0.0 {
                -(psi.ln() + log_kappa_star).exp()
            } else {
                0.0
            };
            let bound = -3.0 * ln_n * ln_n * log_kappa_star;
            C3Row {
                n,
                psi_n: psi,
                log_kappa_star,
                penalty,
                bound,
                holds: penalty <= bound,
            }
        })
        .collect();
    let tail = rows.iter().rev().take_while(|r| r.holds).count();
    let c3_from = (tail > 0).then(|| rows[rows.len() - tail].n);

    Ok(PenaltyReport {
        c1: true,
        c2,
        c3: c3_from.is_some(),
        c3_from,
        rows,
    })
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// Uniform point on `S^{d-1}` from a normalized Gaussian vector.
pub(crate) fn uniform_point(d: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&v);
        if n > 1e-300 {
            return v.into_iter().map(|c| c / n).collect();
        }
    }
}

/// Householder map `H = I - 2 u u^T / |u|^2` with `H e_1 = mu`.
struct Householder {
    u: Vec<f64>,
    scale: f64,
}

impl Householder {
    fn to(mu: &[f64]) -> Self {
        let mut u: Vec<f64> = mu.iter().map(|m| -m).collect();
        u[0] += 1.0;
        let nn = dot(&u, &u);
        let scale = if nn < 1e-30 { 0.0 } else { 2.0 / nn };
        Self { u, scale }
    }

    fn apply(&self, x: &mut [f64]) {
        if self.scale == 0.0 {
            return;
        }
        let f = self.scale * dot(&self.u, x);
        x.iter_mut().zip(&self.u).for_each(|(xi, ui)| *xi -= f * ui);
    }
}

/// Rejection sampler for `w = mu^T x` (Wood, 1994) plus a uniform tangent
/// direction, rotated onto `mu`.
pub(crate) struct VmfSampler {
    d: usize,
    kappa: f64,
    b: f64,
    x0: f64,
    c: f64,
    beta: Option<Beta<f64>>,
    house: Householder,
}

impl VmfSampler {
    pub(crate) fn new(comp: &VmfComponent) -> Self {
        let d = comp.dim();
        let kappa = comp.kappa();
        let m1 = d as f64 - 1.0;
        let b = m1 / (2.0 * kappa + (4.0 * kappa * kappa + m1 * m1).sqrt());
        let x0 = (1.0 - b) / (1.0 + b);
        let c = kappa * x0 + m1 * (1.0 - x0 * x0).ln();
        let beta = (kappa > 0.0).then(|| Beta::new(m1 / 2.0, m1 / 2.0).expect("valid beta parameters"));
        Self {
            d,
            kappa,
            b,
            x0,
            c,
            beta,
            house: Householder::to(comp.mu().coords()),
        }
    }

    pub(crate) fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        let Some(beta) = &self.beta else {
            return uniform_point(self.d, rng);
        };
        let m1 = self.d as f64 - 1.0;
        let (w, one_minus_w) = loop {
            let z = beta.sample(rng);
            let den = 1.0 - (1.0 - self.b) * z;
            let w = (1.0 - (1.0 + self.b) * z) / den;
            let one_minus_w = 2.0 * self.b * z / den;
            let u: f64 = rng.random();
            if self.kappa * w + m1 * (1.0 - self.x0 * w).ln() - self.c >= u.ln() {
                break (w, one_minus_w);
            }
        };
        let s = (one_minus_w * (1.0 + w)).max(0.0).sqrt();
        let tangent = uniform_point(self.d - 1, rng);
        let mut x = Vec::with_capacity(self.d);
        x.push(w);
        x.extend(tangent.iter().map(|t| s * t));
        self.house.apply(&mut x);
        let n = norm(&x);
        x.iter_mut().for_each(|c| *c /= n);
        x
    }
}

pub(crate) fn sample_vmf_with(comp: &VmfComponent, n: usize, rng: &mut Rng) -> Vec<UnitVector> {
    let sampler = VmfSampler::new(comp);
    (0..n)
        .map(|_| UnitVector::new(sampler.sample(rng)).expect("sampler output is a unit vector"))
        .collect()
}

pub fn sample_vmf(comp: &VmfComponent, n: usize, seed: u64) -> Result<Vec<UnitVector>> {
    if n == 0 {
        return Err(domain("sample size must be >= 1"));
    }
    Ok(sample_vmf_with(comp, n, &mut rng::seeded(seed)))
}

pub(crate) fn sample_mixture_with(mix: &VmfMixture, n: usize, rng: &mut Rng) -> (Vec<UnitVector>, Vec<usize>) {
    let samplers: Vec<VmfSampler> = mix.components.iter().map(VmfSampler::new).collect();
    let mut cumulative = Vec::with_capacity(mix.p());
    let mut acc = 0.0;
    for w in &mix.weights {
        acc += w;
        cumulative.push(acc);
    }
    let last_positive = mix.weights.iter().rposition(|w| *w > 0.0).unwrap_or(0);
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random::<f64>() * acc;
        let k = cumulative
            .iter()
            .zip(&mix.weights)
            .position(|(c, w)| u < *c && *w > 0.0)
            .unwrap_or(last_positive);
        labels.push(k);
        points.push(UnitVector::new(samplers[k].sample(rng)).expect("sampler output is a unit vector"));
    }
    (points, labels)
}

pub fn sample_mixture(mix: &VmfMixture, n: usize, seed: u64) -> Result<(Vec<UnitVector>, Vec<usize>)> {
    if n == 0 {
        return Err(domain("sample size must be >= 1"));
    }
    Ok(sample_mixture_with(mix, n, &mut rng::seeded(seed)))
}

pub(crate) fn sample_uniform_with(d: usize, n: usize, rng: &mut Rng) -> Vec<UnitVector> {
    (0..n)
        .map(|_| UnitVector::new(uniform_point(d, rng)).expect("normalized gaussian"))
        .collect()
}

pub fn sample_uniform_sphere(d: usize, n: usize, seed: u64) -> Result<Vec<UnitVector>> {
    if d < 2 {
        return Err(domain(format!("dimension must be >= 2, got {d}")));
    }
    if n == 0 {
        return Err(domain("sample size must be >= 1"));
    }
    Ok(sample_uniform_with(d, n, &mut rng::seeded(seed)))
}
