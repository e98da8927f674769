//! Likelihood degeneracy along a collapsing-component sequence, and an
//! empirical check of the ball-count bounds that drive consistency.

use crate::em::RHO_MAX;
use crate::error::{domain, Error, Result};
use crate::model::{
    check_data, log_likelihood, sample_mean, sample_mixture_with, PenaltyConfig, VmfComponent, VmfMixture,
};
use crate::rng;
use crate::special::solve_kappa_exact;
use crate::sphere::{a2_constant, delta_bound, max_density_estimate, norm, CoveringNet, UnitVector, DEFAULT_DENSITY_GRID};

#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceTrace {
    pub q_values: Vec<u64>,
    pub loglik: Vec<f64>,
    pub penalized_loglik: Vec<f64>,
}

impl DivergenceTrace {
    pub fn len(&self) -> usize {
        self.q_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q_values.is_empty()
    }

    /// Index of the first point of the longest nondecreasing suffix of the
    /// log-likelihood column.
    pub fn monotone_tail_start(&self) -> usize {
        let mut start = self.loglik.len().saturating_sub(1);
        while start > 0 && self.loglik[start - 1] <= self.loglik[start] {
            start -= 1;
        }
        start
    }

    /// `loglik[last] - loglik[0]`.
    pub fn growth(&self) -> f64 {
        match (self.loglik.first(), self.loglik.last()) {
            (Some(a), Some(b)) => b - a,
            _ => 0.0,
        }
    }

    /// Index of the maximum of the penalized column (first on ties).
    pub fn penalized_argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.penalized_loglik.iter().enumerate() {
            if *v > self.penalized_loglik[best] {
                best = i;
            }
        }
        best
    }
}

/// `1, 2, 4, ...` up to `q_max`, with `q_max` appended when it is not a
/// power of two.
pub fn geometric_q_grid(q_max: u64) -> Vec<u64> {
    let mut q = Vec::new();
    let mut v = 1u64;
    while v <= q_max {
        q.push(v);
        match v.checked_mul(2) {
            Some(next) => v = next,
            None => break,
        }
    }
    if q.last() != Some(&q_max) && q_max >= 1 {
        q.push(q_max);
    }
    q
}

/// The `q`-th member of the sequence: component `l` centred on observation
/// `m` with `kappa_l = q`, weights `(1 - 1/q) pi_k + 1/(q p)`.
pub fn sequence_member(data: &[UnitVector], base: &VmfMixture, anchor: (usize, usize), q: u64) -> Result<VmfMixture> {
    let (l, m) = anchor;
    if l >= base.p() {
        return Err(domain(format!("anchor component {l} out of range for p = {}", base.p())));
    }
    if m >= data.len() {
        return Err(domain(format!("anchor observation {m} out of range for n = {}", data.len())));
    }
    if q == 0 {
        return Err(domain("q must be >= 1"));
    }
    let p = base.p() as f64;
    let qf = q as f64;
    let weights: Vec<f64> = base.weights().iter().map(|w| (1.0 - 1.0 / qf) * w + 1.0 / (qf * p)).collect();
    let mut comps = base.components().to_vec();
    comps[l] = VmfComponent::new(data[m].clone(), qf)?;
    VmfMixture::new(weights, comps)
}

/// Log-likelihood and penalized log-likelihood along the sequence for each
/// `q` in `q_values`.
pub fn divergence_trace_on(
    data: &[UnitVector],
    base: &VmfMixture,
    anchor: (usize, usize),
    q_values: &[u64],
    penalty: &PenaltyConfig,
) -> Result<DivergenceTrace> {
    check_data(data, base.dim())?;
    if q_values.is_empty() || q_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(domain("q values must be nonempty and strictly increasing"));
    }
    let mut loglik = Vec::with_capacity(q_values.len());
    let mut penalized = Vec::with_capacity(q_values.len());
    for &q in q_values {
        let mix = sequence_member(data, base, anchor, q)?;
        let ll = log_likelihood(&mix, data)?;
        loglik.push(ll);
        penalized.push(ll - penalty.psi_n * mix.kappas().iter().sum::<f64>());
    }
    Ok(DivergenceTrace {
        q_values: q_values.to_vec(),
        loglik,
        penalized_loglik: penalized,
    })
}

/// [`divergence_trace_on`] over [`geometric_q_grid`]`(q_max)`.
pub fn divergence_sequence(
    data: &[UnitVector],
    base: &VmfMixture,
    anchor: (usize, usize),
    q_max: u64,
    penalty: &PenaltyConfig,
) -> Result<DivergenceTrace> {
    if q_max == 0 {
        return Err(domain("q_max must be >= 1"));
    }
    divergence_trace_on(data, base, anchor, &geometric_q_grid(q_max), penalty)
}

/// Observation farthest from its nearest neighbour.
pub fn most_isolated_observation(data: &[UnitVector]) -> Result<usize> {
    let first = data.first().ok_or(Error::EmptyData)?;
    check_data(data, first.dim())?;
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, x) in data.iter().enumerate() {
        let nearest = data
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, y)| x.dot(y))
            .fold(f64::NEG_INFINITY, f64::max);
        // smallest maximum inner product = largest nearest-neighbour distance
        let isolation = -nearest;
        if isolation > best.0 {
            best = (isolation, i);
        }
    }
    Ok(best.1)
}

/// Two-component starting point for the sequence: component 0 sits on
/// observation `m` with weight `1/n` (its concentration is replaced by `q`),
/// component 1 is the single-vMF maximum likelihood fit to all of the data.
pub fn anchored_base_mixture(data: &[UnitVector], m: usize) -> Result<VmfMixture> {
    let xbar = sample_mean(data)?;
    let rho = norm(&xbar);
    let d = data[0].dim();
    let mu = if rho > 0.0 {
        UnitVector::new(xbar)?
    } else {
        UnitVector::basis(d, 0)?
    };
    let kappa = solve_kappa_exact(d, rho.min(RHO_MAX))?;
    let anchor = data.get(m).ok_or_else(|| domain(format!("observation {m} out of range")))?;
    let w = 1.0 / data.len() as f64;
    VmfMixture::new(
        vec![w, 1.0 - w],
        vec![VmfComponent::new(anchor.clone(), 1.0)?, VmfComponent::new(mu, kappa)?],
    )
}

// ---------------------------------------------------------------------------
// Ball counts
// ---------------------------------------------------------------------------

/// Upper end of the fixed regime: `eps^{d-1} < XI0`.
pub const XI0: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpsilonMode {
    /// `log n / (M n A_2) <= eps^{d-1} < xi_0`, bounds `2 delta` and `4 delta`.
    FixedRegime,
    /// `eps^{d-1}` below `log n / (M n A_2)`, bound `2 (log n)^2 / n`.
    SmallRegime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BallCountRow {
    pub n: usize,
    pub epsilon: f64,
    /// `delta(eps) = M A_2 eps^{d-1}`.
    pub delta: f64,
    /// Bound the row is judged against (`2 delta` or `2 (log n)^2 / n`).
    pub bound: f64,
    /// Secondary bound (`4 delta` in the fixed regime, otherwise `bound`).
    pub uniform_bound: f64,
    /// Largest ball fraction seen in any trial.
    pub max_fraction: f64,
    /// Trials whose largest ball fraction exceeded `bound`.
    pub violations: usize,
    pub uniform_violations: usize,
    pub net_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BallCountReport {
    pub mode: EpsilonMode,
    pub max_density: f64,
    pub trials: usize,
    pub rows: Vec<BallCountRow>,
    /// No violation in any trial at the largest `n`.
    pub pass: bool,
}

/// Values of `eps` for sample size `n`.
pub fn epsilon_grid(mode: EpsilonMode, d: usize, n: usize, max_density: f64, points: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(domain("n must be >= 2"));
    }
    let a2 = a2_constant(d)?;
    let threshold = (n as f64).ln() / (max_density * n as f64 * a2);
    let e = 1.0 / (d as f64 - 1.0);
    let powers: Vec<f64> = match mode {
        EpsilonMode::FixedRegime => {
            let hi = 0.999 * XI0;
            if threshold >= hi {
                return Err(domain(format!("n = {n} is too small for the fixed regime")));
            }
            let points = points.max(2);
            (0..points)
                .map(|i| threshold * (hi / threshold).powf(i as f64 / (points - 1) as f64))
                .collect()
        }
        EpsilonMode::SmallRegime => [0.9, 0.5, 0.1].iter().map(|f| f * threshold).collect(),
    };
    Ok(powers.into_iter().map(|v| v.powf(e)).collect())
}

/// Largest fraction of `data` inside `B_eps(eta)` over the net points `eta`.
fn max_ball_fraction(data: &[UnitVector], net: &CoveringNet, epsilon: f64) -> Result<f64> {
    let mut counts = vec![0u32; net.len()];
    let mut hits = Vec::new();
    for x in data {
        net.within_into(x, epsilon, &mut hits)?;
        for &j in &hits {
            counts[j] += 1;
        }
    }
    Ok(counts.iter().copied().max().unwrap_or(0) as f64 / data.len() as f64)
}

/// Monte Carlo check of the ball-count bounds. For each `n` and `eps`,
/// draws `trials` samples of size `n`, takes the largest fraction of the
/// sample in an `eps`-ball centred on a point of an `eps`-covering net and
/// compares it with the bound of the regime.
pub fn verify_ball_count_bounds(
    truth: &VmfMixture,
    n_values: &[usize],
    mode: EpsilonMode,
    trials: usize,
    seed: u64,
) -> Result<BallCountReport> {
    if trials == 0 {
        return Err(domain("trials must be >= 1"));
    }
    if n_values.is_empty() || n_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(domain("n values must be nonempty and strictly increasing"));
    }
    let d = truth.dim();
    let m = max_density_estimate(truth, DEFAULT_DENSITY_GRID)?;
    let mut rows = Vec::new();
    for (ni, &n) in n_values.iter().enumerate() {
        let eps_grid = epsilon_grid(mode, d, n, m, 5)?;
        let ln_n = (n as f64).ln();
        let nets: Vec<CoveringNet> = eps_grid
            .iter()
            .enumerate()
            .map(|(k, &eps)| CoveringNet::new(d, eps, rng::mix(seed, k as u64)))
            .collect::<Result<Vec<_>>>()?;
        let mut n_rows: Vec<BallCountRow> = eps_grid
            .iter()
            .enumerate()
            .map(|(k, &eps)| {
                let delta = delta_bound(m, d, eps)?;
                let (bound, uniform_bound) = match mode {
                    EpsilonMode::FixedRegime => (2.0 * delta, 4.0 * delta),
                    EpsilonMode::SmallRegime => (2.0 * ln_n * ln_n / n as f64, 2.0 * ln_n * ln_n / n as f64),
                };
                Ok(BallCountRow {
                    n,
                    epsilon: eps,
                    delta,
                    bound,
                    uniform_bound,
                    max_fraction: 0.0,
                    violations: 0,
                    uniform_violations: 0,
                    net_size: nets[k].len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        for t in 0..trials {
            let mut rng = rng::stream(seed, (ni * trials + t) as u64);
            let (data, _) = sample_mixture_with(truth, n, &mut rng);
            for (row, net) in n_rows.iter_mut().zip(&nets) {
                let frac = max_ball_fraction(&data, net, row.epsilon)?;
                row.max_fraction = row.max_fraction.max(frac);
                row.violations += usize::from(frac > row.bound);
                row.uniform_violations += usize::from(frac > row.uniform_bound);
            }
        }
        rows.append(&mut n_rows);
    }
    let largest = *n_values.last().expect("nonempty");
    let pass = rows.iter().filter(|r| r.n == largest).all(|r| r.violations == 0);
    Ok(BallCountReport {
        mode,
        max_density: m,
        trials,
        rows,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::sample_uniform_sphere;
    use std::f64::consts::PI;

    #[test]
    fn q_grid() {
        assert_eq!(geometric_q_grid(1), vec![1]);
        assert_eq!(geometric_q_grid(8), vec![1, 2, 4, 8]);
        assert_eq!(geometric_q_grid(10), vec![1, 2, 4, 8, 10]);
        assert_eq!(*geometric_q_grid(10_000).last().unwrap(), 10_000);
    }

    #[test]
    fn sequence_weights_sum_to_one() {
        let data = sample_uniform_sphere(2, 30, 1).unwrap();
        let base = anchored_base_mixture(&data, 3).unwrap();
        for q in geometric_q_grid(100_000) {
            let m = sequence_member(&data, &base, (0, 3), q).unwrap();
            assert!((m.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert_eq!(m.components()[0].kappa(), q as f64);
            assert_eq!(m.components()[0].mu(), &data[3]);
        }
        assert!(sequence_member(&data, &base, (2, 0), 1).is_err());
        assert!(sequence_member(&data, &base, (0, 30), 1).is_err());
    }

    #[test]
    fn trace_grows_like_half_log_q_and_penalty_bounds_it() {
        let data = sample_uniform_sphere(2, 50, 7).unwrap();
        let m = most_isolated_observation(&data).unwrap();
        let base = anchored_base_mixture(&data, m).unwrap();
        let cfg = PenaltyConfig::zeta(1.0, data.len()).unwrap();
        let trace = divergence_sequence(&data, &base, (0, m), 100_000, &cfg).unwrap();
        assert!(trace.loglik.iter().chain(&trace.penalized_loglik).all(|v| v.is_finite()));
        assert!(trace.monotone_tail_start() < trace.len() - 3);
        // c_2(q) e^q grows like sqrt(q / (2 pi)), so the tail gains close to
        // (1/2) log 2 per doubling of q once the anchor dominates its point
        let k = trace.len() - 2;
        let step = trace.loglik[k] - trace.loglik[k - 1];
        assert!(step > 0.0 && step < 0.5 * 2f64.ln() && step > 0.4 * 2f64.ln(), "{step}");
        assert!(trace.penalized_argmax() < trace.len() - 1);
        let tail = &trace.penalized_loglik[trace.penalized_argmax()..];
        assert!(tail.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn single_row_trace() {
        let data = sample_uniform_sphere(3, 10, 2).unwrap();
        let base = anchored_base_mixture(&data, 0).unwrap();
        let t = divergence_sequence(&data, &base, (0, 0), 1, &PenaltyConfig::none()).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.loglik, t.penalized_loglik);
    }

    #[test]
    fn isolated_observation() {
        let mut data: Vec<UnitVector> = (0..10).map(|i| UnitVector::from_angle(0.01 * i as f64)).collect();
        data.push(UnitVector::from_angle(2.0));
        assert_eq!(most_isolated_observation(&data).unwrap(), 10);
    }

    #[test]
    fn epsilon_grids() {
        let n = 100_000;
        let m = 1.0 / (4.0 * PI);
        let t = (n as f64).ln() / (m * n as f64 * 8.0 * PI);
        let fixed = epsilon_grid(EpsilonMode::FixedRegime, 3, n, m, 5).unwrap();
        assert!((fixed[0].powi(2) - t).abs() < 1e-12 * t.max(1.0));
        assert!((fixed[4].powi(2) - 0.0999).abs() < 1e-12);
        let small = epsilon_grid(EpsilonMode::SmallRegime, 3, n, m, 5).unwrap();
        assert!(small.iter().all(|e| e.powi(2) < t));
        // delta at the lower end is log n / n
        assert!((delta_bound(m, 3, fixed[0]).unwrap() - (n as f64).ln() / n as f64).abs() < 1e-15);
    }

    #[test]
    fn ball_counts_for_uniform_sphere() {
        let uniform = VmfMixture::single(VmfComponent::new(UnitVector::basis(3, 2).unwrap(), 0.0).unwrap());
        let fixed = verify_ball_count_bounds(&uniform, &[20_000], EpsilonMode::FixedRegime, 2, 5).unwrap();
        assert!(fixed.pass, "{fixed:?}");
        assert!((fixed.max_density - 1.0 / (4.0 * PI)).abs() < 1e-14);
        let small = verify_ball_count_bounds(&uniform, &[20_000], EpsilonMode::SmallRegime, 2, 5).unwrap();
        assert!(small.pass);
        assert!(fixed.rows.iter().all(|r| r.max_fraction > 0.0));
    }

    #[test]
    fn ball_fraction_matches_brute_force() {
        let data = sample_uniform_sphere(3, 3000, 9).unwrap();
        let net = CoveringNet::new(3, 0.2, 1).unwrap();
        let frac = max_ball_fraction(&data, &net, 0.2).unwrap();
        let brute = net
            .points()
            .map(|eta| data.iter().filter(|x| x.dot(&eta).clamp(-1.0, 1.0).acos() < 0.2).count())
            .max()
            .unwrap() as f64
            / 3000.0;
        assert_eq!(frac, brute);
    }
}
