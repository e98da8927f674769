//! Replicated simulation studies: sample from a known mixture, fit, align
//! fitted components to the truth and summarize the estimation errors.

use rayon::prelude::*;

use crate::em::{fit, EmConfig};
use crate::error::{Error, Result};
use crate::model::{sample_mixture_with, sample_uniform_with, VmfComponent, VmfMixture};
use crate::rng;
use crate::sphere::{geodesic_distance, UnitVector};

#[derive(Debug, Clone, PartialEq)]
pub enum MeanDirectionRule {
    /// Fresh uniform mean directions for every replicate.
    UniformPerReplicate,
    Fixed(Vec<UnitVector>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub d: usize,
    pub n: usize,
    pub replications: usize,
    pub true_weights: Vec<f64>,
    pub true_kappas: Vec<f64>,
    pub mean_rule: MeanDirectionRule,
    pub em: EmConfig,
    pub seed: u64,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        let p = self.true_weights.len();
        if p == 0 || self.true_kappas.len() != p {
            return Err(Error::InvalidConfig(format!(
                "true_weights ({}) and true_kappas ({}) must be nonempty and of equal length",
                p,
                self.true_kappas.len()
            )));
        }
        if self.replications == 0 {
            return Err(Error::InvalidConfig("replications must be >= 1".into()));
        }
        if self.d < 2 {
            return Err(Error::InvalidConfig(format!("d must be >= 2, got {}", self.d)));
        }
        if self.n < p {
            return Err(Error::InvalidConfig(format!("n = {} is smaller than p = {p}", self.n)));
        }
        if self.em.p != p {
            return Err(Error::InvalidConfig(format!("em.p = {} but the truth has {p} components", self.em.p)));
        }
        if let MeanDirectionRule::Fixed(mus) = &self.mean_rule {
            if mus.len() != p || mus.iter().any(|m| m.dim() != self.d) {
                return Err(Error::InvalidConfig(format!("fixed mean directions must be {p} vectors of dimension {}", self.d)));
            }
        }
        self.em.validate()?;
        // weights and kappas are checked by building a mixture
        self.truth(&vec![UnitVector::basis(self.d, 0)?; p]).map(|_| ())
    }

    fn truth(&self, mus: &[UnitVector]) -> Result<VmfMixture> {
        let comps = mus
            .iter()
            .zip(&self.true_kappas)
            .map(|(m, &k)| VmfComponent::new(m.clone(), k))
            .collect::<Result<Vec<_>>>()?;
        VmfMixture::new(self.true_weights.clone(), comps)
    }

    /// Column labels: `pi1..pi{p-1}`, `mu1..mu{p}`, `kappa1..kappa{p}`.
    pub fn column_names(&self) -> Vec<String> {
        let p = self.true_weights.len();
        let mut names: Vec<String> = (1..p).map(|k| format!("pi{k}")).collect();
        names.extend((1..=p).map(|k| format!("mu{k}")));
        names.extend((1..=p).map(|k| format!("kappa{k}")));
        names
    }
}

/// Absolute errors of one fit against the truth, after alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterErrors {
    /// `|pi_hat_k - pi_k|` for the first `p - 1` weights.
    pub weights: Vec<f64>,
    /// `arccos(mu_hat_k^T mu_k)`.
    pub means: Vec<f64>,
    pub kappas: Vec<f64>,
}

impl ParameterErrors {
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.weights.clone();
        v.extend(&self.means);
        v.extend(&self.kappas);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateResult {
    pub errors: ParameterErrors,
    pub converged: bool,
    pub final_pll: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnSummary {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    /// Monte Carlo standard error of the mean.
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentTable {
    pub d: usize,
    pub n: usize,
    pub replications: usize,
    /// Replicates dropped because every EM restart failed.
    pub failures: usize,
    pub not_converged: usize,
    pub columns: Vec<ColumnSummary>,
    pub replicates: Vec<ReplicateResult>,
}

impl ExperimentTable {
    pub fn column(&self, name: &str) -> Option<&ColumnSummary> {
        self.columns.iter().find(|c| c.name == name)
    }
}

/// Permutation `perm` with `perm[k]` the fitted component matched to true
/// component `k`, minimizing the total geodesic distance between means.
/// Ties go to the lexicographically first permutation.
pub fn align_components(fitted: &VmfMixture, truth: &VmfMixture) -> Result<Vec<usize>> {
    if fitted.p() != truth.p() {
        return Err(Error::InvalidMixture(format!(
            "cannot align {} fitted components with {} true ones",
            fitted.p(),
            truth.p()
        )));
    }
    if fitted.dim() != truth.dim() {
        return Err(Error::DimensionMismatch {
            expected: truth.dim(),
            found: fitted.dim(),
        });
    }
    let p = truth.p();
    if p > 8 {
        return Err(Error::InvalidMixture(format!("brute-force alignment supports p <= 8, got {p}")));
    }
    let mut cost = vec![0.0; p * p];
    for (k, t) in truth.components().iter().enumerate() {
        for (j, f) in fitted.components().iter().enumerate() {
            cost[k * p + j] = geodesic_distance(t.mu(), f.mu())?;
        }
    }
    let mut best = (f64::INFINITY, Vec::new());
    let mut perm: Vec<usize> = (0..p).collect();
    loop {
        let total: f64 = perm.iter().enumerate().map(|(k, &j)| cost[k * p + j]).sum();
        if total < best.0 {
            best = (total, perm.clone());
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    Ok(best.1)
}

/// Advances to the next permutation in lexicographic order.
fn next_permutation(v: &mut [usize]) -> bool {
    let Some(i) = v.windows(2).rposition(|w| w[0] < w[1]) else {
        return false;
    };
    let j = v.iter().rposition(|&x| x > v[i]).expect("a larger element exists");
    v.swap(i, j);
    v[i + 1..].reverse();
    true
}

pub fn error_metrics(fitted: &VmfMixture, truth: &VmfMixture, perm: &[usize]) -> Result<ParameterErrors> {
    let p = truth.p();
    if perm.len() != p || fitted.p() != p {
        return Err(Error::InvalidMixture("permutation does not match the mixtures".into()));
    }
    let fw = fitted.weights();
    let fc = fitted.components();
    let weights = (0..p.saturating_sub(1)).map(|k| (fw[perm[k]] - truth.weights()[k]).abs()).collect();
    let means = truth
        .components()
        .iter()
        .enumerate()
        .map(|(k, t)| geodesic_distance(fc[perm[k]].mu(), t.mu()))
        .collect::<Result<Vec<_>>>()?;
    let kappas = truth
        .components()
        .iter()
        .enumerate()
        .map(|(k, t)| (fc[perm[k]].kappa() - t.kappa()).abs())
        .collect();
    Ok(ParameterErrors { weights, means, kappas })
}

/// One replicate: draw the truth and the data, fit, align, score.
pub fn run_replicate(spec: &ExperimentSpec, index: usize) -> Result<ReplicateResult> {
    let mut rng = rng::stream(spec.seed, index as u64);
    let p = spec.true_weights.len();
    let mus = match &spec.mean_rule {
        MeanDirectionRule::UniformPerReplicate => sample_uniform_with(spec.d, p, &mut rng),
        MeanDirectionRule::Fixed(m) => m.clone(),
    };
    let truth = spec.truth(&mus)?;
    let (data, _) = sample_mixture_with(&truth, spec.n, &mut rng);
    let em = EmConfig {
        seed: rng::mix(spec.seed, index as u64),
        ..spec.em.clone()
    };
    let report = fit(&data, &em)?;
    let perm = align_components(&report.mixture, &truth)?;
    Ok(ReplicateResult {
        errors: error_metrics(&report.mixture, &truth, &perm)?,
        converged: report.converged,
        final_pll: report.final_pll(),
        iterations: report.iterations,
    })
}

/// Runs every replicate (in parallel) and aggregates mean and standard
/// deviation per error column. The result depends only on `spec`.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentTable> {
    spec.validate()?;
    let outcomes: Vec<Result<ReplicateResult>> = (0..spec.replications)
        .into_par_iter()
        .map(|i| run_replicate(spec, i))
        .collect();
    let mut replicates = Vec::with_capacity(outcomes.len());
    let mut failures = 0;
    for o in outcomes {
        match o {
            Ok(r) => replicates.push(r),
            Err(Error::FitFailure { .. }) => failures += 1,
            Err(e) => return Err(e),
        }
    }
    let names = spec.column_names();
    let rows: Vec<Vec<f64>> = replicates.iter().map(|r| r.errors.flatten()).collect();
    let columns = names
        .into_iter()
        .enumerate()
        .map(|(j, name)| {
            let values: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            let (mean, std) = mean_std(&values);
            ColumnSummary {
                name,
                mean,
                std,
                se: std / (values.len() as f64).sqrt(),
            }
        })
        .collect();
    Ok(ExperimentTable {
        d: spec.d,
        n: spec.n,
        replications: spec.replications,
        failures,
        not_converged: replicates.iter().filter(|r| !r.converged).count(),
        columns,
        replicates,
    })
}

/// Pairwise summation; the fixed reduction tree keeps results reproducible.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// Mean and sample standard deviation (`NaN` std for fewer than two values).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = pairwise_sum(v) / n;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let dev: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
    (mean, (pairwise_sum(&dev) / (n - 1.0)).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PenaltySpec;

    fn comp(theta: f64, kappa: f64) -> VmfComponent {
        VmfComponent::new(UnitVector::from_angle(theta), kappa).unwrap()
    }

    fn mix(thetas: &[f64], kappas: &[f64]) -> VmfMixture {
        let p = thetas.len();
        VmfMixture::new(
            vec![1.0 / p as f64; p],
            thetas.iter().zip(kappas).map(|(&t, &k)| comp(t, k)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn alignment_examples() {
        let truth = mix(&[0.0, 1.0, 2.5], &[1.0, 2.0, 3.0]);
        assert_eq!(align_components(&truth, &truth).unwrap(), vec![0, 1, 2]);
        let swapped = mix(&[1.0, 0.0, 2.5], &[2.0, 1.0, 3.0]);
        assert_eq!(align_components(&swapped, &truth).unwrap(), vec![1, 0, 2]);
        let close = mix(&[0.0, 0.3], &[5.0, 5.0]);
        let perturbed = mix(&[0.05, 0.25], &[5.0, 5.0]);
        assert_eq!(align_components(&perturbed, &close).unwrap(), vec![0, 1]);
        // identical fitted means: every permutation ties, keep the first
        let flat = mix(&[0.7, 0.7], &[1.0, 1.0]);
        assert_eq!(align_components(&flat, &close).unwrap(), vec![0, 1]);
        assert!(align_components(&mix(&[0.0], &[1.0]), &close).is_err());
    }

    #[test]
    fn permutations_are_lexicographic() {
        let mut v = vec![0, 1, 2];
        let mut seen = vec![v.clone()];
        while next_permutation(&mut v) {
            seen.push(v.clone());
        }
        assert_eq!(seen.len(), 6);
        assert!(seen.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn metric_examples() {
        let truth = mix(&[0.0, 2.0], &[10.0, 1.0]);
        let e = error_metrics(&truth, &truth, &[0, 1]).unwrap();
        assert!(e.flatten().iter().all(|v| v.abs() < 1e-7));
        let fitted = VmfMixture::new(vec![0.6, 0.4], vec![comp(0.05, 11.0), comp(2.0, 1.0)]).unwrap();
        let e = error_metrics(&fitted, &truth, &[0, 1]).unwrap();
        assert!((e.kappas[0] - 1.0).abs() < 1e-15);
        assert!((e.means[0] - 0.05).abs() < 1e-12);
        assert!((e.weights[0] - 0.1).abs() < 1e-15);
        assert_eq!(e.weights.len(), 1);
    }

    fn small_spec(n: usize, replications: usize) -> ExperimentSpec {
        let mut em = EmConfig::new(2);
        em.penalty = PenaltySpec::Zeta(1.0);
        em.restarts = 2;
        ExperimentSpec {
            d: 2,
            n,
            replications,
            true_weights: vec![0.5, 0.5],
            true_kappas: vec![10.0, 1.0],
            mean_rule: MeanDirectionRule::UniformPerReplicate,
            em,
            seed: 3,
        }
    }

    #[test]
    fn experiment_is_deterministic() {
        let spec = small_spec(100, 6);
        let a = run_experiment(&spec).unwrap();
        let b = run_experiment(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            a.columns.iter().map(|c| c.name.as_str()).collect::<Vec<_>>(),
            ["pi1", "mu1", "mu2", "kappa1", "kappa2"]
        );
        assert!(a.replicates.iter().all(|r| r.errors.means.iter().all(|m| (0.0..=std::f64::consts::PI).contains(m))));
    }

    #[test]
    fn single_component_experiment_is_accurate() {
        let mut em = EmConfig::new(1);
        em.restarts = 1;
        let spec = ExperimentSpec {
            d: 3,
            n: 20_000,
            replications: 1,
            true_weights: vec![1.0],
            true_kappas: vec![5.0],
            mean_rule: MeanDirectionRule::UniformPerReplicate,
            em,
            seed: 1,
        };
        let t = run_experiment(&spec).unwrap();
        assert!(t.column("mu1").unwrap().mean < 0.02);
        assert!(t.column("kappa1").unwrap().mean < 0.3);
        assert!(t.column("pi1").is_none());
    }

    #[test]
    fn spec_validation() {
        let mut spec = small_spec(100, 1);
        spec.true_kappas.pop();
        assert!(run_experiment(&spec).is_err());
        let mut spec = small_spec(100, 0);
        assert!(run_experiment(&spec).is_err());
        spec.replications = 1;
        spec.true_weights = vec![0.7, 0.7];
        assert!(run_experiment(&spec).is_err());
    }

    #[test]
    fn summation_helpers() {
        let v: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 5050.0);
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }
}
