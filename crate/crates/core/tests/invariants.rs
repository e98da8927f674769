use proptest::prelude::*;

use vmf_pmle::em::{e_step, fit, m_step, EmConfig, KappaUpdate, Responsibilities};
use vmf_pmle::io::{format_dataset, format_model, parse_dataset, parse_model};
use vmf_pmle::model::{mixture_log_density, sample_mixture, sample_uniform_sphere};
use vmf_pmle::special::{bessel_ratio, solve_kappa_exact};
use vmf_pmle::sphere::{covering_net, geodesic_distance, CoveringNet};
use vmf_pmle::{PenaltyConfig, PenaltySpec, UnitVector, VmfComponent, VmfMixture};

fn unit(d: usize) -> impl Strategy<Value = UnitVector> {
    prop::collection::vec(-1.0f64..1.0, d)
        .prop_filter("away from zero", |v| v.iter().map(|x| x * x).sum::<f64>() > 0.01)
        .prop_map(|v| UnitVector::new(v).unwrap())
}

fn mixture(d: usize, p: usize) -> impl Strategy<Value = VmfMixture> {
    (
        prop::collection::vec(0.05f64..1.0, p),
        prop::collection::vec(unit(d), p),
        prop::collection::vec(0.0f64..60.0, p),
    )
        .prop_map(move |(w, mus, ks)| {
            let s: f64 = w.iter().sum();
            let mut w: Vec<f64> = w.iter().map(|x| x / s).collect();
            let head: f64 = w[..p - 1].iter().sum();
            w[p - 1] = 1.0 - head;
            let comps = mus.into_iter().zip(ks).map(|(m, k)| VmfComponent::new(m, k).unwrap()).collect();
            VmfMixture::new(w, comps).unwrap()
        })
}

fn small_config(p: usize, seed: u64, update: KappaUpdate) -> EmConfig {
    let mut cfg = EmConfig::new(p);
    cfg.restarts = 3;
    cfg.kappa_update = update;
    cfg.seed = seed;
    cfg
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metric_axioms(d in 2usize..5, seed in any::<u64>()) {
        let pts = sample_uniform_sphere(d, 3, seed).unwrap();
        let (x, y, z) = (&pts[0], &pts[1], &pts[2]);
        let dxy = geodesic_distance(x, y).unwrap();
        prop_assert_eq!(dxy, geodesic_distance(y, x).unwrap());
        prop_assert!((0.0..=std::f64::consts::PI).contains(&dxy));
        prop_assert_eq!(geodesic_distance(x, x).unwrap(), 0.0);
        let via = geodesic_distance(x, z).unwrap() + geodesic_distance(z, y).unwrap();
        prop_assert!(dxy <= via + 1e-12);
    }

    #[test]
    fn unit_vectors_have_unit_norm(v in unit(5)) {
        let n: f64 = v.coords().iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((n - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn exact_kappa_round_trip(d in prop::sample::select(vec![2usize, 3, 4, 10]), rho in 0.01f64..0.99) {
        let k = solve_kappa_exact(d, rho).unwrap();
        prop_assert!((bessel_ratio(d, k).unwrap() - rho).abs() <= 1e-9);
    }

    #[test]
    fn mixture_density_is_finite(mix in mixture(3, 3), x in unit(3), scale in 1.0f64..2000.0) {
        let comps = mix
            .components()
            .iter()
            .map(|c| VmfComponent::new(c.mu().clone(), (c.kappa() * scale).min(1e5)).unwrap())
            .collect();
        let big = VmfMixture::new(mix.weights().to_vec(), comps).unwrap();
        prop_assert!(mixture_log_density(&big, &x).unwrap().is_finite());
    }

    #[test]
    fn responsibilities_are_normalized(mix in mixture(3, 3), seed in any::<u64>()) {
        let data = sample_uniform_sphere(3, 50, seed).unwrap();
        let resp = e_step(&mix, &data).unwrap();
        for row in resp.rows() {
            prop_assert!(row.iter().all(|&r| r >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn kappa_guard(seed in any::<u64>(), psi in 0.5f64..5.0) {
        // a component holding 1e-3 of every row has ‖r_h‖ ≤ 0.05 < psi
        let data = sample_uniform_sphere(2, 50, seed).unwrap();
        let values: Vec<f64> = (0..50).flat_map(|_| [0.999, 0.001]).collect();
        let resp = Responsibilities::new(50, 2, values).unwrap();
        let mix = m_step(&resp, &data, &PenaltyConfig::fixed(psi).unwrap(), KappaUpdate::Exact).unwrap();
        prop_assert_eq!(mix.components()[1].kappa(), 0.0);
        prop_assert!(mix.components()[0].kappa() >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fitted_mixture_lies_on_simplex(truth in mixture(3, 2), seed in any::<u64>()) {
        let (data, _) = sample_mixture(&truth, 120, seed).unwrap();
        let report = fit(&data, &small_config(2, seed, KappaUpdate::Approx)).unwrap();
        let w = report.mixture.weights();
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for c in report.mixture.components() {
            let n: f64 = c.mu().coords().iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() <= 1e-12);
            prop_assert!(c.kappa() >= 0.0);
        }
    }

    #[test]
    fn exact_updates_ascend(truth in mixture(2, 2), seed in any::<u64>()) {
        let (data, _) = sample_mixture(&truth, 80, seed).unwrap();
        let report = fit(&data, &small_config(2, seed, KappaUpdate::Exact)).unwrap();
        for w in report.pll_trace.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-6 * w[0].abs(), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn approx_updates_nearly_ascend(truth in mixture(3, 2), seed in any::<u64>()) {
        let (data, _) = sample_mixture(&truth, 80, seed).unwrap();
        let report = fit(&data, &small_config(2, seed, KappaUpdate::Approx)).unwrap();
        for w in report.pll_trace.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-3 * w[0].abs(), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn dataset_round_trip(d in 2usize..6, n in 1usize..40, seed in any::<u64>()) {
        let pts = sample_uniform_sphere(d, n, seed).unwrap();
        let back = parse_dataset(&format_dataset(&pts).unwrap(), "mem", false).unwrap();
        prop_assert_eq!(back.points, pts);
    }

    #[test]
    fn model_round_trip(mix in mixture(4, 3)) {
        let (back, meta) = parse_model(&format_model(&mix, None).unwrap()).unwrap();
        prop_assert_eq!(back, mix);
        prop_assert!(meta.is_none());
    }
}

#[test]
fn penalty_shrinks_total_concentration() {
    let truth = VmfMixture::new(
        vec![0.5, 0.5],
        vec![
            VmfComponent::new(UnitVector::from_angle(0.0), 10.0).unwrap(),
            VmfComponent::new(UnitVector::from_angle(2.0), 1.0).unwrap(),
        ],
    )
    .unwrap();
    let mut shrunk = 0;
    for rep in 0..100u64 {
        let (data, _) = sample_mixture(&truth, 100, 1000 + rep).unwrap();
        let mut cfg = small_config(2, rep, KappaUpdate::Exact);
        cfg.penalty = PenaltySpec::Fixed(0.0);
        let free: f64 = fit(&data, &cfg).unwrap().mixture.kappas().iter().sum();
        cfg.penalty = PenaltySpec::Zeta(1.0);
        let pen: f64 = fit(&data, &cfg).unwrap().mixture.kappas().iter().sum();
        if pen <= free {
            shrunk += 1;
        }
    }
    assert!(shrunk >= 95, "penalty shrank total concentration in {shrunk} of 100 replicates");
}

#[test]
fn covering_net_covers_probes() {
    for (d, eps) in [(2, 0.05), (3, 0.1), (4, 0.3)] {
        let net = CoveringNet::new(d, eps, 3).unwrap();
        let probes = sample_uniform_sphere(d, 20_000, 8).unwrap();
        for x in &probes {
            assert!(net.nearest_distance(x).unwrap().unwrap() < eps);
        }
        assert_eq!(covering_net(d, eps, 3).unwrap().len(), net.len());
    }
}
