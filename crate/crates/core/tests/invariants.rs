use proptest::prelude::*;
use remedi_core::datasets::{Body, DatasetSpec, TriangleMixtureSpec, UniformBodySpec};
use remedi_core::estimators::{estimate_knn_kl, estimate_remedi, oracle_kde, oracle_mc};
use remedi_core::gmm::GaussianMixture;
use remedi_core::rng;
use remedi_core::Tensor;

fn shifted(x: &Tensor, c: &[f64]) -> Tensor {
    let mut y = x.clone();
    for i in 0..y.rows() {
        for (v, s) in y.row_mut(i).iter_mut().zip(c) {
            *v += s;
        }
    }
    y
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn estimators_are_translation_invariant(seed in 0u64..1000, c in prop::collection::vec(-5.0f64..5.0, 3)) {
        let spec = DatasetSpec::Gaussian { mean: vec![0.0; 3], std: 1.0 };
        let x = spec.generate(3000, seed).unwrap();
        let y = shifted(&x, &c);

        let a = estimate_knn_kl(&x, 5).unwrap();
        let b = estimate_knn_kl(&y, 5).unwrap();
        prop_assert!((a.value - b.value).abs() < 3.0 * a.std_error);

        let train = spec.generate(2000, seed + 1).unwrap();
        let a = oracle_kde(&train, &x, 0.3).unwrap();
        let b = oracle_kde(&shifted(&train, &c), &y, 0.3).unwrap();
        prop_assert!((a.value - b.value).abs() < 3.0 * a.std_error);

        let shifted_spec = DatasetSpec::Gaussian { mean: c.clone(), std: 1.0 };
        let a = oracle_mc(|v| spec.true_log_density(v).value, &x).unwrap();
        let b = oracle_mc(|v| shifted_spec.true_log_density(v).value, &y).unwrap();
        prop_assert!((a.value - b.value).abs() < 3.0 * a.std_error);

        let base = GaussianMixture::initialize(&x, 2, false, &mut rng::seeded(seed)).unwrap();
        let moved = GaussianMixture::new(
            base.weight_logits().clone(),
            shifted(base.means(), &c),
            base.chol_raw().clone(),
            false,
        ).unwrap();
        let a = estimate_remedi(&base, None, &x, &x).unwrap();
        let b = estimate_remedi(&moved, None, &y, &y).unwrap();
        prop_assert!((a.value - b.value).abs() < 3.0 * a.std_error);
    }

    #[test]
    fn knn_scales_with_log_determinant(seed in 0u64..1000, scale_up in any::<bool>()) {
        let a = if scale_up { 2.0 } else { 0.5 };
        let spec = DatasetSpec::Triangle(TriangleMixtureSpec::default_for(2));
        let x = spec.generate(5000, seed).unwrap();
        let base = estimate_knn_kl(&x, 10).unwrap();
        let scaled = estimate_knn_kl(&x.map(|v| a * v), 10).unwrap();
        let want = 2.0 * f64::ln(a);
        prop_assert!((scaled.value - base.value - want).abs() < 3.0 * base.std_error);
    }

    #[test]
    fn generation_is_deterministic(seed in any::<u64>(), dim in 1usize..6) {
        for spec in [
            DatasetSpec::Triangle(TriangleMixtureSpec::default_for(dim)),
            DatasetSpec::Uniform(UniformBodySpec { body: Body::Ball, dim }),
            DatasetSpec::Uniform(UniformBodySpec { body: Body::Cube, dim }),
        ] {
            let a = spec.generate(50, seed).unwrap();
            let b = spec.generate(50, seed).unwrap();
            prop_assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}

#[test]
fn closed_form_entropies_match_monte_carlo() {
    for dim in [1, 8, 20] {
        let specs = [
            DatasetSpec::Triangle(TriangleMixtureSpec::default_for(dim)),
            DatasetSpec::Uniform(UniformBodySpec { body: Body::Ball, dim }),
            DatasetSpec::Uniform(UniformBodySpec { body: Body::Cube, dim }),
            DatasetSpec::Gaussian { mean: vec![1.0; dim], std: 0.5 },
        ];
        for spec in specs {
            let x = spec.generate(20_000, dim as u64).unwrap();
            let est = oracle_mc(|v| spec.true_log_density(v).value, &x).unwrap();
            let truth = spec.true_entropy().value().unwrap();
            assert!((est.value - truth).abs() <= 3.0 * est.std_error + 1e-12, "{spec:?}: {} vs {truth}", est.value);
        }
    }
}
