use proptest::prelude::*;
use rrfb_core::fb::{grad_log_norm_const, log_norm_const};
use rrfb_core::inference::{bray_curtis, permanova, DistanceMatrix};
use rrfb_core::nalgebra::DVector;
use rrfb_core::rng::stream;
use rrfb_core::rrfb::{latent_from_blocks, rectify_renormalize, RrfbObservation};

fn params(max_p: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2..=max_p).prop_flat_map(|p| (proptest::collection::vec(0.0f64..8.0, p), proptest::collection::vec(-5.0f64..5.0, p)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn log_norm_const_shift((lambda, gamma) in params(6), c in -3.0f64..6.0) {
        let base = log_norm_const(&lambda, &gamma).unwrap().log_value;
        let shifted: Vec<f64> = lambda.iter().map(|l| l + c).collect();
        let v = log_norm_const(&shifted, &gamma).unwrap().log_value;
        prop_assert!((v - base + c).abs() < 1e-9);
    }

    #[test]
    fn lambda_gradient_sums_to_minus_one((lambda, gamma) in params(6)) {
        let (dl, dg) = grad_log_norm_const(&lambda, &gamma).unwrap();
        prop_assert!((dl.iter().sum::<f64>() + 1.0).abs() < 1e-9);
        // E[x²] ∈ [0, 1] and ‖E[x]‖ ≤ 1
        prop_assert!(dl.iter().all(|d| *d <= 1e-12 && *d >= -1.0 - 1e-12));
        prop_assert!(dg.iter().map(|g| g * g).sum::<f64>() <= 1.0 + 1e-9);
    }

    #[test]
    fn log_norm_const_sign_flip_symmetry((lambda, gamma) in params(5), k in 0usize..5) {
        let k = k % gamma.len();
        let mut flipped = gamma.clone();
        flipped[k] = -flipped[k];
        let a = log_norm_const(&lambda, &gamma).unwrap().log_value;
        let b = log_norm_const(&lambda, &flipped).unwrap().log_value;
        prop_assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn rectification_lands_on_the_orthant(z in proptest::collection::vec(-1.0f64..1.0, 2..8)) {
        let z = DVector::from_vec(z);
        prop_assume!(z.iter().any(|v| *v > 1e-6));
        let x = rectify_renormalize(&(&z / z.norm())).unwrap();
        prop_assert!((x.x.norm() - 1.0).abs() < 1e-12);
        prop_assert!(x.x.iter().all(|v| *v >= 0.0));
        prop_assert_eq!(x.m(), z.iter().filter(|v| **v <= 0.0).count());
        let again = rectify_renormalize(&x.x).unwrap();
        prop_assert_eq!(again.x, x.x);
    }

    #[test]
    fn latent_reconstruction_rectifies_back(
        pos in proptest::collection::vec(0.05f64..1.0, 1..5),
        neg in proptest::collection::vec(0.05f64..1.0, 1..4),
        delta in 0.01f64..0.99,
    ) {
        let mut v: Vec<f64> = pos.clone();
        v.extend(std::iter::repeat_n(0.0, neg.len()));
        let x = DVector::from_vec(v);
        let obs = RrfbObservation::new(&x / x.norm(), 0.0).unwrap();
        let nn = neg.iter().map(|a| a * a).sum::<f64>().sqrt();
        let u: Vec<f64> = neg.iter().map(|a| -a / nn).collect();
        let z = latent_from_blocks(delta, &u, &obs.blocks).unwrap();
        prop_assert!((z.norm() - 1.0).abs() < 1e-12);
        let back = rectify_renormalize(&z).unwrap();
        prop_assert!((&back.x - &obs.x).amax() < 1e-12);
        let d: f64 = z.iter().map(|v| v.max(0.0).powi(2)).sum();
        prop_assert!((d - delta).abs() < 1e-12);
    }

    #[test]
    fn bray_curtis_is_a_bounded_symmetric_dissimilarity(
        a in proptest::collection::vec(0.0f64..1.0, 4),
        b in proptest::collection::vec(0.0f64..1.0, 4),
    ) {
        let norm = |v: &[f64]| { let s: f64 = v.iter().sum(); v.iter().map(|x| x / s.max(1e-300)).collect::<Vec<_>>() };
        prop_assume!(a.iter().sum::<f64>() > 1e-3 && b.iter().sum::<f64>() > 1e-3);
        let (x, y) = (norm(&a), norm(&b));
        let d = bray_curtis(&x, &y);
        prop_assert!((0.0..=1.0 + 1e-15).contains(&d));
        prop_assert_eq!(d, bray_curtis(&y, &x));
        prop_assert_eq!(bray_curtis(&x, &x), 0.0);
    }

    #[test]
    fn pseudo_f_ignores_group_names(seed in 0u64..1000, n in 6usize..20) {
        let dm = DistanceMatrix::from_fn(n, |i, j| (((i * 31 + j * 17 + seed as usize) % 23) as f64 + 1.0) / 23.0);
        let labels: Vec<usize> = (0..n).map(|i| usize::from(i % 3 == 0)).collect();
        let flipped: Vec<usize> = labels.iter().map(|l| 1 - l).collect();
        let a = permanova(&dm, &labels, 0, &mut stream(seed, "p", 0)).unwrap();
        let b = permanova(&dm, &flipped, 0, &mut stream(seed, "p", 0)).unwrap();
        prop_assert!((a.pseudo_f - b.pseudo_f).abs() <= 1e-12 * a.pseudo_f.abs().max(1.0));
    }
}
