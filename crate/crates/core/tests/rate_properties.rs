use covshape::linalg::{self, c, CMat};
use covshape::pilots::EstimateSet;
use covshape::rates::ue_combiner_sm;
use covshape::{delta_metric, mmse_precoder, mrt_precoder, sum_rate_cs, sum_rate_sm, BlockCovariance, PilotMode, ShapingVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rows(h: &CMat) -> Vec<CMat> {
    (0..h.nrows()).map(|i| h.rows(i, 1).into_owned()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn shaping_rates_are_nonnegative_and_phase_blind(
        seed in any::<u64>(), k in 1usize..4, m in 2usize..9, snr_db in -10.0f64..40.0, theta in 0.0f64..6.3
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = linalg::complex_normal_matrix(&mut rng, k, m);
        let noisy = &h + linalg::complex_normal_matrix(&mut rng, k, m) * c(0.1, 0.0);
        let est = EstimateSet { mode: PilotMode::Effective, rows: rows(&noisy) };
        let shaping: Vec<ShapingVector> = (0..k).map(|_| ShapingVector::random(&mut rng, 2)).collect();
        let rho = 10f64.powf(snr_db / 10.0);
        for w in [mrt_precoder(&est, (k * m) as f64).unwrap(), mmse_precoder(&est, rho, 1.0).unwrap()] {
            let base = sum_rate_cs(&rows(&h), &w, &shaping, rho, 1.0).unwrap();
            prop_assert!(base.per_ue.iter().all(|&r| r >= 0.0 && r.is_finite()));
            prop_assert!((base.total - base.per_ue.iter().sum::<f64>()).abs() <= 1e-12 * base.total.max(1.0));
            // a common phase on a UE's true row does not change any rate
            let mut turned = rows(&h);
            turned[0] *= c(theta.cos(), theta.sin());
            let rotated = sum_rate_cs(&turned, &w, &shaping, rho, 1.0).unwrap();
            prop_assert!((rotated.total - base.total).abs() <= 1e-9 * base.total.max(1.0));
        }
    }

    #[test]
    fn multiplexing_rates_are_nonnegative(seed in any::<u64>(), k in 1usize..3, n in 1usize..3, snr_db in -10.0f64..40.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = 8;
        let hs: Vec<CMat> = (0..k).map(|_| linalg::complex_normal_matrix(&mut rng, n, m)).collect();
        let est = EstimateSet { mode: PilotMode::Full, rows: hs.clone() };
        let rho = 10f64.powf(snr_db / 10.0);
        let w = mmse_precoder(&est, rho, 1.0).unwrap();
        let streams = vec![n; k];
        let combiners: Vec<CMat> = hs.iter().enumerate().map(|(i, h)| ue_combiner_sm(h, &w, i * n, n, rho, 1.0).unwrap()).collect();
        let r = sum_rate_sm(&hs, &w, &combiners, &streams, rho, 1.0).unwrap();
        prop_assert!(r.stream_rates.iter().all(|&x| x >= 0.0 && x.is_finite()));
        prop_assert_eq!(r.stream_rates.len(), k * n);
    }

    #[test]
    fn delta_is_a_normalized_correlation(seed in any::<u64>(), rank in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = BlockCovariance::from_dense(2, 4, linalg::random_psd(&mut rng, 8, rank)).unwrap();
        let b = BlockCovariance::from_dense(2, 4, linalg::random_psd(&mut rng, 8, rank)).unwrap();
        let (u, v) = (ShapingVector::random(&mut rng, 2), ShapingVector::random(&mut rng, 2));
        let d = delta_metric(&a, &b, &u, &v).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&d));
        let swapped = delta_metric(&b, &a, &v, &u).unwrap();
        prop_assert!((d - swapped).abs() <= 1e-12 * d.max(1e-300));
    }
}

#[test]
fn mrt_power_matches_channel_energy_on_average() {
    // E‖W‖² = E‖Ĥ‖² / E‖H‖², which is 1 for perfect estimates
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (k, m, trials) = (3, 6, 20_000);
    let mut acc = Vec::with_capacity(trials);
    for _ in 0..trials {
        let h = linalg::complex_normal_matrix(&mut rng, k, m);
        let est = EstimateSet { mode: PilotMode::Effective, rows: rows(&h) };
        acc.push(mrt_precoder(&est, (k * m) as f64).unwrap().norm().powi(2));
    }
    let mean = acc.iter().sum::<f64>() / trials as f64;
    let var = acc.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
    let se = (var / trials as f64).sqrt();
    assert!((mean - 1.0).abs() <= 3.0 * se, "mean {mean} ± {se}");
}
