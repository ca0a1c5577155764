mod common;

use ambient_wadc::control::{actuator_mask, design_gain, predict_shift_exact, ControlPlan};
use ambient_wadc::estimator::{estimate_jacobian, sample_covariance, theoretical_covariance, Detrend, DEFAULT_RTOL};
use ambient_wadc::modal::participation_factors;
use ambient_wadc::nalgebra::{Complex, DMatrix};
use ambient_wadc::pmu::{emulate_pmu, read_states_csv, write_states_csv, PmuWindow};
use ambient_wadc::sim::{ModelTag, Trajectory};
use common::{noise_matrix, random_swing};
use proptest::prelude::*;

type C64 = Complex<f64>;

fn scale(l: C64) -> f64 {
    l.norm().max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn decomposition_is_biorthonormal_and_diagonalizes(seed in any::<u64>(), n in 2usize..=6) {
        let sys = random_swing(seed, n);
        let dec = &sys.dec;
        let dim = 2 * n;
        let eye = DMatrix::<C64>::identity(dim, dim);
        prop_assert!((&dec.left * &dec.right - &eye).norm() <= 1e-8);
        let a = sys.a.map(|v| C64::new(v, 0.0));
        let lam = DMatrix::from_diagonal(&ambient_wadc::nalgebra::DVector::from_vec(dec.eigenvalues.clone()));
        let resid = (&a * &dec.right - &dec.right * &lam).norm();
        prop_assert!(resid <= 1e-8 * sys.a.norm().max(1.0), "residual {}", resid);
        for &(k1, k2) in &dec.pairs {
            prop_assert!(dec.eigenvalues[k1].im > 0.0);
            prop_assert!((dec.eigenvalues[k1] - dec.eigenvalues[k2].conj()).norm() <= 1e-8 * scale(dec.eigenvalues[k1]));
        }
    }

    #[test]
    fn participation_columns_and_rows_sum_to_one(seed in any::<u64>(), n in 2usize..=6) {
        let sys = random_swing(seed, n);
        let p = participation_factors(&sys.dec);
        let dim = 2 * n;
        for i in 0..dim {
            let col: C64 = (0..dim).map(|j| p.complex[(j, i)]).sum();
            let row: C64 = (0..dim).map(|k| p.complex[(i, k)]).sum();
            prop_assert!((col - 1.0).norm() <= 1e-8, "mode {} sums to {}", i, col);
            prop_assert!((row - 1.0).norm() <= 1e-8, "state {} sums to {}", i, row);
        }
    }

    #[test]
    fn full_actuation_surgery_is_exact(seed in any::<u64>(), n in 2usize..=6, shift in 0.1f64..3.0) {
        let sys = random_swing(seed, n);
        let dec = &sys.dec;
        let pair = dec.modes()[0].pair;
        let all: Vec<usize> = (0..n).collect();
        let plan = ControlPlan::design(dec, pair, shift, &all).unwrap();
        let r = ambient_wadc::control::evaluate_plan(&sys.a, &plan, dec).unwrap();
        prop_assert!(r.max_non_target_displacement <= 1e-8 * r.spectral_radius.max(1.0));
        for t in r.target_rows {
            prop_assert!((r.open_loop[t].re - r.closed_loop[t].re - shift).abs() <= 1e-8 * r.spectral_radius.max(1.0));
        }
    }

    #[test]
    fn gain_is_real_and_acts_only_on_the_target(seed in any::<u64>(), n in 2usize..=6, shift in 0.0f64..3.0) {
        let sys = random_swing(seed, n);
        let dec = &sys.dec;
        let pair = dec.modes()[0].pair;
        let k = design_gain(dec, pair, shift).unwrap();
        if shift == 0.0 {
            prop_assert!(k.iter().all(|&v| v == 0.0));
        }
        let kc = k.map(|v| C64::new(v, 0.0));
        let (k1, k2) = dec.pairs[pair];
        for j in 0..2 * n {
            let image = &kc * dec.right.column(j);
            let expected = if j == k1 || j == k2 { dec.right.column(j) * C64::new(-shift, 0.0) } else { dec.right.column(j) * C64::new(0.0, 0.0) };
            prop_assert!((image - expected).norm() <= 1e-8 * k.norm().max(1.0));
        }
    }

    #[test]
    fn noise_free_round_trip_recovers_the_jacobian(seed in any::<u64>(), n in 2usize..=6) {
        let sys = random_swing(seed, n);
        let b = noise_matrix(&sys.inertia, &vec![1.0; n]);
        let cov = theoretical_covariance(&sys.a, &b).unwrap();
        let est = estimate_jacobian(&cov, &sys.inertia, &sys.damping, DEFAULT_RTOL).unwrap();
        let err = (&est.jacobian - &sys.jacobian).norm() / sys.jacobian.norm();
        prop_assert!(err < 1e-8, "relative error {}", err);
    }

    #[test]
    fn theoretical_covariance_is_symmetric_psd(seed in any::<u64>(), n in 2usize..=6) {
        let sys = random_swing(seed, n);
        let b = noise_matrix(&sys.inertia, &vec![1.0; n]);
        let c = theoretical_covariance(&sys.a, &b).unwrap().full();
        prop_assert!((&c - c.transpose()).norm() <= 1e-12 * c.norm());
        let min = c.clone().symmetric_eigen().eigenvalues.min();
        prop_assert!(min >= -1e-10 * c.trace());
    }

    #[test]
    fn sample_covariance_is_symmetric_psd(
        n in 2usize..=4,
        values in prop::collection::vec(-1.0f64..1.0, 8 * 30),
        detrend in prop::sample::select(vec![Detrend::None, Detrend::Mean, Detrend::Coi]),
    ) {
        let rows = 30;
        let samples = values[..rows * 2 * n].to_vec();
        let window = PmuWindow::new(20.0, n, samples).unwrap();
        let inertia: Vec<f64> = (0..n).map(|i| 0.05 + 0.01 * i as f64).collect();
        let q = sample_covariance(&window, detrend, &inertia).unwrap();
        for m in [&q.dd, &q.ww] {
            prop_assert!((m - m.transpose()).norm() <= 1e-12 * m.norm().max(f64::MIN_POSITIVE));
            let min = m.clone().symmetric_eigen().eigenvalues.min();
            prop_assert!(min >= -1e-10 * m.trace().max(f64::MIN_POSITIVE));
        }
        prop_assert_eq!(q.dw.transpose(), q.wd.clone());
    }

    #[test]
    fn decimation_picks_every_stride_sample(n in 1usize..=3, steps in 1usize..200, stride in 1usize..=10) {
        prop_assume!(steps > stride);
        let dt = 0.001;
        let rate = 1.0 / (dt * stride as f64);
        let states: Vec<f64> = (0..steps * 2 * n).map(|k| k as f64 * 0.5).collect();
        let traj = Trajectory { dt, n, seed: 0, model: ModelTag::Measured, states };
        let window = emulate_pmu(&traj, rate, 0.0, 0.0, 0).unwrap();
        prop_assert_eq!(window.len(), (steps - 1) / stride + 1);
        for t in 0..window.len() {
            prop_assert_eq!(window.row(t), traj.row(t * stride));
        }
    }

    #[test]
    fn csv_round_trip_is_lossless(n in 2usize..=3, rows in 2usize..20, values in prop::collection::vec(prop::num::f64::NORMAL, 120)) {
        let data = values[..rows * 2 * n].to_vec();
        let mut buf = Vec::new();
        write_states_csv(&mut buf, n, 0.05, &data).unwrap();
        let back = read_states_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back.n, n);
        prop_assert_eq!(back.states, data);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn exact_prediction_matches_full_eigendecomposition(
        seed in any::<u64>(),
        n in 3usize..=6,
        bits in 1u32..63,
        shift in 0.05f64..2.5,
    ) {
        let sys = random_swing(seed, n);
        let dec = &sys.dec;
        let pair = dec.modes()[0].pair;
        let mut actuators: Vec<usize> = (0..n).filter(|g| bits & (1 << g) != 0).collect();
        if actuators.is_empty() {
            actuators.push(0);
        }
        let mask = actuator_mask(n, &actuators).unwrap();
        let exact = predict_shift_exact(dec, &mask, pair, shift).unwrap();
        let plan = ControlPlan::design(dec, pair, shift, &actuators).unwrap();
        let closed = ambient_wadc::modal::decompose(&plan.closed_loop(&sys.a).unwrap()).unwrap();
        for l in exact.eigenvalues {
            let nearest = closed.eigenvalues.iter().map(|c| (c - l).norm()).fold(f64::INFINITY, f64::min);
            prop_assert!(nearest <= 1e-8 * scale(l), "predicted {} off by {}", l, nearest);
        }
    }
}
