use proptest::prelude::*;

use mcreg_core::backtest::{drifted_weights, gmv_long_only, gmv_unconstrained, kkt_residual, turnover, wealth_step};
use mcreg_core::matrix::{pair_count, pairs, MatrixKind, SymmetricMatrix};
use mcreg_core::mtest::{k_fwer, single_step, step_down, Mode};
use mcreg_core::panel::origin_correlation_vechs;
use mcreg_core::procedure::Procedure;
use mcreg_core::regularizer::{apply_mask, reference_matrix, shrink_to_pd};
use mcreg_core::resampler::{generate_null, ResamplingPlan};
use mcreg_core::simlab::{draw_replication, DgpSpec, Innovation};
use mcreg_core::{center, CenteredPanel, Centering};

fn panel(n: usize, t: usize, delta: f64, seed: u64) -> CenteredPanel {
    let spec = DgpSpec::new(n, t, delta, Innovation::Normal, seed).unwrap();
    let (_, _, p) = draw_replication(&spec, seed).unwrap();
    center(&p, &Centering::SampleMean).unwrap()
}

fn flip_column(p: &CenteredPanel, col: usize) -> CenteredPanel {
    let (n, t) = (p.n_assets(), p.n_obs());
    let mut cols = Vec::with_capacity(n * t);
    for i in 0..n {
        let s = if i == col { -1.0 } else { 1.0 };
        cols.extend(p.column(i).iter().map(|v| s * v));
    }
    CenteredPanel::from_centered_columns(n, cols).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn step_down_never_exceeds_single_step(n in 2usize..7, t in 12usize..50, delta in 0.0f64..=1.0, seed: u64, kf in 0.0f64..1.0) {
        let p = panel(n, t, delta, seed);
        let obs = origin_correlation_vechs(&p).unwrap();
        let null = generate_null(&p, &ResamplingPlan::new(40, seed ^ 1).unwrap()).unwrap();
        let k = 1 + (kf * pair_count(n) as f64) as usize % pair_count(n);
        let ss = single_step(&obs, &null, k).unwrap();
        let sd = step_down(&obs, &null, k).unwrap();
        for (s, d) in ss.numerators().iter().zip(sd.numerators()) {
            prop_assert!(d <= s);
            prop_assert!((1..=40).contains(d));
        }
        // SS rejections are a subset of SD rejections at every level
        for (s, d) in ss.rejected_at(0.05).iter().zip(sd.rejected_at(0.05)) {
            prop_assert!(!s || d);
        }
    }

    #[test]
    fn any_rejection_agrees_between_ss_and_sd(n in 2usize..7, t in 12usize..50, seed: u64) {
        // the first step-down step is the single-step test, so the
        // "at least one rejection" event is identical for k = 1
        let p = panel(n, t, 0.0, seed);
        let obs = origin_correlation_vechs(&p).unwrap();
        let null = generate_null(&p, &ResamplingPlan::new(20, seed ^ 2).unwrap()).unwrap();
        let ss = k_fwer(&obs, &null, 1, Mode::SingleStep).unwrap().reject_count(0.05);
        let sd = k_fwer(&obs, &null, 1, Mode::StepDown).unwrap().reject_count(0.05);
        prop_assert_eq!(ss > 0, sd > 0);
    }

    #[test]
    fn pvalues_are_nonincreasing_in_k(n in 3usize..7, t in 12usize..50, seed: u64) {
        let p = panel(n, t, 0.6, seed);
        let obs = origin_correlation_vechs(&p).unwrap();
        let null = generate_null(&p, &ResamplingPlan::new(20, seed ^ 3).unwrap()).unwrap();
        for mode in [Mode::SingleStep, Mode::StepDown] {
            let mut prev = k_fwer(&obs, &null, 1, mode).unwrap();
            for k in 2..=pair_count(n) {
                let cur = k_fwer(&obs, &null, k, mode).unwrap();
                for (a, b) in cur.numerators().iter().zip(prev.numerators()) {
                    prop_assert!(a <= b);
                }
                prev = cur;
            }
        }
    }

    #[test]
    fn flipping_an_asset_sign_leaves_pvalues_unchanged(n in 2usize..6, t in 12usize..40, seed: u64, col in 0usize..6) {
        let p = panel(n, t, 0.5, seed);
        let q = flip_column(&p, col % n);
        let plan = ResamplingPlan::new(20, seed ^ 4).unwrap();
        let (np, nq) = (generate_null(&p, &plan).unwrap(), generate_null(&q, &plan).unwrap());
        let op = origin_correlation_vechs(&p).unwrap();
        let oq = origin_correlation_vechs(&q).unwrap();
        let a = step_down(&op, &np, 1).unwrap();
        let b = step_down(&oq, &nq, 1).unwrap();
        prop_assert_eq!(a.numerators(), b.numerators());
    }

    #[test]
    fn null_is_reproducible_and_bounded(n in 2usize..6, t in 8usize..30, seed: u64) {
        let p = panel(n, t, 0.3, seed);
        let plan = ResamplingPlan::new(10, seed).unwrap();
        let a = generate_null(&p, &plan).unwrap();
        let b = generate_null(&p, &plan).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.rows().flatten().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn shrinkage_lifts_spectrum_and_keeps_zeros(n in 2usize..9, extra in 2usize..20, seed: u64, bits: u64) {
        let t = n + extra;
        let p = panel(n, t, 0.8, seed);
        let g = origin_correlation_vechs(&p).unwrap().fill().unwrap();
        let mask: Vec<bool> = (0..pair_count(n)).map(|l| bits >> (l % 64) & 1 == 1).collect();
        let thr = apply_mask(&g, &mask);
        let (reference, theta) = reference_matrix(&g, t).unwrap();
        prop_assert!((0.0..=1.0).contains(&theta));
        let s = shrink_to_pd(&thr, &reference, 0.01).unwrap();
        let lam = s.matrix.to_dense().symmetric_eigen().eigenvalues.min();
        prop_assert!(lam >= 0.01 - 1e-10);
        prop_assert!((s.lambda_min_after - lam).abs() < 1e-8);
        for (i, j) in pairs(n) {
            prop_assert_eq!(thr.get(i, j) == 0.0, s.matrix.get(i, j) == 0.0);
        }
    }

    #[test]
    fn long_only_gmv_is_feasible_and_optimal(n in 2usize..7, seed: u64) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = nalgebra::DMatrix::<f64>::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let s = &a * a.transpose() + nalgebra::DMatrix::<f64>::identity(n, n) * 0.1;
        let sigma = SymmetricMatrix::from_lower(&s, MatrixKind::Covariance).unwrap();
        let qp = gmv_long_only(&sigma, None).unwrap();
        prop_assert!(qp.weights.iter().all(|&w| w >= 0.0));
        prop_assert!((qp.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(kkt_residual(&s, &qp.weights) < 1e-8);
        // warm start from the answer reproduces it
        let again = gmv_long_only(&sigma, Some(&qp.weights)).unwrap();
        for (x, y) in qp.weights.iter().zip(&again.weights) {
            prop_assert!((x - y).abs() < 1e-10);
        }
        let un = gmv_unconstrained(&sigma).unwrap();
        if un.iter().all(|&w| w >= 0.0) {
            for (x, y) in qp.weights.iter().zip(&un) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn drift_keeps_the_budget_and_zero_turnover_at_rest(w in prop::collection::vec(0.01f64..1.0, 2..6), r in prop::collection::vec(-0.2f64..0.2, 6)) {
        let total: f64 = w.iter().sum();
        let w: Vec<f64> = w.iter().map(|x| x / total).collect();
        let row: Vec<f64> = r.iter().take(w.len()).copied().collect();
        let d = drifted_weights(&w, std::slice::from_ref(&row)).unwrap();
        prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert_eq!(turnover(&d, &d).unwrap(), 0.0);
        // without costs one wealth step is the weighted gross return
        let port: f64 = w.iter().zip(&row).map(|(a, b)| a * b).sum();
        prop_assert_eq!(wealth_step(2.0, &w, &row, true, 0.7, 0.0), 2.0 * (1.0 + port));
    }

    #[test]
    fn procedure_strings_round_trip(idx in 0usize..10) {
        let all = ["ss", "sd", "ss:k=log", "sd:k=sqrt", "sd:k=3", "ss:fdp=0.1", "sd:fdp=0.05", "bps:a", "bps:b", "sd:fdp=0"];
        let p: Procedure = all[idx].parse().unwrap();
        let q: Procedure = p.to_string().parse().unwrap();
        prop_assert_eq!(p, q);
    }
}
