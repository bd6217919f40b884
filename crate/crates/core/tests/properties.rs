mod common;

use common::{dominance_instance, exact_log_likelihood, normal_matrix, prop_config, random_kernel, random_model, random_times, rng};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use vgpds::bound::{DataBlock, DataTerm};
use vgpds::predictor::{self, Placement, ReconstructConfig};
use vgpds::psi::{psi_bundle, MomentSet};
use vgpds::temporal_prior::build_prior;
use vgpds::{linalg, ArdParams, SequenceLayout, TemporalKernel, TemporalPrior, VgpdsModel};

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a, v| a.max(v.abs()))
}

fn random_ard(r: &mut rand_chacha::ChaCha8Rng, q: usize) -> ArdParams {
    ArdParams::new(r.random_range(0.5..2.0), (0..q).map(|_| r.random_range(0.1..2.0)).collect()).unwrap()
}

proptest! {
    #![proptest_config(prop_config(64))]

    #[test]
    fn temporal_gram_is_symmetric_and_factorizes(seed in any::<u64>(), n in 1usize..15, family in 0usize..5) {
        let mut r = rng(seed);
        let k = random_kernel(&mut r, family);
        let t = random_times(&mut r, n);
        let mut g = k.gram_sym(&t).unwrap();
        prop_assert!(max_abs(&(&g - g.transpose())) <= 1e-15 * max_abs(&g));
        for i in 0..n {
            g[(i, i)] += 1e-6 * k.diagonal_value();
        }
        prop_assert!(g.cholesky().is_some());
    }

    #[test]
    fn ard_gram_is_symmetric_and_factorizes(seed in any::<u64>(), n in 1usize..15, q in 1usize..5) {
        let mut r = rng(seed);
        let ard = random_ard(&mut r, q);
        let x = normal_matrix(&mut r, n, q);
        let mut g = ard.gram(&x, &x).unwrap();
        prop_assert!(max_abs(&(&g - g.transpose())) <= 1e-15 * max_abs(&g));
        for i in 0..n {
            g[(i, i)] += 1e-6 * ard.variance;
        }
        prop_assert!(g.cholesky().is_some());
    }

    #[test]
    fn grams_are_translation_invariant(seed in any::<u64>(), n in 1usize..10, family in 0usize..5, shift in -20.0f64..20.0) {
        let mut r = rng(seed);
        let k = random_kernel(&mut r, family);
        let t = random_times(&mut r, n);
        let moved: Vec<f64> = t.iter().map(|v| v + shift).collect();
        let a = k.gram_sym(&t).unwrap();
        let b = k.gram_sym(&moved).unwrap();
        prop_assert!(max_abs(&(&a - &b)) <= 1e-9 * max_abs(&a));

        let ard = random_ard(&mut r, 3);
        let x = normal_matrix(&mut r, n, 3);
        let offset = DMatrix::from_fn(n, 3, |_, j| shift * (j as f64 + 1.0));
        let a = ard.gram(&x, &x).unwrap();
        let b = ard.gram(&(&x + &offset), &(&x + &offset)).unwrap();
        prop_assert!(max_abs(&(&a - &b)) <= 1e-9 * ard.variance);
    }

    #[test]
    fn sum_gram_is_the_sum_of_component_grams(seed in any::<u64>(), n in 1usize..10) {
        let mut r = rng(seed);
        let k = random_kernel(&mut r, 4);
        let t = random_times(&mut r, n);
        let s = random_times(&mut r, n + 1);
        let mut sym = DMatrix::zeros(n, n);
        let mut cross = DMatrix::zeros(n, n + 1);
        for c in k.leaves() {
            sym += c.gram_sym(&t).unwrap();
            cross += c.gram(&t, &s).unwrap();
        }
        prop_assert_eq!(k.gram_sym(&t).unwrap(), sym);
        prop_assert_eq!(k.gram(&t, &s).unwrap(), cross);
    }

    #[test]
    fn kernel_gradients_match_central_differences(seed in any::<u64>(), n in 1usize..6, family in 0usize..5) {
        let mut r = rng(seed);
        let k = random_kernel(&mut r, family);
        let t = random_times(&mut r, n);
        for i in 0..k.num_hyperparams() {
            let v = k.param(i).unwrap();
            let h = 1e-6 * v;
            let at = |x: f64| {
                let mut kk = k.clone();
                kk.set_param(i, x).unwrap();
                kk.gram_sym(&t).unwrap()
            };
            let fd = (at(v + h) - at(v - h)) / (2.0 * h);
            let an = k.gram_sym_grad(&t, i).unwrap();
            prop_assert!(max_abs(&(&an - &fd)) / (1.0 + max_abs(&an)) < 1e-5, "hyperparameter {}", i);
        }
    }

    #[test]
    fn kl_is_non_negative_and_vanishes_at_the_prior(seed in any::<u64>(), n in 1usize..12, q in 1usize..4, family in 0usize..5) {
        let mut r = rng(seed);
        let k = random_kernel(&mut r, family);
        let prior = TemporalPrior::with_groups(&k, &random_times(&mut r, n), &vec![0; n]).unwrap();
        let mu = normal_matrix(&mut r, n, q);
        let lam = DMatrix::from_fn(n, q, |_, _| r.random_range(0.0..4.0));
        prop_assert!(prior.kl(&mu, &lam).unwrap() >= -1e-10);
        let zero = DMatrix::zeros(n, q);
        prop_assert!(prior.kl(&zero, &zero).unwrap().abs() < 1e-10);
    }

    #[test]
    fn kl_is_additive_across_sequences(seed in any::<u64>(), a in 1usize..10, b in 1usize..10, family in 0usize..5) {
        let mut r = rng(seed);
        let k = random_kernel(&mut r, family);
        let (ta, tb) = (random_times(&mut r, a), random_times(&mut r, b));
        let times: Vec<f64> = ta.iter().chain(&tb).copied().collect();
        let joint = build_prior(&k, &times, &SequenceLayout::new(vec![(0, a), (a, a + b)]).unwrap()).unwrap();
        let mu = normal_matrix(&mut r, a + b, 2);
        let lam = DMatrix::from_fn(a + b, 2, |_, _| r.random_range(0.1..3.0));
        let part = |t: &[f64], start: usize, len: usize| {
            TemporalPrior::with_groups(&k, t, &vec![0; len])
                .unwrap()
                .kl(&mu.rows(start, len).into_owned(), &lam.rows(start, len).into_owned())
                .unwrap()
        };
        let split = part(&ta, 0, a) + part(&tb, a, b);
        let whole = joint.kl(&mu, &lam).unwrap();
        prop_assert!((whole - split).abs() <= 1e-10 * (1.0 + whole.abs()), "{} vs {}", whole, split);
    }

    #[test]
    fn stable_posterior_matches_dense_inversion(seed in any::<u64>(), n in 1usize..20, family in 0usize..5) {
        let mut r = rng(seed);
        let k = random_kernel(&mut r, family);
        let prior = TemporalPrior::with_groups(&k, &random_times(&mut r, n), &vec![0; n]).unwrap();
        let mu = DVector::from_fn(n, |_, _| r.random_range(-1.0..1.0));
        let lam = DVector::from_fn(n, |_, _| r.random_range(0.05..3.0));
        let post = prior.posterior(&mu, &lam).unwrap();
        let kinv = prior.cov().clone().try_inverse().unwrap();
        let direct = (kinv + DMatrix::from_diagonal(&lam)).try_inverse().unwrap();
        prop_assert!(max_abs(&(&post.cov - &direct)) <= 1e-8 * max_abs(&direct));
        prop_assert!(post.cov.clone().cholesky().is_some());
    }

    #[test]
    fn psi2_is_symmetric_positive_semidefinite(seed in any::<u64>(), n in 1usize..6, m in 1usize..6, q in 1usize..4) {
        let mut r = rng(seed);
        let ard = random_ard(&mut r, q);
        let moments = MomentSet::new(normal_matrix(&mut r, n, q), DMatrix::from_fn(n, q, |_, _| r.random_range(0.01..2.0))).unwrap();
        let z = normal_matrix(&mut r, m, q);
        let psi2 = psi_bundle(&ard, &moments, &z).unwrap().psi2;
        let norm = max_abs(&psi2);
        prop_assert!(max_abs(&(&psi2 - psi2.transpose())) < 1e-12);
        prop_assert!(psi2.symmetric_eigen().eigenvalues.min() > -1e-10 * norm);
    }

    #[test]
    fn psi_statistics_approach_kernel_matrices_as_variance_vanishes(seed in any::<u64>(), n in 1usize..6, m in 1usize..6, q in 1usize..4) {
        let mut r = rng(seed);
        let ard = random_ard(&mut r, q);
        let x = normal_matrix(&mut r, n, q);
        let z = normal_matrix(&mut r, m, q);
        let bundle = psi_bundle(&ard, &MomentSet::new(x.clone(), DMatrix::from_element(n, q, 1e-12)).unwrap(), &z).unwrap();
        let knm = ard.gram(&x, &z).unwrap();
        prop_assert!(max_abs(&(&bundle.psi1 - &knm)) < 1e-6 * ard.variance);
        prop_assert!(max_abs(&(&bundle.psi2 - knm.transpose() * &knm)) < 1e-6 * ard.variance * ard.variance * n as f64);
    }
}

proptest! {
    #![proptest_config(prop_config(24))]

    #[test]
    fn bound_is_invariant_to_output_rotations(seed in any::<u64>(), family in 0usize..5) {
        let mut r = rng(seed);
        let model = random_model(seed, 7, 2, 4, 4, random_kernel(&mut r, family), &[0; 7]);
        let qr = normal_matrix(&mut r, 4, 4).qr();
        let y = &model.outputs * qr.q();
        let rotated = VgpdsModel::new(
            model.temporal().clone(),
            model.times(),
            model.groups(),
            model.ard.clone(),
            model.beta,
            model.state.clone(),
            vec![DataBlock { rows: (0..7).collect(), data: DataTerm::outer(&y).unwrap() }],
            y,
        )
        .unwrap();
        let (a, b) = (model.evaluate_bound().unwrap().bound, rotated.evaluate_bound().unwrap().bound);
        prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()), "{} vs {}", a, b);
    }

    #[test]
    fn bound_is_collapsed_term_minus_kl_and_deterministic(seed in any::<u64>(), n in 2usize..9, m in 1usize..5) {
        let mut r = rng(seed);
        let model = random_model(seed, n, 2, m, 3, random_kernel(&mut r, 4), &vec![0; n]);
        let rep = model.evaluate_bound().unwrap();
        prop_assert!((rep.bound - (rep.fhat - rep.kl)).abs() <= 1e-12 * (1.0 + rep.bound.abs()));
        prop_assert!(rep.kl >= -1e-10);
        let again = model.evaluate_bound().unwrap();
        prop_assert_eq!(rep.bound.to_bits(), again.bound.to_bits());
    }

    #[test]
    fn bound_never_exceeds_exact_likelihood(seed in any::<u64>(), confident in any::<bool>()) {
        let (model, mu) = dominance_instance(seed, confident.then_some(1e8));
        let bound = model.evaluate_bound().unwrap().bound;
        let exact = exact_log_likelihood(&model.ard, &mu, &model.outputs, model.beta);
        prop_assert!(bound < exact + 1e-9, "{} vs {}", bound, exact);
    }

    #[test]
    fn forecast_variances_are_non_negative(seed in any::<u64>(), family in 0usize..5, k in 1usize..6, new_seq in any::<bool>()) {
        let mut r = rng(seed);
        let model = random_model(seed, 8, 2, 4, 3, random_kernel(&mut r, family), &[0; 8]);
        let t: Vec<f64> = (0..k).map(|_| r.random_range(-2.0..8.0)).collect();
        let place = if new_seq { Placement::NewSequence } else { Placement::Continue(0) };
        let latent = predictor::forecast_latent(&model, &t, place).unwrap();
        prop_assert!(latent.var.iter().all(|v| *v >= 0.0));
        let out = predictor::forecast_outputs(&model, &t, place, true).unwrap();
        prop_assert!(out.var.iter().all(|v| *v >= out.noise));
        for (i, c) in out.cov.unwrap().iter().enumerate() {
            for d in 0..c.nrows() {
                prop_assert!((c[(d, d)] - out.var[(i, d)]).abs() <= 1e-10 * out.var[(i, d)]);
            }
        }
    }

    #[test]
    fn latent_variance_shrinks_as_lambda_grows(seed in any::<u64>(), family in 0usize..5, t_star in 0.0f64..5.0) {
        let mut r = rng(seed);
        let mut model = random_model(seed, 8, 1, 4, 3, random_kernel(&mut r, family), &[0; 8]);
        let mut last = f64::INFINITY;
        for scale in [0.01, 0.1, 1.0, 10.0, 100.0] {
            model.state.lambda = DMatrix::from_element(8, 1, scale);
            let v = predictor::forecast_latent(&model, &[t_star], Placement::Continue(0)).unwrap().var[(0, 0)];
            prop_assert!(v <= last * (1.0 + 1e-12) + 1e-15, "λ={}: {} after {}", scale, v, last);
            last = v;
        }
    }

    #[test]
    fn zero_iteration_reconstruction_is_the_forecast(seed in any::<u64>(), k in 1usize..5) {
        let mut r = rng(seed);
        let model = random_model(seed, 8, 2, 4, 4, random_kernel(&mut r, 3), &[0; 8]);
        let t: Vec<f64> = (1..=k).map(|i| 4.0 + 0.5 * i as f64).collect();
        let observed = [0usize, 2];
        let y_obs = normal_matrix(&mut r, k, 2);
        let cfg = ReconstructConfig { iters: 0, placement: Placement::Continue(0), ..Default::default() };
        let rec = predictor::reconstruct_missing(&model, &t, &y_obs, &observed, &cfg).unwrap();
        prop_assert_eq!(rec.bound_before.to_bits(), rec.bound_after.to_bits());
        let fc = predictor::forecast_outputs(&model, &t, Placement::Continue(0), false).unwrap();
        let fc_mean = linalg::select_cols(&fc.mean, &rec.missing);
        let fc_var = linalg::select_cols(&fc.var, &rec.missing);
        prop_assert!(max_abs(&(&rec.moments.mean - &fc_mean)) <= 1e-10 * (1.0 + max_abs(&fc_mean)));
        prop_assert!(max_abs(&(&rec.moments.var - &fc_var)) <= 1e-10 * max_abs(&fc_var));
    }
}

#[test]
fn white_noise_leaves_cross_covariances_untouched() {
    let k = TemporalKernel::sum(vec![TemporalKernel::rbf(1.0, 2.0), TemporalKernel::white(0.5)]);
    let t = [1.0, 2.0];
    let sym = k.gram_sym(&t).unwrap();
    let cross = k.gram(&t, &t).unwrap();
    assert_eq!(sym[(0, 0)] - cross[(0, 0)], 0.5);
    assert_eq!(sym[(0, 1)], cross[(0, 1)]);
}
