mod common;

use common::{dominance_instance, exact_log_likelihood, normal_matrix, random_model, rng};
use nalgebra::DMatrix;
use vgpds::bound::{DataBlock, DataTerm, GradientRecord};
use vgpds::{ArdParams, TemporalKernel, TemporalPrior, VgpdsModel};

#[test]
fn bound_never_exceeds_exact_likelihood_at_the_mean() {
    for seed in 0..20 {
        let (model, mu) = dominance_instance(seed, (seed % 2 == 0).then_some(1e8));
        let rep = model.evaluate_bound().unwrap();
        let exact = exact_log_likelihood(&model.ard, &mu, &model.outputs, model.beta);
        assert!(rep.bound < exact + 1e-9, "seed {seed}: bound {} exceeds exact {exact}", rep.bound);
    }
}

#[test]
fn collapsed_term_is_tight_when_q_is_a_point_mass() {
    for seed in 0..5 {
        let (model, mu) = dominance_instance(seed, Some(1e8));
        let rep = model.evaluate_bound().unwrap();
        let exact = exact_log_likelihood(&model.ard, &mu, &model.outputs, model.beta);
        assert!((rep.fhat - exact).abs() < 1e-4 * (1.0 + exact.abs()), "seed {seed}: {} vs {exact}", rep.fhat);
    }
}

fn with_outputs(model: &VgpdsModel, y: DMatrix<f64>, data: DataTerm) -> VgpdsModel {
    VgpdsModel::new(
        model.temporal().clone(),
        model.times(),
        model.groups(),
        model.ard.clone(),
        model.beta,
        model.state.clone(),
        vec![DataBlock { rows: (0..y.nrows()).collect(), data }],
        y,
    )
    .unwrap()
}

fn grad_diff(a: &GradientRecord, b: &GradientRecord) -> f64 {
    let mut worst = 0.0f64;
    let mut upd = |x: f64, y: f64| worst = worst.max((x - y).abs());
    for (x, y) in a.mu_bar.iter().zip(b.mu_bar.iter()) {
        upd(*x, *y);
    }
    for (x, y) in a.lambda.iter().zip(b.lambda.iter()) {
        upd(*x, *y);
    }
    for (x, y) in a.inducing.iter().zip(b.inducing.iter()) {
        upd(*x, *y);
    }
    for (x, y) in a.ard_weights.iter().zip(&b.ard_weights) {
        upd(*x, *y);
    }
    for (x, y) in a.temporal.iter().zip(&b.temporal) {
        upd(*x, *y);
    }
    upd(a.ard_variance, b.ard_variance);
    upd(a.beta, b.beta);
    worst
}

#[test]
fn outer_product_path_matches_raw_columns() {
    let base = random_model(11, 10, 2, 4, 50, TemporalKernel::rbf(1.0, 2.0), &[0; 10]);
    let y = base.outputs.clone();
    let outer = with_outputs(&base, y.clone(), DataTerm::outer(&y).unwrap());
    let cols = with_outputs(&base, y.clone(), DataTerm::Columns(y));
    let (ra, ga) = outer.evaluate_with_gradients().unwrap();
    let (rb, gb) = cols.evaluate_with_gradients().unwrap();
    assert!((ra.bound - rb.bound).abs() < 1e-9, "{} vs {}", ra.bound, rb.bound);
    assert!(grad_diff(&ga, &gb) < 1e-9, "gradient gap {}", grad_diff(&ga, &gb));
}

#[test]
fn bound_is_invariant_to_output_rotations() {
    let base = random_model(12, 9, 2, 4, 5, TemporalKernel::matern32(1.0, 2.0), &[0; 9]);
    let mut r = rng(99);
    let qr = normal_matrix(&mut r, 5, 5).qr();
    let rotated = &base.outputs * qr.q();
    let turned = with_outputs(&base, rotated.clone(), DataTerm::outer(&rotated).unwrap());
    let a = base.evaluate_bound().unwrap().bound;
    let b = turned.evaluate_bound().unwrap().bound;
    assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()), "{a} vs {b}");
}

#[test]
fn duplicated_outputs_double_the_data_term_only() {
    let base = random_model(13, 8, 2, 3, 3, TemporalKernel::rbf(1.0, 1.5), &[0; 8]);
    let y = &base.outputs;
    let doubled = DMatrix::from_fn(y.nrows(), 2 * y.ncols(), |i, j| y[(i, j % y.ncols())]);
    let twice = with_outputs(&base, doubled.clone(), DataTerm::outer(&doubled).unwrap());
    let a = base.evaluate_bound().unwrap();
    let b = twice.evaluate_bound().unwrap();
    assert_eq!(a.kl, b.kl);
    assert!((b.fhat - 2.0 * a.fhat).abs() < 1e-9 * (1.0 + a.fhat.abs()), "{} vs {}", b.fhat, 2.0 * a.fhat);
}

#[test]
fn kl_vanishes_at_the_prior() {
    let mut model = random_model(14, 10, 3, 4, 2, common::mixed_kernel(), &[0, 0, 0, 0, 1, 1, 1, 1, 1, 1]);
    model.state.mu_bar.fill(0.0);
    model.state.lambda.fill(0.0);
    assert!(model.kl().unwrap().abs() < 1e-10);
}

#[test]
fn kl_is_additive_across_sequences() {
    let groups = [0, 0, 0, 0, 1, 1, 1, 1, 1, 1];
    let model = random_model(15, 10, 2, 4, 2, TemporalKernel::rbf(1.0, 1.5), &groups);
    let joint = model.kl().unwrap();
    let mut parts = 0.0;
    for (lo, hi) in [(0, 4), (4, 10)] {
        let prior = TemporalPrior::with_groups(model.temporal(), &model.times()[lo..hi], &groups[lo..hi]).unwrap();
        let mu_bar = model.state.mu_bar.rows(lo, hi - lo).into_owned();
        let lambda = model.state.lambda.rows(lo, hi - lo).into_owned();
        parts += prior.kl(&mu_bar, &lambda).unwrap();
    }
    assert!((joint - parts).abs() < 1e-10, "{joint} vs {parts}");
}

#[test]
fn kl_does_not_see_mapping_parameters() {
    let mut model = random_model(16, 8, 2, 3, 2, TemporalKernel::rbf(1.0, 1.5), &[0; 8]);
    let before = model.kl().unwrap();
    model.ard = ArdParams::new(3.0, vec![0.1, 7.0]).unwrap();
    model.beta *= 5.0;
    assert_eq!(model.kl().unwrap(), before);
}

#[test]
fn evaluation_is_bitwise_deterministic() {
    let model = random_model(17, 12, 3, 5, 4, common::mixed_kernel(), &[0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1]);
    let (ra, ga) = model.evaluate_with_gradients().unwrap();
    for _ in 0..3 {
        let (rb, gb) = model.evaluate_with_gradients().unwrap();
        assert_eq!(ra.bound.to_bits(), rb.bound.to_bits());
        assert_eq!(grad_diff(&ga, &gb), 0.0);
    }
}
