mod common;

use std::collections::BTreeSet;

use common::{mixed_kernel, random_model};
use vgpds::optimizer::{gradcheck, train, Method, ParamGroup, TrainConfig, TrainStatus};
use vgpds::{TemporalKernel, VgpdsModel};

fn short_config(method: Method) -> TrainConfig {
    TrainConfig { warmup_iters: 10, iters: vec![40, 20], method, ..Default::default() }
}

fn same_parameters(a: &VgpdsModel, b: &VgpdsModel) -> bool {
    a.state == b.state && a.ard == b.ard && a.beta == b.beta && a.temporal() == b.temporal()
}

#[test]
fn zero_iterations_leave_the_model_alone() {
    let model = random_model(1, 10, 2, 4, 3, TemporalKernel::rbf(1.0, 2.0), &[0; 10]);
    let cfg = TrainConfig { warmup_iters: 0, iters: vec![0], ..Default::default() };
    let out = train(&model, &cfg).unwrap();
    assert_eq!(out.trace.len(), 1);
    assert_eq!(out.trace[0].bound, model.evaluate_bound().unwrap().bound);
    assert!(same_parameters(&out.model, &model));
}

#[test]
fn accepted_bounds_never_decrease() {
    for (seed, method) in [(2, Method::Lbfgs), (3, Method::Scg), (4, Method::Lbfgs), (5, Method::Scg)] {
        let model = random_model(seed, 14, 2, 5, 4, mixed_kernel(), &[0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1]);
        let out = train(&model, &short_config(method)).unwrap();
        assert!(out.trace.len() > 1);
        for w in out.trace.windows(2) {
            assert!(w[1].bound >= w[0].bound - 1e-9, "{method:?} seed {seed}: {} after {}", w[1].bound, w[0].bound);
        }
        assert_eq!(out.trace.last().unwrap().bound, out.model.evaluate_bound().unwrap().bound);
    }
}

#[test]
fn warmup_keeps_beta_fixed() {
    let model = random_model(6, 10, 2, 4, 3, TemporalKernel::rbf(1.0, 2.0), &[0; 10]);
    let cfg = TrainConfig { warmup_iters: 15, iters: vec![0], ..Default::default() };
    let out = train(&model, &cfg).unwrap();
    assert_eq!(out.model.beta, model.beta);
    assert_ne!(out.model.state, model.state);
}

#[test]
fn frozen_groups_do_not_move() {
    let model = random_model(7, 10, 2, 4, 3, mixed_kernel(), &[0; 10]);
    let cfg = TrainConfig {
        warmup_iters: 0,
        iters: vec![30],
        frozen: BTreeSet::from([ParamGroup::Inducing, ParamGroup::ThetaX, ParamGroup::ThetaF]),
        ..Default::default()
    };
    let out = train(&model, &cfg).unwrap();
    assert_eq!(out.model.state.inducing, model.state.inducing);
    assert_eq!(out.model.temporal(), model.temporal());
    assert_eq!(out.model.ard, model.ard);
}

#[test]
fn training_is_bit_reproducible() {
    for method in [Method::Lbfgs, Method::Scg] {
        let model = random_model(8, 12, 2, 5, 4, mixed_kernel(), &[0; 12]);
        let a = train(&model, &short_config(method)).unwrap();
        let b = train(&model, &short_config(method)).unwrap();
        assert!(same_parameters(&a.model, &b.model));
        let bits = |t: &[vgpds::optimizer::TraceRow]| t.iter().map(|r| r.bound.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.trace), bits(&b.trace));
    }
}

#[test]
fn fitted_variational_parameters_are_self_consistent() {
    let model = random_model(9, 10, 2, 4, 3, TemporalKernel::matern32(1.0, 0.8), &[0; 10]);
    let frozen: BTreeSet<ParamGroup> = ParamGroup::ALL
        .into_iter()
        .filter(|g| !matches!(g, ParamGroup::MuBar | ParamGroup::Lambda))
        .collect();
    let cfg = TrainConfig { warmup_iters: 0, iters: vec![5000], tol: 1e-13, frozen, ..Default::default() };
    let out = train(&model, &cfg).unwrap();
    assert_eq!(out.lambda_clamps, 0);
    let g = out.model.bound_gradients().unwrap();
    let s = &out.model.state;
    let rel = |a: f64, b: f64| (a - b).abs() / (1.0 + a.abs().max(b.abs()));
    for (mb, d) in s.mu_bar.iter().zip(g.dfhat_dmu.iter()) {
        assert!(rel(*mb, *d) < 1e-4, "μ̄ {mb} vs ∂F̂/∂μ {d} ({:?})", out.status);
    }
    for (l, d) in s.lambda.iter().zip(g.dfhat_ds.iter()) {
        assert!(rel(*l, -2.0 * d) < 1e-4, "λ {l} vs -2∂F̂/∂s {} ({:?})", -2.0 * d, out.status);
    }
}

#[test]
fn gradcheck_is_deterministic_and_tight() {
    let model = random_model(10, 10, 2, 4, 3, mixed_kernel(), &[0; 10]);
    let frozen = BTreeSet::new();
    let a = gradcheck(&model, 1e-6, 5, &frozen, 6).unwrap();
    let b = gradcheck(&model, 1e-6, 5, &frozen, 6).unwrap();
    assert_eq!(a, b);
    assert!(a.worst() < 1e-5, "{a:?}");
}

#[test]
fn converged_runs_report_small_steps() {
    let model = random_model(11, 8, 1, 3, 2, TemporalKernel::rbf(1.0, 2.0), &[0; 8]);
    let cfg = TrainConfig { warmup_iters: 0, iters: vec![3000], tol: 1e-6, ..Default::default() };
    let out = train(&model, &cfg).unwrap();
    assert_eq!(out.status, TrainStatus::Converged);
    assert!(out.final_delta.abs() < 1e-6);
}
