//! Maximization of the variational bound.
//!
//! All free parameters are packed into one flat vector (μ̄ raw, λ and every
//! kernel hyperparameter and β in log space, inducing inputs raw) and driven
//! by Møller's scaled conjugate gradients, which only ever accepts steps that
//! do not decrease the bound. Training runs a warmup phase with β frozen and
//! then a schedule of main segments.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bound::{BoundReport, GradientRecord, VgpdsModel};
use crate::error::{Result, VgpdsError};
use crate::kernels::HyperKind;

/// Smallest λ the optimizer will write into a model.
pub const LAMBDA_FLOOR: f64 = 1e-8;

/// Parameter groups that can be frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    MuBar,
    Lambda,
    Inducing,
    ThetaF,
    ThetaX,
    Beta,
    /// Periods of periodic temporal components.
    Period,
    /// Variances of white temporal components.
    White,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::MuBar,
        ParamGroup::Lambda,
        ParamGroup::Inducing,
        ParamGroup::ThetaF,
        ParamGroup::ThetaX,
        ParamGroup::Beta,
        ParamGroup::Period,
        ParamGroup::White,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::MuBar => "mu_bar",
            ParamGroup::Lambda => "lambda",
            ParamGroup::Inducing => "inducing",
            ParamGroup::ThetaF => "theta_f",
            ParamGroup::ThetaX => "theta_x",
            ParamGroup::Beta => "beta",
            ParamGroup::Period => "period",
            ParamGroup::White => "white",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParamGroup {
    type Err = VgpdsError;

    fn from_str(s: &str) -> Result<Self> {
        ParamGroup::ALL
            .iter()
            .copied()
            .find(|g| g.name() == s.trim())
            .ok_or_else(|| VgpdsError::Config(format!("unknown parameter group '{s}'")))
    }
}

/// Training schedule.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Iterations with β held fixed.
    pub warmup_iters: usize,
    /// Main-phase segments; the optimizer restarts at each segment boundary.
    pub iters: Vec<usize>,
    /// Stop a segment once five consecutive accepted steps change the bound by less than this.
    pub tol: f64,
    /// Consecutive rejected steps tolerated before giving up.
    pub max_line_search: usize,
    pub frozen: BTreeSet<ParamGroup>,
    pub method: Method,
}

/// Search-direction rule of the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Scaled conjugate gradients.
    Scg,
    /// Limited-memory BFGS with ten correction pairs.
    #[default]
    Lbfgs,
}

impl FromStr for Method {
    type Err = VgpdsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "scg" => Ok(Method::Scg),
            "lbfgs" => Ok(Method::Lbfgs),
            other => Err(VgpdsError::Config(format!("unknown optimizer '{other}'"))),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            warmup_iters: 50,
            iters: vec![500],
            tol: 1e-6,
            max_line_search: 50,
            frozen: BTreeSet::from([ParamGroup::Period]),
            method: Method::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(VgpdsError::Config("tolerance must be positive".into()));
        }
        if self.max_line_search == 0 {
            return Err(VgpdsError::Config("max line-search steps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStatus {
    Converged,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub bound: f64,
    pub kl: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: VgpdsModel,
    pub trace: Vec<TraceRow>,
    pub status: TrainStatus,
    /// Sup-norm of the flat gradient at the returned parameters.
    pub final_grad_norm: f64,
    /// Change of the bound over the last accepted step.
    pub final_delta: f64,
    /// Number of times a λ entry was raised to [`LAMBDA_FLOOR`].
    pub lambda_clamps: usize,
}

/// Which parameters take part in the flat vector.
#[derive(Debug, Clone)]
struct ActiveSet {
    mu_bar: bool,
    lambda: bool,
    inducing: bool,
    theta_f: bool,
    temporal: Vec<usize>,
    beta: bool,
}

impl ActiveSet {
    fn new(model: &VgpdsModel, frozen: &BTreeSet<ParamGroup>) -> Self {
        let temporal = if frozen.contains(&ParamGroup::ThetaX) {
            Vec::new()
        } else {
            model
                .temporal()
                .hyperparams()
                .iter()
                .enumerate()
                .filter(|(_, hp)| !(hp.kind == HyperKind::Period && frozen.contains(&ParamGroup::Period)))
                .filter(|(_, hp)| !(hp.white && frozen.contains(&ParamGroup::White)))
                .map(|(i, _)| i)
                .collect()
        };
        ActiveSet {
            mu_bar: !frozen.contains(&ParamGroup::MuBar),
            lambda: !frozen.contains(&ParamGroup::Lambda),
            inducing: !frozen.contains(&ParamGroup::Inducing),
            theta_f: !frozen.contains(&ParamGroup::ThetaF),
            temporal,
            beta: !frozen.contains(&ParamGroup::Beta),
        }
    }

    fn pack(&self, model: &VgpdsModel) -> Vec<f64> {
        let mut x = Vec::new();
        if self.mu_bar {
            x.extend(model.state.mu_bar.iter());
        }
        if self.lambda {
            x.extend(model.state.lambda.iter().map(|l| l.max(LAMBDA_FLOOR).ln()));
        }
        if self.inducing {
            x.extend(model.state.inducing.iter());
        }
        if self.theta_f {
            x.extend(model.ard.log_params());
        }
        let lp = model.temporal().log_params();
        x.extend(self.temporal.iter().map(|&i| lp[i]));
        if self.beta {
            x.push(model.beta.ln());
        }
        x
    }

    /// Writes `x` into a copy of `base`; returns the model and the number of λ clamps.
    fn unpack(&self, base: &VgpdsModel, x: &[f64]) -> Result<(VgpdsModel, usize)> {
        let mut model = base.clone();
        let mut pos = 0;
        let mut take = |k: usize| {
            let s = &x[pos..pos + k];
            pos += k;
            s
        };
        if self.mu_bar {
            let k = model.state.mu_bar.len();
            model.state.mu_bar.as_mut_slice().copy_from_slice(take(k));
        }
        let mut clamps = 0;
        if self.lambda {
            let k = model.state.lambda.len();
            for (l, v) in model.state.lambda.iter_mut().zip(take(k)) {
                let e = v.exp();
                if !(e >= LAMBDA_FLOOR) {
                    clamps += 1;
                }
                *l = if e.is_finite() { e.max(LAMBDA_FLOOR) } else { e };
            }
        }
        if self.inducing {
            let k = model.state.inducing.len();
            model.state.inducing.as_mut_slice().copy_from_slice(take(k));
        }
        if self.theta_f {
            let k = model.ard.latent_dim() + 1;
            model.ard.set_log_params(take(k))?;
        }
        if !self.temporal.is_empty() {
            let vals = take(self.temporal.len());
            let mut kern = model.temporal().clone();
            for (&i, v) in self.temporal.iter().zip(vals) {
                kern.set_param(i, v.exp())?;
            }
            if &kern != model.temporal() {
                model.set_temporal(kern)?;
            }
        }
        if self.beta {
            let b = take(1)[0].exp();
            if !(b.is_finite() && b > 0.0) {
                return Err(VgpdsError::NonFinite(format!("β = {b}")));
            }
            model.beta = b;
        }
        Ok((model, clamps))
    }

    /// Flat gradient of `F_v` w.r.t. the packed (log-space where applicable) vector.
    fn flat_grad(&self, model: &VgpdsModel, g: &GradientRecord) -> Vec<f64> {
        let mut out = Vec::new();
        if self.mu_bar {
            out.extend(g.mu_bar.iter());
        }
        if self.lambda {
            out.extend(g.lambda.iter().zip(model.state.lambda.iter()).map(|(d, l)| d * l));
        }
        if self.inducing {
            out.extend(g.inducing.iter());
        }
        if self.theta_f {
            out.push(g.ard_variance * model.ard.variance);
            out.extend(g.ard_weights.iter().zip(&model.ard.weights).map(|(d, w)| d * w));
        }
        let params = model.temporal().params();
        out.extend(self.temporal.iter().map(|&i| g.temporal[i] * params[i]));
        if self.beta {
            out.push(g.beta * model.beta);
        }
        out
    }
}

/// Minimization interface used by [`scg`].
pub trait Objective {
    fn value(&mut self, x: &[f64]) -> Option<f64>;
    fn value_grad(&mut self, x: &[f64]) -> Option<(f64, Vec<f64>)>;
}

#[derive(Debug, Clone)]
pub struct ScgOptions {
    pub max_iters: usize,
    pub tol_f: f64,
    pub max_failures: usize,
}

#[derive(Debug, Clone)]
pub struct ScgOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub status: TrainStatus,
    pub iterations: usize,
    pub last_delta: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scaled conjugate gradients (Møller, 1993), minimizing `obj`.
///
/// `on_iter(iteration, x, f, grad)` is called after every iteration with the
/// current accepted point.
pub fn scg<O, C>(obj: &mut O, x0: &[f64], opts: &ScgOptions, mut on_iter: C) -> Result<ScgOutcome>
where
    O: Objective,
    C: FnMut(usize, &[f64], f64, &[f64]),
{
    const SIGMA0: f64 = 1e-4;
    const BETA_MIN: f64 = 1e-15;
    const BETA_MAX: f64 = 1e100;
    const STALL_STEPS: usize = 5;

    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut fold, mut gradnew) =
        obj.value_grad(&x).ok_or_else(|| VgpdsError::NonFinite("objective at the starting point".into()))?;
    if !fold.is_finite() || gradnew.iter().any(|g| !g.is_finite()) {
        return Err(VgpdsError::NonFinite("objective or gradient at the starting point".into()));
    }
    let outcome = |x: Vec<f64>, f: f64, grad: Vec<f64>, status, iterations, last_delta| ScgOutcome {
        x,
        f,
        grad,
        status,
        iterations,
        last_delta,
    };
    if n == 0 || opts.max_iters == 0 {
        return Ok(outcome(x, fold, gradnew, TrainStatus::MaxIterations, 0, 0.0));
    }

    let mut gradold = gradnew.clone();
    let mut d: Vec<f64> = gradnew.iter().map(|g| -g).collect();
    let mut success = true;
    let mut nsuccess = 0;
    let mut scale = 1.0;
    let (mut mu, mut kappa, mut theta) = (0.0, 0.0, 0.0);
    let mut failures = 0;
    let mut stall = 0;
    let mut last_delta = 0.0;

    for j in 1..=opts.max_iters {
        if success {
            mu = dot(&d, &gradnew);
            if mu >= 0.0 {
                d = gradnew.iter().map(|g| -g).collect();
                mu = dot(&d, &gradnew);
            }
            kappa = dot(&d, &d);
            if kappa < f64::EPSILON {
                on_iter(j, &x, fold, &gradnew);
                return Ok(outcome(x, fold, gradnew, TrainStatus::Converged, j, last_delta));
            }
            let sigma = SIGMA0 / kappa.sqrt();
            let xplus: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + sigma * b).collect();
            theta = match obj.value_grad(&xplus) {
                Some((_, gplus)) => dot(&d, &gplus.iter().zip(&gradnew).map(|(a, b)| a - b).collect::<Vec<_>>()) / sigma,
                None => f64::NAN,
            };
            if !theta.is_finite() {
                // curvature probe failed; fall back to a pure scaled-gradient step
                theta = 0.0;
            }
        }

        let mut delta = theta + scale * kappa;
        if delta <= 0.0 {
            delta = scale * kappa;
            scale -= theta / kappa;
        }
        let alpha = -mu / delta;
        let xnew: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + alpha * b).collect();
        let fnew = obj.value(&xnew).unwrap_or(f64::NAN);
        let comparison = 2.0 * (fnew - fold) / (alpha * mu);

        if comparison.is_finite() && comparison >= 0.0 && fnew <= fold {
            success = true;
            nsuccess += 1;
            failures = 0;
            last_delta = fold - fnew;
            x = xnew;
            if last_delta.abs() < opts.tol_f {
                stall += 1;
            } else {
                stall = 0;
            }
            fold = fnew;
            gradold = std::mem::take(&mut gradnew);
            gradnew = match obj.value_grad(&x) {
                Some((_, g)) if g.iter().all(|v| v.is_finite()) => g,
                _ => return Err(VgpdsError::NonFinite("gradient at an accepted point".into())),
            };
        } else {
            success = false;
            failures += 1;
        }
        on_iter(j, &x, fold, &gradnew);

        if stall >= STALL_STEPS {
            return Ok(outcome(x, fold, gradnew, TrainStatus::Converged, j, last_delta));
        }
        if failures >= opts.max_failures {
            return Ok(outcome(x, fold, gradnew, TrainStatus::LineSearchFailed, j, last_delta));
        }
        if success && dot(&gradnew, &gradnew) == 0.0 {
            return Ok(outcome(x, fold, gradnew, TrainStatus::Converged, j, last_delta));
        }

        let comp = if comparison.is_finite() { comparison } else { -1.0 };
        if comp < 0.25 {
            scale = (4.0 * scale).min(BETA_MAX);
        }
        if comp > 0.75 {
            scale = (0.5 * scale).max(BETA_MIN);
        }
        if nsuccess == n {
            d = gradnew.iter().map(|g| -g).collect();
            nsuccess = 0;
        } else if success {
            let diff: Vec<f64> = gradold.iter().zip(&gradnew).map(|(a, b)| a - b).collect();
            let gamma = dot(&diff, &gradnew) / mu;
            d = d.iter().zip(&gradnew).map(|(di, g)| gamma * di - g).collect();
        }
    }
    Ok(outcome(x, fold, gradnew, TrainStatus::MaxIterations, opts.max_iters, last_delta))
}

/// Limited-memory BFGS with a weak-Wolfe bisection line search, minimizing `obj`.
///
/// Only points satisfying the sufficient-decrease condition are accepted, so
/// the accepted objective values never increase. `opts.max_failures` bounds
/// the objective evaluations of one line search.
pub fn lbfgs<O, C>(obj: &mut O, x0: &[f64], opts: &ScgOptions, memory: usize, mut on_iter: C) -> Result<ScgOutcome>
where
    O: Objective,
    C: FnMut(usize, &[f64], f64, &[f64]),
{
    const C1: f64 = 1e-4;
    const C2: f64 = 0.9;
    const STALL_STEPS: usize = 5;

    let mut x = x0.to_vec();
    let (mut f, mut g) =
        obj.value_grad(&x).ok_or_else(|| VgpdsError::NonFinite("objective at the starting point".into()))?;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(VgpdsError::NonFinite("objective or gradient at the starting point".into()));
    }
    let done = |x: Vec<f64>, f: f64, g: Vec<f64>, status, iterations, last_delta| ScgOutcome {
        x,
        f,
        grad: g,
        status,
        iterations,
        last_delta,
    };
    if x.is_empty() || opts.max_iters == 0 {
        return Ok(done(x, f, g, TrainStatus::MaxIterations, 0, 0.0));
    }

    let mut hist: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)> = std::collections::VecDeque::new();
    let mut stall = 0;
    let mut last_delta = 0.0;
    let mut fresh = true;

    for j in 1..=opts.max_iters {
        // two-loop recursion
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &d);
            for (di, yi) in d.iter_mut().zip(y) {
                *di -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = hist.back() {
            let gamma = dot(s, y) / dot(y, y);
            d.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            for (di, si) in d.iter_mut().zip(s) {
                *di += (a - b) * si;
            }
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            hist.clear();
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }
        if slope == 0.0 {
            on_iter(j, &x, f, &g);
            return Ok(done(x, f, g, TrainStatus::Converged, j, last_delta));
        }

        let mut step = if hist.is_empty() { (1.0 / d.iter().map(|v| v.abs()).sum::<f64>()).min(1.0) } else { 1.0 };
        let (mut lo, mut hi) = (0.0_f64, f64::INFINITY);
        let mut best: Option<(f64, Vec<f64>, f64, Vec<f64>)> = None;
        let mut accepted = None;
        for _ in 0..opts.max_failures {
            let xt: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            match obj.value_grad(&xt) {
                Some((ft, gt)) if ft.is_finite() && gt.iter().all(|v| v.is_finite()) && ft <= f + C1 * step * slope => {
                    if dot(&gt, &d) < C2 * slope {
                        if best.as_ref().is_none_or(|b| ft < b.2) {
                            best = Some((step, xt, ft, gt));
                        }
                        lo = step;
                        step = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * step };
                    } else {
                        accepted = Some((step, xt, ft, gt));
                        break;
                    }
                }
                _ => {
                    hi = step;
                    step = 0.5 * (lo + hi);
                }
            }
        }
        let Some((_, xt, ft, gt)) = accepted.or(best) else {
            if fresh {
                on_iter(j, &x, f, &g);
                return Ok(done(x, f, g, TrainStatus::LineSearchFailed, j, last_delta));
            }
            // retry once from steepest descent before giving up
            hist.clear();
            fresh = true;
            on_iter(j, &x, f, &g);
            continue;
        };
        fresh = false;
        let s: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            if hist.len() == memory {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        last_delta = f - ft;
        if last_delta.abs() < opts.tol_f {
            stall += 1;
        } else {
            stall = 0;
        }
        x = xt;
        f = ft;
        g = gt;
        on_iter(j, &x, f, &g);
        if stall >= STALL_STEPS {
            return Ok(done(x, f, g, TrainStatus::Converged, j, last_delta));
        }
    }
    Ok(done(x, f, g, TrainStatus::MaxIterations, opts.max_iters, last_delta))
}

/// Negative bound of a model as a function of its packed parameters.
struct BoundObjective<'a> {
    base: &'a VgpdsModel,
    active: &'a ActiveSet,
    clamps: usize,
    cache: Vec<(Vec<f64>, BoundReport)>,
}

impl BoundObjective<'_> {
    fn remember(&mut self, x: &[f64], r: BoundReport) {
        if self.cache.len() >= 4 {
            self.cache.remove(0);
        }
        self.cache.push((x.to_vec(), r));
    }

    fn report_at(&mut self, x: &[f64]) -> Option<BoundReport> {
        if let Some((_, r)) = self.cache.iter().rev().find(|(cx, _)| cx.as_slice() == x) {
            return Some(*r);
        }
        let (m, _) = self.active.unpack(self.base, x).ok()?;
        m.evaluate_bound().ok()
    }
}

impl Objective for BoundObjective<'_> {
    fn value(&mut self, x: &[f64]) -> Option<f64> {
        let (m, clamps) = self.active.unpack(self.base, x).ok()?;
        let r = m.evaluate_bound().ok()?;
        self.clamps += clamps;
        self.remember(x, r);
        Some(-r.bound)
    }

    fn value_grad(&mut self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
        let (m, clamps) = self.active.unpack(self.base, x).ok()?;
        let (r, g) = m.evaluate_with_gradients().ok()?;
        self.clamps += clamps;
        self.remember(x, r);
        let grad: Vec<f64> = self.active.flat_grad(&m, &g).iter().map(|v| -v).collect();
        Some((-r.bound, grad))
    }
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Runs one optimizer segment with the given frozen set.
fn run_segment(
    model: &VgpdsModel,
    frozen: &BTreeSet<ParamGroup>,
    iters: usize,
    config: &TrainConfig,
    offset: usize,
    trace: &mut Vec<TraceRow>,
) -> Result<(VgpdsModel, ScgOutcome, usize)> {
    let active = ActiveSet::new(model, frozen);
    let x0 = active.pack(model);
    let mut obj = BoundObjective { base: model, active: &active, clamps: 0, cache: Vec::new() };
    let opts = ScgOptions { max_iters: iters, tol_f: config.tol, max_failures: config.max_line_search };
    let mut rows = Vec::new();
    let result = {
        let mut on_iter = |j: usize, x: &[f64], f: f64, g: &[f64]| rows.push((j, x.to_vec(), f, sup_norm(g)));
        match config.method {
            Method::Scg => scg(&mut obj, &x0, &opts, &mut on_iter)?,
            Method::Lbfgs => lbfgs(&mut obj, &x0, &opts, 10, &mut on_iter)?,
        }
    };
    for (j, x, f, gn) in rows {
        let kl = obj.report_at(&x).map_or(f64::NAN, |r| r.kl);
        trace.push(TraceRow { iteration: offset + j, bound: -f, kl, grad_norm: gn });
    }
    let (trained, _) = active.unpack(model, &result.x)?;
    Ok((trained, result, obj.clamps))
}

/// Trains a model: warmup with β frozen, then the main schedule.
pub fn train(model: &VgpdsModel, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let init = model.evaluate_bound()?;
    let mut trace = vec![TraceRow { iteration: 0, bound: init.bound, kl: init.kl, grad_norm: f64::NAN }];
    let mut current = model.clone();
    let mut status = TrainStatus::MaxIterations;
    let mut final_delta = 0.0;
    let mut clamps = 0;
    let mut offset = 0;

    let mut phases: Vec<(BTreeSet<ParamGroup>, usize)> = Vec::new();
    if config.warmup_iters > 0 {
        let mut f = config.frozen.clone();
        f.insert(ParamGroup::Beta);
        phases.push((f, config.warmup_iters));
    }
    for &it in &config.iters {
        if it > 0 {
            phases.push((config.frozen.clone(), it));
        }
    }

    let mut grad_norm = f64::NAN;
    for (frozen, iters) in phases {
        let (m, res, c) = run_segment(&current, &frozen, iters, config, offset, &mut trace)?;
        offset += res.iterations;
        current = m;
        clamps += c;
        final_delta = res.last_delta;
        grad_norm = sup_norm(&res.grad);
        if res.status == TrainStatus::LineSearchFailed {
            log::warn!("optimizer stopped after {} consecutive rejected steps", config.max_line_search);
        }
        status = res.status;
    }
    if trace.len() > 1 {
        trace[0].grad_norm = trace[1].grad_norm;
    }
    if clamps > 0 {
        log::info!("λ clamped to {LAMBDA_FLOOR} {clamps} times");
    }
    Ok(TrainOutcome { model: current, trace, status, final_grad_norm: grad_norm, final_delta, lambda_clamps: clamps })
}

/// One raw (untransformed) model parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RawCoord {
    MuBar(usize, usize),
    Lambda(usize, usize),
    Inducing(usize, usize),
    ArdVariance,
    ArdWeight(usize),
    Temporal(usize),
    Beta,
}

impl RawCoord {
    pub fn get(self, m: &VgpdsModel) -> f64 {
        match self {
            RawCoord::MuBar(i, q) => m.state.mu_bar[(i, q)],
            RawCoord::Lambda(i, q) => m.state.lambda[(i, q)],
            RawCoord::Inducing(i, q) => m.state.inducing[(i, q)],
            RawCoord::ArdVariance => m.ard.variance,
            RawCoord::ArdWeight(q) => m.ard.weights[q],
            RawCoord::Temporal(i) => m.temporal().params()[i],
            RawCoord::Beta => m.beta,
        }
    }

    pub fn set(self, m: &mut VgpdsModel, v: f64) -> Result<()> {
        match self {
            RawCoord::MuBar(i, q) => m.state.mu_bar[(i, q)] = v,
            RawCoord::Lambda(i, q) => m.state.lambda[(i, q)] = v,
            RawCoord::Inducing(i, q) => m.state.inducing[(i, q)] = v,
            RawCoord::ArdVariance => m.ard.variance = v,
            RawCoord::ArdWeight(q) => m.ard.weights[q] = v,
            RawCoord::Temporal(i) => {
                let mut k = m.temporal().clone();
                k.set_param(i, v)?;
                m.set_temporal(k)?;
            }
            RawCoord::Beta => m.beta = v,
        }
        Ok(())
    }

    pub fn analytic(self, g: &GradientRecord) -> f64 {
        match self {
            RawCoord::MuBar(i, q) => g.mu_bar[(i, q)],
            RawCoord::Lambda(i, q) => g.lambda[(i, q)],
            RawCoord::Inducing(i, q) => g.inducing[(i, q)],
            RawCoord::ArdVariance => g.ard_variance,
            RawCoord::ArdWeight(q) => g.ard_weights[q],
            RawCoord::Temporal(i) => g.temporal[i],
            RawCoord::Beta => g.beta,
        }
    }

    /// True for parameters that must stay positive.
    fn positive(self) -> bool {
        !matches!(self, RawCoord::MuBar(..) | RawCoord::Inducing(..))
    }
}

/// Report-level grouping used by [`gradcheck`]: the six groups of the bound's gradient.
pub fn coords_by_group(model: &VgpdsModel) -> Vec<(ParamGroup, Vec<RawCoord>)> {
    let (n, q) = model.state.mu_bar.shape();
    let m = model.num_inducing();
    let grid = |f: fn(usize, usize) -> RawCoord, rows: usize| -> Vec<RawCoord> {
        (0..q).flat_map(|j| (0..rows).map(move |i| f(i, j))).collect()
    };
    let hps = model.temporal().hyperparams();
    let temporal = |pred: &dyn Fn(&crate::kernels::HyperParam) -> bool| -> Vec<RawCoord> {
        hps.iter().enumerate().filter(|(_, h)| pred(h)).map(|(i, _)| RawCoord::Temporal(i)).collect()
    };
    vec![
        (ParamGroup::MuBar, grid(RawCoord::MuBar, n)),
        (ParamGroup::Lambda, grid(RawCoord::Lambda, n)),
        (ParamGroup::Inducing, grid(RawCoord::Inducing, m)),
        (
            ParamGroup::ThetaF,
            std::iter::once(RawCoord::ArdVariance).chain((0..q).map(RawCoord::ArdWeight)).collect(),
        ),
        (ParamGroup::ThetaX, temporal(&|h| h.kind != HyperKind::Period && !h.white)),
        (ParamGroup::Period, temporal(&|h| h.kind == HyperKind::Period)),
        (ParamGroup::White, temporal(&|h| h.white)),
        (ParamGroup::Beta, vec![RawCoord::Beta]),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupCheck {
    pub group: ParamGroup,
    /// `‖analytic − fd‖∞ / (1 + ‖analytic‖∞)` over the checked coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub epsilon: f64,
    pub groups: Vec<GroupCheck>,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.groups.iter().filter(|g| !g.excluded).fold(0.0, |m, g| m.max(g.max_rel_error))
    }
}

/// Central-difference check of [`VgpdsModel::bound_gradients`].
///
/// At most `max_coords` coordinates per group are checked, chosen with `seed`.
/// Frozen groups are reported as excluded.
pub fn gradcheck(
    model: &VgpdsModel,
    epsilon: f64,
    seed: u64,
    frozen: &BTreeSet<ParamGroup>,
    max_coords: usize,
) -> Result<GradcheckReport> {
    let g = model.bound_gradients()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = Vec::new();
    for (group, coords) in coords_by_group(model) {
        let excluded = frozen.contains(&group) || (group == ParamGroup::Period || group == ParamGroup::White) && frozen.contains(&ParamGroup::ThetaX);
        if excluded || coords.is_empty() {
            groups.push(GroupCheck { group, max_rel_error: 0.0, checked: 0, excluded });
            continue;
        }
        let chosen: Vec<RawCoord> = if coords.len() > max_coords {
            let mut idx = rand::seq::index::sample(&mut rng, coords.len(), max_coords).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| coords[i]).collect()
        } else {
            coords
        };
        let mut max_err = 0.0_f64;
        let mut max_an = 0.0_f64;
        for c in &chosen {
            let v = c.get(model);
            let mut h = epsilon * v.abs().max(1.0);
            if c.positive() && v - h <= 0.0 {
                h = 0.5 * v;
            }
            let mut plus = model.clone();
            c.set(&mut plus, v + h)?;
            let mut minus = model.clone();
            c.set(&mut minus, v - h)?;
            let fd = (plus.evaluate_bound()?.bound - minus.evaluate_bound()?.bound) / (2.0 * h);
            let an = c.analytic(&g);
            max_err = max_err.max((an - fd).abs());
            max_an = max_an.max(an.abs());
        }
        groups.push(GroupCheck { group, max_rel_error: max_err / (1.0 + max_an), checked: chosen.len(), excluded });
    }
    Ok(GradcheckReport { epsilon, groups })
}
