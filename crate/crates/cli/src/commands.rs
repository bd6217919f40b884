use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use nalgebra::DMatrix;
use vgpds::harness::{self, Checkpoint, MetricSpec, SynthConfig, TimeSeriesDataset};
use vgpds::optimizer::{self, Method, ParamGroup, TrainConfig, TrainOutcome, TrainStatus};
use vgpds::predictor::{self, Placement, PredictiveMoments, ReconstructConfig};
use vgpds::{linalg, ArdParams, InitConfig, SequenceLayout, VgpdsError, VgpdsModel};

use crate::{parse, EvaluateArgs, GenerateArgs, GradcheckArgs, ModelSource, NnArgs, PlotCommand, ReconstructArgs, SynthArgs, TrainArgs};

fn validation(msg: String) -> anyhow::Error {
    VgpdsError::Validation(msg).into()
}

/// Writes to stdout; a closed pipe downstream is not an error.
fn emit(text: &str) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: String) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_trace(path: &Path, out: &TrainOutcome) -> Result<()> {
    let mut s = String::from("iteration,bound,kl,grad_norm\n");
    for r in &out.trace {
        writeln!(s, "{},{},{},{}", r.iteration, r.bound, r.kl, r.grad_norm)?;
    }
    write_text(path, s)
}

pub fn train(a: TrainArgs) -> Result<u8> {
    let ds = TimeSeriesDataset::load(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    let kernel = parse::kernel(&a.kernel).map_err(|e| validation(format!("{e:#}")))?;
    let method: Method = a.method.parse().map_err(|e| validation(format!("{e}")))?;
    let frozen: BTreeSet<ParamGroup> = parse::groups(&a.freeze).map_err(|e| validation(format!("{e:#}")))?.into_iter().collect();
    let iters: Vec<usize> = parse::numbers(&a.iters).map_err(|e| validation(format!("{e:#}")))?;
    if a.restarts == 0 {
        return Err(validation("--restarts must be at least 1".into()));
    }
    let config = TrainConfig { warmup_iters: a.warmup_iters, iters, tol: a.tol, max_line_search: a.max_line_search, frozen, method };
    config.validate()?;
    let layout = SequenceLayout::from_ids(&ds.seq)?;

    let mut best: Option<TrainOutcome> = None;
    for r in 0..a.restarts {
        let init = InitConfig { latent_dim: a.latent_dim, num_inducing: a.inducing, lambda_init: a.lambda_init, seed: a.seed + r as u64 };
        let model = VgpdsModel::initialize(&ds.y, &ds.times, &layout, kernel.clone(), &init)?;
        let out = optimizer::train(&model, &config)?;
        let bound = out.trace.last().map_or(f64::NEG_INFINITY, |t| t.bound);
        log::info!("restart {r}: bound {bound} ({:?})", out.status);
        if best.as_ref().is_none_or(|b| b.trace.last().map_or(f64::NEG_INFINITY, |t| t.bound) < bound) {
            best = Some(out);
        }
    }
    let out = best.expect("at least one restart");
    if out.status == TrainStatus::LineSearchFailed {
        log::warn!("line search failed; keeping the best parameters found");
    }
    let ckpt = Checkpoint::from_model(&out.model, &a.data.to_string_lossy(), ds.columns.clone(), ds.sequence_ids());
    ckpt.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(p) = &a.trace {
        write_trace(p, &out)?;
    }
    let last = out.trace.last().expect("trace has the initial row");
    eprintln!(
        "{:?} after {} iterations: bound {:.6}, kl {:.6}, |grad|∞ {:.3e}, last ΔF {:.3e}",
        out.status, last.iteration, last.bound, last.kl, out.final_grad_norm, out.final_delta
    );
    Ok(0)
}

struct Loaded {
    ckpt: Checkpoint,
    data: TimeSeriesDataset,
    model: VgpdsModel,
}

fn load_model(src: &ModelSource) -> Result<Loaded> {
    let ckpt = Checkpoint::load(&src.model).with_context(|| format!("loading {}", src.model.display()))?;
    let path = src.data.clone().unwrap_or_else(|| PathBuf::from(&ckpt.dataset.path));
    let data = TimeSeriesDataset::load(&path).with_context(|| format!("loading training data {}", path.display()))?;
    let model = ckpt.into_model(&data.y)?;
    Ok(Loaded { ckpt, data, model })
}

fn placement(ckpt: &Checkpoint, seq: Option<i64>) -> Result<Placement> {
    match seq {
        None => Ok(Placement::NewSequence),
        Some(id) => ckpt
            .sequence_ids
            .iter()
            .position(|&s| s == id)
            .map(Placement::Continue)
            .ok_or_else(|| validation(format!("training data has no sequence {id}"))),
    }
}

/// `a.csv` or `a.csv,b.csv`.
fn out_paths(spec: &str) -> Result<(PathBuf, Option<PathBuf>)> {
    let mut parts = spec.split(',').map(str::trim);
    let first = parts.next().filter(|s| !s.is_empty()).ok_or_else(|| validation("empty --out".into()))?;
    let second = parts.next().map(PathBuf::from);
    if parts.next().is_some() {
        return Err(validation("--out takes at most two paths".into()));
    }
    Ok((PathBuf::from(first), second))
}

fn save_table(path: &Path, y: DMatrix<f64>, times: Vec<f64>, seq: Vec<i64>, names: Vec<String>) -> Result<()> {
    TimeSeriesDataset::new(y, Some(times), Some(seq), Some(names))?
        .save(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn save_moments(spec: &str, m: &PredictiveMoments, times: &[f64], seq: &[i64], names: &[String]) -> Result<()> {
    let (mean_path, var_path) = out_paths(spec)?;
    save_table(&mean_path, m.mean.clone(), times.to_vec(), seq.to_vec(), names.to_vec())?;
    if let Some(p) = var_path {
        save_table(&p, m.var.clone(), times.to_vec(), seq.to_vec(), names.to_vec())?;
    }
    Ok(())
}

pub fn generate(a: GenerateArgs) -> Result<u8> {
    let loaded = load_model(&a.source)?;
    let times = harness::dataset::load_column(&a.times).with_context(|| format!("loading {}", a.times.display()))?;
    let place = placement(&loaded.ckpt, a.continue_seq)?;
    let pred = predictor::forecast_outputs(&loaded.model, &times, place, false)?;
    let seq = vec![a.continue_seq.unwrap_or(0); times.len()];
    save_moments(&a.out, &pred, &times, &seq, &loaded.data.columns)?;
    Ok(0)
}

/// Observed test values, N*×|observed|, from a test file holding all or only the observed columns.
fn observed_values(test: &TimeSeriesDataset, d: usize, observed: &[usize]) -> Result<DMatrix<f64>> {
    if test.dim() == d {
        Ok(linalg::select_cols(&test.y, observed))
    } else if test.dim() == observed.len() {
        Ok(test.y.clone())
    } else {
        Err(validation(format!(
            "test data has {} columns; expected {d} (all) or {} (observed only)",
            test.dim(),
            observed.len()
        )))
    }
}

pub fn reconstruct(a: ReconstructArgs) -> Result<u8> {
    let loaded = load_model(&a.source)?;
    let names = &loaded.data.columns;
    let test = TimeSeriesDataset::load(&a.test).with_context(|| format!("loading {}", a.test.display()))?;
    let observed = parse::columns(&a.observed_cols, names).map_err(|e| validation(format!("{e:#}")))?;
    let place = placement(&loaded.ckpt, a.continue_seq)?;
    let cfg = ReconstructConfig { iters: a.iters, tol: a.tol, placement: place, ..Default::default() };

    let mut means = Vec::new();
    let mut vars = Vec::new();
    let mut times = Vec::new();
    let mut seq = Vec::new();
    let mut missing = Vec::new();
    for id in test.sequence_ids() {
        let part = test.select_sequences(&[id])?;
        let y_obs = observed_values(&part, names.len(), &observed)?;
        let rec = predictor::reconstruct_missing(&loaded.model, &part.times, &y_obs, &observed, &cfg)?;
        if rec.status == TrainStatus::LineSearchFailed {
            log::warn!("sequence {id}: line search failed; using the best parameters found");
        }
        means.push(rec.moments.mean);
        vars.push(rec.moments.var);
        times.extend(part.times);
        seq.extend(part.seq);
        missing = rec.missing;
    }
    let stack = |blocks: &[DMatrix<f64>]| {
        let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
        let mut m = DMatrix::zeros(rows, missing.len());
        let mut at = 0;
        for b in blocks {
            m.rows_mut(at, b.nrows()).copy_from(b);
            at += b.nrows();
        }
        m
    };
    let missing_names: Vec<String> = missing.iter().map(|&j| names[j].clone()).collect();
    let (mean_path, var_path) = out_paths(&a.out)?;
    save_table(&mean_path, stack(&means), times.clone(), seq.clone(), missing_names.clone())?;
    if let Some(p) = var_path {
        save_table(&p, stack(&vars), times, seq, missing_names)?;
    }
    Ok(0)
}

pub fn nn_baseline(a: NnArgs) -> Result<u8> {
    let train = TimeSeriesDataset::load(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    let test = TimeSeriesDataset::load(&a.test).with_context(|| format!("loading {}", a.test.display()))?;
    let observed = parse::columns(&a.observed_cols, &train.columns).map_err(|e| validation(format!("{e:#}")))?;
    let y_obs = observed_values(&test, train.dim(), &observed)?;
    let recon = harness::nn_baseline(&train.y, &y_obs, &observed, a.k)?;
    let names = (0..train.dim()).filter(|j| !observed.contains(j)).map(|j| train.columns[j].clone()).collect();
    save_table(&a.out, recon, test.times, test.seq, names)?;
    Ok(0)
}

/// Reconstruction and the matching truth columns.
fn aligned(recon_path: &Path, truth_path: &Path) -> Result<(TimeSeriesDataset, DMatrix<f64>)> {
    let recon = TimeSeriesDataset::load(recon_path).with_context(|| format!("loading {}", recon_path.display()))?;
    let truth = TimeSeriesDataset::load(truth_path).with_context(|| format!("loading {}", truth_path.display()))?;
    if recon.len() != truth.len() {
        return Err(validation(format!("reconstruction has {} rows, truth has {}", recon.len(), truth.len())));
    }
    let idx = recon
        .columns
        .iter()
        .map(|c| truth.columns.iter().position(|t| t == c).ok_or_else(|| validation(format!("truth has no column '{c}'"))))
        .collect::<Result<Vec<_>>>()?;
    let sel = linalg::select_cols(&truth.y, &idx);
    Ok((recon, sel))
}

pub fn evaluate(a: EvaluateArgs) -> Result<u8> {
    let (recon, truth) = aligned(&a.recon, &a.truth)?;
    let bad = |e: anyhow::Error| validation(format!("{e:#}"));
    let spec = MetricSpec {
        angle_columns: a.angle_cols.as_deref().map(|s| parse::columns(s, &recon.columns)).transpose().map_err(bad)?.unwrap_or_default(),
        weights: a.weights.as_deref().map(parse::numbers::<f64>).transpose().map_err(bad)?,
        joints: a.joints.as_deref().map(parse::numbers::<usize>).transpose().map_err(bad)?,
    };
    let mut report = harness::evaluate(&recon.y, &truth, &spec)?;
    report.method = a.method;
    report.k = a.k;
    let json = serde_json::to_string_pretty(&report)?;
    match a.out {
        Some(p) => write_text(&p, json)?,
        None => emit(&json)?,
    }
    Ok(0)
}

pub fn synth(a: SynthArgs) -> Result<u8> {
    let bad = |e: anyhow::Error| validation(format!("{e:#}"));
    let config = SynthConfig {
        seed: a.seed,
        seq_lengths: parse::numbers(&a.lengths).map_err(bad)?,
        dim: a.dim,
        temporal: parse::kernel(&a.kernel).map_err(bad)?,
        mapping: ArdParams::new(a.mapping_variance, parse::numbers(&a.mapping_weights).map_err(bad)?)?,
        beta: a.beta,
        time_step: a.time_step,
    };
    let s = harness::synth_generate(&config)?;
    s.dataset.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(p) = &a.latents {
        let names = (1..=s.latents.ncols()).map(|q| format!("x{q}")).collect();
        save_table(p, s.latents, s.dataset.times.clone(), s.dataset.seq.clone(), names)?;
    }
    Ok(0)
}

pub fn gradcheck(a: GradcheckArgs) -> Result<u8> {
    let loaded = load_model(&a.source)?;
    let frozen: BTreeSet<ParamGroup> = parse::groups(&a.freeze).map_err(|e| validation(format!("{e:#}")))?.into_iter().collect();
    let report = optimizer::gradcheck(&loaded.model, a.epsilon, a.seed, &frozen, a.max_coords)?;
    emit(&serde_json::to_string_pretty(&report)?)?;
    match a.fail_above {
        Some(tol) if report.worst() > tol => {
            eprintln!("largest relative error {:e} exceeds {tol:e}", report.worst());
            Ok(3)
        }
        _ => Ok(0),
    }
}

pub fn export_plot(cmd: PlotCommand) -> Result<u8> {
    match cmd {
        PlotCommand::Trace { trace, out } => {
            let text = std::fs::read_to_string(&trace).with_context(|| format!("reading {}", trace.display()))?;
            let mut lines = text.lines();
            let header: Vec<&str> = lines.next().unwrap_or("").split(',').map(str::trim).collect();
            if header.first() != Some(&"iteration") {
                return Err(validation(format!("{} is not a training trace", trace.display())));
            }
            let mut s = String::from("iteration,series,value\n");
            for (i, line) in lines.enumerate() {
                let cells: Vec<&str> = line.split(',').map(str::trim).collect();
                if cells.len() != header.len() {
                    return Err(VgpdsError::Parse { line: i as u64 + 2, message: "wrong number of fields".into() }.into());
                }
                for (name, v) in header.iter().zip(&cells).skip(1) {
                    writeln!(s, "{},{name},{v}", cells[0])?;
                }
            }
            write_text(&out, s)?;
        }
        PlotCommand::Ard { model, out } => {
            let ckpt = Checkpoint::load(&model).with_context(|| format!("loading {}", model.display()))?;
            let w = &ckpt.ard.weights;
            let max = w.iter().cloned().fold(0.0, f64::max);
            let mut s = String::from("dimension,weight,relative\n");
            for (q, v) in w.iter().enumerate() {
                writeln!(s, "{},{v},{}", q + 1, if max > 0.0 { v / max } else { 0.0 })?;
            }
            write_text(&out, s)?;
        }
        PlotCommand::Frames { recon, truth, out } => {
            let (r, t) = aligned(&recon, &truth)?;
            let report = harness::evaluate(&r.y, &t, &MetricSpec::default())?;
            let mut s = String::from("frame,t,seq,mse\n");
            for (i, e) in report.per_frame.iter().enumerate() {
                writeln!(s, "{i},{},{},{e}", r.times[i], r.seq[i])?;
            }
            write_text(&out, s)?;
        }
    }
    Ok(0)
}
