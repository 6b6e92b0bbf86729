//! The rescaled training loop, its metrics, and two one-dimensional demos.
//!
//! Each iteration computes the gradient of the batch loss plus
//! `lambda/2 |theta|^2`, turns it into a direction, measures the curvature
//! along that direction on the same batch, and steps by `ell * r_k`.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use curvature_core::engine::{
    backward_range, forward_range, run_curvature, run_forward, CostMeter, Curvature, CurvatureRun, Network, TapeStore,
};
use curvature_core::layers::{Layer, LayerKind};
use curvature_core::optim::{apply_update, clamp_robbins_monro, descent_fraction, PrecondState};
use curvature_core::rescale::{RescaleOutput, RescaleState};
use curvature_core::{BatchView, ParamVec, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{build_layers, init_network, DatasetConfig, RunConfig};
use crate::data::{self, Dataset, FeatureMemory};
use crate::error::{Result, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Iteration,
    Epoch,
}

/// One CSV line. Iteration rows leave the per-epoch columns empty and
/// epoch rows leave the per-iteration columns empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub kind: RowKind,
    pub epoch: usize,
    pub iteration: u64,
    pub train_loss: f64,
    pub effective_step: Option<f64>,
    pub ell: Option<f64>,
    pub r_k: Option<f64>,
    pub c_k: Option<f64>,
    pub c_tilde: Option<f64>,
    pub l_tilde: Option<f64>,
    pub dir_dot_grad: Option<f64>,
    pub q_n: Option<f64>,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub pass_units: Option<f64>,
    pub peak_activation_slots: Option<usize>,
}

pub const METRICS_HEADER: [&str; 16] = [
    "kind",
    "epoch",
    "iteration",
    "train_loss",
    "effective_step",
    "ell",
    "r_k",
    "c_k",
    "c_tilde",
    "l_tilde",
    "dir_dot_grad",
    "q_n",
    "test_loss",
    "test_accuracy",
    "pass_units",
    "peak_activation_slots",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: RunConfig,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub final_test_loss: Option<f64>,
    pub final_test_accuracy: Option<f64>,
    pub q_n: Vec<f64>,
    pub iterations: u64,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub params: ParamVec,
    pub summary: RunSummary,
}

/// Train and test splits.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub test: Option<Dataset>,
}

pub fn load_splits(config: &RunConfig) -> Result<Splits> {
    match &config.dataset {
        DatasetConfig::Blobs {
            classes,
            per_class,
            dim,
            center_scale,
            test_per_class,
            seed,
        } => {
            let seed = seed.unwrap_or(config.seed);
            let all = data::synthetic_blobs_with(*classes, per_class + test_per_class, *dim, *center_scale, seed)?;
            if *test_per_class == 0 {
                return Ok(Splits { train: all, test: None });
            }
            let (train, test) = all.split(classes * test_per_class, seed);
            Ok(Splits {
                train,
                test: Some(test),
            })
        }
        DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            limit,
            test_limit,
        } => {
            let mut train = data::load_idx(train_images, train_labels)?;
            if let Some(n) = limit {
                train = train.take(*n);
            }
            let test = match (test_images, test_labels) {
                (Some(i), Some(l)) => {
                    let t = data::load_idx(i, l)?;
                    Some(match test_limit {
                        Some(n) => t.take(*n),
                        None => t,
                    })
                }
                (None, None) => None,
                _ => return Err(TrainError::Config("test_images and test_labels go together".into())),
            };
            Ok(Splits { train, test })
        }
    }
}

/// Network described by `config` for inputs shaped like `train`.
pub fn build_network(config: &RunConfig, train: &Dataset) -> Result<Network> {
    let layers = build_layers(train.sample_shape(), &config.network, config.loss)?;
    if let (Some(c), Some(last)) = (train.class_count(), layers.last()) {
        if matches!(last.kind(), LayerKind::CrossEntropyLoss) && last.in_len() != c {
            return Err(TrainError::Config(format!(
                "network emits {} logits for {c} classes",
                last.in_len()
            )));
        }
    }
    init_network(layers, config.seed)
}

/// Mean loss (plus `lambda/2 |theta|^2`) and, for class targets, accuracy.
pub fn evaluate(net: &Network, ds: &Dataset, batch_size: usize, lambda: f64) -> Result<(f64, Option<f64>)> {
    let n = net.len();
    let classify = matches!(net.layers()[n - 1].kind(), LayerKind::CrossEntropyLoss);
    let (mut loss, mut hits) = (0.0, 0usize);
    for batch in data::sequential_batches(ds, batch_size)? {
        let (l, tape) = run_forward(net, &batch)?;
        loss += l.data().iter().sum::<f64>();
        if classify {
            let logits = &tape.saved(n - 1).expect("forward stores every layer").x_in;
            for (i, t) in batch.targets.data().iter().enumerate() {
                let row = logits.row(i);
                let best = (0..row.len())
                    .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                    .expect("at least one class");
                hits += usize::from(best as f64 == *t);
            }
        }
    }
    let count = ds.len() as f64;
    let reg = 0.5 * lambda * net.params().norm_sq();
    Ok((loss / count + reg, classify.then(|| hits as f64 / count)))
}

/// Curvature step for a network with a feature memory after its first `k`
/// layers. Replayed rows are constants: they feed the later layers but pass
/// no gradient or tangent back into the first `k`.
pub fn memory_curvature_step(
    net: &Network,
    k: usize,
    memory: &mut FeatureMemory,
    batch: &BatchView,
    dir_provider: impl FnOnce(&ParamVec) -> curvature_core::Result<ParamVec>,
) -> Result<CurvatureRun> {
    let n = net.len();
    if k >= n {
        return Err(TrainError::Config(format!(
            "feature extractor of {k} layers leaves nothing of a {n}-layer network"
        )));
    }
    let b = batch.sample_count();
    let mut meter = CostMeter::new(n);
    let mut fe_tape = TapeStore::new(n, b);
    let features = forward_range(net, 0..k, batch.inputs.clone(), None, &mut fe_tape, &mut meter)?;
    let features = reshape_rows(features, b, net.layers()[k].in_shape())?;
    let assembled = memory.push_assemble(&features, &batch.targets)?;
    let m = assembled.features.sample_count();
    let fresh = assembled.fresh.clone();

    let mut lc_tape = TapeStore::new(n, m);
    let loss = forward_range(
        net,
        k..n,
        assembled.features,
        Some(&assembled.targets),
        &mut lc_tape,
        &mut meter,
    )?;
    let mut grad = net.params().zeros_like();
    let ones = Tensor::filled(vec![m], 1.0);
    let xhat_k = backward_range(net, k..n, ones, &mut lc_tape, &mut grad, true, false, &mut meter)?;
    let rows: Vec<usize> = fresh.clone().collect();
    let seed = xhat_k.select_rows(&rows);
    backward_range(net, 0..k, seed, &mut fe_tape, &mut grad, true, false, &mut meter)?;
    let grad = grad.scale(1.0 / m as f64);
    let dir = dir_provider(&grad)?;
    net.params().check_compatible(&dir)?;

    let mut fe_acc = vec![0.0; b];
    let mut zero_in = vec![b];
    zero_in.extend_from_slice(net.input_shape());
    let xdot_fresh = curvature_core::engine::tangent_range(
        net,
        0..k,
        Tensor::zeros(zero_in),
        &dir,
        &mut fe_tape,
        &mut fe_acc,
        true,
        &mut meter,
    )?;
    let feat_len = net.layers()[k].in_len();
    let mut xdot = vec![0.0; m * feat_len];
    xdot[fresh.start * feat_len..fresh.end * feat_len].copy_from_slice(xdot_fresh.data());
    let mut lc_shape = vec![m];
    lc_shape.extend_from_slice(net.layers()[k].in_shape());
    let mut acc = vec![0.0; m];
    let out = curvature_core::engine::tangent_range(
        net,
        k..n,
        Tensor::new(lc_shape, xdot)?,
        &dir,
        &mut lc_tape,
        &mut acc,
        true,
        &mut meter,
    )?;
    for (a, f) in acc[fresh].iter_mut().zip(&fe_acc) {
        *a += f;
    }
    let dir_dot_grad = out.data().iter().sum::<f64>() / m as f64;
    Ok(CurvatureRun {
        loss_per_sample: loss,
        grad,
        dir,
        curvature: Curvature {
            per_sample_qform: Tensor::from_vec(acc.iter().map(|a| 2.0 * a).collect()),
            dir_dot_grad,
        },
        meter,
    })
}

fn reshape_rows(t: Tensor, b: usize, shape: &[usize]) -> Result<Tensor> {
    let mut full = vec![b];
    full.extend_from_slice(shape);
    Ok(t.reshape(full)?)
}

/// [`train_with`] collecting the rows.
pub fn train(config: &RunConfig, splits: &Splits) -> Result<TrainOutcome> {
    train_with(config, splits, |_| Ok(()))
}

/// Run the configured training, handing every row to `sink` as soon as it
/// is complete.
pub fn train_with(
    config: &RunConfig,
    splits: &Splits,
    mut sink: impl FnMut(&MetricsRow) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let started = Instant::now();
    let mut net = build_network(config, &splits.train)?;
    let mode = config.direction_mode();
    let schedule = config.schedule_spec()?;
    let mut precond = PrecondState::new(config.beta1, config.beta2, config.eps)?;
    let mut rescale = RescaleState::new(config.beta3, config.denom_const)?;
    let mut memory = config
        .memory
        .map(|m| (FeatureMemory::new(m.capacity), m.feature_layers));
    let lambda = config.lambda;
    let eval_bs = config.batch_size;
    let (initial_train_loss, _) = evaluate(&net, &splits.train, eval_bs, lambda)?;

    let mut rows = Vec::new();
    let mut q_ns = Vec::new();
    let mut k: u64 = 0;
    let mut last_eval = (initial_train_loss, None, None);
    let mut emit = |row: MetricsRow, rows: &mut Vec<MetricsRow>| -> Result<()> {
        sink(&row)?;
        rows.push(row);
        Ok(())
    };

    for epoch in 0..config.epochs {
        let ell = schedule.value(epoch);
        let mut dots = Vec::new();
        for batch in data::batches(&splits.train, config.batch_size, data::epoch_seed(config.seed, epoch))? {
            k += 1;
            let at = |source| TrainError::Numeric {
                epoch,
                iteration: k,
                source,
            };
            let theta = net.params().clone();
            let mut g_total = None;
            let provider = |grad: &ParamVec| {
                let g = grad.axpy(lambda, &theta)?;
                let d = precond.direction(mode, &g)?;
                g_total = Some(g);
                Ok(d)
            };
            let run = match memory.as_mut() {
                Some((mem, fe)) => memory_curvature_step(&net, *fe, mem, &batch, provider).map_err(|e| match e {
                    TrainError::Core(c) => at(c),
                    other => other,
                })?,
                None => run_curvature(&net, &batch, config.executor(), provider).map_err(at)?,
            };
            let g = g_total.expect("the direction provider ran");
            let dir = &run.dir;
            let dot = g.inner(dir)?;
            if mode.guarantees_descent() && dot < 0.0 {
                return Err(at(curvature_core::Error::Contract(format!(
                    "direction is not a descent direction: <d, g> = {dot:e}"
                ))));
            }
            dots.push(dot);
            let norm_sq = dir.norm_sq();
            let qform = run.curvature.per_sample_qform.data();
            let out = rescale.step(qform, dot, norm_sq, lambda).map_err(at)?;
            let batch_loss = run.loss_per_sample.data().iter().sum::<f64>() / batch.sample_count() as f64;
            let train_loss = batch_loss + 0.5 * lambda * theta.norm_sq();

            let step = match out {
                Some(RescaleOutput { r_k, .. }) => {
                    let (next, mut step) = apply_update(&theta, ell, r_k, dir, config.abs_rule())?;
                    let next = match schedule.robbins_monro {
                        Some(rm) => {
                            step = clamp_robbins_monro(step, k, rm.alpha, rm.beta, rm.delta)?;
                            theta.axpy(-step, dir)?
                        }
                        None => next,
                    };
                    if !next.is_finite() {
                        return Err(at(curvature_core::Error::Contract(
                            "parameters became non-finite".into(),
                        )));
                    }
                    net.set_params(next)?;
                    step
                }
                None => 0.0,
            };
            emit(
                MetricsRow {
                    kind: RowKind::Iteration,
                    epoch,
                    iteration: k,
                    train_loss,
                    effective_step: Some(step),
                    ell: Some(ell),
                    r_k: out.map(|o| o.r_k),
                    c_k: out.map(|o| o.c_k),
                    c_tilde: out.map(|o| o.c_tilde),
                    l_tilde: out.map(|o| o.l_tilde),
                    dir_dot_grad: Some(dot),
                    q_n: None,
                    test_loss: None,
                    test_accuracy: None,
                    pass_units: Some(run.meter.pass_units()),
                    peak_activation_slots: Some(run.meter.peak_activation_slots),
                },
                &mut rows,
            )?;
        }

        let q_n = descent_fraction(&dots)?;
        q_ns.push(q_n);
        let (train_loss, _) = evaluate(&net, &splits.train, eval_bs, lambda)?;
        let (test_loss, test_accuracy) = match &splits.test {
            Some(t) => {
                let (l, a) = evaluate(&net, t, eval_bs, lambda)?;
                (Some(l), a)
            }
            None => (None, None),
        };
        last_eval = (train_loss, test_loss, test_accuracy);
        emit(
            MetricsRow {
                kind: RowKind::Epoch,
                epoch,
                iteration: k,
                train_loss,
                effective_step: None,
                ell: Some(ell),
                r_k: None,
                c_k: None,
                c_tilde: None,
                l_tilde: None,
                dir_dot_grad: None,
                q_n: Some(q_n),
                test_loss,
                test_accuracy,
                pass_units: None,
                peak_activation_slots: None,
            },
            &mut rows,
        )?;
    }

    let summary = RunSummary {
        config: config.clone(),
        initial_train_loss,
        final_train_loss: last_eval.0,
        final_test_loss: last_eval.1,
        final_test_accuracy: last_eval.2,
        q_n: q_ns,
        iterations: k,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome {
        rows,
        params: net.params().clone(),
        summary,
    })
}

/// CSV writer with the fixed header.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Self {
        Self {
            inner: csv::WriterBuilder::new().has_headers(true).from_writer(out),
        }
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.serialize(row)?;
        self.inner.flush().map_err(|e| TrainError::io("metrics", e))
    }
}

pub fn write_summary(path: &Path, summary: &RunSummary) -> Result<()> {
    let text = serde_json::to_string_pretty(summary)?;
    std::fs::write(path, text + "\n").map_err(|e| TrainError::io(path, e))
}

/// Exponential moving average whose first value passes through.
pub fn ema_report(series: &[f64], factor: f64) -> Result<Vec<f64>> {
    if series.is_empty() {
        return Err(TrainError::Config("cannot smooth an empty series".into()));
    }
    if !(0.0..1.0).contains(&factor) {
        return Err(TrainError::Config(format!("smoothing factor {factor} outside [0, 1)")));
    }
    let mut out = Vec::with_capacity(series.len());
    let mut s = series[0];
    out.push(s);
    for &x in &series[1..] {
        s = factor * s + (1.0 - factor) * x;
        out.push(s);
    }
    Ok(out)
}

const DEMO_DENOM: f64 = 2.0;

/// The rescaled SGD iteration on `J(theta) = sqrt(1 + theta^2)` with no
/// smoothing, no regularization and `ell = D`. Stops early if the
/// curvature underflows.
pub fn demo_newton_1d(theta0: f64, steps: usize) -> Result<Vec<f64>> {
    let mut rescale = RescaleState::new(0.0, DEMO_DENOM)?;
    let ell = DEMO_DENOM;
    let mut theta = theta0;
    let mut out = vec![theta];
    for _ in 0..steps {
        let s = 1.0 + theta * theta;
        let g = theta / s.sqrt();
        let d = g;
        let hess = 1.0 / (s * s.sqrt());
        let q = hess * d * d;
        match rescale.step(&[q], g * d, d * d, 0.0) {
            Ok(Some(o)) => theta -= ell * o.r_k * d,
            Ok(None) => {}
            Err(curvature_core::Error::VanishingCurvature) => break,
            Err(e) => return Err(e.into()),
        }
        out.push(theta);
        if !theta.is_finite() {
            break;
        }
    }
    Ok(out)
}

/// One step of the stochastic-mean demo.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStep {
    pub theta: f64,
    pub batch_mean: f64,
}

/// Rescaled SGD with `ell = D` on `J(theta) = E 1/2 (theta - x)^2`, run
/// through the engine as a bias layer followed by a squared loss. Batches
/// are drawn by reshuffling `samples` every pass.
pub fn demo_stochastic_mean(
    samples: &[f64],
    batch_size: usize,
    steps: usize,
    theta0: f64,
    beta3: f64,
    seed: u64,
) -> Result<Vec<MeanStep>> {
    if samples.is_empty() {
        return Err(TrainError::Config("no samples".into()));
    }
    let ds = Dataset::new(
        Tensor::zeros(vec![samples.len(), 1]),
        Tensor::new(vec![samples.len(), 1], samples.to_vec())?,
        None,
    )?;
    let layers = vec![Layer::bias(&[1])?, Layer::mse(&[1])];
    let mut net = Network::new(layers, ParamVec::new(vec![(0, Tensor::from_vec(vec![theta0]))]))?;
    let mut rescale = RescaleState::new(beta3, DEMO_DENOM)?;
    let ell = DEMO_DENOM;
    let mut out = Vec::with_capacity(steps);
    let mut pass = 0;
    while out.len() < steps {
        for batch in data::batches(&ds, batch_size, data::epoch_seed(seed, pass))? {
            if out.len() == steps {
                break;
            }
            let run = run_curvature(&net, &batch, curvature_core::engine::Executor::Plain, |g| Ok(g.clone()))?;
            let theta = net.params().clone();
            let dot = run.grad.inner(&run.dir)?;
            if let Some(o) = rescale.step(run.curvature.per_sample_qform.data(), dot, run.dir.norm_sq(), 0.0)? {
                let (next, _) = apply_update(&theta, ell, o.r_k, &run.dir, false)?;
                net.set_params(next)?;
            }
            let t = batch.targets.data();
            out.push(MeanStep {
                theta: net.params().flatten()[0],
                batch_mean: t.iter().sum::<f64>() / t.len() as f64,
            });
        }
        pass += 1;
    }
    Ok(out)
}
