//! Cost of the curvature schedules relative to a plain gradient step.

use curvature_core::engine::{choose_split, run_checkpointed, run_gradient_only, run_plain, CurvatureRun, Network};
use curvature_core::layers::{Activation, Layer};
use curvature_core::{BatchView, ParamVec};
use serde::Serialize;

use crate::check::{relative_error, seeded_case};
use crate::error::{Result, TrainError};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub schedule: &'static str,
    pub pass_units: f64,
    pub ratio: f64,
    pub peak_activation_slots: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub layers: usize,
    pub split: usize,
    pub rows: Vec<BenchRow>,
    /// Largest relative difference between the plain and checkpointed
    /// results (loss, gradient, quadratic forms, directional derivative).
    pub max_output_diff: f64,
}

/// `layers` stages: dense and tanh alternating, closed by a squared loss.
pub fn uniform_layers(layers: usize, width: usize) -> Result<Vec<Layer>> {
    if layers < 2 || width == 0 {
        return Err(TrainError::Config(
            "a bench net needs at least 2 layers and width 1".into(),
        ));
    }
    let shape = [width];
    let mut out = Vec::with_capacity(layers);
    for s in 0..layers - 1 {
        out.push(if s % 2 == 0 {
            Layer::dense(width, width)
        } else {
            Layer::activation(Activation::Tanh, &shape)?
        });
    }
    out.push(Layer::mse(&shape));
    Ok(out)
}

fn outputs(run: &CurvatureRun) -> Vec<f64> {
    let mut v = run.loss_per_sample.data().to_vec();
    v.extend(run.grad.flatten());
    v.extend_from_slice(run.curvature.per_sample_qform.data());
    v.push(run.curvature.dir_dot_grad);
    v
}

pub fn bench(net: &Network, batch: &BatchView, split: Option<usize>) -> Result<BenchReport> {
    let split = match split {
        Some(l) => l,
        None => choose_split(net)?,
    };
    let dir = |g: &ParamVec| Ok(g.clone());
    let (_, _, base) = run_gradient_only(net, batch)?;
    let plain = run_plain(net, batch, dir)?;
    let ckpt = run_checkpointed(net, batch, dir, split)?;
    let unit = base.pass_units();
    let row = |schedule, m: &curvature_core::engine::CostMeter| BenchRow {
        schedule,
        pass_units: m.pass_units(),
        ratio: m.pass_units() / unit,
        peak_activation_slots: m.peak_activation_slots,
    };
    Ok(BenchReport {
        layers: net.len(),
        split,
        rows: vec![
            row("gradient-only", &base),
            row("plain", &plain.meter),
            row("checkpointed", &ckpt.meter),
        ],
        max_output_diff: relative_error(&outputs(&plain), &outputs(&ckpt)),
    })
}

/// Bench a seeded uniform network.
pub fn bench_uniform(
    layers: usize,
    width: usize,
    batch: usize,
    split: Option<usize>,
    seed: u64,
) -> Result<BenchReport> {
    let (net, batch) = seeded_case(uniform_layers(layers, width)?, batch, seed)?;
    bench(&net, &batch, split)
}
