//! Forward, backward and tangent passes over a list-shaped network.
//!
//! The batch loss is `J = mean_b loss_b`. The backward pass is seeded with one
//! weight per sample (all ones), so every parameter adjoint is a batch *sum*;
//! gradients and Hessian-vector products are divided by the sample count at
//! the end. The tangent pass accumulates, per sample, the second-order
//! contributions of every layer; twice their sum is the per-sample quadratic
//! form `<H_b d, d>`.
//!
//! Two curvature schedules are provided. [`run_plain`] stores all activations
//! `X` and all adjoints `X_hat`. [`run_checkpointed`] splits the network at a
//! layer `L`, drops the activations past `L` after the first backward sweep
//! and recomputes them once the first half of the tangent sweep has freed
//! its memory. Both perform the same floating-point operations in the same
//! order, so their results agree bit for bit.
//!
//! Memory is accounted in layer-store slots: one stored [`LayerSaved`] or one
//! stored adjoint counts as one slot, the tensors in flight do not. Cost is
//! accounted in layer visits; [`CostMeter::pass_units`] divides by the layer
//! count so that one sweep over the whole network is one unit.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};
use crate::layers::{Layer, LayerKind, LayerSaved};
use crate::tensor::{BatchView, ParamVec, Tensor};

/// Layers plus their parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    params: ParamVec,
}

impl Network {
    /// A trainable network: the last layer, and only the last, is a loss.
    pub fn new(layers: Vec<Layer>, params: ParamVec) -> Result<Self> {
        let net = Self::unchecked(layers, params)?;
        let losses = net.layers.iter().filter(|l| l.is_loss()).count();
        if losses != 1 || !net.layers.last().is_some_and(Layer::is_loss) {
            return Err(Error::contract("a network ends in exactly one loss layer"));
        }
        Ok(net)
    }

    /// A loss-free stack, used as the feature extractor in front of another
    /// network.
    pub fn body(layers: Vec<Layer>, params: ParamVec) -> Result<Self> {
        let net = Self::unchecked(layers, params)?;
        if net.layers.iter().any(Layer::is_loss) {
            return Err(Error::contract("a network body has no loss layer"));
        }
        Ok(net)
    }

    /// Build the parameters with `init(layer_index, layer, param_shape)`.
    pub fn from_fn(layers: Vec<Layer>, mut init: impl FnMut(usize, &Layer, &[usize]) -> Tensor) -> Result<Self> {
        let params = Self::param_layout(&layers, |s, l, shape| init(s, l, shape));
        if layers.last().is_some_and(Layer::is_loss) {
            Self::new(layers, params)
        } else {
            Self::body(layers, params)
        }
    }

    fn param_layout(layers: &[Layer], mut init: impl FnMut(usize, &Layer, &[usize]) -> Tensor) -> ParamVec {
        ParamVec::new(
            layers
                .iter()
                .enumerate()
                .filter_map(|(s, l)| l.param_shape().map(|shape| (s, init(s, l, &shape))))
                .collect(),
        )
    }

    fn unchecked(layers: Vec<Layer>, params: ParamVec) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::contract("a network needs at least one layer"));
        }
        for (s, pair) in layers.windows(2).enumerate() {
            if pair[0].out_len() != pair[1].in_len() {
                return Err(Error::shape(
                    "adjacent layers",
                    &[pair[0].out_len()],
                    &[pair[1].in_len()],
                ));
            }
            let next = pair[1].kind();
            match (pair[0].kind(), next) {
                (
                    LayerKind::Centering { channels, axis },
                    LayerKind::Normalizing {
                        channels: c2, axis: a2, ..
                    },
                ) if channels == c2 && axis == a2 => {}
                (LayerKind::Centering { .. }, _) | (_, LayerKind::Normalizing { .. }) => {
                    return Err(Error::contract(alloc::format!(
                        "layers {s} and {}: centering must be followed by a matching normalizing layer",
                        s + 1
                    )));
                }
                _ => {}
            }
        }
        if matches!(layers.last().map(Layer::kind), Some(LayerKind::Centering { .. }))
            || matches!(layers.first().map(Layer::kind), Some(LayerKind::Normalizing { .. }))
        {
            return Err(Error::contract(
                "centering must be followed by a matching normalizing layer",
            ));
        }
        let layout = Self::param_layout(&layers, |_, _, shape| Tensor::zeros(shape.to_vec()));
        layout.check_compatible(&params)?;
        Ok(Self { layers, params })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn params(&self) -> &ParamVec {
        &self.params
    }

    pub fn set_params(&mut self, params: ParamVec) -> Result<()> {
        self.params.check_compatible(&params)?;
        self.params = params;
        Ok(())
    }

    /// Per-sample input shape of the first layer.
    pub fn input_shape(&self) -> &[usize] {
        self.layers[0].in_shape()
    }
}

/// Stored activations `X` and adjoints `X_hat` of one batch.
///
/// `xhat(s)` is the adjoint of layer `s`'s *output*, i.e. the seed that
/// layer `s` receives in the backward pass.
#[derive(Debug, Clone)]
pub struct TapeStore {
    saved: Vec<Option<LayerSaved>>,
    xhat: Vec<Option<Tensor>>,
    batch: usize,
    resident: usize,
    peak: usize,
}

impl TapeStore {
    pub fn new(layers: usize, batch: usize) -> Self {
        Self {
            saved: vec![None; layers],
            xhat: vec![None; layers],
            batch,
            resident: 0,
            peak: 0,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn x_resident(&self, s: usize) -> bool {
        self.saved.get(s).is_some_and(Option::is_some)
    }

    pub fn xhat_resident(&self, s: usize) -> bool {
        self.xhat.get(s).is_some_and(Option::is_some)
    }

    pub fn saved(&self, s: usize) -> Option<&LayerSaved> {
        self.saved.get(s)?.as_ref()
    }

    pub fn xhat(&self, s: usize) -> Option<&Tensor> {
        self.xhat.get(s)?.as_ref()
    }

    /// Layer stores currently held.
    pub fn resident_slots(&self) -> usize {
        self.resident
    }

    /// Largest number of layer stores held at once since creation.
    pub fn peak_slots(&self) -> usize {
        self.peak
    }

    fn bump(&mut self, added: bool, removed: bool) {
        if added {
            self.resident += 1;
        }
        if removed {
            self.resident -= 1;
        }
        self.peak = self.peak.max(self.resident);
    }

    fn put_saved(&mut self, s: usize, v: LayerSaved) {
        let old = self.saved[s].replace(v);
        self.bump(old.is_none(), false);
    }

    fn put_xhat(&mut self, s: usize, v: Tensor) {
        let old = self.xhat[s].replace(v);
        self.bump(old.is_none(), false);
    }

    pub fn flush_x(&mut self, range: Range<usize>) {
        for s in range {
            if self.saved[s].take().is_some() {
                self.bump(false, true);
            }
        }
    }

    pub fn flush_xhat(&mut self, range: Range<usize>) {
        for s in range {
            if self.xhat[s].take().is_some() {
                self.bump(false, true);
            }
        }
    }

    fn need_saved(&self, s: usize) -> Result<&LayerSaved> {
        self.saved(s)
            .ok_or_else(|| Error::contract(alloc::format!("activation of layer {s} is not resident")))
    }

    fn need_xhat(&self, s: usize) -> Result<&Tensor> {
        self.xhat(s)
            .ok_or_else(|| Error::contract(alloc::format!("adjoint of layer {s} is not resident")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CostMeter {
    pub layer_visits: u64,
    pub layers: usize,
    pub peak_activation_slots: usize,
    /// Direction transfers and checkpoint reloads. Recorded, not optimized.
    pub transfers: u64,
}

impl CostMeter {
    pub fn new(layers: usize) -> Self {
        Self {
            layers,
            ..Self::default()
        }
    }

    /// Layer visits divided by the layer count.
    pub fn pass_units(&self) -> f64 {
        if self.layers == 0 {
            0.0
        } else {
            self.layer_visits as f64 / self.layers as f64
        }
    }

    pub fn observe(&mut self, tape: &TapeStore) {
        self.peak_activation_slots = self.peak_activation_slots.max(tape.peak_slots());
    }

    fn visit(&mut self, n: usize) {
        self.layer_visits += n as u64;
    }
}

fn conform(t: Tensor, batch: usize, shape: &[usize]) -> Result<Tensor> {
    if t.shape().first() == Some(&batch) && &t.shape()[1..] == shape {
        return Ok(t);
    }
    let mut full = Vec::with_capacity(shape.len() + 1);
    full.push(batch);
    full.extend_from_slice(shape);
    if t.len() != full.iter().product::<usize>() {
        return Err(Error::shape("layer boundary", &full, t.shape()));
    }
    t.reshape(full)
}

fn locate(err: Error, layer: usize) -> Error {
    match err {
        Error::DegenerateStatistics { sample_count, .. } => Error::DegenerateStatistics { layer, sample_count },
        other => other,
    }
}

fn check_range(net: &Network, range: &Range<usize>) -> Result<()> {
    if range.start > range.end || range.end > net.len() {
        return Err(Error::contract(alloc::format!(
            "layer range {range:?} outside a network of {} layers",
            net.len()
        )));
    }
    Ok(())
}

/// Run layers in `range` forward from `x`, storing every [`LayerSaved`].
/// `targets` reach the loss layer only. Returns the last output.
pub fn forward_range(
    net: &Network,
    range: Range<usize>,
    x: Tensor,
    targets: Option<&Tensor>,
    tape: &mut TapeStore,
    meter: &mut CostMeter,
) -> Result<Tensor> {
    check_range(net, &range)?;
    let batch = tape.batch;
    let mut x = x;
    for s in range {
        let layer = &net.layers[s];
        let input = conform(x, batch, layer.in_shape())?;
        let target = if layer.is_loss() { targets } else { None };
        let (y, saved) = layer
            .forward(&input, net.params.get(s), target)
            .map_err(|e| locate(e, s))?;
        meter.visit(1);
        if !y.is_finite() {
            return Err(Error::NonFinite { layer: s });
        }
        drop(input);
        tape.put_saved(s, saved);
        x = y;
    }
    meter.observe(tape);
    Ok(x)
}

/// Backward sweep over `range` from the seed of its last layer. Parameter
/// adjoints (batch sums) are written into `grad`. With `store_xhat` every
/// seed is kept on the tape; with `release_x` activations are dropped as
/// soon as they have been used. Returns the adjoint of the range's input.
#[allow(clippy::too_many_arguments)]
pub fn backward_range(
    net: &Network,
    range: Range<usize>,
    seed: Tensor,
    tape: &mut TapeStore,
    grad: &mut ParamVec,
    store_xhat: bool,
    release_x: bool,
    meter: &mut CostMeter,
) -> Result<Tensor> {
    check_range(net, &range)?;
    let batch = tape.batch;
    let mut seed = seed;
    for s in range.rev() {
        let layer = &net.layers[s];
        let xh = conform(seed, batch, layer.out_shape())?;
        let saved = tape.need_saved(s)?;
        if layer.has_params() {
            let g = layer.adjoint_param(saved, &xh)?;
            *grad
                .get_mut(s)
                .ok_or_else(|| Error::contract("gradient buffer lacks a segment"))? = g;
        }
        let next = layer.adjoint_input(saved, net.params.get(s), &xh)?;
        meter.visit(1);
        if store_xhat {
            tape.put_xhat(s, xh);
        }
        if release_x {
            tape.flush_x(s..s + 1);
        }
        seed = next;
    }
    meter.observe(tape);
    Ok(seed)
}

/// Tangent sweep over `range` starting from `xdot`, adding each layer's
/// per-sample second-order contribution to `acc`. With `release` both stores
/// of a layer are dropped once it has been visited. Returns the last tangent.
#[allow(clippy::too_many_arguments)]
pub fn tangent_range(
    net: &Network,
    range: Range<usize>,
    xdot: Tensor,
    dir: &ParamVec,
    tape: &mut TapeStore,
    acc: &mut [f64],
    release: bool,
    meter: &mut CostMeter,
) -> Result<Tensor> {
    check_range(net, &range)?;
    let batch = tape.batch;
    if acc.len() != batch {
        return Err(Error::shape("curvature accumulator", &[batch], &[acc.len()]));
    }
    let mut xdot = xdot;
    for s in range {
        xdot = tangent_layer(net, s, tape, xdot, dir, acc)?;
        meter.visit(1);
        if release {
            tape.flush_x(s..s + 1);
            tape.flush_xhat(s..s + 1);
        }
    }
    meter.observe(tape);
    Ok(xdot)
}

fn tangent_layer(
    net: &Network,
    s: usize,
    tape: &TapeStore,
    xdot: Tensor,
    dir: &ParamVec,
    acc: &mut [f64],
) -> Result<Tensor> {
    let layer = &net.layers[s];
    let xd = conform(xdot, tape.batch, layer.in_shape())?;
    let saved = tape.need_saved(s)?;
    let xh = tape.need_xhat(s)?;
    let td = dir.get(s);
    let y = layer.tangent(saved, net.params.get(s), &xd, td)?;
    let r = layer.second_order_contribution(saved, &xd, td, xh)?;
    acc.iter_mut().zip(&r).for_each(|(a, v)| *a += v);
    Ok(y)
}

fn check_batch(net: &Network, batch: &BatchView) -> Result<()> {
    let per_sample: usize = net.input_shape().iter().product();
    if batch.inputs.sample_len() != per_sample {
        return Err(Error::shape(
            "network input",
            net.input_shape(),
            &batch.inputs.shape()[1..],
        ));
    }
    if !net.layers.last().is_some_and(Layer::is_loss) {
        return Err(Error::contract("this pass needs a network ending in a loss"));
    }
    Ok(())
}

fn seed_weights(batch: usize) -> Tensor {
    Tensor::filled(vec![batch], 1.0)
}

fn zero_tangent(net: &Network, batch: usize) -> Tensor {
    let mut shape = vec![batch];
    shape.extend_from_slice(net.input_shape());
    Tensor::zeros(shape)
}

fn mean(v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for x in v {
        acc += x;
    }
    acc / v.len() as f64
}

/// Forward pass storing every activation. Returns the per-sample losses.
pub fn run_forward(net: &Network, batch: &BatchView) -> Result<(Tensor, TapeStore)> {
    check_batch(net, batch)?;
    let b = batch.sample_count();
    let mut tape = TapeStore::new(net.len(), b);
    let mut meter = CostMeter::new(net.len());
    let loss = forward_range(
        net,
        0..net.len(),
        batch.inputs.clone(),
        Some(&batch.targets),
        &mut tape,
        &mut meter,
    )?;
    Ok((loss, tape))
}

/// Backward pass on a full tape, keeping every adjoint for the tangent pass.
/// Returns the batch-mean gradient.
pub fn run_backward(net: &Network, tape: &mut TapeStore) -> Result<ParamVec> {
    let mut meter = CostMeter::new(net.len());
    let mut grad = net.params.zeros_like();
    backward_range(
        net,
        0..net.len(),
        seed_weights(tape.batch),
        tape,
        &mut grad,
        true,
        false,
        &mut meter,
    )?;
    Ok(grad.scale(1.0 / tape.batch as f64))
}

/// Result of a tangent sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Curvature {
    /// `<H_b d, d>` for every sample `b`.
    pub per_sample_qform: Tensor,
    /// `<grad J, d>` read off the tangent of the loss.
    pub dir_dot_grad: f64,
}

/// Tangent pass on a tape holding both `X` and `X_hat`. The tape is left
/// untouched.
pub fn tangent_curvature(net: &Network, tape: &TapeStore, dir: &ParamVec) -> Result<Curvature> {
    net.params.check_compatible(dir)?;
    let b = tape.batch;
    let mut acc = vec![0.0; b];
    let mut out = zero_tangent(net, b);
    for s in 0..net.len() {
        out = tangent_layer(net, s, tape, out, dir, &mut acc)?;
    }
    Ok(finish_curvature(acc, &out))
}

fn finish_curvature(acc: Vec<f64>, loss_tangent: &Tensor) -> Curvature {
    Curvature {
        per_sample_qform: Tensor::from_vec(acc.into_iter().map(|r| 2.0 * r).collect()),
        dir_dot_grad: mean(loss_tangent.data()),
    }
}

/// Batch-mean Hessian-vector product `H d` by a second-order backward sweep.
pub fn hessian_vector_product(net: &Network, tape: &TapeStore, dir: &ParamVec) -> Result<ParamVec> {
    net.params.check_compatible(dir)?;
    let b = tape.batch;
    let n = net.len();

    let mut xdots = Vec::with_capacity(n);
    let mut xdot = zero_tangent(net, b);
    for s in 0..n {
        let layer = &net.layers[s];
        let xd = conform(xdot, b, layer.in_shape())?;
        let y = layer.tangent(tape.need_saved(s)?, net.params.get(s), &xd, dir.get(s))?;
        xdots.push(xd);
        xdot = y;
    }

    let mut out = net.params.zeros_like();
    let mut xt = Tensor::zeros(vec![b]);
    for s in (0..n).rev() {
        let layer = &net.layers[s];
        let saved = tape.need_saved(s)?;
        let xh = tape.need_xhat(s)?;
        let xt_next = conform(xt, b, layer.out_shape())?;
        let (a, bterm) = layer.second_order_adjoints(saved, &xdots[s], dir.get(s), xh)?;
        if let Some(bterm) = bterm {
            let t = layer.adjoint_param(saved, &xt_next)?;
            let slot = out
                .get_mut(s)
                .ok_or_else(|| Error::contract("Hessian buffer lacks a segment"))?;
            *slot = t.zip_map(&bterm, |p, q| p + q)?;
        }
        let back = layer.adjoint_input(saved, net.params.get(s), &xt_next)?;
        xt = back.zip_map(&a, |p, q| p + q)?;
    }
    Ok(out.scale(1.0 / b as f64))
}

/// Everything one curvature-enabled step needs.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureRun {
    pub loss_per_sample: Tensor,
    pub grad: ParamVec,
    pub dir: ParamVec,
    pub curvature: Curvature,
    pub meter: CostMeter,
}

/// Forward and backward only, releasing activations during the backward.
pub fn run_gradient_only(net: &Network, batch: &BatchView) -> Result<(Tensor, ParamVec, CostMeter)> {
    check_batch(net, batch)?;
    let b = batch.sample_count();
    let n = net.len();
    let mut tape = TapeStore::new(n, b);
    let mut meter = CostMeter::new(n);
    let loss = forward_range(
        net,
        0..n,
        batch.inputs.clone(),
        Some(&batch.targets),
        &mut tape,
        &mut meter,
    )?;
    let mut grad = net.params.zeros_like();
    backward_range(
        net,
        0..n,
        seed_weights(b),
        &mut tape,
        &mut grad,
        false,
        true,
        &mut meter,
    )?;
    Ok((loss, grad.scale(1.0 / b as f64), meter))
}

fn provide(
    net: &Network,
    grad: &ParamVec,
    dir_provider: impl FnOnce(&ParamVec) -> Result<ParamVec>,
    meter: &mut CostMeter,
) -> Result<ParamVec> {
    let dir = dir_provider(grad)?;
    net.params.check_compatible(&dir)?;
    meter.transfers += 1;
    Ok(dir)
}

/// Store everything: forward, backward, then the tangent sweep.
pub fn run_plain(
    net: &Network,
    batch: &BatchView,
    dir_provider: impl FnOnce(&ParamVec) -> Result<ParamVec>,
) -> Result<CurvatureRun> {
    check_batch(net, batch)?;
    let b = batch.sample_count();
    let n = net.len();
    let mut tape = TapeStore::new(n, b);
    let mut meter = CostMeter::new(n);
    let loss = forward_range(
        net,
        0..n,
        batch.inputs.clone(),
        Some(&batch.targets),
        &mut tape,
        &mut meter,
    )?;
    let mut grad = net.params.zeros_like();
    backward_range(
        net,
        0..n,
        seed_weights(b),
        &mut tape,
        &mut grad,
        true,
        false,
        &mut meter,
    )?;
    let grad = grad.scale(1.0 / b as f64);
    let dir = provide(net, &grad, dir_provider, &mut meter)?;
    let mut acc = vec![0.0; b];
    let out = tangent_range(
        net,
        0..n,
        zero_tangent(net, b),
        &dir,
        &mut tape,
        &mut acc,
        true,
        &mut meter,
    )?;
    Ok(CurvatureRun {
        loss_per_sample: loss,
        grad,
        dir,
        curvature: finish_curvature(acc, &out),
        meter,
    })
}

/// The split schedule:
/// 1. forward over all layers, storing `X`;
/// 2. backward over layers `>= split` without storing adjoints;
/// 3. drop the activations past the checkpoint `x_split`;
/// 4. backward over layers `< split`, storing adjoints, which completes the
///    gradient and lets `dir_provider` choose the direction;
/// 5. tangent sweep over layers `< split`, freeing their stores;
/// 6. recompute forward and backward over layers `>= split` from the
///    checkpoint, storing both;
/// 7. tangent sweep over layers `>= split`.
pub fn run_checkpointed(
    net: &Network,
    batch: &BatchView,
    dir_provider: impl FnOnce(&ParamVec) -> Result<ParamVec>,
    split: usize,
) -> Result<CurvatureRun> {
    check_batch(net, batch)?;
    let n = net.len();
    if split == 0 || split >= n {
        return Err(Error::InvalidSplit { split, layers: n });
    }
    let b = batch.sample_count();
    let mut tape = TapeStore::new(n, b);
    let mut meter = CostMeter::new(n);

    let loss = forward_range(
        net,
        0..n,
        batch.inputs.clone(),
        Some(&batch.targets),
        &mut tape,
        &mut meter,
    )?;
    let mut grad = net.params.zeros_like();
    let xhat_split = backward_range(
        net,
        split..n,
        seed_weights(b),
        &mut tape,
        &mut grad,
        false,
        false,
        &mut meter,
    )?;
    tape.flush_x(split + 1..n);
    backward_range(net, 0..split, xhat_split, &mut tape, &mut grad, true, false, &mut meter)?;
    let grad = grad.scale(1.0 / b as f64);
    let dir = provide(net, &grad, dir_provider, &mut meter)?;

    let mut acc = vec![0.0; b];
    let xdot_split = tangent_range(
        net,
        0..split,
        zero_tangent(net, b),
        &dir,
        &mut tape,
        &mut acc,
        true,
        &mut meter,
    )?;

    let checkpoint = tape.need_saved(split)?.x_in.clone();
    meter.transfers += 1;
    forward_range(net, split..n, checkpoint, Some(&batch.targets), &mut tape, &mut meter)?;
    let mut scratch = net.params.zeros_like();
    backward_range(
        net,
        split..n,
        seed_weights(b),
        &mut tape,
        &mut scratch,
        true,
        false,
        &mut meter,
    )?;
    let out = tangent_range(net, split..n, xdot_split, &dir, &mut tape, &mut acc, true, &mut meter)?;

    Ok(CurvatureRun {
        loss_per_sample: loss,
        grad,
        dir,
        curvature: finish_curvature(acc, &out),
        meter,
    })
}

/// The split `L` that best balances the stored activations of layers `< L`
/// against those of layers `>= L`. Ties go to the smaller `L`.
pub fn choose_split(net: &Network) -> Result<usize> {
    let n = net.len();
    if n < 2 {
        return Err(Error::InvalidSplit { split: 0, layers: n });
    }
    let sizes: Vec<usize> = net.layers.iter().map(Layer::in_len).collect();
    let total: usize = sizes.iter().sum();
    let mut best = (usize::MAX, 1);
    let mut head = 0;
    for l in 1..n {
        head += sizes[l - 1];
        let gap = head.abs_diff(total - head);
        if gap < best.0 {
            best = (gap, l);
        }
    }
    Ok(best.1)
}

/// How the curvature step is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Executor {
    Plain,
    /// Checkpointed at the given split, or at [`choose_split`] when `None`.
    Checkpointed(Option<usize>),
}

pub fn run_curvature(
    net: &Network,
    batch: &BatchView,
    executor: Executor,
    dir_provider: impl FnOnce(&ParamVec) -> Result<ParamVec>,
) -> Result<CurvatureRun> {
    match executor {
        Executor::Plain => run_plain(net, batch, dir_provider),
        Executor::Checkpointed(split) => {
            let split = match split {
                Some(l) => l,
                None => choose_split(net)?,
            };
            run_checkpointed(net, batch, dir_provider, split)
        }
    }
}
