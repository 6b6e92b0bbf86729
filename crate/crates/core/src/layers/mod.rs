//! Network stages and their five maps.
//!
//! A layer `F(x, theta)` provides:
//! * `forward`: `x_{s+1} = F(x_s, theta_s)`, plus whatever it caches;
//! * `adjoint_input` / `adjoint_param`: `(d_x F)^* xh` and `(d_theta F)^* xh`;
//! * `tangent`: `(d_x F) xd + (d_theta F) thetad`;
//! * `second_order_contribution`: per-sample
//!   `1/2 <D^2 F (xd, thetad) (xd, thetad), xh>`;
//! * `second_order_adjoints`: the representers `(A, B)` of
//!   `(a, b) -> <D^2 F (xd, thetad) (a, b), xh>`, used by the Hessian-vector
//!   product.
//!
//! Tensors carry a leading sample axis. Per-sample quantities of
//! batch-coupled layers are attributed to the sample owning the output entry.

mod activation;
mod linear;
mod loss;
mod norm;

use alloc::vec;
use alloc::vec::Vec;

pub use activation::Activation;
pub use linear::ConvGeometry;
pub use loss::cross_entropy_hessian_form;
pub use norm::{NormCurvatureRule, StatsAxis};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use linear::Assignment;
use norm::Grouping;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    /// Bias-free fully connected map, weights `[outputs, inputs]`.
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// Bias-free 2-D convolution, weights `[out_c, in_c, kh, kw]`.
    Conv2d(ConvGeometry),
    /// Diagonal linear map with one weight per channel.
    Scale {
        channels: usize,
    },
    /// One bias per channel, broadcast over the channel's entries.
    Bias {
        channels: usize,
    },
    Activation(Activation),
    Centering {
        channels: usize,
        axis: StatsAxis,
    },
    Normalizing {
        channels: usize,
        axis: StatsAxis,
        eps: f64,
    },
    /// `1/2 |x - y|^2` per sample.
    MseLoss,
    /// Softmax followed by negative log-likelihood, targets are class ids.
    CrossEntropyLoss,
}

/// Values cached by `forward` for the later passes. Everything in `aux` can
/// be recomputed from `x_in` (and the batch targets for losses).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSaved {
    pub x_in: Tensor,
    pub aux: Aux,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Aux {
    None,
    /// One `gamma = (E(x^2) + eps)^(-1/2)` per statistics group.
    Gamma(Vec<f64>),
    Target(Tensor),
    Softmax {
        probs: Tensor,
        target: Tensor,
    },
}

/// One stage of a network, with per-sample input and output shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    kind: LayerKind,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
}

fn check_channels(shape: &[usize], channels: usize) -> Result<()> {
    let features: usize = shape.iter().product();
    if channels == 0 || features == 0 || !features.is_multiple_of(channels) {
        return Err(Error::InvalidParameter(alloc::format!(
            "{channels} channels do not divide {features} features"
        )));
    }
    Ok(())
}

fn leading(shape: &[usize]) -> usize {
    shape.first().copied().unwrap_or(1)
}

impl Layer {
    pub fn dense(inputs: usize, outputs: usize) -> Self {
        Self {
            kind: LayerKind::Dense { inputs, outputs },
            in_shape: vec![inputs],
            out_shape: vec![outputs],
        }
    }

    pub fn conv2d(geometry: ConvGeometry) -> Result<Self> {
        let g = geometry;
        if g.stride == 0 || g.kernel_h > g.height || g.kernel_w > g.width || g.kernel_h == 0 || g.kernel_w == 0 {
            return Err(Error::InvalidParameter(alloc::format!(
                "invalid convolution geometry {g:?}"
            )));
        }
        Ok(Self {
            kind: LayerKind::Conv2d(g),
            in_shape: vec![g.in_channels, g.height, g.width],
            out_shape: vec![g.out_channels, g.out_height(), g.out_width()],
        })
    }

    /// Diagonal linear layer with one weight per leading-axis channel.
    pub fn scale(shape: &[usize]) -> Result<Self> {
        Self::scale_grouped(shape, leading(shape))
    }

    pub fn scale_grouped(shape: &[usize], channels: usize) -> Result<Self> {
        check_channels(shape, channels)?;
        Ok(Self::same_shape(LayerKind::Scale { channels }, shape))
    }

    /// Bias layer with one bias per leading-axis channel.
    pub fn bias(shape: &[usize]) -> Result<Self> {
        Self::bias_grouped(shape, leading(shape))
    }

    pub fn bias_grouped(shape: &[usize], channels: usize) -> Result<Self> {
        check_channels(shape, channels)?;
        Ok(Self::same_shape(LayerKind::Bias { channels }, shape))
    }

    pub fn activation(act: Activation, shape: &[usize]) -> Result<Self> {
        if let Activation::SoftPlus { beta } = act {
            if !(beta > 0.0 && beta.is_finite()) {
                return Err(Error::InvalidParameter(alloc::format!(
                    "softplus beta must be positive, got {beta}"
                )));
            }
        }
        Ok(Self::same_shape(LayerKind::Activation(act), shape))
    }

    pub fn centering(shape: &[usize], axis: StatsAxis) -> Result<Self> {
        Self::centering_grouped(shape, leading(shape), axis)
    }

    pub fn centering_grouped(shape: &[usize], channels: usize, axis: StatsAxis) -> Result<Self> {
        check_channels(shape, channels)?;
        Ok(Self::same_shape(LayerKind::Centering { channels, axis }, shape))
    }

    pub fn normalizing(shape: &[usize], axis: StatsAxis, eps: f64) -> Result<Self> {
        Self::normalizing_grouped(shape, leading(shape), axis, eps)
    }

    pub fn normalizing_grouped(shape: &[usize], channels: usize, axis: StatsAxis, eps: f64) -> Result<Self> {
        check_channels(shape, channels)?;
        if eps.is_nan() || eps < 0.0 {
            return Err(Error::InvalidParameter(alloc::format!("eps must be >= 0, got {eps}")));
        }
        Ok(Self::same_shape(LayerKind::Normalizing { channels, axis, eps }, shape))
    }

    pub fn mse(shape: &[usize]) -> Self {
        Self {
            kind: LayerKind::MseLoss,
            in_shape: shape.to_vec(),
            out_shape: Vec::new(),
        }
    }

    pub fn cross_entropy(classes: usize) -> Self {
        Self {
            kind: LayerKind::CrossEntropyLoss,
            in_shape: vec![classes],
            out_shape: Vec::new(),
        }
    }

    fn same_shape(kind: LayerKind, shape: &[usize]) -> Self {
        Self {
            kind,
            in_shape: shape.to_vec(),
            out_shape: shape.to_vec(),
        }
    }

    pub fn kind(&self) -> &LayerKind {
        &self.kind
    }

    /// Per-sample input shape.
    pub fn in_shape(&self) -> &[usize] {
        &self.in_shape
    }

    /// Per-sample output shape; empty (a scalar) for losses.
    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn in_len(&self) -> usize {
        self.in_shape.iter().product()
    }

    pub fn out_len(&self) -> usize {
        self.out_shape.iter().product()
    }

    pub fn is_loss(&self) -> bool {
        matches!(self.kind, LayerKind::MseLoss | LayerKind::CrossEntropyLoss)
    }

    pub fn param_shape(&self) -> Option<Vec<usize>> {
        match &self.kind {
            LayerKind::Dense { inputs, outputs } => Some(vec![*outputs, *inputs]),
            LayerKind::Conv2d(g) => Some(g.param_shape()),
            LayerKind::Scale { channels } | LayerKind::Bias { channels } => Some(vec![*channels]),
            _ => None,
        }
    }

    pub fn has_params(&self) -> bool {
        self.param_shape().is_some()
    }

    fn assignment(&self) -> Option<Assignment> {
        match self.kind {
            LayerKind::Dense { inputs, outputs } => Some(Assignment::Dense { inputs, outputs }),
            LayerKind::Conv2d(g) => Some(Assignment::Conv(g)),
            LayerKind::Scale { channels } => Some(Assignment::Scale {
                features: self.in_len(),
                channels,
            }),
            _ => None,
        }
    }

    fn grouping(&self) -> Option<(Grouping, f64)> {
        match self.kind {
            LayerKind::Centering { channels, axis } => Some((
                Grouping {
                    features: self.in_len(),
                    channels,
                    axis,
                },
                0.0,
            )),
            LayerKind::Normalizing { channels, axis, eps } => Some((
                Grouping {
                    features: self.in_len(),
                    channels,
                    axis,
                },
                eps,
            )),
            _ => None,
        }
    }

    fn batch_shape(&self, batch: usize, per_sample: &[usize]) -> Vec<usize> {
        let mut s = Vec::with_capacity(per_sample.len() + 1);
        s.push(batch);
        s.extend_from_slice(per_sample);
        s
    }

    fn expect_input(&self, ctx: &'static str, t: &Tensor, batch: usize) -> Result<()> {
        t.expect_shape(ctx, &self.batch_shape(batch, &self.in_shape))
    }

    fn expect_output(&self, ctx: &'static str, t: &Tensor, batch: usize) -> Result<()> {
        t.expect_shape(ctx, &self.batch_shape(batch, &self.out_shape))
    }

    fn expect_theta<'a>(&self, ctx: &'static str, theta: Option<&'a Tensor>) -> Result<Option<&'a Tensor>> {
        match (self.param_shape(), theta) {
            (Some(shape), Some(t)) => {
                t.expect_shape(ctx, &shape)?;
                Ok(Some(t))
            }
            (Some(_), None) => Err(Error::contract("parameterized layer called without parameters")),
            (None, Some(_)) => Err(Error::contract("parameter-free layer called with parameters")),
            (None, None) => Ok(None),
        }
    }

    fn block(&self, channels: usize) -> usize {
        self.in_len() / channels
    }

    pub fn forward(&self, x: &Tensor, theta: Option<&Tensor>, target: Option<&Tensor>) -> Result<(Tensor, LayerSaved)> {
        let batch = x.sample_count();
        self.expect_input("layer input", x, batch)?;
        let theta = self.expect_theta("layer parameters", theta)?;
        let mut aux = Aux::None;
        let y = match &self.kind {
            LayerKind::Dense { .. } | LayerKind::Conv2d(_) | LayerKind::Scale { .. } => {
                let th = theta.expect("checked above");
                self.assignment().expect("linear kind").apply(th.data(), x)
            }
            LayerKind::Bias { channels } => {
                let th = theta.expect("checked above").data();
                let block = self.block(*channels);
                let mut y = x.clone();
                for b in 0..batch {
                    for (i, v) in y.row_mut(b).iter_mut().enumerate() {
                        *v += th[i / block];
                    }
                }
                y
            }
            LayerKind::Activation(act) => x.map(|v| act.value(v)),
            LayerKind::Centering { .. } => self.grouping().expect("norm kind").0.center(x),
            LayerKind::Normalizing { axis, .. } => {
                if *axis == StatsAxis::Batch && batch < 2 {
                    return Err(Error::DegenerateStatistics {
                        layer: usize::MAX,
                        sample_count: batch,
                    });
                }
                let (g, eps) = self.grouping().expect("norm kind");
                let gamma = g.gammas(x, eps);
                let y = g.normalize(x, &gamma);
                aux = Aux::Gamma(gamma);
                y
            }
            LayerKind::MseLoss => {
                let target = target.ok_or_else(|| Error::contract("loss layer needs targets"))?;
                if target.len() != x.len() || target.sample_count() != batch {
                    return Err(Error::shape("mse target", x.shape(), target.shape()));
                }
                let target = target.clone().reshape(x.shape().to_vec())?;
                let y = loss::mse_forward(x, &target)?;
                aux = Aux::Target(target);
                y
            }
            LayerKind::CrossEntropyLoss => {
                let target = target.ok_or_else(|| Error::contract("loss layer needs targets"))?;
                let (y, probs) = loss::cross_entropy_forward(x, target)?;
                aux = Aux::Softmax {
                    probs,
                    target: target.clone(),
                };
                y
            }
        };
        let y = y.reshape(self.batch_shape(batch, &self.out_shape))?;
        Ok((y, LayerSaved { x_in: x.clone(), aux }))
    }

    /// `(d_x F)^* xh_next`
    pub fn adjoint_input(&self, saved: &LayerSaved, theta: Option<&Tensor>, xhat_next: &Tensor) -> Result<Tensor> {
        let x = &saved.x_in;
        let batch = x.sample_count();
        self.expect_output("adjoint seed", xhat_next, batch)?;
        let theta = self.expect_theta("layer parameters", theta)?;
        Ok(match &self.kind {
            LayerKind::Dense { .. } | LayerKind::Conv2d(_) | LayerKind::Scale { .. } => {
                let th = theta.expect("checked above");
                self.assignment()
                    .expect("linear kind")
                    .transpose_input(th.data(), xhat_next, x.shape())
            }
            LayerKind::Bias { .. } => xhat_next.clone(),
            LayerKind::Activation(act) => x.zip_map(xhat_next, |v, h| act.d1(v) * h)?,
            LayerKind::Centering { .. } => {
                let g = self.grouping().expect("norm kind").0;
                g.center(&xhat_next.clone().reshape(x.shape().to_vec())?)
            }
            LayerKind::Normalizing { .. } => {
                let g = self.grouping().expect("norm kind").0;
                g.normalize_adjoint(x, gammas(saved)?, xhat_next)
            }
            LayerKind::MseLoss => {
                let r = loss::mse_residual(x, loss_target(saved)?);
                loss::scale_rows(&r, xhat_next.data())
            }
            LayerKind::CrossEntropyLoss => {
                let (probs, target) = softmax(saved)?;
                let r = loss::cross_entropy_residual(probs, target);
                loss::scale_rows(&r, xhat_next.data())
            }
        })
    }

    /// `(d_theta F)^* xh_next`, summed over the batch.
    pub fn adjoint_param(&self, saved: &LayerSaved, xhat_next: &Tensor) -> Result<Tensor> {
        let x = &saved.x_in;
        let batch = x.sample_count();
        self.expect_output("adjoint seed", xhat_next, batch)?;
        let shape = self
            .param_shape()
            .ok_or_else(|| Error::contract("adjoint_param called on a parameter-free layer"))?;
        let len = shape.iter().product();
        let data = match &self.kind {
            LayerKind::Bias { channels } => {
                let block = self.block(*channels);
                let mut t = vec![0.0; len];
                for b in 0..batch {
                    for (i, h) in xhat_next.row(b).iter().enumerate() {
                        t[i / block] += h;
                    }
                }
                t
            }
            _ => self
                .assignment()
                .expect("parameterized kinds are linear or bias")
                .transpose_param(x, xhat_next, len),
        };
        Tensor::new(shape, data)
    }

    /// `(d_x F) xd + (d_theta F) thetad`. A missing `thetad` is zero.
    pub fn tangent(
        &self,
        saved: &LayerSaved,
        theta: Option<&Tensor>,
        xdot: &Tensor,
        thetadot: Option<&Tensor>,
    ) -> Result<Tensor> {
        let x = &saved.x_in;
        let batch = x.sample_count();
        self.expect_input("tangent input", xdot, batch)?;
        let theta = self.expect_theta("layer parameters", theta)?;
        if let Some(td) = thetadot {
            let shape = self
                .param_shape()
                .ok_or_else(|| Error::contract("parameter direction for a parameter-free layer"))?;
            td.expect_shape("parameter direction", &shape)?;
        }
        let out = match &self.kind {
            LayerKind::Dense { .. } | LayerKind::Conv2d(_) | LayerKind::Scale { .. } => {
                let map = self.assignment().expect("linear kind");
                let mut y = map.apply(theta.expect("checked above").data(), xdot);
                if let Some(td) = thetadot {
                    let y2 = map.apply(td.data(), x);
                    y.data_mut().iter_mut().zip(y2.data()).for_each(|(a, b)| *a += b);
                }
                y
            }
            LayerKind::Bias { channels } => {
                let mut y = xdot.clone();
                if let Some(td) = thetadot {
                    let block = self.block(*channels);
                    let td = td.data();
                    for b in 0..batch {
                        for (i, v) in y.row_mut(b).iter_mut().enumerate() {
                            *v += td[i / block];
                        }
                    }
                }
                y
            }
            LayerKind::Activation(act) => x.zip_map(xdot, |v, d| act.d1(v) * d)?,
            LayerKind::Centering { .. } => self.grouping().expect("norm kind").0.center(xdot),
            LayerKind::Normalizing { .. } => {
                let g = self.grouping().expect("norm kind").0;
                g.normalize_tangent(x, gammas(saved)?, xdot)
            }
            LayerKind::MseLoss => {
                let r = loss::mse_residual(x, loss_target(saved)?);
                Tensor::from_vec(r.row_dots(xdot)?)
            }
            LayerKind::CrossEntropyLoss => {
                let (probs, target) = softmax(saved)?;
                let r = loss::cross_entropy_residual(probs, target);
                Tensor::from_vec(r.row_dots(xdot)?)
            }
        };
        out.reshape(self.batch_shape(batch, &self.out_shape))
    }

    /// Per-sample `1/2 <D^2 F (xd, thetad) (xd, thetad), xh_next>`.
    pub fn second_order_contribution(
        &self,
        saved: &LayerSaved,
        xdot: &Tensor,
        thetadot: Option<&Tensor>,
        xhat_next: &Tensor,
    ) -> Result<Vec<f64>> {
        self.second_order_contribution_with(saved, xdot, thetadot, xhat_next, NormCurvatureRule::ADOPTED)
    }

    /// Same as [`Layer::second_order_contribution`] with an explicit closed
    /// form for normalizing layers.
    pub fn second_order_contribution_with(
        &self,
        saved: &LayerSaved,
        xdot: &Tensor,
        thetadot: Option<&Tensor>,
        xhat_next: &Tensor,
        rule: NormCurvatureRule,
    ) -> Result<Vec<f64>> {
        let x = &saved.x_in;
        let batch = x.sample_count();
        self.expect_input("tangent input", xdot, batch)?;
        self.expect_output("adjoint seed", xhat_next, batch)?;
        Ok(match &self.kind {
            LayerKind::Dense { .. } | LayerKind::Conv2d(_) | LayerKind::Scale { .. } => match thetadot {
                Some(td) => {
                    let y = self.assignment().expect("linear kind").apply(td.data(), xdot);
                    (0..batch)
                        .map(|b| crate::tensor::dot(y.row(b), xhat_next.row(b)))
                        .collect()
                }
                None => vec![0.0; batch],
            },
            LayerKind::Bias { .. } | LayerKind::Centering { .. } => vec![0.0; batch],
            LayerKind::Activation(act) => (0..batch)
                .map(|b| {
                    let mut acc = 0.0;
                    for ((v, d), h) in x.row(b).iter().zip(xdot.row(b)).zip(xhat_next.row(b)) {
                        acc += act.d2(*v) * d * d * h;
                    }
                    0.5 * acc
                })
                .collect(),
            LayerKind::Normalizing { .. } => {
                let g = self.grouping().expect("norm kind").0;
                let h = xhat_next.clone().reshape(x.shape().to_vec())?;
                g.normalize_contribution(x, gammas(saved)?, xdot, &h, rule)
            }
            LayerKind::MseLoss => (0..batch)
                .map(|b| {
                    let d = xdot.row(b);
                    0.5 * xhat_next.data()[b] * crate::tensor::dot(d, d)
                })
                .collect(),
            LayerKind::CrossEntropyLoss => {
                let (probs, _) = softmax(saved)?;
                loss::cross_entropy_hessian_form(probs, xdot)
                    .into_iter()
                    .zip(xhat_next.data())
                    .map(|(q, w)| 0.5 * w * q)
                    .collect()
            }
        })
    }

    /// `(A, B)` with `<A, a> + <B, b> = <D^2 F (xd, thetad) (a, b), xh_next>`
    /// for every `(a, b)`. `B` is `None` for parameter-free layers.
    pub fn second_order_adjoints(
        &self,
        saved: &LayerSaved,
        xdot: &Tensor,
        thetadot: Option<&Tensor>,
        xhat_next: &Tensor,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let x = &saved.x_in;
        let batch = x.sample_count();
        self.expect_input("tangent input", xdot, batch)?;
        self.expect_output("adjoint seed", xhat_next, batch)?;
        let zero_b = self.param_shape().map(Tensor::zeros);
        Ok(match &self.kind {
            LayerKind::Dense { .. } | LayerKind::Conv2d(_) | LayerKind::Scale { .. } => {
                let map = self.assignment().expect("linear kind");
                let shape = self.param_shape().expect("linear kinds have parameters");
                let a = match thetadot {
                    Some(td) => map.transpose_input(td.data(), xhat_next, x.shape()),
                    None => Tensor::zeros(x.shape().to_vec()),
                };
                let b = map.transpose_param(xdot, xhat_next, shape.iter().product());
                (a, Some(Tensor::new(shape, b)?))
            }
            LayerKind::Bias { .. } => (Tensor::zeros(x.shape().to_vec()), zero_b),
            LayerKind::Centering { .. } => (Tensor::zeros(x.shape().to_vec()), None),
            LayerKind::Activation(act) => {
                let mut a = x.zip_map(xdot, |v, d| act.d2(v) * d)?;
                a.data_mut().iter_mut().zip(xhat_next.data()).for_each(|(v, h)| *v *= h);
                (a, None)
            }
            LayerKind::Normalizing { .. } => {
                let g = self.grouping().expect("norm kind").0;
                let h = xhat_next.clone().reshape(x.shape().to_vec())?;
                (g.normalize_second_adjoint(x, gammas(saved)?, xdot, &h), None)
            }
            LayerKind::MseLoss => (loss::scale_rows(xdot, xhat_next.data()), None),
            LayerKind::CrossEntropyLoss => {
                let (probs, _) = softmax(saved)?;
                let hv = loss::cross_entropy_hessian_apply(probs, xdot);
                (loss::scale_rows(&hv, xhat_next.data()), None)
            }
        })
    }
}

fn gammas(saved: &LayerSaved) -> Result<&[f64]> {
    match &saved.aux {
        Aux::Gamma(g) => Ok(g),
        _ => Err(Error::contract("normalizing layer state missing")),
    }
}

fn loss_target(saved: &LayerSaved) -> Result<&Tensor> {
    match &saved.aux {
        Aux::Target(t) => Ok(t),
        _ => Err(Error::contract("loss layer state missing")),
    }
}

fn softmax(saved: &LayerSaved) -> Result<(&Tensor, &Tensor)> {
    match &saved.aux {
        Aux::Softmax { probs, target } => Ok((probs, target)),
        _ => Err(Error::contract("cross-entropy state missing")),
    }
}
