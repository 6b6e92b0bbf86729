//! Finite-difference self-checks for the command line.
//!
//! Every check compares an engine quantity against a value computed from
//! forward evaluations alone.

use curvature_core::engine::{hessian_vector_product, run_backward, run_forward, tangent_curvature, Network};
use curvature_core::layers::{Activation, ConvGeometry, Layer, NormCurvatureRule, StatsAxis};
use curvature_core::{BatchView, ParamVec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TrainError};

pub const GRADIENT_TOL: f64 = 1e-6;
pub const CURVATURE_TOL: f64 = 1e-4;
pub const HVP_TOL: f64 = 1e-9;
pub const DUALITY_TOL: f64 = 1e-10;
pub const RULE_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
    /// Informational lines (rejected candidates) do not fail the run.
    pub required: bool,
}

impl CheckLine {
    pub fn passed(&self) -> bool {
        self.error <= self.tolerance
    }
}

/// `|a - b|_inf / max(|a|_inf, |b|_inf)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Comma-separated positive widths, at least two of them.
pub fn parse_sizes(spec: &str) -> std::result::Result<Vec<usize>, String> {
    let sizes = spec
        .split(',')
        .map(|s| match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(format!("bad size `{s}` in `{spec}`")),
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if sizes.len() < 2 {
        return Err(format!("`{spec}` needs at least an input and an output width"));
    }
    Ok(sizes)
}

fn normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_params(layers: &[Layer], rng: &mut ChaCha8Rng) -> ParamVec {
    ParamVec::new(
        layers
            .iter()
            .enumerate()
            .filter_map(|(s, l)| l.param_shape().map(|shape| (s, shape)))
            .map(|(s, shape)| {
                let n = shape.iter().product();
                let data = normal(rng, n).into_iter().map(|v| 0.5 + 0.5 * v).collect();
                (s, Tensor::new(shape, data).expect("length matches"))
            })
            .collect(),
    )
}

/// A seeded network with random parameters plus a matching batch.
pub fn seeded_case(layers: Vec<Layer>, batch: usize, seed: u64) -> Result<(Network, BatchView)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = random_params(&layers, &mut rng);
    let in_shape = layers[0].in_shape().to_vec();
    let last = layers.last().expect("non-empty").clone();
    let net = Network::new(layers, params)?;
    let mut shape = vec![batch];
    shape.extend_from_slice(&in_shape);
    let inputs = Tensor::new(shape, normal(&mut rng, batch * in_shape.iter().product::<usize>()))?;
    let targets = match last.kind() {
        curvature_core::layers::LayerKind::CrossEntropyLoss => {
            Tensor::from_vec((0..batch).map(|_| rng.random_range(0..last.in_len()) as f64).collect())
        }
        _ => {
            let mut shape = vec![batch];
            shape.extend_from_slice(last.in_shape());
            Tensor::new(shape, normal(&mut rng, batch * last.in_len()))?
        }
    };
    Ok((net, BatchView::new(inputs, targets)?))
}

/// One small network per layer kind, each wrapped so that both its input
/// and its parameters are exercised.
pub fn layer_cases() -> Result<Vec<(&'static str, Vec<Layer>)>> {
    let f = [4usize];
    let act = |a| -> Result<Vec<Layer>> { Ok(vec![Layer::dense(3, 4), Layer::activation(a, &f)?, Layer::mse(&f)]) };
    let conv = ConvGeometry {
        in_channels: 2,
        out_channels: 2,
        height: 5,
        width: 4,
        kernel_h: 3,
        kernel_w: 2,
        stride: 1,
    };
    let conv_out = [2usize, 3, 3];
    Ok(vec![
        ("dense", vec![Layer::dense(3, 4), Layer::mse(&f)]),
        (
            "conv2d",
            vec![Layer::conv2d(conv)?, Layer::bias(&conv_out)?, Layer::mse(&conv_out)],
        ),
        ("scale", vec![Layer::dense(3, 4), Layer::scale(&f)?, Layer::mse(&f)]),
        ("bias", vec![Layer::dense(3, 4), Layer::bias(&f)?, Layer::mse(&f)]),
        ("tanh", act(Activation::Tanh)?),
        ("softplus", act(Activation::SoftPlus { beta: 2.0 })?),
        ("elu", act(Activation::Elu)?),
        (
            "normalizing",
            vec![
                Layer::dense(3, 4),
                Layer::centering(&f, StatsAxis::Batch)?,
                Layer::normalizing(&f, StatsAxis::Batch, 1e-3)?,
                Layer::mse(&f),
            ],
        ),
        (
            "normalizing-sample",
            vec![
                Layer::dense(3, 4),
                Layer::centering_grouped(&f, 1, StatsAxis::Sample)?,
                Layer::normalizing_grouped(&f, 1, StatsAxis::Sample, 1e-3)?,
                Layer::mse(&f),
            ],
        ),
        ("mse", vec![Layer::dense(3, 4), Layer::mse(&f)]),
        ("cross-entropy", vec![Layer::dense(3, 4), Layer::cross_entropy(4)]),
    ])
}

/// Dense/tanh stack through the given widths, ending in cross-entropy, and a
/// variant with batch normalization after the first layer.
pub fn composite_cases(sizes: &[usize]) -> Result<Vec<(&'static str, Vec<Layer>)>> {
    let mut plain = Vec::new();
    for (i, w) in sizes.windows(2).enumerate() {
        if i > 0 {
            plain.push(Layer::activation(Activation::Tanh, &[w[0]])?);
        }
        plain.push(Layer::dense(w[0], w[1]));
    }
    let classes = *sizes.last().expect("at least two sizes");
    plain.push(Layer::cross_entropy(classes));

    let h = [sizes[1]];
    let mut normed = vec![
        Layer::dense(sizes[0], sizes[1]),
        Layer::centering(&h, StatsAxis::Batch)?,
        Layer::normalizing(&h, StatsAxis::Batch, 1e-3)?,
        Layer::scale(&h)?,
        Layer::bias(&h)?,
        Layer::activation(Activation::SoftPlus { beta: 1.0 }, &h)?,
    ];
    normed.push(Layer::dense(sizes[1], classes));
    normed.push(Layer::cross_entropy(classes));
    Ok(vec![("composite", plain), ("composite-normalized", normed)])
}

fn batch_loss(net: &Network, batch: &BatchView) -> Result<f64> {
    let (loss, _) = run_forward(net, batch)?;
    Ok(loss.data().iter().sum::<f64>() / batch.sample_count() as f64)
}

fn shifted(net: &Network, dir: &ParamVec, t: f64) -> Result<Network> {
    let mut n = net.clone();
    n.set_params(net.params().axpy(t, dir)?)?;
    Ok(n)
}

/// Central differences of the batch loss, one coordinate at a time.
pub fn fd_gradient(net: &Network, batch: &BatchView, h: f64) -> Result<Vec<f64>> {
    let flat = net.params().flatten();
    let mut out = Vec::with_capacity(flat.len());
    for i in 0..flat.len() {
        let mut e = vec![0.0; flat.len()];
        e[i] = 1.0;
        let e = net.params().with_flat(&e)?;
        let up = batch_loss(&shifted(net, &e, h)?, batch)?;
        let down = batch_loss(&shifted(net, &e, -h)?, batch)?;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Second central difference of the batch loss along `dir`.
pub fn fd_curvature(net: &Network, batch: &BatchView, dir: &ParamVec, h: f64) -> Result<f64> {
    let mid = batch_loss(net, batch)?;
    let up = batch_loss(&shifted(net, dir, h)?, batch)?;
    let down = batch_loss(&shifted(net, dir, -h)?, batch)?;
    Ok((up - 2.0 * mid + down) / (h * h))
}

fn unit_direction(like: &ParamVec, rng: &mut ChaCha8Rng) -> Result<ParamVec> {
    let v = normal(rng, like.len());
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(like.with_flat(&v.iter().map(|x| x / norm).collect::<Vec<_>>())?)
}

/// Gradient, curvature, Hessian-vector and duality checks on one network.
pub fn check_network(name: &str, net: &Network, batch: &BatchView, seed: u64) -> Result<Vec<CheckLine>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (_, mut tape) = run_forward(net, batch)?;
    let grad = run_backward(net, &mut tape)?;
    let fd = fd_gradient(net, batch, 1e-5)?;
    let mut lines = vec![CheckLine {
        name: format!("{name}: gradient"),
        error: relative_error(&grad.flatten(), &fd),
        tolerance: GRADIENT_TOL,
        required: true,
    }];

    let (mut curv, mut hvp_q, mut dual, mut sym) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..3 {
        let u = unit_direction(net.params(), &mut rng)?;
        let v = unit_direction(net.params(), &mut rng)?;
        let c = tangent_curvature(net, &tape, &u)?;
        let q = c.per_sample_qform.data().iter().sum::<f64>() / batch.sample_count() as f64;
        curv = curv.max(relative_error(&[q], &[fd_curvature(net, batch, &u, 1e-3)?]));
        let hu = hessian_vector_product(net, &tape, &u)?;
        let hv = hessian_vector_product(net, &tape, &v)?;
        hvp_q = hvp_q.max(relative_error(&[hu.inner(&u)?], &[q]));
        sym = sym.max(relative_error(&[hu.inner(&v)?], &[u.inner(&hv)?]));
        dual = dual.max(relative_error(&[c.dir_dot_grad], &[grad.inner(&u)?]));
    }
    for (what, error, tolerance) in [
        ("curvature", curv, CURVATURE_TOL),
        ("hvp quadratic form", hvp_q, HVP_TOL),
        ("hvp symmetry", sym, HVP_TOL),
        ("duality", dual, DUALITY_TOL),
    ] {
        lines.push(CheckLine {
            name: format!("{name}: {what}"),
            error,
            tolerance,
            required: true,
        });
    }
    Ok(lines)
}

/// Score every candidate second-order rule of the normalizing layer against
/// the second difference of `t -> <F(x + t xd), xh>`.
pub fn adjudicate_normalizing(seed: u64) -> Result<Vec<(NormCurvatureRule, CheckLine)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [5usize];
    let b = 6;
    let mut out = Vec::new();
    for (axis, channels) in [(StatsAxis::Batch, 5), (StatsAxis::Sample, 1)] {
        let layer = Layer::normalizing_grouped(&shape, channels, axis, 1e-3)?;
        let t = |rng: &mut ChaCha8Rng| Tensor::new(vec![b, 5], normal(rng, b * 5));
        let (x, xd, xh) = (t(&mut rng)?, t(&mut rng)?, t(&mut rng)?);
        let phi = |s: f64| -> Result<f64> {
            let moved = x.zip_map(&xd, |a, d| a + s * d)?;
            let (y, _) = layer.forward(&moved, None, None)?;
            Ok(y.dot(&xh)?)
        };
        let h = 1e-3;
        let fd = (phi(h)? - 2.0 * phi(0.0)? + phi(-h)?) / (h * h);
        let (_, saved) = layer.forward(&x, None, None)?;
        for rule in NormCurvatureRule::ALL {
            let r = layer.second_order_contribution_with(&saved, &xd, None, &xh, rule)?;
            let analytic = 2.0 * r.iter().sum::<f64>();
            let axis_name = match axis {
                StatsAxis::Batch => "batch",
                StatsAxis::Sample => "sample",
            };
            out.push((
                rule,
                CheckLine {
                    name: format!("normalizing ({axis_name} axis) rule {}", rule.name()),
                    error: relative_error(&[analytic], &[fd]),
                    tolerance: RULE_TOL,
                    required: rule == NormCurvatureRule::ADOPTED,
                },
            ));
        }
    }
    Ok(out)
}

/// The full suite, optionally restricted to the cases whose name starts
/// with `only`.
pub fn run_checks(seed: u64, sizes: &[usize], only: Option<&str>) -> Result<Vec<CheckLine>> {
    let mut cases = layer_cases()?;
    cases.extend(composite_cases(sizes)?);
    let selected: Vec<_> = cases
        .into_iter()
        .filter(|(name, _)| only.is_none_or(|o| name.starts_with(o)))
        .collect();
    let wants_rules = only.is_none_or(|o| "normalizing".starts_with(o) || o.starts_with("normalizing"));
    if selected.is_empty() && !wants_rules {
        return Err(TrainError::Config(format!(
            "no check matches `{}`",
            only.unwrap_or_default()
        )));
    }
    let mut lines = Vec::new();
    for (i, (name, layers)) in selected.into_iter().enumerate() {
        let (net, batch) = seeded_case(layers, 6, seed.wrapping_add(i as u64))?;
        lines.extend(check_network(name, &net, &batch, seed)?);
    }
    if wants_rules {
        lines.extend(adjudicate_normalizing(seed)?.into_iter().map(|(_, l)| l));
    }
    Ok(lines)
}
