//! End-to-end acceptance suite. Prints one `PASS`/`FAIL` line per criterion
//! and exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use curvature_core::engine::{hessian_vector_product, run_backward, run_forward, tangent_curvature, Network};
use curvature_core::layers::{Activation, ConvGeometry, Layer, LayerKind, StatsAxis};
use curvature_core::optim::{schedule_value, DirectionMode, PrecondState, ScheduleKind};
use curvature_core::rescale::{batch_curvature, RescaleState};
use curvature_core::{BatchView, ParamVec, Tensor};
use curvature_train::bench::bench_uniform;
use curvature_train::config::{DatasetConfig, LayerConfig, MemoryConfig, RunConfig, ScheduleConfig};
use curvature_train::data::{self, encode_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
use curvature_train::harness::{demo_newton_1d, demo_stochastic_mean, ema_report, load_splits, train, RowKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn rel_vec(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

// Oracle networks -----------------------------------------------------------

struct Case {
    name: String,
    net: Network,
    batch: BatchView,
}

fn build_case(name: &str, layers: Vec<Layer>, seed: u64) -> Case {
    const BATCH: usize = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ParamVec::new(
        layers
            .iter()
            .enumerate()
            .filter_map(|(s, l)| l.param_shape().map(|shape| (s, shape)))
            .map(|(s, shape)| {
                let n = shape.iter().product();
                (s, Tensor::new(shape, uniform(&mut rng, n)).unwrap())
            })
            .collect(),
    );
    let in_shape = layers[0].in_shape().to_vec();
    let last = layers.last().unwrap().clone();
    let net = Network::new(layers, params).unwrap();
    let mut shape = vec![BATCH];
    shape.extend_from_slice(&in_shape);
    let inputs = Tensor::new(shape, uniform(&mut rng, BATCH * in_shape.iter().product::<usize>())).unwrap();
    let targets = if matches!(last.kind(), LayerKind::CrossEntropyLoss) {
        Tensor::from_vec((0..BATCH).map(|_| rng.random_range(0..last.in_len()) as f64).collect())
    } else {
        let mut shape = vec![BATCH];
        shape.extend_from_slice(last.in_shape());
        Tensor::new(shape, uniform(&mut rng, BATCH * last.in_len())).unwrap()
    };
    Case {
        name: name.to_owned(),
        net,
        batch: BatchView::new(inputs, targets).unwrap(),
    }
}

fn oracle_cases() -> Vec<Case> {
    let f = [4usize];
    let wrap = |mid: Layer| vec![Layer::dense(3, 4), mid, Layer::mse(&f)];
    let conv = |c_in, c_out, h, w, k| ConvGeometry {
        in_channels: c_in,
        out_channels: c_out,
        height: h,
        width: w,
        kernel_h: k,
        kernel_w: k,
        stride: 1,
    };
    let h6 = [6usize];
    let layer_kinds: Vec<(&str, Vec<Layer>)> = vec![
        ("dense", vec![Layer::dense(3, 4), Layer::mse(&f)]),
        (
            "conv2d",
            vec![Layer::conv2d(conv(2, 2, 4, 4, 2)).unwrap(), Layer::mse(&[2, 3, 3])],
        ),
        ("scale", wrap(Layer::scale(&f).unwrap())),
        ("bias", wrap(Layer::bias(&f).unwrap())),
        ("tanh", wrap(Layer::activation(Activation::Tanh, &f).unwrap())),
        (
            "softplus",
            wrap(Layer::activation(Activation::SoftPlus { beta: 2.0 }, &f).unwrap()),
        ),
        ("elu", wrap(Layer::activation(Activation::Elu, &f).unwrap())),
        (
            "centering+normalizing/batch",
            vec![
                Layer::dense(3, 4),
                Layer::centering(&f, StatsAxis::Batch).unwrap(),
                Layer::normalizing(&f, StatsAxis::Batch, 1e-3).unwrap(),
                Layer::mse(&f),
            ],
        ),
        (
            "centering+normalizing/sample",
            vec![
                Layer::dense(3, 4),
                Layer::centering_grouped(&f, 1, StatsAxis::Sample).unwrap(),
                Layer::normalizing_grouped(&f, 1, StatsAxis::Sample, 1e-3).unwrap(),
                Layer::mse(&f),
            ],
        ),
        ("cross-entropy", vec![Layer::dense(3, 4), Layer::cross_entropy(4)]),
    ];
    let composites: Vec<(&str, Vec<Layer>)> = vec![
        (
            "net dense-tanh-dense-mse",
            vec![
                Layer::dense(4, 8),
                Layer::activation(Activation::Tanh, &[8]).unwrap(),
                Layer::dense(8, 3),
                Layer::mse(&[3]),
            ],
        ),
        (
            "net conv-bias-softplus-dense-xent",
            vec![
                Layer::conv2d(conv(1, 2, 5, 5, 3)).unwrap(),
                Layer::bias(&[2, 3, 3]).unwrap(),
                Layer::activation(Activation::SoftPlus { beta: 1.0 }, &[2, 3, 3]).unwrap(),
                Layer::dense(18, 3),
                Layer::cross_entropy(3),
            ],
        ),
        (
            "net dense-batchnorm-xent",
            vec![
                Layer::dense(4, 6),
                Layer::centering(&h6, StatsAxis::Batch).unwrap(),
                Layer::normalizing(&h6, StatsAxis::Batch, 1e-3).unwrap(),
                Layer::scale(&h6).unwrap(),
                Layer::bias(&h6).unwrap(),
                Layer::cross_entropy(6),
            ],
        ),
        (
            "net dense-elu-dense-softplus-dense-mse",
            vec![
                Layer::dense(3, 6),
                Layer::activation(Activation::Elu, &h6).unwrap(),
                Layer::dense(6, 6),
                Layer::activation(Activation::SoftPlus { beta: 1.5 }, &h6).unwrap(),
                Layer::dense(6, 2),
                Layer::mse(&[2]),
            ],
        ),
        (
            "net dense-layernorm-tanh-dense-xent",
            vec![
                Layer::dense(4, 6),
                Layer::centering_grouped(&h6, 1, StatsAxis::Sample).unwrap(),
                Layer::normalizing_grouped(&h6, 1, StatsAxis::Sample, 1e-3).unwrap(),
                Layer::activation(Activation::Tanh, &h6).unwrap(),
                Layer::dense(6, 3),
                Layer::cross_entropy(3),
            ],
        ),
    ];
    layer_kinds
        .into_iter()
        .chain(composites)
        .enumerate()
        .map(|(i, (name, layers))| build_case(name, layers, 100 + i as u64))
        .collect()
}

fn loss_at(net: &Network, batch: &BatchView, theta: &ParamVec) -> f64 {
    let mut n = net.clone();
    n.set_params(theta.clone()).unwrap();
    let (loss, _) = run_forward(&n, batch).unwrap();
    loss.data().iter().sum::<f64>() / batch.sample_count() as f64
}

fn unit_directions(like: &ParamVec, count: usize, seed: u64) -> Vec<ParamVec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let v = uniform(&mut rng, like.len());
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            like.with_flat(&v.iter().map(|x| x / norm).collect::<Vec<_>>()).unwrap()
        })
        .collect()
}

fn worst<'a>(items: impl Iterator<Item = (&'a str, f64)>) -> (String, f64) {
    items.fold((String::new(), 0.0), |acc, (n, e)| {
        if e > acc.1 || acc.0.is_empty() {
            (n.to_owned(), e)
        } else {
            acc
        }
    })
}

// Criteria ------------------------------------------------------------------

fn gradient_oracle() -> Outcome {
    const H: f64 = 1e-5;
    let start = Instant::now();
    let cases = oracle_cases();
    let mut errors = Vec::new();
    for c in &cases {
        ensure(c.net.len() <= 6 && c.net.params().len() <= 2000, || {
            format!("{} is too large", c.name)
        })?;
        let (_, mut tape) = run_forward(&c.net, &c.batch).unwrap();
        let grad = run_backward(&c.net, &mut tape).unwrap().flatten();
        let theta = c.net.params().flatten();
        let fd: Vec<f64> = (0..theta.len())
            .map(|i| {
                let mut up = theta.clone();
                let mut down = theta.clone();
                up[i] += H;
                down[i] -= H;
                let up = loss_at(&c.net, &c.batch, &c.net.params().with_flat(&up).unwrap());
                let down = loss_at(&c.net, &c.batch, &c.net.params().with_flat(&down).unwrap());
                (up - down) / (2.0 * H)
            })
            .collect();
        errors.push((c.name.as_str(), rel_vec(&grad, &fd)));
    }
    let secs = start.elapsed().as_secs_f64();
    let (name, err) = worst(errors.iter().copied());
    let detail = format!(
        "{} nets, worst {name} rel err {err:.2e} (tol 1e-6), {secs:.2}s (limit 10s)",
        cases.len()
    );
    ensure(err <= 1e-6 && secs < 10.0, || detail.clone())?;
    Ok(detail)
}

fn curvature_oracle() -> Outcome {
    const TAU: f64 = 1e-4;
    let mut errors = Vec::new();
    for (i, c) in oracle_cases().iter().enumerate() {
        let (_, mut tape) = run_forward(&c.net, &c.batch).unwrap();
        run_backward(&c.net, &mut tape).unwrap();
        let mid = loss_at(&c.net, &c.batch, c.net.params());
        let mut e = 0.0f64;
        for d in unit_directions(c.net.params(), 5, 7 + i as u64) {
            let cur = tangent_curvature(&c.net, &tape, &d).unwrap();
            let q = cur.per_sample_qform.data().iter().sum::<f64>() / c.batch.sample_count() as f64;
            let up = loss_at(&c.net, &c.batch, &c.net.params().axpy(TAU, &d).unwrap());
            let down = loss_at(&c.net, &c.batch, &c.net.params().axpy(-TAU, &d).unwrap());
            e = e.max(rel(q, (up - 2.0 * mid + down) / (TAU * TAU)));
        }
        errors.push((c.name.clone(), e));
    }
    let (name, err) = worst(errors.iter().map(|(n, e)| (n.as_str(), *e)));
    let detail = format!(
        "{} nets x 5 directions, worst {name} rel err {err:.2e} (tol 1e-4)",
        errors.len()
    );
    ensure(err <= 1e-4, || detail.clone())?;
    Ok(detail)
}

fn hvp_consistency() -> Outcome {
    let (mut quad, mut sym) = (0.0f64, 0.0f64);
    for (i, c) in oracle_cases().iter().enumerate() {
        let (_, mut tape) = run_forward(&c.net, &c.batch).unwrap();
        run_backward(&c.net, &mut tape).unwrap();
        let dirs = unit_directions(c.net.params(), 6, 31 + i as u64);
        for pair in dirs.chunks(2) {
            let (u, v) = (&pair[0], &pair[1]);
            let hu = hessian_vector_product(&c.net, &tape, u).unwrap();
            let hv = hessian_vector_product(&c.net, &tape, v).unwrap();
            let q = tangent_curvature(&c.net, &tape, u).unwrap();
            let q = q.per_sample_qform.data().iter().sum::<f64>() / c.batch.sample_count() as f64;
            quad = quad.max(rel(hu.inner(u).unwrap(), q));
            sym = sym.max(rel(hu.inner(v).unwrap(), u.inner(&hv).unwrap()));
        }
    }
    let detail = format!("quadratic form rel err {quad:.2e}, symmetry rel err {sym:.2e} (tol 1e-9)");
    ensure(quad <= 1e-9 && sym <= 1e-9, || detail.clone())?;
    Ok(detail)
}

fn duality() -> Outcome {
    let mut err = 0.0f64;
    for (i, c) in oracle_cases().iter().enumerate() {
        let (_, mut tape) = run_forward(&c.net, &c.batch).unwrap();
        let grad = run_backward(&c.net, &mut tape).unwrap();
        for d in unit_directions(c.net.params(), 5, 53 + i as u64) {
            let cur = tangent_curvature(&c.net, &tape, &d).unwrap();
            err = err.max(rel(cur.dir_dot_grad, grad.inner(&d).unwrap()));
        }
    }
    let detail = format!("worst rel err {err:.2e} (tol 1e-10)");
    ensure(err <= 1e-10, || detail.clone())?;
    Ok(detail)
}

fn checkpoint_accounting() -> Outcome {
    let mut ratio_misses = Vec::new();
    let mut peak_misses = Vec::new();
    let mut worst_diff = 0.0f64;
    for n in 4..=32 {
        let r = bench_uniform(n, 5, 4, None, n as u64).map_err(|e| e.to_string())?;
        let ratios: Vec<f64> = r.rows.iter().map(|row| row.ratio).collect();
        if ratios != [1.0, 1.5, 2.0] {
            ratio_misses.push(format!("n={n} {:.4}", ratios[2]));
        }
        let peak = r.rows[2].peak_activation_slots;
        if peak > n.div_ceil(2) + 1 {
            peak_misses.push(format!("n={n} {peak}>{}", n.div_ceil(2) + 1));
        }
        worst_diff = worst_diff.max(r.max_output_diff);
    }
    let detail = format!(
        "n=4..32: ratio misses [{}]; peak-slot misses [{}]; max plain/checkpointed diff {worst_diff:.1e} (tol 1e-12)",
        ratio_misses.join(", "),
        peak_misses.join(", ")
    );
    ensure(
        ratio_misses.is_empty() && peak_misses.is_empty() && worst_diff <= 1e-12,
        || detail.clone(),
    )?;
    Ok(detail)
}

fn newton_map() -> Outcome {
    let mut step_err = 0.0f64;
    for theta0 in [1.5, -1.5, 0.5, -0.5, 0.9, 1.1] {
        let t = demo_newton_1d(theta0, 5).map_err(|e| e.to_string())?;
        for w in t.windows(2) {
            let err = (w[1] + w[0].powi(3)).abs() / w[0].abs().powi(3).max(1.0);
            step_err = step_err.max(err);
        }
    }
    for theta0 in [1.5, -1.5] {
        let t = demo_newton_1d(theta0, 5).map_err(|e| e.to_string())?;
        ensure(t.iter().any(|v| v.abs() > 1e12), || {
            format!("theta0 {theta0} did not diverge: {t:?}")
        })?;
    }
    for theta0 in [0.5, -0.5] {
        let t = demo_newton_1d(theta0, 10).map_err(|e| e.to_string())?;
        ensure(t.iter().any(|v| v.abs() < 1e-6), || {
            format!("theta0 {theta0} did not converge: {t:?}")
        })?;
    }
    let detail =
        format!("worst per-step deviation from -theta^3 {step_err:.2e} (tol 1e-10); |1.5| diverges, |0.5| converges");
    ensure(step_err <= 1e-10, || detail.clone())?;
    Ok(detail)
}

fn stochastic_mean() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let xs: Vec<f64> = (0..500).map(|_| 5.0 + 3.0 * rng.random_range(-1.0..1.0)).collect();
    let mut err = 0.0f64;
    let mut steps = 0;
    for (bs, beta3) in [(1, 0.0), (10, 0.9), (64, 0.5), (500, 0.99)] {
        for s in demo_stochastic_mean(&xs, bs, 40, -20.0, beta3, bs as u64).map_err(|e| e.to_string())? {
            err = err.max((s.theta - s.batch_mean).abs() / s.batch_mean.abs().max(1.0));
            steps += 1;
        }
    }
    let detail = format!("{steps} iterations, worst |theta - batch mean| {err:.2e} (tol 1e-12)");
    ensure(err <= 1e-12, || detail.clone())?;
    Ok(detail)
}

fn scale_invariance() -> Outcome {
    const LAMBDA: f64 = 1e-4;
    const ELL: f64 = 1.0;
    let scales = [0.01, 1.0, 100.0];
    let ds = data::synthetic_blobs(3, 40, 4, 3).map_err(|e| e.to_string())?;
    let layers = vec![
        Layer::dense(4, 8),
        Layer::activation(Activation::Tanh, &[8]).unwrap(),
        Layer::dense(8, 3),
        Layer::cross_entropy(3),
    ];
    let mut net = build_case("scale", layers, 9).net;
    let mut precond = PrecondState::new(0.9, 0.999, 1e-8).unwrap();
    let mut states: Vec<RescaleState> = scales.iter().map(|_| RescaleState::new(0.9, 2.0).unwrap()).collect();
    let mut err = 0.0f64;
    let mut iterations = 0;
    let mut epoch = 0;
    while iterations < 100 {
        for batch in data::batches(&ds, 16, data::epoch_seed(5, epoch)).map_err(|e| e.to_string())? {
            if iterations == 100 {
                break;
            }
            let (_, mut tape) = run_forward(&net, &batch).unwrap();
            let grad = run_backward(&net, &mut tape).unwrap();
            let g = grad.axpy(LAMBDA, net.params()).unwrap();
            let d = precond.direction(DirectionMode::RmsProp, &g).unwrap();
            let mut updates = Vec::new();
            for (s, state) in scales.iter().zip(states.iter_mut()) {
                let sd = d.scale(*s);
                let cur = tangent_curvature(&net, &tape, &sd).unwrap();
                let out = state
                    .step(cur.per_sample_qform.data(), g.inner(&sd).unwrap(), sd.norm_sq(), LAMBDA)
                    .unwrap()
                    .expect("non-zero gradient");
                updates.push(sd.scale(ELL * out.r_k).flatten());
            }
            for u in &updates {
                err = err.max(rel_vec(u, &updates[1]));
            }
            let next = net
                .params()
                .axpy(-1.0, &net.params().with_flat(&updates[1]).unwrap())
                .unwrap();
            net.set_params(next).unwrap();
            iterations += 1;
        }
        epoch += 1;
    }
    let detail =
        format!("{iterations} RMSProp iterations, s in {{0.01, 1, 100}}, worst update rel err {err:.2e} (tol 1e-12)");
    ensure(err <= 1e-12, || detail.clone())?;
    Ok(detail)
}

fn blobs_config(epochs: usize) -> RunConfig {
    RunConfig {
        seed: 7,
        dataset: DatasetConfig::Blobs {
            classes: 2,
            per_class: 1000,
            dim: 2,
            center_scale: 3.0,
            test_per_class: 100,
            seed: None,
        },
        network: vec![
            LayerConfig::Dense { outputs: 16 },
            LayerConfig::Tanh,
            LayerConfig::Dense { outputs: 2 },
        ],
        epochs,
        ..RunConfig::default()
    }
}

fn rescale_micro_anchors() -> Outcome {
    let c = batch_curvature(&[4.0, -2.0], 2.0, 0.0).map_err(|e| e.to_string())?;
    ensure(c == 1.5, || format!("abs-inside-mean example gave {c}"))?;
    for c1 in [0.37, 2.0, 1e-6, 123.456] {
        let mut s = RescaleState::new(0.9, 2.0).unwrap();
        let (c_tilde, _) = s.update_estimate(c1);
        ensure(c_tilde == c1, || format!("first estimate {c_tilde} != {c1}"))?;
    }
    let config = blobs_config(2);
    let splits = load_splits(&config).map_err(|e| e.to_string())?;
    let outcome = train(&config, &splits).map_err(|e| e.to_string())?;
    let rows: Vec<_> = outcome.rows.iter().filter(|r| r.kind == RowKind::Iteration).collect();
    let first = rows.first().ok_or("no iteration rows")?;
    ensure(first.c_tilde == first.c_k, || {
        format!("logged c_tilde_1 {:?} != c_1 {:?}", first.c_tilde, first.c_k)
    })?;
    for r in &rows {
        let (ct, ck, lt) = (r.c_tilde.unwrap(), r.c_k.unwrap(), r.l_tilde.unwrap());
        ensure(lt == ct.max(ck), || {
            format!("iteration {}: l_tilde {lt} != max({ct}, {ck})", r.iteration)
        })?;
    }
    Ok(format!(
        "c = 1.5, c_tilde_1 = c_1, l_tilde = max(c_tilde, c) on all {} logged iterations",
        rows.len()
    ))
}

fn schedules() -> Outcome {
    for (ell0, eta, n) in [(1.0, 0.5, 10), (0.1, 0.25, 7), (2.0, 0.9, 200)] {
        let kind = ScheduleKind::Red { ell0, eta, epochs: n };
        let end = schedule_value(&kind, n);
        ensure(end == eta * ell0, || format!("red({ell0}, {eta}, {n}) ends at {end}"))?;
        for e in 0..2 * n {
            let (a, b) = (schedule_value(&kind, e), schedule_value(&kind, e + 1));
            ensure(b < a, || {
                format!("red({ell0}, {eta}, {n}) not decreasing at epoch {e}: {a} -> {b}")
            })?;
        }
    }
    let config = RunConfig {
        schedule: "annealing".parse::<ScheduleConfig>()?,
        ..RunConfig::default()
    };
    let spec = config.schedule_spec().map_err(|e| e.to_string())?;
    for e in 0..100 {
        let hyper = e % 20 >= 18;
        let ell = spec.value(e);
        ensure((ell == 2.0) == hyper, || format!("annealing epoch {e} gives {ell}"))?;
    }
    Ok("red ends exactly at eta*ell0 and decreases strictly; annealing gives 2 exactly on epochs 18, 19 mod 20".into())
}

fn write_surrogate_mnist(dir: &Path, n: usize, seed: u64) -> (std::path::PathBuf, std::path::PathBuf) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prototypes: Vec<Vec<f64>> = (0..10)
        .map(|_| {
            let (cy, cx) = (rng.random_range(6.0..22.0), rng.random_range(6.0..22.0));
            let (sy, sx) = (rng.random_range(2.0..6.0), rng.random_range(2.0..6.0));
            (0..28 * 28)
                .map(|p| {
                    let (y, x) = ((p / 28) as f64, (p % 28) as f64);
                    let r = ((y - cy) / sy).powi(2) + ((x - cx) / sx).powi(2);
                    220.0 * (-0.5 * r).exp()
                })
                .collect()
        })
        .collect();
    let mut pixels = Vec::with_capacity(n * 784);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.random_range(0..10u8);
        labels.push(label);
        for &v in &prototypes[label as usize] {
            let noisy: f64 = v + rng.random_range(-40.0..40.0);
            pixels.push(noisy.clamp(0.0, 255.0) as u8);
        }
    }
    let images = dir.join("train-images-idx3-ubyte");
    let label_path = dir.join("train-labels-idx1-ubyte");
    std::fs::write(&images, encode_idx(IDX_IMAGES_MAGIC, &[n, 28, 28], &pixels)).unwrap();
    std::fs::write(&label_path, encode_idx(IDX_LABELS_MAGIC, &[n], &labels)).unwrap();
    (images, label_path)
}

fn desk_training() -> Outcome {
    let start = Instant::now();
    let config = blobs_config(5);
    let splits = load_splits(&config).map_err(|e| e.to_string())?;
    let s = train(&config, &splits).map_err(|e| e.to_string())?.summary;
    let blobs_secs = start.elapsed().as_secs_f64();
    ensure(s.final_train_loss < 0.5 * s.initial_train_loss, || {
        format!("blobs loss {} -> {}", s.initial_train_loss, s.final_train_loss)
    })?;
    ensure(s.q_n.iter().all(|&q| q == 1.0), || format!("q_n {:?}", s.q_n))?;
    ensure(blobs_secs < 30.0, || format!("blobs run took {blobs_secs:.1}s"))?;

    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let (images, labels, source) = match std::env::var_os("MNIST_DIR") {
        Some(dir) => {
            let dir = Path::new(&dir);
            (
                dir.join("train-images-idx3-ubyte"),
                dir.join("train-labels-idx1-ubyte"),
                "MNIST",
            )
        }
        None => {
            let (i, l) = write_surrogate_mnist(tmp.path(), 6000, 11);
            (i, l, "synthetic 28x28 IDX surrogate")
        }
    };
    let mnist = RunConfig {
        seed: 1,
        dataset: DatasetConfig::Idx {
            train_images: images,
            train_labels: labels,
            test_images: None,
            test_labels: None,
            limit: Some(6000),
            test_limit: None,
        },
        network: vec![
            LayerConfig::Dense { outputs: 64 },
            LayerConfig::Tanh,
            LayerConfig::Dense { outputs: 10 },
        ],
        epochs: 2,
        ..RunConfig::default()
    };
    let splits = load_splits(&mnist).map_err(|e| e.to_string())?;
    let outcome = train(&mnist, &splits).map_err(|e| e.to_string())?;
    let mnist_secs = start.elapsed().as_secs_f64();
    let losses: Vec<f64> = outcome
        .rows
        .iter()
        .filter(|r| r.kind == RowKind::Iteration)
        .map(|r| r.train_loss)
        .collect();
    let ema = ema_report(&losses, 0.99).map_err(|e| e.to_string())?;
    if let Some(k) = ema.windows(2).position(|w| w[1] > w[0]) {
        return Err(format!("{source}: smoothed loss rises at iteration {}", k + 1));
    }
    ensure(mnist_secs < 300.0, || format!("{source} run took {mnist_secs:.1}s"))?;
    Ok(format!(
        "blobs {:.4} -> {:.4} with q_n = 1 in {blobs_secs:.1}s; {source} ({} samples) smoothed loss {:.4} -> {:.4} monotone in {mnist_secs:.1}s",
        s.initial_train_loss,
        s.final_train_loss,
        splits.train.len(),
        ema[0],
        ema[ema.len() - 1]
    ))
}

fn pathology_config(seed: u64, batch_size: usize, memory: bool) -> RunConfig {
    RunConfig {
        seed,
        dataset: DatasetConfig::Blobs {
            classes: 64,
            per_class: 4,
            dim: 16,
            center_scale: 1.5,
            test_per_class: 0,
            seed: None,
        },
        network: vec![
            LayerConfig::Dense { outputs: 32 },
            LayerConfig::Tanh,
            LayerConfig::Dense { outputs: 64 },
        ],
        epochs: 100,
        batch_size,
        memory: memory.then_some(MemoryConfig {
            capacity: 256,
            feature_layers: 2,
        }),
        ..RunConfig::default()
    }
}

fn pathology() -> Outcome {
    let mut lines = Vec::new();
    for seed in 0..3 {
        let final_loss = |bs, memory| -> Result<f64, String> {
            let config = pathology_config(seed, bs, memory);
            let splits = load_splits(&config).map_err(|e| e.to_string())?;
            Ok(train(&config, &splits)
                .map_err(|e| e.to_string())?
                .summary
                .final_train_loss)
        };
        let (large, small, mem) = (final_loss(256, false)?, final_loss(16, false)?, final_loss(16, true)?);
        let line = format!("seed {seed}: bs256 {large:.3e}, bs16 {small:.3e}, bs16+memory {mem:.3e}");
        ensure(small > large, || format!("{line}: small batches are not worse"))?;
        ensure(mem <= small - 0.5 * (small - large), || {
            format!("{line}: memory recovers less than half the gap")
        })?;
        lines.push(line);
    }
    Ok(lines.join("; "))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 12] = [
        ("gradient oracle", gradient_oracle),
        ("curvature oracle", curvature_oracle),
        ("hvp consistency", hvp_consistency),
        ("duality", duality),
        ("checkpoint accounting", checkpoint_accounting),
        ("newton map", newton_map),
        ("stochastic mean", stochastic_mean),
        ("scale invariance", scale_invariance),
        ("rescale micro-anchors", rescale_micro_anchors),
        ("schedules", schedules),
        ("desk-scale training", desk_training),
        ("small-batch pathology", pathology),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {:2} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:2} {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("{} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
