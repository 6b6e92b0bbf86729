//! Run configuration: a single JSON document, every field optional.
//!
//! Precedence is command-line flags, then the file, then the defaults below.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use curvature_core::engine::{Executor, Network};
use curvature_core::layers::{Activation, ConvGeometry, Layer, StatsAxis};
use curvature_core::optim::{DirectionMode, Precond, RobbinsMonro, ScheduleKind, ScheduleSpec};
use curvature_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrainError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    /// Layers in front of the loss.
    pub network: Vec<LayerConfig>,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    /// Preconditioner inside the momentum direction.
    pub precond: PrecondConfig,
    pub schedule: ScheduleConfig,
    pub robbins_monro: Option<RobbinsMonroConfig>,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub eps: f64,
    pub lambda: f64,
    pub denom_const: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub executor: ExecutorConfig,
    /// Checkpoint split for the checkpointed executor; balanced when absent.
    pub split: Option<usize>,
    pub memory: Option<MemoryConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetConfig::default(),
            network: vec![LayerConfig::Dense { outputs: 16 }, LayerConfig::Tanh],
            loss: LossConfig::CrossEntropy,
            optimizer: OptimizerConfig::Sgd,
            precond: PrecondConfig::Identity,
            schedule: ScheduleConfig::default(),
            robbins_monro: None,
            beta1: 0.9,
            beta2: 0.999,
            beta3: 0.9,
            eps: 1e-8,
            lambda: 1e-7,
            denom_const: 2.0,
            epochs: 5,
            batch_size: 256,
            executor: ExecutorConfig::Plain,
            split: None,
            memory: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Blobs {
        classes: usize,
        per_class: usize,
        dim: usize,
        #[serde(default = "default_center_scale")]
        center_scale: f64,
        /// Extra samples per class held out for testing.
        #[serde(default)]
        test_per_class: usize,
        /// Defaults to the run seed.
        #[serde(default)]
        seed: Option<u64>,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
        /// Keep only the first `limit` training samples.
        #[serde(default)]
        limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
}

fn default_center_scale() -> f64 {
    3.0
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Blobs {
            classes: 2,
            per_class: 200,
            dim: 2,
            center_scale: default_center_scale(),
            test_per_class: 50,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerConfig {
    Dense {
        outputs: usize,
    },
    Conv2d {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
    },
    Tanh,
    Softplus {
        beta: f64,
    },
    Elu,
    Bias,
    Scale,
    /// Centering plus normalizing, optionally followed by scale and bias.
    Norm {
        #[serde(default = "batch_axis")]
        axis: AxisConfig,
        #[serde(default = "default_norm_eps")]
        eps: f64,
        #[serde(default = "yes")]
        affine: bool,
    },
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn batch_axis() -> AxisConfig {
    AxisConfig::Batch
}

fn default_norm_eps() -> f64 {
    1e-5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisConfig {
    Batch,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossConfig {
    CrossEntropy,
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd,
    Rmsprop,
    Momentum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecondConfig {
    Identity,
    Rmsprop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutorConfig {
    Plain,
    Checkpointed,
}

impl FromStr for ExecutorConfig {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "plain" => Ok(Self::Plain),
            "checkpointed" => Ok(Self::Checkpointed),
            _ => Err(format!("unknown executor `{s}` (plain | checkpointed)")),
        }
    }
}

/// `ell0` falls back to 1, or to `1 - beta1` for momentum; `epochs` falls
/// back to the run length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleConfig {
    Red {
        #[serde(default)]
        ell0: Option<f64>,
        #[serde(default = "half")]
        eta: f64,
        #[serde(default)]
        epochs: Option<usize>,
    },
    Annealing {
        #[serde(default)]
        pattern: Option<Vec<(f64, usize)>>,
    },
    Cosine {
        #[serde(default)]
        ell0: Option<f64>,
        ell_min: f64,
        #[serde(default)]
        epochs: Option<usize>,
    },
    Constant {
        ell: f64,
    },
}

fn half() -> f64 {
    0.5
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig::Red {
            ell0: None,
            eta: half(),
            epochs: None,
        }
    }
}

/// Accepts `red`, `red:<eta>`, `annealing`, `cosine:<ell_min>` and
/// `constant:<ell>`.
impl FromStr for ScheduleConfig {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let number = |what: &str| -> std::result::Result<f64, String> {
            let a = arg.ok_or_else(|| format!("schedule `{name}` needs `{name}:<{what}>`"))?;
            a.parse::<f64>()
                .map_err(|_| format!("bad {what} `{a}` in schedule `{s}`"))
        };
        match name {
            "red" => Ok(ScheduleConfig::Red {
                ell0: None,
                eta: if arg.is_some() { number("eta")? } else { half() },
                epochs: None,
            }),
            "annealing" if arg.is_none() => Ok(ScheduleConfig::Annealing { pattern: None }),
            "cosine" => Ok(ScheduleConfig::Cosine {
                ell0: None,
                ell_min: number("ell_min")?,
                epochs: None,
            }),
            "constant" => Ok(ScheduleConfig::Constant { ell: number("ell")? }),
            _ => Err(format!(
                "unknown schedule `{s}` (red[:eta] | annealing | cosine:<ell_min> | constant:<ell>)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobbinsMonroConfig {
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryConfig {
    #[serde(default = "default_capacity")]
    pub capacity: usize,
    /// Number of layers in the feature extractor; the memory sits between
    /// them and the rest of the network.
    pub feature_layers: usize,
}

fn default_capacity() -> usize {
    256
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| TrainError::format(path, e.to_string()))
    }

    pub fn direction_mode(&self) -> DirectionMode {
        match self.optimizer {
            OptimizerConfig::Sgd => DirectionMode::Sgd,
            OptimizerConfig::Rmsprop => DirectionMode::RmsProp,
            OptimizerConfig::Momentum => DirectionMode::Momentum(match self.precond {
                PrecondConfig::Identity => Precond::Identity,
                PrecondConfig::Rmsprop => Precond::RmsProp,
            }),
        }
    }

    /// Momentum steps use `|r_k|`.
    pub fn abs_rule(&self) -> bool {
        self.optimizer == OptimizerConfig::Momentum
    }

    fn default_ell0(&self) -> f64 {
        if self.optimizer == OptimizerConfig::Momentum {
            1.0 - self.beta1
        } else {
            1.0
        }
    }

    pub fn schedule_spec(&self) -> Result<ScheduleSpec> {
        let n = self.epochs.max(1);
        let kind = match &self.schedule {
            ScheduleConfig::Red { ell0, eta, epochs } => ScheduleKind::Red {
                ell0: ell0.unwrap_or_else(|| self.default_ell0()),
                eta: *eta,
                epochs: epochs.unwrap_or(n),
            },
            ScheduleConfig::Annealing { pattern } => match pattern {
                Some(p) => ScheduleKind::Annealing { pattern: p.clone() },
                None => ScheduleKind::default_annealing(),
            },
            ScheduleConfig::Cosine { ell0, ell_min, epochs } => ScheduleKind::Cosine {
                ell0: ell0.unwrap_or_else(|| self.default_ell0()),
                ell_min: *ell_min,
                epochs: epochs.unwrap_or(n),
            },
            ScheduleConfig::Constant { ell } => ScheduleKind::Constant { ell: *ell },
        };
        let mut spec = ScheduleSpec::new(kind)?;
        if let Some(rm) = self.robbins_monro {
            spec = spec.with_robbins_monro(RobbinsMonro {
                alpha: rm.alpha,
                beta: rm.beta,
                delta: rm.delta,
            })?;
        }
        Ok(spec)
    }

    pub fn executor(&self) -> Executor {
        match self.executor {
            ExecutorConfig::Plain => Executor::Plain,
            ExecutorConfig::Checkpointed => Executor::Checkpointed(self.split),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        curvature_core::optim::PrecondState::new(self.beta1, self.beta2, self.eps)?;
        curvature_core::rescale::RescaleState::new(self.beta3, self.denom_const)?;
        self.schedule_spec()?;
        if let Some(m) = self.memory {
            if m.capacity == 0 {
                return bad("memory capacity must be positive".into());
            }
        }
        Ok(())
    }

    /// Resolve relative dataset paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        if let DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            ..
        } = &mut self.dataset
        {
            for p in [
                Some(train_images),
                Some(train_labels),
                test_images.as_mut(),
                test_labels.as_mut(),
            ]
            .into_iter()
            .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }
}

fn axis(a: AxisConfig) -> StatsAxis {
    match a {
        AxisConfig::Batch => StatsAxis::Batch,
        AxisConfig::Sample => StatsAxis::Sample,
    }
}

/// Expand layer descriptions into layers, tracking the per-sample shape from
/// `input_shape`, and append the loss.
pub fn build_layers(input_shape: &[usize], network: &[LayerConfig], loss: LossConfig) -> Result<Vec<Layer>> {
    let mut shape = input_shape.to_vec();
    let mut layers = Vec::new();
    for spec in network {
        let len: usize = shape.iter().product();
        match *spec {
            LayerConfig::Dense { outputs } => layers.push(Layer::dense(len, outputs)),
            LayerConfig::Conv2d {
                out_channels,
                kernel,
                stride,
            } => {
                let (c, h, w) = match shape.as_slice() {
                    [c, h, w] => (*c, *h, *w),
                    [h, w] => (1, *h, *w),
                    _ => {
                        return Err(TrainError::Config(format!(
                            "conv2d needs a [channels, height, width] input, got {shape:?}"
                        )))
                    }
                };
                layers.push(Layer::conv2d(ConvGeometry {
                    in_channels: c,
                    out_channels,
                    height: h,
                    width: w,
                    kernel_h: kernel,
                    kernel_w: kernel,
                    stride,
                })?);
            }
            LayerConfig::Tanh => layers.push(Layer::activation(Activation::Tanh, &shape)?),
            LayerConfig::Softplus { beta } => layers.push(Layer::activation(Activation::SoftPlus { beta }, &shape)?),
            LayerConfig::Elu => layers.push(Layer::activation(Activation::Elu, &shape)?),
            LayerConfig::Bias => layers.push(Layer::bias(&shape)?),
            LayerConfig::Scale => layers.push(Layer::scale(&shape)?),
            LayerConfig::Norm { axis: a, eps, affine } => {
                layers.push(Layer::centering(&shape, axis(a))?);
                layers.push(Layer::normalizing(&shape, axis(a), eps)?);
                if affine {
                    layers.push(Layer::scale(&shape)?);
                    layers.push(Layer::bias(&shape)?);
                }
            }
        }
        shape = layers.last().expect("a layer was pushed").out_shape().to_vec();
    }
    let len: usize = shape.iter().product();
    layers.push(match loss {
        LossConfig::CrossEntropy => Layer::cross_entropy(len),
        LossConfig::Mse => Layer::mse(&shape),
    });
    Ok(layers)
}

/// Gaussian weights with variance `1 / fan_in`, unit scales, zero biases.
pub fn init_network(layers: Vec<Layer>, seed: u64) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Network::from_fn(layers, |_, layer, shape| {
        let n: usize = shape.iter().product();
        let data = match layer.kind() {
            curvature_core::layers::LayerKind::Scale { .. } => vec![1.0; n],
            curvature_core::layers::LayerKind::Bias { .. } => vec![0.0; n],
            _ => {
                let fan_in: usize = shape[1..].iter().product();
                let sd = 1.0 / (fan_in as f64).sqrt();
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        sd * z
                    })
                    .collect()
            }
        };
        Tensor::new(shape.to_vec(), data).expect("length matches shape")
    })?;
    Ok(net)
}
