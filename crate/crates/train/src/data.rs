//! Datasets, seeded mini-batching and the feature memory.

use std::collections::VecDeque;
use std::ops::Range;
use std::path::Path;

use curvature_core::{BatchView, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Result, TrainError};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Inputs `[N, ...]` with targets `[N]` (class ids) or `[N, ...]` (regression).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    targets: Tensor,
    class_count: Option<usize>,
}

impl Dataset {
    pub fn new(inputs: Tensor, targets: Tensor, class_count: Option<usize>) -> Result<Self> {
        if inputs.shape().is_empty() || targets.shape().is_empty() {
            return Err(TrainError::Config("dataset tensors need a sample axis".into()));
        }
        if inputs.sample_count() != targets.sample_count() {
            return Err(TrainError::Config(format!(
                "{} inputs but {} targets",
                inputs.sample_count(),
                targets.sample_count()
            )));
        }
        if let Some(c) = class_count {
            if targets.shape().len() != 1 {
                return Err(TrainError::Config("class targets must be one id per sample".into()));
            }
            if let Some(bad) = targets
                .data()
                .iter()
                .find(|&&t| !(t >= 0.0 && t < c as f64 && t.fract() == 0.0))
            {
                return Err(TrainError::Config(format!("class id {bad} outside 0..{c}")));
            }
        }
        Ok(Self {
            inputs,
            targets,
            class_count,
        })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn targets(&self) -> &Tensor {
        &self.targets
    }

    pub fn class_count(&self) -> Option<usize> {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.inputs.sample_count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(rows),
            targets: self.targets.select_rows(rows),
            class_count: self.class_count,
        }
    }

    /// The first `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Dataset {
        let rows: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&rows)
    }

    /// A seeded shuffle followed by a cut: `test_count` samples go to the
    /// second part.
    pub fn split(&self, test_count: usize, seed: u64) -> (Dataset, Dataset) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = self.len() - test_count.min(self.len());
        (self.select(&order[..cut]), self.select(&order[cut..]))
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Decoded IDX payload: dimensions and raw unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Idx {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parse an unsigned-byte IDX file whose magic must equal `magic`.
pub fn parse_idx(bytes: &[u8], magic: u32) -> std::result::Result<Idx, String> {
    let found = be_u32(bytes, 0).ok_or("file shorter than its magic number")?;
    if found != magic {
        return Err(format!("bad magic 0x{found:08x}, expected 0x{magic:08x}"));
    }
    let rank = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let d = be_u32(bytes, 4 + 4 * i).ok_or("truncated header")?;
        dims.push(d as usize);
    }
    let header = 4 + 4 * rank;
    let len: usize = dims.iter().product();
    let body = &bytes[header.min(bytes.len())..];
    if body.len() < len {
        return Err(format!("truncated: {len} data bytes declared, {} present", body.len()));
    }
    Ok(Idx {
        dims,
        data: body[..len].to_vec(),
    })
}

/// Encode unsigned bytes as IDX with the rank taken from `magic`.
pub fn encode_idx(magic: u32, dims: &[usize], data: &[u8]) -> Vec<u8> {
    debug_assert_eq!(dims.len(), (magic & 0xff) as usize);
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + data.len());
    out.extend_from_slice(&magic.to_be_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| TrainError::io(path, e))
}

/// Load an IDX image file and its label file. Pixels are scaled to `[0, 1]`
/// and the inputs have shape `[N, 1, rows, cols]`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = parse_idx(&read(ip)?, IDX_IMAGES_MAGIC).map_err(|r| TrainError::format(ip, r))?;
    let labels = parse_idx(&read(lp)?, IDX_LABELS_MAGIC).map_err(|r| TrainError::format(lp, r))?;
    if images.dims[0] != labels.dims[0] {
        return Err(TrainError::format(
            lp,
            format!("{} labels for {} images", labels.dims[0], images.dims[0]),
        ));
    }
    let (n, rows, cols) = (images.dims[0], images.dims[1], images.dims[2]);
    let pixels = images.data.iter().map(|&p| f64::from(p) / 255.0).collect();
    let inputs = Tensor::new(vec![n, 1, rows, cols], pixels)?;
    let classes = labels.data.iter().copied().max().map_or(0, |m| m as usize + 1);
    let targets = Tensor::from_vec(labels.data.iter().map(|&l| f64::from(l)).collect());
    Dataset::new(inputs, targets, Some(classes))
}

/// Gaussian clusters with unit spread around centers drawn with standard
/// deviation `center_scale`. Samples are stored class by class.
pub fn synthetic_blobs_with(
    classes: usize,
    per_class: usize,
    dim: usize,
    center_scale: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes == 0 || per_class == 0 || dim == 0 {
        return Err(TrainError::Config("blob sizes must be positive".into()));
    }
    let spread = Normal::new(0.0, center_scale).map_err(|e| TrainError::Config(format!("center scale: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<f64> = (0..classes * dim).map(|_| spread.sample(&mut rng)).collect();
    let mut inputs = Vec::with_capacity(classes * per_class * dim);
    let mut targets = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let center = &centers[c * dim..(c + 1) * dim];
        for _ in 0..per_class {
            inputs.extend(center.iter().map(|m| {
                let z: f64 = StandardNormal.sample(&mut rng);
                m + z
            }));
            targets.push(c as f64);
        }
    }
    Dataset::new(
        Tensor::new(vec![classes * per_class, dim], inputs)?,
        Tensor::from_vec(targets),
        Some(classes),
    )
}

pub fn synthetic_blobs(classes: usize, per_class: usize, dim: usize, seed: u64) -> Result<Dataset> {
    synthetic_blobs_with(classes, per_class, dim, 3.0, seed)
}

/// Seed of one epoch's shuffle.
pub fn epoch_seed(run_seed: u64, epoch: usize) -> u64 {
    let mut z = run_seed ^ (epoch as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Shuffle with `epoch_seed` and cut into consecutive batches; the last one
/// may be short.
pub fn batches(ds: &Dataset, batch_size: usize, epoch_seed: u64) -> Result<Vec<BatchView>> {
    if batch_size == 0 {
        return Err(TrainError::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    order
        .chunks(batch_size)
        .map(|rows| BatchView::new(ds.inputs.select_rows(rows), ds.targets.select_rows(rows)).map_err(TrainError::from))
        .collect()
}

/// Consecutive batches in storage order, for evaluation.
pub fn sequential_batches(ds: &Dataset, batch_size: usize) -> Result<Vec<BatchView>> {
    if batch_size == 0 {
        return Err(TrainError::Config("batch size must be at least 1".into()));
    }
    let rows: Vec<usize> = (0..ds.len()).collect();
    rows.chunks(batch_size)
        .map(|r| BatchView::new(ds.inputs.select_rows(r), ds.targets.select_rows(r)).map_err(TrainError::from))
        .collect()
}

/// FIFO store of the most recent feature vectors and their targets.
#[derive(Debug, Clone)]
pub struct FeatureMemory {
    capacity: usize,
    entries: VecDeque<(Vec<f64>, Vec<f64>)>,
    shapes: Option<(Vec<usize>, Vec<usize>)>,
}

/// A downstream batch: replayed entries first, the fresh samples last.
#[derive(Debug, Clone, PartialEq)]
pub struct Assembled {
    pub features: Tensor,
    pub targets: Tensor,
    pub fresh: Range<usize>,
}

impl Default for FeatureMemory {
    fn default() -> Self {
        Self::new(256)
    }
}

impl FeatureMemory {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
            shapes: None,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Stored targets, oldest first.
    pub fn targets(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.iter().map(|(_, t)| t.as_slice())
    }

    /// Push the fresh batch and return every surviving older entry followed
    /// by the whole fresh batch. Only `fresh` rows depend on the current
    /// feature extractor.
    pub fn push_assemble(&mut self, features: &Tensor, targets: &Tensor) -> Result<Assembled> {
        let b = features.sample_count();
        if targets.sample_count() != b {
            return Err(TrainError::Config("feature and target counts differ".into()));
        }
        let shapes = (features.shape()[1..].to_vec(), targets.shape()[1..].to_vec());
        match &self.shapes {
            Some(s) if *s != shapes => {
                return Err(TrainError::Config("feature shape changed between pushes".into()));
            }
            _ => self.shapes = Some(shapes.clone()),
        }
        let fresh: Vec<(Vec<f64>, Vec<f64>)> = (0..b)
            .map(|i| (features.row(i).to_vec(), targets.row(i).to_vec()))
            .collect();
        let keep_old = self.capacity.saturating_sub(b).min(self.entries.len());
        let drop = self.entries.len() - keep_old;
        self.entries.drain(..drop);
        let old = self.entries.len();

        let mut feat = Vec::with_capacity((old + b) * features.sample_len());
        let mut targ = Vec::with_capacity((old + b) * targets.sample_len());
        for (f, t) in self.entries.iter().chain(fresh.iter()) {
            feat.extend_from_slice(f);
            targ.extend_from_slice(t);
        }
        let skip = b.saturating_sub(self.capacity);
        self.entries.extend(fresh.into_iter().skip(skip));

        let mut fshape = vec![old + b];
        fshape.extend_from_slice(&shapes.0);
        let mut tshape = vec![old + b];
        tshape.extend_from_slice(&shapes.1);
        Ok(Assembled {
            features: Tensor::new(fshape, feat)?,
            targets: Tensor::new(tshape, targ)?,
            fresh: old..old + b,
        })
    }
}
