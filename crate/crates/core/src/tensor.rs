//! Dense row-major containers and the parameter-vector algebra.
//!
//! All reductions run sequentially over the flat index, so two evaluations
//! that perform the same operations produce bit-identical results.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Dense `f64` tensor in row-major order. The leading axis is the sample
/// axis whenever the tensor carries batch data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("tensor data", &[expected], &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    /// One-dimensional tensor.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extent of the leading (sample) axis; `1` for a rank-0 tensor.
    pub fn sample_count(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of entries per sample.
    pub fn sample_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, sample: usize) -> &[f64] {
        let w = self.sample_len();
        &self.data[sample * w..(sample + 1) * w]
    }

    pub fn row_mut(&mut self, sample: usize) -> &mut [f64] {
        let w = self.sample_len();
        &mut self.data[sample * w..(sample + 1) * w]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub(crate) fn expect_shape(&self, context: &'static str, shape: &[usize]) -> Result<()> {
        if self.shape.as_slice() != shape {
            return Err(Error::shape(context, shape, &self.shape));
        }
        Ok(())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", &[self.data.len()], &[n]));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if !self.same_shape(other) {
            return Err(Error::shape("elementwise", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Flat dot product.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(Error::shape("dot", &self.shape, &other.shape));
        }
        Ok(dot(&self.data, &other.data))
    }

    /// Per-sample dot products along the leading axis.
    pub fn row_dots(&self, other: &Tensor) -> Result<Vec<f64>> {
        if !self.same_shape(other) {
            return Err(Error::shape("row dot", &self.shape, &other.shape));
        }
        Ok((0..self.sample_count())
            .map(|b| dot(self.row(b), other.row(b)))
            .collect())
    }

    /// Select rows along the sample axis.
    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        let w = self.sample_len();
        let mut data = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        let mut shape = self.shape.clone();
        if let Some(first) = shape.first_mut() {
            *first = rows.len();
        }
        Tensor { shape, data }
    }

    /// Stack tensors along the sample axis. All inputs must agree on the
    /// trailing shape.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows needs at least one part"))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::shape("concat rows", tail, &p.shape[1..]));
            }
            rows += p.sample_count();
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Tensor { shape, data })
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Parameters (or a direction, gradient, Hvp) of a whole network: one
/// segment per parameterized layer, tagged with the owning layer index.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVec {
    segments: Vec<(usize, Tensor)>,
}

impl ParamVec {
    pub fn new(segments: Vec<(usize, Tensor)>) -> Self {
        Self { segments }
    }

    pub fn segments(&self) -> &[(usize, Tensor)] {
        &self.segments
    }

    pub fn segments_mut(&mut self) -> &mut [(usize, Tensor)] {
        &mut self.segments
    }

    pub fn get(&self, layer: usize) -> Option<&Tensor> {
        self.segments.iter().find(|(id, _)| *id == layer).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, layer: usize) -> Option<&mut Tensor> {
        self.segments.iter_mut().find(|(id, _)| *id == layer).map(|(_, t)| t)
    }

    /// Total number of scalar entries.
    pub fn len(&self) -> usize {
        self.segments.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zeros_like(&self) -> ParamVec {
        ParamVec {
            segments: self
                .segments
                .iter()
                .map(|(id, t)| (*id, Tensor::zeros(t.shape.clone())))
                .collect(),
        }
    }

    pub fn check_compatible(&self, other: &ParamVec) -> Result<()> {
        if self.segments.len() != other.segments.len() {
            return Err(Error::shape(
                "param segments",
                &[self.segments.len()],
                &[other.segments.len()],
            ));
        }
        for ((ia, a), (ib, b)) in self.segments.iter().zip(&other.segments) {
            if ia != ib {
                return Err(Error::contract("param segments belong to different layers"));
            }
            if a.shape != b.shape {
                return Err(Error::shape("param segment", &a.shape, &b.shape));
            }
        }
        Ok(())
    }

    /// Sum over all segments of elementwise products.
    pub fn inner(&self, other: &ParamVec) -> Result<f64> {
        self.check_compatible(other)?;
        let mut acc = 0.0;
        for ((_, a), (_, b)) in self.segments.iter().zip(&other.segments) {
            for (x, y) in a.data.iter().zip(&b.data) {
                acc += x * y;
            }
        }
        Ok(acc)
    }

    /// Same summation order as `inner(self, self)`.
    pub fn norm_sq(&self) -> f64 {
        let mut acc = 0.0;
        for (_, a) in &self.segments {
            for x in &a.data {
                acc += x * x;
            }
        }
        acc
    }

    pub fn scale(&self, alpha: f64) -> ParamVec {
        self.map(|v| alpha * v)
    }

    /// `y + alpha * x` as a fresh value (`self` is `y`).
    pub fn axpy(&self, alpha: f64, x: &ParamVec) -> Result<ParamVec> {
        self.zip_map(x, |y, x| y + alpha * x)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ParamVec {
        ParamVec {
            segments: self.segments.iter().map(|(id, t)| (*id, t.map(&f))).collect(),
        }
    }

    pub fn zip_map(&self, other: &ParamVec, f: impl Fn(f64, f64) -> f64) -> Result<ParamVec> {
        self.check_compatible(other)?;
        let segments = self
            .segments
            .iter()
            .zip(&other.segments)
            .map(|((id, a), (_, b))| {
                let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
                (
                    *id,
                    Tensor {
                        shape: a.shape.clone(),
                        data,
                    },
                )
            })
            .collect();
        Ok(ParamVec { segments })
    }

    /// All entries in segment order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for (_, t) in &self.segments {
            out.extend_from_slice(&t.data);
        }
        out
    }

    /// Inverse of [`ParamVec::flatten`] using `self` as the layout.
    pub fn with_flat(&self, flat: &[f64]) -> Result<ParamVec> {
        if flat.len() != self.len() {
            return Err(Error::shape("flat params", &[self.len()], &[flat.len()]));
        }
        let mut offset = 0;
        let segments = self
            .segments
            .iter()
            .map(|(id, t)| {
                let n = t.len();
                let seg = Tensor {
                    shape: t.shape.clone(),
                    data: flat[offset..offset + n].to_vec(),
                };
                offset += n;
                (*id, seg)
            })
            .collect();
        Ok(ParamVec { segments })
    }

    pub fn is_finite(&self) -> bool {
        self.segments.iter().all(|(_, t)| t.is_finite())
    }
}

/// A mini-batch: inputs and targets share the leading sample axis.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchView {
    pub inputs: Tensor,
    pub targets: Tensor,
}

impl BatchView {
    pub fn new(inputs: Tensor, targets: Tensor) -> Result<Self> {
        if inputs.shape().is_empty() || targets.shape().is_empty() {
            return Err(Error::contract("batch tensors need a leading sample axis"));
        }
        if inputs.sample_count() != targets.sample_count() {
            return Err(Error::shape(
                "batch targets",
                &[inputs.sample_count()],
                &[targets.sample_count()],
            ));
        }
        if inputs.sample_count() == 0 {
            return Err(Error::contract("batch must contain at least one sample"));
        }
        Ok(Self { inputs, targets })
    }

    pub fn sample_count(&self) -> usize {
        self.inputs.sample_count()
    }
}
