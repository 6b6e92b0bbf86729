//! Layers of the form `y[i] = sum_{j,k} theta[k] x[j] 1_{ijk}`.
//!
//! Every such map is bilinear in `(theta, x)`, so the forward map, both
//! adjoints, the tangent and the second-order terms are all expressed
//! through three kernels: `apply`, its transpose in `x` and its transpose
//! in `theta`.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Tensor;

/// Geometry of a 2-D convolution without padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width - self.kernel_w) / self.stride + 1
    }

    pub fn param_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Assignment {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv(ConvGeometry),
    /// Diagonal linear map: one weight per channel, channels are contiguous
    /// blocks of `features / channels` entries.
    Scale {
        features: usize,
        channels: usize,
    },
}

impl Assignment {
    fn in_len(&self) -> usize {
        match *self {
            Assignment::Dense { inputs, .. } => inputs,
            Assignment::Conv(g) => g.in_channels * g.height * g.width,
            Assignment::Scale { features, .. } => features,
        }
    }

    fn out_len(&self) -> usize {
        match *self {
            Assignment::Dense { outputs, .. } => outputs,
            Assignment::Conv(g) => g.out_channels * g.out_height() * g.out_width(),
            Assignment::Scale { features, .. } => features,
        }
    }

    fn out_shape(&self, batch: usize) -> Vec<usize> {
        match *self {
            Assignment::Dense { outputs, .. } => vec![batch, outputs],
            Assignment::Conv(g) => vec![batch, g.out_channels, g.out_height(), g.out_width()],
            Assignment::Scale { .. } => vec![batch, self.out_len()],
        }
    }

    /// Visit every `(i, j, k)` with `1_{ijk} = 1`, per sample offsets
    /// excluded. The visiting order is fixed.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        match *self {
            Assignment::Dense { inputs, outputs } => {
                for o in 0..outputs {
                    for i in 0..inputs {
                        f(o, i, o * inputs + i);
                    }
                }
            }
            Assignment::Conv(g) => {
                let (oh, ow) = (g.out_height(), g.out_width());
                for o in 0..g.out_channels {
                    for p in 0..oh {
                        for q in 0..ow {
                            let out = (o * oh + p) * ow + q;
                            for c in 0..g.in_channels {
                                for u in 0..g.kernel_h {
                                    for v in 0..g.kernel_w {
                                        let h = p * g.stride + u;
                                        let w = q * g.stride + v;
                                        let inp = (c * g.height + h) * g.width + w;
                                        let k = ((o * g.in_channels + c) * g.kernel_h + u) * g.kernel_w + v;
                                        f(out, inp, k);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Assignment::Scale { features, channels } => {
                let block = features / channels;
                for i in 0..features {
                    f(i, i, i / block);
                }
            }
        }
    }

    /// `y[b, i] = sum theta[k] x[b, j] 1_{ijk}`
    pub(crate) fn apply(&self, theta: &[f64], x: &Tensor) -> Tensor {
        let batch = x.sample_count();
        let (n_in, n_out) = (self.in_len(), self.out_len());
        let xd = x.data();
        let mut y = vec![0.0; batch * n_out];
        for b in 0..batch {
            let xr = &xd[b * n_in..(b + 1) * n_in];
            let yr = &mut y[b * n_out..(b + 1) * n_out];
            self.for_each(|i, j, k| yr[i] += theta[k] * xr[j]);
        }
        Tensor::new(self.out_shape(batch), y).expect("assignment output shape")
    }

    /// `x[b, j] = sum theta[k] y[b, i] 1_{ijk}`, shaped like `like`.
    pub(crate) fn transpose_input(&self, theta: &[f64], y: &Tensor, like: &[usize]) -> Tensor {
        let batch = y.sample_count();
        let (n_in, n_out) = (self.in_len(), self.out_len());
        let yd = y.data();
        let mut x = vec![0.0; batch * n_in];
        for b in 0..batch {
            let yr = &yd[b * n_out..(b + 1) * n_out];
            let xr = &mut x[b * n_in..(b + 1) * n_in];
            self.for_each(|i, j, k| xr[j] += theta[k] * yr[i]);
        }
        Tensor::new(like.to_vec(), x).expect("assignment input shape")
    }

    /// `theta[k] = sum_b sum x[b, j] y[b, i] 1_{ijk}`
    pub(crate) fn transpose_param(&self, x: &Tensor, y: &Tensor, param_len: usize) -> Vec<f64> {
        let batch = x.sample_count();
        let (n_in, n_out) = (self.in_len(), self.out_len());
        let (xd, yd) = (x.data(), y.data());
        let mut t = vec![0.0; param_len];
        for b in 0..batch {
            let xr = &xd[b * n_in..(b + 1) * n_in];
            let yr = &yd[b * n_out..(b + 1) * n_out];
            self.for_each(|i, j, k| t[k] += xr[j] * yr[i]);
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_matches_direct_loop() {
        let g = ConvGeometry {
            in_channels: 2,
            out_channels: 3,
            height: 4,
            width: 5,
            kernel_h: 2,
            kernel_w: 3,
            stride: 1,
        };
        let map = Assignment::Conv(g);
        let theta: Vec<f64> = (0..g.param_shape().iter().product::<usize>())
            .map(|i| (i as f64 * 0.37).sin())
            .collect();
        let x = Tensor::new(vec![2, 2, 4, 5], (0..80).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap();
        let y = map.apply(&theta, &x);
        assert_eq!(y.shape(), &[2, 3, 3, 3]);
        for b in 0..2 {
            for o in 0..3 {
                for p in 0..3 {
                    for q in 0..3 {
                        let mut acc = 0.0;
                        for c in 0..2 {
                            for u in 0..2 {
                                for v in 0..3 {
                                    acc += theta[((o * 2 + c) * 2 + u) * 3 + v]
                                        * x.data()[((b * 2 + c) * 4 + p + u) * 5 + q + v];
                                }
                            }
                        }
                        let got = y.data()[((b * 3 + o) * 3 + p) * 3 + q];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn strided_conv_output_size() {
        let g = ConvGeometry {
            in_channels: 1,
            out_channels: 1,
            height: 5,
            width: 5,
            kernel_h: 3,
            kernel_w: 3,
            stride: 2,
        };
        assert_eq!((g.out_height(), g.out_width()), (2, 2));
    }
}
