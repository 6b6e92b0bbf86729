//! Centering and normalizing layers, the batch-coupled half of batch
//! normalization.
//!
//! Each output entry `i` is paired with a statistics group `g(i)`. With
//! [`StatsAxis::Batch`] a group holds one channel across every sample of the
//! batch; with [`StatsAxis::Sample`] it holds one channel of one sample.
//! Channels are contiguous blocks of `features / channels` entries.

use alloc::vec;
use alloc::vec::Vec;

use libm::sqrt;

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsAxis {
    /// Statistics over the batch (and positions within a channel).
    Batch,
    /// Statistics within each sample.
    Sample,
}

/// Candidate closed forms for the normalizing layer's second-order term.
///
/// Only [`NormCurvatureRule::FullSecondDerivative`] is used by the engine; the
/// other two exist so the finite-difference check can show that they fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormCurvatureRule {
    /// `g2 = -E(xd^2) g^3 + 3 E(xd x) g^5`, `r = sum 1/2 (gd xd + g2 x) xh`.
    Printed,
    /// `g2 = -E(xd^2) g^3 + 3 E(xd x)^2 g^5`, `r = sum 1/2 (gd xd + g2 x) xh`.
    SquaredMoment,
    /// `g2 = -E(xd^2) g^3 + 3 E(xd x)^2 g^5`, `r = sum (gd xd + 1/2 g2 x) xh`,
    /// i.e. half the second derivative of `t -> gamma(x + t xd) (x + t xd)`.
    FullSecondDerivative,
}

impl NormCurvatureRule {
    pub const ALL: [NormCurvatureRule; 3] = [
        NormCurvatureRule::Printed,
        NormCurvatureRule::SquaredMoment,
        NormCurvatureRule::FullSecondDerivative,
    ];

    pub const ADOPTED: NormCurvatureRule = NormCurvatureRule::FullSecondDerivative;

    pub fn name(&self) -> &'static str {
        match self {
            NormCurvatureRule::Printed => "printed",
            NormCurvatureRule::SquaredMoment => "squared-moment",
            NormCurvatureRule::FullSecondDerivative => "full-second-derivative",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Grouping {
    pub features: usize,
    pub channels: usize,
    pub axis: StatsAxis,
}

impl Grouping {
    fn block(&self) -> usize {
        self.features / self.channels
    }

    pub fn group_count(&self, batch: usize) -> usize {
        match self.axis {
            StatsAxis::Batch => self.channels,
            StatsAxis::Sample => batch * self.channels,
        }
    }

    fn group_size(&self, batch: usize) -> usize {
        match self.axis {
            StatsAxis::Batch => batch * self.block(),
            StatsAxis::Sample => self.block(),
        }
    }

    fn group_of(&self, b: usize, i: usize) -> usize {
        let k = i / self.block();
        match self.axis {
            StatsAxis::Batch => k,
            StatsAxis::Sample => b * self.channels + k,
        }
    }

    /// Group means `E_g(f)` with `f` evaluated on flat indices.
    fn means(&self, batch: usize, f: impl Fn(usize) -> f64) -> Vec<f64> {
        let mut sums = vec![0.0; self.group_count(batch)];
        for b in 0..batch {
            for i in 0..self.features {
                sums[self.group_of(b, i)] += f(b * self.features + i);
            }
        }
        let n = self.group_size(batch) as f64;
        sums.iter_mut().for_each(|s| *s /= n);
        sums
    }

    fn map(&self, like: &Tensor, f: impl Fn(usize, usize) -> f64) -> Tensor {
        let batch = like.sample_count();
        let mut out = Vec::with_capacity(like.len());
        for b in 0..batch {
            for i in 0..self.features {
                out.push(f(b * self.features + i, self.group_of(b, i)));
            }
        }
        Tensor::new(like.shape().to_vec(), out).expect("grouped map keeps shape")
    }

    /// `x - E_g(x)`. The centering map is an orthogonal projection, so it is
    /// its own adjoint and its own tangent.
    pub fn center(&self, x: &Tensor) -> Tensor {
        let d = x.data();
        let mean = self.means(x.sample_count(), |j| d[j]);
        self.map(x, |j, g| d[j] - mean[g])
    }

    /// `gamma_g = (E_g(x^2) + eps)^(-1/2)`
    pub fn gammas(&self, x: &Tensor, eps: f64) -> Vec<f64> {
        let d = x.data();
        self.means(x.sample_count(), |j| d[j] * d[j])
            .into_iter()
            .map(|m| 1.0 / sqrt(m + eps))
            .collect()
    }

    pub fn normalize(&self, x: &Tensor, gamma: &[f64]) -> Tensor {
        let d = x.data();
        self.map(x, |j, g| gamma[g] * d[j])
    }

    /// `xh[j] = gamma yh[j] - x[j] E_g(gamma^3 x yh)`
    pub fn normalize_adjoint(&self, x: &Tensor, gamma: &[f64], yh: &Tensor) -> Tensor {
        let (xd, yd) = (x.data(), yh.data());
        let m = self.means(x.sample_count(), |j| xd[j] * yd[j]);
        self.map(x, |j, g| {
            let g3 = gamma[g] * gamma[g] * gamma[g];
            gamma[g] * yd[j] - xd[j] * g3 * m[g]
        })
    }

    /// `gamma_dot = -E_g(xd x) gamma^3`
    fn gamma_dots(&self, x: &Tensor, gamma: &[f64], xd: &Tensor) -> Vec<f64> {
        let (a, b) = (x.data(), xd.data());
        self.means(x.sample_count(), |j| a[j] * b[j])
            .into_iter()
            .zip(gamma)
            .map(|(m, &g)| -m * g * g * g)
            .collect()
    }

    /// `yd = gamma xd + gamma_dot x`
    pub fn normalize_tangent(&self, x: &Tensor, gamma: &[f64], xdot: &Tensor) -> Tensor {
        let gd = self.gamma_dots(x, gamma, xdot);
        let (a, b) = (x.data(), xdot.data());
        self.map(x, |j, g| gamma[g] * b[j] + gd[g] * a[j])
    }

    /// Per-sample second-order contribution of the normalizing layer.
    pub fn normalize_contribution(
        &self,
        x: &Tensor,
        gamma: &[f64],
        xdot: &Tensor,
        xhat: &Tensor,
        rule: NormCurvatureRule,
    ) -> Vec<f64> {
        let batch = x.sample_count();
        let (a, d, h) = (x.data(), xdot.data(), xhat.data());
        let m_dd = self.means(batch, |j| d[j] * d[j]);
        let m_dx = self.means(batch, |j| d[j] * a[j]);
        let mut g2 = vec![0.0; gamma.len()];
        let mut gd = vec![0.0; gamma.len()];
        for g in 0..gamma.len() {
            let g3 = gamma[g] * gamma[g] * gamma[g];
            let g5 = g3 * gamma[g] * gamma[g];
            gd[g] = -m_dx[g] * g3;
            g2[g] = match rule {
                NormCurvatureRule::Printed => -m_dd[g] * g3 + 3.0 * m_dx[g] * g5,
                _ => -m_dd[g] * g3 + 3.0 * m_dx[g] * m_dx[g] * g5,
            };
        }
        let mut out = vec![0.0; batch];
        for (b, slot) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for i in 0..self.features {
                let j = b * self.features + i;
                let g = self.group_of(b, i);
                let term = match rule {
                    NormCurvatureRule::FullSecondDerivative => gd[g] * d[j] + 0.5 * g2[g] * a[j],
                    _ => 0.5 * (gd[g] * d[j] + g2[g] * a[j]),
                };
                acc += term * h[j];
            }
            *slot = acc;
        }
        out
    }

    /// Riesz representer `A` of `a -> <D^2 y [xd, a], xh>`.
    pub fn normalize_second_adjoint(&self, x: &Tensor, gamma: &[f64], xdot: &Tensor, xhat: &Tensor) -> Tensor {
        let batch = x.sample_count();
        let (a, d, h) = (x.data(), xdot.data(), xhat.data());
        let n = self.group_size(batch) as f64;
        let m_dx = self.means(batch, |j| d[j] * a[j]);
        // group sums, not means
        let s_xh: Vec<f64> = self.means(batch, |j| a[j] * h[j]).iter().map(|m| m * n).collect();
        let s_dh: Vec<f64> = self.means(batch, |j| d[j] * h[j]).iter().map(|m| m * n).collect();
        self.map(x, |j, g| {
            let g3 = gamma[g] * gamma[g] * gamma[g];
            let g5 = g3 * gamma[g] * gamma[g];
            let gd = -m_dx[g] * g3;
            s_xh[g] * (3.0 * g5 * m_dx[g] * a[j] / n - g3 * d[j] / n) + gd * h[j] - g3 * a[j] / n * s_dh[g]
        })
    }
}
