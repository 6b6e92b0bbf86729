//! Curvature-based step rescaling.
//!
//! Each iteration turns the per-sample quadratic forms `<H_b d, d>` into a
//! curvature `c_k`, smooths it with a bias-corrected moving average, and
//! divides the first-order decrease `<d, g>` by the resulting estimate:
//!
//! ```text
//! c_k = mean_b |<H_b d, d>| / |d|^2 + lambda
//! c_hat = beta3 c_hat + (1 - beta3) c_k,   c_tilde = c_hat / (1 - beta3^k)
//! L_tilde = max(c_tilde, c_k)
//! r_k = <d, g> / (D |d|^2 L_tilde)
//! ```

use libm::{fabs, pow};

use crate::error::{Error, Result};

/// `mean_b |q_b| / dir_norm_sq + lambda`.
pub fn batch_curvature(per_sample_qform: &[f64], dir_norm_sq: f64, lambda: f64) -> Result<f64> {
    if dir_norm_sq <= 0.0 {
        return Err(Error::ZeroDirection);
    }
    if per_sample_qform.is_empty() {
        return Err(Error::contract("curvature needs at least one sample"));
    }
    let mut acc = 0.0;
    for q in per_sample_qform {
        acc += fabs(*q);
    }
    Ok(acc / per_sample_qform.len() as f64 / dir_norm_sq + lambda)
}

/// `dir_dot_grad / (D dir_norm_sq L_tilde)`.
pub fn rescale_factor(dir_dot_grad: f64, dir_norm_sq: f64, l_tilde: f64, denom_const: f64) -> Result<f64> {
    if dir_norm_sq <= 0.0 {
        return Err(Error::ZeroDirection);
    }
    if l_tilde == 0.0 {
        return Err(Error::VanishingCurvature);
    }
    Ok(dir_dot_grad / (denom_const * dir_norm_sq * l_tilde))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RescaleState {
    c_hat: f64,
    k: u64,
    beta3: f64,
    denom_const: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RescaleOutput {
    pub c_k: f64,
    pub c_tilde: f64,
    pub l_tilde: f64,
    pub r_k: f64,
}

impl RescaleState {
    pub fn new(beta3: f64, denom_const: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta3) {
            return Err(Error::InvalidParameter(alloc::format!(
                "beta3 must lie in [0, 1), got {beta3}"
            )));
        }
        if !(denom_const > 0.0 && denom_const.is_finite()) {
            return Err(Error::InvalidParameter(alloc::format!(
                "denominator constant must be positive, got {denom_const}"
            )));
        }
        Ok(Self {
            c_hat: 0.0,
            k: 0,
            beta3,
            denom_const,
        })
    }

    pub fn c_hat(&self) -> f64 {
        self.c_hat
    }

    pub fn k(&self) -> u64 {
        self.k
    }

    pub fn beta3(&self) -> f64 {
        self.beta3
    }

    pub fn denom_const(&self) -> f64 {
        self.denom_const
    }

    /// Fold `c_k` into the moving average. Returns `(c_tilde, L_tilde)`.
    /// The first debiased estimate is `c_1` itself, without rounding.
    pub fn update_estimate(&mut self, c_k: f64) -> (f64, f64) {
        self.c_hat = self.beta3 * self.c_hat + (1.0 - self.beta3) * c_k;
        self.k += 1;
        let c_tilde = if self.k == 1 {
            c_k
        } else {
            self.c_hat / (1.0 - pow(self.beta3, self.k as f64))
        };
        (c_tilde, c_tilde.max(c_k))
    }

    /// One full rescaling step. A batch whose `dir_dot_grad` is exactly zero
    /// yields `None` and leaves the state untouched.
    pub fn step(
        &mut self,
        per_sample_qform: &[f64],
        dir_dot_grad: f64,
        dir_norm_sq: f64,
        lambda: f64,
    ) -> Result<Option<RescaleOutput>> {
        if dir_dot_grad == 0.0 {
            return Ok(None);
        }
        let c_k = batch_curvature(per_sample_qform, dir_norm_sq, lambda)?;
        let mut next = *self;
        let (c_tilde, l_tilde) = next.update_estimate(c_k);
        let r_k = rescale_factor(dir_dot_grad, dir_norm_sq, l_tilde, self.denom_const)?;
        *self = next;
        Ok(Some(RescaleOutput {
            c_k,
            c_tilde,
            l_tilde,
            r_k,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;
    use proptest::prelude::*;

    #[test]
    fn absolute_value_is_taken_per_sample() {
        assert_eq!(batch_curvature(&[4.0, -2.0], 2.0, 0.0).unwrap(), 1.5);
        assert_eq!(batch_curvature(&[0.0, 0.0], 1.0, 1e-4).unwrap(), 1e-4);
        assert_eq!(batch_curvature(&[1.0], 0.0, 0.0), Err(Error::ZeroDirection));
    }

    #[test]
    fn moving_average_replay() {
        let mut s = RescaleState::new(0.9, 2.0).unwrap();
        let (ct, lt) = s.update_estimate(2.0);
        assert!((s.c_hat() - 0.2).abs() < 1e-15);
        assert_eq!((ct, lt), (2.0, 2.0));
        assert_eq!(s.k(), 1);

        let (ct, lt) = s.update_estimate(0.0);
        let mut c_hat = 0.0;
        for c in [2.0, 0.0] {
            c_hat = 0.9 * c_hat + 0.1 * c;
        }
        let expected = c_hat / (1.0 - 0.9f64 * 0.9);
        assert!((s.c_hat() - 0.18).abs() < 1e-15);
        assert!((ct - expected).abs() < 1e-15);
        assert!((ct - 0.18 / 0.19).abs() < 1e-15);
        assert_eq!(lt, ct);
    }

    #[test]
    fn no_smoothing_without_beta3() {
        let mut s = RescaleState::new(0.0, 2.0).unwrap();
        for c in [3.0, 0.5, 7.0, 0.0] {
            assert_eq!(s.update_estimate(c), (c, c));
        }
    }

    #[test]
    fn rescale_factor_examples() {
        assert_eq!(rescale_factor(4.0, 4.0, 1.0, 2.0).unwrap(), 0.5);
        assert_eq!(rescale_factor(4.0, 4.0, 1.0, 1.0).unwrap(), 1.0);
        assert_eq!(rescale_factor(1.0, 1.0, 0.0, 2.0), Err(Error::VanishingCurvature));
        for a in [0.5, 2.0, 10.0] {
            let (theta, d) = (1.3, 2.0);
            let g = a * theta;
            let mut s = RescaleState::new(0.0, d).unwrap();
            let out = s.step(&[a * g * g], g * g, g * g, 0.0).unwrap().unwrap();
            assert!((out.r_k - 1.0 / (d * a)).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_leaves_state_alone() {
        let mut s = RescaleState::new(0.9, 2.0).unwrap();
        s.update_estimate(1.0);
        let before = s;
        assert_eq!(s.step(&[5.0], 0.0, 1.0, 0.0).unwrap(), None);
        assert_eq!(s, before);
    }

    #[test]
    fn failed_step_leaves_state_alone() {
        let mut s = RescaleState::new(0.5, 2.0).unwrap();
        assert_eq!(s.step(&[0.0], 1.0, 1.0, 0.0), Err(Error::VanishingCurvature));
        assert_eq!(s.k(), 0);
    }

    #[test]
    fn invalid_hyperparameters() {
        assert!(RescaleState::new(1.0, 2.0).is_err());
        assert!(RescaleState::new(-0.1, 2.0).is_err());
        assert!(RescaleState::new(0.9, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn first_estimate_is_exact(beta3 in 0.0f64..0.999, c in 0.0f64..1e6) {
            let mut s = RescaleState::new(beta3, 2.0).unwrap();
            let (ct, lt) = s.update_estimate(c);
            prop_assert_eq!(ct, c);
            prop_assert!(lt >= c);
        }

        #[test]
        fn estimate_dominates_both_terms(
            beta3 in 0.0f64..0.99,
            cs in proptest::collection::vec(0.0f64..100.0, 1..40),
        ) {
            let mut s = RescaleState::new(beta3, 2.0).unwrap();
            for c in cs {
                let (ct, lt) = s.update_estimate(c);
                prop_assert!(lt >= c && lt >= ct);
                prop_assert!(s.c_hat() >= 0.0);
            }
        }

        #[test]
        fn step_is_invariant_to_direction_scale(
            q in proptest::collection::vec(-10.0f64..10.0, 1..8),
            dot in 0.1f64..10.0,
            norm in 0.1f64..10.0,
            s in prop_oneof![Just(0.01f64), Just(1.0), Just(100.0)],
        ) {
            let mut a = RescaleState::new(0.9, 2.0).unwrap();
            let mut b = a;
            let ra = a.step(&q, dot, norm, 1e-3).unwrap().unwrap();
            let qs: Vec<f64> = q.iter().map(|v| v * s * s).collect();
            let rb = b.step(&qs, dot * s, norm * s * s, 1e-3).unwrap().unwrap();
            prop_assert!((rb.r_k * s - ra.r_k).abs() <= 1e-12 * ra.r_k.abs());
            prop_assert!((a.c_hat() - b.c_hat()).abs() <= 1e-12 * a.c_hat().max(1e-300));
        }
    }
}
