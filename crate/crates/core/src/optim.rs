//! Update directions, learning-rate schedules and the parameter update.

use alloc::vec;
use alloc::vec::Vec;

use libm::{cos, pow, sqrt};

use crate::error::{Error, Result};
use crate::tensor::ParamVec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precond {
    Identity,
    RmsProp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectionMode {
    Sgd,
    RmsProp,
    Momentum(Precond),
}

impl DirectionMode {
    /// Plain and RMSProp directions always have `<d, g> >= 0`; momentum
    /// directions need not.
    pub fn guarantees_descent(&self) -> bool {
        !matches!(self, DirectionMode::Momentum(_))
    }
}

/// Moving averages behind the RMSProp and momentum directions.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecondState {
    v_hat: Option<ParamVec>,
    g_hat: Option<ParamVec>,
    k: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

fn unit_interval(name: &str, v: f64) -> Result<()> {
    if (0.0..1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(alloc::format!(
            "{name} must lie in [0, 1), got {v}"
        )))
    }
}

impl Default for PrecondState {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8).expect("default hyperparameters are valid")
    }
}

impl PrecondState {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        unit_interval("beta1", beta1)?;
        unit_interval("beta2", beta2)?;
        if eps.is_nan() || eps < 0.0 {
            return Err(Error::InvalidParameter(alloc::format!("eps must be >= 0, got {eps}")));
        }
        Ok(Self {
            v_hat: None,
            g_hat: None,
            k: 0,
            beta1,
            beta2,
            eps,
        })
    }

    pub fn k(&self) -> u64 {
        self.k
    }

    pub fn v_hat(&self) -> Option<&ParamVec> {
        self.v_hat.as_ref()
    }

    pub fn g_hat(&self) -> Option<&ParamVec> {
        self.g_hat.as_ref()
    }

    pub fn beta1(&self) -> f64 {
        self.beta1
    }

    pub fn direction(&mut self, mode: DirectionMode, g: &ParamVec) -> Result<ParamVec> {
        match mode {
            DirectionMode::Sgd => Ok(direction_sgd(g)),
            DirectionMode::RmsProp => direction_rmsprop(self, g),
            DirectionMode::Momentum(p) => direction_momentum(self, g, p),
        }
    }

    fn ema(acc: &mut Option<ParamVec>, beta: f64, x: &ParamVec) -> Result<()> {
        let prev = acc.take().unwrap_or_else(|| x.zeros_like());
        *acc = Some(prev.zip_map(x, |a, v| beta * a + (1.0 - beta) * v)?);
        Ok(())
    }

    /// Bias-corrected average; at `k = 1` this is the raw input.
    fn debiased(acc: &ParamVec, beta: f64, k: u64, raw: &ParamVec) -> ParamVec {
        if k == 1 {
            raw.clone()
        } else {
            acc.scale(1.0 / (1.0 - pow(beta, k as f64)))
        }
    }

    fn second_moment(&mut self, g: &ParamVec) -> Result<ParamVec> {
        let g2 = g.map(|v| v * v);
        Self::ema(&mut self.v_hat, self.beta2, &g2)?;
        Ok(Self::debiased(
            self.v_hat.as_ref().expect("just set"),
            self.beta2,
            self.k,
            &g2,
        ))
    }

    fn precondition(&self, v_tilde: &ParamVec, x: &ParamVec) -> Result<ParamVec> {
        let eps = self.eps;
        x.zip_map(v_tilde, |g, v| g / (sqrt(v) + eps))
    }
}

/// The identity preconditioner: the direction is the gradient.
pub fn direction_sgd(g: &ParamVec) -> ParamVec {
    g.clone()
}

/// `g / (sqrt(v_tilde) + eps)` with `v_tilde` the debiased average of `g^2`.
pub fn direction_rmsprop(state: &mut PrecondState, g: &ParamVec) -> Result<ParamVec> {
    state.k += 1;
    let v = state.second_moment(g)?;
    state.precondition(&v, g)
}

/// Debiased gradient average, optionally preconditioned by RMSProp.
pub fn direction_momentum(state: &mut PrecondState, g: &ParamVec, precond: Precond) -> Result<ParamVec> {
    state.k += 1;
    PrecondState::ema(&mut state.g_hat, state.beta1, g)?;
    let g_tilde = PrecondState::debiased(state.g_hat.as_ref().expect("just set"), state.beta1, state.k, g);
    match precond {
        Precond::Identity => Ok(g_tilde),
        Precond::RmsProp => {
            let v = state.second_moment(g)?;
            state.precondition(&v, &g_tilde)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleKind {
    /// `ell0 * eta^(epoch / epochs)`
    Red {
        ell0: f64,
        eta: f64,
        epochs: usize,
    },
    /// `(ell, epochs)` slots repeated forever.
    Annealing {
        pattern: Vec<(f64, usize)>,
    },
    /// Half a cosine wave from `ell0` down to `ell_min` over `epochs`, then flat.
    Cosine {
        ell0: f64,
        ell_min: f64,
        epochs: usize,
    },
    Constant {
        ell: f64,
    },
}

impl ScheduleKind {
    /// 5 epochs at 1, 13 at 1/2, 2 at 2.
    pub fn default_annealing() -> Self {
        ScheduleKind::Annealing {
            pattern: vec![(1.0, 5), (0.5, 13), (2.0, 2)],
        }
    }
}

/// Keeps `step * k^delta` inside `[alpha, beta]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobbinsMonro {
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub robbins_monro: Option<RobbinsMonro>,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(alloc::format!(
            "{name} must be positive, got {v}"
        )))
    }
}

impl ScheduleSpec {
    pub fn new(kind: ScheduleKind) -> Result<Self> {
        let spec = Self {
            kind,
            robbins_monro: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_robbins_monro(mut self, rm: RobbinsMonro) -> Result<Self> {
        self.robbins_monro = Some(rm);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            ScheduleKind::Red { ell0, eta, epochs } => {
                positive("ell0", *ell0)?;
                if !(*eta > 0.0 && *eta <= 1.0) {
                    return Err(Error::InvalidParameter(alloc::format!(
                        "eta must lie in (0, 1], got {eta}"
                    )));
                }
                if *epochs == 0 {
                    return Err(Error::InvalidParameter("schedule length must be positive".into()));
                }
            }
            ScheduleKind::Annealing { pattern } => {
                if pattern.is_empty() || pattern.iter().all(|&(_, n)| n == 0) {
                    return Err(Error::InvalidParameter("annealing pattern is empty".into()));
                }
                for &(ell, _) in pattern {
                    positive("annealing ell", ell)?;
                }
            }
            ScheduleKind::Cosine { ell0, ell_min, epochs } => {
                positive("ell0", *ell0)?;
                positive("ell_min", *ell_min)?;
                if *epochs == 0 {
                    return Err(Error::InvalidParameter("schedule length must be positive".into()));
                }
            }
            ScheduleKind::Constant { ell } => {
                if !(*ell >= 0.0 && ell.is_finite()) {
                    return Err(Error::InvalidParameter(alloc::format!(
                        "constant ell must be >= 0, got {ell}"
                    )));
                }
            }
        }
        if let Some(rm) = self.robbins_monro {
            check_robbins_monro(rm.alpha, rm.beta, rm.delta)?;
        }
        Ok(())
    }

    pub fn value(&self, epoch: usize) -> f64 {
        schedule_value(&self.kind, epoch)
    }
}

pub fn schedule_value(kind: &ScheduleKind, epoch: usize) -> f64 {
    match kind {
        ScheduleKind::Red { ell0, eta, epochs } => ell0 * pow(*eta, epoch as f64 / *epochs as f64),
        ScheduleKind::Annealing { pattern } => {
            let period: usize = pattern.iter().map(|&(_, n)| n).sum();
            let mut e = epoch % period;
            for &(ell, n) in pattern {
                if e < n {
                    return ell;
                }
                e -= n;
            }
            unreachable!("epoch reduced modulo the period")
        }
        ScheduleKind::Cosine { ell0, ell_min, epochs } => {
            let t = epoch.min(*epochs) as f64 / *epochs as f64;
            ell_min + 0.5 * (ell0 - ell_min) * (1.0 + cos(core::f64::consts::PI * t))
        }
        ScheduleKind::Constant { ell } => *ell,
    }
}

fn check_robbins_monro(alpha: f64, beta: f64, delta: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= beta && beta.is_finite()) {
        return Err(Error::InvalidParameter(alloc::format!(
            "need 0 < alpha <= beta, got alpha={alpha} beta={beta}"
        )));
    }
    if !(delta > 0.5 && delta < 1.0) {
        return Err(Error::InvalidParameter(alloc::format!(
            "delta must lie in (1/2, 1), got {delta}"
        )));
    }
    Ok(())
}

/// `clamp(step * k^delta, alpha, beta) / k^delta` for iteration `k >= 1`.
pub fn clamp_robbins_monro(step: f64, k: u64, alpha: f64, beta: f64, delta: f64) -> Result<f64> {
    check_robbins_monro(alpha, beta, delta)?;
    if k == 0 {
        return Err(Error::contract("iterations are counted from 1"));
    }
    let w = pow(k as f64, delta);
    Ok((step * w).clamp(alpha, beta) / w)
}

/// `theta - ell * rho * dir` with `rho = |r_k|` under the absolute-value rule.
/// Also returns the effective step `ell * rho`.
pub fn apply_update(theta: &ParamVec, ell: f64, r_k: f64, dir: &ParamVec, abs_rule: bool) -> Result<(ParamVec, f64)> {
    let rho = if abs_rule { r_k.abs() } else { r_k };
    let step = ell * rho;
    Ok((theta.axpy(-step, dir)?, step))
}

/// Share of iterations with `<g_k, d_k> >= 0`.
pub fn descent_fraction(dir_dot_grads: &[f64]) -> Result<f64> {
    if dir_dot_grads.is_empty() {
        return Err(Error::contract("descent fraction of an empty epoch"));
    }
    let hits = dir_dot_grads.iter().filter(|&&v| v >= 0.0).count();
    Ok(hits as f64 / dir_dot_grads.len() as f64)
}
