use libm::{exp, expm1, log1p, tanh};

/// Smooth pointwise nonlinearities. ReLU is deliberately absent: the
/// curvature pass needs a second derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Tanh,
    /// `log(1 + exp(beta x)) / beta`
    SoftPlus {
        beta: f64,
    },
    /// ELU with unit scale. Only C^1 at zero; the second derivative there is
    /// taken as the right limit, 0.
    Elu,
}

const SOFTPLUS_LINEAR_ABOVE: f64 = 30.0;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + exp(-z))
    } else {
        let e = exp(z);
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn value(&self, x: f64) -> f64 {
        match *self {
            Activation::Tanh => tanh(x),
            Activation::SoftPlus { beta } => {
                let z = beta * x;
                if z > SOFTPLUS_LINEAR_ABOVE {
                    x
                } else {
                    log1p(exp(z)) / beta
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    expm1(x)
                }
            }
        }
    }

    pub fn d1(&self, x: f64) -> f64 {
        match *self {
            Activation::Tanh => {
                let t = tanh(x);
                1.0 - t * t
            }
            Activation::SoftPlus { beta } => sigmoid(beta * x),
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    exp(x)
                }
            }
        }
    }

    pub fn d2(&self, x: f64) -> f64 {
        match *self {
            Activation::Tanh => {
                let t = tanh(x);
                -2.0 * t * (1.0 - t * t)
            }
            Activation::SoftPlus { beta } => {
                let s = sigmoid(beta * x);
                beta * s * (1.0 - s)
            }
            Activation::Elu => {
                if x >= 0.0 {
                    0.0
                } else {
                    exp(x)
                }
            }
        }
    }
}
