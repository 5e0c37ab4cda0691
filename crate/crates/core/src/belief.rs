//! Lognormal capacity beliefs and their Gaussian natural parameters.

use serde::{Deserialize, Serialize};
use std::ops::{Add, AddAssign, Mul, Sub};

/// Univariate lognormal belief over a link capacity, stored in log space:
/// `ln b ~ N(log_mean, log_var)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LognormalBelief {
    pub log_mean: f64,
    pub log_var: f64,
}

impl LognormalBelief {
    pub fn new(log_mean: f64, log_var: f64) -> Self {
        LognormalBelief { log_mean, log_var }
    }

    /// Builds the lognormal with the given natural-space mean and standard
    /// deviation: `s² = ln(1 + (σ/μ)²)`, `m = ln μ − s²/2`.
    pub fn from_natural(mean: f64, std: f64) -> Self {
        let log_var = (1.0 + (std / mean).powi(2)).ln();
        LognormalBelief {
            log_mean: mean.ln() - 0.5 * log_var,
            log_var,
        }
    }

    pub fn natural_mean(&self) -> f64 {
        (self.log_mean + 0.5 * self.log_var).exp()
    }

    pub fn natural_var(&self) -> f64 {
        self.log_var.exp_m1() * (2.0 * self.log_mean + self.log_var).exp()
    }

    pub fn natural_std(&self) -> f64 {
        self.natural_var().sqrt()
    }

    pub fn median(&self) -> f64 {
        self.log_mean.exp()
    }

    pub fn is_valid(&self) -> bool {
        self.log_mean.is_finite() && self.log_var.is_finite() && self.log_var > 0.0
    }

    pub fn to_natural(&self) -> GaussianNatural {
        GaussianNatural {
            precision: 1.0 / self.log_var,
            shift: self.log_mean / self.log_var,
        }
    }

    /// Same shape, rescaled so that `b ↦ c·b`.
    pub fn scaled(&self, c: f64) -> Self {
        LognormalBelief {
            log_mean: self.log_mean + c.ln(),
            log_var: self.log_var,
        }
    }
}

/// Natural parameters of an (unnormalised) Gaussian in `u = ln b`:
/// `exp(shift·u − precision·u²/2)`.
///
/// EP site approximations live here; they may carry negative precision,
/// only the product with the prior has to be a proper density.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GaussianNatural {
    pub precision: f64,
    pub shift: f64,
}

impl GaussianNatural {
    pub const ZERO: GaussianNatural = GaussianNatural {
        precision: 0.0,
        shift: 0.0,
    };

    pub fn is_proper(&self) -> bool {
        self.precision > 0.0 && self.precision.is_finite() && self.shift.is_finite()
    }

    /// Converts back to a lognormal; `None` unless the precision is positive.
    pub fn to_belief(&self) -> Option<LognormalBelief> {
        self.is_proper().then(|| LognormalBelief {
            log_mean: self.shift / self.precision,
            log_var: 1.0 / self.precision,
        })
    }
}

impl Add for GaussianNatural {
    type Output = GaussianNatural;
    fn add(self, rhs: Self) -> Self {
        GaussianNatural {
            precision: self.precision + rhs.precision,
            shift: self.shift + rhs.shift,
        }
    }
}

impl AddAssign for GaussianNatural {
    fn add_assign(&mut self, rhs: Self) {
        self.precision += rhs.precision;
        self.shift += rhs.shift;
    }
}

impl Sub for GaussianNatural {
    type Output = GaussianNatural;
    fn sub(self, rhs: Self) -> Self {
        GaussianNatural {
            precision: self.precision - rhs.precision,
            shift: self.shift - rhs.shift,
        }
    }
}

impl Mul<f64> for GaussianNatural {
    type Output = GaussianNatural;
    fn mul(self, c: f64) -> Self {
        GaussianNatural {
            precision: self.precision * c,
            shift: self.shift * c,
        }
    }
}
