//! Primal–dual rate allocation for a fixed capacity estimate `b̂`.
//!
//! Users maximise `wₙ ln xₙ − xₙ qₙ` against their route price `qₙ = aₙᵀλ`;
//! links move their price along the constraint violation `yₘ − b̂ₘ` and
//! project back onto `λ ≥ 0`. One [`step`] is a synchronous round: every
//! user answers the current prices, then every link updates its price.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::NetworkInstance;

/// Default price-change threshold that declares the inner loop settled.
pub const DEFAULT_V_LAMBDA: f64 = 1e-3;
/// Step size numerator: `εₘ = STEP_SCALE / b̂ₘ`.
pub const STEP_SCALE: f64 = 0.5;

/// Best response of a weighted-log user to route price `q`.
pub fn primal_update(w: f64, route_price: f64, x_cap: f64) -> f64 {
    if route_price <= 0.0 {
        x_cap
    } else {
        (w / route_price).min(x_cap)
    }
}

/// Projected dual ascent on one link price.
pub fn dual_update(lambda: f64, eps: f64, y: f64, b_hat: f64) -> f64 {
    (lambda + eps * (y - b_hat)).max(0.0)
}

/// Inclusive `max |λ − λ_prev| ≤ V_λ`.
pub fn has_converged(lambda: &[f64], prev_lambda: &[f64], v_lambda: f64) -> bool {
    lambda
        .iter()
        .zip(prev_lambda)
        .all(|(a, b)| (a - b).abs() <= v_lambda)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerState {
    pub lambda: Vec<f64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub step: Vec<f64>,
    pub b_hat: Vec<f64>,
    /// `εₘ = step_scale / b̂ₘ`.
    pub step_scale: f64,
    /// Price vector before the latest dual update.
    pub prev_lambda: Vec<f64>,
}

impl InnerState {
    /// Starts from a fair-share price: each link charges the utility weight
    /// it would see if every user split its weight evenly over its route and
    /// the link were exactly full. Exact for single-link networks.
    pub fn new(instance: &NetworkInstance, b_hat: &[f64]) -> Result<Self> {
        let topology = &instance.topology;
        let mut lambda = vec![0.0; topology.num_links()];
        for (route, &w) in topology.routes().iter().zip(&instance.w) {
            for &m in route {
                lambda[m] += w / route.len() as f64;
            }
        }
        for (l, b) in lambda.iter_mut().zip(b_hat) {
            *l /= b;
        }
        Self::with_prices(instance, b_hat, lambda)
    }

    pub fn with_prices(instance: &NetworkInstance, b_hat: &[f64], lambda: Vec<f64>) -> Result<Self> {
        let topology = &instance.topology;
        if b_hat.len() != topology.num_links() || lambda.len() != topology.num_links() {
            return Err(Error::InvalidParameter("b_hat and lambda need one entry per link".into()));
        }
        if let Some(m) = b_hat.iter().position(|&b| !(b > 0.0 && b.is_finite())) {
            return Err(Error::InvalidParameter(format!("b_hat[{m}] = {} is not positive", b_hat[m])));
        }
        let caps = instance.rate_caps();
        let x: Vec<f64> = topology
            .route_prices(&lambda)
            .iter()
            .zip(&instance.w)
            .zip(&caps)
            .map(|((&q, &w), &cap)| primal_update(w, q, cap))
            .collect();
        let y = topology.link_rates(&x);
        Ok(InnerState {
            prev_lambda: lambda.clone(),
            lambda,
            x,
            y,
            step: b_hat.iter().map(|b| STEP_SCALE / b).collect(),
            b_hat: b_hat.to_vec(),
            step_scale: STEP_SCALE,
        })
    }

    pub fn set_step_scale(&mut self, step_scale: f64) {
        self.step_scale = step_scale;
        for (e, b) in self.step.iter_mut().zip(&self.b_hat) {
            *e = step_scale / b;
        }
    }

    /// Replaces the capacity estimate and the matching step sizes; prices
    /// and rates carry over.
    pub fn set_b_hat(&mut self, b_hat: &[f64]) {
        self.b_hat.copy_from_slice(b_hat);
        for (e, b) in self.step.iter_mut().zip(b_hat) {
            *e = self.step_scale / b;
        }
    }

    pub fn has_converged(&self, v_lambda: f64) -> bool {
        has_converged(&self.lambda, &self.prev_lambda, v_lambda)
    }
}

/// One synchronous primal–dual round.
pub fn step(state: &InnerState, instance: &NetworkInstance, caps: &[f64]) -> InnerState {
    let mut next = state.clone();
    step_in_place(&mut next, instance, caps);
    next
}

pub fn step_in_place(state: &mut InnerState, instance: &NetworkInstance, caps: &[f64]) {
    let topology = &instance.topology;
    for (n, route) in topology.routes().iter().enumerate() {
        let q: f64 = route.iter().map(|&m| state.lambda[m]).sum();
        state.x[n] = primal_update(instance.w[n], q, caps[n]);
    }
    state.y = topology.link_rates(&state.x);
    state.prev_lambda.copy_from_slice(&state.lambda);
    for m in 0..topology.num_links() {
        state.lambda[m] = dual_update(state.lambda[m], state.step[m], state.y[m], state.b_hat[m]);
    }
}

/// Outcome of iterating the inner loop to a threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub state: InnerState,
    pub iterations: usize,
    pub converged: bool,
}

/// Iterates from the fair-share start until `max |Δλ| ≤ tolerance`.
pub fn solve(instance: &NetworkInstance, b_hat: &[f64], tolerance: f64, max_iters: usize) -> Result<Solution> {
    let caps = instance.rate_caps();
    let mut state = InnerState::new(instance, b_hat)?;
    for i in 1..=max_iters {
        step_in_place(&mut state, instance, &caps);
        if state.has_converged(tolerance) {
            return Ok(Solution {
                state,
                iterations: i,
                converged: true,
            });
        }
    }
    Ok(Solution {
        state,
        iterations: max_iters,
        converged: false,
    })
}

/// Default tolerance and iteration budget for the optimal-rate oracle.
pub const ORACLE_TOLERANCE: f64 = 1e-6;
pub const ORACLE_MAX_ITERS: usize = 1_000_000;

/// Optimal rates `x*` for the true capacities.
pub fn oracle_rates(instance: &NetworkInstance) -> Result<Solution> {
    let sol = solve(instance, &instance.b_true, ORACLE_TOLERANCE, ORACLE_MAX_ITERS)?;
    if !sol.converged {
        return Err(Error::InvalidParameter(format!(
            "oracle did not reach tolerance {ORACLE_TOLERANCE} within {ORACLE_MAX_ITERS} steps"
        )));
    }
    Ok(sol)
}
