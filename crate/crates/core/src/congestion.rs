//! The environment: link congestion events drawn from the true capacities
//! and user feedback vectors consistent with them.
//!
//! A link `m` carrying aggregate rate `y` congests with probability
//! `σ(κ_m (y − ρ b_m))`. Users only see the binary signal `v_n`, which must
//! satisfy two consistency rules against the latent link events `z`:
//!
//! * a user that reports congestion has at least one congested link on its
//!   route;
//! * a congested link has at least one reporting user.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::quadrature::{sigmoid, Transition};
use crate::topology::{NetworkInstance, Topology};

/// Per-link sigmoid steepness `κ_m` and the shared location factor `ρ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmoidCongestionModel {
    pub kappa: Vec<f64>,
    pub rho: f64,
}

impl SigmoidCongestionModel {
    /// `κ_m = steepness / ((1 − ρ) b_m)`: the congestion probability is one
    /// half at `y = ρ b_m` and `σ(steepness)` at `y = b_m`.
    pub fn from_capacities(capacities: &[f64], rho: f64, steepness: f64) -> Self {
        let kappa = capacities
            .iter()
            .map(|b| steepness / ((1.0 - rho) * b))
            .collect();
        SigmoidCongestionModel { kappa, rho }
    }

    pub fn link(&self, m: usize) -> LinkSigmoid {
        LinkSigmoid {
            kappa: self.kappa[m],
            rho: self.rho,
        }
    }

    pub fn num_links(&self) -> usize {
        self.kappa.len()
    }
}

/// The congestion likelihood of a single link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkSigmoid {
    pub kappa: f64,
    pub rho: f64,
}

impl LinkSigmoid {
    pub fn new(kappa: f64, rho: f64) -> Self {
        LinkSigmoid { kappa, rho }
    }

    /// `P(z = 1 | y, b)`.
    pub fn congestion_probability(&self, y: f64, b: f64) -> f64 {
        sigmoid(self.kappa * (y - self.rho * b))
    }

    pub(crate) fn transition(&self, y: f64) -> Option<Transition> {
        Transition::of_sigmoid(self.kappa, self.rho, y)
    }
}

pub fn congestion_probability(y: f64, b: f64, link: LinkSigmoid) -> f64 {
    link.congestion_probability(y, b)
}

/// One draw of latent link events and observed user feedback.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackSample {
    pub z: Vec<bool>,
    pub v: Vec<bool>,
}

/// Evaluates the consistency indicator: the product of the "at least one
/// congested link" factor over reporting users and the "not congested"
/// factor over links none of whose users report.
pub fn check_consistency(z: &[bool], v: &[bool], topology: &Topology) -> bool {
    let reporting_users_ok = topology
        .routes()
        .iter()
        .zip(v)
        .filter(|(_, &reported)| reported)
        .all(|(route, _)| route.iter().any(|&m| z[m]));
    let silent_links_ok = (0..topology.num_links())
        .filter(|&m| !topology.link_users(m).iter().any(|&n| v[n]))
        .all(|m| !z[m]);
    reporting_users_ok && silent_links_ok
}

/// Samples `z` from the true capacities at rates `y`, then builds a
/// consistent `v`:
///
/// 1. users without a congested link stay silent;
/// 2. every other user reports with probability one half;
/// 3. each congested link that still has no reporter gets one, chosen
///    uniformly among its users.
pub fn sample_feedback<R: Rng + ?Sized>(y: &[f64], instance: &NetworkInstance, rng: &mut R) -> FeedbackSample {
    let topology = &instance.topology;
    let z: Vec<bool> = (0..topology.num_links())
        .map(|m| {
            let p = instance.congestion.link(m).congestion_probability(y[m], instance.b_true[m]);
            rng.random_bool(p.clamp(0.0, 1.0))
        })
        .collect();
    let v = feedback_for(&z, topology, rng);
    FeedbackSample { z, v }
}

/// The constructive `v` sampler for a given `z`.
pub fn feedback_for<R: Rng + ?Sized>(z: &[bool], topology: &Topology, rng: &mut R) -> Vec<bool> {
    let mut v: Vec<bool> = topology
        .routes()
        .iter()
        .map(|route| route.iter().any(|&m| z[m]) && rng.random_bool(0.5))
        .collect();
    for m in (0..topology.num_links()).filter(|&m| z[m]) {
        let users = topology.link_users(m);
        if !users.iter().any(|&n| v[n]) {
            if let Some(&n) = users.choose(rng) {
                v[n] = true;
            }
        }
    }
    v
}
