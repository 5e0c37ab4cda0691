//! Risk, the mean-field model of next-step learning, and the grid search
//! that picks how aggressively each class of links probes its capacity.
//!
//! A fraction `α` of links (class A) is operated where the congestion
//! probability is `p_A1`; the rest (class B) at `p_B1`. The representative
//! link's expected posterior variance after one more observation trades off
//! against the immediate squared-error risk of running away from the mean.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::belief::LognormalBelief;
use crate::congestion::LinkSigmoid;
use crate::error::{Error, Result};
use crate::quadrature::{sigmoid, GaussianRule};
use crate::topology::GraphStats;

/// Absolute tolerance on the congestion probability of an inverted `b̂`.
pub const INVERSION_TOLERANCE: f64 = 1e-6;
pub const MAX_BRACKET_DOUBLINGS: usize = 60;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub immediate: f64,
    pub per_link: Vec<f64>,
}

/// `Σ (b̂ − μ)² + σ²` with natural-space moments.
pub fn risk(b_hat: &[f64], beliefs: &[LognormalBelief]) -> RiskReport {
    let per_link: Vec<f64> = b_hat
        .iter()
        .zip(beliefs)
        .map(|(b, q)| (b - q.natural_mean()).powi(2) + q.natural_var())
        .collect();
    RiskReport {
        immediate: per_link.iter().sum(),
        per_link,
    }
}

/// Probability that a link run at rate `b̂` congests, averaged over the
/// belief.
pub fn class_probability(b_hat: f64, belief: &LognormalBelief, link: LinkSigmoid) -> f64 {
    let rule = GaussianRule::new(belief.log_mean, belief.log_var, link.transition(b_hat));
    rule.nodes
        .iter()
        .zip(&rule.weights)
        .map(|(u, w)| w * sigmoid(link.kappa * (b_hat - link.rho * u.exp())))
        .sum()
}

/// The `b̂` at which [`class_probability`] equals `target`, by bisection on
/// a bracket grown from the belief mean.
pub fn invert_class_probability(target: f64, belief: &LognormalBelief, link: LinkSigmoid) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::InvalidParameter(format!("target probability {target} outside (0, 1)")));
    }
    let p = |b: f64| class_probability(b, belief, link);
    let bracket_error = Error::Bracket {
        target,
        doublings: MAX_BRACKET_DOUBLINGS,
    };
    let mut hi = belief.natural_mean();
    let mut lo = hi;
    let mut grown = 0;
    while p(hi) < target {
        hi *= 2.0;
        grown += 1;
        if grown > MAX_BRACKET_DOUBLINGS {
            return Err(bracket_error);
        }
    }
    grown = 0;
    while p(lo) > target {
        lo *= 0.5;
        grown += 1;
        if grown > MAX_BRACKET_DOUBLINGS {
            return Err(bracket_error);
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if p(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi {
            break;
        }
    }
    let b = 0.5 * (lo + hi);
    if (p(b) - target).abs() > INVERSION_TOLERANCE {
        return Err(bracket_error);
    }
    Ok(b)
}

/// Natural-space variance of `g(b) q(b)` normalised.
fn tilted_natural_variance(belief: &LognormalBelief, link: LinkSigmoid, y: f64, g: impl Fn(f64) -> f64) -> Result<f64> {
    let rule = GaussianRule::new(belief.log_mean, belief.log_var, link.transition(y));
    // Moments of b/b₀ keep the sums well scaled.
    let b0 = belief.natural_mean();
    let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
    for (u, w) in rule.nodes.iter().zip(&rule.weights) {
        let b = u.exp();
        let s = sigmoid(link.kappa * (y - link.rho * b));
        let wg = w * g(s);
        let r = b / b0;
        s0 += wg;
        s1 += wg * r;
        s2 += wg * r * r;
    }
    if !(s0 > 0.0 && s0.is_finite() && s1.is_finite() && s2.is_finite()) {
        return Err(Error::Quadrature {
            log_mean: belief.log_mean,
            log_var: belief.log_var,
        });
    }
    let mean = s1 / s0;
    Ok(((s2 / s0 - mean * mean) * b0 * b0).max(0.0))
}

/// Variance after a congested class-A observation at `b̂_A`, where the
/// feedback only pins the link if the other links on a reporting route
/// were quiet.
pub fn posterior_variance_a1(belief: &LognormalBelief, link: LinkSigmoid, b_hat_a: f64, p_b0: f64, route_length: f64) -> Result<f64> {
    let blur = 1.0 - p_b0.powf(route_length - 1.0);
    tilted_natural_variance(belief, link, b_hat_a, |s| blur * (1.0 - s) + s)
}

/// Variance after a quiet class-A observation at `b̂_A`.
pub fn posterior_variance_a0(belief: &LognormalBelief, link: LinkSigmoid, b_hat_a: f64) -> Result<f64> {
    tilted_natural_variance(belief, link, b_hat_a, |s| 1.0 - s)
}

/// A point of the policy grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub alpha: f64,
    pub p_a1: f64,
    pub p_b1: f64,
}

/// The closed-form expected variance of the representative link after one
/// step, given the two one-observation posterior variances.
pub fn expected_future_variance_from(
    candidate: Candidate,
    prior_var: f64,
    var_a1: f64,
    var_a0: f64,
    stats: GraphStats,
) -> f64 {
    let Candidate { alpha, p_a1, p_b1 } = candidate;
    let (p_a0, p_b0) = (1.0 - p_a1, 1.0 - p_b1);
    let others = stats.coupled_links - 1.0;
    let single_report = (1.0 - alpha).powf(stats.route_length - 1.0);
    let all_quiet = p_a0.powf(alpha * others) * p_b0.powf((1.0 - alpha) * others);
    (1.0 - alpha) * prior_var
        + alpha
            * (p_a1 * (single_report * (var_a1 - prior_var) + prior_var)
                + p_a0 * (all_quiet * (var_a0 - prior_var) + prior_var))
}

pub fn expected_future_variance(candidate: Candidate, belief: &LognormalBelief, link: LinkSigmoid, stats: GraphStats) -> Result<f64> {
    let b_hat_a = invert_class_probability(candidate.p_a1, belief, link)?;
    let var_a1 = posterior_variance_a1(belief, link, b_hat_a, 1.0 - candidate.p_b1, stats.route_length)?;
    let var_a0 = posterior_variance_a0(belief, link, b_hat_a)?;
    Ok(expected_future_variance_from(candidate, belief.natural_var(), var_a1, var_a0, stats))
}

/// Values searched for each policy parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyGrid {
    pub p_a1: Vec<f64>,
    pub p_b1: Vec<f64>,
    pub alpha: Vec<f64>,
}

pub const MAX_ALPHA_POINTS: usize = 41;

impl PolicyGrid {
    /// `p_A1` on 0.05..0.95 in steps of 0.05, a logarithmic `p_B1` ladder,
    /// and `α = k/M` (or `k/42` when that would exceed 41 points).
    pub fn for_links(links: usize) -> Self {
        let denom = if links >= 2 && links - 1 <= MAX_ALPHA_POINTS {
            links
        } else {
            MAX_ALPHA_POINTS + 1
        };
        PolicyGrid {
            p_a1: (1..=19).map(|k| k as f64 / 20.0).collect(),
            p_b1: vec![0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2],
            alpha: (1..denom).map(|k| k as f64 / denom as f64).collect(),
        }
    }
}

/// Objective terms at one grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub alpha: f64,
    pub p_a1: f64,
    pub p_b1: f64,
    pub b_hat_a: f64,
    pub b_hat_b: f64,
    pub expected_variance: f64,
    pub objective: f64,
}

/// All feasible grid points, ordered by `p_B1`, then `p_A1`, then `α`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEvaluation {
    pub points: Vec<GridPoint>,
}

impl GridEvaluation {
    /// First minimum in grid order, which realises the tie-break.
    pub fn argmin(&self) -> Option<&GridPoint> {
        self.points
            .iter()
            .fold(None, |best: Option<&GridPoint>, p| match best {
                Some(b) if b.objective <= p.objective => Some(b),
                _ => Some(p),
            })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for p in &self.points {
            w.serialize(p)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Evaluates the receding-horizon objective on every feasible grid point.
pub fn evaluate_grid(belief: &LognormalBelief, link: LinkSigmoid, stats: GraphStats, gamma: f64, grid: &PolicyGrid) -> Result<GridEvaluation> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidParameter(format!("discount {gamma} outside [0, 1)")));
    }
    if !belief.is_valid() {
        return Err(Error::InvalidParameter("representative belief is not valid".into()));
    }
    let mu = belief.natural_mean();
    let prior_var = belief.natural_var();
    let weight = gamma / (1.0 - gamma);

    // Infeasible targets (below the probability reachable at b̂ → 0) drop out.
    let invert = |p: f64| invert_class_probability(p, belief, link).ok();
    let b_a: Vec<Option<f64>> = grid.p_a1.par_iter().map(|&p| invert(p)).collect();
    let b_b: Vec<Option<f64>> = grid.p_b1.par_iter().map(|&p| invert(p)).collect();
    let var_a0: Vec<Option<f64>> = b_a
        .par_iter()
        .map(|b| b.and_then(|b| posterior_variance_a0(belief, link, b).ok()))
        .collect();

    let pairs: Vec<(usize, usize)> = (0..grid.p_b1.len())
        .flat_map(|j| (0..grid.p_a1.len()).map(move |i| (j, i)))
        .filter(|&(j, i)| grid.p_b1[j] < grid.p_a1[i])
        .collect();
    let per_pair: Vec<Vec<GridPoint>> = pairs
        .par_iter()
        .map(|&(j, i)| {
            let (Some(b_hat_a), Some(b_hat_b), Some(v_a0)) = (b_a[i], b_b[j], var_a0[i]) else {
                return Vec::new();
            };
            let Ok(v_a1) = posterior_variance_a1(belief, link, b_hat_a, 1.0 - grid.p_b1[j], stats.route_length) else {
                return Vec::new();
            };
            grid.alpha
                .iter()
                .map(|&alpha| {
                    let candidate = Candidate {
                        alpha,
                        p_a1: grid.p_a1[i],
                        p_b1: grid.p_b1[j],
                    };
                    let expected_variance = expected_future_variance_from(candidate, prior_var, v_a1, v_a0, stats);
                    let objective = alpha * (b_hat_a - mu).powi(2)
                        + (1.0 - alpha) * (b_hat_b - mu).powi(2)
                        + prior_var
                        + weight * expected_variance;
                    GridPoint {
                        alpha,
                        p_a1: candidate.p_a1,
                        p_b1: candidate.p_b1,
                        b_hat_a,
                        b_hat_b,
                        expected_variance,
                        objective,
                    }
                })
                .collect()
        })
        .collect();
    Ok(GridEvaluation {
        points: per_pair.into_iter().flatten().collect(),
    })
}

/// The optimised class parameters together with the inputs they were
/// optimised for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldPolicy {
    pub alpha: f64,
    pub p_a1: f64,
    pub p_b1: f64,
    pub gamma: f64,
    pub stats: GraphStats,
    pub belief: LognormalBelief,
    pub link: LinkSigmoid,
    pub objective: f64,
}

pub fn optimize_policy(belief: &LognormalBelief, link: LinkSigmoid, stats: GraphStats, gamma: f64, grid: &PolicyGrid) -> Result<MeanFieldPolicy> {
    let evaluation = evaluate_grid(belief, link, stats, gamma, grid)?;
    let best = evaluation
        .argmin()
        .ok_or_else(|| Error::InvalidParameter("no feasible point on the policy grid".into()))?;
    Ok(MeanFieldPolicy {
        alpha: best.alpha,
        p_a1: best.p_a1,
        p_b1: best.p_b1,
        gamma,
        stats,
        belief: *belief,
        link,
        objective: best.objective,
    })
}

/// The representative link: unit natural mean, the links' average
/// log-variance, and `κ̃ = mean(κ_m μ_m)` so the sigmoid keeps its shape in
/// normalised units.
pub fn representative_link(beliefs: &[LognormalBelief], kappa: &[f64], rho: f64) -> Result<(LognormalBelief, LinkSigmoid)> {
    if beliefs.is_empty() || beliefs.len() != kappa.len() {
        return Err(Error::InvalidParameter("need one kappa per belief and at least one link".into()));
    }
    let m = beliefs.len() as f64;
    let log_var = beliefs.iter().map(|b| b.log_var).sum::<f64>() / m;
    let kappa = beliefs
        .iter()
        .zip(kappa)
        .map(|(b, k)| k * b.natural_mean())
        .sum::<f64>()
        / m;
    Ok((LognormalBelief::new(-0.5 * log_var, log_var), LinkSigmoid::new(kappa, rho)))
}
