//! Capacity inference from binary congestion feedback by expectation
//! propagation.
//!
//! Each stored episode contributes, per link, one Gaussian site in
//! `u = ln b`. The link belief is the base prior times all of its sites.
//! Inside an episode, link `m` has a binary congestion node `z_m` tied to the
//! capacity through the sigmoid likelihood and to the other links through
//! the feedback constraints:
//!
//! * a silent link (no reporting user) carries a factor forcing `z_m = 0`;
//! * each reporting route carries a factor requiring at least one congested
//!   link on it.
//!
//! Messages between `z` nodes and route factors are loopy belief
//! propagation; the capacity side is projected back onto the lognormal
//! family by matching the mean and variance of `ln b`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::belief::{GaussianNatural, LognormalBelief};
use crate::congestion::{LinkSigmoid, SigmoidCongestionModel};
use crate::error::{Error, Result};
use crate::quadrature::{sigmoid, GaussianRule};
use crate::topology::Topology;

pub type SiteApprox = GaussianNatural;

pub const DEFAULT_MAX_SWEEPS: usize = 5;
pub const DEFAULT_DAMPING: f64 = 0.5;
pub const DEFAULT_DATASET_CAPACITY: usize = 25;

/// A possibly unnormalised distribution over a binary variable, scaled so
/// that its larger entry is one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BernoulliMessage {
    pub p0: f64,
    pub p1: f64,
}

impl BernoulliMessage {
    pub const UNIFORM: BernoulliMessage = BernoulliMessage { p0: 1.0, p1: 1.0 };

    /// Rescales `(p0, p1)` so that the larger weight is one. Two zero weights
    /// give the uniform message.
    pub fn new(p0: f64, p1: f64) -> Self {
        let top = p0.max(p1);
        if top > 0.0 && top.is_finite() {
            BernoulliMessage {
                p0: p0 / top,
                p1: p1 / top,
            }
        } else {
            Self::UNIFORM
        }
    }

    /// Normalised probability of `z = 0`.
    pub fn prob0(&self) -> f64 {
        self.p0 / (self.p0 + self.p1)
    }

    pub fn prob1(&self) -> f64 {
        self.p1 / (self.p0 + self.p1)
    }

    fn max_abs_diff(&self, other: &Self) -> f64 {
        (self.p0 - other.p0).abs().max((self.p1 - other.p1).abs())
    }
}

/// Message from the likelihood factor to `z`: the congestion probability
/// averaged over the cavity belief.
pub fn likelihood_to_z_message(cavity: &LognormalBelief, y: f64, link: LinkSigmoid) -> Result<BernoulliMessage> {
    let rule = GaussianRule::new(cavity.log_mean, cavity.log_var, link.transition(y));
    let p1 = congestion_expectation(&rule, y, link);
    if !p1.is_finite() {
        return Err(Error::Quadrature {
            log_mean: cavity.log_mean,
            log_var: cavity.log_var,
        });
    }
    let p1 = p1.clamp(0.0, 1.0);
    Ok(BernoulliMessage::new(1.0 - p1, p1))
}

fn congestion_expectation(rule: &GaussianRule, y: f64, link: LinkSigmoid) -> f64 {
    rule.nodes
        .iter()
        .zip(&rule.weights)
        .map(|(u, w)| w * sigmoid(link.kappa * (y - link.rho * u.exp())))
        .sum()
}

/// Message from a reporting-route factor to one of its links, given the
/// messages the other links on the route send to the factor.
pub fn psi1_incoming(others: &[BernoulliMessage]) -> BernoulliMessage {
    let none_congested: f64 = others.iter().map(BernoulliMessage::prob0).product();
    BernoulliMessage {
        p0: 1.0 - none_congested,
        p1: 1.0,
    }
}

/// Message from the silent-link factor: `z` must be zero.
pub fn psi0_incoming() -> BernoulliMessage {
    BernoulliMessage { p0: 1.0, p1: 0.0 }
}

/// `f(b) = [m0 (1 − σ) + m1 σ] · cavity(b)` with `σ = σ(κ(y − ρ b))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TiltedDensity {
    pub cavity: LognormalBelief,
    pub y: f64,
    pub link: LinkSigmoid,
    pub m0: f64,
    pub m1: f64,
}

pub fn z_to_b_tilted(z_messages: BernoulliMessage, y: f64, link: LinkSigmoid, cavity: LognormalBelief) -> TiltedDensity {
    TiltedDensity {
        cavity,
        y,
        link,
        m0: z_messages.p0,
        m1: z_messages.p1,
    }
}

impl TiltedDensity {
    pub fn density_factor(&self, u: f64) -> f64 {
        let s = sigmoid(self.link.kappa * (self.y - self.link.rho * u.exp()));
        self.m0 * (1.0 - s) + self.m1 * s
    }
}

/// Moment-matched lognormal and the zeroth moment of the tilted density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub belief: LognormalBelief,
    pub normalizer: f64,
}

pub fn project_to_lognormal(tilted: &TiltedDensity) -> Result<Projection> {
    let cavity = tilted.cavity;
    let rule = GaussianRule::new(cavity.log_mean, cavity.log_var, tilted.link.transition(tilted.y));
    project_with_rule(tilted, &rule)
}

fn project_with_rule(tilted: &TiltedDensity, rule: &GaussianRule) -> Result<Projection> {
    let g: Vec<f64> = rule
        .nodes
        .iter()
        .zip(&rule.weights)
        .map(|(&u, &w)| w * tilted.density_factor(u))
        .collect();
    let z: f64 = g.iter().sum();
    if !(z > 0.0 && z.is_finite()) {
        return Err(Error::Projection(format!("tilted density has zeroth moment {z}")));
    }
    let mean = g.iter().zip(&rule.nodes).map(|(gi, u)| gi * u).sum::<f64>() / z;
    let var = g
        .iter()
        .zip(&rule.nodes)
        .map(|(gi, u)| gi * (u - mean) * (u - mean))
        .sum::<f64>()
        / z;
    if !(mean.is_finite() && var > 0.0 && var.is_finite()) {
        return Err(Error::Projection(format!("log-moments mean={mean}, var={var}")));
    }
    Ok(Projection {
        belief: LognormalBelief::new(mean, var),
        normalizer: z,
    })
}

/// Damped site refresh in natural parameters. `None` when the resulting
/// belief (cavity times new site) would not be a proper density; callers
/// keep the old site.
pub fn update_site(
    old_site: SiteApprox,
    projected: &LognormalBelief,
    cavity: &LognormalBelief,
    damping: f64,
) -> Option<SiteApprox> {
    let target = projected.to_natural() - cavity.to_natural();
    let site = old_site * (1.0 - damping) + target * damping;
    (cavity.to_natural() + site).is_proper().then_some(site)
}

/// One stored observation with its EP state.
///
/// Feedback is kept sparsely: the distinct routes of the users that
/// reported congestion, and the links none of whose users reported.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub y: Vec<f64>,
    /// `silent[m]`: no user of link `m` reported congestion.
    pub silent: Vec<bool>,
    /// Link sets of the reporting routes, each sorted, without duplicates.
    pub factors: Vec<Vec<usize>>,
    /// `link_factors[m]`: indices into `factors` containing link `m`.
    pub link_factors: Vec<Vec<usize>>,
    pub sites: Vec<SiteApprox>,
    /// Likelihood-to-`z` message per link.
    pub likelihood_messages: Vec<BernoulliMessage>,
    /// `factor_messages[k][j]`: message from factor `k` to its `j`-th link.
    pub factor_messages: Vec<Vec<BernoulliMessage>>,
}

impl Episode {
    /// Builds an episode from link rates and the feedback vector.
    pub fn new(y: Vec<f64>, v: &[bool], topology: &Topology) -> Result<Self> {
        let links = topology.num_links();
        if y.len() != links || v.len() != topology.num_users() {
            return Err(Error::InvalidParameter("episode dimensions do not match the topology".into()));
        }
        let mut factors: Vec<Vec<usize>> = topology
            .routes()
            .iter()
            .zip(v)
            .filter(|(_, &reported)| reported)
            .map(|(route, _)| {
                let mut r = route.clone();
                r.sort_unstable();
                r
            })
            .collect();
        factors.sort();
        factors.dedup();
        let mut link_factors = vec![Vec::new(); links];
        for (k, f) in factors.iter().enumerate() {
            for &m in f {
                link_factors[m].push(k);
            }
        }
        let silent = link_factors.iter().map(Vec::is_empty).collect();
        let factor_messages = factors.iter().map(|f| vec![BernoulliMessage::UNIFORM; f.len()]).collect();
        Ok(Episode {
            y,
            silent,
            factors,
            link_factors,
            sites: vec![SiteApprox::ZERO; links],
            likelihood_messages: vec![BernoulliMessage::UNIFORM; links],
            factor_messages,
        })
    }

    pub fn num_links(&self) -> usize {
        self.y.len()
    }

    /// Position of link `m` inside factor `k`.
    fn slot(&self, k: usize, m: usize) -> usize {
        self.factors[k].iter().position(|&l| l == m).expect("link belongs to factor")
    }

    /// Product of the constraint-side messages arriving at `z_m`.
    pub fn constraint_message(&self, m: usize) -> BernoulliMessage {
        if self.silent[m] {
            return psi0_incoming();
        }
        let p0 = self.link_factors[m]
            .iter()
            .map(|&k| self.factor_messages[k][self.slot(k, m)].p0)
            .product();
        BernoulliMessage::new(p0, 1.0)
    }

    /// Current approximate marginals of the congestion nodes.
    pub fn z_marginals(&self) -> Vec<BernoulliMessage> {
        (0..self.num_links())
            .map(|m| {
                let c = self.constraint_message(m);
                let l = self.likelihood_messages[m];
                BernoulliMessage::new(c.p0 * l.p0, c.p1 * l.p1)
            })
            .collect()
    }

    /// Refreshes every route factor's outgoing messages, factor by factor.
    /// Returns the largest change.
    fn update_factor_messages(&mut self) -> f64 {
        let mut delta: f64 = 0.0;
        for k in 0..self.factors.len() {
            let incoming: Vec<BernoulliMessage> = self.factors[k]
                .iter()
                .map(|&m| self.variable_to_factor(m, k))
                .collect();
            let probs: Vec<f64> = incoming.iter().map(BernoulliMessage::prob0).collect();
            let leave_one_out = products_without_each(&probs);
            for (j, none_elsewhere) in leave_one_out.into_iter().enumerate() {
                let msg = BernoulliMessage {
                    p0: 1.0 - none_elsewhere,
                    p1: 1.0,
                };
                delta = delta.max(msg.max_abs_diff(&self.factor_messages[k][j]));
                self.factor_messages[k][j] = msg;
            }
        }
        delta
    }

    /// Message from `z_m` to factor `k`: likelihood message times all other
    /// factor messages arriving at `z_m`.
    fn variable_to_factor(&self, m: usize, k: usize) -> BernoulliMessage {
        let others: f64 = self.link_factors[m]
            .iter()
            .filter(|&&k2| k2 != k)
            .map(|&k2| self.factor_messages[k2][self.slot(k2, m)].p0)
            .product();
        let l = self.likelihood_messages[m];
        BernoulliMessage::new(l.p0 * others, l.p1)
    }
}

/// `out[i] = Π_{j≠i} v[j]`, exact when some entries are zero.
fn products_without_each(v: &[f64]) -> Vec<f64> {
    let zeros = v.iter().filter(|&&x| x == 0.0).count();
    let nonzero: f64 = v.iter().filter(|&&x| x != 0.0).product();
    v.iter()
        .map(|&x| match (zeros, x == 0.0) {
            (0, _) => nonzero / x,
            (1, true) => nonzero,
            _ => 0.0,
        })
        .collect()
}

/// Folds an episode's sites into the base priors. A base prior may turn
/// improper here; only the full belief (prior plus the remaining sites) has
/// to stay proper.
pub fn evict_episode(episode: &Episode, priors: &[GaussianNatural]) -> Vec<GaussianNatural> {
    priors.iter().zip(&episode.sites).map(|(&p, &s)| p + s).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpConfig {
    pub max_sweeps: usize,
    pub damping: f64,
}

impl Default for EpConfig {
    fn default() -> Self {
        EpConfig {
            max_sweeps: DEFAULT_MAX_SWEEPS,
            damping: DEFAULT_DAMPING,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepDiagnostics {
    pub projection_failures: usize,
    pub skipped_site_updates: usize,
    pub improper_cavities: usize,
    pub max_site_change: f64,
    pub max_message_change: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpDiagnostics {
    pub sweeps: Vec<SweepDiagnostics>,
}

impl EpDiagnostics {
    pub fn total_failures(&self) -> usize {
        self.sweeps
            .iter()
            .map(|s| s.projection_failures + s.skipped_site_updates + s.improper_cavities)
            .sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Base priors plus a bounded queue of episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    base_priors: Vec<GaussianNatural>,
    episodes: VecDeque<Episode>,
    capacity: usize,
}

impl Dataset {
    pub fn new(priors: &[LognormalBelief], capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidParameter("dataset capacity must be positive".into()));
        }
        if let Some(m) = priors.iter().position(|p| !p.is_valid()) {
            return Err(Error::InvalidParameter(format!("prior of link {m} is not a valid belief")));
        }
        Ok(Dataset {
            base_priors: priors.iter().map(LognormalBelief::to_natural).collect(),
            episodes: VecDeque::new(),
            capacity,
        })
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter()
    }

    pub fn base_prior_natural(&self) -> &[GaussianNatural] {
        &self.base_priors
    }

    /// Appends an episode; when over capacity the oldest one is folded into
    /// the base priors and returned.
    pub fn push(&mut self, episode: Episode) -> Result<Option<Episode>> {
        if episode.num_links() != self.base_priors.len() {
            return Err(Error::InvalidParameter("episode link count differs from dataset".into()));
        }
        self.episodes.push_back(episode);
        if self.episodes.len() <= self.capacity {
            return Ok(None);
        }
        let oldest = self.episodes.pop_front().expect("non-empty");
        self.base_priors = evict_episode(&oldest, &self.base_priors);
        Ok(Some(oldest))
    }

    /// Prior plus every site, summed oldest first.
    pub fn belief_natural(&self, m: usize) -> GaussianNatural {
        self.episodes
            .iter()
            .fold(self.base_priors[m], |acc, e| acc + e.sites[m])
    }

    /// Prior plus every site except episode `skip`'s, summed oldest first.
    fn cavity_natural(&self, m: usize, skip: usize) -> GaussianNatural {
        self.episodes
            .iter()
            .enumerate()
            .filter(|(t, _)| *t != skip)
            .fold(self.base_priors[m], |acc, (_, e)| acc + e.sites[m])
    }

    pub fn beliefs(&self) -> Vec<LognormalBelief> {
        (0..self.base_priors.len())
            .map(|m| {
                self.belief_natural(m)
                    .to_belief()
                    .expect("site updates keep beliefs proper")
            })
            .collect()
    }

    /// Runs `config.max_sweeps` EP sweeps over the stored episodes, oldest
    /// first, and returns the updated beliefs.
    pub fn run_ep(&mut self, model: &SigmoidCongestionModel, config: &EpConfig) -> Result<(Vec<LognormalBelief>, EpDiagnostics)> {
        let links = self.base_priors.len();
        if model.num_links() != links {
            return Err(Error::InvalidParameter("congestion model link count differs from dataset".into()));
        }
        if !(config.damping > 0.0 && config.damping <= 1.0) {
            return Err(Error::InvalidParameter(format!("damping {} outside (0, 1]", config.damping)));
        }
        let mut diagnostics = EpDiagnostics::default();
        for _ in 0..config.max_sweeps {
            let mut sweep = SweepDiagnostics::default();
            for t in 0..self.episodes.len() {
                self.update_episode(t, model, config.damping, &mut sweep)?;
            }
            diagnostics.sweeps.push(sweep);
        }
        Ok((self.beliefs(), diagnostics))
    }

    fn update_episode(&mut self, t: usize, model: &SigmoidCongestionModel, damping: f64, sweep: &mut SweepDiagnostics) -> Result<()> {
        let links = self.base_priors.len();
        let cavities: Vec<Option<LognormalBelief>> = (0..links).map(|m| self.cavity_natural(m, t).to_belief()).collect();

        // Likelihood messages from the current cavities.
        let mut rules: Vec<Option<GaussianRule>> = Vec::with_capacity(links);
        for (m, cavity) in cavities.iter().enumerate() {
            let Some(cavity) = cavity else {
                sweep.improper_cavities += 1;
                rules.push(None);
                continue;
            };
            let link = model.link(m);
            let y = self.episodes[t].y[m];
            let rule = GaussianRule::new(cavity.log_mean, cavity.log_var, link.transition(y));
            let p1 = congestion_expectation(&rule, y, link);
            if !p1.is_finite() {
                return Err(Error::Quadrature {
                    log_mean: cavity.log_mean,
                    log_var: cavity.log_var,
                }
                .at_link(m));
            }
            let p1 = p1.clamp(0.0, 1.0);
            let msg = BernoulliMessage::new(1.0 - p1, p1);
            let episode = &mut self.episodes[t];
            sweep.max_message_change = sweep.max_message_change.max(msg.max_abs_diff(&episode.likelihood_messages[m]));
            episode.likelihood_messages[m] = msg;
            rules.push(Some(rule));
        }

        let delta = self.episodes[t].update_factor_messages();
        sweep.max_message_change = sweep.max_message_change.max(delta);

        // Project and refresh the sites.
        for m in 0..links {
            let (Some(cavity), Some(rule)) = (cavities[m], rules[m].as_ref()) else {
                continue;
            };
            let episode = &self.episodes[t];
            let tilted = z_to_b_tilted(episode.constraint_message(m), episode.y[m], model.link(m), cavity);
            let projected = match project_with_rule(&tilted, rule) {
                Ok(p) => p,
                Err(_) => {
                    sweep.projection_failures += 1;
                    continue;
                }
            };
            let old = episode.sites[m];
            match update_site(old, &projected.belief, &cavity, damping) {
                Some(site) => {
                    let change = (site.precision - old.precision).abs().max((site.shift - old.shift).abs());
                    sweep.max_site_change = sweep.max_site_change.max(change);
                    self.episodes[t].sites[m] = site;
                }
                None => sweep.skipped_site_updates += 1,
            }
        }
        Ok(())
    }
}
