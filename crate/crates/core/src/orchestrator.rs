//! The closed loop: rate allocation, feedback collection, capacity
//! inference and the choice of the next capacity estimate.
//!
//! Every step runs one primal–dual round. Every `sample_period` steps the
//! environment emits feedback, which is stored as an episode; if the prices
//! have settled by then (or too many steps passed since the last update) the
//! beliefs are refreshed by EP and a new `b̂` is handed to the inner loop.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::belief::LognormalBelief;
use crate::congestion::sample_feedback;
use crate::consensus::{assign_classes, CommGraph, ConsensusConfig, DEFAULT_AVERAGE_DEGREE};
use crate::ep::{Dataset, EpConfig, Episode, DEFAULT_DATASET_CAPACITY};
use crate::error::{Error, Result};
use crate::inner::{self, InnerState, DEFAULT_V_LAMBDA, STEP_SCALE};
use crate::meanfield::{invert_class_probability, optimize_policy, representative_link, MeanFieldPolicy, PolicyGrid};
use crate::metrics::{e_links, e_users};
use crate::topology::{graph_stats, NetworkInstance};

pub const DEFAULT_SAMPLE_PERIOD: usize = 25;
pub const DEFAULT_OUTER_PERIOD_CAP: usize = 200;
/// Prices below this count as zero when spotting underutilised links.
pub const UNDERUTILISED_PRICE: f64 = 1e-6;

/// Which decision rule sets `b̂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySpec {
    Greedy,
    Foresighted { gamma: f64 },
}

impl PolicySpec {
    pub fn label(&self) -> String {
        match self {
            PolicySpec::Greedy => "greedy".into(),
            PolicySpec::Foresighted { gamma } => format!("foresighted-{gamma}"),
        }
    }
}

/// The resolved decision rule of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Policy {
    Greedy,
    Foresighted(MeanFieldPolicy),
}

impl Policy {
    /// Optimises the class parameters from the instance priors. A zero
    /// discount leaves only the immediate risk, which the greedy rule
    /// minimises exactly.
    pub fn resolve(spec: &PolicySpec, instance: &NetworkInstance) -> Result<Self> {
        match *spec {
            PolicySpec::Greedy => Ok(Policy::Greedy),
            PolicySpec::Foresighted { gamma: 0.0 } => Ok(Policy::Greedy),
            PolicySpec::Foresighted { gamma } => {
                Ok(Policy::Foresighted(optimise_for(&instance.prior, instance, gamma)?))
            }
        }
    }
}

fn optimise_for(beliefs: &[LognormalBelief], instance: &NetworkInstance, gamma: f64) -> Result<MeanFieldPolicy> {
    let (belief, link) = representative_link(beliefs, &instance.congestion.kappa, instance.congestion.rho)?;
    let stats = graph_stats(&instance.topology);
    optimize_policy(&belief, link, stats, gamma, &PolicyGrid::for_links(instance.num_links()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub total_steps: usize,
    pub sample_period: usize,
    pub dataset_capacity: usize,
    pub v_lambda: f64,
    /// Dual step numerator, `εₘ = step_scale / b̂ₘ`.
    pub step_scale: f64,
    pub outer_period_cap: usize,
    pub ep: EpConfig,
    pub consensus: ConsensusConfig,
    pub comm_average_degree: f64,
    /// Re-run the policy grid search from the current beliefs at every
    /// outer update instead of once at start.
    pub reoptimise_policy: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            total_steps: 1800,
            sample_period: DEFAULT_SAMPLE_PERIOD,
            dataset_capacity: DEFAULT_DATASET_CAPACITY,
            v_lambda: DEFAULT_V_LAMBDA,
            step_scale: STEP_SCALE,
            outer_period_cap: DEFAULT_OUTER_PERIOD_CAP,
            ep: EpConfig::default(),
            consensus: ConsensusConfig::default(),
            comm_average_degree: DEFAULT_AVERAGE_DEGREE,
            reoptimise_policy: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(what.to_string()));
        if self.total_steps == 0 {
            return bad("total_steps must be at least 1");
        }
        if self.sample_period == 0 || self.dataset_capacity == 0 || self.outer_period_cap == 0 {
            return bad("sample_period, dataset_capacity and outer_period_cap must be positive");
        }
        if !(self.v_lambda > 0.0 && self.step_scale > 0.0) {
            return bad("v_lambda and step_scale must be positive");
        }
        Ok(())
    }
}

/// One trace row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub outer_updates: usize,
    pub e_links: f64,
    pub e_users: f64,
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub b_hat: Vec<f64>,
    pub y: Vec<f64>,
    pub lambda: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunCounters {
    pub outer_updates: usize,
    pub forced_outer_updates: usize,
    pub episodes_stored: usize,
    pub ep_failures: usize,
    pub consensus_fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub links: usize,
    pub policy: Policy,
    pub rows: Vec<StepRecord>,
    pub counters: RunCounters,
}

impl Trace {
    pub fn last(&self) -> Option<&StepRecord> {
        self.rows.last()
    }

    /// Row for inner step `t` (1-based).
    pub fn at(&self, t: usize) -> Option<&StepRecord> {
        t.checked_sub(1).and_then(|i| self.rows.get(i))
    }

    pub fn header(links: usize) -> Vec<String> {
        let mut h: Vec<String> = ["t", "outer_updates", "e_links", "e_users"].map(String::from).to_vec();
        for name in ["mu", "sigma2", "b_hat", "y", "lambda"] {
            h.extend((0..links).map(|m| format!("{name}_{m}")));
        }
        h
    }

    /// One row per step: the counters, both errors, then each per-link
    /// series flattened in link order.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::header(self.links))?;
        for r in &self.rows {
            let mut rec = vec![r.t.to_string(), r.outer_updates.to_string(), r.e_links.to_string(), r.e_users.to_string()];
            for series in [&r.mu, &r.sigma2, &r.b_hat, &r.y, &r.lambda] {
                rec.extend(series.iter().map(f64::to_string));
            }
            w.write_record(rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<StepRecord>> {
        let mut reader = csv::Reader::from_reader(input);
        let links = (reader.headers()?.len() - 4) / 5;
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::InvalidInstance(format!("trace value {s:?}: {e}")))
        };
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            let f: Vec<&str> = rec.iter().collect();
            let series = |k: usize| -> Result<Vec<f64>> { f[4 + k * links..4 + (k + 1) * links].iter().map(|s| parse(s)).collect() };
            rows.push(StepRecord {
                t: parse(f[0])? as usize,
                outer_updates: parse(f[1])? as usize,
                e_links: parse(f[2])?,
                e_users: parse(f[3])?,
                mu: series(0)?,
                sigma2: series(1)?,
                b_hat: series(2)?,
                y: series(3)?,
                lambda: series(4)?,
            });
        }
        Ok(rows)
    }
}

/// A run that stopped on an error, with everything recorded so far.
#[derive(Debug, thiserror::Error)]
#[error("run aborted at step {step}: {error}")]
pub struct RunFailure {
    pub step: usize,
    pub error: Error,
    pub partial: Trace,
}

/// Mutable state of one closed-loop run.
#[derive(Debug, Clone)]
pub struct RunState {
    pub inner: InnerState,
    pub dataset: Dataset,
    pub beliefs: Vec<LognormalBelief>,
    pub b_hat: Vec<f64>,
    pub t: usize,
    pub last_outer: usize,
    pub counters: RunCounters,
    caps: Vec<f64>,
    graph: CommGraph,
    rng: ChaCha8Rng,
}

impl RunState {
    /// Starts at the prior mean. Feedback and the communication graph use
    /// separate streams of the run seed so every policy sees the same graph.
    pub fn new(instance: &NetworkInstance, config: &RunConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        instance.validate()?;
        let b_hat = instance.prior_means();
        let mut inner = InnerState::new(instance, &b_hat)?;
        inner.set_step_scale(config.step_scale);
        let mut graph_rng = ChaCha8Rng::seed_from_u64(seed);
        graph_rng.set_stream(1);
        Ok(RunState {
            inner,
            dataset: Dataset::new(&instance.prior, config.dataset_capacity)?,
            beliefs: instance.prior.clone(),
            b_hat,
            t: 0,
            last_outer: 0,
            counters: RunCounters::default(),
            caps: instance.rate_caps(),
            graph: CommGraph::random(instance.num_links(), config.comm_average_degree, &mut graph_rng),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn comm_graph(&self) -> &CommGraph {
        &self.graph
    }

    /// Stores the current link rates and the sampled feedback as an episode.
    pub fn record_observation(&mut self, instance: &NetworkInstance) -> Result<()> {
        let feedback = sample_feedback(&self.inner.y, instance, &mut self.rng);
        let episode = Episode::new(self.inner.y.clone(), &feedback.v, &instance.topology)?;
        self.dataset.push(episode)?;
        self.counters.episodes_stored += 1;
        Ok(())
    }

    /// EP on the stored episodes, then a new capacity estimate.
    pub fn outer_update(&mut self, policy: &mut Policy, instance: &NetworkInstance, config: &RunConfig) -> Result<()> {
        let (beliefs, diagnostics) = self.dataset.run_ep(&instance.congestion, &config.ep)?;
        self.counters.ep_failures += diagnostics.total_failures();
        self.beliefs = beliefs;
        self.b_hat = match policy {
            Policy::Greedy => self.beliefs.iter().map(LognormalBelief::natural_mean).collect(),
            Policy::Foresighted(p) => {
                if config.reoptimise_policy {
                    *p = optimise_for(&self.beliefs, instance, p.gamma)?;
                }
                self.foresighted_estimate(p, instance, config)?
            }
        };
        self.inner.set_b_hat(&self.b_hat);
        self.counters.outer_updates += 1;
        self.last_outer = self.t;
        Ok(())
    }

    fn foresighted_estimate(&mut self, policy: &MeanFieldPolicy, instance: &NetworkInstance, config: &RunConfig) -> Result<Vec<f64>> {
        let sigma2: Vec<f64> = self
            .beliefs
            .iter()
            .zip(&self.inner.lambda)
            .map(|(b, &l)| if l < UNDERUTILISED_PRICE { 0.0 } else { b.natural_var() })
            .collect();
        let assignment = assign_classes(&sigma2, policy.alpha, &self.graph, &config.consensus)?;
        if assignment.fallback {
            self.counters.consensus_fallbacks += 1;
        }
        assignment
            .labels
            .iter()
            .enumerate()
            .map(|(m, &class_a)| {
                let target = if class_a { policy.p_a1 } else { policy.p_b1 };
                invert_class_probability(target, &self.beliefs[m], instance.congestion.link(m)).map_err(|e| e.at_link(m))
            })
            .collect()
    }

    /// One inner step plus whatever sampling and outer update falls on it.
    pub fn advance(&mut self, policy: &mut Policy, instance: &NetworkInstance, config: &RunConfig) -> Result<()> {
        self.t += 1;
        inner::step_in_place(&mut self.inner, instance, &self.caps);
        if self.t.is_multiple_of(config.sample_period) {
            self.record_observation(instance)?;
            let settled = self.inner.has_converged(config.v_lambda);
            let overdue = self.t - self.last_outer >= config.outer_period_cap;
            if settled || overdue {
                if !settled {
                    self.counters.forced_outer_updates += 1;
                }
                self.outer_update(policy, instance, config)?;
            }
        }
        Ok(())
    }

    pub fn record(&self, x_star: &[f64], b_true: &[f64]) -> StepRecord {
        let mu: Vec<f64> = self.beliefs.iter().map(LognormalBelief::natural_mean).collect();
        StepRecord {
            t: self.t,
            outer_updates: self.counters.outer_updates,
            e_links: e_links(&mu, b_true),
            e_users: e_users(&self.inner.x, x_star),
            sigma2: self.beliefs.iter().map(LognormalBelief::natural_var).collect(),
            mu,
            b_hat: self.b_hat.clone(),
            y: self.inner.y.clone(),
            lambda: self.inner.lambda.clone(),
        }
    }
}

/// Runs the closed loop for `config.total_steps` steps. `x_star` is the
/// optimal rate vector for the true capacities ([`inner::oracle_rates`]).
pub fn run_with_oracle(
    instance: &NetworkInstance,
    policy: Policy,
    config: &RunConfig,
    seed: u64,
    x_star: &[f64],
) -> std::result::Result<Trace, Box<RunFailure>> {
    let mut policy = policy;
    let mut trace = Trace {
        links: instance.num_links(),
        policy: policy.clone(),
        rows: Vec::with_capacity(config.total_steps),
        counters: RunCounters::default(),
    };
    let fail = |step: usize, error: Error, trace: Trace| Box::new(RunFailure { step, error, partial: trace });
    let mut state = match RunState::new(instance, config, seed) {
        Ok(s) => s,
        Err(e) => return Err(fail(0, e, trace)),
    };
    for _ in 0..config.total_steps {
        if let Err(e) = state.advance(&mut policy, instance, config) {
            trace.counters = state.counters.clone();
            return Err(fail(state.t, e, trace));
        }
        trace.rows.push(state.record(x_star, &instance.b_true));
    }
    trace.counters = state.counters;
    trace.policy = policy;
    Ok(trace)
}

pub fn run(instance: &NetworkInstance, spec: &PolicySpec, config: &RunConfig, seed: u64) -> std::result::Result<Trace, Box<RunFailure>> {
    let empty = |error: Error| {
        Box::new(RunFailure {
            step: 0,
            error,
            partial: Trace {
                links: instance.num_links(),
                policy: Policy::Greedy,
                rows: Vec::new(),
                counters: RunCounters::default(),
            },
        })
    };
    let x_star = inner::oracle_rates(instance).map_err(empty)?.state.x;
    let policy = Policy::resolve(spec, instance).map_err(empty)?;
    run_with_oracle(instance, policy, config, seed, &x_star)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::generate_network;

    #[test]
    fn greedy_estimates_follow_belief_means() {
        let inst = generate_network(3, 6, 40, 2).unwrap();
        let config = RunConfig {
            total_steps: 300,
            ..RunConfig::default()
        };
        let trace = run(&inst, &PolicySpec::Greedy, &config, 3).unwrap();
        assert!(trace.counters.outer_updates > 0);
        for r in &trace.rows {
            if r.outer_updates > 0 {
                assert_eq!(r.b_hat, r.mu);
            }
        }
    }

    #[test]
    fn zero_discount_is_greedy() {
        let inst = generate_network(4, 6, 40, 2).unwrap();
        assert_eq!(Policy::resolve(&PolicySpec::Foresighted { gamma: 0.0 }, &inst).unwrap(), Policy::Greedy);
    }

    #[test]
    fn observations_are_stored_every_sample_period() {
        let inst = generate_network(5, 6, 40, 2).unwrap();
        let config = RunConfig::default();
        let mut state = RunState::new(&inst, &config, 5).unwrap();
        let mut policy = Policy::Greedy;
        let mut stored = Vec::new();
        for _ in 0..80 {
            let before = state.counters.episodes_stored;
            state.advance(&mut policy, &inst, &config).unwrap();
            if state.counters.episodes_stored > before {
                stored.push(state.t);
            }
        }
        assert_eq!(stored, vec![25, 50, 75]);
    }

    #[test]
    fn trace_csv_round_trips() {
        let inst = generate_network(6, 4, 20, 2).unwrap();
        let config = RunConfig {
            total_steps: 60,
            ..RunConfig::default()
        };
        let trace = run(&inst, &PolicySpec::Greedy, &config, 1).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let rows = Trace::read_csv(buf.as_slice()).unwrap();
        assert_eq!(rows, trace.rows);
    }
}
