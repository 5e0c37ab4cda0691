//! Seeded experiment campaigns: one closed-loop run per (network size,
//! seed, policy), per-run trace files, per-curve averages and a summary.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! config.json                      the resolved configuration
//! runs/<policy>_M<links>_seed<s>.csv   one trace per run
//! curves/<policy>_M<links>.csv     per-step mean and std of both errors
//! summary.json                     final-snapshot statistics and failures
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inner::oracle_rates;
use crate::orchestrator::{run_with_oracle, Policy, PolicySpec, RunConfig, RunCounters, Trace};
use crate::topology::{generate_network_with, GeneratorOptions, NetworkInstance};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSize {
    pub links: usize,
    pub users: usize,
    pub target_route_length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub networks: Vec<NetworkSize>,
    pub policies: Vec<PolicySpec>,
    pub seeds: Vec<u64>,
    pub run: RunConfig,
    pub generator: GeneratorOptions,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            format_version: CONFIG_FORMAT_VERSION,
            networks: vec![NetworkSize {
                links: 12,
                users: 200,
                target_route_length: 4,
            }],
            policies: vec![PolicySpec::Greedy, PolicySpec::Foresighted { gamma: 0.99 }],
            seeds: (0..10).collect(),
            run: RunConfig::default(),
            generator: GeneratorOptions::default(),
            output_dir: PathBuf::from("results"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(Error::InvalidParameter(format!(
                "config format version {} is not supported (expected {CONFIG_FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidParameter("seed list is empty".into()));
        }
        if self.networks.is_empty() || self.policies.is_empty() {
            return Err(Error::InvalidParameter("network and policy lists must not be empty".into()));
        }
        for p in &self.policies {
            if let PolicySpec::Foresighted { gamma } = p {
                if !(0.0..1.0).contains(gamma) {
                    return Err(Error::InvalidParameter(format!("gamma {gamma} outside [0, 1)")));
                }
            }
        }
        self.run.validate()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation; zero for a single value.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(MeanStd { mean, std })
    }
}

/// Final-step metrics of one completed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub policy: String,
    pub links: usize,
    pub seed: u64,
    pub t: usize,
    pub e_links: f64,
    pub e_users: f64,
    pub counters: RunCounters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailureRecord {
    pub policy: String,
    pub links: usize,
    pub seed: u64,
    pub step: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub policy: String,
    pub links: usize,
    pub users: usize,
    pub completed: usize,
    pub final_e_links: Option<MeanStd>,
    pub final_e_users: Option<MeanStd>,
    pub runs: Vec<MetricPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub format_version: u32,
    pub groups: Vec<GroupSummary>,
    pub failures: Vec<RunFailureRecord>,
}

impl CampaignSummary {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

struct Job {
    size: NetworkSize,
    seed: u64,
    policy: PolicySpec,
}

enum JobOutcome {
    Done(Trace),
    Failed { step: usize, error: String, partial: Option<Trace> },
}

pub fn run_file_name(policy: &PolicySpec, links: usize, seed: u64) -> String {
    format!("{}_M{links}_seed{seed}.csv", policy.label())
}

pub fn curve_file_name(policy: &PolicySpec, links: usize) -> String {
    format!("{}_M{links}.csv", policy.label())
}

fn prepare(size: NetworkSize, seed: u64, options: &GeneratorOptions) -> Result<(NetworkInstance, Vec<f64>)> {
    let instance = generate_network_with(seed, size.links, size.users, size.target_route_length, options)?;
    let x_star = oracle_rates(&instance)?.state.x;
    Ok((instance, x_star))
}

fn run_job(job: &Job, prepared: &Result<(NetworkInstance, Vec<f64>)>, run: &RunConfig) -> JobOutcome {
    let (instance, x_star) = match prepared {
        Ok(p) => p,
        Err(e) => {
            return JobOutcome::Failed {
                step: 0,
                error: e.to_string(),
                partial: None,
            }
        }
    };
    let policy = match Policy::resolve(&job.policy, instance) {
        Ok(p) => p,
        Err(e) => {
            return JobOutcome::Failed {
                step: 0,
                error: e.to_string(),
                partial: None,
            }
        }
    };
    match run_with_oracle(instance, policy, run, job.seed, x_star) {
        Ok(trace) => JobOutcome::Done(trace),
        Err(f) => JobOutcome::Failed {
            step: f.step,
            error: f.error.to_string(),
            partial: Some(f.partial),
        },
    }
}

/// Runs every (network, seed, policy) combination in parallel and writes
/// the result files. A failing run is recorded in the summary and its
/// partial trace is still written; the other runs carry on.
pub fn run_campaign(config: &ExperimentConfig) -> Result<CampaignSummary> {
    config.validate()?;
    let out = &config.output_dir;
    let runs_dir = out.join("runs");
    let curves_dir = out.join("curves");
    fs::create_dir_all(&runs_dir)?;
    fs::create_dir_all(&curves_dir)?;
    config.save(out.join("config.json"))?;

    let instances: Vec<(NetworkSize, u64)> = config
        .networks
        .iter()
        .flat_map(|&size| config.seeds.iter().map(move |&seed| (size, seed)))
        .collect();
    let prepared: Vec<_> = instances
        .par_iter()
        .map(|&(size, seed)| prepare(size, seed, &config.generator))
        .collect();
    let jobs: Vec<(usize, Job)> = instances
        .iter()
        .enumerate()
        .flat_map(|(i, &(size, seed))| {
            config.policies.iter().map(move |p| {
                (
                    i,
                    Job {
                        size,
                        seed,
                        policy: p.clone(),
                    },
                )
            })
        })
        .collect();

    let outcomes: Vec<Result<JobOutcome>> = jobs
        .par_iter()
        .map(|(i, job)| {
            let outcome = run_job(job, &prepared[*i], &config.run);
            let trace = match &outcome {
                JobOutcome::Done(t) => Some(t),
                JobOutcome::Failed { partial, .. } => partial.as_ref(),
            };
            if let Some(trace) = trace {
                let file = fs::File::create(runs_dir.join(run_file_name(&job.policy, job.size.links, job.seed)))?;
                trace.write_csv(std::io::BufWriter::new(file))?;
            }
            Ok(outcome)
        })
        .collect();

    let mut failures = Vec::new();
    let mut groups = Vec::new();
    for size in &config.networks {
        for policy in &config.policies {
            let mut traces = Vec::new();
            let mut runs = Vec::new();
            for ((_, job), outcome) in jobs.iter().zip(&outcomes) {
                if job.size != *size || job.policy != *policy {
                    continue;
                }
                match outcome.as_ref().map_err(|e| Error::InvalidInstance(e.to_string()))? {
                    JobOutcome::Done(trace) => {
                        let last = trace.last().expect("runs have at least one step");
                        runs.push(MetricPoint {
                            policy: policy.label(),
                            links: size.links,
                            seed: job.seed,
                            t: last.t,
                            e_links: last.e_links,
                            e_users: last.e_users,
                            counters: trace.counters.clone(),
                        });
                        traces.push(trace);
                    }
                    JobOutcome::Failed { step, error, .. } => failures.push(RunFailureRecord {
                        policy: policy.label(),
                        links: size.links,
                        seed: job.seed,
                        step: *step,
                        error: error.clone(),
                    }),
                }
            }
            write_curve(&curves_dir.join(curve_file_name(policy, size.links)), &traces)?;
            let finals = |f: fn(&MetricPoint) -> f64| MeanStd::of(&runs.iter().map(f).collect::<Vec<_>>());
            groups.push(GroupSummary {
                policy: policy.label(),
                links: size.links,
                users: size.users,
                completed: runs.len(),
                final_e_links: finals(|r| r.e_links),
                final_e_users: finals(|r| r.e_users),
                runs,
            });
        }
    }
    let summary = CampaignSummary {
        format_version: CONFIG_FORMAT_VERSION,
        groups,
        failures,
    };
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

fn write_curve(path: &Path, traces: &[&Trace]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "runs", "e_links_mean", "e_links_std", "e_users_mean", "e_users_std"])?;
    let steps = traces.iter().map(|t| t.rows.len()).max().unwrap_or(0);
    for i in 0..steps {
        let rows: Vec<_> = traces.iter().filter_map(|t| t.rows.get(i)).collect();
        let links = MeanStd::of(&rows.iter().map(|r| r.e_links).collect::<Vec<_>>()).expect("non-empty");
        let users = MeanStd::of(&rows.iter().map(|r| r.e_users).collect::<Vec<_>>()).expect("non-empty");
        w.write_record([
            rows[0].t.to_string(),
            rows.len().to_string(),
            links.mean.to_string(),
            links.std.to_string(),
            users.mean.to_string(),
            users.std.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
