//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use ratelearn::belief::LognormalBelief;
use ratelearn::congestion::{feedback_for, SigmoidCongestionModel};
use ratelearn::topology::{NetworkInstance, Topology};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        x.exp() / (1.0 + x.exp())
    }
}

/// The consistency indicator evaluated factor by factor from the routing
/// matrix `a[m][n]`, in integer arithmetic.
pub fn brute_force_consistency(z: &[bool], v: &[bool], a: &[Vec<u8>]) -> bool {
    let (links, users) = (a.len(), v.len());
    let mut psi: u32 = 1;
    for n in 0..users {
        if v[n] {
            // psi1 = 1 - prod_m (1 - a_mn z_m)
            let none: u32 = (0..links).map(|m| 1 - (a[m][n] as u32) * (z[m] as u32)).product();
            psi *= 1 - none;
        }
    }
    for m in 0..links {
        let reporters: u32 = (0..users).map(|n| (a[m][n] as u32) * (v[n] as u32)).sum();
        if reporters == 0 {
            psi *= 1 - z[m] as u32;
        }
    }
    psi == 1
}

/// Moments of a density `g(u) N(u; m, s²)` in `u`, by the composite
/// trapezoid rule on `nodes` points over `[m − 12s, m + 12s]`.
pub struct DenseMoments {
    pub z: f64,
    pub mean: f64,
    pub var: f64,
}

pub fn dense_log_moments(log_mean: f64, log_var: f64, nodes: usize, g: impl Fn(f64) -> f64) -> DenseMoments {
    let sd = log_var.sqrt();
    let (lo, hi) = (log_mean - 12.0 * sd, log_mean + 12.0 * sd);
    let h = (hi - lo) / (nodes - 1) as f64;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * log_var).sqrt();
    let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
    // Two passes for the variance keep cancellation out of the comparison.
    let weight = |i: usize| {
        let u = lo + h * i as f64;
        let end = if i == 0 || i == nodes - 1 { 0.5 } else { 1.0 };
        let d = u - log_mean;
        (u, end * h * norm * (-0.5 * d * d / log_var).exp() * g(u))
    };
    for i in 0..nodes {
        let (u, w) = weight(i);
        s0 += w;
        s1 += w * u;
    }
    let mean = s1 / s0;
    for i in 0..nodes {
        let (u, w) = weight(i);
        s2 += w * (u - mean) * (u - mean);
    }
    DenseMoments { z: s0, mean, var: s2 / s0 }
}

/// Natural-space posterior mean and variance per link by summing over
/// every congestion configuration of every episode, with each capacity on a
/// `grid`-point midpoint grid in `ln b` spanning the prior's ±8 sd.
pub fn enumerate_posterior(
    topology: &Topology,
    priors: &[LognormalBelief],
    model: &SigmoidCongestionModel,
    episodes: &[(Vec<f64>, Vec<bool>)],
    grid: usize,
) -> Vec<ExactMoments> {
    let links = topology.num_links();
    let t_count = episodes.len();
    let grids: Vec<(Vec<f64>, Vec<f64>)> = priors
        .iter()
        .map(|p| {
            let sd = p.log_var.sqrt();
            let (lo, hi) = (p.log_mean - 8.0 * sd, p.log_mean + 8.0 * sd);
            let h = (hi - lo) / grid as f64;
            let u: Vec<f64> = (0..grid).map(|i| lo + h * (i as f64 + 0.5)).collect();
            let w = u
                .iter()
                .map(|x| (-0.5 * (x - p.log_mean).powi(2) / p.log_var).exp())
                .collect();
            (u, w)
        })
        .collect();
    // lik[t][m][z][i]
    let lik: Vec<Vec<[Vec<f64>; 2]>> = episodes
        .iter()
        .map(|(y, _)| {
            (0..links)
                .map(|m| {
                    let link = model.link(m);
                    let p1: Vec<f64> = grids[m]
                        .0
                        .iter()
                        .map(|u| sigmoid(link.kappa * (y[m] - link.rho * u.exp())))
                        .collect();
                    let p0 = p1.iter().map(|p| 1.0 - p).collect();
                    [p0, p1]
                })
                .collect()
        })
        .collect();
    let bits = links * t_count;
    let mut acc = vec![[0.0; 5]; links];
    for cfg in 0u64..(1u64 << bits) {
        let z_of = |t: usize, m: usize| (cfg >> (t * links + m)) & 1 == 1;
        let consistent = episodes.iter().enumerate().all(|(t, (_, v))| {
            let z: Vec<bool> = (0..links).map(|m| z_of(t, m)).collect();
            brute_force_consistency(&z, v, &topology.routing_matrix())
        });
        if !consistent {
            continue;
        }
        let per_link: Vec<Vec<f64>> = (0..links)
            .map(|m| {
                (0..grid)
                    .map(|i| {
                        (0..t_count).fold(grids[m].1[i], |a, t| a * lik[t][m][z_of(t, m) as usize][i])
                    })
                    .collect()
            })
            .collect();
        let mass: Vec<f64> = per_link.iter().map(|g| g.iter().sum()).collect();
        for m in 0..links {
            let others: f64 = (0..links).filter(|&l| l != m).map(|l| mass[l]).product();
            for i in 0..grid {
                let u = grids[m].0[i];
                let b = u.exp();
                let w = others * per_link[m][i];
                let a = &mut acc[m];
                a[0] += w;
                a[1] += w * b;
                a[2] += w * b * b;
                a[3] += w * u;
                a[4] += w * u * u;
            }
        }
    }
    acc.into_iter()
        .map(|[s0, s1, s2, s3, s4]| {
            let mean = s1 / s0;
            let log_mean = s3 / s0;
            ExactMoments {
                mean,
                var: s2 / s0 - mean * mean,
                log_mean,
                log_var: s4 / s0 - log_mean * log_mean,
            }
        })
        .collect()
}

/// Posterior moments of one link, in natural and log space.
#[derive(Debug, Clone, Copy)]
pub struct ExactMoments {
    pub mean: f64,
    pub var: f64,
    pub log_mean: f64,
    pub log_var: f64,
}

/// A small random network with recipe priors, capacities drawn from them,
/// and episodes whose link rates sit around the prior mean.
pub struct SmallCase {
    pub instance: NetworkInstance,
    pub episodes: Vec<(Vec<f64>, Vec<bool>)>,
}

pub fn small_case(seed: u64, max_links: usize, max_users: usize, max_episodes: usize) -> SmallCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (links, routes) = loop {
        let links = rng.random_range(1..=max_links);
        let users = rng.random_range(1..=max_users);
        let routes: Vec<Vec<usize>> = (0..users)
            .map(|_| {
                let mut all: Vec<usize> = (0..links).collect();
                all.shuffle(&mut rng);
                let len = rng.random_range(1..=links);
                all.truncate(len);
                all
            })
            .collect();
        if (0..links).all(|m| routes.iter().any(|r| r.contains(&m))) {
            break (links, routes);
        }
    };
    let topology = Topology::new(links, routes).unwrap();
    let prior: Vec<LognormalBelief> = (0..links)
        .map(|m| {
            let n_m = topology.users_on(m) as f64;
            LognormalBelief::from_natural(2.7 * n_m * 10.0, 0.27 * n_m * 10.0)
        })
        .collect();
    let b_true: Vec<f64> = prior
        .iter()
        .map(|p| (p.log_mean + p.log_var.sqrt() * rng.sample::<f64, _>(StandardNormal)).exp())
        .collect();
    let congestion = SigmoidCongestionModel::from_capacities(&b_true, 0.95, 5.0);
    let w = vec![1.0; topology.num_users()];
    let instance = NetworkInstance {
        seed,
        topology,
        b_true,
        w,
        prior,
        congestion,
    };
    let count = rng.random_range(1..=max_episodes);
    let episodes = (0..count)
        .map(|_| {
            let y: Vec<f64> = instance
                .prior
                .iter()
                .map(|p| p.natural_mean() * rng.random_range(0.85..1.05))
                .collect();
            let z: Vec<bool> = (0..links)
                .map(|m| {
                    let p = instance.congestion.link(m).congestion_probability(y[m], instance.b_true[m]);
                    rng.random_bool(p)
                })
                .collect();
            let v = feedback_for(&z, &instance.topology, &mut rng);
            (y, v)
        })
        .collect();
    SmallCase { instance, episodes }
}
