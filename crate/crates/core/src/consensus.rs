//! Distributed choice of the highest-variance links for class A.
//!
//! Every link process keeps its own copy of the dual variable `h` of the
//! cardinality constraint and its own estimate `r̂` of the fraction of links
//! currently in class A. Each round a link joins class A iff its variance
//! exceeds its `h`, then both tracks are mixed with the neighbours through
//! `I − L` (dynamic average consensus on `r̂`, projected dual ascent on `h`).

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_V_H: f64 = 1e-3;
pub const DEFAULT_MAX_ITERS: usize = 5000;
/// `δ_i = DEFAULT_DELTA_SCALE / √i`.
pub const DEFAULT_DELTA_SCALE: f64 = 0.1;
pub const DEFAULT_AVERAGE_DEGREE: f64 = 4.0;

/// Undirected connected graph over the link processes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EdgeList", into = "EdgeList")]
pub struct CommGraph {
    nodes: usize,
    edges: Vec<(usize, usize)>,
    neighbours: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct EdgeList {
    nodes: usize,
    edges: Vec<(usize, usize)>,
}

impl TryFrom<EdgeList> for CommGraph {
    type Error = Error;
    fn try_from(raw: EdgeList) -> Result<Self> {
        CommGraph::new(raw.nodes, raw.edges)
    }
}

impl From<CommGraph> for EdgeList {
    fn from(g: CommGraph) -> Self {
        EdgeList {
            nodes: g.nodes,
            edges: g.edges,
        }
    }
}

impl CommGraph {
    pub fn new(nodes: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        if nodes == 0 {
            return Err(Error::InvalidParameter("communication graph needs a node".into()));
        }
        let mut neighbours = vec![Vec::new(); nodes];
        for &(u, v) in &edges {
            if u >= nodes || v >= nodes || u == v || neighbours[u].contains(&v) {
                return Err(Error::InvalidParameter(format!("bad edge ({u}, {v})")));
            }
            neighbours[u].push(v);
            neighbours[v].push(u);
        }
        let graph = CommGraph { nodes, edges, neighbours };
        if !graph.is_connected() {
            return Err(Error::InvalidParameter("communication graph is not connected".into()));
        }
        Ok(graph)
    }

    pub fn complete(nodes: usize) -> Self {
        let edges = (0..nodes)
            .flat_map(|u| (u + 1..nodes).map(move |v| (u, v)))
            .collect();
        CommGraph::new(nodes, edges).expect("complete graph is valid")
    }

    /// Random spanning tree plus random extra edges until the average degree
    /// reaches `average_degree` (or the graph is complete).
    pub fn random<R: Rng + ?Sized>(nodes: usize, average_degree: f64, rng: &mut R) -> Self {
        let nodes = nodes.max(1);
        let mut order: Vec<usize> = (0..nodes).collect();
        order.shuffle(rng);
        let mut present = vec![vec![false; nodes]; nodes];
        let mut edges = Vec::new();
        for i in 1..nodes {
            let (u, v) = (order[i], order[rng.random_range(0..i)]);
            present[u][v] = true;
            present[v][u] = true;
            edges.push((u.min(v), u.max(v)));
        }
        let max_edges = nodes * (nodes - 1) / 2;
        let wanted = ((average_degree * nodes as f64 / 2.0).round() as usize).min(max_edges);
        while edges.len() < wanted {
            let (u, v) = (rng.random_range(0..nodes), rng.random_range(0..nodes));
            if u != v && !present[u][v] {
                present[u][v] = true;
                present[v][u] = true;
                edges.push((u.min(v), u.max(v)));
            }
        }
        CommGraph::new(nodes, edges).expect("spanning tree keeps the graph connected")
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn max_degree(&self) -> usize {
        self.neighbours.iter().map(Vec::len).max().unwrap_or(0)
    }

    fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.nodes];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &v in &self.neighbours[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// `L = (D − Adj) / (max_degree + 1)` as a dense matrix.
    pub fn laplacian(&self) -> Vec<Vec<f64>> {
        let scale = 1.0 / (self.max_degree() + 1) as f64;
        let mut l = vec![vec![0.0; self.nodes]; self.nodes];
        for (u, nb) in self.neighbours.iter().enumerate() {
            l[u][u] = nb.len() as f64 * scale;
            for &v in nb {
                l[u][v] = -scale;
            }
        }
        l
    }

    /// `(I − L) x`.
    pub fn mix(&self, x: &[f64]) -> Vec<f64> {
        let scale = 1.0 / (self.max_degree() + 1) as f64;
        self.neighbours
            .iter()
            .enumerate()
            .map(|(u, nb)| x[u] + scale * nb.iter().map(|&v| x[v] - x[u]).sum::<f64>())
            .collect()
    }
}

/// Class A iff the variance beats the local dual variable; ties go to B.
pub fn local_class_choice(sigma2: f64, h: f64) -> bool {
    sigma2 > h
}

/// Number of class-A links: `round(αM)`, at least one.
pub fn class_a_count(alpha: f64, links: usize) -> usize {
    ((alpha * links as f64).round() as usize).clamp(1, links.max(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusState {
    pub r: Vec<bool>,
    pub r_hat: Vec<f64>,
    pub h: Vec<f64>,
    pub iteration: usize,
}

impl ConsensusState {
    /// Null initial conditions.
    pub fn new(links: usize) -> Self {
        ConsensusState {
            r: vec![false; links],
            r_hat: vec![0.0; links],
            h: vec![0.0; links],
            iteration: 0,
        }
    }
}

/// One synchronous round with step `δ_i = delta_scale / √i`.
pub fn consensus_step(state: &ConsensusState, graph: &CommGraph, sigma2: &[f64], alpha: f64, delta_scale: f64) -> ConsensusState {
    let i = state.iteration + 1;
    let delta = delta_scale / (i as f64).sqrt();
    let r: Vec<bool> = sigma2
        .iter()
        .zip(&state.h)
        .map(|(&s, &h)| local_class_choice(s, h))
        .collect();
    let mut r_hat = graph.mix(&state.r_hat);
    for ((rh, &new), &old) in r_hat.iter_mut().zip(&r).zip(&state.r) {
        *rh += new as u8 as f64 - old as u8 as f64;
    }
    let h = graph
        .mix(&state.h)
        .into_iter()
        .zip(&state.r_hat)
        .map(|(mixed, &rh)| (mixed + delta * (rh - alpha)).max(0.0))
        .collect();
    ConsensusState {
        r,
        r_hat,
        h,
        iteration: i,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsensusConfig {
    pub v_h: f64,
    pub max_iters: usize,
    pub delta_scale: f64,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        ConsensusConfig {
            v_h: DEFAULT_V_H,
            max_iters: DEFAULT_MAX_ITERS,
            delta_scale: DEFAULT_DELTA_SCALE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `true` for class A.
    pub labels: Vec<bool>,
    pub iterations: usize,
    pub converged: bool,
    /// The labels come from the centralised selection.
    pub fallback: bool,
}

/// The `k` largest positive variances, ties to the lower index.
pub fn centralized_top_k(sigma2: &[f64], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..sigma2.len()).filter(|&m| sigma2[m] > 0.0).collect();
    order.sort_by(|&a, &b| sigma2[b].total_cmp(&sigma2[a]).then(a.cmp(&b)));
    let mut labels = vec![false; sigma2.len()];
    for &m in order.iter().take(k) {
        labels[m] = true;
    }
    labels
}

/// Runs the consensus until the dual copies are settled and agree and every
/// local estimate of the class-A fraction rounds to the target count.
/// Without convergence, or if the converged labels have the wrong size, the
/// centralised selection is returned instead.
pub fn assign_classes(sigma2: &[f64], alpha: f64, graph: &CommGraph, config: &ConsensusConfig) -> Result<Assignment> {
    let links = sigma2.len();
    if graph.nodes() != links {
        return Err(Error::InvalidParameter("graph size differs from link count".into()));
    }
    if let Some(m) = sigma2.iter().position(|s| !(*s >= 0.0 && s.is_finite())) {
        return Err(Error::InvalidParameter(format!("variance of link {m} is {}", sigma2[m])));
    }
    let k = class_a_count(alpha, links);
    let positive = sigma2.iter().filter(|&&s| s > 0.0).count();
    let expected = k.min(positive);
    let top = sigma2.iter().cloned().fold(0.0, f64::max);
    if top == 0.0 {
        return Ok(Assignment {
            labels: vec![false; links],
            iterations: 0,
            converged: true,
            fallback: false,
        });
    }
    // Scaling by the maximum keeps h on a unit scale and preserves the order.
    let scaled: Vec<f64> = sigma2.iter().map(|s| s / top).collect();
    let target = k as f64 / links as f64;
    let band = 0.5 / links as f64;

    let mut state = ConsensusState::new(links);
    for _ in 0..config.max_iters {
        let next = consensus_step(&state, graph, &scaled, target, config.delta_scale);
        let settled = next.h.iter().zip(&state.h).all(|(a, b)| (a - b).abs() <= config.v_h);
        let (lo, hi) = next
            .h
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &h| (lo.min(h), hi.max(h)));
        let agreed = hi - lo <= config.v_h;
        let at_target = next.r_hat.iter().all(|r| (r - target).abs() < band);
        let idle = next.h.iter().all(|&h| h == 0.0) && state.h.iter().all(|&h| h == 0.0) && next.r == state.r;
        state = next;
        if settled && agreed && (at_target || idle) {
            let labels = state.r.clone();
            let size_ok = labels.iter().filter(|&&r| r).count() == expected;
            return Ok(Assignment {
                labels: if size_ok { labels } else { centralized_top_k(sigma2, k) },
                iterations: state.iteration,
                converged: true,
                fallback: !size_ok,
            });
        }
    }
    Ok(Assignment {
        labels: centralized_top_k(sigma2, k),
        iterations: state.iteration,
        converged: false,
        fallback: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn local_choice_examples() {
        assert!(local_class_choice(3.0, 1.0));
        assert!(!local_class_choice(0.0, 0.0));
        assert!(!local_class_choice(1.0, 2.0));
    }

    #[test]
    fn laplacian_rows_sum_to_zero_and_mixing_is_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = CommGraph::random(12, 4.0, &mut rng);
        for (u, row) in g.laplacian().iter().enumerate() {
            assert!(row.iter().sum::<f64>().abs() < 1e-15);
            assert!(1.0 - row[u] >= 0.0);
            for (v, &x) in row.iter().enumerate() {
                assert_eq!(x, g.laplacian()[v][u]);
            }
        }
        let x: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let total: f64 = g.mix(&x).iter().sum();
        assert!((total - 66.0).abs() < 1e-12);
    }

    #[test]
    fn random_graph_has_target_degree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = CommGraph::random(20, 4.0, &mut rng);
        assert_eq!(g.edges().len(), 40);
        let small = CommGraph::random(3, 4.0, &mut rng);
        assert_eq!(small.edges().len(), 3);
    }

    #[test]
    fn two_links_on_complete_graph() {
        let a = assign_classes(&[5.0, 1.0], 0.5, &CommGraph::complete(2), &ConsensusConfig::default()).unwrap();
        assert_eq!(a.labels, vec![true, false]);
        assert!(a.converged && !a.fallback);
    }

    #[test]
    fn single_link() {
        let a = assign_classes(&[0.7], 0.5, &CommGraph::complete(1), &ConsensusConfig::default()).unwrap();
        assert_eq!(a.labels, vec![true]);
    }

    #[test]
    fn triangle_picks_the_largest() {
        let a = assign_classes(&[3.0, 1.0, 2.0], 1.0 / 3.0, &CommGraph::complete(3), &ConsensusConfig::default()).unwrap();
        assert_eq!(a.labels, vec![true, false, false]);
    }

    #[test]
    fn underutilised_links_stay_in_class_b() {
        let g = CommGraph::complete(4);
        let a = assign_classes(&[0.0, 2.0, 0.0, 0.0], 0.5, &g, &ConsensusConfig::default()).unwrap();
        assert_eq!(a.labels, vec![false, true, false, false]);
        let none = assign_classes(&[0.0; 4], 0.5, &g, &ConsensusConfig::default()).unwrap();
        assert_eq!(none.labels, vec![false; 4]);
    }

    #[test]
    fn centralized_breaks_ties_by_index() {
        assert_eq!(centralized_top_k(&[1.0, 2.0, 2.0, 0.5], 2), vec![false, true, true, false]);
        assert_eq!(centralized_top_k(&[1.0, 1.0, 1.0], 2), vec![true, true, false]);
        assert_eq!(centralized_top_k(&[0.0, 1.0, 0.0], 2), vec![false, true, false]);
    }

    #[test]
    fn class_a_count_rounds_with_floor_of_one() {
        assert_eq!(class_a_count(0.25, 12), 3);
        assert_eq!(class_a_count(0.01, 12), 1);
        assert_eq!(class_a_count(11.0 / 42.0, 48), 13);
    }
}
