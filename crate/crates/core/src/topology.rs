//! Random networks, user routes, utility weights and true capacities.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::belief::LognormalBelief;
use crate::congestion::SigmoidCongestionModel;
use crate::error::{Error, Result};

/// Links, users and the routing incidence between them.
///
/// `routes[n]` is the ordered list of links used by user `n`; the reverse
/// index `link_users[m]` lists the users of link `m` in increasing order.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    num_links: usize,
    routes: Vec<Vec<usize>>,
    link_users: Vec<Vec<usize>>,
}

impl Topology {
    /// Validates the routes: non-empty, distinct in-range links, and every
    /// link used by at least one user.
    pub fn new(num_links: usize, routes: Vec<Vec<usize>>) -> Result<Self> {
        if num_links == 0 || routes.is_empty() {
            return Err(Error::InvalidInstance("topology needs at least one link and one user".into()));
        }
        let mut link_users = vec![Vec::new(); num_links];
        for (n, route) in routes.iter().enumerate() {
            if route.is_empty() {
                return Err(Error::InvalidInstance(format!("user {n} has an empty route")));
            }
            for (i, &m) in route.iter().enumerate() {
                if m >= num_links {
                    return Err(Error::InvalidInstance(format!("user {n} uses unknown link {m}")));
                }
                if route[..i].contains(&m) {
                    return Err(Error::InvalidInstance(format!("user {n} visits link {m} twice")));
                }
                link_users[m].push(n);
            }
        }
        if let Some(m) = link_users.iter().position(Vec::is_empty) {
            return Err(Error::InvalidInstance(format!("link {m} carries no user")));
        }
        Ok(Topology {
            num_links,
            routes,
            link_users,
        })
    }

    pub fn num_links(&self) -> usize {
        self.num_links
    }

    pub fn num_users(&self) -> usize {
        self.routes.len()
    }

    pub fn routes(&self) -> &[Vec<usize>] {
        &self.routes
    }

    pub fn route(&self, n: usize) -> &[usize] {
        &self.routes[n]
    }

    pub fn link_users(&self, m: usize) -> &[usize] {
        &self.link_users[m]
    }

    /// `N_m`, the number of users on link `m`.
    pub fn users_on(&self, m: usize) -> usize {
        self.link_users[m].len()
    }

    /// Dense `M × N` incidence, `a[m][n] = 1` iff user `n` uses link `m`.
    pub fn routing_matrix(&self) -> Vec<Vec<u8>> {
        let mut a = vec![vec![0u8; self.num_users()]; self.num_links];
        for (n, route) in self.routes.iter().enumerate() {
            for &m in route {
                a[m][n] = 1;
            }
        }
        a
    }

    /// `y = A x`.
    pub fn link_rates(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.num_links];
        for (route, &xn) in self.routes.iter().zip(x) {
            for &m in route {
                y[m] += xn;
            }
        }
        y
    }

    /// `aₙᵀ λ` for every user.
    pub fn route_prices(&self, lambda: &[f64]) -> Vec<f64> {
        self.routes
            .iter()
            .map(|route| route.iter().map(|&m| lambda[m]).sum())
            .collect()
    }

    /// Links that share at least one user with `m`, including `m`, sorted.
    pub fn neighbours(&self, m: usize) -> Vec<usize> {
        let mut seen = vec![false; self.num_links];
        for &n in &self.link_users[m] {
            for &l in &self.routes[n] {
                seen[l] = true;
            }
        }
        (0..self.num_links).filter(|&l| seen[l]).collect()
    }
}

/// Mean route length and mean number of links coupled to a link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub route_length: f64,
    pub coupled_links: f64,
}

pub fn graph_stats(topology: &Topology) -> GraphStats {
    let total: usize = topology.routes().iter().map(Vec::len).sum();
    let coupled: usize = (0..topology.num_links())
        .map(|m| topology.neighbours(m).len())
        .sum();
    GraphStats {
        route_length: total as f64 / topology.num_users() as f64,
        coupled_links: coupled as f64 / topology.num_links() as f64,
    }
}

/// Everything the simulator needs to know about one network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkInstance {
    pub seed: u64,
    pub topology: Topology,
    pub b_true: Vec<f64>,
    pub w: Vec<f64>,
    pub prior: Vec<LognormalBelief>,
    pub congestion: SigmoidCongestionModel,
}

impl NetworkInstance {
    pub fn num_links(&self) -> usize {
        self.topology.num_links()
    }

    pub fn num_users(&self) -> usize {
        self.topology.num_users()
    }

    /// Per-user rate cap: twice the summed prior means along the route.
    pub fn rate_caps(&self) -> Vec<f64> {
        self.topology
            .routes()
            .iter()
            .map(|route| 2.0 * route.iter().map(|&m| self.prior[m].natural_mean()).sum::<f64>())
            .collect()
    }

    pub fn prior_means(&self) -> Vec<f64> {
        self.prior.iter().map(LognormalBelief::natural_mean).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let (m, n) = (self.num_links(), self.num_users());
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidInstance(what.to_string()))
            }
        };
        check(self.b_true.len() == m, "b_true length differs from link count")?;
        check(self.prior.len() == m, "prior length differs from link count")?;
        check(self.congestion.num_links() == m, "kappa length differs from link count")?;
        check(self.w.len() == n, "w length differs from user count")?;
        check(self.b_true.iter().all(|&b| b > 0.0 && b.is_finite()), "capacities must be positive")?;
        check(self.w.iter().all(|&w| w > 0.0 && w.is_finite()), "utility weights must be positive")?;
        check(self.prior.iter().all(LognormalBelief::is_valid), "prior beliefs must be valid")?;
        check(self.congestion.kappa.iter().all(|&k| k > 0.0 && k.is_finite()), "kappa must be positive")?;
        check(self.congestion.rho > 0.0 && self.congestion.rho < 1.0, "rho must lie in (0, 1)")?;
        Ok(())
    }

    pub fn to_file(&self) -> InstanceFile {
        InstanceFile {
            format_version: INSTANCE_FORMAT_VERSION,
            seed: self.seed,
            num_links: self.num_links(),
            num_users: self.num_users(),
            routes: self.topology.routes().to_vec(),
            routing_matrix: self.topology.routing_matrix(),
            b_true: self.b_true.clone(),
            w: self.w.clone(),
            prior: self.prior.clone(),
            kappa: self.congestion.kappa.clone(),
            rho: self.congestion.rho,
        }
    }

    pub fn from_file(file: InstanceFile) -> Result<Self> {
        if file.format_version != INSTANCE_FORMAT_VERSION {
            return Err(Error::InvalidInstance(format!(
                "unsupported format version {}",
                file.format_version
            )));
        }
        let topology = Topology::new(file.num_links, file.routes)?;
        if topology.num_users() != file.num_users {
            return Err(Error::InvalidInstance("user count differs from route count".into()));
        }
        if topology.routing_matrix() != file.routing_matrix {
            return Err(Error::InvalidInstance("routing matrix does not match routes".into()));
        }
        let instance = NetworkInstance {
            seed: file.seed,
            topology,
            b_true: file.b_true,
            w: file.w,
            prior: file.prior,
            congestion: SigmoidCongestionModel {
                kappa: file.kappa,
                rho: file.rho,
            },
        };
        instance.validate()?;
        Ok(instance)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

pub const INSTANCE_FORMAT_VERSION: u32 = 1;

/// On-disk form of a [`NetworkInstance`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceFile {
    pub format_version: u32,
    pub seed: u64,
    pub num_links: usize,
    pub num_users: usize,
    pub routes: Vec<Vec<usize>>,
    pub routing_matrix: Vec<Vec<u8>>,
    pub b_true: Vec<f64>,
    pub w: Vec<f64>,
    pub prior: Vec<LognormalBelief>,
    pub kappa: Vec<f64>,
    pub rho: f64,
}

/// Knobs of the instance recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorOptions {
    /// Prior mean per user on the link.
    pub prior_mean_per_user: f64,
    /// Prior standard deviation per user on the link.
    pub prior_std_per_user: f64,
    pub rho: f64,
    /// `σ` argument at `y = b`; sets `κ_m` from the true capacity.
    pub steepness: f64,
    /// Utility weights are drawn uniformly from this interval.
    pub weight_range: (f64, f64),
    pub max_graph_attempts: usize,
    pub max_route_draws: usize,
}

impl Default for GeneratorOptions {
    fn default() -> Self {
        GeneratorOptions {
            prior_mean_per_user: 2.7,
            prior_std_per_user: 0.27,
            rho: 0.95,
            steepness: 5.0,
            weight_range: (3.0, 9.0),
            max_graph_attempts: 64,
            max_route_draws: 4000,
        }
    }
}

pub fn generate_network(seed: u64, links: usize, users: usize, target_route_length: usize) -> Result<NetworkInstance> {
    generate_network_with(seed, links, users, target_route_length, &GeneratorOptions::default())
}

/// Builds a connected random graph with `links` edges, routes every user on
/// a shortest path between two random non-adjacent nodes whose hop count is
/// within one of the target, then samples weights and capacities.
pub fn generate_network_with(
    seed: u64,
    links: usize,
    users: usize,
    target_route_length: usize,
    options: &GeneratorOptions,
) -> Result<NetworkInstance> {
    if links < 2 || users < 1 || target_route_length < 2 {
        return Err(Error::InvalidParameter(format!(
            "need links >= 2, users >= 1 and target_route_length >= 2 (got {links}, {users}, {target_route_length})"
        )));
    }
    let (lo, hi) = options.weight_range;
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
        return Err(Error::InvalidParameter(format!("weight range ({lo}, {hi})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let failure = Error::RouteGeneration {
        seed,
        links,
        users,
        target_route_length,
    };

    let base_nodes = ((links as f64 / 1.5).round() as usize).max(3);
    let mut best: Option<(usize, Vec<Vec<usize>>)> = None;
    for attempt in 0..options.max_graph_attempts {
        let nodes = (base_nodes + attempt / 8).min(links + 1);
        if nodes * (nodes - 1) / 2 < links {
            continue;
        }
        let graph = NodeGraph::random_connected(nodes, links, &mut rng);
        let Some(routes) = place_routes(&graph, users, target_route_length, options.max_route_draws, &mut rng) else {
            continue;
        };
        let mut used = vec![false; links];
        routes.iter().flatten().for_each(|&m| used[m] = true);
        let unused = used.iter().filter(|u| !**u).count();
        if unused == 0 {
            best = Some((0, routes));
            break;
        }
        if best.as_ref().is_none_or(|(u, _)| unused < *u) {
            best = Some((unused, routes));
        }
    }
    let (_, routes) = best.ok_or(failure)?;
    let (num_links, routes) = drop_unused_links(links, routes);
    let topology = Topology::new(num_links, routes)?;

    let prior: Vec<LognormalBelief> = (0..num_links)
        .map(|m| {
            let n_m = topology.users_on(m) as f64;
            LognormalBelief::from_natural(options.prior_mean_per_user * n_m, options.prior_std_per_user * n_m)
        })
        .collect();
    let b_true: Vec<f64> = prior.iter().map(|p| sample_lognormal(p, &mut rng)).collect();
    let w: Vec<f64> = (0..users)
        .map(|_| if hi > lo { rng.random_range(lo..hi) } else { lo })
        .collect();
    let congestion = SigmoidCongestionModel::from_capacities(&b_true, options.rho, options.steepness);

    let instance = NetworkInstance {
        seed,
        topology,
        b_true,
        w,
        prior,
        congestion,
    };
    instance.validate()?;
    Ok(instance)
}

pub fn sample_lognormal<R: Rng + ?Sized>(belief: &LognormalBelief, rng: &mut R) -> f64 {
    let normal = Normal::new(belief.log_mean, belief.log_var.sqrt()).expect("valid belief");
    normal.sample(rng).exp()
}

fn drop_unused_links(links: usize, routes: Vec<Vec<usize>>) -> (usize, Vec<Vec<usize>>) {
    let mut index = vec![usize::MAX; links];
    let mut next = 0;
    for &m in routes.iter().flatten() {
        if index[m] == usize::MAX {
            index[m] = 0;
        }
    }
    for slot in index.iter_mut().filter(|i| **i == 0) {
        *slot = next;
        next += 1;
    }
    let routes = routes
        .into_iter()
        .map(|r| r.into_iter().map(|m| index[m]).collect())
        .collect();
    (next, routes)
}

/// Undirected simple graph whose edges are the network links.
struct NodeGraph {
    /// `adjacency[u]` holds `(neighbour, edge index)`.
    adjacency: Vec<Vec<(usize, usize)>>,
}

impl NodeGraph {
    /// Random spanning tree on `nodes`, then random extra edges up to
    /// `edges` in total. Edge indices are shuffled so link numbering carries
    /// no structure.
    fn random_connected<R: Rng + ?Sized>(nodes: usize, edges: usize, rng: &mut R) -> Self {
        let mut order: Vec<usize> = (0..nodes).collect();
        order.shuffle(rng);
        let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(edges);
        let mut present = vec![vec![false; nodes]; nodes];
        for i in 1..nodes {
            let u = order[i];
            let v = order[rng.random_range(0..i)];
            present[u][v] = true;
            present[v][u] = true;
            pairs.push((u, v));
        }
        while pairs.len() < edges {
            let u = rng.random_range(0..nodes);
            let v = rng.random_range(0..nodes);
            if u != v && !present[u][v] {
                present[u][v] = true;
                present[v][u] = true;
                pairs.push((u, v));
            }
        }
        pairs.shuffle(rng);
        let mut adjacency = vec![Vec::new(); nodes];
        for (e, &(u, v)) in pairs.iter().enumerate() {
            adjacency[u].push((v, e));
            adjacency[v].push((u, e));
        }
        for list in &mut adjacency {
            list.shuffle(rng);
        }
        NodeGraph { adjacency }
    }

    fn nodes(&self) -> usize {
        self.adjacency.len()
    }

    fn adjacent(&self, u: usize, v: usize) -> bool {
        self.adjacency[u].iter().any(|&(x, _)| x == v)
    }

    /// Edge indices along a BFS shortest path from `src` to `dst`.
    fn shortest_path(&self, src: usize, dst: usize) -> Vec<usize> {
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; self.nodes()];
        let mut visited = vec![false; self.nodes()];
        let mut queue = VecDeque::from([src]);
        visited[src] = true;
        while let Some(u) = queue.pop_front() {
            if u == dst {
                break;
            }
            for &(v, e) in &self.adjacency[u] {
                if !visited[v] {
                    visited[v] = true;
                    parent[v] = Some((u, e));
                    queue.push_back(v);
                }
            }
        }
        let mut path = Vec::new();
        let mut at = dst;
        while let Some((p, e)) = parent[at] {
            path.push(e);
            at = p;
        }
        path.reverse();
        path
    }
}

/// Draws one route per user. A draw is kept when its length is within one
/// of the target and moves the running mean towards the target (or keeps it
/// there), so the realised mean stays close to the target.
fn place_routes<R: Rng + ?Sized>(
    graph: &NodeGraph,
    users: usize,
    target: usize,
    max_draws: usize,
    rng: &mut R,
) -> Option<Vec<Vec<usize>>> {
    let n = graph.nodes();
    let mut routes = Vec::with_capacity(users);
    let mut total = 0usize;
    for _ in 0..users {
        let mut placed = false;
        for _ in 0..max_draws {
            let src = rng.random_range(0..n);
            let dst = rng.random_range(0..n);
            if src == dst || graph.adjacent(src, dst) {
                continue;
            }
            let path = graph.shortest_path(src, dst);
            let len = path.len();
            let budget = target * routes.len();
            let balanced = match len.cmp(&target) {
                std::cmp::Ordering::Equal => true,
                std::cmp::Ordering::Greater => len == target + 1 && total <= budget,
                std::cmp::Ordering::Less => len + 1 == target && total >= budget,
            };
            if balanced {
                total += len;
                routes.push(path);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(routes)
}
