//! Edge-cloud infrastructure graph: node/link generation, routing, and the
//! capacity-bearing primitives everything else reserves against.
//!
//! Generation draws every cost and capacity from fixed integer intervals
//! (node cost 50..=70, link cost 10..=20, link capacity 10..=40 Gbps, node
//! capacity 50..=100 Gbps) and guarantees a connected graph: a random
//! spanning tree plus random extra edges until the mean degree reaches 3,
//! capped by the complete graph.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NODE_COST_RANGE: (u32, u32) = (50, 70);
pub const LINK_COST_RANGE: (u32, u32) = (10, 20);
pub const LINK_CAPACITY_RANGE: (u32, u32) = (10, 40);
pub const NODE_CAPACITY_RANGE: (u32, u32) = (50, 100);

/// Default per-link propagation latency in milliseconds. Queueing delay is
/// layered on top by the selection module's response-latency formula.
pub const DEFAULT_LINK_LATENCY_MS: f64 = 1.0;

/// Battery drained per step per Gbps served, in percentage points.
pub const DRAIN_PCT_PER_GBPS: f64 = 0.1;

/// Default battery harvest per step, in percentage points.
pub const DEFAULT_HARVEST_PCT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LinkId(pub u32);

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "n{}", self.0)
    }
}

impl std::fmt::Display for LinkId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "l{}", self.0)
    }
}

/// 2-D position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist2(&self, other: &Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    pub fn dist(&self, other: &Point) -> f64 {
        self.dist2(other).sqrt()
    }
}

/// Rectangular deployment area anchored at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Area {
    pub width: f64,
    pub height: f64,
}

impl Area {
    pub fn new(width: f64, height: f64) -> Self {
        Self { width, height }
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.width.is_finite() && self.height.is_finite() && self.width > 0.0 && self.height > 0.0)
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.x >= 0.0 && p.x <= self.width && p.y >= 0.0 && p.y <= self.height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Poa,
    Edge,
    Cloud,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InfraNode {
    pub id: NodeId,
    pub position: Point,
    pub kind: NodeKind,
    pub cost: u32,
    /// Gbps.
    pub capacity: u32,
    /// Gbps currently reserved on this node as a service host.
    pub used: u32,
    /// Charge level in [0, 100].
    pub battery: f64,
    /// Percentage points recovered per step.
    pub harvest_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetLink {
    pub id: LinkId,
    /// Endpoints ordered so that `a < b`; links are undirected.
    pub a: NodeId,
    pub b: NodeId,
    pub cost: u32,
    /// Gbps.
    pub capacity: u32,
    pub used: u32,
    /// Milliseconds.
    pub base_latency_ms: f64,
}

impl NetLink {
    pub fn other_end(&self, from: NodeId) -> NodeId {
        if from == self.a {
            self.b
        } else {
            self.a
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Topology {
    pub nodes: Vec<InfraNode>,
    pub links: Vec<NetLink>,
    /// Incident link ids per node, sorted ascending.
    pub adjacency: Vec<Vec<LinkId>>,
    /// Seed the graph was generated from, kept for scenario replay dumps.
    pub seed: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TopologyError {
    #[error("cannot generate a topology with zero nodes")]
    EmptyTopology,
    #[error("degenerate deployment area")]
    BadArea,
    #[error("no route between {0} and {1}")]
    NoRoute(NodeId, NodeId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
}

/// Which per-link weight a route minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Cost,
    Latency,
}

/// A route as an ordered list of link ids plus its total weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub links: Vec<LinkId>,
    pub total: f64,
}

/// Single step of the battery recurrence shared by monitoring and the
/// availability predictor.
pub fn battery_step(battery: f64, used_gbps: u32, harvest_rate: f64) -> f64 {
    (battery - DRAIN_PCT_PER_GBPS * used_gbps as f64 + harvest_rate).clamp(0.0, 100.0)
}

fn draw_u32(rng: &mut ChaCha12Rng, range: (u32, u32)) -> u32 {
    rng.random_range(range.0..=range.1)
}

/// Generates a connected random topology of exactly `n_nodes` nodes.
///
/// Node kinds are assigned by id: the first ceil(n/3) nodes are PoAs, the
/// last ceil(n/6) are cloud (PoA assignment wins on overlap for tiny n), the
/// rest are edge nodes.
pub fn generate_topology(seed: u64, n_nodes: usize, area: Area) -> Result<Topology, TopologyError> {
    if n_nodes == 0 {
        return Err(TopologyError::EmptyTopology);
    }
    if area.is_degenerate() {
        return Err(TopologyError::BadArea);
    }
    let mut rng = crate::rng::stream(seed, "topology");

    let n_poa = n_nodes.div_ceil(3);
    let n_cloud = n_nodes.div_ceil(6).min(n_nodes - n_poa);

    let mut nodes = Vec::with_capacity(n_nodes);
    for i in 0..n_nodes {
        let position = Point::new(
            rng.random_range(0.0..area.width),
            rng.random_range(0.0..area.height),
        );
        let kind = if i < n_poa {
            NodeKind::Poa
        } else if i >= n_nodes - n_cloud {
            NodeKind::Cloud
        } else {
            NodeKind::Edge
        };
        nodes.push(InfraNode {
            id: NodeId(i as u32),
            position,
            kind,
            cost: draw_u32(&mut rng, NODE_COST_RANGE),
            capacity: draw_u32(&mut rng, NODE_CAPACITY_RANGE),
            used: 0,
            battery: 100.0,
            harvest_rate: DEFAULT_HARVEST_PCT,
        });
    }

    let mut links: Vec<NetLink> = Vec::new();
    let mut present = std::collections::BTreeSet::new();
    let push_link = |links: &mut Vec<NetLink>,
                         present: &mut std::collections::BTreeSet<(u32, u32)>,
                         rng: &mut ChaCha12Rng,
                         a: usize,
                         b: usize| {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        present.insert((lo as u32, hi as u32));
        links.push(NetLink {
            id: LinkId(links.len() as u32),
            a: NodeId(lo as u32),
            b: NodeId(hi as u32),
            cost: draw_u32(rng, LINK_COST_RANGE),
            capacity: draw_u32(rng, LINK_CAPACITY_RANGE),
            used: 0,
            base_latency_ms: DEFAULT_LINK_LATENCY_MS,
        });
    };

    // Random spanning tree: attach each node to a uniformly chosen earlier one.
    for i in 1..n_nodes {
        let parent = rng.random_range(0..i);
        push_link(&mut links, &mut present, &mut rng, parent, i);
    }

    // Augment with random extra edges until mean degree >= 4 (2L/n >= 4),
    // capped by the complete graph, so congestion has alternate routes.
    let complete = n_nodes * (n_nodes - 1) / 2;
    let target_links = (2 * n_nodes).min(complete);
    if links.len() < target_links {
        let mut spare: Vec<(usize, usize)> = Vec::new();
        for a in 0..n_nodes {
            for b in (a + 1)..n_nodes {
                if !present.contains(&(a as u32, b as u32)) {
                    spare.push((a, b));
                }
            }
        }
        spare.shuffle(&mut rng);
        for &(a, b) in spare.iter().take(target_links - links.len()) {
            push_link(&mut links, &mut present, &mut rng, a, b);
        }
    }

    let mut adjacency = vec![Vec::new(); n_nodes];
    for link in &links {
        adjacency[link.a.0 as usize].push(link.id);
        adjacency[link.b.0 as usize].push(link.id);
    }
    for incident in &mut adjacency {
        incident.sort();
    }

    Ok(Topology {
        nodes,
        links,
        adjacency,
        seed,
    })
}

impl Topology {
    pub fn node(&self, id: NodeId) -> &InfraNode {
        &self.nodes[id.0 as usize]
    }

    pub fn node_mut(&mut self, id: NodeId) -> &mut InfraNode {
        &mut self.nodes[id.0 as usize]
    }

    pub fn link(&self, id: LinkId) -> &NetLink {
        &self.links[id.0 as usize]
    }

    pub fn link_mut(&mut self, id: LinkId) -> &mut NetLink {
        &mut self.links[id.0 as usize]
    }

    pub fn contains_node(&self, id: NodeId) -> bool {
        (id.0 as usize) < self.nodes.len()
    }

    pub fn poa_nodes(&self) -> impl Iterator<Item = &InfraNode> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Poa)
    }

    pub fn host_nodes(&self) -> impl Iterator<Item = &InfraNode> {
        self.nodes.iter().filter(|n| n.kind != NodeKind::Poa)
    }

    /// Exact integer cost of a route.
    pub fn route_cost(&self, links: &[LinkId]) -> u64 {
        links.iter().map(|l| self.link(*l).cost as u64).sum()
    }

    fn weight(&self, link: LinkId, metric: Metric) -> f64 {
        match metric {
            Metric::Cost => self.link(link).cost as f64,
            Metric::Latency => self.link(link).base_latency_ms,
        }
    }

    /// Minimum-weight route between two nodes.
    ///
    /// Ties on total weight are broken by the lexicographically smallest
    /// link-id sequence, which pins the result for replay. `src == dst`
    /// yields an empty route of weight zero.
    pub fn shortest_path(
        &self,
        src: NodeId,
        dst: NodeId,
        metric: Metric,
    ) -> Result<Route, TopologyError> {
        self.dijkstra(src, dst, metric, 0)
    }

    /// Like [`shortest_path`](Self::shortest_path), but admission-aware:
    /// only links with at least `rate` Gbps of residual capacity are
    /// eligible, so congestion reroutes traffic instead of blocking it.
    /// `NoRoute` when saturation disconnects the pair.
    pub fn admissible_path(
        &self,
        src: NodeId,
        dst: NodeId,
        metric: Metric,
        rate: u32,
    ) -> Result<Route, TopologyError> {
        self.dijkstra(src, dst, metric, rate)
    }

    fn dijkstra(
        &self,
        src: NodeId,
        dst: NodeId,
        metric: Metric,
        min_residual: u32,
    ) -> Result<Route, TopologyError> {
        if !self.contains_node(src) {
            return Err(TopologyError::UnknownNode(src));
        }
        if !self.contains_node(dst) {
            return Err(TopologyError::UnknownNode(dst));
        }
        if src == dst {
            return Ok(Route {
                links: Vec::new(),
                total: 0.0,
            });
        }

        let n = self.nodes.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut path: Vec<Vec<LinkId>> = vec![Vec::new(); n];
        dist[src.0 as usize] = 0.0;

        // Dijkstra with re-relaxation on ties so the lexicographic tie-break
        // is exact; weights are integer-valued so equality is safe.
        let mut heap = std::collections::BinaryHeap::new();
        heap.push(std::cmp::Reverse((HeapWeight(0.0), src)));
        while let Some(std::cmp::Reverse((HeapWeight(d), u))) = heap.pop() {
            if d > dist[u.0 as usize] {
                continue;
            }
            let incident = self.adjacency[u.0 as usize].clone();
            for link_id in incident {
                let link = self.link(link_id);
                if link.used + min_residual > link.capacity {
                    continue;
                }
                let v = link.other_end(u);
                let nd = d + self.weight(link_id, metric);
                let vi = v.0 as usize;
                let better = if nd < dist[vi] {
                    true
                } else if nd == dist[vi] {
                    let mut cand = path[u.0 as usize].clone();
                    cand.push(link_id);
                    cand < path[vi]
                } else {
                    false
                };
                if better {
                    dist[vi] = nd;
                    path[vi] = path[u.0 as usize].clone();
                    path[vi].push(link_id);
                    heap.push(std::cmp::Reverse((HeapWeight(nd), v)));
                }
            }
        }

        if dist[dst.0 as usize].is_infinite() {
            return Err(TopologyError::NoRoute(src, dst));
        }
        Ok(Route {
            links: path[dst.0 as usize].clone(),
            total: dist[dst.0 as usize],
        })
    }

    /// Checks that every node is reachable from node 0.
    pub fn is_connected(&self) -> bool {
        if self.nodes.is_empty() {
            return false;
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![NodeId(0)];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &link_id in &self.adjacency[u.0 as usize] {
                let v = self.link(link_id).other_end(u);
                if !seen[v.0 as usize] {
                    seen[v.0 as usize] = true;
                    stack.push(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

#[derive(PartialEq)]
struct HeapWeight(f64);

impl Eq for HeapWeight {}

impl PartialOrd for HeapWeight {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapWeight {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive simple-path enumeration, the routing oracle for small graphs.
    fn enumerate_min_route(topo: &Topology, src: NodeId, dst: NodeId, metric: Metric) -> Option<(Vec<LinkId>, f64)> {
        fn go(
            topo: &Topology,
            at: NodeId,
            dst: NodeId,
            metric: Metric,
            visited: &mut Vec<bool>,
            links: &mut Vec<LinkId>,
            total: f64,
            best: &mut Option<(Vec<LinkId>, f64)>,
        ) {
            if at == dst {
                let better = match best {
                    None => true,
                    Some((bl, bt)) => total < *bt || (total == *bt && links.as_slice() < bl.as_slice()),
                };
                if better {
                    *best = Some((links.clone(), total));
                }
                return;
            }
            for &link_id in &topo.adjacency[at.0 as usize] {
                let link = topo.link(link_id);
                let v = link.other_end(at);
                if visited[v.0 as usize] {
                    continue;
                }
                visited[v.0 as usize] = true;
                links.push(link_id);
                let w = match metric {
                    Metric::Cost => link.cost as f64,
                    Metric::Latency => link.base_latency_ms,
                };
                go(topo, v, dst, metric, visited, links, total + w, best);
                links.pop();
                visited[v.0 as usize] = false;
            }
        }
        let mut visited = vec![false; topo.nodes.len()];
        visited[src.0 as usize] = true;
        let mut best = None;
        go(topo, src, dst, metric, &mut visited, &mut Vec::new(), 0.0, &mut best);
        best
    }

    fn hand_built(n: usize, edges: &[(u32, u32, u32)]) -> Topology {
        let nodes = (0..n)
            .map(|i| InfraNode {
                id: NodeId(i as u32),
                position: Point::new(i as f64, 0.0),
                kind: NodeKind::Edge,
                cost: 50,
                capacity: 100,
                used: 0,
                battery: 100.0,
                harvest_rate: DEFAULT_HARVEST_PCT,
            })
            .collect();
        let links: Vec<NetLink> = edges
            .iter()
            .enumerate()
            .map(|(i, &(a, b, cost))| NetLink {
                id: LinkId(i as u32),
                a: NodeId(a.min(b)),
                b: NodeId(a.max(b)),
                cost,
                capacity: 40,
                used: 0,
                base_latency_ms: DEFAULT_LINK_LATENCY_MS,
            })
            .collect();
        let mut adjacency = vec![Vec::new(); n];
        for l in &links {
            adjacency[l.a.0 as usize].push(l.id);
            adjacency[l.b.0 as usize].push(l.id);
        }
        for inc in &mut adjacency {
            inc.sort();
        }
        Topology {
            nodes,
            links,
            adjacency,
            seed: 0,
        }
    }

    #[test]
    fn generated_values_stay_in_ranges() {
        let topo = generate_topology(42, 10, Area::new(1000.0, 1000.0)).unwrap();
        assert_eq!(topo.nodes.len(), 10);
        for node in &topo.nodes {
            assert!((50..=70).contains(&node.cost));
            assert!((50..=100).contains(&node.capacity));
            assert!(node.position.x.is_finite() && node.position.y.is_finite());
        }
        for link in &topo.links {
            assert!((10..=20).contains(&link.cost));
            assert!((10..=40).contains(&link.capacity));
            assert!(link.a != link.b);
        }
    }

    #[test]
    fn single_node_topology_is_trivially_connected() {
        let topo = generate_topology(7, 1, Area::new(100.0, 100.0)).unwrap();
        assert_eq!(topo.nodes.len(), 1);
        assert!(topo.links.is_empty());
        assert!(topo.is_connected());
    }

    #[test]
    fn zero_nodes_rejected() {
        assert_eq!(
            generate_topology(1, 0, Area::new(10.0, 10.0)).unwrap_err(),
            TopologyError::EmptyTopology
        );
    }

    #[test]
    fn same_seed_same_topology() {
        let a = generate_topology(42, 10, Area::new(1000.0, 1000.0)).unwrap();
        let b = generate_topology(42, 10, Area::new(1000.0, 1000.0)).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn node_kinds_follow_id_partition() {
        let topo = generate_topology(3, 12, Area::new(500.0, 500.0)).unwrap();
        let kinds: Vec<NodeKind> = topo.nodes.iter().map(|n| n.kind).collect();
        // ceil(12/3) = 4 PoAs, ceil(12/6) = 2 cloud, 6 edge.
        assert!(kinds[..4].iter().all(|k| *k == NodeKind::Poa));
        assert!(kinds[4..10].iter().all(|k| *k == NodeKind::Edge));
        assert!(kinds[10..].iter().all(|k| *k == NodeKind::Cloud));
    }

    #[test]
    fn identity_route_is_empty() {
        let topo = generate_topology(1, 5, Area::new(100.0, 100.0)).unwrap();
        let r = topo.shortest_path(NodeId(2), NodeId(2), Metric::Cost).unwrap();
        assert!(r.links.is_empty());
        assert_eq!(r.total, 0.0);
    }

    #[test]
    fn four_cycle_takes_cheap_side() {
        // 0-1 (1), 1-2 (1), 2-3 (5), 3-0 (5); opposite corners 0 and 2.
        let topo = hand_built(4, &[(0, 1, 1), (1, 2, 1), (2, 3, 5), (3, 0, 5)]);
        let r = topo.shortest_path(NodeId(0), NodeId(2), Metric::Cost).unwrap();
        assert_eq!(r.total, 2.0);
        assert_eq!(r.links, vec![LinkId(0), LinkId(1)]);
        let oracle = enumerate_min_route(&topo, NodeId(0), NodeId(2), Metric::Cost).unwrap();
        assert_eq!(r.total, oracle.1);
        assert_eq!(r.links, oracle.0);
    }

    #[test]
    fn equal_cost_tie_breaks_to_smaller_link_sequence() {
        // Diamond: two routes 0->3 of cost 2 each; links (0,1) and (1,3) come
        // first in id order.
        let topo = hand_built(4, &[(0, 1, 1), (1, 3, 1), (0, 2, 1), (2, 3, 1)]);
        let r = topo.shortest_path(NodeId(0), NodeId(3), Metric::Cost).unwrap();
        assert_eq!(r.total, 2.0);
        assert_eq!(r.links, vec![LinkId(0), LinkId(1)]);
    }

    #[test]
    fn unreachable_destination_is_no_route() {
        let topo = hand_built(3, &[(0, 1, 1)]);
        assert_eq!(
            topo.shortest_path(NodeId(0), NodeId(2), Metric::Cost).unwrap_err(),
            TopologyError::NoRoute(NodeId(0), NodeId(2))
        );
    }

    #[test]
    fn connected_for_all_small_sizes() {
        for n in 1..=40 {
            let topo = generate_topology(1000 + n as u64, n, Area::new(800.0, 800.0)).unwrap();
            assert!(topo.is_connected(), "n={n} disconnected");
            // Mean degree >= 4 whenever the complete graph allows it.
            let complete = n * (n - 1) / 2;
            let target = (2 * n).min(complete);
            assert_eq!(topo.links.len(), target);
        }
    }

    proptest! {
        #[test]
        fn generation_connected_and_in_range(seed in 0u64..1_000_000, n in 1usize..=100) {
            let topo = generate_topology(seed, n, Area::new(1000.0, 1000.0)).unwrap();
            prop_assert!(topo.is_connected());
            prop_assert!(topo.nodes.iter().all(|nd| (50..=70).contains(&nd.cost) && (50..=100).contains(&nd.capacity)));
            prop_assert!(topo.links.iter().all(|l| (10..=20).contains(&l.cost) && (10..=40).contains(&l.capacity)));
        }

        #[test]
        fn dijkstra_matches_enumeration(seed in 0u64..100_000, n in 2usize..=8) {
            let topo = generate_topology(seed, n, Area::new(300.0, 300.0)).unwrap();
            for src in 0..n {
                for dst in 0..n {
                    let got = topo.shortest_path(NodeId(src as u32), NodeId(dst as u32), Metric::Cost).unwrap();
                    if src == dst {
                        prop_assert!(got.links.is_empty());
                        continue;
                    }
                    let (oracle_links, oracle_total) =
                        enumerate_min_route(&topo, NodeId(src as u32), NodeId(dst as u32), Metric::Cost).unwrap();
                    prop_assert_eq!(got.total, oracle_total);
                    prop_assert_eq!(got.links, oracle_links);
                }
            }
        }
    }
}
