//! Exact batch assignment by best-first branch-and-bound.
//!
//! The search assigns requests in batch order; latency and capacity for
//! request *i* are evaluated against the utilization left by admissions
//! *j < i*, exactly as the per-request strategies would see them. The
//! objective is lexicographic: maximize accepted requests, then minimize
//! total cost, then prefer the smallest assignment vector (rejection sorts
//! last). A node budget caps the search; exceeding it reports an error so
//! callers can fall back to a heuristic.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::catalog::Catalog;
use crate::reservations::ReservationBook;
use crate::topology::{LinkId, Metric, NodeId, Point, Topology};

use super::{
    AssignmentResponse, RejectReason, SelectOutcome, SelectionError, ServiceRequest, PROCESSING_MS,
};
use crate::catalog::SiId;

/// Default search budget (expanded nodes) before giving up.
pub const DEFAULT_NODE_BUDGET: usize = 1_000_000;

/// Candidate placement with state-independent parts precomputed.
#[derive(Debug, Clone)]
struct Cand {
    si: SiId,
    si_idx: usize,
    host: NodeId,
    links: Vec<LinkId>,
    cost: u64,
}

/// Rate usage snapshot the search mutates while replaying a prefix.
#[derive(Debug, Clone)]
struct Usage {
    links: Vec<u32>,
    nodes: Vec<u32>,
    sis: Vec<u32>,
}

impl Usage {
    fn of(topo: &Topology, catalog: &Catalog) -> Self {
        Self {
            links: topo.links.iter().map(|l| l.used).collect(),
            nodes: topo.nodes.iter().map(|n| n.used).collect(),
            sis: catalog.instances.iter().map(|s| s.used).collect(),
        }
    }

    fn fits(&self, topo: &Topology, catalog: &Catalog, cand: &Cand, rate: u32) -> bool {
        if self.sis[cand.si_idx] + rate > catalog.instances[cand.si_idx].capacity {
            return false;
        }
        let host = topo.node(cand.host);
        if self.nodes[cand.host.0 as usize] + rate > host.capacity {
            return false;
        }
        cand.links
            .iter()
            .all(|l| self.links[l.0 as usize] + rate <= topo.link(*l).capacity)
    }

    fn latency(&self, topo: &Topology, catalog: &Catalog, cand: &Cand, rate: u32) -> f64 {
        let mut latency = 0.0;
        for &l in &cand.links {
            let link = topo.link(l);
            let rho = (self.links[l.0 as usize] + rate) as f64 / link.capacity as f64;
            latency += link.base_latency_ms * (1.0 + rho);
        }
        let si = &catalog.instances[cand.si_idx];
        let rho_si = (self.sis[cand.si_idx] + rate) as f64 / si.capacity as f64;
        latency + PROCESSING_MS * (1.0 + rho_si)
    }

    fn admit(&mut self, cand: &Cand, rate: u32) {
        for &l in &cand.links {
            self.links[l.0 as usize] += rate;
        }
        self.nodes[cand.host.0 as usize] += rate;
        self.sis[cand.si_idx] += rate;
    }
}

/// Search node: a decided prefix of the batch plus optimistic bounds.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Node {
    /// Per-request decision: candidate index, `u32::MAX` for rejection.
    prefix: Vec<u32>,
    accepted: usize,
    cost: u64,
    /// `accepted` plus the undecided requests that have any candidate at
    /// all — an upper bound on final acceptance.
    potential: usize,
    /// `cost` plus the least any completion reaching `potential` can still
    /// spend (each remaining acceptance pays at least its cheapest
    /// candidate) — a lower bound used for ordering.
    bound: u64,
}

impl Ord for Node {
    fn cmp(&self, other: &Self) -> Ordering {
        // Max-heap: higher potential first, then lower cost bound, then
        // lexicographically smaller prefix. Prefixes are unique in the tree,
        // so the order is total. Both bounds are optimistic, so the first
        // complete node popped is the lexicographic optimum.
        self.potential
            .cmp(&other.potential)
            .then_with(|| other.bound.cmp(&self.bound))
            .then_with(|| other.prefix.cmp(&self.prefix))
    }
}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Exhaustively optimal assignment for a batch of requests.
///
/// Candidates per request are every registered instance of the matching type
/// whose placement could ever fit (capacity and latency prechecked against
/// the batch-start state). Winning reservations are applied in batch order.
pub fn select_optimal(
    topo: &mut Topology,
    catalog: &mut Catalog,
    book: &mut ReservationBook,
    batch: &[ServiceRequest],
    budget: usize,
) -> Result<Vec<SelectOutcome>, SelectionError> {
    if batch.is_empty() {
        return Ok(Vec::new());
    }
    let base = Usage::of(topo, catalog);

    // Candidate lists, ascending by instance id for deterministic expansion.
    // `routable_lists` keeps every typed instance with an admissible route so
    // rejections can be classified; the search itself runs on the prefiltered
    // lists (admission only gets harder as utilization grows, so filtering
    // against the batch-start state is exact).
    let mut typed_counts: Vec<usize> = Vec::with_capacity(batch.len());
    let mut routable_lists: Vec<Vec<Cand>> = Vec::with_capacity(batch.len());
    let mut cand_lists: Vec<Vec<Cand>> = Vec::with_capacity(batch.len());
    for sr in batch {
        let mut typed = 0usize;
        let mut routable = Vec::new();
        for (idx, si) in catalog.instances.iter().enumerate() {
            if !si.registered || !si.available || si.service_type != sr.feature.service_type {
                continue;
            }
            typed += 1;
            let Ok(route) =
                topo.admissible_path(sr.origin_poa, si.host, Metric::Cost, sr.feature.rate)
            else {
                continue;
            };
            let link_cost: u64 = route.links.iter().map(|l| topo.link(*l).cost as u64).sum();
            routable.push(Cand {
                si: si.id,
                si_idx: idx,
                host: si.host,
                links: route.links,
                cost: si.cost as u64 + topo.node(si.host).cost as u64 + link_cost,
            });
        }
        routable.sort_by_key(|c| c.si);
        let cands = routable
            .iter()
            .filter(|c| {
                base.fits(topo, catalog, c, sr.feature.rate)
                    && base.latency(topo, catalog, c, sr.feature.rate) <= sr.feature.max_latency_ms
            })
            .cloned()
            .collect();
        typed_counts.push(typed);
        routable_lists.push(routable);
        cand_lists.push(cands);
    }

    let n = batch.len();

    // Suffix aggregates over the static candidate lists: how many of the
    // requests from position i on could ever be accepted, and the least
    // total they can cost. Feasibility only tightens as the prefix admits
    // load, so both stay optimistic at every depth.
    let mut suffix_reachable = vec![0usize; n + 1];
    let mut suffix_min_cost = vec![0u64; n + 1];
    for i in (0..n).rev() {
        let min_cost = cand_lists[i].iter().map(|c| c.cost).min();
        suffix_reachable[i] = suffix_reachable[i + 1] + usize::from(min_cost.is_some());
        suffix_min_cost[i] = suffix_min_cost[i + 1] + min_cost.unwrap_or(0);
    }

    let mut heap = BinaryHeap::new();
    heap.push(Node {
        prefix: Vec::new(),
        accepted: 0,
        cost: 0,
        potential: suffix_reachable[0],
        bound: suffix_min_cost[0],
    });

    let mut expanded = 0usize;
    let solution = loop {
        let Some(node) = heap.pop() else {
            // Rejecting everything is always feasible, so the heap cannot
            // drain before a full-length prefix pops.
            unreachable!("search space exhausted without a solution");
        };
        let depth = node.prefix.len();
        if depth == n {
            break node;
        }
        expanded += 1;
        if expanded > budget {
            return Err(SelectionError::SearchBudgetExceeded);
        }

        // Replay the prefix to recover utilization at this depth.
        let mut usage = base.clone();
        for (i, &pick) in node.prefix.iter().enumerate() {
            if pick != u32::MAX {
                usage.admit(&cand_lists[i][pick as usize], batch[i].feature.rate);
            }
        }

        let sr = &batch[depth];
        for (ci, cand) in cand_lists[depth].iter().enumerate() {
            if !usage.fits(topo, catalog, cand, sr.feature.rate) {
                continue;
            }
            if usage.latency(topo, catalog, cand, sr.feature.rate) > sr.feature.max_latency_ms {
                continue;
            }
            let mut prefix = node.prefix.clone();
            prefix.push(ci as u32);
            let cost = node.cost + cand.cost;
            heap.push(Node {
                prefix,
                accepted: node.accepted + 1,
                cost,
                potential: node.accepted + 1 + suffix_reachable[depth + 1],
                bound: cost + suffix_min_cost[depth + 1],
            });
        }
        let mut prefix = node.prefix;
        prefix.push(u32::MAX);
        heap.push(Node {
            prefix,
            accepted: node.accepted,
            cost: node.cost,
            potential: node.accepted + suffix_reachable[depth + 1],
            bound: node.cost + suffix_min_cost[depth + 1],
        });
    };

    // Materialize: reserve in batch order, recording latency at admission.
    let mut usage = base.clone();
    let mut outcomes = Vec::with_capacity(n);
    for (i, sr) in batch.iter().enumerate() {
        let pick = solution.prefix[i];
        if pick == u32::MAX {
            let reason = if typed_counts[i] == 0 {
                RejectReason::NoCandidate
            } else {
                reject_reason(topo, catalog, &usage, &routable_lists[i], sr)
            };
            outcomes.push(SelectOutcome {
                response: AssignmentResponse::rejected(sr.id, reason),
                tokens: Vec::new(),
            });
            continue;
        }
        let cand = &cand_lists[i][pick as usize];
        let latency = usage.latency(topo, catalog, cand, sr.feature.rate);
        usage.admit(cand, sr.feature.rate);
        let token = book
            .reserve(topo, catalog, &cand.links, cand.host, cand.si, sr.feature.rate)
            .expect("search certified feasibility");
        outcomes.push(SelectOutcome {
            response: AssignmentResponse {
                sr_id: sr.id,
                chosen: vec![cand.si],
                path: cand.links.clone(),
                cost: cand.cost,
                latency_ms: latency,
                availability_pred: catalog
                    .instance(cand.si)
                    .map(|s| s.available)
                    .unwrap_or(false),
                next_position_pred: Point::new(0.0, 0.0),
                accepted: true,
                reject_reason: None,
                failed_part: None,
            },
            tokens: vec![token],
        });
    }
    Ok(outcomes)
}

/// Classifies a rejection against the final admitted state. `cands` holds
/// every typed instance that had an admissible route at batch start; the
/// caller handles the no-typed-instance case.
fn reject_reason(
    topo: &Topology,
    catalog: &Catalog,
    usage: &Usage,
    cands: &[Cand],
    sr: &ServiceRequest,
) -> RejectReason {
    if cands.is_empty() {
        // Instances of the type exist, but congestion cut every route.
        return RejectReason::Capacity;
    }
    let any_fits = cands.iter().any(|c| usage.fits(topo, catalog, c, sr.feature.rate));
    if !any_fits {
        return RejectReason::Capacity;
    }
    let any_in_bound = cands.iter().any(|c| {
        usage.fits(topo, catalog, c, sr.feature.rate)
            && usage.latency(topo, catalog, c, sr.feature.rate) <= sr.feature.max_latency_ms
    });
    if !any_in_bound {
        return RejectReason::QoS;
    }
    // Feasible in isolation but passed over for the global optimum: the
    // resources it would claim were worth more elsewhere.
    RejectReason::Capacity
}
