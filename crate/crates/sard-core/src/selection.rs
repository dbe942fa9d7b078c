//! Service selection: preference-weighted scoring with trust gating and QoS
//! bounds (the proposed strategy), greedy composition, and three comparison
//! baselines (random, dedicated-node, max-headroom). The exhaustive optimal
//! assignment lives in [`optimal`].
//!
//! The random, dedicated-node (`ccam`), and max-headroom (`sdms`) baselines
//! are interpretive: they implement the *characterizations* used for
//! comparison (random placement; one service type per node; availability
//! maximization that ignores cost), not any external system's actual
//! algorithm.

pub mod optimal;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, ServiceInstance, ServiceTypeId, SiId};
use crate::ledger::{Record, SrId};
use crate::mobility::{Preferences, UserId};
use crate::prediction::{predict_availability, PredictorState};
use crate::reservations::{ReservationBook, TokenId};
use crate::semantics::{Priority, SemanticFeature};
use crate::topology::{LinkId, Metric, NodeId, Point, Topology};
use crate::zoning::Zone;

/// Trust threshold: instances below it are never proposed.
pub const TRUST_TAU: f64 = 0.5;
/// Trust reward for a cleanly served request.
pub const TRUST_UP: f64 = 0.05;
/// Trust penalty when a selected instance fails.
pub const TRUST_DOWN: f64 = 0.2;

/// Per-request processing delay base at the instance, milliseconds.
pub const PROCESSING_MS: f64 = 2.0;

/// Response latency credited to a PoA cache hit, milliseconds.
pub const CACHE_HIT_MS: f64 = 0.5;

/// Steps ahead the availability predictor is consulted during selection.
pub const SELECT_AVAILABILITY_HORIZON: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RejectReason {
    /// No registered instance of the requested type (or none reachable).
    NoCandidate,
    /// Only instances below the trust threshold remained.
    Untrusted,
    /// All candidates failed capacity admission.
    Capacity,
    /// All candidates violated the request's latency bound.
    QoS,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceRequest {
    pub id: SrId,
    pub user: UserId,
    pub feature: SemanticFeature,
    pub origin_poa: NodeId,
    pub step: u64,
    pub priority: Priority,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentResponse {
    pub sr_id: SrId,
    /// Chosen instance, or the ordered instance list for a composition.
    pub chosen: Vec<SiId>,
    /// PoA-to-host route; concatenated across composition parts.
    pub path: Vec<LinkId>,
    pub cost: u64,
    pub latency_ms: f64,
    pub availability_pred: bool,
    pub next_position_pred: Point,
    pub accepted: bool,
    pub reject_reason: Option<RejectReason>,
    /// Composition part that caused the rejection, when applicable.
    pub failed_part: Option<u32>,
}

impl AssignmentResponse {
    pub fn rejected(sr_id: SrId, reason: RejectReason) -> Self {
        Self {
            sr_id,
            chosen: Vec::new(),
            path: Vec::new(),
            cost: 0,
            latency_ms: 0.0,
            availability_pred: false,
            next_position_pred: Point::new(0.0, 0.0),
            accepted: false,
            reject_reason: Some(reason),
            failed_part: None,
        }
    }
}

/// A selection result plus the reservation tokens backing it (empty when
/// rejected or served from cache).
#[derive(Debug, Clone)]
pub struct SelectOutcome {
    pub response: AssignmentResponse,
    pub tokens: Vec<TokenId>,
}

impl SelectOutcome {
    fn rejected(sr_id: SrId, reason: RejectReason) -> Self {
        Self {
            response: AssignmentResponse::rejected(sr_id, reason),
            tokens: Vec::new(),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SelectionError {
    #[error("unknown instance {0}")]
    UnknownSi(SiId),
    #[error("optimal search exceeded its node budget")]
    SearchBudgetExceeded,
}

/// The five selectable strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Proposed,
    Optimal,
    Random,
    Ccam,
    Sdms,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Proposed,
        Strategy::Optimal,
        Strategy::Random,
        Strategy::Ccam,
        Strategy::Sdms,
    ];
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Strategy::Proposed => "proposed",
            Strategy::Optimal => "optimal",
            Strategy::Random => "random",
            Strategy::Ccam => "ccam",
            Strategy::Sdms => "sdms",
        };
        write!(f, "{name}")
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "proposed" => Ok(Strategy::Proposed),
            "optimal" => Ok(Strategy::Optimal),
            "random" => Ok(Strategy::Random),
            "ccam" => Ok(Strategy::Ccam),
            "sdms" => Ok(Strategy::Sdms),
            other => Err(format!(
                "unknown strategy '{other}' (expected proposed|optimal|random|ccam|sdms)"
            )),
        }
    }
}

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

/// Min-max bounds of a candidate set, for score normalization.
#[derive(Debug, Clone, Copy)]
pub struct ScoreBounds {
    pub cost: (f64, f64),
    pub latency: (f64, f64),
}

impl ScoreBounds {
    pub fn over(rows: &[(f64, f64)]) -> Self {
        let mut cost = (f64::INFINITY, f64::NEG_INFINITY);
        let mut latency = cost;
        for &(c, l) in rows {
            cost = (cost.0.min(c), cost.1.max(c));
            latency = (latency.0.min(l), latency.1.max(l));
        }
        Self { cost, latency }
    }
}

fn normalize(x: f64, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        (x - lo) / (hi - lo)
    } else {
        0.0
    }
}

/// Preference-weighted score; lower is better. Cost and latency are min-max
/// normalized against the candidate set (zero when the set has no spread);
/// the energy term grows as the host battery drains.
pub fn score(cost: f64, latency: f64, battery: f64, bounds: &ScoreBounds, prefs: &Preferences) -> f64 {
    prefs.w_cost * normalize(cost, bounds.cost)
        + prefs.w_latency * normalize(latency, bounds.latency)
        + prefs.w_energy * (1.0 - battery / 100.0)
}

// ---------------------------------------------------------------------------
// Candidate evaluation
// ---------------------------------------------------------------------------

/// One admissible placement: route, exact cost, and projected latency under
/// post-admission utilization.
#[derive(Debug, Clone)]
pub struct CandidateEval {
    pub si: SiId,
    pub host: NodeId,
    pub links: Vec<LinkId>,
    pub cost: u64,
    pub latency_ms: f64,
    pub battery: f64,
}

enum EvalFail {
    Capacity,
}

/// Routes origin→host on link costs, rerouting around links without room for
/// `rate`, and prices the placement. Fails when no admissible route exists or
/// the host/instance lacks room.
fn evaluate(
    topo: &Topology,
    origin: NodeId,
    si: &ServiceInstance,
    rate: u32,
) -> Result<CandidateEval, EvalFail> {
    let route = match topo.admissible_path(origin, si.host, Metric::Cost, rate) {
        Ok(r) => r,
        Err(_) => return Err(EvalFail::Capacity),
    };
    let host = topo.node(si.host);
    if si.used + rate > si.capacity || host.used + rate > host.capacity {
        return Err(EvalFail::Capacity);
    }
    let mut latency = 0.0;
    let mut link_cost = 0u64;
    for &l in &route.links {
        let link = topo.link(l);
        let rho = (link.used + rate) as f64 / link.capacity as f64;
        latency += link.base_latency_ms * (1.0 + rho);
        link_cost += link.cost as u64;
    }
    let rho_si = (si.used + rate) as f64 / si.capacity as f64;
    latency += PROCESSING_MS * (1.0 + rho_si);
    Ok(CandidateEval {
        si: si.id,
        host: si.host,
        links: route.links,
        cost: si.cost as u64 + host.cost as u64 + link_cost,
        latency_ms: latency,
        battery: host.battery,
    })
}

// ---------------------------------------------------------------------------
// Proposed strategy
// ---------------------------------------------------------------------------

/// Staged candidate filtering; the returned error is the emptiness reason of
/// the first stage that ran dry.
fn staged_candidates(
    topo: &Topology,
    catalog: &Catalog,
    predictors: &PredictorState,
    sr: &ServiceRequest,
    zone: Option<&Zone>,
) -> Result<Vec<CandidateEval>, RejectReason> {
    let type_matches: Vec<&ServiceInstance> = catalog
        .registered()
        .filter(|si| si.service_type == sr.feature.service_type)
        .filter(|si| zone.is_none_or(|z| z.members.binary_search(&si.host).is_ok()))
        .collect();
    if type_matches.is_empty() {
        return Err(RejectReason::NoCandidate);
    }
    let trusted: Vec<&ServiceInstance> = type_matches
        .into_iter()
        .filter(|si| si.trust >= TRUST_TAU)
        .collect();
    if trusted.is_empty() {
        return Err(RejectReason::Untrusted);
    }
    let available: Vec<&ServiceInstance> = trusted
        .into_iter()
        .filter(|si| {
            si.available
                && predict_availability(predictors, catalog, topo, si.id, SELECT_AVAILABILITY_HORIZON)
                    .unwrap_or(false)
        })
        .collect();
    if available.is_empty() {
        return Err(RejectReason::NoCandidate);
    }
    let feasible: Vec<CandidateEval> = available
        .into_iter()
        .filter_map(|si| evaluate(topo, sr.origin_poa, si, sr.feature.rate).ok())
        .collect();
    if feasible.is_empty() {
        return Err(RejectReason::Capacity);
    }
    let in_bound: Vec<CandidateEval> = feasible
        .into_iter()
        .filter(|c| c.latency_ms <= sr.feature.max_latency_ms)
        .collect();
    if in_bound.is_empty() {
        return Err(RejectReason::QoS);
    }
    Ok(in_bound)
}

/// Preference-weighted, trust-gated, QoS-bounded selection. Candidates come
/// from the request's target zone; if the zone yields nothing at any filter
/// stage, one retry widens to the whole catalog before rejecting. Capacity is
/// reserved for the winner.
pub fn select_proposed(
    topo: &mut Topology,
    catalog: &mut Catalog,
    book: &mut ReservationBook,
    predictors: &PredictorState,
    sr: &ServiceRequest,
    zone: &Zone,
    prefs: &Preferences,
) -> SelectOutcome {
    let candidates = match staged_candidates(topo, catalog, predictors, sr, Some(zone)) {
        Ok(c) => c,
        // Widen to all zones once, then reject with the wide pass's reason.
        Err(_) => match staged_candidates(topo, catalog, predictors, sr, None) {
            Ok(c) => c,
            Err(reason) => return SelectOutcome::rejected(sr.id, reason),
        },
    };

    let rows: Vec<(f64, f64)> = candidates
        .iter()
        .map(|c| (c.cost as f64, c.latency_ms))
        .collect();
    let bounds = ScoreBounds::over(&rows);
    let best = candidates
        .iter()
        .min_by(|a, b| {
            let sa = score(a.cost as f64, a.latency_ms, a.battery, &bounds, prefs);
            let sb = score(b.cost as f64, b.latency_ms, b.battery, &bounds, prefs);
            sa.total_cmp(&sb).then(a.si.cmp(&b.si))
        })
        .expect("candidate set non-empty");

    match book.reserve(topo, catalog, &best.links, best.host, best.si, sr.feature.rate) {
        Ok(token) => SelectOutcome {
            response: AssignmentResponse {
                sr_id: sr.id,
                chosen: vec![best.si],
                path: best.links.clone(),
                cost: best.cost,
                latency_ms: best.latency_ms,
                availability_pred: true,
                next_position_pred: Point::new(0.0, 0.0),
                accepted: true,
                reject_reason: None,
                failed_part: None,
            },
            tokens: vec![token],
        },
        Err(_) => SelectOutcome::rejected(sr.id, RejectReason::Capacity),
    }
}

/// Greedy composition: each part is selected with [`select_proposed`], routed
/// from the previous part's host, against the latency budget that remains.
/// Any part failing rolls back every reservation already taken.
pub fn select_composed(
    topo: &mut Topology,
    catalog: &mut Catalog,
    book: &mut ReservationBook,
    predictors: &PredictorState,
    sr: &ServiceRequest,
    parts: &[ServiceTypeId],
    zone: &Zone,
    prefs: &Preferences,
) -> SelectOutcome {
    if parts.is_empty() {
        return SelectOutcome::rejected(sr.id, RejectReason::NoCandidate);
    }
    let mut tokens: Vec<TokenId> = Vec::new();
    let mut chosen = Vec::new();
    let mut path = Vec::new();
    let mut cost = 0u64;
    let mut latency = 0.0f64;
    let mut origin = sr.origin_poa;
    for (k, part) in parts.iter().enumerate() {
        let mut sub = sr.clone();
        sub.feature.service_type = *part;
        sub.feature.max_latency_ms = sr.feature.max_latency_ms - latency;
        sub.origin_poa = origin;
        let out = select_proposed(topo, catalog, book, predictors, &sub, zone, prefs);
        if !out.response.accepted {
            for t in tokens {
                let _ = book.release(topo, catalog, t);
            }
            let mut rejected = SelectOutcome::rejected(
                sr.id,
                out.response.reject_reason.unwrap_or(RejectReason::NoCandidate),
            );
            rejected.response.failed_part = Some(k as u32);
            return rejected;
        }
        tokens.extend(out.tokens);
        chosen.extend(out.response.chosen.iter().copied());
        path.extend(out.response.path.iter().copied());
        cost += out.response.cost;
        latency += out.response.latency_ms;
        origin = catalog
            .instance(*out.response.chosen.last().unwrap())
            .expect("chosen instance exists")
            .host;
    }
    SelectOutcome {
        response: AssignmentResponse {
            sr_id: sr.id,
            chosen,
            path,
            cost,
            latency_ms: latency,
            availability_pred: true,
            next_position_pred: Point::new(0.0, 0.0),
            accepted: true,
            reject_reason: None,
            failed_part: None,
        },
        tokens,
    }
}

// ---------------------------------------------------------------------------
// Trust
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    ServedOk,
    FailedWhenSelected,
}

/// Moves an instance's trust score and emits the ledger record. Served
/// requests earn +0.05 (capped at 1); failures cost 0.2 (floored at 0).
pub fn update_trust(
    catalog: &mut Catalog,
    si: SiId,
    outcome: Outcome,
    step: u64,
) -> Result<Record, SelectionError> {
    let inst = catalog
        .instance_mut(si)
        .ok_or(SelectionError::UnknownSi(si))?;
    let delta = match outcome {
        Outcome::ServedOk => TRUST_UP,
        Outcome::FailedWhenSelected => -TRUST_DOWN,
    };
    inst.trust = (inst.trust + delta).clamp(0.0, 1.0);
    Ok(Record::Trust {
        si,
        host: inst.host,
        delta,
        new_trust: inst.trust,
        step,
    })
}

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

/// Uniform pick over every registered instance of the type — no trust,
/// availability, zone, or QoS consideration. The pick is final: if it cannot
/// be admitted, the request is rejected without a re-draw.
pub fn select_random(
    topo: &mut Topology,
    catalog: &mut Catalog,
    book: &mut ReservationBook,
    sr: &ServiceRequest,
    rng: &mut rand_chacha::ChaCha12Rng,
) -> SelectOutcome {
    let pool: Vec<SiId> = catalog
        .registered()
        .filter(|si| si.service_type == sr.feature.service_type)
        .map(|si| si.id)
        .collect();
    if pool.is_empty() {
        return SelectOutcome::rejected(sr.id, RejectReason::NoCandidate);
    }
    let pick = pool[rng.random_range(0..pool.len())];
    let si = catalog.instance(pick).unwrap().clone();
    let Ok(eval) = evaluate(topo, sr.origin_poa, &si, sr.feature.rate) else {
        return SelectOutcome::rejected(sr.id, RejectReason::Capacity);
    };
    admit(topo, catalog, book, sr, &eval)
}

/// Dedicated-node placement: every node serves at most one service type. A
/// request routes to the nearest instance (by PoA-to-host distance) on a node
/// already dedicated to its type, else dedicates the nearest unclaimed node.
/// Cost and QoS play no part.
pub fn select_ccam(
    topo: &mut Topology,
    catalog: &mut Catalog,
    book: &mut ReservationBook,
    sr: &ServiceRequest,
    dedication: &mut std::collections::BTreeMap<NodeId, ServiceTypeId>,
) -> SelectOutcome {
    let origin_pos = topo.node(sr.origin_poa).position;
    let dist = |host: NodeId| topo.node(host).position.dist2(&origin_pos);
    let nearest = |pool: &[SiId], catalog: &Catalog| {
        pool.iter()
            .copied()
            .min_by(|&a, &b| {
                let ha = catalog.instance(a).unwrap().host;
                let hb = catalog.instance(b).unwrap().host;
                dist(ha).total_cmp(&dist(hb)).then(a.cmp(&b))
            })
            .expect("pool non-empty")
    };

    let typed: Vec<&ServiceInstance> = catalog
        .registered()
        .filter(|si| si.service_type == sr.feature.service_type)
        .collect();
    if typed.is_empty() {
        return SelectOutcome::rejected(sr.id, RejectReason::NoCandidate);
    }
    let on_dedicated: Vec<SiId> = typed
        .iter()
        .filter(|si| dedication.get(&si.host) == Some(&sr.feature.service_type))
        .map(|si| si.id)
        .collect();
    let on_free: Vec<SiId> = typed
        .iter()
        .filter(|si| !dedication.contains_key(&si.host))
        .map(|si| si.id)
        .collect();

    let (pick, newly_dedicated) = if !on_dedicated.is_empty() {
        (nearest(&on_dedicated, catalog), None)
    } else if !on_free.is_empty() {
        let pick = nearest(&on_free, catalog);
        (pick, Some(catalog.instance(pick).unwrap().host))
    } else {
        // Every hosting node is dedicated to some other type.
        return SelectOutcome::rejected(sr.id, RejectReason::Capacity);
    };

    let si = catalog.instance(pick).unwrap().clone();
    let Ok(eval) = evaluate(topo, sr.origin_poa, &si, sr.feature.rate) else {
        return SelectOutcome::rejected(sr.id, RejectReason::Capacity);
    };
    let out = admit(topo, catalog, book, sr, &eval);
    if out.response.accepted {
        if let Some(node) = newly_dedicated {
            dedication.insert(node, sr.feature.service_type);
        }
    }
    out
}

/// Availability-first placement: among admissible instances of the type
/// (current availability plus capacity; cost and QoS ignored), picks the one
/// with the largest remaining capacity fraction.
pub fn select_sdms(
    topo: &mut Topology,
    catalog: &mut Catalog,
    book: &mut ReservationBook,
    sr: &ServiceRequest,
) -> SelectOutcome {
    let typed: Vec<&ServiceInstance> = catalog
        .registered()
        .filter(|si| si.service_type == sr.feature.service_type)
        .collect();
    if typed.is_empty() {
        return SelectOutcome::rejected(sr.id, RejectReason::NoCandidate);
    }
    let feasible: Vec<(SiId, f64)> = typed
        .iter()
        .filter(|si| si.available)
        .filter(|si| evaluate(topo, sr.origin_poa, si, sr.feature.rate).is_ok())
        .map(|si| {
            let remaining = (si.capacity - si.used) as f64 / si.capacity as f64;
            (si.id, remaining)
        })
        .collect();
    let Some(&(pick, _)) = feasible.iter().max_by(|a, b| {
        a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)) // max fraction, then smaller id
    }) else {
        return SelectOutcome::rejected(sr.id, RejectReason::Capacity);
    };
    let si = catalog.instance(pick).unwrap().clone();
    let Ok(eval) = evaluate(topo, sr.origin_poa, &si, sr.feature.rate) else {
        return SelectOutcome::rejected(sr.id, RejectReason::Capacity);
    };
    admit(topo, catalog, book, sr, &eval)
}

/// Reserves an evaluated placement and builds the accepted response.
fn admit(
    topo: &mut Topology,
    catalog: &mut Catalog,
    book: &mut ReservationBook,
    sr: &ServiceRequest,
    eval: &CandidateEval,
) -> SelectOutcome {
    match book.reserve(topo, catalog, &eval.links, eval.host, eval.si, sr.feature.rate) {
        Ok(token) => SelectOutcome {
            response: AssignmentResponse {
                sr_id: sr.id,
                chosen: vec![eval.si],
                path: eval.links.clone(),
                cost: eval.cost,
                latency_ms: eval.latency_ms,
                availability_pred: catalog.instance(eval.si).map(|s| s.available).unwrap_or(false),
                next_position_pred: Point::new(0.0, 0.0),
                accepted: true,
                reject_reason: None,
                failed_part: None,
            },
            tokens: vec![token],
        },
        Err(_) => SelectOutcome::rejected(sr.id, RejectReason::Capacity),
    }
}


#[cfg(test)]
mod tests {
    use super::testkit::*;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_candidate_score_is_pure_energy_term() {
        let bounds = ScoreBounds::over(&[(80.0, 5.0)]);
        let prefs = Preferences::default();
        let s = score(80.0, 5.0, 60.0, &bounds, &prefs);
        assert!((s - prefs.w_energy * 0.4).abs() < 1e-12);
    }

    #[test]
    fn cost_only_weights_hit_minmax_endpoints() {
        let bounds = ScoreBounds::over(&[(50.0, 1.0), (100.0, 1.0)]);
        let prefs = Preferences { w_cost: 1.0, w_latency: 0.0, w_energy: 0.0 };
        assert_eq!(score(50.0, 1.0, 100.0, &bounds, &prefs), 0.0);
        assert_eq!(score(100.0, 1.0, 100.0, &bounds, &prefs), 1.0);
    }

    #[test]
    fn score_formula_spot_check() {
        // Normalized cost 0.5 and latency 0.25 with battery 80 under default
        // weights (0.4, 0.4, 0.2): 0.2 + 0.1 + 0.04 = 0.34.
        let bounds = ScoreBounds::over(&[(0.0, 0.0), (50.0, 25.0), (100.0, 100.0)]);
        let prefs = Preferences::default();
        let s = score(50.0, 25.0, 80.0, &bounds, &prefs);
        assert!((s - 0.34).abs() < 1e-12, "got {s}");
    }

    fn full_setup(
        link_costs: &[u32],
        si_costs: &[u32],
    ) -> (Topology, Catalog, ReservationBook, PredictorState, Zone) {
        let topo = star(link_costs);
        let catalog = instances(&topo, si_costs, 7);
        let predictors = predictors_for(&catalog);
        let zone = whole_zone(&topo);
        (topo, catalog, ReservationBook::new(), predictors, zone)
    }

    #[test]
    fn sole_feasible_instance_is_chosen() {
        let (mut topo, mut catalog, mut book, predictors, zone) = full_setup(&[10], &[30]);
        let sr = request(7, 2, 50.0);
        let out = select_proposed(&mut topo, &mut catalog, &mut book, &predictors, &sr, &zone, &Preferences::default());
        assert!(out.response.accepted);
        assert_eq!(out.response.chosen, vec![SiId(0)]);
        // cost = si 30 + host 50 + link 10.
        assert_eq!(out.response.cost, 90);
        assert_eq!(catalog.instance(SiId(0)).unwrap().used, 2);
    }

    #[test]
    fn equal_scores_tie_break_to_smaller_id() {
        let (mut topo, mut catalog, mut book, predictors, zone) = full_setup(&[10, 10], &[30, 30]);
        let sr = request(7, 2, 50.0);
        let out = select_proposed(&mut topo, &mut catalog, &mut book, &predictors, &sr, &zone, &Preferences::default());
        assert_eq!(out.response.chosen, vec![SiId(0)]);
    }

    #[test]
    fn argmin_matches_exhaustive_scoring() {
        // Three candidates with distinct costs/latencies via link costs and
        // battery levels.
        let (mut topo, mut catalog, mut book, predictors, zone) = full_setup(&[10, 14, 20], &[40, 25, 31]);
        topo.node_mut(NodeId(1)).battery = 90.0;
        topo.node_mut(NodeId(2)).battery = 55.0;
        topo.node_mut(NodeId(3)).battery = 100.0;
        catalog.instance_mut(SiId(1)).unwrap().used = 50; // drives rho_si up
        let sr = request(7, 3, 60.0);
        let prefs = Preferences::default();

        // Oracle: evaluate and score every candidate by hand.
        let evals: Vec<CandidateEval> = catalog
            .instances
            .iter()
            .map(|si| super::evaluate(&topo, NodeId(0), si, 3).ok().unwrap())
            .collect();
        let rows: Vec<(f64, f64)> = evals.iter().map(|e| (e.cost as f64, e.latency_ms)).collect();
        let bounds = ScoreBounds::over(&rows);
        let oracle = evals
            .iter()
            .min_by(|a, b| {
                score(a.cost as f64, a.latency_ms, a.battery, &bounds, &prefs)
                    .total_cmp(&score(b.cost as f64, b.latency_ms, b.battery, &bounds, &prefs))
                    .then(a.si.cmp(&b.si))
            })
            .unwrap()
            .si;

        let out = select_proposed(&mut topo, &mut catalog, &mut book, &predictors, &sr, &zone, &prefs);
        assert!(out.response.accepted);
        assert_eq!(out.response.chosen, vec![oracle]);
    }

    #[test]
    fn zone_miss_falls_back_to_global_search() {
        let (mut topo, mut catalog, mut book, predictors, _) = full_setup(&[10, 12], &[30, 25]);
        // Zone covers only the PoA; both hosts are outside it.
        let zone = Zone {
            id: crate::zoning::ZoneId(0),
            members: vec![NodeId(0)],
            centroid: Point::new(0.0, 0.0),
            chain: None,
            epoch: 0,
        };
        let sr = request(7, 2, 50.0);
        let out = select_proposed(&mut topo, &mut catalog, &mut book, &predictors, &sr, &zone, &Preferences::default());
        assert!(out.response.accepted);
    }

    #[test]
    fn untrusted_only_pool_reports_untrusted() {
        let (mut topo, mut catalog, mut book, predictors, zone) = full_setup(&[10], &[30]);
        catalog.instance_mut(SiId(0)).unwrap().trust = 0.4;
        let sr = request(7, 2, 50.0);
        let out = select_proposed(&mut topo, &mut catalog, &mut book, &predictors, &sr, &zone, &Preferences::default());
        assert!(!out.response.accepted);
        assert_eq!(out.response.reject_reason, Some(RejectReason::Untrusted));
    }

    #[test]
    fn wrong_type_reports_no_candidate() {
        let (mut topo, mut catalog, mut book, predictors, zone) = full_setup(&[10], &[30]);
        let sr = request(99, 2, 50.0);
        let out = select_proposed(&mut topo, &mut catalog, &mut book, &predictors, &sr, &zone, &Preferences::default());
        assert_eq!(out.response.reject_reason, Some(RejectReason::NoCandidate));
    }

    #[test]
    fn capacity_exhaustion_reports_capacity() {
        let (mut topo, mut catalog, mut book, predictors, zone) = full_setup(&[10], &[30]);
        catalog.instance_mut(SiId(0)).unwrap().used = 99;
        let sr = request(7, 2, 50.0);
        let out = select_proposed(&mut topo, &mut catalog, &mut book, &predictors, &sr, &zone, &Preferences::default());
        assert_eq!(out.response.reject_reason, Some(RejectReason::Capacity));
    }

    #[test]
    fn latency_bound_violation_reports_qos() {
        let (mut topo, mut catalog, mut book, predictors, zone) = full_setup(&[10], &[30]);
        let sr = request(7, 2, 0.1); // impossible bound
        let out = select_proposed(&mut topo, &mut catalog, &mut book, &predictors, &sr, &zone, &Preferences::default());
        assert_eq!(out.response.reject_reason, Some(RejectReason::QoS));
    }

    #[test]
    fn trust_is_capped_and_floored() {
        let (mut topo, mut catalog, _, _, _) = full_setup(&[10], &[30]);
        let _ = &mut topo;
        update_trust(&mut catalog, SiId(0), Outcome::ServedOk, 0).unwrap();
        assert_eq!(catalog.instance(SiId(0)).unwrap().trust, 1.0);
        catalog.instance_mut(SiId(0)).unwrap().trust = 0.6;
        let rec = update_trust(&mut catalog, SiId(0), Outcome::FailedWhenSelected, 1).unwrap();
        let t = catalog.instance(SiId(0)).unwrap().trust;
        assert!((t - 0.4).abs() < 1e-12);
        match rec {
            Record::Trust { new_trust, delta, .. } => {
                assert!((new_trust - 0.4).abs() < 1e-12);
                assert!((delta + TRUST_DOWN).abs() < 1e-12);
            }
            other => panic!("unexpected record {other:?}"),
        }
        // Now below tau: excluded from selection.
        assert!(t < TRUST_TAU);
    }

    #[test]
    fn consecutive_failures_follow_closed_form() {
        let (_, mut catalog, _, _, _) = full_setup(&[10], &[30]);
        for k in 1..=8u32 {
            update_trust(&mut catalog, SiId(0), Outcome::FailedWhenSelected, k as u64).unwrap();
            let want = (1.0 - 0.2 * k as f64).max(0.0);
            let got = catalog.instance(SiId(0)).unwrap().trust;
            assert!((got - want).abs() < 1e-12, "k={k}: {got} vs {want}");
        }
    }

    #[test]
    fn random_with_single_instance_always_picks_it() {
        let (mut topo, mut catalog, mut book, _, _) = full_setup(&[10], &[30]);
        let mut rng = crate::rng::stream(1, "strategy");
        for _ in 0..5 {
            let sr = request(7, 1, 50.0);
            let out = select_random(&mut topo, &mut catalog, &mut book, &sr, &mut rng);
            assert_eq!(out.response.chosen, vec![SiId(0)]);
            for t in out.tokens {
                book.release(&mut topo, &mut catalog, t).unwrap();
            }
        }
    }

    #[test]
    fn random_does_not_redraw_on_full_instance() {
        let (mut topo, mut catalog, mut book, _, _) = full_setup(&[10], &[30]);
        catalog.instance_mut(SiId(0)).unwrap().used = 100;
        let mut rng = crate::rng::stream(1, "strategy");
        let sr = request(7, 1, 50.0);
        let out = select_random(&mut topo, &mut catalog, &mut book, &sr, &mut rng);
        assert!(!out.response.accepted);
        assert_eq!(out.response.reject_reason, Some(RejectReason::Capacity));
    }

    #[test]
    fn random_is_uniform_within_five_percent() {
        let (mut topo, mut catalog, mut book, _, _) = full_setup(&[10, 10, 10, 10], &[30, 30, 30, 30]);
        let mut rng = crate::rng::stream(7, "strategy");
        let mut counts = [0usize; 4];
        let draws = 1000;
        for _ in 0..draws {
            let sr = request(7, 1, 50.0);
            let out = select_random(&mut topo, &mut catalog, &mut book, &sr, &mut rng);
            counts[out.response.chosen[0].0 as usize] += 1;
            for t in out.tokens {
                book.release(&mut topo, &mut catalog, t).unwrap();
            }
        }
        for c in counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.25).abs() <= 0.05, "counts {counts:?}");
        }
    }

    #[test]
    fn ccam_dedicates_nearest_node_first() {
        let (mut topo, mut catalog, mut book, _, _) = full_setup(&[10, 10], &[30, 30]);
        let mut dedication = std::collections::BTreeMap::new();
        let sr = request(7, 1, 50.0);
        let out = select_ccam(&mut topo, &mut catalog, &mut book, &sr, &mut dedication);
        assert!(out.response.accepted);
        // Host 1 is nearest to the PoA.
        assert_eq!(out.response.chosen, vec![SiId(0)]);
        assert_eq!(dedication.get(&NodeId(1)), Some(&ServiceTypeId(7)));
    }

    #[test]
    fn ccam_rejects_cross_type_on_dedicated_node() {
        let mut topo = star(&[10]);
        let mut catalog = instances(&topo, &[30], 7);
        // Second instance of a different type on the same single host.
        catalog.instances.push(ServiceInstance {
            id: SiId(1),
            provider: crate::catalog::ProviderId(0),
            service_type: ServiceTypeId(8),
            host: NodeId(1),
            cost: 30,
            capacity: 100,
            used: 0,
            trust: 1.0,
            registered: true,
            available: true,
        });
        let mut book = ReservationBook::new();
        let mut dedication = std::collections::BTreeMap::new();
        let first = request(7, 1, 50.0);
        assert!(select_ccam(&mut topo, &mut catalog, &mut book, &first, &mut dedication).response.accepted);
        let second = request(8, 1, 50.0);
        let out = select_ccam(&mut topo, &mut catalog, &mut book, &second, &mut dedication);
        assert!(!out.response.accepted);
        assert_eq!(out.response.reject_reason, Some(RejectReason::Capacity));
    }

    #[test]
    fn ccam_interleaves_two_types_over_two_nodes() {
        let mut topo = star(&[10, 10]);
        let mut catalog = instances(&topo, &[30, 30], 7);
        // Give each host an instance of the second type too.
        for (id, host) in [(2u32, 1u32), (3, 2)] {
            catalog.instances.push(ServiceInstance {
                id: SiId(id),
                provider: crate::catalog::ProviderId(0),
                service_type: ServiceTypeId(8),
                host: NodeId(host),
                cost: 30,
                capacity: 100,
                used: 0,
                trust: 1.0,
                registered: true,
                available: true,
            });
        }
        let mut book = ReservationBook::new();
        let mut dedication = std::collections::BTreeMap::new();
        let a = select_ccam(&mut topo, &mut catalog, &mut book, &request(7, 1, 50.0), &mut dedication);
        let b = select_ccam(&mut topo, &mut catalog, &mut book, &request(8, 1, 50.0), &mut dedication);
        assert!(a.response.accepted && b.response.accepted);
        // Type 7 claimed nearest node 1; type 8 had to take node 2.
        assert_eq!(dedication.get(&NodeId(1)), Some(&ServiceTypeId(7)));
        assert_eq!(dedication.get(&NodeId(2)), Some(&ServiceTypeId(8)));
        // Repeat requests stay on their dedicated nodes.
        let a2 = select_ccam(&mut topo, &mut catalog, &mut book, &request(7, 1, 50.0), &mut dedication);
        assert_eq!(catalog.instance(a2.response.chosen[0]).unwrap().host, NodeId(1));
    }

    #[test]
    fn sdms_prefers_headroom_over_cost() {
        let (mut topo, mut catalog, mut book, _, _) = full_setup(&[10, 10], &[25, 40]);
        // Instance 0: cheap but only 10% headroom; instance 1: costly, 90%.
        catalog.instance_mut(SiId(0)).unwrap().used = 90;
        catalog.instance_mut(SiId(1)).unwrap().used = 10;
        let sr = request(7, 1, 50.0);
        let out = select_sdms(&mut topo, &mut catalog, &mut book, &sr);
        assert_eq!(out.response.chosen, vec![SiId(1)]);
    }

    #[test]
    fn sdms_rejects_when_everything_is_full() {
        let (mut topo, mut catalog, mut book, _, _) = full_setup(&[10], &[30]);
        catalog.instance_mut(SiId(0)).unwrap().used = 100;
        let sr = request(7, 1, 50.0);
        let out = select_sdms(&mut topo, &mut catalog, &mut book, &sr);
        assert_eq!(out.response.reject_reason, Some(RejectReason::Capacity));
    }

    #[test]
    fn sdms_ties_go_to_smaller_id() {
        let (mut topo, mut catalog, mut book, _, _) = full_setup(&[10, 10], &[40, 25]);
        let sr = request(7, 1, 50.0);
        let out = select_sdms(&mut topo, &mut catalog, &mut book, &sr);
        assert_eq!(out.response.chosen, vec![SiId(0)]);
    }

    #[test]
    fn composition_of_one_part_equals_proposed() {
        let (mut topo, mut catalog, mut book, predictors, zone) = full_setup(&[10, 14], &[30, 25]);
        let sr = request(7, 2, 50.0);
        let prefs = Preferences::default();
        let single = select_composed(
            &mut topo, &mut catalog, &mut book, &predictors, &sr, &[ServiceTypeId(7)], &zone, &prefs,
        );
        // Roll back, then compare against plain selection.
        for t in single.tokens.clone() {
            book.release(&mut topo, &mut catalog, t).unwrap();
        }
        let plain = select_proposed(&mut topo, &mut catalog, &mut book, &predictors, &sr, &zone, &prefs);
        assert_eq!(single.response.chosen, plain.response.chosen);
        assert_eq!(single.response.cost, plain.response.cost);
    }

    #[test]
    fn failed_part_rolls_back_whole_composition() {
        let (mut topo, mut catalog, mut book, predictors, zone) = full_setup(&[10], &[30]);
        let sr = request(7, 2, 50.0);
        let out = select_composed(
            &mut topo, &mut catalog, &mut book, &predictors, &sr,
            &[ServiceTypeId(7), ServiceTypeId(99)], // no instance of 99 exists
            &zone, &Preferences::default(),
        );
        assert!(!out.response.accepted);
        assert_eq!(out.response.failed_part, Some(1));
        // Part-1 reservation was released.
        assert_eq!(catalog.instance(SiId(0)).unwrap().used, 0);
        assert!(book.audit(&topo, &catalog).is_empty());
    }

    #[test]
    fn same_host_parts_have_empty_inter_path() {
        let mut topo = star(&[10]);
        let mut catalog = instances(&topo, &[30], 7);
        catalog.instances.push(ServiceInstance {
            id: SiId(1),
            provider: crate::catalog::ProviderId(0),
            service_type: ServiceTypeId(8),
            host: NodeId(1),
            cost: 25,
            capacity: 100,
            used: 0,
            trust: 1.0,
            registered: true,
            available: true,
        });
        let predictors = predictors_for(&catalog);
        let zone = whole_zone(&topo);
        let mut book = ReservationBook::new();
        let sr = request(7, 2, 50.0);
        let out = select_composed(
            &mut topo, &mut catalog, &mut book, &predictors, &sr,
            &[ServiceTypeId(7), ServiceTypeId(8)], &zone, &Preferences::default(),
        );
        assert!(out.response.accepted);
        // One link for part 1, none for part 2 (same host).
        assert_eq!(out.response.path, vec![LinkId(0)]);
        // Part 2 adds no link cost: si 25 + host 50 only.
        assert_eq!(out.response.cost, 30 + 50 + 10 + 25 + 50);
    }

    proptest! {
        /// Scaling every cost by a positive integer factor leaves the chosen
        /// instance unchanged (min-max normalization is scale-invariant).
        #[test]
        fn argmin_invariant_under_cost_scaling(
            link_costs in proptest::collection::vec(1u32..30, 2..5),
            si_costs_seed in proptest::collection::vec(20u32..45, 2..5),
            scale in 2u32..5,
        ) {
            let n = link_costs.len().min(si_costs_seed.len());
            let link_costs = &link_costs[..n];
            let si_costs = &si_costs_seed[..n];

            let pick = |lc: &[u32], sc: &[u32]| {
                let mut topo = star(lc);
                let mut catalog = instances(&topo, sc, 7);
                let predictors = predictors_for(&catalog);
                let zone = whole_zone(&topo);
                let mut book = ReservationBook::new();
                let sr = request(7, 1, 1e9);
                select_proposed(&mut topo, &mut catalog, &mut book, &predictors, &sr, &zone, &Preferences::default())
                    .response
                    .chosen
            };

            let base = pick(link_costs, si_costs);
            let scaled_links: Vec<u32> = link_costs.iter().map(|c| c * scale).collect();
            let scaled_sis: Vec<u32> = si_costs.iter().map(|c| c * scale).collect();
            // Node costs scale too: adjust via instances' hosts all at cost 50,
            // so scale SI and link costs only when node cost contribution is
            // uniform — the normalized ordering is unaffected either way.
            let scaled = pick(&scaled_links, &scaled_sis);
            prop_assert_eq!(base, scaled);
        }

        /// Trust stays inside [0, 1] under arbitrary outcome sequences.
        #[test]
        fn trust_remains_bounded(outcomes in proptest::collection::vec(proptest::bool::ANY, 0..50)) {
            let (_, mut catalog, _, _, _) = full_setup(&[10], &[30]);
            for ok in outcomes {
                let outcome = if ok { Outcome::ServedOk } else { Outcome::FailedWhenSelected };
                update_trust(&mut catalog, SiId(0), outcome, 0).unwrap();
                let t = catalog.instance(SiId(0)).unwrap().trust;
                prop_assert!((0.0..=1.0).contains(&t));
            }
        }
    }
}
