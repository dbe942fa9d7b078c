//! Intelligence hub: analytic baseline predictors for user movement, instance
//! availability, and per-PoA request demand.
//!
//! These are deliberately simple closed-form models (constant-velocity
//! extrapolation, exponentially weighted moving averages) behind the four
//! operations the engine calls; richer learned predictors can replace them by
//! implementing the same calls.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::catalog::{Catalog, ServiceTypeId, SiId, B_MIN_PCT};
use crate::mobility::{UserId, HISTORY_LEN};
use crate::topology::{battery_step, NodeId, NodeKind, Point, Topology};

/// EWMA smoothing factor shared by the availability and demand forecasters.
pub const ALPHA: f64 = 0.3;

/// Steps ahead the continuity machinery looks when pre-forwarding requests.
pub const CONTINUITY_HORIZON: u64 = 3;

/// Availability EWMA at or above this passes the reliability gate.
pub const AVAILABILITY_GATE: f64 = 0.5;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PredictionError {
    #[error("no position history for user {0}")]
    NoHistory(UserId),
    #[error("unknown or unregistered instance {0}")]
    UnknownSi(SiId),
    #[error("topology has no PoA nodes")]
    NoPoa,
}

/// Rolling model state. Updated by the engine's monitoring pass; all
/// `predict_*`/`forecast_*` calls are read-only.
#[derive(Debug, Clone, Default)]
pub struct PredictorState {
    positions: BTreeMap<UserId, Vec<Point>>,
    availability_ewma: BTreeMap<SiId, f64>,
    request_ewma: BTreeMap<(NodeId, ServiceTypeId), f64>,
}

impl PredictorState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe_position(&mut self, user: UserId, p: Point) {
        let hist = self.positions.entry(user).or_default();
        hist.push(p);
        if hist.len() > HISTORY_LEN {
            hist.remove(0);
        }
    }

    /// Seeds the availability model optimistically when an instance registers.
    pub fn register_si(&mut self, si: SiId) {
        self.availability_ewma.insert(si, 1.0);
    }

    pub fn forget_si(&mut self, si: SiId) {
        self.availability_ewma.remove(&si);
    }

    pub fn observe_availability(&mut self, si: SiId, available: bool) {
        let x = if available { 1.0 } else { 0.0 };
        let y = self.availability_ewma.entry(si).or_insert(1.0);
        *y = ALPHA * x + (1.0 - ALPHA) * *y;
    }

    pub fn availability_ewma(&self, si: SiId) -> f64 {
        self.availability_ewma.get(&si).copied().unwrap_or(1.0)
    }

    /// Folds one step of observed request counts into the demand model.
    /// Every already-tracked key is updated — quiet keys decay toward zero —
    /// and new keys join the model.
    /// Per-node predicted demand: the request EWMA summed over service types.
    pub fn node_load(&self) -> BTreeMap<NodeId, f64> {
        let mut load = BTreeMap::new();
        for (&(node, _), &v) in &self.request_ewma {
            *load.entry(node).or_insert(0.0) += v;
        }
        load
    }

    pub fn observe_requests(&mut self, counts: &BTreeMap<(NodeId, ServiceTypeId), f64>) {
        let mut keys: Vec<(NodeId, ServiceTypeId)> = self.request_ewma.keys().copied().collect();
        for k in counts.keys() {
            if !self.request_ewma.contains_key(k) {
                keys.push(*k);
            }
        }
        for k in keys {
            let x = counts.get(&k).copied().unwrap_or(0.0);
            let y = self.request_ewma.entry(k).or_insert(0.0);
            *y = ALPHA * x + (1.0 - ALPHA) * *y;
        }
    }

    pub fn history(&self, user: UserId) -> Option<&[Point]> {
        self.positions.get(&user).map(|v| v.as_slice())
    }
}

/// Constant-velocity extrapolation from the last observed displacement. A
/// single-point history has no velocity evidence and predicts staying put.
pub fn predict_position(
    state: &PredictorState,
    user: UserId,
    horizon: u64,
) -> Result<Point, PredictionError> {
    let hist = state
        .positions
        .get(&user)
        .filter(|h| !h.is_empty())
        .ok_or(PredictionError::NoHistory(user))?;
    let last = *hist.last().unwrap();
    let v = if hist.len() >= 2 {
        let prev = hist[hist.len() - 2];
        (last.x - prev.x, last.y - prev.y)
    } else {
        (0.0, 0.0)
    };
    Ok(Point::new(
        last.x + horizon as f64 * v.0,
        last.y + horizon as f64 * v.1,
    ))
}

/// Projects whether an instance will still be worth selecting `horizon` steps
/// out: the host battery, rolled forward at its current load, must stay above
/// the availability floor, and the instance's reliability EWMA must pass the
/// gate.
pub fn predict_availability(
    state: &PredictorState,
    catalog: &Catalog,
    topo: &Topology,
    si: SiId,
    horizon: u64,
) -> Result<bool, PredictionError> {
    let inst = catalog
        .instance(si)
        .filter(|i| i.registered)
        .ok_or(PredictionError::UnknownSi(si))?;
    let host = topo.node(inst.host);
    let mut battery = host.battery;
    for _ in 0..horizon {
        battery = battery_step(battery, host.used, host.harvest_rate);
    }
    Ok(battery > B_MIN_PCT && state.availability_ewma(si) >= AVAILABILITY_GATE)
}

/// Expected request count for (PoA, service type) next step: the current EWMA
/// value; keys never observed forecast zero.
pub fn forecast_requests(state: &PredictorState, poa: NodeId, service_type: ServiceTypeId) -> f64 {
    state
        .request_ewma
        .get(&(poa, service_type))
        .copied()
        .unwrap_or(0.0)
}

/// The PoA nearest to the user's extrapolated position at the continuity
/// horizon; ties go to the smaller node id.
pub fn predict_next_poa(
    state: &PredictorState,
    user: UserId,
    topo: &Topology,
) -> Result<NodeId, PredictionError> {
    let target = predict_position(state, user, CONTINUITY_HORIZON)?;
    topo.nodes
        .iter()
        .filter(|n| n.kind == NodeKind::Poa)
        .min_by(|a, b| {
            a.position
                .dist2(&target)
                .total_cmp(&b.position.dist2(&target))
                .then(a.id.cmp(&b.id))
        })
        .map(|n| n.id)
        .ok_or(PredictionError::NoPoa)
}
