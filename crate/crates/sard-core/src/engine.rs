//! The per-step simulation loop: mobility, monitoring, request handling,
//! trust, zoning, and ledger commits in a fixed order, fully determined by
//! the master seed.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::catalog::{
    apply_adre, generate_catalog, monitor_step, register_all, AdreAck, AdvertisingRequest, Catalog,
    CatalogError, ServiceTypeId, SiId,
};
use crate::ledger::{self, ChainId, Ledger, LedgerError, Record, Side, SrId};
use crate::mobility::{
    attach_poa, gen_waypoint_trace, MobilityError, MobilityTrace, Preferences, User, UserId,
};
use crate::prediction::{
    predict_availability, predict_next_poa, predict_position, PredictorState, CONTINUITY_HORIZON,
};
use crate::reservations::{ReservationBook, TokenId};
use crate::selection::{
    self, optimal, AssignmentResponse, Outcome, RejectReason, SelectOutcome, ServiceRequest,
    Strategy, CACHE_HIT_MS, SELECT_AVAILABILITY_HORIZON,
};
use crate::semantics::{
    decode, encode, Kb, Modality, PoaCache, Priority, RequestPayload, SemanticFeature,
    SemanticsError, DEFAULT_AGING_WINDOW, DEFAULT_SERVICE_TYPES,
};
use crate::topology::{generate_topology, Area, NodeId, Point, Topology, TopologyError};
use crate::zoning::{choose_k, compute_zones, should_rezone, ZoneId, ZonePlan, DEFAULT_REZONE_INTERVAL};

/// Steps an accepted reservation is held before the session completes.
pub const DEFAULT_HOLD_STEPS: u64 = 5;

/// Expected service requests per user per step.
pub const DEFAULT_SR_PER_USER: f64 = 0.7;

/// Per-request rate draw, Gbps (inclusive).
pub const DEFAULT_RATE_RANGE: (u32, u32) = (1, 5);

fn default_seed() -> u64 {
    1
}
fn default_n_nodes() -> usize {
    10
}
fn default_n_users() -> usize {
    10
}
fn default_n_providers() -> usize {
    crate::catalog::DEFAULT_PROVIDERS
}
fn default_steps() -> u64 {
    40
}
fn default_strategy() -> Strategy {
    Strategy::Proposed
}
fn default_aging_window() -> u64 {
    DEFAULT_AGING_WINDOW
}
fn default_rezone_interval() -> u64 {
    DEFAULT_REZONE_INTERVAL
}
fn default_rate_range() -> (u32, u32) {
    DEFAULT_RATE_RANGE
}
fn default_sr_per_user() -> f64 {
    DEFAULT_SR_PER_USER
}
fn default_area() -> Area {
    Area {
        width: 100.0,
        height: 100.0,
    }
}
fn default_speed_range() -> (f64, f64) {
    (1.0, 5.0)
}
fn default_hold_steps() -> u64 {
    DEFAULT_HOLD_STEPS
}
fn default_allow_raw_fallback() -> bool {
    false
}

/// Scenario parameters. Every field has a default, so a JSON config may set
/// only what it cares about.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub n_nodes: usize,
    pub n_users: usize,
    pub n_providers: usize,
    pub steps: u64,
    pub strategy: Strategy,
    /// Maximum cached-response age, steps.
    pub aging_window: u64,
    /// Periodic rezoning cadence, steps.
    pub rezone_interval: u64,
    /// Uniform-integer per-request rate draw, Gbps (inclusive).
    pub request_rate_range: (u32, u32),
    /// Expected SRs per user per step; values above 1 emit multiple.
    pub sr_per_user_per_step: f64,
    pub area: Area,
    /// Waypoint-walk speed draw, units per step.
    pub speed_range: (f64, f64),
    /// Reservation hold duration, steps.
    pub hold_steps: u64,
    /// Forward unmatched payloads that carry an explicit `svc=` tag instead
    /// of rejecting them. Off by default: the semantic path is mandatory.
    pub allow_raw_fallback: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: default_seed(),
            n_nodes: default_n_nodes(),
            n_users: default_n_users(),
            n_providers: default_n_providers(),
            steps: default_steps(),
            strategy: default_strategy(),
            aging_window: default_aging_window(),
            rezone_interval: default_rezone_interval(),
            request_rate_range: default_rate_range(),
            sr_per_user_per_step: default_sr_per_user(),
            area: default_area(),
            speed_range: default_speed_range(),
            hold_steps: default_hold_steps(),
            allow_raw_fallback: default_allow_raw_fallback(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.n_nodes == 0 {
            return Err(EngineError::ConfigInvalid("n_nodes"));
        }
        if self.n_users == 0 {
            return Err(EngineError::ConfigInvalid("n_users"));
        }
        if self.n_providers == 0 {
            return Err(EngineError::ConfigInvalid("n_providers"));
        }
        if self.aging_window == 0 {
            return Err(EngineError::ConfigInvalid("aging_window"));
        }
        if self.rezone_interval == 0 {
            return Err(EngineError::ConfigInvalid("rezone_interval"));
        }
        if self.hold_steps == 0 {
            return Err(EngineError::ConfigInvalid("hold_steps"));
        }
        let (lo, hi) = self.request_rate_range;
        if lo == 0 || hi < lo {
            return Err(EngineError::ConfigInvalid("request_rate_range"));
        }
        if !(self.sr_per_user_per_step >= 0.0) || !self.sr_per_user_per_step.is_finite() {
            return Err(EngineError::ConfigInvalid("sr_per_user_per_step"));
        }
        if self.area.is_degenerate() {
            return Err(EngineError::ConfigInvalid("area"));
        }
        let (slo, shi) = self.speed_range;
        if !(slo >= 0.0) || shi < slo {
            return Err(EngineError::ConfigInvalid("speed_range"));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid config field: {0}")]
    ConfigInvalid(&'static str),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Mobility(#[from] MobilityError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Semantics(#[from] SemanticsError),
}

/// Aggregated results of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub total_cost: u64,
    /// Mean over accepted SRs only; 0 when none were accepted.
    pub mean_response_ms: f64,
    /// Nearest-rank 95th percentile over accepted SRs.
    pub p95_response_ms: f64,
    pub acceptance_rate: f64,
    pub bytes_saved: u64,
    pub rezone_count: u64,
    pub cache_hit_rate: f64,
    pub rejected_by_reason: BTreeMap<RejectReason, u64>,
    pub accepted: u64,
    pub rejected: u64,
    /// Requests whose payload matched no KB intent.
    pub unknown_intents: u64,
    /// Batches where the exact search hit its budget and fell back.
    pub optimal_fallbacks: u64,
    /// Digest of the generated demand stream; equal digests mean identical
    /// demand (useful when comparing strategies on one seed).
    pub demand_digest: String,
}

/// Counters for a single step, returned by [`step`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub generated: u64,
    pub accepted: u64,
    pub rejected: u64,
    pub cache_hits: u64,
    pub rezoned: bool,
}

#[derive(Debug, Clone)]
struct Hold {
    token: TokenId,
    si: SiId,
    expires: u64,
    /// Cache-warm reservations carry no trust consequences.
    warm: bool,
}

#[derive(Debug, Default)]
struct MetricsAcc {
    accepted: u64,
    rejected: u64,
    unknown_intents: u64,
    total_cost: u64,
    latencies: Vec<f64>,
    bytes_saved: u64,
    rejected_by_reason: BTreeMap<RejectReason, u64>,
    rezone_count: u64,
    optimal_fallbacks: u64,
}

/// A generated (or externally submitted) request before selection.
#[derive(Debug, Clone)]
struct PendingSr {
    user: UserId,
    payload: RequestPayload,
    /// Demand-drawn rate overriding the intent's canonical rate, when set.
    rate: Option<u32>,
    priority: Priority,
}

/// Everything the loop mutates. Fields are public for inspection in tests and
/// dump tooling; treat them as read-only outside the engine.
pub struct SimState {
    pub config: SimConfig,
    pub topo: Topology,
    pub catalog: Catalog,
    pub users: BTreeMap<UserId, User>,
    pub kb: Kb,
    pub plan: ZonePlan,
    pub zone_ledgers: BTreeMap<ChainId, Ledger>,
    pub main: Ledger,
    pub predictors: PredictorState,
    pub caches: BTreeMap<NodeId, PoaCache<AssignmentResponse>>,
    pub warm_queues: BTreeMap<NodeId, Vec<SemanticFeature>>,
    pub book: ReservationBook,
    pub step: u64,
    holds: Vec<Hold>,
    zone_chain: BTreeMap<ZoneId, ChainId>,
    next_chain: u64,
    next_sr: u64,
    trace: MobilityTrace,
    strategy_rng: ChaCha12Rng,
    requests_rng: ChaCha12Rng,
    dedication: BTreeMap<NodeId, ServiceTypeId>,
    intent_tokens: BTreeMap<(ServiceTypeId, Modality), Vec<String>>,
    acc: MetricsAcc,
    demand_hasher: Sha256,
}

impl SimState {
    pub fn new(config: SimConfig) -> Result<Self, EngineError> {
        config.validate()?;
        let topo = generate_topology(config.seed, config.n_nodes, config.area)?;
        let catalog = generate_catalog(config.seed, &topo, config.n_providers)?;
        let trace = gen_waypoint_trace(
            config.seed,
            config.n_users,
            config.steps.max(1),
            config.area,
            config.speed_range,
        )?;

        let mut users = BTreeMap::new();
        for row in trace.at_step(0) {
            users.insert(row.user, User::new(row.user, Point::new(row.x, row.y)));
        }

        let kb = Kb::bundled();
        let mut intent_tokens = BTreeMap::new();
        for entry in kb.entries() {
            intent_tokens.insert(
                (entry.feature.service_type, entry.modality),
                entry.tokens.clone(),
            );
        }

        let mut predictors = PredictorState::new();
        for si in &catalog.instances {
            predictors.register_si(si.id);
        }

        // Initial zoning over bare positions; load enters at later rezones.
        let mut plan = compute_zones(
            &topo,
            &vec![0.0; topo.nodes.len()],
            choose_k(topo.nodes.len(), 0.0),
            config.seed,
        );

        let main = Ledger::new(ChainId(0));
        let mut zone_ledgers = BTreeMap::new();
        let mut zone_chain = BTreeMap::new();
        let mut next_chain = 1u64;
        for zone in &mut plan.zones {
            let cid = ChainId(next_chain);
            next_chain += 1;
            zone.chain = Some(cid);
            zone_chain.insert(zone.id, cid);
            zone_ledgers.insert(cid, Ledger::new(cid));
        }

        let caches = topo
            .poa_nodes()
            .map(|n| (n.id, PoaCache::default()))
            .collect();

        let strategy_rng = crate::rng::stream(config.seed, "strategy");
        let requests_rng = crate::rng::stream(config.seed, "requests");

        let mut state = Self {
            config,
            topo,
            catalog,
            users,
            kb,
            plan,
            zone_ledgers,
            main,
            predictors,
            caches,
            warm_queues: BTreeMap::new(),
            book: ReservationBook::new(),
            step: 0,
            holds: Vec::new(),
            zone_chain,
            next_chain,
            next_sr: 0,
            trace,
            strategy_rng,
            requests_rng,
            dedication: BTreeMap::new(),
            intent_tokens,
            acc: MetricsAcc::default(),
            demand_hasher: Sha256::new(),
        };

        // Bulk registration through the first PoA, recorded per host zone,
        // committed as the step-0 baseline.
        let poa = state
            .topo
            .poa_nodes()
            .next()
            .map(|n| n.id)
            .expect("generated topologies always have a PoA");
        let events = register_all(&mut state.catalog, &state.topo, poa, 0);
        for event in events {
            state.append_zone(event.host, Record::Si { event: event.clone(), step: 0 });
        }
        state.commit_all(0);
        Ok(state)
    }

    fn zone_ledger_of(&mut self, node: NodeId) -> &mut Ledger {
        let zid = self
            .plan
            .zone_of(node)
            .expect("zone plan partitions every node");
        let cid = self.zone_chain[&zid];
        self.zone_ledgers.get_mut(&cid).expect("chain exists")
    }

    fn append_zone(&mut self, anchor: NodeId, record: Record) {
        self.zone_ledger_of(anchor).append(record);
    }

    fn commit_all(&mut self, step: u64) {
        for ledger in self.zone_ledgers.values_mut() {
            ledger.commit(step);
        }
        self.main.commit(step);
        debug_assert!(self.verify_ledgers().is_ok());
    }

    pub fn verify_ledgers(&self) -> Result<(), LedgerError> {
        for ledger in self.zone_ledgers.values() {
            ledger.verify()?;
        }
        self.main.verify()
    }

    /// The mobility trace driving this scenario, as CSV.
    pub fn trace_csv(&self) -> String {
        self.trace.to_csv()
    }

    fn alloc_sr(&mut self) -> SrId {
        let id = SrId(self.next_sr);
        self.next_sr += 1;
        id
    }

    /// Encode + cache stages; either a finished response or a request that
    /// needs selection, along with its target zone.
    fn pre_select(&mut self, user: UserId, payload: &RequestPayload, rate: Option<u32>) -> PreOutcome {
        let sr_id = self.alloc_sr();
        let feature = match encode(&self.kb, payload) {
            Ok(outcome) => {
                self.acc.bytes_saved += outcome.bytes_saved as u64;
                outcome.feature
            }
            Err(_) => match self
                .config
                .allow_raw_fallback
                .then(|| crate::semantics::raw_fallback_feature(payload))
                .flatten()
            {
                Some(f) => f,
                None => {
                    self.acc.unknown_intents += 1;
                    self.acc.rejected += 1;
                    return PreOutcome::Done(AssignmentResponse {
                        sr_id,
                        chosen: Vec::new(),
                        path: Vec::new(),
                        cost: 0,
                        latency_ms: 0.0,
                        availability_pred: false,
                        next_position_pred: Point::new(0.0, 0.0),
                        accepted: false,
                        reject_reason: None,
                        failed_part: None,
                    });
                }
            },
        };
        let mut feature = feature;
        if let Some(r) = rate {
            feature.rate = r;
        }

        let origin = self.users.get(&user).and_then(|u| u.attached_poa);
        let Some(origin) = origin else {
            // Pre-condition violation: treat as no candidate reachable.
            self.acc.rejected += 1;
            *self
                .acc
                .rejected_by_reason
                .entry(RejectReason::NoCandidate)
                .or_insert(0) += 1;
            return PreOutcome::Done(AssignmentResponse::rejected(sr_id, RejectReason::NoCandidate));
        };

        let (window, now) = (self.config.aging_window, self.step);
        if let Some(cached) = self
            .caches
            .get_mut(&origin)
            .and_then(|c| c.lookup(feature.feature_id, now, window))
        {
            let mut response = cached.clone();
            response.sr_id = sr_id;
            response.latency_ms = CACHE_HIT_MS;
            response.cost = 0;
            self.acc.accepted += 1;
            self.acc.latencies.push(CACHE_HIT_MS);
            return PreOutcome::CacheHit(response);
        }

        // Target zone follows the user's predicted direction; without
        // history the current PoA stands in.
        let next_poa = predict_next_poa(&self.predictors, user, &self.topo).unwrap_or(origin);
        let zid = self
            .plan
            .zone_of(next_poa)
            .expect("zone plan partitions every node");
        PreOutcome::Select(
            ServiceRequest {
                id: sr_id,
                user,
                feature,
                origin_poa: origin,
                step: self.step,
                priority: feature_priority(&feature),
            },
            zid,
            next_poa,
        )
    }

    /// Dispatches one request to the configured strategy. The exhaustive
    /// strategy runs as a batch of one here; [`step`] batches per step.
    fn select_one(&mut self, sr: &ServiceRequest, zid: ZoneId) -> SelectOutcome {
        let prefs = self
            .users
            .get(&sr.user)
            .map(|u| u.preferences)
            .unwrap_or_default();
        match self.config.strategy {
            Strategy::Proposed => self.select_proposed_like(sr, zid, &prefs),
            Strategy::Optimal => {
                match optimal::select_optimal(
                    &mut self.topo,
                    &mut self.catalog,
                    &mut self.book,
                    std::slice::from_ref(sr),
                    optimal::DEFAULT_NODE_BUDGET,
                ) {
                    Ok(mut out) => out.pop().expect("one outcome per request"),
                    Err(_) => {
                        self.acc.optimal_fallbacks += 1;
                        self.select_proposed_like(sr, zid, &prefs)
                    }
                }
            }
            Strategy::Random => selection::select_random(
                &mut self.topo,
                &mut self.catalog,
                &mut self.book,
                sr,
                &mut self.strategy_rng,
            ),
            Strategy::Ccam => selection::select_ccam(
                &mut self.topo,
                &mut self.catalog,
                &mut self.book,
                sr,
                &mut self.dedication,
            ),
            Strategy::Sdms => {
                selection::select_sdms(&mut self.topo, &mut self.catalog, &mut self.book, sr)
            }
        }
    }

    /// Proposed selection, routing composites through the composition path.
    fn select_proposed_like(
        &mut self,
        sr: &ServiceRequest,
        zid: ZoneId,
        prefs: &Preferences,
    ) -> SelectOutcome {
        let parts: Option<Vec<ServiceTypeId>> = self
            .catalog
            .composites
            .iter()
            .find(|c| c.id == sr.feature.service_type)
            .map(|c| c.parts.clone());
        let zone = self.plan.zone(zid).clone();
        match parts {
            Some(parts) => selection::select_composed(
                &mut self.topo,
                &mut self.catalog,
                &mut self.book,
                &self.predictors,
                sr,
                &parts,
                &zone,
                prefs,
            ),
            None => selection::select_proposed(
                &mut self.topo,
                &mut self.catalog,
                &mut self.book,
                &self.predictors,
                sr,
                &zone,
                prefs,
            ),
        }
    }

    /// Ledger records, prediction attachments, caching, continuity
    /// forwarding, hold registration, and metrics for a selection outcome.
    fn post_select(&mut self, sr: &ServiceRequest, zid: ZoneId, next_poa: NodeId, out: SelectOutcome) -> AssignmentResponse {
        let mut response = out.response;
        if response.accepted {
            self.acc.accepted += 1;
            self.acc.total_cost += response.cost;
            self.acc.latencies.push(response.latency_ms);

            let chosen = *response.chosen.first().expect("accepted implies chosen");
            let record = Record::Sr {
                sr: sr.id,
                user: sr.user,
                feature_id: sr.feature.feature_id,
                chosen,
                cost: response.cost,
                poa: next_poa,
                step: self.step,
            };
            let cid = self.zone_chain[&zid];
            self.zone_ledgers
                .get_mut(&cid)
                .expect("chain exists")
                .append(record.clone());
            self.main.append(record);

            response.availability_pred = predict_availability(
                &self.predictors,
                &self.catalog,
                &self.topo,
                chosen,
                SELECT_AVAILABILITY_HORIZON,
            )
            .unwrap_or(false);
            response.next_position_pred = predict_position(&self.predictors, sr.user, CONTINUITY_HORIZON)
                .unwrap_or_else(|_| {
                    self.users
                        .get(&sr.user)
                        .map(|u| u.position)
                        .unwrap_or(Point::new(0.0, 0.0))
                });

            for (token, si) in out.tokens.iter().zip(response.chosen.iter()) {
                self.holds.push(Hold {
                    token: *token,
                    si: *si,
                    expires: self.step + self.config.hold_steps,
                    warm: false,
                });
            }

            // Semantic receiver: decode and cache at the origin PoA.
            debug_assert!(decode(&self.kb, sr.feature.feature_id).is_ok() || sr.feature.feature_id != 0);
            if let Some(cache) = self.caches.get_mut(&sr.origin_poa) {
                cache.store(sr.feature.feature_id, response.clone(), self.step);
            }

            // Continuity: pre-forward toward the predicted next PoA.
            if next_poa != sr.origin_poa {
                let queue = self.warm_queues.entry(next_poa).or_default();
                if !queue.iter().any(|f| f.feature_id == sr.feature.feature_id) {
                    queue.push(sr.feature);
                }
            }
        } else {
            self.acc.rejected += 1;
            if let Some(reason) = response.reject_reason {
                *self.acc.rejected_by_reason.entry(reason).or_insert(0) += 1;
            }
        }
        response
    }

    /// Serves queued pre-forwarded features at each PoA, caching the result
    /// locally. Warm reservations run at half hold duration and never touch
    /// trust or request metrics.
    fn drain_warm_queues(&mut self) {
        let queues = std::mem::take(&mut self.warm_queues);
        for (poa, features) in queues {
            for feature in features {
                let already = self
                    .caches
                    .get(&poa)
                    .map(|c| c.contains(feature.feature_id, self.step, self.config.aging_window))
                    .unwrap_or(false);
                if already {
                    continue;
                }
                let sr = ServiceRequest {
                    id: self.alloc_sr(),
                    user: UserId(u32::MAX),
                    feature,
                    origin_poa: poa,
                    step: self.step,
                    priority: feature_priority(&feature),
                };
                let zid = self
                    .plan
                    .zone_of(poa)
                    .expect("zone plan partitions every node");
                let zone = self.plan.zone(zid).clone();
                let out = selection::select_proposed(
                    &mut self.topo,
                    &mut self.catalog,
                    &mut self.book,
                    &self.predictors,
                    &sr,
                    &zone,
                    &Preferences::default(),
                );
                if out.response.accepted {
                    let warm_hold = (self.config.hold_steps / 2).max(1);
                    for (token, si) in out.tokens.iter().zip(out.response.chosen.iter()) {
                        self.holds.push(Hold {
                            token: *token,
                            si: *si,
                            expires: self.step + warm_hold,
                            warm: true,
                        });
                    }
                    if let Some(cache) = self.caches.get_mut(&poa) {
                        cache.store(sr.feature.feature_id, out.response.clone(), self.step);
                    }
                }
            }
        }
    }

    /// Draws this step's demand. Returned requests are ordered high priority
    /// first, stable within class.
    fn generate_srs(&mut self) -> Vec<PendingSr> {
        let mut pending = Vec::new();
        let users: Vec<UserId> = self.users.keys().copied().collect();
        for user in users {
            let mut n = self.config.sr_per_user_per_step.floor() as u64;
            let frac = self.config.sr_per_user_per_step.fract();
            if frac > 0.0 && self.requests_rng.random_range(0.0..1.0) < frac {
                n += 1;
            }
            for _ in 0..n {
                let service_type = ServiceTypeId(self.requests_rng.random_range(0..DEFAULT_SERVICE_TYPES));
                let modality = Modality::ALL[self.requests_rng.random_range(0..Modality::ALL.len())];
                let (lo, hi) = self.config.request_rate_range;
                let rate = self.requests_rng.random_range(lo..=hi);
                let tokens = self
                    .intent_tokens
                    .get(&(service_type, modality))
                    .cloned()
                    .unwrap_or_default();
                let payload = RequestPayload::new(modality, tokens);
                let priority = self
                    .kb
                    .entries()
                    .find(|e| e.feature.service_type == service_type && e.modality == modality)
                    .map(|e| e.feature.priority)
                    .unwrap_or(Priority::Normal);

                self.demand_hasher.update(self.step.to_le_bytes());
                self.demand_hasher.update(user.0.to_le_bytes());
                self.demand_hasher.update(service_type.0.to_le_bytes());
                self.demand_hasher.update([modality.tag()]);
                self.demand_hasher.update(rate.to_le_bytes());

                pending.push(PendingSr {
                    user,
                    payload,
                    rate: Some(rate),
                    priority,
                });
            }
        }
        pending.sort_by_key(|p| match p.priority {
            Priority::High => 0u8,
            Priority::Normal => 1,
        });
        pending
    }

    /// Trust outcomes and reservation expiry in one sweep: an unavailable
    /// instance mid-hold is a failure; surviving to expiry is a success.
    fn settle_holds(&mut self) {
        let step = self.step;
        let holds = std::mem::take(&mut self.holds);
        let mut kept = Vec::with_capacity(holds.len());
        for hold in holds {
            let available = self
                .catalog
                .instance(hold.si)
                .map(|s| s.available)
                .unwrap_or(false);
            let (release, outcome) = if !available {
                (true, Some(Outcome::FailedWhenSelected))
            } else if hold.expires <= step {
                (true, Some(Outcome::ServedOk))
            } else {
                (false, None)
            };
            if !release {
                kept.push(hold);
                continue;
            }
            if let (Some(outcome), false) = (outcome, hold.warm) {
                if let Ok(record) = selection::update_trust(&mut self.catalog, hold.si, outcome, step) {
                    if let Record::Trust { host, .. } = record {
                        self.append_zone(host, record);
                    }
                }
            }
            let _ = self.book.release(&mut self.topo, &mut self.catalog, hold.token);
        }
        self.holds = kept;
    }

    /// Per-node predicted request load, the zoning weight input.
    fn predicted_node_load(&self) -> Vec<f64> {
        let mut load = vec![0.0; self.topo.nodes.len()];
        for (node, v) in self.predictors.node_load() {
            if let Some(slot) = load.get_mut(node.0 as usize) {
                *slot += v;
            }
        }
        load
    }

    fn per_zone_load(&self) -> Vec<f64> {
        let node_load = self.predicted_node_load();
        self.plan
            .zones
            .iter()
            .map(|z| {
                z.members
                    .iter()
                    .map(|n| node_load[n.0 as usize])
                    .sum::<f64>()
            })
            .collect()
    }

    /// Recomputes zones, splits/merges the chains to match, and posts the
    /// zone summaries to the main chain.
    fn rezone(&mut self) -> Result<(), LedgerError> {
        let load = self.predicted_node_load();
        let total: f64 = load.iter().sum();
        let mut new_plan = compute_zones(
            &self.topo,
            &load,
            choose_k(self.topo.nodes.len(), total),
            self.config.seed,
        );
        new_plan.epoch = self.plan.epoch + 1;

        // Merge every existing chain into one lineage...
        let chains: Vec<ChainId> = self.zone_chain.values().copied().collect();
        let mut merged = self
            .zone_ledgers
            .remove(&chains[0])
            .expect("chain exists");
        for cid in &chains[1..] {
            let other = self.zone_ledgers.remove(cid).expect("chain exists");
            let mid = ChainId(self.next_chain);
            self.next_chain += 1;
            merged = ledger::merge(&merged, &other, mid)?;
        }

        // ...then split it zone by zone. The remainder after the last split
        // is the final zone's chain.
        self.zone_ledgers.clear();
        self.zone_chain.clear();
        let k = new_plan.zones.len();
        let mut rest = merged;
        for i in 0..k {
            if i + 1 == k {
                let zone = &mut new_plan.zones[i];
                zone.chain = Some(rest.chain_id);
                self.zone_chain.insert(zone.id, rest.chain_id);
                self.zone_ledgers.insert(rest.chain_id, rest);
                break;
            }
            let mut membership: BTreeMap<NodeId, Side> = BTreeMap::new();
            for node in &new_plan.zones[i].members {
                membership.insert(*node, Side::B);
            }
            let rest_id = ChainId(self.next_chain);
            let zone_id = ChainId(self.next_chain + 1);
            self.next_chain += 2;
            let (a, b) = ledger::split(&rest, &membership, (rest_id, zone_id))?;
            let zone = &mut new_plan.zones[i];
            zone.chain = Some(b.chain_id);
            self.zone_chain.insert(zone.id, b.chain_id);
            self.zone_ledgers.insert(b.chain_id, b);
            rest = a;
        }

        let per_zone: Vec<(u64, u64, u32)> = new_plan
            .zones
            .iter()
            .map(|z| {
                let cid = z.chain.expect("assigned above");
                let srs = self.zone_ledgers[&cid]
                    .payload_records()
                    .filter(|r| matches!(r, Record::Sr { .. }))
                    .count() as u64;
                let sis = self
                    .catalog
                    .registered()
                    .filter(|si| z.members.binary_search(&si.host).is_ok())
                    .count() as u64;
                (srs, sis, self.kb.len() as u32)
            })
            .collect();
        ledger::summarize_to_main(&mut self.main, &new_plan, &per_zone, self.step);

        self.plan = new_plan;
        self.acc.rezone_count += 1;
        Ok(())
    }

    fn cache_stats(&self) -> (u64, u64) {
        self.caches
            .values()
            .fold((0, 0), |(h, l), c| (h + c.hits, l + c.lookups))
    }

    fn finish_metrics(&self) -> RunMetrics {
        let acc = &self.acc;
        let mut latencies = acc.latencies.clone();
        latencies.sort_by(|a, b| a.total_cmp(b));
        let mean = if latencies.is_empty() {
            0.0
        } else {
            latencies.iter().sum::<f64>() / latencies.len() as f64
        };
        let p95 = if latencies.is_empty() {
            0.0
        } else {
            let idx = ((latencies.len() as f64 * 0.95).ceil() as usize).max(1) - 1;
            latencies[idx.min(latencies.len() - 1)]
        };
        let total = acc.accepted + acc.rejected;
        let acceptance = if total == 0 {
            0.0
        } else {
            acc.accepted as f64 / total as f64
        };
        let (hits, lookups) = self.cache_stats();
        let hit_rate = if lookups == 0 {
            0.0
        } else {
            hits as f64 / lookups as f64
        };
        let digest = self.demand_hasher.clone().finalize();
        RunMetrics {
            total_cost: acc.total_cost,
            mean_response_ms: mean,
            p95_response_ms: p95,
            acceptance_rate: acceptance,
            bytes_saved: acc.bytes_saved,
            rezone_count: acc.rezone_count,
            cache_hit_rate: hit_rate,
            rejected_by_reason: acc.rejected_by_reason.clone(),
            accepted: acc.accepted,
            rejected: acc.rejected,
            unknown_intents: acc.unknown_intents,
            optimal_fallbacks: acc.optimal_fallbacks,
            demand_digest: hex::encode(digest),
        }
    }
}

enum PreOutcome {
    /// Finished without selection (cache hit, unknown intent, no PoA).
    Done(AssignmentResponse),
    CacheHit(AssignmentResponse),
    Select(ServiceRequest, ZoneId, NodeId),
}

fn feature_priority(feature: &SemanticFeature) -> Priority {
    feature.priority
}

/// Full request pipeline for one externally submitted payload, using the
/// intent's canonical rate.
pub fn handle_sr(state: &mut SimState, user: UserId, payload: RequestPayload) -> AssignmentResponse {
    handle_sr_inner(state, user, payload, None)
}

fn handle_sr_inner(
    state: &mut SimState,
    user: UserId,
    payload: RequestPayload,
    rate: Option<u32>,
) -> AssignmentResponse {
    match state.pre_select(user, &payload, rate) {
        PreOutcome::Done(r) | PreOutcome::CacheHit(r) => r,
        PreOutcome::Select(sr, zid, next_poa) => {
            let out = state.select_one(&sr, zid);
            state.post_select(&sr, zid, next_poa, out)
        }
    }
}

/// Applies an advertising request: catalog mutation, a record on the host's
/// zone chain, and KB deltas (posted as statistics to the main chain).
pub fn handle_adre(
    state: &mut SimState,
    adre: &AdvertisingRequest,
    kb_entries: Vec<crate::semantics::KbEntry>,
) -> Result<AdreAck, EngineError> {
    let (event, ack) = apply_adre(&mut state.catalog, &state.topo, adre)?;
    match event.action {
        crate::catalog::AdreAction::Register => state.predictors.register_si(event.instance),
        crate::catalog::AdreAction::Deregister => state.predictors.forget_si(event.instance),
        crate::catalog::AdreAction::Modify => {}
    }
    let step = state.step;
    state.append_zone(event.host, Record::Si { event, step });
    if !kb_entries.is_empty() {
        let stat = crate::semantics::kb_update(&mut state.kb, kb_entries)?;
        state.main.append(Record::KbStat { stat, step });
    }
    Ok(ack)
}

/// One simulation step in fixed order: mobility, monitoring, warm-queue
/// drain, demand generation, request handling, trust settlement, rezoning,
/// commits.
pub fn step(state: &mut SimState) -> StepMetrics {
    let before_accepted = state.acc.accepted;
    let before_rejected = state.acc.rejected;
    let (before_hits, _) = state.cache_stats();

    // (a) Mobility and PoA attachment.
    let rows: Vec<(UserId, Point)> = state
        .trace
        .at_step(state.step)
        .map(|r| (r.user, Point::new(r.x, r.y)))
        .collect();
    for (uid, pos) in rows {
        let user = state.users.entry(uid).or_insert_with(|| User::new(uid, pos));
        user.observe_position(pos);
        state.predictors.observe_position(uid, pos);
        let _ = attach_poa(user, &state.topo);
    }

    // (b) Monitoring: battery drain/harvest and availability flips feed the
    // reliability EWMA.
    monitor_step(&mut state.catalog, &mut state.topo);
    let observed: Vec<(SiId, bool)> = state
        .catalog
        .registered()
        .map(|si| (si.id, si.available))
        .collect();
    for (si, avail) in observed {
        state.predictors.observe_availability(si, avail);
    }

    // (c) Continuity pre-forwarding.
    state.drain_warm_queues();

    // (d)+(e) Demand generation and handling, high priority first.
    let pending = state.generate_srs();
    let generated = pending.len() as u64;
    let mut sr_counts: BTreeMap<(NodeId, ServiceTypeId), f64> = BTreeMap::new();

    if state.config.strategy == Strategy::Optimal {
        // Pre-stage everything, batch the survivors through the exact
        // search, then post-process in order. Requests duplicating a
        // (PoA, feature) already in the batch are deferred and replayed
        // afterwards, so they see the batch's cached responses exactly as
        // they would under sequential handling.
        let mut batch: Vec<(ServiceRequest, ZoneId, NodeId)> = Vec::new();
        let mut deferred: Vec<PendingSr> = Vec::new();
        let mut staged: std::collections::BTreeSet<(NodeId, u64)> = std::collections::BTreeSet::new();
        for p in pending {
            count_demand(state, &p, &mut sr_counts);
            let key = state.users.get(&p.user).and_then(|u| u.attached_poa).and_then(|poa| {
                encode(&state.kb, &p.payload)
                    .ok()
                    .map(|o| (poa, o.feature.feature_id))
            });
            if let Some(key) = key {
                if staged.contains(&key) {
                    deferred.push(p);
                    continue;
                }
                staged.insert(key);
            }
            match state.pre_select(p.user, &p.payload, p.rate) {
                PreOutcome::Done(_) | PreOutcome::CacheHit(_) => {}
                PreOutcome::Select(sr, zid, next_poa) => batch.push((sr, zid, next_poa)),
            }
        }
        let srs: Vec<ServiceRequest> = batch.iter().map(|(sr, _, _)| sr.clone()).collect();
        match optimal::select_optimal(
            &mut state.topo,
            &mut state.catalog,
            &mut state.book,
            &srs,
            optimal::DEFAULT_NODE_BUDGET,
        ) {
            Ok(outs) => {
                for ((sr, zid, next_poa), out) in batch.iter().zip(outs) {
                    state.post_select(sr, *zid, *next_poa, out);
                }
            }
            Err(_) => {
                state.acc.optimal_fallbacks += 1;
                for (sr, zid, next_poa) in &batch {
                    let prefs = state
                        .users
                        .get(&sr.user)
                        .map(|u| u.preferences)
                        .unwrap_or_default();
                    let out = state.select_proposed_like(sr, *zid, &prefs);
                    state.post_select(sr, *zid, *next_poa, out);
                }
            }
        }
        for p in deferred {
            handle_sr_inner(state, p.user, p.payload, p.rate);
        }
    } else {
        for p in pending {
            count_demand(state, &p, &mut sr_counts);
            handle_sr_inner(state, p.user, p.payload, p.rate);
        }
    }
    state.predictors.observe_requests(&sr_counts);

    // (f)+(g) Trust outcomes and hold expiry.
    state.settle_holds();
    debug_assert!(state.book.audit(&state.topo, &state.catalog).is_empty());

    // (h) Rezoning with chain realization.
    let mut rezoned = false;
    if state.step > 0 {
        let loads = state.per_zone_load();
        if should_rezone(&state.plan, &loads, state.step, state.config.rezone_interval) {
            state.rezone().expect("rezoning healthy chains cannot fail");
            rezoned = true;
        }
    }

    // (i) Commit everything appended this step.
    state.commit_all(state.step);

    // (j) Step summary.
    let (after_hits, _) = state.cache_stats();
    let metrics = StepMetrics {
        step: state.step,
        generated,
        accepted: state.acc.accepted - before_accepted,
        rejected: state.acc.rejected - before_rejected,
        cache_hits: after_hits - before_hits,
        rezoned,
    };
    state.step += 1;
    metrics
}

/// Counts one pending request toward the per-PoA demand forecaster; unknown
/// intents and detached users are skipped.
fn count_demand(
    state: &SimState,
    p: &PendingSr,
    counts: &mut BTreeMap<(NodeId, ServiceTypeId), f64>,
) {
    let Some(poa) = state.users.get(&p.user).and_then(|u| u.attached_poa) else {
        return;
    };
    if let Ok(out) = encode(&state.kb, &p.payload) {
        *counts.entry((poa, out.feature.service_type)).or_insert(0.0) += 1.0;
    }
}

/// Builds a scenario, runs it to completion, and aggregates the metrics.
pub fn run(config: SimConfig) -> Result<RunMetrics, EngineError> {
    let mut state = SimState::new(config)?;
    for _ in 0..state.config.steps {
        step(&mut state);
    }
    state.verify_ledgers()?;
    Ok(state.finish_metrics())
}

/// Convenience for tests and the CLI: run and also hand back final state.
pub fn run_with_state(config: SimConfig) -> Result<(RunMetrics, SimState), EngineError> {
    let mut state = SimState::new(config)?;
    for _ in 0..state.config.steps {
        step(&mut state);
    }
    state.verify_ledgers()?;
    let metrics = state.finish_metrics();
    Ok((metrics, state))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(strategy: Strategy) -> SimConfig {
        SimConfig {
            seed: 3,
            n_nodes: 8,
            n_users: 4,
            steps: 12,
            strategy,
            ..SimConfig::default()
        }
    }

    #[test]
    fn zero_counts_are_rejected() {
        for field in ["n_nodes", "n_users", "n_providers"] {
            let mut c = SimConfig::default();
            match field {
                "n_nodes" => c.n_nodes = 0,
                "n_users" => c.n_users = 0,
                _ => c.n_providers = 0,
            }
            let err = SimConfig::validate(&c).unwrap_err();
            assert!(matches!(err, EngineError::ConfigInvalid(f) if f == field));
        }
    }

    #[test]
    fn registered_instance_count_in_provider_band() {
        // 20 providers at 3..=5 instances each.
        let state = SimState::new(SimConfig { steps: 1, ..SimConfig::default() }).unwrap();
        let n = state.catalog.registered().count();
        assert!((60..=100).contains(&n), "got {n}");
    }

    #[test]
    fn zero_steps_leaves_registration_commit_only() {
        let config = SimConfig { steps: 0, ..SimConfig::default() };
        let metrics = run(config.clone()).unwrap();
        assert_eq!(metrics.accepted, 0);
        assert_eq!(metrics.rejected, 0);
        assert_eq!(metrics.total_cost, 0);
        let (_, state) = run_with_state(config).unwrap();
        // Zone chains carry only the bulk-registration records.
        for ledger in state.zone_ledgers.values() {
            assert!(ledger
                .payload_records()
                .all(|r| matches!(r, Record::Si { .. })));
        }
        assert_eq!(
            state
                .zone_ledgers
                .values()
                .map(|l| l.payload_records().count())
                .sum::<usize>(),
            state.catalog.registered().count()
        );
    }

    #[test]
    fn identical_configs_replay_identically() {
        let a = run(tiny_config(Strategy::Proposed)).unwrap();
        let b = run(tiny_config(Strategy::Proposed)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn demand_digest_is_strategy_invariant() {
        let digests: Vec<String> = Strategy::ALL
            .iter()
            .map(|s| run(tiny_config(*s)).unwrap().demand_digest)
            .collect();
        assert!(digests.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn duplicate_sr_hits_cache_within_window() {
        let mut state = SimState::new(SimConfig {
            sr_per_user_per_step: 0.0, // quiet background
            ..tiny_config(Strategy::Proposed)
        })
        .unwrap();
        step(&mut state); // attach users
        let user = *state.users.keys().next().unwrap();
        let tokens = state.intent_tokens[&(ServiceTypeId(0), Modality::Text)].clone();
        let first = handle_sr(&mut state, user, RequestPayload::new(Modality::Text, tokens.clone()));
        assert!(first.accepted);
        assert!(first.latency_ms > 0.5);
        let second = handle_sr(&mut state, user, RequestPayload::new(Modality::Text, tokens));
        assert!(second.accepted);
        assert_eq!(second.latency_ms, CACHE_HIT_MS);
        assert_eq!(second.cost, 0);
    }

    #[test]
    fn cache_expires_after_aging_window() {
        let mut state = SimState::new(SimConfig {
            sr_per_user_per_step: 0.0,
            aging_window: 2,
            steps: 30,
            ..tiny_config(Strategy::Proposed)
        })
        .unwrap();
        step(&mut state);
        let user = *state.users.keys().next().unwrap();
        let tokens = state.intent_tokens[&(ServiceTypeId(0), Modality::Text)].clone();
        let first = handle_sr(&mut state, user, RequestPayload::new(Modality::Text, tokens.clone()));
        assert!(first.accepted);
        // One step past the window: 3 steps later.
        for _ in 0..3 {
            step(&mut state);
        }
        let third = handle_sr(&mut state, user, RequestPayload::new(Modality::Text, tokens));
        assert!(third.accepted);
        assert!(third.latency_ms > CACHE_HIT_MS, "expected fresh selection");
    }

    #[test]
    fn unknown_intent_rejects_without_side_effects() {
        let mut state = SimState::new(tiny_config(Strategy::Proposed)).unwrap();
        step(&mut state);
        let user = *state.users.keys().next().unwrap();
        let records_before: usize = state
            .zone_ledgers
            .values()
            .map(|l| l.record_count())
            .sum();
        let outstanding_before = state.book.outstanding().count();
        let r = handle_sr(
            &mut state,
            user,
            RequestPayload::new(Modality::Text, vec!["gibberish".into(), "nonsense".into()]),
        );
        assert!(!r.accepted);
        assert_eq!(r.reject_reason, None);
        let records_after: usize = state
            .zone_ledgers
            .values()
            .map(|l| l.record_count())
            .sum();
        assert_eq!(records_before, records_after);
        assert_eq!(state.book.outstanding().count(), outstanding_before);
    }

    #[test]
    fn raw_fallback_is_opt_in() {
        // A service-tagged payload the KB cannot match: rejected by default,
        // forwarded once the fallback flag is on.
        let payload = || RequestPayload::new(Modality::Text, vec!["opaque".into(), "svc=3".into()]);
        let mut strict = SimState::new(tiny_config(Strategy::Proposed)).unwrap();
        step(&mut strict);
        let user = *strict.users.keys().next().unwrap();
        assert!(!handle_sr(&mut strict, user, payload()).accepted);

        let mut lax = SimState::new(SimConfig {
            allow_raw_fallback: true,
            ..tiny_config(Strategy::Proposed)
        })
        .unwrap();
        step(&mut lax);
        let user = *lax.users.keys().next().unwrap();
        assert!(handle_sr(&mut lax, user, payload()).accepted);
    }

    #[test]
    fn oversized_rate_is_a_capacity_reject() {
        let mut state = SimState::new(SimConfig {
            sr_per_user_per_step: 0.0,
            ..tiny_config(Strategy::Proposed)
        })
        .unwrap();
        step(&mut state);
        let user = *state.users.keys().next().unwrap();
        let tokens = state.intent_tokens[&(ServiceTypeId(0), Modality::Text)].clone();
        let payload = RequestPayload::new(Modality::Text, tokens);
        let r = handle_sr_inner(&mut state, user, payload, Some(10_000));
        assert!(!r.accepted);
        assert_eq!(r.reject_reason, Some(RejectReason::Capacity));
        assert_eq!(state.acc.rejected_by_reason[&RejectReason::Capacity], 1);
    }

    #[test]
    fn adre_register_appends_si_record_and_kb_entries() {
        let mut state = SimState::new(tiny_config(Strategy::Proposed)).unwrap();
        let host = state
            .topo
            .host_nodes()
            .next()
            .map(|n| n.id)
            .expect("hosts exist");
        let provider = state.catalog.providers[0];
        let poa = state.topo.poa_nodes().next().unwrap().id;
        let descriptor = crate::catalog::ServiceInstance {
            id: SiId(u32::MAX), // fresh id assigned on insert
            provider,
            service_type: ServiceTypeId(3),
            host,
            cost: 30,
            capacity: 40,
            used: 0,
            trust: 1.0,
            registered: false,
            available: false,
        };
        let adre = AdvertisingRequest {
            provider,
            action: crate::catalog::AdreAction::Register,
            body: crate::catalog::AdreBody::Descriptor(descriptor),
            poa,
            timestamp: 0,
        };
        let kb_len = state.kb.len();
        let generation = state.kb.generation;
        let pending_before: usize = state
            .zone_ledgers
            .values()
            .map(|l| l.pending.len())
            .sum();
        let sig = crate::semantics::token_signature(&["brand".into(), "new".into()]);
        let feature = SemanticFeature {
            feature_id: crate::semantics::feature_id_for(Modality::Text, sig),
            service_type: ServiceTypeId(3),
            rate: 2,
            max_latency_ms: 30.0,
            priority: Priority::Normal,
        };
        let entries = vec![
            crate::semantics::KbEntry {
                modality: Modality::Text,
                signature: sig,
                feature,
                tokens: vec!["brand".into(), "new".into()],
            },
            crate::semantics::KbEntry {
                modality: Modality::Voice,
                signature: sig,
                feature: SemanticFeature {
                    feature_id: crate::semantics::feature_id_for(Modality::Voice, sig),
                    ..feature
                },
                tokens: vec!["brand".into(), "new".into()],
            },
        ];
        handle_adre(&mut state, &adre, entries).unwrap();
        assert_eq!(state.kb.len(), kb_len + 2);
        assert_eq!(state.kb.generation, generation + 1);
        let pending_after: usize = state
            .zone_ledgers
            .values()
            .map(|l| l.pending.len())
            .sum();
        assert_eq!(pending_after, pending_before + 1);
    }

    #[test]
    fn adre_deregister_unknown_is_negative_ack() {
        let mut state = SimState::new(tiny_config(Strategy::Proposed)).unwrap();
        let provider = state.catalog.providers[0];
        let poa = state.topo.poa_nodes().next().unwrap().id;
        let adre = AdvertisingRequest {
            provider,
            action: crate::catalog::AdreAction::Deregister,
            body: crate::catalog::AdreBody::Instance(SiId(9999)),
            poa,
            timestamp: 0,
        };
        let pending_before: usize = state
            .zone_ledgers
            .values()
            .map(|l| l.pending.len())
            .sum();
        assert!(handle_adre(&mut state, &adre, Vec::new()).is_err());
        let pending_after: usize = state
            .zone_ledgers
            .values()
            .map(|l| l.pending.len())
            .sum();
        assert_eq!(pending_before, pending_after);
    }

    #[test]
    fn accepted_srs_leave_exactly_one_zone_record() {
        let (_, state) = run_with_state(tiny_config(Strategy::Proposed)).unwrap();
        let zone_sr_count: usize = state
            .zone_ledgers
            .values()
            .flat_map(|l| l.payload_records())
            .filter(|r| matches!(r, Record::Sr { .. }))
            .count();
        let main_sr_count = state
            .main
            .payload_records()
            .filter(|r| matches!(r, Record::Sr { .. }))
            .count();
        // Cache hits don't produce records, so counts track non-cached accepts.
        assert_eq!(zone_sr_count, main_sr_count);
        let (hits, _) = state.cache_stats();
        assert_eq!(zone_sr_count as u64 + hits, state.acc.accepted);
    }

    #[test]
    fn rezoning_conserves_zone_records() {
        let mut state = SimState::new(SimConfig {
            rezone_interval: 5,
            steps: 11,
            ..tiny_config(Strategy::Proposed)
        })
        .unwrap();
        let mut rezones = 0;
        for _ in 0..state.config.steps {
            let before: BTreeMap<Vec<u8>, usize> = state
                .zone_ledgers
                .values()
                .flat_map(|l| l.payload_multiset())
                .fold(BTreeMap::new(), |mut m, (k, v)| {
                    *m.entry(k).or_insert(0) += v;
                    m
                });
            let m = step(&mut state);
            if m.rezoned {
                rezones += 1;
                // Everything present before the rezone must survive it
                // (records appended during this same step arrive on top).
                let after: BTreeMap<Vec<u8>, usize> = state
                    .zone_ledgers
                    .values()
                    .flat_map(|l| l.payload_multiset())
                    .fold(BTreeMap::new(), |mut m, (k, v)| {
                        *m.entry(k).or_insert(0) += v;
                        m
                    });
                for (k, v) in &before {
                    assert!(after.get(k).copied().unwrap_or(0) >= *v);
                }
            }
        }
        assert!(rezones >= 2, "interval 5 over 11 steps must rezone");
        assert!(state.verify_ledgers().is_ok());
    }

    #[test]
    fn all_strategies_complete_and_verify() {
        for strategy in Strategy::ALL {
            let config = tiny_config(strategy);
            let metrics = run(config).unwrap();
            let total = metrics.accepted + metrics.rejected;
            assert!(total > 0, "{strategy}: no demand handled");
            assert!(
                (0.0..=1.0).contains(&metrics.acceptance_rate),
                "{strategy}: bad acceptance"
            );
        }
    }

    #[test]
    fn step_metrics_track_accumulator_deltas() {
        let mut state = SimState::new(tiny_config(Strategy::Proposed)).unwrap();
        let mut accepted = 0;
        let mut rejected = 0;
        for _ in 0..state.config.steps {
            let m = step(&mut state);
            accepted += m.accepted;
            rejected += m.rejected;
        }
        assert_eq!(accepted, state.acc.accepted);
        assert_eq!(rejected, state.acc.rejected);
    }
}
