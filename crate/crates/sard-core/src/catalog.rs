//! Provider/instance catalog and the advertising (AdRe) workflow: providers
//! register, modify, and deregister service instances, and a monitoring pass
//! keeps availability in sync with host battery and load.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::{battery_step, NodeId, NodeKind, Topology};

pub const SI_COST_RANGE: (u32, u32) = (25, 40);
pub const SI_CAPACITY_RANGE: (u32, u32) = (20, 50);
pub const DEFAULT_PROVIDERS: usize = 20;
pub const SIS_PER_PROVIDER_RANGE: (u32, u32) = (3, 5);

/// Minimum host battery (percent) for an instance to count as available.
pub const B_MIN_PCT: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SiId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ProviderId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ServiceTypeId(pub u32);

impl std::fmt::Display for SiId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "si{}", self.0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServiceInstance {
    pub id: SiId,
    pub provider: ProviderId,
    pub service_type: ServiceTypeId,
    pub host: NodeId,
    pub cost: u32,
    /// Gbps.
    pub capacity: u32,
    pub used: u32,
    /// Reliability score in [0, 1], moved by served/failed outcomes.
    pub trust: f64,
    pub registered: bool,
    pub available: bool,
}

/// An ordered chain of atomic service types offered as one composite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompositeService {
    pub id: ServiceTypeId,
    pub parts: Vec<ServiceTypeId>,
}

impl CompositeService {
    pub fn validate(&self) -> Result<(), CatalogError> {
        if self.parts.is_empty() {
            return Err(CatalogError::EmptyComposite(self.id));
        }
        if self.parts.windows(2).any(|w| w[0] == w[1]) {
            return Err(CatalogError::RepeatedCompositePart(self.id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdreAction {
    Register,
    Modify,
    Deregister,
}

/// Descriptor payload of an advertising request.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AdreBody {
    /// Full instance descriptor, for register/modify.
    Descriptor(ServiceInstance),
    /// Addressed instance, for deregister.
    Instance(SiId),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdvertisingRequest {
    pub provider: ProviderId,
    pub action: AdreAction,
    pub body: AdreBody,
    /// Entry PoA the request arrived through.
    pub poa: NodeId,
    pub timestamp: u64,
}

/// Immutable snapshot of the instance an AdRe touched, embedded in the ledger
/// record so chain verification never needs the live catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiEvent {
    pub action: AdreAction,
    pub instance: SiId,
    pub provider: ProviderId,
    pub service_type: ServiceTypeId,
    pub host: NodeId,
    pub cost: u32,
    pub capacity: u32,
}

/// Acknowledgement returned to the provider after a successful AdRe.
#[derive(Debug, Clone, PartialEq)]
pub struct AdreAck {
    pub provider: ProviderId,
    pub action: AdreAction,
    pub instance: SiId,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CatalogError {
    #[error("topology has no edge or cloud nodes to host instances")]
    NoHosts,
    #[error("unknown provider {0:?}")]
    UnknownProvider(ProviderId),
    #[error("unknown instance {0}")]
    UnknownInstance(SiId),
    #[error("instance {0} does not belong to provider {1:?}")]
    ForeignInstance(SiId, ProviderId),
    #[error("descriptor references unknown host node {0}")]
    UnknownHost(NodeId),
    #[error("composite {0:?} has no parts")]
    EmptyComposite(ServiceTypeId),
    #[error("composite {0:?} repeats a part back-to-back")]
    RepeatedCompositePart(ServiceTypeId),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Catalog {
    pub instances: Vec<ServiceInstance>,
    pub providers: Vec<ProviderId>,
    pub composites: Vec<CompositeService>,
}

impl Catalog {
    pub fn instance(&self, id: SiId) -> Option<&ServiceInstance> {
        self.instances.get(id.0 as usize).filter(|si| si.id == id)
    }

    pub fn instance_mut(&mut self, id: SiId) -> Option<&mut ServiceInstance> {
        self.instances.get_mut(id.0 as usize).filter(|si| si.id == id)
    }

    pub fn registered(&self) -> impl Iterator<Item = &ServiceInstance> {
        self.instances.iter().filter(|si| si.registered)
    }

    fn has_provider(&self, p: ProviderId) -> bool {
        self.providers.contains(&p)
    }
}

/// Draws a provider catalog against an existing topology. Instances start
/// unregistered; registration happens through [`apply_adre`].
pub fn generate_catalog(
    seed: u64,
    topo: &Topology,
    n_providers: usize,
) -> Result<Catalog, CatalogError> {
    let hosts: Vec<NodeId> = topo
        .nodes
        .iter()
        .filter(|n| n.kind != NodeKind::Poa)
        .map(|n| n.id)
        .collect();
    if hosts.is_empty() {
        return Err(CatalogError::NoHosts);
    }
    let mut rng = crate::rng::stream(seed, "catalog");
    let mut catalog = Catalog::default();
    let mut next_id = 0u32;
    for p in 0..n_providers {
        let provider = ProviderId(p as u32);
        catalog.providers.push(provider);
        let count = rng.random_range(SIS_PER_PROVIDER_RANGE.0..=SIS_PER_PROVIDER_RANGE.1);
        for _ in 0..count {
            let host = hosts[rng.random_range(0..hosts.len())];
            // Each instance offers one drawn service type; the type universe
            // is set by the knowledge base (see `semantics`).
            let service_type =
                ServiceTypeId(rng.random_range(0..crate::semantics::DEFAULT_SERVICE_TYPES));
            catalog.instances.push(ServiceInstance {
                id: SiId(next_id),
                provider,
                service_type,
                host,
                cost: rng.random_range(SI_COST_RANGE.0..=SI_COST_RANGE.1),
                capacity: rng.random_range(SI_CAPACITY_RANGE.0..=SI_CAPACITY_RANGE.1),
                used: 0,
                trust: 1.0,
                registered: false,
                available: false,
            });
            next_id += 1;
        }
    }
    Ok(catalog)
}

/// Applies one advertising request, mutating only the addressed instance.
///
/// On success returns the event to append to the zone chain plus the
/// provider's ack. Register accepts either an instance already present in the
/// catalog (pre-generated, unregistered) or a brand-new descriptor, which is
/// then inserted under its own id.
pub fn apply_adre(
    catalog: &mut Catalog,
    topo: &Topology,
    adre: &AdvertisingRequest,
) -> Result<(SiEvent, AdreAck), CatalogError> {
    if !catalog.has_provider(adre.provider) {
        return Err(CatalogError::UnknownProvider(adre.provider));
    }
    let event_of = |action: AdreAction, si: &ServiceInstance| SiEvent {
        action,
        instance: si.id,
        provider: si.provider,
        service_type: si.service_type,
        host: si.host,
        cost: si.cost,
        capacity: si.capacity,
    };
    let si_id = match (&adre.action, &adre.body) {
        (AdreAction::Register, AdreBody::Descriptor(desc)) => {
            if !topo.contains_node(desc.host) {
                return Err(CatalogError::UnknownHost(desc.host));
            }
            if desc.provider != adre.provider {
                return Err(CatalogError::ForeignInstance(desc.id, adre.provider));
            }
            match catalog.instance_mut(desc.id) {
                Some(existing) => {
                    if existing.provider != adre.provider {
                        return Err(CatalogError::ForeignInstance(desc.id, adre.provider));
                    }
                    existing.registered = true;
                    existing.available = true;
                    existing.id
                }
                None => {
                    let mut fresh = desc.clone();
                    fresh.id = SiId(catalog.instances.len() as u32);
                    fresh.used = 0;
                    fresh.registered = true;
                    fresh.available = true;
                    let id = fresh.id;
                    catalog.instances.push(fresh);
                    id
                }
            }
        }
        (AdreAction::Modify, AdreBody::Descriptor(desc)) => {
            if !topo.contains_node(desc.host) {
                return Err(CatalogError::UnknownHost(desc.host));
            }
            let si = catalog
                .instance_mut(desc.id)
                .ok_or(CatalogError::UnknownInstance(desc.id))?;
            if si.provider != adre.provider {
                return Err(CatalogError::ForeignInstance(desc.id, adre.provider));
            }
            // Descriptor fields replaced; usage, trust, and registration state
            // carry over.
            si.service_type = desc.service_type;
            si.host = desc.host;
            si.cost = desc.cost;
            si.capacity = desc.capacity;
            si.id
        }
        (AdreAction::Deregister, AdreBody::Instance(id)) => {
            let si = catalog
                .instance_mut(*id)
                .ok_or(CatalogError::UnknownInstance(*id))?;
            if si.provider != adre.provider {
                return Err(CatalogError::ForeignInstance(*id, adre.provider));
            }
            // Outstanding reservations drain naturally; only new selection
            // is gated off.
            si.registered = false;
            si.available = false;
            si.id
        }
        // Mismatched action/payload combinations address no known instance.
        (AdreAction::Deregister, AdreBody::Descriptor(desc)) => {
            return Err(CatalogError::UnknownInstance(desc.id))
        }
        (_, AdreBody::Instance(id)) => return Err(CatalogError::UnknownInstance(*id)),
    };
    let si = catalog.instance(si_id).expect("instance just touched");
    Ok((
        event_of(adre.action, si),
        AdreAck {
            provider: adre.provider,
            action: adre.action,
            instance: si_id,
        },
    ))
}

/// One monitoring pass: advances every host's battery by one step of the
/// drain/harvest recurrence (once per node, using the node's aggregate served
/// load), then recomputes per-instance availability. Returns the instances
/// whose availability flipped.
pub fn monitor_step(catalog: &mut Catalog, topo: &mut Topology) -> Vec<(SiId, bool)> {
    for node in &mut topo.nodes {
        node.battery = battery_step(node.battery, node.used, node.harvest_rate);
    }
    let mut flips = Vec::new();
    for si in &mut catalog.instances {
        if !si.registered {
            continue;
        }
        let host = topo.node(si.host);
        let now = host.battery > B_MIN_PCT && si.used < si.capacity;
        if now != si.available {
            flips.push((si.id, now));
            si.available = now;
        }
    }
    flips
}

/// Registers every generated instance via the normal AdRe path; convenience
/// used by scenario setup. Returns the emitted events in catalog order.
pub fn register_all(
    catalog: &mut Catalog,
    topo: &Topology,
    poa: NodeId,
    timestamp: u64,
) -> Vec<SiEvent> {
    let descriptors: Vec<ServiceInstance> = catalog.instances.clone();
    let mut events = Vec::with_capacity(descriptors.len());
    for desc in descriptors {
        let adre = AdvertisingRequest {
            provider: desc.provider,
            action: AdreAction::Register,
            body: AdreBody::Descriptor(desc),
            poa,
            timestamp,
        };
        let (event, _) = apply_adre(catalog, topo, &adre).expect("self-consistent catalog");
        events.push(event);
    }
    events
}

/// Aggregate served Gbps per host, used to reconcile node-level bookkeeping
/// in audits.
pub fn served_by_host(catalog: &Catalog) -> BTreeMap<NodeId, u32> {
    let mut map = BTreeMap::new();
    for si in &catalog.instances {
        if si.used > 0 {
            *map.entry(si.host).or_insert(0) += si.used;
        }
    }
    map
}
