//! Capacity bookkeeping: atomic multi-entity reservations over path links,
//! host node, and service instance, with a replayable log for conservation
//! audits.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, SiId};
use crate::topology::{LinkId, NodeId, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TokenId(pub u64);

/// The entity a failed reservation first ran out of room on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Entity {
    Link(LinkId),
    Node(NodeId),
    Instance(SiId),
}

impl std::fmt::Display for Entity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Entity::Link(l) => write!(f, "link {l}"),
            Entity::Node(n) => write!(f, "node {n}"),
            Entity::Instance(s) => write!(f, "instance {s}"),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReservationError {
    #[error("reservation rate must be positive")]
    ZeroRate,
    #[error("insufficient capacity on {0}")]
    CapacityExceeded(Entity),
    #[error("unknown instance {0}")]
    UnknownInstance(SiId),
    #[error("token {0:?} already released or never issued")]
    StaleToken(TokenId),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Reservation {
    pub token: TokenId,
    pub links: Vec<LinkId>,
    pub host: NodeId,
    pub si: SiId,
    pub rate: u32,
    pub released: bool,
}

/// Issues tokens and remembers every reservation ever made, so `audit` can
/// recompute each entity's expected load from outstanding tokens alone.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ReservationBook {
    entries: Vec<Reservation>,
}

impl ReservationBook {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, token: TokenId) -> Option<&Reservation> {
        self.entries.get(token.0 as usize)
    }

    pub fn outstanding(&self) -> impl Iterator<Item = &Reservation> {
        self.entries.iter().filter(|r| !r.released)
    }

    /// Atomically reserves `rate` Gbps on every path link, the host node, and
    /// the instance. Either all `used` counters move or none do; the first
    /// entity without room (links in path order, then host, then instance) is
    /// named in the error.
    pub fn reserve(
        &mut self,
        topo: &mut Topology,
        catalog: &mut Catalog,
        links: &[LinkId],
        host: NodeId,
        si: SiId,
        rate: u32,
    ) -> Result<TokenId, ReservationError> {
        if rate == 0 {
            return Err(ReservationError::ZeroRate);
        }
        if catalog.instance(si).is_none() {
            return Err(ReservationError::UnknownInstance(si));
        }
        // Check phase. A link may appear twice in a degenerate path, so track
        // the load this reservation has already promised to each entity.
        let mut promised: std::collections::BTreeMap<LinkId, u32> = std::collections::BTreeMap::new();
        for &l in links {
            let extra = promised.entry(l).or_insert(0);
            *extra += rate;
            let link = topo.link(l);
            if link.used + *extra > link.capacity {
                return Err(ReservationError::CapacityExceeded(Entity::Link(l)));
            }
        }
        let node = topo.node(host);
        if node.used + rate > node.capacity {
            return Err(ReservationError::CapacityExceeded(Entity::Node(host)));
        }
        let inst = catalog.instance(si).unwrap();
        if inst.used + rate > inst.capacity {
            return Err(ReservationError::CapacityExceeded(Entity::Instance(si)));
        }
        // Apply phase.
        for &l in links {
            topo.link_mut(l).used += rate;
        }
        topo.node_mut(host).used += rate;
        catalog.instance_mut(si).unwrap().used += rate;
        let token = TokenId(self.entries.len() as u64);
        self.entries.push(Reservation {
            token,
            links: links.to_vec(),
            host,
            si,
            rate,
            released: false,
        });
        Ok(token)
    }

    /// Returns a token's capacity to every entity it was charged against.
    pub fn release(
        &mut self,
        topo: &mut Topology,
        catalog: &mut Catalog,
        token: TokenId,
    ) -> Result<(), ReservationError> {
        let entry = self
            .entries
            .get_mut(token.0 as usize)
            .filter(|r| !r.released)
            .ok_or(ReservationError::StaleToken(token))?;
        entry.released = true;
        let (links, host, si, rate) = (entry.links.clone(), entry.host, entry.si, entry.rate);
        for l in links {
            topo.link_mut(l).used -= rate;
        }
        topo.node_mut(host).used -= rate;
        catalog.instance_mut(si).unwrap().used -= rate;
        Ok(())
    }

    /// Conservation check: every `used` counter must equal the sum of rates of
    /// outstanding reservations touching that entity. Returns the mismatching
    /// entities with (actual, expected) loads.
    pub fn audit(&self, topo: &Topology, catalog: &Catalog) -> Vec<(Entity, u32, u32)> {
        let mut link_load = vec![0u32; topo.links.len()];
        let mut node_load = vec![0u32; topo.nodes.len()];
        let mut si_load = vec![0u32; catalog.instances.len()];
        for r in self.outstanding() {
            for &l in &r.links {
                link_load[l.0 as usize] += r.rate;
            }
            node_load[r.host.0 as usize] += r.rate;
            si_load[r.si.0 as usize] += r.rate;
        }
        let mut bad = Vec::new();
        for link in &topo.links {
            let want = link_load[link.id.0 as usize];
            if link.used != want {
                bad.push((Entity::Link(link.id), link.used, want));
            }
        }
        for node in &topo.nodes {
            let want = node_load[node.id.0 as usize];
            if node.used != want {
                bad.push((Entity::Node(node.id), node.used, want));
            }
        }
        for si in &catalog.instances {
            let want = si_load[si.id.0 as usize];
            if si.used != want {
                bad.push((Entity::Instance(si.id), si.used, want));
            }
        }
        bad
    }
}
