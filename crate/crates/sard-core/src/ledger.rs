//! Hash-chained append-only ledgers: one chain per zone plus a summarizing
//! main chain. Commits batch pending records into SHA-256-linked blocks;
//! merge and split rewire chains across rezoning while conserving the global
//! record multiset; dumps support offline re-verification.
//!
//! There is no consensus here — each chain has a single writer — but the
//! canonical byte encoding is fixed (little-endian fixed-width integers,
//! 4-byte length-prefixed byte strings, fields in declared order) so hashes
//! are reproducible across platforms.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::catalog::{AdreAction, SiEvent, SiId};
use crate::mobility::UserId;
use crate::semantics::KbStat;
use crate::topology::NodeId;
use crate::zoning::{ZoneId, ZonePlan};

/// Most records a single block may carry.
pub const MAX_BATCH: usize = 32;

const BINARY_MAGIC: &[u8; 8] = b"SARDLDG1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChainId(pub u64);

/// Service-request identifier, minted by the engine, referenced by records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SrId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    /// Chain lineage marker written into the genesis block of a merged or
    /// split chain; carries the parent head hashes. Structural, not payload:
    /// conservation is defined over the other variants.
    Lineage {
        #[serde(with = "serde_hex_vec")]
        parents: Vec<[u8; 32]>,
    },
    /// One handled (accepted) service request.
    Sr {
        sr: SrId,
        user: UserId,
        feature_id: u64,
        chosen: SiId,
        cost: u64,
        /// PoA the request was served through; anchors the record to a zone
        /// side during chain splits.
        poa: NodeId,
        step: u64,
    },
    /// An advertising action applied to the catalog.
    Si { event: SiEvent, step: u64 },
    /// A trust-score movement for one instance.
    Trust {
        si: SiId,
        /// Host node association used during chain splits.
        host: NodeId,
        delta: f64,
        new_trust: f64,
        step: u64,
    },
    /// Knowledge-base statistics snapshot (main chain).
    KbStat { stat: KbStat, step: u64 },
    /// Per-zone activity summary (main chain).
    ZoneSummary {
        epoch: u64,
        zone: ZoneId,
        sr_count: u64,
        si_count: u64,
        kb_entries: u32,
        step: u64,
    },
}

impl Record {
    pub fn is_payload(&self) -> bool {
        !matches!(self, Record::Lineage { .. })
    }

    /// Node this record is anchored to for split membership; `None` routes to
    /// side A by convention.
    pub fn side_node(&self) -> Option<NodeId> {
        match self {
            Record::Sr { poa, .. } => Some(*poa),
            Record::Si { event, .. } => Some(event.host),
            Record::Trust { host, .. } => Some(*host),
            Record::Lineage { .. } | Record::KbStat { .. } | Record::ZoneSummary { .. } => None,
        }
    }

    /// Canonical byte encoding: a variant tag, then fields in declared order.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            Record::Lineage { parents } => {
                out.push(0u8);
                out.push(parents.len() as u8);
                for p in parents {
                    out.extend_from_slice(p);
                }
            }
            Record::Sr {
                sr,
                user,
                feature_id,
                chosen,
                cost,
                poa,
                step,
            } => {
                out.push(1u8);
                out.extend_from_slice(&sr.0.to_le_bytes());
                out.extend_from_slice(&user.0.to_le_bytes());
                out.extend_from_slice(&feature_id.to_le_bytes());
                out.extend_from_slice(&chosen.0.to_le_bytes());
                out.extend_from_slice(&cost.to_le_bytes());
                out.extend_from_slice(&poa.0.to_le_bytes());
                out.extend_from_slice(&step.to_le_bytes());
            }
            Record::Si { event, step } => {
                out.push(2u8);
                out.push(match event.action {
                    AdreAction::Register => 0,
                    AdreAction::Modify => 1,
                    AdreAction::Deregister => 2,
                });
                out.extend_from_slice(&event.instance.0.to_le_bytes());
                out.extend_from_slice(&event.provider.0.to_le_bytes());
                out.extend_from_slice(&event.service_type.0.to_le_bytes());
                out.extend_from_slice(&event.host.0.to_le_bytes());
                out.extend_from_slice(&event.cost.to_le_bytes());
                out.extend_from_slice(&event.capacity.to_le_bytes());
                out.extend_from_slice(&step.to_le_bytes());
            }
            Record::Trust {
                si,
                host,
                delta,
                new_trust,
                step,
            } => {
                out.push(3u8);
                out.extend_from_slice(&si.0.to_le_bytes());
                out.extend_from_slice(&host.0.to_le_bytes());
                out.extend_from_slice(&delta.to_le_bytes());
                out.extend_from_slice(&new_trust.to_le_bytes());
                out.extend_from_slice(&step.to_le_bytes());
            }
            Record::KbStat { stat, step } => {
                out.push(4u8);
                out.extend_from_slice(&stat.generation.to_le_bytes());
                out.extend_from_slice(&stat.entries.to_le_bytes());
                out.extend_from_slice(&step.to_le_bytes());
            }
            Record::ZoneSummary {
                epoch,
                zone,
                sr_count,
                si_count,
                kb_entries,
                step,
            } => {
                out.push(5u8);
                out.extend_from_slice(&epoch.to_le_bytes());
                out.extend_from_slice(&zone.0.to_le_bytes());
                out.extend_from_slice(&sr_count.to_le_bytes());
                out.extend_from_slice(&si_count.to_le_bytes());
                out.extend_from_slice(&kb_entries.to_le_bytes());
                out.extend_from_slice(&step.to_le_bytes());
            }
        }
        out
    }
}

mod serde_hex {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let text = String::deserialize(d)?;
        let raw = hex::decode(&text).map_err(serde::de::Error::custom)?;
        raw.try_into()
            .map_err(|_| serde::de::Error::custom("expected 32 bytes"))
    }
}

mod serde_hex_vec {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[[u8; 32]], s: S) -> Result<S::Ok, S::Error> {
        let hexes: Vec<String> = v.iter().map(hex::encode).collect();
        serde::Serialize::serialize(&hexes, s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<[u8; 32]>, D::Error> {
        let hexes: Vec<String> = Vec::deserialize(d)?;
        hexes
            .into_iter()
            .map(|h| {
                hex::decode(&h)
                    .map_err(serde::de::Error::custom)
                    .and_then(|raw| {
                        raw.try_into()
                            .map_err(|_| serde::de::Error::custom("expected 32 bytes"))
                    })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub index: u64,
    #[serde(with = "serde_hex")]
    pub prev_hash: [u8; 32],
    /// Simulation step the block was committed at.
    pub timestamp: u64,
    pub records: Vec<Record>,
    #[serde(with = "serde_hex")]
    pub hash: [u8; 32],
}

impl Block {
    /// Canonical bytes the hash covers: index, prev_hash, timestamp, record
    /// count, then each record length-prefixed.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.index.to_le_bytes());
        out.extend_from_slice(&self.prev_hash);
        out.extend_from_slice(&self.timestamp.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            let bytes = r.canonical_bytes();
            out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
            out.extend_from_slice(&bytes);
        }
        out
    }

    pub fn compute_hash(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_bytes()).into()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LedgerError {
    #[error("chain corrupt at block {0}")]
    CorruptAt(u64),
    #[error("cannot merge: input chain {0:?} fails verification")]
    MergeOfCorrupt(Side),
    #[error("cannot split a chain that fails verification")]
    SplitOfCorrupt,
    #[error("unreadable ledger dump: {0}")]
    BadDump(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Ledger {
    pub chain_id: ChainId,
    pub blocks: Vec<Block>,
    pub pending: Vec<Record>,
    /// Head hashes of the chains this one was merged or split from.
    #[serde(with = "serde_hex_vec")]
    pub parent_heads: Vec<[u8; 32]>,
}

impl Ledger {
    pub fn new(chain_id: ChainId) -> Self {
        Self {
            chain_id,
            blocks: Vec::new(),
            pending: Vec::new(),
            parent_heads: Vec::new(),
        }
    }

    /// Hash of the last block, or all zeros for an empty chain.
    pub fn head(&self) -> [u8; 32] {
        self.blocks.last().map(|b| b.hash).unwrap_or([0u8; 32])
    }

    /// Buffers a record; block formation happens at [`Ledger::commit`], off
    /// the request/response critical path.
    pub fn append(&mut self, record: Record) {
        self.pending.push(record);
    }

    /// Drains pending records into hash-linked blocks of at most
    /// [`MAX_BATCH`] records, in arrival order. Returns the new blocks.
    pub fn commit(&mut self, step: u64) -> Vec<Block> {
        if self.pending.is_empty() {
            return Vec::new();
        }
        let mut new_blocks = Vec::new();
        let pending = std::mem::take(&mut self.pending);
        for chunk in pending.chunks(MAX_BATCH) {
            let mut block = Block {
                index: self.blocks.len() as u64,
                prev_hash: self.head(),
                timestamp: step,
                records: chunk.to_vec(),
                hash: [0u8; 32],
            };
            block.hash = block.compute_hash();
            self.blocks.push(block.clone());
            new_blocks.push(block);
        }
        new_blocks
    }

    /// Recomputes every hash and link; the first bad block is the verdict.
    pub fn verify(&self) -> Result<(), LedgerError> {
        let mut prev = [0u8; 32];
        for (i, block) in self.blocks.iter().enumerate() {
            if block.index != i as u64
                || block.prev_hash != prev
                || block.hash != block.compute_hash()
            {
                return Err(LedgerError::CorruptAt(i as u64));
            }
            prev = block.hash;
        }
        Ok(())
    }

    /// Committed payload records in block order (lineage markers excluded).
    pub fn committed_payload(&self) -> impl Iterator<Item = &Record> {
        self.blocks
            .iter()
            .flat_map(|b| b.records.iter())
            .filter(|r| r.is_payload())
    }

    /// All payload records: committed first, then pending.
    pub fn payload_records(&self) -> impl Iterator<Item = &Record> {
        self.committed_payload()
            .chain(self.pending.iter().filter(|r| r.is_payload()))
    }

    /// Multiset of payload records keyed by canonical bytes; the quantity
    /// merge and split must conserve.
    pub fn payload_multiset(&self) -> BTreeMap<Vec<u8>, usize> {
        let mut m = BTreeMap::new();
        for r in self.payload_records() {
            *m.entry(r.canonical_bytes()).or_insert(0) += 1;
        }
        m
    }

    pub fn record_count(&self) -> usize {
        self.payload_records().count()
    }

    fn last_timestamp(&self) -> u64 {
        self.blocks.last().map(|b| b.timestamp).unwrap_or(0)
    }
}

/// Sums two payload multisets.
pub fn multiset_union(
    a: BTreeMap<Vec<u8>, usize>,
    b: &BTreeMap<Vec<u8>, usize>,
) -> BTreeMap<Vec<u8>, usize> {
    let mut out = a;
    for (k, v) in b {
        *out.entry(k.clone()).or_insert(0) += v;
    }
    out
}

/// Seeds a chain with a lineage genesis block, re-commits the given payload
/// records in order, and carries over uncommitted pending records.
fn seeded_chain(
    chain_id: ChainId,
    parents: Vec<[u8; 32]>,
    records: Vec<Record>,
    pending: Vec<Record>,
    timestamp: u64,
) -> Ledger {
    let mut ledger = Ledger::new(chain_id);
    ledger.parent_heads = parents.clone();
    ledger.append(Record::Lineage { parents });
    ledger.commit(timestamp);
    for r in records {
        ledger.append(r);
    }
    ledger.commit(timestamp);
    ledger.pending = pending;
    ledger
}

/// Joins two verified chains into a fresh one. The new genesis records both
/// parent heads; all payload records of `a` then `b` are re-committed in
/// their original block order, and uncommitted pending records carry over.
pub fn merge(a: &Ledger, b: &Ledger, new_chain_id: ChainId) -> Result<Ledger, LedgerError> {
    if a.verify().is_err() {
        return Err(LedgerError::MergeOfCorrupt(Side::A));
    }
    if b.verify().is_err() {
        return Err(LedgerError::MergeOfCorrupt(Side::B));
    }
    let records: Vec<Record> = a
        .committed_payload()
        .chain(b.committed_payload())
        .cloned()
        .collect();
    let pending: Vec<Record> = a
        .pending
        .iter()
        .chain(b.pending.iter())
        .filter(|r| r.is_payload())
        .cloned()
        .collect();
    let timestamp = a.last_timestamp().max(b.last_timestamp());
    Ok(seeded_chain(
        new_chain_id,
        vec![a.head(), b.head()],
        records,
        pending,
        timestamp,
    ))
}

/// Splits a verified chain in two by node membership. Records anchored to a
/// node follow that node's side; unanchored records (KB statistics, zone
/// summaries) go to side A. Both children record the parent head in their
/// genesis.
pub fn split(
    ledger: &Ledger,
    membership: &BTreeMap<NodeId, Side>,
    ids: (ChainId, ChainId),
) -> Result<(Ledger, Ledger), LedgerError> {
    if ledger.verify().is_err() {
        return Err(LedgerError::SplitOfCorrupt);
    }
    let side_of = |r: &Record| match r.side_node().and_then(|n| membership.get(&n)) {
        Some(Side::B) => Side::B,
        _ => Side::A,
    };
    let mut rec_a = Vec::new();
    let mut rec_b = Vec::new();
    for r in ledger.committed_payload() {
        match side_of(r) {
            Side::A => rec_a.push(r.clone()),
            Side::B => rec_b.push(r.clone()),
        }
    }
    let mut pend_a = Vec::new();
    let mut pend_b = Vec::new();
    for r in ledger.pending.iter().filter(|r| r.is_payload()) {
        match side_of(r) {
            Side::A => pend_a.push(r.clone()),
            Side::B => pend_b.push(r.clone()),
        }
    }
    let ts = ledger.last_timestamp();
    let parents = vec![ledger.head()];
    Ok((
        seeded_chain(ids.0, parents.clone(), rec_a, pend_a, ts),
        seeded_chain(ids.1, parents, rec_b, pend_b, ts),
    ))
}

/// Appends one ZoneSummary per zone to the main chain's pending buffer.
/// `per_zone` rows are (sr_count, si_count, kb_entries) in plan order.
pub fn summarize_to_main(main: &mut Ledger, plan: &ZonePlan, per_zone: &[(u64, u64, u32)], step: u64) {
    debug_assert_eq!(plan.zones.len(), per_zone.len());
    for (zone, &(sr_count, si_count, kb_entries)) in plan.zones.iter().zip(per_zone) {
        main.append(Record::ZoneSummary {
            epoch: plan.epoch,
            zone: zone.id,
            sr_count,
            si_count,
            kb_entries,
            step,
        });
    }
}

// ---------------------------------------------------------------------------
// Dump formats
// ---------------------------------------------------------------------------

/// Header line of the NDJSON dump.
#[derive(Debug, Serialize, Deserialize)]
struct NdjsonHeader {
    format: String,
    chain_id: u64,
    #[serde(with = "serde_hex_vec")]
    parent_heads: Vec<[u8; 32]>,
    blocks: u64,
}

impl Ledger {
    /// Newline-delimited JSON: a header line, then one block per line.
    /// Committed blocks only; pending records are not part of a dump.
    pub fn to_ndjson(&self) -> String {
        let header = NdjsonHeader {
            format: "ledger-ndjson-v1".into(),
            chain_id: self.chain_id.0,
            parent_heads: self.parent_heads.clone(),
            blocks: self.blocks.len() as u64,
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for block in &self.blocks {
            out.push_str(&serde_json::to_string(block).expect("block serializes"));
            out.push('\n');
        }
        out
    }

    /// Binary canonical dump: magic, chain metadata, then each block's
    /// canonical bytes followed by its stored hash. Self-contained for
    /// offline verification.
    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BINARY_MAGIC);
        out.extend_from_slice(&self.chain_id.0.to_le_bytes());
        out.push(self.parent_heads.len() as u8);
        for p in &self.parent_heads {
            out.extend_from_slice(p);
        }
        out.extend_from_slice(&(self.blocks.len() as u64).to_le_bytes());
        for block in &self.blocks {
            let canonical = block.canonical_bytes();
            out.extend_from_slice(&(canonical.len() as u64).to_le_bytes());
            out.extend_from_slice(&canonical);
            out.extend_from_slice(&block.hash);
        }
        out
    }
}

/// Re-verifies an NDJSON dump produced by [`Ledger::to_ndjson`].
pub fn verify_ndjson(text: &str) -> Result<(), LedgerError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header_line = lines.next().ok_or_else(|| LedgerError::BadDump("empty dump".into()))?;
    let header: NdjsonHeader = serde_json::from_str(header_line)
        .map_err(|e| LedgerError::BadDump(format!("bad header: {e}")))?;
    let mut ledger = Ledger::new(ChainId(header.chain_id));
    ledger.parent_heads = header.parent_heads;
    for line in lines {
        let block: Block = serde_json::from_str(line)
            .map_err(|e| LedgerError::BadDump(format!("bad block line: {e}")))?;
        ledger.blocks.push(block);
    }
    if ledger.blocks.len() as u64 != header.blocks {
        return Err(LedgerError::BadDump(format!(
            "header promises {} blocks, found {}",
            header.blocks,
            ledger.blocks.len()
        )));
    }
    ledger.verify()
}

/// Verifies a dump in either format, sniffing binary by its magic.
pub fn verify_dump(bytes: &[u8]) -> Result<(), LedgerError> {
    if bytes.starts_with(BINARY_MAGIC) {
        return verify_binary(bytes);
    }
    let text = std::str::from_utf8(bytes)
        .map_err(|_| LedgerError::BadDump("neither binary magic nor UTF-8 text".into()))?;
    verify_ndjson(text)
}

/// Re-verifies a binary dump produced by [`Ledger::to_binary`] without
/// decoding individual records: block hashes are recomputed straight from the
/// stored canonical bytes.
pub fn verify_binary(bytes: &[u8]) -> Result<(), LedgerError> {
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8], LedgerError> {
        let end = at
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| LedgerError::BadDump("truncated dump".into()))?;
        let slice = &bytes[*at..end];
        *at = end;
        Ok(slice)
    };
    if take(&mut at, 8)? != BINARY_MAGIC {
        return Err(LedgerError::BadDump("bad magic".into()));
    }
    let _chain_id = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap());
    let n_parents = take(&mut at, 1)?[0] as usize;
    take(&mut at, 32 * n_parents)?;
    let n_blocks = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap());
    let mut prev = [0u8; 32];
    for i in 0..n_blocks {
        let len = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()) as usize;
        let canonical = take(&mut at, len)?;
        let stored_hash: [u8; 32] = take(&mut at, 32)?.try_into().unwrap();
        // Canonical layout starts with index and prev_hash; cross-check links.
        if canonical.len() < 8 + 32 + 8 + 4 {
            return Err(LedgerError::BadDump(format!("block {i} too short")));
        }
        let index = u64::from_le_bytes(canonical[..8].try_into().unwrap());
        let prev_hash: [u8; 32] = canonical[8..40].try_into().unwrap();
        let computed: [u8; 32] = Sha256::digest(canonical).into();
        if index != i || prev_hash != prev || computed != stored_hash {
            return Err(LedgerError::CorruptAt(i));
        }
        prev = stored_hash;
    }
    if at != bytes.len() {
        return Err(LedgerError::BadDump("trailing bytes after last block".into()));
    }
    Ok(())
}
