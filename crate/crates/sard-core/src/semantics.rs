//! Semantic layer: intent extraction against a knowledge base, the fixed
//! 16-byte encoded request message, and per-PoA response caching with an
//! aging window.
//!
//! The transmitter side hashes a request's tokens into a stable signature,
//! looks up the (modality, signature) pair in the KB, and ships only the
//! 8-byte feature id plus 8 bytes of packed QoS. The receiver side inverts
//! the lookup. Everything is exact-match: no similarity search.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::ServiceTypeId;

/// Size of every encoded request message in bytes.
pub const ENCODED_SIZE: u32 = 16;

/// Default cache aging window, in steps.
pub const DEFAULT_AGING_WINDOW: u64 = 10;

/// Default per-PoA cache capacity.
pub const DEFAULT_CACHE_CAPACITY: usize = 64;

/// Service types covered by the bundled knowledge base.
pub const DEFAULT_SERVICE_TYPES: u32 = 12;

/// QoS bound applied when an unknown intent is forwarded raw (fallback mode).
pub const RAW_FALLBACK_MAX_LATENCY_MS: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Voice,
    Sensor,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Voice, Modality::Sensor];

    pub(crate) fn tag(self) -> u8 {
        match self {
            Modality::Text => 0,
            Modality::Voice => 1,
            Modality::Sensor => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Priority {
    Normal,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemanticFeature {
    pub feature_id: u64,
    pub service_type: ServiceTypeId,
    /// Gbps demanded.
    pub rate: u32,
    /// QoS bound in milliseconds.
    pub max_latency_ms: f64,
    pub priority: Priority,
}

/// 64-bit FNV-1a.
fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Canonical token signature: case-folded tokens, sorted, each hashed with a
/// 4-byte little-endian length prefix. Permutation- and case-invariant.
pub fn token_signature(tokens: &[String]) -> u64 {
    let mut folded: Vec<String> = tokens.iter().map(|t| t.to_lowercase()).collect();
    folded.sort();
    let mut bytes = Vec::new();
    for t in &folded {
        bytes.extend_from_slice(&(t.len() as u32).to_le_bytes());
        bytes.extend_from_slice(t.as_bytes());
    }
    fnv1a(bytes)
}

/// Stable feature id for a (modality, signature) pair.
pub fn feature_id_for(modality: Modality, signature: u64) -> u64 {
    let mut bytes = vec![modality.tag()];
    bytes.extend_from_slice(&signature.to_le_bytes());
    fnv1a(bytes)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KbEntry {
    pub modality: Modality,
    pub signature: u64,
    pub feature: SemanticFeature,
    /// Tokens the signature was derived from, kept for dump readability.
    pub tokens: Vec<String>,
}

/// On-disk KB schema: token lists plus feature fields; signatures and feature
/// ids are derived on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct KbFileEntry {
    modality: Modality,
    tokens: Vec<String>,
    service_type: u32,
    rate: u32,
    max_latency_ms: f64,
    priority: Priority,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct KbFile {
    entries: Vec<KbFileEntry>,
}

/// Statistics snapshot emitted after every KB update, destined for the main
/// chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbStat {
    pub generation: u64,
    pub entries: u32,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SemanticsError {
    #[error("knowledge base is empty")]
    EmptyKb,
    #[error("no knowledge-base entry matches the request intent")]
    UnknownIntent,
    #[error("unknown feature id {0:#x}")]
    UnknownFeature(u64),
    #[error("bad knowledge-base entry: {0}")]
    BadEntry(String),
    #[error("knowledge-base file is not valid JSON: {0}")]
    BadFile(String),
}

/// The knowledge base. Copy-on-update: `kb_update` bumps the generation and
/// never mutates entries in place under a reader.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Kb {
    entries: BTreeMap<(Modality, u64), KbEntry>,
    by_feature: BTreeMap<u64, (Modality, u64)>,
    pub generation: u64,
}

impl Kb {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &KbEntry> {
        self.entries.values()
    }

    /// Distinct service types present, sorted.
    pub fn service_types(&self) -> Vec<ServiceTypeId> {
        let mut types: Vec<ServiceTypeId> =
            self.entries.values().map(|e| e.feature.service_type).collect();
        types.sort();
        types.dedup();
        types
    }

    pub fn from_json(json: &str) -> Result<Self, SemanticsError> {
        let file: KbFile =
            serde_json::from_str(json).map_err(|e| SemanticsError::BadFile(e.to_string()))?;
        let mut kb = Kb::new();
        let entries: Vec<KbEntry> = file
            .entries
            .into_iter()
            .map(|e| {
                let signature = token_signature(&e.tokens);
                KbEntry {
                    modality: e.modality,
                    signature,
                    feature: SemanticFeature {
                        feature_id: feature_id_for(e.modality, signature),
                        service_type: ServiceTypeId(e.service_type),
                        rate: e.rate,
                        max_latency_ms: e.max_latency_ms,
                        priority: e.priority,
                    },
                    tokens: e.tokens,
                }
            })
            .collect();
        kb_update(&mut kb, entries)?;
        Ok(kb)
    }

    /// The bundled knowledge base: 12 service intents, one entry per modality.
    pub fn bundled() -> Self {
        Self::from_json(include_str!("../assets/default_kb.json"))
            .expect("bundled knowledge base is well-formed")
    }
}

/// Merges entries into the KB (last-writer-wins per (modality, signature)
/// key), bumps the generation, and reports the new statistics.
pub fn kb_update(kb: &mut Kb, entries: Vec<KbEntry>) -> Result<KbStat, SemanticsError> {
    for e in &entries {
        if e.feature.rate == 0 {
            return Err(SemanticsError::BadEntry("rate must be positive".into()));
        }
        if !(e.feature.max_latency_ms > 0.0) {
            return Err(SemanticsError::BadEntry("max_latency must be positive".into()));
        }
        let expect = feature_id_for(e.modality, e.signature);
        if e.feature.feature_id != expect {
            return Err(SemanticsError::BadEntry(format!(
                "feature id {:#x} does not match its (modality, signature) key",
                e.feature.feature_id
            )));
        }
    }
    for e in entries {
        let key = (e.modality, e.signature);
        if let Some(old) = kb.entries.insert(key, e) {
            kb.by_feature.remove(&old.feature.feature_id);
        }
        let stored = &kb.entries[&key];
        kb.by_feature.insert(stored.feature.feature_id, key);
    }
    kb.generation += 1;
    Ok(KbStat {
        generation: kb.generation,
        entries: kb.len() as u32,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestPayload {
    pub modality: Modality,
    pub tokens: Vec<String>,
    /// Bytes the request would occupy unencoded: the sum of token lengths.
    pub raw_size: u32,
}

impl RequestPayload {
    pub fn new(modality: Modality, tokens: Vec<String>) -> Self {
        let raw_size = tokens.iter().map(|t| t.len() as u32).sum();
        Self {
            modality,
            tokens,
            raw_size,
        }
    }

    /// Renders sensor key/value readings into canonical `key=value` tokens.
    pub fn from_sensor(pairs: &[(&str, f64)]) -> Self {
        let tokens = pairs.iter().map(|(k, v)| format!("{k}={v}")).collect();
        Self::new(Modality::Sensor, tokens)
    }
}

/// What the transmitter hands the network: the matched feature, the fixed
/// message size, and the bytes the semantic encoding avoided sending.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodeOutcome {
    pub feature: SemanticFeature,
    pub encoded_size: u32,
    pub bytes_saved: u32,
}

/// Matches a payload against the KB by (modality, token signature).
pub fn encode(kb: &Kb, payload: &RequestPayload) -> Result<EncodeOutcome, SemanticsError> {
    if kb.is_empty() {
        return Err(SemanticsError::EmptyKb);
    }
    if payload.tokens.is_empty() {
        return Err(SemanticsError::UnknownIntent);
    }
    let signature = token_signature(&payload.tokens);
    let entry = kb
        .entries
        .get(&(payload.modality, signature))
        .ok_or(SemanticsError::UnknownIntent)?;
    Ok(EncodeOutcome {
        feature: entry.feature,
        encoded_size: ENCODED_SIZE,
        bytes_saved: payload.raw_size.saturating_sub(ENCODED_SIZE),
    })
}

/// Inverse of [`encode`]: recovers the feature from its id.
pub fn decode(kb: &Kb, feature_id: u64) -> Result<SemanticFeature, SemanticsError> {
    let key = kb
        .by_feature
        .get(&feature_id)
        .ok_or(SemanticsError::UnknownFeature(feature_id))?;
    Ok(kb.entries[key].feature)
}

/// Synthesizes a feature for an unmatched request when raw fallback is
/// enabled. Only payloads that name their target service type with an
/// explicit `svc=<id>` token can be forwarded; anything else stays rejected.
pub fn raw_fallback_feature(payload: &RequestPayload) -> Option<SemanticFeature> {
    let svc = payload.tokens.iter().find_map(|t| {
        t.strip_prefix("svc=").and_then(|v| v.parse::<u32>().ok())
    })?;
    let signature = token_signature(&payload.tokens);
    Some(SemanticFeature {
        feature_id: feature_id_for(payload.modality, signature),
        service_type: ServiceTypeId(svc),
        rate: 1,
        max_latency_ms: RAW_FALLBACK_MAX_LATENCY_MS,
        priority: Priority::Normal,
    })
}

/// The 16-byte wire form: 8-byte feature id plus packed QoS (rate, latency
/// bound, priority).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodedMessage {
    pub feature_id: u64,
    pub rate: u32,
    pub max_latency_ms: f64,
    pub priority: Priority,
}

impl EncodedMessage {
    pub fn from_feature(feature: &SemanticFeature) -> Self {
        Self {
            feature_id: feature.feature_id,
            rate: feature.rate,
            max_latency_ms: feature.max_latency_ms,
            priority: feature.priority,
        }
    }

    pub fn to_bytes(self) -> [u8; 16] {
        let mut out = [0u8; 16];
        out[..8].copy_from_slice(&self.feature_id.to_le_bytes());
        out[8..10].copy_from_slice(&(self.rate.min(u16::MAX as u32) as u16).to_le_bytes());
        out[10..14].copy_from_slice(&(self.max_latency_ms as f32).to_le_bytes());
        out[14] = match self.priority {
            Priority::Normal => 0,
            Priority::High => 1,
        };
        out
    }

    pub fn from_bytes(bytes: &[u8; 16]) -> Self {
        let feature_id = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let rate = u16::from_le_bytes(bytes[8..10].try_into().unwrap()) as u32;
        let max_latency_ms = f32::from_le_bytes(bytes[10..14].try_into().unwrap()) as f64;
        let priority = if bytes[14] == 1 { Priority::High } else { Priority::Normal };
        Self {
            feature_id,
            rate,
            max_latency_ms,
            priority,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheEntry<V> {
    pub feature_id: u64,
    pub response: V,
    pub stored_at: u64,
    /// Monotone insertion stamp for least-recently-stored eviction.
    seq: u64,
}

/// Per-PoA response cache keyed by feature id. Bounded; evicts the
/// least-recently-stored entry on overflow. Lookups never refresh entries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoaCache<V> {
    entries: BTreeMap<u64, CacheEntry<V>>,
    capacity: usize,
    next_seq: u64,
    pub hits: u64,
    pub lookups: u64,
}

impl<V> Default for PoaCache<V> {
    fn default() -> Self {
        Self::new(DEFAULT_CACHE_CAPACITY)
    }
}

impl<V> PoaCache<V> {
    pub fn new(capacity: usize) -> Self {
        Self {
            entries: BTreeMap::new(),
            capacity: capacity.max(1),
            next_seq: 0,
            hits: 0,
            lookups: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Whether a lookup would hit, without touching the hit/lookup counters.
    pub fn contains(&self, feature_id: u64, now: u64, window: u64) -> bool {
        self.entries
            .get(&feature_id)
            .is_some_and(|e| now.saturating_sub(e.stored_at) <= window && e.stored_at <= now)
    }

    /// A hit requires a live entry no older than `window` steps (inclusive).
    pub fn lookup(&mut self, feature_id: u64, now: u64, window: u64) -> Option<&V> {
        self.lookups += 1;
        match self.entries.get(&feature_id) {
            Some(e) if now.saturating_sub(e.stored_at) <= window && e.stored_at <= now => {
                self.hits += 1;
                Some(&e.response)
            }
            _ => None,
        }
    }

    pub fn store(&mut self, feature_id: u64, response: V, now: u64) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.entries.insert(
            feature_id,
            CacheEntry {
                feature_id,
                response,
                stored_at: now,
                seq,
            },
        );
        if self.entries.len() > self.capacity {
            let oldest = self
                .entries
                .values()
                .min_by_key(|e| e.seq)
                .map(|e| e.feature_id)
                .expect("cache over capacity implies non-empty");
            self.entries.remove(&oldest);
        }
    }
}
