//! Deterministic discrete-event simulator for service and resource discovery
//! across a zoned edge-cloud continuum.
//!
//! The crate models an infrastructure graph of PoA, edge, and cloud nodes,
//! service providers advertising instances onto it, and mobile users issuing
//! semantically encoded service requests through their points of attachment.
//! Requests are resolved by pluggable selection strategies (the zone- and
//! prediction-aware default plus optimal, random, and two literature-style
//! baselines), every outcome is recorded on hash-chained per-zone ledgers
//! that merge and split as the overlay is re-zoned, and an experiment harness
//! sweeps node counts and request loads into reproducible CSV tables.
//!
//! Everything is driven by a single master seed: one run of [`engine::run`]
//! with a given [`engine::SimConfig`] is bit-reproducible, including ledger
//! dumps and emitted CSV.

pub mod catalog;
pub mod engine;
pub mod experiments;
pub mod ledger;
pub mod mobility;
pub mod prediction;
pub mod reservations;
pub mod rng;
pub mod selection;
pub mod semantics;
pub mod topology;
pub mod zoning;
