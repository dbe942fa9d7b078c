//! User mobility: synthetic random-waypoint traces, CSV trace ingestion, and
//! nearest-PoA attachment.
//!
//! The trace format is a plain CSV with header `step,user,x,y`; positions are
//! meters, steps are simulation ticks. External mobility tools can feed the
//! simulator by exporting to this schema.

use std::io::BufRead;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::{Area, NodeId, NodeKind, Point, Topology};

/// Positions remembered per user for the motion predictor.
pub const HISTORY_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UserId(pub u32);

impl std::fmt::Display for UserId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "u{}", self.0)
    }
}

impl std::str::FromStr for UserId {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let digits = s.strip_prefix('u').unwrap_or(s);
        digits.parse().map(UserId)
    }
}

/// Per-user selection weights over cost, latency, and energy. Must sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preferences {
    pub w_cost: f64,
    pub w_latency: f64,
    pub w_energy: f64,
}

impl Default for Preferences {
    fn default() -> Self {
        Self {
            w_cost: 0.4,
            w_latency: 0.4,
            w_energy: 0.2,
        }
    }
}

impl Preferences {
    pub fn validate(&self) -> Result<(), MobilityError> {
        let ws = [self.w_cost, self.w_latency, self.w_energy];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(MobilityError::BadPreferences);
        }
        if (ws.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(MobilityError::BadPreferences);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct User {
    pub id: UserId,
    pub position: Point,
    /// Meters per step, derived from consecutive observed positions.
    pub velocity: (f64, f64),
    pub attached_poa: Option<NodeId>,
    pub preferences: Preferences,
    /// Most recent positions, oldest first, capped at [`HISTORY_LEN`].
    pub history: Vec<Point>,
}

impl User {
    pub fn new(id: UserId, position: Point) -> Self {
        Self {
            id,
            position,
            velocity: (0.0, 0.0),
            attached_poa: None,
            preferences: Preferences::default(),
            history: vec![position],
        }
    }

    /// Records the position for the current step, updating velocity and the
    /// bounded history window.
    pub fn observe_position(&mut self, p: Point) {
        self.velocity = (p.x - self.position.x, p.y - self.position.y);
        self.position = p;
        self.history.push(p);
        if self.history.len() > HISTORY_LEN {
            self.history.remove(0);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub user: UserId,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MobilityTrace {
    /// Rows sorted by (step, user).
    pub rows: Vec<TraceRow>,
}

impl MobilityTrace {
    pub fn users(&self) -> Vec<UserId> {
        let mut ids: Vec<UserId> = self.rows.iter().map(|r| r.user).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn max_step(&self) -> Option<u64> {
        self.rows.iter().map(|r| r.step).max()
    }

    /// Rows for one step, in user order.
    pub fn at_step(&self, step: u64) -> impl Iterator<Item = &TraceRow> {
        self.rows.iter().filter(move |r| r.step == step)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,user,x,y\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{:.3},{:.3}\n", r.step, r.user, r.x, r.y));
        }
        out
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MobilityError {
    #[error("degenerate deployment area")]
    BadArea,
    #[error("need at least one user and one step")]
    NoRows,
    #[error("malformed row at line {0}")]
    MalformedRow(usize),
    #[error("steps go backwards for user {0}")]
    NonMonotoneStep(UserId),
    #[error("topology has no PoA nodes")]
    NoPoa,
    #[error("preference weights must be non-negative and sum to 1")]
    BadPreferences,
}

/// Random-waypoint trace: each user repeatedly picks a uniform waypoint and a
/// uniform speed from `speed_range`, then walks toward it step by step.
/// Emits one row per (step, user), sorted by (step, user).
pub fn gen_waypoint_trace(
    seed: u64,
    n_users: usize,
    steps: u64,
    area: Area,
    speed_range: (f64, f64),
) -> Result<MobilityTrace, MobilityError> {
    if n_users == 0 || steps == 0 {
        return Err(MobilityError::NoRows);
    }
    if area.is_degenerate() {
        return Err(MobilityError::BadArea);
    }
    let mut rng = crate::rng::stream(seed, "mobility");
    let draw_point = |rng: &mut rand_chacha::ChaCha12Rng| {
        Point::new(rng.random_range(0.0..area.width), rng.random_range(0.0..area.height))
    };
    let draw_speed = |rng: &mut rand_chacha::ChaCha12Rng| {
        if speed_range.1 <= speed_range.0 {
            speed_range.0
        } else {
            rng.random_range(speed_range.0..=speed_range.1)
        }
    };
    struct Walker {
        pos: Point,
        waypoint: Point,
        speed: f64,
    }
    let mut walkers: Vec<Walker> = (0..n_users)
        .map(|_| {
            let pos = draw_point(&mut rng);
            Walker {
                pos,
                waypoint: draw_point(&mut rng),
                speed: draw_speed(&mut rng),
            }
        })
        .collect();
    let mut rows = Vec::with_capacity(n_users * steps as usize);
    for step in 0..steps {
        for (u, w) in walkers.iter_mut().enumerate() {
            rows.push(TraceRow {
                step,
                user: UserId(u as u32),
                x: w.pos.x,
                y: w.pos.y,
            });
            let dist = w.pos.dist(&w.waypoint);
            if dist <= w.speed {
                w.pos = w.waypoint;
                w.waypoint = draw_point(&mut rng);
                w.speed = draw_speed(&mut rng);
            } else if w.speed > 0.0 {
                let f = w.speed / dist;
                w.pos = Point::new(w.pos.x + (w.waypoint.x - w.pos.x) * f, w.pos.y + (w.waypoint.y - w.pos.y) * f);
            }
        }
    }
    Ok(MobilityTrace { rows })
}

/// Parses a `step,user,x,y` CSV. Line numbers in errors are 1-based and count
/// the header. Unknown or reordered columns are rejected; per-user steps must
/// be non-decreasing in file order. Rows come back sorted by (step, user).
pub fn ingest_trace(reader: impl BufRead) -> Result<MobilityTrace, MobilityError> {
    let mut rows = Vec::new();
    let mut last_step: std::collections::BTreeMap<UserId, u64> = std::collections::BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|_| MobilityError::MalformedRow(lineno))?;
        let line = line.trim_end_matches(['\r', '\n']);
        if idx == 0 {
            if line.trim() != "step,user,x,y" {
                return Err(MobilityError::MalformedRow(1));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(MobilityError::MalformedRow(lineno));
        }
        let step: u64 = fields[0].parse().map_err(|_| MobilityError::MalformedRow(lineno))?;
        let user: UserId = fields[1].parse().map_err(|_| MobilityError::MalformedRow(lineno))?;
        let x: f64 = fields[2].parse().map_err(|_| MobilityError::MalformedRow(lineno))?;
        let y: f64 = fields[3].parse().map_err(|_| MobilityError::MalformedRow(lineno))?;
        if !x.is_finite() || !y.is_finite() {
            return Err(MobilityError::MalformedRow(lineno));
        }
        if let Some(&prev) = last_step.get(&user) {
            if step < prev {
                return Err(MobilityError::NonMonotoneStep(user));
            }
        }
        last_step.insert(user, step);
        rows.push(TraceRow { step, user, x, y });
    }
    rows.sort_by(|a, b| (a.step, a.user).cmp(&(b.step, b.user)));
    Ok(MobilityTrace { rows })
}

pub fn ingest_trace_str(s: &str) -> Result<MobilityTrace, MobilityError> {
    ingest_trace(s.as_bytes())
}

/// Nearest PoA by Euclidean distance, smaller node id on ties. Updates the
/// user's attachment.
pub fn attach_poa(user: &mut User, topo: &Topology) -> Result<NodeId, MobilityError> {
    let best = topo
        .nodes
        .iter()
        .filter(|n| n.kind == NodeKind::Poa)
        .min_by(|a, b| {
            a.position
                .dist2(&user.position)
                .total_cmp(&b.position.dist2(&user.position))
                .then(a.id.cmp(&b.id))
        })
        .ok_or(MobilityError::NoPoa)?;
    user.attached_poa = Some(best.id);
    Ok(best.id)
}
