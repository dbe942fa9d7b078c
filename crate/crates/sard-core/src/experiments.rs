//! Sweep harness: runs a (value × strategy × seed) grid of scenarios,
//! aggregates per-cell statistics, renders them as CSV, and judges the
//! cost/acceptance orderings between strategies.
//!
//! Demand at a fixed (value, seed) is identical across strategies because the
//! engine derives its request stream from a strategy-independent RNG; rows of
//! a sweep therefore compare selection quality, not luck.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{run, EngineError, RunMetrics, SimConfig, SimState};
use crate::selection::Strategy;

/// Exact header of the CSV table.
pub const CSV_HEADER: &str = "axis,value,strategy,seed_count,total_cost_mean,\
total_cost_std,resp_ms_mean,resp_ms_std,p95_ms,acceptance_mean,\
bytes_saved_mean,cache_hit_rate,rezones";

/// Optional trailing column emitted in timing mode.
pub const TIMING_COLUMN: &str = "runtime_ms_mean";

/// Default node-count sweep values.
pub const DEFAULT_NODES_VALUES: [f64; 5] = [5.0, 10.0, 15.0, 20.0, 25.0];

/// Default request-load factors, multiplying the base per-user emission.
pub const DEFAULT_REQUEST_FACTORS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Values are node counts substituted into `n_nodes`.
    Nodes,
    /// Values are factors multiplying the base `sr_per_user_per_step`.
    Requests,
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Axis::Nodes => write!(f, "nodes"),
            Axis::Requests => write!(f, "requests"),
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nodes" => Ok(Axis::Nodes),
            "requests" => Ok(Axis::Requests),
            other => Err(format!("unknown axis '{other}' (expected nodes|requests)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid sweep spec: {0}")]
    SpecInvalid(&'static str),
    #[error("table is missing strategy '{0}' at value {1}")]
    MissingStrategy(Strategy, f64),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("unreadable table: {0}")]
    BadTable(String),
}

/// One sweep: an axis, the values to substitute, and the grid to cross them
/// with. `base` supplies every parameter the axis does not touch.
#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub axis: Axis,
    pub values: Vec<f64>,
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
    pub base: SimConfig,
}

impl SweepSpec {
    /// The node-count sweep at its default values.
    pub fn default_nodes(base: SimConfig, strategies: Vec<Strategy>, seeds: Vec<u64>) -> Self {
        Self {
            axis: Axis::Nodes,
            values: DEFAULT_NODES_VALUES.to_vec(),
            strategies,
            seeds,
            base,
        }
    }

    /// The request-load sweep at its default factors.
    pub fn default_requests(base: SimConfig, strategies: Vec<Strategy>, seeds: Vec<u64>) -> Self {
        Self {
            axis: Axis::Requests,
            values: DEFAULT_REQUEST_FACTORS.to_vec(),
            strategies,
            seeds,
            base,
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.values.is_empty() {
            return Err(ExperimentError::SpecInvalid("values is empty"));
        }
        if !self.values.windows(2).all(|w| w[0] < w[1]) {
            return Err(ExperimentError::SpecInvalid("values must be strictly increasing"));
        }
        for &v in &self.values {
            if !v.is_finite() || v <= 0.0 {
                return Err(ExperimentError::SpecInvalid("values must be positive and finite"));
            }
            if self.axis == Axis::Nodes && v.fract() != 0.0 {
                return Err(ExperimentError::SpecInvalid("node counts must be integers"));
            }
        }
        if self.strategies.is_empty() {
            return Err(ExperimentError::SpecInvalid("strategies is empty"));
        }
        let mut names: Vec<&Strategy> = self.strategies.iter().collect();
        names.dedup();
        if names.len() != self.strategies.len() {
            return Err(ExperimentError::SpecInvalid("duplicate strategies"));
        }
        if self.seeds.is_empty() {
            return Err(ExperimentError::SpecInvalid("seeds is empty"));
        }
        self.base.validate()?;
        Ok(())
    }

    /// Every (value, strategy, seed) cell in deterministic grid order.
    pub fn grid(&self) -> Vec<(f64, Strategy, u64)> {
        let mut cells = Vec::with_capacity(self.values.len() * self.strategies.len() * self.seeds.len());
        for &value in &self.values {
            for &strategy in &self.strategies {
                for &seed in &self.seeds {
                    cells.push((value, strategy, seed));
                }
            }
        }
        cells
    }

    /// The scenario config for one cell of the grid.
    pub fn cell_config(&self, value: f64, strategy: Strategy, seed: u64) -> SimConfig {
        let mut config = self.base.clone();
        config.seed = seed;
        config.strategy = strategy;
        match self.axis {
            Axis::Nodes => config.n_nodes = value as usize,
            Axis::Requests => {
                config.sr_per_user_per_step = self.base.sr_per_user_per_step * value;
            }
        }
        config
    }
}

/// One executed cell of the grid.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub value: f64,
    pub strategy: Strategy,
    pub seed: u64,
    pub metrics: RunMetrics,
    /// Wall clock, informational only; excluded from default CSV output.
    pub runtime_ms: f64,
}

/// One aggregated row: mean/std over the seeds of a (value, strategy) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: Axis,
    pub value: f64,
    pub strategy: Strategy,
    pub seed_count: usize,
    pub total_cost_mean: f64,
    pub total_cost_std: f64,
    pub resp_ms_mean: f64,
    pub resp_ms_std: f64,
    /// Mean over seeds of each run's 95th-percentile response.
    pub p95_ms: f64,
    pub acceptance_mean: f64,
    pub bytes_saved_mean: f64,
    pub cache_hit_rate: f64,
    pub rezones: f64,
    /// Mean wall clock per run; only rendered in timing mode.
    pub runtime_ms_mean: f64,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Population standard deviation (the plotted error bar; 0 for one seed).
fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Runs every (value, strategy, seed) cell. Cells execute in parallel; the
/// returned order is the deterministic grid order values → strategies → seeds.
pub fn run_cells(spec: &SweepSpec) -> Result<Vec<CellResult>, ExperimentError> {
    spec.validate()?;
    let cells: Result<Vec<CellResult>, EngineError> = spec
        .grid()
        .par_iter()
        .map(|&(value, strategy, seed)| {
            let started = Instant::now();
            let metrics = run(spec.cell_config(value, strategy, seed))?;
            Ok(CellResult {
                value,
                strategy,
                seed,
                metrics,
                runtime_ms: started.elapsed().as_secs_f64() * 1e3,
            })
        })
        .collect();
    Ok(cells?)
}

/// Collapses cells into per-(value, strategy) rows, sorted by value then
/// strategy name. Aggregation is a deterministic reduction: grouping ignores
/// input order and every statistic is computed over the seed-sorted group.
pub fn aggregate(axis: Axis, cells: &[CellResult]) -> Vec<SweepRow> {
    let mut groups: BTreeMap<(u64, String), Vec<&CellResult>> = BTreeMap::new();
    for cell in cells {
        debug_assert!(cell.value >= 0.0, "bit-ordered grouping needs non-negative values");
        groups
            .entry((cell.value.to_bits(), cell.strategy.to_string()))
            .or_default()
            .push(cell);
    }
    groups
        .into_iter()
        .map(|((bits, _), mut group)| {
            group.sort_by_key(|c| c.seed);
            let of = |f: &dyn Fn(&RunMetrics) -> f64| -> Vec<f64> {
                group.iter().map(|c| f(&c.metrics)).collect()
            };
            let costs = of(&|m| m.total_cost as f64);
            let resps = of(&|m| m.mean_response_ms);
            SweepRow {
                axis,
                value: f64::from_bits(bits),
                strategy: group[0].strategy,
                seed_count: group.len(),
                total_cost_mean: mean(&costs),
                total_cost_std: std_dev(&costs),
                resp_ms_mean: mean(&resps),
                resp_ms_std: std_dev(&resps),
                p95_ms: mean(&of(&|m| m.p95_response_ms)),
                acceptance_mean: mean(&of(&|m| m.acceptance_rate)),
                bytes_saved_mean: mean(&of(&|m| m.bytes_saved as f64)),
                cache_hit_rate: mean(&of(&|m| m.cache_hit_rate)),
                rezones: mean(&of(&|m| m.rezone_count as f64)),
                runtime_ms_mean: mean(&group.iter().map(|c| c.runtime_ms).collect::<Vec<_>>()),
            }
        })
        .collect()
}

/// Runs the sweep and aggregates it. See [`run_cells`] and [`aggregate`].
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<SweepRow>, ExperimentError> {
    Ok(aggregate(spec.axis, &run_cells(spec)?))
}

fn render(table: &[SweepRow], timing: bool) -> String {
    let mut rows: Vec<&SweepRow> = table.iter().collect();
    rows.sort_by(|a, b| {
        a.value
            .total_cmp(&b.value)
            .then_with(|| a.strategy.to_string().cmp(&b.strategy.to_string()))
    });
    let mut out = String::from(CSV_HEADER);
    if timing {
        out.push(',');
        out.push_str(TIMING_COLUMN);
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:.4},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            r.axis,
            r.value,
            r.strategy,
            r.seed_count,
            r.total_cost_mean,
            r.total_cost_std,
            r.resp_ms_mean,
            r.resp_ms_std,
            r.p95_ms,
            r.acceptance_mean,
            r.bytes_saved_mean,
            r.cache_hit_rate,
            r.rezones,
        ));
        if timing {
            out.push_str(&format!(",{:.4}", r.runtime_ms_mean));
        }
        out.push('\n');
    }
    out
}

/// The table as CSV: pinned header, rows sorted by (value, strategy), four
/// fractional digits, `.` separator, `\n` line ends.
pub fn render_csv(table: &[SweepRow]) -> String {
    render(table, false)
}

/// [`render_csv`] plus the informational runtime column.
pub fn render_csv_with_timing(table: &[SweepRow]) -> String {
    render(table, true)
}

/// Writes [`render_csv`] (or the timing variant) to a file.
pub fn emit_csv(table: &[SweepRow], path: &Path, timing: bool) -> Result<(), ExperimentError> {
    std::fs::write(path, render(table, timing))?;
    Ok(())
}

/// Parses a table produced by [`render_csv`] (either header variant).
pub fn parse_csv(text: &str) -> Result<Vec<SweepRow>, ExperimentError> {
    let bad = |msg: String| ExperimentError::BadTable(msg);
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let timed_header = format!("{CSV_HEADER},{TIMING_COLUMN}");
    let timing = if header == CSV_HEADER {
        false
    } else if header == timed_header {
        true
    } else {
        return Err(bad(format!("unexpected header '{header}'")));
    };
    let want = if timing { 14 } else { 13 };
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != want {
            return Err(bad(format!("row {}: {} fields, expected {want}", i + 1, fields.len())));
        }
        let float = |j: usize| -> Result<f64, ExperimentError> {
            fields[j]
                .parse::<f64>()
                .map_err(|e| bad(format!("row {}: field {}: {e}", i + 1, j + 1)))
        };
        rows.push(SweepRow {
            axis: fields[0]
                .parse()
                .map_err(|e: String| bad(format!("row {}: {e}", i + 1)))?,
            value: float(1)?,
            strategy: fields[2]
                .parse()
                .map_err(|e: String| bad(format!("row {}: {e}", i + 1)))?,
            seed_count: fields[3]
                .parse()
                .map_err(|e| bad(format!("row {}: field 4: {e}", i + 1)))?,
            total_cost_mean: float(4)?,
            total_cost_std: float(5)?,
            resp_ms_mean: float(6)?,
            resp_ms_std: float(7)?,
            p95_ms: float(8)?,
            acceptance_mean: float(9)?,
            bytes_saved_mean: float(10)?,
            cache_hit_rate: float(11)?,
            rezones: float(12)?,
            runtime_ms_mean: if timing { float(13)? } else { 0.0 },
        });
    }
    Ok(rows)
}

/// Reads and parses a CSV table from disk.
pub fn read_table(path: &Path) -> Result<Vec<SweepRow>, ExperimentError> {
    parse_csv(&std::fs::read_to_string(path)?)
}

/// Per-value ordering checks between the three reference strategies.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareVerdict {
    pub value: f64,
    /// total_cost_mean(optimal) ≤ total_cost_mean(proposed).
    pub optimal_cost_le_proposed: bool,
    /// total_cost_mean(proposed) ≤ total_cost_mean(random).
    pub proposed_cost_le_random: bool,
    /// acceptance_mean(proposed) ≥ acceptance_mean(random).
    pub proposed_acceptance_ge_random: bool,
}

impl CompareVerdict {
    pub fn pass(&self) -> bool {
        self.optimal_cost_le_proposed && self.proposed_cost_le_random && self.proposed_acceptance_ge_random
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub axis: Axis,
    pub verdicts: Vec<CompareVerdict>,
    /// Informational monotonicity observations; never gate the exit status.
    pub notes: Vec<String>,
}

impl CompareReport {
    pub fn all_pass(&self) -> bool {
        self.verdicts.iter().all(CompareVerdict::pass)
    }

    /// Human-readable rendering: one verdict line per value, then notes.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for v in &self.verdicts {
            let mark = |ok: bool| if ok { "ok" } else { "FAIL" };
            out.push_str(&format!(
                "{} {} cost(optimal)<=cost(proposed) {}  cost(proposed)<=cost(random) {}  acceptance(proposed)>=acceptance(random) {}\n",
                self.axis,
                trim_value(v.value),
                mark(v.optimal_cost_le_proposed),
                mark(v.proposed_cost_le_random),
                mark(v.proposed_acceptance_ge_random),
            ));
        }
        for note in &self.notes {
            out.push_str("note: ");
            out.push_str(note);
            out.push('\n');
        }
        out.push_str(if self.all_pass() {
            "orderings: all pass\n"
        } else {
            "orderings: FAILED\n"
        });
        out
    }
}

/// Value rendered without trailing zeros, for filenames and report lines.
pub fn trim_value(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

fn monotonicity_note(strategy: Strategy, points: &[(f64, f64)]) -> Option<String> {
    if points.len() < 2 {
        return None;
    }
    let rising = points.windows(2).all(|w| w[0].1 <= w[1].1);
    let falling = points.windows(2).all(|w| w[0].1 >= w[1].1);
    let shape = match (rising, falling) {
        (true, true) => "flat",
        (true, false) => "non-decreasing",
        (false, true) => "non-increasing",
        (false, false) => "not monotone",
    };
    Some(format!("cost({strategy}) is {shape} across values"))
}

/// Checks the hard strategy orderings per value and collects monotonicity
/// notes. The table must contain optimal, proposed, and random rows at every
/// value (extra strategies are welcome and ignored by the verdicts).
pub fn compare_report(table: &[SweepRow]) -> Result<CompareReport, ExperimentError> {
    let axis = match table.first() {
        Some(row) => row.axis,
        None => return Err(ExperimentError::BadTable("empty table".into())),
    };
    if table.iter().any(|r| r.axis != axis) {
        return Err(ExperimentError::BadTable("mixed axes in one table".into()));
    }
    let mut by_value: BTreeMap<u64, BTreeMap<String, &SweepRow>> = BTreeMap::new();
    for row in table {
        by_value
            .entry(row.value.to_bits())
            .or_default()
            .insert(row.strategy.to_string(), row);
    }
    let mut verdicts = Vec::new();
    for (bits, rows) in &by_value {
        let value = f64::from_bits(*bits);
        let need = |s: Strategy| -> Result<&SweepRow, ExperimentError> {
            rows.get(&s.to_string())
                .copied()
                .ok_or(ExperimentError::MissingStrategy(s, value))
        };
        let optimal = need(Strategy::Optimal)?;
        let proposed = need(Strategy::Proposed)?;
        let random = need(Strategy::Random)?;
        verdicts.push(CompareVerdict {
            value,
            optimal_cost_le_proposed: optimal.total_cost_mean <= proposed.total_cost_mean,
            proposed_cost_le_random: proposed.total_cost_mean <= random.total_cost_mean,
            proposed_acceptance_ge_random: proposed.acceptance_mean >= random.acceptance_mean,
        });
    }
    let mut notes = Vec::new();
    let mut strategies: Vec<Strategy> = Vec::new();
    for row in table {
        if !strategies.contains(&row.strategy) {
            strategies.push(row.strategy);
        }
    }
    strategies.sort_by_key(|s| s.to_string());
    for strategy in strategies {
        let mut points: Vec<(f64, f64)> = table
            .iter()
            .filter(|r| r.strategy == strategy)
            .map(|r| (r.value, r.total_cost_mean))
            .collect();
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        if let Some(note) = monotonicity_note(strategy, &points) {
            notes.push(note);
        }
    }
    Ok(CompareReport { axis, verdicts, notes })
}

/// Named NDJSON dumps of the main chain and every zone chain of a finished
/// run; names are stable so repeated runs produce identical files.
pub fn ledger_dumps(state: &SimState) -> Vec<(String, String)> {
    let mut out = vec![("main".to_string(), state.main.to_ndjson())];
    for (id, ledger) in &state.zone_ledgers {
        out.push((format!("chain{}", id.0), ledger.to_ndjson()));
    }
    out
}
