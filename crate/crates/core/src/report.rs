//! Running configured scenarios and writing their results.
//!
//! Every run yields rows of `scenario, seed, overlay_size, metric, statistic,
//! value`. Rows go to one CSV file per run; a summary JSON aggregates the
//! rows of all runs by `(metric, statistic)`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, ScenarioConfig, ScenarioKind};
use crate::metrics::{Distribution, LayerCost};
use crate::scenario::{
    run_convergence, run_delivery, run_efficiency, run_failure_recovery, run_partition, ConvergenceReport,
    DeliveryResult, EfficiencyResult, FailureResult, PartitionResult,
};
use crate::sim::SimError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub scenario: String,
    pub seed: u64,
    pub overlay_size: usize,
    pub metric: String,
    pub statistic: String,
    pub value: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{0}")]
    Scenario(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl RunError {
    fn io(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
        move |source| RunError::Io { path: path.to_path_buf(), source }
    }
}

/// Result of one (overlay size, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunOutput {
    pub seed: u64,
    pub overlay_size: usize,
    pub trace_hash: Option<String>,
    pub rows: Vec<Row>,
}

struct Rows {
    scenario: String,
    seed: u64,
    size: usize,
    out: Vec<Row>,
}

impl Rows {
    fn push(&mut self, metric: &str, statistic: &str, value: f64) {
        self.out.push(Row {
            scenario: self.scenario.clone(),
            seed: self.seed,
            overlay_size: self.size,
            metric: metric.into(),
            statistic: statistic.into(),
            value,
        });
    }

    fn dist(&mut self, metric: &str, values: &[f64]) {
        let d = Distribution::of(values);
        self.push(metric, "count", d.count as f64);
        self.push(metric, "mean", d.mean);
        self.push(metric, "median", d.median);
        self.push(metric, "p90", d.p90);
        self.push(metric, "p95", d.p95);
        self.push(metric, "max", d.max);
    }

    fn series(&mut self, metric: &str, series: &[(f64, u64, u64)]) {
        for &(start, expected, delivered) in series {
            let ratio = if expected == 0 { 1.0 } else { delivered as f64 / expected as f64 };
            self.push(metric, &format!("t{start:.0}"), ratio);
        }
    }
}

fn efficiency_rows(r: &mut Rows, e: &EfficiencyResult) {
    let rdp = &e.rdp;
    r.dist("rdp_umm", &rdp.umm);
    r.dist("rdp_base", &rdp.base);
    r.dist("rdp_bestbase", &rdp.bestbase);
    r.dist("rdp_opt", &rdp.opt);
    r.dist("rdp_random", &rdp.random);
    if !rdp.online_pairs.is_empty() {
        r.dist("rdp_online", &rdp.online_pairs);
        r.dist("rdp_offline", &rdp.offline_pairs);
    }
    let (u, b, bb) = (Distribution::of(&rdp.umm), Distribution::of(&rdp.base), Distribution::of(&rdp.bestbase));
    for (stat, x, y, z) in [("median", u.median, b.median, bb.median), ("p90", u.p90, b.p90, bb.p90)] {
        let (total, overlay, tree) = LayerCost::of(x, y, z).fractions();
        r.push("cost_total", stat, total);
        r.push("cost_overlay_layer", stat, overlay);
        r.push("cost_tree_layer", stat, tree);
    }
    let n = e.sources.len().max(1) as f64;
    let matched = e.sources.iter().filter(|s| s.matches_base).count() as f64;
    r.push("tree_matches_base", "fraction", matched / n);
    let tx: Vec<f64> = e.sources.iter().map(|s| s.transmissions as f64).collect();
    r.dist("flood_transmissions", &tx);
    r.push("flood_duplicates", "total", e.sources.iter().map(|s| s.duplicates as f64).sum());
    let stress: Vec<f64> = e.sources.iter().map(|s| s.max_stress as f64).collect();
    r.dist("max_link_stress", &stress);
    r.push("overlay", "mean_degree", e.mean_degree);
    r.push("overlay", "hop_diameter", e.hop_diameter as f64);
    r.push("overlay", "connected", e.connected as u8 as f64);
    r.push("events", "count", e.counters.events as f64);
}

fn delivery_rows(r: &mut Rows, d: &DeliveryResult) {
    r.push("delivery", "ratio", d.report.ratio);
    r.push("delivery", "expected", d.report.expected as f64);
    r.push("delivery", "delivered", d.report.delivered as f64);
    r.push("delivery", "messages", d.report.messages as f64);
    r.push("churn", "crashes", d.counters.crashes as f64);
    r.push("churn", "joins", d.counters.joins as f64);
    r.push("churn", "alive_at_end", d.alive_at_end as f64);
    r.push("events", "count", d.counters.events as f64);
    r.series("delivery_bucket", &d.report.series);
}

fn convergence_rows(r: &mut Rows, c: &ConvergenceReport) {
    r.push("steps_to_stability", "value", c.steps_to_stability.map_or(f64::NAN, |s| s as f64));
    r.push("reconfigurations", "total", c.total_events as f64);
    r.push("short_tunnel_delay_ms", "final", c.short_delay_ms);
    r.push("long_tunnel_bw_bps", "final", c.long_bw_bps);
    r.push("rdp_base", "p90", c.rdp_p90);
    r.push("rdp_base", "median", c.rdp_median);
    for (i, ((e, d), b)) in c.events_per_step.iter().zip(&c.short_delay_per_step).zip(&c.long_bw_per_step).enumerate() {
        let step = format!("step{i}");
        r.push("reconfigurations", &step, *e as f64);
        r.push("short_tunnel_delay_ms", &step, *d);
        r.push("long_tunnel_bw_bps", &step, *b);
    }
}

fn failure_rows(r: &mut Rows, f: &FailureResult) {
    r.push("recovery_after_crashes_s", "value", f.crash_recovery.unwrap_or(f64::NAN));
    r.push("recovery_after_rejoins_s", "value", f.rejoin_recovery.unwrap_or(f64::NAN));
    r.push("reset_ttl", "value", f.reset_ttl as f64);
    r.push("delivery", "ratio", f.report.ratio);
    r.push("churn", "alive_at_end", f.alive_at_end as f64);
    r.push("events", "count", f.counters.events as f64);
    r.series("delivery_bucket", &f.report.series);
}

fn partition_rows(r: &mut Rows, p: &PartitionResult) {
    let delays: Vec<f64> = p.trigger_delays.iter().map(|d| d.unwrap_or(f64::INFINITY)).collect();
    r.push("minority", "size", p.minority.len() as f64);
    r.push("repair_trigger_s", "max", delays.iter().copied().fold(0.0, f64::max));
    r.push("repair_trigger_s", "bound", p.trigger_bound);
    r.push("repair_trigger_s", "missing", p.trigger_delays.iter().filter(|d| d.is_none()).count() as f64);
    r.push("reconnected_after_s", "value", p.reconnected_after.unwrap_or(f64::NAN));
    r.push("overlay", "connected", p.connected_at_end as u8 as f64);
    r.push("events", "count", p.counters.events as f64);
}

/// Runs one scenario instance. `trace` receives the event log if given.
pub fn run_one(
    cfg: &ScenarioConfig,
    overlay_size: usize,
    seed: u64,
    trace: Option<Box<dyn Write + Send>>,
) -> Result<RunOutput, RunError> {
    let topo = cfg.topology_for(seed)?;
    let params = cfg.sim_params();
    let mut rows = Rows { scenario: cfg.label(), seed, size: overlay_size, out: Vec::new() };
    if overlay_size > topo.hosts().len() {
        return Err(RunError::Scenario(format!(
            "overlay size {overlay_size} exceeds the {} hosts of the topology",
            topo.hosts().len()
        )));
    }
    let hash = match cfg.run.scenario {
        ScenarioKind::Efficiency => {
            let e = run_efficiency(topo, &params, &cfg.efficiency, overlay_size, seed, trace)?;
            efficiency_rows(&mut rows, &e);
            Some(e.trace_hash)
        }
        ScenarioKind::Delivery => {
            let d = run_delivery(topo, &params, &cfg.delivery_params(), overlay_size, seed, trace)?;
            delivery_rows(&mut rows, &d);
            Some(d.trace_hash)
        }
        ScenarioKind::Failure => {
            let f = run_failure_recovery(topo, &params, &cfg.failure_params(), overlay_size, seed, trace)?;
            failure_rows(&mut rows, &f);
            Some(f.trace_hash)
        }
        ScenarioKind::Partition => {
            let p = run_partition(topo, &params, &cfg.partition, overlay_size, seed, trace)?;
            partition_rows(&mut rows, &p);
            Some(p.trace_hash)
        }
        ScenarioKind::Convergence => {
            let c = run_convergence(topo, &cfg.overlay, &cfg.membership, &cfg.convergence, overlay_size, seed)
                .map_err(RunError::Scenario)?;
            convergence_rows(&mut rows, &c);
            None
        }
    };
    Ok(RunOutput { seed, overlay_size, trace_hash: hash, rows: rows.out })
}

pub fn run_file_stem(label: &str, overlay_size: usize, seed: u64) -> String {
    format!("{label}-n{overlay_size}-s{seed}")
}

pub fn write_csv(path: &Path, rows: &[Row]) -> Result<(), RunError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| RunError::Io { path: path.into(), source: e.into() })?;
    for row in rows {
        w.serialize(row).map_err(|e| RunError::Io { path: path.into(), source: e.into() })?;
    }
    w.flush().map_err(RunError::io(path))
}

pub fn read_csv(path: &Path) -> Result<Vec<Row>, RunError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| RunError::Io { path: path.into(), source: e.into() })?;
    r.deserialize()
        .collect::<Result<Vec<Row>, _>>()
        .map_err(|e| RunError::Io { path: path.into(), source: e.into() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub seed: u64,
    pub overlay_size: usize,
    pub trace_hash: Option<String>,
    pub csv: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub scenario: String,
    pub label: String,
    pub runs: Vec<RunEntry>,
    /// `metric -> statistic -> aggregate over runs`; NaN values are skipped.
    pub metrics: BTreeMap<String, BTreeMap<String, Aggregate>>,
}

impl Summary {
    pub fn build(cfg: &ScenarioConfig, outputs: &[RunOutput]) -> Summary {
        let mut acc: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        for row in outputs.iter().flat_map(|o| &o.rows) {
            let entry = acc.entry((row.metric.clone(), row.statistic.clone())).or_default();
            if row.value.is_finite() {
                entry.push(row.value);
            }
        }
        let mut metrics: BTreeMap<String, BTreeMap<String, Aggregate>> = BTreeMap::new();
        for ((metric, stat), vals) in acc {
            if vals.is_empty() {
                continue;
            }
            let agg = Aggregate {
                runs: vals.len(),
                mean: vals.iter().sum::<f64>() / vals.len() as f64,
                min: vals.iter().copied().fold(f64::INFINITY, f64::min),
                max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            };
            metrics.entry(metric).or_default().insert(stat, agg);
        }
        let label = cfg.label();
        Summary {
            scenario: cfg.run.scenario.as_str().into(),
            runs: outputs
                .iter()
                .map(|o| RunEntry {
                    seed: o.seed,
                    overlay_size: o.overlay_size,
                    trace_hash: o.trace_hash.clone(),
                    csv: format!("{}.csv", run_file_stem(&label, o.overlay_size, o.seed)),
                })
                .collect(),
            label,
            metrics,
        }
    }

    pub fn load(path: &Path) -> Result<Summary, RunError> {
        let text = std::fs::read_to_string(path).map_err(RunError::io(path))?;
        serde_json::from_str(&text).map_err(|e| RunError::Io { path: path.into(), source: e.into() })
    }

    pub fn write(&self, path: &Path) -> Result<(), RunError> {
        let text = serde_json::to_string_pretty(self).expect("summary serializes");
        std::fs::write(path, text + "\n").map_err(RunError::io(path))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub metric: String,
    pub statistic: String,
    pub a: f64,
    pub b: f64,
    pub delta: f64,
    /// `b / a`, absent when `a` is zero.
    pub ratio: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub deltas: Vec<Delta>,
    /// `metric.statistic` present only in the first report.
    pub only_in_a: Vec<String>,
    pub only_in_b: Vec<String>,
}

/// Compares the run means of two summaries metric by metric.
pub fn compare(a: &Summary, b: &Summary) -> Comparison {
    let flat = |s: &Summary| -> BTreeMap<(String, String), f64> {
        s.metrics
            .iter()
            .flat_map(|(m, stats)| stats.iter().map(move |(st, agg)| ((m.clone(), st.clone()), agg.mean)))
            .collect()
    };
    let (fa, fb) = (flat(a), flat(b));
    let mut out = Comparison::default();
    for (key, &va) in &fa {
        match fb.get(key) {
            Some(&vb) => out.deltas.push(Delta {
                metric: key.0.clone(),
                statistic: key.1.clone(),
                a: va,
                b: vb,
                delta: vb - va,
                ratio: (va != 0.0).then(|| vb / va),
            }),
            None => out.only_in_a.push(format!("{}.{}", key.0, key.1)),
        }
    }
    out.only_in_b = fb.keys().filter(|k| !fa.contains_key(*k)).map(|k| format!("{}.{}", k.0, k.1)).collect();
    out
}
