//! Scenario configuration files.
//!
//! A config is a TOML document made of `key = value` lines grouped under
//! `[section]` headers. Every section is optional and falls back to the
//! defaults; unknown sections and unknown keys are rejected.
//!
//! ```
//! use umm::config::{ScenarioConfig, ScenarioKind};
//!
//! let text = "[run]\nscenario = \"delivery\"\nseeds = [1, 2]\n\n[churn]\nmedian_lifetime = 300.0\n";
//! let mut cfg = ScenarioConfig::from_toml(text).unwrap();
//! cfg.apply_overrides(&["overlay.max_initiated=4".to_string()]).unwrap();
//! assert_eq!(cfg.run.scenario, ScenarioKind::Delivery);
//! assert_eq!(cfg.churn.median_lifetime, Some(300.0));
//! assert_eq!(cfg.overlay.max_initiated, 4);
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::connectivity::ConnectivityConfig;
use crate::membership::MembershipConfig;
use crate::overlay::OverlayConfig;
use crate::scenario::{ConvergenceParams, DeliveryParams, EfficiencyParams, FailureParams, PartitionParams};
use crate::sim::{ChurnModel, EngineConfig, SimParams, Workload};
use crate::topology::{generate_topology, PhysicalTopology, TopologyParams};
use crate::tree::TreeConfig;

/// Environment variable naming the output directory when the config does not.
pub const OUTPUT_DIR_ENV: &str = "UMM_OUTPUT_DIR";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("bad override `{0}`: {1}")]
    Override(String, String),
    #[error("invalid {section}: {msg}")]
    Invalid { section: &'static str, msg: String },
    #[error("topology: {0}")]
    Topology(String),
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    #[default]
    Efficiency,
    Delivery,
    Convergence,
    Failure,
    Partition,
}

impl ScenarioKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::Efficiency => "efficiency",
            ScenarioKind::Delivery => "delivery",
            ScenarioKind::Convergence => "convergence",
            ScenarioKind::Failure => "failure",
            ScenarioKind::Partition => "partition",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub scenario: ScenarioKind,
    /// Name used for output files; defaults to the scenario kind.
    pub label: Option<String>,
    pub seeds: Vec<u64>,
    pub overlay_sizes: Vec<usize>,
    /// Load the physical network from this file instead of generating it.
    pub topology_file: Option<PathBuf>,
    /// Seed of the generated topology; absent means the run seed.
    pub topology_seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub trace: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            scenario: ScenarioKind::Efficiency,
            label: None,
            seeds: vec![1],
            overlay_sizes: vec![64],
            topology_file: None,
            topology_seed: None,
            output_dir: None,
            trace: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub run: RunSection,
    pub topology: TopologyParams,
    pub overlay: OverlayConfig,
    pub membership: MembershipConfig,
    pub tree: TreeConfig,
    pub connectivity: ConnectivityConfig,
    pub engine: EngineConfig,
    pub churn: ChurnModel,
    pub workload: Workload,
    pub efficiency: EfficiencyParams,
    pub delivery: DeliveryParams,
    pub failure: FailureParams,
    pub partition: PartitionParams,
    pub convergence: ConvergenceParams,
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key=value` or `section.key=value` overrides. A bare key must
    /// name exactly one section's field.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        if overrides.is_empty() {
            return Ok(());
        }
        let mut doc: toml::Table =
            toml::Value::try_from(&*self).map_err(|e| ConfigError::Syntax(e.to_string()))?.try_into().map_err(
                |e: toml::de::Error| ConfigError::Syntax(e.to_string()),
            )?;
        let defaults = toml::Value::try_from(ScenarioConfig::default()).expect("defaults serialize");
        for item in overrides {
            let bad = |msg: &str| ConfigError::Override(item.clone(), msg.to_string());
            let (key, raw) = item.trim_start_matches("--").split_once('=').ok_or_else(|| bad("expected key=value"))?;
            let (section, field) = match key.split_once('.') {
                Some((s, f)) => (s.to_string(), f.to_string()),
                None => {
                    let owners: Vec<String> = defaults
                        .as_table()
                        .into_iter()
                        .flatten()
                        .filter(|(_, v)| v.as_table().is_some_and(|t| t.contains_key(key)))
                        .map(|(s, _)| s.clone())
                        .collect();
                    match owners.as_slice() {
                        [one] => (one.clone(), key.to_string()),
                        [] => return Err(bad("unknown key; write it as section.key")),
                        _ => return Err(bad(&format!("ambiguous key, found in sections {}", owners.join(", ")))),
                    }
                }
            };
            let table = doc
                .entry(section.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| bad("not a section"))?;
            table.insert(field, parse_value(raw));
            let text = toml::to_string(&doc).map_err(|e| bad(&e.to_string()))?;
            *self = toml::from_str(&text).map_err(|e: toml::de::Error| bad(e.message()))?;
        }
        Ok(())
    }

    pub fn sim_params(&self) -> SimParams {
        SimParams {
            overlay: self.overlay.clone(),
            membership: self.membership.clone(),
            tree: self.tree.clone(),
            connectivity: self.connectivity.clone(),
            engine: self.engine.clone(),
        }
    }

    pub fn delivery_params(&self) -> DeliveryParams {
        DeliveryParams { churn: self.churn.clone(), workload: self.workload.clone(), ..self.delivery.clone() }
    }

    pub fn failure_params(&self) -> FailureParams {
        FailureParams { workload: self.workload.clone(), ..self.failure.clone() }
    }

    pub fn label(&self) -> String {
        self.run.label.clone().unwrap_or_else(|| self.run.scenario.as_str().to_string())
    }

    /// Output directory: the config's, else the environment's, else `umm-out`.
    pub fn output_dir(&self) -> PathBuf {
        self.run
            .output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("umm-out"))
    }

    /// Checks every section before anything runs.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |section: &'static str| move |msg: String| ConfigError::Invalid { section, msg };
        if self.run.seeds.is_empty() {
            return Err(inv("run")("seeds must not be empty".into()));
        }
        if self.run.overlay_sizes.is_empty() || self.run.overlay_sizes.contains(&0) {
            return Err(inv("run")("overlay_sizes must be a non-empty list of positive sizes".into()));
        }
        if self.run.label.as_deref().is_some_and(|l| l.is_empty() || l.contains(['/', '\\'])) {
            return Err(inv("run")("label must be a plain file name".into()));
        }
        if self.run.topology_file.is_none() {
            self.topology.validate().map_err(|e| inv("topology")(e.to_string()))?;
            let hosts = self.topology.hosts as usize;
            let biggest = self.run.overlay_sizes.iter().copied().max().unwrap_or(0);
            if biggest > hosts {
                return Err(inv("run")(format!("overlay size {biggest} exceeds the {hosts} hosts of the topology")));
            }
        }
        self.sim_params().validate().map_err(inv("parameters"))?;
        if let Some(m) = self.churn.median_lifetime {
            if !(m > 0.0) {
                return Err(inv("churn")("median_lifetime must be positive".into()));
            }
        }
        if !(self.churn.rejoin_delay >= 0.0) {
            return Err(inv("churn")("rejoin_delay must not be negative".into()));
        }
        let w = &self.workload;
        if !(w.message_period > 0.0) || w.start < 0.0 || w.stop.is_some_and(|s| s < w.start) {
            return Err(inv("workload")("need message_period > 0 and 0 <= start <= stop".into()));
        }
        let d = &self.delivery;
        if d.warmup < 0.0 || !(d.measure > 0.0) || d.tail < 0.0 || !(d.t_prop >= 0.0) || !(d.bucket > 0.0) {
            return Err(inv("delivery")("need warmup, tail, t_prop >= 0 and measure, bucket > 0".into()));
        }
        let f = &self.failure;
        if !(f.bucket > 0.0) || !(0.0..=1.0).contains(&f.target) || f.crash_window < 0.0 || f.rejoin_window < 0.0 {
            return Err(inv("failure")("need bucket > 0, target in [0, 1] and non-negative windows".into()));
        }
        let p = &self.partition;
        if !(0.0..1.0).contains(&p.minority) || p.heal_after < 0.0 || p.observe < p.heal_after {
            return Err(inv("partition")("need minority in [0, 1) and heal_after <= observe".into()));
        }
        if self.convergence.steps == 0 || self.convergence.window == 0 {
            return Err(inv("convergence")("steps and window must be positive".into()));
        }
        if self.efficiency.optimize_for < 0.0 || !(self.efficiency.join_spacing >= 0.0) {
            return Err(inv("efficiency")("times must not be negative".into()));
        }
        Ok(())
    }

    /// Physical network for one run.
    pub fn topology_for(&self, seed: u64) -> Result<Arc<PhysicalTopology>, ConfigError> {
        match &self.run.topology_file {
            Some(path) => {
                let text =
                    std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.clone(), source })?;
                PhysicalTopology::from_text(&text).map(Arc::new).map_err(|e| ConfigError::Topology(e.to_string()))
            }
            None => generate_topology(&self.topology, self.run.topology_seed.unwrap_or(seed))
                .map(Arc::new)
                .map_err(|e| ConfigError::Topology(e.to_string())),
        }
    }
}
