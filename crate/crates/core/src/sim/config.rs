//! Scenario configuration: one TOML file describing the cluster, network,
//! workload, and fault plan.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::TimeNs;
use crate::execution::OrderingMode;
use crate::replica::FaultBehavior;
use crate::sb::SbEngine;

pub const MS: TimeNs = 1_000_000;
pub const US: TimeNs = 1_000;
pub const SEC: TimeNs = 1_000_000_000;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("unknown override key: {0}")]
    UnknownKey(String),
    #[error("bad override value for {key}: {value}")]
    BadValue { key: String, value: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    /// Replica count n.
    pub replicas: usize,
    /// Tolerated Byzantine replicas f; requires n >= 3f+1.
    pub faults_tolerated: usize,
    /// Instance count m; 0 means m = n.
    pub instances: usize,
    pub epoch_length: u64,
    pub engine: SbEngine,
    pub mode: OrderingMode,
    pub batch_size: usize,
    pub batch_timeout_ms: u64,
    pub view_change_timeout_ms: u64,
    /// 0 means derived: two epochs of batch cadence, floored at the view
    /// change timeout.
    pub censorship_window_ms: u64,
    pub pull_force_after_ms: u64,
    /// Hard stop for a run.
    pub horizon_ms: u64,
    /// Throughput bucket width for reports.
    pub throughput_bucket_ms: u64,
    pub trace_messages: bool,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        ScenarioSection {
            replicas: 4,
            faults_tolerated: 1,
            instances: 0,
            epoch_length: 16,
            engine: SbEngine::Ideal,
            mode: OrderingMode::Orthrus,
            batch_size: 64,
            batch_timeout_ms: 50,
            view_change_timeout_ms: 10_000,
            censorship_window_ms: 0,
            pull_force_after_ms: 1_000,
            horizon_ms: 600_000,
            throughput_bucket_ms: 500,
            trace_messages: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    /// Replica r sits in region r mod regions.
    pub regions: usize,
    pub intra_region_latency_us: u64,
    pub inter_region_latency_us: u64,
    /// Uniform jitter added per message, in [0, jitter_us].
    pub jitter_us: u64,
    /// Per-byte serialization cost in nanoseconds (payload effect).
    pub per_byte_ns: u64,
    /// Global stabilization time; before it, messages suffer extra delay.
    pub gst_ms: u64,
    pub pre_gst_extra_ms: u64,
    /// A straggler replica has all its links slowed by the factor.
    pub straggler_replica: Option<usize>,
    pub straggler_factor: f64,
    /// Per (sender, receiver) message budget per window; excess is dropped.
    pub msg_rate_cap: u64,
    pub msg_rate_window_ms: u64,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            regions: 4,
            intra_region_latency_us: 500,
            inter_region_latency_us: 40_000,
            jitter_us: 200,
            per_byte_ns: 8,
            gst_ms: 0,
            pre_gst_extra_ms: 0,
            straggler_replica: None,
            straggler_factor: 10.0,
            msg_rate_cap: 1_000_000,
            msg_rate_window_ms: 1_000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSection {
    pub accounts: usize,
    pub shared_objects: usize,
    pub total_txs: usize,
    pub payment_proportion: f64,
    pub multi_payer_fraction: f64,
    /// Power-law exponent for account popularity (0 = uniform).
    pub skew: f64,
    pub payload_bytes: usize,
    pub initial_balance: i64,
    /// Fraction of accounts seeded nearly empty, to force escrow failures.
    pub insolvent_fraction: f64,
    pub insolvent_balance: i64,
    pub max_amount: i64,
    pub submit_rate_tps: u64,
    /// Replicas each client submits to; 0 means f+1.
    pub client_fanout: usize,
}

impl Default for WorkloadSection {
    fn default() -> Self {
        WorkloadSection {
            accounts: 500,
            shared_objects: 50,
            total_txs: 1_000,
            payment_proportion: 0.46,
            multi_payer_fraction: 0.1,
            skew: 0.8,
            payload_bytes: 500,
            initial_balance: 1_000,
            insolvent_fraction: 0.0,
            insolvent_balance: 1,
            max_amount: 10,
            submit_rate_tps: 2_000,
            client_fanout: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub replica: usize,
    pub start_ms: u64,
    pub behavior: FaultBehavior,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: ScenarioSection,
    pub network: NetworkSection,
    pub workload: WorkloadSection,
    #[serde(rename = "fault")]
    pub faults: Vec<FaultSpec>,
}

impl ScenarioConfig {
    pub fn from_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        Self::from_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn n(&self) -> usize {
        self.scenario.replicas
    }

    pub fn f(&self) -> usize {
        self.scenario.faults_tolerated
    }

    pub fn m(&self) -> usize {
        if self.scenario.instances == 0 {
            self.scenario.replicas
        } else {
            self.scenario.instances
        }
    }

    pub fn censorship_window(&self) -> TimeNs {
        if self.scenario.censorship_window_ms > 0 {
            return self.scenario.censorship_window_ms * MS;
        }
        let derived = 2 * self.scenario.epoch_length * self.scenario.batch_timeout_ms * MS;
        derived.max(self.scenario.view_change_timeout_ms * MS)
    }

    pub fn client_fanout(&self) -> usize {
        if self.workload.client_fanout == 0 {
            self.f() + 1
        } else {
            self.workload.client_fanout.min(self.n())
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let s = &self.scenario;
        if s.replicas == 0 || s.replicas < 3 * s.faults_tolerated + 1 {
            return Err(ConfigError::Invalid(format!(
                "need n >= 3f+1, got n={} f={}",
                s.replicas, s.faults_tolerated
            )));
        }
        if self.m() == 0 {
            return Err(ConfigError::Invalid("at least one instance".into()));
        }
        if s.epoch_length == 0 || s.batch_size == 0 || s.batch_timeout_ms == 0 {
            return Err(ConfigError::Invalid("epoch/batch parameters must be positive".into()));
        }
        if self.faults.len() > s.faults_tolerated {
            return Err(ConfigError::Invalid(format!(
                "fault plan has {} entries but f={}",
                self.faults.len(),
                s.faults_tolerated
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for fault in &self.faults {
            if fault.replica >= s.replicas {
                return Err(ConfigError::Invalid(format!(
                    "fault replica {} out of range",
                    fault.replica
                )));
            }
            if !seen.insert(fault.replica) {
                return Err(ConfigError::Invalid(format!(
                    "replica {} appears twice in the fault plan",
                    fault.replica
                )));
            }
        }
        if let Some(r) = self.network.straggler_replica {
            if r >= s.replicas {
                return Err(ConfigError::Invalid(format!("straggler {} out of range", r)));
            }
        }
        let w = &self.workload;
        if !(0.0..=1.0).contains(&w.payment_proportion)
            || !(0.0..=1.0).contains(&w.multi_payer_fraction)
            || !(0.0..=1.0).contains(&w.insolvent_fraction)
        {
            return Err(ConfigError::Invalid("proportions must be within [0,1]".into()));
        }
        if w.accounts < 4 {
            return Err(ConfigError::Invalid("need at least 4 accounts".into()));
        }
        if w.submit_rate_tps == 0 {
            return Err(ConfigError::Invalid("submit rate must be positive".into()));
        }
        Ok(())
    }

    /// Apply a dotted-path override like `workload.payment_proportion=0.25`
    /// or `scenario.replicas=16`; sweeps are built on this.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self, ConfigError> {
        let mut doc: toml::Value =
            toml::Value::try_from(self).expect("config is representable");
        let mut parts = key.split('.').collect::<Vec<_>>();
        if parts.len() == 1 {
            // Allow bare keys by searching the sections.
            for section in ["scenario", "network", "workload"] {
                if doc
                    .get(section)
                    .and_then(|s| s.get(parts[0]))
                    .is_some()
                {
                    parts = vec![section, parts[0]];
                    break;
                }
            }
        }
        if parts.len() != 2 {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        let slot = doc
            .get_mut(parts[0])
            .and_then(|s| s.get_mut(parts[1]))
            .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
        let parsed = match slot {
            toml::Value::Integer(_) => value
                .parse::<i64>()
                .map(toml::Value::Integer)
                .map_err(|_| ConfigError::BadValue { key: key.into(), value: value.into() })?,
            toml::Value::Float(_) => value
                .parse::<f64>()
                .map(toml::Value::Float)
                .map_err(|_| ConfigError::BadValue { key: key.into(), value: value.into() })?,
            toml::Value::Boolean(_) => value
                .parse::<bool>()
                .map(toml::Value::Boolean)
                .map_err(|_| ConfigError::BadValue { key: key.into(), value: value.into() })?,
            toml::Value::String(_) => toml::Value::String(value.to_string()),
            _ => return Err(ConfigError::BadValue { key: key.into(), value: value.into() }),
        };
        *slot = parsed;
        let cfg: ScenarioConfig = doc
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let cfg = ScenarioConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.m(), 4);
        assert_eq!(cfg.client_fanout(), 2);
    }

    #[test]
    fn rejects_insufficient_replicas() {
        let cfg = ScenarioConfig::from_str(
            "[scenario]\nreplicas = 3\nfaults_tolerated = 1\n",
        );
        assert!(cfg.is_err());
    }

    #[test]
    fn rejects_oversized_fault_plan() {
        let err = ScenarioConfig::from_str(
            r#"
[scenario]
replicas = 4
faults_tolerated = 1

[[fault]]
replica = 1
start_ms = 0
behavior = "crash_silent"

[[fault]]
replica = 2
start_ms = 0
behavior = "censor"
"#,
        )
        .unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
    }

    #[test]
    fn override_round_trips() {
        let cfg = ScenarioConfig::default();
        let swept = cfg.with_override("workload.payment_proportion", "0.25").unwrap();
        assert!((swept.workload.payment_proportion - 0.25).abs() < 1e-9);
        let swept = cfg.with_override("payment_proportion", "1.0").unwrap();
        assert!((swept.workload.payment_proportion - 1.0).abs() < 1e-9);
        let swept = cfg.with_override("scenario.replicas", "7").unwrap();
        assert_eq!(swept.n(), 7);
        assert!(cfg.with_override("nonsense.key", "1").is_err());
    }

    #[test]
    fn toml_round_trip_preserves_faults() {
        let cfg = ScenarioConfig::from_str(
            r#"
[scenario]
replicas = 4
faults_tolerated = 1

[[fault]]
replica = 2
start_ms = 9000
behavior = "lead_only"
"#,
        )
        .unwrap();
        let again = ScenarioConfig::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(again.faults.len(), 1);
        assert_eq!(again.faults[0].behavior, FaultBehavior::LeadOnly);
    }
}
