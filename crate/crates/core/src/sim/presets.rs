//! Scenario batteries used by the property-check suites and the acceptance
//! tests: seeded desk-scale scenarios spanning cluster sizes, engines,
//! fault kinds, stragglers, and payment proportions.

use crate::execution::OrderingMode;
use crate::replica::FaultBehavior;
use crate::sb::SbEngine;
use crate::sim::config::{FaultSpec, ScenarioConfig};

pub const FAULT_KINDS: [FaultBehavior; 4] = [
    FaultBehavior::CrashSilent,
    FaultBehavior::Censor,
    FaultBehavior::SpoofState,
    FaultBehavior::LeadOnly,
];

/// Desk-scale base: small epochs and batches, fast batch cadence, LAN-ish
/// latencies with four regions.
pub fn desk_base(n: usize, f: usize, engine: SbEngine, txs: usize) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::default();
    cfg.scenario.replicas = n;
    cfg.scenario.faults_tolerated = f;
    cfg.scenario.engine = engine;
    cfg.scenario.epoch_length = 8;
    cfg.scenario.batch_size = 64;
    cfg.scenario.batch_timeout_ms = 25;
    cfg.scenario.view_change_timeout_ms = 10_000;
    cfg.scenario.pull_force_after_ms = 500;
    cfg.scenario.horizon_ms = 600_000;
    cfg.network.intra_region_latency_us = 500;
    cfg.network.inter_region_latency_us = 5_000;
    cfg.network.jitter_us = 200;
    cfg.workload.accounts = 150;
    cfg.workload.shared_objects = 20;
    cfg.workload.total_txs = txs;
    cfg.workload.submit_rate_tps = 2_000;
    cfg.workload.multi_payer_fraction = 0.15;
    cfg
}

/// One scenario of the safety battery: cluster size, fault budget, engine,
/// and fault plan all derived from the index.
pub fn safety_scenario(index: usize) -> (ScenarioConfig, u64) {
    let n = [4usize, 8, 16][index % 3];
    let f_max = (n - 1) / 3;
    let f = 1 + (index / 3) % f_max.max(1);
    let engine = if index % 2 == 0 { SbEngine::Ideal } else { SbEngine::Pbft };
    let mut cfg = desk_base(n, f, engine, 300);
    cfg.workload.insolvent_fraction = 0.05;
    // Between zero and f Byzantine replicas, behaviors cycling through the
    // four kinds, activation staggered.
    let byz_count = index % (f + 1);
    for j in 0..byz_count {
        cfg.scenario.view_change_timeout_ms = 2_000;
        cfg.faults.push(FaultSpec {
            replica: (j * 2 + 1) % n,
            start_ms: 100 + 150 * j as u64,
            behavior: FAULT_KINDS[(index + j) % FAULT_KINDS.len()],
        });
    }
    cfg.validate().expect("battery scenario is valid");
    (cfg, 1_000 + index as u64)
}

pub fn safety_battery(count: usize) -> Vec<(ScenarioConfig, u64)> {
    (0..count).map(safety_scenario).collect()
}

/// Multi-payer heavy workload with forced insufficient funds.
pub fn atomicity_scenario(index: usize) -> (ScenarioConfig, u64) {
    let engine = if index % 2 == 0 { SbEngine::Ideal } else { SbEngine::Pbft };
    let mut cfg = desk_base(4 + 4 * (index % 2), 1 + (index % 2), engine, 400);
    cfg.workload.multi_payer_fraction = 0.25;
    cfg.workload.insolvent_fraction = 0.3;
    cfg.workload.insolvent_balance = 1;
    cfg.workload.initial_balance = 60;
    cfg.scenario.pull_force_after_ms = 300;
    cfg.validate().expect("valid");
    (cfg, 2_000 + index as u64)
}

/// Mixed-engine scenarios with shuffled delivery orders for the ordering
/// checks; some include a straggler to stress the bar.
pub fn ordering_scenario(index: usize) -> (ScenarioConfig, u64) {
    let n = [4usize, 8][index % 2];
    let engine = if index % 4 < 2 { SbEngine::Ideal } else { SbEngine::Pbft };
    let mut cfg = desk_base(n, (n - 1) / 3, engine, 250);
    cfg.network.jitter_us = 3_000;
    if index % 3 == 0 {
        cfg.network.straggler_replica = Some(index % n);
        cfg.network.straggler_factor = 8.0;
    }
    cfg.validate().expect("valid");
    (cfg, 3_000 + index as u64)
}

/// The straggler contrast pair: identical scenario except for the ordering
/// mode — hybrid versus everything-global — sixteen replicas, one tenfold
/// straggler, the measured payment proportion.
pub fn straggler_pair() -> (ScenarioConfig, ScenarioConfig) {
    let mut cfg = desk_base(16, 5, SbEngine::Ideal, 600);
    cfg.workload.payment_proportion = 0.46;
    cfg.network.straggler_replica = Some(3);
    cfg.network.straggler_factor = 10.0;
    // Long epochs: the run fits in one, so epoch-boundary stalls do not
    // blur the straggler's effect on the two ordering paths.
    cfg.scenario.epoch_length = 256;
    cfg.validate().expect("valid");
    let mut global = cfg.clone();
    global.scenario.mode = OrderingMode::GlobalAll;
    (cfg, global)
}

/// Straggler scenario with a configurable payment proportion, for the
/// proportion sweep.
pub fn proportion_scenario(p: f64) -> ScenarioConfig {
    let mut cfg = straggler_pair().0;
    cfg.workload.payment_proportion = p;
    cfg.validate().expect("valid");
    cfg
}

/// Scripted detectable fault early in epoch 2 with the ten-second view
/// change timeout; continuous load across the outage.
pub fn recovery_scenario() -> (ScenarioConfig, u64) {
    let mut cfg = desk_base(4, 1, SbEngine::Ideal, 4_000);
    cfg.scenario.epoch_length = 16;
    cfg.scenario.batch_size = 32;
    cfg.scenario.batch_timeout_ms = 100;
    cfg.scenario.view_change_timeout_ms = 10_000;
    cfg.workload.submit_rate_tps = 300;
    cfg.workload.total_txs = 4_000;
    cfg.scenario.horizon_ms = 240_000;
    // Replica 1 crashes a little into the second epoch.
    cfg.faults.push(FaultSpec {
        replica: 1,
        start_ms: 4_000,
        behavior: FaultBehavior::CrashSilent,
    });
    cfg.validate().expect("valid");
    (cfg, 9_100)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batteries_are_valid_and_deterministic() {
        let a = safety_battery(50);
        let b = safety_battery(50);
        assert_eq!(a.len(), 50);
        for ((cfg_a, seed_a), (cfg_b, seed_b)) in a.iter().zip(&b) {
            assert_eq!(seed_a, seed_b);
            assert_eq!(cfg_a.to_toml(), cfg_b.to_toml());
        }
        // All four fault kinds appear somewhere.
        let kinds: std::collections::BTreeSet<String> = a
            .iter()
            .flat_map(|(cfg, _)| cfg.faults.iter().map(|f| format!("{:?}", f.behavior)))
            .collect();
        assert_eq!(kinds.len(), 4, "battery must draw all fault kinds: {kinds:?}");
    }
}
