//! Acceptance suite: one test per release criterion, each printing a
//! `ACCEPTANCE <n> <name>: PASS` line (run with `--nocapture` to see them
//! all). The heavyweight scenario batteries are shared between criteria
//! through lazily initialized statics.

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use orthrus::domain::{Amount, ObjectKey, OpSpec, Transaction, TxId, TxKind};
use orthrus::execution::{ConfirmationStatus, ExecPath};
use orthrus::oracle::permutation_check;
use orthrus::sim::config::ScenarioConfig;
use orthrus::sim::workload::genesis_store;
use orthrus::sim::{presets, run_scenario, RunResult};

const SAFETY_SCENARIOS: usize = 50;
const ORDERING_RUNS: usize = 20;
const STRAGGLER_PAIRS: u64 = 10;

struct BatteryEntry {
    seed: u64,
    result: RunResult,
    /// Completion of the fault-free twin, used as the liveness yardstick.
    fault_free_completion: u64,
}

fn battery() -> &'static Vec<BatteryEntry> {
    static BATTERY: OnceLock<Vec<BatteryEntry>> = OnceLock::new();
    BATTERY.get_or_init(|| {
        presets::safety_battery(SAFETY_SCENARIOS)
            .into_iter()
            .map(|(cfg, seed)| {
                let mut fault_free = cfg.clone();
                fault_free.faults.clear();
                let baseline = run_scenario(&fault_free, seed).expect("fault-free run");
                assert!(
                    baseline.all_confirmed,
                    "fault-free baseline must complete (seed {seed})"
                );
                assert_eq!(
                    baseline.metrics.view_changes, 0,
                    "honest leaders must never be suspected in fault-free runs (seed {seed})"
                );
                assert_eq!(baseline.noop_fills, 0, "fault-free runs have no recovery fills");
                let mut bounded = cfg.clone();
                bounded.scenario.horizon_ms =
                    ((baseline.completion / 1_000_000).max(1) * 10).max(1_000);
                let result = run_scenario(&bounded, seed).expect("scenario run");
                BatteryEntry { seed, result, fault_free_completion: baseline.completion }
            })
            .collect()
    })
}

fn straggler_pairs() -> &'static Vec<(u64, RunResult, RunResult)> {
    static PAIRS: OnceLock<Vec<(u64, RunResult, RunResult)>> = OnceLock::new();
    PAIRS.get_or_init(|| {
        let (orthrus_cfg, global_cfg) = presets::straggler_pair();
        (0..STRAGGLER_PAIRS)
            .map(|k| {
                let seed = 6_000 + k;
                let hybrid = run_scenario(&orthrus_cfg, seed).expect("hybrid run");
                let global = run_scenario(&global_cfg, seed).expect("global run");
                assert!(hybrid.all_confirmed && global.all_confirmed, "pair {seed} complete");
                (seed, hybrid, global)
            })
            .collect()
    })
}

#[test]
fn criterion_01_safety_suite() {
    let start = Instant::now();
    let battery = battery();
    assert_eq!(battery.len(), SAFETY_SCENARIOS);
    for entry in battery {
        for (property, ok, detail) in &entry.result.oracle.entries {
            if property == "replica_agreement" || property == "delivery_agreement" {
                assert!(
                    ok,
                    "seed {}: {} failed: {}",
                    entry.seed, property, detail
                );
            }
        }
    }
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs() < 300,
        "safety suite must finish within five minutes, took {elapsed:?}"
    );
    println!(
        "ACCEPTANCE 1 safety_suite: PASS ({} scenarios, zero divergences, {elapsed:?})",
        battery.len()
    );
}

#[test]
fn criterion_02_oracle_equality() {
    for entry in battery() {
        for (property, ok, detail) in &entry.result.oracle.entries {
            if property == "owned_balance_formula" || property == "shared_glog_replay" {
                assert!(ok, "seed {}: {} failed: {}", entry.seed, property, detail);
            }
        }
    }
    println!("ACCEPTANCE 2 oracle_equality: PASS (owned formula and shared replay exact)");
}

#[test]
fn criterion_03_atomicity() {
    let mut total_aborts = 0usize;
    for index in 0..6 {
        let (cfg, seed) = presets::atomicity_scenario(index);
        assert!(cfg.workload.multi_payer_fraction >= 0.2);
        assert!(cfg.workload.insolvent_fraction > 0.0);
        let result = run_scenario(&cfg, seed).expect("atomicity run");
        assert!(result.all_confirmed, "seed {seed}: all transactions must decide");
        assert!(result.passed(), "seed {seed}: {}", result.oracle.render());
        // The escrow log must be empty at quiescence on every honest replica.
        for snapshot in &result.snapshots {
            assert_eq!(snapshot.escrow_entries, 0, "seed {seed}: escrow log not drained");
        }
        // Conservation: the generator's workloads keep total owned value
        // invariant, so the final sum must equal genesis exactly.
        let genesis = genesis_store(&cfg.workload, seed);
        let expect: i128 = genesis.genesis_owned_total();
        for snapshot in &result.snapshots {
            let total: i128 = snapshot
                .values
                .iter()
                .filter(|(k, _)| genesis.get(k).map_or(false, |o| o.kind == orthrus::domain::ObjectType::Owned))
                .map(|(_, v)| i128::from(*v))
                .sum();
            assert_eq!(total, expect, "seed {seed}: owned total drifted");
        }
        total_aborts += result
            .metrics
            .per_tx
            .values()
            .filter(|(t, _)| t.client_status == Some(ConfirmationStatus::ConfirmedAbort))
            .count();
    }
    assert!(total_aborts > 0, "insolvency must force aborts");
    println!(
        "ACCEPTANCE 3 atomicity: PASS (multi-payer aborts fully refunded, {total_aborts} aborts, conservation exact)"
    );
}

#[test]
fn criterion_04_global_ordering() {
    for index in 0..ORDERING_RUNS {
        let (cfg, seed) = presets::ordering_scenario(index);
        // Rank monotonicity, bar safety, and ordering-key agreement are
        // fatal online assertions; a completed run certifies them.
        let result = run_scenario(&cfg, seed).expect("ordering run (online rank/bar asserts)");
        assert!(result.all_confirmed, "seed {seed}: run must quiesce");
        for (property, ok, detail) in &result.oracle.entries {
            if property == "global_order_brute_force" {
                assert!(ok, "seed {seed}: {detail}");
            }
        }
    }
    println!(
        "ACCEPTANCE 4 global_ordering: PASS ({ORDERING_RUNS} runs match the brute-force rank sort)"
    );
}

#[test]
fn criterion_05_liveness() {
    for entry in battery() {
        assert!(
            entry.result.all_confirmed,
            "seed {}: not all transactions confirmed within 10x fault-free completion ({} ns): {}",
            entry.seed,
            entry.fault_free_completion,
            entry.result.oracle.render()
        );
    }
    println!(
        "ACCEPTANCE 5 liveness: PASS (100% confirmation within 10x fault-free horizon, {} scenarios)",
        battery().len()
    );
}

#[test]
fn criterion_06_straggler_benefit() {
    for (seed, hybrid, global) in straggler_pairs() {
        let hybrid_pay = hybrid
            .metrics
            .mean_latency_by_kind(TxKind::Payment)
            .expect("payments confirmed");
        let global_pay = global
            .metrics
            .mean_latency_by_kind(TxKind::Payment)
            .expect("payments confirmed");
        assert!(
            hybrid_pay <= 0.5 * global_pay,
            "seed {seed}: hybrid payment latency {:.1}ms must be at most half of {:.1}ms",
            hybrid_pay / 1e6,
            global_pay / 1e6
        );
        let hybrid_con = hybrid.metrics.mean_latency_by_kind(TxKind::Contract).unwrap();
        let global_con = global.metrics.mean_latency_by_kind(TxKind::Contract).unwrap();
        let ratio = hybrid_con / global_con;
        assert!(
            (1.0 / 1.2..=1.2).contains(&ratio),
            "seed {seed}: contract latency ratio {ratio:.3} outside 20%"
        );
    }
    println!(
        "ACCEPTANCE 6 straggler_benefit: PASS ({} seed pairs, payment latency halved, contracts within 20%)",
        straggler_pairs().len()
    );
}

#[test]
fn criterion_07_proportion_trend() {
    let proportions = [0.0, 0.25, 0.5, 0.75, 1.0];
    let seeds = [7_100u64, 7_200, 7_300];
    let mut means = Vec::new();
    for p in proportions {
        let cfg = presets::proportion_scenario(p);
        let mut sum = 0.0;
        for seed in seeds {
            let result = run_scenario(&cfg, seed).expect("proportion run");
            assert!(result.all_confirmed, "p={p} seed={seed} must complete");
            sum += result.metrics.mean_latency(|_| true).expect("latencies");
        }
        means.push(sum / seeds.len() as f64);
    }
    for window in means.windows(2) {
        assert!(
            window[1] <= window[0] * 1.05,
            "latency must be non-increasing within 5% tolerance as payments rise: {means:?}"
        );
    }
    assert!(
        means[4] <= 0.6 * means[0],
        "all-payment latency must be at most 60% of all-contract latency: {means:?}"
    );
    println!(
        "ACCEPTANCE 7 proportion_trend: PASS (means ms {:?})",
        means.iter().map(|m| (m / 1e6 * 10.0).round() / 10.0).collect::<Vec<_>>()
    );
}

#[test]
fn criterion_08_breakdown_integrity() {
    let mut contract_global = Vec::new();
    let mut contract_other = Vec::new();
    let mut checked = 0usize;
    for (_, hybrid, _) in straggler_pairs() {
        for (timeline, breakdown) in hybrid.metrics.per_tx.values() {
            let Some(b) = breakdown else { continue };
            checked += 1;
            // Non-negative by type; ordered and exactly summing.
            assert_eq!(
                b.send + b.preprocess + b.partial_order + b.global_order + b.reply,
                b.total,
                "stage durations must sum to the end-to-end latency"
            );
            if timeline.path == Some(ExecPath::Partial) {
                assert_eq!(b.global_order, 0, "partial-path global stage must be exactly zero");
            }
            if timeline.kind == TxKind::Contract {
                contract_global.push(b.global_order as f64);
                contract_other.push(
                    [b.send, b.preprocess, b.partial_order, b.reply]
                        .into_iter()
                        .map(|v| v as f64)
                        .collect::<Vec<_>>(),
                );
            }
        }
    }
    assert!(checked > 0);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let global_mean = mean(&contract_global);
    for stage_idx in 0..4 {
        let stage_mean =
            mean(&contract_other.iter().map(|v| v[stage_idx]).collect::<Vec<_>>());
        assert!(
            global_mean > stage_mean,
            "global ordering stage ({global_mean:.0}ns) must dominate stage {stage_idx} ({stage_mean:.0}ns) under a straggler"
        );
    }
    println!(
        "ACCEPTANCE 8 breakdown_integrity: PASS ({checked} transactions, global stage dominates contracts)"
    );
}

#[test]
fn criterion_09_fault_recovery_timeline() {
    let (cfg, seed) = presets::recovery_scenario();
    let fault_start_ns = cfg.faults[0].start_ms * 1_000_000;
    let vc_timeout_ns = cfg.scenario.view_change_timeout_ms * 1_000_000;
    let result = run_scenario(&cfg, seed).expect("recovery run");
    assert!(result.all_confirmed, "all blocked transactions must confirm after recovery");
    assert_eq!(
        result.metrics.confirmed_count(),
        result.metrics.submitted_count(),
        "total confirmed must equal total submitted"
    );
    assert!(result.metrics.view_changes > 0, "the crash must trigger a view change");
    let bucket_ns = 500_000_000u64;
    let series = result.metrics.throughput_series(bucket_ns);
    let mean_between = |from: u64, to: u64| {
        let vals: Vec<f64> = series
            .iter()
            .filter(|(t, _)| *t >= from && *t < to)
            .map(|(_, tps)| *tps)
            .collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    };
    // Throughput before the fault, during the unhealed outage, and after
    // the view change completes.
    let pre = mean_between(bucket_ns, fault_start_ns);
    let outage = mean_between(fault_start_ns + bucket_ns, fault_start_ns + vc_timeout_ns);
    let recovery_start = fault_start_ns + vc_timeout_ns + bucket_ns;
    let post_peak = series
        .iter()
        .filter(|(t, _)| *t >= recovery_start)
        .map(|(_, tps)| *tps)
        .fold(0.0f64, f64::max);
    assert!(
        outage < 0.5 * pre,
        "throughput must drop while unhealed: pre {pre:.1} tps vs outage {outage:.1} tps"
    );
    assert!(
        post_peak > outage,
        "throughput must recover after the view change: outage {outage:.1} vs post {post_peak:.1}"
    );
    println!(
        "ACCEPTANCE 9 fault_recovery_timeline: PASS (pre {pre:.0} tps, outage {outage:.0} tps, post-recovery peak {post_peak:.0} tps)"
    );
}

#[test]
fn criterion_10_determinism() {
    let scenarios: Vec<(ScenarioConfig, u64)> = vec![
        presets::safety_scenario(0),
        presets::safety_scenario(7),
        presets::atomicity_scenario(1),
    ];
    let tmp = std::env::temp_dir().join(format!("orthrus-acceptance-{}", std::process::id()));
    for (index, (cfg, seed)) in scenarios.into_iter().enumerate() {
        let a = run_scenario(&cfg, seed).expect("first run");
        let b = run_scenario(&cfg, seed).expect("second run");
        let dir_a = tmp.join(format!("{index}-a"));
        let dir_b = tmp.join(format!("{index}-b"));
        a.write_outputs(&dir_a).unwrap();
        b.write_outputs(&dir_b).unwrap();
        for file in [
            "throughput.csv",
            "latency.csv",
            "confirmations.csv",
            "summary.csv",
            "glog.csv",
            "verdicts.txt",
        ] {
            let bytes_a = std::fs::read(dir_a.join(file)).unwrap();
            let bytes_b = std::fs::read(dir_b.join(file)).unwrap();
            assert_eq!(bytes_a, bytes_b, "{file} must be byte-identical across reruns");
        }
    }
    std::fs::remove_dir_all(&tmp).ok();
    println!("ACCEPTANCE 10 determinism: PASS (3 scenarios, byte-identical outputs)");
}

#[test]
fn criterion_11_permutation_property() {
    // 200 random all-payment sets of size <= 6: every order in which all
    // succeed must agree exactly on final balances.
    let mut rng = ChaCha8Rng::seed_from_u64(0xacce97);
    let accounts: Vec<ObjectKey> = (0..8).map(|i| ObjectKey::new(format!("p{i}"))).collect();
    let types: BTreeMap<ObjectKey, orthrus::domain::ObjectType> = accounts
        .iter()
        .map(|k| (k.clone(), orthrus::domain::ObjectType::Owned))
        .collect();
    for case in 0..200 {
        let size = rng.random_range(2..=6usize);
        let mut initial = BTreeMap::new();
        for key in &accounts {
            initial.insert(key.clone(), rng.random_range(0..12i64));
        }
        let txs: Vec<Arc<Transaction>> = (0..size)
            .map(|i| {
                let payer = rng.random_range(0..accounts.len());
                let mut payee = rng.random_range(0..accounts.len());
                while payee == payer {
                    payee = rng.random_range(0..accounts.len());
                }
                let amount: Amount = rng.random_range(1..=6);
                Arc::new(Transaction::signed(
                    TxId(case * 10 + i as u64),
                    vec![
                        OpSpec::decrement(accounts[payer].clone(), amount),
                        OpSpec::increment(accounts[payee].clone(), amount),
                    ],
                    0,
                    &types,
                ))
            })
            .collect();
        let check = permutation_check(&initial, &txs);
        assert!(
            check.order_independent,
            "case {case}: all-success orders must agree on final balances"
        );
    }

    // The three documented behaviors: independence, dependency, conflict.
    let keys = |entries: &[(&str, i64)]| -> BTreeMap<ObjectKey, Amount> {
        entries.iter().map(|(k, v)| (ObjectKey::new(*k), *v)).collect()
    };
    let t = |id: u64, payer: &str, amount: Amount, payee: &str| {
        Arc::new(Transaction::signed(
            TxId(id),
            vec![OpSpec::decrement(payer, amount), OpSpec::increment(payee, amount)],
            0,
            &[
                ("alice", orthrus::domain::ObjectType::Owned),
                ("bob", orthrus::domain::ObjectType::Owned),
                ("carol", orthrus::domain::ObjectType::Owned),
            ]
            .into_iter()
            .map(|(k, ty)| (ObjectKey::new(k), ty))
            .collect::<BTreeMap<_, _>>(),
        ))
    };
    // Independence: different payers, both orders succeed identically.
    let check = permutation_check(
        &keys(&[("alice", 5), ("bob", 5), ("carol", 0)]),
        &[t(1, "alice", 3, "carol"), t(2, "bob", 2, "carol")],
    );
    assert_eq!(check.all_success_balances.len(), 2);
    assert!(check.order_independent);
    assert_eq!(check.success_sets.len(), 1);
    // Dependency: the spend only succeeds after the funding transfer.
    let check = permutation_check(
        &keys(&[("alice", 5), ("bob", 0), ("carol", 0)]),
        &[t(3, "alice", 2, "bob"), t(2, "bob", 2, "carol")],
    );
    assert_eq!(check.all_success_balances.len(), 1);
    assert_eq!(check.success_sets.len(), 2);
    // Conflict: a single payer with limited funds; order decides the winner.
    let check = permutation_check(
        &keys(&[("alice", 3), ("bob", 0), ("carol", 0)]),
        &[t(1, "alice", 3, "carol"), t(3, "alice", 3, "bob")],
    );
    assert!(check.all_success_balances.is_empty());
    assert_eq!(check.success_sets.len(), 2);
    println!("ACCEPTANCE 11 permutation_property: PASS (200 random sets plus the documented cases)");
}
