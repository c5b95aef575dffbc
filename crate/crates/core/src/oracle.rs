//! Independent correctness oracles.
//!
//! Everything here re-derives expected results from transaction definitions
//! and recorded confirmation statuses alone, on purpose sharing only the
//! domain types with the protocol code. The closed-form balance check, the
//! sequential global-log replay, the permutation checker, and the
//! cross-replica comparison each give the test suites a second opinion that
//! cannot inherit a protocol bug.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::Arc;

use crate::domain::{
    Amount, Block, ObjectKey, ObjectType, OpKind, Transaction, TxId,
};

/// Pass/fail verdicts per property, with counterexample details.
#[derive(Debug, Default, Clone)]
pub struct OracleReport {
    pub entries: Vec<(String, bool, String)>,
}

impl OracleReport {
    pub fn record(&mut self, property: impl Into<String>, pass: bool, detail: impl Into<String>) {
        self.entries.push((property.into(), pass, detail.into()));
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|(_, ok, _)| *ok)
    }

    pub fn failures(&self) -> impl Iterator<Item = &(String, bool, String)> {
        self.entries.iter().filter(|(_, ok, _)| !ok)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (property, ok, detail) in &self.entries {
            let _ = writeln!(
                out,
                "property={} status={} detail={}",
                property,
                if *ok { "pass" } else { "fail" },
                detail
            );
        }
        out
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.render())
    }
}

/// Closed-form final value of one owned object: initial plus all incoming
/// minus all outgoing amounts over success-confirmed transactions.
pub fn balance_formula(
    initial: Amount,
    key: &ObjectKey,
    txs: &[Arc<Transaction>],
    success: &BTreeSet<TxId>,
) -> Amount {
    let mut value = i128::from(initial);
    for tx in txs {
        if !success.contains(&tx.id) {
            continue;
        }
        for op in &tx.ops {
            if &op.target == key {
                match op.kind {
                    OpKind::Increment => value += i128::from(op.amount),
                    OpKind::Decrement => value -= i128::from(op.amount),
                    _ => {}
                }
            }
        }
    }
    value as Amount
}

/// Sequential reference interpreter for the global log: replays confirmed
/// blocks in order, executing each success-confirmed contract at its final
/// occurrence, and returns the resulting shared-object values. Also verifies
/// that every success-confirmed contract was actually feasible at its
/// position.
pub fn replay_glog_shared(
    genesis: &BTreeMap<ObjectKey, (Amount, Amount, ObjectType)>,
    glog: &[Arc<Block>],
    success: &BTreeSet<TxId>,
    report: &mut OracleReport,
) -> BTreeMap<ObjectKey, Amount> {
    let mut occurrences: BTreeMap<TxId, usize> = BTreeMap::new();
    for block in glog {
        for tx in &block.txs {
            *occurrences.entry(tx.id).or_insert(0) += 1;
        }
    }
    let mut shared: BTreeMap<ObjectKey, Amount> = genesis
        .iter()
        .filter(|(_, (_, _, ty))| *ty == ObjectType::Shared)
        .map(|(k, (v, _, _))| (k.clone(), *v))
        .collect();
    let mut seen: BTreeMap<TxId, usize> = BTreeMap::new();
    let mut feasible_ok = true;
    let mut detail = String::from("ok");
    for block in glog {
        for tx in &block.txs {
            let seen_count = seen.entry(tx.id).or_insert(0);
            *seen_count += 1;
            if *seen_count < occurrences[&tx.id] {
                continue;
            }
            if !success.contains(&tx.id) {
                continue;
            }
            // Execute shared operations of the final occurrence.
            for op in &tx.ops {
                let Some((_, con, ty)) = genesis.get(&op.target) else { continue };
                if *ty != ObjectType::Shared {
                    continue;
                }
                let value = shared.get_mut(&op.target).expect("seeded from genesis");
                match op.kind {
                    OpKind::Assign => *value = op.amount,
                    OpKind::Increment => *value += op.amount,
                    OpKind::Decrement => {
                        if *value - op.amount < *con && feasible_ok {
                            feasible_ok = false;
                            detail = format!(
                                "tx {} confirmed success but shared {} would fall below its bound",
                                tx.id, op.target
                            );
                        }
                        *value -= op.amount;
                    }
                    OpKind::Read => {}
                }
            }
        }
    }
    report.record("glog_replay_feasibility", feasible_ok, detail);
    shared
}

/// Outcome of executing one permutation of a payment set sequentially.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationOutcome {
    pub succeeded: BTreeSet<TxId>,
    pub balances: BTreeMap<ObjectKey, Amount>,
}

/// Execute a payment set in one specific order against initial balances.
/// A transaction succeeds when every decrement stays at or above zero at its
/// turn; failures leave no effect.
pub fn execute_order(
    initial: &BTreeMap<ObjectKey, Amount>,
    order: &[&Arc<Transaction>],
) -> PermutationOutcome {
    let mut balances = initial.clone();
    let mut succeeded = BTreeSet::new();
    for tx in order {
        let feasible = tx.ops.iter().all(|op| match op.kind {
            OpKind::Decrement => {
                balances.get(&op.target).copied().unwrap_or(0) - op.amount >= 0
            }
            _ => true,
        });
        if !feasible {
            continue;
        }
        for op in &tx.ops {
            let value = balances.entry(op.target.clone()).or_insert(0);
            match op.kind {
                OpKind::Increment => *value += op.amount,
                OpKind::Decrement => *value -= op.amount,
                _ => {}
            }
        }
        succeeded.insert(tx.id);
    }
    PermutationOutcome { succeeded, balances }
}

/// Result of checking every permutation of a small all-payment set.
#[derive(Debug)]
pub struct PermutationCheck {
    /// Orders in which every transaction succeeded, with final balances.
    pub all_success_balances: Vec<BTreeMap<ObjectKey, Amount>>,
    /// Distinct success sets observed across orders.
    pub success_sets: BTreeSet<BTreeSet<TxId>>,
    /// True when every all-success order produced identical final values.
    pub order_independent: bool,
}

/// Try every permutation of the set (factorial; callers keep sets small)
/// and check that all fully-successful orders agree on final balances.
pub fn permutation_check(
    initial: &BTreeMap<ObjectKey, Amount>,
    txs: &[Arc<Transaction>],
) -> PermutationCheck {
    assert!(txs.len() <= 8, "permutation check is factorial");
    let mut order: Vec<&Arc<Transaction>> = txs.iter().collect();
    let mut all_success_balances = Vec::new();
    let mut success_sets = BTreeSet::new();
    permute(&mut order, 0, &mut |perm| {
        let outcome = execute_order(initial, perm);
        if outcome.succeeded.len() == txs.len() {
            all_success_balances.push(outcome.balances.clone());
        }
        success_sets.insert(outcome.succeeded);
    });
    let order_independent = all_success_balances
        .windows(2)
        .all(|w| w[0] == w[1]);
    PermutationCheck { all_success_balances, success_sets, order_independent }
}

fn permute<'a>(
    order: &mut Vec<&'a Arc<Transaction>>,
    k: usize,
    visit: &mut impl FnMut(&[&'a Arc<Transaction>]),
) {
    if k == order.len() {
        visit(order);
        return;
    }
    for i in k..order.len() {
        order.swap(k, i);
        permute(order, k + 1, visit);
        order.swap(k, i);
    }
}

/// Brute-force global ordering oracle. `delivered` holds every delivered
/// block as (rank, instance, sn, needs_global_position); `glogs` holds each
/// honest replica's final global log in confirmation order. Each log must
/// be exactly a prefix of the delivered blocks sorted by (rank, instance),
/// and every block that carried globally ordered work must appear in every
/// log (only trailing keep-alive or payment-only blocks may still be
/// waiting at the bar when a run quiesces).
pub fn check_global_order(
    delivered: &[(u64, usize, u64, bool)],
    glogs: &[Vec<(u64, usize, u64)>],
    report: &mut OracleReport,
) {
    let mut sorted: Vec<(u64, usize, u64, bool)> = delivered.to_vec();
    sorted.sort_by_key(|(rank, ins, _, _)| (*rank, *ins));
    let mut pass = true;
    let mut detail = String::from("ok");
    for (replica, glog) in glogs.iter().enumerate() {
        if glog.len() > sorted.len() {
            pass = false;
            detail = format!("replica {replica}: glog longer than delivered set");
            break;
        }
        let prefix_ok = glog
            .iter()
            .zip(&sorted)
            .all(|(g, d)| *g == (d.0, d.1, d.2));
        if !prefix_ok {
            pass = false;
            let mismatch = glog
                .iter()
                .zip(&sorted)
                .position(|(g, d)| *g != (d.0, d.1, d.2))
                .unwrap_or(0);
            detail = format!(
                "replica {replica}: glog diverges from rank sort at position {mismatch}: {:?} vs {:?}",
                glog.get(mismatch),
                sorted.get(mismatch)
            );
            break;
        }
        // Everything needing a global position must be inside the prefix.
        if let Some(first_missing) = sorted[glog.len()..].iter().find(|(_, _, _, needs)| *needs) {
            pass = false;
            detail = format!(
                "replica {replica}: block (rank {}, ins {}, sn {}) needs a global position but never confirmed",
                first_missing.0, first_missing.1, first_missing.2
            );
            break;
        }
    }
    report.record("global_order_brute_force", pass, detail);
}

/// A replica's externally observable final state, flattened for comparison.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplicaSnapshot {
    pub replica: usize,
    pub values: BTreeMap<ObjectKey, Amount>,
    pub confirmed_success: BTreeSet<TxId>,
    pub confirmed_abort: BTreeSet<TxId>,
    pub escrow_entries: usize,
}

/// Pairwise comparison of honest replicas at quiescence: identical object
/// values and identical confirmed sets. Divergent keys are reported.
pub fn compare_replicas(snapshots: &[ReplicaSnapshot], report: &mut OracleReport) {
    let mut pass = true;
    let mut detail = String::from("ok");
    for pair in snapshots.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if a.values != b.values {
            pass = false;
            let divergent: Vec<String> = a
                .values
                .iter()
                .filter(|(k, v)| b.values.get(*k) != Some(v))
                .map(|(k, v)| format!("{}:{}vs{}", k, v, b.values.get(k).copied().unwrap_or(-1)))
                .take(5)
                .collect();
            detail = format!("replicas {} and {} diverge on {}", a.replica, b.replica, divergent.join(","));
            break;
        }
        if a.confirmed_success != b.confirmed_success || a.confirmed_abort != b.confirmed_abort {
            pass = false;
            detail = format!(
                "replicas {} and {} diverge on confirmed sets ({}+{} vs {}+{})",
                a.replica,
                b.replica,
                a.confirmed_success.len(),
                a.confirmed_abort.len(),
                b.confirmed_success.len(),
                b.confirmed_abort.len()
            );
            break;
        }
    }
    report.record("replica_agreement", pass, detail);
}
