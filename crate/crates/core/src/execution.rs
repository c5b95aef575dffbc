//! Transaction execution against the partial logs (concurrent payment path)
//! and the global log (sequential contract path).
//!
//! Every replica executes every instance's partial log locally; concurrency
//! is a property of the ordering constraints, not of thread placement. A
//! block's transactions run once the replica's processed frontier covers the
//! block's referenced state. Payment transactions commit as soon as all
//! their escrows are observed locally; contract transactions (and, in
//! global-all mode, everything) commit at their final global-log position.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use thiserror::Error;

use crate::domain::{
    apply, state_covers, Amount, DomainError, InstanceId, Object, ObjectKey, ObjectType,
    ObjectTypes, OpKind, SeqNum, SystemState, TimeNs, Transaction, TxId, TxKind,
};
use crate::escrow::{EscrowLog, EscrowViolation};
use crate::ordering::{GlobalLog, PartialLog};
use crate::partition::Partitioner;

#[derive(Debug, Error)]
pub enum ExecutionViolation {
    #[error(transparent)]
    Escrow(#[from] EscrowViolation),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("owned object {key:?} at {value} fell below its condition {con}")]
    NonNegativity { key: ObjectKey, value: Amount, con: Amount },
    #[error("conservation violated: owned {owned} + pending {pending} != genesis {genesis}")]
    Conservation { owned: i128, pending: i128, genesis: i128 },
    #[error("confirmation status of {tx:?} changed after being decided")]
    StatusTransition { tx: TxId },
    #[error("glog execution of {tx:?} reached without all escrow steps")]
    MissingEscrowSteps { tx: TxId },
    #[error("shared object {key:?} mutated outside global-log execution")]
    SharedMutationOutsideGlog { key: ObjectKey },
}

/// Ordering mode: the hybrid protocol path, or the baseline that routes
/// every transaction through global ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderingMode {
    Orthrus,
    GlobalAll,
}

impl std::fmt::Display for OrderingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OrderingMode::Orthrus => "orthrus",
            OrderingMode::GlobalAll => "global_all",
        })
    }
}

// ---------------------------------------------------------------------------
// Object store
// ---------------------------------------------------------------------------

/// All objects of one replica. Owned-value totals are tracked incrementally
/// so the conservation audit is O(1).
#[derive(Debug, Default, Clone)]
pub struct ObjectStore {
    objects: BTreeMap<ObjectKey, Object>,
    owned_total: i128,
    genesis_owned_total: i128,
}

impl ObjectStore {
    pub fn insert(&mut self, object: Object) {
        if object.kind == ObjectType::Owned {
            self.owned_total += i128::from(object.value);
            self.genesis_owned_total += i128::from(object.value);
        }
        let prev = self.objects.insert(object.key.clone(), object);
        assert!(prev.is_none(), "objects are created once at genesis");
    }

    pub fn get(&self, key: &ObjectKey) -> Option<&Object> {
        self.objects.get(key)
    }

    pub fn value(&self, key: &ObjectKey) -> Option<Amount> {
        self.objects.get(key).map(|o| o.value)
    }

    pub fn set_value(&mut self, key: &ObjectKey, value: Amount) {
        let object = self.objects.get_mut(key).expect("set_value on existing object");
        if object.kind == ObjectType::Owned {
            self.owned_total += i128::from(value) - i128::from(object.value);
        }
        object.value = value;
    }

    pub fn owned_total(&self) -> i128 {
        self.owned_total
    }

    pub fn genesis_owned_total(&self) -> i128 {
        self.genesis_owned_total
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ObjectKey, &Object)> {
        self.objects.iter()
    }

    /// Every owned object must satisfy its lower-bound condition.
    pub fn audit_conditions(&self) -> Result<(), ExecutionViolation> {
        for (key, object) in &self.objects {
            if object.kind == ObjectType::Owned && object.value < object.con {
                return Err(ExecutionViolation::NonNegativity {
                    key: key.clone(),
                    value: object.value,
                    con: object.con,
                });
            }
        }
        Ok(())
    }
}

impl ObjectTypes for ObjectStore {
    fn object_type(&self, key: &ObjectKey) -> Option<ObjectType> {
        self.objects.get(key).map(|o| o.kind)
    }
}

// ---------------------------------------------------------------------------
// Confirmation tracking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfirmationStatus {
    Pending,
    ConfirmedSuccess,
    ConfirmedAbort,
}

/// Which ordering path confirmed a transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecPath {
    Partial,
    Global,
}

impl std::fmt::Display for ExecPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ExecPath::Partial => "partial",
            ExecPath::Global => "global",
        })
    }
}

#[derive(Debug, Clone)]
pub struct ConfirmationRecord {
    pub status: ConfirmationStatus,
    pub confirm_time: Option<TimeNs>,
    pub path: Option<ExecPath>,
}

/// A confirmation decided by this replica during a drain pass.
#[derive(Debug, Clone)]
pub struct TxOutcome {
    pub tx: Arc<Transaction>,
    pub status: ConfirmationStatus,
    pub path: ExecPath,
    pub time: TimeNs,
}

// ---------------------------------------------------------------------------
// Execution engine
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct Execution {
    pub store: ObjectStore,
    pub elog: EscrowLog,
    mode: OrderingMode,
    /// Next unprocessed sequence number per instance.
    plog_cursor: Vec<SeqNum>,
    /// Processed frontier: dependency clock for block coverage.
    exec_state: SystemState,
    glog_block_cursor: usize,
    glog_tx_cursor: usize,
    records: BTreeMap<TxId, ConfirmationRecord>,
    /// Consumed global-log occurrences per transaction.
    occurrences_seen: BTreeMap<TxId, usize>,
    /// Completed local escrow steps (one per routed instance).
    steps_done: BTreeMap<TxId, usize>,
    /// Expected owned total: genesis plus the owned-value net of every
    /// committed contract (contracts may move value to or from shared
    /// objects; payments always net zero).
    owned_baseline: i128,
}

impl Execution {
    pub fn new(store: ObjectStore, instances: usize, mode: OrderingMode) -> Self {
        let owned_baseline = store.genesis_owned_total();
        Execution {
            store,
            elog: EscrowLog::default(),
            mode,
            plog_cursor: vec![0; instances],
            exec_state: SystemState::empty(instances),
            glog_block_cursor: 0,
            glog_tx_cursor: 0,
            records: BTreeMap::new(),
            occurrences_seen: BTreeMap::new(),
            steps_done: BTreeMap::new(),
            owned_baseline,
        }
    }

    pub fn mode(&self) -> OrderingMode {
        self.mode
    }

    pub fn exec_state(&self) -> &SystemState {
        &self.exec_state
    }

    pub fn record(&self, tx: TxId) -> Option<&ConfirmationRecord> {
        self.records.get(&tx)
    }

    pub fn records(&self) -> impl Iterator<Item = (&TxId, &ConfirmationRecord)> {
        self.records.iter()
    }

    pub fn decided_count(&self) -> usize {
        self.records
            .values()
            .filter(|r| r.status != ConfirmationStatus::Pending)
            .count()
    }

    fn is_aborted(&self, tx: TxId) -> bool {
        matches!(
            self.records.get(&tx).map(|r| r.status),
            Some(ConfirmationStatus::ConfirmedAbort)
        )
    }

    fn is_success(&self, tx: TxId) -> bool {
        matches!(
            self.records.get(&tx).map(|r| r.status),
            Some(ConfirmationStatus::ConfirmedSuccess)
        )
    }

    /// Owned-value conservation: current owned total plus pending escrow
    /// amounts must equal the baseline (genesis adjusted by committed
    /// contract deltas) at every event boundary.
    pub fn check_conservation(&self) -> Result<(), ExecutionViolation> {
        let owned = self.store.owned_total();
        let pending = self.elog.pending_total();
        if owned + pending != self.owned_baseline {
            return Err(ExecutionViolation::Conservation {
                owned,
                pending,
                genesis: self.owned_baseline,
            });
        }
        Ok(())
    }

    /// Earliest transaction of `plog[i]` ready to run: its block is next in
    /// cursor order and the processed frontier covers the block's state.
    pub fn first_pending_plog(
        &self,
        plogs: &[PartialLog],
        instance: InstanceId,
    ) -> Option<Arc<Transaction>> {
        let block = plogs[instance].get(self.plog_cursor[instance])?;
        if !state_covers(&self.exec_state, &block.state).unwrap_or(false) {
            return None;
        }
        block.txs.first().map(Arc::clone)
    }

    /// Earliest unconsumed global-log transaction.
    pub fn first_pending_glog(&self, glog: &GlobalLog) -> Option<Arc<Transaction>> {
        let mut block_idx = self.glog_block_cursor;
        let mut tx_idx = self.glog_tx_cursor;
        while let Some(block) = glog.entries().get(block_idx) {
            if let Some(tx) = block.txs.get(tx_idx) {
                return Some(Arc::clone(tx));
            }
            block_idx += 1;
            tx_idx = 0;
        }
        None
    }

    /// Run both execution paths to a fixpoint, collecting confirmations.
    pub fn drain(
        &mut self,
        plogs: &[PartialLog],
        glog: &GlobalLog,
        part: &Partitioner,
        now: TimeNs,
        out: &mut Vec<TxOutcome>,
    ) -> Result<(), ExecutionViolation> {
        loop {
            let mut progressed = false;
            for instance in 0..plogs.len() {
                progressed |= self.step_plog(plogs, instance, part, now, out)?;
            }
            progressed |= self.step_glog(glog, part, now, out)?;
            if !progressed {
                return Ok(());
            }
        }
    }

    fn step_plog(
        &mut self,
        plogs: &[PartialLog],
        instance: InstanceId,
        part: &Partitioner,
        now: TimeNs,
        out: &mut Vec<TxOutcome>,
    ) -> Result<bool, ExecutionViolation> {
        let mut progressed = false;
        loop {
            let sn = self.plog_cursor[instance];
            let Some(block) = plogs[instance].get(sn) else { break };
            if !state_covers(&self.exec_state, &block.state)? {
                break;
            }
            let block = Arc::clone(block);
            for tx in &block.txs {
                let forced = block.forced.contains(&tx.id);
                self.plog_step_tx(instance, tx, forced, part, now, out)?;
            }
            self.plog_cursor[instance] = sn + 1;
            self.exec_state.advance(instance, sn);
            progressed = true;
        }
        Ok(progressed)
    }

    /// The local escrow step of one transaction in one instance: escrow
    /// every payer operation assigned here, aborting the whole transaction
    /// on the first failure. A force-included transaction (unsatisfiable
    /// under the proposer's projection) aborts here unconditionally, keeping
    /// the outcome independent of processing interleavings. Payments commit
    /// as soon as every escrow is observed locally (hybrid mode only).
    fn plog_step_tx(
        &mut self,
        instance: InstanceId,
        tx: &Arc<Transaction>,
        forced: bool,
        part: &Partitioner,
        now: TimeNs,
        out: &mut Vec<TxOutcome>,
    ) -> Result<(), ExecutionViolation> {
        if self.is_aborted(tx.id) || self.is_success(tx.id) {
            // Placeholder position: consumed without effect.
            *self.steps_done.entry(tx.id).or_insert(0) += 1;
            return Ok(());
        }
        self.records.entry(tx.id).or_insert(ConfirmationRecord {
            status: ConfirmationStatus::Pending,
            confirm_time: None,
            path: None,
        });
        if forced {
            self.elog.abort(&mut self.store, tx.id)?;
            self.confirm(tx, ConfirmationStatus::ConfirmedAbort, ExecPath::Partial, now, out)?;
            *self.steps_done.entry(tx.id).or_insert(0) += 1;
            self.check_conservation()?;
            return Ok(());
        }
        let payer_ops: Vec<_> = tx
            .payer_ops(&self.store)
            .filter(|op| part.assign(&op.target) == instance)
            .cloned()
            .collect();
        for op in &payer_ops {
            let ok = self.elog.escrow(&mut self.store, tx, op)?;
            if !ok {
                self.elog.abort(&mut self.store, tx.id)?;
                self.confirm(tx, ConfirmationStatus::ConfirmedAbort, ExecPath::Partial, now, out)?;
                *self.steps_done.entry(tx.id).or_insert(0) += 1;
                self.check_conservation()?;
                return Ok(());
            }
        }
        *self.steps_done.entry(tx.id).or_insert(0) += 1;
        if self.elog.all_escrowed(tx, &self.store)
            && tx.kind == TxKind::Payment
            && self.mode == OrderingMode::Orthrus
        {
            self.elog.commit(tx, &self.store)?;
            self.apply_increments(tx)?;
            self.confirm(tx, ConfirmationStatus::ConfirmedSuccess, ExecPath::Partial, now, out)?;
        }
        self.check_conservation()?;
        Ok(())
    }

    fn step_glog(
        &mut self,
        glog: &GlobalLog,
        part: &Partitioner,
        now: TimeNs,
        out: &mut Vec<TxOutcome>,
    ) -> Result<bool, ExecutionViolation> {
        let mut progressed = false;
        'blocks: while let Some(block) = glog.entries().get(self.glog_block_cursor) {
            let block = Arc::clone(block);
            while let Some(tx) = block.txs.get(self.glog_tx_cursor) {
                let route_len = part.route(tx, &self.store).len();
                if self.is_aborted(tx.id) || self.is_success(tx.id) {
                    // Placeholder or already-confirmed payment occurrence.
                    self.consume_glog_position(tx.id);
                    progressed = true;
                    continue;
                }
                if tx.kind == TxKind::Payment && self.mode == OrderingMode::Orthrus {
                    // Payments bypass global ordering in hybrid mode.
                    self.consume_glog_position(tx.id);
                    progressed = true;
                    continue;
                }
                let seen = self.occurrences_seen.get(&tx.id).copied().unwrap_or(0);
                if seen + 1 < route_len {
                    // Not the last occurrence: drop it and move on.
                    self.consume_glog_position(tx.id);
                    progressed = true;
                    continue;
                }
                // Final occurrence: wait for every local escrow step.
                if self.steps_done.get(&tx.id).copied().unwrap_or(0) < route_len {
                    break 'blocks;
                }
                self.execute_at_global_position(tx, now, out)?;
                self.consume_glog_position(tx.id);
                progressed = true;
            }
            self.glog_block_cursor += 1;
            self.glog_tx_cursor = 0;
        }
        Ok(progressed)
    }

    fn consume_glog_position(&mut self, tx: TxId) {
        *self.occurrences_seen.entry(tx).or_insert(0) += 1;
        self.glog_tx_cursor += 1;
    }

    /// Execute a transaction at its final global-log position: contracts run
    /// their operation list against the shared state; in global-all mode
    /// payments also commit here.
    fn execute_at_global_position(
        &mut self,
        tx: &Arc<Transaction>,
        now: TimeNs,
        out: &mut Vec<TxOutcome>,
    ) -> Result<(), ExecutionViolation> {
        if !self.elog.all_escrowed(tx, &self.store) {
            // A failed escrow aborts immediately in the plog step, so the
            // transaction cannot reach this point undecided.
            return Err(ExecutionViolation::MissingEscrowSteps { tx: tx.id });
        }
        let ok = match tx.kind {
            TxKind::Payment => true,
            TxKind::Contract => self.contract_feasible(tx)?,
        };
        if ok {
            if tx.kind == TxKind::Contract {
                self.apply_contract_ops(tx)?;
                self.owned_baseline += self.contract_owned_delta(tx);
            } else {
                self.apply_increments(tx)?;
            }
            self.elog.commit(tx, &self.store)?;
            self.confirm(tx, ConfirmationStatus::ConfirmedSuccess, ExecPath::Global, now, out)?;
        } else {
            self.elog.abort(&mut self.store, tx.id)?;
            self.confirm(tx, ConfirmationStatus::ConfirmedAbort, ExecPath::Global, now, out)?;
        }
        self.check_conservation()?;
        Ok(())
    }

    /// Feasibility of a contract's non-escrowed operations against the
    /// current state; nothing is applied until all checks pass, so a failed
    /// contract leaves shared objects untouched.
    fn contract_feasible(&self, tx: &Transaction) -> Result<bool, ExecutionViolation> {
        let mut scratch: BTreeMap<&ObjectKey, Amount> = BTreeMap::new();
        for op in &tx.ops {
            let Some(object) = self.store.get(&op.target) else { return Ok(false) };
            let current = *scratch.get(&op.target).unwrap_or(&object.value);
            match (object.kind, op.kind) {
                (ObjectType::Owned, OpKind::Decrement) => {} // escrowed in the plog step
                (ObjectType::Owned, OpKind::Increment) | (ObjectType::Shared, OpKind::Increment) => {
                    let Some(next) = current.checked_add(op.amount) else { return Ok(false) };
                    scratch.insert(&op.target, next);
                }
                (ObjectType::Shared, OpKind::Decrement) => {
                    let Some(next) = current.checked_sub(op.amount) else { return Ok(false) };
                    if next < object.con {
                        return Ok(false);
                    }
                    scratch.insert(&op.target, next);
                }
                (ObjectType::Shared, OpKind::Assign) => {
                    scratch.insert(&op.target, op.amount);
                }
                (ObjectType::Shared, OpKind::Read) => {}
                (ObjectType::Owned, OpKind::Assign) | (ObjectType::Owned, OpKind::Read) => {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }

    fn apply_contract_ops(&mut self, tx: &Transaction) -> Result<(), ExecutionViolation> {
        for op in &tx.ops {
            let object = self.store.get(&op.target).expect("checked by feasibility");
            match (object.kind, op.kind) {
                (ObjectType::Owned, OpKind::Decrement) | (ObjectType::Shared, OpKind::Read) => {}
                _ => {
                    let next = apply(object.value, op)?;
                    self.store.set_value(&op.target, next);
                }
            }
        }
        Ok(())
    }

    /// Owned-value net effect of a contract: increments minus decrements on
    /// owned objects.
    fn contract_owned_delta(&self, tx: &Transaction) -> i128 {
        let mut delta = 0i128;
        for op in &tx.ops {
            if self.store.object_type(&op.target) == Some(ObjectType::Owned) {
                match op.kind {
                    OpKind::Increment => delta += i128::from(op.amount),
                    OpKind::Decrement => delta -= i128::from(op.amount),
                    _ => {}
                }
            }
        }
        delta
    }

    /// Apply the incremental operations of a payment at commit time.
    fn apply_increments(&mut self, tx: &Transaction) -> Result<(), ExecutionViolation> {
        for op in &tx.ops {
            if op.kind == OpKind::Increment {
                let value = self
                    .store
                    .value(&op.target)
                    .ok_or_else(|| EscrowViolation::UnknownObject { key: op.target.clone() })?;
                self.store.set_value(&op.target, apply(value, op)?);
            }
        }
        Ok(())
    }

    fn confirm(
        &mut self,
        tx: &Arc<Transaction>,
        status: ConfirmationStatus,
        path: ExecPath,
        now: TimeNs,
        out: &mut Vec<TxOutcome>,
    ) -> Result<(), ExecutionViolation> {
        let record = self.records.entry(tx.id).or_insert(ConfirmationRecord {
            status: ConfirmationStatus::Pending,
            confirm_time: None,
            path: None,
        });
        if record.status != ConfirmationStatus::Pending {
            return Err(ExecutionViolation::StatusTransition { tx: tx.id });
        }
        record.status = status;
        record.confirm_time = Some(now);
        record.path = Some(path);
        out.push(TxOutcome { tx: Arc::clone(tx), status, path, time: now });
        Ok(())
    }

    /// Abort requested from outside the escrow path (unused by the normal
    /// flow; kept for fault handling symmetry). Idempotent.
    pub fn abort_tx(
        &mut self,
        tx: &Arc<Transaction>,
        now: TimeNs,
        out: &mut Vec<TxOutcome>,
    ) -> Result<(), ExecutionViolation> {
        if self.is_aborted(tx.id) {
            return Ok(());
        }
        self.elog.abort(&mut self.store, tx.id)?;
        self.confirm(tx, ConfirmationStatus::ConfirmedAbort, ExecPath::Partial, now, out)?;
        Ok(())
    }

    /// Drop bookkeeping for decided transactions from garbage-collected
    /// epochs.
    pub fn gc(&mut self, decided: &BTreeSet<TxId>) {
        self.occurrences_seen.retain(|tx, _| !decided.contains(tx));
        self.steps_done.retain(|tx, _| !decided.contains(tx));
        self.elog.gc_outcomes(decided);
    }

    pub fn tracking_len(&self) -> usize {
        self.occurrences_seen.len() + self.steps_done.len() + self.elog.outcome_len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Block, OpSpec, Signature, SignerId, TxId};
    use crate::ordering::OrderingState;
    use std::collections::BTreeMap;

    fn genesis() -> ObjectStore {
        let mut s = ObjectStore::default();
        s.insert(Object::owned("Alice", 4));
        s.insert(Object::owned("Bob", 0));
        s.insert(Object::owned("Carol", 0));
        s.insert(Object::shared("pot", 0));
        s
    }

    fn block(ins: InstanceId, sn: SeqNum, rank: u64, state: Vec<Option<SeqNum>>, txs: Vec<Arc<Transaction>>) -> Arc<Block> {
        Arc::new(Block {
            txs,
            ins,
            sn,
            state: SystemState(state),
            rank,
            forced: Default::default(),
            sig: Signature::sign(SignerId::Replica(0), crate::domain::Digest(0)),
        })
    }

    /// The two-instance walkthrough: an immediate single-payer payment, a
    /// cross-instance two-payer payment gated on the first block, and a
    /// two-payer contract executing at its final global position.
    #[test]
    fn two_instance_walkthrough() {
        let store = genesis();
        let part = Partitioner::with_overrides(
            2,
            [(ObjectKey::new("Alice"), 0usize), (ObjectKey::new("Bob"), 1usize)]
                .into_iter()
                .collect(),
        );
        let tx0 = Arc::new(Transaction::signed(
            TxId(0),
            vec![OpSpec::decrement("Alice", 2), OpSpec::increment("Bob", 2)],
            0,
            &store,
        ));
        let tx1 = Arc::new(Transaction::signed(
            TxId(1),
            vec![
                OpSpec::decrement("Alice", 1),
                OpSpec::decrement("Bob", 1),
                OpSpec::increment("Carol", 2),
            ],
            0,
            &store,
        ));
        let tx2 = Arc::new(Transaction::signed(
            TxId(2),
            vec![
                OpSpec::decrement("Alice", 1),
                OpSpec::decrement("Bob", 1),
                OpSpec::increment("pot", 2),
            ],
            0,
            &store,
        ));
        assert_eq!(tx2.kind, TxKind::Contract);

        let mut exec = Execution::new(store, 2, OrderingMode::Orthrus);
        let mut plogs = vec![PartialLog::default(), PartialLog::default()];
        let mut glog = GlobalLog::default();
        let mut ordering = OrderingState::new(2);
        let mut out = Vec::new();

        let blocks = vec![
            block(0, 0, 1, vec![None, None], vec![Arc::clone(&tx0)]),
            block(0, 1, 2, vec![Some(0), None], vec![Arc::clone(&tx1)]),
            block(1, 0, 2, vec![Some(0), None], vec![Arc::clone(&tx1)]),
            block(0, 2, 3, vec![Some(1), Some(0)], vec![Arc::clone(&tx2)]),
            block(1, 1, 4, vec![Some(2), Some(0)], vec![Arc::clone(&tx2)]),
            // Keep-alive flush so the bar passes the contract's position.
            block(0, 3, 5, vec![Some(2), Some(1)], vec![]),
        ];

        // Deliver the Bob half of tx1 before the Alice half: its block state
        // requires instance 0's first block to be processed first, and the
        // cross-instance commit happens only once both escrows are local.
        let order = [0usize, 2, 1, 3, 4, 5];
        for idx in order {
            let b = Arc::clone(&blocks[idx]);
            plogs[b.ins].insert(Arc::clone(&b)).unwrap();
            ordering.global_order(b, &mut glog).unwrap();
            exec.drain(&plogs, &glog, &part, 10, &mut out).unwrap();
        }

        assert_eq!(exec.store.value(&"Alice".into()), Some(0));
        assert_eq!(exec.store.value(&"Bob".into()), Some(0));
        assert_eq!(exec.store.value(&"Carol".into()), Some(2));
        assert_eq!(exec.store.value(&"pot".into()), Some(2));
        assert!(exec.elog.is_empty());
        for tx in [&tx0, &tx1, &tx2] {
            assert_eq!(exec.record(tx.id).unwrap().status, ConfirmationStatus::ConfirmedSuccess);
        }
        let paths: BTreeMap<u64, ExecPath> =
            out.iter().map(|o| (o.tx.id.0, o.path)).collect();
        assert_eq!(paths[&0], ExecPath::Partial);
        assert_eq!(paths[&1], ExecPath::Partial);
        assert_eq!(paths[&2], ExecPath::Global);
        exec.check_conservation().unwrap();
    }

    #[test]
    fn dependent_block_waits_for_coverage() {
        let store = genesis();
        let part = Partitioner::with_overrides(
            2,
            [(ObjectKey::new("Alice"), 0usize), (ObjectKey::new("Bob"), 1usize)]
                .into_iter()
                .collect(),
        );
        let tx0 = Arc::new(Transaction::signed(
            TxId(0),
            vec![OpSpec::decrement("Alice", 2), OpSpec::increment("Bob", 2)],
            0,
            &store,
        ));
        let tx1 = Arc::new(Transaction::signed(
            TxId(1),
            vec![OpSpec::decrement("Bob", 1), OpSpec::increment("Carol", 1)],
            0,
            &store,
        ));
        let mut exec = Execution::new(store, 2, OrderingMode::Orthrus);
        let mut plogs = vec![PartialLog::default(), PartialLog::default()];
        let glog = GlobalLog::default();
        let mut out = Vec::new();

        // Bob's payment depends on instance 0 block 0 via its state.
        plogs[1]
            .insert(block(1, 0, 2, vec![Some(0), None], vec![Arc::clone(&tx1)]))
            .unwrap();
        exec.drain(&plogs, &glog, &part, 1, &mut out).unwrap();
        assert!(exec.record(tx1.id).is_none());
        assert!(exec.first_pending_plog(&plogs, 1).is_none());

        plogs[0]
            .insert(block(0, 0, 1, vec![None, None], vec![Arc::clone(&tx0)]))
            .unwrap();
        exec.drain(&plogs, &glog, &part, 2, &mut out).unwrap();
        assert_eq!(exec.record(tx1.id).unwrap().status, ConfirmationStatus::ConfirmedSuccess);
        assert_eq!(exec.store.value(&"Bob".into()), Some(1));
        assert_eq!(exec.store.value(&"Carol".into()), Some(1));
    }

    #[test]
    fn insufficient_payer_aborts_atomically() {
        let store = genesis();
        let part = Partitioner::with_overrides(
            2,
            [(ObjectKey::new("Alice"), 0usize), (ObjectKey::new("Bob"), 1usize)]
                .into_iter()
                .collect(),
        );
        // Alice can pay 1, Bob cannot pay 5.
        let tx = Arc::new(Transaction::signed(
            TxId(0),
            vec![
                OpSpec::decrement("Alice", 1),
                OpSpec::decrement("Bob", 5),
                OpSpec::increment("Carol", 6),
            ],
            0,
            &store,
        ));
        let mut exec = Execution::new(store, 2, OrderingMode::Orthrus);
        let mut plogs = vec![PartialLog::default(), PartialLog::default()];
        let glog = GlobalLog::default();
        let mut out = Vec::new();

        plogs[0].insert(block(0, 0, 1, vec![None, None], vec![Arc::clone(&tx)])).unwrap();
        exec.drain(&plogs, &glog, &part, 1, &mut out).unwrap();
        assert_eq!(exec.store.value(&"Alice".into()), Some(3));
        assert_eq!(exec.record(tx.id).unwrap().status, ConfirmationStatus::Pending);

        plogs[1].insert(block(1, 0, 2, vec![Some(0), None], vec![Arc::clone(&tx)])).unwrap();
        exec.drain(&plogs, &glog, &part, 2, &mut out).unwrap();
        // Bob's escrow failed: everything refunded, abort recorded.
        assert_eq!(exec.record(tx.id).unwrap().status, ConfirmationStatus::ConfirmedAbort);
        assert_eq!(exec.store.value(&"Alice".into()), Some(4));
        assert_eq!(exec.store.value(&"Bob".into()), Some(0));
        assert_eq!(exec.store.value(&"Carol".into()), Some(0));
        assert!(exec.elog.is_empty());
        // Abort is idempotent.
        exec.abort_tx(&tx, 3, &mut out).unwrap();
        assert_eq!(out.iter().filter(|o| o.tx.id == tx.id).count(), 1);
    }

    #[test]
    fn failed_contract_leaves_shared_untouched() {
        let mut store = genesis();
        store.insert(Object::shared("vault", 1));
        let part = Partitioner::new(1);
        // Contract tries to drain 5 from a vault holding 1.
        let tx = Arc::new(Transaction::signed(
            TxId(0),
            vec![
                OpSpec::decrement("Alice", 1),
                OpSpec::decrement("vault", 5),
                OpSpec::assign("pot", 9),
            ],
            0,
            &store,
        ));
        let mut exec = Execution::new(store, 1, OrderingMode::Orthrus);
        let mut plogs = vec![PartialLog::default()];
        let mut glog = GlobalLog::default();
        let mut ordering = OrderingState::new(1);
        let mut out = Vec::new();

        let b = block(0, 0, 1, vec![None], vec![Arc::clone(&tx)]);
        plogs[0].insert(Arc::clone(&b)).unwrap();
        ordering.global_order(b, &mut glog).unwrap();
        // Flush the bar.
        let b2 = block(0, 1, 2, vec![Some(0)], vec![]);
        plogs[0].insert(Arc::clone(&b2)).unwrap();
        ordering.global_order(b2, &mut glog).unwrap();
        exec.drain(&plogs, &glog, &part, 5, &mut out).unwrap();

        assert_eq!(exec.record(tx.id).unwrap().status, ConfirmationStatus::ConfirmedAbort);
        assert_eq!(exec.store.value(&"Alice".into()), Some(4));
        assert_eq!(exec.store.value(&"vault".into()), Some(1));
        assert_eq!(exec.store.value(&"pot".into()), Some(0));
    }

    /// A payment sharing a payer with an earlier-delivered contract that
    /// has not reached its global position confirms immediately against the
    /// escrow-adjusted balance instead of blocking behind the contract.
    #[test]
    fn payment_does_not_block_behind_pending_contract() {
        let store = genesis();
        let part = Partitioner::new(1);
        let contract = Arc::new(Transaction::signed(
            TxId(0),
            vec![OpSpec::decrement("Alice", 1), OpSpec::assign("pot", 5)],
            0,
            &store,
        ));
        let payment = Arc::new(Transaction::signed(
            TxId(1),
            vec![OpSpec::decrement("Alice", 2), OpSpec::increment("Bob", 2)],
            0,
            &store,
        ));
        assert_eq!(contract.kind, TxKind::Contract);
        let mut exec = Execution::new(store, 1, OrderingMode::Orthrus);
        let mut plogs = vec![PartialLog::default()];
        let mut glog = GlobalLog::default();
        let mut ordering = OrderingState::new(1);
        let mut out = Vec::new();

        let b0 = block(0, 0, 1, vec![None], vec![Arc::clone(&contract)]);
        let b1 = block(0, 1, 2, vec![Some(0)], vec![Arc::clone(&payment)]);
        plogs[0].insert(Arc::clone(&b0)).unwrap();
        plogs[0].insert(Arc::clone(&b1)).unwrap();
        // Neither block is globally confirmed yet; the payment still
        // commits on the partial path with the contract's escrow held.
        exec.drain(&plogs, &glog, &part, 1, &mut out).unwrap();
        assert_eq!(exec.record(payment.id).unwrap().status, ConfirmationStatus::ConfirmedSuccess);
        assert_eq!(exec.record(contract.id).unwrap().status, ConfirmationStatus::Pending);
        assert_eq!(exec.store.value(&"Alice".into()), Some(1));
        assert_eq!(exec.store.value(&"Bob".into()), Some(2));
        assert!(exec.elog.contains(&"Alice".into(), contract.id));

        // Once the global order flushes past the contract, it executes too.
        ordering.global_order(b0, &mut glog).unwrap();
        ordering.global_order(b1, &mut glog).unwrap();
        let b2 = block(0, 2, 3, vec![Some(1)], vec![]);
        plogs[0].insert(Arc::clone(&b2)).unwrap();
        ordering.global_order(b2, &mut glog).unwrap();
        exec.drain(&plogs, &glog, &part, 2, &mut out).unwrap();
        assert_eq!(exec.record(contract.id).unwrap().status, ConfirmationStatus::ConfirmedSuccess);
        assert_eq!(exec.store.value(&"pot".into()), Some(5));
        assert!(exec.elog.is_empty());
    }

    #[test]
    fn global_all_defers_payment_confirmation() {
        let store = genesis();
        let part = Partitioner::new(1);
        let tx = Arc::new(Transaction::signed(
            TxId(0),
            vec![OpSpec::decrement("Alice", 2), OpSpec::increment("Bob", 2)],
            0,
            &store,
        ));
        let mut exec = Execution::new(store, 1, OrderingMode::GlobalAll);
        let mut plogs = vec![PartialLog::default()];
        let mut glog = GlobalLog::default();
        let mut ordering = OrderingState::new(1);
        let mut out = Vec::new();

        let b = block(0, 0, 1, vec![None], vec![Arc::clone(&tx)]);
        plogs[0].insert(Arc::clone(&b)).unwrap();
        // Delivered but not globally confirmed: escrow holds, no commit.
        exec.drain(&plogs, &glog, &part, 1, &mut out).unwrap();
        assert_eq!(exec.record(tx.id).unwrap().status, ConfirmationStatus::Pending);
        assert_eq!(exec.store.value(&"Bob".into()), Some(0));

        ordering.global_order(b, &mut glog).unwrap();
        let b2 = block(0, 1, 2, vec![Some(0)], vec![]);
        plogs[0].insert(Arc::clone(&b2)).unwrap();
        ordering.global_order(b2, &mut glog).unwrap();
        exec.drain(&plogs, &glog, &part, 2, &mut out).unwrap();
        assert_eq!(exec.record(tx.id).unwrap().status, ConfirmationStatus::ConfirmedSuccess);
        assert_eq!(out[0].path, ExecPath::Global);
        assert_eq!(exec.store.value(&"Bob".into()), Some(2));
    }
}
