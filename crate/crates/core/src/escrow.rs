//! Tentative decremental reservations with commit/abort.
//!
//! Escrowing applies a decrement to the object immediately and records an
//! undo entry keyed by (object, transaction). Committing makes the deduction
//! permanent by dropping the entries; aborting undoes every deduction. Only
//! owned decremental operations are ever escrowed.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::domain::{apply, undo, Amount, ObjectKey, ObjectTypes, OpSpec, Transaction, TxId};
use crate::execution::ObjectStore;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EscrowViolation {
    #[error("commit of {tx:?} with missing escrow entry for {key:?}")]
    CommitMissingEntry { tx: TxId, key: ObjectKey },
    #[error("escrow target {key:?} does not exist")]
    UnknownObject { key: ObjectKey },
    #[error("escrow arithmetic failed for {key:?}: {detail}")]
    Arithmetic { key: ObjectKey, detail: String },
}

/// One tentative reservation: the decremental operation currently applied to
/// the object, plus the value observed before it ran (kept for diagnostics;
/// undo uses the exact operation inverse so interleavings stay correct).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EscrowEntry {
    pub object: ObjectKey,
    pub tx: TxId,
    pub op: OpSpec,
    pub prior_value: Amount,
}

/// Per-replica log of tentative reservations, indexed by (object, tx) and by
/// tx. Also remembers the outcome of every attempt so re-delivery cannot
/// double-reserve.
#[derive(Debug, Default)]
pub struct EscrowLog {
    entries: BTreeMap<(ObjectKey, TxId), EscrowEntry>,
    by_tx: BTreeMap<TxId, BTreeSet<ObjectKey>>,
    outcomes: BTreeMap<(ObjectKey, TxId), bool>,
    pending_total: i128,
}

impl EscrowLog {
    pub fn contains(&self, key: &ObjectKey, tx: TxId) -> bool {
        self.entries.contains_key(&(key.clone(), tx))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sum of escrowed (not yet committed or aborted) decrement amounts.
    /// `owned total + pending_total` is invariant across escrow operations.
    pub fn pending_total(&self) -> i128 {
        self.pending_total
    }

    /// Attempt the escrow of one decremental operation of `tx` against the
    /// store. Returns whether the reservation holds. Re-attempting a decided
    /// (object, tx) pair returns the prior outcome without touching state.
    pub fn escrow(
        &mut self,
        store: &mut ObjectStore,
        tx: &Transaction,
        op: &OpSpec,
    ) -> Result<bool, EscrowViolation> {
        debug_assert!(op.is_decrement());
        let slot = (op.target.clone(), tx.id);
        if let Some(outcome) = self.outcomes.get(&slot) {
            return Ok(*outcome);
        }
        let object = store
            .get(&op.target)
            .ok_or_else(|| EscrowViolation::UnknownObject { key: op.target.clone() })?;
        let prior_value = object.value;
        let con = object.con;
        let applied = apply(prior_value, op).map_err(|e| EscrowViolation::Arithmetic {
            key: op.target.clone(),
            detail: e.to_string(),
        })?;
        let ok = applied >= con;
        if ok {
            store.set_value(&op.target, applied);
            self.entries.insert(
                slot.clone(),
                EscrowEntry { object: op.target.clone(), tx: tx.id, op: op.clone(), prior_value },
            );
            self.by_tx.entry(tx.id).or_default().insert(op.target.clone());
            self.pending_total += i128::from(op.amount);
        }
        self.outcomes.insert(slot, ok);
        Ok(ok)
    }

    /// True unless some owned decremental operation of `tx` lacks an entry.
    /// Vacuously true for transactions without owned decrements.
    pub fn all_escrowed(&self, tx: &Transaction, types: &impl ObjectTypes) -> bool {
        tx.payer_ops(types).all(|op| self.contains(&op.target, tx.id))
    }

    /// Make the reservations of `tx` permanent. The deductions are already
    /// reflected in object values; this drops the undo entries.
    pub fn commit(
        &mut self,
        tx: &Transaction,
        types: &impl ObjectTypes,
    ) -> Result<(), EscrowViolation> {
        for op in tx.payer_ops(types) {
            if !self.contains(&op.target, tx.id) {
                return Err(EscrowViolation::CommitMissingEntry {
                    tx: tx.id,
                    key: op.target.clone(),
                });
            }
        }
        if let Some(keys) = self.by_tx.remove(&tx.id) {
            for key in keys {
                if let Some(entry) = self.entries.remove(&(key, tx.id)) {
                    self.pending_total -= i128::from(entry.op.amount);
                }
            }
        }
        Ok(())
    }

    /// Undo and drop every reservation of `tx`. No entries is a no-op.
    pub fn abort(&mut self, store: &mut ObjectStore, tx_id: TxId) -> Result<(), EscrowViolation> {
        let Some(keys) = self.by_tx.remove(&tx_id) else {
            return Ok(());
        };
        for key in keys {
            let entry = self.entries.remove(&(key.clone(), tx_id)).expect("indexed entry");
            let value = store.value(&key).ok_or(EscrowViolation::UnknownObject { key: key.clone() })?;
            let restored = undo(value, &entry.op).map_err(|e| EscrowViolation::Arithmetic {
                key: key.clone(),
                detail: e.to_string(),
            })?;
            store.set_value(&key, restored);
            self.pending_total -= i128::from(entry.op.amount);
        }
        Ok(())
    }

    /// Drop the outcome memory of decided transactions (garbage collection);
    /// live entries are never pruned.
    pub fn gc_outcomes(&mut self, decided: &BTreeSet<TxId>) {
        self.outcomes.retain(|(_, tx), _| !decided.contains(tx));
    }

    pub fn outcome_len(&self) -> usize {
        self.outcomes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Object, OpSpec, Transaction, TxId};
    use crate::execution::ObjectStore;

    fn store() -> ObjectStore {
        let mut s = ObjectStore::default();
        s.insert(Object::owned("alice", 4));
        s.insert(Object::owned("bob", 1));
        s.insert(Object::owned("carol", 0));
        s
    }

    fn transfer(id: u64, payer: &str, amount: Amount, payee: &str, store: &ObjectStore) -> Transaction {
        Transaction::signed(
            TxId(id),
            vec![OpSpec::decrement(payer, amount), OpSpec::increment(payee, amount)],
            0,
            store,
        )
    }

    #[test]
    fn escrow_reserves_and_updates_value() {
        let mut store = store();
        let mut elog = EscrowLog::default();
        let tx = transfer(0, "alice", 2, "bob", &store);
        assert!(elog.escrow(&mut store, &tx, &tx.ops[0]).unwrap());
        assert_eq!(store.value(&"alice".into()), Some(2));
        assert!(elog.contains(&"alice".into(), tx.id));
        assert_eq!(elog.pending_total(), 2);
    }

    #[test]
    fn escrow_fails_below_condition() {
        let mut store = store();
        let mut elog = EscrowLog::default();
        let tx = transfer(1, "bob", 2, "alice", &store);
        assert!(!elog.escrow(&mut store, &tx, &tx.ops[0]).unwrap());
        assert_eq!(store.value(&"bob".into()), Some(1));
        assert!(elog.is_empty());
    }

    #[test]
    fn sequential_escrows_drain_to_condition() {
        // Alice at 4: escrow 2, then 1, then 1 all succeed, value 0.
        let mut store = store();
        let mut elog = EscrowLog::default();
        for (id, amount) in [(0, 2), (1, 1), (2, 1)] {
            let tx = transfer(id, "alice", amount, "bob", &store);
            assert!(elog.escrow(&mut store, &tx, &tx.ops[0]).unwrap());
        }
        assert_eq!(store.value(&"alice".into()), Some(0));
        let tx = transfer(3, "alice", 1, "bob", &store);
        assert!(!elog.escrow(&mut store, &tx, &tx.ops[0]).unwrap());
    }

    #[test]
    fn escrow_is_idempotent_per_object_tx() {
        let mut store = store();
        let mut elog = EscrowLog::default();
        let tx = transfer(0, "alice", 3, "bob", &store);
        assert!(elog.escrow(&mut store, &tx, &tx.ops[0]).unwrap());
        // Re-delivery retries the same escrow: prior outcome, no double charge.
        assert!(elog.escrow(&mut store, &tx, &tx.ops[0]).unwrap());
        assert_eq!(store.value(&"alice".into()), Some(1));
        // Failed attempts are also remembered.
        let tx2 = transfer(1, "alice", 2, "bob", &store);
        assert!(!elog.escrow(&mut store, &tx2, &tx2.ops[0]).unwrap());
        assert!(!elog.escrow(&mut store, &tx2, &tx2.ops[0]).unwrap());
    }

    #[test]
    fn all_escrowed_tracks_multi_payer() {
        let mut store = store();
        let mut elog = EscrowLog::default();
        let tx = Transaction::signed(
            TxId(0),
            vec![
                OpSpec::decrement("alice", 1),
                OpSpec::decrement("bob", 1),
                OpSpec::increment("carol", 2),
            ],
            0,
            &store,
        );
        assert!(!elog.all_escrowed(&tx, &store));
        elog.escrow(&mut store, &tx, &tx.ops[0]).unwrap();
        assert!(!elog.all_escrowed(&tx, &store));
        elog.escrow(&mut store, &tx, &tx.ops[1]).unwrap();
        assert!(elog.all_escrowed(&tx, &store));
        // Vacuous case: no owned decrements in range.
        let vacuous = Transaction::with_sigs(TxId(9), vec![OpSpec::increment("carol", 1)], BTreeMap::new(), 0, &store);
        assert!(elog.all_escrowed(&vacuous, &store));
    }

    #[test]
    fn commit_finalizes_and_abort_refunds() {
        let mut store = store();
        let mut elog = EscrowLog::default();
        let tx = transfer(0, "alice", 2, "bob", &store);
        elog.escrow(&mut store, &tx, &tx.ops[0]).unwrap();
        elog.commit(&tx, &store).unwrap();
        assert_eq!(store.value(&"alice".into()), Some(2));
        assert!(elog.is_empty());
        // Abort after commit finds no entries and changes nothing.
        elog.abort(&mut store, tx.id).unwrap();
        assert_eq!(store.value(&"alice".into()), Some(2));

        let tx2 = transfer(1, "alice", 1, "bob", &store);
        elog.escrow(&mut store, &tx2, &tx2.ops[0]).unwrap();
        assert_eq!(store.value(&"alice".into()), Some(1));
        elog.abort(&mut store, tx2.id).unwrap();
        assert_eq!(store.value(&"alice".into()), Some(2));
        assert_eq!(elog.pending_total(), 0);
    }

    #[test]
    fn commit_without_entries_is_fatal() {
        let store = store();
        let mut elog = EscrowLog::default();
        let tx = transfer(0, "alice", 2, "bob", &store);
        let err = elog.commit(&tx, &store).unwrap_err();
        assert!(matches!(err, EscrowViolation::CommitMissingEntry { .. }));
    }

    proptest::proptest! {
        /// Random escrow/commit/abort interleavings against a flat ledger
        /// oracle: the object ends at initial minus exactly the committed
        /// decrements.
        #[test]
        fn interleavings_match_ledger_oracle(plan in proptest::collection::vec((1i64..4, 0u8..3), 1..40)) {
            let mut store = ObjectStore::default();
            store.insert(Object::owned("payer", 60));
            let mut elog = EscrowLog::default();
            let mut committed: i64 = 0;
            let mut open: Vec<(Transaction, i64)> = Vec::new();
            for (i, (amount, action)) in plan.iter().enumerate() {
                match action {
                    0 => {
                        let tx = Transaction::signed(
                            TxId(i as u64),
                            vec![OpSpec::decrement("payer", *amount), OpSpec::increment("payer2", *amount)],
                            0,
                            &store,
                        );
                        if elog.escrow(&mut store, &tx, &tx.ops[0]).unwrap() {
                            open.push((tx, *amount));
                        }
                    }
                    1 => {
                        if let Some((tx, amount)) = open.pop() {
                            elog.commit(&tx, &store).unwrap();
                            committed += amount;
                        }
                    }
                    _ => {
                        if let Some((tx, _)) = open.pop() {
                            elog.abort(&mut store, tx.id).unwrap();
                        }
                    }
                }
            }
            for (tx, _) in open.drain(..) {
                elog.abort(&mut store, tx.id).unwrap();
            }
            proptest::prop_assert_eq!(store.value(&"payer".into()), Some(60 - committed));
            proptest::prop_assert!(elog.is_empty());
        }
    }

    #[test]
    fn multi_payer_abort_restores_both() {
        let mut store = store();
        let mut elog = EscrowLog::default();
        let tx = Transaction::signed(
            TxId(0),
            vec![
                OpSpec::decrement("alice", 1),
                OpSpec::decrement("bob", 2),
                OpSpec::increment("carol", 3),
            ],
            0,
            &store,
        );
        assert!(elog.escrow(&mut store, &tx, &tx.ops[0]).unwrap());
        assert!(!elog.escrow(&mut store, &tx, &tx.ops[1]).unwrap());
        elog.abort(&mut store, tx.id).unwrap();
        assert_eq!(store.value(&"alice".into()), Some(4));
        assert_eq!(store.value(&"bob".into()), Some(1));
        assert_eq!(store.value(&"carol".into()), Some(0));
    }
}
