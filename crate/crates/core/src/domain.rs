//! Core value types shared by every protocol module: objects, operations,
//! transactions, blocks, system states, and the simulated signature scheme.
//!
//! All types here are immutable values; protocol state lives in the replica
//! modules. Content digests use FNV-1a 64 over a canonical field ordering
//! (see [`DigestWriter`]) so traces are reproducible across runs and
//! platforms.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Token amount in minimal units. All balances are exact 64-bit integers.
pub type Amount = i64;

/// Simulated time in nanoseconds.
pub type TimeNs = u64;

/// Replica index in `[0, n)`.
pub type ReplicaId = usize;

/// Consensus instance index in `[0, m)`.
pub type InstanceId = usize;

/// Sequence number of a block within one instance.
pub type SeqNum = u64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DomainError {
    #[error("read operations cannot be applied to a value")]
    ApplyRead,
    #[error("assign operations cannot be undone")]
    UndoAssign,
    #[error("arithmetic overflow applying {op:?} to {value}")]
    Overflow { value: Amount, op: OpKind },
    #[error("system state length mismatch: {left} vs {right}")]
    StateLenMismatch { left: usize, right: usize },
}

// ---------------------------------------------------------------------------
// Content digests
// ---------------------------------------------------------------------------

/// 64-bit content digest (FNV-1a over canonical little-endian encoding).
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Digest(pub u64);

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "d{:016x}", self.0)
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Incremental FNV-1a 64 writer. Fields are fed in declaration order;
/// variable-length data is length-prefixed so encodings cannot collide by
/// concatenation.
#[derive(Clone)]
pub struct DigestWriter(u64);

impl DigestWriter {
    pub fn new() -> Self {
        DigestWriter(FNV_OFFSET)
    }

    pub fn bytes(&mut self, data: &[u8]) -> &mut Self {
        self.u64(data.len() as u64);
        for b in data {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        for b in v.to_le_bytes() {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
        self
    }

    pub fn i64(&mut self, v: i64) -> &mut Self {
        self.u64(v as u64)
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.bytes(s.as_bytes())
    }

    pub fn finish(&self) -> Digest {
        Digest(self.0)
    }
}

impl Default for DigestWriter {
    fn default() -> Self {
        Self::new()
    }
}

// ---------------------------------------------------------------------------
// Objects and operations
// ---------------------------------------------------------------------------

/// Opaque object key. Owned objects use the owner's account key.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ObjectKey(pub Arc<str>);

impl ObjectKey {
    pub fn new(s: impl Into<String>) -> Self {
        ObjectKey(Arc::from(s.into().as_str()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for ObjectKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.as_str())
    }
}

impl fmt::Display for ObjectKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl From<&str> for ObjectKey {
    fn from(s: &str) -> Self {
        ObjectKey::new(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectType {
    Owned,
    Shared,
}

/// An account or shared record. `con` is the lower bound the value must
/// satisfy after any operation (0 for accounts: no overdraft).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Object {
    pub key: ObjectKey,
    pub value: Amount,
    pub con: Amount,
    pub kind: ObjectType,
}

impl Object {
    pub fn owned(key: impl Into<ObjectKey>, value: Amount) -> Self {
        Object { key: key.into(), value, con: 0, kind: ObjectType::Owned }
    }

    pub fn shared(key: impl Into<ObjectKey>, value: Amount) -> Self {
        Object { key: key.into(), value, con: 0, kind: ObjectType::Shared }
    }
}

/// Lookup of an object's type, used by validation. Implemented by the
/// object store and by plain maps in tests.
pub trait ObjectTypes {
    fn object_type(&self, key: &ObjectKey) -> Option<ObjectType>;
}

impl ObjectTypes for BTreeMap<ObjectKey, ObjectType> {
    fn object_type(&self, key: &ObjectKey) -> Option<ObjectType> {
        self.get(key).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Increment,
    Decrement,
    Assign,
    Read,
}

/// One operation of a transaction: target object plus what to do to it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpSpec {
    pub target: ObjectKey,
    pub kind: OpKind,
    /// Amount for increment/decrement, new value for assign, ignored for read.
    pub amount: Amount,
}

impl OpSpec {
    pub fn increment(target: impl Into<ObjectKey>, amount: Amount) -> Self {
        OpSpec { target: target.into(), kind: OpKind::Increment, amount }
    }

    pub fn decrement(target: impl Into<ObjectKey>, amount: Amount) -> Self {
        OpSpec { target: target.into(), kind: OpKind::Decrement, amount }
    }

    pub fn assign(target: impl Into<ObjectKey>, value: Amount) -> Self {
        OpSpec { target: target.into(), kind: OpKind::Assign, amount: value }
    }

    pub fn read(target: impl Into<ObjectKey>) -> Self {
        OpSpec { target: target.into(), kind: OpKind::Read, amount: 0 }
    }

    pub fn is_decrement(&self) -> bool {
        self.kind == OpKind::Decrement
    }

    fn feed(&self, w: &mut DigestWriter) {
        w.str(self.target.as_str());
        w.u64(match self.kind {
            OpKind::Increment => 0,
            OpKind::Decrement => 1,
            OpKind::Assign => 2,
            OpKind::Read => 3,
        });
        w.i64(self.amount);
    }
}

/// Apply an operation to a raw value. Reads are evaluated elsewhere and are
/// rejected here.
pub fn apply(value: Amount, op: &OpSpec) -> Result<Amount, DomainError> {
    match op.kind {
        OpKind::Increment => value
            .checked_add(op.amount)
            .ok_or(DomainError::Overflow { value, op: op.kind }),
        OpKind::Decrement => value
            .checked_sub(op.amount)
            .ok_or(DomainError::Overflow { value, op: op.kind }),
        OpKind::Assign => Ok(op.amount),
        OpKind::Read => Err(DomainError::ApplyRead),
    }
}

/// Exact inverse of [`apply`] for increment/decrement. Assigns are never
/// escrowed, so undoing one is a contract violation.
pub fn undo(value: Amount, op: &OpSpec) -> Result<Amount, DomainError> {
    match op.kind {
        OpKind::Increment => value
            .checked_sub(op.amount)
            .ok_or(DomainError::Overflow { value, op: op.kind }),
        OpKind::Decrement => value
            .checked_add(op.amount)
            .ok_or(DomainError::Overflow { value, op: op.kind }),
        OpKind::Assign => Err(DomainError::UndoAssign),
        OpKind::Read => Err(DomainError::ApplyRead),
    }
}

// ---------------------------------------------------------------------------
// Signatures (simulated)
// ---------------------------------------------------------------------------

/// Identity of a signer in the simulated signature scheme.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum SignerId {
    Client(ObjectKey),
    Replica(ReplicaId),
}

/// Simulated signature: the signer identity plus a digest of the signed
/// content. Verification recomputes the digest and checks the signer; honest
/// code only produces signatures over content it emits, so forgery does not
/// exist inside the simulation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Signature {
    pub signer: SignerId,
    pub payload_digest: Digest,
}

impl Signature {
    pub fn sign(signer: SignerId, payload_digest: Digest) -> Self {
        Signature { signer, payload_digest }
    }

    pub fn verify(&self, expected_signer: &SignerId, payload_digest: Digest) -> bool {
        self.signer == *expected_signer && self.payload_digest == payload_digest
    }
}

// ---------------------------------------------------------------------------
// Transactions
// ---------------------------------------------------------------------------

/// Globally unique transaction identifier.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TxId(pub u64);

impl fmt::Debug for TxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tx{}", self.0)
    }
}

impl fmt::Display for TxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxKind {
    Payment,
    Contract,
}

/// A transaction: an ordered list of object operations, authorization
/// signatures for owned decrements, and a submission timestamp. The kind is
/// derived from the operations at construction and never changes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transaction {
    pub id: TxId,
    pub ops: Vec<OpSpec>,
    pub sigs: BTreeMap<ObjectKey, Signature>,
    pub kind: TxKind,
    pub submit_time: TimeNs,
}

impl Transaction {
    /// Build a transaction with correct owner signatures for every owned
    /// decremental operation. The kind is derived from `ops` and `types`.
    pub fn signed(
        id: TxId,
        ops: Vec<OpSpec>,
        submit_time: TimeNs,
        types: &impl ObjectTypes,
    ) -> Self {
        let kind = derive_kind(&ops, types);
        let digest = signing_digest(id, &ops);
        let mut sigs = BTreeMap::new();
        for op in &ops {
            if op.is_decrement() && types.object_type(&op.target) == Some(ObjectType::Owned) {
                sigs.insert(
                    op.target.clone(),
                    Signature::sign(SignerId::Client(op.target.clone()), digest),
                );
            }
        }
        Transaction { id, ops, sigs, kind, submit_time }
    }

    /// Build a transaction with an arbitrary signature set (tests use this to
    /// model forged or missing authorization).
    pub fn with_sigs(
        id: TxId,
        ops: Vec<OpSpec>,
        sigs: BTreeMap<ObjectKey, Signature>,
        submit_time: TimeNs,
        types: &impl ObjectTypes,
    ) -> Self {
        let kind = derive_kind(&ops, types);
        Transaction { id, ops, sigs, kind, submit_time }
    }

    /// Digest clients sign: the id plus the full operation list.
    pub fn signing_digest(&self) -> Digest {
        signing_digest(self.id, &self.ops)
    }

    /// Owned decremental operations, i.e. the payer side of the transaction.
    pub fn payer_ops<'a>(
        &'a self,
        types: &'a impl ObjectTypes,
    ) -> impl Iterator<Item = &'a OpSpec> + 'a {
        self.ops.iter().filter(move |op| {
            op.is_decrement() && types.object_type(&op.target) == Some(ObjectType::Owned)
        })
    }
}

fn derive_kind(ops: &[OpSpec], types: &impl ObjectTypes) -> TxKind {
    let all_owned_transfers = ops.iter().all(|op| {
        matches!(op.kind, OpKind::Increment | OpKind::Decrement)
            && types.object_type(&op.target) == Some(ObjectType::Owned)
    });
    if all_owned_transfers {
        TxKind::Payment
    } else {
        TxKind::Contract
    }
}

fn signing_digest(id: TxId, ops: &[OpSpec]) -> Digest {
    let mut w = DigestWriter::new();
    w.u64(id.0);
    w.u64(ops.len() as u64);
    for op in ops {
        op.feed(&mut w);
    }
    w.finish()
}

/// Format and authorization check for a transaction. Returns false (never
/// panics) on any malformed input:
/// - operations present, at most one per object, amounts strictly positive
///   for increment/decrement, assign/read only on shared objects;
/// - at least one owned decremental operation (the initiating payer);
/// - payments conserve value (decrements and increments sum equal);
/// - every owned decremental operation carries the owner's signature over
///   the transaction's signing digest.
pub fn validate_tx(tx: &Transaction, types: &impl ObjectTypes) -> bool {
    if tx.ops.is_empty() {
        return false;
    }
    let mut seen = BTreeMap::new();
    let mut owned_decrements = 0usize;
    let mut decrement_sum: i128 = 0;
    let mut increment_sum: i128 = 0;
    for op in &tx.ops {
        if seen.insert(op.target.clone(), ()).is_some() {
            return false;
        }
        let Some(ty) = types.object_type(&op.target) else {
            return false;
        };
        match op.kind {
            OpKind::Increment | OpKind::Decrement if op.amount <= 0 => return false,
            OpKind::Assign | OpKind::Read if ty == ObjectType::Owned => return false,
            _ => {}
        }
        if ty == ObjectType::Owned {
            match op.kind {
                OpKind::Increment => increment_sum += i128::from(op.amount),
                OpKind::Decrement => {
                    owned_decrements += 1;
                    decrement_sum += i128::from(op.amount);
                }
                _ => {}
            }
        }
    }
    if owned_decrements == 0 {
        return false;
    }
    if tx.kind == TxKind::Payment && decrement_sum != increment_sum {
        return false;
    }
    let digest = tx.signing_digest();
    for op in tx.payer_ops(types) {
        let Some(sig) = tx.sigs.get(&op.target) else {
            return false;
        };
        if !sig.verify(&SignerId::Client(op.target.clone()), digest) {
            return false;
        }
    }
    true
}

// ---------------------------------------------------------------------------
// System state and blocks
// ---------------------------------------------------------------------------

/// Per-instance maximum delivered sequence numbers; the partial-order clock
/// of the system. `None` means the instance has not delivered anything.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SystemState(pub Vec<Option<SeqNum>>);

impl SystemState {
    pub fn empty(instances: usize) -> Self {
        SystemState(vec![None; instances])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, instance: InstanceId) -> Option<SeqNum> {
        self.0.get(instance).copied().flatten()
    }

    /// Record a delivered sequence number; entries never move backwards.
    pub fn advance(&mut self, instance: InstanceId, sn: SeqNum) {
        let slot = &mut self.0[instance];
        match slot {
            Some(cur) if *cur >= sn => {}
            _ => *slot = Some(sn),
        }
    }

    pub fn feed(&self, w: &mut DigestWriter) {
        w.u64(self.0.len() as u64);
        for entry in &self.0 {
            match entry {
                None => w.u64(u64::MAX),
                Some(sn) => w.u64(*sn),
            };
        }
    }
}

/// Componentwise comparison: does state `a` cover (dominate) state `b`?
/// `None` entries compare lowest. Errors on length mismatch, which is a
/// configuration bug, not a protocol condition.
pub fn state_covers(a: &SystemState, b: &SystemState) -> Result<bool, DomainError> {
    if a.len() != b.len() {
        return Err(DomainError::StateLenMismatch { left: a.len(), right: b.len() });
    }
    Ok(a.0.iter().zip(&b.0).all(|(x, y)| match (x, y) {
        (_, None) => true,
        (None, Some(_)) => false,
        (Some(x), Some(y)) => x >= y,
    }))
}

/// A batch of transactions agreed by one instance at one sequence number.
/// `state` is the system state the proposing leader validated against; the
/// rank orders blocks across instances. `forced` marks transactions the
/// leader included despite a failing escrow projection (after they aged in
/// the bucket); every replica aborts them deterministically instead of
/// letting the outcome depend on processing interleavings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub txs: Vec<Arc<Transaction>>,
    pub ins: InstanceId,
    pub sn: SeqNum,
    pub state: SystemState,
    pub rank: u64,
    pub forced: BTreeSet<TxId>,
    pub sig: Signature,
}

impl Block {
    pub fn digest(&self) -> Digest {
        let mut w = DigestWriter::new();
        w.u64(self.ins as u64);
        w.u64(self.sn);
        w.u64(self.rank);
        self.state.feed(&mut w);
        w.u64(self.txs.len() as u64);
        for tx in &self.txs {
            w.u64(tx.signing_digest().0);
        }
        w.u64(self.forced.len() as u64);
        for id in &self.forced {
            w.u64(id.0);
        }
        w.finish()
    }

    pub fn is_empty(&self) -> bool {
        self.txs.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn types_of(entries: &[(&str, ObjectType)]) -> BTreeMap<ObjectKey, ObjectType> {
        entries
            .iter()
            .map(|(k, t)| (ObjectKey::new(*k), *t))
            .collect()
    }

    fn payment(id: u64, payer: &str, amount: Amount, payee: &str, types: &BTreeMap<ObjectKey, ObjectType>) -> Transaction {
        Transaction::signed(
            TxId(id),
            vec![OpSpec::decrement(payer, amount), OpSpec::increment(payee, amount)],
            0,
            types,
        )
    }

    #[test]
    fn validates_simple_transfer() {
        // Alice pays Bob 2, signed by Alice.
        let types = types_of(&[("alice", ObjectType::Owned), ("bob", ObjectType::Owned)]);
        let tx = payment(0, "alice", 2, "bob", &types);
        assert_eq!(tx.kind, TxKind::Payment);
        assert!(validate_tx(&tx, &types));
    }

    #[test]
    fn rejects_signature_from_wrong_owner() {
        let types = types_of(&[("alice", ObjectType::Owned), ("bob", ObjectType::Owned)]);
        let good = payment(0, "alice", 2, "bob", &types);
        let mut sigs = BTreeMap::new();
        sigs.insert(
            ObjectKey::new("alice"),
            Signature::sign(SignerId::Client(ObjectKey::new("bob")), good.signing_digest()),
        );
        let forged = Transaction::with_sigs(good.id, good.ops.clone(), sigs, 0, &types);
        assert!(!validate_tx(&forged, &types));
    }

    #[test]
    fn rejects_nonconserving_payment() {
        let types = types_of(&[("alice", ObjectType::Owned), ("bob", ObjectType::Owned)]);
        let tx = Transaction::signed(
            TxId(1),
            vec![OpSpec::decrement("alice", 3), OpSpec::increment("bob", 2)],
            0,
            &types,
        );
        assert_eq!(tx.kind, TxKind::Payment);
        assert!(!validate_tx(&tx, &types));
    }

    #[test]
    fn rejects_missing_payer_and_bad_amounts() {
        let types = types_of(&[("alice", ObjectType::Owned), ("s0", ObjectType::Shared)]);
        // No owned decremental anchor.
        let tx = Transaction::signed(TxId(2), vec![OpSpec::increment("alice", 1)], 0, &types);
        assert!(!validate_tx(&tx, &types));
        // Zero amount.
        let tx = Transaction::signed(
            TxId(3),
            vec![OpSpec::decrement("alice", 0), OpSpec::increment("alice", 0)],
            0,
            &types,
        );
        assert!(!validate_tx(&tx, &types));
        // Assign on an owned object.
        let tx = Transaction::signed(
            TxId(4),
            vec![OpSpec::decrement("alice", 1), OpSpec::assign("alice", 7)],
            0,
            &types,
        );
        assert!(!validate_tx(&tx, &types));
    }

    #[test]
    fn contract_classification() {
        let types = types_of(&[("alice", ObjectType::Owned), ("s0", ObjectType::Shared)]);
        let tx = Transaction::signed(
            TxId(5),
            vec![OpSpec::decrement("alice", 1), OpSpec::assign("s0", 7)],
            0,
            &types,
        );
        assert_eq!(tx.kind, TxKind::Contract);
        assert!(validate_tx(&tx, &types));
    }

    #[test]
    fn apply_matches_transfer_examples() {
        assert_eq!(apply(4, &OpSpec::decrement("a", 2)), Ok(2));
        assert_eq!(apply(0, &OpSpec::increment("c", 2)), Ok(2));
        assert_eq!(apply(9, &OpSpec::assign("s", 9)), Ok(9));
        assert_eq!(apply(1, &OpSpec::read("s")), Err(DomainError::ApplyRead));
    }

    #[test]
    fn undo_inverts_apply() {
        assert_eq!(undo(2, &OpSpec::decrement("a", 2)), Ok(4));
        assert_eq!(undo(2, &OpSpec::increment("a", 2)), Ok(0));
        assert_eq!(undo(5, &OpSpec::assign("s", 5)), Err(DomainError::UndoAssign));
    }

    #[test]
    fn state_covers_examples() {
        let a = SystemState(vec![Some(1), Some(0)]);
        let b = SystemState(vec![Some(0), None]);
        assert_eq!(state_covers(&a, &b), Ok(true));
        assert_eq!(state_covers(&a, &a), Ok(true));
        let c = SystemState(vec![Some(0), Some(5)]);
        let d = SystemState(vec![Some(1), Some(0)]);
        assert_eq!(state_covers(&c, &d), Ok(false));
        let short = SystemState::empty(1);
        assert!(state_covers(&a, &short).is_err());
    }

    #[test]
    fn digest_is_stable() {
        // Frozen value: the canonical encoding must never drift, or recorded
        // traces stop being comparable across builds.
        let mut w = DigestWriter::new();
        w.str("alice").u64(7).i64(-3);
        assert_eq!(w.finish(), Digest(0xc87d3822a4dd4565));
    }

    proptest! {
        #[test]
        fn apply_undo_roundtrip(value in -1_000_000i64..1_000_000, amount in 1i64..1_000_000, decrement: bool) {
            let op = if decrement {
                OpSpec::decrement("x", amount)
            } else {
                OpSpec::increment("x", amount)
            };
            let applied = apply(value, &op).unwrap();
            prop_assert_eq!(undo(applied, &op).unwrap(), value);
        }

        #[test]
        fn state_covers_is_partial_order(
            xs in proptest::collection::vec(proptest::option::of(0u64..8), 3),
            ys in proptest::collection::vec(proptest::option::of(0u64..8), 3),
            zs in proptest::collection::vec(proptest::option::of(0u64..8), 3),
        ) {
            let a = SystemState(xs);
            let b = SystemState(ys);
            let c = SystemState(zs);
            prop_assert!(state_covers(&a, &a).unwrap());
            if state_covers(&a, &b).unwrap() && state_covers(&b, &a).unwrap() {
                prop_assert_eq!(&a, &b);
            }
            if state_covers(&a, &b).unwrap() && state_covers(&b, &c).unwrap() {
                prop_assert!(state_covers(&a, &c).unwrap());
            }
        }
    }
}
