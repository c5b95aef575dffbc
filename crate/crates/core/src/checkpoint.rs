//! Epoch-end checkpointing and garbage collection.
//!
//! An epoch covers a fixed range of sequence numbers per instance. Once a
//! replica has delivered every block of an epoch and every transaction in
//! those blocks is decided, it broadcasts a signed digest of the epoch's
//! history. 2f+1 matching digests form a stable checkpoint, after which the
//! epoch's protocol state can be discarded.

use std::collections::{BTreeMap, BTreeSet};

use crate::domain::{Digest, DigestWriter, ReplicaId, SeqNum, TxId};
use crate::execution::ConfirmationStatus;

/// Epoch index.
pub type Epoch = u64;

pub fn epoch_of(sn: SeqNum, epoch_len: u64) -> Epoch {
    sn / epoch_len
}

pub fn epoch_last_sn(epoch: Epoch, epoch_len: u64) -> SeqNum {
    (epoch + 1) * epoch_len - 1
}

/// Signed per-epoch summary broadcast by each replica. The envelope carries
/// the signer; honest replicas with the same history produce the same
/// digest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMsg {
    pub epoch: Epoch,
    pub digest: Digest,
    pub signer: ReplicaId,
}

/// 2f+1 matching checkpoint messages for one epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StableCheckpoint {
    pub epoch: Epoch,
    pub digest: Digest,
    pub signers: BTreeSet<ReplicaId>,
}

/// Canonical digest of one epoch: the delivered block digests of every
/// instance over the epoch's sequence range, plus the confirmation status of
/// every transaction those blocks carried. Identical histories yield
/// identical digests; any execution divergence shows up in the status set.
pub fn epoch_digest(
    epoch: Epoch,
    block_digests: impl IntoIterator<Item = (usize, SeqNum, Digest)>,
    statuses: impl IntoIterator<Item = (TxId, ConfirmationStatus)>,
) -> Digest {
    let mut w = DigestWriter::new();
    w.u64(epoch);
    for (ins, sn, digest) in block_digests {
        w.u64(ins as u64).u64(sn).u64(digest.0);
    }
    for (tx, status) in statuses {
        w.u64(tx.0).u64(match status {
            ConfirmationStatus::Pending => 0,
            ConfirmationStatus::ConfirmedSuccess => 1,
            ConfirmationStatus::ConfirmedAbort => 2,
        });
    }
    w.finish()
}

/// Collects checkpoint messages into stable checkpoints.
#[derive(Debug, Default)]
pub struct CheckpointCollector {
    votes: BTreeMap<Epoch, BTreeMap<Digest, BTreeSet<ReplicaId>>>,
    stable: BTreeMap<Epoch, StableCheckpoint>,
}

impl CheckpointCollector {
    /// Record one message; returns the stable checkpoint the moment the
    /// quorum is reached (exactly once per epoch).
    pub fn record(&mut self, msg: CheckpointMsg, quorum: usize) -> Option<StableCheckpoint> {
        if self.stable.contains_key(&msg.epoch) {
            return None;
        }
        let signers = self
            .votes
            .entry(msg.epoch)
            .or_default()
            .entry(msg.digest)
            .or_default();
        signers.insert(msg.signer);
        if signers.len() >= quorum {
            let stable = StableCheckpoint {
                epoch: msg.epoch,
                digest: msg.digest,
                signers: signers.clone(),
            };
            self.stable.insert(msg.epoch, stable.clone());
            self.votes.remove(&msg.epoch);
            return Some(stable);
        }
        None
    }

    pub fn stable(&self, epoch: Epoch) -> Option<&StableCheckpoint> {
        self.stable.get(&epoch)
    }

    pub fn latest_stable(&self) -> Option<&StableCheckpoint> {
        self.stable.values().next_back()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_math() {
        assert_eq!(epoch_of(0, 16), 0);
        assert_eq!(epoch_of(15, 16), 0);
        assert_eq!(epoch_of(16, 16), 1);
        assert_eq!(epoch_last_sn(0, 16), 15);
        assert_eq!(epoch_last_sn(2, 16), 47);
    }

    #[test]
    fn quorum_of_matching_digests_is_stable() {
        let mut c = CheckpointCollector::default();
        let msg = |signer, digest| CheckpointMsg { epoch: 0, digest: Digest(digest), signer };
        assert!(c.record(msg(0, 7), 3).is_none());
        assert!(c.record(msg(1, 7), 3).is_none());
        // A mismatching digest does not count toward the quorum.
        assert!(c.record(msg(2, 9), 3).is_none());
        let stable = c.record(msg(3, 7), 3).expect("stable at 3 matching");
        assert_eq!(stable.signers.len(), 3);
        assert_eq!(stable.digest, Digest(7));
        // Late duplicates change nothing.
        assert!(c.record(msg(2, 7), 3).is_none());
        assert_eq!(c.stable(0).unwrap().digest, Digest(7));
    }

    #[test]
    fn two_matching_messages_are_not_stable() {
        let mut c = CheckpointCollector::default();
        let msg = |signer| CheckpointMsg { epoch: 1, digest: Digest(4), signer };
        assert!(c.record(msg(0), 3).is_none());
        assert!(c.record(msg(1), 3).is_none());
        assert!(c.stable(1).is_none());
    }

    #[test]
    fn digest_is_history_determined() {
        let blocks = vec![(0usize, 0u64, Digest(11)), (1, 0, Digest(12))];
        let statuses = vec![(TxId(0), ConfirmationStatus::ConfirmedSuccess)];
        let a = epoch_digest(0, blocks.clone(), statuses.clone());
        let b = epoch_digest(0, blocks.clone(), statuses);
        assert_eq!(a, b);
        let differing = vec![(TxId(0), ConfirmationStatus::ConfirmedAbort)];
        assert_ne!(a, epoch_digest(0, blocks, differing));
    }
}
