//! Sequenced broadcast: per-instance consensus slots, protocol messages,
//! failure evidence, and view-change bookkeeping.
//!
//! Two engines share this state. The ideal engine delivers a validated
//! candidate directly, standing in for a black-box total-order broadcast
//! with configurable latency. The pbft engine runs the usual three phases
//! with 2f+1 quorums and masks equivocation. Both use the same
//! suspicion-quorum view change; the leader of instance `i` in view `v` is
//! replica `(i + v) mod n`.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::domain::{Block, Digest, InstanceId, ReplicaId, SeqNum, TimeNs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SbEngine {
    Ideal,
    Pbft,
}

impl std::fmt::Display for SbEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SbEngine::Ideal => "ideal",
            SbEngine::Pbft => "pbft",
        })
    }
}

/// Locally observed grounds for suspecting an instance leader.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Evidence {
    Timeout,
    Censorship,
    SpoofedState,
    MissingBlock,
}

impl std::fmt::Display for Evidence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Evidence::Timeout => "timeout",
            Evidence::Censorship => "censorship",
            Evidence::SpoofedState => "spoofed_state",
            Evidence::MissingBlock => "missing_block",
        })
    }
}

/// Replica-to-replica protocol messages. The sender is carried by the
/// network envelope.
#[derive(Debug, Clone)]
pub enum Message {
    /// Client transaction forwarded into the partition module.
    Submit { tx: Arc<crate::domain::Transaction> },
    /// Leader asks for the highest observed rank before proposing.
    RankQuery { ins: InstanceId, qid: u64 },
    RankReport { ins: InstanceId, qid: u64, highest: u64 },
    /// Ideal-engine proposal: delivered directly once validated.
    Candidate { ins: InstanceId, view: u64, block: Arc<Block> },
    /// Three-phase engine.
    PrePrepare { ins: InstanceId, view: u64, block: Arc<Block> },
    Prepare { ins: InstanceId, view: u64, sn: SeqNum, digest: Digest },
    Commit { ins: InstanceId, view: u64, sn: SeqNum, digest: Digest },
    /// Failure detection and leader replacement. Censorship suspicions
    /// carry the starved transaction so other replicas can verify and join.
    Suspicion {
        ins: InstanceId,
        view: u64,
        evidence: Evidence,
        tx: Option<Arc<crate::domain::Transaction>>,
    },
    ViewChange {
        ins: InstanceId,
        new_view: u64,
        last_delivered: Option<SeqNum>,
        /// Prepared-but-undelivered blocks with the view they prepared in;
        /// stands in for the full new-view certificate.
        prepared: Vec<(u64, Arc<Block>)>,
    },
    NewView { ins: InstanceId, new_view: u64, start_sn: SeqNum, reproposals: Vec<Arc<Block>> },
    /// Epoch checkpointing.
    Checkpoint { epoch: u64, digest: Digest },
}

impl Message {
    /// Phase tag for the optional message trace.
    pub fn phase(&self) -> &'static str {
        match self {
            Message::Submit { .. } => "submit",
            Message::RankQuery { .. } => "rank_query",
            Message::RankReport { .. } => "rank_report",
            Message::Candidate { .. } => "candidate",
            Message::PrePrepare { .. } => "pre_prepare",
            Message::Prepare { .. } => "prepare",
            Message::Commit { .. } => "commit",
            Message::Suspicion { .. } => "suspicion",
            Message::ViewChange { .. } => "view_change",
            Message::NewView { .. } => "new_view",
            Message::Checkpoint { .. } => "checkpoint",
        }
    }

    pub fn instance(&self) -> Option<InstanceId> {
        match self {
            Message::Submit { .. } | Message::Checkpoint { .. } => None,
            Message::RankQuery { ins, .. }
            | Message::RankReport { ins, .. }
            | Message::Candidate { ins, .. }
            | Message::PrePrepare { ins, .. }
            | Message::Prepare { ins, .. }
            | Message::Commit { ins, .. }
            | Message::Suspicion { ins, .. }
            | Message::ViewChange { ins, .. }
            | Message::NewView { ins, .. } => Some(*ins),
        }
    }

    pub fn sn(&self) -> Option<SeqNum> {
        match self {
            Message::Candidate { block, .. } | Message::PrePrepare { block, .. } => Some(block.sn),
            Message::Prepare { sn, .. } | Message::Commit { sn, .. } => Some(*sn),
            Message::NewView { start_sn, .. } => Some(*start_sn),
            _ => None,
        }
    }

    pub fn digest(&self) -> Option<Digest> {
        match self {
            Message::Candidate { block, .. } | Message::PrePrepare { block, .. } => {
                Some(block.digest())
            }
            Message::Prepare { digest, .. } | Message::Commit { digest, .. } => Some(*digest),
            Message::Checkpoint { digest, .. } => Some(*digest),
            _ => None,
        }
    }
}

pub fn leader_of(ins: InstanceId, view: u64, n: usize) -> ReplicaId {
    ((ins as u64 + view) % n as u64) as ReplicaId
}

/// Consensus state for one sequence number of one instance.
#[derive(Debug, Default)]
pub struct Slot {
    /// View in which a candidate was accepted (first valid one per view
    /// wins, masking equivocation).
    pub accepted_view: Option<u64>,
    pub block: Option<Arc<Block>>,
    /// Candidate waiting for the processed frontier to cover its state.
    pub awaiting_coverage: bool,
    /// Deadline for coverage; expiry is spoofed-state evidence.
    pub coverage_deadline: Option<TimeNs>,
    pub prepares: BTreeMap<Digest, BTreeSet<ReplicaId>>,
    pub commits: BTreeMap<Digest, BTreeSet<ReplicaId>>,
    pub sent_prepare: bool,
    pub sent_commit: bool,
    pub delivered: bool,
}

impl Slot {
    pub fn record_prepare(&mut self, digest: Digest, from: ReplicaId) -> usize {
        let set = self.prepares.entry(digest).or_default();
        set.insert(from);
        set.len()
    }

    pub fn record_commit(&mut self, digest: Digest, from: ReplicaId) -> usize {
        let set = self.commits.entry(digest).or_default();
        set.insert(from);
        set.len()
    }

    pub fn prepare_count(&self, digest: &Digest) -> usize {
        self.prepares.get(digest).map_or(0, |s| s.len())
    }

    pub fn commit_count(&self, digest: &Digest) -> usize {
        self.commits.get(digest).map_or(0, |s| s.len())
    }

    /// Prepared in the PBFT sense: an accepted block with a prepare quorum.
    pub fn is_prepared(&self, quorum: usize) -> bool {
        match &self.block {
            Some(b) => self.prepare_count(&b.digest()) >= quorum,
            None => false,
        }
    }
}

/// Per-replica state of one SB instance.
#[derive(Debug)]
pub struct SbInstance {
    pub ins: InstanceId,
    pub view: u64,
    pub engine: SbEngine,
    pub slots: BTreeMap<SeqNum, Slot>,
    /// Suspicion senders keyed by the view being suspected.
    pub suspicions: BTreeMap<u64, BTreeSet<ReplicaId>>,
    pub suspicion_sent: BTreeSet<u64>,
    /// View-change messages per new view.
    pub view_changes: BTreeMap<u64, BTreeMap<ReplicaId, ViewChangeData>>,
    pub new_view_installed: BTreeSet<u64>,
    /// Progress timer generation; a stale timer event is ignored.
    pub timer_generation: u64,
    pub timer_armed: bool,
}

#[derive(Debug, Clone)]
pub struct ViewChangeData {
    pub last_delivered: Option<SeqNum>,
    pub prepared: Vec<(u64, Arc<Block>)>,
}

impl SbInstance {
    pub fn new(ins: InstanceId, engine: SbEngine) -> Self {
        SbInstance {
            ins,
            view: 0,
            engine,
            slots: BTreeMap::new(),
            suspicions: BTreeMap::new(),
            suspicion_sent: BTreeSet::new(),
            view_changes: BTreeMap::new(),
            new_view_installed: BTreeSet::new(),
            timer_generation: 0,
            timer_armed: false,
        }
    }

    pub fn slot(&mut self, sn: SeqNum) -> &mut Slot {
        self.slots.entry(sn).or_default()
    }

    pub fn record_suspicion(&mut self, view: u64, from: ReplicaId) -> usize {
        let set = self.suspicions.entry(view).or_default();
        set.insert(from);
        set.len()
    }

    /// Enter a later view, clearing undelivered slot state so re-proposals
    /// start clean. Delivered blocks are never revoked.
    pub fn enter_view(&mut self, view: u64) {
        assert!(view > self.view, "views only move forward");
        self.view = view;
        self.slots.retain(|_, slot| slot.delivered);
        self.timer_generation += 1;
        self.timer_armed = false;
    }

    /// Prepared-but-undelivered blocks for a view-change summary.
    pub fn prepared_summary(&self, quorum: usize) -> Vec<(u64, Arc<Block>)> {
        self.slots
            .values()
            .filter(|slot| !slot.delivered && slot.is_prepared(quorum))
            .filter_map(|slot| {
                let block = slot.block.clone()?;
                Some((slot.accepted_view.unwrap_or(0), block))
            })
            .collect()
    }

    /// Drop state for sequence numbers below a garbage-collected boundary.
    pub fn prune_slots_below(&mut self, sn: SeqNum) {
        self.slots = self.slots.split_off(&sn);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leader_rotates_round_robin() {
        assert_eq!(leader_of(0, 0, 4), 0);
        assert_eq!(leader_of(1, 0, 4), 1);
        assert_eq!(leader_of(0, 1, 4), 1);
        assert_eq!(leader_of(3, 2, 4), 1);
    }

    #[test]
    fn slot_quorum_counting() {
        let mut slot = Slot::default();
        let d = Digest(7);
        assert_eq!(slot.record_prepare(d, 0), 1);
        assert_eq!(slot.record_prepare(d, 0), 1);
        assert_eq!(slot.record_prepare(d, 1), 2);
        assert_eq!(slot.record_prepare(Digest(9), 2), 1);
        assert_eq!(slot.prepare_count(&d), 2);
    }

    #[test]
    fn enter_view_keeps_delivered_slots() {
        let mut sb = SbInstance::new(0, SbEngine::Pbft);
        sb.slot(0).delivered = true;
        sb.slot(1).sent_prepare = true;
        sb.enter_view(1);
        assert!(sb.slots.contains_key(&0));
        assert!(!sb.slots.contains_key(&1));
    }
}
