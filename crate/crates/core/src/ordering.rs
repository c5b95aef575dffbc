//! Partial logs, the global log, and dynamic cross-instance ordering.
//!
//! Delivered blocks carry a rank. Blocks are globally ordered by increasing
//! rank, ties broken toward smaller instance indices. A block is safe to
//! confirm globally once the `bar` — one past the lowest last-delivered rank
//! across all instances — rules out any future block ordering before it.

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::domain::{Block, Digest, InstanceId, SeqNum};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OrderingViolation {
    #[error("rank agreement violated at instance {ins} sn {sn}: {left:?} vs {right:?}")]
    RankAgreement { ins: InstanceId, sn: SeqNum, left: u64, right: u64 },
    #[error("block agreement violated at instance {ins} sn {sn}: {left} vs {right}")]
    BlockAgreement { ins: InstanceId, sn: SeqNum, left: Digest, right: Digest },
    #[error("rank regression in instance {ins}: {prev} then {next}")]
    RankRegression { ins: InstanceId, prev: u64, next: u64 },
    #[error("two distinct blocks share ordering key (rank {rank}, instance {ins})")]
    DuplicateOrderingKey { rank: u64, ins: InstanceId },
    #[error("bar moved backwards: {prev:?} then {next:?}")]
    BarRegression { prev: (u64, InstanceId), next: (u64, InstanceId) },
    #[error("confirmation-before-safe: glog tail {tail:?} does not precede appended {appended:?}")]
    ConfirmBeforeSafe { tail: (u64, InstanceId), appended: (u64, InstanceId) },
}

/// Global ordering relation: `a` orders before `b`.
pub fn precedes(a: &Block, b: &Block) -> bool {
    precedes_key(ordering_key(a), ordering_key(b))
}

pub fn ordering_key(b: &Block) -> (u64, InstanceId) {
    (b.rank, b.ins)
}

pub fn precedes_key(a: (u64, InstanceId), b: (u64, InstanceId)) -> bool {
    a < b
}

/// Unique minimum of a block set under [`precedes`]; `None` when empty.
pub fn find_lowest_block<'a>(blocks: impl IntoIterator<Item = &'a Arc<Block>>) -> Option<&'a Arc<Block>> {
    blocks.into_iter().min_by_key(|b| ordering_key(b))
}

/// Next rank for a proposal: one past the highest rank reported by a quorum.
pub fn next_rank(reports: impl IntoIterator<Item = u64>) -> u64 {
    reports.into_iter().max().unwrap_or(0) + 1
}

/// Per-instance log of delivered blocks, keyed by sequence number. Populated
/// only through SB delivery; never reordered.
#[derive(Debug, Default, Clone)]
pub struct PartialLog {
    blocks: BTreeMap<SeqNum, Arc<Block>>,
    pruned_below: SeqNum,
}

impl PartialLog {
    pub fn insert(&mut self, block: Arc<Block>) -> Result<bool, OrderingViolation> {
        if let Some(existing) = self.blocks.get(&block.sn) {
            if existing.digest() != block.digest() {
                return Err(OrderingViolation::BlockAgreement {
                    ins: block.ins,
                    sn: block.sn,
                    left: existing.digest(),
                    right: block.digest(),
                });
            }
            return Ok(false);
        }
        self.blocks.insert(block.sn, block);
        Ok(true)
    }

    pub fn get(&self, sn: SeqNum) -> Option<&Arc<Block>> {
        self.blocks.get(&sn)
    }

    /// Highest sn such that every sn at or below it is present (including
    /// pruned prefixes).
    pub fn contiguous_max(&self) -> Option<SeqNum> {
        let mut expect = self.pruned_below;
        for sn in self.blocks.keys() {
            if *sn != expect {
                break;
            }
            expect += 1;
        }
        expect.checked_sub(1)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn max_sn(&self) -> Option<SeqNum> {
        self.blocks.keys().next_back().copied()
    }

    /// Drop block bodies at or below `sn` (epoch garbage collection). The
    /// sequence numbers remain represented in the contiguous frontier.
    pub fn prune_through(&mut self, sn: SeqNum) -> usize {
        let keep = self.blocks.split_off(&(sn + 1));
        let dropped = self.blocks.len();
        self.blocks = keep;
        self.pruned_below = self.pruned_below.max(sn + 1);
        dropped
    }
}

/// Global log of confirmed blocks, append-only and strictly increasing in
/// (rank, instance).
#[derive(Debug, Default, Clone)]
pub struct GlobalLog {
    entries: Vec<Arc<Block>>,
}

impl GlobalLog {
    pub fn push(&mut self, block: Arc<Block>) -> Result<(), OrderingViolation> {
        if let Some(tail) = self.entries.last() {
            if !precedes(tail, &block) {
                return Err(OrderingViolation::ConfirmBeforeSafe {
                    tail: ordering_key(tail),
                    appended: ordering_key(&block),
                });
            }
        }
        self.entries.push(block);
        Ok(())
    }

    pub fn entries(&self) -> &[Arc<Block>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Ordering state of one replica: delivered-but-unconfirmed blocks, the
/// per-instance delivery frontier, and the confirmation bar.
#[derive(Debug)]
pub struct OrderingState {
    waiting: BTreeMap<(u64, InstanceId), Arc<Block>>,
    last_rank: Vec<Option<u64>>,
    bar: (u64, InstanceId),
}

impl OrderingState {
    pub fn new(instances: usize) -> Self {
        OrderingState {
            waiting: BTreeMap::new(),
            last_rank: vec![None; instances],
            bar: (0, 0),
        }
    }

    pub fn bar(&self) -> (u64, InstanceId) {
        self.bar
    }

    pub fn waiting_len(&self) -> usize {
        self.waiting.len()
    }

    /// Ingest a delivered block: update the frontier, recompute the bar, and
    /// confirm every waiting block now ruled safe, in order. Returns the
    /// newly confirmed blocks, already appended to `glog`.
    pub fn global_order(
        &mut self,
        block: Arc<Block>,
        glog: &mut GlobalLog,
    ) -> Result<Vec<Arc<Block>>, OrderingViolation> {
        let key = ordering_key(&block);
        if let Some(prev) = self.last_rank[block.ins] {
            if block.rank <= prev {
                return Err(OrderingViolation::RankRegression {
                    ins: block.ins,
                    prev,
                    next: block.rank,
                });
            }
        }
        if let Some(existing) = self.waiting.get(&key) {
            if existing.digest() != block.digest() {
                return Err(OrderingViolation::DuplicateOrderingKey { rank: block.rank, ins: block.ins });
            }
        }
        self.last_rank[block.ins] = Some(block.rank);
        self.waiting.insert(key, block);

        if self.last_rank.iter().all(|r| r.is_some()) {
            let lowest = self
                .last_rank
                .iter()
                .enumerate()
                .map(|(ins, rank)| (rank.unwrap(), ins))
                .min()
                .expect("at least one instance");
            let bar = (lowest.0 + 1, lowest.1);
            if bar < self.bar {
                return Err(OrderingViolation::BarRegression { prev: self.bar, next: bar });
            }
            self.bar = bar;
        }

        let mut confirmed = Vec::new();
        while let Some((key, _)) = self.waiting.first_key_value() {
            if !precedes_key(*key, self.bar) {
                break;
            }
            let (_, block) = self.waiting.pop_first().expect("nonempty");
            glog.push(Arc::clone(&block))?;
            confirmed.push(block);
        }
        Ok(confirmed)
    }
}

/// Highest-rank bookkeeping for rank assignment: tracks ranks of delivered
/// blocks and of this replica's own proposals.
#[derive(Debug, Default, Clone)]
pub struct RankTracker {
    highest: u64,
}

impl RankTracker {
    pub fn observe(&mut self, rank: u64) {
        self.highest = self.highest.max(rank);
    }

    pub fn highest(&self) -> u64 {
        self.highest
    }
}
