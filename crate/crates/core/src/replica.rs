//! One replica's composed protocol state machine.
//!
//! A replica is driven purely by messages and timers from the event loop;
//! it owns its buckets, SB instances, logs, escrow state, and execution
//! engine, and emits messages, timers, client replies, and trace events
//! through [`ReplicaCtx`]. Nothing here touches wall-clock time or threads.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use thiserror::Error;

use crate::checkpoint::{
    epoch_digest, epoch_last_sn, epoch_of, CheckpointCollector, CheckpointMsg, Epoch,
};
use crate::domain::{
    state_covers, validate_tx, Amount, Block, InstanceId, ObjectKey, ReplicaId, SeqNum, Signature,
    SignerId, SystemState, TimeNs, Transaction, TxId,
};
use crate::execution::{
    ConfirmationStatus, ExecPath, Execution, ExecutionViolation, ObjectStore, OrderingMode,
    TxOutcome,
};
use crate::ordering::{GlobalLog, OrderingState, OrderingViolation, PartialLog, RankTracker};
use crate::partition::{Bucket, Partitioner};
use crate::sb::{leader_of, Evidence, Message, SbEngine, SbInstance, ViewChangeData};

#[derive(Debug, Error)]
pub enum ReplicaError {
    #[error("replica {replica}: {source}")]
    Ordering { replica: ReplicaId, source: OrderingViolation },
    #[error("replica {replica}: {source}")]
    Execution { replica: ReplicaId, source: ExecutionViolation },
    #[error("replica {replica}: checkpoint emitted before epoch {epoch} completed")]
    PrematureCheckpoint { replica: ReplicaId, epoch: Epoch },
}

/// Byzantine behaviors a replica can be scripted to adopt. At most `f`
/// replicas carry one; activation time comes from the fault plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultBehavior {
    /// Stops sending and processing everything.
    CrashSilent,
    /// Leads normally but skips even-id transactions from its proposals.
    Censor,
    /// Proposes blocks referencing a state that does not exist.
    SpoofState,
    /// Keeps proposing in its own instance while ignoring all others; the
    /// undetectable fault, since its own instance never times out.
    LeadOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimerKind {
    /// Leader batch cadence for one instance.
    Batch { ins: InstanceId },
    /// Liveness watchdog for one instance and view.
    Progress { ins: InstanceId, view: u64, generation: u64 },
    /// Deadline for a candidate's state reference to become coverable.
    Coverage { ins: InstanceId, sn: SeqNum, view: u64 },
    /// Periodic censorship scan over buckets.
    CensorScan,
    /// Scripted fault activation.
    BehaviorStart,
}

/// Observations the simulator's recorder consumes.
#[derive(Debug, Clone)]
pub enum TraceEvent {
    TxAccepted { tx: Arc<Transaction> },
    Proposed { ins: InstanceId, view: u64, block: Arc<Block>, noop_fill: bool },
    Delivered { ins: InstanceId, block: Arc<Block> },
    /// A block reached its confirmed position in the global log.
    GlobalOrdered { block: Arc<Block> },
    Confirmed { tx: Arc<Transaction>, status: ConfirmationStatus, path: ExecPath },
    SuspicionRaised { ins: InstanceId, view: u64, evidence: Evidence },
    ViewChanged { ins: InstanceId, view: u64 },
    CheckpointEmitted { epoch: Epoch, digest: crate::domain::Digest },
    CheckpointStable { epoch: Epoch },
    GarbageCollected { epoch: Epoch, retained_before: usize, retained_after: usize },
}

/// Effects a replica hands back to the event loop.
pub trait ReplicaCtx {
    fn now(&self) -> TimeNs;
    fn send(&mut self, to: ReplicaId, msg: Message);
    fn broadcast(&mut self, msg: Message);
    fn reply(&mut self, client: ObjectKey, tx: TxId, status: ConfirmationStatus);
    fn set_timer(&mut self, delay: TimeNs, kind: TimerKind);
    fn trace(&mut self, event: TraceEvent);
}

#[derive(Debug, Clone)]
pub struct ReplicaConfig {
    pub n: usize,
    pub f: usize,
    pub m: usize,
    pub epoch_len: u64,
    pub engine: SbEngine,
    pub mode: OrderingMode,
    pub batch_size: usize,
    pub batch_timeout: TimeNs,
    pub view_change_timeout: TimeNs,
    pub censorship_window: TimeNs,
    /// Age past which a transaction is proposed even though its escrow looks
    /// unsatisfiable, so the abort path can decide it.
    pub pull_force_after: TimeNs,
}

impl ReplicaConfig {
    pub fn quorum(&self) -> usize {
        2 * self.f + 1
    }
}

/// Pending rank quorum for one proposal.
#[derive(Debug)]
struct RankQuery {
    ins: InstanceId,
    view: u64,
    sn: SeqNum,
    state: SystemState,
    txs: Vec<Arc<Transaction>>,
    forced: BTreeSet<TxId>,
    reports: BTreeMap<ReplicaId, u64>,
}

#[derive(Debug)]
struct InFlightProposal {
    txs: Vec<Arc<Transaction>>,
    decrements: Vec<(ObjectKey, Amount)>,
}

pub struct Replica {
    pub id: ReplicaId,
    pub cfg: ReplicaConfig,
    part: Partitioner,
    buckets: Vec<Bucket>,
    pub plogs: Vec<PartialLog>,
    pub glog: GlobalLog,
    ordering: OrderingState,
    /// Next sn per instance to feed into the ordering state (contiguous).
    ordering_next: Vec<SeqNum>,
    rank: RankTracker,
    pub exec: Execution,
    sb: Vec<SbInstance>,
    checkpoints: CheckpointCollector,

    // Leader-side proposal machinery.
    next_propose_sn: Vec<SeqNum>,
    rank_queries: BTreeMap<u64, RankQuery>,
    query_active: Vec<bool>,
    next_qid: u64,
    in_flight: Vec<BTreeMap<SeqNum, InFlightProposal>>,
    in_flight_decr: BTreeMap<ObjectKey, Amount>,

    // Messages for views not yet entered, replayed on entry.
    pending_view_msgs: BTreeMap<(InstanceId, u64), Vec<(ReplicaId, Message)>>,

    // Failure detector bookkeeping.
    last_progress: Vec<TimeNs>,

    // Epoch accounting.
    epoch_txs: BTreeMap<Epoch, BTreeSet<TxId>>,
    epoch_undecided: BTreeMap<Epoch, i64>,
    tx_epochs: BTreeMap<TxId, Vec<Epoch>>,
    undecided_pairs: i64,
    emitted_epochs: BTreeSet<Epoch>,
    gc_through: Option<Epoch>,

    /// (tx, instance) escrow steps already taken, so a replayed position
    /// cannot double-count.
    stepped: BTreeSet<(TxId, InstanceId)>,

    // Scripted fault.
    behavior: Option<FaultBehavior>,
    behavior_active: bool,

    pub noop_fill_count: u64,
}

impl Replica {
    pub fn new(
        id: ReplicaId,
        cfg: ReplicaConfig,
        part: Partitioner,
        store: ObjectStore,
        behavior: Option<FaultBehavior>,
    ) -> Self {
        let m = cfg.m;
        Replica {
            id,
            exec: Execution::new(store, m, cfg.mode),
            part,
            buckets: (0..m).map(Bucket::new).collect(),
            plogs: vec![PartialLog::default(); m],
            glog: GlobalLog::default(),
            ordering: OrderingState::new(m),
            ordering_next: vec![0; m],
            rank: RankTracker::default(),
            sb: (0..m).map(|i| SbInstance::new(i, cfg.engine)).collect(),
            checkpoints: CheckpointCollector::default(),
            next_propose_sn: vec![0; m],
            rank_queries: BTreeMap::new(),
            query_active: vec![false; m],
            next_qid: 0,
            in_flight: (0..m).map(|_| BTreeMap::new()).collect(),
            in_flight_decr: BTreeMap::new(),
            pending_view_msgs: BTreeMap::new(),
            last_progress: vec![0; m],
            epoch_txs: BTreeMap::new(),
            epoch_undecided: BTreeMap::new(),
            tx_epochs: BTreeMap::new(),
            undecided_pairs: 0,
            emitted_epochs: BTreeSet::new(),
            gc_through: None,
            stepped: BTreeSet::new(),
            behavior,
            behavior_active: false,
            noop_fill_count: 0,
            cfg,
        }
    }

    pub fn is_byzantine(&self) -> bool {
        self.behavior.is_some()
    }

    pub fn partitioner(&self) -> &Partitioner {
        &self.part
    }

    pub fn view_of(&self, ins: InstanceId) -> u64 {
        self.sb[ins].view
    }

    /// Diagnostic summary of one transaction's standing at this replica.
    pub fn debug_tx_state(&self, tx: TxId) -> String {
        let mut parts = vec![format!("r{}", self.id)];
        for ins in self.part_route_for_debug(tx) {
            let bucket = &self.buckets[ins];
            parts.push(format!(
                "ins{} view={} leader={} pending={} reserved={} delivered={} q_active={} next_sn={} frontier={:?}",
                ins,
                self.sb[ins].view,
                leader_of(ins, self.sb[ins].view, self.cfg.n),
                bucket.pending_ids().any(|id| id == tx),
                bucket.debug_reserved(tx),
                bucket.debug_delivered(tx),
                self.query_active[ins],
                self.next_propose_sn[ins],
                self.plogs[ins].contiguous_max(),
            ));
            let undelivered: Vec<_> = self.sb[ins]
                .slots
                .iter()
                .filter(|(_, s)| s.block.is_some() && !s.delivered)
                .map(|(sn, s)| (*sn, s.awaiting_coverage))
                .collect();
            if !undelivered.is_empty() {
                parts.push(format!("ins{} undelivered_slots={:?}", ins, undelivered));
            }
        }
        parts.push(format!(
            "record={:?} keepalive={} W={} undecided={} in_flight={:?}",
            self.exec.record(tx).map(|r| r.status),
            self.keepalive_needed(),
            self.ordering.waiting_len(),
            self.undecided_pairs,
            self.in_flight.iter().map(|m| m.len()).collect::<Vec<_>>(),
        ));
        parts.join(" | ")
    }

    fn part_route_for_debug(&self, _tx: TxId) -> Vec<InstanceId> {
        (0..self.cfg.m).collect()
    }

    /// Current delivered frontier: the contiguous maximum sequence number
    /// per instance; the system state referenced by new proposals.
    pub fn delivered_frontier(&self) -> SystemState {
        SystemState(self.plogs.iter().map(|p| p.contiguous_max()).collect())
    }

    /// Protocol-state cardinality, for the garbage-collection bookkeeping.
    pub fn memory_footprint(&self) -> usize {
        self.plogs.iter().map(|p| p.len()).sum::<usize>()
            + self.buckets.iter().map(|b| b.retained_len()).sum::<usize>()
            + self.exec.tracking_len()
            + self.exec.elog.len()
            + self.stepped.len()
    }

    fn is_leader(&self, ins: InstanceId) -> bool {
        leader_of(ins, self.sb[ins].view, self.cfg.n) == self.id
    }

    /// The client that initiated a transaction: owner of the first owned
    /// decremental object.
    pub fn tx_client(&self, tx: &Transaction) -> ObjectKey {
        tx.payer_ops(&self.exec.store)
            .next()
            .map(|op| op.target.clone())
            .unwrap_or_else(|| ObjectKey::new("unknown"))
    }

    pub fn init(&mut self, ctx: &mut impl ReplicaCtx) {
        for ins in 0..self.cfg.m {
            if self.is_leader(ins) {
                ctx.set_timer(self.cfg.batch_timeout, TimerKind::Batch { ins });
            }
        }
        ctx.set_timer(self.cfg.view_change_timeout / 2, TimerKind::CensorScan);
    }

    // -----------------------------------------------------------------
    // Entry points
    // -----------------------------------------------------------------

    /// Top-level message entry: dispatch, then run local progress to a
    /// fixpoint.
    pub fn handle_message(
        &mut self,
        from: ReplicaId,
        msg: Message,
        ctx: &mut impl ReplicaCtx,
    ) -> Result<(), ReplicaError> {
        self.on_message(from, msg, ctx)?;
        self.advance(ctx)
    }

    /// Top-level timer entry: dispatch, then run local progress to a
    /// fixpoint.
    pub fn handle_timer(
        &mut self,
        kind: TimerKind,
        ctx: &mut impl ReplicaCtx,
    ) -> Result<(), ReplicaError> {
        self.on_timer(kind, ctx)?;
        if self.dropped_by_fault_timer() {
            return Ok(());
        }
        self.advance(ctx)
    }

    fn on_timer(
        &mut self,
        kind: TimerKind,
        ctx: &mut impl ReplicaCtx,
    ) -> Result<(), ReplicaError> {
        if let TimerKind::BehaviorStart = kind {
            self.behavior_active = self.behavior.is_some();
            return Ok(());
        }
        if self.dropped_by_fault_timer() {
            return Ok(());
        }
        match kind {
            TimerKind::Batch { ins } => {
                if self.is_leader(ins) {
                    self.maybe_propose(ins, ctx)?;
                    ctx.set_timer(self.cfg.batch_timeout, TimerKind::Batch { ins });
                }
            }
            TimerKind::Progress { ins, view, generation } => {
                self.on_progress_timer(ins, view, generation, ctx)?;
            }
            TimerKind::Coverage { ins, sn, view } => {
                self.on_coverage_timer(ins, sn, view, ctx)?;
            }
            TimerKind::CensorScan => {
                self.detector_scan(ctx)?;
                ctx.set_timer(self.cfg.view_change_timeout / 2, TimerKind::CensorScan);
            }
            TimerKind::BehaviorStart => unreachable!(),
        }
        Ok(())
    }

    fn dropped_by_fault_timer(&self) -> bool {
        matches!(
            (self.behavior_active, self.behavior),
            (true, Some(FaultBehavior::CrashSilent))
        )
    }

    /// Inbound filter for active fault behaviors: a crashed replica
    /// processes nothing. A lead-only replica still listens everywhere (it
    /// tracks deliveries passively) but its outbound participation is
    /// filtered by [`Replica::outgoing_allowed`].
    fn dropped_by_fault(&self, _msg: &Message) -> bool {
        self.behavior_active && self.behavior == Some(FaultBehavior::CrashSilent)
    }

    /// Outbound filter for active fault behaviors, applied by the event
    /// loop. A lead-only replica sends only for the instance it leads,
    /// withholding votes, rank reports, suspicions, and checkpoints
    /// everywhere else.
    pub fn outgoing_allowed(&self, msg: &Message) -> bool {
        if !self.behavior_active {
            return true;
        }
        match self.behavior {
            Some(FaultBehavior::CrashSilent) => false,
            Some(FaultBehavior::LeadOnly) => match msg.instance() {
                Some(ins) => ins == self.id && self.is_leader(ins),
                None => false,
            },
            _ => true,
        }
    }

    fn on_message(
        &mut self,
        from: ReplicaId,
        msg: Message,
        ctx: &mut impl ReplicaCtx,
    ) -> Result<(), ReplicaError> {
        if self.dropped_by_fault(&msg) {
            return Ok(());
        }
        match msg {
            Message::Submit { tx } => self.on_submit(tx, ctx),
            Message::RankQuery { ins, qid } => {
                ctx.send(from, Message::RankReport { ins, qid, highest: self.rank.highest() });
                Ok(())
            }
            Message::RankReport { qid, highest, .. } => self.on_rank_report(qid, from, highest, ctx),
            Message::Candidate { ins, view, block } => {
                self.on_candidate(from, ins, view, block, ctx)
            }
            Message::PrePrepare { ins, view, block } => {
                self.on_candidate(from, ins, view, block, ctx)
            }
            Message::Prepare { ins, view, sn, digest } => {
                self.on_prepare(from, ins, view, sn, digest, ctx)
            }
            Message::Commit { ins, view, sn, digest } => {
                self.on_commit(from, ins, view, sn, digest, ctx)
            }
            Message::Suspicion { ins, view, evidence, tx } => {
                self.on_suspicion(from, ins, view, evidence, tx, ctx)
            }
            Message::ViewChange { ins, new_view, last_delivered, prepared } => self
                .on_view_change_msg(
                    from,
                    ins,
                    new_view,
                    ViewChangeData { last_delivered, prepared },
                    ctx,
                ),
            Message::NewView { ins, new_view, start_sn, reproposals } => {
                self.on_new_view(from, ins, new_view, start_sn, reproposals, ctx)
            }
            Message::Checkpoint { epoch, digest } => self.on_checkpoint(from, epoch, digest, ctx),
        }
    }

    // -----------------------------------------------------------------
    // Partition: transaction intake
    // -----------------------------------------------------------------

    fn on_submit(
        &mut self,
        tx: Arc<Transaction>,
        ctx: &mut impl ReplicaCtx,
    ) -> Result<(), ReplicaError> {
        if !validate_tx(&tx, &self.exec.store) {
            return Ok(());
        }
        let now = ctx.now();
        let mut accepted = false;
        for ins in self.part.route(&tx, &self.exec.store) {
            if self.buckets[ins].push(Arc::clone(&tx), now) {
                accepted = true;
                // Forward to the current leader so a narrow client fanout
                // still reaches every routed instance.
                let leader = leader_of(ins, self.sb[ins].view, self.cfg.n);
                if leader != self.id {
                    ctx.send(leader, Message::Submit { tx: Arc::clone(&tx) });
                    self.arm_progress_timer(ins, ctx);
                }
            }
        }
        if accepted {
            ctx.trace(TraceEvent::TxAccepted { tx });
        }
        Ok(())
    }

    // -----------------------------------------------------------------
    // Leader: proposals and rank queries
    // -----------------------------------------------------------------

    fn maybe_propose(
        &mut self,
        ins: InstanceId,
        ctx: &mut impl ReplicaCtx,
    ) -> Result<(), ReplicaError> {
        if self.query_active[ins] {
            return Ok(());
        }
        if self.behavior_active && self.behavior == Some(FaultBehavior::LeadOnly) && ins != self.id
        {
            return Ok(());
        }
        let sn = self.next_propose_sn[ins];
        // Epoch gating: sequence numbers of epoch e are proposed only once
        // every instance has delivered epoch e-1 here.
        let e = epoch_of(sn, self.cfg.epoch_len);
        if e > 0 {
            let boundary = epoch_last_sn(e - 1, self.cfg.epoch_len);
            let all_done = self
                .plogs
                .iter()
                .all(|p| p.contiguous_max().map_or(false, |max| max >= boundary));
            if !all_done {
                return Ok(());
            }
        }
        let now = ctx.now();
        self.purge_decided_from_bucket(ins);
        let (txs, forced) = self.pull_batch(ins, now);
        if txs.is_empty() && !self.keepalive_needed() && !self.trails_pack(ins) {
            return Ok(());
        }
        // Assemble the proposal and gather a 2f+1 rank quorum first.
        let state = self.delivered_frontier();
        let state = if self.behavior_active && self.behavior == Some(FaultBehavior::SpoofState) {
            let mut spoofed = state;
            let victim = (ins + 1) % self.cfg.m;
            spoofed.0[victim] = Some(spoofed.get(victim).map_or(1_000_000, |sn| sn + 1_000_000));
            spoofed
        } else {
            state
        };
        let qid = self.next_qid;
        self.next_qid += 1;
        let mut reports = BTreeMap::new();
        reports.insert(self.id, self.rank.highest());
        self.rank_queries.insert(
            qid,
            RankQuery { ins, view: self.sb[ins].view, sn, state, txs, forced, reports },
        );
        self.query_active[ins] = true;
        ctx.broadcast(Message::RankQuery { ins, qid });
        self.try_finalize_proposal(qid, ctx)?;
        Ok(())
    }

    fn pull_batch(&mut self, ins: InstanceId, now: TimeNs) -> (Vec<Arc<Transaction>>, BTreeSet<TxId>) {
        let censoring =
            self.behavior_active && self.behavior == Some(FaultBehavior::Censor) && ins == self.id;
        let mut deducted: BTreeMap<ObjectKey, Amount> = BTreeMap::new();
        let store = &self.exec.store;
        let part = &self.part;
        let in_flight = &self.in_flight_decr;
        let batch = self.cfg.batch_size;
        let force_after = self.cfg.pull_force_after;
        self.buckets[ins].pull_valid_txs(batch, now, force_after, |tx| {
            if censoring && tx.id.0 % 2 == 0 {
                return false;
            }
            let mut plan: Vec<(ObjectKey, Amount)> = Vec::new();
            for op in tx.payer_ops(store) {
                if part.assign(&op.target) != ins {
                    continue;
                }
                let Some(object) = store.get(&op.target) else { return false };
                let held: Amount = in_flight.get(&op.target).copied().unwrap_or(0)
                    + deducted.get(&op.target).copied().unwrap_or(0)
                    + plan.iter().filter(|(k, _)| k == &op.target).map(|(_, a)| a).sum::<Amount>();
                if object.value - held - op.amount < object.con {
                    return false;
                }
                plan.push((op.target.clone(), op.amount));
            }
            for (key, amount) in plan {
                *deducted.entry(key).or_insert(0) += amount;
            }
            true
        })
    }

    fn purge_decided_from_bucket(&mut self, ins: InstanceId) {
        let decided: Vec<TxId> = self
            .buckets[ins]
            .pending_ids()
            .filter(|id| {
                self.exec
                    .record(*id)
                    .map_or(false, |r| r.status != ConfirmationStatus::Pending)
            })
            .collect();
        for id in decided {
            self.buckets[ins].mark_delivered(id);
        }
    }

    /// Keep proposing (possibly empty blocks) while anything in the system
    /// still waits on global ordering or confirmation.
    fn keepalive_needed(&self) -> bool {
        self.ordering.waiting_len() > 0
            || self.undecided_pairs > 0
            || self.buckets.iter().any(|b| b.has_pending())
    }

    /// Pace-keeping duty: an instance must not fall behind the fastest
    /// frontier, or it blocks the epoch gate and the confirmation bar for
    /// everyone. Counts this leader's in-flight proposals.
    fn trails_pack(&self, ins: InstanceId) -> bool {
        let pack = (0..self.cfg.m)
            .map(|i| self.plogs[i].contiguous_max().map_or(0, |sn| sn + 1))
            .max()
            .unwrap_or(0);
        self.next_propose_sn[ins] < pack
    }

    fn on_rank_report(
        &mut self,
        qid: u64,
        from: ReplicaId,
        highest: u64,
        ctx: &mut impl ReplicaCtx,
    ) -> Result<(), ReplicaError> {
        if let Some(query) = self.rank_queries.get_mut(&qid) {
            query.reports.insert(from, highest);
            self.try_finalize_proposal(qid, ctx)?;
        }
        Ok(())
    }

    fn try_finalize_proposal(
        &mut self,
        qid: u64,
        ctx: &mut impl ReplicaCtx,
    ) -> Result<(), ReplicaError> {
        let ready = self
            .rank_queries
            .get(&qid)
            .map_or(false, |q| q.reports.len() >= self.cfg.quorum());
        if !ready {
            return Ok(());
        }
        let query = self.rank_queries.remove(&qid).expect("checked");
        self.query_active[query.ins] = false;
        // The proposal dies if the view moved while the quorum formed.
        if query.view != self.sb[query.ins].view || !self.is_leader(query.ins) {
            for tx in &query.txs {
                self.buckets[query.ins].release(tx.id);
            }
            return Ok(());
        }
        let quorum_max = query.reports.values().copied().max().unwrap_or(0);
        let rank = quorum_max.max(self.rank.highest()) + 1;
        self.rank.observe(rank);
        let block = Arc::new(Block {
            txs: query.txs.clone(),
            ins: query.ins,
            sn: query.sn,
            state: query.state.clone(),
            rank,
            forced: query.forced.clone(),
            sig: Signature::sign(SignerId::Replica(self.id), crate::domain::Digest(rank)),
        });
        let noop_fill = block.txs.is_empty() && self.sb[query.ins].view > 0;
        if noop_fill {
            self.noop_fill_count += 1;
        }
        ctx.trace(TraceEvent::Proposed {
            ins: query.ins,
            view: self.sb[query.ins].view,
            block: Arc::clone(&block),
            noop_fill,
        });
        let mut decrements = Vec::new();
        for tx in &block.txs {
            // Forced transactions abort at their step; they hold no funds.
            if block.forced.contains(&tx.id) {
                continue;
            }
            for op in tx.payer_ops(&self.exec.store) {
                if self.part.assign(&op.target) == query.ins {
                    *self.in_flight_decr.entry(op.target.clone()).or_insert(0) += op.amount;
                    decrements.push((op.target.clone(), op.amount));
                }
            }
        }
        self.in_flight[query.ins]
            .insert(query.sn, InFlightProposal { txs: block.txs.clone(), decrements });
        self.next_propose_sn[query.ins] = query.sn + 1;

        let view = self.sb[query.ins].view;
        match self.cfg.engine {
            SbEngine::Ideal => {
                ctx.broadcast(Message::Candidate {
                    ins: query.ins,
                    view,
                    block: Arc::clone(&block),
                });
                self.on_candidate(self.id, query.ins, view, block, ctx)?;
            }
            SbEngine::Pbft => {
                ctx.broadcast(Message::PrePrepare {
                    ins: query.ins,
                    view,
                    block: Arc::clone(&block),
                });
                self.on_candidate(self.id, query.ins, view, block, ctx)?;
            }
        }
        Ok(())
    }

    // -----------------------------------------------------------------
    // SB: candidate validation, three phases, delivery
    // -----------------------------------------------------------------

    fn on_candidate(
        &mut self,
        from: ReplicaId,
        ins: InstanceId,
        view: u64,
        block: Arc<Block>,
        ctx: &mut impl ReplicaCtx,
    ) -> Result<(), ReplicaError> {
        if view < self.sb[ins].view {
            return Ok(());
        }
        if view > self.sb[ins].view {
            let msg = match self.cfg.engine {
                SbEngine::Ideal => Message::Candidate { ins, view, block },
                SbEngine::Pbft => Message::PrePrepare { ins, view, block },
            };
            self.pending_view_msgs.entry((ins, view)).or_default().push((from, msg));
            return Ok(());
        }
        if from != leader_of(ins, view, self.cfg.n) {
            return Ok(());
        }
        let sn = block.sn;
        {
            let slot = self.sb[ins].slot(sn);
            if slot.delivered {
                return Ok(());
            }
            // First candidate per view wins; an equivocating duplicate is
            // ignored and starves its own quorum.
            if slot.accepted_view == Some(view) {
                return Ok(());
            }
            slot.accepted_view = Some(view);
            slot.block = Some(Arc::clone(&block));
            slot.sent_prepare = false;
            slot.sent_commit = false;
            slot.awaiting_coverage = false;
        }
        self.mark_progress(ins, ctx.now());
        self.arm_progress_timer(ins, ctx);
        self.try_validate_slot(ins, sn, ctx)?;
        // Quorum messages may have raced ahead of the candidate.
        self.try_deliver(ins, sn, ctx)?;
        Ok(())
    }

    /// Structural and state validation of an accepted candidate. Runs once
    /// coverage is reached; raises suspicion on failure.
    fn try_validate_slot(
        &mut self,
        ins: InstanceId,
        sn: SeqNum,
        ctx: &mut impl ReplicaCtx,
    ) -> Result<(), ReplicaError> {
        let view = self.sb[ins].view;
        let Some(block) = self.sb[ins].slots.get(&sn).and_then(|s| {
            if s.delivered || s.sent_prepare || s.accepted_view != Some(view) {
                None
            } else {
                s.block.clone()
            }
        }) else {
            return Ok(());
        };
        if !self.block_structurally_valid(&block) {
            self.raise_suspicion(ins, Evidence::SpoofedState, None, ctx)?;
            return Ok(());
        }
        let covered = state_covers(self.exec.exec_state(), &block.state)
            .map_err(|e| ReplicaError::Execution { replica: self.id, source: e.into() })?;
        if !covered {
            let slot = self.sb[ins].slot(sn);
            if !slot.awaiting_coverage {
                slot.awaiting_coverage = true;
                slot.coverage_deadline = Some(ctx.now() + self.cfg.view_change_timeout);
                ctx.set_timer(self.cfg.view_change_timeout, TimerKind::Coverage { ins, sn, view });
            }
            return Ok(());
        }
        if !self.block_txs_escrowable(ins, &block, ctx.now()) {
            self.raise_suspicion(ins, Evidence::SpoofedState, None, ctx)?;
            return Ok(());
        }
        // Validated: ideal engine delivers, pbft enters the prepare phase.
        let digest = block.digest();
        match self.cfg.engine {
            SbEngine::Ideal => {
                self.deliver(ins, block, ctx)?;
            }
            SbEngine::Pbft => {
                {
                    let slot = self.sb[ins].slot(sn);
                    slot.awaiting_coverage = false;
                    slot.sent_prepare = true;
                    slot.record_prepare(digest, self.id);
                }
                ctx.broadcast(Message::Prepare { ins, view, sn, digest });
                self.try_commit_phase(ins, sn, ctx)?;
            }
        }
        Ok(())
    }

    fn block_structurally_valid(&self, block: &Block) -> bool {
        if block.state.len() != self.cfg.m {
            return false;
        }
        let mut seen = BTreeSet::new();
        for tx in &block.txs {
            if !validate_tx(tx, &self.exec.store) {
                return false;
            }
            if !seen.insert(tx.id) {
                return false;
            }
            // A transaction already delivered in this instance must not
            // reappear.
            if self.stepped.contains(&(tx.id, block.ins)) {
                return false;
            }
        }
        true
    }

    /// Leader-side pull validity, re-checked by backups at coverage time:
    /// cumulative escrowability of the block's payer operations assigned to
    /// this instance. Force-marked transactions are exempt from the balance
    /// check (they abort at execution) but must genuinely have aged past the
    /// force window; marking fresh transactions is leader misbehavior.
    fn block_txs_escrowable(&self, ins: InstanceId, block: &Block, now: TimeNs) -> bool {
        let mut deducted: BTreeMap<ObjectKey, Amount> = BTreeMap::new();
        for tx in &block.txs {
            if block.forced.contains(&tx.id) {
                if now.saturating_sub(tx.submit_time) < self.cfg.pull_force_after {
                    return false;
                }
                continue;
            }
            if self
                .exec
                .record(tx.id)
                .map_or(false, |r| r.status != ConfirmationStatus::Pending)
            {
                continue;
            }
            for op in tx.payer_ops(&self.exec.store) {
                if self.part.assign(&op.target) != ins {
                    continue;
                }
                let Some(object) = self.exec.store.get(&op.target) else { return false };
                let held = deducted.get(&op.target).copied().unwrap_or(0);
                if object.value - held - op.amount < object.con {
                    return false;
                }
                *deducted.entry(op.target.clone()).or_insert(0) += op.amount;
            }
        }
        true
    }

    fn on_prepare(
        &mut self,
        from: ReplicaId,
        ins: InstanceId,
        view: u64,
        sn: SeqNum,
        digest: crate::domain::Digest,
        ctx: &mut impl ReplicaCtx,
    ) -> Result<(), ReplicaError> {
        if self.cfg.engine != SbEngine::Pbft || view < self.sb[ins].view {
            return Ok(());
        }
        if view > self.sb[ins].view {
            self.pending_view_msgs
                .entry((ins, view))
                .or_default()
                .push((from, Message::Prepare { ins, view, sn, digest }));
            return Ok(());
        }
        self.sb[ins].slot(sn).record_prepare(digest, from);
        self.try_commit_phase(ins, sn, ctx)
    }

    fn try_commit_phase(
        &mut self,
        ins: InstanceId,
        sn: SeqNum,
        ctx: &mut impl ReplicaCtx,
    ) -> Result<(), ReplicaError> {
        let view = self.sb[ins].view;
        let quorum = self.cfg.quorum();
        let digest = {
            let slot = self.sb[ins].slot(sn);
            if slot.delivered || slot.sent_commit || !slot.sent_prepare {
                return Ok(());
            }
            let Some(block) = &slot.block else { return Ok(()) };
            let digest = block.digest();
            if slot.prepare_count(&digest) < quorum {
                return Ok(());
            }
            slot.sent_commit = true;
            slot.record_commit(digest, self.id);
            digest
        };
        ctx.broadcast(Message::Commit { ins, view, sn, digest });
        self.try_deliver(ins, sn, ctx)
    }

    fn on_commit(
        &mut self,
        from: ReplicaId,
        ins: InstanceId,
        view: u64,
        sn: SeqNum,
        digest: crate::domain::Digest,
        ctx: &mut impl ReplicaCtx,
    ) -> Result<(), ReplicaError> {
        if self.cfg.engine != SbEngine::Pbft || view < self.sb[ins].view {
            return Ok(());
        }
        if view > self.sb[ins].view {
            self.pending_view_msgs
                .entry((ins, view))
                .or_default()
                .push((from, Message::Commit { ins, view, sn, digest }));
            return Ok(());
        }
        self.sb[ins].slot(sn).record_commit(digest, from);
        self.try_deliver(ins, sn, ctx)
    }

    fn try_deliver(
        &mut self,
        ins: InstanceId,
        sn: SeqNum,
        ctx: &mut impl ReplicaCtx,
    ) -> Result<(), ReplicaError> {
        if self.cfg.engine != SbEngine::Pbft {
            return Ok(());
        }
        let quorum = self.cfg.quorum();
        let block = {
            let Some(slot) = self.sb[ins].slots.get(&sn) else { return Ok(()) };
            if slot.delivered {
                return Ok(());
            }
            let Some(block) = &slot.block else { return Ok(()) };
            if slot.commit_count(&block.digest()) < quorum {
                return Ok(());
            }
            Arc::clone(block)
        };
        self.deliver(ins, block, ctx)
    }

    /// Finalize one block: append to the partial log, feed the global
    /// ordering, run execution, and follow up on everything that unlocks.
    fn deliver(
        &mut self,
        ins: InstanceId,
        block: Arc<Block>,
        ctx: &mut impl ReplicaCtx,
    ) -> Result<(), ReplicaError> {
        let sn = block.sn;
        {
            let slot = self.sb[ins].slot(sn);
            if slot.delivered {
                return Ok(());
            }
            slot.delivered = true;
            slot.awaiting_coverage = false;
        }
        let fresh = self.plogs[ins]
            .insert(Arc::clone(&block))
            .map_err(|e| ReplicaError::Ordering { replica: self.id, source: e })?;
        if !fresh {
            return Ok(());
        }
        self.mark_progress(ins, ctx.now());
        ctx.trace(TraceEvent::Delivered { ins, block: Arc::clone(&block) });
        // Leader bookkeeping for its own proposal.
        if let Some(in_flight) = self.in_flight[ins].remove(&sn) {
            for (key, amount) in in_flight.decrements {
                if let Some(held) = self.in_flight_decr.get_mut(&key) {
                    *held -= amount;
                    if *held <= 0 {
                        self.in_flight_decr.remove(&key);
                    }
                }
            }
        }
        // Epoch accounting and bucket pruning.
        let epoch = epoch_of(sn, self.cfg.epoch_len);
        for tx in &block.txs {
            self.buckets[ins].mark_delivered(tx.id);
            self.stepped.insert((tx.id, ins));
            self.epoch_txs.entry(epoch).or_default().insert(tx.id);
            let undecided = self
                .exec
                .record(tx.id)
                .map_or(true, |r| r.status == ConfirmationStatus::Pending);
            if undecided {
                *self.epoch_undecided.entry(epoch).or_insert(0) += 1;
                self.tx_epochs.entry(tx.id).or_default().push(epoch);
                self.undecided_pairs += 1;
            }
        }
        Ok(())
    }

    /// Fixpoint over ordering feed, execution, and pending validations.
    fn advance(&mut self, ctx: &mut impl ReplicaCtx) -> Result<(), ReplicaError> {
        loop {
            let mut progressed = false;
            // Feed contiguously delivered blocks into the global ordering.
            for ins in 0..self.cfg.m {
                while let Some(block) = self.plogs[ins].get(self.ordering_next[ins]) {
                    let block = Arc::clone(block);
                    self.rank.observe(block.rank);
                    let confirmed = self
                        .ordering
                        .global_order(block, &mut self.glog)
                        .map_err(|e| ReplicaError::Ordering { replica: self.id, source: e })?;
                    for block in confirmed {
                        ctx.trace(TraceEvent::GlobalOrdered { block });
                    }
                    self.ordering_next[ins] += 1;
                    progressed = true;
                }
            }
            // Execute.
            let mut outcomes: Vec<TxOutcome> = Vec::new();
            self.exec
                .drain(&self.plogs, &self.glog, &self.part, ctx.now(), &mut outcomes)
                .map_err(|e| ReplicaError::Execution { replica: self.id, source: e })?;
            for outcome in &outcomes {
                progressed = true;
                self.note_outcome(outcome, ctx);
            }
            // Re-check candidates that were waiting for coverage.
            for ins in 0..self.cfg.m {
                let waiting: Vec<SeqNum> = self.sb[ins]
                    .slots
                    .iter()
                    .filter(|(_, s)| s.awaiting_coverage)
                    .map(|(sn, _)| *sn)
                    .collect();
                for sn in waiting {
                    let before = self.sb[ins].slots.get(&sn).map_or(false, |s| s.awaiting_coverage);
                    self.try_validate_slot(ins, sn, ctx)?;
                    let after = self.sb[ins].slots.get(&sn).map_or(false, |s| s.awaiting_coverage);
                    if before && !after {
                        progressed = true;
                    }
                }
            }
            if !progressed {
                break;
            }
        }
        self.try_close_epochs(ctx)
    }

    fn note_outcome(&mut self, outcome: &TxOutcome, ctx: &mut impl ReplicaCtx) {
        let client = self.tx_client(&outcome.tx);
        ctx.reply(client, outcome.tx.id, outcome.status);
        ctx.trace(TraceEvent::Confirmed {
            tx: Arc::clone(&outcome.tx),
            status: outcome.status,
            path: outcome.path,
        });
        if let Some(epochs) = self.tx_epochs.remove(&outcome.tx.id) {
            for epoch in epochs {
                *self.epoch_undecided.entry(epoch).or_insert(0) -= 1;
                self.undecided_pairs -= 1;
            }
        }
        // Aborted transactions must stop occupying buckets anywhere.
        for ins in self.part.route(&outcome.tx, &self.exec.store) {
            self.buckets[ins].mark_delivered(outcome.tx.id);
        }
    }

    // -----------------------------------------------------------------
    // Failure detector and view changes
    // -----------------------------------------------------------------

    fn mark_progress(&mut self, ins: InstanceId, now: TimeNs) {
        self.last_progress[ins] = now;
    }

    /// Arm the liveness watchdog for an instance if not already pending.
    fn arm_progress_timer(&mut self, ins: InstanceId, ctx: &mut impl ReplicaCtx) {
        if self.sb[ins].timer_armed || self.is_leader(ins) {
            return;
        }
        self.sb[ins].timer_armed = true;
        let generation = self.sb[ins].timer_generation;
        let view = self.sb[ins].view;
        ctx.set_timer(self.cfg.view_change_timeout, TimerKind::Progress { ins, view, generation });
    }

    fn on_progress_timer(
        &mut self,
        ins: InstanceId,
        view: u64,
        generation: u64,
        ctx: &mut impl ReplicaCtx,
    ) -> Result<(), ReplicaError> {
        if self.sb[ins].view != view || self.sb[ins].timer_generation != generation {
            return Ok(());
        }
        self.sb[ins].timer_armed = false;
        if !self.expects_progress(ins) {
            return Ok(());
        }
        if ctx.now().saturating_sub(self.last_progress[ins]) >= self.cfg.view_change_timeout {
            self.raise_suspicion(ins, Evidence::Timeout, None, ctx)?;
        } else {
            self.arm_progress_timer(ins, ctx);
        }
        Ok(())
    }

    /// Would the current leader of `ins` be allowed to propose its next
    /// sequence number, as judged from this replica's frontiers? Leaders
    /// blocked by the epoch gate are not suspected.
    fn epoch_gate_open(&self, ins: InstanceId) -> bool {
        let next = self.plogs[ins].contiguous_max().map_or(0, |sn| sn + 1);
        let e = epoch_of(next, self.cfg.epoch_len);
        if e == 0 {
            return true;
        }
        let boundary = epoch_last_sn(e - 1, self.cfg.epoch_len);
        self.plogs
            .iter()
            .all(|p| p.contiguous_max().map_or(false, |max| max >= boundary))
    }

    /// The leader of `ins` owes the system progress: its bucket holds work,
    /// a slot is mid-consensus, or outstanding global work exists while the
    /// instance trails the rest (a live leader keeps pace with keep-alive
    /// blocks).
    fn expects_progress(&self, ins: InstanceId) -> bool {
        if !self.epoch_gate_open(ins) {
            return false;
        }
        if self.buckets[ins].has_pending()
            || self.sb[ins].slots.values().any(|s| s.block.is_some() && !s.delivered)
        {
            return true;
        }
        if !self.keepalive_needed() {
            return false;
        }
        let frontier = |i: InstanceId| self.plogs[i].contiguous_max().map_or(0, |sn| sn + 1);
        let pack = (0..self.cfg.m).map(frontier).max().unwrap_or(0);
        frontier(ins) < pack
    }

    fn on_coverage_timer(
        &mut self,
        ins: InstanceId,
        sn: SeqNum,
        view: u64,
        ctx: &mut impl ReplicaCtx,
    ) -> Result<(), ReplicaError> {
        if self.sb[ins].view != view {
            return Ok(());
        }
        let still_waiting = self.sb[ins]
            .slots
            .get(&sn)
            .map_or(false, |s| s.awaiting_coverage && !s.delivered);
        if still_waiting {
            // The referenced state never materialized: the leader pointed at
            // blocks nobody can produce.
            self.raise_suspicion(ins, Evidence::MissingBlock, None, ctx)?;
        }
        Ok(())
    }

    /// Periodic sweep of the failure detector: censorship windows plus the
    /// timeout condition for instances that owe progress but have no armed
    /// watchdog (a leader that went silent with an empty bucket still gets
    /// caught here).
    fn detector_scan(&mut self, ctx: &mut impl ReplicaCtx) -> Result<(), ReplicaError> {
        let now = ctx.now();
        for ins in 0..self.cfg.m {
            if self.is_leader(ins) || !self.epoch_gate_open(ins) {
                continue;
            }
            if let Some(arrived) = self.buckets[ins].oldest_pending_arrival() {
                if now.saturating_sub(arrived) >= self.cfg.censorship_window {
                    let tx = self.buckets[ins].oldest_pending_tx();
                    self.raise_suspicion(ins, Evidence::Censorship, tx, ctx)?;
                }
            }
            if self.expects_progress(ins)
                && now.saturating_sub(self.last_progress[ins]) >= self.cfg.view_change_timeout
            {
                self.raise_suspicion(ins, Evidence::Timeout, None, ctx)?;
            }
        }
        Ok(())
    }

    fn raise_suspicion(
        &mut self,
        ins: InstanceId,
        evidence: Evidence,
        tx: Option<Arc<Transaction>>,
        ctx: &mut impl ReplicaCtx,
    ) -> Result<(), ReplicaError> {
        let view = self.sb[ins].view;
        if !self.sb[ins].suspicion_sent.insert(view) {
            return Ok(());
        }
        ctx.trace(TraceEvent::SuspicionRaised { ins, view, evidence });
        ctx.broadcast(Message::Suspicion { ins, view, evidence, tx });
        let count = self.sb[ins].record_suspicion(view, self.id);
        if count >= self.cfg.quorum() {
            self.start_view_change(ins, view + 1, ctx)?;
        }
        Ok(())
    }

    fn on_suspicion(
        &mut self,
        from: ReplicaId,
        ins: InstanceId,
        view: u64,
        evidence: Evidence,
        tx: Option<Arc<Transaction>>,
        ctx: &mut impl ReplicaCtx,
    ) -> Result<(), ReplicaError> {
        if view < self.sb[ins].view {
            return Ok(());
        }
        let count = self.sb[ins].record_suspicion(view, from);
        // Censorship evidence carries the starved transaction so replicas
        // that never received it can verify and join.
        if evidence == Evidence::Censorship && view == self.sb[ins].view {
            if let Some(tx) = tx {
                if validate_tx(&tx, &self.exec.store)
                    && self.part.route(&tx, &self.exec.store).contains(&ins)
                    && !self.stepped.contains(&(tx.id, ins))
                {
                    self.buckets[ins].push(Arc::clone(&tx), ctx.now());
                    self.raise_suspicion(ins, Evidence::Censorship, Some(tx), ctx)?;
                }
            }
        }
        if count >= self.cfg.quorum() && view == self.sb[ins].view {
            self.start_view_change(ins, view + 1, ctx)?;
        }
        Ok(())
    }

    fn start_view_change(
        &mut self,
        ins: InstanceId,
        new_view: u64,
        ctx: &mut impl ReplicaCtx,
    ) -> Result<(), ReplicaError> {
        if new_view <= self.sb[ins].view {
            return Ok(());
        }
        // Proposals of the old view die; their transactions go back to the
        // bucket.
        let dead: Vec<SeqNum> = self.in_flight[ins].keys().copied().collect();
        for sn in dead {
            if let Some(proposal) = self.in_flight[ins].remove(&sn) {
                for tx in proposal.txs {
                    self.buckets[ins].release(tx.id);
                }
                for (key, amount) in proposal.decrements {
                    if let Some(held) = self.in_flight_decr.get_mut(&key) {
                        *held -= amount;
                        if *held <= 0 {
                            self.in_flight_decr.remove(&key);
                        }
                    }
                }
            }
        }
        self.sb[ins].enter_view(new_view);
        self.mark_progress(ins, ctx.now());
        ctx.trace(TraceEvent::ViewChanged { ins, view: new_view });
        let data = ViewChangeData {
            last_delivered: self.plogs[ins].contiguous_max(),
            prepared: self.sb[ins].prepared_summary(self.cfg.quorum()),
        };
        ctx.broadcast(Message::ViewChange {
            ins,
            new_view,
            last_delivered: data.last_delivered,
            prepared: data.prepared.clone(),
        });
        self.sb[ins].view_changes.entry(new_view).or_default().insert(self.id, data);
        // Re-forward pending transactions to the incoming leader.
        let leader = leader_of(ins, new_view, self.cfg.n);
        if leader != self.id {
            for tx in self.buckets[ins].pending_txs() {
                ctx.send(leader, Message::Submit { tx });
            }
            self.arm_progress_timer(ins, ctx);
        }
        self.try_install_new_view(ins, new_view, ctx)?;
        // Replay messages that arrived for this view early.
        if let Some(msgs) = self.pending_view_msgs.remove(&(ins, new_view)) {
            for (from, msg) in msgs {
                self.on_message(from, msg, ctx)?;
            }
        }
        // The quorum for the freshly entered view may already be on record.
        if self.sb[ins].suspicions.get(&new_view).map_or(0, |s| s.len()) >= self.cfg.quorum() {
            self.start_view_change(ins, new_view + 1, ctx)?;
        }
        Ok(())
    }

    fn on_view_change_msg(
        &mut self,
        from: ReplicaId,
        ins: InstanceId,
        new_view: u64,
        data: ViewChangeData,
        ctx: &mut impl ReplicaCtx,
    ) -> Result<(), ReplicaError> {
        if new_view < self.sb[ins].view {
            return Ok(());
        }
        self.sb[ins].view_changes.entry(new_view).or_default().insert(from, data);
        self.try_install_new_view(ins, new_view, ctx)
    }

    /// The incoming leader assembles the new view from a 2f+1 view-change
    /// quorum: re-propose prepared blocks (a contiguous run), then continue
    /// with fresh proposals.
    fn try_install_new_view(
        &mut self,
        ins: InstanceId,
        new_view: u64,
        ctx: &mut impl ReplicaCtx,
    ) -> Result<(), ReplicaError> {
        if leader_of(ins, new_view, self.cfg.n) != self.id
            || self.sb[ins].view != new_view
            || self.sb[ins].new_view_installed.contains(&new_view)
        {
            return Ok(());
        }
        let quorum = self.cfg.quorum();
        let Some(changes) = self.sb[ins].view_changes.get(&new_view) else { return Ok(()) };
        if changes.len() < quorum {
            return Ok(());
        }
        let start_sn = changes
            .values()
            .filter_map(|d| d.last_delivered)
            .max()
            .map_or(0, |sn| sn + 1);
        // Highest-view prepared block per sequence number.
        let mut prepared: BTreeMap<SeqNum, (u64, Arc<Block>)> = BTreeMap::new();
        for data in changes.values() {
            for (view, block) in &data.prepared {
                let entry = prepared.entry(block.sn).or_insert((*view, Arc::clone(block)));
                if *view > entry.0 {
                    *entry = (*view, Arc::clone(block));
                }
            }
        }
        let mut reproposals = Vec::new();
        let mut sn = start_sn;
        while let Some((_, block)) = prepared.get(&sn) {
            reproposals.push(Arc::clone(block));
            sn += 1;
        }
        self.sb[ins].new_view_installed.insert(new_view);
        ctx.broadcast(Message::NewView {
            ins,
            new_view,
            start_sn,
            reproposals: reproposals.clone(),
        });
        self.install_new_view(ins, new_view, start_sn, reproposals, ctx)?;
        ctx.set_timer(self.cfg.batch_timeout, TimerKind::Batch { ins });
        Ok(())
    }

    fn on_new_view(
        &mut self,
        from: ReplicaId,
        ins: InstanceId,
        new_view: u64,
        start_sn: SeqNum,
        reproposals: Vec<Arc<Block>>,
        ctx: &mut impl ReplicaCtx,
    ) -> Result<(), ReplicaError> {
        if from != leader_of(ins, new_view, self.cfg.n) || new_view < self.sb[ins].view {
            return Ok(());
        }
        if new_view > self.sb[ins].view {
            self.pending_view_msgs
                .entry((ins, new_view))
                .or_default()
                .push((from, Message::NewView { ins, new_view, start_sn, reproposals }));
            return Ok(());
        }
        self.install_new_view(ins, new_view, start_sn, reproposals, ctx)
    }

    fn install_new_view(
        &mut self,
        ins: InstanceId,
        new_view: u64,
        start_sn: SeqNum,
        reproposals: Vec<Arc<Block>>,
        ctx: &mut impl ReplicaCtx,
    ) -> Result<(), ReplicaError> {
        self.mark_progress(ins, ctx.now());
        let leading = self.is_leader(ins);
        if leading {
            self.next_propose_sn[ins] = start_sn + reproposals.len() as u64;
        }
        for block in reproposals {
            if leading {
                // Reserve the re-proposed transactions and account their
                // decrements in the pull projection.
                let mut decrements = Vec::new();
                for tx in &block.txs {
                    self.buckets[ins].reserve(tx.id);
                    if block.forced.contains(&tx.id) {
                        continue;
                    }
                    for op in tx.payer_ops(&self.exec.store) {
                        if self.part.assign(&op.target) == ins {
                            *self.in_flight_decr.entry(op.target.clone()).or_insert(0) +=
                                op.amount;
                            decrements.push((op.target.clone(), op.amount));
                        }
                    }
                }
                self.in_flight[ins]
                    .insert(block.sn, InFlightProposal { txs: block.txs.clone(), decrements });
                self.rank.observe(block.rank);
                match self.cfg.engine {
                    SbEngine::Ideal => ctx.broadcast(Message::Candidate {
                        ins,
                        view: new_view,
                        block: Arc::clone(&block),
                    }),
                    SbEngine::Pbft => ctx.broadcast(Message::PrePrepare {
                        ins,
                        view: new_view,
                        block: Arc::clone(&block),
                    }),
                }
            }
            let leader = leader_of(ins, new_view, self.cfg.n);
            self.on_candidate(leader, ins, new_view, block, ctx)?;
        }
        Ok(())
    }

    // -----------------------------------------------------------------
    // Checkpoints and garbage collection
    // -----------------------------------------------------------------

    fn epoch_complete(&self, epoch: Epoch) -> bool {
        let boundary = epoch_last_sn(epoch, self.cfg.epoch_len);
        let delivered = self
            .plogs
            .iter()
            .all(|p| p.contiguous_max().map_or(false, |max| max >= boundary));
        delivered && self.epoch_undecided.get(&epoch).copied().unwrap_or(0) == 0
    }

    fn try_close_epochs(&mut self, ctx: &mut impl ReplicaCtx) -> Result<(), ReplicaError> {
        loop {
            let next = self.emitted_epochs.iter().next_back().map_or(0, |e| e + 1);
            if !self.epoch_complete(next) {
                return Ok(());
            }
            let digest = self.compute_epoch_digest(next)?;
            self.emitted_epochs.insert(next);
            ctx.trace(TraceEvent::CheckpointEmitted { epoch: next, digest });
            ctx.broadcast(Message::Checkpoint { epoch: next, digest });
            self.on_checkpoint(self.id, next, digest, ctx)?;
        }
    }

    fn compute_epoch_digest(&self, epoch: Epoch) -> Result<crate::domain::Digest, ReplicaError> {
        if !self.epoch_complete(epoch) {
            return Err(ReplicaError::PrematureCheckpoint { replica: self.id, epoch });
        }
        let epoch_len = self.cfg.epoch_len;
        let first = epoch * epoch_len;
        let mut blocks = Vec::new();
        for (ins, plog) in self.plogs.iter().enumerate() {
            for sn in first..=epoch_last_sn(epoch, epoch_len) {
                let block = plog.get(sn).expect("epoch complete implies block present");
                blocks.push((ins, sn, block.digest()));
            }
        }
        let statuses = self
            .epoch_txs
            .get(&epoch)
            .into_iter()
            .flatten()
            .map(|id| (*id, self.exec.record(*id).expect("decided").status));
        Ok(epoch_digest(epoch, blocks, statuses))
    }

    fn on_checkpoint(
        &mut self,
        from: ReplicaId,
        epoch: Epoch,
        digest: crate::domain::Digest,
        ctx: &mut impl ReplicaCtx,
    ) -> Result<(), ReplicaError> {
        let msg = CheckpointMsg { epoch, digest, signer: from };
        if let Some(stable) = self.checkpoints.record(msg, self.cfg.quorum()) {
            ctx.trace(TraceEvent::CheckpointStable { epoch: stable.epoch });
        }
        self.maybe_gc(ctx);
        Ok(())
    }

    /// Discard protocol state for epochs at or below the latest stable
    /// checkpoint that this replica has itself completed.
    fn maybe_gc(&mut self, ctx: &mut impl ReplicaCtx) {
        loop {
            let next = self.gc_through.map_or(0, |e| e + 1);
            if self.checkpoints.stable(next).is_none() || !self.emitted_epochs.contains(&next) {
                return;
            }
            let retained_before = self.memory_footprint();
            let boundary = epoch_last_sn(next, self.cfg.epoch_len);
            let mut decided: BTreeSet<TxId> = BTreeSet::new();
            if let Some(txs) = self.epoch_txs.remove(&next) {
                for id in txs {
                    // Transactions still tracked by a later epoch keep their
                    // bookkeeping.
                    if self.tx_epochs.contains_key(&id) {
                        self.epoch_txs.entry(next).or_default().insert(id);
                        continue;
                    }
                    decided.insert(id);
                }
            }
            for plog in &mut self.plogs {
                plog.prune_through(boundary);
            }
            for sb in &mut self.sb {
                sb.prune_slots_below(boundary + 1);
            }
            for bucket in &mut self.buckets {
                bucket.gc(&decided);
            }
            self.exec.gc(&decided);
            self.stepped.retain(|(id, _)| !decided.contains(id));
            self.epoch_undecided.remove(&next);
            self.gc_through = Some(next);
            ctx.trace(TraceEvent::GarbageCollected {
                epoch: next,
                retained_before,
                retained_after: self.memory_footprint(),
            });
        }
    }

}
