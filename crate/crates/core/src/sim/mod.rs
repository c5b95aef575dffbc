//! Deterministic discrete-event simulation of a full cluster.
//!
//! Replicas, clients, and the network are advanced by a single
//! time-plus-sequence ordered event queue; identical (config, seed) pairs
//! replay the exact same event sequence. The simulator also hosts the
//! global online assertions (delivery and rank agreement across honest
//! replicas) and assembles the oracle verdicts at the end of a run.

pub mod config;
pub mod network;
pub mod presets;
pub mod workload;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::fs;
use std::io;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::domain::{
    Digest, DigestWriter, ObjectKey, ObjectType, ReplicaId, TimeNs, Transaction, TxId,
};
use crate::execution::ConfirmationStatus;
use crate::metrics::{Recorder, RunMetrics};
use crate::oracle::{
    balance_formula, compare_replicas, replay_glog_shared, OracleReport, ReplicaSnapshot,
};
use crate::partition::Partitioner;
use crate::replica::{
    FaultBehavior, Replica, ReplicaConfig, ReplicaCtx, ReplicaError, TimerKind, TraceEvent,
};
use crate::sb::Message;
use config::{ScenarioConfig, MS};
use network::{NetworkModel, Node};
use workload::Workload;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("{source}\nrecent events:\n{trace}")]
    Replica { source: ReplicaError, trace: String },
    #[error("agreement violated at instance {ins} sn {sn}: {left} vs {right} (replica {replica})\nrecent events:\n{trace}")]
    Agreement { ins: usize, sn: u64, left: Digest, right: Digest, replica: ReplicaId, trace: String },
    #[error("config: {0}")]
    Config(#[from] config::ConfigError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone)]
enum Payload {
    Net { from: Node, msg: Message },
    Timer { kind: TimerKind },
    Submit { tx: Arc<Transaction> },
    Reply { tx: TxId, status: ConfirmationStatus, from: ReplicaId },
}

struct QueuedEvent {
    time: TimeNs,
    seq: u64,
    target: Node,
    payload: Payload,
}

impl PartialEq for QueuedEvent {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}
impl Eq for QueuedEvent {}
impl PartialOrd for QueuedEvent {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for QueuedEvent {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

/// Effects collected from one replica handler invocation, applied by the
/// simulator afterwards.
struct EffectBuf {
    now: TimeNs,
    sends: Vec<(ReplicaId, Message)>,
    broadcasts: Vec<Message>,
    replies: Vec<(ObjectKey, TxId, ConfirmationStatus)>,
    timers: Vec<(TimeNs, TimerKind)>,
    traces: Vec<TraceEvent>,
}

impl EffectBuf {
    fn new(now: TimeNs) -> Self {
        EffectBuf {
            now,
            sends: Vec::new(),
            broadcasts: Vec::new(),
            replies: Vec::new(),
            timers: Vec::new(),
            traces: Vec::new(),
        }
    }
}

impl ReplicaCtx for EffectBuf {
    fn now(&self) -> TimeNs {
        self.now
    }
    fn send(&mut self, to: ReplicaId, msg: Message) {
        self.sends.push((to, msg));
    }
    fn broadcast(&mut self, msg: Message) {
        self.broadcasts.push(msg);
    }
    fn reply(&mut self, client: ObjectKey, tx: TxId, status: ConfirmationStatus) {
        self.replies.push((client, tx, status));
    }
    fn set_timer(&mut self, delay: TimeNs, kind: TimerKind) {
        self.timers.push((delay, kind));
    }
    fn trace(&mut self, event: TraceEvent) {
        self.traces.push(event);
    }
}

#[derive(Default)]
struct ClientTxState {
    replies: BTreeMap<u8, BTreeSet<ReplicaId>>,
    confirmed: bool,
}

fn status_tag(status: ConfirmationStatus) -> u8 {
    match status {
        ConfirmationStatus::Pending => 0,
        ConfirmationStatus::ConfirmedSuccess => 1,
        ConfirmationStatus::ConfirmedAbort => 2,
    }
}

fn client_node(key: &ObjectKey) -> Node {
    let mut w = DigestWriter::new();
    w.str(key.as_str());
    Node::Client(w.finish().0)
}

/// Result of one simulated run.
pub struct RunResult {
    pub config: ScenarioConfig,
    pub seed: u64,
    pub metrics: RunMetrics,
    pub oracle: OracleReport,
    pub all_confirmed: bool,
    pub completion: TimeNs,
    pub snapshots: Vec<ReplicaSnapshot>,
    pub noop_fills: u64,
    /// Every delivered block (rank, instance, sn, needs a global position).
    pub delivered_blocks: Vec<(u64, usize, u64, bool)>,
    /// Final global logs of the honest replicas, in confirmation order.
    pub glogs: Vec<Vec<(u64, usize, u64)>>,
    pub debug: Vec<String>,
}

impl RunResult {
    pub fn debug_info(&self) -> &[String] {
        &self.debug
    }

    pub fn passed(&self) -> bool {
        self.oracle.passed()
    }

    /// Write metrics, verdicts, and the resolved configuration into a
    /// directory.
    pub fn write_outputs(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        let bucket = self.config.scenario.throughput_bucket_ms * MS;
        self.metrics.write_files(dir, bucket)?;
        self.oracle.write(&dir.join("verdicts.txt"))?;
        fs::write(dir.join("config.toml"), self.config.to_toml())?;
        fs::write(dir.join("seed.txt"), format!("{}\n", self.seed))?;
        Ok(())
    }
}

/// Run one scenario from its configuration and seed.
pub fn run_scenario(cfg: &ScenarioConfig, seed: u64) -> Result<RunResult, SimError> {
    let workload = workload::generate(&cfg.workload, seed);
    run_with_workload(cfg, seed, workload)
}

/// Run with an externally supplied transaction list (trace replay or
/// hand-built fixtures).
pub fn run_with_workload(
    cfg: &ScenarioConfig,
    seed: u64,
    workload: Workload,
) -> Result<RunResult, SimError> {
    cfg.validate()?;
    Sim::new(cfg.clone(), seed, workload).run()
}

struct Sim {
    cfg: ScenarioConfig,
    seed: u64,
    replicas: Vec<Replica>,
    net: NetworkModel,
    rng: ChaCha8Rng,
    queue: BinaryHeap<Reverse<QueuedEvent>>,
    seq: u64,
    now: TimeNs,
    recorder: Recorder,
    clients: BTreeMap<TxId, ClientTxState>,
    client_nodes: BTreeMap<TxId, Node>,
    txs: Vec<Arc<Transaction>>,
    genesis_values: BTreeMap<ObjectKey, (i64, i64, ObjectType)>,
    honest: BTreeSet<ReplicaId>,
    delivered_map: BTreeMap<(usize, u64), (Digest, u64, bool)>,
    decided_counts: Vec<usize>,
    clients_confirmed: usize,
    recent: VecDeque<String>,
    horizon: TimeNs,
}

impl Sim {
    fn new(cfg: ScenarioConfig, seed: u64, workload: Workload) -> Self {
        let n = cfg.n();
        let m = cfg.m();
        let part = Partitioner::new(m);
        let fault_map: BTreeMap<ReplicaId, FaultBehavior> =
            cfg.faults.iter().map(|f| (f.replica, f.behavior)).collect();
        let honest: BTreeSet<ReplicaId> =
            (0..n).filter(|r| !fault_map.contains_key(r)).collect();
        let rcfg = ReplicaConfig {
            n,
            f: cfg.f(),
            m,
            epoch_len: cfg.scenario.epoch_length,
            engine: cfg.scenario.engine,
            mode: cfg.scenario.mode,
            batch_size: cfg.scenario.batch_size,
            batch_timeout: cfg.scenario.batch_timeout_ms * MS,
            view_change_timeout: cfg.scenario.view_change_timeout_ms * MS,
            censorship_window: cfg.censorship_window(),
            pull_force_after: cfg.scenario.pull_force_after_ms * MS,
        };
        let replicas: Vec<Replica> = (0..n)
            .map(|id| {
                Replica::new(
                    id,
                    rcfg.clone(),
                    part.clone(),
                    workload.genesis.clone(),
                    fault_map.get(&id).copied(),
                )
            })
            .collect();
        let types: BTreeMap<ObjectKey, ObjectType> = workload
            .genesis
            .iter()
            .map(|(k, o)| (k.clone(), o.kind))
            .collect();
        let genesis_values: BTreeMap<ObjectKey, (i64, i64, ObjectType)> = workload
            .genesis
            .iter()
            .map(|(k, o)| (k.clone(), (o.value, o.con, o.kind)))
            .collect();
        let recorder = Recorder::new(
            cfg.f(),
            part,
            types,
            honest.clone(),
            cfg.scenario.trace_messages,
        );
        let max_bytes = cfg.scenario.batch_size * cfg.workload.payload_bytes + 4096;
        let net = NetworkModel::new(cfg.network.clone(), max_bytes);
        let horizon = cfg.scenario.horizon_ms * MS;
        Sim {
            seed,
            replicas,
            net,
            rng: ChaCha8Rng::seed_from_u64(seed),
            queue: BinaryHeap::new(),
            seq: 0,
            now: 0,
            recorder,
            clients: BTreeMap::new(),
            client_nodes: BTreeMap::new(),
            txs: workload.txs,
            genesis_values,
            honest,
            delivered_map: BTreeMap::new(),
            decided_counts: vec![0; n],
            clients_confirmed: 0,
            recent: VecDeque::with_capacity(64),
            horizon,
            cfg,
        }
    }

    fn push_event(&mut self, time: TimeNs, target: Node, payload: Payload) {
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Reverse(QueuedEvent { time, seq, target, payload }));
    }

    fn note(&mut self, entry: String) {
        if self.recent.len() == 64 {
            self.recent.pop_front();
        }
        self.recent.push_back(entry);
    }

    fn trace_dump(&self) -> String {
        self.recent.iter().cloned().collect::<Vec<_>>().join("\n")
    }

    fn message_bytes(&self, msg: &Message) -> usize {
        let payload = self.cfg.workload.payload_bytes;
        match msg {
            Message::Submit { .. } => payload + 64,
            Message::Candidate { block, .. } | Message::PrePrepare { block, .. } => {
                block.txs.len() * payload + 128
            }
            Message::ViewChange { prepared, .. } => {
                prepared.iter().map(|(_, b)| b.txs.len() * payload + 128).sum::<usize>() + 128
            }
            Message::NewView { reproposals, .. } => {
                reproposals.iter().map(|b| b.txs.len() * payload + 128).sum::<usize>() + 128
            }
            _ => 128,
        }
    }

    fn run(mut self) -> Result<RunResult, SimError> {
        // Scripted fault activations.
        let faults = self.cfg.faults.clone();
        for fault in faults {
            self.push_event(
                fault.start_ms * MS,
                Node::Replica(fault.replica),
                Payload::Timer { kind: TimerKind::BehaviorStart },
            );
        }
        // Client submissions.
        let txs = self.txs.clone();
        for tx in &txs {
            let key = client_key(tx, &self.genesis_values);
            let node = client_node(&key);
            self.client_nodes.insert(tx.id, node);
            self.push_event(tx.submit_time, node, Payload::Submit { tx: Arc::clone(tx) });
        }
        // Replica initialization.
        for id in 0..self.replicas.len() {
            self.dispatch(id, |rep, ctx| {
                rep.init(ctx);
                Ok(())
            })?;
        }
        let total = self.txs.len();
        while let Some(Reverse(event)) = self.queue.pop() {
            if event.time > self.horizon {
                break;
            }
            self.now = event.time;
            self.handle_event(event)?;
            if self.clients_confirmed == total
                && self.honest.iter().all(|r| self.decided_counts[*r] == total)
            {
                break;
            }
        }
        self.finish()
    }

    fn handle_event(&mut self, event: QueuedEvent) -> Result<(), SimError> {
        match (event.target, event.payload) {
            (Node::Replica(id), Payload::Net { from, msg }) => {
                let from_id = match from {
                    Node::Replica(r) => r,
                    Node::Client(_) => usize::MAX,
                };
                self.note(format!(
                    "{} net {:?}->r{} {}",
                    self.now,
                    from,
                    id,
                    msg.phase()
                ));
                self.dispatch(id, |rep, ctx| rep.handle_message(from_id, msg, ctx))
            }
            (Node::Replica(id), Payload::Timer { kind }) => {
                self.dispatch(id, move |rep, ctx| rep.handle_timer(kind, ctx))
            }
            (Node::Client(_), Payload::Submit { tx }) => {
                self.recorder.on_submit(&tx, self.now);
                let n = self.cfg.n();
                let fanout = self.cfg.client_fanout();
                let start = {
                    let mut w = DigestWriter::new();
                    w.u64(tx.id.0);
                    (w.finish().0 % n as u64) as usize
                };
                let node = self.client_nodes[&tx.id];
                for k in 0..fanout {
                    let dst = (start + k) % n;
                    let delay = self.net.delay(
                        node,
                        Node::Replica(dst),
                        self.cfg.workload.payload_bytes + 64,
                        self.now,
                        &mut self.rng,
                    );
                    self.push_event(
                        self.now + delay,
                        Node::Replica(dst),
                        Payload::Net { from: node, msg: Message::Submit { tx: Arc::clone(&tx) } },
                    );
                }
                Ok(())
            }
            (Node::Client(_), Payload::Reply { tx, status, from }) => {
                let state = self.clients.entry(tx).or_default();
                if !state.confirmed {
                    let set = state.replies.entry(status_tag(status)).or_default();
                    set.insert(from);
                    if set.len() >= self.cfg.f() + 1 {
                        state.confirmed = true;
                        self.clients_confirmed += 1;
                        self.recorder.on_client_confirm(tx, status, self.now);
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn dispatch<Fx>(&mut self, id: ReplicaId, f: Fx) -> Result<(), SimError>
    where
        Fx: FnOnce(&mut Replica, &mut EffectBuf) -> Result<(), ReplicaError>,
    {
        let mut buf = EffectBuf::new(self.now);
        f(&mut self.replicas[id], &mut buf)
            .map_err(|source| SimError::Replica { source, trace: self.trace_dump() })?;
        self.apply_effects(id, buf)
    }

    fn apply_effects(&mut self, src: ReplicaId, buf: EffectBuf) -> Result<(), SimError> {
        let n = self.cfg.n();
        for event in &buf.traces {
            self.check_global(src, event)?;
            self.recorder.on_trace(src, event, self.now);
            match event {
                TraceEvent::Confirmed { .. } => self.decided_counts[src] += 1,
                _ => {}
            }
        }
        let mut outgoing: Vec<(ReplicaId, Message)> = Vec::new();
        for msg in buf.broadcasts {
            for dst in 0..n {
                if dst != src {
                    outgoing.push((dst, msg.clone()));
                }
            }
        }
        outgoing.extend(buf.sends);
        for (dst, msg) in outgoing {
            if dst >= n || dst == src {
                continue;
            }
            if !self.replicas[src].outgoing_allowed(&msg) {
                continue;
            }
            if !self.net.admit(src, dst, self.now) {
                self.recorder.dropped_messages += 1;
                continue;
            }
            let bytes = self.message_bytes(&msg);
            let delay =
                self.net
                    .delay(Node::Replica(src), Node::Replica(dst), bytes, self.now, &mut self.rng);
            if self.recorder.trace_messages {
                let line = format!(
                    "{} r{} r{} {} {} {} {}",
                    self.now,
                    src,
                    dst,
                    msg.instance().map_or(-1i64, |i| i as i64),
                    msg.phase(),
                    msg.sn().map_or(-1i64, |s| s as i64),
                    msg.digest().map_or_else(|| "-".to_string(), |d| d.to_string()),
                );
                self.recorder.on_message_line(line);
            }
            self.push_event(
                self.now + delay,
                Node::Replica(dst),
                Payload::Net { from: Node::Replica(src), msg },
            );
        }
        for (client, tx, status) in buf.replies {
            let node = client_node(&client);
            let delay =
                self.net.delay(Node::Replica(src), node, 128, self.now, &mut self.rng);
            self.push_event(self.now + delay, node, Payload::Reply { tx, status, from: src });
        }
        for (delay, kind) in buf.timers {
            self.push_event(self.now + delay.max(1), Node::Replica(src), Payload::Timer { kind });
        }
        Ok(())
    }

    /// Online cross-replica assertions over honest trace events.
    fn check_global(&mut self, src: ReplicaId, event: &TraceEvent) -> Result<(), SimError> {
        if !self.honest.contains(&src) {
            return Ok(());
        }
        if let TraceEvent::Delivered { ins, block } = event {
            let digest = block.digest();
            let global_all = self.cfg.scenario.mode == crate::execution::OrderingMode::GlobalAll;
            let needs_global = if global_all {
                !block.txs.is_empty()
            } else {
                block.txs.iter().any(|tx| tx.kind == crate::domain::TxKind::Contract)
            };
            let entry = self
                .delivered_map
                .entry((*ins, block.sn))
                .or_insert((digest, block.rank, needs_global));
            if entry.0 != digest || entry.1 != block.rank {
                return Err(SimError::Agreement {
                    ins: *ins,
                    sn: block.sn,
                    left: entry.0,
                    right: digest,
                    replica: src,
                    trace: self.trace_dump(),
                });
            }
        }
        Ok(())
    }

    fn finish(mut self) -> Result<RunResult, SimError> {
        let total = self.txs.len();
        let all_confirmed = self.clients_confirmed == total
            && self.honest.iter().all(|r| self.decided_counts[*r] == total);

        let mut report = OracleReport::default();
        report.record(
            "delivery_agreement",
            true,
            format!("{} delivered slots consistent", self.delivered_map.len()),
        );
        report.record(
            "liveness_all_confirmed",
            all_confirmed,
            format!(
                "{}/{} client-confirmed; honest decided {:?}",
                self.clients_confirmed,
                total,
                self.honest.iter().map(|r| self.decided_counts[*r]).collect::<Vec<_>>()
            ),
        );

        // Flatten honest replica state for the oracle.
        let snapshots: Vec<ReplicaSnapshot> = self
            .honest
            .iter()
            .map(|r| snapshot_of(&self.replicas[*r]))
            .collect();
        compare_replicas(&snapshots, &mut report);

        if let Some(first) = snapshots.first() {
            // Closed-form owned balances against the formula.
            let success: BTreeSet<TxId> = first.confirmed_success.clone();
            let mut formula_ok = true;
            let mut detail = String::from("ok");
            for (key, (initial, _, ty)) in &self.genesis_values {
                if *ty != ObjectType::Owned {
                    continue;
                }
                let expect = balance_formula(*initial, key, &self.txs, &success);
                let actual = first.values.get(key).copied().unwrap_or(i64::MIN);
                if expect != actual && formula_ok {
                    formula_ok = false;
                    detail = format!("{key}: formula {expect} vs replica {actual}");
                }
            }
            report.record("owned_balance_formula", formula_ok, detail);

            // Sequential global-log replay for shared values.
            let replica = &self.replicas[first.replica];
            let shared =
                replay_glog_shared(&self.genesis_values, replica.glog.entries(), &success, &mut report);
            let mut shared_ok = true;
            let mut detail = String::from("ok");
            for (key, expect) in &shared {
                let actual = first.values.get(key).copied().unwrap_or(i64::MIN);
                if *expect != actual && shared_ok {
                    shared_ok = false;
                    detail = format!("{key}: replay {expect} vs replica {actual}");
                }
            }
            report.record("shared_glog_replay", shared_ok, detail);

            // At quiescence nothing may stay escrowed.
            if all_confirmed {
                let elog_ok = snapshots.iter().all(|s| s.escrow_entries == 0);
                report.record(
                    "elog_empty_at_quiescence",
                    elog_ok,
                    format!(
                        "entries per honest replica: {:?}",
                        snapshots.iter().map(|s| s.escrow_entries).collect::<Vec<_>>()
                    ),
                );
            }
        }

        // Per-replica incremental invariants held throughout (conservation
        // and non-negativity are checked inside the execution engine); do a
        // final audit pass as well.
        let mut audit_ok = true;
        let mut audit_detail = String::from("ok");
        for r in &self.honest {
            let replica = &self.replicas[*r];
            if let Err(e) = replica.exec.store.audit_conditions() {
                audit_ok = false;
                audit_detail = format!("replica {}: {}", r, e);
                break;
            }
            if let Err(e) = replica.exec.check_conservation() {
                audit_ok = false;
                audit_detail = format!("replica {}: {}", r, e);
                break;
            }
        }
        report.record("value_conditions_and_conservation", audit_ok, audit_detail);

        let noop_fills: u64 = self
            .honest
            .iter()
            .map(|r| self.replicas[*r].noop_fill_count)
            .sum();

        // Global-ordering check: every honest global log is a prefix of the
        // brute-force (rank, instance) sort of all delivered blocks, and
        // every block that needed a global position got one everywhere.
        let delivered_blocks: Vec<(u64, usize, u64, bool)> = self
            .delivered_map
            .iter()
            .map(|((ins, sn), (_, rank, needs))| (*rank, *ins, *sn, *needs))
            .collect();
        let glogs: Vec<Vec<(u64, usize, u64)>> = self
            .honest
            .iter()
            .map(|r| {
                self.replicas[*r]
                    .glog
                    .entries()
                    .iter()
                    .map(|b| (b.rank, b.ins, b.sn))
                    .collect()
            })
            .collect();
        crate::oracle::check_global_order(&delivered_blocks, &glogs, &mut report);

        let mut debug = Vec::new();
        for tx in &self.txs {
            let confirmed = self
                .clients
                .get(&tx.id)
                .map_or(false, |c| c.confirmed);
            if !confirmed {
                for r in &self.honest {
                    debug.push(self.replicas[*r].debug_tx_state(tx.id));
                }
            }
        }
        self.recorder.dropped_messages += self.net.dropped;
        let metrics = self.recorder.finalize();
        let completion = metrics.completion_time();
        Ok(RunResult {
            config: self.cfg,
            seed: self.seed,
            metrics,
            oracle: report,
            all_confirmed,
            completion,
            snapshots,
            noop_fills,
            delivered_blocks,
            glogs,
            debug,
        })
    }
}

fn client_key(
    tx: &Transaction,
    types: &BTreeMap<ObjectKey, (i64, i64, ObjectType)>,
) -> ObjectKey {
    tx.ops
        .iter()
        .find(|op| {
            op.is_decrement()
                && types.get(&op.target).map(|(_, _, ty)| *ty == ObjectType::Owned).unwrap_or(false)
        })
        .map(|op| op.target.clone())
        .unwrap_or_else(|| ObjectKey::new("unknown"))
}

fn snapshot_of(replica: &Replica) -> ReplicaSnapshot {
    let mut confirmed_success = BTreeSet::new();
    let mut confirmed_abort = BTreeSet::new();
    for (id, record) in replica.exec.records() {
        match record.status {
            ConfirmationStatus::ConfirmedSuccess => {
                confirmed_success.insert(*id);
            }
            ConfirmationStatus::ConfirmedAbort => {
                confirmed_abort.insert(*id);
            }
            ConfirmationStatus::Pending => {}
        }
    }
    ReplicaSnapshot {
        replica: replica.id,
        values: replica.exec.store.iter().map(|(k, o)| (k.clone(), o.value)).collect(),
        confirmed_success,
        confirmed_abort,
        escrow_entries: replica.exec.elog.len(),
    }
}
