//! Throughput and latency accounting.
//!
//! Latency is measured from client submission to the client holding f+1
//! matching replies, and broken into five stages: send (submit to first
//! replica receipt), preprocess (receipt to first proposal), partial
//! ordering (proposal to an f+1 delivery quorum of all the transaction's
//! blocks), global ordering (delivery quorum to an f+1 confirmation
//! quorum; zero by construction for partial-path transactions), and reply
//! (confirmation quorum to the client's f+1 replies). Stage durations sum
//! exactly to the end-to-end latency.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::Arc;

use crate::domain::{ObjectKey, ObjectType, ReplicaId, TimeNs, Transaction, TxId, TxKind};
use crate::execution::{ConfirmationStatus, ExecPath};
use crate::partition::Partitioner;
use crate::replica::TraceEvent;

/// Per-transaction stage timeline assembled during the run.
#[derive(Debug, Clone)]
pub struct TxTimeline {
    pub kind: TxKind,
    pub submit: TimeNs,
    pub route_len: usize,
    pub first_received: Option<TimeNs>,
    pub first_proposed: Option<TimeNs>,
    /// Per-replica times at which all routed blocks were delivered.
    pub delivered_at: Vec<TimeNs>,
    /// Per-replica confirmation times.
    pub confirmed_at: Vec<TimeNs>,
    pub confirmed_replicas: BTreeSet<ReplicaId>,
    /// Blocks delivered so far per replica (until route_len is reached).
    blocks_seen: BTreeMap<ReplicaId, usize>,
    pub path: Option<ExecPath>,
    pub status: Option<ConfirmationStatus>,
    pub client_confirm: Option<TimeNs>,
    pub client_status: Option<ConfirmationStatus>,
}

/// Final per-transaction stage durations, all in nanoseconds.
#[derive(Debug, Clone, Copy)]
pub struct StageBreakdown {
    pub send: TimeNs,
    pub preprocess: TimeNs,
    pub partial_order: TimeNs,
    pub global_order: TimeNs,
    pub reply: TimeNs,
    pub total: TimeNs,
}

#[derive(Debug, Clone)]
pub struct GlogRow {
    pub time: TimeNs,
    pub rank: u64,
    pub ins: usize,
    pub sn: u64,
    pub tx_count: usize,
}

/// Event sink during a run; finalized into [`RunMetrics`].
pub struct Recorder {
    f: usize,
    part: Partitioner,
    types: BTreeMap<ObjectKey, ObjectType>,
    honest: BTreeSet<ReplicaId>,
    glog_replica: ReplicaId,
    pub timelines: BTreeMap<TxId, TxTimeline>,
    pub glog_rows: Vec<GlogRow>,
    pub noop_fills: u64,
    pub view_changes: u64,
    pub suspicions: u64,
    pub dropped_messages: u64,
    pub checkpoints_stable: u64,
    pub sb_trace: Vec<String>,
    pub trace_messages: bool,
    /// (time, epoch) per garbage collection with footprints.
    pub gc_events: Vec<(TimeNs, u64, usize, usize)>,
    pub view_change_times: Vec<(TimeNs, usize, u64)>,
}

impl Recorder {
    pub fn new(
        f: usize,
        part: Partitioner,
        types: BTreeMap<ObjectKey, ObjectType>,
        honest: BTreeSet<ReplicaId>,
        trace_messages: bool,
    ) -> Self {
        let glog_replica = honest.iter().next().copied().unwrap_or(0);
        Recorder {
            f,
            part,
            types,
            honest,
            glog_replica,
            timelines: BTreeMap::new(),
            glog_rows: Vec::new(),
            noop_fills: 0,
            view_changes: 0,
            suspicions: 0,
            dropped_messages: 0,
            checkpoints_stable: 0,
            sb_trace: Vec::new(),
            trace_messages,
            gc_events: Vec::new(),
            view_change_times: Vec::new(),
        }
    }

    pub fn on_submit(&mut self, tx: &Arc<Transaction>, time: TimeNs) {
        let route_len = self.part.route(tx, &self.types).len();
        self.timelines.entry(tx.id).or_insert(TxTimeline {
            kind: tx.kind,
            submit: time,
            route_len,
            first_received: None,
            first_proposed: None,
            delivered_at: Vec::new(),
            confirmed_at: Vec::new(),
            confirmed_replicas: BTreeSet::new(),
            blocks_seen: BTreeMap::new(),
            path: None,
            status: None,
            client_confirm: None,
            client_status: None,
        });
    }

    pub fn on_trace(&mut self, replica: ReplicaId, event: &TraceEvent, time: TimeNs) {
        match event {
            TraceEvent::TxAccepted { tx } => {
                if let Some(t) = self.timelines.get_mut(&tx.id) {
                    t.first_received.get_or_insert(time);
                }
            }
            TraceEvent::Proposed { block, noop_fill, .. } => {
                if *noop_fill {
                    self.noop_fills += 1;
                }
                for tx in &block.txs {
                    if let Some(t) = self.timelines.get_mut(&tx.id) {
                        t.first_proposed.get_or_insert(time);
                    }
                }
            }
            TraceEvent::Delivered { block, .. } => {
                for tx in &block.txs {
                    if let Some(t) = self.timelines.get_mut(&tx.id) {
                        let seen = t.blocks_seen.entry(replica).or_insert(0);
                        *seen += 1;
                        if *seen == t.route_len {
                            t.delivered_at.push(time);
                        }
                    }
                }
            }
            TraceEvent::GlobalOrdered { block } => {
                if replica == self.glog_replica {
                    self.glog_rows.push(GlogRow {
                        time,
                        rank: block.rank,
                        ins: block.ins,
                        sn: block.sn,
                        tx_count: block.txs.len(),
                    });
                }
            }
            TraceEvent::Confirmed { tx, status, path } => {
                if let Some(t) = self.timelines.get_mut(&tx.id) {
                    if t.confirmed_replicas.insert(replica) {
                        t.confirmed_at.push(time);
                    }
                    if self.honest.contains(&replica) {
                        t.path.get_or_insert(*path);
                        t.status.get_or_insert(*status);
                    }
                }
            }
            TraceEvent::SuspicionRaised { .. } => self.suspicions += 1,
            TraceEvent::ViewChanged { ins, view } => {
                if self.honest.contains(&replica) {
                    self.view_changes += 1;
                    self.view_change_times.push((time, *ins, *view));
                }
            }
            TraceEvent::CheckpointEmitted { .. } => {}
            TraceEvent::CheckpointStable { .. } => {
                if replica == self.glog_replica {
                    self.checkpoints_stable += 1;
                }
            }
            TraceEvent::GarbageCollected { epoch, retained_before, retained_after } => {
                if replica == self.glog_replica {
                    self.gc_events.push((time, *epoch, *retained_before, *retained_after));
                }
            }
        }
    }

    pub fn on_client_confirm(&mut self, tx: TxId, status: ConfirmationStatus, time: TimeNs) {
        if let Some(t) = self.timelines.get_mut(&tx) {
            if t.client_confirm.is_none() {
                t.client_confirm = Some(time);
                t.client_status = Some(status);
            }
        }
    }

    pub fn on_message_line(&mut self, line: String) {
        if self.trace_messages {
            self.sb_trace.push(line);
        }
    }

    /// Number of honest replicas that confirmed every transaction.
    pub fn honest_fully_confirmed(&self, total: usize) -> bool {
        let mut counts: BTreeMap<ReplicaId, usize> = BTreeMap::new();
        for t in self.timelines.values() {
            for r in &t.confirmed_replicas {
                *counts.entry(*r).or_insert(0) += 1;
            }
        }
        self.honest.iter().all(|r| counts.get(r).copied().unwrap_or(0) == total)
    }

    pub fn all_clients_confirmed(&self) -> bool {
        self.timelines.values().all(|t| t.client_confirm.is_some())
    }

    pub fn finalize(self) -> RunMetrics {
        let f = self.f;
        let mut per_tx = BTreeMap::new();
        for (id, mut t) in self.timelines {
            t.delivered_at.sort_unstable();
            t.confirmed_at.sort_unstable();
            let breakdown = stage_breakdown(&t, f);
            per_tx.insert(id, (t, breakdown));
        }
        RunMetrics {
            per_tx,
            glog_rows: self.glog_rows,
            noop_fills: self.noop_fills,
            view_changes: self.view_changes,
            suspicions: self.suspicions,
            dropped_messages: self.dropped_messages,
            checkpoints_stable: self.checkpoints_stable,
            gc_events: self.gc_events,
            view_change_times: self.view_change_times,
            sb_trace: self.sb_trace,
        }
    }
}

fn kth_smallest(sorted: &[TimeNs], k: usize) -> Option<TimeNs> {
    sorted.get(k.checked_sub(1)?).copied()
}

/// Stage durations for one confirmed transaction; `None` while the client
/// quorum is incomplete.
fn stage_breakdown(t: &TxTimeline, f: usize) -> Option<StageBreakdown> {
    let client_confirm = t.client_confirm?;
    let received = t.first_received?;
    let proposed = t.first_proposed?;
    let confirm_q = kth_smallest(&t.confirmed_at, f + 1)?;
    let path = t.path?;
    // Partial-path transactions bypass global ordering entirely: their
    // partial-ordering stage runs through local confirmation.
    let (partial_end, global_order) = match path {
        ExecPath::Partial => (confirm_q, 0),
        ExecPath::Global => {
            let delivered_q = kth_smallest(&t.delivered_at, f + 1)?;
            (delivered_q, confirm_q.saturating_sub(delivered_q))
        }
    };
    Some(StageBreakdown {
        send: received - t.submit,
        preprocess: proposed.saturating_sub(received),
        partial_order: partial_end.saturating_sub(proposed),
        global_order,
        reply: client_confirm.saturating_sub(confirm_q),
        total: client_confirm - t.submit,
    })
}

/// Finalized metrics of one run.
pub struct RunMetrics {
    pub per_tx: BTreeMap<TxId, (TxTimeline, Option<StageBreakdown>)>,
    pub glog_rows: Vec<GlogRow>,
    pub noop_fills: u64,
    pub view_changes: u64,
    pub suspicions: u64,
    pub dropped_messages: u64,
    pub checkpoints_stable: u64,
    pub gc_events: Vec<(TimeNs, u64, usize, usize)>,
    pub view_change_times: Vec<(TimeNs, usize, u64)>,
    pub sb_trace: Vec<String>,
}

const NS_PER_SEC: f64 = 1e9;

impl RunMetrics {
    pub fn confirmed_count(&self) -> usize {
        self.per_tx.values().filter(|(t, _)| t.client_confirm.is_some()).count()
    }

    pub fn submitted_count(&self) -> usize {
        self.per_tx.len()
    }

    pub fn completion_time(&self) -> TimeNs {
        self.per_tx
            .values()
            .filter_map(|(t, _)| t.client_confirm)
            .max()
            .unwrap_or(0)
    }

    /// Mean end-to-end latency in nanoseconds over confirmed transactions
    /// matching the filter.
    pub fn mean_latency(&self, mut filter: impl FnMut(&TxTimeline) -> bool) -> Option<f64> {
        let mut sum = 0u128;
        let mut count = 0u64;
        for (t, b) in self.per_tx.values() {
            if let Some(b) = b {
                if filter(t) {
                    sum += u128::from(b.total);
                    count += 1;
                }
            }
        }
        if count == 0 {
            None
        } else {
            Some(sum as f64 / count as f64)
        }
    }

    pub fn mean_latency_by_kind(&self, kind: TxKind) -> Option<f64> {
        self.mean_latency(|t| t.kind == kind)
    }

    pub fn mean_stage(
        &self,
        stage: impl Fn(&StageBreakdown) -> TimeNs,
        mut filter: impl FnMut(&TxTimeline) -> bool,
    ) -> Option<f64> {
        let mut sum = 0u128;
        let mut count = 0u64;
        for (t, b) in self.per_tx.values() {
            if let Some(b) = b {
                if filter(t) {
                    sum += u128::from(stage(b));
                    count += 1;
                }
            }
        }
        if count == 0 {
            None
        } else {
            Some(sum as f64 / count as f64)
        }
    }

    fn latencies(&self, mut filter: impl FnMut(&TxTimeline) -> bool) -> Vec<TimeNs> {
        let mut v: Vec<TimeNs> = self
            .per_tx
            .values()
            .filter_map(|(t, b)| b.as_ref().filter(|_| filter(t)).map(|b| b.total))
            .collect();
        v.sort_unstable();
        v
    }

    fn percentile(sorted: &[TimeNs], p: f64) -> Option<TimeNs> {
        if sorted.is_empty() {
            return None;
        }
        let idx = ((sorted.len() as f64 - 1.0) * p).round() as usize;
        sorted.get(idx).copied()
    }

    /// Throughput time series: confirmed transactions per bucket.
    pub fn throughput_series(&self, bucket: TimeNs) -> Vec<(TimeNs, f64)> {
        let mut buckets: BTreeMap<u64, u64> = BTreeMap::new();
        let mut max_slot = 0;
        for (t, _) in self.per_tx.values() {
            if let Some(c) = t.client_confirm {
                let slot = c / bucket;
                *buckets.entry(slot).or_insert(0) += 1;
                max_slot = max_slot.max(slot);
            }
        }
        (0..=max_slot)
            .map(|slot| {
                let count = buckets.get(&slot).copied().unwrap_or(0);
                (slot * bucket, count as f64 / (bucket as f64 / NS_PER_SEC))
            })
            .collect()
    }

    pub fn throughput_csv(&self, bucket: TimeNs) -> String {
        let mut out = String::from("t_sec,tps\n");
        for (t, tps) in self.throughput_series(bucket) {
            let _ = writeln!(out, "{:.1},{:.3}", t as f64 / NS_PER_SEC, tps);
        }
        out
    }

    pub fn latency_csv(&self) -> String {
        let mut out = String::from(
            "tx_id,kind,path,status,send_ns,preprocess_ns,partial_order_ns,global_order_ns,reply_ns,total_ns\n",
        );
        for (id, (t, b)) in &self.per_tx {
            let Some(b) = b else { continue };
            let kind = match t.kind {
                TxKind::Payment => "payment",
                TxKind::Contract => "contract",
            };
            let path = t.path.map_or("-", |p| match p {
                ExecPath::Partial => "partial",
                ExecPath::Global => "global",
            });
            let status = t.client_status.map_or("-", |s| match s {
                ConfirmationStatus::ConfirmedSuccess => "success",
                ConfirmationStatus::ConfirmedAbort => "abort",
                ConfirmationStatus::Pending => "pending",
            });
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                id.0, kind, path, status, b.send, b.preprocess, b.partial_order, b.global_order,
                b.reply, b.total
            );
        }
        out
    }

    /// Confirmation stream: one row per transaction with absolute times.
    pub fn confirmations_csv(&self) -> String {
        let mut out = String::from("tx_id,kind,submit_ns,confirm_ns,status,path\n");
        for (id, (t, _)) in &self.per_tx {
            let kind = match t.kind {
                TxKind::Payment => "payment",
                TxKind::Contract => "contract",
            };
            let status = t.client_status.map_or("pending", |s| match s {
                ConfirmationStatus::ConfirmedSuccess => "success",
                ConfirmationStatus::ConfirmedAbort => "abort",
                ConfirmationStatus::Pending => "pending",
            });
            let path = t.path.map_or("-", |p| match p {
                ExecPath::Partial => "partial",
                ExecPath::Global => "global",
            });
            let confirm = t.client_confirm.map_or(String::from("-"), |c| c.to_string());
            let _ = writeln!(out, "{},{},{},{},{},{}", id.0, kind, t.submit, confirm, status, path);
        }
        out
    }

    pub fn glog_csv(&self) -> String {
        let mut out = String::from("t_sec,rank,instance,sn,tx_count\n");
        for row in &self.glog_rows {
            let _ = writeln!(
                out,
                "{:.6},{},{},{},{}",
                row.time as f64 / NS_PER_SEC,
                row.rank,
                row.ins,
                row.sn,
                row.tx_count
            );
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("key,value\n");
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{},{}", k, v);
        };
        put("submitted", self.submitted_count().to_string());
        put("confirmed", self.confirmed_count().to_string());
        let success = self
            .per_tx
            .values()
            .filter(|(t, _)| t.client_status == Some(ConfirmationStatus::ConfirmedSuccess))
            .count();
        put("confirmed_success", success.to_string());
        put(
            "confirmed_abort",
            (self.confirmed_count().saturating_sub(success)).to_string(),
        );
        put("completion_sec", format!("{:.6}", self.completion_time() as f64 / NS_PER_SEC));
        let groups: [(&str, Box<dyn Fn(&TxTimeline) -> bool>); 5] = [
            ("all", Box::new(|_: &TxTimeline| true)),
            ("payment", Box::new(|t: &TxTimeline| t.kind == TxKind::Payment)),
            ("contract", Box::new(|t: &TxTimeline| t.kind == TxKind::Contract)),
            ("path_partial", Box::new(|t: &TxTimeline| t.path == Some(ExecPath::Partial))),
            ("path_global", Box::new(|t: &TxTimeline| t.path == Some(ExecPath::Global))),
        ];
        for (name, filter) in groups {
            let sorted = self.latencies(&*filter);
            let mean = if sorted.is_empty() {
                0.0
            } else {
                sorted.iter().map(|v| *v as u128).sum::<u128>() as f64 / sorted.len() as f64
            };
            put(&format!("latency_mean_ms_{name}"), format!("{:.6}", mean / 1e6));
            put(
                &format!("latency_median_ms_{name}"),
                format!("{:.6}", Self::percentile(&sorted, 0.5).unwrap_or(0) as f64 / 1e6),
            );
            put(
                &format!("latency_p99_ms_{name}"),
                format!("{:.6}", Self::percentile(&sorted, 0.99).unwrap_or(0) as f64 / 1e6),
            );
        }
        for (name, stage) in [
            ("send", 0usize),
            ("preprocess", 1),
            ("partial_order", 2),
            ("global_order", 3),
            ("reply", 4),
        ] {
            let pick = move |b: &StageBreakdown| match stage {
                0 => b.send,
                1 => b.preprocess,
                2 => b.partial_order,
                3 => b.global_order,
                _ => b.reply,
            };
            let mean = self.mean_stage(pick, |_| true).unwrap_or(0.0);
            put(&format!("stage_mean_ms_{name}"), format!("{:.6}", mean / 1e6));
        }
        put("noop_fills", self.noop_fills.to_string());
        put("view_changes", self.view_changes.to_string());
        put("suspicions", self.suspicions.to_string());
        put("dropped_messages", self.dropped_messages.to_string());
        put("checkpoints_stable", self.checkpoints_stable.to_string());
        out
    }

    /// Write the metrics files into a directory, creating it if needed.
    pub fn write_files(&self, dir: &Path, throughput_bucket: TimeNs) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("throughput.csv"), self.throughput_csv(throughput_bucket))?;
        fs::write(dir.join("latency.csv"), self.latency_csv())?;
        fs::write(dir.join("confirmations.csv"), self.confirmations_csv())?;
        fs::write(dir.join("summary.csv"), self.summary_csv())?;
        fs::write(dir.join("glog.csv"), self.glog_csv())?;
        if !self.sb_trace.is_empty() {
            fs::write(dir.join("sb_trace.log"), self.sb_trace.join("\n") + "\n")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn timeline(kind: TxKind) -> TxTimeline {
        TxTimeline {
            kind,
            submit: 0,
            route_len: 1,
            first_received: Some(10),
            first_proposed: Some(30),
            delivered_at: vec![50, 60, 70, 80],
            confirmed_at: vec![55, 65, 75, 85],
            confirmed_replicas: BTreeSet::new(),
            blocks_seen: BTreeMap::new(),
            path: Some(ExecPath::Global),
            status: Some(ConfirmationStatus::ConfirmedSuccess),
            client_confirm: Some(100),
            client_status: Some(ConfirmationStatus::ConfirmedSuccess),
        }
    }

    #[test]
    fn stages_sum_to_total_for_global_path() {
        let t = timeline(TxKind::Contract);
        let b = stage_breakdown(&t, 1).unwrap();
        // f+1 = 2nd smallest: delivered 60, confirmed 65.
        assert_eq!(b.send, 10);
        assert_eq!(b.preprocess, 20);
        assert_eq!(b.partial_order, 30);
        assert_eq!(b.global_order, 5);
        assert_eq!(b.reply, 35);
        assert_eq!(b.send + b.preprocess + b.partial_order + b.global_order + b.reply, b.total);
    }

    #[test]
    fn partial_path_has_zero_global_stage() {
        let mut t = timeline(TxKind::Payment);
        t.path = Some(ExecPath::Partial);
        let b = stage_breakdown(&t, 1).unwrap();
        assert_eq!(b.global_order, 0);
        assert_eq!(b.send + b.preprocess + b.partial_order + b.reply, b.total);
    }

    #[test]
    fn unconfirmed_has_no_breakdown() {
        let mut t = timeline(TxKind::Payment);
        t.client_confirm = None;
        assert!(stage_breakdown(&t, 1).is_none());
    }
}
