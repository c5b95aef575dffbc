//! Network model: per-link latency classes across regions, jitter, payload
//! cost, partial synchrony bounds, straggler slowdown, and the per-link
//! message-rate cap.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::domain::TimeNs;
use crate::sim::config::{NetworkSection, MS, US};

/// Endpoints of the simulated network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Node {
    Replica(usize),
    /// Clients are identified by a stable hash of their account key.
    Client(u64),
}

pub struct NetworkModel {
    cfg: NetworkSection,
    regions: usize,
    gst: TimeNs,
    /// Post-GST delivery bound for honest links, derived from the config.
    delta: TimeNs,
    /// Sliding-window message counters per (src, dst) replica link.
    rate: BTreeMap<(usize, usize), (TimeNs, u64)>,
    pub dropped: u64,
}

impl NetworkModel {
    /// `max_message_bytes` bounds the payload term inside the post-GST
    /// delivery bound.
    pub fn new(cfg: NetworkSection, max_message_bytes: usize) -> Self {
        let regions = cfg.regions.max(1);
        let gst = cfg.gst_ms * MS;
        let worst_base = cfg.intra_region_latency_us.max(cfg.inter_region_latency_us) * US;
        let worst = (worst_base as f64 * cfg.straggler_factor.max(1.0)) as TimeNs
            + cfg.jitter_us * US
            + cfg.per_byte_ns * max_message_bytes as TimeNs
            + 1;
        NetworkModel { regions, gst, delta: worst, rate: BTreeMap::new(), dropped: 0, cfg }
    }

    pub fn delta(&self) -> TimeNs {
        self.delta
    }

    pub fn gst(&self) -> TimeNs {
        self.gst
    }

    fn region_of(&self, node: Node) -> usize {
        match node {
            Node::Replica(r) => r % self.regions,
            Node::Client(c) => (c as usize) % self.regions,
        }
    }

    fn is_straggler(&self, node: Node) -> bool {
        matches!(node, Node::Replica(r) if Some(r) == self.cfg.straggler_replica)
    }

    /// One-way delay for a message of `bytes` sent at `now`. Deterministic
    /// given the rng state.
    pub fn delay(&self, src: Node, dst: Node, bytes: usize, now: TimeNs, rng: &mut ChaCha8Rng) -> TimeNs {
        let base = if self.region_of(src) == self.region_of(dst) {
            self.cfg.intra_region_latency_us * US
        } else {
            self.cfg.inter_region_latency_us * US
        };
        let mut delay = base;
        if self.is_straggler(src) || self.is_straggler(dst) {
            delay = (delay as f64 * self.cfg.straggler_factor) as TimeNs;
        }
        if self.cfg.jitter_us > 0 {
            delay += rng.random_range(0..=self.cfg.jitter_us) * US;
        }
        delay += bytes as TimeNs * self.cfg.per_byte_ns;
        if now < self.gst && self.cfg.pre_gst_extra_ms > 0 {
            delay += rng.random_range(0..=self.cfg.pre_gst_extra_ms) * MS;
        }
        debug_assert!(now < self.gst || delay <= self.delta, "post-GST delivery within delta");
        delay.max(1)
    }

    /// Enforce the per-link replica-to-replica rate cap. Returns false when
    /// the message must be dropped.
    pub fn admit(&mut self, src: usize, dst: usize, now: TimeNs) -> bool {
        let window = self.cfg.msg_rate_window_ms * MS;
        let slot = self.rate.entry((src, dst)).or_insert((now, 0));
        if now.saturating_sub(slot.0) >= window {
            *slot = (now, 0);
        }
        if slot.1 >= self.cfg.msg_rate_cap {
            self.dropped += 1;
            return false;
        }
        slot.1 += 1;
        true
    }
}
