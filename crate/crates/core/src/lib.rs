//! Hybrid partial/global ordering Multi-BFT consensus with escrowed
//! payments, plus a deterministic discrete-event simulator and independent
//! correctness oracles.
//!
//! The protocol runs `m` sequenced-broadcast instances in parallel, one
//! leader each. Payment transactions confirm from per-instance partial logs
//! as soon as their escrows land; contract transactions confirm at their
//! position in a rank-merged global log. See the module docs for the moving
//! parts:
//!
//! - [`domain`]: objects, transactions, blocks, system states.
//! - [`partition`]: object-to-instance assignment and transaction buckets.
//! - [`sb`]: sequenced broadcast engines, failure detection, view changes.
//! - [`ordering`]: partial logs, rank assignment, dynamic global ordering.
//! - [`escrow`]: tentative decremental reservations with commit/abort.
//! - [`execution`]: the two execution paths and confirmation tracking.
//! - [`checkpoint`]: epoch checkpoints and garbage collection.
//! - [`replica`]: one replica's composed protocol state machine.
//! - [`sim`]: the deterministic event loop, network and fault models,
//!   workload generation, scenario configs.
//! - [`metrics`]: throughput and five-stage latency accounting.
//! - [`oracle`]: sequential re-execution and cross-replica comparison.

pub mod checkpoint;
pub mod domain;
pub mod escrow;
pub mod execution;
pub mod metrics;
pub mod oracle;
pub mod ordering;
pub mod partition;
pub mod replica;
pub mod sb;
pub mod sim;
