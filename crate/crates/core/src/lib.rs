//! Deterministic simulation core for a one-sided-fabric inference dataplane.
//!
//! The crate models, at desk scale, a distributed content-generation service
//! whose nodes communicate exclusively through one-sided remote memory
//! operations (read, write, compare-and-swap) on registered regions:
//!
//! * [`fabric`] — the abstract memory fabric: registered regions, a
//!   deterministic op scheduler, and a fault injector (drop / delay /
//!   reorder) standing in for the real network.
//! * [`ringbuf`] — a multi-producer / single-consumer ring buffer for
//!   variable-size entries built purely from fabric ops, with a CAS spinlock,
//!   timeout-based lock steal, a busy-bit size region, and checksum-based
//!   corruption detection. Recovery behaviour is replayable action-by-action
//!   from scripted interleavings.
//! * [`message`] — the wire codec for workflow messages (fixed 40-byte
//!   header + opaque payload) and the CRC-32 checksum used for ring entries.
//! * [`pipeline`] — instance-sizing math for two-stage pipelines and the
//!   proxy-side admission token bucket (exact rational arithmetic).
//! * [`workflow`] — the workflow-instance actor: task manager, request
//!   scheduler (individual / collaboration modes), timed task workers, and
//!   round-robin result delivery.
//! * [`nodemanager`] — the replicated coordinator: instance registry,
//!   utilization-driven rebalancing with an idle pool, route resolution with
//!   instance sharing, and single-decree ballot-based leader election.
//! * [`dbstore`] — the memory-centric result store: TTL purge, fetch-once
//!   semantics, and asynchronous replication.
//! * [`sim`] — the discrete-event world that wires all of the above into
//!   end-to-end scenarios and produces reproducible run reports.
//!
//! Everything is driven by an integer tick clock and seeded RNGs; two runs
//! with the same inputs produce identical event logs, reports, and region
//! contents. The crate is `no_std` (alloc required); file formats, the CLI,
//! and exports live in the companion `ringflow` crate.

#![cfg_attr(not(any(test, feature = "std")), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

pub mod dbstore;
pub mod fabric;
pub mod message;
pub mod nodemanager;
pub mod pipeline;
pub mod ringbuf;
pub mod sim;
pub mod workflow;

/// Simulated time: a discrete tick counter. All durations and timeouts are
/// tick counts.
pub type Tick = u64;

/// Identifies a node (machine) on the fabric. Id 0 is reserved so that a
/// zeroed lock word can never be confused with a held lock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NodeId(pub u16);

impl core::fmt::Display for NodeId {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "n{}", self.0)
    }
}
