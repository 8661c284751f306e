//! An abstract one-sided memory fabric with deterministic fault injection.
//!
//! Nodes register fixed-size memory regions and access them remotely through
//! read, write, and compare-and-swap operations, never involving the region
//! owner's CPU: owners learn of new data only by polling their own memory.
//!
//! Timing model: control operations (reads and [`Fabric::cas_now`]) execute
//! at issue and return their result to the issuer. Data operations
//! ([`Fabric::write`], [`Fabric::cas`]) are schedulable: a matching
//! [`FaultRule`] may drop them silently, delay them a fixed number of ticks,
//! or hold them until another tagged operation has applied. Undisturbed data
//! ops apply at issue. Pending ops apply in `(due tick, issue order)` order,
//! so identical `(seed, schedule, workload)` triples replay to identical
//! event logs and region contents.
//!
//! Every applied or dropped operation is appended to a totally ordered event
//! log, which is what the recovery and corruption analyses in the test
//! suites consume.

use alloc::vec::Vec;
use core::fmt;

use crate::{NodeId, Tick};

/// Identifies a registered region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RegionId(pub u32);

impl fmt::Display for RegionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Capability to address a registered region remotely.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionHandle {
    pub id: RegionId,
    /// Region length in bytes; all accesses must satisfy
    /// `offset + len <= length`.
    pub length: u64,
    /// Owning node. Only the owner may use the `local_*` accessors, and only
    /// the owner may host a consumer on the region.
    pub owner: NodeId,
}

/// Completion token for a schedulable operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct OpToken(pub u64);

/// Result of an applied compare-and-swap: whether it swapped and the word
/// observed immediately before the operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CasOutcome {
    pub swapped: bool,
    pub observed: u64,
}

/// Operation category, used by matchers and the event log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum OpKind {
    Read,
    Write,
    Cas,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FabricError {
    #[error("region length must be nonzero")]
    ZeroLength,
    #[error("unknown region {0}")]
    UnknownRegion(RegionId),
    #[error("access [{offset}, {offset}+{len}) out of bounds for region {region} of {length} bytes")]
    OutOfBounds {
        region: RegionId,
        offset: u64,
        len: u64,
        length: u64,
    },
    #[error("word access at offset {0} is not 8-byte aligned")]
    Misaligned(u64),
    #[error("node {node} does not own region {region}")]
    NotOwner { node: NodeId, region: RegionId },
}

/// What the scheduler does with a matched data operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultAction {
    /// Apply at issue (the default for unmatched ops).
    Deliver,
    /// Silently discard; the issuer is not told.
    Drop,
    /// Apply `d` ticks after issue.
    Delay(u64),
    /// Hold until the op carrying this tag has applied, then apply
    /// immediately after it. Leftovers apply at quiescent drain.
    ReorderAfter(u64),
}

/// Selects operations by issuer, kind, region, offset range, per-issuer
/// data-op index range, or caller tag. Empty fields match everything.
#[derive(Debug, Clone, Default)]
pub struct OpMatcher {
    pub issuer: Option<NodeId>,
    pub kind: Option<OpKind>,
    pub region: Option<RegionId>,
    /// Matches ops whose `[offset, offset+len)` intersects this range.
    pub offset_range: Option<(u64, u64)>,
    /// Half-open range over the issuer's data-op counter (0-based).
    pub op_index_range: Option<(u64, u64)>,
    pub tag: Option<u64>,
}

impl OpMatcher {
    fn matches(&self, meta: &OpMeta) -> bool {
        self.issuer.is_none_or(|n| n == meta.issuer)
            && self.kind.is_none_or(|k| k == meta.kind)
            && self.region.is_none_or(|r| r == meta.region)
            && self
                .offset_range
                .is_none_or(|(lo, hi)| meta.offset < hi && lo < meta.offset + meta.len.max(1))
            && self
                .op_index_range
                .is_none_or(|(lo, hi)| (lo..hi).contains(&meta.op_index))
            && self.tag.is_none_or(|t| t == meta.tag)
    }
}

/// One scheduling rule: first matching rule wins.
#[derive(Debug, Clone)]
pub struct FaultRule {
    pub matcher: OpMatcher,
    pub action: FaultAction,
}

/// A deterministic interleaving-and-fault script for a run. `seed` is
/// carried for reproducibility bookkeeping by harnesses that generated the
/// rules; the rules themselves are already deterministic.
#[derive(Debug, Clone, Default)]
pub struct FaultSchedule {
    pub seed: u64,
    pub rules: Vec<FaultRule>,
}

impl FaultSchedule {
    fn action_for(&self, meta: &OpMeta) -> FaultAction {
        for rule in &self.rules {
            if rule.matcher.matches(meta) {
                return rule.action;
            }
        }
        FaultAction::Deliver
    }
}

#[derive(Debug, Clone, Copy)]
struct OpMeta {
    issuer: NodeId,
    kind: OpKind,
    region: RegionId,
    offset: u64,
    len: u64,
    op_index: u64,
    tag: u64,
}

/// Payload of a schedulable operation.
#[derive(Debug, Clone)]
enum OpBody {
    Write { bytes: Vec<u8> },
    Cas { expected: u64, new: u64 },
}

#[derive(Debug, Clone)]
struct PendingOp {
    token: OpToken,
    meta: OpMeta,
    body: OpBody,
    /// `Some(tag)` while waiting for the tagged op to apply.
    after: Option<u64>,
}

/// One record in the totally ordered fabric event log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FabricEvent {
    /// Tick at which the record was appended (apply or drop time).
    pub tick: Tick,
    /// Position in the total order.
    pub seq: u64,
    pub node: NodeId,
    pub region: RegionId,
    pub kind: EventKind,
    /// Caller-assigned tag (ring sessions use it to mark protocol steps).
    pub tag: u64,
    /// Token of the schedulable op this record belongs to, if any.
    pub token: Option<OpToken>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    Registered { length: u64 },
    Read { offset: u64, len: u64, local: bool },
    WriteApplied { offset: u64, bytes: Vec<u8>, local: bool },
    WriteDropped { offset: u64, len: u64 },
    CasApplied { offset: u64, expected: u64, new: u64, swapped: bool, observed: u64 },
    CasDropped { offset: u64, expected: u64, new: u64 },
    /// A data op was deferred by the schedule at issue time.
    Deferred { kind: OpKind, offset: u64, len: u64 },
}

struct Region {
    owner: NodeId,
    bytes: Vec<u8>,
}

/// The fabric: regions, the pending-op scheduler, and the event log.
pub struct Fabric {
    now: Tick,
    schedule: FaultSchedule,
    regions: alloc::collections::BTreeMap<RegionId, Region>,
    /// Ops waiting on a due tick, keyed for deterministic apply order.
    pending: alloc::collections::BTreeMap<(Tick, u64), PendingOp>,
    /// Ops waiting on another tagged op.
    held: Vec<PendingOp>,
    completions: alloc::collections::BTreeMap<OpToken, CasOutcome>,
    log: Vec<FabricEvent>,
    next_region: u32,
    next_token: u64,
    next_seq: u64,
    op_counts: alloc::collections::BTreeMap<NodeId, u64>,
}

impl Fabric {
    pub fn new(schedule: FaultSchedule) -> Self {
        Self {
            now: 0,
            schedule,
            regions: alloc::collections::BTreeMap::new(),
            pending: alloc::collections::BTreeMap::new(),
            held: Vec::new(),
            completions: alloc::collections::BTreeMap::new(),
            log: Vec::new(),
            next_region: 0,
            next_token: 0,
            next_seq: 0,
            op_counts: alloc::collections::BTreeMap::new(),
        }
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    /// Registers a zero-initialized region owned by `owner`.
    pub fn register_region(&mut self, owner: NodeId, length: u64) -> Result<RegionHandle, FabricError> {
        if length == 0 {
            return Err(FabricError::ZeroLength);
        }
        let id = RegionId(self.next_region);
        self.next_region += 1;
        self.regions.insert(
            id,
            Region {
                owner,
                bytes: alloc::vec![0u8; length as usize],
            },
        );
        self.push_event(owner, id, EventKind::Registered { length }, 0, None);
        Ok(RegionHandle { id, length, owner })
    }

    /// Remote read: executes at issue and returns the bytes.
    pub fn read(
        &mut self,
        issuer: NodeId,
        h: &RegionHandle,
        offset: u64,
        len: u64,
    ) -> Result<Vec<u8>, FabricError> {
        self.check_bounds(h, offset, len)?;
        let out = self.regions[&h.id].bytes[offset as usize..(offset + len) as usize].to_vec();
        self.push_event(issuer, h.id, EventKind::Read { offset, len, local: false }, 0, None);
        Ok(out)
    }

    /// Remote read of one aligned 64-bit word.
    pub fn read_word(&mut self, issuer: NodeId, h: &RegionHandle, offset: u64) -> Result<u64, FabricError> {
        self.check_aligned(offset)?;
        let bytes = self.read(issuer, h, offset, 8)?;
        Ok(u64::from_le_bytes(bytes.try_into().unwrap()))
    }

    /// Compare-and-swap executed at issue; returns the pre-operation word.
    pub fn cas_now(
        &mut self,
        issuer: NodeId,
        h: &RegionHandle,
        offset: u64,
        expected: u64,
        new: u64,
        tag: u64,
    ) -> Result<CasOutcome, FabricError> {
        self.check_aligned(offset)?;
        self.check_bounds(h, offset, 8)?;
        Ok(self.apply_cas(issuer, h.id, offset, expected, new, tag, None))
    }

    /// Schedulable write. Applies at issue unless a rule defers or drops it;
    /// drops are silent to the issuer.
    pub fn write(
        &mut self,
        issuer: NodeId,
        h: &RegionHandle,
        offset: u64,
        bytes: Vec<u8>,
        tag: u64,
    ) -> Result<OpToken, FabricError> {
        self.check_bounds(h, offset, bytes.len() as u64)?;
        let len = bytes.len() as u64;
        let meta = self.next_meta(issuer, OpKind::Write, h.id, offset, len, tag);
        self.dispatch(meta, OpBody::Write { bytes })
    }

    /// Schedulable compare-and-swap. The outcome becomes available through
    /// [`Fabric::completion`] once the op applies; a dropped op never
    /// completes.
    pub fn cas(
        &mut self,
        issuer: NodeId,
        h: &RegionHandle,
        offset: u64,
        expected: u64,
        new: u64,
        tag: u64,
    ) -> Result<OpToken, FabricError> {
        self.check_aligned(offset)?;
        self.check_bounds(h, offset, 8)?;
        let meta = self.next_meta(issuer, OpKind::Cas, h.id, offset, 8, tag);
        self.dispatch(meta, OpBody::Cas { expected, new })
    }

    /// Completion of a schedulable CAS, if it has applied.
    pub fn completion(&self, token: OpToken) -> Option<CasOutcome> {
        self.completions.get(&token).copied()
    }

    /// Local read by the region owner: immediate and infallible apart from
    /// bounds, per the co-located-consumer model.
    pub fn local_read(
        &mut self,
        owner: NodeId,
        h: &RegionHandle,
        offset: u64,
        len: u64,
    ) -> Result<Vec<u8>, FabricError> {
        self.check_owner(owner, h)?;
        self.check_bounds(h, offset, len)?;
        let out = self.regions[&h.id].bytes[offset as usize..(offset + len) as usize].to_vec();
        self.push_event(owner, h.id, EventKind::Read { offset, len, local: true }, 0, None);
        Ok(out)
    }

    pub fn local_read_word(&mut self, owner: NodeId, h: &RegionHandle, offset: u64) -> Result<u64, FabricError> {
        self.check_aligned(offset)?;
        let bytes = self.local_read(owner, h, offset, 8)?;
        Ok(u64::from_le_bytes(bytes.try_into().unwrap()))
    }

    /// Local write by the region owner: immediate.
    pub fn local_write(
        &mut self,
        owner: NodeId,
        h: &RegionHandle,
        offset: u64,
        bytes: &[u8],
        tag: u64,
    ) -> Result<(), FabricError> {
        self.check_owner(owner, h)?;
        self.check_bounds(h, offset, bytes.len() as u64)?;
        let region = self.regions.get_mut(&h.id).unwrap();
        region.bytes[offset as usize..offset as usize + bytes.len()].copy_from_slice(bytes);
        self.push_event(
            owner,
            h.id,
            EventKind::WriteApplied { offset, bytes: bytes.to_vec(), local: true },
            tag,
            None,
        );
        Ok(())
    }

    pub fn local_write_word(
        &mut self,
        owner: NodeId,
        h: &RegionHandle,
        offset: u64,
        word: u64,
        tag: u64,
    ) -> Result<(), FabricError> {
        self.check_aligned(offset)?;
        self.local_write(owner, h, offset, &word.to_le_bytes(), tag)
    }

    /// Advances the clock and applies all pending ops due at or before `now`.
    pub fn advance_to(&mut self, now: Tick) {
        debug_assert!(now >= self.now);
        self.now = now;
        loop {
            let due = match self.pending.keys().next() {
                Some(&(t, seq)) if t <= now => (t, seq),
                _ => break,
            };
            let op = self.pending.remove(&due).unwrap();
            self.apply_pending(op);
        }
    }

    /// Applies everything still in flight, advancing the clock as needed.
    /// Ops held on tags that never applied are drained last, in issue order.
    /// Returns the clock value after the drain.
    pub fn run_until_quiescent(&mut self) -> Tick {
        while let Some(&(t, _)) = self.pending.keys().next() {
            self.advance_to(t.max(self.now));
        }
        let leftovers: Vec<PendingOp> = core::mem::take(&mut self.held);
        for op in leftovers {
            self.apply_pending(op);
        }
        self.now
    }

    pub fn is_quiescent(&self) -> bool {
        self.pending.is_empty() && self.held.is_empty()
    }

    pub fn log(&self) -> &[FabricEvent] {
        &self.log
    }

    /// Full copy of a region's current contents (test and report helper).
    pub fn snapshot(&self, h: &RegionHandle) -> Vec<u8> {
        self.regions[&h.id].bytes.clone()
    }

    fn next_meta(
        &mut self,
        issuer: NodeId,
        kind: OpKind,
        region: RegionId,
        offset: u64,
        len: u64,
        tag: u64,
    ) -> OpMeta {
        let counter = self.op_counts.entry(issuer).or_insert(0);
        let op_index = *counter;
        *counter += 1;
        OpMeta { issuer, kind, region, offset, len, op_index, tag }
    }

    fn dispatch(&mut self, meta: OpMeta, body: OpBody) -> Result<OpToken, FabricError> {
        let token = OpToken(self.next_token);
        self.next_token += 1;
        match self.schedule.action_for(&meta) {
            FaultAction::Deliver => {
                self.apply_body(meta, body, token);
            }
            FaultAction::Drop => {
                let kind = match &body {
                    OpBody::Write { bytes } => EventKind::WriteDropped {
                        offset: meta.offset,
                        len: bytes.len() as u64,
                    },
                    OpBody::Cas { expected, new } => EventKind::CasDropped {
                        offset: meta.offset,
                        expected: *expected,
                        new: *new,
                    },
                };
                self.push_event(meta.issuer, meta.region, kind, meta.tag, Some(token));
            }
            FaultAction::Delay(d) => {
                self.push_event(
                    meta.issuer,
                    meta.region,
                    EventKind::Deferred { kind: meta.kind, offset: meta.offset, len: meta.len },
                    meta.tag,
                    Some(token),
                );
                let seq = self.next_seq;
                self.next_seq += 1;
                self.pending.insert(
                    (self.now + d, seq),
                    PendingOp { token, meta, body, after: None },
                );
            }
            FaultAction::ReorderAfter(tag) => {
                self.push_event(
                    meta.issuer,
                    meta.region,
                    EventKind::Deferred { kind: meta.kind, offset: meta.offset, len: meta.len },
                    meta.tag,
                    Some(token),
                );
                self.held.push(PendingOp { token, meta, body, after: Some(tag) });
            }
        }
        Ok(token)
    }

    fn apply_pending(&mut self, op: PendingOp) {
        let PendingOp { token, meta, body, .. } = op;
        self.apply_body(meta, body, token);
    }

    fn apply_body(&mut self, meta: OpMeta, body: OpBody, token: OpToken) {
        match body {
            OpBody::Write { bytes } => {
                let region = self.regions.get_mut(&meta.region).unwrap();
                region.bytes[meta.offset as usize..meta.offset as usize + bytes.len()]
                    .copy_from_slice(&bytes);
                self.push_event(
                    meta.issuer,
                    meta.region,
                    EventKind::WriteApplied { offset: meta.offset, bytes, local: false },
                    meta.tag,
                    Some(token),
                );
            }
            OpBody::Cas { expected, new } => {
                let outcome =
                    self.apply_cas(meta.issuer, meta.region, meta.offset, expected, new, meta.tag, Some(token));
                self.completions.insert(token, outcome);
            }
        }
        self.release_held(meta.tag);
    }

    fn release_held(&mut self, applied_tag: u64) {
        if applied_tag == 0 || self.held.is_empty() {
            return;
        }
        let mut released = Vec::new();
        self.held.retain_mut(|op| {
            if op.after == Some(applied_tag) {
                released.push(op.clone());
                false
            } else {
                true
            }
        });
        for op in released {
            self.apply_pending(op);
        }
    }

    fn apply_cas(
        &mut self,
        issuer: NodeId,
        region: RegionId,
        offset: u64,
        expected: u64,
        new: u64,
        tag: u64,
        token: Option<OpToken>,
    ) -> CasOutcome {
        let r = self.regions.get_mut(&region).unwrap();
        let slot = &mut r.bytes[offset as usize..offset as usize + 8];
        let observed = u64::from_le_bytes(slot.try_into().unwrap());
        let swapped = observed == expected;
        if swapped {
            slot.copy_from_slice(&new.to_le_bytes());
        }
        self.push_event(
            issuer,
            region,
            EventKind::CasApplied { offset, expected, new, swapped, observed },
            tag,
            token,
        );
        CasOutcome { swapped, observed }
    }

    fn push_event(&mut self, node: NodeId, region: RegionId, kind: EventKind, tag: u64, token: Option<OpToken>) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.log.push(FabricEvent { tick: self.now, seq, node, region, kind, tag, token });
    }

    fn check_bounds(&self, h: &RegionHandle, offset: u64, len: u64) -> Result<(), FabricError> {
        let region = self.regions.get(&h.id).ok_or(FabricError::UnknownRegion(h.id))?;
        let length = region.bytes.len() as u64;
        if offset.checked_add(len).is_none_or(|end| end > length) {
            return Err(FabricError::OutOfBounds { region: h.id, offset, len, length });
        }
        Ok(())
    }

    fn check_aligned(&self, offset: u64) -> Result<(), FabricError> {
        if offset % 8 != 0 {
            return Err(FabricError::Misaligned(offset));
        }
        Ok(())
    }

    fn check_owner(&self, node: NodeId, h: &RegionHandle) -> Result<(), FabricError> {
        let region = self.regions.get(&h.id).ok_or(FabricError::UnknownRegion(h.id))?;
        if region.owner != node {
            return Err(FabricError::NotOwner { node, region: h.id });
        }
        Ok(())
    }
}

impl fmt::Debug for Fabric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Fabric")
            .field("now", &self.now)
            .field("regions", &self.regions.len())
            .field("pending", &self.pending.len())
            .field("events", &self.log.len())
            .finish()
    }
}
