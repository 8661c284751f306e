//! Multi-producer / single-consumer ring buffer for variable-size entries,
//! built entirely from one-sided fabric operations.
//!
//! Any number of remote producers contend for a CAS-based spinlock with a
//! timeout: a lock held longer than the timeout is presumed abandoned and
//! stolen. The single consumer is co-located with the region and never
//! fails. Entries carry a CRC-32 so that stale writes from slow or lost
//! producers are detected and skipped rather than blocking the queue.
//!
//! # Region layout
//!
//! ```text
//! offset          size             contents
//! 0               8                lock word: owner id (16 bits) | acquire tick (48 bits)
//! 8               8                tail word: buffer tail (32 bits) | size tail (32 bits)
//! 16              8                head word: buffer head (32 bits) | size head (32 bits)
//! 24              buffer_size      buffer region (entry bytes)
//! 24+buffer_size  8 * slot_count   size region: one word per slot,
//!                                  busy bit (MSB) | entry size (63 bits)
//! ```
//!
//! An entry on the buffer is `[crc32 (4 bytes, LE)][body]`; the slot records
//! the total on-buffer length. Entries never straddle the region end: a
//! producer whose entry does not fit in the tail-to-end gap places it at
//! offset 0 instead, and every walker (producers advancing the tail, the
//! consumer advancing the head) derives the same placement from
//! `(position, recorded size)`, so heads and tails stay in lockstep.
//!
//! # Producer protocol
//!
//! 1. Acquire the lock: CAS 0 -> {me, now}; a stamp older than the timeout
//!    may be stolen by CAS {other, then} -> {me, now}.
//! 2. Read the header and the size slot at the tail (`step_gh`).
//! 3. If that slot is busy, a previous holder was lost after writing its
//!    size but before publishing the header: advance the header past the
//!    committed entry (`step_uh_stale`) so the consumer still sees it. A
//!    busy tail slot with the whole size region busy means the ring is full.
//! 4. Abort (releasing the lock) if the entry does not fit.
//! 5. Write the entry bytes at the placement (`step_wb`).
//! 6. CAS the size slot from its observed idle value to busy|size
//!    (`step_wl`). Losing this CAS means another producer finalized the
//!    slot; the entry is silently superseded.
//! 7. On WL success, CAS the tail word forward (`step_uh_commit`). CAS
//!    rather than a blind write so a delayed update can never rewind a tail
//!    published by a later holder.
//! 8. Release the lock by CAS back to zero (`step_unlock`).
//!
//! The consumer polls the size slot at its head; a busy slot is consumed by
//! reading the entry, verifying the checksum, clearing the busy bit (size
//! bits are preserved), and advancing the head word.
//!
//! Every step is exposed individually so scripted interleavings can replay
//! recovery scenarios through the exact production code paths; see
//! [`LivenessTrace`] and [`builtin_case`].

use alloc::vec::Vec;

use crate::fabric::{CasOutcome, Fabric, FabricError, OpToken, RegionHandle};
use crate::message::checksum;
use crate::{NodeId, Tick};

/// Byte offset of the buffer region within the ring's fabric region.
pub const DATA_OFFSET: u64 = 24;
const LOCK_OFFSET: u64 = 0;
const TAIL_OFFSET: u64 = 8;
const HEAD_OFFSET: u64 = 16;
/// Checksum prefix length of an on-buffer entry.
pub const ENTRY_OVERHEAD: u32 = 4;

/// Packing helpers for the ring's word-size fields.
pub mod words {
    use crate::{NodeId, Tick};

    const TICK_MASK: u64 = (1 << 48) - 1;
    const SIZE_MASK: u64 = (1 << 63) - 1;

    pub fn pack_lock(owner: NodeId, acquired_at: Tick) -> u64 {
        ((owner.0 as u64) << 48) | (acquired_at & TICK_MASK)
    }

    pub fn unpack_lock(word: u64) -> (NodeId, Tick) {
        (NodeId((word >> 48) as u16), word & TICK_MASK)
    }

    pub fn pack_ptr(byte_pos: u32, slot_idx: u32) -> u64 {
        ((byte_pos as u64) << 32) | slot_idx as u64
    }

    pub fn unpack_ptr(word: u64) -> (u32, u32) {
        ((word >> 32) as u32, word as u32)
    }

    pub fn pack_slot(busy: bool, size: u64) -> u64 {
        ((busy as u64) << 63) | (size & SIZE_MASK)
    }

    pub fn unpack_slot(word: u64) -> (bool, u64) {
        (word >> 63 == 1, word & SIZE_MASK)
    }
}

/// Ring geometry and timing parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RingSpec {
    /// Buffer region size in bytes; must be a positive multiple of 8.
    pub buffer_size: u32,
    /// Number of size-region slots; at least 2.
    pub slot_count: u32,
    /// Lock steal timeout in ticks.
    pub lock_timeout: Tick,
}

impl Default for RingSpec {
    fn default() -> Self {
        Self { buffer_size: 1 << 20, slot_count: 1024, lock_timeout: 50 }
    }
}

impl RingSpec {
    pub fn region_length(&self) -> u64 {
        DATA_OFFSET + self.buffer_size as u64 + 8 * self.slot_count as u64
    }

    fn slot_offset(&self, idx: u32) -> u64 {
        DATA_OFFSET + self.buffer_size as u64 + 8 * idx as u64
    }

    fn validate(&self) -> Result<(), RingError> {
        if self.buffer_size == 0
            || self.buffer_size % 8 != 0
            || self.slot_count < 2
            || self.lock_timeout == 0
        {
            return Err(RingError::BadSpec);
        }
        Ok(())
    }
}

/// A ring buffer living in a fabric region: the handle plus its geometry.
#[derive(Debug, Clone, Copy)]
pub struct Ring {
    pub region: RegionHandle,
    pub spec: RingSpec,
}

impl Ring {
    /// Registers a fresh region sized for `spec`, owned by `owner` (the
    /// consumer side).
    pub fn create(fab: &mut Fabric, owner: NodeId, spec: RingSpec) -> Result<Self, RingError> {
        spec.validate()?;
        let region = fab.register_region(owner, spec.region_length())?;
        Ok(Self { region, spec })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RingError {
    #[error("ring spec invalid: buffer size must be a positive multiple of 8, slot count >= 2, timeout > 0")]
    BadSpec,
    #[error("entry of {framed} bytes (with checksum) exceeds the {buffer} byte buffer region")]
    EntryTooLarge { framed: u64, buffer: u32 },
    #[error("fabric: {0}")]
    Fabric(#[from] FabricError),
    #[error("protocol step not legal in state {0}")]
    BadStep(&'static str),
}

/// Where an entry of recorded size `size` walked-to from `pos` actually
/// lives: at `pos` if it fits before the region end, else at 0.
pub fn entry_pos(pos: u32, size: u32, region: u32) -> u32 {
    if pos as u64 + size as u64 <= region as u64 {
        pos
    } else {
        0
    }
}

/// The walk position after an entry of recorded size `size` at `pos`; wraps
/// to 0 when the entry ends at the region boundary.
pub fn next_pos(pos: u32, size: u32, region: u32) -> u32 {
    let end = entry_pos(pos, size, region) as u64 + size as u64;
    if end >= region as u64 {
        0
    } else {
        end as u32
    }
}

/// Space check for an append of `len` on-buffer bytes given the producer's
/// view of the header. Returns the placement offset when the entry fits.
///
/// The occupied byte range is `[head, tail)` walking forward; an append is
/// rejected when its bytes would overlap that range or when the advanced
/// tail would land inside it (landing exactly on `head` counts as inside).
/// `empty` distinguishes `tail == head` with nothing committed from a
/// completely full ring.
pub fn append_fits(region: u32, tail: u32, head: u32, empty: bool, len: u32) -> Option<u32> {
    debug_assert!(len as u64 <= region as u64);
    let ep = entry_pos(tail, len, region);
    if empty {
        return Some(ep);
    }
    if head > tail {
        // Free space is the contiguous gap [tail, head): wrapping is never
        // legal here because the wrapped bytes [0, len) are occupied.
        if ep == tail && tail + len < head {
            return Some(ep);
        }
        return None;
    }
    if head == tail {
        // Non-empty with equal positions: every byte is occupied.
        return None;
    }
    // Occupied range [head, tail) is linear; free is [tail, region) + [0, head).
    if ep == tail {
        let np = next_pos(tail, len, region);
        // Only a wrap to 0 can re-enter the occupied range, and only if the
        // head sits at 0.
        if np == 0 && head == 0 {
            return None;
        }
        Some(ep)
    } else {
        // Wrapped placement at 0: entry and new tail must stay below head.
        if len < head {
            Some(0)
        } else {
            None
        }
    }
}

/// Frames a body for the buffer: CRC-32 of the body, little-endian, then the
/// body itself.
pub fn frame_entry(body: &[u8]) -> Vec<u8> {
    let mut framed = Vec::with_capacity(4 + body.len());
    framed.extend_from_slice(&checksum(body).to_le_bytes());
    framed.extend_from_slice(body);
    framed
}

/// Checks an on-buffer entry's checksum, returning the body on a match.
pub fn verify_entry(framed: &[u8]) -> Option<&[u8]> {
    if framed.len() < ENTRY_OVERHEAD as usize {
        return None;
    }
    let stored = u32::from_le_bytes(framed[..4].try_into().unwrap());
    let body = &framed[4..];
    (checksum(body) == stored).then_some(body)
}

/// Result of a completed append attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppendOutcome {
    /// Entry written, slot finalized, header advanced, lock released.
    Committed { position: u32, slot: u32 },
    /// Not enough space; the lock was released with no state change.
    Full,
    /// The lock could not be acquired within the retry budget.
    LockTimeout,
    /// The size-slot CAS lost to another producer; the entry was written but
    /// never finalized here. No error is surfaced to the message layer.
    Superseded,
    /// The size-slot CAS never completed within the budget (lost on the
    /// fabric); the entry's fate is unknown to the producer.
    WlTimedOut,
}

/// How the lock was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LockAttempt {
    Acquired,
    StolenThenAcquired,
    Busy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SessState {
    Start,
    Locked,
    StaleFix,
    Checked,
    Wrote,
    AwaitWl,
    WlSucceeded,
    WlFailed,
    HeaderUpdated,
}

impl SessState {
    fn name(self) -> &'static str {
        match self {
            SessState::Start => "start",
            SessState::Locked => "locked",
            SessState::StaleFix => "stale-fix",
            SessState::Checked => "checked",
            SessState::Wrote => "wrote",
            SessState::AwaitWl => "await-wl",
            SessState::WlSucceeded => "wl-succeeded",
            SessState::WlFailed => "wl-failed",
            SessState::HeaderUpdated => "header-updated",
        }
    }
}

/// One producer's append attempt, drivable step by step. Each step issues
/// the fabric operations of the corresponding protocol action; the session
/// never reads back its own in-flight writes, so steps may be interleaved
/// arbitrarily with other sessions' deliveries.
pub struct ProducerSession {
    ring: Ring,
    me: NodeId,
    framed: Vec<u8>,
    tag: u64,
    state: SessState,
    lock_stamp: u64,
    stole: bool,
    tail: (u32, u32),
    head: (u32, u32),
    slot_val: u64,
    full_by_slots: bool,
    placement: u32,
    wl_token: Option<OpToken>,
    wl_issued_at: Tick,
}

impl ProducerSession {
    /// Prepares an append of `body`. `tag` marks every fabric op this
    /// session issues (for log attribution).
    pub fn new(ring: Ring, me: NodeId, body: &[u8], tag: u64) -> Result<Self, RingError> {
        let framed = frame_entry(body);
        if framed.len() as u64 > ring.spec.buffer_size as u64 {
            return Err(RingError::EntryTooLarge {
                framed: framed.len() as u64,
                buffer: ring.spec.buffer_size,
            });
        }
        Ok(Self {
            ring,
            me,
            framed,
            tag,
            state: SessState::Start,
            lock_stamp: 0,
            stole: false,
            tail: (0, 0),
            head: (0, 0),
            slot_val: 0,
            full_by_slots: false,
            placement: 0,
            wl_token: None,
            wl_issued_at: 0,
        })
    }

    fn framed_len(&self) -> u32 {
        self.framed.len() as u32
    }

    /// Spinlock acquire: CAS from zero, or steal an expired stamp.
    pub fn step_lock(&mut self, fab: &mut Fabric, now: Tick) -> Result<LockAttempt, RingError> {
        if self.state != SessState::Start {
            return Err(RingError::BadStep(self.state.name()));
        }
        let mine = words::pack_lock(self.me, now);
        let out = fab.cas_now(self.me, &self.ring.region, LOCK_OFFSET, 0, mine, self.tag)?;
        if out.swapped {
            self.lock_stamp = mine;
            self.state = SessState::Locked;
            return Ok(LockAttempt::Acquired);
        }
        let (_, acquired_at) = words::unpack_lock(out.observed);
        if now.saturating_sub(acquired_at) > self.ring.spec.lock_timeout {
            let steal =
                fab.cas_now(self.me, &self.ring.region, LOCK_OFFSET, out.observed, mine, self.tag)?;
            if steal.swapped {
                self.lock_stamp = mine;
                self.stole = true;
                self.state = SessState::Locked;
                return Ok(LockAttempt::StolenThenAcquired);
            }
        }
        Ok(LockAttempt::Busy)
    }

    /// Whether the lock was obtained by stealing an expired stamp.
    pub fn stole_lock(&self) -> bool {
        self.stole
    }

    /// Reads the header and the size slot at the tail, classifying the slot
    /// as clean, stale (needs [`Self::step_uh_stale`]), or full.
    pub fn step_gh(&mut self, fab: &mut Fabric) -> Result<GhOutcome, RingError> {
        if self.state != SessState::Locked {
            return Err(RingError::BadStep(self.state.name()));
        }
        let r = self.ring.region;
        self.tail = words::unpack_ptr(fab.read_word(self.me, &r, TAIL_OFFSET)?);
        self.head = words::unpack_ptr(fab.read_word(self.me, &r, HEAD_OFFSET)?);
        self.slot_val = fab.read_word(self.me, &r, self.ring.spec.slot_offset(self.tail.1))?;
        self.classify_tail_slot(fab)
    }

    /// A busy tail slot is either an entry committed by a holder that was
    /// lost before publishing the header (stale), or — when the size tail
    /// has lapped back onto the head with the next slot also busy — a
    /// completely full size region.
    fn classify_tail_slot(&mut self, fab: &mut Fabric) -> Result<GhOutcome, RingError> {
        let (busy, _) = words::unpack_slot(self.slot_val);
        if !busy {
            self.full_by_slots = false;
            self.state = SessState::Checked;
            return Ok(GhOutcome::Clean);
        }
        if self.tail.1 == self.head.1 {
            let next = (self.tail.1 + 1) % self.ring.spec.slot_count;
            let next_val =
                fab.read_word(self.me, &self.ring.region, self.ring.spec.slot_offset(next))?;
            if words::unpack_slot(next_val).0 {
                self.full_by_slots = true;
                self.state = SessState::Checked;
                return Ok(GhOutcome::FullSlots);
            }
        }
        self.state = SessState::StaleFix;
        Ok(GhOutcome::StaleSlot)
    }

    /// Advances the header past one committed-but-unpublished entry, via CAS
    /// on the tail word. Re-reads the new tail slot afterwards; a lost CAS
    /// (another holder moved the tail) sends the session back through
    /// [`Self::step_gh`].
    pub fn step_uh_stale(&mut self, fab: &mut Fabric) -> Result<GhOutcome, RingError> {
        if self.state != SessState::StaleFix {
            return Err(RingError::BadStep(self.state.name()));
        }
        let spec = self.ring.spec;
        let (_, size) = words::unpack_slot(self.slot_val);
        let advanced = (
            next_pos(self.tail.0, size as u32, spec.buffer_size),
            (self.tail.1 + 1) % spec.slot_count,
        );
        let out = fab.cas_now(
            self.me,
            &self.ring.region,
            TAIL_OFFSET,
            words::pack_ptr(self.tail.0, self.tail.1),
            words::pack_ptr(advanced.0, advanced.1),
            self.tag,
        )?;
        if !out.swapped {
            self.state = SessState::Locked;
            return self.step_gh(fab);
        }
        self.tail = advanced;
        self.slot_val = fab.read_word(self.me, &self.ring.region, spec.slot_offset(self.tail.1))?;
        self.classify_tail_slot(fab)
    }

    /// Space verdict from the session's header view; `None` means abort.
    pub fn placement(&self) -> Option<u32> {
        if self.full_by_slots {
            return None;
        }
        let (busy, _) = words::unpack_slot(self.slot_val);
        let empty = self.tail == self.head && !busy;
        append_fits(self.ring.spec.buffer_size, self.tail.0, self.head.0, empty, self.framed_len())
    }

    /// Writes the entry bytes at the placement.
    pub fn step_wb(&mut self, fab: &mut Fabric) -> Result<(), RingError> {
        if self.state != SessState::Checked {
            return Err(RingError::BadStep(self.state.name()));
        }
        let Some(ep) = self.placement() else {
            return Err(RingError::BadStep("checked-but-full"));
        };
        self.placement = ep;
        fab.write(
            self.me,
            &self.ring.region,
            DATA_OFFSET + ep as u64,
            self.framed.clone(),
            self.tag,
        )?;
        self.state = SessState::Wrote;
        Ok(())
    }

    /// CAS the size slot from its observed idle value to busy|size.
    pub fn step_wl(&mut self, fab: &mut Fabric, now: Tick) -> Result<(), RingError> {
        if self.state != SessState::Wrote {
            return Err(RingError::BadStep(self.state.name()));
        }
        let token = fab.cas(
            self.me,
            &self.ring.region,
            self.ring.spec.slot_offset(self.tail.1),
            self.slot_val,
            words::pack_slot(true, self.framed_len() as u64),
            self.tag,
        )?;
        self.wl_token = Some(token);
        self.wl_issued_at = now;
        self.state = SessState::AwaitWl;
        Ok(())
    }

    /// Completion poll for the size-slot CAS.
    pub fn poll_wl(&mut self, fab: &Fabric) -> Option<bool> {
        if self.state != SessState::AwaitWl {
            return None;
        }
        let CasOutcome { swapped, .. } = fab.completion(self.wl_token.unwrap())?;
        self.state = if swapped { SessState::WlSucceeded } else { SessState::WlFailed };
        Some(swapped)
    }

    /// Publishes the new tail. CAS from the session's tail view; a lost CAS
    /// is silent (the tail has already moved past us).
    pub fn step_uh_commit(&mut self, fab: &mut Fabric) -> Result<(), RingError> {
        if self.state != SessState::WlSucceeded {
            return Err(RingError::BadStep(self.state.name()));
        }
        let spec = self.ring.spec;
        let new_tail = (
            next_pos(self.tail.0, self.framed_len(), spec.buffer_size),
            (self.tail.1 + 1) % spec.slot_count,
        );
        fab.cas(
            self.me,
            &self.ring.region,
            TAIL_OFFSET,
            words::pack_ptr(self.tail.0, self.tail.1),
            words::pack_ptr(new_tail.0, new_tail.1),
            self.tag,
        )?;
        self.state = SessState::HeaderUpdated;
        Ok(())
    }

    /// Releases the lock: CAS from our stamp back to zero. Silently fails if
    /// the lock was stolen from us.
    pub fn step_unlock(&mut self, fab: &mut Fabric) -> Result<(), RingError> {
        if self.lock_stamp == 0 {
            return Err(RingError::BadStep(self.state.name()));
        }
        fab.cas(self.me, &self.ring.region, LOCK_OFFSET, self.lock_stamp, 0, self.tag)?;
        Ok(())
    }

    fn committed_at(&self) -> (u32, u32) {
        (self.placement, self.tail.1)
    }
}

/// Classification of the tail slot at header read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GhOutcome {
    Clean,
    StaleSlot,
    FullSlots,
}

/// Status of a driven append attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriveStatus {
    InProgress,
    Done(AppendOutcome),
}

/// Drives a [`ProducerSession`] to completion across ticks: spins on a busy
/// lock and waits for the size-slot CAS completion, each within a budget of
/// three lock timeouts.
pub struct AppendDriver {
    session: ProducerSession,
    started_at: Option<Tick>,
    budget: Tick,
    done: Option<AppendOutcome>,
}

impl AppendDriver {
    pub fn new(ring: Ring, me: NodeId, body: &[u8], tag: u64) -> Result<Self, RingError> {
        let budget = 3 * ring.spec.lock_timeout;
        Ok(Self {
            session: ProducerSession::new(ring, me, body, tag)?,
            started_at: None,
            budget,
            done: None,
        })
    }

    pub fn outcome(&self) -> Option<AppendOutcome> {
        self.done
    }

    fn finish(&mut self, out: AppendOutcome) -> Result<DriveStatus, RingError> {
        self.done = Some(out);
        Ok(DriveStatus::Done(out))
    }

    /// Advances the append as far as possible at tick `now`.
    pub fn step(&mut self, fab: &mut Fabric, now: Tick) -> Result<DriveStatus, RingError> {
        if let Some(out) = self.done {
            return Ok(DriveStatus::Done(out));
        }
        let started = *self.started_at.get_or_insert(now);
        loop {
            match self.session.state {
                SessState::Start => {
                    if let LockAttempt::Busy = self.session.step_lock(fab, now)? {
                        if now.saturating_sub(started) >= self.budget {
                            return self.finish(AppendOutcome::LockTimeout);
                        }
                        return Ok(DriveStatus::InProgress);
                    }
                }
                SessState::Locked => {
                    self.session.step_gh(fab)?;
                }
                SessState::StaleFix => {
                    self.session.step_uh_stale(fab)?;
                }
                SessState::Checked => {
                    if self.session.placement().is_none() {
                        self.session.step_unlock(fab)?;
                        return self.finish(AppendOutcome::Full);
                    }
                    self.session.step_wb(fab)?;
                }
                SessState::Wrote => {
                    self.session.step_wl(fab, now)?;
                }
                SessState::AwaitWl => {
                    if self.session.poll_wl(fab).is_none() {
                        if now.saturating_sub(self.session.wl_issued_at) >= self.budget {
                            self.session.step_unlock(fab)?;
                            return self.finish(AppendOutcome::WlTimedOut);
                        }
                        return Ok(DriveStatus::InProgress);
                    }
                }
                SessState::WlSucceeded => {
                    self.session.step_uh_commit(fab)?;
                }
                SessState::WlFailed => {
                    self.session.step_unlock(fab)?;
                    return self.finish(AppendOutcome::Superseded);
                }
                SessState::HeaderUpdated => {
                    self.session.step_unlock(fab)?;
                    let (position, slot) = self.session.committed_at();
                    return self.finish(AppendOutcome::Committed { position, slot });
                }
            }
        }
    }
}

/// One-call append for contexts where fabric ops apply at issue (no fault
/// rules matching this ring), so the whole protocol completes within the
/// call.
pub fn append_now(
    fab: &mut Fabric,
    ring: Ring,
    me: NodeId,
    body: &[u8],
    now: Tick,
    tag: u64,
) -> Result<AppendOutcome, RingError> {
    let mut driver = AppendDriver::new(ring, me, body, tag)?;
    match driver.step(fab, now)? {
        DriveStatus::Done(out) => Ok(out),
        DriveStatus::InProgress => Ok(AppendOutcome::LockTimeout),
    }
}

/// Result of one consumer poll.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PollOutcome {
    /// No committed entry at the head.
    Empty,
    /// A checksum-valid entry; `bytes` is the body as appended.
    Delivered { bytes: Vec<u8>, position: u32, slot: u32 },
    /// The slot was busy but the entry failed its checksum; the head still
    /// advanced by the recorded size.
    CorruptSkipped { position: u32, slot: u32, size: u32 },
}

/// The single consumer, co-located with the ring's region. Its reads and
/// writes are local and immediate; consumer operations do not fail.
pub struct Consumer {
    ring: Ring,
    staged: Option<(u32, u32, u64)>,
    tag: u64,
}

impl Consumer {
    pub fn new(ring: Ring, tag: u64) -> Self {
        Self { ring, staged: None, tag }
    }

    fn owner(&self) -> NodeId {
        self.ring.region.owner
    }

    /// Reads the head and the size slot it points at; returns whether a
    /// committed entry is pending there.
    pub fn step_rl(&mut self, fab: &mut Fabric) -> Result<bool, RingError> {
        let me = self.owner();
        let head = words::unpack_ptr(fab.local_read_word(me, &self.ring.region, HEAD_OFFSET)?);
        let slot_val =
            fab.local_read_word(me, &self.ring.region, self.ring.spec.slot_offset(head.1))?;
        let (busy, _) = words::unpack_slot(slot_val);
        self.staged = busy.then_some((head.0, head.1, slot_val));
        Ok(busy)
    }

    /// Consumes the staged entry: read, verify, clear the busy bit, advance
    /// the head.
    pub fn step_rb(&mut self, fab: &mut Fabric) -> Result<PollOutcome, RingError> {
        let Some((h_b, h_s, slot_val)) = self.staged.take() else {
            return Err(RingError::BadStep("no staged entry"));
        };
        let me = self.owner();
        let spec = self.ring.spec;
        let (_, size) = words::unpack_slot(slot_val);
        let size = size as u32;
        debug_assert!(size >= ENTRY_OVERHEAD && size <= spec.buffer_size);
        let pos = entry_pos(h_b, size, spec.buffer_size);
        let framed = fab.local_read(me, &self.ring.region, DATA_OFFSET + pos as u64, size as u64)?;
        let outcome = match verify_entry(&framed) {
            Some(body) => PollOutcome::Delivered { bytes: body.to_vec(), position: pos, slot: h_s },
            None => PollOutcome::CorruptSkipped { position: pos, slot: h_s, size },
        };
        // Clear the busy bit (size bits preserved) and advance the head.
        fab.local_write_word(
            me,
            &self.ring.region,
            spec.slot_offset(h_s),
            words::pack_slot(false, size as u64),
            self.tag,
        )?;
        let new_head = (next_pos(h_b, size, spec.buffer_size), (h_s + 1) % spec.slot_count);
        fab.local_write_word(
            me,
            &self.ring.region,
            HEAD_OFFSET,
            words::pack_ptr(new_head.0, new_head.1),
            self.tag,
        )?;
        Ok(outcome)
    }

    /// Full poll: head/slot read, then consume if anything is committed.
    pub fn poll(&mut self, fab: &mut Fabric) -> Result<PollOutcome, RingError> {
        if self.step_rl(fab)? {
            self.step_rb(fab)
        } else {
            Ok(PollOutcome::Empty)
        }
    }
}

/// Reads the ring's current header words (test and report helper).
pub fn header_view(fab: &mut Fabric, ring: &Ring, node: NodeId) -> Result<HeaderView, RingError> {
    let lock = fab.read_word(node, &ring.region, LOCK_OFFSET)?;
    let tail = words::unpack_ptr(fab.read_word(node, &ring.region, TAIL_OFFSET)?);
    let head = words::unpack_ptr(fab.read_word(node, &ring.region, HEAD_OFFSET)?);
    Ok(HeaderView { lock, tail, head })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeaderView {
    pub lock: u64,
    pub tail: (u32, u32),
    pub head: (u32, u32),
}

// ---------------------------------------------------------------------------
// Scripted recovery traces
// ---------------------------------------------------------------------------

/// The two scripted producers of a liveness trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Who {
    X,
    Y,
}

impl core::fmt::Display for Who {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Who::X => write!(f, "X"),
            Who::Y => write!(f, "Y"),
        }
    }
}

/// One atomic action of a scripted interleaving. Producer actions map to
/// [`ProducerSession`] steps; `Rl`/`Rb` are the consumer's read-size /
/// read-buffer steps; `Tl` expires the lock by advancing the clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceAction {
    Lock(Who),
    Gh(Who),
    Wb(Who),
    Wl(Who),
    Uh(Who),
    Unlock(Who),
    Tl,
    Rl,
    Rb,
}

impl core::fmt::Display for TraceAction {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TraceAction::Lock(w) => write!(f, "Lock({w})"),
            TraceAction::Gh(w) => write!(f, "GH({w})"),
            TraceAction::Wb(w) => write!(f, "WB({w})"),
            TraceAction::Wl(w) => write!(f, "WL({w})"),
            TraceAction::Uh(w) => write!(f, "UH({w})"),
            TraceAction::Unlock(w) => write!(f, "Unlock({w})"),
            TraceAction::Tl => write!(f, "TL"),
            TraceAction::Rl => write!(f, "RL(Z)"),
            TraceAction::Rb => write!(f, "RB(Z)"),
        }
    }
}

/// A complete scripted scenario: ring geometry, the two producers' bodies,
/// and the exact total order of atomic actions.
#[derive(Debug, Clone)]
pub struct LivenessTrace {
    pub spec: RingSpec,
    pub x_body: Vec<u8>,
    pub y_body: Vec<u8>,
    pub actions: Vec<TraceAction>,
}

/// What a replay observed, normalized for assertions: which producer's body
/// each delivered entry matched, how many entries were checksum-skipped, and
/// the final header state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayVerdict {
    pub delivered: Vec<Who>,
    pub skipped: usize,
    pub final_head: (u32, u32),
    pub final_tail: (u32, u32),
    pub lock_free: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReplayError {
    #[error("action {index} ({action}) illegal here: {source}")]
    BadAction { index: usize, action: &'static str, source: RingError },
    #[error("action {index}: lock attempt returned busy")]
    LockBusy { index: usize },
    #[error("delivered entry matches neither producer body")]
    UnknownBody,
    #[error("consumer drain did not reach empty")]
    DrainStuck,
    #[error("ring: {0}")]
    Ring(#[from] RingError),
}

/// Replays a scripted interleaving through the production producer/consumer
/// code paths on an undisturbed fabric (each action's ops apply at the
/// action's position). After the script, the consumer drains the ring.
pub fn replay_trace(trace: &LivenessTrace) -> Result<(ReplayVerdict, Fabric), ReplayError> {
    let mut fab = Fabric::new(crate::fabric::FaultSchedule::default());
    let consumer_node = NodeId(1);
    let ring = Ring::create(&mut fab, consumer_node, trace.spec)?;
    let mut x = ProducerSession::new(ring, NodeId(2), &trace.x_body, 2)?;
    let mut y = ProducerSession::new(ring, NodeId(3), &trace.y_body, 3)?;
    let mut z = Consumer::new(ring, 1);
    let mut now: Tick = 0;

    for (index, action) in trace.actions.iter().enumerate() {
        // Scripted actions must be legal protocol steps; anything else is a
        // divergence between the script and the implementation.
        let bad = |source: RingError| ReplayError::BadAction {
            index,
            action: action_name(action),
            source,
        };
        macro_rules! with {
            ($w:expr, $f:expr) => {{
                let s: &mut ProducerSession = match $w {
                    Who::X => &mut x,
                    Who::Y => &mut y,
                };
                $f(s)
            }};
        }
        match *action {
            TraceAction::Tl => {
                now += trace.spec.lock_timeout + 1;
                fab.advance_to(now);
            }
            TraceAction::Lock(w) => {
                let att = with!(w, |s: &mut ProducerSession| s.step_lock(&mut fab, now))
                    .map_err(bad)?;
                if att == LockAttempt::Busy {
                    return Err(ReplayError::LockBusy { index });
                }
            }
            TraceAction::Gh(w) => {
                with!(w, |s: &mut ProducerSession| s.step_gh(&mut fab)).map_err(bad)?;
            }
            TraceAction::Uh(w) => {
                with!(w, |s: &mut ProducerSession| {
                    match s.state {
                        SessState::StaleFix => s.step_uh_stale(&mut fab).map(|_| ()),
                        SessState::WlSucceeded => s.step_uh_commit(&mut fab),
                        _ => Err(RingError::BadStep(s.state.name())),
                    }
                })
                .map_err(bad)?;
            }
            TraceAction::Wb(w) => {
                with!(w, |s: &mut ProducerSession| s.step_wb(&mut fab)).map_err(bad)?;
            }
            TraceAction::Wl(w) => {
                with!(w, |s: &mut ProducerSession| -> Result<(), RingError> {
                    s.step_wl(&mut fab, now)?;
                    // Ops apply at issue here, so the outcome is already
                    // known; a lost CAS is silent, exactly as for a live
                    // sender.
                    s.poll_wl(&fab);
                    Ok(())
                })
                .map_err(bad)?;
            }
            TraceAction::Unlock(w) => {
                with!(w, |s: &mut ProducerSession| s.step_unlock(&mut fab)).map_err(bad)?;
            }
            TraceAction::Rl => {
                z.step_rl(&mut fab).map_err(bad)?;
            }
            TraceAction::Rb => {
                if z.staged.is_some() {
                    z.step_rb(&mut fab).map_err(bad)?;
                }
            }
        }
    }

    // Drain: the consumer must reach empty within a bounded number of polls.
    let mut delivered = Vec::new();
    let mut skipped = 0usize;
    let mut budget = trace.spec.slot_count * 2 + 4;
    loop {
        match z.poll(&mut fab)? {
            PollOutcome::Empty => break,
            PollOutcome::Delivered { bytes, .. } => {
                if bytes == trace.x_body {
                    delivered.push(Who::X);
                } else if bytes == trace.y_body {
                    delivered.push(Who::Y);
                } else {
                    return Err(ReplayError::UnknownBody);
                }
            }
            PollOutcome::CorruptSkipped { .. } => skipped += 1,
        }
        budget -= 1;
        if budget == 0 {
            return Err(ReplayError::DrainStuck);
        }
    }

    let view = header_view(&mut fab, &ring, consumer_node)?;
    Ok((
        ReplayVerdict {
            delivered,
            skipped,
            final_head: view.head,
            final_tail: view.tail,
            lock_free: view.lock == 0,
        },
        fab,
    ))
}

fn action_name(a: &TraceAction) -> &'static str {
    match a {
        TraceAction::Lock(_) => "Lock",
        TraceAction::Gh(_) => "GH",
        TraceAction::Wb(_) => "WB",
        TraceAction::Wl(_) => "WL",
        TraceAction::Uh(_) => "UH",
        TraceAction::Unlock(_) => "Unlock",
        TraceAction::Tl => "TL",
        TraceAction::Rl => "RL",
        TraceAction::Rb => "RB",
    }
}

/// The eight canonical lost/slow-sender interleavings, numbered 1–8, each
/// paired with its expected verdict. Bodies are sized so the stated outcome
/// is deterministic: equal sizes where a late overwrite must still
/// checksum-validate, unequal sizes where it must be detected and skipped.
pub fn builtin_case(case: u8) -> Option<(LivenessTrace, ReplayVerdict)> {
    use TraceAction::*;
    use Who::{X, Y};
    let spec = RingSpec { buffer_size: 4096, slot_count: 16, lock_timeout: 50 };
    // Framed sizes: a 48-byte body occupies 52 bytes, a 30-byte body 34.
    let (x_len, y_len, actions, verdict): (usize, usize, Vec<TraceAction>, ReplayVerdict) =
        match case {
            // Holder lost immediately after locking; the stealer runs a
            // normal append and the consumer reads it.
            1 => (
                48,
                48,
                alloc::vec![Lock(X), Tl, Lock(Y), Gh(Y), Wb(Y), Wl(Y), Uh(Y), Unlock(Y)],
                ReplayVerdict {
                    delivered: alloc::vec![Y],
                    skipped: 0,
                    final_head: (52, 1),
                    final_tail: (52, 1),
                    lock_free: true,
                },
            ),
            // Lost holder's write and size ops land after the stealer
            // committed; equal sizes, so the overwritten entry still
            // validates and the consumer reads the late writer's bytes.
            2 => (
                48,
                48,
                alloc::vec![
                    Lock(X),
                    Gh(X),
                    Tl,
                    Lock(Y),
                    Gh(Y),
                    Wb(Y),
                    Wl(Y),
                    Uh(Y),
                    Unlock(Y),
                    Wb(X),
                    Wl(X)
                ],
                ReplayVerdict {
                    delivered: alloc::vec![X],
                    skipped: 0,
                    final_head: (52, 1),
                    final_tail: (52, 1),
                    lock_free: true,
                },
            ),
            // Late write lands between the stealer's write and size update,
            // with a different size: the consumer skips the mangled entry
            // using the recorded size and moves on.
            3 => (
                30,
                48,
                alloc::vec![
                    Lock(X),
                    Gh(X),
                    Tl,
                    Lock(Y),
                    Gh(Y),
                    Wb(Y),
                    Wb(X),
                    Wl(Y),
                    Uh(Y),
                    Unlock(Y),
                    Wl(X)
                ],
                ReplayVerdict {
                    delivered: alloc::vec![],
                    skipped: 1,
                    final_head: (52, 1),
                    final_tail: (52, 1),
                    lock_free: true,
                },
            ),
            // Both write; the original holder finalizes the slot first and
            // publishes. The stealer's size update fails silently and the
            // consumer reads the original holder's entry.
            4 => (
                48,
                30,
                alloc::vec![
                    Lock(X),
                    Gh(X),
                    Tl,
                    Lock(Y),
                    Gh(Y),
                    Wb(Y),
                    Wb(X),
                    Wl(X),
                    Wl(Y),
                    Uh(X),
                    Unlock(X)
                ],
                ReplayVerdict {
                    delivered: alloc::vec![X],
                    skipped: 0,
                    final_head: (52, 1),
                    final_tail: (52, 1),
                    // The stealer still holds the lock; the original
                    // holder's release CAS fails against the stolen stamp.
                    lock_free: false,
                },
            ),
            // The stealer overwrites the slow holder's bytes and finalizes:
            // the consumer reads the stealer's valid entry.
            5 => (
                48,
                30,
                alloc::vec![
                    Lock(X),
                    Gh(X),
                    Tl,
                    Lock(Y),
                    Gh(Y),
                    Wb(X),
                    Wb(Y),
                    Wl(Y),
                    Wl(X),
                    Uh(Y),
                    Unlock(Y)
                ],
                ReplayVerdict {
                    delivered: alloc::vec![Y],
                    skipped: 0,
                    final_head: (34, 1),
                    final_tail: (34, 1),
                    lock_free: true,
                },
            ),
            // The slow holder finalizes the slot but the stealer overwrote
            // the bytes with a different size: checksum mismatch, entry
            // skipped.
            6 => (
                48,
                30,
                alloc::vec![
                    Lock(X),
                    Gh(X),
                    Tl,
                    Lock(Y),
                    Gh(Y),
                    Wb(X),
                    Wb(Y),
                    Wl(X),
                    Wl(Y),
                    Uh(X),
                    Unlock(X)
                ],
                ReplayVerdict {
                    delivered: alloc::vec![],
                    skipped: 1,
                    final_head: (52, 1),
                    final_tail: (52, 1),
                    lock_free: false,
                },
            ),
            // Holder lost after committing entry and slot but before
            // publishing the header: the stealer detects the busy tail slot,
            // advances the header past it, then appends its own entry. The
            // consumer reads both.
            7 => (
                48,
                48,
                alloc::vec![
                    Lock(X),
                    Gh(X),
                    Wb(X),
                    Wl(X),
                    Tl,
                    Lock(Y),
                    Gh(Y),
                    Uh(Y),
                    Wb(Y),
                    Wl(Y),
                    Unlock(Y)
                ],
                ReplayVerdict {
                    delivered: alloc::vec![X, Y],
                    skipped: 0,
                    final_head: (104, 2),
                    // The stealer never published its own entry's tail
                    // advance; that entry is still recovered via its busy
                    // slot.
                    final_tail: (52, 1),
                    lock_free: true,
                },
            ),
            // Holder completes everything except the release: the stealer
            // finds a clean, already-published tail and appends normally
            // after it. The consumer reads both entries.
            8 => (
                48,
                48,
                alloc::vec![
                    Lock(X),
                    Gh(X),
                    Wb(X),
                    Wl(X),
                    Uh(X),
                    Tl,
                    Lock(Y),
                    Gh(Y),
                    Wb(Y),
                    Wl(Y),
                    Uh(Y),
                    Unlock(Y)
                ],
                ReplayVerdict {
                    delivered: alloc::vec![X, Y],
                    skipped: 0,
                    final_head: (104, 2),
                    final_tail: (104, 2),
                    lock_free: true,
                },
            ),
            _ => return None,
        };
    Some((
        LivenessTrace {
            spec,
            x_body: alloc::vec![b'x'; x_len],
            y_body: alloc::vec![b'y'; y_len],
            actions,
        },
        verdict,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::FaultSchedule;
    use alloc::collections::VecDeque;
    use proptest::prelude::*;

    const OWNER: NodeId = NodeId(1);
    const P1: NodeId = NodeId(2);
    const P2: NodeId = NodeId(3);

    fn setup(spec: RingSpec) -> (Fabric, Ring, Consumer) {
        let mut fab = Fabric::new(FaultSchedule::default());
        let ring = Ring::create(&mut fab, OWNER, spec).unwrap();
        let consumer = Consumer::new(ring, 1);
        (fab, ring, consumer)
    }

    fn small_spec() -> RingSpec {
        RingSpec { buffer_size: 256, slot_count: 8, lock_timeout: 50 }
    }

    #[test]
    fn first_append_from_zeroed_state() {
        let (mut fab, ring, mut z) = setup(small_spec());
        let body = alloc::vec![7u8; 96]; // 100 bytes framed
        let out = append_now(&mut fab, ring, P1, &body, 0, 10).unwrap();
        assert_eq!(out, AppendOutcome::Committed { position: 0, slot: 0 });
        let view = header_view(&mut fab, &ring, OWNER).unwrap();
        assert_eq!(view.tail, (100, 1));
        assert_eq!(view.lock, 0);
        let slot = fab.read_word(OWNER, &ring.region, ring.spec.slot_offset(0)).unwrap();
        assert_eq!(words::unpack_slot(slot), (true, 100));
        match z.poll(&mut fab).unwrap() {
            PollOutcome::Delivered { bytes, position, slot } => {
                assert_eq!(bytes, body);
                assert_eq!((position, slot), (0, 0));
            }
            other => panic!("expected delivery, got {other:?}"),
        }
        let view = header_view(&mut fab, &ring, OWNER).unwrap();
        assert_eq!(view.head, (100, 1));
    }

    #[test]
    fn empty_ring_polls_empty() {
        let (mut fab, _ring, mut z) = setup(small_spec());
        assert_eq!(z.poll(&mut fab).unwrap(), PollOutcome::Empty);
    }

    #[test]
    fn oversized_entry_is_rejected_up_front() {
        let (mut fab, ring, _z) = setup(small_spec());
        let body = alloc::vec![0u8; 255]; // 259 framed > 256
        assert!(matches!(
            append_now(&mut fab, ring, P1, &body, 0, 0),
            Err(RingError::EntryTooLarge { .. })
        ));
    }

    /// Byte-set oracle for the space check: materialize the occupied bytes,
    /// apply the wrap-first placement, and test overlap plus the
    /// tail-may-not-land-in-occupied rule directly.
    fn oracle_fits(region: u32, tail: u32, head: u32, empty: bool, len: u32) -> Option<u32> {
        let r = region as usize;
        let mut used = alloc::vec![false; r];
        if !empty {
            if tail == head {
                used.iter_mut().for_each(|b| *b = true);
            } else {
                let mut i = head as usize;
                while i != tail as usize {
                    used[i] = true;
                    i = (i + 1) % r;
                }
            }
        }
        let ep = if tail as u64 + len as u64 <= region as u64 { tail } else { 0 };
        for j in ep..ep + len {
            if used[j as usize] {
                return None;
            }
        }
        let np = if (ep + len) as u64 >= region as u64 { 0 } else { ep + len };
        if !empty && tail != head {
            let mut i = head;
            loop {
                if i == np {
                    return None;
                }
                i = (i + 1) % region;
                if i == tail {
                    break;
                }
            }
        }
        Some(ep)
    }

    #[test]
    fn space_check_matches_byte_set_oracle_exhaustively() {
        let region = 64u32;
        for tail in 0..region {
            for head in 0..region {
                for len in 1..=region {
                    if tail == head {
                        assert_eq!(
                            append_fits(region, tail, head, true, len),
                            oracle_fits(region, tail, head, true, len),
                            "empty tail={tail} len={len}"
                        );
                    }
                    assert_eq!(
                        append_fits(region, tail, head, false, len),
                        oracle_fits(region, tail, head, false, len),
                        "tail={tail} head={head} len={len}"
                    );
                }
            }
        }
    }

    #[test]
    fn space_check_256_ring_examples() {
        // Wrapped placement is legal only while it stays strictly below the
        // head; larger entries must abort.
        assert_eq!(append_fits(256, 200, 150, false, 100), oracle_fits(256, 200, 150, false, 100));
        assert_eq!(append_fits(256, 200, 150, false, 160), None);
        // Occupied range wrapped around the end: no placement fits a gap
        // smaller than the entry.
        assert_eq!(append_fits(256, 100, 200, false, 120), None);
        assert_eq!(append_fits(256, 100, 200, false, 96), Some(100));
    }

    #[test]
    fn append_wraps_to_zero_when_tail_gap_too_small() {
        let spec = RingSpec { buffer_size: 224, slot_count: 8, lock_timeout: 50 };
        let (mut fab, ring, mut z) = setup(spec);
        let body = alloc::vec![5u8; 56]; // 60 framed
        for _ in 0..3 {
            append_now(&mut fab, ring, P1, &body, 0, 0).unwrap();
            z.poll(&mut fab).unwrap();
        }
        // Tail at 180; 180 + 60 > 224, so the entry lands at offset 0.
        let out = append_now(&mut fab, ring, P1, &body, 0, 0).unwrap();
        assert_eq!(out, AppendOutcome::Committed { position: 0, slot: 3 });
        let view = header_view(&mut fab, &ring, OWNER).unwrap();
        assert_eq!(view.tail, (60, 4));
        match z.poll(&mut fab).unwrap() {
            PollOutcome::Delivered { bytes, position, .. } => {
                assert_eq!(position, 0);
                assert_eq!(bytes, body);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn append_ending_exactly_at_boundary_wraps_tail_pointer() {
        let spec = RingSpec { buffer_size: 240, slot_count: 8, lock_timeout: 50 };
        let (mut fab, ring, mut z) = setup(spec);
        let body = alloc::vec![5u8; 56]; // 60 framed
        for _ in 0..3 {
            append_now(&mut fab, ring, P1, &body, 0, 0).unwrap();
            z.poll(&mut fab).unwrap();
        }
        let out = append_now(&mut fab, ring, P1, &body, 0, 0).unwrap();
        assert_eq!(out, AppendOutcome::Committed { position: 180, slot: 3 });
        let view = header_view(&mut fab, &ring, OWNER).unwrap();
        assert_eq!(view.tail, (0, 4));
    }

    #[test]
    fn append_without_draining_reports_full() {
        let (mut fab, ring, _z) = setup(small_spec());
        let body = alloc::vec![1u8; 60]; // 64 framed
        let mut committed = 0;
        loop {
            match append_now(&mut fab, ring, P1, &body, 0, 0).unwrap() {
                AppendOutcome::Committed { .. } => committed += 1,
                AppendOutcome::Full => break,
                other => panic!("{other:?}"),
            }
            assert!(committed < 10);
        }
        // 256 / 64: three fit; the fourth's advanced tail would land on the
        // head.
        assert_eq!(committed, 3);
    }

    #[test]
    fn size_region_exhaustion_reports_full() {
        let spec = RingSpec { buffer_size: 1024, slot_count: 4, lock_timeout: 50 };
        let (mut fab, ring, _z) = setup(spec);
        let body = alloc::vec![1u8; 8];
        for _ in 0..4 {
            assert!(matches!(
                append_now(&mut fab, ring, P1, &body, 0, 0).unwrap(),
                AppendOutcome::Committed { .. }
            ));
        }
        // All four slots busy: the size tail has lapped onto the head.
        assert_eq!(append_now(&mut fab, ring, P1, &body, 0, 0).unwrap(), AppendOutcome::Full);
    }

    #[test]
    fn lock_free_acquires_held_busy_expired_steals() {
        let (mut fab, ring, _z) = setup(small_spec());
        let mut a = ProducerSession::new(ring, P1, b"a", 0).unwrap();
        assert_eq!(a.step_lock(&mut fab, 10).unwrap(), LockAttempt::Acquired);

        let mut b = ProducerSession::new(ring, P2, b"b", 0).unwrap();
        assert_eq!(b.step_lock(&mut fab, 30).unwrap(), LockAttempt::Busy);

        let mut c = ProducerSession::new(ring, P2, b"c", 0).unwrap();
        assert_eq!(c.step_lock(&mut fab, 61).unwrap(), LockAttempt::StolenThenAcquired);
        assert!(c.stole_lock());
    }

    #[test]
    fn gh_clean_on_idle_ring() {
        let (mut fab, ring, _z) = setup(small_spec());
        let mut s = ProducerSession::new(ring, P1, b"hello", 0).unwrap();
        s.step_lock(&mut fab, 0).unwrap();
        assert_eq!(s.step_gh(&mut fab).unwrap(), GhOutcome::Clean);
    }

    /// A holder lost after its size write leaves a busy tail slot; the next
    /// producer advances the header past it and both entries reach the
    /// consumer.
    #[test]
    fn stale_slot_advanced_and_both_entries_consumed() {
        let (mut fab, ring, mut z) = setup(small_spec());
        let lost_body = alloc::vec![9u8; 76]; // 80 framed
        let mut lost = ProducerSession::new(ring, P1, &lost_body, 0).unwrap();
        lost.step_lock(&mut fab, 0).unwrap();
        lost.step_gh(&mut fab).unwrap();
        lost.step_wb(&mut fab).unwrap();
        lost.step_wl(&mut fab, 0).unwrap();
        assert_eq!(lost.poll_wl(&fab), Some(true));
        // ...and the holder dies here: no header update, no unlock.

        let fresh_body = alloc::vec![4u8; 20];
        let mut fresh = ProducerSession::new(ring, P2, &fresh_body, 0).unwrap();
        assert_eq!(fresh.step_lock(&mut fab, 60).unwrap(), LockAttempt::StolenThenAcquired);
        assert_eq!(fresh.step_gh(&mut fab).unwrap(), GhOutcome::StaleSlot);
        assert_eq!(fresh.step_uh_stale(&mut fab).unwrap(), GhOutcome::Clean);
        // Header advanced by the lost entry's recorded size.
        let view = header_view(&mut fab, &ring, OWNER).unwrap();
        assert_eq!(view.tail, (80, 1));
        fresh.step_wb(&mut fab).unwrap();
        fresh.step_wl(&mut fab, 60).unwrap();
        assert_eq!(fresh.poll_wl(&fab), Some(true));
        fresh.step_uh_commit(&mut fab).unwrap();
        fresh.step_unlock(&mut fab).unwrap();

        let first = z.poll(&mut fab).unwrap();
        assert!(matches!(first, PollOutcome::Delivered { ref bytes, .. } if *bytes == lost_body));
        let second = z.poll(&mut fab).unwrap();
        assert!(matches!(second, PollOutcome::Delivered { ref bytes, .. } if *bytes == fresh_body));
        assert_eq!(z.poll(&mut fab).unwrap(), PollOutcome::Empty);
    }

    #[test]
    fn overwritten_entry_is_skipped_with_head_advanced() {
        let (mut fab, ring, mut z) = setup(small_spec());
        let body = alloc::vec![3u8; 60];
        append_now(&mut fab, ring, P1, &body, 0, 0).unwrap();
        // A stale write mangles one byte of the committed entry.
        fab.write(P2, &ring.region, DATA_OFFSET + 10, alloc::vec![0xee], 0).unwrap();
        match z.poll(&mut fab).unwrap() {
            PollOutcome::CorruptSkipped { position, slot, size } => {
                assert_eq!((position, slot, size), (0, 0, 64));
            }
            other => panic!("{other:?}"),
        }
        let view = header_view(&mut fab, &ring, OWNER).unwrap();
        assert_eq!(view.head, (64, 1));
        assert_eq!(z.poll(&mut fab).unwrap(), PollOutcome::Empty);
    }

    #[test]
    fn all_builtin_cases_match_expected_verdicts() {
        for case in 1..=8u8 {
            let (trace, expected) = builtin_case(case).unwrap();
            let (verdict, _fab) = replay_trace(&trace).unwrap();
            assert_eq!(verdict, expected, "case {case}");
        }
        assert!(builtin_case(0).is_none());
        assert!(builtin_case(9).is_none());
    }

    /// Fault-free appends and polls against a plain FIFO queue: every
    /// committed body comes back exactly once, in commit order.
    #[test]
    fn fifo_against_deque_oracle() {
        use rand_core::{RngCore, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xfeed);
        for _ in 0..50 {
            let spec = RingSpec {
                buffer_size: 256 + 8 * (rng.next_u32() % 64),
                slot_count: 4 + rng.next_u32() % 12,
                lock_timeout: 50,
            };
            let (mut fab, ring, mut z) = setup(spec);
            let mut oracle: VecDeque<Vec<u8>> = VecDeque::new();
            let producers = [P1, P2, NodeId(4)];
            for step in 0..200u64 {
                if rng.next_u32() % 3 == 0 {
                    match z.poll(&mut fab).unwrap() {
                        PollOutcome::Empty => assert!(oracle.is_empty()),
                        PollOutcome::Delivered { bytes, .. } => {
                            assert_eq!(bytes, oracle.pop_front().unwrap());
                        }
                        PollOutcome::CorruptSkipped { .. } => panic!("corruption without faults"),
                    }
                } else {
                    let who = producers[(rng.next_u32() % 3) as usize];
                    let len = (rng.next_u32() % 80) as usize;
                    let mut body = alloc::vec![0u8; len];
                    rng.fill_bytes(&mut body);
                    match append_now(&mut fab, ring, who, &body, step, step).unwrap() {
                        AppendOutcome::Committed { .. } => oracle.push_back(body),
                        AppendOutcome::Full => {}
                        other => panic!("{other:?}"),
                    }
                }
            }
            while let PollOutcome::Delivered { bytes, .. } = z.poll(&mut fab).unwrap() {
                assert_eq!(bytes, oracle.pop_front().unwrap());
            }
            assert!(oracle.is_empty());
        }
    }

    proptest! {
        /// After every committed append, the tail equals the two update
        /// formulas applied to its prior value: wrap-first placement, then
        /// advance-or-wrap for the byte pointer, increment mod slot count
        /// for the slot pointer.
        #[test]
        fn tail_follows_update_formulas(lens in proptest::collection::vec(0usize..120, 1..40)) {
            let spec = small_spec();
            let (mut fab, ring, mut z) = setup(spec);
            let mut prev = (0u32, 0u32);
            for (i, len) in lens.into_iter().enumerate() {
                let body = alloc::vec![i as u8; len];
                match append_now(&mut fab, ring, P1, &body, i as u64, 0).unwrap() {
                    AppendOutcome::Committed { position, .. } => {
                        let size = len as u32 + ENTRY_OVERHEAD;
                        let placed = if prev.0 as u64 + size as u64 <= spec.buffer_size as u64 {
                            prev.0
                        } else {
                            0
                        };
                        prop_assert_eq!(position, placed);
                        let advanced = if (placed + size) as u64 >= spec.buffer_size as u64 {
                            0
                        } else {
                            placed + size
                        };
                        let view = header_view(&mut fab, &ring, OWNER).unwrap();
                        prop_assert_eq!(view.tail, (advanced, (prev.1 + 1) % spec.slot_count));
                        prev = view.tail;
                    }
                    AppendOutcome::Full => {
                        z.poll(&mut fab).unwrap();
                        let view = header_view(&mut fab, &ring, OWNER).unwrap();
                        prop_assert_eq!(view.tail, prev);
                    }
                    other => prop_assert!(false, "unexpected {:?}", other),
                }
            }
        }
    }
}
