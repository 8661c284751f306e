//! Single-decree ballot consensus used for coordinator leader election.
//!
//! Each election epoch is its own consensus instance whose decided value is
//! the leader's node id. Ballots are `(round, replica)` pairs, so two
//! candidates can never share a ballot; quorum intersection then guarantees
//! at most one decided leader per epoch, no matter how prepares, promises,
//! accepts, and acknowledgments interleave. A replica that loses learns the
//! higher ballot from its nack and abandons its candidacy.
//!
//! The machines here are pure message-in / messages-out state transitions,
//! which is what both the simulated deployment and the exhaustive
//! interleaving checker drive.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use crate::NodeId;

/// Election epoch: one consensus instance per epoch.
pub type Epoch = u64;

/// Proposal number, unique per candidate within an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Ballot {
    pub round: u32,
    pub replica: NodeId,
}

/// Election wire messages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ElectionMsg {
    Prepare { epoch: Epoch, ballot: Ballot },
    Promise {
        epoch: Epoch,
        ballot: Ballot,
        accepted: Option<(Ballot, NodeId)>,
        /// Registry log position of the promiser, for post-election state
        /// transfer.
        last_seq: u64,
    },
    Accept { epoch: Epoch, ballot: Ballot, value: NodeId },
    Accepted { epoch: Epoch, ballot: Ballot, value: NodeId },
    /// Rejection carrying the highest ballot the acceptor has promised.
    Nack { epoch: Epoch, promised: Ballot },
    /// Decision announcement from the winning proposer.
    Decided { epoch: Epoch, ballot: Ballot, value: NodeId },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct AcceptorState {
    promised: Option<Ballot>,
    accepted: Option<(Ballot, NodeId)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct ProposerState {
    epoch: Epoch,
    ballot: Ballot,
    promises: BTreeMap<NodeId, Option<(Ballot, NodeId)>>,
    promise_seqs: BTreeMap<NodeId, u64>,
    accepted_from: BTreeSet<NodeId>,
    /// Value being proposed once phase one completes.
    value: Option<NodeId>,
}

/// Role as seen by the election layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElectionRole {
    Backup,
    Candidate,
    Primary,
}

/// The election face of one coordinator replica.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ElectionReplica {
    pub id: NodeId,
    pub peers: Vec<NodeId>,
    /// Highest epoch with a known decision, and its leader.
    pub epoch: Epoch,
    pub leader: Option<NodeId>,
    /// Ballot under which the current epoch was decided.
    pub decided_ballot: Option<Ballot>,
    /// Registry log position, included in promises for state transfer.
    pub last_seq: u64,
    acceptors: BTreeMap<Epoch, AcceptorState>,
    proposer: Option<ProposerState>,
    next_round: u32,
    /// Every `(epoch, ballot, value)` this replica decided, in order; test
    /// harnesses assert agreement and monotonicity over these.
    pub decisions: Vec<(Epoch, Ballot, NodeId)>,
}

impl ElectionReplica {
    pub fn new(id: NodeId, peers: Vec<NodeId>) -> Self {
        Self {
            id,
            peers,
            epoch: 0,
            leader: None,
            decided_ballot: None,
            last_seq: 0,
            acceptors: BTreeMap::new(),
            proposer: None,
            next_round: 1,
            decisions: Vec::new(),
        }
    }

    fn majority(&self) -> usize {
        self.peers.len() / 2 + 1
    }

    pub fn role(&self) -> ElectionRole {
        if self.leader == Some(self.id) {
            ElectionRole::Primary
        } else if self.proposer.is_some() {
            ElectionRole::Candidate
        } else {
            ElectionRole::Backup
        }
    }

    pub fn is_primary(&self) -> bool {
        self.role() == ElectionRole::Primary
    }

    /// Term under which this replica currently acts as primary.
    pub fn primacy(&self) -> Option<(Epoch, Ballot)> {
        if self.is_primary() {
            Some((self.epoch, self.decided_ballot?))
        } else {
            None
        }
    }

    pub fn candidacy(&self) -> Option<(Epoch, Ballot)> {
        self.proposer.as_ref().map(|p| (p.epoch, p.ballot))
    }

    /// Abandons any in-flight candidacy (used on candidacy timeout).
    pub fn abandon_candidacy(&mut self) {
        self.proposer = None;
    }

    /// Starts an election for `epoch`, returning the prepares to send.
    /// Self-addressed messages are handled inline.
    pub fn start_election(&mut self, epoch: Epoch) -> Vec<(NodeId, ElectionMsg)> {
        let ballot = Ballot { round: self.next_round, replica: self.id };
        self.next_round += 1;
        self.proposer = Some(ProposerState {
            epoch,
            ballot,
            promises: BTreeMap::new(),
            promise_seqs: BTreeMap::new(),
            accepted_from: BTreeSet::new(),
            value: None,
        });
        let msg = ElectionMsg::Prepare { epoch, ballot };
        self.fan_out(msg)
    }

    fn fan_out(&mut self, msg: ElectionMsg) -> Vec<(NodeId, ElectionMsg)> {
        let mut out = Vec::new();
        for peer in self.peers.clone() {
            if peer == self.id {
                out.extend(self.handle(self.id, msg.clone()));
            } else {
                out.push((peer, msg.clone()));
            }
        }
        out
    }

    /// Processes one election message, returning messages to send (self
    /// deliveries already folded in). Replies to prepares and accepts are
    /// routed to the ballot's proposer; `from` identifies the answering
    /// acceptor on promises and acknowledgments.
    pub fn handle(&mut self, from: NodeId, msg: ElectionMsg) -> Vec<(NodeId, ElectionMsg)> {
        match msg {
            ElectionMsg::Prepare { epoch, ballot } => {
                if epoch <= self.epoch {
                    return Vec::new(); // already decided locally
                }
                let acc = self.acceptors.entry(epoch).or_default();
                if acc.promised.is_some_and(|p| p > ballot) {
                    let promised = self.acceptors[&epoch].promised.unwrap();
                    return self.reply(ballot.replica, ElectionMsg::Nack { epoch, promised });
                }
                let acc = self.acceptors.get_mut(&epoch).unwrap();
                acc.promised = Some(ballot);
                let accepted = acc.accepted;
                let last_seq = self.last_seq;
                self.reply(ballot.replica, ElectionMsg::Promise { epoch, ballot, accepted, last_seq })
            }
            ElectionMsg::Promise { epoch, ballot, accepted, last_seq } => {
                let majority = self.majority();
                let Some(p) = self.proposer.as_mut() else { return Vec::new() };
                if p.epoch != epoch || p.ballot != ballot || p.value.is_some() {
                    return Vec::new();
                }
                p.promises.insert(from, accepted);
                p.promise_seqs.insert(from, last_seq);
                if p.promises.len() < majority {
                    return Vec::new();
                }
                // Phase one complete: adopt the highest accepted value, or
                // propose ourselves as leader.
                let chosen = p
                    .promises
                    .values()
                    .flatten()
                    .max_by_key(|(b, _)| *b)
                    .map(|&(_, v)| v)
                    .unwrap_or(self.id);
                p.value = Some(chosen);
                self.fan_out(ElectionMsg::Accept { epoch, ballot, value: chosen })
            }
            ElectionMsg::Accept { epoch, ballot, value } => {
                if epoch <= self.epoch {
                    return Vec::new();
                }
                let acc = self.acceptors.entry(epoch).or_default();
                if acc.promised.is_some_and(|p| p > ballot) {
                    let promised = self.acceptors[&epoch].promised.unwrap();
                    return self.reply(ballot.replica, ElectionMsg::Nack { epoch, promised });
                }
                let acc = self.acceptors.get_mut(&epoch).unwrap();
                acc.promised = Some(ballot);
                acc.accepted = Some((ballot, value));
                self.reply(ballot.replica, ElectionMsg::Accepted { epoch, ballot, value })
            }
            ElectionMsg::Accepted { epoch, ballot, value } => {
                let majority = self.majority();
                let Some(p) = self.proposer.as_mut() else { return Vec::new() };
                if p.epoch != epoch || p.ballot != ballot || p.value != Some(value) {
                    return Vec::new();
                }
                p.accepted_from.insert(from);
                if p.accepted_from.len() < majority {
                    return Vec::new();
                }
                self.proposer = None;
                self.fan_out(ElectionMsg::Decided { epoch, ballot, value })
            }
            ElectionMsg::Nack { epoch, promised } => {
                if let Some(p) = &self.proposer {
                    if p.epoch == epoch && promised > p.ballot {
                        self.next_round = self.next_round.max(promised.round + 1);
                        self.proposer = None;
                    }
                }
                Vec::new()
            }
            ElectionMsg::Decided { epoch, ballot, value } => {
                if epoch <= self.epoch && self.leader.is_some() {
                    return Vec::new();
                }
                self.epoch = epoch;
                self.leader = Some(value);
                self.decided_ballot = Some(ballot);
                self.decisions.push((epoch, ballot, value));
                if let Some(p) = &self.proposer {
                    if p.epoch <= epoch {
                        self.proposer = None;
                    }
                }
                Vec::new()
            }
        }
    }

    fn reply(&mut self, to: NodeId, msg: ElectionMsg) -> Vec<(NodeId, ElectionMsg)> {
        if to == self.id {
            self.handle(self.id, msg)
        } else {
            alloc::vec![(to, msg)]
        }
    }

    /// Promise-quorum member holding the longest registry log for the
    /// proposer's current candidacy, if phase one completed.
    pub fn best_state_source(&self) -> Option<(NodeId, u64)> {
        let p = self.proposer.as_ref()?;
        p.promise_seqs.iter().max_by_key(|&(id, seq)| (*seq, *id)).map(|(&id, &seq)| (id, seq))
    }

    /// Compact canonical encoding for state-space memoization in
    /// interleaving checkers.
    pub fn canon(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.id.0.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.push(self.leader.is_some() as u8);
        if let Some(l) = self.leader {
            out.extend_from_slice(&l.0.to_le_bytes());
        }
        out.extend_from_slice(&self.next_round.to_le_bytes());
        for (e, a) in &self.acceptors {
            out.extend_from_slice(&e.to_le_bytes());
            match a.promised {
                Some(b) => {
                    out.push(1);
                    out.extend_from_slice(&b.round.to_le_bytes());
                    out.extend_from_slice(&b.replica.0.to_le_bytes());
                }
                None => out.push(0),
            }
            match a.accepted {
                Some((b, v)) => {
                    out.push(1);
                    out.extend_from_slice(&b.round.to_le_bytes());
                    out.extend_from_slice(&b.replica.0.to_le_bytes());
                    out.extend_from_slice(&v.0.to_le_bytes());
                }
                None => out.push(0),
            }
        }
        match &self.proposer {
            None => out.push(0),
            Some(p) => {
                out.push(1);
                out.extend_from_slice(&p.epoch.to_le_bytes());
                out.extend_from_slice(&p.ballot.round.to_le_bytes());
                out.extend_from_slice(&p.ballot.replica.0.to_le_bytes());
                out.extend_from_slice(&(p.promises.len() as u32).to_le_bytes());
                for (id, acc) in &p.promises {
                    out.extend_from_slice(&id.0.to_le_bytes());
                    out.push(acc.is_some() as u8);
                }
                out.extend_from_slice(&(p.accepted_from.len() as u32).to_le_bytes());
                for id in &p.accepted_from {
                    out.extend_from_slice(&id.0.to_le_bytes());
                }
                match p.value {
                    Some(v) => {
                        out.push(1);
                        out.extend_from_slice(&v.0.to_le_bytes());
                    }
                    None => out.push(0),
                }
            }
        }
    }
}

impl ElectionMsg {
    pub fn encode(&self) -> Vec<u8> {
        fn ballot(out: &mut Vec<u8>, b: &Ballot) {
            out.extend_from_slice(&b.round.to_le_bytes());
            out.extend_from_slice(&b.replica.0.to_le_bytes());
        }
        let mut out = Vec::new();
        match self {
            ElectionMsg::Prepare { epoch, ballot: b } => {
                out.push(1);
                out.extend_from_slice(&epoch.to_le_bytes());
                ballot(&mut out, b);
            }
            ElectionMsg::Promise { epoch, ballot: b, accepted, last_seq } => {
                out.push(2);
                out.extend_from_slice(&epoch.to_le_bytes());
                ballot(&mut out, b);
                match accepted {
                    Some((ab, v)) => {
                        out.push(1);
                        ballot(&mut out, ab);
                        out.extend_from_slice(&v.0.to_le_bytes());
                    }
                    None => out.push(0),
                }
                out.extend_from_slice(&last_seq.to_le_bytes());
            }
            ElectionMsg::Accept { epoch, ballot: b, value } => {
                out.push(3);
                out.extend_from_slice(&epoch.to_le_bytes());
                ballot(&mut out, b);
                out.extend_from_slice(&value.0.to_le_bytes());
            }
            ElectionMsg::Accepted { epoch, ballot: b, value } => {
                out.push(4);
                out.extend_from_slice(&epoch.to_le_bytes());
                ballot(&mut out, b);
                out.extend_from_slice(&value.0.to_le_bytes());
            }
            ElectionMsg::Nack { epoch, promised } => {
                out.push(5);
                out.extend_from_slice(&epoch.to_le_bytes());
                ballot(&mut out, promised);
            }
            ElectionMsg::Decided { epoch, ballot: b, value } => {
                out.push(6);
                out.extend_from_slice(&epoch.to_le_bytes());
                ballot(&mut out, b);
                out.extend_from_slice(&value.0.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<Self> {
        fn ballot(b: &[u8]) -> Option<Ballot> {
            Some(Ballot {
                round: u32::from_le_bytes(b.get(0..4)?.try_into().ok()?),
                replica: NodeId(u16::from_le_bytes(b.get(4..6)?.try_into().ok()?)),
            })
        }
        let (&tag, r) = bytes.split_first()?;
        let epoch = u64::from_le_bytes(r.get(0..8)?.try_into().ok()?);
        let r = &r[8..];
        match tag {
            1 => Some(ElectionMsg::Prepare { epoch, ballot: ballot(r)? }),
            2 => {
                let b = ballot(r)?;
                let (&flag, rest) = r[6..].split_first()?;
                let (accepted, rest) = if flag == 1 {
                    let ab = ballot(rest)?;
                    let v = NodeId(u16::from_le_bytes(rest.get(6..8)?.try_into().ok()?));
                    (Some((ab, v)), &rest[8..])
                } else {
                    (None, rest)
                };
                let last_seq = u64::from_le_bytes(rest.get(0..8)?.try_into().ok()?);
                Some(ElectionMsg::Promise { epoch, ballot: b, accepted, last_seq })
            }
            3 | 4 => {
                let b = ballot(r)?;
                let value = NodeId(u16::from_le_bytes(r.get(6..8)?.try_into().ok()?));
                if tag == 3 {
                    Some(ElectionMsg::Accept { epoch, ballot: b, value })
                } else {
                    Some(ElectionMsg::Accepted { epoch, ballot: b, value })
                }
            }
            5 => Some(ElectionMsg::Nack { epoch, promised: ballot(r)? }),
            6 => {
                let b = ballot(r)?;
                let value = NodeId(u16::from_le_bytes(r.get(6..8)?.try_into().ok()?));
                Some(ElectionMsg::Decided { epoch, ballot: b, value })
            }
            _ => None,
        }
    }
}
