//! Domain types and protocol parameters shared by every other module.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sortition::Credential;
use crate::time::Time;

pub type Round = u32;
pub type Period = u32;
pub type Step = u32;

/// Step numbers within a period.
pub const STEP_PROPOSE: Step = 1;
pub const STEP_SOFT: Step = 2;
pub const STEP_CERT: Step = 3;
pub const STEP_FIRST_NEXT: Step = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub u32);

impl UserId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "u{}", self.0)
    }
}

/// Abstract block (or block hash).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Value(pub u32);

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Vote payload: a value, or `Open` (next-votes only).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Payload {
    Val(Value),
    Open,
}

impl Payload {
    pub fn value(self) -> Option<Value> {
        match self {
            Payload::Val(v) => Some(v),
            Payload::Open => None,
        }
    }
}

impl fmt::Display for Payload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Payload::Val(v) => write!(f, "{v}"),
            Payload::Open => f.write_str("open"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MsgKind {
    Proposal,
    SoftVote,
    CertVote,
    NextVote,
}

impl MsgKind {
    /// The step class a step number belongs to.
    pub fn for_step(step: Step) -> Option<MsgKind> {
        match step {
            0 => None,
            STEP_PROPOSE => Some(MsgKind::Proposal),
            STEP_SOFT => Some(MsgKind::SoftVote),
            STEP_CERT => Some(MsgKind::CertVote),
            _ => Some(MsgKind::NextVote),
        }
    }

    pub fn accepts_step(self, step: Step) -> bool {
        MsgKind::for_step(step) == Some(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParamError {
    #[error("n_users must be positive")]
    NoUsers,
    #[error("committee_size must be positive")]
    EmptyCommittee,
    #[error("committee_size {committee} exceeds n_users {users}")]
    CommitteeTooLarge { committee: u32, users: u32 },
    #[error("n_values must be positive")]
    NoValues,
    #[error("{name} = {tau} must be positive")]
    ZeroThreshold { name: &'static str, tau: u32 },
    #[error("{name} = {tau} breaks quorum overlap: two {tau}-quorums of a {committee}-committee may share fewer than f+1 = {needed} members")]
    QuorumOverlap {
        name: &'static str,
        tau: u32,
        committee: u32,
        needed: u32,
    },
    #[error("{name} = {tau} is unreachable: only {honest} of {committee} committee seats are guaranteed honest")]
    QuorumUnreachable {
        name: &'static str,
        tau: u32,
        committee: u32,
        honest: u32,
    },
    #[error("{name} must be strictly positive")]
    NonPositiveDuration { name: &'static str },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProtocolParams {
    pub n_users: u32,
    pub committee_size: u32,
    pub tau_propose: u32,
    pub tau_soft: u32,
    pub tau_cert: u32,
    pub tau_next: u32,
    pub lambda_propose: Time,
    pub lambda_step: Time,
    pub delivery_bound: Time,
    pub seed: u64,
    /// Size of the candidate value domain `{0, .., n_values - 1}`.
    #[serde(default = "default_n_values")]
    pub n_values: u32,
}

fn default_n_values() -> u32 {
    2
}

/// Largest number of faulty seats a committee of `committee` members tolerates.
pub fn fault_bound(committee: u32) -> u32 {
    committee.saturating_sub(1) / 3
}

/// The threshold `2f + 1` where `f = fault_bound(committee)`.
pub fn default_threshold(committee: u32) -> u32 {
    2 * fault_bound(committee) + 1
}

impl ProtocolParams {
    /// Parameters with all thresholds set to the smallest value that makes
    /// any two quorums of a committee share `f + 1` members.
    pub fn with_committee(n_users: u32, committee_size: u32) -> Self {
        let tau = min_overlap_threshold(committee_size);
        ProtocolParams {
            n_users,
            committee_size,
            tau_propose: 1,
            tau_soft: tau,
            tau_cert: tau,
            tau_next: tau,
            lambda_propose: Time::from_int(2),
            lambda_step: Time::from_int(4),
            delivery_bound: Time::from_int(1),
            seed: 0,
            n_values: 2,
        }
    }

    pub fn with_tau(mut self, tau: u32) -> Self {
        self.tau_soft = tau;
        self.tau_cert = tau;
        self.tau_next = tau;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn fault_bound(&self) -> u32 {
        fault_bound(self.committee_size)
    }

    pub fn users(&self) -> impl Iterator<Item = UserId> {
        (0..self.n_users).map(UserId)
    }

    pub fn threshold_for(&self, kind: MsgKind) -> u32 {
        match kind {
            MsgKind::Proposal => self.tau_propose,
            MsgKind::SoftVote => self.tau_soft,
            MsgKind::CertVote => self.tau_cert,
            MsgKind::NextVote => self.tau_next,
        }
    }

    /// Local timer value at which a user at `step` times out.
    ///
    /// Step 1 times out into soft-voting at `lambda_propose`; the `k`-th step
    /// (`k >= 4`) next-vote fires at `lambda_propose + (k - 3) * lambda_step`.
    pub fn timeout_for_step(&self, step: Step) -> Time {
        if step <= STEP_PROPOSE {
            return self.lambda_propose;
        }
        let next_vote_step = (step + 1).max(STEP_FIRST_NEXT);
        self.lambda_propose + self.lambda_step * i64::from(next_vote_step - 3)
    }

    pub fn validate(self) -> Result<Self, ParamError> {
        validate_params(self)
    }
}

/// Smallest `tau` with `2 * tau - committee >= f + 1`.
pub fn min_overlap_threshold(committee: u32) -> u32 {
    let needed = committee + fault_bound(committee) + 1;
    needed.div_ceil(2)
}

/// Accepts parameters iff every invariant holds; reports the first violated one.
pub fn validate_params(p: ProtocolParams) -> Result<ProtocolParams, ParamError> {
    if p.n_users == 0 {
        return Err(ParamError::NoUsers);
    }
    if p.committee_size == 0 {
        return Err(ParamError::EmptyCommittee);
    }
    if p.committee_size > p.n_users {
        return Err(ParamError::CommitteeTooLarge {
            committee: p.committee_size,
            users: p.n_users,
        });
    }
    if p.n_values == 0 {
        return Err(ParamError::NoValues);
    }
    if p.tau_propose == 0 {
        return Err(ParamError::ZeroThreshold {
            name: "tau_propose",
            tau: 0,
        });
    }
    let c = p.committee_size;
    let f = fault_bound(c);
    for (name, tau) in [
        ("tau_soft", p.tau_soft),
        ("tau_cert", p.tau_cert),
        ("tau_next", p.tau_next),
    ] {
        if tau == 0 {
            return Err(ParamError::ZeroThreshold { name, tau });
        }
        // |q1 ∩ q2| >= 2 tau - C must reach f + 1.
        if 2 * tau < c + f + 1 {
            return Err(ParamError::QuorumOverlap {
                name,
                tau,
                committee: c,
                needed: f + 1,
            });
        }
        if tau > c - f {
            return Err(ParamError::QuorumUnreachable {
                name,
                tau,
                committee: c,
                honest: c - f,
            });
        }
    }
    for (name, d) in [
        ("lambda_propose", p.lambda_propose),
        ("lambda_step", p.lambda_step),
        ("delivery_bound", p.delivery_bound),
    ] {
        if !d.is_positive() {
            return Err(ParamError::NonPositiveDuration { name });
        }
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Vote {
    pub voter: UserId,
    pub round: Round,
    pub period: Period,
    pub step: Step,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VoteError {
    #[error("round, period and step must be positive (got {round}/{period}/{step})")]
    ZeroCoordinate {
        round: Round,
        period: Period,
        step: Step,
    },
    #[error("open payload is only legal at next-vote steps (>= 4), got step {0}")]
    OpenBeforeNextVote(Step),
    #[error("{kind:?} cannot be sent at step {step}")]
    KindStepMismatch { kind: MsgKind, step: Step },
    #[error("{0:?} must carry a value")]
    MissingValue(MsgKind),
}

pub fn mk_vote(
    voter: UserId,
    round: Round,
    period: Period,
    step: Step,
    payload: Payload,
) -> Result<Vote, VoteError> {
    if round == 0 || period == 0 || step == 0 {
        return Err(VoteError::ZeroCoordinate {
            round,
            period,
            step,
        });
    }
    if payload == Payload::Open && step < STEP_FIRST_NEXT {
        return Err(VoteError::OpenBeforeNextVote(step));
    }
    Ok(Vote {
        voter,
        round,
        period,
        step,
        payload,
    })
}

/// A protocol message as it travels on the network.
///
/// Field order matters: messages sort by coordinates first so that pools and
/// histories render in protocol order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Msg {
    pub round: Round,
    pub period: Period,
    pub step: Step,
    pub kind: MsgKind,
    pub sender: UserId,
    pub payload: Payload,
    pub credential: Credential,
}

impl Msg {
    /// Builds a message, checking the kind/step/payload correspondence.
    /// The credential is taken as given; sortition checks happen at the receiver.
    pub fn new(
        kind: MsgKind,
        sender: UserId,
        round: Round,
        period: Period,
        step: Step,
        payload: Payload,
        credential: Credential,
    ) -> Result<Msg, VoteError> {
        if round == 0 || period == 0 || step == 0 {
            return Err(VoteError::ZeroCoordinate {
                round,
                period,
                step,
            });
        }
        if !kind.accepts_step(step) {
            return Err(VoteError::KindStepMismatch { kind, step });
        }
        if payload == Payload::Open && kind != MsgKind::NextVote {
            return Err(VoteError::MissingValue(kind));
        }
        Ok(Msg {
            round,
            period,
            step,
            kind,
            sender,
            payload,
            credential,
        })
    }

    pub fn as_vote(&self) -> Vote {
        Vote {
            voter: self.sender,
            round: self.round,
            period: self.period,
            step: self.step,
            payload: self.payload,
        }
    }

    pub fn value(&self) -> Option<Value> {
        self.payload.value()
    }
}

impl fmt::Display for Msg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?}({}) from {} at {}/{}/{}",
            self.kind, self.payload, self.sender, self.round, self.period, self.step
        )
    }
}
