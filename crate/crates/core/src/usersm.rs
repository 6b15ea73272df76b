//! Honest user state machine.
//!
//! Handlers are pure: they take the current [`UState`] by reference and
//! return the successor state together with the messages to broadcast.
//! After every handler the user re-evaluates its buffered observations until
//! nothing more fires, so messages that arrived early are acted upon as soon
//! as the user reaches their round and period.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sortition::{self, Credential};
use crate::time::Time;
use crate::types::{
    Msg, MsgKind, Payload, Period, ProtocolParams, Round, Step, UserId, Value, Vote, STEP_CERT,
    STEP_FIRST_NEXT, STEP_PROPOSE, STEP_SOFT,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TimeoutKind {
    /// Joins round 1 (users start at round 0, before the protocol).
    Start,
    SoftVote,
    NextVote,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum UserError {
    #[error("{0} is corrupt; honest handlers do not apply")]
    Corrupt(UserId),
    #[error("{uid} cannot start ({round}, {period}): not ahead of ({cur_round}, {cur_period})")]
    PeriodNotAhead {
        uid: UserId,
        round: Round,
        period: Period,
        cur_round: Round,
        cur_period: Period,
    },
    #[error("{uid} has no {kind:?} timeout pending")]
    WrongTimeout { uid: UserId, kind: TimeoutKind },
    #[error("{uid} timeout not due: timer {timer} < deadline {deadline}")]
    TimeoutNotDue {
        uid: UserId,
        timer: Time,
        deadline: Time,
    },
    #[error("{uid} already soft-voted in ({round}, {period})")]
    AlreadySoftVoted {
        uid: UserId,
        round: Round,
        period: Period,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UState {
    pub id: UserId,
    pub corrupt: bool,
    /// Local clock, reset at every period start.
    pub timer: Time,
    /// Timer value of the next scheduled timeout.
    pub deadline: Time,
    pub round: Round,
    pub period: Period,
    pub step: Step,
    /// Starting value carried into the current period.
    pub stv: Option<Value>,
    #[serde(with = "crate::serde_util")]
    pub proposals_seen: BTreeMap<(Round, Period), BTreeSet<(Credential, Value)>>,
    #[serde(with = "crate::serde_util")]
    pub softvotes_seen: BTreeMap<(Round, Period, Value), BTreeSet<UserId>>,
    #[serde(with = "crate::serde_util")]
    pub certvotes_seen: BTreeMap<(Round, Period, Value), BTreeSet<UserId>>,
    #[serde(with = "crate::serde_util")]
    pub nextvotes_seen: BTreeMap<(Round, Period, Step, Payload), BTreeSet<UserId>>,
    #[serde(with = "crate::serde_util")]
    pub blocks: BTreeMap<Round, Vec<Value>>,
    /// Cert-votes observed (received or emitted) per `(round, period)`.
    #[serde(with = "crate::serde_util")]
    pub certvotes: BTreeMap<(Round, Period), Vec<Vote>>,
    pub has_certvoted: BTreeSet<(Round, Period)>,
    pub has_softvoted: BTreeSet<(Round, Period)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserOutput {
    pub state: UState,
    pub outgoing: Vec<Msg>,
    /// Blocks certified by this transition, in order. Usually empty or one.
    pub certified: Vec<(Round, Value)>,
}

/// Block a user proposes when it has no starting value.
pub fn candidate_value(params: &ProtocolParams, u: UserId, round: Round) -> Value {
    let h = sortition::weight(params.seed ^ 0xA5A5_5A5A_C3C3_3C3C, u, round, 0, 0);
    Value((h % u64::from(params.n_values.max(1))) as u32)
}

impl UState {
    pub fn new(id: UserId) -> Self {
        UState {
            id,
            corrupt: false,
            timer: Time::ZERO,
            deadline: Time::ZERO,
            round: 0,
            period: 0,
            step: 0,
            stv: None,
            proposals_seen: BTreeMap::new(),
            softvotes_seen: BTreeMap::new(),
            certvotes_seen: BTreeMap::new(),
            nextvotes_seen: BTreeMap::new(),
            blocks: BTreeMap::new(),
            certvotes: BTreeMap::new(),
            has_certvoted: BTreeSet::new(),
            has_softvoted: BTreeSet::new(),
        }
    }

    pub fn started(&self) -> bool {
        self.round > 0
    }

    /// The timeout this user is waiting for.
    pub fn pending_timeout(&self) -> TimeoutKind {
        if !self.started() {
            TimeoutKind::Start
        } else if self.step == STEP_PROPOSE {
            TimeoutKind::SoftVote
        } else {
            TimeoutKind::NextVote
        }
    }

    pub fn timeout_due(&self) -> bool {
        self.timer >= self.deadline
    }

    /// Time left before the next timeout fires.
    pub fn time_to_timeout(&self) -> Time {
        self.deadline - self.timer
    }

    pub fn on_start(&self, params: &ProtocolParams) -> Result<UserOutput, UserError> {
        self.on_period_start(params, 1, 1, None)
    }

    pub fn on_period_start(
        &self,
        params: &ProtocolParams,
        round: Round,
        period: Period,
        stv: Option<Value>,
    ) -> Result<UserOutput, UserError> {
        self.ensure_honest()?;
        if (round, period) <= (self.round, self.period) {
            return Err(UserError::PeriodNotAhead {
                uid: self.id,
                round,
                period,
                cur_round: self.round,
                cur_period: self.period,
            });
        }
        let mut run = Run::new(self);
        run.start_period(params, round, period, stv);
        run.settle(params);
        Ok(run.finish())
    }

    pub fn on_softvote_timeout(&self, params: &ProtocolParams) -> Result<UserOutput, UserError> {
        self.ensure_honest()?;
        self.ensure_due(TimeoutKind::SoftVote)?;
        let key = (self.round, self.period);
        if self.has_softvoted.contains(&key) {
            return Err(UserError::AlreadySoftVoted {
                uid: self.id,
                round: self.round,
                period: self.period,
            });
        }
        let mut run = Run::new(self);
        let s = &mut run.state;
        s.step = STEP_SOFT;
        s.deadline = params.timeout_for_step(STEP_SOFT);
        s.has_softvoted.insert(key);
        if sortition::in_committee(params, s.id, s.round, s.period, STEP_SOFT) {
            let choice = if s.period > 1 && s.stv.is_some() {
                s.stv
            } else {
                s.best_proposal(s.round, s.period)
            };
            if let Some(v) = choice {
                run.emit(params, MsgKind::SoftVote, STEP_SOFT, Payload::Val(v));
            }
        }
        run.settle(params);
        Ok(run.finish())
    }

    pub fn on_nextvote_timeout(&self, params: &ProtocolParams) -> Result<UserOutput, UserError> {
        self.ensure_honest()?;
        self.ensure_due(TimeoutKind::NextVote)?;
        let mut run = Run::new(self);
        let s = &mut run.state;
        s.step = (s.step + 1).max(STEP_FIRST_NEXT);
        s.deadline = params.timeout_for_step(s.step);
        let step = s.step;
        if sortition::in_committee(params, s.id, s.round, s.period, step) {
            let payload = match s.soft_quorum(params, s.round, s.period) {
                Some(v) => Payload::Val(v),
                None => s.stv.map_or(Payload::Open, Payload::Val),
            };
            run.emit(params, MsgKind::NextVote, step, payload);
        }
        run.settle(params);
        Ok(run.finish())
    }

    /// Records `m` and reacts to any quorum it completes. Messages with an
    /// invalid credential are dropped without any state change.
    pub fn on_receive(&self, params: &ProtocolParams, m: &Msg) -> Result<UserOutput, UserError> {
        self.ensure_honest()?;
        let mut run = Run::new(self);
        if !well_formed(params, m) || !run.state.record(m) {
            return Ok(run.finish());
        }
        run.settle(params);
        Ok(run.finish())
    }

    /// Dispatches a timeout of the given kind.
    pub fn on_timeout(
        &self,
        params: &ProtocolParams,
        kind: TimeoutKind,
    ) -> Result<UserOutput, UserError> {
        match kind {
            TimeoutKind::Start => {
                self.ensure_honest()?;
                if self.started() {
                    return Err(UserError::WrongTimeout { uid: self.id, kind });
                }
                self.on_start(params)
            }
            TimeoutKind::SoftVote => self.on_softvote_timeout(params),
            TimeoutKind::NextVote => self.on_nextvote_timeout(params),
        }
    }

    fn ensure_honest(&self) -> Result<(), UserError> {
        if self.corrupt {
            Err(UserError::Corrupt(self.id))
        } else {
            Ok(())
        }
    }

    fn ensure_due(&self, kind: TimeoutKind) -> Result<(), UserError> {
        if self.pending_timeout() != kind {
            return Err(UserError::WrongTimeout { uid: self.id, kind });
        }
        if !self.timeout_due() {
            return Err(UserError::TimeoutNotDue {
                uid: self.id,
                timer: self.timer,
                deadline: self.deadline,
            });
        }
        Ok(())
    }

    /// Value of the best-credential proposal seen for `(round, period)`.
    pub fn best_proposal(&self, round: Round, period: Period) -> Option<Value> {
        self.proposals_seen
            .get(&(round, period))
            .and_then(|set| set.iter().next())
            .map(|&(_, v)| v)
    }

    /// Smallest value holding a soft-vote quorum at `(round, period)`.
    pub fn soft_quorum(
        &self,
        params: &ProtocolParams,
        round: Round,
        period: Period,
    ) -> Option<Value> {
        self.softvotes_seen
            .range((round, period, Value(0))..=(round, period, Value(u32::MAX)))
            .find(|(_, voters)| voters.len() as u32 >= params.tau_soft)
            .map(|(&(_, _, v), _)| v)
    }

    fn cert_quorum(&self, params: &ProtocolParams, round: Round) -> Option<Value> {
        self.certvotes_seen
            .range((round, 0, Value(0))..=(round, Period::MAX, Value(u32::MAX)))
            .find(|(_, voters)| voters.len() as u32 >= params.tau_cert)
            .map(|(&(_, _, v), _)| v)
    }

    /// Next-vote quorum of the highest period `>= self.period` in the current round.
    fn next_quorum(&self, params: &ProtocolParams) -> Option<(Period, Payload)> {
        let lo = (self.round, self.period, 0, Payload::Val(Value(0)));
        let hi = (self.round, Period::MAX, Step::MAX, Payload::Open);
        let mut best: Option<(Period, Payload)> = None;
        for (&(_, p, _, x), voters) in self.nextvotes_seen.range(lo..=hi) {
            if voters.len() as u32 >= params.tau_next && best.is_none_or(|(bp, _)| p > bp) {
                best = Some((p, x));
            }
        }
        best
    }

    /// Whether recording `m` would add information.
    pub fn is_news(&self, m: &Msg) -> bool {
        let (r, p) = (m.round, m.period);
        match (m.kind, m.payload) {
            (MsgKind::Proposal, Payload::Val(v)) => self
                .proposals_seen
                .get(&(r, p))
                .is_none_or(|s| !s.contains(&(m.credential, v))),
            (MsgKind::SoftVote, Payload::Val(v)) => self
                .softvotes_seen
                .get(&(r, p, v))
                .is_none_or(|s| !s.contains(&m.sender)),
            (MsgKind::CertVote, Payload::Val(v)) => self
                .certvotes_seen
                .get(&(r, p, v))
                .is_none_or(|s| !s.contains(&m.sender)),
            (MsgKind::NextVote, x) => self
                .nextvotes_seen
                .get(&(r, p, m.step, x))
                .is_none_or(|s| !s.contains(&m.sender)),
            _ => false,
        }
    }

    /// Whether `(round, period)` can still influence this user's behavior
    /// for messages of `kind`. Quorums are only ever evaluated in the current
    /// round, at the current or a later period, except cert-votes, which
    /// count from every period of the round. Proposals only matter until the
    /// soft-vote of their period.
    pub fn live_coordinates(&self, kind: MsgKind, round: Round, period: Period) -> bool {
        if round != self.round {
            return round > self.round;
        }
        match kind {
            MsgKind::CertVote => true,
            MsgKind::Proposal => {
                period > self.period
                    || (period == self.period && !self.has_softvoted.contains(&(round, period)))
            }
            _ => period >= self.period,
        }
    }

    /// Whether delivering `m` can still change this user's future behavior.
    /// Irrelevant deliveries commute with everything and may be performed
    /// at once without losing behaviors.
    pub fn is_relevant(&self, params: &ProtocolParams, m: &Msg) -> bool {
        !self.corrupt
            && well_formed(params, m)
            && self.live_coordinates(m.kind, m.round, m.period)
            && self.is_news(m)
    }

    /// Returns true iff `m` added new information.
    fn record(&mut self, m: &Msg) -> bool {
        let (r, p) = (m.round, m.period);
        match (m.kind, m.payload) {
            (MsgKind::Proposal, Payload::Val(v)) => self
                .proposals_seen
                .entry((r, p))
                .or_default()
                .insert((m.credential, v)),
            (MsgKind::SoftVote, Payload::Val(v)) => self
                .softvotes_seen
                .entry((r, p, v))
                .or_default()
                .insert(m.sender),
            (MsgKind::CertVote, Payload::Val(v)) => {
                let fresh = self
                    .certvotes_seen
                    .entry((r, p, v))
                    .or_default()
                    .insert(m.sender);
                if fresh {
                    push_unique(self.certvotes.entry((r, p)).or_default(), m.as_vote());
                }
                fresh
            }
            (MsgKind::NextVote, x) => self
                .nextvotes_seen
                .entry((r, p, m.step, x))
                .or_default()
                .insert(m.sender),
            _ => false,
        }
    }
}

fn push_unique(votes: &mut Vec<Vote>, vote: Vote) {
    if !votes.contains(&vote) {
        votes.push(vote);
    }
}

/// Structural and sortition validity of a received message.
pub fn well_formed(params: &ProtocolParams, m: &Msg) -> bool {
    m.round > 0
        && m.period > 0
        && m.kind.accepts_step(m.step)
        && (m.kind == MsgKind::NextVote || m.payload != Payload::Open)
        && m.payload.value().is_none_or(|v| v.0 < params.n_values)
        && sortition::verify(params, m.sender, m.round, m.period, m.step, &m.credential)
}

/// Mutable working copy for one handler invocation.
struct Run {
    state: UState,
    outgoing: Vec<Msg>,
    certified: Vec<(Round, Value)>,
}

impl Run {
    fn new(u: &UState) -> Self {
        Run {
            state: u.clone(),
            outgoing: Vec::new(),
            certified: Vec::new(),
        }
    }

    fn finish(self) -> UserOutput {
        UserOutput {
            state: self.state,
            outgoing: self.outgoing,
            certified: self.certified,
        }
    }

    fn emit(&mut self, params: &ProtocolParams, kind: MsgKind, step: Step, payload: Payload) {
        let s = &self.state;
        let cred = sortition::credential(params, s.id, s.round, s.period, step);
        let m = Msg::new(kind, s.id, s.round, s.period, step, payload, cred)
            .expect("honest handlers only build well-formed messages");
        self.outgoing.push(m);
    }

    fn start_period(
        &mut self,
        params: &ProtocolParams,
        round: Round,
        period: Period,
        stv: Option<Value>,
    ) {
        let s = &mut self.state;
        s.round = round;
        s.period = period;
        s.step = STEP_PROPOSE;
        s.timer = Time::ZERO;
        s.deadline = params.timeout_for_step(STEP_PROPOSE);
        s.stv = stv;
        if sortition::in_committee(params, s.id, round, period, STEP_PROPOSE) {
            let v = stv.unwrap_or_else(|| candidate_value(params, s.id, round));
            self.emit(params, MsgKind::Proposal, STEP_PROPOSE, Payload::Val(v));
        }
    }

    /// Fires cert-vote, certification and period-advance triggers until none applies.
    fn settle(&mut self, params: &ProtocolParams) {
        loop {
            let s = &self.state;
            let (r, p) = (s.round, s.period);
            if r == 0 {
                return;
            }
            if s.step <= STEP_CERT
                && !s.has_certvoted.contains(&(r, p))
                && sortition::in_committee(params, s.id, r, p, STEP_CERT)
            {
                if let Some(v) = s.soft_quorum(params, r, p) {
                    let s = &mut self.state;
                    s.step = s.step.max(STEP_CERT);
                    s.deadline = params.timeout_for_step(s.step);
                    s.has_certvoted.insert((r, p));
                    self.emit(params, MsgKind::CertVote, STEP_CERT, Payload::Val(v));
                    let vote = self.outgoing.last().unwrap().as_vote();
                    push_unique(self.state.certvotes.entry((r, p)).or_default(), vote);
                    continue;
                }
            }
            if let Some(v) = s.cert_quorum(params, r) {
                self.state.blocks.entry(r).or_default().push(v);
                self.certified.push((r, v));
                self.start_period(params, r + 1, 1, None);
                continue;
            }
            if let Some((np, x)) = s.next_quorum(params) {
                self.start_period(params, r, np + 1, x.value());
                continue;
            }
            return;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sortition::{committee, credential};

    fn params() -> ProtocolParams {
        ProtocolParams::with_committee(4, 4)
            .with_tau(3)
            .with_seed(11)
    }

    fn started(p: &ProtocolParams, u: u32) -> UState {
        UState::new(UserId(u)).on_start(p).unwrap().state
    }

    fn vote(
        p: &ProtocolParams,
        kind: MsgKind,
        from: u32,
        r: Round,
        per: Period,
        step: Step,
        x: Payload,
    ) -> Msg {
        Msg::new(
            kind,
            UserId(from),
            r,
            per,
            step,
            x,
            credential(p, UserId(from), r, per, step),
        )
        .unwrap()
    }

    fn feed(
        p: &ProtocolParams,
        mut u: UState,
        msgs: &[Msg],
    ) -> (UState, Vec<Msg>, Vec<(Round, Value)>) {
        let mut out = Vec::new();
        let mut cert = Vec::new();
        for m in msgs {
            let o = u.on_receive(p, m).unwrap();
            u = o.state;
            out.extend(o.outgoing);
            cert.extend(o.certified);
        }
        (u, out, cert)
    }

    fn elapse(mut u: UState, dt: Time) -> UState {
        u.timer += dt;
        u
    }

    #[test]
    fn non_member_stays_silent_at_period_start() {
        let p = ProtocolParams::with_committee(10, 4).with_seed(3);
        let members = committee(&p, 1, 1, 1);
        let outsider = p.users().find(|u| !members.contains(u)).unwrap();
        let out = UState::new(outsider).on_start(&p).unwrap();
        assert!(out.outgoing.is_empty());
        assert_eq!(
            (out.state.round, out.state.period, out.state.step),
            (1, 1, 1)
        );
        assert_eq!(out.state.deadline, p.lambda_propose);
    }

    #[test]
    fn member_proposes_candidate() {
        let p = params();
        let out = UState::new(UserId(2)).on_start(&p).unwrap();
        assert_eq!(out.outgoing.len(), 1);
        let m = &out.outgoing[0];
        assert_eq!(m.kind, MsgKind::Proposal);
        assert_eq!(m.payload, Payload::Val(candidate_value(&p, UserId(2), 1)));
        assert_eq!(m.credential, credential(&p, UserId(2), 1, 1, 1));
    }

    #[test]
    fn period_must_advance() {
        let p = params();
        let u = started(&p, 0);
        assert!(matches!(
            u.on_period_start(&p, 1, 1, None),
            Err(UserError::PeriodNotAhead { .. })
        ));
        assert!(u.on_period_start(&p, 1, 2, Some(Value(5))).is_ok());
    }

    #[test]
    fn reproposes_starting_value() {
        let mut p = params();
        p.n_values = 8;
        let out = started(&p, 1)
            .on_period_start(&p, 1, 2, Some(Value(5)))
            .unwrap();
        assert_eq!(out.outgoing[0].payload, Payload::Val(Value(5)));
        assert_eq!(out.state.stv, Some(Value(5)));
    }

    #[test]
    fn softvotes_best_credential() {
        let mut p = params();
        p.n_values = 10;
        let a = credential(&p, UserId(1), 1, 1, 1);
        let b = credential(&p, UserId(2), 1, 1, 1);
        let (lo, hi) = if a < b { (1, 2) } else { (2, 1) };
        let props = [
            vote(&p, MsgKind::Proposal, hi, 1, 1, 1, Payload::Val(Value(3))),
            vote(&p, MsgKind::Proposal, lo, 1, 1, 1, Payload::Val(Value(9))),
        ];
        let (u, _, _) = feed(&p, started(&p, 0), &props);
        assert!(u.on_softvote_timeout(&p).is_err(), "not due yet");
        let out = elapse(u, p.lambda_propose).on_softvote_timeout(&p).unwrap();
        assert_eq!(out.outgoing.len(), 1);
        assert_eq!(out.outgoing[0].kind, MsgKind::SoftVote);
        assert_eq!(out.outgoing[0].payload, Payload::Val(Value(9)));
        assert_eq!(out.state.step, 2);
    }

    #[test]
    fn softvote_nothing_to_support() {
        let p = params();
        let out = elapse(started(&p, 0), p.lambda_propose)
            .on_softvote_timeout(&p)
            .unwrap();
        assert!(out.outgoing.is_empty());
        assert!(out.state.has_softvoted.contains(&(1, 1)));
        // A second attempt in the same period is refused.
        let mut again = out.state.clone();
        again.step = 1;
        again.deadline = p.lambda_propose;
        assert!(matches!(
            again.on_softvote_timeout(&p),
            Err(UserError::AlreadySoftVoted { .. })
        ));
    }

    #[test]
    fn later_period_softvotes_starting_value() {
        let mut p = params();
        p.n_values = 10;
        let u = started(&p, 0)
            .on_period_start(&p, 1, 2, Some(Value(4)))
            .unwrap()
            .state;
        let props = [vote(
            &p,
            MsgKind::Proposal,
            1,
            1,
            2,
            1,
            Payload::Val(Value(7)),
        )];
        let (u, _, _) = feed(&p, u, &props);
        let out = elapse(u, p.lambda_propose).on_softvote_timeout(&p).unwrap();
        assert_eq!(out.outgoing[0].payload, Payload::Val(Value(4)));
    }

    #[test]
    fn third_softvote_triggers_one_certvote() {
        let p = params();
        let v = Payload::Val(Value(1));
        let softs: Vec<Msg> = (1..4)
            .map(|i| vote(&p, MsgKind::SoftVote, i, 1, 1, 2, v))
            .collect();
        let (u, out, _) = feed(&p, started(&p, 0), &softs[..2]);
        assert!(out.is_empty());
        let (u, out, _) = feed(&p, u, &softs[2..]);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].kind, MsgKind::CertVote);
        assert_eq!(out[0].payload, v);
        assert_eq!(u.step, 3);
        assert_eq!(u.certvotes[&(1, 1)].len(), 1);
        // A fourth soft-vote does not cause another cert-vote.
        let (_, out, _) = feed(&p, u, &[vote(&p, MsgKind::SoftVote, 0, 1, 1, 2, v)]);
        assert!(out.is_empty());
    }

    #[test]
    fn duplicate_is_idempotent() {
        let p = params();
        let m = vote(&p, MsgKind::CertVote, 1, 1, 1, 3, Payload::Val(Value(0)));
        let (u, _, _) = feed(&p, started(&p, 0), std::slice::from_ref(&m));
        let out = u.on_receive(&p, &m).unwrap();
        assert_eq!(out.state, u);
        assert!(out.outgoing.is_empty());
    }

    #[test]
    fn third_certvote_certifies_and_advances() {
        let p = params();
        let v = Value(1);
        let certs: Vec<Msg> = (1..4)
            .map(|i| vote(&p, MsgKind::CertVote, i, 1, 1, 3, Payload::Val(v)))
            .collect();
        let (u, out, cert) = feed(&p, started(&p, 0), &certs);
        assert_eq!(cert, vec![(1, v)]);
        assert_eq!(u.blocks[&1], vec![v]);
        assert_eq!((u.round, u.period, u.step), (2, 1, 1));
        // Every user is on every committee here, so the new round opens with a proposal.
        assert_eq!(out.last().unwrap().kind, MsgKind::Proposal);
        assert_eq!(out.last().unwrap().round, 2);
    }

    #[test]
    fn forged_credential_dropped() {
        let p = params();
        let mut m = vote(&p, MsgKind::SoftVote, 1, 1, 1, 2, Payload::Val(Value(0)));
        m.credential.weight ^= 0xFF;
        let u = started(&p, 0);
        let out = u.on_receive(&p, &m).unwrap();
        assert_eq!(out.state, u);
        let mut wrong_step = vote(&p, MsgKind::SoftVote, 1, 1, 1, 2, Payload::Val(Value(0)));
        wrong_step.step = 3;
        assert_eq!(u.on_receive(&p, &wrong_step).unwrap().state, u);
    }

    #[test]
    fn nextvote_payload_precedence() {
        let p = params();
        let after_soft = elapse(started(&p, 0), p.lambda_propose)
            .on_softvote_timeout(&p)
            .unwrap()
            .state;
        let due = p.timeout_for_step(2) - p.lambda_propose;

        // No quorum, no starting value: open.
        let out = elapse(after_soft.clone(), due)
            .on_nextvote_timeout(&p)
            .unwrap();
        assert_eq!(out.state.step, 4);
        assert_eq!(out.outgoing[0].payload, Payload::Open);

        // Soft-vote quorum observed (this user is not allowed to cert-vote any more).
        let mut late = after_soft.clone();
        late.step = 4;
        late.deadline = p.timeout_for_step(4);
        let softs: Vec<Msg> = (1..4)
            .map(|i| vote(&p, MsgKind::SoftVote, i, 1, 1, 2, Payload::Val(Value(1))))
            .collect();
        let (late, out, _) = feed(&p, late, &softs);
        assert!(out.is_empty(), "no cert-vote once past step 3");
        let out = elapse(late, p.timeout_for_step(4))
            .on_nextvote_timeout(&p)
            .unwrap();
        assert_eq!(out.state.step, 5);
        assert_eq!(out.outgoing[0].payload, Payload::Val(Value(1)));
    }

    #[test]
    fn repeated_nextvotes_climb_steps() {
        let p = params();
        let mut u = elapse(started(&p, 0), p.lambda_propose)
            .on_softvote_timeout(&p)
            .unwrap()
            .state;
        let mut steps = Vec::new();
        for _ in 0..2 {
            u.timer = u.deadline;
            let out = u.on_nextvote_timeout(&p).unwrap();
            steps.push((out.outgoing[0].step, out.outgoing[0].payload));
            u = out.state;
        }
        assert_eq!(steps, vec![(4, Payload::Open), (5, Payload::Open)]);
        assert_eq!(u.deadline, p.timeout_for_step(5));
    }

    #[test]
    fn value_nextvote_quorum_starts_next_period() {
        let p = params();
        let nv: Vec<Msg> = (1..4)
            .map(|i| vote(&p, MsgKind::NextVote, i, 1, 1, 4, Payload::Val(Value(1))))
            .collect();
        let (u, out, _) = feed(&p, started(&p, 0), &nv);
        assert_eq!((u.round, u.period, u.step), (1, 2, 1));
        assert_eq!(u.stv, Some(Value(1)));
        assert_eq!(out.last().unwrap().payload, Payload::Val(Value(1)));
    }

    #[test]
    fn open_quorum_clears_starting_value() {
        let p = params();
        let nv: Vec<Msg> = (0..3)
            .map(|i| vote(&p, MsgKind::NextVote, i, 1, 1, 5, Payload::Open))
            .collect();
        let (u, _, _) = feed(&p, started(&p, 3), &nv);
        assert_eq!((u.period, u.stv), (2, None));
    }

    #[test]
    fn mixed_nextvotes_do_not_advance() {
        let p = params();
        let nv = [
            vote(&p, MsgKind::NextVote, 0, 1, 1, 4, Payload::Open),
            vote(&p, MsgKind::NextVote, 1, 1, 1, 4, Payload::Open),
            vote(&p, MsgKind::NextVote, 2, 1, 1, 4, Payload::Val(Value(0))),
            vote(&p, MsgKind::NextVote, 3, 1, 1, 5, Payload::Open),
        ];
        let (u, _, _) = feed(&p, started(&p, 0), &nv);
        assert_eq!(u.period, 1);
    }

    #[test]
    fn buffered_future_messages_fire_on_arrival() {
        let p = params();
        let v = Payload::Val(Value(0));
        // Soft-votes for period 2 arrive while still in period 1.
        let softs: Vec<Msg> = (1..4)
            .map(|i| vote(&p, MsgKind::SoftVote, i, 1, 2, 2, v))
            .collect();
        let (u, out, _) = feed(&p, started(&p, 0), &softs);
        assert!(out.is_empty());
        let out = u.on_period_start(&p, 1, 2, None).unwrap();
        assert!(out
            .outgoing
            .iter()
            .any(|m| m.kind == MsgKind::CertVote && m.period == 2));
    }

    #[test]
    fn past_round_messages_trigger_nothing() {
        let p = params();
        let v = Value(1);
        let certs: Vec<Msg> = (1..4)
            .map(|i| vote(&p, MsgKind::CertVote, i, 1, 1, 3, Payload::Val(v)))
            .collect();
        let (u, _, _) = feed(&p, started(&p, 0), &certs);
        let late = vote(&p, MsgKind::CertVote, 0, 1, 1, 3, Payload::Val(v));
        let out = u.on_receive(&p, &late).unwrap();
        assert!(out.outgoing.is_empty() && out.certified.is_empty());
        assert_eq!(out.state.round, 2);
    }

    #[test]
    fn corrupt_user_rejected() {
        let p = params();
        let mut u = started(&p, 0);
        u.corrupt = true;
        assert_eq!(
            u.on_softvote_timeout(&p).unwrap_err(),
            UserError::Corrupt(UserId(0))
        );
    }
}
