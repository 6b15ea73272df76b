//! The global transition relation.
//!
//! Every rule is a [`Label`]; [`Model::apply`] checks the rule's
//! precondition at a [`GState`] and computes the unique successor. Labels
//! carry every choice the adversary makes (latencies, tick sizes), so a
//! sequence of labels replays to exactly one trace.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::Time;
use crate::types::{Msg, ProtocolParams, Round, UserId, Value};
use crate::usersm::{self, TimeoutKind, UState, UserError, UserOutput};

/// One in-flight copy of a message, ordered by deadline.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PoolEntry {
    pub deadline: Time,
    pub msg: Msg,
}

/// Multiset of in-flight messages addressed to one user.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pool(#[serde(with = "crate::serde_util")] BTreeMap<PoolEntry, u32>);

impl Pool {
    pub fn insert(&mut self, entry: PoolEntry) {
        *self.0.entry(entry).or_insert(0) += 1;
    }

    /// Removes one copy; false if absent.
    pub fn remove(&mut self, entry: &PoolEntry) -> bool {
        match self.0.get_mut(entry) {
            Some(n) if *n > 1 => {
                *n -= 1;
                true
            }
            Some(_) => {
                self.0.remove(entry);
                true
            }
            None => false,
        }
    }

    pub fn contains(&self, entry: &PoolEntry) -> bool {
        self.0.contains_key(entry)
    }

    /// Distinct entries with their multiplicities.
    pub fn entries(&self) -> impl Iterator<Item = (&PoolEntry, u32)> {
        self.0.iter().map(|(e, &n)| (e, n))
    }

    pub fn len(&self) -> usize {
        self.0.values().map(|&n| n as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn min_deadline(&self) -> Option<Time> {
        self.0.keys().next().map(|e| e.deadline)
    }

    fn rebase_overdue(&mut self, now: Time, to: Time) {
        let overdue: Vec<(PoolEntry, u32)> = self
            .0
            .range(
                ..PoolEntry {
                    deadline: now,
                    msg: min_msg(),
                },
            )
            .map(|(e, &n)| (e.clone(), n))
            .collect();
        for (mut e, n) in overdue {
            self.0.remove(&e);
            e.deadline = to;
            *self.0.entry(e).or_insert(0) += n;
        }
    }

    pub fn map_deadlines(&self, f: impl Fn(Time) -> Time) -> Pool {
        let mut out = Pool::default();
        for (e, n) in self.entries() {
            *out.0
                .entry(PoolEntry {
                    deadline: f(e.deadline),
                    msg: e.msg.clone(),
                })
                .or_insert(0) += n;
        }
        out
    }
}

fn min_msg() -> Msg {
    use crate::sortition::Credential;
    use crate::types::{MsgKind, Payload};
    Msg {
        round: 0,
        period: 0,
        step: 0,
        kind: MsgKind::Proposal,
        sender: UserId(0),
        payload: Payload::Val(Value(0)),
        credential: Credential {
            weight: 0,
            owner: UserId(0),
            round: 0,
            period: 0,
            step: 0,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GState {
    pub now: Time,
    pub network_partition: bool,
    /// Indexed by user id.
    pub users: Vec<UState>,
    /// In-flight messages, indexed by recipient.
    pub msgs: Vec<Pool>,
    /// Every message ever broadcast, with multiplicity.
    #[serde(with = "crate::serde_util")]
    pub msg_history: BTreeMap<Msg, u32>,
}

impl GState {
    /// Time zero, no messages, every user honest and not yet in round 1.
    pub fn initial(params: &ProtocolParams) -> Self {
        GState {
            now: Time::ZERO,
            network_partition: false,
            users: params.users().map(UState::new).collect(),
            msgs: vec![Pool::default(); params.n_users as usize],
            msg_history: BTreeMap::new(),
        }
    }

    pub fn user(&self, uid: UserId) -> Option<&UState> {
        self.users.get(uid.index())
    }

    pub fn is_honest(&self, uid: UserId) -> bool {
        self.user(uid).is_some_and(|u| !u.corrupt)
    }

    pub fn honest_users(&self) -> impl Iterator<Item = &UState> {
        self.users.iter().filter(|u| !u.corrupt)
    }

    pub fn in_history(&self, m: &Msg) -> bool {
        self.msg_history.contains_key(m)
    }

    pub fn pending(&self) -> usize {
        self.msgs.iter().map(Pool::len).sum()
    }

    /// Largest tick allowed at this state: it may neither skip an honest
    /// user's timeout nor, while unpartitioned, a delivery deadline.
    /// `None` means nothing bounds time.
    pub fn max_tick(&self) -> Option<Time> {
        let timeouts = self.honest_users().map(|u| u.time_to_timeout());
        let deadlines = if self.network_partition {
            None
        } else {
            Some(
                self.msgs
                    .iter()
                    .filter_map(Pool::min_deadline)
                    .map(|d| d - self.now),
            )
        };
        timeouts.chain(deadlines.into_iter().flatten()).min()
    }

    /// No user has acted in round `r` or later.
    pub fn before_round(&self, r: Round) -> bool {
        self.users.iter().all(|u| u.round < r)
            && self.msg_history.keys().all(|m| m.round < r)
            && self
                .msgs
                .iter()
                .all(|p| p.entries().all(|(e, _)| e.msg.round < r))
    }
}

/// Per-recipient latencies chosen by the adversary for one broadcast.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Latencies {
    Uniform(Time),
    PerRecipient(Vec<Time>),
}

impl Latencies {
    pub fn of(&self, uid: UserId) -> Option<Time> {
        match self {
            Latencies::Uniform(t) => Some(*t),
            Latencies::PerRecipient(v) => v.get(uid.index()).copied(),
        }
    }
}

/// Which rule fired, with all of its parameters.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Label {
    Tick {
        delta: Time,
    },
    Deliver {
        uid: UserId,
        entry: PoolEntry,
        latencies: Latencies,
    },
    Internal {
        uid: UserId,
        timeout: TimeoutKind,
        latencies: Latencies,
    },
    Corrupt {
        uid: UserId,
    },
    Replay {
        uid: UserId,
        msg: Msg,
        latencies: Latencies,
    },
    Forge {
        msg: Msg,
        latencies: Latencies,
    },
    Partition {
        on: bool,
    },
}

impl Label {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Label::Tick { .. } => "tick",
            Label::Deliver { .. } => "deliver",
            Label::Internal { .. } => "internal",
            Label::Corrupt { .. } => "corrupt",
            Label::Replay { .. } => "replay",
            Label::Forge { .. } => "forge",
            Label::Partition { .. } => "partition",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Tick { delta } => write!(f, "tick {delta}"),
            Label::Deliver { uid, entry, .. } => write!(f, "deliver to {uid}: {}", entry.msg),
            Label::Internal { uid, timeout, .. } => write!(f, "{timeout:?} timeout at {uid}"),
            Label::Corrupt { uid } => write!(f, "corrupt {uid}"),
            Label::Replay { uid, msg, .. } => write!(f, "replay via {uid}: {msg}"),
            Label::Forge { msg, .. } => write!(f, "forge {msg}"),
            Label::Partition { on: true } => f.write_str("partition on"),
            Label::Partition { on: false } => f.write_str("partition off"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransitionError {
    #[error("unknown user {0}")]
    UnknownUser(UserId),
    #[error("latency {latency} for {uid} exceeds delivery bound {bound} while unpartitioned")]
    LatencyTooLarge {
        uid: UserId,
        latency: Time,
        bound: Time,
    },
    #[error("negative or missing latency for {0}")]
    BadLatency(UserId),
    #[error("tick must be positive, got {0}")]
    NonPositiveTick(Time),
    #[error("tick {delta} passes a deadline or timeout (max {max})")]
    TickTooLarge { delta: Time, max: String },
    #[error("entry not pending for {0}")]
    NotPending(UserId),
    #[error("{0} is corrupt")]
    UserCorrupt(UserId),
    #[error("{0} is already corrupt")]
    AlreadyCorrupt(UserId),
    #[error("{0} is not in the corruption plan")]
    NotInPlan(UserId),
    #[error("message was never sent: {0}")]
    NotInHistory(Msg),
    #[error("forged message has honest sender {0}")]
    HonestSender(UserId),
    #[error("forged message lacks a valid credential: {0}")]
    InvalidCredential(Msg),
    #[error("partition already {0}")]
    RedundantToggle(&'static str),
    #[error(transparent)]
    User(#[from] UserError),
}

/// A certification noticed by one honest user.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Certified {
    pub uid: UserId,
    pub round: Round,
    pub value: Value,
}

/// Side information of one transition.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Effects {
    /// Messages authored in this step (honest handler output or forgeries).
    /// Replays are not authored and do not appear here.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub emitted: Vec<Msg>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub certified: Vec<Certified>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("state invariant violated: {0}")]
pub struct InvariantViolation(pub String);

/// Protocol parameters plus the adversary's static corruption budget.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Model {
    pub params: ProtocolParams,
    pub plan: BTreeSet<UserId>,
}

impl Model {
    pub fn new(params: ProtocolParams, plan: impl IntoIterator<Item = UserId>) -> Self {
        Model {
            params,
            plan: plan.into_iter().collect(),
        }
    }

    pub fn initial(&self) -> GState {
        GState::initial(&self.params)
    }

    pub fn apply(&self, g: &GState, label: &Label) -> Result<(GState, Effects), TransitionError> {
        let mut next = g.clone();
        let fx = self.apply_mut(&mut next, label)?;
        Ok((next, fx))
    }

    /// Fires `label` in place. On error `g` is left untouched.
    pub fn apply_mut(&self, g: &mut GState, label: &Label) -> Result<Effects, TransitionError> {
        let mut fx = Effects::default();
        match label {
            Label::Tick { delta } => self.step_tick(g, *delta)?,
            Label::Deliver {
                uid,
                entry,
                latencies,
            } => {
                self.check_user(g, *uid)?;
                if !g.msgs[uid.index()].contains(entry) {
                    return Err(TransitionError::NotPending(*uid));
                }
                let out = if g.users[uid.index()].corrupt {
                    None
                } else {
                    let out = g.users[uid.index()].on_receive(&self.params, &entry.msg)?;
                    if !out.outgoing.is_empty() {
                        self.check_latencies(g, latencies)?;
                    }
                    Some(out)
                };
                g.msgs[uid.index()].remove(entry);
                if let Some(out) = out {
                    self.commit(g, *uid, out, latencies, &mut fx);
                }
            }
            Label::Internal {
                uid,
                timeout,
                latencies,
            } => {
                self.check_user(g, *uid)?;
                let out = g.users[uid.index()].on_timeout(&self.params, *timeout)?;
                if !out.outgoing.is_empty() {
                    self.check_latencies(g, latencies)?;
                }
                self.commit(g, *uid, out, latencies, &mut fx);
            }
            Label::Corrupt { uid } => self.step_corrupt(g, *uid)?,
            Label::Replay {
                uid,
                msg,
                latencies,
            } => self.step_replay(g, *uid, msg, latencies)?,
            Label::Forge { msg, latencies } => {
                self.step_forge(g, msg, latencies)?;
                fx.emitted.push(msg.clone());
            }
            Label::Partition { on } => self.step_partition(g, *on)?,
        }
        Ok(fx)
    }

    fn check_user(&self, g: &GState, uid: UserId) -> Result<(), TransitionError> {
        if uid.index() >= g.users.len() {
            Err(TransitionError::UnknownUser(uid))
        } else {
            Ok(())
        }
    }

    fn check_latencies(&self, g: &GState, latencies: &Latencies) -> Result<(), TransitionError> {
        let bound = self.params.delivery_bound;
        for uid in self.params.users() {
            let lat = latencies.of(uid).ok_or(TransitionError::BadLatency(uid))?;
            if lat.is_negative() {
                return Err(TransitionError::BadLatency(uid));
            }
            if !g.network_partition && lat > bound {
                return Err(TransitionError::LatencyTooLarge {
                    uid,
                    latency: lat,
                    bound,
                });
            }
        }
        Ok(())
    }

    /// Adds `m` to the history and to every user's pool (sender included).
    pub fn broadcast(
        &self,
        g: &mut GState,
        m: &Msg,
        latencies: &Latencies,
    ) -> Result<(), TransitionError> {
        self.check_latencies(g, latencies)?;
        self.broadcast_unchecked(g, m, latencies);
        Ok(())
    }

    fn broadcast_unchecked(&self, g: &mut GState, m: &Msg, latencies: &Latencies) {
        *g.msg_history.entry(m.clone()).or_insert(0) += 1;
        let now = g.now;
        for (i, pool) in g.msgs.iter_mut().enumerate() {
            let lat = latencies.of(UserId(i as u32)).unwrap_or(Time::ZERO);
            pool.insert(PoolEntry {
                deadline: now + lat,
                msg: m.clone(),
            });
        }
    }

    fn step_tick(&self, g: &mut GState, delta: Time) -> Result<(), TransitionError> {
        if !delta.is_positive() {
            return Err(TransitionError::NonPositiveTick(delta));
        }
        if let Some(max) = g.max_tick() {
            if delta > max {
                return Err(TransitionError::TickTooLarge {
                    delta,
                    max: max.to_string(),
                });
            }
        }
        g.now += delta;
        for u in g.users.iter_mut().filter(|u| !u.corrupt) {
            u.timer += delta;
        }
        Ok(())
    }

    fn commit(
        &self,
        g: &mut GState,
        uid: UserId,
        out: UserOutput,
        latencies: &Latencies,
        fx: &mut Effects,
    ) {
        g.users[uid.index()] = out.state;
        for m in &out.outgoing {
            self.broadcast_unchecked(g, m, latencies);
        }
        fx.emitted.extend(out.outgoing);
        fx.certified
            .extend(out.certified.into_iter().map(|(round, value)| Certified {
                uid,
                round,
                value,
            }));
    }

    fn step_corrupt(&self, g: &mut GState, uid: UserId) -> Result<(), TransitionError> {
        self.check_user(g, uid)?;
        if g.users[uid.index()].corrupt {
            return Err(TransitionError::AlreadyCorrupt(uid));
        }
        if !self.plan.contains(&uid) {
            return Err(TransitionError::NotInPlan(uid));
        }
        g.users[uid.index()].corrupt = true;
        Ok(())
    }

    fn step_replay(
        &self,
        g: &mut GState,
        uid: UserId,
        msg: &Msg,
        latencies: &Latencies,
    ) -> Result<(), TransitionError> {
        self.check_user(g, uid)?;
        if g.users[uid.index()].corrupt {
            return Err(TransitionError::UserCorrupt(uid));
        }
        if !g.in_history(msg) {
            return Err(TransitionError::NotInHistory(msg.clone()));
        }
        self.broadcast(g, msg, latencies)
    }

    fn step_forge(
        &self,
        g: &mut GState,
        msg: &Msg,
        latencies: &Latencies,
    ) -> Result<(), TransitionError> {
        self.check_user(g, msg.sender)?;
        if !g.users[msg.sender.index()].corrupt {
            return Err(TransitionError::HonestSender(msg.sender));
        }
        if !usersm::well_formed(&self.params, msg) {
            return Err(TransitionError::InvalidCredential(msg.clone()));
        }
        self.broadcast(g, msg, latencies)
    }

    fn step_partition(&self, g: &mut GState, on: bool) -> Result<(), TransitionError> {
        if g.network_partition == on {
            return Err(TransitionError::RedundantToggle(if on {
                "on"
            } else {
                "off"
            }));
        }
        g.network_partition = on;
        if !on {
            let to = g.now + self.params.delivery_bound;
            for pool in &mut g.msgs {
                pool.rebase_overdue(g.now, to);
            }
        }
        Ok(())
    }

    /// State invariants that must hold after every rule.
    pub fn check_invariants(&self, g: &GState) -> Result<(), InvariantViolation> {
        let n = self.params.n_users as usize;
        if g.users.len() != n || g.msgs.len() != n {
            return Err(InvariantViolation(format!(
                "user map has {} users and {} pools, expected {n}",
                g.users.len(),
                g.msgs.len()
            )));
        }
        if let Some((i, _)) = g.users.iter().enumerate().find(|(i, u)| u.id.index() != *i) {
            return Err(InvariantViolation(format!(
                "user slot {i} holds a different id"
            )));
        }
        for (i, pool) in g.msgs.iter().enumerate() {
            for (e, _) in pool.entries() {
                if !g.network_partition && e.deadline < g.now {
                    return Err(InvariantViolation(format!(
                        "overdue message for u{i} (deadline {} < now {}) while unpartitioned",
                        e.deadline, g.now
                    )));
                }
                if !g.in_history(&e.msg) {
                    return Err(InvariantViolation(format!(
                        "pending message missing from history: {}",
                        e.msg
                    )));
                }
            }
        }
        for u in g.honest_users() {
            if u.timer > u.deadline {
                return Err(InvariantViolation(format!(
                    "{} timer passed its deadline",
                    u.id
                )));
            }
        }
        Ok(())
    }
}

/// The parts of a global state the checkers look at, recorded at every
/// trace index. Full states are recovered by replaying labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateView {
    pub now: Time,
    pub network_partition: bool,
    /// Corrupt users at this index.
    pub corrupt: BTreeSet<UserId>,
    /// `(round, period, step)` of every user, by id.
    pub positions: Vec<(Round, crate::types::Period, crate::types::Step)>,
}

impl StateView {
    pub fn of(g: &GState) -> Self {
        StateView {
            now: g.now,
            network_partition: g.network_partition,
            corrupt: g.users.iter().filter(|u| u.corrupt).map(|u| u.id).collect(),
            positions: g
                .users
                .iter()
                .map(|u| (u.round, u.period, u.step))
                .collect(),
        }
    }

    pub fn is_honest(&self, uid: UserId) -> bool {
        uid.index() < self.positions.len() && !self.corrupt.contains(&uid)
    }
}

/// One step of a trace: the rule that fired, what it authored, and a view of
/// the state it produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStep {
    pub label: Label,
    #[serde(default)]
    pub effects: Effects,
    pub view: StateView,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceError {
    #[error("step {index}: {source}")]
    Transition {
        index: usize,
        #[source]
        source: TransitionError,
    },
    #[error("step {index}: recorded view or effects differ from the replayed ones")]
    Mismatch { index: usize },
    #[error("step {index}: {source}")]
    Invariant {
        index: usize,
        #[source]
        source: InvariantViolation,
    },
    #[error("index {0} is out of range")]
    OutOfRange(usize),
}

/// Nonempty sequence of global states; index 0 is the initial state and
/// index `i > 0` is reached by `steps[i - 1].label`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub model: Model,
    pub initial: GState,
    pub steps: Vec<TraceStep>,
    last: GState,
}

impl Trace {
    pub fn new(model: Model, initial: GState) -> Self {
        Trace {
            model,
            last: initial.clone(),
            initial,
            steps: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn params(&self) -> &ProtocolParams {
        &self.model.params
    }

    pub fn view(&self, idx: usize) -> StateView {
        if idx == 0 {
            StateView::of(&self.initial)
        } else {
            self.steps[idx - 1].view.clone()
        }
    }

    pub fn is_honest_at(&self, idx: usize, uid: UserId) -> bool {
        if idx == 0 {
            self.initial.is_honest(uid)
        } else {
            self.steps[idx - 1].view.is_honest(uid)
        }
    }

    /// State after the last step.
    pub fn last(&self) -> &GState {
        &self.last
    }

    /// Full state at `idx`, rebuilt by replaying labels.
    pub fn state_at(&self, idx: usize) -> Result<GState, TraceError> {
        if idx >= self.len() {
            return Err(TraceError::OutOfRange(idx));
        }
        let mut g = self.initial.clone();
        for (i, s) in self.steps[..idx].iter().enumerate() {
            self.model
                .apply_mut(&mut g, &s.label)
                .map_err(|source| TraceError::Transition {
                    index: i + 1,
                    source,
                })?;
        }
        Ok(g)
    }

    /// The label that produced state `idx` (none for the initial state).
    pub fn label(&self, idx: usize) -> Option<&Label> {
        idx.checked_sub(1)
            .and_then(|i| self.steps.get(i))
            .map(|s| &s.label)
    }

    pub fn effects(&self, idx: usize) -> Option<&Effects> {
        idx.checked_sub(1)
            .and_then(|i| self.steps.get(i))
            .map(|s| &s.effects)
    }

    pub fn labels(&self) -> impl Iterator<Item = &Label> {
        self.steps.iter().map(|s| &s.label)
    }

    /// Fires `label` at the last state and appends the result.
    pub fn push(&mut self, label: Label) -> Result<&TraceStep, TransitionError> {
        let effects = self.model.apply_mut(&mut self.last, &label)?;
        let view = StateView::of(&self.last);
        self.steps.push(TraceStep {
            label,
            effects,
            view,
        });
        Ok(self.steps.last().unwrap())
    }

    /// Appends a step without checking it against the transition relation.
    /// Used to plant fixtures that honest logic cannot produce; the final
    /// state is left as is.
    pub fn push_unchecked(&mut self, step: TraceStep) {
        self.steps.push(step);
    }

    /// Replays every label and checks that recorded views, effects and state
    /// invariants match: the trace follows the transition relation.
    pub fn validate(&self) -> Result<(), TraceError> {
        let mut g = self.initial.clone();
        self.model
            .check_invariants(&g)
            .map_err(|source| TraceError::Invariant { index: 0, source })?;
        for (i, step) in self.steps.iter().enumerate() {
            let index = i + 1;
            let fx = self
                .model
                .apply_mut(&mut g, &step.label)
                .map_err(|source| TraceError::Transition { index, source })?;
            if fx != step.effects || StateView::of(&g) != step.view {
                return Err(TraceError::Mismatch { index });
            }
            self.model
                .check_invariants(&g)
                .map_err(|source| TraceError::Invariant { index, source })?;
        }
        if g != self.last {
            return Err(TraceError::Mismatch {
                index: self.steps.len(),
            });
        }
        Ok(())
    }

    /// Assembles a trace from recorded steps without checking them. The
    /// final state is obtained by replaying labels as far as they apply.
    pub fn from_parts(model: Model, initial: GState, steps: Vec<TraceStep>) -> Self {
        let mut last = initial.clone();
        for s in &steps {
            if model.apply_mut(&mut last, &s.label).is_err() {
                break;
            }
        }
        Trace {
            model,
            initial,
            steps,
            last,
        }
    }

    /// Rebuilds a trace from its initial state and labels.
    pub fn replay(
        model: Model,
        initial: GState,
        labels: impl IntoIterator<Item = Label>,
    ) -> Result<Trace, TraceError> {
        let mut t = Trace::new(model, initial);
        for (i, label) in labels.into_iter().enumerate() {
            t.push(label).map_err(|source| TraceError::Transition {
                index: i + 1,
                source,
            })?;
        }
        Ok(t)
    }
}
