//! Bounded exhaustive exploration of the transition relation.
//!
//! States are enumerated depth-first (or breadth-first, in parallel) from
//! the initial state. Every choice the adversary has is branched on, with
//! continuous choices quantized: ticks stop at the next event (earliest
//! timeout or delivery deadline) or the next point of the grid spanned by
//! the time constants, whichever comes first, and every broadcast draws one
//! latency from a finite menu. Visited states are memoized by a 64-bit
//! fingerprint of a canonical form:
//!
//! * time is shifted so that `now = 0`;
//! * pools and the history are multisets/sets in sorted normal form;
//! * user data that can no longer influence behavior (seen sets of earlier
//!   periods, blocks of earlier rounds, the frozen state of corrupt users)
//!   is dropped;
//! * deliveries that cannot change the recipient's behavior (to corrupt
//!   users, duplicates, messages for past coordinates) are performed
//!   eagerly, so they never branch.
//!
//! On top of that, [`ExploreConfig`] switches on reductions that each keep
//! every reachable behavior of the honest users: latest deadlines only,
//! static corruption, lazy delivery and pruning of decided branches.
//!
//! Every reachable state is checked for state invariants, honest double
//! cert-votes and forks. A violation is turned into a concrete trace that
//! replays through [`Model::apply`] and is confirmed by the trace checkers.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::hash::{Hash, Hasher};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checker::{check_all, Violation};
use crate::sortition::{
    check_committee_honesty, committee, credential, in_committee, HonestyViolation, Horizon,
};
use crate::time::Time;
use crate::transition::{GState, Label, Latencies, Model, PoolEntry, Trace};
use crate::types::{
    validate_params, Msg, MsgKind, ParamError, Payload, Period, ProtocolParams, Round, Step,
    UserId, Value, STEP_CERT, STEP_FIRST_NEXT,
};
use crate::usersm::{TimeoutKind, UState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExploreConfig {
    /// Maximum number of branching choices along a path.
    pub depth_bound: Option<usize>,
    /// Branches end once every honest user has finished this round.
    pub round_goal: Round,
    /// Branches end once an honest user passes this period...
    pub max_period: Period,
    /// ...or this step.
    pub max_step: Step,
    /// Latencies offered for each broadcast; empty means `{0, δ}`.
    pub latency_menu: Vec<Time>,
    pub partitions: bool,
    pub forgeries: bool,
    pub replays: bool,
    /// Branch only on the largest latency of the menu. A delivery may happen
    /// at any time up to its deadline, so a later deadline allows every
    /// behavior of an earlier one.
    pub latest_deadline_only: bool,
    /// Corrupt every plan user before anything happens. A user corrupted at
    /// the start can forge whatever it would have sent while honest, so this
    /// loses no behavior of the other users.
    pub static_corruption: bool,
    /// Postpone deliveries that would only be recorded: a user is offered
    /// its deliveries only while it has a timeout due, a delivery at its
    /// deadline, or pending messages that together would make it act.
    pub lazy_delivery: bool,
    /// End a branch once no round up to the goal can certify two values
    /// any more, counting every cert-vote still possible within the horizon.
    pub prune_decided: bool,
    pub canonicalize: bool,
    /// Exploration stops, inconclusive, after this many distinct states.
    pub state_budget: usize,
    /// Stop at the first violation instead of finishing the level.
    pub stop_at_first: bool,
    pub strategy: Strategy,
    /// Skip parameter validation and the committee honesty gate.
    pub unchecked: bool,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        ExploreConfig {
            depth_bound: None,
            round_goal: 1,
            max_period: 1,
            max_step: STEP_FIRST_NEXT,
            latency_menu: Vec::new(),
            partitions: false,
            forgeries: true,
            replays: false,
            latest_deadline_only: true,
            static_corruption: true,
            lazy_delivery: true,
            prune_decided: true,
            canonicalize: true,
            state_budget: 2_000_000,
            stop_at_first: true,
            strategy: Strategy::DepthFirst,
            unchecked: false,
        }
    }
}

impl ExploreConfig {
    /// Menu `{0, δ}` for the given parameters.
    pub fn for_model(model: &Model) -> Self {
        ExploreConfig {
            latency_menu: vec![Time::ZERO, model.params.delivery_bound],
            ..Default::default()
        }
    }

    fn resolved(&self, params: &ProtocolParams) -> ExploreConfig {
        let mut cfg = self.clone();
        if cfg.latency_menu.is_empty() {
            cfg.latency_menu = vec![Time::ZERO, params.delivery_bound];
        }
        cfg
    }

    pub fn horizon(&self) -> Horizon {
        Horizon {
            max_round: self.round_goal,
            max_period: self.max_period,
            max_step: self.max_step,
        }
    }
}

/// Search order. Both visit the same state set; breadth-first finds
/// shortest counterexamples and expands levels in parallel but keeps whole
/// levels in memory, depth-first keeps only the current path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    BreadthFirst,
    DepthFirst,
}

#[derive(Debug, Error)]
pub enum ExploreError {
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error("corruption plan fails the committee honesty check")]
    Honesty(#[from] HonestyViolation),
    #[error("latency menu entries must lie in [0, δ]")]
    BadMenu,
}

/// A violating state, reconstructed as a replayable trace.
#[derive(Debug, Clone)]
pub struct Counterexample {
    /// What the state-level check found.
    pub finding: String,
    /// The same violation as reported by the trace checkers, when it is one
    /// they cover (state invariant failures are not).
    pub violation: Option<Violation>,
    pub trace: Trace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// Every state within the bounds was visited; no violation.
    Complete,
    Violation,
    /// The state budget ran out first.
    Inconclusive,
}

#[derive(Debug, Clone)]
pub struct ExplorationReport {
    pub outcome: Outcome,
    pub states: usize,
    pub transitions: usize,
    pub max_depth: usize,
    /// States not expanded because they lie past the round goal or the
    /// period/step horizon.
    pub horizon_states: usize,
    /// States not expanded because of the depth bound.
    pub depth_cut_states: usize,
    /// States with no enabled label.
    pub terminal_states: usize,
    /// States not expanded because no fork can follow them.
    pub decided_states: usize,
    /// Reachable states in which at least one value is certified for the
    /// round goal, and in which two periods certify.
    pub certified_states: usize,
    pub multi_period_states: usize,
    pub counterexample: Option<Counterexample>,
}

impl ExplorationReport {
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let outcome = match self.outcome {
            Outcome::Complete => "complete",
            Outcome::Violation => "violation",
            Outcome::Inconclusive => "inconclusive",
        };
        s.push_str(&format!("explore.outcome={outcome}\n"));
        s.push_str(&format!("explore.states={}\n", self.states));
        s.push_str(&format!("explore.transitions={}\n", self.transitions));
        s.push_str(&format!("explore.max_depth={}\n", self.max_depth));
        s.push_str(&format!("explore.horizon_states={}\n", self.horizon_states));
        s.push_str(&format!(
            "explore.depth_cut_states={}\n",
            self.depth_cut_states
        ));
        s.push_str(&format!(
            "explore.terminal_states={}\n",
            self.terminal_states
        ));
        s.push_str(&format!("explore.decided_states={}\n", self.decided_states));
        s.push_str(&format!(
            "explore.certified_states={}\n",
            self.certified_states
        ));
        s.push_str(&format!(
            "explore.multi_period_states={}\n",
            self.multi_period_states
        ));
        if let Some(cx) = &self.counterexample {
            s.push_str(&format!("explore.counterexample.finding={}\n", cx.finding));
            s.push_str(&format!(
                "explore.counterexample.steps={}\n",
                cx.trace.steps.len()
            ));
        }
        s
    }
}

/// One branching choice: the chosen label followed by the eager deliveries
/// it makes possible.
#[derive(Debug, Clone)]
struct Edge {
    labels: Vec<Label>,
    state: GState,
}

struct Explorer<'a> {
    model: &'a Model,
    cfg: &'a ExploreConfig,
}

/// Every label enabled at `g`, with latencies drawn from the menu and ticks
/// quantized to the next event or grid point. Labels are listed in a fixed
/// order, without duplicates; those the explorer performs eagerly are included.
pub fn enabled_labels(model: &Model, cfg: &ExploreConfig, g: &GState) -> Vec<Label> {
    let cfg = ExploreConfig {
        latest_deadline_only: false,
        lazy_delivery: false,
        ..cfg.resolved(&model.params)
    };
    Explorer { model, cfg: &cfg }.labels(g)
}

impl Explorer<'_> {
    fn menu_for(&self, emits: bool) -> Vec<Latencies> {
        if emits && self.cfg.latest_deadline_only {
            vec![Latencies::Uniform(self.max_latency())]
        } else if emits {
            self.cfg
                .latency_menu
                .iter()
                .map(|&t| Latencies::Uniform(t))
                .collect()
        } else {
            vec![Latencies::Uniform(Time::ZERO)]
        }
    }

    fn max_latency(&self) -> Time {
        self.cfg
            .latency_menu
            .iter()
            .copied()
            .max()
            .unwrap_or(Time::ZERO)
    }

    /// Every timeout, deadline and latency is a multiple of this grid, and
    /// since deadlines are inclusive, letting the adversary act only on grid
    /// points loses no reachable behaviour.
    fn quantum(&self) -> Time {
        let p = &self.model.params;
        [p.lambda_propose, p.lambda_step, p.delivery_bound]
            .into_iter()
            .chain(self.cfg.latency_menu.iter().copied())
            .fold(Time::ZERO, Time::gcd)
    }

    /// The next event, or the next grid point if that comes first.
    fn next_tick(&self, g: &GState) -> Option<Time> {
        let delta = next_event(g)?;
        let q = self.quantum();
        Some(if q.is_positive() { delta.min(q) } else { delta })
    }

    fn deliver_labels(&self, g: &GState, uid: UserId, entry: &PoolEntry, out: &mut Vec<Label>) {
        let params = &self.model.params;
        let u = &g.users[uid.index()];
        let emits = u.is_relevant(params, &entry.msg)
            && u.on_receive(params, &entry.msg)
                .is_ok_and(|o| !o.outgoing.is_empty());
        for latencies in self.menu_for(emits) {
            out.push(Label::Deliver {
                uid,
                entry: entry.clone(),
                latencies,
            });
        }
    }

    /// Ticks, deliveries and timeouts.
    fn scheduling_labels(&self, g: &GState, out: &mut Vec<Label>) {
        let params = &self.model.params;
        if let Some(delta) = self.next_tick(g) {
            out.push(Label::Tick { delta });
        }
        for (i, pool) in g.msgs.iter().enumerate() {
            let uid = UserId(i as u32);
            let active = if self.cfg.lazy_delivery {
                self.active_entries(g, uid)
            } else {
                BTreeSet::new()
            };
            for (entry, _) in pool.entries() {
                if self.worth_delivering(g, uid, &entry.msg, active.contains(&entry.msg)) {
                    self.deliver_labels(g, uid, entry, out);
                }
            }
        }
        for u in g.honest_users().filter(|u| u.timeout_due()) {
            let timeout = u.pending_timeout();
            let emits = u
                .on_timeout(params, timeout)
                .is_ok_and(|o| !o.outgoing.is_empty());
            for latencies in self.menu_for(emits) {
                out.push(Label::Internal {
                    uid: u.id,
                    timeout,
                    latencies,
                });
            }
        }
    }

    fn corrupt_labels(&self, g: &GState, out: &mut Vec<Label>) {
        for &uid in &self.model.plan {
            if g.is_honest(uid) {
                out.push(Label::Corrupt { uid });
            }
        }
    }

    fn partition_label(&self, g: &GState, out: &mut Vec<Label>) {
        if self.cfg.partitions {
            out.push(Label::Partition {
                on: !g.network_partition,
            });
        }
    }

    fn replay_labels(&self, g: &GState, uids: &[UserId], out: &mut Vec<Label>) {
        if !self.cfg.replays {
            return;
        }
        for &uid in uids {
            for msg in g.msg_history.keys() {
                for latencies in self.menu_for(true) {
                    out.push(Label::Replay {
                        uid,
                        msg: msg.clone(),
                        latencies,
                    });
                }
            }
        }
    }

    /// The complete label menu at `g`.
    fn labels(&self, g: &GState) -> Vec<Label> {
        let mut out = Vec::new();
        self.scheduling_labels(g, &mut out);
        self.corrupt_labels(g, &mut out);
        if self.cfg.forgeries {
            for msg in signable(self.model, &self.cfg.horizon(), g) {
                for latencies in self.menu_for(true) {
                    out.push(Label::Forge {
                        msg: msg.clone(),
                        latencies,
                    });
                }
            }
        }
        let honest: Vec<UserId> = g.honest_users().map(|u| u.id).collect();
        self.replay_labels(g, &honest, &mut out);
        self.partition_label(g, &mut out);
        out
    }

    /// The branching choices actually explored: the label menu, except that
    /// a forgery is only ever sent together with its first delivery to an
    /// honest user, at the largest latency.
    ///
    /// Until someone receives it, a forged message only constrains time, so
    /// sending it later with a longer deadline allows every behavior of
    /// sending it earlier. Its effect on certification counting is covered
    /// by [`state_violation`], which considers every cert-vote the corrupt
    /// users could still sign. Replays are relayed by the first honest user,
    /// since the relay does not influence the outcome.
    fn choices(&self, g: &GState) -> Vec<Vec<Label>> {
        let params = &self.model.params;
        let mut singles = Vec::new();
        self.scheduling_labels(g, &mut singles);
        self.corrupt_labels(g, &mut singles);
        let relay: Vec<UserId> = g.honest_users().map(|u| u.id).take(1).collect();
        self.replay_labels(g, &relay, &mut singles);
        self.partition_label(g, &mut singles);
        let mut out: Vec<Vec<Label>> = singles.into_iter().map(|l| vec![l]).collect();
        if let Some(labels) = self.flush_then_tick(g) {
            out.push(labels);
        }
        if self.cfg.forgeries {
            let lat = self.max_latency();
            for msg in signable(self.model, &self.cfg.horizon(), g) {
                if g.in_history(&msg) {
                    continue;
                }
                let forge = Label::Forge {
                    msg: msg.clone(),
                    latencies: Latencies::Uniform(lat),
                };
                let entry = PoolEntry {
                    deadline: g.now + lat,
                    msg: msg.clone(),
                };
                let recipients = g.honest_users().filter(|u| {
                    !self.frozen(u)
                        && u.is_relevant(params, &msg)
                        && (!self.cfg.lazy_delivery
                            || self.worth_delivering(
                                g,
                                u.id,
                                &msg,
                                self.bucket_active(g, u.id, &msg),
                            ))
                });
                for u in recipients {
                    let mut delivers = Vec::new();
                    self.deliver_labels(g, u.id, &entry, &mut delivers);
                    out.extend(delivers.into_iter().map(|d| vec![forge.clone(), d]));
                }
            }
        }
        out
    }

    /// Whether delivering every pending message of `m`'s quorum bucket to
    /// `uid` (and `m` itself) would make it act: emit, certify or move. If
    /// not, no subset would either: every trigger is a quorum within one
    /// bucket, and quorums are monotone.
    fn bucket_active(&self, g: &GState, uid: UserId, m: &Msg) -> bool {
        let params = &self.model.params;
        let u = &g.users[uid.index()];
        let mut s = u.clone();
        let pending = g.msgs[uid.index()].entries().map(|(e, _)| &e.msg);
        for x in pending.chain([m]).filter(|x| bucket(x) == bucket(m)) {
            match s.on_receive(params, x) {
                Ok(o) if o.outgoing.is_empty() && o.certified.is_empty() => s = o.state,
                _ => return true,
            }
        }
        (s.round, s.period, s.step, s.stv, s.timer, s.deadline)
            != (u.round, u.period, u.step, u.stv, u.timer, u.deadline)
            || s.has_certvoted != u.has_certvoted
            || s.blocks != u.blocks
    }

    /// The pending messages of `uid` in active buckets.
    fn active_entries<'g>(&self, g: &'g GState, uid: UserId) -> BTreeSet<&'g Msg> {
        let mut seen = BTreeMap::new();
        let mut out = BTreeSet::new();
        for (e, _) in g.msgs[uid.index()].entries() {
            let active = *seen
                .entry(bucket(&e.msg))
                .or_insert_with(|| self.bucket_active(g, uid, &e.msg));
            if active {
                out.insert(&e.msg);
            }
        }
        out
    }

    /// Whether a delivery of `m` to `uid` must be offered now. Deliveries
    /// that would only be recorded are postponed to the recipient's next
    /// action, or made all at once just before time passes their deadline
    /// (see [`Explorer::flush_then_tick`]): until then nothing reads them,
    /// except the due timeout, which reads proposals (soft-vote) or
    /// soft-votes (next-vote) of the current period.
    fn worth_delivering(&self, g: &GState, uid: UserId, m: &Msg, active: bool) -> bool {
        let u = &g.users[uid.index()];
        if !self.cfg.lazy_delivery || active {
            return true;
        }
        let here = (m.round, m.period) == (u.round, u.period);
        u.timeout_due()
            && here
            && match u.pending_timeout() {
                TimeoutKind::Start => false,
                TimeoutKind::SoftVote => m.kind == MsgKind::Proposal,
                TimeoutKind::NextVote => m.kind == MsgKind::SoftVote,
            }
    }

    /// No round up to the goal can still certify two different values: for
    /// each round at most one value can still reach `tau_cert` cert-votes
    /// in some period of the horizon, counting the votes already cast, every
    /// corruptible member, and every honest member that has not yet
    /// cert-voted there and has not moved past that period.
    fn decided(&self, g: &GState) -> bool {
        let params = &self.model.params;
        let tau = params.tau_cert as usize;
        for r in 1..=self.cfg.round_goal {
            let mut possible = BTreeSet::new();
            for p in 1..=self.cfg.max_period {
                let members = committee(params, r, p, STEP_CERT);
                let open: BTreeSet<UserId> = members
                    .iter()
                    .copied()
                    .filter(|&m| {
                        let u = &g.users[m.index()];
                        u.corrupt
                            || self.model.plan.contains(&m)
                            || ((u.round, u.period) <= (r, p) && !u.has_certvoted.contains(&(r, p)))
                    })
                    .collect();
                for w in 0..params.n_values {
                    let cast = g
                        .msg_history
                        .keys()
                        .filter(|m| {
                            m.kind == MsgKind::CertVote
                                && (m.round, m.period) == (r, p)
                                && m.payload == Payload::Val(Value(w))
                                && members.contains(&m.sender)
                                && !open.contains(&m.sender)
                        })
                        .map(|m| m.sender)
                        .collect::<BTreeSet<_>>()
                        .len();
                    if cast + open.len() >= tau {
                        possible.insert(w);
                    }
                }
            }
            if possible.len() > 1 {
                return false;
            }
        }
        true
    }

    /// Under lazy delivery, the deliveries due now to users with nothing to
    /// do are made together, followed by the tick they were blocking. They
    /// only add to what their recipients have recorded, in any order.
    fn flush_then_tick(&self, g: &GState) -> Option<Vec<Label>> {
        if !self.cfg.lazy_delivery || g.network_partition {
            return None;
        }
        let mut labels = Vec::new();
        for (i, pool) in g.msgs.iter().enumerate() {
            let uid = UserId(i as u32);
            let due: Vec<&PoolEntry> = pool
                .entries()
                .map(|(e, _)| e)
                .filter(|e| e.deadline <= g.now)
                .collect();
            if due.is_empty() {
                continue;
            }
            let active = self.active_entries(g, uid);
            if due.iter().any(|e| active.contains(&e.msg)) {
                return None;
            }
            labels.extend(due.into_iter().map(|e| Label::Deliver {
                uid,
                entry: e.clone(),
                latencies: Latencies::Uniform(Time::ZERO),
            }));
        }
        if labels.is_empty() {
            return None;
        }
        let mut next = g.clone();
        for l in &labels {
            self.model.apply_mut(&mut next, l).ok()?;
        }
        labels.push(Label::Tick {
            delta: self.next_tick(&next)?,
        });
        Some(labels)
    }

    /// The root of the search and the labels leading to it.
    fn start(&self) -> (GState, Vec<Label>) {
        let mut g = self.model.initial();
        let mut labels = Vec::new();
        if self.cfg.static_corruption {
            for &uid in &self.model.plan {
                let label = Label::Corrupt { uid };
                self.model
                    .apply_mut(&mut g, &label)
                    .expect("plan users can be corrupted");
                labels.push(label);
            }
        }
        (g, labels)
    }

    /// Honest users past the round goal are frozen: nothing they do can
    /// influence rounds up to the goal, since handlers only act on quorums
    /// of the current round.
    fn frozen(&self, u: &UState) -> bool {
        !u.corrupt && u.round > self.cfg.round_goal
    }

    /// Performs every step that cannot change behavior within the goal:
    /// deliveries that are not news to their recipient, deliveries of
    /// messages past the goal round, and everything frozen users do.
    fn normalize(&self, g: &mut GState, labels: &mut Vec<Label>) {
        let params = &self.model.params;
        let goal = self.cfg.round_goal;
        let zero = Latencies::Uniform(Time::ZERO);
        loop {
            let timeout = g
                .users
                .iter()
                .find(|u| self.frozen(u) && u.timeout_due())
                .map(|u| Label::Internal {
                    uid: u.id,
                    timeout: u.pending_timeout(),
                    latencies: zero.clone(),
                });
            let label = timeout.or_else(|| {
                g.msgs.iter().enumerate().find_map(|(i, pool)| {
                    let u = &g.users[i];
                    pool.entries()
                        .map(|(e, _)| e)
                        .find(|e| {
                            self.frozen(u) || e.msg.round > goal || !u.is_relevant(params, &e.msg)
                        })
                        .map(|e| Label::Deliver {
                            uid: UserId(i as u32),
                            entry: e.clone(),
                            latencies: zero.clone(),
                        })
                })
            });
            let Some(label) = label else { return };
            self.model
                .apply_mut(g, &label)
                .expect("normalizing steps are enabled");
            labels.push(label);
        }
    }

    fn successors(&self, g: &GState) -> Vec<Edge> {
        self.choices(g)
            .into_iter()
            .filter_map(|mut labels| {
                let mut next = g.clone();
                // Choices are built enabled; a failure here would be a bug
                // in `choices`, surfaced by the cross-check tests.
                for l in &labels {
                    self.model.apply_mut(&mut next, l).ok()?;
                }
                self.normalize(&mut next, &mut labels);
                Some(Edge {
                    labels,
                    state: next,
                })
            })
            .collect()
    }

    /// Some honest user is still working on the goal, and none has gone
    /// past the period or step bound.
    fn within_horizon(&self, g: &GState) -> bool {
        let mut active = g.honest_users().filter(|u| !self.frozen(u)).peekable();
        active.peek().is_some()
            && active.all(|u| u.period <= self.cfg.max_period && u.step <= self.cfg.max_step)
    }

    fn fingerprint(&self, g: &GState) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        if self.cfg.canonicalize {
            canonical_hash(g, self.cfg.round_goal, self.cfg.replays, &mut h);
        } else {
            g.hash(&mut h);
        }
        h.finish()
    }
}

/// Messages that count towards the same quorum.
fn bucket(m: &Msg) -> (MsgKind, Round, Period, Step, Payload) {
    (m.kind, m.round, m.period, m.step, m.payload)
}

/// Well-formed messages the currently corrupt users can sign within `h`.
pub fn signable(model: &Model, h: &Horizon, g: &GState) -> Vec<Msg> {
    let params = &model.params;
    let mut out = Vec::new();
    for u in g.users.iter().filter(|u| u.corrupt) {
        for r in 1..=h.max_round {
            for p in 1..=h.max_period {
                for s in 1..=h.max_step {
                    if !in_committee(params, u.id, r, p, s) {
                        continue;
                    }
                    let kind = MsgKind::for_step(s).expect("steps start at 1");
                    let mut payloads: Vec<Payload> = (0..params.n_values)
                        .map(|v| Payload::Val(Value(v)))
                        .collect();
                    if kind == MsgKind::NextVote {
                        payloads.push(Payload::Open);
                    }
                    let cred = credential(params, u.id, r, p, s);
                    out.extend(
                        payloads
                            .into_iter()
                            .filter_map(|x| Msg::new(kind, u.id, r, p, s, x, cred).ok()),
                    );
                }
            }
        }
    }
    out
}

/// Tick to the earliest future timeout or delivery deadline, if time can move.
fn next_event(g: &GState) -> Option<Time> {
    let bound = g.max_tick();
    let next_deadline = g
        .msgs
        .iter()
        .flat_map(|p| p.entries().map(|(e, _)| e.deadline))
        .filter(|&d| d > g.now)
        .map(|d| d - g.now)
        .min();
    let delta = match (bound, next_deadline) {
        (Some(a), Some(b)) => a.min(b),
        (a, b) => a.or(b)?,
    };
    delta.is_positive().then_some(delta)
}

fn canonical_hash<H: Hasher>(g: &GState, goal: Round, full_history: bool, h: &mut H) {
    g.network_partition.hash(h);
    for u in &g.users {
        hash_user(u, goal, h);
    }
    let now = g.now;
    let overdue = Time::from_int(-1);
    for (pool, u) in g.msgs.iter().zip(&g.users) {
        if u.corrupt || u.round > goal {
            continue;
        }
        // Under partition every overdue entry behaves alike: deliverable
        // now, rebased to `now + δ` when the partition heals.
        let shifted = pool.map_deadlines(|d| if d < now { overdue } else { d - now });
        shifted.entries().count().hash(h);
        for (e, n) in shifted.entries() {
            e.hash(h);
            n.hash(h);
        }
    }
    // Without replays the history only matters through the cert-votes the
    // checkers count.
    let kept: Vec<&Msg> = g
        .msg_history
        .keys()
        .filter(|m| m.round <= goal && (full_history || m.kind == MsgKind::CertVote))
        .collect();
    kept.hash(h);
}

fn hash_user<H: Hasher>(u: &UState, goal: Round, h: &mut H) {
    let frozen = !u.corrupt && u.round > goal;
    (u.corrupt, frozen).hash(h);
    if u.corrupt || frozen {
        return;
    }
    (u.timer, u.deadline, u.round, u.period, u.step, u.stv).hash(h);
    let live = |kind: MsgKind, r: Round, p: Period| r <= goal && u.live_coordinates(kind, r, p);
    hash_filtered(
        h,
        u.proposals_seen
            .iter()
            .filter(|((r, p), _)| live(MsgKind::Proposal, *r, *p)),
    );
    hash_filtered(
        h,
        u.softvotes_seen
            .iter()
            .filter(|((r, p, _), _)| live(MsgKind::SoftVote, *r, *p)),
    );
    hash_filtered(
        h,
        u.certvotes_seen
            .iter()
            .filter(|((r, p, _), _)| live(MsgKind::CertVote, *r, *p)),
    );
    hash_filtered(
        h,
        u.nextvotes_seen
            .iter()
            .filter(|((r, p, _, _), _)| live(MsgKind::NextVote, *r, *p)),
    );
    hash_filtered(
        h,
        u.has_certvoted
            .iter()
            .filter(|(r, p)| live(MsgKind::SoftVote, *r, *p)),
    );
    hash_filtered(
        h,
        u.has_softvoted
            .iter()
            .filter(|(r, p)| live(MsgKind::SoftVote, *r, *p)),
    );
}

fn hash_filtered<H: Hasher, T: Hash>(h: &mut H, items: impl Iterator<Item = T>) {
    let mut n = 0usize;
    for x in items {
        x.hash(h);
        n += 1;
    }
    n.hash(h);
}

/// A safety violation found at a single state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Finding {
    pub description: String,
    /// Cert-votes the corrupt users still have to forge to complete the
    /// violation; empty when the history already shows it.
    pub forge: Vec<Msg>,
}

/// State-level safety findings, computed from the message history: an
/// honest user cert-voting twice in one period, or a fork (two values
/// certified in one round). The history holds exactly the authored
/// messages, so this agrees with the trace checkers on any path to `g`.
///
/// With `forgeable` set, the fork check also counts every cert-vote the
/// corrupt users could sign within that horizon: such a fork is one
/// forgery label away.
pub fn state_violation(model: &Model, g: &GState, forgeable: Option<&Horizon>) -> Option<Finding> {
    let params = &model.params;
    let mut votes: BTreeSet<&Msg> = g
        .msg_history
        .keys()
        .filter(|m| m.kind == MsgKind::CertVote)
        .collect();
    let mut by_sender: BTreeMap<(UserId, Round, Period), &Msg> = BTreeMap::new();
    for &m in &votes {
        if !g.is_honest(m.sender) {
            continue;
        }
        if let Some(prev) = by_sender.insert((m.sender, m.round, m.period), m) {
            return Some(Finding {
                description: format!("honest {} cert-voted twice: {prev} and {m}", m.sender),
                forge: Vec::new(),
            });
        }
    }
    let extra: Vec<Msg> = match forgeable {
        Some(h) => signable(model, h, g)
            .into_iter()
            .filter(|m| m.kind == MsgKind::CertVote && !g.in_history(m))
            .collect(),
        None => Vec::new(),
    };
    votes.extend(extra.iter());
    let votes: Vec<&Msg> = votes.into_iter().collect();
    for (r, certs) in certified_values(params, &votes) {
        let values: BTreeSet<Value> = certs.iter().map(|&(_, v)| v).collect();
        if values.len() > 1 {
            let forge = extra.iter().filter(|m| m.round == r).cloned().collect();
            return Some(Finding {
                description: format!(
                    "fork in round {r}: certified (period, value) pairs {certs:?}"
                ),
                forge,
            });
        }
    }
    None
}

fn certified_values(
    params: &ProtocolParams,
    votes: &[&Msg],
) -> BTreeMap<Round, Vec<(Period, Value)>> {
    let mut tally: BTreeMap<(Round, Period, Value), BTreeSet<UserId>> = BTreeMap::new();
    let mut members: HashMap<(Round, Period), BTreeSet<UserId>> = HashMap::new();
    for m in votes {
        let Payload::Val(v) = m.payload else { continue };
        let c = members
            .entry((m.round, m.period))
            .or_insert_with(|| committee(params, m.round, m.period, STEP_CERT));
        if c.contains(&m.sender) {
            tally
                .entry((m.round, m.period, v))
                .or_default()
                .insert(m.sender);
        }
    }
    let mut out: BTreeMap<Round, Vec<(Period, Value)>> = BTreeMap::new();
    for ((r, p, v), voters) in tally {
        if voters.len() as u32 >= params.tau_cert {
            out.entry(r).or_default().push((p, v));
        }
    }
    out
}

#[derive(Clone, Copy)]
struct Parent {
    parent: u64,
    edge: u32,
    depth: u32,
}

const ROOT_EDGE: u32 = u32::MAX;

/// Explores every state reachable within the configured bounds.
pub fn explore(model: &Model, cfg: &ExploreConfig) -> Result<ExplorationReport, ExploreError> {
    let bound = model.params.delivery_bound;
    let cfg = &cfg.resolved(&model.params);
    if cfg
        .latency_menu
        .iter()
        .any(|t| t.is_negative() || *t > bound)
    {
        return Err(ExploreError::BadMenu);
    }
    if !cfg.unchecked {
        validate_params(model.params.clone())?;
        check_committee_honesty(&model.params, &model.plan, cfg.horizon())?;
    }
    let ex = Explorer { model, cfg };
    let mut report = ExplorationReport {
        outcome: Outcome::Complete,
        states: 0,
        transitions: 0,
        max_depth: 0,
        horizon_states: 0,
        depth_cut_states: 0,
        terminal_states: 0,
        decided_states: 0,
        certified_states: 0,
        multi_period_states: 0,
        counterexample: None,
    };

    let (initial, _) = ex.start();
    let root = ex.fingerprint(&initial);
    let mut parents: HashMap<u64, Parent> = HashMap::new();
    parents.insert(
        root,
        Parent {
            parent: root,
            edge: ROOT_EDGE,
            depth: 0,
        },
    );
    let found = match cfg.strategy {
        Strategy::BreadthFirst => ex.breadth_first(root, initial, &mut parents, &mut report),
        Strategy::DepthFirst => ex.depth_first(root, initial, &mut parents, &mut report),
    };
    if let Some((fp, finding)) = found {
        report.outcome = Outcome::Violation;
        report.counterexample = Some(ex.counterexample(&parents, fp, finding));
    }
    Ok(report)
}

enum Status {
    Expanded,
    Finding(Finding),
    Horizon,
    DepthCut,
    Decided,
}

struct Expansion {
    status: Status,
    certified: bool,
    multi_period: bool,
    edges: Vec<(u64, GState)>,
}

impl ExplorationReport {
    /// Folds one expanded state into the counters; returns its finding.
    fn record(&mut self, res: &mut Expansion) -> Option<Finding> {
        self.states += 1;
        self.certified_states += usize::from(res.certified);
        self.multi_period_states += usize::from(res.multi_period);
        self.transitions += res.edges.len();
        match std::mem::replace(&mut res.status, Status::Expanded) {
            Status::Finding(f) => return Some(f),
            Status::Horizon => self.horizon_states += 1,
            Status::DepthCut => self.depth_cut_states += 1,
            Status::Decided => self.decided_states += 1,
            Status::Expanded if res.edges.is_empty() => self.terminal_states += 1,
            Status::Expanded => {}
        }
        None
    }
}

struct Frame {
    fp: u64,
    depth: usize,
    // Last choices first: adversarial actions come after scheduling in
    // `choices`, and attacks tend to be short.
    children: std::iter::Rev<std::iter::Enumerate<std::vec::IntoIter<(u64, GState)>>>,
}

impl Explorer<'_> {
    fn over_budget(&self, parents: &HashMap<u64, Parent>, report: &mut ExplorationReport) -> bool {
        if parents.len() > self.cfg.state_budget {
            report.outcome = Outcome::Inconclusive;
            true
        } else {
            false
        }
    }

    fn breadth_first(
        &self,
        root: u64,
        initial: GState,
        parents: &mut HashMap<u64, Parent>,
        report: &mut ExplorationReport,
    ) -> Option<(u64, Finding)> {
        let mut frontier: Vec<(u64, GState)> = vec![(root, initial)];
        let mut depth = 0usize;
        let mut found = None;
        while !frontier.is_empty() {
            report.max_depth = depth;
            let mut next: Vec<(u64, GState)> = Vec::new();
            // Expand in parallel, merge in frontier order: the visited set
            // and the report do not depend on the number of workers.
            while !frontier.is_empty() {
                let take = frontier.len().min(1024);
                let chunk: Vec<(u64, GState)> = frontier.drain(..take).collect();
                let results: Vec<Expansion> = chunk
                    .par_iter()
                    .map(|(_, g)| self.expand(g, depth))
                    .collect();
                for ((fp, _), mut res) in chunk.iter().zip(results) {
                    if let Some(f) = report.record(&mut res) {
                        found.get_or_insert((*fp, f));
                    }
                    for (i, (child, state)) in res.edges.into_iter().enumerate() {
                        if let std::collections::hash_map::Entry::Vacant(e) = parents.entry(child) {
                            e.insert(Parent {
                                parent: *fp,
                                edge: i as u32,
                                depth: depth as u32 + 1,
                            });
                            next.push((child, state));
                        }
                    }
                    if (found.is_some() && self.cfg.stop_at_first)
                        || self.over_budget(parents, report)
                    {
                        return found;
                    }
                }
            }
            frontier = next;
            depth += 1;
        }
        found
    }

    /// Iterative depth-first search. With a depth bound, a state reached
    /// again by a shorter path is expanded again, so the visited set is the
    /// same as breadth-first's.
    fn depth_first(
        &self,
        root: u64,
        initial: GState,
        parents: &mut HashMap<u64, Parent>,
        report: &mut ExplorationReport,
    ) -> Option<(u64, Finding)> {
        let mut found = None;
        let mut res = self.expand(&initial, 0);
        if let Some(f) = report.record(&mut res) {
            return Some((root, f));
        }
        let mut stack = vec![Frame {
            fp: root,
            depth: 0,
            children: res.edges.into_iter().enumerate().rev(),
        }];
        while let Some(top) = stack.last_mut() {
            let Some((i, (child, state))) = top.children.next() else {
                stack.pop();
                continue;
            };
            let (parent, depth) = (top.fp, top.depth + 1);
            // Revisiting at a smaller depth only matters under a depth bound.
            let earlier = match parents.get(&child) {
                Some(p) if p.depth as usize <= depth || self.cfg.depth_bound.is_none() => continue,
                Some(p) => Some(p.depth as usize),
                None => None,
            };
            parents.insert(
                child,
                Parent {
                    parent,
                    edge: i as u32,
                    depth: depth as u32,
                },
            );
            let mut res = self.expand(&state, depth);
            match earlier {
                None => {
                    report.max_depth = report.max_depth.max(depth);
                    if let Some(f) = report.record(&mut res) {
                        found.get_or_insert((child, f));
                    }
                }
                Some(before) => {
                    // Counted already; only a lifted depth cut changes.
                    let bound = self.cfg.depth_bound.unwrap_or(usize::MAX);
                    if before >= bound && matches!(res.status, Status::Expanded) {
                        report.depth_cut_states -= 1;
                        report.transitions += res.edges.len();
                        if res.edges.is_empty() {
                            report.terminal_states += 1;
                        }
                    }
                }
            }
            if (found.is_some() && self.cfg.stop_at_first) || self.over_budget(parents, report) {
                return found;
            }
            stack.push(Frame {
                fp: child,
                depth,
                children: res.edges.into_iter().enumerate().rev(),
            });
        }
        found
    }

    fn expand(&self, g: &GState, depth: usize) -> Expansion {
        let forgeable = self.cfg.forgeries.then(|| self.cfg.horizon());
        let finding = match self.model.check_invariants(g) {
            Err(e) => Some(Finding {
                description: e.to_string(),
                forge: Vec::new(),
            }),
            Ok(()) => state_violation(self.model, g, forgeable.as_ref()),
        };
        let votes: Vec<&Msg> = g
            .msg_history
            .keys()
            .filter(|m| m.kind == MsgKind::CertVote)
            .collect();
        let certs = certified_values(&self.model.params, &votes);
        let goal = certs.get(&self.cfg.round_goal);
        let certified = goal.is_some();
        let multi_period =
            goal.is_some_and(|cs| cs.iter().map(|c| c.0).collect::<BTreeSet<_>>().len() > 1);
        let (status, edges) = if let Some(f) = finding {
            (Status::Finding(f), Vec::new())
        } else if !self.within_horizon(g) {
            (Status::Horizon, Vec::new())
        } else if self.cfg.prune_decided && self.decided(g) {
            (Status::Decided, Vec::new())
        } else if self.cfg.depth_bound.is_some_and(|d| depth >= d) {
            (Status::DepthCut, Vec::new())
        } else {
            let edges = self
                .successors(g)
                .into_iter()
                .map(|e| (self.fingerprint(&e.state), e.state))
                .collect();
            (Status::Expanded, edges)
        };
        Expansion {
            status,
            certified,
            multi_period,
            edges,
        }
    }

    /// Rebuilds the path to `target` by re-expanding each ancestor, then
    /// appends any forgeries the finding relies on.
    fn counterexample(
        &self,
        parents: &HashMap<u64, Parent>,
        target: u64,
        finding: Finding,
    ) -> Counterexample {
        let mut chain = Vec::new();
        let mut cur = target;
        while let Some(p) = parents.get(&cur) {
            if p.edge == ROOT_EDGE {
                break;
            }
            chain.push(p.edge as usize);
            cur = p.parent;
        }
        chain.reverse();
        let (mut g, mut labels) = self.start();
        for i in chain {
            let edge = self.successors(&g).swap_remove(i);
            labels.extend(edge.labels);
            g = edge.state;
        }
        let lat = self.max_latency();
        labels.extend(finding.forge.iter().map(|m| Label::Forge {
            msg: m.clone(),
            latencies: Latencies::Uniform(lat),
        }));
        let trace = Trace::replay(self.model.clone(), self.model.initial(), labels)
            .expect("explored edges replay through the transition relation");
        let violation = check_all(&trace)
            .violations()
            .next()
            .map(|(_, v)| v.clone());
        Counterexample {
            finding: finding.description,
            violation,
            trace,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(n: u32, c: u32, tau: u32, plan: &[u32]) -> Model {
        let params = ProtocolParams::with_committee(n, c)
            .with_tau(tau)
            .with_seed(5);
        Model::new(params, plan.iter().map(|&u| UserId(u)))
    }

    #[test]
    fn initial_state_only_ticks_or_starts() {
        let m = model(3, 3, 3, &[]);
        let g = m.initial();
        let labels = enabled_labels(&m, &ExploreConfig::for_model(&m), &g);
        assert!(!labels.is_empty());
        assert!(labels.iter().all(|l| matches!(
            l,
            Label::Internal {
                timeout: TimeoutKind::Start,
                ..
            }
        )));
    }

    #[test]
    fn depth_zero_visits_only_the_initial_state() {
        let m = model(3, 3, 3, &[]);
        let cfg = ExploreConfig {
            depth_bound: Some(0),
            ..ExploreConfig::for_model(&m)
        };
        let r = explore(&m, &cfg).unwrap();
        assert_eq!(r.states, 1);
        assert_eq!(r.outcome, Outcome::Complete);
    }

    #[test]
    fn rejects_dishonest_plan() {
        let m = model(4, 4, 3, &[0, 1]);
        assert!(matches!(
            explore(&m, &ExploreConfig::for_model(&m)),
            Err(ExploreError::Honesty(_))
        ));
    }

    #[test]
    fn enabled_labels_fire() {
        let m = model(3, 3, 3, &[]);
        let cfg = ExploreConfig::for_model(&m);
        let ex = Explorer {
            model: &m,
            cfg: &cfg,
        };
        let mut g = m.initial();
        for _ in 0..12 {
            let labels = ex.labels(&g);
            for l in &labels {
                m.apply(&g, l).unwrap();
            }
            let Some(first) = labels.last() else { break };
            g = m.apply(&g, first).unwrap().0;
        }
    }

    /// What an outside observer sees at `g`: every honest user's position
    /// and decisions, and what the honest users have sent; with `now` when
    /// `g` was reached by an honest emission.
    fn observation(g: &GState, timed: bool) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        if timed {
            g.now.hash(&mut h);
        }
        for u in &g.users {
            (
                u.corrupt,
                u.round,
                u.period,
                u.step,
                u.stv,
                &u.has_certvoted,
                &u.blocks,
            )
                .hash(&mut h);
        }
        for m in g.msg_history.keys().filter(|m| g.is_honest(m.sender)) {
            m.hash(&mut h);
        }
        h.finish()
    }

    fn honest_sent(g: &GState) -> usize {
        g.msg_history
            .keys()
            .filter(|m| g.is_honest(m.sender))
            .count()
    }

    fn observations(m: &Model, cfg: &ExploreConfig) -> BTreeMap<u64, GState> {
        let cfg = cfg.resolved(&m.params);
        let ex = Explorer {
            model: m,
            cfg: &cfg,
        };
        let (root, _) = ex.start();
        let mut seen = std::collections::HashSet::new();
        let mut out = BTreeMap::new();
        let mut stack = vec![(root, false)];
        while let Some((g, emitted)) = stack.pop() {
            if emitted {
                out.entry(observation(&g, true))
                    .or_insert_with(|| g.clone());
            }
            let mut h = std::collections::hash_map::DefaultHasher::new();
            g.hash(&mut h);
            if !seen.insert(h.finish()) {
                continue;
            }
            out.entry(observation(&g, false))
                .or_insert_with(|| g.clone());
            if ex.within_horizon(&g) {
                let sent = honest_sent(&g);
                stack.extend(ex.successors(&g).into_iter().map(|e| {
                    let emitted = honest_sent(&e.state) > sent;
                    (e.state, emitted)
                }));
            }
        }
        out
    }

    fn assert_lazy_delivery_preserves_observations(cases: &[(Model, Round)]) {
        for (m, goal) in cases.iter().cloned() {
            let eager = ExploreConfig {
                lazy_delivery: false,
                round_goal: goal,
                max_step: STEP_CERT,
                unchecked: true,
                ..Default::default()
            };
            let lazy = ExploreConfig {
                lazy_delivery: true,
                ..eager.clone()
            };
            let (a, b) = (observations(&m, &eager), observations(&m, &lazy));
            assert!(a.len() > 10);
            let missing: Vec<&GState> = a
                .iter()
                .filter(|(k, _)| !b.contains_key(k))
                .map(|(_, g)| g)
                .collect();
            let extra = b.keys().filter(|k| !a.contains_key(k)).count();
            for g in missing.iter().take(3) {
                eprintln!(
                    "MISSING t={} users={:?}",
                    g.now,
                    g.users
                        .iter()
                        .map(|u| (
                            u.corrupt,
                            u.round,
                            u.period,
                            u.step,
                            u.stv,
                            &u.has_certvoted
                        ))
                        .collect::<Vec<_>>()
                );
                for m in g.msg_history.keys().filter(|m| g.is_honest(m.sender)) {
                    eprintln!("    {m}");
                }
            }
            assert!(
                missing.is_empty() && extra == 0,
                "{} missing, {extra} extra of {}",
                missing.len(),
                a.len()
            );
        }
    }

    #[test]
    fn lazy_delivery_preserves_observations() {
        assert_lazy_delivery_preserves_observations(&[
            (model(3, 3, 3, &[]), 1),
            (model(2, 2, 2, &[]), 2),
            (model(2, 2, 2, &[0]), 1),
        ]);
    }

    /// Several minutes in release mode.
    #[test]
    #[ignore]
    fn lazy_delivery_preserves_observations_with_forgeries() {
        assert_lazy_delivery_preserves_observations(&[(model(3, 3, 3, &[0]), 1)]);
    }
}
