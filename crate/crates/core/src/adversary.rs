//! Adversary policies.
//!
//! The adversary is the scheduler: at every decision point a policy picks
//! the next label, honest timeouts and deliveries included. Policies see the
//! whole global state and draw from their own seeded RNG, so a run is a
//! deterministic function of the model, the policy and its seed.

use std::collections::BTreeSet;

use rand::seq::IteratorRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sortition::{credential, in_committee};
use crate::time::Time;
use crate::transition::{GState, Label, Latencies, Model, PoolEntry, Trace, TransitionError};
use crate::types::{Msg, MsgKind, Payload, Period, Round, Step, UserId, Value, STEP_FIRST_NEXT};

pub trait Policy {
    fn name(&self) -> &'static str;

    /// The next label to fire, or `None` when the policy has nothing left to do.
    /// Returned labels must be enabled at `g`.
    fn next_label(&mut self, model: &Model, g: &GState) -> Option<Label>;
}

/// Latency menu `{0, δ/2, δ}`.
pub fn default_latency_menu(delivery_bound: Time) -> Vec<Time> {
    vec![Time::ZERO, delivery_bound.half(), delivery_bound]
}

/// First honest user whose timeout is due.
pub fn due_timeout(g: &GState) -> Option<&crate::usersm::UState> {
    g.honest_users().find(|u| u.timeout_due())
}

/// Entries whose deadline has arrived, as `(recipient, entry)`.
pub fn due_entries(g: &GState) -> Vec<(UserId, &PoolEntry)> {
    g.msgs
        .iter()
        .enumerate()
        .flat_map(|(i, pool)| {
            pool.entries()
                .take_while(|(e, _)| e.deadline <= g.now)
                .map(move |(e, _)| (UserId(i as u32), e))
        })
        .collect()
}

/// Earliest pending deadline strictly in the future.
fn next_deadline(g: &GState, skip: impl Fn(UserId, &PoolEntry) -> bool) -> Option<Time> {
    g.msgs
        .iter()
        .enumerate()
        .flat_map(|(i, pool)| pool.entries().map(move |(e, _)| (UserId(i as u32), e)))
        .filter(|(u, e)| e.deadline > g.now && !skip(*u, e))
        .map(|(_, e)| e.deadline)
        .min()
}

/// Tick to the next event: the earliest of `max_tick`, the next nominal
/// delivery deadline and any extra boundary (window edges).
fn next_event_tick(
    g: &GState,
    boundaries: &[Time],
    skip: impl Fn(UserId, &PoolEntry) -> bool,
) -> Option<Label> {
    let mut cands: Vec<Time> = Vec::new();
    if let Some(t) = g.max_tick() {
        cands.push(t);
    }
    if let Some(d) = next_deadline(g, skip) {
        cands.push(d - g.now);
    }
    cands.extend(
        boundaries
            .iter()
            .filter(|&&b| b > g.now)
            .map(|&b| b - g.now),
    );
    let delta = cands.into_iter().min()?;
    delta.is_positive().then_some(Label::Tick { delta })
}

fn random_latencies(rng: &mut ChaCha8Rng, n: u32, menu: &[Time]) -> Latencies {
    let v: Vec<Time> = (0..n).map(|_| menu[rng.gen_range(0..menu.len())]).collect();
    if v.windows(2).all(|w| w[0] == w[1]) {
        Latencies::Uniform(v[0])
    } else {
        Latencies::PerRecipient(v)
    }
}

/// Never corrupts or partitions; every message is delivered exactly at its
/// deadline, with latencies drawn uniformly from the menu.
pub struct Benign {
    rng: ChaCha8Rng,
    menu: Vec<Time>,
}

pub fn policy_benign(seed: u64, menu: Vec<Time>) -> Benign {
    Benign {
        rng: ChaCha8Rng::seed_from_u64(seed),
        menu,
    }
}

impl Policy for Benign {
    fn name(&self) -> &'static str {
        "benign"
    }

    fn next_label(&mut self, model: &Model, g: &GState) -> Option<Label> {
        let n = model.params.n_users;
        if let Some(u) = due_timeout(g) {
            return Some(Label::Internal {
                uid: u.id,
                timeout: u.pending_timeout(),
                latencies: random_latencies(&mut self.rng, n, &self.menu),
            });
        }
        let due = due_entries(g);
        if let Some(&(uid, entry)) = due.iter().choose(&mut self.rng) {
            return Some(Label::Deliver {
                uid,
                entry: entry.clone(),
                latencies: random_latencies(&mut self.rng, n, &self.menu),
            });
        }
        next_event_tick(g, &[], |_, _| false)
    }
}

/// Partitions the network during `[start, end)`, holds back cert-votes from
/// the victims so they time out into later periods, replays stale messages,
/// then heals.
pub struct PartitionAndReplay {
    rng: ChaCha8Rng,
    menu: Vec<Time>,
    window: (Time, Time),
    victims: Option<BTreeSet<UserId>>,
    replay_budget: u32,
    replay_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("partition window must satisfy start < end (got {0} >= {1})")]
pub struct BadWindow(pub Time, pub Time);

pub fn policy_partition_and_replay(
    seed: u64,
    window: (Time, Time),
    menu: Vec<Time>,
) -> Result<PartitionAndReplay, BadWindow> {
    if window.0 >= window.1 {
        return Err(BadWindow(window.0, window.1));
    }
    Ok(PartitionAndReplay {
        rng: ChaCha8Rng::seed_from_u64(seed),
        menu,
        window,
        victims: None,
        replay_budget: 16,
        replay_rate: 0.2,
    })
}

impl PartitionAndReplay {
    pub fn with_victims(mut self, victims: impl IntoIterator<Item = UserId>) -> Self {
        self.victims = Some(victims.into_iter().collect());
        self
    }

    fn withheld(&self, g: &GState, uid: UserId, e: &PoolEntry) -> bool {
        g.network_partition
            && e.msg.kind == MsgKind::CertVote
            && self.victims.as_ref().is_none_or(|v| v.contains(&uid))
    }
}

impl Policy for PartitionAndReplay {
    fn name(&self) -> &'static str {
        "partition_and_replay"
    }

    fn next_label(&mut self, model: &Model, g: &GState) -> Option<Label> {
        let n = model.params.n_users;
        let (start, end) = self.window;
        if !g.network_partition && g.now >= start && g.now < end {
            return Some(Label::Partition { on: true });
        }
        if g.network_partition && g.now >= end {
            return Some(Label::Partition { on: false });
        }
        if let Some(u) = due_timeout(g) {
            return Some(Label::Internal {
                uid: u.id,
                timeout: u.pending_timeout(),
                latencies: random_latencies(&mut self.rng, n, &self.menu),
            });
        }
        let due: Vec<_> = due_entries(g)
            .into_iter()
            .filter(|(u, e)| !self.withheld(g, *u, e))
            .collect();
        if let Some(&(uid, entry)) = due.iter().choose(&mut self.rng) {
            return Some(Label::Deliver {
                uid,
                entry: entry.clone(),
                latencies: random_latencies(&mut self.rng, n, &self.menu),
            });
        }
        if g.network_partition && self.replay_budget > 0 && self.rng.gen_bool(self.replay_rate) {
            let msg = g.msg_history.keys().choose(&mut self.rng).cloned();
            let uid = g.honest_users().map(|u| u.id).choose(&mut self.rng);
            if let (Some(msg), Some(uid)) = (msg, uid) {
                self.replay_budget -= 1;
                return Some(Label::Replay {
                    uid,
                    msg,
                    latencies: random_latencies(&mut self.rng, n, &self.menu),
                });
            }
        }
        next_event_tick(g, &[start, end], |u, e| self.withheld(g, u, e))
    }
}

/// Random Byzantine behavior: corruption within the plan, equivocating
/// forgeries for current and future steps, replays, partition toggles and
/// skewed delivery orders. Adversarial moves and random partitions are drawn
/// with probability proportional to `aggressiveness`.
pub struct RandomByzantine {
    rng: ChaCha8Rng,
    menu: Vec<Time>,
    aggressiveness: f64,
    windows: Vec<(Time, Time)>,
    /// Forgeries never target periods beyond this.
    max_period: Period,
    partition_since: Option<Time>,
}

pub fn policy_random_byzantine(seed: u64, aggressiveness: f64, menu: Vec<Time>) -> RandomByzantine {
    RandomByzantine {
        rng: ChaCha8Rng::seed_from_u64(seed),
        menu,
        aggressiveness: aggressiveness.clamp(0.0, 1.0),
        windows: Vec::new(),
        max_period: Period::MAX,
        partition_since: None,
    }
}

impl RandomByzantine {
    pub fn with_windows(mut self, windows: Vec<(Time, Time)>) -> Self {
        self.windows = windows;
        self
    }

    pub fn with_max_period(mut self, max_period: Period) -> Self {
        self.max_period = max_period;
        self
    }

    fn in_window(&self, now: Time) -> bool {
        self.windows.iter().any(|&(a, b)| a <= now && now < b)
    }

    fn latencies(&mut self, model: &Model, g: &GState) -> Latencies {
        let mut menu = self.menu.clone();
        if g.network_partition {
            menu.push(model.params.delivery_bound * 3);
        }
        random_latencies(&mut self.rng, model.params.n_users, &menu)
    }

    fn forge(&mut self, model: &Model, g: &GState) -> Option<Label> {
        let params = &model.params;
        let corrupt: Vec<UserId> = g.users.iter().filter(|u| u.corrupt).map(|u| u.id).collect();
        let anchor = g
            .honest_users()
            .filter(|u| u.started())
            .choose(&mut self.rng)?;
        let (base_r, base_p, base_s) = (anchor.round, anchor.period, anchor.step);
        for _ in 0..8 {
            let &sender = corrupt.iter().choose(&mut self.rng)?;
            let round: Round = base_r + u32::from(self.rng.gen_bool(0.1));
            let period: Period = (base_p + u32::from(self.rng.gen_bool(0.2))).min(self.max_period);
            let kind = [
                MsgKind::Proposal,
                MsgKind::SoftVote,
                MsgKind::CertVote,
                MsgKind::NextVote,
            ][self.rng.gen_range(0..4)];
            let step: Step = match kind {
                MsgKind::Proposal => 1,
                MsgKind::SoftVote => 2,
                MsgKind::CertVote => 3,
                MsgKind::NextVote => self
                    .rng
                    .gen_range(STEP_FIRST_NEXT..=base_s.max(STEP_FIRST_NEXT) + 2),
            };
            if !in_committee(params, sender, round, period, step) {
                continue;
            }
            let open = kind == MsgKind::NextVote && self.rng.gen_bool(0.3);
            let payload = if open {
                Payload::Open
            } else {
                Payload::Val(Value(self.rng.gen_range(0..params.n_values)))
            };
            let msg = Msg::new(
                kind,
                sender,
                round,
                period,
                step,
                payload,
                credential(params, sender, round, period, step),
            )
            .ok()?;
            let latencies = self.latencies(model, g);
            return Some(Label::Forge { msg, latencies });
        }
        None
    }

    fn adversarial_move(&mut self, model: &Model, g: &GState) -> Option<Label> {
        match self.rng.gen_range(0..5) {
            0 => {
                let uid = model
                    .plan
                    .iter()
                    .filter(|u| g.is_honest(**u))
                    .choose(&mut self.rng)
                    .copied()?;
                Some(Label::Corrupt { uid })
            }
            1 | 2 => self.forge(model, g),
            3 => {
                let msg = g.msg_history.keys().choose(&mut self.rng)?.clone();
                let uid = g.honest_users().map(|u| u.id).choose(&mut self.rng)?;
                let latencies = self.latencies(model, g);
                Some(Label::Replay {
                    uid,
                    msg,
                    latencies,
                })
            }
            _ => {
                // Skewed order: deliver any pending entry early.
                let (uid, entry) = g
                    .msgs
                    .iter()
                    .enumerate()
                    .flat_map(|(i, pool)| pool.entries().map(move |(e, _)| (UserId(i as u32), e)))
                    .choose(&mut self.rng)?;
                let entry = entry.clone();
                let latencies = self.latencies(model, g);
                Some(Label::Deliver {
                    uid,
                    entry,
                    latencies,
                })
            }
        }
    }
}

impl Policy for RandomByzantine {
    fn name(&self) -> &'static str {
        "random_byzantine"
    }

    fn next_label(&mut self, model: &Model, g: &GState) -> Option<Label> {
        let a = self.aggressiveness;
        let max_partition = model.params.lambda_step * 2;
        // Partition control: configured windows, plus short random partitions.
        // Random partitions start only when time is about to advance, so their
        // rate is per unit of time rather than per label.
        let idle = due_timeout(g).is_none() && due_entries(g).is_empty();
        let want = if self.in_window(g.now) {
            true
        } else if g.network_partition {
            let since = self.partition_since.unwrap_or(g.now);
            g.now - since < max_partition && !self.rng.gen_bool(0.05)
        } else {
            idle && a > 0.0 && self.rng.gen_bool(a * 0.1)
        };
        if want != g.network_partition {
            self.partition_since = want.then_some(g.now);
            return Some(Label::Partition { on: want });
        }
        // Every forge or replay fans out to all users, so the rate stays well
        // below one broadcast per delivery to keep pools draining.
        if a > 0.0 && self.rng.gen_bool(a * 0.05) {
            if let Some(label) = self.adversarial_move(model, g) {
                return Some(label);
            }
        }
        if let Some(u) = due_timeout(g) {
            let (uid, timeout) = (u.id, u.pending_timeout());
            let latencies = self.latencies(model, g);
            return Some(Label::Internal {
                uid,
                timeout,
                latencies,
            });
        }
        let due = due_entries(g);
        let hold = g.network_partition && self.rng.gen_bool((a * 0.6).min(1.0));
        if !hold {
            if let Some(&(uid, entry)) = due.iter().choose(&mut self.rng) {
                let entry = entry.clone();
                let latencies = self.latencies(model, g);
                return Some(Label::Deliver {
                    uid,
                    entry,
                    latencies,
                });
            }
        }
        let edges: Vec<Time> = self.windows.iter().flat_map(|&(a, b)| [a, b]).collect();
        next_event_tick(g, &edges, |_, _| false).or_else(|| {
            // Only held messages are left; release one.
            let &(uid, entry) = due.first()?;
            let entry = entry.clone();
            let latencies = self.latencies(model, g);
            Some(Label::Deliver {
                uid,
                entry,
                latencies,
            })
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunLimits {
    /// Stop once every honest user has finished this round.
    pub max_rounds: Round,
    pub max_labels: usize,
    /// Stop once any honest user enters a later period.
    pub max_period: Period,
}

impl Default for RunLimits {
    fn default() -> Self {
        RunLimits {
            max_rounds: 3,
            max_labels: 20_000,
            max_period: Period::MAX,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    RoundsDone,
    LabelBudget,
    PeriodHorizon,
    Quiescent,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("policy {policy} chose a disabled label at step {step}: {label}: {source}")]
    Disabled {
        policy: &'static str,
        step: usize,
        label: Box<Label>,
        #[source]
        source: TransitionError,
    },
}

/// Drives `policy` from the initial state until a limit is reached.
pub fn simulate(
    model: &Model,
    policy: &mut dyn Policy,
    limits: RunLimits,
) -> Result<(Trace, StopReason), SimError> {
    let mut trace = Trace::new(model.clone(), model.initial());
    let reason = loop {
        let g = trace.last();
        let honest: Vec<_> = g.honest_users().collect();
        if !honest.is_empty() && honest.iter().all(|u| u.round > limits.max_rounds) {
            break StopReason::RoundsDone;
        }
        if honest.iter().any(|u| u.period > limits.max_period) {
            break StopReason::PeriodHorizon;
        }
        if trace.steps.len() >= limits.max_labels {
            break StopReason::LabelBudget;
        }
        let Some(label) = policy.next_label(model, g) else {
            break StopReason::Quiescent;
        };
        if let Err(source) = trace.push(label.clone()) {
            return Err(SimError::Disabled {
                policy: policy.name(),
                step: trace.len(),
                label: Box::new(label),
                source,
            });
        }
    };
    Ok((trace, reason))
}
