//! Trace predicates and safety checkers.
//!
//! Certification is decided from the messages *authored* along a trace
//! (honest emissions and forgeries), not from any single user's view: a
//! value is certified in `(r, p)` once `tau` distinct members of the
//! cert-vote committee have cert-voted for it somewhere in the trace.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::sortition::committee;
use crate::transition::Trace;
use crate::types::{Msg, MsgKind, Payload, Period, Round, Step, UserId, Value, STEP_CERT};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CertificationRecord {
    pub round: Round,
    pub period: Period,
    pub value: Value,
    pub quorum: BTreeSet<UserId>,
    /// Trace index of each quorum member's cert-vote.
    pub evidence: BTreeMap<UserId, usize>,
    /// Index at which the quorum reached the threshold.
    pub completed_at: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    /// Two certifications for different values in one round.
    Fork {
        round: Round,
        first: CertificationRecord,
        second: CertificationRecord,
    },
    /// An honest user cert-voted twice in one period.
    DoubleCertVote {
        uid: UserId,
        round: Round,
        period: Period,
        first: (usize, Msg),
        second: (usize, Msg),
    },
    /// A next-vote quorum at or after the first certification that is open
    /// or for another value.
    NextVoteQuorum {
        round: Round,
        period: Period,
        step: Step,
        payload: Payload,
        certified: Value,
        voters: BTreeMap<UserId, usize>,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Fork { round, first, second } => write!(
                f,
                "fork in round {round}: value {} certified in period {} (index {}) and value {} in period {} (index {})",
                first.value, first.period, first.completed_at, second.value, second.period, second.completed_at
            ),
            Violation::DoubleCertVote {
                uid,
                round,
                period,
                first,
                second,
            } => write!(
                f,
                "honest {uid} cert-voted twice in ({round}, {period}): {} at index {} and {} at index {}",
                first.1.payload, first.0, second.1.payload, second.0
            ),
            Violation::NextVoteQuorum {
                round,
                period,
                step,
                payload,
                certified,
                voters,
            } => write!(
                f,
                "next-vote quorum for {payload} at ({round}, {period}, {step}) with {} voters after certification of {certified}",
                voters.len()
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Ok,
    Violation(Box<Violation>),
    /// The check's precondition does not hold, so no safety claim is made.
    PreconditionFailed(String),
}

impl Verdict {
    pub fn is_ok(&self) -> bool {
        matches!(self, Verdict::Ok)
    }

    pub fn violation(&self) -> Option<&Violation> {
        match self {
            Verdict::Violation(v) => Some(v),
            _ => None,
        }
    }

    fn violated(v: Violation) -> Self {
        Verdict::Violation(Box::new(v))
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Ok => f.write_str("ok"),
            Verdict::Violation(v) => write!(f, "violation: {v}"),
            Verdict::PreconditionFailed(why) => write!(f, "precondition failed: {why}"),
        }
    }
}

/// Messages authored along the trace, with the index of the state they produced.
pub fn emissions(trace: &Trace) -> impl Iterator<Item = (usize, &Msg)> {
    trace
        .steps
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.effects.emitted.iter().map(move |m| (i + 1, m)))
}

pub fn certvoted_in_path_at(
    trace: &Trace,
    idx: usize,
    uid: UserId,
    r: Round,
    p: Period,
    v: Value,
) -> bool {
    trace.effects(idx).is_some_and(|fx| {
        fx.emitted.iter().any(|m| {
            m.kind == MsgKind::CertVote
                && m.sender == uid
                && m.round == r
                && m.period == p
                && m.payload == Payload::Val(v)
        })
    })
}

pub fn user_honest_at(trace: &Trace, idx: usize, uid: UserId) -> bool {
    trace.is_honest_at(idx, uid)
}

/// `uid` is honest at every index where some user is at `(r, p, s)`.
pub fn honest_during_step(trace: &Trace, (r, p, s): (Round, Period, Step), uid: UserId) -> bool {
    (0..trace.len()).all(|idx| {
        let v = trace.view(idx);
        !v.positions.contains(&(r, p, s)) || v.is_honest(uid)
    })
}

/// One record per value with a `tau`-quorum of cert-votes at `(r, p)`.
pub fn certified_in_period(
    trace: &Trace,
    tau: u32,
    r: Round,
    p: Period,
) -> Vec<CertificationRecord> {
    let members = committee(trace.params(), r, p, STEP_CERT);
    let mut per_value: BTreeMap<Value, BTreeMap<UserId, usize>> = BTreeMap::new();
    for (idx, m) in emissions(trace) {
        if m.kind != MsgKind::CertVote
            || m.round != r
            || m.period != p
            || !members.contains(&m.sender)
        {
            continue;
        }
        if let Payload::Val(v) = m.payload {
            per_value
                .entry(v)
                .or_default()
                .entry(m.sender)
                .or_insert(idx);
        }
    }
    per_value
        .into_iter()
        .filter(|(_, voters)| voters.len() as u32 >= tau)
        .map(|(value, evidence)| {
            let mut idxs: Vec<usize> = evidence.values().copied().collect();
            idxs.sort_unstable();
            CertificationRecord {
                round: r,
                period: p,
                value,
                quorum: evidence.keys().copied().collect(),
                completed_at: idxs[tau.max(1) as usize - 1],
                evidence,
            }
        })
        .collect()
}

/// Certifications of round `r` across all periods, ordered by completion index.
pub fn certifications(trace: &Trace, tau: u32, r: Round) -> Vec<CertificationRecord> {
    let periods: BTreeSet<Period> = emissions(trace)
        .filter(|(_, m)| m.kind == MsgKind::CertVote && m.round == r)
        .map(|(_, m)| m.period)
        .collect();
    let mut out: Vec<CertificationRecord> = periods
        .into_iter()
        .flat_map(|p| certified_in_period(trace, tau, r, p))
        .collect();
    out.sort_by_key(|c| (c.completed_at, c.period, c.value));
    out
}

pub fn first_certification(trace: &Trace, r: Round) -> Option<CertificationRecord> {
    certifications(trace, trace.params().tau_cert, r)
        .into_iter()
        .next()
}

pub fn check_asynchronous_safety(trace: &Trace, r: Round) -> Verdict {
    if !trace.initial.before_round(r) {
        return Verdict::PreconditionFailed(format!(
            "initial state already contains round {r} activity"
        ));
    }
    let certs = certifications(trace, trace.params().tau_cert, r);
    let Some(first) = certs.first() else {
        return Verdict::Ok;
    };
    match certs.iter().find(|c| c.value != first.value) {
        Some(second) => Verdict::violated(Violation::Fork {
            round: r,
            first: first.clone(),
            second: second.clone(),
        }),
        None => Verdict::Ok,
    }
}

pub fn check_no_2_certvotes(trace: &Trace) -> Verdict {
    let mut seen: BTreeMap<(UserId, Round, Period), (usize, &Msg)> = BTreeMap::new();
    for (idx, m) in emissions(trace) {
        if m.kind != MsgKind::CertVote || !user_honest_at(trace, idx, m.sender) {
            continue;
        }
        let key = (m.sender, m.round, m.period);
        match seen.get(&key) {
            Some(&(first_idx, first)) => {
                return Verdict::violated(Violation::DoubleCertVote {
                    uid: m.sender,
                    round: m.round,
                    period: m.period,
                    first: (first_idx, first.clone()),
                    second: (idx, m.clone()),
                })
            }
            None => {
                seen.insert(key, (idx, m));
            }
        }
    }
    Verdict::Ok
}

/// From the period of the first certification on, every next-vote quorum of
/// the round is for the certified value.
pub fn check_nextvote_invariant(trace: &Trace, r: Round, p1: Period, v1: Value) -> Verdict {
    let params = trace.params();
    let certified = certified_in_period(trace, params.tau_cert, r, p1);
    if !certified.iter().any(|c| c.value == v1) {
        return Verdict::PreconditionFailed(format!("value {v1} is not certified in ({r}, {p1})"));
    }
    let mut groups: BTreeMap<(Period, Step, Payload), BTreeMap<UserId, usize>> = BTreeMap::new();
    for (idx, m) in emissions(trace) {
        if m.kind == MsgKind::NextVote && m.round == r && m.period >= p1 {
            groups
                .entry((m.period, m.step, m.payload))
                .or_default()
                .entry(m.sender)
                .or_insert(idx);
        }
    }
    for ((p, s, payload), mut voters) in groups {
        if payload == Payload::Val(v1) {
            continue;
        }
        let members = committee(params, r, p, s);
        voters.retain(|u, _| members.contains(u));
        if voters.len() as u32 >= params.tau_next {
            return Verdict::violated(Violation::NextVoteQuorum {
                round: r,
                period: p,
                step: s,
                payload,
                certified: v1,
                voters,
            });
        }
    }
    Verdict::Ok
}

impl Violation {
    /// Re-validates the evidence against the trace using only the primitive
    /// predicates, independent of the checker that produced it.
    pub fn revalidate(&self, trace: &Trace) -> bool {
        let params = trace.params();
        match self {
            Violation::Fork {
                round,
                first,
                second,
            } => {
                let ok = |c: &CertificationRecord| {
                    let members = committee(params, *round, c.period, STEP_CERT);
                    c.quorum.len() as u32 >= params.tau_cert
                        && c.quorum.iter().all(|u| {
                            members.contains(u)
                                && c.evidence.get(u).is_some_and(|&idx| {
                                    certvoted_in_path_at(trace, idx, *u, *round, c.period, c.value)
                                })
                        })
                };
                first.value != second.value && ok(first) && ok(second)
            }
            Violation::DoubleCertVote {
                uid,
                round,
                period,
                first,
                second,
            } => {
                let voted = |(idx, m): &(usize, Msg)| {
                    m.value().is_some_and(|v| {
                        certvoted_in_path_at(trace, *idx, *uid, *round, *period, v)
                    }) && user_honest_at(trace, *idx, *uid)
                };
                first.0 != second.0 && voted(first) && voted(second)
            }
            Violation::NextVoteQuorum {
                round,
                period,
                step,
                payload,
                certified,
                voters,
            } => {
                let members = committee(params, *round, *period, *step);
                *payload != Payload::Val(*certified)
                    && voters.len() as u32 >= params.tau_next
                    && voters.iter().all(|(u, &idx)| {
                        members.contains(u)
                            && trace.effects(idx).is_some_and(|fx| {
                                fx.emitted.iter().any(|m| {
                                    m.kind == MsgKind::NextVote
                                        && m.sender == *u
                                        && (m.round, m.period, m.step) == (*round, *period, *step)
                                        && m.payload == *payload
                                })
                            })
                    })
            }
        }
    }
}

/// Results of the full checker suite over one trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckReport {
    pub steps: usize,
    pub checks: Vec<(String, Verdict)>,
    /// `round -> [(period, value)]` for every certification found.
    pub certifications: BTreeMap<Round, Vec<(Period, Value)>>,
}

impl CheckReport {
    pub fn violations(&self) -> impl Iterator<Item = (&str, &Violation)> {
        self.checks
            .iter()
            .filter_map(|(name, v)| v.violation().map(|x| (name.as_str(), x)))
    }

    pub fn has_violation(&self) -> bool {
        self.violations().next().is_some()
    }

    pub fn has_precondition_failure(&self) -> bool {
        self.checks
            .iter()
            .any(|(_, v)| matches!(v, Verdict::PreconditionFailed(_)))
    }

    /// Rounds certified in two or more distinct periods.
    pub fn multi_period_rounds(&self) -> Vec<Round> {
        self.certifications
            .iter()
            .filter(|(_, cs)| cs.iter().map(|(p, _)| p).collect::<BTreeSet<_>>().len() >= 2)
            .map(|(&r, _)| r)
            .collect()
    }

    /// One `key=value` line per fact.
    pub fn to_kv(&self) -> String {
        let mut out = format!("trace.steps={}\n", self.steps);
        for (name, v) in &self.checks {
            let status = match v {
                Verdict::Ok => "ok",
                Verdict::Violation(_) => "violation",
                Verdict::PreconditionFailed(_) => "precondition_failed",
            };
            out.push_str(&format!("check.{name}={status}\n"));
            if !v.is_ok() {
                out.push_str(&format!("check.{name}.detail={v}\n"));
            }
        }
        for (r, cs) in &self.certifications {
            let list: Vec<String> = cs.iter().map(|(p, v)| format!("p{p}:v{v}")).collect();
            out.push_str(&format!("round.{r}.certified={}\n", list.join(",")));
        }
        let multi: Vec<String> = self
            .multi_period_rounds()
            .iter()
            .map(|r| r.to_string())
            .collect();
        out.push_str(&format!("multi_period_rounds={}\n", multi.join(",")));
        out
    }

    pub fn summary(&self) -> String {
        let bad: Vec<String> = self
            .checks
            .iter()
            .filter(|(_, v)| !v.is_ok())
            .map(|(n, v)| format!("  {n}: {v}"))
            .collect();
        let mut s = format!(
            "{} steps, {} checks, {} certified rounds",
            self.steps,
            self.checks.len(),
            self.certifications.len()
        );
        let multi = self.multi_period_rounds();
        if !multi.is_empty() {
            s.push_str(&format!(", rounds certified in several periods: {multi:?}"));
        }
        if bad.is_empty() {
            s.push_str("; all checks passed");
        } else {
            s.push_str(";\n");
            s.push_str(&bad.join("\n"));
        }
        s
    }
}

/// Runs every checker: asynchronous safety and the next-vote invariant for
/// each round with cert-vote activity, and the per-period cert-vote lemma.
pub fn check_all(trace: &Trace) -> CheckReport {
    let tau = trace.params().tau_cert;
    let rounds: BTreeSet<Round> = emissions(trace)
        .filter(|(_, m)| m.kind == MsgKind::CertVote)
        .map(|(_, m)| m.round)
        .collect();
    let mut checks = vec![("no_2_certvotes".to_string(), check_no_2_certvotes(trace))];
    let mut certs_by_round = BTreeMap::new();
    for r in rounds {
        checks.push((
            format!("safety.round.{r}"),
            check_asynchronous_safety(trace, r),
        ));
        let certs = certifications(trace, tau, r);
        if let Some(first) = certs.first() {
            checks.push((
                format!("nextvote_invariant.round.{r}"),
                check_nextvote_invariant(trace, r, first.period, first.value),
            ));
        }
        let mut list: Vec<(Period, Value)> = certs.iter().map(|c| (c.period, c.value)).collect();
        list.sort();
        if !list.is_empty() {
            certs_by_round.insert(r, list);
        }
    }
    CheckReport {
        steps: trace.steps.len(),
        checks,
        certifications: certs_by_round,
    }
}
