//! Deterministic stand-in for VRF-based self-selection.
//!
//! A credential weight is a 64-bit hash of `(seed, user, round, period,
//! selection step)`, computed by feeding each component through the
//! SplitMix64 finalizer:
//!
//! ```text
//! h = seed
//! for x in [user, round, period, selection_step]:
//!     h = mix64(h ^ (x * 0x9E3779B97F4A7C15))
//! mix64(z) = z ^= z >> 30; z *= 0xBF58476D1CE4E5B9;
//!            z ^= z >> 27; z *= 0x94D049BB133111EB; z ^= z >> 31
//! ```
//!
//! The selection step is 1 for proposals and 2 for every voting step, so one
//! draw decides the voting committee of a whole period. Credentials still name
//! the concrete step they were issued for.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::types::{Period, ProtocolParams, Round, Step, UserId, STEP_PROPOSE, STEP_SOFT};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn selection_step(step: Step) -> Step {
    if step <= STEP_PROPOSE {
        STEP_PROPOSE
    } else {
        STEP_SOFT
    }
}

/// Hash used for credential weights.
pub fn weight(seed: u64, user: UserId, round: Round, period: Period, step: Step) -> u64 {
    [
        u64::from(user.0),
        u64::from(round),
        u64::from(period),
        u64::from(selection_step(step)),
    ]
    .into_iter()
    .fold(seed, |h, x| mix64(h ^ x.wrapping_mul(GOLDEN)))
}

/// Totally ordered proof of selection. Smaller is better.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Credential {
    pub weight: u64,
    pub owner: UserId,
    pub round: Round,
    pub period: Period,
    pub step: Step,
}

impl Ord for Credential {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.weight, self.owner, self.round, self.period, self.step).cmp(&(
            other.weight,
            other.owner,
            other.round,
            other.period,
            other.step,
        ))
    }
}

impl PartialOrd for Credential {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub fn credential(
    params: &ProtocolParams,
    u: UserId,
    round: Round,
    period: Period,
    step: Step,
) -> Credential {
    Credential {
        weight: weight(params.seed, u, round, period, step),
        owner: u,
        round,
        period,
        step,
    }
}

/// The `committee_size` users holding the smallest credentials at `(r, p, s)`.
pub fn committee(
    params: &ProtocolParams,
    round: Round,
    period: Period,
    step: Step,
) -> BTreeSet<UserId> {
    let mut creds: Vec<Credential> = params
        .users()
        .map(|u| credential(params, u, round, period, step))
        .collect();
    creds.sort_unstable();
    creds
        .into_iter()
        .take(params.committee_size as usize)
        .map(|c| c.owner)
        .collect()
}

pub fn in_committee(
    params: &ProtocolParams,
    u: UserId,
    round: Round,
    period: Period,
    step: Step,
) -> bool {
    let mine = credential(params, u, round, period, step);
    let better = params
        .users()
        .filter(|&o| o != u && credential(params, o, round, period, step) < mine)
        .count();
    better < params.committee_size as usize
}

/// True iff `cred` is the sender's genuine credential for those coordinates
/// and grants committee membership.
pub fn verify(
    params: &ProtocolParams,
    sender: UserId,
    round: Round,
    period: Period,
    step: Step,
    cred: &Credential,
) -> bool {
    sender.0 < params.n_users
        && *cred == credential(params, sender, round, period, step)
        && in_committee(params, sender, round, period, step)
}

/// `(max_round, max_period, max_step)`, all inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Horizon {
    pub max_round: Round,
    pub max_period: Period,
    pub max_step: Step,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HonestyViolation {
    pub round: Round,
    pub period: Period,
    pub step: Step,
    pub corrupt_members: Vec<UserId>,
    pub fault_bound: u32,
}

impl fmt::Display for HonestyViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let members: Vec<String> = self.corrupt_members.iter().map(|u| u.to_string()).collect();
        write!(
            f,
            "committee ({}, {}, {}) has {} corruptible members [{}] but tolerates only {}",
            self.round,
            self.period,
            self.step,
            self.corrupt_members.len(),
            members.join(", "),
            self.fault_bound
        )
    }
}

impl std::error::Error for HonestyViolation {}

/// Checks that no committee within the horizon holds more than `f` users that
/// the adversary may ever corrupt.
pub fn check_committee_honesty(
    params: &ProtocolParams,
    plan: &BTreeSet<UserId>,
    horizon: Horizon,
) -> Result<(), HonestyViolation> {
    let f = params.fault_bound();
    if plan.len() as u32 <= f {
        return Ok(());
    }
    for r in 1..=horizon.max_round {
        for p in 1..=horizon.max_period {
            for s in 1..=horizon.max_step {
                let bad: Vec<UserId> = committee(params, r, p, s)
                    .intersection(plan)
                    .copied()
                    .collect();
                if bad.len() as u32 > f {
                    return Err(HonestyViolation {
                        round: r,
                        period: p,
                        step: s,
                        corrupt_members: bad,
                        fault_bound: f,
                    });
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ProtocolParams {
        ProtocolParams::with_committee(10, 4).with_seed(7)
    }

    #[test]
    fn deterministic() {
        let p = params();
        assert_eq!(
            credential(&p, UserId(3), 1, 2, 3),
            credential(&p, UserId(3), 1, 2, 3)
        );
        assert_eq!(committee(&p, 2, 1, 4), committee(&p, 2, 1, 4));
    }

    #[test]
    fn distinct_order_at_fixed_coordinates() {
        let p = params();
        let mut creds: Vec<_> = p.users().map(|u| credential(&p, u, 1, 1, 1)).collect();
        creds.sort();
        for w in creds.windows(2) {
            assert!(w[0] < w[1]);
        }
    }

    #[test]
    fn whole_population_when_committee_is_everyone() {
        let p = ProtocolParams::with_committee(5, 5);
        assert_eq!(committee(&p, 1, 1, 1).len(), 5);
        assert_eq!(committee(&p, 3, 2, 7), p.users().collect());
    }

    #[test]
    fn voting_steps_share_a_period_draw() {
        let p = params();
        for s in 3..8 {
            assert_eq!(committee(&p, 1, 1, 2), committee(&p, 1, 1, s));
        }
    }

    #[test]
    fn membership_agrees_with_committee() {
        let p = params();
        for s in 1..6 {
            let c = committee(&p, 1, 2, s);
            for u in p.users() {
                assert_eq!(in_committee(&p, u, 1, 2, s), c.contains(&u));
            }
        }
    }

    #[test]
    fn verify_rejects_foreign_credentials() {
        let p = params();
        let c = committee(&p, 1, 1, 3);
        let member = *c.iter().next().unwrap();
        let outsider = p.users().find(|u| !c.contains(u)).unwrap();
        let good = credential(&p, member, 1, 1, 3);
        assert!(verify(&p, member, 1, 1, 3, &good));
        assert!(!verify(&p, member, 1, 1, 2, &good));
        assert!(!verify(
            &p,
            outsider,
            1,
            1,
            3,
            &credential(&p, outsider, 1, 1, 3)
        ));
        let mut forged = good;
        forged.weight ^= 1;
        assert!(!verify(&p, member, 1, 1, 3, &forged));
    }

    #[test]
    fn honesty_trivial_cases() {
        let p = params();
        let h = Horizon {
            max_round: 5,
            max_period: 5,
            max_step: 8,
        };
        assert!(check_committee_honesty(&p, &BTreeSet::new(), h).is_ok());
        let all: BTreeSet<UserId> = p.users().collect();
        let v = check_committee_honesty(&p, &all, h).unwrap_err();
        assert_eq!((v.round, v.period, v.step), (1, 1, 1));
        assert_eq!(v.corrupt_members.len(), 4);
    }
}
