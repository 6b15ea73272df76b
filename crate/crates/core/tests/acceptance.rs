//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Pass criterion numbers to run
//! a subset, e.g. `cargo test --test acceptance -- 2 3`. The exploration
//! state budget is read from `ACCEPTANCE_STATE_BUDGET` (default 2000000).

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use algorand_model::adversary::{
    default_latency_menu, policy_benign, policy_partition_and_replay, policy_random_byzantine,
    simulate, RunLimits, StopReason,
};
use algorand_model::checker::{
    certifications, certified_in_period, check_all, check_asynchronous_safety,
    check_nextvote_invariant, check_no_2_certvotes, Verdict, Violation,
};
use algorand_model::explorer::{explore, ExploreConfig, Outcome};
use algorand_model::sortition::in_committee;
use algorand_model::transition::{StateView, TraceStep};
use algorand_model::types::{fault_bound, STEP_CERT};
use algorand_model::*;

type Report = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Report);

fn params(n: u32, c: u32, tau: u32, seed: u64) -> ProtocolParams {
    ProtocolParams::with_committee(n, c)
        .with_tau(tau)
        .with_seed(seed)
}

fn state_budget() -> usize {
    std::env::var("ACCEPTANCE_STATE_BUDGET")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(2_000_000)
}

/// The user holding the best round-1 proposal credential.
fn best_proposer(p: &ProtocolParams) -> UserId {
    p.users()
        .min_by_key(|&u| credential(p, u, 1, 1, 1))
        .unwrap()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// 1. Randomized Byzantine runs.

/// First (protocol seed, 3-user plan) in lexicographic order whose plan
/// passes the committee honesty check over `h`.
fn honest_plan(n: u32, c: u32, tau: u32, h: Horizon) -> (ProtocolParams, BTreeSet<UserId>) {
    for seed in 0.. {
        let p = params(n, c, tau, seed);
        for a in 0..n {
            for b in a + 1..n {
                for d in b + 1..n {
                    let plan: BTreeSet<UserId> = [a, b, d].into_iter().map(UserId).collect();
                    if check_committee_honesty(&p, &plan, h).is_ok() {
                        return (p, plan);
                    }
                }
            }
        }
    }
    unreachable!()
}

fn criterion_1() -> Report {
    const RUNS: u64 = 1000;
    let limits = RunLimits {
        max_rounds: 3,
        max_labels: 20_000,
        max_period: 3,
    };
    let horizon = Horizon {
        max_round: limits.max_rounds,
        max_period: limits.max_period,
        max_step: 4,
    };
    let (p, plan) = honest_plan(10, 4, 3, horizon);
    let model = Model::new(
        validate_params(p.clone()).map_err(|e| e.to_string())?,
        plan.iter().copied(),
    );
    let windows = vec![(Time::from_int(3), Time::from_int(15))];
    let mut stops: BTreeMap<String, usize> = BTreeMap::new();
    let (mut corrupted, mut multi, mut certified_rounds) = (0usize, 0usize, 0usize);
    for seed in 0..RUNS {
        let mut pol = policy_random_byzantine(seed, 0.6, default_latency_menu(p.delivery_bound))
            .with_windows(windows.clone())
            .with_max_period(limits.max_period);
        let (trace, stop) =
            simulate(&model, &mut pol, limits).map_err(|e| format!("seed {seed}: {e}"))?;
        *stops.entry(format!("{stop:?}")).or_default() += 1;
        let report = check_all(&trace);
        if let Some((name, v)) = report.violations().next() {
            return Err(format!("seed {seed}: {name}: {v}"));
        }
        ensure(!report.has_precondition_failure(), || {
            format!("seed {seed}: {}", report.summary())
        })?;
        corrupted += trace.view(trace.len() - 1).corrupt.len();
        multi += report.multi_period_rounds().len();
        certified_rounds += report.certifications.len();
    }
    Ok(format!(
        "{RUNS} runs, protocol seed {}, plan {:?}: 0 violations; stops {stops:?}; {corrupted} corruptions, {certified_rounds} certified rounds, {multi} multi-period rounds",
        p.seed,
        plan.iter().map(|u| u.0).collect::<Vec<_>>()
    ))
}

// 2. Exhaustive exploration of two tiny configurations.

fn explore_clean(label: &str, model: &Model) -> Report {
    let cfg = ExploreConfig {
        state_budget: state_budget(),
        ..ExploreConfig::for_model(model)
    };
    let t = Instant::now();
    let r = explore(model, &cfg).map_err(|e| format!("{label}: {e}"))?;
    let facts = format!(
        "{label}: {} states, {} transitions, max depth {}, {:.1}s",
        r.states,
        r.transitions,
        r.max_depth,
        t.elapsed().as_secs_f64()
    );
    match r.outcome {
        Outcome::Complete => Ok(facts),
        Outcome::Violation => Err(format!(
            "{facts}: {}",
            r.counterexample.map(|c| c.finding).unwrap_or_default()
        )),
        Outcome::Inconclusive => Err(format!("{facts}: state budget exhausted")),
    }
}

fn criterion_2() -> Report {
    let a = Model::new(params(3, 3, 3, 1), []);
    let bp = params(4, 4, 3, 1);
    let b = Model::new(bp.clone(), [best_proposer(&bp)]);
    let ra = explore_clean("3 users C=3 honest", &a);
    let rb = explore_clean("4 users C=4 1 corruptible", &b);
    match (ra, rb) {
        (Ok(x), Ok(y)) => Ok(format!("{x}; {y}")),
        (x, y) => Err(format!(
            "{}; {}",
            x.unwrap_or_else(|e| e),
            y.unwrap_or_else(|e| e)
        )),
    }
}

// 3. Falsifiability.

fn criterion_3() -> Report {
    // With C = 3 the committee tolerates no fault, so one corrupt member
    // breaks the overlap guarantee that tau = 2 would otherwise give.
    let p = validate_params(params(3, 3, 2, 1)).map_err(|e| e.to_string())?;
    let model = Model::new(p.clone(), [best_proposer(&p)]);
    let cfg = ExploreConfig {
        unchecked: true,
        partitions: true,
        state_budget: state_budget(),
        ..ExploreConfig::for_model(&model)
    };
    let rejected = check_committee_honesty(&p, &model.plan, cfg.horizon());
    ensure(rejected.is_err(), || {
        "one corrupt member of a 3-committee should fail the honesty check".into()
    })?;
    let r = explore(&model, &cfg).map_err(|e| e.to_string())?;
    ensure(r.outcome == Outcome::Violation, || {
        format!("outcome {:?} after {} states", r.outcome, r.states)
    })?;
    let cx = r.counterexample.ok_or("no counterexample")?;
    let text = trace_io::to_string(&cx.trace, 10);
    let back = trace_io::from_str(&text).map_err(|e| e.to_string())?;
    back.validate().map_err(|e| format!("replay: {e}"))?;
    let labels: Vec<Label> = back.labels().cloned().collect();
    let again = Trace::replay(model.clone(), model.initial(), labels).map_err(|e| e.to_string())?;
    ensure(again.last() == cx.trace.last(), || {
        "replay reached a different state".into()
    })?;
    ensure(trace_io::to_string(&again, 10) == text, || {
        "replay is not byte-identical".into()
    })?;
    let verdict = check_asynchronous_safety(&back, 1);
    let v = verdict
        .violation()
        .ok_or_else(|| format!("checker verdict {verdict}"))?;
    ensure(
        matches!(v, Violation::Fork { .. }) && v.revalidate(&back),
        || format!("unexpected {v}"),
    )?;
    Ok(format!(
        "tau=2 C=3: fork after {} states, {}-step counterexample replays byte-identically: {v}",
        r.states,
        back.len()
    ))
}

// 4. Certification in two periods of one round.

fn criterion_4() -> Report {
    let window = (Time::from_int(3), Time::from_int(20));
    let limits = RunLimits {
        max_rounds: 2,
        max_labels: 20_000,
        max_period: 6,
    };
    for proto in 0..50u64 {
        let model = Model::new(params(4, 4, 3, proto), []);
        for seed in 0..20u64 {
            let mut pol = policy_partition_and_replay(
                seed,
                window,
                default_latency_menu(model.params.delivery_bound),
            )
            .map_err(|e| e.to_string())?;
            let (trace, _) = simulate(&model, &mut pol, limits).map_err(|e| e.to_string())?;
            let report = check_all(&trace);
            let Some(&r) = report.multi_period_rounds().first() else {
                continue;
            };
            ensure(!report.has_violation(), || report.summary())?;
            let certs = certifications(&trace, model.params.tau_cert, r);
            let values: BTreeSet<Value> = certs.iter().map(|c| c.value).collect();
            let periods: BTreeSet<u32> = certs.iter().map(|c| c.period).collect();
            ensure(values.len() == 1 && periods.len() >= 2, || {
                format!("{certs:?}")
            })?;
            let first = &certs[0];
            let verdict = check_nextvote_invariant(&trace, r, first.period, first.value);
            ensure(verdict == Verdict::Ok, || {
                format!("next-vote invariant: {verdict}")
            })?;
            return Ok(format!(
                "protocol seed {proto}, policy seed {seed}: round {r} certifies value {} in periods {periods:?}; next-vote invariant ok",
                first.value
            ));
        }
    }
    Err("no partition_and_replay run certified a round in two periods".into())
}

// 5. Quorum overlap.

fn subsets(n: u32, k: u32) -> Vec<u32> {
    (0u32..1 << n).filter(|m| m.count_ones() == k).collect()
}

/// A corruption set of at most `f` seats and two `tau`-quorums of a
/// `c`-committee whose intersection is entirely corrupt, if any.
fn overlap_counterexample(c: u32, tau: u32, f: u32) -> Option<(u32, u32, u32)> {
    let quorums = subsets(c, tau);
    for k in 0..=f {
        for bad in subsets(c, k) {
            for &q1 in &quorums {
                for &q2 in &quorums {
                    if q1 & q2 & !bad == 0 {
                        return Some((bad, q1, q2));
                    }
                }
            }
        }
    }
    None
}

fn members(mask: u32) -> Vec<u32> {
    (0..32).filter(|i| mask & (1 << i) != 0).collect()
}

fn criterion_5() -> Report {
    let mut refuted = Vec::new();
    let mut summary = Vec::new();
    for c in 1..=6u32 {
        let f = fault_bound(c);
        let tau = 2 * f + 1;
        let accepted = validate_params(params(c, c, tau, 0)).is_ok();
        match overlap_counterexample(c, tau, f) {
            None => {
                ensure(accepted, || {
                    format!("C={c} tau={tau} overlaps but is rejected")
                })?;
                summary.push(format!("C={c} tau={tau} ok"));
            }
            Some((bad, q1, q2)) => {
                ensure(!accepted, || {
                    format!("C={c} tau={tau} fails overlap but is accepted")
                })?;
                refuted.push(format!(
                    "C={c} tau={tau}: corrupt {:?}, quorums {:?} and {:?}",
                    members(bad),
                    members(q1),
                    members(q2)
                ));
            }
        }
        let safe = types::min_overlap_threshold(c);
        ensure(overlap_counterexample(c, safe, f).is_none(), || {
            format!("C={c} tau={safe} fails")
        })?;
    }
    if refuted.is_empty() {
        Ok(summary.join(", "))
    } else {
        Err(format!(
            "2f+1 quorums share no honest member for {} (validate_params rejects these; ceil((C+f+1)/2) overlaps for every C <= 6); holds for {}",
            refuted.join("; "),
            summary.join(", ")
        ))
    }
}

// 6. Planted fixtures.

fn benign_trace() -> Result<Trace, String> {
    let model = Model::new(params(4, 4, 3, 1), []);
    let mut pol = policy_benign(3, default_latency_menu(model.params.delivery_bound));
    let limits = RunLimits {
        max_rounds: 1,
        ..Default::default()
    };
    Ok(simulate(&model, &mut pol, limits)
        .map_err(|e| e.to_string())?
        .0)
}

fn plant(trace: &mut Trace, msgs: Vec<Msg>) {
    let view: StateView = trace.view(trace.len() - 1);
    let effects = transition::Effects {
        emitted: msgs.clone(),
        ..Default::default()
    };
    trace.push_unchecked(TraceStep {
        label: Label::Forge {
            msg: msgs[0].clone(),
            latencies: Latencies::Uniform(Time::ZERO),
        },
        effects,
        view,
    });
}

fn certvote(p: &ProtocolParams, u: UserId, period: u32, v: Value) -> Msg {
    Msg::new(
        MsgKind::CertVote,
        u,
        1,
        period,
        STEP_CERT,
        Payload::Val(v),
        credential(p, u, 1, period, STEP_CERT),
    )
    .unwrap()
}

fn criterion_6() -> Report {
    let clean = benign_trace()?;
    let p = clean.params().clone();
    let cert = certified_in_period(&clean, p.tau_cert, 1, 1);
    let [c] = &cert[..] else {
        return Err(format!("benign run certified {cert:?}"));
    };
    let other = Value((c.value.0 + 1) % p.n_values);

    let mut double = clean.clone();
    let voter = *c.quorum.first().unwrap();
    plant(&mut double, vec![certvote(&p, voter, 1, other)]);

    let mut fork = clean.clone();
    let voters: Vec<UserId> = p
        .users()
        .filter(|&u| in_committee(&p, u, 1, 2, STEP_CERT))
        .take(p.tau_cert as usize)
        .collect();
    plant(
        &mut fork,
        voters.iter().map(|&u| certvote(&p, u, 2, other)).collect(),
    );

    let reparse =
        |t: &Trace| trace_io::from_str(&trace_io::to_string(t, 0)).map_err(|e| e.to_string());
    let (clean, double, fork) = (reparse(&clean)?, reparse(&double)?, reparse(&fork)?);

    ensure(!check_all(&clean).has_violation(), || {
        "clean fixture flagged".into()
    })?;
    let d = check_no_2_certvotes(&double);
    ensure(
        matches!(d.violation(), Some(v @ Violation::DoubleCertVote { .. }) if v.revalidate(&double)),
        || format!("double cert-vote fixture: {d}"),
    )?;
    ensure(check_asynchronous_safety(&double, 1).is_ok(), || {
        "double cert-vote fixture reported as fork".into()
    })?;
    let f = check_asynchronous_safety(&fork, 1);
    ensure(
        matches!(f.violation(), Some(v @ Violation::Fork { .. }) if v.revalidate(&fork)),
        || format!("fork fixture: {f}"),
    )?;
    ensure(check_no_2_certvotes(&fork).is_ok(), || {
        "fork fixture reported as double vote".into()
    })?;

    // A clean adversarial run must not be flagged either.
    let model = Model::new(params(4, 4, 3, 1), [UserId(0)]);
    let mut pol = policy_random_byzantine(5, 0.8, default_latency_menu(p.delivery_bound));
    let (adv, _) = simulate(&model, &mut pol, RunLimits::default()).map_err(|e| e.to_string())?;
    ensure(!check_all(&adv).has_violation(), || {
        check_all(&adv).summary()
    })?;
    Ok("double cert-vote and fork fixtures flagged with revalidated evidence; benign and byzantine traces clean".into())
}

// 7. Reproducibility.

const SCENARIO: &str = r#"
[protocol]
n_users = 10
committee_size = 4
tau = 3
seed = 4

[adversary]
plan = [2]
policy = "random_byzantine"
aggressiveness = 0.7
partition_windows = [["3", "15"]]

[run]
seed = 11
max_rounds = 3
snapshot_every = 25
"#;

fn render(cfg: &config::ScenarioConfig, seed: u64) -> Result<String, String> {
    let model = cfg.model().map_err(|e| e.to_string())?;
    let mut pol = cfg.policy(&model.params, seed).map_err(|e| e.to_string())?;
    let (trace, _) = simulate(&model, pol.as_mut(), cfg.run_limits()).map_err(|e| e.to_string())?;
    Ok(trace_io::to_string(&trace, cfg.run.snapshot_every))
}

fn criterion_7() -> Report {
    let cfg = config::ScenarioConfig::from_toml(SCENARIO).map_err(|e| e.to_string())?;
    let mut sizes = Vec::new();
    for seed in [11, 12, 13] {
        let a = render(&cfg, seed)?;
        let b = render(&cfg, seed)?;
        ensure(a == b, || format!("seed {seed}: traces differ"))?;
        let back = trace_io::from_str(&a).map_err(|e| e.to_string())?;
        back.validate().map_err(|e| e.to_string())?;
        ensure(
            trace_io::to_string(&back, cfg.run.snapshot_every) == a,
            || format!("seed {seed}: round trip changed the trace"),
        )?;
        sizes.push(a.len());
    }
    ensure(render(&cfg, 11)? != render(&cfg, 12)?, || {
        "different seeds gave identical traces".into()
    })?;
    Ok(format!(
        "3 seeds byte-identical across runs and round trips ({sizes:?} bytes)"
    ))
}

// 8. Liveness smoke.

fn criterion_8() -> Report {
    let mut worst = Time::ZERO;
    let mut runs = 0;
    for (n, c) in [(4, 4), (7, 7), (10, 4)] {
        for seed in 0..10u64 {
            let p = validate_params(ProtocolParams::with_committee(n, c).with_seed(seed))
                .map_err(|e| e.to_string())?;
            let bound = (p.lambda_propose + p.lambda_step * 3) * 10;
            let model = Model::new(p.clone(), []);
            let mut pol = policy_benign(seed, default_latency_menu(p.delivery_bound));
            let limits = RunLimits {
                max_rounds: 5,
                ..Default::default()
            };
            let (trace, stop) = simulate(&model, &mut pol, limits).map_err(|e| e.to_string())?;
            ensure(stop == StopReason::RoundsDone, || {
                format!("n={n} seed {seed}: stopped {stop:?}")
            })?;
            for r in 1..=5 {
                let certs = certifications(&trace, p.tau_cert, r);
                let values: BTreeSet<Value> = certs.iter().map(|c| c.value).collect();
                ensure(values.len() == 1, || {
                    format!("n={n} seed {seed} round {r}: {values:?}")
                })?;
                let start = (0..trace.len())
                    .find(|&i| trace.view(i).positions.iter().any(|&(ur, _, _)| ur >= r))
                    .ok_or("round never started")?;
                let took = trace.view(certs[0].completed_at).now - trace.view(start).now;
                ensure(took <= bound, || {
                    format!("n={n} seed {seed} round {r}: {took} > {bound}")
                })?;
                worst = worst.max(took);
            }
            runs += 1;
        }
    }
    Ok(format!(
        "{runs} benign runs, rounds 1-5 each certify one value; slowest round {worst} (bound 140)"
    ))
}

fn main() {
    let criteria: [Criterion; 8] = [
        (1, "randomized byzantine safety", criterion_1),
        (2, "exhaustive exploration", criterion_2),
        (3, "weakened threshold falsified", criterion_3),
        (4, "multi-period certification", criterion_4),
        (5, "quorum overlap", criterion_5),
        (6, "planted fixtures", criterion_6),
        (7, "reproducible traces", criterion_7),
        (8, "liveness smoke", criterion_8),
    ];
    let wanted: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let result = run();
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n} {name}: PASS ({secs:.1}s) {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} {name}: FAIL ({secs:.1}s) {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
