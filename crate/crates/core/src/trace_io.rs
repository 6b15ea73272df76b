//! Line-oriented JSON trace files.
//!
//! A trace file holds one JSON object per line:
//!
//! * a `header` with the format version, the model and the initial state;
//! * one `step` per transition: label, effects and the resulting state view;
//! * optionally a full `snapshot` of the global state every `K` steps;
//! * an `end` record with the step count.
//!
//! Output is deterministic: the same trace always serializes to the same
//! bytes.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transition::{GState, Model, Trace, TraceStep};

pub const FORMAT: &str = "algorand-model-trace";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Record {
    Header {
        format: String,
        version: u32,
        model: Model,
        initial: GState,
    },
    Step {
        index: usize,
        #[serde(flatten)]
        step: TraceStep,
    },
    Snapshot {
        index: usize,
        state: GState,
    },
    End {
        steps: usize,
    },
}

#[derive(Debug, Error)]
pub enum TraceIoError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: trace ends without an end record (truncated file?)")]
    Truncated { line: usize },
}

fn parse_err(line: usize, msg: impl Into<String>) -> TraceIoError {
    TraceIoError::Parse {
        line,
        msg: msg.into(),
    }
}

/// Writes `trace`, with a full snapshot every `snapshot_every` steps (0: none).
pub fn write_trace<W: Write>(mut w: W, trace: &Trace, snapshot_every: usize) -> io::Result<()> {
    let line = |w: &mut W, r: &Record| -> io::Result<()> {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")
    };
    line(
        &mut w,
        &Record::Header {
            format: FORMAT.to_string(),
            version: VERSION,
            model: trace.model.clone(),
            initial: trace.initial.clone(),
        },
    )?;
    let mut state = (snapshot_every > 0).then(|| trace.initial.clone());
    for (i, step) in trace.steps.iter().enumerate() {
        let index = i + 1;
        line(
            &mut w,
            &Record::Step {
                index,
                step: step.clone(),
            },
        )?;
        if let Some(g) = state.as_mut() {
            if trace.model.apply_mut(g, &step.label).is_err() {
                // Planted steps have no successor state to snapshot.
                state = None;
            } else if index % snapshot_every == 0 {
                line(
                    &mut w,
                    &Record::Snapshot {
                        index,
                        state: g.clone(),
                    },
                )?;
            }
        }
    }
    line(
        &mut w,
        &Record::End {
            steps: trace.steps.len(),
        },
    )?;
    w.flush()
}

pub fn to_string(trace: &Trace, snapshot_every: usize) -> String {
    let mut buf = Vec::new();
    write_trace(&mut buf, trace, snapshot_every).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("JSON is UTF-8")
}

/// Reads a trace. Steps need not follow the transition relation (use
/// [`Trace::validate`] for that), but snapshots must agree with replay
/// wherever replay succeeds.
pub fn read_trace<R: BufRead>(r: R) -> Result<Trace, TraceIoError> {
    let mut header: Option<(Model, GState)> = None;
    let mut steps: Vec<TraceStep> = Vec::new();
    let mut snapshots: Vec<(usize, usize, GState)> = Vec::new();
    let mut ended = false;
    let mut last_line = 0;
    for (i, text) in r.lines().enumerate() {
        let line = i + 1;
        last_line = line;
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        if ended {
            return Err(parse_err(line, "content after the end record"));
        }
        let record: Record =
            serde_json::from_str(&text).map_err(|e| parse_err(line, e.to_string()))?;
        match record {
            Record::Header {
                format,
                version,
                model,
                initial,
            } => {
                if header.is_some() {
                    return Err(parse_err(line, "duplicate header"));
                }
                if format != FORMAT || version != VERSION {
                    return Err(parse_err(
                        line,
                        format!("unsupported format {format} v{version}"),
                    ));
                }
                if initial.users.len() != model.params.n_users as usize {
                    return Err(parse_err(
                        line,
                        "initial state does not match the model's user count",
                    ));
                }
                header = Some((model, initial));
            }
            _ if header.is_none() => return Err(parse_err(line, "expected a header record first")),
            Record::Step { index, step } => {
                if index != steps.len() + 1 {
                    return Err(parse_err(
                        line,
                        format!("expected step {}, found {index}", steps.len() + 1),
                    ));
                }
                steps.push(step);
            }
            Record::Snapshot { index, state } => {
                if index != steps.len() {
                    return Err(parse_err(line, format!("snapshot {index} out of place")));
                }
                snapshots.push((line, index, state));
            }
            Record::End { steps: n } => {
                if n != steps.len() {
                    return Err(parse_err(
                        line,
                        format!("end record counts {n} steps, file has {}", steps.len()),
                    ));
                }
                ended = true;
            }
        }
    }
    let Some((model, initial)) = header else {
        return Err(parse_err(last_line.max(1), "missing header"));
    };
    if !ended {
        return Err(TraceIoError::Truncated { line: last_line });
    }
    check_snapshots(&model, &initial, &steps, &snapshots)?;
    Ok(Trace::from_parts(model, initial, steps))
}

fn check_snapshots(
    model: &Model,
    initial: &GState,
    steps: &[TraceStep],
    snapshots: &[(usize, usize, GState)],
) -> Result<(), TraceIoError> {
    let mut g = initial.clone();
    let mut done = 0;
    for (line, index, state) in snapshots {
        for s in &steps[done..*index] {
            if model.apply_mut(&mut g, &s.label).is_err() {
                return Ok(());
            }
        }
        done = *index;
        if &g != state {
            return Err(parse_err(
                *line,
                format!("snapshot at step {index} disagrees with replay"),
            ));
        }
    }
    Ok(())
}

pub fn from_str(s: &str) -> Result<Trace, TraceIoError> {
    read_trace(s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversary::{default_latency_menu, policy_benign, simulate, RunLimits};
    use crate::types::{ProtocolParams, UserId};

    fn sample() -> Trace {
        let m = Model::new(
            ProtocolParams::with_committee(4, 4)
                .with_tau(3)
                .with_seed(2),
            [UserId(3)],
        );
        let mut pol = policy_benign(1, default_latency_menu(m.params.delivery_bound));
        let limits = RunLimits {
            max_rounds: 1,
            ..Default::default()
        };
        simulate(&m, &mut pol, limits).unwrap().0
    }

    #[test]
    fn round_trips() {
        let t = sample();
        let text = to_string(&t, 10);
        let back = from_str(&text).unwrap();
        assert_eq!(back, t);
        assert_eq!(to_string(&back, 10), text);
    }

    #[test]
    fn truncation_reports_a_line() {
        let text = to_string(&sample(), 0);
        let lines: Vec<&str> = text.lines().collect();
        let cut = lines[..lines.len() - 1].join("\n");
        assert!(matches!(
            from_str(&cut),
            Err(TraceIoError::Truncated { .. })
        ));
        let half = &text[..text.len() / 2];
        match from_str(half) {
            Err(TraceIoError::Parse { line, .. }) => assert!(line > 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn corrupted_snapshot_is_rejected() {
        let text = to_string(&sample(), 5);
        let bad = text.replacen(
            "\"network_partition\":false",
            "\"network_partition\":true",
            2,
        );
        assert!(from_str(&bad).is_err());
    }
}
