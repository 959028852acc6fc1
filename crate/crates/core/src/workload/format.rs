//! Line-delimited trace records.
//!
//! One flat JSON object per line with the keys `kind`, `tensor_id`,
//! `bytes`, `phase_name`, `phase_kind`; only the keys relevant to the
//! record's kind are present. Blank lines are ignored.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{PhaseKind, Trace, TraceEvent, TraceOrigin, Validator, WorkloadError};
use crate::Bytes;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Alloc,
    Free,
    PhaseBegin,
    PhaseEnd,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record<'a> {
    kind: Kind,
    #[serde(default, borrow, skip_serializing_if = "Option::is_none")]
    tensor_id: Option<std::borrow::Cow<'a, str>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bytes: Option<Bytes>,
    #[serde(default, borrow, skip_serializing_if = "Option::is_none")]
    phase_name: Option<std::borrow::Cow<'a, str>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    phase_kind: Option<PhaseKind>,
}

impl<'a> From<&'a TraceEvent> for Record<'a> {
    fn from(ev: &'a TraceEvent) -> Self {
        let mut r = Record {
            kind: Kind::Alloc,
            tensor_id: None,
            bytes: None,
            phase_name: None,
            phase_kind: None,
        };
        match ev {
            TraceEvent::Alloc { tensor_id, bytes } => {
                r.tensor_id = Some(tensor_id.into());
                r.bytes = Some(*bytes);
            }
            TraceEvent::Free { tensor_id } => {
                r.kind = Kind::Free;
                r.tensor_id = Some(tensor_id.into());
            }
            TraceEvent::PhaseBegin {
                phase_name,
                phase_kind,
            }
            | TraceEvent::PhaseEnd {
                phase_name,
                phase_kind,
            } => {
                r.kind = if matches!(ev, TraceEvent::PhaseBegin { .. }) {
                    Kind::PhaseBegin
                } else {
                    Kind::PhaseEnd
                };
                r.phase_name = Some(phase_name.into());
                r.phase_kind = Some(*phase_kind);
            }
        }
        r
    }
}

impl Record<'_> {
    fn into_event(self) -> Result<TraceEvent, String> {
        let phase_fields = self.phase_name.is_some() || self.phase_kind.is_some();
        let tensor_fields = self.tensor_id.is_some() || self.bytes.is_some();
        match self.kind {
            Kind::Alloc => {
                if phase_fields {
                    return Err("alloc record carries phase fields".into());
                }
                match (self.tensor_id, self.bytes) {
                    (Some(id), Some(bytes)) if bytes > 0 => Ok(TraceEvent::alloc(id, bytes)),
                    (Some(_), Some(_)) => Err("alloc record has zero bytes".into()),
                    _ => Err("alloc record needs tensor_id and bytes".into()),
                }
            }
            Kind::Free => {
                if phase_fields || self.bytes.is_some() {
                    return Err("free record carries extra fields".into());
                }
                self.tensor_id
                    .map(TraceEvent::free)
                    .ok_or_else(|| "free record needs tensor_id".into())
            }
            Kind::PhaseBegin | Kind::PhaseEnd => {
                if tensor_fields {
                    return Err("phase record carries tensor fields".into());
                }
                let (Some(name), Some(kind)) = (self.phase_name, self.phase_kind) else {
                    return Err("phase record needs phase_name and phase_kind".into());
                };
                Ok(if matches!(self.kind, Kind::PhaseBegin) {
                    TraceEvent::phase_begin(name, kind)
                } else {
                    TraceEvent::phase_end(name, kind)
                })
            }
        }
    }
}

pub fn write_trace<W: Write>(trace: &Trace, mut out: W) -> std::io::Result<()> {
    for ev in trace.events() {
        serde_json::to_writer(&mut out, &Record::from(ev))?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn parse_trace<R: BufRead>(input: R) -> Result<Trace, WorkloadError> {
    let mut events = Vec::new();
    let mut validator = Validator::default();
    let mut last_line = 0;
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        last_line = line_no;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ev = serde_json::from_str::<Record>(&line)
            .map_err(|e| e.to_string())
            .and_then(Record::into_event)
            .map_err(|msg| WorkloadError::Parse { line: line_no, msg })?;
        validator
            .step(&ev)
            .map_err(|msg| WorkloadError::Parse { line: line_no, msg })?;
        events.push(ev);
    }
    validator.finish().map_err(|msg| WorkloadError::Parse {
        line: last_line,
        msg,
    })?;
    Trace::new(events, TraceOrigin::Ingested)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_minimal_trace() {
        let text = "{\"kind\":\"alloc\",\"tensor_id\":\"t1\",\"bytes\":1024}\n{\"kind\":\"free\",\"tensor_id\":\"t1\"}\n";
        let t = parse_trace(text.as_bytes()).unwrap();
        assert_eq!(
            t.events(),
            &[TraceEvent::alloc("t1", 1024), TraceEvent::free("t1")]
        );
    }

    #[test]
    fn free_of_unknown_names_the_line() {
        let text = "{\"kind\":\"alloc\",\"tensor_id\":\"t1\",\"bytes\":1}\n\n{\"kind\":\"free\",\"tensor_id\":\"t2\"}\n";
        match parse_trace(text.as_bytes()) {
            Err(WorkloadError::Parse { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("t2"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unbalanced_phase_end_is_rejected() {
        let text = "{\"kind\":\"phase_end\",\"phase_name\":\"train_actor\",\"phase_kind\":\"training\"}\n";
        assert!(matches!(
            parse_trace(text.as_bytes()),
            Err(WorkloadError::Parse { line: 1, .. })
        ));
        let text = "{\"kind\":\"phase_begin\",\"phase_name\":\"g\",\"phase_kind\":\"inference\"}\n";
        assert!(matches!(
            parse_trace(text.as_bytes()),
            Err(WorkloadError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn malformed_records_are_rejected() {
        for line in [
            "not json",
            "{\"kind\":\"alloc\",\"tensor_id\":\"t\"}",
            "{\"kind\":\"alloc\",\"tensor_id\":\"t\",\"bytes\":0}",
            "{\"kind\":\"alloc\",\"tensor_id\":\"t\",\"bytes\":5,\"extra\":1}",
            "{\"kind\":\"free\",\"tensor_id\":\"t\",\"bytes\":5}",
            "{\"kind\":\"phase_begin\",\"phase_name\":\"g\"}",
            "{\"kind\":\"resize\",\"tensor_id\":\"t\"}",
            "{\"kind\":\"phase_begin\",\"phase_name\":\"g\",\"phase_kind\":\"warmup\"}",
        ] {
            assert!(
                matches!(parse_trace(line.as_bytes()), Err(WorkloadError::Parse { line: 1, .. })),
                "{line}"
            );
        }
    }

    #[test]
    fn writes_only_relevant_keys() {
        let t = Trace::new(
            vec![
                TraceEvent::phase_begin("generation", PhaseKind::Inference),
                TraceEvent::alloc("a", 7),
                TraceEvent::free("a"),
                TraceEvent::phase_end("generation", PhaseKind::Inference),
            ],
            TraceOrigin::Ingested,
        )
        .unwrap();
        let mut out = Vec::new();
        write_trace(&t, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(
            lines,
            [
                r#"{"kind":"phase_begin","phase_name":"generation","phase_kind":"inference"}"#,
                r#"{"kind":"alloc","tensor_id":"a","bytes":7}"#,
                r#"{"kind":"free","tensor_id":"a"}"#,
                r#"{"kind":"phase_end","phase_name":"generation","phase_kind":"inference"}"#,
            ]
        );
    }

    fn arb_trace() -> impl Strategy<Value = Vec<TraceEvent>> {
        prop::collection::vec((0u8..4, 1u64..1 << 24, "[a-z\"\\\\ ]{1,6}"), 0..60).prop_map(
            |steps| {
                let mut live: Vec<String> = Vec::new();
                let mut open = false;
                let mut events = Vec::new();
                for (n, (op, bytes, name)) in steps.into_iter().enumerate() {
                    match op {
                        0 | 1 => {
                            let id = format!("{name}#{n}");
                            live.push(id.clone());
                            events.push(TraceEvent::alloc(id, bytes));
                        }
                        2 if !live.is_empty() => {
                            let id = live.remove(bytes as usize % live.len());
                            events.push(TraceEvent::free(id));
                        }
                        _ => {
                            let kind = if bytes % 2 == 0 {
                                PhaseKind::Inference
                            } else {
                                PhaseKind::Training
                            };
                            events.push(if open {
                                match events.iter().rev().find_map(|e| match e {
                                    TraceEvent::PhaseBegin { phase_name, phase_kind } => {
                                        Some((phase_name.clone(), *phase_kind))
                                    }
                                    _ => None,
                                }) {
                                    Some((n, k)) => TraceEvent::phase_end(n, k),
                                    None => unreachable!(),
                                }
                            } else {
                                TraceEvent::phase_begin(name, kind)
                            });
                            open = !open;
                        }
                    }
                }
                if open {
                    let (n, k) = events
                        .iter()
                        .rev()
                        .find_map(|e| match e {
                            TraceEvent::PhaseBegin { phase_name, phase_kind } => {
                                Some((phase_name.clone(), *phase_kind))
                            }
                            _ => None,
                        })
                        .unwrap();
                    events.push(TraceEvent::phase_end(n, k));
                }
                events
            },
        )
    }

    proptest! {
        #[test]
        fn write_then_parse_is_identity(events in arb_trace()) {
            let t = Trace::new(events, TraceOrigin::Ingested).unwrap();
            let mut out = Vec::new();
            write_trace(&t, &mut out).unwrap();
            let back = parse_trace(out.as_slice()).unwrap();
            prop_assert_eq!(back.events(), t.events());
        }
    }
}
