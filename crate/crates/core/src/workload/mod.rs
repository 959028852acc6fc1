//! Allocation traces: the simulator's only input language.
//!
//! A [`Trace`] is an ordered list of [`TraceEvent`]s. Traces either come
//! from the synthetic RLHF generator ([`generate`]) or are ingested from
//! the line-delimited record format ([`parse_trace`]). Both routes go
//! through the same well-formedness check, so a `Trace` value is always
//! replayable.

mod format;
mod generate;
mod slice;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Bytes;

pub use format::{parse_trace, write_trace};
pub use generate::{generate, ModelRole, ZeroStage, WorkloadSpec, PERSISTENT_PREFIX};
pub use slice::slice_training_only;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseKind {
    Inference,
    Training,
}

impl fmt::Display for PhaseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PhaseKind::Inference => "inference",
            PhaseKind::Training => "training",
        })
    }
}

impl FromStr for PhaseKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "inference" => Ok(PhaseKind::Inference),
            "training" => Ok(PhaseKind::Training),
            other => Err(format!("unknown phase kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TraceEvent {
    Alloc { tensor_id: String, bytes: Bytes },
    Free { tensor_id: String },
    PhaseBegin { phase_name: String, phase_kind: PhaseKind },
    PhaseEnd { phase_name: String, phase_kind: PhaseKind },
}

impl TraceEvent {
    pub fn alloc(tensor_id: impl Into<String>, bytes: Bytes) -> Self {
        TraceEvent::Alloc {
            tensor_id: tensor_id.into(),
            bytes,
        }
    }

    pub fn free(tensor_id: impl Into<String>) -> Self {
        TraceEvent::Free {
            tensor_id: tensor_id.into(),
        }
    }

    pub fn phase_begin(phase_name: impl Into<String>, phase_kind: PhaseKind) -> Self {
        TraceEvent::PhaseBegin {
            phase_name: phase_name.into(),
            phase_kind,
        }
    }

    pub fn phase_end(phase_name: impl Into<String>, phase_kind: PhaseKind) -> Self {
        TraceEvent::PhaseEnd {
            phase_name: phase_name.into(),
            phase_kind,
        }
    }
}

/// Where a trace came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceOrigin {
    Generated(Box<WorkloadSpec>),
    Ingested,
}

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("event {index}: {msg}")]
    Invalid { index: usize, msg: String },
    #[error("invalid workload spec: {0}")]
    InvalidSpec(String),
    #[error("trace contains no training phases")]
    EmptyResult,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    events: Vec<TraceEvent>,
    origin: TraceOrigin,
}

impl Trace {
    pub fn new(events: Vec<TraceEvent>, origin: TraceOrigin) -> Result<Self, WorkloadError> {
        let mut v = Validator::default();
        for (index, ev) in events.iter().enumerate() {
            v.step(ev)
                .map_err(|msg| WorkloadError::Invalid { index, msg })?;
        }
        v.finish().map_err(|msg| WorkloadError::Invalid {
            index: events.len(),
            msg,
        })?;
        Ok(Self { events, origin })
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn origin(&self) -> &TraceOrigin {
        &self.origin
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Tensors still live after the last event, in allocation order.
    pub fn live_at_end(&self) -> Vec<&str> {
        let mut live: Vec<&str> = Vec::new();
        let mut pos: HashMap<&str, usize> = HashMap::new();
        for ev in &self.events {
            match ev {
                TraceEvent::Alloc { tensor_id, .. } => {
                    pos.insert(tensor_id, live.len());
                    live.push(tensor_id);
                }
                TraceEvent::Free { tensor_id } => {
                    if let Some(i) = pos.remove(tensor_id.as_str()) {
                        live[i] = "";
                    }
                }
                _ => {}
            }
        }
        live.retain(|s| !s.is_empty());
        live
    }

    /// Sum of live tensor bytes after each event, as the trace itself sees it
    /// (no allocator rounding or caching).
    pub fn live_bytes_series(&self) -> Vec<Bytes> {
        let mut sizes: HashMap<&str, Bytes> = HashMap::new();
        let mut live = 0;
        self.events
            .iter()
            .map(|ev| {
                match ev {
                    TraceEvent::Alloc { tensor_id, bytes } => {
                        sizes.insert(tensor_id, *bytes);
                        live += bytes;
                    }
                    TraceEvent::Free { tensor_id } => {
                        live -= sizes.remove(tensor_id.as_str()).unwrap_or(0);
                    }
                    _ => {}
                }
                live
            })
            .collect()
    }

    /// Phase names in order of appearance, one entry per phase instance.
    pub fn phases(&self) -> Vec<(&str, PhaseKind)> {
        self.events
            .iter()
            .filter_map(|ev| match ev {
                TraceEvent::PhaseBegin {
                    phase_name,
                    phase_kind,
                } => Some((phase_name.as_str(), *phase_kind)),
                _ => None,
            })
            .collect()
    }

    /// Phase enclosing each event (boundary events included), `None` outside phases.
    pub fn phase_of_events(&self) -> Vec<Option<(&str, PhaseKind)>> {
        let mut current = None;
        self.events
            .iter()
            .map(|ev| match ev {
                TraceEvent::PhaseBegin {
                    phase_name,
                    phase_kind,
                } => {
                    current = Some((phase_name.as_str(), *phase_kind));
                    current
                }
                TraceEvent::PhaseEnd { .. } => current.take(),
                _ => current,
            })
            .collect()
    }
}

/// Incremental well-formedness check shared by the parser and [`Trace::new`].
#[derive(Debug, Default)]
pub(crate) struct Validator {
    live: HashSet<String>,
    open: Option<(String, PhaseKind)>,
}

impl Validator {
    pub(crate) fn step(&mut self, ev: &TraceEvent) -> Result<(), String> {
        match ev {
            TraceEvent::Alloc { tensor_id, bytes } => {
                if *bytes == 0 {
                    return Err(format!("alloc of {tensor_id:?} has zero bytes"));
                }
                if !self.live.insert(tensor_id.clone()) {
                    return Err(format!("alloc of already-live tensor {tensor_id:?}"));
                }
            }
            TraceEvent::Free { tensor_id } => {
                if !self.live.remove(tensor_id) {
                    return Err(format!("free of unknown tensor {tensor_id:?}"));
                }
            }
            TraceEvent::PhaseBegin {
                phase_name,
                phase_kind,
            } => {
                if let Some((open, _)) = &self.open {
                    return Err(format!(
                        "phase_begin {phase_name:?} while phase {open:?} is open"
                    ));
                }
                self.open = Some((phase_name.clone(), *phase_kind));
            }
            TraceEvent::PhaseEnd {
                phase_name,
                phase_kind,
            } => match self.open.take() {
                None => return Err(format!("phase_end {phase_name:?} without phase_begin")),
                Some((open, kind)) if open != *phase_name || kind != *phase_kind => {
                    return Err(format!(
                        "phase_end {phase_name:?}/{phase_kind} does not match open phase {open:?}/{kind}"
                    ))
                }
                Some(_) => {}
            },
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<(), String> {
        match &self.open {
            Some((name, _)) => Err(format!("phase {name:?} is never closed")),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validator_rejects_bad_sequences() {
        let bad = [
            vec![TraceEvent::free("x")],
            vec![TraceEvent::alloc("x", 1), TraceEvent::alloc("x", 1)],
            vec![TraceEvent::phase_end("p", PhaseKind::Training)],
            vec![
                TraceEvent::phase_begin("p", PhaseKind::Training),
                TraceEvent::phase_begin("q", PhaseKind::Training),
            ],
            vec![
                TraceEvent::phase_begin("p", PhaseKind::Training),
                TraceEvent::phase_end("q", PhaseKind::Training),
            ],
            vec![TraceEvent::phase_begin("p", PhaseKind::Inference)],
            vec![TraceEvent::alloc("x", 0)],
        ];
        for events in bad {
            assert!(Trace::new(events.clone(), TraceOrigin::Ingested).is_err(), "{events:?}");
        }
    }

    #[test]
    fn tensor_ids_may_be_reused_after_free() {
        let t = Trace::new(
            vec![
                TraceEvent::alloc("x", 4),
                TraceEvent::free("x"),
                TraceEvent::alloc("x", 8),
            ],
            TraceOrigin::Ingested,
        )
        .unwrap();
        assert_eq!(t.live_at_end(), vec!["x"]);
        assert_eq!(t.live_bytes_series(), vec![4, 0, 8]);
    }

    #[test]
    fn phase_of_events_covers_boundaries() {
        let t = Trace::new(
            vec![
                TraceEvent::alloc("w", 1),
                TraceEvent::phase_begin("generation", PhaseKind::Inference),
                TraceEvent::alloc("a", 1),
                TraceEvent::phase_end("generation", PhaseKind::Inference),
                TraceEvent::free("a"),
            ],
            TraceOrigin::Ingested,
        )
        .unwrap();
        let g = Some(("generation", PhaseKind::Inference));
        assert_eq!(t.phase_of_events(), vec![None, g, g, g, None]);
    }
}
