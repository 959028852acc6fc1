use std::collections::HashSet;

use super::{PhaseKind, Trace, TraceEvent, WorkloadError};

/// Keeps training phases and everything outside phases; drops inference
/// phases together with every tensor allocated inside them (and the later
/// frees of those tensors).
pub fn slice_training_only(trace: &Trace) -> Result<Trace, WorkloadError> {
    let mut dropped: HashSet<&str> = HashSet::new();
    let mut in_inference = false;
    let mut saw_training = false;
    let mut out = Vec::with_capacity(trace.len());
    for ev in trace.events() {
        match ev {
            TraceEvent::PhaseBegin { phase_kind, .. } => {
                in_inference = *phase_kind == PhaseKind::Inference;
                if !in_inference {
                    saw_training = true;
                    out.push(ev.clone());
                }
            }
            TraceEvent::PhaseEnd { phase_kind, .. } => {
                if *phase_kind == PhaseKind::Training {
                    out.push(ev.clone());
                }
                in_inference = false;
            }
            TraceEvent::Alloc { tensor_id, .. } => {
                if in_inference {
                    dropped.insert(tensor_id);
                } else {
                    dropped.remove(tensor_id.as_str());
                    out.push(ev.clone());
                }
            }
            TraceEvent::Free { tensor_id } => {
                if !dropped.remove(tensor_id.as_str()) {
                    out.push(ev.clone());
                }
            }
        }
    }
    if !saw_training {
        return Err(WorkloadError::EmptyResult);
    }
    Trace::new(out, trace.origin().clone())
}
