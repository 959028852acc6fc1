//! Phase-boundary cache release.
//!
//! [`run`] replays a trace through a fresh allocator and device. At every
//! `phase_end` whose kind the [`CachePolicy`] selects, the allocator's
//! cache is emptied before the boundary is recorded.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::allocator::{AllocError, Allocator, AllocatorConfig, BlockId};
use crate::profiler::{Boundary, FragReport, Profiler};
use crate::workload::{PhaseKind, Trace, TraceEvent};
use crate::Bytes;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CachePolicy {
    Never,
    AfterAllPhases,
    AfterInference,
    AfterTraining,
}

impl CachePolicy {
    pub const ALL: [CachePolicy; 4] = [
        CachePolicy::Never,
        CachePolicy::AfterAllPhases,
        CachePolicy::AfterInference,
        CachePolicy::AfterTraining,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CachePolicy::Never => "never",
            CachePolicy::AfterAllPhases => "after_all_phases",
            CachePolicy::AfterInference => "after_inference",
            CachePolicy::AfterTraining => "after_training",
        }
    }

    pub fn triggers(self, kind: PhaseKind) -> bool {
        match self {
            CachePolicy::Never => false,
            CachePolicy::AfterAllPhases => true,
            CachePolicy::AfterInference => kind == PhaseKind::Inference,
            CachePolicy::AfterTraining => kind == PhaseKind::Training,
        }
    }
}

impl fmt::Display for CachePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CachePolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CachePolicy::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| {
                format!(
                    "unknown cache policy {s:?} (expected never, after_all_phases, after_inference or after_training)"
                )
            })
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(AllocError),
    #[error("out of memory at event {event_index}: {source}")]
    OutOfMemory {
        event_index: usize,
        source: AllocError,
        /// Report covering every event up to and including the failing one.
        report: Box<FragReport>,
    },
}

impl RunError {
    pub fn partial_report(&self) -> Option<&FragReport> {
        match self {
            RunError::OutOfMemory { report, .. } => Some(report),
            RunError::Config(_) => None,
        }
    }
}

pub fn run(
    trace: &Trace,
    policy: CachePolicy,
    config: &AllocatorConfig,
    capacity: Bytes,
) -> Result<FragReport, RunError> {
    let mut alloc = Allocator::new(config.clone(), capacity).map_err(RunError::Config)?;
    let mut profiler = Profiler::new();
    let mut live: HashMap<&str, BlockId> = HashMap::new();
    let mut seen_reservations = 0;

    for (index, event) in trace.events().iter().enumerate() {
        alloc.set_event_index(index);
        let outcome = match event {
            TraceEvent::Alloc { tensor_id, bytes } => alloc.alloc(*bytes, 0).map(|id| {
                live.insert(tensor_id, id);
            }),
            TraceEvent::Free { tensor_id } => {
                let id = live
                    .remove(tensor_id.as_str())
                    .expect("validated trace frees only live tensors");
                alloc.free(id)
            }
            TraceEvent::PhaseBegin { phase_name, .. } => {
                profiler.annotate_phase(index, phase_name, Boundary::Begin);
                Ok(())
            }
            TraceEvent::PhaseEnd {
                phase_name,
                phase_kind,
            } => {
                if policy.triggers(*phase_kind) {
                    let released = alloc.empty_cache();
                    profiler.record_empty_cache(released);
                }
                profiler.annotate_phase(index, phase_name, Boundary::End);
                Ok(())
            }
        };

        let log = alloc.device().reservation_log();
        for r in &log[seen_reservations..] {
            profiler.sample_fragmentation(r.event_index, r.reserved_before, r.allocated_before);
        }
        seen_reservations = log.len();
        profiler.record(index, &alloc.stats());

        if let Err(source) = outcome {
            return Err(RunError::OutOfMemory {
                event_index: index,
                source,
                report: Box::new(profiler.finalize()),
            });
        }
    }
    Ok(profiler.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{generate, TraceOrigin, WorkloadSpec};

    const MIB: Bytes = 1 << 20;
    const GIB: Bytes = 1 << 30;

    fn run_default(trace: &Trace, policy: CachePolicy) -> FragReport {
        run(trace, policy, &AllocatorConfig::default(), 24 * GIB).unwrap()
    }

    #[test]
    fn policy_names_round_trip() {
        for p in CachePolicy::ALL {
            assert_eq!(p.as_str().parse::<CachePolicy>(), Ok(p));
        }
        assert!("sometimes".parse::<CachePolicy>().is_err());
    }

    #[test]
    fn never_policy_never_invokes() {
        let t = generate(&WorkloadSpec::tiny()).unwrap();
        let r = run_default(&t, CachePolicy::Never);
        assert_eq!(r.empty_cache_invocations, 0);
        assert_eq!(r.bytes_released_total, 0);
    }

    #[test]
    fn after_inference_counts_generation() {
        let t = Trace::new(
            vec![
                TraceEvent::phase_begin("generation", PhaseKind::Inference),
                TraceEvent::alloc("kv", 4096),
                TraceEvent::free("kv"),
                TraceEvent::phase_end("generation", PhaseKind::Inference),
                TraceEvent::phase_begin("train_actor", PhaseKind::Training),
                TraceEvent::alloc("act", 4096),
                TraceEvent::free("act"),
                TraceEvent::phase_end("train_actor", PhaseKind::Training),
            ],
            TraceOrigin::Ingested,
        )
        .unwrap();
        let r = run_default(&t, CachePolicy::AfterInference);
        assert_eq!(r.empty_cache_invocations, 1);
        assert_eq!(r.bytes_released_total, 2 * MIB);
        // released before the boundary is recorded
        assert_eq!(r.reserved_series[3], (3, 0));
    }

    #[test]
    fn after_all_phases_counts_every_phase() {
        let t = generate(&WorkloadSpec::tiny()).unwrap();
        assert_eq!(t.phases().len(), 7);
        assert_eq!(run_default(&t, CachePolicy::AfterAllPhases).empty_cache_invocations, 7);
        assert_eq!(run_default(&t, CachePolicy::AfterInference).empty_cache_invocations, 5);
        assert_eq!(run_default(&t, CachePolicy::AfterTraining).empty_cache_invocations, 2);
    }

    #[test]
    fn final_allocated_is_policy_independent() {
        let t = generate(&WorkloadSpec { rounds: 2, offload: true, ..WorkloadSpec::tiny() }).unwrap();
        let finals: Vec<_> = CachePolicy::ALL
            .iter()
            .map(|p| run_default(&t, *p).allocated_series.last().copied())
            .collect();
        assert!(finals.windows(2).all(|w| w[0] == w[1]), "{finals:?}");
    }

    #[test]
    fn runs_share_no_state() {
        let t = generate(&WorkloadSpec::tiny()).unwrap();
        let forward: Vec<_> = CachePolicy::ALL.iter().map(|p| run_default(&t, *p)).collect();
        let backward: Vec<_> = CachePolicy::ALL.iter().rev().map(|p| run_default(&t, *p)).collect();
        for (a, b) in forward.iter().zip(backward.iter().rev()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn oom_returns_partial_report() {
        let t = Trace::new(
            vec![
                TraceEvent::alloc("a", 2 * MIB),
                TraceEvent::phase_begin("train_actor", PhaseKind::Training),
                TraceEvent::alloc("b", 2 * MIB),
                TraceEvent::phase_end("train_actor", PhaseKind::Training),
            ],
            TraceOrigin::Ingested,
        )
        .unwrap();
        let err = run(&t, CachePolicy::AfterAllPhases, &AllocatorConfig::default(), 2 * MIB).unwrap_err();
        match &err {
            RunError::OutOfMemory { event_index, report, .. } => {
                assert_eq!(*event_index, 2);
                assert_eq!(report.reserved_series.len(), 3);
                assert_eq!(report.peak_reserved, 2 * MIB);
                assert_eq!(report.empty_cache_invocations, 0);
            }
            other => panic!("{other:?}"),
        }
        assert!(err.partial_report().is_some());
    }

    #[test]
    fn frag_samples_match_reservation_log() {
        let t = generate(&WorkloadSpec::tiny()).unwrap();
        let r = run_default(&t, CachePolicy::AfterInference);
        // Replay by hand to obtain the device log.
        let mut a = Allocator::new(AllocatorConfig::default(), 24 * GIB).unwrap();
        let mut live = HashMap::new();
        for (i, ev) in t.events().iter().enumerate() {
            a.set_event_index(i);
            match ev {
                TraceEvent::Alloc { tensor_id, bytes } => {
                    live.insert(tensor_id.clone(), a.alloc(*bytes, 0).unwrap());
                }
                TraceEvent::Free { tensor_id } => a.free(live.remove(tensor_id).unwrap()).unwrap(),
                TraceEvent::PhaseEnd { phase_kind, .. } => {
                    if CachePolicy::AfterInference.triggers(*phase_kind) {
                        a.empty_cache();
                    }
                }
                TraceEvent::PhaseBegin { .. } => {}
            }
        }
        let from_log: Vec<_> = a
            .device()
            .reservation_log()
            .iter()
            .map(|r| (r.event_index, r.fragmentation()))
            .collect();
        assert_eq!(r.frag_series, from_log);
        assert!(r
            .reserved_series
            .iter()
            .zip(&r.allocated_series)
            .all(|(res, al)| al.1 <= res.1));
    }
}
