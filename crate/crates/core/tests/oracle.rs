mod common;

use common::{random_ops, replay, Op, Oracle};
use fragsim::workload::{PhaseKind, TraceOrigin};
use fragsim::{run, Allocator, AllocatorConfig, CachePolicy, Trace, TraceEvent, WorkloadSpec, GIB, MIB};
use proptest::prelude::*;

/// Returns the number of requests both sides refused.
fn drive(ops: &[Op], config: &AllocatorConfig, capacity: u64) -> Result<usize, String> {
    let mut real = Allocator::new(config.clone(), capacity).unwrap();
    let mut oracle = Oracle::new(config, capacity);
    let mut live = Vec::new();
    let mut refused = 0;
    for (i, op) in ops.iter().enumerate() {
        real.set_event_index(i);
        oracle.event = i;
        match *op {
            Op::Alloc(n) => match (real.alloc(n, 0), oracle.alloc(n)) {
                (Ok(a), Some(b)) => live.push((a, b)),
                (Err(_), None) => refused += 1,
                (r, o) => return Err(format!("op {i}: allocator {r:?} vs oracle {o:?}")),
            },
            Op::Free(k) if !live.is_empty() => {
                let (a, b) = live.swap_remove(k % live.len());
                real.free(a).unwrap();
                oracle.free(b);
            }
            Op::Free(_) => {}
            Op::EmptyCache => {
                let (r, o) = (real.empty_cache(), oracle.empty_cache());
                if r != o {
                    return Err(format!("op {i}: released {r} vs {o}"));
                }
            }
        }
        let s = real.stats();
        if (s.reserved, s.allocated) != (oracle.reserved(), oracle.allocated()) {
            return Err(format!(
                "op {i}: allocator ({}, {}) vs oracle ({}, {})",
                s.reserved,
                s.allocated,
                oracle.reserved(),
                oracle.allocated()
            ));
        }
    }
    let log: Vec<_> = real
        .device()
        .reservation_log()
        .iter()
        .map(|r| (r.event_index, r.reserved_before, r.allocated_before))
        .collect();
    let expected: Vec<_> = oracle
        .samples
        .iter()
        .map(|s| (s.event, s.reserved_before, s.allocated_before))
        .collect();
    if log != expected {
        return Err("reservation log differs from oracle samples".into());
    }
    Ok(refused)
}

#[test]
fn two_segments_with_first_fully_cached() {
    let t = Trace::new(
        vec![
            TraceEvent::alloc("a", 3 * MIB),
            TraceEvent::free("a"),
            TraceEvent::alloc("b", 5 * MIB),
            TraceEvent::free("b"),
            TraceEvent::alloc("c", 3 * MIB),
        ],
        TraceOrigin::Ingested,
    )
    .unwrap();
    let cfg = AllocatorConfig::default();
    let report = run(&t, CachePolicy::Never, &cfg, 24 * GIB).unwrap();

    let mut oracle = Oracle::new(&cfg, 24 * GIB);
    let (reserved, _) = replay(&mut oracle, &t, CachePolicy::Never).unwrap();
    let expected = oracle.frag_at_peak(&reserved);
    assert_eq!(expected, 4 * MIB);
    assert_eq!(report.frag_at_peak, expected);
    assert_eq!(report.peak_reserved, 10 * MIB);
    assert_eq!(report.peak_event, Some(2));
}

#[test]
fn tiny_workload_matches_oracle_under_every_policy() {
    let spec = WorkloadSpec { rounds: 2, offload: true, ..WorkloadSpec::tiny() };
    let t = fragsim::generate(&spec).unwrap();
    let cfg = AllocatorConfig::default();
    for policy in CachePolicy::ALL {
        let report = run(&t, policy, &cfg, 24 * GIB).unwrap();
        let mut oracle = Oracle::new(&cfg, 24 * GIB);
        let (reserved, allocated) = replay(&mut oracle, &t, policy).unwrap();
        let series = |s: &[(usize, u64)]| s.iter().map(|p| p.1).collect::<Vec<_>>();
        assert_eq!(series(&report.reserved_series), reserved, "{policy}");
        assert_eq!(series(&report.allocated_series), allocated, "{policy}");
        assert_eq!(report.frag_at_peak, oracle.frag_at_peak(&reserved), "{policy}");
    }
}

#[test]
fn tight_capacity_matches_oracle() {
    let cfg = AllocatorConfig::default();
    let refused: usize = (0..4)
        .map(|seed| drive(&random_ops(seed, 3_000), &cfg, 64 * MIB).unwrap())
        .sum();
    assert!(refused > 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_scripts_match_oracle(
        seed in any::<u64>(),
        split_quanta in 1u64..8,
        capacity_mib in prop_oneof![Just(1u64 << 14), 16u64..256],
    ) {
        let cfg = AllocatorConfig {
            split_remainder_min: split_quanta * 512,
            ..AllocatorConfig::default()
        };
        if let Err(e) = drive(&random_ops(seed, 600), &cfg, capacity_mib * MIB) {
            return Err(TestCaseError::fail(e));
        }
    }
}

#[test]
fn phase_policies_release_like_oracle() {
    let t = Trace::new(
        vec![
            TraceEvent::alloc("w", 6 * MIB),
            TraceEvent::phase_begin("generation", PhaseKind::Inference),
            TraceEvent::alloc("kv", 3 * MIB),
            TraceEvent::alloc("x", 4096),
            TraceEvent::free("kv"),
            TraceEvent::phase_end("generation", PhaseKind::Inference),
            TraceEvent::phase_begin("train_actor", PhaseKind::Training),
            TraceEvent::alloc("act", 8 * MIB),
            TraceEvent::free("act"),
            TraceEvent::free("x"),
            TraceEvent::phase_end("train_actor", PhaseKind::Training),
        ],
        TraceOrigin::Ingested,
    )
    .unwrap();
    let cfg = AllocatorConfig::default();
    for policy in CachePolicy::ALL {
        let report = run(&t, policy, &cfg, GIB).unwrap();
        let mut oracle = Oracle::new(&cfg, GIB);
        let (reserved, _) = replay(&mut oracle, &t, policy).unwrap();
        assert_eq!(report.reserved_series.last().unwrap().1, *reserved.last().unwrap(), "{policy}");
        assert_eq!(report.frag_at_peak, oracle.frag_at_peak(&reserved), "{policy}");
    }
}
