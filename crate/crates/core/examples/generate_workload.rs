//! The synthetic RLHF workload: phase roster, event counts and the live
//! footprint per phase.

use std::collections::BTreeMap;

use fragsim::workload::PERSISTENT_PREFIX;
use fragsim::{generate, TraceEvent, WorkloadSpec, MIB};

fn main() {
    let spec = WorkloadSpec::default();
    let trace = generate(&spec).unwrap();
    println!("{} events over {} rounds", trace.len(), spec.rounds);

    let persistent: u64 = trace
        .events()
        .iter()
        .filter_map(|e| match e {
            TraceEvent::Alloc { tensor_id, bytes } if tensor_id.starts_with(PERSISTENT_PREFIX) => Some(*bytes),
            _ => None,
        })
        .sum();
    println!("persistent model state: {:.1} MiB", persistent as f64 / MIB as f64);

    // Largest live footprint reached inside each phase.
    let live = trace.live_bytes_series();
    let mut peak: BTreeMap<String, (u64, usize)> = BTreeMap::new();
    for (i, phase) in trace.phase_of_events().into_iter().enumerate() {
        if let Some((name, kind)) = phase {
            let e = peak.entry(format!("{name} ({kind})")).or_insert((0, 0));
            e.0 = e.0.max(live[i]);
            e.1 += 1;
        }
    }
    for (phase, (bytes, events)) in peak {
        println!("{phase:<28} {events:>6} events, live peak {:>8.1} MiB", bytes as f64 / MIB as f64);
    }
}
