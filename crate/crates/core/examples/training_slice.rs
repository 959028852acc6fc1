//! Fragmentation carried into training by the preceding inferences:
//! the full pipeline against its training-only slice.

use fragsim::{generate, run, slice_training_only, AllocatorConfig, CachePolicy, WorkloadSpec, GIB, MIB};

fn main() {
    let full = generate(&WorkloadSpec::default()).unwrap();
    let slice = slice_training_only(&full).unwrap();
    for (label, trace) in [("full pipeline", &full), ("training only", &slice)] {
        let r = run(trace, CachePolicy::Never, &AllocatorConfig::default(), 24 * GIB).unwrap();
        println!(
            "{label:<14} {:>6} events  reserved {:>7.1} MiB  frag at peak {:>5.1} MiB  peak in {}",
            trace.len(),
            r.peak_reserved as f64 / MIB as f64,
            r.frag_at_peak as f64 / MIB as f64,
            r.peak_phase().unwrap_or("-")
        );
    }
}
