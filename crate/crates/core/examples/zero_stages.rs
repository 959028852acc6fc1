//! Memory and fragmentation across ZeRO stages on four devices.

use fragsim::workload::ZeroStage;
use fragsim::{generate, run, AllocatorConfig, CachePolicy, WorkloadSpec, GIB, MIB};

fn main() {
    let mib = |b: u64| b as f64 / MIB as f64;
    println!("{:<6} {:>10} {:>8} {:>10}", "zero", "reserved", "frag", "allocated");
    for stage in ZeroStage::ALL {
        let spec = WorkloadSpec { world_size: 4, zero_stage: stage, ..WorkloadSpec::default() };
        let r = run(&generate(&spec).unwrap(), CachePolicy::Never, &AllocatorConfig::default(), 24 * GIB).unwrap();
        println!(
            "{:<6} {:>10.1} {:>8.1} {:>10.1}",
            stage.to_string(),
            mib(r.peak_reserved),
            mib(r.frag_at_peak),
            mib(r.peak_allocated)
        );
    }
}
