//! Every cache-release policy on the default workload.

use fragsim::{generate, run, AllocatorConfig, CachePolicy, WorkloadSpec, GIB, MIB};

fn main() {
    let trace = generate(&WorkloadSpec::default()).unwrap();
    let mib = |b: u64| b as f64 / MIB as f64;
    println!("{:<18} {:>10} {:>8} {:>10} {:>6}  peak phase", "policy", "reserved", "frag", "allocated", "calls");
    for policy in CachePolicy::ALL {
        let r = run(&trace, policy, &AllocatorConfig::default(), 24 * GIB).unwrap();
        println!(
            "{:<18} {:>10.1} {:>8.1} {:>10.1} {:>6}  {}",
            policy.as_str(),
            mib(r.peak_reserved),
            mib(r.frag_at_peak),
            mib(r.peak_allocated),
            r.empty_cache_invocations,
            r.peak_phase().unwrap_or("-")
        );
    }
}
