//! Gradient checkpointing only pays off when training holds the peak.

use fragsim::{generate, run, AllocatorConfig, CachePolicy, WorkloadSpec, GIB, MIB};

fn main() {
    let variants = [
        ("training-peaked", WorkloadSpec::default()),
        (
            "inference-peaked",
            WorkloadSpec { batch: 16, train_micro_batch: Some(2), ..WorkloadSpec::default() },
        ),
    ];
    for (label, base) in variants {
        for ckpt in [false, true] {
            let spec = WorkloadSpec { grad_ckpt: ckpt, ..base.clone() };
            let r = run(
                &generate(&spec).unwrap(),
                CachePolicy::AfterAllPhases,
                &AllocatorConfig::default(),
                24 * GIB,
            )
            .unwrap();
            println!(
                "{label:<17} grad_ckpt={ckpt:<5} reserved {:>7.1} MiB  peak in {}",
                r.peak_reserved as f64 / MIB as f64,
                r.peak_phase().unwrap_or("-")
            );
        }
    }
}
