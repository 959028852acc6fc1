//! Where a fragmentation sample comes from: a request that no cached
//! block can serve forces a new reservation while cache sits idle.

use fragsim::workload::TraceOrigin;
use fragsim::{export, run, AllocatorConfig, CachePolicy, ExportFormat, Trace, TraceEvent, GIB, MIB};

fn main() {
    let trace = Trace::new(
        vec![
            TraceEvent::alloc("a", 3 * MIB),
            TraceEvent::free("a"),
            // 4 MiB sits cached, but 5 MiB does not fit in it.
            TraceEvent::alloc("b", 5 * MIB),
            TraceEvent::free("b"),
            TraceEvent::alloc("c", 3 * MIB),
        ],
        TraceOrigin::Ingested,
    )
    .unwrap();

    let report = run(&trace, CachePolicy::Never, &AllocatorConfig::default(), 24 * GIB).unwrap();
    println!("samples (event, bytes): {:?}", report.frag_series);
    println!(
        "peak reserved {} B at event {:?}, frag at peak {} B",
        report.peak_reserved, report.peak_event, report.frag_at_peak
    );
    print!("{}", String::from_utf8(export(&report, ExportFormat::Timeline)).unwrap());
}
