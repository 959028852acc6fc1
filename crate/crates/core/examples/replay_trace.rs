//! Round trip through the trace format, then replay with a timeline export.
//!
//! `cargo run --example replay_trace -- [trace.jsonl] [out-dir]`; without a
//! trace argument a small generated workload is used.

use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use fragsim::{
    export, generate, parse_trace, run, write_trace, AllocatorConfig, CachePolicy, ExportFormat, WorkloadSpec, GIB,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let trace = match args.next() {
        Some(path) => parse_trace(BufReader::new(File::open(path)?))?,
        None => {
            let generated = generate(&WorkloadSpec::tiny())?;
            let mut text = Vec::new();
            write_trace(&generated, &mut text)?;
            let parsed = parse_trace(text.as_slice())?;
            assert_eq!(parsed.events(), generated.events());
            parsed
        }
    };
    let out = args.next().map(PathBuf::from).unwrap_or_else(std::env::temp_dir);

    let report = run(&trace, CachePolicy::AfterInference, &AllocatorConfig::default(), 24 * GIB)?;
    std::fs::create_dir_all(&out)?;
    let path = out.join("replay_timeline.csv");
    std::fs::write(&path, export(&report, ExportFormat::Timeline))?;
    print!("{}", String::from_utf8(export(&report, ExportFormat::Summary))?);
    println!("timeline: {} rows -> {}", report.reserved_series.len(), path.display());
    Ok(())
}
