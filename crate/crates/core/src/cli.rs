//! Experiment runner behind the `fragsim` binary.
//!
//! Configuration is a flat `key = value` file; `#` starts a comment.
//!
//! ```text
//! workload.preset = default      # or tiny; any workload.<field> overrides it
//! workload.zero_stage = 3
//! workload.world_size = 4
//! # workload.trace = run.jsonl   # replay a trace file instead
//! device.capacity_bytes = 24GiB
//! allocator.split_remainder_min = 512
//! strategy.cache_policy = after_inference   # or sweep
//! sweep.zero_stage = none,1,2,3
//! output = out
//! format = both                  # summary, timeline or both
//! ```
//!
//! Exit codes: 0 success, 1 configuration/input/I-O error, 2 out of memory.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::allocator::AllocatorConfig;
use crate::profiler::{export, ExportFormat, FragReport, Summary};
use crate::strategy::{run, CachePolicy, RunError};
use crate::workload::{generate, parse_trace, write_trace, Trace, WorkloadError, WorkloadSpec, ZeroStage};
use crate::{Bytes, GIB, KIB, MIB};

pub const SUMMARY_FILE: &str = "summary.json";
pub const TIMELINE_FILE: &str = "timeline.csv";
pub const COMPARE_FILE: &str = "compare.csv";
pub const TRACE_FILE: &str = "trace.jsonl";

pub const DEFAULT_CAPACITY: Bytes = 24 * GIB;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    OutOfMemory(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::OutOfMemory(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_owned(), source }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WorkloadSource {
    Spec(WorkloadSpec),
    TraceFile(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyChoice {
    One(CachePolicy),
    Sweep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Summary,
    Timeline,
    Both,
}

impl OutputFormat {
    fn includes(self, f: ExportFormat) -> bool {
        matches!(
            (self, f),
            (OutputFormat::Both, _)
                | (OutputFormat::Summary, ExportFormat::Summary)
                | (OutputFormat::Timeline, ExportFormat::Timeline)
        )
    }
}

/// Strategy knobs crossed with the four policies by `compare`. Empty axes
/// keep the workload's own value.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Grid {
    pub zero_stage: Vec<ZeroStage>,
    pub grad_ckpt: Vec<bool>,
    pub offload: Vec<bool>,
}

impl Grid {
    pub fn is_empty(&self) -> bool {
        self.zero_stage.is_empty() && self.grad_ckpt.is_empty() && self.offload.is_empty()
    }

    /// Every combination, zero_stage slowest.
    pub fn expand(&self, base: &WorkloadSpec) -> Vec<WorkloadSpec> {
        fn axis<T: Copy>(values: &[T], own: T) -> Vec<T> {
            if values.is_empty() {
                vec![own]
            } else {
                values.to_vec()
            }
        }
        let mut out = Vec::new();
        for z in axis(&self.zero_stage, base.zero_stage) {
            for c in axis(&self.grad_ckpt, base.grad_ckpt) {
                for o in axis(&self.offload, base.offload) {
                    out.push(WorkloadSpec {
                        zero_stage: z,
                        grad_ckpt: c,
                        offload: o,
                        ..base.clone()
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExperimentConfig {
    pub workload: Option<WorkloadSource>,
    pub capacity: Bytes,
    pub allocator: AllocatorConfig,
    pub policy: PolicyChoice,
    pub output: PathBuf,
    pub format: OutputFormat,
    pub grid: Grid,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            workload: None,
            capacity: DEFAULT_CAPACITY,
            allocator: AllocatorConfig::default(),
            policy: PolicyChoice::One(CachePolicy::Never),
            output: PathBuf::from("out"),
            format: OutputFormat::Both,
            grid: Grid::default(),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub policy: Option<String>,
    pub capacity: Option<Bytes>,
}

/// Integer with optional `_` separators and an optional `KiB`/`MiB`/`GiB` suffix.
pub fn parse_bytes(s: &str) -> Result<Bytes, String> {
    let s = s.trim();
    let (digits, unit) = [("GiB", GIB), ("MiB", MIB), ("KiB", KIB), ("B", 1)]
        .into_iter()
        .find_map(|(suffix, unit)| s.strip_suffix(suffix).map(|d| (d.trim_end(), unit)))
        .unwrap_or((s, 1));
    let n: u64 = digits
        .replace('_', "")
        .parse()
        .map_err(|_| format!("not a byte count: {s:?}"))?;
    n.checked_mul(unit).ok_or_else(|| format!("byte count overflows: {s:?}"))
}

fn parse_u64(s: &str) -> Result<u64, String> {
    s.replace('_', "").parse().map_err(|_| format!("not an integer: {s:?}"))
}

fn parse_u32(s: &str) -> Result<u32, String> {
    s.replace('_', "").parse().map_err(|_| format!("not an integer: {s:?}"))
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got {s:?}")),
    }
}

fn parse_list<T>(s: &str, item: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>, String> {
    s.split(',').map(|v| item(v.trim())).collect()
}

fn set_workload_field(spec: &mut WorkloadSpec, field: &str, v: &str) -> Result<(), String> {
    match field {
        "rounds" => spec.rounds = parse_u32(v)?,
        "actor_params" => spec.actor_params = parse_u64(v)?,
        "critic_params" => spec.critic_params = parse_u64(v)?,
        "hidden_size" => spec.hidden_size = parse_u64(v)?,
        "layers" => spec.layers = parse_u32(v)?,
        "batch" => spec.batch = parse_u64(v)?,
        "train_micro_batch" => spec.train_micro_batch = Some(parse_u64(v)?),
        "seq_len" => spec.seq_len = parse_u64(v)?,
        "gen_tokens" => spec.gen_tokens = parse_u64(v)?,
        "world_size" => spec.world_size = parse_u64(v)?,
        "zero_stage" => spec.zero_stage = v.parse()?,
        "grad_ckpt" => spec.grad_ckpt = parse_bool(v)?,
        "ckpt_interval" => spec.ckpt_interval = Some(parse_u32(v)?),
        "offload" => spec.offload = parse_bool(v)?,
        "bytes_per_element" => spec.bytes_per_element = parse_u64(v)?,
        "seed" => spec.seed = parse_u64(v)?,
        _ => return Err(format!("unknown key workload.{field}")),
    }
    Ok(())
}

fn set_allocator_field(cfg: &mut AllocatorConfig, field: &str, v: &str) -> Result<(), String> {
    let slot = match field {
        "rounding_quantum" => &mut cfg.rounding_quantum,
        "small_request_max" => &mut cfg.small_request_max,
        "small_segment_size" => &mut cfg.small_segment_size,
        "segment_granularity" => &mut cfg.segment_granularity,
        "split_remainder_min" => &mut cfg.split_remainder_min,
        _ => return Err(format!("unknown key allocator.{field}")),
    };
    *slot = parse_bytes(v)?;
    Ok(())
}

fn parse_policy(v: &str) -> Result<PolicyChoice, String> {
    if v == "sweep" {
        Ok(PolicyChoice::Sweep)
    } else {
        v.parse().map(PolicyChoice::One)
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = ExperimentConfig::default();
        let mut preset: Option<WorkloadSpec> = None;
        let mut fields: Vec<(String, String, usize)> = Vec::new();
        let mut trace: Option<PathBuf> = None;
        let mut seen = std::collections::HashSet::new();

        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| CliError::Config(format!("line {line_no}: {msg}"));
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            if !seen.insert(key.to_owned()) {
                return Err(err(format!("duplicate key {key}")));
            }
            match key {
                "workload.preset" => {
                    preset = Some(match value {
                        "default" => WorkloadSpec::default(),
                        "tiny" => WorkloadSpec::tiny(),
                        _ => return Err(err(format!("unknown preset {value:?} (expected default or tiny)"))),
                    })
                }
                "workload.trace" => trace = Some(PathBuf::from(value)),
                "device.capacity_bytes" => cfg.capacity = parse_bytes(value).map_err(err)?,
                "strategy.cache_policy" => cfg.policy = parse_policy(value).map_err(err)?,
                "output" => cfg.output = PathBuf::from(value),
                "format" => {
                    cfg.format = match value {
                        "summary" => OutputFormat::Summary,
                        "timeline" => OutputFormat::Timeline,
                        "both" => OutputFormat::Both,
                        _ => return Err(err(format!("unknown format {value:?}"))),
                    }
                }
                "sweep.zero_stage" => {
                    cfg.grid.zero_stage = parse_list(value, |v| v.parse()).map_err(err)?
                }
                "sweep.grad_ckpt" => cfg.grid.grad_ckpt = parse_list(value, parse_bool).map_err(err)?,
                "sweep.offload" => cfg.grid.offload = parse_list(value, parse_bool).map_err(err)?,
                _ => {
                    if let Some(field) = key.strip_prefix("workload.") {
                        fields.push((field.to_owned(), value.to_owned(), line_no));
                    } else if let Some(field) = key.strip_prefix("allocator.") {
                        set_allocator_field(&mut cfg.allocator, field, value).map_err(err)?;
                    } else {
                        return Err(err(format!("unknown key {key}")));
                    }
                }
            }
        }

        let has_spec = preset.is_some() || !fields.is_empty();
        cfg.workload = match (has_spec, trace) {
            (true, Some(_)) => {
                return Err(CliError::Config(
                    "workload.trace cannot be combined with a workload spec".into(),
                ))
            }
            (false, Some(path)) => Some(WorkloadSource::TraceFile(path)),
            (true, None) => {
                let mut spec = preset.unwrap_or_default();
                for (field, value, line_no) in &fields {
                    set_workload_field(&mut spec, field, value)
                        .map_err(|m| CliError::Config(format!("line {line_no}: {m}")))?;
                }
                Some(WorkloadSource::Spec(spec))
            }
            (false, None) => None,
        };
        cfg.allocator
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), CliError> {
        if let Some(seed) = o.seed {
            if let Some(WorkloadSource::Spec(spec)) = &mut self.workload {
                spec.seed = seed;
            }
        }
        if let Some(out) = &o.out {
            self.output = out.clone();
        }
        if let Some(p) = &o.policy {
            self.policy = parse_policy(p).map_err(CliError::Config)?;
        }
        if let Some(c) = o.capacity {
            self.capacity = c;
        }
        Ok(())
    }

    fn spec(&self) -> Result<&WorkloadSpec, CliError> {
        match &self.workload {
            Some(WorkloadSource::Spec(s)) => Ok(s),
            Some(WorkloadSource::TraceFile(_)) => Err(CliError::Config(
                "this command needs a workload spec, not workload.trace".into(),
            )),
            None => Err(missing_workload()),
        }
    }
}

fn missing_workload() -> CliError {
    CliError::Config("no workload: set workload.preset (or other workload.* keys) or workload.trace".into())
}

pub fn read_trace(path: &Path) -> Result<Trace, CliError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let trace = parse_trace(BufReader::new(file)).map_err(|e| match e {
        WorkloadError::Io(source) => CliError::Io { path: path.to_owned(), source },
        other => CliError::Config(format!("{}: {other}", path.display())),
    })?;
    if trace.is_empty() {
        return Err(CliError::Config(format!("{}: trace is empty", path.display())));
    }
    Ok(trace)
}

fn load_trace(cfg: &ExperimentConfig) -> Result<Trace, CliError> {
    match &cfg.workload {
        Some(WorkloadSource::Spec(spec)) => Ok(generate(spec)?),
        Some(WorkloadSource::TraceFile(path)) => read_trace(path),
        None => Err(missing_workload()),
    }
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(io_err(&path))
}

fn write_report(cfg: &ExperimentConfig, report: &FragReport) -> Result<(), CliError> {
    for (format, name) in [
        (ExportFormat::Summary, SUMMARY_FILE),
        (ExportFormat::Timeline, TIMELINE_FILE),
    ] {
        if cfg.format.includes(format) {
            write_file(&cfg.output, name, &export(report, format))?;
        }
    }
    Ok(())
}

fn simulate(cfg: &ExperimentConfig, trace: &Trace, out: &mut dyn Write) -> Result<(), CliError> {
    let PolicyChoice::One(policy) = cfg.policy else {
        return Err(CliError::Config("cache_policy = sweep is only valid for compare".into()));
    };
    match run(trace, policy, &cfg.allocator, cfg.capacity) {
        Ok(report) => {
            write_report(cfg, &report)?;
            out.write_all(&export(&report, ExportFormat::Summary))
                .map_err(io_err(Path::new("<stdout>")))
        }
        Err(RunError::Config(e)) => Err(CliError::Config(e.to_string())),
        Err(e @ RunError::OutOfMemory { .. }) => {
            if let Some(partial) = e.partial_report() {
                write_report(cfg, partial)?;
            }
            Err(CliError::OutOfMemory(e.to_string()))
        }
    }
}

/// Simulates the configured workload under one policy.
pub fn cmd_run(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let trace = load_trace(cfg)?;
    simulate(cfg, &trace, out)
}

/// Like [`cmd_run`], on a trace file.
pub fn cmd_replay(cfg: &ExperimentConfig, path: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let trace = read_trace(path)?;
    simulate(cfg, &trace, out)
}

/// Writes the generated trace to `<output>/trace.jsonl` and returns its path.
pub fn cmd_gen_trace(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let trace = generate(cfg.spec()?)?;
    let mut buf = Vec::new();
    write_trace(&trace, &mut buf).map_err(io_err(Path::new(TRACE_FILE)))?;
    write_file(&cfg.output, TRACE_FILE, &buf)?;
    Ok(cfg.output.join(TRACE_FILE))
}

/// One cell of a comparison.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompareRow {
    /// `None` when the trace came from a file.
    pub spec: Option<WorkloadSpec>,
    pub policy: CachePolicy,
    pub oom: bool,
    pub summary: Summary,
}

pub const COMPARE_HEADER: [&str; 12] = [
    "zero_stage",
    "grad_ckpt",
    "offload",
    "policy",
    "status",
    "peak_reserved",
    "frag_at_peak",
    "peak_allocated",
    "frag_max",
    "reserved_wo_frag",
    "empty_cache_invocations",
    "bytes_released_total",
];

/// Runs every policy on every grid cell. OOM cells carry the partial report.
pub fn compare_rows(cfg: &ExperimentConfig) -> Result<Vec<CompareRow>, CliError> {
    let traces: Vec<(Option<WorkloadSpec>, Trace)> = match &cfg.workload {
        Some(WorkloadSource::Spec(base)) => cfg
            .grid
            .expand(base)
            .into_par_iter()
            .map(|spec| generate(&spec).map(|t| (Some(spec), t)))
            .collect::<Result<_, _>>()?,
        Some(WorkloadSource::TraceFile(path)) => {
            if !cfg.grid.is_empty() {
                return Err(CliError::Config("sweep.* keys need a workload spec, not a trace file".into()));
            }
            vec![(None, read_trace(path)?)]
        }
        None => return Err(missing_workload()),
    };
    let cells: Vec<(usize, CachePolicy)> = (0..traces.len())
        .flat_map(|i| CachePolicy::ALL.into_iter().map(move |p| (i, p)))
        .collect();
    cells
        .into_par_iter()
        .map(|(i, policy)| {
            let (spec, trace) = &traces[i];
            let (oom, summary) = match run(trace, policy, &cfg.allocator, cfg.capacity) {
                Ok(r) => (false, r.summary()),
                Err(RunError::Config(e)) => return Err(CliError::Config(e.to_string())),
                Err(e) => (true, e.partial_report().map(FragReport::summary).unwrap_or_default()),
            };
            Ok(CompareRow { spec: spec.clone(), policy, oom, summary })
        })
        .collect()
}

pub fn compare_csv(rows: &[CompareRow]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COMPARE_HEADER).expect("in-memory write");
    for r in rows {
        let knob = |f: fn(&WorkloadSpec) -> String| r.spec.as_ref().map(f).unwrap_or_else(|| "-".into());
        let s = &r.summary;
        w.write_record([
            knob(|s| s.zero_stage.to_string()),
            knob(|s| s.grad_ckpt.to_string()),
            knob(|s| s.offload.to_string()),
            r.policy.to_string(),
            (if r.oom { "oom" } else { "ok" }).to_string(),
            s.peak_reserved.to_string(),
            s.frag_at_peak.to_string(),
            s.peak_allocated.to_string(),
            s.frag_max.to_string(),
            s.reserved_wo_frag.to_string(),
            s.empty_cache_invocations.to_string(),
            s.bytes_released_total.to_string(),
        ])
        .expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// Reserved / Frag. / Allocated per cell in MiB, for the terminal.
pub fn compare_table(rows: &[CompareRow]) -> String {
    let mib = |b: Bytes| b as f64 / MIB as f64;
    let mut s = format!(
        "{:>5} {:>5} {:>7} {:<17} {:>12} {:>10} {:>12}\n",
        "zero", "ckpt", "offload", "policy", "reserved", "frag", "allocated"
    );
    for r in rows {
        let (z, c, o) = match &r.spec {
            Some(sp) => (sp.zero_stage.to_string(), sp.grad_ckpt.to_string(), sp.offload.to_string()),
            None => ("-".into(), "-".into(), "-".into()),
        };
        let _ = writeln!(
            s,
            "{z:>5} {c:>5} {o:>7} {:<17} {:>12.1} {:>10.1} {:>12.1}{}",
            r.policy.as_str(),
            mib(r.summary.peak_reserved),
            mib(r.summary.frag_at_peak),
            mib(r.summary.peak_allocated),
            if r.oom { "  OOM" } else { "" }
        );
    }
    s
}

/// Runs all four policies (times the optional grid) and writes `compare.csv`.
pub fn cmd_compare(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let rows = compare_rows(cfg)?;
    write_file(&cfg.output, COMPARE_FILE, &compare_csv(&rows))?;
    out.write_all(compare_table(&rows).as_bytes())
        .map_err(io_err(Path::new("<stdout>")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Run,
    Compare,
    GenTrace,
    Replay,
}

/// Loads the config, applies overrides and runs the command. Returns the exit code.
pub fn execute(
    command: Command,
    config: Option<&Path>,
    overrides: &Overrides,
    trace: Option<&Path>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    let result = (|| {
        let mut cfg = match config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply(overrides)?;
        match command {
            Command::Run => cmd_run(&cfg, out),
            Command::Compare => cmd_compare(&cfg, out),
            Command::GenTrace => {
                let path = cmd_gen_trace(&cfg)?;
                writeln!(out, "{}", path.display()).map_err(io_err(Path::new("<stdout>")))
            }
            Command::Replay => {
                let path = match (trace, &cfg.workload) {
                    (Some(p), _) => p.to_owned(),
                    (None, Some(WorkloadSource::TraceFile(p))) => p.clone(),
                    _ => return Err(CliError::Config("replay needs a trace file".into())),
                };
                cmd_replay(&cfg, &path, out)
            }
        }
    })();
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "fragsim: {e}");
            e.exit_code()
        }
    }
}
