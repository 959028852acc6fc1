//! Reserved/allocated time series and fragmentation sampling.
//!
//! Fragmentation is sampled only when the allocator has to reserve a new
//! segment: the sample is reserved minus allocated as they stood just
//! before the reservation. Between reservations the sample in force is
//! piecewise constant, so the fragmentation attributed to the reserved
//! peak is the latest sample at or before the event where that peak is
//! first reached.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocator::AllocatorStats;
use crate::Bytes;

/// Header of the timeline export. Column order is part of the format.
pub const TIMELINE_HEADER: [&str; 5] = [
    "event_index",
    "reserved_bytes",
    "allocated_bytes",
    "frag_bytes",
    "phase",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    Begin,
    End,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseAnnotation {
    pub event_index: usize,
    pub phase_name: String,
    pub boundary: Boundary,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FragReport {
    pub peak_reserved: Bytes,
    pub peak_allocated: Bytes,
    pub frag_at_peak: Bytes,
    /// Largest fragmentation sample over the run.
    pub frag_max: Bytes,
    pub reserved_wo_frag: Bytes,
    /// First event at which `peak_reserved` was reached.
    pub peak_event: Option<usize>,
    pub frag_series: Vec<(usize, Bytes)>,
    pub reserved_series: Vec<(usize, Bytes)>,
    pub allocated_series: Vec<(usize, Bytes)>,
    pub empty_cache_invocations: u64,
    pub bytes_released_total: Bytes,
    pub phase_annotations: Vec<PhaseAnnotation>,
}

impl FragReport {
    /// Name of the phase enclosing `event_index`, boundary events included.
    pub fn phase_at(&self, event_index: usize) -> Option<&str> {
        let mut current = None;
        for a in &self.phase_annotations {
            if a.event_index > event_index {
                break;
            }
            match a.boundary {
                Boundary::Begin => current = Some(a.phase_name.as_str()),
                Boundary::End if a.event_index == event_index => {
                    return Some(a.phase_name.as_str())
                }
                Boundary::End => current = None,
            }
        }
        current
    }

    pub fn peak_phase(&self) -> Option<&str> {
        self.peak_event.and_then(|e| self.phase_at(e))
    }

    pub fn summary(&self) -> Summary {
        Summary {
            peak_reserved: self.peak_reserved,
            peak_allocated: self.peak_allocated,
            frag_at_peak: self.frag_at_peak,
            frag_max: self.frag_max,
            reserved_wo_frag: self.reserved_wo_frag,
            empty_cache_invocations: self.empty_cache_invocations,
            bytes_released_total: self.bytes_released_total,
        }
    }
}

/// The scalar fields of a [`FragReport`], one flat record.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub peak_reserved: Bytes,
    pub peak_allocated: Bytes,
    pub frag_at_peak: Bytes,
    pub frag_max: Bytes,
    pub reserved_wo_frag: Bytes,
    pub empty_cache_invocations: u64,
    pub bytes_released_total: Bytes,
}

#[derive(Debug, Default)]
pub struct Profiler {
    frag_series: Vec<(usize, Bytes)>,
    reserved_series: Vec<(usize, Bytes)>,
    allocated_series: Vec<(usize, Bytes)>,
    phase_annotations: Vec<PhaseAnnotation>,
    empty_cache_invocations: u64,
    bytes_released_total: Bytes,
}

impl Profiler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn sample_fragmentation(
        &mut self,
        event_index: usize,
        reserved_before: Bytes,
        allocated_before: Bytes,
    ) -> Bytes {
        debug_assert!(allocated_before <= reserved_before);
        let frag = reserved_before.saturating_sub(allocated_before);
        self.frag_series.push((event_index, frag));
        frag
    }

    /// Records the allocator state after `event_index` was applied.
    pub fn record(&mut self, event_index: usize, stats: &AllocatorStats) {
        self.reserved_series.push((event_index, stats.reserved));
        self.allocated_series.push((event_index, stats.allocated));
    }

    pub fn annotate_phase(&mut self, event_index: usize, phase_name: &str, boundary: Boundary) {
        self.phase_annotations.push(PhaseAnnotation {
            event_index,
            phase_name: phase_name.to_owned(),
            boundary,
        });
    }

    pub fn record_empty_cache(&mut self, released: Bytes) {
        self.empty_cache_invocations += 1;
        self.bytes_released_total += released;
    }

    pub fn finalize(self) -> FragReport {
        let mut peak_reserved = 0;
        let mut peak_event = None;
        for &(idx, reserved) in &self.reserved_series {
            if reserved > peak_reserved {
                peak_reserved = reserved;
                peak_event = Some(idx);
            }
        }
        let frag_at_peak = peak_event
            .and_then(|peak| {
                self.frag_series
                    .iter()
                    .take_while(|(idx, _)| *idx <= peak)
                    .last()
                    .map(|(_, f)| *f)
            })
            .unwrap_or(0);
        let peak_allocated = self
            .allocated_series
            .iter()
            .map(|(_, a)| *a)
            .max()
            .unwrap_or(0);
        let frag_max = self.frag_series.iter().map(|(_, f)| *f).max().unwrap_or(0);
        FragReport {
            peak_reserved,
            peak_allocated,
            frag_at_peak,
            frag_max,
            reserved_wo_frag: peak_reserved - frag_at_peak,
            peak_event,
            frag_series: self.frag_series,
            reserved_series: self.reserved_series,
            allocated_series: self.allocated_series,
            empty_cache_invocations: self.empty_cache_invocations,
            bytes_released_total: self.bytes_released_total,
            phase_annotations: self.phase_annotations,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Summary,
    Timeline,
}

#[derive(Debug, Error)]
pub enum ProfilerError {
    #[error("timeline: {0}")]
    Csv(#[from] csv::Error),
    #[error("timeline: unexpected header {0:?}")]
    Header(Vec<String>),
    #[error("timeline row {row}: {msg}")]
    Row { row: usize, msg: String },
    #[error("summary: {0}")]
    Json(#[from] serde_json::Error),
}

pub fn export(report: &FragReport, format: ExportFormat) -> Vec<u8> {
    match format {
        ExportFormat::Summary => {
            let mut out = serde_json::to_vec(&report.summary()).expect("summary serializes");
            out.push(b'\n');
            out
        }
        ExportFormat::Timeline => export_timeline(report),
    }
}

fn export_timeline(report: &FragReport) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TIMELINE_HEADER).expect("in-memory write");
    let mut frags = report.frag_series.iter().peekable();
    let mut phases = report.phase_annotations.iter().peekable();
    let mut current: Option<&str> = None;
    for (&(idx, reserved), &(_, allocated)) in
        report.reserved_series.iter().zip(&report.allocated_series)
    {
        // A boundary event belongs to the phase it opens or closes.
        let mut closing = None;
        while let Some(a) = phases.next_if(|a| a.event_index <= idx) {
            match a.boundary {
                Boundary::Begin => current = Some(&a.phase_name),
                Boundary::End => {
                    if a.event_index == idx {
                        closing = Some(a.phase_name.as_str());
                    }
                    current = None;
                }
            }
        }
        let phase = closing.or(current).unwrap_or("");
        let mut frag = String::new();
        while let Some(&(_, f)) = frags.next_if(|(fi, _)| *fi <= idx) {
            frag = f.to_string();
        }
        w.write_record([
            idx.to_string(),
            reserved.to_string(),
            allocated.to_string(),
            frag,
            phase.to_string(),
        ])
        .expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// Series recovered from a timeline export.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Timeline {
    pub reserved_series: Vec<(usize, Bytes)>,
    pub allocated_series: Vec<(usize, Bytes)>,
    pub frag_series: Vec<(usize, Bytes)>,
    pub phases: Vec<(usize, String)>,
}

pub fn parse_timeline(input: &[u8]) -> Result<Timeline, ProfilerError> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != TIMELINE_HEADER {
        return Err(ProfilerError::Header(header));
    }
    let mut out = Timeline::default();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let num = |col: usize| -> Result<u64, ProfilerError> {
            rec[col].parse().map_err(|e| ProfilerError::Row {
                row: row + 1,
                msg: format!("column {}: {e}", TIMELINE_HEADER[col]),
            })
        };
        let idx = num(0)? as usize;
        out.reserved_series.push((idx, num(1)?));
        out.allocated_series.push((idx, num(2)?));
        if !rec[3].is_empty() {
            out.frag_series.push((idx, num(3)?));
        }
        out.phases.push((idx, rec[4].to_owned()));
    }
    Ok(out)
}

pub fn parse_summary(input: &[u8]) -> Result<Summary, ProfilerError> {
    Ok(serde_json::from_slice(input)?)
}
