//! Meter trace ingestion: regularly sampled watt-hour readings with UTC
//! timestamps, day windowing, and block-sum downsampling.
//!
//! CSV format: header `timestamp,watt_hours`, ISO-8601 UTC timestamps, one
//! reading per line. Sampling must be regular; a trace is stored as start
//! time, interval, and values.

use chrono::{DateTime, SecondsFormat, Timelike, Utc};

pub const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("trace has no readings")]
    Empty,
    #[error("line {line}: timestamps not strictly increasing")]
    NotMonotone { line: usize },
    #[error("line {line}: irregular sampling, expected {expected}s gap but found {got}s")]
    Irregular { line: usize, expected: i64, got: i64 },
    #[error("bad interval: {0}")]
    BadInterval(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub start: DateTime<Utc>,
    pub interval_seconds: i64,
    pub values: Vec<f64>,
}

impl Trace {
    pub fn timestamp(&self, index: usize) -> DateTime<Utc> {
        self.start + chrono::Duration::seconds(self.interval_seconds * index as i64)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Parse a trace from CSV text. Line numbers in errors count the header as
/// line 1.
pub fn read_trace_csv(text: &str) -> Result<Trace, TraceError> {
    let mut lines = text.lines().enumerate();
    let header = match lines.next() {
        Some((_, h)) => h.trim(),
        None => return Err(TraceError::Empty),
    };
    if header != "timestamp,watt_hours" {
        return Err(TraceError::Line {
            line: 1,
            msg: format!("expected header `timestamp,watt_hours`, found `{header}`"),
        });
    }
    let mut stamps: Vec<DateTime<Utc>> = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    for (zero_based, raw) in lines {
        let line = zero_based + 1;
        let row = raw.trim();
        if row.is_empty() {
            continue;
        }
        let (ts_text, value_text) = row.split_once(',').ok_or_else(|| TraceError::Line {
            line,
            msg: "expected two comma-separated fields".into(),
        })?;
        let ts = DateTime::parse_from_rfc3339(ts_text.trim())
            .map_err(|e| TraceError::Line {
                line,
                msg: format!("bad timestamp `{}`: {e}", ts_text.trim()),
            })?
            .with_timezone(&Utc);
        let value: f64 = value_text.trim().parse().map_err(|e| TraceError::Line {
            line,
            msg: format!("bad reading `{}`: {e}", value_text.trim()),
        })?;
        if !value.is_finite() || value < 0.0 {
            return Err(TraceError::Line {
                line,
                msg: format!("reading must be finite and non-negative, got {value}"),
            });
        }
        if let Some(prev) = stamps.last() {
            if ts <= *prev {
                return Err(TraceError::NotMonotone { line });
            }
        }
        stamps.push(ts);
        values.push(value);
    }
    if values.is_empty() {
        return Err(TraceError::Empty);
    }
    let interval_seconds = if stamps.len() >= 2 {
        (stamps[1] - stamps[0]).num_seconds()
    } else {
        1
    };
    if interval_seconds <= 0 {
        return Err(TraceError::BadInterval(format!(
            "sub-second sampling unsupported (gap {interval_seconds}s)"
        )));
    }
    for (i, pair) in stamps.windows(2).enumerate() {
        let got = (pair[1] - pair[0]).num_seconds();
        if got != interval_seconds {
            // Line of the second stamp in the offending pair.
            return Err(TraceError::Irregular {
                line: i + 3,
                expected: interval_seconds,
                got,
            });
        }
    }
    Ok(Trace {
        start: stamps[0],
        interval_seconds,
        values,
    })
}

/// Canonical CSV rendering; parsing it back reproduces the trace exactly.
pub fn write_trace_csv(trace: &Trace) -> String {
    let mut out = String::from("timestamp,watt_hours\n");
    for (i, v) in trace.values.iter().enumerate() {
        out.push_str(&format!(
            "{},{}\n",
            trace
                .timestamp(i)
                .to_rfc3339_opts(SecondsFormat::Secs, true),
            v
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DayWindow {
    pub start_index: usize,
    pub len: usize,
}

/// Full midnight-to-midnight UTC windows. Partial days at either edge are
/// skipped and reported.
pub fn day_windows(trace: &Trace) -> Result<(Vec<DayWindow>, Vec<String>), TraceError> {
    if SECONDS_PER_DAY % trace.interval_seconds != 0 {
        return Err(TraceError::BadInterval(format!(
            "interval {}s does not divide a day",
            trace.interval_seconds
        )));
    }
    let per_day = (SECONDS_PER_DAY / trace.interval_seconds) as usize;
    let mut warnings = Vec::new();
    let start_sec = trace.start.num_seconds_from_midnight() as i64;
    let first_aligned = if start_sec == 0 {
        0
    } else {
        let offset = SECONDS_PER_DAY - start_sec;
        if offset % trace.interval_seconds != 0 {
            return Err(TraceError::BadInterval(format!(
                "start time {} can never align to midnight at {}s sampling",
                trace.start, trace.interval_seconds
            )));
        }
        (offset / trace.interval_seconds) as usize
    };
    if first_aligned > 0 {
        warnings.push(format!(
            "skipped {first_aligned} leading samples before the first midnight"
        ));
    }
    let mut windows = Vec::new();
    let mut index = first_aligned;
    while index + per_day <= trace.len() {
        windows.push(DayWindow {
            start_index: index,
            len: per_day,
        });
        index += per_day;
    }
    let trailing = trace.len().saturating_sub(index);
    if trailing > 0 {
        warnings.push(format!("skipped {trailing} trailing samples of a partial day"));
    }
    Ok((windows, warnings))
}

pub fn window_values<'a>(trace: &'a Trace, window: &DayWindow) -> &'a [f64] {
    &trace.values[window.start_index..window.start_index + window.len]
}

/// Downsample by summing blocks; the block timestamp is its first sample's.
/// A trailing partial block is dropped and reported.
pub fn resample_sum(
    trace: &Trace,
    target_seconds: i64,
) -> Result<(Trace, Vec<String>), TraceError> {
    if target_seconds <= trace.interval_seconds || target_seconds % trace.interval_seconds != 0 {
        return Err(TraceError::BadInterval(format!(
            "target {target_seconds}s must be a proper multiple of the {}s source interval",
            trace.interval_seconds
        )));
    }
    let k = (target_seconds / trace.interval_seconds) as usize;
    let blocks = trace.len() / k;
    if blocks == 0 {
        return Err(TraceError::Empty);
    }
    let mut warnings = Vec::new();
    let remainder = trace.len() - blocks * k;
    if remainder > 0 {
        warnings.push(format!("dropped {remainder} trailing samples short of a block"));
    }
    let values: Vec<f64> = (0..blocks)
        .map(|b| trace.values[b * k..(b + 1) * k].iter().sum())
        .collect();
    Ok((
        Trace {
            start: trace.start,
            interval_seconds: target_seconds,
            values,
        },
        warnings,
    ))
}
