//! Parsing and serialization of the LoRa-parameter and sensor-reading CSVs,
//! plus box-plot outlier removal.
//!
//! Both parsers are total over their input: every data row ends up either in
//! the returned list or in the [`ParseReport`]. Only a missing/incorrect
//! header or an I/O failure aborts a parse.

use std::fmt;
use std::io::{self, BufRead, Write};

use serde::Serialize;
use thiserror::Error;

use crate::model::{DeviceId, Field, LoraPacketMeta, ModelError, SensorReading, Timestamp};

pub const LORA_HEADER: &str = "time,channel,deveui,lsnr,port,rfch,rssi,fcnt";
pub const SENSOR_HEADER: &str =
    "time,deveui,co2,temperature,humidity,light,motion,sound_avg,sound_peak,pressure,moisture,battery";

const LORA_COLUMNS: usize = 8;
const SENSOR_COLUMNS: usize = 12;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("missing or unexpected header, expected `{expected}`")]
    MissingHeader { expected: &'static str },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RejectReason {
    InvalidUtf8,
    ColumnCountMismatch { expected: usize, found: usize },
    MalformedTimestamp { value: String },
    InvalidCalendar { value: String },
    InvalidDevEui { value: String },
    MalformedNumber { column: String, value: String },
    OutOfRange { field: String, lo: f64, hi: f64, value: f64 },
    AllFieldsNan,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::InvalidUtf8 => write!(f, "invalid utf-8"),
            RejectReason::ColumnCountMismatch { expected, found } => {
                write!(f, "expected {expected} columns, found {found}")
            }
            RejectReason::MalformedTimestamp { value } => write!(f, "malformed timestamp `{value}`"),
            RejectReason::InvalidCalendar { value } => write!(f, "invalid calendar value `{value}`"),
            RejectReason::InvalidDevEui { value } => write!(f, "invalid deveui `{value}`"),
            RejectReason::MalformedNumber { column, value } => {
                write!(f, "malformed number in {column}: `{value}`")
            }
            RejectReason::OutOfRange { field, lo, hi, .. } => {
                write!(f, "{field} out of range [{lo},{hi}]")
            }
            RejectReason::AllFieldsNan => write!(f, "all measurements are nan"),
        }
    }
}

impl From<ModelError> for RejectReason {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::MalformedTimestamp(value) => RejectReason::MalformedTimestamp { value },
            ModelError::InvalidCalendar(value) => RejectReason::InvalidCalendar { value },
            ModelError::InvalidDevEui(value) => RejectReason::InvalidDevEui { value },
            ModelError::OutOfRange { field, lo, hi, value } => RejectReason::OutOfRange {
                field: field.to_string(),
                lo,
                hi,
                value,
            },
            ModelError::AmbiguousKind(_) | ModelError::UnknownField(_) => {
                unreachable!("not produced while parsing rows")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rejection {
    /// 1-based line number in the file, header included.
    pub line: usize,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ParseReport {
    pub rows_ok: usize,
    pub rows_rejected: usize,
    pub rejections: Vec<Rejection>,
}

impl ParseReport {
    fn reject(&mut self, line: usize, reason: RejectReason) {
        self.rows_rejected += 1;
        self.rejections.push(Rejection { line, reason });
    }

    pub fn total_rows(&self) -> usize {
        self.rows_ok + self.rows_rejected
    }
}

/// Iterates non-empty data lines as `(line_number, Result<&str>)` after
/// checking the header.
fn for_each_row<R: BufRead>(
    mut input: R,
    header: &'static str,
    mut on_row: impl FnMut(usize, Result<&str, RejectReason>),
) -> Result<(), IngestError> {
    let mut buf = Vec::new();
    let mut line_no = 0usize;
    let mut header_seen = false;
    loop {
        buf.clear();
        if input.read_until(b'\n', &mut buf)? == 0 {
            break;
        }
        line_no += 1;
        while matches!(buf.last(), Some(b'\n' | b'\r')) {
            buf.pop();
        }
        if !header_seen {
            let ok = std::str::from_utf8(&buf).is_ok_and(|h| h.trim_start_matches('\u{feff}') == header);
            if !ok {
                return Err(IngestError::MissingHeader { expected: header });
            }
            header_seen = true;
            continue;
        }
        if buf.is_empty() {
            continue;
        }
        match std::str::from_utf8(&buf) {
            Ok(s) => on_row(line_no, Ok(s)),
            Err(_) => on_row(line_no, Err(RejectReason::InvalidUtf8)),
        }
    }
    if !header_seen {
        return Err(IngestError::MissingHeader { expected: header });
    }
    Ok(())
}

fn number<T: std::str::FromStr>(column: &str, value: &str) -> Result<T, RejectReason> {
    value.parse().map_err(|_| RejectReason::MalformedNumber {
        column: column.to_string(),
        value: value.to_string(),
    })
}

fn finite(column: &str, value: &str) -> Result<f64, RejectReason> {
    let v: f64 = number(column, value)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(RejectReason::MalformedNumber { column: column.to_string(), value: value.to_string() })
    }
}

fn parse_lora_row(row: &str) -> Result<LoraPacketMeta, RejectReason> {
    let cols: Vec<&str> = row.split(',').collect();
    if cols.len() != LORA_COLUMNS {
        return Err(RejectReason::ColumnCountMismatch { expected: LORA_COLUMNS, found: cols.len() });
    }
    let ts = Timestamp::parse_joined(cols[0])?;
    let device = DeviceId::new(cols[2])?;
    Ok(LoraPacketMeta::new(
        ts,
        device,
        number("channel", cols[1])?,
        finite("lsnr", cols[3])?,
        number("port", cols[4])?,
        number("rfch", cols[5])?,
        finite("rssi", cols[6])?,
        number("fcnt", cols[7])?,
    )?)
}

pub fn parse_lora_csv<R: BufRead>(input: R) -> Result<(Vec<LoraPacketMeta>, ParseReport), IngestError> {
    let mut packets = Vec::new();
    let mut report = ParseReport::default();
    for_each_row(input, LORA_HEADER, |line, row| match row.and_then(parse_lora_row) {
        Ok(p) => {
            report.rows_ok += 1;
            packets.push(p);
        }
        Err(reason) => report.reject(line, reason),
    })?;
    Ok((packets, report))
}

fn parse_sensor_row(row: &str) -> Result<SensorReading, RejectReason> {
    let cols: Vec<&str> = row.split(',').collect();
    if cols.len() != SENSOR_COLUMNS {
        return Err(RejectReason::ColumnCountMismatch { expected: SENSOR_COLUMNS, found: cols.len() });
    }
    let ts = Timestamp::parse_joined(cols[0])?;
    let device = DeviceId::new(cols[1])?;
    let mut values = [None; 10];
    for (field, cell) in Field::ALL.into_iter().zip(&cols[2..]) {
        values[field.index()] = match *cell {
            "nan" => None,
            other => Some(finite(field.name(), other)?),
        };
    }
    SensorReading::new(ts, device, values).ok_or(RejectReason::AllFieldsNan)
}

pub fn parse_sensor_csv<R: BufRead>(input: R) -> Result<(Vec<SensorReading>, ParseReport), IngestError> {
    let mut readings = Vec::new();
    let mut report = ParseReport::default();
    for_each_row(input, SENSOR_HEADER, |line, row| match row.and_then(parse_sensor_row) {
        Ok(r) => {
            report.rows_ok += 1;
            readings.push(r);
        }
        Err(reason) => report.reject(line, reason),
    })?;
    Ok((readings, report))
}

/// Writes a float so that parsing it back yields the same bits.
fn write_num<W: Write>(out: &mut W, v: f64) -> io::Result<()> {
    write!(out, "{v}")
}

pub fn write_lora_csv<'a, W: Write>(
    mut out: W,
    packets: impl IntoIterator<Item = &'a LoraPacketMeta>,
) -> io::Result<()> {
    writeln!(out, "{LORA_HEADER}")?;
    for p in packets {
        write!(out, "{},{},{},", p.ts(), p.channel(), p.device())?;
        write_num(&mut out, p.lsnr())?;
        write!(out, ",{},{},", p.port(), p.rfch())?;
        write_num(&mut out, p.rssi())?;
        writeln!(out, ",{}", p.fcnt())?;
    }
    Ok(())
}

pub fn write_sensor_csv<'a, W: Write>(
    mut out: W,
    readings: impl IntoIterator<Item = &'a SensorReading>,
) -> io::Result<()> {
    writeln!(out, "{SENSOR_HEADER}")?;
    for r in readings {
        write!(out, "{},{}", r.ts, r.device)?;
        for v in r.values() {
            match v {
                Some(v) => {
                    out.write_all(b",")?;
                    write_num(&mut out, *v)?;
                }
                None => out.write_all(b",nan")?,
            }
        }
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Error, PartialEq)]
pub enum OutlierError {
    #[error("series has {0} present values, need at least 4")]
    SeriesTooShort(usize),
    #[error("iqr factor must be positive, got {0}")]
    InvalidFactor(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutlierReport {
    pub removed_indices: Vec<usize>,
    pub lower_fence: f64,
    pub upper_fence: f64,
}

impl OutlierReport {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.lower_fence && v <= self.upper_fence
    }
}

pub const DEFAULT_IQR_FACTOR: f64 = 1.5;

/// Quantile of sorted data by linear interpolation between order statistics
/// at position `(n - 1) * p`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Box-plot fences `Q1 - factor*IQR`, `Q3 + factor*IQR` over the present
/// values. Cells outside become missing; present cells inside are untouched.
pub fn remove_outliers(
    values: &[Option<f64>],
    iqr_factor: f64,
) -> Result<(Vec<Option<f64>>, OutlierReport), OutlierError> {
    if !(iqr_factor > 0.0) {
        return Err(OutlierError::InvalidFactor(iqr_factor));
    }
    let mut sorted: Vec<f64> = values.iter().flatten().copied().collect();
    if sorted.len() < 4 {
        return Err(OutlierError::SeriesTooShort(sorted.len()));
    }
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&sorted, 0.25);
    let q3 = quantile_sorted(&sorted, 0.75);
    let iqr = q3 - q1;
    let report_fences = (q1 - iqr_factor * iqr, q3 + iqr_factor * iqr);
    let mut report = OutlierReport {
        removed_indices: Vec::new(),
        lower_fence: report_fences.0,
        upper_fence: report_fences.1,
    };
    let cleaned = values
        .iter()
        .enumerate()
        .map(|(i, v)| match v {
            Some(x) if !report.contains(*x) => {
                report.removed_indices.push(i);
                None
            }
            other => *other,
        })
        .collect();
    Ok((cleaned, report))
}

/// Applies previously computed fences; a no-op on output of [`remove_outliers`]
/// for the same report.
pub fn apply_fences(values: &[Option<f64>], report: &OutlierReport) -> Vec<Option<f64>> {
    values.iter().map(|v| v.filter(|x| report.contains(*x))).collect()
}
