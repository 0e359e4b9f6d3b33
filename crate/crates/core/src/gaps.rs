//! Transmission-failure identification.
//!
//! Two independent detectors: missing cells on the cadence grid, and
//! discontinuities in the 16-bit uplink frame counter.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DeviceId, Field, LoraPacketMeta, SensorReading, Timestamp, FCNT_MODULUS};

/// Implied losses above this are treated as counter resets or duplicates
/// rather than real gaps (4096 slots is about 42 days at 15 minutes).
pub const FCNT_PLAUSIBILITY_CAP: u32 = 4096;

pub const GAP_CSV_HEADER: &str = "deveui,slot_start,slot_end,missing_count,source";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GapError {
    #[error("no readings to align")]
    EmptyInput,
    #[error("input mixes devices {0} and {1}")]
    MixedDevices(DeviceId, DeviceId),
    #[error("timestamps go backwards at position {0}")]
    NonMonotonicTime(usize),
    #[error("cadence must be positive")]
    InvalidCadence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GapSource {
    Cadence,
    Fcnt,
}

impl GapSource {
    pub fn as_str(self) -> &'static str {
        match self {
            GapSource::Cadence => "cadence",
            GapSource::Fcnt => "fcnt",
        }
    }
}

/// A maximal run of missing slots. `slot_end` is exclusive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gap {
    pub device: DeviceId,
    pub slot_start: Timestamp,
    pub slot_end: Timestamp,
    pub missing_count: u32,
    pub source: GapSource,
}

impl Gap {
    pub fn slots(&self) -> impl Iterator<Item = Timestamp> + '_ {
        let step = (self.slot_end.millis() - self.slot_start.millis()) / self.missing_count as i64;
        (0..self.missing_count as i64).map(move |i| self.slot_start.offset(i * step))
    }
}

/// One measured field of one device on a uniform grid.
///
/// Without a slot map, `values[i]` belongs to `t0 + i * cadence`. Series that
/// had missing cells excised carry `slot_map`, with `values[i]` belonging to
/// grid slot `slot_map[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GriddedSeries {
    pub device: DeviceId,
    pub field: Field,
    pub t0: Timestamp,
    pub cadence_millis: i64,
    pub values: Vec<Option<f64>>,
    pub slot_map: Option<Vec<usize>>,
}

impl GriddedSeries {
    pub fn new(device: DeviceId, field: Field, t0: Timestamp, cadence_millis: i64, values: Vec<Option<f64>>) -> Self {
        GriddedSeries { device, field, t0, cadence_millis, values, slot_map: None }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slot(&self, i: usize) -> usize {
        self.slot_map.as_ref().map_or(i, |m| m[i])
    }

    pub fn time_of(&self, i: usize) -> Timestamp {
        self.t0.offset(self.slot(i) as i64 * self.cadence_millis)
    }

    pub fn missing_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.values.iter().all(Option::is_some)
    }

    /// Present values; panics on a missing cell.
    pub fn dense(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|v| v.expect("dense() on a series with missing cells"))
            .collect()
    }

    /// Cells `[start, end)` as a new series starting at `start`.
    pub fn window(&self, start: usize, end: usize) -> GriddedSeries {
        assert!(self.slot_map.is_none(), "window() on an excised series");
        GriddedSeries {
            t0: self.time_of(start),
            values: self.values[start..end].to_vec(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignWarning {
    /// Grid slot that received more than one reading; the later one was kept.
    pub slot: usize,
}

/// Grid anchored at multiples of the cadence since the epoch.
pub fn snap(ts: Timestamp, cadence_millis: i64) -> i64 {
    (ts.millis() + cadence_millis / 2).div_euclid(cadence_millis)
}

fn check_single_device<'a>(mut ids: impl Iterator<Item = &'a DeviceId>) -> Result<(), GapError> {
    if let Some(first) = ids.next() {
        if let Some(other) = ids.find(|d| *d != first) {
            return Err(GapError::MixedDevices(first.clone(), other.clone()));
        }
    }
    Ok(())
}

/// Snaps readings to the nearest grid slot (within half a cadence) and
/// returns a series spanning the first to the last occupied slot.
pub fn align_to_grid(
    readings: &[SensorReading],
    field: Field,
    cadence_millis: i64,
) -> Result<(GriddedSeries, Vec<AlignWarning>), GapError> {
    if cadence_millis <= 0 {
        return Err(GapError::InvalidCadence);
    }
    let first = readings.first().ok_or(GapError::EmptyInput)?;
    let last = readings.last().expect("nonempty");
    let lo = snap(first.ts, cadence_millis);
    let hi = snap(last.ts, cadence_millis);
    let t0 = Timestamp(lo * cadence_millis);
    align_on(readings, field, t0, cadence_millis, (hi - lo + 1).max(1) as usize)
}

/// Aligns onto an explicit grid of `len` slots from `t0`; readings outside
/// are ignored.
pub fn align_on(
    readings: &[SensorReading],
    field: Field,
    t0: Timestamp,
    cadence_millis: i64,
    len: usize,
) -> Result<(GriddedSeries, Vec<AlignWarning>), GapError> {
    if cadence_millis <= 0 {
        return Err(GapError::InvalidCadence);
    }
    let first = readings.first().ok_or(GapError::EmptyInput)?;
    check_single_device(readings.iter().map(|r| &r.device))?;
    if let Some(i) = readings.windows(2).position(|w| w[1].ts < w[0].ts) {
        return Err(GapError::NonMonotonicTime(i + 1));
    }
    let base = snap(t0, cadence_millis);
    let mut values = vec![None; len];
    let mut filled = vec![false; len];
    let mut warnings = Vec::new();
    for r in readings {
        let idx = snap(r.ts, cadence_millis) - base;
        if idx < 0 || idx >= len as i64 {
            continue;
        }
        let idx = idx as usize;
        if filled[idx] {
            warnings.push(AlignWarning { slot: idx });
        }
        filled[idx] = true;
        values[idx] = r.get(field);
    }
    Ok((GriddedSeries::new(first.device.clone(), field, t0, cadence_millis, values), warnings))
}

pub fn detect_gaps_cadence(series: &GriddedSeries) -> Vec<Gap> {
    let mut gaps = Vec::new();
    let mut i = 0;
    while i < series.len() {
        if series.values[i].is_some() {
            i += 1;
            continue;
        }
        let start = i;
        while i < series.len() && series.values[i].is_none() {
            i += 1;
        }
        let slot_start = series.time_of(start);
        gaps.push(Gap {
            device: series.device.clone(),
            slot_start,
            slot_end: slot_start.offset((i - start) as i64 * series.cadence_millis),
            missing_count: (i - start) as u32,
            source: GapSource::Cadence,
        });
    }
    gaps
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FcntWarning {
    /// Packet at this index repeats the previous counter.
    DuplicateCounter { index: usize },
    /// Counter jump implying more losses than the plausibility cap.
    CounterAnomaly { index: usize, implied_missing: u32 },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FcntScan {
    pub gaps: Vec<Gap>,
    pub warnings: Vec<FcntWarning>,
}

/// Losses implied between consecutive counters `a` then `b`, modulo 2^16.
pub fn implied_missing(a: u16, b: u16) -> u32 {
    (b as u32 + FCNT_MODULUS - a as u32 - 1) % FCNT_MODULUS
}

pub fn detect_gaps_fcnt(packets: &[LoraPacketMeta], cadence_millis: i64) -> Result<FcntScan, GapError> {
    if cadence_millis <= 0 {
        return Err(GapError::InvalidCadence);
    }
    check_single_device(packets.iter().map(|p| p.device()))?;
    let mut scan = FcntScan::default();
    for (i, w) in packets.windows(2).enumerate() {
        let (a, b) = (&w[0], &w[1]);
        if b.ts() < a.ts() {
            return Err(GapError::NonMonotonicTime(i + 1));
        }
        let missing = implied_missing(a.fcnt(), b.fcnt());
        if missing == 0 {
            continue;
        }
        if missing == FCNT_MODULUS - 1 {
            scan.warnings.push(FcntWarning::DuplicateCounter { index: i + 1 });
        } else if missing > FCNT_PLAUSIBILITY_CAP {
            scan.warnings.push(FcntWarning::CounterAnomaly { index: i + 1, implied_missing: missing });
        } else {
            let slot_start = a.ts().offset(cadence_millis);
            scan.gaps.push(Gap {
                device: a.device().clone(),
                slot_start,
                slot_end: slot_start.offset(missing as i64 * cadence_millis),
                missing_count: missing,
                source: GapSource::Fcnt,
            });
        }
    }
    Ok(scan)
}

pub fn write_gap_csv<'a, W: Write>(mut out: W, gaps: impl IntoIterator<Item = &'a Gap>) -> io::Result<()> {
    writeln!(out, "{GAP_CSV_HEADER}")?;
    for g in gaps {
        writeln!(
            out,
            "{},{},{},{},{}",
            g.device,
            g.slot_start,
            g.slot_end,
            g.missing_count,
            g.source.as_str()
        )?;
    }
    Ok(())
}
