//! Deterministic synthetic campus generator.
//!
//! Emits sensor readings and LoRa metadata on a fixed cadence grid with
//! i.i.d. packet loss, and keeps the ground truth (dropped slots, planted
//! room occupancy) so every downstream stage can be checked against it.
//!
//! Each device draws from its own ChaCha stream derived from `(seed, index)`,
//! so the output does not depend on generation order. Every slot consumes the
//! same random draws whether or not its packet is dropped.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::apportion::largest_remainder;
use crate::ingest::{write_lora_csv, write_sensor_csv};
use crate::model::{
    DeviceId, DeviceInfo, DeviceKind, Field, LoraPacketMeta, ModelError, SensorReading, Timestamp,
    FCNT_MODULUS, MILLIS_PER_DAY, MILLIS_PER_MINUTE,
};

pub const LORA_FILE: &str = "lora.csv";
pub const SENSORS_FILE: &str = "sensors.csv";
pub const TRUTH_FILE: &str = "truth.json";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("malformed truth file: {0}")]
    Truth(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n_devices: usize,
    /// Relative weights of CO2, sound and moisture devices.
    pub kind_mix: [f64; 3],
    pub start: Timestamp,
    pub end: Timestamp,
    pub cadence_minutes: u32,
    pub drop_prob: f64,
    pub seed: u64,
    /// The first `occupancy_rooms` CO2 devices carry a planted occupancy signal.
    pub occupancy_rooms: usize,
    pub max_occupancy: u32,
    /// Standard deviation of the CO2 noise in ppm.
    pub noise_sd: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_devices: 10,
            kind_mix: [326.0, 119.0, 17.0],
            // 2020-02-01T00:00:00Z
            start: Timestamp(1_580_515_200_000),
            // 2020-03-02T00:00:00Z
            end: Timestamp(1_583_107_200_000),
            cadence_minutes: 15,
            drop_prob: 0.05,
            seed: 42,
            occupancy_rooms: 1,
            max_occupancy: 12,
            noise_sd: 10.0,
        }
    }
}

impl SimConfig {
    pub fn cadence_millis(&self) -> i64 {
        self.cadence_minutes as i64 * MILLIS_PER_MINUTE
    }

    pub fn n_slots(&self) -> usize {
        let span = self.end.millis() - self.start.millis();
        let c = self.cadence_millis();
        ((span + c - 1) / c) as usize
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if self.start >= self.end {
            return bad("start must precede end");
        }
        if self.cadence_minutes == 0 {
            return bad("cadence_minutes must be positive");
        }
        if self.kind_mix.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return bad("kind_mix weights must be finite and nonnegative");
        }
        if self.kind_mix.iter().sum::<f64>() <= 0.0 {
            return bad("kind_mix weights must not all be zero");
        }
        if !(0.0..1.0).contains(&self.drop_prob) {
            return bad("drop_prob must lie in [0, 1)");
        }
        if self.max_occupancy == 0 {
            return bad("max_occupancy must be positive");
        }
        if !(self.noise_sd >= 0.0) || !self.noise_sd.is_finite() {
            return bad("noise_sd must be finite and nonnegative");
        }
        let co2 = largest_remainder(self.n_devices, &self.kind_mix)[0];
        if self.occupancy_rooms > co2 {
            return Err(SimError::InvalidConfig(format!(
                "occupancy_rooms ({}) exceeds the number of CO2 devices ({co2})",
                self.occupancy_rooms
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SyntheticDataset {
    pub devices: Vec<DeviceInfo>,
    pub readings: Vec<SensorReading>,
    pub packets: Vec<LoraPacketMeta>,
    /// Dropped grid slots per device; devices without drops are absent.
    pub truth_mask: BTreeMap<DeviceId, Vec<Timestamp>>,
    /// People count per labelled slot (occupied slots only) of each room device.
    pub occupancy_truth: BTreeMap<DeviceId, Vec<(Timestamp, u32)>>,
    pub start: Timestamp,
    pub cadence_millis: i64,
    pub n_slots: usize,
}

fn round_to(v: f64, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    (v * s).round() / s
}

/// Meeting-room occupancy: meetings start and end at random during weekday
/// office hours with skewed headcounts; the room is empty otherwise.
struct OccupancyProcess {
    max: u32,
    people: u32,
}

impl OccupancyProcess {
    const START_PROB: f64 = 0.15;
    const END_PROB: f64 = 0.25;
    const DRIFT_PROB: f64 = 0.2;

    fn step(&mut self, ts: Timestamp, rng: &mut ChaCha8Rng) -> u32 {
        let hour = ts.time_of_day_millis() / (60 * MILLIS_PER_MINUTE);
        let office = ts.weekday() < 5 && (8..18).contains(&hour);
        let (u_start, u_end, u_drift, u_size) = (
            rng.random::<f64>(),
            rng.random::<f64>(),
            rng.random::<f64>(),
            rng.random::<f64>(),
        );
        if !office {
            self.people = 0;
        } else if self.people == 0 {
            if u_start < Self::START_PROB {
                self.people = self.headcount(u_size);
            }
        } else if u_end < Self::END_PROB {
            self.people = 0;
        } else if u_drift < Self::DRIFT_PROB {
            let up = u_size < 0.5;
            self.people = if up { (self.people + 1).min(self.max) } else { (self.people - 1).max(1) };
        }
        self.people
    }

    /// Inverse-CDF draw with P(n) proportional to 1/n over 1..=max.
    fn headcount(&self, u: f64) -> u32 {
        let total: f64 = (1..=self.max).map(|n| 1.0 / n as f64).sum();
        let mut acc = 0.0;
        for n in 1..=self.max {
            acc += 1.0 / n as f64 / total;
            if u < acc {
                return n;
            }
        }
        self.max
    }
}

struct DeviceSim {
    info: DeviceInfo,
    rng: ChaCha8Rng,
    fcnt: u32,
    occupancy: Option<OccupancyProcess>,
}

impl DeviceSim {
    fn readings(
        &mut self,
        ts: Timestamp,
        progress: f64,
        noise_sd: f64,
    ) -> (Vec<(Field, f64)>, Option<u32>) {
        let rng = &mut self.rng;
        let people = match self.occupancy.as_mut() {
            Some(p) => Some(p.step(ts, rng)),
            None => None,
        };
        let n = people.unwrap_or(0) as f64;
        let std = Normal::new(0.0, 1.0).expect("unit normal");
        let mut z = || std.sample(rng);
        let day_phase = std::f64::consts::TAU * ts.time_of_day_millis() as f64 / MILLIS_PER_DAY as f64;
        let battery = round_to(3.6 - 0.1 * progress + 0.005 * z(), 2);
        let mut out = Vec::with_capacity(7);
        match self.info.kind {
            DeviceKind::Co2 => {
                let co2 = round_to(420.0 + 40.0 * n + noise_sd * z(), 1);
                let temperature = round_to(21.0 + 0.15 * n - 0.5 * day_phase.cos() + 0.2 * z(), 1);
                let humidity = round_to((30.0 + 0.8 * n + z()).clamp(0.0, 100.0), 1);
                let light = if n > 0.0 {
                    round_to((320.0 + 25.0 * z()).max(0.0), 0)
                } else {
                    round_to((5.0 + 3.0 * z()).abs(), 0)
                };
                let u = rng.random::<f64>();
                let motion = if n > 0.0 { poisson(1.5 * n, u) } else { 0.0 };
                out.extend([
                    (Field::Co2, co2),
                    (Field::Temperature, temperature),
                    (Field::Humidity, humidity),
                    (Field::Light, light),
                    (Field::Motion, motion),
                ]);
            }
            DeviceKind::Sound => {
                let sound_avg = round_to(45.0 + 2.0 * z(), 1);
                let sound_peak = round_to(70.0 + 4.0 * z(), 1);
                let temperature = round_to(21.0 - 0.5 * day_phase.cos() + 0.2 * z(), 1);
                let humidity = round_to((30.0 + z()).clamp(0.0, 100.0), 1);
                let daylight = (-day_phase.cos()).max(0.0);
                let light = round_to((400.0 * daylight + 5.0 * z()).abs(), 0);
                let u = rng.random::<f64>();
                let motion = poisson(0.5 + 2.0 * daylight, u);
                out.extend([
                    (Field::Temperature, temperature),
                    (Field::Humidity, humidity),
                    (Field::Light, light),
                    (Field::Motion, motion),
                    (Field::SoundAvg, sound_avg),
                    (Field::SoundPeak, sound_peak),
                ]);
            }
            DeviceKind::Moisture => {
                let days = progress * 30.0;
                let moisture = round_to(
                    (25.0 + 15.0 * (std::f64::consts::TAU * days / 30.0).sin() + z()).clamp(5.0, 45.0),
                    1,
                );
                let pressure = round_to(1000.0 + 0.5 * z(), 1);
                let temperature = round_to(10.0 - 8.0 * day_phase.cos() + 0.5 * z(), 1);
                let humidity = round_to((70.0 + 10.0 * day_phase.cos() + 2.0 * z()).clamp(0.0, 100.0), 1);
                out.extend([
                    (Field::Temperature, temperature),
                    (Field::Humidity, humidity),
                    (Field::Pressure, pressure),
                    (Field::Moisture, moisture),
                ]);
            }
        }
        out.push((Field::Battery, battery));
        (out, people)
    }
}

/// Poisson count from a single uniform by CDF inversion, so every slot
/// consumes a fixed number of draws. Means here stay small (< 50).
fn poisson(mean: f64, u: f64) -> f64 {
    let mut p = (-mean).exp();
    let mut cdf = p;
    let mut k = 0.0;
    while u > cdf && p > 0.0 {
        k += 1.0;
        p *= mean / k;
        cdf += p;
    }
    k
}

pub fn generate(config: &SimConfig) -> Result<SyntheticDataset, SimError> {
    config.validate()?;
    let counts = largest_remainder(config.n_devices, &config.kind_mix);
    let kinds = DeviceKind::ALL
        .iter()
        .zip(&counts)
        .flat_map(|(k, &c)| std::iter::repeat_n(*k, c));

    let mut id_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sims: Vec<DeviceSim> = kinds
        .enumerate()
        .map(|(i, kind)| {
            let id = DeviceId::from_u64(id_rng.random());
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64 + 1);
            let fcnt = rng.random_range(0..FCNT_MODULUS);
            let occupancy = (kind == DeviceKind::Co2 && i < config.occupancy_rooms)
                .then_some(OccupancyProcess { max: config.max_occupancy, people: 0 });
            DeviceSim {
                info: DeviceInfo { id, kind, coord: None, height: None },
                rng,
                fcnt,
                occupancy,
            }
        })
        .collect();

    let n_slots = config.n_slots();
    let cadence = config.cadence_millis();
    let mut ds = SyntheticDataset {
        devices: sims.iter().map(|s| s.info.clone()).collect(),
        start: config.start,
        cadence_millis: cadence,
        n_slots,
        ..Default::default()
    };
    for slot in 0..n_slots {
        let ts = config.start.offset(slot as i64 * cadence);
        let progress = slot as f64 / n_slots.max(1) as f64;
        for sim in sims.iter_mut() {
            let u_drop = sim.rng.random::<f64>();
            let channel = sim.rng.random_range(0..=6i64);
            let lsnr = round_to(sim.rng.random_range(-22.5..=10.0), 1);
            let port = sim.rng.random_range(1..=12i64);
            let rfch = sim.rng.random_range(0..=1i64);
            let rssi = sim.rng.random_range(-120..=-53i64) as f64;
            let (fields, people) = sim.readings(ts, progress, config.noise_sd);
            let fcnt = sim.fcnt;
            sim.fcnt = (sim.fcnt + 1) % FCNT_MODULUS;

            let id = &sim.info.id;
            if let Some(p) = people.filter(|&p| p > 0) {
                ds.occupancy_truth.entry(id.clone()).or_default().push((ts, p));
            }
            // A trace is bounded by delivered packets on both ends.
            let bookend = slot == 0 || slot + 1 == n_slots;
            if !bookend && u_drop < config.drop_prob {
                ds.truth_mask.entry(id.clone()).or_default().push(ts);
                continue;
            }
            let packet = LoraPacketMeta::new(ts, id.clone(), channel, lsnr, port, rfch, rssi, fcnt as i64)
                .map_err(|e: ModelError| SimError::InvalidConfig(e.to_string()))?;
            ds.packets.push(packet);
            ds.readings.push(
                SensorReading::from_fields(ts, id.clone(), fields).expect("every kind reports battery"),
            );
        }
    }
    Ok(ds)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub masks: BTreeMap<String, Vec<String>>,
    pub occupancy: BTreeMap<String, Vec<(String, u32)>>,
}

impl TruthFile {
    pub fn from_dataset(ds: &SyntheticDataset) -> Self {
        TruthFile {
            masks: ds
                .truth_mask
                .iter()
                .map(|(d, ts)| (d.to_string(), ts.iter().map(|t| t.to_iso8601()).collect()))
                .collect(),
            occupancy: ds
                .occupancy_truth
                .iter()
                .map(|(d, rows)| (d.to_string(), rows.iter().map(|(t, n)| (t.to_iso8601(), *n)).collect()))
                .collect(),
        }
    }

    pub fn masks(&self) -> Result<BTreeMap<DeviceId, Vec<Timestamp>>, SimError> {
        self.masks
            .iter()
            .map(|(d, ts)| {
                let id = DeviceId::new(d).map_err(|e| SimError::Truth(e.to_string()))?;
                let ts = ts
                    .iter()
                    .map(|t| Timestamp::parse_iso8601(t).map_err(|e| SimError::Truth(e.to_string())))
                    .collect::<Result<_, _>>()?;
                Ok((id, ts))
            })
            .collect()
    }

    pub fn occupancy(&self) -> Result<BTreeMap<DeviceId, Vec<(Timestamp, u32)>>, SimError> {
        self.occupancy
            .iter()
            .map(|(d, rows)| {
                let id = DeviceId::new(d).map_err(|e| SimError::Truth(e.to_string()))?;
                let rows = rows
                    .iter()
                    .map(|(t, n)| {
                        Timestamp::parse_iso8601(t)
                            .map(|t| (t, *n))
                            .map_err(|e| SimError::Truth(e.to_string()))
                    })
                    .collect::<Result<_, _>>()?;
                Ok((id, rows))
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("truth serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self, SimError> {
        serde_json::from_str(s).map_err(|e| SimError::Truth(e.to_string()))
    }
}

/// Renders the three dataset files in memory, in manifest order.
pub fn render_dataset(ds: &SyntheticDataset) -> Vec<(&'static str, Vec<u8>)> {
    let mut lora = Vec::new();
    write_lora_csv(&mut lora, &ds.packets).expect("write to Vec");
    let mut sensors = Vec::new();
    write_sensor_csv(&mut sensors, &ds.readings).expect("write to Vec");
    vec![
        (LORA_FILE, lora),
        (SENSORS_FILE, sensors),
        (TRUTH_FILE, TruthFile::from_dataset(ds).to_json().into_bytes()),
    ]
}

/// Writes `lora.csv`, `sensors.csv` and `truth.json` into `dir`.
pub fn write_dataset(ds: &SyntheticDataset, dir: &Path) -> Result<Vec<PathBuf>, SimError> {
    let mut manifest = Vec::new();
    for (name, bytes) in render_dataset(ds) {
        let path = dir.join(name);
        let mut out = BufWriter::new(File::create(&path)?);
        out.write_all(&bytes)?;
        out.flush()?;
        manifest.push(path);
    }
    Ok(manifest)
}
