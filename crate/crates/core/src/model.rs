//! Shared domain types: timestamps, device identifiers, the device taxonomy
//! and the two row types of the campus datasets.
//!
//! Timestamps carry no timezone in the source data and are interpreted as UTC.
//! A quantity that a device does *not* monitor is serialized as `nan`; in
//! memory it is simply absent (`None`).

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Datelike, NaiveDate, NaiveTime, Timelike};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MILLIS_PER_MINUTE: i64 = 60_000;
pub const MILLIS_PER_DAY: i64 = 86_400_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("malformed timestamp `{0}`")]
    MalformedTimestamp(String),
    #[error("invalid calendar value in `{0}`")]
    InvalidCalendar(String),
    #[error("invalid DevEUI `{0}`: expected 16 hex characters")]
    InvalidDevEui(String),
    #[error("ambiguous device kind for field set {0:?}")]
    AmbiguousKind(Vec<Field>),
    #[error("{field} out of range [{lo},{hi}]: {value}")]
    OutOfRange {
        field: &'static str,
        lo: f64,
        hi: f64,
        value: f64,
    },
    #[error("unknown field `{0}`")]
    UnknownField(String),
}

/// Milliseconds since the Unix epoch, UTC. Serializes as ISO-8601.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Timestamp(pub i64);

impl TryFrom<String> for Timestamp {
    type Error = ModelError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Timestamp::parse_iso8601(&s)
    }
}

impl From<Timestamp> for String {
    fn from(ts: Timestamp) -> String {
        ts.to_iso8601()
    }
}

impl Timestamp {
    pub fn from_millis(epoch_millis: i64) -> Self {
        Timestamp(epoch_millis)
    }

    pub fn millis(self) -> i64 {
        self.0
    }

    /// Parses the dataset pair `yyyy.mm.dd` / `hh.mm.ss.msmsms`.
    pub fn parse(date_str: &str, time_str: &str) -> Result<Self, ModelError> {
        parse_timestamp(date_str, time_str)
    }

    /// Parses the single-column form `yyyy.mm.dd hh.mm.ss.msmsms`.
    pub fn parse_joined(s: &str) -> Result<Self, ModelError> {
        let (date, time) = s
            .split_once(' ')
            .ok_or_else(|| ModelError::MalformedTimestamp(s.to_string()))?;
        parse_timestamp(date, time)
    }

    pub fn format(self) -> (String, String) {
        format_timestamp(self)
    }

    pub fn format_joined(self) -> String {
        let (d, t) = format_timestamp(self);
        format!("{d} {t}")
    }

    /// ISO-8601 with millisecond precision and a `Z` suffix.
    pub fn to_iso8601(self) -> String {
        let dt = self.datetime();
        format!(
            "{:04}-{:02}-{:02}T{:02}:{:02}:{:02}.{:03}Z",
            dt.year(),
            dt.month(),
            dt.day(),
            dt.hour(),
            dt.minute(),
            dt.second(),
            dt.nanosecond() / 1_000_000
        )
    }

    pub fn parse_iso8601(s: &str) -> Result<Self, ModelError> {
        DateTime::parse_from_rfc3339(s)
            .map(|dt| Timestamp(dt.timestamp_millis()))
            .map_err(|_| ModelError::MalformedTimestamp(s.to_string()))
    }

    /// Milliseconds elapsed since the most recent UTC midnight.
    pub fn time_of_day_millis(self) -> i64 {
        self.0.rem_euclid(MILLIS_PER_DAY)
    }

    /// Monday = 0 .. Sunday = 6.
    pub fn weekday(self) -> u32 {
        self.datetime().weekday().num_days_from_monday()
    }

    pub fn offset(self, millis: i64) -> Self {
        Timestamp(self.0 + millis)
    }

    fn datetime(self) -> chrono::NaiveDateTime {
        DateTime::from_timestamp_millis(self.0)
            .expect("timestamp within chrono range")
            .naive_utc()
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.format_joined())
    }
}

fn digits_and_dots(s: &str, pattern: &str) -> bool {
    s.len() == pattern.len()
        && s.bytes().zip(pattern.bytes()).all(|(c, p)| match p {
            b'd' => c.is_ascii_digit(),
            other => c == other,
        })
}

pub fn parse_timestamp(date_str: &str, time_str: &str) -> Result<Timestamp, ModelError> {
    let joined = || format!("{date_str} {time_str}");
    if !digits_and_dots(date_str, "dddd.dd.dd") || !digits_and_dots(time_str, "dd.dd.dd.ddd") {
        return Err(ModelError::MalformedTimestamp(joined()));
    }
    let num = |s: &str| s.parse::<u32>().expect("validated digits");
    let date = NaiveDate::from_ymd_opt(
        num(&date_str[0..4]) as i32,
        num(&date_str[5..7]),
        num(&date_str[8..10]),
    )
    .ok_or_else(|| ModelError::InvalidCalendar(joined()))?;
    let (h, m, s, ms) = (
        num(&time_str[0..2]),
        num(&time_str[3..5]),
        num(&time_str[6..8]),
        num(&time_str[9..12]),
    );
    // chrono accepts second 60 / millis ≥ 1000 as leap seconds; the dataset does not.
    if s > 59 {
        return Err(ModelError::InvalidCalendar(joined()));
    }
    let time = NaiveTime::from_hms_milli_opt(h, m, s, ms)
        .ok_or_else(|| ModelError::InvalidCalendar(joined()))?;
    Ok(Timestamp(date.and_time(time).and_utc().timestamp_millis()))
}

pub fn format_timestamp(ts: Timestamp) -> (String, String) {
    let dt = ts.datetime();
    (
        format!("{:04}.{:02}.{:02}", dt.year(), dt.month(), dt.day()),
        format!(
            "{:02}.{:02}.{:02}.{:03}",
            dt.hour(),
            dt.minute(),
            dt.second(),
            dt.nanosecond() / 1_000_000
        ),
    )
}

/// 64-bit extended unique identifier, stored as 16 lowercase hex characters.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DeviceId(String);

impl DeviceId {
    pub fn new(s: &str) -> Result<Self, ModelError> {
        let lower = s.to_ascii_lowercase();
        if lower.len() == 16 && lower.bytes().all(|b| b.is_ascii_hexdigit()) {
            Ok(DeviceId(lower))
        } else {
            Err(ModelError::InvalidDevEui(s.to_string()))
        }
    }

    pub fn from_u64(v: u64) -> Self {
        DeviceId(format!("{v:016x}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl FromStr for DeviceId {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DeviceId::new(s)
    }
}

impl TryFrom<String> for DeviceId {
    type Error = ModelError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        DeviceId::new(&s)
    }
}

impl From<DeviceId> for String {
    fn from(id: DeviceId) -> String {
        id.0
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Measured quantities, in sensor CSV column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Co2,
    Temperature,
    Humidity,
    Light,
    Motion,
    SoundAvg,
    SoundPeak,
    Pressure,
    Moisture,
    Battery,
}

impl Field {
    pub const ALL: [Field; 10] = [
        Field::Co2,
        Field::Temperature,
        Field::Humidity,
        Field::Light,
        Field::Motion,
        Field::SoundAvg,
        Field::SoundPeak,
        Field::Pressure,
        Field::Moisture,
        Field::Battery,
    ];

    /// Fields every device kind reports.
    pub const SHARED: [Field; 3] = [Field::Temperature, Field::Humidity, Field::Battery];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Field::Co2 => "co2",
            Field::Temperature => "temperature",
            Field::Humidity => "humidity",
            Field::Light => "light",
            Field::Motion => "motion",
            Field::SoundAvg => "sound_avg",
            Field::SoundPeak => "sound_peak",
            Field::Pressure => "pressure",
            Field::Moisture => "moisture",
            Field::Battery => "battery",
        }
    }

    pub fn is_shared(self) -> bool {
        Field::SHARED.contains(&self)
    }
}

impl FromStr for Field {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Field::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| ModelError::UnknownField(s.to_string()))
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DeviceKind {
    Co2,
    Sound,
    Moisture,
}

impl DeviceKind {
    pub const ALL: [DeviceKind; 3] = [DeviceKind::Co2, DeviceKind::Sound, DeviceKind::Moisture];

    /// Kind-specific fields, excluding the shared temperature/humidity/battery.
    pub fn specific_fields(self) -> &'static [Field] {
        match self {
            DeviceKind::Co2 => &[Field::Co2, Field::Motion, Field::Light],
            DeviceKind::Sound => &[Field::SoundAvg, Field::SoundPeak, Field::Motion, Field::Light],
            DeviceKind::Moisture => &[Field::Pressure, Field::Moisture],
        }
    }

    /// Every field a device of this kind reports, in CSV column order.
    pub fn fields(self) -> Vec<Field> {
        Field::ALL
            .into_iter()
            .filter(|f| f.is_shared() || self.specific_fields().contains(f))
            .collect()
    }
}

impl fmt::Display for DeviceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DeviceKind::Co2 => "co2",
            DeviceKind::Sound => "sound",
            DeviceKind::Moisture => "moisture",
        })
    }
}

/// Infers the device kind from the set of fields a reading carries.
///
/// A kind matches when its specific fields cover every non-shared field
/// present. Exactly one kind must match.
pub fn kind_of(present: &BTreeSet<Field>) -> Result<DeviceKind, ModelError> {
    let specific: Vec<Field> = present.iter().copied().filter(|f| !f.is_shared()).collect();
    let mut matches = DeviceKind::ALL
        .into_iter()
        .filter(|k| specific.iter().all(|f| k.specific_fields().contains(f)));
    match (specific.is_empty(), matches.next(), matches.next()) {
        (false, Some(k), None) => Ok(k),
        _ => Err(ModelError::AmbiguousKind(present.iter().copied().collect())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceInfo {
    pub id: DeviceId,
    pub kind: DeviceKind,
    /// `(x, y)` in meters; the public export omits coordinates.
    pub coord: Option<(f64, f64)>,
    /// Mounting height in meters. Metadata only.
    pub height: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GatewayInfo {
    pub coord: Option<(f64, f64)>,
}

/// One row of the sensor readings dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorReading {
    pub ts: Timestamp,
    pub device: DeviceId,
    values: [Option<f64>; 10],
}

impl SensorReading {
    /// Returns `None` when no quantity is present.
    pub fn new(ts: Timestamp, device: DeviceId, values: [Option<f64>; 10]) -> Option<Self> {
        values
            .iter()
            .any(Option::is_some)
            .then_some(SensorReading { ts, device, values })
    }

    pub fn from_fields(
        ts: Timestamp,
        device: DeviceId,
        fields: impl IntoIterator<Item = (Field, f64)>,
    ) -> Option<Self> {
        let mut values = [None; 10];
        for (f, v) in fields {
            values[f.index()] = Some(v);
        }
        SensorReading::new(ts, device, values)
    }

    pub fn get(&self, field: Field) -> Option<f64> {
        self.values[field.index()]
    }

    pub fn values(&self) -> &[Option<f64>; 10] {
        &self.values
    }

    pub fn present_fields(&self) -> BTreeSet<Field> {
        Field::ALL
            .into_iter()
            .filter(|f| self.values[f.index()].is_some())
            .collect()
    }

    pub fn kind(&self) -> Result<DeviceKind, ModelError> {
        kind_of(&self.present_fields())
    }
}

pub const CHANNEL_RANGE: (u8, u8) = (0, 6);
pub const PORT_RANGE: (u8, u8) = (1, 12);
pub const LSNR_RANGE: (f64, f64) = (-22.5, 10.0);
/// Printed in descending order in the source table; stored ascending.
pub const RSSI_RANGE: (f64, f64) = (-120.0, -53.0);
pub const FCNT_MODULUS: u32 = 65_536;

/// One row of the LoRa parameters dataset. Every value built through
/// [`LoraPacketMeta::new`] satisfies the documented parameter ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPacketMeta {
    ts: Timestamp,
    device: DeviceId,
    channel: u8,
    lsnr: f64,
    port: u8,
    rfch: u8,
    rssi: f64,
    fcnt: u16,
}

fn check(field: &'static str, value: f64, lo: f64, hi: f64) -> Result<(), ModelError> {
    if value >= lo && value <= hi {
        Ok(())
    } else {
        Err(ModelError::OutOfRange { field, lo, hi, value })
    }
}

impl LoraPacketMeta {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ts: Timestamp,
        device: DeviceId,
        channel: i64,
        lsnr: f64,
        port: i64,
        rfch: i64,
        rssi: f64,
        fcnt: i64,
    ) -> Result<Self, ModelError> {
        check("channel", channel as f64, CHANNEL_RANGE.0 as f64, CHANNEL_RANGE.1 as f64)?;
        check("lsnr", lsnr, LSNR_RANGE.0, LSNR_RANGE.1)?;
        check("port", port as f64, PORT_RANGE.0 as f64, PORT_RANGE.1 as f64)?;
        check("rfch", rfch as f64, 0.0, 1.0)?;
        check("rssi", rssi, RSSI_RANGE.0, RSSI_RANGE.1)?;
        check("fcnt", fcnt as f64, 0.0, (FCNT_MODULUS - 1) as f64)?;
        Ok(LoraPacketMeta {
            ts,
            device,
            channel: channel as u8,
            lsnr,
            port: port as u8,
            rfch: rfch as u8,
            rssi,
            fcnt: fcnt as u16,
        })
    }

    /// Skips range validation. Only for exercising validators in tests.
    #[cfg(test)]
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new_unchecked(
        ts: Timestamp,
        device: DeviceId,
        channel: u8,
        lsnr: f64,
        port: u8,
        rfch: u8,
        rssi: f64,
        fcnt: u16,
    ) -> Self {
        LoraPacketMeta { ts, device, channel, lsnr, port, rfch, rssi, fcnt }
    }

    /// Re-checks the parameter ranges.
    pub fn validate(&self) -> Result<(), ModelError> {
        LoraPacketMeta::new(
            self.ts,
            self.device.clone(),
            self.channel as i64,
            self.lsnr,
            self.port as i64,
            self.rfch as i64,
            self.rssi,
            self.fcnt as i64,
        )
        .map(|_| ())
    }

    pub fn ts(&self) -> Timestamp {
        self.ts
    }
    pub fn device(&self) -> &DeviceId {
        &self.device
    }
    pub fn channel(&self) -> u8 {
        self.channel
    }
    pub fn lsnr(&self) -> f64 {
        self.lsnr
    }
    pub fn port(&self) -> u8 {
        self.port
    }
    pub fn rfch(&self) -> u8 {
        self.rfch
    }
    pub fn rssi(&self) -> f64 {
        self.rssi
    }
    pub fn fcnt(&self) -> u16 {
        self.fcnt
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_dataset_timestamp() {
        let ts = parse_timestamp("2020.02.01", "13.45.07.123").unwrap();
        assert_eq!(ts.to_iso8601(), "2020-02-01T13:45:07.123Z");
        assert_eq!(ts.millis(), 1_580_564_707_123);
    }

    #[test]
    fn parses_midnight() {
        let ts = parse_timestamp("2020.01.01", "00.00.00.000").unwrap();
        assert_eq!(ts.millis(), 1_577_836_800_000);
        assert_eq!(ts.time_of_day_millis(), 0);
    }

    #[test]
    fn rejects_bad_calendar_and_shape() {
        assert!(matches!(
            parse_timestamp("2020.13.01", "00.00.00.000"),
            Err(ModelError::InvalidCalendar(_))
        ));
        assert!(matches!(
            parse_timestamp("2020.01.01", "00.00.61.000"),
            Err(ModelError::InvalidCalendar(_))
        ));
        assert!(matches!(
            parse_timestamp("2020.02.30", "00.00.00.000"),
            Err(ModelError::InvalidCalendar(_))
        ));
        assert!(matches!(
            parse_timestamp("2020-01-01", "00.00.00.000"),
            Err(ModelError::MalformedTimestamp(_))
        ));
        assert!(matches!(
            parse_timestamp("2020.01.01", "00.00.00.00"),
            Err(ModelError::MalformedTimestamp(_))
        ));
    }

    #[test]
    fn formats_known_instants() {
        let ts = parse_timestamp("2020.02.01", "13.45.07.123").unwrap();
        assert_eq!(format_timestamp(ts), ("2020.02.01".into(), "13.45.07.123".into()));
        assert_eq!(
            format_timestamp(Timestamp(0)),
            ("1970.01.01".into(), "00.00.00.000".into())
        );
        let ts = parse_timestamp("2021.06.01", "23.59.59.999").unwrap();
        assert_eq!(format_timestamp(ts), ("2021.06.01".into(), "23.59.59.999".into()));
    }

    #[test]
    fn iso_round_trip() {
        let ts = parse_timestamp("2021.06.01", "23.59.59.999").unwrap();
        assert_eq!(Timestamp::parse_iso8601(&ts.to_iso8601()).unwrap(), ts);
    }

    #[test]
    fn device_id_is_case_insensitive() {
        let a = DeviceId::new("A1B2C3D4E5F60718").unwrap();
        let b = DeviceId::new("a1b2c3d4e5f60718").unwrap();
        assert_eq!(a, b);
        assert!(DeviceId::new("a1b2c3d4e5f6071").is_err());
        assert!(DeviceId::new("a1b2c3d4e5f6071g").is_err());
    }

    #[test]
    fn kind_inference() {
        use Field::*;
        let set = |fs: &[Field]| fs.iter().copied().collect::<BTreeSet<_>>();
        assert_eq!(
            kind_of(&set(&[Co2, Motion, Light, Temperature, Humidity, Battery])).unwrap(),
            DeviceKind::Co2
        );
        assert_eq!(
            kind_of(&set(&[Pressure, Moisture, Temperature, Humidity, Battery])).unwrap(),
            DeviceKind::Moisture
        );
        assert_eq!(
            kind_of(&set(&[SoundAvg, SoundPeak, Motion, Light, Battery])).unwrap(),
            DeviceKind::Sound
        );
        assert!(matches!(
            kind_of(&set(&[Temperature, Humidity, Battery])),
            Err(ModelError::AmbiguousKind(_))
        ));
        // motion+light alone fits both CO2 and sound devices
        assert!(kind_of(&set(&[Motion, Light])).is_err());
        assert!(kind_of(&set(&[Co2, Pressure])).is_err());
    }

    #[test]
    fn kind_signatures_are_pairwise_distinguishable() {
        for a in DeviceKind::ALL {
            let full: BTreeSet<Field> = a.fields().into_iter().collect();
            assert_eq!(kind_of(&full).unwrap(), a);
            for b in DeviceKind::ALL {
                if a != b {
                    assert_ne!(a.specific_fields(), b.specific_fields());
                }
            }
        }
    }

    #[test]
    fn lora_meta_enforces_ranges() {
        let dev = DeviceId::new("a1b2c3d4e5f60718").unwrap();
        let ts = Timestamp(0);
        assert!(LoraPacketMeta::new(ts, dev.clone(), 3, -7.5, 2, 0, -90.0, 41).is_ok());
        assert!(LoraPacketMeta::new(ts, dev.clone(), 7, -7.5, 2, 0, -90.0, 41).is_err());
        assert!(LoraPacketMeta::new(ts, dev.clone(), 3, -22.6, 2, 0, -90.0, 41).is_err());
        assert!(LoraPacketMeta::new(ts, dev.clone(), 3, -7.5, 0, 0, -90.0, 41).is_err());
        assert!(LoraPacketMeta::new(ts, dev.clone(), 3, -7.5, 2, 2, -90.0, 41).is_err());
        assert!(LoraPacketMeta::new(ts, dev.clone(), 3, -7.5, 2, 0, -130.0, 41).is_err());
        assert!(LoraPacketMeta::new(ts, dev.clone(), 3, -7.5, 2, 0, -52.0, 41).is_err());
        assert!(LoraPacketMeta::new(ts, dev.clone(), 3, -7.5, 2, 0, -90.0, 65_536).is_err());
        let bad = LoraPacketMeta::new_unchecked(ts, dev, 9, 0.0, 2, 0, -90.0, 1);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn reading_requires_a_measurement() {
        let dev = DeviceId::from_u64(1);
        assert!(SensorReading::new(Timestamp(0), dev.clone(), [None; 10]).is_none());
        let r = SensorReading::from_fields(Timestamp(0), dev, [(Field::Co2, 512.0)]).unwrap();
        assert_eq!(r.get(Field::Co2), Some(512.0));
        assert_eq!(r.get(Field::Light), None);
    }

    proptest! {
        #[test]
        fn textual_round_trip(
            y in 1970i32..2100, mo in 1u32..=12, d in 1u32..=28,
            h in 0u32..24, mi in 0u32..60, s in 0u32..60, ms in 0u32..1000,
        ) {
            let date = format!("{y:04}.{mo:02}.{d:02}");
            let time = format!("{h:02}.{mi:02}.{s:02}.{ms:03}");
            let ts = parse_timestamp(&date, &time).unwrap();
            prop_assert_eq!(format_timestamp(ts), (date, time));
        }

        #[test]
        fn millis_round_trip(ms in 0i64..4_102_444_800_000) {
            let ts = Timestamp(ms);
            let (d, t) = format_timestamp(ts);
            prop_assert_eq!(parse_timestamp(&d, &t).unwrap(), ts);
        }
    }
}
