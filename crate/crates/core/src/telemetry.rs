//! Sensor data model, CSV/JSONL ingestion and grid alignment.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("missing column `{0}` in header")]
    MissingColumn(String),
    #[error("{} of {total} rows malformed (limit {:.1}%), first at line {}: {}",
        .malformed.len(), .threshold * 100.0, .malformed[0].line, .malformed[0].reason)]
    TooManyMalformed {
        malformed: Vec<MalformedRow>,
        total: usize,
        threshold: f64,
    },
    #[error("trace is empty")]
    EmptyTrace,
    #[error("period must be positive, got {0}")]
    InvalidPeriod(i64),
    #[error("line {line}: {reason}")]
    Jsonl { line: usize, reason: String },
    #[error("sensor {sensor}: timestamp {timestamp} does not increase")]
    NonMonotonic { sensor: String, timestamp: i64 },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Measured phenomenon. `Other` carries a free-form tag.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum SensorKind {
    AmbientTemp,
    RackInletTemp,
    RackOutletTemp,
    Humidity,
    FanSpeed,
    Other(String),
}

impl fmt::Display for SensorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SensorKind::AmbientTemp => f.write_str("ambient_temp"),
            SensorKind::RackInletTemp => f.write_str("rack_inlet_temp"),
            SensorKind::RackOutletTemp => f.write_str("rack_outlet_temp"),
            SensorKind::Humidity => f.write_str("humidity"),
            SensorKind::FanSpeed => f.write_str("fan_speed"),
            SensorKind::Other(tag) => write!(f, "other:{tag}"),
        }
    }
}

impl From<SensorKind> for String {
    fn from(kind: SensorKind) -> String {
        kind.to_string()
    }
}

impl TryFrom<String> for SensorKind {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        Ok(match s.as_str() {
            "ambient_temp" => SensorKind::AmbientTemp,
            "rack_inlet_temp" => SensorKind::RackInletTemp,
            "rack_outlet_temp" => SensorKind::RackOutletTemp,
            "humidity" => SensorKind::Humidity,
            "fan_speed" => SensorKind::FanSpeed,
            other => match other.strip_prefix("other:") {
                Some(tag) => SensorKind::Other(tag.to_string()),
                None => return Err(format!("unknown sensor kind `{other}`")),
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Height {
    Top,
    Middle,
    Bottom,
}

impl Height {
    pub const ALL: [Height; 3] = [Height::Top, Height::Middle, Height::Bottom];

    pub fn as_str(self) -> &'static str {
        match self {
            Height::Top => "top",
            Height::Middle => "middle",
            Height::Bottom => "bottom",
        }
    }
}

impl FromStr for Height {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "top" => Ok(Height::Top),
            "middle" => Ok(Height::Middle),
            "bottom" => Ok(Height::Bottom),
            _ => Err(format!("unknown height `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Location {
    pub aisle: u32,
    pub rack: u32,
    pub height: Height,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorMeta {
    pub sensor_id: String,
    pub kind: SensorKind,
    #[serde(default)]
    pub location: Option<Location>,
}

impl SensorMeta {
    /// Recovers metadata from the simulator's naming scheme
    /// (`amb-a{aisle}-r{rack}[-{height}]`, `in-a{aisle}-r{rack}-{height}`).
    /// Unrecognised ids become `other:unknown` without a location.
    pub fn infer(sensor_id: &str) -> SensorMeta {
        let parts: Vec<&str> = sensor_id.split('-').collect();
        let parsed = (|| {
            let kind = match *parts.first()? {
                "amb" => SensorKind::AmbientTemp,
                "in" => SensorKind::RackInletTemp,
                "out" => SensorKind::RackOutletTemp,
                _ => return None,
            };
            let aisle = parts.get(1)?.strip_prefix('a')?.parse().ok()?;
            let rack = parts.get(2)?.strip_prefix('r')?.parse().ok()?;
            let height = match parts.get(3) {
                Some(h) => h.parse().ok()?,
                None if kind == SensorKind::AmbientTemp => Height::Middle,
                None => return None,
            };
            if parts.len() > 4 {
                return None;
            }
            Some((kind, Location { aisle, rack, height }))
        })();
        match parsed {
            Some((kind, location)) => SensorMeta {
                sensor_id: sensor_id.to_string(),
                kind,
                location: Some(location),
            },
            None => SensorMeta {
                sensor_id: sensor_id.to_string(),
                kind: SensorKind::Other("unknown".to_string()),
                location: None,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorReading {
    pub sensor_id: String,
    pub timestamp: i64,
    pub value: f64,
    pub fault_flag: Option<bool>,
    /// Deviation from the neighbourhood median, set when the reading was voted faulty.
    pub residual: Option<f64>,
}

impl SensorReading {
    pub fn new(sensor_id: impl Into<String>, timestamp: i64, value: f64) -> Self {
        SensorReading {
            sensor_id: sensor_id.into(),
            timestamp,
            value,
            fault_flag: None,
            residual: None,
        }
    }
}

/// Ground-truth tag attached to a (sensor, timestamp) cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Random,
    Malfunction,
    Bias,
    Drift,
    HotspotAttack,
    CoolingDegradation,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Random => "random",
            Label::Malfunction => "malfunction",
            Label::Bias => "bias",
            Label::Drift => "drift",
            Label::HotspotAttack => "hotspot_attack",
            Label::CoolingDegradation => "cooling_degradation",
        }
    }

    pub fn is_sensor_fault(self) -> bool {
        matches!(self, Label::Random | Label::Malfunction | Label::Bias | Label::Drift)
    }

    pub fn is_attack(self) -> bool {
        matches!(self, Label::HotspotAttack | Label::CoolingDegradation)
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| format!("unknown label `{s}`"))
    }
}

/// Readings sorted by (sensor, timestamp) plus optional ground truth.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledTrace {
    pub readings: Vec<SensorReading>,
    pub labels: BTreeMap<(String, i64), Label>,
}

impl LabeledTrace {
    pub fn is_empty(&self) -> bool {
        self.readings.is_empty()
    }

    /// Sorts by (sensor, timestamp) and drops earlier duplicates.
    /// Returns how many readings were dropped.
    pub fn normalize(&mut self) -> usize {
        // stable: the last occurrence of a key stays last
        self.readings
            .sort_by(|a, b| (&a.sensor_id, a.timestamp).cmp(&(&b.sensor_id, b.timestamp)));
        let before = self.readings.len();
        let mut out: Vec<SensorReading> = Vec::with_capacity(before);
        for r in self.readings.drain(..) {
            match out.last_mut() {
                Some(prev) if prev.sensor_id == r.sensor_id && prev.timestamp == r.timestamp => {
                    *prev = r
                }
                _ => out.push(r),
            }
        }
        self.readings = out;
        before - self.readings.len()
    }

    /// Checks per-sensor strictly increasing timestamps, finite values and
    /// that every label refers to an existing reading.
    pub fn validate(&self) -> Result<(), TelemetryError> {
        for pair in self.readings.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if a.sensor_id == b.sensor_id && b.timestamp <= a.timestamp {
                return Err(TelemetryError::NonMonotonic {
                    sensor: b.sensor_id.clone(),
                    timestamp: b.timestamp,
                });
            }
            if a.sensor_id > b.sensor_id {
                return Err(TelemetryError::NonMonotonic {
                    sensor: b.sensor_id.clone(),
                    timestamp: b.timestamp,
                });
            }
        }
        if let Some(r) = self.readings.iter().find(|r| !r.value.is_finite()) {
            return Err(TelemetryError::Jsonl {
                line: 0,
                reason: format!("non-finite value for {} at {}", r.sensor_id, r.timestamp),
            });
        }
        for (sensor, t) in self.labels.keys() {
            let found = self
                .readings
                .binary_search_by(|r| (r.sensor_id.as_str(), r.timestamp).cmp(&(sensor.as_str(), *t)))
                .is_ok();
            if !found {
                return Err(TelemetryError::Jsonl {
                    line: 0,
                    reason: format!("label for {sensor} at {t} has no reading"),
                });
            }
        }
        Ok(())
    }

    pub fn sensor_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        for r in &self.readings {
            if ids.last() != Some(&r.sensor_id) {
                ids.push(r.sensor_id.clone());
            }
        }
        ids
    }

    pub fn label(&self, sensor: &str, t: i64) -> Option<Label> {
        self.labels.get(&(sensor.to_string(), t)).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnMapping {
    pub timestamp_col: String,
    pub sensor_col: String,
    pub value_col: String,
    #[serde(default)]
    pub label_col: Option<String>,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        ColumnMapping {
            timestamp_col: "timestamp".into(),
            sensor_col: "sensor".into(),
            value_col: "value".into(),
            label_col: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestampFormat {
    #[default]
    Iso8601,
    EpochSeconds,
}

impl TimestampFormat {
    /// Parses to integer seconds, truncating any fractional part.
    pub fn parse(self, raw: &str) -> Result<i64, String> {
        let raw = raw.trim();
        match self {
            TimestampFormat::EpochSeconds => {
                if let Ok(t) = raw.parse::<i64>() {
                    return Ok(t);
                }
                let f: f64 = raw.parse().map_err(|_| format!("bad epoch timestamp `{raw}`"))?;
                if !f.is_finite() {
                    return Err(format!("bad epoch timestamp `{raw}`"));
                }
                Ok(f.trunc() as i64)
            }
            TimestampFormat::Iso8601 => {
                if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(raw) {
                    return Ok(dt.timestamp());
                }
                for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"] {
                    if let Ok(dt) = chrono::NaiveDateTime::parse_from_str(raw, fmt) {
                        return Ok(dt.and_utc().timestamp());
                    }
                }
                Err(format!("bad ISO-8601 timestamp `{raw}`"))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MalformedRow {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct ParsedCsv {
    pub trace: LabeledTrace,
    pub duplicate_count: usize,
    pub malformed: Vec<MalformedRow>,
}

pub const DEFAULT_MALFORMED_THRESHOLD: f64 = 0.10;

pub fn parse_csv<R: Read>(
    input: R,
    mapping: &ColumnMapping,
    format: TimestampFormat,
    malformed_threshold: f64,
) -> Result<ParsedCsv, TelemetryError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(input);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| TelemetryError::MissingColumn(name.to_string()))
    };
    let t_idx = col(&mapping.timestamp_col)?;
    let s_idx = col(&mapping.sensor_col)?;
    let v_idx = col(&mapping.value_col)?;
    let l_idx = mapping.label_col.as_deref().map(col).transpose()?;

    let mut trace = LabeledTrace::default();
    let mut labels: Vec<(String, i64, Label)> = Vec::new();
    let mut malformed = Vec::new();
    let mut total = 0usize;
    for (i, record) in rdr.records().enumerate() {
        total += 1;
        // header is line 1
        let line = i + 2;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                malformed.push(MalformedRow { line, reason: e.to_string() });
                continue;
            }
        };
        let row = (|| {
            let field = |idx: usize| record.get(idx).ok_or_else(|| format!("missing field {idx}"));
            let t = format.parse(field(t_idx)?)?;
            let sensor = field(s_idx)?.trim().to_string();
            if sensor.is_empty() {
                return Err("empty sensor id".to_string());
            }
            let raw_v = field(v_idx)?.trim();
            let v: f64 = raw_v.parse().map_err(|_| format!("bad value `{raw_v}`"))?;
            if !v.is_finite() {
                return Err(format!("non-finite value `{raw_v}`"));
            }
            let label = match l_idx {
                Some(idx) => {
                    let raw = field(idx)?.trim();
                    if raw.is_empty() {
                        None
                    } else {
                        Some(raw.parse::<Label>()?)
                    }
                }
                None => None,
            };
            Ok((t, sensor, v, label))
        })();
        match row {
            Ok((t, sensor, v, label)) => {
                if let Some(label) = label {
                    labels.push((sensor.clone(), t, label));
                }
                trace.readings.push(SensorReading::new(sensor, t, v));
            }
            Err(reason) => malformed.push(MalformedRow { line, reason }),
        }
    }
    if total > 0 && malformed.len() as f64 > malformed_threshold * total as f64 {
        return Err(TelemetryError::TooManyMalformed {
            malformed,
            total,
            threshold: malformed_threshold,
        });
    }
    let duplicate_count = trace.normalize();
    if duplicate_count > 0 {
        log::warn!("{duplicate_count} duplicate (sensor, timestamp) rows replaced by later rows");
    }
    // later rows win for labels too
    for (sensor, t, label) in labels {
        trace.labels.insert((sensor, t), label);
    }
    Ok(ParsedCsv { trace, duplicate_count, malformed })
}

/// One line of the canonical readings stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReadingRecord {
    pub t: i64,
    pub sensor: String,
    pub v: f64,
    pub fault: Option<bool>,
    pub label: Option<Label>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    pub t: i64,
    pub sensor: String,
    pub label: Label,
}

pub fn write_jsonl<W: Write, T: Serialize>(mut out: W, records: impl IntoIterator<Item = T>) -> std::io::Result<()> {
    for rec in records {
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead, T: for<'de> Deserialize<'de>>(input: R) -> Result<Vec<T>, TelemetryError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| TelemetryError::Jsonl {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_readings<W: Write>(out: W, trace: &LabeledTrace) -> std::io::Result<()> {
    write_jsonl(
        out,
        trace.readings.iter().map(|r| ReadingRecord {
            t: r.timestamp,
            sensor: r.sensor_id.clone(),
            v: r.value,
            fault: r.fault_flag,
            label: trace.label(&r.sensor_id, r.timestamp),
        }),
    )
}

pub fn read_readings<R: BufRead>(input: R) -> Result<LabeledTrace, TelemetryError> {
    let records: Vec<ReadingRecord> = read_jsonl(input)?;
    let mut trace = LabeledTrace::default();
    for rec in records {
        if !rec.v.is_finite() {
            return Err(TelemetryError::Jsonl {
                line: 0,
                reason: format!("non-finite value for {}", rec.sensor),
            });
        }
        if let Some(label) = rec.label {
            trace.labels.insert((rec.sensor.clone(), rec.t), label);
        }
        trace.readings.push(SensorReading {
            fault_flag: rec.fault,
            ..SensorReading::new(rec.sensor, rec.t, rec.v)
        });
    }
    trace.normalize();
    Ok(trace)
}

pub fn write_labels<W: Write>(out: W, trace: &LabeledTrace) -> std::io::Result<()> {
    write_jsonl(
        out,
        trace.labels.iter().map(|((sensor, t), label)| LabelRecord {
            t: *t,
            sensor: sensor.clone(),
            label: *label,
        }),
    )
}

pub fn read_labels<R: BufRead>(input: R) -> Result<BTreeMap<(String, i64), Label>, TelemetryError> {
    let records: Vec<LabelRecord> = read_jsonl(input)?;
    Ok(records.into_iter().map(|r| ((r.sensor, r.t), r.label)).collect())
}

/// A grid cell: the carried value and the timestamp it was observed at.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub value: f64,
    pub observed_at: i64,
}

/// Sensors resampled onto a common time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedTable {
    pub grid: Vec<i64>,
    pub period: i64,
    pub sensors: Vec<String>,
    /// `cells[sensor][instant]`; `None` marks a missing cell.
    pub cells: Vec<Vec<Option<Cell>>>,
}

impl AlignedTable {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn sensor_index(&self, id: &str) -> Option<usize> {
        self.sensors.binary_search_by(|s| s.as_str().cmp(id)).ok()
    }

    pub fn value(&self, sensor: usize, instant: usize) -> Option<f64> {
        self.cells[sensor][instant].map(|c| c.value)
    }

    /// The original observations behind the table, one per distinct source.
    pub fn to_trace(&self) -> LabeledTrace {
        let mut trace = LabeledTrace::default();
        for (id, row) in self.sensors.iter().zip(&self.cells) {
            let mut last = None;
            for cell in row.iter().flatten() {
                if last != Some(cell.observed_at) {
                    trace.readings.push(SensorReading::new(id.clone(), cell.observed_at, cell.value));
                    last = Some(cell.observed_at);
                }
            }
        }
        trace
    }
}

/// Resamples every sensor onto `t0, t0+period, ...` by carrying the latest
/// observation forward for at most `max_gap` periods.
pub fn align(trace: &LabeledTrace, period: i64, max_gap: u32) -> Result<AlignedTable, TelemetryError> {
    if period <= 0 {
        return Err(TelemetryError::InvalidPeriod(period));
    }
    if trace.readings.is_empty() {
        return Err(TelemetryError::EmptyTrace);
    }
    let t0 = trace.readings.iter().map(|r| r.timestamp).min().unwrap_or_default();
    let t_end = trace.readings.iter().map(|r| r.timestamp).max().unwrap_or_default();
    let n = ((t_end - t0) / period + 1) as usize;
    let grid: Vec<i64> = (0..n as i64).map(|i| t0 + i * period).collect();
    let reach = i64::from(max_gap) * period;

    let mut by_sensor: BTreeMap<&str, Vec<&SensorReading>> = BTreeMap::new();
    for r in &trace.readings {
        by_sensor.entry(r.sensor_id.as_str()).or_default().push(r);
    }
    let mut sensors = Vec::with_capacity(by_sensor.len());
    let mut cells = Vec::with_capacity(by_sensor.len());
    for (id, mut samples) in by_sensor {
        samples.sort_by_key(|r| r.timestamp);
        let mut row = vec![None; n];
        let mut next = 0;
        let mut current: Option<&SensorReading> = None;
        for (g, &t) in grid.iter().enumerate() {
            while next < samples.len() && samples[next].timestamp <= t {
                current = Some(samples[next]);
                next += 1;
            }
            if let Some(r) = current {
                if t - r.timestamp <= reach {
                    row[g] = Some(Cell { value: r.value, observed_at: r.timestamp });
                }
            }
        }
        sensors.push(id.to_string());
        cells.push(row);
    }
    Ok(AlignedTable { grid, period, sensors, cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv_trace(body: &str) -> ParsedCsv {
        parse_csv(
            body.as_bytes(),
            &ColumnMapping::default(),
            TimestampFormat::Iso8601,
            DEFAULT_MALFORMED_THRESHOLD,
        )
        .unwrap()
    }

    #[test]
    fn iso_row_with_identity_mapping() {
        let p = csv_trace("timestamp,sensor,value\n2020-08-05T12:00:00Z,amb-a1-r04-top,23.4\n");
        assert_eq!(p.trace.readings, vec![SensorReading::new("amb-a1-r04-top", 1_596_628_800, 23.4)]);
        assert_eq!(p.duplicate_count, 0);
    }

    #[test]
    fn empty_file_with_header() {
        let p = csv_trace("timestamp,sensor,value\n");
        assert!(p.trace.is_empty());
    }

    #[test]
    fn duplicate_keeps_last() {
        let p = csv_trace(
            "timestamp,sensor,value\n2020-08-05T12:00:00Z,s1,20.0\n2020-08-05T12:00:00Z,s1,21.0\n",
        );
        assert_eq!(p.trace.readings.len(), 1);
        assert_eq!(p.trace.readings[0].value, 21.0);
        assert_eq!(p.duplicate_count, 1);
    }

    #[test]
    fn missing_column_is_reported() {
        let err = parse_csv(
            "time,sensor,value\n".as_bytes(),
            &ColumnMapping::default(),
            TimestampFormat::Iso8601,
            0.1,
        )
        .unwrap_err();
        assert!(matches!(err, TelemetryError::MissingColumn(c) if c == "timestamp"));
    }

    #[test]
    fn malformed_rows_tolerated_below_threshold() {
        let mut body = String::from("timestamp,sensor,value\n");
        for i in 0..20 {
            body.push_str(&format!("{},s1,{}.0\n", 1000 + i * 60, i));
        }
        body.push_str("1999,s1,oops\n");
        let p = parse_csv(body.as_bytes(), &ColumnMapping::default(), TimestampFormat::EpochSeconds, 0.1).unwrap();
        assert_eq!(p.trace.readings.len(), 20);
        assert_eq!(p.malformed.len(), 1);
        assert_eq!(p.malformed[0].line, 22);

        let body = "timestamp,sensor,value\n1,s,1\n2,s,x\n3,s,NaN\n";
        let err = parse_csv(body.as_bytes(), &ColumnMapping::default(), TimestampFormat::EpochSeconds, 0.1)
            .unwrap_err();
        assert!(matches!(err, TelemetryError::TooManyMalformed { ref malformed, total: 3, .. } if malformed.len() == 2));
    }

    #[test]
    fn custom_mapping_with_labels_and_quotes() {
        let mapping = ColumnMapping {
            timestamp_col: "ts".into(),
            sensor_col: "node".into(),
            value_col: "temp".into(),
            label_col: Some("tag".into()),
        };
        let body = "node,temp,ts,tag\n\"rack,1\",22.5,120,bias\ns2,21.0,60,\n";
        let p = parse_csv(body.as_bytes(), &mapping, TimestampFormat::EpochSeconds, 0.1).unwrap();
        assert_eq!(p.trace.sensor_ids(), vec!["rack,1".to_string(), "s2".to_string()]);
        assert_eq!(p.trace.label("rack,1", 120), Some(Label::Bias));
        assert_eq!(p.trace.label("s2", 60), None);
    }

    #[test]
    fn sub_second_timestamps_truncate() {
        assert_eq!(TimestampFormat::Iso8601.parse("2020-08-05T12:00:00.900Z"), Ok(1_596_628_800));
        assert_eq!(TimestampFormat::Iso8601.parse("2020-08-05 12:00:01"), Ok(1_596_628_801));
        assert_eq!(TimestampFormat::EpochSeconds.parse("12.7"), Ok(12));
    }

    #[test]
    fn align_on_grid_is_identity() {
        let mut trace = LabeledTrace::default();
        for i in 0..5 {
            trace.readings.push(SensorReading::new("s", 100 + 10 * i, i as f64));
        }
        let table = align(&trace, 10, 2).unwrap();
        let values: Vec<_> = (0..5).map(|i| table.value(0, i)).collect();
        assert_eq!(values, vec![Some(0.0), Some(1.0), Some(2.0), Some(3.0), Some(4.0)]);
    }

    #[test]
    fn align_carries_forward_up_to_max_gap() {
        let mut trace = LabeledTrace::default();
        trace.readings.push(SensorReading::new("a", 0, 1.0));
        trace.readings.push(SensorReading::new("b", 5, 2.0));
        let table = align(&trace, 1, 2).unwrap();
        let a: Vec<_> = (0..6).map(|i| table.value(0, i)).collect();
        assert_eq!(a, vec![Some(1.0), Some(1.0), Some(1.0), None, None, None]);
    }

    #[test]
    fn align_disjoint_ranges_make_union_grid() {
        let mut trace = LabeledTrace::default();
        for t in 0..3 {
            trace.readings.push(SensorReading::new("a", t * 60, 1.0));
            trace.readings.push(SensorReading::new("b", (t + 5) * 60, 2.0));
        }
        trace.normalize();
        let table = align(&trace, 60, 0).unwrap();
        assert_eq!(table.len(), 8);
        let present = |s: usize| (0..8).map(|i| table.value(s, i).is_some()).collect::<Vec<_>>();
        assert_eq!(present(0), vec![true, true, true, false, false, false, false, false]);
        assert_eq!(present(1), vec![false, false, false, false, false, true, true, true]);
    }

    #[test]
    fn align_rejects_empty_and_bad_period() {
        assert!(matches!(align(&LabeledTrace::default(), 60, 2), Err(TelemetryError::EmptyTrace)));
        let mut trace = LabeledTrace::default();
        trace.readings.push(SensorReading::new("a", 0, 1.0));
        assert!(matches!(align(&trace, 0, 2), Err(TelemetryError::InvalidPeriod(0))));
    }

    #[test]
    fn infer_simulator_ids() {
        let m = SensorMeta::infer("in-a1-r08-bottom");
        assert_eq!(m.kind, SensorKind::RackInletTemp);
        assert_eq!(m.location, Some(Location { aisle: 1, rack: 8, height: Height::Bottom }));
        let m = SensorMeta::infer("amb-a0-r04");
        assert_eq!(m.location.unwrap().height, Height::Middle);
        let m = SensorMeta::infer("dad_temp_3");
        assert_eq!(m.kind, SensorKind::Other("unknown".into()));
        assert!(m.location.is_none());
    }

    #[test]
    fn validate_flags_non_monotonic() {
        let trace = LabeledTrace {
            readings: vec![SensorReading::new("a", 5, 1.0), SensorReading::new("a", 5, 2.0)],
            labels: BTreeMap::new(),
        };
        assert!(trace.validate().is_err());
    }

    #[test]
    fn kind_serde_roundtrip() {
        let kinds = [SensorKind::FanSpeed, SensorKind::Other("pdu".into())];
        let json = serde_json::to_string(&kinds).unwrap();
        assert_eq!(json, r#"["fan_speed","other:pdu"]"#);
        let back: Vec<SensorKind> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, kinds);
    }
}
