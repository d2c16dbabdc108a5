//! Smart-meter telemetry ingestion and sliding-window segmentation.
//!
//! Telemetry rows are keyed by `customer_id` and carry an ISO-8601 UTC
//! timestamp plus three-phase voltages, currents, active power and power
//! factor. All channels are brought onto one hourly cadence by keeping the
//! last reading seen within each hour.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime, SecondsFormat, Utc};

use crate::error::{NtlError, Result};

pub const SECONDS_PER_HOUR: i64 = 3600;
pub const SECONDS_PER_DAY: i64 = 86_400;

/// Minimum share of the expected hourly points a window must contain.
pub const WINDOW_COMPLETENESS: f64 = 0.5;

pub const TELEMETRY_HEADER: [&str; 10] = [
    "customer_id",
    "timestamp",
    "ua",
    "ub",
    "uc",
    "ia",
    "ib",
    "ic",
    "active_power",
    "power_factor",
];

pub const META_HEADER: [&str; 4] = ["customer_id", "rated_voltage", "contracted_power", "label"];

/// Ground-truth class of a customer or sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Normal,
    Ntl,
    Unlabeled,
}

impl Label {
    /// Class index used by the classifier (0 = normal, 1 = NTL).
    pub fn class_index(self) -> Option<usize> {
        match self {
            Label::Normal => Some(0),
            Label::Ntl => Some(1),
            Label::Unlabeled => None,
        }
    }

    pub fn from_class_index(idx: usize) -> Label {
        if idx == 1 {
            Label::Ntl
        } else {
            Label::Normal
        }
    }

    pub fn to_byte(self) -> u8 {
        match self {
            Label::Normal => 0,
            Label::Ntl => 1,
            Label::Unlabeled => 2,
        }
    }

    pub fn from_byte(b: u8) -> Option<Label> {
        match b {
            0 => Some(Label::Normal),
            1 => Some(Label::Ntl),
            2 => Some(Label::Unlabeled),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Normal => "normal",
            Label::Ntl => "ntl",
            Label::Unlabeled => "unlabeled",
        })
    }
}

impl FromStr for Label {
    type Err = NtlError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" => Ok(Label::Normal),
            "ntl" => Ok(Label::Ntl),
            "unlabeled" => Ok(Label::Unlabeled),
            other => Err(NtlError::Format(format!("unknown label `{other}`"))),
        }
    }
}

/// One telemetry record. `None` marks a missing or unusable cell.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MeterReading {
    /// UTC seconds since the Unix epoch.
    pub timestamp: i64,
    pub ua: Option<f64>,
    pub ub: Option<f64>,
    pub uc: Option<f64>,
    pub ia: Option<f64>,
    pub ib: Option<f64>,
    pub ic: Option<f64>,
    /// Kilowatts.
    pub active_power: Option<f64>,
    pub power_factor: Option<f64>,
}

impl MeterReading {
    pub fn empty(timestamp: i64) -> Self {
        MeterReading { timestamp, ..Default::default() }
    }

    pub fn voltages(&self) -> [Option<f64>; 3] {
        [self.ua, self.ub, self.uc]
    }

    pub fn currents(&self) -> [Option<f64>; 3] {
        [self.ia, self.ib, self.ic]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CustomerMeta {
    pub customer_id: String,
    /// Volts.
    pub rated_voltage: f64,
    /// Kilovolt-amperes.
    pub contracted_power: f64,
    pub label: Label,
}

impl CustomerMeta {
    pub fn new(
        customer_id: impl Into<String>,
        rated_voltage: f64,
        contracted_power: f64,
        label: Label,
    ) -> Result<Self> {
        let customer_id = customer_id.into();
        if !(rated_voltage > 0.0 && rated_voltage.is_finite()) {
            return Err(NtlError::InvalidMeta {
                customer: customer_id,
                reason: format!("rated_voltage must be positive, got {rated_voltage}"),
            });
        }
        if !(contracted_power > 0.0 && contracted_power.is_finite()) {
            return Err(NtlError::InvalidMeta {
                customer: customer_id,
                reason: format!("contracted_power must be positive, got {contracted_power}"),
            });
        }
        Ok(CustomerMeta { customer_id, rated_voltage, contracted_power, label })
    }
}

/// A customer's metadata plus its time-ascending readings.
#[derive(Debug, Clone, PartialEq)]
pub struct CustomerSeries {
    pub meta: CustomerMeta,
    pub readings: Vec<MeterReading>,
}

/// A fixed-length slice of one customer's series.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub customer_id: String,
    pub start: i64,
    /// Exclusive end.
    pub end: i64,
    pub readings: Vec<MeterReading>,
    /// Window length in hours.
    pub expected_count: usize,
}

/// Result of parsing a fleet: the series plus non-fatal diagnostics.
#[derive(Debug, Clone, Default)]
pub struct Fleet {
    pub series: Vec<CustomerSeries>,
    pub diagnostics: Vec<String>,
}

pub fn parse_timestamp(s: &str) -> Result<i64> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Ok(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M"] {
        if let Ok(naive) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(naive.and_utc().timestamp());
        }
    }
    Err(NtlError::Format(format!("bad timestamp `{s}`")))
}

pub fn format_timestamp(ts: i64) -> String {
    DateTime::<Utc>::from_timestamp(ts, 0)
        .map(|dt| dt.to_rfc3339_opts(SecondsFormat::Secs, true))
        .unwrap_or_else(|| ts.to_string())
}

fn parse_cell(cell: Option<&str>) -> Option<f64> {
    let v: f64 = cell?.trim().parse().ok()?;
    v.is_finite().then_some(v)
}

fn non_negative(v: Option<f64>) -> Option<f64> {
    v.filter(|x| *x >= 0.0)
}

fn check_header(headers: &csv::StringRecord, expected: &[&str], what: &str) -> Result<()> {
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got != expected {
        return Err(NtlError::Format(format!(
            "{what} header mismatch: expected `{}`, got `{}`",
            expected.join(","),
            got.join(",")
        )));
    }
    Ok(())
}

pub fn parse_meta<R: Read>(meta_csv: R) -> Result<Vec<CustomerMeta>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(meta_csv);
    check_header(rdr.headers()?, &META_HEADER, "meta")?;
    let mut out: Vec<CustomerMeta> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for rec in rdr.records() {
        let rec = rec?;
        let id = rec.get(0).unwrap_or("").trim().to_string();
        if !seen.insert(id.clone()) {
            return Err(NtlError::DuplicateCustomer(id));
        }
        let rated = parse_cell(rec.get(1)).unwrap_or(f64::NAN);
        let contracted = parse_cell(rec.get(2)).unwrap_or(f64::NAN);
        let label: Label = rec.get(3).unwrap_or("").parse()?;
        out.push(CustomerMeta::new(id, rated, contracted, label)?);
    }
    Ok(out)
}

/// Parse telemetry and metadata CSV streams into per-customer series.
///
/// Malformed or out-of-range numeric cells become missing fields. Rows for
/// customers absent from the metadata are dropped and reported in
/// `Fleet::diagnostics`. Readings falling in the same hour collapse to the
/// last one, stamped at the start of that hour.
pub fn parse_fleet<R1: Read, R2: Read>(telemetry_csv: R1, meta_csv: R2) -> Result<Fleet> {
    let metas = parse_meta(meta_csv)?;
    let index: HashMap<String, usize> =
        metas.iter().enumerate().map(|(i, m)| (m.customer_id.clone(), i)).collect();
    let mut readings: Vec<Vec<MeterReading>> = vec![Vec::new(); metas.len()];
    let mut last_raw: Vec<Option<i64>> = vec![None; metas.len()];
    let mut diagnostics = Vec::new();
    let mut unknown: HashMap<String, usize> = HashMap::new();

    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(telemetry_csv);
    check_header(rdr.headers()?, &TELEMETRY_HEADER, "telemetry")?;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let id = rec.get(0).unwrap_or("").trim();
        let Some(&ci) = index.get(id) else {
            *unknown.entry(id.to_string()).or_default() += 1;
            continue;
        };
        let raw_ts = parse_timestamp(rec.get(1).unwrap_or(""))
            .map_err(|e| NtlError::Format(format!("telemetry line {line}: {e}")))?;
        if let Some(prev) = last_raw[ci] {
            if raw_ts < prev {
                return Err(NtlError::NonMonotoneTimestamp { customer: id.to_string(), row: line });
            }
        }
        last_raw[ci] = Some(raw_ts);
        let hour = raw_ts.div_euclid(SECONDS_PER_HOUR) * SECONDS_PER_HOUR;
        let reading = MeterReading {
            timestamp: hour,
            ua: non_negative(parse_cell(rec.get(2))),
            ub: non_negative(parse_cell(rec.get(3))),
            uc: non_negative(parse_cell(rec.get(4))),
            ia: non_negative(parse_cell(rec.get(5))),
            ib: non_negative(parse_cell(rec.get(6))),
            ic: non_negative(parse_cell(rec.get(7))),
            active_power: parse_cell(rec.get(8)),
            power_factor: parse_cell(rec.get(9)).filter(|pf| (0.0..=1.0).contains(pf)),
        };
        let list = &mut readings[ci];
        match list.last_mut() {
            Some(last) if last.timestamp == hour => *last = reading,
            _ => list.push(reading),
        }
    }

    let mut unknown: Vec<_> = unknown.into_iter().collect();
    unknown.sort();
    for (id, n) in unknown {
        diagnostics.push(format!("rejected {n} telemetry rows for unknown customer `{id}`"));
    }

    let series = metas
        .into_iter()
        .zip(readings)
        .map(|(meta, readings)| CustomerSeries { meta, readings })
        .collect();
    Ok(Fleet { series, diagnostics })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Write series back out in the telemetry CSV format.
pub fn write_telemetry<W: Write>(series: &[CustomerSeries], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TELEMETRY_HEADER)?;
    for s in series {
        for r in &s.readings {
            w.write_record([
                s.meta.customer_id.clone(),
                format_timestamp(r.timestamp),
                cell(r.ua),
                cell(r.ub),
                cell(r.uc),
                cell(r.ia),
                cell(r.ib),
                cell(r.ic),
                cell(r.active_power),
                cell(r.power_factor),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_meta<'a, W: Write>(
    metas: impl IntoIterator<Item = &'a CustomerMeta>,
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(META_HEADER)?;
    for m in metas {
        w.write_record([
            m.customer_id.clone(),
            m.rated_voltage.to_string(),
            m.contracted_power.to_string(),
            m.label.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Start times of every window position that fits inside the series,
/// regardless of how many readings it holds.
///
/// The series is taken to cover `[first, last + 1h)`.
pub fn candidate_starts(series: &CustomerSeries, window_days: u32, step_days: u32) -> Vec<i64> {
    let (Some(first), Some(last)) = (series.readings.first(), series.readings.last()) else {
        return Vec::new();
    };
    let span_end = last.timestamp + SECONDS_PER_HOUR;
    let len = i64::from(window_days) * SECONDS_PER_DAY;
    let step = i64::from(step_days) * SECONDS_PER_DAY;
    let mut starts = Vec::new();
    let mut s = first.timestamp;
    while s + len <= span_end {
        starts.push(s);
        s += step;
    }
    starts
}

/// Cut a series into overlapping windows, dropping incomplete ones.
pub fn slide_windows(series: &CustomerSeries, window_days: u32, step_days: u32) -> Result<Vec<Window>> {
    if window_days == 0 || step_days == 0 {
        return Err(NtlError::Config(format!(
            "window_days and step_days must be positive (got {window_days}, {step_days})"
        )));
    }
    let len = i64::from(window_days) * SECONDS_PER_DAY;
    let expected_count = (len / SECONDS_PER_HOUR) as usize;
    let readings = &series.readings;
    let mut out = Vec::new();
    for start in candidate_starts(series, window_days, step_days) {
        let end = start + len;
        let lo = readings.partition_point(|r| r.timestamp < start);
        let hi = readings.partition_point(|r| r.timestamp < end);
        let count = hi - lo;
        if (count as f64) < WINDOW_COMPLETENESS * expected_count as f64 {
            continue;
        }
        out.push(Window {
            customer_id: series.meta.customer_id.clone(),
            start,
            end,
            readings: readings[lo..hi].to_vec(),
            expected_count,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const META: &str = "customer_id,rated_voltage,contracted_power,label\nc1,220,10,Normal\n";

    fn hourly_series(hours: usize) -> CustomerSeries {
        let meta = CustomerMeta::new("c1", 220.0, 10.0, Label::Normal).unwrap();
        let readings = (0..hours)
            .map(|h| MeterReading {
                timestamp: 1_700_000_000 / 3600 * 3600 + h as i64 * 3600,
                ua: Some(220.0),
                ..Default::default()
            })
            .collect();
        CustomerSeries { meta, readings }
    }

    #[test]
    fn parses_three_rows() {
        let tel = "customer_id,timestamp,ua,ub,uc,ia,ib,ic,active_power,power_factor\n\
                   c1,2024-01-01T00:00:00Z,220,221,219,5,5,5,3.1,0.95\n\
                   c1,2024-01-01T01:00:00Z,220,221,219,5,5,5,3.1,0.95\n\
                   c1,2024-01-01T02:00:00Z,220,221,219,5,5,5,3.1,0.95\n";
        let fleet = parse_fleet(tel.as_bytes(), META.as_bytes()).unwrap();
        assert_eq!(fleet.series.len(), 1);
        assert_eq!(fleet.series[0].readings.len(), 3);
        assert_eq!(fleet.series[0].meta.label, Label::Normal);
    }

    #[test]
    fn empty_cell_is_missing() {
        let tel = "customer_id,timestamp,ua,ub,uc,ia,ib,ic,active_power,power_factor\n\
                   c1,2024-01-01T00:00:00Z,,221,219,5,5,5,3.1,0.95\n\
                   c1,2024-01-01T01:00:00Z,abc,221,219,-5,5,5,3.1,1.5\n";
        let fleet = parse_fleet(tel.as_bytes(), META.as_bytes()).unwrap();
        let r = &fleet.series[0].readings;
        assert_eq!(r[0].ua, None);
        assert_eq!(r[0].ub, Some(221.0));
        assert_eq!(r[1].ua, None);
        assert_eq!(r[1].ia, None);
        assert_eq!(r[1].power_factor, None);
    }

    #[test]
    fn duplicate_meta_is_error() {
        let meta = "customer_id,rated_voltage,contracted_power,label\nc1,220,10,normal\nc1,220,10,ntl\n";
        let tel = "customer_id,timestamp,ua,ub,uc,ia,ib,ic,active_power,power_factor\n";
        let err = parse_fleet(tel.as_bytes(), meta.as_bytes()).unwrap_err();
        assert!(matches!(err, NtlError::DuplicateCustomer(ref id) if id == "c1"));
    }

    #[test]
    fn backwards_timestamp_names_customer_and_row() {
        let tel = "customer_id,timestamp,ua,ub,uc,ia,ib,ic,active_power,power_factor\n\
                   c1,2024-01-01T05:00:00Z,220,220,220,1,1,1,1,1\n\
                   c1,2024-01-01T04:00:00Z,220,220,220,1,1,1,1,1\n";
        match parse_fleet(tel.as_bytes(), META.as_bytes()).unwrap_err() {
            NtlError::NonMonotoneTimestamp { customer, row } => {
                assert_eq!(customer, "c1");
                assert_eq!(row, 3);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn unknown_customer_rows_rejected_with_diagnostic() {
        let tel = "customer_id,timestamp,ua,ub,uc,ia,ib,ic,active_power,power_factor\n\
                   zz,2024-01-01T00:00:00Z,220,220,220,1,1,1,1,1\n";
        let fleet = parse_fleet(tel.as_bytes(), META.as_bytes()).unwrap();
        assert!(fleet.series[0].readings.is_empty());
        assert_eq!(fleet.diagnostics.len(), 1);
        assert!(fleet.diagnostics[0].contains("zz"));
    }

    #[test]
    fn same_hour_keeps_last() {
        let tel = "customer_id,timestamp,ua,ub,uc,ia,ib,ic,active_power,power_factor\n\
                   c1,2024-01-01T00:00:00Z,200,220,220,1,1,1,1,1\n\
                   c1,2024-01-01T00:15:00Z,210,220,220,1,1,1,1,1\n\
                   c1,2024-01-01T00:45:00Z,215,220,220,1,1,1,1,1\n\
                   c1,2024-01-01T01:00:00Z,219,220,220,1,1,1,1,1\n";
        let fleet = parse_fleet(tel.as_bytes(), META.as_bytes()).unwrap();
        let r = &fleet.series[0].readings;
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].ua, Some(215.0));
        assert_eq!(r[0].timestamp % 3600, 0);
    }

    #[test]
    fn label_is_case_insensitive() {
        assert_eq!("NTL".parse::<Label>().unwrap(), Label::Ntl);
        assert_eq!("Unlabeled".parse::<Label>().unwrap(), Label::Unlabeled);
        assert!("fraud".parse::<Label>().is_err());
    }

    #[test]
    fn thirty_days_give_five_windows() {
        let s = hourly_series(30 * 24);
        let w = slide_windows(&s, 10, 5).unwrap();
        assert_eq!(w.len(), 5);
        assert!(w.iter().all(|w| w.readings.len() == 240 && w.expected_count == 240));
        for pair in w.windows(2) {
            assert_eq!(pair[1].start - pair[0].start, 5 * SECONDS_PER_DAY);
        }
    }

    #[test]
    fn ten_days_give_one_window() {
        let s = hourly_series(240);
        let w = slide_windows(&s, 10, 5).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].readings.len(), 240);
    }

    #[test]
    fn sparse_window_is_dropped() {
        let mut s = hourly_series(240);
        // keep 100 readings spread over the 10 days, including both ends
        let keep: Vec<MeterReading> = s
            .readings
            .iter()
            .enumerate()
            .filter(|(i, _)| *i == 239 || i % 12 < 5 && *i < 239 && i / 12 < 20)
            .map(|(_, r)| *r)
            .collect();
        assert_eq!(keep.len(), 101);
        s.readings = keep[..99].iter().chain(keep.last()).copied().collect();
        assert_eq!(s.readings.len(), 100);
        assert!(slide_windows(&s, 10, 5).unwrap().is_empty());
    }

    #[test]
    fn empty_series_no_windows() {
        let s = hourly_series(0);
        assert!(slide_windows(&s, 10, 5).unwrap().is_empty());
        assert!(slide_windows(&s, 0, 5).is_err());
    }
}
