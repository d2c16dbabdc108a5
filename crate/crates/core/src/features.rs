//! Per-timestamp electrical features derived from raw meter readings.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::error::{NtlError, Result};
use crate::ingest::{format_timestamp, CustomerMeta, MeterReading, Window};

/// Below this load rate the calculated power factor is undefined.
pub const MIN_LOAD_RATE_FOR_PF: f64 = 1e-6;

pub const FEATURE_DUMP_HEADER: [&str; 9] =
    ["customer_id", "timestamp", "load_rate", "vd", "v_ud", "i_ud", "pf", "p_norm", "calc_pf"];

/// Names of the derived features usable as profile axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Feature {
    LoadRate,
    VoltageDeviation,
    VoltageUd,
    CurrentUd,
    PowerFactor,
    PNorm,
    CalcPf,
}

impl Feature {
    pub const ALL: [Feature; 7] = [
        Feature::LoadRate,
        Feature::VoltageDeviation,
        Feature::VoltageUd,
        Feature::CurrentUd,
        Feature::PowerFactor,
        Feature::PNorm,
        Feature::CalcPf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Feature::LoadRate => "load_rate",
            Feature::VoltageDeviation => "vd",
            Feature::VoltageUd => "v_ud",
            Feature::CurrentUd => "i_ud",
            Feature::PowerFactor => "pf",
            Feature::PNorm => "p_norm",
            Feature::CalcPf => "calc_pf",
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Feature {
    type Err = NtlError;
    fn from_str(s: &str) -> Result<Self> {
        Feature::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| NtlError::Format(format!("unknown feature `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FeatureRow {
    pub timestamp: i64,
    pub load_rate: Option<f64>,
    pub voltage_deviation: Option<f64>,
    pub voltage_ud: Option<f64>,
    pub current_ud: Option<f64>,
    pub power_factor: Option<f64>,
    pub p_norm: Option<f64>,
    pub calc_pf: Option<f64>,
}

impl FeatureRow {
    pub fn get(&self, f: Feature) -> Option<f64> {
        match f {
            Feature::LoadRate => self.load_rate,
            Feature::VoltageDeviation => self.voltage_deviation,
            Feature::VoltageUd => self.voltage_ud,
            Feature::CurrentUd => self.current_ud,
            Feature::PowerFactor => self.power_factor,
            Feature::PNorm => self.p_norm,
            Feature::CalcPf => self.calc_pf,
        }
    }
}

/// Largest relative shortfall of any present phase voltage below `rated`.
/// Phases at or above rated contribute zero.
pub fn voltage_deviation(phases: [Option<f64>; 3], rated: f64) -> Option<f64> {
    phases
        .iter()
        .flatten()
        .map(|&u| if u < rated { (rated - u) / rated } else { 0.0 })
        .reduce(f64::max)
}

/// Mean absolute deviation of the three phase values from their mean,
/// relative to the mean. Missing when a phase is absent or the mean is zero.
pub fn unbalance_degree(phases: [Option<f64>; 3]) -> Option<f64> {
    let [a, b, c] = phases;
    let (a, b, c) = (a?, b?, c?);
    if a == b && b == c && a > 0.0 {
        // the mean of three equal values can be off by an ulp
        return Some(0.0);
    }
    let avg = (a + b + c) / 3.0;
    if avg <= 0.0 {
        return None;
    }
    let dev = ((a - avg).abs() + (b - avg).abs() + (c - avg).abs()) / 3.0;
    Some(dev / avg)
}

/// Apparent power (sum of per-phase U·I) over contracted power in VA.
pub fn load_rate(reading: &MeterReading, meta: &CustomerMeta) -> Option<f64> {
    let mut va = 0.0;
    for (u, i) in reading.voltages().into_iter().zip(reading.currents()) {
        va += u? * i?;
    }
    Some(va / (meta.contracted_power * 1000.0))
}

pub fn featurize_reading(reading: &MeterReading, meta: &CustomerMeta) -> FeatureRow {
    let lr = load_rate(reading, meta);
    let p_norm = reading.active_power.map(|p| p / meta.contracted_power);
    let calc_pf = match (p_norm, lr) {
        (Some(p), Some(l)) if l >= MIN_LOAD_RATE_FOR_PF => Some((p / l).clamp(0.0, 1.0)),
        _ => None,
    };
    FeatureRow {
        timestamp: reading.timestamp,
        load_rate: lr,
        voltage_deviation: voltage_deviation(reading.voltages(), meta.rated_voltage),
        voltage_ud: unbalance_degree(reading.voltages()),
        current_ud: unbalance_degree(reading.currents()),
        power_factor: reading.power_factor,
        p_norm,
        calc_pf,
    }
}

/// One feature row per reading in the window.
pub fn featurize_window(window: &Window, meta: &CustomerMeta) -> Vec<FeatureRow> {
    window.readings.iter().map(|r| featurize_reading(r, meta)).collect()
}

pub fn write_feature_dump<W: Write>(customer_id: &str, rows: &[FeatureRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(FEATURE_DUMP_HEADER)?;
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            customer_id.to_string(),
            format_timestamp(r.timestamp),
            cell(r.load_rate),
            cell(r.voltage_deviation),
            cell(r.voltage_ud),
            cell(r.current_ud),
            cell(r.power_factor),
            cell(r.p_norm),
            cell(r.calc_pf),
        ])?;
    }
    w.flush()?;
    Ok(())
}
