//! Synthetic three-phase smart-meter fleets with labeled anomaly regimes.
//!
//! Normal customers follow a daily load cycle with balanced phases, a
//! customer-specific power factor, small measurement noise, occasional
//! voltage sags and dropped readings. NTL customers share that baseline and
//! carry one persistent anomaly for their whole history.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::distributions::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{NtlError, Result};
use crate::ingest::{CustomerMeta, CustomerSeries, Label, MeterReading, SECONDS_PER_HOUR};
use crate::trainer::parse_key_values;

/// 2024-01-01T00:00:00Z
pub const DEFAULT_START: i64 = 1_704_067_200;
pub const TRUTH_HEADER: [&str; 3] = ["customer_id", "label", "anomaly_kind"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AnomalyKind {
    /// One phase's voltage falls by 20-60% for a block of hours every day.
    PhaseVoltageDrop,
    /// Reported power factor near 1 while metered active power is near 0.
    TheftZeroPower,
    /// One or two phase currents held at a fraction of the others.
    PersistentUnbalance,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 3] =
        [AnomalyKind::PhaseVoltageDrop, AnomalyKind::TheftZeroPower, AnomalyKind::PersistentUnbalance];

    pub fn name(self) -> &'static str {
        match self {
            AnomalyKind::PhaseVoltageDrop => "phase_voltage_drop",
            AnomalyKind::TheftZeroPower => "theft_zero_power",
            AnomalyKind::PersistentUnbalance => "persistent_unbalance",
        }
    }
}

impl fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AnomalyKind {
    type Err = NtlError;

    fn from_str(s: &str) -> Result<Self> {
        AnomalyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| NtlError::Format(format!("unknown anomaly kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub normal: usize,
    pub ntl: usize,
    pub unlabeled: usize,
    /// Share of unlabeled customers generated with an anomaly.
    pub unlabeled_ntl_fraction: f64,
    pub days: u32,
    pub start: i64,
    pub rated_voltage: f64,
    pub contracted_min: f64,
    pub contracted_max: f64,
    /// Relative standard deviation of each voltage reading.
    pub voltage_jitter: f64,
    /// Relative standard deviation of each phase current.
    pub current_jitter: f64,
    /// Additive current noise in amperes; dominates unbalance at low load.
    pub current_noise_amps: f64,
    pub dropout_prob: f64,
    /// Chance per hour that a voltage sag starts.
    pub outlier_prob: f64,
    /// Relative weights of the anomaly kinds, in [`AnomalyKind::ALL`] order.
    pub anomaly_mix: [f64; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            normal: 60,
            ntl: 25,
            unlabeled: 150,
            unlabeled_ntl_fraction: 25.0 / 85.0,
            days: 60,
            start: DEFAULT_START,
            rated_voltage: 220.0,
            contracted_min: 10.0,
            contracted_max: 50.0,
            voltage_jitter: 0.01,
            current_jitter: 0.03,
            current_noise_amps: 0.3,
            dropout_prob: 0.02,
            outlier_prob: 0.004,
            anomaly_mix: [1.0, 1.0, 1.0],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(NtlError::Config(m));
        for (name, p) in [
            ("unlabeled_ntl_fraction", self.unlabeled_ntl_fraction),
            ("dropout_prob", self.dropout_prob),
            ("outlier_prob", self.outlier_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if !(self.rated_voltage > 0.0) || !(self.contracted_min > 0.0) || self.contracted_max < self.contracted_min {
            return fail("rated_voltage and the contracted range must be positive and ordered".into());
        }
        if self.voltage_jitter < 0.0 || self.current_jitter < 0.0 || self.current_noise_amps < 0.0 {
            return fail("noise levels must be non-negative".into());
        }
        if self.anomaly_mix.iter().any(|w| !(*w >= 0.0)) || self.anomaly_mix.iter().sum::<f64>() <= 0.0 {
            return fail("anomaly mix weights must be non-negative and not all zero".into());
        }
        if self.days == 0 {
            return fail("days must be positive".into());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || NtlError::Config(format!("bad value `{value}` for `{key}`"));
        let f = || value.parse::<f64>().map_err(|_| bad());
        let u = || value.parse::<usize>().map_err(|_| bad());
        match key {
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            "normal" => self.normal = u()?,
            "ntl" => self.ntl = u()?,
            "unlabeled" => self.unlabeled = u()?,
            "unlabeled_ntl_fraction" => self.unlabeled_ntl_fraction = f()?,
            "days" => self.days = value.parse().map_err(|_| bad())?,
            "start" => self.start = crate::ingest::parse_timestamp(value).map_err(|_| bad())?,
            "rated_voltage" => self.rated_voltage = f()?,
            "contracted_min" => self.contracted_min = f()?,
            "contracted_max" => self.contracted_max = f()?,
            "voltage_jitter" => self.voltage_jitter = f()?,
            "current_jitter" => self.current_jitter = f()?,
            "current_noise_amps" => self.current_noise_amps = f()?,
            "dropout_prob" => self.dropout_prob = f()?,
            "outlier_prob" => self.outlier_prob = f()?,
            "mix_phase_voltage_drop" => self.anomaly_mix[0] = f()?,
            "mix_theft_zero_power" => self.anomaly_mix[1] = f()?,
            "mix_persistent_unbalance" => self.anomaly_mix[2] = f()?,
            other => return Err(NtlError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = SynthConfig::default();
        for (k, v) in parse_key_values(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let [a, b, c] = self.anomaly_mix;
        format!(
            "seed = {}\nnormal = {}\nntl = {}\nunlabeled = {}\nunlabeled_ntl_fraction = {}\ndays = {}\nstart = {}\n\
             rated_voltage = {}\ncontracted_min = {}\ncontracted_max = {}\nvoltage_jitter = {}\ncurrent_jitter = {}\n\
             current_noise_amps = {}\ndropout_prob = {}\noutlier_prob = {}\nmix_phase_voltage_drop = {a}\n\
             mix_theft_zero_power = {b}\nmix_persistent_unbalance = {c}\n",
            self.seed,
            self.normal,
            self.ntl,
            self.unlabeled,
            self.unlabeled_ntl_fraction,
            self.days,
            crate::ingest::format_timestamp(self.start),
            self.rated_voltage,
            self.contracted_min,
            self.contracted_max,
            self.voltage_jitter,
            self.current_jitter,
            self.current_noise_amps,
            self.dropout_prob,
            self.outlier_prob,
        )
    }
}

/// Ground truth for one customer. `label` is what training may see;
/// `anomaly` is the generator's regime, also for unlabeled customers.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthRow {
    pub customer_id: String,
    pub label: Label,
    pub anomaly: Option<AnomalyKind>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthFleet {
    pub series: Vec<CustomerSeries>,
    pub truth: Vec<TruthRow>,
}

/// Per-customer behavior drawn once from the customer's stream.
struct Profile {
    contracted: f64,
    base: f64,
    amplitude: f64,
    peak_hour: f64,
    pf: f64,
    phase_scale: [f64; 3],
    anomaly: Option<Anomaly>,
}

enum Anomaly {
    VoltageDrop { phase: usize, depth: f64, from_hour: u32, hours: u32 },
    Theft { leak: f64 },
    Unbalance { scale: [f64; 3] },
}

fn draw_profile(cfg: &SynthConfig, kind: Option<AnomalyKind>, rng: &mut ChaCha8Rng) -> Profile {
    let contracted = rng.gen_range(cfg.contracted_min..=cfg.contracted_max);
    let mut phase_scale = [0.0; 3];
    for s in phase_scale.iter_mut() {
        *s = 1.0 + rng.gen_range(-0.06..0.06);
    }
    let anomaly = kind.map(|k| match k {
        AnomalyKind::PhaseVoltageDrop => Anomaly::VoltageDrop {
            phase: rng.gen_range(0..3),
            depth: rng.gen_range(0.2..0.6),
            from_hour: rng.gen_range(0..24),
            hours: rng.gen_range(6..=16),
        },
        AnomalyKind::TheftZeroPower => Anomaly::Theft { leak: rng.gen_range(0.0..0.03) },
        AnomalyKind::PersistentUnbalance => {
            let mut scale = [1.0; 3];
            let first = rng.gen_range(0..3);
            scale[first] = rng.gen_range(0.2..0.5);
            if rng.gen_bool(0.3) {
                scale[(first + 1) % 3] = rng.gen_range(0.2..0.5);
            }
            Anomaly::Unbalance { scale }
        }
    });
    Profile {
        contracted,
        base: rng.gen_range(0.08..0.25),
        amplitude: rng.gen_range(0.15..0.45),
        peak_hour: rng.gen_range(17.0..21.0),
        pf: rng.gen_range(0.88..0.98),
        phase_scale,
        anomaly,
    }
}

fn gaussian(sd: f64) -> Normal<f64> {
    Normal::new(0.0, sd.max(0.0)).expect("finite non-negative deviation")
}

fn generate_customer(cfg: &SynthConfig, meta: CustomerMeta, kind: Option<AnomalyKind>, rng: &mut ChaCha8Rng) -> CustomerSeries {
    let p = draw_profile(cfg, kind, rng);
    let meta = CustomerMeta { contracted_power: (p.contracted * 10.0).round() / 10.0, ..meta };
    let (vj, cj, cn) = (gaussian(cfg.voltage_jitter), gaussian(cfg.current_jitter), gaussian(cfg.current_noise_amps));
    let small = gaussian(0.01);
    let rated = cfg.rated_voltage;
    let hours = cfg.days as usize * 24;
    let mut readings = Vec::with_capacity(hours);
    let mut day_factor = 1.0;
    let mut drop_jitter = 0i32;
    let mut sag_left = 0u32;
    let mut sag_depth = 1.0;
    for h in 0..hours {
        let hour = (h % 24) as u32;
        if hour == 0 {
            day_factor = rng.gen_range(0.8..1.2);
            drop_jitter = rng.gen_range(-1..=1);
        }
        let phase = 2.0 * std::f64::consts::PI * (hour as f64 - p.peak_hour) / 24.0;
        let shape = 0.5 + 0.5 * phase.cos();
        let load = ((p.base + p.amplitude * shape) * day_factor * (1.0 + small.sample(rng))).clamp(0.01, 1.1);

        if sag_left == 0 && rng.gen_bool(cfg.outlier_prob) {
            sag_left = rng.gen_range(1..=3);
            sag_depth = rng.gen_range(0.3..0.7);
        }
        let sag = if sag_left > 0 {
            sag_left -= 1;
            sag_depth
        } else {
            1.0
        };

        let mut u = [0.0; 3];
        for v in u.iter_mut() {
            *v = rated * (1.0 - 0.02 * load + vj.sample(rng)) * sag;
        }
        let per_phase_va = load * p.contracted * 1000.0 / 3.0;
        let mut i = [0.0; 3];
        for (k, c) in i.iter_mut().enumerate() {
            *c = (per_phase_va / rated * p.phase_scale[k] * (1.0 + cj.sample(rng)) + cn.sample(rng)).abs();
        }
        let mut pf = (p.pf + small.sample(rng)).clamp(0.85, 1.0);
        let mut leak = 1.0;
        match p.anomaly {
            Some(Anomaly::VoltageDrop { phase, depth, from_hour, hours }) => {
                let start = (from_hour as i32 + drop_jitter).rem_euclid(24) as u32;
                if (hour + 24 - start) % 24 < hours {
                    u[phase] *= 1.0 - depth;
                }
            }
            Some(Anomaly::Theft { leak: l }) => {
                pf = rng.gen_range(0.965..1.0);
                leak = l + rng.gen_range(0.0..0.01);
            }
            Some(Anomaly::Unbalance { scale }) => {
                for (c, s) in i.iter_mut().zip(scale) {
                    *c *= s;
                }
            }
            None => {}
        }
        let true_power: f64 = u.iter().zip(&i).map(|(v, c)| v * c).sum::<f64>() * pf / 1000.0;
        let power = if leak < 1.0 { true_power * leak } else { true_power * (1.0 + small.sample(rng)) };

        if rng.gen_bool(cfg.dropout_prob) {
            continue;
        }
        let ts = cfg.start + h as i64 * SECONDS_PER_HOUR;
        let round = |x: f64, d: f64| (x * d).round() / d;
        let mut r = MeterReading {
            timestamp: ts,
            ua: Some(round(u[0], 100.0)),
            ub: Some(round(u[1], 100.0)),
            uc: Some(round(u[2], 100.0)),
            ia: Some(round(i[0], 1000.0)),
            ib: Some(round(i[1], 1000.0)),
            ic: Some(round(i[2], 1000.0)),
            active_power: Some(round(power, 10000.0)),
            power_factor: Some(round(pf, 10000.0)),
        };
        if rng.gen_bool(cfg.dropout_prob / 2.0) {
            match rng.gen_range(0..8) {
                0 => r.ua = None,
                1 => r.ub = None,
                2 => r.uc = None,
                3 => r.ia = None,
                4 => r.ib = None,
                5 => r.ic = None,
                6 => r.active_power = None,
                _ => r.power_factor = None,
            }
        }
        readings.push(r);
    }
    CustomerSeries { meta, readings }
}

/// Build the whole fleet. Customer `n` draws from its own ChaCha8 stream, so
/// customers do not depend on one another.
pub fn generate_fleet(cfg: &SynthConfig) -> Result<SynthFleet> {
    cfg.validate()?;
    let mix = WeightedIndex::new(cfg.anomaly_mix).map_err(|e| NtlError::Config(e.to_string()))?;
    let total = cfg.normal + cfg.ntl + cfg.unlabeled;
    let width = total.to_string().len().max(4);
    let mut series = Vec::with_capacity(total);
    let mut truth = Vec::with_capacity(total);
    for n in 0..total {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(n as u64 + 1);
        let (label, anomalous) = if n < cfg.normal {
            (Label::Normal, false)
        } else if n < cfg.normal + cfg.ntl {
            (Label::Ntl, true)
        } else {
            (Label::Unlabeled, rng.gen_bool(cfg.unlabeled_ntl_fraction))
        };
        let kind = anomalous.then(|| AnomalyKind::ALL[mix.sample(&mut rng)]);
        let id = format!("C{n:0width$}");
        let meta = CustomerMeta::new(id.clone(), cfg.rated_voltage, cfg.contracted_min, label)?;
        series.push(generate_customer(cfg, meta, kind, &mut rng));
        truth.push(TruthRow { customer_id: id, label, anomaly: kind });
    }
    Ok(SynthFleet { series, truth })
}

pub fn write_truth<W: Write>(truth: &[TruthRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRUTH_HEADER)?;
    for t in truth {
        w.write_record([
            t.customer_id.as_str(),
            &t.label.to_string(),
            t.anomaly.map(AnomalyKind::name).unwrap_or("none"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_truth<R: std::io::Read>(input: R) -> Result<Vec<TruthRow>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != TRUTH_HEADER {
        return Err(NtlError::Format(format!("truth header must be {}", TRUTH_HEADER.join(","))));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let anomaly = match rec.get(2).unwrap_or("none").trim() {
            "" | "none" => None,
            k => Some(k.parse()?),
        };
        out.push(TruthRow { customer_id: rec[0].trim().to_string(), label: rec[1].parse()?, anomaly });
    }
    Ok(out)
}
