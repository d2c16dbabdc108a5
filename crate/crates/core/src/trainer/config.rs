use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{NtlError, Result};

/// Hyperparameters of the mean-teacher training loop.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Must be divisible by 4: a quarter of each batch is labeled.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Teacher momentum in the moving average of student weights.
    pub ema_alpha: f64,
    pub consistency_weight_max: f64,
    /// Share of iterations over which the unsupervised weight ramps up.
    pub ramp_fraction: f64,
    pub margin: f64,
    pub triplets_per_anchor: usize,
    pub seed: u64,
    pub semi_supervised: bool,
    pub triplet_loss: bool,
    pub roi_pooling: bool,
    /// Alternate classes within the labeled part of semi-supervised batches
    /// instead of drawing it uniformly.
    pub balanced_labeled: bool,
    pub validate_every: usize,
    /// Divides every ConvNet width; 1 keeps the full network.
    pub width_divisor: usize,
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1000,
            batch_size: 32,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            ema_alpha: 0.99,
            consistency_weight_max: 1.0,
            ramp_fraction: 0.2,
            margin: 1.0,
            triplets_per_anchor: 4,
            seed: 0,
            semi_supervised: true,
            triplet_loss: true,
            roi_pooling: true,
            balanced_labeled: true,
            validate_every: 200,
            width_divisor: 1,
            verbose: false,
        }
    }
}

impl TrainConfig {
    pub fn labeled_per_batch(&self) -> usize {
        self.batch_size / 4
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(NtlError::Config(m.to_string()));
        if self.batch_size == 0 || self.batch_size % 4 != 0 {
            return fail("batch_size must be a positive multiple of 4");
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return fail("ema_alpha must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.ramp_fraction) {
            return fail("ramp_fraction must lie in [0, 1]");
        }
        if !(self.learning_rate >= 0.0) || !(self.margin > 0.0) || !(self.adam_eps > 0.0) {
            return fail("learning_rate, margin and adam_eps must be non-negative / positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("adam betas must lie in [0, 1)");
        }
        if self.width_divisor == 0 || self.validate_every == 0 {
            return fail("width_divisor and validate_every must be positive");
        }
        Ok(())
    }

    /// Sigmoid-shaped ramp of the unsupervised loss weight, `exp(-5(1-t)²)`.
    pub fn unsupervised_weight(&self, step: usize) -> f64 {
        let ramp = self.ramp_fraction * self.iterations as f64;
        let t = if ramp <= 0.0 { 1.0 } else { (step as f64 / ramp).clamp(0.0, 1.0) };
        self.consistency_weight_max * (-5.0 * (1.0 - t) * (1.0 - t)).exp()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || NtlError::Config(format!("bad value `{value}` for `{key}`"));
        let f = || value.parse::<f64>().map_err(|_| bad());
        let u = || value.parse::<usize>().map_err(|_| bad());
        let b = || match value {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(bad()),
        };
        match key {
            "iterations" => self.iterations = u()?,
            "batch_size" => self.batch_size = u()?,
            "learning_rate" => self.learning_rate = f()?,
            "adam_beta1" => self.adam_beta1 = f()?,
            "adam_beta2" => self.adam_beta2 = f()?,
            "adam_eps" => self.adam_eps = f()?,
            "ema_alpha" => self.ema_alpha = f()?,
            "consistency_weight_max" => self.consistency_weight_max = f()?,
            "ramp_fraction" => self.ramp_fraction = f()?,
            "margin" => self.margin = f()?,
            "triplets_per_anchor" => self.triplets_per_anchor = u()?,
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            "semi_supervised" => self.semi_supervised = b()?,
            "triplet_loss" => self.triplet_loss = b()?,
            "roi_pooling" => self.roi_pooling = b()?,
            "balanced_labeled" => self.balanced_labeled = b()?,
            "validate_every" => self.validate_every = u()?,
            "width_divisor" => self.width_divisor = u()?,
            "verbose" => self.verbose = b()?,
            other => return Err(NtlError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Parse flat `key = value` text; `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (k, v) in parse_key_values(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "iterations = {}", self.iterations);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "adam_beta1 = {}", self.adam_beta1);
        let _ = writeln!(s, "adam_beta2 = {}", self.adam_beta2);
        let _ = writeln!(s, "adam_eps = {}", self.adam_eps);
        let _ = writeln!(s, "ema_alpha = {}", self.ema_alpha);
        let _ = writeln!(s, "consistency_weight_max = {}", self.consistency_weight_max);
        let _ = writeln!(s, "ramp_fraction = {}", self.ramp_fraction);
        let _ = writeln!(s, "margin = {}", self.margin);
        let _ = writeln!(s, "triplets_per_anchor = {}", self.triplets_per_anchor);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "semi_supervised = {}", self.semi_supervised);
        let _ = writeln!(s, "triplet_loss = {}", self.triplet_loss);
        let _ = writeln!(s, "roi_pooling = {}", self.roi_pooling);
        let _ = writeln!(s, "balanced_labeled = {}", self.balanced_labeled);
        let _ = writeln!(s, "validate_every = {}", self.validate_every);
        let _ = writeln!(s, "width_divisor = {}", self.width_divisor);
        s
    }

    /// Short hex digest of the resolved configuration.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Split `key = value` lines, skipping blanks and `#` comments.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| NtlError::Config(format!("line {}: expected key = value", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
