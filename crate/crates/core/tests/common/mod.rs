#![allow(dead_code)]

pub mod grad;

use std::time::{Duration, Instant};

use ntl_core::evaluate::{self, MetricsReport};
use ntl_core::ingest::Label;
use ntl_core::profile::{render_series, ProfileConfig, SuperImage};
use ntl_core::synth::{generate_fleet, SynthConfig};
use ntl_core::trainer::{self, split_by_customer, subsample, TrainConfig, TrainOutcome};

pub fn render_fleet(cfg: &SynthConfig) -> Vec<SuperImage> {
    let fleet = generate_fleet(cfg).unwrap();
    let profile = ProfileConfig::default();
    fleet
        .series
        .iter()
        .flat_map(|s| render_series(s, &profile, 10, 5).unwrap().0)
        .collect()
}

/// Labeled training, unlabeled and held-out pools of a rendered fleet.
pub struct Pools<'a> {
    pub labeled: Vec<&'a SuperImage>,
    pub unlabeled: Vec<&'a SuperImage>,
    pub held_out: Vec<&'a SuperImage>,
}

pub fn pools(images: &[SuperImage], train_fraction: f64, labeled_count: Option<usize>, seed: u64) -> Pools<'_> {
    let (train, held) = split_by_customer(images, train_fraction, seed);
    let train = match labeled_count {
        Some(n) => subsample(&train, n, seed),
        None => train,
    };
    Pools {
        labeled: train.iter().map(|&i| &images[i]).collect(),
        unlabeled: images.iter().filter(|i| i.label == Label::Unlabeled).collect(),
        held_out: held.iter().map(|&i| &images[i]).collect(),
    }
}

pub struct RunResult {
    pub outcome: TrainOutcome,
    pub report: MetricsReport,
    pub elapsed: Duration,
}

/// Train on the pools and score the final teacher on the held-out pool.
pub fn train_and_score(p: &Pools<'_>, cfg: &TrainConfig) -> RunResult {
    let started = Instant::now();
    let outcome = trainer::train_loop(&p.labeled, &p.unlabeled, &[], cfg).unwrap();
    let net = ntl_core::netcore::Network::new(outcome.last.net.clone()).unwrap();
    let scores = trainer::score_images(&net, &outcome.last.teacher, &p.held_out).unwrap();
    let report = evaluate::report(&trainer::scored_samples(&p.held_out, &scores), evaluate::DEFAULT_THRESHOLD);
    RunResult { outcome, report, elapsed: started.elapsed() }
}
