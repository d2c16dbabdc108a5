//! Mini-batch mean-teacher training and customer-level data splits.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::losses::{consistency_grad, consistency_loss, ema_update, form_triplets, triplet_term};
use super::optim::Adam;
use crate::error::{NtlError, Result};
use crate::evaluate::{self, ScoredSample};
use crate::netcore::{Checkpoint, Mode, NetConfig, NetInput, Network, ParamSet, Tensor};
use crate::profile::SuperImage;

const NTL: usize = 1;
const EVAL_CHUNK: usize = 32;

/// Indices into the labeled and unlabeled pools for one step, plus the seed
/// from which the student and teacher draw their (independent) noise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub noise_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub step: usize,
    pub xent: f64,
    pub consistency: f64,
    pub contrastive: f64,
    pub wu: f64,
    pub lr: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.xent + self.wu * (self.consistency + self.contrastive)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationRecord {
    pub step: usize,
    pub precision_ntl: f64,
    pub recall_ntl: f64,
    pub f1_ntl: f64,
    pub auc: Option<f64>,
}

/// Student, teacher and optimizer state for one run.
pub struct Trainer {
    pub net: Network,
    pub config: TrainConfig,
    pub student: ParamSet<f32>,
    pub teacher: ParamSet<f32>,
    adam: Adam,
    rng: ChaCha8Rng,
    step: usize,
}

pub fn net_config_for(config: &TrainConfig) -> NetConfig {
    NetConfig { roi_pooling: config.roi_pooling, ..NetConfig::default() }.scaled_widths(config.width_divisor)
}

/// `count` indices drawn with replacement, alternating normal and NTL.
fn alternate_classes<R: Rng>(by_class: &[Vec<usize>; 2], count: usize, rng: &mut R) -> Vec<usize> {
    (0..count)
        .map(|k| {
            let pool = &by_class[k % 2];
            pool[rng.gen_range(0..pool.len())]
        })
        .collect()
}

fn labels_of(pool: &[&SuperImage]) -> Result<Vec<usize>> {
    pool.iter()
        .map(|img| {
            img.label
                .class_index()
                .ok_or_else(|| NtlError::Config(format!("labeled pool holds unlabeled sample {}", img.sample_id())))
        })
        .collect()
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        Self::with_net(net_config_for(&config), config)
    }

    pub fn with_net(net_config: NetConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let net = Network::new(net_config)?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let student: ParamSet<f32> = net.init_params(&mut init_rng);
        let teacher = student.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let adam = Adam::new(config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps);
        Ok(Trainer { net, config, student, teacher, adam, rng, step: 0 })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            net: self.net.config.clone(),
            student: self.student.clone(),
            teacher: self.teacher.clone(),
            step: self.step as u64,
        }
    }

    /// Draw the next batch with replacement: a quarter labeled and the rest
    /// unlabeled. Without semi-supervision the whole batch is labeled. Labeled
    /// draws alternate between the classes unless `balanced_labeled` is off
    /// in a semi-supervised run.
    pub fn sample_batch(&mut self, labels: &[usize], unlabeled_len: usize) -> Batch {
        let cfg = &self.config;
        let rng = &mut self.rng;
        let by_class: [Vec<usize>; 2] =
            [0, 1].map(|c| (0..labels.len()).filter(|&i| labels[i] == c).collect::<Vec<_>>());
        if !cfg.semi_supervised {
            let labeled = alternate_classes(&by_class, cfg.batch_size, rng);
            return Batch { labeled, unlabeled: Vec::new(), noise_seed: rng.gen() };
        }
        let nl = cfg.labeled_per_batch();
        let labeled = if cfg.balanced_labeled {
            alternate_classes(&by_class, nl, rng)
        } else {
            (0..nl).map(|_| rng.gen_range(0..labels.len())).collect()
        };
        let unlabeled = if unlabeled_len > 0 {
            (0..cfg.batch_size - nl).map(|_| rng.gen_range(0..unlabeled_len)).collect()
        } else {
            Vec::new()
        };
        Batch { labeled, unlabeled, noise_seed: rng.gen() }
    }

    /// One optimization step on `batch`; returns the loss terms before the
    /// update.
    pub fn train_step(&mut self, batch: &Batch, labeled: &[&SuperImage], unlabeled: &[&SuperImage]) -> Result<LossBreakdown> {
        let cfg = self.config.clone();
        let labels = labels_of(labeled)?;
        let images: Vec<&SuperImage> = batch
            .labeled
            .iter()
            .map(|&i| labeled[i])
            .chain(batch.unlabeled.iter().map(|&i| unlabeled[i]))
            .collect();
        let input = NetInput::<f32>::from_images(&images);
        let (n, nl) = (images.len(), batch.labeled.len());
        let k = self.net.config.classes;
        let semi = cfg.semi_supervised;
        let wu = if semi { cfg.unsupervised_weight(self.step) } else { 0.0 };

        let mut student_rng = ChaCha8Rng::seed_from_u64(batch.noise_seed);
        let (out, tape) = self.net.forward(&self.student, &input, Mode::Train, &mut student_rng, true)?;
        let probs: Vec<f64> = out.probs.data.iter().map(|&v| v as f64).collect();

        let mut d_logits = vec![0.0f64; n * k];
        let mut xent = 0.0;
        for (r, &i) in batch.labeled.iter().enumerate() {
            let y = labels[i];
            xent -= probs[r * k + y].max(1e-30).ln();
            for c in 0..k {
                d_logits[r * k + c] += (probs[r * k + c] - if c == y { 1.0 } else { 0.0 }) / nl as f64;
            }
        }
        xent /= nl as f64;

        let (mut consistency, mut contrastive) = (0.0, 0.0);
        let mut d_embedding = None;
        if semi {
            let mut teacher_rng = ChaCha8Rng::seed_from_u64(batch.noise_seed);
            teacher_rng.set_stream(1);
            let (t_out, _) = self.net.forward(&self.teacher, &input, Mode::Train, &mut teacher_rng, false)?;
            let t_probs: Vec<f64> = t_out.probs.data.iter().map(|&v| v as f64).collect();
            consistency = consistency_loss(&probs, &t_probs, k);
            let dp = consistency_grad(&probs, &t_probs, k);
            for r in 0..n {
                let p = &probs[r * k..(r + 1) * k];
                let g = &dp[r * k..(r + 1) * k];
                let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
                for c in 0..k {
                    d_logits[r * k + c] += wu * p[c] * (g[c] - dot);
                }
            }
            if cfg.triplet_loss {
                let pseudo: Vec<usize> = (0..n)
                    .map(|r| {
                        if r < nl {
                            labels[batch.labeled[r]]
                        } else {
                            let row = &t_probs[r * k..(r + 1) * k];
                            (0..k).fold(0, |b, c| if row[c] > row[b] { c } else { b })
                        }
                    })
                    .collect();
                let mut triplet_rng = ChaCha8Rng::seed_from_u64(batch.noise_seed);
                triplet_rng.set_stream(2);
                let triplets = form_triplets(&pseudo, cfg.triplets_per_anchor, &mut triplet_rng);
                let dim = out.embedding.shape[1];
                let emb: Vec<f64> = out.embedding.data.iter().map(|&v| v as f64).collect();
                let (loss, grad) = triplet_term(&emb, dim, &triplets, cfg.margin);
                contrastive = loss;
                d_embedding = Some(Tensor { shape: out.embedding.shape.clone(), data: grad.iter().map(|&g| (wu * g) as f32).collect() });
            }
        }

        let losses = LossBreakdown { step: self.step, xent, consistency, contrastive, wu, lr: cfg.learning_rate };
        let diverged = |trainer: &Trainer| NtlError::Divergence {
            step: trainer.step,
            sample_ids: images.iter().map(|img| img.sample_id()).collect(),
        };
        if !losses.total().is_finite() {
            return Err(diverged(self));
        }
        let d_logits = Tensor { shape: vec![n, k], data: d_logits.iter().map(|&v| v as f32).collect() };
        let tape = tape.expect("train-mode forward keeps its tape");
        let grads = self.net.backward(&self.student, tape, &d_logits, d_embedding.as_ref())?;
        self.adam.step(&mut self.student, &grads)?;
        self.net.update_running_stats(&mut self.student, &out)?;
        if !self.student.is_finite() {
            return Err(diverged(self));
        }
        ema_update(&mut self.teacher, &self.student, cfg.ema_alpha)?;
        self.step += 1;
        Ok(losses)
    }
}

/// NTL probability of every image under `params` in evaluation mode.
pub fn score_images(net: &Network, params: &ParamSet<f32>, images: &[&SuperImage]) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut scores = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_CHUNK) {
        let input = NetInput::<f32>::from_images(chunk);
        let (out, _) = net.forward(params, &input, Mode::Eval, &mut rng, false)?;
        scores.extend((0..chunk.len()).map(|s| out.prob(s, NTL) as f64));
    }
    Ok(scores)
}

/// Pair model scores with the images' labels for metric computation.
pub fn scored_samples(images: &[&SuperImage], scores: &[f64]) -> Vec<ScoredSample> {
    images
        .iter()
        .zip(scores)
        .map(|(img, &score)| ScoredSample {
            sample_id: img.sample_id(),
            customer_id: img.customer_id.clone(),
            score,
            truth: img.label,
        })
        .collect()
}

pub fn validate(net: &Network, params: &ParamSet<f32>, pool: &[&SuperImage], step: usize) -> Result<ValidationRecord> {
    let scores = score_images(net, params, pool)?;
    let rep = evaluate::report(&scored_samples(pool, &scores), evaluate::DEFAULT_THRESHOLD);
    Ok(ValidationRecord { step, precision_ntl: rep.ntl.precision, recall_ntl: rep.ntl.recall, f1_ntl: rep.ntl.f1, auc: rep.auc })
}

/// Everything a finished run produces.
pub struct TrainOutcome {
    /// Final student and teacher; the teacher is the inference model.
    pub last: Checkpoint,
    /// Checkpoint with the best validation F1, if validation ran.
    pub best: Option<(ValidationRecord, Checkpoint)>,
    pub losses: Vec<LossBreakdown>,
    pub validation: Vec<ValidationRecord>,
}

/// Run the configured number of iterations. The validation pool is scored
/// with the teacher every `validate_every` steps and after the last step.
pub fn train_loop(
    labeled: &[&SuperImage],
    unlabeled: &[&SuperImage],
    validation: &[&SuperImage],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone())?;
    run(&mut trainer, labeled, unlabeled, validation)
}

/// [`train_loop`] on an already constructed trainer.
pub fn run(
    trainer: &mut Trainer,
    labeled: &[&SuperImage],
    unlabeled: &[&SuperImage],
    validation: &[&SuperImage],
) -> Result<TrainOutcome> {
    let labels = labels_of(labeled)?;
    if !(labels.contains(&0) && labels.contains(&1)) {
        return Err(NtlError::Config("labeled pool must contain both normal and NTL samples".into()));
    }
    let cfg = trainer.config.clone();
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut records = Vec::new();
    let mut best: Option<(ValidationRecord, Checkpoint)> = None;
    let started = std::time::Instant::now();
    for _ in 0..cfg.iterations {
        let batch = trainer.sample_batch(&labels, unlabeled.len());
        let l = trainer.train_step(&batch, labeled, unlabeled)?;
        if cfg.verbose && (l.step % 10 == 0 || l.step + 1 == cfg.iterations) {
            eprintln!(
                "step {:>5} xent {:.4} cons {:.4} contr {:.4} wu {:.3} ({:.0}s)",
                l.step,
                l.xent,
                l.consistency,
                l.contrastive,
                l.wu,
                started.elapsed().as_secs_f64()
            );
        }
        losses.push(l);
        let done = trainer.step();
        if !validation.is_empty() && (done % cfg.validate_every == 0 || done == cfg.iterations) {
            let rec = validate(&trainer.net, &trainer.teacher, validation, done)?;
            if cfg.verbose {
                eprintln!("validate step {done}: f1 {:.4} auc {:?}", rec.f1_ntl, rec.auc);
            }
            if best.as_ref().map_or(true, |(b, _)| rec.f1_ntl > b.f1_ntl) {
                best = Some((rec, trainer.checkpoint()));
            }
            records.push(rec);
        }
    }
    Ok(TrainOutcome { last: trainer.checkpoint(), best, losses, validation: records })
}

pub fn write_loss_log<W: Write>(losses: &[LossBreakdown], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "xent", "consistency", "contrastive", "wu", "lr"])?;
    for l in losses {
        w.write_record([
            l.step.to_string(),
            l.xent.to_string(),
            l.consistency.to_string(),
            l.contrastive.to_string(),
            l.wu.to_string(),
            l.lr.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_validation_log<W: Write>(records: &[ValidationRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "precision_ntl", "recall_ntl", "f1_ntl", "auc"])?;
    for r in records {
        w.write_record([
            r.step.to_string(),
            r.precision_ntl.to_string(),
            r.recall_ntl.to_string(),
            r.f1_ntl.to_string(),
            r.auc.map(|a| a.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Customer-level split of the labeled images. Customers of each class are
/// shuffled and assigned to the training side until it holds at least
/// `train_fraction` of that class's windows. Returns `(train, held_out)`
/// indices; unlabeled images appear in neither.
pub fn split_by_customer(images: &[SuperImage], train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut customers: BTreeMap<(usize, &str), Vec<usize>> = BTreeMap::new();
    for (i, img) in images.iter().enumerate() {
        if let Some(c) = img.label.class_index() {
            customers.entry((c, img.customer_id.as_str())).or_default().push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for class in 0..2 {
        let mut group: Vec<&Vec<usize>> = customers.iter().filter(|((c, _), _)| *c == class).map(|(_, v)| v).collect();
        group.shuffle(&mut rng);
        let total: usize = group.iter().map(|v| v.len()).sum();
        let target = (train_fraction * total as f64).round() as usize;
        let mut taken = 0;
        for idx in group {
            if taken < target {
                taken += idx.len();
                train.extend_from_slice(idx);
            } else {
                held.extend_from_slice(idx);
            }
        }
    }
    train.sort_unstable();
    held.sort_unstable();
    (train, held)
}

/// A random subset of `count` indices (all of them when `count` is larger),
/// kept in their original order.
pub fn subsample(indices: &[usize], count: usize, seed: u64) -> Vec<usize> {
    if count >= indices.len() {
        return indices.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = sample(&mut rng, indices.len(), count).into_iter().map(|i| indices[i]).collect();
    picked.sort_unstable();
    picked
}
