//! `ntl`: synthesize, render, train, evaluate and score smart-meter fleets.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use ntl_core::evaluate::{self, ScoredSample};
use ntl_core::ingest::{self, Fleet, Label};
use ntl_core::netcore::{Checkpoint, Mode, NetInput, Network};
use ntl_core::profile::{render_series, ProfileConfig, SuperImage, CHANNELS};
use ntl_core::synth::{self, SynthConfig, TruthRow};
use ntl_core::trainer::{self, TrainConfig};
use ntl_core::{NtlError, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

const MANIFEST: &str = "manifest.json";

#[derive(Parser)]
#[command(name = "ntl", version, about = "Non-technical loss detection on three-phase smart-meter data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic fleet: telemetry.csv, meta.csv, truth.csv.
    Synth(SynthArgs),
    /// Window, featurize and render telemetry into one .ntlp file per window.
    Render(RenderArgs),
    /// Train student and teacher networks on rendered windows.
    Train(TrainArgs),
    /// Score rendered windows with a checkpoint and write metrics.
    Evaluate(EvaluateArgs),
    /// Score raw telemetry: one row per emitted window.
    Detect(DetectArgs),
    /// Write the pooled embedding of every rendered window.
    ExportEmbeddings(ExportArgs),
}

#[derive(Args)]
struct Common {
    /// Seed for every random choice the command makes.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Replace existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct WindowArgs {
    /// Kernel width in pixels.
    #[arg(long, default_value_t = ntl_core::profile::DEFAULT_SIGMA_PX)]
    sigma: f64,
    /// Bounding-box threshold as a fraction of the channel maximum.
    #[arg(long, default_value_t = ntl_core::profile::DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = 10)]
    window_days: u32,
    #[arg(long, default_value_t = 5)]
    step_days: u32,
}

impl WindowArgs {
    fn profile(&self) -> Result<ProfileConfig> {
        let cfg = ProfileConfig { sigma_px: self.sigma, threshold_frac: self.threshold, ..ProfileConfig::default() };
        cfg.validate()?;
        if self.window_days == 0 || self.step_days == 0 {
            return Err(NtlError::Config("window and step lengths must be positive".into()));
        }
        Ok(cfg)
    }

    fn describe(&self) -> Value {
        json!({"sigma": self.sigma, "threshold": self.threshold, "window_days": self.window_days, "step_days": self.step_days})
    }
}

#[derive(Args)]
struct SynthArgs {
    /// key = value file overriding the default fleet settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    telemetry: PathBuf,
    #[arg(long)]
    meta: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    window: WindowArgs,
    /// Also write seven greyscale PNGs per sampled window.
    #[arg(long)]
    png: bool,
    /// With --png, write images for every n-th window only.
    #[arg(long, default_value_t = 1)]
    png_every: usize,
    /// Also write per-customer feature dumps.
    #[arg(long)]
    features: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of rendered .ntlp files.
    #[arg(long)]
    data: PathBuf,
    /// customer_id,label,anomaly_kind
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// key = value file of training settings; flags below take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Train on a random subset of this many labeled windows.
    #[arg(long)]
    labeled_count: Option<usize>,
    /// Share of each class's labeled windows assigned to training.
    #[arg(long, default_value_t = 0.25)]
    train_fraction: f64,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    width_divisor: Option<usize>,
    /// Supervised training only: no teacher loss, class-balanced batches.
    #[arg(long)]
    no_semi: bool,
    /// Drop the contrastive embedding loss.
    #[arg(long)]
    no_triplet: bool,
    /// Pool each channel's whole feature map instead of its box.
    #[arg(long)]
    no_roi: bool,
    #[arg(long)]
    verbose: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory holding checkpoint.manifest and checkpoint.bin.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// split.json from a training run; only its held-out customers are scored.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Also report per-customer majority-vote metrics.
    #[arg(long)]
    per_customer: bool,
    #[arg(long, default_value_t = evaluate::DEFAULT_THRESHOLD)]
    decision_threshold: f64,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    telemetry: PathBuf,
    #[arg(long)]
    meta: PathBuf,
    /// Output CSV: customer_id,window_start,ntl_score
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    window: WindowArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output CSV with one embedding row per window.
    #[arg(long)]
    out: PathBuf,
    /// Labels from this truth file replace those stored in the windows.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

fn exit_code(e: &NtlError) -> u8 {
    match e {
        NtlError::Config(_) | NtlError::UnknownKey(_) => 2,
        NtlError::Divergence { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let started = Instant::now();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a, started),
        Command::Render(a) => cmd_render(a, started),
        Command::Train(a) => cmd_train(a, started),
        Command::Evaluate(a) => cmd_evaluate(a, started),
        Command::Detect(a) => cmd_detect(a, started),
        Command::ExportEmbeddings(a) => cmd_export(a, started),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| NtlError::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| NtlError::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| NtlError::io(path, e))
}

/// Create `dir`, refusing to reuse a non-empty one without `force`.
fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| NtlError::io(dir, e))?.next().is_some();
        if non_empty && !force {
            return Err(NtlError::Config(format!("{} is not empty; pass --force to overwrite", dir.display())));
        }
    }
    fs::create_dir_all(dir).map_err(|e| NtlError::io(dir, e))
}

/// Refuse to replace an existing file without `force`.
fn prepare_file(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(NtlError::Config(format!("{} exists; pass --force to overwrite", path.display())));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| NtlError::io(parent, e))?;
    }
    Ok(())
}

fn write_manifest(path: &Path, command: &str, config: Value, inputs: Value, outputs: Value, seed: u64, started: Instant) -> Result<()> {
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
        "duration_secs": started.elapsed().as_secs_f64(),
    });
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| NtlError::Format(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| NtlError::io(path, e))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| NtlError::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn cmd_synth(a: SynthArgs, started: Instant) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => SynthConfig::from_text(&read_text(p)?)?,
        None => SynthConfig::default(),
    };
    cfg.seed = a.common.seed;
    cfg.validate()?;
    prepare_dir(&a.out, a.common.force)?;
    let fleet = synth::generate_fleet(&cfg)?;
    let paths = ["telemetry.csv", "meta.csv", "truth.csv"].map(|f| a.out.join(f));
    ingest::write_telemetry(&fleet.series, create(&paths[0])?)?;
    ingest::write_meta(fleet.series.iter().map(|s| &s.meta), create(&paths[1])?)?;
    synth::write_truth(&fleet.truth, create(&paths[2])?)?;
    let mut hashes = BTreeMap::new();
    for p in &paths {
        hashes.insert(p.file_name().unwrap().to_string_lossy().to_string(), sha256_file(p)?);
    }
    write_manifest(
        &a.out.join(MANIFEST),
        "synth",
        json!({"synth": cfg.to_text()}),
        json!({"config": a.config}),
        json!({"dir": a.out, "customers": fleet.series.len(), "sha256": hashes}),
        cfg.seed,
        started,
    )
}

fn load_fleet(telemetry: &Path, meta: &Path) -> Result<Fleet> {
    let tel_text = read_text(telemetry)?;
    let meta_reader = open(meta)?;
    if tel_text.trim().is_empty() {
        ingest::parse_meta(meta_reader)?;
        return Ok(Fleet::default());
    }
    let fleet = ingest::parse_fleet(tel_text.as_bytes(), meta_reader)?;
    for d in &fleet.diagnostics {
        eprintln!("warning: {d}");
    }
    Ok(fleet)
}

fn cmd_render(a: RenderArgs, started: Instant) -> Result<()> {
    let profile = a.window.profile()?;
    if a.png_every == 0 {
        return Err(NtlError::Config("--png-every must be positive".into()));
    }
    let fleet = load_fleet(&a.telemetry, &a.meta)?;
    prepare_dir(&a.out, a.common.force)?;
    let (mut emitted, mut skipped) = (0usize, 0usize);
    for series in &fleet.series {
        let (images, skip) = render_series(series, &profile, a.window.window_days, a.window.step_days)?;
        skipped += skip;
        for img in &images {
            let path = a.out.join(img.file_name());
            img.encode(create(&path)?)?;
            if a.png && emitted % a.png_every == 0 {
                let stem = img.file_name().trim_end_matches(".ntlp").to_string();
                for c in 0..CHANNELS {
                    let p = a.out.join(format!("{stem}_ch{c}.png"));
                    img.write_png(c, create(&p)?)?;
                }
            }
            emitted += 1;
        }
        if a.features {
            let mut rows = Vec::new();
            for w in ingest::slide_windows(series, a.window.window_days, a.window.step_days)? {
                rows.extend(ntl_core::features::featurize_window(&w, &series.meta));
            }
            let p = a.out.join(format!("{}_features.csv", series.meta.customer_id));
            ntl_core::features::write_feature_dump(&series.meta.customer_id, &rows, create(&p)?)?;
        }
    }
    eprintln!("rendered {emitted} windows, skipped {skipped} incomplete");
    write_manifest(
        &a.out.join(MANIFEST),
        "render",
        a.window.describe(),
        json!({"telemetry": a.telemetry, "meta": a.meta}),
        json!({"dir": a.out, "windows": emitted, "skipped_incomplete": skipped}),
        a.common.seed,
        started,
    )
}

/// All .ntlp files in `dir`, ordered by file name.
fn load_images(dir: &Path) -> Result<Vec<SuperImage>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| NtlError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ntlp"))
        .collect();
    paths.sort();
    paths.iter().map(|p| SuperImage::decode(open(p)?)).collect()
}

fn load_truth(path: &Path) -> Result<BTreeMap<String, TruthRow>> {
    Ok(synth::read_truth(open(path)?)?.into_iter().map(|t| (t.customer_id.clone(), t)).collect())
}

/// Labels from the truth file; customers it does not list become unlabeled.
fn apply_truth(images: &mut [SuperImage], truth: &BTreeMap<String, TruthRow>) {
    for img in images {
        img.label = truth.get(&img.customer_id).map_or(Label::Unlabeled, |t| t.label);
    }
}

fn cmd_train(a: TrainArgs, started: Instant) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_text(&read_text(p)?)?,
        None => TrainConfig::default(),
    };
    cfg.seed = a.common.seed;
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    if let Some(n) = a.batch_size {
        cfg.batch_size = n;
    }
    if let Some(n) = a.width_divisor {
        cfg.width_divisor = n;
    }
    cfg.semi_supervised &= !a.no_semi;
    cfg.triplet_loss &= !a.no_triplet;
    cfg.roi_pooling &= !a.no_roi;
    cfg.verbose |= a.verbose;
    cfg.validate()?;
    if !(a.train_fraction > 0.0 && a.train_fraction < 1.0) {
        return Err(NtlError::Config("--train-fraction must lie in (0, 1)".into()));
    }
    let truth = load_truth(&a.truth)?;
    let mut images = load_images(&a.data)?;
    apply_truth(&mut images, &truth);
    prepare_dir(&a.out, a.common.force)?;

    let (train_idx, held_idx) = trainer::split_by_customer(&images, a.train_fraction, cfg.seed);
    let train_idx = match a.labeled_count {
        Some(n) => trainer::subsample(&train_idx, n, cfg.seed),
        None => train_idx,
    };
    let labeled: Vec<&SuperImage> = train_idx.iter().map(|&i| &images[i]).collect();
    let held: Vec<&SuperImage> = held_idx.iter().map(|&i| &images[i]).collect();
    let unlabeled: Vec<&SuperImage> = images.iter().filter(|i| i.label == Label::Unlabeled).collect();
    eprintln!("labeled {} / unlabeled {} / held-out {}", labeled.len(), unlabeled.len(), held.len());

    let outcome = trainer::train_loop(&labeled, &unlabeled, &held, &cfg)?;
    outcome.last.save(&a.out)?;
    if let Some((_, best)) = &outcome.best {
        best.save(&a.out.join("best"))?;
    }
    trainer::write_loss_log(&outcome.losses, create(&a.out.join("loss_log.csv"))?)?;
    trainer::write_validation_log(&outcome.validation, create(&a.out.join("validation_log.csv"))?)?;
    fs::write(a.out.join("train_config.txt"), cfg.to_text()).map_err(|e| NtlError::io(&a.out, e))?;
    let customers = |v: &[&SuperImage]| v.iter().map(|i| i.customer_id.clone()).collect::<BTreeSet<_>>();
    let split = json!({"train": customers(&labeled), "held_out": customers(&held)});
    fs::write(a.out.join("split.json"), serde_json::to_string_pretty(&split).unwrap_or_default())
        .map_err(|e| NtlError::io(&a.out, e))?;
    let best = outcome.best.as_ref().map(|(r, _)| json!({"step": r.step, "f1_ntl": r.f1_ntl, "auc": r.auc}));
    write_manifest(
        &a.out.join(MANIFEST),
        "train",
        json!({"train": cfg.to_text(), "config_hash": cfg.hash(), "train_fraction": a.train_fraction,
               "labeled_count": a.labeled_count}),
        json!({"data": a.data, "truth": a.truth, "config": a.config}),
        json!({"dir": a.out, "labeled": labeled.len(), "unlabeled": unlabeled.len(), "held_out": held.len(),
               "steps": outcome.losses.len(), "best": best}),
        cfg.seed,
        started,
    )
}

fn load_model(dir: &Path) -> Result<(Network, Checkpoint)> {
    let ckpt = Checkpoint::load(dir)?;
    Ok((Network::new(ckpt.net.clone())?, ckpt))
}

fn cmd_evaluate(a: EvaluateArgs, started: Instant) -> Result<()> {
    let (net, ckpt) = load_model(&a.checkpoint)?;
    let truth = load_truth(&a.truth)?;
    let mut images = load_images(&a.data)?;
    apply_truth(&mut images, &truth);
    let keep: Option<BTreeSet<String>> = match &a.split {
        Some(p) => {
            let v: Value = serde_json::from_str(&read_text(p)?).map_err(|e| NtlError::Format(e.to_string()))?;
            let ids = v["held_out"].as_array().ok_or_else(|| NtlError::Format("split file lacks held_out".into()))?;
            Some(ids.iter().filter_map(|x| x.as_str().map(str::to_string)).collect())
        }
        None => None,
    };
    let pool: Vec<&SuperImage> = images
        .iter()
        .filter(|i| i.label != Label::Unlabeled)
        .filter(|i| keep.as_ref().map_or(true, |k| k.contains(&i.customer_id)))
        .collect();
    prepare_dir(&a.out, a.common.force)?;
    let scores = trainer::score_images(&net, &ckpt.teacher, &pool)?;
    let scored = trainer::scored_samples(&pool, &scores);
    let report = evaluate::report(&scored, a.decision_threshold);
    let mut doc = json!({"windows": report});
    if a.per_customer {
        let agg = evaluate::per_customer(&scored, a.decision_threshold);
        doc["customers"] = json!(evaluate::report(&agg, a.decision_threshold));
    }
    let text = serde_json::to_string_pretty(&doc).map_err(|e| NtlError::Format(e.to_string()))?;
    fs::write(a.out.join("metrics.json"), text + "\n").map_err(|e| NtlError::io(&a.out, e))?;
    evaluate::write_roc_csv(&report.roc, create(&a.out.join("roc.csv"))?)?;
    write_scores(&scored, create(&a.out.join("scores.csv"))?)?;
    write_manifest(
        &a.out.join(MANIFEST),
        "evaluate",
        json!({"threshold": a.decision_threshold, "per_customer": a.per_customer}),
        json!({"checkpoint": a.checkpoint, "data": a.data, "truth": a.truth, "split": a.split}),
        json!({"dir": a.out, "windows": scored.len(), "f1_ntl": report.ntl.f1, "auc": report.auc}),
        a.common.seed,
        started,
    )
}

fn write_scores<W: Write>(scored: &[ScoredSample], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sample_id", "customer_id", "truth", "ntl_score"])?;
    for s in scored {
        w.write_record([s.sample_id.clone(), s.customer_id.clone(), s.truth.to_string(), s.score.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_detect(a: DetectArgs, started: Instant) -> Result<()> {
    let profile = a.window.profile()?;
    let (net, ckpt) = load_model(&a.checkpoint)?;
    let fleet = load_fleet(&a.telemetry, &a.meta)?;
    prepare_file(&a.out, a.common.force)?;
    let mut images = Vec::new();
    for series in &fleet.series {
        images.extend(render_series(series, &profile, a.window.window_days, a.window.step_days)?.0);
    }
    let refs: Vec<&SuperImage> = images.iter().collect();
    let scores = trainer::score_images(&net, &ckpt.teacher, &refs)?;
    let mut w = csv::Writer::from_writer(create(&a.out)?);
    w.write_record(["customer_id", "window_start", "ntl_score"])?;
    for (img, s) in images.iter().zip(&scores) {
        w.write_record([img.customer_id.clone(), ingest::format_timestamp(img.window_start), s.to_string()])?;
    }
    w.flush().map_err(|e| NtlError::io(&a.out, e))?;
    write_manifest(
        &manifest_beside(&a.out),
        "detect",
        a.window.describe(),
        json!({"checkpoint": a.checkpoint, "telemetry": a.telemetry, "meta": a.meta}),
        json!({"scores": a.out, "windows": images.len()}),
        a.common.seed,
        started,
    )
}

/// `scores.csv` → `scores.manifest.json` in the same directory.
fn manifest_beside(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_else(|| "output".into());
    out.with_file_name(format!("{stem}.{MANIFEST}"))
}

fn cmd_export(a: ExportArgs, started: Instant) -> Result<()> {
    let (net, ckpt) = load_model(&a.checkpoint)?;
    let mut images = load_images(&a.data)?;
    if let Some(t) = &a.truth {
        apply_truth(&mut images, &load_truth(t)?);
    }
    prepare_file(&a.out, a.common.force)?;
    let dim = net.config.embedding_dim();
    let mut w = csv::Writer::from_writer(create(&a.out)?);
    let mut header = vec!["sample_id".to_string(), "customer_id".into(), "window_start".into(), "label".into()];
    header.extend((0..dim).map(|i| format!("e{i}")));
    w.write_record(&header)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.common.seed);
    for chunk in images.chunks(32) {
        let refs: Vec<&SuperImage> = chunk.iter().collect();
        let input = NetInput::<f32>::from_images(&refs);
        let (out, _) = net.forward(&ckpt.teacher, &input, Mode::Eval, &mut rng, false)?;
        for (img, row) in chunk.iter().zip(out.embedding.data.chunks_exact(dim)) {
            let mut rec = vec![img.sample_id(), img.customer_id.clone(), ingest::format_timestamp(img.window_start), img.label.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| NtlError::io(&a.out, e))?;
    write_manifest(
        &manifest_beside(&a.out),
        "export-embeddings",
        json!({"embedding_dim": dim}),
        json!({"checkpoint": a.checkpoint, "data": a.data, "truth": a.truth}),
        json!({"embeddings": a.out, "rows": images.len()}),
        a.common.seed,
        started,
    )
}
