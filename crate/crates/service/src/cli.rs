//! Command-line interface.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration as StdDuration;

use anyhow::{bail, Context};
use chrono::{DateTime, Duration, FixedOffset, Utc};
use clap::{Args, Parser, Subcommand};
use trapsight::calibration::{
    default_synthetic_classes, format_stats_table, grayscale_stats, load_manifest, recommend_thresholds,
    similarity_threshold, synthetic_corpus, write_corpus,
};
use trapsight::detector::{event_channel, DetectionConfig};
use trapsight::simulator::{
    calibrate_sensor, experiment3_sweep, CalibrationAnchors, SensorModel, TrapScenario, TrialSetup,
    DEFAULT_SWEEP_SIZES_MM, DEFAULT_SWEEP_SPEEDS_MM_S,
};
use trapsight::store::{EventRecord, FsStore, StoreOptions};

use crate::api::{router, AppState, CaptureSource};
use crate::config::{load_config_file, ConfigCell};
use crate::feed::WarningFeed;
use crate::pipeline::Pipeline;

#[derive(Debug, Parser)]
#[command(name = "trapsight", version, about = "Pea-weevil trap image detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the detector over recorded or scripted frames.
    #[command(subcommand)]
    Detect(DetectCommand),
    /// Trigger-model and trap simulations.
    #[command(subcommand)]
    Simulate(SimulateCommand),
    /// Threshold derivation from geometry or a labelled corpus.
    #[command(subcommand)]
    Calibrate(CalibrateCommand),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
pub enum DetectCommand {
    /// Process every frame of a directory or scenario file in order.
    Run(DetectRunArgs),
}

#[derive(Debug, Args)]
pub struct DetectRunArgs {
    /// Directory of PNG/PGM/PPM frames (name order) or a scenario JSON file.
    #[arg(long)]
    pub input: PathBuf,
    /// Detection config JSON; absent keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for `events.jsonl` and the image/event store.
    #[arg(long, default_value = "trapsight-out")]
    pub out: PathBuf,
    /// Timestamp of the first directory frame (RFC 3339).
    #[arg(long, default_value = "1970-01-01T00:00:00Z")]
    pub start: DateTime<Utc>,
    /// Seconds between directory frames.
    #[arg(long, default_value_t = 1)]
    pub interval: u32,
}

#[derive(Debug, Subcommand)]
pub enum SimulateCommand {
    /// Trigger rate for every (size, speed) pair, as CSV.
    Sweep(SweepArgs),
    /// Counting accuracy on static scenes with and without dead weevils.
    DeadWeevil(DeadWeevilArgs),
    /// Fit the detectability curve to its anchor rates.
    Calibrate,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Body lengths in mm.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SWEEP_SIZES_MM)]
    pub sizes: Vec<f64>,
    /// Speeds in mm/s.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SWEEP_SPEEDS_MM_S)]
    pub speeds: Vec<f64>,
    #[arg(long, default_value_t = 1000)]
    pub trials: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Override the calibrated reference size (mm).
    #[arg(long, requires = "gamma")]
    pub size_ref: Option<f64>,
    /// Override the calibrated detectability exponent.
    #[arg(long, requires = "size_ref")]
    pub gamma: Option<f64>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DeadWeevilArgs {
    #[arg(long, default_value_t = 10)]
    pub trials: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Leave dead weevils out of the scenes.
    #[arg(long)]
    pub without_dead: bool,
}

#[derive(Debug, Subcommand)]
pub enum CalibrateCommand {
    /// Similarity threshold from the largest weevil area and frame size.
    SimilarityThreshold(SimilarityArgs),
    /// Per-class grayscale statistics of a labelled corpus.
    Grayscale(GrayscaleArgs),
    /// Write a synthetic labelled corpus.
    SynthCorpus(SynthCorpusArgs),
}

#[derive(Debug, Args)]
pub struct SimilarityArgs {
    #[arg(long, default_value_t = 266_000)]
    pub max_area: u64,
    #[arg(long, default_value_t = 3856)]
    pub width: u32,
    #[arg(long, default_value_t = 2490)]
    pub height: u32,
}

#[derive(Debug, Args)]
pub struct GrayscaleArgs {
    /// JSON Lines manifest of (image_path, mask_path, class).
    #[arg(long)]
    pub corpus: PathBuf,
    /// Gray levels added above the darkest class maximum.
    #[arg(long, default_value_t = 0)]
    pub margin: u8,
}

#[derive(Debug, Args)]
pub struct SynthCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: String,
    /// Data directory; the flag wins over the environment.
    #[arg(long, env = "TRAPSIGHT_DATA", default_value = "trapsight-data")]
    pub data: PathBuf,
    /// Scenario whose frames `POST /api/capture` processes in order.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Initial detection config JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// UTC offset used for calendar days, e.g. `+02:00`.
    #[arg(long, default_value = "+00:00")]
    pub reporting_offset: FixedOffset,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Detect(DetectCommand::Run(a)) => detect_run(&a),
        Command::Simulate(SimulateCommand::Sweep(a)) => sweep(&a),
        Command::Simulate(SimulateCommand::DeadWeevil(a)) => dead_weevil(&a),
        Command::Simulate(SimulateCommand::Calibrate) => simulate_calibrate(),
        Command::Calibrate(CalibrateCommand::SimilarityThreshold(a)) => {
            emit(&format!("{:.4}\n", similarity_threshold(a.max_area, a.width, a.height)?))?;
            Ok(())
        }
        Command::Calibrate(CalibrateCommand::Grayscale(a)) => grayscale(&a),
        Command::Calibrate(CalibrateCommand::SynthCorpus(a)) => {
            let corpus = synthetic_corpus(&default_synthetic_classes(), a.per_class, a.seed);
            let manifest = write_corpus(&a.out, &corpus)?;
            emit(&format!("{}\n", manifest.display()))?;
            Ok(())
        }
        Command::Serve(a) => serve(&a),
    }
}

/// Writes to stdout; a closed pipe (e.g. `| head`) ends output quietly.
fn emit(text: &str) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

const FRAME_EXTENSIONS: [&str; 5] = ["png", "pgm", "ppm", "pnm", "pbm"];

fn frame_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| FRAME_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn detect_run(a: &DetectRunArgs) -> anyhow::Result<()> {
    let cfg = match &a.config {
        Some(p) => load_config_file(p)?,
        None => DetectionConfig::default(),
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let store = Arc::new(FsStore::open(a.out.join("store"))?);
    let feed = Arc::new(WarningFeed::in_memory());
    let mut pipeline = Pipeline::new(store, feed.clone());

    let log_path = a.out.join("events.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let (mut frames, mut skipped, mut weevils) = (0u64, 0u64, 0u64);
    let mut record = |p: crate::pipeline::Processed, log: &mut BufWriter<File>| -> anyhow::Result<()> {
        writeln!(log, "{}", p.record.event.to_json())?;
        frames += 1;
        weevils += p.record.event.count;
        Ok(())
    };

    if a.input.is_dir() {
        let files = frame_files(&a.input)?;
        if files.is_empty() {
            bail!("no frames found in {}", a.input.display());
        }
        for (i, path) in files.iter().enumerate() {
            let at = a.start + Duration::seconds(i as i64 * a.interval as i64);
            let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            match pipeline.process_encoded(&bytes, at, &cfg) {
                Ok(p) => record(p, &mut log)?,
                Err(e) => {
                    tracing::error!(frame = %path.display(), error = %format!("{e:#}"), "frame skipped");
                    skipped += 1;
                }
            }
        }
    } else {
        let text = fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
        let scenario = TrapScenario::from_json(&text)?;
        for i in 0..scenario.frame_count() {
            let frame = scenario.render_frame(i)?;
            record(pipeline.process_rendered(&frame, scenario.frames[i], &cfg)?, &mut log)?;
        }
    }
    log.flush()?;
    emit(&format!(
        "{frames} frames processed, {skipped} skipped, {weevils} weevils counted, {} warnings; event log {}\n",
        feed.head(),
        log_path.display()
    ))?;
    Ok(())
}

fn sweep(a: &SweepArgs) -> anyhow::Result<()> {
    let model = match (a.size_ref, a.gamma) {
        (Some(r), Some(g)) => SensorModel::with_detectability(r, g),
        _ => SensorModel::default(),
    };
    let table = experiment3_sweep(&a.sizes, &a.speeds, &model, a.trials, a.seed)?;
    match &a.out {
        Some(p) => fs::write(p, table.to_csv()).with_context(|| format!("writing {}", p.display()))?,
        None => emit(&table.to_csv())?,
    }
    Ok(())
}

fn dead_weevil(a: &DeadWeevilArgs) -> anyhow::Result<()> {
    let summary = TrialSetup::default().run_trials(a.trials, !a.without_dead, a.seed)?;
    emit(&format!(
        "accuracy: {:.1}% ({}/{} trials, {} dead weevils)\n",
        summary.accuracy_pct,
        summary.correct,
        summary.trials,
        if summary.with_dead { "with" } else { "without" }
    ))?;
    Ok(())
}

fn simulate_calibrate() -> anyhow::Result<()> {
    let anchors = CalibrationAnchors::default();
    let cal = calibrate_sensor(&anchors)?;
    emit(&format!("size_ref_mm: {:.4}\n", cal.model.size_ref_mm))?;
    emit(&format!("gamma: {:.4}\n", cal.model.gamma))?;
    emit(&format!(
        "rate at {} mm/s, {} mm: {:.2}%\n",
        anchors.medium_speed_mm_s, anchors.medium_size_mm, cal.medium_rate_pct
    ))?;
    emit(&format!(
        "rate at {} mm/s, {} mm: {:.2}%\n",
        anchors.fast_speed_mm_s, anchors.fast_size_mm, cal.fast_rate_pct
    ))?;
    Ok(())
}

fn grayscale(a: &GrayscaleArgs) -> anyhow::Result<()> {
    let corpus = load_manifest(&a.corpus)?;
    let report = grayscale_stats(&corpus);
    for r in &report.rejected {
        tracing::warn!(sample = r.index, class = %r.class, reason = %r.reason, "sample rejected");
    }
    emit(&format_stats_table(&report.stats))?;
    let recommendation = recommend_thresholds(&report.stats, a.margin)?;
    let doc = serde_json::json!({
        "stats": report.stats,
        "rejected": report.rejected,
        "recommendation": recommendation,
    });
    emit(&format!("{}\n", serde_json::to_string_pretty(&doc)?))?;
    Ok(())
}

fn serve(a: &ServeArgs) -> anyhow::Result<()> {
    let config = match &a.config {
        Some(p) => load_config_file(p)?,
        None => DetectionConfig::default(),
    };
    let scenario = match &a.scenario {
        Some(p) => Some(TrapScenario::from_json(
            &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )?),
        None => None,
    };
    let store = Arc::new(FsStore::open_with(
        &a.data,
        StoreOptions {
            reporting_offset: a.reporting_offset,
        },
    )?);
    let warnings = Arc::new(WarningFeed::open(
        &a.data.join("warnings.jsonl"),
        &a.data.join("quarantine"),
    )?);
    let cell = Arc::new(ConfigCell::new(config).map_err(|errs| {
        anyhow::anyhow!(
            "invalid config: {}",
            errs.iter().map(|e| format!("{}: {}", e.field, e.message)).collect::<Vec<_>>().join("; ")
        )
    })?);

    let (tx, rx) = event_channel::<EventRecord>(256);
    std::thread::Builder::new()
        .name("event-log".into())
        .spawn(move || loop {
            if let Some(r) = rx.recv_timeout(StdDuration::from_secs(1)) {
                tracing::debug!(storage_seq = r.storage_seq, count = r.event.count, "event published");
            }
        })?;
    let pipeline = Pipeline::new(store.clone(), warnings.clone()).with_publisher(tx);
    let state = AppState::new(store, cell, warnings, CaptureSource::new(pipeline, scenario));

    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((a.bind.as_str(), a.port))
            .await
            .with_context(|| format!("binding {}:{}", a.bind, a.port))?;
        emit(&format!("listening on http://{}\n", listener.local_addr()?))?;
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
