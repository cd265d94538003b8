use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use gazebot::eval::{
    default_system_sessions, generate_dataset, injected_retry_session, load_dataset, run_cv, run_system_eval,
    run_system_session, train_model, write_dataset, CvMode, EvalConfig, MarkRecord, SyntheticProfile,
};
use gazebot::features::{cut_windows, label_window, FeatureConfig};
use gazebot::inference::{LlmClient, MockLlm};
use gazebot::intent_net::{gradient_check, Checkpoint, GradCheckOptions, GradFault, ModelConfig, ModelParams};
use gazebot::perception::{
    align_gaze_to_frames, ingest_detection_stream, ingest_gaze_stream, stream_stats, track_objects, FrameRecord,
    GazeSample, SceneGeometry,
};
use gazebot::planner::WorldFixture;
use gazebot::session::{read_log, replay, IntentModel};
use gazebot_service::{serve, HttpLlm, ServiceConfig};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "gazebot", version, about = "Gaze-driven intent recognition and task execution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalMode {
    Fivefold,
    Loso,
    System,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Fixation,
}

#[derive(Clone, Copy, ValueEnum)]
enum LlmKind {
    Mock,
    Http,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a gaze and a detection stream and print summary statistics.
    Ingest {
        #[arg(long)]
        gaze: PathBuf,
        #[arg(long)]
        frames: PathBuf,
    },
    /// Cut per-object feature windows from raw streams.
    Features {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        gaze: PathBuf,
        /// Per-frame intent marks; windows are labeled when given.
        #[arg(long)]
        marks: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        sw: usize,
        #[arg(long, default_value_t = 10)]
        stride: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the intent network on every window of a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
    },
    /// Compare analytic and numeric gradients at random parameters.
    Gradcheck {
        #[arg(long, default_value_t = 200)]
        probes: usize,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Also run with a deliberately wrong backward pass.
        #[arg(long)]
        fault_control: bool,
    },
    /// Write a synthetic gaze dataset.
    GenData {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Cross-validate against the fixation baseline, or run the scripted system sessions.
    Eval {
        #[arg(long, value_enum)]
        mode: EvalMode,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Baseline::Fixation)]
        baseline: Baseline,
        #[arg(long)]
        epochs: Option<usize>,
        /// Checkpoint for system mode; trained from --data otherwise.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Serve the session API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8173")]
        bind: String,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        fixture: PathBuf,
        #[arg(long, value_enum, default_value_t = LlmKind::Mock)]
        llm: LlmKind,
        /// Rule table for the mock language model.
        #[arg(long)]
        rules: Option<PathBuf>,
        #[arg(long, default_value = "logs")]
        logs: PathBuf,
    },
    /// Check a recorded session log and print its decisions.
    Replay {
        #[arg(long)]
        log: PathBuf,
    },
}

#[derive(Serialize)]
struct WindowLine<'a> {
    object_id: &'a str,
    start: usize,
    values: &'a [[f64; 3]],
    label: Option<u8>,
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    Ok(BufReader::new(fs::File::open(path).with_context(|| format!("open {}", path.display()))?))
}

fn read_streams(gaze: &Path, frames: &Path) -> Result<(Vec<GazeSample>, Vec<FrameRecord>)> {
    let g = ingest_gaze_stream(open(gaze)?).with_context(|| gaze.display().to_string())?;
    let f = ingest_detection_stream(open(frames)?).with_context(|| frames.display().to_string())?;
    Ok((g, f))
}

fn read_marks(path: &Path, n_frames: usize) -> Result<Vec<Option<String>>> {
    let text = fs::read_to_string(path).with_context(|| format!("read {}", path.display()))?;
    let mut marks = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let m: MarkRecord = serde_json::from_str(line).with_context(|| format!("marks line {}", i + 1))?;
        marks.push(m.intent_object);
    }
    if marks.len() != n_frames {
        bail!("{} marks for {n_frames} frames", marks.len());
    }
    Ok(marks)
}

fn features(
    frames_path: &Path,
    gaze_path: &Path,
    marks_path: Option<&Path>,
    sw: usize,
    stride: usize,
    out: &Path,
) -> Result<usize> {
    if sw == 0 || stride == 0 {
        bail!("sw and stride must be positive");
    }
    let (gaze, frames) = read_streams(gaze_path, frames_path)?;
    let marks = marks_path.map(|p| read_marks(p, frames.len())).transpose()?;
    let times: Vec<i64> = frames.iter().map(|f| f.t_us).collect();
    let aligned = align_gaze_to_frames(&gaze, &times)?;
    let cfg = FeatureConfig {
        sw,
        stride,
        ..FeatureConfig::default()
    };
    let geometry = SceneGeometry::default();
    let mut w = BufWriter::new(fs::File::create(out).with_context(|| format!("create {}", out.display()))?);
    let mut n = 0;
    for track in track_objects(&frames).values() {
        for win in cut_windows(track, &aligned, &geometry, &cfg) {
            let label = match &marks {
                Some(m) => {
                    let flags: Vec<Option<bool>> = m[win.start_frame..win.start_frame + sw]
                        .iter()
                        .map(|x| Some(x.as_deref() == Some(track.object_id.as_str())))
                        .collect();
                    Some(label_window(&flags)?)
                }
                None => None,
            };
            serde_json::to_writer(
                &mut w,
                &WindowLine {
                    object_id: &win.object_id,
                    start: win.start_frame,
                    values: &win.values,
                    label,
                },
            )?;
            w.write_all(b"\n")?;
            n += 1;
        }
    }
    w.flush()?;
    Ok(n)
}

fn gradcheck(probes: usize, seeds: u64, fault_control: bool) -> Result<bool> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let config = ModelConfig {
            seed,
            ..ModelConfig::default()
        };
        let params = ModelParams::init(&config)?;
        let opts = GradCheckOptions {
            probes,
            seed,
            ..GradCheckOptions::default()
        };
        let r = gradient_check(&params, &config, &opts)?;
        println!(
            "seed {seed}: max relative error {:.3e} over {} probes ({} kinks redrawn)",
            r.max_rel_error, r.probes, r.kinks_skipped
        );
        worst = worst.max(r.max_rel_error);
        if fault_control {
            let f = gradient_check(
                &params,
                &config,
                &GradCheckOptions {
                    fault: Some(GradFault::ScaleFfn(1.5)),
                    ..opts
                },
            )?;
            println!("seed {seed}: faulty backward max relative error {:.3e}", f.max_rel_error);
        }
    }
    let ok = worst < 1e-4;
    println!("{} (max {worst:.3e}, threshold 1e-4)", if ok { "PASS" } else { "FAIL" });
    Ok(ok)
}

fn eval(
    mode: EvalMode,
    data: Option<&Path>,
    epochs: Option<usize>,
    model: Option<&Path>,
    json_out: Option<&Path>,
) -> Result<()> {
    let mut cfg = EvalConfig::default();
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    let report = match mode {
        EvalMode::Fivefold | EvalMode::Loso => {
            let data = data.context("--data is required for cross-validation")?;
            let ds = load_dataset(data)?;
            let cv = if matches!(mode, EvalMode::Fivefold) { CvMode::Fivefold } else { CvMode::Loso };
            let r = run_cv(&ds, cv, &cfg)?;
            println!("{}", r.to_table());
            println!("{:.1} s", r.seconds);
            serde_json::to_value(&r)?
        }
        EvalMode::System => {
            let model = match (model, data) {
                (Some(p), _) => IntentModel::load(p)?,
                (None, Some(d)) => train_model(&load_dataset(d)?, &cfg)?,
                (None, None) => bail!("system mode needs --model or --data"),
            };
            let model = Arc::new(model);
            let llm: Arc<dyn LlmClient> = Arc::new(MockLlm::default());
            let (report, results) = run_system_eval(&default_system_sessions(), model.clone(), llm.clone())?;
            println!("{}", report.to_table());
            let retry = run_system_session(&injected_retry_session(), model, llm)?;
            println!(
                "pour-water with first-attempt failures: execution {} after {} attempts",
                if retry.execution { "succeeded" } else { "failed" },
                retry.attempts.unwrap_or(0)
            );
            let results: Vec<_> = results
                .iter()
                .map(|r| serde_json::json!({"family": r.family, "confirmed": r.confirmed, "attempts": r.attempts, "terminal": r.terminal}))
                .collect();
            serde_json::json!({"report": report, "sessions": results, "retry_attempts": retry.attempts, "retry_ok": retry.execution})
        }
    };
    if let Some(p) = json_out {
        fs::write(p, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Ingest { gaze, frames } => {
            let (g, f) = read_streams(&gaze, &frames)?;
            println!("{}", serde_json::to_string_pretty(&stream_stats(&g, &f)?)?);
        }
        Command::Features {
            frames,
            gaze,
            marks,
            sw,
            stride,
            out,
        } => {
            let n = features(&frames, &gaze, marks.as_deref(), sw, stride, &out)?;
            println!("wrote {n} windows to {}", out.display());
        }
        Command::Train {
            data,
            out,
            seed,
            epochs,
        } => {
            let ds = load_dataset(&data)?;
            let mut cfg = EvalConfig::default();
            cfg.model.seed = seed;
            cfg.train.seed = seed;
            cfg.train.epochs = epochs;
            let m = train_model(&ds, &cfg)?;
            Checkpoint::new(&m.config, &m.features, &m.params).save(&out)?;
            println!("saved {}", out.display());
        }
        Command::Gradcheck {
            probes,
            seeds,
            fault_control,
        } => return gradcheck(probes, seeds, fault_control),
        Command::GenData {
            seed,
            out,
            subjects,
            reps,
        } => {
            let mut profile = SyntheticProfile {
                seed,
                ..SyntheticProfile::default()
            };
            if let Some(s) = subjects {
                profile.n_subjects = s;
            }
            if let Some(r) = reps {
                profile.repetitions = r;
            }
            let ds = generate_dataset(&profile)?;
            write_dataset(&out, &ds)?;
            println!("wrote {} trials to {}", ds.trials.len(), out.display());
        }
        Command::Eval {
            mode,
            data,
            baseline: Baseline::Fixation,
            epochs,
            model,
            json,
        } => eval(mode, data.as_deref(), epochs, model.as_deref(), json.as_deref())?,
        Command::Serve {
            bind,
            model,
            fixture,
            llm,
            rules,
            logs,
        } => {
            let model = Arc::new(IntentModel::load(&model)?);
            let fixture = WorldFixture::load(&fixture)?;
            fixture.clone().into_world()?;
            let llm: Arc<dyn LlmClient> = match (llm, rules) {
                (LlmKind::Mock, Some(r)) => Arc::new(MockLlm::load(&r)?),
                (LlmKind::Mock, None) => Arc::new(MockLlm::default()),
                (LlmKind::Http, _) => Arc::new(HttpLlm::from_env()?),
            };
            let cfg = ServiceConfig::new(model, llm, fixture, logs);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(&bind, cfg))?;
        }
        Command::Replay { log } => {
            let events = read_log(&log)?;
            let summary = replay(&events)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
    }
    Ok(true)
}

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(true) => {}
        Ok(false) => std::process::exit(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(2);
        }
    }
}
