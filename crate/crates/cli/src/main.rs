use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use armsentinel::config::RunConfig;
use armsentinel::data::{
    build_manifest, generate_scene, prepare_dataset, synth_dataset, DatasetManifest, LabelCoding, ManifestFormat,
    PairedSample, PrepareRequest, SceneConfig,
};
use armsentinel::error::Category;
use armsentinel::eval::{
    compare_checkpoints, single_arm_probe, write_predictions, EvalOptions, GeneratorPredictor, OraclePredictor,
    Predictor,
};
use armsentinel::guard::{guard_run, time_inference, Delayed, GuardMode, LatencyBudget, ViolationPolicy};
use armsentinel::train::train;
use armsentinel::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Robot-arm segmentation pipeline: synthesize, train, evaluate, time and guard.
#[derive(Parser, Debug)]
#[command(name = "armsentinel", version)]
struct Cli {
    /// JSON run configuration; every key is optional.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Log level (error, warn, info, debug, trace). RUST_LOG overrides it.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic paired dataset and its manifest.
    Synth(SynthArgs),
    /// Build a manifest from existing images, combining per-arm labels if given.
    Prepare(PrepareArgs),
    /// Train the generator and discriminator, writing checkpoints and a CSV log.
    Train(TrainArgs),
    /// Write generator predictions for every frame of a manifest.
    Infer(InferArgs),
    /// Compare a baseline and a candidate checkpoint on a held-out manifest.
    Eval(EvalArgs),
    /// Score a checkpoint on single-arm and two-arm scenes side by side.
    ProbeSingleArm(ProbeArgs),
    /// Time single-frame inference against the latency budget.
    Bench(BenchArgs),
    /// Run the safety interlock over a frame sequence.
    Guard(GuardArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum FormatArg {
    PairedFiles,
    Stitched,
}

impl From<FormatArg> for ManifestFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::PairedFiles => ManifestFormat::PairedFiles,
            FormatArg::Stitched => ManifestFormat::Stitched,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum CodingArg {
    Union,
    IdentityCoded,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum PolicyArg {
    Record,
    AbortFrame,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Number of frame/label pairs.
    #[arg(long, default_value_t = 200)]
    count: usize,
    /// Scene seed; overrides scene.seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "paired-files")]
    format: FormatArg,
}

#[derive(Args, Debug)]
struct PrepareArgs {
    /// Directory of condition frames (combine mode).
    #[arg(long, requires_all = ["left", "right"])]
    frames: Option<PathBuf>,
    /// Directory of left-arm labels, matched to frames by file stem.
    #[arg(long)]
    left: Option<PathBuf>,
    /// Directory of right-arm labels, matched to frames by file stem.
    #[arg(long)]
    right: Option<PathBuf>,
    /// Existing dataset directory to index (index mode).
    #[arg(long, conflicts_with = "frames")]
    dir: Option<PathBuf>,
    /// Glob with one `*` selecting primary files in index mode.
    #[arg(long, default_value = "frame_*.ppm")]
    pattern: String,
    /// Glob with one `*` selecting labels in index mode (paired-files only).
    #[arg(long, default_value = "label_*.pgm")]
    label_pattern: String,
    /// Output directory (combine mode).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "union")]
    coding: CodingArg,
    #[arg(long, value_enum, default_value = "paired-files")]
    format: FormatArg,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset manifest; overrides train.manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory for checkpoints and train_log.csv; overrides train.out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides train.epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long, value_name = "CKPT")]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Baseline checkpoint (A).
    #[arg(long)]
    ckpt_baseline: PathBuf,
    /// Candidate checkpoint (B).
    #[arg(long)]
    ckpt: PathBuf,
    /// Held-out manifest; defaults to train.manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory for report.csv, histogram.csv, summary.json and diff images.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit 4 unless the improvement ratio reaches this value.
    #[arg(long, value_name = "RATIO")]
    assert_ratio: Option<f64>,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Frames per arm configuration.
    #[arg(long, default_value_t = 20)]
    count: usize,
    /// Scene seed; overrides scene.seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FrameSource {
    /// Frames come from this manifest instead of the scene generator.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Number of generated frames when no manifest is given.
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// Scene seed for generated frames; overrides scene.seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    frames: FrameSource,
    /// Overrides latency.budget_ms.
    #[arg(long)]
    budget_ms: Option<f64>,
    #[arg(long, default_value_t = 1)]
    repetitions: usize,
    /// Sleep added before every inference (test hook).
    #[arg(long, default_value_t = 0)]
    delay_ms: u64,
    /// Directory for latency.csv and latency.json.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit 4 if any frame exceeds the budget.
    #[arg(long)]
    assert_budget: bool,
}

#[derive(Args, Debug)]
struct GuardArgs {
    /// Generator checkpoint used as the segmenter.
    #[arg(long, required_unless_present = "oracle")]
    ckpt: Option<PathBuf>,
    /// Use ground-truth labels as perfect masks instead of a checkpoint.
    #[arg(long, conflicts_with = "ckpt")]
    oracle: bool,
    #[command(flatten)]
    frames: FrameSource,
    /// Overrides latency.budget_ms.
    #[arg(long)]
    budget_ms: Option<f64>,
    /// Overrides latency.policy.
    #[arg(long, value_enum)]
    policy: Option<PolicyArg>,
    /// Sleep added before every inference (test hook).
    #[arg(long, default_value_t = 0)]
    delay_ms: u64,
    /// Directory for events.jsonl.
    #[arg(long)]
    out: PathBuf,
}

const EXIT_ASSERT: u8 = 4;

enum Outcome {
    Done,
    AssertFailed(String),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.log_level))
        .format_timestamp_secs()
        .init();
    match run(&cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::AssertFailed(msg)) => {
            eprintln!("assertion failed: {msg}");
            ExitCode::from(EXIT_ASSERT)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.category() {
                Category::Usage => 1,
                Category::Data => 2,
                Category::Runtime => 3,
            })
        }
    }
}

fn run(cli: &Cli) -> Result<Outcome> {
    let cfg = RunConfig::load_or_default(cli.config.as_deref())?;
    match &cli.command {
        Command::Synth(a) => synth(&cfg, a),
        Command::Prepare(a) => prepare(a),
        Command::Train(a) => train_cmd(&cfg, a),
        Command::Infer(a) => infer(&cfg, a),
        Command::Eval(a) => eval(&cfg, a),
        Command::ProbeSingleArm(a) => probe(&cfg, a),
        Command::Bench(a) => bench(&cfg, a),
        Command::Guard(a) => guard(&cfg, a),
    }
}

fn usage(detail: impl Into<String>) -> Error {
    Error::Config {
        path: PathBuf::from("<command line>"),
        detail: detail.into(),
    }
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json value serializes"));
}

fn synth(cfg: &RunConfig, a: &SynthArgs) -> Result<Outcome> {
    let mut scene = cfg.scene.clone();
    if let Some(s) = a.seed {
        scene.seed = s;
    }
    let m = synth_dataset(&scene, a.count, &a.out, a.format.into())?;
    println!("wrote {} pairs to {}", m.count, a.out.join("manifest.json").display());
    Ok(Outcome::Done)
}

fn prepare(a: &PrepareArgs) -> Result<Outcome> {
    let m = match (&a.frames, &a.dir) {
        (Some(frames), None) => {
            let out = a.out.clone().ok_or_else(|| usage("prepare with --frames needs --out"))?;
            prepare_dataset(&PrepareRequest {
                frames_dir: frames.clone(),
                left_dir: a.left.clone().expect("clap enforces --left"),
                right_dir: a.right.clone().expect("clap enforces --right"),
                out_dir: out,
                coding: match a.coding {
                    CodingArg::Union => LabelCoding::Union,
                    CodingArg::IdentityCoded => LabelCoding::IdentityCoded,
                },
                format: a.format.into(),
            })?
        }
        (None, Some(dir)) => {
            let format: ManifestFormat = a.format.into();
            let labels = (format == ManifestFormat::PairedFiles).then_some(a.label_pattern.as_str());
            let m = build_manifest(dir, format, &a.pattern, labels)?;
            m.save(&dir.join("manifest.json"))?;
            m
        }
        _ => return Err(usage("prepare needs either --frames/--left/--right or --dir")),
    };
    println!("manifest with {} entries", m.count);
    Ok(Outcome::Done)
}

fn train_cmd(cfg: &RunConfig, a: &TrainArgs) -> Result<Outcome> {
    let mut t = cfg.train.clone();
    if let Some(m) = &a.manifest {
        t.manifest = Some(m.clone());
    }
    if let Some(o) = &a.out {
        t.out_dir = Some(o.clone());
    }
    if let Some(s) = a.seed {
        t.seed = s;
    }
    if let Some(e) = a.epochs {
        t.epochs = e;
    }
    if t.out_dir.is_none() {
        t.out_dir = Some(PathBuf::from("."));
    }
    let out = train(&t, &cfg.model(), a.resume.as_deref())?;
    if let Some(last) = out.records.last() {
        println!(
            "epoch {} d_loss {:.5} g_adv {:.5} g_l1 {:.5}",
            last.epoch, last.d_loss, last.g_adv, last.g_l1
        );
    }
    println!("final checkpoint {}", out.final_checkpoint.display());
    Ok(Outcome::Done)
}

fn infer(cfg: &RunConfig, a: &InferArgs) -> Result<Outcome> {
    let pred = GeneratorPredictor::load(&a.ckpt, &cfg.generator)?;
    let samples = DatasetManifest::load(&a.manifest)?.load_samples()?;
    let n = write_predictions(&pred, &samples, &a.out)?;
    println!("wrote {n} predictions to {}", a.out.display());
    Ok(Outcome::Done)
}

fn eval(cfg: &RunConfig, a: &EvalArgs) -> Result<Outcome> {
    let manifest = a
        .manifest
        .clone()
        .or_else(|| cfg.train.manifest.clone())
        .ok_or_else(|| usage("eval needs --manifest or train.manifest in the config"))?;
    let report = compare_checkpoints(&a.ckpt_baseline, &a.ckpt, &manifest, &cfg.generator, &EvalOptions::default())?;
    let label = |p: &Path| p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
    let (la, lb) = (label(&a.ckpt_baseline), label(&a.ckpt));
    if let Some(out) = &a.out {
        report.write(out, &la, &lb)?;
    }
    print!("{}", report.summary_json(&la, &lb));
    if let Some(min) = a.assert_ratio {
        if !report.ratio.at_least(min) {
            return Ok(Outcome::AssertFailed(format!("improvement ratio {} below {min}", report.ratio)));
        }
    }
    Ok(Outcome::Done)
}

fn probe(cfg: &RunConfig, a: &ProbeArgs) -> Result<Outcome> {
    let pred = GeneratorPredictor::load(&a.ckpt, &cfg.generator)?;
    let mut scene = cfg.scene.clone();
    if let Some(s) = a.seed {
        scene.seed = s;
    }
    let report = single_arm_probe(&pred, &scene, a.count, &EvalOptions::default())?;
    if let Some(out) = &a.out {
        report.write(out)?;
    }
    print!("{}", report.summary_json());
    Ok(Outcome::Done)
}

fn load_frames(scene: &SceneConfig, src: &FrameSource) -> Result<Vec<PairedSample>> {
    if let Some(m) = &src.manifest {
        return DatasetManifest::load(m)?.load_samples();
    }
    if src.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    let mut scene = scene.clone();
    if let Some(s) = src.seed {
        scene.seed = s;
    }
    (0..src.count).map(|i| generate_scene(&scene, i).map(|s| s.sample)).collect()
}

fn budget(cfg: &RunConfig, budget_ms: Option<f64>, policy: Option<PolicyArg>) -> LatencyBudget {
    let mut b = cfg.latency;
    if let Some(ms) = budget_ms {
        b.budget_ms = ms;
    }
    if let Some(p) = policy {
        b.policy = match p {
            PolicyArg::Record => ViolationPolicy::Record,
            PolicyArg::AbortFrame => ViolationPolicy::AbortFrame,
        };
    }
    b
}

fn bench(cfg: &RunConfig, a: &BenchArgs) -> Result<Outcome> {
    let pred = Delayed {
        inner: GeneratorPredictor::load(&a.ckpt, &cfg.generator)?,
        delay: Duration::from_millis(a.delay_ms),
    };
    let frames = load_frames(&cfg.scene, &a.frames)?;
    let b = budget(cfg, a.budget_ms, None);
    let report = time_inference(&pred, &frames, &b, a.repetitions)?;
    if let Some(out) = &a.out {
        report.write(out)?;
    }
    print!("{}", report.summary_json());
    if a.assert_budget && report.violations > 0 {
        return Ok(Outcome::AssertFailed(format!(
            "{} of {} frames exceeded {} ms",
            report.violations,
            report.frame_ms.len(),
            report.budget_ms
        )));
    }
    Ok(Outcome::Done)
}

fn guard(cfg: &RunConfig, a: &GuardArgs) -> Result<Outcome> {
    let inner: Box<dyn Predictor> = match &a.ckpt {
        Some(c) => Box::new(GeneratorPredictor::load(c, &cfg.generator)?),
        None => Box::new(OraclePredictor),
    };
    let pred = Delayed {
        inner,
        delay: Duration::from_millis(a.delay_ms),
    };
    let frames = load_frames(&cfg.scene, &a.frames)?;
    let first = &frames[0].condition;
    let region = cfg.region.build(first.width(), first.height())?;
    let b = budget(cfg, a.budget_ms, a.policy);
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io("cli", "guard", &a.out, e))?;
    let log = a.out.join("events.jsonl");
    if log.exists() {
        std::fs::remove_file(&log).map_err(|e| Error::io("cli", "guard", &log, e))?;
    }
    let run = guard_run(&pred, &frames, &region, &b, Some(&log))?;
    print_json(&serde_json::json!({
        "frames": run.events.len(),
        "halts": run.halts(),
        "first_override": run.first_override(),
        "final_mode": run.state.mode,
        "overridden": run.state.mode == GuardMode::Override,
        "empty_mask_frames": run.state.empty_mask_frames,
        "log": log,
    }));
    Ok(Outcome::Done)
}
