use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mveks::distill::{RigProfile, Strategy};
use mveks::eval::EsdPooling;
use mveks::inflation::{InflationReport, PosteriorScope};
use mveks::linear::LatentDim;
use mveks::pipeline::{self, Mode, Pose3d, RunConfig, Score, VideoInput, ViewData};
use mveks::smoothing::Smoothing;
use mveks::synth::{self, SynthConfig};
use mveks::{Error, Result};

#[derive(Parser)]
#[command(name = "mveks", version, about = "Multi-view ensemble Kalman smoothing for keypoint tracks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit, inflate, select the smoothing parameter and smooth every keypoint.
    Smooth(SmoothArgs),
    /// Run only the cross-view consistency check and report inflated cells.
    InflateReport(InflateArgs),
    /// Pick diverse low-variance frames and write pseudo-labels.
    SelectFrames(SelectArgs),
    /// Pixel error against ground truth, stratified by ensemble spread.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic multi-camera dataset with known truth.
    Synth(SynthArgs),
    /// Median-of-pairs triangulation of 2D keypoints.
    Triangulate(TriangulateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Linear,
    Nonlinear,
    Auto,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    LeaveOneOut,
    AllViews,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoreArg {
    Postvar,
    Ensvar,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoseArg {
    Triangulate,
    Pca,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Targeted,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Fly,
    Mouse,
    Chickadee,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolingArg {
    Max,
    PerCoordinate,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Ensemble directory laid out as <model>/<view>.csv.
    #[arg(long, short)]
    input: Option<PathBuf>,
    /// Camera calibration (JSON).
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, env = "MVEKS_JOBS")]
    jobs: Option<usize>,
}

#[derive(Args)]
struct ModelArgs {
    /// Smoother; auto is nonlinear iff a calibration is given [default: auto]
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Latent dimension, an integer or "auto-99" [recommended: auto-99]
    #[arg(long)]
    latent_dim: Option<LatentDim>,
    /// Max-variance quantile of the frames used for the PCA fit [default: 0.5]
    #[arg(long)]
    quantile: Option<f64>,
    /// Disable variance inflation.
    #[arg(long)]
    no_inflation: bool,
    /// Mahalanobis threshold for inflation [recommended: 5]
    #[arg(long)]
    threshold: Option<f64>,
    /// Variance multiplier per inflation step [recommended: 2]
    #[arg(long)]
    factor: Option<f64>,
    /// Cap on doublings per cell [default: 30]
    #[arg(long)]
    max_doublings: Option<u32>,
    /// Views forming the posterior a view is checked against [default: leave-one-out]
    #[arg(long, value_enum)]
    scope: Option<ScopeArg>,
}

#[derive(Args)]
struct SmoothArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    /// "auto" (marginal likelihood, Adam on log s with learning rate 0.25) or a
    /// fixed positive value [recommended: auto]
    #[arg(long)]
    smoothing: Option<Smoothing>,
}

#[derive(Args)]
struct InflateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    /// List every cell, not only inflated ones.
    #[arg(long)]
    all: bool,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    common: Common,
    /// Videos as DIR or NAME=DIR: smoothing outputs for --score postvar,
    /// ensemble directories for --score ensvar.
    videos: Vec<String>,
    /// Frames kept by the quality filter per video [recommended: by profile]
    #[arg(long)]
    nf: Option<usize>,
    /// Recording setup fixing the default --nf: fly 450, mouse 21000,
    /// chickadee 1200 [default: fly]
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
    /// Clusters, i.e. selected frames per video [recommended: 25]
    #[arg(long)]
    nv: Option<usize>,
    /// k-means seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Frame score [recommended: postvar]
    #[arg(long, value_enum)]
    score: Option<ScoreArg>,
    /// Source of the 3D poses that are clustered [default: triangulate]
    #[arg(long, value_enum)]
    pose3d: Option<PoseArg>,
    /// Selection strategy [default: targeted]
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    /// Cluster raw poses instead of per-frame median-centered ones.
    #[arg(long)]
    no_median_center: bool,
    /// Ground-truth label directory (<view>.csv) merged into the output.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predictions: a smoothing output, a directory of view CSVs, or an
    /// ensemble directory (evaluated through its median).
    #[arg(long)]
    predictions: PathBuf,
    /// Ground-truth view CSVs.
    #[arg(long)]
    truth: PathBuf,
    /// Ensemble directory whose spread stratifies the error.
    #[arg(long)]
    ensemble: Option<PathBuf>,
    /// Calibration for the reprojection error.
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Comma-separated ascending e.s.d. thresholds [default: 0,1,2,4,8,16]
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    /// How a view's x/y spreads combine [default: max]
    #[arg(long, value_enum)]
    pooling: Option<PoolingArg>,
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// TOML generator configuration; flags override its values.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// [default: 5000]
    #[arg(long)]
    frames: Option<usize>,
    /// [default: 6]
    #[arg(long)]
    views: Option<usize>,
    /// [default: 30]
    #[arg(long)]
    keypoints: Option<usize>,
    /// Ensemble members [default: 3]
    #[arg(long)]
    models: Option<usize>,
}

#[derive(Args)]
struct TriangulateArgs {
    /// A smoothing output, a directory of view CSVs, or an ensemble directory.
    #[arg(long, short)]
    input: PathBuf,
    #[arg(long)]
    calibration: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
}

fn base_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &c.input {
        cfg.input = v.clone();
    }
    if let Some(v) = &c.calibration {
        cfg.calibration = Some(v.clone());
    }
    if let Some(v) = &c.output {
        cfg.output = v.clone();
    }
    if c.jobs.is_some() {
        cfg.jobs = c.jobs;
    }
    Ok(cfg)
}

fn apply_model(cfg: &mut RunConfig, m: &ModelArgs) {
    if let Some(v) = m.mode {
        cfg.mode = match v {
            ModeArg::Linear => Mode::Linear,
            ModeArg::Nonlinear => Mode::Nonlinear,
            ModeArg::Auto => Mode::Auto,
        };
    }
    if let Some(v) = m.latent_dim {
        cfg.latent_dim = v;
    }
    if let Some(v) = m.quantile {
        cfg.quantile = v;
    }
    if m.no_inflation {
        cfg.inflation.enabled = false;
    }
    if let Some(v) = m.threshold {
        cfg.inflation.threshold = v;
    }
    if let Some(v) = m.factor {
        cfg.inflation.factor = v;
    }
    if let Some(v) = m.max_doublings {
        cfg.inflation.max_doublings = v;
    }
    if let Some(v) = m.scope {
        cfg.inflation.scope = match v {
            ScopeArg::LeaveOneOut => PosteriorScope::LeaveOneOut,
            ScopeArg::AllViews => PosteriorScope::AllViews,
        };
    }
}

fn require_input(cfg: &RunConfig) -> Result<()> {
    if cfg.input.as_os_str().is_empty() {
        return Err(Error::Config("no input directory (use --input or `input` in the config)".into()));
    }
    Ok(())
}

fn smooth(a: &SmoothArgs) -> Result<()> {
    let mut cfg = base_config(&a.common)?;
    apply_model(&mut cfg, &a.model);
    if let Some(s) = a.smoothing {
        cfg.smoothing = s;
    }
    require_input(&cfg)?;
    let run = pipeline::run_smooth(&cfg)?;
    pipeline::write_smooth_run(&run, &cfg.output)?;
    for k in &run.keypoints {
        eprintln!(
            "{}: d={} s={:.4e} loglik={:.6e} doublings={}",
            k.track.keypoint,
            k.track.latent_dim(),
            k.fit.s,
            k.track.loglik,
            k.report.as_ref().map_or(0, |r| r.total_doublings())
        );
    }
    Ok(())
}

fn inflate_report(a: &InflateArgs) -> Result<()> {
    let mut cfg = base_config(&a.common)?;
    apply_model(&mut cfg, &a.model);
    cfg.inflation.enabled = true;
    require_input(&cfg)?;
    let (summaries, reports) = pipeline::run_inflate(&cfg)?;
    let names: Vec<&str> = summaries.iter().map(|s| s.keypoint.as_str()).collect();
    let refs: Vec<&InflationReport> = reports.iter().collect();
    let first = &summaries[0];
    pipeline::write_inflation_report(
        &cfg.output.join("inflation_report.csv"),
        &names,
        &first.view_names,
        &first.frame_index,
        &refs,
        a.all,
    )?;
    let total: u64 = reports.iter().map(|r| r.total_doublings()).sum();
    eprintln!("{total} doublings over {} keypoints", reports.len());
    Ok(())
}

fn video_input(arg: &str) -> VideoInput {
    match arg.split_once('=') {
        Some((name, dir)) if !name.is_empty() => VideoInput { name: name.to_string(), dir: PathBuf::from(dir) },
        _ => {
            let dir = PathBuf::from(arg);
            let name = dir.file_name().map_or_else(|| arg.to_string(), |n| n.to_string_lossy().into_owned());
            VideoInput { name, dir }
        }
    }
}

fn select_frames(a: &SelectArgs) -> Result<()> {
    let mut cfg = base_config(&a.common)?;
    let s = &mut cfg.selection;
    if let Some(v) = a.nf {
        s.nf = Some(v);
    }
    if let Some(v) = a.profile {
        s.profile = match v {
            ProfileArg::Fly => RigProfile::Fly,
            ProfileArg::Mouse => RigProfile::Mouse,
            ProfileArg::Chickadee => RigProfile::Chickadee,
        };
    }
    if let Some(v) = a.nv {
        s.nv = v;
    }
    if let Some(v) = a.score {
        s.score = match v {
            ScoreArg::Postvar => Score::Postvar,
            ScoreArg::Ensvar => Score::Ensvar,
        };
    }
    if let Some(v) = a.pose3d {
        s.pose3d = match v {
            PoseArg::Triangulate => Pose3d::Triangulate,
            PoseArg::Pca => Pose3d::Pca,
        };
    }
    if let Some(v) = a.strategy {
        s.strategy = match v {
            StrategyArg::Targeted => Strategy::Targeted,
            StrategyArg::Random => Strategy::Random,
        };
    }
    if a.no_median_center {
        s.median_center = false;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let mut videos: Vec<VideoInput> = a.videos.iter().map(|v| video_input(v)).collect();
    if videos.is_empty() && !cfg.input.as_os_str().is_empty() {
        videos.push(video_input(&cfg.input.to_string_lossy()));
    }
    let (selections, labels) = pipeline::run_select(&videos, &cfg)?;
    pipeline::write_selection(&selections, &labels, a.labels.as_deref(), &cfg.output)?;
    eprintln!("selected {} frames from {} videos", selections.len(), videos.len());
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let mut settings = pipeline::EvaluationSettings::default();
    if let Some(t) = &a.thresholds {
        settings.thresholds = t.clone();
    }
    if let Some(p) = a.pooling {
        settings.pooling = match p {
            PoolingArg::Max => EsdPooling::Max,
            PoolingArg::PerCoordinate => EsdPooling::PerCoordinate,
        };
    }
    let pred = ViewData::read(&a.predictions)?;
    let truth = ViewData::read(&a.truth)?;
    let ens = a.ensemble.as_deref().map(ViewData::read).transpose()?;
    let rig = a.calibration.as_deref().map(|p| pipeline::load_calibration(p, &truth.view_names)).transpose()?;
    let metrics = pipeline::evaluate(&pred, &truth, ens.as_ref(), rig.as_ref(), &settings)?;
    pipeline::write_metrics(&metrics, &a.output)?;
    match metrics.mean_pixel_error {
        Some(e) => eprintln!("mean pixel error {e:.6}"),
        None => eprintln!("no overlapping entries"),
    }
    Ok(())
}

fn synth_cmd(a: &SynthArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            toml::from_str::<SynthConfig>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SynthConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.frames {
        cfg.n_frames = v;
    }
    if let Some(v) = a.views {
        cfg.rig.n_views = v;
    }
    if let Some(v) = a.keypoints {
        cfg.motion.n_keypoints = v;
    }
    if let Some(v) = a.models {
        cfg.n_models = v;
    }
    let data = synth::generate(&cfg)?;
    synth::write_synth(&data, &a.output)?;
    eprintln!("{} corrupted cells recorded in the ledger", data.ledger.len());
    Ok(())
}

fn triangulate(a: &TriangulateArgs) -> Result<()> {
    let data = ViewData::read(&a.input)?;
    let rig = pipeline::load_calibration(&a.calibration, &data.view_names)?;
    let points = pipeline::triangulate_views(&data, &rig)?;
    pipeline::write_triangulated(&data, &points, &a.output)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Smooth(a) => smooth(a),
        Command::InflateReport(a) => inflate_report(a),
        Command::SelectFrames(a) => select_frames(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Synth(a) => synth_cmd(a),
        Command::Triangulate(a) => triangulate(a),
    }
}

fn exit_code(code: i32) -> ExitCode {
    ExitCode::from(u8::try_from(code).unwrap_or(1))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit_code(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(e.class().exit_code())
        }
    }
}
