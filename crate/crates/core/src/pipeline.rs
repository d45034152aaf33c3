//! Batch runs over on-disk data: run configuration, the smoothing pipeline,
//! frame selection, evaluation and triangulation, and their artifacts.
//!
//! Output layout of a smoothing run:
//!
//! * `smoothed/<view>.csv`: `frame,<kp>_x,<kp>_y,<kp>_postvar_x,<kp>_postvar_y,...`
//! * `tracks3d/<kp>.csv`: `frame,X,Y,Z,var_X,var_Y,var_Z` (calibrated runs)
//! * `inflation_report.csv`: `frame,view,keypoint,n_doublings,final_distance`
//! * `manifest.json`

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, Point2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calib::{load_rig, triangulate_median, Rig};
use crate::distill::{
    emit_pseudolabels, read_labels, select_video, LabelSource, PoseSource, PseudoLabelSet, RigProfile, SelectConfig,
    Selection, Strategy, VideoPredictions,
};
use crate::ensemble::{format_f64, read_ensemble_dir, read_model_dir, summarize, EnsembleSummary, KeypointTable};
use crate::error::{Error, Result};
use crate::eval::{error_vs_esd, finite_mean, pixel_errors, reprojection_error_3d, ErrorCurve, EsdPooling};
use crate::inflation::{inflate, inflate_seeded, InflationConfig, InflationModel, InflationReport, PosteriorScope};
use crate::linear::{fit_params, optimize_smoothing, smooth, LatentDim, DEFAULT_QUANTILE};
use crate::nonlinear::{fit_params_nonlinear, optimize_smoothing_nonlinear, smooth_nonlinear, Track3d};
use crate::smoothing::{Smoothing, SmoothedTrack, SmoothingFit};

pub const DEFAULT_NV: usize = 25;
pub const DEFAULT_THRESHOLDS: [f64; 6] = [0.0, 1.0, 2.0, 4.0, 8.0, 16.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Linear,
    Nonlinear,
    /// Nonlinear when a calibration is given, linear otherwise.
    #[default]
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Score {
    /// Posterior predictive variance of the smoother.
    #[default]
    Postvar,
    /// Ensemble variance.
    Ensvar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pose3d {
    #[default]
    Triangulate,
    Pca,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InflationSettings {
    pub enabled: bool,
    pub threshold: f64,
    pub factor: f64,
    pub max_doublings: u32,
    pub scope: PosteriorScope,
}

impl Default for InflationSettings {
    fn default() -> Self {
        let c = InflationConfig::default();
        InflationSettings {
            enabled: true,
            threshold: c.threshold,
            factor: c.factor,
            max_doublings: c.max_doublings,
            scope: c.scope,
        }
    }
}

impl InflationSettings {
    pub fn config(&self) -> InflationConfig {
        InflationConfig {
            threshold: self.threshold,
            factor: self.factor,
            max_doublings: self.max_doublings,
            scope: self.scope,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSettings {
    /// Quality-filter size; the profile's default when absent.
    pub nf: Option<usize>,
    pub profile: RigProfile,
    pub nv: usize,
    pub score: Score,
    pub pose3d: Pose3d,
    pub strategy: Strategy,
    pub median_center: bool,
}

impl SelectionSettings {
    pub fn nf(&self) -> usize {
        self.nf.unwrap_or_else(|| self.profile.default_nf())
    }
}

impl Default for SelectionSettings {
    fn default() -> Self {
        SelectionSettings {
            nf: None,
            profile: RigProfile::Fly,
            nv: DEFAULT_NV,
            score: Score::Postvar,
            pose3d: Pose3d::Triangulate,
            strategy: Strategy::Targeted,
            median_center: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSettings {
    pub thresholds: Vec<f64>,
    pub pooling: EsdPooling,
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        EvaluationSettings { thresholds: DEFAULT_THRESHOLDS.to_vec(), pooling: EsdPooling::Max }
    }
}

/// Every tunable of a run. Read from TOML; absent keys take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Ensemble directory `<model>/<view>.csv`.
    pub input: PathBuf,
    pub calibration: Option<PathBuf>,
    pub output: PathBuf,
    pub mode: Mode,
    pub latent_dim: LatentDim,
    /// Max-variance quantile selecting the frames the PCA is fitted on.
    pub quantile: f64,
    pub smoothing: Smoothing,
    pub inflation: InflationSettings,
    pub selection: SelectionSettings,
    pub evaluation: EvaluationSettings,
    pub seed: u64,
    /// Worker threads; `None` lets the runtime decide.
    pub jobs: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input: PathBuf::new(),
            calibration: None,
            output: PathBuf::from("out"),
            mode: Mode::Auto,
            latent_dim: LatentDim::Auto,
            quantile: DEFAULT_QUANTILE,
            smoothing: Smoothing::Auto,
            inflation: InflationSettings::default(),
            selection: SelectionSettings::default(),
            evaluation: EvaluationSettings::default(),
            seed: 0,
            jobs: None,
        }
    }
}

/// The smoother actually run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ResolvedMode {
    Linear,
    Nonlinear,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn resolved_mode(&self) -> Result<ResolvedMode> {
        match (self.mode, &self.calibration) {
            (Mode::Linear, _) => Ok(ResolvedMode::Linear),
            (Mode::Nonlinear, Some(_)) | (Mode::Auto, Some(_)) => Ok(ResolvedMode::Nonlinear),
            (Mode::Nonlinear, None) => Err(Error::Config("nonlinear mode requires a calibration file".into())),
            (Mode::Auto, None) => Ok(ResolvedMode::Linear),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.resolved_mode()?;
        if !(self.quantile > 0.0 && self.quantile <= 1.0) {
            return Err(Error::Config(format!("quantile {} must lie in (0, 1]", self.quantile)));
        }
        if let LatentDim::Fixed(0) = self.latent_dim {
            return Err(Error::Config("latent dimension must be at least 1".into()));
        }
        if let Smoothing::Fixed(s) = self.smoothing {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("smoothing parameter {s} must be positive")));
            }
        }
        self.inflation.config().validate()?;
        if self.selection.nf() == 0 || self.selection.nv == 0 {
            return Err(Error::Config("nf and nv must be at least 1".into()));
        }
        let th = &self.evaluation.thresholds;
        if th.iter().any(|&t| !(t >= 0.0)) || th.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("thresholds must be non-negative and strictly ascending".into()));
        }
        if self.jobs == Some(0) {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        Ok(())
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(j) = self.jobs {
            b = b.num_threads(j);
        }
        b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
    }

    fn rig(&self, views: &[String]) -> Result<Option<Rig<f64>>> {
        self.calibration.as_deref().map(|p| load_rig(p)?.reordered(views)).transpose()
    }
}

/// Result of smoothing one keypoint.
#[derive(Debug, Clone)]
pub struct KeypointRun {
    pub track: SmoothedTrack,
    pub track3d: Option<Track3d>,
    pub fit: SmoothingFit,
    pub report: Option<InflationReport>,
    /// Cumulative PCA explained variance (linear mode).
    pub explained: Option<Vec<f64>>,
    pub frames_used: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct SmoothRun {
    pub config: RunConfig,
    pub mode: ResolvedMode,
    pub view_names: Vec<String>,
    pub frame_index: Vec<i64>,
    pub keypoints: Vec<KeypointRun>,
}

/// Fit, inflate, select `s` and smooth one keypoint, in that order.
pub fn smooth_keypoint(summary: &EnsembleSummary, rig: Option<&Rig<f64>>, cfg: &RunConfig) -> Result<KeypointRun> {
    let icfg = cfg.inflation.config();
    match rig {
        None => {
            let model = fit_params(summary, cfg.latent_dim, cfg.quantile)?;
            let report =
                cfg.inflation.enabled.then(|| inflate(summary, InflationModel::Linear(&model), &icfg)).transpose()?;
            let data = report.as_ref().map_or_else(|| summary.clone(), |r| summary.with_variance(r.inflated_vars.clone()));
            let fit = optimize_smoothing(&model, &data, cfg.smoothing)?;
            let track = smooth(&model.with_smoothing(fit.s), &data)?;
            Ok(KeypointRun {
                track,
                track3d: None,
                fit,
                report,
                explained: Some(model.explained.clone()),
                frames_used: Some(model.frames_used),
            })
        }
        Some(rig) => {
            let model = fit_params_nonlinear(rig, summary)?;
            let report = cfg
                .inflation
                .enabled
                .then(|| inflate_seeded(summary, InflationModel::Nonlinear(rig), &icfg, Some(&model.init_track)))
                .transpose()?;
            let data = report.as_ref().map_or_else(|| summary.clone(), |r| summary.with_variance(r.inflated_vars.clone()));
            let fit = optimize_smoothing_nonlinear(rig, &model, &data, cfg.smoothing)?;
            let (track, track3d) = smooth_nonlinear(rig, &model.with_smoothing(fit.s), &data)?;
            Ok(KeypointRun { track, track3d: Some(track3d), fit, report, explained: None, frames_used: None })
        }
    }
}

/// Reads the ensemble and summarizes every keypoint.
pub fn load_summaries(input: &Path) -> Result<Vec<EnsembleSummary>> {
    read_ensemble_dir(input)?.iter().map(summarize).collect()
}

pub fn run_smooth(cfg: &RunConfig) -> Result<SmoothRun> {
    cfg.validate()?;
    let mode = cfg.resolved_mode()?;
    let summaries = load_summaries(&cfg.input)?;
    let view_names = summaries[0].view_names.clone();
    let rig = match mode {
        ResolvedMode::Nonlinear => cfg.rig(&view_names)?,
        ResolvedMode::Linear => None,
    };
    let keypoints = cfg
        .pool()?
        .install(|| summaries.par_iter().map(|s| smooth_keypoint(s, rig.as_ref(), cfg)).collect::<Result<Vec<_>>>())?;
    Ok(SmoothRun { config: cfg.clone(), mode, view_names, frame_index: summaries[0].frame_index.clone(), keypoints })
}

fn column(m: &DMatrix<f64>, c: usize) -> Vec<f64> {
    m.column(c).iter().copied().collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Writes per-view `frame,<kp>_x,<kp>_y,<kp>_postvar_x,<kp>_postvar_y` tables.
pub fn write_smoothed(tracks: &[&SmoothedTrack], dir: &Path) -> Result<()> {
    let first = tracks.first().ok_or_else(|| Error::Data("no keypoints".into()))?;
    for (v, view) in first.view_names.iter().enumerate() {
        let mut table = KeypointTable::new(first.frame_index.clone());
        for tr in tracks {
            let kp = &tr.keypoint;
            table.push_numeric(format!("{kp}_x"), column(&tr.means, 2 * v))?;
            table.push_numeric(format!("{kp}_y"), column(&tr.means, 2 * v + 1))?;
            table.push_numeric(format!("{kp}_postvar_x"), column(&tr.pred_vars, 2 * v))?;
            table.push_numeric(format!("{kp}_postvar_y"), column(&tr.pred_vars, 2 * v + 1))?;
        }
        table.write(&dir.join(format!("{view}.csv")))?;
    }
    Ok(())
}

pub fn write_track3d(track: &Track3d, path: &Path) -> Result<()> {
    let mut table = KeypointTable::new(track.frame_index.clone());
    for (c, axis) in ["X", "Y", "Z"].iter().enumerate() {
        table.push_numeric(*axis, column(&track.means, c))?;
    }
    for (c, axis) in ["X", "Y", "Z"].iter().enumerate() {
        table.push_numeric(format!("var_{axis}"), column(&track.vars, c))?;
    }
    table.write(path)
}

/// Inflation report rows ordered by frame, view, keypoint. Without `all`, only
/// cells with at least one doubling are listed.
pub fn write_inflation_report(
    path: &Path,
    keypoints: &[&str],
    view_names: &[String],
    frame_index: &[i64],
    reports: &[&InflationReport],
    all: bool,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["frame", "view", "keypoint", "n_doublings", "final_distance"]).map_err(|e| Error::csv(path, e))?;
    for (t, frame) in frame_index.iter().enumerate() {
        for (v, view) in view_names.iter().enumerate() {
            for (kp, r) in keypoints.iter().zip(reports) {
                let n = r.n_doublings[(t, v)];
                if all || n > 0 {
                    w.write_record([
                        frame.to_string(),
                        view.clone(),
                        kp.to_string(),
                        n.to_string(),
                        format_f64(r.final_distance[(t, v)]),
                    ])
                    .map_err(|e| Error::csv(path, e))?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize)]
struct Constants {
    adam_learning_rate: f64,
    adam_max_iter: usize,
    adam_tol: f64,
    log_s_step: f64,
    variance_floor: f64,
    variance_floor_missing: f64,
    explained_target: f64,
    e_regularization: f64,
    initial_cov_scale: f64,
}

#[derive(Debug, Serialize)]
struct KeypointManifest<'a> {
    name: &'a str,
    latent_dim: usize,
    s_init: f64,
    s: f64,
    log_likelihood: f64,
    log_likelihood_init: f64,
    adam_iterations: usize,
    explained_variance: Option<&'a [f64]>,
    pca_frames: Option<usize>,
    inflation_doublings: u64,
    inflated_frames: usize,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    config: &'a RunConfig,
    mode: ResolvedMode,
    views: &'a [String],
    n_frames: usize,
    constants: Constants,
    keypoints: Vec<KeypointManifest<'a>>,
}

/// Writes every artifact of a smoothing run under `dir`.
pub fn write_smooth_run(run: &SmoothRun, dir: &Path) -> Result<()> {
    let tracks: Vec<&SmoothedTrack> = run.keypoints.iter().map(|k| &k.track).collect();
    write_smoothed(&tracks, &dir.join("smoothed"))?;
    for k in &run.keypoints {
        if let Some(t3) = &k.track3d {
            write_track3d(t3, &dir.join("tracks3d").join(format!("{}.csv", k.track.keypoint)))?;
        }
    }
    let reports: Vec<&InflationReport> = run.keypoints.iter().filter_map(|k| k.report.as_ref()).collect();
    if reports.len() == run.keypoints.len() {
        let names: Vec<&str> = run.keypoints.iter().map(|k| k.track.keypoint.as_str()).collect();
        write_inflation_report(&dir.join("inflation_report.csv"), &names, &run.view_names, &run.frame_index, &reports, false)?;
    }
    let manifest = Manifest {
        tool: "mveks",
        version: env!("CARGO_PKG_VERSION"),
        config: &run.config,
        mode: run.mode,
        views: &run.view_names,
        n_frames: run.frame_index.len(),
        constants: Constants {
            adam_learning_rate: crate::smoothing::ADAM_LEARNING_RATE,
            adam_max_iter: crate::smoothing::ADAM_MAX_ITER,
            adam_tol: crate::smoothing::ADAM_TOL,
            log_s_step: crate::ssm::LOG_S_STEP,
            variance_floor: crate::ensemble::VARIANCE_FLOOR,
            variance_floor_missing: crate::ensemble::VARIANCE_FLOOR_MISSING,
            explained_target: crate::linear::EXPLAINED_TARGET,
            e_regularization: crate::linear::E_REGULARIZATION,
            initial_cov_scale: crate::linear::INITIAL_COV_SCALE,
        },
        keypoints: run
            .keypoints
            .iter()
            .map(|k| KeypointManifest {
                name: &k.track.keypoint,
                latent_dim: k.track.latent_dim(),
                s_init: k.fit.s_init,
                s: k.fit.s,
                log_likelihood: k.track.loglik,
                log_likelihood_init: k.fit.log_likelihood_init,
                adam_iterations: k.fit.iterations,
                explained_variance: k.explained.as_deref(),
                pca_frames: k.frames_used,
                inflation_doublings: k.report.as_ref().map_or(0, |r| r.total_doublings()),
                inflated_frames: k.report.as_ref().map_or(0, |r| r.inflated_frames().len()),
            })
            .collect(),
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

/// Inflation only: fit the observation model and run the consistency check.
pub fn run_inflate(cfg: &RunConfig) -> Result<(Vec<EnsembleSummary>, Vec<InflationReport>)> {
    cfg.validate()?;
    let summaries = load_summaries(&cfg.input)?;
    let rig = match cfg.resolved_mode()? {
        ResolvedMode::Nonlinear => cfg.rig(&summaries[0].view_names)?,
        ResolvedMode::Linear => None,
    };
    let icfg = cfg.inflation.config();
    let reports = cfg.pool()?.install(|| {
        summaries
            .par_iter()
            .map(|s| match &rig {
                Some(rig) => inflate(s, InflationModel::Nonlinear(rig), &icfg),
                None => inflate(s, InflationModel::Linear(&fit_params(s, cfg.latent_dim, cfg.quantile)?), &icfg),
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok((summaries, reports))
}

/// 2D keypoint data aligned across views: one T x 2V matrix per keypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewData {
    pub view_names: Vec<String>,
    pub frame_index: Vec<i64>,
    pub keypoints: Vec<String>,
    pub coords: Vec<DMatrix<f64>>,
    /// Per-keypoint T x 2V variances, when the source carries them.
    pub vars: Option<Vec<DMatrix<f64>>>,
}

impl ViewData {
    /// Reads a smoothing run's output (`<dir>/smoothed`), a directory of view
    /// CSVs, or an ensemble directory (reduced to its median and variance).
    pub fn read(dir: &Path) -> Result<Self> {
        let smoothed = dir.join("smoothed");
        if smoothed.is_dir() {
            return Self::read_views(&smoothed);
        }
        let has_csv = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok())
            .any(|e| e.path().extension().is_some_and(|x| x == "csv"));
        if has_csv {
            return Self::read_views(dir);
        }
        let summaries = load_summaries(dir)?;
        Ok(ViewData {
            view_names: summaries[0].view_names.clone(),
            frame_index: summaries[0].frame_index.clone(),
            keypoints: summaries.iter().map(|s| s.keypoint.clone()).collect(),
            coords: summaries.iter().map(|s| s.median.clone()).collect(),
            vars: Some(summaries.iter().map(|s| s.variance.clone()).collect()),
        })
    }

    fn read_views(dir: &Path) -> Result<Self> {
        let tables = read_model_dir(dir)?;
        let view_names: Vec<String> = tables.iter().map(|(v, _)| v.clone()).collect();
        let first = &tables[0].1;
        let keypoints = first.keypoints();
        let frame_index = first.frames.clone();
        let t_n = frame_index.len();
        let has_vars = keypoints.iter().all(|kp| first.numeric(&format!("{kp}_postvar_x")).is_some());
        let mut coords = Vec::with_capacity(keypoints.len());
        let mut vars = Vec::with_capacity(keypoints.len());
        for kp in &keypoints {
            let mut c = DMatrix::zeros(t_n, 2 * view_names.len());
            let mut s = DMatrix::zeros(t_n, 2 * view_names.len());
            for (v, (name, t)) in tables.iter().enumerate() {
                let path = dir.join(format!("{name}.csv"));
                if t.frames != frame_index {
                    return Err(Error::Data(format!("{}: frame column differs", path.display())));
                }
                for (k, axis) in ["x", "y"].iter().enumerate() {
                    c.set_column(2 * v + k, &nalgebra::DVector::from_column_slice(t.require(&format!("{kp}_{axis}"), &path)?));
                    if has_vars {
                        let col = t.require(&format!("{kp}_postvar_{axis}"), &path)?;
                        s.set_column(2 * v + k, &nalgebra::DVector::from_column_slice(col));
                    }
                }
            }
            coords.push(c);
            vars.push(s);
        }
        Ok(ViewData { view_names, frame_index, keypoints, coords, vars: has_vars.then_some(vars) })
    }

    fn keypoint(&self, name: &str) -> Option<usize> {
        self.keypoints.iter().position(|k| k == name)
    }

    fn predictions(&self, video: &str, source: LabelSource) -> Result<VideoPredictions> {
        let vars = self
            .vars
            .clone()
            .ok_or_else(|| Error::Data(format!("video {video:?}: predictions carry no variances")))?;
        Ok(VideoPredictions {
            video: video.to_string(),
            frame_index: self.frame_index.clone(),
            view_names: self.view_names.clone(),
            keypoints: self.keypoints.clone(),
            means: self.coords.clone(),
            vars,
            source,
        })
    }
}

/// One video to select from: its name and a smoothing-run output (for the
/// posterior-variance score) or an ensemble directory (ensemble variance).
#[derive(Debug, Clone)]
pub struct VideoInput {
    pub name: String,
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionRecord {
    pub video: String,
    pub frame: i64,
    pub cluster: Option<usize>,
    pub sigma2_max: f64,
}

/// Quality filter and diversity selection per video; videos run in parallel.
pub fn run_select(videos: &[VideoInput], cfg: &RunConfig) -> Result<(Vec<Selection>, PseudoLabelSet)> {
    cfg.validate()?;
    if videos.is_empty() {
        return Err(Error::Config("no input videos".into()));
    }
    let s = cfg.selection;
    let per_video = cfg.pool()?.install(|| {
        videos
            .par_iter()
            .map(|vi| {
                let pred = match s.score {
                    Score::Postvar => {
                        let data = ViewData::read(&vi.dir)?;
                        if data.vars.is_none() {
                            return Err(Error::Data(format!("{}: no posterior variances", vi.dir.display())));
                        }
                        data.predictions(&vi.name, LabelSource::Eks)?
                    }
                    Score::Ensvar => VideoPredictions::from_summaries(vi.name.clone(), &load_summaries(&vi.dir)?)?,
                };
                let rig = match s.pose3d {
                    Pose3d::Triangulate => Some(
                        cfg.rig(&pred.view_names)?
                            .ok_or_else(|| Error::Config("triangulated poses require a calibration file".into()))?,
                    ),
                    Pose3d::Pca => None,
                };
                let pose = rig.as_ref().map_or(PoseSource::Pca, PoseSource::Triangulate);
                let sc = SelectConfig {
                    nf: s.nf(),
                    nv: s.nv,
                    seed: cfg.seed,
                    strategy: s.strategy,
                    pose,
                    median_center: s.median_center,
                };
                let sel = select_video(&pred, &sc)?;
                let labels = PseudoLabelSet::from_selection(&pred, &sel)?;
                Ok((sel, labels))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut selections = Vec::new();
    let mut labels: Option<PseudoLabelSet> = None;
    for (sel, l) in per_video {
        selections.extend(sel);
        match &mut labels {
            Some(all) => all.extend(l)?,
            None => labels = Some(l),
        }
    }
    Ok((selections, labels.expect("at least one video")))
}

/// Writes `selection.jsonl` and the combined label files under `dir/labels`.
pub fn write_selection(
    selections: &[Selection],
    labels: &PseudoLabelSet,
    ground_truth: Option<&Path>,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut text = String::new();
    for s in selections {
        let rec = SelectionRecord { video: s.video.clone(), frame: s.frame, cluster: s.cluster, sigma2_max: s.sigma2_max };
        text += &serde_json::to_string(&rec).map_err(|e| Error::json(dir.join("selection.jsonl"), e))?;
        text.push('\n');
    }
    let path = dir.join("selection.jsonl");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    let gt = ground_truth.map(|p| read_labels(p, "")).transpose()?;
    emit_pseudolabels(labels, gt.as_ref(), &dir.join("labels"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KeypointMetrics {
    pub keypoint: String,
    pub mean_pixel_error: Option<f64>,
    pub rmse: Option<f64>,
    pub mean_reprojection_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub n_frames: usize,
    pub views: Vec<String>,
    pub mean_pixel_error: Option<f64>,
    pub rmse: Option<f64>,
    pub mean_reprojection_error: Option<f64>,
    pub keypoints: Vec<KeypointMetrics>,
    pub pooling: EsdPooling,
    pub curve: Option<ErrorCurve>,
}

fn rmse(errors: &DMatrix<f64>) -> Option<f64> {
    finite_mean(errors.map(|e| e * e).iter()).map(f64::sqrt)
}

/// Pixel error of `pred` against `truth`, stratified by the e.s.d. of
/// `ensemble` when given, plus calibrated reprojection error when `rig` is.
pub fn evaluate(
    pred: &ViewData,
    truth: &ViewData,
    ensemble: Option<&ViewData>,
    rig: Option<&Rig<f64>>,
    settings: &EvaluationSettings,
) -> Result<Metrics> {
    if pred.view_names != truth.view_names || pred.frame_index != truth.frame_index {
        return Err(Error::ShapeMismatch("predictions and truth differ in views or frames".into()));
    }
    let mut p_all = Vec::new();
    let mut t_all = Vec::new();
    let mut e_all = Vec::new();
    let mut per_kp = Vec::new();
    let mut all_err = Vec::new();
    let mut all_reproj = Vec::new();
    for (k, kp) in truth.keypoints.iter().enumerate() {
        let pk = pred.keypoint(kp).ok_or_else(|| Error::Data(format!("keypoint {kp:?} missing from predictions")))?;
        let err = pixel_errors(&pred.coords[pk], &truth.coords[k])?;
        let reproj = rig.map(|r| reprojection_error_3d(r, &pred.coords[pk])).transpose()?;
        per_kp.push(KeypointMetrics {
            keypoint: kp.clone(),
            mean_pixel_error: finite_mean(err.iter()),
            rmse: rmse(&err),
            mean_reprojection_error: reproj.as_ref().and_then(|r| finite_mean(r.iter())),
        });
        all_err.extend(err.iter().copied());
        all_reproj.extend(reproj.into_iter().flatten());
        if let Some(ens) = ensemble {
            if ens.view_names != truth.view_names || ens.frame_index != truth.frame_index {
                return Err(Error::ShapeMismatch("ensemble and truth differ in views or frames".into()));
            }
            let ek = ens.keypoint(kp).ok_or_else(|| Error::Data(format!("keypoint {kp:?} missing from ensemble")))?;
            let vars = ens.vars.as_ref().ok_or_else(|| Error::Data("ensemble carries no variances".into()))?;
            p_all.push(pred.coords[pk].clone());
            t_all.push(truth.coords[k].clone());
            e_all.push(vars[ek].map(f64::sqrt));
        }
    }
    let curve = ensemble
        .is_some()
        .then(|| error_vs_esd(&p_all, &t_all, &e_all, &settings.thresholds, settings.pooling))
        .transpose()?;
    let all = DMatrix::from_vec(all_err.len(), 1, all_err);
    Ok(Metrics {
        n_frames: truth.frame_index.len(),
        views: truth.view_names.clone(),
        mean_pixel_error: finite_mean(all.iter()),
        rmse: rmse(&all),
        mean_reprojection_error: rig.and_then(|_| finite_mean(all_reproj.iter())),
        keypoints: per_kp,
        pooling: settings.pooling,
        curve,
    })
}

/// Writes `metrics.json` and, when stratified, `curve.csv`
/// (`threshold,error,fraction`, error empty for empty strata).
pub fn write_metrics(metrics: &Metrics, dir: &Path) -> Result<()> {
    write_json(&dir.join("metrics.json"), metrics)?;
    if let Some(c) = &metrics.curve {
        let path = dir.join("curve.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
        w.write_record(["threshold", "error", "fraction"]).map_err(|e| Error::csv(&path, e))?;
        for i in 0..c.thresholds.len() {
            w.write_record([
                format_f64(c.thresholds[i]),
                c.mean_error[i].map_or(String::new(), format_f64),
                format_f64(c.fraction_included[i]),
            ])
            .map_err(|e| Error::csv(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Median-of-pairs triangulation of every frame and keypoint, with the mean
/// reprojection residual; NaN rows where fewer than two views are usable.
pub fn triangulate_views(data: &ViewData, rig: &Rig<f64>) -> Result<Vec<(DMatrix<f64>, Vec<f64>)>> {
    if rig.len() != data.view_names.len() {
        return Err(Error::ShapeMismatch(format!("rig has {} cameras, data {} views", rig.len(), data.view_names.len())));
    }
    data.coords
        .par_iter()
        .map(|m| {
            let mut pts3 = DMatrix::from_element(m.nrows(), 3, f64::NAN);
            for t in 0..m.nrows() {
                let pts: Vec<Option<Point2<f64>>> = (0..rig.len())
                    .map(|v| {
                        let (x, y) = (m[(t, 2 * v)], m[(t, 2 * v + 1)]);
                        (x.is_finite() && y.is_finite()).then(|| Point2::new(x, y))
                    })
                    .collect();
                match triangulate_median(rig, &pts) {
                    Ok(p) => pts3.row_mut(t).copy_from_slice(p.coords.as_slice()),
                    Err(Error::InsufficientViews { .. } | Error::DegenerateGeometry(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            Ok((pts3, reprojection_error_3d(rig, m)?))
        })
        .collect()
}

/// Writes `<kp>.csv` per keypoint: `frame,X,Y,Z,reprojection_error`.
pub fn write_triangulated(data: &ViewData, points: &[(DMatrix<f64>, Vec<f64>)], dir: &Path) -> Result<()> {
    for (kp, (p, r)) in data.keypoints.iter().zip(points) {
        let mut table = KeypointTable::new(data.frame_index.clone());
        for (c, axis) in ["X", "Y", "Z"].iter().enumerate() {
            table.push_numeric(*axis, column(p, c))?;
        }
        table.push_numeric("reprojection_error", r.clone())?;
        table.write(&dir.join(format!("{kp}.csv")))?;
    }
    Ok(())
}

pub fn load_calibration(path: &Path, views: &[String]) -> Result<Rig<f64>> {
    load_rig(path)?.reordered(views)
}
