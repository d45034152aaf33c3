//! Seeded synthetic multi-view data with a ledger of every injected corruption.
//!
//! Keypoints follow 3D random walks (`s_true * E` per step) plus sinusoids,
//! are projected through a ring of look-at cameras, and M ensemble members are
//! drawn around the clean projections. Corruptions:
//!
//! * `outlier`: one member's point in one view replaced by a uniform draw over the image
//! * `confident_outlier`: a shared offset on every member of one view at one frame
//! * `occlusion`: a shared offset on every member of one view over a window of frames
//! * `corrupted_frame`: every keypoint of a frame gets uniform member draws in
//!   one or more views, optionally over bursts of consecutive frames

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calib::io::write_rig;
use crate::calib::{look_at_camera, Distortion, Intrinsics, Rig};
use crate::ensemble::{EnsembleSeries, KeypointTable};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigSpec {
    pub n_views: usize,
    /// Horizontal distance of every camera from the target.
    pub radius: f64,
    pub height: f64,
    pub focal: f64,
    pub width: f64,
    pub image_height: f64,
    pub k1: f64,
    pub k2: f64,
    pub p1: f64,
    pub p2: f64,
}

impl Default for RigSpec {
    fn default() -> Self {
        RigSpec {
            n_views: 6,
            radius: 2.5,
            height: 1.0,
            focal: 600.0,
            width: 640.0,
            image_height: 480.0,
            k1: 0.0,
            k2: 0.0,
            p1: 0.0,
            p2: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sinusoid {
    pub amplitude: f64,
    pub period: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionSpec {
    pub n_keypoints: usize,
    /// Random-walk scale per keypoint, cycled when shorter than `n_keypoints`.
    pub s_true: Vec<f64>,
    /// Per-axis standard deviation of one random-walk step at `s = 1`; `E = diag(step^2)`.
    pub step: [f64; 3],
    pub sinusoids: Vec<Sinusoid>,
    /// Radius of the sphere the keypoint anchors are drawn in.
    pub body_radius: f64,
    /// Shift of the whole body away from the point the cameras look at.
    pub center: [f64; 3],
}

impl Default for MotionSpec {
    fn default() -> Self {
        MotionSpec {
            n_keypoints: 30,
            s_true: vec![1.0],
            step: [0.003; 3],
            sinusoids: vec![Sinusoid { amplitude: 0.05, period: 40.0 }],
            body_radius: 0.25,
            center: [0.0; 3],
        }
    }
}

impl Default for Sinusoid {
    fn default() -> Self {
        Sinusoid { amplitude: 0.05, period: 40.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcclusionWindow {
    /// `None` applies the window to every keypoint.
    pub keypoint: Option<usize>,
    pub view: usize,
    pub start: usize,
    pub length: usize,
    pub bias: [f64; 2],
}

impl Default for OcclusionWindow {
    fn default() -> Self {
        OcclusionWindow { keypoint: None, view: 0, start: 0, length: 0, bias: [0.0; 2] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Member noise standard deviation per view in px, cycled over views.
    pub sigma: Vec<f64>,
    /// Log-normal spread of a per (keypoint, frame, view) multiplier on `sigma`.
    pub difficulty_spread: f64,
    pub outlier_rate: f64,
    pub confident_outlier_rate: f64,
    pub confident_outlier_magnitude: f64,
    pub occlusions: Vec<OcclusionWindow>,
    /// Expected fraction of corrupted frames.
    pub corrupted_frame_rate: f64,
    /// Consecutive frames per corruption burst.
    pub corrupted_frame_burst: usize,
    /// Views corrupted per corrupted frame.
    pub corrupted_frame_views: usize,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            sigma: vec![1.5],
            difficulty_spread: 0.5,
            outlier_rate: 0.01,
            confident_outlier_rate: 0.005,
            confident_outlier_magnitude: 25.0,
            occlusions: Vec::new(),
            corrupted_frame_rate: 0.0,
            corrupted_frame_burst: 1,
            corrupted_frame_views: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub video: String,
    pub n_frames: usize,
    pub n_models: usize,
    pub rig: RigSpec,
    pub motion: MotionSpec,
    pub noise: NoiseSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            video: "synth".into(),
            n_frames: 5000,
            n_models: 3,
            rig: RigSpec::default(),
            motion: MotionSpec::default(),
            noise: NoiseSpec::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_frames == 0 || self.n_models == 0 || self.motion.n_keypoints == 0 {
            return bad("n_frames, n_models and n_keypoints must be positive".into());
        }
        if self.rig.n_views < 2 {
            return bad(format!("at least 2 views required, got {}", self.rig.n_views));
        }
        let n = &self.noise;
        for (name, r) in [
            ("outlier_rate", n.outlier_rate),
            ("confident_outlier_rate", n.confident_outlier_rate),
            ("corrupted_frame_rate", n.corrupted_frame_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} = {r} must lie in [0, 1]"));
            }
        }
        if n.sigma.is_empty() || n.sigma.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) {
            return bad("noise sigma must be non-negative and finite".into());
        }
        if self.motion.s_true.is_empty() || self.motion.s_true.iter().any(|&s| !(s > 0.0)) {
            return bad("s_true must be positive".into());
        }
        if n.corrupted_frame_burst == 0 || n.corrupted_frame_views == 0 || n.corrupted_frame_views > self.rig.n_views {
            return bad(format!(
                "corrupted_frame_burst must be positive and corrupted_frame_views in 1..={}",
                self.rig.n_views
            ));
        }
        if !(n.difficulty_spread >= 0.0) {
            return bad("difficulty_spread must be non-negative".into());
        }
        for w in &n.occlusions {
            if w.view >= self.rig.n_views || w.keypoint.is_some_and(|k| k >= self.motion.n_keypoints) {
                return bad(format!("occlusion window {w:?} is out of range"));
            }
        }
        Ok(())
    }

    pub fn keypoint_names(&self) -> Vec<String> {
        (0..self.motion.n_keypoints).map(|k| format!("kp{k}")).collect()
    }

    pub fn view_names(&self) -> Vec<String> {
        (0..self.rig.n_views).map(|v| format!("cam{v}")).collect()
    }

    pub fn s_true(&self, k: usize) -> f64 {
        self.motion.s_true[k % self.motion.s_true.len()]
    }

    pub fn sigma(&self, v: usize) -> f64 {
        self.noise.sigma[v % self.noise.sigma.len()]
    }

    /// Base random-walk covariance `E`.
    pub fn e_true(&self) -> Matrix3<f64> {
        let s = self.motion.step;
        Matrix3::from_diagonal(&Vector3::new(s[0] * s[0], s[1] * s[1], s[2] * s[2]))
    }

    pub fn build_rig(&self) -> Result<Rig<f64>> {
        let r = &self.rig;
        let intr = Intrinsics { fx: r.focal, fy: r.focal, cx: r.width / 2.0, cy: r.image_height / 2.0 };
        let dist = Distortion { k1: r.k1, k2: r.k2, p1: r.p1, p2: r.p2 };
        let cams = (0..r.n_views)
            .map(|v| {
                let a = std::f64::consts::TAU * v as f64 / r.n_views as f64;
                let eye = Point3::new(r.radius * a.cos(), r.radius * a.sin(), r.height);
                look_at_camera(format!("cam{v}"), eye, Point3::origin(), intr, dist)
            })
            .collect::<Result<Vec<_>>>()?;
        Rig::new(cams)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    Outlier,
    ConfidentOutlier,
    Occlusion,
    CorruptedFrame,
}

impl CorruptionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CorruptionKind::Outlier => "outlier",
            CorruptionKind::ConfidentOutlier => "confident_outlier",
            CorruptionKind::Occlusion => "occlusion",
            CorruptionKind::CorruptedFrame => "corrupted_frame",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corruption {
    pub kind: CorruptionKind,
    pub keypoint: usize,
    pub view: usize,
    pub frame: usize,
    /// `None` when every member was affected.
    pub member: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub config: SynthConfig,
    pub rig: Rig<f64>,
    pub keypoints: Vec<String>,
    pub view_names: Vec<String>,
    pub frame_index: Vec<i64>,
    /// Per keypoint, T x 3.
    pub truth3d: Vec<DMatrix<f64>>,
    /// Per keypoint, T x 2V exact projections.
    pub truth2d: Vec<DMatrix<f64>>,
    pub ensembles: Vec<EnsembleSeries>,
    /// Per keypoint, T x 2V standard deviation of the clean member noise.
    pub member_sigma: Vec<DMatrix<f64>>,
    pub ledger: Vec<Corruption>,
}

impl SynthData {
    /// (keypoint, frame) cells touched by any corruption of the given kinds.
    pub fn corrupted_cells(&self, kinds: &[CorruptionKind]) -> Vec<(usize, usize)> {
        let mut cells: Vec<_> =
            self.ledger.iter().filter(|c| kinds.contains(&c.kind)).map(|c| (c.keypoint, c.frame)).collect();
        cells.sort_unstable();
        cells.dedup();
        cells
    }

    /// Frames touched by any corruption of the given kinds.
    pub fn corrupted_frames(&self, kinds: &[CorruptionKind]) -> Vec<usize> {
        let mut frames: Vec<_> = self.ledger.iter().filter(|c| kinds.contains(&c.kind)).map(|c| c.frame).collect();
        frames.sort_unstable();
        frames.dedup();
        frames
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Draws a dataset; identical configs give bit-identical data.
pub fn generate(config: &SynthConfig) -> Result<SynthData> {
    config.validate()?;
    let rig = config.build_rig()?;
    let (t_n, k_n, v_n, m_n) = (config.n_frames, config.motion.n_keypoints, config.rig.n_views, config.n_models);
    let keypoints = config.keypoint_names();
    let view_names = config.view_names();
    let center = Vector3::from(config.motion.center);

    let mut motion_rng = stream(config.seed, 1);
    let mut truth3d = Vec::with_capacity(k_n);
    for k in 0..k_n {
        let dir = Vector3::new(normal(&mut motion_rng), normal(&mut motion_rng), normal(&mut motion_rng));
        let anchor = center + dir.normalize() * config.motion.body_radius * motion_rng.random::<f64>().cbrt();
        let waves: Vec<(Vector3<f64>, f64, f64)> = config
            .motion
            .sinusoids
            .iter()
            .map(|s| {
                let d = Vector3::new(normal(&mut motion_rng), normal(&mut motion_rng), normal(&mut motion_rng)).normalize();
                (d * s.amplitude, std::f64::consts::TAU / s.period, motion_rng.random::<f64>() * std::f64::consts::TAU)
            })
            .collect();
        let sd = config.s_true(k).sqrt();
        let step = config.motion.step;
        let mut walk = Vector3::zeros();
        let mut track = DMatrix::zeros(t_n, 3);
        for t in 0..t_n {
            if t > 0 {
                for c in 0..3 {
                    walk[c] += sd * step[c] * normal(&mut motion_rng);
                }
            }
            let mut p = anchor + walk;
            for (amp, omega, phase) in &waves {
                p += amp * (omega * t as f64 + phase).sin();
            }
            track.row_mut(t).copy_from(&p.transpose());
        }
        truth3d.push(track);
    }

    let mut truth2d = Vec::with_capacity(k_n);
    for track in &truth3d {
        let mut m = DMatrix::zeros(t_n, 2 * v_n);
        for t in 0..t_n {
            let p = Point3::new(track[(t, 0)], track[(t, 1)], track[(t, 2)]);
            for (v, cam) in rig.cameras().iter().enumerate() {
                let q = cam.project(&p)?;
                m[(t, 2 * v)] = q.x;
                m[(t, 2 * v + 1)] = q.y;
            }
        }
        truth2d.push(m);
    }

    let noise = &config.noise;
    let (w, h) = (config.rig.width, config.rig.image_height);
    let mut ledger = Vec::new();
    let mut corrupt_rng = stream(config.seed, 2);
    let mut corrupted_frames: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let burst_rate = noise.corrupted_frame_rate / noise.corrupted_frame_burst as f64;
    for t in 0..t_n {
        let hit = corrupt_rng.random::<f64>() < burst_rate;
        let mut views = vec![corrupt_rng.random_range(0..v_n)];
        if noise.corrupted_frame_views > 1 {
            let mut pool: Vec<usize> = (0..v_n).collect();
            for i in 0..noise.corrupted_frame_views {
                let j = corrupt_rng.random_range(i..v_n);
                pool.swap(i, j);
            }
            views = pool[..noise.corrupted_frame_views].to_vec();
            views.sort_unstable();
        }
        if hit && !corrupted_frames.contains_key(&t) {
            for tt in t..(t + noise.corrupted_frame_burst).min(t_n) {
                corrupted_frames.insert(tt, views.clone());
            }
        }
    }

    let mut ensembles = Vec::with_capacity(k_n);
    let mut member_sigma = Vec::with_capacity(k_n);
    for k in 0..k_n {
        let mut sig = DMatrix::zeros(t_n, 2 * v_n);
        let mut rng = stream(config.seed, 100 + k as u64);
        // data[t][coord][member]
        let mut data = vec![0.0; t_n * 2 * v_n * m_n];
        let idx = |t: usize, c: usize, m: usize| (t * 2 * v_n + c) * m_n + m;
        for t in 0..t_n {
            for v in 0..v_n {
                let scale = if noise.difficulty_spread > 0.0 { (noise.difficulty_spread * normal(&mut rng)).exp() } else { 1.0 };
                let sigma = config.sigma(v) * scale;
                sig[(t, 2 * v)] = sigma;
                sig[(t, 2 * v + 1)] = sigma;
                for c in 0..2 {
                    let clean = truth2d[k][(t, 2 * v + c)];
                    for m in 0..m_n {
                        data[idx(t, 2 * v + c, m)] = clean + sigma * normal(&mut rng);
                    }
                }
                for m in 0..m_n {
                    if rng.random::<f64>() < noise.outlier_rate {
                        data[idx(t, 2 * v, m)] = rng.random::<f64>() * w;
                        data[idx(t, 2 * v + 1, m)] = rng.random::<f64>() * h;
                        ledger.push(Corruption { kind: CorruptionKind::Outlier, keypoint: k, view: v, frame: t, member: Some(m) });
                    }
                }
            }
            if rng.random::<f64>() < noise.confident_outlier_rate {
                let v = rng.random_range(0..v_n);
                let angle = rng.random::<f64>() * std::f64::consts::TAU;
                let off = [noise.confident_outlier_magnitude * angle.cos(), noise.confident_outlier_magnitude * angle.sin()];
                for m in 0..m_n {
                    for c in 0..2 {
                        data[idx(t, 2 * v + c, m)] += off[c];
                    }
                }
                ledger.push(Corruption { kind: CorruptionKind::ConfidentOutlier, keypoint: k, view: v, frame: t, member: None });
            }
            for &v in corrupted_frames.get(&t).into_iter().flatten() {
                for m in 0..m_n {
                    data[idx(t, 2 * v, m)] = rng.random::<f64>() * w;
                    data[idx(t, 2 * v + 1, m)] = rng.random::<f64>() * h;
                }
                ledger.push(Corruption { kind: CorruptionKind::CorruptedFrame, keypoint: k, view: v, frame: t, member: None });
            }
        }
        for win in noise.occlusions.iter().filter(|o| o.keypoint.is_none_or(|kk| kk == k)) {
            for t in win.start..(win.start + win.length).min(t_n) {
                for m in 0..m_n {
                    for c in 0..2 {
                        data[idx(t, 2 * win.view + c, m)] += win.bias[c];
                    }
                }
                ledger.push(Corruption { kind: CorruptionKind::Occlusion, keypoint: k, view: win.view, frame: t, member: None });
            }
        }
        member_sigma.push(sig);
        ensembles.push(EnsembleSeries::new(keypoints[k].clone(), view_names.clone(), (0..t_n as i64).collect(), m_n, data)?);
    }
    ledger.sort_by(|a, b| (a.keypoint, a.frame, a.view, a.kind, a.member).cmp(&(b.keypoint, b.frame, b.view, b.kind, b.member)));

    Ok(SynthData {
        config: config.clone(),
        rig,
        keypoints,
        view_names,
        frame_index: (0..t_n as i64).collect(),
        truth3d,
        truth2d,
        ensembles,
        member_sigma,
        ledger,
    })
}

/// Writes the dataset in the ingestion layout:
///
/// * `predictions/model_<m>/<view>.csv` ensemble member predictions
/// * `truth/<view>.csv` exact projections, `truth_3d.csv` world positions
/// * `calibration.json`, `ledger.csv`, `synth_config.json`
pub fn write_synth(data: &SynthData, dir: &Path) -> Result<()> {
    let (t_n, m_n) = (data.frame_index.len(), data.config.n_models);
    let width = (m_n.max(1) - 1).to_string().len();
    for m in 0..m_n {
        for (v, view) in data.view_names.iter().enumerate() {
            let mut table = KeypointTable::new(data.frame_index.clone());
            for (k, kp) in data.keypoints.iter().enumerate() {
                let e = &data.ensembles[k];
                table.push_numeric(format!("{kp}_x"), (0..t_n).map(|t| e.value(t, 2 * v, m)).collect())?;
                table.push_numeric(format!("{kp}_y"), (0..t_n).map(|t| e.value(t, 2 * v + 1, m)).collect())?;
                table.push_numeric(format!("{kp}_likelihood"), vec![1.0; t_n])?;
            }
            table.write(&dir.join("predictions").join(format!("model_{m:0width$}")).join(format!("{view}.csv")))?;
        }
    }
    for (v, view) in data.view_names.iter().enumerate() {
        let mut table = KeypointTable::new(data.frame_index.clone());
        for (k, kp) in data.keypoints.iter().enumerate() {
            table.push_numeric(format!("{kp}_x"), data.truth2d[k].column(2 * v).iter().copied().collect())?;
            table.push_numeric(format!("{kp}_y"), data.truth2d[k].column(2 * v + 1).iter().copied().collect())?;
        }
        table.write(&dir.join("truth").join(format!("{view}.csv")))?;
    }
    let mut table = KeypointTable::new(data.frame_index.clone());
    for (k, kp) in data.keypoints.iter().enumerate() {
        for (c, axis) in ["X", "Y", "Z"].iter().enumerate() {
            table.push_numeric(format!("{kp}_{axis}"), data.truth3d[k].column(c).iter().copied().collect())?;
        }
    }
    table.write(&dir.join("truth_3d.csv"))?;
    write_rig(&data.rig, &dir.join("calibration.json"))?;

    let path = dir.join("ledger.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
    w.write_record(["frame", "keypoint", "view", "kind", "member"]).map_err(|e| Error::csv(&path, e))?;
    for c in &data.ledger {
        w.write_record([
            data.frame_index[c.frame].to_string(),
            data.keypoints[c.keypoint].clone(),
            data.view_names[c.view].clone(),
            c.kind.as_str().to_string(),
            c.member.map_or(String::new(), |m| m.to_string()),
        ])
        .map_err(|e| Error::csv(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("synth_config.json");
    let text = serde_json::to_string_pretty(&data.config).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Reads `truth/<view>.csv` back as per-keypoint T x 2V matrices, in the
/// keypoint order of the files.
pub fn read_truth(dir: &Path) -> Result<(Vec<String>, Vec<String>, Vec<i64>, Vec<DMatrix<f64>>)> {
    let tables = crate::ensemble::read_model_dir(dir)?;
    let views: Vec<String> = tables.iter().map(|(v, _)| v.clone()).collect();
    let frames = tables[0].1.frames.clone();
    let keypoints = tables[0].1.keypoints();
    let mut out = Vec::with_capacity(keypoints.len());
    for kp in &keypoints {
        let mut m = DMatrix::zeros(frames.len(), 2 * views.len());
        for (v, (name, t)) in tables.iter().enumerate() {
            if t.frames != frames {
                return Err(Error::Data(format!("{}: frames of view {name} differ", dir.display())));
            }
            let path = dir.join(format!("{name}.csv"));
            m.set_column(2 * v, &nalgebra::DVector::from_column_slice(t.require(&format!("{kp}_x"), &path)?));
            m.set_column(2 * v + 1, &nalgebra::DVector::from_column_slice(t.require(&format!("{kp}_y"), &path)?));
        }
        out.push(m);
    }
    Ok((keypoints, views, frames, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_frames: 200,
            n_models: 3,
            rig: RigSpec { n_views: 3, ..RigSpec::default() },
            motion: MotionSpec { n_keypoints: 2, ..MotionSpec::default() },
            ..SynthConfig::default()
        }
    }

    #[test]
    fn zero_noise_members_equal_projection() {
        let mut cfg = small();
        cfg.noise = NoiseSpec {
            sigma: vec![0.0],
            difficulty_spread: 0.0,
            outlier_rate: 0.0,
            confident_outlier_rate: 0.0,
            ..NoiseSpec::default()
        };
        let data = generate(&cfg).unwrap();
        assert!(data.ledger.is_empty());
        for (k, e) in data.ensembles.iter().enumerate() {
            for t in 0..200 {
                for c in 0..6 {
                    assert!(e.members(t, c).iter().all(|&v| v == data.truth2d[k][(t, c)]));
                }
            }
        }
    }

    #[test]
    fn seed_is_deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let mut other = small();
        other.seed = 1;
        assert_ne!(generate(&other).unwrap().ensembles, a.ensembles);
    }

    #[test]
    fn invalid_rates_are_config_errors() {
        let mut cfg = small();
        cfg.noise.outlier_rate = 1.5;
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
    }
}
