//! Synthetic knee radiographs with graded OA features, ground-truth joint
//! centers and simulated readers.
//!
//! Geometry is defined in reference pixels (0.2 mm) around the joint center
//! and sampled at the exam's native spacing. Each view sees its own noisy
//! copy of the latent severity `s`, so the two views carry partly
//! independent evidence; the lateral view is additionally degraded.

use crate::curate::{self, ExamRecord, Side, View};
use crate::error::{invalid, Error, Result};
use crate::preprocess::{self, Image, Raster16, REFERENCE_SPACING};
use crate::rng;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

/// Training-row KL grade counts used as the default cohort distribution.
pub const TABLE2_TRAIN_COUNTS: [f64; 5] = [5600.0, 1951.0, 2228.0, 2475.0, 1150.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReaderConfig {
    /// Adjacent-swap probability at the boundaries 0/1, 1/2, 2/3, 3/4.
    pub boundary_probabilities: [f64; 4],
    /// One multiplicative bias per reader: positive values read up.
    pub biases: Vec<f64>,
}

impl Default for ReaderConfig {
    fn default() -> Self {
        ReaderConfig {
            boundary_probabilities: [0.25, 0.12, 0.12, 0.12],
            biases: vec![-0.3, -0.15, 0.0, 0.15, 0.3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    /// Canvas side in reference pixels.
    pub canvas: usize,
    /// Native spacings (mm/px); each exam picks one uniformly.
    pub pixel_spacings: Vec<f64>,
    pub center_jitter: f64,
    /// Joint-space width at s = 0 and s = 4, reference pixels.
    pub jsw_max: f64,
    pub jsw_min: f64,
    pub osteophyte_radius_min: f64,
    pub osteophyte_radius_max: f64,
    /// Added subchondral intensity at s = 4.
    pub sclerosis_max: f64,
    pub lat_osteophyte_contrast: f64,
    pub lat_occlusions: usize,
    pub lat_noise_factor: f64,
    /// Gaussian pixel noise, in units of the bone-to-background contrast.
    pub noise_sigma: f64,
    /// Standard deviation of each view's perceived severity around `s`.
    pub view_noise_pa: f64,
    pub view_noise_lat: f64,
    /// Half-width of the uniform latent severity around the grade.
    pub severity_spread: f64,
    pub grade_distribution: [f64; 5],
    /// Fraction of grade-2 knees recorded as 1.9.
    pub grade_1_9_fraction: f64,
    pub flagged_fraction: f64,
    pub missing_grade_fraction: f64,
    pub missing_lat_fraction: f64,
    pub duplicate_fraction: f64,
    pub n_patients: usize,
    pub visits_per_patient: u32,
    pub readers: ReaderConfig,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            canvas: 1400,
            pixel_spacings: vec![REFERENCE_SPACING],
            center_jitter: 150.0,
            jsw_max: 70.0,
            jsw_min: 14.0,
            osteophyte_radius_min: 10.0,
            osteophyte_radius_max: 45.0,
            sclerosis_max: 0.3,
            lat_osteophyte_contrast: 0.35,
            lat_occlusions: 4,
            lat_noise_factor: 1.6,
            noise_sigma: 0.04,
            view_noise_pa: 0.25,
            view_noise_lat: 0.4,
            severity_spread: 0.5,
            grade_distribution: TABLE2_TRAIN_COUNTS,
            grade_1_9_fraction: 0.1,
            flagged_fraction: 0.02,
            missing_grade_fraction: 0.02,
            missing_lat_fraction: 0.02,
            duplicate_fraction: 0.02,
            n_patients: 100,
            visits_per_patient: 1,
            readers: ReaderConfig::default(),
            seed: 0,
        }
    }
}

/// Half-extent of the fixed detection box, reference pixels.
const BOX_HALF: f64 = 500.0;

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let margin = self.canvas as f64 / 2.0 - self.center_jitter;
        if margin < BOX_HALF {
            return Err(invalid!(
                "canvas {} with jitter ±{} cannot hold a 1000-px box around every center",
                self.canvas,
                self.center_jitter
            ));
        }
        if self.pixel_spacings.is_empty() || self.pixel_spacings.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(invalid!("pixel_spacings must be a non-empty list of positive values"));
        }
        if !(self.jsw_max > self.jsw_min && self.jsw_min > 0.0) {
            return Err(invalid!("need jsw_max > jsw_min > 0"));
        }
        if self.grade_distribution.iter().any(|&p| p < 0.0 || !p.is_finite())
            || self.grade_distribution.iter().sum::<f64>() <= 0.0
        {
            return Err(invalid!("grade_distribution must be non-negative with a positive sum"));
        }
        for (name, f) in [
            ("grade_1_9_fraction", self.grade_1_9_fraction),
            ("flagged_fraction", self.flagged_fraction),
            ("missing_grade_fraction", self.missing_grade_fraction),
            ("missing_lat_fraction", self.missing_lat_fraction),
            ("duplicate_fraction", self.duplicate_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(invalid!("{name} must lie in [0, 1], got {f}"));
            }
        }
        if self.readers.boundary_probabilities.iter().any(|p| !(0.0..=0.5).contains(p)) {
            return Err(invalid!("reader boundary probabilities must lie in [0, 0.5]"));
        }
        if self.readers.biases.iter().any(|b| !(-1.0..=1.0).contains(b)) {
            return Err(invalid!("reader biases must lie in [-1, 1]"));
        }
        Ok(())
    }

    /// Joint-space width for a perceived severity.
    pub fn joint_space_width(&self, s: f64) -> f64 {
        self.jsw_max - (self.jsw_max - self.jsw_min) * s.clamp(0.0, 4.0) / 4.0
    }

    pub fn osteophyte_radius(&self, s: f64) -> f64 {
        self.osteophyte_radius_min + (self.osteophyte_radius_max - self.osteophyte_radius_min) * s.clamp(0.0, 4.0) / 4.0
    }

    pub fn sclerosis_amplitude(&self, s: f64) -> f64 {
        self.sclerosis_max * s.clamp(0.0, 4.0) / 4.0
    }
}

/// Identifies one knee appearance.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ExamKey {
    pub patient_id: String,
    pub visit: u32,
    pub side: Side,
}

impl ExamKey {
    fn stream_ids(&self, tag: u64) -> [u64; 4] {
        [rng::hash_str(&self.patient_id), self.visit as u64, self.side as u64, tag]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Blob {
    dx: f64,
    dy: f64,
    rx: f64,
    ry: f64,
    delta: f64,
}

/// Everything random about one exam except pixel noise.
#[derive(Clone, Debug, PartialEq)]
pub struct ExamPlan {
    pub key: ExamKey,
    pub severity: f64,
    pub kl_grade: u8,
    pub severity_pa: f64,
    pub severity_lat: f64,
    pub osteophytes: usize,
    pub pixel_spacing: f64,
    /// Joint centers in reference pixels.
    pub center_pa_ref: (f64, f64),
    pub center_lat_ref: (f64, f64),
    gain: [f64; 2],
    blobs: Vec<Blob>,
    /// Offset of the second (superimposed) condyle in the lateral view.
    condyle_shift: (f64, f64),
}

/// Perceived severity: `s` plus Gaussian noise that tapers to zero at the
/// ends of the scale, so s = 0 and s = 4 render exactly at the ramp limits.
fn perceived(s: f64, sigma: f64, z: f64) -> f64 {
    let taper = (s * (4.0 - s)).max(0.0).sqrt() / 2.0;
    (s + sigma * taper * z).clamp(0.0, 4.0)
}

pub fn kl_from_severity(s: f64) -> u8 {
    s.round().clamp(0.0, 4.0) as u8
}

pub fn plan_exam(config: &PhantomConfig, key: &ExamKey, severity: f64) -> Result<ExamPlan> {
    if !(0.0..=4.0).contains(&severity) {
        return Err(invalid!("latent severity {severity} outside [0, 4]"));
    }
    let mut r = rng::stream(config.seed, &key.stream_ids(1));
    let z = Normal::new(0.0, 1.0).expect("unit normal");
    let severity_pa = perceived(severity, config.view_noise_pa, z.sample(&mut r));
    let severity_lat = perceived(severity, config.view_noise_lat, z.sample(&mut r));
    let half = config.canvas as f64 / 2.0;
    let jitter = |r: &mut rand_chacha::ChaCha8Rng| {
        if config.center_jitter > 0.0 {
            r.random_range(-config.center_jitter..=config.center_jitter)
        } else {
            0.0
        }
    };
    let center_pa_ref = (half + jitter(&mut r), half + jitter(&mut r));
    let center_lat_ref = (half + jitter(&mut r), half + jitter(&mut r));
    let pixel_spacing = config.pixel_spacings[r.random_range(0..config.pixel_spacings.len())];
    let gain = [r.random_range(0.85..1.15), r.random_range(0.85..1.15)];
    let blobs = (0..config.lat_occlusions)
        .map(|_| Blob {
            dx: r.random_range(-220.0..220.0),
            dy: r.random_range(-220.0..220.0),
            rx: r.random_range(40.0..130.0),
            ry: r.random_range(40.0..130.0),
            delta: r.random_range(0.08..0.2) * if r.random_bool(0.5) { 1.0 } else { -1.0 },
        })
        .collect();
    let condyle_shift = (r.random_range(-40.0..40.0), r.random_range(0.0..config.jsw_min * 1.5));
    Ok(ExamPlan {
        key: key.clone(),
        severity,
        kl_grade: kl_from_severity(severity),
        severity_pa,
        severity_lat,
        osteophytes: severity.ceil() as usize,
        pixel_spacing,
        center_pa_ref,
        center_lat_ref,
        gain,
        blobs,
        condyle_shift,
    })
}

impl ExamPlan {
    /// Native-pixel dimensions of the canvas.
    pub fn native_size(&self, config: &PhantomConfig) -> usize {
        (config.canvas as f64 * REFERENCE_SPACING / self.pixel_spacing).round() as usize
    }

    fn ref_per_native(&self, config: &PhantomConfig) -> f64 {
        config.canvas as f64 / self.native_size(config) as f64
    }

    /// Joint center of `view` in native pixel coordinates.
    pub fn center(&self, config: &PhantomConfig, view: View) -> (f64, f64) {
        let (u, v) = match view {
            View::Pa => self.center_pa_ref,
            View::Lat => self.center_lat_ref,
        };
        let k = self.ref_per_native(config);
        ((u + 0.5) / k - 0.5, (v + 0.5) / k - 0.5)
    }
}

const BACKGROUND: f64 = 0.08;
const SOFT: f64 = 0.22;
const BONE: f64 = 0.62;
const SCLEROSIS_DEPTH: f64 = 32.0;

fn in_ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> bool {
    let a = (x - cx) / rx;
    let b = (y - cy) / ry;
    a * a + b * b <= 1.0
}

/// Intensity of the PA scene at lateral-positive offset `x` and vertical
/// offset `y` from the joint center.
fn pa_scene(config: &PhantomConfig, plan: &ExamPlan, x: f64, y: f64) -> f64 {
    let s = plan.severity_pa;
    let g = config.joint_space_width(s);
    let yf = -g / 2.0;
    let yt = g / 2.0;
    let ax = x.abs();
    let mut v = if ax < 400.0 { SOFT } else { BACKGROUND };

    // Femur: condyles flare to ±240 over the last 320 px above the joint.
    let femur_edge = yf - 30.0 * (ax / 240.0).powi(4) - 28.0 * (1.0 - (ax / 38.0).powi(2)).max(0.0);
    let hf = if y < yf - 320.0 {
        135.0
    } else {
        let t = ((y - (yf - 320.0)) / 320.0).clamp(0.0, 1.0);
        135.0 + 105.0 * t.sqrt()
    };
    let in_femur = ax < hf && y < femur_edge;

    // Tibia: plateau of half-width 250 narrowing to the shaft.
    let tibia_edge = yt + 10.0 * (ax / 250.0).powi(2);
    let ht = if y > yt + 280.0 {
        145.0
    } else {
        let t = ((y - yt) / 280.0).clamp(0.0, 1.0);
        250.0 - 105.0 * t.powf(0.7)
    };
    let in_tibia = ax < ht && y > tibia_edge;
    let in_fibula = in_ellipse(x, y, 215.0, yt + 150.0, 50.0, 75.0) || ((x - 215.0).abs() < 28.0 && y > yt + 150.0);

    let scl = config.sclerosis_amplitude(s);
    if in_femur {
        let d = femur_edge - y;
        v = BONE + if d < SCLEROSIS_DEPTH { scl * (1.0 - d / SCLEROSIS_DEPTH) } else { 0.0 };
    } else if in_tibia {
        let d = y - tibia_edge;
        v = BONE + if d < SCLEROSIS_DEPTH { scl * (1.0 - d / SCLEROSIS_DEPTH) } else { 0.0 };
    } else if in_fibula {
        v = BONE * 0.8;
    } else {
        let r = config.osteophyte_radius(s);
        // Marginal osteophytes: lateral femur, medial tibia, medial femur, lateral tibia.
        let anchors: [(f64, f64); 4] = [(240.0, yf - 14.0), (-250.0, yt + 14.0), (-240.0, yf - 14.0), (250.0, yt + 14.0)];
        for &(axx, ayy) in anchors.iter().take(plan.osteophytes) {
            let cx = axx + axx.signum() * 0.3 * r;
            if in_ellipse(x, y, cx, ayy, r, r * 0.8) {
                v = BONE;
                break;
            }
        }
    }
    v
}

fn lat_scene(config: &PhantomConfig, plan: &ExamPlan, x: f64, y: f64) -> f64 {
    let s = plan.severity_lat;
    let g = config.joint_space_width(s);
    let yf = -g / 2.0;
    let yt = g / 2.0;
    let mut v = if x.abs() < 420.0 { SOFT } else { BACKGROUND };

    // Femoral condyle as a disc resting on the gap, shaft tilted anteriorly.
    let (ccx, rc) = (-10.0, 170.0);
    let ccy = yf - rc;
    let dc = ((x - ccx).powi(2) + (y - ccy).powi(2)).sqrt();
    let shaft_axis = ccx + (ccy - y) * 0.12;
    let in_femur = dc <= rc || (y < ccy && (x - shaft_axis).abs() < 115.0);

    let tibia_edge = yt - 0.1 * x;
    let ht = if y > yt + 300.0 {
        140.0
    } else {
        let t = ((y - yt) / 300.0).clamp(0.0, 1.0);
        230.0 - 90.0 * t.powf(0.7)
    };
    let in_tibia = x.abs() < ht && y > tibia_edge;
    let in_patella = in_ellipse(x, y, 210.0, yf - 150.0, 55.0, 105.0);
    let in_fibula = in_ellipse(x, y, -170.0, yt + 140.0, 45.0, 60.0);
    // The second condyle is imperfectly superimposed and partly fills the gap.
    let (sx, sy) = plan.condyle_shift;
    let in_second = ((x - ccx - sx).powi(2) + (y - ccy - sy).powi(2)).sqrt() <= rc;

    let scl = config.sclerosis_amplitude(s);
    if in_femur {
        let d = rc - dc;
        v = BONE + if y > ccy && d < SCLEROSIS_DEPTH { scl * (1.0 - d / SCLEROSIS_DEPTH) } else { 0.0 };
    } else if in_tibia {
        let d = y - tibia_edge;
        v = BONE + if d < SCLEROSIS_DEPTH { scl * (1.0 - d / SCLEROSIS_DEPTH) } else { 0.0 };
    } else if in_second && y < tibia_edge {
        v = SOFT + (BONE - SOFT) * 0.55;
    } else if in_patella {
        v = BONE * 0.9;
    } else if in_fibula {
        v = BONE * 0.7;
    } else {
        let r = config.osteophyte_radius(s);
        let post = (ccx - rc * 0.7071, ccy + rc * 0.7071);
        let anchors: [(f64, f64); 4] = [(232.0, yt + 14.0 - 23.2), (-232.0, yt + 14.0 + 23.2), post, (210.0, yf - 45.0)];
        for &(axx, ayy) in anchors.iter().take(plan.osteophytes) {
            let cx = axx + axx.signum() * 0.3 * r;
            if in_ellipse(x, y, cx, ayy, r, r * 0.8) {
                v = SOFT + (BONE - SOFT) * config.lat_osteophyte_contrast;
                break;
            }
        }
    }
    for b in &plan.blobs {
        if in_ellipse(x, y, b.dx, b.dy, b.rx, b.ry) {
            v += b.delta;
        }
    }
    v
}

/// Renders one view as a 16-bit raster at the exam's native spacing.
pub fn render_view(config: &PhantomConfig, plan: &ExamPlan, view: View) -> Raster16 {
    let n = plan.native_size(config);
    let k = plan.ref_per_native(config);
    let (cu, cv) = match view {
        View::Pa => plan.center_pa_ref,
        View::Lat => plan.center_lat_ref,
    };
    // Anatomy is drawn for a right knee; left knees are mirrored.
    let dir = match plan.key.side {
        Side::Right => 1.0,
        Side::Left => -1.0,
    };
    let (sigma, gain) = match view {
        View::Pa => (config.noise_sigma, plan.gain[0]),
        View::Lat => (config.noise_sigma * config.lat_noise_factor, plan.gain[1]),
    };
    let mut r = rng::stream(config.seed, &plan.key.stream_ids(2 + view as u64));
    let noise = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
    let mut data = Vec::with_capacity(n * n);
    for py in 0..n {
        let y = (py as f64 + 0.5) * k - 0.5 - cv;
        for px in 0..n {
            let x = ((px as f64 + 0.5) * k - 0.5 - cu) * dir;
            let clean = match view {
                View::Pa => pa_scene(config, plan, x, y),
                View::Lat => lat_scene(config, plan, x, y),
            };
            let e = if sigma > 0.0 { noise.sample(&mut r) } else { 0.0 };
            let v = (clean + e) * gain;
            data.push((2000.0 + 50000.0 * v).round().clamp(0.0, 65535.0) as u16);
        }
    }
    Image {
        width: n,
        height: n,
        spacing: plan.pixel_spacing,
        data,
    }
}

/// A rendered knee with both views and its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomExam {
    pub plan: ExamPlan,
    pub kl_grade: u8,
    pub jsn_grade: u8,
    pub osteo_grade: u8,
    pub center_pa: (f64, f64),
    pub center_lat: (f64, f64),
    pub pa: Raster16,
    pub lat: Raster16,
}

fn aux_grades(s: f64) -> (u8, u8) {
    ((s.floor().min(3.0)) as u8, (s.ceil().min(3.0)) as u8)
}

pub fn generate_exam(config: &PhantomConfig, patient_id: &str, visit: u32, side: Side, severity: f64) -> Result<PhantomExam> {
    let key = ExamKey {
        patient_id: patient_id.to_string(),
        visit,
        side,
    };
    let plan = plan_exam(config, &key, severity)?;
    let (jsn, osteo) = aux_grades(severity);
    Ok(PhantomExam {
        kl_grade: plan.kl_grade,
        jsn_grade: jsn,
        osteo_grade: osteo,
        center_pa: plan.center(config, View::Pa),
        center_lat: plan.center(config, View::Lat),
        pa: render_view(config, &plan, View::Pa),
        lat: render_view(config, &plan, View::Lat),
        plan,
    })
}

/// Latent severity for a target grade: uniform on
/// `[g − spread, g + spread)` intersected with `[0, 4]`.
pub fn sample_severity<R: Rng + ?Sized>(grade: u8, spread: f64, r: &mut R) -> f64 {
    let g = grade as f64;
    let lo = (g - spread).max(0.0);
    let hi = (g + spread).min(4.0);
    let s = if hi > lo { r.random_range(lo..hi) } else { g };
    // Keep round(s) == grade at the half-way points.
    if kl_from_severity(s) != grade {
        g
    } else {
        s
    }
}

pub fn sample_grade<R: Rng + ?Sized>(distribution: &[f64; 5], r: &mut R) -> u8 {
    let total: f64 = distribution.iter().sum();
    let mut u = r.random_range(0.0..total);
    for (g, &p) in distribution.iter().enumerate() {
        if u < p {
            return g as u8;
        }
        u -= p;
    }
    (0..5).rev().find(|&g| distribution[g] > 0.0).unwrap_or(0) as u8
}

// ---------------------------------------------------------------------------
// Simulated readers

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimulatedReaderModel {
    pub name: String,
    pub boundary_probabilities: [f64; 4],
    pub bias: f64,
    pub seed: u64,
}

impl SimulatedReaderModel {
    pub fn panel(config: &ReaderConfig, seed: u64) -> Vec<SimulatedReaderModel> {
        config
            .biases
            .iter()
            .enumerate()
            .map(|(i, &bias)| SimulatedReaderModel {
                name: format!("reader_{}", i + 1),
                boundary_probabilities: config.boundary_probabilities,
                bias,
                seed: rng::mix(seed, &[0x4ead, i as u64]),
            })
            .collect()
    }

    /// Probabilities of reading one grade lower and one grade higher.
    pub fn swap_probabilities(&self, grade: u8) -> (f64, f64) {
        let g = grade as usize;
        let down = if g > 0 { self.boundary_probabilities[g - 1] * (1.0 - self.bias) } else { 0.0 };
        let up = if g < 4 { self.boundary_probabilities[g] * (1.0 + self.bias) } else { 0.0 };
        let total = down + up;
        if total > 1.0 {
            (down / total, up / total)
        } else {
            (down.max(0.0), up.max(0.0))
        }
    }
}

/// One reader's grade for a case: the true grade, or an adjacent one with
/// the boundary swap probabilities. Deterministic in (reader seed, case).
pub fn simulate_reader(model: &SimulatedReaderModel, case_id: &str, true_grade: u8) -> u8 {
    let (down, up) = model.swap_probabilities(true_grade.min(4));
    let u: f64 = rng::stream(model.seed, &[rng::hash_str(case_id)]).random();
    if u < down {
        true_grade - 1
    } else if u < down + up {
        true_grade + 1
    } else {
        true_grade
    }
}

// ---------------------------------------------------------------------------
// Cohorts

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub patient_id: String,
    pub visit: u32,
    pub side: Side,
    pub latent_severity: f64,
    pub kl_grade: u8,
    pub pixel_spacing: f64,
    pub pa_center_x: f64,
    pub pa_center_y: f64,
    pub lat_center_x: f64,
    pub lat_center_y: f64,
}

#[derive(Clone, Debug)]
pub struct Cohort {
    pub manifest: Vec<ExamRecord>,
    pub truth: Vec<TruthRow>,
}

pub fn image_name(key: &ExamKey, view: View, copy: usize) -> String {
    let suffix = if copy == 0 { String::new() } else { format!("_dup{copy}") };
    format!("{}_V{}_{}_{}{}.pgm", key.patient_id, key.visit, key.side, view, suffix)
}

pub fn patient_id(i: usize) -> String {
    format!("P{:05}", i + 1)
}

/// Per-knee cohort decisions, drawn before any rendering.
#[derive(Clone, Debug)]
struct KneeDraw {
    key: ExamKey,
    severity: f64,
    raw_grade: f64,
    flagged: bool,
    missing_grade: bool,
    missing_lat: bool,
    duplicate_pa: bool,
}

fn draw_knees(config: &PhantomConfig, n_patients: usize, visits: u32, distribution: &[f64; 5]) -> Vec<KneeDraw> {
    let mut out = Vec::new();
    for p in 0..n_patients {
        let pid = patient_id(p);
        for side in [Side::Left, Side::Right] {
            let knee_grade = sample_grade(distribution, &mut rng::stream(config.seed, &[rng::hash_str(&pid), side as u64, 10]));
            for visit in 1..=visits {
                let key = ExamKey {
                    patient_id: pid.clone(),
                    visit,
                    side,
                };
                let mut r = rng::stream(config.seed, &key.stream_ids(11));
                let severity = sample_severity(knee_grade, config.severity_spread, &mut r);
                let grade = kl_from_severity(severity);
                let raw_grade = if grade == 2 && r.random_bool(config.grade_1_9_fraction) { 1.9 } else { grade as f64 };
                out.push(KneeDraw {
                    key,
                    severity,
                    raw_grade,
                    flagged: r.random_bool(config.flagged_fraction),
                    missing_grade: r.random_bool(config.missing_grade_fraction),
                    missing_lat: r.random_bool(config.missing_lat_fraction),
                    duplicate_pa: r.random_bool(config.duplicate_fraction),
                });
            }
        }
    }
    out
}

/// Renders a cohort into `out_dir/images/` and writes `manifest.csv` and
/// `truth.csv` next to it. Image paths in the manifest are relative to
/// `out_dir`.
pub fn generate_cohort(
    config: &PhantomConfig,
    n_patients: usize,
    visits_per_patient: u32,
    distribution: &[f64; 5],
    out_dir: &Path,
) -> Result<Cohort> {
    config.validate()?;
    if n_patients == 0 || visits_per_patient == 0 {
        return Err(invalid!("need at least one patient and one visit"));
    }
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let knees = draw_knees(config, n_patients, visits_per_patient, distribution);

    let rows: Vec<Result<(Vec<ExamRecord>, TruthRow)>> = knees
        .par_iter()
        .map(|k| {
            let plan = plan_exam(config, &k.key, k.severity)?;
            let (jsn, osteo) = aux_grades(k.severity);
            let mut flags = BTreeSet::new();
            if k.flagged {
                flags.insert("poor_quality".to_string());
            }
            let mut rows = Vec::new();
            let mut emit = |view: View, copy: usize, img: &Raster16| -> Result<()> {
                let rel = PathBuf::from("images").join(image_name(&k.key, view, copy));
                preprocess::write_pgm16(&out_dir.join(&rel), img)?;
                rows.push(ExamRecord {
                    patient_id: k.key.patient_id.clone(),
                    visit: k.key.visit,
                    side: k.key.side,
                    view,
                    image_path: rel.to_string_lossy().into_owned(),
                    pixel_spacing: plan.pixel_spacing,
                    kl_grade: k.raw_grade,
                    jsn_grade: if k.missing_grade { None } else { Some(jsn) },
                    osteo_grade: Some(osteo),
                    flags: flags.clone(),
                });
                Ok(())
            };
            let pa = render_view(config, &plan, View::Pa);
            emit(View::Pa, 0, &pa)?;
            if k.duplicate_pa {
                emit(View::Pa, 1, &pa)?;
            }
            if !k.missing_lat {
                emit(View::Lat, 0, &render_view(config, &plan, View::Lat))?;
            }
            let (pcx, pcy) = plan.center(config, View::Pa);
            let (lcx, lcy) = plan.center(config, View::Lat);
            Ok((
                rows,
                TruthRow {
                    patient_id: k.key.patient_id.clone(),
                    visit: k.key.visit,
                    side: k.key.side,
                    latent_severity: k.severity,
                    kl_grade: plan.kl_grade,
                    pixel_spacing: plan.pixel_spacing,
                    pa_center_x: pcx,
                    pa_center_y: pcy,
                    lat_center_x: lcx,
                    lat_center_y: lcy,
                },
            ))
        })
        .collect();
    let mut manifest = Vec::new();
    let mut truth = Vec::new();
    for r in rows {
        let (m, t) = r?;
        manifest.extend(m);
        truth.push(t);
    }
    curate::write_manifest(&out_dir.join("manifest.csv"), &manifest)?;
    write_truth(&out_dir.join("truth.csv"), &truth)?;
    Ok(Cohort { manifest, truth })
}

pub fn write_truth(path: &Path, rows: &[TruthRow]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_truth(path: &Path) -> Result<Vec<TruthRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(std::io::BufReader::new(file));
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| Error::Manifest {
                line: i + 2,
                message: format!("{}: {e}", path.display()),
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Gap-width estimator

/// Measures the joint-space width (reference pixels) from a raw render and
/// its known center, by thresholding a column-averaged vertical profile
/// halfway between the dark gap and the surrounding bone.
pub fn estimate_gap_width(img: &Raster16, center: (f64, f64), view: View, side: Side) -> f64 {
    let k = img.spacing / REFERENCE_SPACING;
    let dir = if side == Side::Right { 1.0 } else { -1.0 };
    let offsets: Vec<f64> = match view {
        View::Pa => (70..=170).step_by(4).flat_map(|d| [d as f64, -(d as f64)]).collect(),
        View::Lat => (-50..=30).step_by(4).map(|d| d as f64).collect(),
    };
    let half = 110.0;
    let rows = (2.0 * half / k) as usize;
    let mut profile = vec![0.0; rows];
    let mut used = 0usize;
    for off in offsets {
        let px = (center.0 + off * dir / k).round();
        if px < 0.0 || px >= img.width as f64 {
            continue;
        }
        used += 1;
        for (i, p) in profile.iter_mut().enumerate() {
            let py = (center.1 - half / k + i as f64).round().clamp(0.0, img.height as f64 - 1.0);
            *p += img.get(px as usize, py as usize) as f64;
        }
    }
    if used == 0 {
        return 0.0;
    }
    let mut sorted = profile.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let lo = sorted[0];
    let hi = sorted[sorted.len() * 3 / 4];
    let threshold = (lo + hi) / 2.0;
    // Longest dark run around the center row.
    let mid = rows / 2;
    let mut best = 0usize;
    let mut run = 0usize;
    let mut touches_mid = false;
    for (i, &p) in profile.iter().enumerate() {
        if p < threshold {
            run += 1;
            touches_mid |= i.abs_diff(mid) <= rows / 8;
        } else {
            if touches_mid {
                best = best.max(run);
            }
            run = 0;
            touches_mid = false;
        }
    }
    if touches_mid {
        best = best.max(run);
    }
    best as f64 * k
}

/// Grade predicted from a measured width by inverting the width ramp.
pub fn grade_from_gap(config: &PhantomConfig, width: f64) -> u8 {
    let s = 4.0 * (config.jsw_max - width) / (config.jsw_max - config.jsw_min);
    kl_from_severity(s)
}
