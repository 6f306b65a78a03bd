//! Virtual trap.
//!
//! Two independent pieces live here. The IR trigger model replays a weevil
//! pass in front of a periodically sampled distance sensor and estimates how
//! often the camera would be woken. The frame renderer draws scripted
//! scenes (live arrivals, departures, dead weevils, debris) that feed the
//! real detector, including the dead-weevil accuracy trials.

use std::sync::OnceLock;

use chrono::{DateTime, Duration, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{Algorithm, DetectionConfig, DetectorError, DetectorState};
use crate::imaging::ColorImage;

/// Smallest body length the sensor can see at all.
pub const MIN_BODY_LENGTH_MM: f64 = 3.5;
/// Largest body length the classifier is tuned for.
pub const MAX_BODY_LENGTH_MM: f64 = 18.0;

/// Area anchors for [`mm_to_pixel_area`].
const MIN_AREA_PX: f64 = 27_785.0;
const MAX_AREA_PX: f64 = 266_000.0;

pub const SLOW_SPEED_MM_S: f64 = 1.8;
pub const MEDIUM_SPEED_MM_S: f64 = 20.0;
pub const FAST_SPEED_MM_S: f64 = 1518.17;

/// The eleven body lengths used by the default sweep.
pub const DEFAULT_SWEEP_SIZES_MM: [f64; 11] = [3.5, 4.5, 5.5, 7.0, 8.5, 10.0, 12.0, 13.5, 15.0, 16.0, 18.0];
pub const DEFAULT_SWEEP_SPEEDS_MM_S: [f64; 3] = [SLOW_SPEED_MM_S, MEDIUM_SPEED_MM_S, FAST_SPEED_MM_S];

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid sensor model: {0}")]
    Sensor(String),

    #[error("invalid weevil spec: {0}")]
    Spec(String),

    #[error("invalid scenario: {0}")]
    Scenario(String),

    #[error("frame index {index} outside schedule of {len} frames")]
    FrameIndex { index: usize, len: usize },

    #[error("{0}")]
    Calibration(String),

    #[error(transparent)]
    Detector(#[from] DetectorError),
}

/// Maps body length to pixel area by linear interpolation between
/// 3.5 mm = 27,785 px and 18 mm = 266,000 px. Convenience only; scenarios
/// carry pixel areas directly.
pub fn mm_to_pixel_area(body_length_mm: f64) -> u64 {
    let frac = (body_length_mm - MIN_BODY_LENGTH_MM) / (MAX_BODY_LENGTH_MM - MIN_BODY_LENGTH_MM);
    (MIN_AREA_PX + frac * (MAX_AREA_PX - MIN_AREA_PX)).round().max(1.0) as u64
}

fn default_elongation() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeevilSpec {
    pub body_length_mm: f64,
    pub speed_mm_s: f64,
    pub gray_level: u8,
    /// Rendered footprint in pixels.
    pub pixel_area: u64,
    /// Major/minor axis ratio of the rendered ellipse.
    #[serde(default = "default_elongation")]
    pub elongation: f64,
}

impl WeevilSpec {
    /// A weevil with the given body length and speed, rendered dark at the
    /// interpolated pixel area.
    pub fn moving(body_length_mm: f64, speed_mm_s: f64) -> Self {
        Self {
            body_length_mm,
            speed_mm_s,
            gray_level: 30,
            pixel_area: mm_to_pixel_area(body_length_mm),
            elongation: default_elongation(),
        }
    }

    /// A motionless object for frame rendering.
    pub fn still(gray_level: u8, pixel_area: u64) -> Self {
        Self {
            body_length_mm: MIN_BODY_LENGTH_MM,
            speed_mm_s: 1.0,
            gray_level,
            pixel_area,
            elongation: default_elongation(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !self.speed_mm_s.is_finite() || self.speed_mm_s <= 0.0 {
            return Err(SimError::Spec(format!("speed must be positive, got {}", self.speed_mm_s)));
        }
        if !self.body_length_mm.is_finite() || self.body_length_mm < 0.0 {
            return Err(SimError::Spec(format!(
                "body length must be non-negative, got {}",
                self.body_length_mm
            )));
        }
        if self.pixel_area < 1 {
            return Err(SimError::Spec("pixel_area must be at least 1".into()));
        }
        if !self.elongation.is_finite() || self.elongation < 1.0 {
            return Err(SimError::Spec(format!("elongation must be >= 1, got {}", self.elongation)));
        }
        Ok(())
    }
}

/// Periodically sampled IR distance sensor with size-dependent detectability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorModel {
    pub refresh_hz: f64,
    /// The sensor fires for objects strictly closer than this.
    pub trigger_distance_mm: f64,
    pub path_start_mm: f64,
    pub path_end_mm: f64,
    /// Body length at which a single in-range sample always detects.
    pub size_ref_mm: f64,
    pub gamma: f64,
}

impl Default for SensorModel {
    /// The calibrated model; see [`calibrate_sensor`].
    fn default() -> Self {
        static CALIBRATED: OnceLock<SensorModel> = OnceLock::new();
        *CALIBRATED.get_or_init(|| {
            calibrate_sensor(&CalibrationAnchors::default())
                .expect("default anchors are attainable")
                .model
        })
    }
}

impl SensorModel {
    /// Geometry and timing of the bench rig with the given detectability curve.
    pub fn with_detectability(size_ref_mm: f64, gamma: f64) -> Self {
        Self {
            refresh_hz: 1.0,
            trigger_distance_mm: 95.0,
            path_start_mm: 110.0,
            path_end_mm: 40.0,
            size_ref_mm,
            gamma,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !self.refresh_hz.is_finite() || self.refresh_hz <= 0.0 {
            return Err(SimError::Sensor(format!("refresh_hz must be positive, got {}", self.refresh_hz)));
        }
        if !(self.path_end_mm < self.trigger_distance_mm && self.trigger_distance_mm < self.path_start_mm) {
            return Err(SimError::Sensor(format!(
                "need path_end < trigger_distance < path_start, got {} / {} / {}",
                self.path_end_mm, self.trigger_distance_mm, self.path_start_mm
            )));
        }
        if self.size_ref_mm.is_nan() || self.size_ref_mm <= MIN_BODY_LENGTH_MM {
            return Err(SimError::Sensor(format!(
                "size_ref must exceed {MIN_BODY_LENGTH_MM} mm, got {}",
                self.size_ref_mm
            )));
        }
        if !self.gamma.is_finite() || self.gamma <= 0.0 {
            return Err(SimError::Sensor(format!("gamma must be positive, got {}", self.gamma)));
        }
        Ok(())
    }

    /// Per-sample detection probability for an object in range.
    pub fn detection_probability(&self, body_length_mm: f64) -> f64 {
        let x = ((body_length_mm - MIN_BODY_LENGTH_MM) / (self.size_ref_mm - MIN_BODY_LENGTH_MM)).clamp(0.0, 1.0);
        x.powf(self.gamma)
    }

    /// Length of one pass: approach to `path_end` and retreat to `path_start`.
    pub fn pass_duration(&self, speed_mm_s: f64) -> f64 {
        2.0 * (self.path_start_mm - self.path_end_mm) / speed_mm_s
    }

    /// Open interval `(enter, exit)` of the pass during which the object is
    /// inside the trigger distance.
    pub fn in_zone_window(&self, speed_mm_s: f64) -> (f64, f64) {
        let enter = (self.path_start_mm - self.trigger_distance_mm) / speed_mm_s;
        let turn = (self.path_start_mm - self.path_end_mm) / speed_mm_s;
        let exit = turn + (self.trigger_distance_mm - self.path_end_mm) / speed_mm_s;
        (enter, exit)
    }

    fn distance_at(&self, t: f64, speed_mm_s: f64) -> f64 {
        let turn = (self.path_start_mm - self.path_end_mm) / speed_mm_s;
        if t <= turn {
            self.path_start_mm - speed_mm_s * t
        } else {
            self.path_end_mm + speed_mm_s * (t - turn)
        }
    }
}

/// One pass of `spec` in front of the sensor.
///
/// The sensor samples at `phase`, `phase + 1/refresh_hz`, ... until the pass
/// ends. Each sample taken while the object is inside the trigger distance
/// detects with the model's per-sample probability, drawn from `rng`.
pub fn simulate_pass(spec: &WeevilSpec, model: &SensorModel, phase: f64, rng: &mut impl Rng) -> bool {
    let p = model.detection_probability(spec.body_length_mm);
    if p <= 0.0 {
        return false;
    }
    let period = 1.0 / model.refresh_hz;
    let duration = model.pass_duration(spec.speed_mm_s);
    let mut k = 0u64;
    loop {
        let t = phase + k as f64 * period;
        if t > duration {
            return false;
        }
        if model.distance_at(t, spec.speed_mm_s) < model.trigger_distance_mm && (p >= 1.0 || rng.random::<f64>() < p) {
            return true;
        }
        k += 1;
    }
}

/// Independent RNG for trial `index` under `seed`: one ChaCha stream per trial,
/// so serial and parallel execution consume identical randomness.
pub fn trial_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Mixes a sub-index into a master seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Percentage of `trials` passes that trigger, with the sampling phase drawn
/// uniformly per trial.
pub fn trigger_rate(spec: &WeevilSpec, model: &SensorModel, trials: u32, seed: u64) -> Result<f64, SimError> {
    spec.validate()?;
    model.validate()?;
    if trials == 0 {
        return Err(SimError::Spec("trials must be at least 1".into()));
    }
    let period = 1.0 / model.refresh_hz;
    let hits = (0..trials)
        .into_par_iter()
        .filter(|&i| {
            let mut rng = trial_rng(seed, i as u64);
            let phase = rng.random::<f64>() * period;
            simulate_pass(spec, model, phase, &mut rng)
        })
        .count();
    Ok(100.0 * hits as f64 / trials as f64)
}

/// Closed-form trigger rate in percent.
///
/// With a uniform phase the number of samples falling in an in-zone window
/// of `w` seconds is `floor(w f)` or `floor(w f) + 1`, the latter with
/// probability `frac(w f)`; each sample detects independently with `p`.
pub fn expected_trigger_rate(body_length_mm: f64, speed_mm_s: f64, model: &SensorModel) -> f64 {
    let p = model.detection_probability(body_length_mm);
    let (enter, exit) = model.in_zone_window(speed_mm_s);
    let samples = (exit - enter) * model.refresh_hz;
    let n0 = samples.floor();
    let frac = samples - n0;
    let hit = |n: f64| 1.0 - (1.0 - p).powf(n);
    100.0 * ((1.0 - frac) * hit(n0) + frac * hit(n0 + 1.0))
}

/// Target trigger rates the detectability curve is fitted to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationAnchors {
    pub medium_speed_mm_s: f64,
    pub medium_size_mm: f64,
    pub medium_rate_pct: f64,
    pub fast_speed_mm_s: f64,
    pub fast_size_mm: f64,
    pub fast_rate_pct: f64,
}

impl Default for CalibrationAnchors {
    fn default() -> Self {
        Self {
            medium_speed_mm_s: MEDIUM_SPEED_MM_S,
            medium_size_mm: 16.0,
            medium_rate_pct: 95.0,
            fast_speed_mm_s: FAST_SPEED_MM_S,
            fast_size_mm: MAX_BODY_LENGTH_MM,
            fast_rate_pct: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorCalibration {
    pub model: SensorModel,
    pub medium_rate_pct: f64,
    pub fast_rate_pct: f64,
}

fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    // f(lo) and f(hi) have opposite signs.
    let f_lo = f(lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (f(mid) > 0.0) == (f_lo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Fits `size_ref` and `gamma` so the closed-form rates hit both anchors.
///
/// For a given `size_ref`, the medium-speed rate falls monotonically as
/// `gamma` grows, so `gamma` is solved by bisection. Holding the medium
/// anchor fixed, a larger `size_ref` lowers detectability at the fast
/// anchor's size, so an outer bisection on `size_ref` matches the fast rate.
pub fn calibrate_sensor(anchors: &CalibrationAnchors) -> Result<SensorCalibration, SimError> {
    let base = SensorModel::with_detectability(MAX_BODY_LENGTH_MM, 1.0);
    let medium = |m: &SensorModel| expected_trigger_rate(anchors.medium_size_mm, anchors.medium_speed_mm_s, m);
    let fast = |m: &SensorModel| expected_trigger_rate(anchors.fast_size_mm, anchors.fast_speed_mm_s, m);

    let (gamma_lo, gamma_hi) = (1e-3, 200.0);
    let fit_gamma = |size_ref: f64| -> Option<f64> {
        let model = |gamma| SensorModel {
            size_ref_mm: size_ref,
            gamma,
            ..base
        };
        let g = |gamma| medium(&model(gamma)) - anchors.medium_rate_pct;
        if g(gamma_lo) < 0.0 || g(gamma_hi) > 0.0 {
            return None;
        }
        Some(bisect(gamma_lo, gamma_hi, g))
    };

    // Both anchor sizes must sit below size_ref or the clamp makes p = 1.
    let ref_lo = anchors.medium_size_mm.max(anchors.fast_size_mm) + 1e-6;
    let ref_hi = 1_000.0;
    let fast_at = |size_ref: f64| -> Option<f64> {
        let gamma = fit_gamma(size_ref)?;
        Some(
            fast(&SensorModel {
                size_ref_mm: size_ref,
                gamma,
                ..base
            }) - anchors.fast_rate_pct,
        )
    };
    let (Some(at_lo), Some(at_hi)) = (fast_at(ref_lo), fast_at(ref_hi)) else {
        return Err(SimError::Calibration("medium-speed anchor is unattainable".into()));
    };
    if (at_lo > 0.0) == (at_hi > 0.0) {
        return Err(SimError::Calibration("fast-speed anchor is unattainable".into()));
    }
    let size_ref = bisect(ref_lo, ref_hi, |r| fast_at(r).unwrap_or(f64::NAN));
    let gamma = fit_gamma(size_ref).ok_or_else(|| SimError::Calibration("gamma fit diverged".into()))?;
    let model = SensorModel {
        size_ref_mm: size_ref,
        gamma,
        ..base
    };
    Ok(SensorCalibration {
        model,
        medium_rate_pct: medium(&model),
        fast_rate_pct: fast(&model),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub size_mm: f64,
    pub speed_mm_s: f64,
    pub trigger_rate_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub sizes_mm: Vec<f64>,
    pub speeds_mm_s: Vec<f64>,
    /// Speed-major: all sizes for the first speed, then the next speed.
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    pub fn rate(&self, size_index: usize, speed_index: usize) -> f64 {
        self.cells[speed_index * self.sizes_mm.len() + size_index].trigger_rate_pct
    }

    /// Rates for one speed, in size order.
    pub fn row(&self, speed_index: usize) -> &[SweepCell] {
        let n = self.sizes_mm.len();
        &self.cells[speed_index * n..(speed_index + 1) * n]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("size_mm,speed_mm_s,trigger_rate_pct\n");
        for c in &self.cells {
            out.push_str(&format!("{},{},{:.1}\n", c.size_mm, c.speed_mm_s, c.trigger_rate_pct));
        }
        out
    }
}

/// Trigger rate for every (size, speed) pair. Each cell runs on its own
/// seed derived from `seed` and the cell's position.
pub fn experiment3_sweep(
    sizes_mm: &[f64],
    speeds_mm_s: &[f64],
    model: &SensorModel,
    trials: u32,
    seed: u64,
) -> Result<SweepTable, SimError> {
    if sizes_mm.is_empty() || speeds_mm_s.is_empty() {
        return Err(SimError::Spec("sweep needs at least one size and one speed".into()));
    }
    let mut cells = Vec::with_capacity(sizes_mm.len() * speeds_mm_s.len());
    for (si, &speed) in speeds_mm_s.iter().enumerate() {
        for (zi, &size) in sizes_mm.iter().enumerate() {
            let cell_seed = derive_seed(seed, (si * sizes_mm.len() + zi) as u64);
            let rate = trigger_rate(&WeevilSpec::moving(size, speed), model, trials, cell_seed)?;
            cells.push(SweepCell {
                size_mm: size,
                speed_mm_s: speed,
                trigger_rate_pct: rate,
            });
        }
    }
    Ok(SweepTable {
        sizes_mm: sizes_mm.to_vec(),
        speeds_mm_s: speeds_mm_s.to_vec(),
        cells,
    })
}

/// Pixel offsets, relative to the centre, of an ellipse with exactly `area`
/// pixels.
///
/// Candidates are ranked by normalised radius (ties in raster order) and the
/// `area` innermost are kept, so the count is exact rather than whatever the
/// rasterised boundary happens to enclose. Offsets are listed in raster order.
pub fn ellipse_footprint(area: u64, elongation: f64) -> Vec<(i32, i32)> {
    let semi_major = (area as f64 * elongation / std::f64::consts::PI).sqrt().max(0.5);
    let semi_minor = (semi_major / elongation).max(0.5);
    let half_w = semi_major.ceil() as i32 + 2;
    let half_h = semi_minor.ceil() as i32 + 2;
    let key = |dx: i32, dy: i32| {
        let u = dx as f64 / semi_major;
        let v = dy as f64 / semi_minor;
        (u * u + v * v, dy, dx)
    };
    let cmp = |a: &(f64, i32, i32), b: &(f64, i32, i32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2));
    let mut keys: Vec<(f64, i32, i32)> = Vec::with_capacity(((2 * half_w + 1) * (2 * half_h + 1)) as usize);
    for dy in -half_h..=half_h {
        for dx in -half_w..=half_w {
            keys.push(key(dx, dy));
        }
    }
    let area = (area as usize).min(keys.len());
    if area == 0 {
        return Vec::new();
    }
    let (_, &mut pivot, _) = keys.select_nth_unstable_by(area - 1, cmp);
    // keys are distinct, so exactly `area` offsets rank at or below the pivot
    let mut out = Vec::with_capacity(area);
    for dy in -half_h..=half_h {
        for dx in -half_w..=half_w {
            if cmp(&key(dx, dy), &pivot).is_le() {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Inclusive offset extents `(min_dx, min_dy, max_dx, max_dy)` of a footprint.
fn footprint_extent(fp: &[(i32, i32)]) -> (i32, i32, i32, i32) {
    fp.iter().fold((i32::MAX, i32::MAX, i32::MIN, i32::MIN), |acc, &(dx, dy)| {
        (acc.0.min(dx), acc.1.min(dy), acc.2.max(dx), acc.3.max(dy))
    })
}

fn draw(img: &mut ColorImage, center: (u32, u32), footprint: &[(i32, i32)], gray: u8) {
    for &(dx, dy) in footprint {
        let x = (center.0 as i64 + dx as i64) as u32;
        let y = (center.1 as i64 + dy as i64) as u32;
        img.put_pixel(x, y, [gray, gray, gray]);
    }
}

/// An object placed into a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedObject {
    pub spec: WeevilSpec,
    /// Centre pixel `(x, y)`.
    pub position: (u32, u32),
    /// First frame index showing the object.
    pub appear_at: usize,
    /// First frame index no longer showing it.
    #[serde(default)]
    pub depart_at: Option<usize>,
    /// Dead objects never leave.
    #[serde(default)]
    pub dead: bool,
}

impl ScriptedObject {
    pub fn visible_at(&self, frame: usize) -> bool {
        frame >= self.appear_at && self.depart_at.is_none_or(|d| frame < d)
    }
}

/// A scripted trap: frame schedule, background and objects. Overlapping
/// objects render merged, just as overlapping insects would.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrapScenario {
    pub width: u32,
    pub height: u32,
    pub background: u8,
    /// Capture instant of every frame.
    pub frames: Vec<DateTime<Utc>>,
    #[serde(default)]
    pub objects: Vec<ScriptedObject>,
}

impl TrapScenario {
    /// `count` frames starting at `start`, `interval` apart.
    pub fn evenly_spaced(width: u32, height: u32, background: u8, start: DateTime<Utc>, interval: Duration, count: usize) -> Self {
        Self {
            width,
            height,
            background,
            frames: (0..count).map(|i| start + interval * i as i32).collect(),
            objects: Vec::new(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let scenario: Self = serde_json::from_str(text).map_err(|e| SimError::Scenario(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.width == 0 || self.height == 0 {
            return Err(SimError::Scenario(format!("frame size {}x{} is empty", self.width, self.height)));
        }
        for (i, obj) in self.objects.iter().enumerate() {
            obj.spec.validate().map_err(|e| SimError::Scenario(format!("object {i}: {e}")))?;
            if let Some(depart) = obj.depart_at {
                if obj.dead {
                    return Err(SimError::Scenario(format!("object {i}: dead objects cannot depart")));
                }
                if depart <= obj.appear_at {
                    return Err(SimError::Scenario(format!(
                        "object {i}: departs at frame {depart}, not after appearing at {}",
                        obj.appear_at
                    )));
                }
            }
            let fp = ellipse_footprint(obj.spec.pixel_area, obj.spec.elongation);
            let (min_dx, min_dy, max_dx, max_dy) = footprint_extent(&fp);
            let (x, y) = (obj.position.0 as i64, obj.position.1 as i64);
            if x + (min_dx as i64) < 0
                || y + (min_dy as i64) < 0
                || x + max_dx as i64 >= self.width as i64
                || y + max_dy as i64 >= self.height as i64
            {
                return Err(SimError::Scenario(format!(
                    "object {i} at {:?} does not fit inside the {}x{} frame",
                    obj.position, self.width, self.height
                )));
            }
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    /// Draws frame `index`: uniform background plus every visible object.
    pub fn render_frame(&self, index: usize) -> Result<ColorImage, SimError> {
        if index >= self.frames.len() {
            return Err(SimError::FrameIndex {
                index,
                len: self.frames.len(),
            });
        }
        self.validate()?;
        let bg = self.background;
        let mut img = ColorImage::filled(self.width, self.height, [bg, bg, bg])
            .map_err(|e| SimError::Scenario(e.to_string()))?;
        for obj in self.objects.iter().filter(|o| o.visible_at(index)) {
            let fp = ellipse_footprint(obj.spec.pixel_area, obj.spec.elongation);
            draw(&mut img, obj.position, &fp, obj.spec.gray_level);
        }
        Ok(img)
    }
}

/// Frame geometry and detector settings for the dead-weevil trials.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialSetup {
    pub width: u32,
    pub height: u32,
    pub background: u8,
    pub config: DetectionConfig,
}

impl Default for TrialSetup {
    fn default() -> Self {
        Self {
            width: 3856,
            height: 2490,
            background: 200,
            config: DetectionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlacedObject {
    pub center: (u32, u32),
    pub pixel_area: u64,
    pub gray_level: u8,
}

/// What one trial draws: `persistent` objects appear in both frames,
/// `arrivals` only in the second.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialPlan {
    pub persistent: Vec<PlacedObject>,
    pub arrivals: Vec<PlacedObject>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub expected: u64,
    pub counted: u64,
    pub algorithm: Algorithm,
    pub similarity: Option<f64>,
}

impl TrialOutcome {
    pub fn correct(&self) -> bool {
        self.expected == self.counted
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeadWeevilSummary {
    pub trials: u32,
    pub with_dead: bool,
    pub correct: u32,
    pub accuracy_pct: f64,
}

const PLACEMENT_GAP: i64 = 4;

impl TrialSetup {
    /// Random but non-overlapping layout for one trial.
    ///
    /// With `with_dead`, 1-3 dead weevils persist across both frames. Light
    /// debris (above `T`) may persist as well. Up to three arrivals are added
    /// in the second frame, with their total area kept within the change
    /// budget `(1 - S/100)` of the frame so the scene still reads as static.
    pub fn plan_trial(&self, rng: &mut impl Rng, with_dead: bool) -> TrialPlan {
        let cfg = &self.config;
        let frame_area = self.width as u64 * self.height as u64;
        let budget = (frame_area as f64 * (100.0 - cfg.s) / 100.0).floor() as u64;

        let mut taken: Vec<(i64, i64, i64, i64)> = Vec::new();
        let mut place = |rng: &mut dyn rand::RngCore, area: u64, gray: u8| -> PlacedObject {
            let fp = ellipse_footprint(area, default_elongation());
            let (min_dx, min_dy, max_dx, max_dy) = footprint_extent(&fp);
            for _ in 0..10_000 {
                let cx = rng.random_range((-min_dx as i64)..(self.width as i64 - max_dx as i64));
                let cy = rng.random_range((-min_dy as i64)..(self.height as i64 - max_dy as i64));
                let rect = (cx + min_dx as i64, cy + min_dy as i64, cx + max_dx as i64, cy + max_dy as i64);
                let clear = taken.iter().all(|t| {
                    rect.2 + PLACEMENT_GAP < t.0
                        || t.2 + PLACEMENT_GAP < rect.0
                        || rect.3 + PLACEMENT_GAP < t.1
                        || t.3 + PLACEMENT_GAP < rect.1
                });
                if clear {
                    taken.push(rect);
                    return PlacedObject {
                        center: (cx as u32, cy as u32),
                        pixel_area: area,
                        gray_level: gray,
                    };
                }
            }
            panic!("could not place a {area} px object in a {}x{} frame", self.width, self.height);
        };

        let mut persistent = Vec::new();
        if with_dead {
            for _ in 0..rng.random_range(1..=3) {
                let area = rng.random_range(cfg.lower..=cfg.upper);
                let gray = rng.random_range(10..=45);
                persistent.push(place(rng, area, gray));
            }
        }
        let debris = rng.random_range(0..=2);
        if cfg.t <= 200 {
            for _ in 0..debris {
                let area = rng.random_range(5_000..=150_000u64);
                let gray = rng.random_range(cfg.t + 30..=230);
                persistent.push(place(rng, area, gray));
            }
        }

        let max_arrivals = (budget / cfg.lower).min(3);
        let n = rng.random_range(0..=max_arrivals);
        let mut remaining = budget;
        let mut arrivals = Vec::new();
        for i in 0..n {
            let left = n - i;
            let cap = (remaining / left).min(cfg.upper);
            let area = rng.random_range(cfg.lower..=cap);
            remaining -= area;
            let gray = rng.random_range(10..=45);
            arrivals.push(place(rng, area, gray));
        }
        TrialPlan { persistent, arrivals }
    }

    /// Renders the before/after frames of a plan and runs them through a
    /// fresh detector.
    pub fn run_trial(&self, plan: &TrialPlan) -> Result<TrialOutcome, SimError> {
        let bg = self.background;
        let mut frame = ColorImage::filled(self.width, self.height, [bg, bg, bg])
            .map_err(|e| SimError::Scenario(e.to_string()))?;
        for obj in &plan.persistent {
            draw(&mut frame, obj.center, &ellipse_footprint(obj.pixel_area, default_elongation()), obj.gray_level);
        }
        let t0 = DateTime::<Utc>::UNIX_EPOCH;
        let mut state = DetectorState::new();
        state.process_frame(&frame, &self.config, t0, "trial-before")?;

        for obj in &plan.arrivals {
            draw(&mut frame, obj.center, &ellipse_footprint(obj.pixel_area, default_elongation()), obj.gray_level);
        }
        let out = state.process_frame(&frame, &self.config, t0 + Duration::seconds(1), "trial-after")?;
        Ok(TrialOutcome {
            expected: plan.arrivals.len() as u64,
            counted: out.event.count,
            algorithm: out.event.algorithm,
            similarity: out.event.similarity,
        })
    }

    pub fn run_trials(&self, trials: u32, with_dead: bool, seed: u64) -> Result<DeadWeevilSummary, SimError> {
        if trials == 0 {
            return Err(SimError::Spec("trials must be at least 1".into()));
        }
        let outcomes: Vec<TrialOutcome> = (0..trials)
            .into_par_iter()
            .map(|i| {
                let mut rng = trial_rng(seed, i as u64);
                let plan = self.plan_trial(&mut rng, with_dead);
                self.run_trial(&plan)
            })
            .collect::<Result<_, _>>()?;
        let correct = outcomes.iter().filter(|o| o.correct()).count() as u32;
        Ok(DeadWeevilSummary {
            trials,
            with_dead,
            correct,
            accuracy_pct: 100.0 * correct as f64 / trials as f64,
        })
    }
}

/// Dead-weevil accuracy trials at full resolution with the default config.
pub fn run_dead_weevil_trials(trials: u32, with_dead: bool, seed: u64) -> Result<DeadWeevilSummary, SimError> {
    TrialSetup::default().run_trials(trials, with_dead, seed)
}
