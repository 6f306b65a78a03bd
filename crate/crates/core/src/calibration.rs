//! Threshold calibration: per-class grayscale statistics for choosing `T`,
//! and the closed-form similarity threshold `S` derived from the largest
//! weevil area and the frame resolution.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{self, BinaryImage, GrayImage, ImagingError};

/// Class label the recommender treats as the target.
pub const WEEVIL_CLASS: &str = "weevil";

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("max object area {area} must be positive and smaller than the frame ({frame_area} px)")]
    AreaOutOfRange { area: u64, frame_area: u64 },

    #[error("statistics have no `{WEEVIL_CLASS}` class")]
    MissingWeevilClass,

    #[error("statistics need at least one class besides `{WEEVIL_CLASS}`")]
    MissingBackgroundClass,

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: ImagingError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One labeled corpus image; the mask's foreground selects the object pixels.
#[derive(Debug, Clone)]
pub struct CorpusSample {
    pub image: GrayImage,
    pub mask: BinaryImage,
    pub class: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrayscaleStats {
    pub class_name: String,
    /// Accepted samples of this class.
    pub sample_count: usize,
    /// Masked pixels pooled over those samples.
    pub pixel_count: u64,
    pub mean: f64,
    pub min: u8,
    pub max: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedSample {
    pub index: usize,
    pub class: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub stats: Vec<GrayscaleStats>,
    pub rejected: Vec<RejectedSample>,
}

/// Pools the masked pixels of every sample per class.
///
/// Classes appear in the order they are first seen. Samples whose mask is
/// empty or does not match the image size are skipped and reported.
pub fn grayscale_stats(corpus: &[CorpusSample]) -> StatsReport {
    struct Acc {
        samples: usize,
        pixels: u64,
        sum: u64,
        min: u8,
        max: u8,
    }

    let mut order: Vec<(String, Acc)> = Vec::new();
    let mut rejected = Vec::new();

    for (index, sample) in corpus.iter().enumerate() {
        if sample.mask.dimensions() != sample.image.dimensions() {
            rejected.push(RejectedSample {
                index,
                class: sample.class.clone(),
                reason: format!(
                    "mask is {}x{} but image is {}x{}",
                    sample.mask.width(),
                    sample.mask.height(),
                    sample.image.width(),
                    sample.image.height()
                ),
            });
            continue;
        }
        let mut pixels = 0u64;
        let mut sum = 0u64;
        let mut min = u8::MAX;
        let mut max = u8::MIN;
        for (&g, &m) in sample.image.as_raw().iter().zip(sample.mask.as_raw()) {
            if m == imaging::FOREGROUND {
                pixels += 1;
                sum += g as u64;
                min = min.min(g);
                max = max.max(g);
            }
        }
        if pixels == 0 {
            tracing::warn!(index, class = %sample.class, "corpus sample has an empty mask");
            rejected.push(RejectedSample {
                index,
                class: sample.class.clone(),
                reason: "mask selects no pixels".into(),
            });
            continue;
        }

        let slot = match order.iter().position(|(name, _)| *name == sample.class) {
            Some(i) => i,
            None => {
                order.push((
                    sample.class.clone(),
                    Acc {
                        samples: 0,
                        pixels: 0,
                        sum: 0,
                        min: u8::MAX,
                        max: u8::MIN,
                    },
                ));
                order.len() - 1
            }
        };
        let acc = &mut order[slot].1;
        acc.samples += 1;
        acc.pixels += pixels;
        acc.sum += sum;
        acc.min = acc.min.min(min);
        acc.max = acc.max.max(max);
    }

    let stats = order
        .into_iter()
        .map(|(class_name, a)| GrayscaleStats {
            class_name,
            sample_count: a.samples,
            pixel_count: a.pixels,
            mean: a.sum as f64 / a.pixels as f64,
            min: a.min,
            max: a.max,
        })
        .collect();
    StatsReport { stats, rejected }
}

/// Percentage of unchanged pixels when an object of `max_object_area`
/// appears on an otherwise static `width x height` frame.
pub fn similarity_threshold(max_object_area: u64, width: u32, height: u32) -> Result<f64, CalibrationError> {
    let frame_area = width as u64 * height as u64;
    if max_object_area == 0 || max_object_area >= frame_area {
        return Err(CalibrationError::AreaOutOfRange {
            area: max_object_area,
            frame_area,
        });
    }
    Ok((1.0 - max_object_area as f64 / frame_area as f64) * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ThresholdRecommendation {
    Recommended {
        t: u8,
        weevil_max: u8,
        /// Smallest mean among the non-weevil classes.
        ceiling: f64,
        ceiling_class: String,
    },
    NoRecommendation {
        reason: String,
    },
}

/// Suggests `T = weevil.max + margin`, provided it stays strictly below the
/// darkest non-weevil class mean. Advisory only; nothing applies it.
pub fn recommend_thresholds(stats: &[GrayscaleStats], margin: u8) -> Result<ThresholdRecommendation, CalibrationError> {
    let weevil = stats
        .iter()
        .find(|s| s.class_name == WEEVIL_CLASS)
        .ok_or(CalibrationError::MissingWeevilClass)?;
    let ceiling = stats
        .iter()
        .filter(|s| s.class_name != WEEVIL_CLASS)
        .min_by(|a, b| a.mean.total_cmp(&b.mean))
        .ok_or(CalibrationError::MissingBackgroundClass)?;

    if weevil.max as f64 >= ceiling.mean {
        return Ok(ThresholdRecommendation::NoRecommendation {
            reason: format!(
                "weevil max {} overlaps `{}` mean {:.2}",
                weevil.max, ceiling.class_name, ceiling.mean
            ),
        });
    }
    let candidate = weevil.max as u16 + margin as u16;
    if candidate as f64 >= ceiling.mean {
        return Ok(ThresholdRecommendation::NoRecommendation {
            reason: format!(
                "weevil max {} + margin {} = {} does not stay below `{}` mean {:.2}",
                weevil.max, margin, candidate, ceiling.class_name, ceiling.mean
            ),
        });
    }
    Ok(ThresholdRecommendation::Recommended {
        t: candidate as u8,
        weevil_max: weevil.max,
        ceiling: ceiling.mean,
        ceiling_class: ceiling.class_name.clone(),
    })
}

/// One line of a corpus manifest (JSON Lines). Relative paths resolve
/// against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub class: String,
}

pub fn load_manifest(path: &Path) -> Result<Vec<CorpusSample>, CalibrationError> {
    let base = path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(path)?;
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| CalibrationError::Manifest {
            line: i + 1,
            message: e.to_string(),
        })?;
        let load = |p: &Path| {
            let full = base.join(p);
            imaging::load_gray(&full).map_err(|source| CalibrationError::Image { path: full, source })
        };
        let image = load(&entry.image_path)?;
        let mask_gray = load(&entry.mask_path)?;
        // Any non-zero mask value selects the pixel.
        let mask = BinaryImage::from_fn(mask_gray.width(), mask_gray.height(), |x, y| {
            mask_gray.pixel(x, y) > 0
        })
        .expect("dimensions come from a decoded image");
        samples.push(CorpusSample {
            image,
            mask,
            class: entry.class,
        });
    }
    Ok(samples)
}

/// Gray-level range of a synthetic object class, inclusive.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticClass {
    pub name: String,
    pub gray_min: u8,
    pub gray_max: u8,
}

/// Default classes: dark weevils against lighter field debris.
pub fn default_synthetic_classes() -> Vec<SyntheticClass> {
    let class = |name: &str, gray_min, gray_max| SyntheticClass {
        name: name.to_string(),
        gray_min,
        gray_max,
    };
    vec![
        class(WEEVIL_CLASS, 8, 48),
        class("leaf", 85, 160),
        class("soil", 70, 125),
        class("stone", 110, 210),
    ]
}

/// Generates `per_class` samples of every class: a textured elliptical
/// object on a mid-gray background, with a mask covering the object.
pub fn synthetic_corpus(classes: &[SyntheticClass], per_class: usize, seed: u64) -> Vec<CorpusSample> {
    const SIDE: u32 = 96;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(classes.len() * per_class);
    for _ in 0..per_class {
        for class in classes {
            let background: u8 = rng.random_range(170..=230);
            let rx = rng.random_range(12.0..30.0f64);
            let ry = rng.random_range(8.0..20.0f64);
            let cx = SIDE as f64 / 2.0 + rng.random_range(-8.0..8.0);
            let cy = SIDE as f64 / 2.0 + rng.random_range(-8.0..8.0);
            let inside = |x: u32, y: u32| {
                let dx = (x as f64 - cx) / rx;
                let dy = (y as f64 - cy) / ry;
                dx * dx + dy * dy <= 1.0
            };
            let mut image = GrayImage::filled(SIDE, SIDE, background).expect("non-empty");
            for y in 0..SIDE {
                for x in 0..SIDE {
                    if inside(x, y) {
                        image.put_pixel(x, y, rng.random_range(class.gray_min..=class.gray_max));
                    }
                }
            }
            let mask = BinaryImage::from_fn(SIDE, SIDE, inside).expect("non-empty");
            out.push(CorpusSample {
                image,
                mask,
                class: class.name.clone(),
            });
        }
    }
    out
}

/// Writes a corpus as PGM images, PGM masks and a `manifest.jsonl`.
pub fn write_corpus(dir: &Path, corpus: &[CorpusSample]) -> Result<PathBuf, CalibrationError> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, sample) in corpus.iter().enumerate() {
        let image_path = PathBuf::from(format!("{:04}_{}.pgm", i, sample.class));
        let mask_path = PathBuf::from(format!("{:04}_{}_mask.pgm", i, sample.class));
        fs::write(dir.join(&image_path), imaging::encode_pgm(&sample.image))?;
        let mask = GrayImage::from_raw(
            sample.mask.width(),
            sample.mask.height(),
            sample.mask.as_raw().to_vec(),
        )
        .expect("mask dimensions are valid");
        fs::write(dir.join(&mask_path), imaging::encode_pgm(&mask))?;
        let entry = ManifestEntry {
            image_path,
            mask_path,
            class: sample.class.clone(),
        };
        manifest.push_str(&serde_json::to_string(&entry).expect("manifest entry serializes"));
        manifest.push('\n');
    }
    let path = dir.join("manifest.jsonl");
    fs::write(&path, manifest)?;
    Ok(path)
}

/// Fixed-width table of the statistics.
pub fn format_stats_table(stats: &[GrayscaleStats]) -> String {
    let width = stats
        .iter()
        .map(|s| s.class_name.len())
        .max()
        .unwrap_or(0)
        .max("class".len());
    let mut out = format!(
        "{:<width$}  {:>7}  {:>9}  {:>7}  {:>3}  {:>3}\n",
        "class", "samples", "pixels", "mean", "min", "max"
    );
    for s in stats {
        out.push_str(&format!(
            "{:<width$}  {:>7}  {:>9}  {:>7.2}  {:>3}  {:>3}\n",
            s.class_name, s.sample_count, s.pixel_count, s.mean, s.min, s.max
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(class: &str, value: u8) -> CorpusSample {
        CorpusSample {
            image: GrayImage::filled(4, 4, value).unwrap(),
            mask: BinaryImage::from_fn(4, 4, |_, _| true).unwrap(),
            class: class.into(),
        }
    }

    fn stat(name: &str, mean: f64, max: u8) -> GrayscaleStats {
        GrayscaleStats {
            class_name: name.into(),
            sample_count: 1,
            pixel_count: 1,
            mean,
            min: 0,
            max,
        }
    }

    #[test]
    fn single_uniform_sample() {
        let report = grayscale_stats(&[uniform("weevil", 30)]);
        let s = &report.stats[0];
        assert_eq!((s.mean, s.min, s.max, s.sample_count), (30.0, 30, 30, 1));
    }

    #[test]
    fn class_mean_and_order() {
        let report = grayscale_stats(&[uniform("leaf", 100), uniform("weevil", 20), uniform("leaf", 140)]);
        let names: Vec<_> = report.stats.iter().map(|s| s.class_name.as_str()).collect();
        assert_eq!(names, vec!["leaf", "weevil"]);
        assert_eq!(report.stats[0].mean, 120.0);
        assert_eq!(report.stats[0].sample_count, 2);
    }

    #[test]
    fn masked_pixels_only() {
        let mut image = GrayImage::filled(2, 1, 200).unwrap();
        image.put_pixel(0, 0, 10);
        let mask = BinaryImage::from_raw(2, 1, vec![255, 0]).unwrap();
        let report = grayscale_stats(&[CorpusSample {
            image,
            mask,
            class: "weevil".into(),
        }]);
        assert_eq!(report.stats[0].max, 10);
    }

    #[test]
    fn empty_and_mismatched_masks_rejected() {
        let mut empty = uniform("soil", 90);
        empty.mask = BinaryImage::empty(4, 4).unwrap();
        let mut wrong = uniform("soil", 90);
        wrong.mask = BinaryImage::empty(3, 4).unwrap();
        let report = grayscale_stats(&[empty, uniform("soil", 80), wrong]);
        assert_eq!(report.rejected.len(), 2);
        assert_eq!(report.rejected[0].index, 0);
        assert_eq!(report.rejected[1].index, 2);
        assert_eq!(report.stats[0].sample_count, 1);
        assert_eq!(report.stats[0].mean, 80.0);
    }

    #[test]
    fn similarity_threshold_closed_form() {
        let s = similarity_threshold(266_000, 3856, 2490).unwrap();
        assert!((s - 97.2296).abs() < 1e-4, "{s}");
        assert!((similarity_threshold(1, 100, 100).unwrap() - 99.99).abs() < 1e-9);
        assert_eq!(similarity_threshold(5000, 100, 100).unwrap(), 50.0);
        assert!(similarity_threshold(10_000, 100, 100).is_err());
        assert!(similarity_threshold(0, 100, 100).is_err());
    }

    #[test]
    fn recommendation_rules() {
        let rec = recommend_thresholds(&[stat("weevil", 30.0, 45), stat("leaf", 90.0, 200)], 15).unwrap();
        assert!(matches!(rec, ThresholdRecommendation::Recommended { t: 60, .. }));

        let rec = recommend_thresholds(&[stat("weevil", 30.0, 45), stat("soil", 55.0, 200)], 15).unwrap();
        assert!(matches!(rec, ThresholdRecommendation::NoRecommendation { .. }));

        let rec = recommend_thresholds(&[stat("weevil", 30.0, 95), stat("soil", 90.0, 200)], 0).unwrap();
        assert!(matches!(rec, ThresholdRecommendation::NoRecommendation { .. }));

        assert!(matches!(
            recommend_thresholds(&[stat("weevil", 30.0, 45)], 15),
            Err(CalibrationError::MissingBackgroundClass)
        ));
        assert!(matches!(
            recommend_thresholds(&[stat("leaf", 30.0, 45)], 15),
            Err(CalibrationError::MissingWeevilClass)
        ));
    }

    #[test]
    fn synthetic_corpus_separates_weevils() {
        let corpus = synthetic_corpus(&default_synthetic_classes(), 25, 1);
        let report = grayscale_stats(&corpus);
        assert!(report.rejected.is_empty());
        let weevil = report.stats.iter().find(|s| s.class_name == "weevil").unwrap();
        let min_other = report
            .stats
            .iter()
            .filter(|s| s.class_name != "weevil")
            .map(|s| s.mean)
            .fold(f64::INFINITY, f64::min);
        assert!((weevil.max as f64) < 60.0 && 60.0 < min_other);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = synthetic_corpus(&default_synthetic_classes(), 2, 3);
        let manifest = write_corpus(dir.path(), &corpus).unwrap();
        let loaded = load_manifest(&manifest).unwrap();
        assert_eq!(loaded.len(), corpus.len());
        assert_eq!(grayscale_stats(&loaded), grayscale_stats(&corpus));
    }

    #[test]
    fn bad_manifest_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(&path, "\n{\"image_path\": 3}\n").unwrap();
        assert!(matches!(
            load_manifest(&path),
            Err(CalibrationError::Manifest { line: 2, .. })
        ));
    }

    #[test]
    fn table_has_header_and_rows() {
        let table = format_stats_table(&[stat("weevil", 30.0, 45)]);
        assert_eq!(table.lines().count(), 2);
        assert!(table.starts_with("class"));
    }
}
