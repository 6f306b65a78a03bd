//! Pixel-level operations for the detection pipeline.
//!
//! Everything here is a pure function over immutable rasters: grayscale
//! conversion, binary thresholding, frame differencing, similarity scoring,
//! connected-component labeling and area-based classification.
//!
//! Thresholding follows the trap's convention: dark pixels (at or below the
//! threshold) become the 255-valued foreground, everything brighter becomes 0.

use std::path::Path;

use image::{ImageFormat, ImageReader};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Foreground value in a [`BinaryImage`].
pub const FOREGROUND: u8 = 255;
/// Background value in a [`BinaryImage`].
pub const BACKGROUND: u8 = 0;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("image must be at least 1x1, got {width}x{height}")]
    EmptyImage { width: u32, height: u32 },

    #[error("expected {expected} pixel values for a {width}x{height} image, got {actual}")]
    PixelCount {
        width: u32,
        height: u32,
        expected: usize,
        actual: usize,
    },

    #[error("dimension mismatch: {left_width}x{left_height} vs {right_width}x{right_height}")]
    DimensionMismatch {
        left_width: u32,
        left_height: u32,
        right_width: u32,
        right_height: u32,
    },

    #[error("binary image pixel {index} has value {value}; only 0 and 255 are allowed")]
    NotBinary { index: usize, value: u8 },

    #[error("area bounds are inverted: lower {lower} > upper {upper}")]
    InvertedBounds { lower: u64, upper: u64 },

    #[error("failed to decode image: {0}")]
    Decode(#[from] image::ImageError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn pixel_count(width: u32, height: u32) -> Result<usize, ImagingError> {
    if width == 0 || height == 0 {
        return Err(ImagingError::EmptyImage { width, height });
    }
    Ok(width as usize * height as usize)
}

fn check_same_size(a: (u32, u32), b: (u32, u32)) -> Result<(), ImagingError> {
    if a != b {
        return Err(ImagingError::DimensionMismatch {
            left_width: a.0,
            left_height: a.1,
            right_width: b.0,
            right_height: b.1,
        });
    }
    Ok(())
}

/// 8-bit RGB raster, row-major, channels interleaved.
#[derive(Clone, PartialEq, Eq)]
pub struct ColorImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl std::fmt::Debug for ColorImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ColorImage({}x{})", self.width, self.height)
    }
}

impl ColorImage {
    /// Wraps interleaved RGB bytes (`3 * width * height` of them).
    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Result<Self, ImagingError> {
        let expected = pixel_count(width, height)? * 3;
        if data.len() != expected {
            return Err(ImagingError::PixelCount {
                width,
                height,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self, ImagingError> {
        let data = rgb.repeat(pixel_count(width, height)?);
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// 8-bit single-channel raster, row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl std::fmt::Debug for GrayImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "GrayImage({}x{})", self.width, self.height)
    }
}

impl GrayImage {
    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Result<Self, ImagingError> {
        let expected = pixel_count(width, height)?;
        if data.len() != expected {
            return Err(ImagingError::PixelCount {
                width,
                height,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, value: u8) -> Result<Self, ImagingError> {
        let n = pixel_count(width, height)?;
        Ok(Self {
            width,
            height,
            data: vec![value; n],
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> u8 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn put_pixel(&mut self, x: u32, y: u32, value: u8) {
        self.data[y as usize * self.width as usize + x as usize] = value;
    }

    /// Replicates the gray level into all three channels.
    pub fn to_color(&self) -> ColorImage {
        let mut data = Vec::with_capacity(self.data.len() * 3);
        for &v in &self.data {
            data.extend_from_slice(&[v, v, v]);
        }
        ColorImage {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

/// Thresholded raster whose pixels are all either [`BACKGROUND`] or [`FOREGROUND`].
#[derive(Clone, PartialEq, Eq)]
pub struct BinaryImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl std::fmt::Debug for BinaryImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "BinaryImage({}x{}, {} foreground)",
            self.width,
            self.height,
            self.foreground_count()
        )
    }
}

impl BinaryImage {
    /// Wraps raw values, rejecting anything other than 0 or 255.
    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Result<Self, ImagingError> {
        let expected = pixel_count(width, height)?;
        if data.len() != expected {
            return Err(ImagingError::PixelCount {
                width,
                height,
                expected,
                actual: data.len(),
            });
        }
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, &v)| v != FOREGROUND && v != BACKGROUND)
        {
            return Err(ImagingError::NotBinary { index, value });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Builds a mask from a predicate over `(x, y)`.
    pub fn from_fn(
        width: u32,
        height: u32,
        mut f: impl FnMut(u32, u32) -> bool,
    ) -> Result<Self, ImagingError> {
        let n = pixel_count(width, height)?;
        let mut data = Vec::with_capacity(n);
        for y in 0..height {
            for x in 0..width {
                data.push(if f(x, y) { FOREGROUND } else { BACKGROUND });
            }
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn empty(width: u32, height: u32) -> Result<Self, ImagingError> {
        Self::from_fn(width, height, |_, _| false)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    pub fn is_foreground(&self, x: u32, y: u32) -> bool {
        self.data[y as usize * self.width as usize + x as usize] == FOREGROUND
    }

    pub fn set(&mut self, x: u32, y: u32, foreground: bool) {
        self.data[y as usize * self.width as usize + x as usize] =
            if foreground { FOREGROUND } else { BACKGROUND };
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == FOREGROUND).count()
    }
}

/// Luma conversion with 0.299/0.587/0.114 weights, rounded half-up.
///
/// Integer arithmetic keeps the rounding exact: equal channels `(v, v, v)`
/// always map back to `v`.
pub fn to_grayscale(img: &ColorImage) -> GrayImage {
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| {
            let weighted = 299 * p[0] as u32 + 587 * p[1] as u32 + 114 * p[2] as u32;
            ((weighted + 500) / 1000).min(255) as u8
        })
        .collect();
    GrayImage {
        width: img.width,
        height: img.height,
        data,
    }
}

/// Pixels brighter than `t` become background (0); pixels at or below `t`
/// become foreground (255).
pub fn binary_threshold(img: &GrayImage, t: u8) -> BinaryImage {
    let data = img
        .data
        .iter()
        .map(|&g| if g > t { BACKGROUND } else { FOREGROUND })
        .collect();
    BinaryImage {
        width: img.width,
        height: img.height,
        data,
    }
}

/// Per-pixel `|a - b|`.
pub fn absolute_difference(a: &GrayImage, b: &GrayImage) -> Result<GrayImage, ImagingError> {
    check_same_size(a.dimensions(), b.dimensions())?;
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&p, &q)| p.abs_diff(q))
        .collect();
    Ok(GrayImage {
        width: a.width,
        height: a.height,
        data,
    })
}

/// Percentage of positions where the two binary frames agree.
pub fn similarity_percent(a: &BinaryImage, b: &BinaryImage) -> Result<f64, ImagingError> {
    check_same_size(a.dimensions(), b.dimensions())?;
    let equal = a.data.iter().zip(&b.data).filter(|(p, q)| p == q).count();
    Ok(100.0 * equal as f64 / a.data.len() as f64)
}

/// Foreground in `current` that was background in `previous`.
pub fn new_foreground_mask(
    previous: &BinaryImage,
    current: &BinaryImage,
) -> Result<BinaryImage, ImagingError> {
    check_same_size(previous.dimensions(), current.dimensions())?;
    let data = previous
        .data
        .iter()
        .zip(&current.data)
        .map(|(&p, &c)| {
            if c == FOREGROUND && p == BACKGROUND {
                FOREGROUND
            } else {
                BACKGROUND
            }
        })
        .collect();
    Ok(BinaryImage {
        width: current.width,
        height: current.height,
        data,
    })
}

/// Axis-aligned bounding box, inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min_x: u32,
    pub min_y: u32,
    pub max_x: u32,
    pub max_y: u32,
}

impl BoundingBox {
    pub fn width(&self) -> u32 {
        self.max_x - self.min_x + 1
    }

    pub fn height(&self) -> u32 {
        self.max_y - self.min_y + 1
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min_x as f64 && x <= self.max_x as f64 && y >= self.min_y as f64 && y <= self.max_y as f64
    }
}

/// One maximal 8-connected foreground region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub label: u32,
    /// Filled pixel count.
    pub area: u64,
    pub bbox: BoundingBox,
    pub centroid: (f64, f64),
}

/// A horizontal run of foreground pixels `[start, end)` on row `y`.
struct Run {
    y: u32,
    start: u32,
    end: u32,
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let ra = find(parent, a);
    let rb = find(parent, b);
    if ra != rb {
        // Keep the earlier run as root so roots stay in raster order.
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi] = lo;
    }
}

/// Labels the 8-connected regions of foreground pixels.
///
/// Works on row runs with union-find, so cost scales with the number of
/// runs rather than with a per-pixel label buffer. Components come back
/// ordered by the top-left corner of their bounding box (`min_y`, then
/// `min_x`), with labels assigned densely from 1 in that order.
pub fn label_components(img: &BinaryImage) -> Vec<Component> {
    let width = img.width as usize;
    let mut runs: Vec<Run> = Vec::new();
    let mut parent: Vec<usize> = Vec::new();
    // Index range of runs belonging to the previous row.
    let mut prev_row = 0..0;
    let mut cursor = 0;

    for (y, row) in img.data.chunks_exact(width).enumerate() {
        let row_start = runs.len();
        let mut x = 0;
        while x < width {
            if row[x] != FOREGROUND {
                x += 1;
                continue;
            }
            let start = x;
            while x < width && row[x] == FOREGROUND {
                x += 1;
            }
            let id = runs.len();
            runs.push(Run {
                y: y as u32,
                start: start as u32,
                end: x as u32,
            });
            parent.push(id);

            // 8-connectivity: a run touches a run above if their spans overlap
            // after widening by one pixel on each side.
            while cursor < prev_row.end && (runs[cursor].end as usize) < start {
                cursor += 1;
            }
            let mut above = cursor;
            while above < prev_row.end && (runs[above].start as usize) <= x {
                union(&mut parent, id, above);
                above += 1;
            }
        }
        prev_row = row_start..runs.len();
        cursor = prev_row.start;
    }

    struct Acc {
        first_run: usize,
        area: u64,
        sum_x: f64,
        sum_y: f64,
        bbox: BoundingBox,
    }

    let mut accs: Vec<Acc> = Vec::new();
    let mut slot_of_root: Vec<usize> = vec![usize::MAX; runs.len()];
    for (i, r) in runs.iter().enumerate() {
        let root = find(&mut parent, i);
        let len = (r.end - r.start) as u64;
        // sum of x over [start, end) = len * (start + end - 1) / 2
        let sx = len as f64 * (r.start as f64 + r.end as f64 - 1.0) / 2.0;
        if slot_of_root[root] == usize::MAX {
            slot_of_root[root] = accs.len();
            accs.push(Acc {
                first_run: i,
                area: 0,
                sum_x: 0.0,
                sum_y: 0.0,
                bbox: BoundingBox {
                    min_x: r.start,
                    min_y: r.y,
                    max_x: r.end - 1,
                    max_y: r.y,
                },
            });
        }
        let acc = &mut accs[slot_of_root[root]];
        acc.area += len;
        acc.sum_x += sx;
        acc.sum_y += len as f64 * r.y as f64;
        acc.bbox.min_x = acc.bbox.min_x.min(r.start);
        acc.bbox.max_x = acc.bbox.max_x.max(r.end - 1);
        acc.bbox.min_y = acc.bbox.min_y.min(r.y);
        acc.bbox.max_y = acc.bbox.max_y.max(r.y);
    }

    accs.sort_by_key(|a| (a.bbox.min_y, a.bbox.min_x, a.first_run));
    accs.into_iter()
        .enumerate()
        .map(|(i, a)| Component {
            label: i as u32 + 1,
            area: a.area,
            bbox: a.bbox,
            centroid: (a.sum_x / a.area as f64, a.sum_y / a.area as f64),
        })
        .collect()
}

/// Number of components whose area lies in `[lower, upper]`, both inclusive.
pub fn count_weevils(components: &[Component], lower: u64, upper: u64) -> Result<usize, ImagingError> {
    if lower > upper {
        return Err(ImagingError::InvertedBounds { lower, upper });
    }
    Ok(components
        .iter()
        .filter(|c| (lower..=upper).contains(&c.area))
        .count())
}

/// Decodes PGM/PNG (or any enabled format) bytes into RGB.
pub fn decode_color(bytes: &[u8]) -> Result<ColorImage, ImagingError> {
    let img = image::load_from_memory(bytes)?.into_rgb8();
    let (w, h) = img.dimensions();
    ColorImage::from_raw(w, h, img.into_raw())
}

pub fn decode_gray(bytes: &[u8]) -> Result<GrayImage, ImagingError> {
    let img = image::load_from_memory(bytes)?.into_luma8();
    let (w, h) = img.dimensions();
    GrayImage::from_raw(w, h, img.into_raw())
}

pub fn load_gray(path: &Path) -> Result<GrayImage, ImagingError> {
    let img = ImageReader::open(path)?.with_guessed_format()?.decode()?.into_luma8();
    let (w, h) = img.dimensions();
    GrayImage::from_raw(w, h, img.into_raw())
}

pub fn load_color(path: &Path) -> Result<ColorImage, ImagingError> {
    let img = ImageReader::open(path)?.with_guessed_format()?.decode()?.into_rgb8();
    let (w, h) = img.dimensions();
    ColorImage::from_raw(w, h, img.into_raw())
}

/// Binary PGM (P5), maxval 255.
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn encode_png_gray(img: &GrayImage) -> Result<Vec<u8>, ImagingError> {
    encode_png(img.width, img.height, &img.data, image::ExtendedColorType::L8)
}

pub fn encode_png_color(img: &ColorImage) -> Result<Vec<u8>, ImagingError> {
    encode_png(img.width, img.height, &img.data, image::ExtendedColorType::Rgb8)
}

fn encode_png(
    width: u32,
    height: u32,
    data: &[u8],
    color: image::ExtendedColorType,
) -> Result<Vec<u8>, ImagingError> {
    use image::codecs::png::{CompressionType, FilterType, PngEncoder};
    use image::ImageEncoder;

    let mut out = Vec::new();
    PngEncoder::new_with_quality(&mut out, CompressionType::Fast, FilterType::Sub)
        .write_image(data, width, height, color)?;
    Ok(out)
}

/// Sniffs the container format of encoded image bytes.
pub fn guess_format(bytes: &[u8]) -> Option<ImageFormat> {
    image::guess_format(bytes).ok()
}
