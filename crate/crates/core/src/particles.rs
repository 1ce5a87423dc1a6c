//! Classical particle counting used as ground truth for the counting
//! experiment: global threshold, connected-component labelling,
//! pixel-to-micron calibration and the bottom-edge and scale-bar
//! exclusion rules.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_MIN_AREA_UM2: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParticleError {
    #[error("image dimensions must be at least 1x1 and match the pixel buffer ({width}x{height}, {len} pixels)")]
    BadImage { width: u32, height: u32, len: usize },
    #[error("histogram is empty")]
    EmptyHistogram,
    #[error("histogram holds more than 2^32 samples")]
    HistogramTooLarge,
    #[error("scale bar pixel length is zero")]
    ZeroPixelLength,
    #[error("lengths must be positive and finite, got {0}")]
    NonPositiveLength(f64),
    #[error("exclusion region {0:?} lies outside the image")]
    ExclusionOutOfBounds(Rect),
    #[error("result was computed for a different image size")]
    DimensionMismatch,
}

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, ParticleError> {
        if width == 0 || height == 0 || pixels.len() != width as usize * height as usize {
            return Err(ParticleError::BadImage { width, height, len: pixels.len() });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: u32, height: u32, value: u8) -> Result<Self, ParticleError> {
        Self::new(width, height, vec![value; width as usize * height as usize])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: u8) {
        self.pixels[y as usize * self.width as usize + x as usize] = value;
    }

    pub fn histogram(&self) -> [u64; 256] {
        let mut h = [0u64; 256];
        for &p in &self.pixels {
            h[p as usize] += 1;
        }
        h
    }
}

/// 8-bit RGB image, row-major, three bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl Rect {
    pub fn new(x: u32, y: u32, width: u32, height: u32) -> Self {
        Self { x, y, width, height }
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && y >= self.y && x - self.x < self.width && y - self.y < self.height
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.width > 0
            && self.height > 0
            && self.x.checked_add(self.width).is_some_and(|r| r <= width)
            && self.y.checked_add(self.height).is_some_and(|b| b <= height)
    }

    /// Row index of the last row covered.
    pub fn bottom(&self) -> u32 {
        self.y + self.height - 1
    }

    pub fn right(&self) -> u32 {
        self.x + self.width - 1
    }
}

/// Binary foreground mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), width as usize * height as usize, "mask size");
        Self { width, height, bits }
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

// 256-bit unsigned integer as little-endian limbs, just enough to compare
// between-class variances exactly.
type Wide = [u64; 4];

fn wide(x: u128) -> Wide {
    [x as u64, (x >> 64) as u64, 0, 0]
}

fn wide_mul(a: &Wide, b: &Wide) -> Wide {
    let mut out = [0u64; 4];
    for i in 0..4 {
        let mut carry = 0u128;
        for j in 0..4 - i {
            let cur = out[i + j] as u128 + a[i] as u128 * b[j] as u128 + carry;
            out[i + j] = cur as u64;
            carry = cur >> 64;
        }
    }
    out
}

fn wide_gt(a: &Wide, b: &Wide) -> bool {
    for i in (0..4).rev() {
        if a[i] != b[i] {
            return a[i] > b[i];
        }
    }
    false
}

/// Between-class variance of a split, up to the common factor `1/N^3`,
/// as the exact fraction `d^2 / p`.
#[derive(Clone, Copy)]
struct SplitScore {
    d: u128,
    p: u128,
}

impl SplitScore {
    fn beats(&self, other: Option<&SplitScore>) -> bool {
        if self.d == 0 {
            return false;
        }
        match other {
            None => true,
            Some(o) => {
                let lhs = wide_mul(&wide_mul(&wide(self.d), &wide(self.d)), &wide(o.p));
                let rhs = wide_mul(&wide_mul(&wide(o.d), &wide(o.d)), &wide(self.p));
                wide_gt(&lhs, &rhs)
            }
        }
    }
}

/// Otsu's threshold: the level `t` maximising between-class variance of
/// `{<= t}` against `{> t}`. Candidates start at the lowest occupied
/// level so the lower class is never empty; ties go to the lowest `t`.
/// Arithmetic is exact.
pub fn otsu_threshold(histogram: &[u64; 256]) -> Result<u8, ParticleError> {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return Err(ParticleError::EmptyHistogram);
    }
    if total > u32::MAX as u64 {
        return Err(ParticleError::HistogramTooLarge);
    }
    let weighted: u64 = histogram.iter().enumerate().map(|(i, &h)| i as u64 * h).sum();
    let lowest = histogram.iter().position(|&h| h > 0).unwrap_or(0);

    let (mut n0, mut s0) = (0u64, 0u64);
    let mut best_t = lowest;
    let mut best: Option<SplitScore> = None;
    for (t, &h) in histogram.iter().enumerate().skip(lowest) {
        n0 += h;
        s0 += t as u64 * h;
        let (n1, s1) = (total - n0, weighted - s0);
        if n1 == 0 {
            break;
        }
        let (a, b) = (s0 as u128 * n1 as u128, s1 as u128 * n0 as u128);
        let score = SplitScore { d: a.abs_diff(b), p: n0 as u128 * n1 as u128 };
        if score.beats(best.as_ref()) {
            best = Some(score);
            best_t = t;
        }
    }
    Ok(best_t as u8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    #[default]
    Otsu,
    Fixed(u8),
}

/// Resolves the threshold for `image` and marks pixels strictly above it.
pub fn binarize(image: &GrayImage, mode: ThresholdMode) -> Result<(u8, Mask), ParticleError> {
    let level = match mode {
        ThresholdMode::Fixed(level) => level,
        ThresholdMode::Otsu => otsu_threshold(&image.histogram())?,
    };
    let bits = image.pixels.iter().map(|&p| p > level).collect();
    Ok((level, Mask::new(image.width, image.height, bits)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

struct DisjointSet {
    parent: Vec<u32>,
    size: Vec<u32>,
}

impl DisjointSet {
    fn new() -> Self {
        Self { parent: Vec::new(), size: Vec::new() }
    }

    fn make(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        self.size.push(1);
        id
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let grand = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = grand;
            x = grand;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        if self.size[ra as usize] < self.size[rb as usize] {
            core::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb as usize] = ra;
        self.size[ra as usize] += self.size[rb as usize];
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub id: u32,
    pub pixel_count: u64,
    pub bounding_box: Rect,
}

/// Per-pixel labels (0 is background, `id + 1` otherwise) and one region
/// per connected set of foreground pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labeling {
    pub width: u32,
    pub height: u32,
    pub labels: Vec<u32>,
    pub regions: Vec<Region>,
}

impl Labeling {
    pub fn region_at(&self, x: u32, y: u32) -> Option<u32> {
        match self.labels[y as usize * self.width as usize + x as usize] {
            0 => None,
            l => Some(l - 1),
        }
    }
}

/// Two-pass union-find labelling. Region ids follow the raster order of
/// each region's first pixel.
pub fn label_components(mask: &Mask, connectivity: Connectivity) -> Labeling {
    let (w, h) = (mask.width as usize, mask.height as usize);
    let mut provisional = vec![u32::MAX; w * h];
    let mut sets = DisjointSet::new();

    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !mask.bits[i] {
                continue;
            }
            let mut neighbours = [u32::MAX; 4];
            neighbours[0] = if x > 0 { provisional[i - 1] } else { u32::MAX };
            if y > 0 {
                neighbours[1] = provisional[i - w];
                if connectivity == Connectivity::Eight {
                    neighbours[2] = if x > 0 { provisional[i - w - 1] } else { u32::MAX };
                    neighbours[3] = if x + 1 < w { provisional[i - w + 1] } else { u32::MAX };
                }
            }
            let mut label = u32::MAX;
            for n in neighbours.into_iter().filter(|&n| n != u32::MAX) {
                if label == u32::MAX {
                    label = n;
                } else {
                    sets.union(label, n);
                }
            }
            provisional[i] = if label == u32::MAX { sets.make() } else { label };
        }
    }

    let mut final_id = vec![u32::MAX; sets.parent.len()];
    let mut regions: Vec<Region> = Vec::new();
    let mut labels = vec![0u32; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if provisional[i] == u32::MAX {
                continue;
            }
            let root = sets.find(provisional[i]) as usize;
            if final_id[root] == u32::MAX {
                final_id[root] = regions.len() as u32;
                regions.push(Region {
                    id: final_id[root],
                    pixel_count: 0,
                    bounding_box: Rect::new(x as u32, y as u32, 1, 1),
                });
            }
            let id = final_id[root];
            labels[i] = id + 1;
            let region = &mut regions[id as usize];
            region.pixel_count += 1;
            let bb = &mut region.bounding_box;
            let (x, y) = (x as u32, y as u32);
            if x < bb.x {
                bb.width += bb.x - x;
                bb.x = x;
            }
            if x > bb.right() {
                bb.width = x - bb.x + 1;
            }
            if y > bb.bottom() {
                bb.height = y - bb.y + 1;
            }
        }
    }
    Labeling { width: mask.width, height: mask.height, labels, regions }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CalibrationSource {
    Direct {
        microns_per_pixel: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        exclusion_region: Option<Rect>,
    },
    Bar {
        physical_length_um: f64,
        pixel_length: u32,
        exclusion_region: Rect,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleCalibration {
    pub source: CalibrationSource,
    pub microns_per_pixel: f64,
}

impl ScaleCalibration {
    pub fn exclusion_region(&self) -> Option<Rect> {
        match self.source {
            CalibrationSource::Direct { exclusion_region, .. } => exclusion_region,
            CalibrationSource::Bar { exclusion_region, .. } => Some(exclusion_region),
        }
    }

    pub fn pixel_area_um2(&self) -> f64 {
        self.microns_per_pixel * self.microns_per_pixel
    }
}

fn positive(v: f64) -> Result<f64, ParticleError> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(ParticleError::NonPositiveLength(v))
    }
}

pub fn calibrate(source: CalibrationSource) -> Result<ScaleCalibration, ParticleError> {
    let microns_per_pixel = match source {
        CalibrationSource::Direct { microns_per_pixel, .. } => positive(microns_per_pixel)?,
        CalibrationSource::Bar { physical_length_um, pixel_length, .. } => {
            if pixel_length == 0 {
                return Err(ParticleError::ZeroPixelLength);
            }
            positive(physical_length_um)? / pixel_length as f64
        }
    };
    Ok(ScaleCalibration { source, microns_per_pixel })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParticleOptions {
    pub min_area_um2: f64,
    pub connectivity: Connectivity,
    pub threshold: ThresholdMode,
}

impl Default for ParticleOptions {
    fn default() -> Self {
        Self { min_area_um2: DEFAULT_MIN_AREA_UM2, connectivity: Connectivity::Eight, threshold: ThresholdMode::Otsu }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub id: u32,
    pub pixel_count: u64,
    pub area_um2: f64,
    #[serde(rename = "bbox")]
    pub bounding_box: Rect,
    pub touches_bottom: bool,
    pub in_exclusion: bool,
    pub passes_area: bool,
}

impl Component {
    pub fn is_counted(&self) -> bool {
        self.passes_area && !self.touches_bottom && !self.in_exclusion
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleAnalysisResult {
    pub components: Vec<Component>,
    pub count: usize,
    pub threshold: u8,
    pub calibration: ScaleCalibration,
    pub labeling: Labeling,
    pub overlay: RgbImage,
}

/// Last row of the analysable area: the row above the scale-bar strip
/// when the exclusion region reaches the bottom edge, else the image's
/// last row.
fn analysable_bottom_row(height: u32, exclusion: Option<Rect>) -> u32 {
    match exclusion {
        Some(r) if r.y + r.height == height => r.y.saturating_sub(1),
        _ => height - 1,
    }
}

/// Counts particles with area strictly above `options.min_area_um2` that
/// neither reach the bottom of the analysable area nor overlap the
/// exclusion region.
pub fn count_particles(
    image: &GrayImage,
    calibration: &ScaleCalibration,
    options: &ParticleOptions,
) -> Result<ParticleAnalysisResult, ParticleError> {
    positive(calibration.microns_per_pixel)?;
    let exclusion = calibration.exclusion_region();
    if let Some(r) = exclusion {
        if !r.fits_within(image.width, image.height) {
            return Err(ParticleError::ExclusionOutOfBounds(r));
        }
    }
    let (threshold, mask) = binarize(image, options.threshold)?;
    let labeling = label_components(&mask, options.connectivity);

    let mut in_exclusion = vec![false; labeling.regions.len()];
    if let Some(r) = exclusion {
        for y in r.y..r.y + r.height {
            for x in r.x..r.x + r.width {
                if let Some(id) = labeling.region_at(x, y) {
                    in_exclusion[id as usize] = true;
                }
            }
        }
    }

    let bottom_row = analysable_bottom_row(image.height, exclusion);
    let pixel_area = calibration.pixel_area_um2();
    let components: Vec<Component> = labeling
        .regions
        .iter()
        .map(|region| {
            let area_um2 = region.pixel_count as f64 * pixel_area;
            Component {
                id: region.id,
                pixel_count: region.pixel_count,
                area_um2,
                bounding_box: region.bounding_box,
                touches_bottom: region.bounding_box.bottom() >= bottom_row,
                in_exclusion: in_exclusion[region.id as usize],
                passes_area: area_um2 > options.min_area_um2,
            }
        })
        .collect();
    let count = components.iter().filter(|c| c.is_counted()).count();

    let mut result = ParticleAnalysisResult {
        components,
        count,
        threshold,
        calibration: *calibration,
        labeling,
        overlay: RgbImage { width: 0, height: 0, pixels: Vec::new() },
    };
    result.overlay = render_overlay(image, &result)?;
    Ok(result)
}

pub const COUNTED_TINT: [u8; 3] = [0, 255, 0];
pub const EXCLUDED_TINT: [u8; 3] = [255, 0, 0];

/// Gray base promoted to RGB with counted components blended half-way
/// towards green and all other components towards red. A tinted pixel is
/// never gray, so the classes can be read back from the overlay.
pub fn render_overlay(image: &GrayImage, result: &ParticleAnalysisResult) -> Result<RgbImage, ParticleError> {
    let labeling = &result.labeling;
    if labeling.width != image.width || labeling.height != image.height {
        return Err(ParticleError::DimensionMismatch);
    }
    let mut pixels = Vec::with_capacity(image.pixels.len() * 3);
    for (&gray, &label) in image.pixels.iter().zip(&labeling.labels) {
        let tint = match label {
            0 => None,
            l => Some(if result.components[(l - 1) as usize].is_counted() { COUNTED_TINT } else { EXCLUDED_TINT }),
        };
        match tint {
            None => pixels.extend_from_slice(&[gray; 3]),
            Some(t) => pixels.extend(t.iter().map(|&c| ((gray as u16 + c as u16) / 2) as u8)),
        }
    }
    Ok(RgbImage { width: image.width, height: image.height, pixels })
}
