//! 8-bit grayscale image input, RGB overlay output and the per-image
//! oracle record.

use std::path::Path;

use duet_core::particles::{Component, GrayImage, ParticleAnalysisResult, ParticleError, RgbImage};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ImageIoError {
    #[error("{path}: {source}")]
    Image { path: String, source: image::ImageError },
    #[error("{path}: expected 8-bit grayscale, found {found:?}")]
    NotGray8 { path: String, found: image::ColorType },
    #[error(transparent)]
    Particle(#[from] ParticleError),
}

/// Loads an 8-bit grayscale PNG or binary PGM.
pub fn load_gray(path: &Path) -> Result<GrayImage, ImageIoError> {
    let img = image::open(path).map_err(|source| ImageIoError::Image { path: path.display().to_string(), source })?;
    if img.color() != image::ColorType::L8 {
        return Err(ImageIoError::NotGray8 { path: path.display().to_string(), found: img.color() });
    }
    let luma = img.into_luma8();
    let (w, h) = luma.dimensions();
    Ok(GrayImage::new(w, h, luma.into_raw())?)
}

pub fn save_gray_png(path: &Path, img: &GrayImage) -> Result<(), ImageIoError> {
    image::save_buffer(path, img.pixels(), img.width(), img.height(), image::ExtendedColorType::L8)
        .map_err(|source| ImageIoError::Image { path: path.display().to_string(), source })
}

pub fn save_rgb_png(path: &Path, img: &RgbImage) -> Result<(), ImageIoError> {
    image::save_buffer_with_format(
        path,
        &img.pixels,
        img.width,
        img.height,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|source| ImageIoError::Image { path: path.display().to_string(), source })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRecord {
    pub image: String,
    pub count: usize,
    pub microns_per_pixel: f64,
    pub components: Vec<Component>,
}

impl OracleRecord {
    pub fn new(image: impl Into<String>, result: &ParticleAnalysisResult) -> Self {
        Self {
            image: image.into(),
            count: result.count,
            microns_per_pixel: result.calibration.microns_per_pixel,
            components: result.components.clone(),
        }
    }
}
