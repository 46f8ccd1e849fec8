use std::path::Path;

use image::{GrayImage, RgbImage};

use super::sample::DataShape;
use crate::error::{CdaError, Result};

/// Reads an 8-bit PNG into HWC `f32` values in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<(Vec<f32>, DataShape)> {
    let img = image::open(path).map_err(|e| CdaError::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let (data, channels) = match img.color().channel_count() {
        1 => (img.to_luma8().into_raw(), 1),
        _ => (img.to_rgb8().into_raw(), 3),
    };
    let shape = DataShape::Image {
        height: img.height() as usize,
        width: img.width() as usize,
        channels,
    };
    Ok((data.into_iter().map(|v| v as f32 / 255.0).collect(), shape))
}

/// Writes HWC values in `[0, 1]` as an 8-bit PNG (1 or 3 channels).
pub fn write_png(path: &Path, data: &[f32], shape: DataShape) -> Result<()> {
    let DataShape::Image { height, width, channels } = shape else {
        return Err(CdaError::Contract("PNG export needs image-shaped data".into()));
    };
    let bytes: Vec<u8> = data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let (w, h) = (width as u32, height as u32);
    let res = match channels {
        1 => GrayImage::from_raw(w, h, bytes).map(|i| i.save(path)),
        3 => RgbImage::from_raw(w, h, bytes).map(|i| i.save(path)),
        c => return Err(CdaError::Contract(format!("cannot write {c}-channel PNG"))),
    };
    match res {
        Some(Ok(())) => Ok(()),
        Some(Err(e)) => Err(CdaError::Load { path: path.to_path_buf(), reason: e.to_string() }),
        None => Err(CdaError::Contract("data length does not match image shape".into())),
    }
}
