use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PATCH_SIZE;
use crate::tensor::Tensor;

/// Smallest side accepted by [`pad_to_canonical`].
pub const MIN_PATCH_SIDE: u32 = 48;

/// Standard deviations below this are treated as zero.
pub const STD_FLOOR: f64 = 1e-8;

/// Which statistics an image is standardized with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// One mean and deviation over all pixels and channels.
    #[default]
    Global,
    PerChannel,
}

/// Zero-pads a 48..=50 sided image on the bottom and right to 50×50.
pub fn pad_to_canonical(image: &RgbImage) -> Result<RgbImage> {
    let (w, h) = image.dimensions();
    let side = PATCH_SIZE as u32;
    let ok = |d: u32| (MIN_PATCH_SIDE..=side).contains(&d);
    if !ok(w) || !ok(h) {
        return Err(Error::shape("pad_to_canonical", format!("H, W in [{MIN_PATCH_SIDE}, {side}]"), format!("{h}x{w}")));
    }
    if (w, h) == (side, side) {
        return Ok(image.clone());
    }
    let mut out = RgbImage::new(side, side);
    for (x, y, px) in image.enumerate_pixels() {
        out.put_pixel(x, y, *px);
    }
    Ok(out)
}

/// Standardizes an interleaved `H×W×3` float image into a `[3, H, W]` tensor.
/// A (channel) deviation under [`STD_FLOOR`] yields zeros.
pub fn standardize(hwc: &[f32], height: usize, width: usize, mode: Normalization) -> Result<Tensor> {
    let plane = height * width;
    if hwc.len() != plane * 3 || plane == 0 {
        return Err(Error::shape("normalize_image", format!("{height}x{width}x3 values"), format!("{} values", hwc.len())));
    }
    if hwc.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("normalize_image", "non-finite pixel value"));
    }
    // Two-pass mean and population deviation over channels `chans`.
    let moments = |chans: &[usize]| {
        let vals = || chans.iter().flat_map(|&c| hwc.iter().skip(c).step_by(3)).map(|&v| f64::from(v));
        let n = (plane * chans.len()) as f64;
        let mean = vals().sum::<f64>() / n;
        let var = vals().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let stats: [(f64, f64); 3] = match mode {
        Normalization::Global => [moments(&[0, 1, 2]); 3],
        Normalization::PerChannel => [0, 1, 2].map(|c| moments(&[c])),
    };
    let mut out = vec![0.0f32; plane * 3];
    for (c, &(mean, std)) in stats.iter().enumerate() {
        if std < STD_FLOOR {
            continue;
        }
        for i in 0..plane {
            out[c * plane + i] = ((f64::from(hwc[i * 3 + c]) - mean) / std) as f32;
        }
    }
    Tensor::new(vec![3, height, width], out)
}

/// Scales 8-bit pixels to `[0, 1]` and standardizes them.
pub fn normalize_image(image: &RgbImage, mode: Normalization) -> Result<Tensor> {
    let (w, h) = image.dimensions();
    let hwc: Vec<f32> = image.as_raw().iter().map(|&b| f32::from(b) / 255.0).collect();
    standardize(&hwc, h as usize, w as usize, mode)
}

/// Decodes an image file as 8-bit RGB.
pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}

/// Decode, pad, and normalize one patch file into a `[3, 50, 50]` tensor.
pub fn load_patch(path: &Path, mode: Normalization) -> Result<Tensor> {
    let img = read_rgb(path)?;
    let padded = pad_to_canonical(&img).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    normalize_image(&padded, mode)
}
