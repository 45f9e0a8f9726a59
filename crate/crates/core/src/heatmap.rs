//! Whole-slide reconstruction from patch coordinates and probability
//! heatmaps: raw, Gaussian-smoothed, and blended over the slide.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::PatchRecord;
use crate::error::{Error, Result};
use crate::model::PATCH_SIZE;

pub const DEFAULT_KERNEL: usize = 25;
pub const DEFAULT_ALPHA: f64 = 0.4;
/// Canvas colour where no patch landed.
pub const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);

/// Kernel spans ±3σ.
pub fn default_sigma(kernel_size: usize) -> f64 {
    kernel_size as f64 / 6.0
}

/// A dense 2-D scalar field, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Field {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape("Field", format!("{} values", width * height), format!("{} values", data.len())));
        }
        Ok(Field { width, height, data })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Field {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// A reassembled slide. `prob` is per pixel; `None` where no patch landed.
#[derive(Clone, Debug, PartialEq)]
pub struct SlideCanvas {
    pub patient_id: String,
    pub width: usize,
    pub height: usize,
    pub rgb: RgbImage,
    pub prob: Vec<Option<f32>>,
    /// Records placed, after sorting.
    pub patches: usize,
    /// Each placed patch's probability, in placement order.
    pub patch_probs: Vec<f32>,
}

impl SlideCanvas {
    pub fn prob_at(&self, x: usize, y: usize) -> Option<f32> {
        self.prob[y * self.width + x]
    }
}

/// Places every patch of one patient at its slide coordinates. Records are
/// sorted by `(y, x)` and later ones overwrite earlier ones.
pub fn assemble_slide(records: &[PatchRecord], probabilities: &[f32], mut load: impl FnMut(&PatchRecord) -> Result<RgbImage>) -> Result<SlideCanvas> {
    if records.len() != probabilities.len() {
        return Err(Error::shape("assemble_slide", format!("{} probabilities", records.len()), format!("{} probabilities", probabilities.len())));
    }
    let Some(first) = records.first() else {
        return Err(Error::invalid("assemble_slide", "no records"));
    };
    if let Some(other) = records.iter().find(|r| r.patient_id != first.patient_id) {
        return Err(Error::invalid("assemble_slide", format!("records span patients {} and {}", first.patient_id, other.patient_id)));
    }
    if let Some(i) = probabilities.iter().position(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::invalid("assemble_slide", format!("probability {} of {} is outside [0, 1]", probabilities[i], records[i].path.display())));
    }
    let width = records.iter().map(|r| r.x as usize).max().unwrap_or(0) + PATCH_SIZE;
    let height = records.iter().map(|r| r.y as usize).max().unwrap_or(0) + PATCH_SIZE;

    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by_key(|&i| (records[i].y, records[i].x));
    let mut rgb = RgbImage::from_pixel(width as u32, height as u32, BACKGROUND);
    let mut prob = vec![None; width * height];
    let mut patch_probs = Vec::with_capacity(records.len());
    for i in order {
        let rec = &records[i];
        let patch = load(rec)?;
        let (x0, y0) = (rec.x as usize, rec.y as usize);
        let (pw, ph) = ((patch.width() as usize).min(PATCH_SIZE), (patch.height() as usize).min(PATCH_SIZE));
        for dy in 0..ph {
            for dx in 0..pw {
                rgb.put_pixel((x0 + dx) as u32, (y0 + dy) as u32, *patch.get_pixel(dx as u32, dy as u32));
                prob[(y0 + dy) * width + x0 + dx] = Some(probabilities[i]);
            }
        }
        patch_probs.push(probabilities[i]);
    }
    Ok(SlideCanvas {
        patient_id: first.patient_id.clone(),
        width,
        height,
        rgb,
        prob,
        patches: records.len(),
        patch_probs,
    })
}

/// Normalized 1-D Gaussian taps; the 2-D kernel is their outer product.
pub fn gaussian_kernel(kernel_size: usize, sigma: f64) -> Result<Vec<f64>> {
    if kernel_size % 2 == 0 {
        return Err(Error::invalid("gaussian_kernel", format!("kernel size must be odd, got {kernel_size}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("gaussian_kernel", format!("sigma must be positive, got {sigma}")));
    }
    let r = (kernel_size / 2) as f64;
    let taps: Vec<f64> = (0..kernel_size).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / sum).collect())
}

fn convolve_rows(src: &[f64], width: usize, height: usize, taps: &[f64]) -> Vec<f64> {
    let r = taps.len() / 2;
    let mut out = vec![0.0; src.len()];
    for y in 0..height {
        let row = &src[y * width..(y + 1) * width];
        for x in 0..width {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                let sx = (x + k).saturating_sub(r).min(width - 1);
                acc += t * row[sx];
            }
            out[y * width + x] = acc;
        }
    }
    out
}

fn transpose(src: &[f64], width: usize, height: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for y in 0..height {
        for x in 0..width {
            out[x * height + y] = src[y * width + x];
        }
    }
    out
}

/// Separable Gaussian blur with replicate padding.
pub fn gaussian_smooth(field: &Field, kernel_size: usize, sigma: f64) -> Result<Field> {
    let taps = gaussian_kernel(kernel_size, sigma)?;
    if field.data.is_empty() {
        return Ok(field.clone());
    }
    let (w, h) = (field.width, field.height);
    let rows = convolve_rows(&field.data, w, h, &taps);
    let cols = convolve_rows(&transpose(&rows, w, h), h, w, &taps);
    let mut data = transpose(&cols, h, w);
    // Rounding can step a hair outside the input range.
    let (lo, hi) = field.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    for v in &mut data {
        *v = v.clamp(lo, hi);
    }
    Ok(Field { width: w, height: h, data })
}

/// Smooths only the covered pixels: blur of `p·mask` over blur of `mask`,
/// so no-data regions neither contribute nor receive mass. Uncovered pixels
/// are 0.
pub fn smooth_canvas(canvas: &SlideCanvas, kernel_size: usize, sigma: f64) -> Result<Field> {
    let values = canvas.prob.iter().map(|p| p.map_or(0.0, f64::from)).collect();
    let mask = canvas.prob.iter().map(|p| if p.is_some() { 1.0 } else { 0.0 }).collect();
    let num = gaussian_smooth(&Field::new(canvas.width, canvas.height, values)?, kernel_size, sigma)?;
    let den = gaussian_smooth(&Field::new(canvas.width, canvas.height, mask)?, kernel_size, sigma)?;
    let data = num
        .data
        .iter()
        .zip(&den.data)
        .zip(&canvas.prob)
        .map(|((&n, &d), p)| if p.is_some() && d > 0.0 { (n / d).clamp(0.0, 1.0) } else { 0.0 })
        .collect();
    Field::new(canvas.width, canvas.height, data)
}

/// Linear blue (0) to red (1).
pub fn colormap(p: f64) -> [f64; 3] {
    let p = p.clamp(0.0, 1.0);
    [255.0 * p, 0.0, 255.0 * (1.0 - p)]
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// The unsmoothed probability field; uncovered pixels keep the background.
pub fn render_heatmap(canvas: &SlideCanvas) -> RgbImage {
    RgbImage::from_fn(canvas.width as u32, canvas.height as u32, |x, y| match canvas.prob_at(x as usize, y as usize) {
        Some(p) => Rgb(colormap(f64::from(p)).map(to_u8)),
        None => BACKGROUND,
    })
}

/// `(1 − alpha)·slide + alpha·colormap(p)` on covered pixels; uncovered
/// pixels are copied from the slide.
pub fn render_overlay(canvas: &SlideCanvas, smoothed: &Field, alpha: f64) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("render_overlay", format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if (smoothed.width, smoothed.height) != (canvas.width, canvas.height) {
        return Err(Error::shape("render_overlay", format!("{}x{}", canvas.width, canvas.height), format!("{}x{}", smoothed.width, smoothed.height)));
    }
    let mut out = canvas.rgb.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        let (x, y) = (x as usize, y as usize);
        if canvas.prob_at(x, y).is_none() {
            continue;
        }
        let color = colormap(smoothed.at(x, y));
        for c in 0..3 {
            px.0[c] = to_u8((1.0 - alpha) * f64::from(px.0[c]) + alpha * color[c]);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatmapOptions {
    pub kernel_size: usize,
    /// `None` selects [`default_sigma`].
    pub sigma: Option<f64>,
    pub alpha: f64,
    /// Cut-off for counting a patch positive in the summary.
    pub threshold: f64,
}

impl Default for HeatmapOptions {
    fn default() -> Self {
        HeatmapOptions {
            kernel_size: DEFAULT_KERNEL,
            sigma: None,
            alpha: DEFAULT_ALPHA,
            threshold: crate::metrics::DEFAULT_THRESHOLD,
        }
    }
}

impl HeatmapOptions {
    pub fn validate(&self) -> Result<()> {
        gaussian_kernel(self.kernel_size, self.sigma())?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("alpha", format!("must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }

    pub fn sigma(&self) -> f64 {
        self.sigma.unwrap_or_else(|| default_sigma(self.kernel_size))
    }
}

/// Per-slide JSON sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideSummary {
    pub patient_id: String,
    pub patch_count: usize,
    /// Fraction of patches at or above the threshold.
    pub positive_fraction: f64,
    pub mean_probability: f64,
    pub threshold: f64,
    pub width: usize,
    pub height: usize,
}

impl SlideSummary {
    pub fn of(canvas: &SlideCanvas, threshold: f64) -> Self {
        let n = canvas.patch_probs.len().max(1) as f64;
        SlideSummary {
            patient_id: canvas.patient_id.clone(),
            patch_count: canvas.patches,
            positive_fraction: canvas.patch_probs.iter().filter(|&&p| f64::from(p) >= threshold).count() as f64 / n,
            mean_probability: canvas.patch_probs.iter().map(|&p| f64::from(p)).sum::<f64>() / n,
            threshold,
            width: canvas.width,
            height: canvas.height,
        }
    }
}

/// Files written by [`write_slide_outputs`].
#[derive(Clone, Debug)]
pub struct SlideOutputs {
    pub original: PathBuf,
    pub heatmap: PathBuf,
    pub overlay: PathBuf,
    pub summary: PathBuf,
}

/// Writes `<patient>_original.png`, `<patient>_heatmap.png`,
/// `<patient>_overlay.png` and `<patient>_summary.json` into `dir`.
pub fn write_slide_outputs(canvas: &SlideCanvas, opts: &HeatmapOptions, dir: &Path) -> Result<(SlideOutputs, SlideSummary)> {
    opts.validate()?;
    let smoothed = smooth_canvas(canvas, opts.kernel_size, opts.sigma())?;
    let overlay = render_overlay(canvas, &smoothed, opts.alpha)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = |suffix: &str| dir.join(format!("{}_{suffix}", canvas.patient_id));
    let outputs = SlideOutputs {
        original: name("original.png"),
        heatmap: name("heatmap.png"),
        overlay: name("overlay.png"),
        summary: name("summary.json"),
    };
    for (img, path) in [(&canvas.rgb, &outputs.original), (&render_heatmap(canvas), &outputs.heatmap), (&overlay, &outputs.overlay)] {
        img.save(path).map_err(|source| Error::Image { path: path.clone(), source })?;
    }
    let summary = SlideSummary::of(canvas, opts.threshold);
    let json = serde_json::to_string_pretty(&summary)?;
    std::fs::write(&outputs.summary, json).map_err(|e| Error::io(&outputs.summary, e))?;
    Ok((outputs, summary))
}
