//! Synthetic stand-ins for the patch dataset: labelled colour-blob patches and
//! record sets with arbitrary class ratios.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::{normalize_image, Normalization};
use super::records::PatchRecord;
use super::source::InMemorySource;
use crate::error::{Error, Result};

/// A 50×50 patch with a noisy pink background and one disc: blue-violet for
/// label 0, deep red for label 1.
pub fn blob_patch<R: Rng + ?Sized>(label: u8, rng: &mut R) -> RgbImage {
    let (cx, cy) = (rng.gen_range(15.0..35.0f32), rng.gen_range(15.0..35.0f32));
    let radius = rng.gen_range(8.0..14.0f32);
    let disc: [f32; 3] = if label == 1 { [170.0, 30.0, 60.0] } else { [70.0, 60.0, 170.0] };
    RgbImage::from_fn(50, 50, |x, y| {
        let inside = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2) <= radius * radius;
        let base = if inside { disc } else { [215.0, 185.0, 215.0] };
        Rgb(base.map(|c| (c + rng.gen_range(-20.0..20.0f32)).clamp(0.0, 255.0) as u8))
    })
}

/// `n` normalized blob patches, labels alternating 0, 1, 0, ...
pub fn blob_source(n: usize, seed: u64, normalization: Normalization) -> Result<InMemorySource> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    let images = labels.iter().map(|&l| normalize_image(&blob_patch(l, &mut rng), normalization)).collect::<Result<Vec<_>>>()?;
    InMemorySource::new(images, labels)
}

/// Records (no files) for `n` patches spread round-robin over `patients`
/// patients; the first `positives` are label 1. Paths follow the dataset
/// naming so they parse back into the same records.
pub fn synthetic_records(n: usize, positives: usize, patients: usize) -> Vec<PatchRecord> {
    let patients = patients.max(1);
    (0..n)
        .map(|i| {
            let label = u8::from(i < positives);
            let patient = format!("{}", 1000 + i % patients);
            let k = i / patients;
            let (x, y) = ((k % 40) as u32 * 50, (k / 40) as u32 * 50);
            PatchRecord {
                path: PathBuf::from(format!("{patient}/{label}/{patient}_idx5_x{x}_y{y}_class{label}.png")),
                patient_id: patient,
                x,
                y,
                label,
            }
        })
        .collect()
}

/// Writes a dataset tree under `root`: `patients` patients, each a
/// `rows × cols` grid of blob patches. The right half of each grid is
/// positive, so an even `cols` gives balanced classes.
pub fn write_synthetic_dataset(root: &Path, patients: usize, rows: u32, cols: u32, seed: u64) -> Result<Vec<PatchRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    for p in 0..patients {
        let patient = format!("{}", 9000 + p);
        for r in 0..rows {
            for c in 0..cols {
                let label = u8::from(2 * c >= cols);
                let (x, y) = (c * 50, r * 50);
                let dir = root.join(&patient).join(label.to_string());
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let path = dir.join(format!("{patient}_idx5_x{x}_y{y}_class{label}.png"));
                blob_patch(label, &mut rng).save(&path).map_err(|source| Error::Image { path: path.clone(), source })?;
                records.push(PatchRecord {
                    patient_id: patient.clone(),
                    x,
                    y,
                    label,
                    path,
                });
            }
        }
    }
    Ok(records)
}
