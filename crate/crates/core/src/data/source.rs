use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::image::{load_patch, Normalization};
use super::records::PatchRecord;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Random-access labelled patches, each a `[3, 50, 50]` tensor.
pub trait PatchSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// 1 = IDC-positive.
    fn label(&self, index: usize) -> u8;

    fn load(&self, index: usize) -> Result<Tensor>;
}

/// Patches already decoded and normalized.
#[derive(Clone, Debug, Default)]
pub struct InMemorySource {
    images: Vec<Tensor>,
    labels: Vec<u8>,
}

impl InMemorySource {
    pub fn new(images: Vec<Tensor>, labels: Vec<u8>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::shape("InMemorySource", format!("{} labels", images.len()), format!("{} labels", labels.len())));
        }
        if let Some(bad) = images.iter().find(|t| t.shape() != [3, 50, 50]) {
            return Err(Error::shape("InMemorySource", "[3, 50, 50]", crate::tensor::fmt_shape(bad.shape())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::invalid("InMemorySource", format!("label {l} is not 0 or 1")));
        }
        Ok(InMemorySource { images, labels })
    }

    /// Decodes every record of `source` once.
    pub fn preload(source: &dyn PatchSource) -> Result<Self> {
        let images = (0..source.len()).into_par_iter().map(|i| source.load(i)).collect::<Result<Vec<_>>>()?;
        let labels = (0..source.len()).map(|i| source.label(i)).collect();
        Ok(InMemorySource { images, labels })
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }
}

impl PatchSource for InMemorySource {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn label(&self, index: usize) -> u8 {
        self.labels[index]
    }

    fn load(&self, index: usize) -> Result<Tensor> {
        Ok(self.images[index].clone())
    }
}

/// Patches decoded from disk on every access.
#[derive(Clone, Debug)]
pub struct FileSource {
    records: Vec<PatchRecord>,
    normalization: Normalization,
}

impl FileSource {
    pub fn new(records: Vec<PatchRecord>, normalization: Normalization) -> Self {
        FileSource { records, normalization }
    }

    pub fn records(&self) -> &[PatchRecord] {
        &self.records
    }
}

impl PatchSource for FileSource {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn label(&self, index: usize) -> u8 {
        self.records[index].label
    }

    fn load(&self, index: usize) -> Result<Tensor> {
        load_patch(&self.records[index].path, self.normalization)
    }
}

/// A stacked mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, 3, 50, 50]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Source indices, in batch order.
    pub indices: Vec<usize>,
}

/// Visiting order for one epoch: a permutation of `0..len` drawn from
/// `epoch_seed`.
pub fn epoch_order(len: usize, epoch_seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    order
}

/// Assembles the batch holding `indices`; images decode in parallel but land
/// in index order.
pub fn assemble_batch(source: &dyn PatchSource, indices: &[usize]) -> Result<Batch> {
    let images = indices.par_iter().map(|&i| source.load(i)).collect::<Result<Vec<_>>>()?;
    Ok(Batch {
        images: Tensor::stack(&images)?,
        labels: indices.iter().map(|&i| usize::from(source.label(i))).collect(),
        indices: indices.to_vec(),
    })
}

/// Shuffled mini-batches covering `source` once; the last batch may be short.
pub fn batches<'a>(source: &'a dyn PatchSource, batch_size: usize, epoch_seed: u64) -> Result<impl Iterator<Item = Result<Batch>> + 'a> {
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    let order = epoch_order(source.len(), epoch_seed);
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    Ok(chunks.into_iter().map(move |idx| assemble_batch(source, &idx)))
}

/// Batches in source order, for scoring.
pub fn sequential_batches<'a>(source: &'a dyn PatchSource, batch_size: usize) -> impl Iterator<Item = Result<Batch>> + 'a {
    let n = source.len();
    let size = batch_size.max(1);
    (0..n.div_ceil(size)).map(move |b| {
        let idx: Vec<usize> = (b * size..((b + 1) * size).min(n)).collect();
        assemble_batch(source, &idx)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn source(n: usize) -> InMemorySource {
        let images = (0..n).map(|i| Tensor::full(&[3, 50, 50], i as f32)).collect();
        let labels = (0..n).map(|i| (i % 3 == 0) as u8).collect();
        InMemorySource::new(images, labels).unwrap()
    }

    #[test]
    fn hundred_records_in_batches_of_32() {
        let src = source(100);
        let sizes: Vec<usize> = batches(&src, 32, 7).unwrap().map(|b| b.unwrap().labels.len()).collect();
        assert_eq!(sizes, [32, 32, 32, 4]);
    }

    #[test]
    fn epoch_visits_each_record_once_and_keeps_labels() {
        let src = source(45);
        let mut seen = Vec::new();
        let mut labels = Vec::new();
        for b in batches(&src, 8, 3).unwrap() {
            let b = b.unwrap();
            for (k, &i) in b.indices.iter().enumerate() {
                assert_eq!(b.images.outer(k)[0], i as f32);
                assert_eq!(b.labels[k], usize::from(src.label(i)));
            }
            seen.extend(b.indices);
            labels.extend(b.labels);
        }
        seen.sort();
        assert_eq!(seen, (0..45).collect::<Vec<_>>());
        labels.sort();
        let mut want: Vec<usize> = src.labels().iter().map(|&l| usize::from(l)).collect();
        want.sort();
        assert_eq!(labels, want);
    }

    #[test]
    fn order_depends_only_on_epoch_seed() {
        assert_eq!(epoch_order(50, 11), epoch_order(50, 11));
        assert_ne!(epoch_order(50, 11), epoch_order(50, 12));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(batches(&source(3), 0, 0).is_err());
        assert!(InMemorySource::new(vec![Tensor::zeros(&[3, 50, 50])], vec![2]).is_err());
        assert!(InMemorySource::new(vec![Tensor::zeros(&[3, 48, 50])], vec![1]).is_err());
    }

    #[test]
    fn unreadable_file_aborts_with_path() {
        let rec = crate::data::parse_patch_path("/nonexistent/7_idx5_x0_y0_class1.png").unwrap();
        let src = FileSource::new(vec![rec], Normalization::Global);
        let err = batches(&src, 4, 0).unwrap().next().unwrap().unwrap_err().to_string();
        assert!(err.contains("/nonexistent/7_idx5_x0_y0_class1.png"), "{err}");
    }
}
