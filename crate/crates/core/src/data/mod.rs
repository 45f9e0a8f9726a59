//! Patch dataset discovery, decoding, normalization, splits, and batching.

mod image;
mod records;
mod source;
mod split;
pub mod synth;

pub use self::image::{load_patch, normalize_image, pad_to_canonical, read_rgb, standardize, Normalization, MIN_PATCH_SIDE, STD_FLOOR};
pub use records::{parse_patch_path, scan_dataset, PatchRecord, ScanReport, SkipEntry};
pub use source::{assemble_batch, batches, epoch_order, sequential_batches, Batch, FileSource, InMemorySource, PatchSource};
pub use split::{make_split, ClassCounts, Split, SplitPlan, SplitSizes, SplitUnit};
