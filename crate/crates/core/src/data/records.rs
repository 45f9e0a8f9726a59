use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::error::{Error, Result};

/// One labelled patch: the patient it came from, its top-left corner on the
/// slide, and where the image lives.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchRecord {
    pub patient_id: String,
    pub x: u32,
    pub y: u32,
    /// 1 = IDC-positive.
    pub label: u8,
    pub path: PathBuf,
}

fn patch_name_pattern() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    PATTERN.get_or_init(|| Regex::new(r"^(?P<patient>[^_]+)_idx5_x(?P<x>\d+)_y(?P<y>\d+)_class(?P<label>[01])\.png$").unwrap())
}

/// A file the scanner could not turn into a record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipEntry {
    pub path: PathBuf,
    pub reason: String,
}

/// Parses `<patient>_idx5_x<int>_y<int>_class<0|1>.png`; any directory part
/// of `path` is kept but not interpreted.
pub fn parse_patch_path(path: impl AsRef<Path>) -> std::result::Result<PatchRecord, SkipEntry> {
    let path = path.as_ref();
    let skip = |reason: &str| SkipEntry {
        path: path.to_path_buf(),
        reason: reason.to_owned(),
    };
    let name = path.file_name().and_then(|n| n.to_str()).ok_or_else(|| skip("file name is not UTF-8"))?;
    let caps = patch_name_pattern()
        .captures(name)
        .ok_or_else(|| skip("name does not match <patient>_idx5_x<int>_y<int>_class<0|1>.png"))?;
    let coord = |key: &str| caps[key].parse::<u32>().map_err(|_| skip("coordinate out of range"));
    Ok(PatchRecord {
        patient_id: caps["patient"].to_owned(),
        x: coord("x")?,
        y: coord("y")?,
        label: if &caps["label"] == "1" { 1 } else { 0 },
        path: path.to_path_buf(),
    })
}

/// Records found under a dataset root, plus every file that was passed over.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ScanReport {
    pub records: Vec<PatchRecord>,
    pub skipped: Vec<SkipEntry>,
}

impl ScanReport {
    pub fn positives(&self) -> usize {
        self.records.iter().filter(|r| r.label == 1).count()
    }

    /// Distinct patient ids in ascending order.
    pub fn patients(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.records.iter().map(|r| r.patient_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }
}

/// Walks `root` (one directory per patient, each with `0/` and `1/`
/// subdirectories) in sorted order. A file whose class directory disagrees
/// with the label in its name is skipped, not guessed at.
pub fn scan_dataset(root: impl AsRef<Path>) -> Result<ScanReport> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::io(root, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root is not a directory")));
    }
    let mut report = ScanReport::default();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(root).to_path_buf();
            Error::io(path, e.into())
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        match parse_patch_path(entry.path()) {
            Ok(rec) => {
                let class_dir = entry.path().parent().and_then(|p| p.file_name()).and_then(|n| n.to_str());
                match class_dir {
                    Some(d) if d == rec.label.to_string() => report.records.push(rec),
                    _ => report.skipped.push(SkipEntry {
                        path: rec.path,
                        reason: format!("label {} in name disagrees with its class directory", rec.label),
                    }),
                }
            }
            Err(skip) => report.skipped.push(skip),
        }
    }
    Ok(report)
}
