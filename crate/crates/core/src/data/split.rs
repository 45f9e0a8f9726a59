use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::records::{parse_patch_path, PatchRecord};
use crate::error::{Error, Result};

/// What is kept together when records are assigned to splits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitUnit {
    /// Patches are assigned independently; one patient may appear in several
    /// splits.
    #[default]
    Patch,
    /// Every patch of a patient lands in the same split (or is excluded).
    Patient,
}

/// Requested split sizes. Train and validation are always class-balanced, with
/// the odd record (if any) going to the positive class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitSizes {
    /// Exact record counts. `test: None` takes every remaining record;
    /// `test_positives` also fixes how many of the test records are positive.
    Counts {
        train: usize,
        val: usize,
        test: Option<usize>,
        test_positives: Option<usize>,
    },
    /// Train and validation sizes as fractions of all records (rounded); the
    /// remainder is the test set.
    Fractions { train: f64, val: f64 },
}

impl SplitSizes {
    /// The published partition of the 277,525-patch dataset.
    pub fn published() -> Self {
        SplitSizes::Counts {
            train: 94_543,
            val: 31_514,
            test: Some(151_465),
            test_positives: Some(15_757),
        }
    }

    fn resolve(&self, n: usize) -> Result<(usize, usize, Option<usize>, Option<usize>)> {
        match *self {
            SplitSizes::Counts {
                train,
                val,
                test,
                test_positives,
            } => {
                if let (Some(t), Some(k)) = (test, test_positives) {
                    if k > t {
                        return Err(Error::config("split.test_positives", format!("{k} exceeds the test size {t}")));
                    }
                }
                Ok((train, val, test, test_positives))
            }
            SplitSizes::Fractions { train, val } => {
                for (field, f) in [("split.train", train), ("split.val", val)] {
                    if !(0.0..=1.0).contains(&f) {
                        return Err(Error::config(field, format!("fraction must lie in [0, 1], got {f}")));
                    }
                }
                if train + val > 1.0 {
                    return Err(Error::config("split", format!("train + val fractions exceed 1 ({})", train + val)));
                }
                Ok(((train * n as f64).round() as usize, (val * n as f64).round() as usize, None, None))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub total: usize,
    pub positive: usize,
}

impl ClassCounts {
    pub fn negative(&self) -> usize {
        self.total - self.positive
    }

    fn of(paths: &[PathBuf], labels: &BTreeMap<&Path, u8>) -> Self {
        ClassCounts {
            total: paths.len(),
            positive: paths.iter().filter(|p| labels[p.as_path()] == 1).count(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
    Excluded,
}

/// A replayable partition of a record set: record paths per split plus the
/// seed and unit that produced it. `excluded` holds records that fit no
/// requested split, so the four lists always cover the input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub unit: SplitUnit,
    pub train: Vec<PathBuf>,
    pub val: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
    pub excluded: Vec<PathBuf>,
    pub counts: BTreeMap<String, ClassCounts>,
}

impl SplitPlan {
    pub fn paths(&self, split: Split) -> &[PathBuf] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
            Split::Excluded => &self.excluded,
        }
    }

    pub fn counts(&self, split: Split) -> ClassCounts {
        let key = match split {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Excluded => "excluded",
        };
        self.counts.get(key).copied().unwrap_or_default()
    }

    /// Records of one split, recovered from their file names.
    pub fn records(&self, split: Split) -> Result<Vec<PatchRecord>> {
        self.paths(split)
            .iter()
            .map(|p| parse_patch_path(p).map_err(|s| Error::Data(format!("{}: {}", s.path.display(), s.reason))))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn infeasible(what: &str, need: (usize, usize), have: (usize, usize)) -> Error {
    Error::Data(format!(
        "infeasible split: {what} needs {} positive and {} negative records, but at most {} positive and {} negative are available",
        need.0, need.1, have.0, have.1
    ))
}

fn class_totals(pool: &[usize], records: &[PatchRecord]) -> (usize, usize) {
    let pos = pool.iter().filter(|&&i| records[i].label == 1).count();
    (pos, pool.len() - pos)
}

/// Takes the first `pos` positives and `neg` negatives of `pool` in order;
/// returns `(chosen, rest)`.
fn take_classes(pool: &[usize], records: &[PatchRecord], pos: usize, neg: usize) -> Option<(Vec<usize>, Vec<usize>)> {
    let (mut want_pos, mut want_neg) = (pos, neg);
    let mut chosen = Vec::with_capacity(pos + neg);
    let mut rest = Vec::with_capacity(pool.len().saturating_sub(pos + neg));
    for &i in pool {
        let want = if records[i].label == 1 { &mut want_pos } else { &mut want_neg };
        if *want > 0 {
            *want -= 1;
            chosen.push(i);
        } else {
            rest.push(i);
        }
    }
    (want_pos == 0 && want_neg == 0).then_some((chosen, rest))
}

fn balanced(n: usize) -> (usize, usize) {
    (n.div_ceil(2), n / 2)
}

/// Partitions `records` into balanced train and validation sets and a test set
/// that keeps the natural class ratio. Deterministic in `seed`.
pub fn make_split(records: &[PatchRecord], seed: u64, sizes: SplitSizes, unit: SplitUnit) -> Result<SplitPlan> {
    if records.is_empty() {
        return Err(Error::Data("cannot split an empty record set".into()));
    }
    let mut seen = std::collections::HashSet::with_capacity(records.len());
    if let Some(dup) = records.iter().find(|r| !seen.insert(r.path.as_path())) {
        return Err(Error::Data(format!("duplicate record path {}", dup.path.display())));
    }
    let (n_train, n_val, n_test, test_pos) = sizes.resolve(records.len())?;
    let (tp, tn) = balanced(n_train);
    let (vp, vn) = balanced(n_val);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (all_pos, all_neg) = class_totals(&(0..records.len()).collect::<Vec<_>>(), records);
    if tp + vp > all_pos || tn + vn > all_neg {
        return Err(infeasible("train + val", (tp + vp, tn + vn), (all_pos, all_neg)));
    }

    let mut excluded: Vec<usize> = Vec::new();
    let (train, val, test_pool) = match unit {
        SplitUnit::Patch => {
            let mut pool: Vec<usize> = (0..records.len()).collect();
            pool.shuffle(&mut rng);
            let (train, rest) = take_classes(&pool, records, tp, tn).ok_or_else(|| infeasible("train", (tp, tn), class_totals(&pool, records)))?;
            let (val, rest) = take_classes(&rest, records, vp, vn).ok_or_else(|| infeasible("val", (vp, vn), class_totals(&rest, records)))?;
            (train, val, rest)
        }
        SplitUnit::Patient => {
            let mut by_patient: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, r) in records.iter().enumerate() {
                by_patient.entry(r.patient_id.as_str()).or_default().push(i);
            }
            let mut patients: Vec<Vec<usize>> = by_patient.into_values().collect();
            patients.shuffle(&mut rng);
            for p in &mut patients {
                p.shuffle(&mut rng);
            }
            let mut queue = patients.into_iter();
            let mut fill = |pos: usize, neg: usize, what: &str| -> Result<(Vec<usize>, Vec<usize>)> {
                let mut pool = Vec::new();
                while {
                    let (p, n) = class_totals(&pool, records);
                    p < pos || n < neg
                } {
                    match queue.next() {
                        Some(patient) => pool.extend(patient),
                        None => return Err(infeasible(&format!("{what} (whole patients, after earlier splits)"), (pos, neg), class_totals(&pool, records))),
                    }
                }
                Ok(take_classes(&pool, records, pos, neg).expect("pool holds enough of each class"))
            };
            let (train, extra) = fill(tp, tn, "train")?;
            excluded.extend(extra);
            let (val, extra) = fill(vp, vn, "val")?;
            excluded.extend(extra);
            let rest: Vec<usize> = queue.flatten().collect();
            (train, val, rest)
        }
    };

    let test = match (n_test, test_pos) {
        (None, _) => test_pool,
        (Some(t), None) => {
            if t > test_pool.len() {
                return Err(Error::Data(format!("infeasible split: test needs {t} records, but at most {} remain", test_pool.len())));
            }
            excluded.extend_from_slice(&test_pool[t..]);
            test_pool[..t].to_vec()
        }
        (Some(t), Some(k)) => {
            let (test, rest) = take_classes(&test_pool, records, k, t - k).ok_or_else(|| infeasible("test", (k, t - k), class_totals(&test_pool, records)))?;
            excluded.extend(rest);
            test
        }
    };

    let to_paths = |ids: &[usize]| -> Vec<PathBuf> {
        let mut paths: Vec<PathBuf> = ids.iter().map(|&i| records[i].path.clone()).collect();
        paths.sort();
        paths
    };
    let mut plan = SplitPlan {
        seed,
        unit,
        train: to_paths(&train),
        val: to_paths(&val),
        test: to_paths(&test),
        excluded: to_paths(&excluded),
        counts: BTreeMap::new(),
    };
    let labels: BTreeMap<&Path, u8> = records.iter().map(|r| (r.path.as_path(), r.label)).collect();
    for (key, split) in [("train", Split::Train), ("val", Split::Val), ("test", Split::Test), ("excluded", Split::Excluded)] {
        let c = ClassCounts::of(plan.paths(split), &labels);
        plan.counts.insert(key.to_owned(), c);
    }
    Ok(plan)
}
