//! Stratified k-fold assignment with per-fold train/validation sub-splits.
//!
//! Records are grouped by their source label (four classes, also for the
//! binary task), shuffled per class with a seeded ChaCha stream and dealt
//! round-robin into folds. For every held-out fold the remaining records of
//! each class are shuffled again and a quarter of them go to validation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::manifest::DatasetManifest;
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::labels::ClassLabel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DevRole {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    /// record id -> fold index in `[0, k)`
    pub assignment: BTreeMap<String, usize>,
    /// held-out fold -> (record id -> role), covering every record outside
    /// that fold
    pub dev_split: BTreeMap<usize, BTreeMap<String, DevRole>>,
}

const VAL_DENOMINATOR: usize = 4;

pub fn make_stratified_folds(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::invalid(format!("k must be at least 2, got {k}")));
    }
    let mut by_class: BTreeMap<ClassLabel, Vec<&str>> = BTreeMap::new();
    for r in &manifest.records {
        by_class.entry(r.label).or_default().push(r.id.as_str());
    }
    for (label, ids) in &by_class {
        if ids.len() < k {
            return Err(Error::invalid(format!(
                "class {label} has {} records, fewer than k = {k}",
                ids.len()
            )));
        }
    }

    let mut assignment = BTreeMap::new();
    let mut dealt = 0usize;
    for (label, ids) in by_class.iter_mut() {
        ids.sort_unstable();
        ids.shuffle(&mut stream(seed, &[label.code() as u64]));
        for (i, id) in ids.iter().enumerate() {
            assignment.insert(id.to_string(), (dealt + i) % k);
        }
        dealt += ids.len();
    }

    let mut dev_split = BTreeMap::new();
    for fold in 0..k {
        let mut dev_by_class: Vec<(ClassLabel, Vec<&str>)> = by_class
            .iter()
            .map(|(&label, ids)| {
                let mut dev: Vec<&str> = ids.iter().copied().filter(|id| assignment[*id] != fold).collect();
                dev.sort_unstable();
                dev.shuffle(&mut stream(seed, &[1 + fold as u64, label.code() as u64]));
                (label, dev)
            })
            .collect();

        // Per-class quota floor(n/4), topped up by one for some classes so the
        // overall validation share rounds to exactly a quarter.
        let dev_total: usize = dev_by_class.iter().map(|(_, d)| d.len()).sum();
        let target = (dev_total + VAL_DENOMINATOR / 2) / VAL_DENOMINATOR;
        let mut quota: Vec<usize> = dev_by_class.iter().map(|(_, d)| d.len() / VAL_DENOMINATOR).collect();
        let mut extra = target.saturating_sub(quota.iter().sum());
        let n = dev_by_class.len();
        for step in 0..n {
            if extra == 0 {
                break;
            }
            let c = (fold + step) % n;
            if dev_by_class[c].1.len() % VAL_DENOMINATOR != 0 {
                quota[c] += 1;
                extra -= 1;
            }
        }

        let mut roles = BTreeMap::new();
        for ((_, dev), q) in dev_by_class.iter_mut().zip(quota) {
            for (i, id) in dev.iter().enumerate() {
                let role = if i < q { DevRole::Val } else { DevRole::Train };
                roles.insert(id.to_string(), role);
            }
        }
        dev_split.insert(fold, roles);
    }

    Ok(FoldPlan {
        k,
        seed,
        assignment,
        dev_split,
    })
}

impl FoldPlan {
    fn ids_where(&self, pred: impl Fn(&str) -> bool) -> Vec<String> {
        self.assignment.keys().filter(|id| pred(id)).cloned().collect()
    }

    /// Held-out (test) records of `fold`, sorted by id.
    pub fn test_ids(&self, fold: usize) -> Vec<String> {
        self.ids_where(|id| self.assignment[id] == fold)
    }

    pub fn train_ids(&self, fold: usize) -> Vec<String> {
        self.role_ids(fold, DevRole::Train)
    }

    pub fn val_ids(&self, fold: usize) -> Vec<String> {
        self.role_ids(fold, DevRole::Val)
    }

    fn role_ids(&self, fold: usize, role: DevRole) -> Vec<String> {
        self.dev_split
            .get(&fold)
            .map(|m| m.iter().filter(|(_, r)| **r == role).map(|(id, _)| id.clone()).collect())
            .unwrap_or_default()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignment.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// Whether this plan was built over exactly the ids of `manifest`.
    pub fn covers(&self, manifest: &DatasetManifest) -> bool {
        manifest.len() == self.assignment.len()
            && manifest.records.iter().all(|r| self.assignment.contains_key(&r.id))
    }

    pub fn to_json(&self) -> String {
        let file = FoldPlanFile {
            k: self.k,
            seed: self.seed,
            records: self
                .assignment
                .iter()
                .map(|(id, &fold)| FoldRecord {
                    id: id.clone(),
                    fold,
                    dev_role: (0..self.k)
                        .map(|f| self.dev_split.get(&f).and_then(|m| m.get(id)).copied())
                        .collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("fold plan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: FoldPlanFile = serde_json::from_str(text)?;
        let mut assignment = BTreeMap::new();
        let mut dev_split: BTreeMap<usize, BTreeMap<String, DevRole>> = (0..file.k).map(|f| (f, BTreeMap::new())).collect();
        for r in file.records {
            if r.fold >= file.k || r.dev_role.len() != file.k {
                return Err(Error::invalid(format!("record {} has an inconsistent fold entry", r.id)));
            }
            for (f, role) in r.dev_role.iter().enumerate() {
                match (f == r.fold, role) {
                    (true, None) => {}
                    (false, Some(role)) => {
                        dev_split.get_mut(&f).expect("fold present").insert(r.id.clone(), *role);
                    }
                    _ => return Err(Error::invalid(format!("record {} has an inconsistent dev role", r.id))),
                }
            }
            if assignment.insert(r.id.clone(), r.fold).is_some() {
                return Err(Error::DuplicateId(r.id));
            }
        }
        Ok(Self {
            k: file.k,
            seed: file.seed,
            assignment,
            dev_split,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Serialize, Deserialize)]
struct FoldPlanFile {
    k: usize,
    seed: u64,
    records: Vec<FoldRecord>,
}

#[derive(Serialize, Deserialize)]
struct FoldRecord {
    id: String,
    fold: usize,
    dev_role: Vec<Option<DevRole>>,
}
