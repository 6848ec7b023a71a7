//! Dataset manifest handling and random k-fold split assignment.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One case: image path, optional label path, and its fold assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<PathBuf>,
    pub fold: u8,
}

/// The datalist file: input filenames with associated fold numbers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(rename = "training")]
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.image) {
                return Err(Error::Config(format!(
                    "duplicate image path {:?} in manifest",
                    e.image
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let manifest: Self = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Number of cases per fold, indexed by fold id.
    pub fn fold_sizes(&self) -> Vec<usize> {
        let max_fold = self.entries.iter().map(|e| e.fold).max().unwrap_or(0);
        let mut sizes = vec![0usize; max_fold as usize + 1];
        for e in &self.entries {
            sizes[e.fold as usize] += 1;
        }
        sizes
    }
}

/// Image path plus optional label path, before fold assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CasePaths {
    pub image: PathBuf,
    pub label: Option<PathBuf>,
}

/// Randomly assign `k` folds: a seeded shuffle followed by round-robin
/// assignment, so fold sizes differ by at most one and the result is
/// deterministic per seed.
pub fn split_folds(cases: &[CasePaths], k: usize, seed: u64) -> Result<DatasetManifest> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "fold count {k} must be >= 2"
        )));
    }
    if cases.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{} cases cannot fill {k} folds",
            cases.len()
        )));
    }
    if k > u8::MAX as usize + 1 {
        return Err(Error::InvalidArgument(format!("fold count {k} too large")));
    }
    let mut order: Vec<usize> = (0..cases.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut entries: Vec<ManifestEntry> = cases
        .iter()
        .map(|c| ManifestEntry {
            image: c.image.clone(),
            label: c.label.clone(),
            fold: 0,
        })
        .collect();
    for (position, &case_idx) in order.iter().enumerate() {
        entries[case_idx].fold = (position % k) as u8;
    }
    let manifest = DatasetManifest { entries };
    manifest.validate()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cases(n: usize) -> Vec<CasePaths> {
        (0..n)
            .map(|i| CasePaths {
                image: PathBuf::from(format!("case_{i:05}.nii.gz")),
                label: Some(PathBuf::from(format!("case_{i:05}_seg.nii.gz"))),
            })
            .collect()
    }

    #[test]
    fn ten_cases_split_evenly_into_five_folds() {
        let manifest = split_folds(&cases(10), 5, 123).unwrap();
        assert_eq!(manifest.fold_sizes(), vec![2, 2, 2, 2, 2]);
    }

    #[test]
    fn fold_sizes_differ_by_at_most_one() {
        // 489 cases over 5 folds -> multiset {98, 98, 98, 98, 97}.
        let manifest = split_folds(&cases(489), 5, 7).unwrap();
        let mut sizes = manifest.fold_sizes();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![97, 98, 98, 98, 98]);
    }

    #[test]
    fn same_seed_reproduces_the_manifest() {
        let a = split_folds(&cases(33), 5, 99).unwrap();
        let b = split_folds(&cases(33), 5, 99).unwrap();
        assert_eq!(a, b);
        let c = split_folds(&cases(33), 5, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn too_few_cases_is_an_error() {
        assert!(split_folds(&cases(3), 5, 0).is_err());
        assert!(split_folds(&cases(10), 1, 0).is_err());
    }

    #[test]
    fn manifest_roundtrips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = split_folds(&cases(12), 4, 5).unwrap();
        let path = dir.path().join("dataset.json");
        manifest.save(&path).unwrap();
        let back = DatasetManifest::load(&path).unwrap();
        assert_eq!(back, manifest);
    }

    #[test]
    fn duplicate_paths_are_rejected() {
        let mut list = cases(6);
        list[5] = list[0].clone();
        assert!(split_folds(&list, 2, 0).is_err());
    }
}
