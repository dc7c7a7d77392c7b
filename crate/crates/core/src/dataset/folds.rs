use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Label;
use crate::{Error, Result};

/// Stratified k-fold assignment. Serialized as the fold-plan file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    /// Training fraction of each split, `(k - 1) / k`.
    pub ratio: f64,
    /// Image id -> index of the fold in which it is a test sample.
    pub assignments: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn test_ids(&self, fold: usize) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn train_ids(&self, fold: usize) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f != fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::invalid("k", "fold count must be at least 2"));
        }
        if let Some((id, f)) = self.assignments.iter().find(|(_, &f)| f >= self.k) {
            return Err(Error::invalid("assignments", format!("`{id}` assigned to fold {f} >= k")));
        }
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let plan: FoldPlan = serde_json::from_slice(&std::fs::read(path)?)?;
        plan.validate()?;
        Ok(plan)
    }
}

/// Plans `k` stratified folds.
///
/// Within each class the ids are sorted, shuffled with a class-specific
/// stream derived from `seed`, and dealt round-robin, so per-class test
/// counts differ by at most one between folds. The dealing offset carries
/// over between classes to keep total fold sizes level as well.
pub fn make_folds(catalog: &[(String, Label)], k: usize, ratio: f64, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::invalid("k", format!("{k} < 2")));
    }
    let expected = (k - 1) as f64 / k as f64;
    if (ratio - expected).abs() > 1e-6 {
        return Err(Error::invalid(
            "ratio",
            format!("{ratio} is inconsistent with k = {k} (expected {expected})"),
        ));
    }
    let mut by_class: BTreeMap<Label, Vec<&str>> = BTreeMap::new();
    let mut seen = HashSet::new();
    for (id, label) in catalog {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateId(id.clone()));
        }
        by_class.entry(*label).or_default().push(id);
    }
    let mut assignments = BTreeMap::new();
    let mut offset = 0;
    for (class, mut ids) in by_class {
        if ids.len() < k {
            return Err(Error::ClassTooSmall {
                class: class.as_str().into(),
                count: ids.len(),
                k,
            });
        }
        ids.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(class.index() as u64 + 1)));
        ids.shuffle(&mut rng);
        for (i, id) in ids.iter().enumerate() {
            assignments.insert(id.to_string(), (offset + i) % k);
        }
        offset = (offset + ids.len()) % k;
    }
    Ok(FoldPlan {
        k,
        seed,
        ratio,
        assignments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn catalog(covid: usize, control: usize) -> Vec<(String, Label)> {
        (0..covid)
            .map(|i| (format!("c{i:05}"), Label::Covid))
            .chain((0..control).map(|i| (format!("n{i:05}"), Label::Control)))
            .collect()
    }

    fn per_class_counts(plan: &FoldPlan, cat: &[(String, Label)], label: Label) -> Vec<usize> {
        let mut counts = vec![0; plan.k];
        for (id, l) in cat {
            if *l == label {
                counts[plan.assignments[id]] += 1;
            }
        }
        counts
    }

    #[test]
    fn group_one_sized_catalog() {
        let cat = catalog(2951, 12544);
        let plan = make_folds(&cat, 5, 0.8, 42).unwrap();
        let covid = per_class_counts(&plan, &cat, Label::Covid);
        let control = per_class_counts(&plan, &cat, Label::Control);
        assert!(covid.iter().all(|&c| c == 590 || c == 591), "{covid:?}");
        assert!(control.iter().all(|&c| c == 2508 || c == 2509), "{control:?}");
        assert_eq!(covid.iter().sum::<usize>(), 2951);
        assert_eq!(control.iter().sum::<usize>(), 12544);
    }

    #[test]
    fn exact_division() {
        let cat: Vec<_> = (0..10).map(|i| (format!("x{i}"), Label::Covid)).collect();
        let plan = make_folds(&cat, 5, 0.8, 1).unwrap();
        assert!((0..5).all(|f| plan.test_ids(f).len() == 2));
    }

    #[test]
    fn deterministic_for_equal_seeds() {
        let cat = catalog(30, 70);
        assert_eq!(make_folds(&cat, 5, 0.8, 9).unwrap(), make_folds(&cat, 5, 0.8, 9).unwrap());
        assert_ne!(
            make_folds(&cat, 5, 0.8, 9).unwrap().assignments,
            make_folds(&cat, 5, 0.8, 10).unwrap().assignments
        );
    }

    #[test]
    fn rejects_small_classes_and_bad_ratio() {
        assert!(matches!(
            make_folds(&catalog(3, 20), 5, 0.8, 0),
            Err(Error::ClassTooSmall { count: 3, k: 5, .. })
        ));
        assert!(make_folds(&catalog(10, 10), 5, 0.7, 0).is_err());
        assert!(make_folds(&catalog(10, 10), 1, 0.0, 0).is_err());
    }

    proptest! {
        #[test]
        fn partition_and_stratification(covid in 5usize..60, control in 5usize..120, k in 2usize..6, seed in any::<u64>()) {
            let cat = catalog(covid, control);
            let plan = make_folds(&cat, k, (k - 1) as f64 / k as f64, seed).unwrap();
            // partition: every id in exactly one test fold
            let total: usize = (0..k).map(|f| plan.test_ids(f).len()).sum();
            prop_assert_eq!(total, cat.len());
            prop_assert_eq!(plan.assignments.len(), cat.len());
            for label in [Label::Covid, Label::Control] {
                let c = per_class_counts(&plan, &cat, label);
                let (lo, hi) = (c.iter().min().unwrap(), c.iter().max().unwrap());
                prop_assert!(hi - lo <= 1);
            }
        }
    }
}
