//! Pseudo classes built by inter-class mixup in feature space.
//!
//! The class pairs are drawn once per run; instance pairs and mixing
//! coefficients are redrawn for every batch.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const DEFAULT_GAMMA_RANGE: (f64, f64) = (0.4, 0.6);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPair {
    pub first: u32,
    pub second: u32,
    pub pseudo_label: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoClassPlan {
    pub pairs: Vec<ClassPair>,
    pub gamma_range: (f64, f64),
    pub per_class: usize,
}

/// Where one synthetic row came from: batch row indices and the weight on
/// `first`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixSource {
    pub first: usize,
    pub second: usize,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBatch {
    pub features: Matrix,
    pub labels: Vec<u32>,
    pub sources: Vec<MixSource>,
}

impl SyntheticBatch {
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Sample `count` unordered pairs of distinct base classes, without
/// replacement while distinct pairs remain. Pseudo labels are assigned
/// consecutively from `first_label`, which must exceed every base class.
pub fn make_plan(
    base_classes: &[u32],
    count: usize,
    first_label: u32,
    rng: &mut impl Rng,
) -> Result<PseudoClassPlan> {
    let mut classes = base_classes.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::config(format!(
            "pseudo classes need at least 2 base classes, got {}",
            classes.len()
        )));
    }
    if count == 0 {
        return Err(Error::config("number of pseudo classes must be at least 1"));
    }
    if classes.last().is_some_and(|&max| first_label <= max) {
        return Err(Error::config(format!(
            "pseudo labels starting at {first_label} would collide with base classes"
        )));
    }
    if (first_label as u64) + (count as u64) > u32::MAX as u64 {
        return Err(Error::config("pseudo label range overflows"));
    }

    let mut all = Vec::with_capacity(classes.len() * (classes.len() - 1) / 2);
    for (i, &a) in classes.iter().enumerate() {
        for &b in &classes[i + 1..] {
            all.push((a, b));
        }
    }
    all.shuffle(rng);
    let mut chosen: Vec<(u32, u32)> = all.iter().copied().take(count).collect();
    while chosen.len() < count {
        chosen.push(all[rng.random_range(0..all.len())]);
    }

    Ok(PseudoClassPlan {
        pairs: chosen
            .into_iter()
            .enumerate()
            .map(|(i, (first, second))| ClassPair {
                first,
                second,
                pseudo_label: first_label + i as u32,
            })
            .collect(),
        gamma_range: DEFAULT_GAMMA_RANGE,
        per_class: 1,
    })
}

impl PseudoClassPlan {
    pub fn with_gamma_range(mut self, lo: f64, hi: f64) -> Result<Self> {
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(Error::config(format!("mixing range must satisfy 0 < lo <= hi < 1, got [{lo}, {hi}]")));
        }
        self.gamma_range = (lo, hi);
        Ok(self)
    }

    pub fn with_per_class(mut self, per_class: usize) -> Result<Self> {
        if per_class == 0 {
            return Err(Error::config("instances per pseudo class must be at least 1"));
        }
        self.per_class = per_class;
        Ok(self)
    }

    pub fn labels(&self) -> Vec<u32> {
        self.pairs.iter().map(|p| p.pseudo_label).collect()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn contains_label(&self, label: u32) -> bool {
        self.pairs.iter().any(|p| p.pseudo_label == label)
    }
}

/// Default synthetic rows per pseudo class in a batch.
pub fn default_per_class(batch_size: usize, pseudo_classes: usize) -> usize {
    (batch_size / pseudo_classes.max(1)).max(1)
}

/// Mix rows of the two classes of every planned pair present in the batch.
/// Pairs with a class missing from the batch are skipped.
pub fn mixup_batch(
    plan: &PseudoClassPlan,
    features: &Matrix,
    labels: &[u32],
    rng: &mut impl Rng,
) -> Result<SyntheticBatch> {
    if features.rows() == 0 {
        return Err(Error::config("cannot mix up an empty feature batch"));
    }
    if labels.len() != features.rows() {
        return Err(Error::shape(
            "mixup_batch",
            format!("{} labels for {} rows", labels.len(), features.rows()),
        ));
    }
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }

    let (lo, hi) = plan.gamma_range;
    let d = features.cols();
    let mut data = Vec::new();
    let mut out_labels = Vec::new();
    let mut sources = Vec::new();
    for pair in &plan.pairs {
        let (Some(rows_a), Some(rows_b)) = (by_class.get(&pair.first), by_class.get(&pair.second)) else {
            continue;
        };
        for _ in 0..plan.per_class {
            let a = rows_a[rng.random_range(0..rows_a.len())];
            let b = rows_b[rng.random_range(0..rows_b.len())];
            let gamma = if lo == hi { lo } else { rng.random_range(lo..=hi) };
            let (fa, fb) = (features.row(a), features.row(b));
            data.extend(fa.iter().zip(fb).map(|(x, y)| gamma * x + (1.0 - gamma) * y));
            out_labels.push(pair.pseudo_label);
            sources.push(MixSource {
                first: a,
                second: b,
                gamma,
            });
        }
    }
    Ok(SyntheticBatch {
        features: Matrix::new(out_labels.len(), d, data)?,
        labels: out_labels,
        sources,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    #[test]
    fn only_pair_of_two_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = make_plan(&[0, 1], 1, 2, &mut rng).unwrap();
        assert_eq!(plan.pairs, vec![ClassPair { first: 0, second: 1, pseudo_label: 2 }]);
    }

    #[test]
    fn sixty_classes_forty_pseudo() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base: Vec<u32> = (0..60).collect();
        let plan = make_plan(&base, 40, 60, &mut rng).unwrap();
        assert_eq!(plan.len(), 40);
        let distinct: HashSet<(u32, u32)> = plan.pairs.iter().map(|p| (p.first, p.second)).collect();
        assert_eq!(distinct.len(), 40);
        assert!(plan.pairs.iter().all(|p| p.pseudo_label >= 60 && p.first != p.second));
        let labels: HashSet<u32> = plan.labels().into_iter().collect();
        assert_eq!(labels.len(), 40);
    }

    #[test]
    fn plan_is_seeded() {
        let base: Vec<u32> = (0..10).collect();
        let a = make_plan(&base, 7, 10, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = make_plan(&base, 7, 10, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn more_pseudo_than_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let plan = make_plan(&[0, 1, 2], 5, 3, &mut rng).unwrap();
        assert_eq!(plan.len(), 5);
        let distinct: HashSet<(u32, u32)> = plan.pairs.iter().map(|p| (p.first, p.second)).collect();
        assert_eq!(distinct.len(), 3);
    }

    #[test]
    fn plan_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(make_plan(&[4], 1, 5, &mut rng), Err(Error::Config(_))));
        assert!(matches!(make_plan(&[0, 1], 0, 5, &mut rng), Err(Error::Config(_))));
        assert!(matches!(make_plan(&[0, 9], 1, 5, &mut rng), Err(Error::Config(_))));
        let plan = make_plan(&[0, 1], 1, 2, &mut rng).unwrap();
        assert!(plan.clone().with_gamma_range(0.6, 0.4).is_err());
        assert!(plan.with_gamma_range(0.0, 0.5).is_err());
    }

    #[test]
    fn midpoints_with_fixed_gamma() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let plan = make_plan(&[0, 1], 1, 2, &mut rng)
            .unwrap()
            .with_gamma_range(0.5, 0.5)
            .unwrap()
            .with_per_class(6)
            .unwrap();
        let f = Matrix::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.0], vec![5.0, 5.0], vec![0.0, -1.0]]).unwrap();
        let labels = [0, 1, 0, 1];
        let batch = mixup_batch(&plan, &f, &labels, &mut rng).unwrap();
        assert_eq!(batch.labels, vec![2; 6]);
        for (i, s) in batch.sources.iter().enumerate() {
            assert_eq!(labels[s.first], 0);
            assert_eq!(labels[s.second], 1);
            for k in 0..2 {
                assert_eq!(batch.features.get(i, k), 0.5 * (f.get(s.first, k) + f.get(s.second, k)));
            }
        }
    }

    #[test]
    fn identical_sources_give_same_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let plan = make_plan(&[0, 1], 1, 2, &mut rng).unwrap().with_per_class(10).unwrap();
        let v = vec![0.25, -1.5, 3.0];
        let f = Matrix::from_rows(&[v.clone(), v.clone()]).unwrap();
        let batch = mixup_batch(&plan, &f, &[0, 1], &mut rng).unwrap();
        for i in 0..batch.features.rows() {
            for (a, b) in batch.features.row(i).iter().zip(&v) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn missing_classes_skipped_and_empty_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let plan = make_plan(&[0, 1, 2, 3], 6, 10, &mut rng).unwrap();
        let f = Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let batch = mixup_batch(&plan, &f, &[0, 1], &mut rng).unwrap();
        assert!(batch.labels.iter().all(|&l| {
            let p = plan.pairs.iter().find(|p| p.pseudo_label == l).unwrap();
            (p.first, p.second) == (0, 1)
        }));
        assert!(matches!(mixup_batch(&plan, &Matrix::zeros(0, 1), &[], &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn recovered_gamma_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let base: Vec<u32> = (0..5).collect();
        let plan = make_plan(&base, 6, 5, &mut rng).unwrap().with_per_class(4).unwrap();
        let f = Matrix::from_fn(30, 6, |_, _| rng.random_range(-2.0..2.0));
        let labels: Vec<u32> = (0..30).map(|i| (i % 5) as u32).collect();
        let batch = mixup_batch(&plan, &f, &labels, &mut rng).unwrap();
        assert!(!batch.is_empty());
        for (i, s) in batch.sources.iter().enumerate() {
            // least-squares gamma on the segment f2 + γ(f1 − f2)
            let (f1, f2, mix) = (f.row(s.first), f.row(s.second), batch.features.row(i));
            let mut num = 0.0;
            let mut den = 0.0;
            for k in 0..6 {
                num += (mix[k] - f2[k]) * (f1[k] - f2[k]);
                den += (f1[k] - f2[k]).powi(2);
            }
            let gamma = num / den;
            assert!((0.4..=0.6).contains(&gamma), "gamma {gamma}");
            for k in 0..6 {
                assert!((f2[k] + gamma * (f1[k] - f2[k]) - mix[k]).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn convex_and_reproducible(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base: Vec<u32> = (0..4).collect();
            let plan = make_plan(&base, 4, 4, &mut rng).unwrap().with_per_class(3).unwrap();
            let f = Matrix::from_fn(12, 3, |_, _| rng.random_range(-1.0..1.0));
            let labels: Vec<u32> = (0..12).map(|i| (i % 4) as u32).collect();
            let a = mixup_batch(&plan, &f, &labels, &mut ChaCha8Rng::seed_from_u64(seed ^ 1)).unwrap();
            let b = mixup_batch(&plan, &f, &labels, &mut ChaCha8Rng::seed_from_u64(seed ^ 1)).unwrap();
            prop_assert_eq!(&a, &b);
            for (i, s) in a.sources.iter().enumerate() {
                prop_assert!(labels[s.first] != labels[s.second]);
                prop_assert!((0.4..=0.6).contains(&s.gamma));
                for k in 0..3 {
                    let (x, y) = (f.get(s.first, k), f.get(s.second, k));
                    let v = a.features.get(i, k);
                    prop_assert!(v >= x.min(y) - 1e-15 && v <= x.max(y) + 1e-15);
                }
                prop_assert!(!labels.contains(&a.labels[i]));
            }
        }
    }
}
