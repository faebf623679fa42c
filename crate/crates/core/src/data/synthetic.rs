use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{SessionData, SessionDataset, SessionStream, Split};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Gaussian clusters with a shared isotropic spread.
///
/// Centers are drawn from a standard normal and rescaled so that the closest
/// pair sits exactly `separation · sigma` apart (`separation` alone when
/// `sigma` is zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticBenchmarkSpec {
    pub input_dim: usize,
    pub base_classes: usize,
    /// Classes available for novel sessions; at least `sessions · way`.
    pub novel_classes: usize,
    pub sessions: usize,
    pub way: usize,
    pub shot: usize,
    pub base_train_per_class: usize,
    pub test_per_class: usize,
    pub sigma: f64,
    pub separation: f64,
    pub seed: u64,
}

impl Default for SyntheticBenchmarkSpec {
    fn default() -> Self {
        Self {
            input_dim: 32,
            base_classes: 20,
            novel_classes: 20,
            sessions: 4,
            way: 5,
            shot: 5,
            base_train_per_class: 100,
            test_per_class: 50,
            sigma: 1.0,
            separation: 6.0,
            seed: 7,
        }
    }
}

impl SyntheticBenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.base_classes < 2 {
            return Err(Error::config("synthetic benchmark needs input_dim >= 1 and at least 2 base classes"));
        }
        if self.sessions * self.way > self.novel_classes {
            return Err(Error::config(format!(
                "{} sessions of {}-way need {} novel classes, only {} available",
                self.sessions,
                self.way,
                self.sessions * self.way,
                self.novel_classes
            )));
        }
        if self.sessions > 0 && (self.way == 0 || self.shot == 0) {
            return Err(Error::config("way and shot must be positive"));
        }
        if self.base_train_per_class == 0 {
            return Err(Error::config("base classes need at least one training row"));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::config(format!("sigma must be finite and >= 0, got {}", self.sigma)));
        }
        if !(self.separation >= 1.0) || !self.separation.is_finite() {
            return Err(Error::config(format!(
                "separability ratio must be at least 1, got {}",
                self.separation
            )));
        }
        if self.separation < 4.0 {
            warn!("separability ratio {} is below 4; clusters will overlap noticeably", self.separation);
        }
        Ok(())
    }

    pub fn total_classes(&self) -> usize {
        self.base_classes + self.novel_classes
    }
}

fn sample_centers(spec: &SyntheticBenchmarkSpec, rng: &mut impl Rng) -> Matrix {
    let k = spec.total_classes();
    let raw = Matrix::from_fn(k, spec.input_dim, |_, _| rng.sample(StandardNormal));
    let mut closest = f64::INFINITY;
    for i in 0..k {
        for j in (i + 1)..k {
            let d: f64 = raw
                .row(i)
                .iter()
                .zip(raw.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            closest = closest.min(d);
        }
    }
    let target = if spec.sigma > 0.0 { spec.separation * spec.sigma } else { spec.separation };
    if closest.is_finite() && closest > 0.0 {
        raw.scale(target / closest)
    } else {
        raw
    }
}

fn sample_rows(
    center: &[f64],
    count: usize,
    label: u32,
    sigma: f64,
    rng: &mut impl Rng,
    features: &mut Vec<f64>,
    labels: &mut Vec<u32>,
) {
    for _ in 0..count {
        for &c in center {
            let noise: f64 = rng.sample(StandardNormal);
            features.push(c + sigma * noise);
        }
        labels.push(label);
    }
}

fn split(dim: usize, features: Vec<f64>, labels: Vec<u32>, split: Split) -> Result<SessionDataset> {
    SessionDataset::new(Matrix::new(labels.len(), dim, features)?, labels, split)
}

/// Base classes get labels `0..base_classes`, novel classes follow in
/// session order.
pub fn generate_synthetic(spec: &SyntheticBenchmarkSpec) -> Result<SessionStream> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers = sample_centers(spec, &mut rng);
    let dim = spec.input_dim;

    let make_session = |classes: std::ops::Range<usize>, train_count: usize, rng: &mut ChaCha8Rng| {
        let (mut tr_f, mut tr_l, mut te_f, mut te_l) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for c in classes {
            let center = centers.row(c);
            sample_rows(center, train_count, c as u32, spec.sigma, rng, &mut tr_f, &mut tr_l);
            sample_rows(center, spec.test_per_class, c as u32, spec.sigma, rng, &mut te_f, &mut te_l);
        }
        Ok::<_, Error>(SessionData {
            train: split(dim, tr_f, tr_l, Split::Train)?,
            test: split(dim, te_f, te_l, Split::Test)?,
        })
    };

    let base = make_session(0..spec.base_classes, spec.base_train_per_class, &mut rng)?;
    let mut novel = Vec::with_capacity(spec.sessions);
    for t in 0..spec.sessions {
        let start = spec.base_classes + t * spec.way;
        novel.push(make_session(start..start + spec.way, spec.shot, &mut rng)?);
    }
    let stream = SessionStream {
        base,
        novel,
        way: spec.way,
        shot: spec.shot,
    };
    stream.validate()?;
    Ok(stream)
}

/// Accuracy of classifying `test` by Euclidean distance to the class means
/// of `train`, on raw features.
pub fn nearest_class_mean_accuracy(train: &SessionDataset, test: &SessionDataset) -> f64 {
    let counts = train.class_counts();
    let classes: Vec<u32> = counts.keys().copied().collect();
    let dim = train.dim();
    let mut means = vec![vec![0.0; dim]; classes.len()];
    for (i, &l) in train.labels.iter().enumerate() {
        let k = classes.binary_search(&l).expect("label present");
        for (m, v) in means[k].iter_mut().zip(train.features.row(i)) {
            *m += v / counts[&l] as f64;
        }
    }
    if test.is_empty() {
        return 0.0;
    }
    let mut correct = 0usize;
    for (i, &l) in test.labels.iter().enumerate() {
        let row = test.features.row(i);
        let mut best = (f64::INFINITY, u32::MAX);
        for (k, mean) in means.iter().enumerate() {
            let d: f64 = row.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, classes[k]);
            }
        }
        if best.1 == l {
            correct += 1;
        }
    }
    correct as f64 / test.len() as f64
}
