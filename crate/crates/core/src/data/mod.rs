//! Session datasets, stream validation, file formats and the synthetic
//! Gaussian-cluster benchmark.

mod io;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub use io::{
    load_stream, read_features, read_manifest, save_stream, write_features, FeatureFormat, Manifest, ManifestSession,
    BINARY_MAGIC, MANIFEST_FORMAT, MANIFEST_NAME,
};
pub use synthetic::{generate_synthetic, nearest_class_mean_accuracy, SyntheticBenchmarkSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionDataset {
    pub features: Matrix,
    pub labels: Vec<u32>,
    pub split: Split,
}

impl SessionDataset {
    pub fn new(features: Matrix, labels: Vec<u32>, split: Split) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::shape(
                "SessionDataset",
                format!("{} feature rows but {} labels", features.rows(), labels.len()),
            ));
        }
        Ok(Self { features, labels, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn classes(&self) -> BTreeSet<u32> {
        self.labels.iter().copied().collect()
    }

    pub fn class_counts(&self) -> BTreeMap<u32, usize> {
        let mut counts = BTreeMap::new();
        for &l in &self.labels {
            *counts.entry(l).or_insert(0) += 1;
        }
        counts
    }

    pub fn select(&self, rows: &[usize]) -> SessionDataset {
        SessionDataset {
            features: self.features.select_rows(rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
        }
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &SessionDataset) -> Result<SessionDataset> {
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        SessionDataset::new(self.features.vstack(&other.features)?, labels, self.split)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionData {
    pub train: SessionDataset,
    pub test: SessionDataset,
}

/// Base session followed by C-way K-shot novel sessions.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionStream {
    pub base: SessionData,
    pub novel: Vec<SessionData>,
    pub way: usize,
    pub shot: usize,
}

impl SessionStream {
    pub fn sessions(&self) -> impl Iterator<Item = &SessionData> {
        std::iter::once(&self.base).chain(&self.novel)
    }

    pub fn session(&self, t: usize) -> Option<&SessionData> {
        if t == 0 {
            Some(&self.base)
        } else {
            self.novel.get(t - 1)
        }
    }

    pub fn num_sessions(&self) -> usize {
        1 + self.novel.len()
    }

    pub fn input_dim(&self) -> usize {
        self.base.train.dim()
    }

    pub fn base_classes(&self) -> Vec<u32> {
        self.base.train.classes().into_iter().collect()
    }

    pub fn max_label(&self) -> u32 {
        self.sessions()
            .flat_map(|s| s.train.labels.iter().chain(&s.test.labels))
            .copied()
            .max()
            .unwrap_or(0)
    }

    pub fn novel_class_count(&self) -> usize {
        self.novel.iter().map(|s| s.train.classes().len()).sum()
    }

    /// Test rows of every session up to and including `t`.
    pub fn cumulative_test(&self, t: usize) -> Result<SessionDataset> {
        if t >= self.num_sessions() {
            return Err(Error::config(format!("session {t} does not exist")));
        }
        let mut acc = self.base.test.clone();
        for s in &self.novel[..t] {
            acc = acc.concat(&s.test)?;
        }
        Ok(acc)
    }

    /// Check dimensions, label disjointness across sessions and the shot
    /// structure of every novel session.
    pub fn validate(&self) -> Result<()> {
        let dim = self.input_dim();
        let mut seen: BTreeMap<u32, usize> = BTreeMap::new();
        for (t, s) in self.sessions().enumerate() {
            for (what, ds) in [("train", &s.train), ("test", &s.test)] {
                if ds.dim() != dim && !ds.is_empty() {
                    return Err(Error::Validation {
                        session: t,
                        message: format!("{what} features have {} columns, expected {dim}", ds.dim()),
                    });
                }
            }
            if s.train.is_empty() {
                return Err(Error::Validation {
                    session: t,
                    message: "training split is empty".into(),
                });
            }
            let train_classes = s.train.classes();
            for &c in &train_classes {
                if let Some(prev) = seen.insert(c, t) {
                    return Err(Error::Validation {
                        session: t,
                        message: format!("class {c} already appeared in session {prev}"),
                    });
                }
            }
            if let Some(c) = s.test.classes().difference(&train_classes).next() {
                return Err(Error::Validation {
                    session: t,
                    message: format!("test class {c} has no training data in this session"),
                });
            }
            if t == 0 {
                if train_classes.len() < 2 {
                    return Err(Error::Validation {
                        session: 0,
                        message: format!("base session needs at least 2 classes, has {}", train_classes.len()),
                    });
                }
                continue;
            }
            if train_classes.len() != self.way {
                return Err(Error::Validation {
                    session: t,
                    message: format!("expected {}-way, found {} classes", self.way, train_classes.len()),
                });
            }
            for (c, n) in s.train.class_counts() {
                if n != self.shot {
                    return Err(Error::Validation {
                        session: t,
                        message: format!("class {c} has {n} training shots, expected {}", self.shot),
                    });
                }
            }
        }
        Ok(())
    }
}
