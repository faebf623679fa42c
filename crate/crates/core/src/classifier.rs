//! Class prototypes in coefficient space and cosine-softmax classification.

use std::collections::{BTreeMap, HashSet};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, Matrix};

/// Norms at or below this are treated as zero.
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub tau: f64,
}

impl ClassifierConfig {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::config(format!("temperature must be positive, got {tau}")));
        }
        Ok(Self { tau })
    }
}

/// Prototypes introduced in one session, one row per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    session: usize,
    labels: Vec<u32>,
    vectors: Matrix,
    frozen: bool,
}

impl PrototypeSet {
    pub fn new(session: usize, labels: Vec<u32>, vectors: Matrix) -> Result<Self> {
        if labels.len() != vectors.rows() {
            return Err(Error::shape(
                "PrototypeSet",
                format!("{} labels for {} prototype rows", labels.len(), vectors.rows()),
            ));
        }
        let mut seen = HashSet::new();
        for &l in &labels {
            if !seen.insert(l) {
                return Err(Error::config(format!("duplicate prototype label {l} in session {session}")));
            }
        }
        for (i, &l) in labels.iter().enumerate() {
            if norm(vectors.row(i)) <= MIN_NORM {
                return Err(Error::Numerical(format!("prototype for class {l} has zero norm")));
            }
        }
        Ok(Self {
            session,
            labels,
            vectors,
            frozen: false,
        })
    }

    /// Prototypes drawn i.i.d. from N(0, 1/d), matching the dictionary init.
    pub fn random(session: usize, labels: Vec<u32>, m: usize, d: usize, rng: &mut impl Rng) -> Result<Self> {
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
        let vectors = Matrix::from_fn(labels.len(), m, |_, _| normal.sample(rng));
        Self::new(session, labels, vectors)
    }

    pub fn session(&self) -> usize {
        self.session
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn vectors_mut(&mut self) -> Result<&mut Matrix> {
        if self.frozen {
            return Err(Error::State(format!("prototypes of session {} are frozen", self.session)));
        }
        Ok(&mut self.vectors)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn index_of(&self, label: u32) -> Option<usize> {
        self.labels.iter().position(|&l| l == label)
    }

    pub fn vector(&self, label: u32) -> Option<&[f64]> {
        self.index_of(label).map(|i| self.vectors.row(i))
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine", format!("lengths {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na <= MIN_NORM || nb <= MIN_NORM {
        return Err(Error::Numerical(format!("cosine of near-zero vector (norms {na:e}, {nb:e})")));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Loss and gradients of [`prototype_nll`].
#[derive(Debug, Clone)]
pub struct NllGrad {
    pub loss: f64,
    pub z: Matrix,
    pub targets: Matrix,
    /// One block per denominator set, in the order given.
    pub denominator: Vec<Matrix>,
}

/// Mean negative log-likelihood of cosine-softmax classification:
///
/// `−(1/n) Σᵢ log[ exp(cos(zᵢ, p_{yᵢ})/τ) / Σ_{p ∈ denominator} exp(cos(zᵢ, p)/τ) ]`
///
/// The target prototype comes from `targets`; the normalizer runs over every
/// prototype in `denominator`.
pub fn prototype_nll(
    z: &Matrix,
    labels: &[u32],
    targets: &PrototypeSet,
    denominator: &[&PrototypeSet],
    cfg: &ClassifierConfig,
) -> Result<f64> {
    Ok(nll(z, labels, targets, denominator, cfg, false)?.loss)
}

pub fn prototype_nll_grad(
    z: &Matrix,
    labels: &[u32],
    targets: &PrototypeSet,
    denominator: &[&PrototypeSet],
    cfg: &ClassifierConfig,
) -> Result<NllGrad> {
    nll(z, labels, targets, denominator, cfg, true)
}

struct Unit {
    norm: f64,
}

fn unit(v: &[f64], what: impl FnOnce() -> String) -> Result<Unit> {
    let n = norm(v);
    if n <= MIN_NORM {
        return Err(Error::Numerical(format!("{} has zero norm", what())));
    }
    Ok(Unit { norm: n })
}

/// Adds `scale · ∂cos(a, b)/∂a` into `out`, given `cos(a, b)` and the norms.
fn add_cosine_grad(out: &mut [f64], a: &[f64], b: &[f64], na: f64, nb: f64, cos: f64, scale: f64) {
    let inv = 1.0 / (na * nb);
    let self_term = cos / (na * na);
    for ((o, &av), &bv) in out.iter_mut().zip(a).zip(b) {
        *o += scale * (bv * inv - self_term * av);
    }
}

fn nll(
    z: &Matrix,
    labels: &[u32],
    targets: &PrototypeSet,
    denominator: &[&PrototypeSet],
    cfg: &ClassifierConfig,
    with_grad: bool,
) -> Result<NllGrad> {
    let n = z.rows();
    if labels.len() != n {
        return Err(Error::shape("prototype_nll", format!("{} labels for {n} rows", labels.len())));
    }
    let m = z.cols();
    if targets.dim() != m || denominator.iter().any(|s| s.dim() != m) {
        return Err(Error::shape("prototype_nll", format!("coefficient dimension {m} does not match prototypes")));
    }
    let mut grad = NllGrad {
        loss: 0.0,
        z: Matrix::zeros(if with_grad { n } else { 0 }, m),
        targets: Matrix::zeros(if with_grad { targets.len() } else { 0 }, m),
        denominator: denominator
            .iter()
            .map(|s| Matrix::zeros(if with_grad { s.len() } else { 0 }, m))
            .collect(),
    };
    if n == 0 {
        return Ok(grad);
    }

    let target_norms = (0..targets.len())
        .map(|i| unit(targets.vectors.row(i), || format!("prototype {}", targets.labels[i])).map(|u| u.norm))
        .collect::<Result<Vec<_>>>()?;
    let denom_norms = denominator
        .iter()
        .map(|s| {
            (0..s.len())
                .map(|i| unit(s.vectors.row(i), || format!("prototype {}", s.labels[i])).map(|u| u.norm))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let count: usize = denominator.iter().map(|s| s.len()).sum();
    if count == 0 {
        return Err(Error::State("softmax denominator has no prototypes".into()));
    }

    let inv_tau = 1.0 / cfg.tau;
    let inv_n = 1.0 / n as f64;
    let mut cosines = vec![0.0; count];
    let mut total = 0.0;
    for i in 0..n {
        let zi = z.row(i);
        let nz = unit(zi, || format!("coefficient row {i}"))?.norm;
        let t = targets.index_of(labels[i]).ok_or(Error::UnknownLabel(labels[i]))?;
        let pt = targets.vectors.row(t);
        let cos_t = dot(zi, pt) / (nz * target_norms[t]);

        let mut k = 0;
        for (s, norms) in denominator.iter().zip(&denom_norms) {
            for (j, &np) in norms.iter().enumerate() {
                cosines[k] = dot(zi, s.vectors.row(j)) / (nz * np);
                k += 1;
            }
        }
        let max = cosines.iter().fold(f64::NEG_INFINITY, |a, &c| a.max(c * inv_tau));
        let sum: f64 = cosines.iter().map(|&c| (c * inv_tau - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - cos_t * inv_tau;

        if !with_grad {
            continue;
        }
        // d loss_i / d cos = (softmax - onehot) / τ, scaled by 1/n
        let scale_t = -inv_tau * inv_n;
        add_cosine_grad(grad.z.row_mut(i), zi, pt, nz, target_norms[t], cos_t, scale_t);
        add_cosine_grad(grad.targets.row_mut(t), pt, zi, target_norms[t], nz, cos_t, scale_t);
        let mut k = 0;
        for ((s, norms), g) in denominator.iter().zip(&denom_norms).zip(grad.denominator.iter_mut()) {
            for (j, &np) in norms.iter().enumerate() {
                let soft = (cosines[k] * inv_tau - max).exp() / sum;
                let scale = soft * inv_tau * inv_n;
                let p = s.vectors.row(j);
                add_cosine_grad(grad.z.row_mut(i), zi, p, nz, np, cosines[k], scale);
                add_cosine_grad(g.row_mut(j), p, zi, np, nz, cosines[k], scale);
                k += 1;
            }
        }
    }
    grad.loss = total * inv_n;
    Ok(grad)
}

/// Class-mean prototypes. Classes are emitted in ascending label order.
pub fn init_prototypes_from_means(z: &Matrix, labels: &[u32], session: usize) -> Result<PrototypeSet> {
    if labels.len() != z.rows() {
        return Err(Error::shape(
            "init_prototypes_from_means",
            format!("{} labels for {} rows", labels.len(), z.rows()),
        ));
    }
    if labels.is_empty() {
        return Err(Error::config("cannot initialize prototypes from an empty session"));
    }
    let mut sums: BTreeMap<u32, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        let entry = sums.entry(l).or_insert_with(|| (vec![0.0; z.cols()], 0));
        for (s, v) in entry.0.iter_mut().zip(z.row(i)) {
            *s += v;
        }
        entry.1 += 1;
    }
    let mut out_labels = Vec::with_capacity(sums.len());
    let mut rows = Vec::with_capacity(sums.len());
    for (label, (sum, count)) in sums {
        out_labels.push(label);
        rows.push(sum.into_iter().map(|s| s / count as f64).collect());
    }
    PrototypeSet::new(session, out_labels, Matrix::from_rows(&rows)?)
}

/// Label of the most cosine-similar prototype; ties go to the lowest label.
pub fn predict(z: &[f64], sets: &[&PrototypeSet]) -> Result<u32> {
    let nz = unit(z, || "query coefficient vector".into())?.norm;
    let mut best: Option<(f64, u32)> = None;
    for s in sets {
        if s.dim() != z.len() {
            return Err(Error::shape("predict", format!("query has {} entries, prototypes {}", z.len(), s.dim())));
        }
        for (j, &label) in s.labels.iter().enumerate() {
            let p = s.vectors.row(j);
            let np = unit(p, || format!("prototype {label}"))?.norm;
            let c = dot(z, p) / (nz * np);
            best = match best {
                Some((bc, bl)) if bc > c || (bc == c && bl < label) => Some((bc, bl)),
                _ => Some((c, label)),
            };
        }
    }
    best.map(|(_, l)| l)
        .ok_or_else(|| Error::State("no prototypes to predict from".into()))
}

/// [`predict`] for every row.
pub fn predict_rows(z: &Matrix, sets: &[&PrototypeSet]) -> Result<Vec<u32>> {
    (0..z.rows()).map(|i| predict(z.row(i), sets)).collect()
}
