//! Training objectives with their gradients.
//!
//! Both functions are pure in the parameters so they can be checked against
//! finite differences directly.

use crate::backbone::FeatureExtractor;
use crate::classifier::{prototype_nll_grad, ClassifierConfig, PrototypeSet};
use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::pseudoclass::SyntheticBatch;

/// The pseudo-class term of the base loss. `mix` turns the batch features
/// into synthetic rows; its output is treated as a constant.
pub struct PseudoTerm<'a> {
    pub eta: f64,
    pub prototypes: &'a PrototypeSet,
    pub mix: &'a mut dyn FnMut(&Matrix, &[u32]) -> Result<SyntheticBatch>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseLoss {
    pub total: f64,
    pub real: f64,
    /// Unweighted pseudo-class loss, 0 when no synthetic rows were produced.
    pub pseudo: f64,
}

#[derive(Debug, Clone)]
pub struct BaseGrads {
    /// Same block order as [`FeatureExtractor::parameters`].
    pub extractor: Vec<Matrix>,
    pub atoms: Matrix,
    pub prototypes: Matrix,
    pub pseudo_prototypes: Option<Matrix>,
}

/// `L_cls + η·L̃_cls` on one batch of raw inputs.
pub fn base_objective(
    extractor: &FeatureExtractor,
    dictionary: &Dictionary,
    prototypes: &PrototypeSet,
    pseudo: Option<PseudoTerm<'_>>,
    inputs: &Matrix,
    labels: &[u32],
    cls: &ClassifierConfig,
) -> Result<(BaseLoss, BaseGrads)> {
    let (features, trace) = extractor.forward_traced(inputs)?;
    let solve = dictionary.solve(&features)?;
    let real = prototype_nll_grad(&solve.z, labels, prototypes, &[prototypes], cls)?;
    let back = dictionary.coefficients_backward(&features, &solve, &real.z)?;
    let extractor_grads = extractor.backward(&trace, &back.features)?;

    let mut atoms = back.atoms;
    let mut proto_grad = real.targets.add(&real.denominator[0])?;
    let mut loss = BaseLoss {
        total: real.loss,
        real: real.loss,
        pseudo: 0.0,
    };

    let mut pseudo_grad = None;
    if let Some(term) = pseudo {
        let mut g = Matrix::zeros(term.prototypes.len(), term.prototypes.dim());
        let synthetic = (term.mix)(&features, labels)?;
        if !synthetic.is_empty() {
            let mixed = dictionary.solve_reusing(&synthetic.features, &solve)?;
            let nll = prototype_nll_grad(
                &mixed.z,
                &synthetic.labels,
                term.prototypes,
                &[prototypes, term.prototypes],
                cls,
            )?;
            let upstream = nll.z.scale(term.eta);
            let mixed_back = dictionary.coefficients_backward(&synthetic.features, &mixed, &upstream)?;
            atoms = atoms.add(&mixed_back.atoms)?;
            proto_grad.axpy(term.eta, &nll.denominator[0])?;
            g = nll.targets.add(&nll.denominator[1])?.scale(term.eta);
            loss.pseudo = nll.loss;
            loss.total += term.eta * nll.loss;
        }
        pseudo_grad = Some(g);
    }

    Ok((
        loss,
        BaseGrads {
            extractor: extractor_grads,
            atoms,
            prototypes: proto_grad,
            pseudo_prototypes: pseudo_grad,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NovelLoss {
    pub total: f64,
    pub nll: f64,
    /// `‖M − M₀‖²_F`, unweighted.
    pub drift: f64,
}

#[derive(Debug, Clone)]
pub struct NovelGrads {
    /// Gradient of the classification term alone.
    pub atoms_nll: Matrix,
    /// Full gradient including `2α(M − M₀)`.
    pub atoms: Matrix,
    pub prototypes: Matrix,
}

/// Novel-session loss on frozen features: classification against every real
/// prototype seen so far plus `α‖M − M₀‖²_F`.
#[allow(clippy::too_many_arguments)]
pub fn novel_objective(
    dictionary: &Dictionary,
    anchor: &Dictionary,
    features: &Matrix,
    labels: &[u32],
    current: &PrototypeSet,
    previous: &[&PrototypeSet],
    alpha: f64,
    cls: &ClassifierConfig,
) -> Result<(NovelLoss, NovelGrads)> {
    if anchor.atoms().shape() != dictionary.atoms().shape() {
        return Err(Error::shape(
            "novel_objective",
            format!("anchor {:?} vs dictionary {:?}", anchor.atoms().shape(), dictionary.atoms().shape()),
        ));
    }
    let solve = dictionary.solve(features)?;
    let mut denominator: Vec<&PrototypeSet> = previous.to_vec();
    denominator.push(current);
    let nll = prototype_nll_grad(&solve.z, labels, current, &denominator, cls)?;
    let back = dictionary.coefficients_backward(features, &solve, &nll.z)?;
    let diff = dictionary.atoms().sub(anchor.atoms())?;
    let drift = diff.sum_squares();
    let mut atoms = back.atoms.clone();
    atoms.axpy(2.0 * alpha, &diff)?;
    let prototypes = nll.targets.add(nll.denominator.last().expect("current set is in the denominator"))?;
    Ok((
        NovelLoss {
            total: nll.loss + alpha * drift,
            nll: nll.loss,
            drift,
        },
        NovelGrads {
            atoms_nll: back.atoms,
            atoms,
            prototypes,
        },
    ))
}
