//! Base-session joint training, novel-session dictionary adaptation and the
//! full session protocol.

mod checkpoint;
mod objective;
mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureExtractor;
use crate::classifier::{init_prototypes_from_means, predict_rows, ClassifierConfig, PrototypeSet};
use crate::data::{SessionDataset, SessionStream};
use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_session, EvaluationReport};
use crate::numerics::Matrix;
use crate::pseudoclass::{default_per_class, make_plan, mixup_batch, PseudoClassPlan, DEFAULT_GAMMA_RANGE};

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT};
pub use objective::{base_objective, novel_objective, BaseGrads, BaseLoss, NovelGrads, NovelLoss, PseudoTerm};
pub use optim::{drift_prox, momentum_step, LrSchedule, ScheduleKind};

// Independent random streams so that switching one part of the pipeline on
// or off leaves the draws of every other part untouched.
const STREAM_INIT: u64 = 0;
const STREAM_BASE_SHUFFLE: u64 = 1;
const STREAM_PLAN: u64 = 2;
const STREAM_PSEUDO_INIT: u64 = 3;
const STREAM_MIXUP: u64 = 4;
const STREAM_PROTO_INIT: u64 = 5;
const STREAM_NOVEL_SHUFFLE: u64 = 16;

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub atoms: usize,
    pub lambda: f64,
    pub tau: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128],
            feature_dim: 64,
            atoms: 64,
            lambda: 0.1,
            tau: 0.08,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::config("layer widths must be positive"));
        }
        if self.atoms == 0 {
            return Err(Error::config("dictionary needs at least one atom"));
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::config(format!("lambda must be > 0, got {}", self.lambda)));
        }
        ClassifierConfig::new(self.tau)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoSettings {
    /// Number of pseudo classes; 0 picks the number of novel classes in the
    /// stream.
    pub classes: usize,
    pub gamma_range: (f64, f64),
    /// Synthetic rows per pseudo class per batch; `None` derives it from the
    /// batch size.
    pub per_class: Option<usize>,
}

impl Default for PseudoSettings {
    fn default() -> Self {
        Self {
            classes: 0,
            gamma_range: DEFAULT_GAMMA_RANGE,
            per_class: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub eta: f64,
    pub alpha: f64,
    pub base_epochs: usize,
    pub novel_epochs: usize,
    pub batch_size: usize,
    pub base_schedule: LrSchedule,
    pub novel_lr: f64,
    pub momentum: f64,
    pub seed: u64,
    /// `None` disables pseudo classes entirely.
    pub pseudo: Option<PseudoSettings>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            eta: 1e-3,
            alpha: 10.0,
            base_epochs: 200,
            novel_epochs: 10,
            batch_size: 64,
            base_schedule: LrSchedule::cosine(0.05),
            novel_lr: 5e-3,
            momentum: 0.9,
            seed: 7,
            pseudo: Some(PseudoSettings::default()),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eta", self.eta), ("alpha", self.alpha), ("novel_lr", self.novel_lr)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        self.base_schedule.validate()?;
        if let Some(p) = &self.pseudo {
            let (lo, hi) = p.gamma_range;
            if !(lo > 0.0 && lo <= hi && hi < 1.0) {
                return Err(Error::config(format!("gamma range must satisfy 0 < lo <= hi < 1, got [{lo}, {hi}]")));
            }
            if p.per_class == Some(0) {
                return Err(Error::config("pseudo rows per class must be positive"));
            }
        }
        Ok(())
    }

    /// Name of the ablation this configuration corresponds to.
    pub fn variant(&self) -> &'static str {
        match (self.pseudo.is_some(), self.novel_epochs > 0) {
            (true, true) => "D-FSCIL",
            (true, false) => "DDL+PC",
            (false, true) => "DDL+DA",
            (false, false) => "DDL",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub extractor: FeatureExtractor,
    pub dictionary: Dictionary,
    /// Dictionary at the end of the base session.
    pub anchor: Option<Dictionary>,
    /// Real prototypes, one set per finished session.
    pub sessions: Vec<PrototypeSet>,
    pub pseudo: Option<PrototypeSet>,
    pub classifier: ClassifierConfig,
    pub plan: Option<PseudoClassPlan>,
    /// Number of sessions trained so far.
    pub cursor: usize,
    /// Mean training loss per epoch, one list per session.
    #[serde(default)]
    pub loss_history: Vec<Vec<f64>>,
}

impl ModelState {
    pub fn new(model: &ModelConfig, input_dim: usize, seed: u64) -> Result<Self> {
        model.validate()?;
        let mut rng = rng_stream(seed, STREAM_INIT);
        let mut widths = vec![input_dim];
        widths.extend(&model.hidden);
        widths.push(model.feature_dim);
        let extractor = FeatureExtractor::random(&widths, &mut rng)?;
        let dictionary = Dictionary::random(model.atoms, model.feature_dim, model.lambda, &mut rng)?;
        Ok(Self {
            extractor,
            dictionary,
            anchor: None,
            sessions: Vec::new(),
            pseudo: None,
            classifier: ClassifierConfig::new(model.tau)?,
            plan: None,
            cursor: 0,
            loss_history: Vec::new(),
        })
    }

    /// Prototype sets used for inference: every real session, no pseudo set.
    pub fn real_sets(&self) -> Vec<&PrototypeSet> {
        self.sessions.iter().collect()
    }

    pub fn seen_labels(&self) -> Vec<u32> {
        self.sessions.iter().flat_map(|s| s.labels().iter().copied()).collect()
    }

    pub fn coefficients(&self, inputs: &Matrix) -> Result<Matrix> {
        self.dictionary.solve_coefficients(&self.extractor.forward(inputs)?)
    }

    pub fn predict(&self, inputs: &Matrix) -> Result<Vec<u32>> {
        predict_rows(&self.coefficients(inputs)?, &self.real_sets())
    }

    /// `‖M − M₀‖_F`, or 0 before the base session has finished.
    pub fn drift(&self) -> Result<f64> {
        match &self.anchor {
            Some(a) => self.dictionary.drift_norm(a),
            None => Ok(0.0),
        }
    }
}

fn check_loss(loss: f64, step: usize, batch: &[usize]) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            step,
            loss,
            batch: batch.to_vec(),
        })
    }
}

/// [`train_base_observed`] without an observer.
pub fn train_base(state: &mut ModelState, data: &SessionDataset, cfg: &TrainerConfig, first_pseudo_label: u32) -> Result<()> {
    train_base_observed(state, data, cfg, first_pseudo_label, &mut |_, _| {})
}

/// Jointly train the extractor, dictionary, base prototypes and (when
/// enabled) pseudo prototypes. `observer` sees the state after every step.
///
/// On return the extractor and every prototype set are frozen and the anchor
/// dictionary is set.
pub fn train_base_observed(
    state: &mut ModelState,
    data: &SessionDataset,
    cfg: &TrainerConfig,
    first_pseudo_label: u32,
    observer: &mut dyn FnMut(usize, &ModelState),
) -> Result<()> {
    cfg.validate()?;
    if state.cursor != 0 {
        return Err(Error::State(format!("base session already trained (cursor {})", state.cursor)));
    }
    if data.is_empty() {
        return Err(Error::config("base session has no training rows"));
    }
    let classes: Vec<u32> = data.classes().into_iter().collect();
    let m = state.dictionary.m();
    let d = state.dictionary.d();

    let mut proto_rng = rng_stream(cfg.seed, STREAM_PROTO_INIT);
    let mut base = PrototypeSet::random(0, classes.clone(), m, d, &mut proto_rng)?;

    let (plan, mut pseudo) = match &cfg.pseudo {
        Some(p) => {
            if classes.contains(&first_pseudo_label) || first_pseudo_label <= *classes.last().unwrap() {
                return Err(Error::config(format!(
                    "pseudo labels start at {first_pseudo_label}, which overlaps the base classes"
                )));
            }
            let count = if p.classes == 0 { classes.len() } else { p.classes };
            let per_class = p.per_class.unwrap_or_else(|| default_per_class(cfg.batch_size, count));
            let plan = make_plan(&classes, count, first_pseudo_label, &mut rng_stream(cfg.seed, STREAM_PLAN))?
                .with_gamma_range(p.gamma_range.0, p.gamma_range.1)?
                .with_per_class(per_class)?;
            let set = PrototypeSet::random(0, plan.labels(), m, d, &mut rng_stream(cfg.seed, STREAM_PSEUDO_INIT))?;
            (Some(plan), Some(set))
        }
        None => (None, None),
    };

    let mut shuffle_rng = rng_stream(cfg.seed, STREAM_BASE_SHUFFLE);
    let mut mix_rng = rng_stream(cfg.seed, STREAM_MIXUP);

    let mut v_extractor: Vec<Matrix> = state
        .extractor
        .parameters()
        .iter()
        .map(|p| Matrix::zeros(p.rows(), p.cols()))
        .collect();
    let mut v_atoms = Matrix::zeros(m, d);
    let mut v_base = Matrix::zeros(base.len(), m);
    let mut v_pseudo = pseudo.as_ref().map(|p| Matrix::zeros(p.len(), m));

    state.sessions.push(base.clone());
    state.pseudo = pseudo.clone();
    state.plan = plan.clone();

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.base_epochs);
    let mut step = 0;
    for epoch in 0..cfg.base_epochs {
        let lr = cfg.base_schedule.rate(epoch, cfg.base_epochs);
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let inputs = data.features.select_rows(batch);
            let labels: Vec<u32> = batch.iter().map(|&i| data.labels[i]).collect();

            let mut mix = |f: &Matrix, y: &[u32]| mixup_batch(plan.as_ref().unwrap(), f, y, &mut mix_rng);
            let term = pseudo.as_ref().map(|p| PseudoTerm {
                eta: cfg.eta,
                prototypes: p,
                mix: &mut mix,
            });
            let (loss, grads) =
                base_objective(&state.extractor, &state.dictionary, &base, term, &inputs, &labels, &state.classifier)?;
            check_loss(loss.total, step, batch)?;

            for ((p, v), g) in state.extractor.parameters_mut()?.into_iter().zip(&mut v_extractor).zip(&grads.extractor) {
                momentum_step(p, v, g, lr, cfg.momentum)?;
            }
            momentum_step(state.dictionary.atoms_mut(), &mut v_atoms, &grads.atoms, lr, cfg.momentum)?;
            momentum_step(base.vectors_mut()?, &mut v_base, &grads.prototypes, lr, cfg.momentum)?;
            if let (Some(p), Some(v), Some(g)) = (pseudo.as_mut(), v_pseudo.as_mut(), grads.pseudo_prototypes.as_ref()) {
                momentum_step(p.vectors_mut()?, v, g, lr, cfg.momentum)?;
            }

            state.sessions[0] = base.clone();
            state.pseudo.clone_from(&pseudo);
            observer(step, state);
            epoch_loss += loss.total;
            batches += 1;
            step += 1;
        }
        let mean = epoch_loss / batches as f64;
        log::debug!("base epoch {epoch}: lr {lr:.5}, loss {mean:.5}");
        history.push(mean);
    }

    base.freeze();
    state.sessions[0] = base;
    if let Some(p) = pseudo.as_mut() {
        p.freeze();
    }
    state.pseudo = pseudo;
    state.extractor.freeze();
    state.anchor = Some(state.dictionary.clone());
    state.loss_history.push(history);
    state.cursor = 1;
    Ok(())
}

/// Extend the classifier with one few-shot session and adapt the dictionary.
/// The extractor, earlier prototypes and the anchor are left untouched.
pub fn adapt_novel(state: &mut ModelState, data: &SessionDataset, cfg: &TrainerConfig) -> Result<()> {
    cfg.validate()?;
    let Some(anchor) = state.anchor.clone() else {
        return Err(Error::State("novel session before the base session finished".into()));
    };
    if !state.extractor.is_frozen() {
        return Err(Error::State("extractor must be frozen for novel sessions".into()));
    }
    if data.is_empty() {
        return Err(Error::config("novel session has no training rows"));
    }
    let t = state.cursor;
    for c in data.classes() {
        if state.sessions.iter().any(|s| s.index_of(c).is_some()) {
            return Err(Error::config(format!("session {t}: class {c} was already learned")));
        }
        if state.pseudo.as_ref().is_some_and(|p| p.index_of(c).is_some()) {
            return Err(Error::config(format!("session {t}: class {c} collides with a pseudo label")));
        }
    }

    let features = state.extractor.forward(&data.features)?;
    let z = state.dictionary.solve_coefficients(&features)?;
    let mut current = init_prototypes_from_means(&z, &data.labels, t)?;

    let mut rng = rng_stream(cfg.seed, STREAM_NOVEL_SHUFFLE + t as u64);
    let mut v_atoms = Matrix::zeros(state.dictionary.m(), state.dictionary.d());
    let mut v_proto = Matrix::zeros(current.len(), current.dim());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.novel_epochs);
    let mut step = 0;
    for epoch in 0..cfg.novel_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let f = features.select_rows(batch);
            let labels: Vec<u32> = batch.iter().map(|&i| data.labels[i]).collect();
            let previous = state.real_sets();
            let (loss, grads) = novel_objective(
                &state.dictionary,
                &anchor,
                &f,
                &labels,
                &current,
                &previous,
                cfg.alpha,
                &state.classifier,
            )?;
            check_loss(loss.total, step, batch)?;
            momentum_step(state.dictionary.atoms_mut(), &mut v_atoms, &grads.atoms_nll, cfg.novel_lr, cfg.momentum)?;
            drift_prox(state.dictionary.atoms_mut(), anchor.atoms(), cfg.novel_lr, cfg.alpha)?;
            momentum_step(current.vectors_mut()?, &mut v_proto, &grads.prototypes, cfg.novel_lr, cfg.momentum)?;
            epoch_loss += loss.total;
            batches += 1;
            step += 1;
        }
        let mean = epoch_loss / batches as f64;
        log::debug!("session {t} epoch {epoch}: loss {mean:.5}");
        history.push(mean);
    }

    current.freeze();
    state.sessions.push(current);
    state.loss_history.push(history);
    state.cursor += 1;
    Ok(())
}

/// Train the base session and every novel session in order, evaluating on
/// the cumulative test set after each. `on_session` runs after each session
/// is trained, before it is evaluated.
pub fn run_protocol(
    stream: &SessionStream,
    model: &ModelConfig,
    cfg: &TrainerConfig,
    on_session: &mut dyn FnMut(usize, &ModelState) -> Result<()>,
) -> Result<(ModelState, EvaluationReport)> {
    stream.validate()?;
    model.validate()?;
    cfg.validate()?;

    let mut cfg = cfg.clone();
    if let Some(p) = cfg.pseudo.as_mut() {
        if p.classes == 0 {
            p.classes = match stream.novel_class_count() {
                0 => stream.base_classes().len(),
                n => n,
            };
        }
    }
    let mut state = ModelState::new(model, stream.input_dim(), cfg.seed)?;
    let mut report = EvaluationReport::new(cfg.variant());

    let first_pseudo = stream.max_label() + 1;
    log::info!("training base session ({} rows)", stream.base.train.len());
    train_base(&mut state, &stream.base.train, &cfg, first_pseudo)?;
    on_session(0, &state)?;
    report.sessions.push(evaluate_session(&state, &stream.cumulative_test(0)?, 0)?);

    for (i, session) in stream.novel.iter().enumerate() {
        let t = i + 1;
        log::info!("adapting to session {t}");
        adapt_novel(&mut state, &session.train, &cfg)?;
        on_session(t, &state)?;
        report.sessions.push(evaluate_session(&state, &stream.cumulative_test(t)?, t)?);
    }
    Ok((state, report))
}
