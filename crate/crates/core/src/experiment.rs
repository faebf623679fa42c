//! Experiment configuration files, single runs and hyper-parameter sweeps.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, load_stream, SessionStream, SyntheticBenchmarkSpec};
use crate::error::{Error, Result};
use crate::evaluation::{emit_report, EvaluationReport, ReportFormat};
use crate::trainer::{run_protocol, Checkpoint, LrSchedule, ModelConfig, ModelState, PseudoSettings, ScheduleKind, TrainerConfig};

pub const EFFECTIVE_CONFIG_NAME: &str = "effective_config.toml";
pub const REPORT_CSV_NAME: &str = "report.csv";
pub const REPORT_TABLE_NAME: &str = "report.txt";

pub fn checkpoint_name(session: usize) -> String {
    format!("checkpoint_session{session}.json")
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Stream manifest; when absent the synthetic benchmark below is
    /// generated in memory.
    pub manifest: Option<PathBuf>,
    pub synthetic: SyntheticBenchmarkSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DictionarySection {
    pub atoms: usize,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoSection {
    /// 0 means one pseudo class per novel class in the stream.
    pub classes: usize,
    pub gamma_min: f64,
    pub gamma_max: f64,
    /// 0 derives the count from the batch size.
    pub per_class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleName {
    Cosine,
    Step,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSection {
    pub eta: f64,
    pub alpha: f64,
    pub base_epochs: usize,
    pub novel_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: ScheduleName,
    pub step_factor: f64,
    pub step_every: usize,
    pub novel_lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub enable_pc: bool,
    pub enable_da: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub backbone: BackboneSection,
    pub dictionary: DictionarySection,
    pub classifier: ClassifierSection,
    pub pseudo: PseudoSection,
    pub trainer: TrainerSection,
    pub ablation: AblationSection,
    pub output: OutputSection,
}

impl Default for BackboneSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            hidden: m.hidden,
            feature_dim: m.feature_dim,
        }
    }
}

impl Default for DictionarySection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            atoms: m.atoms,
            lambda: m.lambda,
        }
    }
}

impl Default for ClassifierSection {
    fn default() -> Self {
        Self {
            tau: ModelConfig::default().tau,
        }
    }
}

impl Default for PseudoSection {
    fn default() -> Self {
        let p = PseudoSettings::default();
        Self {
            classes: p.classes,
            gamma_min: p.gamma_range.0,
            gamma_max: p.gamma_range.1,
            per_class: 0,
        }
    }
}

impl Default for TrainerSection {
    fn default() -> Self {
        let t = TrainerConfig::default();
        Self {
            eta: t.eta,
            alpha: t.alpha,
            base_epochs: t.base_epochs,
            novel_epochs: t.novel_epochs,
            batch_size: t.batch_size,
            lr: t.base_schedule.initial,
            schedule: ScheduleName::Cosine,
            step_factor: 0.25,
            step_every: 50,
            novel_lr: t.novel_lr,
            momentum: t.momentum,
            seed: t.seed,
        }
    }
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            enable_pc: true,
            enable_da: true,
        }
    }
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() as u64 + 1);
            Error::Parse {
                path: path.to_path_buf(),
                line,
                message: e.message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file. A relative manifest path is taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&fs::read_to_string(path)?, path)?;
        if let Some(m) = cfg.data.manifest.as_mut() {
            if m.is_relative() {
                if let Some(parent) = path.parent() {
                    *m = parent.join(&*m);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.trainer_config().validate()?;
        if self.data.manifest.is_none() {
            self.data.synthetic.validate()?;
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            hidden: self.backbone.hidden.clone(),
            feature_dim: self.backbone.feature_dim,
            atoms: self.dictionary.atoms,
            lambda: self.dictionary.lambda,
            tau: self.classifier.tau,
        }
    }

    /// Trainer settings with the ablation switches applied: pseudo classes
    /// off forces η to 0, adaptation off forces zero novel epochs.
    pub fn trainer_config(&self) -> TrainerConfig {
        let t = &self.trainer;
        let kind = match t.schedule {
            ScheduleName::Cosine => ScheduleKind::CosineAnnealing,
            ScheduleName::Constant => ScheduleKind::Constant,
            ScheduleName::Step => ScheduleKind::StepDecay {
                factor: t.step_factor,
                every: t.step_every,
            },
        };
        let pseudo = self.ablation.enable_pc.then(|| PseudoSettings {
            classes: self.pseudo.classes,
            gamma_range: (self.pseudo.gamma_min, self.pseudo.gamma_max),
            per_class: (self.pseudo.per_class > 0).then_some(self.pseudo.per_class),
        });
        TrainerConfig {
            eta: if self.ablation.enable_pc { t.eta } else { 0.0 },
            alpha: t.alpha,
            base_epochs: t.base_epochs,
            novel_epochs: if self.ablation.enable_da { t.novel_epochs } else { 0 },
            batch_size: t.batch_size,
            base_schedule: LrSchedule { initial: t.lr, kind },
            novel_lr: t.novel_lr,
            momentum: t.momentum,
            seed: t.seed,
            pseudo,
        }
    }

    pub fn variant(&self) -> &'static str {
        self.trainer_config().variant()
    }

    pub fn load_stream(&self) -> Result<SessionStream> {
        match &self.data.manifest {
            Some(m) => load_stream(m),
            None => generate_synthetic(&self.data.synthetic),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: EvaluationReport,
    pub state: ModelState,
    /// `‖M − M₀‖_F` after each session.
    pub drift: Vec<f64>,
    pub dir: PathBuf,
}

/// Load the configured stream and run it, writing into `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let stream = cfg.load_stream()?;
    run_on_stream(cfg, &stream, out_dir)
}

/// Train and evaluate `stream`, writing the effective config, one checkpoint
/// per session and the report in CSV and table form.
pub fn run_on_stream(cfg: &ExperimentConfig, stream: &SessionStream, out_dir: &Path) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(EFFECTIVE_CONFIG_NAME), cfg.to_toml()?)?;
    let model = cfg.model_config();
    let trainer = cfg.trainer_config();
    let mut drift = Vec::new();
    let (state, report) = run_protocol(stream, &model, &trainer, &mut |t, state| {
        drift.push(state.drift()?);
        Checkpoint::new(model.clone(), trainer.clone(), state.clone()).save(&out_dir.join(checkpoint_name(t)))
    })?;
    emit_report(&report, &out_dir.join(REPORT_CSV_NAME), ReportFormat::Csv)?;
    emit_report(&report, &out_dir.join(REPORT_TABLE_NAME), ReportFormat::Table)?;
    Ok(ExperimentOutcome {
        report,
        state,
        drift,
        dir: out_dir.to_path_buf(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Atoms,
    Lambda,
    Tau,
    Eta,
    Alpha,
    PseudoClasses,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 6] = [
        SweepAxis::Atoms,
        SweepAxis::Lambda,
        SweepAxis::Tau,
        SweepAxis::Eta,
        SweepAxis::Alpha,
        SweepAxis::PseudoClasses,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Atoms => "m",
            SweepAxis::Lambda => "lambda",
            SweepAxis::Tau => "tau",
            SweepAxis::Eta => "eta",
            SweepAxis::Alpha => "alpha",
            SweepAxis::PseudoClasses => "pseudo-classes",
        }
    }

    /// Copy of `cfg` with this axis set to `value`.
    pub fn apply(self, cfg: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let count = || -> Result<usize> {
            if value >= 1.0 && value.fract() == 0.0 && value <= u32::MAX as f64 {
                Ok(value as usize)
            } else {
                Err(Error::config(format!("{} needs a positive integer, got {value}", self.name())))
            }
        };
        let mut out = cfg.clone();
        match self {
            SweepAxis::Atoms => out.dictionary.atoms = count()?,
            SweepAxis::Lambda => out.dictionary.lambda = value,
            SweepAxis::Tau => out.classifier.tau = value,
            SweepAxis::Eta => out.trainer.eta = value,
            SweepAxis::Alpha => out.trainer.alpha = value,
            SweepAxis::PseudoClasses => out.pseudo.classes = count()?,
        }
        out.validate()?;
        Ok(out)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|a| a.name()).collect();
            Error::config(format!("unknown sweep axis {s:?}, expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub final_joint: f64,
    pub final_harmonic: Option<f64>,
    pub average: f64,
    pub drift: f64,
}

pub const SWEEP_HEADER: [&str; 5] = ["value", "final_joint", "final_harmonic", "average", "drift"];

pub fn sweep_csv_name(axis: SweepAxis) -> String {
    format!("sweep_{axis}.csv")
}

/// One full run per value on a shared stream and seed. Each run writes into
/// its own subdirectory; the summary goes to `sweep_<axis>.csv`.
pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[f64], out_dir: &Path) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one value"));
    }
    let configs = values
        .iter()
        .map(|&v| axis.apply(cfg, v))
        .collect::<Result<Vec<_>>>()?;
    let stream = cfg.load_stream()?;
    fs::create_dir_all(out_dir)?;
    let mut rows = Vec::with_capacity(values.len());
    for (&value, run_cfg) in values.iter().zip(&configs) {
        log::info!("sweep {axis} = {value}");
        let outcome = run_on_stream(run_cfg, &stream, &out_dir.join(format!("{axis}={value}")))?;
        let last = outcome.report.last().expect("protocol reports at least one session");
        rows.push(SweepRow {
            value,
            final_joint: last.joint,
            final_harmonic: last.harmonic,
            average: outcome.report.average_accuracy()?,
            drift: *outcome.drift.last().unwrap_or(&0.0),
        });
    }
    let mut w = csv::Writer::from_path(out_dir.join(sweep_csv_name(axis))).map_err(csv_io)?;
    w.write_record(SWEEP_HEADER).map_err(csv_io)?;
    for r in &rows {
        w.write_record([
            r.value.to_string(),
            r.final_joint.to_string(),
            r.final_harmonic.map_or_else(|| "NA".into(), |h| h.to_string()),
            r.average.to_string(),
            r.drift.to_string(),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(rows)
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
