//! Experiment configuration: one TOML file per experiment, overridable from
//! the command line.
//!
//! Every random stream is derived from the single mandatory top-level `seed`
//! by a fixed offset (see [`Seeds`]).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use segfed::federation::{FederationConfig, LocalObjective, Weighting};
use segfed::loss::DistillationConfig;
use segfed::partition::{ClientConstraint, PartitionMode, PartitionSpec};
use segfed::ModelSpec;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Mode {
    /// Supervised student on the pooled corpus.
    Centralized,
    /// FedAvg of supervised students.
    FedUnet,
    /// FedAvg of students distilled from per-client teachers.
    #[default]
    FedUkd,
}

impl Mode {
    pub fn is_federated(self) -> bool {
        self != Mode::Centralized
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    pub n: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    /// Foreground class sets cycled over the samples; when absent each
    /// foreground class appears with `presence_probability`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub presence: Option<Vec<BTreeSet<u8>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub presence_probability: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    Synthetic(SyntheticSource),
    /// `root/{manifest.txt, legend.txt, images/, masks/}`.
    Directory {
        root: PathBuf,
        /// `[height, width]`; native size when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        resolution: Option<(usize, usize)>,
        /// Reject mask colors missing from the legend instead of mapping them
        /// to the ignore index.
        #[serde(default = "yes")]
        strict: bool,
    },
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub mode: PartitionMode,
    /// Label-skew constraints, tried in order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub clients: Vec<ClientConstraint>,
    /// Quantity-skew shares; equal shares over `federation.num_clients` when
    /// empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub proportions: Vec<f64>,
    /// Existing `sample_id,client` manifest to use instead of partitioning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
}

impl PartitionConfig {
    pub fn spec(&self) -> PartitionSpec {
        PartitionSpec {
            mode: self.mode,
            clients: self.clients.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub step_size: f64,
    pub batch_size: usize,
    /// Pretraining corpus; the training corpus when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<CorpusSource>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    /// Default teacher at the corpus class count when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<ModelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<PretrainConfig>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentConfig {
    /// Default student at the corpus class count when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<ModelSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSection {
    /// Number of partition clients when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_clients: Option<usize>,
    pub rounds: usize,
    pub local_epochs: usize,
    pub step_size: f64,
    pub batch_size: usize,
    /// Distillation weight and temperature; library defaults when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub weighting: Weighting,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub mode: Mode,
    pub out_dir: PathBuf,
    /// Dataset label in the summary table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_name: Option<String>,
    pub corpus: CorpusSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<CorpusSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<PartitionConfig>,
    #[serde(default)]
    pub teacher: TeacherConfig,
    #[serde(default)]
    pub student: StudentConfig,
    pub federation: FederationSection,
}

/// Command-line values that replace config fields.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub mode: Option<Mode>,
    pub rounds: Option<usize>,
    pub epochs: Option<usize>,
    pub alpha: Option<f64>,
    pub temperature: Option<f64>,
    pub clients: Option<usize>,
}

/// Streams derived from the experiment seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeds {
    pub corpus: u64,
    pub validation: u64,
    pub partition: u64,
    pub teacher_init: u64,
    pub student_init: u64,
    pub training: u64,
    pub pretrain_corpus: u64,
    pub pretrain: u64,
}

impl Seeds {
    pub fn from_seed(seed: u64) -> Self {
        let at = |k: u64| seed.wrapping_add(k);
        Self {
            corpus: seed,
            validation: at(1),
            partition: at(2),
            teacher_init: at(3),
            student_init: at(4),
            training: at(5),
            pretrain_corpus: at(6),
            pretrain: at(7),
        }
    }
}

fn field(name: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{name}: {msg}"))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let Some(dir) = path.parent() {
            config.resolve_paths(dir);
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable in TOML")
    }

    /// SHA-256 of the serialized effective config.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::from_seed(self.seed)
    }

    /// Makes relative paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let fix_source = |s: &mut CorpusSource| {
            if let CorpusSource::Directory { root, .. } = s {
                fix(root);
            }
        };
        fix(&mut self.out_dir);
        fix_source(&mut self.corpus);
        if let Some(v) = &mut self.validation {
            fix_source(v);
        }
        if let Some(m) = self.partition.as_mut().and_then(|p| p.manifest.as_mut()) {
            fix(m);
        }
        if let Some(w) = &mut self.teacher.weights {
            fix(w);
        }
        if let Some(c) = self.teacher.pretrain.as_mut().and_then(|p| p.corpus.as_mut()) {
            fix_source(c);
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.out {
            self.out_dir = v.clone();
        }
        if let Some(v) = o.mode {
            self.mode = v;
        }
        if let Some(v) = o.rounds {
            self.federation.rounds = v;
        }
        if let Some(v) = o.epochs {
            self.federation.local_epochs = v;
        }
        if let Some(v) = o.alpha {
            self.federation.alpha = Some(v);
        }
        if let Some(v) = o.temperature {
            self.federation.temperature = Some(v);
        }
        if let Some(v) = o.clients {
            self.federation.num_clients = Some(v);
        }
    }

    pub fn num_classes(&self) -> Result<usize, CliError> {
        match &self.corpus {
            CorpusSource::Synthetic(s) => Ok(s.classes),
            CorpusSource::Directory { root, .. } => {
                segfed::data::LegendMap::load(&root.join(segfed::data::LEGEND_FILE))
                    .map(|l| l.num_classes())
                    .map_err(|e| field("corpus.root", e))
            }
        }
    }

    pub fn teacher_spec(&self, classes: usize) -> ModelSpec {
        self.teacher
            .spec
            .clone()
            .unwrap_or_else(|| ModelSpec::default_teacher(classes))
    }

    pub fn student_spec(&self, classes: usize) -> ModelSpec {
        self.student
            .spec
            .clone()
            .unwrap_or_else(|| ModelSpec::default_student(classes))
    }

    /// Client count implied by the partition section.
    pub fn partition_clients(&self) -> Option<usize> {
        let p = self.partition.as_ref()?;
        if p.manifest.is_some() {
            return None;
        }
        match p.mode {
            PartitionMode::LabelSkew => Some(p.clients.len()),
            PartitionMode::QuantitySkew if !p.proportions.is_empty() => Some(p.proportions.len()),
            PartitionMode::QuantitySkew => None,
        }
    }

    pub fn num_clients(&self) -> usize {
        self.federation
            .num_clients
            .or_else(|| self.partition_clients())
            .unwrap_or(1)
    }

    pub fn federation_config(&self) -> FederationConfig {
        let defaults = DistillationConfig::default();
        FederationConfig {
            num_clients: self.num_clients(),
            rounds: self.federation.rounds,
            local_epochs: self.federation.local_epochs,
            distill: DistillationConfig {
                temperature: self.federation.temperature.unwrap_or(defaults.temperature),
                alpha: self.federation.alpha.unwrap_or(defaults.alpha),
            },
            step_size: self.federation.step_size,
            batch_size: self.federation.batch_size,
            seed: self.seeds().training,
            weighting: self.federation.weighting,
            objective: match self.mode {
                Mode::FedUkd => LocalObjective::Distillation,
                Mode::FedUnet | Mode::Centralized => LocalObjective::Supervised,
            },
        }
    }

    /// Checks everything that can be checked without loading data.
    pub fn validate(&self) -> Result<(), CliError> {
        validate_source("corpus", &self.corpus)?;
        if let Some(v) = &self.validation {
            validate_source("validation", v)?;
        }
        let classes = self.num_classes()?;
        for (name, spec) in [
            ("teacher.spec", self.teacher_spec(classes)),
            ("student.spec", self.student_spec(classes)),
        ] {
            spec.validate().map_err(|e| field(name, e))?;
            if spec.num_classes != classes {
                return Err(field(
                    name,
                    format!(
                        "num_classes is {} but the corpus has {classes} classes",
                        spec.num_classes
                    ),
                ));
            }
        }
        let fed = self.federation_config();
        let f = &self.federation;
        if f.rounds == 0 {
            return Err(field("federation.rounds", "must be >= 1"));
        }
        if f.batch_size == 0 {
            return Err(field("federation.batch_size", "must be >= 1"));
        }
        if !(f.step_size > 0.0 && f.step_size.is_finite()) {
            return Err(field("federation.step_size", "must be positive"));
        }
        fed.distill.validate().map_err(|e| field("federation", e))?;
        if fed.num_clients == 0 {
            return Err(field("federation.num_clients", "must be >= 1"));
        }

        if let Some(p) = &self.partition {
            if let Some(m) = &p.manifest {
                if !m.is_file() {
                    return Err(field("partition.manifest", format!("{} does not exist", m.display())));
                }
            } else {
                match p.mode {
                    PartitionMode::LabelSkew => {
                        if p.clients.is_empty() {
                            return Err(field("partition.clients", "label skew needs at least one client"));
                        }
                        if !p.proportions.is_empty() {
                            return Err(field("partition.proportions", "only used by quantity_skew"));
                        }
                        p.spec().validate().map_err(|e| field("partition.clients", e))?;
                    }
                    PartitionMode::QuantitySkew => {
                        if !p.clients.is_empty() {
                            return Err(field("partition.clients", "only used by label_skew"));
                        }
                        segfed::partition::quantity_counts(self.proportions().len(), &self.proportions())
                            .map_err(|e| field("partition.proportions", e))?;
                    }
                }
                if let Some(n) = self.partition_clients() {
                    if n != fed.num_clients {
                        return Err(field(
                            "federation.num_clients",
                            format!("{} but the partition defines {n} clients", fed.num_clients),
                        ));
                    }
                }
            }
        } else if self.mode.is_federated() && fed.num_clients != 1 {
            return Err(field("partition", "required for more than one federated client"));
        }

        if let Some(w) = &self.teacher.weights {
            if !w.is_file() {
                return Err(field("teacher.weights", format!("{} does not exist", w.display())));
            }
        }
        if let Some(p) = &self.teacher.pretrain {
            if p.batch_size == 0 {
                return Err(field("teacher.pretrain.batch_size", "must be >= 1"));
            }
            if !(p.step_size > 0.0 && p.step_size.is_finite()) {
                return Err(field("teacher.pretrain.step_size", "must be positive"));
            }
            if let Some(c) = &p.corpus {
                validate_source("teacher.pretrain.corpus", c)?;
            }
        }
        if self.mode == Mode::FedUkd && self.teacher.weights.is_none() && self.teacher.pretrain.is_none() {
            return Err(field(
                "teacher",
                "fed_ukd needs teacher.weights or a teacher.pretrain stanza",
            ));
        }
        Ok(())
    }

    /// Quantity-skew shares, equal shares when none are configured.
    pub fn proportions(&self) -> Vec<f64> {
        match &self.partition {
            Some(p) if !p.proportions.is_empty() => p.proportions.clone(),
            _ => {
                let n = self.num_clients();
                vec![1.0 / n as f64; n]
            }
        }
    }
}

fn validate_source(name: &str, source: &CorpusSource) -> Result<(), CliError> {
    match source {
        CorpusSource::Synthetic(s) => {
            if s.classes < 2 {
                return Err(field(&format!("{name}.classes"), "must be >= 2"));
            }
            if s.presence.is_some() && s.presence_probability.is_some() {
                return Err(field(name, "set presence or presence_probability, not both"));
            }
            if let Some(p) = s.presence_probability {
                if !(0.0..=1.0).contains(&p) {
                    return Err(field(&format!("{name}.presence_probability"), "must lie in [0, 1]"));
                }
            }
            if let Some(bad) = s
                .presence
                .iter()
                .flatten()
                .flatten()
                .find(|&&c| c == 0 || c as usize >= s.classes)
            {
                return Err(field(
                    &format!("{name}.presence"),
                    format!("class {bad} is not a foreground class"),
                ));
            }
        }
        CorpusSource::Directory { root, .. } => {
            if !root.is_dir() {
                return Err(field(
                    &format!("{name}.root"),
                    format!("{} is not a directory", root.display()),
                ));
            }
        }
    }
    Ok(())
}
