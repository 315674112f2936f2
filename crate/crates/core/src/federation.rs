//! In-process federation: a server loop broadcasting the global student,
//! per-client local training (distillation from a frozen local teacher, or
//! plain supervised), and FedAvg aggregation.
//!
//! Every transfer goes through the binary weight container, and the ledger
//! records the exact encoded size of what was sent.

use std::collections::HashSet;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::data::SegmentationSample;
use crate::error::{Error, Result};
use crate::loss::DistillationConfig;
use crate::metrics::{BatchRecord, ClientRoundRecord, RoundRecord};
use crate::model::{LogitMap, Unet, WeightEntry, WeightSet};
use crate::partition::ClientId;
use crate::tensor::Tensor;
use crate::train::{evaluate, predict_each, train, Objective, TrainSettings};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Weight each client by its share of the total sample count.
    #[default]
    SampleCount,
    Equal,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalObjective {
    /// Student trained on `α·L_P + (1 − α)·L_C` against the local teacher.
    #[default]
    Distillation,
    /// Cross-entropy only; no teacher involved.
    Supervised,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    #[serde(default)]
    pub distill: DistillationConfig,
    pub step_size: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub weighting: Weighting,
    #[serde(default)]
    pub objective: LocalObjective,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            num_clients: 3,
            rounds: 10,
            local_epochs: 2,
            distill: DistillationConfig::default(),
            step_size: 0.1,
            batch_size: 4,
            seed: 0,
            weighting: Weighting::SampleCount,
            objective: LocalObjective::Distillation,
        }
    }
}

impl FederationConfig {
    /// `local_epochs = 0` is accepted (no local steps).
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 || self.rounds == 0 {
            return Err(Error::InvalidArgument("num_clients and rounds must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidArgument("step_size must be positive".into()));
        }
        self.distill.validate()
    }

    fn local_settings(&self, stream: u64, round: usize) -> TrainSettings {
        TrainSettings {
            epochs: self.local_epochs,
            batch_size: self.batch_size,
            step_size: self.step_size,
            seed: self.seed,
            stream,
            epoch_offset: round * self.local_epochs,
            max_steps: None,
        }
    }
}

/// A frozen, pretrained teacher held by one client.
#[derive(Clone, Debug)]
pub struct Teacher {
    pub model: Unet,
    pub weights: Arc<WeightSet>,
}

impl Teacher {
    pub fn new(model: Unet, weights: WeightSet) -> Result<Self> {
        model.check_weights(&weights)?;
        Ok(Self {
            model,
            weights: Arc::new(weights),
        })
    }
}

#[derive(Debug)]
pub struct ClientState {
    pub client_id: ClientId,
    pub teacher: Option<Teacher>,
    pub student: WeightSet,
    pub dataset: Vec<SegmentationSample>,
    /// Shuffle stream for local batch order; the client id unless changed.
    pub stream: u64,
    /// Teacher outputs per local sample; computed once since the teacher
    /// never changes.
    teacher_logits: Option<Vec<LogitMap>>,
}

impl ClientState {
    pub fn new(client_id: ClientId, dataset: Vec<SegmentationSample>, teacher: Option<Teacher>) -> Self {
        Self {
            client_id,
            teacher,
            student: WeightSet::empty(),
            dataset,
            stream: client_id as u64,
            teacher_logits: None,
        }
    }

    fn ensure_teacher_logits(&mut self) -> Result<()> {
        if self.teacher_logits.is_none() {
            let teacher = self
                .teacher
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("distillation requires a teacher".into()))?;
            self.teacher_logits = Some(predict_each(&teacher.model, &teacher.weights, &self.dataset)?);
        }
        Ok(())
    }

    fn begin_round(&mut self, model: &Unet, global: &WeightSet) -> Result<()> {
        if self.dataset.is_empty() {
            return Err(Error::InvalidArgument(format!("client {} has no data", self.client_id)));
        }
        model.check_weights(global)?;
        self.student = global.clone();
        Ok(())
    }
}

/// Client side of one round: overwrite the local student with the global
/// weights, then train for `local_epochs` on the combined objective.
pub fn ukd_learning(
    client: &mut ClientState,
    student_model: &Unet,
    global_student: &WeightSet,
    config: &FederationConfig,
    round: usize,
) -> Result<(WeightSet, Vec<BatchRecord>)> {
    client.begin_round(student_model, global_student)?;
    let settings = config.local_settings(client.stream, round);
    let start = client.student.clone();
    client.ensure_teacher_logits()?;
    let objective = Objective::Distillation {
        teacher_logits: client.teacher_logits.as_deref().expect("filled above"),
        config: config.distill,
    };
    let (weights, trace) = train(student_model, start, &client.dataset, &objective, &settings)?;
    client.student = weights.clone();
    Ok((weights, trace))
}

/// Client side of one round without a teacher.
pub fn supervised_learning(
    client: &mut ClientState,
    model: &Unet,
    global: &WeightSet,
    config: &FederationConfig,
    round: usize,
) -> Result<(WeightSet, Vec<BatchRecord>)> {
    client.begin_round(model, global)?;
    let settings = config.local_settings(client.stream, round);
    let (weights, trace) = train(
        model,
        client.student.clone(),
        &client.dataset,
        &Objective::Supervised,
        &settings,
    )?;
    client.student = weights.clone();
    Ok((weights, trace))
}

/// Sample-count weighted element-wise average.
pub fn fedavg(contributions: &[(&WeightSet, usize)]) -> Result<WeightSet> {
    fedavg_with(contributions, Weighting::SampleCount)
}

/// Element-wise weighted average. Each element's weighted terms are summed
/// in sorted order, so the result does not depend on contribution order.
pub fn fedavg_with(contributions: &[(&WeightSet, usize)], weighting: Weighting) -> Result<WeightSet> {
    let (first, _) = contributions
        .first()
        .ok_or_else(|| Error::InvalidArgument("fedavg needs at least one contribution".into()))?;
    for (w, n) in contributions {
        first.check_compatible(w)?;
        if *n == 0 {
            return Err(Error::InvalidArgument("sample counts must be >= 1".into()));
        }
    }
    let counts: Vec<f64> = contributions
        .iter()
        .map(|(_, n)| match weighting {
            Weighting::SampleCount => *n as f64,
            Weighting::Equal => 1.0,
        })
        .collect();
    let total: f64 = counts.iter().sum();
    let mut terms = vec![0f64; contributions.len()];
    let entries = first
        .entries
        .iter()
        .enumerate()
        .map(|(e, entry)| {
            let data = (0..entry.tensor.numel())
                .map(|i| {
                    for (t, ((w, _), c)) in terms.iter_mut().zip(contributions.iter().zip(&counts)) {
                        // exact: a count below 2^29 times an f32 fits in f64
                        *t = c * w.entries[e].tensor.data()[i] as f64;
                    }
                    terms.sort_unstable_by(f64::total_cmp);
                    (terms.iter().sum::<f64>() / total) as f32
                })
                .collect();
            WeightEntry {
                name: entry.name.clone(),
                tensor: Tensor::from_vec(entry.tensor.shape(), data).expect("shape preserved"),
            }
        })
        .collect();
    Ok(WeightSet {
        spec_hash: first.spec_hash,
        entries,
    })
}

#[derive(Clone, Debug)]
pub struct GlobalState {
    /// Number of completed rounds.
    pub round: usize,
    pub global_student: WeightSet,
    /// Server's copy of the aggregate; always equal to `global_student`.
    pub server_copy: WeightSet,
    pub history: Vec<RoundRecord>,
}

pub fn run_federation(
    config: &FederationConfig,
    clients: &mut [ClientState],
    student_model: &Unet,
    initial_student: WeightSet,
) -> Result<GlobalState> {
    run_federation_with(config, clients, student_model, initial_student, None, |_, _| Ok(()))
}

/// Full server loop. `on_round` sees each finished round's record and the
/// new global weights; returning an error aborts the run.
pub fn run_federation_with(
    config: &FederationConfig,
    clients: &mut [ClientState],
    student_model: &Unet,
    initial_student: WeightSet,
    validation: Option<&[SegmentationSample]>,
    mut on_round: impl FnMut(&RoundRecord, &WeightSet) -> Result<()>,
) -> Result<GlobalState> {
    config.validate()?;
    if clients.len() != config.num_clients {
        return Err(Error::InvalidArgument(format!(
            "config expects {} clients, got {}",
            config.num_clients,
            clients.len()
        )));
    }
    let mut ids = HashSet::new();
    if let Some(c) = clients.iter().find(|c| !ids.insert(c.client_id)) {
        return Err(Error::InvalidArgument(format!("duplicate client id {}", c.client_id)));
    }
    student_model.check_weights(&initial_student)?;
    clients.sort_by_key(|c| c.client_id);

    let mut global = initial_student;
    let mut history = Vec::with_capacity(config.rounds);
    for round in 0..config.rounds {
        let broadcast = container::encode(&global)?;
        let received = container::decode(&broadcast)?;
        let outcomes: Vec<Result<(WeightSet, ClientRoundRecord)>> = clients
            .par_iter_mut()
            .map(|client| {
                let id = client.client_id;
                let wrap = |e: Error| Error::Client {
                    round,
                    client: id,
                    source: Box::new(e),
                };
                let (local, batches) = match config.objective {
                    LocalObjective::Distillation => ukd_learning(client, student_model, &received, config, round),
                    LocalObjective::Supervised => supervised_learning(client, student_model, &received, config, round),
                }
                .map_err(wrap)?;
                let upload = container::encode(&local).map_err(wrap)?;
                let at_server = container::decode(&upload).map_err(wrap)?;
                Ok((
                    at_server,
                    ClientRoundRecord {
                        client_id: id,
                        samples: client.dataset.len(),
                        batches,
                        bytes_up: upload.len(),
                        bytes_down: broadcast.len(),
                    },
                ))
            })
            .collect();
        let mut uploads = Vec::with_capacity(outcomes.len());
        let mut records = Vec::with_capacity(outcomes.len());
        for outcome in outcomes {
            let (w, r) = outcome?;
            uploads.push(w);
            records.push(r);
        }
        let contributions: Vec<(&WeightSet, usize)> =
            uploads.iter().zip(&records).map(|(w, r)| (w, r.samples)).collect();
        global = fedavg_with(&contributions, config.weighting)?;
        let eval = validation
            .filter(|v| !v.is_empty())
            .map(|v| evaluate(student_model, &global, v))
            .transpose()?;
        let record = RoundRecord {
            round,
            clients: records,
            validation_accuracy: eval.map(|e| e.pixel_accuracy),
            validation_mean_iou: eval.map(|e| e.mean_iou),
        };
        log::info!(
            "round {round}: mean L_t {:?}, validation accuracy {:?}",
            record
                .clients
                .iter()
                .filter_map(|c| c.mean_combined())
                .collect::<Vec<_>>(),
            record.validation_accuracy
        );
        on_round(&record, &global)?;
        history.push(record);
    }
    Ok(GlobalState {
        round: config.rounds,
        server_copy: global.clone(),
        global_student: global,
        history,
    })
}

/// Pooled (non-federated) training baseline.
pub fn run_centralized(
    settings: &TrainSettings,
    dataset: &[SegmentationSample],
    model: &Unet,
    initial: WeightSet,
    objective: &Objective<'_>,
) -> Result<(WeightSet, Vec<BatchRecord>)> {
    train(model, initial, dataset, objective, settings)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(values: &[f32]) -> WeightSet {
        WeightSet {
            spec_hash: 7,
            entries: vec![WeightEntry {
                name: "w".into(),
                tensor: Tensor::from_vec(&[values.len()], values.to_vec()).unwrap(),
            }],
        }
    }

    #[test]
    fn fedavg_fixtures() {
        let a = scalar_set(&[1.0, 3.0]);
        let b = scalar_set(&[5.0, 7.0]);
        assert_eq!(fedavg(&[(&a, 2), (&b, 2)]).unwrap(), scalar_set(&[3.0, 5.0]));

        let one = scalar_set(&[1.0]);
        let five = scalar_set(&[5.0]);
        assert_eq!(fedavg(&[(&one, 1), (&five, 3)]).unwrap(), scalar_set(&[4.0]));
        assert_eq!(
            fedavg_with(&[(&one, 1), (&five, 3)], Weighting::Equal).unwrap(),
            scalar_set(&[3.0])
        );
    }

    #[test]
    fn fedavg_errors() {
        assert!(fedavg(&[]).is_err());
        let a = scalar_set(&[1.0]);
        let b = scalar_set(&[1.0, 2.0]);
        assert!(fedavg(&[(&a, 1), (&b, 1)]).is_err());
        assert!(fedavg(&[(&a, 0)]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(FederationConfig::default().validate().is_ok());
        let c = FederationConfig {
            rounds: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let mut c = FederationConfig::default();
        c.distill.alpha = 2.0;
        assert!(c.validate().is_err());
    }
}
