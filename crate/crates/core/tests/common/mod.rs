#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segfed::data::{generate_synthetic, Presence, SegmentationSample, SyntheticConfig};
use segfed::federation::{run_federation_with, ClientState, FederationConfig, GlobalState, Teacher};
use segfed::loss::DistillationConfig;
use segfed::model::WeightEntry;
use segfed::partition::{partition_label_skew, PartitionResult, PartitionSpec};
use segfed::train::{evaluate, train, Evaluation, Objective, TrainSettings};
use segfed::{ModelSpec, Tensor, Unet, WeightSet};

pub fn set(classes: &[u8]) -> BTreeSet<u8> {
    classes.iter().copied().collect()
}

pub fn corpus(n: usize, size: usize, seed: u64, prefix: &str, presence: Vec<BTreeSet<u8>>) -> Vec<SegmentationSample> {
    let mut config = SyntheticConfig::new(n, 3, (size, size), seed);
    config.presence = Presence::Explicit(presence);
    config.id_prefix = prefix.into();
    generate_synthetic(&config)
        .expect("valid synthetic config")
        .into_iter()
        .map(|s| s.sample)
        .collect()
}

/// Closed-form parameter count, layer by layer, for a same-padded UNet with
/// skip concatenation and a 1x1 head.
pub fn parameter_oracle(spec: &ModelSpec) -> usize {
    let conv = |ci: usize, co: usize, k: usize| ci * co * k * k + co;
    let k = spec.kernel_size;
    let mut total = 0;
    let mut channels = spec.in_channels;
    for &f in &spec.encoder_filters {
        total += conv(channels, f, k) + conv(f, f, k);
        channels = f;
    }
    total += conv(channels, spec.bottleneck_filters, k) + conv(spec.bottleneck_filters, spec.bottleneck_filters, k);
    channels = spec.bottleneck_filters;
    for (j, &f) in spec.decoder_filters.iter().enumerate() {
        let skip = spec.encoder_filters[spec.encoder_filters.len() - 1 - j];
        total += conv(channels, f, spec.upconv_kernel) + conv(f + skip, f, k) + conv(f, f, k);
        channels = f;
    }
    total + conv(channels, spec.num_classes, 1)
}

pub fn student_spec(encoder: &[usize], bottleneck: usize, classes: usize) -> ModelSpec {
    let mut decoder = encoder.to_vec();
    decoder.reverse();
    ModelSpec {
        encoder_filters: encoder.to_vec(),
        bottleneck_filters: bottleneck,
        decoder_filters: decoder,
        ..ModelSpec::default_student(classes)
    }
}

pub fn random_weights(shapes: &[(&str, Vec<usize>)], rng: &mut ChaCha8Rng) -> WeightSet {
    WeightSet {
        spec_hash: 42,
        entries: shapes
            .iter()
            .map(|(name, shape)| {
                let n = shape.iter().product();
                WeightEntry {
                    name: (*name).into(),
                    tensor: Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-4.0f32..4.0)).collect()).unwrap(),
                }
            })
            .collect(),
    }
}

pub fn clients_from(
    data: &[SegmentationSample],
    partition: &PartitionResult,
    teacher: Option<&Teacher>,
) -> Vec<ClientState> {
    partition
        .assignments
        .iter()
        .map(|(&id, ids)| {
            let wanted: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
            let local = data
                .iter()
                .filter(|s| wanted.contains(s.id.as_str()))
                .cloned()
                .collect();
            ClientState::new(id, local, teacher.cloned())
        })
        .collect()
}

/// The end-to-end setting: three classes at 64x64, two foreground classes
/// kept apart by a three-client label skew, a small teacher pretrained on a
/// separate mixed corpus, and the default student.
pub struct Experiment {
    pub train: Vec<SegmentationSample>,
    pub validation: Vec<SegmentationSample>,
    pub teacher: Teacher,
    pub teacher_eval: Evaluation,
    pub partition: PartitionResult,
    pub student: Unet,
    pub config: FederationConfig,
}

pub const EXPERIMENT_STEP: f64 = 0.03;
pub const EXPERIMENT_BATCH: usize = 4;

pub fn teacher_spec() -> ModelSpec {
    student_spec(&[24, 48], 96, 3)
}

pub fn experiment(seed: u64) -> Experiment {
    let train_set = corpus(90, 64, seed + 11, "tr", vec![set(&[1]), set(&[2]), set(&[])]);
    let validation = corpus(20, 64, seed + 12, "va", vec![set(&[1, 2]), set(&[1]), set(&[2])]);
    let pretrain = corpus(
        60,
        64,
        seed + 13,
        "pt",
        vec![set(&[1, 2]), set(&[1]), set(&[2]), set(&[])],
    );
    let teacher_model = Unet::new(teacher_spec()).unwrap();
    let (teacher_weights, _) = train(
        &teacher_model,
        teacher_model.init(seed + 1),
        &pretrain,
        &Objective::Supervised,
        &TrainSettings::new(10, EXPERIMENT_BATCH, EXPERIMENT_STEP, seed + 1),
    )
    .unwrap();
    let teacher_eval = evaluate(&teacher_model, &teacher_weights, &validation).unwrap();
    let teacher = Teacher::new(teacher_model, teacher_weights).unwrap();
    let partition = partition_label_skew(&train_set, &PartitionSpec::exclusive_pair(1, 2)).unwrap();
    let config = FederationConfig {
        num_clients: 3,
        rounds: 10,
        local_epochs: 2,
        distill: DistillationConfig {
            temperature: 5.0,
            alpha: 0.3,
        },
        step_size: EXPERIMENT_STEP,
        batch_size: EXPERIMENT_BATCH,
        seed: seed + 5,
        ..Default::default()
    };
    Experiment {
        train: train_set,
        validation,
        teacher,
        teacher_eval,
        partition,
        student: Unet::new(ModelSpec::default_student(3)).unwrap(),
        config,
    }
}

impl Experiment {
    pub fn initial_student(&self) -> WeightSet {
        self.student.init(self.config.seed + 1)
    }

    pub fn federate(&self) -> (GlobalState, Vec<ClientState>) {
        let mut clients = clients_from(&self.train, &self.partition, Some(&self.teacher));
        let state = run_federation_with(
            &self.config,
            &mut clients,
            &self.student,
            self.initial_student(),
            Some(&self.validation),
            |_, _| Ok(()),
        )
        .unwrap();
        (state, clients)
    }

    /// Supervised training of the student on the pooled corpus for
    /// `steps` optimizer steps.
    pub fn centralized(&self, steps: usize) -> Evaluation {
        let mut settings = TrainSettings::new(usize::MAX, EXPERIMENT_BATCH, EXPERIMENT_STEP, self.config.seed);
        settings.max_steps = Some(steps);
        let (weights, _) = train(
            &self.student,
            self.initial_student(),
            &self.train,
            &Objective::Supervised,
            &settings,
        )
        .unwrap();
        evaluate(&self.student, &weights, &self.validation).unwrap()
    }
}

pub fn total_steps(state: &GlobalState) -> usize {
    state
        .history
        .iter()
        .flat_map(|r| &r.clients)
        .map(|c| c.batches.len())
        .sum()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
