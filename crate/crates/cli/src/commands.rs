//! The four subcommands. Each reads an already-overridden config and writes
//! its artifacts under `config.out_dir`.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use segfed::container;
use segfed::data::{
    generate_synthetic, load_corpus, CorpusManifest, LoadOptions, Presence, SegmentationSample, SyntheticConfig,
};
use segfed::federation::{run_centralized, run_federation_with, ClientState, GlobalState, Teacher};
use segfed::metrics::{compression_report, BatchRecord, ClientRoundRecord, CompressionReport, RoundRecord};
use segfed::partition::{partition_label_skew, partition_quantity_skew, PartitionMode, PartitionResult};
use segfed::report::{
    centralized_rows, emit_report, metrics_rows, parse_metrics_csv, summary_csv, write_plots, SummaryRow,
    METRICS_HEADER,
};
use segfed::train::{evaluate, Objective, TrainSettings};
use segfed::{Unet, WeightSet};

use crate::config::{CorpusSource, ExperimentConfig, Mode};
use crate::error::CliError;

pub const VERSION: &str = env!("SEGFED_VERSION");

pub const PARTITION_FILE: &str = "partition.csv";
pub const TEACHER_FILE: &str = "teacher.bin";
pub const TEACHER_METRICS_FILE: &str = "teacher_metrics.csv";
pub const STUDENT_FILE: &str = "student.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const COMPRESSION_FILE: &str = "compression.json";
pub const RUN_SUMMARY_FILE: &str = "run_summary.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const ROUND_WEIGHTS_DIR: &str = "rounds";

/// Machine-readable record of one `run`, enough to reproduce it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub mode: Mode,
    pub model: String,
    pub dataset: String,
    pub rounds_completed: usize,
    pub validation_accuracy: Option<f64>,
    pub validation_mean_iou: Option<f64>,
    pub wall_time_secs: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutputs {
    pub state: GlobalState,
    pub compression: CompressionReport,
    pub summary: RunSummary,
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(path, e))?;
    text.push('\n');
    write_file(path, text)
}

fn load_source(
    source: &CorpusSource,
    seed: u64,
    prefix: &str,
    size_multiple: usize,
) -> Result<Vec<SegmentationSample>, CliError> {
    match source {
        CorpusSource::Synthetic(s) => {
            if s.height % size_multiple != 0 || s.width % size_multiple != 0 {
                return Err(CliError::Config(format!(
                    "{prefix} corpus: {}x{} is not a multiple of {size_multiple}",
                    s.height, s.width
                )));
            }
            let mut config = SyntheticConfig::new(s.n, s.classes, (s.height, s.width), seed);
            if let Some(sets) = &s.presence {
                config.presence = Presence::Explicit(sets.clone());
            }
            if let Some(p) = s.presence_probability {
                config.presence = Presence::Bernoulli(p);
            }
            if let Some(noise) = s.noise {
                config.noise = noise;
            }
            config.id_prefix = prefix.into();
            Ok(generate_synthetic(&config)?.into_iter().map(|s| s.sample).collect())
        }
        CorpusSource::Directory {
            root,
            resolution,
            strict,
        } => {
            let manifest = CorpusManifest::open(root)?;
            let opts = LoadOptions {
                resolution: *resolution,
                size_multiple,
                strict: *strict,
            };
            Ok(load_corpus(&manifest, &opts)?)
        }
    }
}

fn dataset_name(config: &ExperimentConfig) -> String {
    if let Some(name) = &config.dataset_name {
        return name.replace(',', " ");
    }
    match &config.corpus {
        CorpusSource::Synthetic(_) => "synthetic".into(),
        CorpusSource::Directory { root, .. } => root
            .file_name()
            .map_or_else(|| "corpus".into(), |n| n.to_string_lossy().replace(',', " ")),
    }
}

/// Models and data shared by every subcommand.
struct Prepared {
    teacher_model: Unet,
    student_model: Unet,
    train: Vec<SegmentationSample>,
    validation: Option<Vec<SegmentationSample>>,
}

fn prepare(config: &ExperimentConfig, with_validation: bool) -> Result<Prepared, CliError> {
    config.validate()?;
    let classes = config.num_classes()?;
    let teacher_model =
        Unet::new(config.teacher_spec(classes)).map_err(|e| CliError::Config(format!("teacher.spec: {e}")))?;
    let student_model =
        Unet::new(config.student_spec(classes)).map_err(|e| CliError::Config(format!("student.spec: {e}")))?;
    let multiple = teacher_model
        .spec()
        .size_multiple()
        .max(student_model.spec().size_multiple());
    let seeds = config.seeds();
    let train = load_source(&config.corpus, seeds.corpus, "train", multiple)?;
    if train.is_empty() {
        return Err(CliError::Config("corpus: no samples".into()));
    }
    for s in &train {
        s.check_classes(classes)?;
    }
    let validation = match (&config.validation, with_validation) {
        (Some(v), true) => Some(load_source(v, seeds.validation, "val", multiple)?),
        _ => None,
    };
    Ok(Prepared {
        teacher_model,
        student_model,
        train,
        validation,
    })
}

fn partition(config: &ExperimentConfig, data: &[SegmentationSample]) -> Result<PartitionResult, CliError> {
    let Some(p) = &config.partition else {
        let mut result = PartitionResult::default();
        result
            .assignments
            .insert(1, data.iter().map(|s| s.id.clone()).collect());
        return Ok(result.with_stats(data));
    };
    if let Some(path) = &p.manifest {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let result = PartitionResult::parse_manifest(&text)?;
        let known: HashSet<&str> = data.iter().map(|s| s.id.as_str()).collect();
        if let Some(id) = result
            .assignments
            .values()
            .flatten()
            .find(|id| !known.contains(id.as_str()))
        {
            return Err(CliError::Config(format!(
                "partition.manifest: sample '{id}' is not in the corpus"
            )));
        }
        return Ok(result.with_stats(data));
    }
    Ok(match p.mode {
        PartitionMode::LabelSkew => partition_label_skew(data, &p.spec())?,
        PartitionMode::QuantitySkew => partition_quantity_skew(data, &config.proportions(), config.seeds().partition)?,
    })
}

/// Writes `partition.csv` (records plus class histograms) and one
/// `client_<id>.txt` id list per client.
pub fn cmd_partition(config: &ExperimentConfig) -> Result<PartitionResult, CliError> {
    let prep = prepare(config, false)?;
    let result = partition(config, &prep.train)?;
    create_dir(&config.out_dir)?;
    write_file(&config.out_dir.join(PARTITION_FILE), result.to_manifest())?;
    for (client, ids) in &result.assignments {
        let mut text = ids.join("\n");
        text.push('\n');
        write_file(&config.out_dir.join(format!("client_{client}.txt")), text)?;
    }
    for (client, hist) in &result.stats {
        log::info!(
            "client {client}: {} samples, class presence {hist:?}",
            result.assignments[client].len()
        );
    }
    if !result.unassigned.is_empty() {
        log::warn!(
            "{} samples match no client and stay unassigned",
            result.unassigned.len()
        );
    }
    Ok(result)
}

fn pretrain(config: &ExperimentConfig, prep: &Prepared) -> Result<(WeightSet, Vec<BatchRecord>), CliError> {
    let p = config
        .teacher
        .pretrain
        .as_ref()
        .ok_or_else(|| CliError::Config("teacher.pretrain: missing".into()))?;
    let seeds = config.seeds();
    let own;
    let data = match &p.corpus {
        Some(source) => {
            own = load_source(
                source,
                seeds.pretrain_corpus,
                "pre",
                prep.teacher_model.spec().size_multiple(),
            )?;
            &own
        }
        None => &prep.train,
    };
    if data.is_empty() {
        return Err(CliError::Config("teacher.pretrain.corpus: no samples".into()));
    }
    let model = &prep.teacher_model;
    let settings = TrainSettings::new(p.epochs, p.batch_size, p.step_size, seeds.pretrain);
    let (weights, trace) = run_centralized(
        &settings,
        data,
        model,
        model.init(seeds.teacher_init),
        &Objective::Supervised,
    )?;
    let path = config.out_dir.join(TEACHER_FILE);
    create_dir(&config.out_dir)?;
    container::save(&weights, &path)?;
    write_file(
        &config.out_dir.join(TEACHER_METRICS_FILE),
        format!("{METRICS_HEADER}\n{}", centralized_rows(&trace)),
    )?;
    log::info!("pretrained teacher written to {}", path.display());
    Ok((weights, trace))
}

/// Centralized teacher training on the pretraining corpus; writes
/// `teacher.bin` and `teacher_metrics.csv`.
pub fn cmd_pretrain_teacher(config: &ExperimentConfig) -> Result<(WeightSet, Vec<BatchRecord>), CliError> {
    let prep = prepare(config, false)?;
    pretrain(config, &prep)
}

fn resolve_teacher(config: &ExperimentConfig, prep: &Prepared) -> Result<Teacher, CliError> {
    let weights = match &config.teacher.weights {
        Some(path) => container::load(path)?,
        None => pretrain(config, prep)?.0,
    };
    Teacher::new(prep.teacher_model.clone(), weights)
        .map_err(|e| CliError::Config(format!("teacher.weights: do not match teacher.spec: {e}")))
}

fn io_error(path: &Path, e: std::io::Error) -> segfed::Error {
    segfed::Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Appends one round to the metrics CSV in a single write, so an
/// interrupted run leaves only whole rounds behind.
fn append_round(path: &Path, record: &RoundRecord) -> segfed::Result<()> {
    let mut f = fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| io_error(path, e))?;
    f.write_all(metrics_rows(record).as_bytes())
        .map_err(|e| io_error(path, e))?;
    f.sync_data().map_err(|e| io_error(path, e))
}

fn run_federated(config: &ExperimentConfig, prep: &Prepared) -> Result<GlobalState, CliError> {
    let fed = config.federation_config();
    let parts = partition(config, &prep.train)?;
    if parts.assignments.len() != fed.num_clients {
        return Err(CliError::Config(format!(
            "federation.num_clients: {} but the partition has {} clients",
            fed.num_clients,
            parts.assignments.len()
        )));
    }
    if !parts.unassigned.is_empty() {
        log::warn!("{} samples match no client and are left out", parts.unassigned.len());
    }
    let teacher = match config.mode {
        Mode::FedUkd => Some(resolve_teacher(config, prep)?),
        _ => None,
    };
    let by_id: HashMap<&str, &SegmentationSample> = prep.train.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut clients: Vec<ClientState> = parts
        .assignments
        .iter()
        .map(|(&id, ids)| {
            let data = ids.iter().map(|i| by_id[i.as_str()].clone()).collect();
            ClientState::new(id, data, teacher.clone())
        })
        .collect();

    let metrics = config.out_dir.join(METRICS_FILE);
    let rounds_dir = config.out_dir.join(ROUND_WEIGHTS_DIR);
    create_dir(&rounds_dir)?;
    write_file(&metrics, format!("{METRICS_HEADER}\n"))?;
    let model = &prep.student_model;
    let state = run_federation_with(
        &fed,
        &mut clients,
        model,
        model.init(config.seeds().student_init),
        prep.validation.as_deref(),
        |record, global| {
            append_round(&metrics, record)?;
            container::save(global, &rounds_dir.join(format!("round_{:03}.bin", record.round)))
        },
    )?;
    Ok(state)
}

fn run_pooled(config: &ExperimentConfig, prep: &Prepared) -> Result<GlobalState, CliError> {
    if config.partition.is_some() {
        log::warn!("centralized mode ignores the partition section");
    }
    let f = &config.federation;
    let settings = TrainSettings::new(
        f.rounds * f.local_epochs,
        f.batch_size,
        f.step_size,
        config.seeds().training,
    );
    let model = &prep.student_model;
    let (weights, trace) = run_centralized(
        &settings,
        &prep.train,
        model,
        model.init(config.seeds().student_init),
        &Objective::Supervised,
    )?;
    let eval = prep
        .validation
        .as_deref()
        .filter(|v| !v.is_empty())
        .map(|v| evaluate(model, &weights, v))
        .transpose()?;
    Ok(GlobalState {
        round: 1,
        server_copy: weights.clone(),
        global_student: weights,
        history: vec![RoundRecord {
            round: 0,
            clients: vec![ClientRoundRecord {
                client_id: 0,
                samples: prep.train.len(),
                batches: trace,
                bytes_up: 0,
                bytes_down: 0,
            }],
            validation_accuracy: eval.map(|e| e.pixel_accuracy),
            validation_mean_iou: eval.map(|e| e.mean_iou),
        }],
    })
}

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Centralized => "unet",
        Mode::FedUnet => "fed_unet",
        Mode::FedUkd => "fed_ukd",
    }
}

/// Runs the configured mode end to end. Writes `student.bin`,
/// `metrics.csv` (appended round by round), `rounds/round_<r>.bin`,
/// `compression.json`, `summary.csv`, loss plots, `config.toml` and
/// `run_summary.json`.
pub fn cmd_run(config: &ExperimentConfig) -> Result<RunOutputs, CliError> {
    let start = Instant::now();
    let prep = prepare(config, true)?;
    create_dir(&config.out_dir)?;
    write_file(&config.out_dir.join(CONFIG_FILE), config.to_toml())?;
    let state = match config.mode {
        Mode::Centralized => run_pooled(config, &prep)?,
        Mode::FedUnet | Mode::FedUkd => run_federated(config, &prep)?,
    };
    container::save(&state.global_student, &config.out_dir.join(STUDENT_FILE))?;

    // Parameter and byte counts do not depend on weight values.
    let teacher_shape: WeightSet = prep.teacher_model.zeros();
    let compression = compression_report(&teacher_shape, &state.global_student)?;
    write_json(&config.out_dir.join(COMPRESSION_FILE), &compression)?;

    let model = mode_name(config.mode);
    let dataset = dataset_name(config);
    emit_report(
        &state,
        &SummaryRow::new(model, config.mode.is_federated(), &dataset, &compression),
        &config.out_dir,
    )?;
    let last = state.history.last();
    let summary = RunSummary {
        version: VERSION.into(),
        config_hash: config.hash(),
        seed: config.seed,
        mode: config.mode,
        model: model.into(),
        dataset,
        rounds_completed: state.history.len(),
        validation_accuracy: last.and_then(|r| r.validation_accuracy),
        validation_mean_iou: last.and_then(|r| r.validation_mean_iou),
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    write_json(&config.out_dir.join(RUN_SUMMARY_FILE), &summary)?;
    log::info!(
        "run finished in {:.1}s, artifacts in {}",
        summary.wall_time_secs,
        config.out_dir.display()
    );
    Ok(RunOutputs {
        state,
        compression,
        summary,
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::io(path, e))
}

/// Regenerates `summary.csv` and the loss plots of a finished run from its
/// `metrics.csv`, `compression.json` and `run_summary.json`.
pub fn cmd_report(out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let metrics_path = out_dir.join(METRICS_FILE);
    let text = fs::read_to_string(&metrics_path).map_err(|e| CliError::io(&metrics_path, e))?;
    let history = parse_metrics_csv(&text)?;
    if history.is_empty() {
        return Err(CliError::io(&metrics_path, "no rounds recorded"));
    }
    let compression: CompressionReport = read_json(&out_dir.join(COMPRESSION_FILE))?;
    let run: RunSummary = read_json(&out_dir.join(RUN_SUMMARY_FILE))?;
    let mut row = SummaryRow::new(&run.model, run.mode.is_federated(), &run.dataset, &compression);
    row.accuracy = run.validation_accuracy;
    row.mean_iou = run.validation_mean_iou;
    let summary_path = out_dir.join("summary.csv");
    write_file(&summary_path, summary_csv(&[row]))?;
    let mut files = vec![summary_path];
    files.extend(write_plots(&history, out_dir)?);
    Ok(files)
}
