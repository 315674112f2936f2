use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use segfed::container;
use segfed::data::{generate_synthetic, Presence, SyntheticConfig};
use segfed::partition::classes_present;
use segfed::{ModelSpec, Unet};
use segfed_cli::commands::RunSummary;
use segfed_cli::config::Seeds;
use segfed_cli::ExperimentConfig;

const BASE: &str = r#"
seed = 11
mode = "fed_ukd"
out_dir = "out"

[corpus]
source = "synthetic"
n = 24
classes = 3
height = 16
width = 16
presence = [[1], [2], []]

[validation]
source = "synthetic"
n = 6
classes = 3
height = 16
width = 16
presence = [[1, 2]]

[partition]
mode = "label_skew"
clients = [
    { id = 1, required_present = [1], required_absent = [2] },
    { id = 2, required_present = [2], required_absent = [1] },
    { id = 3, required_absent = [1, 2] },
]

[teacher.spec]
in_channels = 3
num_classes = 3
encoder_filters = [8, 16]
bottleneck_filters = 16
decoder_filters = [16, 8]
kernel_size = 3

[teacher.pretrain]
epochs = 2
step_size = 0.03
batch_size = 4

[student.spec]
in_channels = 3
num_classes = 3
encoder_filters = [4, 8]
bottleneck_filters = 8
decoder_filters = [8, 4]
kernel_size = 3

[federation]
rounds = 2
local_epochs = 1
step_size = 0.03
batch_size = 4
alpha = 0.3
temperature = 5.0
"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("experiment.toml"), config).unwrap();
        Self { dir }
    }

    fn config(&self) -> PathBuf {
        self.dir.path().join("experiment.toml")
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn segfed(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_segfed"))
            .args(args)
            .arg("--config")
            .arg(self.config())
            .env("RUST_LOG", "info")
            .output()
            .unwrap()
    }
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read(path: impl AsRef<Path>) -> String {
    fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

fn student_spec() -> ModelSpec {
    ModelSpec {
        in_channels: 3,
        num_classes: 3,
        encoder_filters: vec![4, 8],
        bottleneck_filters: 8,
        decoder_filters: vec![8, 4],
        kernel_size: 3,
        upconv_kernel: 2,
    }
}

fn teacher_spec() -> ModelSpec {
    ModelSpec {
        encoder_filters: vec![8, 16],
        bottleneck_filters: 16,
        decoder_filters: vec![16, 8],
        ..student_spec()
    }
}

#[test]
fn partition_manifests_satisfy_their_constraints() {
    let ws = Workspace::new(BASE);
    ok(&ws.segfed(&["partition"]));
    let first = read(ws.out().join("partition.csv"));

    let mut synthetic = SyntheticConfig::new(24, 3, (16, 16), 11);
    synthetic.presence = Presence::Explicit(vec![[1].into(), [2].into(), BTreeSet::new()]);
    synthetic.id_prefix = "train".into();
    let present: BTreeMap<String, BTreeSet<u8>> = generate_synthetic(&synthetic)
        .unwrap()
        .into_iter()
        .map(|s| (s.sample.id.clone(), classes_present(&s.sample)))
        .collect();

    let config = ExperimentConfig::parse(BASE).unwrap();
    let mut total = 0;
    for c in &config.partition.unwrap().clients {
        let ids: Vec<String> = read(ws.out().join(format!("client_{}.txt", c.id)))
            .lines()
            .map(str::to_owned)
            .collect();
        assert_eq!(ids.len(), 8, "client {}", c.id);
        for id in &ids {
            assert!(
                c.accepts(&present[id]),
                "client {} got {id} with {:?}",
                c.id,
                present[id]
            );
        }
        total += ids.len();
    }
    assert_eq!(total, 24);

    ok(&ws.segfed(&["partition"]));
    assert_eq!(read(ws.out().join("partition.csv")), first);
}

#[test]
fn quantity_skew_splits_98_samples_65_22_11() {
    let label_skew = &BASE[BASE.find("[partition]").unwrap()..BASE.find("[teacher.spec]").unwrap()];
    let config = BASE.replace("n = 24", "n = 98").replace(
        label_skew,
        "[partition]\nmode = \"quantity_skew\"\nproportions = [0.663265306122449, 0.22448979591836735, 0.11224489795918367]\n\n",
    );
    let ws = Workspace::new(&config);
    ok(&ws.segfed(&["partition"]));
    let sizes: Vec<usize> = (1..=3)
        .map(|c| read(ws.out().join(format!("client_{c}.txt"))).lines().count())
        .collect();
    assert_eq!(sizes, [65, 22, 11]);
}

#[test]
fn pretraining_saves_loadable_weights_and_makes_progress() {
    let ws = Workspace::new(BASE);
    ok(&ws.segfed(&["pretrain-teacher", "--epochs", "2"]));
    let weights = container::load(&ws.out().join("teacher.bin")).unwrap();
    Unet::new(teacher_spec()).unwrap().check_weights(&weights).unwrap();

    let metrics = read(ws.out().join("teacher_metrics.csv"));
    let losses: Vec<(usize, f64)> = metrics
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[2].parse().unwrap(), f[6].parse().unwrap())
        })
        .collect();
    assert_eq!(losses.len(), 2 * 24 / 4);
    let first = losses[0].1;
    let last_epoch: Vec<f64> = losses.iter().filter(|(e, _)| *e == 1).map(|(_, l)| *l).collect();
    let mean = last_epoch.iter().sum::<f64>() / last_epoch.len() as f64;
    assert!(mean < first, "epoch 2 mean loss {mean} vs first step {first}");
}

#[test]
fn zero_pretraining_epochs_keep_the_initialization() {
    let ws = Workspace::new(BASE);
    ok(&ws.segfed(&["pretrain-teacher", "--epochs", "0"]));
    let weights = container::load(&ws.out().join("teacher.bin")).unwrap();
    let init = Unet::new(teacher_spec())
        .unwrap()
        .init(Seeds::from_seed(11).teacher_init);
    assert_eq!(weights, init);
}

#[test]
fn fed_ukd_run_writes_every_artifact_and_repeats_byte_for_byte() {
    let a = Workspace::new(BASE);
    let out = a.segfed(&["run"]);
    ok(&out);
    let dir = a.out();
    for f in [
        "student.bin",
        "metrics.csv",
        "summary.csv",
        "compression.json",
        "run_summary.json",
        "config.toml",
        "teacher.bin",
    ] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    for r in 0..2 {
        assert!(dir.join(format!("rounds/round_{r:03}.bin")).is_file());
    }
    for c in 1..=3 {
        assert!(dir.join(format!("loss_client_{c}.png")).is_file());
    }

    let metrics = read(dir.join("metrics.csv"));
    // 2 rounds, 3 clients of 8 samples, 2 batches each
    assert_eq!(metrics.lines().count(), 1 + 2 * 3 * 2);
    let student = container::load(&dir.join("student.bin")).unwrap();
    let bytes = container::encoded_len(&student).to_string();
    for line in metrics.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!((f[8], f[9]), (bytes.as_str(), bytes.as_str()));
    }
    assert_eq!(container::load(&dir.join("rounds/round_001.bin")).unwrap(), student);

    let summary: RunSummary = serde_json::from_str(&read(dir.join("run_summary.json"))).unwrap();
    assert_eq!(summary.seed, 11);
    assert_eq!(summary.rounds_completed, 2);
    assert_eq!(summary.config_hash.len(), 64);
    assert!(summary.validation_accuracy.is_some());
    assert!(!summary.version.is_empty());

    let saved = ExperimentConfig::parse(&read(dir.join("config.toml"))).unwrap();
    assert_eq!(saved.hash(), summary.config_hash);

    let b = Workspace::new(BASE);
    ok(&b.segfed(&["run"]));
    assert_eq!(read(b.out().join("metrics.csv")), metrics);
    assert_eq!(
        fs::read(b.out().join("student.bin")).unwrap(),
        fs::read(dir.join("student.bin")).unwrap()
    );
}

#[test]
fn report_rebuilds_the_summary_of_a_run() {
    let ws = Workspace::new(BASE);
    ok(&ws.segfed(&["run", "--mode", "fed_unet", "--rounds", "1"]));
    let summary = read(ws.out().join("summary.csv"));
    assert!(summary.lines().nth(1).unwrap().starts_with("fed_unet,yes,synthetic,"));
    assert!(!ws.out().join("teacher.bin").exists());
    fs::remove_file(ws.out().join("summary.csv")).unwrap();
    fs::remove_file(ws.out().join("loss_client_1.png")).unwrap();
    ok(&ws.segfed(&["report"]));
    assert_eq!(read(ws.out().join("summary.csv")), summary);
    assert!(ws.out().join("loss_client_1.png").is_file());
}

#[test]
fn centralized_mode_warns_about_the_partition() {
    let ws = Workspace::new(BASE);
    let out = ws.segfed(&[
        "run",
        "--mode",
        "centralized",
        "--out",
        ws.dir.path().join("central").to_str().unwrap(),
    ]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("ignores the partition"));
    let summary = read(ws.dir.path().join("central/summary.csv"));
    assert!(summary.lines().nth(1).unwrap().starts_with("unet,no,"));
    let metrics = read(ws.dir.path().join("central/metrics.csv"));
    // R·E = 2 epochs over 24 samples in batches of 4
    assert_eq!(metrics.lines().count(), 1 + 12);
}

#[test]
fn config_errors_exit_with_status_two() {
    let ws = Workspace::new(&BASE.replace("rounds = 2", "rounds = 2\nrouns = 3"));
    let out = ws.segfed(&["run"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rouns"));

    let ws = Workspace::new(&BASE.replacen("seed = 11", "", 1));
    assert_eq!(ws.segfed(&["run"]).status.code(), Some(2));

    let ws = Workspace::new(BASE);
    let out = ws.segfed(&["run", "--clients", "2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("federation.num_clients"));

    let ws = Workspace::new(&BASE.replace("[teacher.pretrain]", "[teacher.unused]"));
    assert_eq!(ws.segfed(&["run"]).status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_with_status_three_and_name_the_client() {
    // no sample carries class 2, so client 2 ends up empty
    let ws = Workspace::new(&BASE.replace("presence = [[1], [2], []]", "presence = [[1], []]"));
    let out = ws.segfed(&["run", "--mode", "fed_unet"]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("round 0, client 2"), "{stderr}");
    let metrics = read(ws.out().join("metrics.csv"));
    assert_eq!(metrics.lines().count(), 1, "only the header survives");
}

#[test]
fn saved_teacher_weights_are_reused() {
    let ws = Workspace::new(BASE);
    ok(&ws.segfed(&["pretrain-teacher"]));
    let teacher = ws.dir.path().join("teacher.bin");
    fs::rename(ws.out().join("teacher.bin"), &teacher).unwrap();
    let config = BASE.replace("[teacher.pretrain]\nepochs = 2\nstep_size = 0.03\nbatch_size = 4\n", "");
    let config = config.replace(
        "[teacher.spec]",
        "[teacher]\nweights = \"teacher.bin\"\n\n[teacher.spec]",
    );
    fs::write(ws.config(), config).unwrap();
    ok(&ws.segfed(&["run", "--rounds", "1"]));
    assert!(!ws.out().join("teacher.bin").exists());

    fs::write(&teacher, b"not a container").unwrap();
    assert_eq!(ws.segfed(&["run", "--rounds", "1"]).status.code(), Some(3));
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let config = ExperimentConfig::load(&path).unwrap();
            config.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen > 0);
}
