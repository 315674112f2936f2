mod common;

use common::*;
use rand::Rng;
use segfed::container;
use segfed::federation::{run_federation, FederationConfig, GlobalState, Teacher};
use segfed::loss::IGNORE_INDEX;
use segfed::metrics::{compression_report, pixel_accuracy};
use segfed::partition::{partition_label_skew, PartitionSpec};
use segfed::report::{emit_report, loss_curves, parse_metrics_csv, SummaryRow, SUMMARY_HEADER};
use segfed::{ModelSpec, Unet};

#[test]
fn pixel_accuracy_matches_a_counting_oracle() {
    let mut rng = rng(30);
    for _ in 0..100 {
        let n = rng.gen_range(1..400);
        let classes = rng.gen_range(2..8u8);
        let mask: Vec<u8> = (0..n)
            .map(|_| {
                if rng.gen_bool(0.1) {
                    IGNORE_INDEX
                } else {
                    rng.gen_range(0..classes)
                }
            })
            .collect();
        let pred: Vec<u8> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let (mut hits, mut counted) = (0, 0);
        for i in 0..n {
            if mask[i] != IGNORE_INDEX {
                counted += 1;
                if pred[i] == mask[i] {
                    hits += 1;
                }
            }
        }
        match pixel_accuracy(&pred, &mask) {
            Ok(v) => assert_eq!(v, hits as f64 / counted as f64),
            Err(_) => assert_eq!(counted, 0),
        }
    }
}

#[test]
fn compression_ratios_come_from_exact_sizes() {
    let teacher = Unet::new(teacher_spec()).unwrap().init(0);
    let student = Unet::new(ModelSpec::default_student(3)).unwrap().init(0);
    let r = compression_report(&teacher, &student).unwrap();
    assert_eq!(r.teacher_bytes, container::encode(&teacher).unwrap().len());
    assert_eq!(r.student_bytes, container::encode(&student).unwrap().len());
    assert_eq!(r.space_ratio, r.teacher_bytes as f64 / r.student_bytes as f64);
    assert_eq!(r.parameter_ratio, r.teacher_params as f64 / r.student_params as f64);
}

fn tiny_run(rounds: usize, local_epochs: usize) -> (GlobalState, Teacher) {
    let data = corpus(12, 16, 31, "r", vec![set(&[1]), set(&[2]), set(&[])]);
    let partition = partition_label_skew(&data, &PartitionSpec::exclusive_pair(1, 2)).unwrap();
    let teacher_model = Unet::new(teacher_spec()).unwrap();
    let teacher = Teacher::new(teacher_model.clone(), teacher_model.init(31)).unwrap();
    let mut clients = clients_from(&data, &partition, Some(&teacher));
    let student = Unet::new(ModelSpec::default_student(3)).unwrap();
    let config = FederationConfig {
        rounds,
        local_epochs,
        batch_size: 4,
        step_size: 0.03,
        seed: 31,
        ..Default::default()
    };
    let init = student.init(32);
    (run_federation(&config, &mut clients, &student, init).unwrap(), teacher)
}

#[test]
fn one_round_gives_one_row_per_client() {
    let (state, teacher) = tiny_run(1, 1);
    let compression = compression_report(&teacher.weights, &state.global_student).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = emit_report(
        &state,
        &SummaryRow::new("student", true, "synthetic", &compression),
        dir.path(),
    )
    .unwrap();
    let csv = std::fs::read_to_string(&files.metrics_csv).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
    assert_eq!(parse_metrics_csv(&csv).unwrap()[0].clients.len(), 3);

    let summary = std::fs::read_to_string(&files.summary_csv).unwrap();
    let mut lines = summary.lines();
    assert_eq!(lines.next(), Some(SUMMARY_HEADER));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[4].parse::<f64>().unwrap(), compression.parameter_ratio);
    assert_eq!(row[5].parse::<f64>().unwrap(), compression.space_ratio);
    assert_eq!(files.plots.len(), 3);
    for p in &files.plots {
        assert_eq!(image::open(p).unwrap().width(), 640);
    }
}

#[test]
fn curves_span_every_cumulative_epoch() {
    let (state, _) = tiny_run(3, 2);
    let curves = loss_curves(&state.history);
    assert_eq!(curves.len(), 3);
    for points in curves.values() {
        assert_eq!(points.len(), 3 * 2);
        assert!(points.windows(2).all(|w| w[1].epoch == w[0].epoch + 1));
    }
}

#[test]
fn unwritable_output_is_an_error() {
    let (state, teacher) = tiny_run(1, 1);
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let compression = compression_report(&teacher.weights, &state.global_student).unwrap();
    let row = SummaryRow::new("student", true, "synthetic", &compression);
    assert!(emit_report(&state, &row, &blocker.join("out")).is_err());
    let empty = GlobalState {
        history: Vec::new(),
        ..state
    };
    assert!(emit_report(&empty, &row, dir.path()).is_err());
}
