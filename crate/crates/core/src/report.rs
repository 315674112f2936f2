//! Run artifacts: the per-batch metrics CSV, the results summary table, and
//! per-client loss-curve images over cumulative epochs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::federation::GlobalState;
use crate::metrics::{BatchRecord, ClientRoundRecord, CompressionReport, RoundRecord};
use crate::partition::ClientId;

pub const METRICS_HEADER: &str = "round,client,epoch,batch,L_P,L_C,L_t,pixel_accuracy,bytes_up,bytes_down";
pub const SUMMARY_HEADER: &str = "model,federated,dataset,accuracy,parameter_optimization,space_optimization,mean_iou";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// CSV rows (no header) for one round; one row per optimizer step.
/// `bytes_up`/`bytes_down` repeat the client's transfer for that round.
pub fn metrics_rows(record: &RoundRecord) -> String {
    let mut out = String::new();
    for c in &record.clients {
        for b in &c.batches {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                record.round,
                c.client_id,
                b.epoch,
                b.batch,
                opt(b.distillation),
                b.criterion,
                b.combined,
                opt(b.pixel_accuracy),
                c.bytes_up,
                c.bytes_down
            );
        }
    }
    out
}

/// Rows for a non-federated run: round 0, client 0, no transfers.
pub fn centralized_rows(trace: &[BatchRecord]) -> String {
    metrics_rows(&RoundRecord {
        round: 0,
        clients: vec![ClientRoundRecord {
            client_id: 0,
            samples: 0,
            batches: trace.to_vec(),
            bytes_up: 0,
            bytes_down: 0,
        }],
        validation_accuracy: None,
        validation_mean_iou: None,
    })
}

pub fn metrics_csv(history: &[RoundRecord]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in history {
        out.push_str(&metrics_rows(r));
    }
    out
}

/// Parses a metrics CSV back into round records. Sample counts are not part
/// of the CSV and come back as 0.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<RoundRecord>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(METRICS_HEADER) {
        return Err(Error::Metrics("unexpected metrics CSV header".into()));
    }
    let mut rounds: BTreeMap<usize, BTreeMap<ClientId, ClientRoundRecord>> = BTreeMap::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || Error::Metrics(format!("metrics CSV line {}: malformed", n + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(bad());
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad());
        let float = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let maybe = |s: &str| if s.is_empty() { Ok(None) } else { float(s).map(Some) };
        let client = f[1].parse::<ClientId>().map_err(|_| bad())?;
        let entry = rounds
            .entry(int(f[0])?)
            .or_default()
            .entry(client)
            .or_insert_with(|| ClientRoundRecord {
                client_id: client,
                samples: 0,
                batches: Vec::new(),
                bytes_up: 0,
                bytes_down: 0,
            });
        entry.bytes_up = int(f[8])?;
        entry.bytes_down = int(f[9])?;
        entry.batches.push(BatchRecord {
            epoch: int(f[2])?,
            batch: int(f[3])?,
            distillation: maybe(f[4])?,
            criterion: float(f[5])?,
            combined: float(f[6])?,
            pixel_accuracy: maybe(f[7])?,
        });
    }
    Ok(rounds
        .into_iter()
        .map(|(round, clients)| RoundRecord {
            round,
            clients: clients.into_values().collect(),
            validation_accuracy: None,
            validation_mean_iou: None,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub model: String,
    pub federated: bool,
    pub dataset: String,
    pub accuracy: Option<f64>,
    pub parameter_optimization: f64,
    pub space_optimization: f64,
    pub mean_iou: Option<f64>,
}

impl SummaryRow {
    pub fn new(model: &str, federated: bool, dataset: &str, compression: &CompressionReport) -> Self {
        Self {
            model: model.into(),
            federated,
            dataset: dataset.into(),
            accuracy: None,
            parameter_optimization: compression.parameter_ratio,
            space_optimization: compression.space_ratio,
            mean_iou: None,
        }
    }
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.model,
            if r.federated { "yes" } else { "no" },
            r.dataset,
            opt(r.accuracy),
            r.parameter_optimization,
            r.space_optimization,
            opt(r.mean_iou)
        );
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochPoint {
    pub epoch: usize,
    pub distillation: Option<f64>,
    pub criterion: f64,
    pub combined: f64,
}

/// Per-client mean losses per cumulative epoch.
pub fn loss_curves(history: &[RoundRecord]) -> BTreeMap<ClientId, Vec<EpochPoint>> {
    let mut acc: BTreeMap<ClientId, BTreeMap<usize, Vec<&BatchRecord>>> = BTreeMap::new();
    for r in history {
        for c in &r.clients {
            for b in &c.batches {
                acc.entry(c.client_id).or_default().entry(b.epoch).or_default().push(b);
            }
        }
    }
    acc.into_iter()
        .map(|(client, epochs)| {
            let points = epochs
                .into_iter()
                .map(|(epoch, batches)| {
                    let n = batches.len() as f64;
                    let lp: Vec<f64> = batches.iter().filter_map(|b| b.distillation).collect();
                    EpochPoint {
                        epoch,
                        distillation: (!lp.is_empty()).then(|| lp.iter().sum::<f64>() / lp.len() as f64),
                        criterion: batches.iter().map(|b| b.criterion).sum::<f64>() / n,
                        combined: batches.iter().map(|b| b.combined).sum::<f64>() / n,
                    }
                })
                .collect();
            (client, points)
        })
        .collect()
}

const PLOT_W: u32 = 640;
const PLOT_H: u32 = 360;
const MARGIN: u32 = 30;

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Line plot of L_t (black), L_C (blue) and L_P (red) against epoch, with
/// the y axis running from 0 to the largest plotted value.
pub fn render_curve(points: &[EpochPoint]) -> RgbImage {
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    let axis = Rgb([120, 120, 120]);
    let (left, bottom) = (MARGIN as i64, (PLOT_H - MARGIN) as i64);
    let (right, top) = ((PLOT_W - MARGIN) as i64, MARGIN as i64);
    draw_line(&mut img, (left, bottom), (right, bottom), axis);
    draw_line(&mut img, (left, bottom), (left, top), axis);
    let y_max = points
        .iter()
        .flat_map(|p| [p.combined, p.criterion, p.distillation.unwrap_or(0.0)])
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let n = points.len().max(2) - 1;
    let to_px = |i: usize, v: f64| {
        let x = left + ((right - left) as f64 * i as f64 / n as f64).round() as i64;
        let y = bottom - ((bottom - top) as f64 * (v / y_max).clamp(0.0, 1.0)).round() as i64;
        (x, y)
    };
    type Series = (Rgb<u8>, fn(&EpochPoint) -> Option<f64>);
    let series: [Series; 3] = [
        (Rgb([220, 40, 40]), |p| p.distillation),
        (Rgb([40, 80, 220]), |p| Some(p.criterion)),
        (Rgb([0, 0, 0]), |p| Some(p.combined)),
    ];
    for (color, value) in &series {
        let pts: Vec<(i64, i64)> = points
            .iter()
            .enumerate()
            .filter_map(|(i, p)| value(p).filter(|v| v.is_finite()).map(|v| to_px(i, v)))
            .collect();
        for w in pts.windows(2) {
            draw_line(&mut img, w[0], w[1], *color);
        }
        if let [only] = pts.as_slice() {
            draw_line(&mut img, *only, *only, *color);
        }
    }
    img
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub metrics_csv: PathBuf,
    pub summary_csv: PathBuf,
    pub plots: Vec<PathBuf>,
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `metrics.csv`, `summary.csv` and `loss_client_<id>.png` files
/// under `out_dir`. The summary's accuracy is the last round's validation
/// accuracy, when one was measured.
pub fn emit_report(state: &GlobalState, summary: &SummaryRow, out_dir: &Path) -> Result<ReportFiles> {
    if state.history.is_empty() {
        return Err(Error::Metrics("cannot report an empty history".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join("metrics.csv");
    write(&metrics_path, &metrics_csv(&state.history))?;
    let mut row = summary.clone();
    if let Some(last) = state.history.last() {
        row.accuracy = row.accuracy.or(last.validation_accuracy);
        row.mean_iou = row.mean_iou.or(last.validation_mean_iou);
    }
    let summary_path = out_dir.join("summary.csv");
    write(&summary_path, &summary_csv(&[row]))?;
    let plots = write_plots(&state.history, out_dir)?;
    Ok(ReportFiles {
        metrics_csv: metrics_path,
        summary_csv: summary_path,
        plots,
    })
}

pub fn write_plots(history: &[RoundRecord], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut plots = Vec::new();
    for (client, points) in loss_curves(history) {
        let path = out_dir.join(format!("loss_client_{client}.png"));
        render_curve(&points).save(&path).map_err(|source| Error::Image {
            path: path.clone(),
            source,
        })?;
        plots.push(path);
    }
    Ok(plots)
}
