//! Static plot emission (confusion matrix, ROC curve, learning curves) plus
//! the machine-readable `report.json`.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::metrics::EvalReport;

/// One training epoch summary, persisted as a line of `epochs.jsonl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub lr_head: f64,
}

/// Candidate font files for axis labels; plots degrade to unlabeled if none
/// of these exist.
const FONT_CANDIDATES: [&str; 2] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
];

fn fonts_available() -> bool {
    static AVAILABLE: OnceLock<bool> = OnceLock::new();
    *AVAILABLE.get_or_init(|| {
        for candidate in FONT_CANDIDATES {
            if let Ok(bytes) = std::fs::read(candidate) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        false
    })
}

fn plot_err<E: std::fmt::Display>(e: E) -> CoreError {
    CoreError::Plot(e.to_string())
}

/// Round every number in a JSON tree to 6 decimal places.
fn round_values(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Number(n) => {
            if let Some(f) = n.as_f64() {
                if n.as_i64().is_none() && n.as_u64().is_none() {
                    let rounded = (f * 1e6).round() / 1e6;
                    if let Some(num) = serde_json::Number::from_f64(rounded) {
                        *value = serde_json::Value::Number(num);
                    }
                }
            }
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(round_values),
        serde_json::Value::Object(map) => map.values_mut().for_each(round_values),
        _ => {}
    }
}

/// Serialize the report with reals rounded to 6 decimals.
pub fn write_report_json(report: &EvalReport, path: &Path) -> Result<()> {
    let mut value = serde_json::to_value(report).expect("report serializes");
    round_values(&mut value);
    let text = serde_json::to_string_pretty(&value).expect("value serializes");
    std::fs::write(path, text).map_err(|e| CoreError::io(path, e))
}

pub fn read_report_json(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CoreError::ManifestParse {
        line: 0,
        message: format!("report {}: {e}", path.display()),
    })
}

fn draw_confusion(report: &EvalReport, path: &Path) -> Result<()> {
    let root = BitMapBackend::new(path, (480, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let cm = &report.confusion;
    let cells = [
        (0, 0, cm.tn, "TN"),
        (1, 0, cm.fp, "FP"),
        (0, 1, cm.fn_, "FN"),
        (1, 1, cm.tp, "TP"),
    ];
    let max = cells.iter().map(|c| c.2).max().unwrap_or(1).max(1) as f64;
    let (w, h) = (480i32, 480i32);
    let (margin, grid) = (60i32, 360i32);
    for (col, row, count, tag) in cells {
        let x0 = margin + col * grid / 2;
        let y0 = margin + row * grid / 2;
        let shade = 1.0 - 0.8 * (count as f64 / max);
        let level = (shade * 255.0) as u8;
        let color = RGBColor(level, level, 255);
        root.draw(&Rectangle::new(
            [(x0, y0), (x0 + grid / 2, y0 + grid / 2)],
            color.filled(),
        ))
        .map_err(plot_err)?;
        root.draw(&Rectangle::new(
            [(x0, y0), (x0 + grid / 2, y0 + grid / 2)],
            BLACK.stroke_width(1),
        ))
        .map_err(plot_err)?;
        if fonts_available() {
            root.draw(&Text::new(
                format!("{tag}: {count}"),
                (x0 + grid / 4 - 30, y0 + grid / 4),
                ("sans-serif", 20),
            ))
            .map_err(plot_err)?;
        }
    }
    if fonts_available() {
        root.draw(&Text::new(
            "predicted: unfragmented | fragmented",
            (margin, h - 40),
            ("sans-serif", 16),
        ))
        .map_err(plot_err)?;
        root.draw(&Text::new("true labels top-down", (margin, 20), ("sans-serif", 16)))
            .map_err(plot_err)?;
    }
    let _ = w;
    root.present().map_err(plot_err)
}

fn draw_roc(report: &EvalReport, path: &Path) -> Result<()> {
    let root = BitMapBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut builder = ChartBuilder::on(&root);
    builder
        .margin(20)
        .x_label_area_size(40)
        .y_label_area_size(50);
    if fonts_available() {
        let caption = match report.auc {
            Some(auc) => format!("ROC curve (AUC = {auc:.3})"),
            None => "ROC curve".to_string(),
        };
        builder.caption(caption, ("sans-serif", 22));
    }
    let mut chart = builder
        .build_cartesian_2d(0.0f64..1.0, 0.0f64..1.0)
        .map_err(plot_err)?;
    let mut mesh = chart.configure_mesh();
    if fonts_available() {
        mesh.x_desc("false positive rate").y_desc("true positive rate");
    } else {
        mesh.disable_axes();
    }
    mesh.draw().map_err(plot_err)?;
    chart
        .draw_series(LineSeries::new(
            [(0.0, 0.0), (1.0, 1.0)],
            BLACK.stroke_width(1),
        ))
        .map_err(plot_err)?;
    chart
        .draw_series(LineSeries::new(
            report.roc_points.iter().map(|p| (p.fpr, p.tpr)),
            BLUE.stroke_width(2),
        ))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

fn draw_learning_curves(logs: &[EpochLog], path: &Path) -> Result<()> {
    let root = BitMapBackend::new(path, (900, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let (loss_area, acc_area) = root.split_horizontally(450);

    let max_epoch = logs.iter().map(|l| l.epoch).max().unwrap_or(1) as f64;
    let max_loss = logs
        .iter()
        .flat_map(|l| [l.train_loss, l.val_loss])
        .fold(0.0f64, f64::max)
        .max(1e-6);

    let panel = |area: &DrawingArea<_, _>,
                     title: &str,
                     y_max: f64,
                     train: Vec<(f64, f64)>,
                     val: Vec<(f64, f64)>|
     -> Result<()> {
        let mut builder = ChartBuilder::on(area);
        builder
            .margin(15)
            .x_label_area_size(35)
            .y_label_area_size(45);
        if fonts_available() {
            builder.caption(title, ("sans-serif", 20));
        }
        let mut chart = builder
            .build_cartesian_2d(1.0f64..max_epoch.max(2.0), 0.0f64..y_max)
            .map_err(plot_err)?;
        let mut mesh = chart.configure_mesh();
        if fonts_available() {
            mesh.x_desc("epoch");
        } else {
            mesh.disable_axes();
        }
        mesh.draw().map_err(plot_err)?;
        chart
            .draw_series(LineSeries::new(train, BLUE.stroke_width(2)))
            .map_err(plot_err)?
            .label("train");
        chart
            .draw_series(LineSeries::new(val, RED.stroke_width(2)))
            .map_err(plot_err)?
            .label("validation");
        Ok(())
    };

    panel(
        &loss_area,
        "loss",
        max_loss * 1.05,
        logs.iter().map(|l| (l.epoch as f64, l.train_loss)).collect(),
        logs.iter().map(|l| (l.epoch as f64, l.val_loss)).collect(),
    )?;
    panel(
        &acc_area,
        "accuracy",
        1.0,
        logs.iter().map(|l| (l.epoch as f64, l.train_acc)).collect(),
        logs.iter().map(|l| (l.epoch as f64, l.val_acc)).collect(),
    )?;
    root.present().map_err(plot_err)
}

/// Write `report.json`, `confusion.png`, `roc.png` and (when epoch logs are
/// present) `learning_curves.png` into `out_dir`. Returns the written paths.
pub fn emit_plots(report: &EvalReport, logs: &[EpochLog], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir, e))?;
    let mut written = Vec::new();

    let report_path = out_dir.join("report.json");
    write_report_json(report, &report_path)?;
    written.push(report_path);

    let confusion_path = out_dir.join("confusion.png");
    draw_confusion(report, &confusion_path)?;
    written.push(confusion_path);

    let roc_path = out_dir.join("roc.png");
    draw_roc(report, &roc_path)?;
    written.push(roc_path);

    if logs.is_empty() {
        eprintln!("warning: no epoch logs, skipping learning_curves.png");
    } else {
        let curves_path = out_dir.join("learning_curves.png");
        draw_learning_curves(logs, &curves_path)?;
        written.push(curves_path);
    }
    Ok(written)
}
