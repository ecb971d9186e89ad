//! Evaluation artifacts: JSON and CSV files plus self-contained SVG plots
//! (confusion heatmap, ROC curves, accuracy and loss curves).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::fsutil::write_atomic;
use crate::metrics::ConfusionMatrix;
use crate::train::{EvaluationReport, TrainingHistory};

pub const REPORT_FILE: &str = "report.json";
pub const CONFUSION_CSV: &str = "confusion.csv";
pub const HISTORY_CSV: &str = "history.csv";

/// `roc_<class>.csv`, with anything outside `[A-Za-z0-9_-]` replaced by `_`.
pub fn roc_csv_name(class_name: &str) -> String {
    let safe: String = class_name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("roc_{safe}.csv")
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

fn svg_open(out: &mut String, width: f64, height: f64) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
}

fn text(out: &mut String, x: f64, y: f64, anchor: &str, extra: &str, body: &str) {
    let _ = writeln!(
        out,
        r#"<text x="{x:.1}" y="{y:.1}" text-anchor="{anchor}"{extra}>{}</text>"#,
        escape(body)
    );
}

/// Row-normalized confusion heatmap with raw counts in each cell. Rows are
/// true classes, columns predictions.
pub fn confusion_svg(cm: &ConfusionMatrix, class_names: &[String]) -> String {
    let k = cm.num_classes();
    let cell = 80.0;
    let (left, top) = (120.0, 60.0);
    let (w, h) = (left + cell * k as f64 + 30.0, top + cell * k as f64 + 60.0);
    let mut out = String::new();
    svg_open(&mut out, w, h);
    text(&mut out, w / 2.0, 24.0, "middle", r#" font-size="15""#, "Confusion matrix");
    for (i, row) in cm.0.iter().enumerate() {
        let total = cm.row_sum(i).max(1) as f64;
        for (j, &v) in row.iter().enumerate() {
            let frac = v as f64 / total;
            // White to dark blue.
            let shade = |lo: f64, hi: f64| (lo + (hi - lo) * frac).round() as u8;
            let (x, y) = (left + cell * j as f64, top + cell * i as f64);
            let _ = writeln!(
                out,
                r##"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="#{:02x}{:02x}{:02x}" stroke="#888"/>"##,
                shade(255.0, 8.0),
                shade(255.0, 48.0),
                shade(255.0, 107.0)
            );
            let color = if frac > 0.5 { r#" fill="white""# } else { "" };
            text(&mut out, x + cell / 2.0, y + cell / 2.0 + 5.0, "middle", color, &v.to_string());
        }
    }
    for (i, name) in class_names.iter().enumerate().take(k) {
        let mid = cell * i as f64 + cell / 2.0;
        text(&mut out, left - 8.0, top + mid + 4.0, "end", "", name);
        text(&mut out, left + mid, top + cell * k as f64 + 18.0, "middle", "", name);
    }
    text(&mut out, left + cell * k as f64 / 2.0, h - 12.0, "middle", "", "Predicted");
    text(&mut out, 14.0, top - 12.0, "start", "", "True");
    out.push_str("</svg>\n");
    out
}

/// One polyline of a [`line_chart`].
pub struct Series<'a> {
    pub label: String,
    pub points: &'a [(f64, f64)],
    pub dashed: bool,
}

/// A plain x/y line chart with a legend in the lower right.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, x_range: (f64, f64), y_range: (f64, f64), series: &[Series]) -> String {
    let (left, top, pw, ph) = (60.0, 40.0, 400.0, 300.0);
    let (w, h) = (left + pw + 20.0, top + ph + 50.0);
    let span = |(lo, hi): (f64, f64)| if hi > lo { hi - lo } else { 1.0 };
    let sx = |x: f64| left + (x - x_range.0) / span(x_range) * pw;
    let sy = |y: f64| top + ph - (y - y_range.0) / span(y_range) * ph;
    let mut out = String::new();
    svg_open(&mut out, w, h);
    text(&mut out, w / 2.0, 24.0, "middle", r#" font-size="15""#, title);
    let _ = writeln!(out, r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##);
    for t in 0..=5 {
        let f = t as f64 / 5.0;
        let xv = x_range.0 + f * span(x_range);
        let yv = y_range.0 + f * span(y_range);
        let (x, y) = (sx(xv), sy(yv));
        let _ = writeln!(
            out,
            r##"<line x1="{x:.1}" y1="{top}" x2="{x:.1}" y2="{:.1}" stroke="#ddd"/>"##,
            top + ph
        );
        let _ = writeln!(
            out,
            r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/>"##,
            left + pw
        );
        text(&mut out, x, top + ph + 16.0, "middle", "", &format!("{}", (xv * 100.0).round() / 100.0));
        text(&mut out, left - 6.0, y + 4.0, "end", "", &format!("{}", (yv * 100.0).round() / 100.0));
    }
    text(&mut out, left + pw / 2.0, h - 8.0, "middle", "", x_label);
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let dash = if s.dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2"{dash} points="{}"/>"#,
            pts.join(" ")
        );
        let ly = top + ph - 14.0 - 16.0 * (series.len() - 1 - i) as f64;
        let lx = left + pw - 170.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"{dash}/>"#,
            lx + 20.0
        );
        text(&mut out, lx + 26.0, ly + 4.0, "start", "", &s.label);
    }
    out.push_str("</svg>\n");
    out
}

/// One-vs-rest ROC curves of every class with the chance diagonal.
pub fn roc_svg(report: &EvaluationReport) -> String {
    let series: Vec<Series> = report
        .roc
        .iter()
        .map(|r| Series {
            label: format!("{} (AUC {:.3})", r.class_name, r.curve.auc),
            points: &r.curve.points,
            dashed: false,
        })
        .collect();
    let mut out = line_chart(
        "ROC curves (one-vs-rest)",
        "False positive rate",
        "True positive rate",
        (0.0, 1.0),
        (0.0, 1.0),
        &series,
    );
    // Chance line, inserted before the closing tag.
    out.truncate(out.len() - "</svg>\n".len());
    out.push_str(r##"<line x1="60" y1="340" x2="460" y2="40" stroke="#999" stroke-dasharray="3 3"/>"##);
    out.push_str("\n</svg>\n");
    out
}

/// Which pair of history columns to plot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Curve {
    Accuracy,
    Loss,
}

/// Training and validation curves over epochs.
pub fn history_svg(history: &TrainingHistory, curve: Curve) -> String {
    let pick = |train: bool| -> Vec<(f64, f64)> {
        history
            .records
            .iter()
            .map(|r| {
                let y = match (curve, train) {
                    (Curve::Accuracy, true) => r.train_acc,
                    (Curve::Accuracy, false) => r.val_acc,
                    (Curve::Loss, true) => r.train_loss,
                    (Curve::Loss, false) => r.val_loss,
                };
                (r.epoch as f64, y)
            })
            .collect()
    };
    let (train, val) = (pick(true), pick(false));
    let last = history.records.last().map_or(1.0, |r| r.epoch as f64);
    let (name, y_range) = match curve {
        Curve::Accuracy => ("Accuracy", (0.0, 1.0)),
        Curve::Loss => {
            let max = train.iter().chain(&val).map(|p| p.1).filter(|v| v.is_finite()).fold(0.0, f64::max);
            ("Loss", (0.0, if max > 0.0 { max * 1.05 } else { 1.0 }))
        }
    };
    line_chart(
        &format!("{name} per epoch"),
        "Epoch",
        name,
        (1.0_f64.min(last), last.max(2.0)),
        y_range,
        &[
            Series { label: format!("train {}", name.to_lowercase()), points: &train, dashed: false },
            Series { label: format!("validation {}", name.to_lowercase()), points: &val, dashed: true },
        ],
    )
}

/// Writes the report JSON, confusion CSV and one ROC CSV per class, then
/// the SVG plots; with a history, also its CSV and the accuracy and loss
/// plots. Every file is written atomically. Returns the paths in write order.
pub fn write_evaluation_outputs(dir: impl AsRef<Path>, report: &EvaluationReport, history: Option<&TrainingHistory>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut written = Vec::new();
    let mut put = |name: &str, body: &str| -> Result<()> {
        let path = dir.join(name);
        write_atomic(&path, body.as_bytes())?;
        written.push(path);
        Ok(())
    };
    put(REPORT_FILE, &report.to_json())?;
    put(CONFUSION_CSV, &report.confusion.to_csv(&report.class_names))?;
    for r in &report.roc {
        put(&roc_csv_name(&r.class_name), &r.curve.to_csv())?;
    }
    if let Some(h) = history {
        put(HISTORY_CSV, &h.to_csv())?;
    }
    put("confusion.svg", &confusion_svg(&report.confusion, &report.class_names))?;
    put("roc.svg", &roc_svg(report))?;
    if let Some(h) = history {
        put("accuracy.svg", &history_svg(h, Curve::Accuracy))?;
        put("loss.svg", &history_svg(h, Curve::Loss))?;
    }
    Ok(written)
}
