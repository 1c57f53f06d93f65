//! Result rendering: CSV files, aligned text tables, and the prediction
//! scatter with its metadata sidecar.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

use super::{FoldResult, GlobalMetrics};

/// Fixed axes of the prediction scatter, the full PSS range.
pub const SCATTER_AXIS: (f64, f64) = (0.0, 40.0);
const SCATTER_SIZE: u32 = 480;
const SCATTER_MARGIN: u32 = 20;

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v}"),
        None => "undefined".to_string(),
    }
}

/// Metric rows in fixed order, shared by every global.csv writer.
pub fn metric_rows(m: &GlobalMetrics) -> Vec<(&'static str, String)> {
    vec![
        ("rmse_mean", format!("{}", m.rmse_mean)),
        ("rmse_std", format!("{}", m.rmse_std)),
        ("rmse", format!("{}", m.pooled_rmse)),
        ("mae", format!("{}", m.pooled_mae)),
        ("r2", fmt_opt(m.r2)),
        ("pearson_r", fmt_opt(m.pearson)),
        ("spearman_rho", fmt_opt(m.spearman)),
        ("n_predictions", format!("{}", m.n_predictions)),
    ]
}

/// global.csv: `modalities,metric,value`, one block per modality set.
pub fn global_csv_string(entries: &[(String, GlobalMetrics)]) -> String {
    let mut out = String::from("modalities,metric,value\n");
    for (label, metrics) in entries {
        for (metric, value) in metric_rows(metrics) {
            out.push_str(&format!("{label},{metric},{value}\n"));
        }
    }
    out
}

pub fn write_global_csv(path: &Path, entries: &[(String, GlobalMetrics)]) -> Result<()> {
    std::fs::write(path, global_csv_string(entries))?;
    Ok(())
}

/// folds.csv: one row per LOSO fold.
pub fn write_folds_csv(path: &Path, modalities: &str, folds: &[FoldResult]) -> Result<()> {
    let mut out = String::from("held_out,horizon,modalities,n_predictions,fold_rmse\n");
    for f in folds {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            f.held_out,
            f.horizon.label(),
            modalities,
            f.predictions.len(),
            f.fold_rmse
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// predictions.csv: pooled out-of-subject predictions.
pub fn write_predictions_csv(path: &Path, folds: &[FoldResult]) -> Result<()> {
    let mut out = String::from("bag_id,held_out,horizon,y_pred,y_true\n");
    for f in folds {
        for (bag_id, pred, y) in &f.predictions {
            out.push_str(&format!(
                "{bag_id},{},{},{pred},{y}\n",
                f.held_out,
                f.horizon.label()
            ));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

type PredictionGroups =
    std::collections::BTreeMap<(String, crate::bags::Horizon), Vec<(String, f64, f64)>>;

/// Rebuilds per-fold results from a predictions.csv, regrouping rows by
/// held-out patient and recomputing fold RMSE.
pub fn read_predictions_csv(path: &Path) -> Result<Vec<FoldResult>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut grouped: PredictionGroups = std::collections::BTreeMap::new();
    for row in reader.records() {
        let row = row?;
        if row.len() != 5 {
            return Err(crate::error::Error::data(
                "predictions.csv needs 5 columns: bag_id,held_out,horizon,y_pred,y_true",
            ));
        }
        let horizon = crate::bags::Horizon::parse(&row[2])?;
        let pred: f64 = row[3]
            .parse()
            .map_err(|e| crate::error::Error::data(format!("bad y_pred: {e}")))?;
        let y: f64 = row[4]
            .parse()
            .map_err(|e| crate::error::Error::data(format!("bad y_true: {e}")))?;
        grouped
            .entry((row[1].to_string(), horizon))
            .or_default()
            .push((row[0].to_string(), pred, y));
    }
    Ok(grouped
        .into_iter()
        .map(|((held_out, horizon), predictions)| {
            let pairs: Vec<(f64, f64)> = predictions.iter().map(|(_, p, y)| (*p, *y)).collect();
            FoldResult {
                held_out,
                horizon,
                fold_rmse: super::rmse(&pairs),
                predictions,
            }
        })
        .collect())
}

/// Left-aligned monospace table with a header rule.
pub fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let n_cols = headers.len();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate().take(n_cols) {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    let fmt_row = |cells: Vec<&str>, widths: &[usize]| -> String {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{:<width$}", c, width = widths[i]))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    out.push_str(&fmt_row(headers.to_vec(), &widths));
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (n_cols - 1)));
    out.push('\n');
    for row in rows {
        out.push_str(&fmt_row(row.iter().map(|s| s.as_str()).collect(), &widths));
        out.push('\n');
    }
    out
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ScatterMeta {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub n_points: usize,
}

/// Prediction-vs-target scatter on fixed [0,40] axes with the identity
/// line; writes `<stem>.png` plus a `<stem>.json` metadata sidecar.
pub fn write_scatter(path: &Path, preds: &[(f64, f64)]) -> Result<ScatterMeta> {
    let (lo, hi) = SCATTER_AXIS;
    let size = SCATTER_SIZE;
    let margin = SCATTER_MARGIN;
    let mut img = image::RgbImage::from_pixel(size, size, image::Rgb([255, 255, 255]));

    let span = (size - 2 * margin) as f64;
    let to_px = |v: f64| -> i64 { (margin as f64 + (v - lo) / (hi - lo) * span).round() as i64 };
    // y axis points up: invert rows
    let to_row = |v: f64| -> i64 { size as i64 - 1 - to_px(v) };

    // frame
    for p in margin..(size - margin) {
        for (r, c) in [
            (margin, p),
            (size - margin - 1, p),
            (p, margin),
            (p, size - margin - 1),
        ] {
            img.put_pixel(c, r, image::Rgb([180, 180, 180]));
        }
    }
    // identity line
    let steps = (span as u32) * 2;
    for s in 0..=steps {
        let v = lo + (hi - lo) * s as f64 / steps as f64;
        let (r, c) = (to_row(v), to_px(v));
        if (0..size as i64).contains(&r) && (0..size as i64).contains(&c) {
            img.put_pixel(c as u32, r as u32, image::Rgb([150, 150, 150]));
        }
    }
    // points: 3x3 dots, clipped to the frame
    for &(pred, y) in preds {
        let (row, col) = (to_row(pred.clamp(lo, hi)), to_px(y.clamp(lo, hi)));
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let (r, c) = (row + dr, col + dc);
                if (0..size as i64).contains(&r) && (0..size as i64).contains(&c) {
                    img.put_pixel(c as u32, r as u32, image::Rgb([20, 20, 120]));
                }
            }
        }
    }
    img.save(path)
        .map_err(|e| crate::error::Error::data(format!("scatter write: {e}")))?;

    let meta = ScatterMeta {
        x_min: lo,
        x_max: hi,
        y_min: lo,
        y_max: hi,
        n_points: preds.len(),
    };
    std::fs::write(
        path.with_extension("json"),
        serde_json::to_vec_pretty(&meta)?,
    )?;
    Ok(meta)
}
