//! SVG plots: precision-recall curves per class group and mAP bars.

use std::path::Path;

use cmmp_core::eval::{match_predictions, pr_curve, EvalConfig, GroundTruth, Prediction};
use cmmp_core::zeroshot::ZeroShotSplit;
use plotters::prelude::*;

use crate::error::{validation, Result};
use crate::formats::Report;

const RECALL_POINTS: usize = 101;

/// Interpolated precision (best precision at recall ≥ r) at evenly spaced
/// recall levels.
pub fn interpolated_precision(curve: &[(f64, f64)]) -> Vec<f64> {
    (0..RECALL_POINTS)
        .map(|i| {
            let r = i as f64 / (RECALL_POINTS - 1) as f64;
            curve.iter().filter(|(rec, _)| *rec >= r - 1e-12).map(|(_, p)| *p).fold(0.0, f64::max)
        })
        .collect()
}

/// Mean interpolated precision curve of each group (`"seen"`, `"unseen"`)
/// over its compositions with ground truth.
pub fn group_pr_curves(
    preds: &[Prediction],
    gts: &[GroundTruth],
    split: &ZeroShotSplit,
    cfg: &EvalConfig,
) -> Vec<(String, Vec<(f64, f64)>)> {
    let matches = match_predictions(preds, gts, cfg.iou_threshold);
    let mut out = Vec::new();
    for (name, seen) in [("seen", true), ("unseen", false)] {
        let curves: Vec<Vec<f64>> = matches
            .per_composition
            .iter()
            .filter(|(c, m)| split.is_seen(**c) == seen && m.n_gt > 0 && !cfg.excluded.contains(c))
            .map(|(_, m)| interpolated_precision(&pr_curve(&m.flags, m.n_gt)))
            .collect();
        if curves.is_empty() {
            continue;
        }
        let mean: Vec<(f64, f64)> = (0..RECALL_POINTS)
            .map(|i| (i as f64 / (RECALL_POINTS - 1) as f64, curves.iter().map(|c| c[i]).sum::<f64>() / curves.len() as f64))
            .collect();
        out.push((name.to_string(), mean));
    }
    out
}

fn plot_err(e: impl std::fmt::Display) -> crate::error::CliError {
    validation!("plotting: {e}")
}

pub fn pr_curves_svg(path: &Path, curves: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("precision-recall (mean over compositions)", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(0.0..1.0, 0.0..1.05)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("recall").y_desc("precision").draw().map_err(plot_err)?;
    let colors = [BLUE, RED];
    for (i, (name, pts)) in curves.iter().enumerate() {
        let color = colors[i % colors.len()];
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)
}

pub fn map_bars_svg(path: &Path, report: &Report) -> Result<()> {
    let bars = [("unseen", report.map_unseen), ("seen", report.map_seen), ("full", report.map_full), ("HM", report.hm)];
    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("mAP ({})", report.setting), ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d((0..bars.len()).into_segmented(), 0.0..100.0)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .y_desc("mAP (%)")
        .x_label_formatter(&|v| match v {
            SegmentValue::CenterOf(i) => bars.get(*i).map_or(String::new(), |b| b.0.to_string()),
            _ => String::new(),
        })
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(bars.iter().enumerate().filter_map(|(i, (_, v))| {
            v.map(|v| {
                let mut r =
                    Rectangle::new([(SegmentValue::Exact(i), 0.0), (SegmentValue::Exact(i + 1), 100.0 * v)], BLUE.mix(0.6).filled());
                r.set_margin(0, 0, 12, 12);
                r
            })
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}
