//! SVG training curves: mean mode count per epoch and bag precision/recall
//! per epoch.

use std::path::{Path, PathBuf};

use lbow_core::train::EpochReport;
use plotters::prelude::*;

use crate::error::{Error, Result};

type Series<'a> = (&'a str, RGBColor, Vec<(f64, f64)>);

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Plot(e.to_string())
}

fn line_chart(path: &Path, title: &str, y_label: &str, series: &[Series<'_>]) -> Result<()> {
    let points = series.iter().flat_map(|s| s.2.iter());
    let (mut x_max, mut y_min, mut y_max) = (1.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    if !y_min.is_finite() {
        return Err(Error::Plot(format!("{title}: nothing to plot")));
    }
    let pad = ((y_max - y_min) * 0.1).max(1e-3);
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(0.0..x_max, (y_min - pad)..(y_max + pad))
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("epoch").y_desc(y_label).draw().map_err(plot_err)?;
    for (name, color, data) in series {
        let color = *color;
        chart
            .draw_series(LineSeries::new(data.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    if series.len() > 1 {
        chart
            .configure_series_labels()
            .border_style(BLACK)
            .background_style(WHITE.mix(0.8))
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}

/// Writes `modes.svg` and `bow_pr.svg` into `dir`. Epochs without held-out
/// metrics are skipped; a chart with no points is not written.
pub fn render(history: &[EpochReport], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let with = |f: &dyn Fn(&EpochReport) -> Option<f64>| -> Vec<(f64, f64)> {
        history.iter().filter_map(|e| f(e).map(|y| (e.epoch as f64, y))).collect()
    };
    let modes = with(&|e| e.metrics.as_ref()?.mode_count_mean);
    let precision = with(&|e| Some(e.metrics.as_ref()?.bow_precision?.value));
    let recall = with(&|e| Some(e.metrics.as_ref()?.bow_recall?.value));
    let mut written = Vec::new();
    if !modes.is_empty() {
        let p = dir.join("modes.svg");
        line_chart(&p, "Modes per source word", "mean mode count", &[("modes", BLUE, modes)])?;
        written.push(p);
    }
    if !precision.is_empty() || !recall.is_empty() {
        let p = dir.join("bow_pr.svg");
        line_chart(&p, "Bag-of-words prediction", "score", &[("precision", RED, precision), ("recall", BLUE, recall)])?;
        written.push(p);
    }
    Ok(written)
}
