//! Static SVG charts for training curves and evaluation results.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::eval::report::EvalReport;
use crate::train::StepRecord;

const SIZE: (u32, u32) = (640, 400);
const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn plot_err<E: std::fmt::Debug>(e: E) -> Error {
    Error::Invalid(format!("plotting failed: {e:?}"))
}

fn write(path: &Path, svg: String) -> Result<()> {
    std::fs::write(path, svg)?;
    Ok(())
}

fn upper(values: impl Iterator<Item = f64>) -> f64 {
    let m = values.filter(|v| v.is_finite()).fold(0.0, f64::max);
    if m > 0.0 {
        m * 1.05
    } else {
        1.0
    }
}

/// Denoising and total loss per step.
pub fn loss_curve(records: &[StepRecord], path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Invalid("no metrics to plot".into()));
    }
    let x_max = records.last().map_or(1, |r| r.step).max(1) as f64;
    let y_max = upper(records.iter().flat_map(|r| [r.denoise, r.total]));
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption("training loss", ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(52)
            .build_cartesian_2d(0f64..x_max, 0f64..y_max)
            .map_err(plot_err)?;
        chart.configure_mesh().x_desc("step").y_desc("loss").draw().map_err(plot_err)?;
        let series: [(&str, fn(&StepRecord) -> f64); 2] = [("denoise", |r| r.denoise), ("total", |r| r.total)];
        for (i, (name, f)) in series.into_iter().enumerate() {
            let color = PALETTE[i];
            chart
                .draw_series(LineSeries::new(records.iter().map(|r| (r.step as f64, f(r))), color))
                .map_err(plot_err)?
                .label(name)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        }
        chart.configure_series_labels().background_style(WHITE).border_style(BLACK).draw().map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    write(path, svg)
}

/// Grouped bars of MG2..MG5 and object accuracy, one group per run, with
/// round standard deviations as whiskers.
pub fn mg_bars(runs: &[(String, EvalReport)], path: &Path) -> Result<()> {
    if runs.is_empty() {
        return Err(Error::Invalid("no reports to plot".into()));
    }
    let metrics = ["MG2", "MG3", "MG4", "MG5", "OA"];
    let value = |r: &EvalReport, m: &str| -> (f64, f64) {
        match r.mg.get(m) {
            Some(v) => (v.mean, v.std),
            None => (r.object_accuracy, 0.0),
        }
    };
    let slots = runs.len() as f64 + 1.0;
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption("multi-category generation", ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(52)
            .build_cartesian_2d(0f64..metrics.len() as f64, 0f64..100f64)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(metrics.len() * 2 + 1)
            .x_label_formatter(&|x| {
                let i = x.floor() as usize;
                if (x - i as f64 - 0.5).abs() < 1e-6 { metrics.get(i).map_or(String::new(), |s| s.to_string()) } else { String::new() }
            })
            .y_desc("%")
            .draw()
            .map_err(plot_err)?;
        for (ri, (name, report)) in runs.iter().enumerate() {
            let color = PALETTE[ri % PALETTE.len()];
            let bars: Vec<(f64, f64, f64)> = metrics
                .iter()
                .enumerate()
                .map(|(mi, m)| {
                    let (mean, std) = value(report, m);
                    (mi as f64 + (ri as f64 + 0.5) / slots, mean, std)
                })
                .collect();
            let w = 1.0 / slots;
            chart
                .draw_series(bars.iter().map(|&(x, y, _)| Rectangle::new([(x, 0.0), (x + w, y)], color.filled())))
                .map_err(plot_err)?
                .label(name.as_str())
                .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], color.filled()));
            chart
                .draw_series(bars.iter().filter(|b| b.2 > 0.0).map(|&(x, y, s)| {
                    PathElement::new(vec![(x + w / 2.0, (y - s).max(0.0)), (x + w / 2.0, (y + s).min(100.0))], BLACK)
                }))
                .map_err(plot_err)?;
        }
        chart.configure_series_labels().background_style(WHITE).border_style(BLACK).draw().map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    write(path, svg)
}

/// Attention mIoU per labeled point, e.g. per run or per training step.
pub fn miou_chart(points: &[(String, f64)], path: &Path) -> Result<()> {
    if points.is_empty() {
        return Err(Error::Invalid("no mIoU values to plot".into()));
    }
    let n = points.len();
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption("attention mIoU", ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(52)
            .build_cartesian_2d(0f64..n as f64, 0f64..1f64)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(n * 2 + 1)
            .x_label_formatter(&|x| {
                let i = x.floor() as usize;
                if (x - i as f64 - 0.5).abs() < 1e-6 { points.get(i).map_or(String::new(), |p| p.0.clone()) } else { String::new() }
            })
            .y_desc("mIoU")
            .draw()
            .map_err(plot_err)?;
        chart
            .draw_series(points.iter().enumerate().map(|(i, (_, v))| {
                Rectangle::new([(i as f64 + 0.2, 0.0), (i as f64 + 0.8, v.clamp(0.0, 1.0))], PALETTE[0].filled())
            }))
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    write(path, svg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn loss_curve_writes_svg() {
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<StepRecord> = (1..=5)
            .map(|s| StepRecord {
                step: s,
                denoise: 1.0 / s as f64,
                token_per_layer: BTreeMap::new(),
                pixel_per_layer: BTreeMap::new(),
                total: 1.1 / s as f64,
            })
            .collect();
        let path = dir.path().join("loss.svg");
        loss_curve(&records, &path).unwrap();
        let svg = std::fs::read_to_string(&path).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("denoise"));
        assert!(loss_curve(&[], &path).is_err());
        miou_chart(&[("a".into(), 0.3), ("b".into(), 0.5)], &dir.path().join("m.svg")).unwrap();
    }
}
