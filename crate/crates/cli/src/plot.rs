//! SVG loss curves and MIOU bars for `report --format plot`.

use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use volcon::eval::EvaluationSummary;
use volcon::pipeline::{FINETUNE_LOG, PRETRAIN_LOG};
use volcon::train::TrainLog;
use volcon::{Error, Result};

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn draw_err<E: std::fmt::Display>(path: &Path) -> impl FnOnce(E) -> Error + '_ {
    move |e| Error::Data(format!("cannot draw {}: {e}", path.display()))
}

fn find_logs(dirs: &[PathBuf], file: &str) -> Vec<(String, TrainLog)> {
    let mut found = Vec::new();
    for d in dirs {
        let mut candidates = vec![d.clone()];
        if let Ok(rd) = fs::read_dir(d) {
            let mut subs: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
            subs.sort();
            candidates.extend(subs);
        }
        for c in candidates {
            let p = c.join(file);
            if let Ok(log) = TrainLog::read_jsonl(&p) {
                if !log.records.is_empty() {
                    let name = c.file_name().map_or_else(|| c.display().to_string(), |n| n.to_string_lossy().into());
                    found.push((name, log));
                }
            }
        }
    }
    found
}

fn loss_plot(path: &Path, title: &str, logs: &[(String, TrainLog)]) -> Result<()> {
    let max_epoch = logs.iter().flat_map(|(_, l)| l.records.iter().map(|r| r.epoch)).max().unwrap_or(1);
    let losses: Vec<f64> = logs.iter().flat_map(|(_, l)| l.losses()).filter(|v| v.is_finite()).collect();
    let lo = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let pad = ((hi - lo) * 0.05).max(1e-6);

    let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err(path))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(1f64..(max_epoch.max(2) as f64), (lo - pad)..(hi + pad))
        .map_err(draw_err(path))?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc("mean loss")
        .draw()
        .map_err(draw_err(path))?;
    for (k, (name, log)) in logs.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(
                log.records.iter().map(|r| (r.epoch as f64, r.mean_loss)),
                color.stroke_width(2),
            ))
            .map_err(draw_err(path))?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(draw_err(path))?;
    root.present().map_err(draw_err(path))
}

fn miou_plot(path: &Path, rows: &[(PathBuf, EvaluationSummary)]) -> Result<()> {
    let n = rows.len();
    let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err(path))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Average MIOU over test splits", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d((0..n).into_segmented(), 0f64..1f64)
        .map_err(draw_err(path))?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .y_desc("MIOU")
        .x_label_formatter(&|v| match v {
            SegmentValue::CenterOf(i) if *i < n => rows[*i].1.method.clone(),
            _ => String::new(),
        })
        .draw()
        .map_err(draw_err(path))?;
    chart
        .draw_series(rows.iter().enumerate().map(|(i, (_, s))| {
            let color = PALETTE[i % PALETTE.len()];
            let mut bar = Rectangle::new(
                [(SegmentValue::Exact(i), 0.0), (SegmentValue::Exact(i + 1), s.average_miou)],
                color.filled(),
            );
            bar.set_margin(0, 0, 12, 12);
            bar
        }))
        .map_err(draw_err(path))?;
    root.present().map_err(draw_err(path))
}

/// Write `pretrain_loss.svg`, `finetune_loss.svg` (when logs exist) and `miou.svg` into `out`.
pub fn write_plots(dirs: &[PathBuf], rows: &[(PathBuf, EvaluationSummary)], out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    for (file, name, title) in [
        (PRETRAIN_LOG, "pretrain_loss.svg", "Contrastive pretraining loss"),
        (FINETUNE_LOG, "finetune_loss.svg", "Fine-tuning cross-entropy"),
    ] {
        let logs = find_logs(dirs, file);
        if !logs.is_empty() {
            let p = out.join(name);
            loss_plot(&p, title, &logs)?;
            written.push(p);
        }
    }
    let p = out.join("miou.svg");
    miou_plot(&p, rows)?;
    written.push(p);
    Ok(written)
}
