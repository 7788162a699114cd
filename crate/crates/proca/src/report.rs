//! `report.md` and `plots/*.png` regenerated from the files of a run directory.

use std::fmt::Write as _;
use std::path::Path;

use proca_core::pipeline::{Evaluation, PipelineConfig};

use crate::error::{AppError, AppResult};
use crate::plot;
use crate::rundir::{MetricRow, RunDir};

const SMOOTH: usize = 25;

fn moving_average(values: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    for i in 0..values.len() {
        let lo = i.saturating_sub(SMOOTH - 1);
        let window: Vec<f64> = values[lo..=i].iter().copied().filter(|v| v.is_finite()).collect();
        out.push(if window.is_empty() { f64::NAN } else { window.iter().sum::<f64>() / window.len() as f64 });
    }
    out
}

type Column = (&'static str, fn(&MetricRow) -> Option<f64>);

const LOSS_COLUMNS: [Column; 5] = [
    ("loss", |r| r.loss),
    ("ce_source", |r| r.ce_source),
    ("ce_target", |r| r.ce_target),
    ("feat_s2s+feat_t2s", |r| sum_opt(r.feat_s2s, r.feat_t2s)),
    ("out_s2s+out_t2s", |r| sum_opt(r.out_s2s, r.out_t2s)),
];

fn sum_opt(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (None, None) => None,
        _ => Some(a.unwrap_or(0.0) + b.unwrap_or(0.0)),
    }
}

fn fmt_iou(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

fn save_png(img: &image::RgbImage, path: &Path) -> AppResult<()> {
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| AppError::io(path, e))
}

fn config_summary(cfg: &PipelineConfig, out: &mut String) {
    let c = &cfg.contrast;
    let levels: Vec<&str> = [(c.levels.feature, "feature"), (c.levels.output, "output")].iter().filter(|x| x.0).map(|x| x.1).collect();
    let domains: Vec<&str> = [(c.domains.s2s, "s2s"), (c.domains.t2s, "t2s")].iter().filter(|x| x.0).map(|x| x.1).collect();
    let _ = writeln!(out, "| setting | value |\n|---|---|");
    let rows = [
        ("seed", cfg.seed.to_string()),
        ("image size", format!("{}x{}", cfg.scene.height, cfg.scene.width)),
        ("classes", cfg.scene.num_classes.to_string()),
        ("stage steps", format!("{} / {} / {}", cfg.stage1.steps, cfg.stage2.steps, cfg.stage3.steps)),
        ("contrast levels", levels.join(", ")),
        ("contrast domains", domains.join(", ")),
        ("lambda_contra", cfg.lambda_contra.to_string()),
        ("tau_feat / tau_out", format!("{} / {}", c.tau_feat, c.tau_out)),
        ("updating scheme", format!("{:?}", cfg.updating_scheme).to_lowercase()),
        ("m", cfg.m.to_string()),
        ("self-training", format!("{:?}", cfg.self_training).to_lowercase()),
        ("eta", cfg.eta.to_string()),
        ("mst scales", format!("{:?}", cfg.mst_scales)),
    ];
    for (k, v) in rows {
        let _ = writeln!(out, "| {k} | {v} |");
    }
}

fn per_class_table(out: &mut String, rows: &[(String, &Evaluation)]) {
    let Some((_, first)) = rows.first() else { return };
    let c = first.per_class_iou.len();
    let _ = write!(out, "| |");
    for k in 1..=c {
        let _ = write!(out, " class {k} |");
    }
    let _ = write!(out, " mIoU |\n|---|");
    for _ in 0..=c {
        let _ = write!(out, "---|");
    }
    out.push('\n');
    for (name, e) in rows {
        let _ = write!(out, "| {name} |");
        for v in &e.per_class_iou {
            let _ = write!(out, " {} |", fmt_iou(*v));
        }
        let _ = writeln!(out, " {:.4} |", e.miou);
    }
}

/// Rewrites `report.md` and the plots. Output depends only on the run's files.
pub fn generate(run: &RunDir) -> AppResult<String> {
    let cfg = run.read_config()?;
    let metrics = run.read_metrics()?;
    let evals = run.read_evaluations()?;
    let timings = run.read_timings()?;
    let plots = run.root.join("plots");
    std::fs::create_dir_all(&plots).map_err(|e| AppError::io(&plots, e))?;

    let mut md = String::from("# Run report\n\n## Configuration\n\n");
    config_summary(&cfg, &mut md);
    md.push_str("\n## Results\n\n| stage | source mIoU | target mIoU | target pixel acc. | wall-clock (s) |\n|---|---|---|---|---|\n");
    for (stage, r) in &evals {
        let secs = timings.get(stage).map_or_else(|| "n/a".into(), |s| format!("{s:.1}"));
        let _ = writeln!(md, "| {stage} | {:.4} | {:.4} | {:.4} | {secs} |", r.source.miou, r.target.miou, r.target.pixel_accuracy);
    }
    md.push_str("\n### Per-class IoU on the target evaluation split\n\n");
    let rows: Vec<(String, &Evaluation)> = evals.iter().map(|(s, r)| (format!("stage {s}"), &r.target)).collect();
    per_class_table(&mut md, &rows);
    for r in evals.values() {
        if !r.target.excluded.is_empty() {
            let _ = writeln!(md, "\nStage {}: classes {:?} absent from truth and prediction, excluded from the mean.", r.stage, r.target.excluded);
        }
    }

    md.push_str("\n## Plots\n\n");
    for (stage, r) in &evals {
        let rows: Vec<&MetricRow> = metrics.iter().filter(|m| m.stage == *stage && m.kind == "train").collect();
        let mut legend = Vec::new();
        let mut series = Vec::new();
        for (name, get) in LOSS_COLUMNS.iter() {
            let raw: Vec<f64> = rows.iter().map(|m| get(m).unwrap_or(f64::NAN)).collect();
            if raw.iter().any(|v| v.is_finite()) {
                legend.push(*name);
                series.push(moving_average(&raw));
            }
        }
        let loss_name = format!("loss_stage{stage}.png");
        save_png(&plot::line_chart(&series), &plots.join(&loss_name))?;
        let iou_name = format!("iou_stage{stage}.png");
        save_png(&plot::bar_chart(&[r.source.per_class_iou.clone(), r.target.per_class_iou.clone()]), &plots.join(&iou_name))?;
        let _ = writeln!(
            md,
            "- `plots/{loss_name}`: stage {stage} training terms, moving average over {SMOOTH} steps ({}).",
            legend.iter().zip(["blue", "orange", "green", "red", "purple"]).map(|(n, c)| format!("{c} {n}")).collect::<Vec<_>>().join(", ")
        );
        let _ = writeln!(md, "- `plots/{iou_name}`: stage {stage} per-class IoU, source in blue and target in orange.");
    }
    let path = run.root.join("report.md");
    std::fs::write(&path, &md).map_err(|e| AppError::io(&path, e))?;
    Ok(md)
}

/// Markdown for a standalone evaluation.
pub fn evaluation_markdown(label: &str, source: &Evaluation, target: &Evaluation, scales: &[f64]) -> String {
    let mut md = format!("# Evaluation of {label}\n\n");
    if scales.is_empty() {
        md.push_str("Single-scale testing.\n\n");
    } else {
        let _ = writeln!(md, "Multi-scale testing, probabilities averaged over scales {scales:?}.\n");
    }
    per_class_table(&mut md, &[("source".into(), source), ("target".into(), target)]);
    md
}
