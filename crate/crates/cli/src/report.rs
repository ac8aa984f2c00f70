//! Run directories, JSON reports, loss-curve files and SVG plots.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};
use unidec_core::metrics::{DetMetrics, PlanMetrics};
use unidec_core::trainer::{LossComponents, StepLog};

use crate::bench::LatencyComparison;
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const REPORT_FILE: &str = "report.json";
pub const CURVE_PREFIX: &str = "curve_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageLoss {
    pub stage: String,
    pub steps: usize,
    pub final_train: Option<LossComponents>,
    pub final_train_total: Option<f64>,
    pub val: Option<LossComponents>,
    pub val_total: Option<f64>,
    pub diverged_at: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointRef {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentReport {
    /// The resolved config, defaults expanded.
    pub config: ExperimentConfig,
    pub stage_losses: Vec<StageLoss>,
    pub plan_metrics: Option<PlanMetrics>,
    pub det_metrics: Option<DetMetrics>,
    pub latency: Option<LatencyComparison>,
    pub checkpoints: Vec<CheckpointRef>,
    pub runtime_s: f64,
}

impl ExperimentReport {
    pub fn new(config: &ExperimentConfig) -> Self {
        Self {
            config: config.clone(),
            stage_losses: Vec::new(),
            plan_metrics: None,
            det_metrics: None,
            latency: None,
            checkpoints: Vec::new(),
            runtime_s: 0.0,
        }
    }
}

/// Creates a fresh `<root>/<command>-<unix seconds>[-k]` directory; never reuses one.
pub fn create_run_dir(root: &Path, command: &str) -> CliResult<PathBuf> {
    std::fs::create_dir_all(root).map_err(CliError::io(root))?;
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    for k in 0.. {
        let name = if k == 0 { format!("{command}-{stamp}") } else { format!("{command}-{stamp}-{k}") };
        let dir = root.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(CliError::Io { path: dir, source: e }),
        }
    }
    unreachable!()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Format { what: "report", msg: e.to_string() })?;
    std::fs::write(path, text).map_err(CliError::io(path))
}

/// Two columns: step and total loss.
pub fn write_curve(dir: &Path, name: &str, curve: &[StepLog]) -> CliResult<PathBuf> {
    let path = dir.join(format!("{CURVE_PREFIX}{name}.txt"));
    let mut text = String::from("# step total\n");
    for s in curve {
        text.push_str(&format!("{} {}\n", s.step, s.total));
    }
    std::fs::write(&path, text).map_err(CliError::io(&path))?;
    Ok(path)
}

pub fn read_curve(path: &Path) -> CliResult<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        let mut it = line.split_whitespace().map(str::parse::<f64>);
        match (it.next(), it.next()) {
            (Some(Ok(x)), Some(Ok(y))) => out.push((x, y)),
            _ => return Err(CliError::Format { what: "loss curve", msg: format!("{}: bad line {line:?}", path.display()) }),
        }
    }
    Ok(out)
}

fn plot_err(e: impl std::fmt::Display) -> CliError {
    CliError::Format { what: "plot", msg: e.to_string() }
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    (lo - pad, hi + pad)
}

fn plot_curves(path: &Path, curves: &[(String, Vec<(f64, f64)>)]) -> CliResult<()> {
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let (x0, x1) = bounds(curves.iter().flat_map(|(_, c)| c.iter().map(|p| p.0)));
    let (y0, y1) = bounds(curves.iter().flat_map(|(_, c)| c.iter().map(|p| p.1)));
    let mut chart = ChartBuilder::on(&root)
        .caption("training loss", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(35)
        .y_label_area_size(55)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("step").y_desc("total loss").draw().map_err(plot_err)?;
    for (i, (name, pts)) in curves.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color))
            .map_err(plot_err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)
}

fn plot_bars(path: &Path, title: &str, bars: &[(String, f64)]) -> CliResult<()> {
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let top = bars.iter().map(|b| b.1).filter(|v| v.is_finite()).fold(0.0f64, f64::max).max(1e-9) * 1.15;
    let n = bars.len();
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(35)
        .y_label_area_size(55)
        .build_cartesian_2d((0..n).into_segmented(), 0.0..top)
        .map_err(plot_err)?;
    let names: Vec<String> = bars.iter().map(|b| b.0.clone()).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_label_formatter(&|v| match v {
            SegmentValue::CenterOf(i) => names.get(*i).cloned().unwrap_or_default(),
            _ => String::new(),
        })
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(bars.iter().enumerate().map(|(i, (_, v))| {
            let mut r = Rectangle::new([(SegmentValue::Exact(i), 0.0), (SegmentValue::Exact(i + 1), *v)], Palette99::pick(i).filled());
            r.set_margin(0, 0, 12, 12);
            r
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

fn expected_artifacts() -> String {
    format!("{REPORT_FILE} or {CURVE_PREFIX}<name>.txt files (written by pretrain, train, eval and bench-latency runs)")
}

/// Renders every report and curve under `dir` (searched one level deep) into SVG files in `dir`.
pub fn render(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut candidates = vec![dir.to_path_buf()];
    if let Ok(rd) = std::fs::read_dir(dir) {
        let mut subs: Vec<PathBuf> = rd.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_dir()).collect();
        subs.sort();
        candidates.extend(subs);
    } else {
        return Err(CliError::NoArtifacts { dir: dir.to_path_buf(), expected: expected_artifacts() });
    }
    let mut curves = Vec::new();
    let mut reports = Vec::new();
    for d in &candidates {
        let label = d.strip_prefix(dir).ok().filter(|p| !p.as_os_str().is_empty()).map(|p| p.display().to_string());
        let mut files: Vec<PathBuf> = std::fs::read_dir(d).map_err(CliError::io(d))?.filter_map(|e| e.ok()).map(|e| e.path()).collect();
        files.sort();
        for f in files {
            let name = f.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            if name.starts_with(CURVE_PREFIX) && name.ends_with(".txt") {
                let stem = name.trim_start_matches(CURVE_PREFIX).trim_end_matches(".txt");
                let full = label.as_ref().map_or(stem.to_string(), |l| format!("{l}/{stem}"));
                curves.push((full, read_curve(&f)?));
            } else if name == REPORT_FILE {
                let text = std::fs::read_to_string(&f).map_err(CliError::io(&f))?;
                let r: ExperimentReport =
                    serde_json::from_str(&text).map_err(|e| CliError::Format { what: "report", msg: format!("{}: {e}", f.display()) })?;
                reports.push((label.clone().unwrap_or_else(|| ".".into()), r));
            }
        }
    }
    if curves.is_empty() && reports.is_empty() {
        return Err(CliError::NoArtifacts { dir: dir.to_path_buf(), expected: expected_artifacts() });
    }
    let mut written = Vec::new();
    if !curves.is_empty() {
        let p = dir.join("loss_curves.svg");
        plot_curves(&p, &curves)?;
        written.push(p);
    }
    let mut metric_bars = Vec::new();
    let mut latency_bars = Vec::new();
    for (label, r) in &reports {
        if let Some(pm) = &r.plan_metrics {
            for (h, v) in pm.horizons.iter().zip(&pm.l2_per_horizon) {
                metric_bars.push((format!("{label} L2@{}", h + 1), *v));
            }
            metric_bars.push((format!("{label} L2 avg"), pm.l2_avg));
            metric_bars.push((format!("{label} coll avg"), pm.collision_avg));
        }
        if let Some(dm) = &r.det_metrics {
            metric_bars.push((format!("{label} recall"), dm.recall));
            metric_bars.push((format!("{label} AP"), dm.ap));
        }
        if let Some(lat) = &r.latency {
            latency_bars.push((format!("{label} full"), lat.full.median_ms));
            latency_bars.push((format!("{label} truncated"), lat.truncated.median_ms));
        }
    }
    if !metric_bars.is_empty() {
        let p = dir.join("metrics.svg");
        plot_bars(&p, "evaluation metrics", &metric_bars)?;
        written.push(p);
    }
    if !latency_bars.is_empty() {
        let ratios: Vec<String> = reports.iter().filter_map(|(_, r)| r.latency.as_ref().map(|l| format!("{:.2}", l.ratio))).collect();
        let p = dir.join("latency.svg");
        plot_bars(&p, &format!("median latency, ms (truncated/full = {})", ratios.join(", ")), &latency_bars)?;
        written.push(p);
    }
    Ok(written)
}
