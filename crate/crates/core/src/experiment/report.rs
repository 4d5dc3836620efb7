//! Run records, the JSON report and its comparison table.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::bench::BenchReport;
use super::grid::FoldStats;
use crate::error::{Error, Result};
use crate::metrics::{IntervalReport, MetricReport};
use crate::nn::TrainHistory;

/// MSE after model selection on each partition.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinalLosses {
    pub train: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<f64>,
}

/// One trained model: configuration, curves and final scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub name: String,
    pub config: Value,
    pub seed: u64,
    pub history: TrainHistory,
    pub losses: FinalLosses,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub folds: Option<FoldStats>,
    /// Frame-level scores on the test partition.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl TrainRun {
    pub fn test_ssim(&self) -> Option<f64> {
        self.metrics.as_ref().map(|m| m.ssim)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub runs: Vec<TrainRun>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intervals: Option<IntervalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bench: Option<Vec<BenchReport>>,
    /// Reserved for externally measured energy; never filled by this crate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_joules: Option<f64>,
    pub table: String,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io_at(path, e))
}

/// Indices of `runs` by test SSIM, best first; runs without SSIM go last.
fn ranking(runs: &[TrainRun]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..runs.len()).collect();
    order.sort_by(|&a, &b| {
        let key = |i: usize| runs[i].test_ssim().unwrap_or(f64::NEG_INFINITY);
        key(b).total_cmp(&key(a))
    });
    order
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

/// Markdown comparison table sorted by test SSIM, descending.
pub fn comparison_table(runs: &[TrainRun], bench: &[BenchReport]) -> String {
    let mut out = String::from(
        "| Model | Train MSE | Validation MSE | Test MSE | Test MAE | Test SSIM | Time/iteration | Total time |\n\
         |---|---|---|---|---|---|---|---|\n",
    );
    for i in ranking(runs) {
        let r = &runs[i];
        let val = match &r.folds {
            Some(f) => format!("{:.4} ± {:.4}", f.mean, f.std),
            None => cell(r.losses.val),
        };
        let b = bench.iter().find(|b| b.label == r.name);
        let time = b.map_or_else(|| "-".to_string(), |b| format!("{:.4} s", b.median_secs));
        let total = match b.and_then(|b| b.stage2_secs.zip(b.stage13_secs)) {
            Some((s2, s13)) => format!("{s2:.1} s + {s13:.1} s"),
            None => b
                .and_then(BenchReport::total_secs)
                .map_or_else(|| "-".to_string(), |t| format!("{t:.1} s")),
        };
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} | {} |",
            r.name,
            cell(Some(r.losses.train)),
            val,
            cell(r.losses.test),
            cell(r.metrics.as_ref().map(|m| m.mae)),
            cell(r.test_ssim()),
            time,
            total
        );
    }
    out
}

/// Histogram of SSIM scores as a standalone SVG bar chart.
pub fn ssim_histogram_svg(scores: &[f64], bins: usize) -> String {
    let bins = bins.max(1);
    let (lo, hi) = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &s| {
            (a.min(s), b.max(s))
        });
    let (lo, hi) = if scores.is_empty() {
        (0.0, 1.0)
    } else {
        (lo, hi)
    };
    let span = (hi - lo).max(1e-12);
    let mut counts = vec![0usize; bins];
    for &s in scores {
        counts[(((s - lo) / span) * bins as f64)
            .floor()
            .clamp(0.0, (bins - 1) as f64) as usize] += 1;
    }
    let peak = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let (w, h, pad) = (640.0, 320.0, 40.0);
    let bar = (w - 2.0 * pad) / bins as f64;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for (i, &c) in counts.iter().enumerate() {
        let bh = (h - 2.0 * pad) * c as f64 / peak;
        let _ = writeln!(
            svg,
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"steelblue\"><title>{c}</title></rect>",
            pad + i as f64 * bar,
            h - pad - bh,
            (bar - 1.0).max(0.5),
            bh
        );
    }
    let _ = writeln!(
        svg,
        "<line x1=\"{pad}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"black\"/>\n\
         <text x=\"{pad}\" y=\"{ty}\" font-size=\"12\">{lo:.3}</text>\n\
         <text x=\"{x2}\" y=\"{ty}\" font-size=\"12\" text-anchor=\"end\">{hi:.3}</text>\n\
         <text x=\"{mid}\" y=\"20\" font-size=\"14\" text-anchor=\"middle\">SSIM per predicted frame (n = {n})</text>\n</svg>",
        y = h - pad,
        x2 = w - pad,
        ty = h - pad + 16.0,
        mid = w / 2.0,
        n = scores.len()
    );
    svg
}

/// Writes the JSON report to `out`, plus an SSIM histogram of the best run
/// to `svg` when asked.
pub fn emit_report(
    runs: &[TrainRun],
    bench: &[BenchReport],
    intervals: Option<IntervalReport>,
    out: &Path,
    svg: Option<&Path>,
) -> Result<ExperimentReport> {
    if runs.is_empty() {
        return Err(Error::InsufficientData(
            "a report needs at least one run".into(),
        ));
    }
    let report = ExperimentReport {
        runs: runs.to_vec(),
        intervals,
        bench: (!bench.is_empty()).then(|| bench.to_vec()),
        energy_joules: None,
        table: comparison_table(runs, bench),
    };
    write_json(out, &report)?;
    if let Some(path) = svg {
        let best = &runs[ranking(runs)[0]];
        let scores = best
            .metrics
            .as_ref()
            .map(|m| m.per_frame_ssim.as_slice())
            .unwrap_or(&[]);
        std::fs::write(path, ssim_histogram_svg(scores, 20)).map_err(|e| Error::io_at(path, e))?;
    }
    Ok(report)
}

pub fn load_report(path: &Path) -> Result<ExperimentReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
