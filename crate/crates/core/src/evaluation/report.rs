use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use super::{QualityScore, QualitySource, RocResult};
use crate::training::create_dir;
use crate::{Error, Result};

pub const REPORT_FILE: &str = "report.md";
pub const PLOT_FILE: &str = "roc_logfar.svg";
pub const QUALITY_FILE: &str = "quality.csv";
pub const META_FILE: &str = "meta.json";
pub const CURVE_PREFIX: &str = "roc_";

/// Verification with and without deblurring at one blur level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaRow {
    pub sigma: f64,
    pub blurred: RocResult,
    pub deblurred: RocResult,
}

/// Deblurred verification of one ablation variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub slug: String,
    pub roc: RocResult,
}

/// Everything written by [`emit_report`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub sigma_rows: Vec<SigmaRow>,
    pub ablation_rows: Vec<AblationRow>,
    pub quality: Vec<QualityScore>,
    /// Seeds, pair-list hashes and checkpoint hashes.
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl Report {
    /// `(file stem, legend label, curve)` of every ROC in the report.
    pub fn curves(&self) -> Vec<(String, String, &RocResult)> {
        let mut out = Vec::new();
        for r in &self.sigma_rows {
            out.push((format!("sigma{}_blurred", r.sigma), format!("σ={} w/o deblurring", r.sigma), &r.blurred));
            out.push((format!("sigma{}_deblurred", r.sigma), format!("σ={} w/ deblurring", r.sigma), &r.deblurred));
        }
        for r in &self.ablation_rows {
            out.push((r.slug.clone(), r.name.clone(), &r.roc));
        }
        out
    }

    /// Markdown tables of the report.
    pub fn markdown(&self) -> String {
        let mut s = String::from("# Verification report\n");
        if !self.sigma_rows.is_empty() {
            s.push_str("\n| σ | Data | EER | AUC |\n| --- | --- | --- | --- |\n");
            for r in &self.sigma_rows {
                let _ = writeln!(s, "| {} | w/o deblurring | {:.4} | {:.4} |", r.sigma, r.blurred.eer, r.blurred.auc);
                let _ = writeln!(s, "|  | w/ deblurring | {:.4} | {:.4} |", r.deblurred.eer, r.deblurred.auc);
            }
        }
        if !self.ablation_rows.is_empty() {
            s.push_str("\n| Model | EER | AUC |\n| --- | --- | --- |\n");
            for r in &self.ablation_rows {
                let _ = writeln!(s, "| {} | {:.4} | {:.4} |", r.name, r.roc.eer, r.roc.auc);
            }
        }
        if !self.quality.is_empty() {
            let proxy = self.quality.iter().any(|q| q.source == QualitySource::Proxy);
            let label = if proxy { "proxy" } else { "external" };
            let mean = self.quality.iter().map(|q| q.score as f64).sum::<f64>() / self.quality.len() as f64;
            let _ = writeln!(
                s,
                "\nQuality ({label}): mean {mean:.1} over {} images, see `{QUALITY_FILE}`.",
                self.quality.len()
            );
        }
        s
    }
}

fn curve_csv(roc: &RocResult) -> String {
    let mut s = String::from("threshold,far,tar\n");
    for ((t, f), r) in roc.thresholds.iter().zip(&roc.far).zip(&roc.tar) {
        let _ = writeln!(s, "{t:.10},{f:.10},{r:.10}");
    }
    s
}

fn quality_csv(scores: &[QualityScore]) -> String {
    let mut s = String::from("name,score,source,warning\n");
    for q in scores {
        let source = match q.source {
            QualitySource::External => "external",
            QualitySource::Proxy => "proxy",
        };
        let warning = q.warning.as_deref().unwrap_or("").replace(['"', '\n'], " ");
        let _ = writeln!(s, "{},{},{source},\"{warning}\"", q.name, q.score);
    }
    s
}

fn write(path: &Path, text: &str) -> Result<PathBuf> {
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

fn plot(path: &Path, curves: &[(String, String, &RocResult)]) -> Result<()> {
    let plot_err = |e: String| Error::format(path, e);
    let min_far = curves
        .iter()
        .flat_map(|(_, _, r)| r.far.iter().copied())
        .filter(|&f| f > 0.0)
        .fold(1.0f64, f64::min);
    let lo = 10f64.powf(min_far.log10().floor()).min(0.1);
    let root = SVGBackend::new(path, (720, 540)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("ROC (log FAR)", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(48)
        .build_cartesian_2d((lo..1.0f64).log_scale(), 0.0f64..1.0)
        .map_err(|e| plot_err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc("FAR")
        .y_desc("TAR")
        .draw()
        .map_err(|e| plot_err(e.to_string()))?;
    for (i, (_, label, roc)) in curves.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let points: Vec<(f64, f64)> = roc
            .far
            .iter()
            .zip(&roc.tar)
            .filter(|(f, _)| **f > 0.0)
            .map(|(&f, &t)| (f, t))
            .collect();
        chart
            .draw_series(LineSeries::new(points, color.stroke_width(2)))
            .map_err(|e| plot_err(e.to_string()))?
            .label(label.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .position(SeriesLabelPosition::LowerRight)
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(e.to_string()))?;
    root.present().map_err(|e| plot_err(e.to_string()))
}

/// Writes `report.md`, one `roc_<name>.csv` per curve, `roc_logfar.svg`,
/// `quality.csv` (when scores are present) and `meta.json`. Returns the paths.
pub fn emit_report(report: &Report, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if report.sigma_rows.is_empty() && report.ablation_rows.is_empty() {
        return Err(Error::Data("the report has no results".into()));
    }
    create_dir(out_dir)?;
    let mut written = vec![write(&out_dir.join(REPORT_FILE), &report.markdown())?];
    let curves = report.curves();
    for (stem, _, roc) in &curves {
        written.push(write(&out_dir.join(format!("{CURVE_PREFIX}{stem}.csv")), &curve_csv(roc))?);
    }
    let plot_path = out_dir.join(PLOT_FILE);
    plot(&plot_path, &curves)?;
    written.push(plot_path);
    if !report.quality.is_empty() {
        written.push(write(&out_dir.join(QUALITY_FILE), &quality_csv(&report.quality))?);
    }
    let meta = serde_json::to_string_pretty(&report.meta).expect("meta serializes");
    written.push(write(&out_dir.join(META_FILE), &(meta + "\n"))?);
    Ok(written)
}
