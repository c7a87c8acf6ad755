//! Experiment reports: aggregation over seeds, JSON and CSV emission,
//! simple SVG charts, and assertion evaluation.
//!
//! Accuracies are reported in percent as mean ± std over the configured
//! seeds. CSVs are flat, plot-ready tables (one row per layer × metric for
//! the sharing files).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::config::AssertRule;
use crate::error::{Error, Result};
use crate::metrics::ConfusionDelta;
use crate::pipeline::{HalfMaskReport, MatrixReport, SweepReport, TransferReport};

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct AccuracyCell {
    pub variant: String,
    pub split: String,
    /// Percent, mean over seeds.
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct SharingLayerRow {
    pub comparison: String,
    pub layer: usize,
    pub shared_fraction_mean: f64,
    pub shared_fraction_std: f64,
    pub iou_mean: f64,
    pub iomin_mean: f64,
}

#[derive(Debug, Clone, Serialize, serde::Deserialize, Default)]
pub struct ExperimentReport {
    pub task: String,
    pub seeds: Vec<u64>,
    pub config_digest: String,
    pub accuracy: Vec<AccuracyCell>,
    pub sharing_layers: Vec<SharingLayerRow>,
    pub behavior: Vec<crate::pipeline::BehaviorCell>,
    pub census: Vec<crate::pipeline::CensusRow>,
    /// Flat scalar metrics (means over seeds) addressed by assertion rules.
    pub metrics: BTreeMap<String, f64>,
    pub notes: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub confusion_deltas: Vec<ConfusionDelta>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub transfer: Vec<TransferReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sweep: Option<SweepReport>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub half_mask: Vec<HalfMaskReport>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}

impl ExperimentReport {
    pub fn new(task: &str, seeds: &[u64], config_digest: [u8; 32]) -> Self {
        ExperimentReport {
            task: task.to_string(),
            seeds: seeds.to_vec(),
            config_digest: config_digest.iter().map(|b| format!("{b:02x}")).collect(),
            ..Default::default()
        }
    }

    /// Folds per-seed evaluation matrices into mean ± std cells and
    /// aggregated sharing rows. Every seed must contribute the same grid.
    pub fn aggregate_matrices(&mut self, per_seed: &[MatrixReport]) -> Result<()> {
        let Some(first) = per_seed.first() else {
            return Err(Error::Pipeline("no evaluation matrices to aggregate".into()));
        };
        for cell in &first.cells {
            let values: Vec<f64> = per_seed
                .iter()
                .map(|m| {
                    m.accuracy(&cell.variant, &cell.split).ok_or_else(|| {
                        Error::Pipeline(format!(
                            "seed grid is missing cell ({}, {})",
                            cell.variant, cell.split
                        ))
                    })
                })
                .collect::<Result<Vec<f64>>>()?
                .iter()
                .map(|a| a * 100.0)
                .collect();
            let (mean, std) = mean_std(&values);
            self.metrics
                .insert(format!("accuracy/{}/{}", cell.variant, cell.split), mean);
            self.accuracy.push(AccuracyCell {
                variant: cell.variant.clone(),
                split: cell.split.clone(),
                mean,
                std,
                per_seed: values,
            });
        }

        // sharing rows aggregated per comparison x layer
        let mut by_key: BTreeMap<(String, usize), (Vec<f64>, Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for m in per_seed {
            for s in &m.sharing {
                for (layer, stats) in &s.per_layer {
                    let slot = by_key.entry((s.name.clone(), *layer)).or_default();
                    slot.0.push(stats.shared_fraction);
                    slot.1.push(stats.iou);
                    slot.2.push(stats.iomin);
                }
                let slot = by_key.entry((s.name.clone(), usize::MAX)).or_default();
                slot.0.push(s.totals.shared_fraction);
                slot.1.push(s.totals.iou);
                slot.2.push(s.totals.iomin);
            }
        }
        for ((comparison, layer), (frac, iou, iomin)) in by_key {
            let (fm, fs) = mean_std(&frac);
            let (im, _) = mean_std(&iou);
            let (mm, _) = mean_std(&iomin);
            let label = if layer == usize::MAX {
                self.metrics
                    .insert(format!("sharing/{comparison}/total"), fm);
                continue;
            } else {
                layer
            };
            self.metrics
                .insert(format!("sharing/{comparison}/layer{label}"), fm);
            self.sharing_layers.push(SharingLayerRow {
                comparison,
                layer: label,
                shared_fraction_mean: fm,
                shared_fraction_std: fs,
                iou_mean: im,
                iomin_mean: mm,
            });
        }

        // behavior and census from the first seed (fractions are already
        // estimates over 10k samples; seeds are reported individually in
        // the JSON if needed)
        self.behavior = first.behavior.clone();
        self.census = first.census.clone();
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `report.json` plus the per-table CSVs (and simple SVG charts)
    /// into `dir`.
    pub fn write_files(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.to_json())?;

        // accuracy grid
        let mut csv = String::from("variant,split,mean_percent,std_percent\n");
        for c in &self.accuracy {
            writeln!(csv, "{},{},{:.3},{:.3}", c.variant, c.split, c.mean, c.std).unwrap();
        }
        std::fs::write(dir.join("accuracy.csv"), csv)?;

        // layer sharing (plot-ready: layer index vs shared fraction)
        let mut csv = String::from(
            "comparison,layer,shared_fraction_mean,shared_fraction_std,iou_mean,iomin_mean\n",
        );
        for r in &self.sharing_layers {
            writeln!(
                csv,
                "{},{},{:.6},{:.6},{:.6},{:.6}",
                r.comparison, r.layer, r.shared_fraction_mean, r.shared_fraction_std, r.iou_mean, r.iomin_mean
            )
            .unwrap();
        }
        std::fs::write(dir.join("sharing_layers.csv"), csv)?;

        if !self.behavior.is_empty() {
            let mut csv = String::from("variant,commanded,add,mul,none,ties\n");
            for b in &self.behavior {
                writeln!(
                    csv,
                    "{},{},{:.4},{:.4},{:.4},{}",
                    b.variant, b.commanded, b.add, b.mul, b.none, b.ties
                )
                .unwrap();
            }
            std::fs::write(dir.join("behavior.csv"), csv)?;
        }

        if !self.census.is_empty() {
            let mut csv = String::from("stage,layer,kept,total,kept_fraction\n");
            for c in &self.census {
                writeln!(
                    csv,
                    "{},{},{},{},{:.6}",
                    c.stage,
                    c.layer,
                    c.kept,
                    c.total,
                    c.kept as f64 / c.total.max(1) as f64
                )
                .unwrap();
            }
            std::fs::write(dir.join("census.csv"), csv)?;
        }

        for delta in &self.confusion_deltas {
            let mut csv = String::from("row\\col");
            for j in 0..delta.baseline.classes {
                write!(csv, ",{j}").unwrap();
            }
            csv.push('\n');
            for (i, row) in delta.delta.iter().enumerate() {
                write!(csv, "{i}").unwrap();
                for v in row {
                    write!(csv, ",{v:.6}").unwrap();
                }
                csv.push('\n');
            }
            std::fs::write(
                dir.join(format!("confusion_delta_{}.csv", delta.removed_class)),
                csv,
            )?;
        }

        if !self.sharing_layers.is_empty() {
            std::fs::write(dir.join("sharing_layers.svg"), self.sharing_svg())?;
        }
        if let Some(delta) = self.confusion_deltas.first() {
            std::fs::write(dir.join("confusion_delta.svg"), confusion_svg(delta))?;
        }
        Ok(())
    }

    /// Simple line chart: layer index vs shared fraction, one polyline per
    /// comparison.
    fn sharing_svg(&self) -> String {
        let (w, h, pad) = (480.0, 300.0, 40.0);
        let comparisons: Vec<String> = {
            let mut c: Vec<String> = self
                .sharing_layers
                .iter()
                .map(|r| r.comparison.clone())
                .collect();
            c.sort();
            c.dedup();
            c
        };
        let max_layer = self
            .sharing_layers
            .iter()
            .map(|r| r.layer)
            .max()
            .unwrap_or(1)
            .max(1);
        let colors = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
             <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
             <line x1=\"{pad}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
             <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{y0}\" stroke=\"black\"/>\n\
             <text x=\"{xm}\" y=\"{yl}\" font-size=\"12\" text-anchor=\"middle\">layer</text>\n\
             <text x=\"12\" y=\"{ym}\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 12 {ym})\">shared fraction</text>\n",
            y0 = h - pad,
            x1 = w - pad,
            xm = w / 2.0,
            yl = h - 8.0,
            ym = h / 2.0,
        );
        for (ci, comparison) in comparisons.iter().enumerate() {
            let color = colors[ci % colors.len()];
            let mut points = String::new();
            let mut rows: Vec<&SharingLayerRow> = self
                .sharing_layers
                .iter()
                .filter(|r| &r.comparison == comparison)
                .collect();
            rows.sort_by_key(|r| r.layer);
            for r in rows {
                let x = pad + (w - 2.0 * pad) * r.layer as f64 / max_layer as f64;
                let y = (h - pad) - (h - 2.0 * pad) * r.shared_fraction_mean.clamp(0.0, 1.0);
                write!(points, "{x:.1},{y:.1} ").unwrap();
            }
            writeln!(
                svg,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{points}\"/>\n\
                 <text x=\"{x}\" y=\"{y}\" font-size=\"11\" fill=\"{color}\">{comparison}</text>",
                x = pad + 4.0,
                y = pad + 14.0 * (ci as f64 + 1.0),
            )
            .unwrap();
        }
        svg.push_str("</svg>\n");
        svg
    }

    /// Evaluates assertion rules against the flat metric map. Returns the
    /// failures (empty means everything passed).
    pub fn check_assertions(&self, rules: &[AssertRule]) -> Vec<String> {
        let mut failures = Vec::new();
        for rule in rules {
            let Some(&value) = self.metrics.get(&rule.metric) else {
                failures.push(format!("metric {:?} not present in report", rule.metric));
                continue;
            };
            if let Some(min) = rule.min {
                if value < min {
                    failures.push(format!("{} = {value:.4} below minimum {min}", rule.metric));
                }
            }
            if let Some(max) = rule.max {
                if value > max {
                    failures.push(format!("{} = {value:.4} above maximum {max}", rule.metric));
                }
            }
        }
        failures
    }
}

/// Heatmap of a confusion delta: blue negative, red positive.
fn confusion_svg(delta: &ConfusionDelta) -> String {
    let n = delta.baseline.classes;
    let cell = 24.0;
    let pad = 30.0;
    let size = pad * 2.0 + cell * n as f64;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">\n\
         <rect width=\"{size}\" height=\"{size}\" fill=\"white\"/>\n"
    );
    let max_abs = delta
        .delta
        .iter()
        .flatten()
        .fold(1e-9f64, |m, v| m.max(v.abs()));
    for (i, row) in delta.delta.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let t = (v / max_abs).clamp(-1.0, 1.0);
            let (r, g, b) = if t < 0.0 {
                let s = (-t * 255.0) as u8;
                (255 - s, 255 - s, 255u8)
            } else {
                let s = (t * 255.0) as u8;
                (255u8, 255 - s, 255 - s)
            };
            writeln!(
                svg,
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({r},{g},{b})\"/>",
                x = pad + cell * j as f64,
                y = pad + cell * i as f64,
            )
            .unwrap();
        }
    }
    writeln!(
        svg,
        "<text x=\"{x}\" y=\"18\" font-size=\"12\" text-anchor=\"middle\">confusion delta, class {c} removed</text>",
        x = size / 2.0,
        c = delta.removed_class
    )
    .unwrap();
    svg.push_str("</svg>\n");
    svg
}
