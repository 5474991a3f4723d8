use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::metrics::{ks_test, relative_improvement, BucketDice, MeanStd, SimilaritySummary};

/// Significance level of the star markers.
pub const SIGNIFICANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub dataset: String,
    pub dice: MeanStd,
    /// Mean SSIM on the dataset's healthy test slices.
    pub ssim: f64,
}

/// Evaluation summary of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    /// One entry per training site, in site order.
    pub datasets: Vec<DatasetMetrics>,
    /// Mean of the per-dataset mean DICE values.
    pub mean_dice: f64,
    /// Mean SSIM over the training sites' healthy test slices.
    pub ssim_healthy: f64,
    /// Mean SSIM over the held-out site's healthy test slices.
    pub ssim_unseen: f64,
    /// Absent for models without an appearance path.
    pub similarity: Option<SimilaritySummary>,
    pub buckets: Vec<BucketDice>,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        for d in &self.datasets {
            ensure!(
                (0.0..=1.0).contains(&d.dice.mean),
                State,
                "DICE {} of {} is outside [0, 1]",
                d.dice.mean,
                d.dataset
            );
            ensure!(
                (-1.0..=1.0).contains(&d.ssim),
                State,
                "SSIM {} of {} is outside [-1, 1]",
                d.ssim,
                d.dataset
            );
        }
        ensure!(
            (-1.0..=1.0).contains(&self.ssim_unseen) && (-1.0..=1.0).contains(&self.ssim_healthy),
            State,
            "SSIM summary outside [-1, 1]"
        );
        Ok(())
    }

    /// `dataset,slices,dice_mean,dice_std,ssim`, one row per site, then the
    /// held-out site and the across-dataset mean.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,slices,dice_mean,dice_std,ssim\n");
        for d in &self.datasets {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                d.dataset, d.dice.n, d.dice.mean, d.dice.std, d.ssim
            );
        }
        let _ = writeln!(out, "unseen,,,,{}", self.ssim_unseen);
        let n: usize = self.datasets.iter().map(|d| d.dice.n).sum();
        let _ = writeln!(out, "mean,{n},{},,{}", self.mean_dice, self.ssim_healthy);
        out
    }

    pub fn buckets_csv(&self) -> String {
        let mut out = String::from("lower_mm2,upper_mm2,slices,dice_mean,dice_std\n");
        for b in &self.buckets {
            let upper = b.upper_mm2.map(|u| u.to_string()).unwrap_or_default();
            match &b.dice {
                Some(s) => {
                    let _ = writeln!(out, "{},{upper},{},{},{}", b.lower_mm2, s.n, s.mean, s.std);
                }
                None => {
                    let _ = writeln!(out, "{},{upper},0,,", b.lower_mm2);
                }
            }
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!(
            "# {}\n\n| dataset | slices | DICE | SSIM |\n|---|---|---|---|\n",
            self.label
        );
        for d in &self.datasets {
            let _ = writeln!(
                out,
                "| {} | {} | {:.3} ± {:.3} | {:.3} |",
                d.dataset, d.dice.n, d.dice.mean, d.dice.std, d.ssim
            );
        }
        let _ = writeln!(out, "| unseen | | | {:.3} |", self.ssim_unseen);
        let _ = writeln!(out, "| **mean** | | {:.3} | {:.3} |", self.mean_dice, self.ssim_healthy);
        if let Some(s) = &self.similarity {
            let _ = writeln!(
                out,
                "\nSAS (lower is better) {:.4}, SCS (higher is better) {:.4}, excluded pairs {}",
                s.sas, s.scs, s.excluded
            );
        }
        out.push_str("\n| lesion area (mm²) | slices | DICE |\n|---|---|---|\n");
        for b in &self.buckets {
            let range = match b.upper_mm2 {
                Some(u) => format!("[{}, {})", b.lower_mm2, u),
                None => format!("≥ {}", b.lower_mm2),
            };
            match &b.dice {
                Some(s) => {
                    let _ = writeln!(out, "| {range} | {} | {:.3} ± {:.3} |", s.n, s.mean, s.std);
                }
                None => {
                    let _ = writeln!(out, "| {range} | 0 | absent |");
                }
            }
        }
        out
    }
}

/// Per-slice DICE values of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceScores {
    pub dataset: String,
    pub dice: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonCell {
    pub dice: MeanStd,
    /// KS p-value of the per-slice DICE against the baseline.
    pub p_value: f64,
    pub statistic: f64,
}

impl ComparisonCell {
    pub fn significant(&self) -> bool {
        self.p_value <= SIGNIFICANCE
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub cells: Vec<ComparisonCell>,
    pub mean_dice: f64,
    /// Relative improvement of `mean_dice` over the baseline's.
    pub relative_improvement: f64,
    pub ssim_healthy: f64,
    pub ssim_unseen: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub datasets: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

/// Assembles the comparison table from runs over the same data.
pub fn compare_reports(runs: &[(MetricsReport, Vec<SliceScores>)], baseline: &str) -> Result<Comparison> {
    let (base_report, base_scores) = runs
        .iter()
        .find(|(r, _)| r.label == baseline)
        .ok_or_else(|| Error::Input(format!("baseline '{baseline}' is not among the compared runs")))?;
    let datasets: Vec<String> = base_report.datasets.iter().map(|d| d.dataset.clone()).collect();
    let mut rows = Vec::with_capacity(runs.len());
    for (report, scores) in runs {
        let names: Vec<&str> = report.datasets.iter().map(|d| d.dataset.as_str()).collect();
        ensure!(
            names == datasets.iter().map(String::as_str).collect::<Vec<_>>(),
            Input,
            "run '{}' covers different datasets",
            report.label
        );
        let mut cells = Vec::with_capacity(datasets.len());
        for (i, d) in report.datasets.iter().enumerate() {
            let ks = ks_test(&scores[i].dice, &base_scores[i].dice)?;
            cells.push(ComparisonCell {
                dice: d.dice,
                p_value: ks.p_value,
                statistic: ks.statistic,
            });
        }
        rows.push(ComparisonRow {
            label: report.label.clone(),
            cells,
            mean_dice: report.mean_dice,
            relative_improvement: relative_improvement(report.mean_dice, base_report.mean_dice)?,
            ssim_healthy: report.ssim_healthy,
            ssim_unseen: report.ssim_unseen,
        });
    }
    Ok(Comparison {
        baseline: baseline.to_string(),
        datasets,
        rows,
    })
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label");
        for d in &self.datasets {
            let _ = write!(out, ",{d}_dice_mean,{d}_dice_std,{d}_ks_d,{d}_ks_p");
        }
        out.push_str(",mean_dice,ri,ssim_healthy,ssim_unseen\n");
        for r in &self.rows {
            out.push_str(&r.label);
            for c in &r.cells {
                let _ = write!(out, ",{},{},{},{}", c.dice.mean, c.dice.std, c.statistic, c.p_value);
            }
            let _ = writeln!(
                out,
                ",{},{},{},{}",
                r.mean_dice, r.relative_improvement, r.ssim_healthy, r.ssim_unseen
            );
        }
        out
    }

    /// Rows are runs, columns datasets; `*` marks p ≤ 0.05 against the baseline.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| method |");
        for d in &self.datasets {
            let _ = write!(out, " {d} |");
        }
        out.push_str(" mean | RI | SSIM healthy | SSIM unseen |\n|---|");
        out.push_str(&"---|".repeat(self.datasets.len() + 4));
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "| {} |", r.label);
            for c in &r.cells {
                let star = if c.significant() { "*" } else { "" };
                let _ = write!(out, " {:.3} ± {:.3}{star} |", c.dice.mean, c.dice.std);
            }
            let _ = writeln!(
                out,
                " {:.3} | {:.0}% | {:.3} | {:.3} |",
                r.mean_dice,
                100.0 * r.relative_improvement,
                r.ssim_healthy,
                r.ssim_unseen
            );
        }
        let _ = writeln!(
            out,
            "\nRI and `*` (KS test, p ≤ {SIGNIFICANCE}) are relative to {}.",
            self.baseline
        );
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [("comparison.csv", self.to_csv()), ("comparison.md", self.to_markdown())] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}
