//! Accuracy, multi-seed aggregation, significance tests, parameter accounting
//! and report files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cnn::NetworkSpec;
use crate::error::{Error, Result};

/// Fraction of positions where `predictions` equals `labels`.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Config("accuracy of an empty prediction set".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n − 1 denominator); 0 for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// Natural log of Γ(x) for x > 0 (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection: Γ(x)Γ(1−x) = π / sin(πx)
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).abs().ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

/// `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_tailed(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    regularized_incomplete_beta(0.5 * df, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

/// `P(T ≤ t)` for Student's t.
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    let tail = 0.5 * student_t_two_tailed(t, df);
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Why a t statistic could not be formed normally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Degenerate {
    /// All differences equal and nonzero: p reported as 0.
    ConstantShift,
    /// All differences zero: p reported as 1.
    Identical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    #[serde(with = "lossless_f64")]
    pub t: f64,
    pub df: usize,
    pub p: f64,
    pub mean_diff: f64,
    pub degenerate: Option<Degenerate>,
}

/// JSON has no infinities; non-finite values travel as strings.
mod lossless_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&v.to_string())
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Paired two-tailed t-test on `a − b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "paired samples of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Config(
            "paired t-test needs at least two pairs".into(),
        ));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len();
    let m = mean(&d);
    let sd = sample_std(&d);
    let df = n - 1;
    if sd == 0.0 {
        let (t, p, flag) = if m == 0.0 {
            (0.0, 1.0, Degenerate::Identical)
        } else {
            (m.signum() * f64::INFINITY, 0.0, Degenerate::ConstantShift)
        };
        return Ok(TTest {
            t,
            df,
            p,
            mean_diff: m,
            degenerate: Some(flag),
        });
    }
    let t = m / (sd / (n as f64).sqrt());
    Ok(TTest {
        t,
        df,
        p: student_t_two_tailed(t, df as f64),
        mean_diff: m,
        degenerate: None,
    })
}

/// Per-sample comparison of two classifiers on the same test set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McNemar {
    /// Samples only the first classifier got right.
    pub only_a: usize,
    /// Samples only the second classifier got right.
    pub only_b: usize,
    /// Continuity-corrected chi-square statistic with one degree of freedom.
    pub chi2: f64,
    pub p: f64,
}

pub fn mcnemar_test(correct_a: &[bool], correct_b: &[bool]) -> Result<McNemar> {
    if correct_a.len() != correct_b.len() {
        return Err(Error::Shape("McNemar inputs differ in length".into()));
    }
    let only_a = correct_a
        .iter()
        .zip(correct_b)
        .filter(|(a, b)| **a && !**b)
        .count();
    let only_b = correct_a
        .iter()
        .zip(correct_b)
        .filter(|(a, b)| !**a && **b)
        .count();
    let total = only_a + only_b;
    if total == 0 {
        return Ok(McNemar {
            only_a,
            only_b,
            chi2: 0.0,
            p: 1.0,
        });
    }
    let diff = (only_a as f64 - only_b as f64).abs() - 1.0;
    let chi2 = diff.max(0.0).powi(2) / total as f64;
    // Upper tail of chi-square(1): P(χ² ≥ c) = erfc(√(c/2)).
    let p = statrs::function::erf::erfc((chi2 / 2.0).sqrt());
    Ok(McNemar {
        only_a,
        only_b,
        chi2,
        p,
    })
}

/// Named parameter counts of a model's components.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCounts {
    pub components: Vec<(String, usize)>,
}

impl ParameterCounts {
    pub fn total(&self) -> usize {
        self.components.iter().map(|(_, c)| c).sum()
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.components
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| *c)
    }
}

/// Anything whose trainable parameters can be listed per component.
pub trait CountParameters {
    fn parameter_counts(&self) -> ParameterCounts;
}

impl CountParameters for NetworkSpec {
    fn parameter_counts(&self) -> ParameterCounts {
        ParameterCounts {
            components: self.layer_param_counts(),
        }
    }
}

pub fn count_parameters(model: &impl CountParameters) -> ParameterCounts {
    model.parameter_counts()
}

/// `(μ ± σ)` of fractions as percentages with two decimals.
pub fn format_mean_std(values: &[f64]) -> String {
    format!(
        "{:.2} ± {:.2}",
        100.0 * mean(values),
        100.0 * sample_std(values)
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub accuracy: f64,
    pub config_fingerprint: String,
    pub epochs: usize,
    pub best_val_accuracy: f64,
    pub final_train_loss: f64,
}

/// All seeds of one experimental condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub label: String,
    pub runs: Vec<RunResult>,
}

impl Arm {
    pub fn accuracies(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.accuracy).collect()
    }

    pub fn mean(&self) -> f64 {
        mean(&self.accuracies())
    }

    pub fn std(&self) -> f64 {
        sample_std(&self.accuracies())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub treatment: String,
    /// `mean(treatment) − mean(baseline)`.
    pub delta_mean: f64,
    /// Per-seed paired test of treatment against baseline.
    pub per_seed: TTest,
    /// Per-sample test on one seed's predictions, if available.
    pub per_sample: Option<McNemar>,
}

impl Comparison {
    pub fn between(baseline: &Arm, treatment: &Arm, per_sample: Option<McNemar>) -> Result<Self> {
        let mut pairs: Vec<(f64, f64)> = Vec::new();
        for r in &treatment.runs {
            let b = baseline
                .runs
                .iter()
                .find(|b| b.seed == r.seed)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "seed {} missing from arm {}",
                        r.seed, baseline.label
                    ))
                })?;
            pairs.push((r.accuracy, b.accuracy));
        }
        let (t, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        Ok(Self {
            baseline: baseline.label.clone(),
            treatment: treatment.label.clone(),
            delta_mean: treatment.mean() - baseline.mean(),
            per_seed: paired_t_test(&t, &b)?,
            per_sample,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub config_fingerprint: String,
    pub arms: Vec<Arm>,
    pub comparisons: Vec<Comparison>,
    pub parameter_counts: Vec<(String, ParameterCounts)>,
    pub notes: Vec<String>,
}

impl ExperimentReport {
    pub fn new(name: impl Into<String>, config_fingerprint: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            config_fingerprint: config_fingerprint.into(),
            arms: Vec::new(),
            comparisons: Vec::new(),
            parameter_counts: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn arm(&self, label: &str) -> Option<&Arm> {
        self.arms.iter().find(|a| a.label == label)
    }

    /// Human-readable summary.
    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "experiment: {}", self.name);
        let _ = writeln!(s, "config: {}", self.config_fingerprint);
        let _ = writeln!(s, "\naccuracy (%), mean ± std over seeds");
        for arm in &self.arms {
            let _ = writeln!(
                s,
                "  {:<28} {}  (n = {})",
                arm.label,
                format_mean_std(&arm.accuracies()),
                arm.runs.len()
            );
        }
        if !self.comparisons.is_empty() {
            let _ = writeln!(s, "\ncomparisons (treatment − baseline)");
        }
        for c in &self.comparisons {
            let t = &c.per_seed;
            let _ = write!(
                s,
                "  {} vs {}: Δ = {:+.2} points, per-seed paired t = {:.4}, df = {}, p = {:.4e}",
                c.treatment,
                c.baseline,
                100.0 * c.delta_mean,
                t.t,
                t.df,
                t.p
            );
            if let Some(flag) = t.degenerate {
                let _ = write!(s, " [{flag:?}]");
            }
            let _ = writeln!(s);
            if let Some(m) = &c.per_sample {
                let _ = writeln!(
                    s,
                    "    per-sample McNemar: only-treatment {}, only-baseline {}, chi2 = {:.4}, p = {:.4e}",
                    m.only_a, m.only_b, m.chi2, m.p
                );
            }
        }
        if !self.parameter_counts.is_empty() {
            let _ = writeln!(s, "\nparameters");
        }
        for (model, counts) in &self.parameter_counts {
            let parts: Vec<String> = counts
                .components
                .iter()
                .map(|(n, c)| format!("{n} {c}"))
                .collect();
            let _ = writeln!(
                s,
                "  {model}: {} total ({})",
                counts.total(),
                parts.join(", ")
            );
        }
        for note in &self.notes {
            let _ = writeln!(s, "note: {note}");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub arm: String,
    pub seed: u64,
    pub accuracy: f64,
    pub epochs: usize,
    pub best_val_accuracy: f64,
    pub final_train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub arm: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub mean_std_percent: String,
}

/// Paths written by [`emit_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub runs_csv: PathBuf,
    pub summary_csv: PathBuf,
    pub summary_txt: PathBuf,
    pub report_json: PathBuf,
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, 0, format!("{other:?}")),
    }
}

/// Writes `runs.csv`, `summary.csv`, `summary.txt` and `report.json` into `dir`.
pub fn emit_report(report: &ExperimentReport, dir: &Path) -> Result<ReportFiles> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = ReportFiles {
        runs_csv: dir.join("runs.csv"),
        summary_csv: dir.join("summary.csv"),
        summary_txt: dir.join("summary.txt"),
        report_json: dir.join("report.json"),
    };

    let mut w =
        csv::Writer::from_path(&files.runs_csv).map_err(|e| csv_error(&files.runs_csv, e))?;
    for arm in &report.arms {
        for r in &arm.runs {
            w.serialize(RunRow {
                arm: arm.label.clone(),
                seed: r.seed,
                accuracy: r.accuracy,
                epochs: r.epochs,
                best_val_accuracy: r.best_val_accuracy,
                final_train_loss: r.final_train_loss,
            })
            .map_err(|e| csv_error(&files.runs_csv, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&files.runs_csv, e))?;

    let mut w =
        csv::Writer::from_path(&files.summary_csv).map_err(|e| csv_error(&files.summary_csv, e))?;
    for arm in &report.arms {
        w.serialize(SummaryRow {
            arm: arm.label.clone(),
            n: arm.runs.len(),
            mean: arm.mean(),
            std: arm.std(),
            mean_std_percent: format_mean_std(&arm.accuracies()),
        })
        .map_err(|e| csv_error(&files.summary_csv, e))?;
    }
    w.flush().map_err(|e| Error::io(&files.summary_csv, e))?;

    std::fs::write(&files.summary_txt, report.summary_text())
        .map_err(|e| Error::io(&files.summary_txt, e))?;
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::format(&files.report_json, 0, e.to_string()))?;
    std::fs::write(&files.report_json, json).map_err(|e| Error::io(&files.report_json, e))?;
    Ok(files)
}

pub fn read_runs_csv(path: &Path) -> Result<Vec<RunRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect()
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect()
}

pub fn read_report_json(path: &Path) -> Result<ExperimentReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.column() as u64, e.to_string()))
}
