//! Reconstruction metrics and the paired model-comparison protocol.
//!
//! Differences are normality-tested with Shapiro-Wilk; Wilcoxon signed-rank is
//! used when normality is rejected at `alpha`, a paired t-test otherwise.

mod metrics;
mod stats;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use metrics::{mse, psnr, psnr_from_mse, ssim, SsimConfig};
pub use stats::{
    paired_t_test, sample_sd, shapiro_wilk, slope_regression, wilcoxon_signed_rank, PairedT, ShapiroWilk, SlopeFit,
    Wilcoxon, WilcoxonMethod, WILCOXON_EXACT_MAX,
};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Which image a metrics row scores against the standard-dose reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelTag {
    T1Ld,
    SingleSession,
    Longitudinal,
}

impl ModelTag {
    pub const ALL: [ModelTag; 3] = [ModelTag::T1Ld, ModelTag::SingleSession, ModelTag::Longitudinal];

    pub fn tag(self) -> &'static str {
        match self {
            ModelTag::T1Ld => "t1_ld",
            ModelTag::SingleSession => "single_session",
            ModelTag::Longitudinal => "longitudinal",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ModelTag::T1Ld => "T1-LD",
            ModelTag::SingleSession => "Single Session",
            ModelTag::Longitudinal => "Longitudinal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| Error::invalid(format!("unknown model tag {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Mse,
    Psnr,
    Ssim,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Mse, Metric::Psnr, Metric::Ssim];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Mse => "mse",
            Metric::Psnr => "psnr",
            Metric::Ssim => "ssim",
        }
    }

    pub fn higher_is_better(self) -> bool {
        !matches!(self, Metric::Mse)
    }

    pub fn of(self, row: &MetricsRow) -> f64 {
        match self {
            Metric::Mse => row.mse,
            Metric::Psnr => row.psnr,
            Metric::Ssim => row.ssim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub subject_id: String,
    pub model: ModelTag,
    pub dose: f64,
    /// Raw mean squared error (tables show it scaled by 100).
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// How metrics are computed for one row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricOptions {
    pub masked: bool,
    pub data_range: f64,
    pub ssim: SsimConfig,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            masked: true,
            data_range: 1.0,
            ssim: SsimConfig::default(),
        }
    }
}

/// Score `pred` against `reference`; `mask` is ignored unless `opts.masked`.
pub fn score(
    subject_id: &str,
    model: ModelTag,
    dose: f64,
    pred: &Volume,
    reference: &Volume,
    mask: Option<&[bool]>,
    opts: &MetricOptions,
) -> Result<MetricsRow> {
    let mask = if opts.masked { mask } else { None };
    let e = mse(pred, reference, mask)?;
    let ssim_cfg = SsimConfig {
        data_range: opts.data_range,
        ..opts.ssim
    };
    Ok(MetricsRow {
        subject_id: subject_id.to_string(),
        model,
        dose,
        mse: e,
        psnr: psnr_from_mse(e, opts.data_range)?,
        ssim: ssim(pred, reference, mask, &ssim_cfg)?,
    })
}

fn fmt_f64(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v}")
    }
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    match s {
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        _ => s
            .parse()
            .map_err(|_| Error::format("metrics csv", format!("line {line}: bad number {s:?}"))),
    }
}

pub const METRICS_HEADER: &str = "subject,model,dose,mse,psnr,ssim";

/// CSV with header `subject,model,dose,mse,psnr,ssim`; values round-trip exactly.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.subject_id,
            r.model.tag(),
            fmt_f64(r.dose),
            fmt_f64(r.mse),
            fmt_f64(r.psnr),
            fmt_f64(r.ssim)
        );
    }
    s
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::format("metrics csv", format!("expected header {METRICS_HEADER:?}")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(Error::format("metrics csv", format!("line {}: expected 6 fields", i + 2)));
            }
            Ok(MetricsRow {
                subject_id: f[0].to_string(),
                model: ModelTag::parse(f[1])?,
                dose: parse_f64(f[2], i + 2)?,
                mse: parse_f64(f[3], i + 2)?,
                psnr: parse_f64(f[4], i + 2)?,
                ssim: parse_f64(f[5], i + 2)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    Wilcoxon,
    PairedT,
    /// Every paired difference is zero.
    NoDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        Self {
            mean: values.iter().sum::<f64>() / values.len().max(1) as f64,
            sd: sample_sd(values),
            n: values.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub metric: Metric,
    pub model_a: ModelTag,
    pub model_b: ModelTag,
    pub summary_a: Summary,
    pub summary_b: Summary,
    /// Shapiro-Wilk p on `a - b`; `None` when the test is undefined
    /// (fewer than 3 pairs or constant differences).
    pub normality_p: Option<f64>,
    pub alpha: f64,
    pub test: TestKind,
    pub statistic: f64,
    pub p_value: f64,
    /// Model with the better mean, `None` on a tie.
    pub better: Option<ModelTag>,
}

/// Index one model's rows by subject, rejecting duplicates.
fn by_subject(rows: &[MetricsRow]) -> Result<BTreeMap<&str, &MetricsRow>> {
    let mut map = BTreeMap::new();
    for r in rows {
        if map.insert(r.subject_id.as_str(), r).is_some() {
            return Err(Error::invalid(format!("duplicate rows for subject {}", r.subject_id)));
        }
    }
    Ok(map)
}

/// Paired comparison of two models' rows on one metric.
pub fn compare_models(rows_a: &[MetricsRow], rows_b: &[MetricsRow], metric: Metric, alpha: f64) -> Result<ComparisonReport> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let (ma, mb) = (by_subject(rows_a)?, by_subject(rows_b)?);
    let only_a: Vec<&str> = ma.keys().filter(|k| !mb.contains_key(*k)).copied().collect();
    let only_b: Vec<&str> = mb.keys().filter(|k| !ma.contains_key(*k)).copied().collect();
    if !only_a.is_empty() || !only_b.is_empty() {
        return Err(Error::invalid(format!(
            "subject sets differ: missing from second model {only_a:?}, missing from first model {only_b:?}"
        )));
    }
    if ma.is_empty() {
        return Err(Error::invalid("no rows to compare"));
    }
    let model_of = |m: &BTreeMap<&str, &MetricsRow>| m.values().next().map(|r| r.model).expect("non-empty");
    let (model_a, model_b) = (model_of(&ma), model_of(&mb));
    let a: Vec<f64> = ma.values().map(|r| metric.of(r)).collect();
    let b: Vec<f64> = mb.values().map(|r| metric.of(r)).collect();
    let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let (summary_a, summary_b) = (Summary::of(&a), Summary::of(&b));

    let normality_p = shapiro_wilk(&d).ok().map(|r| r.p);
    let (test, statistic, p_value) = if d.iter().all(|&v| v == 0.0) {
        (TestKind::NoDifference, 0.0, 1.0)
    } else if normality_p.map_or(true, |p| p < alpha) {
        let w = wilcoxon_signed_rank(&a, &b)?;
        (TestKind::Wilcoxon, w.statistic, w.p)
    } else {
        let t = paired_t_test(&a, &b)?;
        (TestKind::PairedT, t.t, t.p)
    };
    let better = if summary_a.mean == summary_b.mean {
        None
    } else if (summary_b.mean > summary_a.mean) == metric.higher_is_better() {
        Some(model_b)
    } else {
        Some(model_a)
    };
    Ok(ComparisonReport {
        metric,
        model_a,
        model_b,
        summary_a,
        summary_b,
        normality_p,
        alpha,
        test,
        statistic,
        p_value,
        better,
    })
}

/// Rows for one model, in input order.
pub fn rows_for(rows: &[MetricsRow], model: ModelTag) -> Vec<MetricsRow> {
    rows.iter().filter(|r| r.model == model).cloned().collect()
}

fn cell(values: &[f64], scale: f64) -> String {
    let v: Vec<f64> = values.iter().map(|x| x * scale).collect();
    let s = Summary::of(&v);
    format!("{:.4} ± {:.4}", s.mean, s.sd)
}

fn p_cell(p: f64) -> String {
    if p < 1e-4 {
        "p < 0.0001".into()
    } else {
        format!("p = {p:.4}")
    }
}

/// Plain-text table: one row per model present (T1-LD, Single Session,
/// Longitudinal order), MSE scaled by 100, and a final p-value row when
/// comparisons are supplied in metric order.
pub fn render_table(rows: &[MetricsRow], comparisons: &[ComparisonReport]) -> String {
    let header = ["Model", "MSE (x10^-2)", "PSNR (dB)", "SSIM"];
    let mut body: Vec<[String; 4]> = Vec::new();
    for model in ModelTag::ALL {
        let r = rows_for(rows, model);
        if r.is_empty() {
            continue;
        }
        let col = |m: Metric, scale: f64| cell(&r.iter().map(|x| m.of(x)).collect::<Vec<_>>(), scale);
        body.push([
            model.label().to_string(),
            col(Metric::Mse, 100.0),
            col(Metric::Psnr, 1.0),
            col(Metric::Ssim, 1.0),
        ]);
    }
    if !comparisons.is_empty() {
        let mut p = [String::new(), String::new(), String::new(), String::new()];
        for c in comparisons {
            let i = 1 + Metric::ALL.iter().position(|m| *m == c.metric).expect("known metric");
            p[i] = p_cell(c.p_value);
        }
        body.push(p);
    }
    let widths: Vec<usize> = (0..4)
        .map(|i| body.iter().map(|r| r[i].chars().count()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| -> String {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        padded.join(" | ").trim_end().to_string()
    };
    let mut out = String::new();
    out.push_str(&line(&header.map(String::from)));
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
    out.push('\n');
    for r in &body {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}
