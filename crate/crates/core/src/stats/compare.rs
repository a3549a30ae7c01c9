use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::CvReport;

use super::procedures::{anova_rm, bartlett, shapiro_wilk, t_test_independent, tukey_hsd, wilcoxon_rank_sum};
use super::{SampleVector, TestResult};

/// Two-sample test selected by [`compare_augmentation`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TwoSampleBranch {
    TTest,
    Welch,
    Wilcoxon,
}

impl fmt::Display for TwoSampleBranch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TwoSampleBranch::TTest => "t-test",
            TwoSampleBranch::Welch => "welch",
            TwoSampleBranch::Wilcoxon => "wilcoxon-rank-sum",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationComparison {
    pub model: String,
    /// Shapiro-Wilk on the scores without and with augmentation.
    pub normality: [TestResult; 2],
    /// Bartlett's test, run only when both samples look normal.
    pub variance: Option<TestResult>,
    pub branch: TwoSampleBranch,
    pub reason: String,
    pub result: TestResult,
    /// `mean(aug) - mean(no_aug)` in percentage points.
    pub mean_delta_pp: f64,
}

/// Chooses and runs the two-sample test for the effect of augmentation.
///
/// Both samples normal (Shapiro-Wilk p > 0.05) leads to Bartlett's test and
/// then the pooled t-test (p > 0.05) or Welch's test. Otherwise the
/// Wilcoxon rank-sum test is used. A constant sample counts as not normal.
pub fn compare_augmentation(no_aug: &SampleVector, aug: &SampleVector) -> Result<AugmentationComparison> {
    let sw = [shapiro_wilk(no_aug)?, shapiro_wilk(aug)?];
    let mut variance = None;
    let (branch, reason, result) = if sw.iter().all(TestResult::passes) {
        let b = bartlett(no_aug, aug)?;
        let equal = b.passes();
        let bp = b.p_value.unwrap_or(0.0);
        variance = Some(b);
        if equal {
            (
                TwoSampleBranch::TTest,
                format!("both samples normal; Bartlett p = {bp:.4} > 0.05"),
                t_test_independent(aug, no_aug, true)?,
            )
        } else {
            (
                TwoSampleBranch::Welch,
                format!("both samples normal; Bartlett p = {bp:.4} <= 0.05"),
                t_test_independent(aug, no_aug, false)?,
            )
        }
    } else {
        let failed: Vec<&str> = sw
            .iter()
            .zip([&no_aug.label, &aug.label])
            .filter(|(r, _)| !r.passes())
            .map(|(_, l)| l.as_str())
            .collect();
        (
            TwoSampleBranch::Wilcoxon,
            format!("normality rejected or undefined for {}", failed.join(", ")),
            wilcoxon_rank_sum(aug, no_aug)?,
        )
    };
    let result = result.note(format!("branch: {branch}"));
    Ok(AugmentationComparison {
        model: no_aug.label.clone(),
        normality: sw,
        variance,
        branch,
        reason,
        result,
        mean_delta_pp: 100.0 * (aug.mean() - no_aug.mean()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalityEntry {
    pub model: String,
    pub result: TestResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseComparison {
    pub model_a: String,
    pub model_b: String,
    pub mean_a: f64,
    pub mean_b: f64,
    /// `mean_a - mean_b` in percentage points.
    pub mean_delta_pp: f64,
    /// `(mean_a - mean_b) / mean_b` in percent; `None` when `mean_b` is 0.
    pub relative_change_pct: Option<f64>,
    pub result: TestResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub metric: String,
    pub models: Vec<String>,
    pub means: Vec<f64>,
    pub normality: Vec<NormalityEntry>,
    /// Present when at least three models are compared.
    pub omnibus: Option<TestResult>,
    pub pairwise: Vec<PairwiseComparison>,
    pub augmentation: Vec<AugmentationComparison>,
    pub notes: Vec<String>,
}

impl ComparisonReport {
    /// Pairwise comparisons involving `model`.
    pub fn pairs_with<'a>(&'a self, model: &'a str) -> impl Iterator<Item = &'a PairwiseComparison> + 'a {
        self.pairwise.iter().filter(move |p| p.model_a == model || p.model_b == model)
    }

    /// One sentence per pairwise and augmentation comparison.
    pub fn narrative(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(o) = &self.omnibus {
            out.push(format!(
                "ANOVA-RM on {}: F = {:.3}, p = {}",
                self.metric,
                o.statistic,
                fmt_p(o.p_value)
            ));
        }
        for p in &self.pairwise {
            let dir = if p.mean_delta_pp < 0.0 { "a decrease" } else { "an increase" };
            let rel = p
                .relative_change_pct
                .map(|r| format!(" ({r:+.1}% relative)"))
                .unwrap_or_default();
            out.push(format!(
                "{} shows {dir} of {:+.1} pp{rel} compared to {} (p = {}, {})",
                p.model_a,
                p.mean_delta_pp,
                p.model_b,
                fmt_p(p.result.p_value),
                if p.result.significant { "significant" } else { "not significant" }
            ));
        }
        for a in &self.augmentation {
            out.push(format!(
                "{}: augmentation changes {} by {:+.1} pp ({}, p = {})",
                a.model,
                self.metric,
                a.mean_delta_pp,
                a.branch,
                fmt_p(a.result.p_value)
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn fmt_p(p: Option<f64>) -> String {
    match p {
        Some(p) if p < 0.001 => format!("{p:.2e}"),
        Some(p) => format!("{p:.3}"),
        None => "undefined".into(),
    }
}

/// Shapiro-Wilk per model, ANOVA-RM across models and Tukey HSD pairwise.
///
/// All samples must hold fold scores in the same fold order.
pub fn compare_models(samples: &[SampleVector], metric: &str) -> Result<ComparisonReport> {
    let mut notes = Vec::new();
    let mut normality = Vec::with_capacity(samples.len());
    for s in samples {
        match shapiro_wilk(s) {
            Ok(r) => normality.push(NormalityEntry {
                model: s.label.clone(),
                result: r,
            }),
            Err(e) => notes.push(format!("normality not assessed for {}: {e}", s.label)),
        }
    }
    let omnibus = if samples.len() >= 3 {
        notes.push("ANOVA-RM without sphericity correction".into());
        Some(anova_rm(samples)?)
    } else {
        notes.push("fewer than three models; omnibus test skipped".into());
        None
    };
    let tukey = tukey_hsd(samples)?;
    let mut pairwise = Vec::with_capacity(tukey.len());
    let mut it = tukey.into_iter();
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            let result = it.next().expect("one Tukey result per pair");
            let (ma, mb) = (samples[i].mean(), samples[j].mean());
            pairwise.push(PairwiseComparison {
                model_a: samples[i].label.clone(),
                model_b: samples[j].label.clone(),
                mean_a: ma,
                mean_b: mb,
                mean_delta_pp: 100.0 * (ma - mb),
                relative_change_pct: (mb != 0.0).then(|| 100.0 * (ma - mb) / mb),
                result,
            });
        }
    }
    Ok(ComparisonReport {
        metric: metric.to_string(),
        models: samples.iter().map(|s| s.label.clone()).collect(),
        means: samples.iter().map(SampleVector::mean).collect(),
        normality,
        omnibus,
        pairwise,
        augmentation: Vec::new(),
        notes,
    })
}

fn report_label(r: &CvReport) -> String {
    if r.augmentation {
        format!("{}+aug", r.backbone)
    } else {
        r.backbone.clone()
    }
}

fn fold_test_ids(r: &CvReport) -> Vec<Vec<&str>> {
    let mut folds: Vec<_> = r.folds.iter().collect();
    folds.sort_by_key(|f| f.fold);
    folds
        .iter()
        .map(|f| {
            let mut ids: Vec<&str> = f.predictions.iter().map(|p| p.id.as_str()).collect();
            ids.sort_unstable();
            ids
        })
        .collect()
}

/// Errors unless every report used the same folds with the same test ids.
fn check_aligned(reports: &[&CvReport]) -> Result<()> {
    let Some(first) = reports.first() else {
        return Err(Error::Stats("no reports to compare".into()));
    };
    let ids = fold_test_ids(first);
    for r in &reports[1..] {
        if r.k != first.k || r.seed != first.seed || r.task != first.task {
            return Err(Error::Stats(format!(
                "{} uses k={} seed={} {:?}, {} uses k={} seed={} {:?}",
                report_label(first),
                first.k,
                first.seed,
                first.task,
                report_label(r),
                r.k,
                r.seed,
                r.task
            )));
        }
        if fold_test_ids(r) != ids {
            return Err(Error::Stats(format!(
                "{} and {} were evaluated on different folds",
                report_label(first),
                report_label(r)
            )));
        }
    }
    Ok(())
}

fn samples_of(r: &CvReport, metric: &str) -> Result<SampleVector> {
    let mut folds: Vec<_> = r.folds.iter().collect();
    folds.sort_by_key(|f| f.fold);
    let values = folds
        .iter()
        .map(|f| {
            f.metrics
                .get(metric)
                .ok_or_else(|| Error::Stats(format!("unknown metric {metric:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    SampleVector::new(report_label(r), values)
}

/// [`compare_models`] over cross-validation reports that share a fold plan.
pub fn compare_cv_reports(reports: &[CvReport], metric: &str) -> Result<ComparisonReport> {
    check_aligned(&reports.iter().collect::<Vec<_>>())?;
    let samples = reports.iter().map(|r| samples_of(r, metric)).collect::<Result<Vec<_>>>()?;
    compare_models(&samples, metric)
}

/// [`compare_augmentation`] over two runs of the same backbone and folds
/// that differ only in the augmentation flag.
pub fn compare_augmentation_reports(
    no_aug: &CvReport,
    aug: &CvReport,
    metric: &str,
) -> Result<AugmentationComparison> {
    if no_aug.augmentation || !aug.augmentation {
        return Err(Error::Stats("expected one run without and one with augmentation".into()));
    }
    if no_aug.backbone_digest != aug.backbone_digest {
        return Err(Error::Stats(format!(
            "backbones differ: {} vs {}",
            no_aug.backbone, aug.backbone
        )));
    }
    check_aligned(&[no_aug, aug])?;
    let mut out = compare_augmentation(&samples_of(no_aug, metric)?, &samples_of(aug, metric)?)?;
    out.model = no_aug.backbone.clone();
    Ok(out)
}
