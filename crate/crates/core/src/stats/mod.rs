//! Significance tests used to compare models across cross-validation folds.
//!
//! Normality is checked with Shapiro-Wilk, differences among three or more
//! models with repeated-measures ANOVA followed by Tukey HSD, and the effect
//! of augmentation with a t-test, Welch's test or the Wilcoxon rank-sum test
//! depending on normality and equality of variances.
//!
//! The rank-sum test is the unpaired Mann-Whitney form even though fold
//! scores are paired by construction.

mod compare;
pub mod dist;
mod procedures;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use compare::{
    compare_augmentation, compare_augmentation_reports, compare_cv_reports, compare_models, AugmentationComparison,
    ComparisonReport, NormalityEntry, PairwiseComparison, TwoSampleBranch,
};
pub use procedures::{
    anova_rm, bartlett, shapiro_wilk, t_test_independent, tukey_hsd, wilcoxon_exact_p, wilcoxon_rank_sum,
    EXACT_WILCOXON_MAX_N,
};

pub const ALPHA: f64 = 0.05;

/// Outcome of one significance test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub test: String,
    pub statistic: f64,
    /// `None` only when the test is degenerate.
    pub p_value: Option<f64>,
    pub df: Vec<f64>,
    pub alpha: f64,
    pub significant: bool,
    pub degenerate: bool,
    pub notes: Vec<String>,
}

impl TestResult {
    pub(crate) fn new(test: &str, statistic: f64, p: f64, df: Vec<f64>) -> Self {
        let p = if p.is_nan() { 1.0 } else { p.clamp(0.0, 1.0) };
        TestResult {
            test: test.to_string(),
            statistic,
            p_value: Some(p),
            df,
            alpha: ALPHA,
            significant: p < ALPHA,
            degenerate: false,
            notes: Vec::new(),
        }
    }

    pub(crate) fn undefined(test: &str, statistic: f64, note: &str) -> Self {
        TestResult {
            test: test.to_string(),
            statistic,
            p_value: None,
            df: Vec::new(),
            alpha: ALPHA,
            significant: false,
            degenerate: true,
            notes: vec![note.to_string()],
        }
    }

    pub(crate) fn flagged(mut self, note: &str) -> Self {
        self.degenerate = true;
        self.notes.push(note.to_string());
        self
    }

    pub(crate) fn note(mut self, note: impl Into<String>) -> Self {
        self.notes.push(note.into());
        self
    }

    /// True when a p-value exists and exceeds alpha.
    pub fn passes(&self) -> bool {
        self.p_value.is_some_and(|p| p > self.alpha)
    }
}

/// Per-fold scores of one model or configuration, in fold order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleVector {
    pub label: String,
    pub values: Vec<f64>,
}

impl SampleVector {
    pub fn new(label: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let label = label.into();
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Stats(format!("{label}: non-finite score {v}")));
        }
        Ok(SampleVector { label, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        mean(&self.values)
    }
}

pub(crate) fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased sample variance.
pub(crate) fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}
