//! Thresholding scored timesteps and summarising them against ground truth.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use redf_core::metrics::{affiliation_metrics_in, extract_events, pointwise_metrics, EventLabels};
use redf_core::pipeline::{apply_threshold, threshold, AnomalyScoreSeries};

use crate::error::{Result, RunError};

/// Which scores set the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdSplit {
    /// Validation and test scores together.
    Pooled,
    ValOnly,
}

impl ThresholdSplit {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Pooled => "pooled",
            Self::ValOnly => "val-only",
        }
    }
}

impl FromStr for ThresholdSplit {
    type Err = RunError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(Self::Pooled),
            "val-only" => Ok(Self::ValOnly),
            _ => Err(RunError::Usage(format!("threshold split must be `pooled` or `val-only`, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub aff_precision: f64,
    pub aff_recall: f64,
    pub aff_f1: f64,
    pub pointwise_p: f64,
    pub pointwise_r: f64,
    pub pointwise_f1: f64,
    pub threshold: f64,
    pub r_pct: f64,
    pub n_pred_events: usize,
    pub n_truth_events: usize,
    pub precision_defined: bool,
    pub recall_defined: bool,
    pub threshold_split: String,
    pub first_step: usize,
    pub end_step: usize,
}

/// Scores on the test split with the ground-truth label of each scored step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelledScores {
    pub timesteps: Vec<usize>,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl LabelledScores {
    pub fn new(series: &AnomalyScoreSeries, truth: &[u8]) -> Result<Self> {
        let labels = series
            .timesteps
            .iter()
            .map(|&t| truth.get(t).copied().ok_or_else(|| RunError::Data(format!("no label for timestep {t}"))))
            .collect::<Result<_>>()?;
        Ok(Self { timesteps: series.timesteps.clone(), scores: series.scores.clone(), labels })
    }

    /// `timestep,score,label` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("timestep,score,label\n");
        for i in 0..self.scores.len() {
            let _ = writeln!(out, "{},{},{}", self.timesteps[i], self.scores[i], self.labels[i]);
        }
        out
    }

    pub fn from_csv(text: &str, origin: &str) -> Result<Self> {
        let mut out = Self::default();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || RunError::Data(format!("{origin}: malformed row {}", i + 1));
            let mut cells = line.split(',').map(str::trim);
            let t = cells.next().and_then(|c| c.parse().ok()).ok_or_else(bad)?;
            let s: f64 = cells.next().and_then(|c| c.parse().ok()).ok_or_else(bad)?;
            let l = match cells.next() {
                Some("0") => 0,
                Some("1") => 1,
                _ => return Err(bad()),
            };
            if out.timesteps.last().is_some_and(|&p| p >= t) {
                return Err(RunError::Data(format!("{origin}: timesteps not increasing at row {}", i + 1)));
            }
            out.timesteps.push(t);
            out.scores.push(s);
            out.labels.push(l);
        }
        if out.scores.is_empty() {
            return Err(RunError::Data(format!("{origin}: no scores")));
        }
        Ok(out)
    }
}

/// Threshold at `r_pct`, then compare flagged steps with the truth over the
/// span of scored steps. Unscored steps inside the span count as unflagged.
pub fn evaluate(val: &[f64], test: &LabelledScores, r_pct: f64, split: ThresholdSplit) -> Result<MetricsReport> {
    let pool_test: &[f64] = match split {
        ThresholdSplit::Pooled => &test.scores,
        ThresholdSplit::ValOnly => &[],
    };
    let th = threshold(val, pool_test, r_pct)?;
    let flags = apply_threshold(&test.scores, &th);
    let first = *test.timesteps.first().ok_or_else(|| RunError::Data("no test scores".into()))?;
    let end = test.timesteps.last().map_or(first, |t| t + 1);
    let mut pred = vec![0u8; end - first];
    let mut truth = vec![0u8; end - first];
    for i in 0..test.timesteps.len() {
        pred[test.timesteps[i] - first] = flags[i];
        truth[test.timesteps[i] - first] = test.labels[i];
    }
    let shift = |e: EventLabels| EventLabels { events: e.events.iter().map(|r| r.start + first..r.end + first).collect(), labels: e.labels };
    let p_ev = shift(extract_events(&pred)?);
    let t_ev = shift(extract_events(&truth)?);
    let aff = affiliation_metrics_in(&p_ev, &t_ev, first..end)?;
    let pw = pointwise_metrics(&pred, &truth)?;
    Ok(MetricsReport {
        aff_precision: aff.precision,
        aff_recall: aff.recall,
        aff_f1: aff.f1,
        pointwise_p: pw.precision,
        pointwise_r: pw.recall,
        pointwise_f1: pw.f1,
        threshold: th.delta,
        r_pct,
        n_pred_events: p_ev.events.len(),
        n_truth_events: t_ev.events.len(),
        precision_defined: aff.precision_defined,
        recall_defined: aff.recall_defined,
        threshold_split: split.as_str().to_string(),
        first_step: first,
        end_step: end,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_scorer_scores_one() {
        let labels: Vec<u8> = (0..200).map(|t| u8::from((100..102).contains(&t))).collect();
        let test = LabelledScores {
            timesteps: (0..200).map(|t| t + 50).collect(),
            scores: labels.iter().map(|&l| f64::from(l)).collect(),
            labels,
        };
        let r = evaluate(&[], &test, 2.0, ThresholdSplit::Pooled).unwrap();
        assert_eq!((r.aff_f1, r.pointwise_f1, r.n_truth_events, r.n_pred_events), (1.0, 1.0, 1, 1));
        assert_eq!((r.first_step, r.end_step), (50, 250));
        let back = LabelledScores::from_csv(&test.to_csv(), "x").unwrap();
        assert_eq!(back, test);
    }

    #[test]
    fn val_only_ignores_test_scores() {
        let test = LabelledScores { timesteps: vec![0, 1, 2], scores: vec![5.0, 6.0, 7.0], labels: vec![0, 0, 1] };
        let r = evaluate(&[1.0, 2.0], &test, 10.0, ThresholdSplit::ValOnly).unwrap();
        assert_eq!(r.threshold, 2.0);
        assert_eq!(r.n_pred_events, 1);
        assert!("both".parse::<ThresholdSplit>().is_err());
    }
}
