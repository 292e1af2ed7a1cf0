use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analyze::average_ranks;
use crate::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Area under the ROC curve from average ranks (ties count one half).
/// `None` when either class is absent.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    /// Positive when `score >= threshold`.
    pub fn at(scores: &[f64], labels: &[u8], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= threshold, l == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Test-set metrics of one trial. Serializes to exactly the seven
/// record fields; the confusion counts stay in memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub accuracy: f64,
    pub specificity: f64,
    pub sensitivity: f64,
    /// `None` (JSON `null`) for a single-class test set.
    pub auroc: Option<f64>,
    pub f1: f64,
    pub trial: usize,
    pub seed: u64,
    #[serde(skip)]
    pub confusion: Confusion,
}

impl TrialMetrics {
    pub fn from_scores(scores: &[f64], labels: &[u8], threshold: f64, trial: usize, seed: u64) -> Result<Self> {
        if scores.is_empty() || scores.len() != labels.len() {
            return Err(Error::Data(format!(
                "cannot score {} predictions against {} labels",
                scores.len(),
                labels.len()
            )));
        }
        let c = Confusion::at(scores, labels, threshold);
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Ok(TrialMetrics {
            accuracy: ratio(c.tp + c.tn, c.total()),
            specificity: ratio(c.tn, c.tn + c.fp),
            sensitivity: recall,
            auroc: auroc(scores, labels),
            f1,
            trial,
            seed,
            confusion: c,
        })
    }
}

/// Mean and sample standard deviation (zero for a single value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(MeanStd { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub accuracy: MeanStd,
    pub specificity: MeanStd,
    pub sensitivity: MeanStd,
    /// Over the trials where it was defined.
    pub auroc: Option<MeanStd>,
    pub f1: MeanStd,
    pub trials: usize,
}

/// Per-trial metrics in trial order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub trials: Vec<TrialMetrics>,
}

impl MetricsReport {
    pub fn new(mut trials: Vec<TrialMetrics>) -> Self {
        trials.sort_by_key(|t| t.trial);
        MetricsReport { trials }
    }

    fn column(&self, f: impl Fn(&TrialMetrics) -> f64) -> Vec<f64> {
        self.trials.iter().map(f).collect()
    }

    pub fn auroc_values(&self) -> Vec<f64> {
        self.trials.iter().filter_map(|t| t.auroc).collect()
    }

    pub fn summary(&self) -> Result<MetricsSummary> {
        let ms = |v: Vec<f64>| MeanStd::of(&v).ok_or_else(|| Error::Data("no trials to summarize".into()));
        Ok(MetricsSummary {
            accuracy: ms(self.column(|t| t.accuracy))?,
            specificity: ms(self.column(|t| t.specificity))?,
            sensitivity: ms(self.column(|t| t.sensitivity))?,
            auroc: MeanStd::of(&self.auroc_values()),
            f1: ms(self.column(|t| t.f1))?,
            trials: self.trials.len(),
        })
    }

    pub fn to_table(&self) -> Result<String> {
        let s = self.summary()?;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<6} {:>10} {:>10} {:>10} {:>11} {:>11} {:>8}",
            "trial", "accuracy", "specific.", "sensitiv.", "auroc", "f1", "seed"
        );
        for t in &self.trials {
            let auroc = t.auroc.map_or("undefined".to_string(), |a| format!("{a:.4}"));
            let _ = writeln!(
                out,
                "{:<6} {:>10.4} {:>10.4} {:>10.4} {:>11} {:>11.4} {:>8}",
                t.trial, t.accuracy, t.specificity, t.sensitivity, auroc, t.f1, t.seed
            );
        }
        let pm = |m: MeanStd| format!("{:.4}±{:.4}", m.mean, m.std);
        let _ = writeln!(
            out,
            "{:<6} {:>10} {:>10} {:>10} {:>11} {:>11}",
            "mean",
            pm(s.accuracy),
            pm(s.specificity),
            pm(s.sensitivity),
            s.auroc.map_or("undefined".to_string(), pm),
            pm(s.f1)
        );
        Ok(out)
    }

    /// `trial_<k>.json` per trial plus `aggregate.json` under `dir`.
    pub fn write_json(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for t in &self.trials {
            let p = dir.join(format!("trial_{}.json", t.trial));
            std::fs::write(&p, serde_json::to_string_pretty(t)? + "\n").map_err(|e| Error::io(&p, e))?;
        }
        let p = dir.join("aggregate.json");
        std::fs::write(&p, serde_json::to_string_pretty(&self.summary()?)? + "\n").map_err(|e| Error::io(&p, e))
    }
}
