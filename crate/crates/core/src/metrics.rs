//! Binary classification metrics with parasitized (label 1) as the positive
//! class. ROC area uses the trapezoid rule over tied-score groups, which
//! equals the pairwise concordance probability with ties counted as one half;
//! average precision is the step-wise sum `Σ (Rₖ − Rₖ₋₁) Pₖ`.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Confusion {
    pub fn from_predictions(predictions: &[usize], labels: &[usize]) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::Contract(format!(
                "{} predictions for {} labels",
                predictions.len(),
                labels.len()
            )));
        }
        let mut c = Confusion::default();
        for (&p, &l) in predictions.iter().zip(labels) {
            match (p == 1, l == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// Sensitivity, TPR.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn tpr(&self) -> f64 {
        self.recall()
    }

    /// Specificity, TNR.
    pub fn tnr(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    /// Cohen's kappa `(p_o − p_e)/(1 − p_e)`, evaluated as the single integer
    /// ratio `(n·agree − S)/(n² − S)` with `S = Σ row·column marginals`.
    /// Perfect agreement on a single class (`p_e = 1`) gives 1.
    pub fn kappa(&self) -> f64 {
        let n = self.total() as i128;
        if n == 0 {
            return 0.0;
        }
        let (tp, fp, fn_, tn) = (
            self.tp as i128,
            self.fp as i128,
            self.fn_ as i128,
            self.tn as i128,
        );
        let s = (tp + fp) * (tp + fn_) + (fn_ + tn) * (fp + tn);
        let num = n * (tp + tn) - s;
        let den = n * n - s;
        if den == 0 {
            1.0
        } else {
            num as f64 / den as f64
        }
    }
}

fn check_scores(scores: &[f64], labels: &[usize]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Contract(format!("score {s} is not comparable")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    Ok((pos, labels.len() as u64 - pos))
}

/// Cumulative `(threshold, tp, fp)` after each group of tied scores, highest first.
fn sweep(scores: &[f64], labels: &[usize]) -> Vec<(f64, u64, u64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out: Vec<(f64, u64, u64)> = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (pos, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_group = order.get(pos + 1).is_none_or(|&j| scores[j] != scores[i]);
        if last_of_group {
            out.push((scores[i], tp, fp));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RocCurve {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    /// Score threshold reached at each point after the origin.
    pub thresholds: Vec<f64>,
    pub auc: f64,
}

pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<RocCurve> {
    let (p, n) = check_scores(scores, labels)?;
    if p == 0 || n == 0 {
        return Err(Error::Contract("ROC needs both classes present".into()));
    }
    let groups = sweep(scores, labels);
    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = Vec::with_capacity(groups.len());
    // twice the area in units of one positive-negative pair
    let mut area2: u128 = 0;
    let (mut prev_tp, mut prev_fp) = (0u64, 0u64);
    for &(t, tp, fp) in &groups {
        area2 += (fp - prev_fp) as u128 * (tp + prev_tp) as u128;
        points.push((fp as f64 / n as f64, tp as f64 / p as f64));
        thresholds.push(t);
        (prev_tp, prev_fp) = (tp, fp);
    }
    Ok(RocCurve {
        points,
        thresholds,
        auc: area2 as f64 / (2 * p as u128 * n as u128) as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrCurve {
    /// `(recall, precision)` at each threshold, highest threshold first.
    pub points: Vec<(f64, f64)>,
    pub thresholds: Vec<f64>,
    pub average_precision: f64,
}

pub fn pr_curve(scores: &[f64], labels: &[usize]) -> Result<PrCurve> {
    let (p, _) = check_scores(scores, labels)?;
    if p == 0 {
        return Err(Error::Contract(
            "precision-recall needs at least one positive".into(),
        ));
    }
    let mut points = Vec::new();
    let mut thresholds = Vec::new();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (t, tp, fp) in sweep(scores, labels) {
        let recall = tp as f64 / p as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        points.push((recall, precision));
        thresholds.push(t);
    }
    Ok(PrCurve {
        points,
        thresholds,
        average_precision: ap,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub confusion: Confusion,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub kappa: f64,
    pub tpr: f64,
    pub tnr: f64,
    /// Absent when only one class is present.
    pub roc: Option<RocCurve>,
    /// Absent when there are no positives.
    pub pr: Option<PrCurve>,
}

impl MetricsReport {
    /// `predictions` are hard decisions, `scores` the positive-class scores.
    pub fn from_scores(predictions: &[usize], scores: &[f64], labels: &[usize]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Contract(
                "cannot evaluate an empty sample set".into(),
            ));
        }
        let confusion = Confusion::from_predictions(predictions, labels)?;
        let (p, n) = check_scores(scores, labels)?;
        Ok(Self {
            confusion,
            accuracy: confusion.accuracy(),
            precision: confusion.precision(),
            recall: confusion.recall(),
            f1: confusion.f1(),
            kappa: confusion.kappa(),
            tpr: confusion.tpr(),
            tnr: confusion.tnr(),
            roc: if p > 0 && n > 0 {
                Some(roc_auc(scores, labels)?)
            } else {
                None
            },
            pr: if p > 0 {
                Some(pr_curve(scores, labels)?)
            } else {
                None
            },
        })
    }

    pub fn auc(&self) -> Option<f64> {
        self.roc.as_ref().map(|r| r.auc)
    }

    pub fn average_precision(&self) -> Option<f64> {
        self.pr.as_ref().map(|r| r.average_precision)
    }

    /// One header row and one value row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        let c = &self.confusion;
        w.write_record([
            "tp",
            "fp",
            "fn",
            "tn",
            "accuracy",
            "precision",
            "recall",
            "f1",
            "kappa",
            "tpr",
            "tnr",
            "roc_auc",
            "average_precision",
        ])?;
        w.write_record([
            c.tp.to_string(),
            c.fp.to_string(),
            c.fn_.to_string(),
            c.tn.to_string(),
            self.accuracy.to_string(),
            self.precision.to_string(),
            self.recall.to_string(),
            self.f1.to_string(),
            self.kappa.to_string(),
            self.tpr.to_string(),
            self.tnr.to_string(),
            opt(self.auc()),
            opt(self.average_precision()),
        ])?;
        w.flush()?;
        Ok(())
    }

    /// Writes `roc.csv` (fpr,tpr) and `pr.csv` (recall,precision) into `dir`.
    pub fn write_curves(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        if let Some(roc) = &self.roc {
            write_xy(&dir.join("roc.csv"), ("fpr", "tpr"), &roc.points)?;
        }
        if let Some(pr) = &self.pr {
            write_xy(&dir.join("pr.csv"), ("recall", "precision"), &pr.points)?;
        }
        Ok(())
    }
}

pub fn write_xy(path: &Path, header: (&str, &str), points: &[(f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([header.0, header.1])?;
    for (x, y) in points {
        w.write_record([x.to_string(), y.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
