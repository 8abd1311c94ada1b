//! Confusion counts and the evaluation scores derived from them: overall
//! accuracy, per-class recall / precision / F1 and the mean F1 over classes.
//! All scores are percentages; undefined scores are `None`.

use serde::{Deserialize, Serialize};

use crate::class::{Class, NUM_CLASSES};
use crate::data::LabelMask;
use crate::error::{Error, Result};

/// Per-class true/false positive/negative pixel counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub tn: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub overall_accuracy: f64,
    pub mean_f1: f64,
}

impl ConfusionCounts {
    pub fn new(num_classes: usize) -> Self {
        ConfusionCounts {
            tp: vec![0; num_classes],
            fp: vec![0; num_classes],
            fn_: vec![0; num_classes],
            tn: vec![0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.tp.len()
    }

    /// Adds the pixelwise comparison of two label arrays (class indices).
    pub fn accumulate_labels(&mut self, pred: &[u8], reference: &[u8]) -> Result<()> {
        if pred.len() != reference.len() {
            return Err(Error::input(format!(
                "prediction has {} pixels, reference has {}",
                pred.len(),
                reference.len()
            )));
        }
        let nc = self.num_classes();
        // Per-pixel TN bookkeeping is done in bulk: every pixel is a TN for
        // every class that is neither its prediction nor its reference.
        let mut pairs = vec![0u64; nc * nc];
        for (&p, &r) in pred.iter().zip(reference) {
            let (p, r) = (p as usize, r as usize);
            if p >= nc || r >= nc {
                return Err(Error::input(format!("label {} outside 0..{nc}", p.max(r))));
            }
            pairs[p * nc + r] += 1;
        }
        let total = pred.len() as u64;
        for c in 0..nc {
            let tp = pairs[c * nc + c];
            let predicted: u64 = (0..nc).map(|r| pairs[c * nc + r]).sum();
            let actual: u64 = (0..nc).map(|p| pairs[p * nc + c]).sum();
            self.tp[c] += tp;
            self.fp[c] += predicted - tp;
            self.fn_[c] += actual - tp;
            self.tn[c] += total + tp - predicted - actual;
        }
        Ok(())
    }

    pub fn accumulate(&mut self, pred: &LabelMask, reference: &LabelMask) -> Result<()> {
        if pred.shape() != reference.shape() {
            return Err(Error::input(format!(
                "mask shapes differ: {:?} vs {:?}",
                pred.shape(),
                reference.shape()
            )));
        }
        self.accumulate_labels(pred.labels(), reference.labels())
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        assert_eq!(self.num_classes(), other.num_classes());
        for c in 0..self.num_classes() {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
            self.tn[c] += other.tn[c];
        }
    }

    pub fn total_pixels(&self) -> u64 {
        self.tp[0] + self.fp[0] + self.fn_[0] + self.tn[0]
    }

    pub fn correct_pixels(&self) -> u64 {
        self.tp.iter().sum()
    }

    pub fn class_metrics(&self, class: usize) -> ClassMetrics {
        let (tp, fp, fn_) = (self.tp[class] as f64, self.fp[class] as f64, self.fn_[class] as f64);
        let recall = (tp + fn_ > 0.0).then(|| 100.0 * tp / (tp + fn_));
        let precision = (tp + fp > 0.0).then(|| 100.0 * tp / (tp + fp));
        let f1 = match (precision, recall) {
            (None, None) => None,
            (p, r) => {
                let (p, r) = (p.unwrap_or(0.0), r.unwrap_or(0.0));
                Some(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
            }
        };
        ClassMetrics {
            recall,
            precision,
            f1,
        }
    }

    pub fn aggregate_metrics(&self) -> Result<AggregateMetrics> {
        let total = self.total_pixels();
        if total == 0 {
            return Err(Error::input("no pixels accumulated"));
        }
        let f1s: Vec<f64> = (0..self.num_classes())
            .filter_map(|c| self.class_metrics(c).f1)
            .collect();
        Ok(AggregateMetrics {
            overall_accuracy: 100.0 * self.correct_pixels() as f64 / total as f64,
            mean_f1: mean_f1(&f1s),
        })
    }
}

/// Unweighted mean of per-class F1 scores.
pub fn mean_f1(f1_scores: &[f64]) -> f64 {
    f1_scores.iter().sum::<f64>() / f1_scores.len() as f64
}

/// One row of the metrics report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub variant: String,
    pub setup: String,
    pub overall_accuracy: f64,
    pub mean_f1: f64,
    pub aggregate: ClassMetrics,
    pub suspension: ClassMetrics,
}

impl MetricsRow {
    pub fn from_counts(variant: &str, setup: &str, counts: &ConfusionCounts) -> Result<Self> {
        if counts.num_classes() != NUM_CLASSES {
            return Err(Error::input("metrics rows describe the binary task"));
        }
        let agg = counts.aggregate_metrics()?;
        Ok(MetricsRow {
            variant: variant.to_string(),
            setup: setup.to_string(),
            overall_accuracy: agg.overall_accuracy,
            mean_f1: agg.mean_f1,
            aggregate: counts.class_metrics(Class::Aggregate.index()),
            suspension: counts.class_metrics(Class::Suspension.index()),
        })
    }
}

pub const METRICS_CSV_HEADER: &str = "variant,setup,oa,mf1,aggregate_recall,aggregate_precision,aggregate_f1,suspension_recall,suspension_precision,suspension_f1";

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| crate::blindspot::UNDEFINED.to_string(), |v| format!("{v:.4}"))
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.4},{:.4},{},{},{},{},{},{}\n",
            r.variant,
            r.setup,
            r.overall_accuracy,
            r.mean_f1,
            cell(r.aggregate.recall),
            cell(r.aggregate.precision),
            cell(r.aggregate.f1),
            cell(r.suspension.recall),
            cell(r.suspension.precision),
            cell(r.suspension.f1),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(pred: &[u8], reference: &[u8]) -> ConfusionCounts {
        let mut c = ConfusionCounts::new(2);
        c.accumulate_labels(pred, reference).unwrap();
        c
    }

    #[test]
    fn perfect_prediction() {
        let c = counts(&[1; 100], &[1; 100]);
        assert_eq!(c.tp[1], 100);
        assert_eq!(c.fp[1] + c.fn_[1], 0);
        assert_eq!(c.tn[0], 100);
        let m = c.class_metrics(1);
        assert_eq!((m.recall, m.precision, m.f1), (Some(100.0), Some(100.0), Some(100.0)));
        let a = c.aggregate_metrics().unwrap();
        assert_eq!((a.overall_accuracy, a.mean_f1), (100.0, 100.0));
    }

    #[test]
    fn all_wrong() {
        let c = counts(&[1; 100], &[0; 100]);
        assert_eq!(c.fp[1], 100);
        assert_eq!(c.fn_[0], 100);
        assert_eq!(c.tp.iter().sum::<u64>(), 0);
    }

    #[test]
    fn hand_computed_class_metrics() {
        let c = ConfusionCounts {
            tp: vec![30, 0],
            fp: vec![20, 0],
            fn_: vec![10, 0],
            tn: vec![0, 0],
        };
        let m = c.class_metrics(0);
        assert!((m.recall.unwrap() - 75.0).abs() < 1e-12);
        assert!((m.precision.unwrap() - 60.0).abs() < 1e-12);
        assert!((m.f1.unwrap() - 200.0 / 3.0).abs() < 1e-12);
        // Class 1 never occurs: every score undefined.
        assert_eq!(c.class_metrics(1).recall, None);
        assert_eq!(c.class_metrics(1).f1, None);
    }

    #[test]
    fn never_predicted_class_scores_zero_f1() {
        let c = counts(&[0; 10], &[0, 0, 0, 0, 0, 0, 1, 1, 1, 1]);
        let m = c.class_metrics(1);
        assert_eq!(m.recall, Some(0.0));
        assert_eq!(m.precision, None);
        assert_eq!(m.f1, Some(0.0));
    }

    #[test]
    fn majority_constant_prediction() {
        // 638 suspension and 362 aggregate pixels, everything predicted suspension.
        let mut reference = vec![0u8; 638];
        reference.extend(vec![1u8; 362]);
        let c = counts(&[0; 1000], &reference);
        let a = c.aggregate_metrics().unwrap();
        assert!((a.overall_accuracy - 63.8).abs() < 1e-12);
        assert_eq!(c.class_metrics(Class::Aggregate.index()).recall, Some(0.0));
    }

    #[test]
    fn table_row_mean_f1() {
        assert!((mean_f1(&[83.2, 90.6]) - 86.9).abs() < 1e-9);
    }

    #[test]
    fn empty_counts_rejected() {
        assert!(ConfusionCounts::new(2).aggregate_metrics().is_err());
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let mut c = ConfusionCounts::new(2);
        assert!(c.accumulate_labels(&[0, 1], &[0]).is_err());
        assert!(c.accumulate_labels(&[2], &[0]).is_err());
    }

    #[test]
    fn accumulation_is_associative() {
        let a = ([0u8, 1, 1, 0], [0u8, 1, 0, 0]);
        let b = ([1u8, 1, 0], [1u8, 0, 0]);
        let mut split = counts(&a.0, &a.1);
        split.merge(&counts(&b.0, &b.1));
        let joined = counts(
            &[a.0.as_slice(), b.0.as_slice()].concat(),
            &[a.1.as_slice(), b.1.as_slice()].concat(),
        );
        assert_eq!(split, joined);
    }

    #[test]
    fn csv_marks_undefined() {
        let c = counts(&[0; 4], &[0; 4]);
        let row = MetricsRow::from_counts("base", "T1", &c).unwrap();
        let csv = metrics_csv(&[row]);
        assert!(csv.starts_with(METRICS_CSV_HEADER));
        assert!(csv.lines().nth(1).unwrap().contains("NA"));
    }
}
