//! Per-device thresholds and packet verdicts.
//!
//! The threshold is the largest reconstruction error seen on a device's
//! validation-normal traffic; a packet is anomalous when its error is
//! strictly above it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Label;
use crate::matrix::Matrix;
use crate::nn::DenseNet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRecord {
    pub device_id: String,
    pub threshold: f64,
    pub source: String,
    /// Row of the validation set that produced the maximum.
    pub argmax_row: usize,
}

pub fn reconstruction_errors(model: &DenseNet, rows: &Matrix) -> Result<Vec<f64>> {
    (0..rows.rows())
        .into_par_iter()
        .map(|i| model.reconstruction_error(rows.row(i)))
        .collect()
}

pub fn select_threshold(
    model: &DenseNet,
    validation_normal: &Matrix,
    device_id: impl Into<String>,
    source: impl Into<String>,
) -> Result<ThresholdRecord> {
    if validation_normal.is_empty() {
        return Err(Error::data("cannot set a threshold from an empty validation set"));
    }
    let errors = reconstruction_errors(model, validation_normal)?;
    let mut argmax_row = 0;
    for (i, &e) in errors.iter().enumerate() {
        if e > errors[argmax_row] {
            argmax_row = i;
        }
    }
    Ok(ThresholdRecord {
        device_id: device_id.into(),
        threshold: errors[argmax_row],
        source: source.into(),
        argmax_row,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub mse: f64,
    pub anomalous: bool,
}

pub fn classify(mse: f64, threshold: f64) -> bool {
    mse > threshold
}

pub fn score_and_classify(model: &DenseNet, rows: &Matrix, threshold: f64) -> Result<Vec<Verdict>> {
    Ok(reconstruction_errors(model, rows)?
        .into_iter()
        .map(|mse| Verdict {
            mse,
            anomalous: classify(mse, threshold),
        })
        .collect())
}

/// Attack is the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fn_: u64, fp: u64, tn: u64) -> Self {
        ConfusionCounts { tp, fn_, fp, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fn_ + self.fp + self.tn
    }

    pub fn add(&mut self, truth_attack: bool, flagged: bool) {
        match (truth_attack, flagged) {
            (true, true) => self.tp += 1,
            (true, false) => self.fn_ += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fn_ += other.fn_;
        self.fp += other.fp;
        self.tn += other.tn;
    }

    /// Recall over attack packets; `None` without any.
    pub fn recall(&self) -> Option<f64> {
        let p = self.tp + self.fn_;
        (p > 0).then(|| self.tp as f64 / p as f64)
    }

    pub fn false_positive_rate(&self) -> Option<f64> {
        let n = self.fp + self.tn;
        (n > 0).then(|| self.fp as f64 / n as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub f1: f64,
    pub mcc: f64,
    /// F1 denominator was zero and the value was set to 0.
    pub f1_degenerate: bool,
    /// An MCC factor was zero and the value was set to 0.
    pub mcc_degenerate: bool,
}

pub fn metrics(c: &ConfusionCounts) -> Result<Metrics> {
    let total = c.total();
    if total == 0 {
        return Err(Error::data("metrics on zero packets"));
    }
    let (tp, fn_, fp, tn) = (c.tp as f64, c.fn_ as f64, c.fp as f64, c.tn as f64);
    let accuracy = (tp + tn) / total as f64;
    let f1_den = 2.0 * tp + fp + fn_;
    let f1_degenerate = f1_den == 0.0;
    let f1 = if f1_degenerate { 0.0 } else { 2.0 * tp / f1_den };
    let factors = [tp + fp, tp + fn_, tn + fp, tn + fn_];
    let mcc_degenerate = factors.contains(&0.0);
    let mcc = if mcc_degenerate {
        0.0
    } else {
        (tp * tn - fp * fn_) / (factors[0] * factors[1] * factors[2] * factors[3]).sqrt()
    };
    Ok(Metrics {
        accuracy,
        f1,
        mcc,
        f1_degenerate,
        mcc_degenerate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacketScore {
    pub timestamp: f64,
    pub mse: f64,
    pub anomalous: bool,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub device_id: String,
    pub threshold: f64,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
    pub packets: Vec<PacketScore>,
}

/// Cross-tabulates verdicts against ground truth. Unlabelled packets are
/// kept in the score table but left out of the counts.
pub fn build_report(
    device_id: impl Into<String>,
    threshold: f64,
    verdicts: &[Verdict],
    timestamps: &[f64],
    labels: &[Label],
) -> Result<DetectionReport> {
    if verdicts.len() != labels.len() || verdicts.len() != timestamps.len() {
        return Err(Error::Dimension {
            expected: verdicts.len(),
            actual: labels.len().min(timestamps.len()),
        });
    }
    let mut counts = ConfusionCounts::default();
    let mut packets = Vec::with_capacity(verdicts.len());
    for ((v, &ts), &label) in verdicts.iter().zip(timestamps).zip(labels) {
        match label {
            Label::Attack => counts.add(true, v.anomalous),
            Label::Normal => counts.add(false, v.anomalous),
            Label::Unlabeled => {}
        }
        packets.push(PacketScore {
            timestamp: ts,
            mse: v.mse,
            anomalous: v.anomalous,
            label,
        });
    }
    let metrics = metrics(&counts)?;
    Ok(DetectionReport {
        device_id: device_id.into(),
        threshold,
        counts,
        metrics,
        packets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;

    fn round4(x: f64) -> f64 {
        (x * 1e4).round() / 1e4
    }

    #[test]
    fn reported_confusions() {
        let m = metrics(&ConfusionCounts::new(25828, 5277, 0, 1177)).unwrap();
        assert_eq!((round4(m.accuracy), round4(m.f1), round4(m.mcc)), (0.8365, 0.9073, 0.3891));
        let m = metrics(&ConfusionCounts::new(6743222, 66190, 0, 1200)).unwrap();
        assert_eq!((round4(m.accuracy), round4(m.f1), round4(m.mcc)), (0.9903, 0.9951, 0.1328));
    }

    #[test]
    fn perfect_and_degenerate() {
        let m = metrics(&ConfusionCounts::new(5, 0, 0, 7)).unwrap();
        assert_eq!((m.accuracy, m.f1, m.mcc), (1.0, 1.0, 1.0));
        let m = metrics(&ConfusionCounts::new(0, 0, 0, 9)).unwrap();
        assert!(m.f1_degenerate && m.mcc_degenerate);
        assert_eq!((m.f1, m.mcc), (0.0, 0.0));
        assert!(metrics(&ConfusionCounts::default()).is_err());
    }

    #[test]
    fn strict_threshold() {
        assert!(!classify(0.5, 0.5));
        assert!(classify(1e-300, 0.0));
    }

    #[test]
    fn calibration_has_no_false_positives() {
        let net = DenseNet::init(Architecture::autoencoder(27).unwrap(), 4);
        let rows = Matrix::from_rows(27, (0..50).map(|i| vec![(i as f64 * 0.37).sin().abs(); 27])).unwrap();
        let t = select_threshold(&net, &rows, "d", "val").unwrap();
        let v = score_and_classify(&net, &rows, t.threshold).unwrap();
        assert_eq!(v.len(), 50);
        assert!(v.iter().all(|v| !v.anomalous));
        assert_eq!(v[t.argmax_row].mse, t.threshold);
        assert!(select_threshold(&net, &Matrix::zeros(0, 27), "d", "val").is_err());
    }

    #[test]
    fn report_counts() {
        let v = [
            Verdict { mse: 1.0, anomalous: true },
            Verdict { mse: 1.0, anomalous: true },
            Verdict { mse: 0.1, anomalous: false },
            Verdict { mse: 0.1, anomalous: false },
        ];
        let labels = [Label::Attack, Label::Attack, Label::Attack, Label::Normal];
        let r = build_report("d", 0.5, &v, &[0.0; 4], &labels).unwrap();
        assert_eq!(r.counts, ConfusionCounts::new(2, 1, 0, 1));
        assert_eq!(r.metrics, metrics(&r.counts).unwrap());
    }
}
