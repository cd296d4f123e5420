//! Reconstruction accuracy, Dice overlap and the confusion matrix.

use serde::{Deserialize, Serialize};

use crate::diagnosis::Label;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean squared difference of two equally shaped tensors.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "mse",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// `1 - mean_i mse(original_i, reconstruction_i)` on `[0, 1]` images,
/// clamped to `[0, 1]` (with a warning when clamping happens).
pub fn reconstruction_accuracy(originals: &[Tensor], reconstructions: &[Tensor]) -> Result<f64> {
    if originals.is_empty() {
        return Err(Error::invalid("reconstruction_accuracy", "no images"));
    }
    if originals.len() != reconstructions.len() {
        return Err(Error::invalid(
            "reconstruction_accuracy",
            format!(
                "{} originals vs {} reconstructions",
                originals.len(),
                reconstructions.len()
            ),
        ));
    }
    let mses = originals
        .iter()
        .zip(reconstructions)
        .map(|(o, r)| mse(o, r))
        .collect::<Result<Vec<_>>>()?;
    accuracy_from_mses(&mses)
}

/// `1 - mean(mses)`, clamped to `[0, 1]` like [`reconstruction_accuracy`].
pub fn accuracy_from_mses(mses: &[f64]) -> Result<f64> {
    if mses.is_empty() {
        return Err(Error::invalid("reconstruction_accuracy", "no images"));
    }
    let acc = 1.0 - mses.iter().sum::<f64>() / mses.len() as f64;
    if !(0.0..=1.0).contains(&acc) {
        log::warn!("reconstruction accuracy {acc} clamped to [0, 1]");
    }
    Ok(acc.clamp(0.0, 1.0))
}

fn binary_count(t: &Tensor, what: &'static str) -> Result<usize> {
    let mut n = 0;
    for &v in t.data() {
        if v == 1.0 {
            n += 1;
        } else if v != 0.0 {
            return Err(Error::invalid(what, format!("value {v} is not 0 or 1")));
        }
    }
    Ok(n)
}

/// `2|X & Y| / (|X| + |Y|)` for binary masks; 1.0 when both are empty.
pub fn dice(prediction: &Tensor, truth: &Tensor) -> Result<f64> {
    if prediction.shape() != truth.shape() {
        return Err(Error::shape(
            "dice",
            format!("{:?} vs {:?}", prediction.shape(), truth.shape()),
        ));
    }
    let x = binary_count(prediction, "dice prediction")?;
    let y = binary_count(truth, "dice truth")?;
    if x + y == 0 {
        return Ok(1.0);
    }
    let both = prediction
        .data()
        .iter()
        .zip(truth.data())
        .filter(|&(&p, &t)| p == 1.0 && t == 1.0)
        .count();
    Ok(2.0 * both as f64 / (x + y) as f64)
}

/// Counts with `Positive` as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// `tp / (tp + fn)`; `None` without actual positives.
    pub fn sensitivity(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `tn / (tn + fp)`; `None` without actual negatives.
    pub fn specificity(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.total())
    }

    /// Mean of sensitivity and specificity; `None` unless both exist.
    pub fn balanced_accuracy(&self) -> Option<f64> {
        Some((self.sensitivity()? + self.specificity()?) / 2.0)
    }

    /// Rows are actual classes, columns predicted.
    pub fn to_csv(&self) -> String {
        format!(
            "actual,predicted_positive,predicted_negative\npositive,{},{}\nnegative,{},{}\n",
            self.tp, self.fn_, self.fp, self.tn
        )
    }
}

pub fn confusion(predicted: &[Label], actual: &[Label]) -> Result<ConfusionMatrix> {
    if predicted.len() != actual.len() {
        return Err(Error::invalid(
            "confusion",
            format!("{} predictions vs {} labels", predicted.len(), actual.len()),
        ));
    }
    let mut m = ConfusionMatrix::default();
    for (p, a) in predicted.iter().zip(actual) {
        match (p, a) {
            (Label::Positive, Label::Positive) => m.tp += 1,
            (Label::Positive, Label::Negative) => m.fp += 1,
            (Label::Negative, Label::Negative) => m.tn += 1,
            (Label::Negative, Label::Positive) => m.fn_ += 1,
        }
    }
    Ok(m)
}

/// Flat evaluation summary. Rates are `None` (JSON `null`) where they are
/// undefined or the inputs needed for them were absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub failed: usize,
    pub threshold: f64,
    pub reconstruction_accuracy: f64,
    pub dice: Option<f64>,
    pub masks_scored: usize,
    pub tp: Option<usize>,
    pub fp: Option<usize>,
    pub tn: Option<usize>,
    #[serde(rename = "fn")]
    pub fn_: Option<usize>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub accuracy: Option<f64>,
}

impl MetricsReport {
    pub fn confusion(&self) -> Option<ConfusionMatrix> {
        Some(ConfusionMatrix {
            tp: self.tp?,
            fp: self.fp?,
            tn: self.tn?,
            fn_: self.fn_?,
        })
    }

    pub fn with_confusion(mut self, m: Option<ConfusionMatrix>) -> Self {
        self.tp = m.map(|m| m.tp);
        self.fp = m.map(|m| m.fp);
        self.tn = m.map(|m| m.tn);
        self.fn_ = m.map(|m| m.fn_);
        self.sensitivity = m.and_then(|m| m.sensitivity());
        self.specificity = m.and_then(|m| m.specificity());
        self.accuracy = m.and_then(|m| m.accuracy());
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
