//! Reconstruction-error scoring, threshold classification and error masks.
//!
//! A model trained on positives reconstructs positives well, so a sample is
//! labelled positive when its score (MSE on the 0-255 intensity scale) is
//! at most the threshold. At pixel level the direction flips: high error
//! marks anomalous pixels.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::metrics::{confusion, ConfusionMatrix};
use crate::model::CatUNetModel;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Positive,
    Negative,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Positive => "Positive",
            Label::Negative => "Negative",
        })
    }
}

/// Bins of the error histogram used to pick a pixel threshold.
pub const OTSU_BINS: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdConfig {
    /// Largest score still labelled positive.
    pub sample_threshold: f64,
    /// Squared-error level at and above which a pixel is marked; chosen by
    /// Otsu's method per image when unset.
    pub pixel_threshold: Option<f64>,
    /// Intensity range the `[0, 1]` images are rescaled to before scoring.
    pub intensity_scale: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            sample_threshold: 50.0,
            pixel_threshold: None,
            intensity_scale: 255.0,
        }
    }
}

impl ThresholdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_threshold.is_nan() || self.sample_threshold < 0.0 {
            return Err(Error::invalid(
                "sample_threshold",
                format!("{} is negative", self.sample_threshold),
            ));
        }
        if let Some(t) = self.pixel_threshold {
            if t.is_nan() || t < 0.0 {
                return Err(Error::invalid(
                    "pixel_threshold",
                    format!("{t} is negative"),
                ));
            }
        }
        if !(self.intensity_scale > 0.0 && self.intensity_scale.is_finite()) {
            return Err(Error::invalid(
                "intensity_scale",
                format!("{}", self.intensity_scale),
            ));
        }
        Ok(())
    }
}

/// `mean((scale * (original - reconstruction))^2)`.
pub fn score_pair(original: &Tensor, reconstruction: &Tensor, scale: f64) -> Result<f64> {
    Ok(crate::metrics::mse(original, reconstruction)? * scale * scale)
}

/// Inference-mode reconstruction of one `[C, S, S]` sample.
pub fn reconstruct_one(model: &CatUNetModel, sample: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(sample.shape());
    let out = model.reconstruct(&sample.clone().reshape(shape)?)?;
    out.unstack(0)
}

pub fn score(model: &CatUNetModel, sample: &Tensor, config: &ThresholdConfig) -> Result<f64> {
    score_pair(
        sample,
        &reconstruct_one(model, sample)?,
        config.intensity_scale,
    )
}

/// Positive iff `score <= sample_threshold`.
pub fn classify(score: f64, config: &ThresholdConfig) -> Label {
    if score <= config.sample_threshold {
        Label::Positive
    } else {
        Label::Negative
    }
}

/// Per-pixel `(scale * (I - I_hat))^2` of `[C, H, W]` images, averaged over
/// channels, as `[H, W]`.
pub fn error_map(original: &Tensor, reconstruction: &Tensor, scale: f64) -> Result<Tensor> {
    if original.shape() != reconstruction.shape() {
        return Err(Error::shape(
            "error_map",
            format!("{:?} vs {:?}", original.shape(), reconstruction.shape()),
        ));
    }
    let [c, h, w] = match *original.shape() {
        [c, h, w] => [c, h, w],
        _ => {
            return Err(Error::shape(
                "error_map",
                format!("expected [C, H, W], got {:?}", original.shape()),
            ))
        }
    };
    let mut acc = vec![0.0f64; h * w];
    for ch in 0..c {
        let range = ch * h * w..(ch + 1) * h * w;
        for ((a, &x), &y) in acc
            .iter_mut()
            .zip(&original.data()[range.clone()])
            .zip(&reconstruction.data()[range])
        {
            let d = scale * (f64::from(x) - f64::from(y));
            *a += d * d;
        }
    }
    Tensor::new(
        [h, w],
        acc.iter().map(|&v| (v / c.max(1) as f64) as f32).collect(),
    )
}

/// Otsu's threshold over a [`OTSU_BINS`]-bin histogram spanning
/// `[0, max]`: the returned level separates the lower bins from the rest.
/// A map without spread yields a level above every value.
pub fn otsu_threshold(values: &[f32]) -> f64 {
    let max = values.iter().copied().fold(0.0f32, f32::max) as f64;
    let min = values.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    if values.is_empty() || max <= 0.0 || max == min {
        return max + 1.0;
    }
    let width = max / OTSU_BINS as f64;
    let mut count = [0usize; OTSU_BINS];
    let mut sum = [0.0f64; OTSU_BINS];
    for &v in values {
        let v = f64::from(v);
        let b = ((v / width) as usize).min(OTSU_BINS - 1);
        count[b] += 1;
        sum[b] += v;
    }
    let n = values.len() as f64;
    let total: f64 = sum.iter().sum();
    let (mut n0, mut s0) = (0.0, 0.0);
    let mut best = (f64::NEG_INFINITY, 0);
    for k in 0..OTSU_BINS - 1 {
        n0 += count[k] as f64;
        s0 += sum[k];
        let n1 = n - n0;
        if n0 == 0.0 || n1 == 0.0 {
            continue;
        }
        let (m0, m1) = (s0 / n0, (total - s0) / n1);
        let between = n0 * n1 * (m0 - m1) * (m0 - m1);
        if between > best.0 {
            best = (between, k);
        }
    }
    (best.1 + 1) as f64 * width
}

/// Binary `[H, W]` mask of pixels whose squared error is at least the
/// pixel threshold, and the threshold used.
pub fn error_mask(
    original: &Tensor,
    reconstruction: &Tensor,
    config: &ThresholdConfig,
) -> Result<(Tensor, f64)> {
    let e = error_map(original, reconstruction, config.intensity_scale)?;
    let t = config
        .pixel_threshold
        .unwrap_or_else(|| otsu_threshold(e.data()));
    Ok((e.map(|v| if f64::from(v) >= t { 1.0 } else { 0.0 }), t))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosisResult {
    pub id: String,
    pub score: f64,
    pub label: Label,
    pub mask: Option<Tensor>,
    pub pixel_threshold: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleFailure {
    pub id: String,
    pub message: String,
}

pub type SampleOutcome = std::result::Result<DiagnosisResult, SampleFailure>;

pub fn diagnose(
    model: &CatUNetModel,
    sample: &ImageSample,
    config: &ThresholdConfig,
    with_mask: bool,
) -> Result<DiagnosisResult> {
    let recon = reconstruct_one(model, &sample.pixels)?;
    let score = score_pair(&sample.pixels, &recon, config.intensity_scale)?;
    let (mask, pixel_threshold) = if with_mask {
        let (m, t) = error_mask(&sample.pixels, &recon, config)?;
        (Some(m), Some(t))
    } else {
        (None, None)
    };
    Ok(DiagnosisResult {
        id: sample.id.clone(),
        score,
        label: classify(score, config),
        mask,
        pixel_threshold,
    })
}

/// One outcome per sample, in order. A sample that fails is reported in
/// place without stopping the rest.
pub fn diagnose_batch(
    model: &CatUNetModel,
    samples: &[ImageSample],
    config: &ThresholdConfig,
    with_masks: bool,
) -> Vec<SampleOutcome> {
    samples
        .iter()
        .map(|s| {
            diagnose(model, s, config, with_masks).map_err(|e| SampleFailure {
                id: s.id.clone(),
                message: e.to_string(),
            })
        })
        .collect()
}

/// Confusion matrix of the successful outcomes whose sample carries a
/// ground-truth label.
pub fn outcome_confusion(
    samples: &[ImageSample],
    outcomes: &[SampleOutcome],
) -> Result<Option<ConfusionMatrix>> {
    let (mut predicted, mut actual) = (Vec::new(), Vec::new());
    for (s, o) in samples.iter().zip(outcomes) {
        if let (Some(truth), Ok(r)) = (s.truth_label, o) {
            predicted.push(r.label);
            actual.push(truth);
        }
    }
    if actual.is_empty() {
        return Ok(None);
    }
    confusion(&predicted, &actual).map(Some)
}

/// Threshold maximising balanced accuracy on labelled scores. Candidates
/// are midpoints between consecutive distinct scores plus one level below
/// and one above all of them; ties go to the lowest candidate.
pub fn calibrate_threshold(positive_scores: &[f64], negative_scores: &[f64]) -> Result<f64> {
    if positive_scores.is_empty() || negative_scores.is_empty() {
        return Err(Error::invalid(
            "calibration",
            "needs at least one positive and one negative score",
        ));
    }
    if positive_scores
        .iter()
        .chain(negative_scores)
        .any(|s| !s.is_finite())
    {
        return Err(Error::invalid("calibration", "scores must be finite"));
    }
    let mut all: Vec<f64> = positive_scores
        .iter()
        .chain(negative_scores)
        .copied()
        .collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut candidates = vec![all[0] - 1.0];
    candidates.extend(all.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    candidates.push(all[all.len() - 1] + 1.0);

    let balanced = |t: f64| {
        let tpr = positive_scores.iter().filter(|&&s| s <= t).count() as f64
            / positive_scores.len() as f64;
        let tnr = negative_scores.iter().filter(|&&s| s > t).count() as f64
            / negative_scores.len() as f64;
        (tpr + tnr) / 2.0
    };
    let mut best = (f64::NEG_INFINITY, candidates[0]);
    for t in candidates {
        let b = balanced(t);
        if b > best.0 {
            best = (b, t);
        }
    }
    Ok(best.1.max(0.0))
}

#[derive(Serialize)]
struct JsonLine<'a> {
    id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<Label>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mask_path: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<&'a str>,
}

/// One JSON object (no trailing newline) for an outcome.
pub fn json_line(outcome: &SampleOutcome, mask_path: Option<&str>) -> String {
    let line = match outcome {
        Ok(r) => JsonLine {
            id: &r.id,
            score: Some(r.score),
            label: Some(r.label),
            mask_path,
            error: None,
        },
        Err(f) => JsonLine {
            id: &f.id,
            score: None,
            label: None,
            mask_path: None,
            error: Some(&f.message),
        },
    };
    serde_json::to_string(&line).expect("diagnosis serializes")
}
