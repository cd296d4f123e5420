//! Whole-dataset scoring: preprocessing to the model's input, threshold
//! calibration and the metrics report.

use std::thread;

use crate::data::{preprocess, Dataset, ImageSample};
use crate::diagnosis::{
    calibrate_threshold, diagnose, outcome_confusion, SampleFailure, SampleOutcome, ThresholdConfig,
};
use crate::error::{Error, Result};
use crate::metrics::{accuracy_from_mses, dice, MetricsReport};
use crate::model::{CatUNetConfig, CatUNetModel};
use crate::tensor::Tensor;

/// `sample` resized and channel-replicated to what `config` expects.
pub fn prepare(config: &CatUNetConfig, sample: &ImageSample) -> Result<ImageSample> {
    preprocess(sample, config.input_size, config.input_channels)
}

/// Pixel tensors of `samples`, prepared for training a model with `config`.
pub fn training_inputs(config: &CatUNetConfig, samples: &[ImageSample]) -> Result<Vec<Tensor>> {
    samples
        .iter()
        .map(|s| prepare(config, s).map(|p| p.pixels))
        .collect()
}

/// `f` over `items` on up to `jobs` threads, results in input order.
fn map_ordered<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let f = &f;
    thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("scoring worker panicked"))
            .collect()
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// One per input sample, in order.
    pub outcomes: Vec<SampleOutcome>,
    pub report: MetricsReport,
}

/// Diagnoses every sample, in order, on up to `jobs` threads. Samples that
/// fail are counted and reported, not fatal; an evaluation with no
/// successful sample is an error. With `with_masks`, error masks are
/// computed and scored by Dice against each sample's ground-truth mask.
pub fn evaluate(
    model: &CatUNetModel,
    samples: &[ImageSample],
    config: &ThresholdConfig,
    with_masks: bool,
    jobs: usize,
) -> Result<Evaluation> {
    config.validate()?;
    let scored: Vec<(Option<Tensor>, SampleOutcome)> = map_ordered(samples, jobs, |s| {
        let run = || {
            let p = prepare(model.config(), s)?;
            let r = diagnose(model, &p, config, with_masks)?;
            Ok::<_, Error>((p.truth_mask, r))
        };
        match run() {
            Ok((truth, r)) => (truth, Ok(r)),
            Err(e) => (
                None,
                Err(SampleFailure {
                    id: s.id.clone(),
                    message: e.to_string(),
                }),
            ),
        }
    });

    let scale2 = config.intensity_scale * config.intensity_scale;
    let mut mses = Vec::new();
    let mut dices = Vec::new();
    for (truth, outcome) in &scored {
        let Ok(r) = outcome else { continue };
        mses.push(r.score / scale2);
        if let (Some(t), Some(m)) = (truth, &r.mask) {
            dices.push(dice(m, t)?);
        }
    }
    let failed = scored.len() - mses.len();
    if mses.is_empty() {
        return Err(Error::invalid(
            "evaluation",
            format!("all {failed} samples failed"),
        ));
    }
    let outcomes: Vec<SampleOutcome> = scored.into_iter().map(|(_, o)| o).collect();
    let confusion = outcome_confusion(samples, &outcomes)?;
    let report = MetricsReport {
        samples: samples.len(),
        failed,
        threshold: config.sample_threshold,
        reconstruction_accuracy: accuracy_from_mses(&mses)?,
        dice: (!dices.is_empty()).then(|| dices.iter().sum::<f64>() / dices.len() as f64),
        masks_scored: dices.len(),
        tp: None,
        fp: None,
        tn: None,
        fn_: None,
        sensitivity: None,
        specificity: None,
        accuracy: None,
    }
    .with_confusion(confusion);
    Ok(Evaluation { outcomes, report })
}

/// Sample threshold maximising balanced accuracy on a labelled
/// calibration set (see [`calibrate_threshold`]).
pub fn calibrate(
    model: &CatUNetModel,
    calibration: &Dataset,
    config: &ThresholdConfig,
    jobs: usize,
) -> Result<f64> {
    let scores = |samples: &[ImageSample]| -> Result<Vec<f64>> {
        map_ordered(samples, jobs, |s| {
            let p = prepare(model.config(), s)?;
            crate::diagnosis::score(model, &p.pixels, config)
        })
        .into_iter()
        .collect()
    };
    let t = calibrate_threshold(
        &scores(&calibration.positives)?,
        &scores(&calibration.negatives)?,
    )?;
    log::info!("calibrated sample threshold {t}");
    Ok(t)
}
