//! Image IO, preprocessing, dataset directories and the synthetic corpus.
//!
//! A dataset root holds `positive/`, an optional `negative/` and an
//! optional `masks/` whose files share stems with `positive/`.

mod codec;
mod dataset;
pub mod synth;

pub use self::codec::{load_image, load_mask, read_gray, resize, save_image, to_byte, write_pgm};
pub use self::dataset::{load_dataset, load_images, Dataset, SUPPORTED_EXTENSIONS};
pub use self::synth::{synthesize, Manifest, SynthConfig};

use crate::diagnosis::Label;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    /// `[C, H, W]` in `[0, 1]`.
    pub pixels: Tensor,
    pub truth_label: Option<Label>,
    /// Binary `[H, W]`.
    pub truth_mask: Option<Tensor>,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, pixels: Tensor) -> Self {
        Self {
            id: id.into(),
            pixels,
            truth_label: None,
            truth_mask: None,
        }
    }
}

/// Resizes to `size x size`, clamps to `[0, 1]` and replicates a single
/// channel up to `channels`. A mask is resized alongside and re-binarized
/// at 0.5. Idempotent.
pub fn preprocess(sample: &ImageSample, size: usize, channels: usize) -> Result<ImageSample> {
    let c = sample.pixels.shape().first().copied().unwrap_or(0);
    let resized = resize(&sample.pixels, size)?.map(|v| v.clamp(0.0, 1.0));
    let pixels = if c == channels {
        resized
    } else if c == 1 {
        let plane = resized.data();
        Tensor::new([channels, size, size], plane.repeat(channels))?
    } else {
        return Err(Error::shape(
            "preprocess",
            format!("cannot map {c} channels to {channels}"),
        ));
    };
    let truth_mask = match &sample.truth_mask {
        None => None,
        Some(m) => {
            let [h, w] = match *m.shape() {
                [h, w] => [h, w],
                _ => {
                    return Err(Error::shape(
                        "preprocess mask",
                        format!("expected [H, W], got {:?}", m.shape()),
                    ))
                }
            };
            let m3 = m.clone().reshape([1, h, w])?;
            let r = resize(&m3, size)?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
            Some(r.reshape([size, size])?)
        }
    };
    Ok(ImageSample {
        id: sample.id.clone(),
        pixels,
        truth_label: sample.truth_label,
        truth_mask,
    })
}
