//! Deterministic synthetic corpus.
//!
//! Every image starts from a smooth background: a base level plus a few
//! broad Gaussian blobs. Positive (lesion-bearing, training-class) images
//! add one bright rotated ellipse of constant intensity, so the added
//! intensity is positive exactly on the ground-truth mask. Negative images
//! add Gaussian noise over the whole frame instead.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Rng, Stream};

use super::codec::write_pgm;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub image_size: usize,
    pub n_positive: usize,
    pub n_negative: usize,
    /// Inclusive range of ellipse semi-axes, in pixels.
    pub lesion_radius_range: (f64, f64),
    /// Inclusive range of the lesion plateau added to the background.
    pub lesion_intensity_range: (f64, f64),
    /// Standard deviation of the noise in negative images.
    pub noise_std: f64,
    pub seed: u64,
    /// Stem prefixes, so corpora generated with different seeds can be
    /// merged without collisions.
    pub positive_prefix: String,
    pub negative_prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            n_positive: 25,
            n_negative: 25,
            lesion_radius_range: (5.0, 10.0),
            lesion_intensity_range: (0.3, 0.4),
            noise_std: 0.12,
            seed: 0,
            positive_prefix: "pos".into(),
            negative_prefix: "neg".into(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (r0, r1) = self.lesion_radius_range;
        if self.image_size < 4 {
            return Err(Error::invalid(
                "image_size",
                format!("{} is below 4", self.image_size),
            ));
        }
        if !(r0 >= 1.0 && r0 <= r1 && r1 < self.image_size as f64 / 2.0 - 1.0) {
            return Err(Error::invalid(
                "lesion_radius_range",
                format!("({r0}, {r1}) must satisfy 1 <= min <= max < image_size/2 - 1"),
            ));
        }
        let (a0, a1) = self.lesion_intensity_range;
        if !(a0 > 0.0 && a0 <= a1 && a1 <= 1.0) {
            return Err(Error::invalid(
                "lesion_intensity_range",
                format!("({a0}, {a1}) must satisfy 0 < min <= max <= 1"),
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid(
                "noise_std",
                format!("{} is negative", self.noise_std),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    /// `(x, y)` in pixel coordinates; pixel `(i, j)` has centre `(j + 0.5, i + 0.5)`.
    pub center: (f64, f64),
    pub radii: (f64, f64),
    /// Rotation of the first axis, radians.
    pub angle: f64,
    pub intensity: f64,
}

impl Lesion {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (s, c) = self.angle.sin_cos();
        let u = (c * dx + s * dy) / self.radii.0;
        let v = (-s * dx + c * dy) / self.radii.1;
        u * u + v * v <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub label: String,
    pub path: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lesion: Option<Lesion>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: SynthConfig,
    pub files: Vec<ManifestEntry>,
}

/// One generated image: intensities in `[0, 1]` and, for positives, the
/// lesion and its mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthImage {
    pub pixels: Vec<f32>,
    pub lesion: Option<(Lesion, Vec<u8>)>,
}

fn background(size: usize, rng: &mut Rng) -> Vec<f64> {
    let s = size as f64;
    let base = f64::from(rng.uniform_range(0.15, 0.3));
    let blobs: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let cx = f64::from(rng.uniform()) * s;
            let cy = f64::from(rng.uniform()) * s;
            let sigma = s * f64::from(rng.uniform_range(0.25, 0.5));
            let amp = f64::from(rng.uniform_range(0.03, 0.1));
            (cx, cy, sigma, amp)
        })
        .collect();
    let mut out = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
            let v: f64 = blobs
                .iter()
                .map(|&(cx, cy, sigma, amp)| {
                    amp * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * sigma * sigma)).exp()
                })
                .sum();
            out.push(base + v);
        }
    }
    out
}

/// Draws one image from `rng`.
pub fn generate(config: &SynthConfig, positive: bool, rng: &mut Rng) -> SynthImage {
    let size = config.image_size;
    let mut img = background(size, rng);
    let lesion = if positive {
        let (r0, r1) = config.lesion_radius_range;
        let radii = (
            r0 + f64::from(rng.uniform()) * (r1 - r0),
            r0 + f64::from(rng.uniform()) * (r1 - r0),
        );
        let reach = radii.0.max(radii.1) + 1.0;
        let span = size as f64 - 2.0 * reach;
        let center = (
            reach + f64::from(rng.uniform()) * span,
            reach + f64::from(rng.uniform()) * span,
        );
        let angle = f64::from(rng.uniform()) * PI;
        let (a0, a1) = config.lesion_intensity_range;
        let intensity = a0 + f64::from(rng.uniform()) * (a1 - a0);
        let lesion = Lesion {
            center,
            radii,
            angle,
            intensity,
        };
        let mut mask = vec![0u8; size * size];
        for i in 0..size {
            for j in 0..size {
                if lesion.contains(j as f64 + 0.5, i as f64 + 0.5) {
                    img[i * size + j] += intensity;
                    mask[i * size + j] = 1;
                }
            }
        }
        // Both radii are at least 1, so the pixel centre nearest the
        // ellipse centre is inside and the mask is never empty.
        Some((lesion, mask))
    } else {
        for v in &mut img {
            *v += config.noise_std * f64::from(rng.normal());
        }
        None
    };
    SynthImage {
        pixels: img.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect(),
        lesion,
    }
}

fn to_bytes(pixels: &[f32]) -> Vec<u8> {
    pixels.iter().map(|&v| super::to_byte(v)).collect()
}

/// Writes `positive/`, `negative/`, `masks/` and `manifest.json` under
/// `root`. Positives are drawn first, then negatives, from one synthesis
/// stream, so output depends only on the config.
pub fn synthesize(config: &SynthConfig, root: impl AsRef<Path>) -> Result<Manifest> {
    config.validate()?;
    let root = root.as_ref();
    for d in ["positive", "negative", "masks"] {
        let dir = root.join(d);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let size = config.image_size;
    let mut rng = Rng::new(config.seed, Stream::Synthesis);
    let mut files = Vec::with_capacity(config.n_positive + config.n_negative);
    let jobs = (0..config.n_positive)
        .map(|i| (true, i))
        .chain((0..config.n_negative).map(|i| (false, i)));
    for (positive, i) in jobs {
        let image = generate(config, positive, &mut rng);
        let (prefix, dir) = if positive {
            (&config.positive_prefix, "positive")
        } else {
            (&config.negative_prefix, "negative")
        };
        let id = format!("{prefix}_{i:04}");
        let path = format!("{dir}/{id}.pgm");
        write_pgm(&root.join(&path), size, size, &to_bytes(&image.pixels))?;
        let (mask_path, lesion) = match image.lesion {
            Some((lesion, mask)) => {
                let mask_path = format!("masks/{id}.pgm");
                let bytes: Vec<u8> = mask.iter().map(|&m| m * 255).collect();
                write_pgm(&root.join(&mask_path), size, size, &bytes)?;
                (Some(mask_path), Some(lesion))
            }
            None => (None, None),
        };
        files.push(ManifestEntry {
            id,
            label: if positive { "positive" } else { "negative" }.into(),
            path,
            mask_path,
            lesion,
        });
    }
    let manifest = Manifest {
        seed: config.seed,
        config: config.clone(),
        files,
    };
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_dataset, read_gray};

    fn small() -> SynthConfig {
        SynthConfig {
            image_size: 32,
            n_positive: 4,
            n_negative: 3,
            lesion_radius_range: (2.0, 6.0),
            seed: 11,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn writes_the_expected_layout() {
        let dir = tempfile::tempdir().unwrap();
        let m = synthesize(&small(), dir.path()).unwrap();
        assert_eq!(m.files.len(), 7);
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(
            (ds.positives.len(), ds.negatives.len(), ds.masks()),
            (4, 3, 4)
        );
        let text = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        let back: Manifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back.files.len(), m.files.len());
        assert_eq!(
            back.files[0].mask_path.as_deref(),
            Some("masks/pos_0000.pgm")
        );
        assert_eq!(back.config.seed, 11);
    }

    #[test]
    fn reruns_are_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        synthesize(&small(), a.path()).unwrap();
        synthesize(&small(), b.path()).unwrap();
        for rel in [
            "manifest.json",
            "positive/pos_0002.pgm",
            "negative/neg_0001.pgm",
            "masks/pos_0003.pgm",
        ] {
            assert_eq!(
                fs::read(a.path().join(rel)).unwrap(),
                fs::read(b.path().join(rel)).unwrap(),
                "{rel}"
            );
        }
    }

    #[test]
    fn masks_match_lesion_support() {
        let cfg = small();
        let mut rng = Rng::new(3, Stream::Synthesis);
        for _ in 0..20 {
            let mut bg_rng = rng.clone();
            let bg = background(cfg.image_size, &mut bg_rng);
            let img = generate(&cfg, true, &mut rng);
            let (lesion, mask) = img.lesion.unwrap();
            assert!(mask.contains(&1));
            for (k, &m) in mask.iter().enumerate() {
                let (i, j) = (k / cfg.image_size, k % cfg.image_size);
                assert_eq!(m == 1, lesion.contains(j as f64 + 0.5, i as f64 + 0.5));
                let added = img.pixels[k] - bg[k].clamp(0.0, 1.0) as f32;
                assert_eq!(m == 1, added > 0.0, "pixel {k}");
            }
            let (x, y) = lesion.center;
            let r = lesion.radii.0.max(lesion.radii.1);
            let s = cfg.image_size as f64;
            assert!(x - r >= 0.0 && x + r <= s && y - r >= 0.0 && y + r <= s);
        }
    }

    #[test]
    fn negatives_are_clean_of_lesions() {
        let dir = tempfile::tempdir().unwrap();
        let m = synthesize(&small(), dir.path()).unwrap();
        for f in m.files.iter().filter(|f| f.label == "negative") {
            assert!(f.mask_path.is_none() && f.lesion.is_none());
            let (h, w, _) = read_gray(&dir.path().join(&f.path)).unwrap();
            assert_eq!((h, w), (32, 32));
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for bad in [
            SynthConfig {
                lesion_radius_range: (0.5, 3.0),
                ..small()
            },
            SynthConfig {
                lesion_radius_range: (4.0, 3.0),
                ..small()
            },
            SynthConfig {
                lesion_radius_range: (2.0, 16.0),
                ..small()
            },
            SynthConfig {
                noise_std: -1.0,
                ..small()
            },
            SynthConfig {
                lesion_intensity_range: (0.0, 0.2),
                ..small()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}
