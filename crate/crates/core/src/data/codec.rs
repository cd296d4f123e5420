//! Grayscale image files to and from `[0, 1]` tensors.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageReader};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::ImageSample;

fn decode_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

/// Decodes an 8-bit grayscale image into `(height, width, bytes)`.
/// Binary PGM is always supported, PNG with the `png` feature; other
/// colour types are converted to luma.
pub fn read_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    if reader.format().is_none() {
        return Err(decode_error(path, "unrecognised image format"));
    }
    let img = reader.decode().map_err(|e| decode_error(path, e))?;
    if img.color() != image::ColorType::L8 {
        log::debug!(
            "{}: converting {:?} to 8-bit grayscale",
            path.display(),
            img.color()
        );
    }
    let luma = img.into_luma8();
    let (w, h) = luma.dimensions();
    Ok((h as usize, w as usize, luma.into_raw()))
}

/// Writes `bytes` (row-major, `height x width`) as a binary PGM.
pub fn write_pgm(path: &Path, height: usize, width: usize, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let encoder = PnmEncoder::new(BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary));
    encoder
        .write_image(bytes, width as u32, height as u32, ExtendedColorType::L8)
        .map_err(|e| decode_error(path, e))
}

/// Loads an image as a `[1, H, W]` tensor scaled by `1/255`, with the
/// file stem as its id.
pub fn load_image(path: &Path) -> Result<ImageSample> {
    let (h, w, bytes) = read_gray(path)?;
    let pixels = Tensor::new(
        [1, h, w],
        bytes.iter().map(|&b| f32::from(b) / 255.0).collect(),
    )?;
    Ok(ImageSample::new(stem(path), pixels))
}

/// Loads a mask as a binary `[H, W]` tensor: bytes of 128 and above are 1.
pub fn load_mask(path: &Path) -> Result<Tensor> {
    let (h, w, bytes) = read_gray(path)?;
    Tensor::new(
        [h, w],
        bytes
            .iter()
            .map(|&b| if b >= 128 { 1.0 } else { 0.0 })
            .collect(),
    )
}

/// Saves the first channel of a `[C, H, W]` or `[H, W]` tensor with values
/// in `[0, 1]` as an 8-bit PGM.
pub fn save_image(path: &Path, t: &Tensor) -> Result<()> {
    let (h, w) = match *t.shape() {
        [h, w] | [_, h, w] => (h, w),
        _ => {
            return Err(Error::shape(
                "save_image",
                format!("expected [C, H, W] or [H, W], got {:?}", t.shape()),
            ))
        }
    };
    let bytes: Vec<u8> = t.data()[..h * w].iter().map(|&v| to_byte(v)).collect();
    write_pgm(path, h, w, &bytes)
}

/// `round(255 * v)` after clamping to `[0, 1]`.
pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub(crate) fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Bilinear resize of every channel of `[C, H, W]` to `[C, size, size]`,
/// sampling at pixel centres with edge clamping. Same-size input is
/// returned unchanged.
pub fn resize(t: &Tensor, size: usize) -> Result<Tensor> {
    let [c, h, w] = match *t.shape() {
        [c, h, w] => [c, h, w],
        _ => {
            return Err(Error::shape(
                "resize",
                format!("expected [C, H, W], got {:?}", t.shape()),
            ))
        }
    };
    if size == 0 {
        return Err(Error::invalid("resize target", "must be at least 1"));
    }
    if h == size && w == size {
        return Ok(t.clone());
    }
    if h == 0 || w == 0 {
        return Err(Error::shape("resize", "empty image"));
    }
    let taps = |n_in: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / size as f64;
        (0..size)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, (src - lo as f64) as f32)
            })
            .collect()
    };
    let (rows, cols) = (taps(h), taps(w));
    let src = t.data();
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new([c, size, size], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_roundtrip_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("four.pgm");
        write_pgm(&p, 2, 2, &[0, 128, 255, 64]).unwrap();
        assert!(std::fs::read(&p).unwrap().starts_with(b"P5"));
        let s = load_image(&p).unwrap();
        assert_eq!(s.id, "four");
        assert_eq!(s.pixels.shape(), &[1, 2, 2]);
        assert_eq!(s.pixels.data(), &[0.0, 128.0 / 255.0, 1.0, 64.0 / 255.0]);

        write_pgm(&p, 3, 2, &[0; 6]).unwrap();
        assert!(load_image(&p)
            .unwrap()
            .pixels
            .data()
            .iter()
            .all(|&v| v == 0.0));
        write_pgm(&p, 3, 2, &[255; 6]).unwrap();
        assert!(load_image(&p)
            .unwrap()
            .pixels
            .data()
            .iter()
            .all(|&v| v == 1.0));
    }

    #[test]
    fn bad_files_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.pgm");
        std::fs::write(&p, b"P5\n2 2\n255\n\x00").unwrap();
        let err = load_image(&p).unwrap_err().to_string();
        assert!(err.contains("junk.pgm"), "{err}");
        let p = dir.path().join("text.pgm");
        std::fs::write(&p, b"hello").unwrap();
        assert!(load_image(&p).is_err());
        assert!(matches!(
            load_image(&dir.path().join("none.pgm")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn save_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.pgm");
        let t = Tensor::new([1, 1, 3], vec![-0.5, 0.5, 2.0]).unwrap();
        save_image(&p, &t).unwrap();
        assert_eq!(read_gray(&p).unwrap().2, vec![0, 128, 255]);
    }

    #[test]
    fn resize_checkerboard_against_hand_values() {
        let t = Tensor::new([1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let r = resize(&t, 4).unwrap();
        // Output centres map to source coordinates -0.25 (clamped), 0.25,
        // 0.75 and 1.25 (clamped); the inner 2x2 mixes all four inputs.
        let at = |y: usize, x: usize| r.data()[y * 4 + x];
        assert_eq!(at(1, 1), 0.375);
        assert_eq!(at(1, 2), 0.625);
        assert_eq!(at(2, 1), 0.625);
        assert_eq!(at(2, 2), 0.375);
        assert_eq!(at(0, 0), 0.0);
        assert_eq!(at(0, 3), 1.0);
    }

    #[test]
    fn resize_identity_and_constants() {
        let t = Tensor::from_fn(&[2, 5, 5], |i| i as f32 / 50.0);
        assert_eq!(resize(&t, 5).unwrap(), t);
        let c = Tensor::full(&[1, 7, 3], 0.3);
        for size in [1, 4, 16] {
            assert!(resize(&c, size)
                .unwrap()
                .data()
                .iter()
                .all(|&v| (v - 0.3).abs() < 1e-6));
        }
    }
}
