use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::diagnosis::Label;
use crate::error::{Error, Result};

use super::codec::{load_image, load_mask, stem};
use super::ImageSample;

/// Extensions recognised inside dataset directories (case-insensitive).
pub const SUPPORTED_EXTENSIONS: &[&str] = &["pgm", "png"];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    /// With `truth_mask` set where `masks/` has a file of the same stem.
    pub positives: Vec<ImageSample>,
    pub negatives: Vec<ImageSample>,
}

impl Dataset {
    pub fn masks(&self) -> usize {
        self.positives
            .iter()
            .filter(|s| s.truth_mask.is_some())
            .count()
    }

    /// Positives then negatives.
    pub fn all(&self) -> impl Iterator<Item = &ImageSample> {
        self.positives.iter().chain(&self.negatives)
    }
}

/// Image files directly under `dir`, sorted by the bytes of their names.
fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let supported = path.extension().and_then(|e| e.to_str()).is_some_and(|e| {
            SUPPORTED_EXTENSIONS
                .iter()
                .any(|s| s.eq_ignore_ascii_case(e))
        });
        if supported && path.is_file() {
            files.push(path);
        }
    }
    files.sort_by(|a, b| {
        a.file_name()
            .map(|n| n.as_encoded_bytes())
            .cmp(&b.file_name().map(|n| n.as_encoded_bytes()))
    });
    Ok(files)
}

fn load_dir(dir: &Path, label: Option<Label>) -> Result<Vec<ImageSample>> {
    image_files(dir)?
        .iter()
        .map(|p| {
            let mut s = load_image(p)?;
            s.truth_label = label;
            Ok(s)
        })
        .collect()
}

/// Every image directly under `dir`, unlabelled, in the same order as
/// [`load_dataset`].
pub fn load_images(dir: impl AsRef<Path>) -> Result<Vec<ImageSample>> {
    load_dir(dir.as_ref(), None)
}

/// Loads `root/positive`, `root/negative` (if present) and pairs
/// `root/masks` with positives by stem.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    let pos_dir = root.join("positive");
    if !pos_dir.is_dir() {
        return Err(Error::invalid(
            "dataset",
            format!("{} has no positive/ directory", root.display()),
        ));
    }
    let mut positives = load_dir(&pos_dir, Some(Label::Positive))?;
    let neg_dir = root.join("negative");
    let negatives = if neg_dir.is_dir() {
        load_dir(&neg_dir, Some(Label::Negative))?
    } else {
        Vec::new()
    };

    let mask_dir = root.join("masks");
    if mask_dir.is_dir() {
        let ids: BTreeSet<String> = positives.iter().map(|s| s.id.clone()).collect();
        let mut masks = std::collections::HashMap::new();
        for p in image_files(&mask_dir)? {
            let id = stem(&p);
            if ids.contains(&id) {
                masks.insert(id, p);
            } else {
                log::warn!("mask {} has no matching positive image", p.display());
            }
        }
        for s in &mut positives {
            if let Some(p) = masks.get(&s.id) {
                let mask = load_mask(p)?;
                let dims = &s.pixels.shape()[1..];
                if mask.shape() != dims {
                    return Err(Error::shape(
                        format!("mask {}", p.display()),
                        format!("{:?} does not match image {:?}", mask.shape(), dims),
                    ));
                }
                s.truth_mask = Some(mask);
            }
        }
    }
    if positives.is_empty() && negatives.is_empty() {
        return Err(Error::invalid(
            "dataset",
            format!("{} contains no images", root.display()),
        ));
    }
    Ok(Dataset {
        positives,
        negatives,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::write_pgm;

    #[test]
    fn layout_ordering_and_pairing() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        for d in ["positive", "negative", "masks"] {
            fs::create_dir(root.join(d)).unwrap();
        }
        for name in ["img_010", "img_007", "IMG_9", "img_008"] {
            write_pgm(
                &root.join("positive").join(format!("{name}.pgm")),
                2,
                2,
                &[1, 2, 3, 4],
            )
            .unwrap();
        }
        write_pgm(&root.join("negative/n.pgm"), 2, 2, &[0; 4]).unwrap();
        write_pgm(&root.join("masks/img_007.pgm"), 2, 2, &[255, 0, 0, 200]).unwrap();
        write_pgm(&root.join("masks/orphan.pgm"), 2, 2, &[0; 4]).unwrap();
        fs::write(root.join("positive/notes.txt"), "skip me").unwrap();

        let ds = load_dataset(root).unwrap();
        let ids: Vec<&str> = ds.positives.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["IMG_9", "img_007", "img_008", "img_010"]);
        assert_eq!(ds.negatives.len(), 1);
        assert_eq!(ds.negatives[0].truth_label, Some(Label::Negative));
        assert_eq!(ds.masks(), 1);
        assert_eq!(
            ds.positives[1].truth_mask.as_ref().unwrap().data(),
            &[1.0, 0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn missing_or_empty_roots_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::Invalid { .. })
        ));
        fs::create_dir(dir.path().join("positive")).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::Invalid { .. })
        ));
    }

    #[test]
    fn mismatched_mask_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        fs::create_dir_all(root.join("positive")).unwrap();
        fs::create_dir_all(root.join("masks")).unwrap();
        write_pgm(&root.join("positive/a.pgm"), 2, 2, &[0; 4]).unwrap();
        write_pgm(&root.join("masks/a.pgm"), 3, 2, &[0; 6]).unwrap();
        assert!(load_dataset(root).is_err());
    }
}
