pub mod diagnose;
pub mod evaluate;
pub mod gradcheck;
pub mod synth;
pub mod train;

use std::fs;
use std::path::Path;

use anyhow::Context;

pub fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(parent) => {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))
        }
        None => Ok(()),
    }
}

/// Writes `contents`, creating parent directories.
pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    ensure_parent(path)?;
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}
