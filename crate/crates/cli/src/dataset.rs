//! Dataset directories: `<case>_image.imvol` with optional `<case>_labels.imvol`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use imunet::data::{read_volume, write_volume};
use imunet::{Case, ImageVolume, LabelVolume};

pub const IMAGE_SUFFIX: &str = "_image.imvol";
pub const LABELS_SUFFIX: &str = "_labels.imvol";
pub const PRED_SUFFIX: &str = "_pred.imvol";

pub fn case_name(i: usize) -> String {
    format!("case_{i:03}")
}

/// Case names with an image file, sorted.
pub fn list_cases(dir: &Path) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).with_context(|| format!("reading dataset directory {}", dir.display()))?;
    let mut names = Vec::new();
    for entry in entries {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(case) = name.strip_suffix(IMAGE_SUFFIX) {
            names.push(case.to_string());
        }
    }
    names.sort();
    if names.is_empty() {
        bail!("no *{IMAGE_SUFFIX} files in {}", dir.display());
    }
    Ok(names)
}

pub fn path(dir: &Path, case: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{case}{suffix}"))
}

pub fn read_image(dir: &Path, case: &str) -> Result<ImageVolume> {
    Ok(read_volume(path(dir, case, IMAGE_SUFFIX))?)
}

pub fn read_labels(dir: &Path, case: &str, suffix: &str) -> Result<LabelVolume> {
    Ok(read_volume(path(dir, case, suffix))?)
}

pub fn write_case(dir: &Path, case: &str, c: &Case) -> Result<()> {
    write_volume(path(dir, case, IMAGE_SUFFIX), &c.image)?;
    write_volume(path(dir, case, LABELS_SUFFIX), &c.labels)?;
    Ok(())
}

pub fn load_cases(dir: &Path) -> Result<Vec<(String, Case)>> {
    list_cases(dir)?
        .into_iter()
        .map(|name| {
            let c = Case::new(read_image(dir, &name)?, read_labels(dir, &name, LABELS_SUFFIX)?)?;
            Ok((name, c))
        })
        .collect()
}
