//! Dataset directories and evaluation manifests.
//!
//! A dataset is a directory of `pair_NNNN/` folders holding `moving.carf`,
//! `fixed.carf` and optionally `moving_mask.carf`, `fixed_mask.carf` and
//! `field_gt.carf`. A manifest is a text file with one pair per line:
//! `moving_mask fixed_mask [field]`, paths relative to the manifest; a
//! missing field means the identity transform. `#` starts a comment line.

use std::path::{Path, PathBuf};

use super::carf::{read_image, read_mask, write_field, write_image, write_mask};
use super::{create_dir, read_file, write_file};
use crate::error::{CarError, Result};
use crate::synthdeform::PairSample;
use crate::trainer::TrainPair;

pub const MANIFEST: &str = "manifest.txt";

pub fn pair_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("pair_{:04}", index))
}

/// Writes the samples and a manifest of their mask pairs.
pub fn write_dataset(root: &Path, samples: &[PairSample]) -> Result<()> {
    create_dir(root)?;
    let mut manifest = String::from("# moving_mask fixed_mask [field]\n");
    for (i, s) in samples.iter().enumerate() {
        let d = pair_dir(root, i);
        create_dir(&d)?;
        write_image(&d.join("moving.carf"), &s.moving)?;
        write_image(&d.join("fixed.carf"), &s.fixed)?;
        write_mask(&d.join("moving_mask.carf"), &s.mask_moving)?;
        write_mask(&d.join("fixed_mask.carf"), &s.mask_fixed)?;
        write_field(&d.join("field_gt.carf"), &s.field_gt)?;
        let rel = format!("pair_{:04}", i);
        manifest.push_str(&format!("{0}/moving_mask.carf {0}/fixed_mask.carf\n", rel));
    }
    write_file(&root.join(MANIFEST), manifest.as_bytes())
}

pub fn list_pairs(root: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(root).map_err(|e| CarError::io(root, e))?;
    let mut dirs = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| CarError::io(root, e))?;
        let name = entry.file_name();
        if name.to_string_lossy().starts_with("pair_") && entry.path().is_dir() {
            dirs.push(entry.path());
        }
    }
    dirs.sort();
    Ok(dirs)
}

pub fn load_pair(dir: &Path) -> Result<TrainPair> {
    let moving = read_image(&dir.join("moving.carf"))?;
    let fixed = read_image(&dir.join("fixed.carf"))?;
    let (mm, mf) = (dir.join("moving_mask.carf"), dir.join("fixed_mask.carf"));
    let masks = if mm.exists() && mf.exists() {
        Some((read_mask(&mm)?, read_mask(&mf)?))
    } else {
        None
    };
    Ok(TrainPair { moving, fixed, masks })
}

pub fn load_dataset(root: &Path) -> Result<Vec<TrainPair>> {
    let dirs = list_pairs(root)?;
    if dirs.is_empty() {
        return Err(CarError::invalid(format!("{} contains no pair_* directories", root.display())));
    }
    dirs.iter().map(|d| load_pair(d)).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub moving_mask: PathBuf,
    pub fixed_mask: PathBuf,
    pub field: Option<PathBuf>,
}

pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if !(2..=3).contains(&parts.len()) {
            return Err(CarError::Config {
                line: i + 1,
                detail: format!("expected 2 or 3 paths, found {}", parts.len()),
            });
        }
        out.push(ManifestEntry {
            moving_mask: base.join(parts[0]),
            fixed_mask: base.join(parts[1]),
            field: parts.get(2).map(|p| base.join(p)),
        });
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = String::from_utf8(read_file(path)?).map_err(|_| CarError::Config {
        line: 0,
        detail: format!("{} is not UTF-8", path.display()),
    })?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_lines() {
        let m = parse_manifest("# c\na b\n\nc d e\n", Path::new("/r")).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].field, None);
        assert_eq!(m[1].field.as_deref(), Some(Path::new("/r/e")));
        let e = parse_manifest("a\n", Path::new(".")).unwrap_err().to_string();
        assert!(e.contains("line 1"));
    }
}
