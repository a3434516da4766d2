//! Dataset manifests: one sample per line, `image_path<TAB>mask_or_label_path`,
//! UTF-8 with LF endings. Relative paths resolve against the manifest's
//! directory. A line with a single column names a file on its own (used
//! for mask-only sets).

use std::fs;
use std::path::{Path, PathBuf};

use super::pgm::{read_gray, read_labels, read_mask};
use super::{check_extent, BinaryMask, GrayImage, ImageError, LabelMap, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub first: PathBuf,
    pub second: Option<PathBuf>,
}

impl ManifestEntry {
    pub fn pair(first: impl Into<PathBuf>, second: impl Into<PathBuf>) -> Self {
        ManifestEntry {
            first: first.into(),
            second: Some(second.into()),
        }
    }

    pub fn single(first: impl Into<PathBuf>) -> Self {
        ManifestEntry {
            first: first.into(),
            second: None,
        }
    }

    fn second_or_err(&self, line: usize) -> Result<&Path> {
        self.second.as_deref().ok_or_else(|| ImageError::Manifest {
            line,
            reason: "expected two tab-separated paths".into(),
        })
    }
}

pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, raw) in text.split('\n').enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let resolve = |p: &str| -> Result<PathBuf> {
            if p.is_empty() {
                return Err(ImageError::Manifest {
                    line: i + 1,
                    reason: "empty path".into(),
                });
            }
            Ok(base.join(p))
        };
        let entry = match cols.as_slice() {
            [a] => ManifestEntry::single(resolve(a)?),
            [a, b] => ManifestEntry::pair(resolve(a)?, resolve(b)?),
            _ => {
                return Err(ImageError::Manifest {
                    line: i + 1,
                    reason: format!("expected 1 or 2 columns, found {}", cols.len()),
                })
            }
        };
        out.push(entry);
    }
    Ok(out)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new("")))
}

/// Writes entries verbatim; paths should be relative to the manifest.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for e in entries {
        text.push_str(&e.first.to_string_lossy());
        if let Some(s) = &e.second {
            text.push('\t');
            text.push_str(&s.to_string_lossy());
        }
        text.push('\n');
    }
    fs::write(path, text).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads `(image, mask)` pairs, checking that extents agree.
pub fn load_inpaint_pairs(manifest: impl AsRef<Path>) -> Result<Vec<(GrayImage, BinaryMask)>> {
    read_manifest(manifest)?
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let img = read_gray(&e.first)?;
            let mask = read_mask(e.second_or_err(i + 1)?)?;
            check_extent(img.width(), img.height(), mask.width(), mask.height())?;
            Ok((img, mask))
        })
        .collect()
}

/// Loads `(image, label map)` pairs with labels in `0..=max_label`.
pub fn load_label_pairs(
    manifest: impl AsRef<Path>,
    max_label: u8,
) -> Result<Vec<(GrayImage, LabelMap)>> {
    read_manifest(manifest)?
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let img = read_gray(&e.first)?;
            let labels = read_labels(e.second_or_err(i + 1)?, max_label)?;
            check_extent(img.width(), img.height(), labels.width(), labels.height())?;
            Ok((img, labels))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageproc::pgm::{write_gray, write_mask};

    #[test]
    fn parses_pairs_and_singles() {
        let m = parse_manifest("a.pgm\tb.pgm\nc.pgm\n\n", Path::new("/d")).unwrap();
        assert_eq!(
            m,
            vec![
                ManifestEntry::pair("/d/a.pgm", "/d/b.pgm"),
                ManifestEntry::single("/d/c.pgm")
            ]
        );
        assert!(matches!(
            parse_manifest("a\tb\tc\n", Path::new("")),
            Err(ImageError::Manifest { line: 1, .. })
        ));
    }

    #[test]
    fn loads_written_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let img = GrayImage::new(2, 2, vec![0.0, 1.0, 0.2, 0.4]).unwrap();
        let mask = BinaryMask::new(2, 2, vec![true, false, true, true]).unwrap();
        write_gray(dir.path().join("i.pgm"), &img).unwrap();
        write_mask(dir.path().join("m.pgm"), &mask).unwrap();
        let man = dir.path().join("manifest.tsv");
        write_manifest(&man, &[ManifestEntry::pair("i.pgm", "m.pgm")]).unwrap();
        let pairs = load_inpaint_pairs(&man).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].1, mask);
        assert!(pairs[0].0.max_abs_diff(&img) <= 0.5 / 255.0);
    }
}
