use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::{FloatImage, Sample, COMPOSITE_DIR, MASK_DIR, REAL_DIR};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SampleEntry {
    pub id: String,
    pub real: PathBuf,
    pub composite: PathBuf,
    pub mask: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SkippedSample {
    pub file: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub missing_dirs: Vec<String>,
    pub skipped: Vec<SkippedSample>,
}

impl LoadReport {
    pub fn is_clean(&self) -> bool {
        self.missing_dirs.is_empty() && self.skipped.is_empty()
    }
}

/// Samples found on disk, sorted by id. Images are decoded on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    entries: Vec<SampleEntry>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[SampleEntry] {
        &self.entries
    }

    pub fn load(&self, index: usize) -> Result<Sample> {
        let e = &self.entries[index];
        Sample::new(
            e.id.clone(),
            FloatImage::read_rgb(&e.real)?,
            FloatImage::read_rgb(&e.composite)?,
            FloatImage::read_mask(&e.mask)?,
        )
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}

/// Splits a composite stem `<real>_<mask>_<variant>` into the real and mask stems.
fn parse_stem(stem: &str) -> Option<(&str, String)> {
    let mut parts = stem.rsplitn(3, '_');
    let variant = parts.next()?;
    let mask = parts.next()?;
    let real = parts.next()?;
    if real.is_empty() || mask.is_empty() || variant.is_empty() {
        return None;
    }
    Some((real, format!("{real}_{mask}")))
}

fn dimensions(path: &Path) -> std::result::Result<(u32, u32), String> {
    ::image::image_dimensions(path).map_err(|e| format!("cannot read {}: {e}", path.display()))
}

/// Scans an iHarmony4-style directory. Composites without a matching real image and
/// mask, unreadable files and triples of mismatched size are listed in the report
/// and skipped.
pub fn load_dataset(root: &Path) -> Result<(Dataset, LoadReport)> {
    let meta =
        fs::metadata(root).map_err(|e| Error::io(format!("dataset {}", root.display()), e))?;
    if !meta.is_dir() {
        return Err(Error::io(
            format!("dataset {}", root.display()),
            std::io::Error::new(std::io::ErrorKind::NotADirectory, "not a directory"),
        ));
    }
    let mut report = LoadReport::default();
    for dir in [REAL_DIR, COMPOSITE_DIR, MASK_DIR] {
        if !root.join(dir).is_dir() {
            report.missing_dirs.push(dir.to_string());
        }
    }
    let composite_dir = root.join(COMPOSITE_DIR);
    let mut files = Vec::new();
    if composite_dir.is_dir() {
        for entry in fs::read_dir(&composite_dir)
            .map_err(|e| Error::io(format!("listing {}", composite_dir.display()), e))?
        {
            let entry =
                entry.map_err(|e| Error::io(format!("listing {}", composite_dir.display()), e))?;
            files.push(entry.path());
        }
    }
    files.sort();

    let mut entries = Vec::new();
    for file in files {
        let mut skip = |reason: String| {
            report.skipped.push(SkippedSample {
                file: file.clone(),
                reason,
            })
        };
        if file.extension().and_then(|e| e.to_str()) != Some("png") {
            skip("not a .png file".into());
            continue;
        }
        let Some(stem) = file.file_stem().and_then(|s| s.to_str()) else {
            skip("file name is not valid UTF-8".into());
            continue;
        };
        let Some((real_stem, mask_stem)) = parse_stem(stem) else {
            skip("name does not follow <real>_<mask>_<variant>".into());
            continue;
        };
        let real = root.join(REAL_DIR).join(format!("{real_stem}.png"));
        let mask = root.join(MASK_DIR).join(format!("{mask_stem}.png"));
        let missing: Vec<_> = [&real, &mask]
            .into_iter()
            .filter(|p| !p.is_file())
            .map(|p| p.display().to_string())
            .collect();
        if !missing.is_empty() {
            skip(format!(
                "orphan composite, missing {}",
                missing.join(" and ")
            ));
            continue;
        }
        let dims = [&real, &file, &mask].map(|p| dimensions(p));
        match dims {
            [Ok(r), Ok(c), Ok(m)] if r == c && r == m => entries.push(SampleEntry {
                id: stem.to_string(),
                real,
                composite: file.clone(),
                mask,
            }),
            [Ok(r), Ok(c), Ok(m)] => skip(format!(
                "dimension mismatch: real {}x{}, composite {}x{}, mask {}x{}",
                r.0, r.1, c.0, c.1, m.0, m.1
            )),
            [r, c, m] => {
                let errs: Vec<_> = [r, c, m].into_iter().filter_map(|d| d.err()).collect();
                skip(errs.join("; "));
            }
        }
    }
    Ok((
        Dataset {
            root: root.to_path_buf(),
            entries,
        },
        report,
    ))
}
