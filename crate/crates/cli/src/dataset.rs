//! Dataset directory layout, manifest I/O and atomic file writes.
//!
//! ```text
//! <data_dir>/manifest.csv       slide_id,image_path,mask_path,class_name
//! <data_dir>/images/<id>.png    8-bit RGB
//! <data_dir>/masks_clean/<id>.png
//! <data_dir>/masks_noisy/<id>.png
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use casc_core::grid::{BinaryMask, RgbImage};
use casc_core::io::{read_mask_png, read_rgb_png};
use casc_core::trainer::Sample;

pub const MANIFEST: &str = "manifest.csv";
pub const IMAGES: &str = "images";
pub const MASKS_CLEAN: &str = "masks_clean";
pub const MASKS_NOISY: &str = "masks_noisy";
pub const MANIFEST_COLUMNS: [&str; 4] = ["slide_id", "image_path", "mask_path", "class_name"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub slide_id: String,
    pub image_path: String,
    pub mask_path: String,
    pub class_name: String,
}

impl ManifestRow {
    pub fn image_id(&self) -> String {
        Path::new(&self.image_path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.image_path.clone())
    }

    fn mask_file(&self) -> &str {
        Path::new(&self.mask_path)
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or(&self.mask_path)
    }

    pub fn noisy_path(&self, data_dir: &Path) -> PathBuf {
        data_dir.join(MASKS_NOISY).join(self.mask_file())
    }

    pub fn noisy_relative(&self) -> String {
        format!("{MASKS_NOISY}/{}", self.mask_file())
    }
}

/// Writes `bytes` to a sibling temp file, then renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let name = path.file_name().context("output path has no file name")?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// CSV bytes preceded by a `#` comment header.
pub fn csv_bytes<I, R>(header: &str, columns: &[&str], rows: I) -> Result<Vec<u8>>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_writer(header.as_bytes().to_vec());
    w.write_record(columns)?;
    for r in rows {
        w.write_record(r)?;
    }
    Ok(w.into_inner().context("flushing csv")?)
}

pub fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))
}

pub fn read_manifest(data_dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = data_dir.join(MANIFEST);
    let mut r = csv_reader(&path)?;
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != MANIFEST_COLUMNS {
        bail!("{}: expected columns {}", path.display(), MANIFEST_COLUMNS.join(","));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.with_context(|| format!("reading {}", path.display()))?;
        rows.push(ManifestRow {
            slide_id: rec[0].to_string(),
            image_path: rec[1].to_string(),
            mask_path: rec[2].to_string(),
            class_name: rec[3].to_string(),
        });
    }
    Ok(rows)
}

/// Which label a loaded sample trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelSource {
    Clean,
    Noisy,
}

fn load_row(data_dir: &Path, row: &ManifestRow, classes: &[String], source: LabelSource) -> Result<Sample> {
    if row.slide_id.trim().is_empty() {
        bail!("empty slide_id");
    }
    let class_index = classes
        .iter()
        .position(|c| *c == row.class_name)
        .with_context(|| format!("class {:?} not in {}", row.class_name, classes.join(",")))?;
    let image: RgbImage = read_rgb_png(&data_dir.join(&row.image_path))?;
    let clean = read_mask_png(&data_dir.join(&row.mask_path))?;
    if clean.size() != image.size() {
        bail!("mask is {} but image is {}", clean.size(), image.size());
    }
    let label = match source {
        LabelSource::Clean => clean.clone(),
        LabelSource::Noisy => {
            let noisy: BinaryMask = read_mask_png(&row.noisy_path(data_dir))?;
            if noisy.size() != image.size() {
                bail!("noisy mask is {} but image is {}", noisy.size(), image.size());
            }
            noisy
        }
    };
    Ok(Sample {
        id: row.image_id(),
        slide_id: row.slide_id.clone(),
        class_index,
        image,
        label,
        clean,
    })
}

/// Loads every row; any failure aborts with a list of the offending rows.
pub fn load_strict(data_dir: &Path, rows: &[ManifestRow], classes: &[String], source: LabelSource) -> Result<Vec<Sample>> {
    let (samples, failures) = load_lenient(data_dir, rows, classes, source);
    if !failures.is_empty() {
        let list: Vec<String> = failures.iter().map(|(i, id, e)| format!("  row {}: {id}: {e}", i + 1)).collect();
        bail!("manifest rows failed validation:\n{}", list.join("\n"));
    }
    Ok(samples)
}

/// Loads what it can; failures come back as `(row index, image id, reason)`.
pub fn load_lenient(
    data_dir: &Path,
    rows: &[ManifestRow],
    classes: &[String],
    source: LabelSource,
) -> (Vec<Sample>, Vec<(usize, String, String)>) {
    let mut samples = Vec::new();
    let mut failures = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        match load_row(data_dir, row, classes, source) {
            Ok(s) => samples.push(s),
            Err(e) => failures.push((i, row.image_id(), format!("{e:#}"))),
        }
    }
    (samples, failures)
}

/// True when the directory exists and holds at least one entry.
pub fn non_empty_dir(dir: &Path) -> Result<bool> {
    if !dir.exists() {
        return Ok(false);
    }
    Ok(fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .next()
        .is_some())
}
