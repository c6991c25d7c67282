//! Dataset directory layout:
//!
//! ```text
//! root/images/<stem>.png   8-bit RGB
//! root/labels/<stem>.png   16-bit grayscale instance ids
//! root/manifest.json       optional {"train": [stems], "eval": [stems]}
//! ```
//!
//! Without a manifest, stems are split 80/20 by a hash of the stem.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Image, InstanceLabelMap, Origin, PatchRecord, Split};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default)]
    pub train: Vec<String>,
    #[serde(default)]
    pub eval: Vec<String>,
}

fn hash_split(stem: &str) -> Split {
    if crc32fast::hash(stem.as_bytes()).is_multiple_of(5) {
        Split::Eval
    } else {
        Split::Train
    }
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

pub fn read_rgb_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_rgb8();
    let (w, h) = img.dimensions();
    Image::new(w as usize, h as usize, img.into_raw())
}

fn read_labels(path: &Path) -> Result<(InstanceLabelMap, bool)> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_luma16();
    let (w, h) = img.dimensions();
    InstanceLabelMap::relabeled(w as usize, h as usize, img.into_raw())
}

/// Reads every image/label pair under `root`, sorted by stem.
pub fn load_dataset(root: &Path) -> Result<Vec<PatchRecord>> {
    let images = png_stems(&root.join("images"))?;
    let labels = png_stems(&root.join("labels"))?;
    if let Some(stem) = images.keys().find(|s| !labels.contains_key(*s)) {
        return Err(Error::UnpairedFile {
            stem: stem.clone(),
            detail: "image has no label map".into(),
        });
    }
    if let Some(stem) = labels.keys().find(|s| !images.contains_key(*s)) {
        return Err(Error::UnpairedFile {
            stem: stem.clone(),
            detail: "label map has no image".into(),
        });
    }

    let manifest_path = root.join("manifest.json");
    let manifest: Option<Manifest> = if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        Some(serde_json::from_str(&text)?)
    } else {
        None
    };
    let eval_stems: BTreeSet<&str> = manifest
        .as_ref()
        .map(|m| m.eval.iter().map(String::as_str).collect())
        .unwrap_or_default();
    if let Some(m) = &manifest {
        for stem in m.train.iter().chain(&m.eval) {
            if !images.contains_key(stem) {
                return Err(Error::UnpairedFile {
                    stem: stem.clone(),
                    detail: "listed in manifest.json but missing".into(),
                });
            }
        }
    }

    let mut records = Vec::with_capacity(images.len());
    for (stem, image_path) in &images {
        let image = read_rgb_png(image_path)?;
        let (map, repaired) = read_labels(&labels[stem])?;
        if repaired {
            log::warn!("{stem}: instance ids were not contiguous and have been relabelled");
        }
        let split = match &manifest {
            Some(_) if eval_stems.contains(stem.as_str()) => Split::Eval,
            Some(_) => Split::Train,
            None => hash_split(stem),
        };
        let origin = Origin {
            source: stem.clone(),
            x: 0,
            y: 0,
        };
        records.push(PatchRecord::new(image, map, origin, split)?);
    }
    Ok(records)
}

pub fn write_rgb_png(path: &Path, image: &Image) -> Result<()> {
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(image.width as u32, image.height as u32, image.data.clone())
            .ok_or_else(|| Error::input("image buffer size"))?;
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_label_png(path: &Path, labels: &InstanceLabelMap) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(labels.width() as u32, labels.height() as u32, labels.labels().to_vec())
            .ok_or_else(|| Error::input("label buffer size"))?;
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes records under `root` using `origin.source` as the stem, plus a
/// manifest recording each record's split.
pub fn save_dataset(root: &Path, records: &[PatchRecord]) -> Result<()> {
    let (images, labels) = (root.join("images"), root.join("labels"));
    for dir in [&images, &labels] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut manifest = Manifest::default();
    let mut seen = BTreeSet::new();
    for r in records {
        let stem = &r.origin.source;
        if stem.is_empty() || stem.contains(['/', '\\']) || !seen.insert(stem.clone()) {
            return Err(Error::input(format!(
                "record stem `{stem}` is empty, unsafe or repeated"
            )));
        }
        write_rgb_png(&images.join(format!("{stem}.png")), &r.image)?;
        write_label_png(&labels.join(format!("{stem}.png")), &r.labels)?;
        match r.split {
            Split::Train => manifest.train.push(stem.clone()),
            Split::Eval => manifest.eval.push(stem.clone()),
        }
    }
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}
