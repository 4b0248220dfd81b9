//! Dataset files: `<split>/<index>.png`, an optional sibling `.txt` label
//! file and `manifest.json` at the dataset root.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::LabeledImage;
use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection};
use crate::raster::GrayImage;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub image: String,
    pub label: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub items: Vec<ManifestItem>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Class names in class-id order.
    pub classes: Vec<String>,
    pub splits: BTreeMap<String, SplitEntry>,
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path, source })
}

fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(m).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Rounds a box to the label file's six-decimal grid.
pub fn quantize_box(b: BBox) -> BBox {
    let q = |v: f32| ((v as f64 * 1e6).round() / 1e6) as f32;
    BBox {
        cx: q(b.cx),
        cy: q(b.cy),
        w: q(b.w),
        h: q(b.h),
    }
}

pub fn format_label(d: &Detection) -> String {
    let b = d.bbox;
    format!("{} {:.6} {:.6} {:.6} {:.6}", d.class_id, b.cx, b.cy, b.w, b.h)
}

fn parse_labels(path: &Path, text: &str, classes: usize) -> Result<Vec<Detection>> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(err(line, format!("expected 5 fields, found {}", fields.len())));
        }
        let class_id: usize = fields[0]
            .parse()
            .map_err(|_| err(line, format!("bad class id `{}`", fields[0])))?;
        if class_id >= classes {
            return Err(err(line, format!("class id {class_id} out of range (have {classes})")));
        }
        let mut v = [0f32; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|_| err(line, format!("bad number `{f}`")))?;
        }
        let bbox = BBox::new(v[0], v[1], v[2], v[3]).map_err(|e| err(line, e.to_string()))?;
        out.push(Detection::new(class_id, bbox, 1.0));
    }
    Ok(out)
}

/// Writes one split and records it in the manifest (created if absent).
/// Images flagged unlabeled get no label file.
pub fn write_dataset(images: &[LabeledImage], dir: &Path, split: &str, classes: &[String]) -> Result<Manifest> {
    let split_dir = dir.join(split);
    fs::create_dir_all(&split_dir).map_err(|e| Error::io(&split_dir, e))?;
    let mut manifest = if dir.join(MANIFEST_FILE).exists() {
        read_manifest(dir)?
    } else {
        Manifest::default()
    };
    if !manifest.classes.is_empty() && manifest.classes != classes {
        return Err(Error::Data(format!(
            "class list {classes:?} disagrees with existing manifest {:?}",
            manifest.classes
        )));
    }
    manifest.classes = classes.to_vec();
    let mut entry = SplitEntry::default();
    for (i, li) in images.iter().enumerate() {
        let stem = format!("{i:05}");
        let image_rel = format!("{split}/{stem}.png");
        let image_path = dir.join(&image_rel);
        let (w, h) = (li.image.width() as u32, li.image.height() as u32);
        let buf = image::GrayImage::from_raw(w, h, li.image.to_bytes()).expect("buffer matches dimensions");
        buf.save(&image_path).map_err(|source| Error::Image {
            path: image_path.clone(),
            source,
        })?;
        let label = if li.unlabeled {
            None
        } else {
            let rel = format!("{split}/{stem}.txt");
            let path = dir.join(&rel);
            let text: String = li.detections.iter().map(|d| format_label(d) + "\n").collect();
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            Some(rel)
        };
        entry.items.push(ManifestItem { image: image_rel, label });
    }
    manifest.splits.insert(split.to_string(), entry);
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

fn load_image(path: &PathBuf) -> Result<GrayImage> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.clone(),
            source,
        })?
        .to_luma8();
    GrayImage::from_bytes(img.width() as usize, img.height() as usize, img.as_raw())
}

/// Reads one split. Items without a label file (or whose label file is
/// missing on disk) load as unlabeled with no detections.
pub fn read_dataset(dir: &Path, split: &str) -> Result<Vec<LabeledImage>> {
    let manifest = read_manifest(dir)?;
    let entry = manifest
        .splits
        .get(split)
        .ok_or_else(|| Error::Data(format!("split `{split}` not in {}", dir.join(MANIFEST_FILE).display())))?;
    entry
        .items
        .iter()
        .map(|item| {
            let image = load_image(&dir.join(&item.image))?;
            let label_path = item.label.as_ref().map(|l| dir.join(l)).filter(|p| p.exists());
            match label_path {
                Some(path) => {
                    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                    Ok(LabeledImage {
                        image,
                        detections: parse_labels(&path, &text, manifest.classes.len())?,
                        unlabeled: false,
                    })
                }
                None => Ok(LabeledImage {
                    image,
                    detections: Vec::new(),
                    unlabeled: true,
                }),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_line_format() {
        let d = Detection::new(1, BBox::new(0.5, 0.5, 0.25, 0.25).unwrap(), 1.0);
        assert_eq!(format_label(&d), "1 0.500000 0.500000 0.250000 0.250000");
    }

    #[test]
    fn malformed_line_reports_position() {
        let p = Path::new("x.txt");
        let err = parse_labels(p, "0 0.5 0.5 0.1 0.1\n0 0.5 0.5 0.1\n", 1).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_labels(p, "3 0.5 0.5 0.1 0.1\n", 2).is_err());
        assert!(parse_labels(p, "", 2).unwrap().is_empty());
    }
}
