//! Binary PGM images plus one JSON annotation file per dataset.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Annotation, DatasetRecord, GrayImage, Sample, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::eval::Detection;

pub const ANNOTATION_FILE: &str = "annotations.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: usize,
    pub file: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationEntry {
    pub image_id: usize,
    pub category_id: usize,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub images: Vec<ImageEntry>,
    pub annotations: Vec<AnnotationEntry>,
    pub categories: Vec<Category>,
}

fn parse_err(what: &str, location: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::Parse {
        what: what.into(),
        location: location.into(),
        msg: msg.into(),
    }
}

fn json_err(what: &str, e: serde_json::Error) -> Error {
    parse_err(what, format!("line {}, column {}", e.line(), e.column()), e.to_string())
}

/// 8-bit binary PGM bytes.
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Parses binary PGM (`P5`, maxval ≤ 255) with `#` comments in the header.
pub fn decode_pgm(bytes: &[u8], what: &str) -> Result<GrayImage> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(what, format!("offset {pos}"), "truncated header"));
        }
        fields.push((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()));
    }
    if fields[0].1 != "P5" {
        return Err(parse_err(
            what,
            "offset 0",
            format!("expected magic P5, found {:?}", fields[0].1),
        ));
    }
    let mut nums = [0usize; 3];
    for (i, (off, f)) in fields[1..].iter().enumerate() {
        nums[i] = f
            .parse()
            .map_err(|_| parse_err(what, format!("offset {off}"), format!("bad header number {f:?}")))?;
    }
    let [w, h, maxval] = nums;
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(parse_err(
            what,
            format!("offset {}", fields[1].0),
            "unsupported extent or maxval",
        ));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let end = pos + w * h;
    if end > bytes.len() {
        return Err(parse_err(
            what,
            format!("offset {}", bytes.len()),
            format!(
                "raster needs {} bytes, found {}",
                w * h,
                bytes.len().saturating_sub(pos)
            ),
        ));
    }
    let pixels = bytes[pos..end].iter().map(|&b| b as f32 / maxval as f32).collect();
    GrayImage::new(w, h, pixels)
}

fn category_list() -> Vec<Category> {
    CLASS_NAMES
        .iter()
        .enumerate()
        .map(|(id, n)| Category {
            id,
            name: n.to_string(),
        })
        .collect()
}

pub fn to_annotation_file(records: &[DatasetRecord]) -> AnnotationFile {
    AnnotationFile {
        images: records
            .iter()
            .map(|r| ImageEntry {
                id: r.id,
                file: r.file.clone(),
                width: r.width,
                height: r.height,
            })
            .collect(),
        annotations: records
            .iter()
            .flat_map(|r| {
                r.annotations.iter().map(|a| AnnotationEntry {
                    image_id: r.id,
                    category_id: a.class_id,
                    bbox: [a.bbox[0], a.bbox[1], a.bbox[2] - a.bbox[0], a.bbox[3] - a.bbox[1]],
                })
            })
            .collect(),
        categories: category_list(),
    }
}

/// Validates and converts an annotation file to records.
pub fn from_annotation_file(file: &AnnotationFile) -> Result<Vec<DatasetRecord>> {
    let mut records: Vec<DatasetRecord> = file
        .images
        .iter()
        .map(|e| DatasetRecord {
            id: e.id,
            file: e.file.clone(),
            width: e.width,
            height: e.height,
            annotations: Vec::new(),
        })
        .collect();
    for (i, a) in file.annotations.iter().enumerate() {
        let loc = format!("annotations[{i}]");
        let [x, y, w, h] = a.bbox;
        if !(w > 0.0 && h > 0.0) || a.bbox.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(
                ANNOTATION_FILE,
                loc,
                "bbox width and height must be positive",
            ));
        }
        if a.category_id >= CLASS_NAMES.len() {
            return Err(parse_err(
                ANNOTATION_FILE,
                loc,
                format!("unknown category {}", a.category_id),
            ));
        }
        let r = records
            .iter_mut()
            .find(|r| r.id == a.image_id)
            .ok_or_else(|| parse_err(ANNOTATION_FILE, loc.clone(), format!("unknown image id {}", a.image_id)))?;
        if x < 0.0 || y < 0.0 || x + w > r.width as f64 || y + h > r.height as f64 {
            return Err(parse_err(ANNOTATION_FILE, loc, "bbox outside the image"));
        }
        r.annotations.push(Annotation {
            class_id: a.category_id,
            bbox: [x, y, x + w, y + h],
        });
    }
    Ok(records)
}

pub fn parse_annotations(text: &str) -> Result<Vec<DatasetRecord>> {
    let file: AnnotationFile = serde_json::from_str(text).map_err(|e| json_err(ANNOTATION_FILE, e))?;
    from_annotation_file(&file)
}

/// Writes images and `annotations.json` under `dir`.
pub fn save_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for s in samples {
        let p = dir.join(&s.record.file);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(p, encode_pgm(&s.image))?;
    }
    let records: Vec<DatasetRecord> = samples.iter().map(|s| s.record.clone()).collect();
    let json = serde_json::to_string_pretty(&to_annotation_file(&records)).map_err(|e| json_err(ANNOTATION_FILE, e))?;
    fs::write(dir.join(ANNOTATION_FILE), json + "\n")?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(dir.join(ANNOTATION_FILE))?;
    let records = parse_annotations(&text)?;
    records
        .into_iter()
        .map(|record| {
            let bytes = fs::read(dir.join(&record.file))?;
            let image = decode_pgm(&bytes, &record.file)?;
            if image.width != record.width || image.height != record.height {
                return Err(parse_err(
                    &record.file,
                    "header",
                    "extent differs from the annotation file",
                ));
            }
            Ok(Sample { image, record })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEntry {
    pub image_id: usize,
    pub category_id: usize,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    pub score: f64,
}

pub fn detections_to_json(dets: &[Detection]) -> String {
    let entries: Vec<DetectionEntry> = dets
        .iter()
        .map(|d| DetectionEntry {
            image_id: d.image_id,
            category_id: d.class_id,
            bbox: [d.bbox[0], d.bbox[1], d.bbox[2] - d.bbox[0], d.bbox[3] - d.bbox[1]],
            score: d.confidence,
        })
        .collect();
    serde_json::to_string_pretty(&entries).expect("plain data serialises") + "\n"
}

pub fn parse_detections(text: &str) -> Result<Vec<Detection>> {
    let entries: Vec<DetectionEntry> = serde_json::from_str(text).map_err(|e| json_err("detections", e))?;
    Ok(entries
        .into_iter()
        .map(|e| Detection {
            image_id: e.image_id,
            class_id: e.category_id,
            bbox: [e.bbox[0], e.bbox[1], e.bbox[0] + e.bbox[2], e.bbox[1] + e.bbox[3]],
            confidence: e.score,
        })
        .collect())
}
