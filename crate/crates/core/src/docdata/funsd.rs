//! Reader for FUNSD-style form annotations.
//!
//! Each annotation file holds `{"form": [entity, ...]}` where an entity has a
//! `label` (`question`, `answer`, `header`, `other`) and a list of `words`,
//! each with `text` and a pixel `box` `[x0, y0, x1, y1]`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::labels::LabelScheme;
use super::types::{normalize_box, Document, NormalizeStats, Word};
use crate::error::{Error, Result};

#[derive(Deserialize)]
struct FormFile {
    #[serde(default)]
    form: Vec<Entity>,
    /// Optional page size; FUNSD itself stores it only in the image.
    #[serde(default)]
    page: Option<PageSize>,
}

#[derive(Deserialize)]
struct PageSize {
    width: f64,
    height: f64,
}

#[derive(Deserialize)]
struct Entity {
    #[serde(default)]
    id: Option<serde_json::Value>,
    label: String,
    #[serde(default)]
    words: Vec<RawWord>,
}

#[derive(Deserialize)]
struct RawWord {
    text: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

/// Result of ingesting a directory.
#[derive(Debug)]
pub struct Ingested {
    pub documents: Vec<Document>,
    /// Number of boxes that had to be clamped onto their page.
    pub clamped_boxes: usize,
}

/// Reads every `*.json` annotation file in `dir`, sorted by file name.
pub fn ingest_funsd(dir: &Path) -> Result<Ingested> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
        .collect();
    files.sort();
    let scheme = LabelScheme::funsd();
    let mut stats = NormalizeStats::default();
    let mut documents = Vec::with_capacity(files.len());
    for file in &files {
        documents.push(ingest_file(file, &scheme, &mut stats)?);
    }
    Ok(Ingested {
        documents,
        clamped_boxes: stats.clamped,
    })
}

pub(crate) fn ingest_file(path: &Path, scheme: &LabelScheme, stats: &mut NormalizeStats) -> Result<Document> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let form: FormFile = if text.trim().is_empty() {
        FormFile {
            form: Vec::new(),
            page: None,
        }
    } else {
        serde_json::from_str(&text)?
    };

    for (idx, entity) in form.form.iter().enumerate() {
        for w in &entity.words {
            let [x0, y0, x1, y1] = w.bbox;
            if x1 < x0 || y1 < y0 {
                return Err(Error::MalformedBox {
                    file: name.clone(),
                    record: record_id(entity, idx),
                    bbox: w.bbox.to_vec(),
                });
            }
        }
    }

    let (page_w, page_h) = match form.page {
        Some(p) => (p.width, p.height),
        None => image_size(path).unwrap_or_else(|| extent(&form.form)),
    };

    let mut words = Vec::new();
    let mut labels = Vec::new();
    for entity in &form.form {
        let entity_type = match entity.label.to_ascii_lowercase().as_str() {
            "other" => None,
            other => Some(scheme.type_index(other).ok_or_else(|| Error::UnknownLabel {
                file: name.clone(),
                label: entity.label.clone(),
                valid: "question, answer, header, other".into(),
            })?),
        };
        let mut first = true;
        for w in entity.words.iter().filter(|w| !w.text.trim().is_empty()) {
            let [x0, y0, x1, y1] = w.bbox;
            let bbox = normalize_box([x0, x1, y0, y1], page_w, page_h, stats)?;
            words.push(Word {
                text: w.text.trim().to_string(),
                bbox,
            });
            labels.push(match entity_type {
                None => 0,
                Some(t) if first => scheme.begin(t),
                Some(t) => scheme.inside(t),
            });
            first = false;
        }
    }

    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Document {
        id,
        words,
        page_w: page_w.round() as u32,
        page_h: page_h.round() as u32,
        token_labels: Some(labels),
        qa_pairs: None,
        ink_image: None,
    })
}

fn record_id(entity: &Entity, idx: usize) -> String {
    match &entity.id {
        Some(v) => v.to_string(),
        None => format!("#{idx}"),
    }
}

fn extent(entities: &[Entity]) -> (f64, f64) {
    let (mut w, mut h) = (1.0f64, 1.0f64);
    for word in entities.iter().flat_map(|e| &e.words) {
        w = w.max(word.bbox[2]);
        h = h.max(word.bbox[3]);
    }
    (w, h)
}

/// Page size from a sibling PNG (`../images/<stem>.png` or `<stem>.png`).
fn image_size(annotation: &Path) -> Option<(f64, f64)> {
    let stem = annotation.file_stem()?;
    let dir = annotation.parent()?;
    let mut candidates = vec![dir.join(stem).with_extension("png")];
    if let Some(parent) = dir.parent() {
        candidates.push(parent.join("images").join(stem).with_extension("png"));
    }
    candidates.iter().find_map(|p| png_dimensions(p))
}

fn png_dimensions(path: &Path) -> Option<(f64, f64)> {
    use std::io::Read;
    let mut header = [0u8; 24];
    fs::File::open(path).ok()?.read_exact(&mut header).ok()?;
    if &header[..8] != b"\x89PNG\r\n\x1a\n" || &header[12..16] != b"IHDR" {
        return None;
    }
    let w = u32::from_be_bytes(header[16..20].try_into().ok()?);
    let h = u32::from_be_bytes(header[20..24].try_into().ok()?);
    (w > 0 && h > 0).then_some((f64::from(w), f64::from(h)))
}
