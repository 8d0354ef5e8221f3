use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::types::{Document, QaPair};
use crate::error::{Error, Result};

/// Writes one JSON document per line.
pub fn write_corpus(path: &Path, docs: &[Document]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for doc in docs {
        serde_json::to_writer(&mut out, doc)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: &Path) -> Result<Vec<Document>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            docs.push(serde_json::from_str(&line)?);
        }
    }
    Ok(docs)
}

/// Newline-delimited document ids.
pub fn write_manifest<'a>(path: &Path, ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let mut text = String::new();
    for id in ids {
        text.push_str(id);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// Documents whose id is listed, in manifest order. Unknown ids are an error.
pub fn select_split(docs: &[Document], ids: &[String]) -> Result<Vec<Document>> {
    ids.iter()
        .map(|id| {
            docs.iter()
                .find(|d| &d.id == id)
                .cloned()
                .ok_or_else(|| Error::InvalidInput(format!("manifest id `{id}` not in corpus")))
        })
        .collect()
}

/// Questions containing any keyword (case-insensitive substring match).
pub fn filter_qa_by_keywords(qas: &[QaPair], keywords: &[&str]) -> Vec<QaPair> {
    let keys: Vec<String> = keywords.iter().map(|k| k.to_lowercase()).collect();
    qas.iter()
        .filter(|qa| {
            let q = qa.question.to_lowercase();
            keys.iter().any(|k| q.contains(k.as_str()))
        })
        .cloned()
        .collect()
}

/// Keywords that pick out questions about positions on the page.
pub const LAYOUT_KEYWORDS: [&str; 6] = ["top", "bottom", "right", "left", "header", "page number"];

/// True when every id appears exactly once across the splits and the union
/// covers `all`.
pub fn is_partition(all: &[String], splits: &[&[String]]) -> bool {
    let mut seen = HashSet::new();
    for id in splits.iter().flat_map(|s| s.iter()) {
        if !seen.insert(id.as_str()) {
            return false;
        }
    }
    seen.len() == all.len() && all.iter().all(|id| seen.contains(id.as_str()))
}
