//! Entity-level F1, ANLS and calibration (ECE, reliability diagram,
//! confidence histogram).

use serde::{Deserialize, Serialize};

use crate::docdata::LabelScheme;
use crate::error::{Error, Result};
use crate::numerics::{argmax, entropy};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
}

/// A labeled span `[start, end)` of entity type `kind`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub kind: usize,
    pub start: usize,
    pub end: usize,
}

/// Decodes begin/inside labels into spans. An inside label that does not
/// continue a span of its own type opens a new one.
pub fn decode_spans(labels: &[usize], scheme: &LabelScheme) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<Span> = None;
    for (i, &l) in labels.iter().enumerate() {
        let kind = scheme.entity_of(l);
        let continues = matches!((open, kind), (Some(s), Some(k)) if s.kind == k && !scheme.is_begin(l));
        if continues {
            if let Some(s) = open.as_mut() {
                s.end = i + 1;
            }
            continue;
        }
        spans.extend(open.take());
        open = kind.map(|k| Span {
            kind: k,
            start: i,
            end: i + 1,
        });
    }
    spans.extend(open);
    spans
}

/// Micro-averaged span-exact precision, recall and F1. When neither side
/// has any span the score is 1.
pub fn entity_f1(pred: &[Vec<usize>], gold: &[Vec<usize>], scheme: &LabelScheme) -> Result<F1Score> {
    if pred.len() != gold.len() {
        return Err(Error::LengthMismatch {
            what: "sequences",
            left: pred.len(),
            right: gold.len(),
        });
    }
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gold) {
        if p.len() != g.len() {
            return Err(Error::LengthMismatch {
                what: "labels",
                left: p.len(),
                right: g.len(),
            });
        }
        let ps = decode_spans(p, scheme);
        let gs = decode_spans(g, scheme);
        tp += ps.iter().filter(|s| gs.contains(s)).count();
        np += ps.len();
        ng += gs.len();
    }
    Ok(f1_from_counts(tp, np, ng))
}

pub fn f1_from_counts(tp: usize, predicted: usize, gold: usize) -> F1Score {
    if predicted == 0 && gold == 0 {
        return F1Score {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
            true_positives: 0,
            predicted,
            gold,
        };
    }
    let precision = if predicted == 0 {
        0.0
    } else {
        tp as f64 / predicted as f64
    };
    let recall = if gold == 0 { 0.0 } else { tp as f64 / gold as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    F1Score {
        precision,
        recall,
        f1,
        true_positives: tp,
        predicted,
        gold,
    }
}

pub const ANLS_TAU: f64 = 0.5;

fn levenshtein(a: &[char], b: &[char]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Normalized Levenshtein distance after lowercasing and trimming.
pub fn normalized_levenshtein(a: &str, b: &str) -> f64 {
    let a: Vec<char> = a.trim().to_lowercase().chars().collect();
    let b: Vec<char> = b.trim().to_lowercase().chars().collect();
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 0.0;
    }
    levenshtein(&a, &b) as f64 / longest as f64
}

/// Average normalized Levenshtein similarity with rejection threshold `tau`.
pub fn anls(pred: &[String], gold: &[Vec<String>], tau: f64) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::LengthMismatch {
            what: "answers",
            left: pred.len(),
            right: gold.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::NoRecords);
    }
    let mut total = 0.0;
    for (i, (p, golds)) in pred.iter().zip(gold).enumerate() {
        if golds.is_empty() {
            return Err(Error::EmptyGold(i));
        }
        total += golds
            .iter()
            .map(|g| {
                let nl = normalized_levenshtein(p, g);
                if nl < tau {
                    1.0 - nl
                } else {
                    0.0
                }
            })
            .fold(0.0, f64::max);
    }
    Ok(total / pred.len() as f64)
}

/// One prediction with its probability vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub unit_id: String,
    pub probs: Vec<f64>,
    pub predicted: usize,
    pub confidence: f64,
    pub entropy: f64,
    pub truth: Option<usize>,
    pub correct: Option<bool>,
}

impl PredictionRecord {
    pub fn new(unit_id: impl Into<String>, probs: Vec<f64>, truth: Option<usize>) -> Self {
        let predicted = argmax(&probs);
        let confidence = probs.get(predicted).copied().unwrap_or(0.0);
        Self {
            unit_id: unit_id.into(),
            entropy: entropy(&probs),
            predicted,
            confidence,
            truth,
            correct: truth.map(|t| t == predicted),
            probs,
        }
    }

    /// A record without a probability vector, for exports that only need
    /// the confidence and correctness.
    pub fn summary(unit_id: impl Into<String>, confidence: f64, correct: bool) -> Self {
        Self {
            unit_id: unit_id.into(),
            probs: Vec::new(),
            predicted: 0,
            confidence,
            entropy: 0.0,
            truth: None,
            correct: Some(correct),
        }
    }
}

pub const DEFAULT_BINS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean_confidence: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub ece: f64,
    pub overall_accuracy: f64,
    pub overall_confidence: f64,
    pub records: usize,
}

fn edges(bins: usize) -> Vec<f64> {
    (0..=bins).map(|b| b as f64 / bins as f64).collect()
}

/// Bin of `confidence` for right-inclusive edges; the first bin also holds 0.
fn bin_of(confidence: f64, edges: &[f64]) -> usize {
    let bins = edges.len() - 1;
    (0..bins).find(|&b| confidence <= edges[b + 1]).unwrap_or(bins - 1)
}

/// Expected calibration error over equal-width confidence bins.
pub fn ece(records: &[PredictionRecord], bins: usize) -> Result<CalibrationReport> {
    if records.is_empty() {
        return Err(Error::NoRecords);
    }
    if bins == 0 {
        return Err(Error::InvalidInput("zero bins".into()));
    }
    let edges = edges(bins);
    let mut counts = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut hits = vec![0.0; bins];
    for r in records {
        let correct = r
            .correct
            .ok_or_else(|| Error::MissingLabels(format!("record {} has no truth", r.unit_id)))?;
        let b = bin_of(r.confidence, &edges);
        counts[b] += 1;
        conf[b] += r.confidence;
        hits[b] += f64::from(u8::from(correct));
    }
    let n = records.len() as f64;
    let mut ece = 0.0;
    let mut mean_confidence = vec![0.0; bins];
    let mut accuracy = vec![0.0; bins];
    for b in 0..bins {
        if counts[b] > 0 {
            mean_confidence[b] = conf[b] / counts[b] as f64;
            accuracy[b] = hits[b] / counts[b] as f64;
            ece += counts[b] as f64 / n * (accuracy[b] - mean_confidence[b]).abs();
        }
    }
    Ok(CalibrationReport {
        edges,
        counts,
        mean_confidence,
        accuracy,
        ece,
        overall_accuracy: hits.iter().sum::<f64>() / n,
        overall_confidence: conf.iter().sum::<f64>() / n,
        records: records.len(),
    })
}

pub const RELIABILITY_HEADER: &str = "bin_lo,bin_hi,count,mean_confidence,accuracy";
pub const HISTOGRAM_HEADER: &str = "bin_lo,bin_hi,count";

/// One row per bin; empty bins report zeros.
pub fn export_reliability(report: &CalibrationReport) -> String {
    let mut out = String::from(RELIABILITY_HEADER);
    out.push('\n');
    for b in 0..report.counts.len() {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            report.edges[b],
            report.edges[b + 1],
            report.counts[b],
            report.mean_confidence[b],
            report.accuracy[b]
        ));
    }
    out
}

/// Confidence histogram followed by `#overall_accuracy` and
/// `#mean_confidence` footer rows.
pub fn export_conf_hist(records: &[PredictionRecord], bins: usize) -> Result<String> {
    let report = ece(records, bins)?;
    let mut out = String::from(HISTOGRAM_HEADER);
    out.push('\n');
    for b in 0..bins {
        out.push_str(&format!(
            "{},{},{}\n",
            report.edges[b],
            report.edges[b + 1],
            report.counts[b]
        ));
    }
    out.push_str(&format!("#overall_accuracy,{}\n", report.overall_accuracy));
    out.push_str(&format!("#mean_confidence,{}\n", report.overall_confidence));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReliabilityRow {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

fn field<T: std::str::FromStr>(cells: &[&str], i: usize, line: usize) -> Result<T> {
    cells
        .get(i)
        .and_then(|c| c.trim().parse().ok())
        .ok_or_else(|| Error::InvalidInput(format!("bad cell {i} on line {line}")))
}

pub fn parse_reliability(text: &str) -> Result<Vec<ReliabilityRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(RELIABILITY_HEADER) {
        return Err(Error::InvalidInput("missing reliability header".into()));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let c: Vec<&str> = l.split(',').collect();
            Ok(ReliabilityRow {
                bin_lo: field(&c, 0, i + 2)?,
                bin_hi: field(&c, 1, i + 2)?,
                count: field(&c, 2, i + 2)?,
                mean_confidence: field(&c, 3, i + 2)?,
                accuracy: field(&c, 4, i + 2)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub bins: Vec<(f64, f64, usize)>,
    pub overall_accuracy: f64,
    pub mean_confidence: f64,
}

pub fn parse_conf_hist(text: &str) -> Result<Histogram> {
    let mut lines = text.lines();
    if lines.next() != Some(HISTOGRAM_HEADER) {
        return Err(Error::InvalidInput("missing histogram header".into()));
    }
    let mut h = Histogram {
        bins: Vec::new(),
        overall_accuracy: f64::NAN,
        mean_confidence: f64::NAN,
    };
    for (i, l) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let c: Vec<&str> = l.split(',').collect();
        match c[0] {
            "#overall_accuracy" => h.overall_accuracy = field(&c, 1, i + 2)?,
            "#mean_confidence" => h.mean_confidence = field(&c, 1, i + 2)?,
            _ => h
                .bins
                .push((field(&c, 0, i + 2)?, field(&c, 1, i + 2)?, field(&c, 2, i + 2)?)),
        }
    }
    Ok(h)
}
