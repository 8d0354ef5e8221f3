use super::{AdaptConfig, Selection};
use crate::numerics::{argmax, entropy};
use crate::objectives::AcceptanceMask;

fn gate(config: &AdaptConfig, entropy: f64, confidence: f64) -> bool {
    let by_entropy = entropy <= config.gamma;
    let by_confidence = confidence >= config.confidence;
    match config.selection {
        Selection::Entropy => by_entropy,
        Selection::Confidence => by_confidence,
        Selection::Both => by_entropy && by_confidence,
        Selection::None => true,
    }
}

fn scaled(config: &AdaptConfig, h: f64, support: usize) -> f64 {
    if config.normalize_entropy {
        let max = (support.max(1) as f64).ln();
        if max > 0.0 {
            h / max
        } else {
            0.0
        }
    } else {
        h
    }
}

/// Hard pseudo-labels (argmax) with a per-row accept flag.
///
/// The stored entropy is always in nats; normalization only changes the
/// quantity compared against γ.
pub fn select_pseudo_labels(probs: &[Vec<f64>], config: &AdaptConfig) -> AcceptanceMask {
    let mut m = AcceptanceMask::default();
    for row in probs {
        let h = entropy(row);
        let label = argmax(row);
        let conf = row.get(label).copied().unwrap_or(0.0);
        m.accept.push(gate(config, scaled(config, h, row.len()), conf));
        m.labels.push(label);
        m.entropy.push(h);
        m.confidence.push(conf);
    }
    m
}

/// Span pseudo-labels: a question is accepted iff the mean of its start and
/// end entropies passes the gate (and, in confidence modes, both maxima do).
/// `support[i]` is the number of positions the answer may occupy.
pub fn select_span_pseudo_labels(
    start: &[Vec<f64>],
    end: &[Vec<f64>],
    support: &[usize],
    config: &AdaptConfig,
) -> (AcceptanceMask, AcceptanceMask) {
    let mut s = select_pseudo_labels(start, config);
    let mut e = select_pseudo_labels(end, config);
    for (i, &n) in support.iter().enumerate().take(s.len()) {
        let h = (scaled(config, s.entropy[i], n) + scaled(config, e.entropy[i], n)) / 2.0;
        let conf = s.confidence[i].min(e.confidence[i]);
        let ok = gate(config, h, conf);
        s.accept[i] = ok;
        e.accept[i] = ok;
    }
    (s, e)
}
