//! Adaptation and training losses, built on a [`Graph`] so they can be
//! differentiated through the encoder.
//!
//! Every loss takes logits rather than probabilities and normalizes them
//! itself. Per-unit losses are means over the participating units and are
//! exactly zero when no unit participates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::docdata::{ModelInput, SpecialIds, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

pub const MASK_RATE: f64 = 0.15;
pub const MASK_TOKEN_FRAC: f64 = 0.80;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Replacement {
    MaskToken,
    RandomToken,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskedToken {
    pub sequence: usize,
    pub position: usize,
    pub original: usize,
    pub kind: Replacement,
}

/// Masked positions of a batch, in (sequence, position) order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskPlan {
    pub tokens: Vec<MaskedToken>,
}

impl MaskPlan {
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// Flat row indices for a batch packed with `seq` positions per sequence.
    pub fn rows(&self, seq: usize) -> Vec<usize> {
        self.tokens.iter().map(|t| t.sequence * seq + t.position).collect()
    }

    pub fn originals(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.original).collect()
    }
}

/// Masks text tokens for MVLM. Each attended, non-structural position is
/// selected with probability `mask_rate`; a selected token becomes `[MASK]`
/// with probability `mask_token_frac`, otherwise a random non-special
/// vocabulary id. Boxes, segments and attention are left untouched.
pub fn apply_mvlm_mask(
    inputs: &[ModelInput],
    special: SpecialIds,
    vocab_size: usize,
    mask_rate: f64,
    mask_token_frac: f64,
    seed: u64,
) -> Result<(Vec<ModelInput>, MaskPlan)> {
    if !(0.0..=1.0).contains(&mask_rate) || !(0.0..=1.0).contains(&mask_token_frac) {
        return Err(Error::InvalidInput(format!(
            "mask rates {mask_rate}, {mask_token_frac} outside [0, 1]"
        )));
    }
    if vocab_size <= 5 {
        return Err(Error::InvalidInput(format!(
            "vocabulary of {vocab_size} has no ordinary words"
        )));
    }
    let mut out = inputs.to_vec();
    let plan = mask_sequences(
        out.iter_mut().map(|x| (&mut x.token_ids[..], &x.attention_mask[..])),
        special,
        vocab_size,
        mask_rate,
        mask_token_frac,
        seed,
    );
    Ok((out, plan))
}

/// Masks a packed `[size * seq]` id array in place; same draws as
/// [`apply_mvlm_mask`] on the unpacked sequences.
#[allow(clippy::too_many_arguments)]
pub fn mask_packed(
    token_ids: &mut [usize],
    attention: &[bool],
    seq: usize,
    special: SpecialIds,
    vocab_size: usize,
    mask_rate: f64,
    mask_token_frac: f64,
    seed: u64,
) -> MaskPlan {
    mask_sequences(
        token_ids.chunks_mut(seq).zip(attention.chunks(seq)),
        special,
        vocab_size,
        mask_rate,
        mask_token_frac,
        seed,
    )
}

fn mask_sequences<'a>(
    seqs: impl Iterator<Item = (&'a mut [usize], &'a [bool])>,
    special: SpecialIds,
    vocab_size: usize,
    mask_rate: f64,
    mask_token_frac: f64,
    seed: u64,
) -> MaskPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plan = MaskPlan::default();
    for (s, (ids, attention)) in seqs.enumerate() {
        for i in 0..ids.len() {
            let id = ids[i];
            if !attention[i] || special.is_structural(id) || !rng.gen_bool(mask_rate) {
                continue;
            }
            let kind = if rng.gen_bool(mask_token_frac) {
                Replacement::MaskToken
            } else {
                Replacement::RandomToken
            };
            ids[i] = match kind {
                Replacement::MaskToken => special.mask,
                Replacement::RandomToken => random_word(&mut rng, special, vocab_size),
            };
            plan.tokens.push(MaskedToken {
                sequence: s,
                position: i,
                original: id,
                kind,
            });
        }
    }
    plan
}

fn random_word(rng: &mut ChaCha8Rng, special: SpecialIds, vocab_size: usize) -> usize {
    loop {
        let id = rng.gen_range(0..vocab_size);
        if !special.is_special(id) {
            return id;
        }
    }
}

/// Per-unit pseudo-label acceptance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AcceptanceMask {
    pub accept: Vec<bool>,
    pub labels: Vec<usize>,
    pub entropy: Vec<f64>,
    pub confidence: Vec<f64>,
}

impl AcceptanceMask {
    pub fn len(&self) -> usize {
        self.accept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accept.is_empty()
    }

    pub fn accepted(&self) -> usize {
        self.accept.iter().filter(|&&a| a).count()
    }

    pub fn rate(&self) -> f64 {
        if self.accept.is_empty() {
            0.0
        } else {
            self.accepted() as f64 / self.accept.len() as f64
        }
    }
}

fn mean_nll<T: Scalar>(g: &mut Graph<T>, logits: Var, rows: &[usize], targets: &[usize]) -> Result<Var> {
    if rows.is_empty() {
        return Ok(g.scalar(T::zero()));
    }
    let sel = g.gather_rows(logits, rows)?;
    let logp = g.log_softmax(sel);
    let picked = g.pick(logp, targets)?;
    let total = g.sum(picked);
    Ok(g.scale(total, T::of(-1.0 / rows.len() as f64)))
}

/// MVLM: mean negative log-likelihood of the original ids, given logits
/// `[plan.len(), V]` in plan order.
pub fn mvlm_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, plan: &MaskPlan) -> Result<Var> {
    if plan.is_empty() {
        return Ok(g.scalar(T::zero()));
    }
    check_rows("mvlm logits", g, logits, plan.len())?;
    let rows: Vec<usize> = (0..plan.len()).collect();
    mean_nll(g, logits, &rows, &plan.originals())
}

/// Pseudo-label CE: mean `−log p(pseudo-label)` over accepted units.
pub fn pseudo_ce_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, acceptance: &AcceptanceMask) -> Result<Var> {
    check_rows("class logits", g, logits, acceptance.len())?;
    let (rows, targets): (Vec<usize>, Vec<usize>) = (0..acceptance.len())
        .filter(|&i| acceptance.accept[i])
        .map(|i| (i, acceptance.labels[i]))
        .unzip();
    mean_nll(g, logits, &rows, &targets)
}

/// Diversity: `Σ_c p̄_c ln p̄_c` with `p̄` the mean softmax over the rows.
pub fn diversity_loss<T: Scalar>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    let rows = g.shape(logits).first().copied().unwrap_or(0);
    if rows == 0 {
        return Ok(g.scalar(T::zero()));
    }
    let probs = g.softmax(logits);
    let weights = g.leaf(Tensor::full(&[1, rows], T::of(1.0 / rows as f64)));
    let mean = g.matmul(weights, probs)?;
    Ok(g.xlogx_sum(mean))
}

/// Source CE: mean `−log p(label)` over rows whose label is not ignored.
pub fn source_ce_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[i64]) -> Result<Var> {
    check_rows("class logits", g, logits, labels.len())?;
    let (rows, targets): (Vec<usize>, Vec<usize>) = labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l != IGNORE_INDEX)
        .map(|(i, &l)| {
            usize::try_from(l)
                .map(|l| (i, l))
                .map_err(|_| Error::InvalidInput(format!("label {l}")))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    mean_nll(g, logits, &rows, &targets)
}

/// TENT objective: mean Shannon entropy of the row softmaxes.
pub fn tent_entropy_loss<T: Scalar>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    let rows = g.shape(logits).first().copied().unwrap_or(0);
    if rows == 0 {
        return Ok(g.scalar(T::zero()));
    }
    let ent = g.softmax_entropy(logits);
    let total = g.sum(ent);
    Ok(g.scale(total, T::of(1.0 / rows as f64)))
}

/// DocTTA objective: MVLM + pseudo-label CE + diversity.
pub fn doctta_total<T: Scalar>(g: &mut Graph<T>, mvlm: Var, ce: Var, div: Var) -> Result<Var> {
    g.add_all(&[mvlm, ce, div])
}

/// DocUDA objective: the DocTTA terms plus source CE.
pub fn docuda_total<T: Scalar>(g: &mut Graph<T>, mvlm: Var, ce: Var, div: Var, src_ce: Var) -> Result<Var> {
    g.add_all(&[mvlm, ce, div, src_ce])
}

/// Start and end logits of a QA batch, each `[questions, seq]`.
#[derive(Clone, Copy, Debug)]
pub struct SpanLogits {
    pub start: Var,
    pub end: Var,
}

fn average<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let s = g.add(a, b)?;
    Ok(g.scale(s, T::of(0.5)))
}

/// Supervised span loss: mean of the start and end cross-entropies.
pub fn qa_source_ce_loss<T: Scalar>(g: &mut Graph<T>, span: SpanLogits, answers: &[(usize, usize)]) -> Result<Var> {
    check_rows("start logits", g, span.start, answers.len())?;
    let rows: Vec<usize> = (0..answers.len()).collect();
    let (starts, ends): (Vec<usize>, Vec<usize>) = answers.iter().copied().unzip();
    let a = mean_nll(g, span.start, &rows, &starts)?;
    let b = mean_nll(g, span.end, &rows, &ends)?;
    average(g, a, b)
}

/// Pseudo-label CE for spans: start and end pseudo-labels each contribute a CE term.
pub fn qa_pseudo_ce_loss<T: Scalar>(
    g: &mut Graph<T>,
    span: SpanLogits,
    start: &AcceptanceMask,
    end: &AcceptanceMask,
) -> Result<Var> {
    let a = pseudo_ce_loss(g, span.start, start)?;
    let b = pseudo_ce_loss(g, span.end, end)?;
    average(g, a, b)
}

pub fn qa_diversity_loss<T: Scalar>(g: &mut Graph<T>, span: SpanLogits) -> Result<Var> {
    let a = diversity_loss(g, span.start)?;
    let b = diversity_loss(g, span.end)?;
    average(g, a, b)
}

pub fn qa_tent_entropy_loss<T: Scalar>(g: &mut Graph<T>, span: SpanLogits) -> Result<Var> {
    let a = tent_entropy_loss(g, span.start)?;
    let b = tent_entropy_loss(g, span.end)?;
    average(g, a, b)
}

fn check_rows<T: Scalar>(what: &'static str, g: &Graph<T>, logits: Var, expected: usize) -> Result<()> {
    let shape = g.shape(logits);
    if shape.len() != 2 || shape[0] != expected {
        return Err(Error::LengthMismatch {
            what,
            left: shape.first().copied().unwrap_or(0),
            right: expected,
        });
    }
    Ok(())
}
