//! WordPiece-style vocabulary and the document tokenizer.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::labels::{LabelScheme, IGNORE_INDEX};
use super::types::{Document, LayoutBox};
use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const SPECIALS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

/// Ids of the special tokens in a vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub pad: usize,
    pub unk: usize,
    pub cls: usize,
    pub sep: usize,
    pub mask: usize,
}

impl SpecialIds {
    /// `[CLS]`, `[SEP]` and `[PAD]` are structural; everything else is content.
    pub fn is_structural(&self, id: usize) -> bool {
        id == self.cls || id == self.sep || id == self.pad
    }

    pub fn is_special(&self, id: usize) -> bool {
        self.is_structural(id) || id == self.unk || id == self.mask
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    special: SpecialIds,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Vocab("<empty>".into()));
        }
        let index: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let find = |t: &str| index.get(t).copied().ok_or_else(|| Error::Vocab(t.into()));
        let special = SpecialIds {
            pad: find(PAD)?,
            unk: find(UNK)?,
            cls: find(CLS)?,
            sep: find(SEP)?,
            mask: find(MASK)?,
        };
        Ok(Self { tokens, index, special })
    }

    /// Specials, then every character seen (bare and `##`-prefixed), then
    /// whole words by descending frequency until `max_size` entries.
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Self> {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for w in words {
            let w = normalize(w);
            if !w.is_empty() {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut chars: Vec<char> = counts.keys().flat_map(|w| w.chars()).collect();
        chars.sort_unstable();
        chars.dedup();
        for c in &chars {
            tokens.push(c.to_string());
        }
        for c in &chars {
            tokens.push(format!("##{c}"));
        }
        let mut by_freq: Vec<(&String, &usize)> = counts.iter().filter(|(w, _)| w.chars().count() > 1).collect();
        by_freq.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        for (w, _) in by_freq {
            if tokens.len() >= max_size {
                break;
            }
            tokens.push(w.clone());
        }
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn special(&self) -> SpecialIds {
        self.special
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Greedy longest-match-first split of one word; `[UNK]` if any part of
    /// the word cannot be matched.
    pub fn wordpiece(&self, word: &str) -> Vec<usize> {
        let chars: Vec<char> = normalize(word).chars().collect();
        if chars.is_empty() {
            return vec![self.special.unk];
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while end > start {
                let body: String = chars[start..end].iter().collect();
                let cand = if start == 0 { body } else { format!("##{body}") };
                if let Some(&id) = self.index.get(&cand) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => pieces.push(id),
                None => return vec![self.special.unk],
            }
            start = end;
        }
        pieces
    }
}

fn normalize(word: &str) -> String {
    word.trim().to_lowercase()
}

/// Model-facing view of one sequence: everything the encoder consumes and
/// nothing it could be supervised with.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub token_ids: Vec<usize>,
    pub boxes: Vec<LayoutBox>,
    pub segment_ids: Vec<usize>,
    pub attention_mask: Vec<bool>,
    /// Mean ink density per image patch, row-major over the patch grid.
    pub patches: Vec<f32>,
}

impl ModelInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Number of leading positions with attention.
    pub fn content_len(&self) -> usize {
        self.attention_mask.iter().rposition(|&a| a).map_or(0, |p| p + 1)
    }
}

/// A tokenized document with its token-aligned supervision.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedDoc {
    pub doc_id: String,
    pub input: ModelInput,
    /// Class per token; [`IGNORE_INDEX`] on special and padding positions.
    pub label_ids: Vec<i64>,
    /// Source word of each token (`None` for special, question and padding tokens).
    pub word_index: Vec<Option<usize>>,
    /// Answer start/end token positions (inclusive) for question inputs.
    pub answer: Option<(usize, usize)>,
}

impl TokenizedDoc {
    /// Positions of `[CLS]`, `[SEP]` and `[PAD]` tokens.
    pub fn special_positions(&self, special: SpecialIds) -> Vec<usize> {
        self.input
            .token_ids
            .iter()
            .enumerate()
            .filter(|(_, &t)| special.is_structural(t))
            .map(|(i, _)| i)
            .collect()
    }

    /// Word-level labels recovered from the first piece of each word.
    pub fn word_labels(&self, token_classes: &[usize]) -> Vec<usize> {
        let mut out = Vec::new();
        let mut last = None;
        for (pos, w) in self.word_index.iter().enumerate() {
            if let Some(w) = *w {
                if last != Some(w) {
                    out.push(token_classes[pos]);
                    last = Some(w);
                }
            }
        }
        out
    }
}

pub const DEFAULT_MAX_LEN: usize = 512;
pub const DEFAULT_PATCH_GRID: usize = 4;

#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub vocab: Vocab,
    pub max_len: usize,
    pub patch_grid: usize,
}

impl Tokenizer {
    pub fn new(vocab: Vocab, max_len: usize) -> Result<Self> {
        if vocab.is_empty() {
            return Err(Error::Vocab("<empty>".into()));
        }
        if max_len < 3 {
            return Err(Error::InvalidInput(format!(
                "max_len {max_len} leaves no room for content"
            )));
        }
        Ok(Self {
            vocab,
            max_len,
            patch_grid: DEFAULT_PATCH_GRID,
        })
    }

    pub fn with_patch_grid(mut self, grid: usize) -> Self {
        self.patch_grid = grid;
        self
    }

    fn patches(&self, doc: &Document) -> Vec<f32> {
        match &doc.ink_image {
            Some(img) if self.patch_grid > 0 => img.patch_means(self.patch_grid),
            _ => vec![0.0; self.patch_grid * self.patch_grid],
        }
    }

    /// `[CLS] pieces… [SEP] [PAD]…` with labels aligned to pieces: the first
    /// piece keeps the word label, continuation pieces take its intermediate
    /// variant.
    pub fn tokenize(&self, doc: &Document, scheme: &LabelScheme) -> TokenizedDoc {
        let sp = self.vocab.special();
        let budget = self.max_len - 2;
        let mut b = Builder::new(self.max_len);
        b.push(sp.cls, LayoutBox::default(), 0, IGNORE_INDEX, None);
        'words: for (wi, word) in doc.words.iter().enumerate() {
            let label = doc.token_labels.as_ref().map(|l| l[wi]);
            for (pi, piece) in self.vocab.wordpiece(&word.text).into_iter().enumerate() {
                if b.len() > budget {
                    break 'words;
                }
                let lab = match label {
                    Some(l) if pi == 0 => l as i64,
                    Some(l) => scheme.to_inside(l) as i64,
                    None => IGNORE_INDEX,
                };
                b.push(piece, word.bbox, 0, lab, Some(wi));
            }
        }
        b.push(sp.sep, LayoutBox::default(), 0, IGNORE_INDEX, None);
        b.finish(doc.id.clone(), sp.pad, self.patches(doc), None)
    }

    /// `[CLS] question [SEP] document [SEP] [PAD]…` for one question of `doc`.
    /// The answer is `None` when truncation cut it off.
    pub fn tokenize_qa(&self, doc: &Document, qa_index: usize) -> Result<TokenizedDoc> {
        let qa = doc
            .qa_pairs
            .as_ref()
            .and_then(|q| q.get(qa_index))
            .ok_or_else(|| Error::InvalidInput(format!("document {} has no question {qa_index}", doc.id)))?;
        let sp = self.vocab.special();
        let mut b = Builder::new(self.max_len);
        b.push(sp.cls, LayoutBox::default(), 0, IGNORE_INDEX, None);
        for word in qa.question.split_whitespace() {
            for piece in self.vocab.wordpiece(word) {
                if b.len() + 2 >= self.max_len {
                    break;
                }
                b.push(piece, LayoutBox::default(), 0, IGNORE_INDEX, None);
            }
        }
        b.push(sp.sep, LayoutBox::default(), 0, IGNORE_INDEX, None);
        let (ans_s, ans_e) = qa.answer_span;
        let (mut start, mut end) = (None, None);
        let mut cut = None;
        'words: for (wi, word) in doc.words.iter().enumerate() {
            for piece in self.vocab.wordpiece(&word.text) {
                if b.len() + 1 >= self.max_len {
                    cut = Some(wi);
                    break 'words;
                }
                let pos = b.len();
                if wi == ans_s && start.is_none() {
                    start = Some(pos);
                }
                if ans_e > 0 && wi == ans_e - 1 {
                    end = Some(pos);
                }
                b.push(piece, word.bbox, 1, IGNORE_INDEX, Some(wi));
            }
        }
        // an answer whose last word was cut short is not recoverable
        let complete = cut.is_none_or(|w| w >= ans_e);
        b.push(sp.sep, LayoutBox::default(), 1, IGNORE_INDEX, None);
        let answer = match (start, end) {
            (Some(s), Some(e)) if ans_s < ans_e && complete => Some((s, e)),
            _ => None,
        };
        Ok(b.finish(doc.id.clone(), sp.pad, self.patches(doc), answer))
    }

    /// Content pieces of a tokenized sequence, specials and padding removed.
    pub fn detokenize(&self, input: &ModelInput) -> Vec<String> {
        let sp = self.vocab.special();
        input
            .token_ids
            .iter()
            .zip(&input.attention_mask)
            .filter(|(&t, &a)| a && !sp.is_structural(t))
            .map(|(&t, _)| self.vocab.token(t).to_string())
            .collect()
    }
}

struct Builder {
    max_len: usize,
    ids: Vec<usize>,
    boxes: Vec<LayoutBox>,
    segments: Vec<usize>,
    labels: Vec<i64>,
    word_index: Vec<Option<usize>>,
}

impl Builder {
    fn new(max_len: usize) -> Self {
        Self {
            max_len,
            ids: Vec::with_capacity(max_len),
            boxes: Vec::with_capacity(max_len),
            segments: Vec::with_capacity(max_len),
            labels: Vec::with_capacity(max_len),
            word_index: Vec::with_capacity(max_len),
        }
    }

    fn len(&self) -> usize {
        self.ids.len()
    }

    fn push(&mut self, id: usize, bbox: LayoutBox, segment: usize, label: i64, word: Option<usize>) {
        self.ids.push(id);
        self.boxes.push(bbox);
        self.segments.push(segment);
        self.labels.push(label);
        self.word_index.push(word);
    }

    fn finish(mut self, doc_id: String, pad: usize, patches: Vec<f32>, answer: Option<(usize, usize)>) -> TokenizedDoc {
        let content = self.ids.len();
        while self.ids.len() < self.max_len {
            self.push(pad, LayoutBox::default(), 0, IGNORE_INDEX, None);
        }
        let attention_mask = (0..self.max_len).map(|i| i < content).collect();
        TokenizedDoc {
            doc_id,
            input: ModelInput {
                token_ids: self.ids,
                boxes: self.boxes,
                segment_ids: self.segments,
                attention_mask,
                patches,
            },
            label_ids: self.labels,
            word_index: self.word_index,
            answer,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::docdata::types::{QaPair, Word};

    fn vocab(words: &[&str]) -> Vocab {
        let mut t: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        t.extend(words.iter().map(|s| s.to_string()));
        Vocab::from_tokens(t).unwrap()
    }

    fn doc(words: &[&str], labels: Option<Vec<usize>>) -> Document {
        Document {
            id: "d".into(),
            words: words
                .iter()
                .enumerate()
                .map(|(i, w)| Word {
                    text: w.to_string(),
                    bbox: LayoutBox::new(10 * (i % 90) as i32, 10 * (i % 90) as i32 + 5, 0, 5).unwrap(),
                })
                .collect(),
            page_w: 100,
            page_h: 100,
            token_labels: labels,
            qa_pairs: None,
            ink_image: None,
        }
    }

    #[test]
    fn short_doc_is_framed_and_padded() {
        let v = vocab(&["a", "b", "c"]);
        let tok = Tokenizer::new(v.clone(), 8).unwrap();
        let t = tok.tokenize(&doc(&["a", "b", "c"], None), &LabelScheme::funsd());
        let sp = v.special();
        assert_eq!(t.input.token_ids, vec![sp.cls, 5, 6, 7, sp.sep, sp.pad, sp.pad, sp.pad]);
        assert_eq!(
            t.input.attention_mask,
            [true, true, true, true, true, false, false, false]
        );
        assert_eq!(t.special_positions(sp), vec![0, 4, 5, 6, 7]);
        assert_eq!(t.input.content_len(), 5);
    }

    #[test]
    fn long_doc_truncates_to_max_len_minus_two() {
        let v = vocab(&["w"]);
        let words = vec!["w"; 600];
        let tok = Tokenizer::new(v.clone(), 512).unwrap();
        let t = tok.tokenize(&doc(&words, Some(vec![0; 600])), &LabelScheme::funsd());
        assert_eq!(t.input.len(), 512);
        assert_eq!(t.input.token_ids[0], v.special().cls);
        assert_eq!(t.input.token_ids[511], v.special().sep);
        assert_eq!(t.word_index.iter().flatten().count(), 510);
    }

    #[test]
    fn continuation_piece_takes_inside_label() {
        let v = vocab(&["pay", "##ment"]);
        let s = LabelScheme::funsd();
        let ans = s.type_index("ANSWER").unwrap();
        let d = doc(&["payment"], Some(vec![s.begin(ans)]));
        let t = Tokenizer::new(v, 6).unwrap().tokenize(&d, &s);
        assert_eq!(&t.input.token_ids[1..3], &[5, 6]);
        let names: Vec<String> = t.label_ids[1..3].iter().map(|&l| s.name(l as usize)).collect();
        assert_eq!(names, ["B-ANSWER", "I-ANSWER"]);
        assert_eq!(t.input.boxes[1], d.words[0].bbox);
        assert_eq!(t.input.boxes[2], d.words[0].bbox);
        assert_eq!(t.label_ids[0], IGNORE_INDEX);
        assert_eq!(t.word_labels(&[0, 5, 6, 0, 0, 0]), vec![5]);
    }

    #[test]
    fn unmatched_word_becomes_unk() {
        let v = vocab(&["a"]);
        assert_eq!(v.wordpiece("ab"), vec![v.special().unk]);
        assert_eq!(v.wordpiece("A"), vec![5]);
    }

    #[test]
    fn missing_special_or_empty_vocab_is_rejected() {
        assert!(Vocab::from_tokens(vec![]).is_err());
        assert!(Vocab::from_tokens(vec!["[PAD]".into()]).is_err());
    }

    #[test]
    fn built_vocab_covers_every_corpus_word() {
        let words = ["alpha", "beta", "alpha", "gamma12"];
        let v = Vocab::build(words, 30).unwrap();
        for w in words {
            assert!(!v.wordpiece(w).contains(&v.special().unk));
        }
        assert_eq!(v.id("alpha").map(|_| ()), Some(()));
    }

    #[test]
    fn qa_input_marks_answer_tokens() {
        let v = vocab(&["what", "is", "x", "pay", "##ment", "due"]);
        let mut d = doc(&["x", "payment", "due"], None);
        d.qa_pairs = Some(vec![QaPair {
            question: "what is x".into(),
            answer_text: "payment due".into(),
            answer_span: (1, 3),
        }]);
        let t = Tokenizer::new(v, 16).unwrap().tokenize_qa(&d, 0).unwrap();
        // [CLS] what is x [SEP] x pay ##ment due [SEP]
        assert_eq!(t.answer, Some((6, 8)));
        assert_eq!(t.input.segment_ids[5], 1);
        assert_eq!(t.input.boxes[1], LayoutBox::default());
        // truncated answer is dropped
        let short = Tokenizer::new(t_vocab(), 8).unwrap().tokenize_qa(&d, 0).unwrap();
        assert_eq!(short.answer, None);
    }

    fn t_vocab() -> Vocab {
        vocab(&["what", "is", "x", "pay", "##ment", "due"])
    }
}
