//! Corpus construction, tokenization per task and evaluation.

use serde::{Deserialize, Serialize};

use super::config::{QaCalibration, RunConfig, TaskKind};
use crate::adapt::stream_seed;
use crate::docdata::{
    generate_synthetic, ingest_funsd, read_manifest, select_split, Document, LabelScheme, ModelInput, SpecialIds,
    TokenizedDoc, Tokenizer, Vocab,
};
use crate::docmodel::{predict_classes, predict_spans, ModelConfig};
use crate::error::{Error, Result};
use crate::evalmetrics::{anls, ece, entity_f1, CalibrationReport, PredictionRecord, ANLS_TAU, DEFAULT_BINS};
use crate::numerics::ParamSet;

/// Longest answer, in tokens, considered when decoding a span.
pub const MAX_ANSWER_TOKENS: usize = 24;
const EVAL_BATCH: usize = 32;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpora {
    pub source_train: Vec<Document>,
    pub source_val: Vec<Document>,
    pub target: Vec<Document>,
    /// Unlabeled documents for MVLM pretraining.
    pub pretrain: Vec<Document>,
}

impl Corpora {
    pub fn build(config: &RunConfig) -> Result<Self> {
        let data = &config.data;
        if let Some(s) = &data.synthetic {
            let source = generate_synthetic(&s.source, s.source_count, stream_seed(data.seed, 1, 0))?;
            let target = generate_synthetic(&s.target, s.target_count, stream_seed(data.seed, 2, 0))?;
            let n_val = ((source.len() as f64 * data.val_fraction).round() as usize).min(source.len() - 1);
            let (val, train) = source.split_at(n_val);
            let mut pretrain = Vec::new();
            for (i, spec) in s.pretrain.iter().enumerate() {
                let docs = generate_synthetic(spec, s.pretrain_count, stream_seed(data.seed, 3, i as u64))?;
                pretrain.extend(docs.iter().map(Document::unlabeled));
            }
            return Ok(Self {
                source_train: train.to_vec(),
                source_val: val.to_vec(),
                target,
                pretrain,
            });
        }
        let ingest = data
            .ingest
            .as_ref()
            .ok_or_else(|| Error::Config("no data source configured".into()))?;
        let all = ingest_funsd(&ingest.dir)?.documents;
        let split =
            |name: &str| -> Result<Vec<Document>> { select_split(&all, &read_manifest(&ingest.manifests.join(name))?) };
        let source_train = split("source_train.txt")?;
        let source_val = split("source_val.txt")?;
        let pretrain = source_train
            .iter()
            .chain(&source_val)
            .map(Document::unlabeled)
            .collect();
        Ok(Self {
            source_train,
            source_val,
            target: split("target.txt")?,
            pretrain,
        })
    }

    pub fn all(&self) -> impl Iterator<Item = &Document> {
        self.source_train
            .iter()
            .chain(&self.source_val)
            .chain(&self.target)
            .chain(&self.pretrain)
    }

    /// Vocabulary over the words of every corpus.
    pub fn vocab(&self, max_size: usize) -> Result<Vocab> {
        Vocab::build(
            self.all().flat_map(|d| d.words.iter().map(|w| w.text.as_str())),
            max_size,
        )
    }
}

/// Everything needed to turn documents into model inputs and score predictions.
#[derive(Clone, Debug)]
pub struct Setup {
    pub task: TaskKind,
    pub qa_calibration: QaCalibration,
    pub scheme: LabelScheme,
    pub tokenizer: Tokenizer,
    pub model: ModelConfig,
}

impl Setup {
    pub fn new(config: &RunConfig, vocab: Vocab) -> Result<Self> {
        let scheme = config.scheme();
        let model = config.model.build(vocab.len(), scheme.num_classes());
        model.validate()?;
        let tokenizer = Tokenizer::new(vocab, config.model.max_len)?.with_patch_grid(config.model.patch_grid()?);
        Ok(Self {
            task: config.task,
            qa_calibration: config.qa_calibration,
            scheme,
            tokenizer,
            model,
        })
    }

    pub fn special(&self) -> SpecialIds {
        self.tokenizer.vocab.special()
    }

    /// One sequence per document, or one per question for QA.
    pub fn tokenize(&self, docs: &[Document]) -> Result<Vec<TokenizedDoc>> {
        let mut out = Vec::new();
        for doc in docs {
            match self.task {
                TaskKind::Entity | TaskKind::Kv => out.push(self.tokenizer.tokenize(doc, &self.scheme)),
                TaskKind::Qa => {
                    for q in 0..doc.qa_pairs.as_ref().map_or(0, Vec::len) {
                        out.push(self.tokenizer.tokenize_qa(doc, q)?);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Labeled training sequences; questions whose answer was truncated away
    /// are dropped.
    pub fn training_set(&self, docs: &[Document]) -> Result<Vec<TokenizedDoc>> {
        let mut seqs = self.tokenize(docs)?;
        if self.task == TaskKind::Qa {
            seqs.retain(|t| t.answer.is_some());
        }
        Ok(seqs)
    }

    /// Label-free inputs: supervision is stripped before tokenization.
    pub fn unlabeled_inputs(&self, docs: &[Document]) -> Result<Vec<ModelInput>> {
        let stripped: Vec<Document> = docs.iter().map(Document::unlabeled).collect();
        Ok(self.tokenize(&stripped)?.into_iter().map(|t| t.input).collect())
    }

    /// Inputs for MVLM pretraining: always one sequence per document.
    pub fn pretrain_inputs(&self, docs: &[Document]) -> Vec<ModelInput> {
        docs.iter()
            .map(|d| self.tokenizer.tokenize(&d.unlabeled(), &self.scheme).input)
            .collect()
    }

    pub fn evaluate(&self, params: &ParamSet<f32>, docs: &[Document]) -> Result<Evaluation> {
        match self.task {
            TaskKind::Entity | TaskKind::Kv => self.evaluate_entities(params, docs),
            TaskKind::Qa => self.evaluate_qa(params, docs),
        }
    }

    fn evaluate_entities(&self, params: &ParamSet<f32>, docs: &[Document]) -> Result<Evaluation> {
        let seqs = self.tokenize(docs)?;
        let (mut pred, mut gold, mut records) = (Vec::new(), Vec::new(), Vec::new());
        for chunk in seqs.chunks(EVAL_BATCH) {
            let inputs: Vec<&ModelInput> = chunk.iter().map(|t| &t.input).collect();
            let probs = predict_classes(params, &self.model, &inputs)?;
            for (seq, probs) in chunk.iter().zip(probs) {
                let (mut p, mut g) = (Vec::new(), Vec::new());
                let mut last = None;
                for (pos, w) in seq.word_index.iter().enumerate() {
                    let Some(w) = *w else { continue };
                    if last == Some(w) {
                        continue;
                    }
                    last = Some(w);
                    let truth = usize::try_from(seq.label_ids[pos])
                        .map_err(|_| Error::MissingLabels(format!("document {} word {w}", seq.doc_id)))?;
                    let rec = PredictionRecord::new(format!("{}#{w}", seq.doc_id), probs[pos].clone(), Some(truth));
                    p.push(rec.predicted);
                    g.push(truth);
                    records.push(rec);
                }
                pred.push(p);
                gold.push(g);
            }
        }
        let f1 = entity_f1(&pred, &gold, &self.scheme)?;
        Evaluation::new("f1", f1.f1, records)
    }

    fn evaluate_qa(&self, params: &ParamSet<f32>, docs: &[Document]) -> Result<Evaluation> {
        let special = self.special();
        let mut owners = Vec::new();
        for doc in docs {
            for q in 0..doc.qa_pairs.as_ref().map_or(0, Vec::len) {
                owners.push((doc, q));
            }
        }
        let seqs = self.tokenize(docs)?;
        let (mut answers, mut golds, mut records) = (Vec::new(), Vec::new(), Vec::new());
        for (chunk, own) in seqs.chunks(EVAL_BATCH).zip(owners.chunks(EVAL_BATCH)) {
            let inputs: Vec<&ModelInput> = chunk.iter().map(|t| &t.input).collect();
            let spans = predict_spans(params, &self.model, &special, &inputs)?;
            for ((seq, (start, end)), &(doc, q)) in chunk.iter().zip(spans).zip(own) {
                let text = decode_span(&seq.word_index, &start, &end).map_or(String::new(), |(s, e, _)| {
                    let (ws, we) = (seq.word_index[s].unwrap_or(0), seq.word_index[e].unwrap_or(0));
                    doc.span_text(ws, we + 1)
                });
                let gold = doc
                    .qa_pairs
                    .as_ref()
                    .map(|qa| qa[q].answer_text.clone())
                    .unwrap_or_default();
                let id = format!("{}#q{q}", doc.id);
                records.push(position_record(format!("{id}/start"), start, seq.answer.map(|a| a.0)));
                if self.qa_calibration == QaCalibration::Both {
                    records.push(position_record(format!("{id}/end"), end, seq.answer.map(|a| a.1)));
                }
                answers.push(text);
                golds.push(vec![gold]);
            }
        }
        let score = anls(&answers, &golds, ANLS_TAU)?;
        Evaluation::new("anls", score, records)
    }
}

/// Calibration unit for one start or end distribution. A question whose
/// answer is not among the input tokens counts as wrong.
fn position_record(id: String, probs: Vec<f64>, gold: Option<usize>) -> PredictionRecord {
    let mut rec = PredictionRecord::new(id, probs, gold);
    rec.correct.get_or_insert(false);
    rec
}

/// Highest-probability span `(start, end, p_start · p_end)` over document
/// tokens with `start ≤ end < start + MAX_ANSWER_TOKENS`.
pub fn decode_span(word_index: &[Option<usize>], start: &[f64], end: &[f64]) -> Option<(usize, usize, f64)> {
    let n = start.len().min(end.len()).min(word_index.len());
    let mut best: Option<(usize, usize, f64)> = None;
    for s in (0..n).filter(|&s| word_index[s].is_some()) {
        for e in (s..n.min(s + MAX_ANSWER_TOKENS)).filter(|&e| word_index[e].is_some()) {
            let score = start[s] * end[e];
            if best.is_none_or(|b| score > b.2) {
                best = Some((s, e, score));
            }
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// `f1` or `anls`.
    pub metric_name: String,
    pub metric: f64,
    pub ece: f64,
    pub calibration: CalibrationReport,
    #[serde(skip)]
    pub records: Vec<PredictionRecord>,
}

impl Evaluation {
    fn new(name: &str, metric: f64, records: Vec<PredictionRecord>) -> Result<Self> {
        let calibration = ece(&records, DEFAULT_BINS)?;
        Ok(Self {
            metric_name: name.to_string(),
            metric,
            ece: calibration.ece,
            calibration,
            records,
        })
    }
}
