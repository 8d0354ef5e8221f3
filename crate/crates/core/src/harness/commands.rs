//! File-backed commands. Everything lives under the run's output directory:
//!
//! ```text
//! data/        corpora (JSON lines), manifests/, vocab.json, data_hash
//! checkpoints/ base.ckpt, source.ckpt, <method>.ckpt
//! results/     one record per run plus timing sidecars
//! calibration/ reliability and confidence-histogram tables
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::experiment::Experiment;
use super::pipeline::{Corpora, Evaluation, Setup};
use super::results::{Metrics, ResultsRecord};
use crate::adapt::{AdaptConfig, Hooks};
use crate::docdata::{read_corpus, read_manifest, write_corpus, write_manifest, Document, Vocab};
use crate::error::{Error, Result};
use crate::evalmetrics::{export_conf_hist, export_reliability, DEFAULT_BINS};
use crate::numerics::ParamSet;

const SPLITS: [&str; 4] = ["source_train", "source_val", "target", "pretrain"];

/// Paths under one output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn corpus(&self, split: &str) -> PathBuf {
        self.data().join(format!("{split}.jsonl"))
    }

    pub fn manifest(&self, split: &str) -> PathBuf {
        self.data().join("manifests").join(format!("{split}.txt"))
    }

    pub fn vocab(&self) -> PathBuf {
        self.data().join("vocab.json")
    }

    fn data_hash(&self) -> PathBuf {
        self.data().join("data_hash")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn results(&self) -> PathBuf {
        self.root.join("results")
    }

    pub fn calibration(&self) -> PathBuf {
        self.root.join("calibration")
    }
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        mkdir(dir)?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Hash of the settings the corpora and vocabulary depend on.
fn data_hash(config: &RunConfig) -> Result<String> {
    super::results::json_hash(&(&config.data, config.model.max_vocab))
}

/// Writes source-train, source-val, target and pretraining corpora, their
/// manifests and the vocabulary.
pub fn cmd_gen_data(config: &RunConfig) -> Result<Experiment> {
    let started = Instant::now();
    let exp = Experiment::build(config)?;
    let layout = Layout::new(&config.out_dir);
    mkdir(&layout.data().join("manifests"))?;
    let c = &exp.corpora;
    for (split, docs) in SPLITS
        .iter()
        .zip([&c.source_train, &c.source_val, &c.target, &c.pretrain])
    {
        write_corpus(&layout.corpus(split), docs)?;
        write_manifest(&layout.manifest(split), docs.iter().map(|d| d.id.as_str()))?;
    }
    let vocab = serde_json::to_string(exp.setup.tokenizer.vocab.tokens())?;
    write_text(&layout.vocab(), &vocab)?;
    write_text(&layout.data_hash(), &data_hash(config)?)?;
    let mut rec = ResultsRecord::new("gen-data", "data", config)?;
    rec.extra = vec![
        ("source_train".into(), c.source_train.len() as f64),
        ("source_val".into(), c.source_val.len() as f64),
        ("target".into(), c.target.len() as f64),
        ("pretrain".into(), c.pretrain.len() as f64),
        ("vocab".into(), exp.setup.tokenizer.vocab.len() as f64),
    ];
    rec.write(&layout.results(), started.elapsed().as_secs_f64())?;
    info!(
        "wrote {} source-train / {} source-val / {} target / {} pretrain documents",
        c.source_train.len(),
        c.source_val.len(),
        c.target.len(),
        c.pretrain.len()
    );
    Ok(exp)
}

/// Loads the corpora written by `gen-data`, generating them first when the
/// data directory is missing.
pub fn load_experiment(config: &RunConfig) -> Result<Experiment> {
    config.validate()?;
    let layout = Layout::new(&config.out_dir);
    if !layout.data_hash().exists() {
        info!("no data under {}; generating", layout.data().display());
        return cmd_gen_data(config);
    }
    let stored = fs::read_to_string(layout.data_hash()).map_err(|e| Error::io(layout.data_hash(), e))?;
    if stored.trim() != data_hash(config)? {
        return Err(Error::Config(format!(
            "{} was generated from a different data configuration; rerun gen-data",
            layout.data().display()
        )));
    }
    let read = |split: &str| -> Result<Vec<Document>> {
        let docs = read_corpus(&layout.corpus(split))?;
        let ids = read_manifest(&layout.manifest(split))?;
        crate::docdata::select_split(&docs, &ids)
    };
    let corpora = Corpora {
        source_train: read("source_train")?,
        source_val: read("source_val")?,
        target: read("target")?,
        pretrain: read("pretrain")?,
    };
    let text = fs::read_to_string(layout.vocab()).map_err(|e| Error::io(layout.vocab(), e))?;
    let vocab = Vocab::from_tokens(serde_json::from_str(&text)?)?;
    Experiment::from_parts(config, corpora, vocab)
}

fn save(exp: &Experiment, params: &ParamSet<f32>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        mkdir(dir)?;
    }
    Checkpoint::new(
        exp.setup.model.clone(),
        exp.setup.tokenizer.vocab.tokens().to_vec(),
        params.clone(),
    )
    .save(path)
}

fn load(exp: &Experiment, path: &Path) -> Result<ParamSet<f32>> {
    let ckpt = Checkpoint::load_expecting(path, &exp.setup.model)?;
    if ckpt.vocab != exp.setup.tokenizer.vocab.tokens() {
        return Err(Error::Checkpoint(format!(
            "{}: vocabulary differs from the data directory",
            path.display()
        )));
    }
    Ok(ckpt.params)
}

/// Loads a checkpoint, or produces it with `make` when absent.
fn load_or(exp: &Experiment, path: &Path, make: impl FnOnce() -> Result<ParamSet<f32>>) -> Result<ParamSet<f32>> {
    if path.exists() {
        load(exp, path)
    } else {
        info!("{} missing; producing it", path.display());
        make()
    }
}

pub fn cmd_pretrain(config: &RunConfig) -> Result<PathBuf> {
    let exp = load_experiment(config)?;
    pretrain_with(&exp).map(|(_, rec)| rec)
}

fn pretrain_with(exp: &Experiment) -> Result<(ParamSet<f32>, PathBuf)> {
    let started = Instant::now();
    let layout = Layout::new(&exp.config.out_dir);
    let (params, losses) = exp.pretrain()?;
    save(exp, &params, &layout.checkpoint("base"))?;
    let mut rec = ResultsRecord::new("pretrain", "mvlm", &exp.config)?;
    rec.pretrain_losses = Some(losses);
    let path = rec.write(&layout.results(), started.elapsed().as_secs_f64())?;
    Ok((params, path))
}

fn base_params(exp: &Experiment) -> Result<ParamSet<f32>> {
    let path = Layout::new(&exp.config.out_dir).checkpoint("base");
    load_or(exp, &path, || pretrain_with(exp).map(|(p, _)| p))
}

/// Source-only baseline: trains on source-train, selects the epoch by the
/// source-val metric, evaluates on the target corpus.
pub fn cmd_train_source(config: &RunConfig) -> Result<PathBuf> {
    let exp = load_experiment(config)?;
    train_source_with(&exp).map(|(_, rec)| rec)
}

fn train_source_with(exp: &Experiment) -> Result<(ParamSet<f32>, PathBuf)> {
    let base = base_params(exp)?;
    let started = Instant::now();
    let layout = Layout::new(&exp.config.out_dir);
    let (params, log) = exp.train_source(&base)?;
    save(exp, &params, &layout.checkpoint("source"))?;
    let eval = exp.evaluate_target(&params)?;
    let mut rec = ResultsRecord::new("train-source", "source-only", &exp.config)?;
    rec.model_selection = Some(format!(
        "best source-val {} (epoch {})",
        eval.metric_name, log.best_epoch
    ));
    rec.extra = vec![(
        "source_val_selected".into(),
        log.selection.get(log.best_epoch).copied().unwrap_or(0.0),
    )];
    rec.train_log = Some(log);
    rec.metrics = Some(Metrics::from_eval(&eval, None));
    let path = rec.write(&layout.results(), started.elapsed().as_secs_f64())?;
    Ok((params, path))
}

fn source_params(exp: &Experiment) -> Result<ParamSet<f32>> {
    let path = Layout::new(&exp.config.out_dir).checkpoint("source");
    load_or(exp, &path, || train_source_with(exp).map(|(p, _)| p))
}

fn method_name(adapt: &AdaptConfig) -> String {
    serde_json::to_value(adapt.method)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn export_calibration(layout: &Layout, name: &str, eval: &Evaluation) -> Result<()> {
    let dir = layout.calibration();
    write_text(
        &dir.join(format!("{name}_reliability.csv")),
        &export_reliability(&eval.calibration),
    )?;
    write_text(
        &dir.join(format!("{name}_conf_hist.csv")),
        &export_conf_hist(&eval.records, DEFAULT_BINS)?,
    )
}

/// Adapts the source model to the target corpus with the configured method,
/// evaluating before and after.
pub fn cmd_adapt(config: &RunConfig) -> Result<PathBuf> {
    let exp = load_experiment(config)?;
    let base = base_params(&exp)?;
    let source = source_params(&exp)?;
    let started = Instant::now();
    let layout = Layout::new(&config.out_dir);
    let method = method_name(&config.adapt);
    let start = exp.adapt_start(&source, &base)?;
    let before = exp.evaluate_target(&start)?;
    let (params, log) = exp.adapt_on(&start, &exp.target_inputs()?, Hooks::default())?;
    let after = exp.evaluate_target(&params)?;
    save(&exp, &params, &layout.checkpoint(&method))?;
    let tag = format!("{method}-s{}", config.seed);
    export_calibration(&layout, &format!("{tag}-before"), &before)?;
    export_calibration(&layout, &format!("{tag}-after"), &after)?;
    let mut rec = ResultsRecord::new("adapt", &method, config)?;
    rec.before = Some(Metrics::from_eval(&before, None));
    rec.metrics = Some(Metrics::from_eval(&after, log.epochs.last().map(|e| e.acceptance_rate)));
    rec.epochs = log.epochs;
    rec.write(&layout.results(), started.elapsed().as_secs_f64())
}

/// Metrics of a checkpoint on a corpus file (the target split by default).
pub fn cmd_eval(config: &RunConfig, checkpoint: &Path, corpus: Option<&Path>) -> Result<(Evaluation, PathBuf)> {
    let started = Instant::now();
    let (setup, params, docs) = eval_inputs(config, checkpoint, corpus)?;
    let eval = setup.evaluate(&params, &docs)?;
    let mut rec = ResultsRecord::new("eval", &checkpoint_stem(checkpoint), config)?;
    rec.metrics = Some(Metrics::from_eval(&eval, None));
    let path = rec.write(&Layout::new(&config.out_dir).results(), started.elapsed().as_secs_f64())?;
    Ok((eval, path))
}

fn checkpoint_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Setup from the checkpoint's own vocabulary, so a checkpoint can be
/// evaluated on any corpus file.
fn eval_inputs(
    config: &RunConfig,
    checkpoint: &Path,
    corpus: Option<&Path>,
) -> Result<(Setup, ParamSet<f32>, Vec<Document>)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let setup = Setup::new(config, Vocab::from_tokens(ckpt.vocab.clone())?)?;
    if setup.model != ckpt.model {
        return Err(Error::Checkpoint(format!(
            "{}: model config {:?} does not match the run config {:?}",
            checkpoint.display(),
            ckpt.model,
            setup.model
        )));
    }
    let docs = match corpus {
        Some(p) => read_corpus(p)?,
        None => load_experiment(config)?.corpora.target,
    };
    Ok((setup, ckpt.params, docs))
}

/// Calibration report and exports for one checkpoint, or a before/after
/// pair for two.
pub fn cmd_calibrate(config: &RunConfig, checkpoints: &[PathBuf], corpus: Option<&Path>) -> Result<PathBuf> {
    if checkpoints.is_empty() || checkpoints.len() > 2 {
        return Err(Error::Config("calibrate takes one or two checkpoints".into()));
    }
    let started = Instant::now();
    let layout = Layout::new(&config.out_dir);
    let mut evals = Vec::new();
    for (i, ckpt) in checkpoints.iter().enumerate() {
        let (setup, params, docs) = eval_inputs(config, ckpt, corpus)?;
        let eval = setup.evaluate(&params, &docs)?;
        let role = match (checkpoints.len(), i) {
            (1, _) => "single",
            (_, 0) => "before",
            _ => "after",
        };
        export_calibration(&layout, &format!("{}-{role}", checkpoint_stem(ckpt)), &eval)?;
        evals.push(eval);
    }
    let mut rec = ResultsRecord::new("calibrate", "calibration", config)?;
    if evals.len() == 2 {
        rec.before = Some(Metrics::from_eval(&evals[0], None));
    }
    rec.metrics = evals.last().map(|e| Metrics::from_eval(e, None));
    rec.write(&layout.results(), started.elapsed().as_secs_f64())
}

/// Learning rates, weight decays and thresholds tried by `sweep`.
pub const SWEEP_LR: [f64; 3] = [1e-5, 2.5e-5, 5e-5];
pub const SWEEP_WD: [f64; 2] = [0.0, 0.01];
pub const SWEEP_GAMMA: [f64; 2] = [1.5, 2.0];

/// Grid search for the adaptation hyperparameters. Each candidate adapts on
/// the unlabeled source-val inputs and is scored on source-val; the target
/// corpus is not consulted.
pub fn cmd_sweep(config: &RunConfig) -> Result<PathBuf> {
    let exp = load_experiment(config)?;
    let base = base_params(&exp)?;
    let source = source_params(&exp)?;
    let started = Instant::now();
    let val_inputs = exp.setup.unlabeled_inputs(&exp.corpora.source_val)?;
    let mut scores = Vec::new();
    let mut best: Option<(f64, f64, f64, f64)> = None;
    for lr in SWEEP_LR {
        for wd in SWEEP_WD {
            for gamma in SWEEP_GAMMA {
                let mut cfg = config.clone();
                cfg.adapt.lr = lr;
                cfg.adapt.weight_decay = wd;
                cfg.adapt.gamma = gamma;
                let e = exp.with_config(&cfg)?;
                let start = e.adapt_start(&source, &base)?;
                let (params, _) = e.adapt_on(&start, &val_inputs, Hooks::default())?;
                let score = e.evaluate_source_val(&params)?.metric;
                info!("lr {lr} wd {wd} gamma {gamma}: source-val {score:.4}");
                scores.push((format!("lr={lr},wd={wd},gamma={gamma}"), score));
                if best.is_none_or(|b| score > b.0) {
                    best = Some((score, lr, wd, gamma));
                }
            }
        }
    }
    let mut rec = ResultsRecord::new("sweep", &method_name(&config.adapt), config)?;
    if let Some((score, lr, wd, gamma)) = best {
        rec.model_selection = Some(format!("best source-val: lr={lr}, weight_decay={wd}, gamma={gamma}"));
        scores.push(("best".into(), score));
    }
    rec.extra = scores;
    rec.write(&Layout::new(&config.out_dir).results(), started.elapsed().as_secs_f64())
}
