//! In-memory orchestration of one run: pretraining, source training,
//! adaptation and evaluation over a fixed set of corpora.

use std::cell::RefCell;
use std::collections::BTreeMap;

use super::config::RunConfig;
use super::pipeline::{Corpora, Evaluation, Setup};
use crate::adapt::{
    pretrain_mvlm, run_doctta, run_docuda, run_tent, stream_seed, AdaptLog, DocudaInit, Hooks, Method, Monitor,
    TrainConfig, TrainLog,
};
use crate::docdata::{ModelInput, TokenizedDoc, Vocab};
use crate::docmodel::{init_params, reset_head};
use crate::error::Result;
use crate::numerics::ParamSet;

pub const SELECTION_KEY: &str = "source_val";

#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: RunConfig,
    pub corpora: Corpora,
    pub setup: Setup,
}

impl Experiment {
    /// Builds the corpora from the data section and a vocabulary over them.
    pub fn build(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let corpora = Corpora::build(config)?;
        let vocab = corpora.vocab(config.model.max_vocab)?;
        Self::from_parts(config, corpora, vocab)
    }

    pub fn from_parts(config: &RunConfig, corpora: Corpora, vocab: Vocab) -> Result<Self> {
        let setup = Setup::new(config, vocab)?;
        Ok(Self {
            config: config.clone(),
            corpora,
            setup,
        })
    }

    /// Same corpora and vocabulary under a different configuration (the data
    /// section is not re-read).
    pub fn with_config(&self, config: &RunConfig) -> Result<Self> {
        config.validate()?;
        Self::from_parts(config, self.corpora.clone(), self.setup.tokenizer.vocab.clone())
    }

    /// MVLM pretraining of a fresh model on the unlabeled pretraining corpus.
    /// Depends on `pretrain.seed` only.
    pub fn pretrain(&self) -> Result<(ParamSet<f32>, Vec<f64>)> {
        let cfg = &self.config.pretrain;
        let init = init_params(&self.setup.model, stream_seed(cfg.seed, 11, 0))?;
        let inputs = self.setup.pretrain_inputs(&self.corpora.pretrain);
        pretrain_mvlm(&init, &self.setup.model, self.setup.special(), &inputs, cfg)
    }

    /// Base parameters with task heads re-drawn from the run seed.
    pub fn fresh_heads(&self, base: &ParamSet<f32>) -> Result<ParamSet<f32>> {
        let mut p = base.clone();
        for head in ["class", "qa"] {
            reset_head(&mut p, &self.setup.model, head, stream_seed(self.config.seed, 12, 0))?;
        }
        Ok(p)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.config.train;
        TrainConfig {
            task: self.config.task.model_task(),
            epochs: t.epochs,
            lr: t.lr,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            seed: stream_seed(self.config.seed, 13, 0),
        }
    }

    /// Supervised training on the labeled documents, keeping the epoch with
    /// the best metric on `select_on`.
    pub fn train_on(
        &self,
        base: &ParamSet<f32>,
        train: &[crate::docdata::Document],
        select_on: &[crate::docdata::Document],
    ) -> Result<(ParamSet<f32>, TrainLog)> {
        let init = self.fresh_heads(base)?;
        let seqs = self.setup.training_set(train)?;
        let monitor = |p: &ParamSet<f32>| -> Result<BTreeMap<String, f64>> {
            let e = self.setup.evaluate(p, select_on)?;
            Ok(BTreeMap::from([(SELECTION_KEY.to_string(), e.metric)]))
        };
        let select: Option<&Monitor> = if select_on.is_empty() { None } else { Some(&monitor) };
        crate::adapt::train_supervised(
            &init,
            &self.setup.model,
            self.setup.special(),
            &seqs,
            &self.train_config(),
            select,
            SELECTION_KEY,
        )
    }

    /// Source-only model: source-train with source-val model selection.
    pub fn train_source(&self, base: &ParamSet<f32>) -> Result<(ParamSet<f32>, TrainLog)> {
        self.train_on(base, &self.corpora.source_train, &self.corpora.source_val)
    }

    pub fn source_sequences(&self) -> Result<Vec<TokenizedDoc>> {
        self.setup.training_set(&self.corpora.source_train)
    }

    pub fn target_inputs(&self) -> Result<Vec<ModelInput>> {
        self.setup.unlabeled_inputs(&self.corpora.target)
    }

    /// Parameters an adaptation run starts from.
    pub fn adapt_start(&self, source: &ParamSet<f32>, base: &ParamSet<f32>) -> Result<ParamSet<f32>> {
        match (self.config.adapt.method, self.config.adapt.docuda_init) {
            (Method::Docuda, DocudaInit::Base) => self.fresh_heads(base),
            _ => Ok(source.clone()),
        }
    }

    /// Runs the configured method on `target` from `start`.
    pub fn adapt_on(
        &self,
        start: &ParamSet<f32>,
        target: &[ModelInput],
        hooks: Hooks,
    ) -> Result<(ParamSet<f32>, AdaptLog)> {
        let mut cfg = self.config.adapt.clone();
        cfg.task = self.config.task.model_task();
        cfg.seed = stream_seed(self.config.seed, 14, 0);
        if cfg.method == Method::Docuda && cfg.docuda_init == DocudaInit::Base {
            // a fresh task head: the run is a full training run
            let t = &self.config.train;
            (cfg.epochs, cfg.lr, cfg.weight_decay, cfg.batch_size) = (t.epochs, t.lr, t.weight_decay, t.batch_size);
        }
        let (model, special) = (&self.setup.model, self.setup.special());
        let from_base = cfg.method == Method::Docuda && cfg.docuda_init == DocudaInit::Base;
        if from_base && hooks.monitor.is_none() && hooks.observer.is_none() && !self.corpora.source_val.is_empty() {
            // same epoch selection as source training
            let best: RefCell<Option<(f64, ParamSet<f32>)>> = RefCell::new(None);
            let monitor = |p: &ParamSet<f32>| -> Result<BTreeMap<String, f64>> {
                let m = self.evaluate_source_val(p)?.metric;
                if best.borrow().as_ref().is_none_or(|b| m > b.0) {
                    *best.borrow_mut() = Some((m, p.clone()));
                }
                Ok(BTreeMap::from([(SELECTION_KEY.to_string(), m)]))
            };
            let hooks = Hooks {
                monitor: Some(&monitor),
                observer: None,
            };
            let (last, log) = run_docuda(start, model, special, &self.source_sequences()?, target, &cfg, hooks)?;
            return Ok((best.into_inner().map_or(last, |b| b.1), log));
        }
        match cfg.method {
            Method::Doctta => run_doctta(start, model, special, target, &cfg, hooks),
            Method::Tent => run_tent(start, model, special, target, &cfg, hooks),
            Method::Docuda => run_docuda(start, model, special, &self.source_sequences()?, target, &cfg, hooks),
        }
    }

    /// Adapts to the target corpus; target labels never reach this call.
    pub fn adapt(&self, source: &ParamSet<f32>, base: &ParamSet<f32>) -> Result<(ParamSet<f32>, AdaptLog)> {
        let start = self.adapt_start(source, base)?;
        self.adapt_on(&start, &self.target_inputs()?, Hooks::default())
    }

    pub fn evaluate_target(&self, params: &ParamSet<f32>) -> Result<Evaluation> {
        self.setup.evaluate(params, &self.corpora.target)
    }

    pub fn evaluate_source_val(&self, params: &ParamSet<f32>) -> Result<Evaluation> {
        self.setup.evaluate(params, &self.corpora.source_val)
    }
}
