use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::step::{source_loss, Trainer};
use super::{stream_seed, Monitor, Task};
use crate::docdata::{ModelInput, SpecialIds, TokenizedDoc};
use crate::docmodel::{forward, mvlm_logits, Batch, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{bind, AdamWConfig, Graph, ParamSet};
use crate::objectives::{mask_packed, mvlm_loss, MASK_RATE, MASK_TOKEN_FRAC};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub task: Task,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::Entity,
            epochs: 10,
            lr: 5e-5,
            weight_decay: 0.0,
            batch_size: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
    /// Selection metric after each epoch (index 0 = before training).
    pub selection: Vec<f64>,
    /// Epoch whose parameters were returned; 0 = the initial parameters.
    pub best_epoch: usize,
}

/// Supervised training on labeled documents. With `select`, the parameters
/// with the highest selection score (evaluated before training and after
/// every epoch) are returned; otherwise the last ones.
pub fn train_supervised(
    params: &ParamSet<f32>,
    model: &ModelConfig,
    special: SpecialIds,
    train: &[TokenizedDoc],
    config: &TrainConfig,
    select: Option<&Monitor>,
    select_key: &str,
) -> Result<(ParamSet<f32>, TrainLog)> {
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let docs: Vec<&TokenizedDoc> = train
        .iter()
        .filter(|d| config.task == Task::Entity || d.answer.is_some())
        .collect();
    if docs.is_empty() {
        return Err(Error::MissingLabels("no answerable training questions".into()));
    }
    let opt = AdamWConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..Default::default()
    };
    let mut trainer = Trainer::new(params.clone(), opt, |_| true);
    let mut log = TrainLog::default();
    let score = |p: &ParamSet<f32>| -> Result<f64> {
        let metrics = select.map(|m| m(p)).transpose()?;
        match metrics {
            Some(m) => m
                .get(select_key)
                .copied()
                .ok_or_else(|| Error::Config(format!("selection metric `{select_key}` not reported"))),
            None => Ok(0.0),
        }
    };
    let mut best = (score(params)?, params.clone(), 0usize);
    log.selection.push(best.0);

    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, 101, epoch as u64));
        let mut order: Vec<usize> = (0..docs.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for ids in order.chunks(config.batch_size) {
            let batch: Vec<&TokenizedDoc> = ids.iter().map(|&i| docs[i]).collect();
            let mut g = Graph::<f32>::new();
            let p = bind(&mut g, &trainer.params);
            let loss = source_loss(&mut g, &p, model, &special, config.task, &batch)?;
            total += f64::from(g.value(loss).item());
            steps += 1;
            trainer.step(&g, &p, loss)?;
        }
        log.losses.push(total / steps.max(1) as f64);
        if select.is_some() {
            let s = score(&trainer.params)?;
            log.selection.push(s);
            if s > best.0 {
                best = (s, trainer.params.clone(), epoch + 1);
            }
        }
    }
    if select.is_some() {
        log.best_epoch = best.2;
        Ok((best.1, log))
    } else {
        log.best_epoch = config.epochs;
        Ok((trainer.params, log))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub mask_rate: f64,
    pub mask_token_frac: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 1e-3,
            weight_decay: 0.01,
            batch_size: 16,
            mask_rate: MASK_RATE,
            mask_token_frac: MASK_TOKEN_FRAC,
            seed: 0,
        }
    }
}

/// MVLM-only training on unlabeled inputs; returns the parameters and the
/// mean loss per epoch.
pub fn pretrain_mvlm(
    params: &ParamSet<f32>,
    model: &ModelConfig,
    special: SpecialIds,
    inputs: &[ModelInput],
    config: &PretrainConfig,
) -> Result<(ParamSet<f32>, Vec<f64>)> {
    if inputs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let opt = AdamWConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..Default::default()
    };
    let mut trainer = Trainer::new(params.clone(), opt, |_| true);
    let mut losses = Vec::new();
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, 201, epoch as u64));
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        order.shuffle(&mut rng);
        let (mut total, mut steps) = (0.0, 0usize);
        for (step, ids) in order.chunks(config.batch_size).enumerate() {
            let refs: Vec<&ModelInput> = ids.iter().map(|&i| &inputs[i]).collect();
            let batch = Batch::new(&refs, model, true)?;
            let mut masked = batch.token_ids.clone();
            let plan = mask_packed(
                &mut masked,
                &batch.attention,
                batch.seq,
                special,
                model.vocab_size,
                config.mask_rate,
                config.mask_token_frac,
                stream_seed(config.seed, 202 + epoch as u64, step as u64),
            );
            if plan.is_empty() {
                continue;
            }
            let batch = batch.with_token_ids(masked)?;
            let mut g = Graph::<f32>::new();
            let p = bind(&mut g, &trainer.params);
            let enc = forward(&mut g, &p, model, &batch)?;
            let logits = mvlm_logits(&mut g, &p, enc, &plan.rows(batch.seq))?;
            let loss = mvlm_loss(&mut g, logits, &plan)?;
            total += f64::from(g.value(loss).item());
            steps += 1;
            trainer.step(&g, &p, loss)?;
        }
        losses.push(total / steps.max(1) as f64);
    }
    Ok((trainer.params, losses))
}
