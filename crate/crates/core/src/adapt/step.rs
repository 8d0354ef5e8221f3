use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::select::{select_pseudo_labels, select_span_pseudo_labels};
use super::{stream_seed, AdaptConfig, AdaptLog, EpochLog, Method, Monitor, Task, TentScope};
use crate::docdata::{ModelInput, SpecialIds, TokenizedDoc, IGNORE_INDEX};
use crate::docmodel::{class_logits, forward, mvlm_logits, qa_allowed, qa_logits, softmax_rows, Batch, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{bind, AdamWConfig, Bound, Graph, OptimState, ParamSet, Tensor, Var};
use crate::objectives::{
    diversity_loss, mask_packed, mvlm_loss, pseudo_ce_loss, qa_diversity_loss, qa_pseudo_ce_loss, qa_source_ce_loss,
    qa_tent_entropy_loss, source_ce_loss, tent_entropy_loss, AcceptanceMask, SpanLogits,
};

/// Snapshot handed to an observer before each parameter update.
pub struct StepEvent<'a> {
    pub epoch: usize,
    pub step: usize,
    /// Optimizer updates applied so far.
    pub version: u64,
    /// Parameters the pseudo-labels were computed with.
    pub params: &'a ParamSet<f32>,
    /// Target inputs of this step, in batch order.
    pub inputs: &'a [&'a ModelInput],
    /// Acceptance over the step's units (start positions for QA).
    pub acceptance: &'a AcceptanceMask,
}

/// Optional callbacks of an adaptation run.
#[derive(Default)]
pub struct Hooks<'a> {
    pub monitor: Option<&'a Monitor<'a>>,
    pub observer: Option<&'a mut dyn FnMut(&StepEvent)>,
}

/// Parameters plus an AdamW state over a trainable subset of them.
pub(crate) struct Trainer {
    pub params: ParamSet<f32>,
    trainable: Vec<String>,
    opt: OptimState<f32>,
}

impl Trainer {
    pub fn new(params: ParamSet<f32>, config: AdamWConfig, keep: impl Fn(&str) -> bool) -> Self {
        let trainable: Vec<String> = params.names().filter(|n| keep(n)).map(str::to_string).collect();
        let mut sub = ParamSet::new();
        for name in &trainable {
            sub.insert(name.clone(), params.get(name).expect("listed name").clone());
        }
        let opt = OptimState::new(&sub, config);
        Self { params, trainable, opt }
    }

    pub fn version(&self) -> u64 {
        self.opt.step_count()
    }

    /// Backpropagates `loss` and applies one update to the trainable subset.
    pub fn step(&mut self, g: &Graph<f32>, bound: &Bound, loss: Var) -> Result<()> {
        let grads = g.backward(loss)?;
        let mut sub = ParamSet::new();
        let mut sub_grads = ParamSet::new();
        for name in &self.trainable {
            let slot = self.params.get_mut(name)?;
            let shape = slot.shape().to_vec();
            let grad = match grads.get(bound.var(name)?) {
                Some(gv) => Tensor::new(shape, gv.to_vec())?,
                None => Tensor::zeros(&shape),
            };
            sub.insert(name.clone(), std::mem::replace(slot, Tensor::zeros(&[0])));
            sub_grads.insert(name.clone(), grad);
        }
        let result = self.opt.step(&mut sub, &sub_grads);
        for (name, t) in sub.iter() {
            *self.params.get_mut(name)? = t.clone();
        }
        result
    }
}

/// Attended, non-structural rows of a packed batch.
pub(crate) fn unit_rows(batch: &Batch, special: &SpecialIds) -> Vec<usize> {
    (0..batch.rows())
        .filter(|&i| batch.attention[i] && !special.is_structural(batch.token_ids[i]))
        .collect()
}

/// Source supervision for a trimmed batch.
pub(crate) fn source_loss(
    g: &mut Graph<f32>,
    p: &Bound,
    model: &ModelConfig,
    special: &SpecialIds,
    task: Task,
    docs: &[&TokenizedDoc],
) -> Result<Var> {
    let inputs: Vec<&ModelInput> = docs.iter().map(|d| &d.input).collect();
    let batch = Batch::new(&inputs, model, true)?;
    let enc = forward(g, p, model, &batch)?;
    match task {
        Task::Entity => {
            let labels: Vec<i64> = docs
                .iter()
                .flat_map(|d| d.label_ids[..batch.seq].iter().copied())
                .collect();
            let logits = class_logits(g, p, enc)?;
            source_ce_loss(g, logits, &labels)
        }
        Task::Qa => {
            let allowed = qa_allowed(&batch, special);
            let (start, end) = qa_logits(g, p, enc, &allowed)?;
            let answers: Vec<(usize, usize)> = docs
                .iter()
                .map(|d| d.answer.ok_or_else(|| Error::MissingLabels(d.doc_id.clone())))
                .collect::<Result<_>>()?;
            qa_source_ce_loss(g, SpanLogits { start, end }, &answers)
        }
    }
}

#[derive(Default)]
struct Sums {
    steps: usize,
    total: f64,
    mvlm: f64,
    ce: f64,
    div: f64,
    source_ce: f64,
    tent: f64,
    accepted: usize,
    units: usize,
    entropy: f64,
}

impl Sums {
    fn finish(self, epoch: usize) -> EpochLog {
        let n = self.steps.max(1) as f64;
        EpochLog {
            epoch,
            steps: self.steps,
            total: self.total / n,
            mvlm: self.mvlm / n,
            ce: self.ce / n,
            div: self.div / n,
            source_ce: self.source_ce / n,
            tent: self.tent / n,
            acceptance_rate: if self.units == 0 {
                0.0
            } else {
                self.accepted as f64 / self.units as f64
            },
            mean_entropy: if self.units == 0 {
                0.0
            } else {
                self.entropy / self.units as f64
            },
            metrics: Default::default(),
        }
    }
}

/// DocTTA on unlabeled target inputs. `target` carries no labels by construction.
pub fn run_doctta(
    params: &ParamSet<f32>,
    model: &ModelConfig,
    special: SpecialIds,
    target: &[ModelInput],
    config: &AdaptConfig,
    hooks: Hooks,
) -> Result<(ParamSet<f32>, AdaptLog)> {
    let config = AdaptConfig {
        method: Method::Doctta,
        ..config.clone()
    };
    adapt_loop(params, model, special, target, None, &config, hooks)
}

/// DocUDA: DocTTA's objective plus source cross-entropy on an
/// interleaved labeled source batch.
pub fn run_docuda(
    params: &ParamSet<f32>,
    model: &ModelConfig,
    special: SpecialIds,
    source: &[TokenizedDoc],
    target: &[ModelInput],
    config: &AdaptConfig,
    hooks: Hooks,
) -> Result<(ParamSet<f32>, AdaptLog)> {
    let labeled = match config.task {
        Task::Entity => source.iter().any(|d| d.label_ids.iter().any(|&l| l != IGNORE_INDEX)),
        Task::Qa => source.iter().any(|d| d.answer.is_some()),
    };
    if !source.is_empty() && !labeled {
        return Err(Error::MissingLabels("source corpus has no labels".into()));
    }
    if source.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let config = AdaptConfig {
        method: Method::Docuda,
        ..config.clone()
    };
    adapt_loop(params, model, special, target, Some(source), &config, hooks)
}

/// Entropy minimization baseline.
pub fn run_tent(
    params: &ParamSet<f32>,
    model: &ModelConfig,
    special: SpecialIds,
    target: &[ModelInput],
    config: &AdaptConfig,
    hooks: Hooks,
) -> Result<(ParamSet<f32>, AdaptLog)> {
    let config = AdaptConfig {
        method: Method::Tent,
        ..config.clone()
    };
    adapt_loop(params, model, special, target, None, &config, hooks)
}

fn is_norm(name: &str) -> bool {
    name.ends_with(".gamma") || name.ends_with(".beta")
}

fn adapt_loop(
    params: &ParamSet<f32>,
    model: &ModelConfig,
    special: SpecialIds,
    target: &[ModelInput],
    source: Option<&[TokenizedDoc]>,
    config: &AdaptConfig,
    mut hooks: Hooks,
) -> Result<(ParamSet<f32>, AdaptLog)> {
    config.validate()?;
    if target.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let norm_only = config.method == Method::Tent && config.tent_scope == TentScope::Norm;
    let mut trainer = Trainer::new(params.clone(), config.optimizer(), |n| !norm_only || is_norm(n));
    let mut log = AdaptLog::default();
    let bs = config.batch_size;

    // Source inputs that can supervise (QA docs whose answer survived truncation).
    let source: Vec<&TokenizedDoc> = source
        .unwrap_or(&[])
        .iter()
        .filter(|d| config.task == Task::Entity || d.answer.is_some())
        .collect();

    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, 1, epoch as u64));
        let mut order: Vec<usize> = (0..target.len()).collect();
        order.shuffle(&mut rng);
        let mut src_order: Vec<usize> = (0..source.len()).collect();
        src_order.shuffle(&mut rng);
        let target_batches: Vec<&[usize]> = order.chunks(bs).collect();
        let source_batches: Vec<&[usize]> = src_order.chunks(bs).collect();
        let steps = target_batches.len().max(source_batches.len());

        let mut sums = Sums::default();
        for step in 0..steps {
            let ids = target_batches[step % target_batches.len()];
            let inputs: Vec<&ModelInput> = ids.iter().map(|&i| &target[i]).collect();
            let batch = Batch::new(&inputs, model, true)?;
            let mut g = Graph::<f32>::new();
            let p = bind(&mut g, &trainer.params);
            let mut terms = Vec::new();

            // Predictions with the current parameters: pseudo-labels, TENT, diversity.
            let enc = forward(&mut g, &p, model, &batch)?;
            let acceptance = match config.task {
                Task::Entity => {
                    let rows = unit_rows(&batch, &special);
                    let all = class_logits(&mut g, &p, enc)?;
                    let logits = g.gather_rows(all, &rows)?;
                    let probs = softmax_rows(g.value(logits));
                    let acc = select_pseudo_labels(&probs, config);
                    sums.units += acc.len();
                    sums.accepted += acc.accepted();
                    sums.entropy += acc.entropy.iter().sum::<f64>();
                    if config.method == Method::Tent {
                        let l = tent_entropy_loss(&mut g, logits)?;
                        sums.tent += g.value(l).item() as f64;
                        terms.push(l);
                    } else {
                        if config.losses.ce {
                            let l = pseudo_ce_loss(&mut g, logits, &acc)?;
                            sums.ce += g.value(l).item() as f64;
                            terms.push(l);
                        }
                        if config.losses.div {
                            let l = diversity_loss(&mut g, logits)?;
                            sums.div += g.value(l).item() as f64;
                            terms.push(l);
                        }
                    }
                    acc
                }
                Task::Qa => {
                    let allowed = qa_allowed(&batch, &special);
                    let support: Vec<usize> = allowed
                        .chunks(batch.seq)
                        .map(|c| c.iter().filter(|&&a| a).count())
                        .collect();
                    let (start, end) = qa_logits(&mut g, &p, enc, &allowed)?;
                    let span = SpanLogits { start, end };
                    let (ps, pe) = (softmax_rows(g.value(start)), softmax_rows(g.value(end)));
                    let (acc_s, acc_e) = select_span_pseudo_labels(&ps, &pe, &support, config);
                    sums.units += acc_s.len();
                    sums.accepted += acc_s.accepted();
                    sums.entropy += acc_s
                        .entropy
                        .iter()
                        .zip(&acc_e.entropy)
                        .map(|(a, b)| (a + b) / 2.0)
                        .sum::<f64>();
                    if config.method == Method::Tent {
                        let l = qa_tent_entropy_loss(&mut g, span)?;
                        sums.tent += g.value(l).item() as f64;
                        terms.push(l);
                    } else {
                        if config.losses.ce {
                            let l = qa_pseudo_ce_loss(&mut g, span, &acc_s, &acc_e)?;
                            sums.ce += g.value(l).item() as f64;
                            terms.push(l);
                        }
                        if config.losses.div {
                            let l = qa_diversity_loss(&mut g, span)?;
                            sums.div += g.value(l).item() as f64;
                            terms.push(l);
                        }
                    }
                    acc_s
                }
            };

            if config.method != Method::Tent && config.losses.mvlm {
                let mut masked = batch.token_ids.clone();
                let plan = mask_packed(
                    &mut masked,
                    &batch.attention,
                    batch.seq,
                    special,
                    model.vocab_size,
                    config.mask_rate,
                    config.mask_token_frac,
                    stream_seed(config.seed, 2 + epoch as u64, step as u64),
                );
                if !plan.is_empty() {
                    let mb = batch.with_token_ids(masked)?;
                    let enc = forward(&mut g, &p, model, &mb)?;
                    let logits = mvlm_logits(&mut g, &p, enc, &plan.rows(batch.seq))?;
                    let l = mvlm_loss(&mut g, logits, &plan)?;
                    sums.mvlm += g.value(l).item() as f64;
                    terms.push(l);
                }
            }

            if config.method == Method::Docuda && !source.is_empty() {
                let sids = source_batches[step % source_batches.len()];
                let docs: Vec<&TokenizedDoc> = sids.iter().map(|&i| source[i]).collect();
                let l = source_loss(&mut g, &p, model, &special, config.task, &docs)?;
                sums.source_ce += g.value(l).item() as f64;
                terms.push(l);
            }

            if let Some(obs) = hooks.observer.as_mut() {
                obs(&StepEvent {
                    epoch,
                    step,
                    version: trainer.version(),
                    params: &trainer.params,
                    inputs: &inputs,
                    acceptance: &acceptance,
                });
            }

            let total = if terms.is_empty() {
                g.scalar(0.0)
            } else {
                g.add_all(&terms)?
            };
            let value = g.value(total).item();
            if !value.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "non-finite loss at epoch {epoch} step {step}"
                )));
            }
            sums.total += f64::from(value);
            sums.steps += 1;
            trainer.step(&g, &p, total)?;
        }

        let mut entry = sums.finish(epoch);
        if let Some(monitor) = hooks.monitor {
            entry.metrics = monitor(&trainer.params)?;
        }
        log.epochs.push(entry);
    }
    Ok((trainer.params, log))
}
