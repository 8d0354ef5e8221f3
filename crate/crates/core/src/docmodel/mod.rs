//! Small layout-aware transformer encoder with MVLM, token-class and QA heads.
//!
//! Inputs are embedded as the sum of token, 1-D position, segment and six
//! layout-coordinate embeddings. When image patches are enabled, a linear
//! summary of the ink patches is gated and added to every position. The
//! encoder is a stack of pre-norm self-attention blocks with padding keys
//! masked out.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::docdata::{ModelInput, GRID};
use crate::error::{Error, Result};
use crate::numerics::{bind, Bound, Graph, ParamSet, Scalar, Tensor, Var};

pub const LAYOUT_BUCKETS: usize = GRID as usize + 1;
const LAYOUT_FIELDS: [&str; 6] = ["x_min", "x_max", "y_min", "y_max", "w", "h"];
const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
/// Added to QA logits at positions that cannot hold an answer.
const MASK_LOGIT: f64 = -1e4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub num_classes: usize,
    pub layout_buckets: usize,
    /// Image patches per document; 0 disables the image input.
    pub image_patches: usize,
    pub ffn_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1000,
            hidden: 64,
            layers: 2,
            heads: 4,
            max_len: 128,
            num_classes: 7,
            layout_buckets: LAYOUT_BUCKETS,
            image_patches: 16,
            ffn_mult: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes {} < 2", self.num_classes));
        }
        if self.max_len == 0 || self.max_len > 512 {
            return bad(format!("max_len {} not in [1, 512]", self.max_len));
        }
        if self.vocab_size < 5 {
            return bad(format!("vocab_size {} too small", self.vocab_size));
        }
        if self.layout_buckets != LAYOUT_BUCKETS {
            return bad(format!("layout_buckets must be {LAYOUT_BUCKETS}"));
        }
        if self.ffn_mult == 0 {
            return bad("ffn_mult must be positive".into());
        }
        Ok(())
    }

    fn ffn(&self) -> usize {
        self.hidden * self.ffn_mult
    }

    /// Parameter names with their shapes, in construction order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, v, c) = (self.hidden, self.vocab_size, self.num_classes);
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("emb.token".into(), vec![v, d]),
            ("emb.position".into(), vec![self.max_len, d]),
            ("emb.segment".into(), vec![2, d]),
        ];
        for f in LAYOUT_FIELDS {
            out.push((format!("emb.layout.{f}"), vec![self.layout_buckets, d]));
        }
        if self.image_patches > 0 {
            out.push(("img.proj".into(), vec![self.image_patches, d]));
            out.push(("img.bias".into(), vec![d]));
            out.push(("img.gate".into(), vec![d]));
        }
        for l in 0..self.layers {
            let p = |s: &str| format!("block{l}.{s}");
            out.push((p("ln1.gamma"), vec![d]));
            out.push((p("ln1.beta"), vec![d]));
            for m in ["q", "k", "v", "o"] {
                out.push((p(&format!("attn.w{m}")), vec![d, d]));
                out.push((p(&format!("attn.b{m}")), vec![d]));
            }
            out.push((p("ln2.gamma"), vec![d]));
            out.push((p("ln2.beta"), vec![d]));
            out.push((p("ffn.w1"), vec![d, self.ffn()]));
            out.push((p("ffn.b1"), vec![self.ffn()]));
            out.push((p("ffn.w2"), vec![self.ffn(), d]));
            out.push((p("ffn.b2"), vec![d]));
        }
        out.push(("final.gamma".into(), vec![d]));
        out.push(("final.beta".into(), vec![d]));
        out.push(("head.mvlm.w".into(), vec![d, v]));
        out.push(("head.mvlm.b".into(), vec![v]));
        out.push(("head.class.w".into(), vec![d, c]));
        out.push(("head.class.b".into(), vec![c]));
        out.push(("head.qa.w".into(), vec![d, 2]));
        out.push(("head.qa.b".into(), vec![2]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Seeded initialization: normal(0, 0.02) weights, zero biases, unit norms.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParamSet<f32>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (name, shape) in config.param_shapes() {
        let t = if name.ends_with(".gamma") {
            Tensor::full(&shape, 1.0)
        } else if name == "img.gate" {
            Tensor::full(&shape, 0.25)
        } else if shape.len() == 1 || name.ends_with(".beta") {
            Tensor::zeros(&shape)
        } else {
            Tensor::randn(&shape, INIT_STD, &mut rng)
        };
        params.insert(name, t);
    }
    Ok(params)
}

/// Re-initializes the parameters of one head (`mvlm`, `class` or `qa`).
pub fn reset_head(params: &mut ParamSet<f32>, config: &ModelConfig, head: &str, seed: u64) -> Result<()> {
    let fresh = init_params(config, seed)?;
    for (name, t) in fresh.iter() {
        if name.starts_with(&format!("head.{head}.")) {
            *params.get_mut(name)? = t.clone();
        }
    }
    Ok(())
}

/// Inputs packed for one forward pass: `size` sequences of `seq` positions,
/// flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub seq: usize,
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    /// Six coordinate id columns (x_min, x_max, y_min, y_max, w, h).
    pub coords: [Vec<usize>; 6],
    pub attention: Vec<bool>,
    /// `size × image_patches` patch densities.
    pub patches: Vec<f32>,
}

impl Batch {
    /// Packs `inputs`. With `trim`, sequences are cut to the longest
    /// attended length in the batch; positions past it are padding only.
    pub fn new(inputs: &[&ModelInput], config: &ModelConfig, trim: bool) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let full = inputs[0].len();
        for x in inputs {
            if x.len() != full || x.boxes.len() != full || x.segment_ids.len() != full || x.attention_mask.len() != full
            {
                return Err(Error::LengthMismatch {
                    what: "batch sequence",
                    left: full,
                    right: x.len(),
                });
            }
        }
        if full > config.max_len {
            return Err(Error::SequenceTooLong {
                len: full,
                max: config.max_len,
            });
        }
        let seq = if trim {
            inputs.iter().map(|x| x.content_len()).max().unwrap_or(0).max(1)
        } else {
            full
        };
        let mut b = Batch {
            size: inputs.len(),
            seq,
            token_ids: Vec::with_capacity(inputs.len() * seq),
            segment_ids: Vec::with_capacity(inputs.len() * seq),
            coords: Default::default(),
            attention: Vec::with_capacity(inputs.len() * seq),
            patches: Vec::with_capacity(inputs.len() * config.image_patches),
        };
        for x in inputs {
            for i in 0..seq {
                let id = x.token_ids[i];
                if id >= config.vocab_size {
                    return Err(Error::InvalidInput(format!(
                        "token id {id} outside vocabulary of {}",
                        config.vocab_size
                    )));
                }
                if x.segment_ids[i] > 1 {
                    return Err(Error::InvalidInput(format!("segment id {}", x.segment_ids[i])));
                }
                x.boxes[i].validate()?;
                b.token_ids.push(id);
                b.segment_ids.push(x.segment_ids[i]);
                b.attention.push(x.attention_mask[i]);
                for (col, v) in b.coords.iter_mut().zip(x.boxes[i].coords()) {
                    col.push(v as usize);
                }
            }
            if config.image_patches > 0 {
                if x.patches.len() != config.image_patches {
                    return Err(Error::LengthMismatch {
                        what: "image patches",
                        left: config.image_patches,
                        right: x.patches.len(),
                    });
                }
                b.patches.extend_from_slice(&x.patches);
            }
        }
        if let Some(s) = (0..b.size).find(|&s| !b.attention[s * seq..(s + 1) * seq].iter().any(|&a| a)) {
            return Err(Error::InvalidInput(format!("sequence {s} has no attended positions")));
        }
        Ok(b)
    }

    pub fn rows(&self) -> usize {
        self.size * self.seq
    }

    /// Same batch with token ids replaced (layout, segments and attention kept).
    pub fn with_token_ids(&self, token_ids: Vec<usize>) -> Result<Self> {
        if token_ids.len() != self.token_ids.len() {
            return Err(Error::LengthMismatch {
                what: "token ids",
                left: self.token_ids.len(),
                right: token_ids.len(),
            });
        }
        Ok(Self {
            token_ids,
            ..self.clone()
        })
    }

    /// Flat row index of `(sequence, position)`.
    pub fn row(&self, sequence: usize, position: usize) -> usize {
        sequence * self.seq + position
    }
}

/// Hidden states on a graph: `[size * seq, hidden]`.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub hidden: Var,
    pub size: usize,
    pub seq: usize,
}

/// Materialized hidden states `size × seq × hidden`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub hidden: Tensor<f32>,
}

fn dense<T: Scalar>(g: &mut Graph<T>, p: &Bound, x: Var, w: &str, b: &str) -> Result<Var> {
    let h = g.matmul(x, p.var(w)?)?;
    g.add_row(h, p.var(b)?)
}

/// Runs the encoder on `batch`, with parameters already bound to `g`.
pub fn forward<T: Scalar>(g: &mut Graph<T>, p: &Bound, config: &ModelConfig, batch: &Batch) -> Result<Encoded> {
    if batch.seq > config.max_len {
        return Err(Error::SequenceTooLong {
            len: batch.seq,
            max: config.max_len,
        });
    }
    let positions: Vec<usize> = (0..batch.size).flat_map(|_| 0..batch.seq).collect();
    let mut terms = vec![
        g.embedding(p.var("emb.token")?, &batch.token_ids)?,
        g.embedding(p.var("emb.position")?, &positions)?,
        g.embedding(p.var("emb.segment")?, &batch.segment_ids)?,
    ];
    for (f, ids) in LAYOUT_FIELDS.iter().zip(&batch.coords) {
        terms.push(g.embedding(p.var(&format!("emb.layout.{f}"))?, ids)?);
    }
    if config.image_patches > 0 {
        let patches = Tensor::new(
            vec![batch.size, config.image_patches],
            batch.patches.iter().map(|&v| T::of(f64::from(v))).collect(),
        )?;
        let patches = g.leaf(patches);
        let summary = dense(g, p, patches, "img.proj", "img.bias")?;
        let gate = g.tanh(p.var("img.gate")?);
        let gated = g.mul_row(summary, gate)?;
        terms.push(g.broadcast_rows(gated, batch.seq)?);
    }
    let mut x = g.add_all(&terms)?;

    for l in 0..config.layers {
        let n = |s: &str| format!("block{l}.{s}");
        let h = g.layer_norm(x, p.var(&n("ln1.gamma"))?, p.var(&n("ln1.beta"))?, LN_EPS)?;
        let q = dense(g, p, h, &n("attn.wq"), &n("attn.bq"))?;
        let k = dense(g, p, h, &n("attn.wk"), &n("attn.bk"))?;
        let v = dense(g, p, h, &n("attn.wv"), &n("attn.bv"))?;
        let a = g.attention(q, k, v, &batch.attention, batch.size, batch.seq, config.heads)?;
        let a = dense(g, p, a, &n("attn.wo"), &n("attn.bo"))?;
        x = g.add(x, a)?;
        let h = g.layer_norm(x, p.var(&n("ln2.gamma"))?, p.var(&n("ln2.beta"))?, LN_EPS)?;
        let h = dense(g, p, h, &n("ffn.w1"), &n("ffn.b1"))?;
        let h = g.gelu(h);
        let h = dense(g, p, h, &n("ffn.w2"), &n("ffn.b2"))?;
        x = g.add(x, h)?;
    }
    let hidden = g.layer_norm(x, p.var("final.gamma")?, p.var("final.beta")?, LN_EPS)?;
    Ok(Encoded {
        hidden,
        size: batch.size,
        seq: batch.seq,
    })
}

/// Vocabulary logits at the given flat rows → `[rows.len(), V]`.
pub fn mvlm_logits<T: Scalar>(g: &mut Graph<T>, p: &Bound, enc: Encoded, rows: &[usize]) -> Result<Var> {
    let h = g.gather_rows(enc.hidden, rows)?;
    dense(g, p, h, "head.mvlm.w", "head.mvlm.b")
}

/// Class logits for every position → `[size * seq, C]`.
pub fn class_logits<T: Scalar>(g: &mut Graph<T>, p: &Bound, enc: Encoded) -> Result<Var> {
    dense(g, p, enc.hidden, "head.class.w", "head.class.b")
}

/// Start and end logits → two `[size, seq]` nodes. Positions with
/// `allowed == false` get a large negative offset.
pub fn qa_logits<T: Scalar>(g: &mut Graph<T>, p: &Bound, enc: Encoded, allowed: &[bool]) -> Result<(Var, Var)> {
    if allowed.len() != enc.size * enc.seq {
        return Err(Error::LengthMismatch {
            what: "qa position mask",
            left: enc.size * enc.seq,
            right: allowed.len(),
        });
    }
    let both = dense(g, p, enc.hidden, "head.qa.w", "head.qa.b")?;
    let offsets: Vec<f64> = allowed.iter().map(|&a| if a { 0.0 } else { MASK_LOGIT }).collect();
    let offsets = g.leaf(Tensor::from_f64(&[enc.size, enc.seq], &offsets)?);
    let mut out = [both; 2];
    for (col, slot) in out.iter_mut().enumerate() {
        let c = g.column(both, col)?;
        let c = g.reshape(c, &[enc.size, enc.seq])?;
        *slot = g.add(c, offsets)?;
    }
    Ok((out[0], out[1]))
}

/// Positions a QA answer may occupy: attended, segment 1, not `[CLS]`/`[SEP]`/`[PAD]`.
pub fn qa_allowed(batch: &Batch, special: &crate::docdata::SpecialIds) -> Vec<bool> {
    (0..batch.rows())
        .map(|i| batch.attention[i] && batch.segment_ids[i] == 1 && !special.is_structural(batch.token_ids[i]))
        .collect()
}

/// Hidden states for `inputs` (no trimming), as a dense tensor.
pub fn encode(params: &ParamSet<f32>, config: &ModelConfig, inputs: &[&ModelInput]) -> Result<EncoderOutput> {
    let batch = Batch::new(inputs, config, false)?;
    let mut g = Graph::new();
    let p = bind(&mut g, params);
    let enc = forward(&mut g, &p, config, &batch)?;
    let hidden = g
        .value(enc.hidden)
        .clone()
        .reshape(&[batch.size, batch.seq, config.hidden])?;
    Ok(EncoderOutput { hidden })
}

/// Row-wise softmax of a logits matrix, computed in f64.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<Vec<f64>> {
    let cols = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(cols.max(1))
        .map(|r| crate::numerics::softmax(&r.iter().map(|v| v.as_f64()).collect::<Vec<_>>()))
        .collect()
}

/// Per-position class probabilities for each input (trimmed; one vector per
/// attended position).
pub fn predict_classes(
    params: &ParamSet<f32>,
    config: &ModelConfig,
    inputs: &[&ModelInput],
) -> Result<Vec<Vec<Vec<f64>>>> {
    let batch = Batch::new(inputs, config, true)?;
    let mut g = Graph::new();
    let p = bind(&mut g, params);
    let enc = forward(&mut g, &p, config, &batch)?;
    let logits = class_logits(&mut g, &p, enc)?;
    let probs = softmax_rows(g.value(logits));
    Ok((0..batch.size)
        .map(|s| probs[s * batch.seq..s * batch.seq + inputs[s].content_len()].to_vec())
        .collect())
}

/// Start and end position distributions per input (over the trimmed length).
pub fn predict_spans(
    params: &ParamSet<f32>,
    config: &ModelConfig,
    special: &crate::docdata::SpecialIds,
    inputs: &[&ModelInput],
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let batch = Batch::new(inputs, config, true)?;
    let mut g = Graph::new();
    let p = bind(&mut g, params);
    let enc = forward(&mut g, &p, config, &batch)?;
    let allowed = qa_allowed(&batch, special);
    let (s, e) = qa_logits(&mut g, &p, enc, &allowed)?;
    let (s, e) = (softmax_rows(g.value(s)), softmax_rows(g.value(e)));
    Ok(s.into_iter().zip(e).collect())
}
