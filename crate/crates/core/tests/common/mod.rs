#![allow(dead_code)]

use doctta::adapt::{select_pseudo_labels, select_span_pseudo_labels, AdaptConfig};
use doctta::docdata::{LayoutBox, ModelInput, SpecialIds};
use doctta::docmodel::{
    class_logits, forward, init_params, mvlm_logits, qa_allowed, qa_logits, softmax_rows, Batch, ModelConfig,
};
use doctta::numerics::{value_and_grad, Bound, Graph, ParamSet, Var};
use doctta::objectives::{
    diversity_loss, doctta_total, docuda_total, mask_packed, mvlm_loss, pseudo_ce_loss, qa_diversity_loss,
    qa_pseudo_ce_loss, qa_source_ce_loss, qa_tent_entropy_loss, source_ce_loss, tent_entropy_loss, AcceptanceMask,
    MaskPlan, SpanLogits,
};
use doctta::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SPECIAL: SpecialIds = SpecialIds {
    pad: 0,
    unk: 1,
    cls: 2,
    sep: 3,
    mask: 4,
};

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 24,
        hidden: 8,
        layers: 2,
        heads: 2,
        max_len: 12,
        num_classes: 7,
        image_patches: 4,
        ffn_mult: 2,
        ..Default::default()
    }
}

fn random_box(rng: &mut ChaCha8Rng) -> LayoutBox {
    let x = rng.gen_range(0..900);
    let y = rng.gen_range(0..950);
    LayoutBox::new(x, x + rng.gen_range(5..100), y, y + rng.gen_range(5..50)).unwrap()
}

/// `[CLS] words [SEP] [PAD]…` (or `[CLS] q [SEP] doc [SEP]` when `qa`) with
/// random ids, boxes and patches.
pub fn random_inputs(seed: u64, qa: bool) -> Vec<ModelInput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_config();
    (0..3)
        .map(|i| {
            let content = 5 + (i + seed as usize) % 4;
            let mut ids = vec![SPECIAL.cls];
            let mut segs = vec![0];
            let question = if qa { 2 } else { 0 };
            for _ in 0..question {
                ids.push(rng.gen_range(5..cfg.vocab_size));
                segs.push(0);
            }
            if qa {
                ids.push(SPECIAL.sep);
                segs.push(0);
            }
            for _ in 0..content {
                ids.push(rng.gen_range(5..cfg.vocab_size));
                segs.push(usize::from(qa));
            }
            ids.push(SPECIAL.sep);
            segs.push(usize::from(qa));
            let n = ids.len();
            let mut boxes: Vec<LayoutBox> = (0..n)
                .map(|j| {
                    if j == 0 || ids[j] == SPECIAL.sep || (qa && segs[j] == 0) {
                        LayoutBox::default()
                    } else {
                        random_box(&mut rng)
                    }
                })
                .collect();
            let mut attention = vec![true; n];
            ids.resize(cfg.max_len, SPECIAL.pad);
            segs.resize(cfg.max_len, 0);
            boxes.resize(cfg.max_len, LayoutBox::default());
            attention.resize(cfg.max_len, false);
            ModelInput {
                token_ids: ids,
                boxes,
                segment_ids: segs,
                attention_mask: attention,
                patches: (0..cfg.image_patches).map(|_| rng.gen_range(0.0..1.0)).collect(),
            }
        })
        .collect()
}

pub fn unit_rows(batch: &Batch) -> Vec<usize> {
    (0..batch.rows())
        .filter(|&i| batch.attention[i] && !SPECIAL.is_structural(batch.token_ids[i]))
        .collect()
}

/// Labels per row of the batch; ignored on non-unit rows.
pub fn random_labels(batch: &Batch, classes: usize, seed: u64) -> Vec<i64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let units = unit_rows(batch);
    (0..batch.rows())
        .map(|r| {
            if units.contains(&r) {
                rng.gen_range(0..classes) as i64
            } else {
                -100
            }
        })
        .collect()
}

/// Everything a loss needs besides the parameters, fixed before
/// differentiation.
pub struct Fixture {
    pub config: ModelConfig,
    pub batch: Batch,
    pub masked: Batch,
    pub plan: MaskPlan,
    pub units: Vec<usize>,
    pub acceptance: AcceptanceMask,
    pub labels: Vec<i64>,
    pub qa_batch: Batch,
    pub qa_allowed: Vec<bool>,
    pub answers: Vec<(usize, usize)>,
    pub span_acceptance: (AcceptanceMask, AcceptanceMask),
}

/// Builds a fixture; pseudo-labels come from the model at `params` with γ at
/// the median unit entropy so that both accepted and rejected units occur.
pub fn fixture(params: &ParamSet<f64>, seed: u64) -> Result<Fixture> {
    let config = tiny_config();
    let inputs = random_inputs(seed, false);
    let refs: Vec<&ModelInput> = inputs.iter().collect();
    let batch = Batch::new(&refs, &config, true)?;
    let units = unit_rows(&batch);

    let mut ids = batch.token_ids.clone();
    let mut plan = MaskPlan::default();
    for attempt in 0..100 {
        ids = batch.token_ids.clone();
        plan = mask_packed(
            &mut ids,
            &batch.attention,
            batch.seq,
            SPECIAL,
            config.vocab_size,
            0.3,
            0.8,
            seed * 131 + attempt,
        );
        if plan.len() >= 2 {
            break;
        }
    }
    let masked = batch.with_token_ids(ids)?;

    let mut g = Graph::<f64>::new();
    let p = doctta::numerics::bind(&mut g, params);
    let enc = forward(&mut g, &p, &config, &batch)?;
    let logits = class_logits(&mut g, &p, enc)?;
    let probs = softmax_rows(g.value(logits));
    let unit_probs: Vec<Vec<f64>> = units.iter().map(|&r| probs[r].clone()).collect();
    let mut ents: Vec<f64> = unit_probs.iter().map(|r| doctta::numerics::entropy(r)).collect();
    ents.sort_by(f64::total_cmp);
    let adapt = AdaptConfig {
        gamma: ents[ents.len() / 2],
        ..Default::default()
    };
    let acceptance = select_pseudo_labels(&unit_probs, &adapt);
    let labels = random_labels(&batch, config.num_classes, seed + 7);

    let qa_inputs = random_inputs(seed + 1000, true);
    let qa_refs: Vec<&ModelInput> = qa_inputs.iter().collect();
    let qa_batch = Batch::new(&qa_refs, &config, true)?;
    let allowed = qa_allowed(&qa_batch, &SPECIAL);
    let answers: Vec<(usize, usize)> = (0..qa_batch.size)
        .map(|s| {
            let ok: Vec<usize> = (0..qa_batch.seq).filter(|&j| allowed[s * qa_batch.seq + j]).collect();
            (ok[0], ok[ok.len() / 2])
        })
        .collect();
    let mut g = Graph::<f64>::new();
    let p = doctta::numerics::bind(&mut g, params);
    let enc = forward(&mut g, &p, &config, &qa_batch)?;
    let (s, e) = qa_logits(&mut g, &p, enc, &allowed)?;
    let (sp, ep) = (softmax_rows(g.value(s)), softmax_rows(g.value(e)));
    let support: Vec<usize> = (0..qa_batch.size)
        .map(|s| (0..qa_batch.seq).filter(|&j| allowed[s * qa_batch.seq + j]).count())
        .collect();
    let mut span_ents: Vec<f64> = sp.iter().chain(&ep).map(|r| doctta::numerics::entropy(r)).collect();
    span_ents.sort_by(f64::total_cmp);
    let span_cfg = AdaptConfig {
        gamma: span_ents[span_ents.len() / 2],
        ..Default::default()
    };
    let span_acceptance = select_span_pseudo_labels(&sp, &ep, &support, &span_cfg);

    Ok(Fixture {
        config,
        batch,
        masked,
        plan,
        units,
        acceptance,
        labels,
        qa_batch,
        qa_allowed: allowed,
        answers,
        span_acceptance,
    })
}

pub const LOSSES: [&str; 11] = [
    "mvlm",
    "pseudo_ce",
    "diversity",
    "doctta_total",
    "source_ce",
    "docuda_total",
    "tent",
    "qa_source_ce",
    "qa_pseudo_ce",
    "qa_diversity",
    "qa_tent",
];

fn entity_logits(g: &mut Graph<f64>, p: &Bound, f: &Fixture) -> Result<Var> {
    let enc = forward(g, p, &f.config, &f.batch)?;
    class_logits(g, p, enc)
}

fn unit_logits(g: &mut Graph<f64>, p: &Bound, f: &Fixture) -> Result<Var> {
    let all = entity_logits(g, p, f)?;
    g.gather_rows(all, &f.units)
}

fn mvlm(g: &mut Graph<f64>, p: &Bound, f: &Fixture) -> Result<Var> {
    let enc = forward(g, p, &f.config, &f.masked)?;
    let logits = mvlm_logits(g, p, enc, &f.plan.rows(f.masked.seq))?;
    mvlm_loss(g, logits, &f.plan)
}

fn span(g: &mut Graph<f64>, p: &Bound, f: &Fixture) -> Result<SpanLogits> {
    let enc = forward(g, p, &f.config, &f.qa_batch)?;
    let (start, end) = qa_logits(g, p, enc, &f.qa_allowed)?;
    Ok(SpanLogits { start, end })
}

/// Builds loss `name` on the graph.
pub fn build_loss(name: &str, g: &mut Graph<f64>, p: &Bound, f: &Fixture) -> Result<Var> {
    match name {
        "mvlm" => mvlm(g, p, f),
        "pseudo_ce" => {
            let l = unit_logits(g, p, f)?;
            pseudo_ce_loss(g, l, &f.acceptance)
        }
        "diversity" => {
            let l = unit_logits(g, p, f)?;
            diversity_loss(g, l)
        }
        "doctta_total" => {
            let m = mvlm(g, p, f)?;
            let l = unit_logits(g, p, f)?;
            let ce = pseudo_ce_loss(g, l, &f.acceptance)?;
            let div = diversity_loss(g, l)?;
            doctta_total(g, m, ce, div)
        }
        "source_ce" => {
            let l = entity_logits(g, p, f)?;
            source_ce_loss(g, l, &f.labels)
        }
        "docuda_total" => {
            let m = mvlm(g, p, f)?;
            let l = unit_logits(g, p, f)?;
            let ce = pseudo_ce_loss(g, l, &f.acceptance)?;
            let div = diversity_loss(g, l)?;
            let src = entity_logits(g, p, f)?;
            let src = source_ce_loss(g, src, &f.labels)?;
            docuda_total(g, m, ce, div, src)
        }
        "tent" => {
            let l = unit_logits(g, p, f)?;
            tent_entropy_loss(g, l)
        }
        "qa_source_ce" => {
            let s = span(g, p, f)?;
            qa_source_ce_loss(g, s, &f.answers)
        }
        "qa_pseudo_ce" => {
            let s = span(g, p, f)?;
            qa_pseudo_ce_loss(g, s, &f.span_acceptance.0, &f.span_acceptance.1)
        }
        "qa_diversity" => {
            let s = span(g, p, f)?;
            qa_diversity_loss(g, s)
        }
        "qa_tent" => {
            let s = span(g, p, f)?;
            qa_tent_entropy_loss(g, s)
        }
        other => panic!("unknown loss {other}"),
    }
}

fn loss_value(params: &ParamSet<f64>, name: &str, f: &Fixture) -> f64 {
    value_and_grad(params, |g, p| build_loss(name, g, p, f)).unwrap().0
}

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖)` between analytic and central
/// finite-difference gradients over a coordinate sample: per tensor, its
/// largest-gradient entry and two random entries.
pub fn gradient_check(name: &str, seed: u64) -> Result<(f64, usize)> {
    let config = tiny_config();
    let params = init_params(&config, seed)?.cast::<f64>();
    let f = fixture(&params, seed)?;
    let (_, grads) = value_and_grad(&params, |g, p| build_loss(name, g, p, &f))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD0C);
    let h = 1e-5;
    let (mut diff, mut a_norm, mut n_norm, mut checked) = (0.0f64, 0.0f64, 0.0f64, 0usize);
    for (pname, gt) in grads.iter() {
        let data = gt.data();
        let top = (0..data.len())
            .max_by(|&a, &b| data[a].abs().total_cmp(&data[b].abs()))
            .unwrap_or(0);
        let mut coords = vec![top];
        for _ in 0..2 {
            coords.push(rng.gen_range(0..data.len()));
        }
        for &i in &coords {
            let mut plus = params.clone();
            plus.get_mut(pname)?.data_mut()[i] += h;
            let mut minus = params.clone();
            minus.get_mut(pname)?.data_mut()[i] -= h;
            let numeric = (loss_value(&plus, name, &f) - loss_value(&minus, name, &f)) / (2.0 * h);
            let analytic = data[i];
            diff += (analytic - numeric).powi(2);
            a_norm += analytic * analytic;
            n_norm += numeric * numeric;
            checked += 1;
        }
    }
    let denom = a_norm.sqrt().max(n_norm.sqrt());
    Ok((if denom == 0.0 { 0.0 } else { diff.sqrt() / denom }, checked))
}
