use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::docdata::{
    generate_synthetic, LabelScheme, ModelInput, SpecialIds, SyntheticDomainSpec, TokenizedDoc, Tokenizer, Vocab,
};
use crate::docmodel::{init_params, predict_classes, ModelConfig};
use crate::numerics::{argmax, ParamSet};
use crate::Error;

struct Fixture {
    model: ModelConfig,
    special: SpecialIds,
    docs: Vec<TokenizedDoc>,
    params: ParamSet<f32>,
}

impl Fixture {
    fn inputs(&self) -> Vec<ModelInput> {
        self.docs.iter().map(|d| d.input.clone()).collect()
    }
}

fn fixture() -> Fixture {
    let spec = SyntheticDomainSpec {
        num_keys: 4,
        class_balance: crate::docdata::ClassBalance {
            header_lines: 1,
            filler_lines: 1,
        },
        ..Default::default()
    };
    let docs = generate_synthetic(&spec, 6, 1).unwrap();
    let vocab = Vocab::build(docs.iter().flat_map(|d| d.words.iter().map(|w| w.text.as_str())), 200).unwrap();
    let model = ModelConfig {
        vocab_size: vocab.len(),
        hidden: 16,
        layers: 1,
        heads: 2,
        max_len: 48,
        ..Default::default()
    };
    let special = vocab.special();
    let tok = Tokenizer::new(vocab, 48).unwrap();
    let scheme = LabelScheme::funsd();
    let docs = docs.iter().map(|d| tok.tokenize(d, &scheme)).collect();
    let params = init_params(&model, 3).unwrap();
    Fixture {
        model,
        special,
        docs,
        params,
    }
}

fn cfg() -> AdaptConfig {
    AdaptConfig {
        epochs: 2,
        lr: 1e-3,
        batch_size: 3,
        seed: 7,
        ..Default::default()
    }
}

#[test]
fn gating_examples() {
    let mut c = AdaptConfig::default();
    let onehot = vec![vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]];
    let m = select_pseudo_labels(&onehot, &c);
    assert!(m.accept[0]);
    assert_eq!((m.labels[0], m.entropy[0]), (1, 0.0));

    let uniform = vec![vec![1.0 / 7.0; 7]];
    c.gamma = 1.5;
    assert!(!select_pseudo_labels(&uniform, &c).accept[0]);
    c.gamma = 2.0;
    assert!(select_pseudo_labels(&uniform, &c).accept[0]);

    let row = vec![vec![0.7, 0.2, 0.1]];
    c.gamma = 1.0;
    let m = select_pseudo_labels(&row, &c);
    assert!(m.accept[0]);
    assert!((m.entropy[0] - 0.801_818_3).abs() < 1e-6);
    c.selection = Selection::Confidence;
    assert!(!select_pseudo_labels(&row, &c).accept[0]);
    c.selection = Selection::None;
    assert!(select_pseudo_labels(&uniform, &c).accept[0]);
}

#[test]
fn normalized_entropy_uses_row_support() {
    let c = AdaptConfig {
        normalize_entropy: true,
        gamma: 0.99,
        ..Default::default()
    };
    let uniform = vec![vec![0.25; 4]];
    assert!(!select_pseudo_labels(&uniform, &c).accept[0]);
    let peaked = vec![vec![0.97, 0.01, 0.01, 0.01]];
    assert!(select_pseudo_labels(&peaked, &c).accept[0]);
}

#[test]
fn gating_is_monotone_in_gamma() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let rows: Vec<Vec<f64>> = (0..500)
        .map(|_| {
            let raw: Vec<f64> = (0..7).map(|_| rng.gen::<f64>().powi(3)).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        })
        .collect();
    let grid = [0.0, 0.5, 1.0, 1.5, 2.0];
    let masks: Vec<_> = grid
        .iter()
        .map(|&gamma| {
            select_pseudo_labels(
                &rows,
                &AdaptConfig {
                    gamma,
                    ..Default::default()
                },
            )
        })
        .collect();
    for w in masks.windows(2) {
        for (i, row) in rows.iter().enumerate() {
            assert!(!w[0].accept[i] || w[1].accept[i]);
            assert_eq!(w[0].labels[i], argmax(row));
        }
    }
}

#[test]
fn span_gate_uses_mean_entropy() {
    let c = AdaptConfig {
        gamma: 0.6,
        ..Default::default()
    };
    let sharp = vec![vec![1.0, 0.0]];
    let flat = vec![vec![0.5, 0.5]];
    let (s, e) = select_span_pseudo_labels(&sharp, &flat, &[2], &c);
    assert!(s.accept[0] && e.accept[0]);
    let c = AdaptConfig { gamma: 0.3, ..c };
    let (s, e) = select_span_pseudo_labels(&sharp, &flat, &[2], &c);
    assert!(!s.accept[0] && !e.accept[0]);
}

#[test]
fn zero_epochs_return_source_params() {
    let f = fixture();
    let c = AdaptConfig { epochs: 0, ..cfg() };
    let t = f.inputs();
    let (p, log) = run_doctta(&f.params, &f.model, f.special, &t, &c, Hooks::default()).unwrap();
    assert_eq!(p, f.params);
    assert!(log.epochs.is_empty());
    let (p, _) = run_tent(&f.params, &f.model, f.special, &t, &c, Hooks::default()).unwrap();
    assert_eq!(p, f.params);
    let (p, _) = run_docuda(&f.params, &f.model, f.special, &f.docs, &t, &c, Hooks::default()).unwrap();
    assert_eq!(p, f.params);
}

#[test]
fn empty_target_and_unlabeled_source_are_errors() {
    let f = fixture();
    assert!(matches!(
        run_doctta(&f.params, &f.model, f.special, &[], &cfg(), Hooks::default()),
        Err(Error::EmptyCorpus)
    ));
    let mut unlabeled = f.docs.clone();
    for d in &mut unlabeled {
        d.label_ids.fill(crate::docdata::IGNORE_INDEX);
    }
    assert!(matches!(
        run_docuda(
            &f.params,
            &f.model,
            f.special,
            &unlabeled,
            &f.inputs(),
            &cfg(),
            Hooks::default()
        ),
        Err(Error::MissingLabels(_))
    ));
}

#[test]
fn same_seed_same_log() {
    let f = fixture();
    let t = f.inputs();
    let a = run_doctta(&f.params, &f.model, f.special, &t, &cfg(), Hooks::default()).unwrap();
    let b = run_doctta(&f.params, &f.model, f.special, &t, &cfg(), Hooks::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.1.epochs.len(), 2);
    assert!(a.1.epochs.iter().all(|e| e.mvlm > 0.0 && e.steps == 2));
}

#[test]
fn pseudo_labels_come_from_current_params() {
    let f = fixture();
    let t = f.inputs();
    let mut versions = Vec::new();
    let mut checked = 0;
    let model = f.model.clone();
    let special = f.special;
    let mut observer = |e: &StepEvent| {
        versions.push(e.version);
        let probs = predict_classes(e.params, &model, e.inputs).unwrap();
        let mut expected = Vec::new();
        for (x, rows) in e.inputs.iter().zip(&probs) {
            for (pos, row) in rows.iter().enumerate() {
                if !special.is_structural(x.token_ids[pos]) {
                    expected.push(argmax(row));
                }
            }
        }
        assert_eq!(expected, e.acceptance.labels);
        checked += 1;
    };
    let hooks = Hooks {
        monitor: None,
        observer: Some(&mut observer),
    };
    run_doctta(&f.params, &f.model, f.special, &t, &cfg(), hooks).unwrap();
    assert_eq!(checked, 4);
    assert_eq!(versions, [0, 1, 2, 3]);
}

#[test]
fn mvlm_only_leaves_class_head_alone() {
    let f = fixture();
    let c = AdaptConfig {
        losses: LossToggles {
            mvlm: true,
            ce: false,
            div: false,
        },
        ..cfg()
    };
    let (p, _) = run_doctta(&f.params, &f.model, f.special, &f.inputs(), &c, Hooks::default()).unwrap();
    assert_eq!(p.get("head.class.b").unwrap(), f.params.get("head.class.b").unwrap());
    assert_ne!(p.get("emb.token").unwrap(), f.params.get("emb.token").unwrap());
}

#[test]
fn tent_touches_only_norms_and_lowers_entropy() {
    let f = fixture();
    let t = f.inputs();
    let refs: Vec<&ModelInput> = t.iter().collect();
    let mean_entropy = |p: &ParamSet<f32>| {
        let probs = predict_classes(p, &f.model, &refs).unwrap();
        let rows: Vec<&Vec<f64>> = probs.iter().flatten().collect();
        rows.iter().map(|r| crate::numerics::entropy(r)).sum::<f64>() / rows.len() as f64
    };
    let c = AdaptConfig {
        epochs: 3,
        lr: 1e-2,
        ..cfg()
    };
    let (p, _) = run_tent(&f.params, &f.model, f.special, &t, &c, Hooks::default()).unwrap();
    for (name, v) in p.iter() {
        if !(name.ends_with(".gamma") || name.ends_with(".beta")) {
            assert_eq!(v, f.params.get(name).unwrap(), "{name}");
        }
    }
    assert!(mean_entropy(&p) < mean_entropy(&f.params));
}

#[test]
fn supervised_training_and_pretraining_reduce_loss() {
    let f = fixture();
    let c = TrainConfig {
        epochs: 8,
        lr: 3e-3,
        batch_size: 3,
        ..Default::default()
    };
    let (_, log) = train_supervised(&f.params, &f.model, f.special, &f.docs, &c, None, "").unwrap();
    assert!(log.losses.last().unwrap() < &(log.losses[0] * 0.7), "{:?}", log.losses);

    let pc = PretrainConfig {
        epochs: 8,
        lr: 3e-3,
        batch_size: 3,
        mask_rate: 0.3,
        ..Default::default()
    };
    let (_, losses) = pretrain_mvlm(&f.params, &f.model, f.special, &f.inputs(), &pc).unwrap();
    assert!(losses.last().unwrap() < &losses[0], "{losses:?}");
}

#[test]
fn selection_keeps_best_epoch() {
    let f = fixture();
    let c = TrainConfig {
        epochs: 3,
        lr: 1e-3,
        batch_size: 3,
        ..Default::default()
    };
    // Score that prefers the untouched parameters.
    let init = f.params.clone();
    let monitor = move |p: &ParamSet<f32>| -> crate::Result<std::collections::BTreeMap<String, f64>> {
        let same = if *p == init { 1.0 } else { 0.0 };
        Ok([("score".to_string(), same)].into())
    };
    let (p, log) = train_supervised(&f.params, &f.model, f.special, &f.docs, &c, Some(&monitor), "score").unwrap();
    assert_eq!(log.best_epoch, 0);
    assert_eq!(p, f.params);
    assert_eq!(log.selection.len(), 4);
}
