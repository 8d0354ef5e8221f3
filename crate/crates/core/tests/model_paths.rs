mod common;

use common::{random_inputs, tiny_config, unit_rows, SPECIAL};
use doctta::adapt::{train_supervised, Task, TrainConfig};
use doctta::docdata::{ModelInput, TokenizedDoc};
use doctta::docmodel::{class_logits, forward, init_params, predict_spans, qa_allowed, Batch};
use doctta::numerics::value_and_grad;
use doctta::objectives::source_ce_loss;

#[test]
fn layout_embeddings_receive_gradient() {
    let config = tiny_config();
    let params = init_params(&config, 5).unwrap().cast::<f64>();
    let inputs = random_inputs(5, false);
    let refs: Vec<&ModelInput> = inputs.iter().collect();
    let batch = Batch::new(&refs, &config, true).unwrap();
    let labels = common::random_labels(&batch, config.num_classes, 9);
    assert!(!unit_rows(&batch).is_empty());
    let (_, grads) = value_and_grad(&params, |g, p| {
        let enc = forward(g, p, &config, &batch)?;
        let logits = class_logits(g, p, enc)?;
        source_ce_loss(g, logits, &labels)
    })
    .unwrap();
    let layout: Vec<_> = grads.iter().filter(|(n, _)| n.starts_with("emb.layout.")).collect();
    assert!(!layout.is_empty());
    for (name, g) in layout {
        let norm: f64 = g.data().iter().map(|v| v * v).sum();
        assert!(norm > 0.0, "{name} has zero gradient");
    }
}

#[test]
fn qa_training_recovers_fixed_spans() {
    let config = tiny_config();
    let inputs = random_inputs(21, true);
    let refs: Vec<&ModelInput> = inputs.iter().collect();
    let batch = Batch::new(&refs, &config, false).unwrap();
    let allowed = qa_allowed(&batch, &SPECIAL);
    let docs: Vec<TokenizedDoc> = inputs
        .iter()
        .enumerate()
        .map(|(i, input)| {
            let ok: Vec<usize> = (0..batch.seq).filter(|&j| allowed[i * batch.seq + j]).collect();
            let (s, e) = (ok[i % ok.len()], ok[(i + 2).min(ok.len() - 1)]);
            TokenizedDoc {
                doc_id: format!("d{i}"),
                input: input.clone(),
                label_ids: vec![-100; input.token_ids.len()],
                word_index: vec![None; input.token_ids.len()],
                answer: Some((s, e)),
            }
        })
        .collect();
    let cfg = TrainConfig {
        task: Task::Qa,
        epochs: 300,
        lr: 1e-2,
        weight_decay: 0.0,
        batch_size: 3,
        seed: 1,
    };
    let init = init_params(&config, 2).unwrap();
    let (params, log) = train_supervised(&init, &config, SPECIAL, &docs, &cfg, None, "").unwrap();
    assert!(log.losses.last().unwrap() < &0.1, "final loss {:?}", log.losses.last());
    let spans = predict_spans(&params, &config, &SPECIAL, &refs).unwrap();
    let argmax = |r: &[f64]| (0..r.len()).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap();
    for (doc, (s, e)) in docs.iter().zip(&spans) {
        assert_eq!((argmax(s), argmax(e)), doc.answer.unwrap(), "{}", doc.doc_id);
    }
}
