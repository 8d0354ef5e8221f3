use super::*;
use crate::docmodel::{init_params, ModelConfig};
use crate::error::Error;

fn tiny() -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        hidden: 8,
        layers: 1,
        heads: 2,
        max_len: 10,
        image_patches: 4,
        ..Default::default()
    }
}

fn vocab() -> Vec<String> {
    [
        "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "a", "b", "c", "d", "e", "f", "g",
    ]
    .map(String::from)
    .to_vec()
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut params = init_params(&tiny(), 3).unwrap();
    params.get_mut("emb.token").unwrap().data_mut()[0] = f32::MIN_POSITIVE / 4.0;
    params.get_mut("emb.token").unwrap().data_mut()[1] = -0.0;
    let ckpt = Checkpoint::new(tiny(), vocab(), params.clone());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    for ((na, a), (nb, b)) in params.iter().zip(back.params.iter()) {
        assert_eq!(na, nb);
        let bits = |t: &crate::numerics::Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());
    assert_eq!(&std::fs::read(&path).unwrap()[..4], b"DTTA");
}

#[test]
fn checkpoint_rejects_mismatch_and_corruption() {
    let ckpt = Checkpoint::new(tiny(), vocab(), init_params(&tiny(), 1).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ckpt.save(&path).unwrap();
    let other = ModelConfig { hidden: 16, ..tiny() };
    assert!(matches!(
        Checkpoint::load_expecting(&path, &other),
        Err(Error::Checkpoint(_))
    ));
    assert!(Checkpoint::load_expecting(&path, &tiny()).is_ok());

    let bytes = ckpt.to_bytes().unwrap();
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
        Err(Error::Checkpoint(_))
    ));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(matches!(Checkpoint::from_bytes(&longer), Err(Error::Checkpoint(_))));
    // tensors that disagree with the stored config
    let mut params = init_params(&tiny(), 1).unwrap();
    params.insert("emb.token", crate::numerics::Tensor::zeros(&[3, 8]));
    let wrong = Checkpoint::new(tiny(), vocab(), params).to_bytes().unwrap();
    assert!(matches!(Checkpoint::from_bytes(&wrong), Err(Error::Checkpoint(_))));
}

#[test]
fn config_toml_round_trip() {
    let cfg = RunConfig::default();
    let text = cfg.to_toml().unwrap();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
    assert!(matches!(RunConfig::from_toml("bogus = 1"), Err(Error::Config(_))));
}

#[test]
fn config_hash_ignores_field_order() {
    let a = RunConfig::from_toml("seed = 3\ntask = \"kv\"\n[adapt]\ngamma = 2.0\nlr = 1e-5\n").unwrap();
    let b = RunConfig::from_toml("task = \"kv\"\nseed = 3\n[adapt]\nlr = 1e-5\ngamma = 2.0\n").unwrap();
    assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
    let c = RunConfig::from_toml("task = \"kv\"\nseed = 4\n[adapt]\nlr = 1e-5\ngamma = 2.0\n").unwrap();
    assert_ne!(config_hash(&a).unwrap(), config_hash(&c).unwrap());
    assert_eq!(config_hash(&a).unwrap().len(), 64);
}

#[test]
fn config_requires_exactly_one_existing_data_source() {
    let mut cfg = RunConfig::default();
    cfg.data.ingest = Some(IngestData {
        dir: "/nonexistent".into(),
        manifests: "/nonexistent".into(),
    });
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    cfg.data.synthetic = None;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    cfg.data.ingest = None;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut sq = RunConfig::default();
    sq.model.image_patches = 5;
    assert!(sq.validate().is_err());
}

#[test]
fn span_decoding_respects_order_and_document_tokens() {
    let wi = [None, None, Some(0), Some(1), Some(2), None];
    let start = [0.9, 0.0, 0.1, 0.0, 0.7, 0.0];
    let end = [0.9, 0.0, 0.0, 0.6, 0.05, 0.3];
    // CLS and the final SEP are never chosen; end may not precede start
    let (s, e, p) = decode_span(&wi, &start, &end).unwrap();
    assert_eq!((s, e), (2, 3));
    assert!((p - 0.06).abs() < 1e-12);
    assert!(decode_span(&[None, None], &[1.0, 0.0], &[1.0, 0.0]).is_none());
}

#[test]
fn results_record_round_trips_with_stable_order() {
    let cfg = RunConfig::default();
    let rec = ResultsRecord::new("adapt", "doctta", &cfg).unwrap();
    let text = rec.to_json().unwrap();
    assert_eq!(ResultsRecord::from_json(&text).unwrap(), rec);
    let keys: Vec<&str> = [
        "\"run_id\"",
        "\"command\"",
        "\"method\"",
        "\"task\"",
        "\"seed\"",
        "\"config_hash\"",
    ]
    .into_iter()
    .collect();
    let pos: Vec<usize> = keys.iter().map(|k| text.find(k).unwrap()).collect();
    assert!(pos.windows(2).all(|w| w[0] < w[1]));
}
