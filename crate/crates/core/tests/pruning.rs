mod common;

use imo::trainer;

#[test]
fn two_feature_mask_keeps_the_causal_channel() {
    let (q, acc) = common::two_feature_run(0, 0.1);
    assert_eq!(q, vec![1.0, 0.0]);
    assert_eq!(acc, 1.0);
}

#[test]
fn two_feature_training_is_deterministic() {
    let corpus = common::two_feature_corpus(5);
    let cfg = common::two_feature_config(5, 0.1);
    let a = trainer::train(common::two_feature_model(5), &corpus, &cfg, "x").unwrap();
    let b = trainer::train(common::two_feature_model(5), &corpus, &cfg, "x").unwrap();
    assert_eq!(a.model.checksum(), b.model.checksum());
    assert_eq!(a.rows, b.rows);
}

#[test]
fn backbone_stays_fixed_when_not_trained() {
    let corpus = common::two_feature_corpus(1);
    let model = common::two_feature_model(1);
    let emb = model.store.value(model.encoder.token_embedding).clone();
    let out = trainer::train(model, &corpus, &common::two_feature_config(1, 0.1), "x").unwrap();
    assert_eq!(out.model.store.value(out.model.encoder.token_embedding), &emb);
}
