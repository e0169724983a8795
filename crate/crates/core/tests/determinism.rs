mod common;

use civic_lens::baselines::{BiLstmAtt, BiLstmAttConfig};
use civic_lens::corpus::SyntheticConfig;
use civic_lens::hiernet::{train_hierarchical, FusionKind, HierConfig, TrainingMode};
use civic_lens::nn::ParamSet;
use civic_lens::trainer::{train_with_early_stopping, ModelKind, TrainConfig, SCRATCH_ENCODER_LR};
use common::Prepared;

fn bits(ps: &ParamSet) -> Vec<u64> {
    ps.values()
        .iter()
        .flat_map(|m| m.data.iter().map(|v| v.to_bits()))
        .collect()
}

fn small() -> Prepared {
    Prepared::new(
        &SyntheticConfig {
            n_users: 40,
            posts_per_user: 12,
            noise_vocab_size: 200,
            ..Default::default()
        },
        5,
    )
}

#[test]
fn bilstm_runs_are_bitwise_identical() {
    let data = small();
    let (train, valid) = (data.train_ids(), data.valid_ids());
    let tc = TrainConfig {
        max_epochs: 3,
        patience: 2,
        ..TrainConfig::for_kind(ModelKind::BilstmAtt)
    };
    let run = || {
        let mut cfg = BiLstmAttConfig::new(data.vocab.len());
        cfg.embed_dim = 12;
        cfg.hidden_units = 8;
        let mut m = BiLstmAtt::new(cfg, 9).unwrap();
        let outcome = train_with_early_stopping(&mut m, &train, &valid, &tc, 9).unwrap();
        (bits(&m.params), outcome)
    };
    let (a, oa) = run();
    let (b, ob) = run();
    assert_eq!(a, b);
    assert_eq!(oa, ob);
}

#[test]
fn hierarchical_runs_are_bitwise_identical() {
    let data = small();
    let (train, valid) = (data.train_ids(), data.valid_ids());
    let mut cfg = HierConfig::tiny(data.vocab.len(), FusionKind::LstmAttention);
    cfg.mode = TrainingMode::TwoStage;
    let tc = TrainConfig {
        learning_rate: SCRATCH_ENCODER_LR,
        max_epochs: 2,
        patience: 1,
        ..TrainConfig::for_kind(ModelKind::HierTransformer)
    };
    let (a, ra) = train_hierarchical(&cfg, &train, &valid, &tc, 4).unwrap();
    let (b, rb) = train_hierarchical(&cfg, &train, &valid, &tc, 4).unwrap();
    assert_eq!(bits(&a.params), bits(&b.params));
    assert_eq!(ra, rb);
    let (c, _) = train_hierarchical(&cfg, &train, &valid, &tc, 5).unwrap();
    assert_ne!(bits(&a.params), bits(&c.params));
}
