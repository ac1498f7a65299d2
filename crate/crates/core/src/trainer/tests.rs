use super::*;
use crate::corpus::{CorpusSplits, TokenSequence};
use crate::model::{Checkpoint, ModelConfig, PositionalKind, TransformerLm};
use crate::objective::RegularizerKind;

fn tiny_model(dropout: f64) -> ModelConfig {
    ModelConfig {
        vocab_size: 10,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 16,
        dropout,
        init_seed: 0,
        positional: PositionalKind::Learned,
    }
}

fn fast(updates: u64, interval: u64) -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        warmup: 10,
        clip_norm: 1.0,
        max_updates: updates,
        eval_interval: interval,
        max_tokens: 64,
        ..TrainConfig::default()
    }
}

fn splits(train: Vec<TokenSequence>, dev: Vec<TokenSequence>) -> CorpusSplits<TokenSequence> {
    let test = dev.clone();
    CorpusSplits {
        indices: [(0..train.len()).collect(), vec![], vec![]],
        train,
        dev,
        test,
        seed: 0,
        ratios: [0.8, 0.1, 0.1],
    }
}

fn seq(body: &[u32]) -> TokenSequence {
    TokenSequence::from_body(body).unwrap()
}

fn mixed() -> CorpusSplits<TokenSequence> {
    let bodies: [&[u32]; 6] = [&[4, 5, 6], &[7, 8], &[4, 9, 9, 5], &[6], &[5, 4, 7, 8, 9], &[8, 8, 4]];
    let train = (0..24).map(|i| seq(bodies[i % 6])).collect();
    splits(train, vec![seq(&[4, 5, 6, 7]), seq(&[9, 8])])
}

fn record(update: u64, dev: f64) -> TrainRecord {
    TrainRecord {
        update,
        epoch: 0,
        lr: 1e-3,
        train_combined_per_token: 2.0,
        train_nll_per_token: 2.0,
        dev_nll_per_token: dev,
        dev_reg_per_sequence: 0.25,
        dev_combined_per_token: dev,
        skipped_updates: 0,
        checkpoint: Some(checkpoint_name(update)),
    }
}

#[test]
fn selection_takes_lowest_then_earliest() {
    let recs = |v: &[f64]| v.iter().enumerate().map(|(i, &d)| record(i as u64 + 1, d)).collect::<Vec<_>>();
    assert_eq!(select_best(&recs(&[3.0, 2.5, 2.7])), Some(1));
    assert_eq!(select_best(&recs(&[2.5, 2.5])), Some(0));
    assert_eq!(select_best(&recs(&[4.0, 3.0, 2.0, 1.0])), Some(3));
    assert_eq!(select_best(&[]), None);
}

#[test]
fn report_jsonl_round_trip() {
    let report = TrainReport {
        records: vec![record(10, 3.1), record(20, 2.9)],
        best: 1,
    };
    let text = report.to_jsonl();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().last().unwrap().starts_with(r#"{"kind":"best","record":1,"update":20"#));
    assert_eq!(TrainReport::from_jsonl(&text).unwrap(), report);
    assert!(TrainReport::from_jsonl(text.lines().next().unwrap()).is_err());
}

#[test]
fn config_validation_and_file_defaults() {
    assert!(TrainConfig { lr: 0.0, ..fast(1, 1) }.validate().is_err());
    assert!(TrainConfig { clip_norm: -1.0, ..fast(1, 1) }.validate().is_err());
    assert!(fast(0, 1).validate().is_err());
    let cfg: TrainConfig = toml::from_str("max_updates = 5\n[objective]\nregularizer = \"variance\"\nbeta = 0.02\n").unwrap();
    assert_eq!((cfg.max_updates, cfg.lr, cfg.objective.beta), (5, 3e-4, 0.02));
    assert!(toml::from_str::<TrainConfig>("learning_rate = 1.0\n").is_err());
}

#[test]
fn repeated_sequence_is_memorized() {
    let s = seq(&[4, 5, 6, 7, 8, 9]);
    let data = splits(vec![s.clone(); 8], vec![s]);
    let out = train(&fast(300, 100), &tiny_model(0.0), &data, None).unwrap();
    let best = out.report.best_record();
    assert!(best.dev_nll_per_token < 0.1, "{}", best.dev_nll_per_token);
    assert_eq!(out.report.records.iter().map(|r| r.update).collect::<Vec<_>>(), [100, 200, 300]);
}

#[test]
fn zero_beta_equals_no_regularizer() {
    let data = mixed();
    let none = train(&fast(30, 10), &tiny_model(0.0), &data, None).unwrap();
    let mut cfg = fast(30, 10);
    cfg.objective.regularizer = RegularizerKind::Variance;
    cfg.objective.beta = 0.0;
    let zero = train(&cfg, &tiny_model(0.0), &data, None).unwrap();
    assert_eq!(none.final_model.params(), zero.final_model.params());
    for (a, b) in none.report.records.iter().zip(&zero.report.records) {
        assert_eq!(a.dev_nll_per_token.to_bits(), b.dev_nll_per_token.to_bits());
    }
    assert!(zero.report.records[0].dev_reg_per_sequence > 0.0);
}

#[test]
fn training_is_deterministic_and_selects_on_nll() {
    let data = mixed();
    let mut cfg = fast(40, 10);
    cfg.objective.regularizer = RegularizerKind::Variance;
    cfg.objective.beta = 0.05;
    let a = train(&cfg, &tiny_model(0.1), &data, None).unwrap();
    let b = train(&cfg, &tiny_model(0.1), &data, None).unwrap();
    assert_eq!(a.report.to_jsonl(), b.report.to_jsonl());
    assert_eq!(a.best_model.params(), b.best_model.params());
    assert_eq!(Some(a.report.best), select_best(&a.report.records));
    cfg.seeds.dropout += 1;
    let c = train(&cfg, &tiny_model(0.1), &data, None).unwrap();
    assert_ne!(a.report.to_jsonl(), c.report.to_jsonl());
}

#[test]
fn checkpoints_reproduce_recorded_dev_nll() {
    let data = mixed();
    let dir = tempfile::tempdir().unwrap();
    let sink = CheckpointSink {
        dir: dir.path(),
        vocab_hash: [7; 32],
    };
    let out = train(&fast(20, 10), &tiny_model(0.0), &data, Some(sink)).unwrap();
    assert_eq!(out.report.records.len(), 2);
    for r in &out.report.records {
        let ck = Checkpoint::load(&dir.path().join(r.checkpoint.as_ref().unwrap())).unwrap();
        assert_eq!(ck.vocab_hash, [7; 32]);
        let dev = crate::eval::evaluate(&ck.model, &data.dev, 64, false).unwrap();
        assert!((dev.nll_per_token - r.dev_nll_per_token).abs() < 1e-6);
    }
    let best = Checkpoint::load(&dir.path().join(out.report.best_record().checkpoint.as_ref().unwrap())).unwrap();
    assert_eq!(best.model.params(), out.best_model.params());
}

#[test]
fn wide_storage_trains_too() {
    let data = mixed();
    let cfg = TrainConfig {
        storage: crate::diffmath::StorageMode::F64,
        ..fast(10, 10)
    };
    let out = train(&cfg, &tiny_model(0.0), &data, None).unwrap();
    assert!(out.report.records[0].dev_nll_per_token < (10f64).ln() * 2.0);
}

#[test]
fn empty_splits_are_rejected() {
    let data = splits(vec![], vec![seq(&[4])]);
    assert!(train(&fast(1, 1), &tiny_model(0.0), &data, None).is_err());
}

#[test]
fn nested_subsets_are_prefixes() {
    let data = mixed();
    let total: usize = data.train.iter().map(TokenSequence::predicted_len).sum();
    let subs = nested_subsets(&data.train, &[10, 30, total], 5).unwrap();
    for w in subs.windows(2) {
        let mut rest = w[1].iter();
        assert!(w[0].iter().all(|s| rest.any(|t| t == s)));
    }
    for (s, need) in subs.iter().zip([10, 30, total]) {
        let n: usize = s.iter().map(TokenSequence::predicted_len).sum();
        assert!(n >= need && n < need + 6);
    }
    assert_eq!(subs[2], data.train);
    assert!(nested_subsets(&data.train, &[total + 1], 5).is_err());
}

#[test]
fn sweep_and_ablation_shapes() {
    let data = mixed();
    let base = fast(10, 10);
    let rows = sweep_beta(&base, &tiny_model(0.0), RegularizerKind::Variance, &[0.0, 0.03], &data).unwrap();
    assert_eq!(rows.len(), 2);
    let plain = train(&base, &tiny_model(0.0), &data, None).unwrap();
    assert_eq!(rows[0].dev_nll_per_token, plain.report.best_record().dev_nll_per_token);
    let csv = sweep_csv(&rows).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("beta,regularizer,best_update,dev_nll_per_token,test_ppl_seq_avg"));
    assert!(sweep_beta(&base, &tiny_model(0.0), RegularizerKind::Variance, &[], &data).is_err());

    let variants = vec![
        ObjectiveVariant {
            label: "baseline".into(),
            objective: ObjectiveConfig::baseline(),
        },
        ObjectiveVariant {
            label: "variance".into(),
            objective: ObjectiveConfig::regularized(RegularizerKind::Variance, 0.03),
        },
    ];
    let total: usize = data.train.iter().map(TokenSequence::predicted_len).sum();
    let table = size_ablation(&base, &tiny_model(0.0), &[30, total], &variants, &data, 1).unwrap();
    assert_eq!(table.len(), 4);
    assert_eq!(table[0].improvement, 0.0);
    assert_eq!(table[2].dev_nll_per_token, plain.report.best_record().dev_nll_per_token);
    assert_eq!(ablation_csv(&table).unwrap().lines().count(), 5);
}

#[test]
fn loaded_model_matches_in_memory_best() {
    let data = mixed();
    let out = train(&fast(10, 5), &tiny_model(0.0), &data, None).unwrap();
    let bytes = Checkpoint::new(out.best_model.clone(), [0; 32]).to_bytes().unwrap();
    let back: TransformerLm<f32> = Checkpoint::from_bytes(&bytes).unwrap().model;
    assert_eq!(back.params(), out.best_model.params());
}
