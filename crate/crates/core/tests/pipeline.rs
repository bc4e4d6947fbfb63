//! Small end-to-end runs through the public API: synthesize, train, save,
//! reload, fine-tune and score.

use artic::corpus::Split;
use artic::evaluation::{EvalReport, ReportLabels};
use artic::features::FeatureKind;
use artic::models::{AttentionConfig, BlstmConfig, ModelKind};
use artic::synth::{generate_corpus, SynthConfig, SyntheticCorpus};
use artic::training::{
    examples_for, fine_tune, predict, train, Architecture, Checkpoint, EpochRecord, Regime, TrainingConfig,
};

fn small_corpus() -> SyntheticCorpus {
    generate_corpus(&SynthConfig {
        n_subjects: 3,
        utterances_per_subject: 12,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn short(epochs: usize) -> TrainingConfig {
    TrainingConfig {
        epochs,
        batch_size: 4,
        learning_rate: Some(3e-3),
        ..TrainingConfig::default()
    }
}

#[test]
fn blstm_checkpoint_reloads_to_identical_predictions() {
    let sc = small_corpus();
    let arch = Architecture {
        blstm: BlstmConfig {
            input_dim: FeatureKind::Tphn.width(),
            hidden: 8,
            layers: 1,
        },
        ..Architecture::default()
    };
    let mut epochs = Vec::new();
    let out = train(&sc.corpus, FeatureKind::Tphn, ModelKind::Blstm, &arch, &short(3), None, &mut |r: &EpochRecord| {
        epochs.push(r.epoch)
    })
    .unwrap();
    assert_eq!(epochs.len(), out.log.len());
    assert!(out.log.iter().all(|r| r.valid_rmse.is_finite()));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    out.checkpoint.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.fingerprint, out.checkpoint.fingerprint);

    let test = examples_for(&sc.corpus, Split::Test, FeatureKind::Tphn, None, None).unwrap();
    for ex in &test {
        let a = predict(&out.checkpoint.model, ex, 400).unwrap();
        let b = predict(&back.model, ex, 400).unwrap();
        assert_eq!(a.predicted.data(), b.predicted.data());
        assert_eq!(a.predicted.rows(), ex.targets.rows());
    }

    let report = artic::training::evaluate_model(&back.model, &test, ReportLabels::default(), 400).unwrap();
    assert_eq!(report.sentences.len(), test.len());
    let again = EvalReport::from_json(&report.to_json().unwrap()).unwrap();
    assert_eq!(again.sentences.len(), report.sentences.len());
    assert!(report.to_csv().lines().count() > test.len());
}

#[test]
fn attention_model_fine_tunes_per_subject() {
    let sc = small_corpus();
    let arch = Architecture {
        attention: AttentionConfig {
            embedding_dim: 8,
            attention_dim: 8,
            location_filters: 4,
            prenet_dim: 8,
            decoder_dim: 16,
            decoder_layers: 1,
            postnet_channels: 8,
            postnet_layers: 2,
            reduction: 3,
            ..AttentionConfig::default()
        },
        ..Architecture::default()
    };
    let base = train(&sc.corpus, FeatureKind::Phn, ModelKind::Attention, &arch, &short(1), None, &mut |_| {}).unwrap();
    let subject = sc.corpus.subjects()[0].clone();
    let cfg = TrainingConfig {
        regime: Regime::FineTune,
        subject: Some(subject.clone()),
        learning_rate: Some(5e-4),
        ..short(2)
    };
    let tuned = fine_tune(&base.checkpoint, &sc.corpus, &subject, &cfg, None, &mut |_| {}).unwrap();
    assert!(tuned.valid_rmse.is_finite() && tuned.base_valid_rmse.is_finite());
    assert_eq!(tuned.checkpoint.training.regime, Regime::FineTune);

    let test = examples_for(&sc.corpus, Split::Test, FeatureKind::Phn, Some(&subject), None).unwrap();
    let p = predict(&tuned.checkpoint.model, &test[0], 60).unwrap();
    let alphas = p.alphas.expect("attention weights");
    assert!(p.predicted.rows() <= 60 && alphas.rows() == p.predicted.rows());
    for t in 0..alphas.rows() {
        assert!((alphas.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn mismatched_model_and_features_are_rejected() {
    let sc = small_corpus();
    let err = train(&sc.corpus, FeatureKind::Tphn, ModelKind::Attention, &Architecture::default(), &short(1), None, &mut |_| {});
    assert!(matches!(err, Err(artic::Error::Config(_))));
}
