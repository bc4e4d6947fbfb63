//! Losses, optimization, the generic / subject-dependent training loop and
//! per-subject fine-tuning.

mod checkpoint;
mod data;
mod loss;
mod optim;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Split, NUM_CHANNELS};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_predictions, EvalReport, Prediction, ReportLabels};
use crate::features::{FeatureKind, MAX_LEN};
use crate::models::{
    update_running_stats, AttentionConfig, AttentionModel, BlstmConfig, BlstmModel, Ctx, Model, ModelKind,
};
use crate::numerics::{BatchStats, Gradients, ParameterStore, Tape, Var};
use crate::synth::derive_seed;

pub use checkpoint::{fingerprint, Checkpoint};
pub use data::{examples_for, make_example, utterance_features, AcousticFeatures, Example};
pub use loss::{masked_rmse_loss, stop_token_loss, STOP_POS_WEIGHT};
pub use optim::{clip_global_norm, Optimizer, OptimizerKind};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// One model per subject, trained on that subject alone.
    SubjectDependent,
    /// One model on all subjects pooled.
    #[default]
    Generic,
    /// A generic model adapted to one subject.
    FineTune,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Self::SubjectDependent => "subject_dependent",
            Self::Generic => "generic",
            Self::FineTune => "fine_tune",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "subject_dependent" => Ok(Self::SubjectDependent),
            "generic" => Ok(Self::Generic),
            "fine_tune" | "finetune" => Ok(Self::FineTune),
            other => Err(Error::config(format!("unknown regime {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub max_len: usize,
    /// Defaults to 1e-3 for the BLSTM and 1e-4 for the attention model.
    pub learning_rate: Option<f64>,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub regime: Regime,
    pub subject: Option<String>,
    pub optimizer: OptimizerKind,
    pub clip_norm: f64,
    /// Weight of the stop-token term in the attention objective.
    pub stop_weight: f64,
    pub stop_pos_weight: f64,
    pub bn_momentum: f64,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 25,
            max_len: MAX_LEN,
            learning_rate: None,
            epochs: 100,
            patience: 10,
            seed: 0,
            regime: Regime::Generic,
            subject: None,
            optimizer: OptimizerKind::Adam,
            clip_norm: 1.0,
            stop_weight: 1.0,
            stop_pos_weight: STOP_POS_WEIGHT,
            bn_momentum: crate::models::BN_MOMENTUM,
            max_steps: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("training.batch_size must be at least 1"));
        }
        if self.max_len == 0 {
            return Err(Error::config("training.max_len must be at least 1"));
        }
        if let Some(lr) = self.learning_rate {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::config("training.learning_rate must be finite and non-negative"));
            }
        }
        if !(self.clip_norm >= 0.0) || !(self.stop_weight >= 0.0) || !(self.stop_pos_weight > 0.0) {
            return Err(Error::config("training.clip_norm, stop_weight and stop_pos_weight must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::config("training.bn_momentum must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn learning_rate_for(&self, kind: ModelKind) -> f64 {
        self.learning_rate.unwrap_or(match kind {
            ModelKind::Blstm => 1e-3,
            ModelKind::Attention => 1e-4,
        })
    }
}

/// Hyperparameters of both estimators; the BLSTM input width is set from the
/// feature kind when a model is built.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub blstm: BlstmConfig,
    pub attention: AttentionConfig,
}

/// Fresh model of `kind` for `features` input.
pub fn build_model(kind: ModelKind, features: FeatureKind, arch: &Architecture, seed: u64) -> Result<Model> {
    kind.check_pairing(features)?;
    Ok(match kind {
        ModelKind::Blstm => Model::Blstm(BlstmModel::new(
            BlstmConfig {
                input_dim: features.width(),
                ..arch.blstm
            },
            seed,
        )?),
        ModelKind::Attention => Model::Attention(AttentionModel::new(arch.attention, seed)?),
    })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_rmse: f64,
    pub valid_rmse: f64,
    pub wall_time_s: f64,
    pub steps: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
    pub steps: usize,
}

#[derive(Clone, Debug)]
pub struct FineTuneOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
    pub base_valid_rmse: f64,
    pub valid_rmse: f64,
}

impl FineTuneOutcome {
    /// Negative when fine-tuning improved validation RMSE.
    pub fn delta(&self) -> f64 {
        self.valid_rmse - self.base_valid_rmse
    }
}

/// Per-utterance loss terms on a tape.
struct Recorded {
    tape: Tape,
    main: Var,
    post: Option<Var>,
    stop: Option<Var>,
    steps: usize,
    count: usize,
}

fn record(model: &Model, store: &ParameterStore, ex: &Example, cfg: &TrainingConfig, ctx: &mut Ctx<'_>) -> Result<Recorded> {
    let mut tape = Tape::new();
    let target = ex.targets.data().to_vec();
    let ones = vec![1.0; target.len()];
    let count = target.len();
    match model {
        Model::Blstm(m) => {
            let x = tape.constant(ex.features.rows().clone());
            let y = m.forward_on(&mut tape, store, x)?;
            let main = tape.sse(y, target, ones)?;
            Ok(Recorded {
                tape,
                main,
                post: None,
                stop: None,
                steps: 0,
                count,
            })
        }
        Model::Attention(m) => {
            let v = m.teacher_forced_on(&mut tape, store, ex.features.rows(), &ex.targets, ctx)?;
            let main = tape.sse(v.y_pre, target.clone(), ones.clone())?;
            let post = tape.sse(v.y_post, target, ones)?;
            let steps = v.alphas.len();
            let (st, sm) = loss::stop_targets(steps);
            let stop = tape.bce_logits(v.stop_logits, st, sm, cfg.stop_pos_weight)?;
            Ok(Recorded {
                tape,
                main,
                post: Some(post),
                stop: Some(stop),
                steps,
                count,
            })
        }
    }
}

/// Batch objective and its gradient. Each utterance has its own tape; the
/// pooled RMSE terms are recombined so the gradient equals that of the loss
/// over the concatenated batch.
struct BatchResult {
    loss: f64,
    report_sse: f64,
    count: usize,
    grads: Gradients,
    stats: Vec<BatchStats>,
}

fn batch_step(
    model: &Model,
    batch: &[&Example],
    cfg: &TrainingConfig,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<BatchResult> {
    let store = model.params();
    let mut recs = Vec::with_capacity(batch.len());
    for ex in batch {
        let mut ctx = Ctx::train(Some(dropout_rng));
        recs.push(record(model, store, ex, cfg, &mut ctx)?);
    }
    let count: usize = recs.iter().map(|r| r.count).sum();
    let steps: usize = recs.iter().map(|r| r.steps).sum();
    let main: f64 = recs.iter().map(|r| r.tape.scalar(r.main)).sum();
    let post: f64 = recs.iter().filter_map(|r| r.post.map(|v| r.tape.scalar(v))).sum();
    let stop: f64 = recs.iter().filter_map(|r| r.stop.map(|v| r.tape.scalar(v))).sum();
    let c = count as f64;
    let l_main = (main / c).sqrt();
    let l_post = (post / c).sqrt();
    let attention = matches!(model, Model::Attention(_));
    let l_stop = if steps > 0 { stop / steps as f64 } else { 0.0 };
    let loss = if attention {
        l_main + l_post + cfg.stop_weight * l_stop
    } else {
        l_main
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {loss}")));
    }
    let rmse_seed = |l: f64| if l > 0.0 { 1.0 / (2.0 * l * c) } else { 0.0 };
    let mut grads = Gradients::empty(store.len());
    let mut stats = Vec::new();
    for mut r in recs {
        let mut seeds = vec![(r.main, rmse_seed(l_main))];
        if let Some(p) = r.post {
            seeds.push((p, rmse_seed(l_post)));
        }
        if let Some(s) = r.stop {
            seeds.push((s, cfg.stop_weight / steps as f64));
        }
        grads.add_assign(&r.tape.backward(&seeds, store.len()));
        stats.extend(r.tape.take_batch_stats());
    }
    Ok(BatchResult {
        loss,
        report_sse: if attention { post } else { main },
        count,
        grads,
        stats,
    })
}

/// Pooled RMSE over `examples` in inference mode: the BLSTM output, or the
/// teacher-forced post-net output of the attention model.
pub fn validation_rmse(model: &Model, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::data("validation set is empty"));
    }
    let (mut sse, mut count) = (0.0, 0usize);
    for ex in examples {
        let y = match model {
            Model::Blstm(m) => m.forward(ex.features.rows())?,
            Model::Attention(m) => m.forward_teacher_forced(&ex.features, &ex.targets)?.y_post,
        };
        sse += y
            .data()
            .iter()
            .zip(ex.targets.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        count += y.len();
    }
    let r = (sse / count as f64).sqrt();
    if !r.is_finite() {
        return Err(Error::NonFinite(format!("validation RMSE is {r}")));
    }
    Ok(r)
}

fn check_examples(model: &Model, kind: FeatureKind, examples: &[Example], max_len: usize) -> Result<()> {
    model.kind().check_pairing(kind)?;
    let want = match model {
        Model::Blstm(m) => m.config.input_dim,
        Model::Attention(_) => FeatureKind::Phn.width(),
    };
    let mut long = Vec::new();
    for ex in examples {
        if ex.features.kind() != kind {
            return Err(Error::config(format!("example {} has {} features, expected {kind}", ex.id, ex.features.kind())));
        }
        if ex.features.width() != want {
            return Err(Error::dim(format!(
                "example {} has feature width {}, model expects {want}",
                ex.id,
                ex.features.width()
            )));
        }
        if ex.targets.cols() != NUM_CHANNELS {
            return Err(Error::dim(format!("example {} targets are not T×{NUM_CHANNELS}", ex.id)));
        }
        if ex.targets.rows() > max_len || ex.features.len() > max_len {
            long.push(ex.id.as_str());
        }
    }
    if !long.is_empty() {
        return Err(Error::data(format!("utterances longer than {max_len} frames: {}", long.join(", "))));
    }
    Ok(())
}

/// Trains `model` on `train`, selecting the epoch with the lowest validation
/// RMSE. Only trained epochs (≥ 1) are candidates; with zero epochs the
/// initial parameters are returned.
pub fn train_examples(
    model: Model,
    kind: FeatureKind,
    train: &[Example],
    valid: &[Example],
    cfg: &TrainingConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    check_examples(&model, kind, train, cfg.max_len)?;
    check_examples(&model, kind, valid, cfg.max_len)?;
    let lr = cfg.learning_rate_for(model.kind());
    let optimizer = Optimizer::new(cfg.optimizer, lr, model.params());
    let mut current = Checkpoint::new(model, optimizer, kind, cfg.clone())?;
    if cfg.epochs == 0 {
        current.valid_rmse = validation_rmse(&current.model, valid)?;
        return Ok(TrainOutcome {
            checkpoint: current,
            log: Vec::new(),
            steps: 0,
        });
    }

    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 11, 0));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 11, 1));
    let start = Instant::now();
    let mut best: Option<Checkpoint> = None;
    let mut since_best = 0;
    let mut log = Vec::new();
    let mut steps = 0usize;
    let cap = cfg.max_steps.unwrap_or(usize::MAX);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut sse, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if steps >= cap {
                break;
            }
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let mut r = batch_step(&current.model, &batch, cfg, &mut dropout_rng)?;
            clip_global_norm(&mut r.grads, cfg.clip_norm);
            current.optimizer.apply(current.model.params_mut(), &r.grads)?;
            update_running_stats(current.model.params_mut(), &r.stats, cfg.bn_momentum)?;
            sse += r.report_sse;
            count += r.count;
            steps += 1;
            let _ = r.loss;
        }
        let valid_rmse = validation_rmse(&current.model, valid)?;
        let rec = EpochRecord {
            epoch,
            train_rmse: if count > 0 { (sse / count as f64).sqrt() } else { f64::NAN },
            valid_rmse,
            wall_time_s: start.elapsed().as_secs_f64(),
            steps,
        };
        observer(&rec);
        log.push(rec);
        current.epoch = epoch;
        current.valid_rmse = valid_rmse;
        if best.as_ref().map_or(true, |b| valid_rmse < b.valid_rmse) {
            best = Some(current.clone());
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= cfg.patience.max(1) || steps >= cap {
            break;
        }
    }
    Ok(TrainOutcome {
        checkpoint: best.expect("at least one epoch ran"),
        log,
        steps,
    })
}

/// Trains a fresh model on the corpus train split according to the regime.
pub fn train(
    corpus: &Corpus,
    kind: FeatureKind,
    model_kind: ModelKind,
    arch: &Architecture,
    cfg: &TrainingConfig,
    acoustic: Option<&AcousticFeatures>,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    model_kind.check_pairing(kind)?;
    corpus.check_split()?;
    let subject = match cfg.regime {
        Regime::Generic => None,
        Regime::SubjectDependent => Some(
            cfg.subject
                .as_deref()
                .ok_or_else(|| Error::config("the subject_dependent regime needs training.subject"))?,
        ),
        Regime::FineTune => return Err(Error::config("the fine_tune regime starts from a base checkpoint; use fine-tuning")),
    };
    let train_ex = examples_for(corpus, Split::Train, kind, subject, acoustic)?;
    let valid_ex = examples_for(corpus, Split::Validation, kind, subject, acoustic)?;
    let model = build_model(model_kind, kind, arch, cfg.seed)?;
    train_examples(model, kind, &train_ex, &valid_ex, cfg, observer)
}

/// Continues training `base` on one subject's data. All parameters are updated.
pub fn fine_tune_examples(
    base: &Checkpoint,
    train: &[Example],
    valid: &[Example],
    cfg: &TrainingConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<FineTuneOutcome> {
    let base_valid_rmse = validation_rmse(&base.model, valid)?;
    let out = train_examples(base.model.clone(), base.feature_kind, train, valid, cfg, observer)?;
    Ok(FineTuneOutcome {
        valid_rmse: out.checkpoint.valid_rmse,
        checkpoint: out.checkpoint,
        log: out.log,
        base_valid_rmse,
    })
}

pub fn fine_tune(
    base: &Checkpoint,
    corpus: &Corpus,
    subject: &str,
    cfg: &TrainingConfig,
    acoustic: Option<&AcousticFeatures>,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<FineTuneOutcome> {
    corpus.check_split()?;
    if !corpus.subjects().iter().any(|s| s == subject) {
        return Err(Error::data(format!("subject {subject} is not in the corpus")));
    }
    let kind = base.feature_kind;
    let train_ex = examples_for(corpus, Split::Train, kind, Some(subject), acoustic)?;
    let valid_ex = examples_for(corpus, Split::Validation, kind, Some(subject), acoustic)?;
    let cfg = TrainingConfig {
        regime: Regime::FineTune,
        subject: Some(subject.to_string()),
        ..cfg.clone()
    };
    fine_tune_examples(base, &train_ex, &valid_ex, &cfg, observer)
}

/// Prediction for one example. The attention model generates freely up to
/// `max_frames`; the BLSTM is frame-synchronous.
pub fn predict(model: &Model, ex: &Example, max_frames: usize) -> Result<Prediction> {
    let (predicted, alphas) = match model {
        Model::Blstm(m) => (m.forward(ex.features.rows())?, None),
        Model::Attention(m) => {
            let out = m.infer(&ex.features, 0.5, max_frames)?;
            (out.y_post, Some(out.alphas))
        }
    };
    predicted.check_finite("prediction")?;
    Ok(Prediction {
        id: ex.id.clone(),
        subject: ex.subject.clone(),
        predicted,
        reference: ex.targets.clone(),
        alphas,
        alignment: Some(ex.alignment.clone()),
    })
}

/// Scores `model` on `examples`; attention outputs are DTW-aligned first.
pub fn evaluate_model(model: &Model, examples: &[Example], labels: ReportLabels, max_frames: usize) -> Result<EvalReport> {
    let preds = examples
        .iter()
        .map(|ex| predict(model, ex, max_frames))
        .collect::<Result<Vec<_>>>()?;
    evaluate_predictions(&preds, model.kind() == ModelKind::Attention, labels)
}
