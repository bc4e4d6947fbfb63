//! One function per subcommand.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use artic::corpus::{
    channel_index, load_trajectory, lowpass_filter, resample, save_alignment, save_trajectory, split_dataset,
    znormalize, ArticulatoryTrajectory, Split, Utterance,
};
use artic::evaluation::{evaluate_predictions, EvalReport, Prediction, ReportLabels};
use artic::features::{FeatureKind, PhonemeInventory, FRAME_PERIOD_S};
use artic::models::ModelKind;
use artic::synth::generate_corpus;
use artic::training::{
    examples_for, fine_tune_examples, make_example, predict, train, utterance_features, Checkpoint, EpochRecord,
    Example, Regime,
};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::store::{self, Entry, Loaded, Manifest};
use crate::{plot, CliError};

const TARGET_RATE_HZ: f64 = 1.0 / FRAME_PERIOD_S;

/// Options shared by every command after config resolution.
pub struct Options {
    pub config: RunConfig,
    pub force: bool,
    pub out: Option<PathBuf>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

fn checkpoint_path(opts: &Options, flag: Option<&Path>) -> Result<PathBuf, CliError> {
    flag.map(Path::to_path_buf)
        .or_else(|| opts.config.paths.checkpoint.clone())
        .ok_or_else(|| CliError::Usage("no checkpoint given (use --checkpoint or paths.checkpoint)".into()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.exists() {
        return Err(CliError::Data(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

fn labels(regime: Regime, model: ModelKind, kind: FeatureKind, subject: Option<&str>) -> ReportLabels {
    ReportLabels {
        regime: regime.name().into(),
        model_kind: model.name().into(),
        feature_kind: Some(kind),
        subject: subject.map(str::to_string),
    }
}

fn save_report(dir: &Path, stem: &str, report: &EvalReport) -> Result<(), CliError> {
    fs::write(dir.join(format!("{stem}.json")), report.to_json()?)?;
    fs::write(dir.join(format!("{stem}.csv")), report.to_csv())?;
    Ok(())
}

fn summary(report: &EvalReport) -> String {
    let cc = report.mean_cc().map_or("undefined".to_string(), |c| format!("{c:.4}"));
    let mut s = format!("mean CC {cc}, mean RMSE {:.4} over {} sentences", report.mean_rmse(), report.sentences.len());
    if let Some(d) = &report.diagonality {
        let _ = write!(s, ", attention diagonality {:.2} frames ({:.0}% within {})", d.mean_frames, 100.0 * d.fraction_within, d.threshold_frames);
    }
    s
}

fn log_csv(log: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,steps,train_rmse,valid_rmse,wall_time_s\n");
    for r in log {
        let _ = writeln!(out, "{},{},{},{},{}", r.epoch, r.steps, r.train_rmse, r.valid_rmse, r.wall_time_s);
    }
    out
}

fn progress(tag: &str) -> impl FnMut(&EpochRecord) + '_ {
    move |r| eprintln!("{tag} epoch {:>3}  train {:.4}  valid {:.4}  {:.1} s", r.epoch, r.train_rmse, r.valid_rmse, r.wall_time_s)
}

// ---------------------------------------------------------------- synth

pub fn synth(opts: &Options) -> Result<(), CliError> {
    let dir = opts.out.clone().unwrap_or_else(|| opts.config.paths.corpus.clone());
    if store::non_empty(&dir) && !opts.force {
        return Err(CliError::Data(format!("{} exists and is not empty (use --force to overwrite)", dir.display())));
    }
    if opts.force && dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    let sc = generate_corpus(&opts.config.synth)?;
    ensure_dir(&dir)?;
    let mut entries = Vec::new();
    for u in &sc.corpus.utterances {
        ensure_dir(&dir.join(&u.subject))?;
        let entry = Entry {
            id: u.id.clone(),
            subject: u.subject.clone(),
            split: sc.corpus.split.get(&u.id).copied(),
            trajectory: store::file_for(&u.subject, &u.id, "csv"),
            alignment: store::file_for(&u.subject, &u.id, "lab"),
            waveform: None,
            acoustic: Some(store::file_for(&u.subject, &u.id, "proxy")),
        };
        save_trajectory(&u.trajectory, &dir.join(&entry.trajectory))?;
        save_alignment(&u.alignment, &dir.join(&entry.alignment))?;
        if let (Some(p), Some(path)) = (sc.proxies.get(&u.id), &entry.acoustic) {
            p.save(&dir.join(path))?;
        }
        entries.push(entry);
    }
    Manifest {
        utterances: entries,
        prepared_from: None,
    }
    .save(&dir)?;
    eprintln!(
        "synth: wrote {} utterances from {} subjects to {}",
        sc.corpus.len(),
        sc.profiles.len(),
        dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- prep

/// Hash of everything the prepared cache depends on.
fn prep_key(src: &Path, manifest: &Manifest, cfg: &RunConfig) -> Result<String, CliError> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(manifest).map_err(|e| CliError::Data(e.to_string()))?);
    h.update(cfg.data.cutoff_hz.to_le_bytes());
    h.update(cfg.training.seed.to_le_bytes());
    for e in &manifest.utterances {
        for p in [Some(&e.trajectory), Some(&e.alignment), e.waveform.as_ref(), e.acoustic.as_ref()].into_iter().flatten() {
            // unreadable files are reported by the loader
            if let Ok(bytes) = fs::read(src.join(p)) {
                h.update(bytes);
            }
        }
    }
    Ok(hex::encode(h.finalize()))
}

fn preprocess(u: &Utterance, cutoff_hz: f64) -> Result<Utterance, CliError> {
    let filtered = lowpass_filter(&u.trajectory, cutoff_hz)?;
    let trajectory = resample(&filtered, TARGET_RATE_HZ)?;
    let mut out = Utterance::new(&u.id, &u.subject, trajectory, u.alignment.clone())?;
    out.waveform = u.waveform.clone();
    Ok(out)
}

pub fn prep(opts: &Options) -> Result<(), CliError> {
    let cfg = &opts.config;
    let src = &cfg.paths.corpus;
    let dst = opts.out.clone().unwrap_or_else(|| cfg.paths.prepared.clone());
    let raw = Manifest::load(src)?;
    let key = prep_key(src, &raw, cfg)?;
    if !opts.force {
        if let Ok(m) = Manifest::load(&dst) {
            if m.prepared_from.as_deref() == Some(key.as_str()) {
                eprintln!("prep: cache in {} is up to date, skipped", dst.display());
                return Ok(());
            }
        }
    }
    let Loaded { corpus, acoustic, .. } = store::load_corpus(src)?;
    let mut errors = Vec::new();
    let mut prepared = Vec::new();
    for u in &corpus.utterances {
        match preprocess(u, cfg.data.cutoff_hz) {
            Ok(p) => prepared.push(p),
            Err(e) => errors.push(format!("{}: {e}", u.id)),
        }
    }
    if !errors.is_empty() {
        return Err(CliError::Data(format!("preprocessing failed:\n  {}", errors.join("\n  "))));
    }
    let mut corpus = artic::corpus::Corpus {
        utterances: prepared,
        split: corpus.split,
    };
    if corpus.check_split().is_err() {
        corpus = split_dataset(&corpus, (0.8, 0.1, 0.1), cfg.training.seed)?;
    }

    if dst.exists() {
        fs::remove_dir_all(&dst)?;
    }
    ensure_dir(&dst.join("features"))?;
    ensure_dir(&dst.join("norm"))?;
    let mut entries = Vec::new();
    for u in &corpus.utterances {
        ensure_dir(&dst.join(&u.subject))?;
        let has_acoustic = acoustic.contains_key(&u.id) || u.waveform.is_some();
        let entry = Entry {
            id: u.id.clone(),
            subject: u.subject.clone(),
            split: corpus.split.get(&u.id).copied(),
            trajectory: store::file_for(&u.subject, &u.id, "csv"),
            alignment: store::file_for(&u.subject, &u.id, "lab"),
            waveform: None,
            acoustic: has_acoustic.then(|| store::feature_file(&u.id, FeatureKind::Mfcc)),
        };
        save_trajectory(&u.trajectory, &dst.join(&entry.trajectory))?;
        save_alignment(&u.alignment, &dst.join(&entry.alignment))?;
        let (_, norm) = znormalize(&u.trajectory)?;
        write_json(&dst.join(store::norm_file(&u.id)), &norm)?;
        for kind in FeatureKind::ALL {
            if kind != FeatureKind::Phn && kind != FeatureKind::Tphn && !has_acoustic {
                continue;
            }
            match utterance_features(u, kind, Some(&acoustic)) {
                Ok(f) => f.save(&dst.join(store::feature_file(&u.id, kind)))?,
                Err(e) => errors.push(format!("{} ({kind}): {e}", u.id)),
            }
        }
        entries.push(entry);
    }
    if !errors.is_empty() {
        return Err(CliError::Data(format!("feature extraction failed:\n  {}", errors.join("\n  "))));
    }
    Manifest {
        utterances: entries,
        prepared_from: Some(key),
    }
    .save(&dst)?;
    eprintln!("prep: {} utterances filtered at {} Hz, resampled to {TARGET_RATE_HZ} Hz, cached in {}", corpus.len(), cfg.data.cutoff_hz, dst.display());
    Ok(())
}

// ---------------------------------------------------------------- train / finetune

fn load_prepared(cfg: &RunConfig) -> Result<Loaded, CliError> {
    let loaded = store::load_corpus(&cfg.paths.prepared)?;
    if loaded.manifest.prepared_from.is_none() {
        return Err(CliError::Data(format!("{} is not a prepared corpus; run `prep` first", cfg.paths.prepared.display())));
    }
    loaded.corpus.check_split()?;
    Ok(loaded)
}

fn out_dir(opts: &Options) -> Result<PathBuf, CliError> {
    let dir = opts.out.clone().unwrap_or_else(|| opts.config.paths.output.clone());
    ensure_dir(&dir)?;
    Ok(dir)
}

fn test_examples(loaded: &Loaded, kind: FeatureKind, subject: Option<&str>) -> Result<Vec<Example>, CliError> {
    let ex = examples_for(&loaded.corpus, Split::Test, kind, subject, Some(&loaded.acoustic))?;
    if ex.is_empty() {
        return Err(CliError::Data("the test split is empty".into()));
    }
    Ok(ex)
}

pub fn train_cmd(opts: &Options) -> Result<(), CliError> {
    let cfg = &opts.config;
    if cfg.data.regime == Regime::FineTune {
        return Err(CliError::Usage("data.regime = \"fine_tune\" is run with the `finetune` command".into()));
    }
    let loaded = load_prepared(cfg)?;
    let dir = out_dir(opts)?;
    let (kind, model_kind) = (cfg.data.features, cfg.model_kind());
    let training = artic::training::TrainingConfig {
        regime: cfg.data.regime,
        subject: cfg.data.subject.clone(),
        ..cfg.training.clone()
    };
    let out = train(&loaded.corpus, kind, model_kind, &cfg.architecture, &training, Some(&loaded.acoustic), &mut progress("train"))?;
    let ckpt = dir.join("model.ckpt");
    out.checkpoint.save(&ckpt)?;
    fs::write(dir.join("train_log.csv"), log_csv(&out.log))?;
    let subject = match cfg.data.regime {
        Regime::SubjectDependent => cfg.data.subject.as_deref(),
        _ => None,
    };
    let test = test_examples(&loaded, kind, subject)?;
    let report = artic::training::evaluate_model(
        &out.checkpoint.model,
        &test,
        labels(cfg.data.regime, model_kind, kind, subject),
        cfg.eval.max_frames,
    )?;
    save_report(&dir, "report", &report)?;
    eprintln!(
        "train: best epoch {} (validation RMSE {:.4}); test {}; checkpoint {}",
        out.checkpoint.epoch,
        out.checkpoint.valid_rmse,
        summary(&report),
        ckpt.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct FineTuneRow {
    generic_valid_rmse: f64,
    fine_tuned_valid_rmse: f64,
    best_epoch: usize,
}

pub fn finetune(opts: &Options, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let cfg = &opts.config;
    let base = load_checkpoint(&checkpoint_path(opts, checkpoint)?)?;
    let loaded = load_prepared(cfg)?;
    let dir = out_dir(opts)?.join("finetune");
    ensure_dir(&dir)?;
    let kind = base.feature_kind;
    let subjects = match &cfg.data.subject {
        Some(s) => vec![s.clone()],
        None => loaded.corpus.subjects(),
    };
    let mut rows = BTreeMap::new();
    let mut predictions = Vec::new();
    for subject in &subjects {
        if !loaded.corpus.subjects().contains(subject) {
            return Err(CliError::Data(format!("subject {subject} is not in the corpus")));
        }
        let part = |split| examples_for(&loaded.corpus, split, kind, Some(subject), Some(&loaded.acoustic));
        let training = artic::training::TrainingConfig {
            regime: Regime::FineTune,
            subject: Some(subject.clone()),
            ..cfg.training.clone()
        };
        let tag = format!("finetune {subject}");
        let out = fine_tune_examples(&base, &part(Split::Train)?, &part(Split::Validation)?, &training, &mut progress(&tag))?;
        out.checkpoint.save(&dir.join(format!("{subject}.ckpt")))?;
        fs::write(dir.join(format!("{subject}_log.csv")), log_csv(&out.log))?;
        eprintln!("finetune {subject}: validation RMSE {:.4} -> {:.4}", out.base_valid_rmse, out.valid_rmse);
        rows.insert(
            subject.clone(),
            FineTuneRow {
                generic_valid_rmse: out.base_valid_rmse,
                fine_tuned_valid_rmse: out.valid_rmse,
                best_epoch: out.checkpoint.epoch,
            },
        );
        for ex in part(Split::Test)? {
            predictions.push(predict(&out.checkpoint.model, &ex, cfg.eval.max_frames)?);
        }
    }
    write_json(&dir.join("summary.json"), &rows)?;
    if predictions.is_empty() {
        return Err(CliError::Data("the test split is empty".into()));
    }
    let model_kind = base.model.kind();
    let subject = (subjects.len() == 1).then(|| subjects[0].as_str());
    let report = evaluate_predictions(&predictions, model_kind == ModelKind::Attention, labels(Regime::FineTune, model_kind, kind, subject))?;
    save_report(&dir, "report", &report)?;
    let improved = rows.values().filter(|r| r.fine_tuned_valid_rmse <= r.generic_valid_rmse).count();
    eprintln!("finetune: improved validation RMSE for {improved}/{} subjects; test {}", rows.len(), summary(&report));
    Ok(())
}

// ---------------------------------------------------------------- eval / infer

/// Scores trajectory CSVs in `dir` (one `<id>.csv` per test utterance, in
/// physical units) against the prepared references.
fn eval_files(opts: &Options, dir: &Path, use_dtw: bool) -> Result<EvalReport, CliError> {
    let cfg = &opts.config;
    let loaded = load_prepared(cfg)?;
    let mut predictions = Vec::new();
    for u in loaded.corpus.part(Split::Test) {
        if cfg.data.subject.as_ref().is_some_and(|s| *s != u.subject) {
            continue;
        }
        let path = dir.join(format!("{}.csv", u.id));
        let traj = load_trajectory(&path)?;
        let norm = store::load_norm(&cfg.paths.prepared, &u.id)?;
        let predicted = normalize_with(&traj, &norm)?;
        let (reference, _) = znormalize(&u.trajectory)?;
        predictions.push(Prediction {
            id: u.id.clone(),
            subject: u.subject.clone(),
            predicted,
            reference: reference.into_frames(),
            alphas: None,
            alignment: Some(u.alignment.clone()),
        });
    }
    if predictions.is_empty() {
        return Err(CliError::Data("the test split is empty".into()));
    }
    let labels = ReportLabels {
        regime: "external".into(),
        model_kind: "external".into(),
        feature_kind: None,
        subject: cfg.data.subject.clone(),
    };
    Ok(evaluate_predictions(&predictions, use_dtw, labels)?)
}

fn normalize_with(traj: &ArticulatoryTrajectory, norm: &artic::corpus::NormStats) -> Result<artic::numerics::Tensor, CliError> {
    let mut frames = traj.frames().clone();
    for r in 0..frames.rows() {
        for (c, v) in frames.row_mut(r).iter_mut().enumerate() {
            *v = if norm.std[c] > 0.0 { (*v - norm.mean[c]) / norm.std[c] } else { 0.0 };
        }
    }
    Ok(frames)
}

pub fn eval(opts: &Options, checkpoint: Option<&Path>, predictions: Option<&Path>, dtw: bool) -> Result<(), CliError> {
    let cfg = &opts.config;
    let dir = out_dir(opts)?;
    let report = match predictions {
        Some(p) => eval_files(opts, p, dtw)?,
        None => {
            let ck = load_checkpoint(&checkpoint_path(opts, checkpoint)?)?;
            let loaded = load_prepared(cfg)?;
            let subject = cfg.data.subject.as_deref();
            let test = test_examples(&loaded, ck.feature_kind, subject)?;
            artic::training::evaluate_model(
                &ck.model,
                &test,
                labels(ck.training.regime, ck.model.kind(), ck.feature_kind, subject.or(ck.training.subject.as_deref())),
                cfg.eval.max_frames,
            )?
        }
    };
    save_report(&dir, "eval", &report)?;
    println!("{}", summary(&report));
    Ok(())
}

fn selected<'a>(loaded: &'a Loaded, ids: &[String], subject: Option<&str>) -> Result<Vec<&'a Utterance>, CliError> {
    if ids.is_empty() {
        return Ok(loaded
            .corpus
            .part(Split::Test)
            .filter(|u| subject.map_or(true, |s| s == u.subject))
            .collect());
    }
    ids.iter()
        .map(|id| loaded.corpus.get(id).ok_or_else(|| CliError::Data(format!("utterance {id} is not in the corpus"))))
        .collect()
}

fn denormalized(t: &artic::numerics::Tensor, norm: &artic::corpus::NormStats) -> Result<ArticulatoryTrajectory, CliError> {
    Ok(norm.denormalize(&ArticulatoryTrajectory::new(t.clone(), TARGET_RATE_HZ)?)?)
}

pub fn infer(opts: &Options, checkpoint: Option<&Path>, ids: &[String]) -> Result<(), CliError> {
    let cfg = &opts.config;
    let ck = load_checkpoint(&checkpoint_path(opts, checkpoint)?)?;
    let loaded = load_prepared(cfg)?;
    let dir = out_dir(opts)?.join("predictions");
    ensure_dir(&dir)?;
    let utts = selected(&loaded, ids, cfg.data.subject.as_deref())?;
    for u in &utts {
        let ex = make_example(u, ck.feature_kind, Some(&loaded.acoustic))?;
        let p = predict(&ck.model, &ex, cfg.eval.max_frames)?;
        let norm = store::load_norm(&cfg.paths.prepared, &u.id)?;
        save_trajectory(&denormalized(&p.predicted, &norm)?, &dir.join(format!("{}.csv", u.id)))?;
    }
    eprintln!("infer: wrote {} trajectories to {}", utts.len(), dir.display());
    Ok(())
}

// ---------------------------------------------------------------- plot

pub fn plot_cmd(opts: &Options, checkpoint: Option<&Path>, id: &str) -> Result<(), CliError> {
    let cfg = &opts.config;
    let ck = load_checkpoint(&checkpoint_path(opts, checkpoint)?)?;
    let loaded = load_prepared(cfg)?;
    let u = loaded
        .corpus
        .get(id)
        .ok_or_else(|| CliError::Data(format!("utterance {id} is not in the corpus")))?;
    let ex = make_example(u, ck.feature_kind, Some(&loaded.acoustic))?;
    let p = predict(&ck.model, &ex, cfg.eval.max_frames)?;
    let norm = store::load_norm(&cfg.paths.prepared, id)?;
    let predicted = denormalized(&p.predicted, &norm)?;
    let dir = out_dir(opts)?.join("plots");
    ensure_dir(&dir)?;
    let channels: Vec<(&str, Vec<f64>, Vec<f64>)> = cfg
        .plot
        .channels
        .iter()
        .map(|c| {
            let k = channel_index(c).expect("validated channel name");
            (c.as_str(), u.trajectory.channel(k), predicted.channel(k))
        })
        .collect();
    let title = format!("{id}: reference (solid) and {} prediction (dashed)", ck.model.kind());
    let traj_path = dir.join(format!("{id}_trajectories.svg"));
    fs::write(&traj_path, plot::trajectories_svg(&title, &channels, &u.alignment, FRAME_PERIOD_S))?;
    let mut written = vec![traj_path];
    if let Some(alphas) = &p.alphas {
        let inv = PhonemeInventory;
        let tokens: Vec<String> = std::iter::once(inv.symbol(inv.start_index()).unwrap_or("<s>").to_string())
            .chain(u.alignment.phonemes().map(str::to_string))
            .collect();
        let path = dir.join(format!("{id}_attention.svg"));
        fs::write(&path, plot::attention_svg(&format!("{id}: attention weights"), alphas, &tokens))?;
        written.push(path);
    }
    for w in written {
        eprintln!("plot: wrote {}", w.display());
    }
    Ok(())
}
