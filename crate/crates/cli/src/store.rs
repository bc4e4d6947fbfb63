//! On-disk corpus layout.
//!
//! A corpus directory holds `manifest.json` plus per-utterance files named in
//! it, relative to the directory: a trajectory CSV, an alignment label file and
//! optionally a 16 kHz mono WAV and a precomputed acoustic feature matrix.
//! A prepared corpus uses the same layout and adds the feature cache and the
//! normalization statistics of every utterance.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use artic::corpus::{load_alignment, load_trajectory, Corpus, NormStats, Split, Utterance, AUDIO_RATE_HZ};
use artic::features::{FeatureKind, FeatureMatrix};
use artic::training::AcousticFeatures;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub id: String,
    pub subject: String,
    /// Missing when the corpus has not been split yet.
    #[serde(default)]
    pub split: Option<Split>,
    pub trajectory: PathBuf,
    pub alignment: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub waveform: Option<PathBuf>,
    /// Acoustic features used in place of MFCCs computed from the waveform.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acoustic: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub utterances: Vec<Entry>,
    /// Set on prepared corpora: key of the inputs the cache was built from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prepared_from: Option<String>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Data(e.to_string()))?;
        fs::write(dir.join(MANIFEST), text + "\n")?;
        Ok(())
    }
}

/// Relative file name for utterance `id` of `subject` with `ext`.
pub fn file_for(subject: &str, id: &str, ext: &str) -> PathBuf {
    Path::new(subject).join(format!("{id}.{ext}"))
}

pub fn feature_file(id: &str, kind: FeatureKind) -> PathBuf {
    Path::new("features").join(format!("{id}.{}.feat", kind.name()))
}

pub fn norm_file(id: &str) -> PathBuf {
    Path::new("norm").join(format!("{id}.json"))
}

pub fn read_wav(path: &Path) -> Result<Vec<f64>, CliError> {
    let err = |e: hound::Error| CliError::Data(format!("{}: {e}", path.display()));
    let mut reader = hound::WavReader::open(path).map_err(err)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.sample_rate as f64 != AUDIO_RATE_HZ {
        return Err(CliError::Data(format!(
            "{}: expected mono {} Hz audio, found {} channel(s) at {} Hz",
            path.display(),
            AUDIO_RATE_HZ,
            spec.channels,
            spec.sample_rate
        )));
    }
    match spec.sample_format {
        hound::SampleFormat::Float => reader.samples::<f32>().map(|s| s.map(f64::from).map_err(err)).collect(),
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader.samples::<i32>().map(|s| s.map(|v| v as f64 / scale).map_err(err)).collect()
        }
    }
}

/// A corpus read from disk with its side data.
pub struct Loaded {
    pub corpus: Corpus,
    pub manifest: Manifest,
    pub acoustic: AcousticFeatures,
}

/// Reads every utterance listed in the manifest; all failures are reported together.
pub fn load_corpus(dir: &Path) -> Result<Loaded, CliError> {
    let manifest = Manifest::load(dir)?;
    let mut utterances = Vec::new();
    let mut acoustic = BTreeMap::new();
    let mut split = BTreeMap::new();
    let mut errors = Vec::new();
    for e in &manifest.utterances {
        match load_entry(dir, e) {
            Ok((u, a)) => {
                if let Some(a) = a {
                    acoustic.insert(e.id.clone(), a);
                }
                if let Some(s) = e.split {
                    split.insert(e.id.clone(), s);
                }
                utterances.push(u);
            }
            Err(err) => errors.push(format!("{}: {err}", e.id)),
        }
    }
    if !errors.is_empty() {
        return Err(CliError::Data(format!("{} utterance(s) failed to load:\n  {}", errors.len(), errors.join("\n  "))));
    }
    let mut corpus = Corpus::new(utterances);
    corpus.split = split;
    Ok(Loaded {
        corpus,
        manifest,
        acoustic,
    })
}

fn load_entry(dir: &Path, e: &Entry) -> Result<(Utterance, Option<FeatureMatrix>), CliError> {
    let trajectory = load_trajectory(&dir.join(&e.trajectory))?;
    let apath = dir.join(&e.alignment);
    if !apath.exists() {
        return Err(CliError::Data(format!("missing alignment file {}", apath.display())));
    }
    let alignment = load_alignment(&apath)?;
    let mut u = Utterance::new(&e.id, &e.subject, trajectory, alignment)?;
    if let Some(w) = &e.waveform {
        u.waveform = Some(read_wav(&dir.join(w))?);
    }
    let acoustic = e.acoustic.as_ref().map(|p| FeatureMatrix::load(&dir.join(p))).transpose()?;
    Ok((u, acoustic))
}

pub fn load_norm(dir: &Path, id: &str) -> Result<NormStats, CliError> {
    let path = dir.join(norm_file(id));
    let text = fs::read_to_string(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// True when `dir` exists and has any entry.
pub fn non_empty(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}
