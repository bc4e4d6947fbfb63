//! Input representations: PHN, TPHN, MFCC and MFCC+TPHN.

mod inventory;
mod mfcc;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{PhonemeAlignment, NUM_CHANNELS};
use crate::error::{Error, Result};
use crate::numerics::{Container, Tensor};

pub use inventory::{normalize, PhonemeInventory, ARPABET, INVENTORY_SIZE, START_TOKEN};
pub use mfcc::{hz_to_mel, mel_to_hz, mfcc_frames, MfccConfig};

/// Frame period of every frame-synchronous representation.
pub const FRAME_PERIOD_S: f64 = 0.010;
/// Number of cepstral coefficients (and acoustic-proxy dimensions).
pub const MFCC_DIM: usize = 13;
/// Longest sequence accepted into a padded batch.
pub const MAX_LEN: usize = 400;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FeatureKind {
    Phn,
    Tphn,
    Mfcc,
    MfccTphn,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 4] = [Self::Phn, Self::Tphn, Self::Mfcc, Self::MfccTphn];

    pub fn width(self) -> usize {
        match self {
            Self::Phn | Self::Tphn => INVENTORY_SIZE,
            Self::Mfcc => MFCC_DIM,
            Self::MfccTphn => MFCC_DIM + INVENTORY_SIZE,
        }
    }

    /// Whether rows are 10 ms frames (as opposed to phoneme tokens).
    pub fn is_frame_synchronous(self) -> bool {
        self != Self::Phn
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Phn => "PHN",
            Self::Tphn => "TPHN",
            Self::Mfcc => "MFCC",
            Self::MfccTphn => "MFCC_TPHN",
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace(['+', '-'], "_");
        Self::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::config(format!("unknown feature kind {s:?} (expected PHN, TPHN, MFCC or MFCC_TPHN)")))
    }
}

/// A token- or frame-indexed input matrix tagged with its representation.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    rows: Tensor,
    kind: FeatureKind,
}

impl FeatureMatrix {
    /// Wraps `rows`, checking width, finiteness and the one-hot structure of
    /// the phonetic kinds.
    pub fn new(rows: Tensor, kind: FeatureKind) -> Result<Self> {
        if rows.shape().len() != 2 || rows.cols() != kind.width() {
            return Err(Error::dim(format!(
                "{kind} features must be ?×{}, got {:?}",
                kind.width(),
                rows.shape()
            )));
        }
        if rows.rows() == 0 {
            return Err(Error::dim(format!("{kind} feature matrix has no rows")));
        }
        rows.check_finite(kind.name())?;
        let one_hot_cols = match kind {
            FeatureKind::Phn | FeatureKind::Tphn => Some(0),
            FeatureKind::MfccTphn => Some(MFCC_DIM),
            FeatureKind::Mfcc => None,
        };
        if let Some(start) = one_hot_cols {
            for (r, row) in rows.iter_rows().enumerate() {
                if !is_one_hot(&row[start..]) {
                    return Err(Error::dim(format!("{kind} row {r} is not one-hot")));
                }
            }
        }
        Ok(Self { rows, kind })
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    pub fn into_rows(self) -> Tensor {
        self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.rows.cols()
    }

    /// 10 ms for frame-synchronous kinds, `None` for PHN.
    pub fn frame_period_s(&self) -> Option<f64> {
        self.kind.is_frame_synchronous().then_some(FRAME_PERIOD_S)
    }

    /// Stores the matrix in the checkpoint container with a `kind` tag.
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.set_meta("kind", self.kind)?;
        c.push("features", self.rows.clone());
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let kind: FeatureKind = c.meta("kind")?;
        let rows = c
            .get("features")
            .ok_or_else(|| Error::Checkpoint("feature container lacks a `features` tensor".into()))?;
        Self::new(rows.clone(), kind)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

fn is_one_hot(row: &[f64]) -> bool {
    row.iter().filter(|&&v| v == 1.0).count() == 1 && row.iter().all(|&v| v == 0.0 || v == 1.0)
}

fn one_hot(index: usize) -> [f64; INVENTORY_SIZE] {
    let mut row = [0.0; INVENTORY_SIZE];
    row[index] = 1.0;
    row
}

/// Start token followed by one row per phoneme; durations are dropped.
pub fn encode_phn(alignment: &PhonemeAlignment) -> Result<FeatureMatrix> {
    let inv = PhonemeInventory;
    let mut rows = vec![one_hot(inv.start_index())];
    for p in alignment.phonemes() {
        rows.push(one_hot(inv.index(p)?));
    }
    FeatureMatrix::new(Tensor::from_rows(&rows)?, FeatureKind::Phn)
}

/// Phoneme sequence as inventory indices, start token first.
pub fn phn_indices(alignment: &PhonemeAlignment) -> Result<Vec<usize>> {
    let inv = PhonemeInventory;
    std::iter::once(Ok(inv.start_index()))
        .chain(alignment.phonemes().map(|p| inv.index(p)))
        .collect()
}

/// Boundary tolerance for frame lookups, well below any frame period.
const EDGE_TOL: f64 = 1e-9;

/// Index of the interval containing time `t`; a time on a boundary belongs to
/// the later interval, times past the end to the last one.
pub fn interval_at(alignment: &PhonemeAlignment, t: f64) -> usize {
    let ivs = alignment.intervals();
    ivs.iter()
        .position(|iv| t < iv.end_s - EDGE_TOL)
        .unwrap_or(ivs.len() - 1)
}

/// Frame-synchronous one-hot phonemes, `round(duration / period)` rows.
pub fn expand_tphn(alignment: &PhonemeAlignment, frame_period_s: f64) -> Result<FeatureMatrix> {
    if !(frame_period_s > 0.0) {
        return Err(Error::config(format!("frame period {frame_period_s} must be positive")));
    }
    if let Some(iv) = alignment.intervals().iter().find(|iv| !(iv.duration() > 0.0)) {
        return Err(Error::Alignment(format!(
            "phoneme {} at {} s has zero duration",
            iv.phoneme, iv.start_s
        )));
    }
    let inv = PhonemeInventory;
    let classes: Vec<usize> = alignment
        .phonemes()
        .map(|p| inv.index(p))
        .collect::<Result<_>>()?;
    let n = (alignment.duration_s() / frame_period_s).round() as usize;
    if n == 0 {
        return Err(Error::Alignment(format!(
            "alignment of {} s is shorter than half a frame",
            alignment.duration_s()
        )));
    }
    let rows: Vec<_> = (0..n)
        .map(|t| one_hot(classes[interval_at(alignment, t as f64 * frame_period_s)]))
        .collect();
    FeatureMatrix::new(Tensor::from_rows(&rows)?, FeatureKind::Tphn)
}

/// Per-column mean removal and variance normalization (population std).
/// Constant columns become zero.
pub fn normalize_columns(m: &Tensor) -> Tensor {
    let mut out = m.clone();
    for c in 0..m.cols() {
        let (normed, _, _) = crate::corpus::znormalize_slice(&m.column(c));
        for (r, v) in normed.into_iter().enumerate() {
            out.set(r, c, v);
        }
    }
    out
}

/// 13-dim MFCCs of a 16 kHz waveform, z-normalized per utterance.
pub fn compute_mfcc(waveform: &[f64]) -> Result<FeatureMatrix> {
    compute_mfcc_with(waveform, &MfccConfig::default(), true)
}

pub fn compute_mfcc_with(waveform: &[f64], config: &MfccConfig, normalize: bool) -> Result<FeatureMatrix> {
    if config.num_coeffs != MFCC_DIM {
        return Err(Error::config(format!("MFCC features must have {MFCC_DIM} coefficients")));
    }
    let frames = mfcc_frames(waveform, config)?;
    let mut t = Tensor::from_rows(&frames)?;
    if normalize && t.rows() >= 2 {
        t = normalize_columns(&t);
    }
    FeatureMatrix::new(t, FeatureKind::Mfcc)
}

/// Largest frame-count difference absorbed by trimming in [`concat_features`].
pub const CONCAT_TOLERANCE: usize = 2;

/// Column-wise concatenation: MFCC columns then TPHN columns.
pub fn concat_features(mfcc: &FeatureMatrix, tphn: &FeatureMatrix) -> Result<FeatureMatrix> {
    if mfcc.kind() != FeatureKind::Mfcc || tphn.kind() != FeatureKind::Tphn {
        return Err(Error::config(format!(
            "concat_features expects MFCC and TPHN, got {} and {}",
            mfcc.kind(),
            tphn.kind()
        )));
    }
    if mfcc.len().abs_diff(tphn.len()) > CONCAT_TOLERANCE {
        return Err(Error::Alignment(format!(
            "MFCC has {} frames but TPHN has {}; at most {CONCAT_TOLERANCE} frames can be trimmed",
            mfcc.len(),
            tphn.len()
        )));
    }
    let n = mfcc.len().min(tphn.len());
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|t| {
            let mut r = mfcc.rows().row(t).to_vec();
            r.extend_from_slice(tphn.rows().row(t));
            r
        })
        .collect();
    FeatureMatrix::new(Tensor::from_rows(&rows)?, FeatureKind::MfccTphn)
}

/// Zero-padded batch with masks over real rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    pub ids: Vec<String>,
    /// `B × max_len × D`.
    pub inputs: Tensor,
    /// `B × max_len × 12`.
    pub targets: Tensor,
    /// `B × max_len`, 1.0 on real input rows.
    pub input_mask: Tensor,
    /// `B × max_len`, 1.0 on real target frames.
    pub target_mask: Tensor,
    pub input_lengths: Vec<usize>,
    pub target_lengths: Vec<usize>,
}

impl PaddedBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.inputs.shape()[1]
    }
}

/// One utterance handed to [`pad_batch`].
#[derive(Clone, Copy, Debug)]
pub struct BatchItem<'a> {
    pub id: &'a str,
    pub features: &'a FeatureMatrix,
    /// `T × 12` target frames.
    pub targets: &'a Tensor,
}

/// Pads inputs and targets to `max_len`. Inputs and targets are padded
/// independently because PHN token counts differ from frame counts.
pub fn pad_batch(items: &[BatchItem<'_>], max_len: usize) -> Result<PaddedBatch> {
    let first = items.first().ok_or_else(|| Error::data("cannot pad an empty batch"))?;
    let width = first.features.width();
    let too_long: Vec<&str> = items
        .iter()
        .filter(|it| it.features.len() > max_len || it.targets.rows() > max_len)
        .map(|it| it.id)
        .collect();
    if !too_long.is_empty() {
        return Err(Error::data(format!(
            "utterances longer than {max_len} frames: {}",
            too_long.join(", ")
        )));
    }
    let b = items.len();
    let mut inputs = Tensor::zeros(&[b, max_len, width]);
    let mut targets = Tensor::zeros(&[b, max_len, NUM_CHANNELS]);
    let mut input_mask = Tensor::zeros(&[b, max_len]);
    let mut target_mask = Tensor::zeros(&[b, max_len]);
    for (i, it) in items.iter().enumerate() {
        if it.features.width() != width || it.features.kind() != first.features.kind() {
            return Err(Error::dim(format!("utterance {} has a different feature layout", it.id)));
        }
        if it.targets.cols() != NUM_CHANNELS {
            return Err(Error::dim(format!("utterance {} targets are not T×{NUM_CHANNELS}", it.id)));
        }
        let n = it.features.len();
        let base = i * max_len * width;
        inputs.data_mut()[base..base + n * width].copy_from_slice(it.features.rows().data());
        let t = it.targets.rows();
        let base = i * max_len * NUM_CHANNELS;
        targets.data_mut()[base..base + t * NUM_CHANNELS].copy_from_slice(it.targets.data());
        input_mask.data_mut()[i * max_len..i * max_len + n].fill(1.0);
        target_mask.data_mut()[i * max_len..i * max_len + t].fill(1.0);
    }
    Ok(PaddedBatch {
        ids: items.iter().map(|it| it.id.to_string()).collect(),
        inputs,
        targets,
        input_mask,
        target_mask,
        input_lengths: items.iter().map(|it| it.features.len()).collect(),
        target_lengths: items.iter().map(|it| it.targets.rows()).collect(),
    })
}
