//! Utterance data model, file formats and articulatory preprocessing.

mod filter;
mod io;
mod preprocess;
mod split;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use filter::{butterworth_lowpass, lowpass_filter, Biquad};
pub use io::{
    load_alignment, load_trajectory, parse_alignment, parse_trajectory, save_alignment,
    save_trajectory, write_alignment, write_trajectory,
};
pub use preprocess::{resample, znormalize, NormStats};
pub(crate) use preprocess::znormalize_slice;
pub use split::{split_dataset, MIN_SPLIT_UTTERANCES};

use crate::error::{Error, Result};
use crate::features::PhonemeInventory;
use crate::numerics::Tensor;

/// Channel names in storage order.
pub const CHANNELS: [&str; 12] = [
    "UL_x", "UL_y", "LL_x", "LL_y", "Jaw_x", "Jaw_y", "TT_x", "TT_y", "TB_x", "TB_y", "TD_x",
    "TD_y",
];

pub const NUM_CHANNELS: usize = 12;

/// Index of a channel by name.
pub fn channel_index(name: &str) -> Option<usize> {
    CHANNELS.iter().position(|c| *c == name)
}

/// `T × 12` midsagittal sensor positions sampled at a fixed rate.
#[derive(Clone, Debug, PartialEq)]
pub struct ArticulatoryTrajectory {
    frames: Tensor,
    frame_rate_hz: f64,
}

impl ArticulatoryTrajectory {
    pub fn new(frames: Tensor, frame_rate_hz: f64) -> Result<Self> {
        if frames.shape().len() != 2 || frames.cols() != NUM_CHANNELS {
            return Err(Error::dim(format!(
                "trajectory must have {NUM_CHANNELS} channels, got shape {:?}",
                frames.shape()
            )));
        }
        if !(frame_rate_hz > 0.0 && frame_rate_hz.is_finite()) {
            return Err(Error::config(format!("frame rate {frame_rate_hz} must be positive")));
        }
        frames.check_finite("trajectory")?;
        Ok(Self {
            frames,
            frame_rate_hz,
        })
    }

    pub fn from_rows(rows: &[[f64; NUM_CHANNELS]], frame_rate_hz: f64) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?, frame_rate_hz)
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn into_frames(self) -> Tensor {
        self.frames
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_hz
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.frame_rate_hz
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.frames.column(c)
    }

    /// Builds a trajectory from per-channel columns.
    pub fn from_channels(channels: &[Vec<f64>], frame_rate_hz: f64) -> Result<Self> {
        if channels.len() != NUM_CHANNELS {
            return Err(Error::dim(format!(
                "expected {NUM_CHANNELS} channels, got {}",
                channels.len()
            )));
        }
        let t = channels[0].len();
        if channels.iter().any(|c| c.len() != t) {
            return Err(Error::dim("channels have different lengths"));
        }
        let mut data = Vec::with_capacity(t * NUM_CHANNELS);
        for i in 0..t {
            data.extend(channels.iter().map(|c| c[i]));
        }
        Self::new(Tensor::matrix(t, NUM_CHANNELS, data)?, frame_rate_hz)
    }

    pub fn channels(&self) -> Vec<Vec<f64>> {
        (0..NUM_CHANNELS).map(|c| self.channel(c)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub phoneme: String,
    pub start_s: f64,
    pub end_s: f64,
}

impl Interval {
    pub fn new(phoneme: impl Into<String>, start_s: f64, end_s: f64) -> Self {
        Self {
            phoneme: phoneme.into(),
            start_s,
            end_s,
        }
    }

    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.start_s + self.end_s)
    }
}

/// Boundary tolerance when checking contiguity (seconds).
const BOUNDARY_TOL: f64 = 1e-9;

/// Contiguous phoneme intervals starting at 0 s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhonemeAlignment {
    intervals: Vec<Interval>,
}

impl PhonemeAlignment {
    pub fn new(intervals: Vec<Interval>) -> Result<Self> {
        let inv = PhonemeInventory;
        let mut intervals = intervals;
        for (i, iv) in intervals.iter_mut().enumerate() {
            let idx = inv.index(&iv.phoneme)?;
            iv.phoneme = inv.symbol(idx).expect("valid index").to_string();
            if !(iv.duration() > 0.0) {
                return Err(Error::Alignment(format!(
                    "interval {i} ({}) has non-positive duration {}",
                    iv.phoneme,
                    iv.duration()
                )));
            }
        }
        match intervals.first() {
            None => return Err(Error::Alignment("empty alignment".into())),
            Some(first) if first.start_s.abs() > BOUNDARY_TOL => {
                return Err(Error::Alignment(format!(
                    "alignment starts at {} s, expected 0",
                    first.start_s
                )))
            }
            _ => {}
        }
        for (i, pair) in intervals.windows(2).enumerate() {
            if (pair[0].end_s - pair[1].start_s).abs() > BOUNDARY_TOL {
                return Err(Error::Alignment(format!(
                    "gap or overlap between intervals {i} and {}: {} vs {}",
                    i + 1,
                    pair[0].end_s,
                    pair[1].start_s
                )));
            }
        }
        Ok(Self { intervals })
    }

    /// Builds an alignment from phoneme labels and durations in seconds.
    pub fn from_durations<S: AsRef<str>>(phonemes: &[S], durations: &[f64]) -> Result<Self> {
        if phonemes.len() != durations.len() {
            return Err(Error::Alignment("phoneme and duration counts differ".into()));
        }
        let mut t = 0.0;
        let intervals = phonemes
            .iter()
            .zip(durations)
            .map(|(p, d)| {
                let iv = Interval::new(p.as_ref(), t, t + d);
                t += d;
                iv
            })
            .collect();
        Self::new(intervals)
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.intervals
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.intervals.last().map_or(0.0, |iv| iv.end_s)
    }

    pub fn phonemes(&self) -> impl Iterator<Item = &str> {
        self.intervals.iter().map(|iv| iv.phoneme.as_str())
    }
}

/// Audio sample rate expected for waveforms.
pub const AUDIO_RATE_HZ: f64 = 16_000.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub subject: String,
    pub trajectory: ArticulatoryTrajectory,
    pub alignment: PhonemeAlignment,
    /// Mono audio at [`AUDIO_RATE_HZ`].
    pub waveform: Option<Vec<f64>>,
}

impl Utterance {
    pub fn new(
        id: impl Into<String>,
        subject: impl Into<String>,
        trajectory: ArticulatoryTrajectory,
        alignment: PhonemeAlignment,
    ) -> Result<Self> {
        let u = Self {
            id: id.into(),
            subject: subject.into(),
            trajectory,
            alignment,
            waveform: None,
        };
        u.validate()?;
        Ok(u)
    }

    /// Alignment and trajectory must agree in duration to within one frame.
    pub fn validate(&self) -> Result<()> {
        let period = 1.0 / self.trajectory.frame_rate_hz();
        let diff = (self.alignment.duration_s() - self.trajectory.duration_s()).abs();
        if diff > period + BOUNDARY_TOL {
            return Err(Error::Alignment(format!(
                "utterance {}: alignment lasts {:.4} s but trajectory lasts {:.4} s",
                self.id,
                self.alignment.duration_s(),
                self.trajectory.duration_s()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
    pub split: BTreeMap<String, Split>,
}

impl Corpus {
    pub fn new(utterances: Vec<Utterance>) -> Self {
        Self {
            utterances,
            split: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }

    /// Sorted, de-duplicated subject ids.
    pub fn subjects(&self) -> Vec<String> {
        let mut s: Vec<String> = self.utterances.iter().map(|u| u.subject.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    /// Utterances in `part`, in corpus order. Empty if no split is assigned.
    pub fn part(&self, part: Split) -> impl Iterator<Item = &Utterance> {
        self.utterances
            .iter()
            .filter(move |u| self.split.get(&u.id) == Some(&part))
    }

    /// Checks the split is a total, disjoint assignment over the utterances.
    pub fn check_split(&self) -> Result<()> {
        if self.split.len() != self.utterances.len() {
            return Err(Error::data(format!(
                "split covers {} ids but corpus has {} utterances",
                self.split.len(),
                self.utterances.len()
            )));
        }
        for u in &self.utterances {
            if !self.split.contains_key(&u.id) {
                return Err(Error::data(format!("utterance {} has no split", u.id)));
            }
        }
        Ok(())
    }

    /// Corpus restricted to one subject (split assignments kept).
    pub fn subject(&self, subject: &str) -> Corpus {
        let utterances: Vec<Utterance> = self
            .utterances
            .iter()
            .filter(|u| u.subject == subject)
            .cloned()
            .collect();
        let split = utterances
            .iter()
            .filter_map(|u| self.split.get(&u.id).map(|s| (u.id.clone(), *s)))
            .collect();
        Corpus { utterances, split }
    }
}
