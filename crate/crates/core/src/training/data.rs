use std::collections::BTreeMap;

use crate::corpus::{znormalize, Corpus, NormStats, PhonemeAlignment, Split, Utterance};
use crate::error::{Error, Result};
use crate::features::{
    compute_mfcc, concat_features, encode_phn, expand_tphn, FeatureKind, FeatureMatrix, CONCAT_TOLERANCE,
    FRAME_PERIOD_S, MAX_LEN,
};
use crate::numerics::Tensor;

/// One utterance ready for a model: input features and z-normalized targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub subject: String,
    pub features: FeatureMatrix,
    /// `T × 12`, per-utterance z-normalized.
    pub targets: Tensor,
    /// Statistics that map normalized targets back to physical units.
    pub norm: NormStats,
    pub alignment: PhonemeAlignment,
}

/// Acoustic features supplied from outside the corpus (e.g. the synthetic proxy),
/// keyed by utterance id. Utterances not listed fall back to their waveform.
pub type AcousticFeatures = BTreeMap<String, FeatureMatrix>;

fn acoustic(utt: &Utterance, extra: Option<&AcousticFeatures>) -> Result<FeatureMatrix> {
    if let Some(m) = extra.and_then(|e| e.get(&utt.id)) {
        return Ok(m.clone());
    }
    match &utt.waveform {
        Some(w) => compute_mfcc(w),
        None => Err(Error::data(format!("utterance {} has no waveform for MFCC features", utt.id))),
    }
}

/// Builds the input representation of `kind` for one utterance.
pub fn utterance_features(utt: &Utterance, kind: FeatureKind, extra: Option<&AcousticFeatures>) -> Result<FeatureMatrix> {
    match kind {
        FeatureKind::Phn => encode_phn(&utt.alignment),
        FeatureKind::Tphn => expand_tphn(&utt.alignment, FRAME_PERIOD_S),
        FeatureKind::Mfcc => acoustic(utt, extra),
        FeatureKind::MfccTphn => concat_features(&acoustic(utt, extra)?, &expand_tphn(&utt.alignment, FRAME_PERIOD_S)?),
    }
}

/// Pairs features with normalized targets. Frame-synchronous inputs and
/// targets are trimmed to their common length when they differ by at most
/// the concatenation tolerance.
pub fn make_example(utt: &Utterance, kind: FeatureKind, extra: Option<&AcousticFeatures>) -> Result<Example> {
    let rate = utt.trajectory.frame_rate_hz();
    if (rate * FRAME_PERIOD_S - 1.0).abs() > 1e-9 {
        return Err(Error::data(format!(
            "utterance {} is at {rate} Hz; resample to {} Hz first",
            utt.id,
            1.0 / FRAME_PERIOD_S
        )));
    }
    let (traj, norm) = znormalize(&utt.trajectory)?;
    let mut targets = traj.into_frames();
    let mut features = utterance_features(utt, kind, extra)?;
    if kind.is_frame_synchronous() {
        let (nf, nt) = (features.len(), targets.rows());
        if nf.abs_diff(nt) > CONCAT_TOLERANCE {
            return Err(Error::Alignment(format!(
                "utterance {}: {nf} feature frames but {nt} trajectory frames",
                utt.id
            )));
        }
        let n = nf.min(nt);
        targets = targets.head_rows(n);
        if nf != n {
            features = FeatureMatrix::new(features.rows().head_rows(n), kind)?;
        }
    }
    if targets.rows() > MAX_LEN {
        return Err(Error::data(format!(
            "utterance {} has {} frames, above the {MAX_LEN}-frame limit",
            utt.id,
            targets.rows()
        )));
    }
    Ok(Example {
        id: utt.id.clone(),
        subject: utt.subject.clone(),
        features,
        targets,
        norm,
        alignment: utt.alignment.clone(),
    })
}

/// Examples for every utterance in `part`, optionally limited to one subject.
/// Failures are collected so that every offending utterance is reported.
pub fn examples_for(
    corpus: &Corpus,
    part: Split,
    kind: FeatureKind,
    subject: Option<&str>,
    extra: Option<&AcousticFeatures>,
) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    let mut errors = Vec::new();
    for utt in corpus.part(part) {
        if subject.is_some_and(|s| s != utt.subject) {
            continue;
        }
        match make_example(utt, kind, extra) {
            Ok(e) => out.push(e),
            Err(e) => errors.push(format!("{}: {e}", utt.id)),
        }
    }
    if !errors.is_empty() {
        return Err(Error::data(errors.join("; ")));
    }
    Ok(out)
}
