//! DTW alignment, per-articulator RMSE / CC, report aggregation and attention
//! diagnostics.

mod dtw;
mod metrics;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{PhonemeAlignment, CHANNELS, NUM_CHANNELS};
use crate::error::{Error, Result};
use crate::features::{FeatureKind, FRAME_PERIOD_S};
use crate::numerics::Tensor;

pub use dtw::{dtw_align, warp_pair, DtwAlignment};
pub use metrics::{attention_diagonality, cc_per_articulator, pearson, rmse_per_articulator};

/// Diagonality threshold, in frames, used for the "well aligned" fraction.
pub const DIAGONALITY_FRAMES: f64 = 3.0;

/// One test sentence: a prediction and its reference, both normalized.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub id: String,
    pub subject: String,
    pub predicted: Tensor,
    pub reference: Tensor,
    /// Decoder-frame × token attention weights for the attention model.
    pub alphas: Option<Tensor>,
    pub alignment: Option<PhonemeAlignment>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceScore {
    pub id: String,
    pub subject: String,
    pub predicted_frames: usize,
    pub reference_frames: usize,
    pub rmse: [f64; NUM_CHANNELS],
    pub cc: [Option<f64>; NUM_CHANNELS],
    pub mean_rmse: f64,
    /// Mean over channels with a defined CC.
    pub mean_cc: Option<f64>,
    pub dtw_cost: Option<f64>,
    pub diagonality: Option<f64>,
}

/// Averages attention rows of the prediction onto the reference timeline:
/// reference frame `j` gets the mean of the rows the path pairs with it.
pub fn remap_alphas(alphas: &Tensor, path: &[(usize, usize)], reference_frames: usize) -> Result<Tensor> {
    let n = alphas.cols();
    let mut out = Tensor::zeros(&[reference_frames, n]);
    let mut counts = vec![0usize; reference_frames];
    for &(i, j) in path {
        if i >= alphas.rows() || j >= reference_frames {
            return Err(Error::dim("DTW path indexes past the attention matrix"));
        }
        counts[j] += 1;
        for (o, a) in out.row_mut(j).iter_mut().zip(alphas.row(i)) {
            *o += a;
        }
    }
    for (j, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(Error::dim(format!("DTW path skips reference frame {j}")));
        }
        out.row_mut(j).iter_mut().for_each(|v| *v /= c as f64);
    }
    Ok(out)
}

/// Scores one sentence. With `use_dtw` the prediction is first aligned to the
/// reference and both are expanded along the path; otherwise lengths must match.
pub fn score_prediction(p: &Prediction, use_dtw: bool) -> Result<SentenceScore> {
    let (pred, reference, dtw_cost, alphas) = if use_dtw {
        let dtw = dtw_align(&p.predicted, &p.reference)?;
        let (a, b) = warp_pair(&p.predicted, &p.reference, &dtw.path)?;
        let alphas = p
            .alphas
            .as_ref()
            .map(|al| remap_alphas(al, &dtw.path, p.reference.rows()))
            .transpose()?;
        (a, b, Some(dtw.cost), alphas)
    } else {
        (p.predicted.clone(), p.reference.clone(), None, p.alphas.clone())
    };
    let rmse = rmse_per_articulator(&pred, &reference)?;
    let cc = cc_per_articulator(&pred, &reference)?;
    let defined: Vec<f64> = cc.iter().flatten().copied().collect();
    let diagonality = match (&alphas, &p.alignment) {
        (Some(a), Some(al)) => Some(attention_diagonality(a, al, FRAME_PERIOD_S)?),
        _ => None,
    };
    Ok(SentenceScore {
        id: p.id.clone(),
        subject: p.subject.clone(),
        predicted_frames: p.predicted.rows(),
        reference_frames: p.reference.rows(),
        rmse,
        mean_rmse: rmse.iter().sum::<f64>() / NUM_CHANNELS as f64,
        cc,
        mean_cc: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        dtw_cost,
        diagonality,
    })
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArticulatorSummary {
    pub channel: String,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub cc_mean: Option<f64>,
    pub cc_std: Option<f64>,
    /// Sentences whose CC was undefined for this channel.
    pub cc_undefined: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub sentences: usize,
    pub mean_rmse: f64,
    pub std_rmse: f64,
    pub mean_cc: Option<f64>,
    pub std_cc: Option<f64>,
}

impl Aggregate {
    fn of(scores: &[&SentenceScore]) -> Self {
        let rmse: Vec<f64> = scores.iter().map(|s| s.mean_rmse).collect();
        let cc: Vec<f64> = scores.iter().filter_map(|s| s.mean_cc).collect();
        let (mean_rmse, std_rmse) = mean_std(&rmse);
        let (mean_cc, std_cc) = if cc.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(&cc);
            (Some(m), Some(s))
        };
        Self {
            sentences: scores.len(),
            mean_rmse,
            std_rmse,
            mean_cc,
            std_cc,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagonalitySummary {
    pub mean_frames: f64,
    /// Fraction of sentences within [`DIAGONALITY_FRAMES`].
    pub fraction_within: f64,
    pub threshold_frames: f64,
}

/// Labels carried into the report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportLabels {
    pub regime: String,
    pub model_kind: String,
    pub feature_kind: Option<FeatureKind>,
    pub subject: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub regime: String,
    pub model_kind: String,
    pub feature_kind: Option<FeatureKind>,
    pub subject: Option<String>,
    pub dtw_aligned: bool,
    /// Pooled over all sentences. `mean_cc` is the mean of per-sentence mean CCs.
    pub overall: Aggregate,
    /// Per-subject standard deviations averaged over subjects.
    pub std_rmse_per_subject: f64,
    pub std_cc_per_subject: Option<f64>,
    pub per_subject: BTreeMap<String, Aggregate>,
    pub articulators: Vec<ArticulatorSummary>,
    pub cc_undefined: usize,
    pub diagonality: Option<DiagonalitySummary>,
    pub sentences: Vec<SentenceScore>,
}

impl EvalReport {
    pub fn mean_cc(&self) -> Option<f64> {
        self.overall.mean_cc
    }

    pub fn mean_rmse(&self) -> f64 {
        self.overall.mean_rmse
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::data(format!("serializing report: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::data(format!("parsing report: {e}")))
    }

    /// One row per sentence: id, subject, mean RMSE, mean CC, then per-channel
    /// RMSE and CC. Undefined values are empty cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,subject,mean_rmse,mean_cc,diagonality");
        for c in CHANNELS {
            let _ = write!(out, ",rmse_{c}");
        }
        for c in CHANNELS {
            let _ = write!(out, ",cc_{c}");
        }
        out.push('\n');
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for s in &self.sentences {
            let _ = write!(out, "{},{},{},{},{}", s.id, s.subject, s.mean_rmse, opt(s.mean_cc), opt(s.diagonality));
            for v in s.rmse {
                let _ = write!(out, ",{v}");
            }
            for v in s.cc {
                let _ = write!(out, ",{}", opt(v));
            }
            out.push('\n');
        }
        out
    }
}

/// Aggregates sentence scores into a report.
pub fn build_report(scores: Vec<SentenceScore>, labels: ReportLabels, dtw_aligned: bool) -> Result<EvalReport> {
    if scores.is_empty() {
        return Err(Error::data("cannot build a report from an empty test split"));
    }
    let all: Vec<&SentenceScore> = scores.iter().collect();
    let mut by_subject: BTreeMap<String, Vec<&SentenceScore>> = BTreeMap::new();
    for s in &scores {
        by_subject.entry(s.subject.clone()).or_default().push(s);
    }
    let per_subject: BTreeMap<String, Aggregate> =
        by_subject.iter().map(|(k, v)| (k.clone(), Aggregate::of(v))).collect();
    let std_rmse_per_subject =
        per_subject.values().map(|a| a.std_rmse).sum::<f64>() / per_subject.len() as f64;
    let cc_stds: Vec<f64> = per_subject.values().filter_map(|a| a.std_cc).collect();
    let std_cc_per_subject = (!cc_stds.is_empty()).then(|| cc_stds.iter().sum::<f64>() / cc_stds.len() as f64);

    let articulators = (0..NUM_CHANNELS)
        .map(|c| {
            let rmse: Vec<f64> = scores.iter().map(|s| s.rmse[c]).collect();
            let cc: Vec<f64> = scores.iter().filter_map(|s| s.cc[c]).collect();
            let (rmse_mean, rmse_std) = mean_std(&rmse);
            let (cc_mean, cc_std) = if cc.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&cc);
                (Some(m), Some(s))
            };
            ArticulatorSummary {
                channel: CHANNELS[c].to_string(),
                rmse_mean,
                rmse_std,
                cc_mean,
                cc_std,
                cc_undefined: scores.len() - cc.len(),
            }
        })
        .collect::<Vec<_>>();
    let cc_undefined = articulators.iter().map(|a| a.cc_undefined).sum();

    let diag: Vec<f64> = scores.iter().filter_map(|s| s.diagonality).collect();
    let diagonality = (!diag.is_empty()).then(|| DiagonalitySummary {
        mean_frames: diag.iter().sum::<f64>() / diag.len() as f64,
        fraction_within: diag.iter().filter(|&&d| d <= DIAGONALITY_FRAMES).count() as f64 / diag.len() as f64,
        threshold_frames: DIAGONALITY_FRAMES,
    });

    Ok(EvalReport {
        regime: labels.regime,
        model_kind: labels.model_kind,
        feature_kind: labels.feature_kind,
        subject: labels.subject,
        dtw_aligned,
        overall: Aggregate::of(&all),
        std_rmse_per_subject,
        std_cc_per_subject,
        per_subject,
        articulators,
        cc_undefined,
        diagonality,
        sentences: scores,
    })
}

/// Scores every prediction and aggregates the results.
pub fn evaluate_predictions(predictions: &[Prediction], use_dtw: bool, labels: ReportLabels) -> Result<EvalReport> {
    let scores = predictions
        .iter()
        .map(|p| score_prediction(p, use_dtw))
        .collect::<Result<Vec<_>>>()?;
    build_report(scores, labels, use_dtw)
}
