use crate::corpus::{PhonemeAlignment, NUM_CHANNELS};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn check_pair(pred: &Tensor, truth: &Tensor) -> Result<()> {
    if pred.cols() != NUM_CHANNELS || truth.cols() != NUM_CHANNELS {
        return Err(Error::dim(format!("metrics need T×{NUM_CHANNELS} inputs")));
    }
    if pred.rows() != truth.rows() {
        return Err(Error::dim(format!(
            "prediction has {} frames but reference has {}; align them with DTW first",
            pred.rows(),
            truth.rows()
        )));
    }
    if pred.rows() == 0 {
        return Err(Error::dim("metrics need at least one frame"));
    }
    Ok(())
}

/// Root-mean-square error per channel.
pub fn rmse_per_articulator(pred: &Tensor, truth: &Tensor) -> Result<[f64; NUM_CHANNELS]> {
    check_pair(pred, truth)?;
    let mut out = [0.0; NUM_CHANNELS];
    for (p, t) in pred.iter_rows().zip(truth.iter_rows()) {
        for c in 0..NUM_CHANNELS {
            out[c] += (p[c] - t[c]) * (p[c] - t[c]);
        }
    }
    let n = pred.rows() as f64;
    Ok(out.map(|s| (s / n).sqrt()))
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    let scale_a = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let scale_b = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    // variance indistinguishable from rounding noise counts as zero
    if va.sqrt() <= 1e-12 * scale_a * n.sqrt() || vb.sqrt() <= 1e-12 * scale_b * n.sqrt() {
        return None;
    }
    Some((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation per channel; undefined channels are `None`.
pub fn cc_per_articulator(pred: &Tensor, truth: &Tensor) -> Result<[Option<f64>; NUM_CHANNELS]> {
    check_pair(pred, truth)?;
    let mut out = [None; NUM_CHANNELS];
    for (c, slot) in out.iter_mut().enumerate() {
        *slot = pearson(&pred.column(c), &truth.column(c));
    }
    Ok(out)
}

/// Mean absolute distance, in frames, between the attention centroid of each
/// phoneme token and the midpoint of that phoneme's interval.
///
/// `alphas` is `T × N` over decoder frames and encoder tokens. `N` may equal
/// the phoneme count, or exceed it by one when the first column belongs to the
/// start token, which is then ignored. Frame `t` is taken to sit at `t + 0.5`.
pub fn attention_diagonality(alphas: &Tensor, alignment: &PhonemeAlignment, frame_period_s: f64) -> Result<f64> {
    let p = alignment.len();
    let n = alphas.cols();
    let skip = match n {
        _ if n == p => 0,
        _ if n == p + 1 => 1,
        _ => {
            return Err(Error::Alignment(format!(
                "attention covers {n} tokens but the alignment has {p} phonemes"
            )))
        }
    };
    if alphas.rows() == 0 {
        return Err(Error::dim("attention matrix has no frames"));
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for (k, iv) in alignment.intervals().iter().enumerate() {
        let col = alphas.column(k + skip);
        let mass: f64 = col.iter().sum();
        if mass <= 1e-300 {
            continue;
        }
        let centroid = col.iter().enumerate().map(|(t, a)| a * (t as f64 + 0.5)).sum::<f64>() / mass;
        total += (centroid - iv.midpoint() / frame_period_s).abs();
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::data("no phoneme token received any attention"));
    }
    Ok(total / counted as f64)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn traj(f: impl Fn(usize, usize) -> f64, n: usize) -> Tensor {
        let data = (0..n * NUM_CHANNELS).map(|i| f(i / NUM_CHANNELS, i % NUM_CHANNELS)).collect();
        Tensor::matrix(n, NUM_CHANNELS, data).unwrap()
    }

    fn wavy(t: usize, c: usize) -> f64 {
        ((t * (c + 1)) as f64 * 0.3).sin() + 0.1 * c as f64
    }

    #[test]
    fn rmse_examples() {
        let a = traj(wavy, 20);
        assert_eq!(rmse_per_articulator(&a, &a).unwrap(), [0.0; NUM_CHANNELS]);
        let b = traj(|t, c| wavy(t, c) + 1.18, 20);
        for v in rmse_per_articulator(&b, &a).unwrap() {
            assert!((v - 1.18).abs() < 1e-12);
        }
        // three frames: errors 1, −2, 2 → sqrt(9/3)
        let p = traj(|t, _| [1.0, -2.0, 2.0][t], 3);
        let z = traj(|_, _| 0.0, 3);
        assert!((rmse_per_articulator(&p, &z).unwrap()[4] - 3f64.sqrt()).abs() < 1e-12);
        let err = rmse_per_articulator(&traj(wavy, 4), &traj(wavy, 5)).unwrap_err();
        assert!(err.to_string().contains("DTW"));
    }

    #[test]
    fn cc_examples() {
        let a = traj(wavy, 30);
        for v in cc_per_articulator(&traj(|t, c| 2.0 * wavy(t, c) + 3.0, 30), &a).unwrap() {
            assert!((v.unwrap() - 1.0).abs() < 1e-12);
        }
        for v in cc_per_articulator(&traj(|t, c| -wavy(t, c), 30), &a).unwrap() {
            assert!((v.unwrap() + 1.0).abs() < 1e-12);
        }
        // x = [1,2,3,4], y = [1,3,2,4]: cov 4, var 5 each → 0.8
        let x = traj(|t, _| [1.0, 2.0, 3.0, 4.0][t], 4);
        let y = traj(|t, _| [1.0, 3.0, 2.0, 4.0][t], 4);
        assert!((cc_per_articulator(&x, &y).unwrap()[0].unwrap() - 0.8).abs() < 1e-12);
        let flat = traj(|_, _| 2.0, 4);
        assert_eq!(cc_per_articulator(&flat, &y).unwrap()[0], None);
    }

    proptest! {
        #[test]
        fn cc_invariant_under_positive_affine(scale in 0.1f64..10.0, shift in -5.0f64..5.0, seed in 0usize..100) {
            let a = traj(|t, c| wavy(t + seed, c), 25);
            let b = traj(|t, c| wavy(t * 2 + 1, c), 25);
            let moved = traj(|t, c| scale * wavy(t + seed, c) + shift, 25);
            let base = cc_per_articulator(&a, &b).unwrap();
            let after = cc_per_articulator(&moved, &b).unwrap();
            for (x, y) in base.iter().zip(&after) {
                prop_assert!((x.unwrap() - y.unwrap()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn diagonal_attention_scores_zero() {
        let al = PhonemeAlignment::from_durations(&["aa", "b", "k"], &[0.04, 0.04, 0.04]).unwrap();
        let mut alphas = Tensor::zeros(&[12, 4]);
        for t in 0..12 {
            alphas.set(t, 1 + t / 4, 1.0);
        }
        assert!(attention_diagonality(&alphas, &al, 0.01).unwrap() < 1e-12);
        let without_start = Tensor::from_rows(&alphas.to_rows().iter().map(|r| r[1..].to_vec()).collect::<Vec<_>>()).unwrap();
        assert!(attention_diagonality(&without_start, &al, 0.01).unwrap() < 1e-12);
    }

    #[test]
    fn uniform_attention_two_phonemes() {
        // midpoints at 2 and 7 frames, utterance midpoint at 5 → (3 + 2) / 2
        let al = PhonemeAlignment::from_durations(&["aa", "b"], &[0.04, 0.06]).unwrap();
        let alphas = Tensor::filled(&[10, 2], 0.5);
        assert!((attention_diagonality(&alphas, &al, 0.01).unwrap() - 2.5).abs() < 1e-9);
        assert!(attention_diagonality(&Tensor::filled(&[10, 5], 0.2), &al, 0.01).is_err());
    }
}
