use crate::corpus::NUM_CHANNELS;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Positive-class weight of the stop-token cross-entropy.
pub const STOP_POS_WEIGHT: f64 = 5.0;

/// Root-mean-square error over the unmasked frames of a padded batch.
///
/// `pred` and `truth` are `B × L × 12`; `mask` is `B × L` with 1.0 on real frames.
pub fn masked_rmse_loss(pred: &Tensor, truth: &Tensor, mask: &Tensor) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::dim(format!(
            "prediction {:?} and target {:?} differ in shape",
            pred.shape(),
            truth.shape()
        )));
    }
    let frames = mask.len();
    if pred.len() != frames * NUM_CHANNELS {
        return Err(Error::dim("mask does not match the batch layout"));
    }
    let mut sse = 0.0;
    let mut count = 0.0;
    for (f, m) in mask.data().iter().enumerate() {
        if *m == 0.0 {
            continue;
        }
        let p = &pred.data()[f * NUM_CHANNELS..(f + 1) * NUM_CHANNELS];
        let t = &truth.data()[f * NUM_CHANNELS..(f + 1) * NUM_CHANNELS];
        sse += m * p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        count += m * NUM_CHANNELS as f64;
    }
    if count == 0.0 {
        return Err(Error::data("every frame of the batch is masked"));
    }
    Ok((sse / count).sqrt())
}

/// Positive-weighted binary cross-entropy of per-step stop probabilities,
/// averaged over the steps before each sequence's end. The target is 1 on the
/// final step and 0 before it.
///
/// `stop_probs` is `B × L`; `lengths[b]` is the number of real steps of row `b`.
pub fn stop_token_loss(stop_probs: &Tensor, lengths: &[usize], pos_weight: f64) -> Result<f64> {
    let (b, l) = (stop_probs.rows(), stop_probs.cols());
    if lengths.len() != b {
        return Err(Error::dim("one length per batch row is required"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, &n) in lengths.iter().enumerate() {
        if n == 0 {
            return Err(Error::data(format!("batch row {r} has zero length")));
        }
        if n > l {
            return Err(Error::dim(format!("length {n} exceeds the padded width {l}")));
        }
        for t in 0..n {
            let p = stop_probs.get(r, t).clamp(1e-15, 1.0 - 1e-15);
            total += if t + 1 == n { -pos_weight * p.ln() } else { -(1.0 - p).ln() };
        }
        count += n;
    }
    Ok(total / count as f64)
}

/// Target and mask vectors for one sequence of `steps` stop logits.
pub(crate) fn stop_targets(steps: usize) -> (Vec<f64>, Vec<f64>) {
    let mut target = vec![0.0; steps];
    target[steps - 1] = 1.0;
    (target, vec![1.0; steps])
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::numerics::{ParameterStore, Tape, Tensor};

    fn batch(b: usize, l: usize, f: impl Fn(usize) -> f64) -> Tensor {
        Tensor::new(vec![b, l, NUM_CHANNELS], (0..b * l * NUM_CHANNELS).map(f).collect()).unwrap()
    }

    #[test]
    fn rmse_closed_forms() {
        let t = batch(2, 5, |i| (i as f64 * 0.7).sin());
        let mask = Tensor::filled(&[2, 5], 1.0);
        assert_eq!(masked_rmse_loss(&t, &t, &mask).unwrap(), 0.0);
        let shifted = batch(2, 5, |i| (i as f64 * 0.7).sin() - 0.3);
        assert!((masked_rmse_loss(&shifted, &t, &mask).unwrap() - 0.3).abs() < 1e-12);
        assert!(masked_rmse_loss(&t, &t, &Tensor::zeros(&[2, 5])).is_err());
        assert!(masked_rmse_loss(&t, &batch(2, 4, |_| 0.0), &mask).is_err());
    }

    proptest! {
        #[test]
        fn padding_is_ignored(noise in proptest::collection::vec(-100.0f64..100.0, 2 * 3 * NUM_CHANNELS)) {
            let t = batch(2, 6, |i| (i as f64).cos());
            let p = batch(2, 6, |i| (i as f64).cos() + 0.1 * (i % 5) as f64);
            let mut mask = Tensor::zeros(&[2, 6]);
            for b in 0..2 {
                for f in 0..3 {
                    mask.set(b, f, 1.0);
                }
            }
            let base = masked_rmse_loss(&p, &t, &mask).unwrap();
            let mut q = p.clone();
            let mut k = 0;
            for b in 0..2 {
                for f in 3..6 {
                    for c in 0..NUM_CHANNELS {
                        q.data_mut()[(b * 6 + f) * NUM_CHANNELS + c] += noise[k];
                        k += 1;
                    }
                }
            }
            prop_assert_eq!(masked_rmse_loss(&q, &t, &mask).unwrap(), base);
        }
    }

    #[test]
    fn stop_loss_closed_forms() {
        let half = Tensor::filled(&[2, 4], 0.5);
        let l = stop_token_loss(&half, &[4, 2], 1.0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let mut perfect = Tensor::zeros(&[1, 3]);
        perfect.set(0, 2, 1.0);
        assert!(stop_token_loss(&perfect, &[3], STOP_POS_WEIGHT).unwrap() < 1e-13);
        assert!(stop_token_loss(&half, &[0, 2], 1.0).is_err());
        assert!(stop_token_loss(&half, &[5, 2], 1.0).is_err());
    }

    #[test]
    fn positive_weight_scales_final_step_gradient() {
        let grads = |w: f64| {
            let mut store = ParameterStore::new();
            let id = store.insert("z", Tensor::column_vector(vec![0.3, -0.2, 0.4])).unwrap();
            let mut tape = Tape::new();
            let z = tape.param(&store, id);
            let (target, mask) = stop_targets(3);
            let l = tape.bce_logits(z, target, mask, w).unwrap();
            tape.backward(&[(l, 1.0)], store.len()).get(id).unwrap().to_vec()
        };
        let (plain, weighted) = (grads(1.0), grads(STOP_POS_WEIGHT));
        // −w·σ(−z) at the final step, σ(z) elsewhere
        assert!((plain[2] + 1.0 / (1.0 + 0.4f64.exp())).abs() < 1e-15);
        assert!((weighted[2] / plain[2] - 5.0).abs() < 1e-14);
        assert_eq!(weighted[..2], plain[..2]);
    }
}
