use serde::{Deserialize, Serialize};

use super::{ArticulatoryTrajectory, NUM_CHANNELS};
use crate::error::{Error, Result};

/// Per-channel statistics removed by [`znormalize`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    /// Population standard deviation; 0 for constant channels.
    pub std: Vec<f64>,
}

impl NormStats {
    /// Maps normalized values back to the original scale.
    pub fn denormalize(&self, traj: &ArticulatoryTrajectory) -> Result<ArticulatoryTrajectory> {
        let channels: Vec<Vec<f64>> = traj
            .channels()
            .into_iter()
            .enumerate()
            .map(|(c, xs)| xs.iter().map(|v| v * self.std[c] + self.mean[c]).collect())
            .collect();
        ArticulatoryTrajectory::from_channels(&channels, traj.frame_rate_hz())
    }
}

/// Sentence-wise mean removal and variance normalization per channel.
///
/// Constant channels map to zeros and record a standard deviation of 0.
pub fn znormalize(traj: &ArticulatoryTrajectory) -> Result<(ArticulatoryTrajectory, NormStats)> {
    let n = traj.len();
    if n < 2 {
        return Err(Error::dim(format!("z-normalization needs at least 2 frames, got {n}")));
    }
    let mut means = Vec::with_capacity(NUM_CHANNELS);
    let mut stds = Vec::with_capacity(NUM_CHANNELS);
    let mut channels = Vec::with_capacity(NUM_CHANNELS);
    for xs in traj.channels() {
        let (normed, mean, std) = znormalize_slice(&xs);
        means.push(mean);
        stds.push(std);
        channels.push(normed);
    }
    Ok((
        ArticulatoryTrajectory::from_channels(&channels, traj.frame_rate_hz())?,
        NormStats { mean: means, std: stds },
    ))
}

/// Degenerate-variance threshold relative to the channel's magnitude.
const DEGENERATE_REL: f64 = 1e-12;

pub(crate) fn znormalize_slice(xs: &[f64]) -> (Vec<f64>, f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let scale = xs.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    if std <= DEGENERATE_REL * scale {
        return (vec![0.0; xs.len()], mean, 0.0);
    }
    (xs.iter().map(|v| (v - mean) / std).collect(), mean, std)
}

/// Resamples to `target_rate_hz` with Catmull-Rom cubic interpolation.
///
/// The output has `round(T · target / rate)` frames, frame `k` sampled at time
/// `k / target`. Edge neighbours are linearly extrapolated, so affine signals
/// are reproduced exactly; identical rates return the input unchanged.
pub fn resample(traj: &ArticulatoryTrajectory, target_rate_hz: f64) -> Result<ArticulatoryTrajectory> {
    if !(target_rate_hz > 0.0 && target_rate_hz.is_finite()) {
        return Err(Error::config(format!("target rate {target_rate_hz} must be positive")));
    }
    let rate = traj.frame_rate_hz();
    if rate == target_rate_hz {
        return Ok(traj.clone());
    }
    let n_in = traj.len();
    let n_out = ((n_in as f64) * target_rate_hz / rate).round() as usize;
    let step = rate / target_rate_hz;
    let channels: Vec<Vec<f64>> = traj
        .channels()
        .iter()
        .map(|xs| (0..n_out).map(|k| catmull_rom(xs, k as f64 * step)).collect())
        .collect();
    ArticulatoryTrajectory::from_channels(&channels, target_rate_hz)
}

/// Evaluates the Catmull-Rom spline through `xs` at fractional index `pos`.
fn catmull_rom(xs: &[f64], pos: f64) -> f64 {
    let n = xs.len();
    match n {
        0 => return 0.0,
        1 => return xs[0],
        _ => {}
    }
    // sample with linear extrapolation beyond both ends
    let at = |i: isize| -> f64 {
        if i < 0 {
            xs[0] + (xs[0] - xs[1]) * (-i) as f64
        } else if i as usize >= n {
            let over = i as usize - (n - 1);
            xs[n - 1] + (xs[n - 1] - xs[n - 2]) * over as f64
        } else {
            xs[i as usize]
        }
    };
    let i = pos.floor() as isize;
    let u = pos - i as f64;
    if u == 0.0 {
        return at(i);
    }
    let (p0, p1, p2, p3) = (at(i - 1), at(i), at(i + 1), at(i + 2));
    let u2 = u * u;
    let u3 = u2 * u;
    0.5 * (2.0 * p1
        + (p2 - p0) * u
        + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * u2
        + (3.0 * p1 - p0 - 3.0 * p2 + p3) * u3)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use proptest::prelude::*;

    use super::*;
    use crate::numerics::Tensor;

    fn from_fn(n: usize, rate: f64, f: impl Fn(usize, f64) -> f64) -> ArticulatoryTrajectory {
        let channels: Vec<Vec<f64>> = (0..NUM_CHANNELS)
            .map(|c| (0..n).map(|i| f(c, i as f64 / rate)).collect())
            .collect();
        ArticulatoryTrajectory::from_channels(&channels, rate).unwrap()
    }

    #[test]
    fn identity_rate_is_identical() {
        let t = from_fn(50, 250.0, |c, t| (t * (c + 1) as f64).sin());
        assert_eq!(resample(&t, 250.0).unwrap(), t);
    }

    #[test]
    fn linear_ramp_stays_linear() {
        let t = from_fn(250, 250.0, |c, t| 0.5 + (c as f64 - 3.0) * t);
        let r = resample(&t, 100.0).unwrap();
        assert_eq!(r.len(), 100);
        for (k, row) in r.frames().iter_rows().enumerate() {
            let time = k as f64 / 100.0;
            for (c, v) in row.iter().enumerate() {
                assert!((v - (0.5 + (c as f64 - 3.0) * time)).abs() < 1e-9);
            }
        }
        // upsampling extrapolates the ramp exactly past the final sample
        let up = resample(&from_fn(10, 100.0, |_, t| 2.0 * t - 1.0), 250.0).unwrap();
        for (k, row) in up.frames().iter_rows().enumerate() {
            assert!((row[0] - (2.0 * k as f64 / 250.0 - 1.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn five_hz_sine_250_to_100() {
        let t = from_fn(500, 250.0, |_, t| (2.0 * PI * 5.0 * t).sin());
        let r = resample(&t, 100.0).unwrap();
        assert_eq!(r.len(), 200);
        let worst = r
            .channel(0)
            .iter()
            .enumerate()
            .map(|(k, v)| (v - (2.0 * PI * 5.0 * k as f64 / 100.0).sin()).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-3, "max deviation {worst}");
    }

    #[test]
    fn duration_preserved() {
        for n in [37usize, 250, 401] {
            let t = from_fn(n, 250.0, |_, t| t);
            let r = resample(&t, 100.0).unwrap();
            assert!((r.duration_s() - t.duration_s()).abs() <= 0.01 + 1e-12);
        }
        assert!(resample(&from_fn(5, 250.0, |_, t| t), 0.0).is_err());
        assert!(resample(&from_fn(5, 250.0, |_, t| t), -100.0).is_err());
    }

    #[test]
    fn znormalize_examples() {
        let mut cols = vec![vec![1.0, 2.0, 3.0]; NUM_CHANNELS];
        cols[5] = vec![4.0, 4.0, 4.0];
        let t = ArticulatoryTrajectory::from_channels(&cols, 100.0).unwrap();
        let (z, stats) = znormalize(&t).unwrap();
        let k = 1.5f64.sqrt(); // 1 / population std of [1,2,3]
        let expected = [-k, 0.0, k];
        for (a, b) in z.channel(0).iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((z.channel(0)[2] - 1.2247).abs() < 1e-4);
        assert_eq!(z.channel(5), vec![0.0; 3]);
        assert_eq!(stats.std[5], 0.0);
        assert_eq!(stats.mean[5], 4.0);

        let (again, _) = znormalize(&z).unwrap();
        assert!(again.frames().max_abs_diff(z.frames()) < 1e-12);

        let back = stats.denormalize(&z).unwrap();
        assert!(back.frames().max_abs_diff(t.frames()) < 1e-12);

        let single = ArticulatoryTrajectory::new(Tensor::zeros(&[1, NUM_CHANNELS]), 100.0).unwrap();
        assert!(znormalize(&single).is_err());
    }

    proptest! {
        #[test]
        fn normalized_moments(seed in 0u64..1000, n in 2usize..60) {
            let t = from_fn(n, 100.0, |c, t| ((seed as f64 + 1.0) * t * (c as f64 + 0.3)).sin() * 5.0 + c as f64);
            let (z, stats) = znormalize(&t).unwrap();
            for c in 0..NUM_CHANNELS {
                let xs = z.channel(c);
                let mean = xs.iter().sum::<f64>() / n as f64;
                prop_assert!(mean.abs() < 1e-9);
                if stats.std[c] > 0.0 {
                    let var = xs.iter().map(|v| v * v).sum::<f64>() / n as f64;
                    prop_assert!((var - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}
