//! Zero-phase Butterworth low-pass filtering.

use std::f64::consts::PI;

use super::ArticulatoryTrajectory;
use crate::error::{Error, Result};

/// Order of the low-pass prototype.
pub const FILTER_ORDER: usize = 4;

/// Second-order section `(b0 + b1 z⁻¹ + b2 z⁻²) / (1 + a1 z⁻¹ + a2 z⁻²)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    pub fn dc_gain(&self) -> f64 {
        self.b.iter().sum::<f64>() / (1.0 + self.a[0] + self.a[1])
    }

    /// Transposed direct form II state that holds the output steady for a
    /// constant input `x0`.
    fn steady_state(&self, x0: f64) -> [f64; 2] {
        let y0 = self.dc_gain() * x0;
        let z2 = self.b[2] * x0 - self.a[1] * y0;
        let z1 = self.b[1] * x0 - self.a[0] * y0 + z2;
        [z1, z2]
    }

    fn run(&self, xs: &mut [f64]) {
        let Some(&x0) = xs.first() else { return };
        let [mut z1, mut z2] = self.steady_state(x0);
        for x in xs.iter_mut() {
            let input = *x;
            let y = self.b[0] * input + z1;
            z1 = self.b[1] * input - self.a[0] * y + z2;
            z2 = self.b[2] * input - self.a[1] * y;
            *x = y;
        }
    }
}

/// Designs an even-order Butterworth low-pass as cascaded biquads via the
/// bilinear transform with frequency pre-warping.
pub fn butterworth_lowpass(order: usize, cutoff_hz: f64, sample_rate_hz: f64) -> Result<Vec<Biquad>> {
    if order == 0 || order % 2 != 0 {
        return Err(Error::config(format!("filter order {order} must be even and positive")));
    }
    let nyquist = sample_rate_hz / 2.0;
    if !(cutoff_hz > 0.0 && cutoff_hz < nyquist) {
        return Err(Error::config(format!(
            "cutoff {cutoff_hz} Hz must lie in (0, {nyquist}) Hz for a {sample_rate_hz} Hz signal"
        )));
    }
    let k = 2.0 * sample_rate_hz;
    let wc = k * (PI * cutoff_hz / sample_rate_hz).tan();
    let wc2 = wc * wc;
    let sections = (0..order / 2)
        .map(|i| {
            // analog pole pair at angle θ from the negative real axis
            let theta = PI * (2 * i + 1) as f64 / (2 * order) as f64;
            let damping = 2.0 * theta.cos() * wc; // −2·Re(p)·ωc
            let a0 = k * k + damping * k + wc2;
            Biquad {
                b: [wc2 / a0, 2.0 * wc2 / a0, wc2 / a0],
                a: [(2.0 * wc2 - 2.0 * k * k) / a0, (k * k - damping * k + wc2) / a0],
            }
        })
        .collect();
    Ok(sections)
}

/// Forward-backward application of `sections` with odd-symmetric edge
/// extension and steady-state initial conditions.
pub fn filtfilt(sections: &[Biquad], signal: &[f64]) -> Vec<f64> {
    let n = signal.len();
    if n < 2 {
        return signal.to_vec();
    }
    let pad = (3 * (2 * sections.len() + 1)).min(n - 1);
    let first = signal[0];
    let last = signal[n - 1];
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * first - signal[i]));
    ext.extend_from_slice(signal);
    ext.extend((1..=pad).map(|i| 2.0 * last - signal[n - 1 - i]));
    for s in sections {
        s.run(&mut ext);
    }
    ext.reverse();
    for s in sections {
        s.run(&mut ext);
    }
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

/// Zero-phase 4th-order Butterworth low-pass applied to every channel.
pub fn lowpass_filter(traj: &ArticulatoryTrajectory, cutoff_hz: f64) -> Result<ArticulatoryTrajectory> {
    let sections = butterworth_lowpass(FILTER_ORDER, cutoff_hz, traj.frame_rate_hz())?;
    let channels: Vec<Vec<f64>> = traj
        .channels()
        .iter()
        .map(|c| filtfilt(&sections, c))
        .collect();
    ArticulatoryTrajectory::from_channels(&channels, traj.frame_rate_hz())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::NUM_CHANNELS;

    /// |H(e^{jω})|² of a cascade evaluated directly from its coefficients.
    fn magnitude_squared(sections: &[Biquad], freq_hz: f64, rate_hz: f64) -> f64 {
        let w = 2.0 * PI * freq_hz / rate_hz;
        sections
            .iter()
            .map(|s| {
                let poly = |c: [f64; 3]| {
                    let re = c[0] + c[1] * w.cos() + c[2] * (2.0 * w).cos();
                    let im = -c[1] * w.sin() - c[2] * (2.0 * w).sin();
                    re * re + im * im
                };
                poly(s.b) / poly([1.0, s.a[0], s.a[1]])
            })
            .product()
    }

    fn sine_traj(freq: f64, rate: f64, seconds: f64) -> ArticulatoryTrajectory {
        let n = (seconds * rate) as usize;
        let ch: Vec<f64> = (0..n)
            .map(|i| (2.0 * PI * freq * i as f64 / rate).sin())
            .collect();
        ArticulatoryTrajectory::from_channels(&vec![ch; NUM_CHANNELS], rate).unwrap()
    }

    /// √2·RMS over the middle half, away from edge transients. The test tones
    /// complete a whole number of periods there, so this is the amplitude.
    fn mid_amplitude(xs: &[f64]) -> f64 {
        let n = xs.len();
        let mid = &xs[n / 4..3 * n / 4];
        (2.0 * mid.iter().map(|v| v * v).sum::<f64>() / mid.len() as f64).sqrt()
    }

    #[test]
    fn design_matches_butterworth_magnitude() {
        let s = butterworth_lowpass(4, 25.0, 250.0).unwrap();
        assert!((s.iter().map(Biquad::dc_gain).product::<f64>() - 1.0).abs() < 1e-12);
        // −3 dB at the cutoff: |H|² = 1/2
        assert!((magnitude_squared(&s, 25.0, 250.0) - 0.5).abs() < 1e-9);
        // pre-warped Butterworth: 1 / (1 + (tan(πf/fs)/tan(πfc/fs))^8)
        for f in [5.0, 10.0, 40.0, 60.0, 100.0] {
            let r = (PI * f / 250.0).tan() / (PI * 25.0 / 250.0).tan();
            let expected = 1.0 / (1.0 + r.powi(8));
            assert!((magnitude_squared(&s, f, 250.0) - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn dc_is_unchanged() {
        let traj = ArticulatoryTrajectory::from_channels(&vec![vec![3.25; 200]; NUM_CHANNELS], 250.0).unwrap();
        let out = lowpass_filter(&traj, 25.0).unwrap();
        assert!(out.frames().max_abs_diff(traj.frames()) < 1e-6);
    }

    #[test]
    fn passband_and_stopband_gains() {
        let s = butterworth_lowpass(4, 25.0, 250.0).unwrap();
        // zero-phase gain is |H|²
        let g10 = magnitude_squared(&s, 10.0, 250.0);
        let g60 = magnitude_squared(&s, 60.0, 250.0);
        assert!((0.95..=1.0).contains(&g10));
        assert!(g60 < 0.1);

        let out = lowpass_filter(&sine_traj(10.0, 250.0, 4.0), 25.0).unwrap();
        let amp = mid_amplitude(&out.channel(0));
        assert!((0.95..=1.0).contains(&amp), "10 Hz gain {amp}");
        assert!((amp - g10).abs() < 1e-3);

        let out = lowpass_filter(&sine_traj(60.0, 250.0, 4.0), 25.0).unwrap();
        let amp = mid_amplitude(&out.channel(0));
        assert!(amp < 0.1, "60 Hz gain {amp}");
    }

    #[test]
    fn filtering_twice_barely_changes_passband_tone() {
        let once = lowpass_filter(&sine_traj(10.0, 250.0, 4.0), 25.0).unwrap();
        let twice = lowpass_filter(&once, 25.0).unwrap();
        let a1 = mid_amplitude(&once.channel(3));
        let a2 = mid_amplitude(&twice.channel(3));
        assert!(((a1 - a2) / a1).abs() < 0.01);
    }

    #[test]
    fn cutoff_at_or_above_nyquist_rejected() {
        let traj = sine_traj(1.0, 100.0, 1.0);
        assert!(matches!(lowpass_filter(&traj, 50.0), Err(Error::Config(_))));
        assert!(lowpass_filter(&traj, 60.0).is_err());
        assert!(lowpass_filter(&traj, 25.0).is_ok());
    }

    #[test]
    fn length_preserved_for_short_signals() {
        for n in [1usize, 2, 3, 10, 31] {
            let traj = ArticulatoryTrajectory::from_channels(
                &vec![(0..n).map(|i| i as f64).collect(); NUM_CHANNELS],
                100.0,
            )
            .unwrap();
            assert_eq!(lowpass_filter(&traj, 25.0).unwrap().len(), n);
        }
    }
}
