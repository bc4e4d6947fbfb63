//! Mel-frequency cepstral coefficients.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Analysis settings. The defaults are the conventional ASR front end at 16 kHz.
#[derive(Clone, Debug, PartialEq)]
pub struct MfccConfig {
    pub sample_rate_hz: f64,
    pub window: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub num_filters: usize,
    pub num_coeffs: usize,
    pub pre_emphasis: f64,
    pub low_hz: f64,
    pub high_hz: f64,
    /// Lower bound applied to filterbank energies before the log.
    pub energy_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 16_000.0,
            window: 400,
            hop: 160,
            fft_size: 512,
            num_filters: 26,
            num_coeffs: 13,
            pre_emphasis: 0.97,
            low_hz: 0.0,
            high_hz: 8_000.0,
            energy_floor: 1e-10,
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

impl MfccConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.hop == 0 || self.fft_size < self.window {
            return Err(Error::config("MFCC window, hop and FFT size must be positive with fft_size >= window"));
        }
        if self.num_coeffs == 0 || self.num_coeffs > self.num_filters {
            return Err(Error::config("MFCC coefficient count must be in 1..=num_filters"));
        }
        if !(self.low_hz >= 0.0 && self.low_hz < self.high_hz && self.high_hz <= self.sample_rate_hz / 2.0) {
            return Err(Error::config("mel filterbank edges must satisfy 0 <= low < high <= Nyquist"));
        }
        Ok(())
    }

    pub fn num_frames(&self, samples: usize) -> Option<usize> {
        (samples >= self.window).then(|| (samples - self.window) / self.hop + 1)
    }

    /// Triangular filters on the HTK mel scale, one row per filter over the
    /// `fft_size / 2 + 1` power-spectrum bins.
    pub fn filterbank(&self) -> Vec<Vec<f64>> {
        let bins = self.fft_size / 2 + 1;
        let (lo, hi) = (hz_to_mel(self.low_hz), hz_to_mel(self.high_hz));
        let edges: Vec<f64> = (0..self.num_filters + 2)
            .map(|i| {
                let hz = mel_to_hz(lo + (hi - lo) * i as f64 / (self.num_filters + 1) as f64);
                ((self.fft_size + 1) as f64 * hz / self.sample_rate_hz).floor()
            })
            .collect();
        (0..self.num_filters)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..bins)
                    .map(|k| {
                        let k = k as f64;
                        if k > l && k < c {
                            (k - l) / (c - l)
                        } else if k == c {
                            1.0
                        } else if k > c && k < r {
                            (r - k) / (r - c)
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// Frame-wise MFCCs, one row of `num_coeffs` per hop.
///
/// Pre-emphasis, Hamming window, power spectrum, mel filterbank, natural log
/// and orthonormal DCT-II; C0 is kept. No dither is applied.
pub fn mfcc_frames(samples: &[f64], config: &MfccConfig) -> Result<Vec<Vec<f64>>> {
    config.validate()?;
    let n_frames = config.num_frames(samples.len()).ok_or_else(|| {
        Error::data(format!(
            "waveform of {} samples is shorter than one {}-sample window",
            samples.len(),
            config.window
        ))
    })?;
    let emphasized: Vec<f64> = (0..samples.len())
        .map(|i| match i {
            0 => samples[0],
            _ => samples[i] - config.pre_emphasis * samples[i - 1],
        })
        .collect();
    let hamming: Vec<f64> = (0..config.window)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (config.window - 1) as f64).cos())
        .collect();
    let bank = config.filterbank();
    let dct = dct_matrix(config.num_coeffs, config.num_filters);
    let fft = FftPlanner::new().plan_fft_forward(config.fft_size);
    let mut buf = vec![Complex::new(0.0, 0.0); config.fft_size];

    let mut out = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let start = f * config.hop;
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (n, c) in buf.iter_mut().take(config.window).enumerate() {
            c.re = emphasized[start + n] * hamming[n];
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..config.fft_size / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        let log_energies: Vec<f64> = bank
            .iter()
            .map(|filt| {
                let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
                e.max(config.energy_floor).ln()
            })
            .collect();
        out.push(
            dct.iter()
                .map(|row| row.iter().zip(&log_energies).map(|(a, b)| a * b).sum())
                .collect(),
        );
    }
    Ok(out)
}

/// Orthonormal DCT-II basis, `coeffs` rows by `inputs` columns.
fn dct_matrix(coeffs: usize, inputs: usize) -> Vec<Vec<f64>> {
    let m = inputs as f64;
    (0..coeffs)
        .map(|k| {
            let scale = if k == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
            (0..inputs)
                .map(|i| scale * (PI * k as f64 * (i as f64 + 0.5) / m).cos())
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mel_scale_roundtrip() {
        for hz in [0.0, 300.0, 1000.0, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
        assert!((hz_to_mel(1000.0) - 1000.0).abs() < 0.5);
    }

    #[test]
    fn frame_count_formula() {
        let c = MfccConfig::default();
        assert_eq!(c.num_frames(399), None);
        assert_eq!(c.num_frames(400), Some(1));
        assert_eq!(c.num_frames(559), Some(1));
        assert_eq!(c.num_frames(560), Some(2));
        assert_eq!(c.num_frames(16_000), Some(98));
    }

    #[test]
    fn dct_is_orthonormal() {
        let d = dct_matrix(26, 26);
        for i in 0..26 {
            for j in 0..26 {
                let dot: f64 = d[i].iter().zip(&d[j]).map(|(a, b)| a * b).sum();
                assert!((dot - f64::from(u8::from(i == j))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn filters_are_nonempty_triangles() {
        for f in MfccConfig::default().filterbank() {
            assert!(f.iter().any(|&w| w > 0.0));
            assert!(f.iter().all(|&w| (0.0..=1.0).contains(&w)));
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let c = MfccConfig {
            num_coeffs: 30,
            ..MfccConfig::default()
        };
        assert!(mfcc_frames(&[0.0; 1000], &c).is_err());
    }
}
