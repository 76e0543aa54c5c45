//! Short-time Fourier analysis/synthesis with a COLA-checked window pair.
//!
//! Frames are cut from the un-padded signal: frame `tau` covers samples
//! `tau*hop .. tau*hop + frame_len`, and trailing samples that do not fill a
//! whole frame are dropped. Each frame is zero-padded to `fft_len` before the
//! DFT and only the `fft_len/2 + 1` non-negative bins are stored.

use std::f64::consts::PI;
use std::ops::Range;

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::signal::MultichannelSignal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowKind {
    /// Periodic square-root Hann, used for both analysis and synthesis.
    SqrtHann,
    Rectangular,
}

impl WindowKind {
    pub fn samples(self, len: usize) -> Vec<f64> {
        match self {
            WindowKind::SqrtHann => (0..len)
                .map(|n| (0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos()).max(0.0).sqrt())
                .collect(),
            WindowKind::Rectangular => vec![1.0; len],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub fft_len: usize,
    pub window: WindowKind,
}

impl StftConfig {
    /// sqrt-Hann frames at 50% overlap with no zero padding.
    pub fn sqrt_hann(frame_len: usize) -> Self {
        Self {
            frame_len,
            hop: frame_len / 2,
            fft_len: frame_len,
            window: WindowKind::SqrtHann,
        }
    }

    pub fn bins(&self) -> usize {
        self.fft_len / 2 + 1
    }

    pub fn num_frames(&self, len: usize) -> usize {
        if len < self.frame_len || self.hop == 0 {
            0
        } else {
            (len - self.frame_len) / self.hop + 1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_len == 0 || self.fft_len < self.frame_len {
            return Err(Error::Config(format!(
                "need 0 < frame_len ({}) <= fft_len ({})",
                self.frame_len, self.fft_len
            )));
        }
        if self.fft_len % 2 != 0 {
            return Err(Error::Config(format!("fft_len {} must be even", self.fft_len)));
        }
        if self.hop == 0 || self.hop > self.frame_len {
            return Err(Error::Config(format!(
                "hop {} must lie in 1..={}",
                self.hop, self.frame_len
            )));
        }
        let w = self.window.samples(self.frame_len);
        cola_constant(&w, &w, self.hop).map(|_| ())
    }
}

/// Overlap-add sum of `analysis * synthesis` at the given hop, if it is constant.
pub fn cola_constant(analysis: &[f64], synthesis: &[f64], hop: usize) -> Result<f64> {
    let n = analysis.len();
    let sums: Vec<f64> = (0..hop)
        .map(|i| (i..n).step_by(hop).map(|j| analysis[j] * synthesis[j]).sum())
        .collect();
    let max = sums.iter().cloned().fold(f64::MIN, f64::max);
    let min = sums.iter().cloned().fold(f64::MAX, f64::min);
    if max <= 0.0 || max - min > 1e-10 * max {
        return Err(Error::Config(format!(
            "window pair is not constant-overlap-add at hop {hop} (range {min}..{max})"
        )));
    }
    Ok(max)
}

/// Complex STFT coefficients, `channels x frames x bins`.
#[derive(Debug, Clone, PartialEq)]
pub struct StftTensor {
    pub coeffs: Array3<Complex64>,
    pub frame_len: usize,
    pub hop: usize,
    pub fft_len: usize,
    pub analysis_window: Vec<f64>,
    pub synthesis_window: Vec<f64>,
    pub sample_rate: u32,
}

impl StftTensor {
    pub fn channels(&self) -> usize {
        self.coeffs.dim().0
    }

    pub fn frames(&self) -> usize {
        self.coeffs.dim().1
    }

    pub fn bins(&self) -> usize {
        self.coeffs.dim().2
    }

    pub fn config(&self) -> StftConfig {
        let window = if self.analysis_window.iter().all(|&v| v == 1.0) {
            WindowKind::Rectangular
        } else {
            WindowKind::SqrtHann
        };
        StftConfig {
            frame_len: self.frame_len,
            hop: self.hop,
            fft_len: self.fft_len,
            window,
        }
    }

    /// Same metadata, new coefficients.
    pub fn with_coeffs(&self, coeffs: Array3<Complex64>) -> Self {
        Self {
            coeffs,
            frame_len: self.frame_len,
            hop: self.hop,
            fft_len: self.fft_len,
            analysis_window: self.analysis_window.clone(),
            synthesis_window: self.synthesis_window.clone(),
            sample_rate: self.sample_rate,
        }
    }

    /// Samples covered by at least two overlapping frames: `[frame_len - hop, last_start + hop)`.
    pub fn interior(&self) -> Range<usize> {
        if self.frames() == 0 {
            return 0..0;
        }
        let last_start = (self.frames() - 1) * self.hop;
        (self.frame_len - self.hop)..(last_start + self.hop)
    }

    fn check(&self) -> Result<()> {
        if self.bins() != self.fft_len / 2 + 1 {
            return Err(Error::Shape(format!(
                "{} bins inconsistent with fft_len {}",
                self.bins(),
                self.fft_len
            )));
        }
        if self.analysis_window.len() != self.frame_len || self.synthesis_window.len() != self.frame_len {
            return Err(Error::Shape("window length differs from frame_len".into()));
        }
        if self.fft_len < self.frame_len || self.hop == 0 || self.hop > self.frame_len {
            return Err(Error::Shape("inconsistent frame/hop/fft lengths".into()));
        }
        Ok(())
    }
}

pub fn stft(signal: &MultichannelSignal, config: &StftConfig) -> Result<StftTensor> {
    config.validate()?;
    let frames = config.num_frames(signal.len());
    if frames == 0 {
        return Err(Error::Config(format!(
            "signal of {} samples is shorter than one {}-sample frame",
            signal.len(),
            config.frame_len
        )));
    }
    let window = config.window.samples(config.frame_len);
    let bins = config.bins();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(config.fft_len);
    let per_channel: Vec<Array2<Complex64>> = par::map_range(signal.channels(), |c| {
        let x = signal.channel(c);
        let mut out = Array2::zeros((frames, bins));
        let mut buf = vec![Complex64::new(0.0, 0.0); config.fft_len];
        for tau in 0..frames {
            let start = tau * config.hop;
            for (n, b) in buf.iter_mut().enumerate() {
                *b = if n < config.frame_len {
                    Complex64::new(window[n] * x[start + n], 0.0)
                } else {
                    Complex64::new(0.0, 0.0)
                };
            }
            fft.process(&mut buf);
            for f in 0..bins {
                out[[tau, f]] = buf[f];
            }
        }
        out
    });
    let mut coeffs = Array3::zeros((signal.channels(), frames, bins));
    for (c, block) in per_channel.into_iter().enumerate() {
        coeffs.index_axis_mut(ndarray::Axis(0), c).assign(&block);
    }
    Ok(StftTensor {
        coeffs,
        frame_len: config.frame_len,
        hop: config.hop,
        fft_len: config.fft_len,
        analysis_window: window.clone(),
        synthesis_window: window,
        sample_rate: signal.sample_rate(),
    })
}

/// Weighted overlap-add resynthesis to `target_len` samples.
///
/// Each output sample is normalized by the overlap-added window product
/// actually covering it, so the result is exact wherever that sum is non-zero.
pub fn istft(tensor: &StftTensor, target_len: usize) -> Result<MultichannelSignal> {
    tensor.check()?;
    let StftTensor {
        frame_len,
        hop,
        fft_len,
        ..
    } = *tensor;
    let bins = tensor.bins();
    let frames = tensor.frames();
    let mut norm = vec![0.0; target_len];
    for tau in 0..frames {
        for n in 0..frame_len {
            let t = tau * hop + n;
            if t < target_len {
                norm[t] += tensor.analysis_window[n] * tensor.synthesis_window[n];
            }
        }
    }
    let peak = norm.iter().cloned().fold(0.0, f64::max);
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(fft_len);
    let scale = 1.0 / fft_len as f64;
    let channels: Vec<Vec<f64>> = par::map_range(tensor.channels(), |c| {
        let mut out = vec![0.0; target_len];
        let mut buf = vec![Complex64::new(0.0, 0.0); fft_len];
        for tau in 0..frames {
            for f in 0..bins {
                buf[f] = tensor.coeffs[[c, tau, f]];
            }
            for f in bins..fft_len {
                buf[f] = buf[fft_len - f].conj();
            }
            // DC and Nyquist of a real frame are real.
            buf[0].im = 0.0;
            buf[fft_len / 2].im = 0.0;
            ifft.process(&mut buf);
            for n in 0..frame_len {
                let t = tau * hop + n;
                if t >= target_len {
                    break;
                }
                out[t] += buf[n].re * scale * tensor.synthesis_window[n];
            }
        }
        for (o, &w) in out.iter_mut().zip(&norm) {
            *o = if w > 1e-10 * peak { *o / w } else { 0.0 };
        }
        out
    });
    MultichannelSignal::from_channels(channels, tensor.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn zero_signal_gives_zero_tensor() {
        let x = MultichannelSignal::zeros(2, 1024, 16000);
        let t = stft(&x, &StftConfig::sqrt_hann(256)).unwrap();
        assert!(t.coeffs.iter().all(|c| c.norm() == 0.0));
        let y = istft(&t.with_coeffs(t.coeffs.clone()), 1024).unwrap();
        assert!(y.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn impulse_with_rectangular_window_is_flat() {
        let mut v = vec![0.0; 64];
        v[0] = 1.0;
        let x = MultichannelSignal::mono(v, 8000).unwrap();
        let cfg = StftConfig {
            frame_len: 16,
            hop: 16,
            fft_len: 16,
            window: WindowKind::Rectangular,
        };
        let t = stft(&x, &cfg).unwrap();
        for f in 0..t.bins() {
            assert!((t.coeffs[[0, 0, f]].norm() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn frame_count_follows_unpadded_policy() {
        let x = MultichannelSignal::zeros(1, 1000, 8000);
        let t = stft(&x, &StftConfig::sqrt_hann(256)).unwrap();
        assert_eq!(t.frames(), (1000 - 256) / 128 + 1);
        assert_eq!(t.bins(), 129);
    }

    #[test]
    fn non_cola_hop_is_rejected() {
        let cfg = StftConfig {
            frame_len: 256,
            hop: 100,
            fft_len: 256,
            window: WindowKind::SqrtHann,
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let short = MultichannelSignal::zeros(1, 100, 8000);
        assert!(stft(&short, &StftConfig::sqrt_hann(256)).is_err());
    }

    #[test]
    fn on_bin_sinusoid_has_low_leakage() {
        let n = 512;
        let k0 = 40.0;
        let v: Vec<f64> = (0..4 * n).map(|t| (2.0 * PI * k0 * t as f64 / n as f64).cos()).collect();
        let x = MultichannelSignal::mono(v, 16000).unwrap();
        let t = stft(&x, &StftConfig::sqrt_hann(n)).unwrap();
        // Direct DFT of the windowed frame as an independent check.
        let w = WindowKind::SqrtHann.samples(n);
        let direct = |f: usize| -> f64 {
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..n {
                let arg = -2.0 * PI * (f * i) as f64 / n as f64;
                acc += Complex64::from_polar(w[i] * x.samples()[[0, i]], arg);
            }
            acc.norm()
        };
        let peak = t.coeffs[[0, 0, 40]].norm();
        assert!((peak - direct(40)).abs() < 1e-9 * peak);
        // The sqrt-Hann (sine) window's first sidelobe sits two bins out at about -23.5 dB.
        for f in 0..t.bins() {
            let offset = (f as isize - 40).abs();
            if offset == 2 {
                let rel = 20.0 * (t.coeffs[[0, 0, f]].norm() / peak).log10();
                assert!((rel - 20.0 * (1.0f64 / 15.0).log10()).abs() < 0.1);
            }
            if offset > 2 {
                let rel = 20.0 * (t.coeffs[[0, 0, f]].norm() / peak).log10();
                assert!(rel < -30.0, "bin {f} leaks at {rel} dB");
            }
        }
    }

    #[test]
    fn parseval_per_frame() {
        let x = MultichannelSignal::mono(noise(4096, 3), 16000).unwrap();
        let cfg = StftConfig {
            frame_len: 512,
            hop: 256,
            fft_len: 1024,
            window: WindowKind::SqrtHann,
        };
        let t = stft(&x, &cfg).unwrap();
        let w = cfg.window.samples(512);
        for tau in 0..t.frames() {
            let time: f64 = (0..512).map(|n| (w[n] * x.samples()[[0, tau * 256 + n]]).powi(2)).sum();
            let mut freq = 0.0;
            for f in 0..t.bins() {
                let weight = if f == 0 || f == t.bins() - 1 { 1.0 } else { 2.0 };
                freq += weight * t.coeffs[[0, tau, f]].norm_sqr();
            }
            freq /= 1024.0;
            assert!((time - freq).abs() < 1e-9 * time);
        }
    }

    #[test]
    fn round_trip_restores_interior() {
        let x = MultichannelSignal::from_channels(vec![noise(5000, 1), noise(5000, 2)], 16000).unwrap();
        for cfg in [
            StftConfig::sqrt_hann(512),
            StftConfig {
                frame_len: 400,
                hop: 100,
                fft_len: 512,
                window: WindowKind::SqrtHann,
            },
        ] {
            let t = stft(&x, &cfg).unwrap();
            let y = istft(&t, x.len()).unwrap();
            let peak = x.peak();
            for c in 0..2 {
                for i in t.interior() {
                    assert!((x.samples()[[c, i]] - y.samples()[[c, i]]).abs() < 1e-10 * peak);
                }
            }
        }
    }

    #[test]
    fn inconsistent_metadata_is_rejected() {
        let x = MultichannelSignal::mono(noise(2048, 4), 16000).unwrap();
        let mut t = stft(&x, &StftConfig::sqrt_hann(256)).unwrap();
        t.fft_len = 512;
        assert!(istft(&t, 2048).is_err());
    }
}
