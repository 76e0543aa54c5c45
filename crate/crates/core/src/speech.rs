//! Synthetic speech-like source material.
//!
//! Each talker is a pulse-train plus noise excitation pushed through two
//! time-varying formant resonators, shaped by syllable-rate envelopes with
//! random pauses. It is deterministic given the seed, strongly non-stationary
//! and super-Gaussian, which is what the separation front-end relies on.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Resonator `y[t] = x[t] + a1 y[t-1] + a2 y[t-2]` with unit peak gain at `freq`.
struct Resonator {
    a1: f64,
    a2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bandwidth: f64, fs: f64) -> Self {
        let mut r = Self {
            a1: 0.0,
            a2: 0.0,
            gain: 1.0,
            y1: 0.0,
            y2: 0.0,
        };
        r.retune(freq, bandwidth, fs);
        r
    }

    fn retune(&mut self, freq: f64, bandwidth: f64, fs: f64) {
        let radius = (-PI * bandwidth / fs).exp();
        let theta = 2.0 * PI * freq / fs;
        self.a1 = 2.0 * radius * theta.cos();
        self.a2 = -radius * radius;
        self.gain = 1.0 - radius;
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.gain * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// `len` samples of speech-like audio at `sample_rate`, normalized to RMS 0.1.
pub fn speech_like(len: usize, sample_rate: u32, seed: u64) -> Vec<f64> {
    let fs = f64::from(sample_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pitch_base: f64 = rng.random_range(95.0..230.0);
    let mut f1 = Resonator::new(500.0, 90.0, fs);
    let mut f2 = Resonator::new(1500.0, 120.0, fs);
    let mut out = Vec::with_capacity(len);
    let mut phase = 0.0;
    let mut lowpass = 0.0;

    while out.len() < len {
        // Pause or syllable.
        if rng.random_bool(0.18) {
            let pause = (rng.random_range(0.15..0.6) * fs) as usize;
            for _ in 0..pause.min(len - out.len()) {
                out.push(0.0);
            }
            continue;
        }
        let dur = (rng.random_range(0.12..0.32) * fs) as usize;
        let level: f64 = rng.random_range(0.3..1.0);
        let voiced = rng.random_bool(0.75);
        let (a1, a2) = (rng.random_range(300.0..900.0), rng.random_range(900.0..2600.0));
        let (b1, b2) = (rng.random_range(300.0..900.0), rng.random_range(900.0..2600.0));
        let pitch = pitch_base * rng.random_range(0.85..1.15);
        for i in 0..dur.min(len - out.len()) {
            let frac = i as f64 / dur as f64;
            if i % 64 == 0 {
                f1.retune(a1 + (b1 - a1) * frac, 90.0, fs);
                f2.retune(a2 + (b2 - a2) * frac, 120.0, fs);
            }
            let env = level * (PI * frac).sin().powf(0.7);
            let noise: f64 = StandardNormal.sample(&mut rng);
            let excitation = if voiced {
                phase += pitch / fs;
                let pulse = if phase >= 1.0 {
                    phase -= 1.0;
                    8.0
                } else {
                    0.0
                };
                pulse + 0.3 * noise
            } else {
                noise
            };
            let shaped = f1.step(excitation) + 0.6 * f2.step(excitation) + 0.05 * excitation;
            lowpass = 0.6 * lowpass + 0.4 * shaped;
            out.push(env * lowpass);
        }
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt();
    if rms > 0.0 {
        for v in &mut out {
            *v *= 0.1 / rms;
        }
    }
    out
}
