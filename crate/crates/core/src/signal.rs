//! Time-domain signal containers and causal FIR filtering.

use std::ops::Range;

use ndarray::{Array2, ArrayView1, Axis};

use crate::dsp;
use crate::error::{Error, Result};

/// Real samples laid out as `channels x length` at a common sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct MultichannelSignal {
    samples: Array2<f64>,
    sample_rate: u32,
}

impl MultichannelSignal {
    pub fn new(samples: Array2<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if let Some(bad) = samples.iter().find(|v| !v.is_finite()) {
            return Err(Error::Config(format!("non-finite sample {bad}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn from_channels(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        let len = channels.first().map_or(0, Vec::len);
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::Shape("channels have different lengths".into()));
        }
        let n = channels.len();
        let flat: Vec<f64> = channels.into_iter().flatten().collect();
        let samples = Array2::from_shape_vec((n, len), flat).map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(samples, sample_rate)
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        Self::from_channels(vec![samples], sample_rate)
    }

    pub fn zeros(channels: usize, len: usize, sample_rate: u32) -> Self {
        Self {
            samples: Array2::zeros((channels, len)),
            sample_rate,
        }
    }

    pub fn channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    pub fn into_samples(self) -> Array2<f64> {
        self.samples
    }

    pub fn channel(&self, c: usize) -> ArrayView1<'_, f64> {
        self.samples.row(c)
    }

    /// Copy of one channel as a plain vector.
    pub fn channel_vec(&self, c: usize) -> Vec<f64> {
        self.samples.row(c).to_vec()
    }

    pub fn select_channels(&self, idx: &[usize]) -> Result<Self> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.channels()) {
            return Err(Error::Shape(format!(
                "channel {bad} out of range for {}-channel signal",
                self.channels()
            )));
        }
        Ok(Self {
            samples: self.samples.select(Axis(0), idx),
            sample_rate: self.sample_rate,
        })
    }

    pub fn slice_time(&self, range: Range<usize>) -> Result<Self> {
        if range.end > self.len() || range.start > range.end {
            return Err(Error::Shape(format!(
                "time range {range:?} outside signal of length {}",
                self.len()
            )));
        }
        Ok(Self {
            samples: self.samples.slice(ndarray::s![.., range]).to_owned(),
            sample_rate: self.sample_rate,
        })
    }

    /// Round every sample through `f32`, the precision used by float WAV files.
    pub fn quantize_f32(mut self) -> Self {
        self.samples.mapv_inplace(|v| v as f32 as f64);
        self
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: &self.samples * gain,
            sample_rate: self.sample_rate,
        }
    }

    pub fn channel_energy(&self, c: usize) -> f64 {
        self.samples.row(c).iter().map(|v| v * v).sum()
    }

    pub fn rms(&self) -> f64 {
        let n = self.samples.len();
        if n == 0 {
            return 0.0;
        }
        (self.samples.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Causal multichannel FIR filter `w[k]`, `k = 0..=K`, with its declared processing delay.
#[derive(Debug, Clone, PartialEq)]
pub struct FirFilter {
    taps: Array2<f64>,
    declared_delay: usize,
}

impl FirFilter {
    /// `taps` is `channels x (K + 1)`.
    pub fn new(taps: Array2<f64>, declared_delay: usize) -> Result<Self> {
        if taps.ncols() == 0 {
            return Err(Error::Config("filter needs at least one tap".into()));
        }
        if declared_delay > taps.ncols() - 1 {
            return Err(Error::Config(format!(
                "declared delay {declared_delay} exceeds filter order {}",
                taps.ncols() - 1
            )));
        }
        if taps.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite filter tap".into()));
        }
        Ok(Self {
            taps,
            declared_delay,
        })
    }

    pub fn taps(&self) -> &Array2<f64> {
        &self.taps
    }

    pub fn channels(&self) -> usize {
        self.taps.nrows()
    }

    /// Filter order `K`.
    pub fn order(&self) -> usize {
        self.taps.ncols() - 1
    }

    pub fn declared_delay(&self) -> usize {
        self.declared_delay
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            taps: &self.taps * gain,
            declared_delay: self.declared_delay,
        }
    }

    pub fn apply(&self, signal: &MultichannelSignal) -> Result<Vec<f64>> {
        fir_apply(self, signal)
    }
}

/// `y[t] = sum_k w[k]^T x[t - k]`, truncated to the input length.
pub fn fir_apply(filter: &FirFilter, signal: &MultichannelSignal) -> Result<Vec<f64>> {
    if filter.channels() != signal.channels() {
        return Err(Error::Shape(format!(
            "filter has {} channels, signal has {}",
            filter.channels(),
            signal.channels()
        )));
    }
    let len = signal.len();
    let mut out = vec![0.0; len];
    for c in 0..signal.channels() {
        let x = signal.channel_vec(c);
        let w = filter.taps.row(c).to_vec();
        if w.iter().all(|&v| v == 0.0) {
            continue;
        }
        for (o, y) in out.iter_mut().zip(dsp::filter_truncated(&x, &w)) {
            *o += y;
        }
    }
    Ok(out)
}
