//! Second-order statistics a listening device needs to design its filter.
//!
//! From the STFT of the local microphones and of the separated reference
//! signals this module forms frame-averaged periodograms, relative transfer
//! functions, time-windowed relative early impulse responses, the
//! mixture-to-early-image cross-spectra and finally the lag-domain
//! correlations that enter the Wiener normal equations.

use std::path::Path;

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::artifact::{write_atomic, BinReader, BinWriter};
use crate::error::{Error, Result};
use crate::par;
use crate::stft::StftTensor;

/// Bins whose reference power is below this fraction of the mean are excluded from the RTF.
pub const RSS_FLOOR: f64 = 1e-8;

const STATS_MAGIC: &[u8; 8] = b"CLSTATS\0";
const STATS_VERSION: u8 = 1;

/// Frame-averaged sample spectra for one set of local microphones.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialStats {
    /// `R_ss[n, f]`, reference power spectrum per source.
    pub r_ss: Array2<f64>,
    /// `R_xs[n, f, m]`, local-mic to reference cross-spectrum per source.
    pub r_xs: Array3<Complex64>,
    /// `R_xx[f, a, b]`, local spatial covariance.
    pub r_xx: Array3<Complex64>,
    pub frames: usize,
    pub frame_len: usize,
    pub hop: usize,
    pub fft_len: usize,
    pub sample_rate: u32,
    /// Local `(left, right)` ear channels when the statistics belong to a listener.
    pub ear_channels: Option<(usize, usize)>,
}

impl SpatialStats {
    pub fn sources(&self) -> usize {
        self.r_ss.nrows()
    }

    pub fn bins(&self) -> usize {
        self.r_ss.ncols()
    }

    pub fn mics(&self) -> usize {
        self.r_xx.dim().1
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let (l, r) = self
            .ear_channels
            .map_or((u64::MAX, u64::MAX), |(l, r)| (l as u64, r as u64));
        let mut w = BinWriter::new(STATS_MAGIC, STATS_VERSION);
        w.u64(self.sources() as u64)
            .u64(self.mics() as u64)
            .u64(self.bins() as u64)
            .u64(self.frames as u64)
            .u64(self.frame_len as u64)
            .u64(self.hop as u64)
            .u64(self.fft_len as u64)
            .u64(u64::from(self.sample_rate))
            .u64(l)
            .u64(r);
        w.f64s(self.r_ss.iter());
        for c in self.r_xs.iter().chain(self.r_xx.iter()) {
            w.f64(c.re).f64(c.im);
        }
        write_atomic(path, &w.finish())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let data = std::fs::read(path)?;
        let mut r = BinReader::new(&data, STATS_MAGIC, STATS_VERSION)?;
        let n = r.usize()?;
        let m = r.usize()?;
        let bins = r.usize()?;
        let frames = r.usize()?;
        let frame_len = r.usize()?;
        let hop = r.usize()?;
        let fft_len = r.usize()?;
        let sample_rate = u32::try_from(r.u64()?).map_err(|_| Error::Format("sample rate overflows".into()))?;
        let (l, rr) = (r.u64()?, r.u64()?);
        let ear_channels = (l != u64::MAX).then_some((l as usize, rr as usize));
        if bins != fft_len / 2 + 1 {
            return Err(Error::Format(format!("{bins} bins inconsistent with fft length {fft_len}")));
        }
        let r_ss = Array2::from_shape_vec((n, bins), r.f64s(n * bins)?).map_err(|e| Error::Format(e.to_string()))?;
        let mut complex = |len: usize| -> Result<Vec<Complex64>> {
            let raw = r.f64s(2 * len)?;
            Ok(raw.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect())
        };
        let r_xs = Array3::from_shape_vec((n, bins, m), complex(n * bins * m)?).map_err(|e| Error::Format(e.to_string()))?;
        let r_xx = Array3::from_shape_vec((bins, m, m), complex(bins * m * m)?).map_err(|e| Error::Format(e.to_string()))?;
        r.expect_end()?;
        Ok(Self {
            r_ss,
            r_xs,
            r_xx,
            frames,
            frame_len,
            hop,
            fft_len,
            sample_rate,
            ear_channels,
        })
    }
}

/// Frame-averaged periodograms of the local mixture and the source estimates.
pub fn estimate_spectra(local: &StftTensor, estimates: &StftTensor) -> Result<SpatialStats> {
    if local.frames() != estimates.frames()
        || local.bins() != estimates.bins()
        || local.hop != estimates.hop
        || local.frame_len != estimates.frame_len
    {
        return Err(Error::Shape("mixture and estimates are on different STFT grids".into()));
    }
    let frames = local.frames();
    if frames < 2 {
        return Err(Error::Config(format!("need at least 2 frames to average, got {frames}")));
    }
    let (m, bins, n) = (local.channels(), local.bins(), estimates.channels());
    let inv = 1.0 / frames as f64;
    let per_bin: Vec<(Vec<f64>, Vec<Complex64>, Vec<Complex64>)> = par::map_range(bins, |f| {
        let mut ss = vec![0.0; n];
        let mut xs = vec![Complex64::new(0.0, 0.0); n * m];
        let mut xx = vec![Complex64::new(0.0, 0.0); m * m];
        for tau in 0..frames {
            for s in 0..n {
                let sv = estimates.coeffs[[s, tau, f]];
                ss[s] += sv.norm_sqr();
                let sc = sv.conj();
                for a in 0..m {
                    xs[s * m + a] += local.coeffs[[a, tau, f]] * sc;
                }
            }
            for a in 0..m {
                let xa = local.coeffs[[a, tau, f]];
                for b in 0..m {
                    xx[a * m + b] += xa * local.coeffs[[b, tau, f]].conj();
                }
            }
        }
        ss.iter_mut().for_each(|v| *v *= inv);
        xs.iter_mut().for_each(|v| *v *= inv);
        xx.iter_mut().for_each(|v| *v *= inv);
        (ss, xs, xx)
    });
    let mut r_ss = Array2::zeros((n, bins));
    let mut r_xs = Array3::zeros((n, bins, m));
    let mut r_xx = Array3::zeros((bins, m, m));
    for (f, (ss, xs, xx)) in per_bin.into_iter().enumerate() {
        for s in 0..n {
            r_ss[[s, f]] = ss[s];
            for a in 0..m {
                r_xs[[s, f, a]] = xs[s * m + a];
            }
        }
        for a in 0..m {
            for b in 0..m {
                r_xx[[f, a, b]] = xx[a * m + b];
            }
        }
    }
    Ok(SpatialStats {
        r_ss,
        r_xs,
        r_xx,
        frames,
        frame_len: local.frame_len,
        hop: local.hop,
        fft_len: local.fft_len,
        sample_rate: local.sample_rate,
        ear_channels: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RtfEstimate {
    /// `A[n, f, m] = R_xs[n, f, m] / R_ss[n, f]`.
    pub values: Array3<Complex64>,
    /// `false` where the reference power was below the floor and the RTF was zeroed.
    pub active: Array2<bool>,
}

/// Relative transfer function of every source with respect to its reference signal.
pub fn estimate_rtf(stats: &SpatialStats) -> Result<RtfEstimate> {
    let (n, bins, m) = stats.r_xs.dim();
    let mut values = Array3::zeros((n, bins, m));
    let mut active = Array2::from_elem((n, bins), false);
    for s in 0..n {
        let mean = stats.r_ss.row(s).sum() / bins as f64;
        let floor = RSS_FLOOR * mean;
        let mut any = false;
        for f in 0..bins {
            let p = stats.r_ss[[s, f]];
            if p > 0.0 && p >= floor {
                any = true;
                active[[s, f]] = true;
                for a in 0..m {
                    values[[s, f, a]] = stats.r_xs[[s, f, a]] / p;
                }
            }
        }
        if !any {
            return Err(Error::Numerical(format!("source {s} estimate is silent at every frequency")));
        }
    }
    Ok(RtfEstimate { values, active })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReirWindow {
    /// Non-causal extent before lag zero.
    pub pre_ms: f64,
    /// Causal extent after lag zero.
    pub post_ms: f64,
    /// Raised-cosine transition at each edge, inside `[-pre, post]`.
    pub taper_ms: f64,
}

impl Default for ReirWindow {
    fn default() -> Self {
        Self {
            pre_ms: 4.0,
            post_ms: 32.0,
            taper_ms: 2.0,
        }
    }
}

impl ReirWindow {
    /// Window gain at each lag `-pre..=post` (index 0 is lag `-pre`).
    fn gains(&self, sample_rate: u32) -> (usize, usize, Vec<f64>) {
        let to_samples = |ms: f64| (ms * 1e-3 * f64::from(sample_rate)).round().max(0.0) as usize;
        let (pre, post, taper) = (to_samples(self.pre_ms), to_samples(self.post_ms), to_samples(self.taper_ms));
        let len = pre + post + 1;
        let taper = taper.min(len / 2);
        let mut w = vec![1.0; len];
        for i in 0..taper {
            let g = 0.5 * (1.0 - (std::f64::consts::PI * (i + 1) as f64 / (taper + 1) as f64).cos());
            w[i] = g;
            w[len - 1 - i] = g;
        }
        (pre, post, w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReirEstimate {
    /// `A_early[n, f, m]`.
    pub a_early: Array3<Complex64>,
    pub window: ReirWindow,
    /// Lags `-pre..=post` retained, in samples.
    pub pre: usize,
    pub post: usize,
}

impl ReirEstimate {
    pub fn time_support(&self) -> usize {
        self.pre + self.post + 1
    }
}

/// Full conjugate-symmetric spectrum from the non-negative bins.
fn full_spectrum(one_sided: impl Iterator<Item = Complex64>, fft_len: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = one_sided.collect();
    buf.resize(fft_len, Complex64::new(0.0, 0.0));
    let bins = fft_len / 2 + 1;
    for f in bins..fft_len {
        buf[f] = buf[fft_len - f].conj();
    }
    buf
}

/// Inverse DFT `(1/L) sum_f X[f] e^{+j 2 pi f k / L}` of a real sequence given by its non-negative bins.
pub fn one_sided_idft(one_sided: impl Iterator<Item = Complex64>, fft_len: usize) -> Vec<f64> {
    let mut buf = full_spectrum(one_sided, fft_len);
    buf[0].im = 0.0;
    buf[fft_len / 2].im = 0.0;
    FftPlanner::new().plan_fft_inverse(fft_len).process(&mut buf);
    let scale = 1.0 / fft_len as f64;
    buf.iter().map(|c| c.re * scale).collect()
}

/// Time-window each RTF to `[-pre, post]` around lag zero.
pub fn window_reir(rtf: &RtfEstimate, window: &ReirWindow, sample_rate: u32) -> Result<ReirEstimate> {
    let (n, bins, m) = rtf.values.dim();
    if bins < 2 {
        return Err(Error::Shape("RTF needs at least two bins".into()));
    }
    let fft_len = 2 * (bins - 1);
    let (pre, post, gains) = window.gains(sample_rate);
    if pre + post + 1 > fft_len {
        return Err(Error::Config(format!(
            "REIR window of {} samples exceeds the {fft_len}-sample DFT support",
            pre + post + 1
        )));
    }
    if window.pre_ms < 0.0 || window.post_ms < 0.0 || window.taper_ms < 0.0 {
        return Err(Error::Config("REIR window extents must be non-negative".into()));
    }
    let fwd = FftPlanner::<f64>::new().plan_fft_forward(fft_len);
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|s| (0..m).map(move |a| (s, a))).collect();
    let windowed: Vec<Vec<Complex64>> = par::map_slice(&pairs, |&(s, a)| {
        let h = one_sided_idft((0..bins).map(|f| rtf.values[[s, f, a]]), fft_len);
        let mut buf = vec![Complex64::new(0.0, 0.0); fft_len];
        for (i, g) in gains.iter().enumerate() {
            let lag = i as isize - pre as isize;
            let idx = lag.rem_euclid(fft_len as isize) as usize;
            buf[idx] = Complex64::new(h[idx] * g, 0.0);
        }
        fwd.process(&mut buf);
        buf.truncate(bins);
        buf
    });
    let mut a_early = Array3::zeros((n, bins, m));
    for (&(s, a), spec) in pairs.iter().zip(windowed) {
        for (f, v) in spec.into_iter().enumerate() {
            a_early[[s, f, a]] = v;
        }
    }
    Ok(ReirEstimate {
        a_early,
        window: *window,
        pre,
        post,
    })
}

/// `R_xc[n][f] = R_xs[n, f] A_early[n, f]^H`, one rank-one `M x M` matrix per bin.
pub fn cross_spectra(stats: &SpatialStats, reir: &ReirEstimate) -> Result<Vec<Array3<Complex64>>> {
    if stats.r_xs.dim() != reir.a_early.dim() {
        return Err(Error::Shape(format!(
            "cross-spectra {:?} and REIRs {:?} disagree",
            stats.r_xs.dim(),
            reir.a_early.dim()
        )));
    }
    let (n, bins, m) = stats.r_xs.dim();
    Ok((0..n)
        .map(|s| {
            Array3::from_shape_fn((bins, m, m), |(f, a, b)| {
                stats.r_xs[[s, f, a]] * reir.a_early[[s, f, b]].conj()
            })
        })
        .collect())
}

/// Lag-domain correlations for one filter design.
#[derive(Debug, Clone, PartialEq)]
pub struct LagCorrelations {
    pub mics: usize,
    /// Filter order `K`.
    pub order: usize,
    /// Target delay `alpha` in samples.
    pub delay: usize,
    /// `r_xx[k]` for `k = 0..=K`, row-major `M x M`; `r_xx[-k] = r_xx[k]^T`.
    pub r_xx: Vec<Vec<f64>>,
    /// `r_xy[alpha - i]` for `i = 0..=K` (the right-hand side blocks in solve order).
    pub r_xy: Vec<Vec<f64>>,
}

impl LagCorrelations {
    /// `r_xx[k]` entry `(a, b)` for any `|k| <= K`.
    pub fn xx(&self, k: isize, a: usize, b: usize) -> f64 {
        let m = self.mics;
        if k >= 0 {
            self.r_xx[k as usize][a * m + b]
        } else {
            self.r_xx[(-k) as usize][b * m + a]
        }
    }

    /// `r_xy` at `lag` for `alpha - K <= lag <= alpha`.
    pub fn xy(&self, lag: isize) -> &[f64] {
        &self.r_xy[(self.delay as isize - lag) as usize]
    }
}

fn check_lag_support(bins: usize, order: usize) -> Result<usize> {
    let fft_len = 2 * bins.saturating_sub(1);
    if fft_len < 2 * order + 2 {
        return Err(Error::Config(format!(
            "DFT length {fft_len} too short for filter order {order}: need at least {}",
            2 * order + 2
        )));
    }
    Ok(fft_len)
}

/// `r_xx[k]`, `k = 0..=K`, by inverse DFT of `R_xx[f]`.
pub fn autocorrelation_lags(r_xx: &Array3<Complex64>, order: usize) -> Result<Vec<Vec<f64>>> {
    let (bins, m, m2) = r_xx.dim();
    if m != m2 {
        return Err(Error::Shape("R_xx must be square".into()));
    }
    let fft_len = check_lag_support(bins, order)?;
    let entries = par::map_range(m * m, |ab| {
        let (a, b) = (ab / m, ab % m);
        one_sided_idft((0..bins).map(|f| r_xx[[f, a, b]]), fft_len)
    });
    Ok((0..=order)
        .map(|k| (0..m * m).map(|ab| entries[ab][k]).collect())
        .collect())
}

/// `r_xy[alpha - i]`, `i = 0..=K`, where `r_xy[k] = sum_n g_n r_{x c_n}[k] e_ear`.
pub fn target_cross_lags(
    r_xc: &[Array3<Complex64>],
    gains: &[f64],
    ear: usize,
    order: usize,
    delay: usize,
) -> Result<Vec<Vec<f64>>> {
    if gains.len() != r_xc.len() {
        return Err(Error::Shape(format!("{} gains for {} sources", gains.len(), r_xc.len())));
    }
    if gains.iter().any(|&g| !(g >= 0.0)) {
        return Err(Error::Config("remix gains must be non-negative".into()));
    }
    if delay > order {
        return Err(Error::Config(format!("delay {delay} exceeds filter order {order}")));
    }
    let Some(first) = r_xc.first() else {
        return Err(Error::Shape("no sources".into()));
    };
    let (bins, m, _) = first.dim();
    if ear >= m {
        return Err(Error::Shape(format!("ear channel {ear} out of range for {m} microphones")));
    }
    let fft_len = check_lag_support(bins, order)?;
    let per_mic = par::map_range(m, |a| {
        let spectrum = (0..bins).map(|f| {
            r_xc.iter()
                .zip(gains)
                .fold(Complex64::new(0.0, 0.0), |acc, (x, &g)| acc + x[[f, a, ear]] * g)
        });
        one_sided_idft(spectrum, fft_len)
    });
    Ok((0..=order)
        .map(|i| {
            let lag = delay as isize - i as isize;
            let idx = lag.rem_euclid(fft_len as isize) as usize;
            (0..m).map(|a| per_mic[a][idx]).collect()
        })
        .collect())
}

/// Inverse-DFT the spectra into the lag-domain quantities of one remix design.
pub fn to_lag_domain(
    r_xx: &Array3<Complex64>,
    r_xc: &[Array3<Complex64>],
    gains: &[f64],
    ear: usize,
    order: usize,
    delay: usize,
) -> Result<LagCorrelations> {
    Ok(LagCorrelations {
        mics: r_xx.dim().1,
        order,
        delay,
        r_xx: autocorrelation_lags(r_xx, order)?,
        r_xy: target_cross_lags(r_xc, gains, ear, order, delay)?,
    })
}
