//! Shoebox room simulation with the image-source method.
//!
//! Produces per-source microphone images `c_n[t]`, their early parts (impulse
//! response truncated a fixed time after the direct arrival), additive sensor
//! noise and the resulting mixture, plus the nearest-microphone reference
//! assignment used by the separation stage.

use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dsp;
use crate::error::{Error, Result};
use crate::par;
use crate::signal::MultichannelSignal;

pub type Point = [f64; 3];

/// Half-width of the windowed-sinc fractional delay kernel (81 taps total).
pub const SINC_HALF_WIDTH: i64 = 40;

const MIN_MIC_SEPARATION: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Room {
    /// Extent along x, y, z in meters.
    pub dims: Point,
    /// Energy absorption per surface, ordered x=0, x=Lx, y=0, y=Ly, z=0, z=Lz.
    pub absorption: [f64; 6],
}

impl Room {
    pub fn uniform(dims: Point, absorption: f64) -> Self {
        Self {
            dims,
            absorption: [absorption; 6],
        }
    }

    pub fn volume(&self) -> f64 {
        self.dims.iter().product()
    }

    fn surface_areas(&self) -> [f64; 6] {
        let [x, y, z] = self.dims;
        [y * z, y * z, x * z, x * z, x * y, x * y]
    }

    /// Sabine reverberation time `0.161 V / sum(S_i a_i)` in seconds.
    pub fn sabine_t60(&self) -> f64 {
        let absorbing: f64 = self
            .surface_areas()
            .iter()
            .zip(&self.absorption)
            .map(|(s, a)| s * a)
            .sum();
        0.161 * self.volume() / absorbing
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.iter().zip(&self.dims).all(|(&v, &d)| v > 0.0 && v < d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
            return Err(Error::Geometry(format!("room dimensions {:?} must be positive", self.dims)));
        }
        if self.absorption.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::Geometry(format!(
                "absorption coefficients {:?} must lie in (0, 1]",
                self.absorption
            )));
        }
        Ok(())
    }
}

pub fn distance(a: &Point, b: &Point) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RirConfig {
    pub sample_rate: u32,
    pub speed_of_sound: f64,
    /// Maximum reflection order; `None` keeps every image that arrives within `length`.
    pub max_order: Option<usize>,
    /// Impulse response length in samples.
    pub length: usize,
    /// Apply [`allen_berkley_highpass`] to the response.
    pub highpass: bool,
}

struct AxisImage {
    offset: f64,
    order: usize,
    gain: f64,
}

fn axis_images(len: f64, src: f64, mic: f64, beta: (f64, f64), max_dist: f64, max_order: usize) -> Vec<AxisImage> {
    let reach = (max_dist / (2.0 * len)).ceil() as i64 + 1;
    let mut out = Vec::new();
    for l in -reach..=reach {
        for u in 0..2i64 {
            let offset = (1 - 2 * u) as f64 * src + 2.0 * l as f64 * len - mic;
            let low = (l - u).unsigned_abs() as usize;
            let high = l.unsigned_abs() as usize;
            if low + high > max_order || offset.abs() > max_dist {
                continue;
            }
            out.push(AxisImage {
                offset,
                order: low + high,
                gain: beta.0.powi(low as i32) * beta.1.powi(high as i32),
            });
        }
    }
    out
}

/// Add `amp * sinc(n - delay)` under a Hann taper, 81 taps centered on `delay`.
pub fn add_fractional_impulse(h: &mut [f64], delay: f64, amp: f64) {
    let center = delay.round() as i64;
    let width = (SINC_HALF_WIDTH + 1) as f64;
    let x0 = (center - SINC_HALF_WIDTH) as f64 - delay;
    // sin(pi x) alternates sign between integer steps; the taper is advanced by rotation.
    let mut sin_pi = (PI * x0).sin();
    let (step_sin, step_cos) = (PI / width).sin_cos();
    let (mut tap_sin, mut tap_cos) = (PI * x0 / width).sin_cos();
    for i in -SINC_HALF_WIDTH..=SINC_HALF_WIDTH {
        let n = center + i;
        let x = n as f64 - delay;
        if n >= 0 && (n as usize) < h.len() {
            let sinc = if x.abs() < 1e-9 { 1.0 } else { sin_pi / (PI * x) };
            h[n as usize] += amp * sinc * 0.5 * (1.0 + tap_cos);
        }
        sin_pi = -sin_pi;
        let c = tap_cos * step_cos - tap_sin * step_sin;
        tap_sin = tap_sin * step_cos + tap_cos * step_sin;
        tap_cos = c;
    }
}

/// Allen-Berkley 100 Hz high-pass, removing the DC build-up of summed image pulses.
pub fn allen_berkley_highpass(h: &mut [f64], sample_rate: u32) {
    let w = 2.0 * PI * 100.0 / f64::from(sample_rate);
    let r1 = (-w).exp();
    let b1 = 2.0 * r1 * w.cos();
    let b2 = -r1 * r1;
    let a1 = -(1.0 + r1);
    let mut y = [0.0; 3];
    for x in h.iter_mut() {
        y[2] = y[1];
        y[1] = y[0];
        y[0] = b1 * y[1] + b2 * y[2] + *x;
        *x = y[0] + a1 * y[1] + r1 * y[2];
    }
}

/// Image-source impulse response from `src` to `mic` (free-field amplitude `1 / (4 pi r)`).
pub fn simulate_rir(room: &Room, src: &Point, mic: &Point, cfg: &RirConfig) -> Result<Vec<f64>> {
    room.validate()?;
    if !room.contains(src) || !room.contains(mic) {
        return Err(Error::Geometry("source and microphone must lie strictly inside the room".into()));
    }
    if distance(src, mic) < MIN_MIC_SEPARATION {
        return Err(Error::Geometry("source and microphone coincide".into()));
    }
    let fs = f64::from(cfg.sample_rate);
    let c = cfg.speed_of_sound;
    let max_dist = (cfg.length as f64 + SINC_HALF_WIDTH as f64) / fs * c;
    let max_order = cfg.max_order.unwrap_or(usize::MAX);
    let beta: Vec<f64> = room.absorption.iter().map(|a| (1.0 - a).sqrt()).collect();
    let axes: Vec<Vec<AxisImage>> = (0..3)
        .map(|d| axis_images(room.dims[d], src[d], mic[d], (beta[2 * d], beta[2 * d + 1]), max_dist, max_order))
        .collect();

    let mut h = vec![0.0; cfg.length];
    for ix in &axes[0] {
        for iy in &axes[1] {
            let order_xy = ix.order + iy.order;
            let dxy2 = ix.offset * ix.offset + iy.offset * iy.offset;
            if order_xy > max_order || dxy2 > max_dist * max_dist {
                continue;
            }
            for iz in &axes[2] {
                if order_xy + iz.order > max_order {
                    continue;
                }
                let dist = (dxy2 + iz.offset * iz.offset).sqrt();
                if dist > max_dist {
                    continue;
                }
                let amp = ix.gain * iy.gain * iz.gain / (4.0 * PI * dist);
                add_fractional_impulse(&mut h, dist / c * fs, amp);
            }
        }
    }
    if cfg.highpass {
        allen_berkley_highpass(&mut h, cfg.sample_rate);
    }
    Ok(h)
}

/// Schroeder backward-integrated energy decay curve in dB (0 dB at `t = 0`).
pub fn schroeder_curve(rir: &[f64]) -> Vec<f64> {
    let mut edc = vec![0.0; rir.len()];
    let mut acc = 0.0;
    for i in (0..rir.len()).rev() {
        acc += rir[i] * rir[i];
        edc[i] = acc;
    }
    let total = edc.first().copied().unwrap_or(0.0);
    edc.iter()
        .map(|&e| if total > 0.0 && e > 0.0 { 10.0 * (e / total).log10() } else { f64::NEG_INFINITY })
        .collect()
}

/// Reverberation time from a least-squares fit of the decay curve between -5 dB
/// and -35 dB (T30), falling back to -5..-25 dB (T20) for short responses.
pub fn schroeder_t60(rir: &[f64], sample_rate: u32) -> Option<f64> {
    let curve = schroeder_curve(rir);
    let fit = |lo: f64, hi: f64| -> Option<f64> {
        let pts: Vec<(f64, f64)> = curve
            .iter()
            .enumerate()
            .filter(|(_, &v)| v <= lo && v >= hi)
            .map(|(i, &v)| (i as f64 / f64::from(sample_rate), v))
            .collect();
        if pts.len() < 10 {
            return None;
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let slope = sxy / sxx;
        (slope < 0.0).then(|| -60.0 / slope)
    };
    let reaches = |db: f64| curve.iter().any(|&v| v < db);
    if reaches(-35.0) {
        fit(-5.0, -35.0)
    } else if reaches(-25.0) {
        fit(-5.0, -25.0)
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Source {
    pub position: Point,
    pub signal: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Device {
    pub name: String,
    pub mic_positions: Vec<Point>,
    #[serde(default)]
    pub is_listener: bool,
    /// `(left, right)` indices into this device's microphones.
    #[serde(default)]
    pub ear_channels: Option<(usize, usize)>,
}

/// A room, its sources with their dry signals, and the devices recording them.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub room: Room,
    pub speed_of_sound: f64,
    pub sample_rate: u32,
    pub sources: Vec<Source>,
    pub devices: Vec<Device>,
    /// White sensor-noise level relative to the clean mixture RMS; `None` for no noise.
    pub noise_level_db: Option<f64>,
    pub noise_seed: u64,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        self.room.validate()?;
        if self.sources.is_empty() {
            return Err(Error::Geometry("scene has no sources".into()));
        }
        let len = self.sources[0].signal.len();
        for (n, s) in self.sources.iter().enumerate() {
            if !self.room.contains(&s.position) {
                return Err(Error::Geometry(format!("source {n} lies outside the room")));
            }
            if s.signal.len() != len {
                return Err(Error::Shape(format!("source {n} signal length differs from source 0")));
            }
            if s.signal.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("source {n} has non-finite samples")));
            }
        }
        for d in &self.devices {
            if d.mic_positions.is_empty() {
                return Err(Error::Geometry(format!("device {} has no microphones", d.name)));
            }
            if let Some(p) = d.mic_positions.iter().find(|p| !self.room.contains(p)) {
                return Err(Error::Geometry(format!("device {} microphone {p:?} lies outside the room", d.name)));
            }
            match (d.is_listener, d.ear_channels) {
                (true, Some((l, r))) => {
                    if l == r || l >= d.mic_positions.len() || r >= d.mic_positions.len() {
                        return Err(Error::Config(format!("device {} has invalid ear channels ({l}, {r})", d.name)));
                    }
                }
                (true, None) => {
                    return Err(Error::Config(format!("listener {} must declare left and right ear channels", d.name)));
                }
                (false, _) => {}
            }
        }
        let mics = self.mic_positions();
        if mics.is_empty() {
            return Err(Error::Geometry("scene has no microphones".into()));
        }
        for i in 0..mics.len() {
            for j in i + 1..mics.len() {
                if distance(&mics[i], &mics[j]) <= MIN_MIC_SEPARATION {
                    return Err(Error::Geometry(format!("microphones {i} and {j} are co-located")));
                }
            }
        }
        if self.speed_of_sound <= 0.0 || self.sample_rate == 0 {
            return Err(Error::Config("speed of sound and sample rate must be positive".into()));
        }
        Ok(())
    }

    /// All microphone positions, devices concatenated in declaration order.
    pub fn mic_positions(&self) -> Vec<Point> {
        self.devices.iter().flat_map(|d| d.mic_positions.iter().copied()).collect()
    }

    /// Global microphone indices of device `d`.
    pub fn device_mics(&self, d: usize) -> std::ops::Range<usize> {
        let start: usize = self.devices[..d].iter().map(|d| d.mic_positions.len()).sum();
        start..start + self.devices[d].mic_positions.len()
    }

    pub fn device_index(&self, name: &str) -> Option<usize> {
        self.devices.iter().position(|d| d.name == name)
    }

    pub fn listeners(&self) -> Vec<usize> {
        (0..self.devices.len()).filter(|&d| self.devices[d].is_listener).collect()
    }

    /// Global `(left, right)` microphone indices of listener device `d`.
    pub fn ear_mics(&self, d: usize) -> Option<(usize, usize)> {
        let start = self.device_mics(d).start;
        self.devices[d].ear_channels.map(|(l, r)| (start + l, start + r))
    }

    pub fn signal_len(&self) -> usize {
        self.sources.first().map_or(0, |s| s.signal.len())
    }
}

/// Nearest microphone to each source; ties go to the lowest index.
pub fn nearest_mics(sources: &[Point], mics: &[Point]) -> Vec<usize> {
    sources
        .iter()
        .map(|s| {
            let mut best = (0, f64::INFINITY);
            for (m, p) in mics.iter().enumerate() {
                let d = distance(s, p);
                if d < best.1 {
                    best = (m, d);
                }
            }
            best.0
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub max_order: Option<usize>,
    pub early_cutoff_ms: f64,
    pub rir_length_ms: f64,
    #[serde(default = "yes")]
    pub highpass: bool,
}

fn yes() -> bool {
    true
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            max_order: None,
            early_cutoff_ms: 32.0,
            rir_length_ms: 500.0,
            highpass: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RenderedScene {
    /// Per source, its image at every microphone.
    pub images: Vec<MultichannelSignal>,
    pub early_images: Vec<MultichannelSignal>,
    pub noise: MultichannelSignal,
    pub mixture: MultichannelSignal,
    pub reference_mics: Vec<usize>,
    /// `rirs[n][m]`: response from source `n` to microphone `m`.
    pub rirs: Vec<Vec<Vec<f64>>>,
    /// Direct-path arrival, in samples, per source and microphone.
    pub direct_delays: Vec<Vec<f64>>,
}

impl RenderedScene {
    pub fn sources(&self) -> usize {
        self.images.len()
    }

    pub fn mics(&self) -> usize {
        self.mixture.channels()
    }

    pub fn sample_rate(&self) -> u32 {
        self.mixture.sample_rate()
    }

    pub fn len(&self) -> usize {
        self.mixture.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixture.is_empty()
    }

    /// Restrict every signal to a time window and a microphone subset.
    pub fn restrict(&self, mics: &[usize], range: std::ops::Range<usize>) -> Result<RenderedScene> {
        let cut = |s: &MultichannelSignal| s.select_channels(mics)?.slice_time(range.clone());
        let mut reference_mics = Vec::new();
        for &r in &self.reference_mics {
            reference_mics.push(mics.iter().position(|&m| m == r).ok_or_else(|| {
                Error::Config(format!("reference microphone {r} is not in the selected subset"))
            })?);
        }
        Ok(RenderedScene {
            images: self.images.iter().map(cut).collect::<Result<_>>()?,
            early_images: self.early_images.iter().map(cut).collect::<Result<_>>()?,
            noise: cut(&self.noise)?,
            mixture: cut(&self.mixture)?,
            reference_mics,
            rirs: self.rirs.iter().map(|r| mics.iter().map(|&m| r[m].clone()).collect()).collect(),
            direct_delays: self
                .direct_delays
                .iter()
                .map(|d| mics.iter().map(|&m| d[m]).collect())
                .collect(),
        })
    }

    /// Round all signals through `f32`, matching what float WAV artifacts store.
    /// The mixture is re-summed afterwards so `mixture = sum(images) + noise` still holds exactly.
    pub fn quantize_f32(self) -> RenderedScene {
        let images: Vec<_> = self.images.into_iter().map(MultichannelSignal::quantize_f32).collect();
        let early_images = self.early_images.into_iter().map(MultichannelSignal::quantize_f32).collect();
        let noise = self.noise.quantize_f32();
        let mixture = sum_mixture(&images, &noise);
        RenderedScene {
            images,
            early_images,
            noise,
            mixture,
            reference_mics: self.reference_mics,
            rirs: self.rirs,
            direct_delays: self.direct_delays,
        }
    }
}

/// `sum_n images[n] + noise`, accumulated in source order.
pub fn sum_mixture(images: &[MultichannelSignal], noise: &MultichannelSignal) -> MultichannelSignal {
    let mut acc: Array2<f64> = Array2::zeros(noise.samples().dim());
    for img in images {
        acc += img.samples();
    }
    acc += noise.samples();
    MultichannelSignal::new(acc, noise.sample_rate()).expect("sum of finite signals is finite")
}

pub fn render(scene: &Scene, cfg: &RenderConfig) -> Result<RenderedScene> {
    scene.validate()?;
    let fs = f64::from(scene.sample_rate);
    let mics = scene.mic_positions();
    let len = scene.signal_len();
    let rir_cfg = RirConfig {
        sample_rate: scene.sample_rate,
        speed_of_sound: scene.speed_of_sound,
        max_order: cfg.max_order,
        length: ((cfg.rir_length_ms * 1e-3 * fs).round() as usize).max(1),
        highpass: cfg.highpass,
    };
    let cutoff = cfg.early_cutoff_ms * 1e-3 * fs;

    let pairs: Vec<(usize, usize)> = (0..scene.sources.len())
        .flat_map(|n| (0..mics.len()).map(move |m| (n, m)))
        .collect();
    let flat_rirs = par::map_slice(&pairs, |&(n, m)| simulate_rir(&scene.room, &scene.sources[n].position, &mics[m], &rir_cfg));
    let flat_rirs: Vec<Vec<f64>> = flat_rirs.into_iter().collect::<Result<_>>()?;
    let mut rirs = vec![Vec::with_capacity(mics.len()); scene.sources.len()];
    for ((n, _), h) in pairs.iter().zip(flat_rirs) {
        rirs[*n].push(h);
    }
    let direct_delays: Vec<Vec<f64>> = scene
        .sources
        .iter()
        .map(|s| mics.iter().map(|p| distance(&s.position, p) / scene.speed_of_sound * fs).collect())
        .collect();

    let fft_len = (len + rir_cfg.length).next_power_of_two();
    let mut images = Vec::with_capacity(scene.sources.len());
    let mut early_images = Vec::with_capacity(scene.sources.len());
    for (n, source) in scene.sources.iter().enumerate() {
        let spectrum = dsp::rfft_padded(&source.signal, fft_len);
        let per_mic: Vec<(Vec<f64>, Vec<f64>)> = par::map_range(mics.len(), |m| {
            let h = &rirs[n][m];
            let keep = ((direct_delays[n][m] + cutoff).floor().max(0.0) as usize + 1).min(h.len());
            let early: Vec<f64> = h[..keep].to_vec();
            let filt = |taps: &[f64]| -> Vec<f64> {
                let th = dsp::rfft_padded(taps, fft_len);
                let prod: Vec<Complex64> = spectrum.iter().zip(&th).map(|(a, b)| a * b).collect();
                let mut y = dsp::irfft_real(prod);
                y.truncate(len);
                y
            };
            (filt(h), filt(&early))
        });
        let (full, early): (Vec<_>, Vec<_>) = per_mic.into_iter().unzip();
        images.push(MultichannelSignal::from_channels(full, scene.sample_rate)?);
        early_images.push(MultichannelSignal::from_channels(early, scene.sample_rate)?);
    }

    let clean = sum_mixture(&images, &MultichannelSignal::zeros(mics.len(), len, scene.sample_rate));
    let noise = match scene.noise_level_db {
        Some(db) => {
            let sigma = clean.rms() * 10f64.powf(db / 20.0);
            let mut rng = ChaCha8Rng::seed_from_u64(scene.noise_seed);
            let samples = Array2::from_shape_simple_fn((mics.len(), len), || {
                let v: f64 = StandardNormal.sample(&mut rng);
                sigma * v
            });
            MultichannelSignal::new(samples, scene.sample_rate)?
        }
        None => MultichannelSignal::zeros(mics.len(), len, scene.sample_rate),
    };
    let mixture = sum_mixture(&images, &noise);
    let source_positions: Vec<Point> = scene.sources.iter().map(|s| s.position).collect();
    Ok(RenderedScene {
        images,
        early_images,
        noise,
        mixture,
        reference_mics: nearest_mics(&source_positions, &mics),
        rirs,
        direct_delays,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(length: usize, max_order: Option<usize>) -> RirConfig {
        RirConfig {
            sample_rate: 16000,
            speed_of_sound: 343.0,
            max_order,
            length,
            highpass: false,
        }
    }

    #[test]
    fn anechoic_rir_is_a_single_impulse() {
        let room = Room::uniform([6.0, 5.0, 3.0], 0.3);
        let (s, m) = ([1.0, 1.0, 1.5], [3.3, 2.1, 1.2]);
        let h = simulate_rir(&room, &s, &m, &cfg(2000, Some(0))).unwrap();
        let d = distance(&s, &m);
        let delay = d / 343.0 * 16000.0;
        let peak = h.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).unwrap().0;
        assert!((peak as f64 - delay).abs() <= 1.0);
        // The sinc kernel sums to ~1, so the area equals the free-field amplitude.
        let area: f64 = h.iter().sum();
        assert!((area - 1.0 / (4.0 * PI * d)).abs() < 0.01 / (4.0 * PI * d));
        assert!(h[..(delay as usize).saturating_sub(41)].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mirrored_geometry_gives_identical_energy() {
        let room = Room::uniform([6.0, 5.0, 3.0], 0.4);
        let (s, m) = ([1.2, 2.0, 1.4], [2.5, 3.1, 1.1]);
        let mirror = |p: Point| [6.0 - p[0], p[1], p[2]];
        let a = simulate_rir(&room, &s, &m, &cfg(3000, None)).unwrap();
        let b = simulate_rir(&room, &mirror(s), &mirror(m), &cfg(3000, None)).unwrap();
        let ea = dsp::energy(&a);
        let eb = dsp::energy(&b);
        assert!((ea - eb).abs() < 1e-9 * ea);
    }

    #[test]
    fn coincident_or_outside_positions_fail() {
        let room = Room::uniform([6.0, 5.0, 3.0], 0.3);
        let p = [1.0, 1.0, 1.0];
        assert!(matches!(simulate_rir(&room, &p, &p, &cfg(100, None)), Err(Error::Geometry(_))));
        assert!(simulate_rir(&room, &[7.0, 1.0, 1.0], &p, &cfg(100, None)).is_err());
    }

    #[test]
    fn schroeder_curve_is_non_increasing() {
        let room = Room::uniform([6.0, 5.0, 3.0], 0.3);
        let h = simulate_rir(&room, &[1.0, 1.5, 1.2], &[4.0, 3.0, 1.7], &cfg(4000, None)).unwrap();
        let c = schroeder_curve(&h);
        assert!(c.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn sabine_formula() {
        let room = Room::uniform([6.0, 5.0, 3.0], 0.3);
        let s = 2.0 * (30.0 + 18.0 + 15.0);
        assert!((room.sabine_t60() - 0.161 * 90.0 / (s * 0.3)).abs() < 1e-12);
    }

    #[test]
    fn nearest_mic_breaks_ties_low() {
        let mics = [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 3.0, 0.0]];
        assert_eq!(nearest_mics(&[[0.0, 0.0, 0.0]], &mics), vec![0]);
        assert_eq!(nearest_mics(&[[0.0, 2.5, 0.0]], &mics), vec![2]);
    }

    #[test]
    fn nearest_mic_is_permutation_invariant() {
        let mics = vec![[1.0, 2.0, 1.0], [3.0, 1.0, 1.2], [2.2, 2.2, 0.7], [0.5, 0.4, 1.9]];
        let srcs = [[2.9, 1.3, 1.0], [0.7, 0.5, 1.5]];
        let base = nearest_mics(&srcs, &mics);
        let perm = [2, 0, 3, 1];
        let permuted: Vec<Point> = perm.iter().map(|&i| mics[i]).collect();
        let got = nearest_mics(&srcs, &permuted);
        for (b, g) in base.iter().zip(&got) {
            assert_eq!(*b, perm[*g]);
        }
    }

    fn one_device(mics: Vec<Point>) -> Device {
        Device {
            name: "array".into(),
            mic_positions: mics,
            is_listener: false,
            ear_channels: None,
        }
    }

    #[test]
    fn scene_validation() {
        let mut scene = Scene {
            room: Room::uniform([6.0, 5.0, 3.0], 0.3),
            speed_of_sound: 343.0,
            sample_rate: 16000,
            sources: vec![Source {
                position: [1.0, 1.0, 1.0],
                signal: vec![0.0; 10],
            }],
            devices: vec![one_device(vec![[2.0, 2.0, 1.0], [2.0005, 2.0, 1.0]])],
            noise_level_db: None,
            noise_seed: 0,
        };
        assert!(scene.validate().is_err());
        scene.devices[0].mic_positions[1] = [2.1, 2.0, 1.0];
        assert!(scene.validate().is_ok());
        scene.devices[0].is_listener = true;
        assert!(scene.validate().is_err());
        scene.devices[0].ear_channels = Some((0, 1));
        assert!(scene.validate().is_ok());
    }

    #[test]
    fn anechoic_render_delays_and_scales_source() {
        let signal: Vec<f64> = (0..2000).map(|i| ((i * 31 % 97) as f64 - 48.0) / 48.0).collect();
        let scene = Scene {
            room: Room::uniform([6.0, 5.0, 3.0], 0.3),
            speed_of_sound: 343.0,
            sample_rate: 16000,
            sources: vec![Source {
                position: [1.0, 1.0, 1.5],
                signal: signal.clone(),
            }],
            devices: vec![one_device(vec![[2.0, 1.5, 1.5]])],
            noise_level_db: None,
            noise_seed: 0,
        };
        let r = render(
            &scene,
            &RenderConfig {
                max_order: Some(0),
                // The highpass gives every RIR an infinite tail, which the early cut would clip.
                highpass: false,
                ..Default::default()
            },
        )
        .unwrap();
        let expected = dsp::filter_truncated(&signal, &r.rirs[0][0]);
        for (a, b) in r.images[0].channel(0).iter().zip(&expected) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(r.images[0], r.early_images[0]);
        assert_eq!(r.mixture, r.images[0]);
    }
}
