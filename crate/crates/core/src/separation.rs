//! Estimates of each source as heard at its reference microphone.
//!
//! Three methods are provided: the unprocessed nearest-microphone baseline,
//! blind separation by auxiliary-function independent vector analysis (AuxIVA)
//! and an oracle per-frequency MMSE filter that uses the true source images.
//! Every method is a linear operator on the mixture, represented as a
//! [`SeparationFilter`], so it can be applied to each source image separately
//! to measure separation SNR.

use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::Array3;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::snr_of_components;
use crate::par;
use crate::room::RenderedScene;
use crate::signal::MultichannelSignal;
use crate::stft::{istft, stft, StftConfig, StftTensor};
use crate::wav::{write_wav, WavEncoding};

type CMatrix = DMatrix<Complex64>;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Baseline,
    Iva,
    Ideal,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Baseline, Method::Iva, Method::Ideal];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Iva => "iva",
            Method::Ideal => "ideal",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Method::Baseline),
            "iva" => Ok(Method::Iva),
            "ideal" => Ok(Method::Ideal),
            other => Err(Error::Config(format!("unknown separation method '{other}'"))),
        }
    }
}

/// Linear map from the mixture to the `N` source estimates.
#[derive(Debug, Clone, PartialEq)]
pub enum SeparationFilter {
    /// Estimate `n` is input channel `channels[n]`.
    Select { channels: Vec<usize> },
    /// `S_n[tau, f] = sum_m weights[n, f, m] X_m[tau, f]`, resynthesized by overlap-add.
    Spectral { weights: Array3<Complex64>, config: StftConfig },
}

impl SeparationFilter {
    pub fn sources(&self) -> usize {
        match self {
            SeparationFilter::Select { channels } => channels.len(),
            SeparationFilter::Spectral { weights, .. } => weights.dim().0,
        }
    }

    pub fn apply(&self, signal: &MultichannelSignal) -> Result<MultichannelSignal> {
        match self {
            SeparationFilter::Select { channels } => signal.select_channels(channels),
            SeparationFilter::Spectral { weights, config } => {
                let x = stft(signal, config)?;
                let (n, bins, m) = weights.dim();
                if m != x.channels() || bins != x.bins() {
                    return Err(Error::Shape(format!(
                        "separation weights expect {m} channels / {bins} bins, got {} / {}",
                        x.channels(),
                        x.bins()
                    )));
                }
                let frames = x.frames();
                let mut out = Array3::zeros((n, frames, bins));
                for s in 0..n {
                    for tau in 0..frames {
                        for f in 0..bins {
                            let mut acc = ZERO;
                            for c in 0..m {
                                acc += weights[[s, f, c]] * x.coeffs[[c, tau, f]];
                            }
                            out[[s, tau, f]] = acc;
                        }
                    }
                }
                istft(&x.with_coeffs(out), signal.len())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub method: Method,
    pub sources: usize,
    pub mics: usize,
    pub frame_len: Option<usize>,
    pub hop: Option<usize>,
    pub iterations: usize,
    pub converged: bool,
    /// Covariance matrices that needed `eps * trace` loading before inversion.
    pub regularization_events: usize,
    /// Auxiliary objective before the first and after every sweep.
    pub objective_history: Vec<f64>,
}

impl SeparationReport {
    fn plain(method: Method, sources: usize, mics: usize) -> Self {
        Self {
            method,
            sources,
            mics,
            frame_len: None,
            hop: None,
            iterations: 0,
            converged: true,
            regularization_events: 0,
            objective_history: Vec::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone)]
pub struct SeparationResult {
    /// One channel per source, aligned to the mixture timeline.
    pub estimates: MultichannelSignal,
    pub method: Method,
    /// Reference microphone of each estimate, in the input's channel numbering.
    pub reference_mics: Vec<usize>,
    /// Separation SNR per source, from the ground-truth images.
    pub per_source_snr: Option<Vec<f64>>,
    pub filter: SeparationFilter,
    pub report: SeparationReport,
}

impl SeparationResult {
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        write_wav(path, &self.estimates, WavEncoding::Float32)
    }
}

/// Separation SNR of every source: the filter applied to each image, scored at that source's output.
pub fn separation_snr(filter: &SeparationFilter, images: &[MultichannelSignal]) -> Result<Vec<f64>> {
    let n = filter.sources();
    if images.len() != n {
        return Err(Error::Shape(format!("{} images for {n} estimates", images.len())));
    }
    let outputs = par::map_slice(images, |img| filter.apply(img));
    let outputs = outputs.into_iter().collect::<Result<Vec<_>>>()?;
    (0..n)
        .map(|target| {
            let comps: Vec<Vec<f64>> = outputs.iter().map(|o| o.channel_vec(target)).collect();
            snr_of_components(&comps, target)
        })
        .collect()
}

fn finish(
    rendered: &RenderedScene,
    method: Method,
    filter: SeparationFilter,
    report: SeparationReport,
) -> Result<SeparationResult> {
    let estimates = filter.apply(&rendered.mixture)?;
    let per_source_snr = Some(separation_snr(&filter, &rendered.images)?);
    Ok(SeparationResult {
        estimates,
        method,
        reference_mics: rendered.reference_mics.clone(),
        per_source_snr,
        filter,
        report,
    })
}

/// The mixture at each source's reference microphone.
pub fn separate_baseline(rendered: &RenderedScene) -> Result<SeparationResult> {
    let filter = SeparationFilter::Select {
        channels: rendered.reference_mics.clone(),
    };
    let report = SeparationReport::plain(Method::Baseline, rendered.sources(), rendered.mics());
    finish(rendered, Method::Baseline, filter, report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IvaConfig {
    pub stft: StftConfig,
    pub max_iterations: usize,
    /// Stop once the relative objective change falls below this.
    pub tolerance: f64,
    /// `V` is loaded with `regularization * trace(V) * I` when it is numerically singular.
    pub regularization: f64,
}

impl Default for IvaConfig {
    fn default() -> Self {
        Self {
            stft: StftConfig::sqrt_hann(2048),
            max_iterations: 100,
            tolerance: 1e-6,
            regularization: 1e-10,
        }
    }
}

/// Blind separation by AuxIVA, outputs projected back to the reference microphones.
pub fn separate_iva(rendered: &RenderedScene, cfg: &IvaConfig) -> Result<SeparationResult> {
    let x = stft(&rendered.mixture, &cfg.stft)?;
    let (weights, mut report) = auxiva(&x, &rendered.reference_mics, cfg)?;
    report.frame_len = Some(cfg.stft.frame_len);
    report.hop = Some(cfg.stft.hop);
    let filter = SeparationFilter::Spectral {
        weights,
        config: cfg.stft,
    };
    finish(rendered, Method::Iva, filter, report)
}

/// Per-frequency state for one AuxIVA run.
struct Bin {
    /// `z = proj x`, `N x M` whitening projection.
    proj: CMatrix,
    /// `x ~ unproj z`, `M x N`.
    unproj: CMatrix,
    /// Whitened observations, `N x frames`.
    z: CMatrix,
    /// Demixing matrix, rows are `w_n^H`.
    w: CMatrix,
}

fn hermitian_eigen(c: CMatrix) -> (Vec<f64>, CMatrix) {
    let eig = SymmetricEigen::new(c);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = CMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

fn whiten(x: &StftTensor, f: usize, n: usize, refs: &[usize]) -> Bin {
    let (m, frames) = (x.channels(), x.frames());
    let obs = CMatrix::from_fn(m, frames, |c, t| x.coeffs[[c, t, f]]);
    let cov = (&obs * obs.adjoint()).unscale(frames as f64);
    let (values, vectors) = hermitian_eigen(cov);
    let floor = values[0].max(f64::MIN_POSITIVE) * 1e-12;
    let scale: Vec<f64> = values[..n].iter().map(|&v| v.max(floor).sqrt()).collect();
    let e = vectors.columns(0, n).into_owned();
    let proj = CMatrix::from_fn(n, m, |r, c| e[(c, r)].conj() / scale[r]);
    let unproj = CMatrix::from_fn(m, n, |r, c| e[(r, c)] * scale[c]);
    let z = &proj * &obs;
    // Output n starts as the reference microphone's coefficient.
    let w = CMatrix::from_fn(n, n, |r, c| unproj[(refs[r], c)]);
    Bin { proj, unproj, z, w }
}

fn log_abs_det(w: &CMatrix) -> f64 {
    w.clone().determinant().norm().ln()
}

/// AuxIVA on an STFT tensor. Returns weights `[N, bins, M]` mapping the
/// mixture to each source's image at its reference microphone.
pub fn auxiva(x: &StftTensor, refs: &[usize], cfg: &IvaConfig) -> Result<(Array3<Complex64>, SeparationReport)> {
    let (m, frames, bins) = x.coeffs.dim();
    let n = refs.len();
    if n < 2 {
        return Err(Error::Config("IVA needs at least two sources".into()));
    }
    if n > m {
        return Err(Error::Config(format!("IVA cannot separate {n} sources from {m} microphones")));
    }
    if let Some(&r) = refs.iter().find(|&&r| r >= m) {
        return Err(Error::Shape(format!("reference microphone {r} out of range for {m} channels")));
    }
    if frames < 2 {
        return Err(Error::Config("IVA needs at least two frames".into()));
    }
    let mut state: Vec<Bin> = par::map_range(bins, |f| whiten(x, f, n, refs));
    let mut history: Vec<f64> = Vec::new();
    let mut regularization_events = 0;
    let mut iterations = 0;
    let mut converged = false;
    loop {
        let (r, objective) = contrast(&state, n, frames);
        if let Some(&prev) = history.last() {
            let change = (prev - objective) / f64::max(prev.abs(), 1e-300);
            if change.abs() < cfg.tolerance {
                history.push(objective);
                converged = true;
                break;
            }
        }
        history.push(objective);
        if iterations == cfg.max_iterations {
            break;
        }
        let updated = par::map_slice(&state, |bin| update_bin(bin, &r, cfg.regularization));
        for (bin, (w, events)) in state.iter_mut().zip(updated) {
            bin.w = w?;
            regularization_events += events;
        }
        iterations += 1;
    }
    let weights = project_back(&state, x, refs)?;
    let report = SeparationReport {
        method: Method::Iva,
        sources: n,
        mics: m,
        frame_len: Some(x.frame_len),
        hop: Some(x.hop),
        iterations,
        converged,
        regularization_events,
        objective_history: history,
    };
    Ok((weights, report))
}

/// `r_n[tau]` for the current demixing, and the auxiliary-free objective.
fn contrast(state: &[Bin], n: usize, frames: usize) -> (Vec<Vec<f64>>, f64) {
    let power: Vec<Vec<f64>> = par::map_slice(state, |bin| {
        let y = &bin.w * &bin.z;
        y.iter().map(|v| v.norm_sqr()).collect()
    });
    // Column-major N x frames; summed over bins in a fixed order.
    let mut r = vec![vec![0.0; frames]; n];
    for p in &power {
        for t in 0..frames {
            for s in 0..n {
                r[s][t] += p[t * n + s];
            }
        }
    }
    r.iter_mut().flatten().for_each(|v| *v = v.sqrt());
    let data: f64 = r.iter().map(|rs| rs.iter().sum::<f64>() / frames as f64).sum();
    let logdet: f64 = state.iter().map(|b| log_abs_det(&b.w)).sum();
    (r, data - logdet)
}

fn update_bin(bin: &Bin, r: &[Vec<f64>], eps: f64) -> (Result<CMatrix>, usize) {
    let (n, frames) = bin.z.shape();
    let mut w = bin.w.clone();
    let mut events = 0;
    for s in 0..n {
        let peak = r[s].iter().cloned().fold(0.0, f64::max);
        let floor = f64::max(peak * 1e-10, f64::MIN_POSITIVE);
        let mut v = CMatrix::zeros(n, n);
        for t in 0..frames {
            let weight = 1.0 / r[s][t].max(floor);
            let col = bin.z.column(t);
            for a in 0..n {
                let za = col[a] * weight;
                for b in 0..n {
                    v[(a, b)] += za * col[b].conj();
                }
            }
        }
        v.unscale_mut(frames as f64);
        let mut e = DVector::zeros(n);
        e[s] = Complex64::new(1.0, 0.0);
        let solve = |v: &CMatrix| -> Option<DVector<Complex64>> {
            let sol = (&w * v).lu().solve(&e)?;
            let q = (sol.adjoint() * v * &sol)[(0, 0)].re;
            (sol.iter().all(|c| c.re.is_finite() && c.im.is_finite()) && q > 0.0 && q.is_finite())
                .then(|| sol.unscale(q.sqrt()))
        };
        let sol = match solve(&v) {
            Some(sol) => sol,
            None => {
                events += 1;
                let trace: f64 = (0..n).map(|a| v[(a, a)].re).sum();
                let load = eps * trace.max(f64::MIN_POSITIVE);
                for a in 0..n {
                    v[(a, a)] += load;
                }
                match solve(&v) {
                    Some(sol) => sol,
                    None => {
                        return (
                            Err(Error::Numerical("IVA weighted covariance singular after regularization".into())),
                            events,
                        )
                    }
                }
            }
        };
        for c in 0..n {
            w[(s, c)] = sol[c].conj();
        }
    }
    (Ok(w), events)
}

/// Each output rescaled to its image at the reference microphones, with a single
/// global permutation chosen by envelope correlation with those microphones.
fn project_back(state: &[Bin], x: &StftTensor, refs: &[usize]) -> Result<Array3<Complex64>> {
    let n = refs.len();
    let (m, frames, bins) = x.coeffs.dim();
    let mut mix_w = Vec::with_capacity(bins);
    for bin in state {
        let a = bin
            .w
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("IVA demixing matrix is singular".into()))?;
        // Column k of `mix` is output k's image at every microphone.
        mix_w.push((&bin.unproj * a, bin.w.clone() * &bin.proj));
    }
    // Magnitude correlation of output k (as heard at ref n) with the mixture at ref n.
    let mut score = vec![vec![0.0; n]; n];
    for k in 0..n {
        for (s, &ref_m) in refs.iter().enumerate() {
            let mut est = Vec::with_capacity(frames * bins);
            let mut obs = Vec::with_capacity(frames * bins);
            for (f, (mix, dem)) in mix_w.iter().enumerate() {
                for t in 0..frames {
                    let y: Complex64 = (0..m).map(|c| dem[(k, c)] * x.coeffs[[c, t, f]]).sum();
                    est.push((mix[(ref_m, k)] * y).norm());
                    obs.push(x.coeffs[[ref_m, t, f]].norm());
                }
            }
            score[k][s] = correlation(&est, &obs);
        }
    }
    let perm = best_assignment(&score);
    let mut weights = Array3::zeros((n, bins, m));
    for (s, &ref_m) in refs.iter().enumerate() {
        let k = perm[s];
        for (f, (mix, dem)) in mix_w.iter().enumerate() {
            for c in 0..m {
                weights[[s, f, c]] = mix[(ref_m, k)] * dem[(k, c)];
            }
        }
    }
    Ok(weights)
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa > 0.0 && sbb > 0.0 {
        sab / (saa * sbb).sqrt()
    } else {
        0.0
    }
}

/// `perm[source] = output` maximizing the summed score; exhaustive up to 8 sources, greedy beyond.
fn best_assignment(score: &[Vec<f64>]) -> Vec<usize> {
    let n = score.len();
    let identity: Vec<usize> = (0..n).collect();
    if n > 8 {
        let mut taken = vec![false; n];
        return (0..n)
            .map(|s| {
                let k = (0..n)
                    .filter(|&k| !taken[k])
                    .max_by(|&a, &b| score[a][s].total_cmp(&score[b][s]))
                    .expect("an output remains");
                taken[k] = true;
                k
            })
            .collect();
    }
    let total = |p: &[usize]| -> f64 { p.iter().enumerate().map(|(s, &k)| score[k][s]).sum() };
    let mut best = identity.clone();
    let mut best_score = total(&best);
    let mut p = identity;
    // Heap's algorithm; the identity wins ties because it is visited first.
    let mut c = vec![0; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                p.swap(0, i);
            } else {
                p.swap(c[i], i);
            }
            let sc = total(&p);
            if sc > best_score {
                best_score = sc;
                best = p.clone();
            }
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

/// Loading factors tried, relative to the mean diagonal, when `R_xx[f]` is not positive definite.
pub const IDEAL_LOADING: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];

/// Oracle MMSE separation from the true image of each source at its reference microphone.
pub fn separate_ideal(rendered: &RenderedScene, config: &StftConfig) -> Result<SeparationResult> {
    let x = stft(&rendered.mixture, config)?;
    let (m, frames, bins) = x.coeffs.dim();
    let n = rendered.sources();
    let targets: Vec<StftTensor> = rendered
        .images
        .iter()
        .zip(&rendered.reference_mics)
        .map(|(img, &r)| stft(&img.select_channels(&[r])?, config))
        .collect::<Result<_>>()?;
    let per_bin = par::map_range(bins, |f| -> Result<(Vec<Vec<Complex64>>, usize)> {
        let obs = CMatrix::from_fn(m, frames, |c, t| x.coeffs[[c, t, f]]);
        let r_xx = (&obs * obs.adjoint()).unscale(frames as f64);
        let mean_diag = (0..m).map(|a| r_xx[(a, a)].re).sum::<f64>() / m as f64;
        let rhs = CMatrix::from_fn(m, n, |c, s| {
            (0..frames).map(|t| x.coeffs[[c, t, f]] * targets[s].coeffs[[0, t, f]].conj()).sum::<Complex64>()
                / frames as f64
        });
        if mean_diag <= 0.0 {
            return Ok((vec![vec![ZERO; m]; n], 0));
        }
        for (attempt, &delta) in IDEAL_LOADING.iter().enumerate() {
            let mut a = r_xx.clone();
            for d in 0..m {
                a[(d, d)] += delta * mean_diag;
            }
            if let Some(ch) = a.cholesky() {
                let w = ch.solve(&rhs);
                let weights = (0..n).map(|s| (0..m).map(|c| w[(c, s)].conj()).collect()).collect();
                return Ok((weights, attempt));
            }
        }
        Err(Error::Numerical(format!("mixture covariance at bin {f} is indefinite after maximum loading")))
    });
    let mut weights = Array3::zeros((n, bins, m));
    let mut events = 0;
    for (f, res) in per_bin.into_iter().enumerate() {
        let (w, e) = res?;
        events += usize::from(e > 0);
        for s in 0..n {
            for c in 0..m {
                weights[[s, f, c]] = w[s][c];
            }
        }
    }
    let mut report = SeparationReport::plain(Method::Ideal, n, m);
    report.frame_len = Some(config.frame_len);
    report.hop = Some(config.hop);
    report.regularization_events = events;
    let filter = SeparationFilter::Spectral {
        weights,
        config: *config,
    };
    finish(rendered, Method::Ideal, filter, report)
}

pub fn separate(rendered: &RenderedScene, method: Method, iva: &IvaConfig) -> Result<SeparationResult> {
    match method {
        Method::Baseline => separate_baseline(rendered),
        Method::Iva => separate_iva(rendered, iva),
        Method::Ideal => separate_ideal(rendered, &iva.stft),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::room::sum_mixture;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Exp1, StandardNormal};

    /// Laplacian samples drawn as a Gaussian scale mixture with an exponential
    /// variance held for 1024 samples, so the per-frame spectra carry the
    /// envelope variation a frequency-domain separator can see.
    fn laplacian(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut var = 0.0;
        (0..len)
            .map(|t| {
                if t % 1024 == 0 {
                    var = Exp1.sample(&mut rng);
                }
                let g: f64 = StandardNormal.sample(&mut rng);
                g * f64::sqrt(2.0 * var)
            })
            .collect()
    }

    /// Instantaneous mixture `x = A s` expressed as a rendered scene, source images as columns of `A`.
    fn instantaneous(a: &[[f64; 2]; 2], s: &[Vec<f64>], noise: f64) -> RenderedScene {
        let len = s[0].len();
        let images: Vec<MultichannelSignal> = (0..2)
            .map(|n| {
                MultichannelSignal::from_channels((0..2).map(|m| s[n].iter().map(|v| a[m][n] * v).collect()).collect(), 16000)
                    .unwrap()
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let noise = MultichannelSignal::from_channels(
            (0..2).map(|_| (0..len).map(|_| { let g: f64 = StandardNormal.sample(&mut rng); noise * g }).collect()).collect(),
            16000,
        )
        .unwrap();
        let mixture = sum_mixture(&images, &noise);
        RenderedScene {
            early_images: images.clone(),
            images,
            noise,
            mixture,
            reference_mics: vec![0, 1],
            rirs: Vec::new(),
            direct_delays: Vec::new(),
        }
    }

    fn fast_iva(iterations: usize) -> IvaConfig {
        IvaConfig {
            stft: StftConfig::sqrt_hann(256),
            max_iterations: iterations,
            ..Default::default()
        }
    }

    #[test]
    fn baseline_picks_reference_channels() {
        let s = vec![laplacian(4000, 1), laplacian(4000, 2)];
        let r = instantaneous(&[[1.0, 0.2], [0.3, 1.0]], &s, 0.0);
        let out = separate_baseline(&r).unwrap();
        assert_eq!(out.estimates, r.mixture);
        let snr = out.per_source_snr.unwrap();
        let direct = 10.0 * (1.0 / 0.04f64).log10() + 10.0 * (crate::dsp::energy(&s[0]) / crate::dsp::energy(&s[1])).log10();
        assert!((snr[0] - direct).abs() < 1e-9);
    }

    #[test]
    fn single_source_baseline_is_exact_image() {
        let mut r = instantaneous(&[[1.0, 0.0], [0.5, 0.0]], &[laplacian(1000, 1), vec![0.0; 1000]], 0.0);
        r.images.truncate(1);
        r.reference_mics.truncate(1);
        let out = separate_baseline(&r).unwrap();
        assert_eq!(out.estimates.channel_vec(0), r.images[0].channel_vec(0));
        assert_eq!(out.per_source_snr.unwrap()[0], crate::metrics::SNR_CAP_DB);
    }

    #[test]
    fn iva_on_separated_input_stays_diagonal() {
        // The residual cross-talk is set by the sample correlation between the
        // sources, which decays like 1/sqrt(frames); this needs a few thousand frames.
        let s = vec![laplacian(640_000, 3), laplacian(640_000, 4)];
        let r = instantaneous(&[[1.0, 0.0], [0.0, 1.0]], &s, 0.0);
        let out = separate_iva(&r, &fast_iva(100)).unwrap();
        let snr = out.per_source_snr.unwrap();
        assert!(snr.iter().all(|&v| v >= 40.0), "{snr:?}");
    }

    #[test]
    fn iva_separates_instantaneous_laplacian_mixture() {
        let s = vec![laplacian(32000, 5), laplacian(32000, 6)];
        let r = instantaneous(&[[1.0, 0.7], [0.6, 1.0]], &s, 0.0);
        let before = separate_baseline(&r).unwrap().per_source_snr.unwrap();
        let out = separate_iva(&r, &fast_iva(50)).unwrap();
        let after = out.per_source_snr.as_ref().unwrap();
        for n in 0..2 {
            assert!(after[n] - before[n] > 15.0, "{after:?} vs {before:?}");
        }
        assert!(out.report.iterations <= 50);
        for pair in out.report.objective_history.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9 * pair[0].abs(), "{:?}", out.report.objective_history);
        }
    }

    #[test]
    fn iva_rejects_single_source() {
        let r = instantaneous(&[[1.0, 0.0], [0.5, 0.0]], &[laplacian(4000, 1), vec![0.0; 4000]], 0.0);
        let x = stft(&r.mixture, &StftConfig::sqrt_hann(256)).unwrap();
        assert!(auxiva(&x, &[0], &fast_iva(5)).is_err());
        assert!(auxiva(&x, &[0, 1, 1], &fast_iva(5)).is_err());
    }

    #[test]
    fn iva_regularizes_silent_bins() {
        // Band-limited: every bin above DC-ish is empty, so V is singular there.
        let s = vec![vec![0.0; 8000], vec![0.0; 8000]];
        let mut r = instantaneous(&[[1.0, 0.5], [0.5, 1.0]], &s, 0.0);
        let t: Vec<f64> = (0..8000).map(|i| (i as f64 * 0.01).sin()).collect();
        r.mixture = MultichannelSignal::from_channels(vec![t.clone(), t.iter().map(|v| 0.5 * v).collect()], 16000).unwrap();
        let x = stft(&r.mixture, &StftConfig::sqrt_hann(256)).unwrap();
        let (_, report) = auxiva(&x, &[0, 1], &fast_iva(3)).unwrap();
        assert!(report.regularization_events > 0);
    }

    #[test]
    fn ideal_single_source_reproduces_reference_image() {
        let s = laplacian(16000, 8);
        let mut r = instantaneous(&[[1.0, 0.0], [0.4, 0.0]], &[s, vec![0.0; 16000]], 0.0);
        r.images.truncate(1);
        r.reference_mics.truncate(1);
        let out = separate_ideal(&r, &StftConfig::sqrt_hann(256)).unwrap();
        let est = out.estimates.channel_vec(0);
        let truth = r.images[0].channel_vec(0);
        let interior = 256..15800;
        let err: f64 = interior.clone().map(|t| (est[t] - truth[t]).powi(2)).sum();
        let ref_e: f64 = interior.map(|t| truth[t].powi(2)).sum();
        assert!((err / ref_e).sqrt() < 1e-3);
        assert_eq!(out.per_source_snr.unwrap()[0], crate::metrics::SNR_CAP_DB);
    }

    #[test]
    fn methods_are_scale_equivariant() {
        let s = vec![laplacian(16000, 10), laplacian(16000, 11)];
        let r = instantaneous(&[[1.0, 0.6], [0.5, 1.0]], &s, 0.01);
        let scale = |r: &RenderedScene, c: f64| -> RenderedScene {
            let images: Vec<_> = r.images.iter().map(|i| i.scaled(c)).collect();
            let noise = r.noise.scaled(c);
            RenderedScene {
                mixture: sum_mixture(&images, &noise),
                early_images: images.clone(),
                images,
                noise,
                ..r.clone()
            }
        };
        let r2 = scale(&r, 3.0);
        let cfg = fast_iva(20);
        for method in Method::ALL {
            let a = separate(&r, method, &cfg).unwrap().estimates;
            let b = separate(&r2, method, &cfg).unwrap().estimates;
            let peak = a.peak();
            for (u, v) in a.samples().iter().zip(b.samples().iter()) {
                assert!((3.0 * u - v).abs() < 1e-6 * peak, "{method}");
            }
        }
    }

    #[test]
    fn assignment_prefers_best_permutation() {
        let score = vec![vec![0.1, 0.9, 0.0], vec![0.8, 0.2, 0.1], vec![0.0, 0.0, 0.5]];
        assert_eq!(best_assignment(&score), vec![1, 0, 2]);
        assert_eq!(best_assignment(&[vec![1.0, 0.0], vec![0.0, 1.0]]), vec![0, 1]);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("pca".parse::<Method>().is_err());
    }
}
