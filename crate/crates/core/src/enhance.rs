//! Delay-constrained time-domain multichannel Wiener remixing filters.
//!
//! A listening device estimates `y[t - alpha]`, a gain-weighted sum of the
//! early source images at one ear, with a causal FIR filter over its own
//! microphones. The filter solves the block-Toeplitz normal equations built
//! from the lag-domain statistics in [`crate::stats`].

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::artifact::{write_atomic, BinReader, BinWriter};
use crate::error::{Error, Result};
use crate::room::RenderedScene;
use crate::signal::{fir_apply, FirFilter, MultichannelSignal};
use crate::stats::{
    autocorrelation_lags, cross_spectra, estimate_rtf, target_cross_lags, window_reir, LagCorrelations, ReirWindow,
    SpatialStats,
};
use crate::toeplitz::{solve_with_loading, BlockToeplitz, SolverKind};

/// Diagonal loading tried in turn, relative to the mean diagonal of `r_xx[0]`.
pub const LOADING_FACTORS: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];
/// Largest acceptable relative normal-equation residual.
pub const RESIDUAL_TOLERANCE: f64 = 1e-6;
/// Cap on `M_local (K + 1)`.
pub const MAX_UNKNOWNS: usize = 65536;

const FILTER_MAGIC: &[u8; 8] = b"CLFILTER";
const FILTER_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ear {
    Left,
    Right,
}

impl Ear {
    pub const BOTH: [Ear; 2] = [Ear::Left, Ear::Right];

    pub fn as_str(self) -> &'static str {
        match self {
            Ear::Left => "left",
            Ear::Right => "right",
        }
    }

    /// The local channel of this ear.
    pub fn channel(self, ears: (usize, usize)) -> usize {
        match self {
            Ear::Left => ears.0,
            Ear::Right => ears.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemixSpec {
    pub gains: Vec<f64>,
    /// `alpha`, in samples.
    pub delay: usize,
    /// `K`; the filter has `K + 1` taps.
    pub order: usize,
    pub ear: Ear,
}

impl RemixSpec {
    /// Unit gain on `target`, zero elsewhere.
    pub fn single_target(target: usize, sources: usize, delay: usize, order: usize, ear: Ear) -> Self {
        let mut gains = vec![0.0; sources];
        gains[target] = 1.0;
        Self {
            gains,
            delay,
            order,
            ear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.delay > self.order {
            return Err(Error::Config(format!("delay {} exceeds filter order {}", self.delay, self.order)));
        }
        if self.gains.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(Error::Config("remix gains must be finite and non-negative".into()));
        }
        if !self.gains.iter().any(|&g| g > 0.0) {
            return Err(Error::Config("at least one remix gain must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MwfSolution {
    pub filter: FirFilter,
    /// Relative residual of the normal equations actually solved (including loading).
    pub residual_norm: f64,
    /// Absolute diagonal loading added to `r_xx[0]`.
    pub loading: f64,
    pub solver: SolverKind,
}

fn check_size(m: usize, order: usize) -> Result<()> {
    let unknowns = m * (order + 1);
    if unknowns > MAX_UNKNOWNS {
        return Err(Error::Config(format!(
            "{m} channels x {} taps = {unknowns} unknowns exceeds the cap of {MAX_UNKNOWNS}",
            order + 1
        )));
    }
    Ok(())
}

/// Solve one normal-equation system for several stacked right-hand sides
/// (`rhs[d][i]` is the `i`-th block, `r_xy[alpha - i]`).
pub fn design_batch(r_xx: &[Vec<f64>], mics: usize, rhs: &[Vec<Vec<f64>>], delay: usize) -> Result<Vec<MwfSolution>> {
    let order = r_xx.len().checked_sub(1).ok_or_else(|| Error::Shape("no autocorrelation lags".into()))?;
    check_size(mics, order)?;
    if delay > order {
        return Err(Error::Config(format!("delay {delay} exceeds filter order {order}")));
    }
    if let Some(bad) = rhs.iter().find(|r| r.len() != order + 1 || r.iter().any(|b| b.len() != mics)) {
        return Err(Error::Shape(format!(
            "right-hand side has {} blocks, expected {} of size {mics}",
            bad.len(),
            order + 1
        )));
    }
    if rhs.is_empty() {
        return Ok(Vec::new());
    }
    let t = BlockToeplitz::new(r_xx.to_vec(), mics)?;
    let stacked: Vec<Vec<f64>> = rhs.iter().map(|r| r.concat()).collect();
    let out = solve_with_loading(&t, &stacked, &LOADING_FACTORS, RESIDUAL_TOLERANCE)?;
    let residuals = crate::toeplitz::relative_residuals(&t.loaded(out.loading), &stacked, &out.solutions);
    out.solutions
        .iter()
        .zip(residuals)
        .map(|(w, residual_norm)| {
            let taps = Array2::from_shape_fn((mics, order + 1), |(c, k)| w[k * mics + c]);
            Ok(MwfSolution {
                filter: FirFilter::new(taps, delay)?,
                residual_norm,
                loading: out.loading,
                solver: out.solver,
            })
        })
        .collect()
}

/// The Wiener filter for one set of lag-domain correlations.
pub fn design_mwf(corr: &LagCorrelations, spec: &RemixSpec) -> Result<MwfSolution> {
    spec.validate()?;
    if corr.order != spec.order || corr.delay != spec.delay {
        return Err(Error::Config(format!(
            "correlations are for K={} alpha={}, spec asks for K={} alpha={}",
            corr.order, corr.delay, spec.order, spec.delay
        )));
    }
    let mut out = design_batch(&corr.r_xx, corr.mics, std::slice::from_ref(&corr.r_xy), corr.delay)?;
    Ok(out.remove(0))
}

/// `y[t] = sum_n g_n c_early,n[ear_channel][t - alpha]`, the ground truth the filter aims at.
pub fn remix_targets(rendered: &RenderedScene, spec: &RemixSpec, ear_channel: usize) -> Result<Vec<f64>> {
    if spec.gains.len() != rendered.sources() {
        return Err(Error::Shape(format!(
            "{} gains for {} sources",
            spec.gains.len(),
            rendered.sources()
        )));
    }
    if ear_channel >= rendered.mics() {
        return Err(Error::Shape(format!("ear channel {ear_channel} out of range")));
    }
    let len = rendered.len();
    let mut y = vec![0.0; len];
    for (img, &g) in rendered.early_images.iter().zip(&spec.gains) {
        if g == 0.0 {
            continue;
        }
        let ch = img.channel(ear_channel);
        for t in spec.delay..len {
            y[t] += g * ch[t - spec.delay];
        }
    }
    Ok(y)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignParams {
    pub order: usize,
    pub delay: usize,
    pub reir: ReirWindow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinauralFilters {
    pub gains: Vec<f64>,
    pub left: MwfSolution,
    pub right: MwfSolution,
}

impl BinauralFilters {
    pub fn ear(&self, ear: Ear) -> &MwfSolution {
        match ear {
            Ear::Left => &self.left,
            Ear::Right => &self.right,
        }
    }
}

/// Left and right filters for every gain vector, sharing one factorization of `r_xx`.
pub fn design_binaural(stats: &SpatialStats, gain_sets: &[Vec<f64>], params: &DesignParams) -> Result<Vec<BinauralFilters>> {
    let ears = stats
        .ear_channels
        .ok_or_else(|| Error::Config("statistics do not belong to a listener with ear channels".into()))?;
    for gains in gain_sets {
        RemixSpec {
            gains: gains.clone(),
            delay: params.delay,
            order: params.order,
            ear: Ear::Left,
        }
        .validate()?;
    }
    check_size(stats.mics(), params.order)?;
    let rtf = estimate_rtf(stats)?;
    let reir = window_reir(&rtf, &params.reir, stats.sample_rate)?;
    let xc = cross_spectra(stats, &reir)?;
    let r_xx = autocorrelation_lags(&stats.r_xx, params.order)?;
    let mut rhs = Vec::with_capacity(2 * gain_sets.len());
    for gains in gain_sets {
        for ear in Ear::BOTH {
            rhs.push(target_cross_lags(&xc, gains, ear.channel(ears), params.order, params.delay)?);
        }
    }
    let mut solutions = design_batch(&r_xx, stats.mics(), &rhs, params.delay)?.into_iter();
    Ok(gain_sets
        .iter()
        .map(|gains| BinauralFilters {
            gains: gains.clone(),
            left: solutions.next().expect("two solutions per gain set"),
            right: solutions.next().expect("two solutions per gain set"),
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct BinauralOutput {
    pub left: Vec<f64>,
    pub right: Vec<f64>,
    pub filters: BinauralFilters,
}

/// Filter a listener's own microphones into a binaural pair with the given remix gains.
pub fn enhance(mixture: &MultichannelSignal, stats: &SpatialStats, gains: &[f64], params: &DesignParams) -> Result<BinauralOutput> {
    if mixture.channels() != stats.mics() {
        return Err(Error::Shape(format!(
            "statistics are for {} microphones, mixture has {}",
            stats.mics(),
            mixture.channels()
        )));
    }
    let filters = design_binaural(stats, &[gains.to_vec()], params)?.remove(0);
    Ok(BinauralOutput {
        left: fir_apply(&filters.left.filter, mixture)?,
        right: fir_apply(&filters.right.filter, mixture)?,
        filters,
    })
}

fn solver_code(s: SolverKind) -> u64 {
    match s {
        SolverKind::Levinson => 0,
        SolverKind::Dense => 1,
    }
}

pub fn write_filter(path: impl AsRef<Path>, solution: &MwfSolution) -> Result<()> {
    let f = &solution.filter;
    let mut w = BinWriter::new(FILTER_MAGIC, FILTER_VERSION);
    w.u64(f.channels() as u64)
        .u64(f.order() as u64)
        .u64(f.declared_delay() as u64)
        .u64(solver_code(solution.solver))
        .f64(solution.loading)
        .f64(solution.residual_norm)
        .f64s(f.taps().iter());
    write_atomic(path, &w.finish())
}

pub fn read_filter(path: impl AsRef<Path>) -> Result<MwfSolution> {
    let data = std::fs::read(path)?;
    let mut r = BinReader::new(&data, FILTER_MAGIC, FILTER_VERSION)?;
    let channels = r.usize()?;
    let order = r.usize()?;
    let delay = r.usize()?;
    let solver = match r.u64()? {
        0 => SolverKind::Levinson,
        1 => SolverKind::Dense,
        other => return Err(Error::Format(format!("unknown solver code {other}"))),
    };
    let loading = r.f64()?;
    let residual_norm = r.f64()?;
    let count = channels
        .checked_mul(order + 1)
        .ok_or_else(|| Error::Format("filter dimensions overflow".into()))?;
    let taps = Array2::from_shape_vec((channels, order + 1), r.f64s(count)?).map_err(|e| Error::Format(e.to_string()))?;
    r.expect_end()?;
    Ok(MwfSolution {
        filter: FirFilter::new(taps, delay)?,
        residual_norm,
        loading,
        solver,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::estimate_spectra;
    use crate::stft::{stft, StftConfig};
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn white(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    /// Random instance with `r_xx` from a moving-average process (so `T` is positive definite).
    fn random_corr(m: usize, order: usize, delay: usize, seed: u64) -> LagCorrelations {
        let t = crate::toeplitz::tests::random_system(m, order, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        LagCorrelations {
            mics: m,
            order,
            delay,
            r_xx: (0..=order)
                .map(|k| (0..m * m).map(|ab| t.entry(k as isize, ab / m, ab % m)).collect())
                .collect(),
            r_xy: (0..=order).map(|_| (0..m).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
        }
    }

    /// Assemble the normal equations entry by entry and solve densely.
    fn dense_oracle(c: &LagCorrelations) -> Vec<f64> {
        let (m, n) = (c.mics, c.order + 1);
        let a = DMatrix::from_fn(m * n, m * n, |r, col| c.xx((col / m) as isize - (r / m) as isize, r % m, col % m));
        let b = DVector::from_fn(m * n, |r, _| c.xy(c.delay as isize - (r / m) as isize)[r % m]);
        a.lu().solve(&b).unwrap().iter().copied().collect()
    }

    fn spec_for(c: &LagCorrelations) -> RemixSpec {
        RemixSpec {
            gains: vec![1.0],
            delay: c.delay,
            order: c.order,
            ear: Ear::Left,
        }
    }

    fn stacked(f: &FirFilter) -> Vec<f64> {
        let m = f.channels();
        (0..(f.order() + 1) * m).map(|i| f.taps()[[i % m, i / m]]).collect()
    }

    #[test]
    fn matches_dense_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for seed in 0..100 {
            let m = rng.random_range(1..=3);
            let k = rng.random_range(0..=8);
            let delay = rng.random_range(0..=k);
            let c = random_corr(m, k, delay, seed);
            let sol = design_mwf(&c, &spec_for(&c)).unwrap();
            let oracle = dense_oracle(&c);
            let got = stacked(&sol.filter);
            let err = got.iter().zip(&oracle).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm = oracle.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(err < 1e-8 * norm, "seed {seed}: {err} vs {norm}");
            assert!(sol.residual_norm < RESIDUAL_TOLERANCE);
            assert_eq!(sol.loading, 0.0);
        }
    }

    #[test]
    fn uncorrelated_target_gives_zero_filter() {
        let mut c = random_corr(2, 6, 3, 1);
        c.r_xy.iter_mut().flatten().for_each(|v| *v = 0.0);
        let sol = design_mwf(&c, &spec_for(&c)).unwrap();
        assert!(sol.filter.taps().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn white_input_delayed_target_is_an_impulse() {
        // Local mic, source estimate and target are all the same white signal.
        let x = white(200 * 512, 3);
        let sig = MultichannelSignal::mono(x, 16000).unwrap();
        let cfg = StftConfig::sqrt_hann(1024);
        let t = stft(&sig, &cfg).unwrap();
        let mut stats = estimate_spectra(&t, &t).unwrap();
        stats.ear_channels = Some((0, 0));
        let params = DesignParams {
            order: 63,
            delay: 20,
            reir: ReirWindow::default(),
        };
        let f = design_binaural(&stats, &[vec![1.0]], &params).unwrap().remove(0);
        let taps = f.left.filter.taps();
        assert!((taps[[0, 20]] - 1.0).abs() < 1e-6);
        for k in (0..=63).filter(|&k| k != 20) {
            assert!(taps[[0, k]].abs() < 1e-6, "tap {k} = {}", taps[[0, k]]);
        }
    }

    #[test]
    fn design_is_linear_in_gains() {
        let len = 120 * 512;
        let (s0, s1, z) = (white(len, 1), white(len, 2), white(len, 3));
        let x0: Vec<f64> = (0..len).map(|t| s0[t] + 0.5 * s1[t] + 0.1 * z[t]).collect();
        let x1: Vec<f64> = (0..len).map(|t| 0.3 * s0[t] + s1[t] + 0.1 * z[(t + 7) % len]).collect();
        let cfg = StftConfig::sqrt_hann(1024);
        let local = stft(&MultichannelSignal::from_channels(vec![x0, x1], 16000).unwrap(), &cfg).unwrap();
        let est = stft(&MultichannelSignal::from_channels(vec![s0, s1], 16000).unwrap(), &cfg).unwrap();
        let mut stats = estimate_spectra(&local, &est).unwrap();
        stats.ear_channels = Some((0, 1));
        let params = DesignParams {
            order: 31,
            delay: 8,
            reir: ReirWindow::default(),
        };
        let out = design_binaural(&stats, &[vec![1.0, 0.0], vec![0.0, 2.0], vec![1.0, 2.0]], &params).unwrap();
        for ear in Ear::BOTH {
            let (a, b, ab) = (out[0].ear(ear), out[1].ear(ear), out[2].ear(ear));
            let scale = ab.filter.taps().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for ((u, v), w) in a.filter.taps().iter().zip(b.filter.taps().iter()).zip(ab.filter.taps().iter()) {
                assert!((u + v - w).abs() < 1e-8 * scale);
            }
        }
    }

    /// MA process `x[t] = sum_l H[l] u[t-l] + v[t]` with target `y[t] = sum_l b[l]^T u[t-l]`.
    struct Process {
        h: Vec<[[f64; 2]; 2]>,
        b: Vec<[f64; 2]>,
        sensor: f64,
    }

    impl Process {
        fn r_xx(&self, k: isize) -> [[f64; 2]; 2] {
            let mut r = [[0.0; 2]; 2];
            for l in 0..self.h.len() as isize {
                let j = l + k;
                if j < 0 || j >= self.h.len() as isize {
                    continue;
                }
                for a in 0..2 {
                    for c in 0..2 {
                        for s in 0..2 {
                            r[a][c] += self.h[j as usize][a][s] * self.h[l as usize][c][s];
                        }
                    }
                }
            }
            if k == 0 {
                r[0][0] += self.sensor * self.sensor;
                r[1][1] += self.sensor * self.sensor;
            }
            r
        }

        /// `E[x[t] y[t - k]]`.
        fn r_xy(&self, k: isize) -> [f64; 2] {
            let mut r = [0.0; 2];
            for l in 0..self.b.len() as isize {
                let j = l + k;
                if j < 0 || j >= self.h.len() as isize {
                    continue;
                }
                for a in 0..2 {
                    for s in 0..2 {
                        r[a] += self.h[j as usize][a][s] * self.b[l as usize][s];
                    }
                }
            }
            r
        }

        fn realize(&self, len: usize, seed: u64) -> (MultichannelSignal, Vec<f64>) {
            let u = [white(len, seed), white(len, seed + 1)];
            let v = [white(len, seed + 2), white(len, seed + 3)];
            let mut x = vec![vec![0.0; len]; 2];
            let mut y = vec![0.0; len];
            for t in 0..len {
                for (l, hl) in self.h.iter().enumerate() {
                    if t >= l {
                        for a in 0..2 {
                            x[a][t] += hl[a][0] * u[0][t - l] + hl[a][1] * u[1][t - l];
                        }
                    }
                }
                for (l, bl) in self.b.iter().enumerate() {
                    if t >= l {
                        y[t] += bl[0] * u[0][t - l] + bl[1] * u[1][t - l];
                    }
                }
                for a in 0..2 {
                    x[a][t] += self.sensor * v[a][t];
                }
            }
            (MultichannelSignal::from_channels(x, 16000).unwrap(), y)
        }
    }

    #[test]
    fn perturbing_any_tap_does_not_reduce_held_out_error() {
        let p = Process {
            h: vec![[[1.0, 0.4], [0.2, 0.9]], [[0.5, -0.3], [0.1, 0.6]], [[-0.2, 0.2], [0.3, -0.1]]],
            b: vec![[0.8, 0.0], [0.3, 0.0], [0.1, 0.0]],
            sensor: 0.1,
        };
        let (order, delay) = (6usize, 2usize);
        let corr = LagCorrelations {
            mics: 2,
            order,
            delay,
            r_xx: (0..=order)
                .map(|k| {
                    let r = p.r_xx(k as isize);
                    vec![r[0][0], r[0][1], r[1][0], r[1][1]]
                })
                .collect(),
            r_xy: (0..=order).map(|i| p.r_xy(delay as isize - i as isize).to_vec()).collect(),
        };
        let spec = RemixSpec {
            gains: vec![1.0],
            delay,
            order,
            ear: Ear::Left,
        };
        let sol = design_mwf(&corr, &spec).unwrap();
        let (x, y) = p.realize(1_000_000, 77);
        let mse = |f: &FirFilter| -> f64 {
            let out = fir_apply(f, &x).unwrap();
            (delay..y.len()).map(|t| (out[t] - y[t - delay]).powi(2)).sum::<f64>() / (y.len() - delay) as f64
        };
        let base = mse(&sol.filter);
        for c in 0..2 {
            for k in 0..=order {
                for delta in [1e-3, -1e-3] {
                    let mut taps = sol.filter.taps().clone();
                    taps[[c, k]] += delta;
                    let probe = mse(&FirFilter::new(taps, delay).unwrap());
                    assert!(probe >= base, "tap ({c},{k}) {delta:+}: {probe} < {base}");
                }
            }
        }
    }

    #[test]
    fn designs_are_bitwise_deterministic() {
        let c = random_corr(3, 8, 4, 5);
        let a = design_mwf(&c, &spec_for(&c)).unwrap();
        let b = design_mwf(&c, &spec_for(&c)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spec_validation() {
        let mut s = RemixSpec::single_target(1, 3, 4, 8, Ear::Right);
        assert_eq!(s.gains, vec![0.0, 1.0, 0.0]);
        assert!(s.validate().is_ok());
        s.delay = 9;
        assert!(s.validate().is_err());
        s.delay = 4;
        s.gains = vec![0.0; 3];
        assert!(s.validate().is_err());
        s.gains = vec![-1.0, 1.0, 0.0];
        assert!(s.validate().is_err());
        assert!(check_size(32, 2047).is_ok());
        assert!(check_size(33, 2047).is_err());
    }

    #[test]
    fn filter_sidecar_round_trip() {
        let c = random_corr(2, 5, 2, 9);
        let sol = design_mwf(&c, &spec_for(&c)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.bin");
        write_filter(&p, &sol).unwrap();
        assert_eq!(read_filter(&p).unwrap(), sol);
        std::fs::write(&p, b"CLSTATS\0L\x01\0\0").unwrap();
        assert!(read_filter(&p).is_err());
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let x = white(64 * 256, 1);
        let sig = MultichannelSignal::mono(x, 16000).unwrap();
        let t = stft(&sig, &StftConfig::sqrt_hann(256)).unwrap();
        let mut stats = estimate_spectra(&t, &t).unwrap();
        stats.ear_channels = Some((0, 0));
        let two = MultichannelSignal::zeros(2, 1000, 16000);
        let params = DesignParams {
            order: 15,
            delay: 4,
            reir: ReirWindow {
                pre_ms: 1.0,
                post_ms: 4.0,
                taper_ms: 0.5,
            },
        };
        assert!(matches!(enhance(&two, &stats, &[1.0], &params), Err(Error::Shape(_))));
        assert!(enhance(&sig, &stats, &[1.0], &params).is_ok());
    }
}
