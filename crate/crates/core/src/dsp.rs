//! FFT helpers shared by convolution, correlation and filtering code.

use num_complex::Complex64;
use rustfft::FftPlanner;

/// Forward FFT of a real sequence zero-padded to `len`.
pub fn rfft_padded(x: &[f64], len: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x
        .iter()
        .take(len)
        .map(|&v| Complex64::new(v, 0.0))
        .chain(std::iter::repeat(Complex64::new(0.0, 0.0)))
        .take(len)
        .collect();
    FftPlanner::new().plan_fft_forward(len).process(&mut buf);
    buf
}

/// Inverse FFT (normalized by `1/len`) returning the real part.
pub fn irfft_real(mut spec: Vec<Complex64>) -> Vec<f64> {
    let len = spec.len();
    FftPlanner::new().plan_fft_inverse(len).process(&mut spec);
    let scale = 1.0 / len as f64;
    spec.into_iter().map(|c| c.re * scale).collect()
}

/// Full linear convolution `a * b` (length `a.len() + b.len() - 1`).
///
/// Short products are done directly, long ones through the FFT.
pub fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    if a.len().min(b.len()) <= 64 || a.len() * b.len() <= 1 << 16 {
        let mut out = vec![0.0; out_len];
        for (i, &av) in a.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out[i..].iter_mut().zip(b) {
                *o += av * bv;
            }
        }
        return out;
    }
    let n = out_len.next_power_of_two();
    let fa = rfft_padded(a, n);
    let fb = rfft_padded(b, n);
    let prod = fa.iter().zip(&fb).map(|(x, y)| x * y).collect();
    let mut out = irfft_real(prod);
    out.truncate(out_len);
    out
}

/// Convolution truncated to the first `a.len()` samples (causal filtering of `a` by `b`).
pub fn filter_truncated(signal: &[f64], taps: &[f64]) -> Vec<f64> {
    let mut out = convolve(signal, taps);
    out.resize(signal.len(), 0.0);
    out
}

/// Circular cross-correlation peak lag of `a` relative to `b`, searched over `|lag| <= max_lag`.
///
/// A positive result means `a` lags `b` (arrives later).
pub fn xcorr_peak_lag(a: &[f64], b: &[f64], max_lag: usize) -> isize {
    let n = (a.len().max(b.len()) + max_lag).next_power_of_two() * 2;
    let fa = rfft_padded(a, n);
    let fb = rfft_padded(b, n);
    let cross: Vec<Complex64> = fa.iter().zip(&fb).map(|(x, y)| x * y.conj()).collect();
    let r = irfft_real(cross);
    let mut best = (0isize, f64::NEG_INFINITY);
    for lag in -(max_lag as isize)..=(max_lag as isize) {
        let idx = lag.rem_euclid(n as isize) as usize;
        if r[idx] > best.1 {
            best = (lag, r[idx]);
        }
    }
    best.0
}

pub fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; a.len() + b.len() - 1];
        for i in 0..a.len() {
            for j in 0..b.len() {
                out[i + j] += a[i] * b[j];
            }
        }
        out
    }

    #[test]
    fn fft_convolution_matches_naive() {
        let a: Vec<f64> = (0..700).map(|i| ((i * 37 % 101) as f64 - 50.0) / 50.0).collect();
        let b: Vec<f64> = (0..300).map(|i| ((i * 13 % 29) as f64 - 14.0) / 14.0).collect();
        let fast = convolve(&a, &b);
        let slow = naive(&a, &b);
        for (x, y) in fast.iter().zip(&slow) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn xcorr_finds_shift() {
        let b: Vec<f64> = (0..512).map(|i| (i * 7919 % 211) as f64 - 105.0).collect();
        let mut a = vec![0.0; 5];
        a.extend_from_slice(&b[..507]);
        assert_eq!(xcorr_peak_lag(&a, &b, 20), 5);
        assert_eq!(xcorr_peak_lag(&b, &a, 20), -5);
    }
}
