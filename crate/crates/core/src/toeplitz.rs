//! Symmetric block-Toeplitz systems `T w = b` with `T(i, j) = R[j - i]` and
//! `R[-k] = R[k]^T`, the normal equations of a causal multichannel FIR
//! Wiener filter.
//!
//! The primary solver is the block Levinson (Whittle / Wiggins-Robinson)
//! recursion, `O(K^2 m^3)` with `m x m` blocks, solving any number of
//! right-hand sides against one set of predictors. A dense Cholesky solve is
//! kept for small systems and as a fallback.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::dsp;
use crate::error::{Error, Result};
use crate::par;

/// Largest system (in unknowns) the dense fallback will factor.
pub const DENSE_LIMIT: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockToeplitz {
    m: usize,
    /// `R[k]` for `k = 0..=K`, each `m x m` row-major.
    blocks: Vec<Vec<f64>>,
}

impl BlockToeplitz {
    pub fn new(blocks: Vec<Vec<f64>>, m: usize) -> Result<Self> {
        if m == 0 || blocks.is_empty() {
            return Err(Error::Shape("block-Toeplitz matrix needs at least one non-empty block".into()));
        }
        if let Some(k) = blocks.iter().position(|b| b.len() != m * m) {
            return Err(Error::Shape(format!("block {k} is not {m}x{m}")));
        }
        let r0 = &blocks[0];
        let scale = r0.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
        for a in 0..m {
            for b in 0..a {
                if (r0[a * m + b] - r0[b * m + a]).abs() > 1e-9 * scale {
                    return Err(Error::Shape("lag-0 block must be symmetric".into()));
                }
            }
        }
        Ok(Self { m, blocks })
    }

    pub fn block_size(&self) -> usize {
        self.m
    }

    /// Number of lags beyond zero (`K`).
    pub fn order(&self) -> usize {
        self.blocks.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.blocks.len() * self.m
    }

    /// Entry `(a, b)` of `R[k]` for any `|k| <= K`.
    pub fn entry(&self, k: isize, a: usize, b: usize) -> f64 {
        if k >= 0 {
            self.blocks[k as usize][a * self.m + b]
        } else {
            self.blocks[(-k) as usize][b * self.m + a]
        }
    }

    pub fn mean_diagonal(&self) -> f64 {
        (0..self.m).map(|a| self.blocks[0][a * self.m + a]).sum::<f64>() / self.m as f64
    }

    /// `T + delta I`.
    pub fn loaded(&self, delta: f64) -> Self {
        let mut out = self.clone();
        for a in 0..self.m {
            out.blocks[0][a * self.m + a] += delta;
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let m = self.m;
        let n = self.blocks.len();
        DMatrix::from_fn(n * m, n * m, |r, c| {
            let (i, a) = (r / m, r % m);
            let (j, b) = (c / m, c % m);
            self.entry(j as isize - i as isize, a, b)
        })
    }

    /// `T x` for a stacked vector `x` (block `j` at `x[j*m..(j+1)*m]`).
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim());
        let (m, n) = (self.m, self.blocks.len());
        if n <= 64 {
            let mut y = vec![0.0; x.len()];
            for i in 0..n {
                for j in 0..n {
                    let k = j as isize - i as isize;
                    for a in 0..m {
                        let mut acc = 0.0;
                        for b in 0..m {
                            acc += self.entry(k, a, b) * x[j * m + b];
                        }
                        y[i * m + a] += acc;
                    }
                }
            }
            return y;
        }
        self.fft_operator().apply(x)
    }

    fn fft_operator(&self) -> FftOperator {
        let (m, n) = (self.m, self.blocks.len());
        let len = (3 * n).next_power_of_two();
        // y_a = sum_b h_ab * x_b with h_ab[k] = R[-k]_{ab}, supported on |k| <= K.
        let kernels = par::map_range(m * m, |ab| {
            let (a, b) = (ab / m, ab % m);
            let mut h = vec![0.0; len];
            for k in -(n as isize - 1)..=(n as isize - 1) {
                h[k.rem_euclid(len as isize) as usize] = self.entry(-k, a, b);
            }
            dsp::rfft_padded(&h, len)
        });
        FftOperator { m, n, len, kernels }
    }
}

struct FftOperator {
    m: usize,
    n: usize,
    len: usize,
    kernels: Vec<Vec<Complex64>>,
}

impl FftOperator {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (m, n, len) = (self.m, self.n, self.len);
        let xs: Vec<Vec<Complex64>> = (0..m)
            .map(|b| {
                let chan: Vec<f64> = (0..n).map(|j| x[j * m + b]).collect();
                dsp::rfft_padded(&chan, len)
            })
            .collect();
        let mut y = vec![0.0; n * m];
        for a in 0..m {
            let mut acc = vec![Complex64::new(0.0, 0.0); len];
            for (b, xb) in xs.iter().enumerate() {
                for ((o, h), v) in acc.iter_mut().zip(&self.kernels[a * m + b]).zip(xb) {
                    *o += h * v;
                }
            }
            let out = dsp::irfft_real(acc);
            for i in 0..n {
                y[i * m + a] = out[i];
            }
        }
        y
    }
}

/// Lower Cholesky factor of a symmetric positive-definite `m x m` matrix, or `None`.
fn cholesky(a: &[f64], m: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..=i {
            let mut s = a[i * m + j];
            for k in 0..j {
                s -= l[i * m + k] * l[j * m + k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i * m + i] = s.sqrt();
            } else {
                l[i * m + j] = s / l[j * m + j];
            }
        }
    }
    Some(l)
}

/// Solve `(L L^T) X = B` for `B` of shape `m x r`, in place.
fn cholesky_solve(l: &[f64], m: usize, b: &mut [f64], r: usize) {
    for c in 0..r {
        for i in 0..m {
            let mut s = b[i * r + c];
            for k in 0..i {
                s -= l[i * m + k] * b[k * r + c];
            }
            b[i * r + c] = s / l[i * m + i];
        }
        for i in (0..m).rev() {
            let mut s = b[i * r + c];
            for k in i + 1..m {
                s -= l[k * m + i] * b[k * r + c];
            }
            b[i * r + c] = s / l[i * m + i];
        }
    }
}

fn symmetrize(a: &mut [f64], m: usize) {
    for i in 0..m {
        for j in 0..i {
            let v = 0.5 * (a[i * m + j] + a[j * m + i]);
            a[i * m + j] = v;
            a[j * m + i] = v;
        }
    }
}

/// Block Levinson recursion for several right-hand sides at once.
///
/// Maintains forward predictors `f` (`T [f] = [P; 0..]`, `f[0] = I`) and
/// backward predictors `g` (`T [g] = [0..; Q]`, `g[n] = I`). Symmetry of `T`
/// gives the backward reflection term as the transpose of the forward one.
pub fn levinson_solve(t: &BlockToeplitz, rhs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let m = t.m;
    let n_blocks = t.blocks.len();
    let r = rhs.len();
    let mm = m * m;
    if rhs.iter().any(|b| b.len() != t.dim()) {
        return Err(Error::Shape(format!("right-hand side length must be {}", t.dim())));
    }
    if r == 0 {
        return Ok(Vec::new());
    }
    // b_i as m x r blocks.
    let rhs_block = |i: usize| -> Vec<f64> {
        let mut out = vec![0.0; m * r];
        for a in 0..m {
            for (c, b) in rhs.iter().enumerate() {
                out[a * r + c] = b[i * m + a];
            }
        }
        out
    };
    let breakdown = |n: usize| Error::Numerical(format!("block Levinson breakdown at order {n}: prediction error not positive definite"));

    let mut identity = vec![0.0; mm];
    for a in 0..m {
        identity[a * m + a] = 1.0;
    }
    let mut f = Vec::with_capacity(n_blocks * mm);
    f.extend_from_slice(&identity);
    let mut g = f.clone();
    let mut p = t.blocks[0].clone();
    let mut q = t.blocks[0].clone();
    let mut lq = cholesky(&q, m).ok_or_else(|| breakdown(0))?;
    let mut lp = lq.clone();
    let mut x = rhs_block(0);
    cholesky_solve(&lq, m, &mut x, r);

    let mut delta = vec![0.0; mm];
    let mut eps = vec![0.0; m * r];
    let mut c_mat = vec![0.0; mm];
    let mut d_mat = vec![0.0; mm];
    let mut old_g = vec![0.0; mm];
    let mut carry = vec![0.0; mm];

    for n in 0..n_blocks - 1 {
        // delta = sum_j R[n+1-j]^T f[j]; eps = sum_j R[n+1-j]^T x[j]
        delta.iter_mut().for_each(|v| *v = 0.0);
        eps.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..=n {
            let rk = &t.blocks[n + 1 - j];
            let fj = &f[j * mm..(j + 1) * mm];
            let xj = &x[j * m * r..(j + 1) * m * r];
            for c in 0..m {
                for a in 0..m {
                    let rca = rk[c * m + a];
                    if rca == 0.0 {
                        continue;
                    }
                    for b in 0..m {
                        delta[a * m + b] += rca * fj[c * m + b];
                    }
                    for b in 0..r {
                        eps[a * r + b] += rca * xj[c * r + b];
                    }
                }
            }
        }
        // C = Q^-1 delta, D = P^-1 delta^T
        c_mat.copy_from_slice(&delta);
        cholesky_solve(&lq, m, &mut c_mat, m);
        for a in 0..m {
            for b in 0..m {
                d_mat[a * m + b] = delta[b * m + a];
            }
        }
        cholesky_solve(&lp, m, &mut d_mat, m);

        // P -= delta^T C, Q -= delta D
        for a in 0..m {
            for b in 0..m {
                let mut sp = 0.0;
                let mut sq = 0.0;
                for k in 0..m {
                    sp += delta[k * m + a] * c_mat[k * m + b];
                    sq += delta[a * m + k] * d_mat[k * m + b];
                }
                p[a * m + b] -= sp;
                q[a * m + b] -= sq;
            }
        }
        symmetrize(&mut p, m);
        symmetrize(&mut q, m);

        // f[j] <- f[j] - g[j-1] C ; g[j] <- g[j-1] - f[j] D, using the old f and g.
        f.extend_from_slice(&vec![0.0; mm]);
        g.extend_from_slice(&vec![0.0; mm]);
        carry.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..=n + 1 {
            old_g.copy_from_slice(&g[j * mm..(j + 1) * mm]);
            let fj = &mut f[j * mm..(j + 1) * mm];
            let gj = &mut g[j * mm..(j + 1) * mm];
            for a in 0..m {
                for b in 0..m {
                    let mut sg = 0.0;
                    for k in 0..m {
                        sg += fj[a * m + k] * d_mat[k * m + b];
                    }
                    gj[a * m + b] = carry[a * m + b] - sg;
                }
            }
            for a in 0..m {
                for b in 0..m {
                    let mut sf = 0.0;
                    for k in 0..m {
                        sf += carry[a * m + k] * c_mat[k * m + b];
                    }
                    fj[a * m + b] -= sf;
                }
            }
            carry.copy_from_slice(&old_g);
        }

        lp = cholesky(&p, m).ok_or_else(|| breakdown(n + 1))?;
        lq = cholesky(&q, m).ok_or_else(|| breakdown(n + 1))?;

        // x <- [x; 0] + g Q^-1 (b_{n+1} - eps)
        let mut e = rhs_block(n + 1);
        for (ev, pv) in e.iter_mut().zip(&eps) {
            *ev -= pv;
        }
        cholesky_solve(&lq, m, &mut e, r);
        x.extend_from_slice(&vec![0.0; m * r]);
        for j in 0..=n + 1 {
            let gj = &g[j * mm..(j + 1) * mm];
            let xj = &mut x[j * m * r..(j + 1) * m * r];
            for a in 0..m {
                for k in 0..m {
                    let gak = gj[a * m + k];
                    if gak == 0.0 {
                        continue;
                    }
                    for c in 0..r {
                        xj[a * r + c] += gak * e[k * r + c];
                    }
                }
            }
        }
    }

    Ok((0..r)
        .map(|c| {
            let mut out = vec![0.0; t.dim()];
            for i in 0..n_blocks {
                for a in 0..m {
                    out[i * m + a] = x[i * m * r + a * r + c];
                }
            }
            out
        })
        .collect())
}

/// Dense Cholesky solve of the assembled system (LU when not positive definite).
pub fn dense_solve(t: &BlockToeplitz, rhs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if t.dim() > DENSE_LIMIT {
        return Err(Error::Config(format!(
            "dense solve limited to {DENSE_LIMIT} unknowns, system has {}",
            t.dim()
        )));
    }
    let a = t.to_dense();
    let b = DMatrix::from_fn(t.dim(), rhs.len(), |i, c| rhs[c][i]);
    let x = match a.clone().cholesky() {
        Some(ch) => ch.solve(&b),
        None => a
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::Numerical("dense system is singular".into()))?,
    };
    Ok((0..rhs.len()).map(|c| x.column(c).iter().copied().collect()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    Levinson,
    Dense,
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub solutions: Vec<Vec<f64>>,
    /// Absolute diagonal loading that was added to `T`.
    pub loading: f64,
    /// Worst relative residual `||(T + loading I) w - b|| / ||b||` over right-hand sides.
    pub residual: f64,
    pub solver: SolverKind,
}

/// Relative residual of each solution against `t`.
pub fn relative_residuals(t: &BlockToeplitz, rhs: &[Vec<f64>], solutions: &[Vec<f64>]) -> Vec<f64> {
    let op = (t.blocks.len() > 64).then(|| t.fft_operator());
    rhs.iter()
        .zip(solutions)
        .map(|(b, w)| {
            let tw = match &op {
                Some(op) => op.apply(w),
                None => t.matvec(w),
            };
            let num: f64 = tw.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
            let den: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            if den > 0.0 {
                num / den
            } else {
                num
            }
        })
        .collect()
}

/// Solve with escalating diagonal loading `factor * mean(diag R[0])` until the
/// residual drops below `tolerance`. Each attempt runs block Levinson, one step
/// of iterative refinement, and (for small systems) the dense fallback.
pub fn solve_with_loading(
    t: &BlockToeplitz,
    rhs: &[Vec<f64>],
    loading_factors: &[f64],
    tolerance: f64,
) -> Result<SolveOutcome> {
    let scale = t.mean_diagonal();
    if !(scale > 0.0) {
        if rhs.iter().all(|b| b.iter().all(|&v| v == 0.0)) {
            return Ok(SolveOutcome {
                solutions: rhs.iter().map(|b| vec![0.0; b.len()]).collect(),
                loading: 0.0,
                residual: 0.0,
                solver: SolverKind::Levinson,
            });
        }
        return Err(Error::Numerical("autocorrelation has no energy on its diagonal".into()));
    }
    let mut report = Vec::new();
    for &factor in loading_factors {
        let loading = factor * scale;
        let sys = t.loaded(loading);
        let attempt = |solver: SolverKind| -> Result<SolveOutcome> {
            let solve = |b: &[Vec<f64>]| match solver {
                SolverKind::Levinson => levinson_solve(&sys, b),
                SolverKind::Dense => dense_solve(&sys, b),
            };
            let mut w = solve(rhs)?;
            let mut res = relative_residuals(&sys, rhs, &w);
            let worst = res.iter().cloned().fold(0.0, f64::max);
            if worst >= tolerance && worst.is_finite() {
                let correction_rhs: Vec<Vec<f64>> = rhs
                    .iter()
                    .zip(&w)
                    .map(|(b, x)| {
                        let tx = sys.matvec(x);
                        b.iter().zip(tx).map(|(u, v)| u - v).collect()
                    })
                    .collect();
                let dw = solve(&correction_rhs)?;
                for (x, d) in w.iter_mut().zip(dw) {
                    for (u, v) in x.iter_mut().zip(d) {
                        *u += v;
                    }
                }
                res = relative_residuals(&sys, rhs, &w);
            }
            let residual = res.iter().cloned().fold(0.0, f64::max);
            Ok(SolveOutcome {
                solutions: w,
                loading,
                residual,
                solver,
            })
        };
        let mut kinds = vec![SolverKind::Levinson];
        if sys.dim() <= DENSE_LIMIT {
            kinds.push(SolverKind::Dense);
        }
        for kind in kinds {
            match attempt(kind) {
                Ok(out) if out.residual < tolerance => return Ok(out),
                Ok(out) => report.push(format!("{kind:?} loading {factor:e}: residual {:.3e}", out.residual)),
                Err(e) => report.push(format!("{kind:?} loading {factor:e}: {e}")),
            }
        }
    }
    Err(Error::Numerical(format!(
        "block-Toeplitz system ill-conditioned after maximum loading ({})",
        report.join("; ")
    )))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Autocorrelation blocks of a random vector MA process, hence positive definite.
    pub(crate) fn random_system(m: usize, k: usize, seed: u64) -> BlockToeplitz {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let taps = 4;
        let h: Vec<Vec<f64>> = (0..taps).map(|_| (0..m * m).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let blocks = (0..=k)
            .map(|lag| {
                let mut r = vec![0.0; m * m];
                for t in 0..taps {
                    if t + lag >= taps {
                        continue;
                    }
                    // R[lag] = sum_t H[t+lag] H[t]^T
                    for a in 0..m {
                        for b in 0..m {
                            for c in 0..m {
                                r[a * m + b] += h[t + lag][a * m + c] * h[t][b * m + c];
                            }
                        }
                    }
                }
                if lag == 0 {
                    for a in 0..m {
                        r[a * m + a] += 0.1;
                    }
                }
                r
            })
            .collect();
        BlockToeplitz::new(blocks, m).unwrap()
    }

    #[test]
    fn levinson_matches_dense() {
        for seed in 0..20 {
            let m = 1 + (seed as usize % 3);
            let k = 2 + (seed as usize % 7);
            let t = random_system(m, k, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let rhs: Vec<Vec<f64>> = (0..3).map(|_| (0..t.dim()).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let a = levinson_solve(&t, &rhs).unwrap();
            let b = dense_solve(&t, &rhs).unwrap();
            for (x, y) in a.iter().zip(&b) {
                let err: f64 = x.iter().zip(y).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
                let norm: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!(err < 1e-9 * norm, "seed {seed}: {err} vs {norm}");
            }
        }
    }

    #[test]
    fn fft_matvec_matches_direct() {
        let t = random_system(3, 100, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..t.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = t.fft_operator().apply(&x);
        let dense = t.to_dense() * nalgebra::DVector::from_vec(x);
        for (a, b) in fast.iter().zip(dense.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn singular_system_needs_loading() {
        // Rank-one: every lag block is the same all-ones matrix.
        let t = BlockToeplitz::new(vec![vec![1.0; 4]; 3], 2).unwrap();
        assert!(levinson_solve(&t, &[vec![1.0; 6]]).is_err());
        let out = solve_with_loading(&t, &[vec![1.0; 6]], &[0.0, 1e-10, 1e-8, 1e-6], 1e-6).unwrap();
        assert!(out.loading > 0.0);
        assert!(out.residual < 1e-6);
    }

    #[test]
    fn zero_system_and_rhs_gives_zero() {
        let t = BlockToeplitz::new(vec![vec![0.0; 4]; 3], 2).unwrap();
        let out = solve_with_loading(&t, &[vec![0.0; 6]], &[0.0], 1e-6).unwrap();
        assert!(out.solutions[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn asymmetric_lag_zero_is_rejected() {
        assert!(BlockToeplitz::new(vec![vec![1.0, 0.5, 0.0, 1.0]], 2).is_err());
    }
}
