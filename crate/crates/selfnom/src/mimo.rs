//! Complex linear algebra for zero-forcing precoding, per-user SINR/rate
//! computation, and channel-conditioning diagnostics.
//!
//! Channels are row vectors `h_k ∈ C^N`; a scheduling instance stacks the
//! scheduled users' channels into `H ∈ C^{|M|×N}`. The ZF precoder is
//! `H^H (H H^H)^{-1}` with per-column power normalization so each scheduled
//! user carries `P/|M|`. All math is f64; the Gram matrix is inverted via a
//! Cholesky solve, never an explicit inverse.

use num_complex::Complex64;
use thiserror::Error;

/// Gram condition number above which a scheduled set is declared unschedulable.
pub const RANK_DEFICIENT_COND: f64 = 1e12;

#[derive(Debug, Error, PartialEq)]
pub enum MimoError {
    #[error("channel set is rank deficient (Gram condition {cond:.3e} > {max:.0e})")]
    RankDeficient { cond: f64, max: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Downlink channel of a single-antenna UE, one complex gain per BS antenna.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelVector {
    pub ue_id: usize,
    pub entries: Vec<Complex64>,
}

impl ChannelVector {
    pub fn new(ue_id: usize, entries: Vec<Complex64>) -> Self {
        Self { ue_id, entries }
    }

    pub fn norm_sq(&self) -> f64 {
        self.entries.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }
}

/// Normalized ZF precoder: one column per scheduled UE, column powers sum to
/// the total power budget.
#[derive(Debug, Clone)]
pub struct PrecodingMatrix {
    pub columns: Vec<Vec<Complex64>>,
    pub total_power: f64,
}

/// Per-user SINR and spectral efficiency under a given precoder.
#[derive(Debug, Clone)]
pub struct RateReport {
    pub sinr: Vec<f64>,
    pub spectral_efficiency: Vec<f64>,
    pub weighted_sum_rate: f64,
}

pub fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    // conjugate-linear in the first argument: a^H b
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Zero-forcing precoder for the stacked channels of the scheduled set.
///
/// Columns of the unnormalized `H^H (H H^H)^{-1}` are rescaled so each
/// carries `total_power / |M|`.
pub fn zf_precoder(rows: &[Vec<Complex64>], total_power: f64) -> Result<PrecodingMatrix, MimoError> {
    let m = rows.len();
    assert!(m >= 1, "empty scheduled set");
    let n = rows[0].len();
    for r in rows {
        if r.len() != n {
            return Err(MimoError::DimensionMismatch(format!(
                "channel lengths differ: {} vs {}",
                r.len(),
                n
            )));
        }
    }
    if m > n {
        return Err(MimoError::RankDeficient {
            cond: f64::INFINITY,
            max: RANK_DEFICIENT_COND,
        });
    }

    // Gram matrix G = H H^H, Hermitian PSD, m x m.
    let mut gram = vec![Complex64::new(0.0, 0.0); m * m];
    for i in 0..m {
        for j in 0..m {
            // G[i][j] = h_i^H h_j, so that h_m^H f~_k = (G G^{-1})_{mk} = delta
            gram[i * m + j] = inner(&rows[i], &rows[j]);
        }
    }

    let eig = hermitian_eigenvalues(&gram, m);
    let lmax = eig.last().copied().unwrap_or(0.0).max(0.0);
    let lmin = eig.first().copied().unwrap_or(0.0);
    let cond = if lmin <= 0.0 || lmin < 1e-300 {
        f64::INFINITY
    } else {
        lmax / lmin
    };
    if !(cond <= RANK_DEFICIENT_COND) {
        return Err(MimoError::RankDeficient {
            cond,
            max: RANK_DEFICIENT_COND,
        });
    }

    // Solve G Y = I via Cholesky, then F~ = H^H Y.
    let chol = cholesky(&gram, m).ok_or(MimoError::RankDeficient {
        cond,
        max: RANK_DEFICIENT_COND,
    })?;
    let per_col = total_power / m as f64;
    let mut columns = Vec::with_capacity(m);
    for k in 0..m {
        let mut e = vec![Complex64::new(0.0, 0.0); m];
        e[k] = Complex64::new(1.0, 0.0);
        let y = cholesky_solve(&chol, m, &e);
        // f~_k = sum_i h_i * y_i  (column k of H^H Y with H rows = h_i^H)
        let mut col = vec![Complex64::new(0.0, 0.0); n];
        for (i, yi) in y.iter().enumerate() {
            for (c, hv) in col.iter_mut().zip(&rows[i]) {
                *c += hv * yi;
            }
        }
        let nrm: f64 = col.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let scale = per_col.sqrt() / nrm;
        for c in &mut col {
            *c *= scale;
        }
        columns.push(col);
    }
    Ok(PrecodingMatrix {
        columns,
        total_power,
    })
}

/// SINR and rates of the scheduled users, with explicit interference sums.
pub fn compute_rates(
    rows: &[Vec<Complex64>],
    precoder: &PrecodingMatrix,
    sigma2: f64,
    weights: &[f64],
) -> RateReport {
    let m = rows.len();
    assert_eq!(m, precoder.columns.len(), "precoder/channel count mismatch");
    assert_eq!(m, weights.len(), "weights length mismatch");
    assert!(sigma2 > 0.0, "noise power must be positive");
    let mut sinr = Vec::with_capacity(m);
    let mut se = Vec::with_capacity(m);
    let mut wsr = 0.0;
    for i in 0..m {
        let sig = inner(&rows[i], &precoder.columns[i]).norm_sqr();
        let mut interf = 0.0;
        for j in 0..m {
            if j != i {
                interf += inner(&rows[i], &precoder.columns[j]).norm_sqr();
            }
        }
        let s = sig / (sigma2 + interf);
        let r = (1.0 + s).log2();
        wsr += weights[i] * r;
        sinr.push(s);
        se.push(r);
    }
    RateReport {
        sinr,
        spectral_efficiency: se,
        weighted_sum_rate: wsr,
    }
}

/// Condition number of the stacked channel matrix of a user set; returns
/// `f64::INFINITY` when the smallest singular value is below `1e-14` of the
/// largest.
pub fn condition_number(rows: &[Vec<Complex64>]) -> f64 {
    let k = rows.len();
    assert!(k >= 1);
    if k == 1 {
        return 1.0;
    }
    let n = rows[0].len();
    // Singular values of H via eigenvalues of the smaller Gram product.
    let (dim, gram) = if k <= n {
        let mut g = vec![Complex64::new(0.0, 0.0); k * k];
        for i in 0..k {
            for j in 0..k {
                g[i * k + j] = rows[i]
                    .iter()
                    .zip(&rows[j])
                    .map(|(a, b)| a * b.conj())
                    .sum();
            }
        }
        (k, g)
    } else {
        let mut g = vec![Complex64::new(0.0, 0.0); n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = Complex64::new(0.0, 0.0);
                for r in rows {
                    acc += r[i].conj() * r[j];
                }
                g[i * n + j] = acc;
            }
        }
        (n, g)
    };
    let eig = hermitian_eigenvalues(&gram, dim);
    let smax = eig.last().copied().unwrap_or(0.0).max(0.0).sqrt();
    let smin = eig.first().copied().unwrap_or(0.0).max(0.0).sqrt();
    if smax == 0.0 || smin < 1e-14 * smax {
        f64::INFINITY
    } else {
        smax / smin
    }
}

/// Eigenvalues of a Hermitian matrix (row-major, size n x n), ascending.
///
/// Uses the real symmetric embedding [[X, -Y], [Y, X]] of A = X + iY, whose
/// spectrum is that of A with every eigenvalue doubled, then cyclic Jacobi.
pub fn hermitian_eigenvalues(a: &[Complex64], n: usize) -> Vec<f64> {
    let m = 2 * n;
    let mut s = vec![0.0f64; m * m];
    for i in 0..n {
        for j in 0..n {
            let z = a[i * n + j];
            s[i * m + j] = z.re;
            s[(i + n) * m + (j + n)] = z.re;
            s[i * m + (j + n)] = -z.im;
            s[(i + n) * m + j] = z.im;
        }
    }
    let mut ev = jacobi_symmetric_eigenvalues(&mut s, m);
    ev.sort_by(|x, y| x.partial_cmp(y).unwrap());
    // pairs: take every other of the sorted doubled spectrum
    (0..n).map(|i| ev[2 * i]).collect()
}

/// Cyclic Jacobi eigenvalue iteration for a real symmetric matrix (destroys `s`).
fn jacobi_symmetric_eigenvalues(s: &mut [f64], n: usize) -> Vec<f64> {
    let max_sweeps = 50;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += s[p * n + q] * s[p * n + q];
            }
        }
        let scale: f64 = (0..n).map(|i| s[i * n + i].abs()).fold(0.0, f64::max);
        if off.sqrt() <= 1e-15 * scale.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = s[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = s[p * n + p];
                let aqq = s[q * n + q];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let skp = s[k * n + p];
                    let skq = s[k * n + q];
                    s[k * n + p] = c * skp - sn * skq;
                    s[k * n + q] = sn * skp + c * skq;
                }
                for k in 0..n {
                    let spk = s[p * n + k];
                    let sqk = s[q * n + k];
                    s[p * n + k] = c * spk - sn * sqk;
                    s[q * n + k] = sn * spk + c * sqk;
                }
            }
        }
    }
    (0..n).map(|i| s[i * n + i]).collect()
}

/// Cholesky factor L (lower triangular, row-major) of a Hermitian PD matrix.
fn cholesky(a: &[Complex64], n: usize) -> Option<Vec<Complex64>> {
    let mut l = vec![Complex64::new(0.0, 0.0); n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k].conj();
            }
            if i == j {
                if sum.re <= 0.0 {
                    return None;
                }
                l[i * n + j] = Complex64::new(sum.re.sqrt(), 0.0);
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Solves L L^H x = b given the Cholesky factor.
fn cholesky_solve(l: &[Complex64], n: usize, b: &[Complex64]) -> Vec<Complex64> {
    let mut y = vec![Complex64::new(0.0, 0.0); n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i * n + k] * y[k];
        }
        y[i] = sum / l[i * n + i];
    }
    let mut x = vec![Complex64::new(0.0, 0.0); n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in (i + 1)..n {
            sum -= l[k * n + i].conj() * x[k];
        }
        x[i] = sum / l[i * n + i];
    }
    x
}
