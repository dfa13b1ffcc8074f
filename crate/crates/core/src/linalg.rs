//! Singular value decompositions behind the nuclear-norm machinery.
//!
//! Matrices whose smaller side is at most [`SvdConfig::full_svd_max_dim`] get
//! an exact thin SVD (with a QR pre-reduction for elongated shapes); larger
//! ones use a seeded randomized range finder truncated at the rank cap.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::linalg::SVD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[allow(unused_imports)]
use num_traits::Float;
use crate::{Error, Matrix, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvdConfig {
    pub full_svd_max_dim: usize,
    pub oversampling: usize,
    /// Rank kept by the randomized backend; `None` means `min(m1, m2)`.
    pub rank_cap: Option<usize>,
    pub power_iterations: usize,
    pub seed: u64,
}

impl Default for SvdConfig {
    fn default() -> Self {
        Self {
            full_svd_max_dim: 200,
            oversampling: 10,
            rank_cap: None,
            power_iterations: 2,
            seed: 0x5eed,
        }
    }
}

/// Thin SVD `A = U diag(s) V^T`, singular values in decreasing order.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v_t: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for (k, &sk) in self.s.iter().enumerate() {
            us.column_mut(k).scale_mut(sk);
        }
        us * &self.v_t
    }
}

/// Convergence threshold of the bidiagonal QR sweeps. Machine epsilon itself
/// lets the iteration stop on wrong values for nearly rank-one inputs.
const SVD_EPS: f64 = 5.0 * f64::EPSILON;

fn check_finite(a: &Matrix) -> Result<()> {
    if let Some(idx) = a.iter().position(|v| !v.is_finite()) {
        return Err(Error::Svd(format!(
            "non-finite entry at ({}, {})",
            idx % a.nrows(),
            idx / a.nrows()
        )));
    }
    Ok(())
}

fn sorted(svd: SVD<f64, nalgebra::Dyn, nalgebra::Dyn>) -> Result<Svd> {
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::Svd("singular vectors missing".into())),
    };
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let s = order.iter().map(|&k| svd.singular_values[k]).collect();
    let u = Matrix::from_fn(u.nrows(), order.len(), |i, k| u[(i, order[k])]);
    let v_t = Matrix::from_fn(order.len(), v_t.ncols(), |k, j| v_t[(order[k], j)]);
    Ok(Svd { u, s, v_t })
}

/// One-sided Jacobi SVD of a matrix with `m >= n`. Slower than the
/// bidiagonal QR iteration but unconditionally accurate.
fn jacobi_svd(a: &Matrix) -> Svd {
    let (m, n) = a.shape();
    let mut u = a.clone();
    let mut v = Matrix::identity(n, n);
    for _ in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = u.column(p).norm_squared();
                let beta = u.column(q).norm_squared();
                let gamma = u.column(p).dot(&u.column(q));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = c * t;
                for i in 0..m {
                    let (up, uq) = (u[(i, p)], u[(i, q)]);
                    u[(i, p)] = c * up - sn * uq;
                    u[(i, q)] = sn * up + c * uq;
                }
                for i in 0..n {
                    let (vp, vq) = (v[(i, p)], v[(i, q)]);
                    v[(i, p)] = c * vp - sn * vq;
                    v[(i, q)] = sn * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..n).map(|k| u.column(k).norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));
    let s: Vec<f64> = order.iter().map(|&k| norms[k]).collect();
    let u = Matrix::from_fn(m, n, |i, k| {
        let src = order[k];
        if norms[src] > 0.0 {
            u[(i, src)] / norms[src]
        } else {
            0.0
        }
    });
    let v_t = Matrix::from_fn(n, n, |k, j| v[(j, order[k])]);
    Svd { u, s, v_t }
}

/// Whether a decomposition reproduces `a` and has orthonormal factors.
fn accurate(dec: &Svd, a: &Matrix) -> bool {
    let scale = a.norm().max(f64::MIN_POSITIVE);
    let k = dec.s.len();
    let eye = Matrix::identity(k, k);
    let tol = 1e-11 * (1.0 + (a.nrows() + a.ncols()) as f64).sqrt();
    (dec.reconstruct() - a).norm() <= tol * scale
        && (dec.u.tr_mul(&dec.u) - &eye).amax() <= tol
        && (&dec.v_t * dec.v_t.transpose() - &eye).amax() <= tol
}

fn bidiagonal_svd(a: Matrix) -> Option<Svd> {
    sorted(SVD::try_new(a, true, true, SVD_EPS, 0)?).ok()
}

/// Thin SVD of a matrix with `m >= n`: LAPACK-style bidiagonal iteration,
/// verified, with a Jacobi fallback.
fn square_or_tall_svd(a: &Matrix) -> Svd {
    match bidiagonal_svd(a.clone()) {
        Some(dec) if accurate(&dec, a) => dec,
        _ => jacobi_svd(a),
    }
}

/// Exact thin SVD; tall inputs are first reduced by a QR factorization.
fn full_svd(a: &Matrix) -> Result<Svd> {
    let (m, n) = a.shape();
    if m < n {
        let t = full_svd(&a.transpose())?;
        return Ok(Svd { u: t.v_t.transpose(), s: t.s, v_t: t.u.transpose() });
    }
    if m >= 2 * n {
        let qr = a.clone().qr();
        let inner = square_or_tall_svd(&qr.r());
        return Ok(Svd { u: qr.q() * inner.u, s: inner.s, v_t: inner.v_t });
    }
    Ok(square_or_tall_svd(a))
}

/// Randomized range finder with power iterations, truncated to `rank`.
fn randomized_svd(a: &Matrix, rank: usize, cfg: &SvdConfig) -> Result<Svd> {
    let (m, n) = a.shape();
    let k = (rank + cfg.oversampling).min(m.min(n));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let omega = Matrix::from_fn(n, k, |_, _| StandardNormal.sample(&mut rng));
    let mut q = (a * omega).qr().q();
    for _ in 0..cfg.power_iterations {
        let z = (a.transpose() * &q).qr().q();
        q = (a * z).qr().q();
    }
    let b = q.transpose() * a;
    let inner = full_svd(&b)?;
    let keep = rank.min(inner.s.len());
    Ok(Svd {
        u: (q * inner.u).columns(0, keep).into_owned(),
        s: inner.s[..keep].to_vec(),
        v_t: inner.v_t.rows(0, keep).into_owned(),
    })
}

pub fn svd(a: &Matrix, cfg: &SvdConfig) -> Result<Svd> {
    check_finite(a)?;
    let small = a.nrows().min(a.ncols());
    if small <= cfg.full_svd_max_dim {
        full_svd(a)
    } else {
        randomized_svd(a, cfg.rank_cap.unwrap_or(small).min(small), cfg)
    }
}

/// All singular values, exactly, in decreasing order.
pub fn singular_values(a: &Matrix) -> Result<Vec<f64>> {
    check_finite(a)?;
    Ok(full_svd(a)?.s)
}

pub fn nuclear_norm(a: &Matrix) -> Result<f64> {
    Ok(singular_values(a)?.iter().sum())
}

pub fn operator_norm(a: &Matrix) -> Result<f64> {
    Ok(singular_values(a)?.first().copied().unwrap_or(0.0))
}

/// Number of singular values above `rel_tol * sigma_max`.
pub fn numerical_rank(a: &Matrix, rel_tol: f64) -> Result<usize> {
    let s = singular_values(a)?;
    let top = s.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return Ok(0);
    }
    Ok(s.iter().filter(|&&v| v > rel_tol * top).count())
}

/// Singular value soft-thresholding.
#[derive(Debug, Clone)]
pub struct Thresholded {
    pub matrix: Matrix,
    /// Nuclear norm of `matrix`, i.e. the sum of the thresholded values.
    pub nuclear_norm: f64,
    pub rank: usize,
}

pub fn soft_threshold(a: &Matrix, lambda: f64, cfg: &SvdConfig) -> Result<Thresholded> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidInput(format!("threshold must be nonnegative, got {lambda}")));
    }
    let dec = svd(a, cfg)?;
    let shrunk: Vec<f64> = dec.s.iter().map(|&s| (s - lambda).max(0.0)).collect();
    let rank = shrunk.iter().take_while(|&&s| s > 0.0).count();
    let (m, n) = a.shape();
    if rank == 0 {
        return Ok(Thresholded { matrix: Matrix::zeros(m, n), nuclear_norm: 0.0, rank });
    }
    let mut us = dec.u.columns(0, rank).into_owned();
    for (k, &sk) in shrunk[..rank].iter().enumerate() {
        us.column_mut(k).scale_mut(sk);
    }
    let matrix = us * dec.v_t.rows(0, rank);
    Ok(Thresholded { matrix, nuclear_norm: shrunk[..rank].iter().sum(), rank })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Matrix {
        Matrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn full_svd_reconstructs_all_aspects() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (m, n) in [(5, 5), (12, 3), (3, 12), (7, 5), (1, 4), (4, 1)] {
            let a = random(&mut rng, m, n);
            let dec = svd(&a, &SvdConfig::default()).unwrap();
            assert!((dec.reconstruct() - &a).amax() < 1e-12, "{m}x{n}");
            assert!(dec.s.windows(2).all(|w| w[0] >= w[1]));
            let vals = singular_values(&a).unwrap();
            for (x, y) in vals.iter().zip(&dec.s) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn randomized_recovers_low_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, 60, 3) * random(&mut rng, 3, 40);
        let cfg = SvdConfig { full_svd_max_dim: 10, rank_cap: Some(5), ..Default::default() };
        let dec = svd(&a, &cfg).unwrap();
        assert_eq!(dec.s.len(), 5);
        assert!((dec.reconstruct() - &a).amax() < 1e-10);
        let exact = singular_values(&a).unwrap();
        for k in 0..3 {
            assert!((exact[k] - dec.s[k]).abs() < 1e-10 * exact[0]);
        }
    }

    #[test]
    fn nearly_rank_one_input() {
        let c = -0.261214349634477;
        let a = Matrix::from_fn(4, 3, |i, j| c + 1e-16 * ((i + 2 * j) % 3) as f64);
        let dec = svd(&a, &SvdConfig::default()).unwrap();
        assert!((dec.reconstruct() - &a).amax() < 1e-14);
        assert!((dec.s[0] - c.abs() * 12f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn jacobi_matches_bidiagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (m, n) in [(6, 6), (9, 4), (30, 30)] {
            let a = random(&mut rng, m, n);
            let j = jacobi_svd(&a);
            assert!(accurate(&j, &a));
            let b = bidiagonal_svd(a.clone()).unwrap();
            for (x, y) in j.s.iter().zip(&b.s) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_non_finite() {
        let mut a = Matrix::zeros(2, 2);
        a[(1, 0)] = f64::INFINITY;
        assert!(matches!(svd(&a, &SvdConfig::default()), Err(Error::Svd(_))));
    }

    #[test]
    fn numerical_rank_of_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 20, 2) * random(&mut rng, 2, 9);
        assert_eq!(numerical_rank(&a, 1e-10).unwrap(), 2);
        assert_eq!(numerical_rank(&Matrix::zeros(3, 3), 1e-10).unwrap(), 0);
    }
}
