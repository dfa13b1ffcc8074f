//! Exponential-family links and the heterogeneous quasi-likelihood.
//!
//! Each column `j` carries a convex log-partition function `g_j`. For an
//! observed cell the data-fitting contribution is `-y * x + g_j(x)`; cells
//! outside the mask contribute nothing to any quantity computed here.

use serde::{Deserialize, Serialize};

#[allow(unused_imports)]
use num_traits::Float;
use crate::frame::MixedDataFrame;
use crate::{Error, Matrix, Result};

/// Poisson evaluations with `a * x` above this value are refused.
pub const EXP_OVERFLOW_LIMIT: f64 = 700.0;

/// Default floor on `g''` below which working responses are refused.
pub const DEFAULT_CURVATURE_FLOOR: f64 = 1e-10;

/// Per-column exponential-family member.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Link {
    /// `g(x) = sigma2 * x^2 / 2`: Gaussian with mean `sigma2 * x`, variance `sigma2`.
    Gaussian { sigma2: f64 },
    /// `g(x) = log(1 + e^x)`.
    Bernoulli,
    /// `g(x) = exp(a * x)`.
    Poisson { a: f64 },
}

impl Link {
    pub fn gaussian(sigma2: f64) -> Self {
        Link::Gaussian { sigma2 }
    }

    pub fn poisson(a: f64) -> Self {
        Link::Poisson { a }
    }

    /// Rejects non-positive Gaussian scales and a zero Poisson rate-scale,
    /// both of which make `g''` vanish.
    pub fn validate(&self) -> Result<()> {
        match *self {
            Link::Gaussian { sigma2 } if !(sigma2 > 0.0 && sigma2.is_finite()) => Err(
                Error::InvalidInput(alloc::format!("gaussian sigma2 must be positive, got {sigma2}")),
            ),
            Link::Poisson { a } if !(a != 0.0 && a.is_finite()) => Err(Error::InvalidInput(
                alloc::format!("poisson rate-scale must be finite and non-zero, got {a}"),
            )),
            _ => Ok(()),
        }
    }

    pub fn g(&self, x: f64) -> f64 {
        match *self {
            Link::Gaussian { sigma2 } => 0.5 * sigma2 * x * x,
            Link::Bernoulli => softplus(x),
            Link::Poisson { a } => (a * x).exp(),
        }
    }

    /// `g'(x)`, the mean of the family at natural parameter `x`.
    pub fn gprime(&self, x: f64) -> f64 {
        match *self {
            Link::Gaussian { sigma2 } => sigma2 * x,
            Link::Bernoulli => sigmoid(x),
            Link::Poisson { a } => a * (a * x).exp(),
        }
    }

    pub fn gsecond(&self, x: f64) -> f64 {
        match *self {
            Link::Gaussian { sigma2 } => sigma2,
            Link::Bernoulli => {
                let e = (-x.abs()).exp();
                e / ((1.0 + e) * (1.0 + e))
            }
            Link::Poisson { a } => a * a * (a * x).exp(),
        }
    }

    /// Predicted mean on the column's natural scale.
    pub fn mean(&self, x: f64) -> f64 {
        self.gprime(x)
    }

    /// Bounds on `g''` over `[-radius, radius]`.
    pub fn curvature_bounds(&self, radius: f64) -> CurvatureBounds {
        let r = radius.abs();
        let (lo, hi) = match *self {
            Link::Gaussian { sigma2 } => (sigma2, sigma2),
            Link::Bernoulli => (self.gsecond(r), 0.25),
            Link::Poisson { a } => (a * a * (-(a.abs()) * r).exp(), a * a * (a.abs() * r).exp()),
        };
        CurvatureBounds { sigma_min_sq: lo, sigma_max_sq: hi, box_radius: r }
    }

    fn check_overflow(&self, x: f64, row: usize, col: usize) -> Result<()> {
        if !x.is_finite() {
            return Err(Error::NonFinite { row, col });
        }
        if let Link::Poisson { a } = *self {
            if a * x > EXP_OVERFLOW_LIMIT {
                return Err(Error::Overflow { row, col, value: a * x });
            }
        }
        Ok(())
    }
}

/// Lower and upper bounds on `g''` over a box `[-box_radius, box_radius]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvatureBounds {
    pub sigma_min_sq: f64,
    pub sigma_max_sq: f64,
    pub box_radius: f64,
}

impl CurvatureBounds {
    /// Tightest bounds valid for every link in `links` on the same box.
    pub fn combined(links: &[Link], radius: f64) -> Option<Self> {
        links.iter().map(|l| l.curvature_bounds(radius)).reduce(|a, b| CurvatureBounds {
            sigma_min_sq: a.sigma_min_sq.min(b.sigma_min_sq),
            sigma_max_sq: a.sigma_max_sq.max(b.sigma_max_sq),
            box_radius: a.box_radius,
        })
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn check_inputs(x: &Matrix, data: &MixedDataFrame, links: &[Link]) -> Result<()> {
    if x.shape() != data.shape() {
        return Err(Error::Shape { expected: data.shape(), got: x.shape() });
    }
    if links.len() != data.ncols() {
        return Err(Error::Length { expected: data.ncols(), got: links.len() });
    }
    Ok(())
}

/// Visits observed cells as `(i, j, link, y, x)` after validating `x` there.
fn for_each_observed(
    x: &Matrix,
    data: &MixedDataFrame,
    links: &[Link],
    mut visit: impl FnMut(usize, usize, &Link, f64, f64),
) -> Result<()> {
    check_inputs(x, data, links)?;
    let m1 = data.nrows();
    for (j, link) in links.iter().enumerate() {
        for i in 0..m1 {
            if data.mask[i + j * m1] {
                let xv = x[(i, j)];
                link.check_overflow(xv, i, j)?;
                visit(i, j, link, data.values[(i, j)], xv);
            }
        }
    }
    Ok(())
}

/// Sum over observed cells of `-y * x + g_j(x)`.
pub fn quasi_loglik_neg(x: &Matrix, data: &MixedDataFrame, links: &[Link]) -> Result<f64> {
    let mut total = 0.0;
    for_each_observed(x, data, links, |_, _, link, y, xv| {
        total += -y * xv + link.g(xv);
    })?;
    Ok(total)
}

/// Entrywise `Omega_ij * (g_j'(x_ij) - y_ij)`.
pub fn gradient(x: &Matrix, data: &MixedDataFrame, links: &[Link]) -> Result<Matrix> {
    let mut out = Matrix::zeros(x.nrows(), x.ncols());
    for_each_observed(x, data, links, |i, j, link, y, xv| {
        out[(i, j)] = link.gprime(xv) - y;
    })?;
    Ok(out)
}

/// Entrywise `Omega_ij * g_j''(x_ij) / 2`.
pub fn curvature_weights(x: &Matrix, data: &MixedDataFrame, links: &[Link]) -> Result<Matrix> {
    let mut out = Matrix::zeros(x.nrows(), x.ncols());
    for_each_observed(x, data, links, |i, j, link, _, xv| {
        out[(i, j)] = 0.5 * link.gsecond(xv);
    })?;
    Ok(out)
}

/// Entrywise `(y_ij - g_j'(x_ij)) / g_j''(x_ij)` on observed cells, zero elsewhere.
///
/// Fails when `g''` drops below `floor` at an observed cell.
pub fn working_responses(
    x: &Matrix,
    data: &MixedDataFrame,
    links: &[Link],
    floor: f64,
) -> Result<Matrix> {
    let mut out = Matrix::zeros(x.nrows(), x.ncols());
    let mut degenerate = None;
    for_each_observed(x, data, links, |i, j, link, y, xv| {
        let curv = link.gsecond(xv);
        if curv < floor {
            degenerate.get_or_insert((i, j, curv));
        } else {
            out[(i, j)] = (y - link.gprime(xv)) / curv;
        }
    })?;
    match degenerate {
        Some((row, col, value)) => Err(Error::Degenerate { row, col, value }),
        None => Ok(out),
    }
}

/// Curvature weights `w` and the products `w * Z` in one pass.
///
/// `w * Z = Omega * (y - g'(x)) / 2` is formed directly, so the pair stays
/// finite where `g''` underflows; this is the form the solver consumes.
pub(crate) fn weights_and_weighted_responses(
    x: &Matrix,
    data: &MixedDataFrame,
    links: &[Link],
) -> Result<(Matrix, Matrix)> {
    let mut w = Matrix::zeros(x.nrows(), x.ncols());
    let mut wz = Matrix::zeros(x.nrows(), x.ncols());
    for_each_observed(x, data, links, |i, j, link, y, xv| {
        w[(i, j)] = 0.5 * link.gsecond(xv);
        wz[(i, j)] = 0.5 * (y - link.gprime(xv));
    })?;
    Ok((w, wz))
}
