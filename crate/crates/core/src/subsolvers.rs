//! Inner proximal problems of the block updates.
//!
//! * [`solve_weighted_lasso`]: `min_a sum W (Z - f_U(a))^2 + nu ||a_t - a||^2 + lambda2 ||a||_1`
//!   by cyclic coordinate descent with exact soft-threshold updates.
//! * [`solve_weighted_nuclear`]: `min_L sum W (Z - L)^2 + lambda1 ||L||_*` by EM
//!   soft-impute iterations, reading the rescaled weights as observation
//!   frequencies.

use alloc::format;
use alloc::vec::Vec;


#[allow(unused_imports)]
use num_traits::Float;
use crate::dictionary::Dictionary;
use crate::linalg::{self, SvdConfig};
use crate::{Error, Matrix, Result, Vector};

pub(crate) fn soft(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Weighted Lasso with a ridge pull towards an anchor.
#[derive(Debug, Clone)]
pub struct WeightedLassoProblem<'a> {
    dict: &'a Dictionary,
    weights: &'a Matrix,
    /// `W ⊙ Z`.
    weighted_targets: Matrix,
    /// `sum W Z^2`, the constant part of the objective.
    target_energy: f64,
    ridge: f64,
    anchor: &'a Vector,
    lambda: f64,
}

impl<'a> WeightedLassoProblem<'a> {
    pub fn new(
        dict: &'a Dictionary,
        weights: &'a Matrix,
        targets: &Matrix,
        ridge: f64,
        anchor: &'a Vector,
        lambda: f64,
    ) -> Result<Self> {
        if targets.shape() != weights.shape() {
            return Err(Error::Shape { expected: weights.shape(), got: targets.shape() });
        }
        let weighted_targets = weights.component_mul(targets);
        Self::from_weighted_targets(dict, weights, weighted_targets, ridge, anchor, lambda)
    }

    /// Same problem given `W ⊙ Z` directly, which stays finite where the
    /// weights vanish.
    pub fn from_weighted_targets(
        dict: &'a Dictionary,
        weights: &'a Matrix,
        weighted_targets: Matrix,
        ridge: f64,
        anchor: &'a Vector,
        lambda: f64,
    ) -> Result<Self> {
        if weights.shape() != dict.shape() {
            return Err(Error::Shape { expected: dict.shape(), got: weights.shape() });
        }
        if weighted_targets.shape() != dict.shape() {
            return Err(Error::Shape { expected: dict.shape(), got: weighted_targets.shape() });
        }
        if anchor.len() != dict.n_atoms() {
            return Err(Error::Length { expected: dict.n_atoms(), got: anchor.len() });
        }
        if !(ridge > 0.0 && ridge.is_finite()) {
            return Err(Error::InvalidInput(format!("ridge must be positive, got {ridge}")));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidInput(format!("lambda2 must be nonnegative, got {lambda}")));
        }
        if weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidInput("lasso weights must be finite and nonnegative".into()));
        }
        let target_energy = weights
            .iter()
            .zip(weighted_targets.iter())
            .filter(|(w, _)| **w > 0.0)
            .map(|(w, wz)| wz * wz / w)
            .sum();
        Ok(Self { dict, weights, weighted_targets, target_energy, ridge, anchor, lambda })
    }

    pub fn objective(&self, alpha: &Vector) -> Result<f64> {
        let f = self.dict.apply(alpha)?;
        let cross = self.weighted_targets.dot(&f);
        let quad = self.dict.gram_quadratic(alpha, self.weights)?;
        Ok(self.target_energy - 2.0 * cross
            + quad
            + self.ridge * (alpha - self.anchor).norm_squared()
            + self.lambda * alpha.lp_norm(1))
    }

    /// Largest violation of the coordinate-wise optimality conditions.
    pub fn kkt_residual(&self, alpha: &Vector) -> Result<f64> {
        let mut resid = self.weighted_targets.clone();
        let f = self.dict.apply(alpha)?;
        resid -= self.weights.component_mul(&f);
        let g = self.dict.adjoint(&resid)?;
        Ok(self.kkt_from_correlations(alpha, &g))
    }

    fn kkt_from_correlations(&self, alpha: &Vector, g: &Vector) -> f64 {
        let mut worst = 0.0f64;
        for k in 0..alpha.len() {
            let grad = -2.0 * g[k] + 2.0 * self.ridge * (alpha[k] - self.anchor[k]);
            let v = if alpha[k] != 0.0 {
                (grad + self.lambda * alpha[k].signum()).abs()
            } else {
                (grad.abs() - self.lambda).max(0.0)
            };
            worst = worst.max(v);
        }
        worst
    }
}

/// Output of the coordinate descent, converged or not.
#[derive(Debug, Clone)]
pub struct LassoSolution {
    pub alpha: Vector,
    pub kkt_residual: f64,
    pub sweeps: usize,
    pub converged: bool,
}

/// Cyclic coordinate descent started at the anchor.
///
/// Returns the last iterate even when `max_iter` full sweeps do not reach
/// `tol`; every sweep decreases the objective, so the result always improves
/// on the anchor.
pub fn coordinate_descent(
    prob: &WeightedLassoProblem<'_>,
    tol: f64,
    max_iter: usize,
) -> Result<LassoSolution> {
    let dict = prob.dict;
    let n = dict.n_atoms();
    let supports = dict.atom_supports();
    let curv: Vec<f64> = dict.atom_weighted_norms(prob.weights)?.iter().copied().collect();
    let mut alpha = prob.anchor.clone();
    // weighted residual W ⊙ (Z - f_U(alpha))
    let mut resid = prob.weighted_targets.clone();
    resid -= prob.weights.component_mul(&dict.apply(&alpha)?);
    let half_lambda = 0.5 * prob.lambda;

    let update = |k: usize, alpha: &mut Vector, resid: &mut Matrix| -> f64 {
        let support = &supports[k];
        let g: f64 = support.iter().map(|&(i, j, v)| v * resid[(i, j)]).sum();
        let old = alpha[k];
        let denom = curv[k] + prob.ridge;
        let new = soft(curv[k] * old + g + prob.ridge * prob.anchor[k], half_lambda) / denom;
        let delta = new - old;
        if delta != 0.0 {
            alpha[k] = new;
            for &(i, j, v) in support {
                resid[(i, j)] -= delta * v * prob.weights[(i, j)];
            }
        }
        delta.abs() * denom.sqrt()
    };

    let correlations = |resid: &Matrix| -> Vector {
        Vector::from_iterator(
            n,
            supports.iter().map(|s| s.iter().map(|&(i, j, v)| v * resid[(i, j)]).sum::<f64>()),
        )
    };

    let mut last_objective = if cfg!(debug_assertions) { prob.objective(&alpha)? } else { 0.0 };
    let mut kkt = prob.kkt_from_correlations(&alpha, &correlations(&resid));
    let mut sweeps = 0;
    while kkt > tol && sweeps < max_iter {
        sweeps += 1;
        for k in 0..n {
            update(k, &mut alpha, &mut resid);
        }
        // active-set passes until the support stabilizes
        let active: Vec<usize> = (0..n).filter(|&k| alpha[k] != 0.0).collect();
        if !active.is_empty() && active.len() < n {
            for _ in 0..100 {
                let mut moved = 0.0f64;
                for &k in &active {
                    moved = moved.max(update(k, &mut alpha, &mut resid));
                }
                if moved <= 0.1 * tol {
                    break;
                }
            }
        }
        if cfg!(debug_assertions) {
            let obj = prob.objective(&alpha)?;
            debug_assert!(
                obj <= last_objective + 1e-9 * (1.0 + last_objective.abs()),
                "lasso sweep increased the objective: {last_objective} -> {obj}"
            );
            last_objective = obj;
        }
        kkt = prob.kkt_from_correlations(&alpha, &correlations(&resid));
    }
    Ok(LassoSolution { alpha, kkt_residual: kkt, sweeps, converged: kkt <= tol })
}

/// Solves the weighted Lasso to KKT residual `tol`.
pub fn solve_weighted_lasso(
    prob: &WeightedLassoProblem<'_>,
    tol: f64,
    max_iter: usize,
) -> Result<Vector> {
    if !(tol > 0.0) {
        return Err(Error::InvalidInput(format!("tolerance must be positive, got {tol}")));
    }
    let sol = coordinate_descent(prob, tol, max_iter)?;
    if sol.converged {
        Ok(sol.alpha)
    } else {
        Err(Error::LassoNotConverged { iterations: sol.sweeps, residual: sol.kkt_residual })
    }
}

/// `U diag(max(s - lambda, 0)) V^T` for any SVD `A = U diag(s) V^T`.
pub fn soft_threshold_singular_values(a: &Matrix, lambda: f64) -> Result<Matrix> {
    Ok(linalg::soft_threshold(a, lambda, &SvdConfig::default())?.matrix)
}

/// `min_L sum W (Z - L)^2 + lambda ||L||_*` with strictly positive weights.
#[derive(Debug, Clone, Copy)]
pub struct WeightedNuclearProblem<'a> {
    pub weights: &'a Matrix,
    pub targets: &'a Matrix,
    pub lambda: f64,
}

impl WeightedNuclearProblem<'_> {
    fn validate(&self) -> Result<f64> {
        if self.weights.shape() != self.targets.shape() {
            return Err(Error::Shape { expected: self.weights.shape(), got: self.targets.shape() });
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "lambda1 must be nonnegative, got {}",
                self.lambda
            )));
        }
        if self.weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidInput("nuclear weights must be finite and positive".into()));
        }
        Ok(self.weights.max())
    }

    pub fn objective(&self, l: &Matrix) -> Result<f64> {
        Ok(self.fit_term(l) + self.lambda * linalg::nuclear_norm(l)?)
    }

    fn fit_term(&self, l: &Matrix) -> f64 {
        self.weights
            .iter()
            .zip(self.targets.iter().zip(l.iter()))
            .map(|(w, (z, x))| w * (z - x) * (z - x))
            .sum()
    }
}

#[derive(Debug, Clone)]
pub struct NuclearSolution {
    pub l: Matrix,
    pub nuclear_norm: f64,
    pub rank: usize,
    pub iterations: usize,
    /// Relative Frobenius change of the last iteration.
    pub last_change: f64,
    pub converged: bool,
}

/// EM iterations from `start`; never fails on the iteration cap.
///
/// Weights are rescaled into `(0, 1]` by their maximum, which multiplies the
/// threshold by the same factor. Each iteration soft-thresholds
/// `w ⊙ Z + (1 - w) ⊙ L` and cannot increase the objective.
pub fn em_soft_impute(
    prob: &WeightedNuclearProblem<'_>,
    start: &Matrix,
    tol: f64,
    max_iter: usize,
    svd: &SvdConfig,
) -> Result<NuclearSolution> {
    let w_max = prob.validate()?;
    if start.shape() != prob.targets.shape() {
        return Err(Error::Shape { expected: prob.targets.shape(), got: start.shape() });
    }
    let freq = prob.weights / w_max;
    let threshold = prob.lambda / (2.0 * w_max);
    let uniform = freq.iter().all(|&f| f == 1.0);

    let mut l = start.clone();
    let mut nuclear = f64::NAN;
    let mut rank = 0;
    let mut change = f64::INFINITY;
    let mut last_objective = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let filled = if uniform {
            prob.targets.clone()
        } else {
            let mut b = prob.targets.component_mul(&freq);
            b += l.component_mul(&freq.map(|f| 1.0 - f));
            b
        };
        let step = linalg::soft_threshold(&filled, threshold, svd)?;
        let diff = (&step.matrix - &l).norm();
        let scale = step.matrix.norm().max(l.norm());
        change = if diff == 0.0 { 0.0 } else { diff / scale };
        l = step.matrix;
        nuclear = step.nuclear_norm;
        rank = step.rank;
        if cfg!(debug_assertions) && svd.full_svd_max_dim >= l.nrows().min(l.ncols()) {
            let obj = prob.fit_term(&l) + prob.lambda * nuclear;
            debug_assert!(
                obj <= last_objective + 1e-9 * (1.0 + last_objective.abs()),
                "EM step increased the objective: {last_objective} -> {obj}"
            );
            last_objective = obj;
        }
        if change <= tol || uniform {
            break;
        }
    }
    if iterations == 0 {
        nuclear = linalg::nuclear_norm(&l)?;
        rank = linalg::numerical_rank(&l, 0.0)?;
    }
    Ok(NuclearSolution {
        l,
        nuclear_norm: nuclear,
        rank,
        iterations,
        last_change: change,
        converged: change <= tol || uniform,
    })
}

/// Solves the weighted nuclear problem from zero to relative Frobenius change `tol`.
pub fn solve_weighted_nuclear(
    prob: &WeightedNuclearProblem<'_>,
    tol: f64,
    max_iter: usize,
) -> Result<Matrix> {
    let start = Matrix::zeros(prob.targets.nrows(), prob.targets.ncols());
    let sol = em_soft_impute(prob, &start, tol, max_iter, &SvdConfig::default())?;
    if sol.converged {
        Ok(sol.l)
    } else {
        Err(Error::NuclearNotConverged { iterations: sol.iterations, change: sol.last_change })
    }
}
