//! Block coordinate gradient descent on `F(alpha, L)`.
//!
//! Each outer iteration takes one `alpha` step and one `L` step. A step
//! minimizes a local quadratic model of the quasi-likelihood plus the block's
//! penalty and a proximal term `nu ||d||^2`, then backtracks along the
//! resulting direction until the Armijo condition holds.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

#[allow(unused_imports)]
use num_traits::Float;
use crate::dictionary::Dictionary;
use crate::expfam::{self, Link};
use crate::frame::MixedDataFrame;
use crate::linalg::{self, SvdConfig};
use crate::subsolvers::{self, WeightedLassoProblem, WeightedNuclearProblem};
use crate::{Error, Matrix, Result, Vector};

/// Smallest step tried before a line search gives up.
pub const MIN_STEP: f64 = 1e-12;

/// Which nuclear-norm difference enters the predicted decrease of the `L` step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NuclearDifference {
    /// `||L + d||_* - ||L||_*`, mirroring the `alpha` step.
    #[default]
    Symmetric,
    /// `||L + d||_* - ||d||_*`.
    Literal,
}

/// Blocks updated by the solver; a frozen block keeps its initial value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Blocks {
    #[default]
    Both,
    AlphaOnly,
    LOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Proximal weight of both quadratic models.
    pub nu: f64,
    pub tau_init: f64,
    /// Backtracking factor.
    pub beta: f64,
    /// Armijo slope.
    pub zeta: f64,
    /// Share of the curvature term kept in the predicted decrease.
    pub theta: f64,
    /// Relative objective change that stops the outer loop.
    pub eps_f: f64,
    pub max_iter: usize,
    /// KKT residual target of the coordinate descent.
    pub lasso_tol: f64,
    pub lasso_max_sweeps: usize,
    /// Relative Frobenius change target of the EM iterations.
    pub nuclear_tol: f64,
    pub nuclear_max_iter: usize,
    pub gamma_l: NuclearDifference,
    pub blocks: Blocks,
    /// Clip the reported `X_hat` to `[-c, c]`.
    pub clip: Option<f64>,
    pub svd: SvdConfig,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            nu: 1e-2,
            tau_init: 1.0,
            beta: 0.5,
            zeta: 0.1,
            theta: 0.0,
            eps_f: 1e-6,
            max_iter: 200,
            lasso_tol: 1e-9,
            lasso_max_sweeps: 1000,
            nuclear_tol: 1e-7,
            nuclear_max_iter: 200,
            gamma_l: NuclearDifference::Symmetric,
            blocks: Blocks::Both,
            clip: None,
            svd: SvdConfig::default(),
        }
    }
}

impl SolverConfig {
    pub fn with_lambdas(lambda1: f64, lambda2: f64) -> Self {
        Self { lambda1, lambda2, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::InvalidInput(format!("{what} out of range: {v}")));
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return bad("lambda1", self.lambda1);
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return bad("lambda2", self.lambda2);
        }
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return bad("nu", self.nu);
        }
        if !(self.tau_init > 0.0 && self.tau_init.is_finite()) {
            return bad("tau_init", self.tau_init);
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad("beta", self.beta);
        }
        if !(self.zeta > 0.0 && self.zeta < 1.0) {
            return bad("zeta", self.zeta);
        }
        if !(self.theta >= 0.0 && self.theta < 1.0) {
            return bad("theta", self.theta);
        }
        if !(self.eps_f >= 0.0) {
            return bad("eps_f", self.eps_f);
        }
        if !(self.lasso_tol > 0.0) {
            return bad("lasso_tol", self.lasso_tol);
        }
        if !(self.nuclear_tol >= 0.0) {
            return bad("nuclear_tol", self.nuclear_tol);
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return bad("clip", c);
            }
        }
        Ok(())
    }
}

/// Outcome of one block step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    /// Accepted step size; zero when the direction vanished or the search stalled.
    pub tau: f64,
    /// Predicted decrease of the full step.
    pub gamma: f64,
    /// Squared norm of the direction.
    pub direction_sq: f64,
    /// `sum w (f_U(d))^2` or `sum w d^2`, the curvature of the direction.
    pub curvature: f64,
    pub stalled: bool,
    /// Coordinate descent sweeps or EM iterations.
    pub inner_iterations: usize,
    pub inner_converged: bool,
}

impl StepReport {
    fn zero(inner_iterations: usize, inner_converged: bool) -> Self {
        Self {
            tau: 0.0,
            gamma: 0.0,
            direction_sq: 0.0,
            curvature: 0.0,
            stalled: false,
            inner_iterations,
            inner_converged,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub alpha_steps: Vec<StepReport>,
    pub l_steps: Vec<StepReport>,
    pub stalls: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFit {
    pub alpha_hat: Vector,
    pub l_hat: Matrix,
    pub x_hat: Matrix,
    /// `F` at the start and after every outer iteration.
    pub objective_trace: Vec<f64>,
    /// Accepted `(tau_alpha, tau_L)` per outer iteration.
    pub step_trace: Vec<(f64, f64)>,
    pub converged: bool,
    pub n_iter: usize,
    pub diagnostics: FitDiagnostics,
}

impl ModelFit {
    pub fn objective(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(f64::NAN)
    }
}

/// `quasi_loglik_neg(f_U(alpha) + L) + lambda1 ||L||_* + lambda2 ||alpha||_1`.
pub fn objective(
    alpha: &Vector,
    l: &Matrix,
    data: &MixedDataFrame,
    links: &[Link],
    dict: &Dictionary,
    lambda1: f64,
    lambda2: f64,
) -> Result<f64> {
    let mut x = l.clone();
    dict.apply_add(alpha, 1.0, &mut x)?;
    let f = expfam::quasi_loglik_neg(&x, data, links)?;
    let nuclear = if lambda1 == 0.0 { 0.0 } else { linalg::nuclear_norm(l)? };
    Ok(f + lambda1 * nuclear + lambda2 * alpha.lp_norm(1))
}

fn negligible(d_inf: f64, scale_inf: f64) -> bool {
    d_inf <= 1e-14 * (1.0 + scale_inf)
}

/// Non-negative predicted decrease attributable to rounding in an objective of size `f`.
fn rounding_gamma(gamma: f64, f: f64) -> bool {
    gamma.is_finite() && gamma <= 1e-12 * (1.0 + f.abs())
}

/// Current iterate of the solver with cached derived quantities.
#[derive(Debug, Clone)]
pub struct SolverState<'a> {
    data: &'a MixedDataFrame,
    links: &'a [Link],
    dict: &'a Dictionary,
    config: &'a SolverConfig,
    alpha: Vector,
    l: Matrix,
    x: Matrix,
    /// Quasi-likelihood at `x`.
    smooth: f64,
    l_nuclear: f64,
}

impl<'a> SolverState<'a> {
    pub fn new(
        data: &'a MixedDataFrame,
        links: &'a [Link],
        dict: &'a Dictionary,
        config: &'a SolverConfig,
        alpha: Vector,
        l: Matrix,
    ) -> Result<Self> {
        config.validate()?;
        for link in links {
            link.validate()?;
        }
        if dict.shape() != data.shape() {
            return Err(Error::Shape { expected: data.shape(), got: dict.shape() });
        }
        if l.shape() != data.shape() {
            return Err(Error::Shape { expected: data.shape(), got: l.shape() });
        }
        let mut x = l.clone();
        dict.apply_add(&alpha, 1.0, &mut x)?;
        let smooth = expfam::quasi_loglik_neg(&x, data, links)?;
        let l_nuclear = linalg::nuclear_norm(&l)?;
        Ok(Self { data, links, dict, config, alpha, l, x, smooth, l_nuclear })
    }

    pub fn alpha(&self) -> &Vector {
        &self.alpha
    }

    pub fn l(&self) -> &Matrix {
        &self.l
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn objective(&self) -> f64 {
        self.smooth
            + self.config.lambda1 * self.l_nuclear
            + self.config.lambda2 * self.alpha.lp_norm(1)
    }

    /// Trial quasi-likelihood; an overflow counts as a rejected trial.
    fn trial_smooth(&self, x: &Matrix) -> Result<Option<f64>> {
        match expfam::quasi_loglik_neg(x, self.data, self.links) {
            Ok(v) if v.is_finite() => Ok(Some(v)),
            Ok(_) | Err(Error::Overflow { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Weighted-Lasso direction on `alpha` followed by an Armijo search.
    pub fn alpha_step(&mut self) -> Result<StepReport> {
        let cfg = self.config;
        let (w, wz) = expfam::weights_and_weighted_responses(&self.x, self.data, self.links)?;
        let fu = self.dict.apply(&self.alpha)?;
        let targets = &wz + w.component_mul(&fu);
        let prob = WeightedLassoProblem::from_weighted_targets(
            self.dict,
            &w,
            targets,
            cfg.nu,
            &self.alpha,
            cfg.lambda2,
        )?;
        let sol = subsolvers::coordinate_descent(&prob, cfg.lasso_tol, cfg.lasso_max_sweeps)?;
        let d = &sol.alpha - &self.alpha;
        if negligible(d.amax(), self.alpha.amax()) {
            return Ok(StepReport::zero(sol.sweeps, sol.converged));
        }
        let fd = self.dict.apply(&d)?;
        let curvature = w.component_mul(&fd).dot(&fd);
        let direction_sq = d.norm_squared();
        let l1_old = self.alpha.lp_norm(1);
        let gamma = -2.0 * wz.dot(&fd)
            + cfg.theta * curvature
            + cfg.nu * direction_sq
            + cfg.lambda2 * (sol.alpha.lp_norm(1) - l1_old);
        if !(gamma < 0.0) {
            if !sol.converged || rounding_gamma(gamma, self.objective()) {
                return Ok(StepReport::zero(sol.sweeps, sol.converged));
            }
            return Err(Error::Consistency(format!(
                "alpha direction with squared norm {direction_sq:e} predicts no decrease ({gamma:e})"
            )));
        }
        let old = self.smooth + cfg.lambda2 * l1_old;
        let mut tau = cfg.tau_init;
        while tau >= MIN_STEP {
            let x_trial = &self.x + &fd * tau;
            if let Some(smooth) = self.trial_smooth(&x_trial)? {
                let alpha_trial = &self.alpha + &d * tau;
                let new = smooth + cfg.lambda2 * alpha_trial.lp_norm(1);
                if new <= old + tau * cfg.zeta * gamma {
                    self.alpha = alpha_trial;
                    self.x = x_trial;
                    self.smooth = smooth;
                    return Ok(StepReport {
                        tau,
                        gamma,
                        direction_sq,
                        curvature,
                        stalled: false,
                        inner_iterations: sol.sweeps,
                        inner_converged: sol.converged,
                    });
                }
            }
            tau *= cfg.beta;
        }
        Ok(StepReport {
            tau: 0.0,
            gamma,
            direction_sq,
            curvature,
            stalled: true,
            inner_iterations: sol.sweeps,
            inner_converged: sol.converged,
        })
    }

    /// Weighted nuclear-norm direction on `L` followed by an Armijo search.
    pub fn l_step(&mut self) -> Result<StepReport> {
        let cfg = self.config;
        let (w, wz) = expfam::weights_and_weighted_responses(&self.x, self.data, self.links)?;
        let weights = w.add_scalar(cfg.nu);
        let targets = &self.l + wz.component_div(&weights);
        let prob = WeightedNuclearProblem { weights: &weights, targets: &targets, lambda: cfg.lambda1 };
        let sol = subsolvers::em_soft_impute(
            &prob,
            &self.l,
            cfg.nuclear_tol,
            cfg.nuclear_max_iter,
            &cfg.svd,
        )?;
        let d = &sol.l - &self.l;
        if negligible(d.amax(), self.l.amax()) {
            return Ok(StepReport::zero(sol.iterations, sol.converged));
        }
        let curvature = w.component_mul(&d).dot(&d);
        let direction_sq = d.norm_squared();
        let reference = match cfg.gamma_l {
            NuclearDifference::Symmetric => self.l_nuclear,
            NuclearDifference::Literal => linalg::nuclear_norm(&d)?,
        };
        let gamma = -2.0 * wz.dot(&d)
            + cfg.theta * curvature
            + cfg.lambda1 * (sol.nuclear_norm - reference);
        if cfg.gamma_l == NuclearDifference::Symmetric && !(gamma < 0.0) {
            if !sol.converged || rounding_gamma(gamma, self.objective()) {
                return Ok(StepReport::zero(sol.iterations, sol.converged));
            }
            return Err(Error::Consistency(format!(
                "L direction with squared norm {direction_sq:e} predicts no decrease ({gamma:e})"
            )));
        }
        let old = self.smooth + cfg.lambda1 * self.l_nuclear;
        let mut tau = cfg.tau_init;
        while tau >= MIN_STEP {
            let x_trial = &self.x + &d * tau;
            if let Some(smooth) = self.trial_smooth(&x_trial)? {
                let (l_trial, nuclear) = if tau == 1.0 {
                    (sol.l.clone(), sol.nuclear_norm)
                } else {
                    let l_trial = &self.l + &d * tau;
                    let nuclear =
                        if cfg.lambda1 == 0.0 { 0.0 } else { linalg::nuclear_norm(&l_trial)? };
                    (l_trial, nuclear)
                };
                let new = smooth + cfg.lambda1 * nuclear;
                if new <= old + tau * cfg.zeta * gamma {
                    self.l = l_trial;
                    self.l_nuclear = nuclear;
                    self.x = x_trial;
                    self.smooth = smooth;
                    return Ok(StepReport {
                        tau,
                        gamma,
                        direction_sq,
                        curvature,
                        stalled: false,
                        inner_iterations: sol.iterations,
                        inner_converged: sol.converged,
                    });
                }
            }
            tau *= cfg.beta;
        }
        Ok(StepReport {
            tau: 0.0,
            gamma,
            direction_sq,
            curvature,
            stalled: true,
            inner_iterations: sol.iterations,
            inner_converged: sol.converged,
        })
    }

    fn into_fit(
        self,
        objective_trace: Vec<f64>,
        step_trace: Vec<(f64, f64)>,
        converged: bool,
        diagnostics: FitDiagnostics,
    ) -> Result<ModelFit> {
        let mut x_hat = self.l.clone();
        self.dict.apply_add(&self.alpha, 1.0, &mut x_hat)?;
        if let Some(c) = self.config.clip {
            x_hat.apply(|v| *v = v.clamp(-c, c));
        }
        Ok(ModelFit {
            alpha_hat: self.alpha,
            l_hat: self.l,
            x_hat,
            n_iter: step_trace.len(),
            objective_trace,
            step_trace,
            converged,
            diagnostics,
        })
    }
}

/// Fits from `alpha = 0`, `L = 0`.
pub fn fit(
    data: &MixedDataFrame,
    links: &[Link],
    dict: &Dictionary,
    config: &SolverConfig,
) -> Result<ModelFit> {
    let (m1, m2) = data.shape();
    fit_from(data, links, dict, config, Vector::zeros(dict.n_atoms()), Matrix::zeros(m1, m2))
}

/// Fits from a given starting point.
///
/// Stops when one outer iteration changes `F` by at most `eps_f` relative to
/// `|F|`, or after `max_iter` iterations. A failing step aborts the fit with
/// the objective trace so far.
pub fn fit_from(
    data: &MixedDataFrame,
    links: &[Link],
    dict: &Dictionary,
    config: &SolverConfig,
    alpha0: Vector,
    l0: Matrix,
) -> Result<ModelFit> {
    let mut state = SolverState::new(data, links, dict, config, alpha0, l0)?;
    let mut trace = alloc::vec![state.objective()];
    let mut steps = Vec::new();
    let mut diag = FitDiagnostics::default();
    let mut converged = false;
    for iteration in 0..config.max_iter {
        let mut run = || -> Result<(StepReport, StepReport)> {
            let a = match config.blocks {
                Blocks::LOnly => StepReport::zero(0, true),
                _ => state.alpha_step()?,
            };
            let l = match config.blocks {
                Blocks::AlphaOnly => StepReport::zero(0, true),
                _ => state.l_step()?,
            };
            Ok((a, l))
        };
        let (a, l) = run().map_err(|e| Error::FitAborted {
            iteration,
            trace: trace.clone(),
            source: Box::new(e),
        })?;
        diag.stalls += usize::from(a.stalled) + usize::from(l.stalled);
        diag.alpha_steps.push(a);
        diag.l_steps.push(l);
        steps.push((a.tau, l.tau));
        let previous = *trace.last().unwrap_or(&f64::NAN);
        let current = state.objective();
        trace.push(current);
        if (previous - current).abs() <= config.eps_f * previous.abs().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }
    state.into_fit(trace, steps, converged, diag)
}

/// Observed cells unchanged, unobserved cells filled with the predicted mean
/// `g_j'(X_hat_ij)`.
pub fn impute(fit: &ModelFit, data: &MixedDataFrame, links: &[Link]) -> Result<MixedDataFrame> {
    expfam::check_inputs(&fit.x_hat, data, links)?;
    Ok(data.filled_with(|i, j| links[j].mean(fit.x_hat[(i, j)])))
}

/// As [`impute`], with binary predictions rounded at one half.
pub fn impute_rounded(
    fit: &ModelFit,
    data: &MixedDataFrame,
    links: &[Link],
) -> Result<MixedDataFrame> {
    expfam::check_inputs(&fit.x_hat, data, links)?;
    Ok(data.filled_with(|i, j| {
        let mean = links[j].mean(fit.x_hat[(i, j)]);
        match links[j] {
            Link::Bernoulli => {
                if mean >= 0.5 {
                    1.0
                } else {
                    0.0
                }
            }
            _ => mean,
        }
    }))
}
