//! JSON fit reports and cross-validation tables.

use std::io::Write;
use std::time::Duration;

use mimi_core::selection::CVReport;
use mimi_core::{linalg, FitDiagnostics, MixedDataFrame, ModelFit, SolverConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Singular values below this fraction of the largest do not count toward
/// the reported rank.
pub const RANK_REL_TOL: f64 = 1e-7;
/// Coefficients at or below this magnitude count as zero.
pub const ALPHA_ZERO_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub config: SolverConfig,
    pub m1: usize,
    pub m2: usize,
    pub observed: usize,
    pub converged: bool,
    pub n_iter: usize,
    pub objective: f64,
    /// Objective before the first iteration and after every one.
    pub objective_trace: Vec<f64>,
    /// Accepted `(tau_alpha, tau_L)` per iteration.
    pub steps: Vec<(f64, f64)>,
    pub diagnostics: FitDiagnostics,
    pub rank: usize,
    pub alpha_nonzero: usize,
    pub wall_time_secs: f64,
}

impl FitReport {
    pub fn new(
        fit: &ModelFit,
        data: &MixedDataFrame,
        config: &SolverConfig,
        elapsed: Duration,
    ) -> Result<Self> {
        Ok(Self {
            config: config.clone(),
            m1: data.nrows(),
            m2: data.ncols(),
            observed: data.observed_count(),
            converged: fit.converged,
            n_iter: fit.n_iter,
            objective: fit.objective(),
            objective_trace: fit.objective_trace.clone(),
            steps: fit.step_trace.clone(),
            diagnostics: fit.diagnostics.clone(),
            rank: linalg::numerical_rank(&fit.l_hat, RANK_REL_TOL)?,
            alpha_nonzero: alpha_nonzero(fit),
            wall_time_secs: elapsed.as_secs_f64(),
        })
    }

    pub fn to_writer(&self, writer: impl Write) -> Result<()> {
        Ok(serde_json::to_writer_pretty(writer, self)?)
    }
}

pub fn alpha_nonzero(fit: &ModelFit) -> usize {
    fit.alpha_hat.iter().filter(|v| v.abs() > ALPHA_ZERO_TOL).count()
}

pub fn cv_to_json(report: &CVReport, writer: impl Write) -> Result<()> {
    Ok(serde_json::to_writer_pretty(writer, report)?)
}

/// One `lambda1,lambda2,fold,error` row per grid point and fold.
pub fn cv_to_csv(report: &CVReport, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["lambda1", "lambda2", "fold", "error"])?;
    for p in &report.points {
        for (k, e) in p.fold_errors.iter().enumerate() {
            w.write_record([
                format!("{:?}", p.lambda1),
                format!("{:?}", p.lambda2),
                k.to_string(),
                format!("{e:?}"),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))?;
    Ok(())
}
