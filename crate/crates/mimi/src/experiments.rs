//! Simulation studies: estimation errors over sparsity and rank, imputation
//! against baselines over missingness and effect ratio, and error scaling
//! with the number of rows.
//!
//! Penalties are tuned by cross-validation. With [`Tuning::Pilot`] one extra
//! replicate per design family is cross-validated and the chosen penalties
//! are carried to every replicate in units that scale with the problem
//! ([`theory_scales`]); [`Tuning::PerReplicate`] cross-validates every
//! replicate. Results are deterministic for a given study configuration,
//! whatever the thread count.

use std::path::{Path, PathBuf};

use mimi_core::selection::{
    cross_validate_with, default_grid, error_breakdown, predicted_means, theory_scales, CvOptions,
    ErrorBreakdown,
};
use mimi_core::simulate::{
    baseline_group_mean_then_svt, baseline_lambda_max, column_means, cross_validate_baseline,
    error_metrics, masked_cells, simulate, BaselineConfig, ColumnLayout, Interaction, SimDesign,
    Simulation,
};
use mimi_core::{fit, SolverConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{create_file, format_number};

pub const DEFAULT_REPS: usize = 20;
/// Replicate index reserved for pilot draws.
const PILOT_REP: u64 = 99_999;
const BOOTSTRAP_SEED_STREAM: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tuning {
    /// Cross-validate one extra replicate per design family.
    Pilot,
    /// Cross-validate every replicate.
    PerReplicate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvSettings {
    pub tuning: Tuning,
    /// `lambda1` grid length.
    pub n1: usize,
    /// `lambda2` grid length.
    pub n2: usize,
    pub n_folds: usize,
    /// Rows of the `lambda1` grid without improvement before stopping.
    pub patience: Option<usize>,
    /// Grid length of the baseline's soft-impute threshold.
    pub baseline_grid: usize,
    pub baseline: BaselineConfig,
}

impl Default for CvSettings {
    fn default() -> Self {
        Self {
            tuning: Tuning::Pilot,
            n1: 13,
            n2: 7,
            n_folds: mimi_core::selection::DEFAULT_FOLDS,
            patience: Some(2),
            baseline_grid: 13,
            baseline: BaselineConfig::default(),
        }
    }
}

/// Penalties chosen by cross-validation, in transferable units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// `lambda1 / lambda1_unit` at the chosen point.
    pub c1: f64,
    /// `lambda2 / lambda2_unit` at the chosen point.
    pub c2: f64,
    /// Chosen baseline threshold over the baseline's largest useful one.
    pub baseline_fraction: f64,
    pub seed: u64,
    pub cv_error: f64,
    pub baseline_cv_error: f64,
    pub fold_redraws: usize,
}

/// Cross-validates one simulated data set.
pub fn calibrate(
    sim: &Simulation,
    design: &SimDesign,
    cv: &CvSettings,
    solver: &SolverConfig,
) -> Result<Calibration> {
    let data = &sim.observations.data;
    let grid = default_grid(data, &sim.links, &sim.dictionary, cv.n1, cv.n2)?;
    let opts = CvOptions { n_folds: cv.n_folds, seed: design.seed, patience: cv.patience };
    let report = cross_validate_with(data, &sim.links, &sim.dictionary, &grid, &opts, solver)?;
    let units = theory_scales(data, &sim.links, &sim.dictionary, design.x_max)?;
    let ratio = |v: f64, unit: f64| if unit > 0.0 { v / unit } else { 0.0 };
    let top = baseline_lambda_max(data, &sim.dictionary)?;
    let n = cv.baseline_grid.max(1);
    let fractions: Vec<f64> = (0..n)
        .map(|k| 10f64.powf(-mimi_core::selection::GRID_DECADES * k as f64 / (n.max(2) - 1) as f64))
        .collect();
    let (baseline_fraction, baseline_cv_error) = if top > 0.0 {
        let lambdas: Vec<f64> = fractions.iter().map(|f| f * top).collect();
        let (chosen, errors) =
            cross_validate_baseline(data, &sim.dictionary, &lambdas, cv.n_folds, design.seed, &cv.baseline)?;
        let idx = lambdas.iter().position(|&l| l == chosen).unwrap_or(0);
        (fractions[idx], errors[idx])
    } else {
        (1.0, f64::NAN)
    };
    Ok(Calibration {
        c1: ratio(report.chosen.0, units.lambda1_unit),
        c2: ratio(report.chosen.1, units.lambda2_unit),
        baseline_fraction,
        seed: design.seed,
        cv_error: report.best().mean_error,
        baseline_cv_error,
        fold_redraws: report.redraws,
    })
}

/// `1 - p_obs` rounded to twelve decimals, so `1 - (1 - m)` reads back as `m`.
fn missing_fraction(p_obs: f64) -> f64 {
    ((1.0 - p_obs) * 1e12).round() / 1e12
}

/// Seed of replicate `rep` in design family `family`.
pub fn replicate_seed(study_seed: u64, family: u64, rep: u64) -> u64 {
    study_seed.wrapping_mul(1_000_003).wrapping_add(family * 100_000 + rep)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Mimi,
    ColumnMean,
    #[serde(rename = "group-mean+svt")]
    GroupMeanSvt,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Mimi => "mimi",
            Method::ColumnMean => "column-mean",
            Method::GroupMeanSvt => "group-mean+svt",
        }
    }
}

/// One method on one replicate, with the full design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub study: String,
    pub method: Method,
    pub m1: usize,
    pub m2: usize,
    pub n_groups: usize,
    pub s: usize,
    pub r: usize,
    pub p_obs: f64,
    /// `1 - p_obs`.
    pub missing: f64,
    pub layout: ColumnLayout,
    pub rho: f64,
    pub x_max: f64,
    pub sigma2: f64,
    pub rep: usize,
    pub seed: u64,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub err_alpha: Option<f64>,
    pub err_fu: Option<f64>,
    pub err_l: Option<f64>,
    /// Mean squared error over the masked cells.
    pub mse: f64,
    /// Root of the summed squared error over the masked cells.
    pub frobenius: f64,
    pub numeric_mse: Option<f64>,
    pub binary_mse: Option<f64>,
    pub binary_misclassification: Option<f64>,
    pub count_mse: Option<f64>,
    pub masked: usize,
    pub converged: Option<bool>,
    pub n_iter: Option<usize>,
    pub config_hash: String,
}

impl Row {
    fn new(study: &str, method: Method, design: &SimDesign, rep: usize, hash: &str, imp: &ErrorBreakdown) -> Self {
        Self {
            study: study.to_string(),
            method,
            m1: design.m1,
            m2: design.m2,
            n_groups: design.n_groups,
            s: design.s,
            r: design.r,
            p_obs: design.p_obs,
            missing: missing_fraction(design.p_obs),
            layout: design.layout,
            rho: design.rho,
            x_max: design.x_max,
            sigma2: design.sigma2,
            rep,
            seed: design.seed,
            lambda1: None,
            lambda2: None,
            err_alpha: None,
            err_fu: None,
            err_l: None,
            mse: imp.mse,
            frobenius: (imp.mse * imp.n_cells as f64).sqrt(),
            numeric_mse: imp.numeric_mse,
            binary_mse: imp.binary_mse,
            binary_misclassification: imp.binary_misclassification,
            count_mse: imp.count_mse,
            masked: imp.n_cells,
            converged: None,
            n_iter: None,
            config_hash: hash.to_string(),
        }
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "err_alpha" => self.err_alpha,
            "err_fu" => self.err_fu,
            "err_l" => self.err_l,
            "mse" => Some(self.mse),
            "frobenius" => Some(self.frobenius),
            "numeric_mse" => self.numeric_mse,
            "binary_mse" => self.binary_mse,
            "binary_misclassification" => self.binary_misclassification,
            "count_mse" => self.count_mse,
            _ => None,
        }
    }
}

pub const METRICS: [&str; 9] = [
    "err_alpha",
    "err_fu",
    "err_l",
    "mse",
    "frobenius",
    "numeric_mse",
    "binary_mse",
    "binary_misclassification",
    "count_mse",
];

/// Short hex digest of a serializable configuration.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

/// Runs `methods` on one replicate.
#[allow(clippy::too_many_arguments)]
fn run_replicate(
    study: &str,
    design: &SimDesign,
    rep: usize,
    methods: &[Method],
    calibration: Option<&Calibration>,
    cv: &CvSettings,
    solver: &SolverConfig,
    hash: &str,
) -> Result<Vec<Row>> {
    let sim = simulate(design)?;
    let own;
    let cal = match calibration {
        Some(c) => c,
        None => {
            own = calibrate(&sim, design, cv, solver)?;
            &own
        }
    };
    let data = &sim.observations.data;
    let cells = masked_cells(data);
    let mut rows = Vec::with_capacity(methods.len());
    for &method in methods {
        let row = match method {
            Method::Mimi => {
                let units = theory_scales(data, &sim.links, &sim.dictionary, design.x_max)?;
                let (l1, l2) = units.lambdas(cal.c1, cal.c2);
                let cfg = SolverConfig { lambda1: l1, lambda2: l2, ..solver.clone() };
                let f = fit(data, &sim.links, &sim.dictionary, &cfg)?;
                let pred = predicted_means(&f.x_hat, &sim.links);
                let m = error_metrics(&f.alpha_hat, &f.l_hat, &pred, &sim.truth, &sim.dictionary, &sim.observations)?;
                let mut row = Row::new(study, method, design, rep, hash, &m.imputation);
                row.lambda1 = Some(l1);
                row.lambda2 = Some(l2);
                row.err_alpha = Some(m.err_alpha);
                row.err_fu = Some(m.err_fu);
                row.err_l = Some(m.err_l);
                row.converged = Some(f.converged);
                row.n_iter = Some(f.n_iter);
                row
            }
            Method::ColumnMean => {
                let pred = column_means(data);
                let imp = error_breakdown(&pred, &sim.observations.complete, &cells, data.types());
                Row::new(study, method, design, rep, hash, &imp)
            }
            Method::GroupMeanSvt => {
                let lambda = cal.baseline_fraction * baseline_lambda_max(data, &sim.dictionary)?;
                let f = baseline_group_mean_then_svt(data, &sim.dictionary, Interaction::Lambda(lambda), &cv.baseline)?;
                let m = error_metrics(&f.alpha_hat, &f.l_hat, &f.x_hat, &sim.truth, &sim.dictionary, &sim.observations)?;
                let mut row = Row::new(study, method, design, rep, hash, &m.imputation);
                row.lambda1 = Some(lambda);
                row.err_alpha = Some(m.err_alpha);
                row.err_fu = Some(m.err_fu);
                row.err_l = Some(m.err_l);
                row
            }
        };
        rows.push(row);
    }
    Ok(rows)
}

/// A design family: replicates share a pilot calibration.
struct Family {
    index: u64,
    pilot: SimDesign,
    cells: Vec<SimDesign>,
}

struct Job {
    family: usize,
    design: SimDesign,
    rep: usize,
}

#[allow(clippy::too_many_arguments)]
fn run_families(
    study: &str,
    families: &[Family],
    n_reps: usize,
    seed: u64,
    methods: &[Method],
    cv: &CvSettings,
    solver: &SolverConfig,
    hash: &str,
) -> Result<(Vec<Option<Calibration>>, Vec<Row>)> {
    if n_reps as u64 >= PILOT_REP {
        return Err(Error::Invalid(format!("at most {} replicates", PILOT_REP - 1)));
    }
    let calibrations: Vec<Option<Calibration>> = families
        .par_iter()
        .map(|f| match cv.tuning {
            Tuning::PerReplicate => Ok(None),
            Tuning::Pilot => {
                let design = SimDesign { seed: replicate_seed(seed, f.index, PILOT_REP), ..f.pilot.clone() };
                let sim = simulate(&design)?;
                calibrate(&sim, &design, cv, solver).map(Some)
            }
        })
        .collect::<Result<_>>()?;
    let jobs: Vec<Job> = families
        .iter()
        .enumerate()
        .flat_map(|(fi, f)| {
            f.cells.iter().flat_map(move |cell| {
                (0..n_reps).map(move |rep| Job {
                    family: fi,
                    design: SimDesign { seed: replicate_seed(seed, f.index, rep as u64), ..cell.clone() },
                    rep,
                })
            })
        })
        .collect();
    let rows: Vec<Vec<Row>> = jobs
        .par_iter()
        .map(|job| {
            run_replicate(study, &job.design, job.rep, methods, calibrations[job.family].as_ref(), cv, solver, hash)
        })
        .collect::<Result<_>>()?;
    Ok((calibrations, rows.into_iter().flatten().collect()))
}

/// Type-7 quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    v.sort_by(f64::total_cmp);
    quantile(&v, 0.5)
}

/// Median and quartiles of one metric for one method in one design cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub study: String,
    pub method: Method,
    pub m1: usize,
    pub m2: usize,
    pub s: usize,
    pub r: usize,
    pub p_obs: f64,
    pub missing: f64,
    pub rho: f64,
    pub metric: String,
    pub n: usize,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub config_hash: String,
}

fn cell_key(r: &Row) -> (Method, usize, usize, usize, usize, u64, u64) {
    (r.method, r.m1, r.m2, r.s, r.r, r.p_obs.to_bits(), r.rho.to_bits())
}

/// Medians and quartiles per (method, design cell, metric), in first-seen order.
pub fn summarize(rows: &[Row]) -> Vec<SummaryRow> {
    let mut keys = Vec::new();
    for r in rows {
        let k = cell_key(r);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut out = Vec::new();
    for key in keys {
        let group: Vec<&Row> = rows.iter().filter(|r| cell_key(r) == key).collect();
        let first = group[0];
        for metric in METRICS {
            let mut vals: Vec<f64> = group.iter().filter_map(|r| r.metric(metric)).filter(|v| !v.is_nan()).collect();
            if vals.is_empty() {
                continue;
            }
            vals.sort_by(f64::total_cmp);
            out.push(SummaryRow {
                study: first.study.clone(),
                method: first.method,
                m1: first.m1,
                m2: first.m2,
                s: first.s,
                r: first.r,
                p_obs: first.p_obs,
                missing: first.missing,
                rho: first.rho,
                metric: metric.to_string(),
                n: vals.len(),
                median: quantile(&vals, 0.5),
                q25: quantile(&vals, 0.25),
                q75: quantile(&vals, 0.75),
                config_hash: first.config_hash.clone(),
            });
        }
    }
    out
}

/// Median of `metric` over the rows matching `pred`.
pub fn median_where(rows: &[Row], metric: &str, pred: impl Fn(&Row) -> bool) -> f64 {
    let vals: Vec<f64> = rows.iter().filter(|r| pred(r)).filter_map(|r| r.metric(metric)).collect();
    median(&vals)
}

/// Factorial sparsity x rank study of the estimation errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimationStudy {
    pub base: SimDesign,
    pub s_list: Vec<usize>,
    pub r_list: Vec<usize>,
    pub n_reps: usize,
    pub seed: u64,
    pub cv: CvSettings,
    pub solver: SolverConfig,
}

impl Default for EstimationStudy {
    fn default() -> Self {
        Self {
            base: SimDesign { m1: 300, m2: 30, n_groups: 5, p_obs: 0.8, layout: ColumnLayout::Numeric, ..SimDesign::default() },
            s_list: vec![2, 5, 10, 20],
            r_list: vec![2, 5, 10, 20],
            n_reps: DEFAULT_REPS,
            seed: 0,
            cv: CvSettings::default(),
            solver: SolverConfig::default(),
        }
    }
}

/// Missingness x effect-ratio imputation comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImputationStudy {
    pub base: SimDesign,
    /// Fractions of hidden cells; `p_obs = 1 - missing`.
    pub missing: Vec<f64>,
    pub rhos: Vec<f64>,
    /// Missing fraction of the pilot replicate of each ratio.
    pub pilot_missing: f64,
    pub n_reps: usize,
    pub seed: u64,
    pub cv: CvSettings,
    pub solver: SolverConfig,
}

impl Default for ImputationStudy {
    fn default() -> Self {
        Self {
            base: SimDesign { m1: 150, m2: 30, n_groups: 5, s: 3, r: 2, layout: ColumnLayout::Mixed, ..SimDesign::default() },
            missing: vec![0.2, 0.4, 0.6],
            rhos: vec![0.2, 1.0, 5.0],
            pilot_missing: 0.4,
            n_reps: DEFAULT_REPS,
            seed: 0,
            cv: CvSettings::default(),
            solver: SolverConfig::default(),
        }
    }
}

/// Error scaling with the row count at fixed rank and sparsity, plus the
/// effect of lowering the observation probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RateStudy {
    pub base: SimDesign,
    pub sizes: Vec<usize>,
    /// Multiplier of `p_obs` for the second pass.
    pub p_factor: f64,
    pub n_reps: usize,
    pub seed: u64,
    pub bootstrap: usize,
    pub cv: CvSettings,
    pub solver: SolverConfig,
}

impl Default for RateStudy {
    fn default() -> Self {
        Self {
            base: SimDesign {
                m1: 100,
                m2: 30,
                n_groups: 5,
                s: 2,
                r: 2,
                p_obs: 0.7,
                layout: ColumnLayout::Numeric,
                rho: 0.5,
                x_max: 10.0,
                ..SimDesign::default()
            },
            sizes: vec![100, 200, 400, 800],
            p_factor: 0.5,
            n_reps: DEFAULT_REPS,
            seed: 0,
            bootstrap: 1000,
            cv: CvSettings::default(),
            solver: SolverConfig::default(),
        }
    }
}

/// Log-log least-squares slope with a bootstrap percentile interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Slope {
    pub slope: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub err_l: Slope,
    pub err_alpha: Slope,
    /// `(M, median err_L at p * p_factor / median err_L at p)`.
    pub p_ratios: Vec<(usize, f64)>,
    /// `(M, median err_L, median err_alpha)` at the base `p_obs`.
    pub medians: Vec<(usize, f64, f64)>,
}

/// Least-squares slope of `y` on `x`.
pub fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub study: String,
    pub version: String,
    pub config_hash: String,
    /// The study configuration; feeding it back reproduces the results.
    pub config: serde_json::Value,
    /// Pilot calibrations by design family (empty under per-replicate tuning).
    pub calibrations: Vec<FamilyCalibration>,
    pub n_folds: usize,
    /// `p_obs` is the per-cell observation probability, `missing = 1 - p_obs`.
    pub conventions: String,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyCalibration {
    pub family: String,
    pub pilot: SimDesign,
    pub calibration: Calibration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyOutput {
    pub manifest: Manifest,
    pub rows: Vec<Row>,
    pub summary: Vec<SummaryRow>,
    pub rates: Option<RateSummary>,
}

const CONVENTIONS: &str = "p_obs is the per-cell observation probability; missing = 1 - p_obs. \
err_alpha = ||alpha_hat - alpha0||_2^2, err_fu = ||f_U(alpha_hat - alpha0)||_F^2, err_l = ||L_hat - L0||_F^2. \
mse averages squared errors over masked cells on the natural scale; frobenius is the root of their sum.";

fn manifest<T: Serialize>(
    study: &str,
    config: &T,
    families: &[Family],
    calibrations: &[Option<Calibration>],
    names: &[String],
    cv: &CvSettings,
) -> Result<Manifest> {
    let calibrations = families
        .iter()
        .zip(calibrations)
        .filter_map(|(f, c)| {
            c.map(|c| FamilyCalibration {
                family: format!("{study}-{}", f.index),
                pilot: SimDesign { seed: c.seed, ..f.pilot.clone() },
                calibration: c,
            })
        })
        .collect();
    Ok(Manifest {
        study: study.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config_hash(config)?,
        config: serde_json::to_value(config)?,
        calibrations,
        n_folds: cv.n_folds,
        conventions: CONVENTIONS.to_string(),
        files: names.to_vec(),
    })
}

fn file_names(study: &str, rates: bool) -> Vec<String> {
    let mut v = vec![format!("{study}_results.csv"), format!("{study}_summary.csv")];
    if rates {
        v.push(format!("{study}_slopes.csv"));
    }
    v
}

pub fn run_estimation_study(study: &EstimationStudy) -> Result<StudyOutput> {
    study.base.validate()?;
    let hash = config_hash(study)?;
    let mut families = Vec::new();
    for &s in &study.s_list {
        for &r in &study.r_list {
            let d = SimDesign { s, r, ..study.base.clone() };
            d.validate()?;
            families.push(Family { index: families.len() as u64, pilot: d.clone(), cells: vec![d] });
        }
    }
    let methods = [Method::Mimi, Method::GroupMeanSvt];
    let (cals, rows) =
        run_families("estimation", &families, study.n_reps, study.seed, &methods, &study.cv, &study.solver, &hash)?;
    let manifest = manifest("estimation", study, &families, &cals, &file_names("estimation", false), &study.cv)?;
    let summary = summarize(&rows);
    Ok(StudyOutput { manifest, rows, summary, rates: None })
}

pub fn run_imputation_study(study: &ImputationStudy) -> Result<StudyOutput> {
    study.base.validate()?;
    let hash = config_hash(study)?;
    let p = |miss: f64| -> Result<f64> {
        if !(0.0..1.0).contains(&miss) {
            return Err(Error::Invalid(format!("missing fraction {miss} not in [0, 1)")));
        }
        Ok(1.0 - miss)
    };
    let mut families = Vec::new();
    for (k, &rho) in study.rhos.iter().enumerate() {
        let pilot = SimDesign { rho, p_obs: p(study.pilot_missing)?, ..study.base.clone() };
        let cells = study
            .missing
            .iter()
            .map(|&m| Ok(SimDesign { rho, p_obs: p(m)?, ..study.base.clone() }))
            .collect::<Result<Vec<_>>>()?;
        for c in &cells {
            c.validate()?;
        }
        families.push(Family { index: k as u64, pilot, cells });
    }
    let methods = [Method::Mimi, Method::ColumnMean, Method::GroupMeanSvt];
    let (cals, rows) =
        run_families("imputation", &families, study.n_reps, study.seed, &methods, &study.cv, &study.solver, &hash)?;
    let manifest = manifest("imputation", study, &families, &cals, &file_names("imputation", false), &study.cv)?;
    let summary = summarize(&rows);
    Ok(StudyOutput { manifest, rows, summary, rates: None })
}

pub fn run_rate_study(study: &RateStudy) -> Result<StudyOutput> {
    if study.sizes.len() < 2 {
        return Err(Error::Invalid("the rate study needs at least two sizes".into()));
    }
    if !(study.p_factor > 0.0 && study.p_factor <= 1.0) {
        return Err(Error::Invalid(format!("p_factor {} not in (0, 1]", study.p_factor)));
    }
    let hash = config_hash(study)?;
    let low_p = study.base.p_obs * study.p_factor;
    let mut cells = Vec::new();
    for &p_obs in &[study.base.p_obs, low_p] {
        for &m1 in &study.sizes {
            let d = SimDesign { m1, p_obs, ..study.base.clone() };
            d.validate()?;
            cells.push(d);
        }
    }
    let pilot = SimDesign { m1: study.sizes[0], ..study.base.clone() };
    let families = [Family { index: 0, pilot, cells }];
    let (cals, rows) =
        run_families("rates", &families, study.n_reps, study.seed, &[Method::Mimi], &study.cv, &study.solver, &hash)?;
    let rates = rate_summary(&rows, study)?;
    let manifest = manifest("rates", study, &families, &cals, &file_names("rates", true), &study.cv)?;
    let summary = summarize(&rows);
    Ok(StudyOutput { manifest, rows, summary, rates: Some(rates) })
}

fn rate_summary(rows: &[Row], study: &RateStudy) -> Result<RateSummary> {
    let p0 = study.base.p_obs;
    let p1 = p0 * study.p_factor;
    let per_size = |p: f64, metric: &str| -> Vec<Vec<f64>> {
        study
            .sizes
            .iter()
            .map(|&m| {
                rows.iter()
                    .filter(|r| r.m1 == m && r.p_obs == p)
                    .filter_map(|r| r.metric(metric))
                    .collect()
            })
            .collect()
    };
    let x: Vec<f64> = study.sizes.iter().map(|&m| (m as f64).ln()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(study.seed);
    rng.set_stream(BOOTSTRAP_SEED_STREAM);
    let mut slope = |samples: &[Vec<f64>]| -> Slope {
        let y: Vec<f64> = samples.iter().map(|v| median(v).ln()).collect();
        let mut boot = Vec::with_capacity(study.bootstrap);
        for _ in 0..study.bootstrap {
            let yb: Vec<f64> = samples
                .iter()
                .map(|v| {
                    let draw: Vec<f64> = (0..v.len()).map(|_| v[rng.random_range(0..v.len())]).collect();
                    median(&draw).ln()
                })
                .collect();
            boot.push(ls_slope(&x, &yb));
        }
        boot.sort_by(f64::total_cmp);
        Slope { slope: ls_slope(&x, &y), ci_low: quantile(&boot, 0.025), ci_high: quantile(&boot, 0.975) }
    };
    let err_l = per_size(p0, "err_l");
    let err_alpha = per_size(p0, "err_alpha");
    let err_l_low = per_size(p1, "err_l");
    let s_l = slope(&err_l);
    let s_a = slope(&err_alpha);
    let p_ratios = study
        .sizes
        .iter()
        .zip(err_l.iter().zip(&err_l_low))
        .map(|(&m, (hi, lo))| (m, median(lo) / median(hi)))
        .collect();
    let medians = study
        .sizes
        .iter()
        .zip(err_l.iter().zip(&err_alpha))
        .map(|(&m, (l, a))| (m, median(l), median(a)))
        .collect();
    Ok(RateSummary { err_l: s_l, err_alpha: s_a, p_ratios, medians })
}

fn write_rows<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create_file(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Writes results, summary, slopes (rate study) and the manifest into `dir`.
pub fn write_study(output: &StudyOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let study = &output.manifest.study;
    let mut written = Vec::new();
    let results = dir.join(format!("{study}_results.csv"));
    write_rows(&output.rows, &results)?;
    written.push(results);
    let summary = dir.join(format!("{study}_summary.csv"));
    write_rows(&output.summary, &summary)?;
    written.push(summary);
    if let Some(rates) = &output.rates {
        let path = dir.join(format!("{study}_slopes.csv"));
        let mut w = csv::Writer::from_writer(create_file(&path)?);
        w.write_record(["quantity", "size", "value", "ci_low", "ci_high"])?;
        for (name, s) in [("slope_err_l", rates.err_l), ("slope_err_alpha", rates.err_alpha)] {
            w.write_record([name, "", &format_number(s.slope), &format_number(s.ci_low), &format_number(s.ci_high)])?;
        }
        for &(m, ratio) in &rates.p_ratios {
            w.write_record(["p_ratio_err_l", &m.to_string(), &format_number(ratio), "", ""])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    let path = dir.join(format!("{study}_manifest.json"));
    serde_json::to_writer_pretty(create_file(&path)?, &output.manifest)?;
    written.push(path);
    Ok(written)
}
