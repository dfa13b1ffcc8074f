//! Regularization parameters: zero-thresholds from the gradient at the zero
//! model, geometric grids below them, and cross-validation over held-out
//! observed cells.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[allow(unused_imports)]
use num_traits::Float;

use crate::bcgd::{fit_from, ModelFit, SolverConfig};
use crate::dictionary::Dictionary;
use crate::expfam::{self, CurvatureBounds, Link};
use crate::frame::{ColumnType, MixedDataFrame};
use crate::linalg;
use crate::{Error, Matrix, Result, Vector};

/// Decades spanned by a default grid.
pub const GRID_DECADES: f64 = 3.0;
pub const DEFAULT_FOLDS: usize = 5;
/// Fold assignments tried before giving up on a frame.
pub const MAX_REDRAWS: usize = 20;

/// Smallest penalties at which `L` (with `alpha = 0`) and `alpha` (with
/// `L = 0`) are exactly zero at the solution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchors {
    pub lambda1_max: f64,
    pub lambda2_max: f64,
}

pub fn anchors(data: &MixedDataFrame, links: &[Link], dict: &Dictionary) -> Result<Anchors> {
    let (m1, m2) = data.shape();
    let grad = expfam::gradient(&Matrix::zeros(m1, m2), data, links)?;
    Ok(Anchors {
        lambda1_max: linalg::operator_norm(&grad)?,
        lambda2_max: dict.adjoint(&grad)?.amax(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaGrid {
    /// Strictly decreasing.
    pub lambda1: Vec<f64>,
    /// Strictly decreasing.
    pub lambda2: Vec<f64>,
    pub anchors: Anchors,
    /// Set when an anchor is zero and its sequence collapsed to `{0}`.
    pub degenerate: bool,
}

fn geometric(top: f64, n: usize) -> Vec<f64> {
    if top <= 0.0 {
        return alloc::vec![0.0];
    }
    if n <= 1 {
        return alloc::vec![top];
    }
    (0..n)
        .map(|i| top * 10f64.powf(-GRID_DECADES * i as f64 / (n - 1) as f64))
        .collect()
}

impl LambdaGrid {
    /// Explicit grid; sequences must be strictly decreasing and nonnegative.
    pub fn new(lambda1: Vec<f64>, lambda2: Vec<f64>, anchors: Anchors) -> Result<Self> {
        for (name, seq) in [("lambda1", &lambda1), ("lambda2", &lambda2)] {
            if seq.is_empty() {
                return Err(Error::InvalidInput(format!("{name} grid is empty")));
            }
            if seq.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
                return Err(Error::InvalidInput(format!("{name} grid has invalid values")));
            }
            if seq.windows(2).any(|w| w[1] >= w[0]) {
                return Err(Error::InvalidInput(format!("{name} grid is not strictly decreasing")));
            }
        }
        let degenerate = lambda1 == [0.0] || lambda2 == [0.0];
        Ok(Self { lambda1, lambda2, anchors, degenerate })
    }

    pub fn len(&self) -> usize {
        self.lambda1.len() * self.lambda2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same grid with every value multiplied by the given factors.
    pub fn scaled(&self, s1: f64, s2: f64) -> Self {
        Self {
            lambda1: self.lambda1.iter().map(|v| v * s1).collect(),
            lambda2: self.lambda2.iter().map(|v| v * s2).collect(),
            anchors: self.anchors,
            degenerate: self.degenerate,
        }
    }
}

/// Geometric grids from the anchors down three decades.
pub fn default_grid(
    data: &MixedDataFrame,
    links: &[Link],
    dict: &Dictionary,
    n1: usize,
    n2: usize,
) -> Result<LambdaGrid> {
    let a = anchors(data, links, dict)?;
    let lambda1 = geometric(a.lambda1_max, n1);
    let lambda2 = geometric(a.lambda2_max, n2);
    let degenerate = a.lambda1_max <= 0.0 || a.lambda2_max <= 0.0;
    Ok(LambdaGrid { lambda1, lambda2, anchors: a, degenerate })
}

/// Units in which penalties scale with problem size:
/// `lambda1_unit = sigma_max * sqrt(beta * ln d)` and `lambda2_unit = u_max * ln d`,
/// where `beta` is the largest observed count in any row or column,
/// `d = m1 + m2` and `u_max` is the largest atom l1 norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryScales {
    pub lambda1_unit: f64,
    pub lambda2_unit: f64,
    pub beta: f64,
    pub u_max: f64,
    pub sigma_max_sq: f64,
}

impl TheoryScales {
    pub fn lambdas(&self, c1: f64, c2: f64) -> (f64, f64) {
        (c1 * self.lambda1_unit, c2 * self.lambda2_unit)
    }
}

/// Penalty units for `data`; `radius` bounds `|X|` when evaluating curvature.
pub fn theory_scales(
    data: &MixedDataFrame,
    links: &[Link],
    dict: &Dictionary,
    radius: f64,
) -> Result<TheoryScales> {
    expfam::check_inputs(&Matrix::zeros(data.nrows(), data.ncols()), data, links)?;
    let (m1, m2) = data.shape();
    let beta = crate::frame::mask_stats(data).beta_hat;
    let mut u_max = 0.0f64;
    for k in 0..dict.n_atoms() {
        let mut l1 = 0.0;
        dict.for_each_entry(k, |_, _, v| l1 += v.abs());
        u_max = u_max.max(l1);
    }
    let sigma_max_sq = CurvatureBounds::combined(links, radius)
        .map(|b| b.sigma_max_sq)
        .unwrap_or(0.0);
    let log_d = ((m1 + m2) as f64).ln();
    Ok(TheoryScales {
        lambda1_unit: (sigma_max_sq * beta * log_d).sqrt(),
        lambda2_unit: u_max * log_d,
        beta,
        u_max,
        sigma_max_sq,
    })
}

/// Geometric grid of penalty constants `(c1, c2)` expressed in `scales` units.
pub fn theory_grid(
    scales: &TheoryScales,
    anchors: Anchors,
    c1: &[f64],
    c2: &[f64],
) -> Result<LambdaGrid> {
    LambdaGrid::new(
        c1.iter().map(|c| c * scales.lambda1_unit).collect(),
        c2.iter().map(|c| c * scales.lambda2_unit).collect(),
        anchors,
    )
}

/// Held-out squared errors on the natural scale, overall and per column type.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    /// Mean squared error over all cells.
    pub mse: f64,
    pub numeric_mse: Option<f64>,
    /// Squared error of the predicted probability.
    pub binary_mse: Option<f64>,
    /// Share of binary cells on the wrong side of one half.
    pub binary_misclassification: Option<f64>,
    pub count_mse: Option<f64>,
    pub n_cells: usize,
}

/// Errors of `predicted` against `actual` on `cells`.
pub fn error_breakdown(
    predicted: &Matrix,
    actual: &Matrix,
    cells: &[(usize, usize)],
    types: &[ColumnType],
) -> ErrorBreakdown {
    let mut sums = [0.0f64; 3];
    let mut counts = [0usize; 3];
    let mut wrong = 0usize;
    for &(i, j) in cells {
        let (p, y) = (predicted[(i, j)], actual[(i, j)]);
        let slot = match types[j] {
            ColumnType::Numeric => 0,
            ColumnType::Binary => {
                if (p >= 0.5) != (y >= 0.5) {
                    wrong += 1;
                }
                1
            }
            ColumnType::Count => 2,
        };
        sums[slot] += (p - y) * (p - y);
        counts[slot] += 1;
    }
    let mean = |k: usize| (counts[k] > 0).then(|| sums[k] / counts[k] as f64);
    let n = counts.iter().sum::<usize>();
    ErrorBreakdown {
        mse: if n > 0 { sums.iter().sum::<f64>() / n as f64 } else { f64::NAN },
        numeric_mse: mean(0),
        binary_mse: mean(1),
        binary_misclassification: (counts[1] > 0).then(|| wrong as f64 / counts[1] as f64),
        count_mse: mean(2),
        n_cells: n,
    }
}

/// `g_j'(x_ij)` for every cell.
pub fn predicted_means(x: &Matrix, links: &[Link]) -> Matrix {
    Matrix::from_fn(x.nrows(), x.ncols(), |i, j| links[j].mean(x[(i, j)]))
}

/// Random balanced partition of the observed cells into folds.
#[derive(Debug, Clone, PartialEq)]
pub struct Folds {
    /// Observed cells, column-major.
    pub cells: Vec<(usize, usize)>,
    /// Fold of each cell.
    pub fold: Vec<usize>,
    pub n_folds: usize,
    /// Draws rejected because a training set lost a whole column.
    pub redraws: usize,
}

impl Folds {
    /// Draws folds until every training set keeps at least one observed cell
    /// per column.
    pub fn draw(data: &MixedDataFrame, n_folds: usize, seed: u64) -> Result<Self> {
        if n_folds < 2 {
            return Err(Error::InvalidInput(format!("need at least 2 folds, got {n_folds}")));
        }
        let cells: Vec<(usize, usize)> = data.observed().map(|(i, j, _)| (i, j)).collect();
        if cells.len() < n_folds {
            return Err(Error::CrossValidation(format!(
                "{} observed cells cannot fill {n_folds} folds",
                cells.len()
            )));
        }
        let m2 = data.ncols();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..cells.len()).collect();
        for redraws in 0..=MAX_REDRAWS {
            order.shuffle(&mut rng);
            let mut fold = alloc::vec![0usize; cells.len()];
            for (rank, &idx) in order.iter().enumerate() {
                fold[idx] = rank % n_folds;
            }
            // per column, the number of cells in each fold
            let mut per_col = alloc::vec![alloc::vec![0usize; n_folds]; m2];
            let mut col_total = alloc::vec![0usize; m2];
            for (idx, &(_, j)) in cells.iter().enumerate() {
                per_col[j][fold[idx]] += 1;
                col_total[j] += 1;
            }
            let ok = (0..m2).all(|j| {
                col_total[j] == 0 || per_col[j].iter().all(|&c| c < col_total[j])
            });
            if ok {
                return Ok(Self { cells, fold, n_folds, redraws });
            }
        }
        Err(Error::CrossValidation(format!(
            "every one of {} fold draws left a column unobserved in training",
            MAX_REDRAWS + 1
        )))
    }

    /// Training mask (column-major) and held-out cells of fold `k`.
    pub fn split(&self, k: usize, m1: usize, m2: usize) -> (Vec<bool>, Vec<(usize, usize)>) {
        let mut keep = alloc::vec![false; m1 * m2];
        let mut held = Vec::new();
        for (&(i, j), &f) in self.cells.iter().zip(&self.fold) {
            if f == k {
                held.push((i, j));
            } else {
                keep[i + j * m1] = true;
            }
        }
        (keep, held)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvPoint {
    pub lambda1: f64,
    pub lambda2: f64,
    pub fold_errors: Vec<f64>,
    pub mean_error: f64,
    /// Standard deviation of the fold errors.
    pub std_error: f64,
    /// Per-type errors pooled over folds.
    pub breakdown: ErrorBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CVReport {
    pub points: Vec<CvPoint>,
    pub chosen: (f64, f64),
    pub chosen_index: usize,
    pub n_folds: usize,
    pub seed: u64,
    pub redraws: usize,
}

impl CVReport {
    pub fn best(&self) -> &CvPoint {
        &self.points[self.chosen_index]
    }
}

/// Grid points in warm-start order: `lambda1` descending, `lambda2` snaking
/// so consecutive points differ in one coordinate.
pub fn path_order(grid: &LambdaGrid) -> Vec<(usize, usize)> {
    let mut order = Vec::with_capacity(grid.len());
    for a in 0..grid.lambda1.len() {
        let n2 = grid.lambda2.len();
        for b in 0..n2 {
            order.push((a, if a % 2 == 0 { b } else { n2 - 1 - b }));
        }
    }
    order
}

/// Fits every grid point along [`path_order`], each warm-started from the
/// previous solution. Returns fits indexed as `[a * n2 + b]`.
pub fn fit_path(
    data: &MixedDataFrame,
    links: &[Link],
    dict: &Dictionary,
    grid: &LambdaGrid,
    config: &SolverConfig,
) -> Result<Vec<ModelFit>> {
    let (m1, m2) = data.shape();
    let n2 = grid.lambda2.len();
    let mut alpha = Vector::zeros(dict.n_atoms());
    let mut l = Matrix::zeros(m1, m2);
    let mut fits: Vec<Option<ModelFit>> = alloc::vec![None; grid.len()];
    for (a, b) in path_order(grid) {
        let cfg = SolverConfig { lambda1: grid.lambda1[a], lambda2: grid.lambda2[b], ..config.clone() };
        let fit = fit_from(data, links, dict, &cfg, alpha, l)?;
        alpha = fit.alpha_hat.clone();
        l = fit.l_hat.clone();
        fits[a * n2 + b] = Some(fit);
    }
    Ok(fits.into_iter().flatten().collect())
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Index of the smallest error; ties go to the earlier, more penalized point.
fn argmin_first(errors: &[f64]) -> usize {
    let mut best = 0;
    for (k, &e) in errors.iter().enumerate() {
        if e < errors[best] {
            best = k;
        }
    }
    best
}

/// Cross-validation settings beyond the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvOptions {
    pub n_folds: usize,
    pub seed: u64,
    /// Stop descending `lambda1` after this many consecutive rows without a
    /// new best mean error; `None` evaluates the whole grid.
    pub patience: Option<usize>,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self { n_folds: DEFAULT_FOLDS, seed: 0, patience: None }
    }
}

/// K-fold cross-validation over held-out observed cells.
///
/// Each fold's cells are hidden, the whole grid is fitted on the rest along a
/// warm-started path, and predictions `g_j'(X_hat)` are scored by squared
/// error on the hidden cells. The chosen pair minimizes the mean error over
/// folds; ties go to larger penalties.
pub fn cross_validate(
    data: &MixedDataFrame,
    links: &[Link],
    dict: &Dictionary,
    grid: &LambdaGrid,
    n_folds: usize,
    seed: u64,
    config: &SolverConfig,
) -> Result<CVReport> {
    let options = CvOptions { n_folds, seed, patience: None };
    cross_validate_with(data, links, dict, grid, &options, config)
}

/// [`cross_validate`] with optional early stopping along `lambda1`.
///
/// Rows of the grid are visited from the largest `lambda1` down; within a
/// row every fold walks `lambda2` from the state it reached on the previous
/// row. Points below an early stop are absent from the report.
pub fn cross_validate_with(
    data: &MixedDataFrame,
    links: &[Link],
    dict: &Dictionary,
    grid: &LambdaGrid,
    options: &CvOptions,
    config: &SolverConfig,
) -> Result<CVReport> {
    let n_folds = options.n_folds;
    let folds = Folds::draw(data, n_folds, options.seed)?;
    let (m1, m2) = data.shape();
    let actual = data.values_or_zero();
    let mut splits = Vec::with_capacity(n_folds);
    for k in 0..n_folds {
        let (keep, held) = folds.split(k, m1, m2);
        if held.iter().any(|&(i, j)| keep[i + j * m1]) {
            return Err(Error::Consistency("held-out cell used for training".into()));
        }
        splits.push((data.restrict(&keep)?, held));
    }
    let mut states: Vec<(Vector, Matrix)> =
        alloc::vec![(Vector::zeros(dict.n_atoms()), Matrix::zeros(m1, m2)); n_folds];
    let n2 = grid.lambda2.len();
    let mut points = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0usize;
    for a in 0..grid.lambda1.len() {
        let columns: Vec<usize> = if a % 2 == 0 { (0..n2).collect() } else { (0..n2).rev().collect() };
        let mut row: Vec<Option<CvPoint>> = alloc::vec![None; n2];
        let mut row_errors = alloc::vec![Vec::with_capacity(n_folds); n2];
        let mut row_pred = alloc::vec![Matrix::zeros(m1, m2); n2];
        for (k, (train, held)) in splits.iter().enumerate() {
            for &b in &columns {
                let cfg = SolverConfig {
                    lambda1: grid.lambda1[a],
                    lambda2: grid.lambda2[b],
                    ..config.clone()
                };
                let (alpha0, l0) = core::mem::take(&mut states[k]);
                let fit = fit_from(train, links, dict, &cfg, alpha0, l0)?;
                let pred = predicted_means(&fit.x_hat, links);
                row_errors[b].push(error_breakdown(&pred, &actual, held, data.types()).mse);
                for &(i, j) in held {
                    row_pred[b][(i, j)] = pred[(i, j)];
                }
                states[k] = (fit.alpha_hat, fit.l_hat);
            }
        }
        for b in 0..n2 {
            let (mean_error, std_error) = mean_std(&row_errors[b]);
            row[b] = Some(CvPoint {
                lambda1: grid.lambda1[a],
                lambda2: grid.lambda2[b],
                fold_errors: core::mem::take(&mut row_errors[b]),
                mean_error,
                std_error,
                breakdown: error_breakdown(&row_pred[b], &actual, &folds.cells, data.types()),
            });
        }
        let row_best = row.iter().flatten().map(|p| p.mean_error).fold(f64::INFINITY, f64::min);
        points.extend(row.into_iter().flatten());
        if row_best < best {
            best = row_best;
            stale = 0;
        } else {
            stale += 1;
        }
        if options.patience.is_some_and(|p| stale >= p) {
            break;
        }
    }
    let errors: Vec<f64> = points.iter().map(|p| p.mean_error).collect();
    let chosen_index = argmin_first(&errors);
    Ok(CVReport {
        chosen: (points[chosen_index].lambda1, points[chosen_index].lambda2),
        chosen_index,
        points,
        n_folds,
        seed: options.seed,
        redraws: folds.redraws,
    })
}
