//! Synthetic designs: sparse group effects plus a low-rank matrix, sampled
//! through the column links and masked completely at random; error metrics
//! and the two reference baselines (column means, group means followed by
//! soft-impute).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

#[allow(unused_imports)]
use num_traits::Float;

use crate::bcgd::{FitDiagnostics, ModelFit};
use crate::dictionary::{Dictionary, Structure};
use crate::expfam::Link;
use crate::frame::{ColumnType, MixedDataFrame};
use crate::linalg::{self, SvdConfig};
use crate::selection::{error_breakdown, predicted_means, ErrorBreakdown, Folds};
use crate::{Error, Matrix, Result, Vector};

/// Column types of a simulated frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnLayout {
    /// Every column Gaussian.
    Numeric,
    /// First half (rounded up) Gaussian, the rest Bernoulli.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimDesign {
    pub m1: usize,
    pub m2: usize,
    /// Equal contiguous row groups of the group-effects dictionary.
    pub n_groups: usize,
    /// Nonzero main effects.
    pub s: usize,
    /// Rank of the interaction matrix.
    pub r: usize,
    /// Per-cell observation probability.
    pub p_obs: f64,
    pub layout: ColumnLayout,
    /// `||f_U(alpha0)||_F / ||L0||_F`.
    pub rho: f64,
    /// Target `max |X0|`.
    pub x_max: f64,
    /// Scale of the Gaussian columns.
    pub sigma2: f64,
    pub seed: u64,
}

impl Default for SimDesign {
    fn default() -> Self {
        Self {
            m1: 300,
            m2: 30,
            n_groups: 5,
            s: 2,
            r: 2,
            p_obs: 0.8,
            layout: ColumnLayout::Numeric,
            rho: 1.0,
            x_max: 2.5,
            sigma2: 1.0,
            seed: 0,
        }
    }
}

impl SimDesign {
    pub fn validate(&self) -> Result<()> {
        let n = self.n_groups * self.m2;
        if self.m1 == 0 || self.m2 == 0 || self.n_groups == 0 || self.n_groups > self.m1 {
            return Err(Error::InvalidInput(format!(
                "bad design shape {}x{} with {} groups",
                self.m1, self.m2, self.n_groups
            )));
        }
        if self.s > n {
            return Err(Error::InvalidInput(format!("s = {} exceeds {n} atoms", self.s)));
        }
        if self.r > self.m1.min(self.m2) {
            return Err(Error::InvalidInput(format!("rank {} too large", self.r)));
        }
        if !(self.p_obs > 0.0 && self.p_obs <= 1.0) {
            return Err(Error::InvalidInput(format!("p_obs = {} not in (0, 1]", self.p_obs)));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidInput(format!("rho = {} must be positive", self.rho)));
        }
        if !(self.x_max > 0.0 && self.sigma2 > 0.0) {
            return Err(Error::InvalidInput("x_max and sigma2 must be positive".into()));
        }
        Ok(())
    }

    pub fn dictionary(&self) -> Result<Dictionary> {
        Dictionary::equal_groups(self.m1, self.m2, self.n_groups)
    }

    pub fn column_types(&self) -> Vec<ColumnType> {
        let numeric = match self.layout {
            ColumnLayout::Numeric => self.m2,
            ColumnLayout::Mixed => self.m2.div_ceil(2),
        };
        (0..self.m2)
            .map(|j| if j < numeric { ColumnType::Numeric } else { ColumnType::Binary })
            .collect()
    }

    pub fn links(&self) -> Vec<Link> {
        self.column_types()
            .iter()
            .map(|t| match t {
                ColumnType::Numeric => Link::gaussian(self.sigma2),
                _ => t.default_link(),
            })
            .collect()
    }

    /// Random stream `stream` of this design's seed.
    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub alpha: Vector,
    pub l: Matrix,
    pub x: Matrix,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Matrix {
    Matrix::from_fn(m, n, |_, _| StandardNormal.sample(rng))
}

/// `s` random nonzero effects and a rank-`r` product, scaled so the
/// Frobenius ratio equals `rho` and `max |X0| = x_max`.
pub fn gen_ground_truth(design: &SimDesign) -> Result<GroundTruth> {
    design.validate()?;
    let dict = design.dictionary()?;
    let (m1, m2) = (design.m1, design.m2);
    let mut rng = design.rng(0);
    for _ in 0..100 {
        let mut alpha = Vector::zeros(dict.n_atoms());
        for k in index::sample(&mut rng, dict.n_atoms(), design.s) {
            alpha[k] = StandardNormal.sample(&mut rng);
        }
        let l = if design.r == 0 {
            Matrix::zeros(m1, m2)
        } else {
            gaussian_matrix(&mut rng, m1, design.r) * gaussian_matrix(&mut rng, m2, design.r).transpose()
        };
        let fu = dict.apply(&alpha)?;
        let (nf, nl) = (fu.norm(), l.norm());
        if (design.s > 0 && nf == 0.0) || (design.r > 0 && nl == 0.0) {
            continue;
        }
        // unit-norm pieces mixed at ratio rho
        let (ca, cl) = match (nf > 0.0, nl > 0.0) {
            (true, true) => (design.rho / nf, 1.0 / nl),
            (true, false) => (1.0 / nf, 0.0),
            (false, true) => (0.0, 1.0 / nl),
            (false, false) => (0.0, 0.0),
        };
        let x = &fu * ca + &l * cl;
        let top = x.amax();
        let k = if top > 0.0 { design.x_max / top } else { 1.0 };
        let alpha = alpha * (ca * k);
        let l = l * (cl * k);
        let x = dict.apply(&alpha)? + &l;
        return Ok(GroundTruth { alpha, l, x });
    }
    Err(Error::InvalidInput("could not draw a nondegenerate ground truth".into()))
}

/// Simulated frame together with the values hidden by the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    pub data: MixedDataFrame,
    /// Every sampled value, masked or not.
    pub complete: Matrix,
}

/// Samples `Y_ij` from the column family at `X0_ij` and masks each cell
/// independently with probability `1 - p_obs`. Values and mask use separate
/// streams, so for a fixed seed the observed set only grows with `p_obs`.
pub fn gen_observations(x0: &Matrix, design: &SimDesign, links: &[Link]) -> Result<Observations> {
    design.validate()?;
    if x0.shape() != (design.m1, design.m2) {
        return Err(Error::Shape { expected: (design.m1, design.m2), got: x0.shape() });
    }
    if links.len() != design.m2 {
        return Err(Error::Length { expected: design.m2, got: links.len() });
    }
    if let Some(idx) = x0.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { row: idx % design.m1, col: idx / design.m1 });
    }
    let mut rng = design.rng(1);
    let types: Vec<ColumnType> = links
        .iter()
        .map(|l| match l {
            Link::Gaussian { .. } => ColumnType::Numeric,
            Link::Bernoulli => ColumnType::Binary,
            Link::Poisson { .. } => ColumnType::Count,
        })
        .collect();
    let mut complete = Matrix::zeros(design.m1, design.m2);
    for j in 0..design.m2 {
        for i in 0..design.m1 {
            complete[(i, j)] = sample(&links[j], x0[(i, j)], &mut rng)?;
        }
    }
    let mut mask_rng = design.rng(2);
    let mut mask: Vec<bool> =
        (0..design.m1 * design.m2).map(|_| mask_rng.random::<f64>() < design.p_obs).collect();
    if !mask.iter().any(|&b| b) {
        mask[0] = true;
    }
    let names = (1..=design.m2).map(|j| format!("V{j}")).collect::<Vec<String>>();
    let data = MixedDataFrame::new(names, types, complete.clone(), mask)?;
    Ok(Observations { data, complete })
}

fn sample(link: &Link, x: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    let bad = |e: &dyn core::fmt::Display| Error::InvalidInput(format!("sampler: {e}"));
    Ok(match *link {
        Link::Gaussian { sigma2 } => {
            Normal::new(sigma2 * x, sigma2.sqrt()).map_err(|e| bad(&e))?.sample(rng)
        }
        Link::Bernoulli => f64::from(rng.random_bool(link.mean(x))),
        Link::Poisson { .. } => {
            let mean = link.mean(x);
            if mean <= 0.0 {
                0.0
            } else {
                Poisson::new(mean).map_err(|e| bad(&e))?.sample(rng)
            }
        }
    })
}

/// A full simulated replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub truth: GroundTruth,
    pub observations: Observations,
    pub dictionary: Dictionary,
    pub links: Vec<Link>,
}

pub fn simulate(design: &SimDesign) -> Result<Simulation> {
    let truth = gen_ground_truth(design)?;
    let links = design.links();
    let observations = gen_observations(&truth.x, design, &links)?;
    Ok(Simulation { truth, observations, dictionary: design.dictionary()?, links })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    /// `||alpha_hat - alpha0||_2^2`.
    pub err_alpha: f64,
    /// `||f_U(alpha_hat) - f_U(alpha0)||_F^2`.
    pub err_fu: f64,
    /// `||L_hat - L0||_F^2`.
    pub err_l: f64,
    /// Errors of the predictions on the masked cells.
    pub imputation: ErrorBreakdown,
}

/// Unobserved cells of `data`, column-major.
pub fn masked_cells(data: &MixedDataFrame) -> Vec<(usize, usize)> {
    let m1 = data.nrows();
    data.mask()
        .iter()
        .enumerate()
        .filter(|(_, &b)| !b)
        .map(|(idx, _)| (idx % m1, idx / m1))
        .collect()
}

/// Estimation errors of `(alpha_hat, L_hat)` and imputation errors of
/// `predicted` (natural scale) against the hidden values.
pub fn error_metrics(
    alpha_hat: &Vector,
    l_hat: &Matrix,
    predicted: &Matrix,
    truth: &GroundTruth,
    dict: &Dictionary,
    obs: &Observations,
) -> Result<ErrorMetrics> {
    if alpha_hat.len() != truth.alpha.len() {
        return Err(Error::Length { expected: truth.alpha.len(), got: alpha_hat.len() });
    }
    if l_hat.shape() != truth.l.shape() || predicted.shape() != truth.l.shape() {
        return Err(Error::Shape { expected: truth.l.shape(), got: l_hat.shape() });
    }
    let da = alpha_hat - &truth.alpha;
    let dfu = dict.apply(&da)?;
    let cells = masked_cells(&obs.data);
    Ok(ErrorMetrics {
        err_alpha: da.norm_squared(),
        err_fu: dfu.norm_squared(),
        err_l: (l_hat - &truth.l).norm_squared(),
        imputation: error_breakdown(predicted, &obs.complete, &cells, obs.data.types()),
    })
}

/// Metrics of a fit whose predictions are `g_j'(X_hat)`.
pub fn fit_metrics(
    fit: &ModelFit,
    links: &[Link],
    truth: &GroundTruth,
    dict: &Dictionary,
    obs: &Observations,
) -> Result<ErrorMetrics> {
    let pred = predicted_means(&fit.x_hat, links);
    error_metrics(&fit.alpha_hat, &fit.l_hat, &pred, truth, dict, obs)
}

/// Mean of the observed values of every column, repeated down the rows.
pub fn column_means(data: &MixedDataFrame) -> Matrix {
    let (m1, m2) = data.shape();
    let mut sums = alloc::vec![0.0; m2];
    let mut counts = alloc::vec![0usize; m2];
    for (_, j, v) in data.observed() {
        sums[j] += v;
        counts[j] += 1;
    }
    Matrix::from_fn(m1, m2, |_, j| if counts[j] > 0 { sums[j] / counts[j] as f64 } else { 0.0 })
}

/// Penalty of the soft-impute stage of the group-mean baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interaction {
    /// Soft-thresholding at `lambda` (objective `1/2 ||P(R - L)||^2 + lambda ||L||_*`).
    Lambda(f64),
    /// Hard truncation to the given rank.
    Rank(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { tol: 1e-5, max_iter: 500 }
    }
}

/// Group means of the observed values, one per (group, column) atom.
pub fn group_means(data: &MixedDataFrame, dict: &Dictionary) -> Result<Vector> {
    let (assignment, n_groups) = match dict.structure() {
        Structure::GroupEffects { assignment, n_groups } => (assignment, *n_groups),
        _ => return Err(Error::Dictionary("group-mean baseline needs group effects".into())),
    };
    if dict.shape() != data.shape() {
        return Err(Error::Shape { expected: data.shape(), got: dict.shape() });
    }
    let mut sums = Vector::zeros(dict.n_atoms());
    let mut counts = alloc::vec![0usize; dict.n_atoms()];
    for (i, j, v) in data.observed() {
        let k = assignment[i] + j * n_groups;
        sums[k] += v;
        counts[k] += 1;
    }
    Ok(Vector::from_fn(dict.n_atoms(), |k, _| {
        if counts[k] > 0 {
            sums[k] / counts[k] as f64
        } else {
            0.0
        }
    }))
}

/// Group means for the main effects, then the residuals completed by
/// uniform-weight soft-impute (or hard-impute at a fixed rank).
///
/// Values are treated as numeric whatever the column type, so `x_hat` is on
/// the data scale.
pub fn baseline_group_mean_then_svt(
    data: &MixedDataFrame,
    dict: &Dictionary,
    penalty: Interaction,
    config: &BaselineConfig,
) -> Result<ModelFit> {
    let alpha = group_means(data, dict)?;
    let fu = dict.apply(&alpha)?;
    let (m1, m2) = data.shape();
    let mut resid = Matrix::zeros(m1, m2);
    for (i, j, v) in data.observed() {
        resid[(i, j)] = v - fu[(i, j)];
    }
    let l = soft_impute(&resid, data.mask(), penalty, config)?;
    let x_hat = &fu + &l;
    Ok(ModelFit {
        alpha_hat: alpha,
        l_hat: l,
        x_hat,
        objective_trace: Vec::new(),
        step_trace: Vec::new(),
        converged: true,
        n_iter: 0,
        diagnostics: FitDiagnostics::default(),
    })
}

/// Iterates `L <- S(P(R) + P_perp(L))` from zero, where `S` soft-thresholds
/// at `lambda` or truncates to a rank.
pub fn soft_impute(
    observed: &Matrix,
    mask: &[bool],
    penalty: Interaction,
    config: &BaselineConfig,
) -> Result<Matrix> {
    let (m1, m2) = observed.shape();
    if mask.len() != m1 * m2 {
        return Err(Error::Length { expected: m1 * m2, got: mask.len() });
    }
    let svd_cfg = SvdConfig::default();
    let mut l = Matrix::zeros(m1, m2);
    for _ in 0..config.max_iter {
        let filled = Matrix::from_fn(m1, m2, |i, j| {
            if mask[i + j * m1] {
                observed[(i, j)]
            } else {
                l[(i, j)]
            }
        });
        let next = match penalty {
            Interaction::Lambda(lambda) => linalg::soft_threshold(&filled, lambda, &svd_cfg)?.matrix,
            Interaction::Rank(k) => {
                let dec = linalg::svd(&filled, &svd_cfg)?;
                let k = k.min(dec.s.len());
                let mut us = dec.u.columns(0, k).into_owned();
                for c in 0..k {
                    us.column_mut(c).scale_mut(dec.s[c]);
                }
                us * dec.v_t.rows(0, k)
            }
        };
        let diff = (&next - &l).norm();
        let scale = next.norm().max(l.norm());
        l = next;
        if diff == 0.0 || diff <= config.tol * scale {
            break;
        }
    }
    Ok(l)
}

/// Cross-validated soft-impute threshold of the group-mean baseline.
///
/// Returns the chosen `lambda` and the mean held-out squared error of every
/// grid value; ties go to the larger threshold.
pub fn cross_validate_baseline(
    data: &MixedDataFrame,
    dict: &Dictionary,
    lambdas: &[f64],
    n_folds: usize,
    seed: u64,
    config: &BaselineConfig,
) -> Result<(f64, Vec<f64>)> {
    if lambdas.is_empty() {
        return Err(Error::InvalidInput("empty baseline grid".into()));
    }
    let folds = Folds::draw(data, n_folds, seed)?;
    let (m1, m2) = data.shape();
    let actual = data.values_or_zero();
    let mut errors = alloc::vec![0.0; lambdas.len()];
    for k in 0..n_folds {
        let (keep, held) = folds.split(k, m1, m2);
        let train = data.restrict(&keep)?;
        for (p, &lambda) in lambdas.iter().enumerate() {
            let fit = baseline_group_mean_then_svt(&train, dict, Interaction::Lambda(lambda), config)?;
            let e = error_breakdown(&fit.x_hat, &actual, &held, data.types());
            errors[p] += e.mse / n_folds as f64;
        }
    }
    let mut best = 0;
    for p in 1..lambdas.len() {
        let better = errors[p] < errors[best];
        let tie_larger = errors[p] == errors[best] && lambdas[p] > lambdas[best];
        if better || tie_larger {
            best = p;
        }
    }
    Ok((lambdas[best], errors))
}

/// Largest useful soft-impute threshold of the baseline: the operator norm
/// of the observed residuals after group means.
pub fn baseline_lambda_max(data: &MixedDataFrame, dict: &Dictionary) -> Result<f64> {
    let alpha = group_means(data, dict)?;
    let fu = dict.apply(&alpha)?;
    let mut resid = Matrix::zeros(data.nrows(), data.ncols());
    for (i, j, v) in data.observed() {
        resid[(i, j)] = v - fu[(i, j)];
    }
    linalg::operator_norm(&resid)
}
