//! Mixed data frames: typed columns, values and the observation mask.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

#[allow(unused_imports)]
use num_traits::Float;
use crate::expfam::Link;
use crate::{Error, Matrix, Result};

/// Observation space of a column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnType {
    Numeric,
    Binary,
    Count,
}

impl ColumnType {
    /// Gaussian with unit scale, Bernoulli, or Poisson with unit rate-scale.
    pub fn default_link(self) -> Link {
        match self {
            ColumnType::Numeric => Link::gaussian(1.0),
            ColumnType::Binary => Link::Bernoulli,
            ColumnType::Count => Link::poisson(1.0),
        }
    }

    pub fn accepts(self, value: f64) -> bool {
        match self {
            ColumnType::Numeric => value.is_finite(),
            ColumnType::Binary => value == 0.0 || value == 1.0,
            ColumnType::Count => value.is_finite() && value >= 0.0 && value == value.trunc(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ColumnType::Numeric => "numeric",
            ColumnType::Binary => "binary",
            ColumnType::Count => "count",
        }
    }
}

/// Empirical summary of the observation mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    /// Fraction of observed cells.
    pub p_hat: f64,
    /// Largest number of observed cells in any single row or column.
    pub beta_hat: f64,
}

/// An `m1 x m2` table with per-column types and an observation mask.
///
/// Values under a zero mask hold a NaN sentinel and are never handed out:
/// [`MixedDataFrame::get`] returns `None` for them. The frame is immutable;
/// derived frames (a thinned mask, an imputed table) are new values.
#[derive(Debug, Clone)]
pub struct MixedDataFrame {
    names: Vec<String>,
    types: Vec<ColumnType>,
    pub(crate) values: Matrix,
    /// Column-major, aligned with `values`.
    pub(crate) mask: Vec<bool>,
}

impl MixedDataFrame {
    /// Builds a frame from dense values and a column-major mask.
    ///
    /// Entries where `mask` is false are ignored, whatever `values` holds there.
    pub fn new(
        names: Vec<String>,
        types: Vec<ColumnType>,
        values: Matrix,
        mask: Vec<bool>,
    ) -> Result<Self> {
        let (m1, m2) = values.shape();
        if m1 == 0 || m2 == 0 {
            return Err(Error::InvalidInput(format!("empty frame {m1}x{m2}")));
        }
        if names.len() != m2 {
            return Err(Error::Length { expected: m2, got: names.len() });
        }
        if types.len() != m2 {
            return Err(Error::Length { expected: m2, got: types.len() });
        }
        if mask.len() != m1 * m2 {
            return Err(Error::Length { expected: m1 * m2, got: mask.len() });
        }
        let mut values = values;
        let mut observed = 0usize;
        for j in 0..m2 {
            for i in 0..m1 {
                let idx = i + j * m1;
                if mask[idx] {
                    let v = values[(i, j)];
                    if !types[j].accepts(v) {
                        return Err(Error::Schema(format!(
                            "value {v} at row {i}, column {j} ({}) is not a valid {} value",
                            names[j],
                            types[j].as_str()
                        )));
                    }
                    observed += 1;
                } else {
                    values[(i, j)] = f64::NAN;
                }
            }
        }
        if observed == 0 {
            return Err(Error::InvalidInput("frame has no observed entry".into()));
        }
        Ok(Self { names, types, values, mask })
    }

    /// Builds a frame from row-major optional cells (`None` = missing).
    pub fn from_rows(
        names: Vec<String>,
        types: Vec<ColumnType>,
        rows: &[Vec<Option<f64>>],
    ) -> Result<Self> {
        let m1 = rows.len();
        let m2 = names.len();
        let mut values = Matrix::zeros(m1, m2);
        let mut mask = alloc::vec![false; m1 * m2];
        for (i, row) in rows.iter().enumerate() {
            if row.len() != m2 {
                return Err(Error::Length { expected: m2, got: row.len() });
            }
            for (j, cell) in row.iter().enumerate() {
                if let Some(v) = cell {
                    values[(i, j)] = *v;
                    mask[i + j * m1] = true;
                }
            }
        }
        Self::new(names, types, values, mask)
    }

    /// A fully observed frame with generated column names `V1..Vm2`.
    pub fn fully_observed(types: Vec<ColumnType>, values: Matrix) -> Result<Self> {
        let names = (1..=values.ncols()).map(|j| format!("V{j}")).collect();
        let n = values.len();
        Self::new(names, types, values, alloc::vec![true; n])
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn types(&self) -> &[ColumnType] {
        &self.types
    }

    /// Default link of every column.
    pub fn default_links(&self) -> Vec<Link> {
        self.types.iter().map(|t| t.default_link()).collect()
    }

    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.mask[i + j * self.nrows()]
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        if self.is_observed(i, j) {
            Some(self.values[(i, j)])
        } else {
            None
        }
    }

    /// Column-major observation mask.
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    /// Observed cells as `(row, col, value)`, column-major order.
    pub fn observed(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let m1 = self.nrows();
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(idx, _)| {
                let (i, j) = (idx % m1, idx / m1);
                (i, j, self.values[(i, j)])
            })
    }

    /// Observed values with zeros in unobserved cells.
    pub fn values_or_zero(&self) -> Matrix {
        let m1 = self.nrows();
        Matrix::from_fn(m1, self.ncols(), |i, j| {
            if self.mask[i + j * m1] {
                self.values[(i, j)]
            } else {
                0.0
            }
        })
    }

    /// Mask as a 0/1 matrix.
    pub fn mask_matrix(&self) -> Matrix {
        let m1 = self.nrows();
        Matrix::from_fn(m1, self.ncols(), |i, j| if self.mask[i + j * m1] { 1.0 } else { 0.0 })
    }

    /// Same frame observed on a subset of its cells. `keep` must only select
    /// cells that are already observed.
    pub fn restrict(&self, keep: &[bool]) -> Result<Self> {
        if keep.len() != self.mask.len() {
            return Err(Error::Length { expected: self.mask.len(), got: keep.len() });
        }
        if keep.iter().zip(&self.mask).any(|(&k, &m)| k && !m) {
            return Err(Error::InvalidInput("restriction selects an unobserved cell".into()));
        }
        Self::new(self.names.clone(), self.types.clone(), self.values.clone(), keep.to_vec())
    }

    /// Replaces every unobserved cell by `fill(i, j)` and marks it observed.
    ///
    /// Filled values are not checked against the column type: imputed binary
    /// cells are probabilities unless the caller rounds them.
    pub fn filled_with(&self, mut fill: impl FnMut(usize, usize) -> f64) -> Self {
        let m1 = self.nrows();
        let mut values = self.values.clone();
        for j in 0..self.ncols() {
            for i in 0..m1 {
                if !self.mask[i + j * m1] {
                    values[(i, j)] = fill(i, j);
                }
            }
        }
        Self {
            names: self.names.clone(),
            types: self.types.clone(),
            values,
            mask: alloc::vec![true; self.mask.len()],
        }
    }
}

impl PartialEq for MixedDataFrame {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names
            && self.types == other.types
            && self.shape() == other.shape()
            && self.mask == other.mask
            && self.observed().zip(other.observed()).all(|(a, b)| a == b)
    }
}

/// Observed fraction and the largest row/column observed count.
pub fn mask_stats(df: &MixedDataFrame) -> MaskStats {
    let (m1, m2) = df.shape();
    let mut rows = alloc::vec![0usize; m1];
    let mut cols = alloc::vec![0usize; m2];
    let mut total = 0usize;
    for (i, j, _) in df.observed() {
        rows[i] += 1;
        cols[j] += 1;
        total += 1;
    }
    let beta = rows.iter().chain(cols.iter()).copied().max().unwrap_or(0);
    MaskStats {
        p_hat: total as f64 / (m1 * m2) as f64,
        beta_hat: beta as f64,
    }
}
