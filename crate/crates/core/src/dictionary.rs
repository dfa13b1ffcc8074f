//! Main-effect dictionaries `{U^1, ..., U^N}` and their linear maps.
//!
//! Built-in structures never materialize atoms: `apply`, `adjoint` and the
//! per-atom weighted norms are closed-form index arithmetic.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

#[allow(unused_imports)]
use num_traits::Float;
use crate::{Error, Matrix, Result, Vector};

/// Largest number of custom atoms for which Gram-based metadata is computed.
pub const DEFAULT_METADATA_CAP: usize = 100_000;

/// How the atoms are laid out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Structure {
    /// Atom `k = h + q * n_groups` is the indicator of rows in group `h`,
    /// column `q`. `assignment[i]` is the group of row `i`; a zero
    /// `n_groups` is inferred from the assignment.
    #[serde(rename = "groups")]
    GroupEffects {
        assignment: Vec<usize>,
        #[serde(default)]
        n_groups: usize,
    },
    /// Atoms `0..m1` are row indicators, atoms `m1..m1+m2` column indicators.
    #[serde(rename = "rowcol")]
    RowColumn,
    /// Atom `k` is the canonical basis matrix at `cells[k]`.
    Corruptions { cells: Vec<(usize, usize)> },
    /// Explicit sparse atoms as `(row, col, value)` triplets.
    Custom { atoms: Vec<Vec<(usize, usize, f64)>> },
}

/// Structural constants of a dictionary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DictionaryMetadata {
    /// `max_k ||U^k||_1` (entrywise).
    pub u_max: f64,
    /// `max_ij sum_k |U^k_ij|`.
    pub u_overlap: f64,
    /// Lower bound `kappa^2` on the Gram matrix's smallest eigenvalue.
    pub kappa_sq: f64,
    /// `max_k sum_{l != k} |<U^k, U^l>|`.
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    m1: usize,
    m2: usize,
    structure: Structure,
    group_sizes: Vec<usize>,
}

impl Dictionary {
    pub fn group_effects(m2: usize, assignment: Vec<usize>) -> Result<Self> {
        let m1 = assignment.len();
        if m1 == 0 || m2 == 0 {
            return Err(Error::Dictionary("empty shape".into()));
        }
        let n_groups = assignment.iter().copied().max().unwrap_or(0) + 1;
        let mut group_sizes = vec![0usize; n_groups];
        for &h in &assignment {
            group_sizes[h] += 1;
        }
        if let Some(h) = group_sizes.iter().position(|&n| n == 0) {
            return Err(Error::Dictionary(format!(
                "group {h} has no rows; labels must cover 0..{n_groups}"
            )));
        }
        Ok(Self {
            m1,
            m2,
            structure: Structure::GroupEffects { assignment, n_groups },
            group_sizes,
        })
    }

    /// `n_groups` contiguous groups of (nearly) equal size.
    pub fn equal_groups(m1: usize, m2: usize, n_groups: usize) -> Result<Self> {
        if n_groups == 0 || n_groups > m1 {
            return Err(Error::Dictionary(format!("cannot split {m1} rows into {n_groups} groups")));
        }
        let assignment = (0..m1).map(|i| i * n_groups / m1).collect();
        Self::group_effects(m2, assignment)
    }

    pub fn row_column(m1: usize, m2: usize) -> Result<Self> {
        if m1 == 0 || m2 == 0 {
            return Err(Error::Dictionary("empty shape".into()));
        }
        Ok(Self { m1, m2, structure: Structure::RowColumn, group_sizes: Vec::new() })
    }

    pub fn corruptions(m1: usize, m2: usize, cells: Vec<(usize, usize)>) -> Result<Self> {
        let mut seen = BTreeMap::new();
        for (k, &(i, j)) in cells.iter().enumerate() {
            if i >= m1 || j >= m2 {
                return Err(Error::Dictionary(format!("cell ({i}, {j}) outside {m1}x{m2}")));
            }
            if seen.insert((i, j), k).is_some() {
                return Err(Error::Dictionary(format!("duplicate cell ({i}, {j})")));
            }
        }
        Ok(Self { m1, m2, structure: Structure::Corruptions { cells }, group_sizes: Vec::new() })
    }

    /// Corruption atoms on every cell.
    pub fn all_cells(m1: usize, m2: usize) -> Result<Self> {
        let cells = (0..m2).flat_map(|j| (0..m1).map(move |i| (i, j))).collect();
        Self::corruptions(m1, m2, cells)
    }

    pub fn custom(m1: usize, m2: usize, atoms: Vec<Vec<(usize, usize, f64)>>) -> Result<Self> {
        for (k, atom) in atoms.iter().enumerate() {
            let mut seen = BTreeMap::new();
            for &(i, j, v) in atom {
                if i >= m1 || j >= m2 {
                    return Err(Error::Dictionary(format!(
                        "atom {k}: cell ({i}, {j}) outside {m1}x{m2}"
                    )));
                }
                if !(-1.0..=1.0).contains(&v) {
                    return Err(Error::Dictionary(format!(
                        "atom {k}: entry {v} at ({i}, {j}) outside [-1, 1]"
                    )));
                }
                if seen.insert((i, j), ()).is_some() {
                    return Err(Error::Dictionary(format!("atom {k}: duplicate cell ({i}, {j})")));
                }
            }
        }
        Ok(Self { m1, m2, structure: Structure::Custom { atoms }, group_sizes: Vec::new() })
    }

    /// Rebuilds a dictionary from its structure description.
    pub fn from_structure(m1: usize, m2: usize, structure: Structure) -> Result<Self> {
        match structure {
            Structure::GroupEffects { assignment, n_groups } => {
                if assignment.len() != m1 {
                    return Err(Error::Length { expected: m1, got: assignment.len() });
                }
                let dict = Self::group_effects(m2, assignment)?;
                if n_groups != 0 && dict.n_groups() != n_groups {
                    return Err(Error::Dictionary(format!(
                        "declared {n_groups} groups but assignment uses {}",
                        dict.n_groups()
                    )));
                }
                Ok(dict)
            }
            Structure::RowColumn => Self::row_column(m1, m2),
            Structure::Corruptions { cells } => Self::corruptions(m1, m2, cells),
            Structure::Custom { atoms } => Self::custom(m1, m2, atoms),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.m1, self.m2)
    }

    pub fn structure(&self) -> &Structure {
        &self.structure
    }

    pub fn n_atoms(&self) -> usize {
        match &self.structure {
            Structure::GroupEffects { n_groups, .. } => n_groups * self.m2,
            Structure::RowColumn => self.m1 + self.m2,
            Structure::Corruptions { cells } => cells.len(),
            Structure::Custom { atoms } => atoms.len(),
        }
    }

    /// Number of groups, or zero for non-group structures.
    pub fn n_groups(&self) -> usize {
        self.group_sizes.len()
    }

    pub fn group_sizes(&self) -> &[usize] {
        &self.group_sizes
    }

    fn check_alpha(&self, alpha: &Vector) -> Result<()> {
        if alpha.len() != self.n_atoms() {
            return Err(Error::Length { expected: self.n_atoms(), got: alpha.len() });
        }
        Ok(())
    }

    fn check_matrix(&self, g: &Matrix) -> Result<()> {
        if g.shape() != self.shape() {
            return Err(Error::Shape { expected: self.shape(), got: g.shape() });
        }
        Ok(())
    }

    /// `f_U(alpha) = sum_k alpha_k U^k`.
    pub fn apply(&self, alpha: &Vector) -> Result<Matrix> {
        let mut out = Matrix::zeros(self.m1, self.m2);
        self.apply_add(alpha, 1.0, &mut out)?;
        Ok(out)
    }

    /// `out += scale * f_U(alpha)`.
    pub fn apply_add(&self, alpha: &Vector, scale: f64, out: &mut Matrix) -> Result<()> {
        self.check_alpha(alpha)?;
        self.check_matrix(out)?;
        match &self.structure {
            Structure::GroupEffects { assignment, n_groups } => {
                for q in 0..self.m2 {
                    let mut col = out.column_mut(q);
                    for (i, &h) in assignment.iter().enumerate() {
                        col[i] += scale * alpha[h + q * n_groups];
                    }
                }
            }
            Structure::RowColumn => {
                for j in 0..self.m2 {
                    let cj = alpha[self.m1 + j];
                    for i in 0..self.m1 {
                        out[(i, j)] += scale * (alpha[i] + cj);
                    }
                }
            }
            Structure::Corruptions { cells } => {
                for (k, &(i, j)) in cells.iter().enumerate() {
                    out[(i, j)] += scale * alpha[k];
                }
            }
            Structure::Custom { atoms } => {
                for (k, atom) in atoms.iter().enumerate() {
                    for &(i, j, v) in atom {
                        out[(i, j)] += scale * alpha[k] * v;
                    }
                }
            }
        }
        Ok(())
    }

    /// `k`-th output is `<U^k, G>`.
    pub fn adjoint(&self, g: &Matrix) -> Result<Vector> {
        self.check_matrix(g)?;
        let mut out = Vector::zeros(self.n_atoms());
        match &self.structure {
            Structure::GroupEffects { assignment, n_groups } => {
                for q in 0..self.m2 {
                    let col = g.column(q);
                    for (i, &h) in assignment.iter().enumerate() {
                        out[h + q * n_groups] += col[i];
                    }
                }
            }
            Structure::RowColumn => {
                for j in 0..self.m2 {
                    for i in 0..self.m1 {
                        let v = g[(i, j)];
                        out[i] += v;
                        out[self.m1 + j] += v;
                    }
                }
            }
            Structure::Corruptions { cells } => {
                for (k, &(i, j)) in cells.iter().enumerate() {
                    out[k] = g[(i, j)];
                }
            }
            Structure::Custom { atoms } => {
                for (k, atom) in atoms.iter().enumerate() {
                    out[k] = atom.iter().map(|&(i, j, v)| v * g[(i, j)]).sum();
                }
            }
        }
        Ok(out)
    }

    /// `sum_ij W_ij (U^k_ij)^2` for every atom `k`.
    pub fn atom_weighted_norms(&self, w: &Matrix) -> Result<Vector> {
        match &self.structure {
            // indicator atoms: U^2 = U
            Structure::Custom { atoms } => {
                self.check_matrix(w)?;
                Ok(Vector::from_iterator(
                    atoms.len(),
                    atoms.iter().map(|atom| atom.iter().map(|&(i, j, v)| w[(i, j)] * v * v).sum()),
                ))
            }
            _ => self.adjoint(w),
        }
    }

    /// `sum_ij W_ij (f_U(alpha)_ij)^2`.
    pub fn gram_quadratic(&self, alpha: &Vector, w: &Matrix) -> Result<f64> {
        self.check_alpha(alpha)?;
        self.check_matrix(w)?;
        match &self.structure {
            // disjoint atoms: the quadratic form is diagonal
            Structure::GroupEffects { .. } | Structure::Corruptions { .. } => {
                let norms = self.atom_weighted_norms(w)?;
                Ok(alpha.iter().zip(norms.iter()).map(|(a, n)| a * a * n).sum())
            }
            _ => {
                let f = self.apply(alpha)?;
                Ok(f.iter().zip(w.iter()).map(|(fv, wv)| wv * fv * fv).sum())
            }
        }
    }

    /// Calls `visit(i, j, value)` on every nonzero entry of atom `k`.
    pub fn for_each_entry(&self, k: usize, mut visit: impl FnMut(usize, usize, f64)) {
        match &self.structure {
            Structure::GroupEffects { assignment, n_groups } => {
                let (h, q) = (k % n_groups, k / n_groups);
                for (i, &g) in assignment.iter().enumerate() {
                    if g == h {
                        visit(i, q, 1.0);
                    }
                }
            }
            Structure::RowColumn => {
                if k < self.m1 {
                    for j in 0..self.m2 {
                        visit(k, j, 1.0);
                    }
                } else {
                    for i in 0..self.m1 {
                        visit(i, k - self.m1, 1.0);
                    }
                }
            }
            Structure::Corruptions { cells } => {
                let (i, j) = cells[k];
                visit(i, j, 1.0);
            }
            Structure::Custom { atoms } => {
                for &(i, j, v) in &atoms[k] {
                    visit(i, j, v);
                }
            }
        }
    }

    /// Per-atom row lists, for callers that sweep atoms repeatedly.
    pub(crate) fn atom_supports(&self) -> Vec<Vec<(usize, usize, f64)>> {
        match &self.structure {
            Structure::Custom { atoms } => atoms.clone(),
            Structure::GroupEffects { assignment, n_groups } => {
                let mut rows_of: Vec<Vec<usize>> = vec![Vec::new(); *n_groups];
                for (i, &h) in assignment.iter().enumerate() {
                    rows_of[h].push(i);
                }
                (0..self.n_atoms())
                    .map(|k| rows_of[k % n_groups].iter().map(|&i| (i, k / n_groups, 1.0)).collect())
                    .collect()
            }
            _ => (0..self.n_atoms())
                .map(|k| {
                    let mut entries = Vec::new();
                    self.for_each_entry(k, |i, j, v| entries.push((i, j, v)));
                    entries
                })
                .collect(),
        }
    }

    /// Dense copy of atom `k`. Test and diagnostic use only.
    pub fn dense_atom(&self, k: usize) -> Matrix {
        let mut out = Matrix::zeros(self.m1, self.m2);
        self.for_each_entry(k, |i, j, v| out[(i, j)] = v);
        out
    }

    /// Structural constants, with the default cap on custom dictionaries.
    pub fn metadata(&self) -> Result<DictionaryMetadata> {
        self.metadata_with_cap(DEFAULT_METADATA_CAP)
    }

    pub fn metadata_with_cap(&self, cap: usize) -> Result<DictionaryMetadata> {
        let (m1, m2) = (self.m1 as f64, self.m2 as f64);
        match &self.structure {
            Structure::GroupEffects { .. } => {
                let max = *self.group_sizes.iter().max().unwrap_or(&0) as f64;
                let min = *self.group_sizes.iter().min().unwrap_or(&0) as f64;
                Ok(DictionaryMetadata { u_max: max, u_overlap: 1.0, kappa_sq: min, tau: 0.0 })
            }
            Structure::RowColumn => Ok(DictionaryMetadata {
                u_max: m1.max(m2),
                u_overlap: 2.0,
                kappa_sq: m1.min(m2),
                // a row atom meets every column atom in exactly one cell
                tau: m1.max(m2),
            }),
            Structure::Corruptions { .. } => {
                Ok(DictionaryMetadata { u_max: 1.0, u_overlap: 1.0, kappa_sq: 1.0, tau: 0.0 })
            }
            Structure::Custom { atoms } => {
                if atoms.len() > cap {
                    return Err(Error::Dictionary(format!(
                        "{} atoms exceed the metadata cap {cap}",
                        atoms.len()
                    )));
                }
                self.custom_metadata(atoms)
            }
        }
    }

    fn custom_metadata(&self, atoms: &[Vec<(usize, usize, f64)>]) -> Result<DictionaryMetadata> {
        let n = atoms.len();
        let u_max = atoms
            .iter()
            .map(|a| a.iter().map(|e| e.2.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let mut overlap = Matrix::zeros(self.m1, self.m2);
        let mut by_cell: BTreeMap<(usize, usize), Vec<(usize, f64)>> = BTreeMap::new();
        for (k, atom) in atoms.iter().enumerate() {
            for &(i, j, v) in atom {
                overlap[(i, j)] += v.abs();
                by_cell.entry((i, j)).or_default().push((k, v));
            }
        }
        let mut gram = Matrix::zeros(n, n);
        for entries in by_cell.values() {
            for &(k, a) in entries {
                for &(l, b) in entries {
                    gram[(k, l)] += a * b;
                }
            }
        }
        let tau = (0..n)
            .map(|k| (0..n).filter(|&l| l != k).map(|l| gram[(k, l)].abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let kappa_sq = if n == 0 {
            0.0
        } else {
            gram.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min).max(0.0)
        };
        Ok(DictionaryMetadata { u_max, u_overlap: overlap.max(), kappa_sq, tau })
    }
}
