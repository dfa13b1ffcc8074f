//! CSV frames, schema sidecars, dictionary descriptors and matrix output.
//!
//! Frames are comma-separated with a header row. `NA` (any case) and empty
//! cells are missing. Binary columns accept `0`/`1`, `Yes`/`No` and
//! `TRUE`/`FALSE` (any case); count columns need nonnegative integers.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use mimi_core::{ColumnType, Dictionary, Link, Matrix, MixedDataFrame, Structure, Vector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One schema entry: a bare type name or a type with a scale override.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColumnSpec {
    Bare(ColumnType),
    Full {
        #[serde(rename = "type")]
        kind: ColumnType,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigma2: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        a: Option<f64>,
    },
}

impl ColumnSpec {
    pub fn kind(&self) -> ColumnType {
        match *self {
            ColumnSpec::Bare(t) | ColumnSpec::Full { kind: t, .. } => t,
        }
    }

    pub fn link(&self) -> Result<Link> {
        let link = match *self {
            ColumnSpec::Bare(t) => t.default_link(),
            ColumnSpec::Full { kind, sigma2, a } => match kind {
                ColumnType::Numeric if a.is_some() => {
                    return Err(Error::Schema("'a' applies to count columns only".into()))
                }
                ColumnType::Count if sigma2.is_some() => {
                    return Err(Error::Schema("'sigma2' applies to numeric columns only".into()))
                }
                ColumnType::Binary if sigma2.is_some() || a.is_some() => {
                    return Err(Error::Schema("binary columns take no scale".into()))
                }
                ColumnType::Numeric => Link::gaussian(sigma2.unwrap_or(1.0)),
                ColumnType::Count => Link::poisson(a.unwrap_or(1.0)),
                ColumnType::Binary => Link::Bernoulli,
            },
        };
        link.validate()?;
        Ok(link)
    }

    /// Entry describing `link`, bare when the scale is the default.
    pub fn from_link(link: &Link) -> Self {
        match *link {
            Link::Gaussian { sigma2: 1.0 } => ColumnSpec::Bare(ColumnType::Numeric),
            Link::Gaussian { sigma2 } => {
                ColumnSpec::Full { kind: ColumnType::Numeric, sigma2: Some(sigma2), a: None }
            }
            Link::Bernoulli => ColumnSpec::Bare(ColumnType::Binary),
            Link::Poisson { a: 1.0 } => ColumnSpec::Bare(ColumnType::Count),
            Link::Poisson { a } => {
                ColumnSpec::Full { kind: ColumnType::Count, sigma2: None, a: Some(a) }
            }
        }
    }
}

/// Column name to type (and optional scale).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schema {
    pub columns: BTreeMap<String, ColumnSpec>,
}

impl Schema {
    pub fn from_reader(reader: impl Read) -> Result<Self> {
        Ok(serde_json::from_reader(reader)?)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_reader(open(path.as_ref())?)
    }

    /// Schema describing a frame and its links.
    pub fn from_frame(df: &MixedDataFrame, links: &[Link]) -> Result<Self> {
        if links.len() != df.ncols() {
            return Err(Error::Schema(format!(
                "{} links for {} columns",
                links.len(),
                df.ncols()
            )));
        }
        let columns =
            df.names().iter().cloned().zip(links.iter().map(ColumnSpec::from_link)).collect();
        Ok(Self { columns })
    }

    fn spec(&self, name: &str) -> Result<&ColumnSpec> {
        self.columns
            .get(name)
            .ok_or_else(|| Error::Schema(format!("column {name:?} is not in the schema")))
    }

    /// Links of the frame's columns, in column order.
    pub fn links(&self, df: &MixedDataFrame) -> Result<Vec<Link>> {
        df.names()
            .iter()
            .zip(df.types())
            .map(|(name, &t)| {
                let spec = self.spec(name)?;
                if spec.kind() != t {
                    return Err(Error::Schema(format!(
                        "column {name:?} is {} in the frame but {} in the schema",
                        t.as_str(),
                        spec.kind().as_str()
                    )));
                }
                spec.link()
            })
            .collect()
    }

    pub fn to_writer(&self, writer: impl Write) -> Result<()> {
        Ok(serde_json::to_writer_pretty(writer, self)?)
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Shortest text that reads back to `v`; integral values carry no decimals.
pub fn format_number(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{v}")
    } else {
        format!("{v:?}")
    }
}

fn is_missing(token: &str) -> bool {
    token.is_empty() || token.eq_ignore_ascii_case("na")
}

fn binary_word(token: &str) -> Option<f64> {
    ["yes", "true"]
        .iter()
        .any(|w| token.eq_ignore_ascii_case(w))
        .then_some(1.0)
        .or_else(|| ["no", "false"].iter().any(|w| token.eq_ignore_ascii_case(w)).then_some(0.0))
}

fn parse_as(token: &str, kind: ColumnType) -> Option<f64> {
    let number = token.parse::<f64>().ok().filter(|v| v.is_finite());
    match kind {
        ColumnType::Numeric => number,
        ColumnType::Binary => binary_word(token).or(number.filter(|&v| v == 0.0 || v == 1.0)),
        ColumnType::Count => number.filter(|&v| kind.accepts(v)),
    }
}

/// Type of a column from its non-missing tokens.
fn infer(name: &str, tokens: &[(usize, &str)]) -> Result<ColumnType> {
    let words = tokens.iter().filter(|(_, t)| binary_word(t).is_some()).count();
    if words > 0 {
        if let Some(&(row, tok)) = tokens.iter().find(|(_, t)| parse_as(t, ColumnType::Binary).is_none()) {
            return Err(Error::Schema(format!(
                "column {name:?} mixes yes/no values with {tok:?} (row {row})"
            )));
        }
        return Ok(ColumnType::Binary);
    }
    let mut values = Vec::with_capacity(tokens.len());
    for &(row, tok) in tokens {
        match parse_as(tok, ColumnType::Numeric) {
            Some(v) => values.push(v),
            None => {
                return Err(Error::Parse {
                    row,
                    column: name.to_string(),
                    value: tok.to_string(),
                    expected: "a number, a yes/no value or NA (categorical columns with more than two levels are not supported)",
                })
            }
        }
    }
    if !values.is_empty() && values.iter().all(|&v| v == 0.0 || v == 1.0) {
        Ok(ColumnType::Binary)
    } else if !values.is_empty() && values.iter().all(|&v| ColumnType::Count.accepts(v)) {
        Ok(ColumnType::Count)
    } else {
        Ok(ColumnType::Numeric)
    }
}

/// Reads a frame; without a schema, column types are inferred.
pub fn read_csv(reader: impl Read, schema: Option<&Schema>) -> Result<MixedDataFrame> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let names: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if names.is_empty() {
        return Err(Error::Invalid("the header row is empty".into()));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = names.iter().find(|n| !seen.insert(n.as_str())) {
        return Err(Error::Schema(format!("duplicate column name {dup:?}")));
    }
    if let Some(schema) = schema {
        let header: HashSet<&str> = names.iter().map(String::as_str).collect();
        if let Some(extra) = schema.columns.keys().find(|k| !header.contains(k.as_str())) {
            return Err(Error::Schema(format!("schema column {extra:?} is not in the file")));
        }
    }
    let records: Vec<csv::StringRecord> = rdr.records().collect::<std::result::Result<_, _>>()?;
    if records.is_empty() {
        return Err(Error::Invalid("the file has no data rows".into()));
    }
    let m2 = names.len();
    let mut rows = Vec::with_capacity(records.len());
    let mut types = Vec::with_capacity(m2);
    for (j, name) in names.iter().enumerate() {
        let tokens: Vec<(usize, &str)> = records
            .iter()
            .enumerate()
            .map(|(i, r)| (i + 1, r.get(j).unwrap_or("")))
            .filter(|(_, t)| !is_missing(t))
            .collect();
        let kind = match schema {
            Some(s) => s.spec(name)?.kind(),
            None => infer(name, &tokens)?,
        };
        types.push(kind);
    }
    for (i, record) in records.iter().enumerate() {
        if record.len() != m2 {
            return Err(Error::Invalid(format!(
                "row {} has {} fields, expected {m2}",
                i + 1,
                record.len()
            )));
        }
        let mut row = Vec::with_capacity(m2);
        for (j, tok) in record.iter().enumerate() {
            if is_missing(tok) {
                row.push(None);
                continue;
            }
            let v = parse_as(tok, types[j]).ok_or_else(|| Error::Parse {
                row: i + 1,
                column: names[j].clone(),
                value: tok.to_string(),
                expected: match types[j] {
                    ColumnType::Numeric => "a finite number",
                    ColumnType::Binary => "0/1, yes/no or true/false",
                    ColumnType::Count => "a nonnegative integer",
                },
            })?;
            row.push(Some(v));
        }
        rows.push(row);
    }
    Ok(MixedDataFrame::from_rows(names, types, &rows)?)
}

pub fn read_csv_path(path: impl AsRef<Path>, schema: Option<&Schema>) -> Result<MixedDataFrame> {
    read_csv(open(path.as_ref())?, schema)
}

/// Writes a frame with missing cells as `NA`; values use the shortest
/// representation that reads back to the same number.
pub fn write_csv(df: &MixedDataFrame, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(df.names())?;
    let mut record = Vec::with_capacity(df.ncols());
    for i in 0..df.nrows() {
        record.clear();
        for j in 0..df.ncols() {
            record.push(match df.get(i, j) {
                Some(v) => format_number(v),
                None => "NA".to_string(),
            });
        }
        w.write_record(&record)?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))?;
    Ok(())
}

pub fn write_csv_path(df: &MixedDataFrame, path: impl AsRef<Path>) -> Result<()> {
    write_csv(df, create(path.as_ref())?)
}

/// Reads a dictionary descriptor such as `{"type":"groups","assignment":[...]}`
/// and builds it for an `m1 x m2` frame.
pub fn read_dictionary(reader: impl Read, m1: usize, m2: usize) -> Result<Dictionary> {
    let structure: Structure = serde_json::from_reader(reader)?;
    Ok(Dictionary::from_structure(m1, m2, structure)?)
}

pub fn read_dictionary_path(path: impl AsRef<Path>, m1: usize, m2: usize) -> Result<Dictionary> {
    read_dictionary(open(path.as_ref())?, m1, m2)
}

pub fn write_dictionary(dict: &Dictionary, writer: impl Write) -> Result<()> {
    Ok(serde_json::to_writer(writer, dict.structure())?)
}

/// Writes a matrix with a header row of column names.
pub fn write_matrix_csv(m: &Matrix, names: &[String], writer: impl Write) -> Result<()> {
    if names.len() != m.ncols() {
        return Err(Error::Invalid(format!("{} names for {} columns", names.len(), m.ncols())));
    }
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(names)?;
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(|&v| format_number(v)))?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))?;
    Ok(())
}

/// Reads a headed numeric matrix written by [`write_matrix_csv`].
pub fn read_matrix_csv(reader: impl Read) -> Result<(Vec<String>, Matrix)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let names: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut data = Vec::new();
    let mut n = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for (j, tok) in rec.iter().enumerate() {
            data.push(tok.parse::<f64>().map_err(|_| Error::Parse {
                row: i + 1,
                column: names.get(j).cloned().unwrap_or_default(),
                value: tok.to_string(),
                expected: "a number",
            })?);
        }
        n += 1;
    }
    Ok((names.clone(), Matrix::from_row_slice(n, names.len(), &data)))
}

/// Human-readable labels of the dictionary atoms.
pub fn atom_labels(dict: &Dictionary, names: &[String]) -> Vec<String> {
    let name = |j: usize| names.get(j).cloned().unwrap_or_else(|| format!("V{}", j + 1));
    match dict.structure() {
        Structure::GroupEffects { .. } => {
            let h = dict.n_groups();
            (0..dict.n_atoms()).map(|k| format!("group{}:{}", k % h + 1, name(k / h))).collect()
        }
        Structure::RowColumn => {
            let (m1, _) = dict.shape();
            (0..dict.n_atoms())
                .map(|k| if k < m1 { format!("row{}", k + 1) } else { format!("col:{}", name(k - m1)) })
                .collect()
        }
        Structure::Corruptions { cells } => {
            cells.iter().map(|&(i, j)| format!("cell{}:{}", i + 1, name(j))).collect()
        }
        Structure::Custom { .. } => (0..dict.n_atoms()).map(|k| format!("atom{}", k + 1)).collect(),
    }
}

/// Writes `atom,value` rows for a coefficient vector.
pub fn write_alpha_csv(alpha: &Vector, labels: &[String], writer: impl Write) -> Result<()> {
    if labels.len() != alpha.len() {
        return Err(Error::Invalid(format!("{} labels for {} atoms", labels.len(), alpha.len())));
    }
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["atom", "value"])?;
    for (label, v) in labels.iter().zip(alpha.iter()) {
        w.write_record([label.as_str(), &format_number(*v)])?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))?;
    Ok(())
}

pub(crate) fn create_file(path: &Path) -> Result<BufWriter<File>> {
    create(path)
}

pub(crate) fn open_file(path: &Path) -> Result<BufReader<File>> {
    open(path)
}
