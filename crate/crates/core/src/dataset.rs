//! The `(Y, D, X)` triple, CSV ingestion and the fold machinery shared by
//! every estimator.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;

use crate::error::{invalid_arg, invalid_data, CateError, Result};
use crate::rng;

/// Outcome, binary treatment and covariates, aligned by row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Vec<f64>,
    d: Vec<u8>,
    x: Array2<f64>,
    feature_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        y: Vec<f64>,
        d: Vec<u8>,
        x: Array2<f64>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        Self::build(y, d, x, feature_names, true)
    }

    /// Like [`Dataset::new`] but accepts data where one arm is empty, e.g. a
    /// simulation with treatment switched off. Estimators still reject it.
    pub fn new_allow_single_arm(
        y: Vec<f64>,
        d: Vec<u8>,
        x: Array2<f64>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        Self::build(y, d, x, feature_names, false)
    }

    fn build(
        y: Vec<f64>,
        d: Vec<u8>,
        x: Array2<f64>,
        feature_names: Vec<String>,
        both_arms: bool,
    ) -> Result<Self> {
        let n = y.len();
        if n < 2 {
            return Err(invalid_data(format!(
                "need at least 2 observations, got {n}"
            )));
        }
        if d.len() != n || x.nrows() != n {
            return Err(invalid_data(format!(
                "misaligned inputs: y has {n} rows, d has {}, x has {}",
                d.len(),
                x.nrows()
            )));
        }
        if x.ncols() == 0 {
            return Err(invalid_data("need at least one covariate"));
        }
        if feature_names.len() != x.ncols() {
            return Err(invalid_data(format!(
                "{} feature names for {} covariate columns",
                feature_names.len(),
                x.ncols()
            )));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(invalid_data(format!("non-finite outcome at row {}", i + 1)));
        }
        if let Some(i) = d.iter().position(|&v| v > 1) {
            return Err(invalid_data(format!(
                "treatment not binary at row {}",
                i + 1
            )));
        }
        if let Some(((i, j), _)) = x.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(invalid_data(format!(
                "non-finite covariate '{}' at row {}",
                feature_names[j],
                i + 1
            )));
        }
        let treated = d.iter().filter(|&&v| v == 1).count();
        if both_arms && (treated == 0 || treated == n) {
            return Err(invalid_data("treatment arm empty"));
        }
        Ok(Dataset {
            y,
            d,
            x,
            feature_names,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn d(&self) -> &[u8] {
        &self.d
    }

    /// Treatment as a float vector, for regressions of `D` on `X`.
    pub fn d_f64(&self) -> Vec<f64> {
        self.d.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn x(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn n_treated(&self) -> usize {
        self.d.iter().filter(|&&v| v == 1).count()
    }

    /// Rows of `indices` whose treatment equals `arm`.
    pub fn arm_members(&self, indices: &[usize], arm: u8) -> Vec<usize> {
        indices
            .iter()
            .copied()
            .filter(|&i| self.d[i] == arm)
            .collect()
    }

    /// Copy of the covariate rows at `indices` (repeats allowed).
    pub fn x_rows(&self, indices: &[usize]) -> Array2<f64> {
        self.x.select(Axis(0), indices)
    }

    pub fn y_rows(&self, indices: &[usize]) -> Vec<f64> {
        indices.iter().map(|&i| self.y[i]).collect()
    }

    /// Dataset restricted to `indices` (repeats allowed); fails if an arm is lost.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Dataset::new(
            self.y_rows(indices),
            indices.iter().map(|&i| self.d[i]).collect(),
            self.x_rows(indices),
            self.feature_names.clone(),
        )
    }
}

/// Random balanced partition of `0..n` into `k` folds.
///
/// Folds are numbered `0..k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    assignment: Vec<usize>,
    k: usize,
    seed: u64,
}

/// Training complement and held-out estimation fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainEstimateSplit {
    pub train_indices: Vec<usize>,
    pub estimate_indices: Vec<usize>,
}

/// Shuffle `0..n` with a seeded RNG and deal round-robin into `k` folds.
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 || k > n {
        return Err(invalid_arg(format!(
            "fold count must satisfy 2 <= k <= n, got k={k}, n={n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng_from(seed));
    let mut assignment = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        assignment[i] = pos % k;
    }
    Ok(FoldPlan {
        assignment,
        k,
        seed,
    })
}

impl FoldPlan {
    /// Build a plan from an explicit assignment; every fold must be non-empty.
    pub fn from_assignment(assignment: Vec<usize>, k: usize) -> Result<Self> {
        if k < 2 || k > assignment.len() {
            return Err(invalid_arg(format!("invalid fold count {k}")));
        }
        let mut seen = vec![false; k];
        for &f in &assignment {
            if f >= k {
                return Err(invalid_arg(format!("fold label {f} out of range 0..{k}")));
            }
            seen[f] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(invalid_arg("every fold must be non-empty"));
        }
        Ok(FoldPlan {
            assignment,
            k,
            seed: 0,
        })
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn members(&self, fold: usize) -> Vec<usize> {
        (0..self.n())
            .filter(|&i| self.assignment[i] == fold)
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignment {
            sizes[f] += 1;
        }
        sizes
    }

    pub fn split_for_fold(&self, fold: usize) -> Result<TrainEstimateSplit> {
        if fold >= self.k {
            return Err(invalid_arg(format!(
                "fold {fold} out of range 0..{}",
                self.k
            )));
        }
        let (estimate_indices, train_indices) =
            (0..self.n()).partition(|&i| self.assignment[i] == fold);
        Ok(TrainEstimateSplit {
            train_indices,
            estimate_indices,
        })
    }

    /// All `k` splits in fold order.
    pub fn splits(&self) -> Vec<TrainEstimateSplit> {
        (0..self.k)
            .map(|f| self.split_for_fold(f).expect("fold in range"))
            .collect()
    }
}

/// Options for [`load_csv_with`].
#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    pub outcome_col: String,
    pub treatment_col: String,
    /// Categorical columns expanded into one 0/1 dummy per distinct value.
    pub one_hot: Vec<String>,
}

/// A CSV file held as header plus string cells.
#[derive(Debug, Clone)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| invalid_data(format!("missing column '{name}'")))
    }

    /// Parse a whole column as floats. Rows are reported 1-based (header excluded).
    pub fn column_f64(&self, name: &str) -> Result<Vec<f64>> {
        let j = self.column_index(name)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(i, row)| parse_cell(&row[j], i + 1, name))
            .collect()
    }

    pub fn column_str(&self, name: &str) -> Result<Vec<String>> {
        let j = self.column_index(name)?;
        Ok(self.rows.iter().map(|r| r[j].clone()).collect())
    }
}

fn parse_cell(cell: &str, row: usize, column: &str) -> Result<f64> {
    let t = cell.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan") {
        return Err(CateError::Parse {
            row,
            column: column.to_string(),
            message: "missing value".into(),
        });
    }
    match t.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) => Err(CateError::Parse {
            row,
            column: column.to_string(),
            message: format!("non-finite value '{t}'"),
        }),
        Err(_) => Err(CateError::Parse {
            row,
            column: column.to_string(),
            message: format!("non-numeric value '{t}'"),
        }),
    }
}

pub fn read_table(path: impl AsRef<Path>) -> Result<Table> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CateError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let headers: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
        return Err(invalid_data(format!(
            "{}: missing header row",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        rows.push(record.iter().map(str::to_string).collect());
    }
    Ok(Table { headers, rows })
}

pub fn load_csv(path: impl AsRef<Path>, outcome_col: &str, treatment_col: &str) -> Result<Dataset> {
    load_csv_with(
        path,
        &LoadOptions {
            outcome_col: outcome_col.to_string(),
            treatment_col: treatment_col.to_string(),
            one_hot: Vec::new(),
        },
    )
}

pub fn load_csv_with(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<Dataset> {
    let table = read_table(path)?;
    table_to_dataset(&table, opts)
}

pub fn table_to_dataset(table: &Table, opts: &LoadOptions) -> Result<Dataset> {
    let y = table.column_f64(&opts.outcome_col)?;
    let d_raw = table.column_f64(&opts.treatment_col)?;
    let mut d = Vec::with_capacity(d_raw.len());
    for (i, v) in d_raw.iter().enumerate() {
        if *v == 0.0 {
            d.push(0);
        } else if *v == 1.0 {
            d.push(1);
        } else {
            return Err(invalid_data(format!(
                "treatment not binary at row {}",
                i + 1
            )));
        }
    }
    for name in &opts.one_hot {
        table.column_index(name)?;
    }

    let n = table.rows.len();
    let mut names = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for (j, header) in table.headers.iter().enumerate() {
        if *header == opts.outcome_col || *header == opts.treatment_col {
            continue;
        }
        if opts.one_hot.contains(header) {
            let levels: BTreeSet<&str> = table.rows.iter().map(|r| r[j].trim()).collect();
            for level in levels {
                names.push(format!("{header}={level}"));
                columns.push(
                    table
                        .rows
                        .iter()
                        .map(|r| if r[j].trim() == level { 1.0 } else { 0.0 })
                        .collect(),
                );
            }
        } else {
            names.push(header.clone());
            columns.push(
                table
                    .rows
                    .iter()
                    .enumerate()
                    .map(|(i, r)| parse_cell(&r[j], i + 1, header))
                    .collect::<Result<_>>()?,
            );
        }
    }
    if columns.is_empty() {
        return Err(invalid_data("no covariate columns"));
    }
    let p = columns.len();
    let x = Array2::from_shape_fn((n, p), |(i, j)| columns[j][i]);
    Dataset::new(y, d, x, names)
}

/// Fixed float format used for every numeric output: 17 significant digits.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write `y`, `d` and the covariates under the given column names.
pub fn write_csv(
    data: &Dataset,
    path: impl AsRef<Path>,
    outcome_col: &str,
    treatment_col: &str,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    out.push_str(outcome_col);
    out.push(',');
    out.push_str(treatment_col);
    for name in data.feature_names() {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for i in 0..data.n() {
        out.push_str(&format_float(data.y[i]));
        out.push(',');
        out.push_str(if data.d[i] == 1 { "1" } else { "0" });
        for v in data.x.row(i) {
            out.push(',');
            out.push_str(&format_float(*v));
        }
        out.push('\n');
    }
    write_string(path, &out)
}

pub(crate) fn write_string(path: &Path, contents: &str) -> Result<()> {
    let mut f = File::create(path).map_err(|e| CateError::io(path, e))?;
    f.write_all(contents.as_bytes())
        .map_err(|e| CateError::io(path, e))
}
