//! Tabular datasets: CSV ingestion, manifests, split generation,
//! standardization, a synthetic classification set and input corruptors.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ensemble::Task;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Held-out share of every split.
pub const TEST_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// `[N, Q]`
    pub x: Tensor,
    /// `[N, K]`; class labels are stored as `[N, 1]` integral values.
    pub y: Tensor,
    pub task: Task,
    pub feature_names: Vec<String>,
    pub target_names: Vec<String>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, x: Tensor, y: Tensor, task: Task) -> Result<Self> {
        if x.rank() != 2 || y.rank() != 2 || x.dim(0) != y.dim(0) {
            return Err(Error::dim("dataset rows", x.shape(), y.shape()));
        }
        if !x.all_finite() || !y.all_finite() {
            return Err(Error::Value(
                "dataset contains NaN or infinite values".into(),
            ));
        }
        let feature_names = (0..x.dim(1)).map(|j| format!("x{j}")).collect();
        let target_names = (0..y.dim(1)).map(|j| format!("y{j}")).collect();
        Ok(Dataset {
            name: name.into(),
            x,
            y,
            task,
            feature_names,
            target_names,
        })
    }

    pub fn len(&self) -> usize {
        self.x.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_features(&self) -> usize {
        self.x.dim(1)
    }

    pub fn n_targets(&self) -> usize {
        self.y.dim(1)
    }

    /// Rows in the given order (repeats allowed).
    pub fn subset(&self, rows: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            name: self.name.clone(),
            x: self.x.select_leading(rows)?,
            y: self.y.select_leading(rows)?,
            task: self.task,
            feature_names: self.feature_names.clone(),
            target_names: self.target_names.clone(),
        })
    }

    /// Class labels of a classification set.
    pub fn labels(&self) -> Result<Vec<usize>> {
        labels_from(&self.y)
    }
}

pub(crate) fn labels_from(y: &Tensor) -> Result<Vec<usize>> {
    if y.rank() != 2 || y.dim(1) != 1 {
        return Err(Error::dim("label column", y.shape(), &[y.dim(0), 1]));
    }
    y.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < usize::MAX as f64 {
                Ok(v as usize)
            } else {
                Err(Error::Value(format!("{v} is not a class label")))
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Delimiter {
    Char(char),
    /// Runs of spaces or tabs.
    Whitespace,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetColumn {
    Last,
    Index(usize),
    Name(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvOptions {
    pub delimiter: Delimiter,
    pub has_header: bool,
    pub target: TargetColumn,
}

impl Default for CsvOptions {
    fn default() -> Self {
        CsvOptions {
            delimiter: Delimiter::Char(','),
            has_header: true,
            target: TargetColumn::Last,
        }
    }
}

/// Reads a numeric table; one column becomes the regression target.
pub fn load_csv(path: &Path, opts: &CsvOptions) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let records = read_records(path, &opts.delimiter)?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut header: Option<Vec<String>> = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, fields) in records {
        if opts.has_header && header.is_none() {
            header = Some(fields);
            continue;
        }
        let width = header.as_ref().map(Vec::len).or(rows.first().map(Vec::len));
        if let Some(w) = width {
            if fields.len() != w {
                return Err(parse_err(
                    line,
                    format!("expected {w} fields, found {}", fields.len()),
                ));
            }
        }
        let mut row = Vec::with_capacity(fields.len());
        for (j, f) in fields.iter().enumerate() {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(line, format!("column {}: `{f}` is not a number", j + 1)))?;
            if !v.is_finite() {
                return Err(parse_err(
                    line,
                    format!("column {}: non-finite value", j + 1),
                ));
            }
            row.push(v);
        }
        rows.push(row);
    }

    let width = header
        .as_ref()
        .map(Vec::len)
        .or(rows.first().map(Vec::len))
        .ok_or_else(|| Error::Degenerate(format!("{} has no rows", path.display())))?;
    if width < 2 {
        return Err(Error::Degenerate(
            "need at least one feature and a target".into(),
        ));
    }
    let target = match &opts.target {
        TargetColumn::Last => width - 1,
        TargetColumn::Index(t) if *t < width => *t,
        TargetColumn::Index(t) => {
            return Err(Error::Index {
                index: *t,
                limit: width,
            })
        }
        TargetColumn::Name(n) => header
            .as_ref()
            .and_then(|h| h.iter().position(|c| c == n))
            .ok_or_else(|| Error::Config(format!("no column named `{n}`")))?,
    };
    let names = header.unwrap_or_else(|| (0..width).map(|j| format!("c{j}")).collect());

    let n = rows.len();
    let mut x = Vec::with_capacity(n * (width - 1));
    let mut y = Vec::with_capacity(n);
    for row in &rows {
        for (j, &v) in row.iter().enumerate() {
            if j == target {
                y.push(v);
            } else {
                x.push(v);
            }
        }
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut ds = Dataset::new(
        name,
        Tensor::new(vec![n, width - 1], x)?,
        Tensor::new(vec![n, 1], y)?,
        Task::Regression,
    )?;
    ds.target_names = vec![names[target].clone()];
    ds.feature_names = names
        .into_iter()
        .enumerate()
        .filter(|(j, _)| *j != target)
        .map(|(_, s)| s)
        .collect();
    Ok(ds)
}

/// Non-empty records with their 1-based line numbers.
fn read_records(path: &Path, delim: &Delimiter) -> Result<Vec<(usize, Vec<String>)>> {
    match delim {
        Delimiter::Whitespace => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Ok(text
                .lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(i, l)| (i + 1, l.split_whitespace().map(str::to_string).collect()))
                .collect())
        }
        Delimiter::Char(c) => {
            let byte = u8::try_from(*c)
                .ok()
                .filter(u8::is_ascii)
                .ok_or_else(|| Error::Config(format!("delimiter `{c}` is not ASCII")))?;
            let mut reader = csv::ReaderBuilder::new()
                .delimiter(byte)
                .has_headers(false)
                .flexible(true)
                .trim(csv::Trim::All)
                .from_path(path)
                .map_err(|e| Error::Serde(e.to_string()))?;
            let mut out = Vec::new();
            for rec in reader.records() {
                let rec = rec.map_err(|e| {
                    let line = e.position().map_or(0, |p| p.line() as usize);
                    Error::Parse {
                        path: path.to_path_buf(),
                        line,
                        message: e.to_string(),
                    }
                })?;
                if rec.iter().all(str::is_empty) {
                    continue;
                }
                let line = rec.position().map_or(0, |p| p.line() as usize);
                out.push((line, rec.iter().map(str::to_string).collect()));
            }
            Ok(out)
        }
    }
}

/// Provenance record written next to experiment outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub path: PathBuf,
    pub sha256: String,
    pub n: usize,
    pub q: usize,
    pub features: Vec<String>,
    pub targets: Vec<String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn manifest(path: &Path, ds: &Dataset) -> Result<DatasetManifest> {
    Ok(DatasetManifest {
        name: ds.name.clone(),
        path: path.to_path_buf(),
        sha256: sha256_file(path)?,
        n: ds.len(),
        q: ds.n_features(),
        features: ds.feature_names.clone(),
        targets: ds.target_names.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Split count used for a benchmark set of the given name.
pub fn default_fold_count(name: &str) -> usize {
    let n = name.to_ascii_lowercase();
    if n.contains("year") {
        1
    } else if n.contains("protein") {
        5
    } else {
        20
    }
}

/// Independent seeded 90/10 splits of `0..n`. Index lists are sorted.
pub fn make_folds(n: usize, n_folds: usize, seed: u64) -> Result<Vec<Fold>> {
    if n_folds < 1 {
        return Err(Error::Value("need at least one fold".into()));
    }
    if n < 2 {
        return Err(Error::Degenerate(format!("cannot split {n} rows")));
    }
    let n_test = ((n as f64 * TEST_FRACTION).round() as usize).clamp(1, n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut folds = Vec::with_capacity(n_folds);
    for _ in 0..n_folds {
        idx.sort_unstable();
        idx.shuffle(&mut rng);
        let mut test = idx[..n_test].to_vec();
        let mut train = idx[n_test..].to_vec();
        test.sort_unstable();
        train.sort_unstable();
        folds.push(Fold { train, test });
    }
    Ok(folds)
}

/// Per-column affine maps fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
}

/// Column means and population standard deviations; a zero deviation is
/// replaced by 1 so the column is only centered.
fn column_stats(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, f) = (t.dim(0), t.dim(1));
    let mut mean = vec![0.0; f];
    for i in 0..n {
        for (j, m) in mean.iter_mut().enumerate() {
            *m += t.row(i)[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
    let mut var = vec![0.0; f];
    for i in 0..n {
        for j in 0..f {
            let d = t.row(i)[j] - mean[j];
            var[j] += d * d;
        }
    }
    let std = var
        .into_iter()
        .map(|v| {
            let s = (v / n.max(1) as f64).sqrt();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

fn affine(t: &Tensor, shift: &[f64], scale: &[f64], forward: bool) -> Tensor {
    let mut out = t.clone();
    let f = shift.len();
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        let j = k % f;
        *v = if forward {
            (*v - shift[j]) / scale[j]
        } else {
            *v * scale[j] + shift[j]
        };
    }
    out
}

impl Standardizer {
    pub fn fit(train: &Dataset) -> Self {
        let (x_mean, x_std) = column_stats(&train.x);
        let (y_mean, y_std) = match train.task {
            Task::Regression => column_stats(&train.y),
            Task::Classification => (vec![0.0; train.n_targets()], vec![1.0; train.n_targets()]),
        };
        Standardizer {
            x_mean,
            x_std,
            y_mean,
            y_std,
        }
    }

    pub fn transform(&self, ds: &Dataset) -> Dataset {
        let mut out = ds.clone();
        out.x = affine(&ds.x, &self.x_mean, &self.x_std, true);
        out.y = affine(&ds.y, &self.y_mean, &self.y_std, true);
        out
    }

    pub fn destandardize_target(&self, pred: &Tensor) -> Tensor {
        affine(pred, &self.y_mean, &self.y_std, false)
    }

    pub fn destandardize_features(&self, x: &Tensor) -> Tensor {
        affine(x, &self.x_mean, &self.x_std, false)
    }
}

/// Fits on `train`, transforms both splits.
pub fn standardize(train: &Dataset, test: &Dataset) -> (Dataset, Dataset, Standardizer) {
    let s = Standardizer::fit(train);
    (s.transform(train), s.transform(test), s)
}

/// Feature count of [`synth_classification`].
pub const BLOB_FEATURES: usize = 8;
const BLOB_OFFSET: f64 = 1.5;

/// Two unit-variance Gaussian blobs in eight dimensions with alternating
/// labels. Class 1 is centered at `(+a, .., +a, -a, .., -a)`, class 0 at the
/// negation, so a column permutation moves points off both centers.
pub fn synth_classification(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut x = Vec::with_capacity(n * BLOB_FEATURES);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let sign = if label == 1 { 1.0 } else { -1.0 };
        for j in 0..BLOB_FEATURES {
            let half = if j < BLOB_FEATURES / 2 { 1.0 } else { -1.0 };
            x.push(sign * half * BLOB_OFFSET + normal.sample(&mut rng));
        }
        y.push(label as f64);
    }
    Dataset::new(
        "blobs",
        Tensor::new(vec![n, BLOB_FEATURES], x).expect("shape"),
        Tensor::new(vec![n, 1], y).expect("shape"),
        Task::Classification,
    )
    .expect("finite")
}

/// Adds `N(0, (sigma_scale * std_j)^2)` noise to column `j`.
pub fn corrupt_gaussian(x: &Tensor, sigma_scale: f64, seed: u64) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::dim("corrupt_gaussian input", x.shape(), &[0, 0]));
    }
    if !(sigma_scale >= 0.0) {
        return Err(Error::Value("sigma_scale must be nonnegative".into()));
    }
    if sigma_scale == 0.0 {
        return Ok(x.clone());
    }
    let (_, std) = column_stats(x);
    let f = x.dim(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = x.clone();
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        *v += sigma_scale * std[k % f] * normal.sample(&mut rng);
    }
    Ok(out)
}

/// Applies one seeded column permutation to every row. The identity is
/// never returned for two or more columns.
pub fn corrupt_permute_features(x: &Tensor, seed: u64) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::dim(
            "corrupt_permute_features input",
            x.shape(),
            &[0, 0],
        ));
    }
    let f = x.dim(1);
    let mut perm: Vec<usize> = (0..f).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    if f > 1 && perm.iter().enumerate().all(|(i, &p)| i == p) {
        perm.rotate_left(1);
    }
    let mut out = x.clone();
    for i in 0..x.dim(0) {
        let src = x.row(i);
        for (dst, &p) in out.row_mut(i).iter_mut().zip(&perm) {
            *dst = src[p];
        }
    }
    Ok(out)
}
