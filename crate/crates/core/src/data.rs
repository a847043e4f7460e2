//! Tabular input: CSV loading, stratified splits and feature preprocessing.
//!
//! Numeric columns are z-scored and categorical columns one-hot encoded,
//! numeric block first, each in schema order. Statistics come from the
//! training split only.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qbaf::Case;

/// ChaCha stream used for splitting, so splits do not consume the training stream.
const SPLIT_STREAM: u64 = 1;

/// Column layout of a CSV file. Columns not named here are ignored.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub label_column: String,
    pub numeric_columns: Vec<String>,
    pub categorical_columns: Vec<String>,
    /// Ordered class names; position defines the class index. Inferred
    /// (sorted) from the training file when left empty.
    pub label_vocabulary: Vec<String>,
}

impl DatasetSchema {
    pub fn validate(&self) -> Result<()> {
        if self.label_column.is_empty() {
            return Err(Error::Config("label_column is required".into()));
        }
        let mut seen = BTreeSet::new();
        for c in self.numeric_columns.iter().chain(&self.categorical_columns) {
            if c == &self.label_column {
                return Err(Error::Config(format!("label column `{c}` is also listed as a feature")));
            }
            if !seen.insert(c) {
                return Err(Error::Config(format!("column `{c}` listed twice")));
            }
        }
        if seen.is_empty() {
            return Err(Error::Config("schema has no feature columns".into()));
        }
        let vocab: BTreeSet<_> = self.label_vocabulary.iter().collect();
        if vocab.len() != self.label_vocabulary.len() {
            return Err(Error::Config("label_vocabulary has duplicates".into()));
        }
        Ok(())
    }

    /// Raw feature count before encoding.
    pub fn raw_width(&self) -> usize {
        self.numeric_columns.len() + self.categorical_columns.len()
    }

    pub fn num_classes(&self) -> usize {
        self.label_vocabulary.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.label_vocabulary.iter().position(|v| v == name)
    }
}

/// One parsed CSV row: numeric values then categorical strings, in schema order.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRow {
    pub numeric: Vec<f64>,
    pub categorical: Vec<String>,
    pub label: Option<String>,
    /// 1-based line number in the source file.
    pub line: usize,
}

impl RawRow {
    pub fn width(&self) -> usize {
        self.numeric.len() + self.categorical.len()
    }
}

/// Reads every data row of a CSV file. The label column is required when
/// `require_label` is set and read when present otherwise.
pub fn read_csv(path: &Path, schema: &DatasetSchema, require_label: bool) -> Result<Vec<RawRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv(file, schema, require_label).map_err(|e| match e {
        Error::Data { row, message } => Error::Data { row, message: format!("{}: {message}", path.display()) },
        other => other,
    })
}

pub fn parse_csv<R: std::io::Read>(input: R, schema: &DatasetSchema, require_label: bool) -> Result<Vec<RawRow>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = reader.headers().map_err(|e| Error::data(Some(1), format!("unreadable header: {e}")))?.clone();
    let column = |name: &str| header.iter().position(|h| h.trim() == name);
    let find = |names: &[String]| -> Result<Vec<usize>> {
        names
            .iter()
            .map(|n| column(n).ok_or_else(|| Error::data(Some(1), format!("missing column `{n}`"))))
            .collect()
    };
    let numeric_idx = find(&schema.numeric_columns)?;
    let categorical_idx = find(&schema.categorical_columns)?;
    let label_idx = column(&schema.label_column);
    if require_label && label_idx.is_none() {
        return Err(Error::data(Some(1), format!("missing label column `{}`", schema.label_column)));
    }

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize);
            Error::data(line, format!("malformed record: {e}"))
        })?;
        let line = record.position().map_or(rows.len() + 2, |p| p.line() as usize);
        let field = |i: usize| record.get(i).map(str::trim).unwrap_or("");
        let mut numeric = Vec::with_capacity(numeric_idx.len());
        for (&i, name) in numeric_idx.iter().zip(&schema.numeric_columns) {
            let v: f64 = field(i)
                .parse()
                .map_err(|_| Error::data(Some(line), format!("column `{name}`: `{}` is not a number", field(i))))?;
            if !v.is_finite() {
                return Err(Error::data(Some(line), format!("column `{name}` is not finite")));
            }
            numeric.push(v);
        }
        let categorical = categorical_idx.iter().map(|&i| field(i).to_string()).collect();
        let label = label_idx.map(|i| field(i).to_string());
        if require_label && label.as_deref().is_none_or(str::is_empty) {
            return Err(Error::data(Some(line), "empty label"));
        }
        rows.push(RawRow { numeric, categorical, label, line });
    }
    Ok(rows)
}

/// z-score and one-hot encoder fitted on the training split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub categories: Vec<Vec<String>>,
    pub fitted: bool,
}

impl Preprocessor {
    /// Population statistics; a constant column gets std 1 so it maps to 0.
    pub fn fit(rows: &[&RawRow]) -> Result<Self> {
        let first = rows.first().ok_or_else(|| Error::data(None, "cannot fit preprocessor on no rows"))?;
        let (p, q) = (first.numeric.len(), first.categorical.len());
        let n = rows.len() as f64;
        let mut means = vec![0.0; p];
        for r in rows {
            for (m, v) in means.iter_mut().zip(&r.numeric) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= n);
        let mut stds = vec![0.0; p];
        for r in rows {
            for ((s, v), m) in stds.iter_mut().zip(&r.numeric).zip(&means) {
                *s += (v - m) * (v - m);
            }
        }
        for s in &mut stds {
            *s = (*s / n).sqrt();
            if *s == 0.0 {
                *s = 1.0;
            }
        }
        let mut categories = vec![BTreeSet::new(); q];
        for r in rows {
            for (set, v) in categories.iter_mut().zip(&r.categorical) {
                set.insert(v.clone());
            }
        }
        Ok(Self { means, stds, categories: categories.into_iter().map(|s| s.into_iter().collect()).collect(), fitted: true })
    }

    pub fn output_width(&self) -> usize {
        self.means.len() + self.categories.iter().map(Vec::len).sum::<usize>()
    }

    pub fn raw_width(&self) -> usize {
        self.means.len() + self.categories.len()
    }

    /// Encodes one raw row. Unseen categories give an all-zero block.
    pub fn transform(&self, row: &RawRow) -> Result<Vec<f64>> {
        self.check_width(row.numeric.len(), row.categorical.len(), row.line)?;
        let mut out = Vec::with_capacity(self.output_width());
        for ((v, m), s) in row.numeric.iter().zip(&self.means).zip(&self.stds) {
            out.push((v - m) / s);
        }
        for (cats, v) in self.categories.iter().zip(&row.categorical) {
            out.extend(cats.iter().map(|c| if c == v { 1.0 } else { 0.0 }));
        }
        Ok(out)
    }

    /// Encodes a purely numeric raw vector (no categorical columns).
    /// Rejects vectors that already have the encoded width.
    pub fn transform_values(&self, values: &[f64]) -> Result<Vec<f64>> {
        if !self.categories.is_empty() {
            return Err(Error::data(None, "schema has categorical columns; use transform"));
        }
        self.check_width(values.len(), 0, 0)?;
        Ok(values.iter().zip(&self.means).zip(&self.stds).map(|((v, m), s)| (v - m) / s).collect())
    }

    fn check_width(&self, numeric: usize, categorical: usize, line: usize) -> Result<()> {
        if !self.fitted {
            return Err(Error::data(None, "preprocessor is not fitted"));
        }
        let row = (line > 0).then_some(line);
        if numeric == self.means.len() && categorical == self.categories.len() {
            return Ok(());
        }
        if numeric + categorical == self.output_width() && self.output_width() != self.raw_width() {
            return Err(Error::data(row, "input already has the preprocessed width; refusing to transform twice"));
        }
        if categorical == 0 && self.categories.is_empty() && numeric == self.means.len() {
            return Ok(());
        }
        Err(Error::data(
            row,
            format!("expected {} numeric and {} categorical values, got {numeric} and {categorical}", self.means.len(), self.categories.len()),
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub test_fraction: f64,
    pub val_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { test_fraction: 0.2, val_fraction: 0.2 }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("test_fraction", self.test_fraction), ("val_fraction", self.val_fraction)] {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {f}")));
            }
        }
        Ok(())
    }
}

/// Largest-remainder allocation of `round(fraction * total)` across groups.
fn allocate(sizes: &[usize], fraction: f64) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let target = (fraction * total as f64).round() as usize;
    let exact: Vec<f64> = sizes.iter().map(|&n| n as f64 * fraction).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut remaining = target.saturating_sub(counts.iter().sum());
    for &g in order.iter().cycle().take(sizes.len() * 2) {
        if remaining == 0 {
            break;
        }
        if counts[g] < sizes[g] {
            counts[g] += 1;
            remaining -= 1;
        }
    }
    counts
}

/// Splits `items` (grouped by `label`) into a held-out part of about
/// `fraction` and the rest, stratified and seeded. Both parts keep input order.
pub fn stratified_split(labels: &[usize], num_classes: usize, fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut groups = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        groups[l].push(i);
    }
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let counts = allocate(&sizes, fraction);
    let mut held = Vec::new();
    for (g, k) in groups.iter_mut().zip(counts) {
        g.shuffle(rng);
        held.extend_from_slice(&g[..k]);
    }
    held.sort_unstable();
    let held_set: BTreeSet<usize> = held.iter().copied().collect();
    let kept = (0..labels.len()).filter(|i| !held_set.contains(i)).collect();
    (kept, held)
}

/// Where each split came from; stored with checkpoints.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub source: PathBuf,
    pub external_test: Option<PathBuf>,
    pub seed: u64,
    pub train_ids: Vec<usize>,
    pub val_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct PreparedData {
    pub schema: DatasetSchema,
    pub preprocessor: Preprocessor,
    pub train: Vec<Case>,
    pub val: Vec<Case>,
    pub test: Vec<Case>,
    pub split: SplitInfo,
}

fn label_indices(rows: &[RawRow], schema: &DatasetSchema) -> Result<Vec<usize>> {
    rows.iter()
        .map(|r| {
            let name = r.label.as_deref().unwrap_or("");
            schema
                .class_index(name)
                .ok_or_else(|| Error::data(Some(r.line), format!("unknown label `{name}`")))
        })
        .collect()
}

/// Encodes rows into cases; `id` is the row's position in its file.
pub fn encode(rows: &[RawRow], labels: &[usize], preprocessor: &Preprocessor, ids: &[usize]) -> Result<Vec<Case>> {
    ids.iter().map(|&i| Ok(Case { x: preprocessor.transform(&rows[i])?, label: labels[i], id: i })).collect()
}

/// Loads `path`, splits it, fits the preprocessor on the training part and
/// encodes every split. With `external_test` the whole of `path` is split
/// into train/val and the test split is the other file.
pub fn load_and_preprocess(
    path: &Path,
    external_test: Option<&Path>,
    schema: &DatasetSchema,
    split: &SplitConfig,
    seed: u64,
) -> Result<PreparedData> {
    schema.validate()?;
    split.validate()?;
    let rows = read_csv(path, schema, true)?;
    if rows.is_empty() {
        return Err(Error::data(None, format!("{}: no data rows", path.display())));
    }
    let mut schema = schema.clone();
    if schema.label_vocabulary.is_empty() {
        let names: BTreeSet<&str> = rows.iter().filter_map(|r| r.label.as_deref()).collect();
        schema.label_vocabulary = names.into_iter().map(String::from).collect();
    }
    let labels = label_indices(&rows, &schema)?;
    let c = schema.num_classes();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    let all: Vec<usize> = (0..rows.len()).collect();
    let (dev, test_ids) = match external_test {
        Some(_) => (all, Vec::new()),
        None => stratified_split(&labels, c, split.test_fraction, &mut rng),
    };
    let dev_labels: Vec<usize> = dev.iter().map(|&i| labels[i]).collect();
    let (train_pos, val_pos) = stratified_split(&dev_labels, c, split.val_fraction, &mut rng);
    let train_ids: Vec<usize> = train_pos.iter().map(|&p| dev[p]).collect();
    let val_ids: Vec<usize> = val_pos.iter().map(|&p| dev[p]).collect();

    if train_ids.is_empty() {
        return Err(Error::data(None, "training split is empty"));
    }
    if split.val_fraction > 0.0 && val_ids.is_empty() {
        return Err(Error::data(None, "validation split is empty"));
    }
    if external_test.is_none() && split.test_fraction > 0.0 && test_ids.is_empty() {
        return Err(Error::data(None, "test split is empty"));
    }

    let fit_rows: Vec<&RawRow> = train_ids.iter().map(|&i| &rows[i]).collect();
    let preprocessor = Preprocessor::fit(&fit_rows)?;
    let train = encode(&rows, &labels, &preprocessor, &train_ids)?;
    let val = encode(&rows, &labels, &preprocessor, &val_ids)?;
    let (test, test_ids) = match external_test {
        Some(tp) => {
            let test_rows = read_csv(tp, &schema, true)?;
            if test_rows.is_empty() {
                return Err(Error::data(None, format!("{}: no data rows", tp.display())));
            }
            let test_labels = label_indices(&test_rows, &schema)?;
            let ids: Vec<usize> = (0..test_rows.len()).collect();
            (encode(&test_rows, &test_labels, &preprocessor, &ids)?, ids)
        }
        None => (encode(&rows, &labels, &preprocessor, &test_ids)?, test_ids),
    };

    let split = SplitInfo {
        source: path.to_path_buf(),
        external_test: external_test.map(Path::to_path_buf),
        seed,
        train_ids,
        val_ids,
        test_ids,
    };
    Ok(PreparedData { schema, preprocessor, train, val, test, split })
}

/// Per-class counts, for stratification checks and reports.
pub fn class_counts(cases: &[Case], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for c in cases {
        counts[c.label] += 1;
    }
    counts
}
