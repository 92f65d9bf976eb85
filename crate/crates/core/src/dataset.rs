//! JSONL dataset loading, validation, summary statistics, and
//! category × difficulty distribution comparison.
//!
//! Wire schema, one record per line: `id` (string), `question` (string),
//! `label` ("valid" | "invalid"), `error_category` (one of the five error
//! names or "none"), `category`, `subcategory` (strings, optional),
//! `difficulty` (number, optional). Unknown fields are preserved verbatim.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ErrorCategory, GroundTruth, MathQuestion};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Line {
        path: String,
        line: usize,
        message: String,
    },
    #[error("record {index}: {message}")]
    Record { index: usize, message: String },
    #[error("dataset is empty")]
    EmptySet,
    #[error("distribution tables use different binning ({0:?} vs {1:?})")]
    BinningMismatch(Binning, Binning),
    #[error("distribution table has no occupied cells")]
    EmptyDistribution,
}

/// Whether ground-truth labels are required or merely allowed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemaKind {
    /// Every record must carry `label` (curated evaluation sets).
    Labeled,
    /// `label` is optional; parsed and checked when present.
    Unlabeled,
}

/// Wire form of one JSONL record.
#[derive(Debug, Serialize, Deserialize)]
struct RawRecord {
    id: String,
    question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error_category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subcategory: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    difficulty: Option<f64>,
    #[serde(flatten)]
    extra: serde_json::Map<String, serde_json::Value>,
}

fn parse_record(raw: RawRecord, schema: SchemaKind) -> Result<MathQuestion, String> {
    let validity = match raw.label.as_deref() {
        Some("valid") => Some(true),
        Some("invalid") => Some(false),
        Some(other) => {
            return Err(format!(
                "field `label` must be \"valid\" or \"invalid\", got {other:?}"
            ))
        }
        None => None,
    };
    if schema == SchemaKind::Labeled && validity.is_none() {
        return Err("missing field `label` (required by the labeled schema)".to_string());
    }
    let category = match raw.error_category.as_deref() {
        Some(s) => Some(
            s.parse::<ErrorCategory>()
                .map_err(|e| format!("field `error_category`: {e}"))?,
        ),
        None => None,
    };
    let label = match (validity, category) {
        (Some(v), Some(c)) => {
            Some(GroundTruth::new(v, c).map_err(|e| format!("inconsistent label: {e}"))?)
        }
        (Some(true), None) => Some(GroundTruth::valid()),
        (Some(false), None) => {
            return Err(
                "record labeled \"invalid\" must name its `error_category`".to_string()
            )
        }
        (None, Some(_)) => {
            return Err("field `error_category` present without `label`".to_string())
        }
        (None, None) => None,
    };
    let q = MathQuestion {
        id: raw.id,
        text: raw.question,
        label,
        category: raw.category,
        subcategory: raw.subcategory,
        difficulty: raw.difficulty,
        extra: raw.extra,
    };
    q.validate().map_err(|e| e.to_string())?;
    Ok(q)
}

fn to_raw(q: &MathQuestion) -> RawRecord {
    RawRecord {
        id: q.id.clone(),
        question: q.text.clone(),
        label: q
            .label
            .map(|l| if l.validity { "valid" } else { "invalid" }.to_string()),
        error_category: q.label.map(|l| l.error_category.as_str().to_string()),
        category: q.category.clone(),
        subcategory: q.subcategory.clone(),
        difficulty: q.difficulty,
        extra: q.extra.clone(),
    }
}

/// An ordered, id-unique collection of questions from one source file.
#[derive(Debug, Clone, PartialEq)]
pub struct QuestionSet {
    records: Vec<MathQuestion>,
    source_path: String,
    labeled: bool,
}

impl QuestionSet {
    /// Validate records (well-formed, unique ids) and derive the `labeled`
    /// flag: true iff every record carries ground truth.
    pub fn new(
        records: Vec<MathQuestion>,
        source_path: impl Into<String>,
    ) -> Result<Self, DatasetError> {
        let mut seen = BTreeSet::new();
        for (i, q) in records.iter().enumerate() {
            q.validate().map_err(|e| DatasetError::Record {
                index: i + 1,
                message: e.to_string(),
            })?;
            if !seen.insert(q.id.as_str()) {
                return Err(DatasetError::Record {
                    index: i + 1,
                    message: format!("duplicate id {:?}", q.id),
                });
            }
        }
        let labeled = !records.is_empty() && records.iter().all(|q| q.label.is_some());
        Ok(Self {
            records,
            source_path: source_path.into(),
            labeled,
        })
    }

    pub fn records(&self) -> &[MathQuestion] {
        &self.records
    }

    pub fn source_path(&self) -> &str {
        &self.source_path
    }

    /// True iff every record carries a ground-truth label.
    pub fn labeled(&self) -> bool {
        self.labeled
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&MathQuestion> {
        self.records.iter().find(|q| q.id == id)
    }

    /// Ground-truth validity per id, for scoring. None for unlabeled sets.
    pub fn validity_labels(&self) -> Option<BTreeMap<String, bool>> {
        if !self.labeled {
            return None;
        }
        Some(
            self.records
                .iter()
                .map(|q| (q.id.clone(), q.label.expect("labeled set").validity))
                .collect(),
        )
    }

    /// Ground-truth error category per id. None for unlabeled sets.
    pub fn category_labels(&self) -> Option<BTreeMap<String, ErrorCategory>> {
        if !self.labeled {
            return None;
        }
        Some(
            self.records
                .iter()
                .map(|q| (q.id.clone(), q.label.expect("labeled set").error_category))
                .collect(),
        )
    }
}

/// Load a JSONL dataset, failing on the first malformed line.
/// Record order is preserved; blank lines are ignored.
pub fn load_dataset(
    path: impl AsRef<Path>,
    schema: SchemaKind,
) -> Result<QuestionSet, DatasetError> {
    let path = path.as_ref();
    let path_str = path.display().to_string();
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: path_str.clone(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|source| DatasetError::Io {
            path: path_str.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord =
            serde_json::from_str(&line).map_err(|e| DatasetError::Line {
                path: path_str.clone(),
                line: lineno,
                message: e.to_string(),
            })?;
        let q = parse_record(raw, schema).map_err(|message| DatasetError::Line {
            path: path_str.clone(),
            line: lineno,
            message,
        })?;
        if let Some(first) = seen.insert(q.id.clone(), lineno) {
            return Err(DatasetError::Line {
                path: path_str.clone(),
                line: lineno,
                message: format!("duplicate id {:?} (first seen on line {first})", q.id),
            });
        }
        records.push(q);
    }
    QuestionSet::new(records, path_str)
}

/// Write a QuestionSet back out as JSONL in record order.
/// `load_dataset` of the result reproduces an equal set.
pub fn save_dataset(set: &QuestionSet, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let path_str = path.display().to_string();
    let mut file = File::create(path).map_err(|source| DatasetError::Io {
        path: path_str.clone(),
        source,
    })?;
    let io_err = |source| DatasetError::Io {
        path: path_str.clone(),
        source,
    };
    for q in &set.records {
        let line = serde_json::to_string(&to_raw(q)).expect("record serializes");
        file.write_all(line.as_bytes()).map_err(io_err)?;
        file.write_all(b"\n").map_err(io_err)?;
    }
    Ok(())
}

/// One dataset-validation finding, tied to its source line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineIssue {
    pub line: usize,
    pub message: String,
}

/// Scan a JSONL file and report every violation instead of stopping at the
/// first, for linting workflows. An unreadable file yields a single issue
/// at line 0.
pub fn validate_file(path: impl AsRef<Path>, schema: SchemaKind) -> Vec<LineIssue> {
    let path = path.as_ref();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) => {
            return vec![LineIssue {
                line: 0,
                message: format!("cannot read {}: {e}", path.display()),
            }]
        }
    };
    let mut issues = Vec::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = match line {
            Ok(l) => l,
            Err(e) => {
                issues.push(LineIssue {
                    line: lineno,
                    message: format!("read error: {e}"),
                });
                break;
            }
        };
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                issues.push(LineIssue {
                    line: lineno,
                    message: e.to_string(),
                });
                continue;
            }
        };
        match parse_record(raw, schema) {
            Ok(q) => match seen.entry(q.id.clone()) {
                Entry::Occupied(first) => issues.push(LineIssue {
                    line: lineno,
                    message: format!(
                        "duplicate id {:?} (first seen on line {})",
                        q.id,
                        first.get()
                    ),
                }),
                Entry::Vacant(v) => {
                    v.insert(lineno);
                }
            },
            Err(message) => issues.push(LineIssue {
                line: lineno,
                message,
            }),
        }
    }
    issues
}

/// Difficulty bin layout: bin(d) = floor((d − origin) / width).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Binning {
    pub width: f64,
    pub origin: f64,
}

impl Default for Binning {
    /// Unit-width bins anchored at 0.
    fn default() -> Self {
        Self {
            width: 1.0,
            origin: 0.0,
        }
    }
}

impl Binning {
    pub fn bin(&self, difficulty: f64) -> i64 {
        ((difficulty - self.origin) / self.width).floor() as i64
    }
}

/// Counts per (category, difficulty bin). Only records carrying both a
/// category and a difficulty are represented.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionTable {
    pub binning: Binning,
    /// category → difficulty bin → count.
    pub cells: BTreeMap<String, BTreeMap<i64, u64>>,
}

impl DistributionTable {
    pub fn from_records(records: &[MathQuestion], binning: Binning) -> Self {
        let mut cells: BTreeMap<String, BTreeMap<i64, u64>> = BTreeMap::new();
        for q in records {
            if let (Some(cat), Some(d)) = (&q.category, q.difficulty) {
                *cells
                    .entry(cat.clone())
                    .or_default()
                    .entry(binning.bin(d))
                    .or_insert(0) += 1;
            }
        }
        Self { binning, cells }
    }

    pub fn total(&self) -> u64 {
        self.cells.values().flat_map(|row| row.values()).sum()
    }

    /// Per-category totals.
    pub fn row_marginals(&self) -> BTreeMap<String, u64> {
        self.cells
            .iter()
            .map(|(cat, row)| (cat.clone(), row.values().sum()))
            .collect()
    }

    /// Per-bin totals across categories.
    pub fn column_marginals(&self) -> BTreeMap<i64, u64> {
        let mut cols: BTreeMap<i64, u64> = BTreeMap::new();
        for row in self.cells.values() {
            for (&bin, &count) in row {
                *cols.entry(bin).or_insert(0) += count;
            }
        }
        cols
    }
}

/// Quantified distance between two distribution tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    /// ½ Σ |p − q| over cell proportions, in [0,1].
    pub total_variation: f64,
    /// Signed proportion difference (first minus second) per cell.
    pub per_cell_delta: BTreeMap<String, BTreeMap<i64, f64>>,
}

/// Total-variation divergence between two tables with identical binning.
/// Symmetric in its arguments; disjoint supports yield exactly 1.
pub fn compare_distributions(
    a: &DistributionTable,
    b: &DistributionTable,
) -> Result<DivergenceReport, DatasetError> {
    if a.binning != b.binning {
        return Err(DatasetError::BinningMismatch(a.binning, b.binning));
    }
    let (ta, tb) = (a.total(), b.total());
    if ta == 0 || tb == 0 {
        return Err(DatasetError::EmptyDistribution);
    }
    let mut keys: BTreeSet<(&String, i64)> = BTreeSet::new();
    for (cat, row) in a.cells.iter().chain(b.cells.iter()) {
        for &bin in row.keys() {
            keys.insert((cat, bin));
        }
    }
    let lookup = |t: &DistributionTable, cat: &String, bin: i64| -> f64 {
        t.cells
            .get(cat)
            .and_then(|row| row.get(&bin))
            .copied()
            .unwrap_or(0) as f64
    };
    let mut per_cell_delta: BTreeMap<String, BTreeMap<i64, f64>> = BTreeMap::new();
    let mut tv = 0.0;
    for (cat, bin) in keys {
        let p = lookup(a, cat, bin) / ta as f64;
        let q = lookup(b, cat, bin) / tb as f64;
        per_cell_delta
            .entry(cat.clone())
            .or_default()
            .insert(bin, p - q);
        tv += (p - q).abs();
    }
    Ok(DivergenceReport {
        total_variation: tv / 2.0,
        per_cell_delta,
    })
}

/// CSV rows `category,difficulty_bin,count` in key order.
pub fn write_distribution_csv<W: io::Write>(
    w: W,
    table: &DistributionTable,
) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["category", "difficulty_bin", "count"])?;
    for (cat, row) in &table.cells {
        for (bin, count) in row {
            wtr.write_record([cat.clone(), bin.to_string(), count.to_string()])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Label tallies for a fully labeled set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelTally {
    pub valid: u64,
    /// Count per error variant; all five keys always present.
    pub per_error: BTreeMap<ErrorCategory, u64>,
}

impl LabelTally {
    pub fn invalid_total(&self) -> u64 {
        self.per_error.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total: u64,
    /// Count per math category; records without one fall under
    /// "uncategorized".
    pub category_counts: BTreeMap<String, u64>,
    pub distribution: DistributionTable,
    /// Present only when the set is fully labeled.
    pub labels: Option<LabelTally>,
}

/// Summarize a non-empty set: math-category counts, the
/// category × difficulty table, and (for labeled sets) label tallies.
pub fn dataset_stats(set: &QuestionSet, binning: Binning) -> Result<DatasetStats, DatasetError> {
    if set.is_empty() {
        return Err(DatasetError::EmptySet);
    }
    let mut category_counts: BTreeMap<String, u64> = BTreeMap::new();
    for q in set.records() {
        let key = q
            .category
            .clone()
            .unwrap_or_else(|| "uncategorized".to_string());
        *category_counts.entry(key).or_insert(0) += 1;
    }
    let labels = if set.labeled() {
        let mut per_error: BTreeMap<ErrorCategory, u64> =
            ErrorCategory::ERRORS.iter().map(|&c| (c, 0)).collect();
        let mut valid = 0;
        for q in set.records() {
            let gt = q.label.expect("labeled set");
            if gt.validity {
                valid += 1;
            } else {
                *per_error.get_mut(&gt.error_category).expect("all keys present") += 1;
            }
        }
        Some(LabelTally { valid, per_error })
    } else {
        None
    };
    Ok(DatasetStats {
        total: set.len() as u64,
        category_counts,
        distribution: DistributionTable::from_records(set.records(), binning),
        labels,
    })
}

/// Order-preserving subset with unchanged ids and source path.
pub fn slice<F: Fn(&MathQuestion) -> bool>(set: &QuestionSet, predicate: F) -> QuestionSet {
    let records: Vec<MathQuestion> = set
        .records
        .iter()
        .filter(|q| predicate(q))
        .cloned()
        .collect();
    QuestionSet::new(records, set.source_path.clone())
        .expect("subset of a valid set is valid")
}
