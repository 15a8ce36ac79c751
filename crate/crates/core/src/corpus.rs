//! Essay and feedback records, their JSON-Lines encoding, and keyed collections.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: duplicate essay_id '{essay_id}'")]
    DuplicateEssay {
        path: PathBuf,
        line: usize,
        essay_id: String,
    },
    #[error("{path}:{line}: unknown variant token '{token}'")]
    UnknownVariant {
        path: PathBuf,
        line: usize,
        token: String,
    },
    #[error("duplicate feedback key {key}")]
    DuplicateFeedback { key: FeedbackKey },
    #[error("invalid feedback document {key}: {reason}")]
    InvalidFeedback { key: FeedbackKey, reason: String },
}

/// A covariate cell: numeric values pass through regressions, text values are dummy-encoded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovariateValue {
    Number(f64),
    Text(String),
}

impl CovariateValue {
    /// Parses a CSV cell, preferring the numeric reading.
    pub fn parse_cell(cell: &str) -> Self {
        match cell.trim().parse::<f64>() {
            Ok(x) if x.is_finite() => CovariateValue::Number(x),
            _ => CovariateValue::Text(cell.to_string()),
        }
    }
}

impl fmt::Display for CovariateValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CovariateValue::Number(x) => write!(f, "{x}"),
            CovariateValue::Text(s) => f.write_str(s),
        }
    }
}

pub type Covariates = BTreeMap<String, CovariateValue>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EssayRecord {
    pub essay_id: String,
    pub assignment_id: String,
    pub text: String,
    #[serde(default)]
    pub holistic_score: Option<f64>,
    #[serde(default)]
    pub covariates: Covariates,
}

/// Source field names for each essay attribute, plus the assignment registry used for validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub essay_id: String,
    pub assignment_id: String,
    pub text: String,
    pub holistic_score: String,
    /// Field holding a nested covariate object.
    pub covariates: String,
    /// Top-level fields lifted into the covariate map.
    pub covariate_fields: Vec<String>,
    /// Allowed assignment ids; empty accepts any.
    pub assignments: Vec<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            essay_id: "essay_id".into(),
            assignment_id: "assignment_id".into(),
            text: "text".into(),
            holistic_score: "holistic_score".into(),
            covariates: "covariates".into(),
            covariate_fields: Vec::new(),
            assignments: Vec::new(),
        }
    }
}

impl ColumnMap {
    pub fn with_assignments<I, S>(mut self, ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.assignments = ids.into_iter().map(Into::into).collect();
        self
    }

    fn extract(&self, obj: &Map<String, Value>) -> Result<EssayRecord, String> {
        let string_field = |name: &str| -> Result<String, String> {
            match obj.get(name) {
                Some(Value::String(s)) => Ok(s.clone()),
                Some(Value::Number(n)) => Ok(n.to_string()),
                Some(_) => Err(format!("field '{name}' must be a string")),
                None => Err(format!("missing field '{name}'")),
            }
        };
        let essay_id = string_field(&self.essay_id)?;
        let assignment_id = string_field(&self.assignment_id)?;
        let text = string_field(&self.text)?;
        let holistic_score = match obj.get(&self.holistic_score) {
            None | Some(Value::Null) => None,
            Some(Value::Number(n)) => n.as_f64(),
            Some(Value::String(s)) => Some(
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| format!("field '{}' is not numeric", self.holistic_score))?,
            ),
            Some(_) => return Err(format!("field '{}' is not numeric", self.holistic_score)),
        };
        let mut covariates = Covariates::new();
        match obj.get(&self.covariates) {
            None | Some(Value::Null) => {}
            Some(Value::Object(map)) => {
                for (k, v) in map {
                    if let Some(c) = covariate_from_json(v) {
                        covariates.insert(k.clone(), c);
                    }
                }
            }
            Some(_) => return Err(format!("field '{}' must be an object", self.covariates)),
        }
        for field in &self.covariate_fields {
            if let Some(c) = obj.get(field).and_then(covariate_from_json) {
                covariates.insert(field.clone(), c);
            }
        }
        Ok(EssayRecord {
            essay_id,
            assignment_id,
            text,
            holistic_score,
            covariates,
        })
    }
}

fn covariate_from_json(v: &Value) -> Option<CovariateValue> {
    match v {
        Value::Number(n) => n.as_f64().map(CovariateValue::Number),
        Value::String(s) => Some(CovariateValue::Text(s.clone())),
        Value::Bool(b) => Some(CovariateValue::Text(b.to_string())),
        _ => None,
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EssayCollection {
    essays: Vec<EssayRecord>,
    index: HashMap<String, usize>,
}

impl EssayCollection {
    /// Builds a collection, rejecting duplicate ids. The error carries the 1-based position.
    pub fn from_records(records: Vec<EssayRecord>) -> Result<Self, (usize, String)> {
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if index.insert(r.essay_id.clone(), i).is_some() {
                return Err((i + 1, r.essay_id.clone()));
            }
        }
        Ok(EssayCollection {
            essays: records,
            index,
        })
    }

    pub fn get(&self, essay_id: &str) -> Option<&EssayRecord> {
        self.index.get(essay_id).map(|&i| &self.essays[i])
    }

    pub fn iter(&self) -> std::slice::Iter<'_, EssayRecord> {
        self.essays.iter()
    }

    pub fn len(&self) -> usize {
        self.essays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.essays.is_empty()
    }

    pub fn as_slice(&self) -> &[EssayRecord] {
        &self.essays
    }
}

fn open(path: &Path) -> Result<BufReader<File>, CorpusError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads essays from a JSON-Lines file. Blank lines are skipped.
pub fn load_essays(path: &Path, columns: &ColumnMap) -> Result<EssayCollection, CorpusError> {
    let reader = open(path)?;
    let registry: BTreeSet<&str> = columns.assignments.iter().map(String::as_str).collect();
    let mut records = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| CorpusError::Malformed {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let value: Value = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let Value::Object(obj) = value else {
            return Err(malformed("record must be a JSON object".into()));
        };
        let record = columns.extract(&obj).map_err(&malformed)?;
        if record.text.trim().is_empty() {
            return Err(malformed(format!(
                "essay '{}' has empty text",
                record.essay_id
            )));
        }
        if !registry.is_empty() && !registry.contains(record.assignment_id.as_str()) {
            return Err(malformed(format!(
                "assignment '{}' is not in the assignment registry",
                record.assignment_id
            )));
        }
        if seen.insert(record.essay_id.clone(), line_no).is_some() {
            return Err(CorpusError::DuplicateEssay {
                path: path.to_path_buf(),
                line: line_no,
                essay_id: record.essay_id,
            });
        }
        records.push(record);
    }
    if records.is_empty() {
        log::warn!("{}: no essays found", path.display());
    } else {
        log::info!("{}: loaded {} essays", path.display(), records.len());
    }
    Ok(EssayCollection::from_records(records).expect("ids checked above"))
}

/// Writes essays in the canonical column layout.
pub fn write_essays(path: &Path, essays: &[EssayRecord]) -> Result<(), CorpusError> {
    write_jsonl(path, essays)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(row).expect("records serialize");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Marked,
    Comparative,
    Named,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Marked => "marked",
            Variant::Comparative => "comparative",
            Variant::Named => "named",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "marked" => Ok(Variant::Marked),
            "comparative" => Ok(Variant::Comparative),
            "named" => Ok(Variant::Named),
            other => Err(other.to_string()),
        }
    }
}

/// Attribute label carried by baseline-condition documents.
pub const BASELINE_ATTRIBUTE: &str = "baseline";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackItem {
    pub excerpt: String,
    pub comment: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackDocument {
    pub essay_id: String,
    pub attribute: String,
    pub variant: Variant,
    pub model_id: String,
    pub items: Vec<FeedbackItem>,
    pub raw_response: String,
    #[serde(default)]
    pub generation_meta: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FeedbackKey {
    pub essay_id: String,
    pub attribute: String,
    pub variant: Variant,
    pub model_id: String,
}

impl fmt::Display for FeedbackKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.essay_id, self.attribute, self.variant, self.model_id
        )
    }
}

impl FeedbackDocument {
    pub fn key(&self) -> FeedbackKey {
        FeedbackKey {
            essay_id: self.essay_id.clone(),
            attribute: self.attribute.clone(),
            variant: self.variant,
            model_id: self.model_id.clone(),
        }
    }

    /// Student name for `named` documents.
    pub fn name(&self) -> Option<&str> {
        self.generation_meta.get("name").and_then(Value::as_str)
    }

    fn validate(&self) -> Result<(), String> {
        if self.variant == Variant::Named && self.name().is_none_or(str::is_empty) {
            return Err("named variant requires a 'name' in generation_meta".into());
        }
        if let Some(i) = self
            .items
            .iter()
            .position(|it| it.comment.trim().is_empty())
        {
            return Err(format!("item {i} has an empty comment"));
        }
        Ok(())
    }
}

/// The analysed text of a response: comments in order, single-space separated. Excerpts quote
/// the student and are left out.
pub fn feedback_text(doc: &FeedbackDocument) -> String {
    let mut out = String::new();
    for (i, item) in doc.items.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&item.comment);
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct FeedbackCollection {
    docs: Vec<FeedbackDocument>,
    index: HashMap<FeedbackKey, usize>,
}

impl FeedbackCollection {
    pub fn from_documents(docs: Vec<FeedbackDocument>) -> Result<Self, CorpusError> {
        let mut index = HashMap::with_capacity(docs.len());
        for (i, d) in docs.iter().enumerate() {
            d.validate()
                .map_err(|reason| CorpusError::InvalidFeedback {
                    key: d.key(),
                    reason,
                })?;
            if index.insert(d.key(), i).is_some() {
                return Err(CorpusError::DuplicateFeedback { key: d.key() });
            }
        }
        Ok(FeedbackCollection { docs, index })
    }

    pub fn get(&self, key: &FeedbackKey) -> Option<&FeedbackDocument> {
        self.index.get(key).map(|&i| &self.docs[i])
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, FeedbackDocument> {
        self.docs.iter()
    }

    pub fn documents(&self) -> &[FeedbackDocument] {
        &self.docs
    }

    pub fn into_documents(self) -> Vec<FeedbackDocument> {
        self.docs
    }

    /// Documents for one condition, e.g. `F_ELL` is `select("ELL", Variant::Marked)`.
    pub fn select<'a>(
        &'a self,
        attribute: &'a str,
        variant: Variant,
    ) -> impl Iterator<Item = &'a FeedbackDocument> + 'a {
        self.docs
            .iter()
            .filter(move |d| d.variant == variant && d.attribute == attribute)
    }

    /// Sorted distinct model ids.
    pub fn model_ids(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.docs.iter().map(|d| d.model_id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }
}

fn parse_feedback_lines(
    path: &Path,
    reader: impl BufRead,
    out: &mut Vec<FeedbackDocument>,
) -> Result<(), CorpusError> {
    #[derive(Deserialize)]
    struct RawDoc {
        essay_id: String,
        attribute: String,
        variant: String,
        model_id: String,
        items: Vec<FeedbackItem>,
        raw_response: String,
        #[serde(default)]
        generation_meta: BTreeMap<String, Value>,
    }
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawDoc = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let variant =
            raw.variant
                .parse::<Variant>()
                .map_err(|token| CorpusError::UnknownVariant {
                    path: path.to_path_buf(),
                    line: i + 1,
                    token,
                })?;
        out.push(FeedbackDocument {
            essay_id: raw.essay_id,
            attribute: raw.attribute,
            variant,
            model_id: raw.model_id,
            items: raw.items,
            raw_response: raw.raw_response,
            generation_meta: raw.generation_meta,
        });
    }
    Ok(())
}

pub fn load_feedback(path: &Path) -> Result<FeedbackCollection, CorpusError> {
    let mut docs = Vec::new();
    parse_feedback_lines(path, open(path)?, &mut docs)?;
    FeedbackCollection::from_documents(docs)
}

/// Loads every `*.jsonl` file in a runs directory, except the failure log, in file-name order.
pub fn load_feedback_dir(dir: &Path) -> Result<FeedbackCollection, CorpusError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "jsonl")
                && p.file_name()
                    .is_some_and(|n| n != crate::llmgen::FAILURE_LOG)
        })
        .collect();
    files.sort();
    let mut docs = Vec::new();
    for f in &files {
        parse_feedback_lines(f, open(f)?, &mut docs)?;
    }
    docs.sort_by_key(FeedbackDocument::key);
    FeedbackCollection::from_documents(docs)
}

pub fn write_feedback(path: &Path, docs: &[FeedbackDocument]) -> Result<(), CorpusError> {
    write_jsonl(path, docs)
}
