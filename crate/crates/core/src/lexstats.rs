//! Tokenization, corpus word counts, weighted log-odds with an informative Dirichlet prior, and
//! the filtered marked-word sets derived from them.
//!
//! For corpora `i` and `j` with word counts `y_w` and totals `n`, the prior pseudo-count of each
//! word is proportional to its pooled frequency, `a_w = alpha0 * (y_w^i + y_w^j) / (n_i + n_j)`,
//! so the prior mass sums to `alpha0`. The log-odds difference is
//!
//! ```text
//! delta_w = ln((y_w^i + a_w) / (n_i + alpha0 - y_w^i - a_w))
//!         - ln((y_w^j + a_w) / (n_j + alpha0 - y_w^j - a_w))
//! ```
//!
//! with approximate variance `1/(y_w^i + a_w) + 1/(y_w^j + a_w)` and `z_w = delta_w / sqrt(var)`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_segmentation::UnicodeSegmentation;

use crate::corpus::{feedback_text, FeedbackDocument};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum LexError {
    #[error("alpha0 must be positive, got {0}")]
    NonPositiveAlpha(f64),
    #[error("both corpora are empty")]
    EmptyCorpora,
    #[error("pooled vocabulary has {0} word type(s); at least 2 are required")]
    DegenerateVocabulary(usize),
    #[error("invalid lexicon config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {message}")]
    Csv { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Facet {
    Content,
    Evaluation,
    Address,
}

impl Facet {
    pub fn as_str(self) -> &'static str {
        match self {
            Facet::Content => "content",
            Facet::Evaluation => "evaluation",
            Facet::Address => "address",
        }
    }

    fn parse(s: &str) -> Option<Facet> {
        match s {
            "content" => Some(Facet::Content),
            "evaluation" => Some(Facet::Evaluation),
            "address" => Some(Facet::Address),
            _ => None,
        }
    }
}

fn default_true() -> bool {
    true
}

/// Declarative lexicon settings: segmentation, multiword units, exclusions and canonical forms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    #[serde(default = "default_true")]
    pub lowercase: bool,
    /// Multiword units merged into one `_`-joined token, e.g. "make sure" -> `make_sure`.
    #[serde(default)]
    pub phrase_list: Vec<String>,
    #[serde(default)]
    pub stopwords: BTreeSet<String>,
    /// Assignment id -> topic words of that writing prompt.
    #[serde(default)]
    pub content_words: BTreeMap<String, BTreeSet<String>>,
    /// Near-synonym -> canonical word.
    #[serde(default)]
    pub merge_map: BTreeMap<String, String>,
    /// Facet annotations rendered in reports; not used for selection.
    #[serde(default)]
    pub facets: BTreeMap<String, Facet>,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            lowercase: true,
            phrase_list: Vec::new(),
            stopwords: BTreeSet::new(),
            content_words: BTreeMap::new(),
            merge_map: BTreeMap::new(),
            facets: BTreeMap::new(),
        }
    }
}

impl TokenizerConfig {
    pub fn from_toml(src: &str) -> Result<Self, LexError> {
        toml::from_str(src).map_err(|e| LexError::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, LexError> {
        let src = std::fs::read_to_string(path)
            .map_err(|e| LexError::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_toml(&src)
    }
}

/// Which exclusions apply while tokenizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Filtering<'a> {
    Off,
    /// Stopwords plus the content words of every assignment.
    AllAssignments,
    /// Stopwords plus the content words of one assignment.
    Assignment(&'a str),
}

/// A validated, normalized [`TokenizerConfig`].
#[derive(Debug, Clone)]
pub struct Tokenizer {
    lowercase: bool,
    phrases: Vec<Vec<String>>,
    stopwords: BTreeSet<String>,
    content_words: BTreeMap<String, BTreeSet<String>>,
    all_content: BTreeSet<String>,
    merge_map: HashMap<String, String>,
    facets: BTreeMap<String, Facet>,
}

impl Tokenizer {
    pub fn new(config: &TokenizerConfig) -> Result<Self, LexError> {
        let lowercase = config.lowercase;
        let norm_entry = |w: &str| -> String {
            let w = w.split_whitespace().collect::<Vec<_>>().join("_");
            if lowercase {
                w.to_lowercase()
            } else {
                w
            }
        };
        let mut phrases = Vec::with_capacity(config.phrase_list.len());
        for p in &config.phrase_list {
            let parts = segment(p, lowercase);
            if parts.len() < 2 {
                return Err(LexError::InvalidConfig(format!(
                    "phrase '{p}' must have at least two parts"
                )));
            }
            phrases.push(parts);
        }
        // Longest first so greedy matching prefers the longest unit at each position.
        phrases.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        phrases.dedup();

        let merge_map: HashMap<String, String> = config
            .merge_map
            .iter()
            .map(|(k, v)| (norm_entry(k), norm_entry(v)))
            .collect();
        if let Some(target) = merge_map.values().find(|v| merge_map.contains_key(*v)) {
            return Err(LexError::InvalidConfig(format!(
                "merge_map target '{target}' is also a key"
            )));
        }
        let stopwords = config.stopwords.iter().map(|w| norm_entry(w)).collect();
        let content_words: BTreeMap<String, BTreeSet<String>> = config
            .content_words
            .iter()
            .map(|(a, ws)| (a.clone(), ws.iter().map(|w| norm_entry(w)).collect()))
            .collect();
        let all_content = content_words.values().flatten().cloned().collect();
        let facets = config
            .facets
            .iter()
            .map(|(w, f)| (norm_entry(w), *f))
            .collect();
        Ok(Tokenizer {
            lowercase,
            phrases,
            stopwords,
            content_words,
            all_content,
            merge_map,
            facets,
        })
    }

    /// Canonical (merge-mapped) form of a token.
    pub fn canonical<'a>(&'a self, token: &'a str) -> &'a str {
        self.merge_map.get(token).map_or(token, String::as_str)
    }

    /// True when the token, or its canonical form, is a stopword or content word in scope.
    pub fn is_excluded(&self, token: &str, filtering: Filtering<'_>) -> bool {
        let content: Option<&BTreeSet<String>> = match filtering {
            Filtering::Off => return false,
            Filtering::AllAssignments => Some(&self.all_content),
            Filtering::Assignment(a) => self.content_words.get(a),
        };
        let hit = |w: &str| self.stopwords.contains(w) || content.is_some_and(|c| c.contains(w));
        hit(token) || hit(self.canonical(token))
    }

    pub fn facet(&self, word: &str) -> Option<Facet> {
        self.facets.get(word).copied()
    }

    pub fn tokenize(&self, text: &str, filtering: Filtering<'_>) -> Vec<String> {
        let raw = segment(text, self.lowercase);
        let mut merged: Vec<String> = Vec::with_capacity(raw.len());
        let mut i = 0;
        'outer: while i < raw.len() {
            for p in &self.phrases {
                if raw.len() - i >= p.len() && raw[i..i + p.len()] == p[..] {
                    merged.push(p.join("_"));
                    i += p.len();
                    continue 'outer;
                }
            }
            merged.push(raw[i].clone());
            i += 1;
        }
        merged
            .into_iter()
            .filter(|t| !self.is_excluded(t, filtering))
            .map(|t| match self.merge_map.get(&t) {
                Some(c) => c.clone(),
                None => t,
            })
            .collect()
    }
}

fn segment(text: &str, lowercase: bool) -> Vec<String> {
    let text = text.replace(['\u{2019}', '\u{2018}'], "'");
    text.unicode_words()
        .map(|w| {
            if lowercase {
                w.to_lowercase()
            } else {
                w.to_string()
            }
        })
        .collect()
}

/// One-shot tokenization; prefer building a [`Tokenizer`] once for repeated use.
pub fn tokenize(
    text: &str,
    config: &TokenizerConfig,
    filtering: Filtering<'_>,
) -> Result<Vec<String>, LexError> {
    Ok(Tokenizer::new(config)?.tokenize(text, filtering))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCounts {
    counts: BTreeMap<String, u64>,
    total: u64,
}

impl TokenCounts {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs<I, S>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, u64)>,
        S: Into<String>,
    {
        let mut c = TokenCounts::new();
        for (w, n) in pairs {
            c.add_n(w.into(), n);
        }
        c
    }

    pub fn add(&mut self, word: impl Into<String>) {
        self.add_n(word.into(), 1);
    }

    pub fn add_n(&mut self, word: String, n: u64) {
        if n == 0 {
            return;
        }
        *self.counts.entry(word).or_insert(0) += n;
        self.total += n;
    }

    pub fn merge(&mut self, other: &TokenCounts) {
        for (w, &n) in &other.counts {
            self.add_n(w.clone(), n);
        }
    }

    pub fn get(&self, word: &str) -> u64 {
        self.counts.get(word).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn vocabulary_size(&self) -> usize {
        self.counts.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.counts.iter().map(|(w, &n)| (w.as_str(), n))
    }
}

/// Word counts over the feedback text of every document.
pub fn count_words<'a, I>(docs: I, tokenizer: &Tokenizer, filtered: bool) -> TokenCounts
where
    I: IntoIterator<Item = &'a FeedbackDocument>,
{
    let filtering = if filtered {
        Filtering::AllAssignments
    } else {
        Filtering::Off
    };
    let mut counts = TokenCounts::new();
    for doc in docs {
        for t in tokenizer.tokenize(&feedback_text(doc), filtering) {
            counts.add(t);
        }
    }
    counts
}

/// Prior strength: either an absolute `alpha0` or a multiple of the pooled token count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaPrior {
    Fixed(f64),
    Scaled(f64),
}

impl Default for AlphaPrior {
    fn default() -> Self {
        AlphaPrior::Scaled(0.01)
    }
}

impl AlphaPrior {
    pub fn resolve(self, a: &TokenCounts, b: &TokenCounts) -> f64 {
        match self {
            AlphaPrior::Fixed(x) => x,
            AlphaPrior::Scaled(f) => f * (a.total() + b.total()) as f64,
        }
    }
}

/// Log-odds statistics of one word; positive `delta` favours the first (marked) corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkedWordResult<T> {
    pub word: String,
    pub count_marked: u64,
    pub count_comparative: u64,
    pub delta: T,
    pub variance: T,
    pub z: T,
}

impl<T> MarkedWordResult<T> {
    pub fn pooled_count(&self) -> u64 {
        self.count_marked + self.count_comparative
    }
}

/// Weighted log-odds of every word in the pooled vocabulary, `counts_i` against `counts_j`.
pub fn log_odds_dirichlet<T: Scalar>(
    counts_i: &TokenCounts,
    counts_j: &TokenCounts,
    alpha0: T,
) -> Result<Vec<MarkedWordResult<T>>, LexError> {
    if !(alpha0 > T::zero()) {
        return Err(LexError::NonPositiveAlpha(alpha0.to_f64_lossy()));
    }
    if counts_i.is_empty() && counts_j.is_empty() {
        return Err(LexError::EmptyCorpora);
    }
    let vocab: BTreeSet<&str> = counts_i
        .counts
        .keys()
        .chain(counts_j.counts.keys())
        .map(String::as_str)
        .collect();
    if vocab.len() < 2 {
        return Err(LexError::DegenerateVocabulary(vocab.len()));
    }
    let n_i = T::from_count(counts_i.total());
    let n_j = T::from_count(counts_j.total());
    let n_pooled = n_i + n_j;
    let log_odds = |y: T, n: T, a: T| ((y + a) / (n + alpha0 - y - a)).ln();

    Ok(vocab
        .into_iter()
        .map(|w| {
            let ci = counts_i.get(w);
            let cj = counts_j.get(w);
            let y_i = T::from_count(ci);
            let y_j = T::from_count(cj);
            let a_w = alpha0 * (y_i + y_j) / n_pooled;
            let delta = log_odds(y_i, n_i, a_w) - log_odds(y_j, n_j, a_w);
            let variance = (y_i + a_w).recip() + (y_j + a_w).recip();
            MarkedWordResult {
                word: w.to_string(),
                count_marked: ci,
                count_comparative: cj,
                delta,
                variance,
                z: delta / variance.sqrt(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarkedFilters {
    pub z_threshold: f64,
    /// Minimum pooled (marked + comparative) count within a model.
    pub min_count: u64,
    pub min_models: usize,
    pub top_k: usize,
}

impl Default for MarkedFilters {
    fn default() -> Self {
        MarkedFilters {
            z_threshold: 1.96,
            min_count: 30,
            min_models: 2,
            top_k: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Side {
    /// Words over-represented in the marked corpus (`M_s`).
    Marked,
    /// Words over-represented in the contrast corpus.
    Comparative,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Marked => "marked",
            Side::Comparative => "comparative",
        }
    }

    fn matches(self, z: f64) -> bool {
        match self {
            Side::Marked => z > 0.0,
            Side::Comparative => z < 0.0,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WordStat {
    pub z: f64,
    pub count_marked: u64,
    pub count_comparative: u64,
}

impl WordStat {
    pub fn pooled_count(&self) -> u64 {
        self.count_marked + self.count_comparative
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkedEntry {
    /// Canonical form.
    pub word: String,
    /// Mean |z| over the models where the word qualifies.
    pub mean_abs_z: f64,
    /// Pooled count summed over qualifying models; breaks ties.
    pub pooled_count: u64,
    /// Statistics of qualifying models only.
    pub per_model: BTreeMap<String, WordStat>,
    pub facet: Option<Facet>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkedSet {
    pub attribute: String,
    pub side: Side,
    pub top_k: usize,
    /// Descending mean |z|.
    pub entries: Vec<MarkedEntry>,
}

impl MarkedSet {
    pub fn words(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.word.as_str()).collect()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.entries.iter().any(|e| e.word == word)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Every word that passes the significance, frequency, exclusion and cross-model filters on one
/// side, fully ranked. [`marked_words`] truncates this list to `top_k`.
pub fn qualifying_words<T: Scalar>(
    per_model: &BTreeMap<String, Vec<MarkedWordResult<T>>>,
    filters: &MarkedFilters,
    tokenizer: &Tokenizer,
    side: Side,
) -> Vec<MarkedEntry> {
    let min_models = filters.min_models.clamp(1, per_model.len().max(1));
    if min_models < filters.min_models {
        log::warn!(
            "only {} model(s) present; requiring significance in {min_models} instead of {}",
            per_model.len(),
            filters.min_models
        );
    }
    // canonical word -> model -> strongest qualifying variant
    let mut grouped: BTreeMap<String, BTreeMap<String, WordStat>> = BTreeMap::new();
    for (model, results) in per_model {
        for r in results {
            let z = r.z.to_f64_lossy();
            if !(z.abs() > filters.z_threshold)
                || !side.matches(z)
                || r.pooled_count() < filters.min_count
                || tokenizer.is_excluded(&r.word, Filtering::AllAssignments)
            {
                continue;
            }
            let stat = WordStat {
                z,
                count_marked: r.count_marked,
                count_comparative: r.count_comparative,
            };
            let slot = grouped
                .entry(tokenizer.canonical(&r.word).to_string())
                .or_default();
            match slot.get(model) {
                Some(prev) if prev.z.abs() >= z.abs() => {}
                _ => {
                    slot.insert(model.clone(), stat);
                }
            }
        }
    }
    let mut entries: Vec<MarkedEntry> = grouped
        .into_iter()
        .filter(|(_, models)| models.len() >= min_models)
        .map(|(word, models)| {
            let mean_abs_z = models.values().map(|s| s.z.abs()).sum::<f64>() / models.len() as f64;
            let pooled_count = models.values().map(WordStat::pooled_count).sum();
            MarkedEntry {
                facet: tokenizer.facet(&word),
                word,
                mean_abs_z,
                pooled_count,
                per_model: models,
            }
        })
        .collect();
    entries.sort_by(rank_order);
    entries
}

fn rank_order(a: &MarkedEntry, b: &MarkedEntry) -> Ordering {
    b.mean_abs_z
        .total_cmp(&a.mean_abs_z)
        .then_with(|| b.pooled_count.cmp(&a.pooled_count))
        .then_with(|| a.word.cmp(&b.word))
}

/// Top-`k` distinctive words on each side for one attribute comparison.
pub fn marked_words<T: Scalar>(
    attribute: &str,
    per_model: &BTreeMap<String, Vec<MarkedWordResult<T>>>,
    filters: &MarkedFilters,
    tokenizer: &Tokenizer,
) -> (MarkedSet, MarkedSet) {
    let build = |side| {
        let mut entries = qualifying_words(per_model, filters, tokenizer, side);
        entries.truncate(filters.top_k);
        MarkedSet {
            attribute: attribute.to_string(),
            side,
            top_k: filters.top_k,
            entries,
        }
    };
    (build(Side::Marked), build(Side::Comparative))
}

/// Log-odds of marked against contrast documents, computed separately for every model present on
/// either side. Counts are filtered (stopwords and content words removed).
pub fn per_model_log_odds<'a, T: Scalar>(
    marked: &[&'a FeedbackDocument],
    comparative: &[&'a FeedbackDocument],
    tokenizer: &Tokenizer,
    prior: AlphaPrior,
) -> Result<BTreeMap<String, Vec<MarkedWordResult<T>>>, LexError> {
    let models: BTreeSet<&str> = marked
        .iter()
        .chain(comparative)
        .map(|d| d.model_id.as_str())
        .collect();
    let mut out = BTreeMap::new();
    for model in models {
        let of_model = |docs: &[&'a FeedbackDocument]| {
            let docs: Vec<&FeedbackDocument> = docs
                .iter()
                .copied()
                .filter(|d| d.model_id == model)
                .collect();
            count_words(docs, tokenizer, true)
        };
        let (ci, cj) = (of_model(marked), of_model(comparative));
        let alpha0 = T::lit(prior.resolve(&ci, &cj));
        out.insert(model.to_string(), log_odds_dirichlet(&ci, &cj, alpha0)?);
    }
    Ok(out)
}

/// Share of `top_k` slots filled by words common to both sets (exact canonical matches).
pub fn overlap(a: &MarkedSet, b: &MarkedSet) -> f64 {
    let k = a.top_k.max(b.top_k);
    if k == 0 {
        return 0.0;
    }
    let wa: BTreeSet<&str> = a.entries.iter().map(|e| e.word.as_str()).collect();
    let shared = b
        .entries
        .iter()
        .map(|e| e.word.as_str())
        .collect::<BTreeSet<_>>()
        .intersection(&wa)
        .count();
    shared as f64 / k as f64
}

/// Writes both sides to one CSV: `word, side, z:<model>, count_marked:<model>,
/// count_comparative:<model> ..., mean_abs_z, facet`.
pub fn write_marked_csv(
    path: &Path,
    marked: &MarkedSet,
    comparative: &MarkedSet,
) -> Result<(), LexError> {
    let err = |e: csv::Error| LexError::Csv {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let models: BTreeSet<&str> = marked
        .entries
        .iter()
        .chain(&comparative.entries)
        .flat_map(|e| e.per_model.keys().map(String::as_str))
        .collect();
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    let mut header = vec!["word".to_string(), "side".to_string()];
    for m in &models {
        header.push(format!("z:{m}"));
        header.push(format!("count_marked:{m}"));
        header.push(format!("count_comparative:{m}"));
    }
    header.push("mean_abs_z".into());
    header.push("facet".into());
    w.write_record(&header).map_err(err)?;
    for set in [marked, comparative] {
        for e in &set.entries {
            let mut row = vec![e.word.clone(), set.side.as_str().to_string()];
            for m in &models {
                match e.per_model.get(*m) {
                    Some(s) => {
                        row.push(format!("{:.6}", s.z));
                        row.push(s.count_marked.to_string());
                        row.push(s.count_comparative.to_string());
                    }
                    None => row.extend([String::new(), String::new(), String::new()]),
                }
            }
            row.push(format!("{:.6}", e.mean_abs_z));
            row.push(e.facet.map(Facet::as_str).unwrap_or_default().to_string());
            w.write_record(&row).map_err(err)?;
        }
    }
    w.flush().map_err(|e| LexError::Csv {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Reads a file written by [`write_marked_csv`]. `top_k` is not stored and must be supplied.
pub fn read_marked_csv(
    path: &Path,
    attribute: &str,
    top_k: usize,
) -> Result<(MarkedSet, MarkedSet), LexError> {
    let fail = |message: String| LexError::Csv {
        path: path.display().to_string(),
        message,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| fail(e.to_string()))?;
    let header = r.headers().map_err(|e| fail(e.to_string()))?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let (word_i, side_i, mean_i, facet_i) =
        match (col("word"), col("side"), col("mean_abs_z"), col("facet")) {
            (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
            _ => return Err(fail("missing required columns".into())),
        };
    let models: Vec<(String, usize, usize, usize)> = header
        .iter()
        .filter_map(|h| h.strip_prefix("z:"))
        .filter_map(|m| {
            Some((
                m.to_string(),
                col(&format!("z:{m}"))?,
                col(&format!("count_marked:{m}"))?,
                col(&format!("count_comparative:{m}"))?,
            ))
        })
        .collect();
    let mut marked = MarkedSet {
        attribute: attribute.into(),
        side: Side::Marked,
        top_k,
        entries: Vec::new(),
    };
    let mut comparative = MarkedSet {
        side: Side::Comparative,
        ..marked.clone()
    };
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| fail(e.to_string()))?;
        let bad = |what: &str| fail(format!("row {}: bad {what}", line + 2));
        let mut per_model = BTreeMap::new();
        for (m, zi, mi, ci) in &models {
            if rec[*zi].is_empty() {
                continue;
            }
            per_model.insert(
                m.clone(),
                WordStat {
                    z: rec[*zi].parse().map_err(|_| bad("z"))?,
                    count_marked: rec[*mi].parse().map_err(|_| bad("count"))?,
                    count_comparative: rec[*ci].parse().map_err(|_| bad("count"))?,
                },
            );
        }
        let entry = MarkedEntry {
            word: rec[word_i].to_string(),
            mean_abs_z: rec[mean_i].parse().map_err(|_| bad("mean_abs_z"))?,
            pooled_count: per_model.values().map(WordStat::pooled_count).sum(),
            per_model,
            facet: match &rec[facet_i] {
                "" => None,
                f => Some(Facet::parse(f).ok_or_else(|| bad("facet"))?),
            },
        };
        match &rec[side_i] {
            "marked" => marked.entries.push(entry),
            "comparative" => comparative.entries.push(entry),
            _ => return Err(bad("side")),
        }
    }
    Ok((marked, comparative))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{FeedbackItem, Variant};
    use proptest::prelude::*;

    fn tok(cfg: &TokenizerConfig) -> Tokenizer {
        Tokenizer::new(cfg).unwrap()
    }

    fn doc(comments: &[&str]) -> FeedbackDocument {
        FeedbackDocument {
            essay_id: "e".into(),
            attribute: "A".into(),
            variant: Variant::Marked,
            model_id: "m".into(),
            items: comments
                .iter()
                .map(|c| FeedbackItem {
                    excerpt: "student words".into(),
                    comment: c.to_string(),
                })
                .collect(),
            raw_response: String::new(),
            generation_meta: BTreeMap::new(),
        }
    }

    #[test]
    fn tokenize_keeps_contractions_and_merges_phrases() {
        let cfg = TokenizerConfig {
            phrase_list: vec!["make sure".into()],
            ..TokenizerConfig::default()
        };
        let out = tok(&cfg).tokenize("Let's make sure it's correct.", Filtering::Off);
        assert_eq!(out, ["let's", "make_sure", "it's", "correct"]);
        assert!(tok(&cfg).tokenize("", Filtering::Off).is_empty());
    }

    #[test]
    fn curly_apostrophe_is_normalized() {
        let out = tok(&TokenizerConfig::default()).tokenize("Let\u{2019}s go", Filtering::Off);
        assert_eq!(out, ["let's", "go"]);
    }

    #[test]
    fn content_words_removed_when_filtering() {
        let cfg = TokenizerConfig {
            stopwords: ["the".into()].into(),
            content_words: BTreeMap::from([(
                "face_on_mars".to_string(),
                BTreeSet::from(["landform".to_string()]),
            )]),
            ..TokenizerConfig::default()
        };
        let t = tok(&cfg);
        let text = "The Landform is natural";
        assert_eq!(
            t.tokenize(text, Filtering::AllAssignments),
            ["is", "natural"]
        );
        assert_eq!(
            t.tokenize(text, Filtering::Assignment("face_on_mars")),
            ["is", "natural"]
        );
        assert_eq!(
            t.tokenize(text, Filtering::Assignment("community_service")),
            ["landform", "is", "natural"]
        );
        assert_eq!(t.tokenize(text, Filtering::Off).len(), 4);
    }

    #[test]
    fn merge_map_applied_last() {
        let cfg = TokenizerConfig {
            merge_map: BTreeMap::from([("clearer".to_string(), "unclear".to_string())]),
            stopwords: ["very".into()].into(),
            ..TokenizerConfig::default()
        };
        let out = tok(&cfg).tokenize("Very clearer, unclear", Filtering::AllAssignments);
        assert_eq!(out, ["unclear", "unclear"]);
    }

    #[test]
    fn config_invariants_enforced() {
        let bad_phrase = TokenizerConfig {
            phrase_list: vec!["single".into()],
            ..TokenizerConfig::default()
        };
        assert!(Tokenizer::new(&bad_phrase).is_err());
        let chained = TokenizerConfig {
            merge_map: BTreeMap::from([
                ("a".to_string(), "b".to_string()),
                ("b".to_string(), "c".to_string()),
            ]),
            ..TokenizerConfig::default()
        };
        assert!(Tokenizer::new(&chained).is_err());
    }

    #[test]
    fn count_words_small() {
        let t = tok(&TokenizerConfig::default());
        let docs = [doc(&["a b"]), doc(&["b c"])];
        let c = count_words(&docs, &t, false);
        assert_eq!(c.get("a"), 1);
        assert_eq!(c.get("b"), 2);
        assert_eq!(c.get("c"), 1);
        assert_eq!(c.total(), 4);
        let empty: [FeedbackDocument; 0] = [];
        assert_eq!(count_words(&empty, &t, false), TokenCounts::new());
    }

    #[test]
    fn log_odds_errors() {
        let a = TokenCounts::from_pairs([("x", 3u64), ("y", 1)]);
        assert!(matches!(
            log_odds_dirichlet(&a, &a, 0.0),
            Err(LexError::NonPositiveAlpha(_))
        ));
        assert!(matches!(
            log_odds_dirichlet(&a, &a, -1.0),
            Err(LexError::NonPositiveAlpha(_))
        ));
        let e = TokenCounts::new();
        assert!(matches!(
            log_odds_dirichlet(&e, &e, 1.0),
            Err(LexError::EmptyCorpora)
        ));
        let one = TokenCounts::from_pairs([("x", 3u64)]);
        assert!(log_odds_dirichlet(&one, &one, 1.0).is_err());
    }

    #[test]
    fn log_odds_one_empty_side() {
        let a = TokenCounts::from_pairs([("x", 3u64), ("y", 1)]);
        let r = log_odds_dirichlet(&a, &TokenCounts::new(), 1.0f64).unwrap();
        assert!(r.iter().all(|w| w.delta.is_finite() && w.variance > 0.0));
    }

    #[test]
    fn works_in_single_precision() {
        let a = TokenCounts::from_pairs([("good", 40u64), ("the", 100)]);
        let b = TokenCounts::from_pairs([("good", 10u64), ("the", 100)]);
        let r64 = log_odds_dirichlet(&a, &b, 10.0f64).unwrap();
        let r32 = log_odds_dirichlet(&a, &b, 10.0f32).unwrap();
        for (x, y) in r64.iter().zip(&r32) {
            assert!((x.z - f64::from(y.z)).abs() < 1e-4);
        }
    }

    fn result(word: &str, z: f64, cm: u64, cc: u64) -> MarkedWordResult<f64> {
        MarkedWordResult {
            word: word.into(),
            count_marked: cm,
            count_comparative: cc,
            delta: z,
            variance: 1.0,
            z,
        }
    }

    #[test]
    fn marked_words_filters_and_ranks() {
        let cfg = TokenizerConfig {
            stopwords: ["the".into()].into(),
            merge_map: BTreeMap::from([("clearer".to_string(), "unclear".to_string())]),
            facets: BTreeMap::from([("unclear".to_string(), Facet::Evaluation)]),
            ..TokenizerConfig::default()
        };
        let t = tok(&cfg);
        let m1 = vec![
            result("spelling", 8.0, 100, 20),
            result("the", 9.0, 500, 300),
            result("rare", 5.0, 20, 5),
            result("unclear", 3.0, 40, 20),
            result("clearer", 4.0, 50, 20),
            result("only_one", 6.0, 80, 10),
            result("consider", -7.0, 20, 90),
            result("weak", 1.5, 40, 30),
        ];
        let m2 = vec![
            result("spelling", 6.0, 90, 25),
            result("the", 9.0, 500, 300),
            result("rare", 5.0, 20, 5),
            result("unclear", 3.5, 40, 18),
            result("consider", -5.0, 25, 80),
            result("weak", 2.5, 40, 30),
        ];
        let per_model = BTreeMap::from([("m1".to_string(), m1), ("m2".to_string(), m2)]);
        let (marked, comp) = marked_words("A", &per_model, &MarkedFilters::default(), &t);
        assert_eq!(marked.words(), ["spelling", "unclear"]);
        assert!((marked.entries[1].mean_abs_z - 3.75).abs() < 1e-12);
        assert_eq!(marked.entries[1].facet, Some(Facet::Evaluation));
        assert_eq!(comp.words(), ["consider"]);
        for e in marked.entries.iter().chain(&comp.entries) {
            let ok = e
                .per_model
                .values()
                .filter(|s| s.z.abs() > 1.96 && s.pooled_count() >= 30)
                .count();
            assert!(ok >= 2);
        }
    }

    #[test]
    fn ties_break_by_count_then_word() {
        let t = tok(&TokenizerConfig::default());
        let rows = vec![
            result("b", 3.0, 40, 10),
            result("a", 3.0, 40, 10),
            result("c", 3.0, 60, 10),
        ];
        let per_model = BTreeMap::from([("m".to_string(), rows)]);
        let filters = MarkedFilters {
            min_models: 1,
            ..MarkedFilters::default()
        };
        let (marked, _) = marked_words("A", &per_model, &filters, &t);
        assert_eq!(marked.words(), ["c", "a", "b"]);
    }

    #[test]
    fn overlap_fractions() {
        let set = |words: &[&str]| MarkedSet {
            attribute: "A".into(),
            side: Side::Marked,
            top_k: 4,
            entries: words
                .iter()
                .map(|w| MarkedEntry {
                    word: w.to_string(),
                    mean_abs_z: 3.0,
                    pooled_count: 40,
                    per_model: BTreeMap::new(),
                    facet: None,
                })
                .collect(),
        };
        let a = set(&["a", "b", "c", "d"]);
        assert_eq!(overlap(&a, &a), 1.0);
        assert_eq!(overlap(&a, &set(&["w", "x", "y", "z"])), 0.0);
        assert_eq!(overlap(&a, &set(&["a", "b", "y", "z"])), 0.5);
    }

    #[test]
    fn marked_csv_round_trip() {
        let t = tok(&TokenizerConfig {
            facets: BTreeMap::from([("spelling".to_string(), Facet::Content)]),
            ..TokenizerConfig::default()
        });
        let rows = vec![
            result("spelling", 8.0, 100, 20),
            result("consider", -7.0, 20, 90),
        ];
        let per_model =
            BTreeMap::from([("m1".to_string(), rows.clone()), ("m2".to_string(), rows)]);
        let (m, c) = marked_words("ELL", &per_model, &MarkedFilters::default(), &t);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ELL.csv");
        write_marked_csv(&path, &m, &c).unwrap();
        let (m2, c2) = read_marked_csv(&path, "ELL", 20).unwrap();
        assert_eq!(m2, m);
        assert_eq!(c2, c);
    }

    proptest! {
        #[test]
        fn tokenize_is_idempotent(words in proptest::collection::vec("[a-zA-Z]{1,6}('[a-z]{1,2})?", 0..20)) {
            let cfg = TokenizerConfig {
                phrase_list: vec!["make sure".into(), "break down".into()],
                merge_map: BTreeMap::from([("clearer".to_string(), "unclear".to_string())]),
                ..TokenizerConfig::default()
            };
            let t = tok(&cfg);
            let text = words.join(" ");
            let once = t.tokenize(&text, Filtering::Off);
            let twice = t.tokenize(&once.join(" "), Filtering::Off);
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn swap_negates_exactly(pairs in proptest::collection::btree_map("[a-h]", (0u64..50, 0u64..50), 2..8)) {
            let a = TokenCounts::from_pairs(pairs.iter().map(|(w, (x, _))| (w.clone(), *x)));
            let b = TokenCounts::from_pairs(pairs.iter().map(|(w, (_, y))| (w.clone(), *y)));
            prop_assume!(a.total() + b.total() > 0);
            let vocab: BTreeSet<_> = a.iter().chain(b.iter()).map(|(w, _)| w.to_string()).collect();
            prop_assume!(vocab.len() >= 2);
            let ab = log_odds_dirichlet(&a, &b, 3.0f64).unwrap();
            let ba = log_odds_dirichlet(&b, &a, 3.0f64).unwrap();
            for (x, y) in ab.iter().zip(&ba) {
                prop_assert_eq!(x.delta, -y.delta);
                prop_assert_eq!(x.z, -y.z);
                prop_assert_eq!(x.variance, y.variance);
            }
            let same = log_odds_dirichlet(&a, &a, 3.0f64);
            if let Ok(same) = same {
                prop_assert!(same.iter().all(|r| r.delta == 0.0 && r.z == 0.0));
            }
        }

        #[test]
        fn increment_raises_delta(
            pairs in proptest::collection::btree_map("[a-h]", (0u64..60, 0u64..60), 2..8),
            pick in 0usize..8,
            alpha0 in 0.01f64..50.0,
        ) {
            let a = TokenCounts::from_pairs(pairs.iter().map(|(w, (x, _))| (w.clone(), *x)));
            let b = TokenCounts::from_pairs(pairs.iter().map(|(w, (_, y))| (w.clone(), *y)));
            let words: Vec<&String> = pairs.keys().collect();
            let w = words[pick % words.len()].clone();
            let mut a2 = a.clone();
            a2.add(w.clone());
            let before = log_odds_dirichlet(&a, &b, alpha0);
            let after = log_odds_dirichlet(&a2, &b, alpha0).unwrap();
            if let Ok(before) = before {
                let d0 = before.iter().find(|r| r.word == w).map(|r| r.delta);
                let d1 = after.iter().find(|r| r.word == w).unwrap().delta;
                if let Some(d0) = d0 {
                    prop_assert!(d1 > d0, "{} -> {}", d0, d1);
                }
            }
        }
    }
}
