//! Stability checks on marked-word results: sample-size sensitivity, overlap between slices of
//! the data, and regressions on the demographic categories of student names.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{CovariateValue, EssayCollection, FeedbackDocument};
use crate::inference::{
    concentration, design_matrix, AttributeRegression, Concentration, InferenceError,
    RegressionSpec,
};
use crate::lexstats::{
    count_words, log_odds_dirichlet, marked_words, overlap, per_model_log_odds, qualifying_words,
    AlphaPrior, LexError, MarkedFilters, MarkedSet, Side, TokenCounts, Tokenizer,
};
use crate::promptgen::NameRegistry;

#[derive(Debug, Error)]
pub enum RobustnessError {
    #[error("sweep step must be between 1 and the number of essays ({n_essays}), got {step}")]
    InvalidStep { step: usize, n_essays: usize },
    #[error("no marked words for '{0}' on the full sample; nothing to track")]
    EmptyReference(String),
    #[error("stability needs at least two slices, got {0}")]
    TooFewSlices(usize),
    #[error("names not in the registry: {0:?}")]
    UnresolvedNames(Vec<String>),
    #[error("named document {0} carries no student name")]
    MissingName(String),
    #[error(transparent)]
    Lex(#[from] LexError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error("{path}: {message}")]
    Csv { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepConfig {
    pub step: usize,
    /// Seeds the essay permutation.
    pub seed: u64,
    pub filters: MarkedFilters,
    pub prior: AlphaPrior,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            step: 100,
            seed: 0,
            filters: MarkedFilters::default(),
            prior: AlphaPrior::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityPoint {
    pub n_essays: usize,
    /// Share of the full-sample marked-side top-k that passes every filter at this size.
    pub prop_significant: f64,
    pub top_words: MarkedSet,
}

/// Essay ids in sweep order: sorted, then shuffled by a ChaCha8 generator seeded with `seed`.
pub fn sweep_order<'a>(
    docs: impl IntoIterator<Item = &'a FeedbackDocument>,
    seed: u64,
) -> Vec<String> {
    let ids: BTreeSet<&str> = docs.into_iter().map(|d| d.essay_id.as_str()).collect();
    let mut ids: Vec<String> = ids.into_iter().map(String::from).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ids
}

/// `step, 2·step, …` below `n`, then `n` itself.
pub fn sweep_grid(step: usize, n: usize) -> Result<Vec<usize>, RobustnessError> {
    if step == 0 || step > n {
        return Err(RobustnessError::InvalidStep { step, n_essays: n });
    }
    let mut grid: Vec<usize> = (1..).map(|i| i * step).take_while(|&k| k < n).collect();
    grid.push(n);
    Ok(grid)
}

type DocCounts = BTreeMap<String, BTreeMap<String, TokenCounts>>;

fn counts_by_model_and_essay(docs: &[&FeedbackDocument], tokenizer: &Tokenizer) -> DocCounts {
    let mut out: DocCounts = BTreeMap::new();
    for d in docs {
        out.entry(d.model_id.clone())
            .or_default()
            .entry(d.essay_id.clone())
            .or_default()
            .merge(&count_words([*d], tokenizer, true));
    }
    out
}

fn subsample(counts: &BTreeMap<String, TokenCounts>, essays: &[String]) -> TokenCounts {
    let mut total = TokenCounts::new();
    for e in essays {
        if let Some(c) = counts.get(e) {
            total.merge(c);
        }
    }
    total
}

/// Re-runs marked-word selection on growing prefixes of a seeded essay permutation shared by
/// both corpora and every model.
pub fn sample_size_sweep(
    attribute: &str,
    marked: &[&FeedbackDocument],
    comparative: &[&FeedbackDocument],
    tokenizer: &Tokenizer,
    config: &SweepConfig,
) -> Result<Vec<SensitivityPoint>, RobustnessError> {
    let order = sweep_order(marked.iter().chain(comparative).copied(), config.seed);
    let grid = sweep_grid(config.step, order.len())?;
    let counts_i = counts_by_model_and_essay(marked, tokenizer);
    let counts_j = counts_by_model_and_essay(comparative, tokenizer);
    let models: BTreeSet<&String> = counts_i.keys().chain(counts_j.keys()).collect();
    let empty = BTreeMap::new();

    let analyse = |n: usize| -> Result<(MarkedSet, Vec<String>), RobustnessError> {
        let prefix = &order[..n];
        let mut per_model = BTreeMap::new();
        for &m in &models {
            let ci = subsample(counts_i.get(m).unwrap_or(&empty), prefix);
            let cj = subsample(counts_j.get(m).unwrap_or(&empty), prefix);
            let alpha0 = config.prior.resolve(&ci, &cj);
            per_model.insert(m.clone(), log_odds_dirichlet::<f64>(&ci, &cj, alpha0)?);
        }
        let significant = qualifying_words(&per_model, &config.filters, tokenizer, Side::Marked)
            .into_iter()
            .map(|e| e.word)
            .collect();
        let (top, _) = marked_words(attribute, &per_model, &config.filters, tokenizer);
        Ok((top, significant))
    };

    let results: Vec<Result<(MarkedSet, Vec<String>), RobustnessError>> = std::thread::scope(|s| {
        let handles: Vec<_> = grid.iter().map(|&n| s.spawn(move || analyse(n))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });
    let mut results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let reference: BTreeSet<String> = results
        .last()
        .expect("grid ends at the full sample")
        .0
        .words()
        .into_iter()
        .map(String::from)
        .collect();
    if reference.is_empty() {
        return Err(RobustnessError::EmptyReference(attribute.to_string()));
    }
    Ok(grid
        .into_iter()
        .zip(results.drain(..))
        .map(|(n, (top_words, significant))| {
            let hits = significant
                .iter()
                .filter(|w| reference.contains(*w))
                .count();
            SensitivityPoint {
                n_essays: n,
                prop_significant: hits as f64 / reference.len() as f64,
                top_words,
            }
        })
        .collect())
}

/// `n_essays, prop_significant, top_words` with words joined by `|`.
pub fn write_sweep_csv(path: &Path, points: &[SensitivityPoint]) -> Result<(), RobustnessError> {
    let err = |e: &dyn std::fmt::Display| RobustnessError::Csv {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| err(&e))?;
    w.write_record(["n_essays", "prop_significant", "top_words"])
        .map_err(|e| err(&e))?;
    for p in points {
        w.write_record([
            p.n_essays.to_string(),
            format!("{:.4}", p.prop_significant),
            p.top_words.words().join("|"),
        ])
        .map_err(|e| err(&e))?;
    }
    w.flush().map_err(|e| err(&e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlapMatrix {
    pub labels: Vec<String>,
    /// Symmetric, unit diagonal, indexed like `labels`.
    pub values: Vec<Vec<f64>>,
}

impl OverlapMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.labels.iter().position(|l| l == a)?;
        let j = self.labels.iter().position(|l| l == b)?;
        Some(self.values[i][j])
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), RobustnessError> {
        let err = |e: &dyn std::fmt::Display| RobustnessError::Csv {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(|e| err(&e))?;
        let header: Vec<&str> = std::iter::once("slice")
            .chain(self.labels.iter().map(String::as_str))
            .collect();
        w.write_record(&header).map_err(|e| err(&e))?;
        for (label, row) in self.labels.iter().zip(&self.values) {
            let cells: Vec<String> = std::iter::once(label.clone())
                .chain(row.iter().map(|v| format!("{v:.4}")))
                .collect();
            w.write_record(&cells).map_err(|e| err(&e))?;
        }
        w.flush().map_err(|e| err(&e))
    }
}

/// Pairwise [`overlap`] between marked sets computed on different slices of the data.
pub fn stability_report(
    sets: &BTreeMap<String, MarkedSet>,
) -> Result<OverlapMatrix, RobustnessError> {
    if sets.len() < 2 {
        return Err(RobustnessError::TooFewSlices(sets.len()));
    }
    let labels: Vec<String> = sets.keys().cloned().collect();
    let list: Vec<&MarkedSet> = sets.values().collect();
    let values = (0..list.len())
        .map(|i| {
            (0..list.len())
                .map(|j| {
                    if i == j {
                        1.0
                    } else {
                        overlap(list[i], list[j])
                    }
                })
                .collect()
        })
        .collect();
    Ok(OverlapMatrix { labels, values })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceBy {
    Assignment,
    Model,
}

/// Marked-side sets computed separately per assignment or per model.
#[allow(clippy::too_many_arguments)]
pub fn slice_marked_sets(
    attribute: &str,
    marked: &[&FeedbackDocument],
    comparative: &[&FeedbackDocument],
    essays: &EssayCollection,
    by: SliceBy,
    tokenizer: &Tokenizer,
    filters: &MarkedFilters,
    prior: AlphaPrior,
) -> Result<BTreeMap<String, MarkedSet>, RobustnessError> {
    let key = |d: &FeedbackDocument| -> Result<String, RobustnessError> {
        Ok(match by {
            SliceBy::Model => d.model_id.clone(),
            SliceBy::Assignment => essays
                .get(&d.essay_id)
                .ok_or_else(|| InferenceError::MissingEssay(d.essay_id.clone()))?
                .assignment_id
                .clone(),
        })
    };
    let mut groups: BTreeMap<String, (Vec<&FeedbackDocument>, Vec<&FeedbackDocument>)> =
        BTreeMap::new();
    for &d in marked {
        groups.entry(key(d)?).or_default().0.push(d);
    }
    for &d in comparative {
        groups.entry(key(d)?).or_default().1.push(d);
    }
    let filters = match by {
        SliceBy::Model => MarkedFilters {
            min_models: 1,
            ..*filters
        },
        SliceBy::Assignment => *filters,
    };
    let mut out = BTreeMap::new();
    for (slice, (mi, cj)) in groups {
        let per_model = per_model_log_odds::<f64>(&mi, &cj, tokenizer, prior)?;
        out.insert(
            slice,
            marked_words(attribute, &per_model, &filters, tokenizer).0,
        );
    }
    Ok(out)
}

pub const NAME_RACE: &str = "name_race";
pub const NAME_GENDER: &str = "name_gender";

/// For each attribute, the concentration of named-prompt feedback in that attribute's marked set,
/// regressed on the race and gender categories of the names (registry reference levels) plus the
/// controls and fixed effects in `spec`. Condition dummies are not used.
pub fn name_audit(
    named_docs: &[&FeedbackDocument],
    essays: &EssayCollection,
    registry: &NameRegistry,
    m_sets: &BTreeMap<String, MarkedSet>,
    tokenizer: &Tokenizer,
    spec: &RegressionSpec,
) -> Result<BTreeMap<String, AttributeRegression>, RobustnessError> {
    let mut unresolved = BTreeSet::new();
    for d in named_docs {
        let name = d
            .name()
            .ok_or_else(|| RobustnessError::MissingName(d.key().to_string()))?;
        if registry.resolve(name).is_none() {
            unresolved.insert(name.to_string());
        }
    }
    if !unresolved.is_empty() {
        return Err(RobustnessError::UnresolvedNames(
            unresolved.into_iter().collect(),
        ));
    }

    let mut spec = spec.clone();
    spec.conditions.clear();
    for col in [NAME_RACE, NAME_GENDER] {
        if !spec.covariates.iter().any(|c| c == col) {
            spec.covariates.push(col.to_string());
        }
    }
    spec.reference_levels
        .insert(NAME_RACE.into(), registry.reference_race.clone());
    spec.reference_levels
        .insert(NAME_GENDER.into(), registry.reference_gender.clone());

    let mut out = BTreeMap::new();
    for (attribute, m_set) in m_sets {
        let mut samples = Vec::with_capacity(named_docs.len());
        let mut excluded = 0usize;
        let mut levels: [BTreeSet<String>; 2] = Default::default();
        for d in named_docs {
            let mut s = match concentration(d, essays, m_set, tokenizer)? {
                Concentration::Sample(s) => s,
                Concentration::Excluded(_) => {
                    excluded += 1;
                    continue;
                }
            };
            let n = registry
                .resolve(d.name().unwrap_or_default())
                .expect("checked above");
            levels[0].insert(n.race_category.clone());
            levels[1].insert(n.gender_category.clone());
            s.covariates.insert(
                NAME_RACE.into(),
                CovariateValue::Text(n.race_category.clone()),
            );
            s.covariates.insert(
                NAME_GENDER.into(),
                CovariateValue::Text(n.gender_category.clone()),
            );
            samples.push(s);
        }
        if excluded > 0 {
            log::warn!(
                "{attribute}: excluded {excluded} named document(s) with no tokens after filtering"
            );
        }
        let degenerate: Vec<String> = [NAME_RACE, NAME_GENDER]
            .iter()
            .zip(&levels)
            .filter(|(_, l)| l.len() < 2)
            .map(|(c, _)| c.to_string())
            .collect();
        if !degenerate.is_empty() {
            return Err(InferenceError::RankDeficient(degenerate).into());
        }
        let design = design_matrix::<f64>(&samples, &spec)?;
        out.insert(
            attribute.clone(),
            AttributeRegression {
                attribute: attribute.clone(),
                fit: design.fit(spec.standard_errors)?,
                baseline_mean: None,
            },
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexstats::MarkedEntry;

    fn set(words: &[&str]) -> MarkedSet {
        MarkedSet {
            attribute: "A".into(),
            side: Side::Marked,
            top_k: 4,
            entries: words
                .iter()
                .map(|w| MarkedEntry {
                    word: w.to_string(),
                    mean_abs_z: 2.5,
                    pooled_count: 40,
                    per_model: BTreeMap::new(),
                    facet: None,
                })
                .collect(),
        }
    }

    #[test]
    fn grid_includes_full_sample() {
        assert_eq!(
            sweep_grid(100, 600).unwrap(),
            [100, 200, 300, 400, 500, 600]
        );
        assert_eq!(sweep_grid(100, 250).unwrap(), [100, 200, 250]);
        assert_eq!(sweep_grid(5, 5).unwrap(), [5]);
        assert!(matches!(
            sweep_grid(7, 5),
            Err(RobustnessError::InvalidStep { .. })
        ));
        assert!(sweep_grid(0, 5).is_err());
    }

    #[test]
    fn stability_matrix_shape() {
        let mut sets = BTreeMap::new();
        sets.insert("a".to_string(), set(&["w", "x", "y", "z"]));
        sets.insert("b".to_string(), set(&["w", "x", "y", "z"]));
        sets.insert("c".to_string(), set(&["p", "q"]));
        sets.insert("d".to_string(), set(&["w", "q"]));
        let m = stability_report(&sets).unwrap();
        assert_eq!(m.get("a", "b"), Some(1.0));
        assert_eq!(m.get("a", "c"), Some(0.0));
        assert_eq!(m.get("c", "d"), Some(0.25));
        for i in 0..4 {
            assert_eq!(m.values[i][i], 1.0);
            for j in 0..4 {
                assert_eq!(m.values[i][j], m.values[j][i]);
            }
        }
        sets.retain(|k, _| k == "a");
        assert!(matches!(
            stability_report(&sets),
            Err(RobustnessError::TooFewSlices(1))
        ));
    }
}
