//! Marked-word concentration of feedback documents and fixed-effects OLS of concentration on
//! prompt condition.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::corpus::{
    feedback_text, CovariateValue, Covariates, EssayCollection, FeedbackDocument, FeedbackKey,
    Variant,
};
use crate::lexstats::{Filtering, MarkedSet, Tokenizer};
use crate::linalg::{back_substitute, householder_qr, upper_inverse, Matrix};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("marked set for '{0}' is empty")]
    EmptyMarkedSet(String),
    #[error("essay '{0}' referenced by feedback is not in the essay collection")]
    MissingEssay(String),
    #[error("sample {essay_id} lacks covariate '{column}'")]
    MissingCovariate { essay_id: String, column: String },
    #[error("design needs at least two condition levels, found {0:?}")]
    SingleCondition(Vec<Variant>),
    #[error("column '{0}' is constant and duplicates the intercept")]
    ConstantColumn(String),
    #[error("design matrix is rank deficient; dependent columns: {0:?}")]
    RankDeficient(Vec<String>),
    #[error("{n_obs} observations cannot identify {n_columns} coefficients")]
    TooFewObservations { n_obs: usize, n_columns: usize },
    #[error("unknown column '{0}'")]
    UnknownColumn(String),
    #[error("unsupported outcome '{0}'")]
    UnsupportedOutcome(String),
    #[error("invalid regression spec: {0}")]
    InvalidSpec(String),
    #[error("{path}: {message}")]
    Csv { path: String, message: String },
}

/// `100 * hits / total`, or `None` for an empty denominator.
pub fn concentration_ratio<T: Scalar>(hits: u64, total: u64) -> Option<T> {
    (total > 0).then(|| T::lit(100.0) * T::from_count(hits) / T::from_count(total))
}

/// Filtered token occurrences of a document and how many of them belong to the marked set.
pub fn marked_hits(doc: &FeedbackDocument, m_set: &MarkedSet, tokenizer: &Tokenizer) -> (u64, u64) {
    let words: BTreeSet<&str> = m_set.entries.iter().map(|e| e.word.as_str()).collect();
    let tokens = tokenizer.tokenize(&feedback_text(doc), Filtering::AllAssignments);
    let hits = tokens.iter().filter(|t| words.contains(t.as_str())).count() as u64;
    (hits, tokens.len() as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationSample {
    pub essay_id: String,
    /// The attribute whose marked set was applied.
    pub attribute: String,
    pub variant: Variant,
    pub model_id: String,
    pub assignment_id: String,
    /// Percentage in `[0, 100]`.
    pub c_value: f64,
    pub n_tokens_filtered: u64,
    #[serde(default)]
    pub covariates: Covariates,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Concentration {
    Sample(ConcentrationSample),
    /// No tokens survived filtering.
    Excluded(FeedbackKey),
}

/// Concentration of one document in `m_set`. The essay supplies assignment and covariates; its
/// holistic score is added as the `holistic_score` covariate when present.
pub fn concentration(
    doc: &FeedbackDocument,
    essays: &EssayCollection,
    m_set: &MarkedSet,
    tokenizer: &Tokenizer,
) -> Result<Concentration, InferenceError> {
    if m_set.is_empty() {
        return Err(InferenceError::EmptyMarkedSet(m_set.attribute.clone()));
    }
    let essay = essays
        .get(&doc.essay_id)
        .ok_or_else(|| InferenceError::MissingEssay(doc.essay_id.clone()))?;
    let (hits, total) = marked_hits(doc, m_set, tokenizer);
    let Some(c_value) = concentration_ratio::<f64>(hits, total) else {
        return Ok(Concentration::Excluded(doc.key()));
    };
    let mut covariates = essay.covariates.clone();
    if let Some(score) = essay.holistic_score {
        covariates.insert("holistic_score".into(), CovariateValue::Number(score));
    }
    Ok(Concentration::Sample(ConcentrationSample {
        essay_id: doc.essay_id.clone(),
        attribute: m_set.attribute.clone(),
        variant: doc.variant,
        model_id: doc.model_id.clone(),
        assignment_id: essay.assignment_id.clone(),
        c_value,
        n_tokens_filtered: total,
        covariates,
    }))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConcentrationBatch {
    pub samples: Vec<ConcentrationSample>,
    /// Documents left out because nothing survived filtering.
    pub excluded: Vec<FeedbackKey>,
}

pub fn concentration_batch<'a, I>(
    docs: I,
    essays: &EssayCollection,
    m_set: &MarkedSet,
    tokenizer: &Tokenizer,
) -> Result<ConcentrationBatch, InferenceError>
where
    I: IntoIterator<Item = &'a FeedbackDocument>,
{
    let mut batch = ConcentrationBatch::default();
    for doc in docs {
        match concentration(doc, essays, m_set, tokenizer)? {
            Concentration::Sample(s) => batch.samples.push(s),
            Concentration::Excluded(k) => batch.excluded.push(k),
        }
    }
    if !batch.excluded.is_empty() {
        log::warn!(
            "{}: excluded {} document(s) with no tokens after filtering",
            m_set.attribute,
            batch.excluded.len()
        );
    }
    Ok(batch)
}

/// Concentration of a pooled corpus: all hits over all filtered tokens.
pub fn corpus_concentration<'a, I>(docs: I, m_set: &MarkedSet, tokenizer: &Tokenizer) -> Option<f64>
where
    I: IntoIterator<Item = &'a FeedbackDocument>,
{
    let (hits, total) = docs
        .into_iter()
        .map(|d| marked_hits(d, m_set, tokenizer))
        .fold((0, 0), |(h, t), (dh, dt)| (h + dh, t + dt));
    concentration_ratio(hits, total)
}

fn default_outcome() -> String {
    "c_value".into()
}
fn default_conditions() -> Vec<Variant> {
    vec![Variant::Marked, Variant::Comparative]
}
fn default_fixed_effects() -> Vec<String> {
    vec!["assignment_id".into(), "model_id".into()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StandardErrors {
    #[default]
    Classical,
    Hc1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionSpec {
    #[serde(default = "default_outcome")]
    pub outcome: String,
    /// Condition dummies; `baseline` is the reference level.
    #[serde(default = "default_conditions")]
    pub conditions: Vec<Variant>,
    #[serde(default)]
    pub covariates: Vec<String>,
    /// Categorical controls; `assignment_id` and `model_id` name sample fields, anything else a
    /// covariate.
    #[serde(default = "default_fixed_effects")]
    pub fixed_effects: Vec<String>,
    /// Reference level per categorical column; the first sorted level otherwise.
    #[serde(default)]
    pub reference_levels: BTreeMap<String, String>,
    #[serde(default)]
    pub standard_errors: StandardErrors,
}

impl Default for RegressionSpec {
    fn default() -> Self {
        RegressionSpec {
            outcome: default_outcome(),
            conditions: default_conditions(),
            covariates: Vec::new(),
            fixed_effects: default_fixed_effects(),
            reference_levels: BTreeMap::new(),
            standard_errors: StandardErrors::Classical,
        }
    }
}

impl RegressionSpec {
    pub fn from_toml(src: &str) -> Result<Self, InferenceError> {
        let spec: RegressionSpec =
            toml::from_str(src).map_err(|e| InferenceError::InvalidSpec(e.to_string()))?;
        if spec.outcome != "c_value" {
            return Err(InferenceError::UnsupportedOutcome(spec.outcome));
        }
        if spec.conditions.contains(&Variant::Baseline) {
            return Err(InferenceError::InvalidSpec(
                "baseline is the reference condition and cannot be a dummy".into(),
            ));
        }
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, InferenceError> {
        let src = std::fs::read_to_string(path)
            .map_err(|e| InferenceError::InvalidSpec(format!("{}: {e}", path.display())))?;
        Self::from_toml(&src)
    }
}

pub const INTERCEPT: &str = "intercept";

/// Name of the dummy column for a condition.
pub fn condition_column(v: Variant) -> String {
    format!("variant[{v}]")
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix<T> {
    pub x: Matrix<T>,
    pub columns: Vec<String>,
    pub y: Vec<T>,
}

fn categorical_value(s: &ConcentrationSample, column: &str) -> Result<String, InferenceError> {
    match column {
        "assignment_id" => Ok(s.assignment_id.clone()),
        "model_id" => Ok(s.model_id.clone()),
        "variant" => Ok(s.variant.to_string()),
        other => s
            .covariates
            .get(other)
            .map(ToString::to_string)
            .ok_or_else(|| InferenceError::MissingCovariate {
                essay_id: s.essay_id.clone(),
                column: other.to_string(),
            }),
    }
}

fn push_dummies<T: Scalar>(
    samples: &[ConcentrationSample],
    column: &str,
    reference: Option<&String>,
    names: &mut Vec<String>,
    cols: &mut Vec<Vec<T>>,
) -> Result<(), InferenceError> {
    let values: Vec<String> = samples
        .iter()
        .map(|s| categorical_value(s, column))
        .collect::<Result<_, _>>()?;
    let levels: BTreeSet<&str> = values.iter().map(String::as_str).collect();
    let reference = reference
        .map(String::as_str)
        .filter(|r| levels.contains(r))
        .or_else(|| levels.iter().next().copied());
    for level in levels.iter().filter(|l| Some(**l) != reference) {
        names.push(format!("{column}[{level}]"));
        cols.push(
            values
                .iter()
                .map(|v| if v == level { T::one() } else { T::zero() })
                .collect(),
        );
    }
    Ok(())
}

/// Intercept, condition dummies, covariates (numeric pass-through, categorical dummy-coded) and
/// fixed-effect dummies. Reference levels are dropped.
pub fn design_matrix<T: Scalar>(
    samples: &[ConcentrationSample],
    spec: &RegressionSpec,
) -> Result<DesignMatrix<T>, InferenceError> {
    if spec.outcome != "c_value" {
        return Err(InferenceError::UnsupportedOutcome(spec.outcome.clone()));
    }
    let mut names = vec![INTERCEPT.to_string()];
    let mut cols: Vec<Vec<T>> = vec![vec![T::one(); samples.len()]];

    if !spec.conditions.is_empty() {
        let present: BTreeSet<Variant> = samples.iter().map(|s| s.variant).collect();
        if present.len() < 2 {
            return Err(InferenceError::SingleCondition(
                present.into_iter().collect(),
            ));
        }
        for &v in spec.conditions.iter().filter(|v| present.contains(v)) {
            names.push(condition_column(v));
            cols.push(
                samples
                    .iter()
                    .map(|s| if s.variant == v { T::one() } else { T::zero() })
                    .collect(),
            );
        }
    }

    for column in &spec.covariates {
        let cells: Vec<&CovariateValue> = samples
            .iter()
            .map(|s| {
                s.covariates
                    .get(column)
                    .ok_or_else(|| InferenceError::MissingCovariate {
                        essay_id: s.essay_id.clone(),
                        column: column.clone(),
                    })
            })
            .collect::<Result<_, _>>()?;
        let numeric: Option<Vec<T>> = cells
            .iter()
            .map(|c| match c {
                CovariateValue::Number(x) => T::from_f64(*x),
                CovariateValue::Text(_) => None,
            })
            .collect();
        match numeric {
            Some(values) => {
                names.push(column.clone());
                cols.push(values);
            }
            None => push_dummies(
                samples,
                column,
                spec.reference_levels.get(column),
                &mut names,
                &mut cols,
            )?,
        }
    }

    for fe in &spec.fixed_effects {
        push_dummies(
            samples,
            fe,
            spec.reference_levels.get(fe),
            &mut names,
            &mut cols,
        )?;
    }

    for (name, col) in names.iter().zip(&cols).skip(1) {
        if let Some(&first) = col.first() {
            if col.iter().all(|&v| v == first) {
                return Err(InferenceError::ConstantColumn(name.clone()));
            }
        }
    }

    Ok(DesignMatrix {
        x: Matrix::from_columns(&cols),
        columns: names,
        y: samples
            .iter()
            .map(|s| T::from_f64(s.c_value).expect("finite concentration"))
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionFit<T> {
    pub columns: Vec<String>,
    pub coefficients: Vec<T>,
    pub std_errors: Vec<T>,
    pub n_obs: usize,
    pub residual_df: usize,
    pub r_squared: T,
    pub rss: T,
    /// `rss / residual_df`.
    pub sigma2: T,
    pub standard_errors: StandardErrors,
}

impl<T: Scalar> RegressionFit<T> {
    fn index(&self, column: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == column)
    }

    pub fn coefficient(&self, column: &str) -> Option<T> {
        self.index(column).map(|i| self.coefficients[i])
    }

    pub fn std_error(&self, column: &str) -> Option<T> {
        self.index(column).map(|i| self.std_errors[i])
    }

    pub fn t_value(&self, column: &str) -> Option<T> {
        self.index(column)
            .map(|i| self.coefficients[i] / self.std_errors[i])
    }

    /// Two-sided p-value against a t distribution on `residual_df` degrees of freedom.
    pub fn p_value(&self, column: &str) -> Option<f64> {
        let t = self.t_value(column)?.to_f64_lossy();
        Some(two_sided_p(t, self.residual_df))
    }
}

pub fn two_sided_p(t: f64, df: usize) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("positive degrees of freedom");
    (2.0 * dist.cdf(-t.abs())).clamp(0.0, 1.0)
}

const RANK_TOLERANCE: f64 = 1e-10;

/// Least squares via Householder QR. Classical standard errors use
/// `sqrt(sigma2 * [(XᵀX)⁻¹]_kk)` with `sigma2 = RSS / (n - p)`; HC1 uses the
/// `n / (n - p)`-scaled sandwich.
pub fn ols_fit<T: Scalar>(
    x: &Matrix<T>,
    y: &[T],
    columns: &[String],
    standard_errors: StandardErrors,
) -> Result<RegressionFit<T>, InferenceError> {
    let (n, p) = (x.rows(), x.cols());
    assert_eq!(y.len(), n, "outcome length must match design rows");
    assert_eq!(columns.len(), p, "one name per design column");
    if n <= p {
        return Err(InferenceError::TooFewObservations {
            n_obs: n,
            n_columns: p,
        });
    }
    let qr = householder_qr(x, y, T::lit(RANK_TOLERANCE));
    if !qr.dependent.is_empty() {
        return Err(InferenceError::RankDeficient(
            qr.dependent.iter().map(|&k| columns[k].clone()).collect(),
        ));
    }
    let beta = back_substitute(&qr.r, &qr.qty[..p]);
    let fitted = x.mul_vec(&beta);
    let resid: Vec<T> = y.iter().zip(&fitted).map(|(&a, &b)| a - b).collect();
    let rss = resid.iter().fold(T::zero(), |acc, &e| acc + e * e);
    let residual_df = n - p;
    let sigma2 = rss / T::from_count(residual_df as u64);
    let mean = y.iter().fold(T::zero(), |acc, &v| acc + v) / T::from_count(n as u64);
    let tss = y
        .iter()
        .fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean));
    let r_squared = if tss > T::zero() {
        (T::one() - rss / tss).max(T::zero()).min(T::one())
    } else if rss == T::zero() {
        T::one()
    } else {
        T::zero()
    };

    let r_inv = upper_inverse(&qr.r);
    let variances: Vec<T> = match standard_errors {
        StandardErrors::Classical => (0..p)
            .map(|k| sigma2 * (k..p).fold(T::zero(), |acc, j| acc + r_inv[(k, j)] * r_inv[(k, j)]))
            .collect(),
        StandardErrors::Hc1 => {
            // (XᵀX)⁻¹ Xᵀ diag(e²) X (XᵀX)⁻¹ = R⁻¹ Bᵀ diag(e²) B R⁻ᵀ with B = X R⁻¹.
            let mut meat = Matrix::zeros(p, p);
            for i in 0..n {
                let row = x.row(i);
                let b: Vec<T> = (0..p)
                    .map(|j| (0..=j).fold(T::zero(), |acc, k| acc + row[k] * r_inv[(k, j)]))
                    .collect();
                let w = resid[i] * resid[i];
                for a in 0..p {
                    for c in 0..p {
                        meat[(a, c)] = meat[(a, c)] + w * b[a] * b[c];
                    }
                }
            }
            let scale = T::from_count(n as u64) / T::from_count(residual_df as u64);
            (0..p)
                .map(|k| {
                    let mut v = T::zero();
                    for a in k..p {
                        for c in k..p {
                            v = v + r_inv[(k, a)] * meat[(a, c)] * r_inv[(k, c)];
                        }
                    }
                    v * scale
                })
                .collect()
        }
    };
    Ok(RegressionFit {
        columns: columns.to_vec(),
        coefficients: beta,
        std_errors: variances
            .into_iter()
            .map(|v| v.max(T::zero()).sqrt())
            .collect(),
        n_obs: n,
        residual_df,
        r_squared,
        rss,
        sigma2,
        standard_errors,
    })
}

impl<T: Scalar> DesignMatrix<T> {
    pub fn fit(&self, standard_errors: StandardErrors) -> Result<RegressionFit<T>, InferenceError> {
        ols_fit(&self.x, &self.y, &self.columns, standard_errors)
    }
}

pub fn stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

/// `2.366*** (0.153)`.
pub fn format_cell(estimate: f64, std_error: f64, p: f64) -> String {
    format!("{estimate:.3}{} ({std_error:.3})", stars(p))
}

/// Signed whole-percent change relative to a baseline mean, e.g. `+78%`.
pub fn percent_change(estimate: f64, baseline_mean: f64) -> String {
    format!("{:+.0}%", 100.0 * estimate / baseline_mean)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub column: String,
    pub estimate: f64,
    pub std_error: f64,
    pub t_value: f64,
    pub p_value: f64,
    pub stars: &'static str,
    pub cell: String,
    /// Relative to the baseline mean, when one is supplied.
    pub percent_change: Option<String>,
}

pub fn summarize<T: Scalar>(
    fit: &RegressionFit<T>,
    focus: &[&str],
    baseline_mean: Option<f64>,
) -> Result<Vec<SummaryRow>, InferenceError> {
    focus
        .iter()
        .map(|&c| {
            let estimate = fit
                .coefficient(c)
                .ok_or_else(|| InferenceError::UnknownColumn(c.to_string()))?
                .to_f64_lossy();
            let std_error = fit.std_error(c).expect("same index").to_f64_lossy();
            let p_value = fit.p_value(c).expect("same index");
            Ok(SummaryRow {
                column: c.to_string(),
                estimate,
                std_error,
                t_value: estimate / std_error,
                p_value,
                stars: stars(p_value),
                cell: format_cell(estimate, std_error, p_value),
                percent_change: baseline_mean.map(|b| percent_change(estimate, b)),
            })
        })
        .collect()
}

/// One attribute's concentration regression with its baseline-condition mean.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeRegression {
    pub attribute: String,
    pub fit: RegressionFit<f64>,
    /// Mean concentration over baseline-condition samples only.
    pub baseline_mean: Option<f64>,
}

impl AttributeRegression {
    pub fn has_comparative(&self) -> bool {
        self.fit
            .coefficient(&condition_column(Variant::Comparative))
            .is_some()
    }
}

pub fn baseline_mean(samples: &[ConcentrationSample]) -> Option<f64> {
    let base: Vec<f64> = samples
        .iter()
        .filter(|s| s.variant == Variant::Baseline)
        .map(|s| s.c_value)
        .collect();
    (!base.is_empty()).then(|| base.iter().sum::<f64>() / base.len() as f64)
}

pub fn regress_attribute(
    attribute: &str,
    samples: &[ConcentrationSample],
    spec: &RegressionSpec,
) -> Result<AttributeRegression, InferenceError> {
    let design = design_matrix::<f64>(samples, spec)?;
    Ok(AttributeRegression {
        attribute: attribute.into(),
        fit: design.fit(spec.standard_errors)?,
        baseline_mean: baseline_mean(samples),
    })
}

const CONC_FIXED: [&str; 7] = [
    "essay_id",
    "attribute",
    "variant",
    "model_id",
    "assignment_id",
    "c_value",
    "n_tokens_filtered",
];

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> InferenceError + '_ {
    move |e| InferenceError::Csv {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// `essay_id, attribute, variant, model_id, assignment_id, c_value, n_tokens_filtered`, then one
/// column per covariate (sorted).
pub fn write_samples_csv(
    path: &Path,
    samples: &[ConcentrationSample],
) -> Result<(), InferenceError> {
    let covs: BTreeSet<&str> = samples
        .iter()
        .flat_map(|s| s.covariates.keys().map(String::as_str))
        .collect();
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let header: Vec<&str> = CONC_FIXED
        .iter()
        .copied()
        .chain(covs.iter().copied())
        .collect();
    w.write_record(&header).map_err(csv_err(path))?;
    for s in samples {
        let mut row = vec![
            s.essay_id.clone(),
            s.attribute.clone(),
            s.variant.to_string(),
            s.model_id.clone(),
            s.assignment_id.clone(),
            s.c_value.to_string(),
            s.n_tokens_filtered.to_string(),
        ];
        row.extend(covs.iter().map(|c| {
            s.covariates
                .get(*c)
                .map(ToString::to_string)
                .unwrap_or_default()
        }));
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| InferenceError::Csv {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn read_samples_csv(path: &Path) -> Result<Vec<ConcentrationSample>, InferenceError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header = r.headers().map_err(csv_err(path))?.clone();
    for (i, name) in CONC_FIXED.iter().enumerate() {
        if header.get(i) != Some(*name) {
            return Err(InferenceError::Csv {
                path: path.display().to_string(),
                message: format!("expected column {} to be '{name}'", i + 1),
            });
        }
    }
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let bad = |what: &str| InferenceError::Csv {
            path: path.display().to_string(),
            message: format!("row {}: bad {what}", line + 2),
        };
        let covariates = header
            .iter()
            .zip(rec.iter())
            .skip(CONC_FIXED.len())
            .filter(|(_, v)| !v.is_empty())
            .map(|(k, v)| (k.to_string(), CovariateValue::parse_cell(v)))
            .collect();
        out.push(ConcentrationSample {
            essay_id: rec[0].to_string(),
            attribute: rec[1].to_string(),
            variant: rec[2].parse().map_err(|_| bad("variant"))?,
            model_id: rec[3].to_string(),
            assignment_id: rec[4].to_string(),
            c_value: rec[5].parse().map_err(|_| bad("c_value"))?,
            n_tokens_filtered: rec[6].parse().map_err(|_| bad("n_tokens_filtered"))?,
            covariates,
        });
    }
    Ok(out)
}

/// One row per (attribute, term): estimate, standard error, t, p, stars, fit diagnostics and the
/// baseline mean.
pub fn write_fits_csv(path: &Path, fits: &[AttributeRegression]) -> Result<(), InferenceError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record([
        "attribute",
        "term",
        "estimate",
        "std_error",
        "t_value",
        "p_value",
        "stars",
        "n_obs",
        "residual_df",
        "r_squared",
        "baseline_mean",
        "percent_change",
    ])
    .map_err(csv_err(path))?;
    for reg in fits {
        let f = &reg.fit;
        for (i, term) in f.columns.iter().enumerate() {
            let t = f.coefficients[i] / f.std_errors[i];
            let p = two_sided_p(t, f.residual_df);
            w.write_record([
                reg.attribute.clone(),
                term.clone(),
                format!("{:.6}", f.coefficients[i]),
                format!("{:.6}", f.std_errors[i]),
                format!("{t:.4}"),
                format!("{p:.6e}"),
                stars(p).to_string(),
                f.n_obs.to_string(),
                f.residual_df.to_string(),
                format!("{:.6}", f.r_squared),
                reg.baseline_mean
                    .map(|m| format!("{m:.6}"))
                    .unwrap_or_default(),
                match reg.baseline_mean {
                    Some(m) if term.starts_with("variant[") => percent_change(f.coefficients[i], m),
                    _ => String::new(),
                },
            ])
            .map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(|e| InferenceError::Csv {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// A row of a fits CSV as read back for reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct FitRow {
    pub attribute: String,
    pub term: String,
    pub estimate: f64,
    pub std_error: f64,
    pub p_value: f64,
    pub stars: String,
    pub baseline_mean: Option<f64>,
    pub percent_change: Option<String>,
}

pub fn read_fits_csv(path: &Path) -> Result<Vec<FitRow>, InferenceError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header = r.headers().map_err(csv_err(path))?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| InferenceError::Csv {
                path: path.display().to_string(),
                message: format!("missing column '{name}'"),
            })
    };
    let pc = col("percent_change")?;
    let (a, t, e, s, p, st, b) = (
        col("attribute")?,
        col("term")?,
        col("estimate")?,
        col("std_error")?,
        col("p_value")?,
        col("stars")?,
        col("baseline_mean")?,
    );
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let num = |i: usize| -> Result<f64, InferenceError> {
            rec[i].parse().map_err(|_| InferenceError::Csv {
                path: path.display().to_string(),
                message: format!("row {}: bad number '{}'", line + 2, &rec[i]),
            })
        };
        out.push(FitRow {
            attribute: rec[a].to_string(),
            term: rec[t].to_string(),
            estimate: num(e)?,
            std_error: num(s)?,
            p_value: num(p)?,
            stars: rec[st].to_string(),
            baseline_mean: if rec[b].is_empty() {
                None
            } else {
                Some(num(b)?)
            },
            percent_change: (!rec[pc].is_empty()).then(|| rec[pc].to_string()),
        });
    }
    Ok(out)
}
