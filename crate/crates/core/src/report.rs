//! End-to-end orchestration and Markdown rendering of the result tables.
//!
//! A run writes generation checkpoints under `<out>/runs` and everything derived from them under
//! `<out>/report`:
//!
//! ```text
//! report/
//!   marked_words/<attribute>.csv
//!   conc.csv                  concentration samples of every analysed attribute
//!   conc_excluded.csv         documents with no tokens left after filtering
//!   regression/<attribute>.csv
//!   table6.csv                all regression terms of all attributes
//!   sweep/<attribute>.csv     when a sweep is configured
//!   stability/<attribute>__by_<slice>.csv
//!   name_fits.csv             when a name registry is configured
//!   summary.md
//! ```
//!
//! Report files carry no timestamps, so identical inputs and seeds give identical bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::error::Error as StdError;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::corpus::{
    load_essays, load_feedback_dir, ColumnMap, EssayCollection, FeedbackCollection,
    FeedbackDocument, FeedbackKey, Variant, BASELINE_ATTRIBUTE,
};
use crate::inference::{
    concentration_batch, condition_column, format_cell, read_fits_csv, regress_attribute,
    write_fits_csv, write_samples_csv, AttributeRegression, ConcentrationBatch, FitRow,
    RegressionSpec, StandardErrors,
};
use crate::lexstats::{
    marked_words, per_model_log_odds, write_marked_csv, AlphaPrior, Facet, MarkedFilters,
    MarkedSet, Tokenizer, TokenizerConfig,
};
use crate::llmgen::{run_batch, BatchOutcome, GenerationJob, ProviderConfig};
use crate::promptgen::{
    build_name_prompt, build_prompt, enumerate_conditions, AttributeSpec, NameRegistry,
    PromptConfig, PromptError,
};
use crate::robustness::{
    name_audit, sample_size_sweep, slice_marked_sets, stability_report, write_sweep_csv,
    SensitivityPoint, SliceBy, SweepConfig,
};

type BoxError = Box<dyn StdError + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Generate,
    MarkedWords,
    Concentration,
    Regress,
    Sweep,
    Stability,
    NameAudit,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Generate => "generate",
            Stage::MarkedWords => "marked-words",
            Stage::Concentration => "concentration",
            Stage::Regress => "regress",
            Stage::Sweep => "sweep",
            Stage::Stability => "stability",
            Stage::NameAudit => "name-audit",
            Stage::Report => "report",
        })
    }
}

#[derive(Debug, Error)]
#[error("{stage} stage failed: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: BoxError,
}

impl PipelineError {
    pub fn new(stage: Stage, source: impl Into<BoxError>) -> Self {
        PipelineError {
            stage,
            source: source.into(),
        }
    }
}

fn at<E: Into<BoxError>>(stage: Stage) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::new(stage, e)
}

fn io_at(stage: Stage, path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |e| PipelineError::new(stage, format!("{}: {e}", path.display()))
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReportError {
    #[error("no {0} to render")]
    Empty(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
pub struct SweepOptions {
    #[serde(default = "default_step")]
    pub step: usize,
}

fn default_step() -> usize {
    100
}

/// The pipeline config file. Relative paths resolve against the file's directory.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub essays: PathBuf,
    pub attributes: PathBuf,
    pub providers: Vec<PathBuf>,
    pub lexicon: PathBuf,
    /// Default specification when absent.
    #[serde(default)]
    pub regression: Option<PathBuf>,
    /// Enables name-only prompts and the name audit.
    #[serde(default)]
    pub names: Option<PathBuf>,
    #[serde(default)]
    pub columns: ColumnMap,
    /// Restricts generation and analysis to these attributes; all when empty.
    #[serde(default)]
    pub only_attributes: Vec<String>,
    #[serde(default)]
    pub filters: MarkedFilters,
    #[serde(default)]
    pub prior: AlphaPrior,
    #[serde(default)]
    pub sweep: Option<SweepOptions>,
    #[serde(default)]
    pub stability: bool,
}

impl PipelineConfig {
    pub fn from_toml(src: &str, base: &Path) -> Result<Self, PipelineError> {
        let mut cfg: PipelineConfig = toml::from_str(src).map_err(at(Stage::Config))?;
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.essays);
        fix(&mut cfg.attributes);
        fix(&mut cfg.lexicon);
        cfg.providers.iter_mut().for_each(fix);
        cfg.regression.iter_mut().for_each(fix);
        cfg.names.iter_mut().for_each(fix);
        if cfg.providers.is_empty() {
            return Err(PipelineError::new(Stage::Config, "no providers configured"));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let src = fs::read_to_string(path).map_err(io_at(Stage::Config, path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&src, base).map_err(|e| {
            PipelineError::new(Stage::Config, format!("{}: {}", path.display(), e.source))
        })
    }

    /// Parses every referenced file.
    pub fn load_inputs(&self) -> Result<Inputs, PipelineError> {
        let prompts = PromptConfig::load(&self.attributes).map_err(at(Stage::Config))?;
        for name in &self.only_attributes {
            if prompts.attribute(name).is_none() {
                return Err(PipelineError::new(
                    Stage::Config,
                    format!("only_attributes names unknown attribute '{name}'"),
                ));
            }
        }
        let mut columns = self.columns.clone();
        if columns.assignments.is_empty() {
            columns.assignments = prompts.assignments.iter().map(|a| a.id.clone()).collect();
        }
        let essays = load_essays(&self.essays, &columns).map_err(at(Stage::Config))?;
        let providers = self
            .providers
            .iter()
            .map(|p| ProviderConfig::load(p))
            .collect::<Result<Vec<_>, _>>()
            .map_err(at(Stage::Config))?;
        let lexicon = TokenizerConfig::load(&self.lexicon).map_err(at(Stage::Config))?;
        let tokenizer = Tokenizer::new(&lexicon).map_err(at(Stage::Config))?;
        let spec = match &self.regression {
            Some(p) => RegressionSpec::load(p).map_err(at(Stage::Config))?,
            None => RegressionSpec::default(),
        };
        let names = self
            .names
            .as_deref()
            .map(NameRegistry::load)
            .transpose()
            .map_err(at(Stage::Config))?;
        Ok(Inputs {
            prompts,
            essays,
            providers,
            tokenizer,
            spec,
            names,
            only_attributes: self.only_attributes.clone(),
            filters: self.filters,
            prior: self.prior,
            sweep: self.sweep,
            stability: self.stability,
        })
    }
}

/// Everything a run needs, parsed.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub prompts: PromptConfig,
    pub essays: EssayCollection,
    pub providers: Vec<ProviderConfig>,
    pub tokenizer: Tokenizer,
    pub spec: RegressionSpec,
    pub names: Option<NameRegistry>,
    pub only_attributes: Vec<String>,
    pub filters: MarkedFilters,
    pub prior: AlphaPrior,
    pub sweep: Option<SweepOptions>,
    pub stability: bool,
}

impl Inputs {
    /// Attributes to analyse, in registry order.
    pub fn attributes(&self) -> Vec<&AttributeSpec> {
        self.prompts
            .attributes
            .iter()
            .filter(|a| self.only_attributes.is_empty() || self.only_attributes.contains(&a.name))
            .collect()
    }
}

/// One student name per essay: names are dealt round-robin over a seeded permutation of the
/// essays, which balances categories.
pub fn assign_names<'a>(
    essays: &EssayCollection,
    registry: &'a NameRegistry,
    seed: u64,
) -> BTreeMap<String, &'a crate::promptgen::NameSpec> {
    let mut ids: Vec<&str> = essays.iter().map(|e| e.essay_id.as_str()).collect();
    ids.sort_unstable();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    if registry.names.is_empty() {
        return BTreeMap::new();
    }
    ids.into_iter()
        .enumerate()
        .map(|(i, id)| (id.to_string(), &registry.names[i % registry.names.len()]))
        .collect()
}

/// Jobs for every essay under every condition of `attributes`, plus one name-only prompt per
/// essay when a registry is given.
pub fn plan_jobs(
    prompts: &PromptConfig,
    essays: &EssayCollection,
    model_id: &str,
    attributes: &[&AttributeSpec],
    names: Option<&NameRegistry>,
    seed: u64,
) -> Result<Vec<GenerationJob>, PromptError> {
    let owned: Vec<AttributeSpec> = attributes.iter().map(|a| (*a).clone()).collect();
    let conditions = enumerate_conditions(&owned);
    let assigned = names
        .map(|r| assign_names(essays, r, seed))
        .unwrap_or_default();
    let mut jobs = Vec::new();
    for essay in essays.iter() {
        let assignment = prompts
            .assignment_text(&essay.assignment_id)
            .ok_or_else(|| {
                PromptError::InvalidConfig(format!(
                    "essay {} uses unknown assignment '{}'",
                    essay.essay_id, essay.assignment_id
                ))
            })?;
        for c in &conditions {
            let spec = owned.iter().find(|a| a.name == c.attribute);
            let prompt = build_prompt(&prompts.template, essay, assignment, spec, c.variant)?;
            jobs.push(GenerationJob::new(
                &essay.essay_id,
                &c.attribute,
                c.variant,
                model_id,
                prompt,
            ));
        }
        if let Some(name) = assigned.get(&essay.essay_id) {
            let prompt = build_name_prompt(&prompts.template, essay, assignment, name)?;
            let mut job = GenerationJob::new(
                &essay.essay_id,
                &name.name,
                Variant::Named,
                model_id,
                prompt,
            );
            job.name = Some(name.name.clone());
            jobs.push(job);
        }
    }
    Ok(jobs)
}

/// Runs every provider's jobs into `runs_dir`.
pub fn generate(
    inputs: &Inputs,
    runs_dir: &Path,
    seed: u64,
) -> Result<Vec<BatchOutcome>, PipelineError> {
    let attributes = inputs.attributes();
    let mut outcomes = Vec::new();
    for cfg in &inputs.providers {
        let provider = cfg.build_provider().map_err(at(Stage::Generate))?;
        let mut jobs = plan_jobs(
            &inputs.prompts,
            &inputs.essays,
            &cfg.model_id,
            &attributes,
            inputs.names.as_ref(),
            seed,
        )
        .map_err(at(Stage::Generate))?;
        log::info!("{}: {} job(s)", cfg.model_id, jobs.len());
        let outcome =
            run_batch(&mut jobs, provider.as_ref(), cfg, runs_dir).map_err(at(Stage::Generate))?;
        log::info!(
            "{}: {} document(s), {} resumed, {} failed",
            cfg.model_id,
            outcome.documents.len(),
            outcome.resumed,
            outcome.failed.len()
        );
        outcomes.push(outcome);
    }
    Ok(outcomes)
}

/// Marked and contrast documents of one attribute.
pub fn contrast_documents<'a>(
    docs: &'a FeedbackCollection,
    attribute: &'a AttributeSpec,
) -> (Vec<&'a FeedbackDocument>, Vec<&'a FeedbackDocument>) {
    (
        docs.select(&attribute.name, Variant::Marked).collect(),
        docs.select(attribute.contrast_attribute(), attribute.contrast_variant())
            .collect(),
    )
}

pub fn attribute_marked_sets(
    docs: &FeedbackCollection,
    attribute: &AttributeSpec,
    tokenizer: &Tokenizer,
    filters: &MarkedFilters,
    prior: AlphaPrior,
) -> Result<(MarkedSet, MarkedSet), PipelineError> {
    let (marked, contrast) = contrast_documents(docs, attribute);
    let per_model = per_model_log_odds::<f64>(&marked, &contrast, tokenizer, prior)
        .map_err(at(Stage::MarkedWords))?;
    Ok(marked_words(
        &attribute.name,
        &per_model,
        filters,
        tokenizer,
    ))
}

/// Concentration in the attribute's marked set for its marked, comparative and baseline
/// documents.
pub fn attribute_concentration(
    docs: &FeedbackCollection,
    attribute: &AttributeSpec,
    essays: &EssayCollection,
    m_set: &MarkedSet,
    tokenizer: &Tokenizer,
) -> Result<ConcentrationBatch, PipelineError> {
    let selected = docs
        .select(&attribute.name, Variant::Marked)
        .chain(docs.select(&attribute.name, Variant::Comparative))
        .chain(docs.select(BASELINE_ATTRIBUTE, Variant::Baseline));
    concentration_batch(selected, essays, m_set, tokenizer).map_err(at(Stage::Concentration))
}

pub fn write_excluded_csv(path: &Path, rows: &[(String, FeedbackKey)]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["marked_set", "essay_id", "attribute", "variant", "model_id"])?;
    for (set, k) in rows {
        w.write_record([
            set.as_str(),
            &k.essay_id,
            &k.attribute,
            k.variant.as_str(),
            &k.model_id,
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    /// Analyse existing runs without generating.
    pub skip_generate: bool,
    /// Seeds name assignment and the sweep permutation.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineReport {
    pub report_dir: PathBuf,
    pub attributes: Vec<String>,
    /// Attributes left out of concentration and regression for lack of marked words.
    pub skipped: Vec<String>,
    pub n_documents: usize,
    pub n_failed: usize,
}

fn create_dir(stage: Stage, dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(io_at(stage, dir))
}

/// Generation (unless skipped), then analysis of everything in `<out>/runs`.
pub fn run_pipeline(
    config: &PipelineConfig,
    out: &Path,
    options: RunOptions,
) -> Result<PipelineReport, PipelineError> {
    let inputs = config.load_inputs()?;
    let runs = out.join("runs");
    let mut n_failed = 0;
    if options.skip_generate {
        if !runs.is_dir() {
            return Err(PipelineError::new(
                Stage::Generate,
                format!(
                    "{} does not exist; run without --skip-generate first",
                    runs.display()
                ),
            ));
        }
    } else {
        create_dir(Stage::Generate, &runs)?;
        n_failed = generate(&inputs, &runs, options.seed)?
            .iter()
            .map(|o| o.failed.len())
            .sum();
    }
    let docs = load_feedback_dir(&runs).map_err(at(Stage::Generate))?;
    let mut report = analyze(&inputs, &docs, &out.join("report"), options.seed)?;
    report.n_failed = n_failed;
    Ok(report)
}

/// Every analysis stage on a loaded corpus, writing into `report_dir`.
pub fn analyze(
    inputs: &Inputs,
    docs: &FeedbackCollection,
    report_dir: &Path,
    seed: u64,
) -> Result<PipelineReport, PipelineError> {
    let attributes = inputs.attributes();
    let marked_dir = report_dir.join("marked_words");
    let regression_dir = report_dir.join("regression");
    create_dir(Stage::MarkedWords, &marked_dir)?;
    create_dir(Stage::Regress, &regression_dir)?;

    let mut sets: Vec<(String, MarkedSet, MarkedSet)> = Vec::new();
    for attr in &attributes {
        let (m, c) =
            attribute_marked_sets(docs, attr, &inputs.tokenizer, &inputs.filters, inputs.prior)?;
        write_marked_csv(&marked_dir.join(format!("{}.csv", attr.name)), &m, &c)
            .map_err(at(Stage::MarkedWords))?;
        sets.push((attr.name.clone(), m, c));
    }

    let mut samples = Vec::new();
    let mut excluded = Vec::new();
    let mut fits = Vec::new();
    let mut skipped = Vec::new();
    for (attr, (_, m_set, _)) in attributes.iter().zip(&sets) {
        if m_set.is_empty() {
            log::warn!(
                "{}: no marked words; skipping concentration and regression",
                attr.name
            );
            skipped.push(attr.name.clone());
            continue;
        }
        let batch = attribute_concentration(docs, attr, &inputs.essays, m_set, &inputs.tokenizer)?;
        excluded.extend(
            batch
                .excluded
                .iter()
                .map(|k| (attr.name.clone(), k.clone())),
        );
        let fit = regress_attribute(&attr.name, &batch.samples, &inputs.spec)
            .map_err(|e| PipelineError::new(Stage::Regress, format!("{}: {e}", attr.name)))?;
        write_fits_csv(
            &regression_dir.join(format!("{}.csv", attr.name)),
            std::slice::from_ref(&fit),
        )
        .map_err(at(Stage::Regress))?;
        samples.extend(batch.samples);
        fits.push(fit);
    }
    write_samples_csv(&report_dir.join("conc.csv"), &samples).map_err(at(Stage::Concentration))?;
    write_excluded_csv(&report_dir.join("conc_excluded.csv"), &excluded)
        .map_err(at(Stage::Concentration))?;
    let table6 = report_dir.join("table6.csv");
    write_fits_csv(&table6, &fits).map_err(at(Stage::Regress))?;

    let mut sweeps: Vec<(String, Vec<SensitivityPoint>)> = Vec::new();
    if let Some(opts) = inputs.sweep {
        let dir = report_dir.join("sweep");
        create_dir(Stage::Sweep, &dir)?;
        let cfg = SweepConfig {
            step: opts.step,
            seed,
            filters: inputs.filters,
            prior: inputs.prior,
        };
        for (attr, (_, m_set, _)) in attributes.iter().zip(&sets) {
            if m_set.is_empty() {
                continue;
            }
            let (marked, contrast) = contrast_documents(docs, attr);
            let points = sample_size_sweep(&attr.name, &marked, &contrast, &inputs.tokenizer, &cfg)
                .map_err(at(Stage::Sweep))?;
            write_sweep_csv(&dir.join(format!("{}.csv", attr.name)), &points)
                .map_err(at(Stage::Sweep))?;
            sweeps.push((attr.name.clone(), points));
        }
    }

    let mut stability_files = Vec::new();
    if inputs.stability {
        let dir = report_dir.join("stability");
        create_dir(Stage::Stability, &dir)?;
        for attr in &attributes {
            let (marked, contrast) = contrast_documents(docs, attr);
            for (by, label) in [
                (SliceBy::Assignment, "assignment"),
                (SliceBy::Model, "model"),
            ] {
                let slices = slice_marked_sets(
                    &attr.name,
                    &marked,
                    &contrast,
                    &inputs.essays,
                    by,
                    &inputs.tokenizer,
                    &inputs.filters,
                    inputs.prior,
                )
                .map_err(at(Stage::Stability))?;
                if slices.len() < 2 {
                    log::warn!(
                        "{}: fewer than two {label} slices; no stability matrix",
                        attr.name
                    );
                    continue;
                }
                let matrix = stability_report(&slices).map_err(at(Stage::Stability))?;
                let file = format!("{}__by_{label}.csv", attr.name);
                matrix
                    .write_csv(&dir.join(&file))
                    .map_err(at(Stage::Stability))?;
                stability_files.push(format!("stability/{file}"));
            }
        }
    }

    let mut name_rows = Vec::new();
    if let Some(registry) = &inputs.names {
        let named: Vec<&FeedbackDocument> = docs
            .iter()
            .filter(|d| d.variant == Variant::Named)
            .collect();
        let m_sets: BTreeMap<String, MarkedSet> = sets
            .iter()
            .filter(|(_, m, _)| !m.is_empty())
            .map(|(a, m, _)| (a.clone(), m.clone()))
            .collect();
        if named.is_empty() || m_sets.is_empty() {
            log::warn!("name audit skipped: no named documents or no marked sets");
        } else {
            let audit = name_audit(
                &named,
                &inputs.essays,
                registry,
                &m_sets,
                &inputs.tokenizer,
                &inputs.spec,
            )
            .map_err(at(Stage::NameAudit))?;
            let path = report_dir.join("name_fits.csv");
            let ordered: Vec<AttributeRegression> = attributes
                .iter()
                .filter_map(|a| audit.get(&a.name).cloned())
                .collect();
            write_fits_csv(&path, &ordered).map_err(at(Stage::NameAudit))?;
            name_rows = read_fits_csv(&path).map_err(at(Stage::NameAudit))?;
        }
    }

    let models = docs.model_ids();
    let table_rows = regression_rows(&read_fits_csv(&table6).map_err(at(Stage::Report))?);
    let summary = render_summary(&SummaryInputs {
        models: &models,
        sets: &sets,
        regression: &table_rows,
        skipped: &skipped,
        standard_errors: inputs.spec.standard_errors,
        sweeps: &sweeps,
        stability_files: &stability_files,
        name_rows: &name_rows,
    })
    .map_err(at(Stage::Report))?;
    let path = report_dir.join("summary.md");
    fs::write(&path, summary).map_err(io_at(Stage::Report, &path))?;

    Ok(PipelineReport {
        report_dir: report_dir.to_path_buf(),
        attributes: attributes.iter().map(|a| a.name.clone()).collect(),
        skipped,
        n_documents: docs.len(),
        n_failed: 0,
    })
}

pub const EMPTY_SIDE: &str = "—";
pub const NO_CONDITION: &str = "---";

/// Marker for a facet: content words in italics, evaluative words underlined, forms of address in
/// bold.
pub fn facet_marker(word: &str, facet: Option<Facet>) -> String {
    let shown = word.replace('_', " ");
    match facet {
        None => shown,
        Some(Facet::Content) => format!("*{shown}*"),
        Some(Facet::Evaluation) => format!("<u>{shown}</u>"),
        Some(Facet::Address) => format!("**{shown}**"),
    }
}

fn side_cell(set: &MarkedSet) -> String {
    if set.is_empty() {
        return EMPTY_SIDE.to_string();
    }
    set.entries
        .iter()
        .map(|e| facet_marker(&e.word, e.facet))
        .collect::<Vec<_>>()
        .join(", ")
}

/// One row per attribute: words over-represented under the marked prompt, then under the
/// contrast prompt.
pub fn emit_marked_table(rows: &[(String, MarkedSet, MarkedSet)]) -> Result<String, ReportError> {
    if rows.is_empty() {
        return Err(ReportError::Empty("marked sets"));
    }
    let mut out = String::from(
        "| Attribute | Words students see more | Words students see less |\n|---|---|---|\n",
    );
    for (attr, marked, comparative) in rows {
        writeln!(
            out,
            "| {attr} | {} | {} |",
            side_cell(marked),
            side_cell(comparative)
        )
        .unwrap();
    }
    let facets: BTreeSet<Facet> = rows
        .iter()
        .flat_map(|(_, m, c)| m.entries.iter().chain(&c.entries))
        .filter_map(|e| e.facet)
        .collect();
    if !facets.is_empty() {
        let legend: Vec<String> = facets
            .iter()
            .map(|f| format!("{} = {}", facet_marker("word", Some(*f)), f.as_str()))
            .collect();
        writeln!(out, "\nMarkers: {}.", legend.join(", ")).unwrap();
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EffectCell {
    pub estimate: f64,
    pub std_error: f64,
    pub p_value: f64,
    pub percent_change: Option<String>,
}

impl EffectCell {
    pub fn text(&self) -> String {
        format_cell(self.estimate, self.std_error, self.p_value)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionRow {
    pub attribute: String,
    pub marked: Option<EffectCell>,
    pub comparative: Option<EffectCell>,
    pub baseline_mean: Option<f64>,
}

impl RegressionRow {
    pub fn from_fit(reg: &AttributeRegression) -> Self {
        let cell = |v: Variant| {
            let col = condition_column(v);
            let estimate = reg.fit.coefficient(&col)?;
            Some(EffectCell {
                estimate,
                std_error: reg.fit.std_error(&col)?,
                p_value: reg.fit.p_value(&col)?,
                percent_change: reg
                    .baseline_mean
                    .map(|m| crate::inference::percent_change(estimate, m)),
            })
        };
        RegressionRow {
            attribute: reg.attribute.clone(),
            marked: cell(Variant::Marked),
            comparative: cell(Variant::Comparative),
            baseline_mean: reg.baseline_mean,
        }
    }
}

/// Groups fit rows read from a fits CSV by attribute, keeping file order.
pub fn regression_rows(rows: &[FitRow]) -> Vec<RegressionRow> {
    let mut out: Vec<RegressionRow> = Vec::new();
    for r in rows {
        if out.last().map(|x| &x.attribute) != Some(&r.attribute) {
            out.push(RegressionRow {
                attribute: r.attribute.clone(),
                marked: None,
                comparative: None,
                baseline_mean: r.baseline_mean,
            });
        }
        let row = out.last_mut().expect("pushed above");
        let cell = EffectCell {
            estimate: r.estimate,
            std_error: r.std_error,
            p_value: r.p_value,
            percent_change: r.percent_change.clone(),
        };
        if r.term == condition_column(Variant::Marked) {
            row.marked = Some(cell);
        } else if r.term == condition_column(Variant::Comparative) {
            row.comparative = Some(cell);
        }
    }
    out
}

/// Condition effects on concentration: estimate with stars and standard error per prompt, the
/// relative change against the baseline mean, and the baseline mean itself.
pub fn emit_regression_table(rows: &[RegressionRow]) -> Result<String, ReportError> {
    if rows.is_empty() {
        return Err(ReportError::Empty("regression fits"));
    }
    let mut out = String::from(
        "| Attribute | Marked prompt | Change | Comparative prompt | Change | Baseline mean |\n\
         |---|---|---|---|---|---|\n",
    );
    let cells = |c: &Option<EffectCell>| match c {
        Some(c) => (
            c.text(),
            c.percent_change
                .clone()
                .unwrap_or_else(|| NO_CONDITION.into()),
        ),
        None => (NO_CONDITION.to_string(), NO_CONDITION.to_string()),
    };
    for r in rows {
        let (m, mp) = cells(&r.marked);
        let (c, cp) = cells(&r.comparative);
        let base = r
            .baseline_mean
            .map(|b| format!("{b:.3}"))
            .unwrap_or_else(|| NO_CONDITION.into());
        writeln!(
            out,
            "| {} | {m} | {mp} | {c} | {cp} | {base} |",
            r.attribute
        )
        .unwrap();
    }
    Ok(out)
}

struct SummaryInputs<'a> {
    models: &'a [String],
    sets: &'a [(String, MarkedSet, MarkedSet)],
    regression: &'a [RegressionRow],
    skipped: &'a [String],
    standard_errors: StandardErrors,
    sweeps: &'a [(String, Vec<SensitivityPoint>)],
    stability_files: &'a [String],
    name_rows: &'a [FitRow],
}

fn render_summary(s: &SummaryInputs<'_>) -> Result<String, ReportError> {
    let mut out = String::from("# Lexical bias audit\n\n");
    writeln!(out, "Models: {}.\n", s.models.join(", ")).unwrap();
    out.push_str("## Marked words\n\n");
    out.push_str(&emit_marked_table(s.sets)?);
    out.push_str("\n## Concentration regressions\n\n");
    if s.regression.is_empty() {
        out.push_str("No attribute had a non-empty marked set.\n");
    } else {
        out.push_str(&emit_regression_table(s.regression)?);
        let se = match s.standard_errors {
            StandardErrors::Classical => "classical",
            StandardErrors::Hc1 => "HC1",
        };
        writeln!(
            out,
            "\nStandard errors ({se}) in parentheses. * p < .05, ** p < .01, *** p < .001."
        )
        .unwrap();
    }
    if !s.skipped.is_empty() {
        writeln!(
            out,
            "\nNo marked words, not regressed: {}.",
            s.skipped.join(", ")
        )
        .unwrap();
    }
    if !s.sweeps.is_empty() {
        out.push_str("\n## Sample-size sensitivity\n\n");
        let grid: Vec<usize> = s.sweeps[0].1.iter().map(|p| p.n_essays).collect();
        let head: Vec<String> = grid.iter().map(|n| format!("n={n}")).collect();
        writeln!(out, "| Attribute | {} |", head.join(" | ")).unwrap();
        writeln!(out, "|---|{}", "---|".repeat(grid.len())).unwrap();
        for (attr, points) in s.sweeps {
            let cells: Vec<String> = points
                .iter()
                .map(|p| format!("{:.4}", p.prop_significant))
                .collect();
            writeln!(out, "| {attr} | {} |", cells.join(" | ")).unwrap();
        }
    }
    if !s.stability_files.is_empty() {
        out.push_str("\n## Stability\n\nPairwise overlap matrices:\n\n");
        for f in s.stability_files {
            writeln!(out, "- `{f}`").unwrap();
        }
    }
    if !s.name_rows.is_empty() {
        out.push_str("\n## Name audit\n\n| Attribute | Term | Estimate |\n|---|---|---|\n");
        for r in s
            .name_rows
            .iter()
            .filter(|r| r.term.starts_with("name_race[") || r.term.starts_with("name_gender["))
        {
            writeln!(
                out,
                "| {} | {} | {} |",
                r.attribute,
                r.term,
                format_cell(r.estimate, r.std_error, r.p_value)
            )
            .unwrap();
        }
    }
    Ok(out)
}
