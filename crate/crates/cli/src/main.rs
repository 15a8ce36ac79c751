//! `audit`: command-line front end for the lexical bias audit.
//!
//! Stage subcommands take their inputs from explicit flags, falling back to the files named in the
//! pipeline config given with `--config`. Exit status is 0 on success, 1 for usage or
//! configuration errors and 2 when a stage fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use markaudit::corpus::{
    load_essays, load_feedback_dir, EssayCollection, FeedbackCollection, Variant,
};
use markaudit::inference::{
    read_samples_csv, regress_attribute, write_fits_csv, write_samples_csv, RegressionSpec,
};
use markaudit::lexstats::{
    read_marked_csv, write_marked_csv, AlphaPrior, MarkedFilters, MarkedSet, Tokenizer,
    TokenizerConfig,
};
use markaudit::llmgen::{run_batch, ProviderConfig};
use markaudit::promptgen::{AttributeSpec, NameRegistry, PromptConfig};
use markaudit::report::{
    analyze, attribute_concentration, attribute_marked_sets, contrast_documents, plan_jobs,
    run_pipeline, write_excluded_csv, PipelineConfig, PipelineError, RunOptions, Stage,
};
use markaudit::robustness::{
    name_audit, sample_size_sweep, slice_marked_sets, stability_report, write_sweep_csv, SliceBy,
    SweepConfig,
};

#[derive(Parser, Debug)]
#[command(
    name = "audit",
    version,
    about = "Audit LLM writing feedback for attribute-conditioned lexical bias"
)]
struct Cli {
    /// Seeds name assignment and sweep subsampling.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Pipeline config (TOML) supplying default input paths.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Inputs {
    #[arg(long)]
    essays: Option<PathBuf>,
    #[arg(long)]
    attributes: Option<PathBuf>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Selection {
    /// Feedback runs directory.
    #[arg(long)]
    runs: PathBuf,
    /// Restrict to these attributes (repeatable).
    #[arg(long = "attribute")]
    only: Vec<String>,
    #[arg(long, default_value_t = 1.96)]
    z_threshold: f64,
    #[arg(long, default_value_t = 30)]
    min_count: u64,
    #[arg(long, default_value_t = 2)]
    min_models: usize,
    #[arg(long, default_value_t = 20)]
    top_k: usize,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Slices {
    Assignment,
    Model,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build prompts and collect feedback into a checkpointed runs directory.
    Generate {
        #[command(flatten)]
        inputs: Inputs,
        /// Provider config (repeatable).
        #[arg(long = "provider")]
        providers: Vec<PathBuf>,
        #[arg(long)]
        names: Option<PathBuf>,
        #[arg(long = "attribute")]
        only: Vec<String>,
    },
    /// Select marked words per attribute; writes `<attribute>.csv` files.
    MarkedWords {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        selection: Selection,
    },
    /// Marked-word concentration of every document; writes conc.csv.
    Concentration {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        runs: PathBuf,
        /// Directory of marked-word CSVs.
        #[arg(long)]
        marked_sets: PathBuf,
        #[arg(long = "attribute")]
        only: Vec<String>,
        #[arg(long, default_value_t = 20)]
        top_k: usize,
    },
    /// Regress concentration on prompt condition, one fit per attribute.
    Regress {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Sample-size sensitivity of one attribute's marked words.
    Sweep {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        selection: Selection,
        #[arg(long, default_value_t = 100)]
        step: usize,
    },
    /// Overlap of marked words computed on separate slices of the data.
    Stability {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        selection: Selection,
        #[arg(long, value_enum, default_value = "assignment")]
        slices: Slices,
    },
    /// Regress concentration of name-only feedback on name categories.
    NameAudit {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        names: Option<PathBuf>,
        #[arg(long)]
        marked_sets: PathBuf,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        top_k: usize,
    },
    /// Analyse existing runs under `<out>/runs` and write `<out>/report`.
    Report,
    /// Full pipeline: generate, analyse, report.
    Run {
        #[arg(long)]
        skip_generate: bool,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Pipeline(PipelineError),
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        CliError::Pipeline(e)
    }
}

fn stage<E: Into<Box<dyn std::error::Error + Send + Sync>>>(
    s: Stage,
) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Pipeline(PipelineError::new(s, e))
}

fn config_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

struct Context {
    pipeline: Option<PipelineConfig>,
    seed: u64,
    out: Option<PathBuf>,
}

impl Context {
    fn out(&self) -> Result<&Path, CliError> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Usage("--out is required".into()))
    }

    fn path(
        &self,
        given: &Option<PathBuf>,
        pick: fn(&PipelineConfig) -> Option<&PathBuf>,
        flag: &str,
    ) -> Result<PathBuf, CliError> {
        given
            .clone()
            .or_else(|| self.pipeline.as_ref().and_then(pick).cloned())
            .ok_or_else(|| CliError::Usage(format!("--{flag} is required (or --config naming it)")))
    }

    fn prompts(&self, inputs: &Inputs) -> Result<PromptConfig, CliError> {
        let p = self.path(&inputs.attributes, |c| Some(&c.attributes), "attributes")?;
        PromptConfig::load(&p).map_err(config_err)
    }

    fn essays(&self, inputs: &Inputs, prompts: &PromptConfig) -> Result<EssayCollection, CliError> {
        let p = self.path(&inputs.essays, |c| Some(&c.essays), "essays")?;
        let mut columns = self
            .pipeline
            .as_ref()
            .map(|c| c.columns.clone())
            .unwrap_or_default();
        if columns.assignments.is_empty() {
            columns.assignments = prompts.assignments.iter().map(|a| a.id.clone()).collect();
        }
        load_essays(&p, &columns).map_err(config_err)
    }

    fn tokenizer(&self, inputs: &Inputs) -> Result<Tokenizer, CliError> {
        let p = self.path(&inputs.lexicon, |c| Some(&c.lexicon), "lexicon")?;
        let cfg = TokenizerConfig::load(&p).map_err(config_err)?;
        Tokenizer::new(&cfg).map_err(config_err)
    }

    fn spec(&self, given: &Option<PathBuf>) -> Result<RegressionSpec, CliError> {
        match given
            .clone()
            .or_else(|| self.pipeline.as_ref().and_then(|c| c.regression.clone()))
        {
            Some(p) => RegressionSpec::load(&p).map_err(config_err),
            None => Ok(RegressionSpec::default()),
        }
    }

    fn prior(&self) -> AlphaPrior {
        self.pipeline.as_ref().map(|c| c.prior).unwrap_or_default()
    }
}

fn attributes<'a>(
    prompts: &'a PromptConfig,
    only: &[String],
) -> Result<Vec<&'a AttributeSpec>, CliError> {
    for name in only {
        if prompts.attribute(name).is_none() {
            return Err(CliError::Usage(format!("unknown attribute '{name}'")));
        }
    }
    Ok(prompts
        .attributes
        .iter()
        .filter(|a| only.is_empty() || only.contains(&a.name))
        .collect())
}

fn filters(s: &Selection) -> MarkedFilters {
    MarkedFilters {
        z_threshold: s.z_threshold,
        min_count: s.min_count,
        min_models: s.min_models,
        top_k: s.top_k,
    }
}

fn load_runs(dir: &Path) -> Result<FeedbackCollection, CliError> {
    load_feedback_dir(dir).map_err(stage(Stage::Generate))
}

fn read_sets(
    dir: &Path,
    attrs: &[&AttributeSpec],
    top_k: usize,
) -> Result<BTreeMap<String, MarkedSet>, CliError> {
    let mut out = BTreeMap::new();
    for a in attrs {
        let path = dir.join(format!("{}.csv", a.name));
        if !path.exists() {
            log::warn!("no marked-word file for {}", a.name);
            continue;
        }
        let (m, _) = read_marked_csv(&path, &a.name, top_k).map_err(stage(Stage::MarkedWords))?;
        out.insert(a.name.clone(), m);
    }
    Ok(out)
}

fn create_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => {
            std::fs::create_dir_all(p).map_err(stage(Stage::Report))
        }
        _ => Ok(()),
    }
}

fn single_attribute<'a>(
    prompts: &'a PromptConfig,
    only: &[String],
) -> Result<&'a AttributeSpec, CliError> {
    match only {
        [one] => prompts
            .attribute(one)
            .ok_or_else(|| CliError::Usage(format!("unknown attribute '{one}'"))),
        _ => Err(CliError::Usage(
            "exactly one --attribute is required".into(),
        )),
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let ctx = Context {
        pipeline: cli
            .config
            .as_deref()
            .map(PipelineConfig::load)
            .transpose()?,
        seed: cli.seed,
        out: cli.out.clone(),
    };
    match &cli.command {
        Command::Generate {
            inputs,
            providers,
            names,
            only,
        } => {
            let prompts = ctx.prompts(inputs)?;
            let essays = ctx.essays(inputs, &prompts)?;
            let provider_paths = if providers.is_empty() {
                ctx.pipeline
                    .as_ref()
                    .map(|c| c.providers.clone())
                    .unwrap_or_default()
            } else {
                providers.clone()
            };
            if provider_paths.is_empty() {
                return Err(CliError::Usage(
                    "at least one --provider is required".into(),
                ));
            }
            let names_path = names
                .clone()
                .or_else(|| ctx.pipeline.as_ref().and_then(|c| c.names.clone()));
            let registry = names_path
                .as_deref()
                .map(NameRegistry::load)
                .transpose()
                .map_err(config_err)?;
            let only = if only.is_empty() {
                ctx.pipeline
                    .as_ref()
                    .map(|c| c.only_attributes.clone())
                    .unwrap_or_default()
            } else {
                only.clone()
            };
            let attrs = attributes(&prompts, &only)?;
            let out = ctx.out()?;
            for path in &provider_paths {
                let cfg = ProviderConfig::load(path).map_err(config_err)?;
                let provider = cfg.build_provider().map_err(config_err)?;
                let mut jobs = plan_jobs(
                    &prompts,
                    &essays,
                    &cfg.model_id,
                    &attrs,
                    registry.as_ref(),
                    ctx.seed,
                )
                .map_err(stage(Stage::Generate))?;
                let outcome = run_batch(&mut jobs, provider.as_ref(), &cfg, out)
                    .map_err(stage(Stage::Generate))?;
                println!(
                    "{}: {} documents ({} resumed), {} failed",
                    cfg.model_id,
                    outcome.documents.len(),
                    outcome.resumed,
                    outcome.failed.len()
                );
            }
        }
        Command::MarkedWords { inputs, selection } => {
            let prompts = ctx.prompts(inputs)?;
            let tokenizer = ctx.tokenizer(inputs)?;
            let docs = load_runs(&selection.runs)?;
            let out = ctx.out()?;
            std::fs::create_dir_all(out).map_err(stage(Stage::MarkedWords))?;
            for attr in attributes(&prompts, &selection.only)? {
                let (m, c) = attribute_marked_sets(
                    &docs,
                    attr,
                    &tokenizer,
                    &filters(selection),
                    ctx.prior(),
                )?;
                write_marked_csv(&out.join(format!("{}.csv", attr.name)), &m, &c)
                    .map_err(stage(Stage::MarkedWords))?;
                println!("{}: {} marked, {} comparative", attr.name, m.len(), c.len());
            }
        }
        Command::Concentration {
            inputs,
            runs,
            marked_sets,
            only,
            top_k,
        } => {
            let prompts = ctx.prompts(inputs)?;
            let essays = ctx.essays(inputs, &prompts)?;
            let tokenizer = ctx.tokenizer(inputs)?;
            let docs = load_runs(runs)?;
            let attrs = attributes(&prompts, only)?;
            let sets = read_sets(marked_sets, &attrs, *top_k)?;
            let (mut samples, mut excluded) = (Vec::new(), Vec::new());
            for attr in attrs {
                let Some(m) = sets.get(&attr.name).filter(|m| !m.is_empty()) else {
                    log::warn!("{}: no marked words; skipped", attr.name);
                    continue;
                };
                let batch = attribute_concentration(&docs, attr, &essays, m, &tokenizer)?;
                excluded.extend(batch.excluded.into_iter().map(|k| (attr.name.clone(), k)));
                samples.extend(batch.samples);
            }
            let out = ctx.out()?;
            create_parent(out)?;
            write_samples_csv(out, &samples).map_err(stage(Stage::Concentration))?;
            let excl = out.with_file_name("conc_excluded.csv");
            write_excluded_csv(&excl, &excluded).map_err(stage(Stage::Concentration))?;
            println!("{} samples, {} excluded", samples.len(), excluded.len());
        }
        Command::Regress { samples, spec } => {
            let spec = ctx.spec(spec)?;
            let all = read_samples_csv(samples).map_err(stage(Stage::Regress))?;
            let mut by_attr: Vec<(String, Vec<_>)> = Vec::new();
            for s in all {
                match by_attr.iter_mut().find(|(a, _)| *a == s.attribute) {
                    Some((_, v)) => v.push(s),
                    None => by_attr.push((s.attribute.clone(), vec![s])),
                }
            }
            let fits = by_attr
                .iter()
                .map(|(a, s)| {
                    regress_attribute(a, s, &spec)
                        .map_err(|e| PipelineError::new(Stage::Regress, format!("{a}: {e}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let out = ctx.out()?;
            create_parent(out)?;
            write_fits_csv(out, &fits).map_err(stage(Stage::Regress))?;
            println!("{} fit(s) written", fits.len());
        }
        Command::Sweep {
            inputs,
            selection,
            step,
        } => {
            let prompts = ctx.prompts(inputs)?;
            let tokenizer = ctx.tokenizer(inputs)?;
            let attr = single_attribute(&prompts, &selection.only)?;
            let docs = load_runs(&selection.runs)?;
            let (marked, contrast) = contrast_documents(&docs, attr);
            let cfg = SweepConfig {
                step: *step,
                seed: ctx.seed,
                filters: filters(selection),
                prior: ctx.prior(),
            };
            let points = sample_size_sweep(&attr.name, &marked, &contrast, &tokenizer, &cfg)
                .map_err(stage(Stage::Sweep))?;
            let out = ctx.out()?;
            create_parent(out)?;
            write_sweep_csv(out, &points).map_err(stage(Stage::Sweep))?;
            for p in &points {
                println!("n={:<6} {:.4}", p.n_essays, p.prop_significant);
            }
        }
        Command::Stability {
            inputs,
            selection,
            slices,
        } => {
            let prompts = ctx.prompts(inputs)?;
            let essays = ctx.essays(inputs, &prompts)?;
            let tokenizer = ctx.tokenizer(inputs)?;
            let attr = single_attribute(&prompts, &selection.only)?;
            let docs = load_runs(&selection.runs)?;
            let (marked, contrast) = contrast_documents(&docs, attr);
            let by = match slices {
                Slices::Assignment => SliceBy::Assignment,
                Slices::Model => SliceBy::Model,
            };
            let sets = slice_marked_sets(
                &attr.name,
                &marked,
                &contrast,
                &essays,
                by,
                &tokenizer,
                &filters(selection),
                ctx.prior(),
            )
            .map_err(stage(Stage::Stability))?;
            let matrix = stability_report(&sets).map_err(stage(Stage::Stability))?;
            let out = ctx.out()?;
            create_parent(out)?;
            matrix.write_csv(out).map_err(stage(Stage::Stability))?;
        }
        Command::NameAudit {
            inputs,
            runs,
            names,
            marked_sets,
            spec,
            top_k,
        } => {
            let prompts = ctx.prompts(inputs)?;
            let essays = ctx.essays(inputs, &prompts)?;
            let tokenizer = ctx.tokenizer(inputs)?;
            let names_path = ctx.path(names, |c| c.names.as_ref(), "names")?;
            let registry = NameRegistry::load(&names_path).map_err(config_err)?;
            let spec = ctx.spec(spec)?;
            let attrs = attributes(&prompts, &[])?;
            let sets: BTreeMap<String, MarkedSet> = read_sets(marked_sets, &attrs, *top_k)?
                .into_iter()
                .filter(|(_, m)| !m.is_empty())
                .collect();
            let docs = load_runs(runs)?;
            let named: Vec<_> = docs
                .iter()
                .filter(|d| d.variant == Variant::Named)
                .collect();
            let fits = name_audit(&named, &essays, &registry, &sets, &tokenizer, &spec)
                .map_err(stage(Stage::NameAudit))?;
            let out = ctx.out()?;
            create_parent(out)?;
            write_fits_csv(out, &fits.into_values().collect::<Vec<_>>())
                .map_err(stage(Stage::NameAudit))?;
        }
        Command::Report => {
            let cfg = ctx
                .pipeline
                .as_ref()
                .ok_or_else(|| CliError::Usage("--config is required".into()))?;
            let out = ctx.out()?;
            let inputs = cfg.load_inputs()?;
            let docs = load_runs(&out.join("runs"))?;
            let report = analyze(&inputs, &docs, &out.join("report"), ctx.seed)?;
            println!("report written to {}", report.report_dir.display());
        }
        Command::Run { skip_generate } => {
            let cfg = ctx
                .pipeline
                .as_ref()
                .ok_or_else(|| CliError::Usage("--config is required".into()))?;
            let report = run_pipeline(
                cfg,
                ctx.out()?,
                RunOptions {
                    skip_generate: *skip_generate,
                    seed: ctx.seed,
                },
            )?;
            println!(
                "{} documents, {} failed generation(s); report written to {}",
                report.n_documents,
                report.n_failed,
                report.report_dir.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Pipeline(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.stage == Stage::Config { 1 } else { 2 })
        }
    }
}
