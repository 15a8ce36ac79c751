//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any criterion fails.
//!
//! Reference values come from oracles written here independently of the library: a direct
//! transcription of the log-odds formulas, hand-counted concentration fixtures, normal-equation
//! OLS through nalgebra, and corpora generated with known planted effects.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use markaudit::corpus::{
    EssayCollection, EssayRecord, FeedbackCollection, FeedbackDocument, FeedbackItem, Variant,
};
use markaudit::inference::{
    concentration_batch, condition_column, ols_fit, regress_attribute, AttributeRegression,
    RegressionSpec, StandardErrors,
};
use markaudit::lexstats::{
    count_words, log_odds_dirichlet, marked_words, per_model_log_odds, AlphaPrior, MarkedEntry,
    MarkedFilters, MarkedSet, Side, TokenCounts, Tokenizer, TokenizerConfig,
};
use markaudit::llmgen::{
    run_batch, GenerationJob, MockProvider, MockRule, MockSettings, ProviderConfig,
    RecordingProvider,
};
use markaudit::promptgen::PromptConfig;
use markaudit::report::{
    contrast_documents, emit_regression_table, plan_jobs, run_pipeline, PipelineConfig,
    RegressionRow, RunOptions,
};
use markaudit::robustness::{sample_size_sweep, SweepConfig};
use markaudit::{Matrix, RegressionFit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ATTRIBUTES: &str = include_str!("../../../configs/attributes.toml");
const MARKED_LOW: &str = "does not meet academic standards";

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn within(v: Verdict, elapsed: Duration, limit: Duration) -> Verdict {
    if elapsed > limit {
        verdict(
            false,
            format!("{}; took {elapsed:.2?}, limit {limit:?}", v.detail),
        )
    } else {
        v
    }
}

// ---------------------------------------------------------------------------------------------
// 1. Log-odds oracle

/// Formula transcription with plain maps and separate logarithms.
fn oracle_log_odds(
    ci: &HashMap<String, u64>,
    cj: &HashMap<String, u64>,
    alpha0: f64,
) -> BTreeMap<String, (f64, f64, f64)> {
    let ni: u64 = ci.values().sum();
    let nj: u64 = cj.values().sum();
    let (ni, nj) = (ni as f64, nj as f64);
    let words: BTreeSet<&String> = ci.keys().chain(cj.keys()).collect();
    let mut out = BTreeMap::new();
    for w in words {
        let yi = *ci.get(w).unwrap_or(&0) as f64;
        let yj = *cj.get(w).unwrap_or(&0) as f64;
        let aw = alpha0 * (yi + yj) / (ni + nj);
        let li = (yi + aw).ln() - (ni + alpha0 - yi - aw).ln();
        let lj = (yj + aw).ln() - (nj + alpha0 - yj - aw).ln();
        let delta = li - lj;
        let var = 1.0 / (yi + aw) + 1.0 / (yj + aw);
        out.insert(w.clone(), (delta, var, delta / var.sqrt()));
    }
    out
}

fn random_corpus(rng: &mut ChaCha8Rng, vocab: &[String]) -> HashMap<String, u64> {
    let weights: Vec<f64> = vocab.iter().map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = weights.iter().sum();
    let n_tokens = rng.random_range(1..=2000);
    let mut counts = HashMap::new();
    for _ in 0..n_tokens {
        let mut u = rng.random_range(0.0..total);
        let mut k = 0;
        while k + 1 < weights.len() && u >= weights[k] {
            u -= weights[k];
            k += 1;
        }
        *counts.entry(vocab[k].clone()).or_insert(0) += 1;
    }
    counts
}

fn to_counts(m: &HashMap<String, u64>) -> TokenCounts {
    TokenCounts::from_pairs(m.iter().map(|(w, c)| (w.clone(), *c)))
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut words_checked = 0;
    let mut instances = 0;
    for seed in 0..25u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let v = rng.random_range(2..=50);
        let vocab: Vec<String> = (0..v).map(|k| format!("w{k}")).collect();
        let ci = random_corpus(&mut rng, &vocab);
        let cj = random_corpus(&mut rng, &vocab);
        let (ti, tj) = (to_counts(&ci), to_counts(&cj));
        if ci.keys().chain(cj.keys()).collect::<BTreeSet<_>>().len() < 2 {
            continue;
        }
        instances += 1;
        let alpha0 = if seed % 2 == 0 {
            AlphaPrior::default().resolve(&ti, &tj)
        } else {
            rng.random_range(0.5..50.0)
        };
        let got = match log_odds_dirichlet::<f64>(&ti, &tj, alpha0) {
            Ok(r) => r,
            Err(e) => return verdict(false, format!("seed {seed}: {e}")),
        };
        let want = oracle_log_odds(&ci, &cj, alpha0);
        if got.len() != want.len() {
            return verdict(
                false,
                format!(
                    "seed {seed}: {} results, oracle has {}",
                    got.len(),
                    want.len()
                ),
            );
        }
        for r in &got {
            let (d, var, z) = want[&r.word];
            worst = worst
                .max((r.delta - d).abs())
                .max((r.variance - var).abs())
                .max((r.z - z).abs());
            words_checked += 1;
        }
    }
    within(
        verdict(worst <= 1e-10 && instances == 25, format!("{instances} instances, {words_checked} words, max abs diff {worst:.2e} (tol 1e-10)")),
        start.elapsed(),
        Duration::from_secs(5),
    )
}

// ---------------------------------------------------------------------------------------------
// 2. Symmetry

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let tokenizer = Tokenizer::new(&TokenizerConfig::default()).unwrap();
    let mut failures = Vec::new();
    let mut instances = 0;
    for seed in 0..25u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let vocab: Vec<String> = (0..rng.random_range(2..=50))
            .map(|k| format!("w{k}"))
            .collect();
        let c = to_counts(&random_corpus(&mut rng, &vocab));
        let d = to_counts(&random_corpus(&mut rng, &vocab));
        if c.vocabulary_size() < 2 {
            continue;
        }
        instances += 1;
        let alpha0 = AlphaPrior::default().resolve(&c, &c);
        let same = log_odds_dirichlet::<f64>(&c, &c, alpha0).unwrap();
        if same.iter().any(|r| r.delta != 0.0 || r.z != 0.0) {
            failures.push(format!("seed {seed}: nonzero delta on identical corpora"));
        }
        let per_model: BTreeMap<String, Vec<_>> =
            [("m1".to_string(), same.clone()), ("m2".to_string(), same)].into();
        let filters = MarkedFilters {
            min_count: 1,
            ..MarkedFilters::default()
        };
        let (m, k) = marked_words("A", &per_model, &filters, &tokenizer);
        if !m.is_empty() || !k.is_empty() {
            failures.push(format!(
                "seed {seed}: non-empty marked set on identical corpora"
            ));
        }
        let a0 = AlphaPrior::default().resolve(&c, &d);
        let fwd = log_odds_dirichlet::<f64>(&c, &d, a0).unwrap();
        let rev = log_odds_dirichlet::<f64>(&d, &c, a0).unwrap();
        for (f, r) in fwd.iter().zip(&rev) {
            if f.word != r.word || f.delta != -r.delta || f.z != -r.z {
                failures.push(format!("seed {seed}: '{}' not exactly negated", f.word));
                break;
            }
        }
    }
    within(
        verdict(
            failures.is_empty(),
            if failures.is_empty() {
                format!("zero deltas and empty sets on identical corpora; swap negates every delta and z exactly ({instances} instances)")
            } else {
                failures.join("; ")
            },
        ),
        start.elapsed(),
        Duration::from_secs(1),
    )
}

// ---------------------------------------------------------------------------------------------
// Planted-bias corpora shared by criteria 3 and 4

const PLANTED: usize = 20;

fn background_words(n: usize) -> Vec<String> {
    const C: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t"];
    const V: [&str; 5] = ["a", "e", "i", "o", "u"];
    let mut out = Vec::with_capacity(n);
    'outer: for a in C {
        for b in V {
            for c in C {
                for d in V {
                    out.push(format!("{a}{b}{c}{d}x"));
                    if out.len() == n {
                        break 'outer;
                    }
                }
            }
        }
    }
    out
}

fn planted_words() -> Vec<String> {
    (0..PLANTED)
        .map(|i| format!("planted{}", (b'a' + i as u8) as char))
        .collect()
}

/// Background words with Zipf-like weights plus rare planted words (about 1.3 per 1000 tokens in
/// the contrast condition), boosted threefold whenever the prompt carries the marked descriptor.
fn planted_settings(seed: u64, boost: f64) -> MockSettings {
    let background = background_words(400);
    let mut vocab: Vec<(String, f64)> = background
        .into_iter()
        .enumerate()
        .map(|(r, w)| (w, 1.0 / (r as f64 + 10.0)))
        .collect();
    for w in planted_words() {
        vocab.push((w, 0.00507));
    }
    let mut s = MockSettings::new(seed);
    s.vocabulary = Some(vocab);
    if boost != 1.0 {
        s.rules.push(MockRule {
            when_contains: MARKED_LOW.into(),
            boost: planted_words().into_iter().map(|w| (w, boost)).collect(),
        });
    }
    s
}

fn synthetic_essays(n: usize) -> EssayCollection {
    EssayCollection::from_records(
        (0..n)
            .map(|i| EssayRecord {
                essay_id: format!("e{i:04}"),
                assignment_id: if i % 2 == 0 { "community_service" } else { "face_on_mars" }.into(),
                text: format!("This is essay number {i}. It argues a position with some reasons and examples."),
                holistic_score: Some((i % 6 + 1) as f64),
                covariates: BTreeMap::new(),
            })
            .collect(),
    )
    .unwrap()
}

fn generate_docs(
    essays: &EssayCollection,
    models: &[(&str, MockSettings)],
    variants: &[Variant],
    dir: &Path,
) -> Vec<FeedbackDocument> {
    let prompts = PromptConfig::from_toml(ATTRIBUTES).unwrap();
    let attr = prompts.attribute("LowAchievement").unwrap();
    let mut docs = Vec::new();
    for (model, settings) in models {
        let mut jobs: Vec<GenerationJob> = plan_jobs(&prompts, essays, model, &[attr], None, 0)
            .unwrap()
            .into_iter()
            .filter(|j| variants.contains(&j.variant))
            .collect();
        let cfg = ProviderConfig::mock(model, settings.clone());
        let provider = MockProvider::new(model, settings.clone()).unwrap();
        let out = run_batch(&mut jobs, &provider, &cfg, dir).unwrap();
        assert!(out.failed.is_empty());
        docs.extend(out.documents);
    }
    docs
}

struct Planted {
    docs: FeedbackCollection,
    generated_in: Duration,
}

fn planted_corpora() -> &'static Planted {
    static CELL: OnceLock<Planted> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let dir = tempfile::tempdir().unwrap();
        let docs = generate_docs(
            &synthetic_essays(600),
            &[
                ("mock-a", planted_settings(101, 3.0)),
                ("mock-b", planted_settings(202, 3.0)),
            ],
            &[Variant::Marked, Variant::Comparative],
            dir.path(),
        );
        Planted {
            docs: FeedbackCollection::from_documents(docs).unwrap(),
            generated_in: start.elapsed(),
        }
    })
}

fn low_attr() -> markaudit::promptgen::AttributeSpec {
    PromptConfig::from_toml(ATTRIBUTES)
        .unwrap()
        .attribute("LowAchievement")
        .unwrap()
        .clone()
}

/// Recount with a naive splitter: whitespace split, trailing period stripped, lowercased.
fn naive_total(docs: &[&FeedbackDocument]) -> u64 {
    docs.iter()
        .flat_map(|d| d.items.iter())
        .map(|i| {
            i.comment
                .split_whitespace()
                .filter(|t| !t.trim_end_matches('.').is_empty())
                .count() as u64
        })
        .sum()
}

fn criterion_3() -> Verdict {
    let start = Instant::now();
    let planted = planted_corpora();
    let tokenizer = Tokenizer::new(&TokenizerConfig::default()).unwrap();
    let attr = low_attr();
    let (marked, contrast) = contrast_documents(&planted.docs, &attr);
    for side in [&marked, &contrast] {
        let by_tokenizer = count_words(side.iter().copied(), &tokenizer, true).total();
        if by_tokenizer != naive_total(side) {
            return verdict(
                false,
                format!(
                    "token total {by_tokenizer} disagrees with naive recount {}",
                    naive_total(side)
                ),
            );
        }
    }
    let per_model =
        per_model_log_odds::<f64>(&marked, &contrast, &tokenizer, AlphaPrior::default()).unwrap();
    let (m, c) = marked_words(
        "LowAchievement",
        &per_model,
        &MarkedFilters::default(),
        &tokenizer,
    );
    let planted_set: BTreeSet<String> = planted_words().into_iter().collect();
    let recovered = m
        .entries
        .iter()
        .filter(|e| planted_set.contains(&e.word))
        .count();
    let leaked = c
        .entries
        .iter()
        .filter(|e| planted_set.contains(&e.word))
        .count();
    within(
        verdict(
            recovered >= 18 && leaked == 0 && marked.len() == 1200 && contrast.len() == 1200,
            format!(
                "{recovered}/20 planted words in marked top-{} ({} entries), {leaked} on comparative side; 600 docs/condition x 2 models",
                m.top_k,
                m.len()
            ),
        ),
        start.elapsed() + planted.generated_in,
        Duration::from_secs(60),
    )
}

fn criterion_4() -> Verdict {
    let start = Instant::now();
    let planted = planted_corpora();
    let tokenizer = Tokenizer::new(&TokenizerConfig::default()).unwrap();
    let attr = low_attr();
    let (marked, contrast) = contrast_documents(&planted.docs, &attr);
    let points = match sample_size_sweep(
        "LowAchievement",
        &marked,
        &contrast,
        &tokenizer,
        &SweepConfig::default(),
    ) {
        Ok(p) => p,
        Err(e) => return verdict(false, e.to_string()),
    };
    let curve: Vec<String> = points
        .iter()
        .map(|p| format!("{}:{:.2}", p.n_essays, p.prop_significant))
        .collect();
    let plateau = points
        .iter()
        .filter(|p| p.n_essays >= 300)
        .all(|p| p.prop_significant >= 0.9);
    let full = points
        .last()
        .is_some_and(|p| p.n_essays == 600 && p.prop_significant == 1.0);
    within(
        verdict(
            plateau && full,
            format!("prop_significant by n: {}", curve.join(" ")),
        ),
        start.elapsed(),
        Duration::from_secs(120),
    )
}

// ---------------------------------------------------------------------------------------------
// 5. Concentration exactness

fn criterion_5() -> Verdict {
    let config = TokenizerConfig {
        phrase_list: vec!["make sure".into()],
        stopwords: ["the", "a", "is", "to", "and"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        content_words: [
            (
                "face_on_mars".to_string(),
                ["landform", "alien"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect(),
            ),
            (
                "community_service".to_string(),
                ["principal", "school"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect(),
            ),
        ]
        .into(),
        ..TokenizerConfig::default()
    };
    let tokenizer = Tokenizer::new(&config).unwrap();
    let m_set = MarkedSet {
        attribute: "A".into(),
        side: Side::Marked,
        top_k: 20,
        entries: ["spelling", "grammar", "make_sure", "try"]
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
    // (comments, hand-counted marked hits, hand-counted filtered tokens); None = nothing survives.
    let fixtures: [(&[&str], Option<(u64, u64)>); 10] = [
        (&["Spelling error, fix the spelling."], Some((2, 4))),
        (&["Make sure to check grammar."], Some((2, 3))),
        (&["Try to explain the landform."], Some((1, 2))),
        (&["Good work."], Some((0, 2))),
        (&["The alien is a principal."], None),
        (&["Try try try"], Some((3, 3))),
        (
            &["Spelling", "Grammar and spelling matter to the school."],
            Some((3, 4)),
        ),
        (
            &["Your ideas are clear and your grammar improves."],
            Some((1, 7)),
        ),
        (&["The a is to and."], None),
        (
            &["Make sure you try, and make sure you check spelling."],
            Some((4, 7)),
        ),
    ];
    let essays = synthetic_essays(10);
    let docs: Vec<FeedbackDocument> = fixtures
        .iter()
        .enumerate()
        .map(|(i, (comments, _))| FeedbackDocument {
            essay_id: format!("e{i:04}"),
            attribute: "A".into(),
            variant: Variant::Marked,
            model_id: "m".into(),
            items: comments
                .iter()
                .map(|c| FeedbackItem {
                    excerpt: "spelling spelling".into(),
                    comment: c.to_string(),
                })
                .collect(),
            raw_response: String::new(),
            generation_meta: BTreeMap::new(),
        })
        .collect();
    let batch = match concentration_batch(&docs, &essays, &m_set, &tokenizer) {
        Ok(b) => b,
        Err(e) => return verdict(false, e.to_string()),
    };
    let mut problems = Vec::new();
    let mut samples = batch.samples.iter();
    for (i, (_, expected)) in fixtures.iter().enumerate() {
        if let Some((hits, total)) = expected {
            let s = samples.next().unwrap();
            let definitional = 100.0 * (*hits as f64) / (*total as f64);
            if s.essay_id != format!("e{i:04}")
                || s.c_value != definitional
                || s.n_tokens_filtered != *total
            {
                problems.push(format!(
                    "doc {i}: got {} over {} tokens, want {definitional}",
                    s.c_value, s.n_tokens_filtered
                ));
            }
        }
    }
    let excluded: Vec<&str> = batch.excluded.iter().map(|k| k.essay_id.as_str()).collect();
    if excluded != ["e0004", "e0008"] {
        problems.push(format!("exclusion log {excluded:?}"));
    }
    verdict(
        problems.is_empty(),
        if problems.is_empty() {
            format!("8 documents exact at zero tolerance; exclusion log holds {} empty-after-filter documents", excluded.len())
        } else {
            problems.join("; ")
        },
    )
}

// ---------------------------------------------------------------------------------------------
// 6. OLS oracle

fn normal_equations(rows: &[Vec<f64>], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (n, p) = (rows.len(), rows[0].len());
    let x = nalgebra::DMatrix::from_fn(n, p, |i, j| rows[i][j]);
    let yv = nalgebra::DVector::from_column_slice(y);
    let xtx_inv = (x.transpose() * &x).try_inverse().expect("invertible");
    let beta = &xtx_inv * x.transpose() * &yv;
    let resid = &yv - &x * &beta;
    let sigma2 = resid.dot(&resid) / (n - p) as f64;
    let se = (0..p).map(|k| (sigma2 * xtx_inv[(k, k)]).sqrt()).collect();
    (beta.iter().copied().collect(), se)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn criterion_6() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut noiseless: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(6000 + seed);
        let p = rng.random_range(2..=8);
        let n = rng.random_range((p + 5)..=50);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let mut r = vec![1.0];
                for k in 1..p {
                    r.push(if k % 3 == 0 {
                        f64::from(rng.random_bool(0.5))
                    } else {
                        rng.random_range(-2.0..2.0)
                    });
                }
                r
            })
            .collect();
        let beta_true: Vec<f64> = (0..p).map(|_| rng.random_range(-5.0..5.0)).collect();
        let exact: Vec<f64> = rows
            .iter()
            .map(|r| r.iter().zip(&beta_true).map(|(a, b)| a * b).sum())
            .collect();
        let noisy: Vec<f64> = exact
            .iter()
            .map(|v| v + rng.random_range(-1.0..1.0))
            .collect();
        let names: Vec<String> = (0..p).map(|k| format!("x{k}")).collect();
        let x = Matrix::from_rows(&rows);

        let fit: RegressionFit = match ols_fit(&x, &noisy, &names, StandardErrors::Classical) {
            Ok(f) => f,
            Err(e) => return verdict(false, format!("seed {seed}: {e}")),
        };
        let (beta, se) = normal_equations(&rows, &noisy);
        for k in 0..p {
            worst = worst
                .max(rel_err(fit.coefficients[k], beta[k]))
                .max(rel_err(fit.std_errors[k], se[k]));
        }
        let clean = ols_fit(&x, &exact, &names, StandardErrors::Classical).unwrap();
        for k in 0..p {
            noiseless = noiseless.max((clean.coefficients[k] - beta_true[k]).abs());
        }
    }
    verdict(
        worst <= 1e-8 && noiseless <= 1e-10,
        format!("20 instances: max rel diff vs normal equations {worst:.2e} (tol 1e-8); noiseless recovery max abs error {noiseless:.2e} (tol 1e-10)"),
    )
}

// ---------------------------------------------------------------------------------------------
// 7. End-to-end condition effect

fn fixed_marked_set() -> MarkedSet {
    MarkedSet {
        attribute: "LowAchievement".into(),
        side: Side::Marked,
        top_k: PLANTED,
        entries: planted_words()
            .into_iter()
            .map(|word| MarkedEntry {
                word,
                mean_abs_z: 0.0,
                pooled_count: 0,
                per_model: BTreeMap::new(),
                facet: None,
            })
            .collect(),
    }
}

fn replicate(seed: u64, boost: f64, essays: &EssayCollection) -> (f64, f64) {
    let dir = tempfile::tempdir().unwrap();
    let docs = generate_docs(
        essays,
        &[
            ("mock-a", planted_settings(seed * 2 + 1, boost)),
            ("mock-b", planted_settings(seed * 2 + 2, boost)),
        ],
        &[Variant::Baseline, Variant::Marked, Variant::Comparative],
        dir.path(),
    );
    let tokenizer = Tokenizer::new(&TokenizerConfig::default()).unwrap();
    let batch = concentration_batch(&docs, essays, &fixed_marked_set(), &tokenizer).unwrap();
    let reg =
        regress_attribute("LowAchievement", &batch.samples, &RegressionSpec::default()).unwrap();
    let col = condition_column(Variant::Marked);
    (
        reg.fit.coefficient(&col).unwrap(),
        reg.fit.std_error(&col).unwrap(),
    )
}

fn criterion_7() -> Verdict {
    let essays = synthetic_essays(60);
    let (mut planted_ok, mut null_ok) = (0, 0);
    let mut null_t = Vec::new();
    for seed in 0..20u64 {
        let (b, se) = replicate(seed, 3.0, &essays);
        if b > 0.0 && b > 2.0 * se {
            planted_ok += 1;
        }
        let (b0, se0) = replicate(seed, 1.0, &essays);
        if b0.abs() <= 2.0 * se0 {
            null_ok += 1;
        }
        null_t.push(format!("{:.2}", b0 / se0));
    }
    verdict(
        planted_ok >= 19 && null_ok >= 19,
        format!(
            "planted: {planted_ok}/20 positive beyond 2 SE; null: {null_ok}/20 within 2 SE (null t: {})",
            null_t.join(" ")
        ),
    )
}

// ---------------------------------------------------------------------------------------------
// 8. Resumability and determinism

fn without_timestamp(mut d: FeedbackDocument) -> FeedbackDocument {
    d.generation_meta.remove("timestamp_unix");
    d
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                );
            }
        }
    }
    out
}

fn criterion_8() -> Verdict {
    let essays = synthetic_essays(40);
    let prompts = PromptConfig::from_toml(ATTRIBUTES).unwrap();
    let attrs: Vec<_> = prompts.attributes.iter().take(2).collect();
    let settings = planted_settings(7, 3.0);
    let cfg = ProviderConfig::mock("mock-a", settings.clone());
    let jobs = plan_jobs(&prompts, &essays, "mock-a", &attrs, None, 0).unwrap();

    let straight = tempfile::tempdir().unwrap();
    let full = run_batch(
        &mut jobs.clone(),
        &MockProvider::new("mock-a", settings.clone()).unwrap(),
        &cfg,
        straight.path(),
    )
    .unwrap();

    let resumed_dir = tempfile::tempdir().unwrap();
    let interrupted =
        RecordingProvider::new(MockProvider::new("mock-a", settings.clone()).unwrap())
            .fail_after(jobs.len() / 2);
    let first = run_batch(&mut jobs.clone(), &interrupted, &cfg, resumed_dir.path());
    let second = run_batch(
        &mut jobs.clone(),
        &MockProvider::new("mock-a", settings).unwrap(),
        &cfg,
        resumed_dir.path(),
    )
    .unwrap();

    let strip = |docs: Vec<FeedbackDocument>| -> Vec<FeedbackDocument> {
        let mut v: Vec<_> = docs.into_iter().map(without_timestamp).collect();
        v.sort_by_key(FeedbackDocument::key);
        v
    };
    let same_multiset = strip(full.documents.clone()) == strip(second.documents.clone());
    let on_disk = markaudit::corpus::load_feedback_dir(resumed_dir.path())
        .unwrap()
        .into_documents();
    let disk_same = strip(on_disk) == strip(full.documents.clone());

    let example = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/example/audit.toml");
    let config = PipelineConfig::load(&example).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let opts = RunOptions {
        skip_generate: false,
        seed: 42,
    };
    run_pipeline(&config, a.path(), opts).unwrap();
    run_pipeline(&config, b.path(), opts).unwrap();
    let (ra, rb) = (
        files_under(&a.path().join("report")),
        files_under(&b.path().join("report")),
    );
    let identical = !ra.is_empty() && ra == rb;

    verdict(
        first.is_err() && second.resumed > 0 && same_multiset && disk_same && identical,
        format!(
            "interrupted after {} of {} jobs, resumed {} from checkpoint; document multiset {} (timestamps aside); {} report files {}",
            jobs.len() / 2,
            jobs.len(),
            second.resumed,
            if same_multiset && disk_same { "identical" } else { "differs" },
            ra.len(),
            if identical { "byte-identical across two runs" } else { "differ across runs" }
        ),
    )
}

// ---------------------------------------------------------------------------------------------
// 9. Format fidelity

fn fixture_fit(attribute: &str, comparative: bool) -> AttributeRegression {
    let mut columns = vec!["intercept".to_string(), condition_column(Variant::Marked)];
    let mut coefficients = vec![5.0, 2.366];
    let mut std_errors = vec![0.1, 0.153];
    if comparative {
        columns.push(condition_column(Variant::Comparative));
        coefficients.push(0.201);
        std_errors.push(0.153);
    }
    AttributeRegression {
        attribute: attribute.into(),
        fit: RegressionFit {
            columns,
            coefficients,
            std_errors,
            n_obs: 4800,
            residual_df: 4790,
            r_squared: 0.1,
            rss: 1.0,
            sigma2: 1.0,
            standard_errors: StandardErrors::Classical,
        },
        baseline_mean: Some(4.911),
    }
}

fn criterion_9() -> Verdict {
    let rows = [
        RegressionRow::from_fit(&fixture_fit("LowAchievement", true)),
        RegressionRow::from_fit(&fixture_fit("ELL", false)),
    ];
    let table = emit_regression_table(&rows).unwrap();
    let low = table
        .lines()
        .find(|l| l.starts_with("| LowAchievement "))
        .unwrap_or_default();
    let ell = table
        .lines()
        .find(|l| l.starts_with("| ELL "))
        .unwrap_or_default();
    let cells: Vec<&str> = ell.split('|').map(str::trim).collect();
    let pass = low.contains("| 2.366*** (0.153) |") && cells.get(4) == Some(&"---");
    verdict(pass, format!("rendered rows: `{low}` / `{ell}`"))
}

// ---------------------------------------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("log-odds oracle equivalence", criterion_1),
        ("symmetry", criterion_2),
        ("planted-bias recovery", criterion_3),
        ("sample-size plateau", criterion_4),
        ("concentration exactness", criterion_5),
        ("OLS oracle equivalence", criterion_6),
        ("end-to-end planted condition effect", criterion_7),
        ("resumability and determinism", criterion_8),
        ("format fidelity", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let v = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        if !v.pass {
            failed += 1;
        }
        println!(
            "{} criterion {} ({name}): {} [{:.2?}]",
            if v.pass { "PASS" } else { "FAIL" },
            i + 1,
            v.detail,
            start.elapsed()
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
