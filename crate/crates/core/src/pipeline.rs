//! End-to-end stages over a `RunConfig`: prepare, train, evaluate, explain.
//! Every stage writes its artifacts into the configured output directory.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::ParamStore;
use crate::config::RunConfig;
use crate::corpus::{build_all_documents, build_vocabulary, drop_empty_reviews, filter_interactions, read_jsonl, write_documents, DocumentIndex, Domain, Interaction, Vocabulary};
use crate::error::{CatnError, Result};
use crate::eval::{evaluate, explain_pair, export_correlation_heatmap, EvalReport, PairExplanation};
use crate::model::CatnModel;
use crate::scenario::{split_scenario, Scenario, Split};
use crate::train::{scenario_biases, scenario_index, train, TrainOutcome};

pub const CONFIG_FILE: &str = "config.txt";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const DOCUMENTS_FILE: &str = "documents.bin";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const SCENARIO_FILE: &str = "scenario.json";
pub const CORRELATION_FILE: &str = "correlation.csv";

/// Filtered interactions of both domains and the shared vocabulary.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub source: Vec<Interaction>,
    pub target: Vec<Interaction>,
    pub vocab: Vocabulary,
}

impl Corpus {
    pub fn all(&self) -> Vec<Interaction> {
        self.source.iter().chain(&self.target).cloned().collect()
    }
}

pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let mut raw = drop_empty_reviews(read_jsonl(&cfg.source, Domain::Source)?);
    raw.extend(drop_empty_reviews(read_jsonl(&cfg.target, Domain::Target)?));
    let kept = filter_interactions(&raw, cfg.min_user_interactions, cfg.min_item_interactions);
    let vocab = build_vocabulary(&kept, &cfg.corpus);
    let (source, target) = kept.into_iter().partition(|r| r.domain == Domain::Source);
    Ok(Corpus { source, target, vocab })
}

fn ensure_out(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| CatnError::io(&cfg.out, e))?;
    let p = cfg.out.join(CONFIG_FILE);
    std::fs::write(&p, cfg.to_text()).map_err(|e| CatnError::io(&p, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub interactions: usize,
    pub users: usize,
    pub items: usize,
    pub documents: usize,
    pub vocab_size: usize,
}

/// Writes the vocabulary and every user and item document.
pub fn prepare(cfg: &RunConfig) -> Result<PrepareSummary> {
    cfg.validate()?;
    let corpus = load_corpus(cfg)?;
    ensure_out(cfg)?;
    let all = corpus.all();
    let docs = build_all_documents(&all, &corpus.vocab, &cfg.corpus);
    corpus.vocab.save(&cfg.out.join(VOCAB_FILE))?;
    write_documents(&cfg.out.join(DOCUMENTS_FILE), &docs)?;
    let index = DocumentIndex::new(all, &corpus.vocab, Default::default(), cfg.corpus.doc_len, cfg.seed);
    let users = index.users(Domain::Source).len() + index.users(Domain::Target).len();
    let items = index.items(Domain::Source).len() + index.items(Domain::Target).len();
    Ok(PrepareSummary {
        interactions: index.records().len(),
        users,
        items,
        documents: docs.len(),
        vocab_size: corpus.vocab.len(),
    })
}

/// Reads word vectors for vocabulary words; other lines are ignored.
pub fn load_pretrained(path: &Path, vocab: &Vocabulary, dim: usize) -> Result<HashMap<usize, Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| CatnError::io(path, e))?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let Some(id) = vocab.id(word) else { continue };
        let vals = parts
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| CatnError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        if vals.len() != dim {
            return Err(CatnError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected {dim} values, found {}", vals.len()),
            });
        }
        out.insert(id as usize, vals);
    }
    Ok(out)
}

/// Scenario, vocabulary and document index for one run.
#[derive(Clone, Debug)]
pub struct RunContext {
    pub scenario: Scenario,
    pub vocab: Vocabulary,
    pub index: DocumentIndex,
}

pub fn build_context(cfg: &RunConfig) -> Result<RunContext> {
    let corpus = load_corpus(cfg)?;
    let scenario = split_scenario(corpus.source, corpus.target, cfg.eta, cfg.seed)?;
    context_for(cfg, scenario, corpus.vocab)
}

fn context_for(cfg: &RunConfig, scenario: Scenario, vocab: Vocabulary) -> Result<RunContext> {
    scenario.check_invariants()?;
    let index = scenario_index(&scenario, &vocab, cfg.corpus.doc_len, cfg.seed);
    Ok(RunContext { scenario, vocab, index })
}

/// Rebuilds the context of a finished training run from its saved split.
pub fn load_context(cfg: &RunConfig) -> Result<RunContext> {
    let corpus = load_corpus(cfg)?;
    let manifest = Scenario::load_manifest(&cfg.out.join(SCENARIO_FILE))?;
    let scenario = Scenario::from_manifest(&manifest, corpus.source, corpus.target)?;
    context_for(cfg, scenario, corpus.vocab)
}

pub fn fresh_model(cfg: &RunConfig, ctx: &RunContext) -> Result<CatnModel> {
    let pretrained = match &cfg.pretrained {
        Some(p) => Some(load_pretrained(p, &ctx.vocab, cfg.hp.embed_dim)?),
        None => None,
    };
    CatnModel::new(cfg.hp.clone(), cfg.train.variant, ctx.vocab.len(), &scenario_biases(&ctx.scenario), pretrained.as_ref(), cfg.seed)
}

pub fn load_model(cfg: &RunConfig) -> Result<CatnModel> {
    let params = ParamStore::load(&cfg.out.join(CHECKPOINT_FILE))?;
    CatnModel::from_params(cfg.hp.clone(), cfg.train.variant, params)
}

/// Trains and writes checkpoint, history, split manifest and the
/// correlation matrix.
pub fn run_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ctx = build_context(cfg)?;
    ensure_out(cfg)?;
    ctx.scenario.save_manifest(&cfg.out.join(SCENARIO_FILE))?;
    let model = fresh_model(cfg, &ctx)?;
    let outcome = train(model, &ctx.scenario, &ctx.index, &cfg.train)?;
    outcome.model.params.save(&cfg.out.join(CHECKPOINT_FILE))?;
    outcome.history.save(&cfg.out.join(HISTORY_FILE))?;
    export_correlation_heatmap(&outcome.model, &cfg.out.join(CORRELATION_FILE))?;
    Ok(outcome)
}

pub fn eval_file(split: Split) -> PathBuf {
    PathBuf::from(match split {
        Split::Validation => "eval_validation.json",
        Split::Test => "eval_test.json",
    })
}

pub fn run_eval(cfg: &RunConfig, split: Split) -> Result<EvalReport> {
    cfg.validate()?;
    let ctx = load_context(cfg)?;
    let model = load_model(cfg)?;
    let report = evaluate(&model, &ctx.scenario, &ctx.index, split, cfg.train.execution)?;
    let p = cfg.out.join(eval_file(split));
    std::fs::write(&p, serde_json::to_string_pretty(&report)?).map_err(|e| CatnError::io(&p, e))?;
    Ok(report)
}

pub fn run_explain(cfg: &RunConfig, user: &str, item: &str, top_k: usize) -> Result<PairExplanation> {
    cfg.validate()?;
    let ctx = load_context(cfg)?;
    let model = load_model(cfg)?;
    let exp = explain_pair(&model, &ctx.index, &ctx.vocab, user, item, top_k)?;
    let p = cfg.out.join(format!("explain_{user}_{item}.json"));
    std::fs::write(&p, serde_json::to_string_pretty(&exp)?).map_err(|e| CatnError::io(&p, e))?;
    export_correlation_heatmap(&model, &cfg.out.join(CORRELATION_FILE))?;
    Ok(exp)
}
