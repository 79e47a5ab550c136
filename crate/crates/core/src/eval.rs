//! Cold-start evaluation and explanation artifacts.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{DocKind, Document, DocumentIndex, Domain, Vocabulary};
use crate::error::{CatnError, Result};
use crate::graph::Graph;
use crate::model::{Binder, CatnModel, Variant};
use crate::parallel::Execution;
use crate::scenario::{Flow, Pair, Scenario, Split};
use crate::tensor::Tensor;
use crate::train::{mse, predict_all};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mse: f64,
    pub n_pairs: usize,
    pub per_user_mse: BTreeMap<String, f64>,
    pub variant: Variant,
    pub eta: f64,
    pub seed: u64,
}

/// Target-flow MSE over the held-out ratings of a split's cold-start users.
pub fn evaluate(model: &CatnModel, scenario: &Scenario, index: &DocumentIndex, split: Split, exec: Execution) -> Result<EvalReport> {
    let pairs = scenario.eval_pairs(split);
    if pairs.is_empty() {
        return Err(CatnError::Scenario(format!("no {split:?} pairs to evaluate")));
    }
    check_leakage(scenario, &pairs)?;
    let preds = predict_all(model, index, &pairs, exec)?;
    let targets: Vec<f64> = pairs.iter().map(|p| p.rating).collect();
    let mut per_user: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (p, y) in pairs.iter().zip(&preds) {
        let e = per_user.entry(p.user.clone()).or_default();
        e.0 += (p.rating - y).powi(2);
        e.1 += 1;
    }
    Ok(EvalReport {
        mse: mse(&targets, &preds),
        n_pairs: pairs.len(),
        per_user_mse: per_user.into_iter().map(|(u, (s, n))| (u, s / n as f64)).collect(),
        variant: model.variant,
        eta: scenario.eta,
        seed: scenario.seed,
    })
}

/// Fails when an evaluation pair belongs to a training user or is one of
/// the training ratings.
pub fn check_leakage(scenario: &Scenario, pairs: &[Pair]) -> Result<()> {
    let train: HashSet<(String, String)> = scenario
        .training_ratings(Domain::Target)
        .into_iter()
        .map(|p| (p.user, p.item))
        .collect();
    for p in pairs {
        if scenario.train_users.contains(&p.user) || !scenario.is_cold_start(&p.user) || train.contains(&(p.user.clone(), p.item.clone())) {
            return Err(CatnError::Leakage {
                user: p.user.clone(),
                item: p.item.clone(),
            });
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordScore {
    pub word: String,
    pub token_id: u32,
    /// Attention averaged over the positions holding this word.
    pub weight: f64,
    pub positions: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AspectExplanation {
    pub owner: String,
    pub kind: DocKind,
    /// 1-based aspect index.
    pub aspect: usize,
    pub top_words: Vec<WordScore>,
}

/// Ranks the distinct words of a document by their mean attention weight.
/// Ties go to the word that appears first. Padding is never returned.
pub fn top_words(doc: &Document, beta: &[f64], vocab: &Vocabulary, k: usize) -> Vec<WordScore> {
    let mut by_token: BTreeMap<u32, (f64, Vec<usize>)> = BTreeMap::new();
    for (j, (&t, &m)) in doc.token_ids.iter().zip(&doc.mask).enumerate() {
        if m == 0 {
            continue;
        }
        let e = by_token.entry(t).or_default();
        e.0 += beta[j];
        e.1.push(j);
    }
    let mut scored: Vec<WordScore> = by_token
        .into_iter()
        .map(|(t, (sum, positions))| WordScore {
            word: vocab.word(t).unwrap_or("<unk>").to_string(),
            token_id: t,
            weight: sum / positions.len() as f64,
            positions,
        })
        .collect();
    scored.sort_by(|a, b| b.weight.total_cmp(&a.weight).then(a.positions[0].cmp(&b.positions[0])));
    scored.truncate(k);
    scored
}

/// 1-based (row, column) of the largest entry; the first in row-major order
/// wins ties.
pub fn argmax_cell(s: &Tensor) -> (usize, usize) {
    let (_, cols) = s.dims2();
    let mut best = 0;
    for (i, v) in s.data().iter().enumerate() {
        if *v > s.data()[best] {
            best = i;
        }
    }
    (best / cols + 1, best % cols + 1)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (r, _) = t.dims2();
    (0..r).map(|i| t.row(i).to_vec()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairExplanation {
    pub user: String,
    pub item: String,
    pub prediction: f64,
    /// Rows are source aspects, columns target aspects.
    pub correlation: Vec<Vec<f64>>,
    pub matching: Vec<Vec<f64>>,
    pub weighted: Vec<Vec<f64>>,
    pub argmax: (usize, usize),
    pub user_aspects: Vec<AspectExplanation>,
    pub aux_aspects: Vec<AspectExplanation>,
    pub item_aspects: Vec<AspectExplanation>,
}

fn explain_doc(g: &Graph<'_>, doc: &Document, betas: &[crate::graph::Var], vocab: &Vocabulary, k: usize) -> Vec<AspectExplanation> {
    betas
        .iter()
        .enumerate()
        .map(|(m, &b)| AspectExplanation {
            owner: doc.owner.clone(),
            kind: doc.kind,
            aspect: m + 1,
            top_words: top_words(doc, g.value(b).data(), vocab, k),
        })
        .collect()
}

/// Explains the target-flow prediction for source user `user` and target
/// item `item`.
pub fn explain_pair(model: &CatnModel, index: &DocumentIndex, vocab: &Vocabulary, user: &str, item: &str, k: usize) -> Result<PairExplanation> {
    if !index.has_user(Domain::Source, user) {
        return Err(CatnError::MissingDocument(format!("user `{user}` has no source-domain reviews")));
    }
    let pair = Pair {
        user: user.to_string(),
        item: item.to_string(),
        rating: 0.0,
        flow: Flow::TargetFlow,
    };
    let docs = model.pair_docs(index, &pair)?;
    let mut g = Graph::new();
    let mut b = Binder::new(model, false);
    let trace = b.forward_pair(&mut g, &pair, &docs, None)?;
    let s = g.value(trace.correlation).clone();
    Ok(PairExplanation {
        user: user.to_string(),
        item: item.to_string(),
        prediction: g.value(trace.prediction).item(),
        argmax: argmax_cell(&s),
        correlation: rows(&s),
        matching: rows(g.value(trace.matching)),
        weighted: rows(g.value(trace.weighted)),
        user_aspects: explain_doc(&g, &docs.user, &trace.user_attention, vocab, k),
        aux_aspects: match &docs.aux {
            Some(d) => explain_doc(&g, d, &trace.aux_attention, vocab, k),
            None => Vec::new(),
        },
        item_aspects: explain_doc(&g, &docs.item, &trace.item_attention, vocab, k),
    })
}

/// CSV of a matrix, one row per line, shortest round-trip float formatting.
pub fn matrix_csv(s: &Tensor) -> String {
    let (r, _) = s.dims2();
    let mut out = String::new();
    for i in 0..r {
        let line: Vec<String> = s.row(i).iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(out, "{}", line.join(","));
    }
    out
}

pub fn parse_matrix_csv(text: &str) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut nrows = 0;
    for (ln, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| CatnError::Parse {
                path: "<csv>".into(),
                line: ln + 1,
                msg: e.to_string(),
            })?;
        if *cols.get_or_insert(row.len()) != row.len() {
            return Err(CatnError::Parse {
                path: "<csv>".into(),
                line: ln + 1,
                msg: "ragged row".into(),
            });
        }
        data.extend(row);
        nrows += 1;
    }
    Tensor::new(vec![nrows, cols.unwrap_or(0)], data)
}

/// Writes the global correlation matrix as CSV (rows: source aspects).
pub fn export_correlation_heatmap(model: &CatnModel, path: &Path) -> Result<Tensor> {
    let s = model.global_correlation();
    std::fs::write(path, matrix_csv(&s)).map_err(|e| CatnError::io(path, e))?;
    Ok(s)
}
