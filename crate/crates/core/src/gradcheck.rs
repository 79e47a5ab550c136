//! Central finite-difference check of the full two-flow training loss.

use serde::{Deserialize, Serialize};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{build_vocabulary, CorpusConfig, DocumentIndex, Vocabulary};
use crate::error::Result;
use crate::model::{CatnModel, HyperParams, Variant};
use crate::parallel::Execution;
use crate::scenario::{make_batches, split_scenario, Flow, Pair, Scenario};
use crate::synth::{generate, SynthConfig};
use crate::train::{flow_gradients, l2_penalty, loss, predict_all, scenario_biases, scenario_index, Gradients};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    /// Analytic and numeric value at the worst entry.
    pub worst_pair: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub variant: Variant,
    pub max_rel_error: f64,
    pub entries: usize,
    pub tensors: Vec<TensorCheck>,
}

pub const GRAD_FLOOR: f64 = 1e-5;

/// `|a − f| / max(|a|, |f|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// A small scenario, its index and vocabulary, with the model hyperparameters
/// `l=8, d=4, n=3, k=2, M=2` over a 20-word vocabulary.
pub struct TinySetup {
    pub hp: HyperParams,
    pub scenario: Scenario,
    pub vocab: Vocabulary,
    pub index: DocumentIndex,
}

pub fn tiny_setup(seed: u64) -> Result<TinySetup> {
    let data = generate(&SynthConfig {
        overlap_users: 8,
        single_domain_users: 3,
        items_per_domain: 4,
        topics: 2,
        ratings_per_user: 2,
        words_per_topic: 4,
        filler_vocab: 4,
        user_topic_words: 2,
        item_topic_words: 2,
        filler_words: 1,
        noise: 0.5,
        seed,
        ..SynthConfig::default()
    })?;
    let scenario = split_scenario(data.source, data.target, 1.0, seed)?;
    let cfg = CorpusConfig {
        doc_len: 8,
        vocab_cap: 20,
        df_cap: 1.0,
        seed,
        ..CorpusConfig::default()
    };
    let all: Vec<_> = scenario.source.iter().chain(&scenario.target).cloned().collect();
    let vocab = build_vocabulary(&all, &cfg);
    let hp = HyperParams {
        embed_dim: 4,
        filters: 3,
        window: 3,
        aspect_dim: 2,
        aspects: 2,
        doc_len: 8,
        leaky_slope: 0.01,
        keep_prob: 1.0,
        train_embeddings: true,
    };
    let index = scenario_index(&scenario, &vocab, hp.doc_len, seed);
    Ok(TinySetup { hp, scenario, vocab, index })
}

fn two_flow_loss(model: &CatnModel, index: &DocumentIndex, flows: &[(Flow, Vec<Pair>)], l2: f64) -> Result<f64> {
    let mut total = 0.0;
    for (flow, pairs) in flows {
        let preds = predict_all(model, index, pairs, Execution::Sequential)?;
        let targets: Vec<f64> = pairs.iter().map(|p| p.rating).collect();
        total += loss(&targets, &preds, l2_penalty(&model.params, &model.regularized_ids(*flow)), l2)?;
    }
    Ok(total)
}

/// Compares analytic gradients of `L_s + L_t` on one batch against central
/// differences for every trainable entry (the padding embedding row is
/// pinned at zero and skipped). Parameters are re-drawn uniformly in
/// [-0.5, 0.5].
///
/// Relative errors use a floor of `GRAD_FLOOR`: with `eps = 1e-5` the
/// differences carry about 1e-10 of cancellation error on a loss of order
/// ten, so smaller gradients are compared absolutely.
pub fn run_gradcheck(variant: Variant, seed: u64, eps: f64, l2: f64) -> Result<GradcheckReport> {
    let setup = tiny_setup(seed)?;
    let mut model = CatnModel::new(setup.hp.clone(), variant, setup.vocab.len(), &scenario_biases(&setup.scenario), None, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let emb = model.embedding_id();
    let d = model.hp.embed_dim;
    for id in model.params.ids().collect::<Vec<_>>() {
        let t = model.params.get_mut(id);
        t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        if id == emb {
            t.data_mut()[..d].iter_mut().for_each(|v| *v = 0.0);
        }
    }

    let batch = make_batches(&setup.scenario, 16, seed, 0)?.swap_remove(0);
    let flows: Vec<(Flow, Vec<Pair>)> = [Flow::SourceFlow, Flow::TargetFlow]
        .into_iter()
        .map(|f| (f, batch.flow_pairs(f).into_iter().cloned().collect()))
        .collect();
    let mut analytic = Gradients::new();
    for (flow, pairs) in &flows {
        let refs: Vec<&Pair> = pairs.iter().collect();
        let step = flow_gradients(&model, &setup.index, *flow, &refs, l2, None, Execution::Sequential)?;
        analytic.merge(&step.grads);
    }

    let mut tensors = Vec::new();
    let mut entries = 0;
    let mut worst = 0.0f64;
    for id in model.trainable_ids() {
        let n = model.params.get(id).len();
        let skip = if id == emb { d } else { 0 };
        let mut max_rel = 0.0f64;
        let mut worst_pair = (0.0, 0.0);
        for j in skip..n {
            let orig = model.params.get(id).data()[j];
            model.params.get_mut(id).data_mut()[j] = orig + eps;
            let up = two_flow_loss(&model, &setup.index, &flows, l2)?;
            model.params.get_mut(id).data_mut()[j] = orig - eps;
            let down = two_flow_loss(&model, &setup.index, &flows, l2)?;
            model.params.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.get(id).map_or(0.0, |g| g[j]);
            let e = relative_error(a, numeric, GRAD_FLOOR);
            if e > max_rel {
                max_rel = e;
                worst_pair = (a, numeric);
            }
        }
        entries += n - skip;
        worst = worst.max(max_rel);
        tensors.push(TensorCheck {
            name: model.params.name(id).to_string(),
            entries: n - skip,
            max_rel_error: max_rel,
            worst_pair,
        });
    }
    Ok(GradcheckReport {
        variant,
        max_rel_error: worst,
        entries,
        tensors,
    })
}
