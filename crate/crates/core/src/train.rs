//! Two-flow training: per-batch alternating source/target steps with Adam,
//! L2 regularization and early stopping on validation MSE.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{ParamId, ParamStore};
use crate::corpus::{fnv1a, DocumentIndex, Domain, Vocabulary};
use crate::error::{CatnError, Result};
use crate::graph::Graph;
use crate::model::{predict_pair, BiasSpec, Binder, CatnModel, DropoutMasks, Variant};
use crate::parallel::{map_ordered, Execution};
use crate::scenario::{make_batches, Flow, Pair, Scenario, Split};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// L2 weight λ.
    pub l2: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub variant: Variant,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    #[serde(default)]
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 256,
            l2: 1e-4,
            max_epochs: 100,
            patience: 10,
            seed: 42,
            variant: Variant::Full,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CatnError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.patience < 1 {
            return bad("patience must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.l2 >= 0.0) {
            return bad(format!("l2 must be non-negative, got {}", self.l2));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return bad("Adam betas must be in [0, 1) and epsilon positive".into());
        }
        Ok(())
    }
}

/// Sparse gradient accumulator keyed by parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, id: ParamId, g: &[f64]) {
        match self.grads.get_mut(&id) {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => {
                self.grads.insert(id, g.to_vec());
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(&id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.grads.iter().map(|(&k, v)| (k, v.as_slice()))
    }

    pub fn merge(&mut self, other: &Gradients) {
        for (id, g) in other.iter() {
            self.add(id, g);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Adam moments per parameter. A parameter without a gradient in a step is
/// left untouched, and its bias correction counts only its own updates.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
    t: Vec<u64>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let n = params.len();
        AdamState {
            m: vec![None; n],
            v: vec![None; n],
            t: vec![0; n],
            lr,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn from_config(params: &ParamStore, tc: &TrainConfig) -> Self {
        Self::new(params, tc.learning_rate, tc.beta1, tc.beta2, tc.epsilon)
    }

    pub fn timestep(&self, id: ParamId) -> u64 {
        self.t[id.index()]
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) {
        for (id, g) in grads.iter() {
            let i = id.index();
            let theta = params.get_mut(id).data_mut();
            let m = self.m[i].get_or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v[i].get_or_insert_with(|| vec![0.0; g.len()]);
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                theta[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Sum of squares over `ids`.
pub fn l2_penalty(params: &ParamStore, ids: &[ParamId]) -> f64 {
    ids.iter().map(|&id| params.get(id).sum_squares()).sum()
}

/// Mean squared error of one flow's batch plus `λ · reg_sum_squares`.
pub fn loss(targets: &[f64], predictions: &[f64], reg_sum_squares: f64, l2: f64) -> Result<f64> {
    if targets.is_empty() {
        return Err(CatnError::EmptyBatch);
    }
    if targets.len() != predictions.len() {
        return Err(CatnError::shape("loss", &[targets.len()], &[predictions.len()]));
    }
    Ok(mse(targets, predictions) + l2 * reg_sum_squares)
}

pub fn mse(targets: &[f64], predictions: &[f64]) -> f64 {
    let s: f64 = targets.iter().zip(predictions).map(|(r, p)| (r - p) * (r - p)).sum();
    s / targets.len() as f64
}

/// Loss, predictions and parameter gradients of one flow step.
#[derive(Clone, Debug)]
pub struct FlowStep {
    pub loss: f64,
    pub predictions: Vec<f64>,
    pub grads: Gradients,
}

/// Dropout stream of one pair, independent of thread scheduling.
fn pair_rng(seed: u64, slot: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&[&(slot as u64).to_le_bytes()]))
}

fn pair_gradient(model: &CatnModel, index: &DocumentIndex, pair: &Pair, n: usize, dropout: Option<u64>, slot: usize) -> Result<(f64, Vec<(ParamId, Vec<f64>)>)> {
    let docs = model.pair_docs(index, pair)?;
    let masks = match dropout {
        Some(seed) if model.hp.keep_prob < 1.0 => Some(DropoutMasks::sample(&model.hp, &mut pair_rng(seed, slot))),
        _ => None,
    };
    let mut g = Graph::new();
    let mut b = Binder::new(model, true);
    let trace = b.forward_pair(&mut g, pair, &docs, masks.as_ref())?;
    let r = g.constant(Tensor::scalar(pair.rating));
    let diff = g.sub(trace.prediction, r)?;
    let sq = g.mul(diff, diff)?;
    let l = g.scale(sq, 1.0 / n as f64)?;
    g.backward(l)?;
    let pred = g.value(trace.prediction).item();
    Ok((pred, b.take_grads(&mut g)))
}

/// Forward and backward over one flow's pairs. Per-pair graphs run under
/// `exec`; gradients are summed in pair order so the result does not depend
/// on the execution mode. `dropout` seeds the dropout masks (None disables).
pub fn flow_gradients(
    model: &CatnModel,
    index: &DocumentIndex,
    flow: Flow,
    pairs: &[&Pair],
    l2: f64,
    dropout: Option<u64>,
    exec: Execution,
) -> Result<FlowStep> {
    if pairs.is_empty() {
        return Err(CatnError::EmptyBatch);
    }
    if let Some(p) = pairs.iter().find(|p| p.flow != flow) {
        return Err(CatnError::InvalidArgument(format!("pair ({}, {}) belongs to {:?}, not {flow:?}", p.user, p.item, p.flow)));
    }
    let n = pairs.len();
    let results = map_ordered(exec, pairs, |slot, p| pair_gradient(model, index, p, n, dropout, slot));
    let mut grads = Gradients::new();
    let mut predictions = Vec::with_capacity(n);
    for r in results {
        let (pred, gs) = r?;
        predictions.push(pred);
        for (id, g) in gs {
            grads.add(id, &g);
        }
    }
    let reg_ids = model.regularized_ids(flow);
    for &id in &reg_ids {
        let theta = model.params.get(id).data();
        let reg: Vec<f64> = theta.iter().map(|t| 2.0 * l2 * t).collect();
        grads.add(id, &reg);
    }
    let targets: Vec<f64> = pairs.iter().map(|p| p.rating).collect();
    let loss = loss(&targets, &predictions, l2_penalty(&model.params, &reg_ids), l2)?;
    Ok(FlowStep { loss, predictions, grads })
}

/// Predictions with dropout off, in pair order.
pub fn predict_all(model: &CatnModel, index: &DocumentIndex, pairs: &[Pair], exec: Execution) -> Result<Vec<f64>> {
    map_ordered(exec, pairs, |_, p| predict_pair(model, index, p)).into_iter().collect()
}

/// Document index over the text a scenario lets the model read.
pub fn scenario_index(scenario: &Scenario, vocab: &Vocabulary, doc_len: usize, seed: u64) -> DocumentIndex {
    let overlap: HashSet<String> = scenario.overlap_users.iter().cloned().collect();
    DocumentIndex::new(scenario.visible_interactions(), vocab, overlap, doc_len, seed)
}

/// Bias entries for every training user and item, with global biases at
/// each domain's mean training rating.
pub fn scenario_biases(scenario: &Scenario) -> BiasSpec {
    let mut spec = BiasSpec::default();
    for (k, d) in [Domain::Source, Domain::Target].into_iter().enumerate() {
        let pairs = scenario.training_ratings(d);
        spec.users_mut(d).extend(pairs.iter().map(|p| p.user.clone()));
        spec.items_mut(d).extend(pairs.iter().map(|p| p.item.clone()));
        if !pairs.is_empty() {
            spec.global[k] = pairs.iter().map(|p| p.rating).sum::<f64>() / pairs.len() as f64;
        }
    }
    spec
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss_source: f64,
    pub train_loss_target: f64,
    pub valid_mse: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub const HEADER: &'static str = "epoch,train_loss_source,train_loss_target,valid_mse,wall_seconds";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.epochs {
            let _ = writeln!(s, "{},{:?},{:?},{:?},{:.3}", r.epoch, r.train_loss_source, r.train_loss_target, r.valid_mse, r.wall_seconds);
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| CatnError::io(path, e))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation MSE.
    pub model: CatnModel,
    pub history: History,
    pub best_epoch: usize,
    pub best_valid_mse: f64,
}

fn step_seed(seed: u64, epoch: usize, batch: usize, flow: Flow) -> u64 {
    let f = match flow {
        Flow::SourceFlow => 0u8,
        Flow::TargetFlow => 1u8,
    };
    fnv1a(&[&seed.to_le_bytes(), &(epoch as u64).to_le_bytes(), &(batch as u64).to_le_bytes(), &[f]])
}

/// Runs training until `max_epochs` or until validation MSE has not
/// improved for `patience` epochs, and returns the best model.
pub fn train(mut model: CatnModel, scenario: &Scenario, index: &DocumentIndex, tc: &TrainConfig) -> Result<TrainOutcome> {
    tc.validate()?;
    if model.variant != tc.variant {
        return Err(CatnError::Config(format!("model variant {} differs from configured {}", model.variant, tc.variant)));
    }
    let valid = scenario.eval_pairs(Split::Validation);
    if valid.is_empty() {
        return Err(CatnError::Scenario("no validation pairs".into()));
    }
    let valid_targets: Vec<f64> = valid.iter().map(|p| p.rating).collect();
    let mut adam = AdamState::from_config(&model.params, tc);
    let mut history = History::default();
    let mut best: Option<(ParamStore, usize, f64)> = None;
    let mut since_best = 0;
    let started = Instant::now();

    for epoch in 0..tc.max_epochs {
        let batches = make_batches(scenario, tc.batch_size, tc.seed, epoch)?;
        let mut sums = [0.0f64; 2];
        for (bi, batch) in batches.iter().enumerate() {
            for (k, flow) in [Flow::SourceFlow, Flow::TargetFlow].into_iter().enumerate() {
                let pairs = batch.flow_pairs(flow);
                let step = flow_gradients(&model, index, flow, &pairs, tc.l2, Some(step_seed(tc.seed, epoch, bi, flow)), tc.execution)?;
                if !step.loss.is_finite() {
                    return Err(CatnError::Divergence { epoch });
                }
                sums[k] += step.loss;
                adam.step(&mut model.params, &step.grads);
            }
        }
        let preds = predict_all(&model, index, &valid, tc.execution)?;
        let valid_mse = mse(&valid_targets, &preds);
        if !valid_mse.is_finite() {
            return Err(CatnError::Divergence { epoch });
        }
        let nb = batches.len() as f64;
        let rec = EpochRecord {
            epoch,
            train_loss_source: sums[0] / nb,
            train_loss_target: sums[1] / nb,
            valid_mse,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss_s {:.5} loss_t {:.5} valid {:.5}",
            rec.train_loss_source,
            rec.train_loss_target,
            valid_mse
        );
        history.epochs.push(rec);
        if best.as_ref().map_or(true, |b| valid_mse < b.2) {
            best = Some((model.params.clone(), epoch, valid_mse));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= tc.patience {
                break;
            }
        }
    }
    let (params, best_epoch, best_valid_mse) = best.ok_or_else(|| CatnError::Config("max_epochs must be at least 1".into()))?;
    model.params = params;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_valid_mse,
    })
}
