//! The CATN graph: gated text-convolution aspect extraction, auxiliary
//! review fusion, global cross-domain aspect correlation and rating
//! prediction.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{ParamId, ParamStore};
use crate::corpus::{DocKind, Document, DocumentIndex, Domain};
use crate::error::{CatnError, Result};
use crate::graph::{Graph, Var};
use crate::scenario::{Flow, Pair};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Shared extraction parameters, average pooling, all-ones correlation.
    Basic,
    /// Adds global aspect queries and the learned correlation matrix.
    Attn,
    /// Separate extraction parameters per learning flow.
    Separate,
    /// Adds auxiliary review enhancement.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Basic, Variant::Attn, Variant::Separate, Variant::Full];

    pub fn uses_attention(self) -> bool {
        self != Variant::Basic
    }

    pub fn separate_flows(self) -> bool {
        matches!(self, Variant::Separate | Variant::Full)
    }

    pub fn uses_auxiliary(self) -> bool {
        self == Variant::Full
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Basic => "basic",
            Variant::Attn => "attn",
            Variant::Separate => "separate",
            Variant::Full => "full",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = CatnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "basic" => Ok(Variant::Basic),
            "attn" => Ok(Variant::Attn),
            "separate" => Ok(Variant::Separate),
            "full" => Ok(Variant::Full),
            other => Err(CatnError::UnknownVariant(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Word embedding dimension `d`.
    pub embed_dim: usize,
    /// Convolution filters `n`.
    pub filters: usize,
    /// Convolution window `s` (odd).
    pub window: usize,
    /// Aspect representation dimension `k`.
    pub aspect_dim: usize,
    /// Number of aspects `M`.
    pub aspects: usize,
    /// Document length `l`.
    pub doc_len: usize,
    /// Negative slope of the correlation LeakyReLU.
    pub leaky_slope: f64,
    pub keep_prob: f64,
    pub train_embeddings: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            embed_dim: 300,
            filters: 50,
            window: 3,
            aspect_dim: 32,
            aspects: 5,
            doc_len: 500,
            leaky_slope: 0.01,
            keep_prob: 0.8,
            train_embeddings: false,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.embed_dim, self.filters, self.window, self.aspect_dim, self.aspects, self.doc_len];
        if dims.iter().any(|&d| d == 0) {
            return Err(CatnError::Config("all model dimensions must be positive".into()));
        }
        if self.window % 2 == 0 {
            return Err(CatnError::Config(format!("window size must be odd, got {}", self.window)));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(CatnError::Config(format!("keep_prob must be in (0, 1], got {}", self.keep_prob)));
        }
        if !(self.leaky_slope > 0.0) {
            return Err(CatnError::Config("leaky slope must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct GateIds {
    w: ParamId,
    b: ParamId,
    wg: ParamId,
    bg: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct FlowIds {
    prefix: String,
    conv_w: ParamId,
    conv_b: ParamId,
    gates: Vec<GateIds>,
    aux: Option<(ParamId, ParamId)>,
    fuse: Option<[ParamId; 4]>,
}

impl FlowIds {
    fn all(&self) -> Vec<ParamId> {
        let mut v = vec![self.conv_w, self.conv_b];
        for g in &self.gates {
            v.extend([g.w, g.b, g.wg, g.bg]);
        }
        if let Some((w, b)) = self.aux {
            v.extend([w, b]);
        }
        if let Some(f) = self.fuse {
            v.extend(f);
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    emb: ParamId,
    vs: Option<ParamId>,
    vt: Option<ParamId>,
    w: ParamId,
    /// Indexed by `flow_slot`: target flow first.
    flows: Vec<FlowIds>,
    global_bias: [ParamId; 2],
    user_bias: HashMap<(Domain, String), ParamId>,
    item_bias: HashMap<(Domain, String), ParamId>,
}

fn domain_slot(d: Domain) -> usize {
    match d {
        Domain::Source => 0,
        Domain::Target => 1,
    }
}

/// Ids known to the model, per domain, used to allocate bias entries.
#[derive(Clone, Debug, Default)]
pub struct BiasSpec {
    pub users: [Vec<String>; 2],
    pub items: [Vec<String>; 2],
    /// Initial global bias per domain (usually the mean training rating).
    pub global: [f64; 2],
}

impl BiasSpec {
    pub fn users_mut(&mut self, d: Domain) -> &mut Vec<String> {
        &mut self.users[domain_slot(d)]
    }

    pub fn items_mut(&mut self, d: Domain) -> &mut Vec<String> {
        &mut self.items[domain_slot(d)]
    }
}

/// Half-width of the uniform embedding initialisation.
pub const EMBED_INIT: f64 = 0.5;

/// Names of the two flow parameter sets.
pub fn flow_prefix(flow: Flow) -> &'static str {
    match flow {
        Flow::TargetFlow => "flowA",
        Flow::SourceFlow => "flowB",
    }
}

#[derive(Clone, Debug)]
pub struct CatnModel {
    pub hp: HyperParams,
    pub variant: Variant,
    pub params: ParamStore,
    layout: Layout,
}

/// The three documents one prediction reads.
#[derive(Clone, Debug, PartialEq)]
pub struct PairDocs {
    pub user: Document,
    pub aux: Option<Document>,
    pub item: Document,
}

/// Graph handles for everything a prediction exposes.
#[derive(Clone, Debug)]
pub struct PairTrace {
    pub prediction: Var,
    /// Global correlation oriented with rows indexing the user-document domain.
    pub correlation: Var,
    pub matching: Var,
    pub weighted: Var,
    pub user_aspects: Var,
    pub item_aspects: Var,
    pub aux_aspects: Option<Var>,
    pub user_attention: Vec<Var>,
    pub aux_attention: Vec<Var>,
    pub item_attention: Vec<Var>,
}

/// Dropout keep-masks (already scaled by `1 / keep_prob`) for `A_u` and `A_i`.
#[derive(Clone, Debug)]
pub struct DropoutMasks {
    pub user: Tensor,
    pub item: Tensor,
}

impl DropoutMasks {
    pub fn sample(hp: &HyperParams, rng: &mut impl Rng) -> Self {
        let shape = [hp.aspects, hp.aspect_dim];
        let scale = 1.0 / hp.keep_prob;
        let mut draw = || Tensor::from_fn(&shape, |_| if rng.gen::<f64>() < hp.keep_prob { scale } else { 0.0 });
        let user = draw();
        let item = draw();
        DropoutMasks { user, item }
    }
}

impl CatnModel {
    /// Fresh model. Weights and aspect queries are Glorot-uniform (fan-out is
    /// the leading dimension, fan-in the product of the rest), biases zero
    /// (global biases from `biases.global`), embeddings from `pretrained`
    /// rows when given, else uniform in `±EMBED_INIT`; the padding row is zero.
    pub fn new(
        hp: HyperParams,
        variant: Variant,
        vocab_size: usize,
        biases: &BiasSpec,
        pretrained: Option<&HashMap<usize, Vec<f64>>>,
        seed: u64,
    ) -> Result<Self> {
        hp.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (d, n, s, k, m) = (hp.embed_dim, hp.filters, hp.window, hp.aspect_dim, hp.aspects);
        let mut uniform = |shape: &[usize], r: f64| Tensor::from_fn(shape, |_| rng.gen_range(-r..=r));
        let glorot = |shape: &[usize]| {
            let fan_in: usize = shape[1..].iter().product();
            (6.0 / (fan_in + shape[0]) as f64).sqrt()
        };

        let mut emb = uniform(&[vocab_size + 1, d], EMBED_INIT);
        emb.data_mut()[..d].iter_mut().for_each(|v| *v = 0.0);
        if let Some(pre) = pretrained {
            for (&row, vec) in pre {
                if row == 0 || row > vocab_size || vec.len() != d {
                    return Err(CatnError::InvalidArgument(format!("pretrained row {row} does not fit the embedding table")));
                }
                emb.data_mut()[row * d..(row + 1) * d].copy_from_slice(vec);
            }
        }
        params.insert("shared.E", emb)?;
        if variant.uses_attention() {
            params.insert("shared.Vs", uniform(&[m, k], glorot(&[m, k])))?;
            params.insert("shared.Vt", uniform(&[m, k], glorot(&[m, k])))?;
        }
        params.insert("shared.W", uniform(&[k, k], glorot(&[k, k])))?;

        let flows: &[Flow] = if variant.separate_flows() {
            &[Flow::TargetFlow, Flow::SourceFlow]
        } else {
            &[Flow::TargetFlow]
        };
        for &flow in flows {
            let p = flow_prefix(flow);
            params.insert(format!("{p}.conv.W"), uniform(&[n, s, d], glorot(&[n, s, d])))?;
            params.insert(format!("{p}.conv.b"), Tensor::zeros(&[n]))?;
            for a in 1..=m {
                params.insert(format!("{p}.gate.{a}.W"), uniform(&[k, n], glorot(&[k, n])))?;
                params.insert(format!("{p}.gate.{a}.b"), Tensor::zeros(&[k]))?;
                params.insert(format!("{p}.gate.{a}.Wg"), uniform(&[k, n], glorot(&[k, n])))?;
                params.insert(format!("{p}.gate.{a}.bg"), Tensor::zeros(&[k]))?;
            }
            if variant.uses_auxiliary() {
                params.insert(format!("{p}.aux.W"), uniform(&[n, s, n], glorot(&[n, s, n])))?;
                params.insert(format!("{p}.aux.b"), Tensor::zeros(&[n]))?;
                params.insert(format!("{p}.fuse.W1"), uniform(&[k, 2 * k], glorot(&[k, 2 * k])))?;
                params.insert(format!("{p}.fuse.b1"), Tensor::zeros(&[k]))?;
                params.insert(format!("{p}.fuse.W2"), uniform(&[k, 2 * k], glorot(&[k, 2 * k])))?;
                params.insert(format!("{p}.fuse.b2"), Tensor::zeros(&[k]))?;
            }
        }
        for dom in [Domain::Source, Domain::Target] {
            params.insert(format!("bias.global.{dom}"), Tensor::scalar(biases.global[domain_slot(dom)]))?;
        }
        for dom in [Domain::Source, Domain::Target] {
            let mut users = biases.users[domain_slot(dom)].clone();
            users.sort();
            users.dedup();
            for u in users {
                params.insert(format!("bias.user.{dom}.{u}"), Tensor::scalar(0.0))?;
            }
            let mut items = biases.items[domain_slot(dom)].clone();
            items.sort();
            items.dedup();
            for i in items {
                params.insert(format!("bias.item.{dom}.{i}"), Tensor::scalar(0.0))?;
            }
        }
        Self::from_params(hp, variant, params)
    }

    /// Wraps an existing parameter store, e.g. one loaded from a checkpoint.
    pub fn from_params(hp: HyperParams, variant: Variant, params: ParamStore) -> Result<Self> {
        hp.validate()?;
        let layout = resolve_layout(&hp, variant, &params)?;
        Ok(CatnModel {
            hp,
            variant,
            params,
            layout,
        })
    }

    pub fn vocab_rows(&self) -> usize {
        self.params.get(self.layout.emb).shape()[0]
    }

    fn flow_ids(&self, flow: Flow) -> &FlowIds {
        match flow {
            Flow::TargetFlow => &self.layout.flows[0],
            Flow::SourceFlow => self.layout.flows.last().expect("at least one flow"),
        }
    }

    /// Parameters of one flow's extraction path (conv, gates, aux, fusion).
    pub fn flow_param_ids(&self, flow: Flow) -> Vec<ParamId> {
        self.flow_ids(flow).all()
    }

    /// Parameters regularized in a flow's loss: its own extraction
    /// parameters plus the shared ones. Biases are excluded, as are frozen
    /// embeddings.
    pub fn regularized_ids(&self, flow: Flow) -> Vec<ParamId> {
        let mut v = self.flow_param_ids(flow);
        v.extend(self.shared_ids());
        v
    }

    fn shared_ids(&self) -> Vec<ParamId> {
        let l = &self.layout;
        let mut v = Vec::new();
        if self.hp.train_embeddings {
            v.push(l.emb);
        }
        v.extend(l.vs);
        v.extend(l.vt);
        v.push(l.w);
        v
    }

    /// Every parameter that can receive a gradient.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|&id| id != self.layout.emb || self.hp.train_embeddings)
            .collect()
    }

    pub fn embedding_id(&self) -> ParamId {
        self.layout.emb
    }

    /// Number of learned scalars excluding bias tables.
    pub fn parameter_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(_, name, _)| !name.starts_with("bias."))
            .map(|(_, _, t)| t.len())
            .sum()
    }

    pub fn has_user_bias(&self, d: Domain, u: &str) -> bool {
        self.layout.user_bias.contains_key(&(d, u.to_string()))
    }

    /// Assembles the documents a pair reads. The item document never
    /// contains the pair's own review.
    pub fn pair_docs(&self, index: &DocumentIndex, pair: &Pair) -> Result<PairDocs> {
        let ud = pair.flow.user_domain();
        let id = pair.flow.item_domain();
        let user = index.user_doc(ud, &pair.user, None)?;
        let aux = if self.variant.uses_auxiliary() {
            Some(index.aux_doc(ud, &pair.user)?)
        } else {
            None
        };
        if index.doc_len() != self.hp.doc_len {
            return Err(CatnError::Config(format!(
                "document length {} differs from the model's {}",
                index.doc_len(),
                self.hp.doc_len
            )));
        }
        // an item whose only reviews are hidden still gets a (blank) document
        let item = if index.has_item(id, &pair.item) {
            index.item_doc(id, &pair.item, Some(&pair.user))?
        } else {
            Document::from_tokens([], self.hp.doc_len, &pair.item, DocKind::Item, id)
        };
        Ok(PairDocs { user, aux, item })
    }

    /// Global correlation matrix (rows: source aspects, columns: target
    /// aspects). All ones for the basic variant.
    pub fn global_correlation(&self) -> Tensor {
        let mut g = Graph::new();
        let mut b = Binder::new(self, false);
        let s = b.global_correlation(&mut g).expect("shapes fixed at construction");
        g.value(s).clone()
    }
}

fn resolve_layout(hp: &HyperParams, variant: Variant, params: &ParamStore) -> Result<Layout> {
    let (d, n, s, k, m) = (hp.embed_dim, hp.filters, hp.window, hp.aspect_dim, hp.aspects);
    let need = |name: &str, shape: &[usize]| -> Result<ParamId> {
        let id = params
            .id(name)
            .ok_or_else(|| CatnError::Checkpoint(format!("missing parameter `{name}`")))?;
        if params.get(id).shape() != shape {
            return Err(CatnError::Checkpoint(format!(
                "`{name}` has shape {:?}, expected {shape:?}",
                params.get(id).shape()
            )));
        }
        Ok(id)
    };
    let emb = params
        .id("shared.E")
        .ok_or_else(|| CatnError::Checkpoint("missing parameter `shared.E`".into()))?;
    let et = params.get(emb);
    if et.rank() != 2 || et.shape()[1] != d {
        return Err(CatnError::Checkpoint(format!("`shared.E` has shape {:?}, expected [_, {d}]", et.shape())));
    }
    let (vs, vt) = if variant.uses_attention() {
        (Some(need("shared.Vs", &[m, k])?), Some(need("shared.Vt", &[m, k])?))
    } else {
        (None, None)
    };
    let w = need("shared.W", &[k, k])?;
    let flows: &[Flow] = if variant.separate_flows() {
        &[Flow::TargetFlow, Flow::SourceFlow]
    } else {
        &[Flow::TargetFlow]
    };
    let mut flow_ids = Vec::new();
    for &flow in flows {
        let p = flow_prefix(flow);
        let gates = (1..=m)
            .map(|a| {
                Ok(GateIds {
                    w: need(&format!("{p}.gate.{a}.W"), &[k, n])?,
                    b: need(&format!("{p}.gate.{a}.b"), &[k])?,
                    wg: need(&format!("{p}.gate.{a}.Wg"), &[k, n])?,
                    bg: need(&format!("{p}.gate.{a}.bg"), &[k])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (aux, fuse) = if variant.uses_auxiliary() {
            (
                Some((need(&format!("{p}.aux.W"), &[n, s, n])?, need(&format!("{p}.aux.b"), &[n])?)),
                Some([
                    need(&format!("{p}.fuse.W1"), &[k, 2 * k])?,
                    need(&format!("{p}.fuse.b1"), &[k])?,
                    need(&format!("{p}.fuse.W2"), &[k, 2 * k])?,
                    need(&format!("{p}.fuse.b2"), &[k])?,
                ]),
            )
        } else {
            (None, None)
        };
        flow_ids.push(FlowIds {
            prefix: p.to_string(),
            conv_w: need(&format!("{p}.conv.W"), &[n, s, d])?,
            conv_b: need(&format!("{p}.conv.b"), &[n])?,
            gates,
            aux,
            fuse,
        });
    }
    let global_bias = [need("bias.global.source", &[1])?, need("bias.global.target", &[1])?];
    let mut user_bias = HashMap::new();
    let mut item_bias = HashMap::new();
    for (id, name, t) in params.iter() {
        let (table, rest) = if let Some(r) = name.strip_prefix("bias.user.") {
            (&mut user_bias, r)
        } else if let Some(r) = name.strip_prefix("bias.item.") {
            (&mut item_bias, r)
        } else {
            continue;
        };
        let (dom, owner) = rest
            .split_once('.')
            .ok_or_else(|| CatnError::Checkpoint(format!("malformed bias name `{name}`")))?;
        if t.len() != 1 {
            return Err(CatnError::Checkpoint(format!("bias `{name}` must be a scalar")));
        }
        table.insert((dom.parse::<Domain>()?, owner.to_string()), id);
    }
    Ok(Layout {
        emb,
        vs,
        vt,
        w,
        flows: flow_ids,
        global_bias,
        user_bias,
        item_bias,
    })
}

/// Binds model parameters into one graph, one leaf per parameter.
pub struct Binder<'a> {
    model: &'a CatnModel,
    vars: BTreeMap<ParamId, Var>,
    grad: bool,
}

impl<'a> Binder<'a> {
    /// With `grad` false every parameter enters as a constant.
    pub fn new(model: &'a CatnModel, grad: bool) -> Self {
        Binder {
            model,
            vars: BTreeMap::new(),
            grad,
        }
    }

    pub fn model(&self) -> &'a CatnModel {
        self.model
    }

    pub fn param(&mut self, g: &mut Graph<'a>, id: ParamId) -> Var {
        if let Some(&v) = self.vars.get(&id) {
            return v;
        }
        let trainable = self.grad && (id != self.model.layout.emb || self.model.hp.train_embeddings);
        let v = g.borrowed(self.model.params.get(id), trainable);
        self.vars.insert(id, v);
        v
    }

    /// Parameter leaves bound so far, in id order.
    pub fn bound(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.vars.iter().map(|(&p, &v)| (p, v))
    }

    /// Parameter gradients after `g.backward`.
    pub fn take_grads(&self, g: &mut Graph<'a>) -> Vec<(ParamId, Vec<f64>)> {
        self.vars
            .iter()
            .filter_map(|(&p, &v)| g.take_grad(v).map(|gr| (p, gr)))
            .collect()
    }

    fn query(&mut self, g: &mut Graph<'a>, domain: Domain) -> Option<Var> {
        let id = match domain {
            Domain::Source => self.model.layout.vs,
            Domain::Target => self.model.layout.vt,
        }?;
        Some(self.param(g, id))
    }

    /// Embedding lookup, same-padded convolution, ReLU: `l × n`.
    pub fn text_convolution(&mut self, g: &mut Graph<'a>, doc: &Document, flow: Flow) -> Result<Var> {
        let ids = self.model.flow_ids(flow);
        let (cw, cb) = (ids.conv_w, ids.conv_b);
        let table = self.param(g, self.model.layout.emb);
        let tok = g.constant(Tensor::vector(doc.token_ids.iter().map(|&t| t as f64).collect()));
        let e = g.embedding_lookup(table, tok, Some(0))?;
        let w = self.param(g, cw);
        let b = self.param(g, cb);
        let c = g.conv1d_same(e, w, b)?;
        g.relu(c)
    }

    /// `(W_m c_j + b_m) ⊙ σ(W_m^g c_j + b_m^g)` for every row `c_j`; `m` is 1-based.
    pub fn aspect_gate(&mut self, g: &mut Graph<'a>, c: Var, m: usize, flow: Flow) -> Result<Var> {
        let gates = &self.model.flow_ids(flow).gates;
        let ids = gates
            .get(m.wrapping_sub(1))
            .ok_or_else(|| CatnError::InvalidArgument(format!("aspect index {m} outside 1..={}", gates.len())))?
            .clone();
        let lin = self.linear(g, c, ids.w, ids.b)?;
        let gate_pre = self.linear(g, c, ids.wg, ids.bg)?;
        let gate = g.sigmoid(gate_pre)?;
        g.mul(lin, gate)
    }

    /// `x · Wᵀ + b` row-wise.
    fn linear(&mut self, g: &mut Graph<'a>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let wv = self.param(g, w);
        let wt = g.transpose(wv)?;
        let y = g.matmul(x, wt)?;
        let bv = self.param(g, b);
        g.add(y, bv)
    }

    /// Aspect readout from gated features `l × k`. With a query the weights
    /// are a masked softmax of `g_j · query`; without one they are uniform
    /// over real tokens. Returns `(a_m, β)`.
    pub fn aspect_attention(&mut self, g: &mut Graph<'a>, feats: Var, query: Option<Var>, mask: &[u8]) -> Result<(Var, Var)> {
        let l = mask.len();
        let beta = match query {
            Some(q) => {
                let k = g.value(q).len();
                let qcol = g.reshape(q, &[k, 1])?;
                let scores = g.matmul(feats, qcol)?;
                let scores = g.reshape(scores, &[l])?;
                let mask_t = g.constant(Tensor::vector(mask.iter().map(|&m| m as f64).collect()));
                g.masked_softmax(scores, mask_t)?
            }
            None => {
                let real = mask.iter().filter(|&&m| m != 0).count();
                let w = if real == 0 { 0.0 } else { 1.0 / real as f64 };
                g.constant(Tensor::vector(mask.iter().map(|&m| if m != 0 { w } else { 0.0 }).collect()))
            }
        };
        let a = g.weighted_sum(beta, feats)?;
        Ok((a, beta))
    }

    fn aspects_from_features(&mut self, g: &mut Graph<'a>, c: Var, doc: &Document, flow: Flow) -> Result<(Var, Vec<Var>)> {
        let query = self.query(g, doc.domain);
        let mut rows = Vec::with_capacity(self.model.hp.aspects);
        let mut betas = Vec::with_capacity(self.model.hp.aspects);
        for m in 1..=self.model.hp.aspects {
            let feats = self.aspect_gate(g, c, m, flow)?;
            let q = match query {
                Some(qm) => Some(g.row(qm, m - 1)?),
                None => None,
            };
            let (a, beta) = self.aspect_attention(g, feats, q, &doc.mask)?;
            rows.push(a);
            betas.push(beta);
        }
        Ok((g.stack_rows(&rows)?, betas))
    }

    /// `M × k` aspect matrix of a document, queried by its domain's `V`.
    pub fn extract_aspects(&mut self, g: &mut Graph<'a>, doc: &Document, flow: Flow) -> Result<(Var, Vec<Var>)> {
        let c = self.text_convolution(g, doc, flow)?;
        self.aspects_from_features(g, c, doc, flow)
    }

    /// Like `extract_aspects` with a second convolution + ReLU on top of the
    /// text convolution.
    pub fn extract_aux_aspects(&mut self, g: &mut Graph<'a>, doc: &Document, flow: Flow) -> Result<(Var, Vec<Var>)> {
        let (aw, ab) = self
            .model
            .flow_ids(flow)
            .aux
            .ok_or_else(|| CatnError::InvalidArgument(format!("variant {} has no auxiliary path", self.model.variant)))?;
        let h = self.text_convolution(g, doc, flow)?;
        let w = self.param(g, aw);
        let b = self.param(g, ab);
        let c = g.conv1d_same(h, w, b)?;
        let c = g.relu(c)?;
        self.aspects_from_features(g, c, doc, flow)
    }

    /// Gated fusion of the user and auxiliary aspect matrices, row by row.
    pub fn fuse_auxiliary(&mut self, g: &mut Graph<'a>, a_u: Var, a_aux: Var, flow: Flow) -> Result<Var> {
        let [w1, b1, w2, b2] = self
            .model
            .flow_ids(flow)
            .fuse
            .ok_or_else(|| CatnError::InvalidArgument(format!("variant {} has no fusion gate", self.model.variant)))?;
        if g.value(a_u).shape() != g.value(a_aux).shape() {
            return Err(CatnError::shape("fuse_auxiliary", g.value(a_u).shape(), g.value(a_aux).shape()));
        }
        let diff = g.sub(a_u, a_aux)?;
        let prod = g.mul(a_u, a_aux)?;
        let x1 = g.concat(diff, prod)?;
        let pre = self.linear(g, x1, w1, b1)?;
        let gate = g.sigmoid(pre)?;
        let gated = g.mul(gate, a_aux)?;
        let x2 = g.concat(a_u, gated)?;
        let pre = self.linear(g, x2, w2, b2)?;
        g.tanh(pre)
    }

    /// `LeakyReLU(V_s W V_tᵀ)`, or all ones without aspect queries.
    pub fn global_correlation(&mut self, g: &mut Graph<'a>) -> Result<Var> {
        let m = self.model.hp.aspects;
        match (self.model.layout.vs, self.model.layout.vt) {
            (Some(vs), Some(vt)) => {
                let vs = self.param(g, vs);
                let vt = self.param(g, vt);
                let w = self.param(g, self.model.layout.w);
                let x = g.matmul(vs, w)?;
                let vtt = g.transpose(vt)?;
                let s = g.matmul(x, vtt)?;
                g.leaky_relu(s, self.model.hp.leaky_slope)
            }
            _ => Ok(g.constant(Tensor::filled(&[m, m], 1.0))),
        }
    }

    /// `(1/M²) Σ S ⊙ (A_u W A_iᵀ) + b_u + b_i`. Returns
    /// `(r̂, S_{u,i}, S^r)`.
    pub fn predict(&mut self, g: &mut Graph<'a>, a_u: Var, a_i: Var, s: Var, b_u: Var, b_i: Var) -> Result<(Var, Var, Var)> {
        let w = self.param(g, self.model.layout.w);
        let x = g.matmul(a_u, w)?;
        let ait = g.transpose(a_i)?;
        let s_ui = g.matmul(x, ait)?;
        let s_r = g.mul(s, s_ui)?;
        let total = g.sum_all(s_r)?;
        let m = g.value(s).shape()[0] as f64;
        let mean = g.scale(total, 1.0 / (m * m))?;
        let r = g.add(mean, b_u)?;
        Ok((g.add(r, b_i)?, s_ui, s_r))
    }

    /// `b̄_d + δ_u` when the user has an offset in `d`, else `b̄_d`.
    pub fn user_bias(&mut self, g: &mut Graph<'a>, d: Domain, u: &str) -> Result<Var> {
        let layout = &self.model.layout;
        let global = layout.global_bias[domain_slot(d)];
        let offset = layout.user_bias.get(&(d, u.to_string())).copied();
        let gv = self.param(g, global);
        match offset {
            Some(id) => {
                let ov = self.param(g, id);
                g.add(gv, ov)
            }
            None => Ok(gv),
        }
    }

    pub fn item_bias(&mut self, g: &mut Graph<'a>, d: Domain, i: &str) -> Var {
        match self.model.layout.item_bias.get(&(d, i.to_string())).copied() {
            Some(id) => self.param(g, id),
            None => g.constant(Tensor::scalar(0.0)),
        }
    }

    /// Full prediction for one pair.
    pub fn forward_pair(&mut self, g: &mut Graph<'a>, pair: &Pair, docs: &PairDocs, dropout: Option<&DropoutMasks>) -> Result<PairTrace> {
        let flow = pair.flow;
        if docs.user.domain != flow.user_domain() || docs.item.domain != flow.item_domain() {
            return Err(CatnError::MissingDocument(format!(
                "{flow:?} needs a {} user document and a {} item document",
                flow.user_domain(),
                flow.item_domain()
            )));
        }
        let (mut a_u, user_attention) = self.extract_aspects(g, &docs.user, flow)?;
        let mut aux_aspects = None;
        let mut aux_attention = Vec::new();
        if self.model.variant.uses_auxiliary() {
            let aux = docs
                .aux
                .as_ref()
                .ok_or_else(|| CatnError::MissingDocument(format!("auxiliary document of `{}`", pair.user)))?;
            let (a_aux, betas) = self.extract_aux_aspects(g, aux, flow)?;
            a_u = self.fuse_auxiliary(g, a_u, a_aux, flow)?;
            aux_aspects = Some(a_aux);
            aux_attention = betas;
        }
        let (mut a_i, item_attention) = self.extract_aspects(g, &docs.item, flow)?;
        if let Some(masks) = dropout {
            let mu = g.constant(masks.user.clone());
            let mi = g.constant(masks.item.clone());
            a_u = g.mul(a_u, mu)?;
            a_i = g.mul(a_i, mi)?;
        }
        let s = self.global_correlation(g)?;
        let s = match flow {
            Flow::TargetFlow => s,
            Flow::SourceFlow => g.transpose(s)?,
        };
        let d = flow.item_domain();
        let b_u = self.user_bias(g, d, &pair.user)?;
        let b_i = self.item_bias(g, d, &pair.item);
        let (prediction, matching, weighted) = self.predict(g, a_u, a_i, s, b_u, b_i)?;
        Ok(PairTrace {
            prediction,
            correlation: s,
            matching,
            weighted,
            user_aspects: a_u,
            item_aspects: a_i,
            aux_aspects,
            user_attention,
            aux_attention,
            item_attention,
        })
    }
}

/// Prediction with dropout off.
pub fn predict_pair(model: &CatnModel, index: &DocumentIndex, pair: &Pair) -> Result<f64> {
    let docs = model.pair_docs(index, pair)?;
    let mut g = Graph::new();
    let mut b = Binder::new(model, false);
    let trace = b.forward_pair(&mut g, pair, &docs, None)?;
    Ok(g.value(trace.prediction).item())
}
