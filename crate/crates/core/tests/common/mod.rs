//! Scalar-loop reference implementations shared by the integration tests.
#![allow(dead_code)]

use catn_core::corpus::DocKind;
use catn_core::graph::{eval_op, Graph};
use catn_core::model::{flow_prefix, Binder, BiasSpec, PairDocs};
use catn_core::{CatnModel, Document, Domain, Flow, HyperParams, OpKind, Pair, Tensor, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

pub fn mat(t: &Tensor) -> Mat {
    let (r, c) = t.dims2();
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn leaky(x: f64, a: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        a * x
    }
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let mut out = vec![vec![0.0; b[0].len()]; a.len()];
    for i in 0..a.len() {
        for j in 0..b[0].len() {
            let mut s = 0.0;
            for t in 0..b.len() {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

/// `w` is `n × s × d_in` flattened.
pub fn conv(x: &Mat, w: &[f64], b: &[f64], n: usize, s: usize) -> Mat {
    let (l, d) = (x.len(), x[0].len());
    let half = (s - 1) / 2;
    let mut out = vec![vec![0.0; n]; l];
    for h in 0..l {
        for f in 0..n {
            let mut acc = b[f];
            for o in 0..s {
                let pos = h as isize + o as isize - half as isize;
                if pos < 0 || pos >= l as isize {
                    continue;
                }
                for c in 0..d {
                    acc += w[(f * s + o) * d + c] * x[pos as usize][c];
                }
            }
            out[h][f] = acc;
        }
    }
    out
}

pub fn masked_softmax(z: &[f64], mask: &[f64]) -> Vec<f64> {
    let mut hi = f64::NEG_INFINITY;
    for i in 0..z.len() {
        if mask[i] != 0.0 && z[i] > hi {
            hi = z[i];
        }
    }
    if hi == f64::NEG_INFINITY {
        return vec![0.0; z.len()];
    }
    let e: Vec<f64> = (0..z.len()).map(|i| if mask[i] != 0.0 { (z[i] - hi).exp() } else { 0.0 }).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|v| v / total).collect()
}

fn random_mask(rng: &mut ChaCha8Rng, l: usize) -> Vec<f64> {
    (0..l).map(|_| if rng.gen_bool(0.7) { 1.0 } else { 0.0 }).collect()
}

/// One random trial of a forward op: `(inputs, oracle output)`.
pub fn op_case(kind: &OpKind, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Vec<f64>) {
    let r = rng.gen_range(1..5);
    let c = rng.gen_range(1..5);
    let unary = |rng: &mut ChaCha8Rng, f: &dyn Fn(f64) -> f64| {
        let x = random(rng, &[r, c]);
        let y = x.data().iter().map(|&v| f(v)).collect();
        (vec![x], y)
    };
    match kind {
        OpKind::MatMul => {
            let k = rng.gen_range(1..5);
            let a = random(rng, &[r, k]);
            let b = random(rng, &[k, c]);
            let y = flat(&matmul(&mat(&a), &mat(&b)));
            (vec![a, b], y)
        }
        OpKind::Conv1dSame => {
            let (l, d, n) = (rng.gen_range(1..9), rng.gen_range(1..4), rng.gen_range(1..4));
            let s = [1, 3, 5][rng.gen_range(0..3)];
            let x = random(rng, &[l, d]);
            let w = random(rng, &[n, s, d]);
            let b = random(rng, &[n]);
            let y = flat(&conv(&mat(&x), w.data(), b.data(), n, s));
            (vec![x, w, b], y)
        }
        OpKind::EmbeddingLookup { .. } => {
            let table = random(rng, &[r + 1, c]);
            let l = rng.gen_range(1..7);
            let ids: Vec<usize> = (0..l).map(|_| rng.gen_range(0..=r)).collect();
            let t = mat(&table);
            let y = ids.iter().flat_map(|&i| t[i].clone()).collect();
            (vec![table, Tensor::vector(ids.iter().map(|&i| i as f64).collect())], y)
        }
        OpKind::Relu => unary(rng, &|v| v.max(0.0)),
        OpKind::Sigmoid => unary(rng, &sigmoid),
        OpKind::Tanh => unary(rng, &f64::tanh),
        OpKind::LeakyRelu(a) => {
            let a = *a;
            unary(rng, &move |v| leaky(v, a))
        }
        OpKind::Mul | OpKind::Sub => {
            let a = random(rng, &[r, c]);
            let b = random(rng, &[r, c]);
            let y = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, z)| if matches!(kind, OpKind::Mul) { x * z } else { x - z })
                .collect();
            (vec![a, b], y)
        }
        OpKind::Add => {
            let a = random(rng, &[r, c]);
            if rng.gen_bool(0.5) {
                let b = random(rng, &[r, c]);
                let y = a.data().iter().zip(b.data()).map(|(x, z)| x + z).collect();
                (vec![a, b], y)
            } else {
                let b = random(rng, &[c]);
                let y = (0..r * c).map(|i| a.data()[i] + b.data()[i % c]).collect();
                (vec![a, b], y)
            }
        }
        OpKind::Concat => {
            let c2 = rng.gen_range(1..5);
            let a = random(rng, &[r, c]);
            let b = random(rng, &[r, c2]);
            let (am, bm) = (mat(&a), mat(&b));
            let y = (0..r).flat_map(|i| am[i].iter().chain(&bm[i]).copied().collect::<Vec<_>>()).collect();
            (vec![a, b], y)
        }
        OpKind::MaskedSoftmax => {
            let l = rng.gen_range(1..9);
            let z = Tensor::from_fn(&[l], |_| rng.gen_range(-4.0..4.0));
            let m = random_mask(rng, l);
            let y = masked_softmax(z.data(), &m);
            (vec![z, Tensor::vector(m)], y)
        }
        OpKind::WeightedSum => {
            let w = random(rng, &[r]);
            let v = random(rng, &[r, c]);
            let vm = mat(&v);
            let y = (0..c).map(|j| (0..r).map(|i| w.data()[i] * vm[i][j]).sum()).collect();
            (vec![w, v], y)
        }
        OpKind::MeanAll => {
            let x = random(rng, &[r, c]);
            let y = vec![x.data().iter().sum::<f64>() / (r * c) as f64];
            (vec![x], y)
        }
        OpKind::ScalarAdd => {
            let x = random(rng, &[r, c]);
            let s = random(rng, &[1]);
            let y = x.data().iter().map(|v| v + s.data()[0]).collect();
            (vec![x, s], y)
        }
        other => panic!("no oracle for {}", other.name()),
    }
}

/// Ops of the forward-op contract.
pub fn oracle_ops() -> Vec<OpKind> {
    vec![
        OpKind::MatMul,
        OpKind::Conv1dSame,
        OpKind::EmbeddingLookup { padding_idx: Some(0) },
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::LeakyRelu(0.01),
        OpKind::LeakyRelu(0.3),
        OpKind::Mul,
        OpKind::Sub,
        OpKind::Add,
        OpKind::Concat,
        OpKind::MaskedSoftmax,
        OpKind::WeightedSum,
        OpKind::MeanAll,
        OpKind::ScalarAdd,
    ]
}

/// Worst absolute error of `eval_op` against its loop oracle.
pub fn op_trials(kind: &OpKind, trials: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (inputs, want) = op_case(kind, &mut rng);
        let refs: Vec<&Tensor> = inputs.iter().collect();
        let got = eval_op(kind, &refs).unwrap();
        worst = worst.max(max_abs_diff(got.data(), &want));
    }
    worst
}

pub fn tiny_hp(rng: &mut ChaCha8Rng) -> HyperParams {
    HyperParams {
        embed_dim: rng.gen_range(1..5),
        filters: rng.gen_range(1..5),
        window: [1, 3][rng.gen_range(0..2)],
        aspect_dim: rng.gen_range(1..4),
        aspects: rng.gen_range(1..4),
        doc_len: rng.gen_range(1..8),
        leaky_slope: 0.01,
        keep_prob: 1.0,
        train_embeddings: true,
    }
}

pub const VOCAB: usize = 12;

/// A model with every parameter, biases included, drawn from [-0.5, 0.5].
pub fn random_model(hp: HyperParams, variant: Variant, rng: &mut ChaCha8Rng) -> CatnModel {
    let mut bias = BiasSpec::default();
    for d in [Domain::Source, Domain::Target] {
        bias.users_mut(d).push("u1".into());
        bias.items_mut(d).push("i1".into());
    }
    let mut m = CatnModel::new(hp, variant, VOCAB, &bias, None, rng.gen()).unwrap();
    let d = m.hp.embed_dim;
    let emb = m.embedding_id();
    for id in m.params.ids().collect::<Vec<_>>() {
        let t = m.params.get_mut(id);
        t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        if id == emb {
            t.data_mut()[..d].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    m
}

pub fn random_doc(rng: &mut ChaCha8Rng, l: usize, kind: DocKind, domain: Domain) -> Document {
    let real = rng.gen_range(0..=l);
    Document::from_tokens((0..real).map(|_| rng.gen_range(1..=VOCAB as u32)), l, "x", kind, domain)
}

/// Reads model parameters by name for the oracles.
pub struct P<'a>(pub &'a CatnModel);

impl P<'_> {
    pub fn v(&self, name: &str) -> Vec<f64> {
        self.0.params.by_name(name).unwrap_or_else(|| panic!("{name}")).data().to_vec()
    }

    pub fn m(&self, name: &str) -> Mat {
        mat(self.0.params.by_name(name).unwrap_or_else(|| panic!("{name}")))
    }

    pub fn s(&self, name: &str) -> f64 {
        self.v(name)[0]
    }

    pub fn prefix(&self, flow: Flow) -> &'static str {
        if self.0.variant.separate_flows() {
            flow_prefix(flow)
        } else {
            "flowA"
        }
    }
}

pub fn oracle_text_conv(p: &P, doc: &Document, flow: Flow) -> Mat {
    let hp = &p.0.hp;
    let e = p.m("shared.E");
    let x: Mat = doc.token_ids.iter().map(|&t| e[t as usize].clone()).collect();
    let pre = p.prefix(flow);
    let c = conv(&x, &p.v(&format!("{pre}.conv.W")), &p.v(&format!("{pre}.conv.b")), hp.filters, hp.window);
    c.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect()
}

fn affine(w: &Mat, b: &[f64], x: &[f64]) -> Vec<f64> {
    (0..w.len()).map(|i| b[i] + (0..x.len()).map(|j| w[i][j] * x[j]).sum::<f64>()).collect()
}

/// Gated features for aspect `m` (1-based).
pub fn oracle_gate(p: &P, c: &Mat, m: usize, flow: Flow) -> Mat {
    let pre = format!("{}.gate.{m}", p.prefix(flow));
    let (w, b) = (p.m(&format!("{pre}.W")), p.v(&format!("{pre}.b")));
    let (wg, bg) = (p.m(&format!("{pre}.Wg")), p.v(&format!("{pre}.bg")));
    c.iter()
        .map(|row| {
            let lin = affine(&w, &b, row);
            let gate = affine(&wg, &bg, row);
            lin.iter().zip(&gate).map(|(a, g)| a * sigmoid(*g)).collect()
        })
        .collect()
}

pub fn oracle_attention(feats: &Mat, query: Option<&[f64]>, mask: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let beta = match query {
        Some(q) => {
            let z: Vec<f64> = feats.iter().map(|r| r.iter().zip(q).map(|(a, b)| a * b).sum()).collect();
            masked_softmax(&z, mask)
        }
        None => {
            let real = mask.iter().filter(|&&m| m != 0.0).count();
            mask.iter().map(|&m| if m != 0.0 { 1.0 / real as f64 } else { 0.0 }).collect()
        }
    };
    let k = feats.first().map_or(0, |r| r.len());
    let a = (0..k).map(|j| (0..feats.len()).map(|i| beta[i] * feats[i][j]).sum()).collect();
    (a, beta)
}

fn aspects_from(p: &P, c: &Mat, doc: &Document, flow: Flow) -> Mat {
    let q = if p.0.variant.uses_attention() {
        Some(p.m(match doc.domain {
            Domain::Source => "shared.Vs",
            Domain::Target => "shared.Vt",
        }))
    } else {
        None
    };
    let mask: Vec<f64> = doc.mask.iter().map(|&m| m as f64).collect();
    (1..=p.0.hp.aspects)
        .map(|m| {
            let g = oracle_gate(p, c, m, flow);
            oracle_attention(&g, q.as_ref().map(|q| q[m - 1].as_slice()), &mask).0
        })
        .collect()
}

pub fn oracle_aspects(p: &P, doc: &Document, flow: Flow) -> Mat {
    let c = oracle_text_conv(p, doc, flow);
    aspects_from(p, &c, doc, flow)
}

pub fn oracle_aux_aspects(p: &P, doc: &Document, flow: Flow) -> Mat {
    let hp = &p.0.hp;
    let h = oracle_text_conv(p, doc, flow);
    let pre = p.prefix(flow);
    let c = conv(&h, &p.v(&format!("{pre}.aux.W")), &p.v(&format!("{pre}.aux.b")), hp.filters, hp.window);
    let c: Mat = c.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect();
    aspects_from(p, &c, doc, flow)
}

pub fn oracle_fuse(p: &P, a_u: &Mat, a_x: &Mat, flow: Flow) -> Mat {
    let pre = p.prefix(flow);
    let (w1, b1) = (p.m(&format!("{pre}.fuse.W1")), p.v(&format!("{pre}.fuse.b1")));
    let (w2, b2) = (p.m(&format!("{pre}.fuse.W2")), p.v(&format!("{pre}.fuse.b2")));
    a_u.iter()
        .zip(a_x)
        .map(|(u, x)| {
            let x1: Vec<f64> = u.iter().zip(x).map(|(a, b)| a - b).chain(u.iter().zip(x).map(|(a, b)| a * b)).collect();
            let gate: Vec<f64> = affine(&w1, &b1, &x1).into_iter().map(sigmoid).collect();
            let x2: Vec<f64> = u.iter().copied().chain(gate.iter().zip(x).map(|(g, b)| g * b)).collect();
            affine(&w2, &b2, &x2).into_iter().map(f64::tanh).collect()
        })
        .collect()
}

pub fn oracle_correlation(p: &P) -> Mat {
    let m = p.0.hp.aspects;
    if !p.0.variant.uses_attention() {
        return vec![vec![1.0; m]; m];
    }
    let (vs, vt, w) = (p.m("shared.Vs"), p.m("shared.Vt"), p.m("shared.W"));
    let k = w.len();
    let mut s = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in 0..m {
            let mut acc = 0.0;
            for a in 0..k {
                for b in 0..k {
                    acc += vs[i][a] * w[a][b] * vt[j][b];
                }
            }
            s[i][j] = leaky(acc, p.0.hp.leaky_slope);
        }
    }
    s
}

pub fn oracle_predict(p: &P, a_u: &Mat, a_i: &Mat, s: &Mat, b_u: f64, b_i: f64) -> f64 {
    let w = p.m("shared.W");
    let m = s.len();
    let k = w.len();
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..m {
            let mut sij = 0.0;
            for a in 0..k {
                for b in 0..k {
                    sij += a_u[i][a] * w[a][b] * a_i[j][b];
                }
            }
            total += s[i][j] * sij;
        }
    }
    total / (m * m) as f64 + b_u + b_i
}

pub fn oracle_forward(p: &P, pair: &Pair, docs: &PairDocs) -> f64 {
    let flow = pair.flow;
    let mut a_u = oracle_aspects(p, &docs.user, flow);
    if p.0.variant.uses_auxiliary() {
        let a_x = oracle_aux_aspects(p, docs.aux.as_ref().unwrap(), flow);
        a_u = oracle_fuse(p, &a_u, &a_x, flow);
    }
    let a_i = oracle_aspects(p, &docs.item, flow);
    let s = oracle_correlation(p);
    let s = match flow {
        Flow::TargetFlow => s,
        Flow::SourceFlow => transpose(&s),
    };
    let d = flow.item_domain();
    let mut b_u = p.s(&format!("bias.global.{d}"));
    if let Some(o) = p.0.params.by_name(&format!("bias.user.{d}.{}", pair.user)) {
        b_u += o.item();
    }
    let b_i = p.0.params.by_name(&format!("bias.item.{d}.{}", pair.item)).map_or(0.0, |t| t.item());
    oracle_predict(p, &a_u, &a_i, &s, b_u, b_i)
}

/// Worst absolute error over `trials` random tiny models for every
/// model-level forward piece, by name.
pub fn model_trials(trials: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = rng(seed);
    let names = [
        "text_convolution",
        "aspect_gate",
        "aspect_attention",
        "extract_aspects",
        "extract_aux_aspects",
        "fuse_auxiliary",
        "global_correlation",
        "predict",
        "forward_pair",
    ];
    let mut worst = [0.0f64; 9];
    for t in 0..trials {
        let hp = tiny_hp(&mut rng);
        let variant = Variant::ALL[t % 4];
        let model = random_model(hp.clone(), variant, &mut rng);
        let p = P(&model);
        let flow = if rng.gen_bool(0.5) { Flow::TargetFlow } else { Flow::SourceFlow };
        let l = hp.doc_len;
        let user = random_doc(&mut rng, l, DocKind::User, flow.user_domain());
        let aux = random_doc(&mut rng, l, DocKind::UserAux, flow.user_domain());
        let item = random_doc(&mut rng, l, DocKind::Item, flow.item_domain());

        let mut g = Graph::new();
        let mut b = Binder::new(&model, false);
        let mut bump = |i: usize, got: &[f64], want: &[f64]| worst[i] = worst[i].max(max_abs_diff(got, want));

        let c = b.text_convolution(&mut g, &user, flow).unwrap();
        let c_o = oracle_text_conv(&p, &user, flow);
        bump(0, g.value(c).data(), &flat(&c_o));

        let m = rng.gen_range(1..=hp.aspects);
        let feats = b.aspect_gate(&mut g, c, m, flow).unwrap();
        let f_o = oracle_gate(&p, &c_o, m, flow);
        bump(1, g.value(feats).data(), &flat(&f_o));

        let qv = Tensor::from_fn(&[hp.aspect_dim], |_| rng.gen_range(-1.0..1.0));
        let use_q = rng.gen_bool(0.7);
        let q = g.constant(qv.clone());
        let (a, beta) = b.aspect_attention(&mut g, feats, use_q.then_some(q), &user.mask).unwrap();
        let mask: Vec<f64> = user.mask.iter().map(|&v| v as f64).collect();
        let (a_o, beta_o) = oracle_attention(&f_o, use_q.then_some(qv.data()), &mask);
        bump(2, g.value(a).data(), &a_o);
        bump(2, g.value(beta).data(), &beta_o);

        let (au, _) = b.extract_aspects(&mut g, &user, flow).unwrap();
        let au_o = oracle_aspects(&p, &user, flow);
        bump(3, g.value(au).data(), &flat(&au_o));

        if variant.uses_auxiliary() {
            let (ax, _) = b.extract_aux_aspects(&mut g, &aux, flow).unwrap();
            let ax_o = oracle_aux_aspects(&p, &aux, flow);
            bump(4, g.value(ax).data(), &flat(&ax_o));
            let fused = b.fuse_auxiliary(&mut g, au, ax, flow).unwrap();
            bump(5, g.value(fused).data(), &flat(&oracle_fuse(&p, &au_o, &ax_o, flow)));
        }

        let s = b.global_correlation(&mut g).unwrap();
        let s_o = oracle_correlation(&p);
        bump(6, g.value(s).data(), &flat(&s_o));

        let (ai, _) = b.extract_aspects(&mut g, &item, flow).unwrap();
        let ai_o = oracle_aspects(&p, &item, flow);
        let (bu, bi) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let buv = g.constant(Tensor::scalar(bu));
        let biv = g.constant(Tensor::scalar(bi));
        let (r, _, _) = b.predict(&mut g, au, ai, s, buv, biv).unwrap();
        bump(7, g.value(r).data(), &[oracle_predict(&p, &au_o, &ai_o, &s_o, bu, bi)]);

        let pair = Pair {
            user: if rng.gen_bool(0.5) { "u1".into() } else { "u9".into() },
            item: if rng.gen_bool(0.5) { "i1".into() } else { "i9".into() },
            rating: 3.0,
            flow,
        };
        let docs = PairDocs {
            user,
            aux: variant.uses_auxiliary().then_some(aux),
            item,
        };
        let trace = b.forward_pair(&mut g, &pair, &docs, None).unwrap();
        bump(8, g.value(trace.prediction).data(), &[oracle_forward(&p, &pair, &docs)]);
    }
    names.into_iter().zip(worst).collect()
}

/// One random protocol case.
#[derive(Clone, Debug)]
pub struct ProtocolCase {
    pub overlap: usize,
    pub single: usize,
    pub items: usize,
    pub ratings: usize,
    pub eta: f64,
    pub batch: usize,
    pub seed: u64,
}

impl ProtocolCase {
    pub fn draw(rng: &mut ChaCha8Rng) -> Self {
        let items = rng.gen_range(3..12);
        ProtocolCase {
            overlap: rng.gen_range(4..60),
            single: rng.gen_range(0..15),
            items,
            ratings: rng.gen_range(1..=items),
            eta: [0.05, 0.2, 0.5, 0.8, 1.0][rng.gen_range(0..5)],
            batch: rng.gen_range(2..64),
            seed: rng.gen(),
        }
    }
}

/// Split disjointness, cold-start leakage, per-epoch coverage and per-batch
/// flow ratio for one generated scenario.
pub fn protocol_check(c: &ProtocolCase) -> Result<(), String> {
    use catn_core::corpus::{build_vocabulary, CorpusConfig};
    use catn_core::eval::check_leakage;
    use catn_core::scenario::{make_batches, partition_sizes, split_scenario, train_size, Split};
    use catn_core::synth::{generate, SynthConfig};
    use catn_core::train::scenario_index;
    use std::collections::BTreeMap;

    let data = generate(&SynthConfig {
        overlap_users: c.overlap,
        single_domain_users: c.single,
        items_per_domain: c.items,
        topics: 2.min(c.items),
        ratings_per_user: c.ratings,
        seed: c.seed,
        ..SynthConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let sc = split_scenario(data.source, data.target, c.eta, c.seed).map_err(|e| e.to_string())?;

    let (test, valid, pool) = partition_sizes(c.overlap).map_err(|e| e.to_string())?;
    if sc.valid_users.len() != valid || sc.test_users.len() != test || sc.train_users.len() != train_size(pool, c.eta) {
        return Err(format!("partition sizes {:?}", (sc.train_users.len(), sc.valid_users.len(), sc.test_users.len())));
    }
    let parts = [&sc.train_users, &sc.valid_users, &sc.test_users];
    for i in 0..3 {
        if !parts[i].is_subset(&sc.overlap_users) {
            return Err("partition outside the overlap set".into());
        }
        for j in i + 1..3 {
            if !parts[i].is_disjoint(parts[j]) {
                return Err(format!("partitions {i} and {j} intersect"));
            }
        }
    }

    let cfg = CorpusConfig {
        doc_len: 16,
        seed: c.seed,
        ..CorpusConfig::default()
    };
    let all: Vec<_> = sc.source.iter().chain(&sc.target).cloned().collect();
    let vocab = build_vocabulary(&all, &cfg);
    let index = scenario_index(&sc, &vocab, 16, c.seed);
    for u in sc.cold_start_users() {
        if index.has_user(Domain::Target, &u) {
            return Err(format!("target reviews of cold-start user {u} are visible"));
        }
    }
    if index.records().iter().any(|r| r.domain == Domain::Target && sc.is_cold_start(&r.user_id)) {
        return Err("cold-start target record in the index".into());
    }
    for split in [Split::Validation, Split::Test] {
        check_leakage(&sc, &sc.eval_pairs(split)).map_err(|e| e.to_string())?;
    }

    let key = |p: &Pair| format!("{:?}|{}|{}|{}", p.flow, p.user, p.item, p.rating);
    let mut want: BTreeMap<String, usize> = BTreeMap::new();
    let rs = sc.training_ratings(Domain::Source);
    let rt = sc.training_ratings(Domain::Target);
    for p in rs.iter().chain(&rt) {
        *want.entry(key(p)).or_default() += 1;
    }
    let share = rs.len() as f64 / (rs.len() + rt.len()) as f64;
    for epoch in 0..3 {
        let batches = make_batches(&sc, c.batch, c.seed, epoch).map_err(|e| e.to_string())?;
        let mut got: BTreeMap<String, usize> = BTreeMap::new();
        for b in &batches {
            for p in &b.pairs {
                *got.entry(key(p)).or_default() += 1;
            }
            let ideal = share * b.size() as f64;
            if (b.count(Flow::SourceFlow) as f64 - ideal).abs() > 1.0 {
                return Err(format!("batch with {} source of {} (ideal {ideal:.2})", b.count(Flow::SourceFlow), b.size()));
            }
        }
        if got != want {
            return Err(format!("epoch {epoch} does not cover the training ratings exactly once"));
        }
    }
    Ok(())
}
