//! Synthetic two-domain review data with a planted source-to-target topic
//! pairing, for desk-scale experiments.
//!
//! Items and user favourites are spread evenly over topics. Every user has
//! one favourite source topic; their favourite target topic
//! is its image under a random permutation. Each item belongs to one topic.
//! A rating is `clamp(base + span · [topic(i) is favourite] + noise)`, and a
//! review mixes words of the user's favourite topic, the item's topic and
//! shared filler words.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_jsonl, Document, DocumentIndex, Domain, Interaction, Vocabulary};
use crate::graph::Graph;
use crate::config::RunConfig;
use crate::model::{Binder, CatnModel, HyperParams};
use crate::scenario::Flow;
use crate::error::{CatnError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub overlap_users: usize,
    /// Users that appear only in the source domain (and as many only in the target).
    pub single_domain_users: usize,
    pub items_per_domain: usize,
    pub topics: usize,
    pub ratings_per_user: usize,
    pub words_per_topic: usize,
    pub filler_vocab: usize,
    pub user_topic_words: usize,
    pub item_topic_words: usize,
    pub filler_words: usize,
    pub base: f64,
    pub span: f64,
    /// Half-width of the uniform rating noise.
    pub noise: f64,
    /// Dimension of the emitted word vectors.
    pub embed_dim: usize,
    /// Spread of topic words around their topic centroid.
    pub embed_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            overlap_users: 20,
            single_domain_users: 10,
            items_per_domain: 10,
            topics: 3,
            ratings_per_user: 8,
            words_per_topic: 6,
            filler_vocab: 8,
            user_topic_words: 4,
            item_topic_words: 4,
            filler_words: 0,
            base: 1.0,
            span: 4.0,
            noise: 0.0,
            embed_dim: 8,
            embed_noise: 0.1,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CatnError::Config(m.to_string()));
        if self.topics == 0 || self.words_per_topic == 0 {
            return bad("synthetic data needs at least one topic with one word");
        }
        if self.items_per_domain < self.topics {
            return bad("need at least one item per topic");
        }
        if self.ratings_per_user == 0 || self.ratings_per_user > self.items_per_domain {
            return bad("ratings_per_user must be in 1..=items_per_domain");
        }
        if self.user_topic_words + self.item_topic_words + self.filler_words == 0 {
            return bad("reviews would be empty");
        }
        if self.filler_words > 0 && self.filler_vocab == 0 {
            return bad("filler words requested without a filler vocabulary");
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive");
        }
        if !(self.noise >= 0.0) {
            return bad("noise must be non-negative");
        }
        Ok(())
    }
}

/// Ground truth behind a generated data set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Planted {
    /// `pairing[t]` is the target topic paired with source topic `t`.
    pub pairing: Vec<usize>,
    /// Favourite source topic per user (overlapping and source-only users);
    /// target-only users are listed by their target topic.
    pub favourite: BTreeMap<String, usize>,
    pub item_topic: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub source: Vec<Interaction>,
    pub target: Vec<Interaction>,
    pub planted: Planted,
    /// Word vectors in which words of one topic cluster around a shared
    /// random centroid, standing in for pretrained embeddings.
    pub embeddings: Vec<(String, Vec<f64>)>,
}

pub fn topic_word(domain: Domain, topic: usize, j: usize) -> String {
    let p = match domain {
        Domain::Source => 's',
        Domain::Target => 't',
    };
    format!("{p}{topic}w{j}")
}

pub fn filler_word(j: usize) -> String {
    format!("common{j}")
}

fn item_id(domain: Domain, i: usize) -> String {
    match domain {
        Domain::Source => format!("si{i:03}"),
        Domain::Target => format!("ti{i:03}"),
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pairing: Vec<usize> = (0..cfg.topics).collect();
    pairing.shuffle(&mut rng);

    let mut item_topic = BTreeMap::new();
    let mut topics_of = |d: Domain, rng: &mut ChaCha8Rng| {
        let mut t: Vec<usize> = (0..cfg.items_per_domain).map(|i| i % cfg.topics).collect();
        t.shuffle(rng);
        for (i, &tp) in t.iter().enumerate() {
            item_topic.insert(item_id(d, i), tp);
        }
        t
    };
    let src_topics = topics_of(Domain::Source, &mut rng);
    let tgt_topics = topics_of(Domain::Target, &mut rng);

    // favourites are spread evenly over topics within each user group
    let favourites = |n: usize, rng: &mut ChaCha8Rng| {
        let mut f: Vec<usize> = (0..n).map(|i| i % cfg.topics).collect();
        f.shuffle(rng);
        f
    };
    let mut users: Vec<(String, usize, bool, bool)> = Vec::new();
    for (u, f) in favourites(cfg.overlap_users, &mut rng).into_iter().enumerate() {
        users.push((format!("u{u:03}"), f, true, true));
    }
    for (u, f) in favourites(cfg.single_domain_users, &mut rng).into_iter().enumerate() {
        users.push((format!("a{u:03}"), f, true, false));
    }
    for (u, f) in favourites(cfg.single_domain_users, &mut rng).into_iter().enumerate() {
        users.push((format!("b{u:03}"), f, false, true));
    }

    let mut embeddings = Vec::new();
    for d in [Domain::Source, Domain::Target] {
        for t in 0..cfg.topics {
            let centroid: Vec<f64> = (0..cfg.embed_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for j in 0..cfg.words_per_topic {
                let v = centroid.iter().map(|c| c + cfg.embed_noise * rng.gen_range(-1.0..1.0)).collect();
                embeddings.push((topic_word(d, t, j), v));
            }
        }
    }
    for j in 0..cfg.filler_vocab {
        embeddings.push((filler_word(j), (0..cfg.embed_dim).map(|_| rng.gen_range(-1.0..1.0)).collect()));
    }

    let mut source = Vec::new();
    let mut target = Vec::new();
    let mut favourite = BTreeMap::new();
    for (name, fav, in_s, in_t) in &users {
        favourite.insert(name.clone(), *fav);
        if *in_s {
            rate(cfg, &mut rng, name, Domain::Source, *fav, &src_topics, &mut source);
        }
        if *in_t {
            let fav_t = if *in_s { pairing[*fav] } else { *fav };
            rate(cfg, &mut rng, name, Domain::Target, fav_t, &tgt_topics, &mut target);
        }
    }
    Ok(SynthData {
        source,
        target,
        planted: Planted {
            pairing,
            favourite,
            item_topic,
        },
        embeddings,
    })
}

fn rate(cfg: &SynthConfig, rng: &mut ChaCha8Rng, user: &str, d: Domain, fav: usize, topics: &[usize], out: &mut Vec<Interaction>) {
    let mut items: Vec<usize> = (0..topics.len()).collect();
    items.shuffle(rng);
    items.truncate(cfg.ratings_per_user);
    items.sort_unstable();
    for i in items {
        let tp = topics[i];
        let align = if tp == fav { 1.0 } else { 0.0 };
        let noise = if cfg.noise > 0.0 { rng.gen_range(-cfg.noise..=cfg.noise) } else { 0.0 };
        let rating = (cfg.base + cfg.span * align + noise).clamp(1.0, 5.0);
        let mut words = Vec::new();
        for _ in 0..cfg.user_topic_words {
            words.push(topic_word(d, fav, rng.gen_range(0..cfg.words_per_topic)));
        }
        for _ in 0..cfg.item_topic_words {
            words.push(topic_word(d, tp, rng.gen_range(0..cfg.words_per_topic)));
        }
        for _ in 0..cfg.filler_words {
            words.push(filler_word(rng.gen_range(0..cfg.filler_vocab)));
        }
        words.shuffle(rng);
        out.push(Interaction::new(user, &item_id(d, i), rating, &words.join(" "), d));
    }
}

/// Writes `source.jsonl`, `target.jsonl`, `embeddings.txt` and
/// `planted.json` into `dir`.
pub fn write_synth(data: &SynthData, cfg: &SynthConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CatnError::io(dir, e))?;
    write_jsonl(&dir.join("source.jsonl"), &data.source)?;
    write_jsonl(&dir.join("target.jsonl"), &data.target)?;
    let mut vecs = String::new();
    for (w, v) in &data.embeddings {
        vecs.push_str(w);
        for x in v {
            let _ = write!(vecs, " {x:?}");
        }
        vecs.push('\n');
    }
    let e = dir.join("embeddings.txt");
    std::fs::write(&e, vecs).map_err(|err| CatnError::io(&e, err))?;
    let planted = serde_json::json!({ "config": cfg, "planted": data.planted });
    let p = dir.join("planted.json");
    std::fs::write(&p, serde_json::to_string_pretty(&planted)?).map_err(|e| CatnError::io(&p, e))
}

/// A run configuration sized for data written by `write_synth` into `dir`:
/// frozen planted word vectors and a small model.
pub fn desk_run_config(cfg: &SynthConfig, dir: &Path) -> RunConfig {
    let mut rc = RunConfig {
        source: dir.join("source.jsonl"),
        target: dir.join("target.jsonl"),
        out: dir.join("run"),
        pretrained: Some(dir.join("embeddings.txt")),
        seed: cfg.seed,
        ..RunConfig::default()
    };
    rc.corpus.doc_len = 96;
    rc.corpus.vocab_cap = 1000;
    rc.corpus.df_cap = 1.0;
    rc.hp = HyperParams {
        embed_dim: cfg.embed_dim,
        filters: 8,
        window: 3,
        aspect_dim: 8,
        aspects: cfg.topics,
        doc_len: 96,
        leaky_slope: 0.01,
        keep_prob: 1.0,
        train_embeddings: false,
    };
    rc.train.learning_rate = 0.01;
    rc.train.batch_size = 32;
    rc.train.l2 = 1e-4;
    rc.train.max_epochs = 300;
    rc.train.patience = 300;
    rc.sync_seeds();
    rc
}

/// How a trained model's aspects line up with the planted topics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    /// Topic each source aspect attends to most, relative to uniform attention.
    pub source_aspect_topic: Vec<usize>,
    pub target_aspect_topic: Vec<usize>,
    /// Column of the largest correlation in each row of `S`.
    pub row_argmax: Vec<usize>,
    /// Rows whose argmax column is an aspect of the paired target topic.
    pub matches: usize,
}

fn topic_of_word(word: &str, domain: Domain, topics: usize, words_per_topic: usize) -> Option<usize> {
    (0..topics).find(|&t| (0..words_per_topic).any(|j| topic_word(domain, t, j) == word))
}

/// Attention lift per (aspect, topic): attention mass on the topic's words
/// divided by the mass uniform attention would give them, summed over
/// documents.
fn attention_lift(model: &CatnModel, docs: &[Document], vocab: &Vocabulary, cfg: &SynthConfig) -> Result<Vec<Vec<f64>>> {
    let m = model.hp.aspects;
    let mut mass = vec![vec![0.0; cfg.topics]; m];
    let mut uniform = vec![0.0; cfg.topics];
    for doc in docs {
        let real = doc.real_tokens();
        if real == 0 {
            continue;
        }
        let topics: Vec<Option<usize>> = doc
            .token_ids
            .iter()
            .map(|&tok| vocab.word(tok).and_then(|w| topic_of_word(w, doc.domain, cfg.topics, cfg.words_per_topic)))
            .collect();
        for t in topics.iter().flatten() {
            uniform[*t] += 1.0 / real as f64;
        }
        let mut g = Graph::new();
        let mut b = Binder::new(model, false);
        let (_, betas) = b.extract_aspects(&mut g, doc, Flow::TargetFlow)?;
        for (a, &beta) in betas.iter().enumerate() {
            for (j, t) in topics.iter().enumerate() {
                if let Some(t) = t {
                    mass[a][*t] += g.value(beta).data()[j];
                }
            }
        }
    }
    Ok(mass
        .into_iter()
        .map(|row| row.iter().zip(&uniform).map(|(m, u)| if *u > 0.0 { m / u } else { 0.0 }).collect())
        .collect())
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |best, i| if v[i] > v[best] { i } else { best })
}

/// Maps each aspect to the topic it attends to most (source aspects over
/// source user documents, target aspects over target item documents) and
/// checks each row of the global correlation matrix against the planted
/// pairing.
pub fn planted_recovery(model: &CatnModel, index: &DocumentIndex, vocab: &Vocabulary, cfg: &SynthConfig, planted: &Planted) -> Result<Recovery> {
    let user_docs = index
        .users(Domain::Source)
        .iter()
        .map(|u| index.user_doc(Domain::Source, u, None))
        .collect::<Result<Vec<_>>>()?;
    let item_docs = index
        .items(Domain::Target)
        .iter()
        .map(|i| index.item_doc(Domain::Target, i, None))
        .collect::<Result<Vec<_>>>()?;
    let source_aspect_topic: Vec<usize> = attention_lift(model, &user_docs, vocab, cfg)?.iter().map(|r| argmax(r)).collect();
    let target_aspect_topic: Vec<usize> = attention_lift(model, &item_docs, vocab, cfg)?.iter().map(|r| argmax(r)).collect();
    let s = model.global_correlation();
    let (rows, _) = s.dims2();
    let row_argmax: Vec<usize> = (0..rows).map(|p| argmax(s.row(p))).collect();
    let matches = (0..rows)
        .filter(|&p| target_aspect_topic[row_argmax[p]] == planted.pairing[source_aspect_topic[p]])
        .count();
    Ok(Recovery {
        source_aspect_topic,
        target_aspect_topic,
        row_argmax,
        matches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;

    #[test]
    fn one_topic_without_noise_gives_constant_ratings() {
        let cfg = SynthConfig {
            topics: 1,
            ..SynthConfig::default()
        };
        let d = generate(&cfg).unwrap();
        assert!(d.source.iter().chain(&d.target).all(|r| r.rating == 5.0));
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let cfg = SynthConfig::default();
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = SynthConfig { seed: 8, ..cfg.clone() };
        assert_ne!(generate(&cfg).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn word_counts_match_counting_oracle() {
        let cfg = SynthConfig::default();
        let d = generate(&cfg).unwrap();
        let p = &d.planted;
        for (dom, recs) in [(Domain::Source, &d.source), (Domain::Target, &d.target)] {
            for r in recs {
                let fav = if dom == Domain::Target && r.user_id.starts_with('u') {
                    p.pairing[p.favourite[&r.user_id]]
                } else {
                    p.favourite[&r.user_id]
                };
                let tp = p.item_topic[&r.item_id];
                let toks = tokenize(&r.review_text);
                assert_eq!(toks.len(), cfg.user_topic_words + cfg.item_topic_words + cfg.filler_words);
                let count = |t: usize| toks.iter().filter(|w| (0..cfg.words_per_topic).any(|j| **w == topic_word(dom, t, j))).count();
                let filler = toks.iter().filter(|w| w.starts_with("common")).count();
                assert_eq!(filler, cfg.filler_words);
                let expected_fav = cfg.user_topic_words + if tp == fav { cfg.item_topic_words } else { 0 };
                assert_eq!(count(fav), expected_fav);
                if tp != fav {
                    assert_eq!(count(tp), cfg.item_topic_words);
                }
                let want = if tp == fav { 5.0 } else { 1.0 };
                assert_eq!(r.rating, want);
            }
        }
    }

    #[test]
    fn overlap_users_appear_in_both_domains() {
        let d = generate(&SynthConfig::default()).unwrap();
        let all: Vec<Interaction> = d.source.iter().chain(&d.target).cloned().collect();
        let overlap = crate::corpus::overlapping_users(&all);
        assert_eq!(overlap.len(), 20);
        assert!(overlap.iter().all(|u| u.starts_with('u')));
    }
}
