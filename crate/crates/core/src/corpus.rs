//! Review preprocessing: filtering, vocabulary construction and fixed-length
//! user, item and auxiliary documents.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CatnError, Result};

pub const PAD: u32 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    pub fn other(self) -> Domain {
        match self {
            Domain::Source => Domain::Target,
            Domain::Target => Domain::Source,
        }
    }

    fn code(self) -> u8 {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }

    fn from_code(b: u8) -> Option<Self> {
        match b {
            0 => Some(Domain::Source),
            1 => Some(Domain::Target),
            _ => None,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = CatnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(CatnError::InvalidArgument(format!("unknown domain `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub rating: f64,
    pub review_text: String,
    #[serde(skip, default = "default_domain")]
    pub domain: Domain,
}

fn default_domain() -> Domain {
    Domain::Source
}

impl Interaction {
    pub fn new(user: &str, item: &str, rating: f64, text: &str, domain: Domain) -> Self {
        Interaction {
            user_id: user.to_string(),
            item_id: item.to_string(),
            rating,
            review_text: text.to_string(),
            domain,
        }
    }
}

/// Reads one JSON object per line. Blank lines are skipped.
pub fn read_jsonl(path: &Path, domain: Domain) -> Result<Vec<Interaction>> {
    let file = File::open(path).map_err(|e| CatnError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CatnError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| CatnError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let mut rec: Interaction = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if !(1.0..=5.0).contains(&rec.rating) {
            return Err(parse_err(format!("rating {} outside [1, 5]", rec.rating)));
        }
        rec.domain = domain;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, records: &[Interaction]) -> Result<()> {
    let file = File::create(path).map_err(|e| CatnError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| CatnError::io(path, e))?;
    }
    w.flush().map_err(|e| CatnError::io(path, e))
}

/// Drops records whose review has no alphanumeric content.
pub fn drop_empty_reviews(raw: Vec<Interaction>) -> Vec<Interaction> {
    raw.into_iter()
        .filter(|r| r.review_text.chars().any(char::is_alphanumeric))
        .collect()
}

/// Repeatedly removes users with fewer than `min_user` and items with fewer
/// than `min_item` interactions until both thresholds hold. Counts are kept
/// per domain. Record order is preserved.
pub fn filter_interactions(raw: &[Interaction], min_user: usize, min_item: usize) -> Vec<Interaction> {
    let mut keep = vec![true; raw.len()];
    loop {
        let mut users: HashMap<(Domain, &str), usize> = HashMap::new();
        let mut items: HashMap<(Domain, &str), usize> = HashMap::new();
        for (r, _) in raw.iter().zip(&keep).filter(|(_, k)| **k) {
            *users.entry((r.domain, &r.user_id)).or_default() += 1;
            *items.entry((r.domain, &r.item_id)).or_default() += 1;
        }
        let mut changed = false;
        for (r, k) in raw.iter().zip(keep.iter_mut()) {
            if *k && (users[&(r.domain, r.user_id.as_str())] < min_user || items[&(r.domain, r.item_id.as_str())] < min_item) {
                *k = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let out: Vec<Interaction> = raw.iter().zip(&keep).filter(|(_, k)| **k).map(|(r, _)| r.clone()).collect();
    if out.is_empty() && !raw.is_empty() {
        log::warn!("filtering with min_user={min_user}, min_item={min_item} removed every interaction");
    }
    out
}

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub const DEFAULT_STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "against", "all", "am", "an", "and", "any", "are", "as", "at", "be",
    "because", "been", "before", "being", "below", "between", "both", "but", "by", "can", "could", "did", "do",
    "does", "doing", "down", "during", "each", "few", "for", "from", "further", "had", "has", "have", "having", "he",
    "her", "here", "hers", "herself", "him", "himself", "his", "how", "i", "if", "in", "into", "is", "it", "its",
    "itself", "just", "me", "more", "most", "my", "myself", "no", "nor", "not", "now", "of", "off", "on", "once",
    "only", "or", "other", "our", "ours", "ourselves", "out", "over", "own", "same", "she", "should", "so", "some",
    "such", "than", "that", "the", "their", "theirs", "them", "themselves", "then", "there", "these", "they",
    "this", "those", "through", "to", "too", "under", "until", "up", "very", "was", "we", "were", "what", "when",
    "where", "which", "while", "who", "whom", "why", "will", "with", "would", "you", "your", "yours", "yourself",
    "yourselves",
];

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    /// Document length in tokens.
    pub doc_len: usize,
    pub vocab_cap: usize,
    /// Words whose relative document frequency exceeds this are dropped.
    pub df_cap: f64,
    pub stopwords: BTreeSet<String>,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            doc_len: 500,
            vocab_cap: 20_000,
            df_cap: 0.5,
            stopwords: DEFAULT_STOPWORDS.iter().map(|s| s.to_string()).collect(),
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.doc_len == 0 {
            return Err(CatnError::Config("document length must be positive".into()));
        }
        if !(self.df_cap > 0.0 && self.df_cap <= 1.0) {
            return Err(CatnError::Config(format!("df_cap must be in (0, 1], got {}", self.df_cap)));
        }
        if self.vocab_cap == 0 {
            return Err(CatnError::Config("vocab_cap must be positive".into()));
        }
        Ok(())
    }
}

/// Word list with dense ids `1..=len`; id 0 is padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    scores: Vec<f64>,
    token_to_id: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_entries(entries: Vec<(String, f64)>) -> Self {
        let token_to_id = entries
            .iter()
            .enumerate()
            .map(|(i, (w, _))| (w.clone(), i as u32 + 1))
            .collect();
        let (words, scores) = entries.into_iter().unzip();
        Vocabulary {
            words,
            scores,
            token_to_id,
        }
    }

    /// Number of real words (excludes padding).
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.token_to_id.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        if id == PAD {
            return None;
        }
        self.words.get(id as usize - 1).map(String::as_str)
    }

    pub fn score(&self, id: u32) -> Option<f64> {
        if id == PAD {
            return None;
        }
        self.scores.get(id as usize - 1).copied()
    }

    /// In-vocabulary token ids of `text`, in order.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .filter_map(|t| self.id(&t.to_lowercase()))
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (i, (w, sc)) in self.words.iter().zip(&self.scores).enumerate() {
            s.push_str(&format!("{w}\t{}\t{sc:?}\n", i + 1));
        }
        s
    }

    pub fn from_tsv(text: &str, path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let err = |msg: &str| CatnError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: msg.to_string(),
            };
            let mut parts = line.split('\t');
            let (Some(w), Some(id), Some(sc), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
                return Err(err("expected word<TAB>id<TAB>score"));
            };
            let id: usize = id.parse().map_err(|_| err("bad id"))?;
            if id != i + 1 {
                return Err(err("ids must be dense and sorted starting at 1"));
            }
            let sc: f64 = sc.parse().map_err(|_| err("bad score"))?;
            entries.push((w.to_string(), sc));
        }
        Ok(Vocabulary::from_entries(entries))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| CatnError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CatnError::io(path, e))?;
        Self::from_tsv(&text, path)
    }
}

/// Each review is one document for document frequency. Score is the total
/// corpus term count times `ln(N / df)`.
pub fn build_vocabulary(corpus: &[Interaction], cfg: &CorpusConfig) -> Vocabulary {
    let mut tf: HashMap<String, u64> = HashMap::new();
    let mut df: HashMap<String, u64> = HashMap::new();
    for r in corpus {
        let toks = tokenize(&r.review_text);
        let mut seen = HashSet::new();
        for t in toks {
            if cfg.stopwords.contains(&t) {
                continue;
            }
            if seen.insert(t.clone()) {
                *df.entry(t.clone()).or_default() += 1;
            }
            *tf.entry(t).or_default() += 1;
        }
    }
    let n_docs = corpus.len() as f64;
    let mut scored: Vec<(String, f64)> = tf
        .into_iter()
        .filter_map(|(w, count)| {
            let d = df[&w] as f64;
            if d / n_docs > cfg.df_cap {
                return None;
            }
            Some((w, count as f64 * (n_docs / d).ln()))
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(cfg.vocab_cap);
    Vocabulary::from_entries(scored)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocKind {
    User,
    Item,
    UserAux,
}

impl DocKind {
    fn code(self) -> u8 {
        match self {
            DocKind::User => 0,
            DocKind::Item => 1,
            DocKind::UserAux => 2,
        }
    }

    fn from_code(b: u8) -> Option<Self> {
        match b {
            0 => Some(DocKind::User),
            1 => Some(DocKind::Item),
            2 => Some(DocKind::UserAux),
            _ => None,
        }
    }
}

/// Fixed-length token sequence. Real tokens are left aligned; the tail is
/// padding with mask 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub token_ids: Vec<u32>,
    pub mask: Vec<u8>,
    pub owner: String,
    pub kind: DocKind,
    pub domain: Domain,
}

impl Document {
    pub fn from_tokens(tokens: impl IntoIterator<Item = u32>, len: usize, owner: &str, kind: DocKind, domain: Domain) -> Self {
        let mut token_ids: Vec<u32> = tokens.into_iter().take(len).collect();
        let real = token_ids.len();
        token_ids.resize(len, PAD);
        let mut mask = vec![1u8; real];
        mask.resize(len, 0);
        Document {
            token_ids,
            mask,
            owner: owner.to_string(),
            kind,
            domain,
        }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn real_tokens(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn is_all_pad(&self) -> bool {
        self.mask.iter().all(|&m| m == 0)
    }

    /// Left-aligned mask and PAD ids exactly where the mask is 0.
    pub fn is_well_formed(&self) -> bool {
        let real = self.real_tokens();
        self.token_ids.len() == self.mask.len()
            && self.mask.iter().all(|&m| m <= 1)
            && self.mask[..real].iter().all(|&m| m == 1)
            && self.token_ids.iter().zip(&self.mask).all(|(&t, &m)| (t == PAD) == (m == 0))
    }
}

fn docs_in_order<'a>(records: impl Iterator<Item = (usize, &'a Interaction)>, by_item: bool) -> Vec<usize> {
    let mut idx: Vec<(&str, usize)> = records
        .map(|(i, r)| (if by_item { r.item_id.as_str() } else { r.user_id.as_str() }, i))
        .collect();
    idx.sort();
    idx.into_iter().map(|(_, i)| i).collect()
}

/// All reviews `u` wrote in `domain`, ordered by item id then record order.
pub fn build_user_document(u: &str, domain: Domain, interactions: &[Interaction], vocab: &Vocabulary, cfg: &CorpusConfig) -> Result<Document> {
    let order = docs_in_order(
        interactions.iter().enumerate().filter(|(_, r)| r.domain == domain && r.user_id == u),
        true,
    );
    if order.is_empty() {
        return Err(CatnError::UnknownUser(u.to_string()));
    }
    let tokens = order.iter().flat_map(|&i| vocab.encode(&interactions[i].review_text));
    Ok(Document::from_tokens(tokens, cfg.doc_len, u, DocKind::User, domain))
}

/// All reviews item `i` received in `domain`, ordered by user id then record order.
pub fn build_item_document(i: &str, domain: Domain, interactions: &[Interaction], vocab: &Vocabulary, cfg: &CorpusConfig) -> Result<Document> {
    let order = docs_in_order(
        interactions.iter().enumerate().filter(|(_, r)| r.domain == domain && r.item_id == i),
        false,
    );
    if order.is_empty() {
        return Err(CatnError::UnknownItem(i.to_string()));
    }
    let tokens = order.iter().flat_map(|&k| vocab.encode(&interactions[k].review_text));
    Ok(Document::from_tokens(tokens, cfg.doc_len, i, DocKind::Item, domain))
}

/// 64-bit FNV-1a, used to derive stable per-owner RNG streams.
pub(crate) fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in parts {
        for &b in *p {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// RNG used to pick auxiliary reviews for one user in one domain.
pub fn aux_rng(seed: u64, u: &str, domain: Domain) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&[u.as_bytes(), domain.as_str().as_bytes()]))
}

/// For each of `u`'s interactions in `domain` (document order), picks one
/// review of the same item with the same rating by a non-overlapping user.
pub fn build_auxiliary_document(
    u: &str,
    domain: Domain,
    interactions: &[Interaction],
    overlap: &HashSet<String>,
    vocab: &Vocabulary,
    cfg: &CorpusConfig,
    seed: u64,
) -> Result<Document> {
    let order = docs_in_order(
        interactions.iter().enumerate().filter(|(_, r)| r.domain == domain && r.user_id == u),
        true,
    );
    if order.is_empty() {
        return Err(CatnError::UnknownUser(u.to_string()));
    }
    let mut rng = aux_rng(seed, u, domain);
    let mut tokens = Vec::new();
    for &k in &order {
        let own = &interactions[k];
        let candidates: Vec<usize> = interactions
            .iter()
            .enumerate()
            .filter(|(_, r)| {
                r.domain == domain
                    && r.item_id == own.item_id
                    && r.rating == own.rating
                    && r.user_id != u
                    && !overlap.contains(&r.user_id)
            })
            .map(|(i, _)| i)
            .collect();
        if candidates.is_empty() {
            continue;
        }
        let pick = candidates[rng.gen_range(0..candidates.len())];
        tokens.extend(vocab.encode(&interactions[pick].review_text));
        if tokens.len() >= cfg.doc_len {
            break;
        }
    }
    Ok(Document::from_tokens(tokens, cfg.doc_len, u, DocKind::UserAux, domain))
}

/// Indexed, pre-tokenized view of a corpus used to assemble documents
/// quickly during training. Produces the same documents as the
/// `build_*_document` functions over the same records.
#[derive(Clone, Debug)]
pub struct DocumentIndex {
    records: Vec<Interaction>,
    tokens: Vec<Vec<u32>>,
    by_user: HashMap<(Domain, String), Vec<usize>>,
    by_item: HashMap<(Domain, String), Vec<usize>>,
    overlap: HashSet<String>,
    doc_len: usize,
    seed: u64,
}

impl DocumentIndex {
    pub fn new(records: Vec<Interaction>, vocab: &Vocabulary, overlap: HashSet<String>, doc_len: usize, seed: u64) -> Self {
        let tokens = records.iter().map(|r| vocab.encode(&r.review_text)).collect();
        let mut by_user: HashMap<(Domain, String), Vec<(String, usize)>> = HashMap::new();
        let mut by_item: HashMap<(Domain, String), Vec<(String, usize)>> = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            by_user.entry((r.domain, r.user_id.clone())).or_default().push((r.item_id.clone(), i));
            by_item.entry((r.domain, r.item_id.clone())).or_default().push((r.user_id.clone(), i));
        }
        let finish = |m: HashMap<(Domain, String), Vec<(String, usize)>>| {
            m.into_iter()
                .map(|(k, mut v)| {
                    v.sort();
                    (k, v.into_iter().map(|(_, i)| i).collect())
                })
                .collect()
        };
        DocumentIndex {
            records,
            tokens,
            by_user: finish(by_user),
            by_item: finish(by_item),
            overlap,
            doc_len,
            seed,
        }
    }

    pub fn doc_len(&self) -> usize {
        self.doc_len
    }

    pub fn records(&self) -> &[Interaction] {
        &self.records
    }

    pub fn has_user(&self, domain: Domain, u: &str) -> bool {
        self.by_user.contains_key(&(domain, u.to_string()))
    }

    pub fn has_item(&self, domain: Domain, i: &str) -> bool {
        self.by_item.contains_key(&(domain, i.to_string()))
    }

    /// Ids of all users with at least one record in `domain`, sorted.
    pub fn users(&self, domain: Domain) -> Vec<String> {
        let mut v: Vec<String> = self.by_user.keys().filter(|(d, _)| *d == domain).map(|(_, u)| u.clone()).collect();
        v.sort();
        v
    }

    pub fn items(&self, domain: Domain) -> Vec<String> {
        let mut v: Vec<String> = self.by_item.keys().filter(|(d, _)| *d == domain).map(|(_, i)| i.clone()).collect();
        v.sort();
        v
    }

    /// User document, leaving out the review written for `exclude_item`.
    pub fn user_doc(&self, domain: Domain, u: &str, exclude_item: Option<&str>) -> Result<Document> {
        let list = self
            .by_user
            .get(&(domain, u.to_string()))
            .ok_or_else(|| CatnError::MissingDocument(format!("user `{u}` in {domain}")))?;
        let tokens = list
            .iter()
            .filter(|&&i| Some(self.records[i].item_id.as_str()) != exclude_item)
            .flat_map(|&i| self.tokens[i].iter().copied());
        Ok(Document::from_tokens(tokens, self.doc_len, u, DocKind::User, domain))
    }

    /// Item document, leaving out the review written by `exclude_user`.
    pub fn item_doc(&self, domain: Domain, item: &str, exclude_user: Option<&str>) -> Result<Document> {
        let list = self
            .by_item
            .get(&(domain, item.to_string()))
            .ok_or_else(|| CatnError::MissingDocument(format!("item `{item}` in {domain}")))?;
        let tokens = list
            .iter()
            .filter(|&&i| Some(self.records[i].user_id.as_str()) != exclude_user)
            .flat_map(|&i| self.tokens[i].iter().copied());
        Ok(Document::from_tokens(tokens, self.doc_len, item, DocKind::Item, domain))
    }

    pub fn aux_doc(&self, domain: Domain, u: &str) -> Result<Document> {
        let list = self
            .by_user
            .get(&(domain, u.to_string()))
            .ok_or_else(|| CatnError::MissingDocument(format!("user `{u}` in {domain}")))?;
        let mut rng = aux_rng(self.seed, u, domain);
        let mut tokens: Vec<u32> = Vec::new();
        for &k in list {
            let own = &self.records[k];
            let candidates: Vec<usize> = self.by_item[&(domain, own.item_id.clone())]
                .iter()
                .copied()
                .filter(|&i| {
                    let r = &self.records[i];
                    r.rating == own.rating && r.user_id != u && !self.overlap.contains(&r.user_id)
                })
                .collect();
            if candidates.is_empty() {
                continue;
            }
            // by_item is sorted by user id; candidate order must follow record order
            let mut candidates = candidates;
            candidates.sort_unstable();
            let pick = candidates[rng.gen_range(0..candidates.len())];
            tokens.extend_from_slice(&self.tokens[pick]);
            if tokens.len() >= self.doc_len {
                break;
            }
        }
        Ok(Document::from_tokens(tokens, self.doc_len, u, DocKind::UserAux, domain))
    }
}

/// Binary document file:
/// `count: u64 | doc_len: u64 | per doc: owner_len u32, owner UTF-8, kind u8,
/// domain u8, doc_len × u32 token ids, doc_len × u8 mask`. Little-endian.
pub fn write_documents(path: &Path, docs: &[Document]) -> Result<()> {
    let l = docs.first().map_or(0, Document::len);
    let mut out = Vec::new();
    out.extend_from_slice(&(docs.len() as u64).to_le_bytes());
    out.extend_from_slice(&(l as u64).to_le_bytes());
    for d in docs {
        if d.len() != l {
            return Err(CatnError::InvalidArgument("documents must share one length".into()));
        }
        out.extend_from_slice(&(d.owner.len() as u32).to_le_bytes());
        out.extend_from_slice(d.owner.as_bytes());
        out.push(d.kind.code());
        out.push(d.domain.code());
        for t in &d.token_ids {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out.extend_from_slice(&d.mask);
    }
    std::fs::write(path, out).map_err(|e| CatnError::io(path, e))
}

pub fn read_documents(path: &Path) -> Result<Vec<Document>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| CatnError::io(path, e))?;
    let bad = |msg: &str| CatnError::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: msg.to_string(),
    };
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated document file"))?;
        pos += n;
        Ok(s)
    };
    let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let l = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let mut docs = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let owner = String::from_utf8(take(n)?.to_vec()).map_err(|_| bad("owner id is not UTF-8"))?;
        let kind = DocKind::from_code(take(1)?[0]).ok_or_else(|| bad("bad kind byte"))?;
        let domain = Domain::from_code(take(1)?[0]).ok_or_else(|| bad("bad domain byte"))?;
        let token_ids = take(4 * l)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mask = take(l)?.to_vec();
        docs.push(Document {
            token_ids,
            mask,
            owner,
            kind,
            domain,
        });
    }
    Ok(docs)
}

/// Every user and item document of both domains, users first, ids ascending.
pub fn build_all_documents(interactions: &[Interaction], vocab: &Vocabulary, cfg: &CorpusConfig) -> Vec<Document> {
    let index = DocumentIndex::new(interactions.to_vec(), vocab, HashSet::new(), cfg.doc_len, cfg.seed);
    let mut docs = Vec::new();
    for domain in [Domain::Source, Domain::Target] {
        for u in index.users(domain) {
            docs.push(index.user_doc(domain, &u, None).expect("indexed user"));
        }
        for i in index.items(domain) {
            docs.push(index.item_doc(domain, &i, None).expect("indexed item"));
        }
    }
    docs
}

/// Users present in both domains.
pub fn overlapping_users(interactions: &[Interaction]) -> BTreeSet<String> {
    let mut seen: BTreeMap<&str, [bool; 2]> = BTreeMap::new();
    for r in interactions {
        seen.entry(&r.user_id).or_default()[r.domain.code() as usize] = true;
    }
    seen.into_iter().filter(|(_, d)| d[0] && d[1]).map(|(u, _)| u.to_string()).collect()
}
