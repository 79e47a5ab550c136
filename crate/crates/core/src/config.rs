//! Run configuration as a `key = value` text file.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are an
//! error so typos do not silently fall back to defaults.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::corpus::CorpusConfig;
use crate::error::{CatnError, Result};
use crate::model::HyperParams;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub source: PathBuf,
    pub target: PathBuf,
    pub out: PathBuf,
    /// word2vec-style text file: `word v_1 … v_d` per line.
    pub pretrained: Option<PathBuf>,
    pub min_user_interactions: usize,
    pub min_item_interactions: usize,
    pub eta: f64,
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub hp: HyperParams,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            source: PathBuf::from("source.jsonl"),
            target: PathBuf::from("target.jsonl"),
            out: PathBuf::from("run"),
            pretrained: None,
            min_user_interactions: 0,
            min_item_interactions: 0,
            eta: 1.0,
            seed: 42,
            corpus: CorpusConfig::default(),
            hp: HyperParams::default(),
            train: TrainConfig::default(),
        }
    }
}

fn parse_value<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("invalid value `{v}`: {e}"))
}

impl RunConfig {
    /// Applies one setting. Keys match the names written by `to_text`.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        match key.trim() {
            "source" => self.source = PathBuf::from(v),
            "target" => self.target = PathBuf::from(v),
            "out" => self.out = PathBuf::from(v),
            "pretrained" => self.pretrained = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "min_user_interactions" => self.min_user_interactions = parse_value(v)?,
            "min_item_interactions" => self.min_item_interactions = parse_value(v)?,
            "eta" => self.eta = parse_value(v)?,
            "seed" => self.seed = parse_value(v)?,
            "doc_len" => {
                self.corpus.doc_len = parse_value(v)?;
                self.hp.doc_len = self.corpus.doc_len;
            }
            "vocab_cap" => self.corpus.vocab_cap = parse_value(v)?,
            "df_cap" => self.corpus.df_cap = parse_value(v)?,
            "stopwords" => self.corpus.stopwords = v.split(',').map(|s| s.trim().to_lowercase()).filter(|s| !s.is_empty()).collect(),
            "embed_dim" => self.hp.embed_dim = parse_value(v)?,
            "filters" => self.hp.filters = parse_value(v)?,
            "window" => self.hp.window = parse_value(v)?,
            "latent" => self.hp.aspect_dim = parse_value(v)?,
            "aspects" => self.hp.aspects = parse_value(v)?,
            "leaky_slope" => self.hp.leaky_slope = parse_value(v)?,
            "keep_prob" => self.hp.keep_prob = parse_value(v)?,
            "train_embeddings" => self.hp.train_embeddings = parse_value(v)?,
            "learning_rate" => self.train.learning_rate = parse_value(v)?,
            "batch_size" => self.train.batch_size = parse_value(v)?,
            "l2" => self.train.l2 = parse_value(v)?,
            "max_epochs" => self.train.max_epochs = parse_value(v)?,
            "patience" => self.train.patience = parse_value(v)?,
            "variant" => self.train.variant = v.parse().map_err(|e: CatnError| e.to_string())?,
            "beta1" => self.train.beta1 = parse_value(v)?,
            "beta2" => self.train.beta2 = parse_value(v)?,
            "epsilon" => self.train.epsilon = parse_value(v)?,
            "execution" => {
                self.train.execution = match v {
                    "parallel" => crate::parallel::Execution::Parallel,
                    "sequential" => crate::parallel::Execution::Sequential,
                    _ => return Err(format!("execution must be parallel or sequential, got `{v}`")),
                }
            }
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| CatnError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected `key = value`".into()))?;
            cfg.set(k, v).map_err(err)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CatnError::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Seeds every stage from the run seed.
    pub fn sync_seeds(&mut self) {
        self.corpus.seed = self.seed;
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.hp.validate()?;
        self.train.validate()?;
        if self.corpus.doc_len != self.hp.doc_len {
            return Err(CatnError::Config("corpus and model document lengths differ".into()));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(CatnError::Config(format!("eta must be in (0, 1], got {}", self.eta)));
        }
        Ok(())
    }

    /// Full configuration, every key written, parseable by `parse`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("source", self.source.display().to_string());
        kv("target", self.target.display().to_string());
        kv("out", self.out.display().to_string());
        kv("pretrained", self.pretrained.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        kv("min_user_interactions", self.min_user_interactions.to_string());
        kv("min_item_interactions", self.min_item_interactions.to_string());
        kv("eta", format!("{:?}", self.eta));
        kv("seed", self.seed.to_string());
        kv("doc_len", self.corpus.doc_len.to_string());
        kv("vocab_cap", self.corpus.vocab_cap.to_string());
        kv("df_cap", format!("{:?}", self.corpus.df_cap));
        kv("stopwords", self.corpus.stopwords.iter().cloned().collect::<Vec<_>>().join(","));
        kv("embed_dim", self.hp.embed_dim.to_string());
        kv("filters", self.hp.filters.to_string());
        kv("window", self.hp.window.to_string());
        kv("latent", self.hp.aspect_dim.to_string());
        kv("aspects", self.hp.aspects.to_string());
        kv("leaky_slope", format!("{:?}", self.hp.leaky_slope));
        kv("keep_prob", format!("{:?}", self.hp.keep_prob));
        kv("train_embeddings", self.hp.train_embeddings.to_string());
        kv("learning_rate", format!("{:?}", self.train.learning_rate));
        kv("batch_size", self.train.batch_size.to_string());
        kv("l2", format!("{:?}", self.train.l2));
        kv("max_epochs", self.train.max_epochs.to_string());
        kv("patience", self.train.patience.to_string());
        kv("variant", self.train.variant.to_string());
        kv("beta1", format!("{:?}", self.train.beta1));
        kv("beta2", format!("{:?}", self.train.beta2));
        kv("epsilon", format!("{:?}", self.train.epsilon));
        let exec = match self.train.execution {
            crate::parallel::Execution::Parallel => "parallel",
            crate::parallel::Execution::Sequential => "sequential",
        };
        kv("execution", exec.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("latent", "16").unwrap();
        c.set("variant", "attn").unwrap();
        c.set("eta", "0.05").unwrap();
        c.set("stopwords", "the, a").unwrap();
        let back = RunConfig::parse(&c.to_text(), Path::new("x")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = RunConfig::parse("# ok\nseed = 1\nbogus = 2\n", Path::new("cfg")).unwrap_err();
        assert!(matches!(e, CatnError::Parse { line: 3, .. }), "{e}");
        let e = RunConfig::parse("variant = wide\n", Path::new("cfg")).unwrap_err();
        assert!(e.to_string().contains("wide"));
        assert!(RunConfig::parse("seed 1\n", Path::new("cfg")).is_err());
    }

    #[test]
    fn defaults_validate() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.train.learning_rate, 0.001);
        assert_eq!(c.train.batch_size, 256);
        assert_eq!(c.hp.window, 3);
    }
}
