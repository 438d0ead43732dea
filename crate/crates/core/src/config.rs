//! Run configuration: flat `key = value` text, overridable key by key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xxhash_rust::xxh64::xxh64;

use crate::backbone::BackboneConfig;
use crate::dataio::{Align, ContextBudget, LengthRule, Template};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::genmap::Decoder;
use crate::knowledge::{KnowledgeConfig, Stage1Options};
use crate::numerics::Precision;
use crate::reasoning::{ReasoningConfig, Stage2Options};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub interactions: Option<PathBuf>,
    pub catalog: Option<PathBuf>,
    pub workdir: Option<PathBuf>,

    pub layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_context: usize,
    pub init_std: f64,

    pub theta: usize,
    pub d_e: usize,
    pub rho: usize,
    pub memory_rows: usize,
    pub history_rows: usize,

    pub min_len: usize,
    pub max_len: usize,
    pub min_freq: u64,
    pub template: Template,
    pub align: Align,
    pub item_tokens: usize,
    pub max_tokens: usize,

    pub stage1_epochs: usize,
    pub stage1_lr: f64,
    pub stage2_epochs: usize,
    pub stage2_lr: f64,
    pub batch: usize,

    pub k: Vec<usize>,
    /// Beam width; 0 means `max(k) + 5`.
    pub beam_width: usize,
    pub max_steps: usize,
    pub decoder: Decoder,

    pub seed: u64,
    pub precision: Precision,
    pub parallel: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let b = BackboneConfig::default();
        let s1 = Stage1Options::default();
        let s2 = Stage2Options::default();
        RunConfig {
            interactions: None,
            catalog: None,
            workdir: None,
            layers: b.layers,
            d_model: b.d_model,
            n_heads: b.n_heads,
            d_ff: b.d_ff,
            max_context: b.max_context,
            init_std: b.init_std,
            theta: KnowledgeConfig::default().theta,
            d_e: 0,
            rho: ReasoningConfig::default().rho,
            memory_rows: ReasoningConfig::default().memory_rows,
            history_rows: s2.history_rows,
            min_len: LengthRule::default().min,
            max_len: LengthRule::default().max,
            min_freq: 1,
            template: Template::Default,
            align: Align::Right,
            item_tokens: ContextBudget::default().item_tokens,
            max_tokens: ContextBudget::default().total_tokens,
            stage1_epochs: s1.epochs,
            stage1_lr: s1.lr,
            stage2_epochs: s2.epochs,
            stage2_lr: s2.lr,
            batch: s1.batch,
            k: vec![5, 10],
            beam_width: 0,
            max_steps: 34,
            decoder: Decoder::Beam,
            seed: 0,
            precision: Precision::F32,
            parallel: true,
        }
    }
}

/// Keys whose values shape the trained artifacts; the config hash covers
/// exactly these.
const ARTIFACT_KEYS: &[&str] = &[
    "layers",
    "d_model",
    "n_heads",
    "d_ff",
    "max_context",
    "init_std",
    "theta",
    "d_e",
    "rho",
    "memory_rows",
    "history_rows",
    "min_len",
    "max_len",
    "min_freq",
    "template",
    "align",
    "item_tokens",
    "max_tokens",
    "stage1_epochs",
    "stage1_lr",
    "stage2_epochs",
    "stage2_lr",
    "batch",
    "seed",
    "precision",
];

const OTHER_KEYS: &[&str] = &[
    "interactions",
    "catalog",
    "workdir",
    "k",
    "beam_width",
    "max_steps",
    "decoder",
    "parallel",
];

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl RunConfig {
    pub fn keys() -> impl Iterator<Item = &'static str> {
        ARTIFACT_KEYS.iter().chain(OTHER_KEYS).copied()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let path = || (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "interactions" => self.interactions = path(),
            "catalog" => self.catalog = path(),
            "workdir" => self.workdir = path(),
            "layers" => self.layers = parse(key, v)?,
            "d_model" => self.d_model = parse(key, v)?,
            "n_heads" => self.n_heads = parse(key, v)?,
            "d_ff" => self.d_ff = parse(key, v)?,
            "max_context" => self.max_context = parse(key, v)?,
            "init_std" => self.init_std = parse(key, v)?,
            "theta" => self.theta = parse(key, v)?,
            "d_e" => self.d_e = parse(key, v)?,
            "rho" => self.rho = parse(key, v)?,
            "memory_rows" => self.memory_rows = parse(key, v)?,
            "history_rows" => self.history_rows = parse(key, v)?,
            "min_len" => self.min_len = parse(key, v)?,
            "max_len" => self.max_len = parse(key, v)?,
            "min_freq" => self.min_freq = parse(key, v)?,
            "template" => self.template = v.parse().map_err(Error::Config)?,
            "align" => self.align = v.parse().map_err(Error::Config)?,
            "item_tokens" => self.item_tokens = parse(key, v)?,
            "max_tokens" => self.max_tokens = parse(key, v)?,
            "stage1_epochs" => self.stage1_epochs = parse(key, v)?,
            "stage1_lr" => self.stage1_lr = parse(key, v)?,
            "stage2_epochs" => self.stage2_epochs = parse(key, v)?,
            "stage2_lr" => self.stage2_lr = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "k" => {
                self.k = v
                    .split(',')
                    .map(|x| parse(key, x))
                    .collect::<Result<Vec<usize>>>()?
            }
            "beam_width" => self.beam_width = parse(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "decoder" => {
                self.decoder = match v {
                    "beam" => Decoder::Beam,
                    "greedy" => Decoder::Greedy,
                    _ => return Err(Error::Config(format!("unknown decoder {v:?}"))),
                }
            }
            "seed" => self.seed = parse(key, v)?,
            "precision" => self.precision = v.parse().map_err(Error::Config)?,
            "parallel" => self.parallel = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let p = |x: &Option<PathBuf>| x.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        Some(match key {
            "interactions" => p(&self.interactions),
            "catalog" => p(&self.catalog),
            "workdir" => p(&self.workdir),
            "layers" => self.layers.to_string(),
            "d_model" => self.d_model.to_string(),
            "n_heads" => self.n_heads.to_string(),
            "d_ff" => self.d_ff.to_string(),
            "max_context" => self.max_context.to_string(),
            "init_std" => self.init_std.to_string(),
            "theta" => self.theta.to_string(),
            "d_e" => self.d_e.to_string(),
            "rho" => self.rho.to_string(),
            "memory_rows" => self.memory_rows.to_string(),
            "history_rows" => self.history_rows.to_string(),
            "min_len" => self.min_len.to_string(),
            "max_len" => self.max_len.to_string(),
            "min_freq" => self.min_freq.to_string(),
            "template" => match self.template {
                Template::Default => "default".into(),
                Template::Bare => "bare".into(),
            },
            "align" => match self.align {
                Align::Left => "left".into(),
                Align::Right => "right".into(),
            },
            "item_tokens" => self.item_tokens.to_string(),
            "max_tokens" => self.max_tokens.to_string(),
            "stage1_epochs" => self.stage1_epochs.to_string(),
            "stage1_lr" => self.stage1_lr.to_string(),
            "stage2_epochs" => self.stage2_epochs.to_string(),
            "stage2_lr" => self.stage2_lr.to_string(),
            "batch" => self.batch.to_string(),
            "k" => self.k.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            "beam_width" => self.beam_width.to_string(),
            "max_steps" => self.max_steps.to_string(),
            "decoder" => match self.decoder {
                Decoder::Beam => "beam".into(),
                Decoder::Greedy => "greedy".into(),
            },
            "seed" => self.seed.to_string(),
            "precision" => self.precision.as_str().into(),
            "parallel" => self.parallel.to_string(),
            _ => return None,
        })
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{}:{}: expected key = value", path.display(), i + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        Self::keys()
            .map(|k| format!("{k} = {}\n", self.get(k).unwrap_or_default()))
            .collect()
    }

    /// Hash over the artifact-shaping keys, as 16 hex digits.
    pub fn hash(&self) -> String {
        let canonical: String = ARTIFACT_KEYS
            .iter()
            .map(|k| format!("{k}={}\n", self.get(k).unwrap_or_default()))
            .collect();
        format!("{:016x}", xxh64(canonical.as_bytes(), 0))
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone(crate::textproc::SPECIAL_TOKENS.len() + 1).validate()?;
        self.knowledge().validate()?;
        self.reasoning().validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.min_len < 3 || self.min_len > self.max_len {
            return bad("need 3 <= min_len <= max_len");
        }
        if self.batch == 0 {
            return bad("batch must be at least 1");
        }
        if self.k.is_empty() || self.k.contains(&0) {
            return bad("k must list positive cutoffs");
        }
        if self.item_tokens == 0 || self.max_steps == 0 || self.history_rows == 0 {
            return bad("item_tokens, max_steps and history_rows must be positive");
        }
        if !(self.stage1_lr >= 0.0 && self.stage2_lr >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        if self.rho + self.item_tokens + 1 >= self.max_context {
            return bad("max_context leaves no room for a context");
        }
        Ok(())
    }

    pub fn backbone(&self, vocab_size: usize) -> BackboneConfig {
        BackboneConfig {
            layers: self.layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_context: self.max_context,
            vocab_size,
            init_std: self.init_std,
        }
    }

    pub fn knowledge(&self) -> KnowledgeConfig {
        KnowledgeConfig {
            theta: self.theta,
            d_e: self.d_e,
        }
    }

    pub fn reasoning(&self) -> ReasoningConfig {
        ReasoningConfig {
            rho: self.rho,
            memory_rows: self.memory_rows,
        }
    }

    pub fn length_rule(&self) -> LengthRule {
        LengthRule {
            min: self.min_len,
            max: self.max_len,
        }
    }

    pub fn stage1(&self) -> Stage1Options {
        Stage1Options {
            epochs: self.stage1_epochs,
            lr: self.stage1_lr,
            batch: self.batch,
            max_tokens: self.max_tokens,
        }
    }

    pub fn stage2(&self) -> Stage2Options {
        Stage2Options {
            epochs: self.stage2_epochs,
            lr: self.stage2_lr,
            batch: self.batch,
            template: self.template,
            budget: ContextBudget {
                item_tokens: self.item_tokens,
                total_tokens: self.max_tokens,
            },
            history_rows: self.history_rows,
            align: self.align,
        }
    }

    pub fn max_k(&self) -> usize {
        self.k.iter().copied().max().unwrap_or(10)
    }

    pub fn exec(&self) -> Exec {
        if self.parallel {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("theta", "4").unwrap();
        c.set("k", "1,3").unwrap();
        c.set("workdir", "/tmp/x").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text(), Path::new("c")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn hash_tracks_artifact_keys_only() {
        let base = RunConfig::default();
        let mut c = base.clone();
        c.set("beam_width", "12").unwrap();
        c.set("workdir", "/elsewhere").unwrap();
        assert_eq!(c.hash(), base.hash());
        c.set("seed", "9").unwrap();
        assert_ne!(c.hash(), base.hash());
    }

    #[test]
    fn rejects_bad_input() {
        let mut c = RunConfig::default();
        assert!(c.set("nope", "1").is_err());
        assert!(c.set("layers", "many").is_err());
        assert!(c.apply_text("layers 4\n", Path::new("c")).is_err());
        c.set("n_heads", "3").unwrap();
        assert!(c.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }
}
