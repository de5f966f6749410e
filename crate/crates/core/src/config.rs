//! Plain-text `key = value` configuration: the shared grammar, and the run
//! configuration schema the CLI consumes.
//!
//! Grammar: UTF-8, one `key = value` per line, `#` starts a full-line
//! comment, blank lines ignored. Unknown and duplicate keys are errors so
//! typos never pass silently.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::attention::MaskMode;
use crate::block::Activation;
use crate::embed::PositionMode;
use crate::error::{Error, Result};
use crate::model::{HeadKind, ModelConfig, TaskConfig};

/// Parse the grammar into ordered pairs. Duplicate keys are rejected.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        if !seen.insert(key.clone()) {
            return Err(Error::Config(format!("duplicate key '{key}'")));
        }
        pairs.push((key, value));
    }
    Ok(pairs)
}

/// Typed accessor over parsed pairs that tracks which keys were consumed.
pub struct KvReader {
    values: BTreeMap<String, String>,
}

impl KvReader {
    pub fn new(text: &str) -> Result<Self> {
        let values = parse_kv(text)?.into_iter().collect();
        Ok(KvReader { values })
    }

    pub fn take(&mut self, key: &str) -> Option<String> {
        self.values.remove(key)
    }

    pub fn require(&mut self, key: &str) -> Result<String> {
        self.take(key)
            .ok_or_else(|| Error::Config(format!("missing required key '{key}'")))
    }

    pub fn take_parsed<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.take(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("bad value '{raw}' for key '{key}'"))),
        }
    }

    pub fn parsed_or<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.take_parsed(key)?.unwrap_or(default))
    }

    pub fn require_parsed<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::Config(format!("bad value '{raw}' for key '{key}'")))
    }

    pub fn bool_or(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.take(key) {
            None => Ok(default),
            Some(raw) => match raw.as_str() {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                other => Err(Error::Config(format!(
                    "bad boolean '{other}' for key '{key}'"
                ))),
            },
        }
    }

    /// Error out if anything was never consumed.
    pub fn finish(self) -> Result<()> {
        if let Some(key) = self.values.keys().next() {
            return Err(Error::Config(format!("unknown key '{key}'")));
        }
        Ok(())
    }
}

/// Learning-rate schedule over the training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Linear decay from the base rate to zero across the configured steps.
    LinearDecay,
}

impl LrSchedule {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "constant" => Ok(LrSchedule::Constant),
            "linear-decay" => Ok(LrSchedule::LinearDecay),
            other => Err(Error::Config(format!("unknown lr schedule '{other}'"))),
        }
    }

    pub fn rate(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::LinearDecay => {
                let total = total.max(1) as f64;
                base * (1.0 - step as f64 / total)
            }
        }
    }
}

/// Optimizer settings for the Adam loop.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub schedule: LrSchedule,
    pub steps: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            clip_norm: 1.0,
            schedule: LrSchedule::Constant,
            steps: 500,
        }
    }
}

/// Everything a training or checking run needs, parsed from one file.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub n_layers: usize,
    pub d_hidden: usize,
    pub n_max: usize,
    pub mask: MaskMode,
    pub positions: PositionMode,
    pub head: HeadKind,
    pub epsilon: f64,
    /// Frequency base of the sinusoid ladder.
    pub pos_base: f64,
    pub scale_logits: bool,
    pub activation: Activation,
    pub bos: bool,
    pub seed: u64,
    pub patch_h: Option<usize>,
    pub patch_w: Option<usize>,
    pub optim: OptimConfig,
    /// Training window length for language modelling.
    pub seq_len: usize,
    /// Evaluate classification accuracy every this many steps.
    pub eval_every: usize,
    pub corpus: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KvReader::new(text)?;

        let d_model: usize = kv.require_parsed("d_model")?;
        // typical head counts are 8 or 16; 8 is the preset when omitted
        let n_heads: usize = kv.parsed_or("n_heads", 8)?;
        let n_layers: usize = kv.require_parsed("n_layers")?;
        let n_max: usize = kv.require_parsed("n_max")?;
        let head = HeadKind::parse(&kv.require("head")?)?;

        let head_dim = match kv.take_parsed::<usize>("head_dim")? {
            Some(k) => k,
            None => {
                if n_heads == 0 || d_model % n_heads != 0 {
                    return Err(Error::Config(format!(
                        "head_dim omitted but d_model {d_model} is not divisible by n_heads {n_heads}"
                    )));
                }
                d_model / n_heads
            }
        };
        let d_hidden = kv.parsed_or("d_hidden", 4 * d_model)?;
        let mask = match kv.take("mask") {
            Some(raw) => match raw.as_str() {
                "none" => MaskMode::None,
                "causal" => MaskMode::Causal,
                other => return Err(Error::Config(format!("unknown mask mode '{other}'"))),
            },
            None => match head {
                HeadKind::Lm => MaskMode::Causal,
                _ => MaskMode::None,
            },
        };
        let positions = match kv.take("positions") {
            Some(raw) => PositionMode::parse(&raw)?,
            None => PositionMode::Learned,
        };
        let epsilon = kv.parsed_or("epsilon", 1e-5)?;
        let pos_base = kv.parsed_or("pos_base", 10_000.0)?;
        let scale_logits = kv.bool_or("scale_logits", true)?;
        let activation = match kv.take("activation") {
            Some(raw) => Activation::parse(&raw)?,
            None => Activation::Gelu,
        };
        let bos = kv.bool_or("bos", true)?;
        let seed = kv.parsed_or("seed", 42u64)?;
        let patch_h = kv.take_parsed("patch_h")?;
        let patch_w = kv.take_parsed("patch_w")?;
        if matches!(head, HeadKind::ClsToken | HeadKind::ClsPool)
            && (patch_h.is_none() || patch_w.is_none())
        {
            return Err(Error::Config(
                "missing required key 'patch_h' (and 'patch_w') for classification heads"
                    .to_string(),
            ));
        }

        let optim = OptimConfig {
            lr: kv.parsed_or("lr", 3e-4)?,
            beta1: kv.parsed_or("beta1", 0.9)?,
            beta2: kv.parsed_or("beta2", 0.999)?,
            adam_epsilon: kv.parsed_or("adam_epsilon", 1e-8)?,
            clip_norm: kv.parsed_or("clip_norm", 1.0)?,
            schedule: match kv.take("lr_schedule") {
                Some(raw) => LrSchedule::parse(&raw)?,
                None => LrSchedule::Constant,
            },
            steps: kv.parsed_or("steps", 500)?,
        };
        let seq_len = kv.parsed_or("seq_len", 32)?;
        let eval_every = kv.parsed_or("eval_every", 50)?;
        let corpus = kv.take("corpus").map(PathBuf::from);
        let out_dir = kv.take("out_dir").map(PathBuf::from);
        kv.finish()?;

        let cfg = RunConfig {
            d_model,
            n_heads,
            head_dim,
            n_layers,
            d_hidden,
            n_max,
            mask,
            positions,
            head,
            epsilon,
            pos_base,
            scale_logits,
            activation,
            bos,
            seed,
            patch_h,
            patch_w,
            optim,
            seq_len,
            eval_every,
            corpus,
            out_dir,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.head_dim == 0 {
            return Err(Error::Config(
                "d_model, n_heads and head_dim must be positive".to_string(),
            ));
        }
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be at least 1".to_string()));
        }
        if self.n_max == 0 {
            return Err(Error::Config("n_max must be at least 1".to_string()));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be positive".to_string()));
        }
        if self.pos_base <= 1.0 {
            return Err(Error::Config("pos_base must exceed 1".to_string()));
        }
        if self.optim.lr < 0.0 {
            return Err(Error::Config("lr must be non-negative".to_string()));
        }
        if self.head == HeadKind::Lm && self.mask != MaskMode::Causal {
            return Err(Error::Config(
                "language-model head requires mask = causal".to_string(),
            ));
        }
        if self.seq_len < 2 {
            return Err(Error::Config("seq_len must be at least 2".to_string()));
        }
        Ok(())
    }

    /// Concretise into a model config for a language-modelling run.
    pub fn to_lm_model_config(&self, vocab: crate::data::Vocab) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            d: self.d_model,
            n_heads: self.n_heads,
            k: self.head_dim,
            n_layers: self.n_layers,
            d_hidden: self.d_hidden,
            n_max: self.n_max,
            mask: self.mask,
            positions: self.positions,
            head: self.head,
            epsilon: self.epsilon,
            pos_base: self.pos_base,
            scale_logits: self.scale_logits,
            activation: self.activation,
            seed: self.seed,
            task: TaskConfig::Lm {
                vocab,
                bos: self.bos,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Concretise into a model config for an image-classification run.
    pub fn to_cls_model_config(
        &self,
        classes: Vec<String>,
        image_h: usize,
        image_w: usize,
        channels: usize,
    ) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            d: self.d_model,
            n_heads: self.n_heads,
            k: self.head_dim,
            n_layers: self.n_layers,
            d_hidden: self.d_hidden,
            n_max: self.n_max,
            mask: self.mask,
            positions: self.positions,
            head: self.head,
            epsilon: self.epsilon,
            pos_base: self.pos_base,
            scale_logits: self.scale_logits,
            activation: self.activation,
            seed: self.seed,
            task: TaskConfig::Cls {
                classes,
                image_h,
                image_w,
                patch_h: self.patch_h.expect("validated"),
                patch_w: self.patch_w.expect("validated"),
                channels,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
