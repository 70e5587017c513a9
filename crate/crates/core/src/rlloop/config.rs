//! Experiment configuration as plain `key = value` text.
//!
//! One assignment per line; `#` starts a comment; blank lines are ignored.
//! Keys may appear at most once and unknown keys are rejected. Values are
//! integers, reals, `true`/`false`, or a precision mode (`bf16`, `unified`,
//! `mixed`).

use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;

use crate::flowgraph::PrecisionMode;
use crate::tinylm::ModelConfig;

use super::grpo::PpoParams;
use super::task::TaskSpec;
use super::RlError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RlConfig {
    pub mode: PrecisionMode,
    pub seed: u64,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub g: usize,
    pub padding: bool,
    pub modulus: u32,
    pub chain_length: usize,
    pub group_size: usize,
    pub batch_prompts: usize,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub temperature: f64,
    pub clip_eps: f64,
    pub kl_coef: f64,
    pub max_response: usize,
    pub eval_prompts: usize,
    pub checkpoint_every: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            mode: PrecisionMode::UnifiedFp8,
            seed: 0,
            n_layers: 2,
            d_model: 128,
            n_heads: 4,
            d_ff: 256,
            g: 128,
            padding: false,
            modulus: 8,
            chain_length: 1,
            group_size: 4,
            batch_prompts: 32,
            steps: 2000,
            lr: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            temperature: 1.0,
            clip_eps: 0.2,
            kl_coef: 1e-3,
            max_response: 2,
            eval_prompts: 256,
            checkpoint_every: 0,
        }
    }
}

const KEYS: &[&str] = &[
    "mode",
    "seed",
    "n_layers",
    "d_model",
    "n_heads",
    "d_ff",
    "g",
    "padding",
    "modulus",
    "chain_length",
    "group_size",
    "batch_prompts",
    "steps",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "temperature",
    "clip_eps",
    "kl_coef",
    "max_response",
    "eval_prompts",
    "checkpoint_every",
];

fn parse_value<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<T, RlError> {
    raw.parse()
        .map_err(|_| RlError::Parse { line, msg: format!("invalid value {raw:?} for {key}") })
}

impl RlConfig {
    /// Parses config text over the defaults.
    pub fn parse(text: &str) -> Result<Self, RlError> {
        let mut cfg = Self::default();
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((k, v)) = body.split_once('=') else {
                return Err(RlError::Parse { line, msg: format!("expected `key = value`, found {body:?}") });
            };
            let (k, v) = (k.trim(), v.trim());
            let Some(&key) = KEYS.iter().find(|&&name| name == k) else {
                return Err(RlError::Parse { line, msg: format!("unknown key {k:?}") });
            };
            if seen.contains(&key) {
                return Err(RlError::Parse { line, msg: format!("duplicate key {key:?}") });
            }
            seen.push(key);
            cfg.set(line, key, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its textual value; `line` is reported on error.
    pub fn set(&mut self, line: usize, key: &str, v: &str) -> Result<(), RlError> {
        match key {
            "mode" => {
                self.mode = v.parse().map_err(|_| RlError::Parse { line, msg: format!("unknown mode {v:?}") })?
            }
            "seed" => self.seed = parse_value(line, key, v)?,
            "n_layers" => self.n_layers = parse_value(line, key, v)?,
            "d_model" => self.d_model = parse_value(line, key, v)?,
            "n_heads" => self.n_heads = parse_value(line, key, v)?,
            "d_ff" => self.d_ff = parse_value(line, key, v)?,
            "g" => self.g = parse_value(line, key, v)?,
            "padding" => self.padding = parse_value(line, key, v)?,
            "modulus" => self.modulus = parse_value(line, key, v)?,
            "chain_length" => self.chain_length = parse_value(line, key, v)?,
            "group_size" => self.group_size = parse_value(line, key, v)?,
            "batch_prompts" => self.batch_prompts = parse_value(line, key, v)?,
            "steps" => self.steps = parse_value(line, key, v)?,
            "lr" => self.lr = parse_value(line, key, v)?,
            "beta1" => self.beta1 = parse_value(line, key, v)?,
            "beta2" => self.beta2 = parse_value(line, key, v)?,
            "adam_eps" => self.adam_eps = parse_value(line, key, v)?,
            "temperature" => self.temperature = parse_value(line, key, v)?,
            "clip_eps" => self.clip_eps = parse_value(line, key, v)?,
            "kl_coef" => self.kl_coef = parse_value(line, key, v)?,
            "max_response" => self.max_response = parse_value(line, key, v)?,
            "eval_prompts" => self.eval_prompts = parse_value(line, key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(line, key, v)?,
            _ => return Err(RlError::Parse { line, msg: format!("unknown key {key:?}") }),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), RlError> {
        self.task().validate()?;
        self.model().validate()?;
        if self.group_size < 2 {
            return Err(RlError::Config(format!("group_size {} < 2", self.group_size)));
        }
        if self.batch_prompts == 0 || self.max_response == 0 {
            return Err(RlError::Config("batch_prompts and max_response must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0 && self.clip_eps.is_finite() && self.clip_eps >= 0.0 && self.kl_coef.is_finite()) {
            return Err(RlError::Config("lr, clip_eps and kl_coef must be finite and non-negative".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(RlError::Config(format!("temperature {} must be finite and non-negative", self.temperature)));
        }
        Ok(())
    }

    pub fn task(&self) -> TaskSpec {
        TaskSpec { modulus: self.modulus, chain_length: self.chain_length, seed: self.seed }
    }

    /// Model sized for the task: vocabulary from the task, context for one
    /// prompt plus the longest response.
    pub fn model(&self) -> ModelConfig {
        let task = self.task();
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            vocab_size: task.vocab_size(),
            max_seq: task.prompt_len() + self.max_response,
            g: self.g,
            mode: self.mode,
            seed: self.seed,
            padding: self.padding,
        }
    }

    pub fn ppo(&self) -> PpoParams {
        PpoParams { clip_eps: self.clip_eps, kl_coef: self.kl_coef }
    }

    /// Every key with its resolved value, parseable by [`parse`](Self::parse).
    pub fn to_text(&self) -> String {
        let mode = self.mode.short_name();
        let vals: Vec<String> = vec![
            mode.to_string(),
            self.seed.to_string(),
            self.n_layers.to_string(),
            self.d_model.to_string(),
            self.n_heads.to_string(),
            self.d_ff.to_string(),
            self.g.to_string(),
            self.padding.to_string(),
            self.modulus.to_string(),
            self.chain_length.to_string(),
            self.group_size.to_string(),
            self.batch_prompts.to_string(),
            self.steps.to_string(),
            format!("{:?}", self.lr),
            format!("{:?}", self.beta1),
            format!("{:?}", self.beta2),
            format!("{:?}", self.adam_eps),
            format!("{:?}", self.temperature),
            format!("{:?}", self.clip_eps),
            format!("{:?}", self.kl_coef),
            self.max_response.to_string(),
            self.eval_prompts.to_string(),
            self.checkpoint_every.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(vals) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
