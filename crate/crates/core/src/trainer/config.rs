use std::fmt::Write as _;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::cf_propagation::LayerCombine;
use crate::error::{Error, Result};
use crate::ssl::Denominator;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    None,
    NoLlm,
    NoId,
    Cat,
    NoFreq,
    NoAug,
    NoAlign,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::None,
        Ablation::NoLlm,
        Ablation::NoId,
        Ablation::Cat,
        Ablation::NoFreq,
        Ablation::NoAug,
        Ablation::NoAlign,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoLlm => "no_llm",
            Ablation::NoId => "no_id",
            Ablation::Cat => "cat",
            Ablation::NoFreq => "no_freq",
            Ablation::NoAug => "no_aug",
            Ablation::NoAlign => "no_align",
        }
    }

    pub fn uses_semantic(self) -> bool {
        self != Ablation::NoLlm
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Every knob of a training run. Field names double as config-file keys.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dim: usize,
    pub kg_layers: usize,
    pub cf_layers: usize,
    pub learning_rate: f64,
    pub lambda_aug: f64,
    pub lambda_align: f64,
    pub lambda_gate: f64,
    pub lambda_reg: f64,
    pub rho: f64,
    pub mu: f64,
    pub tau: f64,
    /// Positive edges per mini-batch; 0 puts the whole training set in one batch.
    pub batch_size: usize,
    pub negatives: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub layer_combine: LayerCombine,
    pub infonce_denominator: Denominator,
    pub optimizer: OptimizerKind,
    /// Triplets per translation step; 0 uses all triplets at once.
    pub transe_batch_size: usize,
    /// Contrastive rows per block; 0 compares every row against every row.
    pub ssl_chunk: usize,
    /// Treat the BPR weight `α_ui` as a constant. With gradients through
    /// `α`, the loss can shrink by driving user gates to 1 and item gates
    /// to 0.
    pub detach_alpha: bool,
    /// Adapter hidden width; 0 means `(d_llm + d)/2`.
    pub adapter_mid: usize,
    pub early_stop_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 64,
            kg_layers: 3,
            cf_layers: 3,
            learning_rate: 0.005,
            lambda_aug: 0.05,
            lambda_align: 0.05,
            lambda_gate: 0.05,
            lambda_reg: 1e-5,
            rho: 0.5,
            mu: 0.5,
            tau: 0.2,
            batch_size: 2048,
            negatives: 1,
            max_epochs: 2000,
            patience: 50,
            seed: 2024,
            ablation: Ablation::None,
            layer_combine: LayerCombine::Mean,
            infonce_denominator: Denominator::Exclusive,
            optimizer: OptimizerKind::Adam,
            transe_batch_size: 2048,
            ssl_chunk: 512,
            detach_alpha: true,
            adapter_mid: 0,
            early_stop_k: 50,
        }
    }
}

pub const CONFIG_KEYS: [&str; 25] = [
    "dim",
    "kg_layers",
    "cf_layers",
    "learning_rate",
    "lambda_aug",
    "lambda_align",
    "lambda_gate",
    "lambda_reg",
    "rho",
    "mu",
    "tau",
    "batch_size",
    "negatives",
    "max_epochs",
    "patience",
    "seed",
    "ablation",
    "layer_combine",
    "infonce_denominator",
    "optimizer",
    "transe_batch_size",
    "ssl_chunk",
    "detach_alpha",
    "adapter_mid",
    "early_stop_k",
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl TrainConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "dim" => self.dim = parse_num(key, v)?,
            "kg_layers" => self.kg_layers = parse_num(key, v)?,
            "cf_layers" => self.cf_layers = parse_num(key, v)?,
            "learning_rate" => self.learning_rate = parse_num(key, v)?,
            "lambda_aug" => self.lambda_aug = parse_num(key, v)?,
            "lambda_align" => self.lambda_align = parse_num(key, v)?,
            "lambda_gate" => self.lambda_gate = parse_num(key, v)?,
            "lambda_reg" => self.lambda_reg = parse_num(key, v)?,
            "rho" => self.rho = parse_num(key, v)?,
            "mu" => self.mu = parse_num(key, v)?,
            "tau" => self.tau = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "negatives" => self.negatives = parse_num(key, v)?,
            "max_epochs" => self.max_epochs = parse_num(key, v)?,
            "patience" => self.patience = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "ablation" => self.ablation = v.parse()?,
            "layer_combine" => {
                self.layer_combine = match v {
                    "mean" => LayerCombine::Mean,
                    "last" => LayerCombine::Last,
                    _ => return Err(Error::Config(format!("unknown layer_combine {v:?}"))),
                }
            }
            "infonce_denominator" => {
                self.infonce_denominator = match v {
                    "exclusive" => Denominator::Exclusive,
                    "inclusive" => Denominator::Inclusive,
                    _ => return Err(Error::Config(format!("unknown infonce_denominator {v:?}"))),
                }
            }
            "optimizer" => {
                self.optimizer = match v {
                    "adam" => OptimizerKind::Adam,
                    "sgd" => OptimizerKind::Sgd,
                    _ => return Err(Error::Config(format!("unknown optimizer {v:?}"))),
                }
            }
            "transe_batch_size" => self.transe_batch_size = parse_num(key, v)?,
            "ssl_chunk" => self.ssl_chunk = parse_num(key, v)?,
            "detach_alpha" => self.detach_alpha = parse_num(key, v)?,
            "adapter_mid" => self.adapter_mid = parse_num(key, v)?,
            "early_stop_k" => self.early_stop_k = parse_num(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let s = match key {
            "dim" => self.dim.to_string(),
            "kg_layers" => self.kg_layers.to_string(),
            "cf_layers" => self.cf_layers.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "lambda_aug" => self.lambda_aug.to_string(),
            "lambda_align" => self.lambda_align.to_string(),
            "lambda_gate" => self.lambda_gate.to_string(),
            "lambda_reg" => self.lambda_reg.to_string(),
            "rho" => self.rho.to_string(),
            "mu" => self.mu.to_string(),
            "tau" => self.tau.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "negatives" => self.negatives.to_string(),
            "max_epochs" => self.max_epochs.to_string(),
            "patience" => self.patience.to_string(),
            "seed" => self.seed.to_string(),
            "ablation" => self.ablation.tag().to_string(),
            "layer_combine" => match self.layer_combine {
                LayerCombine::Mean => "mean".into(),
                LayerCombine::Last => "last".into(),
            },
            "infonce_denominator" => match self.infonce_denominator {
                Denominator::Exclusive => "exclusive".into(),
                Denominator::Inclusive => "inclusive".into(),
            },
            "optimizer" => match self.optimizer {
                OptimizerKind::Adam => "adam".into(),
                OptimizerKind::Sgd => "sgd".into(),
            },
            "transe_batch_size" => self.transe_batch_size.to_string(),
            "ssl_chunk" => self.ssl_chunk.to_string(),
            "detach_alpha" => self.detach_alpha.to_string(),
            "adapter_mid" => self.adapter_mid.to_string(),
            "early_stop_k" => self.early_stop_k.to_string(),
            _ => return None,
        };
        Some(s)
    }

    /// Parses `key=value` lines over the defaults. Blank lines and `#`
    /// comments are ignored; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", n + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form: every key, fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in CONFIG_KEYS {
            let _ = writeln!(out, "{k}={}", self.get(k).expect("known key"));
        }
        out
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        for (name, l) in [
            ("lambda_aug", self.lambda_aug),
            ("lambda_align", self.lambda_align),
            ("lambda_gate", self.lambda_gate),
            ("lambda_reg", self.lambda_reg),
        ] {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative number")));
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad("rho must lie in [0, 1]");
        }
        if !(self.mu > 0.0 && self.mu <= 1.0) {
            return bad("mu must lie in (0, 1]");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        if self.negatives == 0 {
            return bad("negatives must be at least 1");
        }
        if self.early_stop_k == 0 {
            return bad("early_stop_k must be at least 1");
        }
        Ok(())
    }

    /// `λ_aug` after ablation switches.
    pub fn effective_lambda_aug(&self) -> f64 {
        match self.ablation {
            Ablation::NoAug => 0.0,
            _ => self.lambda_aug,
        }
    }

    /// `λ_align` after ablation switches; zero whenever only one channel exists.
    pub fn effective_lambda_align(&self) -> f64 {
        match self.ablation {
            Ablation::NoAlign | Ablation::NoLlm | Ablation::NoId | Ablation::Cat => 0.0,
            _ => self.lambda_align,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.dim, c.kg_layers, c.cf_layers, c.rho, c.max_epochs), (64, 3, 3, 0.5, 2000));
        assert_eq!(c.tau, 0.2);
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip_and_hash() {
        let mut c = TrainConfig::default();
        c.set("ablation", "no_freq").unwrap();
        c.set("learning_rate", "0.0003").unwrap();
        c.set("detach_alpha", "false").unwrap();
        let back = TrainConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(TrainConfig::default().hash(), c.hash());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(TrainConfig::parse("colour=blue"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("ablation=w/o_gate"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("lambda_aug=-1"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("mu=0"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("dim"), Err(Error::Config(_))));
        let c = TrainConfig::parse("# comment\n\n dim = 8 \n").unwrap();
        assert_eq!(c.dim, 8);
    }

    #[test]
    fn ablation_lambdas() {
        let mut c = TrainConfig::default();
        c.ablation = Ablation::NoAug;
        assert_eq!(c.effective_lambda_aug(), 0.0);
        c.ablation = Ablation::NoAlign;
        assert_eq!(c.effective_lambda_align(), 0.0);
        assert_eq!(c.effective_lambda_aug(), c.lambda_aug);
    }
}
