//! Training configuration as line-oriented `key = value` text with dotted keys.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::regressor::{Architecture, EncoderConfig, Pooling, RegressorConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub data: PathBuf,
    pub seed: u64,
    pub batch_size: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Supervise every sample through keypoints only.
    pub weak_only: bool,
    /// Periodic checkpoint interval in steps; 0 disables.
    pub checkpoint_every: usize,
    pub lambda_beta: f64,
    pub architecture: Architecture,
    pub channels: usize,
    pub blocks: usize,
    pub groups: usize,
    pub fc_hidden: Option<usize>,
    pub coarsen_factor: f64,
    pub encoder_widths: Vec<usize>,
    pub encoder_group_size: usize,
    pub encoder_pooling: Pooling,
    pub encoder_features: usize,
    pub mlp_hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            data: PathBuf::from("data"),
            seed: 0,
            batch_size: 16,
            stage1_steps: 5000,
            stage2_steps: 2000,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 100.0,
            weak_only: false,
            checkpoint_every: 1000,
            lambda_beta: 0.1,
            architecture: Architecture::Graph,
            channels: 64,
            blocks: 5,
            groups: 8,
            fc_hidden: None,
            coarsen_factor: 4.0,
            encoder_widths: vec![8, 16, 32, 64],
            encoder_group_size: 8,
            encoder_pooling: Pooling::Flatten,
            encoder_features: 128,
            mlp_hidden: vec![256, 256],
        }
    }
}

/// Every accepted key, in the order [`TrainConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "data",
    "seed",
    "batch_size",
    "stage1.steps",
    "stage2.steps",
    "lr",
    "adam.beta1",
    "adam.beta2",
    "adam.eps",
    "grad_clip",
    "weak_only",
    "checkpoint_every",
    "lambda_beta",
    "regressor.architecture",
    "regressor.channels",
    "regressor.blocks",
    "regressor.groups",
    "regressor.fc_hidden",
    "regressor.coarsen_factor",
    "encoder.widths",
    "encoder.group_size",
    "encoder.pooling",
    "encoder.features",
    "mlp.hidden",
];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| parse_num(key, p.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Applies one `key = value` setting; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "data" => self.data = PathBuf::from(v),
            "seed" => self.seed = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "stage1.steps" => self.stage1_steps = parse_num(key, v)?,
            "stage2.steps" => self.stage2_steps = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "adam.beta1" => self.beta1 = parse_num(key, v)?,
            "adam.beta2" => self.beta2 = parse_num(key, v)?,
            "adam.eps" => self.eps = parse_num(key, v)?,
            "grad_clip" => self.grad_clip = parse_num(key, v)?,
            "weak_only" => self.weak_only = parse_num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "lambda_beta" => self.lambda_beta = parse_num(key, v)?,
            "regressor.architecture" => self.architecture = Architecture::parse(v)?,
            "regressor.channels" => self.channels = parse_num(key, v)?,
            "regressor.blocks" => self.blocks = parse_num(key, v)?,
            "regressor.groups" => self.groups = parse_num(key, v)?,
            "regressor.fc_hidden" => {
                self.fc_hidden = if v == "auto" { None } else { Some(parse_num(key, v)?) }
            }
            "regressor.coarsen_factor" => self.coarsen_factor = parse_num(key, v)?,
            "encoder.widths" => self.encoder_widths = parse_list(key, v)?,
            "encoder.group_size" => self.encoder_group_size = parse_num(key, v)?,
            "encoder.pooling" => self.encoder_pooling = Pooling::parse(v)?,
            "encoder.features" => self.encoder_features = parse_num(key, v)?,
            "mlp.hidden" => self.mlp_hidden = parse_list(key, v)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "data" => self.data.display().to_string(),
            "seed" => self.seed.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "stage1.steps" => self.stage1_steps.to_string(),
            "stage2.steps" => self.stage2_steps.to_string(),
            "lr" => self.lr.to_string(),
            "adam.beta1" => self.beta1.to_string(),
            "adam.beta2" => self.beta2.to_string(),
            "adam.eps" => self.eps.to_string(),
            "grad_clip" => self.grad_clip.to_string(),
            "weak_only" => self.weak_only.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "lambda_beta" => self.lambda_beta.to_string(),
            "regressor.architecture" => self.architecture.as_str().to_string(),
            "regressor.channels" => self.channels.to_string(),
            "regressor.blocks" => self.blocks.to_string(),
            "regressor.groups" => self.groups.to_string(),
            "regressor.fc_hidden" => self.fc_hidden.map_or("auto".to_string(), |h| h.to_string()),
            "regressor.coarsen_factor" => self.coarsen_factor.to_string(),
            "encoder.widths" => join(&self.encoder_widths),
            "encoder.group_size" => self.encoder_group_size.to_string(),
            "encoder.pooling" => self.encoder_pooling.as_str().to_string(),
            "encoder.features" => self.encoder_features.to_string(),
            "mlp.hidden" => join(&self.mlp_hidden),
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        })
    }

    /// Applies every line of a config file. Blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Every key in canonical order.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k).unwrap())).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("Adam needs lr > 0, betas in [0, 1) and eps > 0".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("grad_clip must be non-negative".into()));
        }
        if !(self.coarsen_factor >= 1.0) {
            return Err(Error::Config("regressor.coarsen_factor must be at least 1".into()));
        }
        if self.mlp_hidden.is_empty() || self.mlp_hidden.contains(&0) {
            return Err(Error::Config("mlp.hidden needs positive widths".into()));
        }
        crate::metrics::LossWeights::new(self.lambda_beta)?;
        self.regressor_config(64, 1).validate()
    }

    /// Regressor settings for images of the given resolution and channel count.
    pub fn regressor_config(&self, resolution: usize, in_channels: usize) -> RegressorConfig {
        RegressorConfig {
            architecture: self.architecture,
            channels: self.channels,
            blocks: self.blocks,
            groups: self.groups,
            fc_hidden: self.fc_hidden,
            encoder: EncoderConfig {
                resolution,
                in_channels,
                widths: self.encoder_widths.clone(),
                group_size: self.encoder_group_size,
                pooling: self.encoder_pooling,
                features: self.encoder_features,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.set("regressor.fc_hidden", "40").unwrap();
        c.set("encoder.widths", "8, 16").unwrap();
        c.set("lr", "0.001").unwrap();
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(TrainConfig::parse("learning_rate = 1").is_err());
        assert!(TrainConfig::parse("seed 3").is_err());
    }

    #[test]
    fn comments_and_overrides() {
        let mut c = TrainConfig::parse("# comment\nseed = 4 # trailing\n\nbatch_size=2\n").unwrap();
        assert_eq!((c.seed, c.batch_size), (4, 2));
        c.set("seed", "9").unwrap();
        assert_eq!(c.seed, 9);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(TrainConfig::parse("batch_size = 0").is_err());
        assert!(TrainConfig::parse("regressor.channels = 30").is_err());
        assert!(TrainConfig::parse("lambda_beta = -1").is_err());
    }
}
