//! Run configuration: training, dataset and architecture settings in one flat
//! `key = value` file with `#` comments, plus command-line overrides and the
//! five ablation presets.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::PoolMode;
use crate::training::TrainConfig;

/// Environment variable consulted for the seed when no other source sets it.
pub const SEED_ENV: &str = "WSBAN_SEED";

/// Component rows of the ablation study, from plain global pooling up to the
/// full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// Global average pooling classifier.
    Row1,
    /// Attention pooling.
    Row2,
    /// Attention pooling and regularization.
    Row3,
    /// Attention pooling, regularization and attention dropout.
    Row4,
    /// All components, including two-stage refinement.
    Row5,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Self::Row1, Self::Row2, Self::Row3, Self::Row4, Self::Row5];

    pub fn name(self) -> &'static str {
        match self {
            Self::Row1 => "row1",
            Self::Row2 => "row2",
            Self::Row3 => "row3",
            Self::Row4 => "row4",
            Self::Row5 => "row5",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Self::Row1 => "baseline (global pooling)",
            Self::Row2 => "+ attention pooling",
            Self::Row3 => "+ regularization",
            Self::Row4 => "+ attention dropout",
            Self::Row5 => "+ refinement",
        }
    }

    fn level(self) -> usize {
        Self::ALL.iter().position(|&r| r == self).unwrap_or(0)
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation preset {s:?}, expected row1..row5")))
    }
}

/// Everything a run needs. Paths are empty when unset.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DatasetSpec,
    pub parts: usize,
    pub channels: Vec<usize>,
    pub attention_pooling: bool,
    pub pool: PoolMode,
    pub logit_scale: f64,
    pub train_data: String,
    pub test_data: String,
    pub log: String,
    pub checkpoint: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = DatasetSpec::default();
        let model = ModelConfig::new(data.num_classes, 8, data.image_size, vec![16, 32, 64, 64]);
        Self {
            train: TrainConfig::default(),
            data,
            parts: model.parts,
            channels: model.channels,
            attention_pooling: model.attention_pooling,
            pool: model.pool,
            logit_scale: model.logit_scale,
            train_data: String::new(),
            test_data: String::new(),
            log: String::new(),
            checkpoint: String::new(),
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

fn pool_name(p: PoolMode) -> &'static str {
    match p {
        PoolMode::Gap => "gap",
        PoolMode::Gmp => "gmp",
    }
}

impl RunConfig {
    /// Every recognized key, in echo order.
    pub const KEYS: [&'static str; 37] = [
        "epochs",
        "batch_size",
        "eval_batch_size",
        "lr",
        "momentum",
        "weight_decay",
        "lr_decay",
        "lr_decay_every",
        "lambda",
        "keep_prob",
        "beta",
        "theta",
        "seed",
        "regularization",
        "dropout",
        "refinement",
        "attention_pooling",
        "parts",
        "channels",
        "pool",
        "logit_scale",
        "classes",
        "train_samples",
        "test_samples",
        "image_size",
        "translate",
        "scale_min",
        "scale_max",
        "rotation_deg",
        "clutter",
        "noise_sigma",
        "occlusion",
        "data_seed",
        "train_data",
        "test_data",
        "log",
        "checkpoint",
    ];

    /// Current value of `key` in the textual form [`RunConfig::set`] accepts.
    pub fn get(&self, key: &str) -> Result<String> {
        let t = &self.train;
        let d = &self.data;
        Ok(match key {
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "eval_batch_size" => t.eval_batch_size.to_string(),
            "lr" => t.lr.to_string(),
            "momentum" => t.momentum.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "lr_decay" => t.lr_decay.to_string(),
            "lr_decay_every" => t.lr_decay_every.to_string(),
            "lambda" => t.lambda.to_string(),
            "keep_prob" => t.keep_prob.to_string(),
            "beta" => t.beta.to_string(),
            "theta" => t.theta.to_string(),
            "seed" => t.seed.to_string(),
            "regularization" => t.regularization.to_string(),
            "dropout" => t.dropout.to_string(),
            "refinement" => t.refinement.to_string(),
            "attention_pooling" => self.attention_pooling.to_string(),
            "parts" => self.parts.to_string(),
            "channels" => self.channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
            "pool" => pool_name(self.pool).to_string(),
            "logit_scale" => self.logit_scale.to_string(),
            "classes" => d.num_classes.to_string(),
            "train_samples" => d.train_samples.to_string(),
            "test_samples" => d.test_samples.to_string(),
            "image_size" => d.image_size.to_string(),
            "translate" => d.translate.to_string(),
            "scale_min" => d.scale_min.to_string(),
            "scale_max" => d.scale_max.to_string(),
            "rotation_deg" => d.rotation_deg.to_string(),
            "clutter" => d.clutter.to_string(),
            "noise_sigma" => d.noise_sigma.to_string(),
            "occlusion" => d.occlusion.to_string(),
            "data_seed" => d.seed.to_string(),
            "train_data" => self.train_data.clone(),
            "test_data" => self.test_data.clone(),
            "log" => self.log.clone(),
            "checkpoint" => self.checkpoint.clone(),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        })
    }

    /// Sets one key from its textual value; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "eval_batch_size" => t.eval_batch_size = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "momentum" => t.momentum = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "lr_decay" => t.lr_decay = parse(key, value)?,
            "lr_decay_every" => t.lr_decay_every = parse(key, value)?,
            "lambda" => t.lambda = parse(key, value)?,
            "keep_prob" => t.keep_prob = parse(key, value)?,
            "beta" => t.beta = parse(key, value)?,
            "theta" => t.theta = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "regularization" => t.regularization = parse_bool(key, value)?,
            "dropout" => t.dropout = parse_bool(key, value)?,
            "refinement" => t.refinement = parse_bool(key, value)?,
            "attention_pooling" => self.attention_pooling = parse_bool(key, value)?,
            "parts" => self.parts = parse(key, value)?,
            "channels" => {
                self.channels = value
                    .split(',')
                    .map(|c| parse(key, c.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "pool" => {
                self.pool = match value {
                    "gap" => PoolMode::Gap,
                    "gmp" => PoolMode::Gmp,
                    _ => return Err(Error::Config(format!("invalid pool {value:?}, expected gap or gmp"))),
                }
            }
            "logit_scale" => self.logit_scale = parse(key, value)?,
            "classes" => d.num_classes = parse(key, value)?,
            "train_samples" => d.train_samples = parse(key, value)?,
            "test_samples" => d.test_samples = parse(key, value)?,
            "image_size" => d.image_size = parse(key, value)?,
            "translate" => d.translate = parse(key, value)?,
            "scale_min" => d.scale_min = parse(key, value)?,
            "scale_max" => d.scale_max = parse(key, value)?,
            "rotation_deg" => d.rotation_deg = parse(key, value)?,
            "clutter" => d.clutter = parse(key, value)?,
            "noise_sigma" => d.noise_sigma = parse(key, value)?,
            "occlusion" => d.occlusion = parse(key, value)?,
            "data_seed" => d.seed = parse(key, value)?,
            "train_data" => self.train_data = value.to_string(),
            "test_data" => self.test_data = value.to_string(),
            "log" => self.log = value.to_string(),
            "checkpoint" => self.checkpoint = value.to_string(),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a `key = value` file. Blank lines and `#` comments are skipped;
    /// a repeated key keeps its last value.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Applies a `key=value` override as given to `--set`.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Configures the component switches for one ablation row.
    pub fn apply_ablation(&mut self, row: Ablation) {
        let level = row.level();
        self.attention_pooling = level >= 1;
        self.train.regularization = level >= 2;
        self.train.dropout = level >= 3;
        self.train.refinement = level >= 4;
    }

    /// The effective configuration as text that [`RunConfig::parse`] reads
    /// back to an identical value.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let value = self.get(key).unwrap_or_default();
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            attention_pooling: self.attention_pooling,
            pool: self.pool,
            logit_scale: self.logit_scale,
            ..ModelConfig::new(self.data.num_classes, self.parts, self.data.image_size, self.channels.clone())
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.data.validate()?;
        self.model_config()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        for key in ["train_data", "test_data", "log", "checkpoint"] {
            if self.get(key)?.contains('#') {
                return Err(Error::Config(format!("{key} may not contain '#'")));
            }
        }
        Ok(())
    }
}

/// Seed from the environment variable, if it is set and parses.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_training_recipe() {
        let c = RunConfig::default();
        assert_eq!(c.train.lambda, 1.0);
        assert_eq!(c.train.keep_prob, 0.8);
        assert_eq!(c.train.beta, 0.05);
        assert_eq!(c.train.momentum, 0.9);
        assert_eq!(c.train.lr, 0.001);
        assert_eq!(c.parts, 8);
        c.validate().unwrap();
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.apply_text("lambda = 0.25 # weaker\nchannels = 8,16\nlr = 0.0003\npool = gmp\nlog = out/run.log\n")
            .unwrap();
        let back = RunConfig::parse(&c.echo()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.echo(), c.echo());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut c = RunConfig::default();
        assert!(matches!(c.apply_text("lamda = 1"), Err(Error::Config(_))));
        assert!(matches!(c.apply_text("lambda = x"), Err(Error::Config(_))));
        assert!(matches!(c.apply_text("just words"), Err(Error::Config(_))));
        assert!(matches!(c.apply_override("dropout=maybe"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("keep_prob = 0"), Err(Error::Config(_))));
    }

    #[test]
    fn override_is_reflected_in_echo() {
        let mut c = RunConfig::default();
        c.apply_override("lambda=0").unwrap();
        assert!(c.echo().contains("lambda = 0\n"));
    }

    #[test]
    fn ablation_rows_add_one_component_each() {
        let mut c = RunConfig::default();
        let mut seen = Vec::new();
        for row in Ablation::ALL {
            c.apply_ablation(row);
            seen.push((c.attention_pooling, c.train.regularization, c.train.dropout, c.train.refinement));
        }
        assert_eq!(
            seen,
            vec![
                (false, false, false, false),
                (true, false, false, false),
                (true, true, false, false),
                (true, true, true, false),
                (true, true, true, true),
            ]
        );
        assert_eq!("row3".parse::<Ablation>().unwrap(), Ablation::Row3);
        assert!("row6".parse::<Ablation>().is_err());
    }
}
