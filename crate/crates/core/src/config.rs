//! Flat key-value run configuration shared by `train` and `eval`.
//!
//! Training keys use [`TrainConfig`] field names; model, STFT, split and
//! evaluation keys sit alongside them. Missing keys take desk-scale defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsp::{StftConfig, Window};
use crate::error::{Error, Result};
use crate::eval::{EvalOptions, Protocol, DEFAULT_ENV_CUTOFF_HZ, DEFAULT_FILTER_DB};
use crate::model::{ClassifierConfig, SynthesizerConfig};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: u64,
    pub seed: u64,
    pub lambda_cls: f64,
    pub augment_p: f64,
    pub chunk_s: f64,
    pub val_fraction: f64,

    pub depth: usize,
    pub base_channels: usize,
    pub feature_channels: usize,
    pub leaky_slope: f64,
    pub feature_dim: usize,

    pub fft_size: usize,
    pub win_length: usize,
    pub hop_length: usize,

    /// Fraction of videos in the training split.
    pub train_ratio: f64,
    pub split_seed: u64,

    pub threshold_db: f64,
    pub protocol: Protocol,
    pub env_cutoff_hz: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let s = SynthesizerConfig::default();
        let f = StftConfig::default();
        Self {
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: t.seed,
            lambda_cls: t.lambda_cls,
            augment_p: t.augment_p,
            chunk_s: t.chunk_s,
            val_fraction: t.val_fraction,
            depth: s.depth,
            base_channels: s.base_channels,
            feature_channels: s.feature_channels,
            leaky_slope: s.leaky_slope,
            feature_dim: s.feature_dim,
            fft_size: f.fft_size,
            win_length: f.win_length,
            hop_length: f.hop_length,
            train_ratio: 0.9,
            split_seed: 0,
            threshold_db: DEFAULT_FILTER_DB,
            protocol: Protocol::Both,
            env_cutoff_hz: DEFAULT_ENV_CUTOFF_HZ,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::invalid(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train().validate()?;
        self.synth().validate()?;
        self.stft().validate()?;
        self.classifier().validate()?;
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(Error::invalid("train_ratio must be in (0, 1)"));
        }
        if !(self.threshold_db >= 0.0) {
            return Err(Error::invalid("threshold_db must be nonnegative"));
        }
        if !(self.env_cutoff_hz > 0.0) {
            return Err(Error::invalid("env_cutoff_hz must be positive"));
        }
        Ok(())
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            lambda_cls: self.lambda_cls,
            augment_p: self.augment_p,
            chunk_s: self.chunk_s,
            val_fraction: self.val_fraction,
        }
    }

    pub fn synth(&self) -> SynthesizerConfig {
        SynthesizerConfig {
            depth: self.depth,
            base_channels: self.base_channels,
            feature_dim: self.feature_dim,
            feature_channels: self.feature_channels,
            leaky_slope: self.leaky_slope,
        }
    }

    pub fn classifier(&self) -> ClassifierConfig {
        ClassifierConfig::new(self.feature_dim, self.stft().n_bins())
    }

    pub fn stft(&self) -> StftConfig {
        StftConfig {
            fft_size: self.fft_size,
            win_length: self.win_length,
            hop_length: self.hop_length,
            window: Window::Hann,
            center_pad: true,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            threshold_db: self.threshold_db,
            protocol: self.protocol,
            chunk_s: self.chunk_s,
            env_cutoff_hz: self.env_cutoff_hz,
        }
    }
}
