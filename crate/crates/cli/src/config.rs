use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ctxseq::attention::FocusConfig;
use ctxseq::data::AugmentationConfig;
use ctxseq::decoding::DecodeConfig;
use ctxseq::model::{DecoderStrategy, ModelConfig};
use ctxseq::training::TrainConfig;

use crate::UsageError;

pub const SEED_ENV: &str = "CTXSEQ_SEED";

pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| UsageError(format!("{SEED_ENV}={s:?} is not an unsigned integer")).into()),
        Err(_) => Ok(None),
    }
}

/// Everything that defines one experiment, as a flat key-value document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // model
    pub strategy: DecoderStrategy,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub n_heads: usize,
    pub layers_source: Vec<usize>,
    pub layers_context: Vec<usize>,
    pub tau: f64,
    pub sigma: f64,
    pub enable_temperature: bool,
    pub enable_window: bool,
    pub scaled_dot: bool,
    pub share_embeddings: bool,
    pub value_output_proj: bool,
    // training
    pub lr_peak: f64,
    pub warmup_steps: u64,
    pub warmup_init_lr: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub validate_every: u64,
    pub clip_norm: Option<f64>,
    pub early_stop_ppl: Option<f64>,
    pub seed: u64,
    pub p_st: f64,
    pub p_sc: f64,
    // decoding
    pub beam_size: usize,
    pub length_penalty: f64,
    pub max_len: usize,
    pub no_repeat_ngram: usize,
    pub min_len: usize,
    // paths
    pub data_dir: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub init_checkpoint: Option<PathBuf>,
    pub reverse_checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let d = DecodeConfig::default();
        Self {
            strategy: m.strategy,
            d_model: m.d_model,
            ffn_dim: m.ffn_dim,
            encoder_layers: m.encoder_layers,
            decoder_layers: m.decoder_layers,
            n_heads: m.n_heads,
            layers_source: Vec::new(),
            layers_context: Vec::new(),
            tau: m.focus.tau,
            sigma: m.focus.sigma,
            enable_temperature: m.focus.enable_temperature,
            enable_window: m.focus.enable_window,
            scaled_dot: m.scaled_dot,
            share_embeddings: m.share_embeddings,
            value_output_proj: m.value_output_proj,
            lr_peak: t.lr_peak,
            warmup_steps: t.warmup_steps,
            warmup_init_lr: t.warmup_init_lr,
            batch_size: t.batch_size,
            max_steps: t.max_steps,
            validate_every: t.validate_every,
            clip_norm: t.clip_norm,
            early_stop_ppl: t.early_stop_ppl,
            seed: t.seed,
            p_st: 0.0,
            p_sc: 0.0,
            beam_size: d.beam_size,
            length_penalty: d.length_penalty,
            max_len: d.max_len,
            no_repeat_ngram: d.no_repeat_ngram,
            min_len: d.min_len,
            data_dir: None,
            vocab: None,
            train: None,
            valid: None,
            test: None,
            checkpoint: None,
            init_checkpoint: None,
            reverse_checkpoint: None,
            out_dir: None,
        }
    }
}

impl RunConfig {
    /// Layers the keys present in `path` over `base`, then applies the seed
    /// environment override.
    pub fn load(base: &RunConfig, path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                let file: toml::Table =
                    toml::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", p.display())))?;
                let mut table = toml::Table::try_from(base).expect("run config serializes");
                table.extend(file);
                table
                    .try_into()
                    .map_err(|e| UsageError(format!("{}: {e}", p.display())))?
            }
            None => base.clone(),
        };
        if let Some(seed) = env_seed()? {
            cfg.seed = seed;
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("run config serializes");
        format!("{:x}", Sha256::digest(json))
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            ffn_dim: self.ffn_dim,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            n_heads: self.n_heads,
            strategy: self.strategy,
            source_layers: self.layers_source.clone(),
            context_layers: self.layers_context.clone(),
            focus: FocusConfig {
                tau: self.tau,
                sigma: self.sigma,
                enable_temperature: self.enable_temperature,
                enable_window: self.enable_window,
            },
            scaled_dot: self.scaled_dot,
            share_embeddings: self.share_embeddings,
            value_output_proj: self.value_output_proj,
            ..ModelConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr_peak: self.lr_peak,
            warmup_steps: self.warmup_steps,
            warmup_init_lr: self.warmup_init_lr,
            batch_size: self.batch_size,
            max_steps: self.max_steps,
            validate_every: self.validate_every,
            clip_norm: self.clip_norm,
            early_stop_ppl: self.early_stop_ppl,
            seed: self.seed,
            augmentation: AugmentationConfig::new(self.p_st, self.p_sc, self.seed),
            init_checkpoint: self.init_checkpoint.clone(),
            ..TrainConfig::default()
        }
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            beam_size: self.beam_size,
            length_penalty: self.length_penalty,
            max_len: self.max_len,
            no_repeat_ngram: self.no_repeat_ngram,
            min_len: self.min_len,
        }
    }

    fn in_data_dir(&self, explicit: &Option<PathBuf>, file: &str) -> Option<PathBuf> {
        explicit
            .clone()
            .or_else(|| self.data_dir.as_ref().map(|d| d.join(file)))
    }

    pub fn vocab_path(&self) -> Option<PathBuf> {
        self.in_data_dir(&self.vocab, "vocab.txt")
    }

    pub fn train_path(&self) -> Option<PathBuf> {
        self.in_data_dir(&self.train, "train.tsv")
    }

    pub fn valid_path(&self) -> Option<PathBuf> {
        self.in_data_dir(&self.valid, "valid.tsv")
    }

    pub fn test_path(&self) -> Option<PathBuf> {
        self.in_data_dir(&self.test, "test.tsv")
    }
}
