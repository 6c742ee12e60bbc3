use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::FocusConfig;
use crate::data::vocab::RESERVED;
use crate::error::{Error, Result};

/// How the decoder conditions on source and context.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderStrategy {
    /// One encoder pass over `S SEP C`; plain encoder-decoder.
    Sequential,
    /// Cross-attention over the row concatenation of both encodings.
    Concatenate,
    /// Context attention, then source attention, in every layer.
    Alternate,
    /// Each layer cross-attends to exactly one of source or context.
    Interleave,
}

impl DecoderStrategy {
    pub const ALL: [DecoderStrategy; 4] = [
        DecoderStrategy::Sequential,
        DecoderStrategy::Concatenate,
        DecoderStrategy::Alternate,
        DecoderStrategy::Interleave,
    ];

    /// Strategies whose parameter sets are name- and shape-identical.
    pub fn shares_parameters_with(self, other: DecoderStrategy) -> bool {
        (self == DecoderStrategy::Alternate) == (other == DecoderStrategy::Alternate)
    }

    pub fn encodes_separately(self) -> bool {
        self != DecoderStrategy::Sequential
    }
}

impl fmt::Display for DecoderStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DecoderStrategy::Sequential => "sequential",
            DecoderStrategy::Concatenate => "concatenate",
            DecoderStrategy::Alternate => "alternate",
            DecoderStrategy::Interleave => "interleave",
        };
        f.write_str(s)
    }
}

impl FromStr for DecoderStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sequential" => Ok(DecoderStrategy::Sequential),
            "concatenate" | "concat" => Ok(DecoderStrategy::Concatenate),
            "alternate" => Ok(DecoderStrategy::Alternate),
            "interleave" => Ok(DecoderStrategy::Interleave),
            other => Err(Error::Config(format!("unknown decoder strategy {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub n_heads: usize,
    pub strategy: DecoderStrategy,
    /// 1-based decoder layers attending to the source (interleave only).
    /// Empty together with `context_layers` selects the default partition.
    pub source_layers: Vec<usize>,
    pub context_layers: Vec<usize>,
    pub focus: FocusConfig,
    pub scaled_dot: bool,
    pub share_embeddings: bool,
    /// Value and output projections in every attention module.
    pub value_output_proj: bool,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: RESERVED.len(),
            d_model: 64,
            ffn_dim: 256,
            encoder_layers: 6,
            decoder_layers: 6,
            n_heads: 1,
            strategy: DecoderStrategy::Interleave,
            source_layers: Vec::new(),
            context_layers: Vec::new(),
            focus: FocusConfig::default(),
            scaled_dot: false,
            share_embeddings: true,
            value_output_proj: true,
            layer_norm_eps: 1e-5,
        }
    }
}

/// Sandwich split: the outer layers attend to the source, the middle ones
/// to the context. Six layers give `S = {1,2,5,6}`, `C = {3,4}`.
pub fn default_partition(decoder_layers: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if decoder_layers < 2 {
        return Err(Error::Config(format!(
            "interleave needs at least 2 decoder layers, got {decoder_layers}"
        )));
    }
    let outer = decoder_layers.div_ceil(3).min((decoder_layers - 1) / 2);
    if outer == 0 {
        return Ok((vec![1], (2..=decoder_layers).collect()));
    }
    let source: Vec<usize> = (1..=outer).chain(decoder_layers - outer + 1..=decoder_layers).collect();
    let context = (outer + 1..=decoder_layers - outer).collect();
    Ok((source, context))
}

impl ModelConfig {
    pub fn new(vocab_size: usize, strategy: DecoderStrategy) -> Self {
        Self {
            vocab_size,
            strategy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::Config(format!("vocab_size {} < 4", self.vocab_size)));
        }
        if self.d_model == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("d_model and ffn_dim must be positive".into()));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return Err(Error::Config("layer counts must be positive".into()));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        self.focus.validate()?;
        if self.focus.enable_temperature && self.focus.tau < 1.0 {
            return Err(Error::Config(format!("temperature {} < 1", self.focus.tau)));
        }
        if self.strategy == DecoderStrategy::Interleave {
            self.source_mask()?;
        } else if !self.source_layers.is_empty() || !self.context_layers.is_empty() {
            return Err(Error::Config(format!(
                "layer sets only apply to interleave, strategy is {}",
                self.strategy
            )));
        }
        Ok(())
    }

    /// Per decoder layer (0-based): does it cross-attend to the source?
    pub fn source_mask(&self) -> Result<Vec<bool>> {
        let l = self.decoder_layers;
        let (src, ctx) = if self.source_layers.is_empty() && self.context_layers.is_empty() {
            default_partition(l)?
        } else {
            (self.source_layers.clone(), self.context_layers.clone())
        };
        if src.is_empty() || ctx.is_empty() {
            return Err(Error::Config(
                "interleave needs non-empty source and context layer sets".into(),
            ));
        }
        let mut owner = vec![None; l];
        for (set, is_src) in [(&src, true), (&ctx, false)] {
            for &layer in set {
                if layer == 0 || layer > l {
                    return Err(Error::Config(format!("layer {layer} outside 1..={l}")));
                }
                if owner[layer - 1].replace(is_src).is_some() {
                    return Err(Error::Config(format!("layer {layer} assigned twice")));
                }
            }
        }
        owner
            .into_iter()
            .enumerate()
            .map(|(i, o)| o.ok_or_else(|| Error::Config(format!("layer {} unassigned", i + 1))))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_layer_partition_is_the_published_one() {
        assert_eq!(default_partition(6).unwrap(), (vec![1, 2, 5, 6], vec![3, 4]));
    }

    #[test]
    fn small_partitions_are_valid() {
        assert_eq!(default_partition(2).unwrap(), (vec![1], vec![2]));
        assert_eq!(default_partition(3).unwrap(), (vec![1, 3], vec![2]));
        assert_eq!(default_partition(4).unwrap(), (vec![1, 4], vec![2, 3]));
        assert_eq!(default_partition(5).unwrap(), (vec![1, 2, 4, 5], vec![3]));
        assert!(default_partition(1).is_err());
        for l in 2..20 {
            let (s, c) = default_partition(l).unwrap();
            assert_eq!(s.len() + c.len(), l);
            assert!(!s.is_empty() && !c.is_empty());
        }
    }

    #[test]
    fn explicit_sets_must_partition() {
        let mut cfg = ModelConfig::new(10, DecoderStrategy::Interleave);
        cfg.source_layers = vec![1, 2, 5, 6];
        cfg.context_layers = vec![3, 4];
        assert_eq!(cfg.source_mask().unwrap(), vec![true, true, false, false, true, true]);
        cfg.context_layers = vec![3];
        assert!(cfg.validate().is_err());
        cfg.context_layers = vec![3, 4, 5];
        assert!(cfg.validate().is_err());
        cfg.source_layers = vec![1, 2, 6];
        cfg.context_layers = vec![3, 4, 5, 7];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn strategy_parsing_round_trips() {
        for s in DecoderStrategy::ALL {
            assert_eq!(s.to_string().parse::<DecoderStrategy>().unwrap(), s);
        }
        assert!("bogus".parse::<DecoderStrategy>().is_err());
    }

    #[test]
    fn config_invariants() {
        assert!(ModelConfig::new(3, DecoderStrategy::Concatenate).validate().is_err());
        let mut cfg = ModelConfig::new(10, DecoderStrategy::Concatenate);
        assert!(cfg.validate().is_ok());
        cfg.n_heads = 5;
        assert!(cfg.validate().is_err());
    }
}
