use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::ExampleTriple;
use crate::error::{Error, Result};

/// Per-example task resampling probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    /// Drop the context and keep the target.
    pub p_st: f64,
    /// Drop the context and predict it instead of the target.
    pub p_sc: f64,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            p_st: 0.0,
            p_sc: 0.0,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    pub fn new(p_st: f64, p_sc: f64, seed: u64) -> Self {
        Self { p_st, p_sc, seed }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_st", self.p_st), ("p_sc", self.p_sc)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if self.p_st + self.p_sc > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "p_st + p_sc = {} exceeds 1",
                self.p_st + self.p_sc
            )));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.p_st == 0.0 && self.p_sc == 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AugmentKind {
    Unchanged,
    SourceToTarget,
    SourceToContext,
}

/// Independent stream for one example in one epoch.
pub fn augment_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&epoch.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

pub fn draw_kind<R: Rng + ?Sized>(cfg: &AugmentationConfig, rng: &mut R) -> AugmentKind {
    let u: f64 = rng.gen();
    if u < cfg.p_st {
        AugmentKind::SourceToTarget
    } else if u < cfg.p_st + cfg.p_sc {
        AugmentKind::SourceToContext
    } else {
        AugmentKind::Unchanged
    }
}

pub fn apply_kind(example: &ExampleTriple, kind: AugmentKind) -> ExampleTriple {
    match kind {
        AugmentKind::Unchanged => example.clone(),
        AugmentKind::SourceToTarget => ExampleTriple::new(example.source.clone(), Vec::new(), example.target.clone()),
        AugmentKind::SourceToContext => ExampleTriple::new(example.source.clone(), Vec::new(), example.context.clone()),
    }
}

pub fn augment<R: Rng + ?Sized>(example: &ExampleTriple, cfg: &AugmentationConfig, rng: &mut R) -> ExampleTriple {
    apply_kind(example, draw_kind(cfg, rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(i: usize) -> ExampleTriple {
        ExampleTriple::new(vec![10 + i], vec![20 + i, 21 + i], vec![30 + i])
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let cfg = AugmentationConfig::new(0.0, 0.0, 1);
        for i in 0..200 {
            let mut r = augment_rng(cfg.seed, 0, i as u64);
            assert_eq!(augment(&ex(i), &cfg, &mut r), ex(i));
        }
    }

    #[test]
    fn p_st_one_drops_every_context() {
        let cfg = AugmentationConfig::new(1.0, 0.0, 1);
        for i in 0..200 {
            let mut r = augment_rng(cfg.seed, 3, i as u64);
            let out = augment(&ex(i), &cfg, &mut r);
            assert!(out.context.is_empty());
            assert_eq!(out.target, ex(i).target);
            assert_eq!(out.source, ex(i).source);
        }
    }

    #[test]
    fn source_to_context_predicts_own_context() {
        let out = apply_kind(&ex(4), AugmentKind::SourceToContext);
        assert_eq!(out, ExampleTriple::new(vec![14], vec![], vec![24, 25]));
    }

    #[test]
    fn streams_are_reproducible() {
        let cfg = AugmentationConfig::new(0.3, 0.2, 42);
        let run = || -> Vec<ExampleTriple> {
            (0..500)
                .map(|i| augment(&ex(i), &cfg, &mut augment_rng(cfg.seed, 1, i as u64)))
                .collect()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn invalid_probabilities_rejected() {
        assert!(AugmentationConfig::new(0.7, 0.4, 0).validate().is_err());
        assert!(AugmentationConfig::new(-0.1, 0.0, 0).validate().is_err());
        assert!(AugmentationConfig::new(0.3, 0.2, 0).validate().is_ok());
    }
}
