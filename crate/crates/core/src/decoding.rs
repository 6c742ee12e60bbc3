//! Beam search with length normalization and in-hypothesis n-gram blocking.

use serde::{Deserialize, Serialize};

use crate::data::{BOS, EOS, PAD, SEP};
use crate::error::{Error, Result};
use crate::model::{EncodedInput, Model};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// α in `logp / len^α`.
    pub length_penalty: f64,
    pub max_len: usize,
    /// Block repeated n-grams of this order; 0 disables.
    pub no_repeat_ngram: usize,
    /// EOS is unavailable until this many tokens have been generated.
    pub min_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 5,
            length_penalty: 1.5,
            max_len: 500,
            no_repeat_ngram: 3,
            min_len: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size < 1 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        if self.max_len < 1 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        if !self.length_penalty.is_finite() {
            return Err(Error::Config("length_penalty must be finite".into()));
        }
        Ok(())
    }
}

/// Anything that yields next-token log-probabilities for a prefix of
/// generated tokens.
pub trait NextTokenScorer {
    fn vocab_size(&self) -> usize;
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

/// Scores continuations with a model whose encoder side ran once.
pub struct ModelScorer<'a> {
    model: &'a Model,
    enc: EncodedInput,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a Model, source: &[usize], context: &[usize]) -> Result<Self> {
        Ok(Self {
            model,
            enc: model.prepare(source, context)?,
        })
    }
}

impl NextTokenScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut lp = self.model.next_log_probs(&self.enc, prefix)?;
        for t in [PAD, BOS, SEP] {
            lp[t] = f64::NEG_INFINITY;
        }
        Ok(lp)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Generated tokens, ending in EOS unless the length cap was hit.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// `log_prob / len^α`, the ranking key.
    pub score: f64,
}

impl Hypothesis {
    /// Tokens without the trailing EOS.
    pub fn content(&self) -> &[usize] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }
}

pub fn length_normalized(log_prob: f64, len: usize, alpha: f64) -> f64 {
    log_prob / (len.max(1) as f64).powf(alpha)
}

/// Whether appending `next` to `tokens` repeats an `n`-gram already in it.
pub fn repeats_ngram(tokens: &[usize], next: usize, n: usize) -> bool {
    if n == 0 || tokens.len() + 1 < n {
        return false;
    }
    let tail = &tokens[tokens.len() + 1 - n..];
    tokens.windows(n).any(|w| w[..n - 1] == *tail && w[n - 1] == next)
}

struct Live {
    tokens: Vec<usize>,
    log_prob: f64,
}

/// Ranked finished hypotheses, best first.
pub fn beam_search<S: NextTokenScorer + ?Sized>(scorer: &S, cfg: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let v = scorer.vocab_size();
    if v <= EOS {
        return Err(Error::Config(format!("vocabulary of {v} has no EOS")));
    }
    let alpha = cfg.length_penalty;
    let mut live = vec![Live {
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    while !live.is_empty() {
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        for (bi, h) in live.iter().enumerate() {
            let lp = scorer.log_probs(&h.tokens)?;
            if lp.len() != v {
                return Err(Error::Contract(format!(
                    "scorer returned {} scores for vocabulary {v}",
                    lp.len()
                )));
            }
            for (tok, &l) in lp.iter().enumerate() {
                if l.is_nan() {
                    return Err(Error::Numeric(format!("NaN log-probability for token {tok}")));
                }
                if l == f64::NEG_INFINITY
                    || (tok == EOS && h.tokens.len() < cfg.min_len)
                    || repeats_ngram(&h.tokens, tok, cfg.no_repeat_ngram)
                {
                    continue;
                }
                cands.push((bi, tok, h.log_prob + l));
            }
        }
        cands.sort_by(|a, b| b.2.total_cmp(&a.2));
        cands.truncate(cfg.beam_size);

        let mut next = Vec::with_capacity(cands.len());
        for (bi, tok, lp) in cands {
            let mut tokens = live[bi].tokens.clone();
            tokens.push(tok);
            if tok == EOS || tokens.len() >= cfg.max_len {
                let score = length_normalized(lp, tokens.len(), alpha);
                finished.push(Hypothesis {
                    tokens,
                    log_prob: lp,
                    score,
                });
            } else {
                next.push(Live { tokens, log_prob: lp });
            }
        }
        finished.sort_by(|a, b| b.score.total_cmp(&a.score));
        finished.truncate(cfg.beam_size);
        live = next;

        if finished.len() == cfg.beam_size {
            let worst = finished[cfg.beam_size - 1].score;
            let can_improve = live.iter().any(|h| {
                let l = h.tokens.len();
                let a = length_normalized(h.log_prob, l + 1, alpha);
                let b = length_normalized(h.log_prob, cfg.max_len, alpha);
                a.max(b) > worst
            });
            if !can_improve {
                break;
            }
        }
    }
    if finished.is_empty() {
        return Err(Error::Generation("every continuation was blocked".into()));
    }
    Ok(finished)
}

/// Beam search over the model's continuations of `(S, C)`.
pub fn generate(model: &Model, source: &[usize], context: &[usize], cfg: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    let scorer = ModelScorer::new(model, source, context)?;
    beam_search(&scorer, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Log-probabilities that depend on the last token and the prefix length.
    struct Toy {
        table: Vec<Vec<Vec<f64>>>,
    }

    impl Toy {
        fn random(v: usize, depth: usize, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let table = (0..depth)
                .map(|_| {
                    (0..=v)
                        .map(|_| {
                            let raw: Vec<f64> = (0..v).map(|_| rng.gen_range(-3.0..3.0)).collect();
                            let m = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let z = raw.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
                            raw.iter().map(|x| x - z).collect()
                        })
                        .collect()
                })
                .collect();
            Self { table }
        }
    }

    impl NextTokenScorer for Toy {
        fn vocab_size(&self) -> usize {
            self.table[0][0].len()
        }
        fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
            let last = prefix.last().map_or(self.vocab_size(), |&t| t);
            Ok(self.table[prefix.len()][last].clone())
        }
    }

    fn exhaustive<S: NextTokenScorer>(s: &S, cfg: &DecodeConfig) -> Vec<Hypothesis> {
        let mut out = Vec::new();
        let mut stack = vec![(Vec::<usize>::new(), 0.0)];
        while let Some((prefix, lp)) = stack.pop() {
            let probs = s.log_probs(&prefix).unwrap();
            for (t, &l) in probs.iter().enumerate() {
                if (t == EOS && prefix.len() < cfg.min_len) || repeats_ngram(&prefix, t, cfg.no_repeat_ngram) {
                    continue;
                }
                let mut seq = prefix.clone();
                seq.push(t);
                if t == EOS || seq.len() == cfg.max_len {
                    let score = length_normalized(lp + l, seq.len(), cfg.length_penalty);
                    out.push(Hypothesis {
                        tokens: seq,
                        log_prob: lp + l,
                        score,
                    });
                } else {
                    stack.push((seq, lp + l));
                }
            }
        }
        out.sort_by(|a, b| b.score.total_cmp(&a.score));
        out
    }

    #[test]
    fn saturated_beam_equals_exhaustive_search() {
        for seed in 0..30 {
            let v = 3 + (seed as usize % 3);
            let max_len = 1 + (seed as usize % 4);
            let toy = Toy::random(v, max_len, seed);
            let cfg = DecodeConfig {
                beam_size: v.pow(max_len as u32),
                length_penalty: [0.0, 1.0, 1.5][seed as usize % 3],
                max_len,
                no_repeat_ngram: if seed % 2 == 0 { 2 } else { 0 },
                min_len: 0,
            };
            let beam = beam_search(&toy, &cfg).unwrap();
            let oracle = exhaustive(&toy, &cfg);
            assert_eq!(beam[0].tokens, oracle[0].tokens, "seed {seed}");
            assert!((beam[0].score - oracle[0].score).abs() < 1e-12);
        }
    }

    #[test]
    fn beam_one_is_greedy() {
        for seed in 0..10 {
            let toy = Toy::random(5, 6, 100 + seed);
            let cfg = DecodeConfig {
                beam_size: 1,
                max_len: 6,
                no_repeat_ngram: 0,
                ..DecodeConfig::default()
            };
            let beam = beam_search(&toy, &cfg).unwrap();
            let mut greedy = Vec::new();
            loop {
                let lp = toy.log_probs(&greedy).unwrap();
                let best = crate::model::argmax(&lp);
                greedy.push(best);
                if best == EOS || greedy.len() == 6 {
                    break;
                }
            }
            assert_eq!(beam[0].tokens, greedy);
        }
    }

    #[test]
    fn ranking_and_termination_invariants() {
        for seed in 0..10 {
            let toy = Toy::random(4, 7, 200 + seed);
            let cfg = DecodeConfig {
                beam_size: 6,
                max_len: 7,
                ..DecodeConfig::default()
            };
            let out = beam_search(&toy, &cfg).unwrap();
            assert!(out.windows(2).all(|w| w[0].score >= w[1].score));
            for h in &out {
                assert!(h.tokens.last() == Some(&EOS) || h.tokens.len() == 7);
                for i in 3..=h.tokens.len() {
                    assert!(!repeats_ngram(&h.tokens[..i - 1], h.tokens[i - 1], 3), "{:?}", h.tokens);
                }
            }
        }
    }

    #[test]
    fn zero_penalty_ranks_by_raw_log_prob() {
        let toy = Toy::random(4, 3, 9);
        let cfg = DecodeConfig {
            beam_size: 64,
            length_penalty: 0.0,
            max_len: 3,
            no_repeat_ngram: 0,
            min_len: 0,
        };
        for h in beam_search(&toy, &cfg).unwrap() {
            assert_eq!(h.score, h.log_prob);
        }
    }

    #[test]
    fn min_len_delays_eos() {
        let toy = Toy::random(4, 5, 3);
        let cfg = DecodeConfig {
            min_len: 3,
            max_len: 5,
            ..DecodeConfig::default()
        };
        assert!(beam_search(&toy, &cfg).unwrap().iter().all(|h| h.tokens.len() >= 4));
    }

    #[test]
    fn ngram_detection() {
        assert!(repeats_ngram(&[5, 6, 7, 5, 6], 7, 3));
        assert!(!repeats_ngram(&[5, 6, 7, 5, 6], 8, 3));
        assert!(!repeats_ngram(&[5, 6], 7, 3));
        assert!(repeats_ngram(&[5], 5, 1));
        assert!(!repeats_ngram(&[5, 5, 5], 5, 0));
    }

    #[test]
    fn invalid_config_rejected() {
        let toy = Toy::random(4, 2, 1);
        let cfg = DecodeConfig {
            beam_size: 0,
            ..DecodeConfig::default()
        };
        assert!(matches!(beam_search(&toy, &cfg), Err(Error::Config(_))));
    }
}
