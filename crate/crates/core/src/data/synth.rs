//! Synthetic context-dependent lookup task.
//!
//! The context lists `k v` pairs, the source names one key and an operation,
//! and the target is the operation applied to that key's value. Neither the
//! source nor the context alone determines the answer.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::ExampleTriple;
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

/// Exhaustive enumeration is used below this many combinations.
const ENUMERATION_LIMIT: u128 = 2_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_keys: usize,
    pub n_values: usize,
    pub n_ops: usize,
    pub n_examples: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(n_keys: usize, n_ops: usize, n_examples: usize, seed: u64) -> Self {
        Self {
            n_keys,
            n_values: 24,
            n_ops,
            n_examples,
            seed,
        }
    }

    /// Number of distinct (key order, value assignment, query key, op)
    /// combinations, saturating at `u128::MAX`.
    pub fn capacity(&self) -> u128 {
        let mut cap: u128 = 1;
        for k in 1..=self.n_keys as u128 {
            cap = cap.saturating_mul(k);
        }
        for _ in 0..self.n_keys {
            cap = cap.saturating_mul(self.n_values as u128);
        }
        cap.saturating_mul(self.n_keys as u128)
            .saturating_mul(self.n_ops as u128)
    }

    pub fn vocab_size(&self) -> usize {
        super::vocab::RESERVED.len() + 1 + self.n_keys + self.n_values + self.n_ops
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct Combination {
    key_order: Vec<usize>,
    values: Vec<usize>,
    query_slot: usize,
    op: usize,
}

#[derive(Clone, Debug)]
pub struct SynthTask {
    pub config: SynthConfig,
    pub vocab: Vocabulary,
    pub train: Vec<ExampleTriple>,
    pub valid: Vec<ExampleTriple>,
    pub test: Vec<ExampleTriple>,
    query_id: usize,
    key_ids: Vec<usize>,
    value_ids: Vec<usize>,
    op_ids: Vec<usize>,
    /// `op_maps[op][value index]` is the output value index; op 0 is identity.
    op_maps: Vec<Vec<usize>>,
}

pub fn synth_lookup_task(n_keys: usize, n_ops: usize, n_examples: usize, seed: u64) -> Result<SynthTask> {
    SynthTask::generate(SynthConfig::new(n_keys, n_ops, n_examples, seed))
}

impl SynthTask {
    pub fn generate(config: SynthConfig) -> Result<Self> {
        if config.n_keys == 0 || config.n_ops == 0 || config.n_values < 2 {
            return Err(Error::Generation(format!(
                "need n_keys ≥ 1, n_ops ≥ 1, n_values ≥ 2; got {config:?}"
            )));
        }
        let capacity = config.capacity();
        if config.n_examples as u128 > capacity {
            return Err(Error::Generation(format!(
                "{} examples requested but only {capacity} distinct combinations exist",
                config.n_examples
            )));
        }
        if config.n_examples < 3 {
            return Err(Error::Generation("need at least 3 examples for three splits".into()));
        }

        let mut vocab = Vocabulary::new();
        let query_id = vocab.add("query", false)?;
        let key_ids = (0..config.n_keys)
            .map(|i| vocab.add(&format!("k{i}"), false))
            .collect::<Result<Vec<_>>>()?;
        let value_ids = (0..config.n_values)
            .map(|i| vocab.add(&format!("v{i}"), true))
            .collect::<Result<Vec<_>>>()?;
        let op_ids = (0..config.n_ops)
            .map(|i| vocab.add(&format!("op{i}"), false))
            .collect::<Result<Vec<_>>>()?;

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut op_maps = vec![(0..config.n_values).collect::<Vec<_>>()];
        for _ in 1..config.n_ops {
            let mut perm: Vec<usize> = (0..config.n_values).collect();
            perm.shuffle(&mut rng);
            op_maps.push(perm);
        }

        let combos = if capacity <= ENUMERATION_LIMIT && capacity < 2 * config.n_examples as u128 {
            let mut all: Vec<u128> = (0..capacity).collect();
            all.shuffle(&mut rng);
            all.truncate(config.n_examples);
            all.into_iter().map(|i| decode_index(i, &config)).collect()
        } else {
            let mut seen = HashSet::with_capacity(config.n_examples);
            let mut combos = Vec::with_capacity(config.n_examples);
            while combos.len() < config.n_examples {
                let c = random_combination(&config, &mut rng);
                if seen.insert(c.clone()) {
                    combos.push(c);
                }
            }
            combos
        };

        let mut task = Self {
            config,
            vocab,
            train: Vec::new(),
            valid: Vec::new(),
            test: Vec::new(),
            query_id,
            key_ids,
            value_ids,
            op_ids,
            op_maps,
        };
        let examples: Vec<ExampleTriple> = combos.iter().map(|c| task.render(c)).collect();
        let n = examples.len();
        let n_held = (n / 10).max(1);
        let n_train = n - 2 * n_held;
        let mut it = examples.into_iter();
        task.train = it.by_ref().take(n_train).collect();
        task.valid = it.by_ref().take(n_held).collect();
        task.test = it.collect();
        Ok(task)
    }

    fn render(&self, c: &Combination) -> ExampleTriple {
        let mut context = Vec::with_capacity(2 * c.key_order.len());
        for (slot, &key) in c.key_order.iter().enumerate() {
            context.push(self.key_ids[key]);
            context.push(self.value_ids[c.values[slot]]);
        }
        let source = vec![
            self.query_id,
            self.key_ids[c.key_order[c.query_slot]],
            self.op_ids[c.op],
        ];
        let answer = self.op_maps[c.op][c.values[c.query_slot]];
        ExampleTriple::new(source, context, vec![self.value_ids[answer]])
    }

    pub fn value_ids(&self) -> &[usize] {
        &self.value_ids
    }

    /// Applies operation `op` to a value token id.
    pub fn apply_op(&self, op: usize, value_id: usize) -> Option<usize> {
        let vi = self.value_ids.iter().position(|&v| v == value_id)?;
        Some(self.value_ids[*self.op_maps.get(op)?.get(vi)?])
    }

    /// Rule-based answer: find the queried key in the context and apply the op.
    pub fn reference_answer(&self, ex: &ExampleTriple) -> Option<usize> {
        let [q, key, op_tok] = ex.source.as_slice() else {
            return None;
        };
        if *q != self.query_id {
            return None;
        }
        let op = self.op_ids.iter().position(|o| o == op_tok)?;
        let value = ex.context.chunks(2).find(|pair| pair[0] == *key)?.get(1).copied()?;
        self.apply_op(op, value)
    }
}

fn decode_index(mut idx: u128, cfg: &SynthConfig) -> Combination {
    let mut take = |radix: usize| -> usize {
        let d = (idx % radix as u128) as usize;
        idx /= radix as u128;
        d
    };
    let op = take(cfg.n_ops);
    let query_slot = take(cfg.n_keys);
    let values: Vec<usize> = (0..cfg.n_keys).map(|_| take(cfg.n_values)).collect();
    // Lehmer code for the key permutation
    let mut pool: Vec<usize> = (0..cfg.n_keys).collect();
    let mut key_order = Vec::with_capacity(cfg.n_keys);
    for remaining in (1..=cfg.n_keys).rev() {
        key_order.push(pool.remove(take(remaining)));
    }
    Combination {
        key_order,
        values,
        query_slot,
        op,
    }
}

fn random_combination(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Combination {
    let mut key_order: Vec<usize> = (0..cfg.n_keys).collect();
    key_order.shuffle(rng);
    Combination {
        key_order,
        values: (0..cfg.n_keys).map(|_| rng.gen_range(0..cfg.n_values)).collect(),
        query_slot: rng.gen_range(0..cfg.n_keys),
        op: rng.gen_range(0..cfg.n_ops),
    }
}
