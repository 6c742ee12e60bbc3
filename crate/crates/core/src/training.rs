//! Adam, the warmup/inverse-sqrt schedule, and the training loop.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, augment_rng, AugmentationConfig, ExampleTriple};
use crate::error::{Error, Result};
use crate::metrics::perplexity;
use crate::model::{load_checkpoint, save_checkpoint, Model, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub warmup_steps: u64,
    pub warmup_init_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub batch_size: usize,
    pub max_steps: u64,
    pub validate_every: u64,
    pub seed: u64,
    pub augmentation: AugmentationConfig,
    pub init_checkpoint: Option<PathBuf>,
    /// Stop once validation perplexity falls to this value.
    pub early_stop_ppl: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_peak: 1e-4,
            warmup_steps: 4000,
            warmup_init_lr: 1e-7,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            clip_norm: Some(1.0),
            batch_size: 32,
            max_steps: 20_000,
            validate_every: 500,
            seed: 0,
            augmentation: AugmentationConfig::default(),
            init_checkpoint: None,
            early_stop_ppl: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps < 1 {
            return Err(Error::Config("warmup_steps must be at least 1".into()));
        }
        if !(self.warmup_init_lr > 0.0 && self.lr_peak > self.warmup_init_lr) {
            return Err(Error::Config(format!(
                "need lr_peak > warmup_init_lr > 0, got {} and {}",
                self.lr_peak, self.warmup_init_lr
            )));
        }
        if self.batch_size == 0 || self.validate_every == 0 {
            return Err(Error::Config("batch_size and validate_every must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("invalid Adam hyperparameters".into()));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        self.augmentation.validate()
    }
}

/// Linear warmup from `warmup_init_lr` to `lr_peak`, then `lr_peak·√(warmup/step)`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let w = cfg.warmup_steps.max(1);
    if step < w {
        let frac = step as f64 / w as f64;
        cfg.warmup_init_lr + (cfg.lr_peak - cfg.warmup_init_lr) * frac
    } else {
        cfg.lr_peak * (w as f64 / step as f64).sqrt()
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Fails before touching any parameter if a
/// gradient is not finite.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "adam_step: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (id, g) in grads.iter().enumerate() {
        if g.shape() != params.get(id).shape() {
            return Err(Error::shape("adam_step", params.get(id).shape(), g.shape()));
        }
        if let Some(bad) = g.data().iter().find(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "gradient of {} contains {bad}",
                params.name(id)
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (id, g) in grads.iter().enumerate() {
        let (m, v) = (&mut state.m[id], &mut state.v[id]);
        let p = params.get_mut(id).data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// Scales `grads` so their joint L2 norm is at most `max`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max {
        let s = max / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
    pub ppl: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_ppl: Option<f64>,
}

/// Where training writes its side outputs.
#[derive(Default)]
pub struct TrainSink<'a> {
    /// Best-validation checkpoint destination.
    pub checkpoint: Option<PathBuf>,
    pub metadata: serde_json::Value,
    /// Receives one JSON record per line.
    pub log: Option<&'a mut dyn Write>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub steps: u64,
    pub best_step: u64,
    pub best_valid_ppl: Option<f64>,
    pub log: Vec<LogRecord>,
    pub checkpoint: Option<PathBuf>,
}

impl TrainOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.log.iter().map(|r| r.loss).collect()
    }
}

/// Loads `path` and copies its parameters into `model`.
pub fn warm_start(model: &mut Model, path: &Path) -> Result<()> {
    let (init, _) = load_checkpoint(path)?;
    model.warm_start_from(&init)
}

fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Teacher-forced training with per-epoch augmentation. When `valid` is
/// non-empty the model ends holding its best-validation parameters.
pub fn train(
    model: &mut Model,
    train_set: &[ExampleTriple],
    valid: &[ExampleTriple],
    cfg: &TrainConfig,
    mut sink: TrainSink<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    for ex in train_set.iter().chain(valid) {
        ex.validate(model.config().vocab_size)?;
    }
    if let Some(path) = &cfg.init_checkpoint {
        warm_start(model, path)?;
    }

    let mut state = AdamState::new(&model.params);
    let mut log = Vec::new();
    let mut best: Option<(f64, u64, ParamStore)> = None;
    let mut step = 0u64;
    let mut epoch = 0u64;
    let mut order = epoch_order(train_set.len(), cfg.seed, epoch);
    let mut cursor = 0usize;

    let validate = |model: &Model, step: u64, best: &mut Option<(f64, u64, ParamStore)>| -> Result<Option<f64>> {
        if valid.is_empty() {
            return Ok(None);
        }
        let ppl = perplexity(model, valid)?;
        if !ppl.is_finite() {
            return Err(Error::Numeric(format!("validation perplexity {ppl} at step {step}")));
        }
        if best.as_ref().is_none_or(|(b, _, _)| ppl < *b) {
            *best = Some((ppl, step, model.params.clone()));
            if let Some(path) = &sink.checkpoint {
                save_checkpoint(path, model, &sink.metadata)?;
            }
        }
        Ok(Some(ppl))
    };

    while step < cfg.max_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                epoch += 1;
                order = epoch_order(train_set.len(), cfg.seed, epoch);
                cursor = 0;
            }
            let idx = order[cursor];
            cursor += 1;
            let mut rng = augment_rng(cfg.augmentation.seed, epoch, idx as u64);
            batch.push(augment(&train_set[idx], &cfg.augmentation, &mut rng));
        }
        let (loss, _, mut grads) = model.loss_and_grads(&batch)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("training loss {loss} at step {}", step + 1)));
        }
        if let Some(max) = cfg.clip_norm {
            clip_global_norm(&mut grads, max);
        }
        step += 1;
        let lr = lr_at(step, cfg);
        adam_step(&mut model.params, &grads, &mut state, lr, cfg)?;

        let valid_ppl = if step.is_multiple_of(cfg.validate_every) || step == cfg.max_steps {
            validate(model, step, &mut best)?
        } else {
            None
        };
        let rec = LogRecord {
            step,
            loss,
            ppl: loss.exp(),
            lr,
            valid_ppl,
        };
        if let Some(w) = sink.log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &rec)?;
            writeln!(w)?;
        }
        log::debug!("step {step} loss {loss:.4} lr {lr:.3e}");
        log.push(rec);
        if let (Some(target), Some(ppl)) = (cfg.early_stop_ppl, valid_ppl) {
            if ppl <= target {
                log::info!("validation perplexity {ppl:.4} reached target at step {step}");
                break;
            }
        }
    }

    let (best_valid_ppl, best_step) = match best {
        Some((ppl, s, params)) => {
            model.params = params;
            (Some(ppl), s)
        }
        None => {
            if let Some(path) = &sink.checkpoint {
                save_checkpoint(path, model, &sink.metadata)?;
            }
            (None, step)
        }
    };
    Ok(TrainOutcome {
        steps: step,
        best_step,
        best_valid_ppl,
        log,
        checkpoint: sink.checkpoint.clone(),
    })
}

/// Trains on source-target pairs only (every context dropped), then
/// fine-tunes the same weights with context.
pub fn train_two_stage(
    model: &mut Model,
    train_set: &[ExampleTriple],
    valid: &[ExampleTriple],
    stage1: &TrainConfig,
    stage2: &TrainConfig,
) -> Result<(TrainOutcome, TrainOutcome)> {
    let mut first = stage1.clone();
    first.augmentation.p_st = 1.0;
    first.augmentation.p_sc = 0.0;
    let valid_pairs: Vec<ExampleTriple> = valid
        .iter()
        .map(|e| ExampleTriple::new(e.source.clone(), Vec::new(), e.target.clone()))
        .collect();
    let a = train(model, train_set, &valid_pairs, &first, TrainSink::default())?;
    let mut second = stage2.clone();
    second.init_checkpoint = None;
    let b = train(model, train_set, valid, &second, TrainSink::default())?;
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_lookup_task;
    use crate::model::{DecoderStrategy, ModelConfig};

    #[test]
    fn schedule_matches_published_values() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 1e-7);
        assert!((lr_at(4000, &cfg) - 1e-4).abs() < 1e-18);
        assert!((lr_at(16000, &cfg) - 5e-5).abs() < 1e-18);
        let below = lr_at(3999, &cfg);
        assert!((below - 1e-4).abs() < 1e-7);
        assert!(lr_at(2000, &cfg) > lr_at(1000, &cfg));
    }

    fn scalar_store(v: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.push("theta", Tensor::new(&[1], vec![v]).unwrap()).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = scalar_store(0.7);
        let mut st = AdamState::new(&p);
        let cfg = TrainConfig::default();
        adam_step(&mut p, &[Tensor::zeros(&[1])], &mut st, 0.1, &cfg).unwrap();
        assert_eq!(p.get(0).data(), &[0.7]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn constant_gradient_moves_by_lr() {
        let mut p = scalar_store(0.0);
        let mut st = AdamState::new(&p);
        let cfg = TrainConfig::default();
        let g = [Tensor::new(&[1], vec![3.0]).unwrap()];
        let mut prev = 0.0;
        for _ in 0..200 {
            adam_step(&mut p, &g, &mut st, 0.01, &cfg).unwrap();
            let now = p.get(0).data()[0];
            assert!((prev - now - 0.01).abs() < 1e-6);
            prev = now;
        }
    }

    #[test]
    fn quadratic_descends_like_reference() {
        // scalar Adam written out by hand
        let cfg = TrainConfig::default();
        let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut p = scalar_store(1.0);
        let mut st = AdamState::new(&p);
        for t in 1..=10 {
            let g = 2.0 * theta;
            m = 0.9 * m + 0.1 * g;
            v = 0.98 * v + 0.02 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.98f64.powi(t));
            let next = theta - 0.1 * mh / (vh.sqrt() + 1e-9);
            assert!(next < theta && next > 0.0);
            theta = next;
            let cur = p.get(0).data()[0];
            adam_step(
                &mut p,
                &[Tensor::new(&[1], vec![2.0 * cur]).unwrap()],
                &mut st,
                0.1,
                &cfg,
            )
            .unwrap();
            assert!((p.get(0).data()[0] - theta).abs() < 1e-14);
        }
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut p = scalar_store(1.0);
        let mut st = AdamState::new(&p);
        let err = adam_step(
            &mut p,
            &[Tensor::new(&[1], vec![f64::NAN]).unwrap()],
            &mut st,
            0.1,
            &TrainConfig::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("theta"), "{err}");
        assert_eq!(p.get(0).data(), &[1.0]);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![Tensor::new(&[2], vec![3.0, 4.0]).unwrap()];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].sq_norm() - 1.0).abs() < 1e-12);
    }

    fn small_setup() -> (Model, Vec<ExampleTriple>, Vec<ExampleTriple>, TrainConfig) {
        let task = synth_lookup_task(2, 1, 120, 3).unwrap();
        let cfg = ModelConfig {
            vocab_size: task.vocab.len(),
            d_model: 8,
            ffn_dim: 16,
            encoder_layers: 1,
            decoder_layers: 2,
            strategy: DecoderStrategy::Interleave,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, 4).unwrap();
        let tc = TrainConfig {
            lr_peak: 3e-3,
            warmup_steps: 10,
            batch_size: 8,
            max_steps: 60,
            validate_every: 20,
            seed: 9,
            augmentation: AugmentationConfig::new(0.3, 0.2, 9),
            ..TrainConfig::default()
        };
        (model, task.train, task.valid, tc)
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let (m0, tr, va, tc) = small_setup();
        let mut a = m0.clone();
        let mut b = m0.clone();
        let oa = train(&mut a, &tr, &va, &tc, TrainSink::default()).unwrap();
        let ob = train(&mut b, &tr, &va, &tc, TrainSink::default()).unwrap();
        assert_eq!(oa.losses(), ob.losses());
        assert!(a.params == b.params);
        assert!(perplexity(&a, &va).unwrap() < perplexity(&m0, &va).unwrap());
        assert_eq!(oa.log.iter().filter(|r| r.valid_ppl.is_some()).count(), 3);
    }

    #[test]
    fn log_lines_are_json_records() {
        let (mut m, tr, va, mut tc) = small_setup();
        tc.max_steps = 5;
        let mut buf = Vec::new();
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("best.ckpt");
        let out = train(
            &mut m,
            &tr,
            &va,
            &tc,
            TrainSink {
                checkpoint: Some(ck.clone()),
                metadata: serde_json::json!({"run": 1}),
                log: Some(&mut buf),
            },
        )
        .unwrap();
        let lines: Vec<LogRecord> = String::from_utf8(buf)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines, out.log);
        let (back, meta) = load_checkpoint(&ck).unwrap();
        assert!(back.params == m.params);
        assert_eq!(meta["run"], 1);
    }

    #[test]
    fn warm_start_between_strategies() {
        let (m, tr, va, mut tc) = small_setup();
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("seq.ckpt");
        let mut seq_cfg = m.config().clone();
        seq_cfg.strategy = DecoderStrategy::Sequential;
        let seq = Model::new(seq_cfg, 1).unwrap();
        save_checkpoint(&ck, &seq, &serde_json::Value::Null).unwrap();
        tc.max_steps = 1;
        tc.init_checkpoint = Some(ck.clone());
        let mut inter = m.clone();
        train(&mut inter, &tr, &va, &tc, TrainSink::default()).unwrap();

        let mut alt_cfg = m.config().clone();
        alt_cfg.strategy = DecoderStrategy::Alternate;
        let mut alt = Model::new(alt_cfg, 1).unwrap();
        let err = train(&mut alt, &tr, &va, &tc, TrainSink::default()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }

    #[test]
    fn two_stage_runs_both_phases() {
        let (mut m, tr, va, mut tc) = small_setup();
        tc.max_steps = 10;
        let (a, b) = train_two_stage(&mut m, &tr, &va, &tc, &tc).unwrap();
        assert_eq!((a.steps, b.steps), (10, 10));
    }
}
