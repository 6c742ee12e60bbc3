use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use ctxseq::data::{format_dataset, load_dataset, ExampleTriple, SynthConfig, SynthTask, Vocabulary};
use ctxseq::decoding::{generate as beam_generate, DecodeConfig, Hypothesis};
use ctxseq::metrics::{
    attention_stats, backward_ppl_of, corpus_context_use, sequential_segments, text_metrics, win_attn, MetricsReport,
};
use ctxseq::model::{load_checkpoint, sequential_input, DecoderStrategy, Model};
use ctxseq::training::{self, TrainSink};
use ctxseq::Error;

use crate::config::{env_seed, RunConfig};
use crate::{EvalArgs, GenerateArgs, RunArgs, StatsArgs, SynthArgs, UsageError};

/// A run directory whose files are listed with their digests in
/// `manifest.json` once the command finishes.
struct OutDir {
    dir: PathBuf,
    files: BTreeMap<String, String>,
}

impl OutDir {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, bytes.as_ref()).with_context(|| format!("writing {}", path.display()))?;
        self.files
            .insert(name.into(), format!("{:x}", Sha256::digest(bytes.as_ref())));
        Ok(())
    }

    /// Adds a file written by someone else.
    fn record(&mut self, name: &str) -> Result<()> {
        let path = self.path(name);
        let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        self.files.insert(name.into(), format!("{:x}", Sha256::digest(bytes)));
        Ok(())
    }

    fn finish(mut self, command: &str, run_hash: &str) -> Result<()> {
        let manifest = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "run_hash": run_hash,
            "files": std::mem::take(&mut self.files),
        });
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        let path = self.path("manifest.json");
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

fn required(path: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.ok_or_else(|| UsageError(format!("no {what} given (set it directly or through data_dir)")).into())
}

fn load_vocab(cfg: &RunConfig) -> Result<Vocabulary> {
    let path = required(cfg.vocab_path(), "vocabulary")?;
    Vocabulary::load(&path).with_context(|| format!("loading {}", path.display()))
}

fn load_split(path: Option<PathBuf>, what: &str, vocab: &Vocabulary) -> Result<Vec<ExampleTriple>> {
    let path = required(path, what)?;
    let data = load_dataset(&path, vocab).with_context(|| format!("loading {}", path.display()))?;
    for (i, ex) in data.iter().enumerate() {
        if ex.source.is_empty() {
            return Err(Error::Input(format!("{}: example {} has an empty source", path.display(), i + 1)).into());
        }
    }
    Ok(data)
}

fn print_json(value: &impl Serialize) -> Result<String> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    print!("{text}");
    Ok(text)
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let cfg = SynthConfig {
        n_keys: a.n_keys,
        n_values: a.n_values,
        n_ops: a.n_ops,
        n_examples: a.n_examples,
        seed,
    };
    // Everything is generated before the directory is touched.
    let task = SynthTask::generate(cfg)?;
    let hash = format!("{:x}", Sha256::digest(serde_json::to_vec(&cfg)?));
    let mut out = OutDir::create(&a.out_dir)?;
    out.write("vocab.txt", task.vocab.to_file_string())?;
    for (name, split) in [
        ("train.tsv", &task.train),
        ("valid.tsv", &task.valid),
        ("test.tsv", &task.test),
    ] {
        out.write(name, format_dataset(split, &task.vocab))?;
    }
    out.write("synth.json", serde_json::to_string_pretty(&cfg)? + "\n")?;
    out.finish("synth", &hash)?;
    log::info!(
        "wrote {}/{}/{} examples, vocabulary {}",
        task.train.len(),
        task.valid.len(),
        task.test.len(),
        task.vocab.len()
    );
    Ok(())
}

fn checkpoint_metadata(cfg: &RunConfig, vocab: &Vocabulary) -> serde_json::Value {
    json!({
        "run_hash": cfg.hash(),
        "run_config": cfg,
        "vocab_fingerprint": vocab.fingerprint(),
    })
}

pub fn train(a: &RunArgs) -> Result<()> {
    let cfg = a.resolve(&RunConfig::default())?;
    let out_dir = required(cfg.out_dir.clone(), "--out-dir")?;
    let vocab = load_vocab(&cfg)?;
    let train_set = load_split(cfg.train_path(), "training set", &vocab)?;
    let valid = match cfg.valid_path() {
        Some(p) if p.exists() || cfg.valid.is_some() => load_split(Some(p), "validation set", &vocab)?,
        _ => Vec::new(),
    };
    let mut model = Model::new(cfg.model_config(vocab.len()), cfg.seed)?;
    log::info!("{} parameters, strategy {}", model.param_count(), model.strategy());

    let hash = cfg.hash();
    let mut out = OutDir::create(&out_dir)?;
    let mut log_file = BufWriter::new(File::create(out.path("train_log.jsonl"))?);
    let sink = TrainSink {
        checkpoint: Some(out.path("model.ckpt")),
        metadata: checkpoint_metadata(&cfg, &vocab),
        log: Some(&mut log_file),
    };
    let outcome = training::train(&mut model, &train_set, &valid, &cfg.train_config(), sink)?;
    log_file.flush()?;
    drop(log_file);

    out.record("model.ckpt")?;
    out.record("train_log.jsonl")?;
    out.write("run_config.toml", format!("# run {hash}\n{}", cfg.to_toml()))?;
    out.finish("train", &hash)?;
    print_json(&json!({
        "run_hash": hash,
        "steps": outcome.steps,
        "best_step": outcome.best_step,
        "best_valid_ppl": outcome.best_valid_ppl,
    }))?;
    Ok(())
}

struct Loaded {
    model: Model,
    run: RunConfig,
    run_hash: String,
    vocab_fingerprint: String,
}

fn load_model(path: &Path) -> Result<Loaded> {
    let (model, meta) = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let bad = |what: &str| Error::Checkpoint(format!("{}: missing {what}", path.display()));
    let run: RunConfig = serde_json::from_value(meta["run_config"].clone()).map_err(|_| bad("run configuration"))?;
    let run_hash = meta["run_hash"].as_str().ok_or_else(|| bad("run hash"))?.to_string();
    let vocab_fingerprint = meta["vocab_fingerprint"]
        .as_str()
        .ok_or_else(|| bad("vocabulary fingerprint"))?
        .to_string();
    Ok(Loaded {
        model,
        run,
        run_hash,
        vocab_fingerprint,
    })
}

fn check_vocab(loaded: &Loaded, vocab: &Vocabulary, path: &Path) -> Result<()> {
    if loaded.vocab_fingerprint != vocab.fingerprint() || loaded.model.config().vocab_size != vocab.len() {
        return Err(Error::Vocab(format!("{} was trained with a different vocabulary", path.display())).into());
    }
    Ok(())
}

/// Loads the checkpoint and layers the file and flags over its stored
/// configuration.
fn open_run(run: &RunArgs) -> Result<(RunConfig, Vocabulary, Loaded)> {
    let pre = run.resolve(&RunConfig::default())?;
    let path = required(pre.checkpoint.clone(), "--checkpoint")?;
    let loaded = load_model(&path)?;
    let mut base = loaded.run.clone();
    base.out_dir = None;
    let cfg = run.resolve(&base)?;
    if cfg.model_config(loaded.model.config().vocab_size) != *loaded.model.config() {
        return Err(UsageError(format!(
            "model settings disagree with the architecture stored in {}",
            path.display()
        ))
        .into());
    }
    let vocab = load_vocab(&cfg)?;
    check_vocab(&loaded, &vocab, &path)?;
    Ok((cfg, vocab, loaded))
}

fn decode_all(model: &Model, inputs: &[(Vec<usize>, Vec<usize>)], cfg: &DecodeConfig) -> Result<Vec<Vec<Hypothesis>>> {
    cfg.validate()?;
    let out = inputs
        .par_iter()
        .map(|(s, c)| beam_generate(model, s, c, cfg))
        .collect::<ctxseq::Result<Vec<_>>>()?;
    Ok(out)
}

/// Token-weighted perplexity, chunked across threads.
fn perplexity(model: &Model, data: &[ExampleTriple]) -> Result<f64> {
    let parts = data
        .par_chunks(16)
        .map(|chunk| model.forward_loss(chunk))
        .collect::<ctxseq::Result<Vec<_>>>()?;
    let tokens: usize = parts.iter().map(|p| p.1).sum();
    let total: f64 = parts.iter().map(|p| p.0 * p.1 as f64).sum();
    Ok((total / tokens.max(1) as f64).exp())
}

#[derive(Serialize)]
struct Report<'a> {
    #[serde(flatten)]
    metrics: MetricsReport,
    run_hash: String,
    checkpoint_run_hash: Option<String>,
    run_config: &'a RunConfig,
}

fn emit_report(cfg: &RunConfig, report: &Report<'_>) -> Result<()> {
    let text = print_json(report)?;
    if let Some(dir) = &cfg.out_dir {
        let mut out = OutDir::create(dir)?;
        out.write("metrics.json", text)?;
        out.finish("eval", &report.run_hash)?;
    }
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::to_string).collect())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    if let (Some(gen), Some(reference)) = (&a.gen, &a.reference) {
        return eval_files(a, gen, reference);
    }
    let (cfg, vocab, loaded) = open_run(&a.run)?;
    let test = load_split(cfg.test_path(), "test set", &vocab)?;
    let inputs: Vec<_> = test.iter().map(|e| (e.source.clone(), e.context.clone())).collect();
    let hyps = decode_all(&loaded.model, &inputs, &cfg.decode_config())?;
    let best: Vec<Vec<usize>> = hyps.iter().map(|h| h[0].content().to_vec()).collect();
    let refs: Vec<Vec<usize>> = test.iter().map(|e| e.target.clone()).collect();

    let mut metrics = text_metrics(&best, &refs)?;
    metrics.ppl = Some(perplexity(&loaded.model, &test)?);
    let (u_ctx, skipped) = corpus_context_use(&test, &best, &vocab)?;
    metrics.u_ctx = u_ctx;
    metrics.skipped_uctx = skipped;
    if let Some(path) = &cfg.reverse_checkpoint {
        let reverse = load_model(path)?;
        check_vocab(&reverse, &vocab, path)?;
        metrics.bw_ppl = Some(backward_ppl_of(&reverse.model, &test, &best)?);
    }
    if metrics.ppl.is_some_and(|p| !p.is_finite()) {
        return Err(Error::Numeric("test perplexity is not finite".into()).into());
    }
    emit_report(
        &cfg,
        &Report {
            metrics,
            run_hash: cfg.hash(),
            checkpoint_run_hash: Some(loaded.run_hash.clone()),
            run_config: &cfg,
        },
    )
}

/// Text-only scoring; tokens are compared by spelling.
fn eval_files(a: &EvalArgs, gen: &Path, reference: &Path) -> Result<()> {
    let cfg = a.run.resolve(&RunConfig::default())?;
    let gens = read_lines(gen)?;
    let refs = read_lines(reference)?;
    if gens.len() != refs.len() {
        return Err(Error::Input(format!(
            "{} has {} lines but {} has {}",
            gen.display(),
            gens.len(),
            reference.display(),
            refs.len()
        ))
        .into());
    }
    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut intern = |line: &str| -> Vec<usize> {
        line.split_whitespace()
            .map(|t| {
                let n = ids.len();
                *ids.entry(t.to_string()).or_insert(n)
            })
            .collect()
    };
    let g: Vec<Vec<usize>> = gens.iter().map(|l| intern(l)).collect();
    let r: Vec<Vec<usize>> = refs.iter().map(|l| intern(l)).collect();
    emit_report(
        &cfg,
        &Report {
            metrics: text_metrics(&g, &r)?,
            run_hash: cfg.hash(),
            checkpoint_run_hash: None,
            run_config: &cfg,
        },
    )
}

#[derive(Serialize)]
struct Scored {
    text: String,
    score: f64,
    log_prob: f64,
}

#[derive(Serialize)]
struct Generation {
    #[serde(flatten)]
    best: Scored,
    #[serde(skip_serializing_if = "Option::is_none")]
    nbest: Option<Vec<Scored>>,
}

/// `source \t context [\t anything]`; a missing context is empty.
fn read_inputs(path: &Path, vocab: &Vocabulary) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let mut fields = line.split('\t');
            let source = vocab.encode(fields.next().unwrap_or(""));
            let context = vocab.encode(fields.next().unwrap_or(""));
            if source.is_empty() {
                return Err(Error::Parse {
                    line: n + 1,
                    msg: "empty source".into(),
                }
                .into());
            }
            Ok((source, context))
        })
        .collect()
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    let (cfg, vocab, loaded) = open_run(&a.run)?;
    let input = match &a.input {
        Some(p) => p.clone(),
        None => required(cfg.test_path(), "--input")?,
    };
    let inputs = read_inputs(&input, &vocab)?;
    let hyps = decode_all(&loaded.model, &inputs, &cfg.decode_config())?;
    let scored = |h: &Hypothesis| Scored {
        text: vocab.decode(h.content()),
        score: h.score,
        log_prob: h.log_prob,
    };
    let generations: Vec<Generation> = hyps
        .iter()
        .map(|hs| Generation {
            best: scored(&hs[0]),
            nbest: a.nbest.then(|| hs.iter().map(scored).collect()),
        })
        .collect();

    let mut stdout = std::io::stdout().lock();
    for (i, g) in generations.iter().enumerate() {
        match &g.nbest {
            Some(all) => {
                for h in all {
                    writeln!(stdout, "{i}\t{:.6}\t{}", h.score, h.text)?;
                }
            }
            None => writeln!(stdout, "{}", g.best.text)?,
        }
    }
    if let Some(dir) = &cfg.out_dir {
        let hash = cfg.hash();
        let doc = json!({
            "run_hash": hash,
            "checkpoint_run_hash": loaded.run_hash,
            "run_config": cfg,
            "generations": generations,
        });
        let mut out = OutDir::create(dir)?;
        out.write("generations.json", serde_json::to_string_pretty(&doc)? + "\n")?;
        out.finish("generate", &hash)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct StatsReport<'a> {
    strategy: DecoderStrategy,
    /// Only defined for a joint source/context encoding.
    s_attn_c: Option<f64>,
    c_attn_s: Option<f64>,
    win_attn: f64,
    window_radius: usize,
    n_examples: usize,
    run_hash: String,
    checkpoint_run_hash: String,
    run_config: &'a RunConfig,
}

pub fn stats(a: &StatsArgs) -> Result<()> {
    let (cfg, vocab, loaded) = open_run(&a.run)?;
    let test = load_split(cfg.test_path(), "test set", &vocab)?;
    let model = &loaded.model;
    let radius = a.window_radius;
    let joint = model.strategy() == DecoderStrategy::Sequential;

    let per_example = test
        .par_iter()
        .filter(|e| joint || !e.context.is_empty())
        .map(|e| -> ctxseq::Result<(f64, f64, f64)> {
            if joint {
                let (_, recs) = model.encode_with_records(&sequential_input(&e.source, &e.context), false)?;
                let s = attention_stats(&recs, &sequential_segments(e.source.len(), e.context.len()), radius)?;
                Ok((s.s_attn_c, s.c_attn_s, s.win_attn))
            } else {
                let (_, recs) = model.encode_with_records(&e.context, true)?;
                let w = recs.iter().map(|r| win_attn(&r.alpha, radius)).sum::<f64>() / recs.len().max(1) as f64;
                Ok((0.0, 0.0, w))
            }
        })
        .collect::<ctxseq::Result<Vec<_>>>()?;
    if per_example.is_empty() {
        return Err(Error::Input("no examples with a context to analyse".into()).into());
    }
    let n = per_example.len() as f64;
    let mean = |f: fn(&(f64, f64, f64)) -> f64| per_example.iter().map(f).sum::<f64>() / n;
    let report = StatsReport {
        strategy: model.strategy(),
        s_attn_c: joint.then(|| mean(|t| t.0)),
        c_attn_s: joint.then(|| mean(|t| t.1)),
        win_attn: mean(|t| t.2),
        window_radius: radius,
        n_examples: per_example.len(),
        run_hash: cfg.hash(),
        checkpoint_run_hash: loaded.run_hash.clone(),
        run_config: &cfg,
    };
    let text = print_json(&report)?;
    if let Some(dir) = &cfg.out_dir {
        let mut out = OutDir::create(dir)?;
        out.write("stats.json", text)?;
        out.finish("stats", &report.run_hash)?;
    }
    Ok(())
}
