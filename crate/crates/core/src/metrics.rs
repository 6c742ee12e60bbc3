//! ROUGE, unigram F1, corpus BLEU, perplexity, backward perplexity, context
//! use, and attention statistics.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::attention::AttentionRecord;
use crate::data::{ExampleTriple, Vocabulary, UNK};
use crate::decoding::{generate, DecodeConfig};
use crate::error::{Error, Result};
use crate::model::Model;

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn clipped_overlap(gen: &[usize], reference: &[usize], n: usize) -> usize {
    let r = ngram_counts(reference, n);
    ngram_counts(gen, n)
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum()
}

fn f1_percent(hits: usize, gen_total: usize, ref_total: usize) -> f64 {
    if hits == 0 || gen_total == 0 || ref_total == 0 {
        return 0.0;
    }
    let p = hits as f64 / gen_total as f64;
    let r = hits as f64 / ref_total as f64;
    100.0 * 2.0 * p * r / (p + r)
}

/// Clipped n-gram F1, as a percentage.
pub fn rouge_n(gen: &[usize], reference: &[usize], n: usize) -> Result<f64> {
    if n < 1 {
        return Err(Error::Config("n-gram order must be at least 1".into()));
    }
    if reference.is_empty() {
        log::warn!("empty reference; ROUGE-{n} defined as 0");
        return Ok(0.0);
    }
    let count = |len: usize| (len + 1).saturating_sub(n);
    Ok(f1_percent(
        clipped_overlap(gen, reference, n),
        count(gen.len()),
        count(reference.len()),
    ))
}

pub fn lcs_len(a: &[usize], b: &[usize]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Longest-common-subsequence F1, as a percentage.
pub fn rouge_l(gen: &[usize], reference: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        log::warn!("empty reference; ROUGE-L defined as 0");
        return Ok(0.0);
    }
    Ok(f1_percent(lcs_len(gen, reference), gen.len(), reference.len()))
}

pub fn unigram_f1(gen: &[usize], reference: &[usize]) -> Result<f64> {
    rouge_n(gen, reference, 1)
}

/// Corpus BLEU-4 with brevity penalty. Precisions for n > 1 use add-one
/// smoothing; a zero unigram match count gives 0.
pub fn corpus_bleu(gens: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<f64> {
    if gens.len() != refs.len() {
        return Err(Error::Input(format!(
            "{} generations but {} references",
            gens.len(),
            refs.len()
        )));
    }
    let mut hits = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (g, rf) in gens.iter().zip(refs) {
        c += g.len();
        r += rf.len();
        for n in 1..=4 {
            hits[n - 1] += clipped_overlap(g, rf, n);
            totals[n - 1] += (g.len() + 1).saturating_sub(n);
        }
    }
    if c == 0 || hits[0] == 0 {
        return Ok(0.0);
    }
    let mut log_p = (hits[0] as f64 / totals[0] as f64).ln();
    for n in 1..4 {
        log_p += ((hits[n] + 1) as f64 / (totals[n] + 1) as f64).ln();
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(100.0 * bp * (log_p / 4.0).exp())
}

/// `exp` of the mean token cross-entropy.
pub fn perplexity(model: &Model, examples: &[ExampleTriple]) -> Result<f64> {
    Ok(model.forward_loss(examples)?.0.exp())
}

/// Reverse-model perplexity of each source given a generated target.
/// An empty generation is fed to the reverse model as a lone `UNK`.
pub fn backward_ppl_of(reverse: &Model, test: &[ExampleTriple], generations: &[Vec<usize>]) -> Result<f64> {
    if test.len() != generations.len() {
        return Err(Error::Input(format!(
            "{} examples but {} generations",
            test.len(),
            generations.len()
        )));
    }
    let pairs: Vec<ExampleTriple> = test
        .iter()
        .zip(generations)
        .map(|(ex, g)| {
            let input = if g.is_empty() { vec![UNK] } else { g.clone() };
            ExampleTriple::new(input, Vec::new(), ex.source.clone())
        })
        .collect();
    perplexity(reverse, &pairs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackwardPpl {
    pub bw_ppl: f64,
    /// Same measure with the gold targets in place of generations.
    pub gold_floor: f64,
    pub generations: Vec<Vec<usize>>,
}

/// Generates with `forward` and scores the sources under `reverse`.
pub fn backward_ppl(
    forward: &Model,
    reverse: &Model,
    test: &[ExampleTriple],
    decode: &DecodeConfig,
) -> Result<BackwardPpl> {
    if forward.config().vocab_size != reverse.config().vocab_size {
        return Err(Error::Config(format!(
            "forward vocabulary {} differs from reverse vocabulary {}",
            forward.config().vocab_size,
            reverse.config().vocab_size
        )));
    }
    let generations = test
        .iter()
        .map(|ex| {
            Ok(generate(forward, &ex.source, &ex.context, decode)?[0]
                .content()
                .to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    let gold: Vec<Vec<usize>> = test.iter().map(|e| e.target.clone()).collect();
    Ok(BackwardPpl {
        bw_ppl: backward_ppl_of(reverse, test, &generations)?,
        gold_floor: backward_ppl_of(reverse, test, &gold)?,
        generations,
    })
}

fn content_set(tokens: &[usize], vocab: &Vocabulary) -> HashSet<usize> {
    tokens.iter().copied().filter(|&t| vocab.is_content(t)).collect()
}

/// `|N(ctx) ∩ N(gold) ∩ N(gen)| / |N(ctx) ∩ N(gold)| × 100`, or `None`
/// when the denominator is empty.
pub fn context_use_pct(ctx: &[usize], gold: &[usize], gen: &[usize], vocab: &Vocabulary) -> Option<f64> {
    let c = content_set(ctx, vocab);
    let g = content_set(gold, vocab);
    let denom: HashSet<usize> = c.intersection(&g).copied().collect();
    if denom.is_empty() {
        return None;
    }
    let gen = content_set(gen, vocab);
    let hit = denom.iter().filter(|t| gen.contains(t)).count();
    Some(100.0 * hit as f64 / denom.len() as f64)
}

/// Mean context use over the examples with a non-empty denominator, and the
/// number skipped.
pub fn corpus_context_use(
    examples: &[ExampleTriple],
    generations: &[Vec<usize>],
    vocab: &Vocabulary,
) -> Result<(Option<f64>, usize)> {
    if examples.len() != generations.len() {
        return Err(Error::Input("examples and generations differ in length".into()));
    }
    let vals: Vec<f64> = examples
        .iter()
        .zip(generations)
        .filter_map(|(e, g)| context_use_pct(&e.context, &e.target, g, vocab))
        .collect();
    let skipped = examples.len() - vals.len();
    let mean = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
    Ok((mean, skipped))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Source,
    Context,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnStats {
    pub s_attn_c: f64,
    pub c_attn_s: f64,
    pub win_attn: f64,
    pub window_radius: usize,
}

/// Mean attention mass within `radius` of the diagonal.
pub fn win_attn(alpha: &crate::tensor::Tensor, radius: usize) -> f64 {
    let (r, c) = alpha.dims2();
    let total: f64 = (0..r)
        .map(|i| {
            let lo = i.saturating_sub(radius);
            let hi = (i + radius + 1).min(c);
            if lo >= hi {
                0.0
            } else {
                alpha.row(i)[lo..hi].iter().sum::<f64>()
            }
        })
        .sum();
    total / r as f64
}

/// Cross-segment and windowed attention statistics over square
/// self-attention records of a joint source/context encoding.
pub fn attention_stats(records: &[AttentionRecord], segments: &[Segment], window_radius: usize) -> Result<AttnStats> {
    if records.is_empty() {
        return Err(Error::Input("no attention records".into()));
    }
    let (mut sc, mut ns, mut cs, mut nc, mut win) = (0.0, 0usize, 0.0, 0usize, 0.0);
    for rec in records {
        let (r, c) = rec.alpha.dims2();
        if r != segments.len() || c != segments.len() {
            return Err(Error::Input(format!(
                "segment map of length {} does not fit a {r}×{c} attention matrix",
                segments.len()
            )));
        }
        for (i, seg) in segments.iter().enumerate() {
            let other: f64 = rec
                .alpha
                .row(i)
                .iter()
                .zip(segments)
                .filter(|(_, s)| *s != seg)
                .map(|(a, _)| a)
                .sum();
            match seg {
                Segment::Source => {
                    sc += other;
                    ns += 1;
                }
                Segment::Context => {
                    cs += other;
                    nc += 1;
                }
            }
        }
        win += win_attn(&rec.alpha, window_radius);
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(AttnStats {
        s_attn_c: mean(sc, ns),
        c_attn_s: mean(cs, nc),
        win_attn: win / records.len() as f64,
        window_radius,
    })
}

/// Segment labels for `S SEP C`; the separator counts as source.
pub fn sequential_segments(source_len: usize, context_len: usize) -> Vec<Segment> {
    let mut s = vec![Segment::Source; source_len + 1];
    s.extend(std::iter::repeat_n(Segment::Context, context_len));
    s
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    #[serde(rename = "f1")]
    pub unigram_f1: f64,
    pub bleu: f64,
    pub ppl: Option<f64>,
    pub bw_ppl: Option<f64>,
    pub u_ctx: Option<f64>,
    pub skipped_uctx: usize,
    pub n_examples: usize,
}

/// Mean per-example ROUGE/F1 and corpus BLEU of `gens` against `refs`.
pub fn text_metrics(gens: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<MetricsReport> {
    let bleu = corpus_bleu(gens, refs)?;
    let n = gens.len();
    let mut rep = MetricsReport {
        bleu,
        n_examples: n,
        ..MetricsReport::default()
    };
    if n == 0 {
        return Ok(rep);
    }
    for (g, r) in gens.iter().zip(refs) {
        rep.rouge1 += rouge_n(g, r, 1)?;
        rep.rouge2 += rouge_n(g, r, 2)?;
        rep.rouge_l += rouge_l(g, r)?;
        rep.unigram_f1 += unigram_f1(g, r)?;
    }
    let k = n as f64;
    rep.rouge1 /= k;
    rep.rouge2 /= k;
    rep.rouge_l /= k;
    rep.unigram_f1 /= k;
    Ok(rep)
}
