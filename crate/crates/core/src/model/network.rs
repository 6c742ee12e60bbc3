use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{DecoderStrategy, ModelConfig};
use super::params::{build_params, AttnIdx, FfIdx, Layout, NormIdx, ParamStore};
use crate::attention::{attention, record, Attended, AttentionRecord, AttnOptions, AttnVars};
use crate::data::{ExampleTriple, BOS, EOS, PAD, SEP};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Sinusoidal position table, `len × d`.
pub fn position_encoding(len: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(&[len, d], data).expect("positive dims")
}

/// Encoder outputs a decoder attends to.
#[derive(Clone, Copy, Debug)]
pub struct Memory {
    /// `encode(S)`, or `encode(S SEP C)` for sequential.
    pub source: Var,
    /// `encode(C)`, or the learned null vector when there is no context.
    /// Unused by sequential.
    pub context: Var,
    pub context_is_null: bool,
}

/// Encodings computed once per input and reused across decode steps.
#[derive(Clone, Debug)]
pub struct EncodedInput {
    pub source: Tensor,
    pub context: Tensor,
    pub context_is_null: bool,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
    /// Removes the null-context key from concatenate's cross-attention,
    /// which turns an example without context into a source-only model.
    pub suppress_null_context: bool,
}

/// Per-parameter graph handles.
struct Bound(Vec<Var>);

impl Bound {
    fn attn(&self, a: &AttnIdx) -> AttnVars {
        AttnVars {
            q: self.0[a.q],
            k: self.0[a.k],
            v: a.v.map(|i| self.0[i]),
            o: a.o.map(|i| self.0[i]),
        }
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, layout) = build_params(&config, &mut rng)?;
        Ok(Self {
            config,
            params,
            layout,
            suppress_null_context: false,
        })
    }

    pub(crate) fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let layout = super::params::layout_from_names(&config, &params)?;
        let fresh = Self::new(config.clone(), 0)?;
        if fresh.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for (name, t) in fresh.params.iter() {
            let got = params.by_name(name).expect("layout resolved every name");
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    t.shape(),
                    got.shape()
                )));
            }
        }
        Ok(Self {
            config,
            params,
            layout,
            suppress_null_context: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn strategy(&self) -> DecoderStrategy {
        self.config.strategy
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Copies every parameter of `other` into `self`. Names and shapes must
    /// match one to one, so alternate cannot warm start from the others.
    pub fn warm_start_from(&mut self, other: &Model) -> Result<()> {
        if self.params.names() != other.params.names() {
            let missing: Vec<&str> = self
                .params
                .names()
                .iter()
                .filter(|n| other.params.id(n).is_none())
                .map(String::as_str)
                .take(3)
                .collect();
            return Err(Error::Checkpoint(format!(
                "parameter mismatch: {} vs {} parameters ({} strategy from {}), e.g. missing {:?}",
                self.params.len(),
                other.params.len(),
                self.config.strategy,
                other.config.strategy,
                missing
            )));
        }
        let mut a = self.config.clone();
        let mut b = other.config.clone();
        for c in [&mut a, &mut b] {
            c.strategy = DecoderStrategy::Sequential;
            c.source_layers.clear();
            c.context_layers.clear();
            c.focus = Default::default();
        }
        if a != b {
            return Err(Error::Checkpoint(
                "model dimensions differ from the initial checkpoint".into(),
            ));
        }
        for id in 0..self.params.len() {
            self.params.set(id, other.params.get(id).clone())?;
        }
        Ok(())
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound(
            (0..self.params.len())
                .map(|i| {
                    if trainable {
                        g.param(self.params.shared(i))
                    } else {
                        g.shared_constant(self.params.shared(i))
                    }
                })
                .collect(),
        )
    }

    fn check_tokens(&self, tokens: &[usize], what: &str) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Vocab(format!(
                "{what} token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn embed(&self, g: &mut Graph, table: Var, tokens: &[usize]) -> Result<Var> {
        let d = self.config.d_model;
        let e = g.gather_rows(table, tokens)?;
        let e = g.scale(e, (d as f64).sqrt())?;
        let pe = g.constant(position_encoding(tokens.len(), d));
        g.add(e, pe)
    }

    fn norm(&self, g: &mut Graph, b: &Bound, x: Var, n: &NormIdx) -> Result<Var> {
        g.layer_norm(x, b.0[n.gamma], b.0[n.beta], self.config.layer_norm_eps)
    }

    fn feed_forward(&self, g: &mut Graph, b: &Bound, x: Var, f: &FfIdx) -> Result<Var> {
        let h = g.matmul(x, b.0[f.w1])?;
        let h = g.add_row(h, b.0[f.b1])?;
        let h = g.relu(h)?;
        let h = g.matmul(h, b.0[f.w2])?;
        g.add_row(h, b.0[f.b2])
    }

    /// `LN(x + attn(x, mem, mem))`.
    #[allow(clippy::too_many_arguments)]
    fn attn_block(
        &self,
        g: &mut Graph,
        b: &Bound,
        x: Var,
        mem: Var,
        attn: &AttnIdx,
        norm: &NormIdx,
        opts: &AttnOptions,
    ) -> Result<(Var, Vec<Var>)> {
        let out = attention(g, x, mem, mem, &b.attn(attn), opts)?;
        let y = g.add(x, out.out)?;
        Ok((self.norm(g, b, y, norm)?, out.alphas))
    }

    fn base_opts(&self) -> AttnOptions {
        AttnOptions {
            n_heads: self.config.n_heads,
            scaled_dot: self.config.scaled_dot,
            ..Default::default()
        }
    }

    fn encode_graph(
        &self,
        g: &mut Graph,
        b: &Bound,
        tokens: &[usize],
        is_context: bool,
        mut records: Option<&mut Vec<AttentionRecord>>,
    ) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Input("cannot encode an empty sequence".into()));
        }
        self.check_tokens(tokens, "encoder")?;
        let mut opts = self.base_opts();
        if is_context && self.config.focus.is_active() {
            opts.focus = Some(self.config.focus);
        }
        let attended = if is_context {
            Attended::SelfContext
        } else {
            Attended::SelfSource
        };
        let mut x = self.embed(g, b.0[self.layout.enc_embed], tokens)?;
        for (l, layer) in self.layout.encoder.iter().enumerate() {
            let (y, alphas) = self.attn_block(g, b, x, x, &layer.self_attn, &layer.self_norm, &opts)?;
            if let Some(r) = records.as_deref_mut() {
                r.push(record(g, &alphas, l, attended));
            }
            let f = self.feed_forward(g, b, y, &layer.ff)?;
            let z = g.add(y, f)?;
            x = self.norm(g, b, z, &layer.ff_norm)?;
        }
        Ok(x)
    }

    fn memory_graph(&self, g: &mut Graph, b: &Bound, source: &[usize], context: &[usize]) -> Result<Memory> {
        if source.is_empty() {
            return Err(Error::Input("source sequence is empty".into()));
        }
        self.check_tokens(context, "context")?;
        let null = b.0[self.layout.null_context];
        if self.config.strategy == DecoderStrategy::Sequential {
            let joint = sequential_input(source, context);
            let enc = self.encode_graph(g, b, &joint, false, None)?;
            return Ok(Memory {
                source: enc,
                context: null,
                context_is_null: context.is_empty(),
            });
        }
        let src = self.encode_graph(g, b, source, false, None)?;
        let (ctx, is_null) = if context.is_empty() {
            (null, true)
        } else {
            (self.encode_graph(g, b, context, true, None)?, false)
        };
        Ok(Memory {
            source: src,
            context: ctx,
            context_is_null: is_null,
        })
    }

    fn decoder_graph(
        &self,
        g: &mut Graph,
        b: &Bound,
        mem: &Memory,
        input: &[usize],
        source_only: bool,
        mut records: Option<&mut Vec<AttentionRecord>>,
    ) -> Result<Var> {
        if input.is_empty() {
            return Err(Error::Input("decoder input is empty".into()));
        }
        self.check_tokens(input, "decoder")?;
        let strategy = self.config.strategy;
        let base = self.base_opts();
        let causal = AttnOptions {
            causal: true,
            ..base.clone()
        };
        let interleave_src = match strategy {
            DecoderStrategy::Interleave => self.config.source_mask()?,
            _ => Vec::new(),
        };
        let (concat_mem, concat_opts) = if strategy == DecoderStrategy::Concatenate && !source_only {
            let m = g.concat_rows(&[mem.source, mem.context])?;
            let mut opts = base.clone();
            if self.suppress_null_context && mem.context_is_null {
                let n_src = g.value(mem.source).rows();
                let mut mask = vec![false; n_src + 1];
                mask[n_src] = true;
                opts.key_mask = Some(mask);
            }
            (Some(m), opts)
        } else {
            (None, base.clone())
        };

        let mut x = self.embed(g, b.0[self.layout.dec_embed], input)?;
        for (l, layer) in self.layout.decoder.iter().enumerate() {
            let (y, alphas) = self.attn_block(g, b, x, x, &layer.self_attn, &layer.self_norm, &causal)?;
            if let Some(r) = records.as_deref_mut() {
                r.push(record(g, &alphas, l, Attended::SelfTarget));
            }
            x = y;
            if let Some((ctx_attn, ctx_norm)) = &layer.ctx_attn {
                if !source_only {
                    let (y, alphas) = self.attn_block(g, b, x, mem.context, ctx_attn, ctx_norm, &base)?;
                    if let Some(r) = records.as_deref_mut() {
                        r.push(record(g, &alphas, l, Attended::CrossContext));
                    }
                    x = y;
                }
            }
            let (target, attended, opts) = match strategy {
                _ if source_only => (mem.source, Attended::CrossSource, &base),
                DecoderStrategy::Sequential | DecoderStrategy::Alternate => (mem.source, Attended::CrossSource, &base),
                DecoderStrategy::Concatenate => {
                    (concat_mem.expect("built above"), Attended::CrossContext, &concat_opts)
                }
                DecoderStrategy::Interleave if interleave_src[l] => (mem.source, Attended::CrossSource, &base),
                DecoderStrategy::Interleave => (mem.context, Attended::CrossContext, &base),
            };
            let (y, alphas) = self.attn_block(g, b, x, target, &layer.cross_attn, &layer.cross_norm, opts)?;
            if let Some(r) = records.as_deref_mut() {
                r.push(record(g, &alphas, l, attended));
            }
            let f = self.feed_forward(g, b, y, &layer.ff)?;
            let z = g.add(y, f)?;
            x = self.norm(g, b, z, &layer.ff_norm)?;
        }
        g.matmul_nt(x, b.0[self.layout.out_proj])
    }

    /// Encoder output for one sequence, `len × D`.
    pub fn encode(&self, tokens: &[usize], is_context: bool) -> Result<Tensor> {
        Ok(self.encode_with_records(tokens, is_context)?.0)
    }

    /// Encoder output and the per-layer self-attention distributions.
    pub fn encode_with_records(&self, tokens: &[usize], is_context: bool) -> Result<(Tensor, Vec<AttentionRecord>)> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let mut recs = Vec::new();
        let out = self.encode_graph(&mut g, &b, tokens, is_context, Some(&mut recs))?;
        Ok((g.value(out).clone(), recs))
    }

    /// Runs the encoder side once for `(S, C)`.
    pub fn prepare(&self, source: &[usize], context: &[usize]) -> Result<EncodedInput> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let mem = self.memory_graph(&mut g, &b, source, context)?;
        Ok(EncodedInput {
            source: g.value(mem.source).clone(),
            context: g.value(mem.context).clone(),
            context_is_null: mem.context_is_null,
        })
    }

    /// Logits (`len × vocab`) for every position of `decoder_input`, given
    /// precomputed encodings.
    pub fn decode_step_stack(&self, decoder_input: &[usize], enc: &EncodedInput) -> Result<Tensor> {
        Ok(self.decode_with_records(decoder_input, enc)?.0)
    }

    pub fn decode_with_records(
        &self,
        decoder_input: &[usize],
        enc: &EncodedInput,
    ) -> Result<(Tensor, Vec<AttentionRecord>)> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let mem = Memory {
            source: g.constant(enc.source.clone()),
            context: g.constant(enc.context.clone()),
            context_is_null: enc.context_is_null,
        };
        let mut recs = Vec::new();
        let out = self.decoder_graph(&mut g, &b, &mem, decoder_input, false, Some(&mut recs))?;
        Ok((g.value(out).clone(), recs))
    }

    /// End-to-end logits for `decoder_input` (which should start with BOS).
    pub fn logits(&self, source: &[usize], context: &[usize], decoder_input: &[usize]) -> Result<Tensor> {
        let enc = self.prepare(source, context)?;
        self.decode_step_stack(decoder_input, &enc)
    }

    /// Logits of the same weights wired as a plain encoder-decoder over `S`
    /// alone: every decoder layer cross-attends to `encode(S)` and context
    /// modules are skipped.
    pub fn source_only_logits(&self, source: &[usize], decoder_input: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let src = self.encode_graph(&mut g, &b, source, false, None)?;
        let mem = Memory {
            source: src,
            context: src,
            context_is_null: true,
        };
        let out = self.decoder_graph(&mut g, &b, &mem, decoder_input, true, None)?;
        Ok(g.value(out).clone())
    }

    /// Log-probabilities of the next token after `generated` (BOS implied).
    pub fn next_log_probs(&self, enc: &EncodedInput, generated: &[usize]) -> Result<Vec<f64>> {
        let mut input = Vec::with_capacity(generated.len() + 1);
        input.push(BOS);
        input.extend_from_slice(generated);
        let logits = self.decode_step_stack(&input, enc)?;
        let last = logits.rows() - 1;
        let row = Tensor::new(&[1, logits.cols()], logits.row(last).to_vec())?;
        Ok(row.log_softmax_rows()?.into_data())
    }

    /// Summed cross-entropy of one example on a fresh graph; returns the
    /// graph, the loss node and the bound parameter handles.
    fn example_loss(&self, ex: &ExampleTriple, trainable: bool) -> Result<(Graph, Var, Bound, usize)> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, trainable);
        let mem = self.memory_graph(&mut g, &b, &ex.source, &ex.context)?;
        let (input, labels) = teacher_forcing(&ex.target);
        let logits = self.decoder_graph(&mut g, &b, &mem, &input, false, None)?;
        let loss = g.cross_entropy_sum(logits, &labels, Some(PAD))?;
        let n = labels.iter().filter(|&&t| t != PAD).count();
        Ok((g, loss, b, n))
    }

    /// Mean token cross-entropy over the batch and the number of scored tokens.
    pub fn forward_loss(&self, batch: &[ExampleTriple]) -> Result<(f64, usize)> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let mut total = 0.0;
        let mut tokens = 0;
        for ex in batch {
            let (g, loss, _, n) = self.example_loss(ex, false)?;
            total += g.value(loss).item();
            tokens += n;
        }
        Ok((total / tokens.max(1) as f64, tokens))
    }

    /// Mean loss, token count, and the gradient of the mean loss for every
    /// parameter in store order (zeros for parameters not on the path).
    pub fn loss_and_grads(&self, batch: &[ExampleTriple]) -> Result<(f64, usize, Vec<Tensor>)> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let mut grads: Vec<Tensor> = self.params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let mut total = 0.0;
        let mut tokens = 0;
        for ex in batch {
            let (g, loss, b, n) = self.example_loss(ex, true)?;
            total += g.value(loss).item();
            tokens += n;
            let gr = g.backward(loss)?;
            for (acc, &v) in grads.iter_mut().zip(&b.0) {
                if let Some(t) = gr.get(v) {
                    acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, x)| *a += x);
                }
            }
        }
        let scale = 1.0 / tokens.max(1) as f64;
        for t in &mut grads {
            t.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
        Ok((total * scale, tokens, grads))
    }

    /// Per-position argmax under teacher forcing equals the target for
    /// every position including EOS.
    pub fn teacher_forced_exact(&self, ex: &ExampleTriple) -> Result<bool> {
        let (input, labels) = teacher_forcing(&ex.target);
        let logits = self.logits(&ex.source, &ex.context, &input)?;
        Ok(labels.iter().enumerate().all(|(i, &t)| argmax(logits.row(i)) == t))
    }
}

/// `S SEP C` (just `S SEP` when `C` is empty).
pub fn sequential_input(source: &[usize], context: &[usize]) -> Vec<usize> {
    let mut joint = Vec::with_capacity(source.len() + 1 + context.len());
    joint.extend_from_slice(source);
    joint.push(SEP);
    joint.extend_from_slice(context);
    joint
}

/// Decoder input `BOS T` and labels `T EOS`.
pub fn teacher_forcing(target: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut input = Vec::with_capacity(target.len() + 1);
    input.push(BOS);
    input.extend_from_slice(target);
    let mut labels = target.to_vec();
    labels.push(EOS);
    (input, labels)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
