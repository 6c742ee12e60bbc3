use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use super::config::{DecoderStrategy, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named parameter tensors in a fixed order.
///
/// Values sit behind `Arc` so a graph can borrow them without copying;
/// [`ParamStore::get_mut`] clones only if a graph is still alive.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    index: HashMap<String, usize>,
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.values.iter().zip(&other.values).all(|(a, b)| a == b)
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter {name}")));
        }
        let id = self.names.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(Arc::new(value));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.values[id]
    }

    pub fn shared(&self, id: usize) -> &Arc<Tensor> {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id])
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| self.get(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter().map(|v| &**v))
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Replaces `id`'s value; the shape must not change.
    pub fn set(&mut self, id: usize, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id].shape() {
            return Err(Error::shape("ParamStore::set", self.values[id].shape(), value.shape()));
        }
        self.values[id] = Arc::new(value);
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttnIdx {
    pub q: usize,
    pub k: usize,
    pub v: Option<usize>,
    pub o: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct NormIdx {
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct FfIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayerIdx {
    pub self_attn: AttnIdx,
    pub self_norm: NormIdx,
    pub ff: FfIdx,
    pub ff_norm: NormIdx,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayerIdx {
    pub self_attn: AttnIdx,
    pub self_norm: NormIdx,
    /// Source attention for alternate; the single cross-attention otherwise.
    pub cross_attn: AttnIdx,
    pub cross_norm: NormIdx,
    /// Alternate only.
    pub ctx_attn: Option<(AttnIdx, NormIdx)>,
    pub ff: FfIdx,
    pub ff_norm: NormIdx,
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub enc_embed: usize,
    pub dec_embed: usize,
    pub out_proj: usize,
    pub null_context: usize,
    pub encoder: Vec<EncoderLayerIdx>,
    pub decoder: Vec<DecoderLayerIdx>,
}

/// Scalar count of one attention module plus its layer norm.
pub fn attention_module_size(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    let mats = if cfg.value_output_proj { 4 } else { 2 };
    mats * d * d + 2 * d
}

fn xavier<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::uniform(&[rows, cols], -limit, limit, rng)
}

struct Builder<'a, R: Rng + ?Sized> {
    store: ParamStore,
    cfg: &'a ModelConfig,
    rng: &'a mut R,
}

impl<R: Rng + ?Sized> Builder<'_, R> {
    fn attn(&mut self, prefix: &str) -> Result<AttnIdx> {
        let d = self.cfg.d_model;
        let mat = |b: &mut Self, n: &str| b.store.push(format!("{prefix}.{n}"), xavier(d, d, b.rng));
        let q = mat(self, "q")?;
        let k = mat(self, "k")?;
        let (v, o) = if self.cfg.value_output_proj {
            (Some(mat(self, "v")?), Some(mat(self, "o")?))
        } else {
            (None, None)
        };
        Ok(AttnIdx { q, k, v, o })
    }

    fn norm(&mut self, prefix: &str) -> Result<NormIdx> {
        let d = self.cfg.d_model;
        Ok(NormIdx {
            gamma: self.store.push(format!("{prefix}.gamma"), Tensor::ones(&[d]))?,
            beta: self.store.push(format!("{prefix}.beta"), Tensor::zeros(&[d]))?,
        })
    }

    fn ff(&mut self, prefix: &str) -> Result<FfIdx> {
        let (d, f) = (self.cfg.d_model, self.cfg.ffn_dim);
        let w1 = xavier(d, f, self.rng);
        let w2 = xavier(f, d, self.rng);
        Ok(FfIdx {
            w1: self.store.push(format!("{prefix}.w1"), w1)?,
            b1: self.store.push(format!("{prefix}.b1"), Tensor::zeros(&[f]))?,
            w2: self.store.push(format!("{prefix}.w2"), w2)?,
            b2: self.store.push(format!("{prefix}.b2"), Tensor::zeros(&[d]))?,
        })
    }

    fn embedding(&mut self, name: &str) -> Result<usize> {
        let (v, d) = (self.cfg.vocab_size, self.cfg.d_model);
        let t = Tensor::randn(&[v, d], 1.0 / (d as f64).sqrt(), self.rng);
        self.store.push(name, t)
    }
}

/// Creates every parameter of `cfg` with its initial value.
pub fn build_params<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<(ParamStore, Layout)> {
    let mut b = Builder {
        store: ParamStore::new(),
        cfg,
        rng,
    };
    let (enc_embed, dec_embed, out_proj) = if cfg.share_embeddings {
        let e = b.embedding("embed")?;
        (e, e, e)
    } else {
        (
            b.embedding("enc_embed")?,
            b.embedding("dec_embed")?,
            b.embedding("out_proj")?,
        )
    };
    let null = Tensor::randn(&[1, cfg.d_model], 1.0, b.rng);
    let null_context = b.store.push("null_context", null)?;

    let mut encoder = Vec::with_capacity(cfg.encoder_layers);
    for l in 0..cfg.encoder_layers {
        let p = format!("encoder.{l}");
        encoder.push(EncoderLayerIdx {
            self_attn: b.attn(&format!("{p}.self_attn"))?,
            self_norm: b.norm(&format!("{p}.self_norm"))?,
            ff: b.ff(&format!("{p}.ff"))?,
            ff_norm: b.norm(&format!("{p}.ff_norm"))?,
        });
    }
    let mut decoder = Vec::with_capacity(cfg.decoder_layers);
    for l in 0..cfg.decoder_layers {
        let p = format!("decoder.{l}");
        let self_attn = b.attn(&format!("{p}.self_attn"))?;
        let self_norm = b.norm(&format!("{p}.self_norm"))?;
        let ctx_attn = if cfg.strategy == DecoderStrategy::Alternate {
            Some((b.attn(&format!("{p}.ctx_attn"))?, b.norm(&format!("{p}.ctx_norm"))?))
        } else {
            None
        };
        let cross_attn = b.attn(&format!("{p}.cross_attn"))?;
        let cross_norm = b.norm(&format!("{p}.cross_norm"))?;
        decoder.push(DecoderLayerIdx {
            self_attn,
            self_norm,
            cross_attn,
            cross_norm,
            ctx_attn,
            ff: b.ff(&format!("{p}.ff"))?,
            ff_norm: b.norm(&format!("{p}.ff_norm"))?,
        });
    }
    let layout = Layout {
        enc_embed,
        dec_embed,
        out_proj,
        null_context,
        encoder,
        decoder,
    };
    Ok((b.store, layout))
}

/// Rebuilds the index layout of an existing store by name.
pub fn layout_from_names(cfg: &ModelConfig, store: &ParamStore) -> Result<Layout> {
    let id = |name: String| {
        store
            .id(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    };
    let attn = |p: &str| -> Result<AttnIdx> {
        Ok(AttnIdx {
            q: id(format!("{p}.q"))?,
            k: id(format!("{p}.k"))?,
            v: if cfg.value_output_proj {
                Some(id(format!("{p}.v"))?)
            } else {
                None
            },
            o: if cfg.value_output_proj {
                Some(id(format!("{p}.o"))?)
            } else {
                None
            },
        })
    };
    let norm = |p: &str| -> Result<NormIdx> {
        Ok(NormIdx {
            gamma: id(format!("{p}.gamma"))?,
            beta: id(format!("{p}.beta"))?,
        })
    };
    let ff = |p: &str| -> Result<FfIdx> {
        Ok(FfIdx {
            w1: id(format!("{p}.w1"))?,
            b1: id(format!("{p}.b1"))?,
            w2: id(format!("{p}.w2"))?,
            b2: id(format!("{p}.b2"))?,
        })
    };
    let (enc_embed, dec_embed, out_proj) = if cfg.share_embeddings {
        let e = id("embed".into())?;
        (e, e, e)
    } else {
        (id("enc_embed".into())?, id("dec_embed".into())?, id("out_proj".into())?)
    };
    let encoder = (0..cfg.encoder_layers)
        .map(|l| {
            let p = format!("encoder.{l}");
            Ok(EncoderLayerIdx {
                self_attn: attn(&format!("{p}.self_attn"))?,
                self_norm: norm(&format!("{p}.self_norm"))?,
                ff: ff(&format!("{p}.ff"))?,
                ff_norm: norm(&format!("{p}.ff_norm"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let decoder = (0..cfg.decoder_layers)
        .map(|l| {
            let p = format!("decoder.{l}");
            Ok(DecoderLayerIdx {
                self_attn: attn(&format!("{p}.self_attn"))?,
                self_norm: norm(&format!("{p}.self_norm"))?,
                cross_attn: attn(&format!("{p}.cross_attn"))?,
                cross_norm: norm(&format!("{p}.cross_norm"))?,
                ctx_attn: if cfg.strategy == DecoderStrategy::Alternate {
                    Some((attn(&format!("{p}.ctx_attn"))?, norm(&format!("{p}.ctx_norm"))?))
                } else {
                    None
                },
                ff: ff(&format!("{p}.ff"))?,
                ff_norm: norm(&format!("{p}.ff_norm"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Layout {
        enc_embed,
        dec_embed,
        out_proj,
        null_context: id("null_context".into())?,
        encoder,
        decoder,
    })
}
