//! Dot-product attention, its causal variant, multi-head wrapping, and the
//! focused-context modifications (temperature and soft Gaussian window).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Sharpening and localization applied to the context encoder's
/// self-attention.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocusConfig {
    pub tau: f64,
    pub sigma: f64,
    pub enable_temperature: bool,
    pub enable_window: bool,
}

impl Default for FocusConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            sigma: 40.0,
            enable_temperature: false,
            enable_window: false,
        }
    }
}

impl FocusConfig {
    pub fn new(tau: f64, sigma: f64) -> Self {
        Self {
            tau,
            sigma,
            enable_temperature: true,
            enable_window: true,
        }
    }

    pub fn is_active(&self) -> bool {
        self.enable_temperature || self.enable_window
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!(
                "window size must be positive, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    fn effective_tau(&self) -> f64 {
        if self.enable_temperature {
            self.tau
        } else {
            1.0
        }
    }
}

/// Gaussian band `exp(−(i−j)²/σ²)`.
pub fn window_matrix(rows: usize, cols: usize, sigma: f64) -> Tensor {
    let sigma2 = sigma * sigma;
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let d = i as f64 - j as f64;
            data.push((-(d * d) / sigma2).exp());
        }
    }
    Tensor::new(&[rows, cols], data).expect("positive dims")
}

/// Which sequence a recorded attention distribution ranged over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Attended {
    SelfSource,
    SelfContext,
    SelfTarget,
    CrossSource,
    CrossContext,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub layer: usize,
    pub attended: Attended,
    /// Queries × keys, averaged over heads; every row is a distribution.
    pub alpha: Tensor,
}

/// Value-level projection matrices for [`attend`] / [`attend_causal`].
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub p_q: Tensor,
    pub p_k: Tensor,
    pub p_v: Option<Tensor>,
    pub p_o: Option<Tensor>,
    pub n_heads: usize,
}

impl AttentionParams {
    pub fn new(p_q: Tensor, p_k: Tensor) -> Self {
        Self {
            p_q,
            p_k,
            p_v: None,
            p_o: None,
            n_heads: 1,
        }
    }

    pub fn dim(&self) -> usize {
        self.p_q.rows()
    }
}

/// Graph handles of one attention module's parameters.
#[derive(Clone, Copy, Debug)]
pub struct AttnVars {
    pub q: Var,
    pub k: Var,
    pub v: Option<Var>,
    pub o: Option<Var>,
}

#[derive(Clone, Debug, Default)]
pub struct AttnOptions {
    pub n_heads: usize,
    pub scaled_dot: bool,
    pub causal: bool,
    /// `true` removes that key from every query's distribution.
    pub key_mask: Option<Vec<bool>>,
    pub focus: Option<FocusConfig>,
}

pub struct AttnOutput {
    pub out: Var,
    /// Per-head attention distributions.
    pub alphas: Vec<Var>,
}

/// `softmax(τ·scores)`, then Gaussian windowing with row renormalization.
pub fn focus_graph(g: &mut Graph, scores: Var, mask: Option<&[bool]>, cfg: &FocusConfig) -> Result<Var> {
    cfg.validate()?;
    let tau = cfg.effective_tau();
    let sharpened = if tau != 1.0 { g.scale(scores, tau)? } else { scores };
    let alpha = g.softmax_rows_masked(sharpened, mask)?;
    if !cfg.enable_window {
        return Ok(alpha);
    }
    let (r, c) = g.value(scores).dims2();
    let window = Arc::new(window_matrix(r, c, cfg.sigma));
    let windowed = g.mul_const(alpha, window)?;
    g.normalize_rows(windowed)
}

/// Final focused distribution `α″` for a raw score matrix.
pub fn focused_scores(scores: &Tensor, cfg: &FocusConfig) -> Result<Tensor> {
    cfg.validate()?;
    let mut g = Graph::new();
    let s = g.constant(scores.clone());
    let out = focus_graph(&mut g, s, None, cfg)?;
    Ok(g.value(out).clone())
}

fn build_mask(n: usize, m: usize, causal: bool, key_mask: Option<&[bool]>) -> Result<Option<Vec<bool>>> {
    if causal && n != m {
        return Err(Error::Shape {
            op: "causal attention",
            lhs: vec![n],
            rhs: vec![m],
        });
    }
    if let Some(km) = key_mask {
        if km.len() != m {
            return Err(Error::Shape {
                op: "key mask",
                lhs: vec![m],
                rhs: vec![km.len()],
            });
        }
    }
    if !causal && key_mask.is_none_or(|km| !km.iter().any(|&b| b)) {
        return Ok(None);
    }
    let mut mask = vec![false; n * m];
    for i in 0..n {
        for j in 0..m {
            mask[i * m + j] = (causal && j > i) || key_mask.is_some_and(|km| km[j]);
        }
    }
    Ok(Some(mask))
}

/// Multi-head attention of `query` rows over `keys`/`values` rows.
pub fn attention(
    g: &mut Graph,
    query: Var,
    keys: Var,
    values: Var,
    proj: &AttnVars,
    opts: &AttnOptions,
) -> Result<AttnOutput> {
    let d = g.value(proj.q).rows();
    let heads = opts.n_heads.max(1);
    if !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("model dim {d} not divisible by {heads} heads")));
    }
    for p in [Some(proj.q), Some(proj.k), proj.v, proj.o].into_iter().flatten() {
        if g.value(p).shape() != [d, d] {
            return Err(Error::shape("attention projection", &[d, d], g.value(p).shape()));
        }
    }
    let (n, m) = (g.value(query).rows(), g.value(keys).rows());
    if g.value(keys).rows() != g.value(values).rows() {
        return Err(Error::shape(
            "attention keys/values",
            g.value(keys).shape(),
            g.value(values).shape(),
        ));
    }
    if g.value(values).cols() != d {
        return Err(Error::shape("attention values", g.value(values).shape(), &[m, d]));
    }
    let mask = build_mask(n, m, opts.causal, opts.key_mask.as_deref())?;

    let q = g.matmul(query, proj.q)?;
    let k = g.matmul(keys, proj.k)?;
    let v = match proj.v {
        Some(pv) => g.matmul(values, pv)?,
        None => values,
    };
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    let mut alphas = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let mut scores = g.matmul_nt(qh, kh)?;
        if opts.scaled_dot {
            scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        }
        let alpha = match opts.focus.as_ref().filter(|f| f.is_active()) {
            Some(cfg) => focus_graph(g, scores, mask.as_deref(), cfg)?,
            None => g.softmax_rows_masked(scores, mask.as_deref())?,
        };
        outs.push(g.matmul(alpha, vh)?);
        alphas.push(alpha);
    }
    let mut out = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    if let Some(po) = proj.o {
        out = g.matmul(out, po)?;
    }
    Ok(AttnOutput { out, alphas })
}

/// Head-averaged attention distribution as a record.
pub fn record(g: &Graph, alphas: &[Var], layer: usize, attended: Attended) -> AttentionRecord {
    let mut alpha = g.value(alphas[0]).clone();
    if alphas.len() > 1 {
        for &a in &alphas[1..] {
            alpha
                .data_mut()
                .iter_mut()
                .zip(g.value(a).data())
                .for_each(|(x, y)| *x += y);
        }
        let k = alphas.len() as f64;
        alpha.data_mut().iter_mut().for_each(|x| *x /= k);
    }
    AttentionRecord { layer, attended, alpha }
}

fn run_value_level(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    params: &AttentionParams,
    causal: bool,
) -> Result<(Tensor, AttentionRecord)> {
    let d = params.dim();
    for t in [q, k, v] {
        if t.cols() != d {
            return Err(Error::shape("attend", t.shape(), &[d, d]));
        }
    }
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let proj = AttnVars {
        q: g.constant(params.p_q.clone()),
        k: g.constant(params.p_k.clone()),
        v: params.p_v.clone().map(|t| g.constant(t)),
        o: params.p_o.clone().map(|t| g.constant(t)),
    };
    let opts = AttnOptions {
        n_heads: params.n_heads,
        causal,
        ..Default::default()
    };
    let out = attention(&mut g, qv, kv, vv, &proj, &opts)?;
    let rec = record(
        &g,
        &out.alphas,
        0,
        if causal {
            Attended::SelfTarget
        } else {
            Attended::CrossSource
        },
    );
    Ok((g.value(out.out).clone(), rec))
}

/// `α_{Q,K} · V` with `α = softmax((Q P_Q)(K P_K)ᵀ)`.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor, params: &AttentionParams) -> Result<(Tensor, AttentionRecord)> {
    run_value_level(q, k, v, params, false)
}

/// Self-attention of `x` where position `t` only sees positions `≤ t`.
pub fn attend_causal(x: &Tensor, params: &AttentionParams) -> Result<(Tensor, AttentionRecord)> {
    run_value_level(x, x, x, params, true)
}

/// Shannon entropy (nats) of a distribution.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()
}
