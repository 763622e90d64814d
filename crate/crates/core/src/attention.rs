//! Multi-head dot-product attention and attention-in-attention.
//!
//! Per head `i` with width `C_h = C / heads`:
//!
//! ```text
//! M_i   = (Q W_q,i)(K W_k,i)^T / sqrt(C_h)                  [N_q, N_k]
//! out   = sum_i softmax(M_i + Inner_i(M_i)) (V W_v,i) W_o,i  [N_q, C]
//! ```
//!
//! `Inner_i` is absent for plain attention. Summing per-head products with
//! the matching row block of `W_o` is the same as concatenating the heads and
//! multiplying by the full `W_o`.
//!
//! The inner attention treats the `N_k` columns of `M` as tokens of width
//! `D = N_q`:
//!
//! ```text
//! X = M^T                                   [N_k, D]
//! O = softmax((X W'_q)(X W'_k)^T / sqrt(D)) (X W'_v)
//! Inner(M) = (O W'_o + O)^T
//! ```

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Init;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_HEADS: usize = 4;
pub const DEFAULT_INNER_WIDTH: usize = 64;

#[derive(Clone, Debug)]
pub struct HeadWeights {
    /// `[C, C_h]`
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    /// `[C_h, C]`, the head's row block of the output projection.
    pub wo: ParamId,
}

#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub channels: usize,
    pub heads: Vec<HeadWeights>,
}

impl AttentionWeights {
    /// Registers `{prefix}/head<i>/{wq,wk,wv,wo}`.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        prefix: &str,
        channels: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::contract(format!("{heads} heads do not divide {channels} channels")));
        }
        let ch = channels / heads;
        let heads = (0..heads)
            .map(|i| {
                let p = format!("{prefix}/head{i}");
                Ok(HeadWeights {
                    wq: store.add(format!("{p}/wq"), init.xavier(&[channels, ch], channels, ch))?,
                    wk: store.add(format!("{p}/wk"), init.xavier(&[channels, ch], channels, ch))?,
                    wv: store.add(format!("{p}/wv"), init.xavier(&[channels, ch], channels, ch))?,
                    wo: store.add(format!("{p}/wo"), init.xavier(&[ch, channels], channels, channels))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(AttentionWeights { channels, heads })
    }

    pub fn head_width(&self) -> usize {
        self.channels / self.heads.len()
    }
}

#[derive(Clone, Debug)]
pub struct InnerAttentionWeights {
    /// Token width: the attention-map height this module was built for.
    pub d: usize,
    /// Query/key projection width.
    pub width: usize,
    /// `[D, width]`
    pub wq: ParamId,
    pub wk: ParamId,
    /// `[D, D]`
    pub wv: ParamId,
    pub wo: ParamId,
}

impl InnerAttentionWeights {
    /// Registers `{prefix}/{wq,wk,wv,wo}`. `W'_v` starts at zero so a fresh
    /// module contributes nothing.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        prefix: &str,
        d: usize,
        width: usize,
    ) -> Result<Self> {
        if d == 0 || width == 0 {
            return Err(Error::contract("inner attention needs positive D and width"));
        }
        Ok(InnerAttentionWeights {
            d,
            width,
            wq: store.add(format!("{prefix}/wq"), init.xavier(&[d, width], d, width))?,
            wk: store.add(format!("{prefix}/wk"), init.xavier(&[d, width], d, width))?,
            wv: store.add(format!("{prefix}/wv"), Tensor::zeros([d, d]))?,
            wo: store.add(format!("{prefix}/wo"), init.xavier(&[d, d], d, d))?,
        })
    }

    /// One inner module per head under `{prefix}/head<i>/inner`.
    pub fn per_head<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        prefix: &str,
        heads: usize,
        d: usize,
        width: usize,
    ) -> Result<Vec<Self>> {
        (0..heads)
            .map(|i| Self::new(store, init, &format!("{prefix}/head{i}/inner"), d, width))
            .collect()
    }
}

/// Attention output with the per-head pre-softmax maps `M_i`.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    pub maps: Vec<Var>,
}

/// `M = Q_bar K_bar^T / sqrt(C_h)` for one head.
pub fn attention_map<T: Real>(tape: &mut Tape<T>, q_bar: Var, k_bar: Var) -> Result<Var> {
    let ch = tape.shape(q_bar)[1];
    let kt = tape.transpose(k_bar)?;
    let m = tape.matmul(q_bar, kt)?;
    tape.scale(m, T::one() / T::lit(ch as f64).sqrt())
}

pub fn inner_attention<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    weights: &InnerAttentionWeights,
    m: Var,
) -> Result<Var> {
    let s = tape.shape(m).to_vec();
    if s.len() != 2 || s[0] != weights.d {
        return Err(Error::contract(format!(
            "inner attention built for map height {} got map {s:?}",
            weights.d
        )));
    }
    let x = tape.transpose(m)?;
    let wq = tape.param(store, weights.wq);
    let wk = tape.param(store, weights.wk);
    let wv = tape.param(store, weights.wv);
    let wo = tape.param(store, weights.wo);
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, T::one() / T::lit(weights.d as f64).sqrt())?;
    let a = tape.softmax(logits, 1)?;
    let o = tape.matmul(a, v)?;
    let proj = tape.matmul(o, wo)?;
    let y = tape.add(proj, o)?;
    tape.transpose(y)
}

fn check_inputs<T: Real>(tape: &Tape<T>, w: &AttentionWeights, q: Var, k: Var, v: Var) -> Result<()> {
    let (sq, sk, sv) = (tape.shape(q), tape.shape(k), tape.shape(v));
    let ok = sq.len() == 2
        && sk.len() == 2
        && sv.len() == 2
        && sq[1] == w.channels
        && sk[1] == w.channels
        && sv[1] == w.channels
        && sk[0] == sv[0];
    if !ok {
        return Err(Error::dim(format!(
            "attention with C={}: Q {sq:?}, K {sk:?}, V {sv:?}",
            w.channels
        )));
    }
    Ok(())
}

fn multi_head<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    w: &AttentionWeights,
    inner: Option<&[InnerAttentionWeights]>,
    q: Var,
    k: Var,
    v: Var,
) -> Result<AttentionOutput> {
    check_inputs(tape, w, q, k, v)?;
    if let Some(inner) = inner {
        if inner.len() != w.heads.len() {
            return Err(Error::contract(format!(
                "{} inner modules for {} heads",
                inner.len(),
                w.heads.len()
            )));
        }
    }
    let mut maps = Vec::with_capacity(w.heads.len());
    let mut output: Option<Var> = None;
    for (i, h) in w.heads.iter().enumerate() {
        let (wq, wk, wv, wo) = (
            tape.param(store, h.wq),
            tape.param(store, h.wk),
            tape.param(store, h.wv),
            tape.param(store, h.wo),
        );
        let qb = tape.matmul(q, wq)?;
        let kb = tape.matmul(k, wk)?;
        let vb = tape.matmul(v, wv)?;
        let m = attention_map(tape, qb, kb)?;
        maps.push(m);
        let logits = match inner {
            Some(inner) => {
                let r = inner_attention(tape, store, &inner[i], m)?;
                tape.add(m, r)?
            }
            None => m,
        };
        let a = tape.softmax(logits, 1)?;
        let head = tape.matmul(a, vb)?;
        let proj = tape.matmul(head, wo)?;
        output = Some(match output {
            Some(acc) => tape.add(acc, proj)?,
            None => proj,
        });
    }
    Ok(AttentionOutput {
        output: output.expect("at least one head"),
        maps,
    })
}

pub fn dot_product_attention<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    weights: &AttentionWeights,
    q: Var,
    k: Var,
    v: Var,
) -> Result<AttentionOutput> {
    multi_head(tape, store, weights, None, q, k, v)
}

pub fn aia_attention<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    weights: &AttentionWeights,
    inner: &[InnerAttentionWeights],
    q: Var,
    k: Var,
    v: Var,
) -> Result<AttentionOutput> {
    multi_head(tape, store, weights, Some(inner), q, k, v)
}
