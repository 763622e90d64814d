//! Three-branch transformer: a shared AiA self-attention encoder for the
//! initial, intermediate and search frames, then long-term (initial frame
//! plus memory) and short-term (intermediate frame) AiA cross-attention
//! from the search tokens, fused back to one token set.

use serde::{Deserialize, Serialize};

use crate::attention::{aia_attention, AttentionOutput, AttentionWeights, InnerAttentionWeights};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{FeedForward, Init, Linear, Norm};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub channels: usize,
    pub heads: usize,
    /// Query/key width of the inner attention.
    pub inner_width: usize,
    /// Token grid of every branch, `(h, w)`.
    pub grid: (usize, usize),
    pub ffn_hidden: usize,
}

impl TransformerConfig {
    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::contract(format!(
                "{} heads do not divide {} channels",
                self.heads, self.channels
            )));
        }
        if self.tokens() == 0 || self.inner_width == 0 || self.ffn_hidden == 0 {
            return Err(Error::contract(format!("degenerate transformer config {self:?}")));
        }
        Ok(())
    }
}

/// Fixed 2D sinusoidal encoding `[h*w, c]`: the first `c/2` channels
/// encode the row, the rest the column, as interleaved sin/cos pairs.
pub fn positional_encoding<T: Real>(h: usize, w: usize, c: usize) -> Tensor<T> {
    let half = c / 2;
    Tensor::from_fn([h * w, c], |i| {
        let (tok, ch) = (i / c, i % c);
        let (pos, j, n) = if ch < half {
            ((tok / w) as f64, ch, half)
        } else {
            ((tok % w) as f64, ch - half, c - half)
        };
        let freq = 10000f64.powf(-((2 * (j / 2)) as f64) / n as f64);
        let a = pos * freq;
        T::lit(if j % 2 == 0 { a.sin() } else { a.cos() })
    })
}

/// A reference branch: raw tokens `[N, C]` and its mask pooled to the token
/// grid `[N, 1]` with values in `[0, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct Reference {
    pub tokens: Var,
    pub mask: Var,
}

/// Average-pools an `[H, W]` mask onto an `(h, w)` grid, returned as
/// `[h*w, 1]`.
pub fn pool_mask<T: Real>(mask: &Tensor<T>, grid: (usize, usize)) -> Result<Tensor<T>> {
    let s = mask.shape();
    let (hh, ww) = match *s {
        [h, w] | [1, h, w] => (h, w),
        _ => return Err(Error::dim(format!("mask must be [H, W], got {s:?}"))),
    };
    let (h, w) = grid;
    if h == 0 || w == 0 || hh % h != 0 || ww % w != 0 {
        return Err(Error::dim(format!("mask {hh}x{ww} does not pool onto {h}x{w}")));
    }
    let (fy, fx) = (hh / h, ww / w);
    let norm = T::lit((fy * fx) as f64);
    Ok(Tensor::from_fn([h * w, 1], |t| {
        let (gy, gx) = (t / w, t % w);
        let mut acc = T::zero();
        for y in gy * fy..(gy + 1) * fy {
            for x in gx * fx..(gx + 1) * fx {
                acc += mask.data()[y * ww + x];
            }
        }
        acc / norm
    }))
}

#[derive(Clone, Debug)]
struct Block {
    attn: AttentionWeights,
    inner: Vec<InnerAttentionWeights>,
}

impl Block {
    fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, prefix: &str, cfg: &TransformerConfig) -> Result<Self> {
        let attn = AttentionWeights::new(store, init, prefix, cfg.channels, cfg.heads)?;
        let inner = InnerAttentionWeights::per_head(store, init, prefix, cfg.heads, cfg.tokens(), cfg.inner_width)?;
        Ok(Block { attn, inner })
    }
}

#[derive(Clone, Debug)]
pub struct Transformer {
    pub config: TransformerConfig,
    encoder: Block,
    enc_norm1: Norm,
    enc_ffn: FeedForward,
    enc_norm2: Norm,
    lt: Block,
    st: Block,
    fuse: Linear,
    fuse_norm: Norm,
    embed_fg: ParamId,
    embed_bg: ParamId,
}

impl Transformer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, config: TransformerConfig) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        Ok(Transformer {
            encoder: Block::new(store, init, "transformer/encoder", &config)?,
            enc_norm1: Norm::new(store, "transformer/encoder/norm1", &[1, c], 1)?,
            enc_ffn: FeedForward::new(store, init, "transformer/encoder/ffn", c, config.ffn_hidden)?,
            enc_norm2: Norm::new(store, "transformer/encoder/norm2", &[1, c], 1)?,
            lt: Block::new(store, init, "transformer/lt", &config)?,
            st: Block::new(store, init, "transformer/st", &config)?,
            fuse: Linear::new(store, init, "transformer/fuse", 2 * c, c, true)?,
            fuse_norm: Norm::new(store, "transformer/fuse/norm", &[1, c], 1)?,
            embed_fg: store.add("transformer/embed/fg", init.normal(&[1, c], 0.1))?,
            embed_bg: store.add("transformer/embed/bg", init.normal(&[1, c], 0.1))?,
            config,
        })
    }

    fn check_tokens<T: Real>(&self, tape: &Tape<T>, x: Var, what: &str) -> Result<()> {
        let want = [self.config.tokens(), self.config.channels];
        if tape.shape(x) != want {
            return Err(Error::dim(format!("{what}: tokens {:?}, expected {want:?}", tape.shape(x))));
        }
        Ok(())
    }

    fn pos<T: Real>(&self, tape: &mut Tape<T>) -> Var {
        let (h, w) = self.config.grid;
        tape.constant(positional_encoding(h, w, self.config.channels))
    }

    /// Shared-weight encoder: AiA self-attention with positions on queries
    /// and keys, then a feed-forward block, each with residual and norm.
    pub fn encode_branch<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, tokens: Var) -> Result<Var> {
        self.check_tokens(tape, tokens, "encode_branch")?;
        let pos = self.pos(tape);
        self.encode_with(tape, store, tokens, pos)
    }

    /// [`Self::encode_branch`] with an explicit positional encoding.
    pub fn encode_with<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, tokens: Var, pos: Var) -> Result<Var> {
        let qk = tape.add(tokens, pos)?;
        let a = aia_attention(tape, store, &self.encoder.attn, &self.encoder.inner, qk, qk, tokens)?;
        let x = tape.add(tokens, a.output)?;
        let x = self.enc_norm1.forward(tape, store, x)?;
        let f = self.enc_ffn.forward(tape, store, x)?;
        let x = tape.add(x, f)?;
        self.enc_norm2.forward(tape, store, x)
    }

    /// Encoded reference tokens tagged with the foreground/background
    /// embedding of their mask.
    pub fn encode_reference<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, r: Reference) -> Result<Var> {
        let x = self.encode_branch(tape, store, r.tokens)?;
        let fg = tape.param(store, self.embed_fg);
        let bg = tape.param(store, self.embed_bg);
        let inv = tape.scale(r.mask, -T::one())?;
        let inv = tape.add_scalar(inv, T::one())?;
        let a = tape.mul(r.mask, fg)?;
        let b = tape.mul(inv, bg)?;
        let x = tape.add(x, a)?;
        tape.add(x, b)
    }

    fn cross<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        block: &Block,
        search: Var,
        references: &[Var],
        pos: Var,
    ) -> Result<AttentionOutput> {
        if references.is_empty() {
            return Err(Error::contract("cross-attention needs at least one reference frame"));
        }
        let q = tape.add(search, pos)?;
        let mut keys = Vec::with_capacity(references.len());
        for &r in references {
            keys.push(tape.add(r, pos)?);
        }
        let k = tape.concat(&keys, 0)?;
        let v = tape.concat(references, 0)?;
        aia_attention(tape, store, &block.attn, &block.inner, q, k, v)
    }

    /// Long-term branch: keys/values are the initial frame followed by every
    /// memory entry, all already encoded.
    pub fn cross_attention_lt<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        search: Var,
        references: &[Var],
    ) -> Result<AttentionOutput> {
        let pos = self.pos(tape);
        self.cross(tape, store, &self.lt, search, references, pos)
    }

    pub fn cross_attention_st<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        search: Var,
        references: &[Var],
    ) -> Result<AttentionOutput> {
        let pos = self.pos(tape);
        self.cross(tape, store, &self.st, search, references, pos)
    }

    /// `norm(search + [lt, st] W_fuse + b)`.
    pub fn fuse<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, search: Var, lt: Var, st: Var) -> Result<Var> {
        let cat = tape.concat(&[lt, st], 1)?;
        let p = self.fuse.forward(tape, store, cat)?;
        let x = tape.add(search, p)?;
        self.fuse_norm.forward(tape, store, x)
    }

    /// Full transformer pass. Returns the fused search tokens `[N, C]`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        search: Var,
        initial: Reference,
        intermediate: Reference,
        memory: &[Reference],
    ) -> Result<Var> {
        let s = self.encode_branch(tape, store, search)?;
        let mut lt_refs = vec![self.encode_reference(tape, store, initial)?];
        for &m in memory {
            lt_refs.push(self.encode_reference(tape, store, m)?);
        }
        let st_ref = self.encode_reference(tape, store, intermediate)?;
        let lt = self.cross_attention_lt(tape, store, s, &lt_refs)?.output;
        let st = self.cross_attention_st(tape, store, s, &[st_ref])?.output;
        self.fuse(tape, store, s, lt, st)
    }
}
