//! Double-level fusion: class tokens from both pyramid ends, per-level
//! transformer encoders, and a single-query cross-attention exchange.

use hiformer_tensor::{Graph, Init, InitKind, ParamId, Result, Scalar, Var};

use crate::config::ModelConfig;
use crate::error::Error;
use crate::layers::{LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::swin::TokenMap;

/// Pre-norm transformer block with full self-attention.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, dim: usize, heads: usize, hidden: usize) -> Result<Self> {
        let mut s = init.sub(name);
        Ok(EncoderBlock {
            norm1: LayerNorm::new(&mut s, "norm1", dim)?,
            attn: MultiHeadAttention::new(&mut s, "attn", dim, heads)?,
            norm2: LayerNorm::new(&mut s, "norm2", dim)?,
            mlp: Mlp::new(&mut s, "mlp", dim, hidden)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let a = self.attn.forward(g, &self.norm1.forward(g, x)?, None, None)?;
        let x = g.add(x, &a)?;
        let m = self.mlp.forward(g, &self.norm2.forward(g, &x)?)?;
        g.add(&x, &m)
    }
}

/// Class token plus patch tokens of one level, `(N, 1 + N_t, D)` with the
/// class token first.
#[derive(Debug, Clone)]
pub struct LevelEmbedding<T: Scalar> {
    pub seq: Var<T>,
    pub grid: (usize, usize),
}

impl<T: Scalar> LevelEmbedding<T> {
    pub fn cls(&self, g: &Graph<'_, T>) -> Result<Var<T>> {
        g.narrow(&self.seq, 1, 0, 1)
    }

    pub fn tokens(&self, g: &Graph<'_, T>) -> Result<Var<T>> {
        g.narrow(&self.seq, 1, 1, self.seq.dim(1) - 1)
    }
}

/// Per-level state: class-token norm, position embedding, encoders.
#[derive(Debug, Clone)]
pub struct Level {
    pub cls_norm: LayerNorm,
    pub pos: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub dim: usize,
    pub tokens: usize,
}

impl Level {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        dim: usize,
        tokens: usize,
        depth: usize,
        heads: usize,
        hidden: usize,
    ) -> Result<Self> {
        let mut s = init.sub(name);
        let cls_norm = LayerNorm::new(&mut s, "cls_norm", dim)?;
        let pos = s.param("pos_embed", &[1, tokens + 1, dim], InitKind::Normal(0.02))?;
        let blocks = (0..depth)
            .map(|i| EncoderBlock::new(&mut s, &format!("block{i}"), dim, heads, hidden))
            .collect::<Result<Vec<_>>>()?;
        Ok(Level {
            cls_norm,
            pos,
            blocks,
            dim,
            tokens,
        })
    }

    /// `GAP(LN(tokens))`, shape `(N, 1, D)`.
    pub fn class_token<T: Scalar>(&self, g: &Graph<'_, T>, p: &TokenMap<T>) -> Result<Var<T>, Error> {
        if p.tokens.dim(1) == 0 {
            return Err(Error::EmptyTokens);
        }
        let normed = self.cls_norm.forward(g, &p.tokens)?;
        let mean = g.mean_axis(&normed, 1)?;
        Ok(g.reshape(&mean, &[p.batch(), 1, p.dim()])?)
    }

    /// Prepends the class token and adds the position embedding.
    pub fn embed<T: Scalar>(&self, g: &Graph<'_, T>, p: &TokenMap<T>) -> Result<LevelEmbedding<T>, Error> {
        if p.tokens.dim(1) != self.tokens || p.dim() != self.dim {
            return Err(hiformer_tensor::TensorError::ShapeMismatch {
                op: "level_embed",
                detail: format!(
                    "tokens {:?}, position embedding sized for {} tokens of dim {}",
                    p.tokens.shape(),
                    self.tokens,
                    self.dim
                ),
            }
            .into());
        }
        let cls = self.class_token(g, p)?;
        let seq = g.concat(&[&cls, &p.tokens], 1)?;
        let seq = g.add(&seq, &g.param(self.pos))?;
        Ok(LevelEmbedding { seq, grid: p.grid })
    }

    pub fn encode<T: Scalar>(&self, g: &Graph<'_, T>, e: &LevelEmbedding<T>) -> Result<LevelEmbedding<T>> {
        let mut x = e.seq.clone();
        for b in &self.blocks {
            x = b.forward(g, &x)?;
        }
        Ok(LevelEmbedding { seq: x, grid: e.grid })
    }
}

/// Single-query attention of one level's projected class token over the
/// other level.
#[derive(Debug, Clone)]
pub struct CrossDirection {
    /// Class token into the other level's dimension.
    pub f: Linear,
    /// Back to the own dimension.
    pub g: Linear,
    pub norm: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub proj: Linear,
    pub heads: usize,
    /// The other level's dimension, where attention happens.
    pub dim: usize,
}

/// Outputs of one cross direction.
#[derive(Debug, Clone)]
pub struct CrossOutput<T: Scalar> {
    /// `f(CLS)`, `(N, 1, D_other)`.
    pub projected_cls: Var<T>,
    /// `f(CLS) + MCA(LN([f(CLS) || other tokens]))`.
    pub y: Var<T>,
    /// `g(y)`, the replacement class token in the own dimension.
    pub cls: Var<T>,
}

impl CrossDirection {
    fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, own: usize, other: usize, heads: usize) -> Result<Self> {
        let mut s = init.sub(name);
        Ok(CrossDirection {
            f: Linear::new(&mut s, "f", own, other, true)?,
            g: Linear::new(&mut s, "g", other, own, true)?,
            norm: LayerNorm::new(&mut s, "norm", other)?,
            wq: Linear::new(&mut s, "q", other, other, true)?,
            wk: Linear::new(&mut s, "k", other, other, true)?,
            wv: Linear::new(&mut s, "v", other, other, true)?,
            proj: Linear::new(&mut s, "proj", other, other, true)?,
            heads,
            dim: other,
        })
    }

    /// `cls (N, 1, D_own)` against `other_tokens (N, N_t, D_other)`.
    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, cls: &Var<T>, other_tokens: &Var<T>) -> Result<CrossOutput<T>> {
        let n = cls.dim(0);
        let hd = self.dim / self.heads;
        let projected = self.f.forward(g, cls)?;
        let seq = g.concat(&[&projected, other_tokens], 1)?;
        let len = seq.dim(1);
        let normed = self.norm.forward(g, &seq)?;
        let heads = |x: Var<T>, rows: usize| -> Result<Var<T>> {
            let x = g.reshape(&x, &[n, rows, self.heads, hd])?;
            g.permute(&x, &[0, 2, 1, 3])
        };
        let q = heads(self.wq.forward(g, &g.narrow(&normed, 1, 0, 1)?)?, 1)?;
        let k = heads(self.wk.forward(g, &normed)?, len)?;
        let v = heads(self.wv.forward(g, &normed)?, len)?;
        let scale = T::from_f64_lossy((hd as f64).powf(-0.5));
        let o = g.attention(&q, &k, &v, None, None, scale)?;
        let o = g.reshape(&g.permute(&o, &[0, 2, 1, 3])?, &[n, 1, self.dim])?;
        let y = g.add(&projected, &self.proj.forward(g, &o)?)?;
        let back = self.g.forward(g, &y)?;
        Ok(CrossOutput {
            projected_cls: projected,
            y,
            cls: back,
        })
    }
}

/// Fused levels after the exchange (class tokens replaced).
#[derive(Debug, Clone)]
pub struct Fused<T: Scalar> {
    /// `[tokens of P^s || g_s(y_s)]`.
    pub small: LevelEmbedding<T>,
    /// `[tokens of P^l || g_l(y_l)]`.
    pub large: LevelEmbedding<T>,
    pub small_dir: CrossOutput<T>,
    pub large_dir: CrossOutput<T>,
}

/// Recalibrated maps passed to the decoder.
#[derive(Debug, Clone)]
pub struct DlfOutput<T: Scalar> {
    /// `(N, 4D', H/16, W/16)`.
    pub small: Var<T>,
    /// `(N, D', H/4, W/4)`.
    pub large: Var<T>,
}

#[derive(Debug, Clone)]
pub struct Dlf {
    pub small: Level,
    pub large: Level,
    pub cross_small: CrossDirection,
    pub cross_large: CrossDirection,
}

impl Dlf {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let d = &cfg.dlf;
        let (gs, gl) = (cfg.stage_grid(2), cfg.stage_grid(0));
        let mut s = init.sub("dlf");
        Ok(Dlf {
            small: Level::new(
                &mut s,
                "small",
                d.dim_small,
                gs.0 * gs.1,
                d.depth_small,
                d.heads_small(),
                d.mlp_hidden(d.dim_small),
            )?,
            large: Level::new(
                &mut s,
                "large",
                d.dim_large,
                gl.0 * gl.1,
                d.depth_large,
                d.heads_large(),
                d.mlp_hidden(d.dim_large),
            )?,
            cross_small: CrossDirection::new(&mut s, "cross_small", d.dim_small, d.dim_large, d.heads_large())?,
            cross_large: CrossDirection::new(&mut s, "cross_large", d.dim_large, d.dim_small, d.heads_small())?,
        })
    }

    /// Swaps class-token information between the encoded levels. The patch
    /// tokens pass through unchanged.
    pub fn cross_fuse<T: Scalar>(
        &self,
        g: &Graph<'_, T>,
        small: &LevelEmbedding<T>,
        large: &LevelEmbedding<T>,
    ) -> Result<Fused<T>> {
        let (ts, tl) = (small.tokens(g)?, large.tokens(g)?);
        let small_dir = self.cross_small.forward(g, &small.cls(g)?, &tl)?;
        let large_dir = self.cross_large.forward(g, &large.cls(g)?, &ts)?;
        Ok(Fused {
            small: LevelEmbedding {
                seq: g.concat(&[&ts, &small_dir.cls], 1)?,
                grid: small.grid,
            },
            large: LevelEmbedding {
                seq: g.concat(&[&tl, &large_dir.cls], 1)?,
                grid: large.grid,
            },
            small_dir,
            large_dir,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<'_, T>,
        large: &TokenMap<T>,
        small: &TokenMap<T>,
    ) -> Result<DlfOutput<T>, Error> {
        let es = self.small.encode(g, &self.small.embed(g, small)?)?;
        let el = self.large.encode(g, &self.large.embed(g, large)?)?;
        let fused = self.cross_fuse(g, &es, &el)?;
        let to_map = |e: &LevelEmbedding<T>| -> Result<Var<T>> {
            let n = e.seq.dim(1) - 1;
            let tokens = g.narrow(&e.seq, 1, 0, n)?;
            TokenMap { tokens, grid: e.grid }.to_nchw(g)
        };
        Ok(DlfOutput {
            small: to_map(&fused.small)?,
            large: to_map(&fused.large)?,
        })
    }

    /// Bypass used when fusion is disabled.
    pub fn bypass<T: Scalar>(g: &Graph<'_, T>, large: &TokenMap<T>, small: &TokenMap<T>) -> Result<DlfOutput<T>> {
        Ok(DlfOutput {
            small: small.to_nchw(g)?,
            large: large.to_nchw(g)?,
        })
    }
}
