//! Shifted-window transformer trunk with CNN skip fusion.

use std::sync::Arc;

use hiformer_tensor::{Graph, Init, InitKind, ParamId, Result, Scalar, Tensor, TensorError, Var};

use crate::config::ModelConfig;
use crate::error::Error;
use crate::layers::{LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::cnn::SkipProjections;

/// Additive mask value separating tokens of different shift regions.
pub const MASK_NEG: f64 = -1e9;

/// Token sequences with their spatial grid.
#[derive(Debug, Clone)]
pub struct TokenMap<T: Scalar> {
    /// `(N, H_g * W_g, D)`.
    pub tokens: Var<T>,
    pub grid: (usize, usize),
}

impl<T: Scalar> TokenMap<T> {
    pub fn dim(&self) -> usize {
        self.tokens.dim(2)
    }

    pub fn batch(&self) -> usize {
        self.tokens.dim(0)
    }

    /// `(N, C, H, W)` to tokens, row-major over the grid.
    pub fn from_nchw(g: &Graph<'_, T>, x: &Var<T>) -> Result<Self> {
        let [n, c, h, w] = *x.shape() else {
            return Err(TensorError::ShapeMismatch {
                op: "to_tokens",
                detail: format!("expected NCHW, got {:?}", x.shape()),
            });
        };
        let t = g.permute(&g.reshape(x, &[n, c, h * w])?, &[0, 2, 1])?;
        Ok(TokenMap { tokens: t, grid: (h, w) })
    }

    pub fn to_nchw(&self, g: &Graph<'_, T>) -> Result<Var<T>> {
        let (n, d) = (self.batch(), self.dim());
        let t = g.permute(&self.tokens, &[0, 2, 1])?;
        g.reshape(&t, &[n, d, self.grid.0, self.grid.1])
    }
}

fn check_divisible(grid: (usize, usize), window: usize) -> Result<(), Error> {
    if window == 0 || grid.0 % window != 0 || grid.1 % window != 0 {
        return Err(Error::IndivisibleGrid {
            h: grid.0,
            w: grid.1,
            window,
        });
    }
    Ok(())
}

/// `(N, H*W, D)` on grid `(H, W)` to `(N * nW, M*M, D)`, windows in row-major
/// order within each sample.
pub fn window_partition<T: Scalar>(
    g: &Graph<'_, T>,
    tokens: &Var<T>,
    grid: (usize, usize),
    m: usize,
) -> Result<Var<T>, Error> {
    check_divisible(grid, m)?;
    let (n, d) = (tokens.dim(0), tokens.dim(2));
    let (h, w) = grid;
    let x = g.reshape(tokens, &[n, h / m, m, w / m, m, d])?;
    let x = g.permute(&x, &[0, 1, 3, 2, 4, 5])?;
    Ok(g.reshape(&x, &[n * (h / m) * (w / m), m * m, d])?)
}

/// Inverse of [`window_partition`].
pub fn window_reverse<T: Scalar>(
    g: &Graph<'_, T>,
    windows: &Var<T>,
    grid: (usize, usize),
    m: usize,
) -> Result<Var<T>, Error> {
    check_divisible(grid, m)?;
    let (h, w) = grid;
    let nw = (h / m) * (w / m);
    let d = windows.dim(2);
    let n = windows.dim(0) / nw;
    let x = g.reshape(windows, &[n, h / m, w / m, m, m, d])?;
    let x = g.permute(&x, &[0, 1, 3, 2, 4, 5])?;
    Ok(g.reshape(&x, &[n, h * w, d])?)
}

/// Region id of every grid cell for a cyclic shift of `shift`: each axis is
/// cut at `len - m` and `len - shift`.
pub fn shift_regions(grid: (usize, usize), m: usize, shift: usize) -> Vec<usize> {
    let band = |i: usize, len: usize| {
        if i < len - m {
            0
        } else if i < len - shift {
            1
        } else {
            2
        }
    };
    let (h, w) = grid;
    let mut ids = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            ids.push(3 * band(i, h) + band(j, w));
        }
    }
    ids
}

/// Additive `(nW, M*M, M*M)` mask for attention on the shifted grid: 0 where
/// both tokens come from the same region, `MASK_NEG` otherwise.
pub fn shifted_window_mask<T: Scalar>(grid: (usize, usize), m: usize, shift: usize) -> Tensor<T> {
    let ids = shift_regions(grid, m, shift);
    let (h, w) = grid;
    let (wh, ww) = (h / m, w / m);
    let n = m * m;
    let mut data = vec![T::zero(); wh * ww * n * n];
    let neg = T::from_f64_lossy(MASK_NEG);
    for wi in 0..wh {
        for wj in 0..ww {
            let win = wi * ww + wj;
            let region: Vec<usize> = (0..n).map(|t| ids[(wi * m + t / m) * w + wj * m + t % m]).collect();
            for a in 0..n {
                for b in 0..n {
                    if region[a] != region[b] {
                        data[(win * n + a) * n + b] = neg;
                    }
                }
            }
        }
    }
    Tensor::new(vec![wh * ww, n, n], data).expect("mask shape")
}

/// Index into the `(2M-1)^2` bias table for every (query, key) pair of a
/// window.
pub fn relative_position_index(m: usize) -> Vec<usize> {
    let n = m * m;
    let mut idx = Vec::with_capacity(n * n);
    for a in 0..n {
        for b in 0..n {
            let dy = (a / m) as isize - (b / m) as isize + m as isize - 1;
            let dx = (a % m) as isize - (b % m) as isize + m as isize - 1;
            idx.push(dy as usize * (2 * m - 1) + dx as usize);
        }
    }
    idx
}

/// Window attention with a learned relative position bias.
#[derive(Debug, Clone)]
pub struct WindowAttention {
    pub mha: MultiHeadAttention,
    pub bias_table: ParamId,
    pub window: usize,
    rel_index: Arc<Vec<usize>>,
}

impl WindowAttention {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, dim: usize, heads: usize, window: usize) -> Result<Self> {
        let mha = MultiHeadAttention::new(init, name, dim, heads)?;
        let mut s = init.sub(name);
        let bias_table = s.param(
            "relative_position_bias_table",
            &[(2 * window - 1) * (2 * window - 1), heads],
            InitKind::TruncNormal(0.02),
        )?;
        Ok(WindowAttention {
            mha,
            bias_table,
            window,
            rel_index: Arc::new(relative_position_index(window)),
        })
    }

    /// `(heads, M*M, M*M)` bias gathered from the table.
    pub fn bias<T: Scalar>(&self, g: &Graph<'_, T>) -> Result<Var<T>> {
        let n = self.window * self.window;
        let b = g.index_select(&g.param(self.bias_table), &self.rel_index)?;
        let b = g.reshape(&b, &[n, n, self.mha.heads])?;
        g.permute(&b, &[2, 0, 1])
    }

    /// Attention inside each window of `windows (N * nW, M*M, D)`.
    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<'_, T>,
        windows: &Var<T>,
        mask: Option<Arc<Tensor<T>>>,
    ) -> Result<Var<T>> {
        let bias = self.bias(g)?;
        self.mha.forward(g, windows, Some(&bias), mask)
    }
}

/// One transformer block; `shift > 0` makes it the shifted-window variant.
#[derive(Debug, Clone)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub shift: usize,
}

impl SwinBlock {
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        shift: usize,
    ) -> Result<Self> {
        let mut s = init.sub(name);
        Ok(SwinBlock {
            norm1: LayerNorm::new(&mut s, "norm1", dim)?,
            attn: WindowAttention::new(&mut s, "attn", dim, heads, window)?,
            norm2: LayerNorm::new(&mut s, "norm2", dim)?,
            mlp: Mlp::new(&mut s, "mlp", dim, 4 * dim)?,
            shift,
        })
    }

    fn roll_grid<T: Scalar>(&self, g: &Graph<'_, T>, tokens: &Var<T>, grid: (usize, usize), by: isize) -> Result<Var<T>> {
        let (n, d) = (tokens.dim(0), tokens.dim(2));
        let x = g.reshape(tokens, &[n, grid.0, grid.1, d])?;
        let r = g.roll(&g.roll(&x, 1, by)?, 2, by)?;
        g.reshape(&r, &[n, grid.0 * grid.1, d])
    }

    /// Windows of the (shifted) normalized input and the matching mask.
    fn windows<T: Scalar>(&self, g: &Graph<'_, T>, x: &TokenMap<T>) -> Result<(Var<T>, Option<Tensor<T>>), Error> {
        let m = self.attn.window;
        check_divisible(x.grid, m)?;
        let normed = self.norm1.forward(g, &x.tokens)?;
        let shifted = if self.shift > 0 {
            self.roll_grid(g, &normed, x.grid, -(self.shift as isize))?
        } else {
            normed
        };
        let mask = (self.shift > 0).then(|| shifted_window_mask::<T>(x.grid, m, self.shift));
        Ok((window_partition(g, &shifted, x.grid, m)?, mask))
    }

    /// (Shifted) window attention of `LN(x)`, without the residual.
    pub fn attention<T: Scalar>(&self, g: &Graph<'_, T>, x: &TokenMap<T>) -> Result<Var<T>, Error> {
        let (windows, mask) = self.windows(g, x)?;
        let out = self.attn.forward(g, &windows, mask.map(Arc::new))?;
        let merged = window_reverse(g, &out, x.grid, self.attn.window)?;
        Ok(if self.shift > 0 {
            self.roll_grid(g, &merged, x.grid, self.shift as isize)?
        } else {
            merged
        })
    }

    /// Attention probabilities `(N * nW, heads, M*M, M*M)` over the (shifted)
    /// windows and, when shifted, the region id of every windowed token of
    /// one sample.
    pub fn attention_probabilities<T: Scalar>(
        &self,
        g: &Graph<'_, T>,
        x: &TokenMap<T>,
    ) -> Result<(Tensor<T>, Option<Vec<usize>>), Error> {
        let (windows, mask) = self.windows(g, x)?;
        let bias = self.attn.bias(g)?;
        let probs = self.attn.mha.probabilities(g, &windows, Some(&bias), mask.as_ref())?;
        let (m, (h, w)) = (self.attn.window, x.grid);
        let regions = (self.shift > 0).then(|| {
            let ids = shift_regions(x.grid, m, self.shift);
            let mut out = Vec::with_capacity(h * w);
            for wi in 0..h / m {
                for wj in 0..w / m {
                    for t in 0..m * m {
                        out.push(ids[(wi * m + t / m) * w + wj * m + t % m]);
                    }
                }
            }
            out
        });
        Ok((probs, regions))
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: &TokenMap<T>) -> Result<TokenMap<T>, Error> {
        let a = self.attention(g, x)?;
        let x1 = g.add(&x.tokens, &a)?;
        let m = self.mlp.forward(g, &self.norm2.forward(g, &x1)?)?;
        let x2 = g.add(&x1, &m)?;
        Ok(TokenMap { tokens: x2, grid: x.grid })
    }
}

/// Shift used by the odd blocks of a stage: half a window, or none when the
/// grid is a single window.
pub fn shift_for(grid: (usize, usize), window: usize) -> usize {
    if grid.0 <= window && grid.1 <= window {
        0
    } else {
        window / 2
    }
}

/// 2x2 neighbourhood concat, LayerNorm, and a `4D -> 2D` linear map.
#[derive(Debug, Clone)]
pub struct PatchMerging {
    pub norm: LayerNorm,
    pub reduction: Linear,
}

impl PatchMerging {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, dim: usize) -> Result<Self> {
        let mut s = init.sub(name);
        Ok(PatchMerging {
            norm: LayerNorm::new(&mut s, "norm", 4 * dim)?,
            reduction: Linear::new(&mut s, "reduction", 4 * dim, 2 * dim, false)?,
        })
    }

    /// The `(N, H/2 * W/2, 4D)` concat, ordered (even row, even col),
    /// (odd, even), (even, odd), (odd, odd).
    pub fn gather<T: Scalar>(g: &Graph<'_, T>, x: &TokenMap<T>) -> Result<Var<T>, Error> {
        let (h, w) = x.grid;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::OddGrid { h, w });
        }
        let (n, d) = (x.batch(), x.dim());
        let t = g.reshape(&x.tokens, &[n, h / 2, 2, w / 2, 2, d])?;
        let t = g.permute(&t, &[0, 1, 3, 4, 2, 5])?;
        Ok(g.reshape(&t, &[n, (h / 2) * (w / 2), 4 * d])?)
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: &TokenMap<T>) -> Result<TokenMap<T>, Error> {
        let cat = Self::gather(g, x)?;
        let y = self.reduction.forward(g, &self.norm.forward(g, &cat)?)?;
        Ok(TokenMap {
            tokens: y,
            grid: (x.grid.0 / 2, x.grid.1 / 2),
        })
    }
}

#[derive(Debug, Clone)]
pub struct SwinStage {
    pub blocks: Vec<SwinBlock>,
}

impl SwinStage {
    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: &TokenMap<T>) -> Result<TokenMap<T>, Error> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(g, &h)?;
        }
        Ok(h)
    }
}

/// Outputs of the trunk: the shallow and deep token maps.
#[derive(Debug, Clone)]
pub struct TrunkOutput<T: Scalar> {
    /// Stride-4 tokens, dimension `D'`.
    pub large: TokenMap<T>,
    /// Stride-16 tokens, dimension `4 D'`.
    pub small: TokenMap<T>,
}

/// Three stages joined by patch merging, each fed by a CNN skip.
#[derive(Debug, Clone)]
pub struct SwinTrunk {
    pub stages: [SwinStage; 3],
    pub merges: [PatchMerging; 2],
}

impl SwinTrunk {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let mut s = init.sub("swin");
        let mut stages = Vec::with_capacity(3);
        for i in 0..3 {
            let dim = cfg.stage_dim(i);
            let shift = shift_for(cfg.stage_grid(i), cfg.window_size);
            let mut st = s.sub(&format!("stage{i}"));
            let blocks = (0..cfg.stage_depths[i])
                .map(|b| {
                    let sh = if b % 2 == 1 { shift } else { 0 };
                    SwinBlock::new(&mut st, &format!("block{b}"), dim, cfg.stage_heads[i], cfg.window_size, sh)
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(SwinStage { blocks });
        }
        let merges = [
            PatchMerging::new(&mut s, "merge1", cfg.stage_dim(0))?,
            PatchMerging::new(&mut s, "merge2", cfg.stage_dim(1))?,
        ];
        let stages: [SwinStage; 3] = stages.try_into().expect("three stages");
        Ok(SwinTrunk { stages, merges })
    }

    /// `P^l = S1(t0) + t0`, `x2 = merge(P^l) + C2`, `m2 = S2(x2) + x2`,
    /// `x3 = merge(m2) + C3`, `P^s = S3(x3) + x3`.
    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, skips: &SkipProjections<T>) -> Result<TrunkOutput<T>, Error> {
        let t0 = TokenMap::from_nchw(g, &skips.levels[0])?;
        let s1 = self.stages[0].forward(g, &t0)?;
        let pl = TokenMap {
            tokens: g.add(&s1.tokens, &t0.tokens)?,
            grid: t0.grid,
        };
        let x2 = self.fuse(g, &self.merges[0].forward(g, &pl)?, &skips.levels[1])?;
        let s2 = self.stages[1].forward(g, &x2)?;
        let m2 = TokenMap {
            tokens: g.add(&s2.tokens, &x2.tokens)?,
            grid: x2.grid,
        };
        let x3 = self.fuse(g, &self.merges[1].forward(g, &m2)?, &skips.levels[2])?;
        let s3 = self.stages[2].forward(g, &x3)?;
        let ps = TokenMap {
            tokens: g.add(&s3.tokens, &x3.tokens)?,
            grid: x3.grid,
        };
        Ok(TrunkOutput { large: pl, small: ps })
    }

    fn fuse<T: Scalar>(&self, g: &Graph<'_, T>, merged: &TokenMap<T>, skip: &Var<T>) -> Result<TokenMap<T>, Error> {
        let c = TokenMap::from_nchw(g, skip)?;
        if c.grid != merged.grid || c.dim() != merged.dim() {
            return Err(TensorError::ShapeMismatch {
                op: "skip_fusion",
                detail: format!(
                    "skip {:?}x{} vs merged {:?}x{}",
                    c.grid,
                    c.dim(),
                    merged.grid,
                    merged.dim()
                ),
            }
            .into());
        }
        Ok(TokenMap {
            tokens: g.add(&merged.tokens, &c.tokens)?,
            grid: merged.grid,
        })
    }
}
