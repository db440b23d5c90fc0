//! Parameterized building blocks shared by the network modules.

use hiformer_tensor::{Graph, Init, InitKind, ParamId, Result, RunningStats, Scalar, Tensor, Var};

/// Weight init for convolutions and linear maps.
pub const WEIGHT_INIT: InitKind = InitKind::TruncNormal(0.02);
pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        let mut s = init.sub(name);
        let weight = s.param("weight", &[cout, cin, kernel, kernel], WEIGHT_INIT)?;
        let bias = if bias { Some(s.param("bias", &[cout], InitKind::Zeros)?) } else { None };
        Ok(Conv2d { weight, bias, stride, pad })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, &g.param(self.weight), b.as_ref(), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, din: usize, dout: usize, bias: bool) -> Result<Self> {
        let mut s = init.sub(name);
        let weight = s.param("weight", &[din, dout], WEIGHT_INIT)?;
        let bias = if bias { Some(s.param("bias", &[dout], InitKind::Zeros)?) } else { None };
        Ok(Linear { weight, bias })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, &g.param(self.weight), b.as_ref())
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, dim: usize) -> Result<Self> {
        let mut s = init.sub(name);
        Ok(LayerNorm {
            gamma: s.param("weight", &[dim], InitKind::Ones)?,
            beta: s.param("bias", &[dim], InitKind::Zeros)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        g.layer_norm(x, &g.param(self.gamma), &g.param(self.beta), NORM_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

/// Largest divisor of `channels` that does not exceed 32.
pub fn group_count(channels: usize) -> usize {
    (1..=channels.min(32)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

impl GroupNorm {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, channels: usize) -> Result<Self> {
        let mut s = init.sub(name);
        Ok(GroupNorm {
            gamma: s.param("weight", &[channels], InitKind::Ones)?,
            beta: s.param("bias", &[channels], InitKind::Zeros)?,
            groups: group_count(channels),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        g.group_norm(x, self.groups, &g.param(self.gamma), &g.param(self.beta), NORM_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: RunningStats,
    /// Use running statistics even in training mode.
    pub frozen: bool,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, channels: usize, frozen: bool, zero_gamma: bool) -> Result<Self> {
        let mut s = init.sub(name);
        let gamma_init = if zero_gamma { InitKind::Zeros } else { InitKind::Ones };
        Ok(BatchNorm2d {
            gamma: s.param("weight", &[channels], gamma_init)?,
            beta: s.param("bias", &[channels], InitKind::Zeros)?,
            stats: RunningStats {
                mean: s.buffer("running_mean", Tensor::zeros(vec![channels]))?,
                var: s.buffer("running_var", Tensor::ones(vec![channels]))?,
            },
            frozen,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let batch_stats = g.is_training() && !self.frozen;
        g.batch_norm2d(
            x,
            &g.param(self.gamma),
            &g.param(self.beta),
            self.stats,
            batch_stats,
            BN_MOMENTUM,
            NORM_EPS,
        )
    }
}

/// Two-layer perceptron with GELU.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        let mut s = init.sub(name);
        Ok(Mlp {
            fc1: Linear::new(&mut s, "fc1", dim, hidden, true)?,
            fc2: Linear::new(&mut s, "fc2", hidden, dim, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let h = g.gelu(&self.fc1.forward(g, x)?)?;
        self.fc2.forward(g, &h)
    }
}

/// Multi-head self-attention over a token sequence, with optional learned
/// relative bias and additive mask supplied by the caller.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        let mut s = init.sub(name);
        Ok(MultiHeadAttention {
            qkv: Linear::new(&mut s, "qkv", dim, 3 * dim, true)?,
            proj: Linear::new(&mut s, "proj", dim, dim, true)?,
            heads,
            dim,
        })
    }

    /// Queries, keys and values `(B, heads, N, D / heads)`.
    pub fn split_qkv<T: Scalar>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<[Var<T>; 3]> {
        let (b, n) = (x.dim(0), x.dim(1));
        let hd = self.dim / self.heads;
        let qkv = self.qkv.forward(g, x)?;
        let qkv = g.reshape(&qkv, &[b, n, 3, self.heads, hd])?;
        let qkv = g.permute(&qkv, &[2, 0, 3, 1, 4])?;
        let part = |i: usize| -> Result<Var<T>> {
            let t = g.narrow(&qkv, 0, i, 1)?;
            g.reshape(&t, &[b, self.heads, n, hd])
        };
        Ok([part(0)?, part(1)?, part(2)?])
    }

    pub fn scale<T: Scalar>(&self) -> T {
        T::from_f64_lossy(((self.dim / self.heads) as f64).powf(-0.5))
    }

    /// `x (B, N, D)` to `(B, N, D)`.
    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<'_, T>,
        x: &Var<T>,
        bias: Option<&Var<T>>,
        mask: Option<std::sync::Arc<Tensor<T>>>,
    ) -> Result<Var<T>> {
        let (b, n) = (x.dim(0), x.dim(1));
        let [q, k, v] = self.split_qkv(g, x)?;
        let o = g.attention(&q, &k, &v, bias, mask, self.scale())?;
        let o = g.reshape(&g.permute(&o, &[0, 2, 1, 3])?, &[b, n, self.dim])?;
        self.proj.forward(g, &o)
    }

    /// Attention probabilities `(B, heads, N, N)` of [`Self::forward`].
    pub fn probabilities<T: Scalar>(
        &self,
        g: &Graph<'_, T>,
        x: &Var<T>,
        bias: Option<&Var<T>>,
        mask: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let [q, k, _] = self.split_qkv(g, x)?;
        hiformer_tensor::attention_probabilities(q.value(), k.value(), bias.map(|b| b.value()), mask, self.scale())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_count_falls_back_to_divisors() {
        assert_eq!(group_count(96), 32);
        assert_eq!(group_count(8), 8);
        assert_eq!(group_count(48), 24);
        assert_eq!(group_count(1), 1);
    }
}
