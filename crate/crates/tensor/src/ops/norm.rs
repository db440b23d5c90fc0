use crate::error::{shape_err, Result, TensorError};
use crate::graph::{Graph, Var};
use crate::params::BufferId;
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

/// Maps (row, position in row) to the affine channel of a normalized row.
#[derive(Clone, Copy)]
enum ChannelMap {
    /// Row is one feature vector; channel = position.
    Features,
    /// Row is one (sample, group) slab of an NCHW tensor.
    Groups { groups: usize, per_group: usize, hw: usize },
}

impl ChannelMap {
    #[inline]
    fn channel(self, row: usize, j: usize) -> usize {
        match self {
            ChannelMap::Features => j,
            ChannelMap::Groups { groups, per_group, hw } => (row % groups) * per_group + j / hw,
        }
    }
}

/// Running statistics of a batch-norm layer.
#[derive(Debug, Clone, Copy)]
pub struct RunningStats {
    pub mean: BufferId,
    pub var: BufferId,
}

impl<'p, T: Scalar> Graph<'p, T> {
    #[allow(clippy::too_many_arguments)]
    fn normalize_rows(
        &self,
        op: &'static str,
        x: &Var<T>,
        row_len: usize,
        map: ChannelMap,
        gamma: &Var<T>,
        beta: &Var<T>,
        eps: f64,
    ) -> Result<Var<T>> {
        let rows = x.value().numel() / row_len.max(1);
        let eps: T = cast(eps);
        let inv_n = T::from_usize(row_len).expect("row length").recip();
        let xd = x.value().data();
        let (gd, bd) = (gamma.value().data(), beta.value().data());
        let mut xhat = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * row_len..(r + 1) * row_len];
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let inv = (var + eps).sqrt().recip();
            inv_std[r] = inv;
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * inv;
                let ch = map.channel(r, j);
                xhat[r * row_len + j] = xh;
                out[r * row_len + j] = gd[ch] * xh + bd[ch];
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let channels = gamma.value().numel();
        let ga = gamma.arc();
        let need_x = x.tracked();
        self.record(op, value, &[x, gamma, beta], move |g| {
            let gy = g.data();
            let gam = ga.data();
            let mut dgamma = vec![T::zero(); channels];
            let mut dbeta = vec![T::zero(); channels];
            let mut dx = if need_x { vec![T::zero(); gy.len()] } else { Vec::new() };
            let mut dxhat = vec![T::zero(); row_len];
            for r in 0..rows {
                let base = r * row_len;
                let mut mean_d = T::zero();
                let mut mean_dx = T::zero();
                for j in 0..row_len {
                    let ch = map.channel(r, j);
                    let gv = gy[base + j];
                    let xh = xhat[base + j];
                    dgamma[ch] += gv * xh;
                    dbeta[ch] += gv;
                    let d = gv * gam[ch];
                    dxhat[j] = d;
                    mean_d += d;
                    mean_dx += d * xh;
                }
                if need_x {
                    mean_d *= inv_n;
                    mean_dx *= inv_n;
                    let inv = inv_std[r];
                    for j in 0..row_len {
                        dx[base + j] = inv * (dxhat[j] - mean_d - xhat[base + j] * mean_dx);
                    }
                }
            }
            let shape_x = g.shape().to_vec();
            Ok(vec![
                need_x.then(|| Tensor::new(shape_x, dx).expect("dx shape")),
                Some(Tensor::new(vec![channels], dgamma)?),
                Some(Tensor::new(vec![channels], dbeta)?),
            ])
        })
    }

    /// Layer normalization over the last axis followed by a per-feature affine.
    pub fn layer_norm(&self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Result<Var<T>> {
        let Some(&d) = x.shape().last() else {
            return shape_err("layer_norm", "rank-0 input");
        };
        if gamma.shape() != [d] || beta.shape() != [d] {
            return shape_err(
                "layer_norm",
                format!("affine {:?}/{:?} for {d} features", gamma.shape(), beta.shape()),
            );
        }
        self.normalize_rows("layer_norm", x, d, ChannelMap::Features, gamma, beta, eps)
    }

    /// Group normalization of an NCHW tensor with per-channel affine.
    pub fn group_norm(
        &self,
        x: &Var<T>,
        groups: usize,
        gamma: &Var<T>,
        beta: &Var<T>,
        eps: f64,
    ) -> Result<Var<T>> {
        let [_, c, h, w] = *x.shape() else {
            return shape_err("group_norm", format!("expected NCHW, got {:?}", x.shape()));
        };
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::BadGroupCount { groups, channels: c });
        }
        if gamma.shape() != [c] || beta.shape() != [c] {
            return shape_err("group_norm", format!("affine {:?} for {c} channels", gamma.shape()));
        }
        let per_group = c / groups;
        let map = ChannelMap::Groups {
            groups,
            per_group,
            hw: h * w,
        };
        self.normalize_rows("group_norm", x, per_group * h * w, map, gamma, beta, eps)
    }

    /// Batch normalization of an NCHW tensor.
    ///
    /// With `batch_stats` the per-channel statistics of `x` are used and a
    /// running-statistic update is queued on the graph; otherwise the stored
    /// running statistics are applied as a fixed affine map.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        running: RunningStats,
        batch_stats: bool,
        momentum: f64,
        eps: f64,
    ) -> Result<Var<T>> {
        let [n, c, h, w] = *x.shape() else {
            return shape_err("batch_norm2d", format!("expected NCHW, got {:?}", x.shape()));
        };
        if gamma.shape() != [c] || beta.shape() != [c] {
            return shape_err("batch_norm2d", format!("affine {:?} for {c} channels", gamma.shape()));
        }
        let hw = h * w;
        let count = n * hw;
        let eps_t: T = cast(eps);
        let xd = x.value().data();
        let (gd, bd) = (gamma.value().data(), beta.value().data());
        let mut mean = vec![T::zero(); c];
        let mut inv_std = vec![T::zero(); c];
        if batch_stats {
            let inv_count = T::from_usize(count).expect("count").recip();
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for s_ix in 0..n {
                    s += xd[(s_ix * c + ch) * hw..(s_ix * c + ch + 1) * hw].iter().copied().sum::<T>();
                }
                mean[ch] = s * inv_count;
                let mut v = T::zero();
                for s_ix in 0..n {
                    for &x in &xd[(s_ix * c + ch) * hw..(s_ix * c + ch + 1) * hw] {
                        v += (x - mean[ch]) * (x - mean[ch]);
                    }
                }
                var[ch] = v * inv_count;
                inv_std[ch] = (var[ch] + eps_t).sqrt().recip();
            }
            let m: T = cast(momentum);
            let unbias = if count > 1 {
                T::from_usize(count).expect("count") / T::from_usize(count - 1).expect("count")
            } else {
                T::one()
            };
            let rm = self.buffer(running.mean);
            let rv = self.buffer(running.var);
            let new_mean = rm.zip_map(&Tensor::new(vec![c], mean.clone())?, |r, b| (T::one() - m) * r + m * b)?;
            let new_var = rv.zip_map(&Tensor::new(vec![c], var)?, |r, b| (T::one() - m) * r + m * b * unbias)?;
            self.push_buffer_update(running.mean, new_mean);
            self.push_buffer_update(running.var, new_var);
        } else {
            let rm = self.buffer(running.mean);
            let rv = self.buffer(running.var);
            if rm.shape() != [c] || rv.shape() != [c] {
                return shape_err("batch_norm2d", format!("running stats {:?} for {c} channels", rm.shape()));
            }
            for ch in 0..c {
                mean[ch] = rm.data()[ch];
                inv_std[ch] = (rv.data()[ch] + eps_t).sqrt().recip();
            }
        }
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for (i, (&v, (xh, o))) in xd.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let ch = (i / hw) % c;
            *xh = (v - mean[ch]) * inv_std[ch];
            *o = gd[ch] * *xh + bd[ch];
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let ga = gamma.arc();
        let need_x = x.tracked();
        self.record("batch_norm2d", value, &[x, gamma, beta], move |g| {
            let gy = g.data();
            let gam = ga.data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for (i, (&gv, &xh)) in gy.iter().zip(&xhat).enumerate() {
                let ch = (i / hw) % c;
                dgamma[ch] += gv * xh;
                dbeta[ch] += gv;
            }
            let dx = need_x.then(|| {
                let inv_count = T::from_usize(count).expect("count").recip();
                let data = gy
                    .iter()
                    .zip(&xhat)
                    .enumerate()
                    .map(|(i, (&gv, &xh))| {
                        let ch = (i / hw) % c;
                        let scale = gam[ch] * inv_std[ch];
                        if batch_stats {
                            scale * (gv - dbeta[ch] * inv_count - xh * dgamma[ch] * inv_count)
                        } else {
                            scale * gv
                        }
                    })
                    .collect();
                Tensor::new(g.shape().to_vec(), data).expect("dx shape")
            });
            Ok(vec![
                dx,
                Some(Tensor::new(vec![c], dgamma)?),
                Some(Tensor::new(vec![c], dbeta)?),
            ])
        })
    }
}
