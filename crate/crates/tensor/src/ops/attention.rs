//! Fused scaled-dot-product attention.
//!
//! Scores are formed one (batch, head) slice at a time and recomputed in the
//! backward pass, so peak memory is a single `Nq x Nk` score matrix.

use std::sync::Arc;

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{gemm, softmax_row, MatRef};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

struct Dims {
    heads: usize,
    nq: usize,
    nk: usize,
    d: usize,
    masks: usize,
}

/// Attention probabilities of slice `(b, h)` written into `probs`.
#[allow(clippy::too_many_arguments)]
fn slice_probs<T: Scalar>(
    dims: &Dims,
    b: usize,
    h: usize,
    q: &[T],
    k: &[T],
    bias: Option<&[T]>,
    mask: Option<&[T]>,
    scale: T,
    probs: &mut [T],
) {
    let bh = b * dims.heads + h;
    let qs = &q[bh * dims.nq * dims.d..(bh + 1) * dims.nq * dims.d];
    let ks = &k[bh * dims.nk * dims.d..(bh + 1) * dims.nk * dims.d];
    gemm(
        scale,
        MatRef::row_major(qs, dims.nq, dims.d),
        MatRef::row_major(ks, dims.nk, dims.d).t(),
        T::zero(),
        probs,
    );
    let plane = dims.nq * dims.nk;
    if let Some(bias) = bias {
        for (p, &bv) in probs.iter_mut().zip(&bias[h * plane..(h + 1) * plane]) {
            *p += bv;
        }
    }
    if let Some(mask) = mask {
        let m = b % dims.masks;
        for (p, &mv) in probs.iter_mut().zip(&mask[m * plane..(m + 1) * plane]) {
            *p += mv;
        }
    }
    for row in probs.chunks_mut(dims.nk) {
        softmax_row(row);
    }
}

/// Attention probabilities `(B, H, Nq, Nk)` of [`Graph::attention`] for the
/// same arguments, computed by the same kernel (no graph, no gradients).
pub fn attention_probabilities<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    mask: Option<&Tensor<T>>,
    scale: T,
) -> Result<Tensor<T>> {
    let (Ok([b, h, nq, d]), Ok([kb, kh, nk, kd])) =
        (<[usize; 4]>::try_from(q.shape()), <[usize; 4]>::try_from(k.shape()))
    else {
        return shape_err("attention_probabilities", "q and k must be rank 4");
    };
    if (kb, kh, kd) != (b, h, d) || nk == 0 {
        return shape_err("attention_probabilities", format!("q {:?}, k {:?}", q.shape(), k.shape()));
    }
    if bias.is_some_and(|x| x.shape() != [h, nq, nk]) {
        return shape_err("attention_probabilities", "bias shape");
    }
    let masks = match mask.map(|m| m.shape()) {
        Some(&[mm, mq, mk]) if mq == nq && mk == nk && mm > 0 && b % mm == 0 => mm,
        Some(s) => return shape_err("attention_probabilities", format!("mask {s:?} for batch {b}")),
        None => 1,
    };
    let dims = Dims { heads: h, nq, nk, d, masks };
    let plane = nq * nk;
    let mut out = vec![T::zero(); b * h * plane];
    for bi in 0..b {
        for hi in 0..h {
            let bh = bi * h + hi;
            slice_probs(
                &dims,
                bi,
                hi,
                q.data(),
                k.data(),
                bias.map(|x| x.data()),
                mask.map(|m| m.data()),
                scale,
                &mut out[bh * plane..(bh + 1) * plane],
            );
        }
    }
    Tensor::new(vec![b, h, nq, nk], out)
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// `softmax(scale * q k^T + bias[h] + mask[b mod M]) v` per batch and head.
    ///
    /// Shapes: `q (B, H, Nq, d)`, `k (B, H, Nk, d)`, `v (B, H, Nk, dv)`,
    /// `bias (H, Nq, Nk)` (learnable), `mask (M, Nq, Nk)` (constant, additive).
    /// Each call adds `B * H * Nq * Nk` to the graph's score-entry counter.
    pub fn attention(
        &self,
        q: &Var<T>,
        k: &Var<T>,
        v: &Var<T>,
        bias: Option<&Var<T>>,
        mask: Option<Arc<Tensor<T>>>,
        scale: T,
    ) -> Result<Var<T>> {
        let (Ok([b, h, nq, d]), Ok([kb, kh, nk, kd]), Ok([vb, vh, vn, dv])) = (
            <[usize; 4]>::try_from(q.shape()),
            <[usize; 4]>::try_from(k.shape()),
            <[usize; 4]>::try_from(v.shape()),
        ) else {
            return shape_err("attention", "q, k and v must be rank 4");
        };
        if (kb, kh, kd) != (b, h, d)
            || (vb, vh, vn) != (b, h, nk)
            || nk == 0
        {
            return shape_err(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
            );
        }
        if let Some(bias) = bias {
            if bias.shape() != [h, nq, nk] {
                return shape_err("attention", format!("bias {:?} for {h}x{nq}x{nk}", bias.shape()));
            }
        }
        let masks = match &mask {
            Some(m) => match *m.shape() {
                [mm, mq, mk] if mq == nq && mk == nk && mm > 0 && b % mm == 0 => mm,
                ref s => return shape_err("attention", format!("mask {s:?} for batch {b}")),
            },
            None => 1,
        };
        let dims = Dims {
            heads: h,
            nq,
            nk,
            d,
            masks,
        };
        self.count_attention((b * h * nq * nk) as u64, nq as u64);

        let plane = nq * nk;
        let mut probs = vec![T::zero(); plane];
        let mut out = vec![T::zero(); b * h * nq * dv];
        let (qd, kd_, vd) = (q.value().data(), k.value().data(), v.value().data());
        let bias_data = bias.map(|x| x.value().data());
        let mask_data = mask.as_ref().map(|m| m.data());
        for bi in 0..b {
            for hi in 0..h {
                slice_probs(&dims, bi, hi, qd, kd_, bias_data, mask_data, scale, &mut probs);
                let bh = bi * h + hi;
                gemm(
                    T::one(),
                    MatRef::row_major(&probs, nq, nk),
                    MatRef::row_major(&vd[bh * nk * dv..(bh + 1) * nk * dv], nk, dv),
                    T::zero(),
                    &mut out[bh * nq * dv..(bh + 1) * nq * dv],
                );
            }
        }
        let value = Tensor::new(vec![b, h, nq, dv], out)?;

        let (qa, ka, va) = (q.arc(), k.arc(), v.arc());
        let ba = bias.map(|x| x.arc());
        let need = [q.tracked(), k.tracked(), v.tracked()];
        let need_bias = bias.map(|x| x.tracked()).unwrap_or(false);
        let mut parents = vec![q, k, v];
        parents.extend(bias);
        self.record("attention", value, &parents, move |g| {
            let (qd, kd, vd) = (qa.data(), ka.data(), va.data());
            let bias_data = ba.as_ref().map(|x| x.data());
            let mask_data = mask.as_ref().map(|m| m.data());
            let gd = g.data();
            let mut dq = vec![T::zero(); if need[0] { qd.len() } else { 0 }];
            let mut dk = vec![T::zero(); if need[1] { kd.len() } else { 0 }];
            let mut dvv = vec![T::zero(); if need[2] { vd.len() } else { 0 }];
            let mut dbias = vec![T::zero(); if need_bias { h * plane } else { 0 }];
            let mut probs = vec![T::zero(); plane];
            let mut ds = vec![T::zero(); plane];
            for bi in 0..b {
                for hi in 0..h {
                    let bh = bi * h + hi;
                    slice_probs(&dims, bi, hi, qd, kd, bias_data, mask_data, scale, &mut probs);
                    let go = MatRef::row_major(&gd[bh * nq * dv..(bh + 1) * nq * dv], nq, dv);
                    let vs = MatRef::row_major(&vd[bh * nk * dv..(bh + 1) * nk * dv], nk, dv);
                    if need[2] {
                        gemm(
                            T::one(),
                            MatRef::row_major(&probs, nq, nk).t(),
                            go,
                            T::zero(),
                            &mut dvv[bh * nk * dv..(bh + 1) * nk * dv],
                        );
                    }
                    if !(need[0] || need[1] || need_bias) {
                        continue;
                    }
                    // dP = dO V^T, then dS = P * (dP - rowsum(dP * P))
                    gemm(T::one(), go, vs.t(), T::zero(), &mut ds);
                    for (drow, prow) in ds.chunks_mut(nk).zip(probs.chunks(nk)) {
                        let dot: T = drow.iter().zip(prow).map(|(&a, &p)| a * p).sum();
                        for (dv_, &p) in drow.iter_mut().zip(prow) {
                            *dv_ = p * (*dv_ - dot);
                        }
                    }
                    if need_bias {
                        for (acc, &s) in dbias[hi * plane..(hi + 1) * plane].iter_mut().zip(&ds) {
                            *acc += s;
                        }
                    }
                    let dsm = MatRef::row_major(&ds, nq, nk);
                    if need[0] {
                        gemm(
                            scale,
                            dsm,
                            MatRef::row_major(&kd[bh * nk * d..(bh + 1) * nk * d], nk, d),
                            T::zero(),
                            &mut dq[bh * nq * d..(bh + 1) * nq * d],
                        );
                    }
                    if need[1] {
                        gemm(
                            scale,
                            dsm.t(),
                            MatRef::row_major(&qd[bh * nq * d..(bh + 1) * nq * d], nq, d),
                            T::zero(),
                            &mut dk[bh * nk * d..(bh + 1) * nk * d],
                        );
                    }
                }
            }
            let mut grads = vec![
                need[0].then(|| Tensor::new(qa.shape().to_vec(), dq).expect("dq")),
                need[1].then(|| Tensor::new(ka.shape().to_vec(), dk).expect("dk")),
                need[2].then(|| Tensor::new(va.shape().to_vec(), dvv).expect("dv")),
            ];
            if ba.is_some() {
                grads.push(need_bias.then(|| Tensor::new(vec![h, nq, nk], dbias).expect("dbias")));
            }
            Ok(grads)
        })
    }
}
