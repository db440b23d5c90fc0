use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{col2im, gemm, im2col, ConvGeom, MatRef};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

fn nchw(op: &'static str, x: &Var<impl Scalar>) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => shape_err(op, format!("expected NCHW input, got {s:?}")),
    }
}

/// Source taps for one output coordinate of a half-pixel 2x upsample:
/// `(lo, hi, weight of hi)`.
pub(crate) fn upsample_taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(len - 1);
            let hi = (lo + 1).min(len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// 2-D cross-correlation with square kernels.
    pub fn conv2d(
        &self,
        x: &Var<T>,
        w: &Var<T>,
        b: Option<&Var<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<T>> {
        let (n, c, h, wd) = nchw("conv2d", x)?;
        let (o, k) = match *w.shape() {
            [o, wc, k1, k2] if wc == c && k1 == k2 => (o, k1),
            ref s => {
                return shape_err("conv2d", format!("weight {s:?} for input {:?}", x.shape()));
            }
        };
        if let Some(b) = b {
            if b.shape() != [o] {
                return shape_err("conv2d", format!("bias {:?} for {o} filters", b.shape()));
            }
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: wd,
            kernel: k,
            stride,
            pad,
        };
        let Some((oh, ow)) = geom.out_hw() else {
            return shape_err("conv2d", format!("kernel {k} stride {stride} pad {pad} on {h}x{wd}"));
        };
        let plane = oh * ow;
        let ckk = geom.col_rows();
        let direct = k == 1 && stride == 1 && pad == 0;
        let mut cols = if direct { Vec::new() } else { vec![T::zero(); ckk * plane] };
        let mut out = vec![T::zero(); n * o * plane];
        let xd = x.value().data();
        let wmat = MatRef::row_major(w.value().data(), o, ckk);
        for s in 0..n {
            let img = &xd[s * c * h * wd..(s + 1) * c * h * wd];
            let dst = &mut out[s * o * plane..(s + 1) * o * plane];
            let beta = if let Some(b) = b {
                for (row, &bv) in dst.chunks_mut(plane).zip(b.value().data()) {
                    row.fill(bv);
                }
                T::one()
            } else {
                T::zero()
            };
            let colref = if direct {
                MatRef::row_major(img, ckk, plane)
            } else {
                im2col(img, &geom, &mut cols);
                MatRef::row_major(&cols, ckk, plane)
            };
            gemm(T::one(), wmat, colref, beta, dst);
        }
        let value = Tensor::new(vec![n, o, oh, ow], out)?;

        let (xa, wa) = (x.arc(), w.arc());
        let (need_x, need_w) = (x.tracked(), w.tracked());
        let has_bias = b.is_some();
        let need_b = b.map(|b| b.tracked()).unwrap_or(false);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.record("conv2d", value, &parents, move |g| {
            let gd = g.data();
            let xd = xa.data();
            let wmat = MatRef::row_major(wa.data(), o, ckk);
            let mut gx = need_x.then(|| vec![T::zero(); n * c * h * wd]);
            let mut gw = need_w.then(|| vec![T::zero(); o * ckk]);
            let mut cols = if direct { Vec::new() } else { vec![T::zero(); ckk * plane] };
            let mut dcols = if direct { Vec::new() } else { vec![T::zero(); ckk * plane] };
            for s in 0..n {
                let gy = MatRef::row_major(&gd[s * o * plane..(s + 1) * o * plane], o, plane);
                let img = &xd[s * c * h * wd..(s + 1) * c * h * wd];
                if let Some(gw) = gw.as_mut() {
                    let colref = if direct {
                        MatRef::row_major(img, ckk, plane)
                    } else {
                        im2col(img, &geom, &mut cols);
                        MatRef::row_major(&cols, ckk, plane)
                    };
                    gemm(T::one(), gy, colref.t(), T::one(), gw);
                }
                if let Some(gx) = gx.as_mut() {
                    let dimg = &mut gx[s * c * h * wd..(s + 1) * c * h * wd];
                    if direct {
                        gemm(T::one(), wmat.t(), gy, T::zero(), dimg);
                    } else {
                        gemm(T::one(), wmat.t(), gy, T::zero(), &mut dcols);
                        col2im(&dcols, &geom, dimg);
                    }
                }
            }
            let mut grads = vec![
                gx.map(|d| Tensor::new(vec![n, c, h, wd], d)).transpose()?,
                gw.map(|d| Tensor::new(vec![o, c, k, k], d)).transpose()?,
            ];
            if has_bias {
                grads.push(need_b.then(|| {
                    let mut db = vec![T::zero(); o];
                    for (i, row) in gd.chunks(plane).enumerate() {
                        db[i % o] += row.iter().copied().sum::<T>();
                    }
                    Tensor::new(vec![o], db).expect("bias shape")
                }));
            }
            Ok(grads)
        })
    }

    /// Max pooling with implicit negative-infinity padding.
    pub fn max_pool2d(&self, x: &Var<T>, kernel: usize, stride: usize, pad: usize) -> Result<Var<T>> {
        let (n, c, h, w) = nchw("max_pool2d", x)?;
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kernel,
            stride,
            pad,
        };
        let Some((oh, ow)) = geom.out_hw() else {
            return shape_err("max_pool2d", format!("kernel {kernel} on {h}x{w}"));
        };
        let xd = x.value().data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let plane = &xd[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_ix = usize::MAX;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = iy as usize * w + ix as usize;
                            if best_ix == usize::MAX || plane[idx] > best {
                                best = plane[idx];
                                best_ix = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(p * h * w + best_ix);
                }
            }
        }
        self.record_kinks(argmax.iter().map(|&i| i as u64));
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let in_shape = x.shape().to_vec();
        self.record("max_pool2d", value, &[x], move |g| {
            let mut gx = Tensor::zeros(in_shape.clone());
            let dst = gx.data_mut();
            for (&i, &gv) in argmax.iter().zip(g.data()) {
                dst[i] += gv;
            }
            Ok(vec![Some(gx)])
        })
    }

    /// Average pooling without padding.
    pub fn avg_pool2d(&self, x: &Var<T>, kernel: usize, stride: usize) -> Result<Var<T>> {
        let (n, c, h, w) = nchw("avg_pool2d", x)?;
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kernel,
            stride,
            pad: 0,
        };
        let Some((oh, ow)) = geom.out_hw() else {
            return shape_err("avg_pool2d", format!("kernel {kernel} on {h}x{w}"));
        };
        let inv: T = cast(1.0 / (kernel * kernel) as f64);
        let xd = x.value().data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            acc += xd[p * h * w + (oy * stride + ky) * w + ox * stride + kx];
                        }
                    }
                    out[(p * oh + oy) * ow + ox] = acc * inv;
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let in_shape = x.shape().to_vec();
        self.record("avg_pool2d", value, &[x], move |g| {
            let mut gx = Tensor::zeros(in_shape.clone());
            let dst = gx.data_mut();
            let gd = g.data();
            for p in 0..n * c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = gd[(p * oh + oy) * ow + ox] * inv;
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                dst[p * h * w + (oy * stride + ky) * w + ox * stride + kx] += gv;
                            }
                        }
                    }
                }
            }
            Ok(vec![Some(gx)])
        })
    }

    /// 2x bilinear upsampling, half-pixel (align-corners = false) sampling.
    pub fn upsample_bilinear2x(&self, x: &Var<T>) -> Result<Var<T>> {
        let (n, c, h, w) = nchw("upsample_bilinear2x", x)?;
        if h == 0 || w == 0 {
            return shape_err("upsample_bilinear2x", "empty spatial extent");
        }
        let rows = upsample_taps(h);
        let colt = upsample_taps(w);
        let (oh, ow) = (2 * h, 2 * w);
        let xd = x.value().data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            let src = &xd[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
                let (fy, gy): (T, T) = (cast(fy), cast(1.0 - fy));
                for (ox, &(x0, x1, fx)) in colt.iter().enumerate() {
                    let (fx, gx): (T, T) = (cast(fx), cast(1.0 - fx));
                    let top = src[y0 * w + x0] * gx + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * gx + src[y1 * w + x1] * fx;
                    dst[oy * ow + ox] = top * gy + bot * fy;
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let in_shape = x.shape().to_vec();
        self.record("upsample_bilinear2x", value, &[x], move |g| {
            let mut gx = Tensor::zeros(in_shape.clone());
            let gd = g.data();
            let dst = gx.data_mut();
            for p in 0..n * c {
                let src = &gd[p * oh * ow..(p + 1) * oh * ow];
                let d = &mut dst[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
                    let (fy, gy): (T, T) = (cast(fy), cast(1.0 - fy));
                    for (ox, &(x0, x1, fx)) in colt.iter().enumerate() {
                        let (fx, gxw): (T, T) = (cast(fx), cast(1.0 - fx));
                        let v = src[oy * ow + ox];
                        d[y0 * w + x0] += v * gy * gxw;
                        d[y0 * w + x1] += v * gy * fx;
                        d[y1 * w + x0] += v * fy * gxw;
                        d[y1 * w + x1] += v * fy * fx;
                    }
                }
            }
            Ok(vec![Some(gx)])
        })
    }
}
