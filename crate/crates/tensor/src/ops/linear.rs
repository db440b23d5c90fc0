use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{gemm, MatRef};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<'p, T: Scalar> Graph<'p, T> {
    /// Affine map over the last axis: `x (..., din) @ w (din, dout) + b (dout)`.
    pub fn linear(&self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Result<Var<T>> {
        let Some(&din) = x.shape().last() else {
            return shape_err("linear", "rank-0 input");
        };
        if w.value().rank() != 2 || w.dim(0) != din {
            return shape_err("linear", format!("input {:?} with weight {:?}", x.shape(), w.shape()));
        }
        let dout = w.dim(1);
        if let Some(b) = b {
            if b.shape() != [dout] {
                return shape_err("linear", format!("bias {:?} for {dout} outputs", b.shape()));
            }
        }
        let rows = x.value().numel() / din.max(1);
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(b.value().data());
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(
            T::one(),
            MatRef::row_major(x.value().data(), rows, din),
            MatRef::row_major(w.value().data(), din, dout),
            beta,
            &mut out,
        );
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = dout;
        let value = Tensor::new(shape, out)?;

        let (xa, wa) = (x.arc(), w.arc());
        let (need_x, need_w) = (x.tracked(), w.tracked());
        let has_bias = b.is_some();
        let need_b = b.map(|b| b.tracked()).unwrap_or(false);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.record("linear", value, &parents, move |g| {
            let gd = g.data();
            let gx = if need_x {
                let mut d = vec![T::zero(); rows * din];
                gemm(
                    T::one(),
                    MatRef::row_major(gd, rows, dout),
                    MatRef::row_major(wa.data(), din, dout).t(),
                    T::zero(),
                    &mut d,
                );
                Some(Tensor::new(xa.shape().to_vec(), d)?)
            } else {
                None
            };
            let gw = if need_w {
                let mut d = vec![T::zero(); din * dout];
                gemm(
                    T::one(),
                    MatRef::row_major(xa.data(), rows, din).t(),
                    MatRef::row_major(gd, rows, dout),
                    T::zero(),
                    &mut d,
                );
                Some(Tensor::new(vec![din, dout], d)?)
            } else {
                None
            };
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(need_b.then(|| {
                    let mut d = vec![T::zero(); dout];
                    for row in gd.chunks(dout) {
                        for (acc, &v) in d.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    Tensor::new(vec![dout], d).expect("bias shape")
                }));
            }
            Ok(grads)
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::params::ParamStore;

    use super::*;

    #[test]
    fn identity_weights_preserve_input() {
        let store = ParamStore::<f32>::new();
        let g = Graph::inference(&store);
        let x = g.constant(Tensor::from_fn(vec![2, 3], |i| i as f32 - 2.5));
        let w = g.constant(Tensor::from_fn(vec![3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let y = g.linear(&x, &w, None).unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn zero_weights_give_bias() {
        let store = ParamStore::<f32>::new();
        let g = Graph::inference(&store);
        let x = g.constant(Tensor::from_fn(vec![4, 2], |i| i as f32));
        let w = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::full(vec![3], 1.5));
        let y = g.linear(&x, &w, Some(&b)).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn random_case_matches_triple_loop() {
        let store = ParamStore::<f64>::new();
        let g = Graph::inference(&store);
        let xs = [0.3, -1.2, 0.7, 2.0, 0.1, -0.4];
        let ws = [0.5, -0.25, 1.5, 0.75, -2.0, 0.2];
        let bs = [0.1, -0.3];
        let x = g.constant(Tensor::from_f64(vec![2, 3], &xs).unwrap());
        let w = g.constant(Tensor::from_f64(vec![3, 2], &ws).unwrap());
        let b = g.constant(Tensor::from_f64(vec![2], &bs).unwrap());
        let y = g.linear(&x, &w, Some(&b)).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = bs[j];
                for k in 0..3 {
                    acc += xs[i * 3 + k] * ws[k * 2 + j];
                }
                assert!((y.value().get(&[i, j]) - acc).abs() < 1e-12);
            }
        }
    }
}
