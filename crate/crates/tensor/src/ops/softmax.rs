use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::kernels::softmax_row;
use crate::scalar::Scalar;

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn softmax_lastdim(&self, x: &Var<T>) -> Result<Var<T>> {
        let Some(&k) = x.shape().last() else {
            return shape_err("softmax_lastdim", "rank-0 input");
        };
        let mut out = x.to_tensor();
        for row in out.data_mut().chunks_mut(k.max(1)) {
            softmax_row(row);
        }
        let y = std::sync::Arc::new(out.clone());
        self.record("softmax_lastdim", out, &[x], move |g| {
            let mut dx = g.clone();
            for (drow, yrow) in dx.data_mut().chunks_mut(k).zip(y.data().chunks(k)) {
                let dot: T = drow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                for (d, &yv) in drow.iter_mut().zip(yrow) {
                    *d = yv * (*d - dot);
                }
            }
            Ok(vec![Some(dx)])
        })
    }

    pub fn log_softmax_lastdim(&self, x: &Var<T>) -> Result<Var<T>> {
        let Some(&k) = x.shape().last() else {
            return shape_err("log_softmax_lastdim", "rank-0 input");
        };
        let mut out = x.to_tensor();
        for row in out.data_mut().chunks_mut(k.max(1)) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let y = std::sync::Arc::new(out.clone());
        self.record("log_softmax_lastdim", out, &[x], move |g| {
            let mut dx = g.clone();
            for (drow, yrow) in dx.data_mut().chunks_mut(k).zip(y.data().chunks(k)) {
                let total: T = drow.iter().copied().sum();
                for (d, &ly) in drow.iter_mut().zip(yrow) {
                    *d -= ly.exp() * total;
                }
            }
            Ok(vec![Some(dx)])
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    use super::*;

    #[test]
    fn uniform_row_stays_uniform() {
        let store = ParamStore::<f32>::new();
        let g = Graph::inference(&store);
        let x = g.constant(Tensor::full(vec![1, 4], 3.0));
        let y = g.softmax_lastdim(&x).unwrap();
        assert!(y.value().data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn extreme_logits_are_stable() {
        let store = ParamStore::<f32>::new();
        let g = Graph::inference(&store);
        let x = g.constant(Tensor::from_f64(vec![1, 3], &[-1000.0, 1000.0, -1000.0]).unwrap());
        let y = g.softmax_lastdim(&x).unwrap();
        assert!(y.value().all_finite());
        assert_eq!(y.value().data()[1], 1.0);
    }

    #[test]
    fn three_logits_match_exp_over_sum() {
        let store = ParamStore::<f64>::new();
        let g = Graph::inference(&store);
        let logits = [0.5, -1.25, 2.0];
        let x = g.constant(Tensor::from_f64(vec![3], &logits).unwrap());
        let y = g.softmax_lastdim(&x).unwrap();
        let z: f64 = logits.iter().map(|v: &f64| v.exp()).sum();
        for (i, v) in logits.iter().enumerate() {
            assert!((y.value().data()[i] - v.exp() / z).abs() < 1e-15);
        }
        let ly = g.log_softmax_lastdim(&x).unwrap();
        for (i, v) in logits.iter().enumerate() {
            assert!((ly.value().data()[i] - (v - z.ln())).abs() < 1e-14);
        }
    }
}
