use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::ops::shape::split_axis;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<'p, T: Scalar> Graph<'p, T> {
    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self, a: &Var<T>) -> Result<Var<T>> {
        let value = Tensor::scalar(a.value().sum());
        let shape = a.shape().to_vec();
        self.record("sum", value, &[a], move |g| {
            Ok(vec![Some(Tensor::full(shape.clone(), g.item()))])
        })
    }

    pub fn mean(&self, a: &Var<T>) -> Result<Var<T>> {
        let n = a.value().numel();
        if n == 0 {
            return shape_err("mean", "empty tensor");
        }
        let inv = T::from_usize(n).expect("count").recip();
        let s = self.sum(a)?;
        self.scale(&s, inv)
    }

    /// Sums out `axis`.
    pub fn sum_axis(&self, a: &Var<T>, axis: usize) -> Result<Var<T>> {
        if axis >= a.value().rank() {
            return shape_err("sum_axis", format!("axis {axis} of {:?}", a.shape()));
        }
        let (outer, n, inner) = split_axis(a.shape(), axis);
        let src = a.value().data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let row = &src[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (d, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        let mut shape = a.shape().to_vec();
        shape.remove(axis);
        let in_shape = a.shape().to_vec();
        self.record("sum_axis", Tensor::new(shape, data)?, &[a], move |g| {
            let gd = g.data();
            let mut out = Vec::with_capacity(outer * n * inner);
            for o in 0..outer {
                for _ in 0..n {
                    out.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
            }
            Ok(vec![Some(Tensor::new(in_shape.clone(), out)?)])
        })
    }

    /// Arithmetic mean over `axis` (global average pooling over tokens when
    /// `axis` is the token axis).
    pub fn mean_axis(&self, a: &Var<T>, axis: usize) -> Result<Var<T>> {
        if axis >= a.value().rank() || a.dim(axis) == 0 {
            return shape_err("mean_axis", format!("axis {axis} of {:?}", a.shape()));
        }
        let inv = T::from_usize(a.dim(axis)).expect("count").recip();
        let s = self.sum_axis(a, axis)?;
        self.scale(&s, inv)
    }

    /// `out[i] = a[i, labels[i]]` over the flattened leading axes.
    pub fn pick_lastdim(&self, a: &Var<T>, labels: &[usize]) -> Result<Var<T>> {
        let Some(&k) = a.shape().last() else {
            return shape_err("pick_lastdim", "rank-0 input");
        };
        let rows = a.value().numel() / k.max(1);
        if labels.len() != rows {
            return shape_err("pick_lastdim", format!("{} labels for {rows} rows", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return shape_err("pick_lastdim", format!("label {bad} with {k} classes"));
        }
        let src = a.value().data();
        let data = labels.iter().enumerate().map(|(r, &l)| src[r * k + l]).collect();
        let shape = a.shape()[..a.value().rank() - 1].to_vec();
        let in_shape = a.shape().to_vec();
        let labels = labels.to_vec();
        self.record("pick_lastdim", Tensor::new(shape, data)?, &[a], move |g| {
            let mut out = Tensor::zeros(in_shape.clone());
            let dst = out.data_mut();
            for (r, &l) in labels.iter().enumerate() {
                dst[r * k + l] = g.data()[r];
            }
            Ok(vec![Some(out)])
        })
    }
}
