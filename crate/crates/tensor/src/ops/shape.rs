use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn reshape(&self, a: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        let value = a.to_tensor().reshape(shape.to_vec())?;
        let orig = a.shape().to_vec();
        self.record("reshape", value, &[a], move |g| {
            Ok(vec![Some(g.clone().reshape(orig.clone())?)])
        })
    }

    pub fn permute(&self, a: &Var<T>, axes: &[usize]) -> Result<Var<T>> {
        let value = a.value().permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.record("permute", value, &[a], move |g| Ok(vec![Some(g.permute(&inverse)?)]))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, a: &Var<T>, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        if axis >= a.value().rank() || start + len > a.dim(axis) {
            return shape_err(
                "narrow",
                format!("[{start}, {}) on axis {axis} of {:?}", start + len, a.shape()),
            );
        }
        let (outer, dim, inner) = split_axis(a.shape(), axis);
        let src = a.value().data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = len;
        let in_shape = a.shape().to_vec();
        self.record("narrow", Tensor::new(shape, data)?, &[a], move |g| {
            let mut out = Tensor::zeros(in_shape.clone());
            let dst = out.data_mut();
            for (o, chunk) in g.data().chunks(len * inner).enumerate() {
                let base = (o * dim + start) * inner;
                dst[base..base + len * inner].copy_from_slice(chunk);
            }
            Ok(vec![Some(out)])
        })
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&self, parts: &[&Var<T>], axis: usize) -> Result<Var<T>> {
        let Some(first) = parts.first() else {
            return shape_err("concat", "nothing to concatenate");
        };
        let rank = first.value().rank();
        if axis >= rank {
            return shape_err("concat", format!("axis {axis} for rank {rank}"));
        }
        for p in parts {
            let ok = p.value().rank() == rank
                && (0..rank).all(|d| d == axis || p.dim(d) == first.dim(d));
            if !ok {
                return shape_err("concat", format!("{:?} vs {:?}", p.shape(), first.shape()));
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.dim(axis)).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                let src = p.value().data();
                data.extend_from_slice(&src[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape().to_vec()).collect();
        self.record("concat", Tensor::new(shape, data)?, parts, move |g| {
            let gd = g.data();
            let mut outs: Vec<Vec<T>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut offset = 0;
            for _ in 0..outer {
                for (buf, &l) in outs.iter_mut().zip(&lens) {
                    buf.extend_from_slice(&gd[offset..offset + l * inner]);
                    offset += l * inner;
                }
            }
            outs.into_iter()
                .zip(&shapes)
                .map(|(d, s)| Tensor::new(s.clone(), d).map(Some))
                .collect()
        })
    }

    /// Cyclic shift along `axis`: `out[i] = in[(i - shift) mod n]`.
    pub fn roll(&self, a: &Var<T>, axis: usize, shift: isize) -> Result<Var<T>> {
        if axis >= a.value().rank() {
            return shape_err("roll", format!("axis {axis} of {:?}", a.shape()));
        }
        let value = roll_tensor(a.value(), axis, shift);
        self.record("roll", value, &[a], move |g| Ok(vec![Some(roll_tensor(g, axis, -shift))]))
    }

    /// Gathers rows of a 2-D table: `out[i] = table[indices[i]]`.
    pub fn index_select(&self, table: &Var<T>, indices: &[usize]) -> Result<Var<T>> {
        if table.value().rank() != 2 {
            return shape_err("index_select", format!("table {:?} is not 2-D", table.shape()));
        }
        let (rows, cols) = (table.dim(0), table.dim(1));
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return shape_err("index_select", format!("row {bad} of {rows}"));
        }
        let src = table.value().data();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let idx = indices.to_vec();
        self.record(
            "index_select",
            Tensor::new(vec![indices.len(), cols], data)?,
            &[table],
            move |g| {
                let mut out = Tensor::zeros(vec![rows, cols]);
                let dst = out.data_mut();
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..cols {
                        dst[i * cols + c] += g.data()[r * cols + c];
                    }
                }
                Ok(vec![Some(out)])
            },
        )
    }
}

pub(crate) fn roll_tensor<T: Scalar>(t: &Tensor<T>, axis: usize, shift: isize) -> Tensor<T> {
    let (outer, n, inner) = split_axis(t.shape(), axis);
    if n == 0 {
        return t.clone();
    }
    let s = shift.rem_euclid(n as isize) as usize;
    let src = t.data();
    let mut data = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..n {
            let j = (i + s) % n;
            let from = (o * n + i) * inner;
            let to = (o * n + j) * inner;
            data[to..to + inner].copy_from_slice(&src[from..from + inner]);
        }
    }
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}
