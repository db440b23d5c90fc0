use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

/// How many times `rhs` repeats to cover `lhs`, when `rhs` (minus leading
/// unit axes) equals a trailing slice of `lhs`.
fn repeat_factor(lhs: &[usize], rhs: &[usize]) -> Option<usize> {
    let first = rhs.iter().position(|&d| d != 1).unwrap_or(rhs.len());
    let core = &rhs[first..];
    if core.len() > lhs.len() || &lhs[lhs.len() - core.len()..] != core {
        return None;
    }
    let inner: usize = core.iter().product();
    Some(lhs.iter().product::<usize>() / inner.max(1))
}

/// Sums `grad` (shape of lhs) over the repeats of a broadcast rhs.
fn reduce_repeats<T: Scalar>(grad: &Tensor<T>, rhs_shape: &[usize]) -> Tensor<T> {
    let inner: usize = rhs_shape.iter().product();
    let mut out = vec![T::zero(); inner];
    for chunk in grad.data().chunks(inner.max(1)) {
        for (o, &g) in out.iter_mut().zip(chunk) {
            *o += g;
        }
    }
    Tensor::new(rhs_shape.to_vec(), out).expect("reduced shape")
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl<'p, T: Scalar> Graph<'p, T> {
    fn binary(&self, op: BinOp, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let name = match op {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        };
        let Some(_) = repeat_factor(a.shape(), b.shape()) else {
            return shape_err(name, format!("{:?} vs {:?}", a.shape(), b.shape()));
        };
        let inner = b.value().numel().max(1);
        let (av, bv) = (a.value().data(), b.value().data());
        let f = |x: T, y: T| match op {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
            BinOp::Div => x / y,
        };
        let data: Vec<T> = av
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % inner]))
            .collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        let (aa, ba) = (a.arc(), b.arc());
        let (need_a, need_b) = (a.tracked(), b.tracked());
        self.record(name, value, &[a, b], move |g| {
            let bs = ba.shape();
            let bd = ba.data();
            let ad = aa.data();
            let ga = need_a.then(|| {
                let data = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| match op {
                        BinOp::Add | BinOp::Sub => gi,
                        BinOp::Mul => gi * bd[i % inner],
                        BinOp::Div => gi / bd[i % inner],
                    })
                    .collect();
                Tensor::new(g.shape().to_vec(), data).expect("same shape")
            });
            let gb = need_b.then(|| {
                let per: Tensor<T> = match op {
                    BinOp::Add => g.clone(),
                    BinOp::Sub => g.map(|v| -v),
                    BinOp::Mul => g.zip_map(&aa, |gi, x| gi * x).expect("same shape"),
                    BinOp::Div => {
                        let data = g
                            .data()
                            .iter()
                            .zip(ad)
                            .enumerate()
                            .map(|(i, (&gi, &x))| {
                                let y = bd[i % inner];
                                -gi * x / (y * y)
                            })
                            .collect();
                        Tensor::new(g.shape().to_vec(), data).expect("same shape")
                    }
                };
                reduce_repeats(&per, bs)
            });
            Ok(vec![ga, gb])
        })
    }

    /// Elementwise sum; `b` may broadcast over leading axes of `a`.
    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary(BinOp::Add, a, b)
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary(BinOp::Sub, a, b)
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary(BinOp::Mul, a, b)
    }

    pub fn div(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary(BinOp::Div, a, b)
    }

    pub fn scale(&self, a: &Var<T>, factor: T) -> Result<Var<T>> {
        let value = a.value().map(|v| v * factor);
        self.record("scale", value, &[a], move |g| Ok(vec![Some(g.map(|v| v * factor))]))
    }

    pub fn add_scalar(&self, a: &Var<T>, c: T) -> Result<Var<T>> {
        let value = a.value().map(|v| v + c);
        self.record("add_scalar", value, &[a], |g| Ok(vec![Some(g.clone())]))
    }

    pub fn relu(&self, a: &Var<T>) -> Result<Var<T>> {
        let value = a.value().map(|v| v.max(T::zero()));
        self.record_kinks(a.value().data().iter().map(|&v| (v > T::zero()) as u64));
        let x = a.arc();
        self.record("relu", value, &[a], move |g| {
            Ok(vec![Some(g.zip_map(&x, |gi, xi| if xi > T::zero() { gi } else { T::zero() })?)])
        })
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self, a: &Var<T>) -> Result<Var<T>> {
        let half: T = cast(0.5);
        let inv_sqrt2: T = cast(std::f64::consts::FRAC_1_SQRT_2);
        let value = a
            .value()
            .map(|x| half * x * (T::one() + (x * inv_sqrt2).erf()));
        let x = a.arc();
        self.record("gelu", value, &[a], move |g| {
            let inv_sqrt_2pi: T = cast(0.398_942_280_401_432_7);
            Ok(vec![Some(g.zip_map(&x, |gi, xi| {
                let cdf = half * (T::one() + (xi * inv_sqrt2).erf());
                let pdf = inv_sqrt_2pi * (-half * xi * xi).exp();
                gi * (cdf + xi * pdf)
            })?)])
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::params::ParamStore;

    use super::*;

    #[test]
    fn leading_broadcast_add() {
        let store = ParamStore::<f64>::new();
        let g = Graph::new(&store);
        let a = g.input(Tensor::from_fn(vec![2, 3, 2], |i| i as f64));
        let b = g.input(Tensor::from_f64(vec![1, 3, 2], &[10.0, 20.0, 30.0, 40.0, 50.0, 60.0]).unwrap());
        let c = g.add(&a, &b).unwrap();
        assert_eq!(c.value().get(&[1, 2, 1]), 11.0 + 60.0);
        let loss = g.sum(&c).unwrap();
        let grads = g.backward(&loss).unwrap();
        assert!(grads.wrt(&b).unwrap().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn incompatible_broadcast_rejected() {
        let store = ParamStore::<f32>::new();
        let g = Graph::inference(&store);
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2]));
        assert!(g.add(&a, &b).is_err());
    }

    #[test]
    fn relu_kinks_change_fingerprint() {
        let store = ParamStore::<f64>::new();
        let fingerprint = |x: f64| {
            let g = Graph::inference(&store);
            g.track_kinks(true);
            let v = g.constant(Tensor::from_f64(vec![2], &[x, 1.0]).unwrap());
            g.relu(&v).unwrap();
            g.kink_fingerprint()
        };
        assert_eq!(fingerprint(0.5), fingerprint(0.25));
        assert_ne!(fingerprint(0.5), fingerprint(-0.5));
    }
}
