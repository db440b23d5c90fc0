//! Parameter registration with scoped dotted names and seeded initializers.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::params::{BufferId, ParamId, ParamStore};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

/// How a freshly registered parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitKind {
    /// Normal with the given standard deviation, redrawn outside two sigmas.
    TruncNormal(f64),
    Normal(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
    Zeros,
    Ones,
    Const(f64),
}

/// Draws from `kind` until `n` values are produced.
pub fn sample_values(kind: InitKind, n: usize, rng: &mut dyn RngCore) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let v = match kind {
            InitKind::TruncNormal(std) => loop {
                let z: f64 = StandardNormal.sample(rng);
                if z.abs() <= 2.0 {
                    break z * std;
                }
            },
            InitKind::Normal(std) => {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            }
            InitKind::Uniform(bound) => rng.random_range(-bound..=bound),
            InitKind::Zeros => 0.0,
            InitKind::Ones => 1.0,
            InitKind::Const(c) => c,
        };
        out.push(v);
    }
    out
}

/// Registers parameters into a store under a dotted prefix.
///
/// ```
/// use hiformer_tensor::{Init, InitKind, ParamStore};
/// use rand::SeedableRng;
///
/// let mut store = ParamStore::<f32>::new();
/// let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
/// let mut init = Init::new(&mut store, &mut rng);
/// let mut block = init.sub("block0");
/// block.param("weight", &[2, 3], InitKind::TruncNormal(0.02)).unwrap();
/// assert!(store.find_param("block0.weight").is_some());
/// ```
pub struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut dyn RngCore,
    prefix: String,
}

impl<'a, T: Scalar> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut dyn RngCore) -> Self {
        Init {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// A child scope; names registered through it get `name.` prepended.
    pub fn sub(&mut self, name: &str) -> Init<'_, T> {
        Init {
            prefix: self.qualify(name),
            store: self.store,
            rng: self.rng,
        }
    }

    pub fn qualify(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], kind: InitKind) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = sample_values(kind, n, self.rng).into_iter().map(cast::<T>).collect();
        let tensor = Tensor::new(shape.to_vec(), data)?;
        let full = self.qualify(name);
        self.store.add_param(full, tensor)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor<T>) -> Result<BufferId> {
        let full = self.qualify(name);
        self.store.add_buffer(full, value)
    }

    pub fn rng(&mut self) -> &mut dyn RngCore {
        self.rng
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn truncated_normal_stays_within_two_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = sample_values(InitKind::TruncNormal(0.02), 10_000, &mut rng);
        assert!(v.iter().all(|x| x.abs() <= 0.04));
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 1e-3);
    }

    #[test]
    fn nested_scopes_join_with_dots() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init::new(&mut store, &mut rng);
        let mut a = init.sub("swin");
        let mut b = a.sub("stage0");
        b.param("gamma", &[4], InitKind::Ones).unwrap();
        assert!(b.param("gamma", &[4], InitKind::Ones).is_err());
        let id = store.find_param("swin.stage0.gamma").unwrap();
        assert_eq!(store.value(id).data(), &[1.0; 4]);
    }
}
