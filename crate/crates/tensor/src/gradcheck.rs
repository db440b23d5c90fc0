//! Central-difference verification of reverse-mode gradients.

use rand::rngs::StdRng;
use rand::SeedableRng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

/// Floor of the relative-error denominator.
pub const REL_EPS: f64 = 1e-8;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_EPS)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference half step.
    pub step: f64,
    /// Pass threshold on the relative error.
    pub threshold: f64,
    /// Check at most this many randomly chosen entries per tensor.
    pub max_entries: Option<usize>,
    pub seed: u64,
    /// Skip entries whose perturbation flips a ReLU or max-pool decision;
    /// the finite difference straddles a kink there and means nothing.
    pub skip_kinks: bool,
    /// Evaluate in training mode (batch statistics in batch norm).
    pub training: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-3,
            threshold: 1e-5,
            max_entries: None,
            seed: 0,
            skip_kinks: true,
            training: false,
        }
    }
}

/// Outcome for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    /// Flat index and (analytic, numeric) pair of the worst entry.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub threshold: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.threshold
    }

    /// Worst error over tensors whose name starts with `prefix`, or `None`
    /// when no such tensor was checked.
    pub fn group_max(&self, prefix: &str) -> Option<f64> {
        self.tensors
            .iter()
            .filter(|t| t.name.starts_with(prefix) && t.checked > 0)
            .map(|t| t.max_rel_error)
            .reduce(f64::max)
    }

    pub fn checked(&self) -> usize {
        self.tensors.iter().map(|t| t.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.tensors.iter().map(|t| t.skipped).sum()
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

fn entries(numel: usize, opts: &GradCheckOptions, salt: u64) -> Vec<usize> {
    match opts.max_entries {
        Some(k) if k < numel => {
            let mut rng = StdRng::seed_from_u64(opts.seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let mut idx = rand::seq::index::sample(&mut rng, numel, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..numel).collect(),
    }
}

fn scalar_loss<T: Scalar>(loss: &Var<T>) -> Result<f64> {
    if loss.value().numel() != 1 {
        return Err(TensorError::InvalidArgument {
            op: "gradcheck",
            detail: format!("loss must be a scalar, got {:?}", loss.shape()),
        });
    }
    Ok(loss.value().data()[0].to_f64_lossy())
}

/// Evaluates `loss_fn` without recording, returning the loss and the kink
/// fingerprint.
fn probe<T, F>(store: &ParamStore<T>, opts: &GradCheckOptions, loss_fn: &mut F) -> Result<(f64, u64)>
where
    T: Scalar,
    F: FnMut(&Graph<'_, T>) -> Result<Var<T>>,
{
    let g = Graph::inference(store).with_training(opts.training);
    g.track_kinks(true);
    let loss = loss_fn(&g)?;
    Ok((scalar_loss(&loss)?, g.kink_fingerprint()))
}

/// Compares reverse-mode parameter gradients of `loss_fn` against central
/// differences for every parameter whose name satisfies `select`.
///
/// Parameters are perturbed in place and restored afterwards; batch-norm
/// running-statistic updates produced along the way are discarded.
pub fn check_params<T, F>(
    store: &mut ParamStore<T>,
    select: impl Fn(&str) -> bool,
    opts: &GradCheckOptions,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&Graph<'_, T>) -> Result<Var<T>>,
{
    let (analytic, base_kinks) = {
        let g = Graph::new(store).with_training(opts.training);
        g.track_kinks(true);
        let loss = loss_fn(&g)?;
        scalar_loss(&loss)?;
        let grads = g.backward(&loss)?;
        let mut per_param = Vec::new();
        for id in store.ids() {
            let p = store.param(id);
            if !select(p.name()) {
                continue;
            }
            let grad = grads
                .param(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.value().shape().to_vec()));
            if !grad.all_finite() {
                return Err(TensorError::NonFiniteGradient {
                    name: p.name().to_string(),
                });
            }
            per_param.push((id, grad));
        }
        (per_param, g.kink_fingerprint())
    };

    let h: T = cast(opts.step);
    let mut tensors = Vec::with_capacity(analytic.len());
    for (id, grad) in analytic {
        let name = store.param(id).name().to_string();
        let mut check = TensorCheck {
            name,
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
            worst: None,
        };
        for i in entries(grad.numel(), opts, id.index() as u64) {
            let orig = store.value(id).data()[i];
            // the step actually taken, after rounding in T
            store.value_mut(id).data_mut()[i] = orig + h;
            let plus = probe(store, opts, &mut loss_fn);
            store.value_mut(id).data_mut()[i] = orig - h;
            let minus = probe(store, opts, &mut loss_fn);
            let span = ((orig + h) - (orig - h)).to_f64_lossy();
            store.value_mut(id).data_mut()[i] = orig;
            let ((lp, kp), (lm, km)) = (plus?, minus?);
            if opts.skip_kinks && (kp != base_kinks || km != base_kinks) {
                check.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / span;
            let a = grad.data()[i].to_f64_lossy();
            let err = relative_error(a, numeric);
            check.checked += 1;
            if err > check.max_rel_error || check.worst.is_none() {
                check.max_rel_error = check.max_rel_error.max(err);
                check.worst = Some((i, a, numeric));
            }
        }
        tensors.push(check);
    }
    Ok(GradCheckReport {
        threshold: opts.threshold,
        tensors,
    })
}

/// Same comparison for the gradient with respect to an input tensor.
pub fn check_input<T, F>(
    store: &ParamStore<T>,
    input: &Tensor<T>,
    opts: &GradCheckOptions,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&Graph<'_, T>, Var<T>) -> Result<Var<T>>,
{
    let g = Graph::new(store).with_training(opts.training);
    g.track_kinks(true);
    let x = g.input(input.clone());
    let loss = loss_fn(&g, x.clone())?;
    scalar_loss(&loss)?;
    let grads = g.backward(&loss)?;
    let analytic = grads.wrt(&x).cloned().unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
    if !analytic.all_finite() {
        return Err(TensorError::NonFiniteGradient { name: "input".into() });
    }
    let base_kinks = g.kink_fingerprint();
    drop(g);

    let h: T = cast(opts.step);
    let mut eval = |value: Tensor<T>| -> Result<(f64, u64)> {
        let g = Graph::inference(store).with_training(opts.training);
        g.track_kinks(true);
        let x = g.constant(value);
        let loss = loss_fn(&g, x)?;
        Ok((scalar_loss(&loss)?, g.kink_fingerprint()))
    };
    let mut check = TensorCheck {
        name: "input".into(),
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for i in entries(input.numel(), opts, 0) {
        let orig = input.data()[i];
        let mut xp = input.clone();
        xp.data_mut()[i] = orig + h;
        let mut xm = input.clone();
        xm.data_mut()[i] = orig - h;
        let span = ((orig + h) - (orig - h)).to_f64_lossy();
        let ((lp, kp), (lm, km)) = (eval(xp)?, eval(xm)?);
        if opts.skip_kinks && (kp != base_kinks || km != base_kinks) {
            check.skipped += 1;
            continue;
        }
        let numeric = (lp - lm) / span;
        let a = analytic.data()[i].to_f64_lossy();
        let err = relative_error(a, numeric);
        check.checked += 1;
        if err > check.max_rel_error || check.worst.is_none() {
            check.max_rel_error = check.max_rel_error.max(err);
            check.worst = Some((i, a, numeric));
        }
    }
    Ok(GradCheckReport {
        threshold: opts.threshold,
        tensors: vec![check],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1e-10, 0.0), 1e-10 / 1e-8);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
    }

    #[test]
    fn linear_mse_toy_is_essentially_exact() {
        let mut store = ParamStore::<f64>::new();
        let w = store
            .add_param("w", Tensor::from_f64(vec![3, 2], &[0.3, -0.1, 0.8, 0.25, -0.6, 0.45]).unwrap())
            .unwrap();
        let b = store.add_param("b", Tensor::from_f64(vec![2], &[0.05, -0.2]).unwrap()).unwrap();
        let x = Tensor::from_f64(vec![4, 3], &[0.1, 0.2, -0.3, 1.0, -0.5, 0.7, 0.0, 0.4, 0.9, -1.1, 0.3, 0.2]).unwrap();
        let y = Tensor::from_f64(vec![4, 2], &[0.5, -0.5, 1.0, 0.0, -0.25, 0.75, 0.3, 0.1]).unwrap();
        let report = check_params(&mut store, |_| true, &GradCheckOptions::default(), |g| {
            let out = g.linear(&g.constant(x.clone()), &g.param(w), Some(&g.param(b)))?;
            let d = g.sub(&out, &g.constant(y.clone()))?;
            g.mean(&g.mul(&d, &d)?)
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-7, "{report:?}");
        assert_eq!(report.checked(), 8);
    }
}
