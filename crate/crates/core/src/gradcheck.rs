//! Finite-difference check of every parameter group of a model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::model::HiFormer;
use crate::tensor::{check_params, GradCheckOptions, Tensor, TensorError};
use crate::train::seg_loss;

/// Parameter groups that must each be covered.
pub const GROUPS: [&str; 4] = ["cnn", "swin", "dlf", "decoder"];

#[derive(Debug, Clone, Serialize)]
pub struct GroupResult {
    pub group: String,
    pub checked: usize,
    pub skipped: usize,
    /// `None` when no entry of the group could be checked.
    pub max_rel_error: Option<f64>,
    pub worst_tensor: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelGradCheck {
    pub model: String,
    pub training: bool,
    pub step: f64,
    pub threshold: f64,
    pub groups: Vec<GroupResult>,
}

impl ModelGradCheck {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_error.is_some_and(|e| e < self.threshold))
    }
}

impl std::fmt::Display for ModelGradCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mode = if self.training { "batch statistics" } else { "running statistics" };
        writeln!(f, "{} ({mode}, step {:e}, threshold {:e}):", self.model, self.step, self.threshold)?;
        for g in &self.groups {
            let err = g.max_rel_error.map_or("unchecked".to_string(), |e| format!("{e:.3e}"));
            let ok = g.max_rel_error.is_some_and(|e| e < self.threshold);
            writeln!(
                f,
                "  {:<8} {err:>10}  {:>4} checked {:>4} skipped  {}",
                g.group,
                g.checked,
                g.skipped,
                if ok { "ok" } else { "FAIL" }
            )?;
        }
        write!(f, "{}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

/// Checks the loss gradient of a freshly initialized `f64` model on a random
/// `batch` of images and labels, sampling `max_entries` entries per tensor.
/// Entries whose perturbation crosses a ReLU or max-pool kink are skipped.
pub fn model_gradcheck(
    config: &ModelConfig,
    seed: u64,
    batch: usize,
    max_entries: usize,
    training: bool,
) -> Result<ModelGradCheck> {
    let mut model = HiFormer::<f64>::new(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let [h, w] = config.input_hw;
    let x = Tensor::from_fn(vec![batch, 3, h, w], |_| rng.random_range(-1.0..1.0));
    let labels: Vec<u8> = (0..batch * h * w).map(|_| rng.random_range(0..config.num_classes as u8)).collect();
    let opts = GradCheckOptions {
        step: 1e-3,
        threshold: 1e-4,
        max_entries: Some(max_entries),
        seed,
        skip_kinks: true,
        training,
    };
    let net = model.clone();
    let wrap = |e: crate::Error| TensorError::InvalidArgument { op: "model", detail: e.to_string() };
    let report = check_params(&mut model.store, |_| true, &opts, |g| {
        let logits = net.forward(g, &g.constant(x.clone())).map_err(wrap)?;
        seg_loss(g, &logits, &labels).map_err(wrap)
    })?;
    let groups = GROUPS
        .iter()
        .filter(|name| config.use_dlf || **name != "dlf")
        .map(|name| {
            let prefix = format!("{name}.");
            let members: Vec<_> = report.tensors.iter().filter(|t| t.name.starts_with(&prefix)).collect();
            let worst = members
                .iter()
                .filter(|t| t.checked > 0)
                .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error));
            GroupResult {
                group: name.to_string(),
                checked: members.iter().map(|t| t.checked).sum(),
                skipped: members.iter().map(|t| t.skipped).sum(),
                max_rel_error: worst.map(|t| t.max_rel_error),
                worst_tensor: worst.map(|t| t.name.clone()),
            }
        })
        .collect();
    Ok(ModelGradCheck { model: config.name.clone(), training, step: opts.step, threshold: opts.threshold, groups })
}
