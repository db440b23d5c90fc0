//! Loss, augmentation, synthetic data and the SGD training loop.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use hiformer_tensor::{Graph, Scalar, Sgd, Tensor, TensorError, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{decode_checkpoint, encode_checkpoint, save_model};
use crate::metrics::{MetricsAccumulator, MetricsReport};
use crate::model::HiFormer;

/// Smoothing constant of the soft Dice term.
pub const DICE_SMOOTH: f64 = 1e-5;

/// One image with its label map.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `(C, H, W)` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Row-major `H x W` labels.
    pub mask: Vec<u8>,
    pub height: usize,
    pub width: usize,
}

impl Sample {
    pub fn channels(&self) -> usize {
        self.image.dim(0)
    }
}

fn check_labels(labels: &[u8], classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l as usize >= classes) {
        Some(&l) => Err(Error::LabelOutOfRange { label: l as usize, classes }),
        None => Ok(()),
    }
}

/// `0.5 * cross-entropy + 0.5 * (1 - soft Dice)` of logits `(N, K, H, W)`
/// against `N*H*W` labels. The Dice term averages
/// `(2 sum(p t) + s) / (sum(p^2) + sum(t^2) + s)` over all `K` classes,
/// pooled over the batch.
pub fn seg_loss<T: Scalar>(g: &Graph<'_, T>, logits: &Var<T>, labels: &[u8]) -> Result<Var<T>> {
    let &[n, k, h, w] = logits.shape() else {
        return Err(TensorError::ShapeMismatch {
            op: "seg_loss",
            detail: format!("logits {:?} are not (N, K, H, W)", logits.shape()),
        }
        .into());
    };
    let rows = n * h * w;
    if labels.len() != rows {
        return Err(TensorError::ShapeMismatch {
            op: "seg_loss",
            detail: format!("{} labels for {rows} pixels", labels.len()),
        }
        .into());
    }
    check_labels(labels, k)?;
    let flat = g.reshape(&g.permute(logits, &[0, 2, 3, 1])?, &[rows, k])?;
    let picked: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let ce = g.scale(&g.mean(&g.pick_lastdim(&g.log_softmax_lastdim(&flat)?, &picked)?)?, -T::one())?;

    let probs = g.softmax_lastdim(&flat)?;
    let onehot = g.constant(Tensor::from_fn(vec![rows, k], |i| {
        if labels[i / k] as usize == i % k {
            T::one()
        } else {
            T::zero()
        }
    }));
    let smooth = T::from_f64_lossy(DICE_SMOOTH);
    let inter = g.sum_axis(&g.mul(&probs, &onehot)?, 0)?;
    let p2 = g.sum_axis(&g.mul(&probs, &probs)?, 0)?;
    let t2 = g.sum_axis(&onehot, 0)?;
    let num = g.add_scalar(&g.scale(&inter, T::from_f64_lossy(2.0))?, smooth)?;
    let den = g.add_scalar(&g.add(&p2, &t2)?, smooth)?;
    let dice = g.mean(&g.div(&num, &den)?)?;
    let dice_loss = g.add_scalar(&g.scale(&dice, -T::one())?, T::one())?;

    let half = T::from_f64_lossy(0.5);
    Ok(g.add(&g.scale(&ce, half)?, &g.scale(&dice_loss, half)?)?)
}

/// Flips and quarter turns, applied identically to image and mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Augmentation {
    pub hflip: bool,
    pub vflip: bool,
    /// Counter-clockwise quarter turns, `0..4`.
    pub quarter_turns: u8,
}

impl Augmentation {
    pub fn sample(rng: &mut impl Rng) -> Self {
        Augmentation {
            hflip: rng.random_bool(0.5),
            vflip: rng.random_bool(0.5),
            quarter_turns: rng.random_range(0..4),
        }
    }

    /// Source pixel `(row, col)` of output pixel `(i, j)`, with the output
    /// shape.
    fn source(&self, h: usize, w: usize) -> (usize, usize, impl Fn(usize, usize) -> (usize, usize)) {
        let (oh, ow) = if self.quarter_turns % 2 == 1 { (w, h) } else { (h, w) };
        let a = *self;
        let map = move |i: usize, j: usize| {
            // undo the rotation, then the flips
            let (mut r, mut c) = (i, j);
            let (mut ch, mut cw) = (oh, ow);
            for _ in 0..a.quarter_turns {
                // one counter-clockwise turn maps (r, c) of an ch x cw grid
                // from (c, cw' - 1 - r) of the cw x ch source
                let (sr, sc) = (c, ch - 1 - r);
                r = sr;
                c = sc;
                std::mem::swap(&mut ch, &mut cw);
            }
            if a.vflip {
                r = h - 1 - r;
            }
            if a.hflip {
                c = w - 1 - c;
            }
            (r, c)
        };
        (oh, ow, map)
    }

    pub fn apply(&self, s: &Sample) -> Sample {
        let (h, w, c) = (s.height, s.width, s.channels());
        let (oh, ow, map) = self.source(h, w);
        let mut index = Vec::with_capacity(oh * ow);
        for i in 0..oh {
            for j in 0..ow {
                let (r, cc) = map(i, j);
                index.push(r * w + cc);
            }
        }
        let src = s.image.data();
        let image = Tensor::from_fn(vec![c, oh, ow], |k| {
            let (ch, p) = (k / (oh * ow), k % (oh * ow));
            src[ch * h * w + index[p]]
        });
        Sample { image, mask: index.iter().map(|&p| s.mask[p]).collect(), height: oh, width: ow }
    }
}

/// Random flips (p = 0.5 each) and a uniform quarter-turn rotation.
pub fn augment(s: &Sample, rng: &mut impl Rng) -> Sample {
    Augmentation::sample(rng).apply(s)
}

/// Rotation by `degrees` about the image centre: bilinear for the image,
/// nearest for the mask, zero outside.
pub fn rotate_small(s: &Sample, degrees: f64) -> Sample {
    let (h, w, c) = (s.height, s.width, s.channels());
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let src = s.image.data();
    let mut image = vec![0f32; c * h * w];
    let mut mask = vec![0u8; h * w];
    for i in 0..h {
        for j in 0..w {
            let (y, x) = (i as f64 - cy, j as f64 - cx);
            let sy = cos * y - sin * x + cy;
            let sx = sin * y + cos * x + cx;
            let (ny, nx) = (sy.round(), sx.round());
            if ny >= 0.0 && nx >= 0.0 && (ny as usize) < h && (nx as usize) < w {
                mask[i * w + j] = s.mask[ny as usize * w + nx as usize];
            }
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            for ch in 0..c {
                let at = |yy: f64, xx: f64| {
                    if yy < 0.0 || xx < 0.0 || yy as usize >= h || xx as usize >= w {
                        0.0
                    } else {
                        src[ch * h * w + yy as usize * w + xx as usize] as f64
                    }
                };
                let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1.0))
                    + fy * ((1.0 - fx) * at(y0 + 1.0, x0) + fx * at(y0 + 1.0, x0 + 1.0));
                image[ch * h * w + i * w + j] = v as f32;
            }
        }
    }
    Sample { image: Tensor::new(vec![c, h, w], image).expect("same size"), mask, height: h, width: w }
}

/// Supersampling factor per axis for ellipse edge coverage.
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// `n` images of `hw x hw` with `k - 1` random ellipses (one per foreground
/// class, later ones on top) over textured noise. Edges are anti-aliased
/// in the image; the mask labels pixel centres by the exact geometry.
pub fn synth_dataset(n: usize, hw: usize, k: usize, rng: &mut impl Rng) -> Vec<Sample> {
    let noise = Normal::new(0.0, 0.04).expect("valid deviation");
    let size = hw as f64;
    (0..n)
        .map(|_| {
            let freq = (rng.random_range(0.05..0.25), rng.random_range(0.05..0.25));
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let base = rng.random_range(0.2..0.4);
            let tint: [f64; 3] = [rng.random_range(0.9..1.1), 1.0, rng.random_range(0.9..1.1)];
            let shapes: Vec<(Ellipse, f64)> = (1..k)
                .map(|c| {
                    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
                    let e = Ellipse {
                        cy: rng.random_range(0.25..0.75) * size,
                        cx: rng.random_range(0.25..0.75) * size,
                        a: rng.random_range(0.12..0.3) * size,
                        b: rng.random_range(0.12..0.3) * size,
                        cos: theta.cos(),
                        sin: theta.sin(),
                    };
                    let level = 0.55 + 0.4 * c as f64 / (k - 1) as f64 + rng.random_range(-0.05..0.05);
                    (e, level)
                })
                .collect();
            let mut image = vec![0f32; 3 * hw * hw];
            let mut mask = vec![0u8; hw * hw];
            for i in 0..hw {
                for j in 0..hw {
                    let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
                    let texture = base + 0.08 * (freq.0 * x + freq.1 * y + phase).sin();
                    let mut value = texture;
                    for (c, (e, level)) in shapes.iter().enumerate() {
                        let mut inside = 0;
                        for sy in 0..SUPERSAMPLE {
                            for sx in 0..SUPERSAMPLE {
                                let oy = i as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                                let ox = j as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                                inside += e.contains(oy, ox) as usize;
                            }
                        }
                        let cover = inside as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                        value = value * (1.0 - cover) + level * cover;
                        if e.contains(y, x) {
                            mask[i * hw + j] = (c + 1) as u8;
                        }
                    }
                    for (ch, t) in tint.iter().enumerate() {
                        let v = value * t + noise.sample(rng);
                        image[ch * hw * hw + i * hw + j] = v.clamp(0.0, 1.0) as f32;
                    }
                }
            }
            Sample {
                image: Tensor::new(vec![3, hw, hw], image).expect("sized"),
                mask,
                height: hw,
                width: hw,
            }
        })
        .collect()
}

/// Stacks samples into `(N, C, H, W)` plus their concatenated labels.
pub fn make_batch<T: Scalar>(samples: &[&Sample]) -> Result<(Tensor<T>, Vec<u8>)> {
    let first = samples.first().ok_or(Error::EmptyDataset)?;
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.image.numel());
    let mut labels = Vec::with_capacity(samples.len() * first.mask.len());
    for s in samples {
        if s.image.shape() != shape.as_slice() {
            return Err(Error::Dataset(format!("mixed image shapes {:?} and {:?}", shape, s.image.shape())));
        }
        data.extend(s.image.data().iter().map(|&v| T::from_f64_lossy(v as f64)));
        labels.extend_from_slice(&s.mask);
    }
    let mut full = vec![samples.len()];
    full.extend(shape);
    Ok((Tensor::new(full, data)?, labels))
}

/// Per-pixel argmax of logits `(N, K, H, W)`, one label map per image.
pub fn argmax_labels<T: Scalar>(logits: &Tensor<T>) -> Vec<Vec<u8>> {
    let &[n, k, h, w] = logits.shape() else {
        panic!("logits {:?} are not (N, K, H, W)", logits.shape());
    };
    let d = logits.data();
    (0..n)
        .map(|b| {
            (0..h * w)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..k {
                        if d[(b * k + c) * h * w + p] > d[(b * k + best) * h * w + p] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect()
}

/// Evaluation-mode metrics of `model` on `samples`.
pub fn evaluate<T: Scalar>(model: &HiFormer<T>, samples: &[&Sample], batch_size: usize) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::new(model.config.num_classes);
    for chunk in samples.chunks(batch_size.max(1)) {
        let (x, _) = make_batch::<T>(chunk)?;
        let logits = model.predict(&x)?;
        for (pred, s) in argmax_labels(&logits).iter().zip(chunk) {
            acc.add(pred, &s.mask, s.height, s.width);
        }
    }
    Ok(acc.finish())
}

/// Deterministic `(train, validation)` index split.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64) * val_fraction).floor() as usize;
    let val = idx.split_off(n - n_val.min(n));
    (idx, val)
}

/// Worker-thread cap from `HIFORMER_THREADS` (defaults to the available
/// parallelism).
pub fn thread_cap() -> usize {
    std::env::var("HIFORMER_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
        .max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Polynomial decay exponent; constant learning rate when `None`.
    pub poly_power: Option<f64>,
    pub val_fraction: f64,
    pub augment: bool,
    /// Extra small-angle rotation range in degrees (off when `None`).
    pub small_angle: Option<f64>,
    /// More than one enables the batch-preparation worker.
    pub threads: usize,
    /// JSON-lines log, one record per epoch.
    #[serde(skip)]
    pub log_path: Option<PathBuf>,
    /// Best-Dice checkpoint (written with its config sidecar).
    #[serde(skip)]
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 10,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 1,
            seed: 0,
            poly_power: None,
            val_fraction: 0.2,
            augment: true,
            small_angle: None,
            threads: 1,
            log_path: None,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestMetric {
    pub epoch: usize,
    pub dsc: f64,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    /// Epochs completed.
    pub epoch: usize,
    pub seed: u64,
    pub best: Option<BestMetric>,
    pub losses: Vec<f64>,
    /// Momentum buffers in parameter order, stored next to the JSON file.
    #[serde(skip)]
    pub velocity: Vec<(String, Tensor<f64>)>,
}

impl TrainState {
    pub fn new(seed: u64) -> Self {
        TrainState { step: 0, epoch: 0, seed, best: None, losses: Vec::new(), velocity: Vec::new() }
    }

    fn momentum_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".momentum");
        PathBuf::from(s)
    }

    /// JSON at `path`, momentum buffers in checkpoint format at
    /// `<path>.momentum`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        let mut store = hiformer_tensor::ParamStore::<f64>::new();
        for (name, t) in &self.velocity {
            store.add_param(name.clone(), t.clone())?;
        }
        fs::write(Self::momentum_path(path), encode_checkpoint(&store))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut state: TrainState = serde_json::from_str(&fs::read_to_string(path)?)?;
        let momentum = Self::momentum_path(path);
        if momentum.exists() {
            state.velocity = decode_checkpoint(&fs::read(momentum)?)?
                .iter()
                .map(|t| Ok((t.name.clone(), t.to_tensor::<f64>()?)))
                .collect::<Result<_>>()?;
        }
        Ok(state)
    }
}

/// One JSON-lines log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub dsc: f64,
    /// `None` when no finite value exists.
    pub hd95: Option<f64>,
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
    pub miou: f64,
    pub epochs_budget: usize,
    pub schedule: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Validation metrics after the last epoch (of the initial model when
    /// no epoch ran).
    pub report: MetricsReport,
    pub history: Vec<EpochRecord>,
}

fn diverged(err: Error, step: usize) -> Error {
    match err {
        Error::Tensor(TensorError::NonFinite { .. } | TensorError::NonFiniteGradient { .. }) => Error::DivergedLoss { step },
        e => e,
    }
}

/// One SGD step on a batch; returns the loss before the update.
pub fn train_step<T: Scalar>(
    model: &mut HiFormer<T>,
    sgd: &mut Sgd<T>,
    images: Tensor<T>,
    labels: &[u8],
    step: usize,
) -> Result<f64> {
    let (loss, grads, updates) = {
        let g = Graph::new(&model.store).with_training(true);
        let x = g.constant(images);
        let run = || -> Result<_> {
            let logits = model.forward(&g, &x)?;
            let loss = seg_loss(&g, &logits, labels)?;
            let value = loss.value().item().to_f64_lossy();
            if !value.is_finite() {
                return Err(Error::DivergedLoss { step });
            }
            Ok((value, g.backward(&loss)?))
        };
        let (value, grads) = run().map_err(|e| diverged(e, step))?;
        (value, grads, g.take_buffer_updates())
    };
    model.store.zero_grad();
    model.store.accumulate(&grads).map_err(|e| diverged(e.into(), step))?;
    model.store.apply_buffer_updates(updates)?;
    sgd.step(&mut model.store)?;
    Ok(loss)
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// The shuffled, augmented batches of one epoch, in order.
fn epoch_batches<'a>(
    data: &'a [Sample],
    train_idx: &'a [usize],
    cfg: &'a TrainConfig,
    epoch: usize,
) -> impl Iterator<Item = (Vec<Sample>, usize)> + 'a {
    let mut rng = epoch_rng(cfg.seed, epoch);
    let mut order = train_idx.to_vec();
    order.shuffle(&mut rng);
    let chunks: Vec<Vec<usize>> = order.chunks(cfg.batch_size.max(1)).map(<[usize]>::to_vec).collect();
    chunks.into_iter().enumerate().map(move |(bi, chunk)| {
        let batch = chunk
            .iter()
            .map(|&i| {
                let s = &data[i];
                if !cfg.augment {
                    return s.clone();
                }
                let mut out = augment(s, &mut rng);
                if let Some(max) = cfg.small_angle {
                    out = rotate_small(&out, rng.random_range(-max..=max));
                }
                out
            })
            .collect();
        (batch, bi)
    })
}

fn batches_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch.max(1))
}

/// Trains `model` in place; `resume` continues a saved run.
pub fn train<T: Scalar>(
    model: &mut HiFormer<T>,
    data: &[Sample],
    cfg: &TrainConfig,
    resume: Option<TrainState>,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let [h, w] = model.config.input_hw;
    for s in data {
        if (s.height, s.width) != (h, w) || s.mask.len() != h * w {
            return Err(Error::Dataset(format!("sample {}x{} for a model built for {h}x{w}", s.height, s.width)));
        }
        check_labels(&s.mask, model.config.num_classes)?;
    }
    let (train_idx, mut val_idx) = split_indices(data.len(), cfg.val_fraction, cfg.seed);
    if val_idx.is_empty() {
        log::warn!("validation split is empty; validating on the training set");
        val_idx = train_idx.clone();
    }
    let val: Vec<&Sample> = val_idx.iter().map(|&i| &data[i]).collect();

    let mut sgd = Sgd::<T>::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut state = match resume {
        Some(s) => {
            if !s.velocity.is_empty() {
                sgd.set_velocity(s.velocity.iter().map(|(_, t)| t.cast()).collect());
            }
            s
        }
        None => {
            if let Some(path) = &cfg.checkpoint {
                save_model(model, path)?;
            }
            TrainState::new(cfg.seed)
        }
    };
    let mut log = match &cfg.log_path {
        Some(p) => Some(BufWriter::new(File::options().create(true).append(true).open(p)?)),
        None => None,
    };
    let per_epoch = batches_per_epoch(train_idx.len(), cfg.batch_size);
    let total_steps = (per_epoch * cfg.epochs).max(1);
    let schedule = match cfg.poly_power {
        Some(p) => format!("poly({p})"),
        None => "constant".to_string(),
    };
    log::info!(
        "training {} samples ({} validation), {} epochs of {per_epoch} steps, lr {} ({schedule})",
        train_idx.len(),
        val.len(),
        cfg.epochs,
        cfg.lr
    );

    let mut history = Vec::new();
    let mut report = None;
    for epoch in state.epoch..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut steps = 0;
        let mut lr = cfg.lr;
        let mut run_batch = |model: &mut HiFormer<T>, batch: Vec<Sample>| -> Result<()> {
            lr = match cfg.poly_power {
                Some(p) => cfg.lr * (1.0 - state.step as f64 / total_steps as f64).max(0.0).powf(p),
                None => cfg.lr,
            };
            sgd.lr = lr;
            let refs: Vec<&Sample> = batch.iter().collect();
            let (x, labels) = make_batch::<T>(&refs)?;
            let loss = train_step(model, &mut sgd, x, &labels, state.step)?;
            log::debug!("step {} loss {loss:.5}", state.step);
            state.losses.push(loss);
            state.step += 1;
            epoch_loss += loss;
            steps += 1;
            Ok(())
        };
        if cfg.threads > 1 {
            // a single worker prepares batches ahead of the optimizer
            std::thread::scope(|scope| -> Result<()> {
                let (tx, rx) = mpsc::sync_channel(2);
                let train_idx = &train_idx;
                scope.spawn(move || {
                    for (batch, _) in epoch_batches(data, train_idx, cfg, epoch) {
                        if tx.send(batch).is_err() {
                            break;
                        }
                    }
                });
                for batch in rx {
                    run_batch(model, batch)?;
                }
                Ok(())
            })?;
        } else {
            for (batch, _) in epoch_batches(data, &train_idx, cfg, epoch) {
                run_batch(model, batch)?;
            }
        }
        let r = evaluate(model, &val, cfg.batch_size)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            step: state.step,
            loss: epoch_loss / steps.max(1) as f64,
            lr,
            dsc: r.mean.dsc,
            hd95: r.mean.hd95.is_finite().then_some(r.mean.hd95),
            sensitivity: r.mean.sensitivity,
            specificity: r.mean.specificity,
            accuracy: r.mean.accuracy,
            miou: r.mean.miou,
            epochs_budget: cfg.epochs,
            schedule: schedule.clone(),
        };
        log::info!("epoch {} loss {:.4} val dsc {:.4}", record.epoch, record.loss, record.dsc);
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&record)?)?;
            f.flush()?;
        }
        if state.best.is_none_or(|b| r.mean.dsc > b.dsc) {
            state.best = Some(BestMetric { epoch: epoch + 1, dsc: r.mean.dsc });
            if let Some(path) = &cfg.checkpoint {
                save_model(model, path)?;
            }
        }
        state.epoch = epoch + 1;
        history.push(record);
        report = Some(r);
    }
    let names = model.store.params().iter().map(|p| p.name().to_string());
    state.velocity = names.zip(sgd.velocity().iter().map(|t| t.cast())).collect();
    let report = match report {
        Some(r) => r,
        None => evaluate(model, &val, cfg.batch_size)?,
    };
    Ok(TrainOutcome { state, report, history })
}

#[cfg(test)]
mod tests {
    use hiformer_tensor::ParamStore;

    use super::*;

    fn grid_sample(h: usize, w: usize) -> Sample {
        Sample {
            image: Tensor::from_fn(vec![2, h, w], |i| i as f32),
            mask: (0..h * w).map(|i| i as u8).collect(),
            height: h,
            width: w,
        }
    }

    #[test]
    fn identity_and_double_flip() {
        let s = grid_sample(3, 4);
        assert_eq!(Augmentation::default().apply(&s), s);
        let flip = Augmentation { hflip: true, ..Default::default() };
        assert_eq!(flip.apply(&flip.apply(&s)), s);
        let turn = Augmentation { quarter_turns: 1, ..Default::default() };
        let mut t = s.clone();
        for _ in 0..4 {
            t = turn.apply(&t);
        }
        assert_eq!(t, s);
    }

    #[test]
    fn quarter_turn_matches_index_oracle() {
        // [[0, 1], [2, 3]] turned counter-clockwise is [[1, 3], [0, 2]]
        let s = grid_sample(2, 2);
        let t = Augmentation { quarter_turns: 1, ..Default::default() }.apply(&s);
        assert_eq!(t.mask, [1, 3, 0, 2]);
        // non-square: 2x3 becomes 3x2
        let s = grid_sample(2, 3);
        let t = Augmentation { quarter_turns: 1, ..Default::default() }.apply(&s);
        assert_eq!((t.height, t.width), (3, 2));
        assert_eq!(t.mask, [2, 5, 1, 4, 0, 3]);
    }

    #[test]
    fn loss_of_confident_correct_logits_vanishes() {
        let labels = [0u8, 1, 1, 0];
        let store = ParamStore::<f64>::new();
        let g = Graph::inference(&store);
        let logits = g.constant(Tensor::from_fn(vec![1, 2, 2, 2], |i| {
            let (c, p) = (i / 4, i % 4);
            if labels[p] as usize == c {
                30.0
            } else {
                -30.0
            }
        }));
        let loss = seg_loss(&g, &logits, &labels).unwrap();
        assert!(loss.value().item() < 1e-9);
    }

    #[test]
    fn uniform_logits_give_ln2_cross_entropy() {
        let labels = [0u8, 1, 1, 0];
        let store = ParamStore::<f64>::new();
        let g = Graph::inference(&store);
        let logits = g.constant(Tensor::zeros(vec![1, 2, 2, 2]));
        let loss = seg_loss(&g, &logits, &labels).unwrap().value().item();
        // p = 1/2 everywhere: dice per class = (2*1 + s) / (1 + 2 + s)
        let s = DICE_SMOOTH;
        let dice = (2.0 + s) / (3.0 + s);
        assert!((loss - (0.5 * 2f64.ln() + 0.5 * (1.0 - dice))).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let store = ParamStore::<f64>::new();
        let g = Graph::inference(&store);
        let logits = g.constant(Tensor::zeros(vec![1, 2, 1, 1]));
        assert!(matches!(seg_loss(&g, &logits, &[2]), Err(Error::LabelOutOfRange { label: 2, classes: 2 })));
    }

    #[test]
    fn synthetic_data_is_deterministic_and_in_range() {
        let a = synth_dataset(3, 16, 3, &mut ChaCha8Rng::seed_from_u64(5));
        let b = synth_dataset(3, 16, 3, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert!(a.iter().all(|s| s.mask.iter().all(|&l| l < 3)));
        assert!(a.iter().all(|s| s.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
        assert!(synth_dataset(0, 16, 2, &mut ChaCha8Rng::seed_from_u64(0)).is_empty());
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let (t, v) = split_indices(10, 0.2, 3);
        assert_eq!((t.len(), v.len()), (8, 2));
        let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }
}
