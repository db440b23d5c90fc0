//! Segmentation metrics: Dice, 95th-percentile Hausdorff distance and
//! confusion-derived rates.

use serde::{Deserialize, Serialize};

/// Binary mask of class `k` in a label map.
pub fn class_mask(labels: &[u8], k: u8) -> Vec<bool> {
    labels.iter().map(|&l| l == k).collect()
}

/// `2|A ∩ B| / (|A| + |B|)`, 1 when both are empty.
pub fn dice(pred: &[bool], gt: &[bool]) -> f64 {
    assert_eq!(pred.len(), gt.len(), "mask sizes differ");
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(gt) {
        inter += (p && t) as usize;
        a += p as usize;
        b += t as usize;
    }
    if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    }
}

/// Foreground pixels with at least one background 4-neighbour; pixels
/// outside the image count as background.
pub fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    assert_eq!(mask.len(), h * w);
    let at = |i: isize, j: isize| i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w && mask[i as usize * w + j as usize];
    let mut out = vec![false; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            if at(i, j) && !(at(i - 1, j) && at(i + 1, j) && at(i, j - 1) && at(i, j + 1)) {
                out[i as usize * w + j as usize] = true;
            }
        }
    }
    out
}

/// Exact squared Euclidean distance to the nearest true site, by the
/// separable lower-envelope transform. Without sites every entry is
/// infinite.
pub fn squared_distance_transform(sites: &[bool], h: usize, w: usize) -> Vec<f64> {
    const INF: f64 = f64::INFINITY;
    let mut grid: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { INF }).collect();
    let mut buf = vec![0.0; h.max(w)];
    let mut out = vec![0.0; h.max(w)];
    for j in 0..w {
        for i in 0..h {
            buf[i] = grid[i * w + j];
        }
        envelope_1d(&buf[..h], &mut out[..h]);
        for i in 0..h {
            grid[i * w + j] = out[i];
        }
    }
    for i in 0..h {
        buf[..w].copy_from_slice(&grid[i * w..(i + 1) * w]);
        envelope_1d(&buf[..w], &mut out[..w]);
        grid[i * w..(i + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

/// `out[q] = min_p (q - p)^2 + f[p]`.
fn envelope_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let finite: Vec<usize> = (0..n).filter(|&p| f[p].is_finite()).collect();
    if finite.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut v = Vec::with_capacity(finite.len());
    let mut z: Vec<f64> = Vec::with_capacity(finite.len() + 1);
    for &q in &finite {
        let fq = f[q] + (q * q) as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
                    if s <= *z.last().expect("z tracks v") {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Percentile with linear interpolation between closest ranks.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    values[lo] + (values[hi] - values[lo]) * frac
}

/// Distances from every boundary pixel of `from` to the nearest boundary
/// pixel of `to`.
fn directed_distances(from: &[bool], to: &[bool], h: usize, w: usize) -> Vec<f64> {
    let edt = squared_distance_transform(to, h, w);
    from.iter()
        .zip(&edt)
        .filter(|(&b, _)| b)
        .map(|(_, &d2)| d2.sqrt())
        .collect()
}

/// Larger of the two directed 95th-percentile boundary distances, in
/// pixels. Both empty gives 0, exactly one empty gives infinity.
pub fn hd95(pred: &[bool], gt: &[bool], h: usize, w: usize) -> f64 {
    let (bp, bg) = (boundary(pred, h, w), boundary(gt, h, w));
    let (ep, eg) = (!bp.contains(&true), !bg.contains(&true));
    match (ep, eg) {
        (true, true) => 0.0,
        (true, false) | (false, true) => f64::INFINITY,
        _ => {
            let mut a = directed_distances(&bp, &bg, h, w);
            let mut b = directed_distances(&bg, &bp, h, w);
            percentile(&mut a, 95.0).max(percentile(&mut b, 95.0))
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn of(pred: &[bool], gt: &[bool]) -> Self {
        let mut c = Confusion::default();
        for (&p, &t) in pred.iter().zip(gt) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    fn ratio(num: usize, den: usize) -> f64 {
        if den == 0 {
            1.0
        } else {
            num as f64 / den as f64
        }
    }

    /// `TP / (TP + FN)`; 1 when there is nothing to find.
    pub fn sensitivity(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> f64 {
        Self::ratio(self.tn, self.tn + self.fp)
    }

    pub fn accuracy(&self) -> f64 {
        Self::ratio(self.tp + self.tn, self.tp + self.tn + self.fp + self.fn_)
    }

    pub fn iou(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fp + self.fn_)
    }
}

/// Metrics of one class (or their macro average).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub dsc: f64,
    /// Pixels; infinite (serialized as null) when no finite value exists.
    pub hd95: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
    pub miou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `(class label, metrics)` for every foreground class.
    pub per_class: Vec<(u8, ClassMetrics)>,
    pub mean: ClassMetrics,
    pub samples: usize,
    /// hd95 values left out of averages because one mask was empty.
    pub hd95_excluded: usize,
}

/// Classes reported: foreground labels, or label 0 for a one-class problem.
fn reported_classes(num_classes: usize) -> Vec<u8> {
    if num_classes <= 1 {
        vec![0]
    } else {
        (1..num_classes as u8).collect()
    }
}

/// Per-sample accumulation, averaged over samples then over classes.
#[derive(Debug, Clone)]
pub struct MetricsAccumulator {
    classes: Vec<u8>,
    sums: Vec<ClassMetrics>,
    hd_counts: Vec<usize>,
    samples: usize,
    excluded: usize,
}

impl MetricsAccumulator {
    pub fn new(num_classes: usize) -> Self {
        let classes = reported_classes(num_classes);
        let n = classes.len();
        MetricsAccumulator {
            classes,
            sums: vec![ClassMetrics::default(); n],
            hd_counts: vec![0; n],
            samples: 0,
            excluded: 0,
        }
    }

    /// Adds one `h x w` label-map pair.
    pub fn add(&mut self, pred: &[u8], gt: &[u8], h: usize, w: usize) {
        for (ci, &k) in self.classes.iter().enumerate() {
            let (p, t) = (class_mask(pred, k), class_mask(gt, k));
            let c = Confusion::of(&p, &t);
            let s = &mut self.sums[ci];
            s.dsc += dice(&p, &t);
            s.sensitivity += c.sensitivity();
            s.specificity += c.specificity();
            s.accuracy += c.accuracy();
            s.miou += c.iou();
            let hd = hd95(&p, &t, h, w);
            if hd.is_finite() {
                s.hd95 += hd;
                self.hd_counts[ci] += 1;
            } else {
                self.excluded += 1;
            }
        }
        self.samples += 1;
    }

    pub fn finish(&self) -> MetricsReport {
        if self.excluded > 0 {
            log::warn!("{} hd95 values excluded from averages (one mask empty)", self.excluded);
        }
        let n = self.samples.max(1) as f64;
        let per_class: Vec<(u8, ClassMetrics)> = self
            .classes
            .iter()
            .zip(&self.sums)
            .zip(&self.hd_counts)
            .map(|((&k, s), &hc)| {
                (
                    k,
                    ClassMetrics {
                        dsc: s.dsc / n,
                        hd95: if hc == 0 { f64::INFINITY } else { s.hd95 / hc as f64 },
                        sensitivity: s.sensitivity / n,
                        specificity: s.specificity / n,
                        accuracy: s.accuracy / n,
                        miou: s.miou / n,
                    },
                )
            })
            .collect();
        let m = per_class.len().max(1) as f64;
        let finite_hd: Vec<f64> = per_class.iter().map(|(_, c)| c.hd95).filter(|v| v.is_finite()).collect();
        let mean = ClassMetrics {
            dsc: per_class.iter().map(|(_, c)| c.dsc).sum::<f64>() / m,
            hd95: if finite_hd.is_empty() {
                f64::INFINITY
            } else {
                finite_hd.iter().sum::<f64>() / finite_hd.len() as f64
            },
            sensitivity: per_class.iter().map(|(_, c)| c.sensitivity).sum::<f64>() / m,
            specificity: per_class.iter().map(|(_, c)| c.specificity).sum::<f64>() / m,
            accuracy: per_class.iter().map(|(_, c)| c.accuracy).sum::<f64>() / m,
            miou: per_class.iter().map(|(_, c)| c.miou).sum::<f64>() / m,
        };
        MetricsReport {
            per_class,
            mean,
            samples: self.samples,
            hd95_excluded: self.excluded,
        }
    }
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<7} {:>7} {:>8} {:>7} {:>7} {:>7} {:>7}", "class", "DSC", "HD95", "SE", "SP", "ACC", "mIoU")?;
        let row = |f: &mut std::fmt::Formatter<'_>, name: String, c: &ClassMetrics| {
            writeln!(
                f,
                "{name:<7} {:>7.4} {:>8.3} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
                c.dsc, c.hd95, c.sensitivity, c.specificity, c.accuracy, c.miou
            )
        };
        for (k, c) in &self.per_class {
            row(f, k.to_string(), c)?;
        }
        row(f, "mean".into(), &self.mean)?;
        write!(f, "({} samples, {} hd95 values excluded)", self.samples, self.hd95_excluded)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> Vec<bool> {
        let mut m = vec![false; h * w];
        for &(i, j) in on {
            m[i * w + j] = true;
        }
        m
    }

    #[test]
    fn dice_examples() {
        let a = mask(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(dice(&a, &a), 1.0);
        let b = mask(4, 4, &[(2, 2), (2, 3), (3, 2), (3, 3)]);
        assert_eq!(dice(&a, &b), 0.0);
        let c = mask(4, 4, &[(0, 0), (0, 1), (2, 0), (2, 1)]);
        assert_eq!(dice(&a, &c), 0.5);
        assert_eq!(dice(&[false; 4], &[false; 4]), 1.0);
    }

    #[test]
    fn hd95_examples() {
        let a = mask(8, 8, &[(2, 2), (2, 3), (3, 2), (3, 3)]);
        assert_eq!(hd95(&a, &a, 8, 8), 0.0);
        let p = mask(8, 8, &[(1, 1)]);
        let q = mask(8, 8, &[(1, 4)]);
        assert_eq!(hd95(&p, &q, 8, 8), 3.0);
        assert_eq!(hd95(&p, &[false; 64], 8, 8), f64::INFINITY);
        assert_eq!(hd95(&[false; 64], &[false; 64], 8, 8), 0.0);
    }

    #[test]
    fn confusion_examples() {
        let c = Confusion::of(&[true, true, false, false], &[true, false, true, false]);
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (1, 1, 1, 1));
        assert_eq!((c.sensitivity(), c.specificity(), c.accuracy()), (0.5, 0.5, 0.5));
        assert_eq!(c.iou(), 1.0 / 3.0);
        let gt = [true, false, true, false];
        let inv: Vec<bool> = gt.iter().map(|v| !v).collect();
        let c = Confusion::of(&inv, &gt);
        assert_eq!((c.sensitivity(), c.specificity()), (0.0, 0.0));
        let c = Confusion::of(&gt, &gt);
        assert_eq!((c.sensitivity(), c.specificity(), c.accuracy(), c.iou()), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn percentile_matches_linear_rule() {
        let mut v = vec![4.0, 1.0, 3.0, 2.0];
        // position 0.95 * 3 = 2.85 between 3 and 4
        assert!((percentile(&mut v, 95.0) - 3.85).abs() < 1e-12);
    }

    #[test]
    fn interior_pixels_are_not_boundary() {
        let full = vec![true; 9];
        let b = boundary(&full, 3, 3);
        assert_eq!(b.iter().filter(|&&x| x).count(), 8);
        assert!(!b[4]);
    }
}
