//! Brute-force segmentation metrics and random mask pairs.

use rand::Rng;

/// Random blob-plus-noise mask; sometimes empty, sometimes full.
pub fn random_mask(h: usize, w: usize, rng: &mut impl Rng) -> Vec<bool> {
    match rng.random_range(0..20) {
        0 => return vec![false; h * w],
        1 => return vec![true; h * w],
        _ => {}
    }
    let (ci, cj) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
    let (ri, rj) = (rng.random_range(1.0..h as f64 / 2.0), rng.random_range(1.0..w as f64 / 2.0));
    let noise = rng.random_range(0.0..0.15);
    (0..h * w)
        .map(|p| {
            let (i, j) = ((p / w) as f64, (p % w) as f64);
            let inside = ((i - ci) / ri).powi(2) + ((j - cj) / rj).powi(2) <= 1.0;
            inside ^ (rng.random::<f64>() < noise)
        })
        .collect()
}

pub fn brute_dice(p: &[bool], g: &[bool]) -> f64 {
    let inter = p.iter().zip(g).filter(|(a, b)| **a && **b).count();
    let total = p.iter().filter(|v| **v).count() + g.iter().filter(|v| **v).count();
    if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 }
}

/// `(tp, fp, fn, tn)` by direct counting.
pub fn brute_counts(p: &[bool], g: &[bool]) -> (usize, usize, usize, usize) {
    let c = |x: bool, y: bool| p.iter().zip(g).filter(|(a, b)| **a == x && **b == y).count();
    (c(true, true), c(true, false), c(false, true), c(false, false))
}

fn brute_boundary(m: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if !m[i * w + j] {
                continue;
            }
            let interior = i > 0 && i + 1 < h && j > 0 && j + 1 < w
                && m[(i - 1) * w + j] && m[(i + 1) * w + j] && m[i * w + j - 1] && m[i * w + j + 1];
            if !interior {
                out.push((i, j));
            }
        }
    }
    out
}

fn brute_percentile95(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = 0.95 * (v.len() - 1) as f64;
    let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
    v[lo] * (1.0 - (rank - lo as f64)) + v[hi] * (rank - lo as f64)
}

/// Symmetric 95th-percentile boundary distance by exhaustive pair search.
pub fn brute_hd95(p: &[bool], g: &[bool], h: usize, w: usize) -> f64 {
    let (bp, bg) = (brute_boundary(p, h, w), brute_boundary(g, h, w));
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return f64::INFINITY,
        _ => {}
    }
    let directed = |a: &[(usize, usize)], b: &[(usize, usize)]| {
        let d: Vec<f64> = a
            .iter()
            .map(|&(i, j)| {
                b.iter()
                    .map(|&(k, l)| ((i as f64 - k as f64).powi(2) + (j as f64 - l as f64).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        brute_percentile95(d)
    };
    directed(&bp, &bg).max(directed(&bg, &bp))
}
