//! Window attention computed one window at a time.

use hiformer::swin::SwinBlock;
use hiformer::tensor::ParamStore;

use super::{layer_norm, mha, Rows};

fn grid_cell(rows: &Rows, w: usize, i: usize, j: usize) -> Vec<f64> {
    rows[i * w + j].clone()
}

/// Relative position bias straight from the table layout:
/// row `(dy + M - 1) * (2M - 1) + (dx + M - 1)`, column = head.
pub fn table_bias<'a>(store: &'a ParamStore<f64>, b: &SwinBlock) -> impl Fn(usize, usize, usize) -> f64 + 'a {
    let m = b.attn.window as isize;
    let heads = b.attn.mha.heads;
    let table = store.value(b.attn.bias_table).data();
    move |h, q, k| {
        let (qy, qx) = (q as isize / m, q as isize % m);
        let (ky, kx) = (k as isize / m, k as isize % m);
        let row = (qy - ky + m - 1) * (2 * m - 1) + (qx - kx + m - 1);
        table[row as usize * heads + h]
    }
}

/// Window attention of the (cyclically shifted) grid, computed window by
/// window; with a shift, keys from the other side of a wrap-around seam are
/// excluded.
pub fn naive_window_attention(store: &ParamStore<f64>, b: &SwinBlock, sample: &Rows, grid: (usize, usize)) -> Rows {
    let (h, w) = grid;
    let (m, s) = (b.attn.window, b.shift);
    let normed = layer_norm(store, &b.norm1, sample);
    let bias = table_bias(store, b);
    let wrapped_row = |i: usize| s > 0 && i >= h - s;
    let wrapped_col = |j: usize| s > 0 && j >= w - s;
    let mut out = vec![Vec::new(); h * w];
    for wi in 0..h / m {
        for wj in 0..w / m {
            // shifted coordinates of the window members
            let cells: Vec<(usize, usize)> = (0..m * m).map(|t| (wi * m + t / m, wj * m + t % m)).collect();
            let rows: Rows = cells.iter().map(|&(i, j)| grid_cell(&normed, w, (i + s) % h, (j + s) % w)).collect();
            let masked = |hd: usize, q: usize, k: usize| {
                let (qi, qj) = cells[q];
                let (ki, kj) = cells[k];
                let same = wrapped_row(qi) == wrapped_row(ki) && wrapped_col(qj) == wrapped_col(kj);
                bias(hd, q, k) + if same { 0.0 } else { f64::NEG_INFINITY }
            };
            let y = mha(store, &b.attn.mha, &rows, &masked);
            for (t, &(i, j)) in cells.iter().enumerate() {
                out[((i + s) % h) * w + (j + s) % w] = y[t].clone();
            }
        }
    }
    out
}
