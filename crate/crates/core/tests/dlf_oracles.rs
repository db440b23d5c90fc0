mod common;

use common::*;
use hiformer::dlf::{CrossDirection, Dlf, EncoderBlock};
use hiformer::swin::TokenMap;
use hiformer::tensor::{Graph, Init, ParamStore, Tensor};
use hiformer::{build_config, tiny_config, Error};

fn tiny_dlf(seed: u64) -> (ParamStore<f64>, Dlf) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let d = Dlf::new(&mut Init::new(&mut store, &mut r), &tiny_config()).unwrap();
    randomize(&mut store, 0.5, &mut r);
    (store, d)
}

fn mean_rows(rows: &Rows) -> Vec<f64> {
    let n = rows.len() as f64;
    (0..rows[0].len()).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect()
}

/// Single-query cross attention written out by hand.
fn naive_cross(store: &ParamStore<f64>, c: &CrossDirection, cls: &[f64], tokens: &Rows) -> (Vec<f64>, Vec<f64>) {
    let projected = linear(store, &c.f, &vec![cls.to_vec()])[0].clone();
    let mut seq = vec![projected.clone()];
    seq.extend(tokens.iter().cloned());
    let normed = layer_norm(store, &c.norm, &seq);
    let q = linear(store, &c.wq, &vec![normed[0].clone()])[0].clone();
    let k = linear(store, &c.wk, &normed);
    let v = linear(store, &c.wv, &normed);
    let hd = c.dim / c.heads;
    let mut o = vec![0.0; c.dim];
    for h in 0..c.heads {
        let cols = h * hd..(h + 1) * hd;
        let scores: Vec<f64> = k
            .iter()
            .map(|kr| cols.clone().map(|j| q[j] * kr[j]).sum::<f64>() / (hd as f64).sqrt())
            .collect();
        let p = softmax(&scores);
        for (pi, vr) in p.iter().zip(&v) {
            for j in cols.clone() {
                o[j] += pi * vr[j];
            }
        }
    }
    let y: Vec<f64> = projected.iter().zip(&linear(store, &c.proj, &vec![o])[0]).map(|(a, b)| a + b).collect();
    let back = linear(store, &c.g, &vec![y.clone()])[0].clone();
    (y, back)
}

#[test]
fn class_token_of_one_token_is_its_normalization() {
    let (store, d) = tiny_dlf(1);
    let x = uniform(&[2, 1, 8], 1.0, &mut rng(2));
    let g = Graph::inference(&store);
    let cls = d.large.class_token(&g, &TokenMap { tokens: g.constant(x.clone()), grid: (1, 1) }).unwrap();
    assert_eq!(cls.shape(), &[2, 1, 8]);
    let want: Vec<Rows> = samples(&x).iter().map(|s| layer_norm(&store, &d.large.cls_norm, s)).collect();
    assert!(max_abs(&samples(&cls.to_tensor()), &want) < 1e-14);
}

#[test]
fn class_token_of_constant_tokens_is_the_token_normalization() {
    let (store, d) = tiny_dlf(3);
    let token = [0.5, -0.25, 1.0, 0.0, 2.0, -1.5, 0.75, 0.1];
    let x = Tensor::from_fn(vec![1, 64, 8], |i| token[i % 8]);
    let g = Graph::inference(&store);
    let cls = d.large.class_token(&g, &TokenMap { tokens: g.constant(x), grid: (8, 8) }).unwrap();
    let want = vec![layer_norm(&store, &d.large.cls_norm, &vec![token.to_vec()])];
    assert!(max_abs(&samples(&cls.to_tensor()), &want) < 1e-14);
}

#[test]
fn class_token_averages_normalized_tokens() {
    let (store, d) = tiny_dlf(4);
    let x = uniform(&[3, 2, 8], 1.0, &mut rng(5));
    let g = Graph::inference(&store);
    let cls = d.large.class_token(&g, &TokenMap { tokens: g.constant(x.clone()), grid: (1, 2) }).unwrap();
    let want: Vec<Rows> = samples(&x)
        .iter()
        .map(|s| {
            let n = layer_norm(&store, &d.large.cls_norm, s);
            vec![n[0].iter().zip(&n[1]).map(|(a, b)| 0.5 * (a + b)).collect()]
        })
        .collect();
    assert!(max_abs(&samples(&cls.to_tensor()), &want) < 1e-14);
    let many = uniform(&[1, 10, 8], 1.0, &mut rng(6));
    let cls = d.large.class_token(&g, &TokenMap { tokens: g.constant(many.clone()), grid: (2, 5) }).unwrap();
    let want = vec![vec![mean_rows(&layer_norm(&store, &d.large.cls_norm, &samples(&many)[0]))]];
    assert!(max_abs(&samples(&cls.to_tensor()), &want) < 1e-14);
}

#[test]
fn empty_level_has_no_class_token() {
    let (store, d) = tiny_dlf(7);
    let g = Graph::inference(&store);
    let x = g.constant(Tensor::zeros(vec![1, 0, 8]));
    assert!(matches!(d.large.class_token(&g, &TokenMap { tokens: x, grid: (0, 0) }), Err(Error::EmptyTokens)));
}

#[test]
fn embedding_prepends_class_token_and_adds_positions() {
    let (store, d) = tiny_dlf(8);
    let x = uniform(&[1, 4, 32], 1.0, &mut rng(9));
    let g = Graph::inference(&store);
    let e = d.small.embed(&g, &TokenMap { tokens: g.constant(x.clone()), grid: (2, 2) }).unwrap();
    assert_eq!(e.seq.shape(), &[1, 5, 32]);
    let rows = samples(&x)[0].clone();
    let mut seq = vec![mean_rows(&layer_norm(&store, &d.small.cls_norm, &rows))];
    seq.extend(rows);
    let pos = samples(store.value(d.small.pos))[0].clone();
    assert!(max_abs(&samples(&e.seq.to_tensor()), &[add(&seq, &pos)]) < 1e-14);
    let wrong = g.constant(Tensor::zeros(vec![1, 9, 32]));
    assert!(d.small.embed(&g, &TokenMap { tokens: wrong, grid: (3, 3) }).is_err());
}

#[test]
fn encoder_block_follows_pre_norm_recurrence() {
    let mut store = ParamStore::new();
    let mut r = rng(10);
    let blk = EncoderBlock::new(&mut Init::new(&mut store, &mut r), "enc", 4, 2, 8).unwrap();
    randomize(&mut store, 0.5, &mut r);
    let x = uniform(&[2, 3, 4], 1.0, &mut r);
    let g = Graph::inference(&store);
    let got = samples(&blk.forward(&g, &g.constant(x.clone())).unwrap().to_tensor());
    let want: Vec<Rows> = samples(&x)
        .iter()
        .map(|z| {
            let zhat = add(&mha(&store, &blk.attn, &layer_norm(&store, &blk.norm1, z), &|_, _, _| 0.0), z);
            add(&mlp(&store, &blk.mlp, &layer_norm(&store, &blk.norm2, &zhat)), &zhat)
        })
        .collect();
    assert!(max_abs(&got, &want) < 1e-12);
}

#[test]
fn cross_attention_matches_single_query_oracle() {
    let (store, d) = tiny_dlf(11);
    let mut r = rng(12);
    for (dir, own, other, n_other) in [(&d.cross_small, 32, 8, 64), (&d.cross_large, 8, 32, 4)] {
        let cls = uniform(&[2, 1, own], 1.0, &mut r);
        let tokens = uniform(&[2, n_other, other], 1.0, &mut r);
        let g = Graph::inference(&store);
        let out = dir.forward(&g, &g.constant(cls.clone()), &g.constant(tokens.clone())).unwrap();
        assert_eq!(out.projected_cls.shape(), &[2, 1, other]);
        assert_eq!(out.y.shape(), &[2, 1, other]);
        assert_eq!(out.cls.shape(), &[2, 1, own]);
        let (cs, ts) = (samples(&cls), samples(&tokens));
        let (ys, backs): (Vec<Rows>, Vec<Rows>) = cs
            .iter()
            .zip(&ts)
            .map(|(c, t)| {
                let (y, b) = naive_cross(&store, dir, &c[0], t);
                (vec![y], vec![b])
            })
            .unzip();
        assert!(max_abs(&samples(&out.y.to_tensor()), &ys) < 1e-12);
        assert!(max_abs(&samples(&out.cls.to_tensor()), &backs) < 1e-12);
        assert_eq!(g.stats().max_query_rows, 1);
    }
}

#[test]
fn zeroed_projections_make_encoders_identity() {
    let (mut store, d) = tiny_dlf(13);
    assert!(hiformer::model::zero_output_projections(&mut store) > 0);
    let x = uniform(&[2, 5, 32], 3.0, &mut rng(14));
    let g = Graph::inference(&store);
    for blk in &d.small.blocks {
        let y = blk.forward(&g, &g.constant(x.clone())).unwrap();
        assert_eq!(y.value().data(), x.data());
    }
}

#[test]
fn cross_fuse_swaps_class_tokens_and_keeps_patches() {
    let (store, d) = tiny_dlf(15);
    let mut r = rng(16);
    let g = Graph::inference(&store);
    let large = TokenMap { tokens: g.constant(uniform(&[1, 64, 8], 1.0, &mut r)), grid: (8, 8) };
    let small = TokenMap { tokens: g.constant(uniform(&[1, 4, 32], 1.0, &mut r)), grid: (2, 2) };
    let es = d.small.encode(&g, &d.small.embed(&g, &small).unwrap()).unwrap();
    let el = d.large.encode(&g, &d.large.embed(&g, &large).unwrap()).unwrap();
    let f = d.cross_fuse(&g, &es, &el).unwrap();
    assert_eq!(f.small.seq.shape(), &[1, 5, 32]);
    assert_eq!(f.large.seq.shape(), &[1, 65, 8]);
    let fs = samples(&f.small.seq.to_tensor())[0].clone();
    let enc_s = samples(&es.seq.to_tensor())[0].clone();
    assert_eq!(&fs[..4], &enc_s[1..]);
    assert_eq!(fs[4], samples(&f.small_dir.cls.to_tensor())[0][0]);
    let out = d.forward(&g, &large, &small).unwrap();
    assert_eq!(out.small.shape(), &[1, 32, 2, 2]);
    assert_eq!(out.large.shape(), &[1, 8, 8, 8]);
}

#[test]
fn bypass_returns_the_trunk_maps() {
    let store = ParamStore::<f64>::new();
    let g = Graph::inference(&store);
    let mut r = rng(17);
    let lt = uniform(&[1, 64, 8], 1.0, &mut r);
    let large = TokenMap { tokens: g.constant(lt.clone()), grid: (8, 8) };
    let small = TokenMap { tokens: g.constant(uniform(&[1, 4, 32], 1.0, &mut r)), grid: (2, 2) };
    let out = Dlf::bypass(&g, &large, &small).unwrap();
    assert_eq!(out.large.shape(), &[1, 8, 8, 8]);
    // channel c of pixel p is token p's feature c
    for p in 0..64 {
        for c in 0..8 {
            assert_eq!(out.large.value().data()[c * 64 + p], lt.data()[p * 8 + c]);
        }
    }
}

fn base_cross() -> (ParamStore<f32>, Dlf) {
    let mut store = ParamStore::new();
    let mut r = rng(18);
    let d = Dlf::new(&mut Init::new(&mut store, &mut r), &build_config("hiformer-b").unwrap()).unwrap();
    (store, d)
}

fn score_entries(store: &ParamStore<f32>, dir: &CrossDirection, own: usize, other: usize, n: usize) -> u64 {
    let g = Graph::inference(store);
    let cls = g.constant(Tensor::full(vec![1, 1, own], 0.1));
    let tokens = g.constant(Tensor::from_fn(vec![1, n, other], |i| ((i % 7) as f32) * 0.1));
    dir.forward(&g, &cls, &tokens).unwrap();
    let s = g.stats();
    assert_eq!(s.attention_calls, 1);
    assert_eq!(s.max_query_rows, 1);
    s.attention_score_entries
}

#[test]
fn large_level_keys_include_the_projected_class_token() {
    let (store, d) = base_cross();
    let heads = d.cross_small.heads as u64;
    assert_eq!(score_entries(&store, &d.cross_small, 384, 96, 3136), heads * 3137);
}

#[test]
fn cross_attention_cost_doubles_with_token_count() {
    let (store, d) = base_cross();
    let a = score_entries(&store, &d.cross_small, 384, 96, 895);
    let b = score_entries(&store, &d.cross_small, 384, 96, 1791);
    assert_eq!(a, d.cross_small.heads as u64 * 896);
    assert_eq!(b, 2 * a);
}
