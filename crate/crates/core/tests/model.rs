mod common;

use common::*;
use hiformer::cnn::CnnPyramid;
use hiformer::config::ModelConfig;
use hiformer::decoder::DecoderOptions;
use hiformer::dlf::DlfOutput;
use hiformer::tensor::{Graph, Tensor};
use hiformer::{build_config, count_parameters, tiny_config, CnnBackboneKind, HiFormerF64};

fn tiny(seed: u64) -> HiFormerF64 {
    HiFormerF64::new(&tiny_config(), seed).unwrap()
}

#[test]
fn tiny_pyramid_and_trunk_shapes() {
    let m = tiny(0);
    let g = Graph::inference(&m.store);
    let x = g.constant(uniform(&[2, 3, 32, 32], 1.0, &mut rng(1)));
    let t = m.forward_detailed(&g, &x).unwrap();
    let shapes = |v: &[hiformer::tensor::Var<f64>; 3]| v.iter().map(|l| l.shape().to_vec()).collect::<Vec<_>>();
    assert_eq!(shapes(&t.pyramid.levels), vec![vec![2, 16, 8, 8], vec![2, 32, 4, 4], vec![2, 64, 2, 2]]);
    assert_eq!(shapes(&t.skips.levels), vec![vec![2, 8, 8, 8], vec![2, 16, 4, 4], vec![2, 32, 2, 2]]);
    assert_eq!((t.trunk.large.grid, t.trunk.large.dim()), ((8, 8), 8));
    assert_eq!((t.trunk.small.grid, t.trunk.small.dim()), ((2, 2), 32));
    assert_eq!(t.fused.large.shape(), &[2, 8, 8, 8]);
    assert_eq!(t.fused.small.shape(), &[2, 32, 2, 2]);
    assert_eq!(t.decoder.small_up.shape(), &[2, 8, 8, 8]);
    assert_eq!(t.decoder.large.shape(), &[2, 8, 8, 8]);
    assert_eq!(t.decoder.merged.shape(), &[2, 8, 8, 8]);
    assert_eq!(t.decoder.full.shape(), &[2, 8, 32, 32]);
    assert_eq!(t.logits().shape(), &[2, 2, 32, 32]);
}

#[test]
fn every_backbone_yields_the_advertised_pyramid() {
    for kind in CnnBackboneKind::ALL {
        let mut cfg = tiny_config();
        cfg.cnn = kind;
        cfg.input_hw = [64, 64];
        let m = hiformer::HiFormerF32::new(&cfg, 0).unwrap();
        let g = Graph::inference(&m.store);
        let x = g.constant(Tensor::full(vec![1, 3, 64, 64], 0.5));
        let p = m.cnn.forward(&g, &x).unwrap();
        let ch = kind.channels();
        for (i, l) in p.levels.iter().enumerate() {
            let side = 64 >> (i + 2);
            assert_eq!(l.shape(), &[1, ch[i], side, side], "{kind} level {i}");
        }
    }
}

#[test]
fn skip_projection_is_a_per_pixel_linear_map() {
    let mut m = tiny(2);
    randomize(&mut m.store, 0.5, &mut rng(3));
    let mut r = rng(4);
    let g = Graph::inference(&m.store);
    let levels = [[2, 16, 8, 8], [2, 32, 4, 4], [2, 64, 2, 2]].map(|s| g.constant(uniform(&s, 1.0, &mut r)));
    let p = CnnPyramid { levels: levels.clone() };
    let proj = m.cnn.project(&g, &p).unwrap();
    for i in 0..3 {
        let w = m.store.value(m.store.find_param(&format!("cnn.proj{i}.weight")).unwrap());
        let b = m.store.value(m.store.find_param(&format!("cnn.proj{i}.bias")).unwrap());
        let (cout, cin) = (w.dim(0), w.dim(1));
        let x = levels[i].value();
        let hw = x.dim(2) * x.dim(3);
        let y = proj.levels[i].value();
        assert_eq!(y.shape(), &[2, cout, x.dim(2), x.dim(3)]);
        for n in 0..2 {
            for o in 0..cout {
                for p in 0..hw {
                    let want = b.data()[o]
                        + (0..cin).map(|c| w.data()[o * cin + c] * x.data()[(n * cin + c) * hw + p]).sum::<f64>();
                    assert!((y.data()[(n * cout + o) * hw + p] - want).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn samples_in_a_batch_do_not_interact() {
    let m = tiny(5);
    let x = uniform(&[3, 3, 32, 32], 1.0, &mut rng(6));
    let batched = m.predict(&x).unwrap();
    for i in 0..3 {
        let one = m.predict(&Tensor::stack(&[x.index_leading(i).unwrap()]).unwrap()).unwrap();
        let want = batched.index_leading(i).unwrap();
        let diff = one.index_leading(0).unwrap().max_abs_diff(&want).unwrap();
        assert!(diff < 1e-6, "sample {i}: {diff}");
    }
}

#[test]
fn single_channel_input_is_replicated() {
    let m = tiny(7);
    let gray = uniform(&[1, 1, 32, 32], 1.0, &mut rng(8));
    let rgb = Tensor::from_fn(vec![1, 3, 32, 32], |i| gray.data()[i % 1024]);
    assert_eq!(m.predict(&gray).unwrap().data(), m.predict(&rgb).unwrap().data());
}

#[test]
fn wrong_input_size_is_rejected() {
    let m = tiny(0);
    assert!(m.predict(&Tensor::zeros(vec![1, 3, 48, 48])).is_err());
    assert!(m.predict(&Tensor::zeros(vec![3, 32, 32])).is_err());
}

fn decoder_input(r: &mut impl rand::Rng) -> (Tensor<f64>, Tensor<f64>) {
    (uniform(&[1, 32, 2, 2], 1.0, r), uniform(&[1, 8, 8, 8], 1.0, r))
}

#[test]
fn linearized_decoder_is_affine() {
    let mut m = tiny(9);
    m.decoder.options = DecoderOptions { relu: false, norm: false };
    let mut r = rng(10);
    let (a, b) = (decoder_input(&mut r), decoder_input(&mut r));
    let run = |s: &Tensor<f64>, l: &Tensor<f64>| {
        let g = Graph::inference(&m.store);
        let x = DlfOutput { small: g.constant(s.clone()), large: g.constant(l.clone()) };
        m.decoder.forward(&g, &x).unwrap().logits.to_tensor()
    };
    let t = 0.3;
    let mix = |p: &Tensor<f64>, q: &Tensor<f64>| p.zip_map(q, |u, v| t * u + (1.0 - t) * v).unwrap();
    let lhs = run(&mix(&a.0, &b.0), &mix(&a.1, &b.1));
    let rhs = mix(&run(&a.0, &a.1), &run(&b.0, &b.1));
    assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
}

#[test]
fn decoder_with_zero_weights_emits_the_head_bias() {
    let mut m = tiny(11);
    let ids: Vec<_> = m.store.ids().filter(|&id| m.store.param(id).name().starts_with("decoder.")).collect();
    for id in ids {
        let shape = m.store.value(id).shape().to_vec();
        m.store.set_value(id, Tensor::zeros(shape)).unwrap();
    }
    let head_bias = m.store.find_param("decoder.head.bias").unwrap();
    m.store.set_value(head_bias, Tensor::from_f64(vec![2], &[0.25, -1.5]).unwrap()).unwrap();
    let y = m.predict(&uniform(&[1, 3, 32, 32], 1.0, &mut rng(12))).unwrap();
    assert!(y.data()[..1024].iter().all(|&v| v == 0.25));
    assert!(y.data()[1024..].iter().all(|&v| v == -1.5));
}

#[test]
fn zeroed_projections_double_the_trunk_inputs() {
    let mut m = tiny(13);
    assert!(m.zero_output_projections() > 0);
    let g = Graph::inference(&m.store);
    let x = g.constant(uniform(&[2, 3, 32, 32], 1.0, &mut rng(14)));
    let t = m.forward_detailed(&g, &x).unwrap();
    // every stage is the identity, so each outer residual doubles its input
    let t0 = hiformer::swin::TokenMap::from_nchw(&g, &t.skips.levels[0]).unwrap();
    let doubled = t0.tokens.value().map(|v| 2.0 * v);
    assert_eq!(t.trunk.large.tokens.value().data(), doubled.data());
}

/// Independent shape walk of the trunk, fusion module and decoder.
fn transformer_counts(c: &ModelConfig) -> (usize, usize, usize) {
    let ln = |d: usize| 2 * d;
    let lin = |i: usize, o: usize| i * o + o;
    let m = c.window_size;
    let mut swin = 0;
    for s in 0..3 {
        let d = c.embed_dim << s;
        let block = ln(d) + lin(d, 3 * d) + lin(d, d) + (2 * m - 1).pow(2) * c.stage_heads[s] + ln(d)
            + lin(d, 4 * d)
            + lin(4 * d, d);
        swin += c.stage_depths[s] * block;
        if s < 2 {
            swin += ln(4 * d) + 4 * d * 2 * d;
        }
    }
    let dl = &c.dlf;
    let level = |d: usize, tokens: usize, depth: usize| {
        let hid = (d as f64 * dl.mlp_ratio).round() as usize;
        ln(d) + (tokens + 1) * d + depth * (ln(d) + lin(d, 3 * d) + lin(d, d) + ln(d) + lin(d, hid) + lin(hid, d))
    };
    let cross = |own: usize, other: usize| lin(own, other) + lin(other, own) + ln(other) + 4 * lin(other, other);
    let (hs, ws) = (c.input_hw[0] / 16, c.input_hw[1] / 16);
    let (hl, wl) = (c.input_hw[0] / 4, c.input_hw[1] / 4);
    let dlf = level(dl.dim_small, hs * ws, dl.depth_small)
        + level(dl.dim_large, hl * wl, dl.depth_large)
        + cross(dl.dim_small, dl.dim_large)
        + cross(dl.dim_large, dl.dim_small);
    let d = c.decoder_dim;
    let stage = |cin: usize| 9 * cin * d + d + 2 * d;
    let decoder = stage(4 * c.embed_dim) + stage(d) + stage(c.embed_dim) + 2 * stage(d) + 9 * d * c.num_classes + c.num_classes;
    (swin, dlf, decoder)
}

#[test]
fn tiny_parameter_count_matches_shape_walk() {
    let cfg = tiny_config();
    let r = count_parameters(&cfg).unwrap();
    let (swin, dlf, decoder) = transformer_counts(&cfg);
    // stem 7x7 conv + BN, three basic blocks (16, 32, 64), 1x1 projections
    let conv = |i: usize, o: usize, k: usize| i * o * k * k;
    let basic = |i: usize, o: usize| conv(i, o, 3) + conv(o, o, 3) + 4 * o + if i != o { conv(i, o, 1) + 2 * o } else { 0 };
    let cnn = conv(3, 16, 7) + 32 + basic(16, 16) + basic(16, 32) + basic(32, 64) + (16 * 8 + 8) + (32 * 16 + 16) + (64 * 32 + 32);
    assert_eq!(r.module("cnn"), cnn);
    assert_eq!(r.module("swin"), swin);
    assert_eq!(r.module("dlf"), dlf);
    assert_eq!(r.module("decoder"), decoder);
    assert_eq!(r.total, cnn + swin + dlf + decoder);
}

#[test]
fn named_parameter_counts_match_shape_walk() {
    // torchvision totals minus layer4 and the classifier, plus projections
    let resnet34_to_layer3 = 21_797_672 - 13_114_368 - 513_000;
    let resnet50_to_layer3 = 25_557_032 - 14_964_736 - 2_049_000;
    let proj = |ch: [usize; 3]| ch[0] * 96 + 96 + ch[1] * 192 + 192 + ch[2] * 384 + 384;
    for (name, cnn) in [
        ("hiformer-s", resnet34_to_layer3 + proj([64, 128, 256])),
        ("hiformer-b", resnet50_to_layer3 + proj([256, 512, 1024])),
        ("hiformer-l", resnet34_to_layer3 + proj([64, 128, 256])),
    ] {
        let cfg = build_config(name).unwrap();
        let r = count_parameters(&cfg).unwrap();
        let (swin, dlf, decoder) = transformer_counts(&cfg);
        assert_eq!(r.module("cnn"), cnn, "{name}");
        assert_eq!(r.module("swin"), swin, "{name}");
        assert_eq!(r.module("dlf"), dlf, "{name}");
        assert_eq!(r.module("decoder"), decoder, "{name}");
    }
}

#[test]
fn disabling_fusion_removes_exactly_its_parameters() {
    for cfg in [tiny_config(), build_config("hiformer-s").unwrap()] {
        let full = count_parameters(&cfg).unwrap();
        let mut off = cfg.clone();
        off.use_dlf = false;
        let bare = count_parameters(&off).unwrap();
        assert!(full.module("dlf") > 0);
        assert_eq!(bare.module("dlf"), 0);
        assert_eq!(full.total - bare.total, full.module("dlf"));
    }
}

#[test]
fn seeds_change_weights_but_not_counts() {
    let (a, b, c) = (tiny(0), tiny(0), tiny(1));
    assert_eq!(a.param_report(), c.param_report());
    let data = |m: &HiFormerF64| m.store.params().iter().flat_map(|p| p.value().data().to_vec()).collect::<Vec<_>>();
    assert_eq!(data(&a), data(&b));
    assert_ne!(data(&a), data(&c));
}

#[test]
fn precision_cast_preserves_predictions() {
    let m32 = hiformer::HiFormerF32::new(&tiny_config(), 3).unwrap();
    let m64: HiFormerF64 = m32.cast();
    let x = uniform(&[1, 3, 32, 32], 1.0, &mut rng(15));
    let y64 = m64.predict(&x).unwrap();
    let y32 = m32.predict(&x.cast()).unwrap().cast::<f64>();
    assert!(y64.max_abs_diff(&y32).unwrap() < 1e-3);
}
