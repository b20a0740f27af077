mod common;

use common::*;
use migc_core::geometry::{build_layout_attention_mask, rasterize_mask, BoundingBox, Mask, MaskSet};
use migc_core::migc::*;
use migc_core::model::{Conditioning, ForwardOptions};
use migc_core::unet::{CrossAttention, Site};
use migc_core::vocab::{description_tokens, ToyVocab, NULL_TOKEN};
use migc_core::{Color, CoreError, Shape};
use migc_tensor::nn::{attention, Mlp};
use migc_tensor::{grad_check, FourierSpec, GradCheckOptions, Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const C: usize = 8;
const SIDE: usize = 4;
const HW: usize = SIDE * SIDE;
const TEXT: usize = 6;

struct Fixture {
    store: ParamStore,
    ca: CrossAttention,
    vocab: ToyVocab,
    mlp: Mlp,
    fourier: FourierSpec,
    ea: EnhancementAttention,
    la: LayoutAttention,
    sac: Sac,
}

impl Fixture {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ca = CrossAttention::new(&mut store, "ca", C, TEXT, 4, 2, &mut rng).unwrap();
        let vocab = ToyVocab::new(&mut store, "vocab", TEXT, &mut rng).unwrap();
        let fourier = FourierSpec::geometric(2);
        let mlp = Mlp::new(&mut store, "pos", &[fourier.output_len(), 12, TEXT], &mut rng).unwrap();
        let ea = EnhancementAttention::new(&mut store, "ea", C, TEXT, 4, &mut rng).unwrap();
        let la = LayoutAttention::new(&mut store, "la", C, 4, &mut rng).unwrap();
        let sac = Sac::new(&mut store, "sac", C, 4, 3, 2, 3, &mut rng).unwrap();
        Self {
            store,
            ca,
            vocab,
            mlp,
            fourier,
            ea,
            la,
            sac,
        }
    }

    /// Every trainable block gets nonzero weights, including the zero-init ones.
    fn randomized(seed: u64) -> Self {
        let mut f = Self::new(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        for p in ["ea.", "la.", "sac.", "pos."] {
            randomize(&mut f.store, p, 0.5, &mut rng);
        }
        f
    }
}

fn features(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[C, HW], |_| rng.random_range(-1.0..1.0))
}

fn sq_sum(g: &mut Graph, x: Var) -> Var {
    let s = g.mul(x, x).unwrap();
    g.sum(s).unwrap()
}

fn outside_max(t: &Tensor, m: &Mask) -> f64 {
    let hw = m.len();
    t.data()
        .iter()
        .enumerate()
        .filter(|(i, _)| !m.bits()[i % hw])
        .map(|(_, v)| v.abs())
        .fold(0.0, f64::max)
}

fn gc_opts() -> GradCheckOptions {
    GradCheckOptions {
        eps: 1e-6,
        max_coords_per_tensor: Some(12),
        seed: 3,
    }
}

fn red_circle() -> migc_core::Description {
    desc(Color::Red, Shape::Circle)
}

#[test]
fn cross_attention_shading_examples() {
    let f = Fixture::new(1);
    let mut g = Graph::new(&f.store);
    let xn = g.input(features(2));
    let tokens = f.vocab.embed(&mut g, &description_tokens(Some(&red_circle()))).unwrap();

    let zero = cross_attention_shading(&mut g, &f.ca, xn, (SIDE, SIDE), tokens, &Mask::zeros(SIDE, SIDE)).unwrap();
    assert_eq!(g.value(zero).max_abs(), 0.0);

    let full = cross_attention_shading(&mut g, &f.ca, xn, (SIDE, SIDE), tokens, &Mask::ones(SIDE, SIDE)).unwrap();
    let plain = f.ca.shade(&mut g, xn, tokens).unwrap();
    assert_eq!(g.value(full), g.value(plain.residual));

    let m = rasterize_mask(&BoundingBox::new(0.25, 0.0, 0.75, 0.5).unwrap(), SIDE, SIDE).unwrap();
    let r = cross_attention_shading(&mut g, &f.ca, xn, (SIDE, SIDE), tokens, &m).unwrap();
    assert_eq!(outside_max(g.value(r), &m), 0.0);
    assert!(g.value(r).max_abs() > 0.0);

    let err = cross_attention_shading(&mut g, &f.ca, xn, (SIDE, SIDE), tokens, &Mask::ones(2, 2));
    assert!(matches!(err, Err(CoreError::Resolution { .. })));
}

#[test]
fn background_shading_examples() {
    let f = Fixture::new(4);
    let mut g = Graph::new(&f.store);
    let xn = g.input(features(5));
    let prompt = f.vocab.embed(&mut g, &[0, 7, 1, 8]).unwrap();
    let none = MaskSet::from_boxes(&[], SIDE, SIDE).unwrap();
    let r = background_shading(&mut g, &f.ca, xn, (SIDE, SIDE), prompt, &none.background).unwrap();
    let plain = f.ca.shade(&mut g, xn, prompt).unwrap();
    assert_eq!(g.value(r), g.value(plain.residual));

    let cover = MaskSet::from_boxes(&[BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap()], SIDE, SIDE).unwrap();
    let r = background_shading(&mut g, &f.ca, xn, (SIDE, SIDE), prompt, &cover.background).unwrap();
    assert_eq!(g.value(r).max_abs(), 0.0);

    let part = MaskSet::from_boxes(&[BoundingBox::new(0.0, 0.25, 0.5, 1.0).unwrap()], SIDE, SIDE).unwrap();
    let r = background_shading(&mut g, &f.ca, xn, (SIDE, SIDE), prompt, &part.background).unwrap();
    assert_eq!(outside_max(g.value(r), &part.background), 0.0);
}

#[test]
fn grounded_tokens_examples() {
    let f = Fixture::new(6);
    let mut g = Graph::new(&f.store);
    let a = BoundingBox::new(0.0, 0.0, 0.5, 0.5).unwrap();
    let b = BoundingBox::new(0.5, 0.5, 1.0, 1.0).unwrap();
    let d = red_circle();
    let ga = make_grounded_tokens(&mut g, &f.vocab, &f.mlp, &f.fourier, Some(&d), &a).unwrap();
    let gb = make_grounded_tokens(&mut g, &f.vocab, &f.mlp, &f.fourier, Some(&d), &b).unwrap();
    let ga2 = make_grounded_tokens(&mut g, &f.vocab, &f.mlp, &f.fourier, Some(&d), &a).unwrap();
    assert_eq!(g.shape(ga), &[3, TEXT]);
    assert_eq!(g.value(ga), g.value(ga2));
    // text rows agree, the position row tells the two apart
    assert_eq!(&g.value(ga).data()[..2 * TEXT], &g.value(gb).data()[..2 * TEXT]);
    assert_ne!(&g.value(ga).data()[2 * TEXT..], &g.value(gb).data()[2 * TEXT..]);

    let pad = make_grounded_tokens(&mut g, &f.vocab, &f.mlp, &f.fourier, None, &BoundingBox::SENTINEL).unwrap();
    let null = f.vocab.embed(&mut g, &[NULL_TOKEN, NULL_TOKEN]).unwrap();
    assert_eq!(&g.value(pad).data()[..2 * TEXT], g.value(null).data());
}

#[test]
fn same_description_different_boxes_give_different_ea_keys() {
    let f = Fixture::randomized(7);
    let mut g = Graph::new(&f.store);
    let d = desc(Color::Blue, Shape::Square);
    let ga = make_grounded_tokens(&mut g, &f.vocab, &f.mlp, &f.fourier, Some(&d), &BoundingBox::new(0.0, 0.0, 0.5, 1.0).unwrap()).unwrap();
    let gb = make_grounded_tokens(&mut g, &f.vocab, &f.mlp, &f.fourier, Some(&d), &BoundingBox::new(0.5, 0.0, 1.0, 1.0).unwrap()).unwrap();
    let ka = f.ea.k.forward_rows(&mut g, ga).unwrap();
    let kb = f.ea.k.forward_rows(&mut g, gb).unwrap();
    assert!(g.value(ka).max_abs_diff(g.value(kb)) > 1e-6);
}

#[test]
fn enhancement_attention_examples() {
    let f = Fixture::new(8);
    let d = red_circle();
    let m = rasterize_mask(&BoundingBox::new(0.0, 0.0, 0.75, 0.5).unwrap(), SIDE, SIDE).unwrap();
    let run = |store: &ParamStore, mask: &Mask| {
        let mut g = Graph::new(store);
        let xn = g.input(features(9));
        let tokens = f.vocab.embed(&mut g, &description_tokens(Some(&d))).unwrap();
        let grounded = make_grounded_tokens(&mut g, &f.vocab, &f.mlp, &f.fourier, Some(&d), &BoundingBox::new(0.0, 0.0, 0.75, 0.5).unwrap()).unwrap();
        let r_f = cross_attention_shading(&mut g, &f.ca, xn, (SIDE, SIDE), tokens, mask).unwrap();
        let r_s = enhancement_attention(&mut g, &f.ea, xn, grounded, mask, r_f).unwrap();
        (g.value(r_f).clone(), g.value(r_s).clone())
    };
    // zero-initialized output projection
    let (r_f, r_s) = run(&f.store, &m);
    assert_eq!(r_f, r_s);

    let mut store = f.store.clone();
    randomize(&mut store, "ea.", 0.5, &mut ChaCha8Rng::seed_from_u64(10));
    let (r_f, r_s) = run(&store, &Mask::zeros(SIDE, SIDE));
    assert_eq!(r_f, r_s);
    let (r_f, r_s) = run(&store, &m);
    assert!(r_f.max_abs_diff(&r_s) > 1e-6);
    assert_eq!(outside_max(&r_s, &m), 0.0);
}

#[test]
fn layout_attention_single_region_is_plain_self_attention() {
    let f = Fixture::randomized(11);
    let mut g = Graph::new(&f.store);
    let xn = g.input(features(12));
    let a = build_layout_attention_mask(&[&Mask::ones(SIDE, SIDE)]).unwrap();
    let r = layout_attention(&mut g, &f.la, xn, &a).unwrap();
    let q = f.la.q.forward_cols(&mut g, xn).unwrap();
    let k = f.la.k.forward_cols(&mut g, xn).unwrap();
    let v = f.la.v.forward_cols(&mut g, xn).unwrap();
    let (q, k, v) = (g.transpose(q).unwrap(), g.transpose(k).unwrap(), g.transpose(v).unwrap());
    let out = attention(&mut g, q, k, v, None).unwrap().out;
    let out = g.transpose(out).unwrap();
    let out = f.la.o.forward_cols(&mut g, out).unwrap();
    assert!(g.value(r).max_abs_diff(g.value(out)) < 1e-12);
}

#[test]
fn layout_attention_two_pixels_attend_to_themselves() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new();
    let la = LayoutAttention::new(&mut store, "la", 3, 2, &mut rng).unwrap();
    let mut g = Graph::new(&store);
    let x = Tensor::new(&[3, 2], vec![0.3, -1.0, 0.7, 0.2, -0.5, 0.9]).unwrap();
    let xn = g.input(x);
    let m1 = Mask::from_bits(1, 2, vec![true, false]).unwrap();
    let bg = Mask::from_bits(1, 2, vec![false, true]).unwrap();
    let a = build_layout_attention_mask(&[&bg, &m1]).unwrap();
    let r = layout_attention(&mut g, &la, xn, &a).unwrap();
    let v = la.v.forward_cols(&mut g, xn).unwrap();
    let expect = la.o.forward_cols(&mut g, v).unwrap();
    assert!(g.value(r).max_abs_diff(g.value(expect)) < 1e-12);
}

#[test]
fn layout_attention_isolates_disjoint_regions() {
    let f = Fixture::randomized(14);
    let left = rasterize_mask(&BoundingBox::new(0.0, 0.0, 0.5, 1.0).unwrap(), SIDE, SIDE).unwrap();
    let right = left.complement();
    let a = build_layout_attention_mask(&[&left, &right]).unwrap();
    let run = |x: Tensor| {
        let mut g = Graph::new(&f.store);
        let xn = g.input(x);
        let r = layout_attention(&mut g, &f.la, xn, &a).unwrap();
        g.value(r).clone()
    };
    let x = features(15);
    let mut y = x.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        if right.bits()[i % HW] {
            *v = rng.random_range(-3.0..3.0);
        }
    }
    let (rx, ry) = (run(x), run(y));
    for (i, (a, b)) in rx.data().iter().zip(ry.data()).enumerate() {
        if left.bits()[i % HW] {
            assert!((a - b).abs() < 1e-12);
        }
    }
    assert!(rx.max_abs_diff(&ry) > 1e-3);
}

fn shading_set(g: &mut Graph, n: usize, layout: bool, seed: u64) -> ShadingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = |g: &mut Graph| g.input(Tensor::from_fn(&[C, HW], |_| rng.random_range(-1.0..1.0)));
    ShadingSet {
        instances: (0..n).map(|_| v(g)).collect(),
        background: v(g),
        layout: if layout { Some(v(g)) } else { None },
    }
}

#[test]
fn sac_uniform_weights_average_background_and_layout() {
    // zero-initialized head gives equal logits on the active slots
    let f = Fixture::randomized(17);
    let mut store = f.store.clone();
    for id in store.ids_with_prefix("sac.head") {
        store.value_mut(id).data_mut().fill(0.0);
    }
    let mut g = Graph::new(&store);
    let s = shading_set(&mut g, 0, true, 18);
    let masks = MaskSet::from_boxes(&[], SIDE, SIDE).unwrap();
    let out = sac_aggregate(&mut g, &f.sac, &s, &masks, &[]).unwrap();
    let sum = g.add(s.background, s.layout.unwrap()).unwrap();
    let half = g.scale(sum, 0.5).unwrap();
    assert!(g.value(out.r_final).max_abs_diff(g.value(half)) < 1e-12);
}

#[test]
fn sac_one_hot_weights_select_instance() {
    let f = Fixture::randomized(19);
    let mut store = f.store.clone();
    let w = store.id("sac.head.w").unwrap();
    store.value_mut(w).data_mut().fill(0.0);
    let b = store.id("sac.head.b").unwrap();
    let order = [2, 0];
    let bias = store.value_mut(b).data_mut();
    bias.fill(0.0);
    bias[order[0]] = 1e3;
    let mut g = Graph::new(&store);
    let s = shading_set(&mut g, 2, true, 20);
    let boxes = [BoundingBox::new(0.0, 0.0, 0.5, 0.5).unwrap(), BoundingBox::new(0.25, 0.25, 1.0, 1.0).unwrap()];
    let masks = MaskSet::from_boxes(&boxes, SIDE, SIDE).unwrap();
    let out = sac_aggregate(&mut g, &f.sac, &s, &masks, &order).unwrap();
    assert_eq!(g.value(out.r_final), g.value(s.instances[0]));
}

#[test]
fn sac_rejects_too_many_instances() {
    let f = Fixture::new(21);
    let mut g = Graph::new(&f.store);
    let s = shading_set(&mut g, 4, true, 22);
    let boxes = vec![BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap(); 4];
    let masks = MaskSet::from_boxes(&boxes, SIDE, SIDE).unwrap();
    let err = sac_aggregate(&mut g, &f.sac, &s, &masks, &[0, 1, 2, 3]).err().unwrap();
    assert!(matches!(err, CoreError::TooManyInstances { n: 4, max_num: 3 }));
    assert!(err.to_string().contains("max_num"));
    assert!(pad_shading_channels(4, 3, None).is_err());
}

#[test]
fn sac_weights_are_convex_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for trial in 0..10 {
        let f = Fixture::randomized(100 + trial);
        let mut g = Graph::new(&f.store);
        let n = rng.random_range(0..=3);
        let layout = rng.random_bool(0.5);
        let s = shading_set(&mut g, n, layout, 200 + trial);
        let boxes: Vec<_> = (0..n).map(|_| random_box(&mut rng)).collect();
        let masks = MaskSet::from_boxes(&boxes, SIDE, SIDE).unwrap();
        let order = pad_shading_channels(n, 3, Some(&mut rng)).unwrap();
        let out = sac_aggregate(&mut g, &f.sac, &s, &masks, &order).unwrap();
        let w = g.value(out.weights).clone();
        assert_eq!(w.shape(), &[5, HW]);
        for p in 0..HW {
            let col: Vec<f64> = (0..5).map(|k| w.data()[k * HW + p]).collect();
            assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (k, &v) in col.iter().enumerate() {
                assert!(v >= 0.0);
                if !out.active[k] {
                    assert_eq!(v, 0.0);
                }
            }
        }
        let feats: Vec<Tensor> = out.slot_features.iter().flatten().map(|v| g.value(*v).clone()).collect();
        for (i, &r) in g.value(out.r_final).data().iter().enumerate() {
            let lo = feats.iter().map(|t| t.data()[i]).fold(f64::INFINITY, f64::min);
            let hi = feats.iter().map(|t| t.data()[i]).fold(f64::NEG_INFINITY, f64::max);
            assert!(lo - 1e-12 <= r && r <= hi + 1e-12);
        }
    }
}

#[test]
fn pad_shading_channels_examples() {
    assert_eq!(pad_shading_channels(4, 4, None).unwrap(), vec![0, 1, 2, 3]);
    assert!(pad_shading_channels(0, 4, None).unwrap().is_empty());
    let mut seen = std::collections::BTreeSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..50 {
        let o = pad_shading_channels(2, 4, Some(&mut rng)).unwrap();
        assert!(o.iter().all(|&k| k < 4));
        assert_ne!(o[0], o[1]);
        seen.insert(o);
    }
    assert!(seen.len() > 4);
}

#[test]
fn average_aggregate_averages_covering_entries() {
    let f = Fixture::new(25);
    let mut g = Graph::new(&f.store);
    let s = shading_set(&mut g, 1, true, 26);
    let masks = MaskSet::from_boxes(&[BoundingBox::new(0.0, 0.0, 0.5, 0.5).unwrap()], SIDE, SIDE).unwrap();
    let out = average_aggregate(&mut g, &s, &masks).unwrap();
    let (r1, bg, la) = (g.value(s.instances[0]), g.value(s.background), g.value(s.layout.unwrap()));
    let r = g.value(out.r_final);
    for c in 0..C {
        for p in 0..HW {
            let i = c * HW + p;
            let expect = if masks.instances[0].bits()[p] {
                (r1.data()[i] + la.data()[i]) / 2.0
            } else {
                (bg.data()[i] + la.data()[i]) / 2.0
            };
            assert!((r.data()[i] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_init_migc_is_a_noop() {
    let model = tiny_model(27);
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    for _ in 0..5 {
        let z = Tensor::from_fn(&[3, 8, 8], |_| rng.random_range(-2.0..2.0));
        let n = rng.random_range(1..=3);
        let descs: Vec<_> = (0..n).map(|_| random_desc(&mut rng)).collect();
        let boxes: Vec<_> = (0..n).map(|_| random_box(&mut rng)).collect();
        let cond = Conditioning::new(&descs, descs.clone(), boxes);
        let t = rng.random_range(1..=50);
        let off = model.denoise_predict(&z, t, &cond, false).unwrap();
        let on = model.denoise_predict(&z, t, &cond, true).unwrap();
        assert!(off.max_abs_diff(&on) < 1e-12);
    }
}

#[test]
fn full_frame_instance_with_one_hot_sac_returns_its_shading() {
    let mut model = tiny_model(29);
    randomize_migc(&mut model, &mut ChaCha8Rng::seed_from_u64(30));
    for l in &model.migc.layers {
        model.params.value_mut(l.gate).data_mut()[0] = 1.0;
    }
    for name in ["migc.mid.sac.head", "migc.dec1.sac.head"] {
        let w = model.params.id(&format!("{name}.w")).unwrap();
        model.params.value_mut(w).data_mut().fill(0.0);
        let b = model.params.id(&format!("{name}.b")).unwrap();
        let bias = model.params.value_mut(b).data_mut();
        bias.fill(0.0);
        bias[0] = 1e3;
    }
    let d = red_circle();
    let cond = Conditioning::new(&[d], vec![d], vec![BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap()]);
    let mut trace = Vec::new();
    let z = features(31).reshape(&[8, 16]).unwrap();
    let z = Tensor::from_fn(&[3, 8, 8], |i| z.data()[i % 128]);
    model.denoise_traced(&z, 10, &cond, true, Some(&mut trace)).unwrap();
    assert_eq!(trace.len(), 2);
    for tr in &trace {
        assert_eq!(tr.residual, tr.r_s[0]);
    }
}

#[test]
fn traced_shading_respects_masks_on_random_passes() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for trial in 0..6 {
        let mut model = tiny_model(40 + trial);
        randomize_migc(&mut model, &mut rng);
        let n = rng.random_range(0..=3);
        let descs: Vec<_> = (0..n).map(|_| random_desc(&mut rng)).collect();
        let boxes: Vec<_> = (0..n).map(|_| random_box(&mut rng)).collect();
        let cond = Conditioning::new(&descs, descs.clone(), boxes);
        let z = Tensor::from_fn(&[3, 8, 8], |_| rng.random_range(-2.0..2.0));
        let mut trace = Vec::new();
        model.denoise_traced(&z, 25, &cond, true, Some(&mut trace)).unwrap();
        for tr in &trace {
            for i in 0..n {
                assert_eq!(outside_max(&tr.r_f[i], &tr.masks.instances[i]), 0.0);
                assert_eq!(outside_max(&tr.r_s[i], &tr.masks.instances[i]), 0.0);
            }
            assert_eq!(outside_max(&tr.r_bg, &tr.masks.background), 0.0);
        }
    }
}

#[test]
fn enhancement_attention_gradients() {
    let mut f = Fixture::randomized(33);
    f.store.set_all_frozen(true);
    f.store.set_frozen_prefix("ea.", false);
    let d = red_circle();
    let b = BoundingBox::new(0.0, 0.25, 0.75, 1.0).unwrap();
    let m = rasterize_mask(&b, SIDE, SIDE).unwrap();
    let rep = grad_check(
        &f.store,
        &[features(34)],
        |g, v| {
            let tokens = f.vocab.embed(g, &description_tokens(Some(&d))).unwrap();
            let gr = make_grounded_tokens(g, &f.vocab, &f.mlp, &f.fourier, Some(&d), &b).unwrap();
            let r_f = cross_attention_shading(g, &f.ca, v[0], (SIDE, SIDE), tokens, &m).unwrap();
            let r_s = enhancement_attention(g, &f.ea, v[0], gr, &m, r_f).unwrap();
            Ok(sq_sum(g, r_s))
        },
        &gc_opts(),
    )
    .unwrap();
    assert!(rep.passes(1e-4), "{rep:?}");
}

#[test]
fn layout_attention_gradients() {
    let mut f = Fixture::randomized(35);
    f.store.set_all_frozen(true);
    f.store.set_frozen_prefix("la.", false);
    let ms = MaskSet::from_boxes(&[BoundingBox::new(0.0, 0.0, 0.5, 0.75).unwrap()], SIDE, SIDE).unwrap();
    let a = build_layout_attention_mask(&ms.regions()).unwrap();
    let rep = grad_check(
        &f.store,
        &[features(36)],
        |g, v| {
            let r = layout_attention(g, &f.la, v[0], &a).unwrap();
            Ok(sq_sum(g, r))
        },
        &gc_opts(),
    )
    .unwrap();
    assert!(rep.passes(1e-4), "{rep:?}");
}

#[test]
fn sac_gradients() {
    let mut f = Fixture::randomized(37);
    f.store.set_all_frozen(true);
    f.store.set_frozen_prefix("sac.", false);
    let boxes = [BoundingBox::new(0.0, 0.0, 0.5, 0.75).unwrap(), BoundingBox::new(0.25, 0.5, 1.0, 1.0).unwrap()];
    let masks = MaskSet::from_boxes(&boxes, SIDE, SIDE).unwrap();
    let inputs: Vec<Tensor> = (0..4).map(|k| features(38 + k)).collect();
    let rep = grad_check(
        &f.store,
        &inputs,
        |g, v| {
            let s = ShadingSet {
                instances: vec![v[0], v[1]],
                background: v[2],
                layout: Some(v[3]),
            };
            let out = sac_aggregate(g, &f.sac, &s, &masks, &[1, 0]).unwrap();
            Ok(sq_sum(g, out.r_final))
        },
        &gc_opts(),
    )
    .unwrap();
    assert!(rep.passes(1e-4), "{rep:?}");
}

#[test]
fn position_mlp_gradients() {
    let mut f = Fixture::randomized(42);
    f.store.set_all_frozen(true);
    f.store.set_frozen_prefix("pos.", false);
    let b = BoundingBox::new(0.125, 0.25, 0.625, 0.875).unwrap();
    let rep = grad_check(
        &f.store,
        &[],
        |g, _| {
            let p = position_token(g, &f.mlp, &f.fourier, &b).unwrap();
            Ok(sq_sum(g, p))
        },
        &gc_opts(),
    )
    .unwrap();
    assert!(rep.coords_checked > 0);
    assert!(rep.passes(1e-4), "{rep:?}");
}

#[test]
fn migc_forward_gradients_at_four_by_four() {
    let mut model = tiny_model(43);
    randomize_migc(&mut model, &mut ChaCha8Rng::seed_from_u64(44));
    model.params.set_all_frozen(true);
    model.params.set_frozen_prefix("migc.", false);
    let layer = model.migc.layer(Site::Dec1).unwrap().clone();
    assert_eq!(layer.resolution, (4, 4));
    let ca = model.unet.attention(Site::Dec1).clone();
    let descs = [red_circle(), desc(Color::Green, Shape::Cross)];
    let boxes = [BoundingBox::new(0.0, 0.0, 0.5, 0.75).unwrap(), BoundingBox::new(0.25, 0.5, 1.0, 1.0).unwrap()];
    let migc = model.migc.clone();
    let vocab = model.vocab.clone();
    let x = Tensor::from_fn(&[8, 16], |i| ((i * 37 % 23) as f64 / 11.0) - 1.0);
    let rep = grad_check(
        &model.params,
        &[x],
        |g, v| {
            let prompt = vocab.embed(g, &migc_core::vocab::prompt_tokens(&descs)).unwrap();
            let global = ca.shade(g, v[0], prompt).unwrap();
            let ctx = LayoutContext::build(g, &vocab, &migc, &descs, &boxes, prompt).unwrap();
            let r = migc_forward(g, &migc, &layer, &ca, v[0], &global, &ctx, None, None).unwrap();
            Ok(sq_sum(g, r))
        },
        &GradCheckOptions {
            max_coords_per_tensor: Some(4),
            ..gc_opts()
        },
    )
    .unwrap();
    assert!(rep.passes(1e-4), "{rep:?}");
}

#[test]
fn migc_options_without_instances_leave_backbone_untouched() {
    let mut model = tiny_model(45);
    randomize_migc(&mut model, &mut ChaCha8Rng::seed_from_u64(46));
    let z = features(47).reshape(&[8, 16]).unwrap();
    let z = Tensor::from_fn(&[3, 8, 8], |i| z.data()[i % 128]);
    let cond = Conditioning::null();
    let off = model.denoise_predict(&z, 5, &cond, false).unwrap();
    let mut g = Graph::new(&model.params);
    let zv = g.input(z.clone());
    let p = model
        .predict_in(&mut g, zv, 5, &cond, ForwardOptions { migc: false, ..Default::default() })
        .unwrap();
    assert_eq!(g.value(p.eps), &off);
}
