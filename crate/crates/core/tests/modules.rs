//! SMG modules, hybrid blocks and whole-model forward passes.

use hcgnet::analysis::{count_params, infer_shapes};
use hcgnet::arch::config::{MacroConfig, Stem};
use hcgnet::arch::exec::{forward, forward_on, ForwardOptions};
use hcgnet::arch::graph::{build_model, hybrid_block_forward, Stage};
use hcgnet::arch::preset::Preset;
use hcgnet::context::{Context, ExecOptions};
use hcgnet::error::Error;
use hcgnet::params::ParamStore;
use hcgnet::smg::{smg_forward, SmgConfig, SmgParams, SMG_PREFIX};
use hcgnet::tensor::{seeded_rng, Shape, Tensor};

fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape {
    Shape::new(n, c, h, w).unwrap()
}

/// Randomizes BN affine terms and gate biases so no path is trivially zero.
fn perturb(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = seeded_rng(seed);
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        if name.ends_with(".beta") || name.ends_with(".b") || name.ends_with("b1") || name.ends_with("b2") {
            let t = store.get_mut(&name).unwrap();
            *t = Tensor::randn(t.shape(), 0.3, &mut rng);
        }
    }
}

#[test]
fn fusion_is_decay_plus_new_features() {
    for (i, cfg) in [SmgConfig::hybrid(16, 8), SmgConfig::transition(24, 0.5)].into_iter().enumerate() {
        let mut store = ParamStore::<f64>::init(&cfg.layout("m"), i as u64);
        perturb(&mut store, 40 + i as u64);
        let x = Tensor::randn(shape(2, cfg.in_channels, 6, 6), 1.0, &mut seeded_rng(3));
        let mut cx = Context::new(&store, ExecOptions::train(), true);
        let xv = cx.input(x);
        let out = smg_forward(&mut cx, "m", &cfg, xv).unwrap();
        let o = cx.value(out.out).unwrap();
        let xp = cx.value(out.x_prime).unwrap();
        let f = cx.value(out.f).unwrap();
        let v = cx.value(out.v).unwrap();
        let s = o.shape();
        assert_eq!(s, cfg.output_shape(shape(2, cfg.in_channels, 6, 6)).unwrap());
        for n in 0..s.n {
            for c in 0..s.c {
                for y in 0..s.h {
                    for xx in 0..s.w {
                        let want = f.at(n, c, 0, 0) * xp.at(n, c, y, xx) + v.at(n, c, 0, 0);
                        assert!((o.at(n, c, y, xx) - want).abs() <= 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn open_forget_gate_and_silent_excitation_reduce_to_the_squeeze_cell() {
    let cfg = SmgConfig::hybrid(16, 8);
    let mut p = SmgParams::<f64>::init(cfg, 5).unwrap();
    for name in ["excite.dw33", "excite.dw55", "excite.bn33.beta", "excite.bn55.beta"] {
        let t = p.store.get_mut(&format!("{SMG_PREFIX}.{name}")).unwrap();
        *t = Tensor::zeros(t.shape());
    }
    let b2 = p.store.get_mut(&format!("{SMG_PREFIX}.forget.b2")).unwrap();
    *b2 = Tensor::full(b2.shape(), 50.0);

    let x = Tensor::randn(shape(2, 16, 6, 6), 1.0, &mut seeded_rng(6));
    let mut cx = Context::new(&p.store, ExecOptions::inference(), true);
    let xv = cx.input(x.clone());
    let out = smg_forward(&mut cx, SMG_PREFIX, &cfg, xv).unwrap();
    let o = cx.value(out.out).unwrap().clone();
    let xp = cx.value(out.x_prime).unwrap().clone();
    assert!(cx.value(out.v).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(o.max_abs_diff(&xp) <= 1e-12 * xp.data().iter().fold(1.0f64, |m, v| m.max(v.abs())));
    assert_eq!(p.forward(&x, ExecOptions::inference()).unwrap().data(), o.data());
}

#[test]
fn transition_halves_the_map() {
    let cfg = SmgConfig {
        stride: 2,
        ..SmgConfig::transition(160, 0.5)
    };
    assert_eq!(cfg.out_channels, 80);
    assert_eq!(cfg.output_shape(shape(1, 160, 56, 56)).unwrap(), shape(1, 80, 28, 28));
    let small = SmgConfig::transition(16, 0.5);
    let p = SmgParams::<f32>::init(small, 0).unwrap();
    let x = Tensor::randn(shape(1, 16, 8, 8), 1.0, &mut seeded_rng(1));
    assert_eq!(p.forward(&x, ExecOptions::inference()).unwrap().shape(), shape(1, 8, 4, 4));
}

#[test]
fn single_module_block_concatenates_input_first() {
    let cfg = SmgConfig::hybrid(12, 8);
    let store = ParamStore::<f64>::init(&cfg.layout("blk.module1"), 2);
    let x = Tensor::randn(shape(2, 12, 4, 4), 1.0, &mut seeded_rng(2));
    let mut cx = Context::new(&store, ExecOptions::inference(), true);
    let xv = cx.input(x.clone());
    let y = hybrid_block_forward(&mut cx, "blk", &[cfg], xv).unwrap();
    let y = cx.value(y).unwrap().clone();
    assert_eq!(y.shape(), shape(2, 20, 4, 4));
    assert_eq!(y.slice_channels(0, 12).unwrap().data(), x.data());

    let mut cx = Context::new(&store, ExecOptions::inference(), true);
    let xv = cx.input(x);
    let o = smg_forward(&mut cx, "blk.module1", &cfg, xv).unwrap().out;
    assert_eq!(y.slice_channels(12, 20).unwrap().data(), cx.value(o).unwrap().data());
}

#[test]
fn block_channel_chain_is_checked() {
    let store = ParamStore::<f64>::new();
    let mut cx = Context::new(&store, ExecOptions::inference(), false);
    let xv = cx.input(Tensor::zeros(shape(1, 12, 4, 4)));
    let err = hybrid_block_forward(&mut cx, "blk", &[SmgConfig::hybrid(16, 8)], xv).unwrap_err();
    assert!(err.to_string().contains("blk.module1"), "{err}");
}

fn tiny() -> MacroConfig {
    MacroConfig::new("tiny", Stem::Cifar, &[(2, 8), (2, 16)], 10, 8)
}

#[test]
fn batch_order_commutes_with_inference() {
    let g = build_model(&tiny()).unwrap();
    let store = ParamStore::<f64>::init(g.layout(), 1);
    let x = Tensor::randn(shape(4, 3, 8, 8), 1.0, &mut seeded_rng(9));
    let perm = [2usize, 0, 3, 1];
    let mut px = Tensor::zeros(x.shape());
    let plane = 3 * 64;
    for (i, &src) in perm.iter().enumerate() {
        px.data_mut()[i * plane..(i + 1) * plane].copy_from_slice(&x.data()[src * plane..(src + 1) * plane]);
    }
    let a = forward(&g, &store, &x, ForwardOptions::default()).unwrap();
    let b = forward(&g, &store, &px, ForwardOptions::default()).unwrap();
    for (i, &src) in perm.iter().enumerate() {
        for c in 0..10 {
            assert_eq!(b.at(i, c, 0, 0), a.at(src, c, 0, 0));
        }
    }

    let mut twins = Tensor::zeros(shape(2, 3, 8, 8));
    twins.data_mut()[..plane].copy_from_slice(&x.data()[..plane]);
    twins.data_mut()[plane..].copy_from_slice(&x.data()[..plane]);
    let t = forward(&g, &store, &twins, ForwardOptions::default()).unwrap();
    assert_eq!(t.data()[..10], t.data()[10..]);
}

#[test]
fn probabilities_sum_to_one() {
    let g = build_model(&tiny()).unwrap();
    let store = ParamStore::<f64>::init(g.layout(), 1);
    let x = Tensor::randn(shape(3, 3, 8, 8), 1.0, &mut seeded_rng(4));
    let opts = ForwardOptions {
        softmax: true,
        ..Default::default()
    };
    let p = forward(&g, &store, &x, opts).unwrap();
    for n in 0..3 {
        let s: f64 = (0..10).map(|c| p.at(n, c, 0, 0)).sum();
        assert!((s - 1.0).abs() <= 1e-12);
    }
    let wrong = Tensor::zeros(shape(1, 3, 16, 16));
    assert!(forward(&g, &store, &wrong, ForwardOptions::default()).is_err());
}

#[test]
fn inference_is_pure() {
    let g = build_model(&tiny()).unwrap();
    let store = ParamStore::<f32>::init(g.layout(), 3);
    let x = Tensor::randn(shape(2, 3, 8, 8), 1.0, &mut seeded_rng(5));
    let a = forward(&g, &store, &x, ForwardOptions::default()).unwrap();
    let b = forward(&g, &store, &x, ForwardOptions::default()).unwrap();
    assert_eq!(a.data(), b.data());
}

/// Every preset, executed on one image, agrees with static inference node by node.
#[test]
fn executed_shapes_match_inference_for_all_presets() {
    for p in Preset::ALL {
        let cfg = p.config();
        let g = build_model(&cfg).unwrap();
        let store = ParamStore::<f32>::init(g.layout(), 0);
        let r = cfg.input;
        let mut cx = Context::new(&store, ExecOptions::inference(), false);
        let x = cx.input(Tensor::randn(shape(1, 3, r, r), 1.0, &mut seeded_rng(0)));
        let res = forward_on(&mut cx, &g, x).unwrap();
        let table = infer_shapes(&g, r).unwrap();
        assert_eq!(res.shapes.len(), table.records.len());
        for (got, rec) in res.shapes.iter().zip(&table.records) {
            assert_eq!(*got, rec.shape, "{p}: {}", rec.name);
        }
        let logits = cx.value(res.logits).unwrap();
        assert_eq!(logits.shape(), shape(1, cfg.classes, 1, 1));
        assert!(logits.all_finite());
    }
}

#[test]
fn parameter_counts_match_instantiated_stores() {
    for p in Preset::ALL {
        let g = build_model(&p.config()).unwrap();
        let store = ParamStore::<f32>::init(g.layout(), 0);
        assert_eq!(count_params(&g).params, store.num_elements() as u64, "{p}");
    }
}

#[test]
fn graph_structure_rules() {
    for p in Preset::ALL {
        let cfg = p.config();
        let g = build_model(&cfg).unwrap();
        assert_eq!(g.nodes(), build_model(&cfg).unwrap().nodes());
        let t = infer_shapes(&g, cfg.input).unwrap();
        for (i, b) in cfg.blocks.iter().enumerate() {
            let i = i + 1;
            let c0 = g
                .smg_nodes()
                .find(|(n, _)| n.stage == Stage::Block(i))
                .map(|(_, c)| c.in_channels)
                .unwrap();
            for (j, (_, c)) in g.smg_nodes().filter(|(n, _)| n.stage == Stage::Block(i)).enumerate() {
                assert_eq!(c.in_channels, c0 + j * b.growth);
                assert_eq!(c.out_channels, b.growth);
            }
            let out = t.get(&format!("block{i}.output")).unwrap().c;
            assert_eq!(out, c0 + b.modules * b.growth);
            if i < cfg.blocks.len() {
                assert_eq!(t.get(&format!("transition{i}")).unwrap().c, out / 2);
            }
        }
    }
    let a1 = build_model(&Preset::A1.config()).unwrap();
    assert_eq!(infer_shapes(&a1, 32).unwrap().get("stem.conv").unwrap().c, 24);
    assert_eq!(infer_shapes(&a1, 32).unwrap().get("block1.output").unwrap().h, 32);
    assert!(matches!("d1".parse::<Preset>(), Err(Error::UnknownPreset(_))));
}
