use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selconv::autograd::Tape;
use selconv::data::{generate_dataset, SceneParams};
use selconv::detect::DecodeParams;
use selconv::graph::Graph;
use selconv::mask::{MaskPyramid, SaliencyMask};
use selconv::selective::rig_constant;
use selconv::spec::{NetworkSpec, Supervision};
use selconv::train::{image_loss, prepare_targets};
use selconv::Tensor;

fn toy() -> NetworkSpec {
    NetworkSpec::from_file(concat!(env!("CARGO_MANIFEST_DIR"), "/../../specs/toy.json")).unwrap()
}

fn random_image(rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn([1, 3, 64, 64], |_, _, _, _| rng.gen::<f32>())
}

fn random_pyramid(g: &Graph, rng: &mut ChaCha8Rng, density: f64) -> MaskPyramid {
    MaskPyramid {
        levels: g
            .levels()
            .iter()
            .map(|l| SaliencyMask::from_fn(l.hw.0, l.hw.1, |_, _| rng.gen_bool(density)))
            .collect(),
    }
}

#[test]
fn toy_graph_builds_with_two_levels() {
    let g = Graph::build(&toy()).unwrap();
    let hw: Vec<_> = g.levels().iter().map(|l| (l.hw, l.factor)).collect();
    assert_eq!(hw, vec![((16, 16), 1), ((8, 8), 2)]);
    assert_eq!(g.attach_stride(), Some(4));
    assert_eq!(g.guided_layers(), vec!["conv4", "conv5", "conv6"]);
    assert!(g.heads().iter().all(|h| h.masked));
}

#[test]
fn guided_layer_before_attach_is_rejected() {
    let mut s = toy();
    s.guided_layers.push("conv2".into());
    let e = Graph::build(&s).unwrap_err();
    assert!(e.to_string().contains("conv2"), "{e}");
}

#[test]
fn gate_outside_guided_layers_is_rejected() {
    let mut s = toy();
    s.selective_cfg.as_mut().unwrap().gate = Some(vec!["conv1".into()]);
    assert!(Graph::build(&s).is_err());
}

#[test]
fn unknown_source_head_is_rejected() {
    let mut s = toy();
    s.heads[0].source = "nope".into();
    assert!(Graph::build(&s).unwrap_err().to_string().contains("nope"));
}

#[test]
fn full_mask_matches_baseline_bit_for_bit() {
    let g = Graph::build(&toy()).unwrap();
    let base = g.baseline().unwrap();
    let params = g.init_params(3);
    let full = g.full_pyramid();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let decode = DecodeParams { score_thresh: 0.0, ..DecodeParams::default() };
    for _ in 0..3 {
        let img = random_image(&mut rng);
        let a = g.infer(&params, &img, &decode, Some(&full)).unwrap();
        let b = base.infer(&params, &img, &decode, None).unwrap();
        for (ha, hb) in a.heads.iter().zip(&b.heads) {
            assert_eq!(ha.cls.data(), hb.cls.data());
            assert_eq!(ha.loc.data(), hb.loc.data());
        }
        assert_eq!(a.detections, b.detections);
    }
}

#[test]
fn selective_module_rigged_off_suppresses_all_detections() {
    let g = Graph::build(&toy()).unwrap();
    let mut params = g.init_params(1);
    rig_constant(&mut params, false).unwrap();
    let img = random_image(&mut ChaCha8Rng::seed_from_u64(2));
    let decode = DecodeParams { score_thresh: 0.0, ..DecodeParams::default() };
    let out = g.infer(&params, &img, &decode, None).unwrap();
    assert!(out.detections.is_empty());
    assert!(out.pyramid.unwrap().levels.iter().all(|m| m.count_ones() == 0));
    assert!(out.work.iter().filter(|(n, _)| g.guided_layers().contains(&n.as_str())).all(|(_, w)| w.row_products == 0));
}

#[test]
fn row_products_equal_mask_ones_per_guided_layer() {
    let g = Graph::build(&toy()).unwrap();
    let params = g.init_params(0);
    let costs = g.costs();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = random_image(&mut rng);
    for density in [0.0, 0.3, 0.8] {
        let pyr = random_pyramid(&g, &mut rng, density);
        let out = g.infer(&params, &img, &DecodeParams::default(), Some(&pyr)).unwrap();
        let ones = g.mask_ones(&pyr).unwrap();
        for (name, work) in out.work.iter().filter(|(n, _)| n != "sel") {
            let i = costs.iter().position(|c| &c.name == name).unwrap();
            let c = &costs[i];
            let expect = match ones[i] {
                Some(n) => c.masked_macs(n).unwrap(),
                None => c.macs,
            };
            assert_eq!(work.macs, expect, "{name}");
        }
    }
}

#[test]
fn masked_layers_agree_with_dense_reruns() {
    let g = Graph::build(&toy()).unwrap();
    let params = g.init_params(4);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let img = random_image(&mut rng);
    let pyr = random_pyramid(&g, &mut rng, 0.5);
    let eq = g.guided_equivalence(&params, &img, Some(&pyr)).unwrap();
    assert_eq!(eq.layers, 3 + 4);
    assert!(eq.holds(), "{eq:?}");
}

#[test]
fn indirect_mode_without_gate_leaves_selective_gradient_zero() {
    let mut s = toy();
    s.selective_cfg.as_mut().unwrap().gate = Some(Vec::new());
    let g = Graph::build(&s).unwrap();
    let params = g.init_params(0);
    let tape = Tape::new();
    let b = params.bind(&tape, Graph::is_trainable);
    let scene = &generate_dataset(1, 3, &SceneParams::default())[0];
    let t = prepare_targets(&g, &scene.boxes, 0.5).unwrap();
    let x = tape.constant(scene.image.clone());
    let l = image_loss(&g, &tape, &b, x, &t, Supervision::Indirect, 1.0, 1.0, None).unwrap();
    assert!(l.counted > 0);
    let grads = tape.backward(l.total).unwrap();
    let trunk = grads.get(b.get("conv1.w").unwrap()).unwrap().max_abs();
    assert!(trunk > 0.0);
    for (name, v) in b.iter() {
        if name.starts_with("sel.") {
            let gmax = grads.get(*v).map_or(0.0, |t| t.max_abs());
            assert_eq!(gmax, 0.0, "{name}");
        }
    }
}
