use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selconv::conv::conv2d_dense;
use selconv::detect::{decode, encode, Rect};
use selconv::flops::{report, Convention, CostRole, LayerCost};
use selconv::loss::{total_loss, LossMode};
use selconv::mask::{binarize, downsample_maxpool, gt_mask_from_boxes, BoundingBox, ProbMap, SaliencyMask};
use selconv::masked::masked_conv2d_counted;
use selconv::params::ParamStore;
use selconv::{ConvParams, Tensor};

fn mask_strategy(h: usize, w: usize) -> impl Strategy<Value = SaliencyMask> {
    proptest::collection::vec(any::<bool>(), h * w)
        .prop_map(move |v| SaliencyMask::from_fn(h, w, |y, x| v[y * w + x]))
}

fn box_strategy() -> impl Strategy<Value = BoundingBox> {
    (0.0f32..60.0, 0.0f32..60.0, 1.0f32..30.0, 1.0f32..30.0)
        .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, x + w, y + h, 0).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masked_conv_equals_dense_at_foreground(
        seed in any::<u64>(),
        cin in 1usize..4, cout in 1usize..4,
        h in 3usize..10, w in 3usize..10,
        k in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..3,
        density in 0.0f64..=1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn([1, cin, h, w], |_, _, _, _| rng.gen_range(-1.0f32..1.0));
        let wt = Tensor::from_fn([cout, cin, k, k], |_, _, _, _| rng.gen_range(-1.0f32..1.0));
        let b: Vec<f32> = (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = ConvParams::square(k, stride, k / 2, 1);
        let (ho, wo) = p.output_dims(h, w).unwrap();
        let m = SaliencyMask::from_fn(ho, wo, |_, _| rng.gen_bool(density));
        let dense = conv2d_dense(&x, &wt, &b, &p).unwrap();
        let (masked, work) = masked_conv2d_counted(&x, &wt, &b, &m, &p).unwrap();
        prop_assert_eq!(work.row_products, m.count_ones() as u64);
        for c in 0..cout {
            for y in 0..ho {
                for xx in 0..wo {
                    let want = if m.get(y, xx) { dense.get(0, c, y, xx) } else { 0.0 };
                    prop_assert_eq!(masked.get(0, c, y, xx).to_bits(), want.to_bits());
                }
            }
        }
    }

    #[test]
    fn gt_mask_grows_with_boxes(boxes in proptest::collection::vec(box_strategy(), 0..4), extra in box_strategy(), stride in 1usize..9) {
        let a = gt_mask_from_boxes(&boxes, (64, 64), stride).unwrap();
        let mut more = boxes.clone();
        more.push(extra);
        let b = gt_mask_from_boxes(&more, (64, 64), stride).unwrap();
        prop_assert!(a.is_subset_of(&b));
    }

    #[test]
    fn maxpool_downsampling_keeps_objects(m in mask_strategy(8, 8), f in prop::sample::select(vec![2usize, 4])) {
        let d = downsample_maxpool(&m, f).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                if m.get(y, x) {
                    prop_assert!(d.get(y / f, x / f));
                }
            }
        }
        prop_assert_eq!(m.count_ones() == 0, d.count_ones() == 0);
    }

    #[test]
    fn higher_threshold_gives_subset(values in proptest::collection::vec(0.0f32..=1.0, 64), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let p = ProbMap::new(8, 8, values).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(binarize(&p, hi).is_subset_of(&binarize(&p, lo)));
    }

    #[test]
    fn reduction_is_monotone_in_density(ones_a in 0usize..=64, ones_b in 0usize..=64, dense in 1u64..1000) {
        let costs = vec![
            LayerCost { guided: true, ..LayerCost::new("g", CostRole::Trunk, dense * 64, (8, 8)) },
            LayerCost::new("t", CostRole::Trunk, 500, (8, 8)),
        ];
        let (lo, hi) = (ones_a.min(ones_b), ones_a.max(ones_b));
        let r_lo = report(&costs, &[vec![Some(lo), None]], Convention::Macs).unwrap();
        let r_hi = report(&costs, &[vec![Some(hi), None]], Convention::Macs).unwrap();
        prop_assert!(r_hi.reduced_percent <= r_lo.reduced_percent);
        let expect = 100.0 * (1.0 - r_lo.masked_total / r_lo.dense_total);
        prop_assert!((r_lo.reduced_percent - expect).abs() < 1e-9);
        let unguided = r_lo.rows.iter().find(|r| r.name == "t").unwrap();
        prop_assert_eq!(unguided.masked_flops, unguided.dense_flops);
    }

    #[test]
    fn report_is_additive_over_layers(macs in proptest::collection::vec(1u64..10_000, 1..6), ones in 0usize..=16) {
        let costs: Vec<LayerCost> = macs.iter().enumerate()
            .map(|(i, &m)| LayerCost { guided: i % 2 == 0, ..LayerCost::new(format!("l{i}"), CostRole::Trunk, m * 16, (4, 4)) })
            .collect();
        let work: Vec<Option<usize>> = costs.iter().map(|c| c.guided.then_some(ones)).collect();
        let full = report(&costs, &[work.clone()], Convention::TwoMacs).unwrap();
        let rest = report(&costs[1..], &[work[1..].to_vec()], Convention::TwoMacs).unwrap();
        let first = &full.rows[0];
        prop_assert!((full.dense_total - rest.dense_total - first.dense_flops).abs() < 1e-6);
        prop_assert!((full.masked_total - rest.masked_total - first.masked_flops).abs() < 1e-6);
    }

    #[test]
    fn loss_total_is_exact_combination(c in 0.0f64..10.0, l in 0.0f64..10.0, m in 0.0f64..10.0, l1 in 0.0f64..3.0, l2 in 0.0f64..3.0) {
        let d = total_loss(LossMode::Direct, c, l, m, l1, l2);
        prop_assert!(d.is_consistent());
        prop_assert_eq!(d.total, c + l1 * l + l2 * m);
        let i = total_loss(LossMode::Indirect, c, l, m, l1, l2);
        prop_assert_eq!(i.mask, 0.0);
        prop_assert_eq!(i.total, c + l1 * l);
    }

    #[test]
    fn box_encoding_round_trips(cx in 5.0f32..60.0, cy in 5.0f32..60.0, w in 2.0f32..40.0, h in 2.0f32..40.0,
                                 acx in 5.0f32..60.0, acy in 5.0f32..60.0, aw in 4.0f32..40.0, ah in 4.0f32..40.0) {
        let gt = Rect::from_center(cx, cy, w, h);
        let anchor = Rect::from_center(acx, acy, aw, ah);
        let back = decode(encode(&gt, &anchor), &anchor);
        let (bx, by) = back.center();
        let (bw, bh) = back.size();
        prop_assert!((bx - cx).abs() < 1e-3 && (by - cy).abs() < 1e-3);
        prop_assert!((bw - w).abs() < 1e-3 * w && (bh - h).abs() < 1e-3 * h);
    }

    #[test]
    fn weights_round_trip_bit_exact(values in proptest::collection::vec(any::<f32>(), 1..40), c in 1usize..4) {
        let mut store = ParamStore::new();
        let n = values.len();
        store.insert("a.w", Tensor::new([n, 1, 1, 1], values.clone()).unwrap());
        store.insert("b.w", Tensor::new([1, 1, c, 1], vec![1.5; c]).unwrap());
        let mut buf = Vec::new();
        store.write_scnw(&mut buf).unwrap();
        let back = ParamStore::read_scnw(buf.as_slice()).unwrap();
        let a = back.get("a.w").unwrap();
        prop_assert_eq!(a.dims(), [n, 1, 1, 1]);
        let bits = |v: &[f32]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(a.data()), bits(&values));
        prop_assert_eq!(back.get("b.w").unwrap().dims(), [1, 1, c, 1]);
    }
}
