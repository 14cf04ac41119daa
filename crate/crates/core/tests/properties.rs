use pacnerf::anchors::{dbscan, DbscanParams, NOISE};
use pacnerf::config::Config;
use pacnerf::nn::{Mlp, RowNorm};
use pacnerf::pac::{tv_acr_loss, tv_value, AcrNet, AnchorSet};
use pacnerf::render::{composite, composite_weights, render_view, Bounds, Camera, Intrinsics, ViewCache};
use pacnerf::scene::{interpolate_codes, LatentTable, ModelConfig, SceneManipulator, SceneModel};
use pacnerf::tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sigma_delta() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..40).prop_flat_map(|m| (prop::collection::vec(0.0..50.0f64, m), prop::collection::vec(1e-4..1.0f64, m)))
}

proptest! {
    #[test]
    fn composite_weights_are_a_sub_distribution((sigma, deltas) in sigma_delta()) {
        let w = composite_weights(&sigma, &deltas).unwrap();
        prop_assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!(w.iter().sum::<f64>() <= 1.0 + 1e-12);
    }

    #[test]
    fn constant_color_composites_to_scaled_color((sigma, deltas) in sigma_delta(), c in 0.0..1.0f64) {
        let colors = vec![[c, 1.0 - c, 0.5]; sigma.len()];
        let (rgb, opacity) = composite(&sigma, &deltas, &colors).unwrap();
        // constant colour: the composite is that colour scaled by opacity
        prop_assert!((rgb[0] - c * opacity).abs() < 1e-12);
        prop_assert!((rgb[1] - (1.0 - c) * opacity).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_lie_on_the_simplex(v in prop::collection::vec(-30.0..30.0f64, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 4], v).unwrap());
        let s = g.softmax(x, 1).unwrap();
        for r in 0..3 {
            let row = g.value(s).row(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn composed_codes_stay_in_the_anchor_hull(seed in any::<u64>(), k in 1usize..5, x in prop::array::uniform3(-1.0..1.0f64)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let latents = LatentTable::new(6, 3, &mut rng);
        let frames: Vec<usize> = (0..k).collect();
        let anchors = AnchorSet::from_frames(&latents, &frames).unwrap();
        let net = AcrNet::new(3, 8, 2, 3, &mut rng);
        let (alpha, w) = net.compose_point(&anchors, x);
        prop_assert!(alpha.iter().all(|&a| a >= 0.0));
        prop_assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for j in 0..3 {
            let lo = frames.iter().map(|&f| latents.code(f)[j]).fold(f64::INFINITY, f64::min);
            let hi = frames.iter().map(|&f| latents.code(f)[j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(w[j] >= lo - 1e-12 && w[j] <= hi + 1e-12);
        }
    }

    #[test]
    fn lipschitz_mlp_respects_its_bound(
        seed in any::<u64>(),
        a in prop::collection::vec(-2.0..2.0f64, 5),
        b in prop::collection::vec(-2.0..2.0f64, 5),
        shift in -2.0..2.0f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Mlp::new(&[5, 16, 16, 3], Some(RowNorm::AbsSum), &mut rng);
        for l in &mut m.layers {
            if let Some(c) = &mut l.lip_c {
                c.data_mut()[0] += shift;
            }
        }
        let bound = m.lipschitz_bound().unwrap();
        let (fa, fb) = (m.forward_plain(&a), m.forward_plain(&b));
        let dout = fa.iter().zip(&fb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let din = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(dout <= bound * din * (1.0 + 1e-12) + 1e-15);
    }

    #[test]
    fn dbscan_is_order_independent(
        pts in prop::collection::vec(prop::array::uniform2(0.0..10.0f64), 1..30),
        eps in 0.3..3.0f64,
        min_pts in 1usize..5,
        rot in 0usize..30,
    ) {
        let p: Vec<Vec<f64>> = pts.iter().map(|x| x.to_vec()).collect();
        let n = p.len();
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let q: Vec<Vec<f64>> = perm.iter().map(|&i| p[i].clone()).collect();
        let params = DbscanParams { eps, min_pts };
        let la = dbscan(&p, params).unwrap();
        let lb = dbscan(&q, params).unwrap();
        let core = |i: usize| {
            p.iter().filter(|o| ((o[0] - p[i][0]).powi(2) + (o[1] - p[i][1]).powi(2)).sqrt() <= eps).count() >= min_pts
        };
        // noise and the grouping of core points do not depend on order;
        // border points may join either neighbouring cluster
        for (j, &i) in perm.iter().enumerate() {
            prop_assert_eq!(la[i] == NOISE, lb[j] == NOISE);
        }
        for (j1, &i1) in perm.iter().enumerate() {
            for (j2, &i2) in perm.iter().enumerate() {
                if core(i1) && core(i2) {
                    prop_assert_eq!(la[i1] == la[i2], lb[j1] == lb[j2]);
                }
            }
        }
    }

    #[test]
    fn tv_graph_matches_plain_and_vanishes_on_constants(v in prop::collection::vec(0.0..1.0f64, 24), c in 0.0..1.0f64) {
        let mut g = Graph::new();
        let m = g.constant(Tensor::new(vec![12, 2], v.clone()).unwrap());
        let l = tv_acr_loss(&mut g, m, 4, 3).unwrap();
        let maps: Vec<Vec<f64>> = (0..2).map(|k| v.iter().skip(k).step_by(2).copied().collect()).collect();
        prop_assert!((g.value(l).item() - tv_value(&maps, 4, 3)).abs() < 1e-12);
        prop_assert_eq!(tv_value(&[vec![c; 12]], 4, 3), 0.0);
    }

    #[test]
    fn interpolation_hits_endpoints(a in prop::collection::vec(-1.0..1.0f64, 4), b in prop::collection::vec(-1.0..1.0f64, 4), t in 0.0..=1.0f64) {
        prop_assert_eq!(interpolate_codes(&a, &b, 1.0).unwrap(), a.clone());
        prop_assert_eq!(interpolate_codes(&a, &b, 0.0).unwrap(), b.clone());
        let m = interpolate_codes(&a, &b, t).unwrap();
        for j in 0..4 {
            prop_assert!(m[j] >= a[j].min(b[j]) - 1e-15 && m[j] <= a[j].max(b[j]) + 1e-15);
        }
    }

    #[test]
    fn config_text_round_trips(seed in any::<u64>(), lr in 1e-6..1e-1f64, lip in 0.0..1e-2f64, cams in prop::collection::vec(0usize..8, 1..5)) {
        let mut c = Config::default();
        c.seed = seed;
        c.scene.lr = lr;
        c.scene.lambda_lip = lip;
        c.edit.cameras = cams;
        let back = Config::parse(&c.to_text()).unwrap();
        prop_assert_eq!(back.hash(), c.hash());
        prop_assert_eq!(back, c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ratio_maps_sum_to_opacity(seed in any::<u64>(), k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig {
            deform_width: 8,
            slice_width: 8,
            template_width: 16,
            color_width: 8,
            ..ModelConfig::default()
        };
        let mut model = SceneModel::new(cfg, 5, &mut rng);
        model.template.density.layers[0].bias = Tensor::vector(vec![3.0]);
        let g = SceneManipulator::new(model, 0).unwrap();
        let frames: Vec<usize> = (0..k).collect();
        let anchors = AnchorSet::from_frames(&g.model.latents, &frames).unwrap();
        let net = AcrNet::new(g.code_dim(), 8, 2, 2, &mut rng);
        let intr = Intrinsics { fx: 10.0, fy: 10.0, cx: 4.0, cy: 4.0 };
        let cam = Camera::look_at([0.5, 0.3, 2.0], [0.0; 3], [0.0, 1.0, 0.0], intr, 8, 8, 1.0, 3.0);
        let view = ViewCache::build(&g, &cam, 12, Bounds { radius: 0.75 }).unwrap();
        let mut graph = Graph::new();
        let scene = g.model.bind(&mut graph, false).unwrap();
        let pac = net.bind(&mut graph, &anchors).unwrap();
        let out = render_view(&mut graph, &scene, &view, &pac).unwrap();
        let maps = out.acr_values(&graph).unwrap();
        let opacity = out.opacity_value(&graph);
        prop_assert!(opacity.iter().any(|&o| o > 0.0));
        for (p, &o) in opacity.iter().enumerate() {
            let s: f64 = maps.iter().map(|m| m[p]).sum();
            prop_assert!((s - o).abs() < 1e-10);
        }
    }
}
