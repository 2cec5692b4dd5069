mod common;

use proptest::prelude::*;

use pyramid_det::eval::{average_precision_heading, average_precision_r40, MatchEntry, MatchResult};
use pyramid_det::fuse::{fuse_infer, ConnectionMode, FusionConfig, FusionGraph, FusionInput, FusionParams, NodeId};
use pyramid_det::geometry::{bev_intersection_area, iou3d, iou_bev};
use pyramid_det::heads::{decode_residual, density_value, encode_residual};
use pyramid_det::model::{canonicalize_points, decanonicalize_points, Box3D, PointCloud};
use pyramid_det::nn::Matrix;
use pyramid_det::pool::{grid_points, idw_weights};
use pyramid_det::scalar::wrap_angle;

fn arb_box() -> impl Strategy<Value = Box3D<f64>> {
    (
        [-30.0f64..30.0, -30.0f64..30.0, -2.0f64..1.0],
        [0.3f64..6.0, 0.3f64..3.0, 0.3f64..2.5],
        -7.0f64..7.0,
    )
        .prop_map(|(c, s, yaw)| Box3D::new(c, s, yaw).unwrap())
}

/// A box near `a`, so overlaps are common.
fn arb_pair() -> impl Strategy<Value = (Box3D<f64>, Box3D<f64>)> {
    (arb_box(), [-2.0f64..2.0, -2.0f64..2.0, -0.5f64..0.5], [0.5f64..1.5, 0.5f64..1.5, 0.5f64..1.5], -3.2f64..3.2).prop_map(|(a, d, k, yaw)| {
        let c = a.center();
        let s = a.size();
        let b = Box3D::new([c[0] + d[0], c[1] + d[1], c[2] + d[2]], [s[0] * k[0], s[1] * k[1], s[2] * k[2]], yaw).unwrap();
        (a, b)
    })
}

fn ranked(flags: &[(bool, f64)], num_gts: usize) -> MatchResult {
    MatchResult {
        entries: flags
            .iter()
            .enumerate()
            .map(|(i, &(tp, err))| MatchEntry {
                det: i,
                score: 1.0 - i as f64 / (flags.len() + 1) as f64,
                gt: tp.then_some(i),
                heading_error: err,
            })
            .collect(),
        num_gts,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn iou_symmetric_and_bounded((a, b) in arb_pair()) {
        let ab = iou3d(&a, &b);
        let ba = iou3d(&b, &a);
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        let bev = iou_bev(&a, &b);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&bev));
        let inter = bev_intersection_area(&a, &b);
        prop_assert!(inter <= a.bev_area().min(b.bev_area()) * (1.0 + 1e-9) + 1e-12);
        prop_assert!((iou3d(&a, &a) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn idw_weights_are_a_partition(d in prop::collection::vec(0.0f64..10.0, 1..8)) {
        let w = idw_weights(&d);
        prop_assert_eq!(w.len(), d.len());
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn residual_round_trip(gt in arb_box(), p in arb_box()) {
        let back = decode_residual(&encode_residual(&gt, &p), &p).unwrap();
        for k in 0..3 {
            prop_assert!((back.center()[k] - gt.center()[k]).abs() < 1e-9);
            prop_assert!((back.size()[k] - gt.size()[k]).abs() < 1e-9);
        }
        prop_assert!(wrap_angle(back.yaw() - gt.yaw()).abs() < 1e-9);
    }

    #[test]
    fn canonical_frame_round_trip(b in arb_box(), pts in prop::collection::vec([-40.0f64..40.0, -40.0f64..40.0, -40.0f64..40.0], 1..20)) {
        let n = pts.len();
        let cloud = PointCloud::new(pts, vec![0.0; n], 1).unwrap();
        let back = decanonicalize_points(&canonicalize_points(&cloud, &b), &b);
        for (p, q) in cloud.positions().iter().zip(back.positions()) {
            for k in 0..3 {
                prop_assert!((p[k] - q[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn grid_points_lie_in_the_box(b in arb_box(), counts in [1usize..6, 1usize..6, 1usize..6]) {
        let g = grid_points(&b, counts, 1.0);
        prop_assert_eq!(g.global.len(), counts[0] * counts[1] * counts[2]);
        prop_assert!(g.global.iter().all(|&p| common::inside(&b, p)));
    }

    #[test]
    fn density_is_zero_without_points(c in [-60.0f64..60.0, -60.0f64..60.0, -2.0f64..2.0]) {
        prop_assert_eq!(density_value::<f64>(0, c), 0.0);
    }

    #[test]
    fn aph_never_exceeds_ap(
        flags in prop::collection::vec((any::<bool>(), 0.0f64..std::f64::consts::PI), 1..30),
        extra in 0usize..5,
    ) {
        let tps = flags.iter().filter(|f| f.0).count();
        let m = ranked(&flags, tps + extra);
        if let (Some(ap), Some(aph)) = (average_precision_r40(&m), average_precision_heading(&m)) {
            prop_assert!((0.0..=1.0).contains(&ap));
            prop_assert!(aph <= ap + 1e-12);
            let weights: Vec<f64> = flags.iter().map(|f| if f.0 { 1.0 } else { 0.0 }).collect();
            prop_assert!((ap - common::ap40(&weights, tps + extra)).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// In log2n mode a node at depth `d >= 1` takes floor(log2 d) + 1
    /// same-level inputs plus one from each adjacent level.
    #[test]
    fn log2n_fan_in(levels in 1usize..5, depth in 1usize..65) {
        let g = FusionGraph::new(
            FusionConfig { levels, depth, mode: ConnectionMode::Log2n, internal_channels: 2, output_channels: 2 },
            vec![3; levels],
        ).unwrap();
        for l in 0..levels {
            for d in 1..=depth {
                let same = g.incoming(NodeId { level: l, depth: d }).iter().filter(|e| e.from.level == l).count();
                prop_assert_eq!(same, d.ilog2() as usize + 1);
                let want: Vec<(usize, usize)> = common::enumerate_inputs(levels, l + 1, d, false)
                    .into_iter()
                    .map(|(ll, dd)| (ll - 1, dd))
                    .collect();
                let got: Vec<(usize, usize)> = g.incoming(NodeId { level: l, depth: d }).iter().map(|e| (e.from.level, e.from.depth)).collect();
                prop_assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn fusion_is_deterministic(seed in 0u64..1000, dense in any::<bool>(), vals in prop::collection::vec(-1.0f64..1.0, 27 * 4 + 8 * 4)) {
        let mode = if dense { ConnectionMode::Dense } else { ConnectionMode::Log2n };
        let g = FusionGraph::new(FusionConfig { levels: 2, depth: 3, mode, internal_channels: 5, output_channels: 4 }, vec![4, 4]).unwrap();
        let cube = |n: usize| -> Vec<[f64; 3]> {
            let c = |i: usize| -1.0 + (i as f64 + 0.5) * 2.0 / n as f64;
            (0..n * n * n).map(|i| [c(i / (n * n)), c(i / n % n), c(i % n)]).collect()
        };
        let points = [cube(3), cube(2)];
        let levels = vec![
            Matrix::from_vec(27, 4, vals[..108].to_vec()).unwrap(),
            Matrix::from_vec(8, 4, vals[108..].to_vec()).unwrap(),
        ];
        let input = FusionInput::new(levels, &points).unwrap();
        let params = FusionParams::<f64>::init(&g, seed);
        let a = fuse_infer(&g, &params, &input).unwrap().fused;
        let b = fuse_infer(&g, &FusionParams::<f64>::init(&g, seed), &input).unwrap().fused;
        prop_assert_eq!(a.len(), g.output_dim());
        prop_assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }
}
