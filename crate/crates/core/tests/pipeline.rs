mod common;

use proptest::prelude::*;

use pyramid_det::encoder::FeatureSource;
use pyramid_det::eval::{evaluate, EvalScene};
use pyramid_det::fuse::ConnectionMode;
use pyramid_det::model::{generate_scene, LabeledScene, SceneSpec};
use pyramid_det::pipeline::kitti::{Calibration, SceneDir};
use pyramid_det::pipeline::{generate_proposals, run_pipeline, Model, ProposalConfig, RunConfig};
use pyramid_det::pool::{Aggregator, LevelSpec};

fn small_scene_spec() -> SceneSpec {
    SceneSpec {
        object_count: [2, 3],
        ground_points: 300,
        clutter_clusters: 1,
        ..SceneSpec::default()
    }
}

#[test]
fn kitti_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = SceneDir::new(dir.path());
    let scene: LabeledScene<f64> = generate_scene(&RunConfig::toy().scene, 12).unwrap();
    scenes.write_scene(0, &scene, Calibration::Identity).unwrap();
    let back = scenes.load_scene(0, Calibration::Identity).unwrap();

    // Points are stored as f32; labels as shortest round-trip decimals.
    assert_eq!(back.cloud.len(), scene.cloud.len());
    for (i, (a, b)) in scene.cloud.positions().iter().zip(back.cloud.positions()).enumerate() {
        for k in 0..3 {
            assert_eq!(a[k] as f32 as f64, b[k], "point {i} axis {k}");
        }
        assert_eq!(scene.cloud.feature(i)[0] as f32 as f64, back.cloud.feature(i)[0]);
    }
    assert_eq!(back.ground_truths, scene.ground_truths);

    // A second pass reproduces the bytes.
    let other = SceneDir::new(dir.path().join("again"));
    other.write_scene(0, &back, Calibration::Identity).unwrap();
    assert_eq!(std::fs::read(scenes.bin_path(0)).unwrap(), std::fs::read(other.bin_path(0)).unwrap());
    assert_eq!(std::fs::read(scenes.label_path(0)).unwrap(), std::fs::read(other.label_path(0)).unwrap());
    assert_eq!(scenes.indices().unwrap(), vec![0]);
}

#[test]
fn proposal_center_spread() {
    let scene: LabeledScene<f64> = generate_scene(&SceneSpec::default(), 3).unwrap();
    let cfg = ProposalConfig {
        sigma_center: 0.3,
        fp_rate: 0.0,
        ..ProposalConfig::default()
    };
    let mut offsets = Vec::new();
    let mut seed = 0;
    while offsets.len() < 1000 {
        for (p, g) in generate_proposals(&scene, &cfg, seed).unwrap().iter().zip(&scene.ground_truths) {
            offsets.push(p.bbox.center()[0] - g.bbox.center()[0]);
        }
        seed += 1;
    }
    offsets.truncate(1000);
    let n = offsets.len() as f64;
    let mean = offsets.iter().sum::<f64>() / n;
    let sd = (offsets.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((sd - 0.3).abs() < 0.03, "sample sd {sd}");
}

#[test]
fn proposal_counts_and_identity() {
    let mut scene: LabeledScene<f64> = generate_scene(&small_scene_spec(), 4).unwrap();
    scene.ground_truths.truncate(3);
    let exact = ProposalConfig {
        sigma_center: 0.0,
        sigma_size: 0.0,
        sigma_yaw: 0.0,
        fp_rate: 0.0,
    };
    let props = generate_proposals(&scene, &exact, 1).unwrap();
    assert_eq!(props.len(), 3);
    for (p, g) in props.iter().zip(&scene.ground_truths) {
        assert_eq!(p.bbox, g.bbox);
    }
    let noisy = ProposalConfig {
        fp_rate: 2.0,
        ..ProposalConfig::default()
    };
    let props = generate_proposals(&scene, &noisy, 1).unwrap();
    assert_eq!(props.len(), 9);
    assert!(props.iter().all(|p| (0.0..=1.0).contains(&p.score)));
    assert_eq!(props, generate_proposals(&scene, &noisy, 1).unwrap());
}

#[test]
fn empty_proposals_give_no_detections() {
    let cfg = RunConfig::toy();
    let scene: LabeledScene<f64> = generate_scene(&cfg.scene, 2).unwrap();
    let model = Model::init(&cfg, 0).unwrap();
    assert!(run_pipeline(&scene.cloud, &[], &cfg, &model).unwrap().is_empty());
}

#[test]
fn end_to_end_determinism() {
    let cfg = RunConfig::toy();
    let run = || {
        let scene: LabeledScene<f64> = generate_scene(&cfg.scene, 6).unwrap();
        let props = generate_proposals(&scene, &cfg.proposals, 7).unwrap();
        let model = Model::init(&cfg, 8).unwrap();
        let dets = run_pipeline(&scene.cloud, &props, &cfg, &model).unwrap();
        assert_eq!(dets.len(), props.len());
        let report = evaluate(
            &[EvalScene {
                gts: &scene.ground_truths,
                cloud: &scene.cloud,
                dets: &dets,
            }],
            &[(0, "Car".into())],
            cfg.eval.scheme,
            cfg.eval.iou_threshold,
        )
        .unwrap();
        (dets, report.to_string())
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(ra, rb);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.score.to_bits(), y.score.to_bits());
        assert_eq!(x.bbox.center().map(f64::to_bits), y.bbox.center().map(f64::to_bits));
        assert_eq!(x.bbox.size().map(f64::to_bits), y.bbox.size().map(f64::to_bits));
        assert_eq!(x.bbox.yaw().to_bits(), y.bbox.yaw().to_bits());
    }
}

const SOURCES: [FeatureSource; 6] = [
    FeatureSource::Points,
    FeatureSource::Voxel1,
    FeatureSource::Voxel2,
    FeatureSource::Voxel4,
    FeatureSource::Voxel8,
    FeatureSource::Bev,
];

fn level_strategy() -> impl Strategy<Value = LevelSpec> {
    let agg = prop_oneof![
        (1usize..5).prop_map(|k| Aggregator::Knn { k }),
        (0.2f64..2.0, 1usize..12).prop_map(|(radius, max_count)| Aggregator::BallMax { radius, max_count }),
    ];
    ([1usize..4, 1usize..4, 1usize..4], 0usize..6, agg).prop_map(|(counts, s, aggregator)| LevelSpec {
        counts,
        source: SOURCES[s],
        aggregator,
    })
}

prop_compose! {
    fn config_strategy()(
        levels in prop::collection::vec(level_strategy(), 1..4),
        fusion_levels in prop::option::weighted(0.2, 1usize..4),
        depth in 1usize..4,
        dense in any::<bool>(),
        internal in 1usize..6,
        output in 1usize..6,
        shared in prop_oneof![4 => prop::collection::vec(1usize..12, 1..3), 1 => Just(Vec::new())],
        hidden in prop_oneof![6 => 1usize..8, 1 => Just(0usize)],
        use_density in any::<bool>(),
        position_encoding in any::<bool>(),
        context in 0.95f64..1.6,
        keypoints in 0usize..64,
    ) -> RunConfig {
        let mut cfg = RunConfig::toy();
        cfg.scene = small_scene_spec();
        cfg.fusion.levels = fusion_levels.unwrap_or(levels.len());
        cfg.pool.levels = levels;
        cfg.pool.context = context;
        cfg.pool.keypoints = keypoints;
        cfg.fusion.depth = depth;
        cfg.fusion.mode = if dense { ConnectionMode::Dense } else { ConnectionMode::Log2n };
        cfg.fusion.internal_channels = internal;
        cfg.fusion.output_channels = output;
        cfg.heads.shared_widths = shared;
        cfg.heads.hidden_width = hidden;
        cfg.heads.use_density = use_density;
        cfg.position_encoding = position_encoding;
        cfg
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    /// A configuration that validates runs without dimension errors; one
    /// that does not is rejected before any work.
    #[test]
    fn validation_is_sufficient(cfg in config_strategy(), seed in 0u64..1000) {
        let scene: LabeledScene<f64> = generate_scene(&cfg.scene, seed).unwrap();
        let props = generate_proposals(&scene, &cfg.proposals, seed).unwrap();
        match cfg.validate() {
            Ok(()) => {
                let model = Model::init(&cfg, seed).unwrap();
                let dets = run_pipeline(&scene.cloud, &props, &cfg, &model).unwrap();
                prop_assert_eq!(dets.len(), props.len());
                prop_assert!(dets.iter().all(|d| d.score.is_finite() && (0.0..=1.0).contains(&d.score)));
            }
            Err(_) => {
                prop_assert!(Model::init(&cfg, seed).is_err());
            }
        }
    }
}

#[test]
fn shipped_configs_match_presets() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    assert_eq!(RunConfig::load(&root.join("toy.toml")).unwrap(), RunConfig::toy());
    assert_eq!(RunConfig::load(&root.join("default.toml")).unwrap(), RunConfig::default());
}
