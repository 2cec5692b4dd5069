//! Quick oracle checks bundled with the library, run by the `selftest`
//! command. Each finishes in well under a second except the gradient
//! checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::eval::{average_precision_r40, MatchEntry, MatchResult};
use crate::fuse::{FusionConfig, FusionGraph, NodeId};
use crate::geometry::{brute_force_query, iou3d, neighbor_query, NeighborMode};
use crate::heads::{bce, rcnn_loss, LossConfig, Targets};
use crate::model::Box3D;
use crate::pipeline::checks::{composite_gradcheck, Composite};
use crate::pipeline::kitti::{format_label, parse_labels, Calibration};
use crate::pool::{idw_weights, GridPyramidSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &'static str, pass: bool, detail: String) -> Check {
    Check { name, pass, detail }
}

fn grid_counts() -> Check {
    let sizes = GridPyramidSpec::default().level_sizes();
    check("grid pyramid counts", sizes == [216, 64, 8, 8], format!("{sizes:?}"))
}

fn fusion_edges() -> Check {
    let g = FusionGraph::new(FusionConfig::default(), vec![5; 4]).expect("default graph");
    let got: Vec<(usize, usize)> = g
        .incoming(NodeId { level: 1, depth: 13 })
        .iter()
        .map(|e| (e.from.level, e.from.depth))
        .collect();
    let want = [(1, 12), (1, 11), (1, 9), (1, 5), (0, 12), (2, 12)];
    check(
        "log2n edges of node (level 1, depth 13)",
        got == want && g.num_nodes() == 60,
        format!("{got:?}, {} nodes", g.num_nodes()),
    )
}

fn unit_cube_iou() -> Check {
    let a = Box3D::<f64>::new([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0).expect("box");
    let b = Box3D::new([0.5, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0).expect("box");
    let v = iou3d(&a, &b);
    check("unit cubes offset by half", (v - 1.0 / 3.0).abs() < 1e-12, format!("iou {v}"))
}

/// Coarse Monte-Carlo comparison on a few rotated pairs.
fn iou_monte_carlo(rng: &mut ChaCha8Rng) -> Check {
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let a = Box3D::new([0.0, 0.0, 0.0], [4.0, 2.0, 1.5], rng.gen_range(-3.0..3.0)).expect("box");
        let b = Box3D::new(
            [rng.gen_range(-1.5..1.5), rng.gen_range(-1.0..1.0), rng.gen_range(-0.5..0.5)],
            [rng.gen_range(2.0..5.0), rng.gen_range(1.0..2.5), rng.gen_range(1.0..2.0)],
            rng.gen_range(-3.0..3.0),
        )
        .expect("box");
        let n = 200_000;
        let s = a.size();
        let hits = (0..n)
            .filter(|_| {
                let q = [
                    rng.gen_range(-0.5..0.5) * s[0],
                    rng.gen_range(-0.5..0.5) * s[1],
                    rng.gen_range(-0.5..0.5) * s[2],
                ];
                b.contains(a.to_global(q))
            })
            .count();
        let inter = a.volume() * hits as f64 / n as f64;
        let mc = inter / (a.volume() + b.volume() - inter);
        worst = worst.max((mc - iou3d(&a, &b)).abs());
    }
    check("rotated IoU vs Monte-Carlo", worst < 1e-2, format!("max deviation {worst:.2e}"))
}

fn knn_parity(rng: &mut ChaCha8Rng) -> Check {
    let src: Vec<[f64; 3]> = (0..500).map(|_| [(); 3].map(|_| rng.gen_range(-5.0..5.0))).collect();
    let q: Vec<[f64; 3]> = (0..200).map(|_| [(); 3].map(|_| rng.gen_range(-6.0..6.0))).collect();
    let mut ok = true;
    for mode in [NeighborMode::Knn { k: 3 }, NeighborMode::Ball { radius: 1.2, max_count: 16 }] {
        let a = neighbor_query(&q, &src, mode).expect("query");
        let b = brute_force_query(&q, &src, mode).expect("query");
        ok &= a == b;
    }
    check("hash grid vs brute force", ok, "knn k=3 and ball r=1.2".into())
}

fn idw_sum(rng: &mut ChaCha8Rng) -> Check {
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let d: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..3.0)).collect();
        worst = worst.max((idw_weights(&d).iter().sum::<f64>() - 1.0).abs());
    }
    let exact = idw_weights(&[0.0, 1.0, 2.0]) == [1.0, 0.0, 0.0];
    check("IDW weights", worst < 1e-12 && exact, format!("max |sum - 1| {worst:.1e}, coincident exact {exact}"))
}

fn ap_cases() -> Check {
    let m = |flags: &[bool], gts: usize| MatchResult {
        entries: flags
            .iter()
            .enumerate()
            .map(|(i, &tp)| MatchEntry {
                det: i,
                score: 1.0 - i as f64 * 0.1,
                gt: tp.then_some(i),
                heading_error: 0.0,
            })
            .collect(),
        num_gts: gts,
    };
    let got = [
        average_precision_r40(&m(&[true, true], 2)),
        average_precision_r40(&m(&[false, false], 2)),
        average_precision_r40(&m(&[false, true], 1)),
    ];
    let pass = got == [Some(1.0), Some(0.0), Some(0.5)];
    check("AP R40 hand cases", pass, format!("{got:?}"))
}

fn loss_cases() -> Check {
    let cfg = LossConfig::default();
    let t = Targets {
        cls: vec![1.0, 0.0],
        residuals: vec![[0.1; 7], [0.2; 7]],
        iou: vec![0.5, 0.2],
    };
    let l = rcnn_loss::<f64>(&[0.7, 0.1], &[[0.0; 7]; 2], &t, &cfg).expect("loss");
    let expected: f64 = (bce(0.7, 1.0).0 + bce(0.1, 0.0).0) / 2.0;
    let perfect = rcnn_loss(&[1.0, 0.0], &[[0.1; 7], [0.2; 7]], &t, &cfg).expect("loss");
    let pass = l.reg == 0.0 && (l.total - expected).abs() < 1e-15 && perfect.total < 1e-6;
    check("loss gating and perfect prediction", pass, format!("gated reg {}, perfect {:.1e}", l.reg, perfect.total))
}

fn label_round_trip() -> Check {
    let b = Box3D::new([12.5, -3.25, -0.75], [4.0, 1.75, 1.5], 0.375).expect("box");
    let mut ok = true;
    for calib in [Calibration::Identity, Calibration::KittiAxes] {
        let line = format_label(0, &b, None, calib);
        let back = parse_labels(&line, calib, "selftest").expect("parse");
        let r = back[0].bbox;
        ok &= r.size() == b.size() && (0..3).all(|a| (r.center()[a] - b.center()[a]).abs() < 1e-12);
    }
    check("label text round trip", ok, "identity and axis calibrations".into())
}

fn gradients(coords: usize) -> Vec<Check> {
    Composite::ALL
        .into_iter()
        .map(|c| {
            let name = match c {
                Composite::Fusion => "fusion gradients",
                Composite::Heads => "head gradients",
                Composite::Rcnn => "refinement loss gradients",
            };
            match composite_gradcheck(c, coords, 1e-5, 3) {
                Ok(r) => check(name, r.passed(), format!("{} coords, max rel err {:.2e}", r.checked, r.max_rel_err)),
                Err(e) => check(name, false, e.to_string()),
            }
        })
        .collect()
}

/// Runs every check; `gradient_coords` sets the sample size of the
/// finite-difference checks.
pub fn run_all(seed: u64, gradient_coords: usize) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![
        grid_counts(),
        fusion_edges(),
        unit_cube_iou(),
        iou_monte_carlo(&mut rng),
        knn_parity(&mut rng),
        idw_sum(&mut rng),
        ap_cases(),
        loss_cases(),
        label_round_trip(),
    ];
    out.extend(gradients(gradient_coords));
    out
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        for c in super::run_all(0, 50) {
            assert!(c.pass, "{}: {}", c.name, c.detail);
        }
    }
}
