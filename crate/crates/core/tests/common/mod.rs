//! Independent reference implementations used by the integration tests.
//! Nothing here calls into the library's geometry or interpolation code.

#![allow(dead_code)]

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pyramid_det::model::Box3D;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Writes straight to the process stderr so the line shows up even when
/// the harness captures test output.
pub fn report(name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "[acceptance] {verdict} {name}: {detail}");
}

pub fn random_box(rng: &mut ChaCha8Rng) -> Box3D<f64> {
    Box3D::new(
        [rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), rng.gen_range(-2.0..1.0)],
        [rng.gen_range(0.5..5.0), rng.gen_range(0.5..2.5), rng.gen_range(0.5..2.0)],
        rng.gen_range(-3.2..3.2),
    )
    .unwrap()
}

/// A box overlapping `a` in most draws.
pub fn nearby_box(rng: &mut ChaCha8Rng, a: &Box3D<f64>) -> Box3D<f64> {
    let c = a.center();
    let s = a.size();
    Box3D::new(
        [
            c[0] + rng.gen_range(-0.6..0.6) * s[0],
            c[1] + rng.gen_range(-0.6..0.6) * s[1],
            c[2] + rng.gen_range(-0.5..0.5) * s[2],
        ],
        [s[0] * rng.gen_range(0.6..1.5), s[1] * rng.gen_range(0.6..1.5), s[2] * rng.gen_range(0.6..1.5)],
        rng.gen_range(-3.2..3.2),
    )
    .unwrap()
}

/// Point-in-box by explicit rotation into the box frame.
pub fn inside(b: &Box3D<f64>, p: [f64; 3]) -> bool {
    let c = b.center();
    let s = b.size();
    let (sin, cos) = b.yaw().sin_cos();
    let dx = p[0] - c[0];
    let dy = p[1] - c[1];
    let u = cos * dx + sin * dy;
    let v = -sin * dx + cos * dy;
    let w = p[2] - c[2];
    u.abs() <= s[0] / 2.0 && v.abs() <= s[1] / 2.0 && w.abs() <= s[2] / 2.0
}

/// Stratified Monte-Carlo IoU: `n^3` jittered samples inside `a`.
pub fn monte_carlo_iou(a: &Box3D<f64>, b: &Box3D<f64>, n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let c = a.center();
    let s = a.size();
    let (sin, cos) = a.yaw().sin_cos();
    let mut hits = 0usize;
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let u = ((i as f64 + rng.gen::<f64>()) / n as f64 - 0.5) * s[0];
                let v = ((j as f64 + rng.gen::<f64>()) / n as f64 - 0.5) * s[1];
                let w = ((k as f64 + rng.gen::<f64>()) / n as f64 - 0.5) * s[2];
                let p = [c[0] + cos * u - sin * v, c[1] + sin * u + cos * v, c[2] + w];
                if inside(b, p) {
                    hits += 1;
                }
            }
        }
    }
    let va = s[0] * s[1] * s[2];
    let sb = b.size();
    let vb = sb[0] * sb[1] * sb[2];
    let inter = va * hits as f64 / (n * n * n) as f64;
    inter / (va + vb - inter)
}

/// Rotates both boxes by `theta` about the z axis through the origin and
/// then translates them by `t`.
pub fn rigid(b: &Box3D<f64>, theta: f64, t: [f64; 3]) -> Box3D<f64> {
    let (sin, cos) = theta.sin_cos();
    let c = b.center();
    Box3D::new(
        [cos * c[0] - sin * c[1] + t[0], sin * c[0] + cos * c[1] + t[1], c[2] + t[2]],
        b.size(),
        b.yaw() + theta,
    )
    .unwrap()
}

pub fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// The `k` nearest sources by full sort on squared distance, ties to the
/// lower index. Ordering on the square root would merge values that differ
/// in the last bit.
pub fn brute_knn(q: [f64; 3], src: &[[f64; 3]], k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = src.iter().enumerate().map(|(i, &p)| (i, dist2(q, p))).collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all.into_iter().map(|(i, d2)| (i, d2.sqrt())).collect()
}

/// Inverse-distance weighted mean with the `1e-8` offset; exact copies
/// when the query coincides with sources.
pub fn brute_idw(q: [f64; 3], src: &[[f64; 3]], feats: &[Vec<f64>], k: usize) -> Vec<f64> {
    let nb = brute_knn(q, src, k);
    let c = feats.first().map_or(0, Vec::len);
    let mut out = vec![0.0; c];
    if nb.is_empty() {
        return out;
    }
    let coincident: Vec<usize> = nb.iter().filter(|x| x.1 == 0.0).map(|x| x.0).collect();
    if !coincident.is_empty() {
        for &i in &coincident {
            for (o, f) in out.iter_mut().zip(&feats[i]) {
                *o += f / coincident.len() as f64;
            }
        }
        return out;
    }
    let w: Vec<f64> = nb.iter().map(|x| 1.0 / (x.1 + 1e-8)).collect();
    let total: f64 = w.iter().sum();
    for ((i, _), wi) in nb.iter().zip(&w) {
        for (o, f) in out.iter_mut().zip(&feats[*i]) {
            *o += wi / total * f;
        }
    }
    out
}

/// Incoming edges of node `(l, d)` (levels 1-based, `1 <= d`) from the
/// connection rule: same-level sources `d - 2^k` (all earlier depths when
/// dense) in descending order, then `(l-1, d-1)`, then `(l+1, d-1)`.
pub fn enumerate_inputs(levels: usize, l: usize, d: usize, dense: bool) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    if dense {
        for dh in (0..d).rev() {
            out.push((l, dh));
        }
    } else {
        let mut k = 0u32;
        while 2usize.pow(k) <= d {
            out.push((l, d - 2usize.pow(k)));
            k += 1;
        }
    }
    if l > 1 {
        out.push((l - 1, d - 1));
    }
    if l < levels {
        out.push((l + 1, d - 1));
    }
    out
}

/// Hand-rolled 40-point interpolated AP from per-rank TP weights.
pub fn ap40(weights_by_rank: &[f64], num_gts: usize) -> f64 {
    let mut cum = 0.0;
    let mut pr = Vec::new();
    for (i, w) in weights_by_rank.iter().enumerate() {
        cum += w;
        pr.push((cum / num_gts as f64, cum / (i + 1) as f64));
    }
    let mut ap = 0.0;
    for k in 1..=40 {
        let r = k as f64 / 40.0;
        let best = pr.iter().filter(|x| x.0 >= r - 1e-12).map(|x| x.1).fold(0.0, f64::max);
        ap += best;
    }
    ap / 40.0
}
