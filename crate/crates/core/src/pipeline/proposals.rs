//! Stand-in first stage: jittered copies of the ground truths plus random
//! negatives.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Box3D, LabeledScene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalConfig {
    /// Per-axis std-dev of the center offset, meters.
    pub sigma_center: f64,
    /// Std-dev of the log size ratio per dimension.
    pub sigma_size: f64,
    /// Std-dev of the yaw offset, radians.
    pub sigma_yaw: f64,
    /// Negatives injected per ground truth (rounded to nearest).
    pub fp_rate: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            sigma_center: 0.3,
            sigma_size: 0.1,
            sigma_yaw: 0.1,
            fp_rate: 1.0,
        }
    }
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.sigma_center, self.sigma_size, self.sigma_yaw, self.fp_rate];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("proposal jitter and fp_rate must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub bbox: Box3D<f64>,
    /// Objectness in `[0, 1]`.
    pub score: f64,
    pub class_id: u32,
}

/// One jittered copy per ground truth, in label order, followed by
/// `round(fp_rate * n_gt)` negatives spread over the footprint of the
/// cloud with the size of a randomly chosen ground truth. Positives score
/// in `[0.5, 1)`, negatives in `[0, 0.5)`.
pub fn generate_proposals(scene: &LabeledScene<f64>, cfg: &ProposalConfig, seed: u64) -> Result<Vec<Proposal>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |s: f64| Normal::new(0.0, s).expect("finite sigma");
    let (nc, ns, ny) = (normal(cfg.sigma_center), normal(cfg.sigma_size), normal(cfg.sigma_yaw));
    let gts = &scene.ground_truths;
    let mut out = Vec::with_capacity(gts.len());
    for g in gts {
        let c = g.bbox.center();
        let s = g.bbox.size();
        let center = [c[0] + nc.sample(&mut rng), c[1] + nc.sample(&mut rng), c[2] + nc.sample(&mut rng)];
        let size = [s[0] * ns.sample(&mut rng).exp(), s[1] * ns.sample(&mut rng).exp(), s[2] * ns.sample(&mut rng).exp()];
        out.push(Proposal {
            bbox: Box3D::new(center, size, g.bbox.yaw() + ny.sample(&mut rng))?,
            score: rng.gen_range(0.5..1.0),
            class_id: g.class_id,
        });
    }
    let negatives = (cfg.fp_rate * gts.len() as f64).round() as usize;
    if negatives > 0 {
        let (lo, hi) = footprint(scene);
        for _ in 0..negatives {
            let g = &gts[rng.gen_range(0..gts.len())];
            let x = rng.gen_range(lo[0]..=hi[0]);
            let y = rng.gen_range(lo[1]..=hi[1]);
            out.push(Proposal {
                bbox: Box3D::new([x, y, g.bbox.center()[2]], g.bbox.size(), rng.gen_range(-PI..PI))?,
                score: rng.gen_range(0.0..0.5),
                class_id: g.class_id,
            });
        }
    }
    Ok(out)
}

fn footprint(scene: &LabeledScene<f64>) -> ([f64; 2], [f64; 2]) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    let centers = scene.ground_truths.iter().map(|g| g.bbox.center());
    for p in scene.cloud.positions().iter().copied().chain(centers) {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    (lo, hi)
}
