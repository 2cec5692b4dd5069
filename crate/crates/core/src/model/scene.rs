//! Synthetic LiDAR-like scenes with range-dependent point density.
//!
//! Objects are boxes whose sensor-facing faces and top are sampled with
//! `n(r) = max(1, round(c / r^2))` points, `r` the planar range of the box
//! center. Ground returns fall just below the ground plane and vertical
//! clutter blobs stand in for vegetation and poles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Box3D, GroundTruth, LabeledScene, PointCloud};
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassTemplate {
    pub id: u32,
    pub name: String,
    pub length: [f64; 2],
    pub width: [f64; 2],
    pub height: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    /// Inclusive range of objects per scene.
    pub object_count: [usize; 2],
    pub classes: Vec<ClassTemplate>,
    /// Planar range of object centers; must exclude 0.
    pub radial_range: [f64; 2],
    pub azimuth_range: [f64; 2],
    /// `c` in `n(r) = c / r^2`.
    pub density_coeff: f64,
    pub ground_z: f64,
    /// Std-dev of the inward jitter applied to surface samples.
    pub surface_noise: f64,
    pub ground_points: usize,
    pub clutter_clusters: usize,
    /// Density coefficient for clutter blobs, same law as objects.
    pub clutter_density_coeff: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            object_count: [4, 8],
            classes: vec![ClassTemplate {
                id: 0,
                name: "Car".into(),
                length: [3.6, 4.6],
                width: [1.5, 1.9],
                height: [1.4, 1.7],
            }],
            radial_range: [6.0, 60.0],
            azimuth_range: [-0.55, 0.55],
            density_coeff: 35_000.0,
            ground_z: -1.6,
            surface_noise: 0.02,
            ground_points: 3000,
            clutter_clusters: 6,
            clutter_density_coeff: 8_000.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let [r0, r1] = self.radial_range;
        if !(r0 > 0.0 && r1 > r0) {
            return Err(Error::Config(format!(
                "radial range must satisfy 0 < min < max, got [{r0}, {r1}]"
            )));
        }
        if self.object_count[0] > self.object_count[1] {
            return Err(Error::Config("object_count min exceeds max".into()));
        }
        if self.classes.is_empty() && self.object_count[1] > 0 {
            return Err(Error::Config("no object classes".into()));
        }
        for c in &self.classes {
            for (name, r) in [("length", c.length), ("width", c.width), ("height", c.height)] {
                if !(r[0] > 0.0 && r[1] >= r[0]) {
                    return Err(Error::Config(format!("class {}: bad {name} range {r:?}", c.name)));
                }
            }
        }
        if !(self.density_coeff > 0.0) || self.azimuth_range[0] > self.azimuth_range[1] {
            return Err(Error::Config("density coefficient or azimuth range invalid".into()));
        }
        Ok(())
    }
}

/// Points sampled on an object whose center sits at planar range `r`.
pub fn points_for_range(coeff: f64, r: f64) -> usize {
    ((coeff / (r * r)).round() as usize).max(1)
}

fn range_sample(rng: &mut ChaCha8Rng, [a, b]: [f64; 2]) -> f64 {
    if b > a {
        rng.gen_range(a..b)
    } else {
        a
    }
}

/// Deterministic in `(spec, seed)`.
pub fn generate_scene<T: Real>(spec: &SceneSpec, seed: u64) -> Result<LabeledScene<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.surface_noise.max(0.0)).expect("finite sigma");

    let n_objects = rng.gen_range(spec.object_count[0]..=spec.object_count[1]);
    let mut boxes: Vec<(Box3D<f64>, u32)> = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        for _attempt in 0..100 {
            let class = &spec.classes[rng.gen_range(0..spec.classes.len())];
            let size = [
                range_sample(&mut rng, class.length),
                range_sample(&mut rng, class.width),
                range_sample(&mut rng, class.height),
            ];
            let r = range_sample(&mut rng, spec.radial_range);
            let az = range_sample(&mut rng, spec.azimuth_range);
            let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let center = [r * az.cos(), r * az.sin(), spec.ground_z + size[2] / 2.0];
            let candidate = Box3D::new(center, size, yaw)?;
            if separated(&candidate, boxes.iter().map(|(b, _)| b)) {
                boxes.push((candidate, class.id));
                break;
            }
        }
    }

    let mut positions: Vec<[f64; 3]> = Vec::new();
    let mut intensity: Vec<f64> = Vec::new();

    for (b, _) in &boxes {
        let n = points_for_range(spec.density_coeff, b.planar_range());
        sample_box_surface(b, n, &noise, &mut rng, &mut positions, &mut intensity);
    }

    for _ in 0..spec.ground_points {
        let r = rng.gen_range(spec.radial_range[0] * 0.5..spec.radial_range[1] * 1.1);
        let az = range_sample(&mut rng, spec.azimuth_range);
        let z = spec.ground_z - 0.01 - noise.sample(&mut rng).abs();
        positions.push([r * az.cos(), r * az.sin(), z]);
        intensity.push(rng.gen_range(0.0..0.4));
    }

    let mut blobs: Vec<Box3D<f64>> = Vec::new();
    for _ in 0..spec.clutter_clusters {
        for _attempt in 0..100 {
            let r = range_sample(&mut rng, spec.radial_range);
            let az = range_sample(&mut rng, spec.azimuth_range);
            let height = rng.gen_range(0.4..1.4);
            let blob = Box3D::new(
                [r * az.cos(), r * az.sin(), spec.ground_z + height / 2.0],
                [0.8, 0.8, height],
                0.0,
            )?;
            if separated(&blob, boxes.iter().map(|(b, _)| b)) {
                let n = points_for_range(spec.clutter_density_coeff, r);
                for _ in 0..n {
                    let q = [
                        rng.gen_range(-0.4..0.4),
                        rng.gen_range(-0.4..0.4),
                        rng.gen_range(-height / 2.0..height / 2.0),
                    ];
                    positions.push(blob.to_global(q));
                    intensity.push(rng.gen_range(0.0..0.5));
                }
                blobs.push(blob);
                break;
            }
        }
    }

    let cloud = PointCloud::new(
        positions.into_iter().map(|p| p.map(T::lit)).collect(),
        intensity.into_iter().map(T::lit).collect(),
        1,
    )?;
    let ground_truths = boxes
        .into_iter()
        .map(|(b, class_id)| {
            Ok(GroundTruth {
                bbox: Box3D::new(b.center().map(T::lit), b.size().map(T::lit), T::lit(b.yaw()))?,
                class_id,
            })
        })
        .collect::<Result<_>>()?;
    Ok(LabeledScene {
        cloud,
        ground_truths,
    })
}

fn separated<'a>(b: &Box3D<f64>, others: impl Iterator<Item = &'a Box3D<f64>>) -> bool {
    let rb = b.size()[0].hypot(b.size()[1]) / 2.0;
    others.into_iter().all(|o| {
        let ro = o.size()[0].hypot(o.size()[1]) / 2.0;
        let d = (b.center()[0] - o.center()[0]).hypot(b.center()[1] - o.center()[1]);
        d > rb + ro + 0.5
    })
}

/// Samples `n` points on the sensor-visible faces, pushed inward so every
/// sample lies inside the box.
fn sample_box_surface(
    b: &Box3D<f64>,
    n: usize,
    noise: &Normal<f64>,
    rng: &mut ChaCha8Rng,
    positions: &mut Vec<[f64; 3]>,
    intensity: &mut Vec<f64>,
) {
    let half = b.size().map(|s| s / 2.0);
    // Faces as (axis, sign); the sensor is at the origin.
    let sensor = b.to_canonical([0.0; 3]);
    let mut faces: Vec<(usize, f64, f64)> = Vec::new();
    for axis in 0..3 {
        for sign in [-1.0, 1.0] {
            if axis == 2 && sign < 0.0 {
                continue;
            }
            if sign * (sensor[axis] - sign * half[axis]) > 0.0 {
                let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                faces.push((axis, sign, 4.0 * half[u] * half[v]));
            }
        }
    }
    if faces.is_empty() {
        faces.push((2, 1.0, 4.0 * half[0] * half[1]));
    }
    let total: f64 = faces.iter().map(|f| f.2).sum();
    for _ in 0..n {
        let mut pick = rng.gen_range(0.0..total);
        let mut face = faces[faces.len() - 1];
        for f in &faces {
            if pick < f.2 {
                face = *f;
                break;
            }
            pick -= f.2;
        }
        let (axis, sign, _) = face;
        let mut q = [0.0; 3];
        for (k, qk) in q.iter_mut().enumerate() {
            *qk = if k == axis {
                let inset = noise.sample(rng).abs().min(half[k]);
                sign * (half[k] - inset)
            } else {
                rng.gen_range(-half[k]..half[k])
            };
        }
        positions.push(b.to_global(q));
        intensity.push(rng.gen_range(0.2..1.0));
    }
}
