//! Domain types: point clouds, oriented boxes, labeled scenes, detections.

mod scene;

use crate::error::{Error, Result};
use crate::scalar::{wrap_angle, Real};

pub use scene::{generate_scene, points_for_range, ClassTemplate, SceneSpec};

/// Points with xyz coordinates (sensor frame, meters) and per-point
/// feature channels. Channel 0 is intensity by convention.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud<T> {
    positions: Vec<[T; 3]>,
    features: Vec<T>,
    channels: usize,
}

impl<T: Real> PointCloud<T> {
    pub fn new(positions: Vec<[T; 3]>, features: Vec<T>, channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidInput("point clouds need at least one feature channel".into()));
        }
        if features.len() != positions.len() * channels {
            return Err(Error::DimensionMismatch {
                context: "point features".into(),
                expected: positions.len() * channels,
                got: features.len(),
            });
        }
        if let Some(i) = positions.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidInput(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self {
            positions,
            features,
            channels,
        })
    }

    pub fn empty(channels: usize) -> Self {
        Self {
            positions: Vec::new(),
            features: Vec::new(),
            channels: channels.max(1),
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn positions(&self) -> &[[T; 3]] {
        &self.positions
    }

    #[inline]
    pub fn features(&self) -> &[T] {
        &self.features
    }

    #[inline]
    pub fn feature(&self, i: usize) -> &[T] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    /// Same features, new coordinates.
    pub fn with_positions(&self, positions: Vec<[T; 3]>) -> Result<Self> {
        Self::new(positions, self.features.clone(), self.channels)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let positions = indices.iter().map(|&i| self.positions[i]).collect();
        let mut features = Vec::with_capacity(indices.len() * self.channels);
        for &i in indices {
            features.extend_from_slice(self.feature(i));
        }
        Self {
            positions,
            features,
            channels: self.channels,
        }
    }
}

/// Oriented box: center, (length, width, height) along the box x/y/z axes
/// and yaw about +z, normalized to `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D<T> {
    center: [T; 3],
    size: [T; 3],
    yaw: T,
}

impl<T: Real> Box3D<T> {
    pub fn new(center: [T; 3], size: [T; 3], yaw: T) -> Result<Self> {
        if !(size.iter().all(|&s| s > T::zero() && s.is_finite())) {
            return Err(Error::InvalidBox(format!("sizes must be positive, got {size:?}")));
        }
        if !(center.iter().all(|v| v.is_finite()) && yaw.is_finite()) {
            return Err(Error::InvalidBox("non-finite center or yaw".into()));
        }
        Ok(Self {
            center,
            size,
            yaw: wrap_angle(yaw),
        })
    }

    #[inline]
    pub fn center(&self) -> [T; 3] {
        self.center
    }

    #[inline]
    pub fn size(&self) -> [T; 3] {
        self.size
    }

    #[inline]
    pub fn yaw(&self) -> T {
        self.yaw
    }

    pub fn volume(&self) -> T {
        self.size[0] * self.size[1] * self.size[2]
    }

    pub fn bev_area(&self) -> T {
        self.size[0] * self.size[1]
    }

    /// Planar distance of the center from the sensor origin.
    pub fn planar_range(&self) -> T {
        self.center[0].hypot(self.center[1])
    }

    pub fn z_min(&self) -> T {
        self.center[2] - self.size[2] * T::half()
    }

    pub fn z_max(&self) -> T {
        self.center[2] + self.size[2] * T::half()
    }

    /// Box with every extent multiplied by `factor`.
    pub fn scaled(&self, factor: T) -> Result<Self> {
        Self::new(self.center, self.size.map(|s| s * factor), self.yaw)
    }

    /// Global point to box frame: translate by `-center`, rotate by `-yaw`.
    #[inline]
    pub fn to_canonical(&self, p: [T; 3]) -> [T; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.center[2]]
    }

    #[inline]
    pub fn to_global(&self, q: [T; 3]) -> [T; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            self.center[0] + c * q[0] - s * q[1],
            self.center[1] + s * q[0] + c * q[1],
            self.center[2] + q[2],
        ]
    }

    /// Inclusive on every face.
    #[inline]
    pub fn contains(&self, p: [T; 3]) -> bool {
        let q = self.to_canonical(p);
        let h = T::half();
        q[0].abs() <= self.size[0] * h && q[1].abs() <= self.size[1] * h && q[2].abs() <= self.size[2] * h
    }

    /// BEV footprint corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[T; 2]; 4] {
        let (hl, hw) = (self.size[0] * T::half(), self.size[1] * T::half());
        [[hl, -hw], [hl, hw], [-hl, hw], [-hl, -hw]].map(|[x, y]| {
            let g = self.to_global([x, y, T::zero()]);
            [g[0], g[1]]
        })
    }

    /// Radius of the circumscribed sphere.
    pub fn bounding_radius(&self) -> T {
        let [l, w, h] = self.size;
        (l * l + w * w + h * h).sqrt() * T::half()
    }
}

/// Expresses the cloud in the box frame. Features are unchanged.
pub fn canonicalize_points<T: Real>(cloud: &PointCloud<T>, bbox: &Box3D<T>) -> PointCloud<T> {
    PointCloud {
        positions: cloud.positions.iter().map(|&p| bbox.to_canonical(p)).collect(),
        features: cloud.features.clone(),
        channels: cloud.channels,
    }
}

/// Inverse of [`canonicalize_points`].
pub fn decanonicalize_points<T: Real>(cloud: &PointCloud<T>, bbox: &Box3D<T>) -> PointCloud<T> {
    PointCloud {
        positions: cloud.positions.iter().map(|&p| bbox.to_global(p)).collect(),
        features: cloud.features.clone(),
        channels: cloud.channels,
    }
}

/// Indices of points inside the box, faces included.
pub fn points_in_box<T: Real>(cloud: &PointCloud<T>, bbox: &Box3D<T>) -> Vec<usize> {
    points_in_box_among(cloud.positions(), bbox, 0..cloud.len())
}

/// [`points_in_box`] restricted to a candidate subset.
pub fn points_in_box_among<T: Real>(
    positions: &[[T; 3]],
    bbox: &Box3D<T>,
    candidates: impl IntoIterator<Item = usize>,
) -> Vec<usize> {
    candidates
        .into_iter()
        .filter(|&i| bbox.contains(positions[i]))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth<T> {
    pub bbox: Box3D<T>,
    pub class_id: u32,
}

/// A cloud with its labels. The sensor sits at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScene<T> {
    pub cloud: PointCloud<T>,
    pub ground_truths: Vec<GroundTruth<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection<T> {
    pub bbox: Box3D<T>,
    pub score: T,
    pub class_id: u32,
}

impl<T: Real> Detection<T> {
    pub fn new(bbox: Box3D<T>, score: T, class_id: u32) -> Result<Self> {
        if !(score >= T::zero() && score <= T::one()) {
            return Err(Error::InvalidInput(format!("score {score} outside [0, 1]")));
        }
        Ok(Self {
            bbox,
            score,
            class_id,
        })
    }
}
