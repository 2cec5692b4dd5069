//! Deterministic stand-in for a learned sparse 3D backbone.
//!
//! Stride-1 voxels carry `[mean point features, mean offset from voxel
//! center (3), ln(1 + count)]`. Each coarser stride merges its 2x2x2
//! children: plain mean of the child feature vectors, summed counts, and
//! the last channel recomputed as `ln(1 + count)`. The BEV map takes the
//! per-column channelwise max of the stride-8 grid.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PointCloud;
use crate::scalar::Real;

pub const STRIDES: [u32; 4] = [1, 2, 4, 8];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub voxel_size: [f64; 3],
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            voxel_size: [0.05, 0.05, 0.1],
            bounds_min: [0.0, -40.0, -3.0],
            bounds_max: [70.4, 40.0, 1.0],
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.voxel_size[a] > 0.0) || !(self.bounds_max[a] > self.bounds_min[a]) {
                return Err(Error::Config(format!(
                    "encoder axis {a}: need voxel size > 0 and max > min"
                )));
            }
        }
        Ok(())
    }

    /// Channel count of voxel features for `point_channels` input channels.
    pub fn voxel_channels(point_channels: usize) -> usize {
        point_channels + 4
    }
}

/// Feature producers a pooling level can bind to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    /// Raw points at farthest-point-sampled keypoints.
    Points,
    Voxel1,
    Voxel2,
    Voxel4,
    Voxel8,
    Bev,
}

impl FeatureSource {
    pub fn stride(self) -> Option<u32> {
        match self {
            FeatureSource::Voxel1 => Some(1),
            FeatureSource::Voxel2 => Some(2),
            FeatureSource::Voxel4 => Some(4),
            FeatureSource::Voxel8 => Some(8),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureSource::Points => "points",
            FeatureSource::Voxel1 => "voxel1",
            FeatureSource::Voxel2 => "voxel2",
            FeatureSource::Voxel4 => "voxel4",
            FeatureSource::Voxel8 => "voxel8",
            FeatureSource::Bev => "bev",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Voxel<T> {
    pub features: Vec<T>,
    pub count: usize,
}

/// Occupied voxels of one stride, keyed by integer coordinates relative to
/// the bounds minimum.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVoxelGrid<T> {
    stride: u32,
    voxel_size: [T; 3],
    origin: [T; 3],
    dims: [i64; 3],
    channels: usize,
    voxels: BTreeMap<[i64; 3], Voxel<T>>,
}

impl<T: Real> SparseVoxelGrid<T> {
    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    /// Voxel pitch at this stride.
    pub fn pitch(&self) -> [T; 3] {
        let s = T::from_u32(self.stride).unwrap();
        self.voxel_size.map(|v| v * s)
    }

    /// Voxel count along each axis at this stride.
    pub fn dims(&self) -> [i64; 3] {
        self.dims
    }

    pub fn center(&self, coord: [i64; 3]) -> [T; 3] {
        let p = self.pitch();
        [0, 1, 2].map(|a| self.origin[a] + (T::from_i64(coord[a]).unwrap() + T::half()) * p[a])
    }

    pub fn get(&self, coord: &[i64; 3]) -> Option<&Voxel<T>> {
        self.voxels.get(coord)
    }

    /// Feature at `coord`, zeros when unoccupied.
    pub fn feature_or_zero(&self, coord: &[i64; 3]) -> Vec<T> {
        self.voxels
            .get(coord)
            .map_or_else(|| vec![T::zero(); self.channels], |v| v.features.clone())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[i64; 3], &Voxel<T>)> {
        self.voxels.iter()
    }

    pub fn total_count(&self) -> usize {
        self.voxels.values().map(|v| v.count).sum()
    }

    /// Voxel centers and a flat feature buffer, in coordinate order.
    pub fn centers_and_features(&self) -> (Vec<[T; 3]>, Vec<T>) {
        let mut centers = Vec::with_capacity(self.voxels.len());
        let mut feats = Vec::with_capacity(self.voxels.len() * self.channels);
        for (c, v) in &self.voxels {
            centers.push(self.center(*c));
            feats.extend_from_slice(&v.features);
        }
        (centers, feats)
    }

    fn coarsen(&self) -> Self {
        let mut groups: BTreeMap<[i64; 3], (Vec<T>, usize, usize)> = BTreeMap::new();
        for (c, v) in &self.voxels {
            let key = c.map(|x| x.div_euclid(2));
            let e = groups
                .entry(key)
                .or_insert_with(|| (vec![T::zero(); self.channels], 0, 0));
            for (a, &b) in e.0.iter_mut().zip(&v.features) {
                *a += b;
            }
            e.1 += v.count;
            e.2 += 1;
        }
        let last = self.channels - 1;
        let voxels = groups
            .into_iter()
            .map(|(k, (mut sum, count, children))| {
                let n = T::from_usize_lossy(children);
                for v in sum.iter_mut() {
                    *v /= n;
                }
                sum[last] = T::from_usize_lossy(count).ln_1p();
                (k, Voxel { features: sum, count })
            })
            .collect();
        Self {
            stride: self.stride * 2,
            voxel_size: self.voxel_size,
            origin: self.origin,
            dims: self.dims.map(|d| (d + 1).div_euclid(2)),
            channels: self.channels,
            voxels,
        }
    }
}

/// Dense top-down feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct BevMap<T> {
    nx: usize,
    ny: usize,
    channels: usize,
    cell: [T; 2],
    origin: [T; 2],
    data: Vec<T>,
}

impl<T: Real> BevMap<T> {
    pub fn new(nx: usize, ny: usize, channels: usize, cell: [T; 2], origin: [T; 2], data: Vec<T>) -> Result<Self> {
        if data.len() != nx * ny * channels {
            return Err(Error::DimensionMismatch {
                context: "bev map data".into(),
                expected: nx * ny * channels,
                got: data.len(),
            });
        }
        Ok(Self {
            nx,
            ny,
            channels,
            cell,
            origin,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.nx, self.ny, self.channels)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cell_size(&self) -> [T; 2] {
        self.cell
    }

    pub fn cell(&self, i: usize, j: usize) -> &[T] {
        let o = (i * self.ny + j) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn cell_center(&self, i: usize, j: usize) -> [T; 2] {
        [
            self.origin[0] + (T::from_usize_lossy(i) + T::half()) * self.cell[0],
            self.origin[1] + (T::from_usize_lossy(j) + T::half()) * self.cell[1],
        ]
    }

    /// Bilinear interpolation between cell centers. Outside the map the
    /// result is zero; corners beyond the edge contribute zero.
    pub fn sample(&self, xy: [T; 2]) -> Vec<T> {
        let mut out = vec![T::zero(); self.channels];
        let ext = [
            self.origin[0] + T::from_usize_lossy(self.nx) * self.cell[0],
            self.origin[1] + T::from_usize_lossy(self.ny) * self.cell[1],
        ];
        if !(xy[0] >= self.origin[0] && xy[0] <= ext[0] && xy[1] >= self.origin[1] && xy[1] <= ext[1]) {
            return out;
        }
        let u = (xy[0] - self.origin[0]) / self.cell[0] - T::half();
        let v = (xy[1] - self.origin[1]) / self.cell[1] - T::half();
        let (i0, j0) = (u.floor(), v.floor());
        let (fx, fy) = (u - i0, v - j0);
        let (i0, j0) = (i0.to_i64().unwrap(), j0.to_i64().unwrap());
        for (di, wx) in [(0, T::one() - fx), (1, fx)] {
            for (dj, wy) in [(0, T::one() - fy), (1, fy)] {
                let (i, j) = (i0 + di, j0 + dj);
                let w = wx * wy;
                if w == T::zero() || i < 0 || j < 0 || i >= self.nx as i64 || j >= self.ny as i64 {
                    continue;
                }
                for (o, &c) in out.iter_mut().zip(self.cell(i as usize, j as usize)) {
                    *o += w * c;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<T> {
    /// Strides 1, 2, 4, 8 in order.
    pub grids: Vec<SparseVoxelGrid<T>>,
    pub bev: BevMap<T>,
}

impl<T: Real> FeaturePyramid<T> {
    pub fn grid(&self, stride: u32) -> Option<&SparseVoxelGrid<T>> {
        self.grids.iter().find(|g| g.stride == stride)
    }

    pub fn voxel_channels(&self) -> usize {
        self.grids[0].channels
    }

    /// Sources this pyramid can feed into pooling.
    pub fn sources(&self) -> Vec<FeatureSource> {
        vec![
            FeatureSource::Points,
            FeatureSource::Voxel1,
            FeatureSource::Voxel2,
            FeatureSource::Voxel4,
            FeatureSource::Voxel8,
            FeatureSource::Bev,
        ]
    }
}

/// Voxelizes the cloud and builds the four strides plus the BEV map.
/// Points outside `[bounds_min, bounds_max)` are dropped.
pub fn encode_pyramid<T: Real>(cloud: &PointCloud<T>, cfg: &EncoderConfig) -> Result<FeaturePyramid<T>> {
    cfg.validate()?;
    let vs = cfg.voxel_size.map(T::lit);
    let lo = cfg.bounds_min.map(T::lit);
    let hi = cfg.bounds_max.map(T::lit);
    let cpt = cloud.channels();
    let channels = EncoderConfig::voxel_channels(cpt);
    let dims = [0, 1, 2].map(|a| ((hi[a] - lo[a]) / vs[a]).ceil().to_i64().unwrap());

    let mut acc: BTreeMap<[i64; 3], (Vec<T>, usize)> = BTreeMap::new();
    for (i, &p) in cloud.positions().iter().enumerate() {
        if (0..3).any(|a| p[a] < lo[a] || p[a] >= hi[a]) {
            continue;
        }
        let c = [0, 1, 2].map(|a| ((p[a] - lo[a]) / vs[a]).floor().to_i64().unwrap());
        if (0..3).any(|a| c[a] >= dims[a]) {
            continue;
        }
        let e = acc
            .entry(c)
            .or_insert_with(|| (vec![T::zero(); cpt + 3], 0));
        for (a, &f) in e.0.iter_mut().zip(cloud.feature(i)) {
            *a += f;
        }
        for a in 0..3 {
            let center = lo[a] + (T::from_i64(c[a]).unwrap() + T::half()) * vs[a];
            e.0[cpt + a] += p[a] - center;
        }
        e.1 += 1;
    }
    let voxels = acc
        .into_iter()
        .map(|(k, (sum, count))| {
            let n = T::from_usize_lossy(count);
            let mut features: Vec<T> = sum.into_iter().map(|v| v / n).collect();
            features.push(n.ln_1p());
            (k, Voxel { features, count })
        })
        .collect();
    let base = SparseVoxelGrid {
        stride: 1,
        voxel_size: vs,
        origin: lo,
        dims,
        channels,
        voxels,
    };
    let mut grids = vec![base];
    for _ in 1..STRIDES.len() {
        let next = grids.last().unwrap().coarsen();
        grids.push(next);
    }
    let bev = flatten_bev(grids.last().unwrap());
    Ok(FeaturePyramid { grids, bev })
}

fn flatten_bev<T: Real>(g: &SparseVoxelGrid<T>) -> BevMap<T> {
    let [nx, ny, _] = g.dims.map(|d| d.max(0) as usize);
    let c = g.channels;
    let mut data = vec![T::zero(); nx * ny * c];
    let mut seen = vec![false; nx * ny];
    for (k, v) in &g.voxels {
        let (i, j) = (k[0] as usize, k[1] as usize);
        let cell = i * ny + j;
        let slot = &mut data[cell * c..(cell + 1) * c];
        if seen[cell] {
            for (a, &b) in slot.iter_mut().zip(&v.features) {
                *a = a.max(b);
            }
        } else {
            slot.copy_from_slice(&v.features);
            seen[cell] = true;
        }
    }
    let pitch = g.pitch();
    BevMap {
        nx,
        ny,
        channels: c,
        cell: [pitch[0], pitch[1]],
        origin: [g.origin[0], g.origin[1]],
        data,
    }
}

/// Samples the pyramid's BEV map at a planar location.
pub fn bev_feature<T: Real>(pyramid: &FeaturePyramid<T>, xy: [T; 2]) -> Vec<T> {
    pyramid.bev.sample(xy)
}
