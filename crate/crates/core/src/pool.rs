//! Grid-point pyramid pooling.
//!
//! Every RoI gets `L` levels of grid points placed at the cell centers of a
//! uniform partition of the (context-expanded) box. Each level reads exactly
//! one feature source: a voxel stride, the BEV map, or raw-point keypoints.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoder::{FeaturePyramid, FeatureSource};
use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, NeighborMode, SpatialHashGrid};
use crate::model::{Box3D, PointCloud};
use crate::nn::{Layer, Matrix};
use crate::scalar::Real;

/// Distance offset in inverse-distance weights.
pub const IDW_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Aggregator {
    /// Inverse-distance interpolation over the `k` nearest keys.
    Knn { k: usize },
    /// Channelwise max over keys within `radius`, nearest `max_count` kept.
    BallMax { radius: f64, max_count: usize },
}

impl Aggregator {
    pub fn mode<T: Real>(&self) -> NeighborMode<T> {
        match *self {
            Aggregator::Knn { k } => NeighborMode::Knn { k },
            Aggregator::BallMax { radius, max_count } => NeighborMode::Ball {
                radius: T::lit(radius),
                max_count,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelSpec {
    pub counts: [usize; 3],
    pub source: FeatureSource,
    pub aggregator: Aggregator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridPyramidSpec {
    /// Finest level first.
    pub levels: Vec<LevelSpec>,
    /// Box extents are multiplied by this factor before placing grids.
    pub context: f64,
    /// Keypoints drawn by FPS for the raw-point source, per scene.
    pub keypoints: usize,
}

impl Default for GridPyramidSpec {
    fn default() -> Self {
        Self::voxel_preset()
    }
}

const PRESET_COUNTS: [[usize; 3]; 4] = [[6, 6, 6], [4, 4, 4], [2, 2, 2], [2, 2, 2]];

impl GridPyramidSpec {
    fn preset(sources: [FeatureSource; 4]) -> Self {
        Self {
            levels: PRESET_COUNTS
                .iter()
                .zip(sources)
                .map(|(&counts, source)| LevelSpec {
                    counts,
                    source,
                    aggregator: Aggregator::Knn { k: 3 },
                })
                .collect(),
            context: 1.0,
            keypoints: 2048,
        }
    }

    /// Voxel-based binding: strides 2, 4, 8 and BEV.
    pub fn voxel_preset() -> Self {
        Self::preset([
            FeatureSource::Voxel2,
            FeatureSource::Voxel4,
            FeatureSource::Voxel8,
            FeatureSource::Bev,
        ])
    }

    /// Point-voxel binding: raw points, strides 4, 8 and BEV.
    pub fn point_voxel_preset() -> Self {
        Self::preset([
            FeatureSource::Points,
            FeatureSource::Voxel4,
            FeatureSource::Voxel8,
            FeatureSource::Bev,
        ])
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.counts.iter().product()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Config("grid pyramid needs at least one level".into()));
        }
        if !(self.context >= 1.0) {
            return Err(Error::Config(format!("context factor must be >= 1, got {}", self.context)));
        }
        let mut seen = Vec::new();
        for (i, l) in self.levels.iter().enumerate() {
            if l.counts.contains(&0) {
                return Err(Error::Config(format!("level {i}: grid counts must be >= 1")));
            }
            if seen.contains(&l.source) {
                return Err(Error::Config(format!(
                    "level {i}: source {} already bound to another level",
                    l.source.name()
                )));
            }
            seen.push(l.source);
            l.aggregator
                .mode::<f64>()
                .validate()
                .map_err(|e| Error::Config(format!("level {i}: {e}")))?;
        }
        if seen.contains(&FeatureSource::Points) && self.keypoints == 0 {
            return Err(Error::Config("raw-point source needs keypoints >= 1".into()));
        }
        Ok(())
    }
}

/// Grid points of one level in box-canonical and global coordinates,
/// ordered x-major, then y, then z.
#[derive(Debug, Clone, PartialEq)]
pub struct GridLevel<T> {
    pub canonical: Vec<[T; 3]>,
    pub global: Vec<[T; 3]>,
}

pub fn grid_points<T: Real>(roi: &Box3D<T>, counts: [usize; 3], context: T) -> GridLevel<T> {
    let ext = roi.size().map(|s| s * context);
    let n = counts.iter().product();
    let mut canonical = Vec::with_capacity(n);
    let coord = |a: usize, i: usize| {
        let step = ext[a] / T::from_usize_lossy(counts[a]);
        -ext[a] * T::half() + (T::from_usize_lossy(i) + T::half()) * step
    };
    for i in 0..counts[0] {
        for j in 0..counts[1] {
            for k in 0..counts[2] {
                canonical.push([coord(0, i), coord(1, j), coord(2, k)]);
            }
        }
    }
    let global = canonical.iter().map(|&q| roi.to_global(q)).collect();
    GridLevel { canonical, global }
}

pub fn build_grid_pyramid<T: Real>(roi: &Box3D<T>, spec: &GridPyramidSpec) -> Vec<GridLevel<T>> {
    let rho = T::lit(spec.context);
    spec.levels
        .iter()
        .map(|l| grid_points(roi, l.counts, rho))
        .collect()
}

/// Positions and features that a pooling level reads, indexed by a hash
/// grid sized for one neighbor mode.
#[derive(Debug, Clone)]
pub struct KeySet<T> {
    grid: SpatialHashGrid<T>,
    features: Vec<T>,
    channels: usize,
    mode: NeighborMode<T>,
}

impl<T: Real> KeySet<T> {
    pub fn new(positions: Vec<[T; 3]>, features: Vec<T>, channels: usize, mode: NeighborMode<T>) -> Result<Self> {
        if features.len() != positions.len() * channels {
            let actual = if positions.is_empty() {
                features.len()
            } else {
                features.len() / positions.len()
            };
            return Err(Error::ChannelMismatch {
                source_name: "key set".into(),
                declared: channels,
                actual,
            });
        }
        mode.validate()?;
        Ok(Self {
            grid: SpatialHashGrid::for_mode(positions, mode)?,
            features,
            channels,
            mode,
        })
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn positions(&self) -> &[[T; 3]] {
        self.grid.points()
    }

    pub fn feature(&self, i: usize) -> &[T] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    pub fn mode(&self) -> NeighborMode<T> {
        self.mode
    }

    pub fn neighbors(&self, q: [T; 3]) -> Vec<(usize, T)> {
        self.grid.query(q, self.mode)
    }
}

/// Normalized inverse-distance weights `(1/(d+eps)) / sum`. When some
/// distances are exactly zero the weight is split evenly among those.
pub fn idw_weights<T: Real>(dists: &[T]) -> Vec<T> {
    let zeros = dists.iter().filter(|&&d| d == T::zero()).count();
    if zeros > 0 {
        let w = T::one() / T::from_usize_lossy(zeros);
        return dists
            .iter()
            .map(|&d| if d == T::zero() { w } else { T::zero() })
            .collect();
    }
    let eps = T::lit(IDW_EPS);
    let raw: Vec<T> = dists.iter().map(|&d| T::one() / (d + eps)).collect();
    let total: T = raw.iter().copied().sum();
    raw.into_iter().map(|r| r / total).collect()
}

/// Pooled block of one level plus the per-point empty-neighborhood flag.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledLevel<T> {
    pub features: Matrix<T>,
    pub empty: Vec<bool>,
}

/// A resolved feature source.
#[derive(Debug, Clone)]
pub enum SourceData<T> {
    Keys(KeySet<T>),
    Bev(crate::encoder::BevMap<T>),
}

impl<T: Real> SourceData<T> {
    pub fn channels(&self) -> usize {
        match self {
            SourceData::Keys(k) => k.channels(),
            SourceData::Bev(b) => b.channels(),
        }
    }
}

/// Aggregates one source onto a set of grid points.
pub fn pool_level<T: Real>(source: &SourceData<T>, grid: &[[T; 3]], agg: &Aggregator) -> Result<PooledLevel<T>> {
    let c = source.channels();
    let mut features = Matrix::zeros(grid.len(), c);
    let mut empty = vec![false; grid.len()];
    match source {
        SourceData::Bev(bev) => {
            for (r, p) in grid.iter().enumerate() {
                features.row_mut(r).copy_from_slice(&bev.sample([p[0], p[1]]));
            }
        }
        SourceData::Keys(keys) => {
            if keys.mode() != agg.mode() {
                return Err(Error::InvalidInput(
                    "key set was indexed for a different aggregator".into(),
                ));
            }
            for (r, &p) in grid.iter().enumerate() {
                let nb = keys.neighbors(p);
                if nb.is_empty() {
                    empty[r] = true;
                    continue;
                }
                let row = features.row_mut(r);
                match agg {
                    Aggregator::Knn { .. } => {
                        let d: Vec<T> = nb.iter().map(|x| x.1).collect();
                        for ((i, _), w) in nb.iter().zip(idw_weights(&d)) {
                            for (o, &f) in row.iter_mut().zip(keys.feature(*i)) {
                                *o += w * f;
                            }
                        }
                    }
                    Aggregator::BallMax { .. } => {
                        row.copy_from_slice(keys.feature(nb[0].0));
                        for (i, _) in &nb[1..] {
                            for (o, &f) in row.iter_mut().zip(keys.feature(*i)) {
                                *o = o.max(f);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(PooledLevel { features, empty })
}

/// Resolves every source a spec binds, once per scene.
#[derive(Debug, Clone)]
pub struct PoolSources<T> {
    sources: BTreeMap<FeatureSource, SourceData<T>>,
}

impl<T: Real> PoolSources<T> {
    pub fn build(pyramid: &FeaturePyramid<T>, cloud: &PointCloud<T>, spec: &GridPyramidSpec) -> Result<Self> {
        spec.validate()?;
        let mut sources = BTreeMap::new();
        for l in &spec.levels {
            let data = resolve(pyramid, cloud, l.source, &l.aggregator, spec.keypoints)?;
            sources.insert(l.source, data);
        }
        Ok(Self { sources })
    }

    pub fn get(&self, s: FeatureSource) -> Option<&SourceData<T>> {
        self.sources.get(&s)
    }

    pub fn insert(&mut self, s: FeatureSource, data: SourceData<T>) {
        self.sources.insert(s, data);
    }
}

/// Builds the key set (or BEV handle) for one source.
pub fn resolve<T: Real>(
    pyramid: &FeaturePyramid<T>,
    cloud: &PointCloud<T>,
    source: FeatureSource,
    agg: &Aggregator,
    keypoints: usize,
) -> Result<SourceData<T>> {
    let mode = agg.mode();
    Ok(match source {
        FeatureSource::Bev => SourceData::Bev(pyramid.bev.clone()),
        FeatureSource::Points => {
            let m = keypoints.min(cloud.len());
            let idx = if m == 0 {
                Vec::new()
            } else {
                farthest_point_sample(cloud.positions(), m)?
            };
            let sel = cloud.select(&idx);
            SourceData::Keys(KeySet::new(
                sel.positions().to_vec(),
                sel.features().to_vec(),
                sel.channels(),
                mode,
            )?)
        }
        _ => {
            let stride = source.stride().expect("voxel source");
            let grid = pyramid
                .grid(stride)
                .ok_or_else(|| Error::InvalidInput(format!("pyramid lacks stride {stride}")))?;
            let (centers, feats) = grid.centers_and_features();
            SourceData::Keys(KeySet::new(centers, feats, grid.channels(), mode)?)
        }
    })
}

/// Pooled levels for one RoI.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPyramid<T> {
    pub grids: Vec<GridLevel<T>>,
    pub pooled: Vec<PooledLevel<T>>,
}

impl<T: Real> GridPyramid<T> {
    pub fn level_sizes(&self) -> Vec<usize> {
        self.grids.iter().map(|g| g.canonical.len()).collect()
    }
}

/// Places the grid pyramid on `roi` and pools each level from its bound
/// source.
pub fn pool_roi<T: Real>(sources: &PoolSources<T>, roi: &Box3D<T>, spec: &GridPyramidSpec) -> Result<GridPyramid<T>> {
    let grids = build_grid_pyramid(roi, spec);
    let pooled = spec
        .levels
        .iter()
        .zip(&grids)
        .map(|(l, g)| {
            let src = sources
                .get(l.source)
                .ok_or_else(|| Error::InvalidInput(format!("source {} not resolved", l.source.name())))?;
            pool_level(src, &g.global, &l.aggregator)
        })
        .collect::<Result<_>>()?;
    Ok(GridPyramid { grids, pooled })
}

/// Single shared grid: pool every source, concatenate channels, apply one
/// shared linear layer. Comparison baseline for per-level pooling.
pub fn baseline_concat_pool<T: Real>(
    sources: &[&SourceData<T>],
    grid: &[[T; 3]],
    agg: &Aggregator,
    linear: &Layer<T>,
) -> Result<Matrix<T>> {
    let pooled = sources
        .iter()
        .map(|s| pool_level(s, grid, agg).map(|p| p.features))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Matrix<T>> = pooled.iter().collect();
    let cat = Matrix::hconcat(&refs)?;
    Ok(linear.forward(&cat)?.1)
}
