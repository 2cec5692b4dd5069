//! End-to-end orchestration: configuration, file formats, surrogate
//! proposals, the refinement pass and toy training.

pub mod checks;
pub mod config;
pub mod experiments;
pub mod kitti;
pub mod proposals;
pub mod train;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::encoder::{encode_pyramid, FeaturePyramid};
use crate::error::{Error, Result};
use crate::fuse::{fuse_infer, FusionGraph, FusionInput, FusionParams};
use crate::geometry::{iou_bev, squared_distance};
use crate::heads::{heads_forward, HeadParams};
use crate::model::{points_in_box, points_in_box_among, Box3D, Detection, PointCloud};
use crate::nn::{read_layers, write_layers, Layer, Matrix, Parameters};
use crate::pool::{pool_roi, PoolSources};

pub use config::RunConfig;
pub use proposals::{generate_proposals, Proposal, ProposalConfig};
pub use train::{train_toy, TrainReport};

/// Trainable state of the second stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub graph: FusionGraph,
    pub fuse: FusionParams<f64>,
    pub heads: HeadParams<f64>,
}

impl Model {
    pub fn init(cfg: &RunConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let graph = FusionGraph::new(cfg.fusion.clone(), cfg.level_input_channels())?;
        let fuse = FusionParams::init(&graph, seed);
        let heads = HeadParams::init(graph.output_dim(), &cfg.heads, seed.wrapping_add(1000))?;
        Ok(Self { graph, fuse, heads })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            graph: self.graph.clone(),
            fuse: self.fuse.zeros_like(),
            heads: self.heads.zeros_like(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_layers(BufWriter::new(File::create(path)?), &self.layers())
    }

    /// Reads weights saved by [`save`](Self::save) into the structure that
    /// `cfg` describes.
    pub fn load(path: &Path, cfg: &RunConfig) -> Result<Self> {
        let mut model = Self::init(cfg, 0)?;
        let layers: Vec<Layer<f64>> = read_layers(BufReader::new(File::open(path)?))?;
        let slots = model.layers_mut();
        if slots.len() != layers.len() {
            return Err(Error::Format(format!(
                "{}: {} layers stored, configuration expects {}",
                path.display(),
                layers.len(),
                slots.len()
            )));
        }
        for (i, (slot, layer)) in slots.into_iter().zip(layers).enumerate() {
            if slot.weight.rows() != layer.weight.rows()
                || slot.weight.cols() != layer.weight.cols()
                || slot.activation != layer.activation
            {
                return Err(Error::Format(format!(
                    "{}: layer {i} has shape {}x{}, configuration expects {}x{}",
                    path.display(),
                    layer.weight.rows(),
                    layer.weight.cols(),
                    slot.weight.rows(),
                    slot.weight.cols()
                )));
            }
            *slot = layer;
        }
        Ok(model)
    }
}

impl Parameters<f64> for Model {
    fn layers(&self) -> Vec<&Layer<f64>> {
        let mut v = self.fuse.layers();
        v.extend(self.heads.layers());
        v
    }

    fn layers_mut(&mut self) -> Vec<&mut Layer<f64>> {
        let mut v = self.fuse.layers_mut();
        v.extend(self.heads.layers_mut());
        v
    }
}

/// Per-scene features shared by every proposal.
#[derive(Debug, Clone)]
pub struct SceneContext {
    pub cloud: PointCloud<f64>,
    pub pyramid: FeaturePyramid<f64>,
    pub sources: PoolSources<f64>,
}

impl SceneContext {
    pub fn build(cloud: &PointCloud<f64>, cfg: &RunConfig) -> Result<Self> {
        if cloud.channels() != cfg.point_channels {
            return Err(Error::ChannelMismatch {
                source_name: "point cloud".into(),
                declared: cfg.point_channels,
                actual: cloud.channels(),
            });
        }
        let pyramid = encode_pyramid(cloud, &cfg.encoder)?;
        let sources = PoolSources::build(&pyramid, cloud, &cfg.pool)?;
        Ok(Self {
            cloud: cloud.clone(),
            pyramid,
            sources,
        })
    }
}

/// Pooled blocks for one proposal plus the nearby points used to count
/// box contents cheaply.
#[derive(Debug, Clone)]
pub struct RoiInput {
    pub fusion: FusionInput<f64>,
    center: [f64; 3],
    radius: f64,
    candidates: Vec<usize>,
}

impl RoiInput {
    /// Points of `cloud` inside `b`. Uses the candidate list when `b` lies
    /// within the candidate sphere, the whole cloud otherwise.
    pub fn count_in(&self, cloud: &PointCloud<f64>, b: &Box3D<f64>) -> usize {
        let reach = squared_distance(self.center, b.center()).sqrt() + b.bounding_radius();
        if reach <= self.radius {
            points_in_box_among(cloud.positions(), b, self.candidates.iter().copied()).len()
        } else {
            points_in_box(cloud, b).len()
        }
    }
}

/// Pools every level for `roi` and appends normalized box-frame positions
/// when the config asks for them.
pub fn prepare_roi(ctx: &SceneContext, roi: &Box3D<f64>, cfg: &RunConfig) -> Result<RoiInput> {
    let pooled = pool_roi(&ctx.sources, roi, &cfg.pool)?;
    let half = roi.size().map(|s| s * cfg.pool.context / 2.0);
    let mut levels = Vec::with_capacity(pooled.pooled.len());
    for (p, g) in pooled.pooled.iter().zip(&pooled.grids) {
        if cfg.position_encoding {
            let pos: Vec<f64> = g.canonical.iter().flat_map(|q| [q[0] / half[0], q[1] / half[1], q[2] / half[2]]).collect();
            let pos = Matrix::from_vec(g.canonical.len(), 3, pos)?;
            levels.push(Matrix::hconcat(&[&p.features, &pos])?);
        } else {
            levels.push(p.features.clone());
        }
    }
    let points: Vec<Vec<[f64; 3]>> = pooled.grids.into_iter().map(|g| g.canonical).collect();
    let center = roi.center();
    let radius = roi.bounding_radius() + cfg.count_margin;
    let r2 = radius * radius;
    let candidates = (0..ctx.cloud.len())
        .filter(|&i| squared_distance(ctx.cloud.positions()[i], center) <= r2)
        .collect();
    Ok(RoiInput {
        fusion: FusionInput::new(levels, &points)?,
        center,
        radius,
        candidates,
    })
}

fn with_index<T>(i: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Proposal {
        index: i,
        source: Box::new(e),
    })
}

pub fn prepare_rois(ctx: &SceneContext, proposals: &[Proposal], cfg: &RunConfig) -> Result<Vec<RoiInput>> {
    proposals
        .iter()
        .enumerate()
        .map(|(i, p)| with_index(i, prepare_roi(ctx, &p.bbox, cfg)))
        .collect()
}

/// Refines each proposal into a detection (same order, same class). NMS
/// runs only when `cfg.eval.nms_threshold` is set.
pub fn run_pipeline(cloud: &PointCloud<f64>, proposals: &[Proposal], cfg: &RunConfig, model: &Model) -> Result<Vec<Detection<f64>>> {
    cfg.validate()?;
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    let ctx = SceneContext::build(cloud, cfg)?;
    let rois = prepare_rois(&ctx, proposals, cfg)?;
    let dets = refine(&ctx.cloud, proposals, &rois, model)?;
    Ok(match cfg.eval.nms_threshold {
        Some(t) => nms_bev(dets, t),
        None => dets,
    })
}

/// Fusion plus heads over prepared RoIs.
pub fn refine(cloud: &PointCloud<f64>, proposals: &[Proposal], rois: &[RoiInput], model: &Model) -> Result<Vec<Detection<f64>>> {
    let mut fused = Vec::with_capacity(rois.len() * model.graph.output_dim());
    for (i, r) in rois.iter().enumerate() {
        fused.extend(with_index(i, fuse_infer(&model.graph, &model.fuse, &r.fusion))?.fused);
    }
    let fused = Matrix::from_vec(rois.len(), model.graph.output_dim(), fused)?;
    let boxes: Vec<Box3D<f64>> = proposals.iter().map(|p| p.bbox).collect();
    let (out, _) = heads_forward(&model.heads, &fused, &boxes, |i, b| rois[i].count_in(cloud, b))?;
    out.boxes
        .into_iter()
        .zip(out.scores)
        .zip(proposals)
        .enumerate()
        .map(|(i, ((b, s), p))| with_index(i, Detection::new(b, s, p.class_id)))
        .collect()
}

/// Greedy suppression by descending score with BEV IoU above `threshold`,
/// within each class.
pub fn nms_bev(dets: Vec<Detection<f64>>, threshold: f64) -> Vec<Detection<f64>> {
    let order = crate::eval::score_order(&dets);
    let mut kept: Vec<Detection<f64>> = Vec::new();
    for i in order {
        let d = &dets[i];
        if kept.iter().all(|k| k.class_id != d.class_id || iou_bev(&k.bbox, &d.bbox) <= threshold) {
            kept.push(d.clone());
        }
    }
    kept
}
