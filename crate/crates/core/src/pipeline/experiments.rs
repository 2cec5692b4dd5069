//! The two training experiments: overfitting a small corpus, and the
//! density-channel ablation on far objects.

use crate::eval::{average_precision_r40, match_detections, MatchResult};
use crate::error::Result;
use crate::geometry::iou3d;
use crate::model::{Box3D, LabeledScene};

use super::config::RunConfig;
use super::train::{toy_corpus, train_model, TrainingSet};
use super::{prepare_rois, refine, Model, Proposal, SceneContext};

#[derive(Debug, Clone)]
pub struct OverfitReport {
    pub losses: Vec<f64>,
    pub rejected_steps: usize,
    /// Mean IoU of each jittered ground-truth copy with its source box,
    /// before and after refinement.
    pub proposal_iou: f64,
    pub refined_iou: f64,
    pub model: Model,
}

impl OverfitReport {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("non-empty trajectory")
    }
}

/// Trains on `scenes` generated scenes (seeded from `seed`) and measures
/// refinement on the same scenes.
pub fn overfit(cfg: &RunConfig, scenes: usize, steps: usize, seed: u64) -> Result<OverfitReport> {
    cfg.validate()?;
    let (scenes, props) = toy_corpus(cfg, scenes, seed)?;
    let set = TrainingSet::build(&scenes, &props, cfg)?;
    let report = train_model(Model::init(cfg, seed)?, &set, &cfg.train, steps, &cfg.loss)?;
    let (mut before, mut after, mut n) = (0.0, 0.0, 0usize);
    for (scene, p) in scenes.iter().zip(&props) {
        let dets = refine_scene(scene, p, cfg, &report.model)?;
        // The first proposals are the jittered copies, in label order.
        for (g, (prop, det)) in scene.ground_truths.iter().zip(p.iter().zip(&dets)) {
            before += iou3d(&prop.bbox, &g.bbox);
            after += iou3d(&det.bbox, &g.bbox);
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    Ok(OverfitReport {
        losses: report.losses,
        rejected_steps: report.rejected_steps,
        proposal_iou: before / n,
        refined_iou: after / n,
        model: report.model,
    })
}

fn refine_scene(scene: &LabeledScene<f64>, props: &[Proposal], cfg: &RunConfig, model: &Model) -> Result<Vec<crate::model::Detection<f64>>> {
    let ctx = SceneContext::build(&scene.cloud, cfg)?;
    let rois = prepare_rois(&ctx, props, cfg)?;
    refine(&ctx.cloud, props, &rois, model)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrendRun {
    pub seed: u64,
    pub ap_density: f64,
    pub ap_ablated: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendSettings {
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub steps: usize,
    /// Only objects and detections at or beyond this planar range count.
    pub min_range: f64,
}

impl Default for TrendSettings {
    fn default() -> Self {
        Self {
            train_scenes: 10,
            eval_scenes: 20,
            steps: 150,
            min_range: 30.0,
        }
    }
}

/// AP over the far subset of held-out scenes for a model trained with the
/// density channel and one trained without it. Both share the corpus, the
/// proposals and every initial weight; the density column starts at zero.
pub fn density_trend(cfg: &RunConfig, settings: &TrendSettings, seed: u64) -> Result<TrendRun> {
    let mut aps = [0.0; 2];
    for (slot, use_density) in [true, false].into_iter().enumerate() {
        let mut c = cfg.clone();
        c.heads.use_density = use_density;
        c.validate()?;
        let base = seed.wrapping_mul(1000);
        let (scenes, props) = toy_corpus(&c, settings.train_scenes, base)?;
        let set = TrainingSet::build(&scenes, &props, &c)?;
        let model = train_model(Model::init(&c, seed)?, &set, &c.train, settings.steps, &c.loss)?.model;
        let (held, held_props) = toy_corpus(&c, settings.eval_scenes, base + 500)?;
        let mut parts = Vec::with_capacity(held.len());
        for (scene, p) in held.iter().zip(&held_props) {
            let far = |b: &Box3D<f64>| b.planar_range() >= settings.min_range;
            let dets: Vec<_> = refine_scene(scene, p, &c, &model)?.into_iter().filter(|d| far(&d.bbox)).collect();
            let gts: Vec<_> = scene.ground_truths.iter().map(|g| g.bbox).filter(far).collect();
            parts.push(match_detections(&dets, &gts, c.eval.iou_threshold)?);
        }
        aps[slot] = average_precision_r40(&MatchResult::merge(parts)).unwrap_or(0.0);
    }
    Ok(TrendRun {
        seed,
        ap_density: aps[0],
        ap_ablated: aps[1],
    })
}

/// Corpus used for the ablation: the toy setup with the wider default
/// proposal jitter, so near-miss proposals with points inside compete with
/// true positives.
pub fn trend_config() -> RunConfig {
    RunConfig {
        proposals: Default::default(),
        ..RunConfig::toy()
    }
}
