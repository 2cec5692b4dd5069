use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, FeatureSource};
use crate::error::{Error, Result};
use crate::eval::BucketScheme;
use crate::fuse::{ConnectionMode, FusionConfig};
use crate::heads::{HeadConfig, LossConfig};
use crate::model::SceneSpec;
use crate::pool::{Aggregator, GridPyramidSpec, LevelSpec};

use super::kitti::Calibration;
use super::proposals::ProposalConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub scheme: BucketScheme,
    pub iou_threshold: f64,
    /// BEV-IoU threshold for optional non-maximum suppression of refined
    /// boxes; absent means no suppression.
    pub nms_threshold: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            scheme: BucketScheme::Range,
            iou_threshold: 0.7,
            nms_threshold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Step size multiplier after an accepted step; rejected steps halve it.
    pub lr_growth: f64,
    pub scenes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 0.05,
            lr_growth: 1.0,
            scenes: 20,
        }
    }
}

/// Everything a run needs. Loaded from TOML; every section is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Per-point feature channels the clouds carry (intensity only: 1).
    pub point_channels: usize,
    /// Appends each grid point's normalized box-frame coordinates to its
    /// pooled features.
    pub position_encoding: bool,
    /// Points within this margin (meters) of a proposal's bounding sphere
    /// are the candidates for point counting during training.
    pub count_margin: f64,
    pub encoder: EncoderConfig,
    pub pool: GridPyramidSpec,
    pub fusion: FusionConfig,
    pub heads: HeadConfig,
    pub loss: LossConfig,
    pub proposals: ProposalConfig,
    pub scene: SceneSpec,
    pub eval: EvalConfig,
    pub train: TrainConfig,
    pub calibration: Calibration,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            point_channels: 1,
            position_encoding: true,
            count_margin: 2.0,
            encoder: EncoderConfig::default(),
            pool: GridPyramidSpec::default(),
            fusion: FusionConfig::default(),
            heads: HeadConfig::default(),
            loss: LossConfig::default(),
            proposals: ProposalConfig::default(),
            scene: SceneSpec::default(),
            eval: EvalConfig::default(),
            train: TrainConfig::default(),
            calibration: Calibration::Identity,
        }
    }
}

impl RunConfig {
    /// Small configuration that trains in seconds on one core: coarse
    /// voxels, ball-max pooling, 4x3 fusion graph of width 8, narrow heads,
    /// sparse scenes, tighter proposal jitter.
    pub fn toy() -> Self {
        let level = |counts, source, radius| LevelSpec {
            counts,
            source,
            aggregator: Aggregator::BallMax { radius, max_count: 16 },
        };
        Self {
            encoder: EncoderConfig {
                voxel_size: [0.1, 0.1, 0.2],
                ..EncoderConfig::default()
            },
            pool: GridPyramidSpec {
                levels: vec![
                    level([4, 4, 4], FeatureSource::Voxel2, 0.6),
                    level([3, 3, 3], FeatureSource::Voxel4, 0.9),
                    level([2, 2, 2], FeatureSource::Voxel8, 1.4),
                    LevelSpec {
                        counts: [2, 2, 2],
                        source: FeatureSource::Bev,
                        aggregator: Aggregator::Knn { k: 3 },
                    },
                ],
                context: 1.0,
                keypoints: 512,
            },
            fusion: FusionConfig {
                levels: 4,
                depth: 3,
                mode: ConnectionMode::Log2n,
                internal_channels: 8,
                output_channels: 8,
            },
            heads: HeadConfig {
                shared_widths: vec![32],
                hidden_width: 16,
                use_density: true,
                density_scale: 0.01,
            },
            scene: SceneSpec {
                object_count: [3, 5],
                ground_points: 1500,
                clutter_clusters: 4,
                ..SceneSpec::default()
            },
            proposals: ProposalConfig {
                sigma_center: 0.12,
                sigma_size: 0.05,
                sigma_yaw: 0.05,
                fp_rate: 1.0,
            },
            eval: EvalConfig {
                iou_threshold: 0.5,
                ..EvalConfig::default()
            },
            train: TrainConfig {
                steps: 500,
                lr: 0.05,
                lr_growth: 1.05,
                scenes: 20,
            },
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Input channels each fusion level receives.
    pub fn level_input_channels(&self) -> Vec<usize> {
        let extra = if self.position_encoding { 3 } else { 0 };
        self.pool
            .levels
            .iter()
            .map(|l| {
                let base = match l.source {
                    FeatureSource::Points => self.point_channels,
                    _ => EncoderConfig::voxel_channels(self.point_channels),
                };
                base + extra
            })
            .collect()
    }

    /// Checks every section and that the sections chain together.
    pub fn validate(&self) -> Result<()> {
        if self.point_channels == 0 {
            return Err(Error::Config("point_channels must be >= 1".into()));
        }
        if !(self.count_margin >= 0.0) {
            return Err(Error::Config("count_margin must be >= 0".into()));
        }
        self.encoder.validate()?;
        self.pool.validate()?;
        self.fusion.validate()?;
        if self.fusion.levels != self.pool.num_levels() {
            return Err(Error::Config(format!(
                "fusion has {} levels but the grid pyramid binds {}",
                self.fusion.levels,
                self.pool.num_levels()
            )));
        }
        self.heads.validate()?;
        self.loss.validate()?;
        self.proposals.validate()?;
        self.scene.validate()?;
        let e = &self.eval;
        if !(e.iou_threshold > 0.0 && e.iou_threshold <= 1.0) {
            return Err(Error::Config(format!("eval iou_threshold must lie in (0, 1], got {}", e.iou_threshold)));
        }
        if let Some(t) = e.nms_threshold {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::Config(format!("nms_threshold must lie in (0, 1], got {t}")));
            }
        }
        let t = &self.train;
        if !(t.lr >= 0.0 && t.lr.is_finite()) || !(t.lr_growth >= 1.0) {
            return Err(Error::Config("train lr must be >= 0 and lr_growth >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_toml() {
        for cfg in [RunConfig::default(), RunConfig::toy()] {
            cfg.validate().unwrap();
            assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        }
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = RunConfig::from_toml("seed = 4\n[fusion]\ndepth = 3\n").unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.fusion.depth, 3);
        assert_eq!(cfg.fusion.internal_channels, 256);
        assert_eq!(cfg.level_input_channels(), vec![8, 8, 8, 8]);
    }

    #[test]
    fn rejects_inconsistent_levels_and_unknown_keys() {
        assert!(RunConfig::from_toml("[fusion]\nlevels = 3\n").is_err());
        assert!(RunConfig::from_toml("bogus = 1\n").is_err());
        assert!(RunConfig::from_toml("[fusion]\nmode = \"ring\"\n").is_err());
    }
}
