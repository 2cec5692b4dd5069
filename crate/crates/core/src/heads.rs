//! Box refinement, density-aware confidence and the two-stage losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::iou3d;
use crate::model::{points_in_box, Box3D, GroundTruth, PointCloud};
use crate::nn::{init_params, mlp_backward, mlp_forward, sigmoid, Activation, DenseParams, Layer, Matrix, Parameters, Tape};
use crate::scalar::{wrap_angle, Real};

pub const RESIDUAL_DIM: usize = 7;
/// Scores are clipped to `[CLIP, 1 - CLIP]` inside the cross-entropy.
pub const SCORE_CLIP: f64 = 1e-7;

/// `(dx, dy, dz, dl, dw, dh, dyaw)`.
pub type Residual<T> = [T; RESIDUAL_DIM];

fn bev_diagonal<T: Real>(b: &Box3D<T>) -> T {
    let s = b.size();
    s[0].hypot(s[1])
}

/// Offsets over the proposal's BEV diagonal (x, y) and height (z), log size
/// ratios, wrapped yaw difference.
pub fn encode_residual<T: Real>(gt: &Box3D<T>, proposal: &Box3D<T>) -> Residual<T> {
    let (g, p) = (gt.center(), proposal.center());
    let (gs, ps) = (gt.size(), proposal.size());
    let diag = bev_diagonal(proposal);
    [
        (g[0] - p[0]) / diag,
        (g[1] - p[1]) / diag,
        (g[2] - p[2]) / ps[2],
        (gs[0] / ps[0]).ln(),
        (gs[1] / ps[1]).ln(),
        (gs[2] / ps[2]).ln(),
        wrap_angle(gt.yaw() - proposal.yaw()),
    ]
}

pub fn decode_residual<T: Real>(r: &Residual<T>, proposal: &Box3D<T>) -> Result<Box3D<T>> {
    let (p, ps) = (proposal.center(), proposal.size());
    let diag = bev_diagonal(proposal);
    Box3D::new(
        [p[0] + r[0] * diag, p[1] + r[1] * diag, p[2] + r[2] * ps[2]],
        [ps[0] * r[3].exp(), ps[1] * r[4].exp(), ps[2] * r[5].exp()],
        proposal.yaw() + r[6],
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Widths of the shared MLP after the fused features.
    pub shared_widths: Vec<usize>,
    /// Hidden width of the regression and classification heads.
    pub hidden_width: usize,
    pub use_density: bool,
    /// Multiplies `f_density` before it enters the classifier.
    pub density_scale: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            shared_widths: vec![256, 256],
            hidden_width: 256,
            use_density: true,
            density_scale: 1.0,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shared_widths.is_empty() || self.shared_widths.contains(&0) || self.hidden_width == 0 {
            return Err(Error::Config("head widths must be non-empty and positive".into()));
        }
        if !(self.density_scale.is_finite() && self.density_scale > 0.0) {
            return Err(Error::Config(format!("density_scale must be positive, got {}", self.density_scale)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T> {
    pub shared: DenseParams<T>,
    pub reg: DenseParams<T>,
    pub cls: DenseParams<T>,
    pub use_density: bool,
    pub density_scale: T,
}

impl<T: Real> HeadParams<T> {
    pub fn init(input_dim: usize, cfg: &HeadConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut dims = vec![input_dim];
        dims.extend(&cfg.shared_widths);
        let s = *dims.last().unwrap();
        let mut cls = init_params(&[s, cfg.hidden_width, 1], Activation::Identity, seed.wrapping_add(2))?;
        if cfg.use_density {
            // The density column starts at zero, so a head with and without
            // it compute the same function at initialization.
            let first = &mut cls.layers[0];
            let zero = Matrix::zeros(first.weight.rows(), 1);
            first.weight = Matrix::hconcat(&[&zero, &first.weight])?;
        }
        // Residuals start at zero: the untrained head returns the proposals.
        let mut reg = init_params(&[s, cfg.hidden_width, RESIDUAL_DIM], Activation::Identity, seed.wrapping_add(1))?;
        let last = reg.layers.last_mut().expect("two layers");
        last.weight.as_mut_slice().fill(T::zero());
        Ok(Self {
            shared: init_params(&dims, Activation::Relu, seed)?,
            reg,
            cls,
            use_density: cfg.use_density,
            density_scale: T::lit(cfg.density_scale),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.shared.input_dim()
    }

    pub fn shared_dim(&self) -> usize {
        self.shared.output_dim()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            shared: self.shared.zeros_like(),
            reg: self.reg.zeros_like(),
            cls: self.cls.zeros_like(),
            use_density: self.use_density,
            density_scale: self.density_scale,
        }
    }
}

impl<T: Real> Parameters<T> for HeadParams<T> {
    fn layers(&self) -> Vec<&Layer<T>> {
        self.shared.layers.iter().chain(&self.reg.layers).chain(&self.cls.layers).collect()
    }

    fn layers_mut(&mut self) -> Vec<&mut Layer<T>> {
        self.shared
            .layers
            .iter_mut()
            .chain(self.reg.layers.iter_mut())
            .chain(self.cls.layers.iter_mut())
            .collect()
    }
}

fn rows_to_residuals<T: Real>(m: &Matrix<T>) -> Vec<Residual<T>> {
    (0..m.rows())
        .map(|r| {
            let mut out = [T::zero(); RESIDUAL_DIM];
            out.copy_from_slice(m.row(r));
            out
        })
        .collect()
}

fn decode_all<T: Real>(res: &[Residual<T>], proposals: &[Box3D<T>]) -> Result<Vec<Box3D<T>>> {
    res.iter()
        .zip(proposals)
        .enumerate()
        .map(|(i, (r, p))| {
            decode_residual(r, p).map_err(|e| Error::Proposal {
                index: i,
                source: Box::new(e),
            })
        })
        .collect()
}

fn check_rows(context: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch {
            context: context.into(),
            expected,
            got,
        });
    }
    Ok(())
}

/// Residuals from the regression MLP, decoded against the proposals.
pub fn refine_boxes<T: Real>(
    shared: &Matrix<T>,
    proposals: &[Box3D<T>],
    params: &HeadParams<T>,
) -> Result<(Vec<Box3D<T>>, Vec<Residual<T>>)> {
    check_rows("proposals per shared row", shared.rows(), proposals.len())?;
    let res = rows_to_residuals(&mlp_forward(&params.reg, shared)?.0);
    Ok((decode_all(&res, proposals)?, res))
}

/// `ln(1 + n) * s` with `s` the planar radius of the center.
pub fn density_value<T: Real>(count: usize, center: [T; 3]) -> T {
    T::from_usize_lossy(count).ln_1p() * center[0].hypot(center[1])
}

pub fn density_feature<T: Real>(boxes: &[Box3D<T>], cloud: &PointCloud<T>) -> Vec<T> {
    boxes
        .iter()
        .map(|b| density_value(points_in_box(cloud, b).len(), b.center()))
        .collect()
}

fn cls_input<T: Real>(params: &HeadParams<T>, shared: &Matrix<T>, density: &[T]) -> Result<Matrix<T>> {
    if !params.use_density {
        return Ok(shared.clone());
    }
    check_rows("density values per shared row", shared.rows(), density.len())?;
    let col = Matrix::from_vec(density.len(), 1, density.iter().map(|&d| d * params.density_scale).collect())?;
    Matrix::hconcat(&[&col, shared])
}

/// Sigmoid of the classification MLP over `[f_density, F_shared]` (the
/// density column is dropped when the head was built without it).
pub fn classify<T: Real>(shared: &Matrix<T>, density: &[T], params: &HeadParams<T>) -> Result<Vec<T>> {
    let x = cls_input(params, shared, density)?;
    let logits = mlp_forward(&params.cls, &x)?.0;
    Ok(logits.as_slice().iter().map(|&v| sigmoid(v)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput<T> {
    pub residuals: Vec<Residual<T>>,
    pub boxes: Vec<Box3D<T>>,
    pub counts: Vec<usize>,
    pub density: Vec<T>,
    pub logits: Vec<T>,
    pub scores: Vec<T>,
}

#[derive(Debug)]
pub struct HeadTape<T> {
    shared: Tape<T>,
    reg: Tape<T>,
    cls: Tape<T>,
    /// `d f_density / d (dx, dy)` per RoI.
    density_grad: Vec<[T; 2]>,
}

/// Full head pass. `count(i, b)` returns the number of points inside box
/// `b` for RoI `i`, which lets callers restrict the search to nearby points.
pub fn heads_forward<T: Real>(
    params: &HeadParams<T>,
    fused: &Matrix<T>,
    proposals: &[Box3D<T>],
    mut count: impl FnMut(usize, &Box3D<T>) -> usize,
) -> Result<(HeadOutput<T>, HeadTape<T>)> {
    check_rows("proposals per fused row", fused.rows(), proposals.len())?;
    let (shared, shared_tape) = mlp_forward(&params.shared, fused)?;
    let (reg_out, reg_tape) = mlp_forward(&params.reg, &shared)?;
    let residuals = rows_to_residuals(&reg_out);
    let boxes = decode_all(&residuals, proposals)?;
    let mut counts = Vec::with_capacity(boxes.len());
    let mut density = Vec::with_capacity(boxes.len());
    let mut density_grad = Vec::with_capacity(boxes.len());
    for (i, (b, p)) in boxes.iter().zip(proposals).enumerate() {
        let n = count(i, b);
        let c = b.center();
        let log_n = T::from_usize_lossy(n).ln_1p();
        let s = c[0].hypot(c[1]);
        let diag = bev_diagonal(p);
        counts.push(n);
        density.push(log_n * s);
        density_grad.push(if s > T::zero() {
            [log_n * c[0] / s * diag, log_n * c[1] / s * diag]
        } else {
            [T::zero(); 2]
        });
    }
    let x = cls_input(params, &shared, &density)?;
    let (logit_m, cls_tape) = mlp_forward(&params.cls, &x)?;
    let logits = logit_m.into_vec();
    let scores = logits.iter().map(|&v| sigmoid(v)).collect();
    Ok((
        HeadOutput {
            residuals,
            boxes,
            counts,
            density,
            logits,
            scores,
        },
        HeadTape {
            shared: shared_tape,
            reg: reg_tape,
            cls: cls_tape,
            density_grad,
        },
    ))
}

/// Backpropagates `dL/dscore` and `dL/dresidual`; returns parameter
/// gradients and `dL/dF_fused`. Point counts are piecewise constant, so
/// the density path only differentiates through the center radius.
pub fn heads_backward<T: Real>(
    params: &HeadParams<T>,
    out: &HeadOutput<T>,
    tape: &mut HeadTape<T>,
    d_scores: &[T],
    d_residuals: &[Residual<T>],
) -> Result<(HeadParams<T>, Matrix<T>)> {
    let n = out.scores.len();
    check_rows("score gradients", n, d_scores.len())?;
    check_rows("residual gradients", n, d_residuals.len())?;
    let d_logits: Vec<T> = d_scores
        .iter()
        .zip(&out.scores)
        .map(|(&g, &c)| g * c * (T::one() - c))
        .collect();
    let (cls_g, d_cls_in) = mlp_backward(&params.cls, &mut tape.cls, &Matrix::from_vec(n, 1, d_logits)?)?;
    let s = params.shared_dim();
    let mut d_shared = if params.use_density {
        d_cls_in.column_block(1, s)
    } else {
        d_cls_in.clone()
    };
    let mut d_res = Matrix::zeros(n, RESIDUAL_DIM);
    for i in 0..n {
        d_res.row_mut(i).copy_from_slice(&d_residuals[i]);
        if params.use_density {
            let g = d_cls_in[(i, 0)] * params.density_scale;
            d_res[(i, 0)] += g * tape.density_grad[i][0];
            d_res[(i, 1)] += g * tape.density_grad[i][1];
        }
    }
    let (reg_g, d_from_reg) = mlp_backward(&params.reg, &mut tape.reg, &d_res)?;
    d_shared.add_assign(&d_from_reg);
    let (shared_g, d_fused) = mlp_backward(&params.shared, &mut tape.shared, &d_shared)?;
    Ok((
        HeadParams {
            shared: shared_g,
            reg: reg_g,
            cls: cls_g,
            use_density: params.use_density,
            density_scale: params.density_scale,
        },
        d_fused,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Regression gate for refined boxes.
    pub tau: f64,
    /// Regression gate for proposals.
    pub tau_rpn: f64,
    /// IoU at which a proposal becomes a positive classification target.
    pub tau_cls: f64,
    pub beta: f64,
    /// Use the IoU itself as the classification target instead of 0/1.
    pub soft_targets: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.55,
            tau_rpn: 0.6,
            tau_cls: 0.6,
            beta: 1.0,
            soft_targets: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau", self.tau), ("tau_rpn", self.tau_rpn), ("tau_cls", self.tau_cls)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Targets<T> {
    pub cls: Vec<T>,
    pub residuals: Vec<Residual<T>>,
    /// IoU between each box and its assigned ground truth.
    pub iou: Vec<T>,
}

impl<T: Real> Targets<T> {
    pub fn len(&self) -> usize {
        self.cls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cls.is_empty()
    }
}

/// Assigns each proposal its highest-IoU ground truth of the same class.
pub fn assign_targets<T: Real>(proposals: &[Box3D<T>], gts: &[GroundTruth<T>], class_id: u32, cfg: &LossConfig) -> Targets<T> {
    let tau_cls = T::lit(cfg.tau_cls);
    let mut t = Targets {
        cls: Vec::with_capacity(proposals.len()),
        residuals: Vec::with_capacity(proposals.len()),
        iou: Vec::with_capacity(proposals.len()),
    };
    for p in proposals {
        let best = gts
            .iter()
            .filter(|g| g.class_id == class_id)
            .map(|g| (iou3d(p, &g.bbox), g))
            .fold(None::<(T, &GroundTruth<T>)>, |acc, cur| match acc {
                Some(a) if a.0 >= cur.0 => Some(a),
                _ => Some(cur),
            });
        match best {
            Some((iou, g)) => {
                t.cls.push(if cfg.soft_targets {
                    iou
                } else if iou >= tau_cls {
                    T::one()
                } else {
                    T::zero()
                });
                t.residuals.push(encode_residual(&g.bbox, p));
                t.iou.push(iou);
            }
            None => {
                t.cls.push(T::zero());
                t.residuals.push([T::zero(); RESIDUAL_DIM]);
                t.iou.push(T::zero());
            }
        }
    }
    t
}

pub fn smooth_l1<T: Real>(x: T, beta: T) -> T {
    let a = x.abs();
    if a < beta {
        T::half() * x * x / beta
    } else {
        a - T::half() * beta
    }
}

pub fn smooth_l1_grad<T: Real>(x: T, beta: T) -> T {
    if x.abs() < beta {
        x / beta
    } else {
        x.signum()
    }
}

/// Cross-entropy of a clipped score. Returns `(loss, dloss/dscore)`; the
/// derivative is zero where the clip is active.
pub fn bce<T: Real>(c: T, target: T) -> (T, T) {
    let lo = T::lit(SCORE_CLIP);
    let hi = T::one() - lo;
    let cc = c.max(lo).min(hi);
    let loss = -(target * cc.ln() + (T::one() - target) * (T::one() - cc).ln());
    let grad = if c < lo || c > hi {
        T::zero()
    } else {
        -target / cc + (T::one() - target) / (T::one() - cc)
    };
    (loss, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageLoss<T> {
    pub total: T,
    pub cls: T,
    pub reg: T,
    pub d_scores: Vec<T>,
    pub d_residuals: Vec<Residual<T>>,
}

/// `(1/N) [sum BCE(c, c_hat) + sum_{IoU > tau} smoothL1(delta - delta_hat)]`.
pub fn stage_loss<T: Real>(scores: &[T], residuals: &[Residual<T>], targets: &Targets<T>, tau: T, beta: T) -> Result<StageLoss<T>> {
    let n = scores.len();
    if n == 0 {
        return Err(Error::InvalidInput("loss needs at least one box".into()));
    }
    check_rows("residual predictions", n, residuals.len())?;
    check_rows("loss targets", n, targets.len())?;
    let inv_n = T::one() / T::from_usize_lossy(n);
    let (mut cls, mut reg) = (T::zero(), T::zero());
    let mut d_scores = Vec::with_capacity(n);
    let mut d_residuals = Vec::with_capacity(n);
    for i in 0..n {
        let (l, g) = bce(scores[i], targets.cls[i]);
        cls += l;
        d_scores.push(g * inv_n);
        let mut dr = [T::zero(); RESIDUAL_DIM];
        if targets.iou[i] > tau {
            for k in 0..RESIDUAL_DIM {
                let x = residuals[i][k] - targets.residuals[i][k];
                reg += smooth_l1(x, beta);
                dr[k] = smooth_l1_grad(x, beta) * inv_n;
            }
        }
        d_residuals.push(dr);
    }
    Ok(StageLoss {
        total: (cls + reg) * inv_n,
        cls: cls * inv_n,
        reg: reg * inv_n,
        d_scores,
        d_residuals,
    })
}

pub fn rcnn_loss<T: Real>(scores: &[T], residuals: &[Residual<T>], targets: &Targets<T>, cfg: &LossConfig) -> Result<StageLoss<T>> {
    stage_loss(scores, residuals, targets, T::lit(cfg.tau), T::lit(cfg.beta))
}

pub fn rpn_loss<T: Real>(scores: &[T], residuals: &[Residual<T>], targets: &Targets<T>, cfg: &LossConfig) -> Result<StageLoss<T>> {
    stage_loss(scores, residuals, targets, T::lit(cfg.tau_rpn), T::lit(cfg.beta))
}

/// Sum of the two stages; a stage without inputs contributes nothing.
pub fn total_loss<T: Real>(rpn: Option<&StageLoss<T>>, rcnn: Option<&StageLoss<T>>) -> T {
    rpn.map_or(T::zero(), |l| l.total) + rcnn.map_or(T::zero(), |l| l.total)
}
