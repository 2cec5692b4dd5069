//! Finite-difference checks of the composites used in training.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fuse::{fuse_backward, fuse_forward, fuse_infer, ConnectionMode, FusionConfig, FusionGraph, FusionInput, FusionParams};
use crate::heads::{heads_backward, heads_forward, HeadConfig, HeadOutput, HeadParams, Residual};
use crate::model::Box3D;
use crate::nn::{grad_check, sample_coordinates, GradCheckReport, Matrix, Parameters};

use super::config::RunConfig;
use super::train::{loss_and_grad, forward, toy_corpus, TrainingSet};
use super::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Composite {
    /// Every parameter of a 2-level, depth-3, width-8 fusion graph against a
    /// random linear functional of the fused vector.
    Fusion,
    /// Shared, regression and classification MLPs (density channel on)
    /// against a random functional of scores and residuals.
    Heads,
    /// The refinement loss through pooling inputs, fusion and heads on a
    /// small generated scene, at initial weights with random biases.
    Rcnn,
}

impl Composite {
    pub const ALL: [Composite; 3] = [Composite::Fusion, Composite::Heads, Composite::Rcnn];

    pub fn name(self) -> &'static str {
        match self {
            Composite::Fusion => "fusion",
            Composite::Heads => "heads",
            Composite::Rcnn => "rcnn",
        }
    }
}

impl FromStr for Composite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown composite '{s}' (expected fusion, heads or rcnn)")))
    }
}

/// Central-difference step used by the composite checks.
pub const STEP: f64 = 1e-6;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

fn cube(n: usize) -> Vec<[f64; 3]> {
    let c = |i: usize| -1.0 + (i as f64 + 0.5) * 2.0 / n as f64;
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                out.push([c(i), c(j), c(k)]);
            }
        }
    }
    out
}

fn check_fusion(coords: usize, tol: f64, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graph = FusionGraph::new(
        FusionConfig {
            levels: 2,
            depth: 3,
            mode: ConnectionMode::Log2n,
            internal_channels: 8,
            output_channels: 8,
        },
        vec![5, 5],
    )?;
    let params = FusionParams::<f64>::init(&graph, seed);
    let points = [cube(3), cube(2)];
    let levels = points.iter().map(|p| random_matrix(&mut rng, p.len(), 5)).collect();
    let input = FusionInput::new(levels, &points)?;
    let w: Vec<f64> = (0..graph.output_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (_, mut tape) = fuse_forward(&graph, &params, &input)?;
    let (grads, _) = fuse_backward(&graph, &params, &input, &mut tape, &w)?;
    let theta = params.flatten();
    let mut probe = params.clone();
    Ok(grad_check(
        |t| {
            probe.assign(t).expect("length");
            let f = fuse_infer(&graph, &probe, &input).expect("forward").fused;
            f.iter().zip(&w).map(|(a, b)| a * b).sum()
        },
        &theta,
        &grads.flatten(),
        &sample_coordinates(theta.len(), coords, seed),
        STEP,
        tol,
    ))
}

fn check_heads(coords: usize, tol: f64, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 6;
    let cfg = HeadConfig {
        shared_widths: vec![24],
        hidden_width: 16,
        use_density: true,
        density_scale: 0.05,
    };
    let params = HeadParams::<f64>::init(16, &cfg, seed)?;
    let fused = random_matrix(&mut rng, n, 16);
    let proposals: Vec<Box3D<f64>> = (0..n)
        .map(|_| {
            Box3D::new(
                [rng.gen_range(5.0..60.0), rng.gen_range(-20.0..20.0), rng.gen_range(-1.5..0.0)],
                [rng.gen_range(3.5..4.5), rng.gen_range(1.5..2.0), rng.gen_range(1.4..1.7)],
                rng.gen_range(-3.0..3.0),
            )
        })
        .collect::<Result<_>>()?;
    let counts: Vec<usize> = (0..n).map(|_| rng.gen_range(0..200)).collect();
    let ws: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let wr: Vec<Residual<f64>> = (0..n).map(|_| [(); 7].map(|_| rng.gen_range(-1.0..1.0))).collect();
    let objective = |o: &HeadOutput<f64>| -> f64 {
        let s: f64 = o.scores.iter().zip(&ws).map(|(a, b)| a * b).sum();
        let r: f64 = o.residuals.iter().flatten().zip(wr.iter().flatten()).map(|(a, b)| a * b).sum();
        s + r
    };
    let (out, mut tape) = heads_forward(&params, &fused, &proposals, |i, _| counts[i])?;
    let (grads, _) = heads_backward(&params, &out, &mut tape, &ws, &wr)?;
    let theta = params.flatten();
    let mut probe = params.clone();
    Ok(grad_check(
        |t| {
            probe.assign(t).expect("length");
            objective(&heads_forward(&probe, &fused, &proposals, |i, _| counts[i]).expect("forward").0)
        },
        &theta,
        &grads.flatten(),
        &sample_coordinates(theta.len(), coords, seed),
        STEP,
        tol,
    ))
}

fn check_rcnn(coords: usize, tol: f64, seed: u64) -> Result<GradCheckReport> {
    let cfg = RunConfig::toy();
    let (scenes, props) = toy_corpus(&cfg, 1, seed)?;
    let set = TrainingSet::build(&scenes, &props, &cfg)?;
    // Zero initial biases put every all-zero input row (an empty grid point
    // at the box center, a dead unit) exactly on a ReLU kink, where the loss
    // has no derivative. Random biases move the check to a generic point.
    let mut model = Model::init(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for layer in model.layers_mut() {
        for b in &mut layer.bias {
            *b = rng.gen_range(-0.1..0.1);
        }
    }
    let (_, grads) = loss_and_grad(&model, &set, &cfg.loss)?;
    let theta = model.flatten();
    let mut probe = model.clone();
    Ok(grad_check(
        |t| {
            probe.assign(t).expect("length");
            forward(&probe, &set, &cfg.loss).expect("forward").loss.total
        },
        &theta,
        &grads.flatten(),
        &sample_coordinates(theta.len(), coords, seed),
        STEP,
        tol,
    ))
}

/// Runs one composite check over `coords` sampled parameter coordinates.
pub fn composite_gradcheck(which: Composite, coords: usize, tol: f64, seed: u64) -> Result<GradCheckReport> {
    match which {
        Composite::Fusion => check_fusion(coords, tol, seed),
        Composite::Heads => check_heads(coords, tol, seed),
        Composite::Rcnn => check_rcnn(coords, tol, seed),
    }
}
