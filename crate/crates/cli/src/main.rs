use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use pyramid_det::encoder::encode_pyramid;
use pyramid_det::eval::{evaluate, EvalScene, MetricReport};
use pyramid_det::fuse::fuse_infer;
use pyramid_det::model::{generate_scene, Detection, LabeledScene};
use pyramid_det::pipeline::checks::{composite_gradcheck, Composite};
use pyramid_det::pipeline::config::RunConfig;
use pyramid_det::pipeline::kitti::{class_name, read_detections, write_detections, SceneDir};
use pyramid_det::pipeline::proposals::{generate_proposals, Proposal};
use pyramid_det::pipeline::train::{toy_corpus, train_toy};
use pyramid_det::pipeline::{prepare_roi, run_pipeline, Model, SceneContext};
use pyramid_det::pool::pool_roi;
use pyramid_det::{selftest, Error};

/// Second-stage box refinement on LiDAR scenes: synthetic data, pooling
/// and fusion inspection, toy training, evaluation and self checks.
///
/// Without `--config` the small toy configuration is used.
#[derive(Debug, Parser)]
#[command(name = "pyramid-det", version)]
struct Cli {
    /// TOML run configuration; every section is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Writes synthetic scenes as KITTI-style files under --out.
    GenScenes {
        #[arg(long, default_value_t = 5)]
        count: usize,
    },
    /// Voxel pyramid statistics for one scene.
    Encode {
        scenes: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Per-level pooling statistics for the proposals of one scene.
    Pool {
        scenes: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Fused feature summaries for the proposals of one scene.
    Fuse {
        scenes: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Weights written by train-toy; a fresh initialization otherwise.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Refines generated proposals for every scene, writes detections and
    /// a metric report.
    Pipeline {
        scenes: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        /// BEV-IoU suppression of refined boxes (0.1 when given bare).
        #[arg(long, num_args = 0..=1, default_missing_value = "0.1")]
        nms: Option<f64>,
    },
    /// Trains the refinement stage on generated (or given) scenes.
    TrainToy {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Number of generated scenes; ignored with --data.
        #[arg(long)]
        scenes: Option<usize>,
        /// Train on a KITTI-style scene directory instead.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Scores detections against ground truth.
    Eval {
        /// Scene directory holding velodyne/ and label_2/.
        gt: PathBuf,
        /// Detection directory; defaults to <gt>/pred.
        #[arg(long)]
        pred: Option<PathBuf>,
    },
    /// Finite-difference check of one composite (fusion, heads, rcnn).
    Gradcheck {
        composite: String,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        #[arg(long, default_value_t = 500)]
        coords: usize,
    },
    /// Runs the bundled oracle checks.
    Selftest {
        #[arg(long, default_value_t = 100)]
        gradient_coords: usize,
    },
}

#[derive(Debug)]
enum Failure {
    Validation(String),
    Runtime(String),
    Acceptance(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Acceptance(_) => 3,
        }
    }
}

fn is_runtime(e: &Error) -> bool {
    match e {
        Error::Io(_) | Error::Divergence { .. } | Error::TapeConsumed => true,
        Error::Proposal { source, .. } => is_runtime(source),
        _ => false,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if is_runtime(&e) {
            Failure::Runtime(e.to_string())
        } else {
            Failure::Validation(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = match &f {
                Failure::Validation(m) | Failure::Runtime(m) | Failure::Acceptance(m) => m,
            };
            eprintln!("error: {msg}");
            ExitCode::from(f.code())
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::toy(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Prints to stdout, or writes to `out` when given.
fn emit(out: Option<&Path>, text: &str) -> Outcome {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn scene_proposals(scene: &LabeledScene<f64>, cfg: &RunConfig, index: usize) -> Result<Vec<Proposal>, Error> {
    generate_proposals(scene, &cfg.proposals, cfg.seed.wrapping_add(10_000 + index as u64))
}

fn load_model(path: Option<&Path>, cfg: &RunConfig) -> Result<Model, Error> {
    match path {
        Some(p) => Model::load(p, cfg),
        None => Model::init(cfg, cfg.seed),
    }
}

fn run(cli: Cli) -> Outcome {
    let cfg = load_config(&cli)?;
    let out = cli.out.as_deref();
    match &cli.command {
        Command::GenScenes { count } => gen_scenes(&cfg, *count, out),
        Command::Encode { scenes, index } => encode(&cfg, scenes, *index, out),
        Command::Pool { scenes, index } => pool(&cfg, scenes, *index, out),
        Command::Fuse { scenes, index, model } => fuse(&cfg, scenes, *index, model.as_deref(), out),
        Command::Pipeline { scenes, model, nms } => {
            let mut cfg = cfg.clone();
            if nms.is_some() {
                cfg.eval.nms_threshold = *nms;
            }
            cfg.validate()?;
            pipeline(&cfg, scenes, model.as_deref(), out)
        }
        Command::TrainToy { steps, lr, scenes, data } => train(&cfg, *steps, *lr, *scenes, data.as_deref(), out),
        Command::Eval { gt, pred } => {
            let pred = pred.clone().unwrap_or_else(|| gt.join("pred"));
            eval(&cfg, gt, &pred, out)
        }
        Command::Gradcheck { composite, tol, coords } => gradcheck(composite, *tol, *coords, cfg.seed, out),
        Command::Selftest { gradient_coords } => run_selftest(cfg.seed, *gradient_coords, out),
    }
}

fn gen_scenes(cfg: &RunConfig, count: usize, out: Option<&Path>) -> Outcome {
    let out = out.ok_or_else(|| Failure::Validation("gen-scenes needs --out <dir>".into()))?;
    let dir = SceneDir::new(out);
    for i in 0..count {
        let scene: LabeledScene<f64> = generate_scene(&cfg.scene, cfg.seed.wrapping_add(i as u64))?;
        dir.write_scene(i, &scene, cfg.calibration)?;
    }
    println!("wrote {count} scenes to {}", out.display());
    Ok(())
}

fn encode(cfg: &RunConfig, scenes: &Path, index: usize, out: Option<&Path>) -> Outcome {
    let scene = SceneDir::new(scenes).load_scene(index, cfg.calibration)?;
    let pyr = encode_pyramid(&scene.cloud, &cfg.encoder)?;
    let mut s = format!("# scene {index}: {} points\n# source stride voxels points dims\n", scene.cloud.len());
    for g in &pyr.grids {
        let d = g.dims();
        let _ = writeln!(s, "voxel {} {} {} {}x{}x{}", g.stride(), g.len(), g.total_count(), d[0], d[1], d[2]);
    }
    let (nx, ny, c) = pyr.bev.shape();
    let _ = writeln!(s, "bev 8 {} - {nx}x{ny}x{c}", nx * ny);
    emit(out, &s)
}

fn pool(cfg: &RunConfig, scenes: &Path, index: usize, out: Option<&Path>) -> Outcome {
    let scene = SceneDir::new(scenes).load_scene(index, cfg.calibration)?;
    let props = scene_proposals(&scene, cfg, index)?;
    let ctx = SceneContext::build(&scene.cloud, cfg)?;
    let mut s = String::from("# proposal level source grid_points empty_fraction\n");
    for (i, p) in props.iter().enumerate() {
        let pyr = pool_roi(&ctx.sources, &p.bbox, &cfg.pool)?;
        for (l, (spec, pooled)) in cfg.pool.levels.iter().zip(&pyr.pooled).enumerate() {
            let empty = pooled.empty.iter().filter(|&&e| e).count() as f64 / pooled.empty.len().max(1) as f64;
            let _ = writeln!(s, "{i} {l} {} {} {empty:.4}", spec.source.name(), pooled.empty.len());
        }
    }
    emit(out, &s)
}

fn fuse(cfg: &RunConfig, scenes: &Path, index: usize, model: Option<&Path>, out: Option<&Path>) -> Outcome {
    let scene = SceneDir::new(scenes).load_scene(index, cfg.calibration)?;
    let props = scene_proposals(&scene, cfg, index)?;
    let model = load_model(model, cfg)?;
    let ctx = SceneContext::build(&scene.cloud, cfg)?;
    let mut s = format!("# fused dim {}; proposal min mean max\n", model.graph.output_dim());
    for (i, p) in props.iter().enumerate() {
        let roi = prepare_roi(&ctx, &p.bbox, cfg)?;
        let f = fuse_infer(&model.graph, &model.fuse, &roi.fusion)?.fused;
        let min = f.iter().copied().fold(f64::INFINITY, f64::min);
        let max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = f.iter().sum::<f64>() / f.len().max(1) as f64;
        let _ = writeln!(s, "{i} {min:.6} {mean:.6} {max:.6}");
    }
    emit(out, &s)
}

fn class_list<'a>(ids: impl Iterator<Item = &'a u32>) -> Vec<(u32, String)> {
    let mut ids: Vec<u32> = ids.copied().collect();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter().map(|c| (c, class_name(c).to_string())).collect()
}

fn report_for(cfg: &RunConfig, scenes: &[LabeledScene<f64>], dets: &[Vec<Detection<f64>>]) -> Result<MetricReport, Error> {
    let classes = class_list(
        scenes
            .iter()
            .flat_map(|s| s.ground_truths.iter().map(|g| &g.class_id))
            .chain(dets.iter().flatten().map(|d| &d.class_id)),
    );
    let inputs: Vec<EvalScene<'_, f64>> = scenes
        .iter()
        .zip(dets)
        .map(|(s, d)| EvalScene {
            gts: &s.ground_truths,
            cloud: &s.cloud,
            dets: d,
        })
        .collect();
    evaluate(&inputs, &classes, cfg.eval.scheme, cfg.eval.iou_threshold)
}

fn pipeline(cfg: &RunConfig, scenes: &Path, model: Option<&Path>, out: Option<&Path>) -> Outcome {
    let dir = SceneDir::new(scenes);
    let model = load_model(model, cfg)?;
    let indices = dir.indices()?;
    // Scenes are independent; results are collected in index order.
    let results = indices
        .par_iter()
        .map(|&i| -> Result<_, Error> {
            let scene = dir.load_scene(i, cfg.calibration)?;
            let props = scene_proposals(&scene, cfg, i)?;
            let dets = run_pipeline(&scene.cloud, &props, cfg, &model)?;
            Ok((scene, dets))
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let (loaded, dets): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let target = SceneDir::new(out.unwrap_or(scenes));
    for (&i, d) in indices.iter().zip(&dets) {
        let p = target.pred_path(i);
        fs::create_dir_all(p.parent().expect("pred dir"))?;
        write_detections(&p, d, cfg.calibration)?;
    }
    let report = report_for(cfg, &loaded, &dets)?.to_string();
    if let Some(o) = out {
        fs::write(o.join("report.txt"), &report)?;
    }
    print!("{report}");
    Ok(())
}

fn train(cfg: &RunConfig, steps: Option<usize>, lr: Option<f64>, count: Option<usize>, data: Option<&Path>, out: Option<&Path>) -> Outcome {
    let scenes = match data {
        Some(d) => {
            let dir = SceneDir::new(d);
            dir.indices()?.into_iter().map(|i| dir.load_scene(i, cfg.calibration)).collect::<Result<Vec<_>, _>>()?
        }
        None => toy_corpus(cfg, count.unwrap_or(cfg.train.scenes), cfg.seed)?.0,
    };
    let steps = steps.unwrap_or(cfg.train.steps);
    let report = train_toy(&scenes, cfg, steps, lr.unwrap_or(cfg.train.lr), cfg.seed)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        let _ = writeln!(csv, "{i},{l:.10e}");
    }
    if let Some(o) = out {
        fs::create_dir_all(o)?;
        report.model.save(&o.join("model.params"))?;
        fs::write(o.join("losses.csv"), &csv)?;
    }
    let first = report.losses[0];
    let last = *report.losses.last().expect("non-empty trajectory");
    println!(
        "{} scenes, {steps} steps: loss {first:.6} -> {last:.6} (ratio {:.4}), {} rejected steps, final lr {:.3e}",
        scenes.len(),
        last / first,
        report.rejected_steps,
        report.final_lr
    );
    Ok(())
}

fn eval(cfg: &RunConfig, gt: &Path, pred: &Path, out: Option<&Path>) -> Outcome {
    let dir = SceneDir::new(gt);
    let mut scenes = Vec::new();
    let mut dets = Vec::new();
    for i in dir.indices()? {
        scenes.push(dir.load_scene(i, cfg.calibration)?);
        let p = pred.join(format!("{i:06}.txt"));
        dets.push(if p.exists() { read_detections(&p, cfg.calibration)? } else { Vec::new() });
    }
    emit(out, &report_for(cfg, &scenes, &dets)?.to_string())
}

fn gradcheck(name: &str, tol: f64, coords: usize, seed: u64, out: Option<&Path>) -> Outcome {
    let which: Composite = name.parse()?;
    if !(tol.is_finite() && tol > 0.0) || coords == 0 {
        return Err(Failure::Validation("--tol must be positive and --coords at least 1".into()));
    }
    let r = composite_gradcheck(which, coords, tol, seed)?;
    let line = format!(
        "{} {}: {} coords, max rel err {:.3e} (tol {tol:.1e})\n",
        if r.passed() { "PASS" } else { "FAIL" },
        which.name(),
        r.checked,
        r.max_rel_err
    );
    emit(out, &line)?;
    if r.passed() {
        Ok(())
    } else {
        Err(Failure::Acceptance(format!("gradient check of {} failed", which.name())))
    }
}

fn run_selftest(seed: u64, gradient_coords: usize, out: Option<&Path>) -> Outcome {
    let checks = selftest::run_all(seed, gradient_coords);
    let mut s = String::new();
    for c in &checks {
        let _ = writeln!(s, "{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    emit(out, &s)?;
    let failed = checks.iter().filter(|c| !c.pass).count();
    if failed == 0 {
        Ok(())
    } else {
        Err(Failure::Acceptance(format!("{failed} of {} checks failed", checks.len())))
    }
}
