//! `o2s` — command-line driver for the lane-detection engine.
//!
//! Subcommands: `gen` (synthetic scenes), `forward` (refinement decoder),
//! `assign` (one-to-several label assignment), `loss` (classification +
//! regression losses), `eval` (LIOU-matched precision/recall/F1 over scene
//! files or `.lines.txt` directories), and `bench` (assignment-phase timings).
//!
//! Exit codes: 0 success, 1 usage error, 2 bad input file or schema,
//! 3 internal invariant breach. Every command is deterministic given its
//! flags and seeds; only `bench` timings vary run to run.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use o2s_core::assignment::{
    hungarian, layer_soft_labels, liou_matrix, one_to_several, ota_assign, ota_cost_matrix,
    OtaConfig,
};
use o2s_core::decoder::{
    decoder_forward, initial_anchors, DecoderWeights, FeatureMap, LayerTrace, Prediction,
};
use o2s_core::encoding::EncodingConfig;
use o2s_core::evaluation::{match_image, EvalConfig, EvalCounts, ScoredLane};
use o2s_core::formats::{
    parse_lines_txt, polylines_to_lines_txt, read_json, write_json, AssignmentReport, EvalBucket,
    EvalReport, LossReport, SceneFile, TraceFile, WeightsFile,
};
use o2s_core::geometry::{anchor_to_polyline, GeometryConfig, LanePolyline};
use o2s_core::losses::{compute_losses, LossWeights};
use o2s_core::simgen::{gen_scene, perfect_predictions, perturb, NoiseSpec, SceneSpec};

/// Environment variable choosing the worker count for directory evaluation.
const THREADS_ENV: &str = "O2S_THREADS";

#[derive(Parser)]
#[command(
    name = "o2s",
    version,
    about = "Deterministic lane-detection engine: scene generation, decoding, assignment, losses, evaluation, benchmarks",
    after_help = "Exit codes: 0 success, 1 usage, 2 bad input, 3 internal error.\n\
                  O2S_THREADS sets the worker count for directory evaluation."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scene files (ground truths and optional predictions).
    Gen(GenArgs),
    /// Run the refinement decoder over a scene and write the layer trace.
    Forward(ForwardArgs),
    /// Compute the one-to-several label assignment for a scene.
    Assign(AssignArgs),
    /// Compute classification/regression losses for a scene.
    Loss(LossArgs),
    /// Score predictions against ground truths (scene file or directories).
    Eval(EvalArgs),
    /// Time the assignment pipeline phases.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GeometryArgs {
    /// Image width in pixels.
    #[arg(long, default_value_t = 800.0)]
    width: f64,
    /// Image height in pixels.
    #[arg(long, default_value_t = 320.0)]
    height: f64,
    /// Number of sample rows (z).
    #[arg(long, default_value_t = 72)]
    rows: usize,
    /// LIOU half-width e in pixels.
    #[arg(long, default_value_t = 15.0)]
    radius: f64,
}

impl GeometryArgs {
    fn build(&self) -> Result<GeometryConfig, Failure> {
        GeometryConfig::new(self.width, self.height, self.rows, self.radius).map_err(usage)
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum PredMode {
    /// Ground truths only.
    None,
    /// One exact, fully confident prediction per ground truth.
    Perfect,
    /// Noisy predictions drawn with the scene's noise parameters.
    Noisy,
}

#[derive(Args)]
struct GenArgs {
    /// Seed of the first scene.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Ground-truth lanes per scene (at most 4).
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..=4))]
    lanes: u64,
    /// Number of scenes (seeds seed, seed+1, ...). Requires a directory --out.
    #[arg(long, default_value_t = 1)]
    count: u64,
    /// Output scene file, or directory when it ends with '/' or already exists.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    geometry: GeometryArgs,
    /// Smallest quadratic curvature coefficient (fraction of image width).
    #[arg(long, default_value_t = -0.08)]
    curvature_min: f64,
    /// Largest quadratic curvature coefficient (fraction of image width).
    #[arg(long, default_value_t = 0.08)]
    curvature_max: f64,
    /// Std-dev of per-row lateral prediction noise in pixels.
    #[arg(long, default_value_t = 0.0)]
    x_sigma: f64,
    /// Std-dev of prediction angle noise in radians.
    #[arg(long, default_value_t = 0.0)]
    theta_sigma: f64,
    /// Probability of dropping each true lane from the predictions.
    #[arg(long, default_value_t = 0.0)]
    drop_prob: f64,
    /// Number of low-scoring clutter lanes added to the predictions.
    #[arg(long, default_value_t = 0)]
    clutter: usize,
    /// Category label copied into the scene and evaluation reports.
    #[arg(long)]
    category: Option<String>,
    /// Predictions stored in the scene.
    #[arg(long, value_enum, default_value_t = PredMode::None)]
    preds: PredMode,
    /// Number of identical prediction layers stored with --preds.
    #[arg(long, default_value_t = 6)]
    pred_layers: usize,
    /// Also write the ground truths as a .lines.txt file next to each scene.
    #[arg(long)]
    emit_lines: bool,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum FmapMode {
    /// Deterministic smooth pattern (no seed involved).
    Pattern,
    /// Seeded uniform noise (see --fmap-seed).
    Random,
}

#[derive(Args)]
struct ForwardArgs {
    /// Scene file providing the geometry (and evaluation context).
    #[arg(long)]
    scene: PathBuf,
    /// Seed for freshly initialized decoder weights.
    #[arg(long, default_value_t = 42, conflicts_with = "weights_file")]
    weights_seed: u64,
    /// Load decoder weights from a tensor-map JSON file instead of seeding.
    /// Its metadata overrides --layers, --dim, --heads and --temperature.
    #[arg(long)]
    weights_file: Option<PathBuf>,
    /// Write the decoder weights actually used to this tensor-map JSON file.
    #[arg(long)]
    save_weights: Option<PathBuf>,
    /// Number of lane anchors (queries).
    #[arg(long, default_value_t = 192)]
    anchors: usize,
    /// Number of decoder layers.
    #[arg(long, default_value_t = 6)]
    layers: usize,
    /// Model width D (multiple of 8).
    #[arg(long, default_value_t = 256)]
    dim: usize,
    /// Attention heads (must divide --dim).
    #[arg(long, default_value_t = 8)]
    heads: usize,
    /// Sinusoidal encoding frequency base.
    #[arg(long, default_value_t = 10000.0)]
    temperature: f64,
    /// Feature-map fill.
    #[arg(long, value_enum, default_value_t = FmapMode::Pattern)]
    fmap: FmapMode,
    /// Seed for --fmap random.
    #[arg(long, default_value_t = 7)]
    fmap_seed: u64,
    /// Feature-map height in cells.
    #[arg(long, default_value_t = 6)]
    fmap_height: usize,
    /// Feature-map width in cells.
    #[arg(long, default_value_t = 15)]
    fmap_width: usize,
    /// Output trace file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OtaArgs {
    /// Weight of the squared similarity cost.
    #[arg(long, default_value_t = 3.0)]
    w_sim: f64,
    /// Weight of the classification cost.
    #[arg(long, default_value_t = 1.0)]
    w_cls: f64,
    /// Minimum positives per ground truth.
    #[arg(long, default_value_t = 2)]
    t_min: usize,
    /// LIOU column entries summed for the dynamic positive count.
    #[arg(long, default_value_t = 4)]
    top_q: usize,
    /// Maximum positives per ground truth.
    #[arg(long, default_value_t = 8)]
    k_max: usize,
    /// Focusing exponent of the classification cost.
    #[arg(long, default_value_t = 2.0)]
    focal_gamma: f64,
    /// Positive-class weight of the classification cost.
    #[arg(long, default_value_t = 0.25)]
    focal_alpha: f64,
}

impl OtaArgs {
    fn build(&self) -> OtaConfig {
        OtaConfig {
            w_sim: self.w_sim,
            w_cls: self.w_cls,
            t_min: self.t_min,
            top_q: self.top_q,
            k_max: self.k_max,
            focal_gamma: self.focal_gamma,
            focal_alpha: self.focal_alpha,
        }
    }
}

#[derive(Args)]
struct AssignArgs {
    /// Scene file with the ground truths.
    #[arg(long)]
    scene: PathBuf,
    /// Trace file with per-layer predictions; defaults to the scene's own.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    ota: OtaArgs,
    /// Output report file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LossArgs {
    /// Scene file with the ground truths.
    #[arg(long)]
    scene: PathBuf,
    /// Trace file with per-layer predictions; defaults to the scene's own.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    ota: OtaArgs,
    /// Weight of the classification term.
    #[arg(long, default_value_t = 2.0)]
    lambda_cls: f64,
    /// Weight of the LIOU regression term.
    #[arg(long, default_value_t = 2.0)]
    lambda_iou: f64,
    /// Weight of the smooth-L1 regression term.
    #[arg(long, default_value_t = 0.3)]
    lambda_l1: f64,
    /// Weight of the externally supplied segmentation term.
    #[arg(long, default_value_t = 1.0)]
    lambda_seg: f64,
    /// Focusing exponent of the classification loss (the assignment cost's
    /// exponent is --focal-gamma).
    #[arg(long, default_value_t = 2.0)]
    cls_gamma: f64,
    /// Quadratic/linear crossover of the smooth-L1 loss.
    #[arg(long, default_value_t = 1.0)]
    smooth_l1_beta: f64,
    /// Externally computed segmentation loss value.
    #[arg(long, default_value_t = 0.0)]
    seg: f64,
    /// Output report file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Scene file whose stored predictions are evaluated against its gts.
    #[arg(long, conflicts_with_all = ["preds", "gts"])]
    scene: Option<PathBuf>,
    /// Prediction layer to evaluate (1-based; default: last).
    #[arg(long)]
    layer: Option<usize>,
    /// Directory of predicted .lines.txt files (requires --gts).
    #[arg(long, requires = "gts")]
    preds: Option<PathBuf>,
    /// Directory of ground-truth .lines.txt files (requires --preds).
    #[arg(long, requires = "preds")]
    gts: Option<PathBuf>,
    #[command(flatten)]
    geometry: GeometryArgs,
    /// LIOU above which a prediction/gt pair may match.
    #[arg(long, default_value_t = 0.5)]
    liou_threshold: f64,
    /// Score below which predictions are discarded.
    #[arg(long, default_value_t = 0.5)]
    score_threshold: f64,
    /// Output report file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Number of lane anchors.
    #[arg(long, default_value_t = 192)]
    anchors: usize,
    /// Number of ground truths (at most 4).
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..=4))]
    gts: u64,
    /// Number of decoder layers.
    #[arg(long, default_value_t = 6)]
    layers: usize,
    /// Timing samples per phase.
    #[arg(long, default_value_t = 25, value_parser = clap::value_parser!(u64).range(1..))]
    iters: u64,
    /// Scene seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Write the machine-readable timings here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A command failure carrying its exit code.
enum Failure {
    Usage(String),
    Input(String),
    Internal(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Input(_) => 2,
            Failure::Internal(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Input(m) | Failure::Internal(m) => m,
        }
    }
}

fn usage(e: impl Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn input(e: impl Display) -> Failure {
    Failure::Input(e.to_string())
}

fn internal(e: impl Display) -> Failure {
    Failure::Internal(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match panic::catch_unwind(AssertUnwindSafe(|| run(cli))) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(f)) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
        Err(_) => {
            eprintln!("error: internal invariant breach (panic)");
            ExitCode::from(3)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Forward(a) => cmd_forward(a),
        Command::Assign(a) => cmd_assign(a),
        Command::Loss(a) => cmd_loss(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

// ---------------------------------------------------------------------------
// gen

fn cmd_gen(a: GenArgs) -> Result<(), Failure> {
    let geometry = a.geometry.build()?;
    let dir_mode = a.count > 1
        || a.out.as_os_str().to_string_lossy().ends_with('/')
        || a.out.is_dir();
    if dir_mode {
        fs::create_dir_all(&a.out).map_err(input)?;
    } else if let Some(parent) = a.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(input)?;
        }
    }

    for i in 0..a.count {
        let seed = a.seed + i;
        let spec = SceneSpec {
            seed,
            num_lanes: a.lanes as usize,
            curvature: (a.curvature_min, a.curvature_max),
            geometry: geometry.clone(),
            noise: NoiseSpec {
                x_sigma: a.x_sigma,
                theta_sigma: a.theta_sigma,
                drop_prob: a.drop_prob,
                clutter: a.clutter,
            },
        };
        spec.validate().map_err(usage)?;
        let gts = gen_scene(&spec).map_err(internal)?;
        let layer_preds = match a.preds {
            PredMode::None => None,
            PredMode::Perfect => Some(perfect_predictions(&gts, &geometry)),
            PredMode::Noisy => Some(perturb(&gts, &spec).map_err(internal)?),
        };
        let scene = SceneFile {
            geometry: geometry.clone(),
            category: a.category.clone(),
            gts,
            predictions: layer_preds.map(|p| vec![p; a.pred_layers.max(1)]),
        };
        scene.validate().map_err(internal)?;

        let path = if dir_mode {
            a.out.join(format!("scene-{seed}.json"))
        } else {
            a.out.clone()
        };
        write_json(&path, &scene).map_err(input)?;
        println!(
            "wrote {} ({} lanes{})",
            path.display(),
            scene.gts.len(),
            match &scene.predictions {
                Some(layers) => format!(
                    ", {} predictions x {} layers",
                    layers[0].len(),
                    layers.len()
                ),
                None => String::new(),
            }
        );

        if a.emit_lines {
            let polys: Vec<LanePolyline> =
                scene.gts.iter().map(|gt| gt.polyline.clone()).collect();
            let text = polylines_to_lines_txt(&polys, &geometry);
            let lines_path = path.with_extension("lines.txt");
            fs::write(&lines_path, text).map_err(input)?;
            println!("wrote {}", lines_path.display());
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// forward

fn cmd_forward(a: ForwardArgs) -> Result<(), Failure> {
    let scene = load_scene(&a.scene)?;
    let geo = &scene.geometry;

    let (weights, weights_seed) = match &a.weights_file {
        Some(path) => {
            let file: WeightsFile = read_json(path).map_err(input)?;
            (file.to_weights().map_err(input)?, None)
        }
        None => {
            let cfg = EncodingConfig::new(a.dim, a.temperature).map_err(usage)?;
            let w = DecoderWeights::seeded(a.weights_seed, a.layers, a.heads, geo.num_rows, cfg)
                .map_err(usage)?;
            (w, Some(a.weights_seed))
        }
    };
    if weights.num_rows != geo.num_rows {
        return Err(input(format!(
            "weights expect {} rows but the scene has {}",
            weights.num_rows, geo.num_rows
        )));
    }
    if a.anchors == 0 {
        return Err(usage("--anchors must be positive"));
    }

    let dim = weights.dim();
    let fmap = match a.fmap {
        FmapMode::Pattern => FeatureMap::patterned(a.fmap_height, a.fmap_width, dim),
        FmapMode::Random => FeatureMap::seeded_random(a.fmap_height, a.fmap_width, dim, a.fmap_seed),
    };

    let anchors = initial_anchors(a.anchors, geo.num_rows);
    let layers = decoder_forward(&anchors, &fmap, &weights).map_err(internal)?;

    if let Some(path) = &a.save_weights {
        write_json(path, &WeightsFile::from_weights(&weights)).map_err(input)?;
        println!("wrote {}", path.display());
    }

    let trace = TraceFile {
        dim,
        num_heads: weights.num_heads,
        num_rows: weights.num_rows,
        weights_seed,
        layers,
    };
    trace.validate().map_err(internal)?;
    write_json(&a.out, &trace).map_err(input)?;
    println!(
        "wrote {} ({} layers x {} predictions, dim {})",
        a.out.display(),
        trace.layers.len(),
        trace.layers[0].predictions.len(),
        dim
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// assign

fn cmd_assign(a: AssignArgs) -> Result<(), Failure> {
    let scene = load_scene(&a.scene)?;
    let traces = load_traces(&scene, a.trace.as_deref())?;
    let cfg = a.ota.build();
    let layers = one_to_several(&traces, &scene.gts, &cfg, &scene.geometry).map_err(internal)?;

    println!("layer  positives  fully  negatives");
    for la in &layers {
        let fully = la.positives.iter().filter(|p| p.fully).count();
        println!(
            "{:>5}  {:>9}  {:>5}  {:>9}",
            la.layer,
            la.positives.len(),
            fully,
            la.negatives.len()
        );
    }

    if let Some(path) = &a.out {
        write_json(path, &AssignmentReport::new(cfg, &layers)).map_err(input)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// loss

fn cmd_loss(a: LossArgs) -> Result<(), Failure> {
    let scene = load_scene(&a.scene)?;
    let traces = load_traces(&scene, a.trace.as_deref())?;
    let cfg = a.ota.build();
    let weights = LossWeights {
        lambda_cls: a.lambda_cls,
        lambda_iou: a.lambda_iou,
        lambda_l1: a.lambda_l1,
        lambda_seg: a.lambda_seg,
        focal_gamma: a.cls_gamma,
        smooth_l1_beta: a.smooth_l1_beta,
    };
    let assignments =
        one_to_several(&traces, &scene.gts, &cfg, &scene.geometry).map_err(internal)?;
    let breakdown = compute_losses(&assignments, &traces, &scene.gts, &weights, a.seg)
        .map_err(internal)?;

    println!("layer  cls           reg");
    for l in &breakdown.per_layer {
        println!("{:>5}  {:<12.6}  {:<12.6}", l.layer, l.cls, l.reg);
    }
    println!(
        "total {} (cls {}, reg {}, seg {})",
        breakdown.total, breakdown.cls, breakdown.reg, breakdown.seg
    );

    if let Some(path) = &a.out {
        write_json(path, &LossReport::new(weights, breakdown)).map_err(input)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

fn cmd_eval(a: EvalArgs) -> Result<(), Failure> {
    let cfg = EvalConfig {
        liou_threshold: a.liou_threshold,
        score_threshold: a.score_threshold,
    };
    let report = match (&a.scene, &a.preds, &a.gts) {
        (Some(scene), None, None) => eval_scene(scene, a.layer, &cfg)?,
        (None, Some(preds), Some(gts)) => {
            let geo = a.geometry.build()?;
            eval_dirs(preds, gts, &cfg, &geo)?
        }
        _ => {
            return Err(usage(
                "eval needs either --scene or both --preds and --gts directories",
            ))
        }
    };

    println!(
        "images {}  tp {}  fp {}  fn {}",
        report.overall.images, report.overall.counts.tp, report.overall.counts.fp,
        report.overall.counts.fn_
    );
    println!(
        "precision {:.6}  recall {:.6}  f1 {:.6}",
        report.overall.precision, report.overall.recall, report.overall.f1
    );
    for (name, bucket) in &report.per_category {
        println!(
            "  {name}: images {}  tp {}  fp {}  fn {}  f1 {:.6}",
            bucket.images, bucket.counts.tp, bucket.counts.fp, bucket.counts.fn_, bucket.f1
        );
    }

    if let Some(path) = &a.out {
        write_json(path, &report).map_err(input)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn eval_scene(path: &Path, layer: Option<usize>, cfg: &EvalConfig) -> Result<EvalReport, Failure> {
    let scene = load_scene(path)?;
    let geo = &scene.geometry;
    let layers = scene
        .predictions
        .as_ref()
        .ok_or_else(|| input(format!("{}: scene stores no predictions", path.display())))?;
    let idx = layer.unwrap_or(layers.len());
    if idx == 0 || idx > layers.len() {
        return Err(usage(format!(
            "--layer {idx} out of range: the scene has {} prediction layers",
            layers.len()
        )));
    }

    let scored: Vec<ScoredLane> = layers[idx - 1]
        .iter()
        .map(|p| ScoredLane {
            score: p.score,
            polyline: polyline_or_empty(p, geo),
        })
        .collect();
    let gt_polys: Vec<LanePolyline> = scene.gts.iter().map(|gt| gt.polyline.clone()).collect();
    let counts = match_image(&scored, &gt_polys, cfg, geo).map_err(internal)?;

    let mut per_category = BTreeMap::new();
    if let Some(cat) = &scene.category {
        per_category.insert(cat.clone(), EvalBucket::new(1, counts));
    }
    Ok(EvalReport {
        matching: "liou".into(),
        liou_threshold: cfg.liou_threshold,
        score_threshold: cfg.score_threshold,
        overall: EvalBucket::new(1, counts),
        per_category,
    })
}

/// A prediction's polyline, or an all-invalid one when its anchor cannot be
/// sampled (degenerate angle): such a prediction can never match and counts
/// as a false positive if kept.
fn polyline_or_empty(p: &Prediction, geo: &GeometryConfig) -> LanePolyline {
    anchor_to_polyline(&p.geometry(), geo).unwrap_or(LanePolyline {
        xs: vec![0.0; geo.num_rows],
        valid: vec![false; geo.num_rows],
    })
}

/// All `.lines.txt` files under `dir`, as paths relative to it, sorted.
fn lines_files(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    fn walk(root: &Path, rel: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for entry in fs::read_dir(root.join(rel))? {
            let entry = entry?;
            let sub = rel.join(entry.file_name());
            if entry.file_type()?.is_dir() {
                walk(root, &sub, out)?;
            } else if sub.to_string_lossy().ends_with(".lines.txt") {
                out.push(sub);
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, Path::new(""), &mut out)
        .map_err(|e| input(format!("{}: {e}", dir.display())))?;
    out.sort();
    Ok(out)
}

fn eval_dirs(
    preds_dir: &Path,
    gts_dir: &Path,
    cfg: &EvalConfig,
    geo: &GeometryConfig,
) -> Result<EvalReport, Failure> {
    let files = lines_files(gts_dir)?;
    if files.is_empty() {
        return Err(input(format!(
            "{}: no .lines.txt files found",
            gts_dir.display()
        )));
    }

    let score_one = |path: &PathBuf| -> Result<(Option<String>, EvalCounts), Failure> {
        let gt_text = fs::read_to_string(gts_dir.join(path))
            .map_err(|e| input(format!("{}: {e}", gts_dir.join(path).display())))?;
        let gts = parse_lines_txt(&gt_text, geo)
            .map_err(|e| input(format!("{}: {e}", gts_dir.join(path).display())))?;
        // A missing prediction file means the model predicted nothing there.
        let pred_path = preds_dir.join(path);
        let preds = if pred_path.exists() {
            let text = fs::read_to_string(&pred_path)
                .map_err(|e| input(format!("{}: {e}", pred_path.display())))?;
            parse_lines_txt(&text, geo)
                .map_err(|e| input(format!("{}: {e}", pred_path.display())))?
        } else {
            Vec::new()
        };
        let scored: Vec<ScoredLane> = preds
            .into_iter()
            .map(|polyline| ScoredLane { score: 1.0, polyline })
            .collect();
        let counts = match_image(&scored, &gts, cfg, geo).map_err(internal)?;
        let category = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .and_then(|p| p.iter().next())
            .map(|c| c.to_string_lossy().into_owned());
        Ok((category, counts))
    };

    let results: Vec<Result<(Option<String>, EvalCounts), Failure>> =
        match std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
            Some(threads) if threads > 0 => rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(internal)?
                .install(|| {
                    use rayon::prelude::*;
                    files.par_iter().map(score_one).collect()
                }),
            _ => {
                use rayon::prelude::*;
                files.par_iter().map(score_one).collect()
            }
        };

    let mut overall = EvalCounts::default();
    let mut by_category: BTreeMap<String, (u64, EvalCounts)> = BTreeMap::new();
    for r in results {
        let (category, counts) = r?;
        overall.add(&counts);
        if let Some(cat) = category {
            let slot = by_category.entry(cat).or_default();
            slot.0 += 1;
            slot.1.add(&counts);
        }
    }
    Ok(EvalReport {
        matching: "liou".into(),
        liou_threshold: cfg.liou_threshold,
        score_threshold: cfg.score_threshold,
        overall: EvalBucket::new(files.len() as u64, overall),
        per_category: by_category
            .into_iter()
            .map(|(name, (images, counts))| (name, EvalBucket::new(images, counts)))
            .collect(),
    })
}

// ---------------------------------------------------------------------------
// bench

fn cmd_bench(a: BenchArgs) -> Result<(), Failure> {
    let geo = GeometryConfig::new(800.0, 320.0, 72, 15.0).map_err(internal)?;
    let spec = SceneSpec {
        seed: a.seed,
        num_lanes: a.gts as usize,
        curvature: (-0.08, 0.08),
        geometry: geo.clone(),
        noise: NoiseSpec::default(),
    };
    let gts = gen_scene(&spec).map_err(internal)?;
    let cfg = OtaConfig::default();

    // Prediction set shaped like a trained model's output: one confident
    // prediction per gt, the rest a fan of mid-score anchors.
    let mut preds = perfect_predictions(&gts, &geo);
    for p in &mut preds {
        p.score = 0.9;
    }
    let fan = initial_anchors(a.anchors.max(gts.len()), geo.num_rows);
    for (i, anchor) in fan.iter().enumerate().skip(preds.len()).take(a.anchors - preds.len().min(a.anchors)) {
        preds.push(Prediction {
            score: 0.3 + 0.4 * (i as f64 / fan.len() as f64),
            start_x: anchor.start_x,
            start_y: anchor.start_y,
            theta: anchor.theta,
            length: anchor.length,
            offsets: anchor.offsets.clone(),
            layer: 1,
            anchor_index: i,
        });
    }
    preds.truncate(a.anchors);
    let traces: Vec<LayerTrace> = (1..=a.layers.max(1))
        .map(|l| LayerTrace::from_predictions(l, preds.clone()))
        .collect();
    let num_layers = traces.len();

    let mut phases: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut record = |name: &'static str, ms: f64| phases.entry(name).or_default().push(ms);

    for _ in 0..a.iters {
        let t0 = Instant::now();
        let cost = ota_cost_matrix(&preds, &gts, &cfg, &geo).map_err(internal)?;
        let liou = liou_matrix(&preds, &gts, &geo).map_err(internal)?;
        record("cost_matrix", ms_since(t0));

        let t0 = Instant::now();
        let sets = ota_assign(&cost, &liou, &cfg).map_err(internal)?;
        record("ota", ms_since(t0));

        // Fully-positive selection: the owner-restricted submatrix matching.
        let t0 = Instant::now();
        let mut members: Vec<(usize, usize)> = Vec::new();
        for (j, set) in sets.iter().enumerate() {
            for &anchor in set {
                members.push((anchor, j));
            }
        }
        members.sort_unstable();
        let barred = 1e9;
        let sub: Vec<Vec<f64>> = members
            .iter()
            .map(|&(anchor, owner)| {
                (0..gts.len())
                    .map(|j| if j == owner { cost[anchor][j] } else { barred })
                    .collect()
            })
            .collect();
        let matched = hungarian(&sub).map_err(internal)?;
        record("hungarian", ms_since(t0));

        let t0 = Instant::now();
        let s_list: Vec<usize> = members.iter().map(|&(anchor, _)| anchor).collect();
        let fully: Vec<bool> = {
            let mut f = vec![false; members.len()];
            for &(si, j) in &matched.pairs {
                if members[si].1 == j {
                    f[si] = true;
                }
            }
            f
        };
        for r in 1..num_layers {
            layer_soft_labels(r, num_layers, &traces[r - 1].predictions, &s_list, &fully)
                .map_err(internal)?;
        }
        record("soft_labels", ms_since(t0));

        let t0 = Instant::now();
        one_to_several(&traces, &gts, &cfg, &geo).map_err(internal)?;
        record("full_pass", ms_since(t0));
    }

    println!(
        "assignment bench: {} anchors x {} gts x {} layers, {} iteration(s)",
        a.anchors,
        gts.len(),
        num_layers,
        a.iters
    );
    println!("{:<12} {:>10} {:>10} {:>10}", "phase", "median_ms", "min_ms", "max_ms");
    let mut stats = serde_json::Map::new();
    for (name, samples) in &phases {
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        let min = sorted[0];
        let max = sorted[sorted.len() - 1];
        println!("{name:<12} {median:>10.3} {min:>10.3} {max:>10.3}");
        stats.insert(
            name.to_string(),
            serde_json::json!({"median_ms": median, "min_ms": min, "max_ms": max}),
        );
    }
    let report = serde_json::json!({
        "anchors": a.anchors,
        "gts": gts.len(),
        "layers": num_layers,
        "iters": a.iters,
        "phases": stats,
    });
    match &a.out {
        Some(path) => {
            let mut text = serde_json::to_string_pretty(&report).map_err(internal)?;
            text.push('\n');
            fs::write(path, text).map_err(input)?;
            println!("wrote {}", path.display());
        }
        None => println!("{}", serde_json::to_string(&report).map_err(internal)?),
    }
    Ok(())
}

fn ms_since(t0: Instant) -> f64 {
    t0.elapsed().as_secs_f64() * 1e3
}

// ---------------------------------------------------------------------------
// shared input plumbing

fn load_scene(path: &Path) -> Result<SceneFile, Failure> {
    let scene: SceneFile = read_json(path).map_err(|e| input(format!("{}: {e}", path.display())))?;
    scene
        .validate()
        .map_err(|e| input(format!("{}: {e}", path.display())))?;
    Ok(scene)
}

/// Per-layer predictions for assignment/loss: an explicit trace file wins,
/// otherwise the scene's stored predictions.
fn load_traces(scene: &SceneFile, trace_path: Option<&Path>) -> Result<Vec<LayerTrace>, Failure> {
    match trace_path {
        Some(path) => {
            let trace: TraceFile =
                read_json(path).map_err(|e| input(format!("{}: {e}", path.display())))?;
            trace
                .validate()
                .map_err(|e| input(format!("{}: {e}", path.display())))?;
            if trace.num_rows != scene.geometry.num_rows {
                return Err(input(format!(
                    "{}: trace has {} rows but the scene has {}",
                    path.display(),
                    trace.num_rows,
                    scene.geometry.num_rows
                )));
            }
            Ok(trace.layers)
        }
        None => {
            let layers = scene.predictions.as_ref().ok_or_else(|| {
                input("scene stores no predictions; pass --trace or regenerate with --preds")
            })?;
            Ok(layers
                .iter()
                .enumerate()
                .map(|(i, preds)| LayerTrace::from_predictions(i + 1, preds.clone()))
                .collect())
        }
    }
}
