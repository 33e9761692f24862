//! Command-line surface: render synthetic datasets, warp frames, recover
//! depth and motion for a pair, run the gradient-check suite, and evaluate
//! predictions against ground truth.
//!
//! Exit codes: 0 success, 2 validation error, 3 I/O error, 4 numerical
//! failure (divergence or a failed gradient check).
//!
//! When `--out` is omitted, the `PANO_DEPTH_OUT` environment variable
//! supplies the output directory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pano_depth::checks::full_suite;
use pano_depth::error::PanoError;
use pano_depth::frame::DepthMap;
use pano_depth::io;
use pano_depth::losses::LossWeights;
use pano_depth::metrics::eval_protocol;
use pano_depth::optim::{optimize_pair, FlowSchedule, OptimConfig};
use pano_depth::scene::{export_dataset, SceneSpec, TextureKind, Trajectory};
use pano_depth::sphere::PixelGrid;
use pano_depth::tensor::Mask;
use pano_depth::warp::{synthesize_image, COVERAGE_EPS};

#[derive(Parser)]
#[command(
    name = "pano-depth",
    about = "Equirectangular depth toolkit: analytic box-room rendering, differentiable spherical warping, and per-pixel depth/motion recovery",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a box-room trajectory to PNG frames, PFM depths, and motions.json
    Render(RenderArgs),
    /// Warp a frame to a new viewpoint through its depth map and a motion
    Warp(WarpArgs),
    /// Recover per-pixel depth and camera motion for a frame pair
    Optimize(OptimizeArgs),
    /// Verify tape gradients against central finite differences
    Gradcheck(GradcheckArgs),
    /// Depth error statistics of a prediction against ground truth
    Eval(EvalArgs),
}

#[derive(Args)]
struct RenderArgs {
    /// Panorama height in pixels (width is 2×height); must be even
    #[arg(long = "h", value_name = "PIXELS")]
    height: usize,
    /// Number of frames to render along the forward track
    #[arg(long, default_value_t = 3)]
    steps: usize,
    /// Texture / trajectory seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; falls back to $PANO_DEPTH_OUT
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Room half-extents in meters, comma separated
    #[arg(long, value_name = "X,Y,Z", default_value = "1.0,1.0,1.0")]
    extents: String,
    /// Wall texture: smooth | checker | uniform
    #[arg(long, default_value = "smooth")]
    texture: String,
    /// Checkerboard period in face units (checker texture only)
    #[arg(long, default_value_t = 0.25)]
    period: f64,
    /// Forward step length in meters
    #[arg(long, default_value_t = 0.2)]
    step_len: f64,
}

#[derive(Args)]
struct WarpArgs {
    /// Source frame (PNG)
    #[arg(long, value_name = "FILE")]
    image: PathBuf,
    /// Source depth map (PFM)
    #[arg(long, value_name = "FILE")]
    depth: PathBuf,
    /// Camera motion (JSON object or array)
    #[arg(long, value_name = "FILE")]
    motion: PathBuf,
    /// Index into a motion array
    #[arg(long, default_value_t = 0)]
    motion_index: usize,
    /// Reference target frame for a residual heat map (PNG)
    #[arg(long, value_name = "FILE")]
    reference: Option<PathBuf>,
    /// Output directory; falls back to $PANO_DEPTH_OUT
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OptimizeArgs {
    /// First frame (PNG)
    #[arg(long, value_name = "FILE")]
    image: PathBuf,
    /// Second frame (PNG)
    #[arg(long, value_name = "FILE")]
    image_prime: PathBuf,
    /// Ground-truth depth for the first frame (PFM); required by the
    /// supervised and joint flows
    #[arg(long, value_name = "FILE")]
    gt: Option<PathBuf>,
    /// Loss schedule: self-only | supervised-only | joint-random
    #[arg(long, default_value = "self-only")]
    flow: String,
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// Seed for the joint-random flow coin
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Polar crop in degrees applied to the losses
    #[arg(long, default_value_t = 45.0)]
    crop: f64,
    /// Image-consistency weight λ_I
    #[arg(long, default_value_t = 0.3)]
    lambda_i: f64,
    /// Depth-consistency weight λ_D
    #[arg(long, default_value_t = 0.15)]
    lambda_d: f64,
    /// L1 weight α inside the image consistency loss
    #[arg(long, default_value_t = 0.15)]
    alpha: f64,
    /// Coarse-to-fine warm-up levels (1 disables)
    #[arg(long, default_value_t = 1)]
    pyramid: usize,
    /// Initial depth estimate (PFM) for the first frame
    #[arg(long, value_name = "FILE")]
    init_depth: Option<PathBuf>,
    /// Output directory; falls back to $PANO_DEPTH_OUT
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Check a single operator or composite (e.g. bilinear_splat, l_total)
    #[arg(long)]
    op: Option<String>,
    #[arg(long, default_value_t = 1234)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted depth (PFM)
    #[arg(long, value_name = "FILE")]
    pred: PathBuf,
    /// Ground-truth depth (PFM); zeros mark holes
    #[arg(long, value_name = "FILE")]
    gt: PathBuf,
    /// Also write the report as JSON
    #[arg(long, value_name = "FILE")]
    json: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Render(args) => cmd_render(args),
        Command::Warp(args) => cmd_warp(args),
        Command::Optimize(args) => cmd_optimize(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Eval(args) => cmd_eval(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &PanoError) -> u8 {
    match e {
        PanoError::Io { .. } | PanoError::Format { .. } => 3,
        PanoError::Numerical(_) | PanoError::Diverged { .. } => 4,
        _ => 2,
    }
}

fn parse_extents(s: &str) -> Result<[f64; 3], PanoError> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| PanoError::invalid(format!("cannot parse extents {s:?}")))?;
    if parts.len() != 3 {
        return Err(PanoError::invalid("extents need exactly three components"));
    }
    Ok([parts[0], parts[1], parts[2]])
}

fn out_dir(flag: Option<PathBuf>) -> Result<PathBuf, PanoError> {
    if let Some(dir) = flag {
        return Ok(dir);
    }
    match std::env::var_os("PANO_DEPTH_OUT") {
        Some(dir) if !dir.is_empty() => Ok(PathBuf::from(dir)),
        _ => Err(PanoError::invalid(
            "no output directory: pass --out or set PANO_DEPTH_OUT",
        )),
    }
}

fn even_grid(height: usize) -> Result<PixelGrid, PanoError> {
    if height % 2 != 0 {
        return Err(PanoError::invalid(format!(
            "height must be even so the polar crops stay on whole rows, got {height}"
        )));
    }
    PixelGrid::new(height)
}

fn cmd_render(args: RenderArgs) -> Result<ExitCode, PanoError> {
    let grid = even_grid(args.height)?;
    let texture = match args.texture.as_str() {
        "smooth" => TextureKind::SmoothNoise,
        "checker" => TextureKind::Checkerboard {
            period: args.period,
        },
        "uniform" => TextureKind::Uniform,
        other => {
            return Err(PanoError::invalid(format!(
                "unknown texture {other:?} (smooth | checker | uniform)"
            )))
        }
    };
    if args.steps == 0 {
        return Err(PanoError::invalid("need at least one frame"));
    }
    let extents = parse_extents(&args.extents)?;
    let scene = SceneSpec::new(extents, texture, args.seed)?;
    // start the forward track left of center so it stays inside the margin
    let hops = args.steps - 1;
    let total = args.step_len * hops as f64;
    let start = [-total / 2.0, 0.0, 0.0];
    let trajectory = Trajectory::straight(&scene, start, args.step_len, hops)?;
    let out = out_dir(args.out)?;
    let written = export_dataset(&scene, &trajectory, &grid, &out)?;
    for path in &written {
        println!("wrote {}", path.display());
    }
    println!("{} files", written.len());
    Ok(ExitCode::SUCCESS)
}

fn load_depth(path: &Path) -> Result<DepthMap, PanoError> {
    DepthMap::with_holes(io::load_pfm(path)?)
}

fn cmd_warp(args: WarpArgs) -> Result<ExitCode, PanoError> {
    let frame = io::load_frame_png(&args.image)?;
    let depth = DepthMap::new(io::load_pfm(&args.depth)?)?;
    let motion = io::load_motion_json(&args.motion, args.motion_index)?;
    let (syn, weights) = synthesize_image(&frame, &depth, &motion)?;

    let out = out_dir(args.out)?;
    std::fs::create_dir_all(&out).map_err(|e| PanoError::io(out.display().to_string(), e))?;
    let out_png = out.join("synthesized.png");
    io::save_frame_png(&out_png, &syn)?;
    println!("wrote {}", out_png.display());
    let out_mask = out.join("coverage.png");
    io::save_map_png(&out_mask, &weights)?;
    println!("wrote {}", out_mask.display());

    if let Some(reference) = &args.reference {
        let target = io::load_frame_png(reference)?;
        let (c, h, w) = target.tensor().chw()?;
        let (_, sh, sw) = syn.tensor().chw()?;
        if (h, w) != (sh, sw) {
            return Err(PanoError::invalid(
                "reference frame dimensions do not match the synthesis",
            ));
        }
        let mask = Mask::from_weights(&weights, COVERAGE_EPS)?;
        let mut residual = vec![0.0; h * w];
        let mut se = 0.0;
        let mut count = 0usize;
        for y in 0..h {
            for x in 0..w {
                if !mask.get(y, x) {
                    continue;
                }
                let mut px = 0.0;
                for ch in 0..c {
                    let r = syn.tensor().at(ch, y, x) - target.tensor().at(ch, y, x);
                    px += r * r;
                    se += r * r;
                    count += 1;
                }
                residual[y * w + x] = (px / c as f64).sqrt();
            }
        }
        let heat = pano_depth::tensor::Tensor::new(vec![1, h, w], residual)?;
        let out_res = out.join("residual.png");
        io::save_map_png(&out_res, &heat)?;
        println!("wrote {}", out_res.display());
        println!("rmse={}", (se / count as f64).sqrt());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_optimize(args: OptimizeArgs) -> Result<ExitCode, PanoError> {
    let v = io::load_frame_png(&args.image)?;
    let v_prime = io::load_frame_png(&args.image_prime)?;
    let flow: FlowSchedule = args.flow.parse()?;
    let gt = match &args.gt {
        Some(path) => Some(load_depth(path)?),
        None => None,
    };
    let config = OptimConfig {
        iterations: args.iterations,
        learning_rate: args.lr,
        weights: LossWeights {
            lambda_i: args.lambda_i,
            lambda_d: args.lambda_d,
            alpha: args.alpha,
        },
        crop_degrees: args.crop,
        flow,
        seed: args.seed,
        pyramid_levels: args.pyramid,
        init_depth: match &args.init_depth {
            Some(path) => Some(DepthMap::new(io::load_pfm(path)?)?),
            None => None,
        },
        ..Default::default()
    };

    let out = out_dir(args.out)?;
    std::fs::create_dir_all(&out).map_err(|e| PanoError::io(out.display().to_string(), e))?;

    let result = match optimize_pair(&v, &v_prime, &config, gt.as_ref()) {
        Ok(r) => r,
        Err(PanoError::Diverged { iteration, trace }) => {
            // keep the partial trace on disk for inspection, then fail
            let trace_path = out.join("trace.jsonl");
            let mut writer = io::JsonLinesWriter::create(&trace_path)?;
            for record in &trace.records {
                writer.write(record)?;
            }
            writer.finish()?;
            return Err(PanoError::Diverged { iteration, trace });
        }
        Err(e) => return Err(e),
    };

    let depth_path = out.join("depth.pfm");
    io::save_pfm(&depth_path, result.depth.tensor())?;
    println!("wrote {}", depth_path.display());
    let vis_path = out.join("depth_vis.png");
    io::save_depth_vis_png(&vis_path, result.depth.tensor())?;
    println!("wrote {}", vis_path.display());
    let motion_path = out.join("motion.json");
    io::save_motions_json(&motion_path, &[result.motion_fwd, result.motion_bwd])?;
    println!("wrote {}", motion_path.display());
    let trace_path = out.join("trace.jsonl");
    let mut writer = io::JsonLinesWriter::create(&trace_path)?;
    for record in &result.trace.records {
        writer.write(record)?;
    }
    writer.finish()?;
    println!("wrote {}", trace_path.display());

    println!(
        "final_total={}",
        result.trace.last_total().unwrap_or(f64::NAN)
    );
    println!(
        "motion_fwd dv=[{},{},{}] dr_x={}",
        result.motion_fwd.dv[0],
        result.motion_fwd.dv[1],
        result.motion_fwd.dv[2],
        result.motion_fwd.dr_x
    );
    if let Some(gt) = &gt {
        let report = eval_protocol(result.depth.tensor(), gt.tensor())?;
        let summary_path = out.join("summary.json");
        let body = serde_json::to_string_pretty(&report).map_err(|e| PanoError::Format {
            path: summary_path.display().to_string(),
            message: e.to_string(),
        })?;
        std::fs::write(&summary_path, body)
            .map_err(|e| PanoError::io(summary_path.display().to_string(), e))?;
        println!("wrote {}", summary_path.display());
        println!("{}", report.to_key_values());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode, PanoError> {
    let checks = full_suite(args.seed, args.op.as_deref())?;
    let mut all_passed = true;
    for check in &checks {
        println!(
            "{} {} (max rel err {:.3e})",
            if check.passed { "pass" } else { "FAIL" },
            check.name,
            check.max_rel_err
        );
        all_passed &= check.passed;
    }
    if all_passed {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(PanoError::Numerical(
            "gradient checks exceeded the 1e-4 tolerance".to_string(),
        ))
    }
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode, PanoError> {
    let pred = io::load_pfm(&args.pred)?;
    let gt = io::load_pfm(&args.gt)?;
    let report = eval_protocol(&pred, &gt)?;
    println!("{}", report.to_key_values());
    if let Some(json) = &args.json {
        let body = serde_json::to_string_pretty(&report).map_err(|e| PanoError::Format {
            path: json.display().to_string(),
            message: e.to_string(),
        })?;
        std::fs::write(json, body).map_err(|e| PanoError::io(json.display().to_string(), e))?;
        println!("wrote {}", json.display());
    }
    Ok(ExitCode::SUCCESS)
}
