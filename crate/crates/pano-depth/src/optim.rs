//! Desk-scale joint optimization: recover per-pixel depth and camera motion
//! from a frame pair by gradient descent on the full objective.
//!
//! The depth network is replaced by one latent value per pixel (realized
//! positive through `exp`, so no iterate can produce a non-positive depth),
//! and the pose network by four scalars per direction. Every step rebuilds
//! the autodiff tape for the scheduled flow, either self-supervised (image,
//! depth and pose consistency) or supervised (pixel and gradient losses
//! after robust adjustment and scale-shift alignment), evaluates it on the
//! fov_y-cropped region, backpropagates, and applies an Adam update to the
//! parameters that received gradients.

use serde::{Deserialize, Serialize};

use crate::autodiff::{gather_forward, Gradients, Tape, Var};
use crate::error::{PanoError, Result};
use crate::frame::{DepthMap, EquirectFrame};
use crate::losses::{
    align_scale_shift, depth_consistency_on_tape, gradient_loss_on_tape,
    image_consistency_on_tape, pixel_loss_on_tape, pose_consistency_on_tape, LossWeights,
};
use crate::sphere::PixelGrid;
use crate::tensor::{Mask, Tensor};
use crate::util::SplitMix64;
use crate::warp::{reproject_on_tape, splat_on_tape, CameraMotion, MotionVars};

/// Clamp window standing in for the open interval (0, 1) during robust
/// adjustment.
const UNIT_OPEN_LO: f64 = 1e-6;
const UNIT_OPEN_HI: f64 = 1.0 - 1e-6;

/// Which loss flow runs at each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowSchedule {
    SelfOnly,
    SupervisedOnly,
    /// A fair per-step coin picks one of the two flows.
    JointRandom,
}

impl std::str::FromStr for FlowSchedule {
    type Err = PanoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self-only" => Ok(FlowSchedule::SelfOnly),
            "supervised-only" => Ok(FlowSchedule::SupervisedOnly),
            "joint-random" => Ok(FlowSchedule::JointRandom),
            other => Err(PanoError::invalid(format!(
                "unknown flow {other:?} (self-only | supervised-only | joint-random)"
            ))),
        }
    }
}

impl std::fmt::Display for FlowSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FlowSchedule::SelfOnly => "self-only",
            FlowSchedule::SupervisedOnly => "supervised-only",
            FlowSchedule::JointRandom => "joint-random",
        })
    }
}

/// How the per-pixel latent realizes a positive depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DepthParameterization {
    /// ρ = exp(u)
    #[default]
    Log,
    /// ρ = ln(1 + exp(u)), flatter far from zero
    Softplus,
}

/// Per-pixel latent depth.
#[derive(Debug, Clone)]
pub struct DepthParam {
    latent: Tensor,
    parameterization: DepthParameterization,
}

impl DepthParam {
    /// Latent initialized so every pixel realizes ρ = 1.
    pub fn unit(grid: &PixelGrid, parameterization: DepthParameterization) -> Self {
        let u0 = match parameterization {
            DepthParameterization::Log => 0.0,
            DepthParameterization::Softplus => (std::f64::consts::E - 1.0f64).ln(),
        };
        DepthParam {
            latent: Tensor::full(vec![1, grid.height(), grid.width()], u0),
            parameterization,
        }
    }

    /// Latent whose realization equals the given depth map.
    pub fn from_depth(depth: &DepthMap, parameterization: DepthParameterization) -> Self {
        let latent = match parameterization {
            DepthParameterization::Log => depth.tensor().map(|d| d.ln()),
            DepthParameterization::Softplus => depth.tensor().map(|d| {
                // inverse softplus; exact for the realized range
                if d > 30.0 {
                    d
                } else {
                    (d.exp() - 1.0).ln()
                }
            }),
        };
        DepthParam {
            latent,
            parameterization,
        }
    }

    pub fn realize(&self) -> DepthMap {
        let t = match self.parameterization {
            DepthParameterization::Log => self.latent.map(f64::exp),
            DepthParameterization::Softplus => self.latent.map(|u| {
                if u > 30.0 {
                    u
                } else {
                    u.exp().ln_1p()
                }
            }),
        };
        DepthMap::new(t).expect("structural positivity")
    }

    fn realize_on_tape(&self, tape: &mut Tape, latent: Var) -> Result<Var> {
        match self.parameterization {
            DepthParameterization::Log => tape.exp(latent),
            DepthParameterization::Softplus => {
                let e = tape.exp(latent)?;
                let one = tape.scalar(1.0);
                let s = tape.add(e, one)?;
                tape.log(s)
            }
        }
    }
}

/// Optimization configuration; defaults follow the training recipe with the
/// learning rate raised to 0.01, which suits per-pixel latents rather than
/// network weights.
#[derive(Debug, Clone)]
pub struct OptimConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Adam first/second moment decay.
    pub betas: (f64, f64),
    pub weights: LossWeights,
    pub parameterization: DepthParameterization,
    /// Degrees removed from each polar cap when evaluating losses.
    pub crop_degrees: f64,
    pub flow: FlowSchedule,
    /// Seeds the joint-random flow coin.
    pub seed: u64,
    /// Coarse-to-fine levels. With `n > 1`, the first third of the
    /// iteration budget runs self-supervised warm-up steps at 2×-pooled
    /// resolutions (coarsest first), pulling large pixel flows into the
    /// bilinear basin before full-resolution optimization. 1 disables it.
    pub pyramid_levels: usize,
    pub init_depth: Option<DepthMap>,
    pub init_depth_prime: Option<DepthMap>,
    pub init_motion_fwd: Option<CameraMotion>,
    pub init_motion_bwd: Option<CameraMotion>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            iterations: 2000,
            learning_rate: 0.01,
            betas: (0.9, 0.999),
            weights: LossWeights::default(),
            parameterization: DepthParameterization::Log,
            crop_degrees: 45.0,
            flow: FlowSchedule::SelfOnly,
            seed: 0,
            pyramid_levels: 1,
            init_depth: None,
            init_depth_prime: None,
            init_motion_fwd: None,
            init_motion_bwd: None,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(PanoError::invalid("iterations must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(PanoError::invalid("learning rate must be positive"));
        }
        for b in [self.betas.0, self.betas.1] {
            if !(0.0..1.0).contains(&b) {
                return Err(PanoError::invalid("moment decays must lie in [0, 1)"));
            }
        }
        if !(self.crop_degrees >= 0.0 && 2.0 * self.crop_degrees < 180.0) {
            return Err(PanoError::invalid(
                "crop degrees must satisfy 0 ≤ d and 2d < 180",
            ));
        }
        if self.pyramid_levels == 0 {
            return Err(PanoError::invalid("pyramid needs at least one level"));
        }
        self.weights.validate()
    }
}

/// One step of the loss trace; absent components were not part of the
/// scheduled flow. `level` is the pyramid level (0 = full resolution).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub level: usize,
    pub flow: String,
    pub l_i: Option<f64>,
    pub l_d: Option<f64>,
    pub l_p: Option<f64>,
    pub l_pix: Option<f64>,
    pub l_grad: Option<f64>,
    pub total: f64,
}

/// Loss history of an optimization run.
#[derive(Debug, Clone, Default, Serialize)]
pub struct LossTrace {
    pub records: Vec<TraceRecord>,
}

impl LossTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last_total(&self) -> Option<f64> {
        self.records.last().map(|r| r.total)
    }
}

/// Outcome of [`optimize_pair`].
#[derive(Debug, Clone)]
pub struct OptimResult {
    pub depth: DepthMap,
    pub depth_prime: DepthMap,
    pub motion_fwd: CameraMotion,
    pub motion_bwd: CameraMotion,
    pub trace: LossTrace,
}

/// Normalize ground truth into (0, 1] by its maximum and clamp the
/// prediction into the open unit interval; both then feed scale-shift
/// alignment.
pub fn robust_adjust(pred: &DepthMap, gt: &DepthMap) -> Result<(DepthMap, DepthMap)> {
    let max = gt.tensor().data().iter().cloned().fold(0.0f64, f64::max);
    if !(max > 0.0) {
        return Err(PanoError::invalid(
            "ground truth maximum must be positive for robust adjustment",
        ));
    }
    let gt_n = DepthMap::with_holes(gt.tensor().map(|g| g / max))?;
    let pred_c = DepthMap::new(pred.tensor().map(|p| p.clamp(UNIT_OPEN_LO, UNIT_OPEN_HI)))?;
    Ok((pred_c, gt_n))
}

/// Rows kept by a symmetric polar crop of `degrees` per cap: those whose
/// center colatitude lies strictly inside (deg, 180° − deg).
pub(crate) fn fovy_band(height: usize, degrees: f64) -> (usize, usize) {
    let lo_frac = degrees / 180.0;
    let mut lo = height;
    let mut hi = 0;
    for y in 0..height {
        let f = (y as f64 + 0.5) / height as f64;
        if f > lo_frac && f < 1.0 - lo_frac {
            lo = lo.min(y);
            hi = hi.max(y + 1);
        }
    }
    (lo, hi)
}

/// Remove the rows within `degrees` of each pole; 45° keeps the middle half.
pub fn crop_fovy(map: &Tensor, degrees: f64) -> Result<Tensor> {
    if !(degrees >= 0.0 && 2.0 * degrees < 180.0) {
        return Err(PanoError::invalid(
            "crop degrees must satisfy 0 ≤ d and 2d < 180",
        ));
    }
    let (_, h, _) = map.chw()?;
    let (lo, hi) = fovy_band(h, degrees);
    if lo >= hi {
        return Err(PanoError::DegenerateCoverage);
    }
    map.crop_rows(lo, hi)
}

/// Mask selecting the rows that survive a `degrees` polar crop.
pub(crate) fn crop_band_mask(h: usize, w: usize, degrees: f64) -> Mask {
    let (lo, hi) = fovy_band(h, degrees);
    let mut m = Mask::new(h, w, vec![false; h * w]).expect("dims");
    for y in lo..hi.min(h) {
        for x in 0..w {
            m.set(y, x, true);
        }
    }
    m
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn step(&mut self, param: &mut [f64], grad: &[f64], lr: f64, betas: (f64, f64)) {
        const EPS: f64 = 1e-8;
        self.t += 1;
        let (b1, b2) = betas;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..param.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            param[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum StepFlow {
    SelfSup,
    Supervised,
}

/// Non-overlapping 2×2 mean of an image-shaped tensor.
fn pool2(t: &Tensor) -> Result<Tensor> {
    let (c, h, w) = t.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(PanoError::invalid("pooling needs even dimensions"));
    }
    let (nh, nw) = (h / 2, w / 2);
    let mut out = vec![0.0; c * nh * nw];
    for ch in 0..c {
        for y in 0..nh {
            for x in 0..nw {
                let i0 = (ch * h + 2 * y) * w + 2 * x;
                out[(ch * nh + y) * nw + x] =
                    0.25 * (t.data()[i0] + t.data()[i0 + 1] + t.data()[i0 + w] + t.data()[i0 + w + 1]);
            }
        }
    }
    Tensor::new(vec![c, nh, nw], out)
}

/// 2× bilinear upsample with the panorama topology (columns wrap, rows
/// clamp), cell-centered.
fn upsample2(t: &Tensor) -> Result<Tensor> {
    let (c, h, w) = t.chw()?;
    let (nh, nw) = (2 * h, 2 * w);
    let mut xs = vec![0.0; nh * nw];
    let mut ys = vec![0.0; nh * nw];
    for y in 0..nh {
        for x in 0..nw {
            xs[y * nw + x] = (x as f64 + 0.5) / 2.0 - 0.5;
            ys[y * nw + x] = (y as f64 + 0.5) / 2.0 - 0.5;
        }
    }
    let out = gather_forward(t.data(), c, h, w, &xs, &ys);
    Tensor::new(vec![c, nh, nw], out)
}

struct LevelState {
    depth: DepthParam,
    depth_prime: DepthParam,
    motion_fwd: CameraMotion,
    motion_bwd: CameraMotion,
}

struct LevelIo<'a> {
    v: &'a Tensor,
    v_prime: &'a Tensor,
    grid: PixelGrid,
    /// Normalized gt and validity mask; None runs self-supervised only.
    gt: Option<&'a (Tensor, Mask)>,
    level: usize,
}

#[allow(clippy::too_many_arguments)]
fn run_level(
    io: &LevelIo,
    state: &mut LevelState,
    config: &OptimConfig,
    schedule: FlowSchedule,
    iterations: usize,
    coin: &mut SplitMix64,
    trace: &mut LossTrace,
) -> Result<()> {
    let grid = io.grid;
    let (h, w) = (grid.height(), grid.width());
    let band = crop_band_mask(h, w, config.crop_degrees);
    if band.count() == 0 {
        return Err(PanoError::DegenerateCoverage);
    }

    let n = h * w;
    let mut adam_u = AdamState::new(n);
    let mut adam_up = AdamState::new(n);
    let mut adam_fwd: Vec<AdamState> = (0..4).map(|_| AdamState::new(1)).collect();
    let mut adam_bwd: Vec<AdamState> = (0..4).map(|_| AdamState::new(1)).collect();

    let gt_banded = match io.gt {
        Some((gt_n, valid)) => Some((gt_n, valid.and(&band)?)),
        None => None,
    };

    for _ in 0..iterations {
        let iteration = trace.len();
        // guard against runaway parameters before they hit exp()
        let params_ok = state
            .depth
            .latent
            .data()
            .iter()
            .chain(state.depth_prime.latent.data())
            .all(|v| v.is_finite() && v.abs() < 500.0)
            && state.motion_fwd.components().iter().all(|v| v.is_finite())
            && state.motion_bwd.components().iter().all(|v| v.is_finite());
        if !params_ok {
            return Err(PanoError::Diverged {
                iteration,
                trace: std::mem::take(trace),
            });
        }

        let flow = match schedule {
            FlowSchedule::SelfOnly => StepFlow::SelfSup,
            FlowSchedule::SupervisedOnly => StepFlow::Supervised,
            FlowSchedule::JointRandom => {
                if coin.next_bool() {
                    StepFlow::SelfSup
                } else {
                    StepFlow::Supervised
                }
            }
        };

        let mut tape = Tape::new();
        let u = tape.leaf(state.depth.latent.clone(), true);
        let up = tape.leaf(state.depth_prime.latent.clone(), true);
        let fwd = MotionVars::leaves(&mut tape, &state.motion_fwd, true);
        let bwd = MotionVars::leaves(&mut tape, &state.motion_bwd, true);
        let d = state.depth.realize_on_tape(&mut tape, u)?;
        let dp = state.depth_prime.realize_on_tape(&mut tape, up)?;

        let mut record = TraceRecord {
            iteration,
            level: io.level,
            flow: match flow {
                StepFlow::SelfSup => "self".to_string(),
                StepFlow::Supervised => "supervised".to_string(),
            },
            l_i: None,
            l_d: None,
            l_p: None,
            l_pix: None,
            l_grad: None,
            total: 0.0,
        };

        let loss = match flow {
            StepFlow::SelfSup => {
                let v_c = tape.constant(io.v.clone());
                let vp_c = tape.constant(io.v_prime.clone());

                let field_f = reproject_on_tape(&mut tape, d, &grid, &fwd)?;
                let (vp_syn, _, cov_f) = splat_on_tape(&mut tape, v_c, &field_f, &grid)?;
                let (dp_syn, _, _) = splat_on_tape(&mut tape, field_f.rho, &field_f, &grid)?;

                let field_b = reproject_on_tape(&mut tape, dp, &grid, &bwd)?;
                let (v_syn, _, cov_b) = splat_on_tape(&mut tape, vp_c, &field_b, &grid)?;
                let (d_syn, _, _) = splat_on_tape(&mut tape, field_b.rho, &field_b, &grid)?;

                let mask = cov_f.and(&cov_b)?.and(&band)?;
                let l_i = image_consistency_on_tape(
                    &mut tape,
                    v_c,
                    v_syn,
                    vp_c,
                    vp_syn,
                    &mask,
                    config.weights.alpha,
                )?;
                let l_d = depth_consistency_on_tape(&mut tape, d, d_syn, dp, dp_syn, &mask)?;
                let l_p = pose_consistency_on_tape(&mut tape, &fwd, &bwd)?;

                record.l_i = Some(tape.value(l_i).data()[0]);
                record.l_d = Some(tape.value(l_d).data()[0]);
                record.l_p = Some(tape.value(l_p).data()[0]);

                let wi = tape.scale_add(l_i, config.weights.lambda_i, 0.0)?;
                let wd = tape.scale_add(l_d, config.weights.lambda_d, 0.0)?;
                let s = tape.add(wi, wd)?;
                tape.add(s, l_p)?
            }
            StepFlow::Supervised => {
                let (gt_n, valid) = gt_banded.as_ref().expect("gt checked by caller");
                let pred_c = tape.clamp(d, UNIT_OPEN_LO, UNIT_OPEN_HI)?;
                // (s, t) fit on current values; constants during backprop
                let fit = align_scale_shift(tape.value(pred_c), gt_n, valid)?;
                let aligned = tape.scale_add(pred_c, fit.s, fit.t)?;
                let gt_c = tape.constant((*gt_n).clone());
                let l_pix = pixel_loss_on_tape(&mut tape, aligned, gt_c, valid)?;
                let l_grad = gradient_loss_on_tape(&mut tape, aligned, gt_c, valid)?;

                record.l_pix = Some(tape.value(l_pix).data()[0]);
                record.l_grad = Some(tape.value(l_grad).data()[0]);
                tape.add(l_pix, l_grad)?
            }
        };

        let total = tape.value(loss).data()[0];
        record.total = total;
        trace.records.push(record);
        if !total.is_finite() {
            return Err(PanoError::Diverged {
                iteration,
                trace: std::mem::take(trace),
            });
        }

        let grads = tape.backward(loss)?;
        apply(&mut state.depth.latent, u, &grads, &mut adam_u, config);
        apply(
            &mut state.depth_prime.latent,
            up,
            &grads,
            &mut adam_up,
            config,
        );
        apply_motion(&mut state.motion_fwd, &fwd, &grads, &mut adam_fwd, config);
        apply_motion(&mut state.motion_bwd, &bwd, &grads, &mut adam_bwd, config);
    }
    Ok(())
}

/// Recover depth for both frames and the two directed motions.
///
/// `gt_depth` is the ground truth for the first frame and is required by the
/// supervised and joint flows; zeros in it are treated as holes. Aborts with
/// [`PanoError::Diverged`] when the loss or any parameter stops being finite.
pub fn optimize_pair(
    v: &EquirectFrame,
    v_prime: &EquirectFrame,
    config: &OptimConfig,
    gt_depth: Option<&DepthMap>,
) -> Result<OptimResult> {
    config.validate()?;
    let grid = v.grid();
    if v_prime.grid() != grid {
        return Err(PanoError::ShapeMismatch {
            expected: format!("{}×{}", grid.height(), grid.width()),
            got: format!("{}×{}", v_prime.grid().height(), v_prime.grid().width()),
        });
    }
    if matches!(
        config.flow,
        FlowSchedule::SupervisedOnly | FlowSchedule::JointRandom
    ) && gt_depth.is_none()
    {
        return Err(PanoError::invalid(
            "supervised and joint flows require ground-truth depth",
        ));
    }
    if let Some(gt) = gt_depth {
        if gt.grid() != grid {
            return Err(PanoError::ShapeMismatch {
                expected: format!("{}×{}", grid.height(), grid.width()),
                got: format!("{}×{}", gt.grid().height(), gt.grid().width()),
            });
        }
    }

    let (h, w) = (grid.height(), grid.width());

    // the self-supervised warm-up runs on pooled frames; the configured flow
    // then runs at full resolution
    let warm_levels = if config.flow == FlowSchedule::SupervisedOnly {
        0
    } else {
        config.pyramid_levels - 1
    };
    if warm_levels > 0 {
        let factor = 1usize << warm_levels;
        if h % factor != 0 || h / factor < 4 {
            return Err(PanoError::invalid(format!(
                "height {h} cannot host {} pyramid levels",
                config.pyramid_levels
            )));
        }
    }

    let mut state = LevelState {
        depth: match &config.init_depth {
            Some(d) => DepthParam::from_depth(d, config.parameterization),
            None => DepthParam::unit(&grid, config.parameterization),
        },
        depth_prime: match &config.init_depth_prime {
            Some(d) => DepthParam::from_depth(d, config.parameterization),
            None => DepthParam::unit(&grid, config.parameterization),
        },
        motion_fwd: config.init_motion_fwd.unwrap_or_else(CameraMotion::zero),
        motion_bwd: config.init_motion_bwd.unwrap_or_else(CameraMotion::zero),
    };

    let gt_normalized = match gt_depth {
        Some(gt) => {
            let max = gt.tensor().data().iter().cloned().fold(0.0f64, f64::max);
            if !(max > 0.0) {
                return Err(PanoError::invalid(
                    "ground truth contains no positive depth",
                ));
            }
            let gt_n = gt.tensor().map(|g| g / max);
            let valid = Mask::new(h, w, gt_n.data().iter().map(|&g| g > 0.0).collect())?;
            Some((gt_n, valid))
        }
        None => None,
    };

    let mut coin = SplitMix64::new(config.seed);
    let mut trace = LossTrace::default();

    if warm_levels > 0 {
        // one third of the budget for the warm-up, split across levels
        let warm_total = config.iterations / 3;
        let per_level = (warm_total / warm_levels).max(1);

        // pooled pyramids, coarsest last
        let mut v_levels = vec![v.tensor().clone()];
        let mut vp_levels = vec![v_prime.tensor().clone()];
        for _ in 0..warm_levels {
            v_levels.push(pool2(v_levels.last().expect("non-empty"))?);
            vp_levels.push(pool2(vp_levels.last().expect("non-empty"))?);
        }

        // pool the initial latents to the coarsest level
        let mut u = state.depth.latent.clone();
        let mut upr = state.depth_prime.latent.clone();
        for _ in 0..warm_levels {
            u = pool2(&u)?;
            upr = pool2(&upr)?;
        }
        state.depth.latent = u;
        state.depth_prime.latent = upr;

        for level in (1..=warm_levels).rev() {
            let grid_l = PixelGrid::new(h >> level)?;
            let io = LevelIo {
                v: &v_levels[level],
                v_prime: &vp_levels[level],
                grid: grid_l,
                gt: None,
                level,
            };
            run_level(
                &io,
                &mut state,
                config,
                FlowSchedule::SelfOnly,
                per_level,
                &mut coin,
                &mut trace,
            )?;
            state.depth.latent = upsample2(&state.depth.latent)?;
            state.depth_prime.latent = upsample2(&state.depth_prime.latent)?;
        }
    }

    let spent = trace.len();
    let remaining = config.iterations.saturating_sub(spent).max(1);
    let io = LevelIo {
        v: v.tensor(),
        v_prime: v_prime.tensor(),
        grid,
        gt: gt_normalized.as_ref(),
        level: 0,
    };
    run_level(
        &io,
        &mut state,
        config,
        config.flow,
        remaining,
        &mut coin,
        &mut trace,
    )?;

    Ok(OptimResult {
        depth: state.depth.realize(),
        depth_prime: state.depth_prime.realize(),
        motion_fwd: state.motion_fwd,
        motion_bwd: state.motion_bwd,
        trace,
    })
}

fn apply(param: &mut Tensor, var: Var, grads: &Gradients, state: &mut AdamState, c: &OptimConfig) {
    if let Some(g) = grads.get(var) {
        state.step(param.data_mut(), g.data(), c.learning_rate, c.betas);
    }
}

fn apply_motion(
    motion: &mut CameraMotion,
    vars: &MotionVars,
    grads: &Gradients,
    states: &mut [AdamState],
    c: &OptimConfig,
) {
    let mut comps = motion.components();
    for (i, var) in vars.vars().into_iter().enumerate() {
        if let Some(g) = grads.get(var) {
            let mut slot = [comps[i]];
            states[i].step(&mut slot, g.data(), c.learning_rate, c.betas);
            comps[i] = slot[0];
        }
    }
    *motion = CameraMotion {
        dv: [comps[0], comps[1], comps[2]],
        dr_x: comps[3],
    };
}
