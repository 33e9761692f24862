//! C ABI over the pano-depth toolkit.
//!
//! Conventions:
//! * Panoramas are row-major `f64` buffers: RGB frames are `3·H·W` with
//!   channel-major layout (`(c·H + y)·W + x`), depth maps `H·W`, and the
//!   width is always twice the height.
//! * Functions return a [`PdStatus`]; on any failure
//!   [`pd_last_error_message`] describes the most recent error of the
//!   calling thread.
//! * Handles returned by `pd_*_new`/`pd_*_load` are opaque and must be
//!   released with the matching `pd_*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use pano_depth::error::PanoError;
use pano_depth::frame::{DepthMap, EquirectFrame};
use pano_depth::losses::{align_scale_shift, LossWeights};
use pano_depth::metrics::{compute_metrics, eval_protocol};
use pano_depth::nlfb::{non_local_forward, FeatureMap, NonLocalWeights};
use pano_depth::optim::{optimize_pair, FlowSchedule, OptimConfig};
use pano_depth::scene::{render, SceneSpec, TextureKind};
use pano_depth::sphere::{PixelGrid, SphericalPoint};
use pano_depth::tensor::{Mask, Tensor};
use pano_depth::warp::{reproject_point, synthesize_depth, synthesize_image, CameraMotion};

/// Status code returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PdStatus {
    Ok = 0,
    ErrNullPointer = 1,
    ErrInvalidInput = 2,
    ErrIo = 3,
    ErrNumerical = 4,
    ErrPanic = 5,
}

/// Wall texture selector for [`pd_scene_new`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PdTexture {
    SmoothNoise = 0,
    Checkerboard = 1,
    Uniform = 2,
}

/// Loss schedule selector.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PdFlow {
    SelfOnly = 0,
    SupervisedOnly = 1,
    JointRandom = 2,
}

/// Depth error statistics (see the library's evaluation protocol).
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct PdMetricsReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rms: f64,
    pub rms_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

/// Optimization settings; fill with [`pd_optim_config_default`] first.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct PdOptimConfig {
    pub iterations: u32,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda_i: f64,
    pub lambda_d: f64,
    pub alpha: f64,
    pub crop_degrees: f64,
    pub flow: PdFlow,
    pub seed: u64,
    pub pyramid_levels: u32,
}

/// Opaque textured box-room description.
pub struct PdScene {
    inner: SceneSpec,
}

/// Opaque non-local block weights.
pub struct PdNlfb {
    inner: NonLocalWeights,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(e: &PanoError) -> PdStatus {
    match e {
        PanoError::Io { .. } | PanoError::Format { .. } => PdStatus::ErrIo,
        PanoError::Numerical(_) | PanoError::Diverged { .. } => PdStatus::ErrNumerical,
        _ => PdStatus::ErrInvalidInput,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (PdStatus, String)>) -> PdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PdStatus::Ok,
        Ok(Err((status, message))) => {
            set_error(&message);
            status
        }
        Err(_) => {
            set_error("panic inside pano-depth");
            PdStatus::ErrPanic
        }
    }
}

fn fail(e: PanoError) -> (PdStatus, String) {
    (status_of(&e), e.to_string())
}

fn null_fail(what: &str) -> (PdStatus, String) {
    (PdStatus::ErrNullPointer, format!("{what} is null"))
}

/// Version of the underlying library, as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn pd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the calling thread's most recent error. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

unsafe fn slice_in<'a>(ptr: *const f64, len: usize) -> Option<&'a [f64]> {
    if ptr.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(ptr, len))
    }
}

unsafe fn slice_out<'a>(ptr: *mut f64, len: usize) -> Option<&'a mut [f64]> {
    if ptr.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts_mut(ptr, len))
    }
}

fn grid_of(height: u32) -> Result<PixelGrid, PanoError> {
    PixelGrid::new(height as usize)
}

fn motion_of(dvx: f64, dvy: f64, dvz: f64, drx: f64) -> Result<CameraMotion, PanoError> {
    CameraMotion::new([dvx, dvy, dvz], drx)
}

fn frame_from(buf: &[f64], grid: &PixelGrid) -> Result<EquirectFrame, PanoError> {
    EquirectFrame::new(Tensor::new(
        vec![3, grid.height(), grid.width()],
        buf.to_vec(),
    )?)
}

fn depth_from(buf: &[f64], grid: &PixelGrid, allow_holes: bool) -> Result<DepthMap, PanoError> {
    let t = Tensor::new(vec![1, grid.height(), grid.width()], buf.to_vec())?;
    if allow_holes {
        DepthMap::with_holes(t)
    } else {
        DepthMap::new(t)
    }
}

/// Create a box room with half-extents in meters. `checker_period` is only
/// read for the checkerboard texture. Returns null on invalid parameters.
#[no_mangle]
pub extern "C" fn pd_scene_new(
    half_x: f64,
    half_y: f64,
    half_z: f64,
    texture: PdTexture,
    checker_period: f64,
    seed: u64,
) -> *mut PdScene {
    let kind = match texture {
        PdTexture::SmoothNoise => TextureKind::SmoothNoise,
        PdTexture::Checkerboard => TextureKind::Checkerboard {
            period: checker_period,
        },
        PdTexture::Uniform => TextureKind::Uniform,
    };
    match SceneSpec::new([half_x, half_y, half_z], kind, seed) {
        Ok(inner) => Box::into_raw(Box::new(PdScene { inner })),
        Err(e) => {
            set_error(&e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// Release a scene handle. A null pointer is ignored.
///
/// # Safety
/// `scene` must have come from [`pd_scene_new`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn pd_scene_free(scene: *mut PdScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Render the room from a camera position. `rgb_out` receives `3·H·2H`
/// values in `[0,1]`; `depth_out` receives `H·2H` radial distances.
///
/// # Safety
/// `scene` must be a live handle; the output buffers must hold at least the
/// stated number of `f64`s.
#[no_mangle]
pub unsafe extern "C" fn pd_scene_render(
    scene: *const PdScene,
    pos_x: f64,
    pos_y: f64,
    pos_z: f64,
    height: u32,
    rgb_out: *mut f64,
    depth_out: *mut f64,
) -> PdStatus {
    guard(|| {
        let scene = scene.as_ref().ok_or_else(|| null_fail("scene"))?;
        let grid = grid_of(height).map_err(fail)?;
        let n = grid.pixels();
        let rgb = slice_out(rgb_out, 3 * n).ok_or_else(|| null_fail("rgb_out"))?;
        let depth = slice_out(depth_out, n).ok_or_else(|| null_fail("depth_out"))?;
        let (frame, d) = render(&scene.inner, [pos_x, pos_y, pos_z], &grid).map_err(fail)?;
        rgb.copy_from_slice(frame.tensor().data());
        depth.copy_from_slice(d.tensor().data());
        Ok(())
    })
}

/// Carry one spherical point (θ, φ, ρ) through a gravity-aligned motion.
///
/// # Safety
/// The three output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn pd_reproject_point(
    theta: f64,
    phi: f64,
    rho: f64,
    dv_x: f64,
    dv_y: f64,
    dv_z: f64,
    dr_x: f64,
    theta_out: *mut f64,
    phi_out: *mut f64,
    rho_out: *mut f64,
) -> PdStatus {
    guard(|| {
        if theta_out.is_null() || phi_out.is_null() || rho_out.is_null() {
            return Err(null_fail("output"));
        }
        let p = SphericalPoint::new(theta, phi, rho).map_err(fail)?;
        let m = motion_of(dv_x, dv_y, dv_z, dr_x).map_err(fail)?;
        let q = reproject_point(&p, &m).map_err(fail)?;
        *theta_out = q.theta();
        *phi_out = q.phi();
        *rho_out = q.rho();
        Ok(())
    })
}

/// Synthesize the frame at the viewpoint reached by the motion.
/// `weights_out` (optional, `H·2H`) receives the splat coverage weights;
/// pixels below the coverage threshold come back zero in `rgb_out`.
///
/// # Safety
/// Buffers must match the documented lengths for `height`.
#[no_mangle]
pub unsafe extern "C" fn pd_synthesize_image(
    rgb: *const f64,
    depth: *const f64,
    height: u32,
    dv_x: f64,
    dv_y: f64,
    dv_z: f64,
    dr_x: f64,
    rgb_out: *mut f64,
    weights_out: *mut f64,
) -> PdStatus {
    guard(|| {
        let grid = grid_of(height).map_err(fail)?;
        let n = grid.pixels();
        let rgb = slice_in(rgb, 3 * n).ok_or_else(|| null_fail("rgb"))?;
        let depth = slice_in(depth, n).ok_or_else(|| null_fail("depth"))?;
        let out = slice_out(rgb_out, 3 * n).ok_or_else(|| null_fail("rgb_out"))?;
        let frame = frame_from(rgb, &grid).map_err(fail)?;
        let d = depth_from(depth, &grid, false).map_err(fail)?;
        let m = motion_of(dv_x, dv_y, dv_z, dr_x).map_err(fail)?;
        let (syn, weights) = synthesize_image(&frame, &d, &m).map_err(fail)?;
        out.copy_from_slice(syn.tensor().data());
        if let Some(w) = slice_out(weights_out, n) {
            w.copy_from_slice(weights.data());
        }
        Ok(())
    })
}

/// Synthesize the depth map at the viewpoint reached by the motion;
/// uncovered pixels come back as zero holes.
///
/// # Safety
/// Buffers must match the documented lengths for `height`.
#[no_mangle]
pub unsafe extern "C" fn pd_synthesize_depth(
    depth: *const f64,
    height: u32,
    dv_x: f64,
    dv_y: f64,
    dv_z: f64,
    dr_x: f64,
    depth_out: *mut f64,
    weights_out: *mut f64,
) -> PdStatus {
    guard(|| {
        let grid = grid_of(height).map_err(fail)?;
        let n = grid.pixels();
        let depth = slice_in(depth, n).ok_or_else(|| null_fail("depth"))?;
        let out = slice_out(depth_out, n).ok_or_else(|| null_fail("depth_out"))?;
        let d = depth_from(depth, &grid, false).map_err(fail)?;
        let m = motion_of(dv_x, dv_y, dv_z, dr_x).map_err(fail)?;
        let (syn, weights) = synthesize_depth(&d, &m).map_err(fail)?;
        out.copy_from_slice(syn.tensor().data());
        if let Some(w) = slice_out(weights_out, n) {
            w.copy_from_slice(weights.data());
        }
        Ok(())
    })
}

/// Least-squares scale/shift aligning `pred` to `gt` over pixels where
/// `gt > 0`.
///
/// # Safety
/// `pred` and `gt` must hold `H·2H` values; the two outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn pd_align_scale_shift(
    pred: *const f64,
    gt: *const f64,
    height: u32,
    s_out: *mut f64,
    t_out: *mut f64,
) -> PdStatus {
    guard(|| {
        if s_out.is_null() || t_out.is_null() {
            return Err(null_fail("output"));
        }
        let grid = grid_of(height).map_err(fail)?;
        let n = grid.pixels();
        let pred = slice_in(pred, n).ok_or_else(|| null_fail("pred"))?;
        let gt = slice_in(gt, n).ok_or_else(|| null_fail("gt"))?;
        let shape = vec![1, grid.height(), grid.width()];
        let pred_t = Tensor::new(shape.clone(), pred.to_vec()).map_err(fail)?;
        let gt_t = Tensor::new(shape, gt.to_vec()).map_err(fail)?;
        let valid = Mask::new(
            grid.height(),
            grid.width(),
            gt.iter().map(|&g| g > 0.0 && g.is_finite()).collect(),
        )
        .map_err(fail)?;
        let aligned = align_scale_shift(&pred_t, &gt_t, &valid).map_err(fail)?;
        *s_out = aligned.s;
        *t_out = aligned.t;
        Ok(())
    })
}

fn report_out(report: pano_depth::metrics::MetricsReport) -> PdMetricsReport {
    PdMetricsReport {
        abs_rel: report.abs_rel,
        sq_rel: report.sq_rel,
        rms: report.rms,
        rms_log: report.rms_log,
        delta1: report.delta1,
        delta2: report.delta2,
        delta3: report.delta3,
    }
}

/// Error statistics of an already-aligned prediction over the pixels where
/// `valid` is nonzero (`valid` may be null for all-valid).
///
/// # Safety
/// `pred`/`gt` must hold `H·2H` values; `valid`, when non-null, as many
/// bytes; `report_out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pd_compute_metrics(
    pred: *const f64,
    gt: *const f64,
    valid: *const u8,
    height: u32,
    report: *mut PdMetricsReport,
) -> PdStatus {
    guard(|| {
        let out = report.as_mut().ok_or_else(|| null_fail("report"))?;
        let grid = grid_of(height).map_err(fail)?;
        let n = grid.pixels();
        let pred = slice_in(pred, n).ok_or_else(|| null_fail("pred"))?;
        let gt = slice_in(gt, n).ok_or_else(|| null_fail("gt"))?;
        let shape = vec![1, grid.height(), grid.width()];
        let pred_t = Tensor::new(shape.clone(), pred.to_vec()).map_err(fail)?;
        let gt_t = Tensor::new(shape, gt.to_vec()).map_err(fail)?;
        let mask = if valid.is_null() {
            Mask::full(grid.height(), grid.width())
        } else {
            let flags = std::slice::from_raw_parts(valid, n);
            Mask::new(
                grid.height(),
                grid.width(),
                flags.iter().map(|&b| b != 0).collect(),
            )
            .map_err(fail)?
        };
        *out = report_out(compute_metrics(&pred_t, &gt_t, &mask).map_err(fail)?);
        Ok(())
    })
}

/// The full evaluation protocol: scale-shift alignment, 45° polar crop,
/// then metrics. Zeros in `gt` are treated as holes.
///
/// # Safety
/// `pred`/`gt` must hold `H·2H` values; `report_out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pd_eval_protocol(
    pred: *const f64,
    gt: *const f64,
    height: u32,
    report: *mut PdMetricsReport,
) -> PdStatus {
    guard(|| {
        let out = report.as_mut().ok_or_else(|| null_fail("report"))?;
        let grid = grid_of(height).map_err(fail)?;
        let n = grid.pixels();
        let pred = slice_in(pred, n).ok_or_else(|| null_fail("pred"))?;
        let gt = slice_in(gt, n).ok_or_else(|| null_fail("gt"))?;
        let shape = vec![1, grid.height(), grid.width()];
        let pred_t = Tensor::new(shape.clone(), pred.to_vec()).map_err(fail)?;
        let gt_t = Tensor::new(shape, gt.to_vec()).map_err(fail)?;
        *out = report_out(eval_protocol(&pred_t, &gt_t).map_err(fail)?);
        Ok(())
    })
}

/// Fresh non-local block weights: random θ/φ/g projections, zero `W_z`
/// (identity behavior). `channels` must be even. Returns null on error.
#[no_mangle]
pub extern "C" fn pd_nlfb_new_seeded(channels: u32, seed: u64) -> *mut PdNlfb {
    match NonLocalWeights::seeded(channels as usize, seed) {
        Ok(inner) => Box::into_raw(Box::new(PdNlfb { inner })),
        Err(e) => {
            set_error(&e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// Load block weights from the binary interchange format.
///
/// # Safety
/// `path` must be a valid nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pd_nlfb_load(path: *const c_char) -> *mut PdNlfb {
    if path.is_null() {
        set_error("path is null");
        return std::ptr::null_mut();
    }
    let path = PathBuf::from(CStr::from_ptr(path).to_string_lossy().into_owned());
    match NonLocalWeights::load(&path) {
        Ok(inner) => Box::into_raw(Box::new(PdNlfb { inner })),
        Err(e) => {
            set_error(&e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// Save block weights to the binary interchange format.
///
/// # Safety
/// `nlfb` must be a live handle; `path` must be nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn pd_nlfb_save(nlfb: *const PdNlfb, path: *const c_char) -> PdStatus {
    guard(|| {
        let nlfb = nlfb.as_ref().ok_or_else(|| null_fail("nlfb"))?;
        if path.is_null() {
            return Err(null_fail("path"));
        }
        let path = PathBuf::from(CStr::from_ptr(path).to_string_lossy().into_owned());
        nlfb.inner.save(&path).map_err(fail)
    })
}

/// Apply the residual non-local operator to a `C×H×W` feature map.
///
/// # Safety
/// `features` and `out` must hold `channels·h·w` values each.
#[no_mangle]
pub unsafe extern "C" fn pd_nlfb_forward(
    nlfb: *const PdNlfb,
    features: *const f64,
    channels: u32,
    h: u32,
    w: u32,
    out: *mut f64,
) -> PdStatus {
    guard(|| {
        let nlfb = nlfb.as_ref().ok_or_else(|| null_fail("nlfb"))?;
        let len = (channels * h * w) as usize;
        let features = slice_in(features, len).ok_or_else(|| null_fail("features"))?;
        let out = slice_out(out, len).ok_or_else(|| null_fail("out"))?;
        let fm = FeatureMap::new(
            Tensor::new(
                vec![channels as usize, h as usize, w as usize],
                features.to_vec(),
            )
            .map_err(fail)?,
        )
        .map_err(fail)?;
        let result = non_local_forward(&fm, &nlfb.inner).map_err(fail)?;
        out.copy_from_slice(result.tensor().data());
        Ok(())
    })
}

/// Release a weights handle. A null pointer is ignored.
///
/// # Safety
/// `nlfb` must have come from a `pd_nlfb_*` constructor and not be freed
/// twice.
#[no_mangle]
pub unsafe extern "C" fn pd_nlfb_free(nlfb: *mut PdNlfb) {
    if !nlfb.is_null() {
        drop(Box::from_raw(nlfb));
    }
}

/// Fill an optimization config with the library defaults.
///
/// # Safety
/// `config` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pd_optim_config_default(config: *mut PdOptimConfig) {
    if config.is_null() {
        return;
    }
    let defaults = OptimConfig::default();
    let weights = LossWeights::default();
    *config = PdOptimConfig {
        iterations: defaults.iterations as u32,
        learning_rate: defaults.learning_rate,
        beta1: defaults.betas.0,
        beta2: defaults.betas.1,
        lambda_i: weights.lambda_i,
        lambda_d: weights.lambda_d,
        alpha: weights.alpha,
        crop_degrees: defaults.crop_degrees,
        flow: PdFlow::SelfOnly,
        seed: defaults.seed,
        pyramid_levels: defaults.pyramid_levels as u32,
    };
}

/// Recover per-pixel depth for the first frame plus the two directed
/// motions. `gt` (optional unless the flow is supervised/joint) holds
/// `H·2H` depths with zeros as holes. `motion_fwd_out`/`motion_bwd_out`
/// receive `[dv_x, dv_y, dv_z, dr_x]`; `final_loss_out` may be null.
///
/// # Safety
/// Buffers must match the documented lengths for `height`.
#[no_mangle]
pub unsafe extern "C" fn pd_optimize_pair(
    v: *const f64,
    v_prime: *const f64,
    height: u32,
    gt: *const f64,
    config: *const PdOptimConfig,
    depth_out: *mut f64,
    motion_fwd_out: *mut f64,
    motion_bwd_out: *mut f64,
    final_loss_out: *mut f64,
) -> PdStatus {
    guard(|| {
        let cfg = config.as_ref().ok_or_else(|| null_fail("config"))?;
        let grid = grid_of(height).map_err(fail)?;
        let n = grid.pixels();
        let v = slice_in(v, 3 * n).ok_or_else(|| null_fail("v"))?;
        let vp = slice_in(v_prime, 3 * n).ok_or_else(|| null_fail("v_prime"))?;
        let depth_out = slice_out(depth_out, n).ok_or_else(|| null_fail("depth_out"))?;
        let m_fwd = slice_out(motion_fwd_out, 4).ok_or_else(|| null_fail("motion_fwd_out"))?;
        let m_bwd = slice_out(motion_bwd_out, 4).ok_or_else(|| null_fail("motion_bwd_out"))?;

        let frame = frame_from(v, &grid).map_err(fail)?;
        let frame_prime = frame_from(vp, &grid).map_err(fail)?;
        let gt_map = match slice_in(gt, n) {
            Some(buf) => Some(depth_from(buf, &grid, true).map_err(fail)?),
            None => None,
        };
        let flow = match cfg.flow {
            PdFlow::SelfOnly => FlowSchedule::SelfOnly,
            PdFlow::SupervisedOnly => FlowSchedule::SupervisedOnly,
            PdFlow::JointRandom => FlowSchedule::JointRandom,
        };
        let config = OptimConfig {
            iterations: cfg.iterations as usize,
            learning_rate: cfg.learning_rate,
            betas: (cfg.beta1, cfg.beta2),
            weights: LossWeights {
                lambda_i: cfg.lambda_i,
                lambda_d: cfg.lambda_d,
                alpha: cfg.alpha,
            },
            crop_degrees: cfg.crop_degrees,
            flow,
            seed: cfg.seed,
            pyramid_levels: cfg.pyramid_levels as usize,
            ..Default::default()
        };
        let result = optimize_pair(&frame, &frame_prime, &config, gt_map.as_ref()).map_err(fail)?;
        depth_out.copy_from_slice(result.depth.tensor().data());
        m_fwd.copy_from_slice(&result.motion_fwd.components());
        m_bwd.copy_from_slice(&result.motion_bwd.components());
        if !final_loss_out.is_null() {
            *final_loss_out = result.trace.last_total().unwrap_or(f64::NAN);
        }
        Ok(())
    })
}
