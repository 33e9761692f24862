//! Cross-frame reprojection and differentiable forward splatting.
//!
//! Given a source frame with per-pixel radial depth ρ and a gravity-aligned
//! camera motion (δv, δr_x), every pixel's scene point is carried into the
//! target camera through Cartesian space:
//!
//! ```text
//! X′ = ρ sin φ cos(θ − δr_x) − δv_x
//! Y′ = ρ sin φ sin(θ − δr_x) − δv_y
//! Z′ = ρ cos φ − δv_z
//! ```
//!
//! and read back as target angles (θ′, φ′) and radius ρ′ with quadrant-aware
//! arctangents. Images and depths are then synthesized at the target view by
//! normalized bilinear forward splatting: each source pixel scatters its
//! value to the target grid with bilinear weights (wrapping in θ, clamping in
//! φ), and accumulated values are divided by the accumulated weight. Target
//! pixels that receive less than [`COVERAGE_EPS`] total weight are reported
//! as holes and left zero.

use std::f64::consts::{PI, TAU};
use std::ops::Neg;

use serde::{Deserialize, Serialize};

use crate::autodiff::{splat_forward, Tape, Var};
use crate::error::{PanoError, Result};
use crate::frame::{DepthMap, EquirectFrame};
use crate::sphere::{PixelGrid, SphericalPoint};
use crate::tensor::{Mask, Tensor};

/// Splat weight below which a target pixel counts as uncovered.
pub const COVERAGE_EPS: f64 = 1e-6;

/// Radius below which a transformed point counts as degenerate (the camera
/// passed through the surface).
const DEGENERATE_RHO: f64 = 1e-12;

/// Gravity-aligned camera motion between consecutive frames: translation
/// δv in meters and yaw δr_x in radians (roll and pitch are zero).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraMotion {
    pub dv: [f64; 3],
    pub dr_x: f64,
}

impl CameraMotion {
    pub fn new(dv: [f64; 3], dr_x: f64) -> Result<Self> {
        if dv.iter().any(|v| !v.is_finite()) || !dr_x.is_finite() {
            return Err(PanoError::invalid("camera motion must be finite"));
        }
        Ok(CameraMotion { dv, dr_x })
    }

    pub fn zero() -> Self {
        CameraMotion {
            dv: [0.0; 3],
            dr_x: 0.0,
        }
    }

    pub fn components(&self) -> [f64; 4] {
        [self.dv[0], self.dv[1], self.dv[2], self.dr_x]
    }

    /// Exact inverse motion.
    ///
    /// The reprojection rotates first and then translates in the target
    /// frame, so the algebraic inverse is (−R(δr_x)·δv, −δr_x). Componentwise
    /// negation (`-motion`) coincides with it whenever yaw and translation do
    /// not mix (zero-yaw steps and pure rotations, i.e. the gravity-aligned
    /// capture regime) and is what the consistency losses use.
    pub fn inverse(&self) -> CameraMotion {
        let (s, c) = self.dr_x.sin_cos();
        CameraMotion {
            dv: [
                -(self.dv[0] * c - self.dv[1] * s),
                -(self.dv[0] * s + self.dv[1] * c),
                -self.dv[2],
            ],
            dr_x: -self.dr_x,
        }
    }
}

impl Neg for CameraMotion {
    type Output = CameraMotion;

    fn neg(self) -> CameraMotion {
        CameraMotion {
            dv: [-self.dv[0], -self.dv[1], -self.dv[2]],
            dr_x: -self.dr_x,
        }
    }
}

/// Per-pixel target coordinates produced by [`reproject`].
///
/// Where `valid` is set, `rho > 0` and `phi ∈ (0, π)`; entries are invalid
/// only for degenerate geometry (the transformed point collapses onto the
/// camera center or lands exactly on the polar axis).
#[derive(Debug, Clone)]
pub struct WarpField {
    theta: Tensor,
    phi: Tensor,
    rho: Tensor,
    valid: Mask,
}

impl WarpField {
    pub fn new(theta: Tensor, phi: Tensor, rho: Tensor, valid: Mask) -> Result<Self> {
        let (_, h, w) = theta.chw()?;
        for (name, t) in [("phi", &phi), ("rho", &rho)] {
            let (_, th, tw) = t.chw()?;
            if (th, tw) != (h, w) {
                return Err(PanoError::ShapeMismatch {
                    expected: format!("{h}×{w} for {name}"),
                    got: format!("{th}×{tw}"),
                });
            }
        }
        if (valid.height(), valid.width()) != (h, w) {
            return Err(PanoError::ShapeMismatch {
                expected: format!("{h}×{w} mask"),
                got: format!("{}×{}", valid.height(), valid.width()),
            });
        }
        Ok(WarpField {
            theta,
            phi,
            rho,
            valid,
        })
    }

    /// Field mapping every pixel to itself with the given radii.
    pub fn identity(grid: &PixelGrid, rho: &DepthMap) -> Result<Self> {
        let (h, w) = (grid.height(), grid.width());
        let mut theta = vec![0.0; h * w];
        let mut phi = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                theta[y * w + x] = grid.theta(x);
                phi[y * w + x] = grid.phi(y);
            }
        }
        WarpField::new(
            Tensor::new(vec![h, w], theta)?,
            Tensor::new(vec![h, w], phi)?,
            rho.tensor().clone().reshaped(vec![h, w])?,
            Mask::full(h, w),
        )
    }

    pub fn theta(&self) -> &Tensor {
        &self.theta
    }

    pub fn phi(&self) -> &Tensor {
        &self.phi
    }

    pub fn rho(&self) -> &Tensor {
        &self.rho
    }

    pub fn valid(&self) -> &Mask {
        &self.valid
    }

    fn dims(&self) -> (usize, usize) {
        let (_, h, w) = self.theta.chw().expect("validated");
        (h, w)
    }
}

/// Carry one spherical point through the camera motion. Fails only when the
/// transformed point collapses onto the camera center.
pub fn reproject_point(p: &SphericalPoint, motion: &CameraMotion) -> Result<SphericalPoint> {
    let (theta, phi, rho, valid) = reproject_scalar(p.theta(), p.phi(), p.rho(), motion);
    if !valid {
        return Err(PanoError::SingularPoint);
    }
    SphericalPoint::new(theta, phi, rho)
}

/// Scalar kernel shared by [`reproject`] and [`reproject_point`]. Returns
/// (θ′ ∈ [0, 2π), φ′, ρ′, valid).
fn reproject_scalar(
    theta: f64,
    phi: f64,
    rho: f64,
    motion: &CameraMotion,
) -> (f64, f64, f64, bool) {
    let t = theta - motion.dr_x;
    let sin_phi = phi.sin();
    let xp = rho * sin_phi * t.cos() - motion.dv[0];
    let yp = rho * sin_phi * t.sin() - motion.dv[1];
    let zp = rho * phi.cos() - motion.dv[2];
    let sxy2 = xp * xp + yp * yp;
    let rho_p = (sxy2 + zp * zp).sqrt();
    let sxy = sxy2.sqrt();
    let theta_p = if sxy == 0.0 {
        0.0
    } else {
        let t = yp.atan2(xp).rem_euclid(TAU);
        if t >= TAU {
            0.0
        } else {
            t
        }
    };
    let phi_p = sxy.atan2(zp);
    let valid = rho_p > DEGENERATE_RHO && phi_p > 0.0 && phi_p < PI;
    (theta_p, phi_p, rho_p, valid)
}

/// Compute target coordinates (θ′, φ′, ρ′) for every pixel of a depth map.
pub fn reproject(depth: &DepthMap, grid: &PixelGrid, motion: &CameraMotion) -> Result<WarpField> {
    let (_, h, w) = depth.tensor().chw()?;
    if (h, w) != (grid.height(), grid.width()) {
        return Err(PanoError::ShapeMismatch {
            expected: format!("{}×{}", grid.height(), grid.width()),
            got: format!("{h}×{w}"),
        });
    }
    let d = depth.tensor().data();
    let mut theta = vec![0.0; h * w];
    let mut phi = vec![0.0; h * w];
    let mut rho = vec![0.0; h * w];
    let mut valid = vec![false; h * w];
    for y in 0..h {
        let phi_s = grid.phi(y);
        for x in 0..w {
            let i = y * w + x;
            let (tp, pp, rp, ok) = reproject_scalar(grid.theta(x), phi_s, d[i], motion);
            theta[i] = tp;
            phi[i] = pp;
            rho[i] = rp;
            valid[i] = ok;
        }
    }
    WarpField::new(
        Tensor::new(vec![h, w], theta)?,
        Tensor::new(vec![h, w], phi)?,
        Tensor::new(vec![h, w], rho)?,
        Mask::new(h, w, valid)?,
    )
}

/// Normalized bilinear forward splat of `source` (`C×H×W`) through `field`.
///
/// Returns the synthesized image and the accumulated weight map (`1×H×W`);
/// pixels with weight below [`COVERAGE_EPS`] are left zero.
pub fn forward_splat(
    source: &Tensor,
    field: &WarpField,
    grid: &PixelGrid,
) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = source.chw()?;
    if (h, w) != (grid.height(), grid.width()) || (h, w) != field.dims() {
        return Err(PanoError::ShapeMismatch {
            expected: format!("{}×{}", grid.height(), grid.width()),
            got: format!("{h}×{w}"),
        });
    }
    let n = h * w;
    let mut xs = vec![0.0; n];
    let mut ys = vec![0.0; n];
    for i in 0..n {
        xs[i] = grid.col_of_theta(field.theta.data()[i]);
        ys[i] = grid.row_of_phi(field.phi.data()[i]);
    }
    let acc = splat_forward(
        source.data(),
        c,
        n,
        &xs,
        &ys,
        Some(field.valid.data()),
        h,
        w,
    );
    let ones = vec![1.0; n];
    let wsum = splat_forward(&ones, 1, n, &xs, &ys, Some(field.valid.data()), h, w);
    let mut out = vec![0.0; c * n];
    for p in 0..n {
        if wsum[p] >= COVERAGE_EPS {
            for ch in 0..c {
                out[ch * n + p] = acc[ch * n + p] / wsum[p];
            }
        }
    }
    Ok((
        Tensor::new(source.shape().to_vec(), out)?,
        Tensor::new(vec![1, h, w], wsum)?,
    ))
}

/// Synthesize the source frame at the target viewpoint. The reverse
/// direction is obtained by calling with the target frame/depth and the
/// negated motion. Returns the frame and the splat weight map.
pub fn synthesize_image(
    v: &EquirectFrame,
    d: &DepthMap,
    motion: &CameraMotion,
) -> Result<(EquirectFrame, Tensor)> {
    let grid = d.grid();
    if v.tensor().chw()?.1 != grid.height() {
        return Err(PanoError::ShapeMismatch {
            expected: format!("frame height {}", grid.height()),
            got: format!("{}", v.tensor().chw()?.1),
        });
    }
    let field = reproject(d, &grid, motion)?;
    let (out, weights) = forward_splat(v.tensor(), &field, &grid)?;
    Ok((EquirectFrame::new(out)?, weights))
}

/// Synthesize the depth map at the target viewpoint by splatting the
/// *transformed* radii ρ′ (a depth re-expressed in the target frame must
/// carry target-frame distances). Uncovered pixels come back as zero holes.
pub fn synthesize_depth(d: &DepthMap, motion: &CameraMotion) -> Result<(DepthMap, Tensor)> {
    let grid = d.grid();
    let field = reproject(d, &grid, motion)?;
    let (h, w) = field.dims();
    let rho_src = field.rho.clone().reshaped(vec![1, h, w])?;
    let (out, weights) = forward_splat(&rho_src, &field, &grid)?;
    Ok((DepthMap::with_holes(out)?, weights))
}

// ---- tape composites -------------------------------------------------------

/// Camera motion as four scalar tape variables.
#[derive(Debug, Clone, Copy)]
pub struct MotionVars {
    pub dvx: Var,
    pub dvy: Var,
    pub dvz: Var,
    pub drx: Var,
}

impl MotionVars {
    pub fn leaves(tape: &mut Tape, motion: &CameraMotion, requires_grad: bool) -> MotionVars {
        MotionVars {
            dvx: tape.leaf(Tensor::from_scalar(motion.dv[0]), requires_grad),
            dvy: tape.leaf(Tensor::from_scalar(motion.dv[1]), requires_grad),
            dvz: tape.leaf(Tensor::from_scalar(motion.dv[2]), requires_grad),
            drx: tape.leaf(Tensor::from_scalar(motion.dr_x), requires_grad),
        }
    }

    pub fn vars(&self) -> [Var; 4] {
        [self.dvx, self.dvy, self.dvz, self.drx]
    }

    pub fn motion(&self, tape: &Tape) -> CameraMotion {
        CameraMotion {
            dv: [
                tape.value(self.dvx).data()[0],
                tape.value(self.dvy).data()[0],
                tape.value(self.dvz).data()[0],
            ],
            dr_x: tape.value(self.drx).data()[0],
        }
    }
}

/// Differentiable warp field: target angles and radius as tape variables
/// (each `1×H×W`), plus the constant validity mask taken at current values.
pub struct FieldVars {
    pub theta: Var,
    pub phi: Var,
    pub rho: Var,
    pub valid: Vec<bool>,
}

/// Tape version of [`reproject`]; `depth` must be a `1×H×W` variable.
/// The returned θ′ lives in (−π, π]; the splat wraps it, so no
/// normalization is applied on the tape.
pub fn reproject_on_tape(
    tape: &mut Tape,
    depth: Var,
    grid: &PixelGrid,
    motion: &MotionVars,
) -> Result<FieldVars> {
    let (h, w) = (grid.height(), grid.width());
    let mut theta_c = vec![0.0; h * w];
    let mut sin_phi = vec![0.0; h * w];
    let mut cos_phi = vec![0.0; h * w];
    for y in 0..h {
        let p = grid.phi(y);
        for x in 0..w {
            let i = y * w + x;
            theta_c[i] = grid.theta(x);
            sin_phi[i] = p.sin();
            cos_phi[i] = p.cos();
        }
    }
    let shape = vec![1, h, w];
    let theta_c = tape.constant(Tensor::new(shape.clone(), theta_c)?);
    let sin_phi = tape.constant(Tensor::new(shape.clone(), sin_phi)?);
    let cos_phi = tape.constant(Tensor::new(shape, cos_phi)?);

    let t = tape.sub(theta_c, motion.drx)?;
    let ct = tape.cos(t)?;
    let st = tape.sin(t)?;
    let rs = tape.mul(depth, sin_phi)?;
    let rct = tape.mul(rs, ct)?;
    let xp = tape.sub(rct, motion.dvx)?;
    let rst = tape.mul(rs, st)?;
    let yp = tape.sub(rst, motion.dvy)?;
    let rc = tape.mul(depth, cos_phi)?;
    let zp = tape.sub(rc, motion.dvz)?;

    let x2 = tape.mul(xp, xp)?;
    let y2 = tape.mul(yp, yp)?;
    let z2 = tape.mul(zp, zp)?;
    let x2y2 = tape.add(x2, y2)?;
    let r2 = tape.add(x2y2, z2)?;
    let rho = tape.sqrt(r2)?;
    let sxy = tape.sqrt(x2y2)?;
    let theta = tape.atan2(yp, xp)?;
    let phi = tape.atan2(sxy, zp)?;

    let valid = tape
        .value(rho)
        .data()
        .iter()
        .zip(tape.value(phi).data())
        .map(|(&r, &p)| r > DEGENERATE_RHO && p > 0.0 && p < PI)
        .collect();
    Ok(FieldVars {
        theta,
        phi,
        rho,
        valid,
    })
}

/// Normalized splat of `src` (`C×H×W` variable) through a differentiable
/// field. Returns the masked synthesis, the raw weight map variable, and the
/// coverage mask at [`COVERAGE_EPS`].
pub fn splat_on_tape(
    tape: &mut Tape,
    src: Var,
    field: &FieldVars,
    grid: &PixelGrid,
) -> Result<(Var, Var, Mask)> {
    let (h, w) = (grid.height(), grid.width());
    let xs = tape.scale_add(field.theta, w as f64 / TAU, -0.5)?;
    let ys = tape.scale_add(field.phi, h as f64 / PI, -0.5)?;
    let acc = tape.bilinear_splat(src, xs, ys, h, w, Some(field.valid.clone()))?;
    let ones = tape.constant(Tensor::ones(vec![1, h, w]));
    let wsum = tape.bilinear_splat(ones, xs, ys, h, w, Some(field.valid.clone()))?;
    let mask = Mask::from_weights(tape.value(wsum), COVERAGE_EPS)?;
    let wc = tape.clamp(wsum, COVERAGE_EPS, f64::INFINITY)?;
    let normalized = tape.div(acc, wc)?;
    let mask_t = tape.constant(mask.to_tensor());
    let out = tape.mul(normalized, mask_t)?;
    Ok((out, wsum, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::scene::{render, SceneSpec, TextureKind};
    use crate::sphere::sph_to_cart;
    use crate::util::SplitMix64;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    /// Residual of forward substitution: carry (θ,φ,ρ) through the motion and
    /// plug the result back into the source-side movement expressions.
    fn forward_substitution_residual(p: &SphericalPoint, m: &CameraMotion) -> f64 {
        let q = reproject_point(p, m).unwrap();
        let lhs = [
            p.rho() * (p.theta() - m.dr_x).cos() * p.phi().sin() - m.dv[0],
            p.rho() * p.phi().sin() * (p.theta() - m.dr_x).sin() - m.dv[1],
            p.rho() * p.phi().cos() - m.dv[2],
        ];
        let rhs = [
            q.rho() * q.theta().cos() * q.phi().sin(),
            q.rho() * q.phi().sin() * q.theta().sin(),
            q.rho() * q.phi().cos(),
        ];
        lhs.iter()
            .zip(&rhs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn reproject_zero_motion_is_identity() {
        let grid = PixelGrid::new(8).unwrap();
        let depth = DepthMap::new(Tensor::full(vec![1, 8, 16], 2.0)).unwrap();
        let field = reproject(&depth, &grid, &CameraMotion::zero()).unwrap();
        for y in 0..8 {
            for x in 0..16 {
                let i = y * 16 + x;
                assert!(close(field.theta().data()[i], grid.theta(x), 1e-12));
                assert!(close(field.phi().data()[i], grid.phi(y), 1e-12));
                assert!(close(field.rho().data()[i], 2.0, 1e-12));
                assert!(field.valid().data()[i]);
            }
        }
    }

    #[test]
    fn reproject_pure_yaw_shifts_theta() {
        let grid = PixelGrid::new(8).unwrap();
        let depth = DepthMap::new(Tensor::full(vec![1, 8, 16], 1.5)).unwrap();
        let yaw = 0.7;
        let motion = CameraMotion::new([0.0; 3], yaw).unwrap();
        let field = reproject(&depth, &grid, &motion).unwrap();
        for y in 0..8 {
            for x in 0..16 {
                let i = y * 16 + x;
                let expect = (grid.theta(x) - yaw).rem_euclid(TAU);
                assert!(close(field.theta().data()[i], expect, 1e-12));
                assert!(close(field.phi().data()[i], grid.phi(y), 1e-12));
                assert!(close(field.rho().data()[i], 1.5, 1e-12));
            }
        }
    }

    #[test]
    fn reproject_equatorial_axial_step() {
        // Point on the equator, ρ = 1, forward δv_z = 0.5:
        // θ′ = θ, φ′ = atan2(1, −0.5), ρ′ = √1.25.
        let motion = CameraMotion::new([0.0, 0.0, 0.5], 0.0).unwrap();
        for theta in [0.3, 2.0, 4.5] {
            let p = SphericalPoint::new(theta, PI / 2.0, 1.0).unwrap();
            let q = reproject_point(&p, &motion).unwrap();
            assert!(close(q.theta(), theta, 1e-12));
            assert!(close(q.phi(), 1.0f64.atan2(-0.5), 1e-12));
            assert!(close(q.rho(), 1.25f64.sqrt(), 1e-12));
            assert!(forward_substitution_residual(&p, &motion) < 1e-12);
        }
    }

    #[test]
    fn forward_substitution_random_sample() {
        let mut rng = SplitMix64::new(99);
        for _ in 0..5_000 {
            let p = SphericalPoint::new(
                rng.next_range(0.0, TAU),
                rng.next_range(0.05, PI - 0.05),
                rng.next_range(0.3, 5.0),
            )
            .unwrap();
            let m = CameraMotion::new(
                [
                    rng.next_range(-0.2, 0.2),
                    rng.next_range(-0.2, 0.2),
                    rng.next_range(-0.2, 0.2),
                ],
                rng.next_range(-1.0, 1.0),
            )
            .unwrap();
            assert!(forward_substitution_residual(&p, &m) < 1e-9);
        }
    }

    fn assert_points_close(a: &SphericalPoint, b: &SphericalPoint, tol: f64) {
        let dt = (a.theta() - b.theta()).abs();
        assert!(dt < tol || (TAU - dt) < tol);
        assert!(close(a.phi(), b.phi(), tol));
        assert!(close(a.rho(), b.rho(), tol * b.rho()));
    }

    #[test]
    fn reproject_round_trip() {
        // Negated motion inverts exactly for translation-only and yaw-only
        // steps; mixed motions need the algebraic inverse.
        let mut rng = SplitMix64::new(7);
        for _ in 0..2_000 {
            let p = SphericalPoint::new(
                rng.next_range(0.0, TAU),
                rng.next_range(0.1, PI - 0.1),
                rng.next_range(0.5, 4.0),
            )
            .unwrap();
            let shift = CameraMotion::new(
                [
                    rng.next_range(-0.15, 0.15),
                    rng.next_range(-0.15, 0.15),
                    rng.next_range(-0.15, 0.15),
                ],
                0.0,
            )
            .unwrap();
            let q = reproject_point(&p, &shift).unwrap();
            let back = reproject_point(&q, &(-shift)).unwrap();
            assert_points_close(&back, &p, 1e-9);

            let yaw = CameraMotion::new([0.0; 3], rng.next_range(-2.0, 2.0)).unwrap();
            let q = reproject_point(&p, &yaw).unwrap();
            let back = reproject_point(&q, &(-yaw)).unwrap();
            assert_points_close(&back, &p, 1e-9);

            let mixed = CameraMotion::new(
                [
                    rng.next_range(-0.15, 0.15),
                    rng.next_range(-0.15, 0.15),
                    rng.next_range(-0.15, 0.15),
                ],
                rng.next_range(-0.8, 0.8),
            )
            .unwrap();
            let q = reproject_point(&p, &mixed).unwrap();
            let back = reproject_point(&q, &mixed.inverse()).unwrap();
            assert_points_close(&back, &p, 1e-9);
        }
    }

    #[test]
    fn camera_passing_through_surface_masks_pixel() {
        // move the camera exactly onto one pixel's scene point: that pixel
        // degenerates and is masked, not an error
        let grid = PixelGrid::new(8).unwrap();
        let depth = DepthMap::new(Tensor::full(vec![1, 8, 16], 1.0)).unwrap();
        let (y, x) = (4, 3);
        let p = SphericalPoint::new(grid.theta(x), grid.phi(y), 1.0).unwrap();
        let c = sph_to_cart(&p);
        let motion = CameraMotion::new([c.x, c.y, c.z], 0.0).unwrap();
        let field = reproject(&depth, &grid, &motion).unwrap();
        assert!(!field.valid().get(y, x));
        assert!(matches!(
            reproject_point(&p, &motion),
            Err(PanoError::SingularPoint)
        ));
        // the rest of the map stays valid
        assert!(field.valid().count() >= 8 * 16 - 2);
    }

    #[test]
    fn splat_identity_field_reproduces_source() {
        let grid = PixelGrid::new(6).unwrap();
        let mut rng = SplitMix64::new(5);
        let src = Tensor::new(
            vec![3, 6, 12],
            (0..3 * 72).map(|_| rng.next_f64()).collect::<Vec<_>>(),
        )
        .unwrap();
        let depth = DepthMap::new(Tensor::full(vec![1, 6, 12], 1.0)).unwrap();
        let field = WarpField::identity(&grid, &depth).unwrap();
        let (out, weights) = forward_splat(&src, &field, &grid).unwrap();
        for (o, s) in out.data().iter().zip(src.data()) {
            assert!(close(*o, *s, 1e-12));
        }
        for w in weights.data() {
            assert!(close(*w, 1.0, 1e-12));
        }
    }

    #[test]
    fn splat_of_constant_image_is_constant_where_covered() {
        let grid = PixelGrid::new(16).unwrap();
        let depth = DepthMap::new(Tensor::full(vec![1, 16, 32], 1.3)).unwrap();
        let motion = CameraMotion::new([0.08, -0.05, 0.04], 0.3).unwrap();
        let field = reproject(&depth, &grid, &motion).unwrap();
        let src = Tensor::full(vec![3, 16, 32], 0.42);
        let (out, weights) = forward_splat(&src, &field, &grid).unwrap();
        let mask = Mask::from_weights(&weights, COVERAGE_EPS).unwrap();
        let mut covered = 0;
        for y in 0..16 {
            for x in 0..32 {
                if mask.get(y, x) {
                    covered += 1;
                    for c in 0..3 {
                        assert!(close(out.at(c, y, x), 0.42, 1e-12));
                    }
                }
            }
        }
        assert!(covered > 300, "expected mostly covered, got {covered}");
    }

    #[test]
    fn zero_motion_synthesis_is_identity() {
        let scene = SceneSpec::new([1.0; 3], TextureKind::SmoothNoise, 3).unwrap();
        let grid = PixelGrid::new(32).unwrap();
        let (v, d) = render(&scene, [0.0; 3], &grid).unwrap();
        let (syn, weights) = synthesize_image(&v, &d, &CameraMotion::zero()).unwrap();
        for (a, b) in syn.tensor().data().iter().zip(v.tensor().data()) {
            assert!(close(*a, *b, 1e-6));
        }
        let (dsyn, _) = synthesize_depth(&d, &CameraMotion::zero()).unwrap();
        for (a, b) in dsyn.tensor().data().iter().zip(d.tensor().data()) {
            assert!(close(*a, *b, 1e-6));
        }
        assert!(weights.data().iter().all(|&w| close(w, 1.0, 1e-9)));
    }

    #[test]
    fn pure_yaw_depth_synthesis_is_circular_shift() {
        let scene = SceneSpec::new([1.0, 0.8, 0.6], TextureKind::SmoothNoise, 11).unwrap();
        let grid = PixelGrid::new(32).unwrap();
        let (_, d) = render(&scene, [0.1, -0.05, 0.0], &grid).unwrap();
        // yaw by exactly 8 columns so the shifted grid lands on pixel centers
        let shift = 8usize;
        let yaw = TAU * shift as f64 / grid.width() as f64;
        let motion = CameraMotion::new([0.0; 3], yaw).unwrap();
        let (dsyn, _) = synthesize_depth(&d, &motion).unwrap();
        let expected = d.tensor().shift_cols(grid.width() - shift).unwrap();
        for (a, b) in dsyn.tensor().data().iter().zip(expected.data()) {
            assert!(close(*a, *b, 1e-3));
        }
    }

    #[test]
    fn synthesis_matches_rendered_target() {
        let scene = SceneSpec::new([1.0; 3], TextureKind::SmoothNoise, 21).unwrap();
        let grid = PixelGrid::new(64).unwrap();
        let motion = CameraMotion::new([0.2, 0.0, 0.0], 0.0).unwrap();
        let (v, d) = render(&scene, [-0.1, 0.0, 0.0], &grid).unwrap();
        let (v_t, d_t) = render(&scene, [0.1, 0.0, 0.0], &grid).unwrap();

        let (syn, weights) = synthesize_image(&v, &d, &motion).unwrap();
        let mask = Mask::from_weights(&weights, COVERAGE_EPS).unwrap();
        let mut se = 0.0;
        let mut count = 0usize;
        for y in 0..64 {
            for x in 0..128 {
                if !mask.get(y, x) {
                    continue;
                }
                for c in 0..3 {
                    let r = syn.tensor().at(c, y, x) - v_t.tensor().at(c, y, x);
                    se += r * r;
                    count += 1;
                }
            }
        }
        let rmse = (se / count as f64).sqrt();
        assert!(rmse < 0.03, "photometric RMSE {rmse}");
        assert!(count > 3 * 5000, "coverage too small: {count}");

        let (dsyn, dw) = synthesize_depth(&d, &motion).unwrap();
        let dmask = Mask::from_weights(&dw, COVERAGE_EPS).unwrap();
        let mut abs_rel = 0.0;
        let mut n = 0usize;
        for y in 0..64 {
            for x in 0..128 {
                if dmask.get(y, x) {
                    let (p, g) = (dsyn.tensor().at(0, y, x), d_t.tensor().at(0, y, x));
                    abs_rel += (p - g).abs() / g;
                    n += 1;
                }
            }
        }
        let mean_abs_rel = abs_rel / n as f64;
        assert!(mean_abs_rel < 0.01, "AbsRel {mean_abs_rel}");
    }

    #[test]
    fn seam_splat_matches_half_turn_rotation() {
        // Warping a scene and warping its 180°-rotated copy (seam moved to
        // the other side) must agree up to the same rotation.
        let scene = SceneSpec::new([1.0, 0.9, 0.7], TextureKind::SmoothNoise, 17).unwrap();
        let grid = PixelGrid::new(32).unwrap();
        let w = grid.width();
        let motion = CameraMotion::new([0.12, 0.05, 0.0], 0.0).unwrap();
        let (v, d) = render(&scene, [0.0; 3], &grid).unwrap();
        let (syn, _) = synthesize_image(&v, &d, &motion).unwrap();

        let v_rot = EquirectFrame::new(v.tensor().shift_cols(w / 2).unwrap()).unwrap();
        let d_rot = DepthMap::new(d.tensor().shift_cols(w / 2).unwrap()).unwrap();
        // the same world motion expressed in the yawed camera frame
        let motion_rot =
            CameraMotion::new([-motion.dv[0], -motion.dv[1], motion.dv[2]], 0.0).unwrap();
        let (syn_rot, _) = synthesize_image(&v_rot, &d_rot, &motion_rot).unwrap();
        let syn_back = syn_rot.tensor().shift_cols(w / 2).unwrap();
        for (a, b) in syn.tensor().data().iter().zip(syn_back.data()) {
            assert!(close(*a, *b, 1e-6), "{a} vs {b}");
        }
    }

    #[test]
    fn tape_reproject_matches_plain() {
        let grid = PixelGrid::new(8).unwrap();
        let mut rng = SplitMix64::new(31);
        let depth_t = Tensor::new(
            vec![1, 8, 16],
            (0..128)
                .map(|_| rng.next_range(0.5, 2.0))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let depth = DepthMap::new(depth_t.clone()).unwrap();
        let motion = CameraMotion::new([0.1, -0.07, 0.05], 0.4).unwrap();
        let field = reproject(&depth, &grid, &motion).unwrap();

        let mut tape = Tape::new();
        let dv = tape.leaf(depth_t, false);
        let mv = MotionVars::leaves(&mut tape, &motion, false);
        let fv = reproject_on_tape(&mut tape, dv, &grid, &mv).unwrap();
        for i in 0..128 {
            // tape θ′ is in (−π, π]; compare mod 2π
            let dt =
                (tape.value(fv.theta).data()[i].rem_euclid(TAU) - field.theta().data()[i]).abs();
            assert!(dt < 1e-12 || (TAU - dt) < 1e-12);
            assert!(close(
                tape.value(fv.phi).data()[i],
                field.phi().data()[i],
                1e-12
            ));
            assert!(close(
                tape.value(fv.rho).data()[i],
                field.rho().data()[i],
                1e-12
            ));
        }
    }

    #[test]
    fn splat_gradients_match_finite_differences() {
        // photometric-style scalar through the full reproject+splat chain,
        // differentiated with respect to the source values, the depth map,
        // and all motion components
        let grid = PixelGrid::new(4).unwrap();
        let scene = SceneSpec::new([1.0; 3], TextureKind::SmoothNoise, 9).unwrap();
        let (v, d) = render(&scene, [0.0; 3], &grid).unwrap();
        let (v_t, _) = render(&scene, [0.06, 0.0, 0.0], &grid).unwrap();
        let target = v_t.tensor().clone();

        let inputs = vec![
            v.tensor().clone(),
            d.tensor().clone(),
            Tensor::from_scalar(0.05),
            Tensor::from_scalar(0.01),
            Tensor::from_scalar(-0.02),
            Tensor::from_scalar(0.03),
        ];
        let report = grad_check(
            |tape, vars| {
                let motion = MotionVars {
                    dvx: vars[2],
                    dvy: vars[3],
                    dvz: vars[4],
                    drx: vars[5],
                };
                let field = reproject_on_tape(tape, vars[1], &grid, &motion)?;
                let (syn, _, _) = splat_on_tape(tape, vars[0], &field, &grid)?;
                let tv = tape.constant(target.clone());
                let diff = tape.sub(syn, tv)?;
                let sq = tape.mul(diff, diff)?;
                tape.mean(sq)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(
            report.passed,
            "max rel err {} per input {:?}",
            report.max_rel_err, report.per_input
        );
    }

    #[test]
    fn image_consistency_pipeline_gradient() {
        // the bidirectional photometric loss over live warps on a 3×4×8
        // pair, probed at h = 1e-5
        let grid = PixelGrid::new(4).unwrap();
        let scene = SceneSpec::new([1.0; 3], TextureKind::SmoothNoise, 15).unwrap();
        let motion = CameraMotion::new([0.06, 0.0, 0.0], 0.0).unwrap();
        let (v, d) = render(&scene, [-0.03, 0.0, 0.0], &grid).unwrap();
        let (vp, dp) = render(&scene, [0.03, 0.0, 0.0], &grid).unwrap();
        let v_t = v.tensor().clone();
        let vp_t = vp.tensor().clone();

        let mut rng = SplitMix64::new(3);
        let mut d_noisy = d.tensor().clone();
        let mut dp_noisy = dp.tensor().clone();
        for v in d_noisy.data_mut().iter_mut().chain(dp_noisy.data_mut()) {
            *v *= 1.0 + rng.next_range(-0.05, 0.05);
        }
        let inputs = vec![
            d_noisy,
            dp_noisy,
            Tensor::from_scalar(motion.dv[0]),
            Tensor::from_scalar(-motion.dv[0] + 0.01),
        ];
        let report = grad_check(
            |tape, vars| {
                let fwd = MotionVars {
                    dvx: vars[2],
                    dvy: tape.scalar(0.0),
                    dvz: tape.scalar(0.0),
                    drx: tape.scalar(0.0),
                };
                let bwd = MotionVars {
                    dvx: vars[3],
                    dvy: tape.scalar(0.0),
                    dvz: tape.scalar(0.0),
                    drx: tape.scalar(0.0),
                };
                let v_c = tape.constant(v_t.clone());
                let vp_c = tape.constant(vp_t.clone());
                let field_f = reproject_on_tape(tape, vars[0], &grid, &fwd)?;
                let (vp_syn, _, cov_f) = splat_on_tape(tape, v_c, &field_f, &grid)?;
                let field_b = reproject_on_tape(tape, vars[1], &grid, &bwd)?;
                let (v_syn, _, cov_b) = splat_on_tape(tape, vp_c, &field_b, &grid)?;
                let mask = cov_f.and(&cov_b).expect("same dims");
                crate::losses::image_consistency_on_tape(
                    tape, v_c, v_syn, vp_c, vp_syn, &mask, 0.15,
                )
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(
            report.passed,
            "max rel err {} per input {:?}",
            report.max_rel_err, report.per_input
        );
    }
}
