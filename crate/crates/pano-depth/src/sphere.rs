//! Coordinate conventions for equirectangular images.
//!
//! A panorama pixel `(x, y)` on an `H×W` grid (`W = 2H`) maps to spherical
//! angles through the pixel-center rule
//!
//! ```text
//! θ = (x + 0.5) · 2π / W        azimuth, measured from +x toward +y
//! φ = (y + 0.5) · π / H         colatitude, measured from +z
//! ```
//!
//! so no grid point ever sits exactly on a pole or on the θ seam. Cartesian
//! coordinates follow the right-handed convention
//!
//! ```text
//! x = ρ sin φ cos θ,   y = ρ sin φ sin θ,   z = ρ cos φ.
//! ```

use std::f64::consts::{PI, TAU};

use crate::error::{PanoError, Result};
use crate::tensor::Tensor;

/// Point in spherical coordinates: azimuth θ ∈ [0, 2π), colatitude
/// φ ∈ (0, π), radius ρ > 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalPoint {
    theta: f64,
    phi: f64,
    rho: f64,
}

impl SphericalPoint {
    /// θ is normalized into [0, 2π); φ and ρ must already satisfy their
    /// open-interval invariants.
    pub fn new(theta: f64, phi: f64, rho: f64) -> Result<Self> {
        if !theta.is_finite() || !phi.is_finite() || !rho.is_finite() {
            return Err(PanoError::invalid("spherical coordinates must be finite"));
        }
        if !(phi > 0.0 && phi < PI) {
            return Err(PanoError::invalid(format!(
                "colatitude must lie in (0, π), got {phi}"
            )));
        }
        if rho <= 0.0 {
            return Err(PanoError::invalid(format!(
                "radius must be positive, got {rho}"
            )));
        }
        Ok(SphericalPoint {
            theta: normalize_theta(theta),
            phi,
            rho,
        })
    }

    /// Pole points (φ ∈ {0, π}) are representable only through
    /// [`cart_to_sph`]'s θ = 0 convention, never constructed directly.
    pub(crate) fn new_unchecked(theta: f64, phi: f64, rho: f64) -> Self {
        SphericalPoint { theta, phi, rho }
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }
}

/// Point in Cartesian coordinates, meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartesianPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl CartesianPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(PanoError::invalid("cartesian coordinates must be finite"));
        }
        Ok(CartesianPoint { x, y, z })
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }
}

/// Equirectangular pixel grid with `W = 2H` and the pixel-center rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelGrid {
    height: usize,
    width: usize,
}

impl PixelGrid {
    pub fn new(height: usize) -> Result<Self> {
        if height < 2 {
            return Err(PanoError::invalid(format!(
                "grid height must be at least 2, got {height}"
            )));
        }
        Ok(PixelGrid {
            height,
            width: 2 * height,
        })
    }

    pub fn with_dims(height: usize, width: usize) -> Result<Self> {
        if width != 2 * height {
            return Err(PanoError::AspectRatio { height, width });
        }
        Self::new(height)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Azimuth of pixel column `x`.
    pub fn theta(&self, x: usize) -> f64 {
        (x as f64 + 0.5) * TAU / self.width as f64
    }

    /// Colatitude of pixel row `y`.
    pub fn phi(&self, y: usize) -> f64 {
        (y as f64 + 0.5) * PI / self.height as f64
    }

    /// Continuous column coordinate of azimuth θ (may fall outside
    /// [0, W); callers wrap).
    pub fn col_of_theta(&self, theta: f64) -> f64 {
        theta * self.width as f64 / TAU - 0.5
    }

    /// Continuous row coordinate of colatitude φ.
    pub fn row_of_phi(&self, phi: f64) -> f64 {
        phi * self.height as f64 / PI - 0.5
    }

    /// `(θ, φ)` per pixel center as a `2×H×W` tensor.
    pub fn angles(&self) -> Tensor {
        let (h, w) = (self.height, self.width);
        let mut data = vec![0.0; 2 * h * w];
        for y in 0..h {
            for x in 0..w {
                data[y * w + x] = self.theta(x);
                data[h * w + y * w + x] = self.phi(y);
            }
        }
        Tensor::new(vec![2, h, w], data).expect("grid dims")
    }
}

fn normalize_theta(theta: f64) -> f64 {
    let t = theta.rem_euclid(TAU);
    // rem_euclid can round up to exactly 2π for tiny negative inputs
    if t >= TAU {
        0.0
    } else {
        t
    }
}

/// Spherical → Cartesian.
pub fn sph_to_cart(p: &SphericalPoint) -> CartesianPoint {
    let sin_phi = p.phi.sin();
    CartesianPoint {
        x: p.rho * sin_phi * p.theta.cos(),
        y: p.rho * sin_phi * p.theta.sin(),
        z: p.rho * p.phi.cos(),
    }
}

/// Cartesian → spherical, quadrant-aware.
///
/// Points on the polar axis (x = y = 0, z ≠ 0) take θ = 0 by convention and
/// φ ∈ {0, π}; the zero vector has no angles and is rejected.
pub fn cart_to_sph(c: &CartesianPoint) -> Result<SphericalPoint> {
    let rho = c.norm();
    if rho == 0.0 {
        return Err(PanoError::SingularPoint);
    }
    let sxy = (c.x * c.x + c.y * c.y).sqrt();
    let theta = if sxy == 0.0 {
        0.0
    } else {
        normalize_theta(c.y.atan2(c.x))
    };
    let phi = sxy.atan2(c.z);
    Ok(SphericalPoint::new_unchecked(theta, phi, rho))
}

/// Rotate the camera by `dr_x` radians about the vertical axis:
/// θ′ = (θ − dr_x) mod 2π, with φ and ρ untouched.
pub fn yaw_rotate(p: &SphericalPoint, dr_x: f64) -> Result<SphericalPoint> {
    if !dr_x.is_finite() {
        return Err(PanoError::invalid("yaw must be finite"));
    }
    Ok(SphericalPoint {
        theta: normalize_theta(p.theta - dr_x),
        phi: p.phi,
        rho: p.rho,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::SplitMix64;
    use proptest::prelude::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn sph_to_cart_axis_points() {
        let p = SphericalPoint::new(0.0, PI / 2.0, 1.0).unwrap();
        let c = sph_to_cart(&p);
        assert_close(c.x, 1.0, 1e-15);
        assert_close(c.y, 0.0, 1e-15);
        assert_close(c.z, 0.0, 1e-15);

        let p = SphericalPoint::new(PI / 2.0, PI / 2.0, 2.0).unwrap();
        let c = sph_to_cart(&p);
        assert_close(c.x, 0.0, 1e-15);
        assert_close(c.y, 2.0, 1e-15);
        assert_close(c.z, 0.0, 1e-15);
    }

    #[test]
    fn sph_to_cart_oblique() {
        // θ=π/4, φ=π/3, ρ=1 → (√6/4, √6/4, 1/2)
        let p = SphericalPoint::new(PI / 4.0, PI / 3.0, 1.0).unwrap();
        let c = sph_to_cart(&p);
        let root6_4 = 6.0_f64.sqrt() / 4.0;
        assert_close(c.x, root6_4, 1e-15);
        assert_close(c.y, root6_4, 1e-15);
        assert_close(c.z, 0.5, 1e-15);
    }

    #[test]
    fn cart_to_sph_pole_convention() {
        let s = cart_to_sph(&CartesianPoint::new(0.0, 0.0, 3.0).unwrap()).unwrap();
        assert_eq!(s.theta(), 0.0);
        assert_eq!(s.phi(), 0.0);
        assert_close(s.rho(), 3.0, 1e-15);
    }

    #[test]
    fn cart_to_sph_x_axis() {
        let s = cart_to_sph(&CartesianPoint::new(1.0, 0.0, 0.0).unwrap()).unwrap();
        assert_close(s.theta(), 0.0, 1e-15);
        assert_close(s.phi(), PI / 2.0, 1e-15);
        assert_close(s.rho(), 1.0, 1e-15);
    }

    #[test]
    fn cart_to_sph_third_quadrant() {
        // (−1, −1, 0) → θ = 5π/4, φ = π/2, ρ = √2; verified by substituting
        // the result back through sph_to_cart.
        let c = CartesianPoint::new(-1.0, -1.0, 0.0).unwrap();
        let s = cart_to_sph(&c).unwrap();
        assert_close(s.theta(), 5.0 * PI / 4.0, 1e-12);
        assert_close(s.phi(), PI / 2.0, 1e-12);
        assert_close(s.rho(), 2.0_f64.sqrt(), 1e-12);
        let back = sph_to_cart(&s);
        assert_close(back.x, c.x, 1e-12);
        assert_close(back.y, c.y, 1e-12);
        assert_close(back.z, c.z, 1e-12);
    }

    #[test]
    fn cart_to_sph_rejects_origin() {
        let c = CartesianPoint::new(0.0, 0.0, 0.0).unwrap();
        assert!(matches!(cart_to_sph(&c), Err(PanoError::SingularPoint)));
    }

    #[test]
    fn grid_angles_h2() {
        let g = PixelGrid::new(2).unwrap();
        let a = g.angles();
        assert_eq!(a.shape(), &[2, 2, 4]);
        let expected_theta = [PI / 4.0, 3.0 * PI / 4.0, 5.0 * PI / 4.0, 7.0 * PI / 4.0];
        for (x, want) in expected_theta.iter().enumerate() {
            assert_close(a.at(0, 0, x), *want, 1e-15);
        }
        assert_close(a.at(1, 0, 0), PI / 4.0, 1e-15);
        assert_close(a.at(1, 1, 0), 3.0 * PI / 4.0, 1e-15);
    }

    #[test]
    fn grid_angles_spot_checks() {
        let g = PixelGrid::new(4).unwrap();
        assert_close(g.angles().at(0, 0, 0), PI / 8.0, 1e-15);
        assert_close(g.angles().at(1, 0, 0), PI / 8.0, 1e-15);

        let g = PixelGrid::new(256).unwrap();
        assert_close(g.theta(511), TAU * 511.5 / 512.0, 1e-12);
        assert_close(g.phi(255), PI * 255.5 / 256.0, 1e-12);
    }

    #[test]
    fn grid_rejects_mismatched_width() {
        assert!(matches!(
            PixelGrid::with_dims(4, 9),
            Err(PanoError::AspectRatio { .. })
        ));
    }

    #[test]
    fn yaw_identity_and_quarter_turn() {
        let p = SphericalPoint::new(PI, PI / 3.0, 2.0).unwrap();
        let r = yaw_rotate(&p, 0.0).unwrap();
        assert_eq!(r, p);

        let p = SphericalPoint::new(0.0, PI / 2.0, 1.0).unwrap();
        let r = yaw_rotate(&p, PI / 2.0).unwrap();
        assert_close(r.theta(), 3.0 * PI / 2.0, 1e-15);
        assert_eq!(r.phi(), p.phi());
        assert_eq!(r.rho(), p.rho());
    }

    #[test]
    fn yaw_full_turn_is_identity() {
        let p = SphericalPoint::new(1.3, 0.7, 2.5).unwrap();
        let r = yaw_rotate(&p, TAU).unwrap();
        assert_close(r.theta(), p.theta(), 1e-12);
        assert_eq!(r.phi(), p.phi());
        assert_eq!(r.rho(), p.rho());
    }

    #[test]
    fn round_trip_ten_thousand_points() {
        let mut rng = SplitMix64::new(42);
        for _ in 0..10_000 {
            let theta = rng.next_range(0.0, TAU);
            let phi = rng.next_range(1e-3, PI - 1e-3);
            let rho = rng.next_range(0.05, 50.0);
            let p = SphericalPoint::new(theta, phi, rho).unwrap();
            let c = sph_to_cart(&p);
            let q = cart_to_sph(&c).unwrap();
            assert_close(q.rho(), rho, 1e-12 * rho);
            assert_close(q.phi(), phi, 1e-12);
            let dt = (q.theta() - theta).abs();
            assert!(dt < 1e-11 || (TAU - dt) < 1e-11, "theta {theta} vs {}", q.theta());
            // |sph_to_cart(p)| = ρ
            assert_close(c.norm(), rho, 1e-12 * rho);
        }
    }

    proptest! {
        #[test]
        fn yaw_preserves_phi_rho_and_inverts(
            theta in 0.0..TAU,
            phi in 1e-6..(PI - 1e-6),
            rho in 1e-3..100.0,
            a in -10.0..10.0,
        ) {
            let p = SphericalPoint::new(theta, phi, rho).unwrap();
            let r = yaw_rotate(&p, a).unwrap();
            // bit-for-bit on the untouched components
            prop_assert_eq!(r.phi().to_bits(), p.phi().to_bits());
            prop_assert_eq!(r.rho().to_bits(), p.rho().to_bits());
            let back = yaw_rotate(&r, -a).unwrap();
            let dt = (back.theta() - p.theta()).abs();
            prop_assert!(dt < 1e-12 || (TAU - dt) < 1e-12);
        }
    }
}
