//! Analytic equirectangular renderer of textured box rooms.
//!
//! The room is an axis-aligned box seen from inside, so every pixel ray has
//! exactly one surface hit and the rendered depth is exact to float
//! precision with no occlusion. Rendered frame pairs with their exact motion
//! are the ground truth against which warping and optimization are checked.

use std::path::{Path, PathBuf};

use crate::error::{PanoError, Result};
use crate::frame::{DepthMap, EquirectFrame};
use crate::io;
use crate::sphere::PixelGrid;
use crate::tensor::Tensor;
use crate::util::SplitMix64;
use crate::warp::CameraMotion;

/// Procedural surface texture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TextureKind {
    /// Band-limited trigonometric color field evaluated at the 3-d surface
    /// point; smooth everywhere, continuous across face edges.
    SmoothNoise,
    /// Per-face checkerboard; `period` is the square size in face units.
    Checkerboard { period: f64 },
    /// One flat color per face. Face interiors carry no texture signal;
    /// photometric self-supervision cannot pin their depth.
    Uniform,
}

/// Textured box room: half-extents in meters plus a seeded texture.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    half_extents: [f64; 3],
    texture: TextureKind,
    seed: u64,
}

/// One smooth color field: value = 0.5 + Σ amp·sin(2π freq·pos + phase).
#[derive(Debug, Clone)]
struct NoiseChannel {
    freqs: [[f64; 3]; 4],
    phases: [f64; 4],
    amps: [f64; 4],
}

impl NoiseChannel {
    fn seeded(rng: &mut SplitMix64) -> Self {
        let mut freqs = [[0.0; 3]; 4];
        let mut phases = [0.0; 4];
        let mut raw = [0.0; 4];
        for k in 0..4 {
            for a in 0..3 {
                // band-limited: under one cycle across a 2 m face, so the
                // coarsest desk-scale grids still sample it cleanly
                let f = rng.next_range(0.1, 0.45);
                freqs[k][a] = if rng.next_bool() { f } else { -f };
            }
            phases[k] = rng.next_range(0.0, std::f64::consts::TAU);
            raw[k] = rng.next_range(0.5, 1.0);
        }
        let total: f64 = raw.iter().sum();
        let mut amps = [0.0; 4];
        for k in 0..4 {
            amps[k] = 0.4 * raw[k] / total;
        }
        NoiseChannel {
            freqs,
            phases,
            amps,
        }
    }

    fn eval(&self, p: [f64; 3]) -> f64 {
        let mut v = 0.5;
        for k in 0..4 {
            let dot = self.freqs[k][0] * p[0] + self.freqs[k][1] * p[1] + self.freqs[k][2] * p[2];
            v += self.amps[k] * (std::f64::consts::TAU * dot + self.phases[k]).sin();
        }
        v
    }
}

impl SceneSpec {
    pub fn new(half_extents: [f64; 3], texture: TextureKind, seed: u64) -> Result<Self> {
        if half_extents.iter().any(|&a| !a.is_finite() || a <= 0.0) {
            return Err(PanoError::invalid("room half-extents must be positive"));
        }
        if let TextureKind::Checkerboard { period } = texture {
            if !(period.is_finite() && period > 0.0 && period <= 1.0) {
                return Err(PanoError::invalid(
                    "checkerboard period must lie in (0, 1]",
                ));
            }
        }
        Ok(SceneSpec {
            half_extents,
            texture,
            seed,
        })
    }

    pub fn half_extents(&self) -> [f64; 3] {
        self.half_extents
    }

    pub fn texture(&self) -> TextureKind {
        self.texture
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        p.iter()
            .zip(&self.half_extents)
            .all(|(&c, &a)| c.is_finite() && c.abs() < a)
    }

    fn noise_channels(&self) -> [NoiseChannel; 3] {
        let mut rng = SplitMix64::new(self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x5EED);
        [
            NoiseChannel::seeded(&mut rng),
            NoiseChannel::seeded(&mut rng),
            NoiseChannel::seeded(&mut rng),
        ]
    }

    /// Flat RGB per face, seeded; used by the uniform and checker textures.
    fn face_colors(&self, salt: u64) -> [[f64; 3]; 6] {
        let mut out = [[0.0; 3]; 6];
        for (face, slot) in out.iter_mut().enumerate() {
            let mut rng = SplitMix64::new(
                self.seed
                    .wrapping_mul(0x100_0000_01B3)
                    .wrapping_add(face as u64 * 7919 + salt),
            );
            for c in slot.iter_mut() {
                *c = rng.next_range(0.15, 0.85);
            }
        }
        out
    }
}

/// Face index: 0 ±x, 1 −x, 2 +y, 3 −y, 4 +z, 5 −z encoded as axis·2 + (neg? 1 : 0).
fn face_uv(face: usize, hit: [f64; 3], a: &[f64; 3]) -> (f64, f64) {
    let (u_axis, v_axis) = match face / 2 {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    (
        (hit[u_axis] + a[u_axis]) / (2.0 * a[u_axis]),
        (hit[v_axis] + a[v_axis]) / (2.0 * a[v_axis]),
    )
}

struct Hit {
    t: f64,
    face: usize,
    point: [f64; 3],
}

/// Exact interior ray / box intersection. `dir` must be unit length.
fn intersect(position: [f64; 3], dir: [f64; 3], a: &[f64; 3]) -> Hit {
    let mut best_t = f64::INFINITY;
    let mut best_axis = 0;
    for axis in 0..3 {
        let d = dir[axis];
        if d == 0.0 {
            continue;
        }
        let bound = if d > 0.0 { a[axis] } else { -a[axis] };
        let t = (bound - position[axis]) / d;
        if t < best_t {
            best_t = t;
            best_axis = axis;
        }
    }
    let face = best_axis * 2 + usize::from(dir[best_axis] < 0.0);
    let point = [
        position[0] + best_t * dir[0],
        position[1] + best_t * dir[1],
        position[2] + best_t * dir[2],
    ];
    Hit {
        t: best_t,
        face,
        point,
    }
}

/// Render the room from `position`: exact radial depth plus the textured
/// color of each pixel ray's surface hit.
pub fn render(
    scene: &SceneSpec,
    position: [f64; 3],
    grid: &PixelGrid,
) -> Result<(EquirectFrame, DepthMap)> {
    if !scene.contains(position) {
        return Err(PanoError::invalid(format!(
            "camera position {position:?} is outside the room"
        )));
    }
    let (h, w) = (grid.height(), grid.width());
    let a = &scene.half_extents;
    let mut rgb = vec![0.0; 3 * h * w];
    let mut depth = vec![0.0; h * w];

    let noise = match scene.texture {
        TextureKind::SmoothNoise => Some(scene.noise_channels()),
        _ => None,
    };
    let colors_a = scene.face_colors(0);
    let colors_b = scene.face_colors(1);

    for y in 0..h {
        let phi = grid.phi(y);
        let (sin_phi, cos_phi) = (phi.sin(), phi.cos());
        for x in 0..w {
            let theta = grid.theta(x);
            let dir = [sin_phi * theta.cos(), sin_phi * theta.sin(), cos_phi];
            let hit = intersect(position, dir, a);
            let i = y * w + x;
            depth[i] = hit.t;
            let color = match scene.texture {
                TextureKind::SmoothNoise => {
                    let ch = noise.as_ref().expect("smooth noise channels");
                    [
                        ch[0].eval(hit.point),
                        ch[1].eval(hit.point),
                        ch[2].eval(hit.point),
                    ]
                }
                TextureKind::Checkerboard { period } => {
                    let (u, v) = face_uv(hit.face, hit.point, a);
                    let cell = ((u / period).floor() + (v / period).floor()) as i64;
                    if cell.rem_euclid(2) == 0 {
                        colors_a[hit.face]
                    } else {
                        colors_b[hit.face]
                    }
                }
                TextureKind::Uniform => colors_a[hit.face],
            };
            for c in 0..3 {
                rgb[c * h * w + i] = color[c].clamp(0.0, 1.0);
            }
        }
    }
    Ok((
        EquirectFrame::new(Tensor::new(vec![3, h, w], rgb)?)?,
        DepthMap::new(Tensor::new(vec![1, h, w], depth)?)?,
    ))
}

/// Camera path inside the room with per-step gravity-aligned motions.
#[derive(Debug, Clone)]
pub struct Trajectory {
    positions: Vec<[f64; 3]>,
    motions: Vec<CameraMotion>,
}

impl Trajectory {
    /// Relative margin to the walls required of every position.
    pub const MARGIN: f64 = 0.05;

    /// Positions must stay inside the room by the margin; each motion must
    /// reproduce the following position exactly (`p₂ = p₁ + R(δr_x)·δv`).
    pub fn new(
        scene: &SceneSpec,
        positions: Vec<[f64; 3]>,
        motions: Vec<CameraMotion>,
    ) -> Result<Self> {
        if positions.is_empty() || motions.len() + 1 != positions.len() {
            return Err(PanoError::invalid(
                "need one motion per consecutive position pair",
            ));
        }
        let a = scene.half_extents;
        let margin = Self::MARGIN * a.iter().cloned().fold(f64::INFINITY, f64::min);
        for p in &positions {
            for ax in 0..3 {
                if !(p[ax].abs() <= a[ax] - margin) {
                    return Err(PanoError::invalid(format!(
                        "position {p:?} violates the wall margin {margin}"
                    )));
                }
            }
        }
        for (i, m) in motions.iter().enumerate() {
            let step = rotate_yaw(m.dv, m.dr_x);
            for ax in 0..3 {
                if positions[i][ax] + step[ax] != positions[i + 1][ax] {
                    return Err(PanoError::invalid(format!(
                        "motion {i} does not match the position delta"
                    )));
                }
            }
        }
        Ok(Trajectory { positions, motions })
    }

    /// Default generator: straight forward translation along +x with zero
    /// yaw, starting at `start`.
    pub fn straight(scene: &SceneSpec, start: [f64; 3], step_len: f64, steps: usize) -> Result<Self> {
        let mut positions = vec![start];
        let mut motions = Vec::with_capacity(steps);
        for i in 0..steps {
            let prev = positions[i];
            positions.push([prev[0] + step_len, prev[1], prev[2]]);
            motions.push(CameraMotion::new([step_len, 0.0, 0.0], 0.0)?);
        }
        Trajectory::new(scene, positions, motions)
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn motions(&self) -> &[CameraMotion] {
        &self.motions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Rotate a vector by `yaw` radians about +z.
pub fn rotate_yaw(v: [f64; 3], yaw: f64) -> [f64; 3] {
    let (s, c) = yaw.sin_cos();
    [v[0] * c - v[1] * s, v[0] * s + v[1] * c, v[2]]
}

/// Two rendered frames one motion apart, with exact depths and the motion.
#[derive(Debug, Clone)]
pub struct FramePair {
    pub v: EquirectFrame,
    pub v_prime: EquirectFrame,
    pub d: DepthMap,
    pub d_prime: DepthMap,
    pub motion: CameraMotion,
}

/// Render the views at `position` and at `position + R(δr_x)·δv`.
pub fn generate_pair(
    scene: &SceneSpec,
    grid: &PixelGrid,
    position: [f64; 3],
    motion: CameraMotion,
) -> Result<FramePair> {
    let step = rotate_yaw(motion.dv, motion.dr_x);
    let target = [
        position[0] + step[0],
        position[1] + step[1],
        position[2] + step[2],
    ];
    let (v, d) = render(scene, position, grid)?;
    let (v_prime, d_prime) = render(scene, target, grid)?;
    Ok(FramePair {
        v,
        v_prime,
        d,
        d_prime,
        motion,
    })
}

/// Render a trajectory to `dir`: one PNG and one PFM per frame plus a
/// `motions.json` array. Returns the written paths.
pub fn export_dataset(
    scene: &SceneSpec,
    trajectory: &Trajectory,
    grid: &PixelGrid,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| PanoError::io(dir.display().to_string(), e))?;
    let mut written = Vec::new();
    for (i, position) in trajectory.positions().iter().enumerate() {
        let (frame, depth) = render(scene, *position, grid)?;
        let png = dir.join(format!("frame_{i:03}.png"));
        io::save_frame_png(&png, &frame)?;
        written.push(png);
        let pfm = dir.join(format!("depth_{i:03}.pfm"));
        io::save_pfm(&pfm, depth.tensor())?;
        written.push(pfm);
    }
    let motions = dir.join("motions.json");
    io::save_motions_json(&motions, trajectory.motions())?;
    written.push(motions);
    Ok(written)
}
