//! File formats shared by the CLI and library consumers: 8-bit sRGB PNG for
//! frames, grayscale PFM for float maps, JSON for camera motions, and
//! line-delimited JSON for optimizer traces.

mod pfm;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{PanoError, Result};
use crate::frame::EquirectFrame;
use crate::tensor::Tensor;
use crate::warp::CameraMotion;

pub use pfm::{load_pfm, save_pfm};

/// Quantize a `[0,1]` frame to 8-bit sRGB PNG.
pub fn save_frame_png(path: &Path, frame: &EquirectFrame) -> Result<()> {
    let (_, h, w) = frame.tensor().chw()?;
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                quantize(frame.tensor().at(0, y, x)),
                quantize(frame.tensor().at(1, y, x)),
                quantize(frame.tensor().at(2, y, x)),
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path)
        .map_err(|e| PanoError::Format {
            path: path.display().to_string(),
            message: e.to_string(),
        })
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn load_frame_png(path: &Path) -> Result<EquirectFrame> {
    let img = image::open(path)
        .map_err(|e| PanoError::Format {
            path: path.display().to_string(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                data[c * h * w + y * w + x] = px[c] as f64 / 255.0;
            }
        }
    }
    EquirectFrame::new(Tensor::new(vec![3, h, w], data)?)
}

/// Grayscale PNG of a `1×H×W` map scaled by `max(abs)`; presentation only.
pub fn save_map_png(path: &Path, map: &Tensor) -> Result<()> {
    let (c, h, w) = map.chw()?;
    if c != 1 {
        return Err(PanoError::invalid("map PNG export expects one channel"));
    }
    let peak = map
        .data()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (map.data()[y * w + x].abs() / peak * 255.0).round() as u8;
            buf.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    buf.save(path).map_err(|e| PanoError::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Inverse-depth visualization with a five-stop color ramp; zeros (holes)
/// render black.
pub fn save_depth_vis_png(path: &Path, depth: &Tensor) -> Result<()> {
    let (c, h, w) = depth.chw()?;
    if c != 1 {
        return Err(PanoError::invalid("depth visualization expects one channel"));
    }
    let inv: Vec<f64> = depth
        .data()
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d } else { 0.0 })
        .collect();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &inv {
        if v > 0.0 {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let span = (hi - lo).max(1e-12);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = inv[y * w + x];
            let px = if v > 0.0 {
                colormap((v - lo) / span)
            } else {
                [0, 0, 0]
            };
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path).map_err(|e| PanoError::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Dark blue → cyan → green → yellow → red ramp.
fn colormap(t: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 5] = [
        [0.05, 0.03, 0.35],
        [0.0, 0.7, 0.9],
        [0.1, 0.8, 0.25],
        [0.95, 0.9, 0.1],
        [0.85, 0.1, 0.05],
    ];
    let t = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = ((STOPS[i][c] * (1.0 - f) + STOPS[i + 1][c] * f) * 255.0).round() as u8;
    }
    out
}

/// Single camera motion as `{"dv":[x,y,z],"dr_x":r}`.
pub fn save_motion_json(path: &Path, motion: &CameraMotion) -> Result<()> {
    let body = serde_json::to_string_pretty(motion).map_err(|e| PanoError::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    std::fs::write(path, body).map_err(|e| PanoError::io(path.display().to_string(), e))
}

/// Motion list for a trajectory.
pub fn save_motions_json(path: &Path, motions: &[CameraMotion]) -> Result<()> {
    let body = serde_json::to_string_pretty(motions).map_err(|e| PanoError::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    std::fs::write(path, body).map_err(|e| PanoError::io(path.display().to_string(), e))
}

/// Accept either a single motion object or an array (`index` selects).
pub fn load_motion_json(path: &Path, index: usize) -> Result<CameraMotion> {
    let body =
        std::fs::read_to_string(path).map_err(|e| PanoError::io(path.display().to_string(), e))?;
    if let Ok(single) = serde_json::from_str::<CameraMotion>(&body) {
        if index != 0 {
            return Err(PanoError::invalid(
                "motion file holds a single record; index must be 0",
            ));
        }
        return single_checked(single);
    }
    let list: Vec<CameraMotion> = serde_json::from_str(&body).map_err(|e| PanoError::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let m = list.get(index).ok_or_else(|| {
        PanoError::invalid(format!(
            "motion index {index} out of range ({} records)",
            list.len()
        ))
    })?;
    single_checked(*m)
}

fn single_checked(m: CameraMotion) -> Result<CameraMotion> {
    CameraMotion::new(m.dv, m.dr_x)
}

/// Append one JSON record per line.
pub struct JsonLinesWriter {
    out: BufWriter<File>,
    path: String,
}

impl JsonLinesWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| PanoError::io(path.display().to_string(), e))?;
        Ok(JsonLinesWriter {
            out: BufWriter::new(file),
            path: path.display().to_string(),
        })
    }

    pub fn write<T: serde::Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| PanoError::Format {
            path: self.path.clone(),
            message: e.to_string(),
        })?;
        writeln!(self.out, "{line}").map_err(|e| PanoError::io(self.path.clone(), e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out
            .flush()
            .map_err(|e| PanoError::io(self.path.clone(), e))
    }
}
