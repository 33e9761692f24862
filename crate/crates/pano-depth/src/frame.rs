//! Validated panorama frame and depth-map types.

use crate::error::{PanoError, Result};
use crate::sphere::PixelGrid;
use crate::tensor::Tensor;

/// RGB equirectangular panorama, `3×H×W`, values in `[0, 1]`, `W = 2H`.
#[derive(Debug, Clone, PartialEq)]
pub struct EquirectFrame {
    tensor: Tensor,
}

impl EquirectFrame {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let (c, h, w) = tensor.chw()?;
        if c != 3 {
            return Err(PanoError::invalid(format!(
                "equirectangular frame needs 3 channels, got {c}"
            )));
        }
        if w != 2 * h {
            return Err(PanoError::AspectRatio {
                height: h,
                width: w,
            });
        }
        if tensor
            .data()
            .iter()
            .any(|&v| !v.is_finite() || !(0.0..=1.0).contains(&v))
        {
            return Err(PanoError::invalid(
                "frame values must be finite and within [0, 1]",
            ));
        }
        Ok(EquirectFrame { tensor })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn grid(&self) -> PixelGrid {
        let (_, h, _) = self.tensor.chw().expect("validated");
        PixelGrid::new(h).expect("validated")
    }
}

/// Per-pixel radial distance ρ in meters, `1×H×W`, `W = 2H`.
///
/// Values are strictly positive and finite; a zero marks a hole (missing
/// ground truth), permitted only through [`DepthMap::with_holes`]. Geometry
/// operations such as reprojection require a hole-free map.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    tensor: Tensor,
}

impl DepthMap {
    pub fn new(tensor: Tensor) -> Result<Self> {
        Self::validate_dims(&tensor)?;
        if tensor.data().iter().any(|&v| !v.is_finite() || v <= 0.0) {
            return Err(PanoError::invalid(
                "depth values must be strictly positive and finite",
            ));
        }
        Ok(DepthMap { tensor })
    }

    /// Accept zeros as hole markers (everything else must be positive).
    pub fn with_holes(tensor: Tensor) -> Result<Self> {
        Self::validate_dims(&tensor)?;
        if tensor.data().iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(PanoError::invalid(
                "depth values must be non-negative and finite",
            ));
        }
        Ok(DepthMap { tensor })
    }

    fn validate_dims(tensor: &Tensor) -> Result<()> {
        let (c, h, w) = tensor.chw()?;
        if c != 1 {
            return Err(PanoError::invalid(format!(
                "depth map needs 1 channel, got {c}"
            )));
        }
        if w != 2 * h {
            return Err(PanoError::AspectRatio {
                height: h,
                width: w,
            });
        }
        Ok(())
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn grid(&self) -> PixelGrid {
        let (_, h, _) = self.tensor.chw().expect("validated");
        PixelGrid::new(h).expect("validated")
    }

    pub fn has_holes(&self) -> bool {
        self.tensor.data().contains(&0.0)
    }
}
