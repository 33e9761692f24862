//! Depth geometry and self-supervision toolkit for equirectangular (360°) images.
//!
//! The crate is organized around the spherical camera model of gravity-aligned
//! panoramas (width = 2 × height, azimuth θ along columns, colatitude φ along
//! rows) and provides:
//!
//! * [`sphere`]: pixel/spherical/Cartesian coordinate conversions,
//! * [`warp`]: cross-frame reprojection and differentiable forward splatting,
//! * [`autodiff`]: a small reverse-mode tape covering exactly the operators
//!   the losses and warps need,
//! * [`losses`]: image/depth/pose consistency and scale-shift-aligned
//!   supervised losses,
//! * [`nlfb`]: a residual non-local attention block over feature maps,
//! * [`scene`]: an analytic box-room panorama renderer used as ground truth,
//! * [`optim`]: per-pixel depth and motion recovery by gradient descent,
//! * [`metrics`]: standard depth error statistics and the evaluation protocol,
//! * [`io`]: PFM / PNG / JSON file formats shared with the CLI.

pub mod autodiff;
pub mod checks;
pub mod error;
pub mod frame;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod nlfb;
pub mod optim;
pub mod scene;
pub mod sphere;
pub mod tensor;
pub mod util;
pub mod warp;

pub use error::{PanoError, Result};
pub use frame::{DepthMap, EquirectFrame};
pub use sphere::{CartesianPoint, PixelGrid, SphericalPoint};
pub use tensor::{Mask, Tensor};
pub use warp::CameraMotion;
