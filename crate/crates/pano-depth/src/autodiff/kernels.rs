//! Bilinear splat/gather kernels shared by the tape ops and the plain
//! (gradient-free) warp path.
//!
//! Coordinates are continuous pixel positions on an `H×W` grid. The column
//! coordinate wraps modulo `W` (the θ seam of an equirectangular image); the
//! row coordinate clamps to `[0, H−1]` (the poles). Both conventions are
//! value-continuous, so gradients through the coordinates are well defined
//! away from exact cell boundaries.

/// The four bilinear corner cells of a continuous coordinate, with weights
/// and weight derivatives.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Corners {
    /// Flat cell indices `y·W + x` of (x0,y0), (x1,y0), (x0,y1), (x1,y1).
    pub cells: [usize; 4],
    pub weights: [f64; 4],
    /// ∂w/∂x per corner.
    pub dwdx: [f64; 4],
    /// ∂w/∂y per corner; zero when `y` is outside the clamp interval.
    pub dwdy: [f64; 4],
}

impl Corners {
    pub fn at(x: f64, y: f64, h: usize, w: usize) -> Corners {
        let wf = w as f64;
        let mut xw = x.rem_euclid(wf);
        if xw >= wf {
            // rem_euclid can round up to exactly w for tiny negative inputs
            xw = 0.0;
        }
        let x0 = xw.floor() as usize;
        let dx = xw - x0 as f64;
        let x1 = (x0 + 1) % w;

        let y_max = (h - 1) as f64;
        let y_inside = (0.0..=y_max).contains(&y);
        let yc = y.clamp(0.0, y_max);
        let y0 = (yc.floor() as usize).min(h.saturating_sub(2));
        let dy = yc - y0 as f64;
        let y1 = (y0 + 1).min(h - 1);

        let gate = if y_inside { 1.0 } else { 0.0 };
        Corners {
            cells: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
            weights: [
                (1.0 - dx) * (1.0 - dy),
                dx * (1.0 - dy),
                (1.0 - dx) * dy,
                dx * dy,
            ],
            dwdx: [-(1.0 - dy), 1.0 - dy, -dy, dy],
            dwdy: [
                -(1.0 - dx) * gate,
                -dx * gate,
                (1.0 - dx) * gate,
                dx * gate,
            ],
        }
    }
}

/// Scatter `src` (`c` channels over `n` source pixels) onto a `c×oh×ow`
/// accumulator at the continuous target coordinates `(xs[i], ys[i])`.
/// Returns the raw accumulation (not normalized by weight).
pub(crate) fn splat_forward(
    src: &[f64],
    c: usize,
    n: usize,
    xs: &[f64],
    ys: &[f64],
    valid: Option<&[bool]>,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    debug_assert_eq!(src.len(), c * n);
    debug_assert_eq!(xs.len(), n);
    debug_assert_eq!(ys.len(), n);
    let plane = oh * ow;
    let mut out = vec![0.0; c * plane];
    for i in 0..n {
        if let Some(v) = valid {
            if !v[i] {
                continue;
            }
        }
        let co = Corners::at(xs[i], ys[i], oh, ow);
        for ch in 0..c {
            let s = src[ch * n + i];
            let base = ch * plane;
            for k in 0..4 {
                out[base + co.cells[k]] += co.weights[k] * s;
            }
        }
    }
    out
}

/// Sample `src` (`c×h×w`) at `m` continuous coordinates; returns `c×m`.
pub(crate) fn gather_forward(
    src: &[f64],
    c: usize,
    h: usize,
    w: usize,
    xs: &[f64],
    ys: &[f64],
) -> Vec<f64> {
    debug_assert_eq!(src.len(), c * h * w);
    let m = xs.len();
    let plane = h * w;
    let mut out = vec![0.0; c * m];
    for i in 0..m {
        let co = Corners::at(xs[i], ys[i], h, w);
        for ch in 0..c {
            let base = ch * plane;
            let mut acc = 0.0;
            for k in 0..4 {
                acc += co.weights[k] * src[base + co.cells[k]];
            }
            out[ch * m + i] = acc;
        }
    }
    out
}
