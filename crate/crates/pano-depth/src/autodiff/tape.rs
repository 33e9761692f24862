//! The recording tape: forward ops and the reverse pass.

use crate::error::{PanoError, Result};
use crate::tensor::Tensor;

use super::kernels::{gather_forward, splat_forward, Corners};

/// Smoothing constant for the differentiable absolute value
/// `|x| ≈ sqrt(x² + ε²)`.
pub const SMOOTH_ABS_EPS: f64 = 1e-6;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Sin(Var),
    Cos(Var),
    Atan2 { y: Var, x: Var },
    Clamp { input: Var, lo: f64, hi: f64 },
    SmoothAbs(Var),
    Sum(Var),
    Mean(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Conv1x1 { weight: Var, input: Var },
    BilinearSplat { src: Var, x: Var, y: Var, out_h: usize, out_w: usize, valid: Option<Vec<bool>> },
    BilinearGather { src: Var, x: Var, y: Var },
    AvgPool2(Var),
    SoftmaxRows(Var),
    Reshape(Var),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradient accumulators produced by [`Tape::backward`], keyed by leaf `Var`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf; `None` for leaves created
    /// with `requires_grad = false` and for non-leaf nodes.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Records an operation graph in topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// Register a non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::from_scalar(value))
    }

    /// Forward value of a recorded node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        debug_assert!(
            value.all_finite(),
            "non-finite value produced on the tape"
        );
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes
            .get(v.0)
            .ok_or_else(|| PanoError::Usage("variable is not on this tape".to_string()))
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- elementwise binary ops with broadcasting ------------------------

    /// Shapes combine when equal, when one side is a scalar, or when the
    /// smaller tensor's shape is a trailing suffix of the larger's (e.g. a
    /// `1×H×W` mask against a `C×H×W` image).
    fn broadcast_shape(&self, a: Var, b: Var) -> Result<Vec<usize>> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        let (la, lb) = (ta.len(), tb.len());
        if la == lb {
            return Ok(ta.shape().to_vec());
        }
        let (big, small, big_len, small_len) = if la > lb {
            (ta, tb, la, lb)
        } else {
            (tb, ta, lb, la)
        };
        let compatible = small_len == 1
            || (big_len % small_len == 0 && suffix_match(big.shape(), small.shape()));
        if !compatible {
            return Err(PanoError::ShapeMismatch {
                expected: format!("{:?}", big.shape()),
                got: format!("{:?}", small.shape()),
            });
        }
        Ok(big.shape().to_vec())
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let shape = self.broadcast_shape(a, b)?;
        let (da, db) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        let (la, lb) = (da.len(), db.len());
        let n = la.max(lb);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            out.push(f(da[i % la], db[i % lb]));
        }
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(op, Tensor::new(shape, out)?, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// atan2(y, x), quadrant-aware, range (−π, π].
    pub fn atan2(&mut self, y: Var, x: Var) -> Result<Var> {
        self.binary(y, x, f64::atan2, Op::Atan2 { y, x })
    }

    // ---- elementwise unary ops -------------------------------------------

    fn unary(&mut self, input: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.node(input)?.value.map(&f);
        let rg = self.needs_grad(&[input]);
        Ok(self.push(op, value, rg))
    }

    pub fn neg(&mut self, input: Var) -> Result<Var> {
        self.unary(input, |v| -v, Op::Neg(input))
    }

    pub fn exp(&mut self, input: Var) -> Result<Var> {
        self.unary(input, f64::exp, Op::Exp(input))
    }

    pub fn log(&mut self, input: Var) -> Result<Var> {
        self.unary(input, f64::ln, Op::Log(input))
    }

    pub fn sqrt(&mut self, input: Var) -> Result<Var> {
        self.unary(input, f64::sqrt, Op::Sqrt(input))
    }

    pub fn sin(&mut self, input: Var) -> Result<Var> {
        self.unary(input, f64::sin, Op::Sin(input))
    }

    pub fn cos(&mut self, input: Var) -> Result<Var> {
        self.unary(input, f64::cos, Op::Cos(input))
    }

    /// Clamp to `[lo, hi]`; the backward pass forwards gradient where the
    /// input lies inside the interval, boundary included.
    pub fn clamp(&mut self, input: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(PanoError::invalid(format!("clamp bounds [{lo}, {hi}]")));
        }
        self.unary(input, |v| v.clamp(lo, hi), Op::Clamp { input, lo, hi })
    }

    /// Smoothed absolute value `sqrt(x² + ε²)`, differentiable at zero.
    pub fn smooth_abs(&mut self, input: Var) -> Result<Var> {
        self.unary(
            input,
            |v| (v * v + SMOOTH_ABS_EPS * SMOOTH_ABS_EPS).sqrt(),
            Op::SmoothAbs(input),
        )
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total: f64 = self.node(input)?.value.data().iter().sum();
        let rg = self.needs_grad(&[input]);
        Ok(self.push(Op::Sum(input), Tensor::from_scalar(total), rg))
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let v = &self.node(input)?.value;
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.needs_grad(&[input]);
        Ok(self.push(Op::Mean(input), Tensor::from_scalar(m), rg))
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_with(a, b, false, false)
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_with(a, b, true, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_with(a, b, false, true)
    }

    fn matmul_with(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ea, eb) = (&self.node(a)?.value, &self.node(b)?.value);
        let da = dims2(ea)?;
        let db = dims2(eb)?;
        let (m, ka) = if ta { (da.1, da.0) } else { (da.0, da.1) };
        let (kb, n) = if tb { (db.1, db.0) } else { (db.0, db.1) };
        if ka != kb {
            return Err(PanoError::ShapeMismatch {
                expected: format!("inner dimension {ka}"),
                got: format!("{kb}"),
            });
        }
        let ap = materialize(ea.data(), da.0, da.1, ta);
        let bp = materialize(eb.data(), db.0, db.1, tb);
        let out = gemm(&ap, &bp, m, ka, n);
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(
            Op::MatMul { a, b, ta, tb },
            Tensor::new(vec![m, n], out)?,
            rg,
        ))
    }

    /// Pointwise (1×1) convolution: `weight (Co×Ci) · input (Ci×H×W) → Co×H×W`.
    pub fn conv1x1(&mut self, weight: Var, input: Var) -> Result<Var> {
        let (wt, it) = (&self.node(weight)?.value, &self.node(input)?.value);
        let (co, ci_w) = dims2(wt)?;
        let (ci, h, w) = it.chw()?;
        if ci != ci_w {
            return Err(PanoError::ShapeMismatch {
                expected: format!("{ci_w} input channels"),
                got: format!("{ci}"),
            });
        }
        let plane = h * w;
        let mut out = vec![0.0; co * plane];
        for o in 0..co {
            for i in 0..ci {
                let wv = wt.data()[o * ci + i];
                if wv == 0.0 {
                    continue;
                }
                let src = &it.data()[i * plane..(i + 1) * plane];
                let dst = &mut out[o * plane..(o + 1) * plane];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wv * s;
                }
            }
        }
        let rg = self.needs_grad(&[weight, input]);
        Ok(self.push(
            Op::Conv1x1 { weight, input },
            Tensor::new(vec![co, h, w], out)?,
            rg,
        ))
    }

    // ---- spatial ops ---------------------------------------------------------

    /// Forward bilinear splat of `src` (`C×Hs×Ws`) to a `C×out_h×out_w`
    /// accumulator at continuous target coordinates `x`, `y` (one per source
    /// pixel). Columns wrap, rows clamp. Returns the raw accumulation;
    /// normalize by splatting a ones tensor through the same coordinates.
    /// Entries of `valid` that are false contribute nothing.
    pub fn bilinear_splat(
        &mut self,
        src: Var,
        x: Var,
        y: Var,
        out_h: usize,
        out_w: usize,
        valid: Option<Vec<bool>>,
    ) -> Result<Var> {
        let (st, xt, yt) = (
            &self.node(src)?.value,
            &self.node(x)?.value,
            &self.node(y)?.value,
        );
        let (c, hs, ws) = st.chw()?;
        let n = hs * ws;
        if xt.len() != n || yt.len() != n {
            return Err(PanoError::ShapeMismatch {
                expected: format!("{n} coordinates"),
                got: format!("{}/{}", xt.len(), yt.len()),
            });
        }
        if let Some(v) = &valid {
            if v.len() != n {
                return Err(PanoError::ShapeMismatch {
                    expected: format!("{n} validity flags"),
                    got: format!("{}", v.len()),
                });
            }
        }
        if out_h < 2 || out_w < 2 {
            return Err(PanoError::invalid("splat target must be at least 2×2"));
        }
        let out = splat_forward(
            st.data(),
            c,
            n,
            xt.data(),
            yt.data(),
            valid.as_deref(),
            out_h,
            out_w,
        );
        let rg = self.needs_grad(&[src, x, y]);
        Ok(self.push(
            Op::BilinearSplat {
                src,
                x,
                y,
                out_h,
                out_w,
                valid,
            },
            Tensor::new(vec![c, out_h, out_w], out)?,
            rg,
        ))
    }

    /// Bilinear sample of `src` (`C×H×W`) at continuous coordinates; output
    /// shape is `[C] ++ shape(x)`. Columns wrap, rows clamp.
    pub fn bilinear_gather(&mut self, src: Var, x: Var, y: Var) -> Result<Var> {
        let (st, xt, yt) = (
            &self.node(src)?.value,
            &self.node(x)?.value,
            &self.node(y)?.value,
        );
        let (c, h, w) = st.chw()?;
        if xt.len() != yt.len() {
            return Err(PanoError::ShapeMismatch {
                expected: format!("{} y coordinates", xt.len()),
                got: format!("{}", yt.len()),
            });
        }
        let out = gather_forward(st.data(), c, h, w, xt.data(), yt.data());
        let mut shape = vec![c];
        shape.extend_from_slice(xt.shape());
        let rg = self.needs_grad(&[src, x, y]);
        Ok(self.push(
            Op::BilinearGather { src, x, y },
            Tensor::new(shape, out)?,
            rg,
        ))
    }

    /// Non-overlapping 2×2 average pooling of an image-shaped tensor.
    pub fn avg_pool2(&mut self, input: Var) -> Result<Var> {
        let t = &self.node(input)?.value;
        let (c, h, w) = t.chw()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(PanoError::invalid(format!(
                "2× pooling requires even dimensions, got {h}×{w}"
            )));
        }
        let (nh, nw) = (h / 2, w / 2);
        let mut out = vec![0.0; c * nh * nw];
        for ch in 0..c {
            for y in 0..nh {
                for x in 0..nw {
                    let i0 = (ch * h + 2 * y) * w + 2 * x;
                    let i1 = i0 + w;
                    out[(ch * nh + y) * nw + x] =
                        0.25 * (t.data()[i0] + t.data()[i0 + 1] + t.data()[i1] + t.data()[i1 + 1]);
                }
            }
        }
        let shape = if t.shape().len() == 2 {
            vec![nh, nw]
        } else {
            vec![c, nh, nw]
        };
        let rg = self.needs_grad(&[input]);
        Ok(self.push(Op::AvgPool2(input), Tensor::new(shape, out)?, rg))
    }

    /// Row-wise softmax of a 2-d tensor, stabilized by max subtraction.
    pub fn softmax_rows(&mut self, input: Var) -> Result<Var> {
        let t = &self.node(input)?.value;
        let (r, c) = dims2(t)?;
        let mut out = vec![0.0; r * c];
        for row in 0..r {
            let slice = &t.data()[row * c..(row + 1) * c];
            let max = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, &v) in slice.iter().enumerate() {
                let e = (v - max).exp();
                out[row * c + j] = e;
                denom += e;
            }
            for j in 0..c {
                out[row * c + j] /= denom;
            }
        }
        let rg = self.needs_grad(&[input]);
        Ok(self.push(
            Op::SoftmaxRows(input),
            Tensor::new(vec![r, c], out)?,
            rg,
        ))
    }

    /// Shape-only view with the same element count.
    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.node(input)?.value.clone().reshaped(shape)?;
        let rg = self.needs_grad(&[input]);
        Ok(self.push(Op::Reshape(input), value, rg))
    }

    // ---- convenience composites ---------------------------------------------

    /// `scale·x + offset` with plain-number coefficients.
    pub fn scale_add(&mut self, x: Var, scale: f64, offset: f64) -> Result<Var> {
        let s = self.scalar(scale);
        let o = self.scalar(offset);
        let sx = self.mul(x, s)?;
        self.add(sx, o)
    }

    // ---- reverse pass ---------------------------------------------------------

    /// Accumulate `∂loss/∂leaf` for every differentiable leaf. `loss` must be
    /// scalar-valued and on this tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_node = self.node(loss)?;
        if loss_node.value.len() != 1 {
            return Err(PanoError::Usage(
                "backward requires a scalar loss".to_string(),
            ));
        }
        if !loss_node.requires_grad {
            return Err(PanoError::Usage(
                "loss does not depend on any differentiable input".to_string(),
            ));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                adj[id] = None;
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {
                    let shape = self.nodes[id].value.shape().to_vec();
                    grads[id] = Some(Tensor::new(shape, g)?);
                }
                op => self.propagate(op, id, &g, &mut adj),
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, op: &Op, out_id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => unreachable!("leaves handled by backward"),
            Op::Add(a, b) => {
                self.accum_broadcast(*a, g, adj, |_, gi| gi);
                self.accum_broadcast(*b, g, adj, |_, gi| gi);
            }
            Op::Sub(a, b) => {
                self.accum_broadcast(*a, g, adj, |_, gi| gi);
                self.accum_broadcast(*b, g, adj, |_, gi| -gi);
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                self.accum_broadcast(*a, g, adj, |i, gi| gi * db[i % db.len()]);
                self.accum_broadcast(*b, g, adj, |i, gi| gi * da[i % da.len()]);
            }
            Op::Div(a, b) => {
                let (da, db) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                self.accum_broadcast(*a, g, adj, |i, gi| gi / db[i % db.len()]);
                self.accum_broadcast(*b, g, adj, |i, gi| {
                    let bv = db[i % db.len()];
                    -gi * da[i % da.len()] / (bv * bv)
                });
            }
            Op::Atan2 { y, x } => {
                let (dy, dx) = (self.nodes[y.0].value.data(), self.nodes[x.0].value.data());
                self.accum_broadcast(*y, g, adj, |i, gi| {
                    let (yv, xv) = (dy[i % dy.len()], dx[i % dx.len()]);
                    gi * xv / (xv * xv + yv * yv)
                });
                self.accum_broadcast(*x, g, adj, |i, gi| {
                    let (yv, xv) = (dy[i % dy.len()], dx[i % dx.len()]);
                    -gi * yv / (xv * xv + yv * yv)
                });
            }
            Op::Neg(a) => self.accum_broadcast(*a, g, adj, |_, gi| -gi),
            Op::Exp(a) => {
                let out = self.nodes[out_id].value.data();
                self.accum_broadcast(*a, g, adj, |i, gi| gi * out[i]);
            }
            Op::Log(a) => {
                let da = self.nodes[a.0].value.data();
                self.accum_broadcast(*a, g, adj, |i, gi| gi / da[i]);
            }
            Op::Sqrt(a) => {
                let out = self.nodes[out_id].value.data();
                self.accum_broadcast(*a, g, adj, |i, gi| gi / (2.0 * out[i]));
            }
            Op::Sin(a) => {
                let da = self.nodes[a.0].value.data();
                self.accum_broadcast(*a, g, adj, |i, gi| gi * da[i].cos());
            }
            Op::Cos(a) => {
                let da = self.nodes[a.0].value.data();
                self.accum_broadcast(*a, g, adj, |i, gi| -gi * da[i].sin());
            }
            Op::Clamp { input, lo, hi } => {
                let da = self.nodes[input.0].value.data();
                let (lo, hi) = (*lo, *hi);
                self.accum_broadcast(*input, g, adj, |i, gi| {
                    if da[i] >= lo && da[i] <= hi {
                        gi
                    } else {
                        0.0
                    }
                });
            }
            Op::SmoothAbs(a) => {
                let (da, out) = (self.nodes[a.0].value.data(), self.nodes[out_id].value.data());
                self.accum_broadcast(*a, g, adj, |i, gi| gi * da[i] / out[i]);
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.len();
                let slot = ensure(adj, a.0, n);
                for s in slot.iter_mut() {
                    *s += g[0];
                }
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len();
                let gi = g[0] / n as f64;
                let slot = ensure(adj, a.0, n);
                for s in slot.iter_mut() {
                    *s += gi;
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (ea, eb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let da = dims2(ea).expect("validated");
                let db = dims2(eb).expect("validated");
                let (m, k) = if *ta { (da.1, da.0) } else { (da.0, da.1) };
                let n = if *tb { db.0 } else { db.1 };
                let ap = materialize(ea.data(), da.0, da.1, *ta);
                let bp = materialize(eb.data(), db.0, db.1, *tb);
                // dA' = G·B'ᵀ (m×k), dB' = A'ᵀ·G (k×n)
                let bt = materialize(&bp, k, n, true);
                let mut d_ap = gemm(g, &bt, m, n, k);
                let at = materialize(&ap, m, k, true);
                let mut d_bp = gemm(&at, g, k, m, n);
                if *ta {
                    d_ap = materialize(&d_ap, m, k, true);
                }
                if *tb {
                    d_bp = materialize(&d_bp, k, n, true);
                }
                if self.nodes[a.0].requires_grad {
                    let slot = ensure(adj, a.0, ea.len());
                    for (s, v) in slot.iter_mut().zip(&d_ap) {
                        *s += v;
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let slot = ensure(adj, b.0, eb.len());
                    for (s, v) in slot.iter_mut().zip(&d_bp) {
                        *s += v;
                    }
                }
            }
            Op::Conv1x1 { weight, input } => {
                let (wt, it) = (&self.nodes[weight.0].value, &self.nodes[input.0].value);
                let (co, ci) = dims2(wt).expect("validated");
                let (_, h, w) = it.chw().expect("validated");
                let plane = h * w;
                if self.nodes[weight.0].requires_grad {
                    let slot = ensure(adj, weight.0, wt.len());
                    for o in 0..co {
                        for i in 0..ci {
                            let mut acc = 0.0;
                            for p in 0..plane {
                                acc += g[o * plane + p] * it.data()[i * plane + p];
                            }
                            slot[o * ci + i] += acc;
                        }
                    }
                }
                if self.nodes[input.0].requires_grad {
                    let slot = ensure(adj, input.0, it.len());
                    for i in 0..ci {
                        for o in 0..co {
                            let wv = wt.data()[o * ci + i];
                            if wv == 0.0 {
                                continue;
                            }
                            for p in 0..plane {
                                slot[i * plane + p] += wv * g[o * plane + p];
                            }
                        }
                    }
                }
            }
            Op::BilinearSplat {
                src,
                x,
                y,
                out_h,
                out_w,
                valid,
            } => {
                let (st, xt, yt) = (
                    &self.nodes[src.0].value,
                    &self.nodes[x.0].value,
                    &self.nodes[y.0].value,
                );
                let (c, hs, ws) = st.chw().expect("validated");
                let n = hs * ws;
                let plane = out_h * out_w;
                let want_src = self.nodes[src.0].requires_grad;
                let want_x = self.nodes[x.0].requires_grad;
                let want_y = self.nodes[y.0].requires_grad;
                let mut d_src = if want_src { vec![0.0; c * n] } else { Vec::new() };
                let mut d_x = if want_x { vec![0.0; n] } else { Vec::new() };
                let mut d_y = if want_y { vec![0.0; n] } else { Vec::new() };
                for i in 0..n {
                    if let Some(v) = valid {
                        if !v[i] {
                            continue;
                        }
                    }
                    let co = Corners::at(xt.data()[i], yt.data()[i], *out_h, *out_w);
                    for ch in 0..c {
                        let base = ch * plane;
                        let s = st.data()[ch * n + i];
                        let mut gw = 0.0;
                        let mut gx = 0.0;
                        let mut gy = 0.0;
                        for k in 0..4 {
                            let go = g[base + co.cells[k]];
                            gw += co.weights[k] * go;
                            gx += co.dwdx[k] * go;
                            gy += co.dwdy[k] * go;
                        }
                        if want_src {
                            d_src[ch * n + i] += gw;
                        }
                        if want_x {
                            d_x[i] += s * gx;
                        }
                        if want_y {
                            d_y[i] += s * gy;
                        }
                    }
                }
                if want_src {
                    add_into(ensure(adj, src.0, c * n), &d_src);
                }
                if want_x {
                    add_into(ensure(adj, x.0, n), &d_x);
                }
                if want_y {
                    add_into(ensure(adj, y.0, n), &d_y);
                }
            }
            Op::BilinearGather { src, x, y } => {
                let (st, xt, yt) = (
                    &self.nodes[src.0].value,
                    &self.nodes[x.0].value,
                    &self.nodes[y.0].value,
                );
                let (c, h, w) = st.chw().expect("validated");
                let plane = h * w;
                let m = xt.len();
                let want_src = self.nodes[src.0].requires_grad;
                let want_x = self.nodes[x.0].requires_grad;
                let want_y = self.nodes[y.0].requires_grad;
                let mut d_src = if want_src { vec![0.0; c * plane] } else { Vec::new() };
                let mut d_x = if want_x { vec![0.0; m] } else { Vec::new() };
                let mut d_y = if want_y { vec![0.0; m] } else { Vec::new() };
                for i in 0..m {
                    let co = Corners::at(xt.data()[i], yt.data()[i], h, w);
                    for ch in 0..c {
                        let base = ch * plane;
                        let go = g[ch * m + i];
                        for k in 0..4 {
                            if want_src {
                                d_src[base + co.cells[k]] += co.weights[k] * go;
                            }
                            if want_x {
                                d_x[i] += go * co.dwdx[k] * st.data()[base + co.cells[k]];
                            }
                            if want_y {
                                d_y[i] += go * co.dwdy[k] * st.data()[base + co.cells[k]];
                            }
                        }
                    }
                }
                if want_src {
                    add_into(ensure(adj, src.0, c * plane), &d_src);
                }
                if want_x {
                    add_into(ensure(adj, x.0, m), &d_x);
                }
                if want_y {
                    add_into(ensure(adj, y.0, m), &d_y);
                }
            }
            Op::AvgPool2(a) => {
                let t = &self.nodes[a.0].value;
                let (c, h, w) = t.chw().expect("validated");
                let (nh, nw) = (h / 2, w / 2);
                let slot = ensure(adj, a.0, t.len());
                for ch in 0..c {
                    for y in 0..nh {
                        for x in 0..nw {
                            let gi = 0.25 * g[(ch * nh + y) * nw + x];
                            let i0 = (ch * h + 2 * y) * w + 2 * x;
                            slot[i0] += gi;
                            slot[i0 + 1] += gi;
                            slot[i0 + w] += gi;
                            slot[i0 + w + 1] += gi;
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let out = self.nodes[out_id].value.data();
                let (r, c) = dims2(&self.nodes[out_id].value).expect("validated");
                let slot = ensure(adj, a.0, r * c);
                for row in 0..r {
                    let s = &out[row * c..(row + 1) * c];
                    let gr = &g[row * c..(row + 1) * c];
                    let dot: f64 = s.iter().zip(gr).map(|(si, gi)| si * gi).sum();
                    for j in 0..c {
                        slot[row * c + j] += s[j] * (gr[j] - dot);
                    }
                }
            }
            Op::Reshape(a) => {
                add_into(ensure(adj, a.0, g.len()), g);
            }
        }
    }

    /// Accumulate `f(i, g[i])` into the adjoint of `target`, folding repeated
    /// broadcast blocks back onto the smaller tensor.
    fn accum_broadcast(
        &self,
        target: Var,
        g: &[f64],
        adj: &mut [Option<Vec<f64>>],
        f: impl Fn(usize, f64) -> f64,
    ) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let len = self.nodes[target.0].value.len();
        let slot = ensure(adj, target.0, len);
        for (i, &gi) in g.iter().enumerate() {
            slot[i % len] += f(i, gi);
        }
    }
}

fn ensure(adj: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    adj[id].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(slot: &mut [f64], values: &[f64]) {
    for (s, v) in slot.iter_mut().zip(values) {
        *s += v;
    }
}

fn suffix_match(big: &[usize], small: &[usize]) -> bool {
    let trimmed: Vec<usize> = small
        .iter()
        .copied()
        .skip_while(|&d| d == 1)
        .collect();
    if trimmed.len() > big.len() {
        return false;
    }
    big[big.len() - trimmed.len()..] == trimmed[..]
}

fn dims2(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(PanoError::ShapeMismatch {
            expected: "a 2-d tensor".to_string(),
            got: format!("{other:?}"),
        }),
    }
}

/// Row-major copy, optionally transposed.
fn materialize(data: &[f64], rows: usize, cols: usize, transpose: bool) -> Vec<f64> {
    if !transpose {
        return data.to_vec();
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn product_rule() {
        // d(x·y)/dx at (3, 4) → 4
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_scalar(3.0), true);
        let y = tape.leaf(Tensor::from_scalar(4.0), true);
        let z = tape.mul(x, y).unwrap();
        let grads = tape.backward(z).unwrap();
        assert_eq!(grads.get(x).unwrap().data()[0], 4.0);
        assert_eq!(grads.get(y).unwrap().data()[0], 3.0);
    }

    #[test]
    fn atan2_partial() {
        // d(atan2(y,x))/dy at (1,1) → x/(x²+y²) = 1/2
        let mut tape = Tape::new();
        let y = tape.leaf(Tensor::from_scalar(1.0), true);
        let x = tape.leaf(Tensor::from_scalar(1.0), true);
        let z = tape.atan2(y, x).unwrap();
        let grads = tape.backward(z).unwrap();
        assert!(close(grads.get(y).unwrap().data()[0], 0.5, 1e-15));
        assert!(close(grads.get(x).unwrap().data()[0], -0.5, 1e-15));
    }

    #[test]
    fn zero_gradient_law() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_scalar(2.0), true);
        let c = tape.leaf(Tensor::from_scalar(5.0), false);
        let z = tape.mul(x, c).unwrap();
        let grads = tape.backward(z).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data()[0], 5.0);
    }

    #[test]
    fn foreign_variable_is_a_usage_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_scalar(1.0), true);
        let y = tape.exp(x).unwrap();
        let mut other = Tape::new();
        // y's index does not exist on the fresh tape
        assert!(matches!(other.backward(y), Err(PanoError::Usage(_))));
        assert!(matches!(other.exp(y), Err(PanoError::Usage(_))));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(vec![2, 2]), true);
        let y = tape.exp(x).unwrap();
        assert!(matches!(tape.backward(y), Err(PanoError::Usage(_))));
    }

    #[test]
    fn channel_broadcast_mul() {
        let mut tape = Tape::new();
        let img = tape.leaf(
            Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            true,
        );
        let mask = tape.leaf(Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap(), false);
        let m = tape.mul(img, mask).unwrap();
        assert_eq!(tape.value(m).data(), &[1.0, 0.0, 3.0, 0.0]);
        let s = tape.sum(m).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(img).unwrap().data(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn scalar_broadcast_folds_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), false);
        let s = tape.leaf(Tensor::from_scalar(2.0), true);
        let y = tape.mul(x, s).unwrap();
        let total = tape.sum(y).unwrap();
        let grads = tape.backward(total).unwrap();
        // d(Σ 2·x)/ds = Σx = 6
        assert_eq!(grads.get(s).unwrap().data()[0], 6.0);
    }

    #[test]
    fn accumulation_is_order_independent() {
        let build = |swap: bool| -> (f64, f64) {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::from_scalar(1.5), true);
            let a = tape.exp(x).unwrap();
            let b = tape.sin(x).unwrap();
            let sum = if swap {
                tape.add(b, a).unwrap()
            } else {
                tape.add(a, b).unwrap()
            };
            let grads = tape.backward(sum).unwrap();
            (
                tape.value(sum).data()[0],
                grads.get(x).unwrap().data()[0],
            )
        };
        let (v0, g0) = build(false);
        let (v1, g1) = build(true);
        assert!(close(v0, v1, 1e-12));
        assert!(close(g0, g1, 1e-12));
    }

    #[test]
    fn matmul_transposed_variants_agree() {
        let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();

        let mut tape = Tape::new();
        let va = tape.leaf(a.clone(), false);
        let vb = tape.leaf(b.clone(), false);
        let plain = tape.matmul(va, vb).unwrap();

        let at = Tensor::new(vec![3, 2], vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]).unwrap();
        let vat = tape.leaf(at, false);
        let tn = tape.matmul_tn(vat, vb).unwrap();

        let bt = Tensor::new(vec![2, 3], vec![7.0, 9.0, 11.0, 8.0, 10.0, 12.0]).unwrap();
        let vbt = tape.leaf(bt, false);
        let nt = tape.matmul_nt(va, vbt).unwrap();

        assert_eq!(tape.value(plain).data(), tape.value(tn).data());
        assert_eq!(tape.value(plain).data(), tape.value(nt).data());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::new(vec![2, 3], vec![0.0, 1.0, -2.0, 5.0, 5.0, 5.0]).unwrap(),
            false,
        );
        let s = tape.softmax_rows(x).unwrap();
        let v = tape.value(s).data();
        assert!(close(v[0] + v[1] + v[2], 1.0, 1e-15));
        assert!(close(v[3] + v[4] + v[5], 1.0, 1e-15));
        assert!(close(v[3], 1.0 / 3.0, 1e-15));
    }

    #[test]
    fn splat_identity_preserves_values() {
        let mut tape = Tape::new();
        let (h, w) = (3, 6);
        let src = Tensor::new(vec![1, h, w], (0..h * w).map(|v| v as f64).collect()).unwrap();
        let xs = Tensor::new(
            vec![h, w],
            (0..h * w).map(|i| (i % w) as f64).collect(),
        )
        .unwrap();
        let ys = Tensor::new(
            vec![h, w],
            (0..h * w).map(|i| (i / w) as f64).collect(),
        )
        .unwrap();
        let vs = tape.leaf(src.clone(), false);
        let vx = tape.constant(xs);
        let vy = tape.constant(ys);
        let out = tape.bilinear_splat(vs, vx, vy, h, w, None).unwrap();
        assert_eq!(tape.value(out).data(), src.data());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]), false);
        let b = tape.leaf(Tensor::zeros(vec![4]), false);
        assert!(tape.add(a, b).is_err());
    }
}
