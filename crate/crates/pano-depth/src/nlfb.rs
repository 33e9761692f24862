//! Residual non-local attention over feature maps.
//!
//! For a `C×H×W` feature map `F` with `n = H·W` positions, each output
//! position aggregates every other position through embedded-Gaussian
//! affinities:
//!
//! ```text
//! f(F_i, F_j) = exp((W_θ F_i)ᵀ (W_φ F_j))
//! N_i = F_i + W_z · Σ_j f(F_i, F_j) · W_g F_j / Σ_j f(F_i, F_j)
//! ```
//!
//! θ, φ and g project to C/2 channels; `W_z` projects back to C and starts
//! at zero so a freshly constructed block is the identity. The row softmax
//! subtracts the row max before exponentiating, which leaves the values
//! unchanged in exact arithmetic.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::{Tape, Var};
use crate::error::{PanoError, Result};
use crate::tensor::Tensor;
use crate::util::SplitMix64;

const WEIGHTS_MAGIC: &[u8; 4] = b"NLW1";

/// The four projection matrices of one block: `W_θ, W_φ, W_g ∈ R^{C/2×C}`
/// and `W_z ∈ R^{C×C/2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct NonLocalWeights {
    w_theta: Tensor,
    w_phi: Tensor,
    w_g: Tensor,
    w_z: Tensor,
    channels: usize,
}

impl NonLocalWeights {
    /// All-zero weights; the block is exactly the identity.
    pub fn zeros(channels: usize) -> Result<Self> {
        check_channels(channels)?;
        let half = channels / 2;
        Ok(NonLocalWeights {
            w_theta: Tensor::zeros(vec![half, channels]),
            w_phi: Tensor::zeros(vec![half, channels]),
            w_g: Tensor::zeros(vec![half, channels]),
            w_z: Tensor::zeros(vec![channels, half]),
            channels,
        })
    }

    /// Random θ/φ/g projections with `W_z` kept at zero, the usual insertion
    /// state for a residual attention block.
    pub fn seeded(channels: usize, seed: u64) -> Result<Self> {
        check_channels(channels)?;
        let half = channels / 2;
        let mut rng = SplitMix64::new(seed);
        let scale = 1.0 / (channels as f64).sqrt();
        let mut mk = |rows: usize, cols: usize| {
            Tensor::new(
                vec![rows, cols],
                (0..rows * cols)
                    .map(|_| rng.next_range(-scale, scale))
                    .collect(),
            )
            .expect("dims")
        };
        Ok(NonLocalWeights {
            w_theta: mk(half, channels),
            w_phi: mk(half, channels),
            w_g: mk(half, channels),
            w_z: Tensor::zeros(vec![channels, half]),
            channels,
        })
    }

    pub fn from_parts(w_theta: Tensor, w_phi: Tensor, w_g: Tensor, w_z: Tensor) -> Result<Self> {
        let channels = match w_theta.shape() {
            [half, c] if *c == 2 * *half => *c,
            other => {
                return Err(PanoError::ShapeMismatch {
                    expected: "C/2×C projection".to_string(),
                    got: format!("{other:?}"),
                })
            }
        };
        check_channels(channels)?;
        let half = channels / 2;
        for (name, t, rows, cols) in [
            ("w_phi", &w_phi, half, channels),
            ("w_g", &w_g, half, channels),
            ("w_z", &w_z, channels, half),
        ] {
            if t.shape() != [rows, cols] {
                return Err(PanoError::ShapeMismatch {
                    expected: format!("{rows}×{cols} for {name}"),
                    got: format!("{:?}", t.shape()),
                });
            }
        }
        for t in [&w_theta, &w_phi, &w_g, &w_z] {
            if !t.all_finite() {
                return Err(PanoError::invalid("weights must be finite"));
            }
        }
        Ok(NonLocalWeights {
            w_theta,
            w_phi,
            w_g,
            w_z,
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn w_theta(&self) -> &Tensor {
        &self.w_theta
    }

    pub fn w_phi(&self) -> &Tensor {
        &self.w_phi
    }

    pub fn w_g(&self) -> &Tensor {
        &self.w_g
    }

    pub fn w_z(&self) -> &Tensor {
        &self.w_z
    }

    pub fn set_w_z(&mut self, w_z: Tensor) -> Result<()> {
        if w_z.shape() != [self.channels, self.channels / 2] {
            return Err(PanoError::ShapeMismatch {
                expected: format!("{}×{}", self.channels, self.channels / 2),
                got: format!("{:?}", w_z.shape()),
            });
        }
        self.w_z = w_z;
        Ok(())
    }

    /// Binary export: magic, channel count, then the four matrices as
    /// `u32 rows, u32 cols` followed by row-major little-endian `f64`s, in
    /// θ, φ, g, z order.
    pub fn write_to(&self, out: &mut impl Write) -> std::io::Result<()> {
        out.write_all(WEIGHTS_MAGIC)?;
        out.write_all(&(self.channels as u32).to_le_bytes())?;
        for t in [&self.w_theta, &self.w_phi, &self.w_g, &self.w_z] {
            let (r, c) = (t.shape()[0] as u32, t.shape()[1] as u32);
            out.write_all(&r.to_le_bytes())?;
            out.write_all(&c.to_le_bytes())?;
            for v in t.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self> {
        let fail = |message: &str| PanoError::Format {
            path: "<weights>".to_string(),
            message: message.to_string(),
        };
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(|_| fail("truncated"))?;
        if &magic != WEIGHTS_MAGIC {
            return Err(fail("bad magic"));
        }
        let mut u32buf = [0u8; 4];
        input
            .read_exact(&mut u32buf)
            .map_err(|_| fail("truncated"))?;
        let channels = u32::from_le_bytes(u32buf) as usize;
        let read_matrix = |input: &mut dyn Read| -> Result<Tensor> {
            let mut dims = [0u8; 8];
            input.read_exact(&mut dims).map_err(|_| fail("truncated"))?;
            let rows = u32::from_le_bytes(dims[0..4].try_into().expect("size")) as usize;
            let cols = u32::from_le_bytes(dims[4..8].try_into().expect("size")) as usize;
            if rows == 0 || cols == 0 || rows * cols > 1 << 24 {
                return Err(fail("implausible matrix dims"));
            }
            let mut data = vec![0.0f64; rows * cols];
            let mut buf = [0u8; 8];
            for v in data.iter_mut() {
                input.read_exact(&mut buf).map_err(|_| fail("truncated"))?;
                *v = f64::from_le_bytes(buf);
            }
            Tensor::new(vec![rows, cols], data)
        };
        let w_theta = read_matrix(input)?;
        let w_phi = read_matrix(input)?;
        let w_g = read_matrix(input)?;
        let w_z = read_matrix(input)?;
        let weights = Self::from_parts(w_theta, w_phi, w_g, w_z)?;
        if weights.channels != channels {
            return Err(fail("header channel count disagrees with matrices"));
        }
        Ok(weights)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| PanoError::io(path.display().to_string(), e))?;
        let mut out = BufWriter::new(file);
        self.write_to(&mut out)
            .and_then(|_| out.flush())
            .map_err(|e| PanoError::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| PanoError::io(path.display().to_string(), e))?;
        Self::read_from(&mut BufReader::new(file))
    }
}

fn check_channels(channels: usize) -> Result<()> {
    if channels < 2 || channels % 2 != 0 {
        return Err(PanoError::invalid(format!(
            "channel count must be even and at least 2, got {channels}"
        )));
    }
    Ok(())
}

/// Fused features at one scale, `C×H×W` with at least one spatial position.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    tensor: Tensor,
}

impl FeatureMap {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let (_, h, w) = tensor.chw()?;
        if tensor.shape().len() != 3 {
            return Err(PanoError::ShapeMismatch {
                expected: "C×H×W".to_string(),
                got: format!("{:?}", tensor.shape()),
            });
        }
        if h * w == 0 {
            return Err(PanoError::invalid("feature map needs spatial extent"));
        }
        if !tensor.all_finite() {
            return Err(PanoError::invalid("feature values must be finite"));
        }
        Ok(FeatureMap { tensor })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }
}

/// The weight matrices as tape variables.
pub struct NlfbVars {
    pub w_theta: Var,
    pub w_phi: Var,
    pub w_g: Var,
    pub w_z: Var,
}

impl NlfbVars {
    pub fn leaves(tape: &mut Tape, w: &NonLocalWeights, requires_grad: bool) -> NlfbVars {
        NlfbVars {
            w_theta: tape.leaf(w.w_theta.clone(), requires_grad),
            w_phi: tape.leaf(w.w_phi.clone(), requires_grad),
            w_g: tape.leaf(w.w_g.clone(), requires_grad),
            w_z: tape.leaf(w.w_z.clone(), requires_grad),
        }
    }
}

/// Differentiable forward pass; `features` must be a `C×H×W` variable whose
/// channel count matches the weights.
pub fn non_local_on_tape(tape: &mut Tape, features: Var, w: &NlfbVars) -> Result<Var> {
    let (c, h, w_sp) = tape.value(features).chw()?;
    let half = tape.value(w.w_theta).shape()[0];
    if tape.value(w.w_theta).shape()[1] != c {
        return Err(PanoError::ShapeMismatch {
            expected: format!("{} channels", tape.value(w.w_theta).shape()[1]),
            got: format!("{c}"),
        });
    }
    let n = h * w_sp;
    let q = tape.conv1x1(w.w_theta, features)?;
    let q = tape.reshape(q, vec![half, n])?;
    let k = tape.conv1x1(w.w_phi, features)?;
    let k = tape.reshape(k, vec![half, n])?;
    let g = tape.conv1x1(w.w_g, features)?;
    let g = tape.reshape(g, vec![half, n])?;

    let affinity = tape.matmul_tn(q, k)?; // n×n of qᵢᵀkⱼ
    let attn = tape.softmax_rows(affinity)?;
    let agg = tape.matmul_nt(attn, g)?; // n×C/2
    let z = tape.matmul_nt(w.w_z, agg)?; // C×n
    let z = tape.reshape(z, vec![c, h, w_sp])?;
    tape.add(features, z)
}

/// `N = F + W_z · softmax(QᵀK) · (W_g F)ᵀ`, the residual non-local operator.
pub fn non_local_forward(features: &FeatureMap, w: &NonLocalWeights) -> Result<FeatureMap> {
    let mut tape = Tape::new();
    let f = tape.constant(features.tensor().clone());
    let wv = NlfbVars::leaves(&mut tape, w, false);
    let out = non_local_on_tape(&mut tape, f, &wv)?;
    FeatureMap::new(tape.value(out).clone())
}

/// The row-normalized affinity matrix (`n×n`); every row sums to one.
pub fn attention_row_stochastic(features: &FeatureMap, w: &NonLocalWeights) -> Result<Tensor> {
    let (c, h, w_sp) = features.tensor().chw()?;
    if w.channels() != c {
        return Err(PanoError::ShapeMismatch {
            expected: format!("{} channels", w.channels()),
            got: format!("{c}"),
        });
    }
    let n = h * w_sp;
    let half = c / 2;
    let mut tape = Tape::new();
    let f = tape.constant(features.tensor().clone());
    let wv = NlfbVars::leaves(&mut tape, w, false);
    let q = tape.conv1x1(wv.w_theta, f)?;
    let q = tape.reshape(q, vec![half, n])?;
    let k = tape.conv1x1(wv.w_phi, f)?;
    let k = tape.reshape(k, vec![half, n])?;
    let affinity = tape.matmul_tn(q, k)?;
    let attn = tape.softmax_rows(affinity)?;
    Ok(tape.value(attn).clone())
}
