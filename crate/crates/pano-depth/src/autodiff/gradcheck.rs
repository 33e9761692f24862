//! Central finite-difference verification of tape gradients.

use crate::error::{PanoError, Result};
use crate::tensor::Tensor;
use crate::util::SplitMix64;

use super::tape::{Tape, Var};

/// Per-input comparison of tape gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative error per input tensor.
    pub per_input: Vec<f64>,
    pub max_rel_err: f64,
    pub passed: bool,
}

const PASS_THRESHOLD: f64 = 1e-4;
/// Differences below this are treated as matching regardless of relative
/// error; central differences carry about this much absolute noise.
const ABS_FLOOR: f64 = 1e-7;

/// Compare the tape gradient of a scalar-valued function against central
/// finite differences with step `h` (must lie in `[1e-7, 1e-3]`).
///
/// `build` is invoked on fresh tapes: once with differentiable leaves for the
/// analytic gradient and `2·Σ len(inputs)` more times for the perturbed
/// forward evaluations.
pub fn grad_check<F>(build: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(PanoError::Usage(format!(
            "finite-difference step {h} outside [1e-7, 1e-3]"
        )));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect();
    let out = build(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(PanoError::Usage(
            "grad_check requires a scalar-valued function".to_string(),
        ));
    }
    let grads = tape.backward(out)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let o = build(&mut t, &vs)?;
        t.value(o).scalar()
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (idx, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[idx].shape().to_vec()));
        let mut worst = 0.0_f64;
        for j in 0..inputs[idx].len() {
            let orig = work[idx].data()[j];
            work[idx].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[idx].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[idx].data_mut()[j] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let a = analytic.data()[j];
            let diff = (a - fd).abs();
            let err = if diff <= ABS_FLOOR {
                0.0
            } else {
                diff / a.abs().max(fd.abs())
            };
            worst = worst.max(err);
        }
        per_input.push(worst);
    }
    let max_rel_err = per_input.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_input,
        max_rel_err,
        passed: max_rel_err < PASS_THRESHOLD,
    })
}

/// Outcome of one named check in the operator suite.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn rand_tensor(rng: &mut SplitMix64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.next_range(lo, hi)).collect(),
    )
    .expect("shape")
}

/// Coordinates that keep their fractional part away from cell boundaries so
/// the splat/gather output stays differentiable under the probe step.
fn rand_coords(rng: &mut SplitMix64, n: usize, span: f64) -> Tensor {
    Tensor::new(
        vec![n],
        (0..n)
            .map(|_| {
                let cell = (rng.next_f64() * span).floor() - span / 2.0;
                cell + rng.next_range(0.2, 0.8)
            })
            .collect(),
    )
    .expect("coords")
}

fn rand_rows(rng: &mut SplitMix64, n: usize, h: usize) -> Tensor {
    Tensor::new(
        vec![n],
        (0..n)
            .map(|_| {
                let cell = (rng.next_f64() * (h - 1) as f64).floor();
                cell + rng.next_range(0.2, 0.8)
            })
            .collect(),
    )
    .expect("coords")
}

/// Reduce an arbitrary output to a scalar through a fixed random projection,
/// so every output element receives a distinct upstream gradient.
fn project(tape: &mut Tape, out: Var, rng: &mut SplitMix64) -> Result<Var> {
    let len = tape.value(out).len();
    let shape = tape.value(out).shape().to_vec();
    let proj = tape.constant(rand_tensor(rng, &shape, -1.0, 1.0));
    let _ = len;
    let weighted = tape.mul(out, proj)?;
    tape.sum(weighted)
}

struct Instance {
    inputs: Vec<Tensor>,
    build: Build,
}

/// Run `count` randomized instances of one check. A draw whose probe lands
/// on a measure-zero non-differentiable configuration (a bilinear cell
/// boundary, a clamp edge, a smoothing-kernel zero crossing) produces a
/// false mismatch; such draws are redrawn a bounded number of times. A
/// systematically wrong backward fails every draw and therefore still fails
/// the check.
fn run_instances(
    name: &str,
    count: usize,
    seed: u64,
    make: impl Fn(&mut SplitMix64) -> Instance,
) -> Result<OpCheck> {
    let mut rng = SplitMix64::new(seed ^ fxhash(name));
    let mut worst = 0.0_f64;
    for _ in 0..count {
        let mut best = f64::INFINITY;
        for _attempt in 0..3 {
            let inst = make(&mut rng);
            let report = grad_check(&inst.build, &inst.inputs, 1e-5)?;
            best = best.min(report.max_rel_err);
            if best < PASS_THRESHOLD {
                break;
            }
        }
        worst = worst.max(best);
    }
    Ok(OpCheck {
        name: name.to_string(),
        max_rel_err: worst,
        passed: worst < PASS_THRESHOLD,
    })
}

fn fxhash(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |acc, b| {
            (acc ^ b as u64).wrapping_mul(0x100_0000_01b3)
        })
}

/// Run 20 randomized gradient checks for every tape operator. Returns one
/// entry per operator; all must pass for the tape to be trusted.
pub fn op_suite(seed: u64) -> Result<Vec<OpCheck>> {
    let mut checks = Vec::new();
    let n = 20;

    // Binary elementwise ops, cycling through same-shape, scalar, and
    // channel-broadcast operand layouts.
    for (name, which) in [("add", 0u8), ("sub", 1), ("mul", 2), ("div", 3)] {
        checks.push(run_instances(name, n, seed, |rng| {
            let layout = rng.next_u64() % 3;
            let (sa, sb): (Vec<usize>, Vec<usize>) = match layout {
                0 => (vec![2, 3], vec![2, 3]),
                1 => (vec![2, 3], vec![1]),
                _ => (vec![2, 2, 3], vec![1, 2, 3]),
            };
            let a = rand_tensor(rng, &sa, -2.0, 2.0);
            let mut b = rand_tensor(rng, &sb, -2.0, 2.0);
            if which == 3 {
                // keep divisors away from zero
                for v in b.data_mut() {
                    *v = v.signum() * (v.abs() + 0.5);
                }
            }
            Instance {
                inputs: vec![a, b],
                build: Box::new(move |tape, vars| {
                    let out = match which {
                        0 => tape.add(vars[0], vars[1])?,
                        1 => tape.sub(vars[0], vars[1])?,
                        2 => tape.mul(vars[0], vars[1])?,
                        _ => tape.div(vars[0], vars[1])?,
                    };
                    let mut prng = SplitMix64::new(7);
                    project(tape, out, &mut prng)
                }),
            }
        })?);
    }

    let unary: [(&str, fn(&mut Tape, Var) -> Result<Var>, f64, f64); 6] = [
        ("neg", |t, v| t.neg(v), -2.0, 2.0),
        ("exp", |t, v| t.exp(v), -2.0, 2.0),
        ("log", |t, v| t.log(v), 0.2, 3.0),
        ("sqrt", |t, v| t.sqrt(v), 0.2, 3.0),
        ("sin", |t, v| t.sin(v), -3.0, 3.0),
        ("cos", |t, v| t.cos(v), -3.0, 3.0),
    ];
    for (name, f, lo, hi) in unary {
        checks.push(run_instances(name, n, seed, move |rng| {
            let x = rand_tensor(rng, &[2, 4], lo, hi);
            Instance {
                inputs: vec![x],
                build: Box::new(move |tape, vars| {
                    let out = f(tape, vars[0])?;
                    let mut prng = SplitMix64::new(11);
                    project(tape, out, &mut prng)
                }),
            }
        })?);
    }

    checks.push(run_instances("atan2", n, seed, |rng| {
        // sample in polar form to stay away from the origin
        let shape = [2, 3];
        let cnt: usize = shape.iter().product();
        let mut ys = Vec::with_capacity(cnt);
        let mut xs = Vec::with_capacity(cnt);
        for _ in 0..cnt {
            let r = rng.next_range(0.5, 2.0);
            let a = rng.next_range(0.0, std::f64::consts::TAU);
            ys.push(r * a.sin());
            xs.push(r * a.cos());
        }
        Instance {
            inputs: vec![
                Tensor::new(shape.to_vec(), ys).expect("shape"),
                Tensor::new(shape.to_vec(), xs).expect("shape"),
            ],
            build: Box::new(|tape, vars| {
                let out = tape.atan2(vars[0], vars[1])?;
                let mut prng = SplitMix64::new(13);
                project(tape, out, &mut prng)
            }),
        }
    })?);

    checks.push(run_instances("clamp", n, seed, |rng| {
        // keep samples clear of the clamp boundaries by more than the probe
        let x = Tensor::new(
            vec![8],
            (0..8)
                .map(|_| {
                    let v = rng.next_range(-1.2, 1.2);
                    if (v - 0.7).abs() < 0.05 || (v + 0.5).abs() < 0.05 {
                        v + 0.1
                    } else {
                        v
                    }
                })
                .collect(),
        )
        .expect("shape");
        Instance {
            inputs: vec![x],
            build: Box::new(|tape, vars| {
                let out = tape.clamp(vars[0], -0.5, 0.7)?;
                let mut prng = SplitMix64::new(17);
                project(tape, out, &mut prng)
            }),
        }
    })?);

    checks.push(run_instances("abs_smoothed", n, seed, |rng| {
        // the smoothing kernel has extreme curvature inside |x| < ~1e-4
        let x = Tensor::new(
            vec![8],
            (0..8)
                .map(|_| {
                    let v = rng.next_range(0.05, 2.0);
                    if rng.next_bool() {
                        v
                    } else {
                        -v
                    }
                })
                .collect(),
        )
        .expect("shape");
        Instance {
            inputs: vec![x],
            build: Box::new(|tape, vars| {
                let out = tape.smooth_abs(vars[0])?;
                let mut prng = SplitMix64::new(19);
                project(tape, out, &mut prng)
            }),
        }
    })?);

    checks.push(run_instances("sum", n, seed, |rng| {
        let x = rand_tensor(rng, &[3, 3], -2.0, 2.0);
        Instance {
            inputs: vec![x],
            build: Box::new(|tape, vars| tape.sum(vars[0])),
        }
    })?);

    checks.push(run_instances("mean", n, seed, |rng| {
        let x = rand_tensor(rng, &[3, 3], -2.0, 2.0);
        Instance {
            inputs: vec![x],
            build: Box::new(|tape, vars| tape.mean(vars[0])),
        }
    })?);

    for (name, ta, tb) in [
        ("matmul", false, false),
        ("matmul_tn", true, false),
        ("matmul_nt", false, true),
    ] {
        checks.push(run_instances(name, n, seed, move |rng| {
            let (m, k, nn) = (3, 4, 2);
            let sa = if ta { vec![k, m] } else { vec![m, k] };
            let sb = if tb { vec![nn, k] } else { vec![k, nn] };
            let a = rand_tensor(rng, &sa, -1.5, 1.5);
            let b = rand_tensor(rng, &sb, -1.5, 1.5);
            Instance {
                inputs: vec![a, b],
                build: Box::new(move |tape, vars| {
                    let out = match (ta, tb) {
                        (false, false) => tape.matmul(vars[0], vars[1])?,
                        (true, false) => tape.matmul_tn(vars[0], vars[1])?,
                        _ => tape.matmul_nt(vars[0], vars[1])?,
                    };
                    let mut prng = SplitMix64::new(23);
                    project(tape, out, &mut prng)
                }),
            }
        })?);
    }

    checks.push(run_instances("conv1x1", n, seed, |rng| {
        let w = rand_tensor(rng, &[2, 3], -1.0, 1.0);
        let x = rand_tensor(rng, &[3, 2, 2], -1.0, 1.0);
        Instance {
            inputs: vec![w, x],
            build: Box::new(|tape, vars| {
                let out = tape.conv1x1(vars[0], vars[1])?;
                let mut prng = SplitMix64::new(29);
                project(tape, out, &mut prng)
            }),
        }
    })?);

    checks.push(run_instances("bilinear_splat", n, seed, |rng| {
        let (h, w) = (3, 4);
        let src = rand_tensor(rng, &[2, h, w], -1.0, 1.0);
        let xs = rand_coords(rng, h * w, 2.0 * w as f64);
        let ys = rand_rows(rng, h * w, h);
        Instance {
            inputs: vec![src, xs, ys],
            build: Box::new(move |tape, vars| {
                let out = tape.bilinear_splat(vars[0], vars[1], vars[2], h, w, None)?;
                let mut prng = SplitMix64::new(31);
                project(tape, out, &mut prng)
            }),
        }
    })?);

    checks.push(run_instances("bilinear_gather", n, seed, |rng| {
        let (h, w) = (4, 6);
        let src = rand_tensor(rng, &[2, h, w], -1.0, 1.0);
        let m = 5;
        let xs = rand_coords(rng, m, 2.0 * w as f64);
        let ys = rand_rows(rng, m, h);
        Instance {
            inputs: vec![src, xs, ys],
            build: Box::new(|tape, vars| {
                let out = tape.bilinear_gather(vars[0], vars[1], vars[2])?;
                let mut prng = SplitMix64::new(37);
                project(tape, out, &mut prng)
            }),
        }
    })?);

    checks.push(run_instances("avg_pool2", n, seed, |rng| {
        let x = rand_tensor(rng, &[2, 4, 4], -1.0, 1.0);
        Instance {
            inputs: vec![x],
            build: Box::new(|tape, vars| {
                let out = tape.avg_pool2(vars[0])?;
                let mut prng = SplitMix64::new(41);
                project(tape, out, &mut prng)
            }),
        }
    })?);

    checks.push(run_instances("softmax_rows", n, seed, |rng| {
        let x = rand_tensor(rng, &[3, 5], -2.0, 2.0);
        Instance {
            inputs: vec![x],
            build: Box::new(|tape, vars| {
                let out = tape.softmax_rows(vars[0])?;
                let mut prng = SplitMix64::new(43);
                project(tape, out, &mut prng)
            }),
        }
    })?);

    checks.push(run_instances("reshape", n, seed, |rng| {
        let x = rand_tensor(rng, &[2, 6], -2.0, 2.0);
        Instance {
            inputs: vec![x],
            build: Box::new(|tape, vars| {
                let out = tape.reshape(vars[0], vec![3, 4])?;
                let mut prng = SplitMix64::new(47);
                project(tape, out, &mut prng)
            }),
        }
    })?);

    Ok(checks)
}
