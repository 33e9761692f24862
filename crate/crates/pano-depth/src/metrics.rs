//! Depth error statistics and the evaluation protocol.

use serde::Serialize;

use crate::error::{PanoError, Result};
use crate::losses::align_scale_shift;
use crate::optim::crop_fovy;
use crate::tensor::{Mask, Tensor};

/// Standard depth error statistics over the valid pixels.
///
/// `delta1..3` are the fractions of pixels with `max(p/g, g/p) < 1.25^k`;
/// they are nested, so `delta1 ≤ delta2 ≤ delta3` always holds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rms: f64,
    pub rms_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl MetricsReport {
    /// `key=value` lines in a stable order.
    pub fn to_key_values(&self) -> String {
        format!(
            "abs_rel={}\nsq_rel={}\nrms={}\nrms_log={}\ndelta1={}\ndelta2={}\ndelta3={}",
            self.abs_rel, self.sq_rel, self.rms, self.rms_log, self.delta1, self.delta2, self.delta3
        )
    }
}

/// Error statistics of an already-aligned prediction.
///
/// Ground truth must be positive on the mask. Non-positive predictions can
/// survive alignment; such pixels are excluded from `rms_log` and count as
/// failures for every δ threshold.
pub fn compute_metrics(pred: &Tensor, gt: &Tensor, valid: &Mask) -> Result<MetricsReport> {
    let (_, h, w) = pred.chw()?;
    if gt.chw()? != pred.chw()? {
        return Err(PanoError::ShapeMismatch {
            expected: format!("{:?}", pred.shape()),
            got: format!("{:?}", gt.shape()),
        });
    }
    if (valid.height(), valid.width()) != (h, w) {
        return Err(PanoError::ShapeMismatch {
            expected: format!("{h}×{w} mask"),
            got: format!("{}×{}", valid.height(), valid.width()),
        });
    }
    let mut n = 0usize;
    let mut n_log = 0usize;
    let (mut abs_rel, mut sq_rel, mut se, mut se_log) = (0.0, 0.0, 0.0, 0.0);
    let (mut d1, mut d2, mut d3) = (0usize, 0usize, 0usize);
    for i in 0..h * w {
        if !valid.data()[i] {
            continue;
        }
        let (p, g) = (pred.data()[i], gt.data()[i]);
        if !(g > 0.0 && g.is_finite() && p.is_finite()) {
            return Err(PanoError::invalid(
                "ground truth must be positive and finite on the valid mask",
            ));
        }
        n += 1;
        let diff = p - g;
        abs_rel += diff.abs() / g;
        sq_rel += diff * diff / g;
        se += diff * diff;
        if p > 0.0 {
            let dl = p.ln() - g.ln();
            se_log += dl * dl;
            n_log += 1;
            let ratio = (p / g).max(g / p);
            if ratio < 1.25 {
                d1 += 1;
            }
            if ratio < 1.25 * 1.25 {
                d2 += 1;
            }
            if ratio < 1.25 * 1.25 * 1.25 {
                d3 += 1;
            }
        }
    }
    if n == 0 {
        return Err(PanoError::DegenerateCoverage);
    }
    let nf = n as f64;
    Ok(MetricsReport {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rms: (se / nf).sqrt(),
        rms_log: if n_log > 0 {
            (se_log / n_log as f64).sqrt()
        } else {
            f64::INFINITY
        },
        delta1: d1 as f64 / nf,
        delta2: d2 as f64 / nf,
        delta3: d3 as f64 / nf,
    })
}

/// The full evaluation protocol: scale-shift alignment on the valid pixels
/// (gt positive and finite), then the 45° crop to the middle half of the
/// rows, then metrics. Invariant to affine reparameterizations of the
/// prediction.
pub fn eval_protocol(pred: &Tensor, gt: &Tensor) -> Result<MetricsReport> {
    let (_, h, w) = pred.chw()?;
    if gt.chw()? != pred.chw()? {
        return Err(PanoError::ShapeMismatch {
            expected: format!("{:?}", pred.shape()),
            got: format!("{:?}", gt.shape()),
        });
    }
    let valid = Mask::new(
        h,
        w,
        gt.data().iter().map(|&g| g > 0.0 && g.is_finite()).collect(),
    )?;
    let aligned = align_scale_shift(pred, gt, &valid)?;

    let aligned_c = crop_fovy(&aligned.depth, 45.0)?;
    let gt_c = crop_fovy(gt, 45.0)?;
    let (_, ch, cw) = aligned_c.chw()?;
    let valid_c = Mask::new(
        ch,
        cw,
        gt_c.data()
            .iter()
            .map(|&g| g > 0.0 && g.is_finite())
            .collect(),
    )?;
    compute_metrics(&aligned_c, &gt_c, &valid_c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::SplitMix64;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn rand_map(rng: &mut SplitMix64, h: usize, w: usize, lo: f64, hi: f64) -> Tensor {
        Tensor::new(
            vec![1, h, w],
            (0..h * w).map(|_| rng.next_range(lo, hi)).collect(),
        )
        .unwrap()
    }

    /// Plain reference loop, written independently of compute_metrics.
    fn oracle(pred: &Tensor, gt: &Tensor, valid: &Mask) -> MetricsReport {
        let mut samples: Vec<(f64, f64)> = Vec::new();
        for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
            if valid.data()[i] {
                samples.push((p, g));
            }
        }
        let n = samples.len() as f64;
        let abs_rel = samples.iter().map(|(p, g)| (p - g).abs() / g).sum::<f64>() / n;
        let sq_rel = samples
            .iter()
            .map(|(p, g)| (p - g) * (p - g) / g)
            .sum::<f64>()
            / n;
        let rms = (samples.iter().map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / n).sqrt();
        let logs: Vec<f64> = samples
            .iter()
            .filter(|(p, _)| *p > 0.0)
            .map(|(p, g)| (p.ln() - g.ln()).powi(2))
            .collect();
        let rms_log = (logs.iter().sum::<f64>() / logs.len() as f64).sqrt();
        let frac = |k: i32| {
            samples
                .iter()
                .filter(|(p, g)| *p > 0.0 && (p / g).max(g / p) < 1.25f64.powi(k))
                .count() as f64
                / n
        };
        MetricsReport {
            abs_rel,
            sq_rel,
            rms,
            rms_log,
            delta1: frac(1),
            delta2: frac(2),
            delta3: frac(3),
        }
    }

    #[test]
    fn perfect_prediction_is_all_zero_and_delta_one() {
        let mut rng = SplitMix64::new(1);
        let gt = rand_map(&mut rng, 4, 8, 0.5, 3.0);
        let m = compute_metrics(&gt, &gt, &Mask::full(4, 8)).unwrap();
        assert_eq!(m.abs_rel, 0.0);
        assert_eq!(m.sq_rel, 0.0);
        assert_eq!(m.rms, 0.0);
        assert_eq!(m.rms_log, 0.0);
        assert_eq!(m.delta1, 1.0);
        assert_eq!(m.delta2, 1.0);
        assert_eq!(m.delta3, 1.0);
    }

    #[test]
    fn constant_ratio_thresholds() {
        let gt = Tensor::ones(vec![1, 4, 8]);
        let pred = gt.map(|v| 1.3 * v);
        let m = compute_metrics(&pred, &gt, &Mask::full(4, 8)).unwrap();
        assert!(close(m.abs_rel, 0.3, 1e-12));
        assert_eq!(m.delta1, 0.0);
        assert_eq!(m.delta2, 1.0);
        assert_eq!(m.delta3, 1.0);
    }

    #[test]
    fn matches_scalar_oracle_on_many_random_instances() {
        let mut rng = SplitMix64::new(2);
        for _ in 0..100 {
            let pred = rand_map(&mut rng, 8, 16, 0.2, 4.0);
            let gt = rand_map(&mut rng, 8, 16, 0.2, 4.0);
            let mut mask = Mask::full(8, 16);
            for i in 0..10 {
                mask.set((i * 3) % 8, (i * 5) % 16, false);
            }
            let got = compute_metrics(&pred, &gt, &mask).unwrap();
            let want = oracle(&pred, &gt, &mask);
            assert!(close(got.abs_rel, want.abs_rel, 1e-12));
            assert!(close(got.sq_rel, want.sq_rel, 1e-12));
            assert!(close(got.rms, want.rms, 1e-12));
            assert!(close(got.rms_log, want.rms_log, 1e-12));
            assert!(close(got.delta1, want.delta1, 1e-12));
            assert!(close(got.delta2, want.delta2, 1e-12));
            assert!(close(got.delta3, want.delta3, 1e-12));
            assert!(got.delta1 <= got.delta2 && got.delta2 <= got.delta3);
        }
    }

    #[test]
    fn non_positive_predictions_fail_deltas_and_skip_log() {
        let gt = Tensor::ones(vec![1, 2, 4]);
        let mut pred = Tensor::ones(vec![1, 2, 4]);
        pred.data_mut()[0] = -0.5;
        pred.data_mut()[1] = 0.0;
        let m = compute_metrics(&pred, &gt, &Mask::full(2, 4)).unwrap();
        // six of eight pixels match exactly; two are delta failures
        assert!(close(m.delta1, 6.0 / 8.0, 1e-12));
        assert_eq!(m.rms_log, 0.0); // failing pixels excluded from the log term
    }

    #[test]
    fn empty_mask_is_degenerate() {
        let gt = Tensor::ones(vec![1, 2, 4]);
        let mask = Mask::new(2, 4, vec![false; 8]).unwrap();
        assert!(matches!(
            compute_metrics(&gt, &gt, &mask),
            Err(PanoError::DegenerateCoverage)
        ));
    }

    #[test]
    fn protocol_equals_align_then_crop_then_metrics() {
        let mut rng = SplitMix64::new(3);
        let h = 16;
        let gt = rand_map(&mut rng, h, 2 * h, 1.0, 2.0);
        let pred = rand_map(&mut rng, h, 2 * h, 1.0, 2.0);
        let got = eval_protocol(&pred, &gt).unwrap();

        let full = Mask::full(h, 2 * h);
        let aligned = crate::losses::align_scale_shift(&pred, &gt, &full).unwrap();
        let a_c = crate::optim::crop_fovy(&aligned.depth, 45.0).unwrap();
        let g_c = crate::optim::crop_fovy(&gt, 45.0).unwrap();
        assert_eq!(a_c.chw().unwrap(), (1, h / 2, 2 * h));
        let want = compute_metrics(&a_c, &g_c, &Mask::full(h / 2, 2 * h)).unwrap();
        assert!(close(got.abs_rel, want.abs_rel, 1e-12));
        assert!(close(got.rms, want.rms, 1e-12));
        assert!(close(got.delta2, want.delta2, 1e-12));
    }

    #[test]
    fn protocol_ignores_cropped_hole_regions() {
        // gt holes above/below the band plus garbage predictions there:
        // neither the alignment (holes are invalid) nor the metrics (cropped)
        // may see any of it
        let mut rng = SplitMix64::new(30);
        let h = 16;
        let mut gt = rand_map(&mut rng, h, 2 * h, 1.0, 2.0);
        let mut pred = gt.map(|v| 1.7 * v - 0.3);
        for y in (0..h / 4).chain(3 * h / 4..h) {
            for x in 0..2 * h {
                gt.data_mut()[y * 2 * h + x] = 0.0;
                pred.data_mut()[y * 2 * h + x] = 123.0;
            }
        }
        let report = eval_protocol(&pred, &gt).unwrap();
        assert!(report.abs_rel < 1e-9, "abs_rel {}", report.abs_rel);
        assert_eq!(report.delta1, 1.0);
    }

    #[test]
    fn protocol_is_affine_invariant() {
        let mut rng = SplitMix64::new(4);
        let gt = rand_map(&mut rng, 16, 32, 0.5, 3.0);
        let pred = rand_map(&mut rng, 16, 32, 0.5, 3.0);
        let base = eval_protocol(&pred, &gt).unwrap();
        let re = pred.map(|p| 3.7 * p - 0.9);
        let again = eval_protocol(&re, &gt).unwrap();
        assert!(close(base.abs_rel, again.abs_rel, 1e-9));
        assert!(close(base.rms, again.rms, 1e-9));
        assert!(close(base.delta1, again.delta1, 1e-12));
    }

    #[test]
    fn protocol_excludes_holes() {
        let mut rng = SplitMix64::new(5);
        let mut gt = rand_map(&mut rng, 16, 32, 1.0, 2.0);
        let pred = gt.clone();
        // punch holes with wildly wrong prediction values beneath them
        let mut pred = pred;
        for i in [100, 200, 300] {
            gt.data_mut()[i] = 0.0;
            pred.data_mut()[i] = 99.0;
        }
        let report = eval_protocol(&pred, &gt).unwrap();
        assert!(report.abs_rel < 1e-9, "holes leaked into {}", report.abs_rel);
    }

    #[test]
    fn affine_of_gt_scores_zero_after_protocol() {
        let mut rng = SplitMix64::new(6);
        let gt = rand_map(&mut rng, 16, 32, 0.5, 3.0);
        let pred = gt.map(|v| 0.25 * v + 1.5);
        let report = eval_protocol(&pred, &gt).unwrap();
        assert!(report.abs_rel < 1e-9);
        assert_eq!(report.delta1, 1.0);
    }

    proptest! {
        #[test]
        fn delta_monotonicity_holds(seed in 0u64..500) {
            let mut rng = SplitMix64::new(seed);
            let pred = rand_map(&mut rng, 4, 8, 0.1, 5.0);
            let gt = rand_map(&mut rng, 4, 8, 0.1, 5.0);
            let m = compute_metrics(&pred, &gt, &Mask::full(4, 8)).unwrap();
            prop_assert!(m.delta1 <= m.delta2);
            prop_assert!(m.delta2 <= m.delta3);
        }
    }
}
