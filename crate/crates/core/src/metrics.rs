//! Scoring of estimated segmentations and covariances against ground truth.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Segmentation;

/// Breakpoint counts pooled over series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchCounts {
    pub true_bps: usize,
    pub detected: usize,
    pub matched: usize,
}

impl MatchCounts {
    /// Unmatched detections over all detections; 0 when nothing was detected.
    pub fn fpr(&self) -> f64 {
        if self.detected == 0 {
            0.0
        } else {
            (self.detected - self.matched) as f64 / self.detected as f64
        }
    }

    /// Matched true breakpoints over all true breakpoints; 1 when there are none.
    pub fn tpr(&self) -> f64 {
        if self.true_bps == 0 {
            1.0
        } else {
            self.matched as f64 / self.true_bps as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub fpr: f64,
    pub tpr: f64,
    pub rmse_sigma: f64,
    pub rmse_mean: f64,
    pub counts: MatchCounts,
}

/// Largest number of detected/true pairs with `|d − t| ≤ window`, each point
/// used at most once.
///
/// All candidate intervals `[t − w, t + w]` have the same width, so scanning
/// true breakpoints left to right and taking the leftmost unused detection
/// that is still in range is optimal.
fn match_series(detected: &[usize], truth: &[usize], window: usize) -> usize {
    let mut matched = 0;
    let mut d = 0;
    for &t in truth {
        let lo = t.saturating_sub(window);
        while d < detected.len() && detected[d] < lo {
            d += 1;
        }
        if d < detected.len() && detected[d] <= t + window {
            matched += 1;
            d += 1;
        }
    }
    matched
}

/// Pooled FPR/TPR of `detected` against `truth` with a tolerance of `window`
/// time points (0 means exact position).
pub fn score_breakpoints(
    detected: &Segmentation,
    truth: &Segmentation,
    window: usize,
) -> Result<MatchCounts> {
    if detected.n() != truth.n() || detected.m() != truth.m() {
        return Err(Error::Dimension(format!(
            "detected is {}x{}, truth is {}x{}",
            detected.n(),
            detected.m(),
            truth.n(),
            truth.m()
        )));
    }
    let mut counts = MatchCounts::default();
    for m in 0..truth.m() {
        let (d, t) = (detected.breakpoints(m), truth.breakpoints(m));
        counts.detected += d.len();
        counts.true_bps += t.len();
        counts.matched += match_series(d, t, window);
    }
    Ok(counts)
}

fn rms_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let count = a.len();
    if count == 0 {
        return Ok(0.0);
    }
    Ok(((a - b).norm_squared() / count as f64).sqrt())
}

/// `[M⁻² Σ (Σ̂_mm' − Σ_mm')²]^{1/2}`.
pub fn rmse_sigma(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    rms_diff(est, truth)
}

/// Root mean squared difference of two `n × M` mean matrices.
pub fn rmse_mean(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    rms_diff(est, truth)
}

/// All four quality criteria at once.
pub fn score(
    detected: &Segmentation,
    est_sigma: &DMatrix<f64>,
    est_mean: &DMatrix<f64>,
    truth: &crate::types::SimTruth,
    window: usize,
) -> Result<ScoreReport> {
    let counts = score_breakpoints(detected, &truth.segmentation, window)?;
    Ok(ScoreReport {
        fpr: counts.fpr(),
        tpr: counts.tpr(),
        rmse_sigma: rmse_sigma(est_sigma, &truth.sigma)?,
        rmse_mean: rmse_mean(est_mean, &truth.mean_matrix)?,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seg(n: usize, b: Vec<Vec<usize>>) -> Segmentation {
        Segmentation::new(n, b).unwrap()
    }

    #[test]
    fn perfect_detection() {
        let t = seg(50, vec![vec![10, 20], vec![5]]);
        let c = score_breakpoints(&t, &t, 0).unwrap();
        assert_eq!((c.fpr(), c.tpr()), (0.0, 1.0));
    }

    #[test]
    fn half_right() {
        let c = score_breakpoints(&seg(50, vec![vec![10, 20]]), &seg(50, vec![vec![10, 30]]), 0)
            .unwrap();
        assert_eq!((c.fpr(), c.tpr()), (0.5, 0.5));
    }

    #[test]
    fn empty_conventions() {
        let none = seg(20, vec![vec![]]);
        let some = seg(20, vec![vec![4]]);
        let c = score_breakpoints(&none, &some, 0).unwrap();
        assert_eq!((c.fpr(), c.tpr()), (0.0, 0.0));
        let c = score_breakpoints(&some, &none, 0).unwrap();
        assert_eq!((c.fpr(), c.tpr()), (1.0, 1.0));
        assert!(score_breakpoints(&none, &seg(21, vec![vec![]]), 0).is_err());
    }

    #[test]
    fn window_beats_nearest_first() {
        // nearest-first would pair 6 with 5 and leave 3 stranded
        let c = score_breakpoints(&seg(20, vec![vec![3, 6]]), &seg(20, vec![vec![5, 9]]), 3)
            .unwrap();
        assert_eq!(c.matched, 2);
    }

    fn max_matching(d: &[usize], t: &[usize], w: usize) -> usize {
        fn rec(i: usize, d: &[usize], t: &[usize], w: usize, used: &mut Vec<bool>) -> usize {
            if i == t.len() {
                return 0;
            }
            let mut best = rec(i + 1, d, t, w, used);
            for j in 0..d.len() {
                if !used[j] && d[j].abs_diff(t[i]) <= w {
                    used[j] = true;
                    best = best.max(1 + rec(i + 1, d, t, w, used));
                    used[j] = false;
                }
            }
            best
        }
        rec(0, d, t, w, &mut vec![false; d.len()])
    }

    #[test]
    fn matches_exhaustive_matching() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..500 {
            let pick = |rng: &mut ChaCha8Rng| {
                let k = rng.random_range(0..=6);
                let mut v: Vec<usize> =
                    rand::seq::index::sample(rng, 29, k).into_iter().map(|i| i + 1).collect();
                v.sort_unstable();
                v
            };
            let d = pick(&mut rng);
            let t = pick(&mut rng);
            let c = score_breakpoints(&seg(30, vec![d.clone()]), &seg(30, vec![t.clone()]), 2)
                .unwrap();
            assert_eq!(c.matched, max_matching(&d, &t, 2), "{d:?} {t:?}");
        }
    }

    #[test]
    fn rmse_examples() {
        let a = DMatrix::from_element(1, 1, 2.0);
        let b = DMatrix::from_element(1, 1, 1.0);
        assert_eq!(rmse_sigma(&a, &b).unwrap(), 1.0);
        assert_eq!(rmse_sigma(&a, &a).unwrap(), 0.0);
        let x = DMatrix::zeros(4, 3);
        let mut y = x.clone();
        y[(2, 1)] = 0.6;
        assert!((rmse_mean(&y, &x).unwrap() - 0.6 / 12f64.sqrt()).abs() < 1e-15);
        assert!(rmse_mean(&x, &DMatrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn rmse_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let a = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0f64..1.0));
        let b = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0f64..1.0));
        let mut acc = 0.0f64;
        for i in 0..6 {
            for j in 0..6 {
                acc += (a[(i, j)] - b[(i, j)]).powi(2);
            }
        }
        assert!((rmse_sigma(&a, &b).unwrap() - (acc / 36.0).sqrt()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn pooled_rates_ignore_series_order(seed in any::<u64>(), window in 0usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<usize>> {
                (0..4).map(|_| (1..25).filter(|_| rng.random_bool(0.2)).collect()).collect()
            };
            let d = draw(&mut rng);
            let t = draw(&mut rng);
            let a = score_breakpoints(&seg(25, d.clone()), &seg(25, t.clone()), window).unwrap();
            let rev = |v: &Vec<Vec<usize>>| v.iter().rev().cloned().collect::<Vec<_>>();
            let b = score_breakpoints(&seg(25, rev(&d)), &seg(25, rev(&t)), window).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!(a.matched <= a.detected.min(a.true_bps));
            prop_assert!((0.0..=1.0).contains(&a.fpr()) && (0.0..=1.0).contains(&a.tpr()));
        }

        #[test]
        fn extra_detection_never_loses_matches(seed in any::<u64>(), extra in 1usize..25) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d: Vec<usize> = (1..25).filter(|_| rng.random_bool(0.2)).collect();
            let t: Vec<usize> = (1..25).filter(|_| rng.random_bool(0.2)).collect();
            let base = score_breakpoints(&seg(25, vec![d.clone()]), &seg(25, vec![t.clone()]), 1).unwrap();
            let mut more = d.clone();
            if !more.contains(&extra) {
                more.push(extra);
                more.sort_unstable();
            }
            let after = score_breakpoints(&seg(25, vec![more]), &seg(25, vec![t]), 1).unwrap();
            prop_assert!(after.matched >= base.matched);
        }
    }
}
