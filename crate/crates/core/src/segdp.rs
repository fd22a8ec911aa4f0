//! Exact least-squares segmentation by dynamic programming.
//!
//! Stage 1 runs the classical segment-neighbourhood recursion independently on
//! every series and records the optimal cost `C_m(k)` for each segment count.
//! Stage 2 distributes a total budget of `K` segments over the series with a
//! second, much smaller, dynamic program over `(series, budget)`. Together they
//! give the global optimum of the additive criterion
//! `Σ_m w_m Σ_k Σ_{t ∈ I_k^m} (y_tm − μ_km)²` in `O(K n² + K² M)`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::exec::{map_indexed, Exec};
use crate::types::{SegmentMeans, Segmentation};

/// Above this length the per-series cost matrix is not cached.
const COST_CACHE_MAX_N: usize = 3000;
const PRUNE_RTOL: f64 = 1e-9;
/// Values within this relative distance of the minimum count as ties.
const TIE_RTOL: f64 = 1e-11;

/// Prefix sums of `y` and `y²` for O(1) segment costs.
///
/// The series is centred first and the running sums are Neumaier-compensated,
/// which keeps `Σy² − (Σy)²/ℓ` accurate on long segments with an offset.
#[derive(Debug, Clone)]
pub struct PrefixSums {
    s1: Vec<f64>,
    s2: Vec<f64>,
}

impl PrefixSums {
    pub fn new(y: &[f64]) -> Self {
        let shift = if y.is_empty() {
            0.0
        } else {
            y.iter().sum::<f64>() / y.len() as f64
        };
        let mut s1 = Vec::with_capacity(y.len() + 1);
        let mut s2 = Vec::with_capacity(y.len() + 1);
        let (mut a1, mut a2) = (Neumaier::default(), Neumaier::default());
        s1.push(0.0);
        s2.push(0.0);
        for &v in y {
            let c = v - shift;
            a1.add(c);
            a2.add(c * c);
            s1.push(a1.value());
            s2.push(a2.value());
        }
        Self { s1, s2 }
    }

    pub fn len(&self) -> usize {
        self.s1.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Unweighted within-segment sum of squares of the 0-based range `start..end`.
    #[inline]
    pub fn cost(&self, start: usize, end: usize) -> f64 {
        let len = end - start;
        if len <= 1 {
            return 0.0;
        }
        let d1 = self.s1[end] - self.s1[start];
        let d2 = self.s2[end] - self.s2[start];
        (d2 - d1 * d1 / len as f64).max(0.0)
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    #[inline]
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

fn check_weight(weight: f64) -> Result<()> {
    if !(weight.is_finite() && weight > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "segment weight must be positive, got {weight}"
        )));
    }
    Ok(())
}

/// Weighted least-squares cost `w · Σ (y_t − ȳ)²` of one segment.
pub fn segment_cost(y: &[f64], weight: f64) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::EmptySegment);
    }
    check_weight(weight)?;
    Ok(weight * PrefixSums::new(y).cost(0, y.len()))
}

/// Stage-1 result for one series: optimal costs for `k = 1..=k_max` segments
/// plus the back-pointers needed to recover the breakpoints.
#[derive(Debug, Clone)]
pub struct SeriesDp {
    n: usize,
    weight: f64,
    /// Unweighted optimal cost, index `k - 1`.
    raw: Vec<f64>,
    /// `back[(k - 1) * (n + 1) + t]`: start of the last segment in the best
    /// `k`-segmentation of the prefix `0..t`.
    back: Vec<u32>,
}

impl SeriesDp {
    pub fn k_max(&self) -> usize {
        self.raw.len()
    }

    /// Weighted optimal cost `C(k)`.
    pub fn cost(&self, k: usize) -> f64 {
        self.weight * self.raw[k - 1]
    }

    pub fn costs(&self) -> Vec<f64> {
        self.raw.iter().map(|c| self.weight * c).collect()
    }

    /// Breakpoints of the optimal `k`-segmentation, ascending.
    pub fn breakpoints(&self, k: usize) -> Vec<usize> {
        assert!(k >= 1 && k <= self.k_max(), "k out of range");
        let stride = self.n + 1;
        let mut out = Vec::with_capacity(k - 1);
        let mut end = self.n;
        for layer in (1..k).rev() {
            let start = self.back[layer * stride + end] as usize;
            out.push(start);
            end = start;
        }
        out.reverse();
        out
    }
}

/// Optimal segmentations of one series for every segment count up to `k_max`.
///
/// Among equal-cost placements the earliest candidate for the last breakpoint
/// wins, applied recursively.
pub fn dp_single(y: &[f64], weight: f64, k_max: usize) -> Result<SeriesDp> {
    dp_single_with(y, weight, k_max, 1)
}

/// [`dp_single`] with a minimum segment length.
pub fn dp_single_with(y: &[f64], weight: f64, k_max: usize, min_len: usize) -> Result<SeriesDp> {
    check_weight(weight)?;
    let n = y.len();
    let min_len = min_len.max(1);
    if n == 0 {
        return Err(Error::EmptySegment);
    }
    if k_max == 0 || k_max * min_len > n {
        return Err(Error::InfeasibleSegments(format!(
            "cannot cut {n} points into {k_max} segments of length >= {min_len}"
        )));
    }
    let ps = PrefixSums::new(y);
    let stride = n + 1;
    let mut back = vec![0u32; k_max * stride];
    let mut raw = Vec::with_capacity(k_max);

    let mut prev = vec![f64::INFINITY; stride];
    for t in min_len..=n {
        prev[t] = ps.cost(0, t);
    }
    raw.push(prev[n]);
    let mut cur = vec![f64::INFINITY; stride];

    // Triangular cache: row t holds cost(j, t) for j in 0..t.
    let cache: Option<Vec<f64>> = (n <= COST_CACHE_MAX_N && k_max > 2).then(|| {
        let mut c = Vec::with_capacity(n * (n + 1) / 2);
        for t in 1..=n {
            for j in 0..t {
                c.push(ps.cost(j, t));
            }
        }
        c
    });

    let cost = |j: usize, t: usize| match &cache {
        Some(c) => c[(t - 1) * t / 2 + j],
        None => ps.cost(j, t),
    };
    // Candidate j is dropped at t once prev[j] + cost(j, t) > prev[t] + margin:
    // superadditivity of the cost then makes t strictly better than j for
    // every later end point. The margin absorbs rounding in the costs.
    let prune = min_len == 1;
    let margin = PRUNE_RTOL * (1.0 + prev[n].abs());
    let tie = TIE_RTOL * (1.0 + prev[n].abs());
    let mut cand: Vec<usize> = Vec::with_capacity(n);
    let mut vals: Vec<(usize, f64)> = Vec::with_capacity(n);

    for k in 2..=k_max {
        cur.iter_mut().for_each(|v| *v = f64::INFINITY);
        let row_back = &mut back[(k - 1) * stride..k * stride];
        cand.clear();
        for t in (k * min_len)..=n {
            let lo = (k - 1) * min_len;
            let hi = t - min_len;
            let mut best = f64::INFINITY;
            let arg;
            if prune {
                cand.push(hi);
                let bound = prev[t] + margin;
                vals.clear();
                cand.retain(|&j| {
                    let v = prev[j] + cost(j, t);
                    best = best.min(v);
                    let keep = v <= bound;
                    if keep {
                        vals.push((j, v));
                    }
                    keep
                });
                arg = vals.iter().find(|p| p.1 <= best + tie).map_or(lo, |p| p.0);
            } else if let Some(c) = &cache {
                let row = &c[(t - 1) * t / 2..(t - 1) * t / 2 + t];
                let (v, j) = leftmost_min_sum(&prev[lo..=hi], &row[lo..=hi], tie);
                best = v;
                arg = lo + j;
            } else {
                for j in lo..=hi {
                    best = best.min(prev[j] + ps.cost(j, t));
                }
                arg = (lo..=hi).find(|&j| prev[j] + ps.cost(j, t) <= best + tie).unwrap_or(lo);
            }
            cur[t] = best;
            row_back[t] = arg as u32;
        }
        raw.push(cur[n]);
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(SeriesDp {
        n,
        weight,
        raw,
        back,
    })
}

const LANES: usize = 8;

/// Minimum of `a[j] + b[j]` and the smallest index within `tie` of it.
fn leftmost_min_sum(a: &[f64], b: &[f64], tie: f64) -> (f64, usize) {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [f64::INFINITY; LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            let v = x[l] + y[l];
            acc[l] = if v < acc[l] { v } else { acc[l] };
        }
    }
    let mut best = acc.iter().fold(f64::INFINITY, |m, &v| if v < m { v } else { m });
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        let v = x + y;
        best = if v < best { v } else { best };
    }
    let arg = a.iter().zip(b).position(|(x, y)| x + y <= best + tie).unwrap_or(0);
    (best, arg)
}

/// Stage-1 costs for every series.
#[derive(Debug, Clone)]
pub struct CostTable {
    pub series: Vec<SeriesDp>,
}

impl CostTable {
    pub fn m(&self) -> usize {
        self.series.len()
    }

    pub fn costs(&self, m: usize) -> Vec<f64> {
        self.series[m].costs()
    }

    pub fn max_total(&self) -> usize {
        self.series.iter().map(SeriesDp::k_max).sum()
    }
}

/// Split `K` segments across series minimising `Σ_m C_m(K_m)`.
///
/// `costs[m][k - 1]` is `C_m(k)`. Ties go to the lexicographically smallest
/// allocation `(K_1, K_2, …)`. Returns the allocation and its total cost.
pub fn allocate_segments(costs: &[Vec<f64>], k_total: usize) -> Result<(Vec<usize>, f64)> {
    let m = costs.len();
    let cap: usize = costs.iter().map(Vec::len).sum();
    if m == 0 || k_total < m || k_total > cap {
        return Err(Error::InfeasibleSegments(format!(
            "K = {k_total} outside [{m}, {cap}]"
        )));
    }
    let tie = TIE_RTOL * (1.0 + costs.iter().map(|c| c[0].abs()).sum::<f64>());
    // suffix[s][b]: best cost of series s.. using exactly b segments.
    let width = k_total + 1;
    let mut suffix = vec![f64::INFINITY; (m + 1) * width];
    let mut arg = vec![0usize; m * width];
    suffix[m * width] = 0.0;
    for s in (0..m).rev() {
        let kmax = costs[s].len();
        for b in 1..=k_total {
            let value = |k: usize| costs[s][k - 1] + suffix[(s + 1) * width + b - k];
            let ks = 1..=kmax.min(b);
            let best = ks.clone().map(value).fold(f64::INFINITY, f64::min);
            if best.is_finite() {
                let k = ks.clone().find(|&k| value(k) <= best + tie).unwrap_or(0);
                suffix[s * width + b] = best;
                arg[s * width + b] = k;
            }
        }
    }
    let total = suffix[k_total];
    if !total.is_finite() {
        return Err(Error::InfeasibleSegments(format!(
            "no allocation of K = {k_total}"
        )));
    }
    let mut alloc = Vec::with_capacity(m);
    let mut budget = k_total;
    for s in 0..m {
        let k = arg[s * width + budget];
        alloc.push(k);
        budget -= k;
    }
    Ok((alloc, total))
}

/// Output of [`two_stage_segment`].
#[derive(Debug, Clone)]
pub struct JointSegmentation {
    pub segmentation: Segmentation,
    pub means: SegmentMeans,
    pub allocation: Vec<usize>,
    pub total_cost: f64,
}

/// Options for the joint segmentation.
#[derive(Debug, Clone, Copy)]
pub struct SegmentOptions {
    pub min_len: usize,
    pub exec: Exec,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        Self {
            min_len: 1,
            exec: Exec::Sequential,
        }
    }
}

/// Largest total segment count a `n × M` panel admits.
pub fn max_segments(n: usize, m: usize, min_len: usize) -> usize {
    m * (n / min_len.max(1))
}

/// Stage-1 tables, one row per column of `y`, each up to `k_max = min(n/L, K − M + 1)`.
pub fn stage_one(y: &DMatrix<f64>, psi: &[f64], k_total: usize, opts: SegmentOptions) -> Result<CostTable> {
    let (n, m) = y.shape();
    if psi.len() != m {
        return Err(Error::Dimension(format!("{} weights for {m} series", psi.len())));
    }
    let min_len = opts.min_len.max(1);
    let cap = max_segments(n, m, min_len);
    if k_total < m || k_total > cap {
        return Err(Error::InfeasibleSegments(format!(
            "K = {k_total} outside [{m}, {cap}]"
        )));
    }
    let k_max = (n / min_len).min(k_total - m + 1);
    let data = y.as_slice();
    let series = map_indexed(opts.exec, m, |s| {
        let w = 1.0 / psi[s];
        dp_single_with(&data[s * n..(s + 1) * n], w, k_max, min_len)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(CostTable { series })
}

/// Globally optimal joint segmentation of the columns of `y` into `K` segments,
/// each series weighted by `1/ψ_m`.
pub fn two_stage_segment(y: &DMatrix<f64>, psi: &[f64], k_total: usize) -> Result<JointSegmentation> {
    two_stage_segment_with(y, psi, k_total, SegmentOptions::default())
}

pub fn two_stage_segment_with(
    y: &DMatrix<f64>,
    psi: &[f64],
    k_total: usize,
    opts: SegmentOptions,
) -> Result<JointSegmentation> {
    let n = y.nrows();
    let table = stage_one(y, psi, k_total, opts)?;
    let costs: Vec<Vec<f64>> = table.series.iter().map(SeriesDp::costs).collect();
    let (allocation, total_cost) = allocate_segments(&costs, k_total)?;
    let breakpoints: Vec<Vec<usize>> = allocation
        .iter()
        .zip(&table.series)
        .map(|(&k, dp)| dp.breakpoints(k))
        .collect();
    let segmentation = Segmentation::new(n, breakpoints)?;
    let means = SegmentMeans::from_data(y, &segmentation);
    Ok(JointSegmentation {
        segmentation,
        means,
        allocation,
        total_cost,
    })
}
