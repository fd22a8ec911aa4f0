//! Domain types shared by every stage of the pipeline.
//!
//! Time runs along the rows of every `n × M` matrix and series along the
//! columns. nalgebra stores matrices column-major, so each series is a
//! contiguous slice, which is what the per-series dynamic programs want.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Observation matrix: `n` time points (rows) by `M` series (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesMatrix {
    values: DMatrix<f64>,
}

impl SeriesMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() < 2 {
            return Err(Error::Dimension(format!(
                "need at least 2 time points, got {}",
                values.nrows()
            )));
        }
        if values.ncols() < 1 {
            return Err(Error::Dimension("need at least one series".into()));
        }
        for col in 0..values.ncols() {
            for row in 0..values.nrows() {
                if !values[(row, col)].is_finite() {
                    return Err(Error::NonFinite { row, col });
                }
            }
        }
        Ok(Self { values })
    }

    /// Build from row-major data, one inner vector per time point.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != m) {
            return Err(Error::Dimension(format!(
                "row {bad} has {} values, expected {m}",
                rows[bad].len()
            )));
        }
        Self::new(DMatrix::from_fn(n, m, |t, j| rows[t][j]))
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn m(&self) -> usize {
        self.values.ncols()
    }

    /// Total number of observations `N = nM`.
    pub fn total(&self) -> usize {
        self.n() * self.m()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn series(&self, m: usize) -> &[f64] {
        let n = self.n();
        &self.values.as_slice()[m * n..(m + 1) * n]
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.values
    }
}

/// Per-series breakpoints.
///
/// A breakpoint at `t` closes a segment after time point `t` (1-based), so
/// segment `k` of series `m` covers the 1-based times `t_{k-1}+1 ..= t_k`, or
/// equivalently the 0-based half-open range `t_{k-1}..t_k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segmentation {
    n: usize,
    breakpoints: Vec<Vec<usize>>,
}

impl Segmentation {
    pub fn new(n: usize, breakpoints: Vec<Vec<usize>>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidSegmentation("series length is zero".into()));
        }
        if breakpoints.is_empty() {
            return Err(Error::InvalidSegmentation("no series".into()));
        }
        for (m, bps) in breakpoints.iter().enumerate() {
            let mut prev = 0;
            for &t in bps {
                if t <= prev || t >= n {
                    return Err(Error::InvalidSegmentation(format!(
                        "series {m}: breakpoints must be strictly increasing in [1, {}], got {bps:?}",
                        n - 1
                    )));
                }
                prev = t;
            }
        }
        Ok(Self { n, breakpoints })
    }

    /// One segment per series.
    pub fn whole(n: usize, m: usize) -> Self {
        Self {
            n,
            breakpoints: vec![Vec::new(); m],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.breakpoints.len()
    }

    pub fn breakpoints(&self, m: usize) -> &[usize] {
        &self.breakpoints[m]
    }

    pub fn all_breakpoints(&self) -> &[Vec<usize>] {
        &self.breakpoints
    }

    /// `K_m`, the number of segments of series `m`.
    pub fn segment_count(&self, m: usize) -> usize {
        self.breakpoints[m].len() + 1
    }

    pub fn segment_counts(&self) -> Vec<usize> {
        (0..self.m()).map(|m| self.segment_count(m)).collect()
    }

    /// `K`, the total number of segments over all series.
    pub fn total_segments(&self) -> usize {
        self.breakpoints.iter().map(|b| b.len() + 1).sum()
    }

    pub fn total_breakpoints(&self) -> usize {
        self.breakpoints.iter().map(Vec::len).sum()
    }

    /// 0-based half-open `(start, end)` ranges of the segments of series `m`.
    pub fn segments(&self, m: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let ends = self.breakpoints[m].iter().copied().chain(std::iter::once(self.n));
        let mut start = 0;
        ends.map(move |end| {
            let seg = (start, end);
            start = end;
            seg
        })
    }

    pub fn segment_lengths(&self, m: usize) -> Vec<usize> {
        self.segments(m).map(|(s, e)| e - s).collect()
    }
}

/// Per-series segment means, conforming to a [`Segmentation`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentMeans {
    means: Vec<Vec<f64>>,
}

impl SegmentMeans {
    pub fn new(means: Vec<Vec<f64>>) -> Self {
        Self { means }
    }

    pub fn series(&self, m: usize) -> &[f64] {
        &self.means[m]
    }

    pub fn all(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn check_conforms(&self, seg: &Segmentation) -> Result<()> {
        if self.means.len() != seg.m() {
            return Err(Error::Conformance(format!(
                "{} mean lists for {} series",
                self.means.len(),
                seg.m()
            )));
        }
        for (m, mu) in self.means.iter().enumerate() {
            if mu.len() != seg.segment_count(m) {
                return Err(Error::Conformance(format!(
                    "series {m} has {} segments but {} means",
                    seg.segment_count(m),
                    mu.len()
                )));
            }
        }
        Ok(())
    }

    /// Plain segment averages of `y` over `seg`.
    pub fn from_data(y: &DMatrix<f64>, seg: &Segmentation) -> Self {
        let n = y.nrows();
        let data = y.as_slice();
        let means = (0..seg.m())
            .map(|m| {
                let col = &data[m * n..(m + 1) * n];
                seg.segments(m)
                    .map(|(s, e)| col[s..e].iter().sum::<f64>() / (e - s) as f64)
                    .collect()
            })
            .collect();
        Self { means }
    }
}

/// Whether the idiosyncratic noise is shared across series or per-series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    #[default]
    Homoscedastic,
    Heteroscedastic,
}

/// Diagonal noise covariance `Ψ`.
#[derive(Debug, Clone, PartialEq)]
pub enum Noise {
    /// `Ψ = σ² I`.
    Homoscedastic(f64),
    /// `Ψ = diag(ψ_11, …, ψ_MM)`.
    Heteroscedastic(Vec<f64>),
}

impl Noise {
    pub fn mode(&self) -> NoiseMode {
        match self {
            Noise::Homoscedastic(_) => NoiseMode::Homoscedastic,
            Noise::Heteroscedastic(_) => NoiseMode::Heteroscedastic,
        }
    }

    /// Expand to the `M` diagonal entries.
    pub fn diagonal(&self, m: usize) -> DVector<f64> {
        match self {
            Noise::Homoscedastic(s2) => DVector::from_element(m, *s2),
            Noise::Heteroscedastic(psi) => DVector::from_column_slice(psi),
        }
    }
}

/// Loadings `B` (`M × Q`) and diagonal noise `Ψ`, so that `Σ = BB' + Ψ`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorParams {
    loadings: DMatrix<f64>,
    noise: Noise,
}

impl FactorParams {
    pub fn new(loadings: DMatrix<f64>, noise: Noise) -> Result<Self> {
        let m = loadings.nrows();
        if m == 0 {
            return Err(Error::Dimension("loadings need at least one row".into()));
        }
        let ok = |v: f64| v.is_finite() && v > 0.0;
        match &noise {
            Noise::Homoscedastic(s2) if !ok(*s2) => {
                return Err(Error::InvalidParameter(format!(
                    "noise variance must be positive, got {s2}"
                )))
            }
            Noise::Heteroscedastic(psi) => {
                if psi.len() != m {
                    return Err(Error::Dimension(format!(
                        "{} noise variances for {m} series",
                        psi.len()
                    )));
                }
                if let Some(bad) = psi.iter().find(|v| !ok(**v)) {
                    return Err(Error::InvalidParameter(format!(
                        "noise variance must be positive, got {bad}"
                    )));
                }
            }
            _ => {}
        }
        if loadings.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite loading".into()));
        }
        Ok(Self { loadings, noise })
    }

    /// Independent series: no factors.
    pub fn independent(m: usize, noise: Noise) -> Result<Self> {
        Self::new(DMatrix::zeros(m, 0), noise)
    }

    pub fn m(&self) -> usize {
        self.loadings.nrows()
    }

    pub fn q(&self) -> usize {
        self.loadings.ncols()
    }

    pub fn loadings(&self) -> &DMatrix<f64> {
        &self.loadings
    }

    pub fn noise(&self) -> &Noise {
        &self.noise
    }

    pub fn psi(&self) -> DVector<f64> {
        self.noise.diagonal(self.m())
    }

    pub fn sigma(&self) -> DMatrix<f64> {
        assemble_sigma(self)
    }
}

/// `Σ = BB' + Ψ`.
pub fn assemble_sigma(factor: &FactorParams) -> DMatrix<f64> {
    let b = factor.loadings();
    let mut sigma = b * b.transpose();
    for (i, psi) in factor.psi().iter().enumerate() {
        sigma[(i, i)] += psi;
    }
    // exact symmetry regardless of summation order
    for i in 0..sigma.nrows() {
        for j in 0..i {
            let avg = 0.5 * (sigma[(i, j)] + sigma[(j, i)]);
            sigma[(i, j)] = avg;
            sigma[(j, i)] = avg;
        }
    }
    sigma
}

/// Conditional moments of the latent factors given the data.
///
/// The conditional covariance `W` does not depend on `t`, so it is stored once.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMoments {
    /// `n × Q`, row `t` is `E[Z_t | Y]`.
    pub zhat: DMatrix<f64>,
    /// `Q × Q`, `Var[Z_t | Y]`.
    pub w: DMatrix<f64>,
}

impl LatentMoments {
    pub fn empty(n: usize) -> Self {
        Self {
            zhat: DMatrix::zeros(n, 0),
            w: DMatrix::zeros(0, 0),
        }
    }

    pub fn q(&self) -> usize {
        self.w.nrows()
    }
}

/// A fitted model `(T, μ, Ψ, B)` with its log-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFit {
    pub segmentation: Segmentation,
    pub means: SegmentMeans,
    pub factor: FactorParams,
    /// Observed-data log-likelihood at the returned parameters.
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Log-likelihood after initialisation followed by one entry per iteration.
    pub loglik_trace: Vec<f64>,
}

impl ModelFit {
    pub fn k(&self) -> usize {
        self.segmentation.total_segments()
    }

    pub fn q(&self) -> usize {
        self.factor.q()
    }

    pub fn sigma(&self) -> DMatrix<f64> {
        assemble_sigma(&self.factor)
    }

    pub fn mean_matrix(&self) -> DMatrix<f64> {
        expand_means(&self.segmentation, &self.means).expect("fit means conform by construction")
    }
}

/// Ground truth emitted by the simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTruth {
    pub segmentation: Segmentation,
    pub means: SegmentMeans,
    pub sigma: DMatrix<f64>,
    /// `Tμ`, the `n × M` piecewise-constant mean.
    pub mean_matrix: DMatrix<f64>,
}

/// Expand segment means into the `n × M` matrix `Tμ`.
pub fn expand_means(seg: &Segmentation, means: &SegmentMeans) -> Result<DMatrix<f64>> {
    means.check_conforms(seg)?;
    let n = seg.n();
    let mut out = DMatrix::zeros(n, seg.m());
    for m in 0..seg.m() {
        for ((s, e), mu) in seg.segments(m).zip(means.series(m)) {
            for t in s..e {
                out[(t, m)] = *mu;
            }
        }
    }
    Ok(out)
}
