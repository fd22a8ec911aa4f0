//! Simulation of correlated piecewise-constant panels.
//!
//! Each series gets a Poisson number of uniformly placed breakpoints, segment
//! means alternate between 0 and a value drawn from `{−2, −1, +1, +2}`, and
//! the noise rows share a spatial covariance
//! `Σ_mm' = σ² ((1 − α) ρ^{d_mm'} + α 1{m = m'})` where `d` are distances
//! between standard bivariate normal "station" locations.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{expand_means, SegmentMeans, Segmentation, SeriesMatrix, SimTruth};

/// Non-zero segment levels.
pub const MEAN_LEVELS: [f64; 4] = [-2.0, -1.0, 1.0, 2.0];

const MAX_SIGMA_ATTEMPTS: usize = 100;

/// Distribution of the noise rows `F_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseKind {
    Gaussian,
    /// Multivariate Student t with covariance `Σ` (scale `Σ(ν−2)/ν`).
    Student { df: f64 },
    /// Per-row covariance `S_t ~ W(Σ/ν, ν)`, so `E[S_t] = Σ`.
    Wishart { df: f64 },
}

impl NoiseKind {
    pub fn name(&self) -> &'static str {
        match self {
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::Student { .. } => "student",
            NoiseKind::Wishart { .. } => "wishart",
        }
    }

    pub fn df(&self) -> Option<f64> {
        match *self {
            NoiseKind::Gaussian => None,
            NoiseKind::Student { df } | NoiseKind::Wishart { df } => Some(df),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub m: usize,
    pub n: usize,
    /// Mean number of breakpoints per series.
    pub kbar: f64,
    pub sigma: f64,
    pub rho: f64,
    pub alpha: f64,
    pub noise: NoiseKind,
    pub seed: u64,
}

impl SimConfig {
    /// Gaussian design with `α = 0.2` and `k̄` set from the series length
    /// (3 for `n ≤ 50`, 5 otherwise).
    pub fn new(m: usize, n: usize, sigma: f64, rho: f64) -> Self {
        Self {
            m,
            n,
            kbar: default_kbar(n),
            sigma,
            rho,
            alpha: 0.2,
            noise: NoiseKind::Gaussian,
            seed: 0,
        }
    }

    pub fn with_noise(mut self, noise: NoiseKind) -> Self {
        self.noise = noise;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.m < 1 || self.n < 2 {
            return bad(format!("need M >= 1 and n >= 2, got M={} n={}", self.m, self.n));
        }
        if !(self.kbar.is_finite() && self.kbar >= 0.0) {
            return bad(format!("kbar must be non-negative, got {}", self.kbar));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad(format!("rho must lie in (0, 1), got {}", self.rho));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        check_noise(self.noise, self.m)
    }
}

/// Mean breakpoint count used by the reference design for a given length.
pub fn default_kbar(n: usize) -> f64 {
    if n <= 50 {
        3.0
    } else {
        5.0
    }
}

fn check_noise(kind: NoiseKind, m: usize) -> Result<()> {
    match kind {
        NoiseKind::Gaussian => Ok(()),
        NoiseKind::Student { df } if !(df > 2.0 && df.is_finite()) => Err(Error::InvalidParameter(
            format!("Student noise needs df > 2, got {df}"),
        )),
        NoiseKind::Wishart { df } if !(df > (m as f64 - 1.0) && df.is_finite()) => {
            Err(Error::InvalidParameter(format!(
                "Wishart noise needs df > M - 1 = {}, got {df}",
                m - 1
            )))
        }
        _ => Ok(()),
    }
}

/// RNG stream for replicate `index` of base seed `seed`.
pub fn replicate_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Breakpoints of one series: a Poisson(`k̄`) count truncated to `n − 1`,
/// positions uniform without replacement in `1..n`.
pub fn gen_segmentation<R: Rng + ?Sized>(n: usize, kbar: f64, rng: &mut R) -> Vec<usize> {
    let count = if kbar > 0.0 {
        let draw: f64 = Poisson::new(kbar).expect("valid Poisson mean").sample(rng);
        (draw as usize).min(n - 1)
    } else {
        0
    };
    let mut pos: Vec<usize> = sample(rng, n - 1, count).into_iter().map(|i| i + 1).collect();
    pos.sort_unstable();
    pos
}

/// Alternating segment means: odd-numbered segments (1st, 3rd, …) sit at 0,
/// each even-numbered one draws a level from [`MEAN_LEVELS`].
pub fn gen_means<R: Rng + ?Sized>(seg: &Segmentation, rng: &mut R) -> SegmentMeans {
    let means = (0..seg.m())
        .map(|m| {
            (0..seg.segment_count(m))
                .map(|k| {
                    if k % 2 == 0 {
                        0.0
                    } else {
                        MEAN_LEVELS[rng.random_range(0..MEAN_LEVELS.len())]
                    }
                })
                .collect()
        })
        .collect();
    SegmentMeans::new(means)
}

/// Spatial covariance and the pairwise station distances it was built from.
#[derive(Debug, Clone)]
pub struct SpatialCovariance {
    pub sigma: DMatrix<f64>,
    pub distances: DMatrix<f64>,
    pub points: Vec<[f64; 2]>,
    pub resamples: usize,
}

pub fn sigma_from_distances(distances: &DMatrix<f64>, sigma: f64, rho: f64, alpha: f64) -> DMatrix<f64> {
    let s2 = sigma * sigma;
    DMatrix::from_fn(distances.nrows(), distances.ncols(), |i, j| {
        if i == j {
            s2
        } else {
            s2 * (1.0 - alpha) * rho.powf(distances[(i, j)])
        }
    })
}

pub fn gen_sigma<R: Rng + ?Sized>(
    m: usize,
    sigma: f64,
    rho: f64,
    alpha: f64,
    rng: &mut R,
) -> Result<SpatialCovariance> {
    for attempt in 0..MAX_SIGMA_ATTEMPTS {
        let points: Vec<[f64; 2]> = (0..m)
            .map(|_| [rng.sample(StandardNormal), rng.sample(StandardNormal)])
            .collect();
        let distances = DMatrix::from_fn(m, m, |i, j| {
            let dx = points[i][0] - points[j][0];
            let dy = points[i][1] - points[j][1];
            (dx * dx + dy * dy).sqrt()
        });
        let cov = sigma_from_distances(&distances, sigma, rho, alpha);
        if Cholesky::new(cov.clone()).is_some() {
            if attempt > 0 {
                log::debug!("spatial covariance resampled {attempt} times");
            }
            return Ok(SpatialCovariance {
                sigma: cov,
                distances,
                points,
                resamples: attempt,
            });
        }
    }
    Err(Error::Numerical(format!(
        "no positive definite covariance after {MAX_SIGMA_ATTEMPTS} draws"
    )))
}

fn std_normal_vec<R: Rng + ?Sized>(m: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(m, |_, _| rng.sample(StandardNormal))
}

/// `n` noise rows with covariance `Σ` under the requested distribution.
pub fn gen_noise<R: Rng + ?Sized>(
    n: usize,
    sigma: &DMatrix<f64>,
    kind: NoiseKind,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let m = sigma.nrows();
    check_noise(kind, m)?;
    let chol: Cholesky<f64, Dyn> = Cholesky::new(sigma.clone())
        .ok_or_else(|| Error::Numerical("noise covariance is not positive definite".into()))?;
    let l = chol.l();
    let mut out = DMatrix::zeros(n, m);
    match kind {
        NoiseKind::Gaussian => {
            for t in 0..n {
                let row = &l * std_normal_vec(m, rng);
                out.set_row(t, &row.transpose());
            }
        }
        NoiseKind::Student { df } => {
            let scale = ((df - 2.0) / df).sqrt();
            let chi = ChiSquared::new(df).map_err(|e| Error::InvalidParameter(e.to_string()))?;
            for t in 0..n {
                let z = &l * std_normal_vec(m, rng);
                let w: f64 = chi.sample(rng);
                let row = z * (scale / (w / df).sqrt());
                out.set_row(t, &row.transpose());
            }
        }
        NoiseKind::Wishart { df } => {
            // Bartlett: S_t = L A A' L' / ν with A lower triangular.
            let chis = (0..m)
                .map(|i| ChiSquared::new(df - i as f64).map_err(|e| Error::InvalidParameter(e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            let inv_sqrt_df = 1.0 / df.sqrt();
            for t in 0..n {
                let mut a = DMatrix::zeros(m, m);
                for i in 0..m {
                    a[(i, i)] = chis[i].sample(rng).sqrt();
                    for j in 0..i {
                        a[(i, j)] = rng.sample(StandardNormal);
                    }
                }
                let row = &l * (a * std_normal_vec(m, rng)) * inv_sqrt_df;
                out.set_row(t, &row.transpose());
            }
        }
    }
    Ok(out)
}

/// Simulate one panel from `cfg` using RNG stream 0 of `cfg.seed`.
pub fn simulate(cfg: &SimConfig) -> Result<(SeriesMatrix, SimTruth)> {
    simulate_replicate(cfg, 0)
}

/// Simulate replicate `index` of `cfg`; a pure function of `(cfg, index)`.
pub fn simulate_replicate(cfg: &SimConfig, index: u64) -> Result<(SeriesMatrix, SimTruth)> {
    cfg.validate()?;
    let mut rng = replicate_rng(cfg.seed, index);
    let breakpoints = (0..cfg.m)
        .map(|_| gen_segmentation(cfg.n, cfg.kbar, &mut rng))
        .collect();
    let segmentation = Segmentation::new(cfg.n, breakpoints)?;
    let means = gen_means(&segmentation, &mut rng);
    let cov = gen_sigma(cfg.m, cfg.sigma, cfg.rho, cfg.alpha, &mut rng)?;
    let mean_matrix = expand_means(&segmentation, &means)?;
    let noise = gen_noise(cfg.n, &cov.sigma, cfg.noise, &mut rng)?;
    let y = SeriesMatrix::new(&mean_matrix + noise)?;
    Ok((
        y,
        SimTruth {
            segmentation,
            means,
            sigma: cov.sigma,
            mean_matrix,
        },
    ))
}
