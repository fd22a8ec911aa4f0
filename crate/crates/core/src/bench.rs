//! Monte-Carlo harness: simulate, select, score, summarise.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use statrs::statistics::{Data, OrderStatistics};

use crate::em::EmOptions;
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Exec};
use crate::metrics::score;
use crate::segdp::max_segments;
use crate::selection::{select, SelectOptions, SelectionGrid};
use crate::simgen::{simulate_replicate, SimConfig};
use crate::types::{ModelFit, SeriesMatrix, SimTruth};

/// Which `(K, Q)` is scored for a replicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// `(K̂, Q̂)` from the full heuristic.
    QhatKhat,
    /// `Q = 0`, `K̂` chosen among the `Q = 0` fits.
    Q0Khat,
    /// `Q = Q* = M − 1`, `K̂` chosen among those fits.
    QstarKhat,
    /// `K = K*`, `Q̂_{K*}` chosen by BIC.
    QhatKstar,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::QhatKhat, Method::Q0Khat, Method::QstarKhat, Method::QhatKstar];

    pub fn name(&self) -> &'static str {
        match self {
            Method::QhatKhat => "qhat_khat",
            Method::Q0Khat => "q0_khat",
            Method::QstarKhat => "qstar_khat",
            Method::QhatKstar => "qhat_kstar",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// Optional bounds of the selection grid. Unset `K` bounds default to
/// `M + ⌊k̄M/2⌋ ..= M + ⌈3k̄M/2⌉`, i.e. half to one and a half times the
/// expected number of breakpoints; `Q` defaults to `0 ..= M − 1`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GridBounds {
    pub k_min: Option<usize>,
    pub k_max: Option<usize>,
    pub q_max: Option<usize>,
}

impl GridBounds {
    pub fn resolve(&self, n: usize, m: usize, kbar: f64) -> Result<SelectionGrid> {
        let expected = kbar * m as f64;
        let cap = max_segments(n, m, 1);
        let k_min = self.k_min.unwrap_or(m + (expected / 2.0).floor() as usize).clamp(m, cap);
        let k_max = self.k_max.unwrap_or(m + (1.5 * expected).ceil() as usize).min(cap);
        if k_max < k_min {
            return Err(Error::InvalidParameter(format!("empty K range {k_min}..={k_max}")));
        }
        let q_max = self.q_max.unwrap_or(m - 1).min(m - 1);
        Ok(SelectionGrid {
            k_values: (k_min..=k_max).collect(),
            q_values: (0..=q_max).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub sim: SimConfig,
    pub replicates: usize,
    pub grid: GridBounds,
    pub em: EmOptions,
    /// Breakpoint matching tolerance in time points.
    pub window: usize,
    pub methods: Vec<Method>,
    /// Parallelism across replicates.
    pub exec: Exec,
}

impl BenchConfig {
    pub fn new(sim: SimConfig, replicates: usize) -> Self {
        Self {
            sim,
            replicates,
            grid: GridBounds::default(),
            em: EmOptions::default(),
            window: 0,
            methods: vec![Method::QhatKhat],
            exec: Exec::Parallel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.em.validate()?;
        if self.replicates == 0 {
            return Err(Error::InvalidParameter("replicates must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidParameter("no method requested".into()));
        }
        self.grid.resolve(self.sim.n, self.sim.m, self.sim.kbar).map(|_| ())
    }
}

/// One CSV row per replicate and method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub seed: u64,
    pub replicate: u64,
    pub method: String,
    #[serde(rename = "M")]
    pub m: usize,
    pub n: usize,
    pub sigma: f64,
    pub rho: f64,
    pub noise_kind: String,
    pub df: Option<f64>,
    #[serde(rename = "K_true")]
    pub k_true: usize,
    #[serde(rename = "K_hat")]
    pub k_hat: usize,
    #[serde(rename = "Q_hat")]
    pub q_hat: usize,
    pub fpr: f64,
    pub tpr: f64,
    pub rmse_sigma: f64,
    pub rmse_mean: f64,
    /// Time of the grid search shared by all methods of the replicate.
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchFailure {
    pub replicate: u64,
    pub method: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    QHat,
    KError,
    RmseSigma,
    Fpr,
    Tpr,
    RmseMean,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::QHat,
        Metric::KError,
        Metric::RmseSigma,
        Metric::Fpr,
        Metric::Tpr,
        Metric::RmseMean,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::QHat => "Q_hat",
            Metric::KError => "K_hat_minus_K_true",
            Metric::RmseSigma => "rmse_sigma",
            Metric::Fpr => "fpr",
            Metric::Tpr => "tpr",
            Metric::RmseMean => "rmse_mean",
        }
    }

    pub fn of(&self, row: &BenchRow) -> f64 {
        match self {
            Metric::QHat => row.q_hat as f64,
            Metric::KError => row.k_hat as f64 - row.k_true as f64,
            Metric::RmseSigma => row.rmse_sigma,
            Metric::Fpr => row.fpr,
            Metric::Tpr => row.tpr,
            Metric::RmseMean => row.rmse_mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub metric: String,
    pub count: usize,
    pub failures: usize,
    pub mean: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOutcome {
    pub rows: Vec<BenchRow>,
    pub failures: Vec<BenchFailure>,
}

impl BenchOutcome {
    pub fn values(&self, method: Method, metric: Metric) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.method == method.name())
            .map(|r| metric.of(r))
            .collect()
    }

    /// Mean of a metric over the successful replicates of a method.
    pub fn mean(&self, method: Method, metric: Metric) -> Option<f64> {
        let v = self.values(method, metric);
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Means and quartiles per method and metric, methods in `methods` order.
    pub fn summary(&self, methods: &[Method]) -> Vec<SummaryRow> {
        let mut out = Vec::new();
        for &method in methods {
            let failures = self
                .failures
                .iter()
                .filter(|f| f.method.is_none() || f.method.as_deref() == Some(method.name()))
                .count();
            for metric in Metric::ALL {
                let v = self.values(method, metric);
                let count = v.len();
                let (mean, q1, median, q3) = if count == 0 {
                    (f64::NAN, f64::NAN, f64::NAN, f64::NAN)
                } else {
                    let mean = v.iter().sum::<f64>() / count as f64;
                    let mut d = Data::new(v);
                    (mean, d.lower_quartile(), d.median(), d.upper_quartile())
                };
                out.push(SummaryRow {
                    method: method.name().to_string(),
                    metric: metric.name().to_string(),
                    count,
                    failures,
                    mean,
                    q1,
                    median,
                    q3,
                });
            }
        }
        out
    }
}

struct Scored {
    method: Method,
    outcome: Result<(usize, ModelFit)>,
}

fn score_row(
    cfg: &BenchConfig,
    replicate: u64,
    method: Method,
    truth: &SimTruth,
    fit: &ModelFit,
    wall_ms: f64,
) -> Result<BenchRow> {
    let s = score(&fit.segmentation, &fit.sigma(), &fit.mean_matrix(), truth, cfg.window)?;
    Ok(BenchRow {
        seed: cfg.sim.seed,
        replicate,
        method: method.name().to_string(),
        m: cfg.sim.m,
        n: cfg.sim.n,
        sigma: cfg.sim.sigma,
        rho: cfg.sim.rho,
        noise_kind: cfg.sim.noise.name().to_string(),
        df: cfg.sim.noise.df(),
        k_true: truth.segmentation.total_segments(),
        k_hat: fit.k(),
        q_hat: fit.q(),
        fpr: s.fpr,
        tpr: s.tpr,
        rmse_sigma: s.rmse_sigma,
        rmse_mean: s.rmse_mean,
        wall_ms,
    })
}

fn method_fits(
    cfg: &BenchConfig,
    y: &SeriesMatrix,
    truth: &SimTruth,
    grid: &SelectionGrid,
) -> Result<(Vec<Scored>, f64)> {
    let opts = SelectOptions {
        em: cfg.em,
        warm_start: true,
        keep_fits: true,
        exec: Exec::Sequential,
    };
    let start = Instant::now();
    let table = select(y, grid, &opts)?;
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let m = y.m();
    let k_star = truth.segmentation.total_segments();
    let restricted = |keep: &dyn Fn(usize, usize) -> bool, what: &str| -> Result<(usize, ModelFit)> {
        let (choice, fit) = table
            .choose_where(keep)
            .ok_or_else(|| Error::InvalidParameter(format!("no fitted cell with {what}")))?;
        let fit = fit.ok_or(Error::AllCellsFailed)?;
        Ok((choice.k_hat, fit.clone()))
    };
    let scored = cfg
        .methods
        .iter()
        .map(|&method| {
            let outcome = match method {
                Method::QhatKhat => Ok((table.k_hat(), table.fit.clone())),
                Method::Q0Khat => restricted(&|_, q| q == 0, "Q = 0"),
                Method::QstarKhat => restricted(&|_, q| q == m - 1, "Q = M - 1"),
                Method::QhatKstar if grid.k_values.contains(&k_star) => {
                    restricted(&|k, _| k == k_star, "K = K*")
                }
                Method::QhatKstar => {
                    let single = SelectionGrid {
                        k_values: vec![k_star],
                        q_values: grid.q_values.clone(),
                    };
                    select(y, &single, &opts).map(|t| (k_star, t.fit))
                }
            };
            Scored { method, outcome }
        })
        .collect();
    Ok((scored, wall_ms))
}

/// Run replicate `replicate` of the benchmark: rows for the methods that
/// succeeded and failures for the rest.
pub fn run_replicate(cfg: &BenchConfig, replicate: u64) -> (Vec<BenchRow>, Vec<BenchFailure>) {
    let fail = |method: Option<Method>, e: Error| {
        log::warn!("replicate {replicate} {}: {e}", method.map_or("", |m| m.name()));
        BenchFailure {
            replicate,
            method: method.map(|m| m.name().to_string()),
            message: e.to_string(),
        }
    };
    let prepared = simulate_replicate(&cfg.sim, replicate).and_then(|(y, truth)| {
        let grid = cfg.grid.resolve(y.n(), y.m(), cfg.sim.kbar)?;
        let (scored, wall_ms) = method_fits(cfg, &y, &truth, &grid)?;
        Ok((truth, scored, wall_ms))
    });
    let (truth, scored, wall_ms) = match prepared {
        Ok(p) => p,
        Err(e) => return (Vec::new(), vec![fail(None, e)]),
    };
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for s in scored {
        match s
            .outcome
            .and_then(|(_, fit)| score_row(cfg, replicate, s.method, &truth, &fit, wall_ms))
        {
            Ok(row) => rows.push(row),
            Err(e) => failures.push(fail(Some(s.method), e)),
        }
    }
    (rows, failures)
}

/// Run all replicates; output order is by replicate, then by method.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchOutcome> {
    cfg.validate()?;
    let per = map_indexed(cfg.exec, cfg.replicates, |r| run_replicate(cfg, r as u64));
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (r, f) in per {
        rows.extend(r);
        failures.extend(f);
    }
    Ok(BenchOutcome { rows, failures })
}
