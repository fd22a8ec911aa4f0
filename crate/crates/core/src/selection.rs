//! Choice of the number of factors `Q` and segments `K`.
//!
//! For each `K` the factor count is chosen by `BIC_K(Q)`; the segment count is
//! then chosen by the modified BIC `mBIC_{Q̂_K}(K)`:
//!
//! ```text
//! Q̂_K = argmax_Q BIC_K(Q),   K̂ = argmax_K mBIC_{Q̂_K}(K),   Q̂ = Q̂_K̂
//! ```

use statrs::function::gamma::ln_gamma;

use crate::em::{em_fit, em_fit_from, EmOptions, LowRankInverse};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Exec};
use crate::segdp::max_segments;
use crate::types::{expand_means, ModelFit, NoiseMode, SegmentMeans, SeriesMatrix};

/// Effective parameter count of a `Q`-factor covariance.
///
/// `MQ − Q(Q−1)/2` free loadings (rotation removes `Q(Q−1)/2`) plus one noise
/// variance (homoscedastic) or `M` of them (heteroscedastic).
pub fn count_params(m: usize, q: usize, mode: NoiseMode) -> Result<usize> {
    if q >= m {
        return Err(Error::InvalidParameter(format!(
            "Q = {q} outside [0, {}]",
            m.saturating_sub(1)
        )));
    }
    let loadings = m * q - q * q.saturating_sub(1) / 2;
    let noise = match mode {
        NoiseMode::Homoscedastic => 1,
        NoiseMode::Heteroscedastic => m,
    };
    Ok(loadings + noise)
}

/// `2 log L − D_Q log n`.
pub fn bic_value(loglik: f64, params: usize, n: usize) -> f64 {
    2.0 * loglik - params as f64 * (n as f64).ln()
}

/// `BIC_K(Q)` of a fit. The penalty uses the number of time points `n`.
pub fn bic_q(y: &SeriesMatrix, fit: &ModelFit) -> Result<f64> {
    let d = count_params(y.m(), fit.q(), fit.factor.noise().mode())?;
    Ok(bic_value(fit.loglik, d, y.n()))
}

/// The individual pieces of the modified BIC, kept for reporting and tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MbicTerms {
    pub ss_all: f64,
    pub ss_wg: f64,
    pub ss_bg: f64,
    pub fit_term: f64,
    pub ratio_term: f64,
    pub gamma_term: f64,
    pub length_term: f64,
    pub count_term: f64,
    pub value: f64,
}

/// `mBIC_Q(K)` of a fit:
///
/// ```text
/// (K−M)/2 · log(SS_all/2) + ((N−K)/2 + 1) · log(1 + SS_bg/SS_wg)
///   + log Γ((N−K)/2 + 1) − ½ Σ_m Σ_k log n̂_k^m − (K−M) · log N
/// ```
///
/// The sums of squares use the metric `Σ̂⁻¹` of the fit; `SS_wg` is taken
/// around the plain segment averages of `Y` on the fitted segmentation and
/// `SS_all` around the grand mean. Returns `-inf` (with a warning) when
/// `SS_wg ≤ 0`, which only happens on exactly fitted data.
pub fn mbic_k(y: &SeriesMatrix, fit: &ModelFit) -> Result<f64> {
    Ok(mbic_terms(y, fit)?.value)
}

pub fn mbic_terms(y: &SeriesMatrix, fit: &ModelFit) -> Result<MbicTerms> {
    let seg = &fit.segmentation;
    if seg.n() != y.n() || seg.m() != y.m() {
        return Err(Error::Dimension("fit does not match data".into()));
    }
    let inv = LowRankInverse::new(&fit.factor)?;
    let data = y.values();
    let means = SegmentMeans::from_data(data, seg);
    let resid_wg = data - expand_means(seg, &means)?;
    let grand = data.sum() / y.total() as f64;
    let resid_all = data.map(|v| v - grand);
    let ss_wg = inv.quad_form_sum(&resid_wg);
    let ss_all = inv.quad_form_sum(&resid_all);
    let ss_bg = ss_all - ss_wg;

    let k = seg.total_segments() as f64;
    let m = y.m() as f64;
    let big_n = y.total() as f64;
    let half = (big_n - k) / 2.0 + 1.0;
    let fit_term = (k - m) / 2.0 * (ss_all / 2.0).ln();
    let ratio_term = half * (1.0 + ss_bg / ss_wg).ln();
    let gamma_term = ln_gamma(half);
    let length_term = -0.5
        * (0..seg.m())
            .flat_map(|s| seg.segment_lengths(s))
            .map(|l| (l as f64).ln())
            .sum::<f64>();
    let count_term = -(k - m) * big_n.ln();
    let value = if ss_wg <= 0.0 {
        log::warn!("mBIC undefined: within-segment sum of squares is {ss_wg}");
        f64::NEG_INFINITY
    } else {
        // K = M: the first term is 0 even if SS_all is 0
        let fit_term = if k == m { 0.0 } else { fit_term };
        fit_term + ratio_term + gamma_term + length_term + count_term
    };
    Ok(MbicTerms {
        ss_all,
        ss_wg,
        ss_bg,
        fit_term,
        ratio_term,
        gamma_term,
        length_term,
        count_term,
        value,
    })
}

/// Candidate values of `K` and `Q`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionGrid {
    pub k_values: Vec<usize>,
    pub q_values: Vec<usize>,
}

impl SelectionGrid {
    /// `K ∈ M ..= M + ⌊N/25⌋` and `Q ∈ 0 ..= M − 1`.
    pub fn default_for(n: usize, m: usize) -> Self {
        Self::with_bounds(n, m, m + n * m / 25, m.saturating_sub(1))
    }

    /// `K ∈ M ..= k_max` and `Q ∈ 0 ..= q_max`, clipped to what the data admits.
    pub fn with_bounds(n: usize, m: usize, k_max: usize, q_max: usize) -> Self {
        let k_max = k_max.min(max_segments(n, m, 1)).max(m);
        let q_max = q_max.min(m.saturating_sub(1));
        Self {
            k_values: (m..=k_max).collect(),
            q_values: (0..=q_max).collect(),
        }
    }

    pub fn validate(&self, n: usize, m: usize) -> Result<()> {
        if self.k_values.is_empty() || self.q_values.is_empty() {
            return Err(Error::InvalidParameter("empty selection grid".into()));
        }
        let cap = max_segments(n, m, 1);
        if let Some(k) = self.k_values.iter().find(|&&k| k < m || k > cap) {
            return Err(Error::InvalidParameter(format!("K = {k} outside [{m}, {cap}]")));
        }
        if let Some(q) = self.q_values.iter().find(|&&q| q + 1 > m) {
            return Err(Error::InvalidParameter(format!("Q = {q} exceeds M - 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SelectOptions {
    pub em: EmOptions,
    /// Start each `Q > Q_min` fit from the segmentation of the previous `Q` at the same `K`.
    pub warm_start: bool,
    /// Keep every cell's fit in the table, not just the per-`K` winners.
    pub keep_fits: bool,
    /// Parallelism across values of `K`.
    pub exec: Exec,
}

impl Default for SelectOptions {
    fn default() -> Self {
        Self {
            em: EmOptions::default(),
            warm_start: true,
            keep_fits: false,
            exec: Exec::Parallel,
        }
    }
}

/// Outcome of one `(K, Q)` fit.
#[derive(Debug, Clone)]
pub struct Cell {
    pub k: usize,
    pub q: usize,
    pub outcome: std::result::Result<CellScores, String>,
    pub fit: Option<ModelFit>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellScores {
    pub loglik: f64,
    pub bic: f64,
    pub mbic: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Per-`K` result of the first stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KChoice {
    pub k: usize,
    pub q_hat: usize,
    pub bic: f64,
    pub mbic: f64,
}

/// Result of applying the two-stage heuristic to (a subset of) the cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Choice {
    pub per_k: Vec<KChoice>,
    pub k_hat: usize,
    pub q_hat: usize,
}

/// Apply the heuristic to a set of cell scores.
///
/// Cells are scanned in order of increasing `K` then `Q`; a candidate replaces
/// the incumbent only if strictly better, so ties go to smaller `Q` and then
/// smaller `K`.
pub fn choose<'a, I>(cells: I) -> Option<Choice>
where
    I: IntoIterator<Item = (usize, usize, &'a CellScores)>,
{
    let mut sorted: Vec<(usize, usize, &CellScores)> = cells.into_iter().collect();
    sorted.sort_by_key(|&(k, q, _)| (k, q));
    let mut per_k: Vec<KChoice> = Vec::new();
    for (k, q, s) in sorted {
        match per_k.last_mut() {
            Some(last) if last.k == k => {
                if s.bic > last.bic {
                    *last = KChoice { k, q_hat: q, bic: s.bic, mbic: s.mbic };
                }
            }
            _ => per_k.push(KChoice { k, q_hat: q, bic: s.bic, mbic: s.mbic }),
        }
    }
    let mut best: Option<&KChoice> = None;
    for c in &per_k {
        if best.is_none_or(|b| c.mbic > b.mbic) {
            best = Some(c);
        }
    }
    let best = *best?;
    Some(Choice {
        k_hat: best.k,
        q_hat: best.q_hat,
        per_k,
    })
}

/// All cells plus the selected model.
#[derive(Debug, Clone)]
pub struct CriterionTable {
    pub cells: Vec<Cell>,
    pub choice: Choice,
    pub fit: ModelFit,
}

impl CriterionTable {
    pub fn k_hat(&self) -> usize {
        self.choice.k_hat
    }

    pub fn q_hat(&self) -> usize {
        self.choice.q_hat
    }

    pub fn cell(&self, k: usize, q: usize) -> Option<&Cell> {
        self.cells.iter().find(|c| c.k == k && c.q == q)
    }

    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.outcome.is_err()).count()
    }

    /// Re-run the heuristic on the cells accepted by `keep` and return the
    /// choice with its fit (when that fit was retained).
    pub fn choose_where<F>(&self, keep: F) -> Option<(Choice, Option<&ModelFit>)>
    where
        F: Fn(usize, usize) -> bool,
    {
        let choice = choose(self.cells.iter().filter(|c| keep(c.k, c.q)).filter_map(|c| {
            c.outcome.as_ref().ok().map(|s| (c.k, c.q, s))
        }))?;
        let fit = self
            .cell(choice.k_hat, choice.q_hat)
            .and_then(|c| c.fit.as_ref());
        Some((choice, fit))
    }
}

fn score_fit(y: &SeriesMatrix, fit: &ModelFit) -> Result<CellScores> {
    Ok(CellScores {
        loglik: fit.loglik,
        bic: bic_q(y, fit)?,
        mbic: mbic_k(y, fit)?,
        iterations: fit.iterations,
        converged: fit.converged,
    })
}

/// Fit every grid cell and apply the two-stage heuristic.
pub fn select(y: &SeriesMatrix, grid: &SelectionGrid, opts: &SelectOptions) -> Result<CriterionTable> {
    grid.validate(y.n(), y.m())?;
    opts.em.validate()?;
    let mut k_values = grid.k_values.clone();
    k_values.sort_unstable();
    k_values.dedup();
    let mut q_values = grid.q_values.clone();
    q_values.sort_unstable();
    q_values.dedup();

    let rows: Vec<Vec<Cell>> = map_indexed(opts.exec, k_values.len(), |i| {
        let k = k_values[i];
        let mut prev: Option<ModelFit> = None;
        let mut row = Vec::with_capacity(q_values.len());
        for &q in &q_values {
            let fitted = match (&prev, opts.warm_start) {
                (Some(p), true) => em_fit_from(y, p.segmentation.clone(), q, &opts.em),
                _ => em_fit(y, k, q, &opts.em),
            };
            let outcome = fitted.and_then(|fit| score_fit(y, &fit).map(|s| (s, fit)));
            match outcome {
                Ok((scores, fit)) => {
                    prev = Some(fit.clone());
                    row.push(Cell { k, q, outcome: Ok(scores), fit: Some(fit) });
                }
                Err(e) => {
                    log::warn!("fit failed at K = {k}, Q = {q}: {e}");
                    row.push(Cell { k, q, outcome: Err(e.to_string()), fit: None });
                }
            }
        }
        // only the BIC winner of this K is needed downstream unless asked otherwise
        if !opts.keep_fits {
            let best_q = choose(row.iter().filter_map(|c| c.outcome.as_ref().ok().map(|s| (c.k, c.q, s))))
                .map(|c| c.q_hat);
            for c in &mut row {
                if Some(c.q) != best_q {
                    c.fit = None;
                }
            }
        }
        row
    });
    let cells: Vec<Cell> = rows.into_iter().flatten().collect();
    let choice = choose(
        cells
            .iter()
            .filter_map(|c| c.outcome.as_ref().ok().map(|s| (c.k, c.q, s))),
    )
    .ok_or(Error::AllCellsFailed)?;
    let fit = cells
        .iter()
        .find(|c| c.k == choice.k_hat && c.q == choice.q_hat)
        .and_then(|c| c.fit.clone())
        .ok_or(Error::AllCellsFailed)?;
    Ok(CriterionTable { cells, choice, fit })
}
