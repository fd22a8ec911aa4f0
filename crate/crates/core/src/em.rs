//! Likelihood and EM estimation for a fixed number of segments `K` and factors `Q`.
//!
//! One iteration is: latent moments from the current parameters, closed-form
//! loadings update, closed-form noise update, then an exact segmentation update
//! on the factor-adjusted data `Y − ẐB'`. Each step maximises the expected
//! complete-data log-likelihood in its block, so the observed log-likelihood
//! never decreases.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::segdp::{max_segments, two_stage_segment_with, JointSegmentation, SegmentOptions};
use crate::types::{
    expand_means, FactorParams, LatentMoments, ModelFit, Noise, NoiseMode, Segmentation,
    SeriesMatrix,
};

/// Lower bound applied to every estimated variance.
pub const NOISE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmOptions {
    pub max_iter: usize,
    /// Stop when the relative change of `−2 log L` falls below this.
    pub rel_tol: f64,
    pub noise_mode: NoiseMode,
    pub min_seg_len: usize,
    /// Execution mode of the per-series dynamic programs.
    pub exec: Exec,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            rel_tol: 1e-6,
            noise_mode: NoiseMode::Homoscedastic,
            min_seg_len: 1,
            exec: Exec::Sequential,
        }
    }
}

impl EmOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::InvalidParameter("max_iter must be at least 1".into()));
        }
        if !(self.rel_tol.is_finite() && self.rel_tol > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "rel_tol must be positive, got {}",
                self.rel_tol
            )));
        }
        Ok(())
    }

    fn segment_options(&self) -> SegmentOptions {
        SegmentOptions {
            min_len: self.min_seg_len.max(1),
            exec: self.exec,
        }
    }
}

/// `Σ⁻¹` and `log|Σ|` for `Σ = BB' + Ψ` through the `Q × Q` capacitance
/// matrix `A = I + B'Ψ⁻¹B`:
///
/// `Σ⁻¹ = Ψ⁻¹ − Ψ⁻¹B A⁻¹ B'Ψ⁻¹`, `log|Σ| = log|Ψ| + log|A|`.
///
/// `A⁻¹` is also the conditional covariance `W` of the latent factors.
#[derive(Debug, Clone)]
pub struct LowRankInverse {
    psi_inv: DVector<f64>,
    /// `Ψ⁻¹B`, `M × Q`.
    psi_inv_b: DMatrix<f64>,
    /// `A⁻¹`, `Q × Q`.
    w: DMatrix<f64>,
    logdet_psi: f64,
    logdet: f64,
}

impl LowRankInverse {
    pub fn new(factor: &FactorParams) -> Result<Self> {
        let psi = factor.psi();
        if let Some(bad) = psi.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "noise variance must be positive, got {bad}"
            )));
        }
        let psi_inv = psi.map(|v| 1.0 / v);
        let b = factor.loadings();
        let q = b.ncols();
        let mut psi_inv_b = b.clone();
        for (i, mut row) in psi_inv_b.row_iter_mut().enumerate() {
            row *= psi_inv[i];
        }
        let logdet_psi: f64 = psi.iter().map(|v| v.ln()).sum();
        if q == 0 {
            return Ok(Self {
                psi_inv,
                psi_inv_b,
                w: DMatrix::zeros(0, 0),
                logdet_psi,
                logdet: logdet_psi,
            });
        }
        let a = DMatrix::identity(q, q) + b.transpose() * &psi_inv_b;
        let chol = Cholesky::new(symmetrize(a))
            .ok_or_else(|| Error::Numerical("capacitance matrix not positive definite".into()))?;
        let logdet_a = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let w = symmetrize(chol.inverse());
        Ok(Self {
            psi_inv,
            psi_inv_b,
            w,
            logdet_psi,
            logdet: logdet_psi + logdet_a,
        })
    }

    /// `log|Σ|`.
    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    pub fn logdet_psi(&self) -> f64 {
        self.logdet_psi
    }

    /// `W = (I + B'Ψ⁻¹B)⁻¹`.
    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn q(&self) -> usize {
        self.w.nrows()
    }

    /// `Σ⁻¹ v`.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v.component_mul(&self.psi_inv);
        if self.q() > 0 {
            let g = self.psi_inv_b.transpose() * v;
            out -= &self.psi_inv_b * (&self.w * g);
        }
        out
    }

    /// Dense `Σ⁻¹`; only meant for diagnostics and small `M`.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let m = self.psi_inv.len();
        let mut out = DMatrix::from_diagonal(&self.psi_inv);
        if self.q() > 0 {
            out -= &self.psi_inv_b * &self.w * self.psi_inv_b.transpose();
        }
        debug_assert_eq!(out.nrows(), m);
        out
    }

    /// `Σ_t r_t Σ⁻¹ r_t'` over the rows of `resid`.
    pub fn quad_form_sum(&self, resid: &DMatrix<f64>) -> f64 {
        let mut diag = 0.0;
        for (m, col) in resid.column_iter().enumerate() {
            diag += col.norm_squared() * self.psi_inv[m];
        }
        if self.q() == 0 {
            return diag;
        }
        let g = resid * &self.psi_inv_b;
        let h = &g * &self.w;
        diag - g.dot(&h)
    }

    /// `Ψ⁻¹B W`, mapping a residual row to its conditional factor mean.
    fn projector(&self) -> DMatrix<f64> {
        &self.psi_inv_b * &self.w
    }
}

/// Alias matching the operation name used throughout the docs.
pub fn lowrank_inverse_logdet(factor: &FactorParams) -> Result<LowRankInverse> {
    LowRankInverse::new(factor)
}

fn symmetrize(mut a: DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    a
}

fn check_shape(y: &DMatrix<f64>, other: &DMatrix<f64>, what: &str) -> Result<()> {
    if y.shape() != other.shape() {
        return Err(Error::Dimension(format!(
            "{what} is {:?}, data is {:?}",
            other.shape(),
            y.shape()
        )));
    }
    Ok(())
}

/// `−2 log L = N log 2π + n log|Σ| + Σ_t ‖Y_t − μ_t‖²_{Σ⁻¹}`.
pub fn neg2_loglik(y: &DMatrix<f64>, mean: &DMatrix<f64>, factor: &FactorParams) -> Result<f64> {
    check_shape(y, mean, "mean matrix")?;
    if factor.m() != y.ncols() {
        return Err(Error::Dimension(format!(
            "factor model has {} series, data has {}",
            factor.m(),
            y.ncols()
        )));
    }
    let inv = LowRankInverse::new(factor)?;
    let resid = y - mean;
    Ok(neg2_from_resid(&resid, &inv))
}

fn neg2_from_resid(resid: &DMatrix<f64>, inv: &LowRankInverse) -> f64 {
    let (n, m) = resid.shape();
    (n * m) as f64 * (2.0 * PI).ln() + n as f64 * inv.logdet() + inv.quad_form_sum(resid)
}

/// Observed-data log-likelihood of a fit.
pub fn full_loglik(y: &SeriesMatrix, fit: &ModelFit) -> Result<f64> {
    if fit.segmentation.n() != y.n() || fit.segmentation.m() != y.m() {
        return Err(Error::Dimension(format!(
            "fit is {}x{}, data is {}x{}",
            fit.segmentation.n(),
            fit.segmentation.m(),
            y.n(),
            y.m()
        )));
    }
    let mean = expand_means(&fit.segmentation, &fit.means)?;
    Ok(-0.5 * neg2_loglik(y.values(), &mean, &fit.factor)?)
}

/// Conditional log-likelihood of `Y` given known factors `Z`, as `−2 log L(Y | Z)`.
pub fn conditional_neg2_loglik(
    y: &DMatrix<f64>,
    mean: &DMatrix<f64>,
    z: &DMatrix<f64>,
    factor: &FactorParams,
) -> Result<f64> {
    check_shape(y, mean, "mean matrix")?;
    let (n, m) = y.shape();
    if z.nrows() != n || z.ncols() != factor.q() {
        return Err(Error::Dimension("factor scores do not match".into()));
    }
    let psi = factor.psi();
    let e = y - mean - z * factor.loadings().transpose();
    let mut quad = 0.0;
    for (j, col) in e.column_iter().enumerate() {
        quad += col.norm_squared() / psi[j];
    }
    let logdet_psi: f64 = psi.iter().map(|v| v.ln()).sum();
    Ok((n * m) as f64 * (2.0 * PI).ln() + n as f64 * logdet_psi + quad)
}

/// `−2 × ` the expected complete-data conditional log-likelihood, with the
/// moments held fixed and `(B, Ψ)` taken from `factor`. Expanded in terms of
/// the sufficient statistics `R'R`, `R'Ẑ` and `Ẑ'Ẑ + nW` (plus `N log 2π`).
pub fn expected_complete_neg2(
    resid: &DMatrix<f64>,
    moments: &LatentMoments,
    factor: &FactorParams,
) -> f64 {
    let (n, m) = resid.shape();
    let psi = factor.psi();
    let b = factor.loadings();
    let logdet_psi: f64 = psi.iter().map(|v| v.ln()).sum();
    let mut total = (n * m) as f64 * (2.0 * PI).ln() + n as f64 * logdet_psi;
    for (j, col) in resid.column_iter().enumerate() {
        total += col.norm_squared() / psi[j];
    }
    if moments.q() > 0 {
        let cross = resid.transpose() * &moments.zhat; // M × Q
        let gram = moments.zhat.transpose() * &moments.zhat + &moments.w * n as f64;
        for j in 0..m {
            let bj = b.row(j);
            let lin = bj.dot(&cross.row(j));
            let quad = (bj * &gram).dot(&bj);
            total += (quad - 2.0 * lin) / psi[j];
        }
    }
    total
}

/// Conditional moments of the factors given the data and current parameters.
///
/// `W = (I + B'Ψ⁻¹B)⁻¹` and `Ẑ_t = (Y_t − μ_t) Ψ⁻¹ B W`.
pub fn e_step(y: &DMatrix<f64>, mean: &DMatrix<f64>, factor: &FactorParams) -> Result<LatentMoments> {
    check_shape(y, mean, "mean matrix")?;
    let inv = LowRankInverse::new(factor)?;
    Ok(e_step_resid(&(y - mean), &inv))
}

fn e_step_resid(resid: &DMatrix<f64>, inv: &LowRankInverse) -> LatentMoments {
    if inv.q() == 0 {
        return LatentMoments::empty(resid.nrows());
    }
    LatentMoments {
        zhat: resid * inv.projector(),
        w: inv.w().clone(),
    }
}

/// `B = [Σ_t R_t' Ẑ_t] [Σ_t (Ẑ_t'Ẑ_t + W)]⁻¹`, with `R = Y − Tμ`.
pub fn m_step_loadings(resid: &DMatrix<f64>, moments: &LatentMoments) -> Result<DMatrix<f64>> {
    let (n, m) = resid.shape();
    let q = moments.q();
    if q == 0 {
        return Ok(DMatrix::zeros(m, 0));
    }
    if moments.zhat.nrows() != n {
        return Err(Error::Dimension("factor scores do not match residuals".into()));
    }
    let cross = resid.transpose() * &moments.zhat; // M × Q
    let gram = symmetrize(moments.zhat.transpose() * &moments.zhat + &moments.w * n as f64);
    let chol: Cholesky<f64, Dyn> = Cholesky::new(gram)
        .ok_or_else(|| Error::Numerical("factor Gram matrix not positive definite".into()))?;
    // B' = gram⁻¹ cross'
    Ok(chol.solve(&cross.transpose()).transpose())
}

/// Closed-form noise update given the freshly updated loadings.
///
/// Heteroscedastic: `diag((1/n) Σ_t R_t' E_t)` with `E_t = R_t − Ẑ_t B'`.
/// Homoscedastic: `σ² = (1/N) Σ_t [E_t E_t' + Tr(B'BW)]`.
/// Every variance is floored at [`NOISE_FLOOR`].
pub fn m_step_noise(
    resid: &DMatrix<f64>,
    moments: &LatentMoments,
    loadings: &DMatrix<f64>,
    mode: NoiseMode,
) -> Noise {
    let (n, m) = resid.shape();
    let e = if moments.q() > 0 {
        resid - &moments.zhat * loadings.transpose()
    } else {
        resid.clone()
    };
    match mode {
        NoiseMode::Heteroscedastic => {
            let psi = (0..m)
                .map(|j| {
                    let v = resid.column(j).dot(&e.column(j)) / n as f64;
                    v.max(NOISE_FLOOR)
                })
                .collect();
            Noise::Heteroscedastic(psi)
        }
        NoiseMode::Homoscedastic => {
            let mut total = e.norm_squared();
            if moments.q() > 0 {
                let btb = loadings.transpose() * loadings;
                total += n as f64 * btb.component_mul(&moments.w).sum();
            }
            Noise::Homoscedastic((total / (n * m) as f64).max(NOISE_FLOOR))
        }
    }
}

/// Exact segmentation update on `Y̆ = Y − ẐB'` with weights `1/ψ_m`.
pub fn m_step_segmentation(
    y: &DMatrix<f64>,
    moments: &LatentMoments,
    loadings: &DMatrix<f64>,
    noise: &Noise,
    k: usize,
    opts: SegmentOptions,
) -> Result<JointSegmentation> {
    let psi = noise.diagonal(y.ncols());
    if moments.q() == 0 {
        return two_stage_segment_with(y, psi.as_slice(), k, opts);
    }
    let adjusted = y - &moments.zhat * loadings.transpose();
    two_stage_segment_with(&adjusted, psi.as_slice(), k, opts)
}

fn check_kq(y: &SeriesMatrix, k: usize, q: usize, min_len: usize) -> Result<()> {
    let (n, m) = (y.n(), y.m());
    let cap = max_segments(n, m, min_len);
    if k < m || k > cap {
        return Err(Error::InfeasibleSegments(format!(
            "K = {k} outside [{m}, {cap}]"
        )));
    }
    if q + 1 > m.max(1) {
        return Err(Error::InvalidParameter(format!(
            "Q = {q} must be at most M - 1 = {}",
            m - 1
        )));
    }
    Ok(())
}

/// Starting point: segment means from `seg`, then a principal-component warm
/// start for `(B, σ²)` from the residual covariance.
pub fn initialize(
    y: &SeriesMatrix,
    seg: Segmentation,
    q: usize,
    mode: NoiseMode,
) -> Result<ModelFit> {
    let means = crate::types::SegmentMeans::from_data(y.values(), &seg);
    let mean = expand_means(&seg, &means)?;
    let resid = y.values() - &mean;
    let (n, m) = resid.shape();
    let cov = symmetrize(resid.transpose() * &resid / n as f64);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let rest = &order[q..];
    let sigma2 = (rest.iter().map(|&i| eig.eigenvalues[i]).sum::<f64>() / rest.len() as f64)
        .max(NOISE_FLOOR);
    let mut loadings = DMatrix::zeros(m, q);
    for (col, &i) in order[..q].iter().enumerate() {
        let scale = (eig.eigenvalues[i] - sigma2).max(0.0).sqrt();
        loadings.set_column(col, &(eig.eigenvectors.column(i) * scale));
    }
    let noise = match mode {
        NoiseMode::Homoscedastic => Noise::Homoscedastic(sigma2),
        NoiseMode::Heteroscedastic => Noise::Heteroscedastic(vec![sigma2; m]),
    };
    let factor = FactorParams::new(loadings, noise)?;
    let neg2 = neg2_loglik(y.values(), &mean, &factor)?;
    Ok(ModelFit {
        segmentation: seg,
        means,
        factor,
        loglik: -0.5 * neg2,
        iterations: 0,
        converged: false,
        loglik_trace: vec![-0.5 * neg2],
    })
}

/// Run EM for fixed `(K, Q)` from the default starting point: the `Q = 0`
/// joint segmentation of the raw data followed by the principal-component
/// factor warm start.
pub fn em_fit(y: &SeriesMatrix, k: usize, q: usize, opts: &EmOptions) -> Result<ModelFit> {
    opts.validate()?;
    check_kq(y, k, q, opts.min_seg_len.max(1))?;
    let ones = vec![1.0; y.m()];
    let seg0 = two_stage_segment_with(y.values(), &ones, k, opts.segment_options())?;
    let start = initialize(y, seg0.segmentation, q, opts.noise_mode)?;
    em_iterate(y, k, start, opts)
}

/// Like [`em_fit`] but initialised from a given segmentation.
pub fn em_fit_from(
    y: &SeriesMatrix,
    seg: Segmentation,
    q: usize,
    opts: &EmOptions,
) -> Result<ModelFit> {
    opts.validate()?;
    let k = seg.total_segments();
    check_kq(y, k, q, opts.min_seg_len.max(1))?;
    let start = initialize(y, seg, q, opts.noise_mode)?;
    em_iterate(y, k, start, opts)
}

/// Iterate EM from an explicit parameter value until convergence.
pub fn em_iterate(y: &SeriesMatrix, k: usize, start: ModelFit, opts: &EmOptions) -> Result<ModelFit> {
    opts.validate()?;
    let data = y.values();
    let mode = opts.noise_mode;
    let seg_opts = opts.segment_options();
    let mut fit = start;
    let mut mean = expand_means(&fit.segmentation, &fit.means)?;
    let mut resid = data - &mean;
    let mut inv = LowRankInverse::new(&fit.factor)?;
    let mut neg2 = neg2_from_resid(&resid, &inv);
    fit.loglik = -0.5 * neg2;
    if fit.loglik_trace.is_empty() {
        fit.loglik_trace.push(fit.loglik);
    }
    let q = fit.factor.q();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        iterations += 1;
        let moments = e_step_resid(&resid, &inv);
        let loadings = if q > 0 {
            m_step_loadings(&resid, &moments)?
        } else {
            DMatrix::zeros(y.m(), 0)
        };
        let noise = m_step_noise(&resid, &moments, &loadings, mode);
        let js = m_step_segmentation(data, &moments, &loadings, &noise, k, seg_opts)?;
        fit.factor = FactorParams::new(loadings, noise)?;
        fit.segmentation = js.segmentation;
        fit.means = js.means;
        mean = expand_means(&fit.segmentation, &fit.means)?;
        resid = data - &mean;
        inv = LowRankInverse::new(&fit.factor)?;
        let next = neg2_from_resid(&resid, &inv);
        if !next.is_finite() {
            return Err(Error::Numerical("log-likelihood became non-finite".into()));
        }
        fit.loglik_trace.push(-0.5 * next);
        let change = (next - neg2).abs();
        neg2 = next;
        if change <= opts.rel_tol * neg2.abs() {
            converged = true;
            break;
        }
    }
    fit.loglik = -0.5 * neg2;
    fit.iterations = iterations;
    fit.converged = converged;
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_factor(rng: &mut ChaCha8Rng, m: usize, q: usize) -> FactorParams {
        let b = DMatrix::from_fn(m, q, |_, _| rng.sample::<f64, _>(StandardNormal));
        let psi = (0..m).map(|_| rng.random_range(0.2..2.0)).collect();
        FactorParams::new(b, Noise::Heteroscedastic(psi)).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn lowrank_without_factors() {
        let f = FactorParams::independent(3, Noise::Heteroscedastic(vec![1.0, 2.0, 4.0])).unwrap();
        let inv = LowRankInverse::new(&f).unwrap();
        assert!((inv.logdet() - 8f64.ln()).abs() < 1e-14);
        let d = inv.to_dense();
        assert_eq!(d, DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.5, 0.25])));
    }

    #[test]
    fn lowrank_two_by_two() {
        let f = FactorParams::new(DMatrix::from_element(2, 1, 1.0), Noise::Homoscedastic(1.0))
            .unwrap();
        let inv = LowRankInverse::new(&f).unwrap();
        assert!((inv.logdet() - 3f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn lowrank_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let f = random_factor(&mut rng, 8, 3);
        let inv = LowRankInverse::new(&f).unwrap();
        let sigma = f.sigma();
        let dense = sigma.clone().try_inverse().unwrap();
        let low = inv.to_dense();
        for (a, b) in low.iter().zip(dense.iter()) {
            assert!((a - b).abs() <= 1e-8 * dense.amax());
        }
        assert!(rel(inv.logdet(), sigma.determinant().ln()) < 1e-8);
        let v = DVector::from_fn(8, |i, _| i as f64 - 3.0);
        let applied = inv.apply(&v);
        let expect = &dense * &v;
        assert!((applied - expect).amax() < 1e-8);
    }

    #[test]
    fn loglik_single_point() {
        let f = FactorParams::independent(1, Noise::Homoscedastic(1.0)).unwrap();
        let y = DMatrix::from_element(1, 1, 0.7);
        let v = neg2_loglik(&y, &y, &f).unwrap();
        assert!((v - (2.0 * PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn loglik_zero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let f = random_factor(&mut rng, 4, 2);
        let y = DMatrix::from_fn(7, 4, |_, _| rng.random_range(-1.0..1.0));
        let v = neg2_loglik(&y, &y, &f).unwrap();
        let expect = 28.0 * (2.0 * PI).ln() + 7.0 * f.sigma().determinant().ln();
        assert!(rel(v, expect) < 1e-12);
    }

    #[test]
    fn loglik_matches_dense_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let f = random_factor(&mut rng, 6, 2);
        let y = DMatrix::from_fn(10, 6, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mu = DMatrix::from_fn(10, 6, |_, _| rng.random_range(-0.5..0.5));
        let v = neg2_loglik(&y, &mu, &f).unwrap();
        let sigma = f.sigma();
        let chol = sigma.clone().cholesky().unwrap();
        let mut expect = 0.0;
        for t in 0..10 {
            let r = (y.row(t) - mu.row(t)).transpose();
            let sol = chol.solve(&r);
            expect += 6.0 * (2.0 * PI).ln() + sigma.determinant().ln() + r.dot(&sol);
        }
        assert!(rel(v, expect) < 1e-8);
        assert!(neg2_loglik(&y, &mu.columns(0, 5).into_owned(), &f).is_err());
    }

    #[test]
    fn e_step_zero_loadings() {
        let f = FactorParams::new(DMatrix::zeros(3, 2), Noise::Homoscedastic(1.0)).unwrap();
        let y = DMatrix::from_fn(4, 3, |t, m| (t + m) as f64);
        let mom = e_step(&y, &DMatrix::zeros(4, 3), &f).unwrap();
        assert_eq!(mom.zhat, DMatrix::zeros(4, 2));
        assert!((&mom.w - DMatrix::identity(2, 2)).amax() < 1e-15);
    }

    #[test]
    fn e_step_scalar_example() {
        let f = FactorParams::new(DMatrix::from_element(2, 1, 1.0), Noise::Homoscedastic(1.0))
            .unwrap();
        let y = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let mom = e_step(&y, &DMatrix::zeros(1, 2), &f).unwrap();
        assert!((mom.w[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
        assert!((mom.zhat[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn e_step_matches_gaussian_conditioning() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let f = random_factor(&mut rng, 7, 3);
        let y = DMatrix::from_fn(9, 7, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mu = DMatrix::zeros(9, 7);
        let mom = e_step(&y, &mu, &f).unwrap();
        let sigma_inv = f.sigma().try_inverse().unwrap();
        let expect = &y * sigma_inv * f.loadings();
        assert!((&mom.zhat - &expect).amax() < 1e-8 * expect.amax().max(1.0));
        let eig = SymmetricEigen::new(mom.w.clone()).eigenvalues;
        assert!(eig.iter().all(|v| *v > 0.0 && *v <= 1.0 + 1e-12));
    }

    #[test]
    fn w_shrinks_with_loadings() {
        let mut last = f64::INFINITY;
        for scale in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0] {
            let f = FactorParams::new(
                DMatrix::from_fn(4, 2, |i, j| scale * (1.0 + i as f64 - j as f64)),
                Noise::Homoscedastic(1.0),
            )
            .unwrap();
            let w = LowRankInverse::new(&f).unwrap().w().clone();
            let top = SymmetricEigen::new(w).eigenvalues.max();
            assert!(top <= last + 1e-12);
            last = top;
        }
        assert!(last < 0.1);
    }

    #[test]
    fn loadings_update_examples() {
        let mom = LatentMoments {
            zhat: DMatrix::zeros(5, 2),
            w: DMatrix::identity(2, 2),
        };
        let r = DMatrix::from_fn(5, 3, |t, m| (t * m) as f64);
        assert_eq!(m_step_loadings(&r, &mom).unwrap(), DMatrix::zeros(3, 2));

        let mom = LatentMoments {
            zhat: DMatrix::from_column_slice(2, 1, &[1.0, 1.0]),
            w: DMatrix::from_element(1, 1, 0.5),
        };
        let r = DMatrix::from_column_slice(2, 1, &[1.0, 2.0]);
        let b = m_step_loadings(&r, &mom).unwrap();
        assert!((b[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn loadings_update_matches_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let (n, m, q) = (12, 5, 2);
        let r = DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let z = DMatrix::from_fn(n, q, |_, _| rng.sample::<f64, _>(StandardNormal));
        let w = DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.3]);
        let b = m_step_loadings(&r, &LatentMoments { zhat: z.clone(), w: w.clone() }).unwrap();
        let mut cross: DMatrix<f64> = DMatrix::zeros(m, q);
        let mut gram: DMatrix<f64> = DMatrix::zeros(q, q);
        for t in 0..n {
            for i in 0..m {
                for j in 0..q {
                    cross[(i, j)] += r[(t, i)] * z[(t, j)];
                }
            }
            for a in 0..q {
                for c in 0..q {
                    gram[(a, c)] += z[(t, a)] * z[(t, c)] + w[(a, c)];
                }
            }
        }
        let expect = cross * gram.try_inverse().unwrap();
        let diff: DMatrix<f64> = b - expect;
        assert!(diff.amax() < 1e-10);
    }

    #[test]
    fn noise_update_examples() {
        let r = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 2.0, 0.0]);
        let e = LatentMoments::empty(2);
        let b = DMatrix::zeros(2, 0);
        assert_eq!(
            m_step_noise(&r, &e, &b, NoiseMode::Homoscedastic),
            Noise::Homoscedastic(6.0 / 4.0)
        );
        assert_eq!(
            m_step_noise(&DMatrix::zeros(2, 2), &e, &b, NoiseMode::Homoscedastic),
            Noise::Homoscedastic(NOISE_FLOOR)
        );
        assert_eq!(
            m_step_noise(&r, &e, &b, NoiseMode::Heteroscedastic),
            Noise::Heteroscedastic(vec![2.5, 0.5])
        );
    }

    #[test]
    fn noise_update_matches_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let (n, m, q) = (10, 4, 2);
        let r = DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let z = DMatrix::from_fn(n, q, |_, _| rng.sample::<f64, _>(StandardNormal));
        let w = DMatrix::from_row_slice(2, 2, &[0.5, 0.05, 0.05, 0.2]);
        let b = DMatrix::from_fn(m, q, |_, _| rng.random_range(-1.0..1.0));
        let mom = LatentMoments { zhat: z.clone(), w: w.clone() };

        let mut btbw = 0.0;
        for a in 0..q {
            for c in 0..q {
                let mut btb = 0.0;
                for i in 0..m {
                    btb += b[(i, a)] * b[(i, c)];
                }
                btbw += btb * w[(c, a)];
            }
        }
        let mut ee = 0.0;
        let mut het = vec![0.0; m];
        for t in 0..n {
            for i in 0..m {
                let mut fitted = 0.0;
                for j in 0..q {
                    fitted += z[(t, j)] * b[(i, j)];
                }
                let e = r[(t, i)] - fitted;
                ee += e * e;
                het[i] += r[(t, i)] * e / n as f64;
            }
        }
        let homo = (ee + n as f64 * btbw) / (n * m) as f64;
        match m_step_noise(&r, &mom, &b, NoiseMode::Homoscedastic) {
            Noise::Homoscedastic(s2) => assert!((s2 - homo).abs() < 1e-10),
            _ => unreachable!(),
        }
        match m_step_noise(&r, &mom, &b, NoiseMode::Heteroscedastic) {
            Noise::Heteroscedastic(psi) => {
                for (a, b) in psi.iter().zip(&het) {
                    assert!((a.max(NOISE_FLOOR) - b.max(NOISE_FLOOR)).abs() < 1e-10);
                }
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn expected_complete_matches_conditional_plus_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let f = random_factor(&mut rng, 5, 2);
        let y = DMatrix::from_fn(15, 5, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mu = DMatrix::from_fn(15, 5, |_, _| rng.random_range(-0.3..0.3));
        let mom = e_step(&y, &mu, &f).unwrap();
        let cond = conditional_neg2_loglik(&y, &mu, &mom.zhat, &f).unwrap();
        let b = f.loadings();
        let psi_inv = DMatrix::from_diagonal(&f.psi().map(|v| 1.0 / v));
        let trace = (b.transpose() * psi_inv * b * &mom.w).trace();
        let expected = expected_complete_neg2(&(&y - &mu), &mom, &f);
        assert!(rel(cond + 15.0 * trace, expected) < 1e-8);
    }

    #[test]
    fn segmentation_update_without_factors_is_raw_segmentation() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let y = DMatrix::from_fn(12, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mom = LatentMoments {
            zhat: DMatrix::from_fn(12, 1, |_, _| rng.sample::<f64, _>(StandardNormal)),
            w: DMatrix::identity(1, 1),
        };
        let zero = DMatrix::zeros(3, 1);
        let a = m_step_segmentation(&y, &mom, &zero, &Noise::Homoscedastic(1.0), 6, SegmentOptions::default()).unwrap();
        let raw = two_stage_segment_with(&y, &[1.0; 3], 6, SegmentOptions::default()).unwrap();
        assert_eq!(a.segmentation, raw.segmentation);
        let b = DMatrix::from_fn(3, 1, |i, _| 0.5 + i as f64);
        let s1 = m_step_segmentation(&y, &mom, &b, &Noise::Homoscedastic(0.1), 6, SegmentOptions::default()).unwrap();
        let s2 = m_step_segmentation(&y, &mom, &b, &Noise::Homoscedastic(7.0), 6, SegmentOptions::default()).unwrap();
        assert_eq!(s1.segmentation, s2.segmentation);
    }

    fn step_panel() -> SeriesMatrix {
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|t| {
                vec![
                    if t < 4 { 0.0 } else { 2.0 },
                    if t < 8 { 1.0 } else { -1.0 },
                    0.5,
                ]
            })
            .collect();
        SeriesMatrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn em_q0_recovers_noiseless_steps() {
        let y = step_panel();
        let fit = em_fit(&y, 5, 0, &EmOptions::default()).unwrap();
        assert_eq!(fit.segmentation.all_breakpoints(), &[vec![4], vec![8], vec![]]);
        assert!(fit.converged);
        assert!(fit.iterations >= 1 && fit.iterations <= 2);
        assert_eq!(fit.factor.noise(), &Noise::Homoscedastic(NOISE_FLOOR));
        // any other 5-segment allocation fits worse
        for other in [vec![vec![3], vec![8], vec![]], vec![vec![4], vec![], vec![6]]] {
            let seg = Segmentation::new(12, other).unwrap();
            let alt = initialize(&y, seg, 0, NoiseMode::Homoscedastic).unwrap();
            assert!(alt.loglik < fit.loglik);
        }
    }

    #[test]
    fn em_q0_single_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let v = DMatrix::from_fn(20, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = SeriesMatrix::new(v.clone()).unwrap();
        let fit = em_fit(&y, 3, 0, &EmOptions::default()).unwrap();
        let mut ss = 0.0;
        for m in 0..3 {
            let mean = v.column(m).mean();
            assert!((fit.means.series(m)[0] - mean).abs() < 1e-12);
            ss += v.column(m).iter().map(|x| (x - mean).powi(2)).sum::<f64>();
        }
        match fit.factor.noise() {
            Noise::Homoscedastic(s2) => assert!((s2 - ss / 60.0).abs() < 1e-12),
            _ => unreachable!(),
        }
    }

    #[test]
    fn em_rejects_infeasible() {
        let y = step_panel();
        let o = EmOptions::default();
        assert!(em_fit(&y, 2, 0, &o).is_err());
        assert!(em_fit(&y, 37, 0, &o).is_err());
        assert!(em_fit(&y, 3, 3, &o).is_err());
        assert!(em_fit(&y, 3, 0, &EmOptions { max_iter: 0, ..o }).is_err());
    }

    fn correlated_panel(seed: u64, n: usize, m: usize) -> SeriesMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let load = DMatrix::from_fn(m, 1, |_, _| rng.random_range(0.5..1.0));
        let v = DMatrix::from_fn(n, m, |t, j| {
            let step = if t >= n / 2 && j % 2 == 0 { 1.5 } else { 0.0 };
            step
        });
        let z = DMatrix::from_fn(n, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let e = DMatrix::from_fn(n, m, |_, _| 0.3 * rng.sample::<f64, _>(StandardNormal));
        SeriesMatrix::new(v + z * load.transpose() + e).unwrap()
    }

    #[test]
    fn em_loglik_monotone() {
        for (seed, q, mode) in [
            (1, 1, NoiseMode::Homoscedastic),
            (2, 2, NoiseMode::Heteroscedastic),
            (3, 0, NoiseMode::Heteroscedastic),
        ] {
            let y = correlated_panel(seed, 40, 5);
            let opts = EmOptions { noise_mode: mode, rel_tol: 1e-10, ..Default::default() };
            let fit = em_fit(&y, 9, q, &opts).unwrap();
            for w in fit.loglik_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-8, "decrease {} -> {}", w[0], w[1]);
            }
            let check = full_loglik(&y, &fit).unwrap();
            assert!((check - fit.loglik).abs() < 1e-9 * fit.loglik.abs());
        }
    }

    #[test]
    fn em_rotation_invariance() {
        let y = correlated_panel(5, 30, 4);
        let opts = EmOptions { max_iter: 5, rel_tol: 1e-14, ..Default::default() };
        let base = em_fit(&y, 6, 2, &EmOptions { max_iter: 3, ..opts }).unwrap();
        let theta: f64 = 0.7;
        let rot = DMatrix::from_row_slice(2, 2, &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()]);
        let mut rotated = base.clone();
        rotated.factor =
            FactorParams::new(base.factor.loadings() * &rot, base.factor.noise().clone()).unwrap();
        assert!((rotated.sigma() - base.sigma()).amax() < 1e-8);
        assert!((full_loglik(&y, &rotated).unwrap() - full_loglik(&y, &base).unwrap()).abs() < 1e-8);
        let mean = base.mean_matrix();
        let m1 = e_step(y.values(), &mean, &base.factor).unwrap();
        let m2 = e_step(y.values(), &mean, &rotated.factor).unwrap();
        let f1 = &m1.zhat * base.factor.loadings().transpose();
        let f2 = &m2.zhat * rotated.factor.loadings().transpose();
        assert!((f1 - f2).amax() < 1e-8);
        let a = em_iterate(&y, 6, base, &opts).unwrap();
        let b = em_iterate(&y, 6, rotated, &opts).unwrap();
        assert_eq!(a.segmentation, b.segmentation);
        assert!((a.sigma() - b.sigma()).amax() < 1e-8);
    }
}
