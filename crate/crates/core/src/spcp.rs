//! Stable principal component pursuit.
//!
//! Splits a road's period-stacked volumes `T` into a low-rank expected pattern
//! `L`, sparse anomalies `A` and dense noise `E = T - L - A` by minimizing
//!
//! ```text
//! ||L||_* + lambda * ||A||_1 + (mu / 2) * ||T - L - A||_F^2
//! ```
//!
//! For fixed `L` the optimal `A` is `soft_threshold(T - L, lambda / mu)`, and
//! eliminating `A` leaves `||L||_*` plus a Huber penalty on `T - L` whose
//! gradient is `mu`-Lipschitz. The solver runs accelerated proximal gradient on
//! that partially smooth problem with step `1 / mu`. A single step is exactly
//! one round of alternating minimization:
//!
//! ```text
//! A <- soft_threshold(T - L, lambda / mu)
//! L <- singular_value_threshold(T - A, 1 / mu)
//! ```
//!
//! Momentum is reset whenever a step would raise the objective, so the
//! recorded objective never increases.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::stats::{mad, median, median_in_place};
use crate::timeseries::TrafficMatrix;

pub const DEFAULT_MAX_ITERS: usize = 500;
pub const DEFAULT_REL_TOL: f64 = 1e-6;
pub const DEFAULT_RANK_CAP: usize = 10;

/// `mu = MU_NOISE_FACTOR / sigma_hat` when `mu` is chosen automatically.
pub const MU_NOISE_FACTOR: f64 = 0.15;

/// Consistency constant turning a MAD into a Gaussian standard deviation.
const MAD_TO_SIGMA: f64 = 1.4826;

/// The iterate must also settle to within this fraction of `rel_tol` before the
/// solver reports convergence; objective changes alone plateau early.
const STEP_TOL_FACTOR: f64 = 0.1;

/// Singular values below this fraction of the largest are not counted in the rank.
pub const RANK_REL_CUTOFF: f64 = 1e-8;

/// Number of robust refits used to seed an appended column.
const SEED_REFITS: usize = 10;

/// Residuals beyond this many robust deviations are treated as anomalous when seeding.
const SEED_OUTLIER_SIGMAS: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpcpParams {
    /// Weight on `||A||_1`.
    pub lambda: f64,
    /// Weight on the squared Frobenius norm of the noise.
    pub mu: f64,
    pub max_iters: usize,
    /// Relative tolerance on objective change between iterations.
    pub rel_tol: f64,
    /// Most singular vectors kept in a [`LowRankBasis`].
    pub rank_cap: usize,
}

impl SpcpParams {
    pub fn new(lambda: f64, mu: f64) -> Self {
        Self {
            lambda,
            mu,
            max_iters: DEFAULT_MAX_ITERS,
            rel_tol: DEFAULT_REL_TOL,
            rank_cap: DEFAULT_RANK_CAP,
        }
    }

    /// Default `lambda` and data-driven `mu` for this matrix.
    pub fn auto(t: &DMatrix<f64>) -> Self {
        let (m, n) = t.shape();
        Self::new(default_lambda(m, n), default_mu(t))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.lambda) {
            return Err(Error::InvalidInput(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !positive(self.mu) {
            return Err(Error::InvalidInput(format!("mu must be positive, got {}", self.mu)));
        }
        if !positive(self.rel_tol) {
            return Err(Error::InvalidInput(format!("rel_tol must be positive, got {}", self.rel_tol)));
        }
        if self.max_iters == 0 || self.rank_cap == 0 {
            return Err(Error::InvalidInput("max_iters and rank_cap must be at least 1".into()));
        }
        Ok(())
    }

    fn sparse_threshold(&self) -> f64 {
        self.lambda / self.mu
    }
}

/// `1 / sqrt(max(m, n))`.
pub fn default_lambda(m: usize, n: usize) -> f64 {
    1.0 / (m.max(n) as f64).sqrt()
}

/// Robust estimate of the entrywise noise level of `t`.
///
/// Two upper-biased estimates are combined by taking the smaller: 1.4826 × MAD
/// of the residuals after subtracting each row's median (inflated by
/// week-to-week drift of the expected pattern), and the median singular value
/// over `sqrt(max(m, n))` (inflated by strong anomalies). A floor of
/// `1e-9 × rms(t)` keeps `mu` finite on noiseless data. An all-zero matrix
/// reports 1.
pub fn noise_scale(t: &DMatrix<f64>) -> f64 {
    let (m, n) = t.shape();
    let rms = (t.norm_squared() / (m * n).max(1) as f64).sqrt();
    if rms == 0.0 || !rms.is_finite() {
        return 1.0;
    }
    let mut residuals = Vec::with_capacity(m * n);
    for row in t.row_iter() {
        let values: Vec<f64> = row.iter().copied().collect();
        let center = median(&values).unwrap_or(0.0);
        residuals.extend(values.iter().map(|v| v - center));
    }
    let row_sigma = MAD_TO_SIGMA * mad(&residuals).unwrap_or(0.0);

    let sigma = match linalg::singular_values(t) {
        Ok(mut singular) => {
            let spectral_sigma = median_in_place(&mut singular).unwrap_or(0.0) / (m.max(n) as f64).sqrt();
            row_sigma.min(spectral_sigma)
        }
        Err(_) => row_sigma,
    };
    sigma.max(1e-9 * rms)
}

pub fn default_mu(t: &DMatrix<f64>) -> f64 {
    MU_NOISE_FACTOR / noise_scale(t)
}

/// `sign(x) * max(|x| - tau, 0)`.
#[inline]
pub fn soft_threshold(x: f64, tau: f64) -> f64 {
    if x > tau {
        x - tau
    } else if x < -tau {
        x + tau
    } else {
        0.0
    }
}

pub fn soft_threshold_matrix(m: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    m.map(|x| soft_threshold(x, tau))
}

/// Proximal map of `tau * ||.||_*`: soft-thresholds the singular values.
/// Returns the thresholded matrix and the number of surviving singular values.
pub fn singular_value_threshold(m: &DMatrix<f64>, tau: f64) -> Result<(DMatrix<f64>, usize)> {
    let out = svt(m, tau)?;
    Ok((out.matrix, out.rank))
}

struct Thresholded {
    matrix: DMatrix<f64>,
    /// Singular values after shrinkage, largest first, zeros dropped.
    shrunk: Vec<f64>,
    rank: usize,
}

impl Thresholded {
    fn nuclear_norm(&self) -> f64 {
        self.shrunk.iter().sum()
    }
}

fn svt(m: &DMatrix<f64>, tau: f64) -> Result<Thresholded> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Ok(Thresholded {
            matrix: m.clone(),
            shrunk: Vec::new(),
            rank: 0,
        });
    }
    let svd = linalg::svd(m)?;
    let mut matrix = DMatrix::zeros(rows, cols);
    let mut shrunk = Vec::new();
    for (k, &s) in svd.singular_values.iter().enumerate() {
        let s = s - tau;
        if s > 0.0 {
            matrix.ger(s, &svd.u.column(k), &svd.v.column(k), 1.0);
            shrunk.push(s);
        }
    }
    shrunk.sort_by(|a, b| b.total_cmp(a));
    let rank = count_rank(&shrunk);
    Ok(Thresholded { matrix, shrunk, rank })
}

/// Number of values above `RANK_REL_CUTOFF` times the largest.
pub fn count_rank(singular_values: &[f64]) -> usize {
    let largest = singular_values.iter().copied().fold(0.0, f64::max);
    if largest <= 0.0 {
        return 0;
    }
    singular_values
        .iter()
        .filter(|&&s| s > RANK_REL_CUTOFF * largest)
        .count()
}

/// Result of one solve. `noise` is computed as `T - L - A`, so the three parts
/// add back to the input.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub low_rank: DMatrix<f64>,
    pub sparse: DMatrix<f64>,
    pub noise: DMatrix<f64>,
    pub rank: usize,
    pub iterations: usize,
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub params: SpcpParams,
}

impl Decomposition {
    pub fn shape(&self) -> (usize, usize) {
        self.low_rank.shape()
    }

    /// Leading left singular vectors of `L`, at most `rank_cap` of them.
    pub fn basis(&self) -> Result<LowRankBasis> {
        LowRankBasis::of(&self.low_rank, self.rank.min(self.params.rank_cap))
    }

    pub fn final_objective(&self) -> Option<f64> {
        self.objective_trace.last().copied()
    }
}

/// Column space of a low-rank fit.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankBasis {
    /// `m × r`, orthonormal columns.
    pub vectors: DMatrix<f64>,
    pub singular_values: Vec<f64>,
}

impl LowRankBasis {
    fn of(l: &DMatrix<f64>, rank: usize) -> Result<Self> {
        let m = l.nrows();
        if rank == 0 || l.ncols() == 0 {
            return Ok(Self {
                vectors: DMatrix::zeros(m, 0),
                singular_values: Vec::new(),
            });
        }
        let svd = linalg::svd(l)?;
        let r = rank.min(svd.singular_values.len());
        Ok(Self {
            vectors: svd.u.columns(0, r).into_owned(),
            singular_values: svd.singular_values[..r].to_vec(),
        })
    }

    pub fn rank(&self) -> usize {
        self.vectors.ncols()
    }
}

fn objective(t: &DMatrix<f64>, l: &DMatrix<f64>, nuclear: f64, params: &SpcpParams) -> f64 {
    let thresh = params.sparse_threshold();
    let mut l1 = 0.0;
    let mut sq = 0.0;
    for (tv, lv) in t.iter().zip(l.iter()) {
        let r = tv - lv;
        let a = soft_threshold(r, thresh);
        l1 += a.abs();
        sq += (r - a) * (r - a);
    }
    nuclear + params.lambda * l1 + 0.5 * params.mu * sq
}

/// One proximal-gradient step from `y`.
fn prox_step(t: &DMatrix<f64>, y: &DMatrix<f64>, params: &SpcpParams) -> Result<Thresholded> {
    let a = soft_threshold_matrix(&(t - y), params.sparse_threshold());
    svt(&(t - a), 1.0 / params.mu)
}

fn check_finite(t: &DMatrix<f64>) -> Result<()> {
    if t.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput("matrix contains non-finite values".into()))
    }
}

/// Decomposes a fully imputed traffic matrix.
pub fn solve_spcp(t: &TrafficMatrix, params: &SpcpParams) -> Result<Decomposition> {
    solve_dense(&t.to_dense()?, params)
}

/// Decomposes a dense matrix, starting from `L = svt(T, 1 / mu)`.
pub fn solve_dense(t: &DMatrix<f64>, params: &SpcpParams) -> Result<Decomposition> {
    params.validate()?;
    check_finite(t)?;
    let start = svt(t, 1.0 / params.mu)?;
    iterate(t, start, params)
}

/// Re-solves from a previous decomposition.
///
/// `t_new` may equal the previous input's shape or carry one extra trailing
/// column. An extra column is seeded by robustly fitting the new observations
/// in the previous fit's column space.
pub fn warm_start_solve(t_new: &TrafficMatrix, prev: &Decomposition, params: &SpcpParams) -> Result<Decomposition> {
    warm_start_dense(&t_new.to_dense()?, prev, params)
}

pub fn warm_start_dense(t: &DMatrix<f64>, prev: &Decomposition, params: &SpcpParams) -> Result<Decomposition> {
    let (m, n) = t.shape();
    let (pm, pn) = prev.shape();
    if m != pm || !(n == pn || n == pn + 1) {
        return Err(Error::DimensionMismatch(format!(
            "cannot warm start a {m}×{n} problem from a {pm}×{pn} decomposition"
        )));
    }
    warm_start_extend(t, prev, params)
}

/// Warm start that accepts any number of appended columns, each seeded
/// independently against the previous basis.
pub(crate) fn warm_start_extend(t: &DMatrix<f64>, prev: &Decomposition, params: &SpcpParams) -> Result<Decomposition> {
    params.validate()?;
    check_finite(t)?;
    let (m, n) = t.shape();
    let (pm, pn) = prev.shape();
    if m != pm || n < pn {
        return Err(Error::DimensionMismatch(format!(
            "cannot warm start a {m}×{n} problem from a {pm}×{pn} decomposition"
        )));
    }
    let mut init = prev.low_rank.clone();
    if n > pn {
        let basis = prev.basis()?;
        init = init.resize_horizontally(n, 0.0);
        for j in pn..n {
            let column: Vec<f64> = t.column(j).iter().copied().collect();
            init.set_column(j, &robust_column_fit(&basis, &column, params.sparse_threshold()));
        }
    }
    let mut singular = linalg::singular_values(&init)?;
    singular.retain(|&s| s > 0.0);
    let rank = count_rank(&singular);
    iterate(
        t,
        Thresholded {
            matrix: init,
            shrunk: singular,
            rank,
        },
        params,
    )
}

/// Fits `column ≈ U c + a` with `a` sparse by alternating least squares on `U`
/// and soft-thresholding of the residual. The threshold is the larger of
/// `floor` and a robust multiple of the residual spread, so that anomalous
/// hours do not drag the fit. Returns `U c`.
fn robust_column_fit(basis: &LowRankBasis, column: &[f64], floor: f64) -> DVector<f64> {
    let u = &basis.vectors;
    let obs = DVector::from_column_slice(column);
    if u.ncols() == 0 {
        return DVector::zeros(obs.len());
    }
    let mut sparse = DVector::zeros(obs.len());
    let mut fit = DVector::zeros(obs.len());
    for _ in 0..SEED_REFITS {
        let coef = u.tr_mul(&(&obs - &sparse));
        fit = u * coef;
        let residual = &obs - &fit;
        let spread = MAD_TO_SIGMA * mad(residual.as_slice()).unwrap_or(0.0);
        let threshold = floor.max(SEED_OUTLIER_SIGMAS * spread);
        sparse = residual.map(|r| soft_threshold(r, threshold));
    }
    fit
}

fn iterate(t: &DMatrix<f64>, start: Thresholded, params: &SpcpParams) -> Result<Decomposition> {
    let step_tol = params.rel_tol * STEP_TOL_FACTOR;
    let mut x = start;
    let mut fx = objective(t, &x.matrix, x.nuclear_norm(), params);
    let mut y = x.matrix.clone();
    let mut momentum = 1.0_f64;
    let mut trace = Vec::new();
    let mut converged = false;

    for _ in 0..params.max_iters {
        let mut z = prox_step(t, &y, params)?;
        let mut fz = objective(t, &z.matrix, z.nuclear_norm(), params);
        let mut stalled = false;
        if fz > fx {
            // Momentum overshot; fall back to a plain step from the current iterate.
            momentum = 1.0;
            z = prox_step(t, &x.matrix, params)?;
            fz = objective(t, &z.matrix, z.nuclear_norm(), params);
            if fz > fx {
                // Only rounding can make a plain step ascend.
                stalled = true;
                z = Thresholded {
                    matrix: x.matrix.clone(),
                    shrunk: x.shrunk.clone(),
                    rank: x.rank,
                };
                fz = fx;
            }
        }
        let next_momentum = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        let diff = &z.matrix - &x.matrix;
        let rel_step = diff.norm() / z.matrix.norm().max(f64::MIN_POSITIVE);
        let rel_obj = (fx - fz) / fx.abs().max(f64::MIN_POSITIVE);
        y = &z.matrix + diff * ((momentum - 1.0) / next_momentum);
        momentum = next_momentum;
        x = z;
        fx = fz;
        trace.push(fx);
        if stalled || (rel_obj <= params.rel_tol && rel_step <= step_tol) {
            converged = true;
            break;
        }
    }

    let low_rank = x.matrix;
    let sparse = soft_threshold_matrix(&(t - &low_rank), params.sparse_threshold());
    let noise = t - &low_rank - &sparse;
    Ok(Decomposition {
        low_rank,
        sparse,
        noise,
        rank: x.rank,
        iterations: trace.len(),
        objective_trace: trace,
        converged,
        params: *params,
    })
}

/// Provisional anomalies for the first hours of a new period, scored against
/// an existing fit without re-solving.
///
/// The observed prefix is least-squares projected onto the basis restricted to
/// the observed rows; the residual is soft-thresholded at `lambda / mu`.
pub fn score_new_hours(basis: &LowRankBasis, observed: &[f64], params: &SpcpParams) -> Result<Vec<f64>> {
    let k = observed.len();
    let m = basis.vectors.nrows();
    if k > m {
        return Err(Error::DimensionMismatch(format!(
            "{k} observed hours exceed the {m}-hour period"
        )));
    }
    let r = basis.rank();
    if k < r {
        return Err(Error::UnderdeterminedProjection { observed: k, rank: r });
    }
    if observed.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("observed volumes must be finite".into()));
    }
    let obs = DVector::from_column_slice(observed);
    let residual = if r == 0 {
        obs
    } else {
        let u_obs = basis.vectors.rows(0, k).into_owned();
        // Least squares through the pseudo-inverse of the observed rows.
        let svd = linalg::svd(&u_obs)?;
        let cutoff = 1e-12 * svd.singular_values.first().copied().unwrap_or(0.0);
        let mut proj = svd.u.tr_mul(&obs);
        for (k, &sv) in svd.singular_values.iter().enumerate() {
            proj[k] = if sv > cutoff { proj[k] / sv } else { 0.0 };
        }
        let coef = &svd.v * proj;
        obs - u_obs * coef
    };
    let thresh = params.sparse_threshold();
    Ok(residual.iter().map(|&x| soft_threshold(x, thresh)).collect())
}
