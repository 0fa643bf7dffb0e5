use std::f64::consts::PI;

use super::linalg::{chol_logdet, chol_quad, chol_solve, cholesky};
use super::{LmmError, Scalar, StatsTable};

/// Everything the REML criterion yields at one `θ`.
#[derive(Debug, Clone)]
pub struct ThetaEval<T> {
    pub theta: T,
    pub deviance: T,
    /// GLS estimate of β.
    pub beta: Vec<T>,
    /// Residual quadratic form `(y - Xβ)' V̄⁻¹ (y - Xβ)`.
    pub rss: T,
    /// Cholesky factor of `X' V̄⁻¹ X`.
    pub(crate) xtvx_chol: Vec<T>,
}

/// Weighted normal equations at `θ`, from cluster sums via
/// `V̄_j⁻¹ = I - θ/(1+θn_j) 11ᵀ`.
fn normal_equations<T: Scalar, K: Ord + Clone>(theta: T, stats: &StatsTable<T, K>) -> (Vec<T>, Vec<T>, T, T) {
    let p = stats.p;
    let mut a = vec![T::zero(); p * p];
    let mut b = vec![T::zero(); p];
    let mut c = T::zero();
    let mut log_det_v = T::zero();
    for s in stats.clusters.values() {
        let nj = T::from_u64(s.n).unwrap();
        let denom = T::one() + theta * nj;
        let w = theta / denom;
        log_det_v = log_det_v + denom.ln();
        for i in 0..p {
            for j in 0..p {
                a[i * p + j] = a[i * p + j] + s.sxx[i * p + j] - w * s.sx[i] * s.sx[j];
            }
            b[i] = b[i] + s.sxy[i] - w * s.sx[i] * s.sy;
        }
        c = c + s.syy - w * s.sy * s.sy;
    }
    (a, b, c, log_det_v)
}

pub(crate) fn evaluate<T: Scalar, K: Ord + Clone>(theta: T, stats: &StatsTable<T, K>) -> Result<ThetaEval<T>, LmmError> {
    debug_assert!(stats.is_finalized(), "stats must be finalized");
    let p = stats.p;
    let (a, b, c, log_det_v) = normal_equations(theta, stats);
    let l = cholesky(&a, p).ok_or(LmmError::RankDeficient)?;
    let beta = chol_solve(&l, p, &b);
    let fitted: T = beta.iter().zip(&b).map(|(&x, &y)| x * y).sum();
    // Clamp: exact fits make the difference round to ≤ 0.
    let rss = (c - fitted).max(T::min_positive_value());
    let n = T::from_u64(stats.n_obs()).unwrap();
    let dof = n - T::from_usize(p).unwrap();
    let deviance = log_det_v
        + dof * rss.ln()
        + chol_logdet(&l, p)
        + dof * (T::one() + (T::lit(2.0 * PI) / dof).ln());
    Ok(ThetaEval { theta, deviance, beta, rss, xtvx_chol: l })
}

/// `-2 ×` the restricted log-likelihood, profiled over β and σ²_e:
///
/// `Σ_j log(1+θn_j) + (n-p) log r(θ) + log det(X'V̄⁻¹X) + (n-p)(1 + log(2π/(n-p)))`.
pub fn profiled_reml_deviance<T: Scalar, K: Ord + Clone>(theta: T, stats: &mut StatsTable<T, K>) -> Result<T, LmmError> {
    if !(theta >= T::zero()) || !theta.is_finite() {
        return Err(LmmError::BadTheta(theta.to_f64().unwrap_or(f64::NAN)));
    }
    stats.check_design()?;
    Ok(evaluate(theta, stats)?.deviance)
}

/// Analytic `d deviance / dθ`:
/// `Σ n_j/(1+θn_j) - (n-p) Σ e_j²/(1+θn_j)² / r - Σ s_j' A⁻¹ s_j/(1+θn_j)²`
/// with `e_j = Σy_j - Σx_j'β̂` and `A = X'V̄⁻¹X`.
pub(crate) fn gradient_at<T: Scalar, K: Ord + Clone>(eval: &ThetaEval<T>, stats: &StatsTable<T, K>) -> T {
    let p = stats.p;
    let theta = eval.theta;
    let n = T::from_u64(stats.n_obs()).unwrap();
    let dof = n - T::from_usize(p).unwrap();
    let mut g_logdet_v = T::zero();
    let mut dr = T::zero();
    let mut dlogdet_a = T::zero();
    for s in stats.clusters.values() {
        let nj = T::from_u64(s.n).unwrap();
        let denom = T::one() + theta * nj;
        let inv2 = T::one() / (denom * denom);
        g_logdet_v = g_logdet_v + nj / denom;
        let fitted: T = s.sx.iter().zip(&eval.beta).map(|(&x, &b)| x * b).sum();
        let e = s.sy - fitted;
        dr = dr + e * e * inv2;
        dlogdet_a = dlogdet_a + chol_quad(&eval.xtvx_chol, p, &s.sx) * inv2;
    }
    g_logdet_v - dof * dr / eval.rss - dlogdet_a
}

/// Derivative of the profiled deviance with respect to `θ`.
pub fn reml_gradient<T: Scalar, K: Ord + Clone>(theta: T, stats: &mut StatsTable<T, K>) -> Result<T, LmmError> {
    stats.check_design()?;
    let eval = evaluate(theta, stats)?;
    Ok(gradient_at(&eval, stats))
}
