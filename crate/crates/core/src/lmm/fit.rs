use serde::{Deserialize, Serialize};

use super::deviance::{evaluate, gradient_at, ThetaEval};
use super::linalg::chol_inverse_diag;
use super::optimize::brent_minimize;
use super::spec::{accumulate_stats, LmmSpec};
use super::{normal, LmmError, Scalar, StatsTable};
use crate::simengine::SimilarityObservation;

/// Upper end of the variance-ratio search.
pub const THETA_MAX: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub theta_max: f64,
    /// Coarse scan points on `log(1+θ)` used to place the bracket.
    pub grid_points: usize,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { theta_max: THETA_MAX, grid_points: 48, max_iter: 200 }
    }
}

/// A fitted random-intercept model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmmFit<T> {
    pub terms: Vec<String>,
    pub beta: Vec<T>,
    pub se: Vec<T>,
    pub z: Vec<T>,
    pub p_values: Vec<f64>,
    /// Between-cluster (random intercept) variance.
    pub sigma2_b: T,
    /// Residual variance.
    pub sigma2_e: T,
    /// `sigma2_b / sigma2_e`.
    pub theta: T,
    /// REML log-likelihood, `-deviance / 2`.
    pub reml_loglik: T,
    pub deviance: T,
    pub n_obs: u64,
    pub n_clusters: usize,
    pub converged: bool,
    pub iterations: usize,
}

impl<T: Scalar> LmmFit<T> {
    pub fn coefficient(&self, term: &str) -> Option<(T, T, f64)> {
        let i = self.terms.iter().position(|t| t == term)?;
        Some((self.beta[i], self.se[i], self.p_values[i]))
    }
}

/// Fit by profiled REML from accumulated cluster statistics.
///
/// The search runs over `φ = log(1+θ)` on `[0, log(1+θ_max)]`: a coarse
/// scan brackets the minimum, Brent's method refines it, and a safeguarded
/// root-find on the analytic gradient polishes it to working precision.
/// The boundary `θ = 0` is evaluated explicitly and kept if no worse.
pub fn fit_stats<T: Scalar, K: Ord + Clone>(stats: &mut StatsTable<T, K>, opts: &FitOptions) -> Result<LmmFit<T>, LmmError> {
    stats.check_design()?;
    let stats = &*stats;
    let phi_max = T::lit(opts.theta_max).ln_1p();
    let theta_of = |phi: T| phi.exp_m1().max(T::zero());
    let eval = |phi: T| evaluate(theta_of(phi), stats);
    let dev = |phi: T| eval(phi).map(|e| e.deviance).unwrap_or(T::infinity());

    let g = opts.grid_points.max(3);
    let grid: Vec<T> = (0..g).map(|i| phi_max * T::from_usize(i).unwrap() / T::from_usize(g - 1).unwrap()).collect();
    let values: Vec<T> = grid.iter().map(|&p| dev(p)).collect();
    let k = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
        .map(|(i, _)| i)
        .unwrap();
    let lo = grid[k.saturating_sub(1)];
    let hi = grid[(k + 1).min(g - 1)];

    let eps = T::epsilon();
    let min = brent_minimize(dev, lo, hi, eps.sqrt(), T::lit(1e-10).max(eps), opts.max_iter);
    let mut best_phi = min.x;
    let mut best_dev = min.fx;
    let mut iterations = g + min.iterations;

    // Polish on the gradient, d/dφ = (1+θ) d/dθ.
    let grad = |phi: T| -> Option<T> {
        let e = eval(phi).ok()?;
        Some(gradient_at(&e, stats) * (T::one() + e.theta))
    };
    if let (Some(ga), Some(gb)) = (grad(lo), grad(hi)) {
        if ga < T::zero() && gb > T::zero() {
            let (root, steps) = bracketed_root(&grad, lo, hi, ga, gb);
            iterations += steps;
            let d = dev(root);
            // Near a flat optimum the deviance is only resolved to rounding
            // noise; the gradient root is the sharper estimate.
            if d <= best_dev + (T::one() + best_dev.abs()) * eps.sqrt() * T::lit(1e-2) {
                best_phi = root;
                best_dev = d;
            }
        }
    }

    let boundary = dev(T::zero());
    if boundary <= best_dev {
        best_phi = T::zero();
    }
    let at_upper = best_phi >= phi_max * (T::one() - T::lit(1e-9));
    let theta = theta_of(best_phi);
    let fit = evaluate(theta, stats)?;
    Ok(assemble(stats, fit, min.converged && !at_upper, iterations))
}

/// Illinois false position on a sign-changing bracket.
fn bracketed_root<T: Scalar>(f: &impl Fn(T) -> Option<T>, mut a: T, mut b: T, mut fa: T, mut fb: T) -> (T, usize) {
    let mut side = 0i8;
    let mut c = a;
    for step in 0..200 {
        c = (a * fb - b * fa) / (fb - fa);
        if !(c > a && c < b) {
            c = (a + b) * T::lit(0.5);
        }
        let Some(fc) = f(c) else { return (c, step) };
        if fc == T::zero() || (b - a) <= T::epsilon() * T::lit(4.0) * c.abs().max(T::one()) {
            return (c, step + 1);
        }
        if (fc > T::zero()) == (fb > T::zero()) {
            b = c;
            fb = fc;
            if side == -1 {
                fa = fa * T::lit(0.5);
            }
            side = -1;
        } else {
            a = c;
            fa = fc;
            if side == 1 {
                fb = fb * T::lit(0.5);
            }
            side = 1;
        }
    }
    (c, 200)
}

fn assemble<T: Scalar, K: Ord + Clone>(stats: &StatsTable<T, K>, e: ThetaEval<T>, converged: bool, iterations: usize) -> LmmFit<T> {
    let p = stats.p;
    let n = stats.n_obs();
    let dof = T::from_u64(n).unwrap() - T::from_usize(p).unwrap();
    let sigma2_e = e.rss / dof;
    let sigma2_b = e.theta * sigma2_e;
    let se: Vec<T> = chol_inverse_diag(&e.xtvx_chol, p).into_iter().map(|d| (sigma2_e * d).sqrt()).collect();
    let z: Vec<T> = e.beta.iter().zip(&se).map(|(&b, &s)| b / s).collect();
    let p_values = e
        .beta
        .iter()
        .zip(&se)
        .map(|(b, s)| normal::wald_p(b.to_f64().unwrap(), s.to_f64().unwrap()))
        .collect();
    LmmFit {
        terms: stats.terms.clone(),
        beta: e.beta,
        se,
        z,
        p_values,
        sigma2_b,
        sigma2_e,
        theta: e.theta,
        reml_loglik: -e.deviance / T::lit(2.0),
        deviance: e.deviance,
        n_obs: n,
        n_clusters: stats.n_clusters(),
        converged,
        iterations,
    }
}

/// Accumulate `observations` under `spec` and fit.
pub fn fit_reml<'a, I>(observations: I, spec: &LmmSpec) -> Result<LmmFit<f64>, LmmError>
where
    I: IntoIterator<Item = &'a SimilarityObservation>,
{
    let mut stats = accumulate_stats(observations, spec)?;
    fit_stats(&mut stats, &FitOptions::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(clusters: &[&[f64]]) -> StatsTable<f64, usize> {
        let mut t = StatsTable::with_columns(1);
        for (k, ys) in clusters.iter().enumerate() {
            for &y in *ys {
                t.push(&k, &[1.0], y).unwrap();
            }
        }
        t
    }

    #[test]
    fn balanced_one_way_closed_form() {
        let fit = fit_stats(&mut table(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]), &FitOptions::default()).unwrap();
        assert!((fit.beta[0] - 3.5).abs() < 1e-10);
        assert!((fit.sigma2_e - 0.5).abs() < 1e-8);
        assert!((fit.sigma2_b - 3.75).abs() < 1e-8);
        assert!(fit.converged);
    }

    #[test]
    fn equal_cluster_means_hit_the_boundary() {
        let fit = fit_stats(&mut table(&[&[1.0, 3.0], &[1.0, 3.0], &[1.0, 3.0]]), &FitOptions::default()).unwrap();
        assert_eq!(fit.sigma2_b, 0.0);
        assert_eq!(fit.theta, 0.0);
        assert!((fit.beta[0] - 2.0).abs() < 1e-12);
        // θ = 0 reduces to OLS: σ²_e = Σ(y-2)²/(n-1) = 6/5
        assert!((fit.sigma2_e - 1.2).abs() < 1e-12);
    }

    #[test]
    fn single_precision_fit() {
        let mut t: StatsTable<f32, usize> = StatsTable::with_columns(1);
        for (k, ys) in [[1.0f32, 2.0], [3.0, 4.0], [5.0, 6.0]].iter().enumerate() {
            for &y in ys {
                t.push(&k, &[1.0], y).unwrap();
            }
        }
        let fit = fit_stats(&mut t, &FitOptions::default()).unwrap();
        assert!((fit.sigma2_b - 3.75).abs() < 1e-3);
        assert!((fit.sigma2_e - 0.5).abs() < 1e-4);
    }

    #[test]
    fn preconditions() {
        assert!(matches!(
            fit_stats(&mut table(&[&[1.0, 2.0, 3.0]]), &FitOptions::default()),
            Err(LmmError::TooFewClusters(1))
        ));
        assert!(matches!(
            fit_stats(&mut table(&[&[1.0]]), &FitOptions::default()),
            Err(LmmError::TooFewObservations { .. })
        ));
    }
}
