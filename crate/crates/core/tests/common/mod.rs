#![allow(dead_code)]

use hbaudit_core::lmm::StatsTable;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Rows of a random-intercept dataset: (cluster, x, y).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub p: usize,
    pub rows: Vec<(usize, Vec<f64>, f64)>,
}

impl Dataset {
    pub fn n_clusters(&self) -> usize {
        self.rows.iter().map(|r| r.0).max().map_or(0, |m| m + 1)
    }

    pub fn table(&self) -> StatsTable<f64, usize> {
        let mut t = StatsTable::with_columns(self.p);
        for (k, x, y) in &self.rows {
            t.push(k, x, *y).unwrap();
        }
        t
    }
}

/// Unbalanced data: 2–12 clusters, at most 200 rows, 1–4 fixed effects.
pub fn random_dataset(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(2..=12usize);
    let p = rng.random_range(1..=4usize);
    let n = rng.random_range((k + p + 2).max(2 * k)..=200usize);
    let sigma_b = [0.0, 0.05, 0.5, 1.0, 3.0][rng.random_range(0..5)];
    let sigma_e = rng.random_range(0.2..2.0);
    let effects: Vec<f64> = (0..k).map(|_| sigma_b * rng.sample::<f64, _>(StandardNormal)).collect();
    let cluster_x: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
    let beta: Vec<f64> = (0..p).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        // every cluster gets at least one row
        let c = if i < k { i } else { rng.random_range(0..k) };
        let mut x = vec![1.0];
        for j in 1..p {
            x.push(match j {
                1 => cluster_x[c] + 0.3 * rng.sample::<f64, _>(StandardNormal),
                2 => f64::from(rng.random_bool(0.5) as u8),
                _ => rng.sample(StandardNormal),
            });
        }
        let y = x.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>() + effects[c] + sigma_e * rng.sample::<f64, _>(StandardNormal);
        rows.push((c, x, y));
    }
    if !rows.iter().any(|r| r.2 != rows[0].2) {
        rows[0].2 += 1.0;
    }
    Dataset { p, rows }
}

/// Dense evaluation of the profiled REML criterion with `V = I + θ ZZᵀ`.
pub struct DenseReml {
    x: DMatrix<f64>,
    y: DVector<f64>,
    zzt: DMatrix<f64>,
    n: usize,
    p: usize,
}

pub struct DenseEval {
    pub deviance: f64,
    pub gradient: f64,
    pub beta: DVector<f64>,
    pub q: f64,
}

impl DenseReml {
    pub fn new(d: &Dataset) -> Self {
        let n = d.rows.len();
        let k = d.n_clusters();
        let x = DMatrix::from_fn(n, d.p, |i, j| d.rows[i].1[j]);
        let y = DVector::from_fn(n, |i, _| d.rows[i].2);
        let z = DMatrix::from_fn(n, k, |i, j| if d.rows[i].0 == j { 1.0 } else { 0.0 });
        DenseReml { zzt: &z * z.transpose(), x, y, n, p: d.p }
    }

    pub fn eval(&self, theta: f64) -> DenseEval {
        let v = DMatrix::identity(self.n, self.n) + &self.zzt * theta;
        let chol = v.clone().cholesky().expect("V is SPD");
        let log_det_v: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let vinv_x = chol.solve(&self.x);
        let vinv_y = chol.solve(&self.y);
        let a = self.x.transpose() * &vinv_x;
        let a_chol = a.clone().cholesky().expect("X'V⁻¹X is SPD");
        let log_det_a: f64 = 2.0 * a_chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let beta = a_chol.solve(&(self.x.transpose() * &vinv_y));
        let r = &self.y - &self.x * &beta;
        let vinv_r = chol.solve(&r);
        let q = r.dot(&vinv_r);
        let dof = (self.n - self.p) as f64;
        let deviance = log_det_v + log_det_a + dof * q.ln() + dof * (1.0 + (2.0 * std::f64::consts::PI / dof).ln());

        let vinv = chol.inverse();
        let tr_v = (&vinv * &self.zzt).trace();
        let da = vinv_x.transpose() * &self.zzt * &vinv_x;
        let tr_a = a_chol.solve(&da).trace();
        let dq = vinv_r.dot(&(&self.zzt * &vinv_r));
        let gradient = tr_v - tr_a - dof * dq / q;
        DenseEval { deviance, gradient, beta, q }
    }

    pub fn dof(&self) -> f64 {
        (self.n - self.p) as f64
    }
}

pub struct OracleFit {
    pub theta: f64,
    pub beta: Vec<f64>,
    pub sigma2_e: f64,
    pub sigma2_b: f64,
    pub loglik: f64,
}

/// Minimize on a dense grid of `log(1+θ)`, then bisect the dense gradient
/// inside the bracketing cell.
pub fn oracle_fit(d: &Dataset) -> OracleFit {
    let m = DenseReml::new(d);
    let phi_max = 1e6f64.ln_1p();
    let g = 160;
    let grid: Vec<f64> = (0..=g).map(|i| phi_max * i as f64 / g as f64).collect();
    let devs: Vec<f64> = grid.iter().map(|&p| m.eval(p.exp_m1()).deviance).collect();
    let k = (0..=g).min_by(|&a, &b| devs[a].total_cmp(&devs[b])).unwrap();
    let mut theta = grid[k].exp_m1();
    let lo = grid[k.saturating_sub(1)];
    let hi = grid[(k + 1).min(g)];
    let grad = |phi: f64| m.eval(phi.exp_m1()).gradient;
    if grad(lo) < 0.0 && grad(hi) > 0.0 {
        let (mut a, mut b) = (lo, hi);
        for _ in 0..120 {
            let c = 0.5 * (a + b);
            if c <= a || c >= b {
                break;
            }
            if grad(c) < 0.0 {
                a = c;
            } else {
                b = c;
            }
        }
        theta = (0.5 * (a + b)).exp_m1();
    }
    if m.eval(0.0).deviance <= m.eval(theta).deviance {
        theta = 0.0;
    }
    let e = m.eval(theta);
    let sigma2_e = e.q / m.dof();
    OracleFit { theta, beta: e.beta.iter().copied().collect(), sigma2_e, sigma2_b: theta * sigma2_e, loglik: -e.deviance / 2.0 }
}

/// `|a - b| <= tol * max(|b|, floor)`.
pub fn close(a: f64, b: f64, tol: f64, floor: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(floor)
}
