use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{LmmError, Scalar};

/// Per-cluster sufficient statistics: `n`, `Σx`, `Σy`, `Σxxᵀ`, `Σxy`, `Σy²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats<T> {
    pub n: u64,
    pub sx: Vec<T>,
    pub sy: T,
    /// Row-major `p×p`.
    pub sxx: Vec<T>,
    pub sxy: Vec<T>,
    pub syy: T,
}

impl<T: Scalar> ClusterStats<T> {
    pub fn new(p: usize) -> Self {
        ClusterStats {
            n: 0,
            sx: vec![T::zero(); p],
            sy: T::zero(),
            sxx: vec![T::zero(); p * p],
            sxy: vec![T::zero(); p],
            syy: T::zero(),
        }
    }

    pub fn p(&self) -> usize {
        self.sx.len()
    }

    #[inline]
    pub fn push(&mut self, x: &[T], y: T) {
        let p = self.p();
        debug_assert_eq!(x.len(), p);
        self.n += 1;
        self.sy = self.sy + y;
        self.syy = self.syy + y * y;
        for i in 0..p {
            self.sx[i] = self.sx[i] + x[i];
            self.sxy[i] = self.sxy[i] + x[i] * y;
            for j in 0..=i {
                self.sxx[i * p + j] = self.sxx[i * p + j] + x[i] * x[j];
            }
        }
    }

    /// Mirror the lower triangle written by `push`.
    fn symmetrize(&mut self) {
        let p = self.p();
        for i in 0..p {
            for j in 0..i {
                self.sxx[j * p + i] = self.sxx[i * p + j];
            }
        }
    }

    pub fn merge(&mut self, other: &ClusterStats<T>) {
        self.n += other.n;
        self.sy = self.sy + other.sy;
        self.syy = self.syy + other.syy;
        for (a, b) in self.sx.iter_mut().zip(&other.sx) {
            *a = *a + *b;
        }
        for (a, b) in self.sxy.iter_mut().zip(&other.sxy) {
            *a = *a + *b;
        }
        for (a, b) in self.sxx.iter_mut().zip(&other.sxx) {
            *a = *a + *b;
        }
    }
}

/// Cluster statistics for one model, keyed by cluster id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsTable<T, K: Ord> {
    pub p: usize,
    pub terms: Vec<String>,
    pub clusters: BTreeMap<K, ClusterStats<T>>,
    finalized: bool,
}

impl<T: Scalar, K: Ord + Clone> StatsTable<T, K> {
    pub fn new(terms: Vec<String>) -> Self {
        StatsTable { p: terms.len(), terms, clusters: BTreeMap::new(), finalized: false }
    }

    /// Anonymous column names `x0..x{p-1}`.
    pub fn with_columns(p: usize) -> Self {
        Self::new((0..p).map(|i| format!("x{i}")).collect())
    }

    pub fn push(&mut self, cluster: &K, x: &[T], y: T) -> Result<(), LmmError> {
        if x.len() != self.p {
            return Err(LmmError::ColumnCount { expected: self.p, got: x.len() });
        }
        if !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(LmmError::NonFinite);
        }
        self.finalized = false;
        match self.clusters.get_mut(cluster) {
            Some(s) => s.push(x, y),
            None => {
                let mut s = ClusterStats::new(self.p);
                s.push(x, y);
                self.clusters.insert(cluster.clone(), s);
            }
        }
        Ok(())
    }

    /// Build from `(cluster, x, y)` rows.
    pub fn from_rows<'a, I>(p: usize, rows: I) -> Result<Self, LmmError>
    where
        I: IntoIterator<Item = (K, &'a [T], T)>,
        K: 'a,
    {
        let mut t = Self::with_columns(p);
        for (k, x, y) in rows {
            t.push(&k, x, y)?;
        }
        Ok(t)
    }

    /// Additive merge; statistics of a partition sum to those of the union.
    pub fn merge(&mut self, other: &StatsTable<T, K>) {
        assert_eq!(self.p, other.p, "merging tables of different width");
        self.finalized = false;
        for (k, s) in &other.clusters {
            match self.clusters.get_mut(k) {
                Some(mine) => mine.merge(s),
                None => {
                    self.clusters.insert(k.clone(), s.clone());
                }
            }
        }
    }

    pub fn n_obs(&self) -> u64 {
        self.clusters.values().map(|s| s.n).sum()
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub(crate) fn finalize(&mut self) {
        if !self.finalized {
            for s in self.clusters.values_mut() {
                s.symmetrize();
            }
            self.finalized = true;
        }
    }

    pub(crate) fn is_finalized(&self) -> bool {
        self.finalized
    }

    /// Pooled `X'X` and `X'1`, summed over clusters.
    pub(crate) fn totals(&self) -> (Vec<T>, Vec<T>) {
        let mut sxx = vec![T::zero(); self.p * self.p];
        let mut sx = vec![T::zero(); self.p];
        for s in self.clusters.values() {
            for (a, b) in sxx.iter_mut().zip(&s.sxx) {
                *a = *a + *b;
            }
            for (a, b) in sx.iter_mut().zip(&s.sx) {
                *a = *a + *b;
            }
        }
        (sxx, sx)
    }

    /// Reject designs that cannot be fitted: too few rows or clusters, or
    /// a column with no variation other than column 0 (the intercept).
    pub fn check_design(&mut self) -> Result<(), LmmError> {
        self.finalize();
        let n = self.n_obs();
        if n <= self.p as u64 {
            return Err(LmmError::TooFewObservations { n, p: self.p });
        }
        if self.n_clusters() < 2 {
            return Err(LmmError::TooFewClusters(self.n_clusters()));
        }
        let (sxx, sx) = self.totals();
        let nf = T::from_u64(n).unwrap();
        for k in 1..self.p {
            let ss = sxx[k * self.p + k];
            let centered = ss - sx[k] * sx[k] / nf;
            if !(centered > ss.abs() * T::lit(1e-10).max(T::epsilon() * T::lit(64.0))) {
                return Err(LmmError::ConstantColumn(self.terms[k].clone()));
            }
        }
        Ok(())
    }
}
