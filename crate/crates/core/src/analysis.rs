//! The model suite: per-setting Race and Gender models, and pooled
//! group × knob interaction models, all fitted from one pass over the
//! observation table.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::{Knob, Setting, SweepSpec};
use crate::lmm::{fit_stats, Dimension, FitOptions, LmmError, LmmFit, LmmSpec, StatsTable};
use crate::simengine::{PairId, SimilarityObservation};
use crate::store::StoreError;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("{model}: {source}")]
    Lmm { model: String, source: LmmError },
    #[error("no observations for {knob}={setting}")]
    MissingSetting { knob: Knob, setting: Setting },
    #[error("pooled {knob} model needs at least two settings; the interaction is unidentifiable")]
    SingleSetting { knob: Knob },
    #[error("no observations for knob {0}")]
    NoObservations(Knob),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerSettingFit {
    pub knob: Knob,
    pub setting: Setting,
    pub dimension: Dimension,
    pub fit: LmmFit<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledFit {
    pub knob: Knob,
    pub dimension: Dimension,
    pub fit: LmmFit<f64>,
}

/// All fits of one sweep, ordered by knob, then setting ascending, Race
/// before Gender.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelSuiteResult {
    pub per_setting: Vec<PerSettingFit>,
    pub pooled: Vec<PooledFit>,
}

impl ModelSuiteResult {
    pub fn per_setting_fit(&self, knob: Knob, setting: Setting, dimension: Dimension) -> Option<&LmmFit<f64>> {
        self.per_setting
            .iter()
            .find(|f| f.knob == knob && f.setting == setting && f.dimension == dimension)
            .map(|f| &f.fit)
    }

    pub fn pooled_fit(&self, knob: Knob, dimension: Dimension) -> Option<&LmmFit<f64>> {
        self.pooled.iter().find(|f| f.knob == knob && f.dimension == dimension).map(|f| &f.fit)
    }

    pub fn knobs(&self) -> Vec<Knob> {
        let mut k: Vec<Knob> = self.per_setting.iter().map(|f| f.knob).collect();
        k.extend(self.pooled.iter().map(|f| f.knob));
        k.sort();
        k.dedup();
        k
    }

    pub fn settings(&self, knob: Knob) -> Vec<Setting> {
        let mut s: Vec<Setting> = self.per_setting.iter().filter(|f| f.knob == knob).map(|f| f.setting).collect();
        s.sort();
        s.dedup();
        s
    }
}

/// Sufficient statistics for every model in the suite.
#[derive(Debug, Clone)]
pub struct SuiteAccumulator {
    knob: Knob,
    per_setting: BTreeMap<(Setting, Dimension), StatsTable<f64, PairId>>,
    pooled: BTreeMap<Dimension, StatsTable<f64, PairId>>,
    seen: BTreeSet<Setting>,
    include_per_setting: bool,
    include_pooled: bool,
}

impl SuiteAccumulator {
    pub fn new(knob: Knob) -> Self {
        Self::with_parts(knob, true, true)
    }

    fn with_parts(knob: Knob, include_per_setting: bool, include_pooled: bool) -> Self {
        SuiteAccumulator {
            knob,
            per_setting: BTreeMap::new(),
            pooled: BTreeMap::new(),
            seen: BTreeSet::new(),
            include_per_setting,
            include_pooled,
        }
    }

    /// Rows for other knobs are ignored.
    pub fn push(&mut self, o: &SimilarityObservation) -> Result<(), AnalysisError> {
        if o.knob != self.knob {
            return Ok(());
        }
        self.seen.insert(o.setting);
        for d in Dimension::ALL {
            if self.include_per_setting {
                let spec = LmmSpec::per_setting(d);
                let table = self.per_setting.entry((o.setting, d)).or_insert_with(|| spec.empty_table());
                spec.push(table, o).map_err(|e| lmm_err(self.knob, Some(o.setting), d, e))?;
            }
            if self.include_pooled {
                let spec = LmmSpec::pooled(d);
                let table = self.pooled.entry(d).or_insert_with(|| spec.empty_table());
                spec.push(table, o).map_err(|e| lmm_err(self.knob, None, d, e))?;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: SuiteAccumulator) {
        self.seen.extend(other.seen);
        for (k, t) in other.per_setting {
            match self.per_setting.get_mut(&k) {
                Some(mine) => mine.merge(&t),
                None => {
                    self.per_setting.insert(k, t);
                }
            }
        }
        for (k, t) in other.pooled {
            match self.pooled.get_mut(&k) {
                Some(mine) => mine.merge(&t),
                None => {
                    self.pooled.insert(k, t);
                }
            }
        }
    }

    /// Parallel accumulation over an in-memory table. Chunk boundaries
    /// do not affect the result beyond summation order.
    pub fn from_slice(knob: Knob, observations: &[SimilarityObservation]) -> Result<Self, AnalysisError> {
        Self::from_slice_parts(knob, observations, true, true)
    }

    fn from_slice_parts(
        knob: Knob,
        observations: &[SimilarityObservation],
        per_setting: bool,
        pooled: bool,
    ) -> Result<Self, AnalysisError> {
        observations
            .par_chunks(1 << 16)
            .map(|chunk| {
                let mut acc = SuiteAccumulator::with_parts(knob, per_setting, pooled);
                for o in chunk {
                    acc.push(o)?;
                }
                Ok(acc)
            })
            .collect::<Result<Vec<_>, AnalysisError>>()
            .map(|parts| {
                parts.into_iter().fold(SuiteAccumulator::with_parts(knob, per_setting, pooled), |mut a, b| {
                    a.merge(b);
                    a
                })
            })
    }

    /// Settings seen so far, ascending.
    pub fn settings(&self) -> Vec<Setting> {
        self.seen.iter().copied().collect()
    }

    /// Rows accumulated for this knob.
    pub fn n_obs(&self) -> u64 {
        match self.pooled.get(&Dimension::Race) {
            Some(t) => t.n_obs(),
            None => self.per_setting.iter().filter(|((_, d), _)| *d == Dimension::Race).map(|(_, t)| t.n_obs()).sum(),
        }
    }

    fn check_settings(&self, expected: Option<&[f64]>) -> Result<(), AnalysisError> {
        if let Some(values) = expected {
            let have = self.settings();
            for &v in values {
                let setting = Setting::new(v);
                if !have.contains(&setting) {
                    return Err(AnalysisError::MissingSetting { knob: self.knob, setting });
                }
            }
        }
        Ok(())
    }

    fn fit_per_setting(&mut self) -> Result<Vec<PerSettingFit>, AnalysisError> {
        let knob = self.knob;
        self.per_setting
            .par_iter_mut()
            .map(|(&(setting, dimension), table)| {
                let fit = fit_stats(table, &FitOptions::default()).map_err(|e| lmm_err(knob, Some(setting), dimension, e))?;
                Ok(PerSettingFit { knob, setting, dimension, fit })
            })
            .collect()
    }

    fn fit_pooled(&mut self, n_settings: usize) -> Result<Vec<PooledFit>, AnalysisError> {
        let knob = self.knob;
        if self.pooled.is_empty() {
            return Err(AnalysisError::NoObservations(knob));
        }
        if n_settings < 2 {
            return Err(AnalysisError::SingleSetting { knob });
        }
        self.pooled
            .par_iter_mut()
            .map(|(&dimension, table)| {
                let fit = fit_stats(table, &FitOptions::default()).map_err(|e| lmm_err(knob, None, dimension, e))?;
                Ok(PooledFit { knob, dimension, fit })
            })
            .collect()
    }

    /// Fit every model. `expected` lists the settings that must be present.
    pub fn finish(mut self, expected: Option<&[f64]>) -> Result<ModelSuiteResult, AnalysisError> {
        if self.per_setting.is_empty() && self.pooled.is_empty() {
            return Err(AnalysisError::NoObservations(self.knob));
        }
        self.check_settings(expected)?;
        let per_setting = if self.include_per_setting { self.fit_per_setting()? } else { Vec::new() };
        let pooled = if self.include_pooled {
            let n = self.seen.len();
            self.fit_pooled(n)?
        } else {
            Vec::new()
        };
        Ok(ModelSuiteResult { per_setting, pooled })
    }
}

fn lmm_err(knob: Knob, setting: Option<Setting>, dimension: Dimension, source: LmmError) -> AnalysisError {
    let model = match setting {
        Some(s) => format!("{dimension} model at {knob}={s}"),
        None => format!("pooled {dimension} × {knob} model"),
    };
    AnalysisError::Lmm { model, source }
}

/// Race and Gender models at every setting of `sweep`.
pub fn run_per_setting(observations: &[SimilarityObservation], sweep: &SweepSpec) -> Result<Vec<PerSettingFit>, AnalysisError> {
    let acc = SuiteAccumulator::from_slice_parts(sweep.knob, observations, true, false)?;
    if acc.per_setting.is_empty() {
        return Err(AnalysisError::NoObservations(sweep.knob));
    }
    Ok(acc.finish(Some(&sweep.values))?.per_setting)
}

/// Pooled `group × knob` models for Race and Gender.
pub fn run_pooled(observations: &[SimilarityObservation], knob: Knob) -> Result<Vec<PooledFit>, AnalysisError> {
    let mut acc = SuiteAccumulator::from_slice_parts(knob, observations, false, true)?;
    let n = acc.seen.len();
    acc.fit_pooled(n)
}

/// The full suite for one sweep.
pub fn run_suite(observations: &[SimilarityObservation], sweep: &SweepSpec) -> Result<ModelSuiteResult, AnalysisError> {
    SuiteAccumulator::from_slice(sweep.knob, observations)?.finish(Some(&sweep.values))
}
