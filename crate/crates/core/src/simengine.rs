//! Within-condition pairwise cosine similarity and per-setting
//! standardization.
//!
//! Stories are grouped into [`ConditionBlock`]s (one per race × gender ×
//! setting). Every unordered pair of distinct stories inside a block yields
//! one [`SimilarityObservation`]. Standardization is a two-phase reduce:
//! stratum moments first, then a second enumeration that rewrites each
//! cosine as a z-score. Neither phase holds the pairs in memory.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::Path;

use num_traits::Float;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::{Condition, Gender, Knob, Race, Setting, Stimulus};
use crate::store::{self, EmbeddingSet, StoreError, OBSERVATION_HEADER};

/// Target pairs per parallel work unit.
const UNIT_PAIRS: u64 = 1 << 18;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("zero-norm embedding for {0}")]
    ZeroNormKey(String),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("story {0} references unknown stimulus")]
    UnknownStimulus(String),
    #[error("zero variance in stratum {knob}={setting}")]
    ZeroVariance { knob: Knob, setting: Setting },
    #[error("stratum {knob}={setting} has {n} observation(s); need at least 2")]
    StratumTooSmall { knob: Knob, setting: Setting, n: u64 },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Unordered pair of stimulus-set ids, stored `lo <= hi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairId {
    lo: u32,
    hi: u32,
}

impl PairId {
    pub fn new(a: u32, b: u32) -> Self {
        PairId { lo: a.min(b), hi: a.max(b) }
    }

    pub fn lo(self) -> u32 {
        self.lo
    }

    pub fn hi(self) -> u32 {
        self.hi
    }
}

impl fmt::Display for PairId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.lo, self.hi)
    }
}

/// One pairwise cosine row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityObservation {
    pub cosine_raw: f64,
    /// NaN until standardized.
    pub cosine_std: f64,
    pub race: Race,
    pub gender: Gender,
    pub pair_id: PairId,
    pub knob: Knob,
    pub setting: Setting,
}

impl SimilarityObservation {
    pub fn stratum(&self) -> (Knob, Setting) {
        (self.knob, self.setting)
    }
}

/// `n_conditions * n(n-1)/2`.
pub fn pair_count(n_stories_per_condition: u64, n_conditions: u64) -> u64 {
    let n = n_stories_per_condition;
    n_conditions * (n * n.saturating_sub(1) / 2)
}

/// `u·v / (‖u‖‖v‖)` accumulated in `f64`, clamped to `[-1, 1]`.
pub fn cosine<T: Float>(u: &[T], v: &[T]) -> Result<f64, SimError> {
    if u.len() != v.len() {
        return Err(SimError::DimensionMismatch(u.len(), v.len()));
    }
    let (mut dot, mut uu, mut vv) = (0.0f64, 0.0f64, 0.0f64);
    for (a, b) in u.iter().zip(v) {
        let (a, b) = (a.to_f64().unwrap_or(f64::NAN), b.to_f64().unwrap_or(f64::NAN));
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    if !(uu > 0.0 && vv > 0.0) {
        return Err(SimError::ZeroNorm);
    }
    Ok((dot / (uu.sqrt() * vv.sqrt())).clamp(-1.0, 1.0))
}

#[inline]
fn dot_f32(u: &[f32], v: &[f32]) -> f64 {
    u.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// The stories of one condition, with precomputed norms.
#[derive(Debug, Clone)]
pub struct ConditionBlock<'a> {
    pub condition: Condition,
    pub set_ids: Vec<u32>,
    rows: Vec<&'a [f32]>,
    norms: Vec<f64>,
}

impl<'a> ConditionBlock<'a> {
    /// Build a block directly from `(set_id, vector)` pairs.
    pub fn new(condition: Condition, stories: Vec<(u32, &'a [f32])>) -> Result<Self, SimError> {
        let dim = stories.first().map(|s| s.1.len()).unwrap_or(0);
        let mut set_ids = Vec::with_capacity(stories.len());
        let mut rows = Vec::with_capacity(stories.len());
        let mut norms = Vec::with_capacity(stories.len());
        for (set_id, row) in stories {
            if row.len() != dim {
                return Err(SimError::DimensionMismatch(dim, row.len()));
            }
            let norm = dot_f32(row, row).sqrt();
            if !(norm > 0.0) {
                return Err(SimError::ZeroNormKey(format!("set {set_id} in {condition:?}")));
            }
            set_ids.push(set_id);
            rows.push(row);
            norms.push(norm);
        }
        Ok(ConditionBlock { condition, set_ids, rows, norms })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn pair_count(&self) -> u64 {
        pair_count(self.len() as u64, 1)
    }

    #[inline]
    fn cosine_at(&self, i: usize, j: usize) -> f64 {
        (dot_f32(self.rows[i], self.rows[j]) / (self.norms[i] * self.norms[j])).clamp(-1.0, 1.0)
    }

    #[inline]
    fn observation(&self, i: usize, j: usize, cosine_std: f64) -> SimilarityObservation {
        let c = &self.condition;
        SimilarityObservation {
            cosine_raw: self.cosine_at(i, j),
            cosine_std,
            race: c.race,
            gender: c.gender,
            pair_id: PairId::new(self.set_ids[i], self.set_ids[j]),
            knob: c.knob,
            setting: c.setting,
        }
    }

    /// Pairs `(i, j)`, `i < j`, for leading indices in `lead`; `cosine_std`
    /// is NaN.
    pub fn observations_in(&self, lead: std::ops::Range<usize>) -> impl Iterator<Item = SimilarityObservation> + '_ {
        let n = self.len();
        lead.flat_map(move |i| (i + 1..n).map(move |j| self.observation(i, j, f64::NAN)))
    }

    pub fn observations(&self) -> impl Iterator<Item = SimilarityObservation> + '_ {
        self.observations_in(0..self.len())
    }

    /// Split leading indices into ranges of roughly `UNIT_PAIRS` pairs.
    fn units(&self) -> Vec<std::ops::Range<usize>> {
        let n = self.len();
        let mut out = Vec::new();
        let mut start = 0;
        let mut acc = 0u64;
        for i in 0..n {
            acc += (n - i - 1) as u64;
            if acc >= UNIT_PAIRS {
                out.push(start..i + 1);
                start = i + 1;
                acc = 0;
            }
        }
        if start < n {
            out.push(start..n);
        }
        out
    }
}

/// Group an embedding set into condition blocks, ordered by condition and
/// keeping the set's row order within each block.
pub fn group_conditions<'a>(set: &'a EmbeddingSet, stimuli: &[Stimulus]) -> Result<Vec<ConditionBlock<'a>>, SimError> {
    let known: HashMap<(u32, Race), Gender> = stimuli.iter().map(|s| ((s.set_id, s.race), s.gender)).collect();
    let mut grouped: BTreeMap<Condition, Vec<(u32, &'a [f32])>> = BTreeMap::new();
    for (i, key) in set.keys.iter().enumerate() {
        match known.get(&(key.set_id, key.race)) {
            Some(&g) if g == key.gender => {}
            _ => return Err(SimError::UnknownStimulus(key.to_string())),
        }
        grouped.entry(key.condition()).or_default().push((key.set_id, set.row(i)));
    }
    grouped.into_iter().map(|(c, stories)| ConditionBlock::new(c, stories)).collect()
}

/// Running count, mean and sum of squared deviations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub n: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Moments {
    #[inline]
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let d = other.mean - self.mean;
        self.mean += d * other.n as f64 / n as f64;
        self.m2 += other.m2 + d * d * (self.n as f64 * other.n as f64 / n as f64);
        self.n = n;
    }

    /// Sample variance (denominator `n - 1`).
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            f64::NAN
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn sd(&self) -> f64 {
        self.variance().sqrt()
    }

    /// Standard error of the mean.
    pub fn se(&self) -> f64 {
        self.sd() / (self.n as f64).sqrt()
    }
}

impl FromIterator<f64> for Moments {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut m = Moments::default();
        for x in iter {
            m.push(x);
        }
        m
    }
}

/// Mean and SD per `(knob, setting)` stratum.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StratumStats {
    pub strata: BTreeMap<(Knob, Setting), Moments>,
}

impl StratumStats {
    pub fn get(&self, knob: Knob, setting: Setting) -> Option<&Moments> {
        self.strata.get(&(knob, setting))
    }

    /// Errors on strata that cannot be standardized.
    pub fn check(&self) -> Result<(), SimError> {
        for (&(knob, setting), m) in &self.strata {
            if m.n < 2 {
                return Err(SimError::StratumTooSmall { knob, setting, n: m.n });
            }
            if !(m.m2 > 0.0) {
                return Err(SimError::ZeroVariance { knob, setting });
            }
        }
        Ok(())
    }

    pub fn standardize(&self, obs: &SimilarityObservation) -> f64 {
        let m = &self.strata[&obs.stratum()];
        (obs.cosine_raw - m.mean) / m.sd()
    }

    pub fn total(&self) -> u64 {
        self.strata.values().map(|m| m.n).sum()
    }
}

fn work_units<'b, 'a>(blocks: &'b [ConditionBlock<'a>]) -> Vec<(&'b ConditionBlock<'a>, std::ops::Range<usize>)> {
    blocks.iter().flat_map(|b| b.units().into_iter().map(move |r| (b, r))).collect()
}

/// First phase: stratum moments over every pair, in parallel. Work units
/// are fixed by the data alone and merged in order, so the result does not
/// depend on the thread count.
pub fn stratum_stats(blocks: &[ConditionBlock<'_>]) -> StratumStats {
    let partial: Vec<((Knob, Setting), Moments)> = work_units(blocks)
        .into_par_iter()
        .map(|(b, range)| {
            let mut m = Moments::default();
            let n = b.len();
            for i in range {
                for j in i + 1..n {
                    m.push(b.cosine_at(i, j));
                }
            }
            ((b.condition.knob, b.condition.setting), m)
        })
        .collect();
    let mut out = StratumStats::default();
    for (k, m) in partial {
        out.strata.entry(k).or_default().merge(&m);
    }
    out
}

/// z-score `cosine_raw` into `cosine_std` within each `(knob, setting)`
/// stratum, pooling all groups.
pub fn standardize(observations: &mut [SimilarityObservation]) -> Result<StratumStats, SimError> {
    let mut stats = StratumStats::default();
    for o in observations.iter() {
        stats.strata.entry(o.stratum()).or_default().push(o.cosine_raw);
    }
    stats.check()?;
    for o in observations.iter_mut() {
        o.cosine_std = stats.standardize(o);
    }
    Ok(stats)
}

/// All observations of `blocks`, standardized, in memory. For small runs
/// and tests; the file pipeline streams through
/// [`write_observation_table`].
pub fn build_observations(blocks: &[ConditionBlock<'_>]) -> Result<Vec<SimilarityObservation>, SimError> {
    let stats = stratum_stats(blocks);
    stats.check()?;
    let total = blocks.iter().map(|b| b.pair_count() as usize).sum();
    let mut out = Vec::with_capacity(total);
    for b in blocks {
        out.extend(b.observations().map(|mut o| {
            o.cosine_std = stats.standardize(&o);
            o
        }));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSummary {
    pub rows: u64,
    pub stats: StratumStats,
    /// Stories per condition after filtering.
    pub condition_sizes: Vec<(Condition, usize)>,
}

/// Stream the standardized observation table to `path` as CSV.
pub fn write_observation_table(path: impl AsRef<Path>, blocks: &[ConditionBlock<'_>]) -> Result<ObservationSummary, SimError> {
    let stats = stratum_stats(blocks);
    stats.check()?;
    let units = work_units(blocks);
    let mut rows = 0u64;
    store::write_atomic(&path, |w| {
        writeln!(w, "{OBSERVATION_HEADER}")?;
        let window = rayon::current_num_threads().max(1) * 4;
        for chunk in units.chunks(window) {
            let buffers: Vec<(u64, Vec<u8>)> = chunk
                .par_iter()
                .map(|(b, range)| {
                    let mut buf = Vec::with_capacity(1 << 20);
                    let mut count = 0u64;
                    for mut o in b.observations_in(range.clone()) {
                        o.cosine_std = stats.standardize(&o);
                        store::write_observation_row(&mut buf, &o);
                        count += 1;
                    }
                    (count, buf)
                })
                .collect();
            for (count, buf) in buffers {
                w.write_all(&buf)?;
                rows += count;
            }
        }
        Ok(())
    })?;
    Ok(ObservationSummary {
        rows,
        stats,
        condition_sizes: blocks.iter().map(|b| (b.condition, b.len())).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cond(race: Race, gender: Gender) -> Condition {
        Condition { knob: Knob::TopP, setting: Setting::new(0.2), race, gender }
    }

    #[test]
    fn pair_counts() {
        assert_eq!(pair_count(750, 4), 1_123_500);
        assert_eq!(pair_count(2, 1), 1);
        assert_eq!(pair_count(0, 4), 0);
        assert_eq!(pair_count(1, 4), 0);
        assert_eq!(pair_count(749, 1), 280_126);
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine(&[0.3f64, -2.0], &[0.3, -2.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0f32, 0.0], &[0.0, 5.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0f64, 0.0], &[1.0, 1.0]).unwrap() - 0.70710678).abs() < 1e-8);
        assert!(matches!(cosine(&[0.0f64, 0.0], &[1.0, 1.0]), Err(SimError::ZeroNorm)));
        assert!(matches!(cosine(&[1.0f64], &[1.0, 1.0]), Err(SimError::DimensionMismatch(1, 2))));
    }

    #[test]
    fn minimal_block() {
        let v = [1.0f32, 2.0];
        let w = [2.0f32, 1.0];
        let b = ConditionBlock::new(cond(Race::Black, Gender::Man), vec![(4, &v[..]), (4, &w[..])]).unwrap();
        let obs: Vec<_> = b.observations().collect();
        assert_eq!(obs.len(), 1);
        assert_eq!(obs[0].pair_id, PairId::new(4, 4));
        assert!((obs[0].cosine_raw - 0.8).abs() < 1e-12);
    }

    #[test]
    fn standardize_triple() {
        let mk = |x| SimilarityObservation {
            cosine_raw: x,
            cosine_std: f64::NAN,
            race: Race::Black,
            gender: Gender::Man,
            pair_id: PairId::new(1, 2),
            knob: Knob::Temperature,
            setting: Setting::new(0.0),
        };
        let mut obs = vec![mk(1.0), mk(2.0), mk(3.0)];
        standardize(&mut obs).unwrap();
        let z: Vec<f64> = obs.iter().map(|o| o.cosine_std).collect();
        assert_eq!(z, vec![-1.0, 0.0, 1.0]);

        let mut flat = vec![mk(0.5), mk(0.5)];
        let err = standardize(&mut flat).unwrap_err();
        assert!(err.to_string().contains("zero variance"));
        let mut single = vec![mk(0.5)];
        assert!(matches!(standardize(&mut single), Err(SimError::StratumTooSmall { .. })));
    }

    #[test]
    fn pair_id_is_symmetric() {
        assert_eq!(PairId::new(9, 2), PairId::new(2, 9));
        assert_eq!(PairId::new(9, 2).to_string(), "2-9");
    }

    #[test]
    fn units_cover_every_leading_index() {
        let data: Vec<f32> = (0..2000 * 2).map(|i| 1.0 + (i % 7) as f32).collect();
        let stories = data.chunks(2).map(|r| (1u32, r)).collect();
        let b = ConditionBlock::new(cond(Race::White, Gender::Woman), stories).unwrap();
        let units = b.units();
        assert!(units.len() > 1);
        assert_eq!(units[0].start, 0);
        assert_eq!(units.last().unwrap().end, 2000);
        for w in units.windows(2) {
            assert_eq!(w[0].end, w[1].start);
        }
    }

    #[test]
    fn moments_merge_matches_sequential() {
        let xs: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 / 7.0).collect();
        let all: Moments = xs.iter().copied().collect();
        let mut a: Moments = xs[..313].iter().copied().collect();
        let b: Moments = xs[313..].iter().copied().collect();
        a.merge(&b);
        assert_eq!(a.n, all.n);
        assert!((a.mean - all.mean).abs() < 1e-12);
        assert!((a.variance() - all.variance()).abs() < 1e-10);
    }
}
