use std::fmt;

use serde::{Deserialize, Serialize};

use super::{LmmError, StatsTable};
use crate::design::{Gender, Race};
use crate::simengine::{PairId, SimilarityObservation};

/// Grouping variable of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dimension {
    Race,
    Gender,
}

impl Dimension {
    pub const ALL: [Dimension; 2] = [Dimension::Race, Dimension::Gender];

    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::Race => "Race",
            Dimension::Gender => "Gender",
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceLevels {
    pub race: Race,
    pub gender: Gender,
}

impl Default for ReferenceLevels {
    /// White and Man are the reference levels.
    fn default() -> Self {
        ReferenceLevels { race: Race::White, gender: Gender::Man }
    }
}

/// Fixed-effect term. Dummies are 0/1 against the reference level; the
/// knob enters as the raw, uncentered setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Term {
    Intercept,
    Race,
    Gender,
    Knob,
    Interaction(Dimension),
}

impl Term {
    pub fn name(self) -> String {
        match self {
            Term::Intercept => "Intercept".into(),
            Term::Race => "Race".into(),
            Term::Gender => "Gender".into(),
            Term::Knob => "Knob".into(),
            Term::Interaction(d) => format!("{d}:Knob"),
        }
    }

    #[inline]
    fn value(self, o: &SimilarityObservation, refs: &ReferenceLevels) -> f64 {
        let race = if o.race != refs.race { 1.0 } else { 0.0 };
        let gender = if o.gender != refs.gender { 1.0 } else { 0.0 };
        match self {
            Term::Intercept => 1.0,
            Term::Race => race,
            Term::Gender => gender,
            Term::Knob => o.setting.value(),
            Term::Interaction(Dimension::Race) => race * o.setting.value(),
            Term::Interaction(Dimension::Gender) => gender * o.setting.value(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Response {
    CosineStd,
    CosineRaw,
}

impl Response {
    #[inline]
    fn value(self, o: &SimilarityObservation) -> f64 {
        match self {
            Response::CosineStd => o.cosine_std,
            Response::CosineRaw => o.cosine_raw,
        }
    }
}

/// Response, fixed terms and reference levels of one random-intercept
/// model. The single grouping factor is always the pair id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmmSpec {
    pub response: Response,
    pub fixed: Vec<Term>,
    pub reference: ReferenceLevels,
}

impl LmmSpec {
    pub fn new(fixed: Vec<Term>) -> Result<Self, LmmError> {
        if fixed.first() != Some(&Term::Intercept) {
            return Err(LmmError::Spec("the intercept must be the first term".into()));
        }
        if fixed.len() > 8 {
            return Err(LmmError::Spec("at most 8 fixed-effect terms".into()));
        }
        for (i, t) in fixed.iter().enumerate() {
            if fixed[..i].contains(t) {
                return Err(LmmError::Spec(format!("term {} repeated", t.name())));
            }
        }
        Ok(LmmSpec { response: Response::CosineStd, fixed, reference: ReferenceLevels::default() })
    }

    /// `y ~ 1 + group + (1 | pair)`.
    pub fn per_setting(dimension: Dimension) -> Self {
        Self::new(vec![Term::Intercept, dimension_term(dimension)]).unwrap()
    }

    /// `y ~ 1 + group * knob + (1 | pair)`.
    pub fn pooled(dimension: Dimension) -> Self {
        Self::new(vec![Term::Intercept, dimension_term(dimension), Term::Knob, Term::Interaction(dimension)]).unwrap()
    }

    pub fn with_reference(mut self, reference: ReferenceLevels) -> Self {
        self.reference = reference;
        self
    }

    pub fn p(&self) -> usize {
        self.fixed.len()
    }

    pub fn term_names(&self) -> Vec<String> {
        self.fixed.iter().map(|t| t.name()).collect()
    }

    /// Design row for one observation.
    #[inline]
    pub fn row(&self, o: &SimilarityObservation, out: &mut [f64]) {
        for (slot, t) in out.iter_mut().zip(&self.fixed) {
            *slot = t.value(o, &self.reference);
        }
    }

    pub fn response_of(&self, o: &SimilarityObservation) -> f64 {
        self.response.value(o)
    }

    pub fn empty_table(&self) -> StatsTable<f64, PairId> {
        StatsTable::new(self.term_names())
    }

    /// Add one observation to `table`.
    #[inline]
    pub fn push(&self, table: &mut StatsTable<f64, PairId>, o: &SimilarityObservation) -> Result<(), LmmError> {
        let mut x = [0.0f64; 8];
        let p = self.p();
        self.row(o, &mut x[..p]);
        table.push(&o.pair_id, &x[..p], self.response_of(o))
    }
}

fn dimension_term(d: Dimension) -> Term {
    match d {
        Dimension::Race => Term::Race,
        Dimension::Gender => Term::Gender,
    }
}

/// Exact per-pair-id sufficient statistics of `observations` under `spec`.
/// Memory is `O(clusters × p²)` regardless of the row count.
pub fn accumulate_stats<'a, I>(observations: I, spec: &LmmSpec) -> Result<StatsTable<f64, PairId>, LmmError>
where
    I: IntoIterator<Item = &'a SimilarityObservation>,
{
    let mut table = spec.empty_table();
    for o in observations {
        spec.push(&mut table, o)?;
    }
    table.check_design()?;
    Ok(table)
}
