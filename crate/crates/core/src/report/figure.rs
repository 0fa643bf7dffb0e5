use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ReportError;
use crate::design::{Gender, Knob, Race, Setting};
use crate::simengine::{Moments, SimilarityObservation};
use crate::store::StoreError;

/// Mean ± SE of one (knob, setting, race, gender) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigureRow {
    pub knob: Knob,
    pub setting: Setting,
    pub race: Race,
    pub gender: Gender,
    pub n: u64,
    pub mean_raw: f64,
    pub se_raw: f64,
    pub mean_std: f64,
    pub se_std: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Cell {
    raw: Moments,
    std: Moments,
}

/// Accumulates figure cells from a stream of observations.
#[derive(Debug, Clone, Default)]
pub struct FigureAccumulator {
    cells: BTreeMap<(Knob, Setting, Race, Gender), Cell>,
}

impl FigureAccumulator {
    pub fn push(&mut self, o: &SimilarityObservation) {
        let c = self.cells.entry((o.knob, o.setting, o.race, o.gender)).or_default();
        c.raw.push(o.cosine_raw);
        c.std.push(o.cosine_std);
    }

    /// One row per cell; every (knob, setting) present must have all four
    /// groups with at least two observations each.
    pub fn finish(self) -> Result<Vec<FigureRow>, ReportError> {
        let mut strata: Vec<(Knob, Setting)> = self.cells.keys().map(|k| (k.0, k.1)).collect();
        strata.dedup();
        let mut rows = Vec::with_capacity(strata.len() * 4);
        for (knob, setting) in strata {
            for race in Race::ALL {
                for gender in Gender::ALL {
                    let cell = self.cells.get(&(knob, setting, race, gender));
                    let n = cell.map_or(0, |c| c.raw.n);
                    let Some(c) = cell.filter(|_| n >= 2) else {
                        return Err(ReportError::EmptyCell { knob, setting, race, gender, n });
                    };
                    rows.push(FigureRow {
                        knob,
                        setting,
                        race,
                        gender,
                        n,
                        mean_raw: c.raw.mean,
                        se_raw: c.raw.se(),
                        mean_std: c.std.mean,
                        se_std: c.std.se(),
                    });
                }
            }
        }
        Ok(rows)
    }
}

pub fn figure_data<'a>(observations: impl IntoIterator<Item = &'a SimilarityObservation>) -> Result<Vec<FigureRow>, ReportError> {
    let mut acc = FigureAccumulator::default();
    for o in observations {
        acc.push(o);
    }
    acc.finish()
}

/// As [`figure_data`], over a fallible stream such as an observation file.
pub fn figure_data_stream(
    observations: impl IntoIterator<Item = Result<SimilarityObservation, StoreError>>,
) -> Result<Vec<FigureRow>, ReportError> {
    let mut acc = FigureAccumulator::default();
    for o in observations {
        acc.push(&o?);
    }
    acc.finish()
}

pub fn figure_csv(rows: &[FigureRow]) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| ReportError::Csv(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| ReportError::Csv(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
