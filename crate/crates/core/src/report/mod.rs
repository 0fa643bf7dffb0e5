//! Tables, figure data and the stage pipeline.

mod figure;
mod pipeline;
mod tables;

use thiserror::Error;

use crate::design::{Gender, Knob, Race, Setting};

pub use figure::{figure_csv, figure_data, figure_data_stream, FigureAccumulator, FigureRow};
pub use pipeline::{
    in_memory_figure, read_results, run_in_memory, write_results, InMemoryRun, Manifest, Overrides, Pipeline, PipelineError,
    Seeds, Stage, StageRecord, CORPUS_FILE, EMBEDDINGS_FILE, FAILURES_FILE, FIGURE_FILE, MANIFEST_FILE, OBSERVATIONS_FILE,
    RESULTS_FILE, TABLES_DIR,
};
pub use tables::{
    coefficient_cell, parse_tables_csv, render_tables, sig2, stars, with_commas, CoefficientRow, ModelKind, ModelRow,
    RenderedTables, COEFFICIENTS_CSV, MODELS_CSV,
};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("figure cell {knob}={setting} {race} {gender} has {n} observation(s); need at least 2")]
    EmptyCell { knob: Knob, setting: Setting, race: Race, gender: Gender, n: u64 },
    #[error("csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Store(#[from] crate::store::StoreError),
}
