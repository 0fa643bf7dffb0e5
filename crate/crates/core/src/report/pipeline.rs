use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::figure::{figure_csv, figure_data, figure_data_stream};
use super::tables::render_tables;
use super::ReportError;
use crate::analysis::{AnalysisError, ModelSuiteResult, SuiteAccumulator};
use crate::config::{BackendChoice, ConfigError, LoadedConfig, ProviderChoice, StudyConfig};
use crate::embed::{embed_corpus, EmbedError, EmbeddingProvider, GaussianGroupEmbedder, HashEmbedder, RemoteEmbedder};
use crate::genclient::{generate_batch, Backend, ChatClient, GenError, GenerationRecord, GenerationStatus};
use crate::simengine::{build_observations, group_conditions, write_observation_table, SimError, SimilarityObservation};
use crate::store::{self, CorpusWriter, EmbeddingSet, ObservationReader, StoreError};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const FAILURES_FILE: &str = "failures.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const OBSERVATIONS_FILE: &str = "observations.csv";
pub const RESULTS_FILE: &str = "results.json";
pub const TABLES_DIR: &str = "tables";
pub const FIGURE_FILE: &str = "figure_data.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Generate,
    Embed,
    Observe,
    Fit,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Generate, Stage::Embed, Stage::Observe, Stage::Fit, Stage::Report];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Embed => "embed",
            Stage::Observe => "observe",
            Stage::Fit => "fit",
            Stage::Report => "report",
        }
    }

    fn upstream(self) -> Option<Stage> {
        match self {
            Stage::Generate => None,
            Stage::Embed => Some(Stage::Generate),
            Stage::Observe => Some(Stage::Embed),
            Stage::Fit => Some(Stage::Observe),
            Stage::Report => Some(Stage::Fit),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing credential: set {0}")]
    Credential(String),
    #[error("{artifact} not found; run stage '{stage}'")]
    MissingArtifact { artifact: &'static str, stage: Stage },
    #[error(transparent)]
    Generate(#[from] GenError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Observe(#[from] SimError),
    #[error(transparent)]
    Fit(#[from] AnalysisError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{stage}: {count} request(s) failed; see {FAILURES_FILE} and re-run to retry them")]
    Incomplete { stage: Stage, count: usize },
}

impl PipelineError {
    /// 1 config, 2 runtime, 3 missing dependency.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Credential(_) => 1,
            PipelineError::MissingArtifact { .. } => 3,
            _ => 2,
        }
    }
}

/// What one completed stage consumed and produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Hash of the stage's inputs: config, seeds and the upstream record.
    pub fingerprint: String,
    pub completed_at: DateTime<Utc>,
    /// Output file sizes in bytes.
    pub outputs: BTreeMap<String, u64>,
    pub counts: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Seeds {
    pub generation: u64,
    pub embedding: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seeds: Seeds,
    pub backend: Option<BackendChoice>,
    pub stages: BTreeMap<Stage, StageRecord>,
    pub warnings: Vec<String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, StoreError> {
        if !path.exists() {
            return Ok(Manifest::default());
        }
        let text = fs::read_to_string(path).map_err(|e| StoreError::Io { path: path.to_path_buf(), source: e })?;
        serde_json::from_str(&text).map_err(|e| StoreError::Malformed { path: path.to_path_buf(), line: 0, msg: e.to_string() })
    }

    fn save(&self, path: &Path) -> Result<(), StoreError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| StoreError::Serialize(e.to_string()))?;
        store::write_atomic(path, |w| w.write_all(text.as_bytes()))
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub backend: Option<BackendChoice>,
}

pub struct Pipeline {
    config: StudyConfig,
    /// SHA-256 of the config file bytes.
    config_hash: String,
    /// `config_hash` folded with command-line overrides.
    run_hash: String,
    out: PathBuf,
}

fn file_size(path: &Path) -> Option<u64> {
    fs::metadata(path).ok().map(|m| m.len())
}

fn sha_hex(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

fn ensure_dir(path: &Path) -> Result<(), StoreError> {
    fs::create_dir_all(path).map_err(|e| StoreError::Io { path: path.to_path_buf(), source: e })
}

impl Pipeline {
    pub fn new(loaded: LoadedConfig, out: impl Into<PathBuf>, overrides: &Overrides) -> Self {
        let mut config = loaded.config;
        let config_hash = loaded.hash;
        let mut run_hash = config_hash.clone();
        if let Some(seed) = overrides.seed {
            config.generation.seed = seed;
            run_hash = sha_hex(&[&run_hash, "seed", &seed.to_string()]);
        }
        if let Some(b) = overrides.backend {
            config.generation.backend = b;
            run_hash = sha_hex(&[&run_hash, "backend", &format!("{b:?}")]);
        }
        Pipeline { config, config_hash, run_hash, out: out.into() }
    }

    pub fn config(&self) -> &StudyConfig {
        &self.config
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn fingerprint(&self, stage: Stage, manifest: &Manifest) -> String {
        let upstream = stage.upstream().and_then(|s| manifest.stages.get(&s)).map(|r| r.fingerprint.as_str()).unwrap_or("");
        let seeds = format!("{}:{}", self.config.generation.seed, self.config.embed_seed());
        sha_hex(&[stage.as_str(), &self.run_hash, &seeds, upstream])
    }

    /// A stage is current when its fingerprint matches and every output it
    /// recorded still exists with the recorded size.
    fn is_current(&self, stage: Stage, manifest: &Manifest) -> bool {
        manifest.stages.get(&stage).is_some_and(|r| {
            r.fingerprint == self.fingerprint(stage, manifest)
                && r.outputs.iter().all(|(name, &size)| file_size(&self.path(name)) == Some(size))
        })
    }

    fn require(&self, name: &str, artifact: &'static str, stage: Stage) -> Result<PathBuf, PipelineError> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(PipelineError::MissingArtifact { artifact, stage })
        }
    }

    /// Run `stages` in pipeline order, skipping those already current.
    pub fn run(&self, stages: &[Stage]) -> Result<Manifest, PipelineError> {
        ensure_dir(&self.out)?;
        let manifest_path = self.path(MANIFEST_FILE);
        let mut manifest = Manifest::load(&manifest_path)?;
        manifest.config_hash = self.config_hash.clone();
        manifest.seeds = Seeds { generation: self.config.generation.seed, embedding: self.config.embed_seed() };
        manifest.backend = Some(self.config.generation.backend);

        let mut ordered = stages.to_vec();
        ordered.sort();
        ordered.dedup();
        for stage in ordered {
            if self.is_current(stage, &manifest) {
                info!("{stage}: up to date");
                continue;
            }
            info!("{stage}: running");
            let fingerprint = self.fingerprint(stage, &manifest);
            let (outputs, counts, warnings) = match stage {
                Stage::Generate => self.generate(&manifest)?,
                Stage::Embed => self.embed()?,
                Stage::Observe => self.observe()?,
                Stage::Fit => self.fit()?,
                Stage::Report => self.report()?,
            };
            let outputs = outputs.into_iter().map(|n| (n.clone(), file_size(&self.path(&n)).unwrap_or(0))).collect();
            manifest.warnings.extend(warnings);
            manifest.stages.insert(stage, StageRecord { fingerprint, completed_at: Utc::now(), outputs, counts });
            manifest.save(&manifest_path)?;
        }
        Ok(manifest)
    }

    fn generate(&self, manifest: &Manifest) -> Result<StageOutput, PipelineError> {
        let plan = self.config.plan()?;
        let corpus = self.path(CORPUS_FILE);
        let g = &self.config.generation;
        let backend = match g.backend {
            BackendChoice::Sim => {
                // Simulated corpora are cheap: rebuild rather than mix
                // stories from two configurations.
                if corpus.exists() && manifest.stages.contains_key(&Stage::Generate) {
                    fs::remove_file(&corpus).map_err(|e| StoreError::Io { path: corpus.clone(), source: e })?;
                }
                Backend::Simulated { config: self.config.simulator.simulator()?, seed: Some(g.seed) }
            }
            BackendChoice::Live => {
                let client = ChatClient::from_env(g.live.clone(), g.retry()).map_err(|e| match e {
                    GenError::MissingCredential(v) => PipelineError::Credential(v),
                    e => e.into(),
                })?;
                Backend::Live { client, max_in_flight: g.max_in_flight }
            }
        };
        let mut writer = CorpusWriter::open(&corpus)?;
        let existing = store::existing_keys(&corpus)?;
        let failures = self.path(FAILURES_FILE);
        let summary = generate_batch(&plan, &backend, &g.policy(), &existing, |rec: GenerationRecord| {
            if rec.status == GenerationStatus::Failed {
                store::append_jsonl(&failures, &rec).map_err(|e| GenError::Sink(e.to_string()))
            } else {
                writer.append(&rec).map_err(|e| GenError::Sink(e.to_string()))
            }
        })?;
        writer.sync()?;
        if summary.failed > 0 {
            return Err(PipelineError::Incomplete { stage: Stage::Generate, count: summary.failed });
        }
        let counts = BTreeMap::from([
            ("planned".into(), summary.planned as u64),
            ("skipped_existing".into(), summary.skipped as u64),
            ("ok".into(), summary.ok as u64),
            ("refused".into(), summary.refused as u64),
            ("degenerate".into(), summary.degenerate as u64),
        ]);
        Ok((vec![CORPUS_FILE.into()], counts, Vec::new()))
    }

    fn provider(&self) -> Result<Box<dyn EmbeddingProvider>, PipelineError> {
        let e = &self.config.embed;
        let seed = self.config.embed_seed();
        Ok(match e.provider {
            ProviderChoice::Hash => Box::new(HashEmbedder::new(e.dim, seed)),
            ProviderChoice::Gaussian => Box::new(GaussianGroupEmbedder { config: e.gaussian.config(e.dim), seed }),
            ProviderChoice::Remote => Box::new(RemoteEmbedder::from_env(e.remote.clone(), self.config.generation.retry()).map_err(
                |err| match err {
                    EmbedError::MissingCredential(v) => PipelineError::Credential(v),
                    err => err.into(),
                },
            )?),
        })
    }

    fn embed(&self) -> Result<StageOutput, PipelineError> {
        let corpus = self.require(CORPUS_FILE, "corpus", Stage::Generate)?;
        let loaded = store::load_corpus(&corpus)?;
        for w in &loaded.warnings {
            warn!("{w}");
        }
        let total = loaded.records.len();
        let mut ok: Vec<&GenerationRecord> = loaded.records.iter().filter(|r| r.is_ok()).collect();
        ok.sort_by_key(|r| r.key());
        let provider = self.provider()?;
        let set = embed_corpus(&ok, provider.as_ref(), self.config.embed.batch_size)?;
        store::write_embeddings(self.path(EMBEDDINGS_FILE), &set)?;
        let counts = BTreeMap::from([
            ("records".into(), total as u64),
            ("embedded".into(), set.len() as u64),
            ("excluded_not_ok".into(), (total - ok.len()) as u64),
            ("dim".into(), set.dim as u64),
        ]);
        Ok((vec![EMBEDDINGS_FILE.into()], counts, loaded.warnings))
    }

    fn observe(&self) -> Result<StageOutput, PipelineError> {
        let path = self.require(EMBEDDINGS_FILE, "embeddings", Stage::Embed)?;
        let set = store::read_embeddings(&path)?;
        let design = self.config.design.study_design();
        let blocks = group_conditions(&set, &design.stimuli)?;
        let summary = write_observation_table(self.path(OBSERVATIONS_FILE), &blocks)?;
        let mut counts = BTreeMap::from([("rows".into(), summary.rows), ("conditions".into(), summary.condition_sizes.len() as u64)]);
        let planned = |c: &crate::design::Condition| {
            design.stimuli.iter().filter(|s| s.race == c.race && s.gender == c.gender).count() * design.stories_per_stimulus as usize
        };
        let mut warnings = Vec::new();
        let short = summary.condition_sizes.iter().filter(|(c, n)| *n < planned(c)).count() as u64;
        counts.insert("conditions_below_plan".into(), short);
        if short > 0 {
            warnings.push(format!("{short} condition(s) have fewer stories than planned after filtering"));
        }
        Ok((vec![OBSERVATIONS_FILE.into()], counts, warnings))
    }

    fn fit(&self) -> Result<StageOutput, PipelineError> {
        let path = self.require(OBSERVATIONS_FILE, "observations", Stage::Observe)?;
        let sweep = self.config.sweep.sweep();
        let mut acc = SuiteAccumulator::new(sweep.knob);
        for o in ObservationReader::open(&path)? {
            acc.push(&o?)?;
        }
        let n = acc.n_obs();
        let result = acc.finish(Some(&sweep.values))?;
        write_results(&self.path(RESULTS_FILE), &result)?;
        let counts = BTreeMap::from([
            ("observations".into(), n),
            ("fits".into(), (result.per_setting.len() + result.pooled.len()) as u64),
            (
                "not_converged".into(),
                result.per_setting.iter().map(|f| &f.fit).chain(result.pooled.iter().map(|f| &f.fit)).filter(|f| !f.converged).count() as u64,
            ),
        ]);
        Ok((vec![RESULTS_FILE.into()], counts, Vec::new()))
    }

    fn report(&self) -> Result<StageOutput, PipelineError> {
        let results = self.require(RESULTS_FILE, "results", Stage::Fit)?;
        let observations = self.require(OBSERVATIONS_FILE, "observations", Stage::Observe)?;
        let result = read_results(&results)?;
        let tables = render_tables(&result)?;
        let dir = self.path(TABLES_DIR);
        ensure_dir(&dir)?;
        let mut outputs = Vec::new();
        for (name, text) in &tables.files {
            store::write_atomic(dir.join(name), |w| w.write_all(text.as_bytes()))?;
            outputs.push(format!("{TABLES_DIR}/{name}"));
        }
        let rows = figure_data_stream(ObservationReader::open(&observations)?)?;
        let csv = figure_csv(&rows)?;
        store::write_atomic(self.path(FIGURE_FILE), |w| w.write_all(csv.as_bytes()))?;
        outputs.push(FIGURE_FILE.into());
        let counts = BTreeMap::from([("tables".into(), tables.files.len() as u64), ("figure_rows".into(), rows.len() as u64)]);
        Ok((outputs, counts, Vec::new()))
    }
}

type StageOutput = (Vec<String>, BTreeMap<String, u64>, Vec<String>);

pub fn write_results(path: &Path, result: &ModelSuiteResult) -> Result<(), StoreError> {
    let text = serde_json::to_string_pretty(result).map_err(|e| StoreError::Serialize(e.to_string()))?;
    store::write_atomic(path, |w| w.write_all(text.as_bytes()))
}

pub fn read_results(path: &Path) -> Result<ModelSuiteResult, StoreError> {
    let text = fs::read_to_string(path).map_err(|e| StoreError::Io { path: path.to_path_buf(), source: e })?;
    serde_json::from_str(&text).map_err(|e| StoreError::Malformed { path: path.to_path_buf(), line: 0, msg: e.to_string() })
}

/// Every artifact of a simulator run, held in memory.
#[derive(Debug, Clone)]
pub struct InMemoryRun {
    pub records: Vec<GenerationRecord>,
    pub embeddings: EmbeddingSet,
    pub observations: Vec<SimilarityObservation>,
    pub result: ModelSuiteResult,
}

/// Generate → embed → observe → fit without touching disk. Only the
/// simulator backend and local embedders are supported.
pub fn run_in_memory(config: &StudyConfig) -> Result<InMemoryRun, PipelineError> {
    let plan = config.plan()?;
    let backend = Backend::Simulated { config: config.simulator.simulator()?, seed: Some(config.generation.seed) };
    let mut records = Vec::with_capacity(plan.len());
    generate_batch(&plan, &backend, &config.generation.policy(), &Default::default(), |r| {
        records.push(r);
        Ok(())
    })?;
    let mut ok: Vec<&GenerationRecord> = records.iter().filter(|r| r.is_ok()).collect();
    ok.sort_by_key(|r| r.key());
    let e = &config.embed;
    let seed = config.embed_seed();
    let embeddings = match e.provider {
        ProviderChoice::Hash => embed_corpus(&ok, &HashEmbedder::new(e.dim, seed), e.batch_size)?,
        ProviderChoice::Gaussian => {
            embed_corpus(&ok, &GaussianGroupEmbedder { config: e.gaussian.config(e.dim), seed }, e.batch_size)?
        }
        ProviderChoice::Remote => return Err(ConfigError::Invalid("in-memory runs need a local embedder".into()).into()),
    };
    let blocks = group_conditions(&embeddings, &config.design.study_design().stimuli)?;
    let observations = build_observations(&blocks)?;
    drop(blocks);
    let sweep = config.sweep.sweep();
    let result = SuiteAccumulator::from_slice(sweep.knob, &observations)?.finish(Some(&sweep.values))?;
    Ok(InMemoryRun { records, embeddings, observations, result })
}

/// Figure rows of an in-memory run.
pub fn in_memory_figure(run: &InMemoryRun) -> Result<Vec<super::figure::FigureRow>, ReportError> {
    figure_data(&run.observations)
}
