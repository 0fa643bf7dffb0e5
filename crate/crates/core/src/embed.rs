//! Story embedding providers.
//!
//! Three providers share one trait: a remote sentence-encoder endpoint, a
//! seeded bag-of-words hash projection, and a Gaussian provider that ignores
//! wording and plants a known spread per group and setting.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::design::{Gender, Knob, Race};
use crate::genclient::GenerationRecord;
use crate::http::{post_with_retry, CallError, JsonTransport, RetryPolicy, UreqTransport};
use crate::seed;
use crate::store::EmbeddingSet;

pub const DEFAULT_REMOTE_MODEL: &str = "all-mpnet-base-v2";
pub const DEFAULT_REMOTE_DIM: usize = 768;
pub const DEFAULT_TEST_DIM: usize = 64;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("record {0} is not an Ok generation")]
    NotOk(String),
    #[error("dimension drift: expected {expected}, got {got}")]
    DimensionDrift { expected: usize, got: usize },
    #[error("non-finite component in embedding of {0}")]
    NonFinite(String),
    #[error("negative spread {0}")]
    NegativeSpread(f64),
    #[error("no spread entry for {race} {gender} under {knob}")]
    UnknownGroup { race: Race, gender: Gender, knob: Knob },
    #[error("credential environment variable {0} is not set")]
    MissingCredential(String),
    #[error(transparent)]
    Call(#[from] CallError),
    #[error("malformed embedding response: {0}")]
    BadResponse(String),
    #[error("invalid provider config: {0}")]
    Config(String),
}

/// One story's vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub key: crate::design::GenerationKey,
    pub values: Vec<f32>,
    pub norm: f64,
}

impl EmbeddingVector {
    pub fn new(key: crate::design::GenerationKey, values: Vec<f32>) -> Self {
        let norm = values.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        EmbeddingVector { key, values, norm }
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;

    /// Output dimension, when known before the first call.
    fn dim(&self) -> Option<usize>;

    /// Batches the caller may have outstanding at once.
    fn max_in_flight(&self) -> usize {
        1
    }

    /// One vector per record, in input order.
    fn embed(&self, records: &[&GenerationRecord]) -> Result<Vec<Vec<f32>>, EmbedError>;
}

/// Embed `records` (all `Ok`) in batches, keeping key order.
pub fn embed_corpus(
    records: &[&GenerationRecord],
    provider: &dyn EmbeddingProvider,
    batch_size: usize,
) -> Result<EmbeddingSet, EmbedError> {
    if let Some(bad) = records.iter().find(|r| !r.is_ok()) {
        return Err(EmbedError::NotOk(bad.key().to_string()));
    }
    let batches: Vec<&[&GenerationRecord]> = records.chunks(batch_size.max(1)).collect();
    let results: Vec<Mutex<Option<Vec<Vec<f32>>>>> = batches.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let first_error: Mutex<Option<EmbedError>> = Mutex::new(None);
    let workers = provider.max_in_flight().max(1).min(batches.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if failed.load(Ordering::Relaxed) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(batch) = batches.get(i) else { break };
                match provider.embed(batch) {
                    Ok(v) => *results[i].lock().unwrap() = Some(v),
                    Err(e) => {
                        failed.store(true, Ordering::Relaxed);
                        first_error.lock().unwrap().get_or_insert(e);
                    }
                }
            });
        }
    });
    if let Some(e) = first_error.into_inner().unwrap() {
        return Err(e);
    }

    let mut dim = provider.dim();
    let mut values = Vec::new();
    let mut keys = Vec::with_capacity(records.len());
    for (batch, slot) in batches.iter().zip(results) {
        let vectors = slot.into_inner().unwrap().expect("every batch embedded");
        if vectors.len() != batch.len() {
            return Err(EmbedError::BadResponse(format!("{} vectors for {} inputs", vectors.len(), batch.len())));
        }
        for (rec, v) in batch.iter().zip(vectors) {
            let expected = *dim.get_or_insert(v.len());
            if v.len() != expected {
                return Err(EmbedError::DimensionDrift { expected, got: v.len() });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(EmbedError::NonFinite(rec.key().to_string()));
            }
            keys.push(rec.key());
            values.extend_from_slice(&v);
        }
    }
    Ok(EmbeddingSet { dim: dim.unwrap_or(0), keys, values })
}

/// Lowercased alphanumeric runs.
fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase)
}

/// Bag-of-words random projection: each distinct token contributes a fixed
/// pseudo-random vector in `[-1, 1]^d`, weighted by its count.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        HashEmbedder { dim, seed }
    }

    pub fn embed_text(&self, text: &str) -> Vec<f32> {
        let mut acc = vec![0.0f64; self.dim];
        for tok in tokens(text) {
            let mut state = seed::hash_str(self.seed, &tok);
            for a in acc.iter_mut() {
                state = seed::splitmix64(state);
                // top 53 bits → [-1, 1)
                *a += (state >> 11) as f64 * (2.0 / (1u64 << 53) as f64) - 1.0;
            }
        }
        acc.into_iter().map(|v| v as f32).collect()
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn name(&self) -> &str {
        "hash"
    }

    fn dim(&self) -> Option<usize> {
        Some(self.dim)
    }

    fn embed(&self, records: &[&GenerationRecord]) -> Result<Vec<Vec<f32>>, EmbedError> {
        Ok(records.par_iter().map(|r| self.embed_text(&r.story_text)).collect())
    }
}

/// Spread σ of one group as a piecewise-linear function of the setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpreadCurve {
    pub race: Race,
    pub gender: Gender,
    #[serde(default)]
    pub knob: Option<Knob>,
    pub points: Vec<(f64, f64)>,
}

impl SpreadCurve {
    pub fn constant(race: Race, gender: Gender, sigma: f64) -> Self {
        SpreadCurve { race, gender, knob: None, points: vec![(0.0, sigma)] }
    }

    fn at(&self, x: f64) -> f64 {
        let p = &self.points;
        if x <= p[0].0 {
            return p[0].1;
        }
        for w in p.windows(2) {
            if x <= w[1].0 {
                let t = (x - w[0].0) / (w[1].0 - w[0].0);
                return w[0].1 + t * (w[1].1 - w[0].1);
            }
        }
        p[p.len() - 1].1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianConfig {
    pub dim: usize,
    /// ‖μ‖ for every group. Group means point along distinct axes.
    pub mean_norm: f64,
    /// Length of the per-stimulus-set offset added to μ; gives stimulus pairs
    /// their own baseline similarity.
    pub stimulus_spread: f64,
    pub spread: Vec<SpreadCurve>,
}

impl GaussianConfig {
    pub fn uniform(dim: usize, sigma: f64) -> Self {
        let spread = Race::ALL
            .into_iter()
            .flat_map(|r| Gender::ALL.into_iter().map(move |g| SpreadCurve::constant(r, g, sigma)))
            .collect();
        GaussianConfig { dim, mean_norm: 1.0, stimulus_spread: 0.0, spread }
    }

    pub fn sigma(&self, race: Race, gender: Gender, knob: Knob, setting: f64) -> Result<f64, EmbedError> {
        let group = self.spread.iter().filter(|c| c.race == race && c.gender == gender);
        let curve = group
            .clone()
            .find(|c| c.knob == Some(knob))
            .or_else(|| group.clone().find(|c| c.knob.is_none()))
            .ok_or(EmbedError::UnknownGroup { race, gender, knob })?;
        let s = curve.at(setting);
        if !(s >= 0.0) {
            return Err(EmbedError::NegativeSpread(s));
        }
        Ok(s)
    }

    /// Group mean direction; groups 0..4 take axes 0..4 (mod `dim`).
    pub fn group_mean(&self, race: Race, gender: Gender) -> Vec<f64> {
        let mut mu = vec![0.0; self.dim];
        let axis = (race as usize * 2 + gender as usize) % self.dim.max(1);
        mu[axis] = self.mean_norm;
        mu
    }
}

/// `normalize(μ + σ z)` with `z` standard normal, seeded by the story text
/// and its condition.
pub fn gaussian_group_embed(record: &GenerationRecord, config: &GaussianConfig, seed: u64) -> Result<Vec<f32>, EmbedError> {
    let sigma = config.sigma(record.race, record.gender, record.knob, record.setting.value())?;
    let mut v = config.group_mean(record.race, record.gender);
    if config.stimulus_spread > 0.0 {
        let mut rng = seed::rng(seed::mix(seed, &[0x5e7, record.set_id as u64]));
        let scale = config.stimulus_spread / (config.dim as f64).sqrt();
        for x in v.iter_mut() {
            *x += scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let cond = seed::mix(
        seed::hash_str(seed, &record.story_text),
        &[record.race as u64, record.gender as u64, record.knob as u64, record.setting.value().to_bits()],
    );
    let mut rng = seed::rng(cond);
    for x in v.iter_mut() {
        *x += sigma * rng.sample::<f64, _>(StandardNormal);
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(EmbedError::NonFinite(record.key().to_string()));
    }
    Ok(v.into_iter().map(|x| (x / norm) as f32).collect())
}

#[derive(Debug, Clone)]
pub struct GaussianGroupEmbedder {
    pub config: GaussianConfig,
    pub seed: u64,
}

impl EmbeddingProvider for GaussianGroupEmbedder {
    fn name(&self) -> &str {
        "gaussian"
    }

    fn dim(&self) -> Option<usize> {
        Some(self.config.dim)
    }

    fn embed(&self, records: &[&GenerationRecord]) -> Result<Vec<Vec<f32>>, EmbedError> {
        records.par_iter().map(|r| gaussian_group_embed(r, &self.config, self.seed)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_in_flight() -> usize {
    crate::genclient::DEFAULT_MAX_IN_FLIGHT
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            endpoint: "http://localhost:8080/v1/embeddings".to_string(),
            model: DEFAULT_REMOTE_MODEL.to_string(),
            api_key_env: "EMBEDDING_API_KEY".to_string(),
            dim: Some(DEFAULT_REMOTE_DIM),
            max_in_flight: default_in_flight(),
        }
    }
}

/// Embedding endpoint speaking `{model, input: [..]}` →
/// `{data: [{index, embedding}]}`.
pub struct RemoteEmbedder {
    config: RemoteConfig,
    api_key: Option<String>,
    retry: RetryPolicy,
    transport: Arc<dyn JsonTransport>,
}

impl RemoteEmbedder {
    /// The credential is optional for local inference servers; when the
    /// variable is named but unset, that is an error.
    pub fn from_env(config: RemoteConfig, retry: RetryPolicy) -> Result<Self, EmbedError> {
        let api_key = if config.api_key_env.is_empty() {
            None
        } else {
            Some(std::env::var(&config.api_key_env).map_err(|_| EmbedError::MissingCredential(config.api_key_env.clone()))?)
        };
        Ok(Self::with_transport(config, api_key, retry, Arc::new(UreqTransport::default())))
    }

    pub fn with_transport(
        config: RemoteConfig,
        api_key: Option<String>,
        retry: RetryPolicy,
        transport: Arc<dyn JsonTransport>,
    ) -> Self {
        RemoteEmbedder { config, api_key, retry, transport }
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn name(&self) -> &str {
        "remote"
    }

    fn dim(&self) -> Option<usize> {
        self.config.dim
    }

    fn max_in_flight(&self) -> usize {
        self.config.max_in_flight
    }

    fn embed(&self, records: &[&GenerationRecord]) -> Result<Vec<Vec<f32>>, EmbedError> {
        let input: Vec<&str> = records.iter().map(|r| r.story_text.as_str()).collect();
        let body = json!({ "model": self.config.model, "input": input });
        let raw = post_with_retry(&*self.transport, &self.config.endpoint, self.api_key.as_deref(), &body, &self.retry)?;
        parse_embedding_response(&raw, records.len())
    }
}

/// Reorders `data` by `index`; responses may arrive shuffled.
fn parse_embedding_response(raw: &str, expected: usize) -> Result<Vec<Vec<f32>>, EmbedError> {
    let v: Value = serde_json::from_str(raw).map_err(|e| EmbedError::BadResponse(e.to_string()))?;
    let data = v.get("data").and_then(Value::as_array).ok_or_else(|| EmbedError::BadResponse("no data array".into()))?;
    let mut out: Vec<Option<Vec<f32>>> = vec![None; expected];
    for (pos, item) in data.iter().enumerate() {
        let index = item.get("index").and_then(Value::as_u64).map(|i| i as usize).unwrap_or(pos);
        let emb = item
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| EmbedError::BadResponse(format!("item {pos} has no embedding")))?;
        let vec: Vec<f32> = emb
            .iter()
            .map(|x| x.as_f64().map(|f| f as f32))
            .collect::<Option<_>>()
            .ok_or_else(|| EmbedError::BadResponse(format!("item {pos} has a non-numeric component")))?;
        let slot = out.get_mut(index).ok_or_else(|| EmbedError::BadResponse(format!("index {index} out of range")))?;
        if slot.replace(vec).is_some() {
            return Err(EmbedError::BadResponse(format!("index {index} repeated")));
        }
    }
    out.into_iter()
        .enumerate()
        .map(|(i, v)| v.ok_or_else(|| EmbedError::BadResponse(format!("missing index {i}"))))
        .collect()
}
