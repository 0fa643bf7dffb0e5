//! Story generation against a live chat-completion endpoint or the
//! deterministic simulator.

mod live;
mod simulator;

use std::collections::HashSet;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;

use chrono::{DateTime, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::{Gender, GenerationKey, Knob, Race, Setting, Stimulus, StudyPlan};
use crate::http::CallError;

pub use live::{ChatClient, LiveConfig};
pub use simulator::{simulate_story, HomogeneityCurve, HomogeneityTable, SimulatorConfig};

/// Default in-flight request budget for live backends.
pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("simulator backend requires a seed")]
    MissingSeed,
    #[error("no homogeneity entry for {race} {gender} under {knob}")]
    UnknownGroup { race: Race, gender: Gender, knob: Knob },
    #[error("invalid homogeneity table: {0}")]
    BadHomogeneity(String),
    #[error("temperature={temperature} and top_p={top_p} both deviate from their defaults; adjust one knob at a time")]
    BothKnobsAdjusted { temperature: f64, top_p: f64 },
    #[error("credential environment variable {0} is not set")]
    MissingCredential(String),
    #[error(transparent)]
    Call(#[from] CallError),
    #[error("malformed endpoint response: {0}")]
    BadResponse(String),
    #[error("stimulus {0}: {1}")]
    Stimulus(String, String),
    #[error("record sink failed: {0}")]
    Sink(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Live,
    Simulated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationStatus {
    Ok,
    Refused,
    Degenerate,
    /// Transport failure after the retry budget. Never written to a corpus,
    /// so a resumed run retries the key.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub stimulus: Stimulus,
    pub knob: Knob,
    pub setting: Setting,
    pub replicate_index: u32,
    pub temperature: f64,
    pub top_p: f64,
    pub system_prompt: String,
    pub user_prompt: String,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl GenerationRequest {
    /// Build the request for one plan entry. Rejects sampling pairs where
    /// both temperature and top-p leave their defaults.
    pub fn from_plan(plan: &StudyPlan, index: usize, seed: Option<u64>) -> Result<Self, GenError> {
        let item = &plan.items[index];
        let (temperature, top_p) = plan.sweep.sampling_pair(item.setting);
        if temperature != Knob::Temperature.default_value() && top_p != Knob::TopP.default_value() {
            return Err(GenError::BothKnobsAdjusted { temperature, top_p });
        }
        Ok(GenerationRequest {
            stimulus: plan.stimuli[item.stimulus].clone(),
            knob: plan.sweep.knob,
            setting: item.setting,
            replicate_index: item.replicate,
            temperature,
            top_p,
            system_prompt: plan.design.system_prompt.clone(),
            user_prompt: plan.design.user_prompt.clone(),
            max_tokens: plan.design.max_tokens,
            seed,
        })
    }

    pub fn key(&self) -> GenerationKey {
        GenerationKey {
            knob: self.knob,
            setting: self.setting,
            set_id: self.stimulus.set_id,
            race: self.stimulus.race,
            gender: self.stimulus.gender,
            replicate: self.replicate_index,
        }
    }
}

/// One generated story with full provenance. Request fields are flattened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub set_id: u32,
    pub race: Race,
    pub gender: Gender,
    pub stimulus_ref: String,
    pub knob: Knob,
    pub setting: Setting,
    pub replicate_index: u32,
    pub temperature: f64,
    pub top_p: f64,
    pub system_prompt: String,
    pub user_prompt: String,
    pub max_tokens: u32,
    pub seed: Option<u64>,
    pub story_text: String,
    pub backend: BackendKind,
    pub model_id: String,
    pub created_at: DateTime<Utc>,
    pub status: GenerationStatus,
}

impl GenerationRecord {
    pub fn new(
        req: GenerationRequest,
        story_text: String,
        backend: BackendKind,
        model_id: &str,
        created_at: DateTime<Utc>,
        status: GenerationStatus,
    ) -> Self {
        GenerationRecord {
            set_id: req.stimulus.set_id,
            race: req.stimulus.race,
            gender: req.stimulus.gender,
            stimulus_ref: req.stimulus.stimulus_ref,
            knob: req.knob,
            setting: req.setting,
            replicate_index: req.replicate_index,
            temperature: req.temperature,
            top_p: req.top_p,
            system_prompt: req.system_prompt,
            user_prompt: req.user_prompt,
            max_tokens: req.max_tokens,
            seed: req.seed,
            story_text,
            backend,
            model_id: model_id.to_string(),
            created_at,
            status,
        }
    }

    pub fn key(&self) -> GenerationKey {
        GenerationKey {
            knob: self.knob,
            setting: self.setting,
            set_id: self.set_id,
            race: self.race,
            gender: self.gender,
            replicate: self.replicate_index,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == GenerationStatus::Ok
    }
}

/// Word budget used to flag runaway output as degenerate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegeneratePolicy {
    /// Words the prompt asks for.
    pub max_words: usize,
    /// Stories longer than `factor * max_words` words are degenerate.
    pub factor: usize,
}

impl Default for DegeneratePolicy {
    fn default() -> Self {
        DegeneratePolicy { max_words: 50, factor: 3 }
    }
}

impl DegeneratePolicy {
    pub fn classify(&self, text: &str) -> GenerationStatus {
        let words = text.split_whitespace().count();
        if words == 0 || words > self.factor * self.max_words {
            GenerationStatus::Degenerate
        } else {
            GenerationStatus::Ok
        }
    }
}

pub enum Backend {
    Simulated { config: SimulatorConfig, seed: Option<u64> },
    Live { client: ChatClient, max_in_flight: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub planned: usize,
    pub skipped: usize,
    pub ok: usize,
    pub refused: usize,
    pub degenerate: usize,
    pub failed: usize,
}

impl BatchSummary {
    pub fn emitted(&self) -> usize {
        self.ok + self.refused + self.degenerate + self.failed
    }

    fn count(&mut self, status: GenerationStatus) {
        match status {
            GenerationStatus::Ok => self.ok += 1,
            GenerationStatus::Refused => self.refused += 1,
            GenerationStatus::Degenerate => self.degenerate += 1,
            GenerationStatus::Failed => self.failed += 1,
        }
    }
}

/// Generate every planned story whose key is not in `existing`, handing
/// each record to `sink` in turn.
///
/// The simulator emits in plan order; live records arrive in completion
/// order. An authentication failure aborts the run; other per-request
/// failures are emitted with status `Failed` and the run continues.
pub fn generate_batch<F>(
    plan: &StudyPlan,
    backend: &Backend,
    policy: &DegeneratePolicy,
    existing: &HashSet<GenerationKey>,
    mut sink: F,
) -> Result<BatchSummary, GenError>
where
    F: FnMut(GenerationRecord) -> Result<(), GenError>,
{
    let mut summary = BatchSummary { planned: plan.len(), ..Default::default() };
    let pending: Vec<usize> = (0..plan.len()).filter(|&i| !existing.contains(&plan.key(&plan.items[i]))).collect();
    summary.skipped = plan.len() - pending.len();

    match backend {
        Backend::Simulated { config, seed } => {
            let seed = seed.ok_or(GenError::MissingSeed)?;
            const CHUNK: usize = 512;
            for chunk in pending.chunks(CHUNK) {
                let records: Vec<GenerationRecord> = chunk
                    .par_iter()
                    .map(|&i| {
                        let req = GenerationRequest::from_plan(plan, i, Some(seed))?;
                        let text = simulate_story(&req, config)?;
                        let status = policy.classify(&text);
                        Ok(GenerationRecord::new(
                            req,
                            text,
                            BackendKind::Simulated,
                            simulator::MODEL_ID,
                            DateTime::<Utc>::UNIX_EPOCH,
                            status,
                        ))
                    })
                    .collect::<Result<_, GenError>>()?;
                for rec in records {
                    summary.count(rec.status);
                    sink(rec)?;
                }
            }
        }
        Backend::Live { client, max_in_flight } => {
            let requests: Vec<GenerationRequest> = pending
                .iter()
                .map(|&i| GenerationRequest::from_plan(plan, i, None))
                .collect::<Result<_, _>>()?;
            let next = AtomicUsize::new(0);
            let abort = AtomicBool::new(false);
            let workers = (*max_in_flight).max(1).min(requests.len().max(1));
            let (tx, rx) = mpsc::sync_channel::<Result<GenerationRecord, GenError>>(workers * 2);
            let fatal = std::thread::scope(|scope| {
                for _ in 0..workers {
                    let tx = tx.clone();
                    let (next, abort, requests) = (&next, &abort, &requests);
                    scope.spawn(move || loop {
                        if abort.load(Ordering::Relaxed) {
                            break;
                        }
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some(req) = requests.get(i) else { break };
                        let outcome = client.generate(req.clone(), policy);
                        if outcome.is_err() {
                            abort.store(true, Ordering::Relaxed);
                        }
                        if tx.send(outcome).is_err() {
                            break;
                        }
                    });
                }
                drop(tx);
                let mut fatal = None;
                for outcome in rx {
                    match outcome {
                        Ok(rec) => {
                            summary.count(rec.status);
                            if let Err(e) = sink(rec) {
                                abort.store(true, Ordering::Relaxed);
                                fatal.get_or_insert(e);
                            }
                        }
                        Err(e) => {
                            fatal.get_or_insert(e);
                        }
                    }
                }
                fatal
            });
            if let Some(e) = fatal {
                return Err(e);
            }
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{validate_design, StudyDesign, SweepSpec};

    #[test]
    fn degenerate_policy() {
        let p = DegeneratePolicy::default();
        assert_eq!(p.classify("   "), GenerationStatus::Degenerate);
        assert_eq!(p.classify("a short story"), GenerationStatus::Ok);
        let long = vec!["w"; 151].join(" ");
        assert_eq!(p.classify(&long), GenerationStatus::Degenerate);
        let edge = vec!["w"; 150].join(" ");
        assert_eq!(p.classify(&edge), GenerationStatus::Ok);
    }

    #[test]
    fn both_knobs_adjusted_rejected() {
        let design = StudyDesign::balanced(1, 1);
        let mut sweep = SweepSpec::top_p();
        sweep.fixed_other = 0.7;
        let plan = validate_design(&design, &sweep).unwrap();
        let err = GenerationRequest::from_plan(&plan, 0, None).unwrap_err();
        assert!(matches!(err, GenError::BothKnobsAdjusted { .. }));
        // at the default setting only one knob is pinned away from 1.0
        let last = plan.len() - 1;
        assert!(GenerationRequest::from_plan(&plan, last, None).is_ok());
    }

    #[test]
    fn simulator_requires_seed() {
        let plan = validate_design(&StudyDesign::balanced(1, 1), &SweepSpec::temperature()).unwrap();
        let backend = Backend::Simulated { config: SimulatorConfig::default(), seed: None };
        let err = generate_batch(&plan, &backend, &DegeneratePolicy::default(), &HashSet::new(), |_| Ok(())).unwrap_err();
        assert!(matches!(err, GenError::MissingSeed));
    }
}
