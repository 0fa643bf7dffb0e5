use std::path::Path;
use std::sync::Arc;

use base64::Engine;
use chrono::Utc;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendKind, DegeneratePolicy, GenError, GenerationRecord, GenerationRequest, GenerationStatus};
use crate::http::{post_with_retry, CallError, JsonTransport, RetryPolicy, UreqTransport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiveConfig {
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
}

impl Default for LiveConfig {
    fn default() -> Self {
        LiveConfig {
            endpoint: "https://api.openai.com/v1/chat/completions".to_string(),
            model: "gpt-4o-mini".to_string(),
            api_key_env: "OPENAI_API_KEY".to_string(),
        }
    }
}

pub struct ChatClient {
    config: LiveConfig,
    api_key: String,
    retry: RetryPolicy,
    transport: Arc<dyn JsonTransport>,
}

impl ChatClient {
    /// Reads the credential from the configured environment variable.
    pub fn from_env(config: LiveConfig, retry: RetryPolicy) -> Result<Self, GenError> {
        let api_key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| GenError::MissingCredential(config.api_key_env.clone()))?;
        Ok(Self::with_transport(config, api_key, retry, Arc::new(UreqTransport::default())))
    }

    pub fn with_transport(
        config: LiveConfig,
        api_key: String,
        retry: RetryPolicy,
        transport: Arc<dyn JsonTransport>,
    ) -> Self {
        ChatClient { config, api_key, retry, transport }
    }

    pub fn model(&self) -> &str {
        &self.config.model
    }

    pub fn request_body(&self, req: &GenerationRequest) -> Result<Value, GenError> {
        let image_url = image_url(&req.stimulus.stimulus_ref)?;
        Ok(json!({
            "model": self.config.model,
            "messages": [
                { "role": "system", "content": req.system_prompt },
                { "role": "user", "content": [
                    { "type": "text", "text": req.user_prompt },
                    { "type": "image_url", "image_url": { "url": image_url } },
                ]},
            ],
            "temperature": req.temperature,
            "top_p": req.top_p,
            "max_tokens": req.max_tokens,
        }))
    }

    /// One story. `Err` is reserved for failures that must abort the run;
    /// exhausted retries come back as a `Failed` record.
    pub fn generate(&self, req: GenerationRequest, policy: &DegeneratePolicy) -> Result<GenerationRecord, GenError> {
        let body = self.request_body(&req)?;
        let outcome = post_with_retry(&*self.transport, &self.config.endpoint, Some(&self.api_key), &body, &self.retry);
        let (text, status) = match outcome {
            Ok(raw) => match parse_completion(&raw) {
                Ok(Completion { text, refused: true }) => (text, GenerationStatus::Refused),
                Ok(Completion { text, refused: false }) => {
                    let status = policy.classify(&text);
                    (text, status)
                }
                Err(e) => (e.to_string(), GenerationStatus::Failed),
            },
            Err(e @ CallError::Auth { .. }) => return Err(e.into()),
            Err(e) => (e.to_string(), GenerationStatus::Failed),
        };
        let story = if status == GenerationStatus::Failed { String::new() } else { text };
        Ok(GenerationRecord::new(req, story, BackendKind::Live, &self.config.model, Utc::now(), status))
    }
}

struct Completion {
    text: String,
    refused: bool,
}

fn parse_completion(raw: &str) -> Result<Completion, GenError> {
    let v: Value = serde_json::from_str(raw).map_err(|e| GenError::BadResponse(e.to_string()))?;
    let choice = v
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| GenError::BadResponse("no choices".into()))?;
    let message = choice.get("message").ok_or_else(|| GenError::BadResponse("no message".into()))?;
    let refusal = message.get("refusal").and_then(Value::as_str).filter(|s| !s.is_empty());
    let filtered = choice.get("finish_reason").and_then(Value::as_str) == Some("content_filter");
    let text = message.get("content").and_then(Value::as_str).unwrap_or_default().trim().to_string();
    Ok(match refusal {
        Some(r) => Completion { text: r.to_string(), refused: true },
        None => Completion { text, refused: filtered },
    })
}

/// URLs pass through; local files are inlined as base64 data URLs.
fn image_url(stimulus_ref: &str) -> Result<String, GenError> {
    if ["http://", "https://", "data:"].iter().any(|p| stimulus_ref.starts_with(p)) {
        return Ok(stimulus_ref.to_string());
    }
    let path = Path::new(stimulus_ref);
    let bytes = std::fs::read(path).map_err(|e| GenError::Stimulus(stimulus_ref.to_string(), e.to_string()))?;
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("jpg") | Some("jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        Some("gif") => "image/gif",
        _ => "image/png",
    };
    Ok(format!("data:{mime};base64,{}", base64::engine::general_purpose::STANDARD.encode(bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refusal_and_content_filter() {
        let c = parse_completion(r#"{"choices":[{"message":{"content":"A story.","refusal":null},"finish_reason":"stop"}]}"#).unwrap();
        assert!(!c.refused);
        assert_eq!(c.text, "A story.");
        let c = parse_completion(r#"{"choices":[{"message":{"content":null,"refusal":"I can't help"}}]}"#).unwrap();
        assert!(c.refused);
        let c = parse_completion(r#"{"choices":[{"message":{"content":""},"finish_reason":"content_filter"}]}"#).unwrap();
        assert!(c.refused);
        assert!(parse_completion("{}").is_err());
    }

    #[test]
    fn image_refs() {
        assert_eq!(image_url("https://x/y.png").unwrap(), "https://x/y.png");
        assert!(image_url("/definitely/missing.png").is_err());
        let dir = std::env::temp_dir().join(format!("hb-img-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("face.jpg");
        std::fs::write(&p, [1u8, 2, 3]).unwrap();
        assert_eq!(image_url(p.to_str().unwrap()).unwrap(), "data:image/jpeg;base64,AQID");
        std::fs::remove_dir_all(dir).unwrap();
    }
}
