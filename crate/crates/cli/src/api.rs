//! Request and response schemas of the generation service (`api-v1`).

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use pmg_core::config::SamplingConfig;
use pmg_core::{GenerationRequest, InpaintRequest, KeyframeSpec, Model, PmgError, Sampler};

pub const API_VERSION: &str = "api-v1";
pub const API_VERSION_HEADER: &str = "x-api-version";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateBody {
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub keyframes: Vec<KeyframeSpec>,
    pub length: usize,
    pub stages: Option<usize>,
    pub guidance: Option<f64>,
    pub sampler: Option<Sampler>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InpaintBody {
    #[serde(default)]
    pub text: String,
    /// Motion file document.
    pub motion: Value,
    pub keep: Vec<bool>,
    pub stages: Option<usize>,
    pub guidance: Option<f64>,
    pub sampler: Option<Sampler>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FromMotionBody {
    pub motion: Value,
    /// 1-based frame positions.
    pub indices: Vec<usize>,
}

/// A client error tied to a request field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub status: u16,
    pub field: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub completed_stages: Option<usize>,
}

impl ApiError {
    pub fn new(status: u16, field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            status,
            field: field.into(),
            message: message.into(),
            completed_stages: None,
        }
    }

    pub fn bad_request(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::new(400, field, message)
    }

    /// Maps a core error raised while handling a request. `prefix` is prepended to
    /// motion-document fields.
    pub fn from_core(err: PmgError, motion_prefix: &str) -> Self {
        let msg = err.to_string();
        match err {
            PmgError::Schema { field, reason } => {
                let field = if field.starts_with("frames") || field == "fps" || field == "skeleton" || field == "$" {
                    join(motion_prefix, &field)
                } else {
                    field
                };
                Self::bad_request(field, reason)
            }
            PmgError::NothingToGenerate => Self::new(409, "keyframes", msg),
            PmgError::DuplicatePosition(_) => Self::bad_request("keyframes", msg),
            PmgError::InvalidPosition { .. } => Self::bad_request("keyframes", msg),
            PmgError::UnknownToken(_) | PmgError::PromptTooLong(_) | PmgError::TokenOutOfRange { .. } => {
                Self::bad_request("text", msg)
            }
            PmgError::StageOutOfRange { .. } | PmgError::Config(_) => Self::bad_request("stages", msg),
            PmgError::InvalidMotion(_) | PmgError::InvalidSkeleton(_) => Self::bad_request(join(motion_prefix, "$"), msg),
            PmgError::Aborted { completed_stages } => Self {
                completed_stages: Some(completed_stages),
                ..Self::new(504, "$", "request timed out between diffusion steps")
            },
            other => Self::new(500, "$", other.to_string()),
        }
    }
}

fn join(prefix: &str, field: &str) -> String {
    match (prefix.is_empty(), field) {
        (true, f) => f.to_string(),
        (false, "$") => prefix.to_string(),
        (false, f) => format!("{prefix}.{f}"),
    }
}

/// Deserializes `bytes`, naming the offending path on failure.
pub fn parse_body<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { "$".to_string() } else { path };
        ApiError::bad_request(field, e.inner().to_string())
    })
}

impl GenerateBody {
    pub fn into_request(self, model: &Model, defaults: &SamplingConfig) -> Result<GenerationRequest, ApiError> {
        let text = model
            .vocab
            .tokenize(&self.text)
            .map_err(|e| ApiError::from_core(e, ""))?;
        Ok(GenerationRequest {
            text,
            keyframes: self.keyframes,
            length: self.length,
            stages: self.stages.unwrap_or(defaults.stages),
            guidance: self.guidance.unwrap_or(defaults.guidance),
            sampler: self.sampler.unwrap_or(defaults.sampler),
            seed: self.seed,
        })
    }
}

impl InpaintBody {
    pub fn into_request(self, model: &Model, defaults: &SamplingConfig) -> Result<(Value, InpaintRequest), ApiError> {
        let text = model
            .vocab
            .tokenize(&self.text)
            .map_err(|e| ApiError::from_core(e, ""))?;
        if self.stages == Some(0) {
            return Err(ApiError::bad_request("stages", "must be at least 1"));
        }
        if let Some(g) = self.guidance.filter(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(ApiError::bad_request("guidance", format!("{g} is not finite and non-negative")));
        }
        if let Some(Sampler::Fast { steps }) = self.sampler {
            if steps == 0 || steps > model.schedule.steps() {
                return Err(ApiError::bad_request(
                    "sampler.steps",
                    format!("must lie in 1..={}", model.schedule.steps()),
                ));
            }
        }
        Ok((
            self.motion,
            InpaintRequest {
                text,
                keep: self.keep,
                stages: self.stages.unwrap_or(defaults.stages),
                guidance: self.guidance.unwrap_or(defaults.guidance),
                sampler: self.sampler.unwrap_or(defaults.sampler),
                seed: self.seed,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_errors_name_the_path() {
        let err = parse_body::<GenerateBody>(br#"{"length": 10, "keyframes": [{"position": "x"}]}"#).unwrap_err();
        assert_eq!(err.status, 400);
        assert_eq!(err.field, "keyframes[0].position");
        let err = parse_body::<GenerateBody>(br#"{"length": 10, "bogus": 1}"#).unwrap_err();
        assert_eq!(err.field, "bogus");
        let err = parse_body::<GenerateBody>(b"{").unwrap_err();
        assert_eq!(err.status, 400);
    }

    #[test]
    fn core_errors_map_to_statuses() {
        assert_eq!(ApiError::from_core(PmgError::NothingToGenerate, "").status, 409);
        let e = ApiError::from_core(PmgError::Aborted { completed_stages: 2 }, "");
        assert_eq!((e.status, e.completed_stages), (504, Some(2)));
        let e = ApiError::from_core(PmgError::schema("frames[3]", "bad"), "motion");
        assert_eq!(e.field, "motion.frames[3]");
        let e = ApiError::from_core(PmgError::schema("keyframes[1].position", "bad"), "motion");
        assert_eq!(e.field, "keyframes[1].position");
    }
}
