//! Interfaces to the external model services.
//!
//! Every model (detector, image/text embedder, image generator, prompt
//! rewriter, logprob scorer) is reached through a [`Transport`] that moves
//! versioned JSON bodies to a named [`Endpoint`]. Two transports ship here:
//! [`FixtureTransport`] replays canned responses keyed by
//! [`canonical_key`], and [`HttpTransport`] POSTs to running services.
//! [`Clients`] wraps either one with typed request/response methods and
//! response validation, so the pipelines never touch JSON directly.

mod fixture;
mod http;
mod key;

use std::path::Path;
use std::sync::Arc;

use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{from_value_at, Error, Result};
use crate::label::{is_unit, Crop};
use crate::mask::{Detection, DetectionSet};

pub use fixture::{FixtureTransport, RecordingTransport};
pub use http::{HttpConfig, HttpTransport};
pub use key::{canonical_json, canonical_key, canonical_request_key};

/// Wire schema version carried by every request and response body.
pub const SCHEMA_VERSION: u32 = 1;

fn schema_v1() -> u32 {
    SCHEMA_VERSION
}

/// Backing service of an endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Service {
    Detector,
    Embedder,
    Generator,
    Rewriter,
    Scorer,
}

impl Service {
    pub const ALL: [Service; 5] = [
        Service::Detector,
        Service::Embedder,
        Service::Generator,
        Service::Rewriter,
        Service::Scorer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Service::Detector => "detector",
            Service::Embedder => "embedder",
            Service::Generator => "generator",
            Service::Rewriter => "rewriter",
            Service::Scorer => "scorer",
        }
    }

    /// Environment variable holding the service base URL.
    pub fn env_var(self) -> &'static str {
        match self {
            Service::Detector => "CFSIZE_DETECTOR_URL",
            Service::Embedder => "CFSIZE_EMBEDDER_URL",
            Service::Generator => "CFSIZE_GENERATOR_URL",
            Service::Rewriter => "CFSIZE_REWRITER_URL",
            Service::Scorer => "CFSIZE_SCORER_URL",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Endpoint {
    Detect,
    EmbedCrop,
    ClipSim,
    Generate,
    Rewrite,
    ScoreLogprob,
}

impl Endpoint {
    pub const ALL: [Endpoint; 6] = [
        Endpoint::Detect,
        Endpoint::EmbedCrop,
        Endpoint::ClipSim,
        Endpoint::Generate,
        Endpoint::Rewrite,
        Endpoint::ScoreLogprob,
    ];

    /// Path segment, also used as the fixture subdirectory.
    pub fn name(self) -> &'static str {
        match self {
            Endpoint::Detect => "detect",
            Endpoint::EmbedCrop => "embed_crop",
            Endpoint::ClipSim => "clip_sim",
            Endpoint::Generate => "generate",
            Endpoint::Rewrite => "rewrite",
            Endpoint::ScoreLogprob => "score_logprob",
        }
    }

    pub fn path(self) -> String {
        format!("/{}", self.name())
    }

    pub fn service(self) -> Service {
        match self {
            Endpoint::Detect => Service::Detector,
            Endpoint::EmbedCrop | Endpoint::ClipSim => Service::Embedder,
            Endpoint::Generate => Service::Generator,
            Endpoint::Rewrite => Service::Rewriter,
            Endpoint::ScoreLogprob => Service::Scorer,
        }
    }
}

/// Moves one JSON request body to an endpoint and returns the response body.
pub trait Transport: Send + Sync {
    fn call(&self, endpoint: Endpoint, body: &Value) -> Result<Value>;
}

impl<T: Transport + ?Sized> Transport for Arc<T> {
    fn call(&self, endpoint: Endpoint, body: &Value) -> Result<Value> {
        (**self).call(endpoint, body)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectRequest {
    pub version: u32,
    pub image_ref: String,
    pub query_labels: Vec<String>,
    pub box_threshold: f64,
    pub text_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectResponse {
    #[serde(default = "schema_v1")]
    pub version: u32,
    #[serde(flatten)]
    pub set: DetectionSet,
}

/// Crop pixels travel as base64 of packed row-major RGB bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedCropRequest {
    pub version: u32,
    pub width: u32,
    pub height: u32,
    pub rgb_base64: String,
}

impl EmbedCropRequest {
    pub fn from_crop(crop: &Crop) -> Self {
        Self {
            version: SCHEMA_VERSION,
            width: crop.width(),
            height: crop.height(),
            rgb_base64: base64::engine::general_purpose::STANDARD.encode(crop.as_raw()),
        }
    }

    /// Decode the pixel payload back into a crop.
    pub fn to_crop(&self) -> Result<Crop> {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&self.rgb_base64)
            .map_err(|e| Error::schema("embed_crop request", format!("field `rgb_base64`: {e}")))?;
        image::RgbImage::from_raw(self.width, self.height, bytes)
            .map(Crop)
            .ok_or_else(|| {
                Error::schema("embed_crop request", "field `rgb_base64`: length does not match width*height*3")
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedCropResponse {
    #[serde(default = "schema_v1")]
    pub version: u32,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipSimRequest {
    pub version: u32,
    pub image_ref: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipSimResponse {
    #[serde(default = "schema_v1")]
    pub version: u32,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub version: u32,
    pub prompt: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    #[serde(default = "schema_v1")]
    pub version: u32,
    pub image_ref: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteRequest {
    pub version: u32,
    pub base_prompt: String,
    pub n_candidates: usize,
    pub temperature: f64,
    pub top_p: f64,
    /// Few-shot exemplars forwarded verbatim to the rewriter.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub few_shot: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteCandidate {
    pub text: String,
    pub total_logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteResponse {
    #[serde(default = "schema_v1")]
    pub version: u32,
    pub candidates: Vec<RewriteCandidate>,
}

/// Which language model a logprob is requested from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoringModel {
    Policy,
    Reference,
    Ranker,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub version: u32,
    pub model: ScoringModel,
    pub context_prompt: String,
    pub completion: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    #[serde(default = "schema_v1")]
    pub version: u32,
    pub total_logprob: f64,
}

/// Typed facade over a [`Transport`].
#[derive(Clone)]
pub struct Clients {
    transport: Arc<dyn Transport>,
}

impl std::fmt::Debug for Clients {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Clients").finish_non_exhaustive()
    }
}

fn check_version(endpoint: Endpoint, version: u32) -> Result<()> {
    if version != SCHEMA_VERSION {
        return Err(Error::schema(
            format!("{} response", endpoint.name()),
            format!("field `version`: unsupported version {version}"),
        ));
    }
    Ok(())
}

impl Clients {
    pub fn new<T: Transport + 'static>(transport: T) -> Self {
        Self {
            transport: Arc::new(transport),
        }
    }

    pub fn from_arc(transport: Arc<dyn Transport>) -> Self {
        Self { transport }
    }

    /// Replay canned responses from `root/<endpoint>/<key>.json`.
    pub fn fixtures(root: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::new(FixtureTransport::open(root)?))
    }

    pub fn http(config: HttpConfig) -> Result<Self> {
        Ok(Self::new(HttpTransport::new(config)?))
    }

    pub fn transport(&self) -> &Arc<dyn Transport> {
        &self.transport
    }

    fn request<Req: Serialize, Resp: DeserializeOwned>(&self, endpoint: Endpoint, req: &Req) -> Result<Resp> {
        let body = serde_json::to_value(req)?;
        let response = self.transport.call(endpoint, &body)?;
        from_value_at(&format!("{} response", endpoint.name()), response)
    }

    /// Run the detector and decode its masks.
    pub fn detect(&self, req: &DetectRequest) -> Result<Vec<Detection>> {
        let resp: DetectResponse = self.request(Endpoint::Detect, req)?;
        check_version(Endpoint::Detect, resp.version)?;
        resp.set.decode()
    }

    /// Embed a crop; the returned vector has unit norm.
    pub fn embed_crop(&self, crop: &Crop) -> Result<Vec<f64>> {
        let resp: EmbedCropResponse = self.request(Endpoint::EmbedCrop, &EmbedCropRequest::from_crop(crop))?;
        check_version(Endpoint::EmbedCrop, resp.version)?;
        if resp.vector.is_empty() || resp.vector.iter().any(|x| !x.is_finite()) || !is_unit(&resp.vector) {
            return Err(Error::schema("embed_crop response", "field `vector`: not a finite unit vector"));
        }
        Ok(resp.vector)
    }

    /// Image-text cosine similarity.
    pub fn clip_sim(&self, image_ref: &str, text: &str) -> Result<f64> {
        let req = ClipSimRequest {
            version: SCHEMA_VERSION,
            image_ref: image_ref.to_string(),
            text: text.to_string(),
        };
        let resp: ClipSimResponse = self.request(Endpoint::ClipSim, &req)?;
        check_version(Endpoint::ClipSim, resp.version)?;
        if !(-1.0..=1.0).contains(&resp.similarity) {
            return Err(Error::schema(
                "clip_sim response",
                format!("field `similarity`: {} outside [-1,1]", resp.similarity),
            ));
        }
        Ok(resp.similarity)
    }

    pub fn generate(&self, prompt: &str, seed: u64) -> Result<String> {
        let req = GenerateRequest {
            version: SCHEMA_VERSION,
            prompt: prompt.to_string(),
            seed,
        };
        let resp: GenerateResponse = self.request(Endpoint::Generate, &req)?;
        check_version(Endpoint::Generate, resp.version)?;
        if resp.image_ref.is_empty() {
            return Err(Error::schema("generate response", "field `image_ref`: empty"));
        }
        Ok(resp.image_ref)
    }

    pub fn rewrite(&self, req: &RewriteRequest) -> Result<Vec<RewriteCandidate>> {
        let resp: RewriteResponse = self.request(Endpoint::Rewrite, req)?;
        check_version(Endpoint::Rewrite, resp.version)?;
        if let Some(i) = resp.candidates.iter().position(|c| !c.total_logprob.is_finite()) {
            return Err(Error::schema(
                "rewrite response",
                format!("field `candidates[{i}].total_logprob`: not finite"),
            ));
        }
        if resp.candidates.len() != req.n_candidates {
            log::warn!(
                "rewriter returned {} candidates, {} requested",
                resp.candidates.len(),
                req.n_candidates
            );
        }
        Ok(resp.candidates)
    }

    /// Total logprob of `completion` given `context_prompt` under `model`.
    pub fn score_logprob(&self, model: ScoringModel, context_prompt: &str, completion: &str) -> Result<f64> {
        let req = ScoreRequest {
            version: SCHEMA_VERSION,
            model,
            context_prompt: context_prompt.to_string(),
            completion: completion.to_string(),
        };
        let resp: ScoreResponse = self.request(Endpoint::ScoreLogprob, &req)?;
        check_version(Endpoint::ScoreLogprob, resp.version)?;
        if !resp.total_logprob.is_finite() {
            return Err(Error::schema("score_logprob response", "field `total_logprob`: not finite"));
        }
        Ok(resp.total_logprob)
    }
}
