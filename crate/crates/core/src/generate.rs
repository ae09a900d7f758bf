//! Prompt rendering and rationale generators.
//!
//! Three prompts drive an MLLM: scene-graph extraction, a positive
//! chain-of-thought conditioned on image and graph, and a negative one
//! conditioned on the graph alone. The negative prompt never carries the
//! gold answer or the image.
//!
//! [`TemplateGenerator`] is an offline stand-in whose rationales linearize
//! the graph, so grounding them recovers graph elements. With the `http`
//! feature, [`HttpChatGenerator`] talks to an OpenAI-style chat endpoint.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diag::Diagnostic;
use crate::grounding::Rationale;
use crate::sample::FORMAT_EXAMPLE;
use crate::scene_graph::{serialize_scene_graph, SceneGraph};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GenerateError {
    #[error("instance {0:?} has no gold answer")]
    MissingAnswer(String),
    #[error("remote error{}: {body}", status.map(|s| format!(" (status {s})")).unwrap_or_default())]
    RemoteError { status: Option<u16>, body: String },
    #[error("generation request timed out")]
    Timeout,
    #[error("unparseable response: {0}")]
    UnparseableResponse(String),
    #[error("{0}")]
    Unsupported(String),
    #[error("invalid generator configuration: {0}")]
    InvalidConfig(String),
    #[error("response cache: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    /// Opaque path or URL, never opened except to attach it to a request.
    pub image: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

impl Instance {
    fn gold(&self) -> Result<&str, GenerateError> {
        self.answer
            .as_deref()
            .ok_or_else(|| GenerateError::MissingAnswer(self.id.clone()))
    }
}

const SCENE_GRAPH_PROMPT: &str = "You are given an image and its associated question.
Your task is to generate a scene graph in strict JSON format that includes the following three fields:
1. \"entity\": a list of all objects and concepts relevant to answering the question.
2. \"attribute pairs\": a list of [object, attribute] pairs describing each entity\u{2019}s key features (e.g., color, size, state).
3. \"relationships\": a list of [subject, relation, object] triples describing spatial or semantic relationships.

Format Example:
{format_example}

Attention:
1. Only return a valid JSON object with the three required fields.
2. Do not include any explanations or natural language text.
3. Ensure the format strictly matches the example above.

Question: {question}, {answer}

Scene Graph:";

const COT_FORMAT: &str = "Format Example:
1. ...
2. ...
3. ...
4. ...
Conclusion: ...";

const POSITIVE_PROMPT: &str = "You are given a scene graph and its associated question and image.
Your task is to provide step-by-step reasoning to answer the question based on the image and scene graph.
Do not mention the data source.
Treat the scene graph elements as the visual scene itself.

{cot_format}

Scene Graph: {scene_graph}

Question: {question}, {answer}

Step-by-step reasoning:";

const NEGATIVE_PROMPT: &str = "You are given a scene graph and its associated question.
Your task is to provide step-by-step reasoning to answer the question based on the scene graph.
Do not mention the data source.
Treat the scene graph elements as the visual scene itself.

{cot_format}

Scene Graph: {scene_graph}

Question: {question}

Step-by-step reasoning:";

fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    // single pass so that slot values containing braces are left alone
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let tail = &rest[start..];
        match slots.iter().find(|(k, _)| tail[1..].starts_with(k) && tail[1 + k.len()..].starts_with('}')) {
            Some((k, v)) => {
                out.push_str(v);
                rest = &tail[k.len() + 2..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

pub fn render_scene_graph_prompt(inst: &Instance) -> Result<String, GenerateError> {
    let answer = inst.gold()?;
    Ok(fill(
        SCENE_GRAPH_PROMPT,
        &[("format_example", FORMAT_EXAMPLE), ("question", &inst.question), ("answer", answer)],
    ))
}

pub fn render_positive_cot_prompt(sg_pos: &SceneGraph, inst: &Instance) -> Result<String, GenerateError> {
    let answer = inst.gold()?;
    let graph = serialize_scene_graph(sg_pos, false);
    Ok(fill(
        POSITIVE_PROMPT,
        &[
            ("cot_format", COT_FORMAT),
            ("scene_graph", &graph),
            ("question", &inst.question),
            ("answer", answer),
        ],
    ))
}

pub fn render_negative_cot_prompt(sg_neg: &SceneGraph, inst: &Instance) -> String {
    let graph = serialize_scene_graph(sg_neg, false);
    fill(
        NEGATIVE_PROMPT,
        &[("cot_format", COT_FORMAT), ("scene_graph", &graph), ("question", &inst.question)],
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Polarity {
    Positive,
    Negative,
}

/// Everything a generator may use to produce one rationale. HTTP backends
/// send `prompt` (plus `image`); the template backend reads the graph.
#[derive(Debug, Clone, PartialEq)]
pub struct RationaleRequest {
    pub polarity: Polarity,
    pub prompt: String,
    pub graph: SceneGraph,
    pub question: String,
    pub answer: Option<String>,
    pub image: Option<String>,
}

impl RationaleRequest {
    pub fn positive(sg_pos: &SceneGraph, inst: &Instance) -> Result<Self, GenerateError> {
        Ok(Self {
            polarity: Polarity::Positive,
            prompt: render_positive_cot_prompt(sg_pos, inst)?,
            graph: sg_pos.clone(),
            question: inst.question.clone(),
            answer: inst.answer.clone(),
            image: Some(inst.image.clone()),
        })
    }

    pub fn negative(sg_neg: &SceneGraph, inst: &Instance) -> Self {
        Self {
            polarity: Polarity::Negative,
            prompt: render_negative_cot_prompt(sg_neg, inst),
            graph: sg_neg.clone(),
            question: inst.question.clone(),
            answer: None,
            image: None,
        }
    }
}

pub trait Generator: Send + Sync {
    /// Raw completion for a rationale request.
    fn rationale_text(&self, req: &RationaleRequest) -> Result<String, GenerateError>;

    /// Raw completion for the scene-graph prompt.
    fn scene_graph_text(&self, prompt: &str, image: &str) -> Result<String, GenerateError>;
}

/// Runs the generator and parses its output into numbered steps plus a
/// conclusion. Free-form text becomes a single step with a diagnostic
/// unless `strict`.
pub fn generate_rationale(
    generator: &dyn Generator,
    req: &RationaleRequest,
    strict: bool,
) -> Result<(Rationale, Option<Diagnostic>), GenerateError> {
    let text = generator.rationale_text(req)?;
    if strict {
        return Rationale::parse_strict(&text)
            .map(|r| (r, None))
            .map_err(|e| GenerateError::UnparseableResponse(e.to_string()));
    }
    let parsed = Rationale::parse(&text);
    if parsed.rationale.is_empty() {
        return Err(GenerateError::UnparseableResponse("empty response".into()));
    }
    Ok((parsed.rationale, parsed.diagnostic))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    #[default]
    Template,
    HttpChat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub kind: GeneratorKind,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub temperature: f64,
    pub max_retries: u32,
    pub timeout_ms: u64,
    pub cache_dir: Option<std::path::PathBuf>,
    /// Reject responses that are not numbered steps plus a conclusion.
    pub strict: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            kind: GeneratorKind::Template,
            endpoint: None,
            model: None,
            temperature: 0.0,
            max_retries: 3,
            timeout_ms: 60_000,
            cache_dir: None,
            strict: false,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), GenerateError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GenerateError::InvalidConfig(format!(
                "temperature must be finite and non-negative, got {}",
                self.temperature
            )));
        }
        if self.kind == GeneratorKind::HttpChat && self.endpoint.is_none() {
            return Err(GenerateError::InvalidConfig("http-chat generator needs an endpoint".into()));
        }
        Ok(())
    }
}

/// Builds the configured backend.
pub fn generator(cfg: &GeneratorConfig) -> Result<Box<dyn Generator>, GenerateError> {
    cfg.validate()?;
    match cfg.kind {
        GeneratorKind::Template => Ok(Box::new(TemplateGenerator)),
        #[cfg(feature = "http")]
        GeneratorKind::HttpChat => Ok(Box::new(HttpChatGenerator::new(cfg.clone()))),
        #[cfg(not(feature = "http"))]
        GeneratorKind::HttpChat => Err(GenerateError::InvalidConfig("built without http support".into())),
    }
}

/// Deterministic offline generator: one step per relation in stored order,
/// then one per attribute, then one per entity mentioned by neither.
#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateGenerator;

impl TemplateGenerator {
    pub fn rationale(&self, graph: &SceneGraph, answer: Option<&str>) -> Rationale {
        let mut steps: Vec<String> = graph
            .relations()
            .iter()
            .map(|r| format!("The {} {} the {}.", r.subject, r.predicate, r.object))
            .collect();
        steps.extend(graph.attributes().iter().map(|a| format!("The {} is {}.", a.entity, a.value)));
        steps.extend(
            graph
                .entities()
                .iter()
                .filter(|e| {
                    !graph.attributes().iter().any(|a| &a.entity == *e)
                        && !graph.relations().iter().any(|r| &r.subject == *e || &r.object == *e)
                })
                .map(|e| format!("There is a {e}.")),
        );
        if steps.is_empty() {
            steps.push("The scene contains no described elements.".into());
        }
        let conclusion = match answer {
            Some(a) => format!("The answer is {a}."),
            None => "The answer follows from the scene described above.".into(),
        };
        Rationale::from_parts(steps, conclusion)
    }
}

impl Generator for TemplateGenerator {
    fn rationale_text(&self, req: &RationaleRequest) -> Result<String, GenerateError> {
        Ok(self.rationale(&req.graph, req.answer.as_deref()).text().to_owned())
    }

    fn scene_graph_text(&self, _prompt: &str, _image: &str) -> Result<String, GenerateError> {
        Err(GenerateError::Unsupported(
            "the template generator cannot extract scene graphs; supply them in the corpus".into(),
        ))
    }
}

#[cfg(feature = "http")]
pub use chat::HttpChatGenerator;

#[cfg(feature = "http")]
mod chat {
    use std::fs;
    use std::path::{Path, PathBuf};

    use base64::Engine;
    use serde_json::{json, Value};
    use sha2::{Digest, Sha256};

    use super::{GenerateError, Generator, GeneratorConfig, RationaleRequest};
    use crate::http::{post_json, token_from_env, HttpError, RetryPolicy};

    /// Client for OpenAI-style `chat/completions` endpoints with an
    /// optional on-disk response cache.
    #[derive(Debug, Clone)]
    pub struct HttpChatGenerator {
        pub cfg: GeneratorConfig,
        pub retry: RetryPolicy,
        pub token: Option<String>,
    }

    fn image_part(image: &str) -> Value {
        let is_remote = ["http://", "https://", "data:"].iter().any(|p| image.starts_with(p));
        let url = match fs::read(image) {
            Ok(bytes) if !is_remote => {
                let mime = match Path::new(image).extension().and_then(|e| e.to_str()) {
                    Some("png") => "image/png",
                    Some("gif") => "image/gif",
                    Some("webp") => "image/webp",
                    _ => "image/jpeg",
                };
                format!("data:{mime};base64,{}", base64::engine::general_purpose::STANDARD.encode(bytes))
            }
            _ => image.to_owned(),
        };
        json!({ "type": "image_url", "image_url": { "url": url } })
    }

    impl HttpChatGenerator {
        pub fn new(cfg: GeneratorConfig) -> Self {
            let retry = RetryPolicy {
                max_retries: cfg.max_retries,
                timeout_ms: cfg.timeout_ms,
                ..RetryPolicy::default()
            };
            Self {
                cfg,
                retry,
                token: token_from_env(),
            }
        }

        /// Cache key: SHA-256 over prompt, model and temperature.
        pub fn cache_key(&self, prompt: &str) -> String {
            let mut h = Sha256::new();
            for part in [prompt, self.cfg.model.as_deref().unwrap_or(""), &self.cfg.temperature.to_string()] {
                h.update((part.len() as u64).to_le_bytes());
                h.update(part.as_bytes());
            }
            h.finalize().iter().map(|b| format!("{b:02x}")).collect()
        }

        fn cache_path(&self, prompt: &str) -> Option<PathBuf> {
            self.cfg
                .cache_dir
                .as_ref()
                .map(|d| d.join(format!("{}.txt", self.cache_key(prompt))))
        }

        pub fn complete(&self, prompt: &str, image: Option<&str>) -> Result<String, GenerateError> {
            let cached = self.cache_path(prompt);
            if let Some(text) = cached.as_ref().and_then(|p| fs::read_to_string(p).ok()) {
                return Ok(text);
            }
            let content = match image {
                Some(img) => json!([{ "type": "text", "text": prompt }, image_part(img)]),
                None => Value::String(prompt.to_owned()),
            };
            let body = json!({
                "model": self.cfg.model,
                "temperature": self.cfg.temperature,
                "messages": [{ "role": "user", "content": content }],
            });
            let url = self.cfg.endpoint.as_deref().unwrap_or_default();
            let resp = post_json(url, self.token.as_deref(), &body, &self.retry).map_err(|e| match e {
                HttpError::Status { status, body } => GenerateError::RemoteError { status: Some(status), body },
                HttpError::Timeout => GenerateError::Timeout,
                HttpError::Transport(m) => GenerateError::RemoteError { status: None, body: m },
                HttpError::Decode(m) => GenerateError::UnparseableResponse(m),
            })?;
            let text = resp["choices"][0]["message"]["content"]
                .as_str()
                .ok_or_else(|| GenerateError::UnparseableResponse("no choices[0].message.content".into()))?
                .to_owned();
            if let Some(path) = cached {
                let write = || -> std::io::Result<()> {
                    if let Some(dir) = path.parent() {
                        fs::create_dir_all(dir)?;
                    }
                    let tmp = path.with_extension("tmp");
                    fs::write(&tmp, &text)?;
                    fs::rename(&tmp, &path)
                };
                write().map_err(|e| GenerateError::Cache(format!("{}: {e}", path.display())))?;
            }
            Ok(text)
        }
    }

    impl Generator for HttpChatGenerator {
        fn rationale_text(&self, req: &RationaleRequest) -> Result<String, GenerateError> {
            self.complete(&req.prompt, req.image.as_deref())
        }

        fn scene_graph_text(&self, prompt: &str, image: &str) -> Result<String, GenerateError> {
            self.complete(prompt, Some(image))
        }
    }
}
