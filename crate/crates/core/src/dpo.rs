//! Preference records, JSONL export, and the DPO objective.
//!
//! The loss is evaluated, never optimized: callers supply log-probabilities
//! through [`LogProbProvider`]. [`ToyPolicy`] is a unigram softmax model with
//! a closed-form gradient, used to check the loss against finite differences.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, BufRead, Write};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diag::Diagnostic;
use crate::generate::Instance;
use crate::grounding::Rationale;
use crate::perturb::{NegativeCandidate, PerturbationOp};
use crate::scene_graph::{jaccard_overlap, parse_scene_graph, serialize_scene_graph, Jaccard, SceneGraph};

const PROMPT_SEPARATOR: &str = "\n\nScene Graph: ";

#[derive(Debug, Error)]
pub enum DpoError {
    #[error("negative {0} carries no rationale")]
    MissingRationale(usize),
    #[error("non-finite log-probability for record {0:?}")]
    NonFiniteLogProb(String),
    #[error("no preference records")]
    NoRecords,
    #[error("token {0:?} is not in the toy vocabulary")]
    OutOfVocabulary(String),
    #[error("beta must be positive and finite, got {0}")]
    InvalidBeta(f64),
    #[error("line {line}: {reason}")]
    Import { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Context {
    pub image: String,
    pub question: String,
    /// Single-line serialization of the positive graph.
    pub scene_graph: String,
}

impl Context {
    /// `question + "\n\nScene Graph: " + graph`, the text prompt of a record.
    pub fn prompt(&self) -> String {
        format!("{}{PROMPT_SEPARATOR}{}", self.question, self.scene_graph)
    }

    pub fn graph(&self) -> Result<SceneGraph, crate::scene_graph::GraphError> {
        parse_scene_graph(&self.scene_graph)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub instance_id: String,
    /// Operator label such as `"swap"` or `"replace+shorten"`.
    pub operator: String,
    pub edits: Vec<PerturbationOp>,
    pub jaccard: Jaccard,
    /// Position of the negative in the diversity selection.
    pub diversity_rank: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreferenceRecord {
    pub id: String,
    pub context: Context,
    pub chosen: String,
    pub rejected: String,
    pub meta: RecordMeta,
}

/// One record per selected negative, all sharing the instance context and
/// the positive rationale. Negatives whose rationale equals the positive one
/// are dropped with a diagnostic.
pub fn build_preference_records(
    inst: &Instance,
    sg_pos: &SceneGraph,
    tau_pos: &Rationale,
    negatives: &[NegativeCandidate],
) -> Result<(Vec<PreferenceRecord>, Vec<Diagnostic>), DpoError> {
    let context = Context {
        image: inst.image.clone(),
        question: inst.question.clone(),
        scene_graph: serialize_scene_graph(sg_pos, false),
    };
    let mut records = Vec::with_capacity(negatives.len());
    let mut diagnostics = Vec::new();
    for (rank, neg) in negatives.iter().enumerate() {
        let rejected = neg.rationale.as_ref().ok_or(DpoError::MissingRationale(rank))?;
        if rejected.text() == tau_pos.text() {
            diagnostics.push(Diagnostic::new(
                "identical-rationales",
                format!("negative {rank} of {} repeats the positive rationale", inst.id),
            ));
            continue;
        }
        records.push(PreferenceRecord {
            id: format!("{}#{rank}", inst.id),
            context: context.clone(),
            chosen: tau_pos.text().to_owned(),
            rejected: rejected.text().to_owned(),
            meta: RecordMeta {
                instance_id: inst.id.clone(),
                operator: neg.trace.operator_label(),
                edits: neg.trace.ops.clone(),
                jaccard: neg.jaccard.unwrap_or_else(|| jaccard_overlap(&neg.graph, sg_pos)),
                diversity_rank: rank,
                seed: neg.trace.seed,
            },
        });
    }
    Ok((records, diagnostics))
}

#[derive(Serialize, Deserialize)]
struct WireRecord {
    id: String,
    images: Vec<String>,
    prompt: String,
    chosen: String,
    rejected: String,
    meta: RecordMeta,
}

impl PreferenceRecord {
    pub fn to_json_line(&self) -> String {
        let wire = WireRecord {
            id: self.id.clone(),
            images: vec![self.context.image.clone()],
            prompt: self.context.prompt(),
            chosen: self.chosen.clone(),
            rejected: self.rejected.clone(),
            meta: self.meta.clone(),
        };
        serde_json::to_string(&wire).expect("records serialize")
    }

    pub fn from_json_line(line: &str) -> Result<Self, String> {
        let wire: WireRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let [image] = <[String; 1]>::try_from(wire.images)
            .map_err(|v| format!("expected exactly one image, got {}", v.len()))?;
        // graph JSON escapes newlines, so the last separator is the real one
        let cut = wire
            .prompt
            .rfind(PROMPT_SEPARATOR)
            .ok_or("prompt lacks the scene-graph section")?;
        let context = Context {
            image,
            question: wire.prompt[..cut].to_owned(),
            scene_graph: wire.prompt[cut + PROMPT_SEPARATOR.len()..].to_owned(),
        };
        context.graph().map_err(|e| format!("context graph: {e}"))?;
        Ok(Self {
            id: wire.id,
            context,
            chosen: wire.chosen,
            rejected: wire.rejected,
            meta: wire.meta,
        })
    }
}

/// Writes one JSON object per line; returns the number written.
pub fn export_jsonl<W: Write>(records: &[PreferenceRecord], mut sink: W) -> io::Result<usize> {
    for r in records {
        sink.write_all(r.to_json_line().as_bytes())?;
        sink.write_all(b"\n")?;
    }
    sink.flush()?;
    Ok(records.len())
}

/// Reads records written by [`export_jsonl`]; blank lines are skipped.
pub fn import_jsonl<R: BufRead>(source: R) -> Result<Vec<PreferenceRecord>, DpoError> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(PreferenceRecord::from_json_line(&line).map_err(|reason| DpoError::Import { line: i + 1, reason })?);
    }
    Ok(out)
}

/// Scores a response given its context.
pub trait LogProbProvider: Sync {
    fn log_prob(&self, context: &Context, response: &str) -> Result<f64, DpoError>;

    /// Whether [`dpo_loss`] may call this provider from several threads.
    fn concurrent(&self) -> bool {
        true
    }
}

/// Fixed log-probabilities per response text; unknown responses are an error.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LogProbTable(pub HashMap<String, f64>);

impl LogProbProvider for LogProbTable {
    fn log_prob(&self, _context: &Context, response: &str) -> Result<f64, DpoError> {
        self.0
            .get(response)
            .copied()
            .ok_or_else(|| DpoError::OutOfVocabulary(response.to_owned()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// Plain mean over records.
    #[default]
    PerPair,
    /// Every instance weighs the same regardless of its negative count.
    PerInstance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoConfig {
    pub beta: f64,
    pub weighting: Weighting,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            weighting: Weighting::PerPair,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<(), DpoError> {
        if self.beta > 0.0 && self.beta.is_finite() {
            Ok(())
        } else {
            Err(DpoError::InvalidBeta(self.beta))
        }
    }
}

/// ln(1 + eˣ) without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic function, stable for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpoOutcome {
    pub mean_loss: f64,
    /// β·[(lpθ(c) − lpθ(r)) − (lpref(c) − lpref(r))] per record.
    pub margins: Vec<f64>,
}

fn record_weights(records: &[PreferenceRecord], weighting: Weighting) -> Vec<f64> {
    match weighting {
        Weighting::PerPair => vec![1.0 / records.len() as f64; records.len()],
        Weighting::PerInstance => {
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for r in records {
                *counts.entry(&r.meta.instance_id).or_default() += 1;
            }
            let instances = counts.len() as f64;
            records
                .iter()
                .map(|r| 1.0 / (instances * counts[r.meta.instance_id.as_str()] as f64))
                .collect()
        }
    }
}

fn margin(
    r: &PreferenceRecord,
    policy: &dyn LogProbProvider,
    reference: &dyn LogProbProvider,
    beta: f64,
) -> Result<f64, DpoError> {
    let lp = [
        policy.log_prob(&r.context, &r.chosen)?,
        policy.log_prob(&r.context, &r.rejected)?,
        reference.log_prob(&r.context, &r.chosen)?,
        reference.log_prob(&r.context, &r.rejected)?,
    ];
    if lp.iter().any(|v| !v.is_finite()) {
        return Err(DpoError::NonFiniteLogProb(r.id.clone()));
    }
    Ok(beta * ((lp[0] - lp[1]) - (lp[2] - lp[3])))
}

fn margins(
    records: &[PreferenceRecord],
    policy: &dyn LogProbProvider,
    reference: &dyn LogProbProvider,
    beta: f64,
) -> Result<Vec<f64>, DpoError> {
    #[cfg(feature = "parallel")]
    if policy.concurrent() && reference.concurrent() && records.len() > 64 {
        use rayon::prelude::*;
        return records.par_iter().map(|r| margin(r, policy, reference, beta)).collect();
    }
    records.iter().map(|r| margin(r, policy, reference, beta)).collect()
}

/// Weighted mean of −log σ(margin) over the records.
pub fn dpo_loss(
    records: &[PreferenceRecord],
    policy: &dyn LogProbProvider,
    reference: &dyn LogProbProvider,
    cfg: &DpoConfig,
) -> Result<DpoOutcome, DpoError> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(DpoError::NoRecords);
    }
    let margins = margins(records, policy, reference, cfg.beta)?;
    let weights = record_weights(records, cfg.weighting);
    let mean_loss = margins.iter().zip(&weights).map(|(z, w)| w * softplus(-z)).sum();
    Ok(DpoOutcome { mean_loss, margins })
}

/// Unigram softmax policy over a whitespace-token vocabulary:
/// log p(response) = Σ θ_tok − len · logsumexp(θ).
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    vocab: IndexMap<String, usize>,
    pub theta: Vec<f64>,
}

impl ToyPolicy {
    /// Vocabulary in first-seen order over chosen then rejected texts; all
    /// weights zero.
    pub fn from_records(records: &[PreferenceRecord]) -> Self {
        let mut vocab = IndexMap::new();
        for r in records {
            for tok in r.chosen.split_whitespace().chain(r.rejected.split_whitespace()) {
                let next = vocab.len();
                vocab.entry(tok.to_owned()).or_insert(next);
            }
        }
        let theta = vec![0.0; vocab.len()];
        Self { vocab, theta }
    }

    pub fn with_theta(&self, theta: Vec<f64>) -> Self {
        assert_eq!(theta.len(), self.vocab.len(), "one weight per token");
        Self {
            vocab: self.vocab.clone(),
            theta,
        }
    }

    pub fn vocab(&self) -> impl Iterator<Item = &str> {
        self.vocab.keys().map(String::as_str)
    }

    pub fn token_index(&self, token: &str) -> Option<usize> {
        self.vocab.get(token).copied()
    }

    fn log_normalizer(&self) -> f64 {
        let max = self.theta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        max + self.theta.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
    }

    fn counts(&self, response: &str) -> Result<(Vec<(usize, f64)>, f64), DpoError> {
        let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
        let mut len = 0.0;
        for tok in response.split_whitespace() {
            let i = self
                .token_index(tok)
                .ok_or_else(|| DpoError::OutOfVocabulary(tok.to_owned()))?;
            *counts.entry(i).or_default() += 1.0;
            len += 1.0;
        }
        Ok((counts.into_iter().collect(), len))
    }
}

impl LogProbProvider for ToyPolicy {
    fn log_prob(&self, _context: &Context, response: &str) -> Result<f64, DpoError> {
        let (counts, len) = self.counts(response)?;
        let sum: f64 = counts.iter().map(|&(i, c)| c * self.theta[i]).sum();
        Ok(sum - len * self.log_normalizer())
    }
}

/// Analytic gradient of [`dpo_loss`] with respect to `policy.theta`.
pub fn toy_policy_gradient(
    policy: &ToyPolicy,
    records: &[PreferenceRecord],
    reference: &dyn LogProbProvider,
    cfg: &DpoConfig,
) -> Result<Vec<f64>, DpoError> {
    let outcome = dpo_loss(records, policy, reference, cfg)?;
    let weights = record_weights(records, cfg.weighting);
    let z = policy.log_normalizer();
    let probs: Vec<f64> = policy.theta.iter().map(|t| (t - z).exp()).collect();
    let mut grad = vec![0.0; policy.theta.len()];
    for ((r, m), w) in records.iter().zip(&outcome.margins).zip(&weights) {
        // d softplus(-m)/dm = -σ(-m); dm/dθ = β·(∂lp(c) − ∂lp(r))
        let coef = -w * sigmoid(-m) * cfg.beta;
        let (chosen, len_c) = policy.counts(&r.chosen)?;
        let (rejected, len_r) = policy.counts(&r.rejected)?;
        for (i, c) in chosen {
            grad[i] += coef * c;
        }
        for (i, c) in rejected {
            grad[i] -= coef * c;
        }
        for (g, p) in grad.iter_mut().zip(&probs) {
            *g -= coef * (len_c - len_r) * p;
        }
    }
    Ok(grad)
}
