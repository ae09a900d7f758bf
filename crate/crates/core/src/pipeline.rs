//! End-to-end dataset construction over a JSONL corpus.
//!
//! Each instance moves through five stages that can also be run one at a
//! time with the JSON interchange type [`InstanceState`]:
//!
//! 1. **parse**: obtain the positive scene graph (inline, sidecar file, or
//!    generated);
//! 2. **ground**: generate the positive rationale, extract the grounded
//!    subgraph and the residual pool;
//! 3. **perturb**: sample `k` negative graphs;
//! 4. **select**: overlap filter, negative rationales, diversity selection;
//! 5. **build**: preference records.
//!
//! Instances are independent; each gets its own seed derived from the
//! global seed and its id, so corpus order never changes any result.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diag::Diagnostic;
use crate::dpo::{build_preference_records, export_jsonl, DpoConfig, DpoError, PreferenceRecord};
use crate::embed::{embedder, EmbedConfig, EmbedError, Embedder};
use crate::generate::{
    generate_rationale, generator, render_scene_graph_prompt, GenerateError, Generator, GeneratorConfig, Instance,
    RationaleRequest,
};
use crate::grounding::{extract_or_whole_graph, residual_pool, GroundedSubgraph, GroundingError, MatchConfig, Rationale, ResidualPool};
use crate::perturb::{generate_negatives, NegativeCandidate, NegativeConfig, PerturbError};
use crate::scene_graph::{parse_scene_graph_with, scene_graph_from_value, GraphError, ParseOptions, SceneGraph};
use crate::select::{filter_by_overlap, select_candidates, SelectError, SelectionConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Corpus(CorpusError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

/// A corpus line that could not be turned into an instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Error)]
#[error("corpus line {line}: {reason}")]
pub struct CorpusError {
    pub line: usize,
    pub reason: String,
}

/// Why one instance failed; the run carries on without it.
#[derive(Debug, Error)]
pub enum InstanceError {
    #[error("no scene graph: {0}")]
    NoSceneGraph(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Generate(#[from] GenerateError),
    #[error(transparent)]
    Grounding(#[from] GroundingError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Dpo(#[from] DpoError),
    #[error("instance is at stage {found:?}, expected {expected:?}")]
    WrongStage { expected: Stage, found: Stage },
}

/// Where a corpus line's scene graph comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GraphSource {
    Inline(Value),
    /// Path to a JSON file, relative to the corpus file's directory.
    Sidecar(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub line: usize,
    pub instance: Instance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_graph: Option<GraphSource>,
}

fn field<'a>(obj: &'a serde_json::Map<String, Value>, key: &str) -> Result<Option<&'a str>, String> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(_) => Err(format!("{key:?} must be a string")),
    }
}

/// Parses one corpus line: `{"id", "image", "question", "answer"?, "scene_graph"?}`.
pub fn parse_corpus_line(text: &str, line: usize) -> Result<CorpusEntry, CorpusError> {
    let err = |reason: String| CorpusError { line, reason };
    let value: Value = serde_json::from_str(text).map_err(|e| err(format!("invalid JSON: {e}")))?;
    let obj = value.as_object().ok_or_else(|| err("expected a JSON object".into()))?;
    let required = |key: &str| -> Result<String, CorpusError> {
        match field(obj, key).map_err(err)? {
            Some(s) if !s.trim().is_empty() => Ok(s.to_owned()),
            _ => Err(err(format!("missing {key:?}"))),
        }
    };
    let instance = Instance {
        id: required("id")?,
        image: required("image")?,
        question: required("question")?,
        answer: field(obj, "answer").map_err(err)?.map(str::to_owned),
    };
    let scene_graph = match obj.get("scene_graph") {
        None | Some(Value::Null) => None,
        Some(Value::String(p)) => Some(GraphSource::Sidecar(PathBuf::from(p))),
        Some(v @ Value::Object(_)) => Some(GraphSource::Inline(v.clone())),
        Some(_) => return Err(err("\"scene_graph\" must be an object or a file path".into())),
    };
    Ok(CorpusEntry {
        line,
        instance,
        scene_graph,
    })
}

/// Parses a whole corpus. Blank lines are ignored; duplicate ids are
/// errors on every line after the first.
pub fn read_corpus<R: BufRead>(source: R) -> io::Result<Vec<Result<CorpusEntry, CorpusError>>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = parse_corpus_line(&line, i + 1).and_then(|e| {
            if seen.insert(e.instance.id.clone()) {
                Ok(e)
            } else {
                Err(CorpusError {
                    line: i + 1,
                    reason: format!("duplicate id {:?}", e.instance.id),
                })
            }
        });
        out.push(entry);
    }
    Ok(out)
}

/// Stable per-instance seed: the first 8 bytes of SHA-256(seed ‖ id).
pub fn instance_seed(global: u64, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update(id.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    #[default]
    Parsed,
    Grounded,
    Perturbed,
    Selected,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub generated: usize,
    pub filtered: usize,
    pub selected: usize,
    pub records: usize,
}

/// One instance between stages; what the stage subcommands read and write.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceState {
    pub stage: Stage,
    pub instance: Instance,
    pub seed: u64,
    pub graph: SceneGraph,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive: Option<Rationale>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grounded: Option<GroundedSubgraph>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<ResidualPool>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<NegativeCandidate>,
    #[serde(default)]
    pub counts: StageCounts,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<Diagnostic>,
}

impl InstanceState {
    fn expect(&self, expected: Stage) -> Result<(), InstanceError> {
        if self.stage == expected {
            Ok(())
        } else {
            Err(InstanceError::WrongStage {
                expected,
                found: self.stage,
            })
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub input: PathBuf,
    pub output: PathBuf,
    /// Defaults to the output path with a `.report.json` suffix.
    pub report: Option<PathBuf>,
    pub seed: u64,
    pub negatives: NegativeConfig,
    pub selection: SelectionConfig,
    pub generator: GeneratorConfig,
    pub embed: EmbedConfig,
    pub dpo: DpoConfig,
    pub matching: MatchConfig,
    pub parse: ParseOptions,
    /// Abort on the first malformed corpus line instead of skipping it.
    pub strict: bool,
    /// Generate negative rationales before overlap filtering.
    pub strict_order: bool,
    /// Worker threads; `None` uses every logical CPU.
    pub workers: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input: PathBuf::from("corpus.jsonl"),
            output: PathBuf::from("preferences.jsonl"),
            report: None,
            seed: 0,
            negatives: NegativeConfig::default(),
            selection: SelectionConfig::default(),
            generator: GeneratorConfig::default(),
            embed: EmbedConfig::default(),
            dpo: DpoConfig::default(),
            matching: MatchConfig::default(),
            parse: ParseOptions::default(),
            strict: false,
            strict_order: false,
            workers: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let config = |e: String| PipelineError::Config(e);
        self.negatives.validate().map_err(|e| config(e.to_string()))?;
        self.selection.validate().map_err(|e| config(e.to_string()))?;
        self.generator.validate().map_err(|e| config(e.to_string()))?;
        self.embed.validate().map_err(|e| config(e.to_string()))?;
        self.dpo.validate().map_err(|e| config(e.to_string()))?;
        if self.input == self.output || Some(&self.output) == self.report.as_ref() {
            return Err(config("input, output and report paths must differ".into()));
        }
        if self.workers == Some(0) {
            return Err(config("worker count must be at least 1".into()));
        }
        Ok(())
    }

    pub fn report_path(&self) -> PathBuf {
        self.report.clone().unwrap_or_else(|| {
            let mut p = self.output.clone().into_os_string();
            p.push(".report.json");
            PathBuf::from(p)
        })
    }
}

/// Backends shared by all instances of a run.
pub struct Backends {
    pub generator: Box<dyn Generator>,
    pub embedder: Box<dyn Embedder>,
}

impl Backends {
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        Ok(Self {
            generator: generator(&cfg.generator).map_err(|e| PipelineError::Config(e.to_string()))?,
            embedder: embedder(&cfg.embed).map_err(|e| PipelineError::Config(e.to_string()))?,
        })
    }
}

/// Stage 1: resolve the positive scene graph.
pub fn parse_stage(
    entry: &CorpusEntry,
    corpus_dir: &Path,
    cfg: &PipelineConfig,
    generator: &dyn Generator,
) -> Result<InstanceState, InstanceError> {
    let (graph, diagnostics) = match &entry.scene_graph {
        Some(GraphSource::Inline(v)) => scene_graph_from_value(v, &cfg.parse)?,
        Some(GraphSource::Sidecar(p)) => {
            let path = corpus_dir.join(p);
            let text = fs::read_to_string(&path).map_err(|e| InstanceError::NoSceneGraph(format!("{}: {e}", path.display())))?;
            parse_scene_graph_with(&text, &cfg.parse)?
        }
        None => {
            let prompt = render_scene_graph_prompt(&entry.instance)?;
            let text = generator.scene_graph_text(&prompt, &entry.instance.image)?;
            parse_scene_graph_with(strip_code_fence(&text), &cfg.parse)?
        }
    };
    Ok(InstanceState {
        stage: Stage::Parsed,
        seed: instance_seed(cfg.seed, &entry.instance.id),
        instance: entry.instance.clone(),
        graph,
        positive: None,
        grounded: None,
        pool: None,
        candidates: Vec::new(),
        counts: StageCounts::default(),
        diagnostics,
    })
}

/// Chat models often wrap JSON in a Markdown code fence.
fn strip_code_fence(text: &str) -> &str {
    let t = text.trim();
    match t.strip_prefix("```") {
        Some(rest) => {
            let body = rest.split_once('\n').map_or(rest, |(_, b)| b);
            body.trim_end().strip_suffix("```").unwrap_or(body).trim()
        }
        None => t,
    }
}

/// Stage 2: positive rationale, grounded subgraph, residual pool.
pub fn ground_stage(
    mut state: InstanceState,
    cfg: &PipelineConfig,
    generator: &dyn Generator,
) -> Result<InstanceState, InstanceError> {
    state.expect(Stage::Parsed)?;
    let req = RationaleRequest::positive(&state.graph, &state.instance)?;
    let (positive, diag) = generate_rationale(generator, &req, cfg.generator.strict)?;
    state.diagnostics.extend(diag);
    let (grounded, diag) = extract_or_whole_graph(&state.graph, &positive, &cfg.matching);
    state.diagnostics.extend(diag);
    state.pool = Some(residual_pool(&state.graph, &grounded.graph)?);
    state.grounded = Some(grounded);
    state.positive = Some(positive);
    state.stage = Stage::Grounded;
    Ok(state)
}

/// Stage 3: sample negative graphs.
pub fn perturb_stage(mut state: InstanceState, cfg: &PipelineConfig) -> Result<InstanceState, InstanceError> {
    state.expect(Stage::Grounded)?;
    let sg_c = &state.grounded.as_ref().expect("set by ground stage").graph;
    let pool = state.pool.as_ref().expect("set by ground stage");
    let set = generate_negatives(&state.graph, sg_c, pool, &cfg.negatives, state.seed)?;
    state.counts.generated = set.candidates.len();
    state.candidates = set.candidates;
    state.diagnostics.extend(set.diagnostics);
    state.stage = Stage::Perturbed;
    Ok(state)
}

fn attach_rationales(
    state: &InstanceState,
    candidates: &mut [NegativeCandidate],
    cfg: &PipelineConfig,
    backends: &Backends,
    diagnostics: &mut Vec<Diagnostic>,
) -> Result<(), InstanceError> {
    for c in candidates.iter_mut() {
        let req = RationaleRequest::negative(c.graph_for_prompt(), &state.instance);
        let (r, diag) = generate_rationale(backends.generator.as_ref(), &req, cfg.generator.strict)?;
        diagnostics.extend(diag);
        c.rationale = Some(r);
    }
    let texts: Vec<&str> = candidates
        .iter()
        .map(|c| c.rationale.as_ref().expect("attached above").text())
        .collect();
    let embeddings = backends.embedder.embed(&texts)?;
    for (c, e) in candidates.iter_mut().zip(embeddings) {
        c.embedding = Some(e);
    }
    Ok(())
}

/// Stage 4: overlap filter, negative rationales and diversity selection.
pub fn select_stage(mut state: InstanceState, cfg: &PipelineConfig, backends: &Backends) -> Result<InstanceState, InstanceError> {
    state.expect(Stage::Perturbed)?;
    let mut candidates = std::mem::take(&mut state.candidates);
    let mut diagnostics = Vec::new();
    if cfg.strict_order {
        attach_rationales(&state, &mut candidates, cfg, backends, &mut diagnostics)?;
    }
    let filtered = filter_by_overlap(&state.graph, candidates, &cfg.selection)?;
    diagnostics.extend(filtered.diagnostics);
    let mut kept = filtered.kept;
    state.counts.filtered = kept.len();
    if !cfg.strict_order {
        attach_rationales(&state, &mut kept, cfg, backends, &mut diagnostics)?;
    }
    let (selected, diag) = select_candidates(kept, &cfg.selection)?;
    diagnostics.extend(diag);
    state.counts.selected = selected.len();
    state.candidates = selected;
    state.diagnostics.extend(diagnostics);
    state.stage = Stage::Selected;
    Ok(state)
}

/// Stage 5: preference records.
pub fn build_stage(state: &mut InstanceState) -> Result<Vec<PreferenceRecord>, InstanceError> {
    state.expect(Stage::Selected)?;
    let positive = state.positive.as_ref().expect("set by ground stage");
    let (records, diags) = build_preference_records(&state.instance, &state.graph, positive, &state.candidates)?;
    state.diagnostics.extend(diags);
    state.counts.records = records.len();
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSummary {
    pub id: String,
    pub counts: StageCounts,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<Diagnostic>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceFailure {
    pub id: String,
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub corpus_lines: usize,
    pub corpus_errors: Vec<CorpusError>,
    pub failures: Vec<InstanceFailure>,
    pub totals: StageCounts,
    pub instances: Vec<InstanceSummary>,
    /// Wall-clock seconds per phase; the only nondeterministic field.
    pub timings: BTreeMap<String, f64>,
}

impl RunReport {
    /// Instances that ended with fewer than `m` records.
    pub fn shortfall_count(&self, m: usize) -> usize {
        self.instances.iter().filter(|s| s.counts.records < m).count()
    }
}

fn process(
    entry: &CorpusEntry,
    corpus_dir: &Path,
    cfg: &PipelineConfig,
    backends: &Backends,
) -> Result<(InstanceState, Vec<PreferenceRecord>), InstanceError> {
    let state = parse_stage(entry, corpus_dir, cfg, backends.generator.as_ref())?;
    let state = ground_stage(state, cfg, backends.generator.as_ref())?;
    let state = perturb_stage(state, cfg)?;
    let mut state = select_stage(state, cfg, backends)?;
    let records = build_stage(&mut state)?;
    Ok((state, records))
}

/// Runs every entry and returns records sorted by instance id, then rank.
pub fn run_entries(
    entries: &[CorpusEntry],
    corpus_dir: &Path,
    cfg: &PipelineConfig,
    backends: &Backends,
) -> (Vec<PreferenceRecord>, RunReport) {
    let run = |e: &CorpusEntry| process(e, corpus_dir, cfg, backends);
    #[cfg(feature = "parallel")]
    let results: Vec<_> = {
        use rayon::prelude::*;
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = cfg.workers {
            builder = builder.num_threads(n);
        }
        match builder.build() {
            Ok(pool) => pool.install(|| entries.par_iter().map(run).collect()),
            Err(_) => entries.iter().map(run).collect(),
        }
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<_> = entries.iter().map(run).collect();

    let mut report = RunReport::default();
    let mut per_instance: Vec<(String, Vec<PreferenceRecord>)> = Vec::new();
    for (entry, result) in entries.iter().zip(results) {
        match result {
            Ok((state, records)) => {
                let c = state.counts;
                report.totals.generated += c.generated;
                report.totals.filtered += c.filtered;
                report.totals.selected += c.selected;
                report.totals.records += c.records;
                report.instances.push(InstanceSummary {
                    id: state.instance.id,
                    counts: c,
                    diagnostics: state.diagnostics,
                });
                per_instance.push((entry.instance.id.clone(), records));
            }
            Err(e) => report.failures.push(InstanceFailure {
                id: entry.instance.id.clone(),
                line: entry.line,
                reason: e.to_string(),
            }),
        }
    }
    per_instance.sort_by(|a, b| a.0.cmp(&b.0));
    report.instances.sort_by(|a, b| a.id.cmp(&b.id));
    report.failures.sort_by(|a, b| a.id.cmp(&b.id));
    let records = per_instance.into_iter().flat_map(|(_, r)| r).collect();
    (records, report)
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Reads the corpus, builds the dataset, and writes the JSONL output plus a
/// JSON run report. Malformed corpus lines are skipped and reported unless
/// `cfg.strict` is set.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunReport, PipelineError> {
    cfg.validate()?;
    let started = Instant::now();
    let backends = Backends::from_config(cfg)?;
    let file = fs::File::open(&cfg.input).map_err(io_err(&cfg.input))?;
    let lines = read_corpus(io::BufReader::new(file)).map_err(io_err(&cfg.input))?;
    let corpus_lines = lines.len();
    let mut entries = Vec::with_capacity(lines.len());
    let mut corpus_errors = Vec::new();
    for line in lines {
        match line {
            Ok(e) => entries.push(e),
            Err(e) if cfg.strict => return Err(PipelineError::Corpus(e)),
            Err(e) => corpus_errors.push(e),
        }
    }
    let corpus_dir = cfg.input.parent().unwrap_or(Path::new("."));
    let read_done = started.elapsed().as_secs_f64();

    let (records, mut report) = run_entries(&entries, corpus_dir, cfg, &backends);
    let build_done = started.elapsed().as_secs_f64();

    let out = fs::File::create(&cfg.output).map_err(io_err(&cfg.output))?;
    export_jsonl(&records, BufWriter::new(out)).map_err(io_err(&cfg.output))?;
    report.corpus_lines = corpus_lines;
    report.corpus_errors = corpus_errors;
    report.timings.insert("read".into(), read_done);
    report.timings.insert("build".into(), build_done - read_done);
    report.timings.insert("write".into(), started.elapsed().as_secs_f64() - build_done);

    let report_path = cfg.report_path();
    let mut w = BufWriter::new(fs::File::create(&report_path).map_err(io_err(&report_path))?);
    serde_json::to_writer_pretty(&mut w, &report).map_err(|e| io_err(&report_path)(e.into()))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(io_err(&report_path))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample;

    fn case_entry() -> CorpusEntry {
        let line = serde_json::json!({
            "id": "motorcycle-inspection",
            "image": "images/motorcycle.jpg",
            "question": sample::QUESTION,
            "answer": sample::ANSWER,
            "scene_graph": serde_json::from_str::<Value>(sample::SCENE_GRAPH).unwrap(),
        });
        parse_corpus_line(&line.to_string(), 1).unwrap()
    }

    #[test]
    fn corpus_line_errors_carry_line_numbers() {
        let e = parse_corpus_line(r#"{"id": "a", "image": "x.jpg"}"#, 7).unwrap_err();
        assert_eq!(e.line, 7);
        assert!(e.reason.contains("question"));
        assert!(parse_corpus_line("not json", 1).is_err());
        assert!(parse_corpus_line(r#"{"id": 3, "image": "x", "question": "q"}"#, 1).is_err());
        assert!(parse_corpus_line(r#"{"id": "a", "image": "x", "question": "q", "scene_graph": 4}"#, 1).is_err());
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let text = "{\"id\":\"a\",\"image\":\"i\",\"question\":\"q\"}\n\n{\"id\":\"a\",\"image\":\"i\",\"question\":\"q\"}\n";
        let lines = read_corpus(text.as_bytes()).unwrap();
        assert!(lines[0].is_ok());
        assert_eq!(lines[1].as_ref().unwrap_err().line, 3);
    }

    #[test]
    fn seeds_depend_on_id_only() {
        assert_eq!(instance_seed(1, "a"), instance_seed(1, "a"));
        assert_ne!(instance_seed(1, "a"), instance_seed(1, "b"));
        assert_ne!(instance_seed(1, "a"), instance_seed(2, "a"));
    }

    #[test]
    fn code_fences_are_stripped() {
        assert_eq!(strip_code_fence("```json\n{\"a\": 1}\n```"), "{\"a\": 1}");
        assert_eq!(strip_code_fence(" {} "), "{}");
    }

    #[test]
    fn case_study_runs_end_to_end() {
        let cfg = PipelineConfig::default();
        let backends = Backends::from_config(&cfg).unwrap();
        let (records, report) = run_entries(&[case_entry()], Path::new("."), &cfg, &backends);
        assert!(report.failures.is_empty(), "{:?}", report.failures);
        let c = report.instances[0].counts;
        assert_eq!(c.generated, 8);
        assert!(c.filtered <= c.generated);
        assert_eq!(c.selected, c.filtered.min(3));
        assert_eq!(records.len(), c.records);
        for r in &records {
            assert_ne!(r.chosen, r.rejected);
            assert!(crate::select::within_bounds(r.meta.jaccard.value(), 0.3, 0.7));
        }
    }

    #[test]
    fn stages_refuse_out_of_order_input() {
        let cfg = PipelineConfig::default();
        let backends = Backends::from_config(&cfg).unwrap();
        let state = parse_stage(&case_entry(), Path::new("."), &cfg, backends.generator.as_ref()).unwrap();
        assert!(matches!(perturb_stage(state, &cfg), Err(InstanceError::WrongStage { .. })));
    }

    #[test]
    fn missing_graph_with_template_generator_fails_the_instance() {
        let cfg = PipelineConfig::default();
        let backends = Backends::from_config(&cfg).unwrap();
        let mut entry = case_entry();
        entry.scene_graph = None;
        let (records, report) = run_entries(&[entry], Path::new("."), &cfg, &backends);
        assert!(records.is_empty());
        assert_eq!(report.failures.len(), 1);
    }

    #[test]
    fn config_validation() {
        let mut cfg = PipelineConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.output = cfg.input.clone();
        assert!(matches!(cfg.validate(), Err(PipelineError::Config(_))));
        let cfg = PipelineConfig { workers: Some(0), ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
