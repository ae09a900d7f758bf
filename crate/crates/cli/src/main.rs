//! `scenealign`: build scene-graph grounded preference datasets.
//!
//! `run` executes the whole pipeline. `parse`, `ground`, `perturb`, `select`
//! and `build` run one stage each over JSONL instance-state files, so the
//! pipeline can be inspected or resumed between stages.

mod stats;

use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context as _};
use clap::{Args, Parser, Subcommand, ValueEnum};
use scenealign::dpo::{
    dpo_loss, import_jsonl, toy_policy_gradient, Context, DpoConfig, LogProbTable, PreferenceRecord, RecordMeta, ToyPolicy,
};
use scenealign::embed::{EmbedConfig, EmbedProvider};
use scenealign::generate::{GeneratorConfig, GeneratorKind};
use scenealign::grounding::{residual_pool, ResidualPool};
use scenealign::perturb::{apply_edit, EditRange, NegativeConfig, OpTag, PlannedEdit};
use scenealign::pipeline::{
    build_stage, ground_stage, parse_stage, perturb_stage, read_corpus, run_pipeline, select_stage, Backends,
    InstanceState, PipelineConfig, PipelineError,
};
use scenealign::scene_graph::{parse_scene_graph, ElementKind, ElementRef, SceneGraph};
use scenealign::select::{SelectionConfig, Shortfall};
use scenealign::{sample, Element, Jaccard};

/// Failure classes, mapped to the process exit code.
enum Failure {
    Config(anyhow::Error),
    Corpus(anyhow::Error),
    Io(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Corpus(_) => 2,
            Failure::Io(_) => 3,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Corpus(e) | Failure::Io(e) => e,
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) => Failure::Config(e.into()),
            PipelineError::Corpus(_) => Failure::Corpus(e.into()),
            PipelineError::Io { .. } => Failure::Io(e.into()),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

#[derive(Parser)]
#[command(name = "scenealign", version, about = "Scene-graph grounded preference dataset construction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage over a corpus and write the preference dataset.
    Run {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Run report path [default: <output>.report.json]
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        opts: PipelineArgs,
    },
    /// Stage 1: corpus → parsed instance states.
    Parse {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        opts: PipelineArgs,
    },
    /// Stage 2: positive rationale, grounded subgraph and residual pool.
    Ground(StageArgs),
    /// Stage 3: negative graphs. With --op, applies one operator to a single graph.
    Perturb {
        #[command(flatten)]
        stage: OptionalStageArgs,
        /// Apply a single operator instead of sampling
        #[arg(long)]
        op: Option<OpTag>,
        /// Grounded subgraph for --op [default: the built-in sample]
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Full positive graph supplying the residual pool for --op
        #[arg(long)]
        positive: Option<PathBuf>,
        /// Element to edit, e.g. `relation:0`, `entity:2`, or a bare relation index
        #[arg(long)]
        target: Option<String>,
    },
    /// Stage 4: overlap filter, negative rationales, diversity selection.
    Select(StageArgs),
    /// Stage 5: preference records as trainer-ready JSONL.
    Build(StageArgs),
    /// Check the DPO loss and its toy-policy gradient.
    DpoCheck {
        #[arg(long, default_value_t = 0.1)]
        beta: f64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Summarize a preference dataset.
    Stats {
        #[arg(long)]
        input: PathBuf,
        /// Negatives expected per instance
        #[arg(long = "num-negatives", default_value_t = 3)]
        m: usize,
    },
}

#[derive(Args)]
struct StageArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    opts: PipelineArgs,
}

#[derive(Args)]
struct OptionalStageArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    opts: PipelineArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum GeneratorArg {
    Template,
    Http,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbedArg {
    Hashed,
    Http,
}

#[derive(Args, Clone)]
struct PipelineArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.3)]
    gamma_lower: f64,
    #[arg(long, default_value_t = 0.7)]
    gamma_upper: f64,
    /// Negatives kept per instance (m)
    #[arg(long, default_value_t = 3)]
    num_negatives: usize,
    /// Candidates sampled per instance (k)
    #[arg(long, default_value_t = 8)]
    candidates: usize,
    /// Edits per candidate, `lo..hi` inclusive or a single count
    #[arg(long, default_value = "1..3")]
    edits: EditRange,
    #[arg(long, value_enum, default_value_t = GeneratorArg::Template)]
    generator: GeneratorArg,
    /// Chat completions URL for --generator http
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    #[arg(long, value_enum, default_value_t = EmbedArg::Hashed)]
    embed: EmbedArg,
    /// Embeddings URL for --embed http
    #[arg(long)]
    embed_endpoint: Option<String>,
    #[arg(long)]
    embed_model: Option<String>,
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    /// Abort on malformed corpus lines and non-conforming model output
    #[arg(long)]
    strict: bool,
    /// Widen the overlap window when fewer than m candidates survive
    #[arg(long)]
    relax_bounds: bool,
    /// Generate negative rationales before overlap filtering
    #[arg(long)]
    strict_order: bool,
    /// Directory for cached model responses
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Worker threads [default: logical CPUs]
    #[arg(long)]
    workers: Option<usize>,
}

impl PipelineArgs {
    fn config(&self) -> PipelineConfig {
        PipelineConfig {
            seed: self.seed,
            negatives: NegativeConfig {
                candidates: self.candidates,
                edits: self.edits,
                ..NegativeConfig::default()
            },
            selection: SelectionConfig {
                gamma_lower: self.gamma_lower,
                gamma_upper: self.gamma_upper,
                m: self.num_negatives,
                on_shortfall: if self.relax_bounds {
                    Shortfall::RelaxBounds
                } else {
                    Shortfall::EmitFewer
                },
                ..SelectionConfig::default()
            },
            generator: GeneratorConfig {
                kind: match self.generator {
                    GeneratorArg::Template => GeneratorKind::Template,
                    GeneratorArg::Http => GeneratorKind::HttpChat,
                },
                endpoint: self.endpoint.clone(),
                model: self.model.clone(),
                temperature: self.temperature,
                cache_dir: self.cache_dir.clone(),
                strict: self.strict,
                ..GeneratorConfig::default()
            },
            embed: EmbedConfig {
                provider: match self.embed {
                    EmbedArg::Hashed => EmbedProvider::Hashed,
                    EmbedArg::Http => EmbedProvider::Http,
                },
                endpoint: self.embed_endpoint.clone(),
                model: self.embed_model.clone(),
                ..EmbedConfig::default()
            },
            dpo: DpoConfig {
                beta: self.beta,
                ..DpoConfig::default()
            },
            strict: self.strict,
            strict_order: self.strict_order,
            workers: self.workers,
            ..PipelineConfig::default()
        }
    }

    /// Config plus backends for the stage subcommands.
    fn prepare(&self) -> CliResult<(PipelineConfig, Backends)> {
        let cfg = self.config();
        let mut check = cfg.clone();
        // stage commands have no output file of their own to collide with
        check.output = PathBuf::from("\0");
        check.validate()?;
        let backends = Backends::from_config(&cfg)?;
        Ok((cfg, backends))
    }
}

fn io_failure(path: &Path) -> impl FnOnce(io::Error) -> Failure + '_ {
    move |e| Failure::Io(anyhow!(e).context(path.display().to_string()))
}

fn open_output(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p).map_err(io_failure(p))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn read_states(path: &Path) -> CliResult<Vec<InstanceState>> {
    let file = fs::File::open(path).map_err(io_failure(path))?;
    let mut out = Vec::new();
    for (i, line) in io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_failure(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let state = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}: not an instance state", path.display(), i + 1))
            .map_err(Failure::Corpus)?;
        out.push(state);
    }
    Ok(out)
}

fn write_states(states: &[InstanceState], out: Option<&Path>) -> CliResult {
    let mut w = open_output(out)?;
    let target = out.unwrap_or(Path::new("<stdout>"));
    for s in states {
        let line = serde_json::to_string(s).expect("states serialize");
        writeln!(w, "{line}").map_err(io_failure(target))?;
    }
    w.flush().map_err(io_failure(target))
}

/// Applies `step` to every state; failures are reported and skipped.
fn map_states<F>(states: Vec<InstanceState>, step: F) -> Vec<InstanceState>
where
    F: Fn(InstanceState) -> Result<InstanceState, scenealign::pipeline::InstanceError>,
{
    states
        .into_iter()
        .filter_map(|s| {
            let id = s.instance.id.clone();
            step(s).map_err(|e| eprintln!("warning: {id}: {e}")).ok()
        })
        .collect()
}

fn cmd_run(input: PathBuf, output: PathBuf, report: Option<PathBuf>, opts: &PipelineArgs) -> CliResult {
    let cfg = PipelineConfig {
        input,
        output: output.clone(),
        report,
        ..opts.config()
    };
    let report = run_pipeline(&cfg)?;
    for e in &report.corpus_errors {
        eprintln!("warning: {e}");
    }
    for f in &report.failures {
        eprintln!("warning: {} (line {}): {}", f.id, f.line, f.reason);
    }
    let t = report.totals;
    println!(
        "{} instances, {} failed, {} corpus errors: generated {} → filtered {} → selected {} → {} records",
        report.instances.len(),
        report.failures.len(),
        report.corpus_errors.len(),
        t.generated,
        t.filtered,
        t.selected,
        t.records
    );
    println!("wrote {} and {}", output.display(), cfg.report_path().display());
    Ok(())
}

fn cmd_parse(input: &Path, output: Option<&Path>, opts: &PipelineArgs) -> CliResult {
    let (cfg, backends) = opts.prepare()?;
    let file = fs::File::open(input).map_err(io_failure(input))?;
    let lines = read_corpus(io::BufReader::new(file)).map_err(io_failure(input))?;
    let dir = input.parent().unwrap_or(Path::new("."));
    let mut states = Vec::new();
    for line in lines {
        match line {
            Ok(entry) => match parse_stage(&entry, dir, &cfg, backends.generator.as_ref()) {
                Ok(s) => states.push(s),
                Err(e) => eprintln!("warning: {} (line {}): {e}", entry.instance.id, entry.line),
            },
            Err(e) if cfg.strict => return Err(Failure::Corpus(e.into())),
            Err(e) => eprintln!("warning: {e}"),
        }
    }
    write_states(&states, output)
}

fn parse_target(spec: &str, op: OpTag) -> CliResult<ElementRef> {
    let (kind, index) = match spec.split_once(':') {
        Some((k, i)) => {
            let kind = match k {
                "entity" => ElementKind::Entity,
                "attribute" => ElementKind::Attribute,
                "relation" => ElementKind::Relation,
                _ => return Err(Failure::Config(anyhow!("unknown element kind {k:?}"))),
            };
            (kind, i)
        }
        None if op == OpTag::Swap => (ElementKind::Relation, spec),
        None => return Err(Failure::Config(anyhow!("--target needs a kind, e.g. entity:0"))),
    };
    let index = index
        .parse()
        .map_err(|_| Failure::Config(anyhow!("bad element index {index:?}")))?;
    Ok(ElementRef { kind, index })
}

fn load_graph(path: &Path) -> CliResult<SceneGraph> {
    let text = fs::read_to_string(path).map_err(io_failure(path))?;
    parse_scene_graph(&text)
        .with_context(|| path.display().to_string())
        .map_err(Failure::Corpus)
}

fn cmd_single_op(op: OpTag, graph: Option<&Path>, positive: Option<&Path>, target: Option<&str>, seed: u64) -> CliResult {
    let (sg_c, pool) = match graph {
        None => {
            let pool = residual_pool(&sample::scene_graph(), &sample::grounded_subgraph()).expect("sample subgraph");
            (sample::grounded_subgraph(), pool)
        }
        Some(p) => {
            let sg_c = load_graph(p)?;
            let pool = match positive {
                Some(pos) => residual_pool(&load_graph(pos)?, &sg_c)
                    .context("--graph is not a subgraph of --positive")
                    .map_err(Failure::Corpus)?,
                None => ResidualPool::default(),
            };
            (sg_c, pool)
        }
    };
    let target = target.map(|t| parse_target(t, op)).transpose()?;
    let plan = match target {
        Some(t) => PlannedEdit {
            tag: op,
            target: Some(t),
            payload: None,
        },
        None => PlannedEdit::random(op),
    };
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let edited = apply_edit(&sg_c, &plan, &pool, &mut rng).map_err(|e| Failure::Config(e.into()))?;
    let describe = |e: &Option<Element>| e.as_ref().map_or("-".to_owned(), |e| e.to_json_value().to_string());
    println!("{}: {} -> {}", op, describe(&edited.op.before), describe(&edited.op.after));
    println!("{}", edited.graph.to_json());
    Ok(())
}

fn cmd_build(input: &Path, output: Option<&Path>) -> CliResult {
    let mut states = read_states(input)?;
    states.sort_by(|a, b| a.instance.id.cmp(&b.instance.id));
    let mut records = Vec::new();
    for s in &mut states {
        match build_stage(s) {
            Ok(r) => records.extend(r),
            Err(e) => eprintln!("warning: {}: {e}", s.instance.id),
        }
    }
    let w = open_output(output)?;
    scenealign::dpo::export_jsonl(&records, w).map_err(io_failure(output.unwrap_or(Path::new("<stdout>"))))?;
    Ok(())
}

fn cmd_dpo_check(beta: f64, trials: usize, seed: u64) -> CliResult {
    let cfg = DpoConfig {
        beta,
        ..DpoConfig::default()
    };
    cfg.validate().map_err(|e| Failure::Config(e.into()))?;
    let records: Vec<PreferenceRecord> = (0..3).map(|i| toy_record(i, "a b c a", "c d d")).collect();
    let policy = ToyPolicy::from_records(&records);
    let baseline = dpo_loss(&records, &policy, &policy, &cfg).expect("toy records score");
    println!("mean loss (policy == reference): {:.6}", baseline.mean_loss);

    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let theta: Vec<f64> = (0..policy.theta.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let reference = LogProbTable(
            ["a b c a", "c d d"]
                .iter()
                .map(|t| (t.to_string(), rng.random_range(-12.0..-1.0)))
                .collect(),
        );
        let p = policy.with_theta(theta.clone());
        let analytic = toy_policy_gradient(&p, &records, &reference, &cfg).expect("toy gradient");
        let h = 1e-5;
        let numeric: Vec<f64> = (0..theta.len())
            .map(|k| {
                let mut up = theta.clone();
                up[k] += h;
                let mut down = theta.clone();
                down[k] -= h;
                let f = |t: Vec<f64>| dpo_loss(&records, &policy.with_theta(t), &reference, &cfg).unwrap().mean_loss;
                (f(up) - f(down)) / (2.0 * h)
            })
            .collect();
        worst = worst.max(stats::relative_error(&analytic, &numeric));
    }
    let ok = worst <= 1e-5;
    println!(
        "gradient check: {trials} trials, max relative error {worst:.3e} [{}]",
        if ok { "PASS" } else { "FAIL" }
    );
    if ok {
        Ok(())
    } else {
        Err(Failure::Config(anyhow!("gradient check failed")))
    }
}

fn toy_record(i: usize, chosen: &str, rejected: &str) -> PreferenceRecord {
    PreferenceRecord {
        id: format!("toy#{i}"),
        context: Context {
            image: "toy.jpg".into(),
            question: "toy".into(),
            scene_graph: sample::grounded_subgraph().to_json(),
        },
        chosen: chosen.into(),
        rejected: rejected.into(),
        meta: RecordMeta {
            instance_id: "toy".into(),
            operator: "swap".into(),
            edits: Vec::new(),
            jaccard: Jaccard { shared: 1, union: 2 },
            diversity_rank: i,
            seed: 0,
        },
    }
}

fn cmd_stats(input: &Path, m: usize) -> CliResult {
    let file = fs::File::open(input).map_err(io_failure(input))?;
    let records = import_jsonl(io::BufReader::new(file))
        .with_context(|| input.display().to_string())
        .map_err(Failure::Corpus)?;
    print!("{}", stats::DatasetStats::from_records(&records).render(m));
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult {
    match cli.command {
        Command::Run {
            input,
            output,
            report,
            opts,
        } => cmd_run(input, output, report, &opts),
        Command::Parse { input, output, opts } => cmd_parse(&input, output.as_deref(), &opts),
        Command::Ground(a) => {
            let (cfg, backends) = a.opts.prepare()?;
            let states = map_states(read_states(&a.input)?, |s| ground_stage(s, &cfg, backends.generator.as_ref()));
            write_states(&states, a.output.as_deref())
        }
        Command::Perturb {
            stage,
            op: Some(op),
            graph,
            positive,
            target,
        } => {
            if stage.input.is_some() {
                return Err(Failure::Config(anyhow!("--op works on --graph, not on --input states")));
            }
            cmd_single_op(op, graph.as_deref(), positive.as_deref(), target.as_deref(), stage.opts.seed)
        }
        Command::Perturb { stage, .. } => {
            let input = stage
                .input
                .ok_or_else(|| Failure::Config(anyhow!("perturb needs --input states or --op")))?;
            let (cfg, _) = stage.opts.prepare()?;
            let states = map_states(read_states(&input)?, |s| perturb_stage(s, &cfg));
            write_states(&states, stage.output.as_deref())
        }
        Command::Select(a) => {
            let (cfg, backends) = a.opts.prepare()?;
            let states = map_states(read_states(&a.input)?, |s| select_stage(s, &cfg, &backends));
            write_states(&states, a.output.as_deref())
        }
        Command::Build(a) => cmd_build(&a.input, a.output.as_deref()),
        Command::DpoCheck { beta, trials, seed } => cmd_dpo_check(beta, trials, seed),
        Command::Stats { input, m } => cmd_stats(&input, m),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
