//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs with `cargo test -p scenealign --test acceptance`.

mod common;

use std::collections::HashMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scenealign::dpo::{dpo_loss, toy_policy_gradient, Context, DpoConfig, LogProbTable, PreferenceRecord, RecordMeta, ToyPolicy};
use scenealign::embed::{distance_matrix, Embedding};
use scenealign::generate::{render_negative_cot_prompt, render_positive_cot_prompt, render_scene_graph_prompt, RationaleRequest};
use scenealign::grounding::residual_pool;
use scenealign::perturb::{
    build_negative, overthink_with, recompose, replace_with, shorten, swap, OpTag, OverthinkMode, PlannedEdit,
};
use scenealign::pipeline::{run_pipeline, PipelineConfig};
use scenealign::scene_graph::{jaccard_overlap, parse_scene_graph, ElementKind};
use scenealign::select::{min_pairwise, select_diverse_from_matrix, within_bounds, SelectionConfig};
use scenealign::{sample, Attribute, Element, ElementRef, Jaccard, Relation, SceneGraph};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn graph(json: &str) -> SceneGraph {
    parse_scene_graph(json).expect("literal graph parses")
}

fn case_study_golden() -> Outcome {
    let sg_c = sample::grounded_subgraph();
    let expect = |name: &str, got: &SceneGraph, want: &str| {
        let want = graph(want);
        check(*got == want, || format!("{name}: got {}, want {}", got.to_json(), want.to_json()))
    };
    let swapped = swap(&sg_c, 0).map_err(|e| e.to_string())?.graph;
    expect(
        "swap",
        &swapped,
        r#"{"entity": ["man", "motorcycle", "paper", "ground"],
            "attribute pairs": [["motorcycle", "silver"], ["motorcycle", "parked"], ["paper", "white"], ["ground", "paved"]],
            "relationships": [["motorcycle", "look at", "man"], ["man", "crouch on", "ground"], ["man", "hold", "paper"],
                              ["motorcycle", "stand on", "ground"]]}"#,
    )?;
    let replaced = replace_with(&sg_c, ElementRef::entity(2), &Element::entity("window"))
        .map_err(|e| e.to_string())?
        .graph;
    expect(
        "replace",
        &replaced,
        r#"{"entity": ["man", "motorcycle", "window", "ground"],
            "attribute pairs": [["motorcycle", "silver"], ["motorcycle", "parked"], ["window", "white"], ["ground", "paved"]],
            "relationships": [["man", "look at", "motorcycle"], ["man", "crouch on", "ground"], ["man", "hold", "window"],
                              ["motorcycle", "stand on", "ground"]]}"#,
    )?;
    let shortened = shorten(&sg_c, ElementRef::entity(0)).map_err(|e| e.to_string())?.graph;
    expect(
        "shorten",
        &shortened,
        r#"{"entity": ["motorcycle", "paper", "ground"],
            "attribute pairs": [["motorcycle", "silver"], ["motorcycle", "parked"], ["paper", "white"], ["ground", "paved"]],
            "relationships": [["motorcycle", "stand on", "ground"]]}"#,
    )?;
    let overthought = overthink_with(&sg_c, &Element::Relation(Relation::new("building", "behind", "motorcycle")))
        .map_err(|e| e.to_string())?
        .graph;
    expect(
        "overthink",
        &overthought,
        r#"{"entity": ["man", "motorcycle", "paper", "ground", "building"],
            "attribute pairs": [["motorcycle", "silver"], ["motorcycle", "parked"], ["paper", "white"], ["ground", "paved"]],
            "relationships": [["man", "look at", "motorcycle"], ["man", "crouch on", "ground"], ["man", "hold", "paper"],
                              ["motorcycle", "stand on", "ground"], ["building", "behind", "motorcycle"]]}"#,
    )?;
    Ok("swap, replace, shorten and overthink match the worked example".into())
}

/// Element universe by nested loops over plain vectors.
fn naive_universe(g: &SceneGraph) -> Vec<(String, String)> {
    let mut items: Vec<(String, String)> = Vec::new();
    for a in g.attributes() {
        items.push((format!("attr:{}", a.entity), a.value.clone()));
    }
    for r in g.relations() {
        let pair = (format!("pair:{}", r.subject), r.object.clone());
        let mut seen = false;
        for x in &items {
            if *x == pair {
                seen = true;
            }
        }
        if !seen {
            items.push(pair);
        }
    }
    items
}

fn naive_jaccard(a: &SceneGraph, b: &SceneGraph) -> (usize, usize) {
    let (ua, ub) = (naive_universe(a), naive_universe(b));
    let mut shared = 0;
    for x in &ua {
        for y in &ub {
            if x == y {
                shared += 1;
            }
        }
    }
    (shared, ua.len() + ub.len() - shared)
}

fn jaccard_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..1000 {
        let a = common::random_graph(&mut rng, 8);
        let b = if rng.random_bool(0.5) {
            common::random_graph(&mut rng, 8)
        } else {
            common::random_subgraph(&mut rng, &a)
        };
        let j = jaccard_overlap(&a, &b);
        let (shared, union) = naive_jaccard(&a, &b);
        check(j.shared == shared && j.union == union, || {
            format!("trial {trial}: library {}/{}, oracle {shared}/{union}", j.shared, j.union)
        })?;
        let oracle_value = if union == 0 { 1.0 } else { shared as f64 / union as f64 };
        check(j.value().to_bits() == oracle_value.to_bits(), || format!("trial {trial}: value differs"))?;
        check(jaccard_overlap(&a, &a).value() == 1.0, || format!("trial {trial}: J(g, g) != 1"))?;
    }
    let (pos, sub) = (sample::scene_graph(), sample::grounded_subgraph());
    let pool = residual_pool(&pos, &sub).map_err(|e| e.to_string())?;
    let neg = recompose(&swap(&sub, 0).map_err(|e| e.to_string())?.graph, &pool);
    let j = jaccard_overlap(&neg, &pos);
    check(j == Jaccard { shared: 12, union: 14 }, || format!("swap negative measured {}/{}", j.shared, j.union))?;
    let cfg = SelectionConfig::default();
    check(!within_bounds(j.value(), cfg.gamma_lower, cfg.gamma_upper), || {
        "swap negative fell inside the default band".into()
    })?;
    Ok("1000 pairs exact; J(g,g)=1; case-study swap = 12/14, outside [0.3, 0.7]".into())
}

/// Lexicographically smallest subset maximizing the minimum distance, by
/// enumerating every bitmask.
fn brute_force_maxmin(dist: &[Vec<f64>], m: usize) -> (f64, Vec<usize>) {
    let n = dist.len();
    let mut best = (f64::NEG_INFINITY, Vec::new());
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != m {
            continue;
        }
        let subset: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
        let mut score = f64::INFINITY;
        for i in 0..subset.len() {
            for j in i + 1..subset.len() {
                score = score.min(dist[subset[i]][subset[j]]);
            }
        }
        if score > best.0 || (score == best.0 && subset < best.1) {
            best = (score, subset);
        }
    }
    best
}

fn maxmin_exact() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..500 {
        let m = *[2usize, 3, 4].choose(&mut rng).unwrap();
        let n = rng.random_range(m..=12);
        // small integer coordinates make distance ties common
        let points: Vec<Embedding> = (0..n)
            .map(|_| Embedding::new((0..3).map(|_| rng.random_range(0..4) as f64).collect()).unwrap())
            .collect();
        let dist = distance_matrix(&points).map_err(|e| e.to_string())?;
        let got = select_diverse_from_matrix(&dist, m, 15).map_err(|e| e.to_string())?;
        let (score, want) = brute_force_maxmin(&dist, m);
        let got_score = min_pairwise(&dist, &got);
        check(got_score == score && got == want, || {
            format!("trial {trial} (n={n}, m={m}): got {got:?} ({got_score}), brute force {want:?} ({score})")
        })?;
    }
    Ok("500 trials, n <= 12, m in {2,3,4}: same objective and index set as brute force".into())
}

fn record(id: usize, instance: &str, chosen: &str, rejected: &str) -> PreferenceRecord {
    PreferenceRecord {
        id: format!("{instance}#{id}"),
        context: Context {
            image: "img.jpg".into(),
            question: "q".into(),
            scene_graph: sample::grounded_subgraph().to_json(),
        },
        chosen: chosen.into(),
        rejected: rejected.into(),
        meta: RecordMeta {
            instance_id: instance.into(),
            operator: "swap".into(),
            edits: Vec::new(),
            jaccard: Jaccard { shared: 1, union: 2 },
            diversity_rank: id,
            seed: 0,
        },
    }
}

fn random_text<R: Rng>(rng: &mut R, vocab: &[&str]) -> String {
    (0..rng.random_range(1..=6))
        .map(|_| *vocab.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

fn dpo_evaluator() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let vocab = ["a", "b", "c", "d", "e", "f"];
    let mut worst_ln2: f64 = 0.0;
    let mut worst_grad: f64 = 0.0;
    let mut worst_shift: f64 = 0.0;
    for trial in 0..100 {
        let n = rng.random_range(1..=6);
        let records: Vec<PreferenceRecord> = (0..n)
            .map(|i| loop {
                let (c, r) = (random_text(&mut rng, &vocab), random_text(&mut rng, &vocab));
                if c != r {
                    break record(i, &format!("inst{}", i % 2), &c, &r);
                }
            })
            .collect();
        let beta = rng.random_range(0.01..2.0);
        let cfg = DpoConfig { beta, ..DpoConfig::default() };

        let mut table = HashMap::new();
        for r in &records {
            for t in [&r.chosen, &r.rejected] {
                table.insert(t.clone(), rng.random_range(-50.0..0.0));
            }
        }
        let table = LogProbTable(table);
        let same = dpo_loss(&records, &table, &table, &cfg).map_err(|e| e.to_string())?;
        worst_ln2 = worst_ln2.max((same.mean_loss - std::f64::consts::LN_2).abs());

        let base = ToyPolicy::from_records(&records);
        let theta: Vec<f64> = (0..base.theta.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let policy = base.with_theta(theta.clone());
        let analytic = toy_policy_gradient(&policy, &records, &table, &cfg).map_err(|e| e.to_string())?;
        let h = 1e-5;
        let loss_at = |t: Vec<f64>| dpo_loss(&records, &base.with_theta(t), &table, &cfg).unwrap().mean_loss;
        let mut diff2 = 0.0;
        let (mut na, mut nn) = (0.0, 0.0);
        for k in 0..theta.len() {
            let (mut up, mut down) = (theta.clone(), theta.clone());
            up[k] += h;
            down[k] -= h;
            let numeric = (loss_at(up) - loss_at(down)) / (2.0 * h);
            diff2 += (analytic[k] - numeric).powi(2);
            na += analytic[k] * analytic[k];
            nn += numeric * numeric;
        }
        let rel = diff2.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-8);
        check(rel <= 1e-5, || format!("trial {trial}: gradient relative error {rel:e}"))?;
        worst_grad = worst_grad.max(rel);

        // shift every response of the policy by a constant
        let c = rng.random_range(-100.0..100.0);
        let shifted = LogProbTable(
            records
                .iter()
                .flat_map(|r| [&r.chosen, &r.rejected])
                .map(|t| (t.clone(), policy.log_prob_of(t) + c))
                .collect(),
        );
        let plain = LogProbTable(
            records
                .iter()
                .flat_map(|r| [&r.chosen, &r.rejected])
                .map(|t| (t.clone(), policy.log_prob_of(t)))
                .collect(),
        );
        let a = dpo_loss(&records, &plain, &table, &cfg).map_err(|e| e.to_string())?.mean_loss;
        let b = dpo_loss(&records, &shifted, &table, &cfg).map_err(|e| e.to_string())?.mean_loss;
        worst_shift = worst_shift.max((a - b).abs());
    }
    check(worst_ln2 <= 1e-12, || format!("|loss - ln 2| reached {worst_ln2:e}"))?;
    check(worst_shift <= 1e-12, || format!("shift changed the loss by {worst_shift:e}"))?;
    Ok(format!(
        "max |loss - ln2| {worst_ln2:.1e}; max gradient rel err {worst_grad:.1e}; max shift delta {worst_shift:.1e}"
    ))
}

trait LogProbOf {
    fn log_prob_of(&self, text: &str) -> f64;
}

impl LogProbOf for ToyPolicy {
    fn log_prob_of(&self, text: &str) -> f64 {
        use scenealign::dpo::LogProbProvider;
        let ctx = Context {
            image: String::new(),
            question: String::new(),
            scene_graph: String::new(),
        };
        self.log_prob(&ctx, text).unwrap()
    }
}

fn synthetic_corpus(n: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    (0..n)
        .map(|i| {
            let g = loop {
                let g = common::random_graph(&mut rng, 7);
                if g.element_count() >= 3 {
                    break g;
                }
            };
            serde_json::json!({
                "id": format!("syn-{i:04}"),
                "image": format!("images/{i}.jpg"),
                "question": format!("What is the {} doing?", g.entities()[0]),
                "answer": common::PREDICATES.choose(&mut rng).unwrap(),
                "scene_graph": serde_json::from_str::<serde_json::Value>(&g.to_json()).unwrap(),
            })
            .to_string()
        })
        .collect()
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut lines = synthetic_corpus(200);
    let write = |name: &str, lines: &[String]| {
        let p = dir.path().join(name);
        fs::write(&p, lines.join("\n") + "\n").unwrap();
        p
    };
    let run = |input: &std::path::Path, out: &str| -> Result<Vec<u8>, String> {
        let cfg = PipelineConfig {
            input: input.to_owned(),
            output: dir.path().join(out),
            seed: 2024,
            ..PipelineConfig::default()
        };
        run_pipeline(&cfg).map_err(|e| e.to_string())?;
        fs::read(&cfg.output).map_err(|e| e.to_string())
    };
    let corpus = write("corpus.jsonl", &lines);
    let first = run(&corpus, "a.jsonl")?;
    let second = run(&corpus, "b.jsonl")?;
    check(first == second, || "two runs differ".into())?;
    lines.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    let permuted = run(&write("permuted.jsonl", &lines), "c.jsonl")?;
    let sorted = |b: &[u8]| {
        let mut l: Vec<&str> = std::str::from_utf8(b).unwrap().lines().collect();
        l.sort();
        l.join("\n")
    };
    check(sorted(&first) == sorted(&permuted), || "permuted corpus changed the records".into())?;
    let count = first.iter().filter(|&&b| b == b'\n').count();
    check(count > 0, || "no records produced".into())?;
    Ok(format!("200 instances, {count} records, byte-identical across runs and permutation"))
}

fn random_plan<R: Rng>(rng: &mut R, g: &SceneGraph, pool_elems: &[Element]) -> Vec<PlannedEdit> {
    (0..rng.random_range(1..=4))
        .map(|_| {
            let tag = *OpTag::ALL.choose(rng).unwrap();
            let target = rng.random_bool(0.5).then(|| {
                let kind = *[ElementKind::Entity, ElementKind::Attribute, ElementKind::Relation].choose(rng).unwrap();
                ElementRef {
                    kind,
                    index: rng.random_range(0..=g.element_count()),
                }
            });
            let payload = if rng.random_bool(0.3) {
                pool_elems.choose(rng).cloned()
            } else if rng.random_bool(0.2) {
                Some(match rng.random_range(0..3) {
                    0 => Element::entity(*common::ENTITIES.choose(rng).unwrap()),
                    1 => Element::Attribute(Attribute::new(*common::ENTITIES.choose(rng).unwrap(), "odd")),
                    _ => Element::Relation(Relation::new("x", "y", "z")),
                })
            } else {
                None
            };
            PlannedEdit { tag, target, payload }
        })
        .collect()
}

fn fuzz() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut built, mut rejected) = (0, 0);
    for trial in 0..10_000 {
        let pos = common::random_graph(&mut rng, 8);
        let sub = common::random_subgraph(&mut rng, &pos);
        let pool = residual_pool(&pos, &sub).map_err(|e| format!("trial {trial}: {e}"))?;
        let pool_elems: Vec<Element> = pool.elements().collect();
        let plan = random_plan(&mut rng, &sub, &pool_elems);
        let mode = if rng.random_bool(0.5) { OverthinkMode::Reject } else { OverthinkMode::PromptContext };
        let seed = rng.random();
        let result = catch_unwind(AssertUnwindSafe(|| build_negative(&pos, &sub, &pool, &plan, mode, seed)))
            .map_err(|_| format!("trial {trial}: panic on plan {plan:?}"))?;
        match result {
            Ok(c) => {
                built += 1;
                c.graph.validate().map_err(|e| format!("trial {trial}: invalid graph: {e}"))?;
                if let Some(p) = &c.prompt_graph {
                    p.validate().map_err(|e| format!("trial {trial}: invalid prompt graph: {e}"))?;
                    check(*p != sub, || format!("trial {trial}: prompt graph equals the subgraph"))?;
                } else {
                    check(c.graph != pos, || format!("trial {trial}: emitted SG- == SG+"))?;
                }
            }
            Err(_) => rejected += 1,
        }
    }
    Ok(format!("10000 trials: {built} negatives valid and distinct from SG+, {rejected} rejected edits, no panics"))
}

fn prompt_fidelity() -> Outcome {
    let golden = |name: &str| -> Result<String, String> {
        let path = format!("{}/tests/golden/{name}", env!("CARGO_MANIFEST_DIR"));
        let text = fs::read_to_string(&path).map_err(|e| format!("{path}: {e}"))?;
        Ok(text.strip_suffix('\n').unwrap_or(&text).to_owned())
    };
    let inst = sample::instance();
    let (pos, sub) = (sample::scene_graph(), sample::grounded_subgraph());
    let sg_prompt = render_scene_graph_prompt(&inst).map_err(|e| e.to_string())?;
    check(sg_prompt == golden("scene_graph_prompt.txt")?, || "scene-graph prompt differs from golden".into())?;
    let positive = render_positive_cot_prompt(&pos, &inst).map_err(|e| e.to_string())?;
    check(positive == golden("positive_cot_prompt.txt")?, || "positive prompt differs from golden".into())?;
    let pool = residual_pool(&pos, &sub).map_err(|e| e.to_string())?;
    let neg = recompose(&swap(&sub, 0).map_err(|e| e.to_string())?.graph, &pool);
    let negative = render_negative_cot_prompt(&neg, &inst);
    check(negative == golden("negative_cot_prompt.txt")?, || "negative prompt differs from golden".into())?;
    check(!negative.contains(sample::ANSWER), || "negative prompt contains the answer".into())?;
    check(!negative.contains("image"), || "negative prompt mentions the image".into())?;
    let req = RationaleRequest::negative(&neg, &inst);
    check(req.image.is_none() && req.answer.is_none(), || "negative request carries image or answer".into())?;
    Ok("scene-graph, positive and negative prompts match golden files; negative has no answer or image".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 7] = [
        ("case-study golden", case_study_golden, Duration::from_secs(1)),
        ("jaccard oracle", jaccard_oracle, Duration::from_secs(5)),
        ("max-min selection", maxmin_exact, Duration::from_secs(30)),
        ("dpo evaluator", dpo_evaluator, Duration::from_secs(10)),
        ("determinism", determinism, Duration::from_secs(60)),
        ("well-formedness fuzz", fuzz, Duration::from_secs(60)),
        ("prompt fidelity", prompt_fidelity, Duration::from_secs(1)),
    ];
    let mut failed = 0;
    for (name, run, limit) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > limit => Err(format!("{detail}; took {elapsed:.2?}, limit {limit:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS  {name:<22} {elapsed:>10.2?}  {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name:<22} {elapsed:>10.2?}  {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
