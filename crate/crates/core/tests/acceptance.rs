//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line, with its runtime against the budget.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use phenokg::cohortstats::phenotype_frequency;
use phenokg::corpus::{
    synthesize_fixture, synthesize_multilabel_fixture, synthesize_span_fixture, Document, EntityType, HpoGoldRecord,
    MultiLabelRecord, SpanAnnotation, SpanDocument, LABEL_UNIVERSE,
};
use phenokg::discovery::{run_funnel, FunnelConfig, FunnelReport, STAGE_CANDIDATES, STAGE_FINALISTS};
use phenokg::evaluation::{
    score_hpo, score_multilabel, score_ner, MatchPolicy, MetricReport, NerPrediction, HPO_KEY, MACRO_KEY,
};
use phenokg::extraction::{
    build_prompt, glean_prompt, parse_model_output, AuditLog, DynamicFewShot, Evidence, ExamplePool, ExampleSelector,
    Extraction, Extractor, FewShotExample, GleanConfig, HpoExtraction, HpoTask, Mention, MultiLabelResult,
    MultiLabelTask, NerResult, NerTask, OutputSchema, ParsedOutput, PromptTemplates, TaskFamily, ZeroShot,
};
use phenokg::fixtures;
use phenokg::kg::{CohortMode, KnowledgeGraph};
use phenokg::llm::{
    Cassette, ChatBackend, ChatRequest, ChatResponse, LlmClient, RecordingBackend, ReplayBackend, ScriptedBackend,
    Usage,
};
use phenokg::ontology::{frequency_bin, frequency_bin_f64, Fraction, FrequencyCategory, Ontology, TermId};
use phenokg::retrieval::{Embedder, EmbeddingIndex, HashedBowEmbedder};
use phenokg::Error;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (u32, &'static str, u64, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn main() {
    let criteria: Vec<Criterion> = vec![
        (1, "metric oracle equivalence", 5, metric_oracle),
        (2, "frequency binning regression", 1, frequency_binning),
        (3, "gleaning monotonicity", 5, gleaning),
        (4, "dynamic few-shot correctness", 10, dynamic_fewshot),
        (5, "end-to-end oracle run", 30, end_to_end),
        (6, "output-contract robustness", 30, output_contract),
        (7, "kg integrity and round-trip", 5, kg_integrity),
        (8, "discovery funnel recovery", 60, funnel_recovery),
        (9, "concurrency bound", 5, concurrency),
    ];
    let mut failed = 0;
    for (n, name, budget, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(check).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > Duration::from_secs(budget) => Err(format!(
                "{detail}; over budget ({:.2}s > {budget}s)",
                elapsed.as_secs_f64()
            )),
            other => other,
        };
        match outcome {
            Ok(detail) => println!(
                "PASS [{n}] {name} ({:.2}s / {budget}s): {detail}",
                elapsed.as_secs_f64()
            ),
            Err(why) => {
                failed += 1;
                println!("FAIL [{n}] {name} ({:.2}s / {budget}s): {why}", elapsed.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}

// ---------------------------------------------------------------- 1

/// Reference P/R/F1 written directly from the definitions.
fn oracle_prf(tp: u64, fp: u64, fn_: u64) -> (f64, f64, f64) {
    if tp + fp + fn_ == 0 {
        return (1.0, 1.0, 1.0);
    }
    let p = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let r = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

/// Brute-force counts over deduplicated lists.
fn oracle_counts<T: PartialEq + Clone>(gold: &[T], pred: &[T]) -> (u64, u64, u64) {
    let dedup = |xs: &[T]| {
        let mut out: Vec<T> = Vec::new();
        for x in xs {
            if !out.contains(x) {
                out.push(x.clone());
            }
        }
        out
    };
    let (g, p) = (dedup(gold), dedup(pred));
    let tp = g.iter().filter(|x| p.contains(x)).count() as u64;
    (tp, p.len() as u64 - tp, g.len() as u64 - tp)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

fn check_key(report: &MetricReport, key: &str, counts: (u64, u64, u64), prf: (f64, f64, f64)) -> Result<(), String> {
    let s = report.get(key).ok_or_else(|| format!("missing key {key}"))?;
    ensure!(
        (s.counts.tp, s.counts.fp, s.counts.fn_) == counts,
        "{key}: counts {:?} vs oracle {counts:?}",
        (s.counts.tp, s.counts.fp, s.counts.fn_)
    );
    ensure!(
        close(s.precision, prf.0) && close(s.recall, prf.1) && close(s.f1, prf.2),
        "{key}: metrics ({}, {}, {}) vs oracle {prf:?}",
        s.precision,
        s.recall,
        s.f1
    );
    Ok(())
}

fn oracle_normalize(s: &str) -> String {
    s.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

const SURFACES: [&str; 8] = [
    "aspirin",
    "Aspirin",
    "lithium  carbonate",
    "Lithium carbonate",
    "tremor",
    "renal failure",
    "Renal Failure",
    "nausea",
];

fn random_span_doc(rng: &mut ChaCha8Rng, id: &str) -> SpanDocument {
    let mut text = String::new();
    let mut annotations = Vec::new();
    for _ in 0..rng.gen_range(0..5) {
        if !text.is_empty() {
            text.push_str(" and ");
        }
        let surface = SURFACES[rng.gen_range(0..SURFACES.len())];
        let start = text.chars().count();
        text.push_str(surface);
        annotations.push(SpanAnnotation {
            start,
            end: start + surface.chars().count(),
            surface: surface.to_string(),
            entity_type: if rng.gen_bool(0.5) {
                EntityType::Chemical
            } else {
                EntityType::Disease
            },
            concept_id: None,
        });
    }
    SpanDocument {
        document: Document {
            doc_id: id.to_string(),
            text,
        },
        annotations,
    }
}

fn metric_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let types = [EntityType::Chemical, EntityType::Disease];
    for case in 0..200 {
        // NER, both matching policies that work on span predictions
        let n_docs = rng.gen_range(1..4);
        let ids: Vec<String> = (0..n_docs).map(|i| format!("d{i}")).collect();
        let gold: Vec<SpanDocument> = ids.iter().map(|id| random_span_doc(&mut rng, id)).collect();
        let pred: Vec<SpanDocument> = ids.iter().map(|id| random_span_doc(&mut rng, id)).collect();
        let as_mentions: Vec<NerPrediction> = pred
            .iter()
            .map(|d| {
                NerPrediction::Mentions(NerResult {
                    doc_id: d.document.doc_id.clone(),
                    mentions: d
                        .annotations
                        .iter()
                        .filter_map(|a| Mention::new(&a.surface, a.entity_type))
                        .collect(),
                })
            })
            .collect();
        let as_spans: Vec<NerPrediction> = pred.iter().cloned().map(NerPrediction::Spans).collect();
        for (policy, preds) in [
            (MatchPolicy::NormalizedMentionSet, &as_mentions),
            (MatchPolicy::ExactSpan, &as_spans),
        ] {
            let report = score_ner(&gold, preds, policy).map_err(|e| e.to_string())?;
            for ty in types {
                let mut total = (0, 0, 0);
                for (g, p) in gold.iter().zip(&pred) {
                    let keys = |d: &SpanDocument| -> Vec<String> {
                        d.annotations
                            .iter()
                            .filter(|a| a.entity_type == ty)
                            .map(|a| match policy {
                                MatchPolicy::ExactSpan => format!("{}:{}", a.start, a.end),
                                _ => oracle_normalize(&a.surface),
                            })
                            .collect()
                    };
                    let c = oracle_counts(&keys(g), &keys(p));
                    total = (total.0 + c.0, total.1 + c.1, total.2 + c.2);
                }
                check_key(&report, ty.as_str(), total, oracle_prf(total.0, total.1, total.2))
                    .map_err(|e| format!("ner case {case} {policy:?}: {e}"))?;
            }
        }

        // HPO
        let pool: Vec<TermId> = (1..12).map(|i| TermId::new(&format!("HP:{:07}", i)).unwrap()).collect();
        let mut gold = Vec::new();
        let mut pred = Vec::new();
        let mut total = (0, 0, 0);
        for id in &ids {
            let g: Vec<TermId> = (0..rng.gen_range(0..5))
                .map(|_| pool[rng.gen_range(0..pool.len())].clone())
                .collect();
            let p: Vec<TermId> = (0..rng.gen_range(0..5))
                .map(|_| pool[rng.gen_range(0..pool.len())].clone())
                .collect();
            let c = oracle_counts(&g, &p);
            total = (total.0 + c.0, total.1 + c.1, total.2 + c.2);
            gold.push(HpoGoldRecord {
                doc_id: id.clone(),
                text: String::new(),
                hpo_ids: g.into_iter().collect(),
            });
            let mut h = HpoExtraction::new(id.clone());
            for t in p {
                h.assert_term(
                    t,
                    Evidence {
                        confidence: rng.gen(),
                        reasoning: String::new(),
                    },
                );
            }
            pred.push(h);
        }
        let report = score_hpo(&gold, &pred).map_err(|e| e.to_string())?;
        check_key(&report, HPO_KEY, total, oracle_prf(total.0, total.1, total.2))
            .map_err(|e| format!("hpo case {case}: {e}"))?;

        // multilabel
        let mut gold = Vec::new();
        let mut pred = Vec::new();
        for id in &ids {
            let pick = |rng: &mut ChaCha8Rng| -> BTreeSet<String> {
                LABEL_UNIVERSE
                    .iter()
                    .filter(|_| rng.gen_bool(0.2))
                    .map(|s| s.to_string())
                    .collect()
            };
            gold.push(MultiLabelRecord {
                doc_id: id.clone(),
                text: String::new(),
                labels: pick(&mut rng),
            });
            pred.push(MultiLabelResult {
                doc_id: id.clone(),
                labels: pick(&mut rng),
            });
        }
        let report = score_multilabel(&gold, &pred).map_err(|e| e.to_string())?;
        let (mut sum, mut mp, mut mr, mut mf, mut correct) = ((0, 0, 0), 0.0, 0.0, 0.0, 0u64);
        for label in LABEL_UNIVERSE {
            let mut c = (0, 0, 0);
            for (g, p) in gold.iter().zip(&pred) {
                let (gi, pi) = (g.labels.contains(label), p.labels.contains(label));
                match (gi, pi) {
                    (true, true) => c.0 += 1,
                    (false, true) => c.1 += 1,
                    (true, false) => c.2 += 1,
                    _ => {}
                }
                correct += u64::from(gi == pi);
            }
            let prf = oracle_prf(c.0, c.1, c.2);
            check_key(&report, label, c, prf).map_err(|e| format!("multilabel case {case}: {e}"))?;
            sum = (sum.0 + c.0, sum.1 + c.1, sum.2 + c.2);
            mp += prf.0;
            mr += prf.1;
            mf += prf.2;
        }
        let n = LABEL_UNIVERSE.len() as f64;
        check_key(&report, MACRO_KEY, sum, (mp / n, mr / n, mf / n))
            .map_err(|e| format!("multilabel case {case}: {e}"))?;
        let acc = correct as f64 / (ids.len() * LABEL_UNIVERSE.len()) as f64;
        ensure!(
            report.micro_accuracy.is_some_and(|a| close(a, acc)),
            "multilabel case {case}: micro accuracy {:?} vs oracle {acc}",
            report.micro_accuracy
        );
    }
    Ok("200 instances x 3 task families match the brute-force oracle".into())
}

// ---------------------------------------------------------------- 2

fn frequency_binning() -> Check {
    let o = fixtures::dravet_ontology();
    let counts: BTreeMap<TermId, u64> = fixtures::dravet_counts().into_iter().collect();
    let complex = TermId::new("HP:0011172").unwrap();
    let simple = TermId::new("HP:0002373").unwrap();
    ensure!(
        counts[&complex] == 34 && counts[&simple] == 24,
        "fixture counts differ from the published table"
    );
    ensure!(
        frequency_bin(Fraction::new(34, 38).unwrap()) == FrequencyCategory::VeryFrequent,
        "34/38 not VeryFrequent"
    );
    ensure!(
        frequency_bin(Fraction::new(24, 38).unwrap()) == FrequencyCategory::Frequent,
        "24/38 not Frequent"
    );

    // same fractions through the graph: fixture cohort → frequency → bin
    let f = fixtures::dravet_fixture(&o).map_err(|e| e.to_string())?;
    let terms: BTreeSet<TermId> = [complex.clone(), simple.clone()].into();
    let freq = phenotype_frequency(&f.graph, &f.cohort, &terms, &o, 0.0).map_err(|e| e.to_string())?;
    ensure!(
        freq[&complex].fraction == Fraction::new(34, 38).unwrap(),
        "graph frequency {}",
        freq[&complex].fraction
    );
    ensure!(
        freq[&simple].fraction == Fraction::new(24, 38).unwrap(),
        "graph frequency {}",
        freq[&simple].fraction
    );

    // sweep at 0.001 steps; record where the category changes
    let mut changes = Vec::new();
    let mut prev = None;
    for i in 0..=1000u64 {
        let exact = frequency_bin(Fraction::new(i, 1000).unwrap());
        let float = frequency_bin_f64(i as f64 / 1000.0).map_err(|e| e.to_string())?;
        ensure!(exact == float, "exact and float bins disagree at {i}/1000");
        if prev != Some(exact) {
            changes.push(i);
        }
        prev = Some(exact);
    }
    // Categories change at 0 → first nonzero, and at 5/30/80/100 %.
    ensure!(
        changes == vec![0, 1, 50, 300, 800, 1000],
        "category changes at {changes:?}"
    );
    // Nominally the Very rare band starts at 1 %; anything non-zero below it
    // lands in the same bin rather than being left unmapped.
    let at = |i| frequency_bin(Fraction::new(i, 1000).unwrap());
    ensure!(
        at(10) == FrequencyCategory::VeryRare && at(9) == FrequencyCategory::VeryRare,
        "1% edge not Very rare"
    );
    ensure!(
        at(49) == FrequencyCategory::VeryRare && at(50) == FrequencyCategory::Occasional,
        "5% edge"
    );
    ensure!(
        at(299) == FrequencyCategory::Occasional && at(300) == FrequencyCategory::Frequent,
        "30% edge"
    );
    ensure!(
        at(799) == FrequencyCategory::Frequent && at(800) == FrequencyCategory::VeryFrequent,
        "80% edge"
    );
    ensure!(
        at(999) == FrequencyCategory::VeryFrequent && at(1000) == FrequencyCategory::Obligate,
        "100% edge"
    );
    Ok("34/38 Very frequent, 24/38 Frequent; sweep edges at 1/5/30/80/100 %".into())
}

// ---------------------------------------------------------------- 3

fn ner_output(mentions: &[(String, EntityType)]) -> String {
    let items: Vec<_> = mentions
        .iter()
        .map(|(t, ty)| serde_json::json!({"text": t, "type": ty.as_str()}))
        .collect();
    serde_json::json!({ "entities": items }).to_string()
}

fn doc_from_mentions(id: &str, mentions: &[(String, EntityType)]) -> SpanDocument {
    let mut text = String::from("Abstract.");
    let mut annotations = Vec::new();
    for (surface, ty) in mentions {
        text.push(' ');
        let start = text.chars().count();
        text.push_str(surface);
        annotations.push(SpanAnnotation {
            start,
            end: start + surface.chars().count(),
            surface: surface.clone(),
            entity_type: *ty,
            concept_id: None,
        });
    }
    SpanDocument {
        document: Document {
            doc_id: id.into(),
            text,
        },
        annotations,
    }
}

fn gleaning() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    const ROUNDS: usize = 5; // initial + 4 gleans
                             // Per doc: gold mentions split over stages; each round's reply carries
                             // its stage plus a random sample of earlier ones, so replies alone are
                             // not monotone.
    let mut gold_docs = Vec::new();
    let mut stages: BTreeMap<String, Vec<Vec<(String, EntityType)>>> = BTreeMap::new();
    for d in 0..30 {
        let id = format!("doc-{d:02}");
        let all: Vec<(String, EntityType)> = (0..rng.gen_range(4..12))
            .map(|i| {
                (
                    format!("agent{d}x{i}"),
                    if i % 2 == 0 {
                        EntityType::Chemical
                    } else {
                        EntityType::Disease
                    },
                )
            })
            .collect();
        let mut per_round: Vec<Vec<(String, EntityType)>> = vec![Vec::new(); ROUNDS];
        for (i, m) in all.iter().enumerate() {
            // the staged doc-00 yields something new in round 1
            let r = if d == 0 { i.min(1) } else { rng.gen_range(0..ROUNDS + 1) };
            if r < ROUNDS {
                per_round[r].push(m.clone());
            }
        }
        gold_docs.push(doc_from_mentions(&id, &all));
        stages.insert(id, per_round);
    }
    let stages = Arc::new(stages);
    let script_stages = stages.clone();
    let backend = ScriptedBackend::new(move |req, call| {
        let (id, round) = req.request_tag.rsplit_once('#').expect("tagged request");
        let round: usize = round.parse().unwrap();
        let per_round = &script_stages[id];
        let mut reply = per_round[round].clone();
        for earlier in &per_round[..round] {
            reply.extend(earlier.iter().filter(|_| call % 2 == 0).cloned());
        }
        Ok(ner_output(&reply))
    });
    let client = LlmClient::new(Arc::new(backend), 4);
    let task = NerTask::new(PromptTemplates::default());
    let extractor =
        Extractor::new(&task, &ZeroShot, &client).with_glean(GleanConfig::new(4).map_err(|e| e.to_string())?);
    let docs: Vec<Document> = gold_docs.iter().map(|d| d.document.clone()).collect();
    let mut audit = AuditLog::default();
    let rounds = extractor.extract_rounds(&docs, &mut audit);

    let mut per_round: Vec<Vec<NerPrediction>> = vec![Vec::new(); ROUNDS];
    for (doc, result) in docs.iter().zip(rounds) {
        let history = result.map_err(|e| format!("{}: {e}", doc.doc_id))?;
        ensure!(history.len() == ROUNDS, "{} has {} rounds", doc.doc_id, history.len());
        for r in 1..ROUNDS {
            let (prev, cur) = (history[r - 1].entity_keys(), history[r].entity_keys());
            ensure!(cur.is_superset(&prev), "{} round {r} lost entities", doc.doc_id);
        }
        for (r, e) in history.into_iter().enumerate() {
            let Extraction::Ner(n) = e else {
                return Err("non-NER result".into());
            };
            per_round[r].push(NerPrediction::Mentions(n));
        }
    }
    let recall = |preds: &[NerPrediction], docs: &[SpanDocument]| -> Result<f64, String> {
        let report = score_ner(docs, preds, MatchPolicy::NormalizedMentionSet).map_err(|e| e.to_string())?;
        let (tp, fn_) = report
            .per_key
            .values()
            .fold((0, 0), |acc, s| (acc.0 + s.counts.tp, acc.1 + s.counts.fn_));
        Ok(tp as f64 / (tp + fn_) as f64)
    };
    let mut prev = -1.0;
    let mut curve = Vec::new();
    for preds in &per_round {
        let r = recall(preds, &gold_docs)?;
        ensure!(r >= prev, "recall fell from {prev} to {r}");
        curve.push(format!("{r:.3}"));
        prev = r;
    }
    let staged = |r: usize| recall(&per_round[r][..1], &gold_docs[..1]);
    let (r0, r1) = (staged(0)?, staged(1)?);
    ensure!(
        r1 > r0,
        "staged fixture recall did not rise after one glean ({r0} → {r1})"
    );
    Ok(format!(
        "supersets hold over 4 gleans; recall {}; staged {r0:.3} → {r1:.3}",
        curve.join(" → ")
    ))
}

// ---------------------------------------------------------------- 4

const WORDS: [&str; 24] = [
    "seizure",
    "fever",
    "infant",
    "ataxia",
    "delay",
    "speech",
    "tremor",
    "gait",
    "sleep",
    "iron",
    "mri",
    "eeg",
    "status",
    "myoclonic",
    "absence",
    "tonic",
    "clonic",
    "hypotonia",
    "autism",
    "regression",
    "dystonia",
    "drooling",
    "attention",
    "behaviour",
];

fn random_text(rng: &mut ChaCha8Rng) -> String {
    (0..rng.gen_range(3..10))
        .map(|_| WORDS[rng.gen_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na * nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

fn dynamic_fewshot() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let embedder = Arc::new(HashedBowEmbedder::default());
    let mut items: Vec<(String, String)> = (0..500).map(|i| (format!("p{i:03}"), random_text(&mut rng))).collect();
    // exact duplicates under other ids force score ties
    for i in 0..40 {
        let src = items[i * 7].1.clone();
        items[i * 11 + 3].1 = src;
    }
    let index = EmbeddingIndex::build(embedder.as_ref(), &items).map_err(|e| e.to_string())?;
    let vectors: BTreeMap<&str, Vec<f64>> = items
        .iter()
        .map(|(id, _)| (id.as_str(), index.get(id).unwrap().values().to_vec()))
        .collect();
    let ranking = |q: &[f64], skip: &dyn Fn(&str) -> bool| -> Vec<(String, f64)> {
        let mut all: Vec<(String, f64)> = vectors
            .iter()
            .filter(|(id, _)| !skip(id))
            .map(|(id, v)| (id.to_string(), oracle_cosine(q, v)))
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        all
    };

    let mut ties = 0;
    for _ in 0..100 {
        let text = if rng.gen_bool(0.5) {
            items[rng.gen_range(0..items.len())].1.clone()
        } else {
            random_text(&mut rng)
        };
        let q = embedder.embed(&[text]).map_err(|e| e.to_string())?.pop().unwrap();
        let got = index.top_k(&q, 5).map_err(|e| e.to_string())?;
        let want: Vec<(String, f64)> = ranking(q.values(), &|_| false).into_iter().take(5).collect();
        ensure!(got.len() == 5, "top_k returned {} items", got.len());
        for (g, w) in got.iter().zip(&want) {
            ensure!(g.0 == w.0 && close(g.1, w.1), "top_k {got:?} vs exhaustive {want:?}");
        }
        ties += got.windows(2).filter(|w| w[0].1 == w[1].1).count();
    }

    // self-exclusion through the selector
    let pool = Arc::new(
        ExamplePool::new(
            items
                .iter()
                .map(|(id, text)| FewShotExample {
                    document: Document {
                        doc_id: id.clone(),
                        text: text.clone(),
                    },
                    gold: Extraction::MultiLabel(MultiLabelResult {
                        doc_id: id.clone(),
                        labels: BTreeSet::new(),
                    }),
                })
                .collect(),
        )
        .map_err(|e| e.to_string())?,
    );
    let selector = DynamicFewShot::with_index(pool, 5, Arc::new(index), embedder.clone()).map_err(|e| e.to_string())?;
    for i in (0..items.len()).step_by(25) {
        let (id, text) = &items[i];
        let doc = Document {
            doc_id: id.clone(),
            text: text.clone(),
        };
        let picked: Vec<String> = selector
            .select(&doc)
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|e| e.document.doc_id)
            .collect();
        ensure!(!picked.contains(id), "{id} selected as its own example");
        let q = &vectors[id.as_str()];
        let want: Vec<String> = ranking(q, &|other| {
            other == id || items.iter().any(|(o, t)| o == other && t == text)
        })
        .into_iter()
        .take(5)
        .map(|(id, _)| id)
        .collect();
        ensure!(picked == want, "selection for {id}: {picked:?} vs {want:?}");
    }
    Ok(format!(
        "100 queries match exhaustive ranking ({ties} tied neighbours); self excluded"
    ))
}

// ---------------------------------------------------------------- 5

struct Case {
    task: Box<dyn TaskFamily>,
    docs: Vec<Document>,
    gold: Vec<Extraction>,
}

fn cassette_for(case: &Case, replies: &[Extraction], glean: bool) -> Result<Cassette, String> {
    let mut cassette = Cassette::new();
    for (doc, reply) in case.docs.iter().zip(replies) {
        let base = build_prompt(case.task.as_ref(), doc, &ZeroShot).map_err(|e| e.to_string())?;
        cassette.insert(&base, reply.to_model_output());
        if glean {
            cassette.insert(&glean_prompt(case.task.as_ref(), &base, reply), reply.to_model_output());
        }
    }
    Ok(cassette)
}

fn run_case(case: &Case, cassette: Cassette, glean: u32) -> Result<Vec<Extraction>, String> {
    let client = LlmClient::new(Arc::new(ReplayBackend::new(cassette)), 4);
    let extractor = Extractor::new(case.task.as_ref(), &ZeroShot, &client).with_glean(GleanConfig::new(glean).unwrap());
    let mut audit = AuditLog::default();
    let out: Result<Vec<_>, _> = extractor.extract_many(&case.docs, &mut audit).into_iter().collect();
    let out = out.map_err(|e| e.to_string())?;
    ensure!(audit.is_empty(), "audit not empty: {:?}", audit.entries);
    Ok(out)
}

fn score(
    case_name: &str,
    pred: &[Extraction],
    spans: &[SpanDocument],
    hpo: &[HpoGoldRecord],
    ml: &[MultiLabelRecord],
) -> Result<MetricReport, String> {
    let r = match case_name {
        "ner" => score_ner(
            spans,
            &pred
                .iter()
                .map(|p| NerPrediction::Mentions(p.as_ner().unwrap().clone()))
                .collect::<Vec<_>>(),
            MatchPolicy::NormalizedMentionSet,
        ),
        "hpo" => score_hpo(
            hpo,
            &pred.iter().map(|p| p.as_hpo().unwrap().clone()).collect::<Vec<_>>(),
        ),
        _ => score_multilabel(
            ml,
            &pred
                .iter()
                .map(|p| p.as_multilabel().unwrap().clone())
                .collect::<Vec<_>>(),
        ),
    };
    r.map_err(|e| e.to_string())
}

fn all_perfect(r: &MetricReport) -> bool {
    r.per_key
        .values()
        .all(|s| s.precision == 1.0 && s.recall == 1.0 && s.f1 == 1.0)
        && r.micro_accuracy.is_none_or(|a| a == 1.0)
}

fn summed(r: &MetricReport, keys: &[&str]) -> (u64, u64, u64) {
    keys.iter().fold((0, 0, 0), |acc, k| {
        let c = r.get(k).unwrap().counts;
        (acc.0 + c.tp, acc.1 + c.fp, acc.2 + c.fn_)
    })
}

fn end_to_end() -> Check {
    let o = Arc::new(fixtures::dravet_ontology());
    let hpo = synthesize_fixture(5, &o, 25, 3).map_err(|e| e.to_string())?;
    let spans = synthesize_span_fixture(5, 25, 2).map_err(|e| e.to_string())?;
    let ml = synthesize_multilabel_fixture(5, 25).map_err(|e| e.to_string())?;
    let cases: Vec<(&str, Case)> = vec![
        (
            "ner",
            Case {
                task: Box::new(NerTask::new(PromptTemplates::default())),
                docs: spans.iter().map(|d| d.document.clone()).collect(),
                gold: spans.iter().map(Extraction::from_span_gold).collect(),
            },
        ),
        (
            "hpo",
            Case {
                task: Box::new(HpoTask::new(o.clone(), PromptTemplates::default())),
                docs: hpo.iter().map(HpoGoldRecord::document).collect(),
                gold: hpo.iter().map(Extraction::from_hpo_gold).collect(),
            },
        ),
        (
            "multilabel",
            Case {
                task: Box::new(MultiLabelTask::new(PromptTemplates::default())),
                docs: ml.iter().map(MultiLabelRecord::document).collect(),
                gold: ml.iter().map(Extraction::from_multilabel_gold).collect(),
            },
        ),
    ];
    let extra_term = o
        .lookup_name("Parkinsonism")
        .cloned()
        .ok_or("fixture lacks Parkinsonism")?;
    let mut notes = Vec::new();
    for (name, case) in &cases {
        // perfect replay, with one glean round
        let pred = run_case(case, cassette_for(case, &case.gold, true)?, 1)?;
        let report = score(name, &pred, &spans, &hpo, &ml)?;
        ensure!(
            all_perfect(&report),
            "{name}: replay of gold is not perfect: {report:?}"
        );
        let keys: Vec<&str> = match *name {
            "ner" => vec!["Chemical", "Disease"],
            "hpo" => vec![HPO_KEY],
            _ => LABEL_UNIVERSE.to_vec(),
        };
        let base = summed(&report, &keys);

        // mutate one response: drop one gold item → exactly one more FN
        let victim = case
            .gold
            .iter()
            .position(|g| g.len() >= 2)
            .ok_or("no doc with two items")?;
        let mut dropped = case.gold.clone();
        dropped[victim] = match &case.gold[victim] {
            Extraction::Ner(n) => {
                let mut n = n.clone();
                let first = n.mentions.iter().next().unwrap().clone();
                n.mentions.remove(&first);
                Extraction::Ner(n)
            }
            Extraction::Hpo(h) => {
                let mut h = h.clone();
                let first = h.assertions.keys().next().unwrap().clone();
                h.assertions.remove(&first);
                Extraction::Hpo(h)
            }
            Extraction::MultiLabel(m) => {
                let mut m = m.clone();
                let first = m.labels.iter().next().unwrap().clone();
                m.labels.remove(&first);
                Extraction::MultiLabel(m)
            }
        };
        let pred = run_case(case, cassette_for(case, &dropped, false)?, 0)?;
        let report = score(name, &pred, &spans, &hpo, &ml)?;
        let got = summed(&report, &keys);
        ensure!(
            got == (base.0 - 1, 0, 1),
            "{name}: dropping one item gave {got:?} from {base:?}"
        );
        if *name != "multilabel" {
            let s = keys
                .iter()
                .map(|k| report.get(k).unwrap())
                .find(|s| s.counts.fn_ == 1)
                .unwrap();
            let expected = s.counts.tp as f64 / (s.counts.tp + 1) as f64;
            ensure!(
                close(s.recall, expected) && s.precision == 1.0,
                "{name}: recall {}",
                s.recall
            );
        } else {
            let cells = (case.docs.len() * LABEL_UNIVERSE.len()) as f64;
            ensure!(
                close(report.micro_accuracy.unwrap(), 1.0 - 1.0 / cells),
                "{name}: micro accuracy"
            );
        }

        // add one wrong item → exactly one more FP
        let mut added = case.gold.clone();
        added[victim] = match &case.gold[victim] {
            Extraction::Ner(n) => {
                let mut n = n.clone();
                n.mentions
                    .insert(Mention::new("zz unlisted agent", EntityType::Chemical).unwrap());
                Extraction::Ner(n)
            }
            Extraction::Hpo(h) => {
                let mut h = h.clone();
                let t = if h.assertions.contains_key(&extra_term) {
                    o.lookup_name("Myoclonus").cloned().unwrap()
                } else {
                    extra_term.clone()
                };
                h.assert_term(
                    t,
                    Evidence {
                        confidence: 0.8,
                        reasoning: "mutated".into(),
                    },
                );
                Extraction::Hpo(h)
            }
            Extraction::MultiLabel(m) => {
                let mut m = m.clone();
                let l = LABEL_UNIVERSE.iter().find(|l| !m.labels.contains(**l)).unwrap();
                m.labels.insert(l.to_string());
                Extraction::MultiLabel(m)
            }
        };
        let pred = run_case(case, cassette_for(case, &added, false)?, 0)?;
        let report = score(name, &pred, &spans, &hpo, &ml)?;
        let got = summed(&report, &keys);
        ensure!(
            got == (base.0, 1, 0),
            "{name}: adding one item gave {got:?} from {base:?}"
        );
        let s = keys
            .iter()
            .map(|k| report.get(k).unwrap())
            .find(|s| s.counts.fp == 1)
            .unwrap();
        ensure!(
            close(s.precision, s.counts.tp as f64 / (s.counts.tp + 1) as f64) && s.recall == 1.0,
            "{name}: precision {}",
            s.precision
        );
        notes.push(format!("{name} P=R=F1=1.000"));
    }
    Ok(format!(
        "{}; single-response mutations move exactly one count",
        notes.join(", ")
    ))
}

// ---------------------------------------------------------------- 6

fn output_contract() -> Check {
    let hpo = OutputSchema::Hpo { key: "d1".into() };
    let bare = r#"{"d1":[{"category":"HP:0011172","confidence":0.9,"reasoning":"febrile sz"}]}"#;
    let want = parse_model_output(bare, &hpo).map_err(|e| e.to_string())?;
    ensure!(
        matches!(&want, ParsedOutput::Hpo(a) if a.len() == 1),
        "bare object not one assertion"
    );
    for ok in [
        format!("```json\n{bare}\n```"),
        format!("```\n{bare}\n```"),
        format!("Here is the result:\n{bare}\nLet me know if you need more."),
        format!("Result: {bare}"),
    ] {
        let got = parse_model_output(&ok, &hpo).map_err(|e| format!("rejected recoverable reply {ok:?}: {e}"))?;
        ensure!(got == want, "recovered parse differs for {ok:?}");
    }

    let item = |body: &str| format!(r#"{{"d1":[{body}]}}"#);
    let malformed: Vec<(String, OutputSchema, &str, Option<&str>)> = vec![
        (
            r#"{"d1":[{"category":"HP:0011172","confidence":0.9"#.into(),
            hpo.clone(),
            "output_parse",
            None,
        ),
        (format!("{bare}\n{bare}"), hpo.clone(), "output_parse", None),
        (
            format!("```json\n{bare}\n{bare}\n```"),
            hpo.clone(),
            "output_parse",
            None,
        ),
        (format!("```json\n{bare}"), hpo.clone(), "output_parse", None),
        ("".into(), hpo.clone(), "output_parse", None),
        ("no structured answer today".into(), hpo.clone(), "output_parse", None),
        (format!("[{bare}]"), hpo.clone(), "output_parse", None),
        (
            item(r#"{"category":"HP:0011172","confidence":1.7,"reasoning":"x"}"#),
            hpo.clone(),
            "schema",
            Some("confidence"),
        ),
        (
            item(r#"{"category":"HP:0011172","confidence":1.7}"#),
            hpo.clone(),
            "schema",
            None,
        ),
        (
            item(r#"{"category":"HP:0011172","confidence":-0.1,"reasoning":"x"}"#),
            hpo.clone(),
            "schema",
            Some("confidence"),
        ),
        (
            item(r#"{"category":"HP:0011172","confidence":"high","reasoning":"x"}"#),
            hpo.clone(),
            "schema",
            Some("confidence"),
        ),
        (
            item(r#"{"category":"HP:0011172","confidence":0.5}"#),
            hpo.clone(),
            "schema",
            Some("reasoning"),
        ),
        (
            item(r#"{"category":"HP:0011172","confidence":0.5,"reasoning":"x","source":"y"}"#),
            hpo.clone(),
            "schema",
            Some("source"),
        ),
        (
            item(r#"{"category":11172,"confidence":0.5,"reasoning":"x"}"#),
            hpo.clone(),
            "schema",
            Some("category"),
        ),
        (r#"{"d1":[],"d2":[]}"#.to_string(), hpo.clone(), "schema", None),
        (r#"{"d2":[]}"#.into(), hpo.clone(), "schema", None),
        (
            r#"{"entities":[{"text":"aspirin","type":"Drug"}]}"#.into(),
            OutputSchema::Ner,
            "schema",
            Some("type"),
        ),
        (
            r#"{"entities":[],"notes":"none"}"#.into(),
            OutputSchema::Ner,
            "schema",
            Some("notes"),
        ),
        (
            r#"{"labels":"Seizure"}"#.into(),
            OutputSchema::MultiLabel,
            "schema",
            Some("labels"),
        ),
        (
            r#"{"score":10,"rationale":"x"}"#.into(),
            OutputSchema::Score,
            "schema",
            Some("score"),
        ),
        (
            r#"{"score":6.5,"rationale":"x"}"#.into(),
            OutputSchema::Score,
            "schema",
            Some("score"),
        ),
    ];
    for (raw, schema, kind, field) in &malformed {
        match parse_model_output(raw, schema) {
            Ok(p) => return Err(format!("accepted malformed {raw:?} as {p:?}")),
            Err(e) => {
                ensure!(e.kind() == *kind, "{raw:?}: kind {} (want {kind}): {e}", e.kind());
                if let Some(f) = field {
                    ensure!(
                        matches!(&e, Error::Schema { field, .. } if field.contains(f)),
                        "{raw:?}: error does not name `{f}`: {e}"
                    );
                }
                if let Error::OutputParse { raw: kept, .. } = &e {
                    ensure!(kept == raw, "raw text not preserved");
                }
            }
        }
    }

    // mutation fuzz
    let valid: Vec<(String, OutputSchema)> = vec![
        (bare.into(), hpo.clone()),
        (
            r#"{"entities":[{"text":"aspirin","type":"Chemical"},{"text":"renal failure","type":"Disease"}]}"#.into(),
            OutputSchema::Ner,
        ),
        (r#"{"labels":["Seizure","Fever"]}"#.into(), OutputSchema::MultiLabel),
        (
            r#"{"score":7,"rationale":"three criteria"}"#.into(),
            OutputSchema::Score,
        ),
    ];
    let alphabet: Vec<char> = "{}[]\":,.-0123456789 \nabeHP:`é\\".chars().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut accepted, mut panics) = (0, 0);
    for _ in 0..10_000 {
        let (text, schema) = &valid[rng.gen_range(0..valid.len())];
        let mut chars: Vec<char> = text.chars().collect();
        for _ in 0..rng.gen_range(1..4) {
            let len = chars.len();
            match rng.gen_range(0..6) {
                0 if len > 0 => {
                    chars.remove(rng.gen_range(0..len));
                }
                1 => chars.insert(rng.gen_range(0..=len), *alphabet.choose(&mut rng).unwrap()),
                2 if len > 1 => chars.swap(rng.gen_range(0..len), rng.gen_range(0..len)),
                3 if len > 0 => chars.truncate(rng.gen_range(0..len)),
                4 if len > 0 => {
                    let (a, b) = (rng.gen_range(0..len), rng.gen_range(0..len));
                    let piece: Vec<char> = chars[a.min(b)..a.max(b)].to_vec();
                    let at = rng.gen_range(0..=len);
                    chars.splice(at..at, piece);
                }
                _ => {
                    let wrap = ["```json\n", "Answer: ", "\n```", " done."];
                    chars.splice(0..0, wrap[rng.gen_range(0..wrap.len())].chars());
                }
            }
        }
        let raw: String = chars.into_iter().collect();
        match catch_unwind(AssertUnwindSafe(|| parse_model_output(&raw, schema))) {
            Err(_) => panics += 1,
            Ok(Ok(ParsedOutput::Hpo(items))) => {
                ensure!(
                    items.iter().all(|a| (0.0..=1.0).contains(&a.confidence)),
                    "accepted confidence outside [0,1]: {raw:?}"
                );
                accepted += 1;
            }
            Ok(Ok(ParsedOutput::Score { score, .. })) => {
                ensure!(score <= 9, "accepted score {score}");
                accepted += 1;
            }
            Ok(Ok(_)) => accepted += 1,
            Ok(Err(e)) => ensure!(
                matches!(e.kind(), "output_parse" | "schema"),
                "unexpected error kind {}",
                e.kind()
            ),
        }
    }
    ensure!(panics == 0, "{panics} panics in fuzzing");
    Ok(format!(
        "2 deviations recovered; {} malformed cases rejected with named kinds; 10000 mutants, 0 panics ({accepted} still valid)",
        malformed.len()
    ))
}

// ---------------------------------------------------------------- 7

fn corrupt(text: &str, f: impl FnOnce(&mut Vec<serde_json::Value>)) -> String {
    let mut rows: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    f(&mut rows);
    rows.iter().map(|r| r.to_string() + "\n").collect()
}

fn first<'a>(rows: &'a mut [serde_json::Value], kind: &str) -> &'a mut serde_json::Value {
    rows.iter_mut().find(|r| r["kind"] == kind).unwrap()
}

fn kg_integrity() -> Check {
    let o = fixtures::dravet_ontology();
    let f = fixtures::dravet_fixture(&o).map_err(|e| e.to_string())?;
    let codes: BTreeSet<String> = fixtures::DRAVET_ICD.iter().map(|s| s.to_string()).collect();
    let cohort = f
        .graph
        .cohort_by_icd(&codes, CohortMode::Any)
        .map_err(|e| e.to_string())?;
    ensure!(
        cohort.len() == 38 && cohort == f.cohort,
        "cohort has {} patients",
        cohort.len()
    );

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("graph.jsonl");
    f.graph.save(&path).map_err(|e| e.to_string())?;
    let loaded = KnowledgeGraph::load(&path, &o).map_err(|e| e.to_string())?;
    ensure!(loaded == f.graph, "round-trip graph differs");

    let text = f.graph.to_jsonl().map_err(|e| e.to_string())?;
    let other_patient = |rows: &[serde_json::Value], not: &serde_json::Value| {
        rows.iter()
            .find(|r| r["kind"] == "patient" && &r["key"] != not)
            .unwrap()["key"]
            .clone()
    };
    let suite: Vec<(&str, String)> = vec![
        (
            "duplicate_patient",
            corrupt(&text, |r| {
                let p = first(r, "patient").clone();
                r.push(p);
            }),
        ),
        (
            "invalid_code",
            corrupt(&text, |r| {
                first(r, "patient")["icd10"] = serde_json::json!(["G40 .833"])
            }),
        ),
        (
            "empty_note_id",
            corrupt(&text, |r| first(r, "note")["note_id"] = "  ".into()),
        ),
        (
            "dangling_note",
            corrupt(&text, |r| first(r, "note")["patient"] = "nobody".into()),
        ),
        (
            "duplicate_note",
            corrupt(&text, |r| {
                let n = first(r, "note").clone();
                r.push(n);
            }),
        ),
        (
            "dangling_assertion",
            corrupt(&text, |r| first(r, "assertion")["patient"] = "nobody".into()),
        ),
        (
            "unknown_term",
            corrupt(&text, |r| first(r, "assertion")["term"] = "HP:9999999".into()),
        ),
        (
            "invalid_confidence",
            corrupt(&text, |r| first(r, "assertion")["confidence"] = serde_json::json!(1.5)),
        ),
        (
            "dangling_source_note",
            corrupt(&text, |r| {
                let a = r
                    .iter_mut()
                    .find(|x| x["kind"] == "assertion" && !x["source_note"].is_null())
                    .unwrap();
                a["source_note"] = "note-missing".into();
            }),
        ),
        (
            "foreign_source_note",
            corrupt(&text, |r| {
                let i = r
                    .iter()
                    .position(|x| x["kind"] == "assertion" && !x["source_note"].is_null())
                    .unwrap();
                let owner = r[i]["patient"].clone();
                let stranger = other_patient(r, &owner);
                r[i]["patient"] = stranger;
            }),
        ),
    ];
    let mut named = Vec::new();
    for (rule, corrupted) in &suite {
        match KnowledgeGraph::from_jsonl(corrupted, "corrupted.jsonl", &o) {
            Ok(_) => return Err(format!("{rule}: corrupted file accepted")),
            Err(Error::GraphIntegrity { rule: got, .. }) => {
                ensure!(got == *rule, "expected {rule}, got {got}");
                named.push(*rule);
            }
            Err(e) => return Err(format!("{rule}: unexpected error {}: {e}", e.kind())),
        }
    }
    // malformed lines fail at parse time with a line number
    for (what, corrupted) in [
        ("empty key", corrupt(&text, |r| first(r, "patient")["key"] = "".into())),
        (
            "unknown kind",
            corrupt(&text, |r| first(r, "note")["kind"] = "visit".into()),
        ),
        ("truncated line", text.replacen("}\n", "\n", 1)),
        (
            "unknown field",
            corrupt(&text, |r| first(r, "assertion")["weight"] = serde_json::json!(1)),
        ),
    ] {
        match KnowledgeGraph::from_jsonl(&corrupted, "corrupted.jsonl", &o) {
            Err(e @ Error::Parse { .. }) => {
                ensure!(e.to_string().contains("corrupted.jsonl:"), "{what}: no location in {e}")
            }
            Err(e) => return Err(format!("{what}: expected parse error, got {}: {e}", e.kind())),
            Ok(_) => return Err(format!("{what}: accepted")),
        }
    }
    Ok(format!(
        "38-patient cohort; round-trip equal; {} integrity rules + 4 parse cases rejected",
        named.len()
    ))
}

// ---------------------------------------------------------------- 8

fn funnel(
    graph: &KnowledgeGraph,
    o: &Arc<Ontology>,
    backend: Arc<dyn ChatBackend>,
) -> Result<(FunnelReport, AuditLog), String> {
    let config = FunnelConfig {
        keywords: [fixtures::BPAN_KEYWORD.to_string()].into(),
        generic_icd: fixtures::BPAN_GENERIC_ICD.iter().map(|s| s.to_string()).collect(),
        threshold: 7,
        ..Default::default()
    };
    let client = LlmClient::new(backend, 8);
    let mut audit = AuditLog::default();
    let report = run_funnel(
        graph,
        o.clone(),
        &fixtures::bpan_rubric(),
        &config,
        &fixtures::bpan_allowed_terms(o),
        &client,
        &mut audit,
    )
    .map_err(|e| e.to_string())?;
    Ok((report, audit))
}

fn funnel_recovery() -> Check {
    let o = Arc::new(fixtures::dravet_ontology());
    let f = fixtures::bpan_fixture(8).map_err(|e| e.to_string())?;
    ensure!(
        f.graph.patient_count() == 1000 && f.planted.len() == 12,
        "fixture shape"
    );

    // record the oracle once, then replay the cassette
    let recorder = Arc::new(RecordingBackend::new(fixtures::bpan_oracle()));
    let (live, _) = funnel(&f.graph, &o, recorder.clone())?;
    let cassette = recorder.cassette();
    let (report, audit) = funnel(&f.graph, &o, Arc::new(ReplayBackend::new(cassette.clone())))?;
    ensure!(report == live, "replayed report differs from the recorded run");
    ensure!(audit.is_empty(), "audit entries: {:?}", audit.entries);

    let finalists: BTreeSet<_> = report.finalist_keys().into_iter().cloned().collect();
    ensure!(
        finalists == f.planted,
        "finalists {finalists:?} != planted {:?}",
        f.planted
    );
    let counts: Vec<usize> = report.stage_counts.iter().map(|(_, n)| *n).collect();
    ensure!(
        counts.windows(2).all(|w| w[0] >= w[1]),
        "stage counts not monotone: {:?}",
        report.stage_counts
    );
    ensure!(
        report.stage_count(STAGE_FINALISTS) == Some(12) && report.stage_count(STAGE_CANDIDATES).unwrap_or(0) > 12,
        "stage counts {:?}",
        report.stage_counts
    );
    let stages: Vec<String> = report.stage_counts.iter().map(|(s, n)| format!("{s}={n}")).collect();
    Ok(format!("{} ({} cassette entries)", stages.join(" → "), cassette.len()))
}

// ---------------------------------------------------------------- 9

struct Instrumented {
    in_flight: AtomicUsize,
    peak: AtomicUsize,
    total: usize,
}

impl ChatBackend for Instrumented {
    fn name(&self) -> &str {
        "instrumented"
    }

    fn complete(&self, request: &ChatRequest) -> phenokg::Result<ChatResponse> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        let i: usize = request.user.parse().unwrap();
        // later requests finish first
        std::thread::sleep(Duration::from_micros(((self.total - i) * 150) as u64));
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        Ok(ChatResponse {
            text: format!("reply-{i}"),
            usage: Usage::default(),
            attempts: 1,
        })
    }
}

fn concurrency() -> Check {
    let total = 48;
    let requests: Vec<ChatRequest> = (0..total).map(|i| ChatRequest::new("sys", i.to_string())).collect();
    let mut peaks = Vec::new();
    for max in [1usize, 3, 4, 8] {
        let backend = Arc::new(Instrumented {
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
            total,
        });
        let client = LlmClient::new(backend.clone(), max);
        let out = client.complete_batch(&requests);
        let peak = backend.peak.load(Ordering::SeqCst);
        ensure!(peak <= max, "peak {peak} exceeds max_in_flight {max}");
        ensure!(max == 1 || peak > 1, "no concurrency observed at max {max}");
        for (i, r) in out.into_iter().enumerate() {
            let r = r.map_err(|e| e.to_string())?;
            ensure!(r.text == format!("reply-{i}"), "slot {i} holds {}", r.text);
        }
        peaks.push(format!("{max}→{peak}"));
    }
    Ok(format!(
        "peak in-flight per bound {}; order preserved",
        peaks.join(", ")
    ))
}
