//! Deterministic fixtures: a Dravet-focused ontology subset with a 100-patient
//! graph whose coded cohort reproduces the published per-phenotype patient
//! counts, a 1,000-patient discovery graph with planted positives, and
//! oracle backends that answer prompts by scanning the prompt itself.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::cohortstats::parse_grouping;
use crate::discovery::{Criterion, ScoringRubric};
use crate::error::{Error, Result};
use crate::kg::{
    Demographics, GraphRecord, KnowledgeGraph, NoteKind, NoteNode, PatientKey, PatientNode, PhenotypeAssertion,
};
use crate::llm::{ChatRequest, ScriptedBackend};
use crate::ontology::{parse_annotations, DiseaseAnnotation, Ontology, TermId};

pub const DRAVET_OBO: &str = include_str!("../fixtures/dravet.obo");
pub const DRAVET_ANNOTATIONS: &str = include_str!("../fixtures/dravet_annotations.tsv");
pub const DRAVET_GROUPING: &str = include_str!("../fixtures/dravet_grouping.tsv");
pub const DRAVET_COUNTS: &str = include_str!("../fixtures/dravet_counts.tsv");

pub const DRAVET_ICD: [&str; 3] = ["G40.83", "G40.833", "G40.834"];
pub const DRAVET_COHORT_SIZE: usize = 38;
pub const DRAVET_GRAPH_SIZE: usize = 100;

pub const DRAVET_CONTEXT: &str = "Dravet syndrome is a developmental and epileptic encephalopathy, usually caused by \
SCN1A variants, that starts in the first year of life in a previously typical infant. Early seizures are often long \
and fever-provoked; other seizure types follow in early childhood. Development slows from the second year, with \
later problems in coordination, muscle tone, behaviour and sleep, and most patients need lifelong support.";

pub fn dravet_ontology() -> Ontology {
    Ontology::parse_obo(DRAVET_OBO, "dravet.obo").expect("bundled ontology is valid")
}

pub fn dravet_annotations(ontology: &Ontology) -> Vec<DiseaseAnnotation> {
    parse_annotations(DRAVET_ANNOTATIONS, ontology).expect("bundled annotations are valid")
}

/// The 46 annotated phenotypes, used as the extraction allow-list.
pub fn dravet_allowed_terms() -> BTreeSet<TermId> {
    dravet_counts().into_iter().map(|(t, _)| t).collect()
}

pub fn dravet_grouping() -> BTreeMap<TermId, String> {
    parse_grouping(DRAVET_GROUPING, "dravet_grouping.tsv").expect("bundled grouping is valid")
}

/// Patients per phenotype in the coded cohort, in table order.
pub fn dravet_counts() -> Vec<(TermId, u64)> {
    DRAVET_COUNTS
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (id, n) = l.split_once('\t').expect("two columns");
            (id.parse().expect("valid id"), n.parse().expect("count"))
        })
        .collect()
}

fn key(prefix: &str, i: usize) -> PatientKey {
    PatientKey::new(format!("{prefix}-{i:04}")).expect("nonempty")
}

fn patient(key: PatientKey, icd: &[&str], age: u32) -> PatientNode {
    let mut p = PatientNode::new(key);
    p.icd10 = icd.iter().map(|s| s.to_string()).collect();
    p.demographics = Demographics {
        age_years: Some(age),
        ..Default::default()
    };
    p
}

pub struct DravetFixture {
    pub graph: KnowledgeGraph,
    /// Patients carrying any of [`DRAVET_ICD`].
    pub cohort: BTreeSet<PatientKey>,
    /// The one patient coded with both G40.833 and G40.834.
    pub dual_coded: PatientKey,
}

/// 100 patients, 38 of them coded for Dravet; assertions on the coded cohort
/// reproduce [`dravet_counts`]. Some cohort patients carry a repeated
/// assertion from a second extractor, and a few uncoded patients carry
/// assertions too, so frequency counting must deduplicate and respect the
/// cohort.
pub fn dravet_fixture(ontology: &Ontology) -> Result<DravetFixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(38);
    let mut order: Vec<usize> = (0..DRAVET_GRAPH_SIZE).collect();
    order.shuffle(&mut rng);
    let mut cohort_idx: Vec<usize> = order[..DRAVET_COHORT_SIZE].to_vec();
    cohort_idx.sort_unstable();
    let in_cohort: BTreeSet<usize> = cohort_idx.iter().copied().collect();
    let other_codes = ["G40.8", "G40.219", "R56.9", "F79", "Z00.129", "G40.89"];

    let mut records = Vec::new();
    for i in 0..DRAVET_GRAPH_SIZE {
        let codes: Vec<&str> = match cohort_idx.iter().position(|&c| c == i) {
            Some(0) => vec!["G40.833", "G40.834"],
            Some(pos) => vec![DRAVET_ICD[pos % 3], "R56.9"],
            None => vec![other_codes[i % other_codes.len()]],
        };
        let age = rng.gen_range(1..40);
        records.push(GraphRecord::Patient(patient(key("ds", i), &codes, age)));
    }

    let counts = dravet_counts();
    let mut per_patient: BTreeMap<usize, Vec<&TermId>> = BTreeMap::new();
    for (t, (term, n)) in counts.iter().enumerate() {
        for j in 0..*n as usize {
            per_patient
                .entry(cohort_idx[(t * 7 + j) % DRAVET_COHORT_SIZE])
                .or_default()
                .push(term);
        }
    }
    let name = |t: &TermId| {
        ontology
            .get(t)
            .map(|x| x.name.clone())
            .ok_or_else(|| Error::UnknownTerm(t.to_string()))
    };

    for i in 0..DRAVET_GRAPH_SIZE {
        let k = key("ds", i);
        let note_id = format!("ds-{i:04}-n1");
        let terms = per_patient.get(&i).cloned().unwrap_or_default();
        let mut text = String::from("Neurology follow-up visit.");
        for t in &terms {
            text.push_str(&format!(" Findings include {}.", name(t)?.to_lowercase()));
        }
        if !in_cohort.contains(&i) {
            text.push_str(" Seizure history reviewed.");
        }
        records.push(GraphRecord::Note(NoteNode {
            note_id: note_id.clone(),
            patient: k.clone(),
            text,
            kind: NoteKind::ClinicalNote,
        }));
        records.push(GraphRecord::Note(NoteNode {
            note_id: format!("ds-{i:04}-n2"),
            patient: k.clone(),
            text: "Visit purpose: medication review.".into(),
            kind: NoteKind::VisitPurpose,
        }));
        for (n, t) in terms.iter().enumerate() {
            let assertion = PhenotypeAssertion {
                patient: k.clone(),
                term: (*t).clone(),
                confidence: 0.6 + 0.1 * ((i + n) % 5) as f64,
                reasoning: format!("note mentions {}", name(t)?.to_lowercase()),
                source_note: Some(note_id.clone()),
                extractor_version: "fixture-a".into(),
            };
            if n == 0 && i % 2 == 0 {
                records.push(GraphRecord::Assertion(PhenotypeAssertion {
                    extractor_version: "fixture-b".into(),
                    confidence: 0.5,
                    ..assertion.clone()
                }));
            }
            records.push(GraphRecord::Assertion(assertion));
        }
        if !in_cohort.contains(&i) && i % 10 == 0 {
            records.push(GraphRecord::Assertion(PhenotypeAssertion {
                patient: k.clone(),
                term: counts[0].0.clone(),
                confidence: 0.9,
                reasoning: "outside the coded cohort".into(),
                source_note: None,
                extractor_version: "fixture-a".into(),
            }));
        }
    }
    let graph = KnowledgeGraph::build(records, ontology)?;
    Ok(DravetFixture {
        cohort: cohort_idx.iter().map(|&i| key("ds", i)).collect(),
        dual_coded: key("ds", cohort_idx[0]),
        graph,
    })
}

pub const BPAN_KEYWORD: &str = "BPAN";
pub const BPAN_GENERIC_ICD: [&str; 6] = ["R62.50", "G40.219", "G23.8", "F79", "G40.824", "G31.9"];
/// Clinical phrases the fixture rubric rewards, one per criterion.
pub const BPAN_PHRASES: [&str; 6] = [
    "global developmental delay",
    "absent speech",
    "stereotypic hand movements",
    "dystonia",
    "brain iron accumulation",
    "sleep disturbance",
];
/// Phenotypes mentioned in discovery-fixture notes, all present in the
/// Dravet ontology subset.
pub const BPAN_PHENOTYPES: [&str; 8] = [
    "Cognitive impairment",
    "Developmental regression",
    "Parkinsonism",
    "Bradykinesia",
    "Drooling",
    "Progressive gait ataxia",
    "Autistic behavior",
    "Myoclonus",
];
pub const BPAN_GRAPH_SIZE: usize = 1000;
pub const BPAN_ICD_CARRIERS: usize = 300;
pub const BPAN_PLANTED: usize = 12;

pub const BPAN_CONTEXT: &str = "Beta-propeller protein-associated neurodegeneration (BPAN) is an X-linked \
disorder caused by WDR45 variants and grouped with the neurodegeneration with brain iron accumulation \
disorders. Children show developmental delay with very limited speech, seizures and sleep problems; \
dystonia and parkinsonism appear in adolescence or early adulthood, with iron deposits on brain MRI.";

pub fn bpan_rubric() -> ScoringRubric {
    ScoringRubric {
        disease_name: "BPAN".into(),
        disease_context: BPAN_CONTEXT.into(),
        criteria: BPAN_PHRASES
            .iter()
            .map(|p| Criterion {
                description: format!("The record documents {p}."),
                weight: 1.0,
            })
            .collect(),
        scale_note: "0 = no supporting findings; 9 = every criterion documented.".into(),
    }
}

pub fn bpan_allowed_terms(ontology: &Ontology) -> BTreeSet<TermId> {
    BPAN_PHENOTYPES
        .iter()
        .map(|n| ontology.lookup_name(n).cloned().expect("phenotype in fixture ontology"))
        .collect()
}

pub struct BpanFixture {
    pub graph: KnowledgeGraph,
    pub planted: BTreeSet<PatientKey>,
    /// Patients whose notes mention the disease by name.
    pub keyword_patients: BTreeSet<PatientKey>,
    pub icd_carriers: BTreeSet<PatientKey>,
}

fn bpan_note(rng: &mut ChaCha8Rng, phrases: &[&str], phenotypes: &[&str]) -> String {
    let mut sentences: Vec<String> = phrases.iter().map(|p| format!("Family reports {p}.")).collect();
    for (i, p) in phenotypes.iter().enumerate() {
        sentences.push(format!("Exam notable for {}.", p.to_lowercase()));
        if i % 2 == 0 {
            sentences.push(format!("{p} was also noted at the prior visit."));
        }
    }
    sentences.shuffle(rng);
    format!("Clinic visit. {}", sentences.join(" "))
}

/// 1,000 patients: 300 carry a generic code, 12 planted positives (10 coded,
/// plus two named in notes, one of whom is also coded). Distractor
/// candidates document at most four rubric phrases; some uncoded,
/// un-named patients document all six and must never be reached.
pub fn bpan_fixture(seed: u64) -> Result<BpanFixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..BPAN_GRAPH_SIZE).collect();
    order.shuffle(&mut rng);
    let carriers: BTreeSet<usize> = order[..BPAN_ICD_CARRIERS].iter().copied().collect();
    let planted: BTreeSet<usize> = order[..11].iter().copied().chain([order[BPAN_ICD_CARRIERS]]).collect();
    let keyword: BTreeSet<usize> = [order[10], order[BPAN_ICD_CARRIERS]].into();
    let decoys: BTreeSet<usize> = order[BPAN_ICD_CARRIERS + 1..BPAN_ICD_CARRIERS + 21]
        .iter()
        .copied()
        .collect();
    let unrelated = ["J45.909", "E66.9", "I10", "Z00.129", "M54.5"];

    let mut records = Vec::new();
    for i in 0..BPAN_GRAPH_SIZE {
        let k = key("bp", i);
        let mut codes: Vec<&str> = vec![unrelated[rng.gen_range(0..unrelated.len())]];
        if carriers.contains(&i) {
            codes.push(BPAN_GENERIC_ICD[rng.gen_range(0..BPAN_GENERIC_ICD.len())]);
            if rng.gen_bool(0.3) {
                codes.push(BPAN_GENERIC_ICD[rng.gen_range(0..BPAN_GENERIC_ICD.len())]);
            }
        }
        records.push(GraphRecord::Patient(patient(k.clone(), &codes, rng.gen_range(2..60))));

        let (n_phrases, n_pheno) = if planted.contains(&i) {
            (5 + (i % 2), 2 + i % 5)
        } else if decoys.contains(&i) {
            (6, 3)
        } else if carriers.contains(&i) {
            (rng.gen_range(0..=4), rng.gen_range(0..=3))
        } else {
            (rng.gen_range(0..=2), rng.gen_range(0..=1))
        };
        let mut phrases: Vec<&str> = BPAN_PHRASES.to_vec();
        phrases.shuffle(&mut rng);
        let mut pheno: Vec<&str> = BPAN_PHENOTYPES.to_vec();
        pheno.shuffle(&mut rng);
        let text = bpan_note(&mut rng, &phrases[..n_phrases], &pheno[..n_pheno]);
        records.push(GraphRecord::Note(NoteNode {
            note_id: format!("bp-{i:04}-n1"),
            patient: k.clone(),
            text,
            kind: NoteKind::ClinicalNote,
        }));
        if keyword.contains(&i) {
            records.push(GraphRecord::Note(NoteNode {
                note_id: format!("bp-{i:04}-g1"),
                patient: k,
                text: "Genetics report: pathogenic WDR45 variant, consistent with BPAN.".into(),
                kind: NoteKind::GeneticsReport,
            }));
        }
    }
    let graph = KnowledgeGraph::build(records, &Ontology::from_terms(Vec::new())?)?;
    Ok(BpanFixture {
        graph,
        planted: planted.iter().map(|&i| key("bp", i)).collect(),
        keyword_patients: keyword.iter().map(|&i| key("bp", i)).collect(),
        icd_carriers: carriers.iter().map(|&i| key("bp", i)).collect(),
    })
}

const SCORING_MARKER: &str = "integer scale from 0";
const HPO_MARKER: &str = "Human Phenotype Ontology (HPO) terms";

fn section<'a>(text: &'a str, header: &str) -> Option<&'a str> {
    let start = text.find(header)? + header.len();
    let rest = &text[start..];
    let end = ["\n\nPREVIOUS EXTRACTION:", "\n\nYour previous reply"]
        .iter()
        .filter_map(|m| rest.find(m))
        .min()
        .unwrap_or(rest.len());
    Some(&rest[..end])
}

/// Score = ⌊9 · phrases present / phrases⌋ over the record section.
pub fn oracle_score(record: &str, phrases: &[&str]) -> u8 {
    let lower = record.to_lowercase();
    let hits = phrases.iter().filter(|p| lower.contains(&p.to_lowercase())).count();
    (9 * hits / phrases.len().max(1)) as u8
}

/// Longest-match-first dictionary scan over `text` for `(id, name)` pairs;
/// matched text is masked so shorter names inside longer ones do not fire.
/// Returns each term with its occurrence count.
pub fn dictionary_scan(text: &str, terms: &[(String, String)]) -> BTreeMap<String, usize> {
    let mut lower = text.to_lowercase();
    let mut sorted: Vec<&(String, String)> = terms.iter().collect();
    sorted.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then_with(|| a.0.cmp(&b.0)));
    let mut out = BTreeMap::new();
    for (id, name) in sorted {
        let needle = name.to_lowercase();
        if needle.is_empty() {
            continue;
        }
        let n = lower.matches(&needle).count();
        if n > 0 {
            out.insert(id.clone(), n);
            lower = lower.replace(&needle, &"\u{1}".repeat(needle.len()));
        }
    }
    out
}

/// Parses the `HP:####### \t Name` allow-list out of an HPO system prompt.
pub fn allowed_from_prompt(system: &str) -> Vec<(String, String)> {
    system
        .lines()
        .filter_map(|l| {
            let (id, name) = l.split_once(" \t ")?;
            TermId::new(id.trim())
                .ok()
                .map(|_| (id.trim().to_string(), name.trim().to_string()))
        })
        .collect()
}

fn oracle_hpo(req: &ChatRequest) -> Result<String> {
    let key = req
        .user
        .lines()
        .rev()
        .find_map(|l| l.strip_prefix("PATIENT_KEY: "))
        .ok_or_else(|| Error::domain("oracle: no patient key in prompt"))?;
    let details = section(&req.user, "PATIENT DETAILS:\n").unwrap_or_default();
    let hits = dictionary_scan(details, &allowed_from_prompt(&req.system));
    let items: Vec<_> = hits
        .iter()
        .map(|(id, n)| {
            json!({
                "category": id,
                "confidence": if *n >= 2 { 0.9 } else { 0.55 },
                "reasoning": format!("mentioned {n} time(s)"),
            })
        })
        .collect();
    Ok(json!({ key: items }).to_string())
}

/// Answers rubric-scoring prompts by counting `phrases` in the patient
/// record and HPO prompts by dictionary scan against the prompt's own
/// allow-list. Anything else is an error.
pub fn oracle_backend(phrases: Vec<String>) -> ScriptedBackend {
    ScriptedBackend::new(move |req, _| {
        if req.system.contains(SCORING_MARKER) {
            let record = section(&req.user, "PATIENT RECORD:\n").unwrap_or_default();
            let refs: Vec<&str> = phrases.iter().map(String::as_str).collect();
            let score = oracle_score(record, &refs);
            Ok(json!({"score": score, "rationale": format!("{score} of 9 by rubric phrase count")}).to_string())
        } else if req.system.contains(HPO_MARKER) {
            oracle_hpo(req)
        } else {
            Err(Error::domain("oracle backend: unrecognised prompt"))
        }
    })
}

pub fn bpan_oracle() -> Arc<ScriptedBackend> {
    Arc::new(oracle_backend(BPAN_PHRASES.iter().map(|s| s.to_string()).collect()))
}
