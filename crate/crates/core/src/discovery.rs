//! Candidate-narrowing funnel for diseases without a specific code:
//! keyword/ICD candidates → rubric scoring → threshold → phenotype
//! extraction → ranked finalists.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{read_to_string, Error, Result};
use crate::extraction::{
    parse_model_output, AuditLog, Extraction, Extractor, GleanConfig, HpoTask, OutputSchema, ParsedOutput,
    PromptTemplates, ZeroShot,
};
use crate::kg::{CohortMode, KnowledgeGraph, PatientKey};
use crate::llm::{ChatRequest, LlmClient};
use crate::ontology::{Ontology, TermId};

pub const DEFAULT_THRESHOLD: u8 = 7;
pub const DEFAULT_HIGH_CONFIDENCE: f64 = 0.7;
pub const MAX_SCORE: u8 = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Criterion {
    pub description: String,
    pub weight: f64,
}

/// User-authored scoring instructions for one disease.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoringRubric {
    pub disease_name: String,
    pub disease_context: String,
    pub criteria: Vec<Criterion>,
    #[serde(default)]
    pub scale_note: String,
}

impl ScoringRubric {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.disease_name.trim().is_empty() {
            problems.push("rubric disease_name is empty".to_string());
        }
        if self.disease_context.trim().is_empty() {
            problems.push("rubric disease_context is empty".to_string());
        }
        if self.criteria.is_empty() {
            problems.push("rubric has no criteria".to_string());
        }
        for (i, c) in self.criteria.iter().enumerate() {
            if c.description.trim().is_empty() {
                problems.push(format!("criteria[{i}] description is empty"));
            }
            if !(c.weight.is_finite() && c.weight > 0.0) {
                problems.push(format!("criteria[{i}] weight {} is not positive", c.weight));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rubric: ScoringRubric = serde_json::from_str(text)?;
        rubric.validate()?;
        Ok(rubric)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&read_to_string(path.as_ref())?)
    }

    pub fn system_prompt(&self) -> String {
        let mut out = format!(
            "You are a clinical expert assessing how likely a patient is to have {name}. Rate the patient on an \
             integer scale from 0 (no evidence) to 9 (very high likelihood).\n\nDISEASE CONTEXT:\n{context}\n\n\
             SCORING CRITERIA (weight in parentheses):\n",
            name = self.disease_name.trim(),
            context = self.disease_context.trim()
        );
        for (i, c) in self.criteria.iter().enumerate() {
            let _ = writeln!(out, "{}. {} ({})", i + 1, c.description.trim(), c.weight);
        }
        if !self.scale_note.trim().is_empty() {
            let _ = write!(out, "\nSCALE: {}\n", self.scale_note.trim());
        }
        out.push_str(
            "\nRESPONSE FORMAT:\n- MUST be a single JSON object: {\"score\": <integer 0-9>, \"rationale\": \"<short justification>\"}\n\
             - NO explanatory text, notes, or comments\n- NO markdown formatting\n- NO additional fields\n",
        );
        out
    }
}

pub fn scoring_request(rubric: &ScoringRubric, patient: &PatientKey, record: &str) -> ChatRequest {
    ChatRequest::new(rubric.system_prompt(), format!("PATIENT RECORD:\n{record}")).with_tag(format!("score:{patient}"))
}

fn retry_request(first: &ChatRequest, reason: &str) -> ChatRequest {
    let mut req = first.clone();
    let _ = write!(
        req.user,
        "\n\nYour previous reply was rejected ({reason}). Reply again with only the JSON object \
         {{\"score\": <integer 0-9>, \"rationale\": \"...\"}}."
    );
    req
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LikelihoodScore {
    pub patient: PatientKey,
    pub score: u8,
    pub rationale: String,
}

fn parse_score(text: &str) -> Result<(u8, String)> {
    match parse_model_output(text, &OutputSchema::Score)? {
        ParsedOutput::Score { score, rationale } => Ok((score, rationale)),
        _ => unreachable!("score schema yields scores"),
    }
}

/// Scores patients in parallel batches. Invalid replies get one retry;
/// patients that still fail are audited and left out of the result.
pub fn score_patients(
    patients: &[(PatientKey, String)],
    rubric: &ScoringRubric,
    client: &LlmClient,
    audit: &mut AuditLog,
) -> Result<Vec<LikelihoodScore>> {
    rubric.validate()?;
    let first: Vec<ChatRequest> = patients.iter().map(|(k, r)| scoring_request(rubric, k, r)).collect();
    let mut results: Vec<Option<LikelihoodScore>> = vec![None; patients.len()];
    let mut retry: Vec<(usize, ChatRequest)> = Vec::new();
    for (i, reply) in client.complete_batch(&first).into_iter().enumerate() {
        let key = &patients[i].0;
        match reply.and_then(|r| parse_score(&r.text)) {
            Ok((score, rationale)) => {
                results[i] = Some(LikelihoodScore {
                    patient: key.clone(),
                    score,
                    rationale,
                })
            }
            Err(e @ (Error::OutputParse { .. } | Error::Schema { .. })) => {
                retry.push((i, retry_request(&first[i], &e.to_string())));
            }
            Err(e) => audit.record(key.as_str(), None, "scoring_backend", e.to_string()),
        }
    }
    let retry_reqs: Vec<ChatRequest> = retry.iter().map(|(_, r)| r.clone()).collect();
    for ((i, _), reply) in retry.iter().zip(client.complete_batch(&retry_reqs)) {
        let key = &patients[*i].0;
        match reply.and_then(|r| parse_score(&r.text)) {
            Ok((score, rationale)) => {
                results[*i] = Some(LikelihoodScore {
                    patient: key.clone(),
                    score,
                    rationale,
                })
            }
            Err(e) => {
                let err = Error::Scoring {
                    patient: key.to_string(),
                    reason: format!("invalid after retry: {e}"),
                };
                audit.record(key.as_str(), None, err.kind(), err.to_string());
            }
        }
    }
    Ok(results.into_iter().flatten().collect())
}

/// Scores a single patient record.
pub fn score_patient(
    patient: &PatientKey,
    record: &str,
    rubric: &ScoringRubric,
    client: &LlmClient,
    audit: &mut AuditLog,
) -> Result<LikelihoodScore> {
    let before = audit.len();
    let mut scores = score_patients(&[(patient.clone(), record.to_string())], rubric, client, audit)?;
    scores.pop().ok_or_else(|| Error::Scoring {
        patient: patient.to_string(),
        reason: audit.entries[before..]
            .last()
            .map(|e| e.detail.clone())
            .unwrap_or_else(|| "no score".into()),
    })
}

/// Union of keyword hits over notes and `any`-mode ICD matches.
pub fn candidate_cohort(
    graph: &KnowledgeGraph,
    keywords: &BTreeSet<String>,
    generic_icd: &BTreeSet<String>,
) -> Result<BTreeSet<PatientKey>> {
    let keywords: Vec<&String> = keywords.iter().filter(|k| !k.trim().is_empty()).collect();
    if keywords.is_empty() && generic_icd.is_empty() {
        return Err(Error::domain("candidate search needs keywords or ICD codes"));
    }
    let mut out = BTreeSet::new();
    for k in keywords {
        out.extend(graph.keyword_search(k)?.into_iter().map(|(p, _)| p));
    }
    if !generic_icd.is_empty() {
        out.extend(graph.cohort_by_icd(generic_icd, CohortMode::Any)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunnelConfig {
    pub keywords: BTreeSet<String>,
    pub generic_icd: BTreeSet<String>,
    /// Minimum score (0–9) to pass the filter stage.
    pub threshold: u8,
    /// Confidence at or above which an assertion counts toward ranking.
    pub high_confidence: f64,
    /// Optional hard filter on the number of high-confidence assertions.
    pub min_assertions: Option<usize>,
    pub glean: GleanConfig,
}

impl Default for FunnelConfig {
    fn default() -> Self {
        FunnelConfig {
            keywords: BTreeSet::new(),
            generic_icd: BTreeSet::new(),
            threshold: DEFAULT_THRESHOLD,
            high_confidence: DEFAULT_HIGH_CONFIDENCE,
            min_assertions: None,
            glean: GleanConfig::default(),
        }
    }
}

impl FunnelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.threshold > MAX_SCORE {
            problems.push(format!("threshold {} outside 0..=9", self.threshold));
        }
        if !(0.0..=1.0).contains(&self.high_confidence) {
            problems.push(format!("high_confidence {} outside [0, 1]", self.high_confidence));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::domain(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalistAssertion {
    pub term: TermId,
    pub name: String,
    pub confidence: f64,
    pub reasoning: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finalist {
    pub patient: PatientKey,
    pub score: u8,
    pub rationale: String,
    pub high_confidence_assertions: usize,
    /// Sorted by confidence descending, then term id.
    pub assertions: Vec<FinalistAssertion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunnelReport {
    pub disease_name: String,
    pub threshold: u8,
    pub stage_counts: Vec<(String, usize)>,
    pub finalists: Vec<Finalist>,
}

impl FunnelReport {
    pub fn finalist_keys(&self) -> Vec<&PatientKey> {
        self.finalists.iter().map(|f| &f.patient).collect()
    }

    pub fn stage_count(&self, stage: &str) -> Option<usize> {
        self.stage_counts.iter().find(|(s, _)| s == stage).map(|(_, n)| *n)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!(
            "# Discovery funnel: {}\n\nScore threshold: {}\n\n",
            self.disease_name, self.threshold
        );
        out.push_str("| stage | patients |\n|---|---|\n");
        for (stage, n) in &self.stage_counts {
            let _ = writeln!(out, "| {stage} | {n} |");
        }
        out.push_str("\n## Finalists\n\n| rank | patient | score | high-confidence phenotypes | top phenotypes |\n|---|---|---|---|---|\n");
        for (i, f) in self.finalists.iter().enumerate() {
            let top: Vec<String> = f
                .assertions
                .iter()
                .take(3)
                .map(|a| format!("{} {} ({:.2})", a.term, a.name, a.confidence))
                .collect();
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} |",
                i + 1,
                f.patient,
                f.score,
                f.high_confidence_assertions,
                top.join("; ")
            );
        }
        out
    }
}

pub const STAGE_CANDIDATES: &str = "candidates";
pub const STAGE_SCORED: &str = "scored";
pub const STAGE_FILTERED: &str = "filtered";
pub const STAGE_EXTRACTED: &str = "extracted";
pub const STAGE_FINALISTS: &str = "finalists";

/// Runs every stage; per-patient failures are audited and skipped.
#[allow(clippy::too_many_arguments)]
pub fn run_funnel(
    graph: &KnowledgeGraph,
    ontology: Arc<Ontology>,
    rubric: &ScoringRubric,
    config: &FunnelConfig,
    allowed_terms: &BTreeSet<TermId>,
    client: &LlmClient,
    audit: &mut AuditLog,
) -> Result<FunnelReport> {
    config.validate()?;
    rubric.validate()?;
    let task = HpoTask::for_patients(
        ontology.clone(),
        allowed_terms.clone(),
        &rubric.disease_context,
        PromptTemplates::default(),
    )?;

    let candidates = candidate_cohort(graph, &config.keywords, &config.generic_icd)?;
    let records: Vec<(PatientKey, String)> = candidates
        .iter()
        .map(|k| Ok((k.clone(), graph.render_patient_record(k)?)))
        .collect::<Result<_>>()?;
    let record_of: BTreeMap<&PatientKey, &String> = records.iter().map(|(k, r)| (k, r)).collect();

    let scores = score_patients(&records, rubric, client, audit)?;
    let filtered: Vec<&LikelihoodScore> = scores.iter().filter(|s| s.score >= config.threshold).collect();

    let docs: Vec<Document> = filtered
        .iter()
        .map(|s| Document {
            doc_id: s.patient.to_string(),
            text: record_of[&s.patient].clone(),
        })
        .collect();
    let extractor = Extractor::new(&task, &ZeroShot, client).with_glean(config.glean);
    let extractions = extractor.extract_many(&docs, audit);

    let mut extracted = Vec::new();
    for (s, result) in filtered.iter().zip(extractions) {
        match result {
            Ok(Extraction::Hpo(h)) => extracted.push((*s, h)),
            Ok(_) => unreachable!("hpo task yields hpo results"),
            Err(e) => audit.record(s.patient.as_str(), None, "extraction_failed", e.to_string()),
        }
    }
    let n_extracted = extracted.len();

    let mut finalists: Vec<Finalist> = extracted
        .into_iter()
        .map(|(s, h)| {
            let mut assertions: Vec<FinalistAssertion> = h
                .assertions
                .into_iter()
                .map(|(term, ev)| FinalistAssertion {
                    name: ontology.get(&term).map(|t| t.name.clone()).unwrap_or_default(),
                    term,
                    confidence: ev.confidence,
                    reasoning: ev.reasoning,
                })
                .collect();
            assertions.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then_with(|| a.term.cmp(&b.term)));
            Finalist {
                patient: s.patient.clone(),
                score: s.score,
                rationale: s.rationale.clone(),
                high_confidence_assertions: assertions
                    .iter()
                    .filter(|a| a.confidence >= config.high_confidence)
                    .count(),
                assertions,
            }
        })
        .filter(|f| config.min_assertions.is_none_or(|m| f.high_confidence_assertions >= m))
        .collect();
    finalists.sort_by(|a, b| {
        b.score
            .cmp(&a.score)
            .then(b.high_confidence_assertions.cmp(&a.high_confidence_assertions))
            .then_with(|| a.patient.cmp(&b.patient))
    });

    let stage_counts = vec![
        (STAGE_CANDIDATES.to_string(), candidates.len()),
        (STAGE_SCORED.to_string(), scores.len()),
        (STAGE_FILTERED.to_string(), filtered.len()),
        (STAGE_EXTRACTED.to_string(), n_extracted),
        (STAGE_FINALISTS.to_string(), finalists.len()),
    ];
    Ok(FunnelReport {
        disease_name: rubric.disease_name.clone(),
        threshold: config.threshold,
        stage_counts,
        finalists,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ScriptedBackend;

    fn rubric() -> ScoringRubric {
        ScoringRubric {
            disease_name: "BPAN".into(),
            disease_context: "Neurodegeneration with brain iron accumulation.".into(),
            criteria: vec![Criterion {
                description: "seizures".into(),
                weight: 1.0,
            }],
            scale_note: String::new(),
        }
    }

    fn client(replies: &[&str]) -> LlmClient {
        let replies: Vec<String> = replies.iter().map(|s| s.to_string()).collect();
        LlmClient::new(Arc::new(ScriptedBackend::sequence(replies)), 1)
    }

    #[test]
    fn rubric_validation_lists_problems() {
        let mut r = rubric();
        r.criteria.clear();
        r.disease_name.clear();
        match r.validate() {
            Err(Error::Config(p)) => assert_eq!(p.len(), 2),
            other => panic!("{other:?}"),
        }
        r = rubric();
        r.criteria[0].weight = 0.0;
        assert!(r.validate().is_err());
    }

    #[test]
    fn score_contract() {
        let key = PatientKey::new("p").unwrap();
        let mut audit = AuditLog::default();
        let s = score_patient(
            &key,
            "rec",
            &rubric(),
            &client(&[r#"{"score":8,"rationale":"r"}"#]),
            &mut audit,
        )
        .unwrap();
        assert_eq!(s.score, 8);
        let c = client(&[r#"{"score":12,"rationale":"r"}"#, r#"{"score":7,"rationale":"r"}"#]);
        assert_eq!(score_patient(&key, "rec", &rubric(), &c, &mut audit).unwrap().score, 7);
        let c = client(&["I think it is likely.", "Probably an 8."]);
        let err = score_patient(&key, "rec", &rubric(), &c, &mut audit).unwrap_err();
        assert!(matches!(err, Error::Scoring { .. }));
        assert_eq!(audit.count_kind("scoring"), 1);
    }

    #[test]
    fn threshold_bounds() {
        let cfg = FunnelConfig {
            threshold: 10,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
