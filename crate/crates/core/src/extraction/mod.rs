//! Prompted extraction for the three task families (mention NER, HPO term
//! grounding, multilabel note classification) with strict output parsing
//! and gleaning.

mod parse;
mod prompt;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::{Document, EntityType, HpoGoldRecord, MultiLabelRecord, SpanDocument};
use crate::error::{Error, Result};
use crate::jsonl::write_jsonl;
use crate::llm::{ChatRequest, LlmClient};
use crate::ontology::{normalize_label, Ontology, TermId};

pub use parse::{extract_object, parse_model_output, OutputSchema, ParsedOutput, RawAssertion};
pub use prompt::{
    build_prompt, glean_prompt, render_template, DynamicFewShot, ExamplePool, ExampleSelector, FewShotExample,
    FewShotMode, FewShotPolicy, HpoTask, MultiLabelTask, NerTask, PromptTemplates, SelectorRegistry, StaticFewShot,
    TaskContext, TaskFamily, TaskRegistry, ZeroShot,
};

pub const MAX_GLEAN_ITERATIONS: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GleanConfig {
    pub iterations: u32,
}

impl Default for GleanConfig {
    fn default() -> Self {
        GleanConfig { iterations: 1 }
    }
}

impl GleanConfig {
    pub fn new(iterations: u32) -> Result<Self> {
        if iterations > MAX_GLEAN_ITERATIONS {
            return Err(Error::domain(format!(
                "glean iterations {iterations} exceeds the maximum of {MAX_GLEAN_ITERATIONS}"
            )));
        }
        Ok(GleanConfig { iterations })
    }
}

/// A normalised (case-folded, whitespace-collapsed) typed mention.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Mention {
    pub surface: String,
    pub entity_type: EntityType,
}

impl Mention {
    pub fn new(surface: &str, entity_type: EntityType) -> Option<Self> {
        let surface = normalize_label(surface);
        (!surface.is_empty()).then_some(Mention { surface, entity_type })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NerResult {
    pub doc_id: String,
    pub mentions: BTreeSet<Mention>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub confidence: f64,
    pub reasoning: String,
}

/// Grounded HPO assertions for one patient or document, one per term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HpoExtraction {
    pub key: String,
    pub assertions: BTreeMap<TermId, Evidence>,
}

impl HpoExtraction {
    pub fn new(key: impl Into<String>) -> Self {
        HpoExtraction {
            key: key.into(),
            assertions: BTreeMap::new(),
        }
    }

    /// Inserts keeping the higher-confidence evidence on duplicates.
    pub fn assert_term(&mut self, term: TermId, evidence: Evidence) {
        match self.assertions.get(&term) {
            Some(old) if old.confidence >= evidence.confidence => {}
            _ => {
                self.assertions.insert(term, evidence);
            }
        }
    }

    pub fn terms(&self) -> BTreeSet<TermId> {
        self.assertions.keys().cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiLabelResult {
    pub doc_id: String,
    pub labels: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum Extraction {
    Ner(NerResult),
    Hpo(HpoExtraction),
    MultiLabel(MultiLabelResult),
}

impl Extraction {
    /// Gold mentions of a span document as a mention-set result.
    pub fn from_span_gold(doc: &SpanDocument) -> Extraction {
        Extraction::Ner(NerResult {
            doc_id: doc.document.doc_id.clone(),
            mentions: doc
                .annotations
                .iter()
                .filter_map(|a| Mention::new(&a.surface, a.entity_type))
                .collect(),
        })
    }

    /// Gold terms with confidence 1.
    pub fn from_hpo_gold(record: &HpoGoldRecord) -> Extraction {
        let mut h = HpoExtraction::new(record.doc_id.clone());
        for t in &record.hpo_ids {
            h.assert_term(
                t.clone(),
                Evidence {
                    confidence: 1.0,
                    reasoning: "gold".into(),
                },
            );
        }
        Extraction::Hpo(h)
    }

    pub fn from_multilabel_gold(record: &MultiLabelRecord) -> Extraction {
        Extraction::MultiLabel(MultiLabelResult {
            doc_id: record.doc_id.clone(),
            labels: record.labels.clone(),
        })
    }

    pub fn empty_like(&self) -> Extraction {
        match self {
            Extraction::Ner(r) => Extraction::Ner(NerResult {
                doc_id: r.doc_id.clone(),
                mentions: BTreeSet::new(),
            }),
            Extraction::Hpo(r) => Extraction::Hpo(HpoExtraction::new(r.key.clone())),
            Extraction::MultiLabel(r) => Extraction::MultiLabel(MultiLabelResult {
                doc_id: r.doc_id.clone(),
                labels: BTreeSet::new(),
            }),
        }
    }

    pub fn key(&self) -> &str {
        match self {
            Extraction::Ner(r) => &r.doc_id,
            Extraction::Hpo(r) => &r.key,
            Extraction::MultiLabel(r) => &r.doc_id,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Extraction::Ner(r) => r.mentions.len(),
            Extraction::Hpo(r) => r.assertions.len(),
            Extraction::MultiLabel(r) => r.labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Entity keys used for set comparisons (mention, term id or label).
    pub fn entity_keys(&self) -> BTreeSet<String> {
        match self {
            Extraction::Ner(r) => r
                .mentions
                .iter()
                .map(|m| format!("{}\t{}", m.entity_type, m.surface))
                .collect(),
            Extraction::Hpo(r) => r.assertions.keys().map(|t| t.to_string()).collect(),
            Extraction::MultiLabel(r) => r.labels.clone(),
        }
    }

    pub fn as_ner(&self) -> Option<&NerResult> {
        match self {
            Extraction::Ner(r) => Some(r),
            _ => None,
        }
    }

    pub fn as_hpo(&self) -> Option<&HpoExtraction> {
        match self {
            Extraction::Hpo(r) => Some(r),
            _ => None,
        }
    }

    pub fn as_multilabel(&self) -> Option<&MultiLabelResult> {
        match self {
            Extraction::MultiLabel(r) => Some(r),
            _ => None,
        }
    }

    /// The result in the exact JSON shape the model is asked to produce.
    /// Used for few-shot examples, gleaning context and oracle replies.
    pub fn to_model_json(&self) -> Value {
        match self {
            Extraction::Ner(r) => json!({
                "entities": r.mentions.iter()
                    .map(|m| json!({"text": m.surface, "type": m.entity_type.as_str()}))
                    .collect::<Vec<_>>()
            }),
            Extraction::Hpo(r) => {
                let items: Vec<Value> = r
                    .assertions
                    .iter()
                    .map(|(t, e)| json!({"category": t.as_str(), "confidence": e.confidence, "reasoning": e.reasoning}))
                    .collect();
                let mut obj = serde_json::Map::new();
                obj.insert(r.key.clone(), Value::Array(items));
                Value::Object(obj)
            }
            Extraction::MultiLabel(r) => json!({"labels": r.labels}),
        }
    }

    pub fn to_model_output(&self) -> String {
        self.to_model_json().to_string()
    }
}

/// Union of two results for the same key. HPO duplicates keep the
/// higher confidence and its reasoning.
pub fn merge_gleaned(prev: &Extraction, new: &Extraction) -> Result<Extraction> {
    if prev.key() != new.key() {
        return Err(Error::domain(format!(
            "cannot merge results for `{}` and `{}`",
            prev.key(),
            new.key()
        )));
    }
    match (prev, new) {
        (Extraction::Ner(a), Extraction::Ner(b)) => Ok(Extraction::Ner(NerResult {
            doc_id: a.doc_id.clone(),
            mentions: a.mentions.union(&b.mentions).cloned().collect(),
        })),
        (Extraction::Hpo(a), Extraction::Hpo(b)) => {
            let mut merged = a.clone();
            for (term, ev) in &b.assertions {
                merged.assert_term(term.clone(), ev.clone());
            }
            Ok(Extraction::Hpo(merged))
        }
        (Extraction::MultiLabel(a), Extraction::MultiLabel(b)) => Ok(Extraction::MultiLabel(MultiLabelResult {
            doc_id: a.doc_id.clone(),
            labels: a.labels.union(&b.labels).cloned().collect(),
        })),
        _ => Err(Error::domain("cannot merge results of different task families")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub key: String,
    pub round: Option<u32>,
    pub kind: String,
    pub detail: String,
}

/// Record of every dropped model assertion and per-item failure.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditLog {
    pub entries: Vec<AuditEntry>,
}

impl AuditLog {
    pub fn record(&mut self, key: &str, round: Option<u32>, kind: &str, detail: impl Into<String>) {
        let detail = detail.into();
        log::debug!("audit {key} round {round:?} {kind}: {detail}");
        self.entries.push(AuditEntry {
            key: key.to_string(),
            round,
            kind: kind.to_string(),
            detail,
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count_kind(&self, kind: &str) -> usize {
        self.entries.iter().filter(|e| e.kind == kind).count()
    }

    pub fn extend(&mut self, other: AuditLog) {
        self.entries.extend(other.entries);
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_jsonl(path, &self.entries)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RequestSettings {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for RequestSettings {
    fn default() -> Self {
        RequestSettings {
            temperature: 0.0,
            max_tokens: 2048,
        }
    }
}

/// Bundles a task, an example selector and a backend client.
pub struct Extractor<'a> {
    pub task: &'a dyn TaskFamily,
    pub selector: &'a dyn ExampleSelector,
    pub client: &'a LlmClient,
    pub glean: GleanConfig,
    pub settings: RequestSettings,
}

impl<'a> Extractor<'a> {
    pub fn new(task: &'a dyn TaskFamily, selector: &'a dyn ExampleSelector, client: &'a LlmClient) -> Self {
        Extractor {
            task,
            selector,
            client,
            glean: GleanConfig::default(),
            settings: RequestSettings::default(),
        }
    }

    pub fn with_glean(mut self, glean: GleanConfig) -> Self {
        self.glean = glean;
        self
    }

    pub fn prompt(&self, document: &Document) -> Result<ChatRequest> {
        let mut req = build_prompt(self.task, document, self.selector)?;
        req.temperature = self.settings.temperature;
        req.max_tokens = self.settings.max_tokens;
        Ok(req)
    }

    pub fn extract(&self, document: &Document, audit: &mut AuditLog) -> Result<Extraction> {
        self.extract_many(std::slice::from_ref(document), audit)
            .pop()
            .expect("one result per document")
    }

    /// Extracts every document. Each gleaning round is one batched call;
    /// rounds are sequential. Results are positional.
    pub fn extract_many(&self, documents: &[Document], audit: &mut AuditLog) -> Vec<Result<Extraction>> {
        self.extract_rounds(documents, audit)
            .into_iter()
            .map(|r| r.map(|mut v| v.pop().unwrap()))
            .collect()
    }

    /// Like [`extract_many`](Self::extract_many) but returns the cumulative
    /// result after every round (index 0 = initial extraction).
    pub fn extract_rounds(&self, documents: &[Document], audit: &mut AuditLog) -> Vec<Result<Vec<Extraction>>> {
        let mut base: Vec<Option<ChatRequest>> = Vec::with_capacity(documents.len());
        let mut state: Vec<Result<Vec<Extraction>>> = Vec::with_capacity(documents.len());
        for doc in documents {
            match self.prompt(doc) {
                Ok(req) => {
                    base.push(Some(req));
                    state.push(Ok(Vec::new()));
                }
                Err(e) => {
                    base.push(None);
                    state.push(Err(e));
                }
            }
        }

        for round in 0..=self.glean.iterations {
            let mut pending: Vec<usize> = Vec::new();
            let mut requests: Vec<ChatRequest> = Vec::new();
            for (i, slot) in state.iter().enumerate() {
                let Ok(history) = slot else { continue };
                let base_req = base[i].as_ref().expect("prompt built");
                let req = match history.last() {
                    None => base_req.clone(),
                    Some(prev) => glean_prompt(self.task, base_req, prev),
                };
                pending.push(i);
                requests.push(req.with_tag(format!("{}#{round}", documents[i].doc_id)));
            }
            if pending.is_empty() {
                break;
            }
            let responses = self.client.complete_batch(&requests);
            for (i, response) in pending.into_iter().zip(responses) {
                let doc = &documents[i];
                let outcome = response.and_then(|resp| {
                    let parsed = parse_model_output(&resp.text, &self.task.output_schema(&doc.doc_id))?;
                    let mut round_audit = AuditLog::default();
                    let fresh = self.task.validate(&doc.doc_id, parsed, round, &mut round_audit);
                    audit.extend(round_audit);
                    Ok(fresh)
                });
                match outcome {
                    Ok(fresh) => {
                        let history = state[i].as_mut().expect("pending slot is ok");
                        let merged = match history.last() {
                            None => Ok(fresh),
                            Some(prev) => merge_gleaned(prev, &fresh),
                        };
                        match merged {
                            Ok(m) => history.push(m),
                            Err(e) => state[i] = Err(e.in_round(round)),
                        }
                    }
                    Err(e) => {
                        audit.record(&doc.doc_id, Some(round), e.kind(), e.to_string());
                        state[i] = Err(e.in_round(round));
                    }
                }
            }
        }
        state
    }
}

/// HPO extraction for one patient record constrained to `allowed_terms`,
/// with the disease description embedded as context.
#[allow(clippy::too_many_arguments)]
pub fn extract_hpo_for_patient(
    patient_key: &str,
    patient_record: &str,
    disease_context: &str,
    allowed_terms: &BTreeSet<TermId>,
    ontology: Arc<Ontology>,
    client: &LlmClient,
    glean: GleanConfig,
    audit: &mut AuditLog,
) -> Result<HpoExtraction> {
    let task = HpoTask::for_patients(
        ontology,
        allowed_terms.clone(),
        disease_context,
        PromptTemplates::default(),
    )?;
    let doc = Document {
        doc_id: patient_key.to_string(),
        text: patient_record.to_string(),
    };
    let extractor = Extractor::new(&task, &ZeroShot, client).with_glean(glean);
    match extractor.extract(&doc, audit)? {
        Extraction::Hpo(h) => Ok(h),
        _ => unreachable!("hpo task yields hpo results"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Ner,
    Hpo,
    MultiLabel,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Ner => "ner",
            TaskKind::Hpo => "hpo",
            TaskKind::MultiLabel => "multilabel",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ner" => Ok(TaskKind::Ner),
            "hpo" => Ok(TaskKind::Hpo),
            "multilabel" => Ok(TaskKind::MultiLabel),
            _ => Err(Error::domain(format!("unknown task `{s}` (ner, hpo, multilabel)"))),
        }
    }
}
