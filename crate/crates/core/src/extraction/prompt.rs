//! Task families, few-shot example selectors and prompt assembly.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::parse::{OutputSchema, ParsedOutput};
use super::{AuditLog, Evidence, Extraction, HpoExtraction, Mention, MultiLabelResult, NerResult, TaskKind};
use crate::corpus::{is_known_label, Document, LABEL_UNIVERSE};
use crate::error::{Error, Result};
use crate::llm::ChatRequest;
use crate::ontology::{Ontology, TermId};
use crate::retrieval::{Embedder, EmbeddingIndex, DEFAULT_TOP_K};

/// Plain-text prompt templates with `{name}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub ner_system: String,
    pub ner_user: String,
    pub hpo_system: String,
    pub hpo_user: String,
    pub multilabel_system: String,
    pub multilabel_user: String,
    pub glean: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            ner_system: include_str!("../../templates/ner.system.txt").into(),
            ner_user: include_str!("../../templates/ner.user.txt").into(),
            hpo_system: include_str!("../../templates/hpo.system.txt").into(),
            hpo_user: include_str!("../../templates/hpo.user.txt").into(),
            multilabel_system: include_str!("../../templates/multilabel.system.txt").into(),
            multilabel_user: include_str!("../../templates/multilabel.user.txt").into(),
            glean: include_str!("../../templates/glean.txt").into(),
        }
    }
}

impl PromptTemplates {
    /// Starts from the built-in templates and overrides any of
    /// `{ner,hpo,multilabel}.{system,user}.txt` and `glean.txt` found in `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut t = PromptTemplates::default();
        let slots: [(&str, &mut String); 7] = [
            ("ner.system.txt", &mut t.ner_system),
            ("ner.user.txt", &mut t.ner_user),
            ("hpo.system.txt", &mut t.hpo_system),
            ("hpo.user.txt", &mut t.hpo_user),
            ("multilabel.system.txt", &mut t.multilabel_system),
            ("multilabel.user.txt", &mut t.multilabel_user),
            ("glean.txt", &mut t.glean),
        ];
        for (name, slot) in slots {
            let path = dir.join(name);
            if path.exists() {
                *slot = crate::error::read_to_string(&path)?;
            }
        }
        Ok(t)
    }
}

/// Single-pass placeholder substitution. Braces not forming a supplied
/// `{name}` are copied verbatim, and substituted values are never rescanned.
pub fn render_template(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(pos) = rest.find('{') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        let hit = values.iter().find(|(name, _)| {
            tail.len() > name.len() + 1 && tail[1..].starts_with(name) && tail[1 + name.len()..].starts_with('}')
        });
        match hit {
            Some((name, value)) => {
                out.push_str(value);
                rest = &tail[name.len() + 2..];
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

/// One extraction task: its prompts, output schema and result validation.
pub trait TaskFamily: Send + Sync {
    fn name(&self) -> &str;
    fn kind(&self) -> TaskKind;
    fn system_prompt(&self) -> String;
    fn user_template(&self) -> &str;
    fn glean_template(&self) -> &str;
    fn output_schema(&self, key: &str) -> OutputSchema;
    /// Turns a schema-valid reply into a result, dropping invalid entities
    /// into the audit log.
    fn validate(&self, key: &str, parsed: ParsedOutput, round: u32, audit: &mut AuditLog) -> Extraction;
}

fn wrong_shape(key: &str, round: u32, audit: &mut AuditLog, empty: Extraction) -> Extraction {
    audit.record(
        key,
        Some(round),
        "wrong_payload",
        "parsed payload does not match the task",
    );
    empty
}

pub struct NerTask {
    templates: PromptTemplates,
}

impl NerTask {
    pub fn new(templates: PromptTemplates) -> Self {
        NerTask { templates }
    }
}

impl TaskFamily for NerTask {
    fn name(&self) -> &str {
        "ner"
    }

    fn kind(&self) -> TaskKind {
        TaskKind::Ner
    }

    fn system_prompt(&self) -> String {
        self.templates.ner_system.clone()
    }

    fn user_template(&self) -> &str {
        &self.templates.ner_user
    }

    fn glean_template(&self) -> &str {
        &self.templates.glean
    }

    fn output_schema(&self, _key: &str) -> OutputSchema {
        OutputSchema::Ner
    }

    fn validate(&self, key: &str, parsed: ParsedOutput, round: u32, audit: &mut AuditLog) -> Extraction {
        let mut result = NerResult {
            doc_id: key.to_string(),
            mentions: BTreeSet::new(),
        };
        let ParsedOutput::Ner(items) = parsed else {
            return wrong_shape(key, round, audit, Extraction::Ner(result));
        };
        for (surface, ty) in items {
            match Mention::new(&surface, ty) {
                Some(m) => {
                    result.mentions.insert(m);
                }
                None => audit.record(key, Some(round), "empty_mention", format!("blank {ty} mention")),
            }
        }
        Extraction::Ner(result)
    }
}

pub struct HpoTask {
    ontology: Arc<Ontology>,
    allowed: Option<BTreeSet<TermId>>,
    disease_context: Option<String>,
    templates: PromptTemplates,
}

impl HpoTask {
    /// Open-vocabulary grounding against the whole ontology.
    pub fn new(ontology: Arc<Ontology>, templates: PromptTemplates) -> Self {
        HpoTask {
            ontology,
            allowed: None,
            disease_context: None,
            templates,
        }
    }

    /// Patient-level extraction restricted to a disease's phenotype list.
    pub fn for_patients(
        ontology: Arc<Ontology>,
        allowed: BTreeSet<TermId>,
        disease_context: &str,
        templates: PromptTemplates,
    ) -> Result<Self> {
        if allowed.is_empty() {
            return Err(Error::domain("allowed term set is empty"));
        }
        if disease_context.trim().is_empty() {
            return Err(Error::domain("disease context is empty"));
        }
        if let Some(missing) = allowed.iter().find(|t| !ontology.contains(t)) {
            return Err(Error::UnknownTerm(missing.to_string()));
        }
        Ok(HpoTask {
            ontology,
            allowed: Some(allowed),
            disease_context: Some(disease_context.trim().to_string()),
            templates,
        })
    }

    pub fn allowed_terms(&self) -> Option<&BTreeSet<TermId>> {
        self.allowed.as_ref()
    }

    /// `HP:####### \t Name` lines for the allowed set, sorted by id.
    pub fn allowed_terms_block(&self) -> String {
        let Some(allowed) = &self.allowed else {
            return String::new();
        };
        let mut out = String::from("\nHere are the HPO phenotypes to consider:\n");
        for id in allowed {
            let name = self.ontology.get(id).map(|t| t.name.as_str()).unwrap_or_default();
            out.push_str(&format!("{id} \t {name}\n"));
        }
        out
    }
}

impl TaskFamily for HpoTask {
    fn name(&self) -> &str {
        "hpo"
    }

    fn kind(&self) -> TaskKind {
        TaskKind::Hpo
    }

    fn system_prompt(&self) -> String {
        let context = self
            .disease_context
            .as_ref()
            .map(|c| format!("\n{c}\n"))
            .unwrap_or_default();
        render_template(
            &self.templates.hpo_system,
            &[
                ("disease_context", &context),
                ("allowed_terms", &self.allowed_terms_block()),
            ],
        )
    }

    fn user_template(&self) -> &str {
        &self.templates.hpo_user
    }

    fn glean_template(&self) -> &str {
        &self.templates.glean
    }

    fn output_schema(&self, key: &str) -> OutputSchema {
        OutputSchema::Hpo { key: key.to_string() }
    }

    fn validate(&self, key: &str, parsed: ParsedOutput, round: u32, audit: &mut AuditLog) -> Extraction {
        let mut result = HpoExtraction::new(key);
        let ParsedOutput::Hpo(items) = parsed else {
            return wrong_shape(key, round, audit, Extraction::Hpo(result));
        };
        for raw in items {
            let term = match TermId::new(&raw.category) {
                Ok(t) => t,
                Err(_) => {
                    audit.record(key, Some(round), "invalid_term_id", raw.category);
                    continue;
                }
            };
            if !self.ontology.contains(&term) {
                audit.record(key, Some(round), "unknown_term", term.to_string());
                continue;
            }
            if self.allowed.as_ref().is_some_and(|a| !a.contains(&term)) {
                audit.record(key, Some(round), "term_not_allowed", term.to_string());
                continue;
            }
            result.assert_term(
                term,
                Evidence {
                    confidence: raw.confidence,
                    reasoning: raw.reasoning,
                },
            );
        }
        Extraction::Hpo(result)
    }
}

pub struct MultiLabelTask {
    templates: PromptTemplates,
}

impl MultiLabelTask {
    pub fn new(templates: PromptTemplates) -> Self {
        MultiLabelTask { templates }
    }
}

impl TaskFamily for MultiLabelTask {
    fn name(&self) -> &str {
        "multilabel"
    }

    fn kind(&self) -> TaskKind {
        TaskKind::MultiLabel
    }

    fn system_prompt(&self) -> String {
        let labels: String = LABEL_UNIVERSE.iter().map(|l| format!("- {l}\n")).collect();
        render_template(&self.templates.multilabel_system, &[("labels", labels.trim_end())])
    }

    fn user_template(&self) -> &str {
        &self.templates.multilabel_user
    }

    fn glean_template(&self) -> &str {
        &self.templates.glean
    }

    fn output_schema(&self, _key: &str) -> OutputSchema {
        OutputSchema::MultiLabel
    }

    fn validate(&self, key: &str, parsed: ParsedOutput, round: u32, audit: &mut AuditLog) -> Extraction {
        let mut result = MultiLabelResult {
            doc_id: key.to_string(),
            labels: BTreeSet::new(),
        };
        let ParsedOutput::MultiLabel(labels) = parsed else {
            return wrong_shape(key, round, audit, Extraction::MultiLabel(result));
        };
        for label in labels {
            if is_known_label(&label) {
                result.labels.insert(label);
            } else {
                audit.record(key, Some(round), "unknown_label", label);
            }
        }
        Extraction::MultiLabel(result)
    }
}

/// Inputs the registered task constructors may need.
#[derive(Clone, Default)]
pub struct TaskContext {
    pub ontology: Option<Arc<Ontology>>,
    pub allowed_terms: Option<BTreeSet<TermId>>,
    pub disease_context: Option<String>,
    pub templates: PromptTemplates,
}

pub type TaskFactory = fn(&TaskContext) -> Result<Box<dyn TaskFamily>>;

pub struct TaskRegistry {
    factories: BTreeMap<String, TaskFactory>,
}

impl Default for TaskRegistry {
    fn default() -> Self {
        let mut reg = TaskRegistry {
            factories: BTreeMap::new(),
        };
        reg.register("ner", |ctx| Ok(Box::new(NerTask::new(ctx.templates.clone()))));
        reg.register("multilabel", |ctx| {
            Ok(Box::new(MultiLabelTask::new(ctx.templates.clone())))
        });
        reg.register("hpo", |ctx| {
            let ontology = ctx
                .ontology
                .clone()
                .ok_or_else(|| Error::Config(vec!["the hpo task needs an ontology".into()]))?;
            let task = match (&ctx.allowed_terms, &ctx.disease_context) {
                (Some(allowed), Some(context)) => {
                    HpoTask::for_patients(ontology, allowed.clone(), context, ctx.templates.clone())?
                }
                (None, None) => HpoTask::new(ontology, ctx.templates.clone()),
                _ => {
                    return Err(Error::Config(vec![
                        "allowed_terms and disease_context must be given together".into(),
                    ]))
                }
            };
            Ok(Box::new(task))
        });
        reg
    }
}

impl TaskRegistry {
    pub fn register(&mut self, name: &str, factory: TaskFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn build(&self, name: &str, ctx: &TaskContext) -> Result<Box<dyn TaskFamily>> {
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| Error::Config(vec![format!("unknown task `{name}`")]))?;
        factory(ctx)
    }
}

/// A worked example: input document and its gold result.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotExample {
    pub document: Document,
    pub gold: Extraction,
}

#[derive(Debug, Clone, Default)]
pub struct ExamplePool {
    examples: Vec<FewShotExample>,
}

impl ExamplePool {
    pub fn new(examples: Vec<FewShotExample>) -> Result<Self> {
        let mut seen = HashSet::new();
        for ex in &examples {
            if !seen.insert(ex.document.doc_id.clone()) {
                return Err(Error::DuplicateId(ex.document.doc_id.clone()));
            }
            if ex.gold.key() != ex.document.doc_id {
                return Err(Error::domain(format!(
                    "example `{}` carries gold for `{}`",
                    ex.document.doc_id,
                    ex.gold.key()
                )));
            }
        }
        Ok(ExamplePool { examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[FewShotExample] {
        &self.examples
    }

    pub fn get(&self, doc_id: &str) -> Option<&FewShotExample> {
        self.examples.iter().find(|e| e.document.doc_id == doc_id)
    }
}

/// A pool entry is never shown as an example for itself: same id or
/// identical text both count.
fn is_same_document(example: &FewShotExample, query: &Document) -> bool {
    example.document.doc_id == query.doc_id || example.document.text == query.text
}

pub trait ExampleSelector: Send + Sync {
    fn name(&self) -> &str;
    fn select(&self, document: &Document) -> Result<Vec<FewShotExample>>;
}

pub struct ZeroShot;

impl ExampleSelector for ZeroShot {
    fn name(&self) -> &str {
        "zero-shot"
    }

    fn select(&self, _document: &Document) -> Result<Vec<FewShotExample>> {
        Ok(Vec::new())
    }
}

/// The first `k` pool examples, in pool order.
pub struct StaticFewShot {
    pool: Arc<ExamplePool>,
    k: usize,
}

impl StaticFewShot {
    pub fn new(pool: Arc<ExamplePool>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::domain("few-shot k must be at least 1"));
        }
        if pool.is_empty() {
            return Err(Error::domain("few-shot example pool is empty"));
        }
        Ok(StaticFewShot { pool, k })
    }
}

impl ExampleSelector for StaticFewShot {
    fn name(&self) -> &str {
        "static-fewshot"
    }

    fn select(&self, document: &Document) -> Result<Vec<FewShotExample>> {
        Ok(self
            .pool
            .examples()
            .iter()
            .filter(|e| !is_same_document(e, document))
            .take(self.k)
            .cloned()
            .collect())
    }
}

/// The `k` pool examples most similar to the query by cosine over
/// embeddings, ties by ascending id.
pub struct DynamicFewShot {
    pool: Arc<ExamplePool>,
    k: usize,
    index: Arc<EmbeddingIndex>,
    embedder: Arc<dyn Embedder>,
}

impl DynamicFewShot {
    pub fn new(pool: Arc<ExamplePool>, k: usize, embedder: Arc<dyn Embedder>) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::domain("dynamic few-shot needs a nonempty example pool"));
        }
        let items: Vec<(String, String)> = pool
            .examples()
            .iter()
            .map(|e| (e.document.doc_id.clone(), e.document.text.clone()))
            .collect();
        let index = EmbeddingIndex::build(embedder.as_ref(), &items)?;
        Self::with_index(pool, k, Arc::new(index), embedder)
    }

    pub fn with_index(
        pool: Arc<ExamplePool>,
        k: usize,
        index: Arc<EmbeddingIndex>,
        embedder: Arc<dyn Embedder>,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::domain("few-shot k must be at least 1"));
        }
        if pool.is_empty() {
            return Err(Error::domain("dynamic few-shot needs a nonempty example pool"));
        }
        if let Some(missing) = pool.examples().iter().find(|e| !index.contains(&e.document.doc_id)) {
            return Err(Error::domain(format!(
                "embedding index does not cover pool example `{}`",
                missing.document.doc_id
            )));
        }
        Ok(DynamicFewShot {
            pool,
            k,
            index,
            embedder,
        })
    }

    pub fn index(&self) -> &EmbeddingIndex {
        &self.index
    }
}

impl ExampleSelector for DynamicFewShot {
    fn name(&self) -> &str {
        "dynamic-fewshot"
    }

    fn select(&self, document: &Document) -> Result<Vec<FewShotExample>> {
        let query = self
            .embedder
            .embed(std::slice::from_ref(&document.text))?
            .pop()
            .expect("one vector per text");
        let ranked = self.index.top_k(&query, self.index.len())?;
        let mut out = Vec::with_capacity(self.k);
        for (id, _) in ranked {
            // index may hold items beyond the pool
            let Some(example) = self.pool.get(&id) else { continue };
            if is_same_document(example, document) {
                continue;
            }
            out.push(example.clone());
            if out.len() == self.k {
                break;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FewShotMode {
    #[serde(rename = "zero-shot")]
    ZeroShot,
    #[serde(rename = "static-fewshot")]
    StaticFewShot,
    #[serde(rename = "dynamic-fewshot")]
    DynamicFewShot,
}

impl FewShotMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FewShotMode::ZeroShot => "zero-shot",
            FewShotMode::StaticFewShot => "static-fewshot",
            FewShotMode::DynamicFewShot => "dynamic-fewshot",
        }
    }
}

impl fmt::Display for FewShotMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FewShotMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero-shot" => Ok(FewShotMode::ZeroShot),
            "static-fewshot" => Ok(FewShotMode::StaticFewShot),
            "dynamic-fewshot" => Ok(FewShotMode::DynamicFewShot),
            _ => Err(Error::domain(format!(
                "unknown few-shot policy `{s}` (zero-shot, static-fewshot, dynamic-fewshot)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotPolicy {
    pub mode: FewShotMode,
    pub k: usize,
}

impl Default for FewShotPolicy {
    fn default() -> Self {
        FewShotPolicy {
            mode: FewShotMode::ZeroShot,
            k: DEFAULT_TOP_K,
        }
    }
}

pub type SelectorFactory = fn(&FewShotPolicy, Arc<ExamplePool>, Arc<dyn Embedder>) -> Result<Box<dyn ExampleSelector>>;

pub struct SelectorRegistry {
    factories: BTreeMap<String, SelectorFactory>,
}

impl Default for SelectorRegistry {
    fn default() -> Self {
        let mut reg = SelectorRegistry {
            factories: BTreeMap::new(),
        };
        reg.register("zero-shot", |_, _, _| Ok(Box::new(ZeroShot)));
        reg.register("static-fewshot", |p, pool, _| {
            Ok(Box::new(StaticFewShot::new(pool, p.k)?))
        });
        reg.register("dynamic-fewshot", |p, pool, emb| {
            Ok(Box::new(DynamicFewShot::new(pool, p.k, emb)?))
        });
        reg
    }
}

impl SelectorRegistry {
    pub fn register(&mut self, name: &str, factory: SelectorFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn build(
        &self,
        policy: &FewShotPolicy,
        pool: Arc<ExamplePool>,
        embedder: Arc<dyn Embedder>,
    ) -> Result<Box<dyn ExampleSelector>> {
        let factory = self
            .factories
            .get(policy.mode.as_str())
            .ok_or_else(|| Error::Config(vec![format!("no selector registered for `{}`", policy.mode)]))?;
        factory(policy, pool, embedder)
    }
}

fn examples_block(examples: &[FewShotExample]) -> String {
    let mut out = String::new();
    for (i, ex) in examples.iter().enumerate() {
        let n = i + 1;
        out.push_str(&format!(
            "EXAMPLE {n} INPUT ({}):\n{}\nEXAMPLE {n} OUTPUT:\n{}\n\n",
            ex.document.doc_id,
            ex.document.text,
            ex.gold.to_model_output()
        ));
    }
    out
}

/// Assembles the request for one document. Byte-deterministic for equal
/// inputs.
pub fn build_prompt(task: &dyn TaskFamily, document: &Document, selector: &dyn ExampleSelector) -> Result<ChatRequest> {
    let examples = selector.select(document)?;
    let user = render_template(
        task.user_template(),
        &[
            ("examples", &examples_block(&examples)),
            ("doc_id", &document.doc_id),
            ("document", &document.text),
        ],
    );
    Ok(ChatRequest::new(task.system_prompt(), user).with_tag(document.doc_id.clone()))
}

/// Re-prompt carrying the cumulative result as compact JSON.
pub fn glean_prompt(task: &dyn TaskFamily, base: &ChatRequest, previous: &Extraction) -> ChatRequest {
    let mut req = base.clone();
    req.user.push_str(&render_template(
        task.glean_template(),
        &[("previous_result", &previous.to_model_output())],
    ));
    req
}
