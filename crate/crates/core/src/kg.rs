//! Patient knowledge graph: structured codes, free-text notes and extracted
//! phenotype assertions, persisted as typed JSON Lines.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{read_to_string, Error, Result};
use crate::jsonl::{parse_jsonl, to_jsonl};
use crate::ontology::{Ontology, TermId};

fn violation(rule: &'static str, detail: impl Into<String>) -> Error {
    Error::GraphIntegrity {
        rule,
        detail: detail.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PatientKey(String);

impl PatientKey {
    pub fn new(value: impl Into<String>) -> Result<Self> {
        let value = value.into();
        if value.trim().is_empty() {
            return Err(violation("empty_patient_key", "patient key is blank"));
        }
        Ok(PatientKey(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for PatientKey {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        PatientKey::new(s)
    }
}

impl From<PatientKey> for String {
    fn from(k: PatientKey) -> String {
        k.0
    }
}

impl fmt::Display for PatientKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Demographics {
    pub age_years: Option<u32>,
    pub race: Option<String>,
    pub state: Option<String>,
    pub zip: Option<String>,
}

/// Uppercased, trimmed code; internal whitespace or emptiness is rejected.
pub fn normalize_code(code: &str) -> Result<String> {
    let code = code.trim();
    if code.is_empty() || code.chars().any(char::is_whitespace) {
        return Err(violation(
            "invalid_code",
            format!("code `{code}` is empty or contains whitespace"),
        ));
    }
    Ok(code.to_ascii_uppercase())
}

fn normalize_codes(codes: &BTreeSet<String>) -> Result<BTreeSet<String>> {
    codes.iter().map(|c| normalize_code(c)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientNode {
    pub key: PatientKey,
    #[serde(default)]
    pub demographics: Demographics,
    #[serde(default)]
    pub icd10: BTreeSet<String>,
    #[serde(default)]
    pub cpt: BTreeSet<String>,
    #[serde(default)]
    pub rxnorm: BTreeSet<String>,
}

impl PatientNode {
    pub fn new(key: PatientKey) -> Self {
        PatientNode {
            key,
            demographics: Demographics::default(),
            icd10: BTreeSet::new(),
            cpt: BTreeSet::new(),
            rxnorm: BTreeSet::new(),
        }
    }

    fn normalized(mut self) -> Result<Self> {
        self.icd10 = normalize_codes(&self.icd10)?;
        self.cpt = normalize_codes(&self.cpt)?;
        self.rxnorm = normalize_codes(&self.rxnorm)?;
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoteKind {
    ClinicalNote,
    History,
    VisitPurpose,
    GeneticsReport,
    Other,
}

impl NoteKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NoteKind::ClinicalNote => "clinical_note",
            NoteKind::History => "history",
            NoteKind::VisitPurpose => "visit_purpose",
            NoteKind::GeneticsReport => "genetics_report",
            NoteKind::Other => "other",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoteNode {
    pub note_id: String,
    pub patient: PatientKey,
    pub text: String,
    /// Serialised as `note_kind`; `kind` is the record tag in graph files.
    #[serde(rename = "note_kind")]
    pub kind: NoteKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhenotypeAssertion {
    pub patient: PatientKey,
    pub term: TermId,
    pub confidence: f64,
    pub reasoning: String,
    #[serde(default)]
    pub source_note: Option<String>,
    pub extractor_version: String,
}

/// Identity of an assertion edge; re-upserting the same identity replaces
/// confidence and reasoning.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct AssertionId {
    patient: PatientKey,
    term: TermId,
    source_note: Option<String>,
    extractor_version: String,
}

impl PhenotypeAssertion {
    fn id(&self) -> AssertionId {
        AssertionId {
            patient: self.patient.clone(),
            term: self.term.clone(),
            source_note: self.source_note.clone(),
            extractor_version: self.extractor_version.clone(),
        }
    }
}

/// One line of a graph or ingest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraphRecord {
    Patient(PatientNode),
    Note(NoteNode),
    Assertion(PhenotypeAssertion),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CohortMode {
    Any,
    All,
}

/// Property graph over patients. Queries take `&self`; mutation needs
/// `&mut self`, so wrapping in a `RwLock` gives single-writer,
/// multi-reader access.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeGraph {
    patients: BTreeMap<PatientKey, PatientNode>,
    notes: BTreeMap<String, NoteNode>,
    assertions: BTreeMap<AssertionId, PhenotypeAssertion>,
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a graph from records in any order. Notes and assertions are
    /// attached after every patient is known, so forward references are fine.
    pub fn build(records: impl IntoIterator<Item = GraphRecord>, ontology: &Ontology) -> Result<Self> {
        let mut graph = KnowledgeGraph::new();
        let mut notes = Vec::new();
        let mut assertions = Vec::new();
        for record in records {
            match record {
                GraphRecord::Patient(p) => graph.add_patient(p)?,
                GraphRecord::Note(n) => notes.push(n),
                GraphRecord::Assertion(a) => assertions.push(a),
            }
        }
        for n in notes {
            graph.add_note(n)?;
        }
        for a in assertions {
            graph.upsert_assertion(a, ontology)?;
        }
        Ok(graph)
    }

    pub fn add_patient(&mut self, patient: PatientNode) -> Result<()> {
        let patient = patient.normalized()?;
        if self.patients.contains_key(&patient.key) {
            return Err(violation(
                "duplicate_patient",
                format!("patient `{}` already present", patient.key),
            ));
        }
        self.patients.insert(patient.key.clone(), patient);
        Ok(())
    }

    pub fn add_note(&mut self, note: NoteNode) -> Result<()> {
        if note.note_id.trim().is_empty() {
            return Err(violation(
                "empty_note_id",
                format!("note for `{}` has a blank id", note.patient),
            ));
        }
        if !self.patients.contains_key(&note.patient) {
            return Err(violation(
                "dangling_note",
                format!("note `{}` references unknown patient `{}`", note.note_id, note.patient),
            ));
        }
        if self.notes.contains_key(&note.note_id) {
            return Err(violation(
                "duplicate_note",
                format!("note `{}` already present", note.note_id),
            ));
        }
        self.notes.insert(note.note_id.clone(), note);
        Ok(())
    }

    /// Inserts or replaces an assertion. Returns `true` if the graph changed.
    pub fn upsert_assertion(&mut self, assertion: PhenotypeAssertion, ontology: &Ontology) -> Result<bool> {
        if !self.patients.contains_key(&assertion.patient) {
            return Err(violation(
                "dangling_assertion",
                format!(
                    "assertion on {} references unknown patient `{}`",
                    assertion.term, assertion.patient
                ),
            ));
        }
        if !ontology.contains(&assertion.term) {
            return Err(violation(
                "unknown_term",
                format!(
                    "assertion for `{}` uses {} which is not in the ontology",
                    assertion.patient, assertion.term
                ),
            ));
        }
        if !(0.0..=1.0).contains(&assertion.confidence) {
            return Err(violation(
                "invalid_confidence",
                format!(
                    "confidence {} outside [0, 1] for `{}`",
                    assertion.confidence, assertion.patient
                ),
            ));
        }
        if let Some(note_id) = &assertion.source_note {
            match self.notes.get(note_id) {
                None => {
                    return Err(violation(
                        "dangling_source_note",
                        format!("assertion cites unknown note `{note_id}`"),
                    ))
                }
                Some(n) if n.patient != assertion.patient => {
                    return Err(violation(
                        "foreign_source_note",
                        format!(
                            "note `{note_id}` belongs to `{}`, not `{}`",
                            n.patient, assertion.patient
                        ),
                    ))
                }
                Some(_) => {}
            }
        }
        let id = assertion.id();
        if self.assertions.get(&id) == Some(&assertion) {
            return Ok(false);
        }
        self.assertions.insert(id, assertion);
        Ok(true)
    }

    pub fn patient_count(&self) -> usize {
        self.patients.len()
    }

    /// Patients plus notes.
    pub fn node_count(&self) -> usize {
        self.patients.len() + self.notes.len()
    }

    /// Patient–note links plus assertion edges.
    pub fn edge_count(&self) -> usize {
        self.notes.len() + self.assertions.len()
    }

    pub fn assertion_count(&self) -> usize {
        self.assertions.len()
    }

    pub fn patient(&self, key: &PatientKey) -> Option<&PatientNode> {
        self.patients.get(key)
    }

    pub fn patients(&self) -> impl Iterator<Item = &PatientNode> {
        self.patients.values()
    }

    pub fn notes(&self) -> impl Iterator<Item = &NoteNode> {
        self.notes.values()
    }

    /// A patient's notes ordered by note id.
    pub fn notes_for<'a>(&'a self, key: &'a PatientKey) -> impl Iterator<Item = &'a NoteNode> + 'a {
        self.notes.values().filter(move |n| &n.patient == key)
    }

    pub fn assertions(&self) -> impl Iterator<Item = &PhenotypeAssertion> {
        self.assertions.values()
    }

    pub fn assertions_for<'a>(&'a self, key: &'a PatientKey) -> impl Iterator<Item = &'a PhenotypeAssertion> + 'a {
        self.assertions.values().filter(move |a| &a.patient == key)
    }

    /// Exact match on normalised codes; no hierarchy expansion.
    pub fn cohort_by_icd(&self, codes: &BTreeSet<String>, mode: CohortMode) -> Result<BTreeSet<PatientKey>> {
        if codes.is_empty() {
            return Err(Error::domain("cohort query needs at least one code"));
        }
        let codes = normalize_codes(codes)?;
        Ok(self
            .patients
            .values()
            .filter(|p| match mode {
                CohortMode::Any => !p.icd10.is_disjoint(&codes),
                CohortMode::All => p.icd10.is_superset(&codes),
            })
            .map(|p| p.key.clone())
            .collect())
    }

    /// Every ICD-10 code present in the graph that starts with `prefix`.
    /// Feed the result to [`cohort_by_icd`](Self::cohort_by_icd) to query a
    /// code family explicitly.
    pub fn expand_icd_prefix(&self, prefix: &str) -> Result<BTreeSet<String>> {
        let prefix = normalize_code(prefix)?;
        Ok(self
            .patients
            .values()
            .flat_map(|p| p.icd10.iter())
            .filter(|c| c.starts_with(&prefix))
            .cloned()
            .collect())
    }

    /// Case-insensitive substring search over note text, ordered by
    /// (patient, note id).
    pub fn keyword_search(&self, pattern: &str) -> Result<Vec<(PatientKey, String)>> {
        if pattern.trim().is_empty() {
            return Err(Error::domain("keyword pattern is empty"));
        }
        let needle = pattern.to_lowercase();
        let mut hits: Vec<(PatientKey, String)> = self
            .notes
            .values()
            .filter(|n| n.text.to_lowercase().contains(&needle))
            .map(|n| (n.patient.clone(), n.note_id.clone()))
            .collect();
        hits.sort();
        Ok(hits)
    }

    /// Plain-text rendering of one patient used as model input.
    pub fn render_patient_record(&self, key: &PatientKey) -> Result<String> {
        let p = self
            .patients
            .get(key)
            .ok_or_else(|| Error::domain(format!("unknown patient `{key}`")))?;
        let join = |s: &BTreeSet<String>| s.iter().cloned().collect::<Vec<_>>().join(", ");
        let d = &p.demographics;
        let mut out = String::new();
        out.push_str(&format!("Patient key: {}\n", p.key));
        if let Some(age) = d.age_years {
            out.push_str(&format!("Age: {age}\n"));
        }
        for (label, value) in [("Race", &d.race), ("State", &d.state), ("Zip", &d.zip)] {
            if let Some(v) = value {
                out.push_str(&format!("{label}: {v}\n"));
            }
        }
        out.push_str(&format!("ICD-10 codes: {}\n", join(&p.icd10)));
        out.push_str(&format!("CPT codes: {}\n", join(&p.cpt)));
        out.push_str(&format!("Medications (RxNorm): {}\n", join(&p.rxnorm)));
        for n in self.notes_for(key) {
            out.push_str(&format!(
                "\n[{} {}]\n{}\n",
                n.kind.as_str(),
                n.note_id,
                n.text.trim_end()
            ));
        }
        Ok(out)
    }

    /// Records in canonical order: patients, then notes, then assertions.
    pub fn records(&self) -> Vec<GraphRecord> {
        let mut out: Vec<GraphRecord> = self.patients.values().cloned().map(GraphRecord::Patient).collect();
        let mut notes: Vec<&NoteNode> = self.notes.values().collect();
        notes.sort_by(|a, b| (&a.patient, &a.note_id).cmp(&(&b.patient, &b.note_id)));
        out.extend(notes.into_iter().cloned().map(GraphRecord::Note));
        out.extend(self.assertions.values().cloned().map(GraphRecord::Assertion));
        out
    }

    pub fn to_jsonl(&self) -> Result<String> {
        to_jsonl(&self.records())
    }

    /// Parses and re-validates a graph file; every integrity rule enforced on
    /// mutation is enforced again here.
    pub fn from_jsonl(text: &str, source: &str, ontology: &Ontology) -> Result<Self> {
        let records: Vec<GraphRecord> = parse_jsonl(text, source)?;
        Self::build(records, ontology)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::error::write_string(path.as_ref(), &self.to_jsonl()?)
    }

    pub fn load(path: impl AsRef<Path>, ontology: &Ontology) -> Result<Self> {
        let path = path.as_ref();
        Self::from_jsonl(&read_to_string(path)?, &path.display().to_string(), ontology)
    }
}
