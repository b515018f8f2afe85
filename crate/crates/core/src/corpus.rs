//! Annotated corpora: PubTator-style span corpora, HPO-labelled notes and
//! multilabel note annotations, plus seeded synthetic fixtures that stand in
//! for restricted datasets.
//!
//! Span offsets are Unicode code-point offsets into the document text, where
//! the text is the title, a single space, and the abstract.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{read_to_string, Error, Result};
use crate::jsonl::parse_jsonl;
use crate::ontology::{normalize_label, Ontology, TermId};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EntityType {
    Chemical,
    Disease,
}

impl EntityType {
    pub const ALL: [EntityType; 2] = [EntityType::Chemical, EntityType::Disease];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityType::Chemical => "Chemical",
            EntityType::Disease => "Disease",
        }
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntityType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "chemical" => Ok(EntityType::Chemical),
            "disease" => Ok(EntityType::Disease),
            other => Err(Error::domain(format!("unknown entity type `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanAnnotation {
    pub start: usize,
    pub end: usize,
    pub surface: String,
    pub entity_type: EntityType,
    pub concept_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanDocument {
    pub document: Document,
    pub annotations: Vec<SpanAnnotation>,
}

/// Code-point slice `[start, end)` of `text`, or `None` when out of range.
pub fn char_slice(text: &str, start: usize, end: usize) -> Option<&str> {
    if start > end {
        return None;
    }
    let mut indices = text.char_indices().map(|(i, _)| i).chain(std::iter::once(text.len()));
    let byte_start = indices.nth(start)?;
    let byte_end = if end == start {
        byte_start
    } else {
        indices.nth(end - start - 1)?
    };
    Some(&text[byte_start..byte_end])
}

fn check_span(doc: &Document, ann: &SpanAnnotation) -> Result<()> {
    let fail = |message: String| Error::CorpusIntegrity {
        doc_id: doc.doc_id.clone(),
        message,
    };
    if ann.start >= ann.end {
        return Err(fail(format!("empty or inverted span [{}, {})", ann.start, ann.end)));
    }
    match char_slice(&doc.text, ann.start, ann.end) {
        None => Err(fail(format!(
            "span [{}, {}) beyond text length {}",
            ann.start,
            ann.end,
            doc.text.chars().count()
        ))),
        Some(slice) if slice != ann.surface => Err(fail(format!(
            "surface `{}` does not match text `{}` at [{}, {})",
            ann.surface, slice, ann.start, ann.end
        ))),
        Some(_) => Ok(()),
    }
}

/// Validates document ids are unique, texts nonempty and spans consistent.
pub fn validate_span_corpus(docs: &[SpanDocument]) -> Result<()> {
    let mut seen = HashSet::new();
    for d in docs {
        if !seen.insert(d.document.doc_id.as_str()) {
            return Err(Error::DuplicateId(d.document.doc_id.clone()));
        }
        if d.document.text.is_empty() {
            return Err(Error::CorpusIntegrity {
                doc_id: d.document.doc_id.clone(),
                message: "empty text".into(),
            });
        }
        for ann in &d.annotations {
            check_span(&d.document, ann)?;
        }
    }
    Ok(())
}

/// Parses PubTator-style text: `id|t|title`, `id|a|abstract`, then one
/// tab-separated annotation per line; documents are separated by blank
/// lines. Relation lines (four columns) are ignored.
pub fn parse_span_corpus(text: &str, source: &str) -> Result<Vec<SpanDocument>> {
    struct Pending {
        doc_id: String,
        title: Option<String>,
        abstract_text: Option<String>,
        annotations: Vec<SpanAnnotation>,
    }

    fn flush(p: Pending, out: &mut Vec<SpanDocument>) {
        let title = p.title.unwrap_or_default();
        let text = match p.abstract_text {
            Some(a) if !a.is_empty() => format!("{title} {a}"),
            _ => title,
        };
        out.push(SpanDocument {
            document: Document { doc_id: p.doc_id, text },
            annotations: p.annotations,
        });
    }

    let err = |line: usize, message: String| Error::Parse {
        path: source.to_string(),
        line,
        message,
    };

    let mut out = Vec::new();
    let mut pending: Option<Pending> = None;
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            if let Some(p) = pending.take() {
                flush(p, &mut out);
            }
            continue;
        }

        let header = line.split_once('|').and_then(|(id, rest)| {
            let (tag, body) = rest.split_once('|')?;
            (!id.contains('\t') && (tag == "t" || tag == "a")).then_some((id, tag, body))
        });
        if let Some((id, tag, body)) = header {
            if pending.as_ref().is_some_and(|p| p.doc_id != id) {
                flush(pending.take().unwrap(), &mut out);
            }
            let p = pending.get_or_insert_with(|| Pending {
                doc_id: id.to_string(),
                title: None,
                abstract_text: None,
                annotations: Vec::new(),
            });
            let slot = if tag == "t" { &mut p.title } else { &mut p.abstract_text };
            if slot.is_some() {
                return Err(err(lineno, format!("repeated `{tag}` line for {id}")));
            }
            *slot = Some(body.to_string());
            continue;
        }

        let cols: Vec<&str> = line.split('\t').collect();
        let Some(p) = pending.as_mut() else {
            return Err(err(lineno, "annotation before any title line".into()));
        };
        if cols[0] != p.doc_id {
            return Err(err(
                lineno,
                format!("annotation for `{}` inside document `{}`", cols[0], p.doc_id),
            ));
        }
        if cols.len() == 4 {
            continue;
        }
        if cols.len() != 5 && cols.len() != 6 {
            return Err(err(
                lineno,
                format!("expected 5 or 6 tab-separated columns, found {}", cols.len()),
            ));
        }
        let offset = |s: &str| s.parse::<usize>().map_err(|_| err(lineno, format!("bad offset `{s}`")));
        let concept = cols.get(5).map(|c| c.trim()).filter(|c| !c.is_empty() && *c != "-");
        p.annotations.push(SpanAnnotation {
            start: offset(cols[1])?,
            end: offset(cols[2])?,
            surface: cols[3].to_string(),
            entity_type: cols[4].parse().map_err(|e: Error| err(lineno, e.to_string()))?,
            concept_id: concept.map(str::to_string),
        });
    }
    if let Some(p) = pending.take() {
        flush(p, &mut out);
    }
    validate_span_corpus(&out)?;
    Ok(out)
}

pub fn load_span_corpus(path: impl AsRef<Path>) -> Result<Vec<SpanDocument>> {
    let path = path.as_ref();
    parse_span_corpus(&read_to_string(path)?, &path.display().to_string())
}

/// Renders documents back to PubTator text. The whole text goes on the
/// title line so offsets are preserved exactly.
pub fn to_pubtator(docs: &[SpanDocument]) -> String {
    let mut out = String::new();
    for d in docs {
        out.push_str(&format!(
            "{}|t|{}\n{}|a|\n",
            d.document.doc_id, d.document.text, d.document.doc_id
        ));
        for a in &d.annotations {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                d.document.doc_id,
                a.start,
                a.end,
                a.surface,
                a.entity_type,
                a.concept_id.as_deref().unwrap_or("-")
            ));
        }
        out.push('\n');
    }
    out
}

/// A clinical note with its gold HPO terms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HpoGoldRecord {
    pub doc_id: String,
    pub text: String,
    pub hpo_ids: BTreeSet<TermId>,
}

impl HpoGoldRecord {
    pub fn document(&self) -> Document {
        Document {
            doc_id: self.doc_id.clone(),
            text: self.text.clone(),
        }
    }
}

/// A note annotated with labels from [`LABEL_UNIVERSE`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiLabelRecord {
    pub doc_id: String,
    pub text: String,
    pub labels: BTreeSet<String>,
}

impl MultiLabelRecord {
    pub fn document(&self) -> Document {
        Document {
            doc_id: self.doc_id.clone(),
            text: self.text.clone(),
        }
    }
}

/// Thirteen phenotype categories plus `None` and `Unsure`.
pub const LABEL_UNIVERSE: [&str; 15] = [
    "Advanced Cancer",
    "Advanced Heart Disease",
    "Advanced Lung Disease",
    "Alcohol Abuse",
    "Chronic Neurological Dystrophies",
    "Chronic Pain Fibromyalgia",
    "Dementia",
    "Depression",
    "Developmental Delay Retardation",
    "Non Adherence",
    "Obesity",
    "Other Substance Abuse",
    "Schizophrenia and other Psychiatric Disorders",
    "None",
    "Unsure",
];

pub fn is_known_label(label: &str) -> bool {
    LABEL_UNIVERSE.contains(&label)
}

fn check_unique_nonempty<'a>(items: impl Iterator<Item = (&'a str, &'a str)>) -> Result<()> {
    let mut seen = HashSet::new();
    for (doc_id, text) in items {
        if !seen.insert(doc_id) {
            return Err(Error::DuplicateId(doc_id.to_string()));
        }
        if text.is_empty() {
            return Err(Error::CorpusIntegrity {
                doc_id: doc_id.to_string(),
                message: "empty text".into(),
            });
        }
    }
    Ok(())
}

/// Parses HPO gold JSON Lines; when an ontology is given every term must resolve.
pub fn parse_hpo_gold(text: &str, source: &str, ontology: Option<&Ontology>) -> Result<Vec<HpoGoldRecord>> {
    let records: Vec<HpoGoldRecord> = parse_jsonl(text, source)?;
    check_unique_nonempty(records.iter().map(|r| (r.doc_id.as_str(), r.text.as_str())))?;
    if let Some(ont) = ontology {
        for r in &records {
            if let Some(bad) = r.hpo_ids.iter().find(|t| !ont.contains(t)) {
                return Err(Error::CorpusIntegrity {
                    doc_id: r.doc_id.clone(),
                    message: format!("gold term {bad} not in ontology"),
                });
            }
        }
    }
    Ok(records)
}

pub fn load_hpo_gold(path: impl AsRef<Path>, ontology: Option<&Ontology>) -> Result<Vec<HpoGoldRecord>> {
    let path = path.as_ref();
    parse_hpo_gold(&read_to_string(path)?, &path.display().to_string(), ontology)
}

pub fn parse_multilabel_gold(text: &str, source: &str) -> Result<Vec<MultiLabelRecord>> {
    let records: Vec<MultiLabelRecord> = parse_jsonl(text, source)?;
    check_unique_nonempty(records.iter().map(|r| (r.doc_id.as_str(), r.text.as_str())))?;
    for r in &records {
        if let Some(bad) = r.labels.iter().find(|l| !is_known_label(l)) {
            return Err(Error::CorpusIntegrity {
                doc_id: r.doc_id.clone(),
                message: format!("label `{bad}` is not in the label universe"),
            });
        }
    }
    Ok(records)
}

pub fn load_multilabel_gold(path: impl AsRef<Path>) -> Result<Vec<MultiLabelRecord>> {
    let path = path.as_ref();
    parse_multilabel_gold(&read_to_string(path)?, &path.display().to_string())
}

/// Seeded split into `(train, test)`; both halves keep the input order.
pub fn split_train_test<T: Clone>(items: &[T], test_size: usize, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if test_size > items.len() {
        return Err(Error::domain(format!(
            "test_size {test_size} exceeds corpus size {}",
            items.len()
        )));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test_idx: HashSet<usize> = order[..test_size].iter().copied().collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, item) in items.iter().enumerate() {
        if test_idx.contains(&i) {
            test.push(item.clone());
        } else {
            train.push(item.clone());
        }
    }
    Ok((train, test))
}

const NOTE_OPENERS: [&str; 4] = [
    "Patient seen in clinic for review.",
    "Follow up visit with caregiver present.",
    "Referred by primary care for evaluation.",
    "Inpatient consult requested by ward team.",
];
const NOTE_CLOSERS: [&str; 3] = [
    "Plan: continue current management.",
    "Plan: repeat review in three months.",
    "Plan: obtain further workup.",
];

/// Terms usable in synthetic notes: their name neither contains nor is
/// contained in another term's name, and does not occur in the note
/// boilerplate. This keeps gold recoverable by exact dictionary scanning.
pub fn fixture_eligible_terms(ontology: &Ontology) -> Vec<TermId> {
    let names: Vec<String> = ontology.terms().iter().map(|t| normalize_label(&t.name)).collect();
    let boilerplate = normalize_label(
        &NOTE_OPENERS
            .iter()
            .chain(NOTE_CLOSERS.iter())
            .copied()
            .chain(["Findings:"])
            .collect::<Vec<_>>()
            .join(" "),
    );
    ontology
        .terms()
        .iter()
        .enumerate()
        .filter(|(i, _)| {
            let name = &names[*i];
            !boilerplate.contains(name.as_str())
                && !name.contains(';')
                && names
                    .iter()
                    .enumerate()
                    .all(|(j, other)| j == *i || (!other.contains(name.as_str()) && !name.contains(other.as_str())))
        })
        .map(|(_, t)| t.id.clone())
        .collect()
}

/// Generates `n_docs` notes, each embedding the names of `labels_per_doc`
/// sampled ontology terms verbatim; gold is exactly the embedded terms.
pub fn synthesize_fixture(
    seed: u64,
    ontology: &Ontology,
    n_docs: usize,
    labels_per_doc: usize,
) -> Result<Vec<HpoGoldRecord>> {
    if n_docs == 0 {
        return Err(Error::domain("n_docs must be at least 1"));
    }
    if labels_per_doc > ontology.term_count() {
        return Err(Error::domain(format!(
            "labels_per_doc {labels_per_doc} exceeds ontology term count {}",
            ontology.term_count()
        )));
    }
    let eligible = fixture_eligible_terms(ontology);
    if labels_per_doc > eligible.len() {
        return Err(Error::domain(format!(
            "labels_per_doc {labels_per_doc} exceeds the {} terms with unambiguous names",
            eligible.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_docs);
    for i in 0..n_docs {
        let picked: Vec<&TermId> = eligible.choose_multiple(&mut rng, labels_per_doc).collect();
        let names: Vec<&str> = picked
            .iter()
            .map(|id| ontology.get(id).expect("eligible term").name.as_str())
            .collect();
        let text = format!(
            "{} Findings: {}. {}",
            NOTE_OPENERS[rng.gen_range(0..NOTE_OPENERS.len())],
            names.join("; "),
            NOTE_CLOSERS[rng.gen_range(0..NOTE_CLOSERS.len())]
        );
        out.push(HpoGoldRecord {
            doc_id: format!("note-{:04}", i + 1),
            text,
            hpo_ids: picked.into_iter().cloned().collect(),
        });
    }
    Ok(out)
}

const SYNTH_CHEMICALS: [&str; 10] = [
    "aspirin",
    "ibuprofen",
    "cisplatin",
    "lithium",
    "haloperidol",
    "morphine",
    "warfarin",
    "doxorubicin",
    "caffeine",
    "nicotine",
];
const SYNTH_DISEASES: [&str; 10] = [
    "nausea",
    "hepatotoxicity",
    "cardiomyopathy",
    "seizures",
    "hypertension",
    "nephrotoxicity",
    "anemia",
    "tremor",
    "arrhythmia",
    "neutropenia",
];

/// Span-annotated abstracts pairing `pairs_per_doc` chemicals with diseases.
pub fn synthesize_span_fixture(seed: u64, n_docs: usize, pairs_per_doc: usize) -> Result<Vec<SpanDocument>> {
    if n_docs == 0 {
        return Err(Error::domain("n_docs must be at least 1"));
    }
    if pairs_per_doc == 0 || pairs_per_doc > SYNTH_CHEMICALS.len() {
        return Err(Error::domain(format!(
            "pairs_per_doc must be in 1..={}",
            SYNTH_CHEMICALS.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_docs);
    for i in 0..n_docs {
        let chems: Vec<&str> = SYNTH_CHEMICALS
            .choose_multiple(&mut rng, pairs_per_doc)
            .copied()
            .collect();
        let dis: Vec<&str> = SYNTH_DISEASES
            .choose_multiple(&mut rng, pairs_per_doc)
            .copied()
            .collect();
        let mut text = String::from("Case report.");
        let mut annotations = Vec::new();
        let mut push = |text: &mut String, s: &str, ty: Option<EntityType>| {
            let start = text.chars().count();
            text.push_str(s);
            if let Some(entity_type) = ty {
                annotations.push(SpanAnnotation {
                    start,
                    end: start + s.chars().count(),
                    surface: s.to_string(),
                    entity_type,
                    concept_id: None,
                });
            }
        };
        for (c, d) in chems.iter().zip(&dis) {
            push(&mut text, " Treatment with ", None);
            push(&mut text, c, Some(EntityType::Chemical));
            push(&mut text, " was followed by ", None);
            push(&mut text, d, Some(EntityType::Disease));
            push(&mut text, ".", None);
        }
        out.push(SpanDocument {
            document: Document {
                doc_id: format!("pmid-{}", 100_000 + i),
                text,
            },
            annotations,
        });
    }
    validate_span_corpus(&out)?;
    Ok(out)
}

const LABEL_CUES: [&str; 13] = [
    "metastatic malignancy under palliative care",
    "end stage heart failure",
    "oxygen dependent lung disease",
    "heavy alcohol use",
    "progressive neuromuscular dystrophy",
    "chronic widespread pain",
    "progressive memory loss",
    "persistent low mood",
    "intellectual disability since childhood",
    "missed medications repeatedly",
    "body mass index above forty",
    "ongoing opioid misuse",
    "chronic psychotic disorder",
];

/// Multilabel notes: each carries up to three phenotype labels (or `None`)
/// with one cue phrase per label embedded in the text.
pub fn synthesize_multilabel_fixture(seed: u64, n_docs: usize) -> Result<Vec<MultiLabelRecord>> {
    if n_docs == 0 {
        return Err(Error::domain("n_docs must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_docs);
    for i in 0..n_docs {
        let n = rng.gen_range(0..=3);
        let idx: Vec<usize> = rand::seq::index::sample(&mut rng, 13, n).into_vec();
        let mut labels = BTreeSet::new();
        let mut cues = Vec::new();
        for j in idx {
            labels.insert(LABEL_UNIVERSE[j].to_string());
            cues.push(LABEL_CUES[j]);
        }
        let text = if labels.is_empty() {
            labels.insert("None".to_string());
            "Discharge summary. Uncomplicated admission, no chronic problems documented.".to_string()
        } else {
            format!("Discharge summary. History notable for {}.", cues.join(", "))
        };
        out.push(MultiLabelRecord {
            doc_id: format!("dis-{:04}", i + 1),
            text,
            labels,
        });
    }
    Ok(out)
}
