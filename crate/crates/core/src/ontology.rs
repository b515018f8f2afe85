//! Phenotype ontology loading, label resolution and frequency categories.
//!
//! The input format is a small subset of OBO: `[Term]` stanzas carrying
//! `id`, `name`, `def`, `synonym` and `is_a` tags. Other stanza types and
//! unrecognised tags are skipped. Once loaded an [`Ontology`] is immutable
//! and can be shared freely between threads.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{read_to_string, Error, Result};

/// HPO-style identifier, always stored as `HP:` followed by seven digits.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TermId(String);

impl TermId {
    pub fn new(raw: &str) -> Result<Self> {
        let raw = raw.trim();
        let (prefix, digits) = raw
            .split_once(':')
            .ok_or_else(|| Error::InvalidTermId(raw.to_string()))?;
        if !prefix.eq_ignore_ascii_case("HP") || digits.len() != 7 || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(Error::InvalidTermId(raw.to_string()));
        }
        Ok(TermId(format!("HP:{digits}")))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl FromStr for TermId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TermId::new(s)
    }
}

impl TryFrom<String> for TermId {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        TermId::new(&s)
    }
}

impl From<TermId> for String {
    fn from(id: TermId) -> String {
        id.0
    }
}

impl fmt::Display for TermId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OntologyTerm {
    pub id: TermId,
    pub name: String,
    pub synonyms: Vec<String>,
    pub definition: String,
    pub parents: Vec<TermId>,
}

/// Case-folds and collapses internal whitespace runs to a single space.
pub fn normalize_label(text: &str) -> String {
    text.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone)]
pub struct Ontology {
    terms: Vec<OntologyTerm>,
    by_id: HashMap<TermId, usize>,
    by_name: HashMap<String, Vec<usize>>,
    by_synonym: HashMap<String, Vec<usize>>,
}

impl Ontology {
    /// Builds and validates an ontology from already-parsed terms.
    pub fn from_terms(terms: Vec<OntologyTerm>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(terms.len());
        for (idx, term) in terms.iter().enumerate() {
            if term.name.trim().is_empty() {
                return Err(Error::InvalidRecord(format!("term {} has an empty name", term.id)));
            }
            if by_id.insert(term.id.clone(), idx).is_some() {
                return Err(Error::DuplicateId(term.id.to_string()));
            }
        }

        let mut orphans: BTreeSet<String> = BTreeSet::new();
        for term in &terms {
            for parent in &term.parents {
                if !by_id.contains_key(parent) {
                    orphans.insert(parent.to_string());
                }
            }
        }
        if !orphans.is_empty() {
            return Err(Error::DanglingParents {
                orphans: orphans.into_iter().collect(),
            });
        }

        let mut by_name: HashMap<String, Vec<usize>> = HashMap::new();
        let mut by_synonym: HashMap<String, Vec<usize>> = HashMap::new();
        for (idx, term) in terms.iter().enumerate() {
            by_name.entry(normalize_label(&term.name)).or_default().push(idx);
            for syn in &term.synonyms {
                let slot = by_synonym.entry(normalize_label(syn)).or_default();
                if !slot.contains(&idx) {
                    slot.push(idx);
                }
            }
        }

        Ok(Ontology {
            terms,
            by_id,
            by_name,
            by_synonym,
        })
    }

    pub fn parse_obo(text: &str, source: &str) -> Result<Self> {
        Self::from_terms(parse_obo_terms(text, source)?)
    }

    pub fn term_count(&self) -> usize {
        self.terms.len()
    }

    pub fn terms(&self) -> &[OntologyTerm] {
        &self.terms
    }

    pub fn get(&self, id: &TermId) -> Option<&OntologyTerm> {
        self.by_id.get(id).map(|&i| &self.terms[i])
    }

    pub fn contains(&self, id: &TermId) -> bool {
        self.by_id.contains_key(id)
    }

    /// Looks up a term by its exact primary name.
    pub fn lookup_name(&self, name: &str) -> Option<&TermId> {
        self.terms.iter().find(|t| t.name == name).map(|t| &t.id)
    }

    /// Exact (normalised) match against names first, then synonyms.
    /// No fuzzy matching: unknown text yields an empty list.
    pub fn resolve_label(&self, text: &str) -> Vec<TermId> {
        let key = normalize_label(text);
        let mut out: Vec<TermId> = Vec::new();
        let hits = self
            .by_name
            .get(&key)
            .into_iter()
            .chain(self.by_synonym.get(&key))
            .flatten();
        for &idx in hits {
            let id = &self.terms[idx].id;
            if !out.contains(id) {
                out.push(id.clone());
            }
        }
        out
    }

    /// All `is_a` ancestors of `id`, excluding `id` itself.
    pub fn ancestors(&self, id: &TermId) -> BTreeSet<TermId> {
        let mut seen = BTreeSet::new();
        let mut stack: Vec<&TermId> = match self.get(id) {
            Some(t) => t.parents.iter().collect(),
            None => return seen,
        };
        while let Some(next) = stack.pop() {
            if seen.insert(next.clone()) {
                if let Some(t) = self.get(next) {
                    stack.extend(t.parents.iter());
                }
            }
        }
        seen
    }

    /// Serialises back to the OBO subset accepted by [`load_ontology`].
    pub fn to_obo(&self) -> String {
        let mut out = String::from("format-version: 1.2\n");
        for term in &self.terms {
            out.push_str("\n[Term]\n");
            out.push_str(&format!("id: {}\n", term.id));
            out.push_str(&format!("name: {}\n", term.name));
            if !term.definition.is_empty() {
                out.push_str(&format!("def: \"{}\" []\n", escape_quoted(&term.definition)));
            }
            for syn in &term.synonyms {
                out.push_str(&format!("synonym: \"{}\" EXACT []\n", escape_quoted(syn)));
            }
            for parent in &term.parents {
                out.push_str(&format!("is_a: {parent}\n"));
            }
        }
        out
    }
}

pub fn load_ontology(path: impl AsRef<Path>) -> Result<Ontology> {
    let path = path.as_ref();
    let text = read_to_string(path)?;
    let ontology = Ontology::parse_obo(&text, &path.display().to_string())?;
    log::info!("loaded {} terms from {}", ontology.term_count(), path.display());
    Ok(ontology)
}

fn escape_quoted(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Reads the first double-quoted string of an OBO value, honouring `\"`.
fn parse_quoted(value: &str) -> Option<String> {
    let rest = value.trim_start().strip_prefix('"')?;
    let mut out = String::new();
    let mut chars = rest.chars();
    while let Some(c) = chars.next() {
        match c {
            '\\' => out.push(chars.next()?),
            '"' => return Some(out),
            c => out.push(c),
        }
    }
    None
}

#[derive(Default)]
struct Stanza {
    start_line: usize,
    id: Option<TermId>,
    name: Option<String>,
    definition: Option<String>,
    synonyms: Vec<String>,
    parents: Vec<TermId>,
}

fn parse_obo_terms(text: &str, source: &str) -> Result<Vec<OntologyTerm>> {
    let err = |line: usize, message: String| Error::Parse {
        path: source.to_string(),
        line,
        message,
    };

    let mut terms = Vec::new();
    // None while outside any stanza, Some(None) inside a non-Term stanza.
    let mut current: Option<Option<Stanza>> = None;

    let finish = |stanza: Stanza, terms: &mut Vec<OntologyTerm>| -> Result<()> {
        let id = stanza
            .id
            .ok_or_else(|| err(stanza.start_line, "[Term] stanza without id".into()))?;
        let name = stanza
            .name
            .ok_or_else(|| err(stanza.start_line, format!("term {id} has no name")))?;
        terms.push(OntologyTerm {
            id,
            name,
            synonyms: stanza.synonyms,
            definition: stanza.definition.unwrap_or_default(),
            parents: stanza.parents,
        });
        Ok(())
    };

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('!') {
            continue;
        }
        if line.starts_with('[') {
            if !line.ends_with(']') {
                return Err(err(lineno, format!("malformed stanza header `{line}`")));
            }
            if let Some(Some(stanza)) = current.take() {
                finish(stanza, &mut terms)?;
            }
            current = Some(if line == "[Term]" {
                Some(Stanza {
                    start_line: lineno,
                    ..Stanza::default()
                })
            } else {
                None
            });
            continue;
        }

        let (tag, value) = line
            .split_once(':')
            .ok_or_else(|| err(lineno, format!("expected `tag: value`, found `{line}`")))?;
        let value = value.trim();

        let Some(Some(stanza)) = current.as_mut() else {
            // header lines and non-Term stanzas
            continue;
        };
        match tag.trim() {
            "id" => {
                if stanza.id.is_some() {
                    return Err(err(lineno, "duplicate id tag in stanza".into()));
                }
                stanza.id = Some(TermId::new(value).map_err(|e| err(lineno, e.to_string()))?);
            }
            "name" => {
                if stanza.name.is_some() {
                    return Err(err(lineno, "duplicate name tag in stanza".into()));
                }
                if value.is_empty() {
                    return Err(err(lineno, "empty name".into()));
                }
                stanza.name = Some(value.to_string());
            }
            "def" => {
                let def = parse_quoted(value).ok_or_else(|| err(lineno, "def value must be a quoted string".into()))?;
                stanza.definition = Some(def);
            }
            "synonym" => {
                let syn =
                    parse_quoted(value).ok_or_else(|| err(lineno, "synonym value must be a quoted string".into()))?;
                stanza.synonyms.push(syn);
            }
            "is_a" => {
                let target = value.split('!').next().unwrap_or_default();
                let parent = TermId::new(target).map_err(|e| err(lineno, e.to_string()))?;
                stanza.parents.push(parent);
            }
            _ => {}
        }
    }
    if let Some(Some(stanza)) = current.take() {
        finish(stanza, &mut terms)?;
    }
    Ok(terms)
}

/// Ordinal phenotype frequency bins. Declaration order is the ordinal scale
/// used for bin deltas (Absent = 0 ... Obligate = 5).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FrequencyCategory {
    Absent,
    VeryRare,
    Occasional,
    Frequent,
    VeryFrequent,
    Obligate,
}

impl FrequencyCategory {
    pub const ALL: [FrequencyCategory; 6] = [
        FrequencyCategory::Absent,
        FrequencyCategory::VeryRare,
        FrequencyCategory::Occasional,
        FrequencyCategory::Frequent,
        FrequencyCategory::VeryFrequent,
        FrequencyCategory::Obligate,
    ];

    pub fn ordinal(self) -> i32 {
        self as i32
    }

    pub fn label(self) -> &'static str {
        match self {
            FrequencyCategory::Absent => "Absent",
            FrequencyCategory::VeryRare => "Very rare",
            FrequencyCategory::Occasional => "Occasional",
            FrequencyCategory::Frequent => "Frequent",
            FrequencyCategory::VeryFrequent => "Very frequent",
            FrequencyCategory::Obligate => "Obligate",
        }
    }

    /// HPO frequency sub-ontology term for this bin.
    pub fn hpo_id(self) -> &'static str {
        match self {
            FrequencyCategory::Obligate => "HP:0040280",
            FrequencyCategory::VeryFrequent => "HP:0040281",
            FrequencyCategory::Frequent => "HP:0040282",
            FrequencyCategory::Occasional => "HP:0040283",
            FrequencyCategory::VeryRare => "HP:0040284",
            FrequencyCategory::Absent => "HP:0040285",
        }
    }
}

impl fmt::Display for FrequencyCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for FrequencyCategory {
    type Err = Error;

    /// Accepts the display label, the variant name, or the HPO frequency id.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .trim()
            .chars()
            .filter(|c| !c.is_whitespace() && *c != '_' && *c != '-')
            .flat_map(char::to_lowercase)
            .collect();
        let cat = match key.as_str() {
            "absent" | "excluded" | "hp:0040285" => FrequencyCategory::Absent,
            "veryrare" | "hp:0040284" => FrequencyCategory::VeryRare,
            "occasional" | "hp:0040283" => FrequencyCategory::Occasional,
            "frequent" | "hp:0040282" => FrequencyCategory::Frequent,
            "veryfrequent" | "hp:0040281" => FrequencyCategory::VeryFrequent,
            "obligate" | "hp:0040280" => FrequencyCategory::Obligate,
            _ => return Err(Error::domain(format!("unknown frequency category `{s}`"))),
        };
        Ok(cat)
    }
}

/// Exact rational `num / den` used for cohort fractions so that bin
/// boundaries are compared without floating-point error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fraction {
    pub num: u64,
    pub den: u64,
}

impl Fraction {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if den == 0 {
            return Err(Error::domain("fraction with zero denominator"));
        }
        if num > den {
            return Err(Error::domain(format!("fraction {num}/{den} exceeds 1")));
        }
        Ok(Fraction { num, den })
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// Bins a fraction. Lower bounds are inclusive and upper bounds exclusive,
/// except Obligate which is exactly 1. Anything in (0, 0.05) is VeryRare.
pub fn frequency_bin(fraction: Fraction) -> FrequencyCategory {
    let pct = |p: u64| fraction.num as u128 * 100 >= p as u128 * fraction.den as u128;
    if fraction.num == 0 {
        FrequencyCategory::Absent
    } else if fraction.num == fraction.den {
        FrequencyCategory::Obligate
    } else if pct(80) {
        FrequencyCategory::VeryFrequent
    } else if pct(30) {
        FrequencyCategory::Frequent
    } else if pct(5) {
        FrequencyCategory::Occasional
    } else {
        FrequencyCategory::VeryRare
    }
}

/// Floating-point variant of [`frequency_bin`]; rejects values outside [0, 1].
pub fn frequency_bin_f64(fraction: f64) -> Result<FrequencyCategory> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::domain(format!("fraction {fraction} outside [0, 1]")));
    }
    Ok(if fraction == 0.0 {
        FrequencyCategory::Absent
    } else if fraction == 1.0 {
        FrequencyCategory::Obligate
    } else if fraction >= 0.80 {
        FrequencyCategory::VeryFrequent
    } else if fraction >= 0.30 {
        FrequencyCategory::Frequent
    } else if fraction >= 0.05 {
        FrequencyCategory::Occasional
    } else {
        FrequencyCategory::VeryRare
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiseaseAnnotation {
    pub disease_id: String,
    pub phenotype: TermId,
    pub expected: FrequencyCategory,
}

/// Parses disease annotations from TSV (`disease_id`, `hpo_id`, category label).
/// A header row starting with `disease_id` and `#` comments are skipped.
pub fn parse_annotations(text: &str, ontology: &Ontology) -> Result<Vec<DiseaseAnnotation>> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let fail = |message: String| Error::Parse {
            path: "annotations".into(),
            line,
            message,
        };
        if record.len() != 3 {
            return Err(fail(format!("expected 3 columns, found {}", record.len())));
        }
        if record[0].trim() == "disease_id" {
            continue;
        }
        let phenotype = TermId::new(&record[1]).map_err(|e| fail(e.to_string()))?;
        if !ontology.contains(&phenotype) {
            return Err(fail(format!("phenotype {phenotype} not in ontology")));
        }
        out.push(DiseaseAnnotation {
            disease_id: record[0].trim().to_string(),
            phenotype,
            expected: record[2].parse().map_err(|e: Error| fail(e.to_string()))?,
        });
    }
    Ok(out)
}

pub fn load_annotations(path: impl AsRef<Path>, ontology: &Ontology) -> Result<Vec<DiseaseAnnotation>> {
    parse_annotations(&read_to_string(path.as_ref())?, ontology)
}
