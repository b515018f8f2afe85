//! Observed phenotype frequencies in a cohort versus ontology-expected
//! frequency categories.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{read_to_string, Error, Result};
use crate::kg::{KnowledgeGraph, PatientKey};
use crate::ontology::{frequency_bin, DiseaseAnnotation, Fraction, FrequencyCategory, Ontology, TermId};

pub const UNGROUPED: &str = "ungrouped";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermFrequency {
    pub count: u64,
    pub fraction: Fraction,
}

/// Patients in `cohort` with at least one assertion of each term whose
/// confidence is `>= min_confidence`. Every requested term gets a row.
pub fn phenotype_frequency(
    graph: &KnowledgeGraph,
    cohort: &BTreeSet<PatientKey>,
    terms: &BTreeSet<TermId>,
    ontology: &Ontology,
    min_confidence: f64,
) -> Result<BTreeMap<TermId, TermFrequency>> {
    if cohort.is_empty() {
        return Err(Error::domain("cohort is empty"));
    }
    if !(0.0..=1.0).contains(&min_confidence) {
        return Err(Error::domain(format!("min_confidence {min_confidence} outside [0, 1]")));
    }
    if let Some(t) = terms.iter().find(|t| !ontology.contains(t)) {
        return Err(Error::UnknownTerm(t.to_string()));
    }
    if let Some(k) = cohort.iter().find(|k| graph.patient(k).is_none()) {
        return Err(Error::domain(format!("cohort patient `{k}` is not in the graph")));
    }
    let mut holders: BTreeMap<&TermId, BTreeSet<&PatientKey>> = terms.iter().map(|t| (t, BTreeSet::new())).collect();
    for a in graph.assertions() {
        if a.confidence < min_confidence || !cohort.contains(&a.patient) {
            continue;
        }
        if let Some(set) = holders.get_mut(&a.term) {
            set.insert(&a.patient);
        }
    }
    let n = cohort.len() as u64;
    holders
        .into_iter()
        .map(|(t, ps)| {
            let count = ps.len() as u64;
            Ok((
                t.clone(),
                TermFrequency {
                    count,
                    fraction: Fraction::new(count, n)?,
                },
            ))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyComparison {
    pub term: TermId,
    pub observed_count: u64,
    pub cohort_size: u64,
    pub observed_fraction: Fraction,
    pub observed_bin: FrequencyCategory,
    pub expected_bin: FrequencyCategory,
    /// Observed minus expected on the ordinal scale; negative means the
    /// cohort under-presents the phenotype.
    pub bin_delta: i32,
}

/// One row per annotation, in annotation order.
pub fn compare_to_ontology(
    frequencies: &BTreeMap<TermId, TermFrequency>,
    annotations: &[DiseaseAnnotation],
) -> Result<Vec<FrequencyComparison>> {
    annotations
        .iter()
        .map(|a| {
            let f = frequencies
                .get(&a.phenotype)
                .ok_or_else(|| Error::domain(format!("annotated term {} has no observed frequency", a.phenotype)))?;
            let observed_bin = frequency_bin(f.fraction);
            Ok(FrequencyComparison {
                term: a.phenotype.clone(),
                observed_count: f.count,
                cohort_size: f.fraction.den,
                observed_fraction: f.fraction,
                observed_bin,
                expected_bin: a.expected,
                bin_delta: observed_bin.ordinal() - a.expected.ordinal(),
            })
        })
        .collect()
}

/// CSV for plotting, rows sorted by (group, term). Terms without a group
/// land in [`UNGROUPED`].
pub fn heatmap_csv(
    comparisons: &[FrequencyComparison],
    grouping: &BTreeMap<TermId, String>,
    ontology: &Ontology,
) -> Result<String> {
    if comparisons.is_empty() {
        return Err(Error::domain("no comparisons to render"));
    }
    let mut rows: Vec<(&str, &FrequencyComparison)> = comparisons
        .iter()
        .map(|c| (grouping.get(&c.term).map(String::as_str).unwrap_or(UNGROUPED), c))
        .collect();
    rows.sort_by(|a, b| (a.0, &a.1.term).cmp(&(b.0, &b.1.term)));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "term",
        "name",
        "group",
        "observed_fraction",
        "observed_bin",
        "expected_bin",
        "bin_delta",
    ])?;
    for (group, c) in rows {
        let name = ontology.get(&c.term).map(|t| t.name.as_str()).unwrap_or_default();
        w.write_record([
            c.term.as_str(),
            name,
            group,
            &format!("{:.3}", c.observed_fraction.value()),
            c.observed_bin.label(),
            c.expected_bin.label(),
            &c.bin_delta.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::domain(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

/// `term_id<TAB>group` lines; blank lines and `#` comments are skipped.
pub fn parse_grouping(text: &str, source: &str) -> Result<BTreeMap<TermId, String>> {
    let mut out = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: source.to_string(),
            line: idx + 1,
            message,
        };
        let (id, group) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected `term_id<TAB>group`".into()))?;
        if idx == 0 && id.eq_ignore_ascii_case("term_id") {
            continue;
        }
        let id = TermId::new(id.trim()).map_err(|e| parse_err(e.to_string()))?;
        let group = group.trim();
        if group.is_empty() {
            return Err(parse_err(format!("empty group for {id}")));
        }
        if out.insert(id.clone(), group.to_string()).is_some() {
            return Err(parse_err(format!("{id} grouped twice")));
        }
    }
    Ok(out)
}

pub fn load_grouping(path: impl AsRef<Path>) -> Result<BTreeMap<TermId, String>> {
    let path = path.as_ref();
    parse_grouping(&read_to_string(path)?, &path.display().to_string())
}

/// Groups each term under the first configured root that is the term itself
/// or one of its `is_a` ancestors. Terms under no root are left out.
pub fn group_by_ancestors(
    ontology: &Ontology,
    terms: &BTreeSet<TermId>,
    roots: &[(TermId, String)],
) -> BTreeMap<TermId, String> {
    let mut out = BTreeMap::new();
    for t in terms {
        let ancestors = ontology.ancestors(t);
        if let Some((_, label)) = roots.iter().find(|(r, _)| r == t || ancestors.contains(r)) {
            out.insert(t.clone(), label.clone());
        }
    }
    out
}
