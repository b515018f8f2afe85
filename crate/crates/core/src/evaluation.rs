//! Precision / recall / F1 scoring for the three task families, plus report
//! rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{is_known_label, EntityType, HpoGoldRecord, MultiLabelRecord, SpanDocument, LABEL_UNIVERSE};
use crate::error::{Error, Result};
use crate::extraction::{HpoExtraction, Mention, MultiLabelResult, NerResult};
use crate::ontology::TermId;

/// Key under which the HPO scorer reports its single aggregate row.
pub const HPO_KEY: &str = "HPO";
/// Key of the macro-averaged row in multilabel reports.
pub const MACRO_KEY: &str = "macro";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    /// Counts for one gold/pred set pair.
    pub fn from_sets<T: Ord>(gold: &BTreeSet<T>, pred: &BTreeSet<T>) -> Self {
        let tp = gold.intersection(pred).count() as u64;
        ConfusionCounts {
            tp,
            fp: pred.len() as u64 - tp,
            fn_: gold.len() as u64 - tp,
        }
    }

    pub fn add(&mut self, other: ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// Both sets empty scores perfectly; otherwise a zero denominator gives 0.
    pub fn metrics(&self) -> Metrics {
        if self.tp + self.fp + self.fn_ == 0 {
            return Metrics {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            };
        }
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if self.tp == 0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Metrics { precision, recall, f1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyScore {
    pub counts: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl KeyScore {
    pub fn from_counts(counts: ConfusionCounts) -> Self {
        let m = counts.metrics();
        KeyScore {
            counts,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
        }
    }

    pub fn metrics(&self) -> Metrics {
        Metrics {
            precision: self.precision,
            recall: self.recall,
            f1: self.f1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_key: BTreeMap<String, KeyScore>,
    pub micro_accuracy: Option<f64>,
}

impl MetricReport {
    pub fn get(&self, key: &str) -> Option<&KeyScore> {
        self.per_key.get(key)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchPolicy {
    /// Case-folded surface plus type, compared as a per-document set.
    #[default]
    NormalizedMentionSet,
    /// Character offsets plus type; needs span-bearing predictions.
    ExactSpan,
    /// Normalised concept id plus type; unlinked annotations are ignored.
    ConceptId,
}

impl FromStr for MatchPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "normalizedmentionset" | "mention" | "mentions" => Ok(MatchPolicy::NormalizedMentionSet),
            "exactspan" | "span" => Ok(MatchPolicy::ExactSpan),
            "conceptid" | "concept" => Ok(MatchPolicy::ConceptId),
            _ => Err(Error::domain(format!("unknown match policy `{s}`"))),
        }
    }
}

/// NER predictions: bare mentions (LLM output) or offset-bearing spans.
#[derive(Debug, Clone, PartialEq)]
pub enum NerPrediction {
    Mentions(NerResult),
    Spans(SpanDocument),
}

impl NerPrediction {
    pub fn doc_id(&self) -> &str {
        match self {
            NerPrediction::Mentions(r) => &r.doc_id,
            NerPrediction::Spans(d) => &d.document.doc_id,
        }
    }
}

impl From<NerResult> for NerPrediction {
    fn from(r: NerResult) -> Self {
        NerPrediction::Mentions(r)
    }
}

impl From<SpanDocument> for NerPrediction {
    fn from(d: SpanDocument) -> Self {
        NerPrediction::Spans(d)
    }
}

/// Pairs gold and predictions by id, requiring identical coverage.
fn align<'g, 'p, G, P>(
    gold: &'g [G],
    gold_id: impl Fn(&G) -> &str,
    pred: &'p [P],
    pred_id: impl Fn(&P) -> &str,
) -> Result<Vec<(&'g G, &'p P)>> {
    let mut by_id: BTreeMap<&str, &P> = BTreeMap::new();
    for p in pred {
        if by_id.insert(pred_id(p), p).is_some() {
            return Err(Error::DuplicateId(pred_id(p).to_string()));
        }
    }
    let mut seen = BTreeSet::new();
    let mut missing_pred = Vec::new();
    let mut pairs = Vec::with_capacity(gold.len());
    for g in gold {
        let id = gold_id(g);
        if !seen.insert(id) {
            return Err(Error::DuplicateId(id.to_string()));
        }
        match by_id.get(id) {
            Some(p) => pairs.push((g, *p)),
            None => missing_pred.push(id.to_string()),
        }
    }
    let missing_gold: Vec<String> = by_id
        .keys()
        .filter(|id| !seen.contains(*id))
        .map(|s| s.to_string())
        .collect();
    if missing_pred.is_empty() && missing_gold.is_empty() {
        return Ok(pairs);
    }
    let mut msg = String::from("gold and prediction doc ids differ");
    if !missing_pred.is_empty() {
        let _ = write!(msg, "; missing predictions for [{}]", missing_pred.join(", "));
    }
    if !missing_gold.is_empty() {
        let _ = write!(msg, "; missing gold for [{}]", missing_gold.join(", "));
    }
    Err(Error::domain(msg))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum MatchKey {
    Mention(String),
    Span(usize, usize),
    Concept(String),
}

fn span_keys(doc: &SpanDocument, policy: MatchPolicy) -> BTreeMap<EntityType, BTreeSet<MatchKey>> {
    let mut out: BTreeMap<EntityType, BTreeSet<MatchKey>> = BTreeMap::new();
    for a in &doc.annotations {
        let key = match policy {
            MatchPolicy::NormalizedMentionSet => match Mention::new(&a.surface, a.entity_type) {
                Some(m) => MatchKey::Mention(m.surface),
                None => continue,
            },
            MatchPolicy::ExactSpan => MatchKey::Span(a.start, a.end),
            MatchPolicy::ConceptId => match &a.concept_id {
                Some(c) if !c.trim().is_empty() => MatchKey::Concept(c.trim().to_ascii_uppercase()),
                _ => continue,
            },
        };
        out.entry(a.entity_type).or_default().insert(key);
    }
    out
}

fn prediction_keys(pred: &NerPrediction, policy: MatchPolicy) -> Result<BTreeMap<EntityType, BTreeSet<MatchKey>>> {
    match pred {
        NerPrediction::Spans(doc) => Ok(span_keys(doc, policy)),
        NerPrediction::Mentions(r) => {
            if policy != MatchPolicy::NormalizedMentionSet {
                return Err(Error::domain(format!(
                    "{policy:?} matching needs span-bearing predictions (doc `{}`)",
                    r.doc_id
                )));
            }
            let mut out: BTreeMap<EntityType, BTreeSet<MatchKey>> = BTreeMap::new();
            for m in &r.mentions {
                // re-normalise in case the result was built by hand
                if let Some(m) = Mention::new(&m.surface, m.entity_type) {
                    out.entry(m.entity_type)
                        .or_default()
                        .insert(MatchKey::Mention(m.surface));
                }
            }
            Ok(out)
        }
    }
}

/// Micro-averaged scores per entity type.
pub fn score_ner(gold: &[SpanDocument], pred: &[NerPrediction], policy: MatchPolicy) -> Result<MetricReport> {
    let pairs = align(gold, |g| g.document.doc_id.as_str(), pred, |p| p.doc_id())?;
    let mut totals: BTreeMap<EntityType, ConfusionCounts> =
        EntityType::ALL.iter().map(|t| (*t, Default::default())).collect();
    let empty = BTreeSet::new();
    for (g, p) in pairs {
        let gk = span_keys(g, policy);
        let pk = prediction_keys(p, policy)?;
        for ty in EntityType::ALL {
            let c = ConfusionCounts::from_sets(gk.get(&ty).unwrap_or(&empty), pk.get(&ty).unwrap_or(&empty));
            totals.get_mut(&ty).expect("all types present").add(c);
        }
    }
    Ok(MetricReport {
        per_key: totals
            .into_iter()
            .map(|(ty, c)| (ty.as_str().to_string(), KeyScore::from_counts(c)))
            .collect(),
        micro_accuracy: None,
    })
}

/// Exact term-id set comparison per document, micro-aggregated under
/// [`HPO_KEY`].
pub fn score_hpo(gold: &[HpoGoldRecord], pred: &[HpoExtraction]) -> Result<MetricReport> {
    let pairs = align(gold, |g| g.doc_id.as_str(), pred, |p| p.key.as_str())?;
    let mut total = ConfusionCounts::default();
    for (g, p) in pairs {
        let predicted: BTreeSet<TermId> = p.terms();
        total.add(ConfusionCounts::from_sets(&g.hpo_ids, &predicted));
    }
    Ok(MetricReport {
        per_key: [(HPO_KEY.to_string(), KeyScore::from_counts(total))].into(),
        micro_accuracy: None,
    })
}

fn check_labels<'a>(doc_id: &str, labels: impl IntoIterator<Item = &'a String>) -> Result<()> {
    for l in labels {
        if !is_known_label(l) {
            return Err(Error::domain(format!("unknown label `{l}` in `{doc_id}`")));
        }
    }
    Ok(())
}

/// Per-label scores, a [`MACRO_KEY`] row averaging them, and per-cell
/// micro accuracy over `n_docs × |universe|`.
pub fn score_multilabel(gold: &[MultiLabelRecord], pred: &[MultiLabelResult]) -> Result<MetricReport> {
    let pairs = align(gold, |g| g.doc_id.as_str(), pred, |p| p.doc_id.as_str())?;
    let mut per_label: BTreeMap<&str, ConfusionCounts> =
        LABEL_UNIVERSE.iter().map(|l| (*l, Default::default())).collect();
    let mut correct_cells = 0u64;
    for (g, p) in &pairs {
        check_labels(&g.doc_id, &g.labels)?;
        check_labels(&p.doc_id, &p.labels)?;
        for label in &LABEL_UNIVERSE {
            let in_gold = g.labels.contains(*label);
            let in_pred = p.labels.contains(*label);
            let c = per_label.get_mut(label).expect("universe label");
            match (in_gold, in_pred) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (true, false) => c.fn_ += 1,
                (false, false) => {}
            }
            if in_gold == in_pred {
                correct_cells += 1;
            }
        }
    }
    let mut per_key: BTreeMap<String, KeyScore> = per_label
        .iter()
        .map(|(l, c)| (l.to_string(), KeyScore::from_counts(*c)))
        .collect();
    let n = per_key.len() as f64;
    let mut summed = ConfusionCounts::default();
    let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
    for s in per_key.values() {
        summed.add(s.counts);
        p += s.precision;
        r += s.recall;
        f += s.f1;
    }
    per_key.insert(
        MACRO_KEY.to_string(),
        KeyScore {
            counts: summed,
            precision: p / n,
            recall: r / n,
            f1: f / n,
        },
    );
    let cells = pairs.len() as u64 * LABEL_UNIVERSE.len() as u64;
    Ok(MetricReport {
        per_key,
        micro_accuracy: (cells > 0).then(|| correct_cells as f64 / cells as f64),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            _ => Err(Error::domain(format!("unknown report format `{s}`"))),
        }
    }
}

/// A scored run, labelled for the report table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedReport {
    pub model: String,
    pub report: MetricReport,
}

const COLUMNS: [&str; 9] = [
    "model",
    "key",
    "precision",
    "recall",
    "f1",
    "tp",
    "fp",
    "fn",
    "micro_accuracy",
];

fn rows(reports: &[NamedReport]) -> Vec<[String; 9]> {
    let mut out = Vec::new();
    for r in reports {
        let acc = r.report.micro_accuracy.map(|a| format!("{a:.3}")).unwrap_or_default();
        for (key, s) in &r.report.per_key {
            out.push([
                r.model.clone(),
                key.clone(),
                format!("{:.3}", s.precision),
                format!("{:.3}", s.recall),
                format!("{:.3}", s.f1),
                s.counts.tp.to_string(),
                s.counts.fp.to_string(),
                s.counts.fn_.to_string(),
                acc.clone(),
            ]);
        }
    }
    out.sort_by(|a, b| (&a[0], &a[1]).cmp(&(&b[0], &b[1])));
    out
}

/// Table of every (model, key) row, sorted, metrics to three decimals.
pub fn render_report(reports: &[NamedReport], format: ReportFormat) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::domain("no reports to render"));
    }
    let rows = rows(reports);
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(COLUMNS)?;
            for row in &rows {
                w.write_record(row)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::domain(e.to_string()))?;
            Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
        }
        ReportFormat::Markdown => {
            let mut out = format!("| {} |\n|{}\n", COLUMNS.join(" | "), "---|".repeat(COLUMNS.len()));
            for row in &rows {
                out.push_str(&format!("| {} |\n", row.join(" | ")));
            }
            Ok(out)
        }
    }
}

pub fn render_report_json(reports: &[NamedReport]) -> Result<String> {
    Ok(serde_json::to_string_pretty(reports)? + "\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Document, SpanAnnotation};

    fn span_doc(id: &str, surfaces: &[&str]) -> SpanDocument {
        let text = surfaces.join(" ");
        let mut annotations = Vec::new();
        let mut at = 0;
        for s in surfaces {
            let n = s.chars().count();
            annotations.push(SpanAnnotation {
                start: at,
                end: at + n,
                surface: s.to_string(),
                entity_type: EntityType::Chemical,
                concept_id: None,
            });
            at += n + 1;
        }
        SpanDocument {
            document: Document {
                doc_id: id.into(),
                text,
            },
            annotations,
        }
    }

    fn mentions(id: &str, surfaces: &[&str]) -> NerPrediction {
        NerPrediction::Mentions(NerResult {
            doc_id: id.into(),
            mentions: surfaces
                .iter()
                .filter_map(|s| Mention::new(s, EntityType::Chemical))
                .collect(),
        })
    }

    #[test]
    fn two_of_three() {
        let r = score_ner(
            &[span_doc("d", &["a", "b", "c"])],
            &[mentions("d", &["A", "b", "d"])],
            MatchPolicy::default(),
        )
        .unwrap();
        let s = r.get("Chemical").unwrap();
        assert_eq!(s.counts, ConfusionCounts { tp: 2, fp: 1, fn_: 1 });
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-12);
        // no disease annotations anywhere
        assert_eq!(r.get("Disease").unwrap().f1, 1.0);
    }

    #[test]
    fn empty_prediction_scores_zero() {
        let r = score_ner(&[span_doc("d", &["a"])], &[mentions("d", &[])], MatchPolicy::default()).unwrap();
        let m = r.get("Chemical").unwrap().metrics();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn exact_span_needs_spans() {
        let gold = [span_doc("d", &["a"])];
        assert!(score_ner(&gold, &[mentions("d", &["a"])], MatchPolicy::ExactSpan).is_err());
        let r = score_ner(&gold, &[gold[0].clone().into()], MatchPolicy::ExactSpan).unwrap();
        assert_eq!(r.get("Chemical").unwrap().f1, 1.0);
    }

    #[test]
    fn coverage_mismatch_names_ids() {
        let err = score_ner(
            &[span_doc("x", &["a"])],
            &[mentions("y", &["a"])],
            MatchPolicy::default(),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("x") && msg.contains("y"), "{msg}");
    }

    #[test]
    fn hpo_partial_recall() {
        let t = |s: &str| s.parse::<TermId>().unwrap();
        let gold = HpoGoldRecord {
            doc_id: "p".into(),
            text: String::new(),
            hpo_ids: [t("HP:0011172"), t("HP:0002373")].into(),
        };
        let mut pred = HpoExtraction::new("p");
        pred.assert_term(
            t("HP:0011172"),
            crate::extraction::Evidence {
                confidence: 1.0,
                reasoning: String::new(),
            },
        );
        let s = score_hpo(&[gold], &[pred]).unwrap().per_key[HPO_KEY].clone();
        assert_eq!((s.precision, s.recall), (1.0, 0.5));
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn three_wrong_cells_of_thirty() {
        let rec = |id: &str, labels: &[&str]| MultiLabelRecord {
            doc_id: id.into(),
            text: String::new(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
        };
        let res = |id: &str, labels: &[&str]| MultiLabelResult {
            doc_id: id.into(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
        };
        let gold = [rec("a", &["Obesity", "Depression"]), rec("b", &["None"])];
        let pred = [res("a", &["Obesity"]), res("b", &["Depression", "Obesity"])];
        // wrong cells: a/Depression, b/Depression, b/Obesity, b/None
        let r = score_multilabel(&gold, &pred).unwrap();
        assert!((r.micro_accuracy.unwrap() - 26.0 / 30.0).abs() < 1e-12);
        let pred = [res("a", &["Obesity"]), res("b", &["None", "Obesity", "Depression"])];
        let r = score_multilabel(&gold, &pred).unwrap();
        assert!((r.micro_accuracy.unwrap() - 27.0 / 30.0).abs() < 1e-12);
        assert!(score_multilabel(&gold, &[res("a", &["Bogus"]), res("b", &[])]).is_err());
    }

    #[test]
    fn render_rounds_and_sorts() {
        let counts = ConfusionCounts { tp: 2, fp: 1, fn_: 1 };
        let report = MetricReport {
            per_key: [
                ("Disease".to_string(), KeyScore::from_counts(counts)),
                ("Chemical".to_string(), KeyScore::from_counts(counts)),
            ]
            .into(),
            micro_accuracy: None,
        };
        let reports = [
            NamedReport {
                model: "zeta".into(),
                report: report.clone(),
            },
            NamedReport {
                model: "alpha".into(),
                report,
            },
        ];
        let csv = render_report(&reports, ReportFormat::Csv).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[1], "alpha,Chemical,0.667,0.667,0.667,2,1,1,");
        assert!(lines[4].starts_with("zeta,Disease"));
        assert_eq!(csv, render_report(&reports, ReportFormat::Csv).unwrap());
        let md = render_report(&reports, ReportFormat::Markdown).unwrap();
        assert_eq!(md.lines().count(), 6);
        assert!(render_report(&[], ReportFormat::Csv).is_err());
    }
}
