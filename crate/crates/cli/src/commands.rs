use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use anyhow::Context;
use phenokg::cohortstats::{compare_to_ontology, heatmap_csv, load_grouping, phenotype_frequency};
use phenokg::corpus::{
    load_hpo_gold, load_multilabel_gold, load_span_corpus, split_train_test, synthesize_fixture,
    synthesize_multilabel_fixture, synthesize_span_fixture, to_pubtator, Document,
};
use phenokg::discovery::{run_funnel, FunnelConfig, ScoringRubric};
use phenokg::evaluation::{
    render_report, render_report_json, score_hpo, score_multilabel, score_ner, MatchPolicy, NamedReport, NerPrediction,
    ReportFormat,
};
use phenokg::extraction::{
    AuditLog, ExamplePool, Extraction, Extractor, FewShotExample, FewShotMode, FewShotPolicy, GleanConfig,
    PromptTemplates, SelectorRegistry, TaskContext, TaskRegistry,
};
use phenokg::fixtures;
use phenokg::jsonl::{read_jsonl, to_jsonl};
use phenokg::kg::{CohortMode, GraphRecord, KnowledgeGraph};
use phenokg::llm::{BackendRegistry, ChatBackend, LlmClient, RecordingBackend};
use phenokg::ontology::{load_annotations, load_ontology, Ontology, TermId};
use phenokg::retrieval::EmbedderRegistry;
use serde_json::json;

use crate::config::RunConfig;
use crate::run::RunDir;
use crate::*;

/// Machine-readable error line for stderr.
pub fn error_json(err: &anyhow::Error) -> String {
    let core = err.chain().find_map(|e| e.downcast_ref::<phenokg::Error>());
    let kind = core.map(|e| e.kind()).unwrap_or("error");
    let mut body = json!({ "kind": kind, "message": format!("{err:#}") });
    if let Some(phenokg::Error::Config(problems)) = core {
        body["problems"] = json!(problems);
    }
    json!({ "error": body }).to_string()
}

struct Ctx {
    config: RunConfig,
    ontology_flag: Option<PathBuf>,
    out: PathBuf,
    argv: Vec<String>,
}

impl Ctx {
    fn ontology_path(&self) -> Option<PathBuf> {
        self.ontology_flag.clone().or_else(|| self.config.ontology_path.clone())
    }

    fn ontology(&self, run: &mut RunDir) -> anyhow::Result<Ontology> {
        let path = self.ontology_path().ok_or_else(|| {
            phenokg::Error::Config(vec![
                "an ontology is required: pass --ontology or set ontology_path".into()
            ])
        })?;
        run.input(&path)?;
        Ok(load_ontology(&path)?)
    }

    fn run_dir(&self, command: &str) -> anyhow::Result<RunDir> {
        RunDir::create(&self.out, command)
    }

    fn finish(&self, run: RunDir) -> anyhow::Result<()> {
        let manifest = run.finish(&self.config, &self.argv)?;
        log::info!("wrote {}", manifest.display());
        Ok(())
    }
}

pub fn dispatch(cli: Cli, argv: &[String]) -> anyhow::Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.backend = config.backend.with_env_overrides();
    let mut ctx = Ctx {
        config,
        ontology_flag: cli.ontology.clone(),
        out: cli.out.clone(),
        argv: argv.to_vec(),
    };
    match cli.command {
        Command::Ontology {
            cmd: OntologyCmd::Stats,
        } => ontology_stats(&mut ctx),
        Command::Corpus {
            cmd: CorpusCmd::Synth(args),
        } => synth(&mut ctx, &args),
        Command::Extract(args) => extract(&mut ctx, &args, false),
        Command::Eval(args) => eval(&mut ctx, &args),
        Command::Kg {
            cmd: KgCmd::Build(args),
        } => kg_build(&mut ctx, &args),
        Command::Kg {
            cmd: KgCmd::Query(args),
        } => kg_query(&mut ctx, &args),
        Command::CohortFreq(args) => cohort_freq(&mut ctx, &args),
        Command::Discover(args) => discover(&mut ctx, &args, false),
        Command::Cassette {
            cmd: CassetteCmd::Record { cmd },
        } => match cmd {
            RecordCmd::Extract(args) => extract(&mut ctx, &args, true),
            RecordCmd::Discover(args) => discover(&mut ctx, &args, true),
        },
    }
}

fn ontology_stats(ctx: &mut Ctx) -> anyhow::Result<()> {
    let mut run = ctx.run_dir("ontology stats")?;
    ctx.config.validate(false, false)?;
    let o = ctx.ontology(&mut run)?;
    let roots: Vec<&str> = o
        .terms()
        .iter()
        .filter(|t| t.parents.is_empty())
        .map(|t| t.id.as_str())
        .collect();
    let edges: usize = o.terms().iter().map(|t| t.parents.len()).sum();
    let synonyms: usize = o.terms().iter().map(|t| t.synonyms.len()).sum();
    let depth = o.terms().iter().map(|t| o.ancestors(&t.id).len()).max().unwrap_or(0);
    let stats = json!({
        "terms": o.term_count(),
        "is_a_edges": edges,
        "synonyms": synonyms,
        "roots": roots,
        "max_ancestors": depth,
    });
    let text = serde_json::to_string_pretty(&stats)? + "\n";
    print!("{text}");
    run.write("stats.json", &text)?;
    ctx.finish(run)
}

fn synth(ctx: &mut Ctx, args: &SynthArgs) -> anyhow::Result<()> {
    let mut run = ctx.run_dir("corpus synth")?;
    ctx.config.validate(false, false)?;
    let seed = ctx.config.seed;
    match args.kind {
        SynthKind::Hpo => {
            // Bundled ontology when none is configured, so a corpus can be
            // produced without any external files.
            let o = match ctx.ontology_path() {
                Some(_) => ctx.ontology(&mut run)?,
                None => fixtures::dravet_ontology(),
            };
            let docs = synthesize_fixture(seed, &o, args.n, args.labels_per_doc)?;
            run.write("ontology.obo", &o.to_obo())?;
            run.write("corpus.jsonl", &to_jsonl(&docs)?)?;
            if let Some(n) = args.test_size {
                let (train, test) = split_train_test(&docs, n, seed)?;
                run.write("train.jsonl", &to_jsonl(&train)?)?;
                run.write("test.jsonl", &to_jsonl(&test)?)?;
            }
        }
        SynthKind::Ner => {
            let docs = synthesize_span_fixture(seed, args.n, args.pairs_per_doc)?;
            run.write("corpus.pubtator", &to_pubtator(&docs))?;
            if let Some(n) = args.test_size {
                let (train, test) = split_train_test(&docs, n, seed)?;
                run.write("train.pubtator", &to_pubtator(&train))?;
                run.write("test.pubtator", &to_pubtator(&test))?;
            }
        }
        SynthKind::Multilabel => {
            let docs = synthesize_multilabel_fixture(seed, args.n)?;
            run.write("corpus.jsonl", &to_jsonl(&docs)?)?;
            if let Some(n) = args.test_size {
                let (train, test) = split_train_test(&docs, n, seed)?;
                run.write("train.jsonl", &to_jsonl(&train)?)?;
                run.write("test.jsonl", &to_jsonl(&test)?)?;
            }
        }
        SynthKind::DravetKg => {
            let o = fixtures::dravet_ontology();
            let f = fixtures::dravet_fixture(&o)?;
            run.write("ontology.obo", fixtures::DRAVET_OBO)?;
            run.write("annotations.tsv", fixtures::DRAVET_ANNOTATIONS)?;
            run.write("grouping.tsv", fixtures::DRAVET_GROUPING)?;
            run.write("ingest.jsonl", &f.graph.to_jsonl()?)?;
            run.write(
                "allowed_terms.tsv",
                &allowed_terms_tsv(&o, &fixtures::dravet_allowed_terms()),
            )?;
            run.write("context.txt", &format!("{}\n", fixtures::DRAVET_CONTEXT))?;
            run.write("icd.txt", &format!("{}\n", fixtures::DRAVET_ICD.join(",")))?;
        }
        SynthKind::BpanKg => {
            let o = fixtures::dravet_ontology();
            let f = fixtures::bpan_fixture(seed)?;
            run.write("ontology.obo", fixtures::DRAVET_OBO)?;
            run.write("ingest.jsonl", &f.graph.to_jsonl()?)?;
            run.write(
                "rubric.json",
                &(serde_json::to_string_pretty(&fixtures::bpan_rubric())? + "\n"),
            )?;
            run.write(
                "allowed_terms.tsv",
                &allowed_terms_tsv(&o, &fixtures::bpan_allowed_terms(&o)),
            )?;
            run.write("icd.txt", &format!("{}\n", fixtures::BPAN_GENERIC_ICD.join(",")))?;
            let planted: Vec<&str> = f.planted.iter().map(|k| k.as_str()).collect();
            run.write("planted.txt", &(planted.join("\n") + "\n"))?;
        }
    }
    println!("{}", ctx.out.display());
    ctx.finish(run)
}

fn allowed_terms_tsv(o: &Ontology, terms: &BTreeSet<TermId>) -> String {
    terms
        .iter()
        .map(|t| format!("{t}\t{}\n", o.get(t).map(|x| x.name.as_str()).unwrap_or_default()))
        .collect()
}

fn read_allowed_terms(path: &Path) -> anyhow::Result<BTreeSet<TermId>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = BTreeSet::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let id = line.split_whitespace().next().unwrap_or_default();
        out.insert(TermId::new(id)?);
    }
    if out.is_empty() {
        return Err(phenokg::Error::Config(vec![format!("{} lists no terms", path.display())]).into());
    }
    Ok(out)
}

/// Documents with their gold results, in file order.
fn load_corpus(task: TaskArg, path: &Path, ontology: Option<&Ontology>) -> anyhow::Result<Vec<(Document, Extraction)>> {
    Ok(match task {
        TaskArg::Ner => load_span_corpus(path)?
            .iter()
            .map(|d| (d.document.clone(), Extraction::from_span_gold(d)))
            .collect(),
        TaskArg::Hpo => load_hpo_gold(path, ontology)?
            .iter()
            .map(|r| (r.document(), Extraction::from_hpo_gold(r)))
            .collect(),
        TaskArg::Multilabel => load_multilabel_gold(path)?
            .iter()
            .map(|r| (r.document(), Extraction::from_multilabel_gold(r)))
            .collect(),
    })
}

fn task_name(task: TaskArg) -> &'static str {
    match task {
        TaskArg::Ner => "ner",
        TaskArg::Hpo => "hpo",
        TaskArg::Multilabel => "multilabel",
    }
}

fn apply_backend_flags(config: &mut RunConfig, flags: &BackendFlags) {
    let b = &mut config.backend;
    if let Some(kind) = &flags.backend {
        b.kind = kind.clone();
    }
    if let Some(c) = &flags.cassette {
        b.cassette = Some(c.clone());
    }
    if let Some(url) = &flags.endpoint {
        b.endpoint_url = Some(url.clone());
    }
    if let Some(m) = &flags.model {
        b.model_name = m.clone();
    }
    if let Some(n) = flags.max_in_flight {
        b.max_in_flight = n;
    }
}

/// Client for the configured backend. When recording, the backend is
/// wrapped so every exchange is captured.
fn client(config: &RunConfig, recording: bool) -> anyhow::Result<(LlmClient, Option<Arc<RecordingBackend>>)> {
    let registry = BackendRegistry::default();
    if !recording {
        return Ok((LlmClient::from_config(&registry, &config.backend)?, None));
    }
    if config.backend.kind == "replay" {
        return Err(phenokg::Error::Config(vec!["cassette record needs a live backend, not `replay`".into()]).into());
    }
    let mut live = config.backend.clone();
    live.cassette = None;
    let inner: Arc<dyn ChatBackend> = Arc::from(registry.build(&live)?);
    let rec = Arc::new(RecordingBackend::new(inner));
    Ok((LlmClient::new(rec.clone(), config.backend.max_in_flight), Some(rec)))
}

fn save_recording(ctx: &Ctx, run: &mut RunDir, rec: Option<Arc<RecordingBackend>>) -> anyhow::Result<()> {
    if let Some(rec) = rec {
        let cassette = rec.cassette();
        match &ctx.config.backend.cassette {
            Some(path) => {
                cassette.save(path)?;
                run.external(path)?;
            }
            None => {
                cassette.save(run.path("cassette.jsonl"))?;
                run.written("cassette.jsonl")?;
            }
        }
        eprintln!("recorded {} exchanges", cassette.len());
    }
    Ok(())
}

fn extract(ctx: &mut Ctx, args: &ExtractArgs, recording: bool) -> anyhow::Result<()> {
    let mut run = ctx.run_dir(if recording {
        "cassette record extract"
    } else {
        "extract"
    })?;
    apply_backend_flags(&mut ctx.config, &args.backend);
    if let Some(p) = &args.policy {
        ctx.config.task.policy = FewShotMode::from_str(p)?;
    }
    if let Some(k) = args.k {
        ctx.config.task.k = k;
    }
    if let Some(g) = args.glean {
        ctx.config.task.glean = g;
    }
    ctx.config.validate(true, recording)?;
    let settings = ctx.config.task.clone();
    if settings.policy != FewShotMode::ZeroShot && args.pool.is_none() {
        return Err(phenokg::Error::Config(vec![format!("policy {} needs --pool", settings.policy)]).into());
    }

    let ontology = match args.task {
        TaskArg::Hpo => Some(Arc::new(ctx.ontology(&mut run)?)),
        _ => None,
    };
    run.input(&args.input)?;
    let corpus = load_corpus(args.task, &args.input, ontology.as_deref())?;

    let mut task_ctx = TaskContext {
        ontology: ontology.clone(),
        templates: PromptTemplates::default(),
        ..Default::default()
    };
    if let Some(p) = &args.allowed_terms {
        run.input(p)?;
        task_ctx.allowed_terms = Some(read_allowed_terms(p)?);
    }
    if let Some(p) = &args.disease_context {
        run.input(p)?;
        task_ctx.disease_context = Some(
            std::fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))?
                .trim()
                .to_string(),
        );
    }
    let task = TaskRegistry::default().build(task_name(args.task), &task_ctx)?;

    let pool = match &args.pool {
        Some(p) => {
            run.input(p)?;
            load_corpus(args.task, p, ontology.as_deref())?
                .into_iter()
                .map(|(document, gold)| FewShotExample { document, gold })
                .collect()
        }
        None => Vec::new(),
    };
    let pool = Arc::new(ExamplePool::new(pool)?);
    let embedder = Arc::from(EmbedderRegistry::default().build(&ctx.config.embedder)?);
    let policy = FewShotPolicy {
        mode: settings.policy,
        k: settings.k,
    };
    let selector = SelectorRegistry::default().build(&policy, pool, embedder)?;

    let (client, rec) = client(&ctx.config, recording)?;
    let extractor =
        Extractor::new(task.as_ref(), selector.as_ref(), &client).with_glean(GleanConfig::new(settings.glean)?);
    let docs: Vec<Document> = corpus.iter().map(|(d, _)| d.clone()).collect();
    let mut audit = AuditLog::default();
    let results = extractor.extract_many(&docs, &mut audit);
    let mut predictions = Vec::with_capacity(results.len());
    let mut failed = 0;
    for ((doc, gold), result) in corpus.iter().zip(results) {
        match result {
            Ok(e) => predictions.push(e),
            Err(err) => {
                // A failed document scores as an empty prediction.
                failed += 1;
                audit.record(&doc.doc_id, None, "extraction_failed", err.to_string());
                predictions.push(gold.empty_like());
            }
        }
    }
    run.write("predictions.jsonl", &to_jsonl(&predictions)?)?;
    audit.save(run.path("audit.jsonl"))?;
    run.written("audit.jsonl")?;
    save_recording(ctx, &mut run, rec)?;
    eprintln!(
        "extracted {} documents ({} failed, {} audit entries)",
        predictions.len(),
        failed,
        audit.len()
    );
    ctx.finish(run)
}

fn eval(ctx: &mut Ctx, args: &EvalArgs) -> anyhow::Result<()> {
    let mut run = ctx.run_dir("eval")?;
    if let Some(p) = &args.match_policy {
        ctx.config.task.match_policy = MatchPolicy::from_str(p)?;
    }
    ctx.config.validate(false, false)?;
    run.input(&args.gold)?;
    run.input(&args.pred)?;
    let predictions: Vec<Extraction> = read_jsonl(&args.pred)?;
    let wrong = predictions.iter().filter(|p| task_of(p) != args.task).count();
    if wrong > 0 {
        return Err(
            phenokg::Error::domain(format!("{wrong} predictions are not {} results", task_name(args.task))).into(),
        );
    }
    let report = match args.task {
        TaskArg::Ner => {
            let gold = load_span_corpus(&args.gold)?;
            let pred: Vec<NerPrediction> = predictions
                .into_iter()
                .filter_map(|p| match p {
                    Extraction::Ner(r) => Some(NerPrediction::Mentions(r)),
                    _ => None,
                })
                .collect();
            score_ner(&gold, &pred, ctx.config.task.match_policy)?
        }
        TaskArg::Hpo => {
            let o = ctx.ontology(&mut run)?;
            let gold = load_hpo_gold(&args.gold, Some(&o))?;
            let pred: Vec<_> = predictions
                .into_iter()
                .filter_map(|p| match p {
                    Extraction::Hpo(r) => Some(r),
                    _ => None,
                })
                .collect();
            score_hpo(&gold, &pred)?
        }
        TaskArg::Multilabel => {
            let gold = load_multilabel_gold(&args.gold)?;
            let pred: Vec<_> = predictions
                .into_iter()
                .filter_map(|p| match p {
                    Extraction::MultiLabel(r) => Some(r),
                    _ => None,
                })
                .collect();
            score_multilabel(&gold, &pred)?
        }
    };
    let named = [NamedReport {
        model: args
            .model
            .clone()
            .unwrap_or_else(|| ctx.config.backend.model_name.clone()),
        report,
    }];
    let md = render_report(&named, ReportFormat::Markdown)?;
    run.write("report.csv", &render_report(&named, ReportFormat::Csv)?)?;
    run.write("report.md", &md)?;
    run.write("report.json", &render_report_json(&named)?)?;
    print!("{md}");
    ctx.finish(run)
}

fn task_of(e: &Extraction) -> TaskArg {
    match e {
        Extraction::Ner(_) => TaskArg::Ner,
        Extraction::Hpo(_) => TaskArg::Hpo,
        Extraction::MultiLabel(_) => TaskArg::Multilabel,
    }
}

fn kg_build(ctx: &mut Ctx, args: &KgBuildArgs) -> anyhow::Result<()> {
    let mut run = ctx.run_dir("kg build")?;
    ctx.config.validate(false, false)?;
    let o = ctx.ontology(&mut run)?;
    run.input(&args.input)?;
    let records: Vec<GraphRecord> = read_jsonl(&args.input)?;
    let graph = KnowledgeGraph::build(records, &o)?;
    graph.save(run.path("graph.jsonl"))?;
    run.written("graph.jsonl")?;
    let stats = json!({
        "patients": graph.patient_count(),
        "nodes": graph.node_count(),
        "edges": graph.edge_count(),
        "assertions": graph.assertion_count(),
    });
    println!("{stats}");
    ctx.finish(run)
}

fn mode(m: ModeArg) -> CohortMode {
    match m {
        ModeArg::Any => CohortMode::Any,
        ModeArg::All => CohortMode::All,
    }
}

fn load_graph(ctx: &Ctx, run: &mut RunDir, path: &Path) -> anyhow::Result<(Ontology, KnowledgeGraph)> {
    let o = ctx.ontology(run)?;
    run.input(path)?;
    let g = KnowledgeGraph::load(path, &o)?;
    Ok((o, g))
}

fn kg_query(ctx: &mut Ctx, args: &KgQueryArgs) -> anyhow::Result<()> {
    let mut run = ctx.run_dir("kg query")?;
    ctx.config.validate(false, false)?;
    if args.icd.is_empty() && args.keyword.is_none() && args.icd_prefix.is_none() {
        return Err(phenokg::Error::Config(vec!["give --icd, --keyword or --icd-prefix".into()]).into());
    }
    let (_, graph) = load_graph(ctx, &mut run, &args.graph)?;
    let mut result = serde_json::Map::new();
    if !args.icd.is_empty() {
        let codes: BTreeSet<String> = args.icd.iter().cloned().collect();
        let cohort = graph.cohort_by_icd(&codes, mode(args.mode))?;
        result.insert("cohort".into(), json!(cohort));
    }
    if let Some(k) = &args.keyword {
        let hits: Vec<_> = graph
            .keyword_search(k)?
            .into_iter()
            .map(|(p, note)| json!({ "patient": p, "note_id": note }))
            .collect();
        result.insert("keyword_hits".into(), json!(hits));
    }
    if let Some(p) = &args.icd_prefix {
        result.insert("codes".into(), json!(graph.expand_icd_prefix(p)?));
    }
    let text = serde_json::to_string_pretty(&result)? + "\n";
    run.write("query.json", &text)?;
    print!("{text}");
    ctx.finish(run)
}

fn cohort_freq(ctx: &mut Ctx, args: &CohortFreqArgs) -> anyhow::Result<()> {
    let mut run = ctx.run_dir("cohort-freq")?;
    if let Some(c) = args.min_confidence {
        ctx.config.task.min_confidence = c;
    }
    ctx.config.validate(false, false)?;
    let (o, graph) = load_graph(ctx, &mut run, &args.graph)?;
    run.input(&args.annotations)?;
    let annotations = load_annotations(&args.annotations, &o)?;
    let grouping = match &args.grouping {
        Some(p) => {
            run.input(p)?;
            load_grouping(p)?
        }
        None => Default::default(),
    };
    let codes: BTreeSet<String> = args.icd.iter().cloned().collect();
    let cohort = graph.cohort_by_icd(&codes, mode(args.mode))?;
    let terms: BTreeSet<TermId> = annotations.iter().map(|a| a.phenotype.clone()).collect();
    let freqs = phenotype_frequency(&graph, &cohort, &terms, &o, ctx.config.task.min_confidence)?;

    let mut w = String::from("term,name,count,cohort_size,fraction\n");
    for (t, f) in &freqs {
        let name = o.get(t).map(|x| x.name.as_str()).unwrap_or_default();
        let name = if name.contains(',') || name.contains('"') {
            format!("\"{}\"", name.replace('"', "\"\""))
        } else {
            name.to_string()
        };
        w.push_str(&format!(
            "{t},{name},{},{},{:.3}\n",
            f.count,
            f.fraction.den,
            f.fraction.value()
        ));
    }
    run.write("frequencies.csv", &w)?;
    let comparisons = compare_to_ontology(&freqs, &annotations)?;
    run.write(
        "comparisons.json",
        &(serde_json::to_string_pretty(&comparisons)? + "\n"),
    )?;
    run.write("heatmap.csv", &heatmap_csv(&comparisons, &grouping, &o)?)?;
    eprintln!(
        "cohort of {} patients, {} annotated terms",
        cohort.len(),
        comparisons.len()
    );
    ctx.finish(run)
}

fn discover(ctx: &mut Ctx, args: &DiscoverArgs, recording: bool) -> anyhow::Result<()> {
    let mut run = ctx.run_dir(if recording {
        "cassette record discover"
    } else {
        "discover"
    })?;
    apply_backend_flags(&mut ctx.config, &args.backend);
    if let Some(t) = args.threshold {
        ctx.config.task.threshold = t;
    }
    if let Some(g) = args.glean {
        ctx.config.task.glean = g;
    }
    if args.min_assertions.is_some() {
        ctx.config.task.min_assertions = args.min_assertions;
    }
    ctx.config.validate(true, recording)?;
    let (o, graph) = load_graph(ctx, &mut run, &args.graph)?;
    run.input(&args.rubric)?;
    let rubric = ScoringRubric::load(&args.rubric)?;
    run.input(&args.allowed_terms)?;
    let allowed = read_allowed_terms(&args.allowed_terms)?;
    let t = &ctx.config.task;
    let config = FunnelConfig {
        keywords: args.keywords.iter().cloned().collect(),
        generic_icd: args.icd.iter().cloned().collect(),
        threshold: t.threshold,
        high_confidence: t.high_confidence,
        min_assertions: t.min_assertions,
        glean: GleanConfig::new(t.glean)?,
    };
    let (client, rec) = client(&ctx.config, recording)?;
    let mut audit = AuditLog::default();
    let report = run_funnel(&graph, Arc::new(o), &rubric, &config, &allowed, &client, &mut audit)?;
    run.write("funnel.json", &report.to_json()?)?;
    let md = report.to_markdown();
    run.write("funnel.md", &md)?;
    audit.save(run.path("audit.jsonl"))?;
    run.written("audit.jsonl")?;
    save_recording(ctx, &mut run, rec)?;
    print!("{md}");
    ctx.finish(run)
}
