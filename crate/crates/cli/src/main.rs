use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;
mod run;

#[derive(Parser, Debug)]
#[command(
    name = "phenokg",
    version,
    about = "Phenotype extraction, patient knowledge graphs and cohort analysis"
)]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory receiving every output and manifest.json.
    #[arg(long, global = true, default_value = "phenokg-run")]
    pub out: PathBuf,
    /// Ontology file (OBO subset); overrides `ontology_path`.
    #[arg(long, global = true)]
    pub ontology: Option<PathBuf>,
    /// Seed for synthetic data; overrides `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Ontology inspection.
    Ontology {
        #[command(subcommand)]
        cmd: OntologyCmd,
    },
    /// Corpus and fixture generation.
    Corpus {
        #[command(subcommand)]
        cmd: CorpusCmd,
    },
    /// Run an extraction task over a corpus.
    Extract(ExtractArgs),
    /// Score predictions against gold.
    Eval(EvalArgs),
    /// Build or query a patient knowledge graph.
    Kg {
        #[command(subcommand)]
        cmd: KgCmd,
    },
    /// Observed phenotype frequencies in a coded cohort vs. expected categories.
    CohortFreq(CohortFreqArgs),
    /// Candidate → score → filter → extract → rank funnel.
    Discover(DiscoverArgs),
    /// Record backend exchanges for later replay.
    Cassette {
        #[command(subcommand)]
        cmd: CassetteCmd,
    },
}

#[derive(Subcommand, Debug)]
pub enum OntologyCmd {
    /// Term counts and structure summary.
    Stats,
}

#[derive(Subcommand, Debug)]
pub enum CorpusCmd {
    /// Write a deterministic synthetic corpus or fixture bundle.
    Synth(SynthArgs),
}

#[derive(Subcommand, Debug)]
pub enum KgCmd {
    /// Build a graph from patient/note (and optional assertion) records.
    Build(KgBuildArgs),
    /// Cohort, keyword or code-prefix queries.
    Query(KgQueryArgs),
}

#[derive(Subcommand, Debug)]
pub enum CassetteCmd {
    /// Run a command against a live backend and save every exchange.
    Record {
        #[command(subcommand)]
        cmd: RecordCmd,
    },
}

#[derive(Subcommand, Debug)]
pub enum RecordCmd {
    Extract(ExtractArgs),
    Discover(DiscoverArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SynthKind {
    Hpo,
    Ner,
    Multilabel,
    DravetKg,
    BpanKg,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub kind: SynthKind,
    /// Number of documents.
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    /// HPO terms per synthetic note.
    #[arg(long, default_value_t = 3)]
    pub labels_per_doc: usize,
    /// Chemical/disease pairs per synthetic abstract.
    #[arg(long, default_value_t = 2)]
    pub pairs_per_doc: usize,
    /// Also write train/test files holding out this many documents.
    #[arg(long)]
    pub test_size: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Ner,
    Hpo,
    Multilabel,
}

#[derive(Args, Debug, Clone)]
pub struct BackendFlags {
    /// Backend kind (`http`, `replay`).
    #[arg(long)]
    pub backend: Option<String>,
    /// Replay cassette (JSON Lines).
    #[arg(long)]
    pub cassette: Option<PathBuf>,
    /// OpenAI-compatible endpoint base URL.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub max_in_flight: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct ExtractArgs {
    #[arg(long, value_enum)]
    pub task: TaskArg,
    /// Documents: PubTator for `ner`, JSON Lines for `hpo` and `multilabel`.
    #[arg(long)]
    pub input: PathBuf,
    /// Annotated few-shot pool in the same format as the input.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    /// zero-shot, static-fewshot or dynamic-fewshot.
    #[arg(long)]
    pub policy: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Gleaning rounds after the first extraction.
    #[arg(long)]
    pub glean: Option<u32>,
    /// HPO allow-list, one `HP:#######` per line (extra columns ignored).
    #[arg(long)]
    pub allowed_terms: Option<PathBuf>,
    /// Plain-text disease description for HPO extraction.
    #[arg(long)]
    pub disease_context: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendFlags,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub task: TaskArg,
    #[arg(long)]
    pub gold: PathBuf,
    /// predictions.jsonl from `extract`.
    #[arg(long)]
    pub pred: PathBuf,
    /// Row label in the report.
    #[arg(long)]
    pub model: Option<String>,
    /// normalized-mention-set, exact-span or concept-id.
    #[arg(long)]
    pub match_policy: Option<String>,
}

#[derive(Args, Debug)]
pub struct KgBuildArgs {
    /// JSON Lines of patient, note and assertion records.
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Any,
    All,
}

#[derive(Args, Debug)]
pub struct KgQueryArgs {
    #[arg(long)]
    pub graph: PathBuf,
    /// Comma-separated ICD-10 codes.
    #[arg(long, value_delimiter = ',')]
    pub icd: Vec<String>,
    #[arg(long, value_enum, default_value = "any")]
    pub mode: ModeArg,
    /// Case-insensitive note search.
    #[arg(long)]
    pub keyword: Option<String>,
    /// List graph codes starting with this prefix.
    #[arg(long)]
    pub icd_prefix: Option<String>,
}

#[derive(Args, Debug)]
pub struct CohortFreqArgs {
    #[arg(long)]
    pub graph: PathBuf,
    /// TSV: disease_id, hpo_id, frequency category.
    #[arg(long)]
    pub annotations: PathBuf,
    /// Comma-separated ICD-10 codes defining the cohort.
    #[arg(long, value_delimiter = ',', required = true)]
    pub icd: Vec<String>,
    #[arg(long, value_enum, default_value = "any")]
    pub mode: ModeArg,
    /// TSV: term_id, group.
    #[arg(long)]
    pub grouping: Option<PathBuf>,
    #[arg(long)]
    pub min_confidence: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct DiscoverArgs {
    #[arg(long)]
    pub graph: PathBuf,
    /// Scoring rubric (JSON).
    #[arg(long)]
    pub rubric: PathBuf,
    /// Comma-separated note keywords.
    #[arg(long, value_delimiter = ',')]
    pub keywords: Vec<String>,
    /// Comma-separated generic ICD-10 codes.
    #[arg(long, value_delimiter = ',')]
    pub icd: Vec<String>,
    /// Minimum likelihood score (0-9).
    #[arg(long)]
    pub threshold: Option<u8>,
    /// HPO allow-list for the extraction stage.
    #[arg(long)]
    pub allowed_terms: PathBuf,
    #[arg(long)]
    pub glean: Option<u32>,
    /// Keep only finalists with at least this many high-confidence phenotypes.
    #[arg(long)]
    pub min_assertions: Option<usize>,
    #[command(flatten)]
    pub backend: BackendFlags,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse();
    match commands::dispatch(cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", commands::error_json(&err));
            ExitCode::FAILURE
        }
    }
}
