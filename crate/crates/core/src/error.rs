use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the toolkit can report. Variants are grouped by the
/// subsystem that raises them; `kind()` gives a stable machine-readable tag.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },

    #[error("ontology validation failed, unresolved parents: {}", orphans.join(", "))]
    DanglingParents { orphans: Vec<String> },

    #[error("invalid term id `{0}` (expected HP:#######)")]
    InvalidTermId(String),

    #[error("unknown term `{0}`")]
    UnknownTerm(String),

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("corpus integrity error in document `{doc_id}`: {message}")]
    CorpusIntegrity { doc_id: String, message: String },

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("backend unavailable after {attempts} attempt(s): {last_status}")]
    BackendUnavailable { attempts: u32, last_status: String },

    #[error("replay cassette has no response for request hash {hash}")]
    ReplayMiss { hash: String },

    #[error("model output is not a parseable JSON object: {reason}")]
    OutputParse { reason: String, raw: String },

    #[error("model output violates schema at `{field}`: {reason}")]
    Schema { field: String, reason: String },

    #[error("round {round}: {source}")]
    Round {
        round: u32,
        #[source]
        source: Box<Error>,
    },

    #[error("scoring failed for patient `{patient}`: {reason}")]
    Scoring { patient: String, reason: String },

    #[error("graph integrity violation `{rule}`: {detail}")]
    GraphIntegrity { rule: &'static str, detail: String },

    #[error("config error(s): {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn schema(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Schema {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_round(self, round: u32) -> Self {
        Error::Round {
            round,
            source: Box::new(self),
        }
    }

    /// Stable tag used in audit logs and machine-readable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::DanglingParents { .. } => "dangling_parents",
            Error::InvalidTermId(_) => "invalid_term_id",
            Error::UnknownTerm(_) => "unknown_term",
            Error::DuplicateId(_) => "duplicate_id",
            Error::Domain(_) => "domain",
            Error::CorpusIntegrity { .. } => "corpus_integrity",
            Error::InvalidRecord(_) => "invalid_record",
            Error::BackendUnavailable { .. } => "backend_unavailable",
            Error::ReplayMiss { .. } => "replay_miss",
            Error::OutputParse { .. } => "output_parse",
            Error::Schema { .. } => "schema",
            Error::Round { source, .. } => source.kind(),
            Error::Scoring { .. } => "scoring",
            Error::GraphIntegrity { .. } => "graph_integrity",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub(crate) fn read_to_string(path: &std::path::Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_string(path: &std::path::Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}
