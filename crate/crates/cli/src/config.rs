//! TOML run configuration. Every section is optional; flags override values
//! read from the file.

use std::path::{Path, PathBuf};

use phenokg::evaluation::MatchPolicy;
use phenokg::extraction::{FewShotMode, MAX_GLEAN_ITERATIONS};
use phenokg::llm::BackendConfig;
use phenokg::retrieval::EmbedderConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSettings {
    pub policy: FewShotMode,
    pub k: usize,
    pub glean: u32,
    pub match_policy: MatchPolicy,
    pub min_confidence: f64,
    pub threshold: u8,
    pub high_confidence: f64,
    pub min_assertions: Option<usize>,
}

impl Default for TaskSettings {
    fn default() -> Self {
        TaskSettings {
            policy: FewShotMode::ZeroShot,
            k: 5,
            glean: 1,
            match_policy: MatchPolicy::NormalizedMentionSet,
            min_confidence: 0.0,
            threshold: phenokg::discovery::DEFAULT_THRESHOLD,
            high_confidence: phenokg::discovery::DEFAULT_HIGH_CONFIDENCE,
            min_assertions: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub ontology_path: Option<PathBuf>,
    pub backend: BackendConfig,
    pub embedder: EmbedderConfig,
    pub task: TaskSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 13,
            ontology_path: None,
            backend: BackendConfig::default(),
            embedder: EmbedderConfig::default(),
            task: TaskSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| phenokg::Error::Config(vec![format!("{}: {e}", path.display())]))?;
        Ok(cfg)
    }

    /// Every problem with the settings used by a command. `needs_backend`
    /// adds backend checks; `recording` skips the cassette-exists check since
    /// the cassette is an output then.
    pub fn problems(&self, needs_backend: bool, recording: bool) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(p) = &self.ontology_path {
            if !p.exists() {
                out.push(format!("ontology_path {} does not exist", p.display()));
            }
        }
        if needs_backend {
            out.extend(
                self.backend
                    .problems()
                    .into_iter()
                    .filter(|p| !(recording && p.contains("cassette"))),
            );
            if !recording && self.backend.kind == "replay" {
                if let Some(c) = &self.backend.cassette {
                    if !c.exists() {
                        out.push(format!("backend.cassette {} does not exist", c.display()));
                    }
                }
            }
        }
        let t = &self.task;
        if t.k == 0 {
            out.push("task.k must be at least 1".into());
        }
        if t.glean > MAX_GLEAN_ITERATIONS {
            out.push(format!("task.glean must be at most {MAX_GLEAN_ITERATIONS}"));
        }
        if !(0.0..=1.0).contains(&t.min_confidence) {
            out.push(format!("task.min_confidence {} outside [0, 1]", t.min_confidence));
        }
        if t.threshold > phenokg::discovery::MAX_SCORE {
            out.push(format!("task.threshold {} outside 0..=9", t.threshold));
        }
        if !(0.0..=1.0).contains(&t.high_confidence) {
            out.push(format!("task.high_confidence {} outside [0, 1]", t.high_confidence));
        }
        if self.embedder.dim == 0 {
            out.push("embedder.dim must be positive".into());
        }
        out
    }

    pub fn validate(&self, needs_backend: bool, recording: bool) -> phenokg::Result<()> {
        let problems = self.problems(needs_backend, recording);
        if problems.is_empty() {
            Ok(())
        } else {
            Err(phenokg::Error::Config(problems))
        }
    }

    /// Snapshot for the manifest with secrets removed.
    pub fn redacted(&self) -> RunConfig {
        let mut c = self.clone();
        if c.backend.api_key.is_some() {
            c.backend.api_key = Some("<redacted>".into());
        }
        if c.embedder.api_key.is_some() {
            c.embedder.api_key = Some("<redacted>".into());
        }
        c
    }
}
