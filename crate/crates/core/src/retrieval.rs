//! Text embeddings and exact top-k cosine retrieval for dynamic few-shot
//! example selection.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::jsonl::{read_jsonl, write_jsonl};
use crate::llm::{post_json_with_retry, RetryPolicy};

pub const DEFAULT_TOP_K: usize = 5;
pub const HASHED_DIM: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::domain("embedding vector must have dim > 0"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("embedding vector has non-finite entries"));
        }
        Ok(EmbeddingVector(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|v| v * factor).collect())
    }
}

/// Cosine similarity in [-1, 1]; 0 when either vector has zero norm.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    let denom = a.norm() * b.norm();
    if denom == 0.0 {
        0.0
    } else {
        (dot / denom).clamp(-1.0, 1.0)
    }
}

pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>>;
}

/// Offline embedder: case-folded alphanumeric tokens hashed (FNV-1a) into a
/// fixed number of buckets, counted, then L2-normalised.
#[derive(Debug, Clone)]
pub struct HashedBowEmbedder {
    dim: usize,
}

impl Default for HashedBowEmbedder {
    fn default() -> Self {
        HashedBowEmbedder { dim: HASHED_DIM }
    }
}

impl HashedBowEmbedder {
    pub fn with_dim(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::domain("embedding dim must be positive"));
        }
        Ok(HashedBowEmbedder { dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a(token.as_bytes()) % self.dim as u64) as usize
    }

    pub fn embed_one(&self, text: &str) -> EmbeddingVector {
        let mut counts = vec![0.0f64; self.dim];
        for token in tokenize(text) {
            counts[self.bucket(&token)] += 1.0;
        }
        let norm = counts.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            counts.iter_mut().for_each(|v| *v /= norm);
        }
        EmbeddingVector(counts)
    }
}

pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Embedder for HashedBowEmbedder {
    fn name(&self) -> &str {
        "hashed-bow"
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        if texts.is_empty() {
            return Err(Error::domain("embed called with no texts"));
        }
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// OpenAI-compatible `/embeddings` client.
pub struct RemoteEmbedder {
    agent: ureq::Agent,
    url: String,
    api_key: Option<String>,
    model: String,
    retry: RetryPolicy,
}

impl RemoteEmbedder {
    pub fn new(base_url: &str, api_key: Option<String>, model: &str, retry: RetryPolicy, timeout: Duration) -> Self {
        RemoteEmbedder {
            agent: crate::llm::http_agent(timeout),
            url: crate::llm::http_endpoint(base_url, "embeddings"),
            api_key,
            model: model.to_string(),
            retry,
        }
    }
}

impl Embedder for RemoteEmbedder {
    fn name(&self) -> &str {
        "remote"
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        if texts.is_empty() {
            return Err(Error::domain("embed called with no texts"));
        }
        let body = json!({"model": self.model, "input": texts});
        let (value, attempts) =
            post_json_with_retry(&self.agent, &self.url, self.api_key.as_deref(), &body, &self.retry)?;
        let bad = |why: &str| Error::BackendUnavailable {
            attempts,
            last_status: format!("embedding response {why}"),
        };
        let data = value
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| bad("lacks data"))?;
        if data.len() != texts.len() {
            return Err(bad("has the wrong number of vectors"));
        }
        let mut rows: Vec<(u64, EmbeddingVector)> = Vec::with_capacity(data.len());
        for (pos, item) in data.iter().enumerate() {
            let idx = item.get("index").and_then(Value::as_u64).unwrap_or(pos as u64);
            let values = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| bad("lacks embedding"))?
                .iter()
                .map(|v| v.as_f64().ok_or_else(|| bad("has non-numeric values")))
                .collect::<Result<Vec<f64>>>()?;
            rows.push((idx, EmbeddingVector::new(values)?));
        }
        rows.sort_by_key(|(i, _)| *i);
        Ok(rows.into_iter().map(|(_, v)| v).collect())
    }
}

/// Settings for [`EmbedderRegistry::build`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub kind: String,
    pub dim: usize,
    pub endpoint_url: Option<String>,
    pub api_key: Option<String>,
    pub model_name: String,
    pub timeout_ms: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            kind: "hashed-bow".into(),
            dim: HASHED_DIM,
            endpoint_url: None,
            api_key: None,
            model_name: "gte-large-en-v1.5".into(),
            timeout_ms: 60_000,
        }
    }
}

pub type EmbedderFactory = fn(&EmbedderConfig) -> Result<Box<dyn Embedder>>;

pub struct EmbedderRegistry {
    factories: BTreeMap<String, EmbedderFactory>,
}

impl Default for EmbedderRegistry {
    fn default() -> Self {
        let mut reg = EmbedderRegistry {
            factories: BTreeMap::new(),
        };
        reg.register("hashed-bow", |cfg| Ok(Box::new(HashedBowEmbedder::with_dim(cfg.dim)?)));
        reg.register("remote", |cfg| {
            let url = cfg
                .endpoint_url
                .as_deref()
                .ok_or_else(|| Error::Config(vec!["remote embedder requires endpoint_url".into()]))?;
            Ok(Box::new(RemoteEmbedder::new(
                url,
                cfg.api_key.clone(),
                &cfg.model_name,
                RetryPolicy::default(),
                Duration::from_millis(cfg.timeout_ms),
            )))
        });
        reg
    }
}

impl EmbedderRegistry {
    pub fn register(&mut self, name: &str, factory: EmbedderFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn build(&self, config: &EmbedderConfig) -> Result<Box<dyn Embedder>> {
        let factory = self
            .factories
            .get(&config.kind)
            .ok_or_else(|| Error::Config(vec![format!("unknown embedder kind `{}`", config.kind)]))?;
        factory(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub item_id: String,
    pub vector: EmbeddingVector,
}

/// Immutable exact-search index; all vectors share one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    dim: usize,
    entries: BTreeMap<String, EmbeddingVector>,
}

impl EmbeddingIndex {
    pub fn new(items: impl IntoIterator<Item = (String, EmbeddingVector)>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut dim = None;
        for (id, v) in items {
            match dim {
                None => dim = Some(v.dim()),
                Some(d) if d != v.dim() => {
                    return Err(Error::domain(format!(
                        "item `{id}` has dim {} but index dim is {d}",
                        v.dim()
                    )))
                }
                _ => {}
            }
            if entries.insert(id.clone(), v).is_some() {
                return Err(Error::DuplicateId(id));
            }
        }
        Ok(EmbeddingIndex {
            dim: dim.unwrap_or(0),
            entries,
        })
    }

    pub fn build(embedder: &dyn Embedder, items: &[(String, String)]) -> Result<Self> {
        if items.is_empty() {
            return Self::new(std::iter::empty());
        }
        let texts: Vec<String> = items.iter().map(|(_, t)| t.clone()).collect();
        let vectors = embedder.embed(&texts)?;
        Self::new(items.iter().map(|(id, _)| id.clone()).zip(vectors))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingVector> {
        self.entries.get(id)
    }

    /// Items ranked by descending cosine, ties by ascending id, truncated to k.
    pub fn top_k(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<(String, f64)>> {
        if k == 0 {
            return Err(Error::domain("k must be at least 1"));
        }
        if self.entries.is_empty() {
            return Err(Error::domain("top_k on an empty index"));
        }
        if query.dim() != self.dim {
            return Err(Error::domain(format!(
                "query dim {} does not match index dim {}",
                query.dim(),
                self.dim
            )));
        }
        let mut scored: Vec<(&String, f64)> = self.entries.iter().map(|(id, v)| (id, cosine(query, v))).collect();
        // BTreeMap iteration is already id-ascending, so a stable sort on
        // score alone keeps the id tie-break.
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal));
        Ok(scored.into_iter().take(k).map(|(id, s)| (id.clone(), s)).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let rows: Vec<IndexEntry> = self
            .entries
            .iter()
            .map(|(id, v)| IndexEntry {
                item_id: id.clone(),
                vector: v.clone(),
            })
            .collect();
        write_jsonl(path, &rows)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let rows: Vec<IndexEntry> = read_jsonl(path)?;
        let mut items = Vec::with_capacity(rows.len());
        for row in rows {
            items.push((row.item_id, EmbeddingVector::new(row.vector.0)?));
        }
        Self::new(items)
    }
}
