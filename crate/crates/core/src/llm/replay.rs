use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{BackendConfig, ChatBackend, ChatRequest, ChatResponse, LlmClient, Usage};
use crate::error::{Error, Result};
use crate::jsonl::{read_jsonl, write_jsonl};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub hash: String,
    pub response: String,
}

/// Recorded `request hash → response text` pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Cassette {
    entries: BTreeMap<String, String>,
}

impl Cassette {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, request: &ChatRequest, response: impl Into<String>) {
        self.entries.insert(request.hash(), response.into());
    }

    pub fn insert_hash(&mut self, hash: impl Into<String>, response: impl Into<String>) {
        self.entries.insert(hash.into(), response.into());
    }

    pub fn get(&self, hash: &str) -> Option<&str> {
        self.entries.get(hash).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(h, r)| (h.as_str(), r.as_str()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let rows: Vec<CassetteEntry> = read_jsonl(path)?;
        let mut c = Cassette::new();
        for row in rows {
            if c.entries.insert(row.hash.clone(), row.response).is_some() {
                return Err(Error::DuplicateId(row.hash));
            }
        }
        Ok(c)
    }

    /// Writes entries sorted by hash, one JSON object per line.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let rows: Vec<CassetteEntry> = self
            .entries
            .iter()
            .map(|(hash, response)| CassetteEntry {
                hash: hash.clone(),
                response: response.clone(),
            })
            .collect();
        write_jsonl(path, &rows)
    }
}

/// Serves cassette responses keyed by request hash.
pub struct ReplayBackend {
    cassette: Cassette,
}

impl ReplayBackend {
    pub fn new(cassette: Cassette) -> Self {
        ReplayBackend { cassette }
    }

    pub fn from_config(config: &BackendConfig) -> Result<Self> {
        let path = config
            .cassette
            .as_ref()
            .ok_or_else(|| Error::Config(vec!["replay backend requires a cassette path".into()]))?;
        Ok(Self::new(Cassette::load(path)?))
    }
}

impl ChatBackend for ReplayBackend {
    fn name(&self) -> &str {
        "replay"
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse> {
        let hash = request.hash();
        let text = self.cassette.get(&hash).ok_or(Error::ReplayMiss { hash })?.to_string();
        Ok(ChatResponse {
            text,
            usage: Usage::default(),
            attempts: 1,
        })
    }
}

/// Wraps another backend and remembers every successful exchange, so a live
/// (or scripted) run can be replayed later.
pub struct RecordingBackend {
    inner: Arc<dyn ChatBackend>,
    tape: Mutex<Cassette>,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn ChatBackend>) -> Self {
        RecordingBackend {
            inner,
            tape: Mutex::new(Cassette::new()),
        }
    }

    pub fn cassette(&self) -> Cassette {
        self.tape.lock().expect("cassette lock").clone()
    }
}

impl ChatBackend for RecordingBackend {
    fn name(&self) -> &str {
        "recording"
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse> {
        let response = self.inner.complete(request)?;
        self.tape
            .lock()
            .expect("cassette lock")
            .insert(request, response.text.clone());
        Ok(response)
    }
}

/// Runs `requests` through `client` and writes the responses as a cassette.
/// Any failed request aborts recording before the file is written.
pub fn record_cassette(client: &LlmClient, requests: &[ChatRequest], output: impl AsRef<Path>) -> Result<Cassette> {
    let mut cassette = Cassette::new();
    for (req, result) in requests.iter().zip(client.complete_batch(requests)) {
        cassette.insert(req, result?.text);
    }
    cassette.save(output)?;
    Ok(cassette)
}
