use std::collections::VecDeque;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Mutex;

use super::{ChatBackend, ChatRequest, ChatResponse, Usage};
use crate::error::{Error, Result};

type Script = dyn Fn(&ChatRequest, u32) -> Result<String> + Send + Sync;

/// Backend driven by a closure `(request, call_index) -> text`. Used for
/// oracle backends in tests and fixtures.
pub struct ScriptedBackend {
    script: Box<Script>,
    calls: AtomicU32,
}

impl ScriptedBackend {
    pub fn new(script: impl Fn(&ChatRequest, u32) -> Result<String> + Send + Sync + 'static) -> Self {
        ScriptedBackend {
            script: Box::new(script),
            calls: AtomicU32::new(0),
        }
    }

    pub fn constant(text: impl Into<String>) -> Self {
        let text = text.into();
        Self::new(move |_, _| Ok(text.clone()))
    }

    /// Returns the given responses in call order, then fails.
    pub fn sequence<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let queue: Mutex<VecDeque<String>> = Mutex::new(responses.into_iter().map(Into::into).collect());
        Self::new(move |_, call| {
            queue
                .lock()
                .expect("script queue")
                .pop_front()
                .ok_or_else(|| Error::BackendUnavailable {
                    attempts: 1,
                    last_status: format!("scripted sequence exhausted at call {call}"),
                })
        })
    }

    pub fn calls(&self) -> u32 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatBackend for ScriptedBackend {
    fn name(&self) -> &str {
        "scripted"
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse> {
        let call = self.calls.fetch_add(1, Ordering::SeqCst);
        let text = (self.script)(request, call)?;
        Ok(ChatResponse {
            text,
            usage: Usage::default(),
            attempts: 1,
        })
    }
}
