use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::{ChatBackend, ChatRequest, ChatResponse, ProviderError};

type Responder = dyn Fn(&ChatRequest) -> Result<String, ProviderError> + Send + Sync;

/// Backend answering from a script: a queue, a lookup table, or a closure.
/// Counts every call it serves.
pub struct ScriptedBackend {
    responder: Box<Responder>,
    calls: AtomicUsize,
}

impl ScriptedBackend {
    pub fn from_fn(
        f: impl Fn(&ChatRequest) -> Result<String, ProviderError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            responder: Box::new(f),
            calls: AtomicUsize::new(0),
        }
    }

    /// Answers calls in order; errors once the queue is drained.
    pub fn sequence<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let queue: Mutex<VecDeque<String>> =
            Mutex::new(responses.into_iter().map(Into::into).collect());
        Self::from_fn(move |_| {
            queue
                .lock()
                .unwrap()
                .pop_front()
                .ok_or_else(|| ProviderError::Unsupported("script exhausted".into()))
        })
    }

    /// Answers by `(instance id, round)` taken from the request context.
    pub fn by_instance_round(table: HashMap<(String, u32), String>) -> Self {
        Self::from_fn(move |req| {
            let ctx = req
                .context
                .as_ref()
                .ok_or_else(|| ProviderError::Unsupported("request has no context".into()))?;
            table
                .get(&(ctx.instance_id.clone(), ctx.round))
                .cloned()
                .ok_or_else(|| {
                    ProviderError::Unsupported(format!(
                        "no script for {} round {}",
                        ctx.instance_id, ctx.round
                    ))
                })
        })
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        (self.responder)(request).map(ChatResponse::text)
    }

    fn describe(&self) -> String {
        "scripted".into()
    }
}
