//! Text-generation clients: request text in, response text out.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::Deserialize;

use crate::error::{Error, Result};

pub trait TextClient: Send + Sync {
    fn complete(&self, request: &str) -> Result<String>;
}

impl<T: TextClient + ?Sized> TextClient for &T {
    fn complete(&self, request: &str) -> Result<String> {
        (**self).complete(request)
    }
}

impl<T: TextClient + ?Sized> TextClient for Box<T> {
    fn complete(&self, request: &str) -> Result<String> {
        (**self).complete(request)
    }
}

/// Returns every request unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoClient;

impl TextClient for EchoClient {
    fn complete(&self, request: &str) -> Result<String> {
        Ok(request.to_owned())
    }
}

/// Replays recorded responses in order, regardless of the request.
#[derive(Debug)]
pub struct FixtureClient {
    responses: Vec<String>,
    next: AtomicUsize,
}

#[derive(Deserialize)]
struct FixtureFile {
    responses: Vec<String>,
}

impl FixtureClient {
    pub fn new(responses: Vec<String>) -> Self {
        Self {
            responses,
            next: AtomicUsize::new(0),
        }
    }

    /// Reads `{"responses": [...]}`.
    pub fn from_json(text: &str) -> Result<Self> {
        let f: FixtureFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        Ok(Self::new(f.responses))
    }

    pub fn remaining(&self) -> usize {
        self.responses.len().saturating_sub(self.next.load(Ordering::SeqCst))
    }
}

impl TextClient for FixtureClient {
    fn complete(&self, _request: &str) -> Result<String> {
        let i = self.next.fetch_add(1, Ordering::SeqCst);
        self.responses.get(i).cloned().ok_or_else(|| Error::Transport {
            attempts: 1,
            message: format!("fixture exhausted after {} responses", self.responses.len()),
        })
    }
}

/// Retries transport failures up to `max_attempts` times in total.
#[derive(Debug)]
pub struct RetryClient<C> {
    inner: C,
    max_attempts: usize,
}

impl<C: TextClient> RetryClient<C> {
    pub fn new(inner: C, max_attempts: usize) -> Self {
        Self {
            inner,
            max_attempts: max_attempts.max(1),
        }
    }

    pub fn inner(&self) -> &C {
        &self.inner
    }
}

impl<C: TextClient> TextClient for RetryClient<C> {
    fn complete(&self, request: &str) -> Result<String> {
        let mut last = String::new();
        for attempt in 1..=self.max_attempts {
            match self.inner.complete(request) {
                Ok(r) => return Ok(r),
                Err(Error::Transport { message, .. }) => {
                    log::warn!("client attempt {attempt}/{} failed: {message}", self.max_attempts);
                    last = message;
                }
                Err(e) => return Err(e),
            }
        }
        Err(Error::Transport {
            attempts: self.max_attempts,
            message: last,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Down;

    impl TextClient for Down {
        fn complete(&self, _: &str) -> Result<String> {
            Err(Error::Transport {
                attempts: 1,
                message: "connection refused".into(),
            })
        }
    }

    #[test]
    fn fixture_replays_then_fails() {
        let c = FixtureClient::from_json(r#"{"responses": ["a", "b"]}"#).unwrap();
        assert_eq!(c.complete("x").unwrap(), "a");
        assert_eq!(c.complete("y").unwrap(), "b");
        assert!(matches!(c.complete("z"), Err(Error::Transport { .. })));
    }

    #[test]
    fn retry_counts_attempts() {
        match RetryClient::new(Down, 3).complete("q") {
            Err(Error::Transport { attempts, message }) => {
                assert_eq!(attempts, 3);
                assert_eq!(message, "connection refused");
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(EchoClient.complete("hi").unwrap(), "hi");
    }
}
