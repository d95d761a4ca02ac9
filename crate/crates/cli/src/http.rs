use std::time::Duration;

use compvid::client::TextClient;
use compvid::{Error, Result};

/// Plain-text POST client: the request is the body, the response body is the
/// completion.
pub struct HttpClient {
    agent: ureq::Agent,
    url: String,
}

impl HttpClient {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder().timeout_global(Some(timeout)).build();
        Self {
            agent: ureq::Agent::new_with_config(config),
            url: url.into(),
        }
    }
}

fn transport(e: ureq::Error) -> Error {
    Error::Transport {
        attempts: 1,
        message: e.to_string(),
    }
}

impl TextClient for HttpClient {
    fn complete(&self, request: &str) -> Result<String> {
        let mut resp = self
            .agent
            .post(&self.url)
            .content_type("text/plain; charset=utf-8")
            .send(request)
            .map_err(transport)?;
        resp.body_mut().read_to_string().map_err(transport)
    }
}
