//! Recaption and caption-consolidation requests.

use crate::client::TextClient;
use crate::error::{Error, Result};
use crate::templates::{fill, RECAPTION_TEMPLATE};

/// The recaption template with `caption` in its slot.
pub fn build_recaption_request(caption: &str) -> Result<String> {
    if caption.trim().is_empty() {
        return Err(Error::validation("caption", "must not be empty"));
    }
    Ok(fill(RECAPTION_TEMPLATE, caption))
}

/// One request listing the original caption and every candidate caption.
pub fn build_consolidation_request(original: &str, captions: &[String]) -> Result<String> {
    if captions.is_empty() {
        return Err(Error::validation("captions", "need at least one caption"));
    }
    let mut req = String::from(
        "Merge the candidate captions below into a single caption for the same clip. \
         Keep the elements they agree on and add details that none of them contradicts.\n\n",
    );
    req.push_str(&format!("Original caption: {original}\n"));
    for (i, c) in captions.iter().enumerate() {
        req.push_str(&format!("Caption {}: {c}\n", i + 1));
    }
    req.push_str("Consolidated caption: ");
    Ok(req)
}

/// Sends the consolidation request and returns the response verbatim.
pub fn consolidate_captions(original: &str, captions: &[String], client: &dyn TextClient) -> Result<String> {
    client.complete(&build_consolidation_request(original, captions)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::EchoClient;

    #[test]
    fn recaption_keeps_newlines_and_rejects_empty() {
        let r = build_recaption_request("two lines\nof caption").unwrap();
        assert!(r.contains("Original Caption: two lines\nof caption\nRecaption: "));
        assert!(build_recaption_request("  ").is_err());
    }

    #[test]
    fn echo_payload_lists_every_caption() {
        let caps = vec!["a red car".to_string(), "a car on a road".into(), "a fast car".into()];
        let out = consolidate_captions("a car", &caps, &EchoClient).unwrap();
        for c in &caps {
            assert!(out.contains(c.as_str()));
        }
        assert!(out.contains("Caption 3: a fast car\n"));
        assert!(consolidate_captions("a car", &[], &EchoClient).is_err());
    }
}
