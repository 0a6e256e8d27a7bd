//! Language-model post-correction, direct page transcription and
//! translation behind a pluggable [`Provider`].

mod cache;
mod http;
mod prompts;
mod provider;

pub use cache::CachedProvider;
pub use http::{ApiKind, HttpProvider, ProviderConfig};
pub use prompts::{CORRECTION_PROMPT, TRANSCRIPTION_PROMPT, TRANSLATION_PROMPT};
pub use provider::{MockProvider, MockReply, Provider, ProviderError, Request, RetryPolicy};

use serde::{Deserialize, Serialize};

use crate::lineproc::RasterImage;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CorrectError {
    #[error("no input lines")]
    EmptyInput,
    #[error("provider does not accept images")]
    ImagesUnsupported,
    #[error("provider returned no output")]
    NoOutput,
    #[error("provider returned an empty reply")]
    EmptyReply,
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// Outcome of [`correct_transcription`]. When `fallback` is set the lines are
/// the unmodified input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionResult {
    pub lines: Vec<String>,
    pub changed: Vec<bool>,
    pub attempts: u32,
    pub fallback: bool,
}

/// Splits a reply into lines, dropping a trailing newline and any `\r`.
fn reply_lines(reply: &str) -> Vec<String> {
    let body = reply.strip_suffix('\n').unwrap_or(reply);
    let body = body.strip_suffix('\r').unwrap_or(body);
    body.split('\n')
        .map(|l| l.strip_suffix('\r').unwrap_or(l).to_string())
        .collect()
}

/// Asks the provider to fix recognition errors in `lines`. The image is not
/// sent. A reply with a different number of lines is rejected and the request
/// repeated up to the provider's retry count; if every attempt disagrees the
/// input comes back unchanged with `fallback` set. Provider failures are
/// returned as errors, not folded into the fallback.
pub fn correct_transcription<S: AsRef<str>>(
    lines: &[S],
    provider: &dyn Provider,
) -> Result<CorrectionResult, CorrectError> {
    if lines.is_empty() {
        return Err(CorrectError::EmptyInput);
    }
    let input: Vec<String> = lines.iter().map(|l| l.as_ref().to_string()).collect();
    let req = Request {
        system: CORRECTION_PROMPT.to_string(),
        user: input.join("\n"),
        image_png: None,
    };
    let policy = provider.retry_policy();
    let mut attempts = 0;
    loop {
        attempts += 1;
        let out = reply_lines(&provider.complete(&req)?);
        if out.len() == input.len() {
            let changed = input.iter().zip(&out).map(|(a, b)| a != b).collect();
            return Ok(CorrectionResult {
                lines: out,
                changed,
                attempts,
                fallback: false,
            });
        }
        tracing::warn!(
            expected = input.len(),
            got = out.len(),
            attempts,
            "correction changed the line count"
        );
        if attempts > policy.max_retries {
            return Ok(CorrectionResult {
                changed: vec![false; input.len()],
                lines: input,
                attempts,
                fallback: true,
            });
        }
        policy.wait();
    }
}

/// Sends a page image with the transcription prompt and returns the lines of
/// the reply as given, minus blank lines. The line count is not checked since
/// there is nothing to check it against; compare with segmentation output.
pub fn llm_transcribe(image: &RasterImage, provider: &dyn Provider) -> Result<Vec<String>, CorrectError> {
    if !provider.supports_images() {
        return Err(CorrectError::ImagesUnsupported);
    }
    let req = Request {
        system: String::new(),
        user: TRANSCRIPTION_PROMPT.to_string(),
        image_png: Some(image.to_png(false)),
    };
    let lines: Vec<String> = reply_lines(&provider.complete(&req)?)
        .into_iter()
        .filter(|l| !l.trim().is_empty())
        .collect();
    if lines.is_empty() {
        return Err(CorrectError::NoOutput);
    }
    Ok(lines)
}

/// English translation of the lines as one block of text.
pub fn translate<S: AsRef<str>>(lines: &[S], provider: &dyn Provider) -> Result<String, CorrectError> {
    if lines.is_empty() {
        return Err(CorrectError::EmptyInput);
    }
    let user: Vec<&str> = lines.iter().map(AsRef::as_ref).collect();
    let req = Request {
        system: TRANSLATION_PROMPT.to_string(),
        user: user.join("\n"),
        image_png: None,
    };
    let text = provider.complete(&req)?;
    if text.trim().is_empty() {
        return Err(CorrectError::EmptyReply);
    }
    Ok(text)
}
