use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::provider::{Provider, ProviderError, Request, RetryPolicy};

/// Wraps a provider with an on-disk response cache. Entries are keyed by the
/// SHA-256 of the provider identity and the full request, so a changed prompt,
/// input or model never hits a stale entry. Failures are not cached.
#[derive(Debug)]
pub struct CachedProvider<P> {
    inner: P,
    dir: PathBuf,
}

impl<P: Provider> CachedProvider<P> {
    pub fn new(inner: P, dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(CachedProvider { inner, dir })
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }

    pub fn key(&self, req: &Request) -> String {
        let mut h = Sha256::new();
        for part in [self.inner.identity().as_bytes(), req.system.as_bytes(), req.user.as_bytes()] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part);
        }
        if let Some(img) = &req.image_png {
            h.update((img.len() as u64).to_le_bytes());
            h.update(img);
        }
        hex::encode(h.finalize())
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.txt"))
    }
}

fn write_atomic(path: &Path, text: &str) -> std::io::Result<()> {
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)
}

impl<P: Provider> Provider for CachedProvider<P> {
    fn complete(&self, req: &Request) -> Result<String, ProviderError> {
        let path = self.path(&self.key(req));
        if let Ok(text) = std::fs::read_to_string(&path) {
            tracing::debug!(path = %path.display(), "provider cache hit");
            return Ok(text);
        }
        let text = self.inner.complete(req)?;
        if let Err(e) = write_atomic(&path, &text) {
            tracing::warn!(error = %e, "could not write provider cache entry");
        }
        Ok(text)
    }

    fn supports_images(&self) -> bool {
        self.inner.supports_images()
    }

    fn retry_policy(&self) -> RetryPolicy {
        self.inner.retry_policy()
    }

    fn identity(&self) -> String {
        self.inner.identity()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correct::{MockProvider, MockReply};

    #[test]
    fn second_identical_request_is_served_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let mock = MockProvider::scripted(vec![
            MockReply::Text("first".into()),
            MockReply::Text("second".into()),
        ]);
        let c = CachedProvider::new(&mock, dir.path()).unwrap();
        let r = Request {
            system: "s".into(),
            user: "u".into(),
            image_png: None,
        };
        assert_eq!(c.complete(&r).unwrap(), "first");
        assert_eq!(c.complete(&r).unwrap(), "first");
        assert_eq!(mock.requests().len(), 1);
        let other = Request {
            user: "v".into(),
            ..r
        };
        assert_eq!(c.complete(&other).unwrap(), "second");
    }

    #[test]
    fn failures_are_not_cached() {
        let dir = tempfile::tempdir().unwrap();
        let mock = MockProvider::scripted(vec![MockReply::Fail("down".into()), MockReply::Echo]);
        let c = CachedProvider::new(&mock, dir.path()).unwrap();
        let r = Request {
            system: "s".into(),
            user: "u".into(),
            image_png: None,
        };
        assert!(c.complete(&r).is_err());
        assert_eq!(c.complete(&r).unwrap(), "u");
    }
}
