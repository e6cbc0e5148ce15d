use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;

use super::{canonical_json, canonical_key, Endpoint, Transport};
use crate::error::{Error, Result};

/// Replays responses stored at `root/<endpoint>/<canonical key>.json`.
#[derive(Debug, Clone)]
pub struct FixtureTransport {
    root: PathBuf,
}

impl FixtureTransport {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        if !root.is_dir() {
            return Err(Error::io(
                &root,
                std::io::Error::new(std::io::ErrorKind::NotFound, "fixture root is not a directory"),
            ));
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, endpoint: Endpoint, key: &str) -> PathBuf {
        fixture_path(&self.root, endpoint, key)
    }
}

fn fixture_path(root: &Path, endpoint: Endpoint, key: &str) -> PathBuf {
    root.join(endpoint.name()).join(format!("{key}.json"))
}

impl Transport for FixtureTransport {
    fn call(&self, endpoint: Endpoint, body: &Value) -> Result<Value> {
        let key = canonical_key(endpoint, body);
        let path = self.path_for(endpoint, &key);
        let text = match fs::read_to_string(&path) {
            Ok(text) => text,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::FixtureMissing {
                    endpoint: endpoint.name().to_string(),
                    key,
                })
            }
            Err(e) => return Err(Error::io(path, e)),
        };
        serde_json::from_str(&text).map_err(|e| Error::schema(path.display().to_string(), e))
    }
}

/// Forwards to an inner transport and stores every successful response as a fixture.
pub struct RecordingTransport<T> {
    inner: T,
    root: PathBuf,
}

impl<T: Transport> RecordingTransport<T> {
    pub fn new(inner: T, root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        for endpoint in Endpoint::ALL {
            let dir = root.join(endpoint.name());
            fs::create_dir_all(&dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(Self { inner, root })
    }

    pub fn into_inner(self) -> T {
        self.inner
    }
}

impl<T: Transport> Transport for RecordingTransport<T> {
    fn call(&self, endpoint: Endpoint, body: &Value) -> Result<Value> {
        let response = self.inner.call(endpoint, body)?;
        let path = fixture_path(&self.root, endpoint, &canonical_key(endpoint, body));
        let mut text = canonical_json(&response);
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(path, e))?;
        Ok(response)
    }
}
