use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{ClientError, HttpResponse, Transport, TransportFailure};
use crate::util;

/// One recorded request with every response it received, in call order.
///
/// Request bodies are stored as canonical JSON text; bearer tokens are never
/// recorded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub key: String,
    pub path: String,
    pub request: String,
    pub responses: Vec<HttpResponse>,
}

fn request_key(path: &str, body: &str) -> String {
    let mut buf = Vec::with_capacity(path.len() + body.len() + 1);
    buf.extend_from_slice(path.as_bytes());
    buf.push(0);
    buf.extend_from_slice(body.as_bytes());
    util::sha256_hex(&buf)
}

/// Serves responses from a cassette file; never touches the network.
///
/// Repeated identical requests walk through the recorded responses in order
/// and then keep returning the last one.
pub struct CassetteTransport {
    source: String,
    entries: HashMap<String, (Vec<HttpResponse>, AtomicUsize)>,
}

impl CassetteTransport {
    pub fn load(path: &Path) -> Result<Self, ClientError> {
        let entries: Vec<CassetteEntry> = util::read_jsonl(path).map_err(|e| ClientError::Cassette {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(Self::from_entries(path.display().to_string(), entries))
    }

    pub fn from_entries(source: impl Into<String>, entries: Vec<CassetteEntry>) -> Self {
        CassetteTransport {
            source: source.into(),
            entries: entries
                .into_iter()
                .map(|e| (e.key, (e.responses, AtomicUsize::new(0))))
                .collect(),
        }
    }
}

impl Transport for CassetteTransport {
    fn post(&self, path: &str, body: &str, _bearer: Option<&str>) -> Result<HttpResponse, TransportFailure> {
        let key = request_key(path, body);
        match self.entries.get(&key) {
            Some((responses, cursor)) if !responses.is_empty() => {
                let i = cursor.fetch_add(1, Ordering::SeqCst).min(responses.len() - 1);
                Ok(responses[i].clone())
            }
            _ => {
                // 404-style terminal answer so the retry loop does not spin.
                let miss = ClientError::CassetteMiss {
                    cassette: self.source.clone(),
                    path: path.to_owned(),
                    key,
                };
                Ok(HttpResponse {
                    status: 418,
                    body: miss.to_string(),
                })
            }
        }
    }
}

/// Wraps another transport and records every exchange.
pub struct RecordingTransport {
    inner: Arc<dyn Transport>,
    path: PathBuf,
    log: Mutex<BTreeMap<String, CassetteEntry>>,
}

impl RecordingTransport {
    pub fn new(inner: Arc<dyn Transport>, path: PathBuf) -> Self {
        RecordingTransport {
            inner,
            path,
            log: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn entries(&self) -> Vec<CassetteEntry> {
        self.log
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .values()
            .cloned()
            .collect()
    }
}

impl Transport for RecordingTransport {
    fn post(&self, path: &str, body: &str, bearer: Option<&str>) -> Result<HttpResponse, TransportFailure> {
        let resp = self.inner.post(path, body, bearer)?;
        let key = request_key(path, body);
        let mut log = self.log.lock().unwrap_or_else(|e| e.into_inner());
        log.entry(key.clone())
            .or_insert_with(|| CassetteEntry {
                key,
                path: path.to_owned(),
                request: body.to_owned(),
                responses: Vec::new(),
            })
            .responses
            .push(resp.clone());
        Ok(resp)
    }

    /// Writes entries sorted by key, so concurrent recording is reproducible.
    fn flush(&self) -> Result<(), ClientError> {
        util::write_jsonl(&self.path, &self.entries()).map_err(|e| ClientError::Cassette {
            path: self.path.display().to_string(),
            message: e.to_string(),
        })
    }
}
