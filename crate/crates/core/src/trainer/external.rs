//! Filesystem handshake with a trainer running in another process.
//!
//! For trial `t` the engine writes `trial_{t}/weights/` (a weights container)
//! and then `trial_{t}/request.json`. The trainer answers with a trained
//! container and `trial_{t}/response.json`, or a response holding an
//! `error` string, which aborts the search. Relative paths in the response
//! are resolved against the trial directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::container::{read_weights, write_weights};
use crate::error::{Error, Result};
use crate::plan::ChannelPlan;
use crate::trainer::{shapes_of, validate_response, TrainRequest, TrainResponse, Trainer};

pub const REQUEST_FILE: &str = "request.json";
pub const RESPONSE_FILE: &str = "response.json";
pub const POLL_INTERVAL: Duration = Duration::from_millis(200);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestFile {
    pub trial: usize,
    pub epochs: usize,
    pub seed: u64,
    pub plan: ChannelPlan,
    pub weights_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseFile {
    pub trial: usize,
    pub trained_weights_dir: PathBuf,
    pub train_loss: f64,
    pub train_acc: f64,
}

pub fn trial_dir(protocol_dir: &Path, trial: usize) -> PathBuf {
    protocol_dir.join(format!("trial_{trial}"))
}

/// Writes `contents` next to `path` and renames it into place, so a poller
/// never sees a half-written file.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// A response is either a [`ResponseFile`] or `{"trial": t, "error": "..."}`.
fn parse_response(text: &str) -> Result<ResponseFile> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    if let Some(message) = value.get("error").and_then(|e| e.as_str()) {
        let trial = value.get("trial").and_then(|t| t.as_u64()).unwrap_or(0) as usize;
        return Err(Error::Trainer {
            trial,
            message: format!("external trainer reported: {message}"),
        });
    }
    Ok(serde_json::from_value(value)?)
}

#[derive(Debug, Clone)]
pub struct ExternalTrainer {
    pub protocol_dir: PathBuf,
    pub timeout: Duration,
}

impl ExternalTrainer {
    pub fn new(protocol_dir: impl Into<PathBuf>, timeout: Duration) -> Self {
        Self {
            protocol_dir: protocol_dir.into(),
            timeout,
        }
    }

    fn exchange(&self, request: &TrainRequest<'_>) -> Result<TrainResponse> {
        let dir = trial_dir(&self.protocol_dir, request.trial);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let response_path = dir.join(RESPONSE_FILE);
        if response_path.exists() {
            fs::remove_file(&response_path).map_err(|e| Error::io(&response_path, e))?;
        }
        let weights_dir = dir.join("weights");
        write_weights(request.weights, &weights_dir)?;
        let body = RequestFile {
            trial: request.trial,
            epochs: request.epochs,
            seed: request.seed,
            plan: request.plan.clone(),
            weights_dir: weights_dir.clone(),
        };
        write_atomic(&dir.join(REQUEST_FILE), &serde_json::to_string_pretty(&body)?)?;

        let start = Instant::now();
        let response = loop {
            match fs::read_to_string(&response_path) {
                Ok(text) => match parse_response(&text) {
                    Ok(r) => break r,
                    Err(e @ Error::Trainer { .. }) => return Err(e),
                    Err(e) if start.elapsed() >= self.timeout => {
                        return Err(Error::invalid(format!("malformed {}: {e}", response_path.display())))
                    }
                    Err(_) => {}
                },
                Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(Error::io(&response_path, e)),
                Err(_) => {}
            }
            if start.elapsed() >= self.timeout {
                return Err(Error::invalid(format!(
                    "no response in {} after {:.1}s",
                    dir.display(),
                    self.timeout.as_secs_f64()
                )));
            }
            std::thread::sleep(POLL_INTERVAL);
        };
        let trained_dir = if response.trained_weights_dir.is_absolute() {
            response.trained_weights_dir.clone()
        } else {
            dir.join(&response.trained_weights_dir)
        };
        let weights = read_weights(&trained_dir)?;
        let out = TrainResponse {
            trial: response.trial,
            weights,
            train_loss: response.train_loss,
            train_acc: response.train_acc,
        };
        validate_response(&shapes_of(request.weights), &out, request.trial)?;
        Ok(out)
    }
}

impl Trainer for ExternalTrainer {
    fn name(&self) -> &str {
        "external"
    }

    fn train(&mut self, request: &TrainRequest<'_>) -> Result<TrainResponse> {
        self.exchange(request).map_err(|e| match e {
            e @ Error::Trainer { .. } => e,
            other => Error::Trainer {
                trial: request.trial,
                message: other.to_string(),
            },
        })
    }
}
