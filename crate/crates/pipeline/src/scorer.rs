//! Client side of the verifier scoring protocol, and score-file import.
//!
//! A verifier is a set of deployments, one per held-out fold. Each answers
//! `GET /info` with `{"trained_on_folds": [...]}` and
//! `POST /score {"context", "claim", "fold"}` with `{"prob": p}`.

use std::collections::BTreeSet;
use std::io::BufRead;
use std::path::Path;
use std::time::Duration;

use factcheck_core::gateway::{validate_score, FoldPlan, ScoreRequest, Scorer, VerifierScore};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScorerError {
    #[error("{url}: {message}")]
    Transport { url: String, message: String },
    #[error("{url}: status {status}: {body}")]
    Status { url: String, status: u16, body: String },
    #[error("{url}: malformed response: {message}")]
    Protocol { url: String, message: String },
    #[error("scorer {scorer}: no deployment is held out on fold {fold}")]
    NoDeployment { scorer: String, fold: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfoResponse {
    pub trained_on_folds: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub prob: f64,
}

struct Deployment {
    url: String,
    trained_on: BTreeSet<usize>,
}

/// Live verifier over HTTP. Deployment metadata is fetched once, at connect.
pub struct HttpScorer {
    id: String,
    agent: ureq::Agent,
    deployments: Vec<Deployment>,
}

impl HttpScorer {
    pub fn connect(id: &str, urls: &[String], timeout: Duration) -> Result<Self, ScorerError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut deployments = Vec::with_capacity(urls.len());
        for base in urls {
            let url = format!("{}/info", base.trim_end_matches('/'));
            let info: InfoResponse = get_json(&agent, &url)?;
            deployments.push(Deployment { url: base.trim_end_matches('/').to_string(), trained_on: info.trained_on_folds });
        }
        Ok(Self { id: id.to_string(), agent, deployments })
    }

    fn deployment_for(&self, fold: usize) -> Result<&Deployment, ScorerError> {
        self.deployments
            .iter()
            .find(|d| !d.trained_on.contains(&fold))
            .ok_or(ScorerError::NoDeployment { scorer: self.id.clone(), fold })
    }
}

fn read_body(url: &str, mut resp: ureq::http::Response<ureq::Body>) -> Result<String, ScorerError> {
    let status = resp.status().as_u16();
    let body = resp
        .body_mut()
        .read_to_string()
        .map_err(|e| ScorerError::Transport { url: url.to_string(), message: e.to_string() })?;
    if !(200..300).contains(&status) {
        return Err(ScorerError::Status { url: url.to_string(), status, body: body.chars().take(200).collect() });
    }
    Ok(body)
}

fn get_json<T: for<'de> Deserialize<'de>>(agent: &ureq::Agent, url: &str) -> Result<T, ScorerError> {
    let resp = agent
        .get(url)
        .call()
        .map_err(|e| ScorerError::Transport { url: url.to_string(), message: e.to_string() })?;
    let body = read_body(url, resp)?;
    serde_json::from_str(&body).map_err(|e| ScorerError::Protocol { url: url.to_string(), message: e.to_string() })
}

impl Scorer for HttpScorer {
    type Error = ScorerError;

    fn scorer_id(&self) -> &str {
        &self.id
    }

    fn trained_on_folds(&self, test_fold: usize) -> Result<BTreeSet<usize>, ScorerError> {
        Ok(self.deployment_for(test_fold)?.trained_on.clone())
    }

    fn score(&self, request: &ScoreRequest<'_>) -> Result<f64, ScorerError> {
        let d = self.deployment_for(request.fold)?;
        let url = format!("{}/score", d.url);
        let resp = self
            .agent
            .post(&url)
            .send_json(json!({ "context": request.context, "claim": request.claim, "fold": request.fold }))
            .map_err(|e| ScorerError::Transport { url: url.clone(), message: e.to_string() })?;
        let body = read_body(&url, resp)?;
        let parsed: ScoreResponse =
            serde_json::from_str(&body).map_err(|e| ScorerError::Protocol { url: url.clone(), message: e.to_string() })?;
        Ok(parsed.prob)
    }
}

/// Read a JSON-lines score file, applying the same range and leakage
/// checks as live collection.
pub fn import_scores(path: &Path, plan: &FoldPlan) -> Result<Vec<VerifierScore>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let score: VerifierScore = serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        validate_score::<std::convert::Infallible>(plan, &score)
            .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        out.push(score);
    }
    Ok(out)
}
